use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use tilevlm::cost::{self, CostReport};
use tilevlm::decoder::DecoderConfig;
use tilevlm::encoder::EncoderConfig;
use tilevlm::eval::{self, combine_seeds, comparison_table, evaluate_model, EvalResult, Metric, TaskSpec};
use tilevlm::experiment::{self, RunConfig};
use tilevlm::fusion::fusion_order;
use tilevlm::grid::{split_into_tiles, GridShape, GridSpec};
use tilevlm::image::{read_image, write_png};
use tilevlm::manifest::{with_manifest, RunManifest, MANIFEST_FILE};
use tilevlm::pipeline::Pipeline;
use tilevlm::train::PREFIXES;
use tilevlm::{Error, Result};

use crate::{CostArgs, Command, EvalArgs, Format, GenArgs, InspectArgs, Preset, ReplayArgs, TaskArgs, TileArgs, TrainArgs, OUTPUT_ROOT_ENV};

pub fn dispatch(cmd: Command, threads: Option<usize>) -> Result<()> {
    match cmd {
        Command::Tile(a) => tile(a, threads),
        Command::Gen(a) => gen(a, threads),
        Command::Train(a) => train(a, threads),
        Command::Eval(a) => evaluate(a, threads),
        Command::Cost(a) => cost_cmd(a, threads),
        Command::InspectCheckpoint(a) => inspect(a),
        Command::Replay(a) => replay(a, threads),
    }
}

/// Relative output paths are placed under `$TILEVLM_OUTPUT_ROOT` when set.
fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if p.is_relative() => PathBuf::from(root).join(p),
        _ => p.to_path_buf(),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn manifest(command: &str, seed: u64, config: &impl Serialize, threads: Option<usize>, inputs: &[&Path]) -> Result<RunManifest> {
    let mut m = RunManifest::new(command, seed, config)?;
    m.threads = threads;
    m.inputs = inputs.iter().map(|p| p.to_path_buf()).collect();
    Ok(m)
}

fn task_spec(args: &TaskArgs) -> Result<TaskSpec> {
    match (&args.task, &args.task_config) {
        (_, Some(path)) => {
            let text = read_text(path)?;
            let spec: TaskSpec = if path.extension().is_some_and(|e| e == "json") {
                serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
            } else {
                toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
            };
            spec.validate().map_err(|e| Error::Config(e.to_string()))?;
            Ok(spec)
        }
        (Some(kind), None) => Ok(TaskSpec::default_for(*kind)),
        (None, None) => Err(Error::Config("pass --task or --task-config".into())),
    }
}

#[derive(Serialize)]
struct TileConfig {
    image: PathBuf,
    grid: GridSpec,
}

#[derive(Serialize)]
struct TileEntry {
    order: usize,
    provenance: String,
    file: String,
    /// Top-left corner in canvas pixels; absent for the global view.
    canvas_origin: Option<(usize, usize)>,
}

#[derive(Serialize)]
struct TileIndex {
    grid: String,
    view_side: usize,
    canvas: (usize, usize),
    input_size: (usize, usize),
    views: Vec<TileEntry>,
}

fn tile(a: TileArgs, threads: Option<usize>) -> Result<()> {
    let spec = GridSpec::new(a.grid.rows, a.grid.cols, a.grid.include_global || a.global, a.view_side)
        .map_err(|e| Error::Config(e.to_string()))?;
    let out = output_path(&a.out);
    create_dir(&out)?;
    let cfg = TileConfig {
        image: a.image.clone(),
        grid: spec,
    };
    let m = manifest("tile", 0, &cfg, threads, &[&a.image])?;
    with_manifest(&out.join(MANIFEST_FILE), m, |m| {
        let img = read_image(&a.image)?;
        let tiles = split_into_tiles(&img, &spec)?;
        let mut views = Vec::new();
        for (order, (view, prov)) in tiles.views().zip(fusion_order(spec.tile_count(), spec.include_global)).enumerate() {
            let file = format!("{order:02}_{prov}.png");
            write_png(view, &out.join(&file))?;
            m.outputs.push(out.join(&file));
            let canvas_origin = match prov {
                tilevlm::fusion::Provenance::Tile(t) => Some((t / spec.cols * spec.view_side, t % spec.cols * spec.view_side)),
                tilevlm::fusion::Provenance::Global => None,
            };
            views.push(TileEntry {
                order,
                provenance: prov.to_string(),
                file,
                canvas_origin,
            });
        }
        let index = TileIndex {
            grid: spec.label(),
            view_side: spec.view_side,
            canvas: spec.canvas_size(),
            input_size: (img.height(), img.width()),
            views,
        };
        write_json(&out.join("tiles.json"), &index)?;
        m.outputs.push(out.join("tiles.json"));
        println!("{} views of {} written to {}", index.views.len(), spec.label(), out.display());
        Ok(())
    })?;
    Ok(())
}

#[derive(Serialize)]
struct GenConfig {
    task: TaskSpec,
    n: usize,
    offset: usize,
    seed: u64,
}

fn gen(a: GenArgs, threads: Option<usize>) -> Result<()> {
    let cfg = GenConfig {
        task: task_spec(&a.task)?,
        n: a.n,
        offset: a.offset,
        seed: a.seed,
    };
    let out = output_path(&a.out);
    create_dir(&out)?;
    let m = manifest("gen", a.seed, &cfg, threads, &[])?;
    with_manifest(&out.join(MANIFEST_FILE), m, |m| {
        let samples = cfg.task.source(cfg.seed)?.samples(cfg.offset..cfg.offset + cfg.n);
        eval::write_samples(&out, &samples)?;
        m.outputs.push(out.join(eval::INDEX_FILE));
        println!("{} {} samples written to {}", samples.len(), cfg.task.kind(), out.display());
        Ok(())
    })?;
    Ok(())
}

fn train(a: TrainArgs, threads: Option<usize>) -> Result<()> {
    let mut cfg = RunConfig::from_path(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if threads.is_some() {
        cfg.threads = threads;
    }
    let out = output_path(&a.out);
    let o = experiment::run_experiment(&cfg, Some(&out))?;
    let mut m = RunManifest::load(&out.join(MANIFEST_FILE))?;
    m.inputs.push(a.config.clone());
    m.write(&out.join(MANIFEST_FILE))?;
    print_outcome(&o);
    Ok(())
}

fn print_outcome(o: &experiment::ExperimentOutcome) {
    let fmt = |v: Option<f64>| v.map_or("-".into(), |x| format!("{x:.4}"));
    println!(
        "pretrain loss {} -> {}",
        fmt(o.pretrain.initial_loss()),
        fmt(o.pretrain.final_loss())
    );
    println!(
        "finetune loss {} -> {}",
        fmt(o.finetune.initial_loss()),
        fmt(o.finetune.final_loss())
    );
    print!(
        "{}",
        comparison_table(&[(o.config.model.grid.label(), o.eval.clone())])
    );
}

fn replay(a: ReplayArgs, _threads: Option<usize>) -> Result<()> {
    let out = output_path(&a.out);
    let o = experiment::replay(&a.manifest, &out)?;
    print_outcome(&o);
    Ok(())
}

#[derive(Serialize)]
struct EvalConfig {
    checkpoint: Option<PathBuf>,
    run_config: Option<RunConfig>,
    task: Option<TaskSpec>,
    sweep: Vec<String>,
    seeds: Vec<u64>,
    n: usize,
    offset: usize,
}

#[derive(Serialize)]
struct EvalRow {
    config: String,
    result: EvalResult,
}

fn evaluate(a: EvalArgs, threads: Option<usize>) -> Result<()> {
    if a.seeds.is_empty() {
        return Err(Error::Config("no seeds given".into()));
    }
    let rows = if let Some(path) = &a.checkpoint {
        eval_checkpoint(&a, path, threads)?
    } else {
        let path = a.config.as_ref().expect("clap requires one of the two");
        eval_training_sweep(&a, path, threads)?
    };
    print!("{}", comparison_table(&rows.iter().map(|r| (r.config.clone(), r.result.clone())).collect::<Vec<_>>()));
    Ok(())
}

fn grids_or(sweep: &Option<Vec<GridShape>>, default: GridShape) -> Vec<GridShape> {
    sweep.clone().unwrap_or_else(|| vec![default])
}

fn finish_eval(out: Option<&Path>, cfg: &EvalConfig, seed: u64, threads: Option<usize>, inputs: &[&Path], body: impl FnOnce() -> Result<Vec<EvalRow>>) -> Result<Vec<EvalRow>> {
    let Some(dir) = out else { return body() };
    let dir = output_path(dir);
    create_dir(&dir)?;
    let m = manifest("eval", seed, cfg, threads, inputs)?;
    let (rows, _) = with_manifest(&dir.join(MANIFEST_FILE), m, |m| {
        let rows = body()?;
        write_json(&dir.join("eval.json"), &rows)?;
        let table = comparison_table(&rows.iter().map(|r| (r.config.clone(), r.result.clone())).collect::<Vec<_>>());
        write_text(&dir.join("eval.txt"), &table)?;
        m.outputs.extend([dir.join("eval.json"), dir.join("eval.txt")]);
        Ok(rows)
    })?;
    Ok(rows)
}

fn eval_checkpoint(a: &EvalArgs, path: &Path, threads: Option<usize>) -> Result<Vec<EvalRow>> {
    let (model, _) = Pipeline::<f32>::load(path)?;
    let task = task_spec(&a.task)?;
    let grids = grids_or(&a.sweep, model.config.grid.into());
    let cfg = EvalConfig {
        checkpoint: Some(path.to_path_buf()),
        run_config: None,
        task: Some(task.clone()),
        sweep: grids.iter().map(|g| g.to_string()).collect(),
        seeds: a.seeds.clone(),
        n: a.n,
        offset: a.offset,
    };
    finish_eval(a.out.as_deref(), &cfg, a.seeds[0], threads, &[path], || {
        let metric = Metric::for_task(task.kind());
        let mut rows = Vec::new();
        for g in &grids {
            let spec = g.with_side(model.config.grid.view_side).map_err(|e| Error::Config(e.to_string()))?;
            let mut m = model.clone();
            m.config = m.config.with_grid(spec);
            m.config.validate()?;
            let mut per_seed = Vec::new();
            for &seed in &a.seeds {
                let samples = task.source(seed)?.samples(a.offset..a.offset + a.n);
                per_seed.push(evaluate_model(&m, &samples, metric, seed)?);
            }
            rows.push(EvalRow {
                config: g.to_string(),
                result: combine_seeds(&per_seed)?,
            });
        }
        Ok(rows)
    })
}

fn eval_training_sweep(a: &EvalArgs, path: &Path, threads: Option<usize>) -> Result<Vec<EvalRow>> {
    let mut base = RunConfig::from_path(path)?;
    if threads.is_some() {
        base.threads = threads;
    }
    let base = base.materialized();
    let grids = grids_or(&a.sweep, base.model.grid.into());
    let cfg = EvalConfig {
        checkpoint: None,
        run_config: Some(base.clone()),
        task: None,
        sweep: grids.iter().map(|g| g.to_string()).collect(),
        seeds: a.seeds.clone(),
        n: base.data.test,
        offset: base.data.train,
    };
    finish_eval(a.out.as_deref(), &cfg, a.seeds[0], threads, &[path], || {
        let mut rows = Vec::new();
        for g in &grids {
            let spec = g.with_side(base.model.grid.view_side).map_err(|e| Error::Config(e.to_string()))?;
            let mut per_seed = Vec::new();
            for &seed in &a.seeds {
                let run = base.with_grid(spec).with_seed(seed);
                let o = experiment::run_experiment(&run, None)?;
                eprintln!("{} seed {seed}: accuracy {:.4}", g, o.eval.accuracy);
                per_seed.push(o.eval);
            }
            rows.push(EvalRow {
                config: g.to_string(),
                result: combine_seeds(&per_seed)?,
            });
        }
        Ok(rows)
    })
}

#[derive(Serialize)]
struct CostConfig {
    encoder: EncoderConfig,
    decoder: DecoderConfig,
    text_len: usize,
    sweep: Vec<String>,
    baseline: String,
}

fn cost_cmd(a: CostArgs, threads: Option<usize>) -> Result<()> {
    let (enc, dec, default_text) = match &a.config {
        Some(path) => {
            let c = RunConfig::from_path(path)?;
            (c.model.encoder, c.model.decoder, 64)
        }
        None => match a.preset {
            Preset::Large => cost::large_scale_preset(),
            Preset::Toy => (EncoderConfig::default(), DecoderConfig::default(), 64),
        },
    };
    let grids = a.sweep.clone().unwrap_or_else(GridShape::standard_sweep);
    let text_len = a.text_len.unwrap_or(default_text);
    let reports = cost::cost_sweep(&grids, a.baseline, &enc, &dec, text_len)?;
    let render = |reports: &[CostReport]| -> Result<String> {
        Ok(match a.format {
            Format::Table => cost::to_table(reports),
            Format::Csv => cost::to_csv(reports),
            Format::Json => serde_json::to_string_pretty(reports)? + "\n",
        })
    };
    if let Some(dir) = &a.out {
        let dir = output_path(dir);
        create_dir(&dir)?;
        let cfg = CostConfig {
            encoder: enc,
            decoder: dec,
            text_len,
            sweep: grids.iter().map(|g| g.to_string()).collect(),
            baseline: a.baseline.to_string(),
        };
        let inputs: Vec<&Path> = a.config.iter().map(|p| p.as_path()).collect();
        let m = manifest("cost", 0, &cfg, threads, &inputs)?;
        with_manifest(&dir.join(MANIFEST_FILE), m, |m| {
            write_json(&dir.join("cost.json"), &reports)?;
            write_text(&dir.join("cost.csv"), &cost::to_csv(&reports))?;
            m.outputs.extend([dir.join("cost.json"), dir.join("cost.csv")]);
            Ok(())
        })?;
    }
    print!("{}", render(&reports)?);
    Ok(())
}

#[derive(Serialize)]
struct Inspection {
    path: PathBuf,
    stage: String,
    grid: String,
    visual_tokens: usize,
    lora: bool,
    parameters: BTreeMap<String, usize>,
    digests: BTreeMap<String, String>,
    metadata: BTreeMap<String, String>,
}

fn inspect(a: InspectArgs) -> Result<()> {
    let (model, manifest) = Pipeline::<f32>::load(&a.checkpoint)?;
    let mut metadata = manifest.metadata.clone();
    metadata.remove("config");
    let info = Inspection {
        path: a.checkpoint.clone(),
        stage: model.stage.to_string(),
        grid: model.config.grid.label(),
        visual_tokens: model.config.visual_tokens(),
        lora: model.config.lora.is_some(),
        parameters: PREFIXES
            .iter()
            .map(|p| (p.to_string(), model.params.numel(p)))
            .collect(),
        digests: model.params.digests(&PREFIXES),
        metadata,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&info)?);
    } else {
        println!("checkpoint {}", info.path.display());
        println!("stage      {}", info.stage);
        println!("grid       {} ({} visual tokens)", info.grid, info.visual_tokens);
        println!("lora       {}", if info.lora { "attached" } else { "none" });
        for (p, n) in &info.parameters {
            println!("{p:<11} {n:>9} params  {}", &info.digests[p][..16]);
        }
    }
    if let Some(out) = &a.export_merged {
        let out = output_path(out);
        let merged = model.merged()?;
        let mut meta = manifest.metadata.clone();
        meta.remove("config");
        meta.insert("merged_from".into(), a.checkpoint.display().to_string());
        merged.save(&out, &meta)?;
        println!("merged export written to {}", out.display());
    }
    Ok(())
}
