//! A full run from one config file: build, pretrain on captions, finetune
//! on questions, evaluate on held-out samples.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalResult, Metric, TaskSpec};
use crate::manifest::{with_manifest, RunManifest, MANIFEST_FILE};
use crate::par;
use crate::pipeline::{Pipeline, PipelineConfig};
use crate::train::{run_phase1, run_phase2, Phase, Style, TaskStream, TrainConfig, TrainReport, PREFIXES};
use crate::tensor::AdamWConfig;

fn default_batch() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSettings {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Falls back to the phase default when absent.
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub optimizer: AdamWConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    pub train: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub threads: Option<usize>,
    pub model: PipelineConfig,
    pub task: TaskSpec,
    pub data: DataSettings,
    pub pretrain: PhaseSettings,
    pub finetune: PhaseSettings,
    /// Also score the model right after pretraining.
    #[serde(default)]
    pub evaluate_pretrain: bool,
}

impl RunConfig {
    pub fn from_str_ext(text: &str, ext: &str) -> Result<Self> {
        let cfg: RunConfig = match ext {
            "toml" => toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
            "json" => serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?,
            other => return Err(Error::Config(format!("unknown config format `{other}`"))),
        };
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("toml");
        Self::from_str_ext(&text, ext)
    }

    /// Every default filled in, so the config alone determines the run.
    pub fn materialized(&self) -> Self {
        let mut c = self.clone();
        c.pretrain
            .learning_rate
            .get_or_insert(Phase::Pretrain.default_learning_rate());
        c.finetune
            .learning_rate
            .get_or_insert(Phase::Finetune.default_learning_rate());
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.model.encoder.channels != 1 {
            return Err(Error::Config("synthetic tasks are single-channel".into()));
        }
        if self.data.train == 0 || self.data.test == 0 {
            return Err(Error::Config("train and test sets must be non-empty".into()));
        }
        Ok(())
    }

    pub fn train_config(&self, phase: Phase) -> TrainConfig {
        let s = match phase {
            Phase::Pretrain => &self.pretrain,
            Phase::Finetune => &self.finetune,
        };
        TrainConfig {
            phase,
            learning_rate: s.learning_rate.unwrap_or(phase.default_learning_rate()),
            steps: s.steps,
            batch_size: s.batch_size,
            seed: self.seed,
            grid: self.model.grid,
            optimizer: s.optimizer,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn with_grid(&self, grid: crate::grid::GridSpec) -> Self {
        Self {
            model: self.model.with_grid(grid),
            ..self.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub config: RunConfig,
    pub pretrain: TrainReport,
    pub finetune: TrainReport,
    pub pretrain_eval: Option<EvalResult>,
    pub eval: EvalResult,
    pub model: Pipeline<f32>,
}

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.json";
pub const FINETUNE_CHECKPOINT: &str = "finetune.json";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn run_inner(cfg: &RunConfig, out: Option<&Path>) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let source = cfg.task.source(cfg.seed)?;
    let mut model = Pipeline::<f32>::new(cfg.model.clone(), cfg.seed)?;
    let ckpt = |name: &str| out.map(|d| d.join(name));

    let captions = TaskStream {
        source: source.clone(),
        offset: 0,
        len: cfg.data.train,
        style: Style::Caption,
    };
    let p1_path = ckpt(PRETRAIN_CHECKPOINT);
    let pretrain = run_phase1(&mut model, &captions, &cfg.train_config(Phase::Pretrain), p1_path.as_deref())?;

    let test = source.samples(cfg.data.train..cfg.data.train + cfg.data.test);
    let metric = Metric::for_task(cfg.task.kind());
    let pretrain_eval = if cfg.evaluate_pretrain {
        Some(evaluate_model(&model, &test, metric, cfg.seed)?)
    } else {
        None
    };

    let questions = TaskStream {
        style: Style::Question,
        ..captions
    };
    let p2_path = ckpt(FINETUNE_CHECKPOINT);
    let finetune = run_phase2(&mut model, &questions, &cfg.train_config(Phase::Finetune), p2_path.as_deref())?;
    let eval = evaluate_model(&model, &test, metric, cfg.seed)?;

    if let Some(dir) = out {
        write_json(&dir.join("pretrain_report.json"), &pretrain.deterministic())?;
        write_json(&dir.join("finetune_report.json"), &finetune.deterministic())?;
        write_json(&dir.join("eval.json"), &eval)?;
        if let Some(e) = &pretrain_eval {
            write_json(&dir.join("pretrain_eval.json"), e)?;
        }
        write_json(
            &dir.join("timing.json"),
            &serde_json::json!({
                "pretrain_wall_time_s": pretrain.wall_time_s,
                "finetune_wall_time_s": finetune.wall_time_s,
            }),
        )?;
    }
    Ok(ExperimentOutcome {
        config: cfg.clone(),
        pretrain,
        finetune,
        pretrain_eval,
        eval,
        model,
    })
}

/// Runs the experiment, optionally writing checkpoints, reports and a
/// manifest into `out`. `threads` from the config caps the worker pool.
pub fn run_experiment(cfg: &RunConfig, out: Option<&Path>) -> Result<ExperimentOutcome> {
    let cfg = cfg.materialized();
    let run = || match out {
        None => run_inner(&cfg, None),
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let mut manifest = RunManifest::new("train", cfg.seed, &cfg)?;
            manifest.threads = cfg.threads;
            let (outcome, _) = with_manifest(&dir.join(MANIFEST_FILE), manifest, |m| {
                let o = run_inner(&cfg, Some(dir))?;
                for (name, digests) in [
                    (PRETRAIN_CHECKPOINT, &o.pretrain.digests_after),
                    (FINETUNE_CHECKPOINT, &o.finetune.digests_after),
                ] {
                    m.outputs.push(dir.join(name));
                    m.checkpoint_digests.insert(name.into(), digests.clone());
                }
                for f in ["pretrain_report.json", "finetune_report.json", "eval.json"] {
                    m.outputs.push(dir.join(f));
                }
                Ok(o)
            })?;
            Ok(outcome)
        }
    };
    match cfg.threads {
        Some(t) => par::with_threads(t, run),
        None => run(),
    }
}

/// Re-executes the run a manifest describes, into `out`.
pub fn replay(manifest_path: &Path, out: &Path) -> Result<ExperimentOutcome> {
    let m = RunManifest::load(manifest_path)?;
    if m.command != "train" {
        return Err(Error::Config(format!("cannot replay a `{}` run here", m.command)));
    }
    let cfg: RunConfig = m.config_as()?;
    run_experiment(&cfg, Some(out))
}

/// Digests of the final model, by prefix.
pub fn final_digests(o: &ExperimentOutcome) -> BTreeMap<String, String> {
    o.model.params.digests(&PREFIXES)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
seed = 3

[model.grid]
rows = 2
cols = 2
include_global = false
view_side = 16

[model.encoder]
patch_size = 8
embed_dim = 8
depth = 1
heads = 2
mlp_ratio = 2.0
view_side = 16

[model.decoder]
vocab_size = 256
d_lm = 16
depth = 1
heads = 2
max_seq = 64

[model.lora]
rank = 2
alpha = 4.0

[task]
task = "detail"
image_side = 32
glyph_side = 8
n_glyphs = 4

[data]
train = 8
test = 4

[pretrain]
steps = 2
batch_size = 2

[finetune]
steps = 2
batch_size = 2
learning_rate = 0.001
"#;

    #[test]
    fn toml_config_round_trips_with_materialised_defaults() {
        let cfg = RunConfig::from_str_ext(SMALL, "toml").unwrap();
        assert_eq!(cfg.pretrain.learning_rate, None);
        let m = cfg.materialized();
        assert_eq!(m.pretrain.learning_rate, Some(1e-3));
        assert_eq!(m.finetune.learning_rate, Some(1e-3));
        assert_eq!(m.model.norm.mean, vec![0.5]);
        let back = RunConfig::from_str_ext(&m.to_toml().unwrap(), "toml").unwrap();
        assert_eq!(back, m);
        assert!(RunConfig::from_str_ext("seed = 1\nbogus = 2", "toml").is_err());
    }

    #[test]
    fn end_to_end_run_writes_manifest_and_replays() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::from_str_ext(SMALL, "toml").unwrap();
        let a = run_experiment(&cfg, Some(&dir.path().join("a"))).unwrap();
        assert_eq!(a.pretrain.loss_trace.len(), 2);
        assert_eq!(a.eval.n_samples, 4);
        let m = RunManifest::load(&dir.path().join("a").join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.status, crate::manifest::RunStatus::Completed);
        let b = replay(&dir.path().join("a").join(MANIFEST_FILE), &dir.path().join("b")).unwrap();
        assert_eq!(final_digests(&a), final_digests(&b));
        for f in ["pretrain_report.json", "finetune_report.json", "eval.json", "finetune.bin"] {
            let x = fs::read(dir.path().join("a").join(f)).unwrap();
            let y = fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(x, y, "{f}");
        }
    }
}
