//! Two-phase training with digest-checked freeze contracts.
//!
//! Phase 1 (pretrain) updates only the projector. Phase 2 (finetune)
//! updates the vision encoder, the projector and the LoRA adapters while
//! the base decoder stays frozen.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cost;
use crate::error::{Error, Result};
use crate::eval::{TaskSource, CAPTION_PROMPT};
use crate::grid::GridSpec;
use crate::image::RasterImage;
use crate::par;
use crate::pipeline::{Example, Pipeline, Stage};
use crate::seed::{rng_for, sub_seed};
use crate::tensor::{accumulate_grads, AdamW, AdamWConfig, GradMap, Scalar};

/// Every prefix whose digest is tracked.
pub const PREFIXES: [&str; 4] = ["vision.", "projector.", "lm.", "lora."];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn default_learning_rate(self) -> f64 {
        match self {
            Phase::Pretrain => 1e-3,
            Phase::Finetune => 2e-5,
        }
    }

    pub fn trainable_prefixes(self) -> &'static [&'static str] {
        match self {
            Phase::Pretrain => &["projector."],
            Phase::Finetune => &["vision.", "projector.", "lora."],
        }
    }

    pub fn frozen_prefixes(self) -> Vec<&'static str> {
        PREFIXES
            .iter()
            .copied()
            .filter(|p| !self.trainable_prefixes().contains(p))
            .collect()
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            _ => Err(Error::Parse(format!("unknown phase `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grid: GridSpec,
    #[serde(default)]
    pub optimizer: AdamWConfig,
}

impl TrainConfig {
    /// Phase defaults: the phase's learning rate and batch size 16.
    pub fn new(phase: Phase, steps: usize, seed: u64, grid: GridSpec) -> Self {
        Self {
            phase,
            learning_rate: phase.default_learning_rate(),
            steps,
            batch_size: 16,
            seed,
            grid,
            optimizer: AdamWConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// One supervised training pair.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub image: RasterImage,
    pub prompt: Vec<u8>,
    pub answer: Vec<u8>,
}

/// Index-addressable training data.
pub trait SampleStream: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<TrainSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleStream for Vec<TrainSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> Result<TrainSample> {
        self.as_slice()
            .get(index)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("sample {index} out of range")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    /// "describe" followed by a caption of the image content.
    Caption,
    /// The task question followed by its answer.
    Question,
}

/// Samples `offset..offset + len` of a task, rendered on demand.
pub struct TaskStream {
    pub source: TaskSource,
    pub offset: usize,
    pub len: usize,
    pub style: Style,
}

impl SampleStream for TaskStream {
    fn len(&self) -> usize {
        self.len
    }

    fn get(&self, index: usize) -> Result<TrainSample> {
        if index >= self.len {
            return Err(Error::invalid(format!("sample {index} out of range")));
        }
        let s = self.source.sample(self.offset + index);
        let (prompt, answer) = match self.style {
            Style::Caption => (CAPTION_PROMPT.to_vec(), s.placement.caption()),
            Style::Question => (s.question, s.answer),
        };
        Ok(TrainSample {
            image: s.image,
            prompt,
            answer,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub phase: Phase,
    pub grid: String,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub trainable_prefixes: Vec<String>,
    /// Mean batch loss before each update.
    pub loss_trace: Vec<f64>,
    pub wall_time_s: f64,
    pub tokens_processed: u64,
    pub flops_estimate: f64,
    pub checkpoint: Option<PathBuf>,
    pub digests_before: BTreeMap<String, String>,
    pub digests_after: BTreeMap<String, String>,
    pub changed_prefixes: Vec<String>,
}

impl TrainReport {
    /// The report with wall time zeroed, the part that reruns reproduce.
    /// Drops wall time and reduces the checkpoint path to its file name, so
    /// the report depends only on the run's inputs.
    pub fn deterministic(&self) -> TrainReport {
        TrainReport {
            wall_time_s: 0.0,
            checkpoint: self
                .checkpoint
                .as_ref()
                .and_then(|p| p.file_name())
                .map(PathBuf::from),
            ..self.clone()
        }
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.loss_trace.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().copied()
    }
}

/// Sample order: a fresh seeded permutation per epoch.
struct Schedule {
    seed: u64,
    n: usize,
    epoch: usize,
    order: Vec<usize>,
}

impl Schedule {
    fn new(seed: u64, n: usize) -> Self {
        Self {
            seed: sub_seed(seed, "shuffle"),
            n,
            epoch: usize::MAX,
            order: Vec::new(),
        }
    }

    fn index(&mut self, position: usize) -> usize {
        let epoch = position / self.n;
        if epoch != self.epoch {
            self.order = (0..self.n).collect();
            self.order
                .shuffle(&mut rng_for(self.seed, &format!("epoch/{epoch}")));
            self.epoch = epoch;
        }
        self.order[position % self.n]
    }
}

pub fn run_phase1<T: Scalar>(
    model: &mut Pipeline<T>,
    data: &dyn SampleStream,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    if cfg.phase != Phase::Pretrain {
        return Err(Error::Contract(format!("phase 1 run with a {} config", cfg.phase)));
    }
    run_phase(model, data, cfg, checkpoint)
}

pub fn run_phase2<T: Scalar>(
    model: &mut Pipeline<T>,
    data: &dyn SampleStream,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    if cfg.phase != Phase::Finetune {
        return Err(Error::Contract(format!("phase 2 run with a {} config", cfg.phase)));
    }
    if model.stage != Stage::Pretrained {
        return Err(Error::Contract(format!(
            "finetuning needs a pretrained model, got a {} one",
            model.stage
        )));
    }
    if model.config.lora.is_none() {
        return Err(Error::Config("finetuning needs LoRA adapters".into()));
    }
    run_phase(model, data, cfg, checkpoint)
}

fn run_phase<T: Scalar>(
    model: &mut Pipeline<T>,
    data: &dyn SampleStream,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.grid != model.config.grid {
        return Err(Error::Config(format!(
            "training grid {} differs from model grid {}",
            cfg.grid.label(),
            model.config.grid.label()
        )));
    }
    if cfg.steps > 0 && data.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    let start = Instant::now();
    let trainable = cfg.phase.trainable_prefixes();
    model.params.set_trainable_prefixes(trainable);
    let digests_before = model.params.digests(&PREFIXES);
    let mut opt = AdamW::new(cfg.optimizer);
    let mut schedule = Schedule::new(cfg.seed, data.len().max(1));
    let mut loss_trace = Vec::with_capacity(cfg.steps);
    let mut tokens = 0u64;
    let mut flops = 0.0;

    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|k| schedule.index(step * cfg.batch_size + k))
            .collect();
        let model_ref = &*model;
        let outs = par::map_slice(&batch, |&i| -> Result<_> {
            let s = data.get(i)?;
            let out = model_ref.loss_and_grads(&Example {
                image: &s.image,
                prompt: &s.prompt,
                answer: &s.answer,
            })?;
            Ok((out, s.prompt.len() + s.answer.len() - 1))
        });
        let mut grads: GradMap<T> = GradMap::new();
        let mut loss = 0.0;
        for out in outs {
            let (out, text_len) = out?;
            loss += out.loss;
            tokens += out.tokens as u64;
            flops += cost::estimate_cost(
                &model.config.grid,
                &model.config.encoder,
                &model.config.decoder,
                text_len,
            )
            .training_flops;
            accumulate_grads(&mut grads, out.grads);
        }
        let scale = T::of(1.0 / cfg.batch_size as f64);
        for g in grads.values_mut() {
            g.iter_mut().for_each(|v| *v = *v * scale);
        }
        for p in model.params.iter().filter(|p| p.trainable) {
            grads
                .entry(p.name.clone())
                .or_insert_with(|| vec![T::zero(); p.tensor.len()]);
        }
        model.params.set_grads(grads)?;
        opt.step(&mut model.params, cfg.learning_rate)?;
        model.params.zero_grads();
        loss_trace.push(loss / cfg.batch_size as f64);
    }

    let digests_after = model.params.digests(&PREFIXES);
    for prefix in cfg.phase.frozen_prefixes() {
        if digests_before[prefix] != digests_after[prefix] {
            return Err(Error::FreezeViolation {
                prefix: prefix.to_string(),
                phase: cfg.phase.to_string(),
            });
        }
    }
    let changed_prefixes = PREFIXES
        .iter()
        .filter(|p| digests_before[**p] != digests_after[**p])
        .map(|p| p.to_string())
        .collect();
    if cfg.steps > 0 || model.stage == Stage::Initialized {
        model.stage = match cfg.phase {
            Phase::Pretrain => Stage::Pretrained,
            Phase::Finetune => Stage::Finetuned,
        };
    }
    let mut report = TrainReport {
        phase: cfg.phase,
        grid: cfg.grid.label(),
        steps: cfg.steps,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        optimizer: cfg.optimizer,
        trainable_prefixes: trainable.iter().map(|s| s.to_string()).collect(),
        loss_trace,
        wall_time_s: 0.0,
        tokens_processed: tokens,
        flops_estimate: flops,
        checkpoint: None,
        digests_before,
        digests_after,
        changed_prefixes,
    };
    if let Some(path) = checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("phase".into(), cfg.phase.to_string());
        meta.insert("train_config".into(), serde_json::to_string(cfg)?);
        model.save(path, &meta)?;
        report.checkpoint = Some(path.to_path_buf());
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{DecoderConfig, LoraConfig};
    use crate::encoder::EncoderConfig;
    use crate::eval::{DetailTask, TaskSpec};
    use crate::grid::PixelNorm;
    use crate::pipeline::PipelineConfig;

    fn tiny() -> PipelineConfig {
        let grid = GridSpec::new(2, 2, false, 16).unwrap();
        PipelineConfig {
            grid,
            encoder: EncoderConfig {
                patch_size: 8,
                embed_dim: 8,
                depth: 1,
                heads: 2,
                mlp_ratio: 2.0,
                view_side: 16,
                channels: 1,
            },
            decoder: DecoderConfig {
                vocab_size: 256,
                d_lm: 16,
                depth: 1,
                heads: 2,
                max_seq: 64,
            },
            lora: Some(LoraConfig::default()),
            norm: PixelNorm::default(),
        }
    }

    fn stream(style: Style) -> TaskStream {
        let spec = TaskSpec::Detail(DetailTask::new(32, 8, 4).unwrap());
        TaskStream {
            source: spec.source(1).unwrap(),
            offset: 0,
            len: 12,
            style,
        }
    }

    #[test]
    fn phase_defaults() {
        let g = GridSpec::baseline(16);
        assert_eq!(TrainConfig::new(Phase::Pretrain, 1, 0, g).learning_rate, 1e-3);
        assert_eq!(TrainConfig::new(Phase::Finetune, 1, 0, g).learning_rate, 2e-5);
        assert_eq!(TrainConfig::new(Phase::Finetune, 1, 0, g).batch_size, 16);
        assert_eq!(Phase::Pretrain.frozen_prefixes(), vec!["vision.", "lm.", "lora."]);
        assert_eq!(Phase::Finetune.frozen_prefixes(), vec!["lm."]);
    }

    #[test]
    fn zero_steps_change_nothing() {
        let mut m = Pipeline::<f32>::new(tiny(), 1).unwrap();
        let cfg = TrainConfig::new(Phase::Pretrain, 0, 1, m.config.grid);
        let r = run_phase1(&mut m, &stream(Style::Caption), &cfg, None).unwrap();
        assert!(r.loss_trace.is_empty());
        assert_eq!(r.digests_before, r.digests_after);
        assert!(r.changed_prefixes.is_empty());
    }

    #[test]
    fn phases_touch_only_their_prefixes() {
        let mut m = Pipeline::<f32>::new(tiny(), 2).unwrap();
        let mut cfg = TrainConfig::new(Phase::Pretrain, 2, 2, m.config.grid);
        cfg.batch_size = 3;
        let r1 = run_phase1(&mut m, &stream(Style::Caption), &cfg, None).unwrap();
        assert_eq!(r1.loss_trace.len(), 2);
        assert_eq!(r1.changed_prefixes, vec!["projector."]);
        assert_eq!(m.stage, Stage::Pretrained);

        let mut cfg = TrainConfig::new(Phase::Finetune, 2, 2, m.config.grid);
        cfg.batch_size = 3;
        cfg.learning_rate = 1e-3;
        let r2 = run_phase2(&mut m, &stream(Style::Question), &cfg, None).unwrap();
        assert_eq!(r2.changed_prefixes, vec!["vision.", "projector.", "lora."]);
        assert_eq!(r2.digests_before["lm."], r2.digests_after["lm."]);
        assert_eq!(m.stage, Stage::Finetuned);
    }

    #[test]
    fn finetune_requires_pretrained_model() {
        let mut m = Pipeline::<f32>::new(tiny(), 3).unwrap();
        let cfg = TrainConfig::new(Phase::Finetune, 1, 3, m.config.grid);
        assert!(matches!(
            run_phase2(&mut m, &stream(Style::Question), &cfg, None),
            Err(Error::Contract(_))
        ));
        let cfg = TrainConfig::new(Phase::Finetune, 1, 3, m.config.grid);
        assert!(matches!(
            run_phase1(&mut m, &stream(Style::Caption), &cfg, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn grid_mismatch_is_a_config_error() {
        let mut m = Pipeline::<f32>::new(tiny(), 4).unwrap();
        let cfg = TrainConfig::new(Phase::Pretrain, 1, 4, GridSpec::baseline(16));
        assert!(matches!(
            run_phase1(&mut m, &stream(Style::Caption), &cfg, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn same_seed_same_trace_across_thread_counts() {
        let run = |threads| {
            par::with_threads(threads, || {
                let mut m = Pipeline::<f32>::new(tiny(), 5).unwrap();
                let mut cfg = TrainConfig::new(Phase::Pretrain, 3, 5, m.config.grid);
                cfg.batch_size = 4;
                let r = run_phase1(&mut m, &stream(Style::Caption), &cfg, None).unwrap();
                (r.deterministic(), m.params.digest(""))
            })
        };
        let a = run(1);
        assert_eq!(a, run(1));
        assert_eq!(a, run(3));
    }

    #[test]
    fn schedule_visits_every_sample_each_epoch() {
        let mut s = Schedule::new(9, 7);
        let mut first: Vec<usize> = (0..7).map(|p| s.index(p)).collect();
        let mut second: Vec<usize> = (7..14).map(|p| s.index(p)).collect();
        first.sort_unstable();
        second.sort_unstable();
        assert_eq!(first, (0..7).collect::<Vec<_>>());
        assert_eq!(second, first);
    }

    #[test]
    fn checkpoint_records_stage() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Pipeline::<f32>::new(tiny(), 6).unwrap();
        let mut cfg = TrainConfig::new(Phase::Pretrain, 1, 6, m.config.grid);
        cfg.batch_size = 2;
        let path = dir.path().join("p1.json");
        let r = run_phase1(&mut m, &stream(Style::Caption), &cfg, Some(&path)).unwrap();
        assert_eq!(r.checkpoint.as_deref(), Some(path.as_path()));
        let (back, manifest) = Pipeline::<f32>::load(&path).unwrap();
        assert_eq!(back.stage, Stage::Pretrained);
        assert_eq!(manifest.metadata["phase"], "pretrain");
    }
}
