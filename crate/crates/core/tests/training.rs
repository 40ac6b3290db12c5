use std::collections::BTreeMap;

use tilevlm::experiment::{run_experiment, RunConfig};
use tilevlm::pipeline::{byte_ids, Pipeline, Stage};

/// A run small enough for a test but long enough for both losses to halve.
const LOSS_RUN: &str = r#"
seed = 0
threads = 1

[model.grid]
rows = 2
cols = 2
include_global = false
view_side = 16

[model.encoder]
patch_size = 8
embed_dim = 16
depth = 1
heads = 2
mlp_ratio = 2.0
view_side = 16

[model.decoder]
vocab_size = 256
d_lm = 128
depth = 1
heads = 4
max_seq = 48

[model.lora]
rank = 4
alpha = 8.0

[task]
task = "detail"
image_side = 32
glyph_side = 8
n_glyphs = 4
lattice = 16

[data]
train = 512
test = 64

[pretrain]
steps = 300
batch_size = 8

[finetune]
steps = 300
batch_size = 8
learning_rate = 0.003
"#;

fn window_mean(xs: &[f64], head: bool) -> f64 {
    let k = xs.len().min(10);
    let w = if head { &xs[..k] } else { &xs[xs.len() - k..] };
    w.iter().sum::<f64>() / k as f64
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

#[test]
fn median_loss_halves_in_both_phases_over_three_seeds() {
    let base = RunConfig::from_str_ext(LOSS_RUN, "toml").unwrap();
    let mut ratios = [Vec::new(), Vec::new()];
    for seed in 0..3 {
        let o = run_experiment(&base.with_seed(seed), None).unwrap();
        for (k, report) in [&o.pretrain, &o.finetune].into_iter().enumerate() {
            let t = &report.loss_trace;
            ratios[k].push(window_mean(t, false) / window_mean(t, true));
        }
    }
    let (pre, fine) = (median(ratios[0].clone()), median(ratios[1].clone()));
    assert!(pre < 0.5, "pretrain final/initial {pre:.3} ({:?})", ratios[0]);
    assert!(fine < 0.5, "finetune final/initial {fine:.3} ({:?})", ratios[1]);
}

#[test]
fn phases_touch_only_their_prefixes_and_checkpoints_round_trip() {
    let mut cfg = RunConfig::from_str_ext(LOSS_RUN, "toml").unwrap();
    cfg.pretrain.steps = 3;
    cfg.finetune.steps = 3;
    cfg.data.train = 16;
    cfg.data.test = 4;
    let dir = tempfile::tempdir().unwrap();
    let o = run_experiment(&cfg, Some(dir.path())).unwrap();
    assert_eq!(o.pretrain.changed_prefixes, vec!["projector.".to_string()]);
    assert_eq!(
        o.finetune.changed_prefixes,
        vec!["vision.".to_string(), "projector.".to_string(), "lora.".to_string()]
    );
    assert_eq!(o.pretrain.digests_before["lm."], o.finetune.digests_after["lm."]);
    assert_eq!(o.pretrain.digests_before["vision."], o.pretrain.digests_after["vision."]);

    let (loaded, _) = Pipeline::<f32>::load(&dir.path().join("finetune.json")).unwrap();
    assert_eq!(loaded.stage, Stage::Finetuned);
    let sample = cfg.task.source(cfg.seed).unwrap().sample(0);
    let text = byte_ids(&sample.question);
    let a = o.model.logits(&sample.image, &text).unwrap();
    let b = loaded.logits(&sample.image, &text).unwrap();
    assert_eq!(a.data(), b.data());

    let (pre, manifest) = Pipeline::<f32>::load(&dir.path().join("pretrain.json")).unwrap();
    assert_eq!(pre.stage, Stage::Pretrained);
    assert_eq!(manifest.metadata.get("stage").map(String::as_str), Some("pretrained"));
    let path = dir.path().join("copy.json");
    pre.save(&path, &BTreeMap::new()).unwrap();
    let (again, _) = Pipeline::<f32>::load(&path).unwrap();
    assert_eq!(
        pre.params.digests(&["vision.", "projector.", "lm.", "lora."]),
        again.params.digests(&["vision.", "projector.", "lm.", "lora."])
    );
}

#[test]
fn merged_export_matches_adapted_model() {
    let mut cfg = RunConfig::from_str_ext(LOSS_RUN, "toml").unwrap();
    cfg.pretrain.steps = 2;
    cfg.finetune.steps = 5;
    cfg.data.train = 16;
    cfg.data.test = 4;
    let o = run_experiment(&cfg, None).unwrap();
    let merged = o.model.merged().unwrap();
    assert!(merged.params.iter().all(|p| !p.name.starts_with("lora.")));
    let sample = cfg.task.source(cfg.seed).unwrap().sample(1);
    let text = byte_ids(&sample.question);
    let a = o.model.logits(&sample.image, &text).unwrap();
    let b = merged.logits(&sample.image, &text).unwrap();
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() <= 1e-4 * (1.0 + x.abs()), "{x} vs {y}");
    }
}
