//! Analytic FLOP and token accounting per pipeline configuration.
//!
//! Only matrix products are counted, at `2·m·n·k` each. Normalisation,
//! softmax and activation functions are ignored. Training cost is three
//! forward passes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::grid::{GridShape, GridSpec};

pub const TRAINING_MULTIPLIER: f64 = 3.0;

pub const FORMULAS: [&str; 6] = [
    "encoder/view = 2*n*P*d + depth*(8*n*d^2 + 4*n^2*d + 4*n*d*h), n = (S/p)^2, P = p^2*C, h = mlp hidden",
    "encoder = views * encoder/view",
    "projector = 2*n_v*d*d_lm + 2*n_v*d_lm^2",
    "decoder = depth*(8*N*d_lm^2 + 4*N^2*d_lm + 16*N*d_lm^2) + 2*text_len*d_lm*V, N = n_v + text_len",
    "forward = encoder + projector + decoder",
    "training = 3 * forward",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub config: String,
    pub include_global: bool,
    pub views: usize,
    pub visual_tokens: usize,
    pub text_len: usize,
    pub encoder_flops: f64,
    pub projector_flops: f64,
    pub decoder_flops: f64,
    pub forward_flops: f64,
    pub training_flops: f64,
    pub baseline: String,
    /// `training / baseline training - 1`.
    pub overhead: f64,
    pub formulas: Vec<String>,
    model_key: String,
}

/// Forward FLOPs of the encoder on one view.
pub fn encoder_view_flops(enc: &EncoderConfig) -> f64 {
    let n = enc.tokens_per_view() as f64;
    let d = enc.embed_dim as f64;
    let h = enc.mlp_hidden() as f64;
    let patch = 2.0 * n * enc.patch_dim() as f64 * d;
    let layer = 8.0 * n * d * d + 4.0 * n * n * d + 4.0 * n * d * h;
    patch + enc.depth as f64 * layer
}

pub fn projector_flops(n_v: usize, enc: &EncoderConfig, dec: &DecoderConfig) -> f64 {
    let (n, d, e) = (n_v as f64, enc.embed_dim as f64, dec.d_lm as f64);
    2.0 * n * d * e + 2.0 * n * e * e
}

pub fn decoder_flops(n_v: usize, text_len: usize, dec: &DecoderConfig) -> f64 {
    let n = (n_v + text_len) as f64;
    let d = dec.d_lm as f64;
    let layer = 8.0 * n * d * d + 4.0 * n * n * d + 2.0 * n * d * dec.mlp_hidden() as f64 * 2.0;
    dec.depth as f64 * layer + 2.0 * text_len as f64 * d * dec.vocab_size as f64
}

pub fn estimate_cost(spec: &GridSpec, enc: &EncoderConfig, dec: &DecoderConfig, text_len: usize) -> CostReport {
    let views = spec.view_count();
    let n_v = views * enc.tokens_per_view();
    let encoder = views as f64 * encoder_view_flops(enc);
    let projector = projector_flops(n_v, enc, dec);
    let decoder = decoder_flops(n_v, text_len, dec);
    let forward = encoder + projector + decoder;
    let label = spec.label();
    CostReport {
        config: label.clone(),
        include_global: spec.include_global,
        views,
        visual_tokens: n_v,
        text_len,
        encoder_flops: encoder,
        projector_flops: projector,
        decoder_flops: decoder,
        forward_flops: forward,
        training_flops: TRAINING_MULTIPLIER * forward,
        baseline: label,
        overhead: 0.0,
        formulas: FORMULAS.iter().map(|s| s.to_string()).collect(),
        model_key: model_key(enc, dec, text_len),
    }
}

fn model_key(enc: &EncoderConfig, dec: &DecoderConfig, text_len: usize) -> String {
    format!(
        "p{} d{} L{} h{} C{} S{} | d{} L{} V{} | t{}",
        enc.patch_size,
        enc.embed_dim,
        enc.depth,
        enc.mlp_hidden(),
        enc.channels,
        enc.view_side,
        dec.d_lm,
        dec.depth,
        dec.vocab_size,
        text_len
    )
}

/// `a.training / b.training - 1`. Both reports must come from the same
/// encoder, decoder and text length.
pub fn overhead_ratio(a: &CostReport, b: &CostReport) -> Result<f64> {
    if a.model_key != b.model_key {
        return Err(Error::Contract(format!(
            "cost reports from different models: {} vs {}",
            a.model_key, b.model_key
        )));
    }
    Ok(a.training_flops / b.training_flops - 1.0)
}

impl CostReport {
    pub fn share_of_decoder(&self) -> f64 {
        self.decoder_flops / self.forward_flops
    }

    pub fn with_baseline(mut self, baseline: &CostReport) -> Result<Self> {
        self.overhead = overhead_ratio(&self, baseline)?;
        self.baseline = baseline.config.clone();
        Ok(self)
    }
}

/// Reports for every grid, each with its overhead against `baseline`.
pub fn cost_sweep(
    grids: &[GridShape],
    baseline: GridShape,
    enc: &EncoderConfig,
    dec: &DecoderConfig,
    text_len: usize,
) -> Result<Vec<CostReport>> {
    let spec = |g: GridShape| g.with_side(enc.view_side);
    let base = estimate_cost(&spec(baseline)?, enc, dec, text_len);
    grids
        .iter()
        .map(|g| estimate_cost(&spec(*g)?, enc, dec, text_len).with_baseline(&base))
        .collect()
}

pub const CSV_HEADER: &str = "config,views,visual_tokens,text_len,encoder_flops,projector_flops,decoder_flops,forward_flops,training_flops,baseline,overhead";

pub fn to_csv(reports: &[CostReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.6e},{:.6e},{:.6e},{:.6e},{:.6e},{},{:.6}",
            r.config,
            r.views,
            r.visual_tokens,
            r.text_len,
            r.encoder_flops,
            r.projector_flops,
            r.decoder_flops,
            r.forward_flops,
            r.training_flops,
            r.baseline,
            r.overhead
        );
    }
    out
}

pub fn to_table(reports: &[CostReport]) -> String {
    let mut out = format!(
        "{:<8} {:>5} {:>8} {:>12} {:>12} {:>12} {:>12} {:>9}\n",
        "config", "views", "tokens", "encoder", "projector", "decoder", "training", "overhead"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<8} {:>5} {:>8} {:>12.4e} {:>12.4e} {:>12.4e} {:>12.4e} {:>8.2}%",
            r.config,
            r.views,
            r.visual_tokens,
            r.encoder_flops,
            r.projector_flops,
            r.decoder_flops,
            r.training_flops,
            100.0 * r.overhead
        );
    }
    out
}

/// Encoder and decoder shaped like a 400M-parameter ViT (patch 14,
/// 27×27 tokens per view) in front of a 7B-class decoder, with a
/// finetune-length text of 512 tokens.
pub fn large_scale_preset() -> (EncoderConfig, DecoderConfig, usize) {
    let enc = EncoderConfig {
        patch_size: 14,
        embed_dim: 1152,
        depth: 27,
        heads: 16,
        mlp_ratio: 4304.0 / 1152.0,
        view_side: 378,
        channels: 3,
    };
    let dec = DecoderConfig {
        vocab_size: 32000,
        d_lm: 4096,
        depth: 32,
        heads: 32,
        max_seq: 32768,
    };
    (enc, dec, 512)
}
