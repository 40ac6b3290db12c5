//! Byte-level causal decoder consuming projected visual tokens as a prefix,
//! with LoRA adapters on the query and value projections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

pub const PREFIX: &str = "lm";
pub const LORA_PREFIX: &str = "lora";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub vocab_size: usize,
    pub d_lm: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_seq: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_lm: 128,
            depth: 4,
            heads: 4,
            max_seq: 2048,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_lm == 0 || self.d_lm % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_lm {} not divisible by {} heads",
                self.d_lm, self.heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            return Err(Error::Config("empty vocabulary or context".into()));
        }
        Ok(())
    }

    /// MLP width; fixed at four times the model width.
    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_lm
    }
}

/// Which decoder projections carry adapters, and their rank and scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 8.0 }
    }
}

impl LoraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::invalid("LoRA rank must be at least 1"));
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Dense affine map `y = W x + b` with `W` stored `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

/// Rank-`r` update `(alpha / r) · B · A` for one linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub rank: usize,
    pub alpha: f64,
    /// `[r, d_in]`
    pub a: Tensor<T>,
    /// `[d_out, r]`
    pub b: Tensor<T>,
    pub target: String,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// A base map with an adapter attached. The base is only borrowed.
pub struct LoraLinear<'a, T> {
    base: &'a LinearMap<T>,
    adapter: &'a LoraAdapter<T>,
}

pub fn lora_wrap<'a, T: Scalar>(base: &'a LinearMap<T>, adapter: &'a LoraAdapter<T>) -> Result<LoraLinear<'a, T>> {
    if adapter.rank == 0 {
        return Err(Error::invalid("LoRA rank must be at least 1"));
    }
    let (d_out, d_in) = base.weight.dims2()?;
    if adapter.a.shape() != [adapter.rank, d_in] || adapter.b.shape() != [d_out, adapter.rank] {
        return Err(Error::shape(format!(
            "adapter A {:?} / B {:?} for weight {:?} at rank {}",
            adapter.a.shape(),
            adapter.b.shape(),
            base.weight.shape(),
            adapter.rank
        )));
    }
    Ok(LoraLinear { base, adapter })
}

impl<T: Scalar> LoraLinear<'_, T> {
    /// `y = x Wᵀ + b + (alpha / r) (x Aᵀ) Bᵀ` for row-major `x` `[n, d_in]`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.apply_tape(&mut tape, xv, false)?;
        Ok(tape.value(y).clone())
    }

    /// Records the map on a tape. Base weights enter as frozen leaves when
    /// `train_base` is false; `A` and `B` are always trainable.
    pub fn apply_tape(&self, tape: &mut Tape<T>, x: Var, train_base: bool) -> Result<Var> {
        let w = tape.leaf(self.base.weight.clone(), train_base);
        let mut y = tape.matmul_t(x, w)?;
        if let Some(b) = &self.base.bias {
            let bv = tape.leaf(b.clone(), train_base);
            y = tape.add_row(y, bv)?;
        }
        let a = tape.leaf(self.adapter.a.clone(), true);
        let bm = tape.leaf(self.adapter.b.clone(), true);
        let down = tape.matmul_t(x, a)?;
        let up = tape.matmul_t(down, bm)?;
        let delta = tape.scale(up, T::of(self.adapter.scale()));
        tape.add(y, delta)
    }

    /// `W + (alpha / r) · B · A`.
    pub fn merged_weight(&self) -> Result<Tensor<T>> {
        let mut w = self.base.weight.clone();
        let ba = self.adapter.b.matmul(&self.adapter.a)?;
        let s = T::of(self.adapter.scale());
        w.data_mut()
            .iter_mut()
            .zip(ba.data())
            .for_each(|(w, d)| *w = *w + s * *d);
        Ok(w)
    }
}

/// Names of the base maps that carry adapters.
pub fn lora_targets(cfg: &DecoderConfig) -> Vec<(String, String)> {
    (0..cfg.depth)
        .flat_map(|l| {
            ["wq", "wv"].into_iter().map(move |w| {
                (
                    format!("{PREFIX}.layers.{l}.attn.{w}"),
                    format!("{LORA_PREFIX}.layers.{l}.{w}"),
                )
            })
        })
        .collect()
}

pub fn init_decoder_params<T: Scalar>(
    cfg: &DecoderConfig,
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_lm;
    store.insert_normal(&format!("{PREFIX}.tok_embed"), &[cfg.vocab_size, d], 1.0, rng)?;
    store.insert_normal(&format!("{PREFIX}.pos_embed"), &[cfg.max_seq, d], 0.5, rng)?;
    for l in 0..cfg.depth {
        nn::init_block(store, &format!("{PREFIX}.layers.{l}"), d, cfg.mlp_hidden(), rng)?;
    }
    nn::init_layer_norm(store, &format!("{PREFIX}.ln_f"), d)?;
    store.insert_normal(
        &format!("{PREFIX}.unembed"),
        &[cfg.vocab_size, d],
        (1.0 / d as f64).sqrt(),
        rng,
    )
}

/// Adds adapters with `A ~ N(0, 1/d)` and `B = 0`, so the adapted model is
/// initially identical to the base.
pub fn init_lora_params<T: Scalar>(
    cfg: &DecoderConfig,
    lora: &LoraConfig,
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<()> {
    lora.validate()?;
    let d = cfg.d_lm;
    for (_, ad) in lora_targets(cfg) {
        store.insert_normal(&format!("{ad}.a"), &[lora.rank, d], (1.0 / d as f64).sqrt(), rng)?;
        store.insert_const(&format!("{ad}.b"), &[d, lora.rank], 0.0)?;
    }
    Ok(())
}

/// Folds every adapter into its base weight and removes the `lora.` entries.
pub fn merge_lora<T: Scalar>(cfg: &DecoderConfig, lora: &LoraConfig, store: &mut ParamStore<T>) -> Result<()> {
    for (base, ad) in lora_targets(cfg) {
        let map = LinearMap {
            weight: store.tensor(&format!("{base}.weight"))?.clone(),
            bias: None,
        };
        let adapter = LoraAdapter {
            rank: lora.rank,
            alpha: lora.alpha,
            a: store.tensor(&format!("{ad}.a"))?.clone(),
            b: store.tensor(&format!("{ad}.b"))?.clone(),
            target: base.clone(),
        };
        let merged = lora_wrap(&map, &adapter)?.merged_weight()?;
        if let Some(p) = store.get_mut(&format!("{base}.weight")) {
            p.tensor = merged;
        }
    }
    store.remove_prefix(&format!("{LORA_PREFIX}."));
    Ok(())
}

/// Records the decoder over `[visual prefix, text]` and returns logits for
/// the text positions only (`[n_t, vocab]`).
pub fn decode_forward_tape<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &DecoderConfig,
    lora: Option<&LoraConfig>,
    visual: Option<Var>,
    text_ids: &[usize],
) -> Result<Var> {
    let n_v = visual.map_or(0, |v| tape.shape(v)[0]);
    let n_t = text_ids.len();
    let n = n_v + n_t;
    if n_t == 0 {
        return Err(Error::invalid("decoder needs at least one text token"));
    }
    if n > cfg.max_seq {
        return Err(Error::Capacity(format!(
            "{n_v} visual + {n_t} text tokens exceed max_seq {}",
            cfg.max_seq
        )));
    }
    if let Some(v) = visual {
        if tape.shape(v).get(1) != Some(&cfg.d_lm) {
            return Err(Error::shape(format!(
                "visual prefix {:?} does not match d_lm {}",
                tape.shape(v),
                cfg.d_lm
            )));
        }
    }
    let table = tape.param(store, &format!("{PREFIX}.tok_embed"))?;
    let text = tape.gather_rows(table, text_ids)?;
    let x = match visual {
        Some(v) => tape.concat(&[v, text], 0)?,
        None => text,
    };
    let pos_table = tape.param(store, &format!("{PREFIX}.pos_embed"))?;
    let pos = tape.slice(pos_table, 0, 0, n)?;
    let mut x = tape.add(x, pos)?;
    let mask = tape.constant(nn::causal_mask(n));
    let scale = lora.map(|l| l.scale());
    for l in 0..cfg.depth {
        let adapter_prefix = format!("{LORA_PREFIX}.layers.{l}");
        let adapters = scale.map(|s| (adapter_prefix.as_str(), s));
        x = nn::block(tape, store, &format!("{PREFIX}.layers.{l}"), x, cfg.heads, Some(mask), adapters)?;
    }
    let x = nn::layer_norm(tape, store, &format!("{PREFIX}.ln_f"), x)?;
    let text_rows = tape.slice(x, 0, n_v, n_t)?;
    let unembed = tape.param(store, &format!("{PREFIX}.unembed"))?;
    tape.matmul_t(text_rows, unembed)
}

/// Value-level decoder forward.
pub fn decode_forward<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &DecoderConfig,
    lora: Option<&LoraConfig>,
    visual: Option<&Tensor<T>>,
    text_ids: &[usize],
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = visual.map(|t| tape.constant(t.clone()));
    let logits = decode_forward_tape(&mut tape, store, cfg, lora, v, text_ids)?;
    Ok(tape.value(logits).clone())
}

/// Mean next-token cross-entropy over the given logit rows.
pub fn language_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, target_ids: &[usize]) -> Result<Var> {
    let rows = tape.shape(logits)[0];
    if rows != target_ids.len() {
        return Err(Error::shape(format!(
            "{rows} logit rows vs {} targets",
            target_ids.len()
        )));
    }
    tape.cross_entropy(logits, target_ids)
}
