//! Toy ViT applied independently to each view. One parameter set (under
//! `vision.`) is shared by every tile and the global view.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

pub const PREFIX: &str = "vision";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub view_side: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_channels() -> usize {
    1
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            view_side: 64,
            channels: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.view_side < self.patch_size {
            return bad(format!(
                "view side {} smaller than patch size {}",
                self.view_side, self.patch_size
            ));
        }
        if self.view_side % self.patch_size != 0 {
            return bad(format!(
                "view side {} not divisible by patch size {}",
                self.view_side, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.channels != 1 && self.channels != 3 {
            return bad(format!("{} channels", self.channels));
        }
        if !(self.mlp_ratio > 0.0) {
            return bad(format!("mlp ratio {}", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.view_side / self.patch_size
    }

    /// `(S / p)^2`.
    pub fn tokens_per_view(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio).round() as usize).max(1)
    }
}

/// Cuts a `(C, S, S)` view into `(S/p)^2` patches.
///
/// Patches are enumerated row-major over the patch grid
/// (`index = patch_row * (S/p) + patch_col`); inside a patch values are
/// flattened in `(channel, row, col)` order.
pub fn patchify<T: Scalar>(view: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (c, h, w) = match view.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(Error::shape(format!("patchify expects (C, S, S), got {s:?}"))),
    };
    if p == 0 || h != w || h % p != 0 {
        return Err(Error::shape(format!(
            "view {h}x{w} cannot be cut into {p}x{p} patches"
        )));
    }
    let g = h / p;
    let src = view.data();
    let mut data = Vec::with_capacity(src.len());
    for pr in 0..g {
        for pc in 0..g {
            for ch in 0..c {
                for r in 0..p {
                    let row = pr * p + r;
                    let start = (ch * h + row) * w + pc * p;
                    data.extend_from_slice(&src[start..start + p]);
                }
            }
        }
    }
    Tensor::new(vec![g * g, p * p * c], data)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(patches: &Tensor<T>, channels: usize, p: usize) -> Result<Tensor<T>> {
    let (n, dim) = patches.dims2()?;
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n || dim != p * p * channels {
        return Err(Error::shape(format!(
            "{:?} is not a square patch grid of {p}x{p}x{channels}",
            patches.shape()
        )));
    }
    let side = g * p;
    let mut out = Tensor::zeros(&[channels, side, side]);
    let src = patches.data();
    let dst = out.data_mut();
    let mut i = 0;
    for pr in 0..g {
        for pc in 0..g {
            for ch in 0..channels {
                for r in 0..p {
                    let start = (ch * side + pr * p + r) * side + pc * p;
                    dst[start..start + p].copy_from_slice(&src[i..i + p]);
                    i += p;
                }
            }
        }
    }
    Ok(out)
}

pub fn init_encoder_params<T: Scalar>(
    cfg: &EncoderConfig,
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<()> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    nn::init_linear(store, &format!("{PREFIX}.patch"), cfg.patch_dim(), d, rng)?;
    store.insert_normal(&format!("{PREFIX}.pos"), &[cfg.tokens_per_view(), d], 0.1, rng)?;
    for l in 0..cfg.depth {
        nn::init_block(store, &format!("{PREFIX}.layers.{l}"), d, cfg.mlp_hidden(), rng)?;
    }
    nn::init_layer_norm(store, &format!("{PREFIX}.ln_f"), d)
}

/// Records the encoder forward pass for one view's patches
/// (`[tokens_per_view, patch_dim]`) and returns the `[tokens, d]` output.
pub fn encode_patches<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cfg: &EncoderConfig,
    patches: Var,
) -> Result<Var> {
    let shape = tape.shape(patches).to_vec();
    if shape != [cfg.tokens_per_view(), cfg.patch_dim()] {
        return Err(Error::shape(format!(
            "encoder expects patches [{}, {}], got {shape:?}",
            cfg.tokens_per_view(),
            cfg.patch_dim()
        )));
    }
    let x = nn::linear(tape, store, &format!("{PREFIX}.patch"), patches, None)?;
    let pos = tape.param(store, &format!("{PREFIX}.pos"))?;
    let mut x = tape.add(x, pos)?;
    for l in 0..cfg.depth {
        x = nn::block(tape, store, &format!("{PREFIX}.layers.{l}"), x, cfg.heads, None, None)?;
    }
    nn::layer_norm(tape, store, &format!("{PREFIX}.ln_f"), x)
}

/// Encodes one normalised `(C, S, S)` view into `(S/p)^2` tokens.
pub fn encode_view<T: Scalar>(
    view: &Tensor<T>,
    cfg: &EncoderConfig,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let patches = patchify(view, cfg.patch_size)?;
    encode_view_patches(&patches, cfg, params)
}

pub fn encode_view_patches<T: Scalar>(
    patches: &Tensor<T>,
    cfg: &EncoderConfig,
    params: &ParamStore<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(patches.clone());
    let out = encode_patches(&mut tape, params, cfg, x)?;
    Ok(tape.value(out).clone())
}

/// Attention sub-layer of encoder layer `layer` over one view's tokens
/// (`[n, d]`), without the residual path.
pub fn self_attention<T: Scalar>(
    x: &Tensor<T>,
    cfg: &EncoderConfig,
    params: &ParamStore<T>,
    layer: usize,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = nn::self_attention_layer(
        &mut tape,
        params,
        &format!("{PREFIX}.layers.{layer}.attn"),
        xv,
        cfg.heads,
        None,
        None,
    )?;
    Ok(tape.value(out).clone())
}
