//! Layer building blocks shared by the encoder, projector and decoder.
//!
//! Linear weights are stored `[out, in]` and applied as `x · Wᵀ + b` to
//! row-major token matrices `[n, in]`.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn init_linear<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.insert_normal(
        &format!("{prefix}.weight"),
        &[d_out, d_in],
        (1.0 / d_in as f64).sqrt(),
        rng,
    )?;
    store.insert_const(&format!("{prefix}.bias"), &[d_out], 0.0)
}

pub(crate) fn init_layer_norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<()> {
    store.insert_const(&format!("{prefix}.gain"), &[d], 1.0)?;
    store.insert_const(&format!("{prefix}.bias"), &[d], 0.0)
}

/// Low-rank adapter attached to a linear map: adds `scale · (x Aᵀ) Bᵀ`.
pub(crate) struct Adapter<'a> {
    pub prefix: &'a str,
    pub scale: f64,
}

pub(crate) fn linear<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    adapter: Option<Adapter<'_>>,
) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.weight"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    let xw = tape.matmul_t(x, w)?;
    let y = tape.add_row(xw, b)?;
    match adapter {
        None => Ok(y),
        Some(Adapter { prefix: ap, scale }) => {
            let a = tape.param(store, &format!("{ap}.a"))?;
            let bm = tape.param(store, &format!("{ap}.b"))?;
            let down = tape.matmul_t(x, a)?;
            let up = tape.matmul_t(down, bm)?;
            let delta = tape.scale(up, T::of(scale));
            tape.add(y, delta)
        }
    }
}

pub(crate) fn layer_norm<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let g = tape.param(store, &format!("{prefix}.gain"))?;
    let b = tape.param(store, &format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

/// `[n, n]` additive mask: 0 on and below the diagonal, -inf above.
pub(crate) fn causal_mask<T: Scalar>(n: usize) -> Tensor<T> {
    Tensor::from_fn(&[n, n], |i| {
        if i % n > i / n {
            T::neg_infinity()
        } else {
            T::zero()
        }
    })
}

/// Scaled dot-product attention over already-projected `q, k, v` (`[n, d]`),
/// split into `heads` heads of width `d / heads`. Returns the concatenated
/// head outputs, before the output projection.
pub(crate) fn multi_head<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, 1, h * dh, dh)?,
                tape.slice(k, 1, h * dh, dh)?,
                tape.slice(v, 1, h * dh, dh)?,
            )
        };
        let qs = tape.scale(qh, scale);
        let mut scores = tape.matmul_t(qs, kh)?;
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let probs = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(probs, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat(&outs, 1)
    }
}

/// Full self-attention sub-layer (projections, heads, output projection).
/// `adapters` optionally wraps the query and value projections.
pub(crate) fn self_attention_layer<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<Var>,
    adapters: Option<(&str, f64)>,
) -> Result<Var> {
    let (qa, va) = match adapters {
        Some((lp, s)) => (Some((format!("{lp}.wq"), s)), Some((format!("{lp}.wv"), s))),
        None => (None, None),
    };
    let q = linear(
        tape,
        store,
        &format!("{prefix}.wq"),
        x,
        qa.as_ref().map(|(p, s)| Adapter { prefix: p, scale: *s }),
    )?;
    let k = linear(tape, store, &format!("{prefix}.wk"), x, None)?;
    let v = linear(
        tape,
        store,
        &format!("{prefix}.wv"),
        x,
        va.as_ref().map(|(p, s)| Adapter { prefix: p, scale: *s }),
    )?;
    let heads_out = multi_head(tape, q, k, v, heads, mask)?;
    linear(tape, store, &format!("{prefix}.wo"), heads_out, None)
}

pub(crate) fn init_attention<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for w in ["wq", "wk", "wv", "wo"] {
        init_linear(store, &format!("{prefix}.{w}"), d, d, rng)?;
    }
    Ok(())
}

pub(crate) fn mlp<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let h = linear(tape, store, &format!("{prefix}.fc1"), x, None)?;
    let h = tape.gelu(h);
    linear(tape, store, &format!("{prefix}.fc2"), h, None)
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub(crate) fn block<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<Var>,
    adapters: Option<(&str, f64)>,
) -> Result<Var> {
    let h = layer_norm(tape, store, &format!("{prefix}.ln1"), x)?;
    let a = self_attention_layer(tape, store, &format!("{prefix}.attn"), h, heads, mask, adapters)?;
    let x = tape.add(x, a)?;
    let h = layer_norm(tape, store, &format!("{prefix}.ln2"), x)?;
    let m = mlp(tape, store, &format!("{prefix}.mlp"), h)?;
    tape.add(x, m)
}

pub(crate) fn init_block<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    d: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    init_layer_norm(store, &format!("{prefix}.ln1"), d)?;
    init_attention(store, &format!("{prefix}.attn"), d, rng)?;
    init_layer_norm(store, &format!("{prefix}.ln2"), d)?;
    init_linear(store, &format!("{prefix}.mlp.fc1"), d, hidden, rng)?;
    init_linear(store, &format!("{prefix}.mlp.fc2"), hidden, d, rng)
}
