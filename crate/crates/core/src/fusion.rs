//! Concatenation of per-view tokens and the shared MLP projector.
//!
//! Fused order is fixed: tile 0, tile 1, ..., tile `r*c - 1` (row-major),
//! then the global view. No separator tokens are inserted.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::nn;
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

pub const PREFIX: &str = "projector";

/// Which view a visual token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Tile(usize),
    Global,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Tile(t) => write!(f, "tile{t}"),
            Provenance::Global => write!(f, "global"),
        }
    }
}

/// `n x d` tokens with one provenance tag per token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub provenance: Vec<Provenance>,
}

impl<T: Scalar> TokenSequence<T> {
    pub fn new(tokens: Tensor<T>, provenance: Vec<Provenance>) -> Result<Self> {
        let (n, _) = tokens.dims2()?;
        if provenance.len() != n {
            return Err(Error::shape(format!(
                "{n} tokens with {} provenance tags",
                provenance.len()
            )));
        }
        Ok(Self { tokens, provenance })
    }

    /// Tags every token of one view with the same provenance.
    pub fn for_view(tokens: Tensor<T>, source: Provenance) -> Result<Self> {
        let (n, _) = tokens.dims2()?;
        Self::new(tokens, vec![source; n])
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Rows tagged with `source`.
    pub fn rows_from(&self, source: Provenance) -> Vec<usize> {
        self.provenance
            .iter()
            .enumerate()
            .filter(|(_, p)| **p == source)
            .map(|(i, _)| i)
            .collect()
    }
}

/// View order used everywhere a fused sequence is assembled.
pub fn fusion_order(tile_count: usize, has_global: bool) -> Vec<Provenance> {
    (0..tile_count)
        .map(Provenance::Tile)
        .chain(has_global.then_some(Provenance::Global))
        .collect()
}

/// Concatenates tile tokens in the given row-major order, then the global
/// tokens if present.
pub fn fuse<T: Scalar>(
    tile_tokens: &[TokenSequence<T>],
    global_tokens: Option<&TokenSequence<T>>,
    spec: &GridSpec,
) -> Result<TokenSequence<T>> {
    if tile_tokens.len() != spec.tile_count() {
        return Err(Error::Contract(format!(
            "{} tile sequences for a {} grid",
            tile_tokens.len(),
            spec.label()
        )));
    }
    if global_tokens.is_some() != spec.include_global {
        return Err(Error::Contract(format!(
            "global tokens {} but grid {} says otherwise",
            if global_tokens.is_some() { "given" } else { "missing" },
            spec.label()
        )));
    }
    let parts: Vec<&TokenSequence<T>> = tile_tokens.iter().chain(global_tokens).collect();
    let d = parts[0].dim();
    if let Some(bad) = parts.iter().find(|p| p.dim() != d) {
        return Err(Error::shape(format!(
            "cannot fuse tokens of width {d} and {}",
            bad.dim()
        )));
    }
    let n: usize = parts.iter().map(|p| p.len()).sum();
    let mut data = Vec::with_capacity(n * d);
    let mut provenance = Vec::with_capacity(n);
    for p in &parts {
        data.extend_from_slice(p.tokens.data());
        provenance.extend_from_slice(&p.provenance);
    }
    TokenSequence::new(Tensor::new(vec![n, d], data)?, provenance)
}

/// `(r*c + [global]) * (S/p)^2`.
pub fn visual_token_count(spec: &GridSpec, cfg: &EncoderConfig) -> usize {
    spec.view_count() * cfg.tokens_per_view()
}

/// Provenance map of a fused sequence, without encoding anything.
pub fn provenance_map(spec: &GridSpec, cfg: &EncoderConfig) -> Vec<Provenance> {
    fusion_order(spec.tile_count(), spec.include_global)
        .into_iter()
        .flat_map(|p| std::iter::repeat_n(p, cfg.tokens_per_view()))
        .collect()
}

/// Two-layer GELU MLP `d -> d_lm -> d_lm`, shared by all tokens.
pub fn init_projector_params<T: Scalar>(
    d_in: usize,
    d_lm: usize,
    store: &mut ParamStore<T>,
    rng: &mut impl Rng,
) -> Result<()> {
    nn::init_linear(store, &format!("{PREFIX}.fc1"), d_in, d_lm, rng)?;
    nn::init_linear(store, &format!("{PREFIX}.fc2"), d_lm, d_lm, rng)
}

pub fn project_tape<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
    let d_in = store.tensor(&format!("{PREFIX}.fc1.weight"))?.shape()[1];
    if tape.shape(x).get(1) != Some(&d_in) {
        return Err(Error::shape(format!(
            "projector expects width {d_in}, got {:?}",
            tape.shape(x)
        )));
    }
    nn::mlp(tape, store, PREFIX, x)
}

/// Applies the projector token by token; order and provenance are kept.
pub fn project<T: Scalar>(tokens: &TokenSequence<T>, params: &ParamStore<T>) -> Result<TokenSequence<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(tokens.tokens.clone());
    let y = project_tape(&mut tape, params, x)?;
    TokenSequence::new(tape.value(y).clone(), tokens.provenance.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    fn seq(n: usize, d: usize, fill: f32, src: Provenance) -> TokenSequence<f32> {
        TokenSequence::for_view(Tensor::full(&[n, d], fill), src).unwrap()
    }

    #[test]
    fn single_view_fuse_is_identity() {
        let spec = GridSpec::baseline(64);
        let s = TokenSequence::for_view(Tensor::from_fn(&[3, 2], |i| i as f32), Provenance::Tile(0)).unwrap();
        assert_eq!(fuse(std::slice::from_ref(&s), None, &spec).unwrap(), s);
    }

    #[test]
    fn two_by_two_with_global_layout() {
        let spec = GridSpec::new(2, 2, true, 64).unwrap();
        let tiles: Vec<_> = (0..4).map(|t| seq(64, 4, t as f32, Provenance::Tile(t))).collect();
        let g = seq(64, 4, 9.0, Provenance::Global);
        let fused = fuse(&tiles, Some(&g), &spec).unwrap();
        assert_eq!(fused.len(), 320);
        let mut want = Vec::new();
        for t in 0..4 {
            want.extend(std::iter::repeat_n(Provenance::Tile(t), 64));
        }
        want.extend(std::iter::repeat_n(Provenance::Global, 64));
        assert_eq!(fused.provenance, want);
        assert_eq!(fused.tokens.row(319)[0], 9.0);
        assert_eq!(fused.tokens.row(64)[0], 1.0);
    }

    #[test]
    fn three_by_three_with_global_count() {
        let spec = GridSpec::new(3, 3, true, 224).unwrap();
        let cfg = EncoderConfig {
            patch_size: 16,
            view_side: 224,
            ..EncoderConfig::default()
        };
        let tiles: Vec<_> = (0..9).map(|t| seq(196, 2, 0.0, Provenance::Tile(t))).collect();
        let g = seq(196, 2, 0.0, Provenance::Global);
        let fused = fuse(&tiles, Some(&g), &spec).unwrap();
        assert_eq!(fused.len(), 1960);
        assert_eq!(fused.len(), visual_token_count(&spec, &cfg));
        assert_eq!(provenance_map(&spec, &cfg), fused.provenance);
    }

    #[test]
    fn token_count_examples() {
        let vit16 = EncoderConfig {
            patch_size: 16,
            view_side: 224,
            ..EncoderConfig::default()
        };
        assert_eq!(visual_token_count(&GridSpec::baseline(224), &vit16), 196);
        assert_eq!(visual_token_count(&GridSpec::new(2, 2, true, 224).unwrap(), &vit16), 980);
        let toy = EncoderConfig::default();
        assert_eq!(visual_token_count(&GridSpec::new(3, 3, false, 64).unwrap(), &toy), 576);
    }

    #[test]
    fn fuse_rejects_bad_inputs() {
        let spec = GridSpec::new(2, 1, false, 8).unwrap();
        let a = seq(2, 4, 0.0, Provenance::Tile(0));
        let b = seq(2, 3, 0.0, Provenance::Tile(1));
        assert!(matches!(fuse(&[a.clone(), b], None, &spec), Err(Error::Shape(_))));
        assert!(matches!(fuse(std::slice::from_ref(&a), None, &spec), Err(Error::Contract(_))));
        assert!(matches!(fuse(&[a.clone(), a.clone()], Some(&a), &spec), Err(Error::Contract(_))));
    }

    fn projector(seed: u64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        init_projector_params(4, 6, &mut s, &mut rng_for(seed, "init")).unwrap();
        s
    }

    #[test]
    fn zero_weights_emit_the_output_bias() {
        let mut p = projector(1);
        for name in ["projector.fc1.weight", "projector.fc2.weight"] {
            let shape = p.tensor(name).unwrap().shape().to_vec();
            p.get_mut(name).unwrap().tensor = Tensor::zeros(&shape);
        }
        let b2 = Tensor::from_fn(&[6], |i| i as f64 - 2.5);
        p.get_mut("projector.fc2.bias").unwrap().tensor = b2.clone();
        let x = TokenSequence::for_view(Tensor::from_fn(&[3, 4], |i| i as f64), Provenance::Global).unwrap();
        let y = project(&x, &p).unwrap();
        for r in 0..3 {
            assert_eq!(y.tokens.row(r), b2.data());
        }
        assert_eq!(y.provenance, x.provenance);
    }

    #[test]
    fn projection_commutes_with_permutation() {
        let p = projector(2);
        let mut rng = rng_for(3, "x");
        let x = Tensor::from_fn(&[5, 4], |_| rng.random::<f64>());
        let perm = [3usize, 0, 4, 1, 2];
        let xp = Tensor::from_fn(&[5, 4], |i| x.row(perm[i / 4])[i % 4]);
        let prov: Vec<_> = (0..5).map(Provenance::Tile).collect();
        let y = project(&TokenSequence::new(x, prov.clone()).unwrap(), &p).unwrap();
        let yp = project(&TokenSequence::new(xp, prov).unwrap(), &p).unwrap();
        for (i, src) in perm.iter().enumerate() {
            assert_eq!(yp.tokens.row(i), y.tokens.row(*src));
        }
    }

    #[test]
    fn projector_rejects_wrong_width() {
        let p = projector(4);
        let x = TokenSequence::for_view(Tensor::<f64>::zeros(&[2, 5]), Provenance::Global).unwrap();
        assert!(matches!(project(&x, &p), Err(Error::Shape(_))));
    }
}
