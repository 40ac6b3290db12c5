//! End-to-end model: split → normalise → encode each view → fuse → project
//! → decode.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::{self, DecoderConfig, LoraConfig};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{self, Provenance, TokenSequence};
use crate::grid::{self, GridSpec, PixelNorm, TileSet};
use crate::image::RasterImage;
use crate::par;
use crate::seed::{rng_for, sub_seed};
use crate::tensor::{
    accumulate_grads, load_checkpoint, save_checkpoint, CheckpointManifest, GradMap, ParamStore,
    Scalar, Tape, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub grid: GridSpec,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    #[serde(default)]
    pub norm: PixelNorm,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let encoder = EncoderConfig::default();
        Self {
            grid: GridSpec::baseline(encoder.view_side),
            encoder,
            decoder: DecoderConfig::default(),
            lora: Some(LoraConfig::default()),
            norm: PixelNorm::default(),
        }
    }
}

impl PipelineConfig {
    pub fn visual_tokens(&self) -> usize {
        fusion::visual_token_count(&self.grid, &self.encoder)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        if let Some(l) = &self.lora {
            l.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.grid.view_side != self.encoder.view_side {
            return Err(Error::Config(format!(
                "grid view side {} differs from encoder view side {}",
                self.grid.view_side, self.encoder.view_side
            )));
        }
        if self.norm.mean.len() != self.encoder.channels || self.norm.std.len() != self.encoder.channels {
            return Err(Error::Config(format!(
                "pixel normalisation is not {}-channel",
                self.encoder.channels
            )));
        }
        let n_v = self.visual_tokens();
        if n_v + 1 > self.decoder.max_seq {
            return Err(Error::Capacity(format!(
                "{n_v} visual tokens for grid {} leave no room for text in max_seq {}",
                self.grid.label(),
                self.decoder.max_seq
            )));
        }
        Ok(())
    }

    /// Same model with a different grid; the encoder view side follows.
    pub fn with_grid(&self, grid: GridSpec) -> Self {
        let mut c = self.clone();
        c.encoder.view_side = grid.view_side;
        c.grid = grid;
        c
    }
}

/// How far a model has been through the two training phases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Initialized,
    Pretrained,
    Finetuned,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Initialized => "initialized",
            Stage::Pretrained => "pretrained",
            Stage::Finetuned => "finetuned",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "initialized" => Ok(Stage::Initialized),
            "pretrained" => Ok(Stage::Pretrained),
            "finetuned" => Ok(Stage::Finetuned),
            _ => Err(Error::Parse(format!("unknown stage `{s}`"))),
        }
    }
}

/// One supervised example: the model reads `prompt` and is scored on
/// predicting `answer` after it.
#[derive(Clone, Debug)]
pub struct Example<'a> {
    pub image: &'a RasterImage,
    pub prompt: &'a [u8],
    pub answer: &'a [u8],
}

#[derive(Clone, Debug)]
pub struct LossAndGrads<T> {
    pub loss: f64,
    pub grads: GradMap<T>,
    /// Visual plus text positions processed by the decoder.
    pub tokens: usize,
}

#[derive(Clone, Debug)]
pub struct Pipeline<T> {
    pub config: PipelineConfig,
    pub params: ParamStore<T>,
    pub stage: Stage,
}

/// Builds a freshly initialised pipeline in single precision.
pub fn build_pipeline(config: PipelineConfig, seed: u64) -> Result<Pipeline<f32>> {
    Pipeline::new(config, seed)
}

pub fn byte_ids(text: &[u8]) -> Vec<usize> {
    text.iter().map(|b| *b as usize).collect()
}

impl<T: Scalar> Pipeline<T> {
    /// Each component draws from its own stream under the `init` sub-seed,
    /// so attaching adapters never changes the base weights.
    pub fn new(config: PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let init = sub_seed(seed, "init");
        let mut params = ParamStore::new();
        encoder::init_encoder_params(&config.encoder, &mut params, &mut rng_for(init, "vision"))?;
        fusion::init_projector_params(
            config.encoder.embed_dim,
            config.decoder.d_lm,
            &mut params,
            &mut rng_for(init, "projector"),
        )?;
        decoder::init_decoder_params(&config.decoder, &mut params, &mut rng_for(init, "lm"))?;
        if let Some(l) = &config.lora {
            decoder::init_lora_params(&config.decoder, l, &mut params, &mut rng_for(init, "lora"))?;
        }
        Ok(Self {
            config,
            params,
            stage: Stage::Initialized,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Pipeline<U> {
        Pipeline {
            config: self.config.clone(),
            params: self.params.cast(),
            stage: self.stage,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.config.grid
    }

    pub fn split(&self, image: &RasterImage) -> Result<TileSet> {
        if image.channels() != self.config.encoder.channels {
            return Err(Error::invalid(format!(
                "{}-channel image for a {}-channel encoder",
                image.channels(),
                self.config.encoder.channels
            )));
        }
        grid::split_into_tiles(image, &self.config.grid)
    }

    /// Normalised, patchified views in fusion order.
    pub fn view_patches(&self, tiles: &TileSet) -> Result<Vec<Tensor<T>>> {
        let spec = &self.config.grid;
        if tiles.tiles.len() != spec.tile_count() || tiles.global_view.is_some() != spec.include_global {
            return Err(Error::Contract(format!(
                "tile set with {} views does not match grid {}",
                tiles.view_count(),
                spec.label()
            )));
        }
        tiles
            .views()
            .map(|v| {
                let t = grid::normalize_pixels(v, &self.config.norm)?;
                encoder::patchify(&t, self.config.encoder.patch_size)
            })
            .collect()
    }

    fn provenance(&self) -> Vec<Provenance> {
        fusion::fusion_order(self.config.grid.tile_count(), self.config.grid.include_global)
    }

    /// Encodes every view independently (in parallel when enabled) and
    /// fuses the results. These are the pre-projection tokens.
    pub fn encode_tile_set(&self, tiles: &TileSet) -> Result<TokenSequence<T>> {
        let patches = self.view_patches(tiles)?;
        let encoded = par::map_slice(&patches, |p| {
            encoder::encode_view_patches(p, &self.config.encoder, &self.params)
        });
        let mut seqs = Vec::with_capacity(encoded.len());
        for (tokens, source) in encoded.into_iter().zip(self.provenance()) {
            seqs.push(TokenSequence::for_view(tokens?, source)?);
        }
        let global = if self.config.grid.include_global {
            seqs.pop()
        } else {
            None
        };
        fusion::fuse(&seqs, global.as_ref(), &self.config.grid)
    }

    /// Projected visual tokens with provenance, as seen by the decoder.
    pub fn visual_tokens(&self, image: &RasterImage) -> Result<TokenSequence<T>> {
        let fused = self.encode_tile_set(&self.split(image)?)?;
        fusion::project(&fused, &self.params)
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        let v = self.config.decoder.vocab_size;
        match ids.iter().find(|i| **i >= v) {
            Some(i) => Err(Error::invalid(format!("token id {i} outside vocabulary {v}"))),
            None => Ok(()),
        }
    }

    fn decode_values(&self, visual: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
        self.check_ids(ids)?;
        decoder::decode_forward(
            &self.params,
            &self.config.decoder,
            self.config.lora.as_ref(),
            Some(visual),
            ids,
        )
    }

    /// Logits `[n_t, vocab]` for the text positions.
    pub fn logits(&self, image: &RasterImage, text_ids: &[usize]) -> Result<Tensor<T>> {
        let visual = self.visual_tokens(image)?;
        self.decode_values(&visual.tokens, text_ids)
    }

    /// Greedy decoding of up to `max_new` bytes after `prompt`.
    pub fn generate(&self, image: &RasterImage, prompt: &[u8], max_new: usize) -> Result<Vec<u8>> {
        if prompt.is_empty() {
            return Err(Error::invalid("empty prompt"));
        }
        let visual = self.visual_tokens(image)?;
        let mut ids = byte_ids(prompt);
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let logits = self.decode_values(&visual.tokens, &ids)?;
            let last = logits.row(logits.shape()[0] - 1);
            let next = argmax(last);
            out.push(u8::try_from(next).map_err(|_| {
                Error::invalid(format!("generated id {next} is not a byte"))
            })?);
            ids.push(next);
        }
        Ok(out)
    }

    /// Mean answer-token cross-entropy, value only.
    pub fn loss(&self, ex: &Example<'_>) -> Result<f64> {
        let (text, targets, start) = teacher_forcing(ex)?;
        let logits = self.logits(ex.image, &text)?;
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let rows = tape.slice(l, 0, start, targets.len())?;
        let loss = decoder::language_loss(&mut tape, rows, &targets)?;
        Ok(tape.value(loss).data()[0].as_f64())
    }

    /// Loss and gradients of every trainable parameter.
    ///
    /// Each view is encoded on its own tape. The decoder tape sees the view
    /// outputs as leaves; their gradients then seed the per-view backward
    /// passes, which are summed in view order.
    pub fn loss_and_grads(&self, ex: &Example<'_>) -> Result<LossAndGrads<T>> {
        let (text, targets, start) = teacher_forcing(ex)?;
        self.check_ids(&text)?;
        let patches = self.view_patches(&self.split(ex.image)?)?;
        let cfg = &self.config.encoder;
        let enc_trainable = self
            .params
            .iter()
            .any(|p| p.trainable && p.name.starts_with(&format!("{}.", encoder::PREFIX)));

        let views: Vec<Result<(Tape<T>, Var)>> = par::map_slice(&patches, |p| {
            let mut tape = Tape::new();
            let x = tape.constant(p.clone());
            let out = encoder::encode_patches(&mut tape, &self.params, cfg, x)?;
            Ok((tape, out))
        });
        let views: Vec<(Tape<T>, Var)> = views.into_iter().collect::<Result<_>>()?;

        let mut tape = Tape::new();
        let leaves: Vec<Var> = views
            .iter()
            .map(|(t, out)| tape.leaf(t.value(*out).clone(), enc_trainable))
            .collect();
        let fused = tape.concat(&leaves, 0)?;
        let visual = fusion::project_tape(&mut tape, &self.params, fused)?;
        let logits = decoder::decode_forward_tape(
            &mut tape,
            &self.params,
            &self.config.decoder,
            self.config.lora.as_ref(),
            Some(visual),
            &text,
        )?;
        let rows = tape.slice(logits, 0, start, targets.len())?;
        let loss = decoder::language_loss(&mut tape, rows, &targets)?;
        let grads = tape.backward(loss)?;
        let mut all = tape.param_grads(&grads);

        if enc_trainable {
            let seeds: Vec<Vec<T>> = leaves
                .iter()
                .zip(&views)
                .map(|(leaf, (t, out))| {
                    grads
                        .get(*leaf)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![T::zero(); t.value(*out).len()])
                })
                .collect();
            let jobs: Vec<(&(Tape<T>, Var), Vec<T>)> = views.iter().zip(seeds).collect();
            let per_view: Vec<Result<GradMap<T>>> = par::map_slice(&jobs, |((t, out), seed)| {
                let g = t.backward_seeded(*out, seed.clone())?;
                Ok(t.param_grads(&g))
            });
            for g in per_view {
                accumulate_grads(&mut all, g?);
            }
        }
        Ok(LossAndGrads {
            loss: tape.value(loss).data()[0].as_f64(),
            grads: all,
            tokens: self.config.visual_tokens() + text.len(),
        })
    }

    /// Copy with every adapter folded into its base weight.
    pub fn merged(&self) -> Result<Self> {
        let mut out = self.clone();
        if let Some(l) = out.config.lora.take() {
            decoder::merge_lora(&self.config.decoder, &l, &mut out.params)?;
        }
        Ok(out)
    }

    /// Writes a checkpoint whose metadata carries the config and stage.
    pub fn save(&self, path: &Path, extra: &BTreeMap<String, String>) -> Result<CheckpointManifest> {
        let mut meta = extra.clone();
        meta.insert("config".into(), serde_json::to_string(&self.config)?);
        meta.insert("stage".into(), self.stage.to_string());
        save_checkpoint(&self.params.cast::<f32>(), &meta, path)
    }

    /// Loads a checkpoint and checks it against the layout its config
    /// implies. All parameters come back trainable.
    pub fn load(path: &Path) -> Result<(Self, CheckpointManifest)> {
        let (store, manifest) = load_checkpoint(path)?;
        let config: PipelineConfig = serde_json::from_str(
            manifest
                .metadata
                .get("config")
                .ok_or_else(|| Error::Parse("checkpoint has no config".into()))?,
        )?;
        let stage = manifest
            .metadata
            .get("stage")
            .map_or(Ok(Stage::Initialized), |s| s.parse())?;
        let skeleton = Pipeline::<f32>::new(config.clone(), 0)?;
        let expected: Vec<(&str, &[usize])> = skeleton
            .params
            .iter()
            .map(|p| (p.name.as_str(), p.tensor.shape()))
            .collect();
        let found: Vec<(&str, &[usize])> = store
            .iter()
            .map(|p| (p.name.as_str(), p.tensor.shape()))
            .collect();
        if expected != found {
            return Err(Error::Parse(format!(
                "checkpoint tensors do not match its config ({} expected, {} found)",
                expected.len(),
                found.len()
            )));
        }
        let pipeline = Pipeline {
            config,
            params: store.cast(),
            stage,
        };
        Ok((pipeline, manifest))
    }
}

/// Input ids, answer targets and the first logit row that predicts an
/// answer byte.
fn teacher_forcing(ex: &Example<'_>) -> Result<(Vec<usize>, Vec<usize>, usize)> {
    if ex.prompt.is_empty() || ex.answer.is_empty() {
        return Err(Error::invalid("prompt and answer must be non-empty"));
    }
    let mut text = byte_ids(ex.prompt);
    text.extend(byte_ids(&ex.answer[..ex.answer.len() - 1]));
    Ok((text, byte_ids(ex.answer), ex.prompt.len() - 1))
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
