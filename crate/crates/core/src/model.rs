//! The assembled network: EEG encoder on one side; dynamic filter, fusion,
//! prompted frozen ViT and projection on the other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{self, VitSpec, PROMPTS};
use crate::config::{FusionStrategy, RunConfig};
use crate::data::PairedBatch;
use crate::eeg;
use crate::error::{Error, Result};
use crate::filter::{self, FilterSpec};
use crate::fusion;
use crate::loss::{self, LossTerms, LossWeights, LOG_TAU};
use crate::params::{Ctx, ParamStore};
use crate::tensor::Tensor;

/// Input geometry the parameters were built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub channels: usize,
    pub times: usize,
    pub image_size: usize,
}

impl ModelDims {
    pub fn of(batch: &PairedBatch) -> Result<Self> {
        let (h, w) = batch.image_size();
        if h != w {
            return Err(Error::Config(format!("images must be square, got {h}x{w}")));
        }
        Ok(Self { channels: batch.channels(), times: batch.times(), image_size: h })
    }
}

// Independent RNG streams so each module's initialization only depends on
// the seed and its own shape.
const STREAM_FROZEN: u64 = 1;
const STREAM_PROMPT_POS: u64 = 2;
const STREAM_IMAGE_HEAD: u64 = 3;
const STREAM_EEG: u64 = 4;
const STREAM_FILTER: u64 = 5;
const STREAM_FUSION: u64 = 6;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(s);
    r
}

#[derive(Clone, Debug)]
pub struct NeuroClip {
    pub config: RunConfig,
    pub dims: ModelDims,
    pub vit: VitSpec,
    pub filter: FilterSpec,
    pub weights: LossWeights,
    pub params: ParamStore,
}

/// Intermediate image-side tensors, for inspection and tests.
pub struct ImageForward {
    pub z: Var,
    pub kernels: Var,
    pub filtered: Var,
    pub alpha: Option<Var>,
}

impl NeuroClip {
    pub fn new(cfg: &RunConfig, dims: ModelDims) -> Result<Self> {
        cfg.validate()?;
        eeg::check_kind(cfg.encoder.kind)?;
        let vit = VitSpec::from_config(&cfg.backbone, dims.image_size, cfg.encoder.embed_dim)?;
        let filter = FilterSpec::from_config(&cfg.filter)?;
        let weights = LossWeights::from_config(&cfg.loss)?;
        let mut params = ParamStore::new();
        let seed = cfg.seed;
        backbone::register(
            &mut params,
            &vit,
            &mut stream(seed, STREAM_FROZEN),
            &mut stream(seed, STREAM_PROMPT_POS),
            &mut stream(seed, STREAM_IMAGE_HEAD),
        )?;
        eeg::register(&mut params, dims.channels, dims.times, cfg.encoder.embed_dim, &mut stream(seed, STREAM_EEG))?;
        filter::register(&mut params, &filter, &mut stream(seed, STREAM_FILTER))?;
        match cfg.fusion.strategy {
            FusionStrategy::Catf => {
                fusion::register_catf(&mut params, vit.width, cfg.fusion.gate_bias_init, &mut stream(seed, STREAM_FUSION))?
            }
            FusionStrategy::Bilinear => fusion::register_bilinear(&mut params, cfg.fusion.bilinear_init)?,
        }
        loss::register(&mut params, cfg.loss.tau_init)?;
        Ok(Self { config: cfg.clone(), dims, vit, filter, weights, params })
    }

    /// Rebuilds a model around stored parameters, which must match the
    /// registry a fresh build would produce (names, order, shapes, roles).
    pub fn with_params(cfg: &RunConfig, dims: ModelDims, params: ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg, dims)?;
        if m.params.len() != params.len() {
            return Err(Error::Contract(format!(
                "config expects {} parameters, checkpoint holds {}",
                m.params.len(),
                params.len()
            )));
        }
        for (want, got) in m.params.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() || want.role != got.role {
                return Err(Error::Contract(format!(
                    "parameter mismatch: config expects {} {:?} {:?}, checkpoint has {} {:?} {:?}",
                    want.name,
                    want.value.shape(),
                    want.role,
                    got.name,
                    got.value.shape(),
                    got.role
                )));
            }
        }
        m.params = params;
        Ok(m)
    }

    pub fn embed_eeg(&self, ctx: &Ctx, eeg: Var) -> Result<Var> {
        eeg::forward(ctx, eeg)
    }

    pub fn image_forward(&self, ctx: &Ctx, images: Var) -> Result<ImageForward> {
        let g = ctx.g;
        let kernels = filter::generate_filters(ctx, images)?;
        let filtered = filter::apply_dynamic_filter(g, images, kernels, self.filter.kernel)?;
        let (tokens, alpha) = match self.config.fusion.strategy {
            FusionStrategy::Catf => {
                let xo = backbone::patch_embed(ctx, &self.vit, images)?;
                let xf = backbone::patch_embed(ctx, &self.vit, filtered)?;
                let out = fusion::catf(ctx, xo, xf, self.config.fusion.heads)?;
                (out.fused, Some(out.alpha))
            }
            FusionStrategy::Bilinear => {
                let mixed = fusion::bilinear_mix_learned(ctx, images, filtered)?;
                (backbone::patch_embed(ctx, &self.vit, mixed)?, None)
            }
        };
        let prompts = if self.vit.prompts > 0 { Some(ctx.p(PROMPTS)?) } else { None };
        let pos = backbone::positions(ctx, &self.vit)?;
        let seq = backbone::insert_prompts(g, ctx.p("backbone.cls")?, prompts, tokens, pos)?;
        let cls = backbone::vit_forward(ctx, &self.vit, seq)?;
        let z = backbone::project(ctx, &self.vit, cls)?;
        Ok(ImageForward { z, kernels, filtered, alpha })
    }

    pub fn embed_images(&self, ctx: &Ctx, images: Var) -> Result<Var> {
        Ok(self.image_forward(ctx, images)?.z)
    }

    pub fn check_batch(&self, batch: &PairedBatch) -> Result<()> {
        let got = ModelDims::of(batch)?;
        if got != self.dims {
            return Err(Error::Contract(format!("batch geometry {got:?} does not match model {:?}", self.dims)));
        }
        Ok(())
    }

    /// `(z_E, z_I)` for a batch.
    pub fn forward(&self, ctx: &Ctx, batch: &PairedBatch) -> Result<(Var, Var)> {
        self.check_batch(batch)?;
        let ze = self.embed_eeg(ctx, ctx.g.constant(batch.eeg.clone()))?;
        let zi = self.embed_images(ctx, ctx.g.constant(batch.images.clone()))?;
        Ok((ze, zi))
    }

    pub fn loss(&self, ctx: &Ctx, ze: Var, zi: Var) -> Result<LossTerms> {
        loss::total_loss(ctx.g, ze, zi, ctx.p(LOG_TAU)?, &self.weights)
    }

    pub fn temperature(&self) -> f64 {
        self.params.value(LOG_TAU).map(|t| t.item().exp()).unwrap_or(f64::NAN)
    }

    /// Embeddings of every pair, computed `chunk` rows at a time without gradients.
    pub fn embed_all(&self, batch: &PairedBatch, chunk: usize) -> Result<(Tensor, Tensor)> {
        self.check_batch(batch)?;
        let n = batch.len();
        let d = self.vit.embed_dim;
        let (mut ze, mut zi) = (Vec::with_capacity(n * d), Vec::with_capacity(n * d));
        let idx: Vec<usize> = (0..n).collect();
        for part in idx.chunks(chunk.max(1)) {
            let sub = batch.select(part);
            let g = Graph::new();
            let ctx = Ctx::new(&g, &self.params, false);
            let (e, i) = self.forward(&ctx, &sub)?;
            ze.extend_from_slice(g.value(e).data());
            zi.extend_from_slice(g.value(i).data());
        }
        Ok((Tensor::new([n, d], ze)?, Tensor::new([n, d], zi)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;

    fn dims() -> ModelDims {
        ModelDims { channels: 4, times: 10, image_size: 16 }
    }

    #[test]
    fn group_partition() {
        let m = NeuroClip::new(&RunConfig::default(), dims()).unwrap();
        for p in m.params.iter() {
            let n = p.name.as_str();
            let expect = if n.starts_with("backbone.") {
                None
            } else if n.starts_with("eeg.") || n.starts_with("projection.") || n == LOG_TAU {
                Some(Group::A)
            } else if n.starts_with("filter.") || n.starts_with("fusion.") || n == PROMPTS {
                Some(Group::B)
            } else {
                panic!("unclassified parameter {n}")
            };
            assert_eq!(p.group(), expect, "{n}");
        }
    }

    #[test]
    fn backbone_does_not_depend_on_trainable_layout() {
        let a = NeuroClip::new(&RunConfig::default(), dims()).unwrap();
        let mut cfg = RunConfig::default();
        cfg.backbone.prompts = 0;
        cfg.fusion.strategy = FusionStrategy::Bilinear;
        let b = NeuroClip::new(&cfg, dims()).unwrap();
        let frozen = |m: &NeuroClip| m.params.hash_where(|p| p.name.starts_with("backbone.") && p.name != "backbone.prompt_pos");
        assert_eq!(frozen(&a), frozen(&b));
        assert_eq!(a.params.value("eeg.projector.weight").unwrap(), b.params.value("eeg.projector.weight").unwrap());
    }

    #[test]
    fn other_encoders_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.encoder.kind = crate::config::EncoderKind::Tsconv;
        assert!(matches!(NeuroClip::new(&cfg, dims()), Err(Error::NotImplemented(_))));
    }

    #[test]
    fn mismatched_params_are_rejected() {
        let a = NeuroClip::new(&RunConfig::default(), dims()).unwrap();
        let other = ModelDims { channels: 5, ..dims() };
        assert!(matches!(NeuroClip::with_params(&RunConfig::default(), other, a.params), Err(Error::Contract(_))));
    }
}
