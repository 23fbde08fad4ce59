//! Per-component gradient checks on a tiny model, as run by `gradcheck`.
//!
//! Each component is reduced to a scalar by contracting its output with a
//! fixed random tensor, so every output coordinate contributes to the check.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::backbone::{self, PROMPTS};
use crate::config::{FusionStrategy, RunConfig};
use crate::data::PairedBatch;
use crate::eeg::{self, PERTURB_BIAS, PERTURB_WEIGHT, PROJECTOR};
use crate::error::{Error, Result};
use crate::filter;
use crate::fusion::{self, MIX_LOGIT};
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::loss::{self, LossWeights, LOG_TAU};
use crate::model::{ModelDims, NeuroClip};
use crate::params::Ctx;
use crate::tensor::Tensor;

pub const BATCH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Component {
    Perturb,
    Encoder,
    FilterGen,
    DynamicFilter,
    Fusion,
    Bilinear,
    Prompts,
    Projection,
    Clip,
    Soft,
    Rel,
    Pipeline,
}

impl Component {
    pub const ALL: [Component; 12] = [
        Component::Perturb,
        Component::Encoder,
        Component::FilterGen,
        Component::DynamicFilter,
        Component::Fusion,
        Component::Bilinear,
        Component::Prompts,
        Component::Projection,
        Component::Clip,
        Component::Soft,
        Component::Rel,
        Component::Pipeline,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Perturb => "perturb",
            Component::Encoder => "encoder",
            Component::FilterGen => "filter-gen",
            Component::DynamicFilter => "dynamic-filter",
            Component::Fusion => "fusion",
            Component::Bilinear => "bilinear",
            Component::Prompts => "prompts",
            Component::Projection => "projection",
            Component::Clip => "clip",
            Component::Soft => "soft",
            Component::Rel => "rel",
            Component::Pipeline => "pipeline",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| {
            let names: Vec<_> = Component::ALL.iter().map(|c| c.name()).collect();
            Error::Config(format!("unknown component {s:?}; expected one of {}", names.join(", ")))
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ComponentReport {
    pub component: String,
    pub seed: u64,
    pub passed: bool,
    pub max_rel_err: f64,
    pub tensors: Vec<(String, f64)>,
}

impl ComponentReport {
    fn new(c: Component, seed: u64, r: &GradCheckReport) -> Self {
        Self {
            component: c.name().into(),
            seed,
            passed: r.passed(),
            max_rel_err: r.worst(),
            tensors: r.entries.iter().map(|e| (e.name.clone(), e.max_rel_err)).collect(),
        }
    }
}

/// Small enough that a full-pipeline check takes a fraction of a second.
pub fn tiny_config(seed: u64, strategy: FusionStrategy) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.data.channels = 3;
    cfg.data.times = 6;
    cfg.data.image_size = 8;
    cfg.encoder.embed_dim = 6;
    cfg.filter.kernel_h = 3;
    cfg.filter.kernel_w = 3;
    cfg.filter.stem_channels = [2, 3];
    cfg.filter.hidden = 5;
    cfg.fusion.strategy = strategy;
    cfg.fusion.heads = 2;
    cfg.backbone.width = 8;
    cfg.backbone.depth = 1;
    cfg.backbone.heads = 2;
    cfg.backbone.mlp_ratio = 2;
    cfg.backbone.patch = 4;
    cfg.backbone.prompts = 2;
    cfg.backbone.projection_depth = 2;
    // Targets stay on the tape so the check covers their gradient paths too.
    cfg.loss.detach_targets = false;
    cfg
}

struct Harness {
    model: NeuroClip,
    batch: PairedBatch,
    seed: u64,
}

impl Harness {
    fn new(seed: u64, strategy: FusionStrategy) -> Result<Self> {
        let cfg = tiny_config(seed, strategy);
        let dims = ModelDims { channels: cfg.data.channels, times: cfg.data.times, image_size: cfg.data.image_size };
        let mut model = NeuroClip::new(&cfg, dims)?;
        // Move trainable tensors off their structured initial values (identity
        // perturbation, delta filters) so the check is not at a special point.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
        for p in model.params.iter_mut().filter(|p| !p.frozen()) {
            let noise = Tensor::randn(p.value.shape().to_vec(), 0.1, &mut rng);
            p.value.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
        }
        let eeg = Tensor::randn([BATCH, dims.channels, dims.times], 1.0, &mut rng);
        let images = Tensor::randn([BATCH, 3, dims.image_size, dims.image_size], 0.5, &mut rng);
        let batch = PairedBatch::new(eeg, images, (0..BATCH as u64).collect(), (0..BATCH).collect())?;
        Ok(Self { model, batch, seed })
    }

    fn random(&self, shape: Vec<usize>, salt: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(31).wrapping_add(salt));
        Tensor::randn(shape, 1.0, &mut rng)
    }

    fn param(&self, name: &str) -> Result<(String, Tensor)> {
        Ok((name.to_string(), self.model.params.value(name)?.clone()))
    }

    fn params_with_prefix(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.model
            .params
            .iter()
            .filter(|p| !p.frozen() && p.name.starts_with(prefix))
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }

    /// Checks `body` over `inputs`. Inputs named after a parameter are bound
    /// in place of it; the rest are handed to `body` by position among the
    /// non-parameter inputs.
    fn check<F>(&self, inputs: &[(String, Tensor)], opts: &GradCheckOptions, body: F) -> Result<GradCheckReport>
    where
        F: Fn(&Ctx, &[Var]) -> Result<Var>,
    {
        let is_param: Vec<bool> = inputs.iter().map(|(n, _)| self.model.params.get(n).is_some()).collect();
        grad_check(
            |g: &Graph, vars: &[Var]| {
                let ctx = Ctx::new(g, &self.model.params, false);
                let mut free = Vec::new();
                for ((v, &p), (name, _)) in vars.iter().zip(&is_param).zip(inputs) {
                    if p {
                        ctx.bind(name, *v)?;
                    } else {
                        free.push(*v);
                    }
                }
                let out = body(&ctx, &free)?;
                let r = g.constant(self.random(g.shape(out), 7));
                Ok(g.sum(g.mul(out, r)?))
            },
            inputs,
            opts,
        )
    }

    fn loss_term(&self, opts: &GradCheckOptions, pick: fn(&loss::LossTerms) -> Var) -> Result<GradCheckReport> {
        let d = self.model.vit.embed_dim;
        let inputs = vec![
            ("z_eeg".to_string(), self.random(vec![BATCH, d], 1)),
            ("z_image".to_string(), self.random(vec![BATCH, d], 2)),
            self.param(LOG_TAU)?,
        ];
        let w = LossWeights { detach_targets: false, ..self.model.weights };
        self.check(&inputs, opts, |ctx, v| {
            let terms = loss::total_loss(ctx.g, v[0], v[1], ctx.p(LOG_TAU)?, &w)?;
            Ok(pick(&terms))
        })
    }

    fn run(&self, c: Component, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        let m = &self.model;
        let eeg = ("eeg".to_string(), self.batch.eeg.clone());
        let images = ("images".to_string(), self.batch.images.clone());
        match c {
            Component::Perturb => {
                let inputs = vec![self.param(PERTURB_WEIGHT)?, self.param(PERTURB_BIAS)?, eeg];
                self.check(&inputs, opts, |ctx, v| {
                    eeg::perturb(ctx.g, v[0], ctx.p(PERTURB_WEIGHT)?, ctx.p(PERTURB_BIAS)?)
                })
            }
            Component::Encoder => {
                let mut inputs = self.params_with_prefix(&format!("{PROJECTOR}."));
                inputs.push(eeg);
                self.check(&inputs, opts, |ctx, v| eeg::forward(ctx, v[0]))
            }
            Component::FilterGen => {
                let mut inputs = self.params_with_prefix("filter.");
                inputs.push(images);
                self.check(&inputs, opts, |ctx, v| filter::generate_filters(ctx, v[0]))
            }
            Component::DynamicFilter => {
                let k = m.filter.kernel;
                let inputs = vec![images, ("kernels".to_string(), self.random(vec![BATCH, 3 * k.0 * k.1], 3))];
                self.check(&inputs, opts, |ctx, v| filter::apply_dynamic_filter(ctx.g, v[0], v[1], k))
            }
            Component::Fusion => {
                let shape = vec![BATCH, m.vit.patches(), m.vit.width];
                let mut inputs = self.params_with_prefix("fusion.");
                inputs.push(("tokens".to_string(), self.random(shape.clone(), 4)));
                inputs.push(("filtered_tokens".to_string(), self.random(shape, 5)));
                let heads = m.config.fusion.heads;
                self.check(&inputs, opts, |ctx, v| Ok(fusion::catf(ctx, v[0], v[1], heads)?.fused))
            }
            Component::Bilinear => {
                let filtered = self.random(self.batch.images.shape().to_vec(), 6);
                let inputs = vec![self.param(MIX_LOGIT)?, images, ("filtered".to_string(), filtered)];
                self.check(&inputs, opts, |ctx, v| fusion::bilinear_mix_learned(ctx, v[0], v[1]))
            }
            Component::Prompts => {
                let inputs = vec![self.param(PROMPTS)?, images];
                self.check(&inputs, opts, |ctx, v| m.embed_images(ctx, v[0]))
            }
            Component::Projection => {
                let mut inputs = self.params_with_prefix("projection.");
                inputs.push(("cls".to_string(), self.random(vec![BATCH, m.vit.width], 8)));
                self.check(&inputs, opts, |ctx, v| backbone::project(ctx, &m.vit, v[0]))
            }
            Component::Clip => self.loss_term(opts, |t| t.clip),
            Component::Soft => self.loss_term(opts, |t| t.soft),
            Component::Rel => self.loss_term(opts, |t| t.rel),
            Component::Pipeline => {
                let inputs = self.params_with_prefix("");
                self.check(&inputs, opts, |ctx, _| {
                    let (ze, zi) = m.forward(ctx, &self.batch)?;
                    Ok(m.loss(ctx, ze, zi)?.total)
                })
            }
        }
    }
}

/// Gradient check of one component at one seed.
pub fn check_component(c: Component, seed: u64, opts: &GradCheckOptions) -> Result<ComponentReport> {
    let strategy = if c == Component::Bilinear { FusionStrategy::Bilinear } else { FusionStrategy::Catf };
    let h = Harness::new(seed, strategy)?;
    let opts = GradCheckOptions { seed, ..opts.clone() };
    Ok(ComponentReport::new(c, seed, &h.run(c, &opts)?))
}
