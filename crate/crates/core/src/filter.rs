//! Content-adaptive filtering: a small CNN + MLP predicts one `F_h x F_w`
//! kernel per RGB channel for each image, and the image is then convolved
//! with its own kernels.
//!
//! Convolution here is cross-correlation (no kernel flip), with zero
//! padding so the output keeps the input's spatial size.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::FilterConfig;
use crate::error::{dim_err, Error, Result};
use crate::params::{register_linear, Ctx, Group, ParamStore, Role};
use crate::tensor::Tensor;

const STEM_K: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FilterSpec {
    pub kernel: (usize, usize),
    pub stem: [usize; 2],
    pub hidden: usize,
}

impl FilterSpec {
    pub fn from_config(cfg: &FilterConfig) -> Result<Self> {
        let spec = Self { kernel: (cfg.kernel_h, cfg.kernel_w), stem: cfg.stem_channels, hidden: cfg.hidden };
        check_kernel(spec.kernel)?;
        Ok(spec)
    }

    pub fn taps(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    /// Values predicted per image.
    pub fn outputs(&self) -> usize {
        3 * self.taps()
    }
}

fn check_kernel((kh, kw): (usize, usize)) -> Result<()> {
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Config(format!("dynamic filter kernel {kh}x{kw} must be odd-sized")));
    }
    Ok(())
}

/// The generator head starts with tiny weights and a bias placing 1 on each
/// channel's center tap, so initial kernels are close to the identity.
pub fn register<R: Rng + ?Sized>(store: &mut ParamStore, spec: &FilterSpec, rng: &mut R) -> Result<()> {
    let role = Role::Trainable(Group::B);
    let [c1, c2] = spec.stem;
    register_linear(store, "filter.conv1", 3 * STEM_K * STEM_K, c1, role, rng)?;
    register_linear(store, "filter.conv2", c1 * STEM_K * STEM_K, c2, role, rng)?;
    register_linear(store, "filter.mlp1", c2, spec.hidden, role, rng)?;
    let w = Tensor::randn([spec.hidden, spec.outputs()], 0.01 / (spec.hidden as f64).sqrt(), rng);
    store.insert("filter.mlp2.weight", w, role)?;
    store.insert("filter.mlp2.bias", delta_kernels(1, spec.kernel).reshape([spec.outputs()])?, role)
}

/// `[batch, 3 * kh * kw]` kernels that are 1 at the center tap and 0 elsewhere.
pub fn delta_kernels(batch: usize, (kh, kw): (usize, usize)) -> Tensor {
    let taps = kh * kw;
    let mut t = Tensor::zeros([batch, 3 * taps]);
    let center = (kh / 2) * kw + kw / 2;
    for b in 0..batch {
        for c in 0..3 {
            t.data_mut()[b * 3 * taps + c * taps + center] = 1.0;
        }
    }
    t
}

/// Strided convolution `[B, C, H, W] -> [B, O, Ho, Wo]` with weight `[C*k*k, O]`.
pub fn conv2d(g: &Graph, x: Var, weight: Var, bias: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
    let s = g.shape(x);
    let cols = g.im2col(x, (k, k), stride, (pad, pad))?;
    let y = g.add(g.matmul(cols, weight)?, bias)?;
    let out = g.shape(y)[2];
    let (ho, wo) = ((s[2] + 2 * pad - k) / stride + 1, (s[3] + 2 * pad - k) / stride + 1);
    let y = g.permute(y, &[0, 2, 1])?;
    g.reshape(y, &[s[0], out, ho, wo])
}

/// Per-image kernels `[B, 3 * kh * kw]`; channel `c` owns the slice `c*kh*kw..(c+1)*kh*kw`.
pub fn generate_filters(ctx: &Ctx, images: Var) -> Result<Var> {
    let g = ctx.g;
    let s = g.shape(images);
    if s.len() != 4 || s[1] != 3 {
        return dim_err(format!("filter generator expects [B, 3, H, W], got {s:?}"));
    }
    if s[2] < STEM_K || s[3] < STEM_K {
        return dim_err(format!("image {}x{} is smaller than the generator stem", s[2], s[3]));
    }
    let h = conv2d(g, images, ctx.p("filter.conv1.weight")?, ctx.p("filter.conv1.bias")?, STEM_K, 2, 1)?;
    let h = g.gelu(h);
    let h = conv2d(g, h, ctx.p("filter.conv2.weight")?, ctx.p("filter.conv2.bias")?, STEM_K, 2, 1)?;
    let h = g.gelu(h);
    let hs = g.shape(h);
    let pooled = g.mean_last(g.reshape(h, &[hs[0], hs[1], hs[2] * hs[3]])?)?;
    let pooled = g.reshape(pooled, &[hs[0], hs[1]])?;
    let z = g.gelu(ctx.linear(pooled, "filter.mlp1")?);
    ctx.linear(z, "filter.mlp2")
}

/// Filters each channel of each image with its own kernel (same-size output).
pub fn apply_dynamic_filter(g: &Graph, images: Var, kernels: Var, kernel: (usize, usize)) -> Result<Var> {
    check_kernel(kernel)?;
    let (kh, kw) = kernel;
    let s = g.shape(images);
    if s.len() != 4 || s[1] != 3 {
        return dim_err(format!("dynamic filter expects [B, 3, H, W], got {s:?}"));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    if g.shape(kernels) != [b, 3 * kh * kw] {
        return dim_err(format!("expected kernels [{b}, {}], got {:?}", 3 * kh * kw, g.shape(kernels)));
    }
    let planes = g.reshape(images, &[b * 3, h, w])?;
    let k = g.reshape(kernels, &[b * 3, kh * kw])?;
    let y = g.plane_conv(planes, k, kernel)?;
    g.reshape(y, &[b, 3, h, w])
}
