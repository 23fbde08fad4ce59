//! Token fusion of the original and filtered patch streams.
//!
//! CATF: queries from the original tokens, keys and values from the filtered
//! tokens; a small gate FFN on the attended features yields one weight per
//! token, and the fused token moves that fraction of the way from original
//! to filtered. The bilinear baseline instead blends the two images with a
//! single learnable weight before patch embedding.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::backbone::{attention, merge_heads, split_heads};
use crate::error::{dim_err, Error, Result};
use crate::params::{register_linear, Ctx, Group, ParamStore, Role};
use crate::tensor::Tensor;

pub const MIX_LOGIT: &str = "fusion.mix_logit";

pub fn register_catf<R: Rng + ?Sized>(store: &mut ParamStore, width: usize, gate_bias: f64, rng: &mut R) -> Result<()> {
    let role = Role::Trainable(Group::B);
    let std = 1.0 / (width as f64).sqrt();
    for name in ["fusion.wq", "fusion.wk", "fusion.wv"] {
        store.insert(name, Tensor::randn([width, width], std, rng), role)?;
    }
    let hidden = (width / 2).max(1);
    register_linear(store, "fusion.gate.fc1", width, hidden, role, rng)?;
    register_linear(store, "fusion.gate.fc2", hidden, 1, role, rng)?;
    store.set_value("fusion.gate.fc2.bias", Tensor::full([1], gate_bias))
}

/// Stores `logit(init)` so the blend weight starts at `init`.
pub fn register_bilinear(store: &mut ParamStore, init: f64) -> Result<()> {
    if !(init > 0.0 && init < 1.0) {
        return Err(Error::Domain(format!("bilinear weight must lie in (0, 1), got {init}")));
    }
    store.insert(MIX_LOGIT, Tensor::scalar((init / (1.0 - init)).ln()), Role::Trainable(Group::B))
}

pub struct CatfOutput {
    pub fused: Var,
    /// `[B, N, 1]` gate values.
    pub alpha: Var,
    /// `[B, heads, N, N]` attention weights.
    pub attn: Var,
}

pub fn catf(ctx: &Ctx, x_orig: Var, x_filt: Var, heads: usize) -> Result<CatfOutput> {
    let g = ctx.g;
    let (so, sf) = (g.shape(x_orig), g.shape(x_filt));
    if so != sf || so.len() != 3 {
        return dim_err(format!("fusion streams must share a [B, N, d] shape, got {so:?} and {sf:?}"));
    }
    if heads == 0 || so[2] % heads != 0 {
        return Err(Error::Config(format!("{heads} fusion heads do not divide width {}", so[2])));
    }
    let q = split_heads(g, g.matmul(x_orig, ctx.p("fusion.wq")?)?, heads)?;
    let k = split_heads(g, g.matmul(x_filt, ctx.p("fusion.wk")?)?, heads)?;
    let v = split_heads(g, g.matmul(x_filt, ctx.p("fusion.wv")?)?, heads)?;
    let (z, attn) = attention(g, q, k, v)?;
    let z = merge_heads(g, z)?;
    let h = g.gelu(ctx.linear(z, "fusion.gate.fc1")?);
    let alpha = g.sigmoid(ctx.linear(h, "fusion.gate.fc2")?);
    let fused = g.add(x_orig, g.mul(alpha, g.sub(x_filt, x_orig)?)?)?;
    Ok(CatfOutput { fused, alpha, attn })
}

/// `λ·I_filt + (1-λ)·I` for a `λ` held on the tape (scalar).
pub fn blend(g: &Graph, image: Var, filtered: Var, lambda: Var) -> Result<Var> {
    let (si, sf) = (g.shape(image), g.shape(filtered));
    if si != sf {
        return dim_err(format!("blend inputs differ: {si:?} vs {sf:?}"));
    }
    let diff = g.sub(filtered, image)?;
    g.add(image, g.mul(diff, lambda)?)
}

/// Blend with a fixed weight, which must lie strictly inside (0, 1).
pub fn bilinear_mix(g: &Graph, image: Var, filtered: Var, lambda: f64) -> Result<Var> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Domain(format!("bilinear weight must lie in (0, 1), got {lambda}")));
    }
    blend(g, image, filtered, g.constant(Tensor::scalar(lambda)))
}

/// Blend with the learned weight `sigmoid(fusion.mix_logit)`.
pub fn bilinear_mix_learned(ctx: &Ctx, image: Var, filtered: Var) -> Result<Var> {
    let lambda = ctx.g.sigmoid(ctx.p(MIX_LOGIT)?);
    blend(ctx.g, image, filtered, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(bias: f64) -> ParamStore {
        let mut s = ParamStore::new();
        register_catf(&mut s, 8, bias, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        s
    }

    fn streams(seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (Tensor::randn([2, 5, 8], 1.0, &mut rng), Tensor::randn([2, 5, 8], 1.0, &mut rng))
    }

    #[test]
    fn saturated_gates_select_a_stream() {
        let (xo, xf) = streams(1);
        for (bias, want) in [(-1e6, &xo), (1e6, &xf)] {
            let s = store(bias);
            let g = Graph::new();
            let ctx = Ctx::new(&g, &s, false);
            let out = catf(&ctx, g.constant(xo.clone()), g.constant(xf.clone()), 1).unwrap();
            assert!(g.value(out.fused).max_abs_diff(want) < 1e-12);
        }
    }

    #[test]
    fn equal_streams_are_fixed_points() {
        let (x, _) = streams(2);
        let s = store(0.3);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &s, false);
        let out = catf(&ctx, g.constant(x.clone()), g.constant(x.clone()), 2).unwrap();
        assert!(g.value(out.fused).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn gate_range_segment_and_attention_rows() {
        let (xo, xf) = streams(3);
        let s = store(-2.0);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &s, false);
        let out = catf(&ctx, g.constant(xo.clone()), g.constant(xf.clone()), 1).unwrap();
        let (fused, alpha, attn) = (g.value(out.fused), g.value(out.alpha), g.value(out.attn));
        assert_eq!(alpha.shape(), &[2, 5, 1]);
        assert!(alpha.data().iter().all(|&a| a > 0.0 && a < 1.0));
        for t in 0..10 {
            let a = alpha.data()[t];
            for c in 0..8 {
                let i = t * 8 + c;
                let expect = xo.data()[i] + a * (xf.data()[i] - xo.data()[i]);
                assert_eq!(fused.data()[i], expect);
            }
        }
        for row in attn.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_streams() {
        let s = store(0.0);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &s, false);
        let r = catf(&ctx, g.constant(Tensor::zeros([1, 4, 8])), g.constant(Tensor::zeros([1, 5, 8])), 1);
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn bilinear_cases() {
        let g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::uniform([1, 3, 4, 4], 0.0, 1.0, &mut rng);
        let i = g.constant(img.clone());
        assert!(g.value(bilinear_mix(&g, i, i, 0.5).unwrap()).max_abs_diff(&img) < 1e-15);
        let zero = g.constant(Tensor::zeros([1, 3, 4, 4]));
        let one = g.constant(Tensor::ones([1, 3, 4, 4]));
        let m = bilinear_mix(&g, zero, one, 0.25).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.25));
        let near = bilinear_mix(&g, i, one, 1e-12).unwrap();
        assert!(g.value(near).max_abs_diff(&img) < 1e-11);
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(bilinear_mix(&g, i, i, bad), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn learned_weight_starts_at_init() {
        let mut s = ParamStore::new();
        register_bilinear(&mut s, 0.25).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &s, false);
        let m = bilinear_mix_learned(&ctx, g.constant(Tensor::zeros([1, 3, 2, 2])), g.constant(Tensor::ones([1, 3, 2, 2]))).unwrap();
        assert!(g.value(m).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }
}
