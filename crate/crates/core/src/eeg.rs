//! EEG side: a learnable elementwise affine perturbation followed by the
//! LightProjector, a single fully connected layer into the shared space.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::config::EncoderKind;
use crate::error::{dim_err, Error, Result};
use crate::params::{register_linear, Ctx, Group, ParamStore, Role};
use crate::tensor::Tensor;

pub const PERTURB_WEIGHT: &str = "eeg.perturb.weight";
pub const PERTURB_BIAS: &str = "eeg.perturb.bias";
pub const PROJECTOR: &str = "eeg.projector";

/// Added to squared row norms before normalizing. Small enough that unit
/// rows come back bitwise unchanged.
pub const NORM_EPS: f64 = 1e-24;

pub fn check_kind(kind: EncoderKind) -> Result<()> {
    match kind {
        EncoderKind::LightProjector => Ok(()),
        other => Err(Error::NotImplemented(format!("EEG encoder {other:?}; only light_projector is available"))),
    }
}

/// Perturbation starts at the identity (gain 1, offset 0).
pub fn register<R: Rng + ?Sized>(
    store: &mut ParamStore,
    channels: usize,
    times: usize,
    embed_dim: usize,
    rng: &mut R,
) -> Result<()> {
    let role = Role::Trainable(Group::A);
    store.insert(PERTURB_WEIGHT, Tensor::ones([channels, times]), role)?;
    store.insert(PERTURB_BIAS, Tensor::zeros([channels, times]), role)?;
    register_linear(store, PROJECTOR, channels * times, embed_dim, role, rng)
}

/// `E ⊙ W + B`, broadcast over the batch.
pub fn perturb(g: &Graph, eeg: Var, w: Var, b: Var) -> Result<Var> {
    let (se, sw, sb) = (g.shape(eeg), g.shape(w), g.shape(b));
    if se.len() != 3 || sw[..] != se[1..] || sb != sw {
        return dim_err(format!("perturbation expects EEG [B, C, T] with W, B [C, T]; got {se:?}, {sw:?}, {sb:?}"));
    }
    let scaled = g.mul(eeg, w)?;
    g.add(scaled, b)
}

/// Flattened `Ê · weight + bias`, before normalization.
pub fn encode_pre_norm(g: &Graph, eeg: Var, weight: Var, bias: Var) -> Result<Var> {
    let s = g.shape(eeg);
    if s.len() != 3 {
        return dim_err(format!("encoder expects [B, C, T], got {s:?}"));
    }
    let rows = g.shape(weight)[0];
    if s[1] * s[2] != rows {
        return dim_err(format!("encoder weight has {rows} rows but C*T = {}", s[1] * s[2]));
    }
    let flat = g.reshape(eeg, &[s[0], rows])?;
    let y = g.matmul(flat, weight)?;
    g.add(y, bias)
}

pub fn encode(g: &Graph, eeg: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = encode_pre_norm(g, eeg, weight, bias)?;
    g.l2_normalize(y, NORM_EPS)
}

/// Perturb then encode with the parameters bound in `ctx`.
pub fn forward(ctx: &Ctx, eeg: Var) -> Result<Var> {
    let e_hat = perturb(ctx.g, eeg, ctx.p(PERTURB_WEIGHT)?, ctx.p(PERTURB_BIAS)?)?;
    encode(
        ctx.g,
        e_hat,
        ctx.p(&format!("{PROJECTOR}.weight"))?,
        ctx.p(&format!("{PROJECTOR}.bias"))?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = Tensor::randn([2, 3, 5], 1.0, &mut rng);
        let g = Graph::new();
        let x = g.constant(e.clone());
        let y = perturb(&g, x, g.constant(Tensor::ones([3, 5])), g.constant(Tensor::zeros([3, 5]))).unwrap();
        assert_eq!(*g.value(y), e);
    }

    #[test]
    fn affine_hand_case() {
        let g = Graph::new();
        let e = g.constant(Tensor::new([1, 1, 2], vec![1.0, 2.0]).unwrap());
        let w = g.constant(Tensor::full([1, 2], 2.0));
        let b = g.constant(Tensor::ones([1, 2]));
        let y = perturb(&g, e, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 5.0]);
    }

    #[test]
    fn weight_gradient_of_sum_is_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = Tensor::randn([1, 2, 3], 1.0, &mut rng);
        let g = Graph::new();
        let w = g.leaf(Tensor::ones([2, 3]), true);
        let y = perturb(&g, g.constant(e.clone()), w, g.constant(Tensor::zeros([2, 3]))).unwrap();
        g.backward(g.sum(y)).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), e.data());
    }

    #[test]
    fn mismatched_perturbation_shape() {
        let g = Graph::new();
        let e = g.constant(Tensor::zeros([2, 3, 4]));
        let w = g.constant(Tensor::ones([4, 3]));
        assert!(matches!(perturb(&g, e, w, w), Err(Error::Dimension(_))));
    }

    #[test]
    fn constant_map_and_unit_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Graph::new();
        let e = g.constant(Tensor::randn([3, 2, 4], 1.0, &mut rng));
        let mut bias = Tensor::zeros([5]);
        bias.data_mut()[0] = 1.0;
        let z = encode(&g, e, g.constant(Tensor::zeros([8, 5])), g.constant(bias)).unwrap();
        for i in 0..3 {
            assert_eq!(g.value(z).row(i), &[1.0, 0.0, 0.0, 0.0, 0.0]);
        }
        let w = g.constant(Tensor::randn([8, 5], 1.0, &mut rng));
        let z = encode(&g, e, w, g.constant(Tensor::zeros([5]))).unwrap();
        for i in 0..3 {
            let n: f64 = g.value(z).row(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn published_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        register(&mut store, 17, 250, 128, &mut rng).unwrap();
        let g = Graph::new();
        let ctx = Ctx::new(&g, &store, false);
        let e = g.constant(Tensor::randn([4, 17, 250], 1.0, &mut rng));
        assert_eq!(g.shape(forward(&ctx, e).unwrap()), vec![4, 128]);
    }

    #[test]
    fn linear_before_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Graph::new();
        let w = g.constant(Tensor::randn([6, 4], 1.0, &mut rng));
        let b = g.constant(Tensor::zeros([4]));
        let e1 = Tensor::randn([2, 2, 3], 1.0, &mut rng);
        let e2 = Tensor::randn([2, 2, 3], 1.0, &mut rng);
        let (a, c) = (0.7, -1.3);
        let mix = Tensor::new([2, 2, 3], e1.data().iter().zip(e2.data()).map(|(x, y)| a * x + c * y).collect()).unwrap();
        let p1 = encode_pre_norm(&g, g.constant(e1), w, b).unwrap();
        let p2 = encode_pre_norm(&g, g.constant(e2), w, b).unwrap();
        let pm = encode_pre_norm(&g, g.constant(mix), w, b).unwrap();
        let (v1, v2, vm) = (g.value(p1), g.value(p2), g.value(pm));
        for i in 0..vm.numel() {
            assert!((vm.data()[i] - (a * v1.data()[i] + c * v2.data()[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn other_encoders_are_not_implemented() {
        assert!(check_kind(EncoderKind::LightProjector).is_ok());
        assert!(matches!(check_kind(EncoderKind::Eegnet), Err(Error::NotImplemented(_))));
    }
}
