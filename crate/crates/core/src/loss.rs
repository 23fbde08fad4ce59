//! Alignment objective: symmetric InfoNCE, symmetric-KL soft targets, and
//! a relation term over renormalized negatives, mixed as
//! `mu * clip + alpha * soft + lambda * rel`.
//!
//! All KL terms sum over columns and average over rows. Temperature lives
//! on the tape as `log_tau`, so it stays positive while being learned.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::config::LossConfig;
use crate::eeg::NORM_EPS;
use crate::error::{dim_err, Error, Result};
use crate::params::{Group, ParamStore, Role};
use crate::tensor::Tensor;

pub const LOG_TAU: &str = "loss.log_tau";
const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub mu: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub beta: f64,
    /// Treat soft targets and intra-modal negatives as constants.
    pub detach_targets: bool,
}

impl LossWeights {
    pub fn from_config(cfg: &LossConfig) -> Result<Self> {
        let w = Self { mu: cfg.mu, alpha: cfg.alpha, lambda: cfg.lambda, beta: cfg.beta, detach_targets: cfg.detach_targets };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Domain(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if !(self.mu >= 0.0 && self.alpha >= 0.0 && self.lambda >= 0.0) {
            return Err(Error::Domain("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::from_config(&LossConfig::default()).expect("defaults are valid")
    }
}

pub fn register(store: &mut ParamStore, tau_init: f64) -> Result<()> {
    if !(tau_init > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {tau_init}")));
    }
    store.insert(LOG_TAU, Tensor::scalar(tau_init.ln()), Role::Trainable(Group::A))
}

/// `1 / tau` from the free scalar `log_tau`.
pub fn inverse_temperature(g: &Graph, log_tau: Var) -> Var {
    g.exp(g.scale(log_tau, -1.0))
}

/// `S[i, j] = <z_E[i], z_I[j]>` after re-normalizing both sides.
pub fn cosine_sim_matrix(g: &Graph, ze: Var, zi: Var) -> Result<Var> {
    let (se, si) = (g.shape(ze), g.shape(zi));
    if se.len() != 2 || si.len() != 2 || se[1] != si[1] {
        return dim_err(format!("embedding shapes {se:?} and {si:?} are incompatible"));
    }
    let ze = g.l2_normalize(ze, NORM_EPS)?;
    let zi = g.l2_normalize(zi, NORM_EPS)?;
    g.matmul(ze, g.transpose(zi)?)
}

fn square(g: &Graph, s: Var) -> Result<usize> {
    let sh = g.shape(s);
    if sh.len() != 2 || sh[0] != sh[1] {
        return dim_err(format!("expected a square matrix, got {sh:?}"));
    }
    Ok(sh[0])
}

fn eye(g: &Graph, n: usize) -> Var {
    g.constant(Tensor::eye(n))
}

/// Symmetric cross-entropy with the matched pair on the diagonal.
pub fn infonce(g: &Graph, s: Var, inv_tau: Var) -> Result<Var> {
    let b = square(g, s)?;
    let logits = g.mul(s, inv_tau)?;
    let rows = g.log_softmax_last(logits)?;
    let cols = g.log_softmax_last(g.transpose(logits)?)?;
    let i = eye(g, b);
    let diag = g.add(g.sum(g.mul(rows, i)?), g.sum(g.mul(cols, i)?))?;
    Ok(g.scale(diag, -1.0 / (2.0 * b as f64)))
}

/// Row softmaxes of `S / tau` (EEG to image) and `S^T / tau` (image to EEG).
pub fn cross_distributions(g: &Graph, s: Var, inv_tau: Var) -> Result<(Var, Var)> {
    let logits = g.mul(s, inv_tau)?;
    Ok((g.softmax_last(logits)?, g.softmax_last(g.transpose(logits)?)?))
}

fn intra_logits(g: &Graph, z: Var, inv_tau: Var) -> Result<Var> {
    let z = g.l2_normalize(z, NORM_EPS)?;
    let sim = g.matmul(z, g.transpose(z)?)?;
    g.mul(sim, inv_tau)
}

/// Row softmax of the intra-modal similarities `z zᵀ / tau`.
pub fn intra_distribution(g: &Graph, z: Var, inv_tau: Var) -> Result<Var> {
    g.softmax_last(intra_logits(g, z, inv_tau)?)
}

/// `(1 - beta) I + beta P`.
pub fn interpolate_targets(g: &Graph, p: Var, beta: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Domain(format!("beta must lie in [0, 1], got {beta}")));
    }
    let b = square(g, p)?;
    if beta == 0.0 {
        return Ok(eye(g, b));
    }
    g.add(g.constant(Tensor::eye(b).map(|v| v * (1.0 - beta))), g.scale(p, beta))
}

pub struct SoftTargets {
    pub te: Var,
    pub ti: Var,
    pub pee: Var,
    pub pii: Var,
}

pub fn soft_targets(g: &Graph, ze: Var, zi: Var, inv_tau: Var, beta: f64, detach: bool) -> Result<SoftTargets> {
    let mut pee = intra_distribution(g, ze, inv_tau)?;
    let mut pii = intra_distribution(g, zi, inv_tau)?;
    if detach {
        pee = g.detach(pee);
        pii = g.detach(pii);
    }
    Ok(SoftTargets { te: interpolate_targets(g, pee, beta)?, ti: interpolate_targets(g, pii, beta)?, pee, pii })
}

fn check_stochastic(g: &Graph, p: Var, what: &str) -> Result<()> {
    let v = g.value(p);
    let n = *v.shape().last().unwrap_or(&0);
    if !v.all_finite() {
        return Err(Error::NonFinite(format!("{what} has non-finite entries")));
    }
    for (i, row) in v.data().chunks(n.max(1)).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&x| !(x >= -STOCHASTIC_TOL)) {
            return Err(Error::Contract(format!("{what} row {i} is not a distribution (sum {s})")));
        }
    }
    Ok(())
}

fn symmetric_kl(g: &Graph, p: Var, q: Var) -> Result<Var> {
    g.add(g.kl_rows(p, q)?, g.kl_rows(q, p)?)
}

/// `½[KL(T_E‖P_EI) + KL(P_EI‖T_E)] + ½[KL(T_I‖P_IE) + KL(P_IE‖T_I)]`.
pub fn soft_loss(g: &Graph, te: Var, ti: Var, pei: Var, pie: Var) -> Result<Var> {
    for (v, what) in [(te, "T_E"), (ti, "T_I"), (pei, "P_EI"), (pie, "P_IE")] {
        square(g, v)?;
        check_stochastic(g, v, what)?;
    }
    let e = symmetric_kl(g, te, pei)?;
    let i = symmetric_kl(g, ti, pie)?;
    Ok(g.scale(g.add(e, i)?, 0.5))
}

/// Zeroes the diagonal and renormalizes each row.
pub fn neg(g: &Graph, p: Var) -> Result<Var> {
    let b = square(g, p)?;
    if b < 2 {
        return Err(Error::Contract("a batch of one has no negatives".into()));
    }
    let off = g.constant(Tensor::eye(b).map(|v| 1.0 - v));
    let m = g.mul(p, off)?;
    g.div(m, g.sum_last(m)?)
}

/// `neg(softmax(logits))` computed as a softmax with the diagonal masked
/// out, which stays finite when the off-diagonal mass underflows.
pub fn neg_from_logits(g: &Graph, logits: Var) -> Result<Var> {
    let b = square(g, logits)?;
    if b < 2 {
        return Err(Error::Contract("a batch of one has no negatives".into()));
    }
    let mask = g.constant(Tensor::eye(b).map(|v| if v == 1.0 { f64::NEG_INFINITY } else { 0.0 }));
    g.softmax_last(g.add(logits, mask)?)
}

fn relation_from_negatives(g: &Graph, nee: Var, nii: Var, nei: Var, nie: Var) -> Result<Var> {
    let e = g.kl_rows(nee, nei)?;
    let i = g.kl_rows(nii, nie)?;
    Ok(g.scale(g.add(e, i)?, 0.5))
}

/// `½[KL(neg(P_EE)‖neg(P_EI)) + KL(neg(P_II)‖neg(P_IE))]`.
pub fn relation_loss(g: &Graph, pee: Var, pii: Var, pei: Var, pie: Var) -> Result<Var> {
    relation_from_negatives(g, neg(g, pee)?, neg(g, pii)?, neg(g, pei)?, neg(g, pie)?)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub clip: Var,
    pub soft: Var,
    pub rel: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_clip: f64,
    pub l_soft: f64,
    pub l_rel: f64,
    pub l_total: f64,
}

impl LossTerms {
    pub fn values(&self, g: &Graph) -> LossValues {
        let v = |x: Var| g.value(x).item();
        LossValues { l_clip: v(self.clip), l_soft: v(self.soft), l_rel: v(self.rel), l_total: v(self.total) }
    }
}

impl LossValues {
    /// Name of the first non-finite component, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        [("l_clip", self.l_clip), ("l_soft", self.l_soft), ("l_rel", self.l_rel), ("l_total", self.l_total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { l_clip: self.l_clip * c, l_soft: self.l_soft * c, l_rel: self.l_rel * c, l_total: self.l_total * c }
    }

    pub fn add(&self, o: &Self) -> Self {
        Self {
            l_clip: self.l_clip + o.l_clip,
            l_soft: self.l_soft + o.l_soft,
            l_rel: self.l_rel + o.l_rel,
            l_total: self.l_total + o.l_total,
        }
    }
}

/// Every component on the tape. The relation term is skipped (reported as 0)
/// only for single-pair batches with `lambda = 0`.
pub fn total_loss(g: &Graph, ze: Var, zi: Var, log_tau: Var, w: &LossWeights) -> Result<LossTerms> {
    w.validate()?;
    let inv_tau = inverse_temperature(g, log_tau);
    let s = cosine_sim_matrix(g, ze, zi)?;
    let b = g.shape(s)[0];
    let clip = infonce(g, s, inv_tau)?;
    let (pei, pie) = cross_distributions(g, s, inv_tau)?;
    let t = soft_targets(g, ze, zi, inv_tau, w.beta, w.detach_targets)?;
    let soft = soft_loss(g, t.te, t.ti, pei, pie)?;
    let rel = if b < 2 && w.lambda == 0.0 {
        g.constant(Tensor::scalar(0.0))
    } else {
        let logits = g.mul(s, inv_tau)?;
        let nei = neg_from_logits(g, logits)?;
        let nie = neg_from_logits(g, g.transpose(logits)?)?;
        let mut nee = neg_from_logits(g, intra_logits(g, ze, inv_tau)?)?;
        let mut nii = neg_from_logits(g, intra_logits(g, zi, inv_tau)?)?;
        if w.detach_targets {
            nee = g.detach(nee);
            nii = g.detach(nii);
        }
        relation_from_negatives(g, nee, nii, nei, nie)?
    };
    let total = g.add(g.add(g.scale(clip, w.mu), g.scale(soft, w.alpha))?, g.scale(rel, w.lambda))?;
    Ok(LossTerms { clip, soft, rel, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn c(g: &Graph, rows: &[Vec<f64>]) -> Var {
        g.constant(Tensor::from_rows(rows).unwrap())
    }

    fn scalar(g: &Graph, v: f64) -> Var {
        g.constant(Tensor::scalar(v))
    }

    #[test]
    fn similarity_cases() {
        let g = Graph::new();
        let z = c(&g, &[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let s = cosine_sim_matrix(&g, z, z).unwrap();
        assert_eq!(*g.value(s), Tensor::eye(2));
        let s = cosine_sim_matrix(&g, c(&g, &[vec![0.6, 0.8]]), c(&g, &[vec![-3.0, -4.0]])).unwrap();
        assert!((g.value(s).item() + 1.0).abs() < 1e-15);
        let bad = cosine_sim_matrix(&g, c(&g, &[vec![1.0, 0.0]]), c(&g, &[vec![1.0, 0.0, 0.0]]));
        assert!(matches!(bad, Err(Error::Dimension(_))));
    }

    #[test]
    fn random_similarity_against_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::randn([6, 8], 1.0, &mut rng);
        let b = Tensor::randn([6, 8], 1.0, &mut rng);
        let g = Graph::new();
        let s = cosine_sim_matrix(&g, g.constant(a.clone()), g.constant(b.clone())).unwrap();
        let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
        for i in 0..6 {
            for j in 0..6 {
                let dot: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
                let want = dot / (norm(a.row(i)) * norm(b.row(j)));
                assert!((g.value(s).at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn infonce_hand_values() {
        let g = Graph::new();
        let one = scalar(&g, 1.0);
        assert_eq!(g.value(infonce(&g, c(&g, &[vec![0.3]]), one).unwrap()).item(), 0.0);
        let l = g.value(infonce(&g, g.constant(Tensor::eye(2)), one).unwrap()).item();
        let e = std::f64::consts::E;
        assert!((l - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((l - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn infonce_ratio_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Tensor::uniform([5, 5], -1.0, 1.0, &mut rng);
        let g = Graph::new();
        let a = infonce(&g, g.constant(s.clone()), scalar(&g, 1.0 / 0.2)).unwrap();
        let b = infonce(&g, g.constant(s.map(|v| v * 3.0)), scalar(&g, 1.0 / 0.6)).unwrap();
        assert!((g.value(a).item() - g.value(b).item()).abs() < 1e-12);
    }

    #[test]
    fn target_interpolation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = Graph::new();
        let ze = g.constant(Tensor::randn([4, 3], 1.0, &mut rng));
        let zi = g.constant(Tensor::randn([4, 3], 1.0, &mut rng));
        let it = scalar(&g, 14.0);
        let t0 = soft_targets(&g, ze, zi, it, 0.0, true).unwrap();
        assert_eq!(*g.value(t0.te), Tensor::eye(4));
        assert_eq!(*g.value(t0.ti), Tensor::eye(4));
        let t1 = soft_targets(&g, ze, zi, it, 1.0, true).unwrap();
        assert!(g.value(t1.te).max_abs_diff(&g.value(t1.pee)) < 1e-15);
        let t3 = soft_targets(&g, ze, zi, it, 0.3, true).unwrap();
        for row in g.value(t3.te).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(interpolate_targets(&g, t3.pee, 1.2).is_err());
    }

    fn kl(p: &[f64], q: &[f64]) -> f64 {
        p.iter().zip(q).map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * (a / b).ln() }).sum()
    }

    #[test]
    fn soft_loss_hand_case() {
        let g = Graph::new();
        let t = vec![vec![0.9, 0.1], vec![0.1, 0.9]];
        let p = vec![vec![0.8, 0.2], vec![0.2, 0.8]];
        let l = soft_loss(&g, c(&g, &t), c(&g, &t), c(&g, &p), c(&g, &p)).unwrap();
        let per_row = kl(&t[0], &p[0]) + kl(&p[0], &t[0]);
        // Both rows and both directions are identical: ½(2·mean) = per_row.
        assert!((g.value(l).item() - per_row).abs() < 1e-15);
        let zero = soft_loss(&g, c(&g, &t), c(&g, &p), c(&g, &t), c(&g, &p)).unwrap();
        assert_eq!(g.value(zero).item(), 0.0);
    }

    #[test]
    fn soft_loss_rejects_non_stochastic_rows() {
        let g = Graph::new();
        let t = c(&g, &[vec![0.9, 0.1], vec![0.1, 0.9]]);
        let bad = c(&g, &[vec![0.9, 0.2], vec![0.1, 0.9]]);
        assert!(matches!(soft_loss(&g, t, t, bad, t), Err(Error::Contract(_))));
    }

    #[test]
    fn negatives_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = Graph::new();
        let p = g.softmax_last(g.constant(Tensor::randn([4, 4], 1.0, &mut rng))).unwrap();
        let n = neg(&g, p).unwrap();
        {
            let v = g.value(n);
            for i in 0..4 {
                assert_eq!(v.at(&[i, i]), 0.0);
                assert!((v.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let two = c(&g, &[vec![0.7, 0.3], vec![0.4, 0.6]]);
        assert_eq!(g.value(neg(&g, two).unwrap()).data(), &[0.0, 1.0, 1.0, 0.0]);
        let other = c(&g, &[vec![0.1, 0.9], vec![0.5, 0.5]]);
        assert_eq!(g.value(relation_loss(&g, two, two, other, other).unwrap()).item(), 0.0);
        assert_eq!(g.value(relation_loss(&g, p, p, p, p).unwrap()).item(), 0.0);
        assert!(matches!(neg(&g, c(&g, &[vec![1.0]])), Err(Error::Contract(_))));
    }

    #[test]
    fn masked_logits_agree_with_renormalized_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = Graph::new();
        let l = g.constant(Tensor::randn([5, 5], 2.0, &mut rng));
        let a = neg_from_logits(&g, l).unwrap();
        let b = neg(&g, g.softmax_last(l).unwrap()).unwrap();
        assert!(g.value(a).max_abs_diff(&g.value(b)) < 1e-15);
        let ze = g.constant(Tensor::randn([5, 4], 1.0, &mut rng));
        let zi = g.constant(Tensor::randn([5, 4], 1.0, &mut rng));
        let lt = scalar(&g, (0.07f64).ln());
        let t = total_loss(&g, ze, zi, lt, &LossWeights::default()).unwrap();
        let it = inverse_temperature(&g, lt);
        let (pei, pie) = cross_distributions(&g, cosine_sim_matrix(&g, ze, zi).unwrap(), it).unwrap();
        let st = soft_targets(&g, ze, zi, it, 0.3, true).unwrap();
        let direct = relation_loss(&g, st.pee, st.pii, pei, pie).unwrap();
        assert!((g.value(t.rel).item() - g.value(direct).item()).abs() < 1e-12);
    }

    #[test]
    fn pure_clip_weighting_is_infonce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Graph::new();
        let ze = g.constant(Tensor::randn([5, 6], 1.0, &mut rng));
        let zi = g.constant(Tensor::randn([5, 6], 1.0, &mut rng));
        let lt = scalar(&g, (0.1f64).ln());
        let w = LossWeights { mu: 1.0, alpha: 0.0, lambda: 0.0, ..Default::default() };
        let t = total_loss(&g, ze, zi, lt, &w).unwrap();
        let s = cosine_sim_matrix(&g, ze, zi).unwrap();
        let direct = infonce(&g, s, inverse_temperature(&g, lt)).unwrap();
        assert!((g.value(t.total).item() - g.value(direct).item()).abs() < 1e-9);
    }

    #[test]
    fn aligned_sharp_limit_vanishes() {
        let g = Graph::new();
        let z = g.constant(Tensor::eye(4));
        let w = LossWeights { beta: 0.0, ..Default::default() };
        let t = total_loss(&g, z, z, scalar(&g, (1e-3f64).ln()), &w).unwrap();
        let v = t.values(&g);
        assert!(v.l_total < 1e-12 && v.l_total >= 0.0, "{v:?}");
    }

    #[test]
    fn single_pair_needs_zero_lambda() {
        let g = Graph::new();
        let z = c(&g, &[vec![1.0, 0.0]]);
        let lt = scalar(&g, 0.0);
        assert!(total_loss(&g, z, z, lt, &LossWeights::default()).is_err());
        let w = LossWeights { lambda: 0.0, ..Default::default() };
        assert!(total_loss(&g, z, z, lt, &w).is_ok());
    }

    #[test]
    fn beta_zero_soft_loss_matches_one_hot_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::randn([5, 4], 1.0, &mut rng);
        let b = Tensor::randn([5, 4], 1.0, &mut rng);
        let tau: f64 = 0.2;
        let g = Graph::new();
        let w = LossWeights { beta: 0.0, ..Default::default() };
        let t = total_loss(&g, g.constant(a.clone()), g.constant(b.clone()), scalar(&g, tau.ln()), &w).unwrap();
        let got = g.value(t.soft).item();
        // Oracle: with one-hot targets, KL(I‖P) = -ln P_ii and KL(P‖I) = Σ_j P_ij ln(P_ij / max(δ_ij, ε)).
        let norm = |t: &Tensor| -> Vec<Vec<f64>> {
            (0..5).map(|i| {
                let r = t.row(i);
                let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                r.iter().map(|v| v / n).collect()
            }).collect()
        };
        let (ea, ib) = (norm(&a), norm(&b));
        let softmax = |row: Vec<f64>| -> Vec<f64> {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        };
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        let mut acc = 0.0;
        for i in 0..5 {
            let pe = softmax((0..5).map(|j| dot(&ea[i], &ib[j]) / tau).collect());
            let pi = softmax((0..5).map(|j| dot(&ib[i], &ea[j]) / tau).collect());
            for p in [pe, pi] {
                acc -= p[i].ln();
                for (j, &pj) in p.iter().enumerate() {
                    let target = if i == j { 1.0 } else { crate::autograd::KL_EPS };
                    acc += pj * (pj / target).ln();
                }
            }
        }
        let want = 0.5 * acc / 5.0;
        assert!((got - want).abs() < 1e-9 * want.max(1.0), "{got} vs {want}");
    }
}
