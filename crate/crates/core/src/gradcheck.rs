//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, GradFault, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Relative errors use `max(|analytic|, |numeric|, floor)` as denominator.
    pub floor: f64,
    /// Coordinates probed per tensor; larger tensors are subsampled.
    pub max_coords: usize,
    pub seed: u64,
    pub fault: Option<GradFault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, tol: 1e-4, floor: 1e-6, max_coords: 24, seed: 0, fault: None }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(move |e| e.max_rel_err >= self.tol)
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` with central
/// differences for every named input tensor.
pub fn grad_check<F>(f: F, inputs: &[(String, Tensor)], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let g = match opts.fault {
        Some(fault) => Graph::with_fault(fault),
        None => Graph::new(),
    };
    let vars: Vec<Var> = inputs.iter().map(|(_, t)| g.leaf(t.clone(), true)).collect();
    let loss = f(&g, &vars)?;
    g.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        let v = g.value(out).item();
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut entries = Vec::with_capacity(inputs.len());
    for (i, (name, t)) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()));
        let coords: Vec<usize> = if t.numel() <= opts.max_coords {
            (0..t.numel()).collect()
        } else {
            let mut c = sample(&mut rng, t.numel(), opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let orig = values[i].data()[c];
            values[i].data_mut()[c] = orig + opts.step;
            let up = eval(&values)?;
            values[i].data_mut()[c] = orig - opts.step;
            let down = eval(&values)?;
            values[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = analytic.data()[c];
            let denom = a.abs().max(numeric.abs()).max(opts.floor);
            let err = (a - numeric).abs() / denom;
            worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        entries.push(GradCheckEntry { name: name.clone(), max_rel_err: worst, coords_checked: coords.len() });
    }
    Ok(GradCheckReport { tol: opts.tol, entries })
}
