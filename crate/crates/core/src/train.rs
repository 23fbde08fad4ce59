//! Training loop: one tape per step, two group optimizers, validation after
//! every epoch, and the lowest-validation-loss state as the result.

use std::borrow::Cow;
use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::{DataConfig, RunConfig};
use crate::data::PairedBatch;
use crate::error::{Error, Result};
use crate::loss::{cosine_sim_matrix, LossValues};
use crate::metrics::{retrieval_report, RetrievalReport};
use crate::model::{ModelDims, NeuroClip};
use crate::optim::{clip_grad_norm, DualOptimizer};
use crate::params::Ctx;
use crate::tensor::Tensor;

const STREAM_SHUFFLE: u64 = 7;

/// Applies the configured channel mask and time window.
pub fn prepare<'a>(batch: &'a PairedBatch, cfg: &DataConfig) -> Result<Cow<'a, PairedBatch>> {
    if cfg.channel_mask.is_empty() && cfg.time_window.is_empty() {
        return Ok(Cow::Borrowed(batch));
    }
    let window = match cfg.time_window[..] {
        [] => None,
        [s, e] => Some((s, e)),
        _ => return Err(Error::Config("data.time_window: expected [start, end)".into())),
    };
    Ok(Cow::Owned(batch.mask(&cfg.channel_mask, window)?))
}

pub struct TrainState {
    pub model: NeuroClip,
    pub opt: DualOptimizer,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

impl TrainState {
    pub fn new(model: NeuroClip) -> Self {
        let opt = DualOptimizer::new(&model.config.trainer);
        let mut rng = ChaCha8Rng::seed_from_u64(model.config.seed);
        rng.set_stream(STREAM_SHUFFLE);
        Self { model, opt, rng, step: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct StepReport {
    pub loss: LossValues,
    pub updated_a: Vec<String>,
    pub updated_b: Vec<String>,
}

/// One forward/backward pass and one update of each optimizer group.
pub fn train_step(state: &mut TrainState, batch: &PairedBatch) -> Result<StepReport> {
    if batch.len() < 2 {
        return Err(Error::Contract("training batches need at least 2 pairs".into()));
    }
    let grads;
    let loss;
    {
        let model = &state.model;
        let g = Graph::new();
        let ctx = Ctx::new(&g, &model.params, true);
        let (ze, zi) = model.forward(&ctx, batch)?;
        let terms = model.loss(&ctx, ze, zi)?;
        loss = terms.values(&g);
        if let Some(bad) = loss.non_finite() {
            return Err(Error::NonFinite(format!("{bad} is not finite at step {} ({loss:?})", state.step)));
        }
        g.backward(terms.total)?;
        grads = ctx.into_grads();
    }
    let params = &mut state.model.params;
    params.zero_grad();
    params.accumulate_grads(grads)?;
    if let Some(max) = state.model.config.trainer.clip_norm {
        clip_grad_norm(params, max);
    }
    let (updated_a, updated_b) = state.opt.step(params);
    params.zero_grad();
    state.step += 1;
    Ok(StepReport { loss, updated_a, updated_b })
}

/// Contiguous chunks of about `size`; a trailing single pair joins the previous chunk.
fn chunks(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut s = 0;
    while s < n {
        let e = (s + size).min(n);
        if e - s < 2 && !out.is_empty() {
            let last: &mut std::ops::Range<usize> = out.last_mut().expect("nonempty");
            last.end = e;
        } else {
            out.push(s..e);
        }
        s = e;
    }
    out
}

/// Loss components averaged over fixed, in-order chunks (weighted by chunk size).
pub fn evaluate_loss(model: &NeuroClip, data: &PairedBatch, batch_size: usize) -> Result<LossValues> {
    if data.len() < 2 {
        return Err(Error::Contract("validation needs at least 2 pairs".into()));
    }
    let mut acc = LossValues::default();
    for r in chunks(data.len(), batch_size.max(2)) {
        let idx: Vec<usize> = r.clone().collect();
        let sub = data.select(&idx);
        let g = Graph::new();
        let ctx = Ctx::new(&g, &model.params, false);
        let (ze, zi) = model.forward(&ctx, &sub)?;
        let v = model.loss(&ctx, ze, zi)?.values(&g);
        acc = acc.add(&v.scaled(idx.len() as f64));
    }
    Ok(acc.scaled(1.0 / data.len() as f64))
}

/// Index of the smallest finite value; earliest wins ties.
pub fn select_best(val_losses: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in val_losses.iter().enumerate() {
        if v.is_finite() && best.is_none_or(|b| v < val_losses[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Step {
        epoch: usize,
        step: u64,
        #[serde(flatten)]
        loss: LossValues,
    },
    Epoch {
        epoch: usize,
        #[serde(flatten)]
        loss: LossValues,
        val_loss: f64,
    },
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: Checkpoint,
    /// Validation loss per epoch, index 0 being the initialized model.
    pub val_losses: Vec<f64>,
    pub log: Vec<LogEntry>,
}

/// Trains for `cfg.trainer.epochs` epochs and returns the checkpoint with
/// the lowest validation loss (the untrained state included). Log entries
/// are also streamed as JSON lines to `sink` when given.
pub fn fit(train: &PairedBatch, val: &PairedBatch, cfg: &RunConfig, mut sink: Option<&mut dyn Write>) -> Result<FitOutcome> {
    let train = prepare(train, &cfg.data)?;
    let val = prepare(val, &cfg.data)?;
    let dims = ModelDims::of(&train)?;
    if ModelDims::of(&val)? != dims {
        return Err(Error::Contract("training and validation geometry differ".into()));
    }
    let train_classes: Vec<usize> = train.classes().union(&val.classes()).copied().collect();
    let mut state = TrainState::new(NeuroClip::new(cfg, dims)?);
    let bs = cfg.trainer.batch_size;

    let mut log = Vec::new();
    let mut emit = |e: LogEntry, log: &mut Vec<LogEntry>| -> Result<()> {
        if let Some(w) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &e)?;
            w.write_all(b"\n")?;
        }
        log.push(e);
        Ok(())
    };

    let init = evaluate_loss(&state.model, &val, bs)?;
    emit(LogEntry::Epoch { epoch: 0, loss: LossValues::default(), val_loss: init.l_total }, &mut log)?;
    let mut val_losses = vec![init.l_total];
    let mut best = Checkpoint::from_model(&state.model, 0, init.l_total, train_classes.clone());

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.trainer.epochs {
        order.shuffle(&mut state.rng);
        let mut sum = LossValues::default();
        let mut steps = 0usize;
        for idx in order.chunks(bs) {
            if idx.len() < 2 {
                continue;
            }
            let report = train_step(&mut state, &train.select(idx))?;
            emit(LogEntry::Step { epoch, step: state.step, loss: report.loss }, &mut log)?;
            sum = sum.add(&report.loss);
            steps += 1;
        }
        let mean = if steps > 0 { sum.scaled(1.0 / steps as f64) } else { sum };
        let v = evaluate_loss(&state.model, &val, bs)?.l_total;
        emit(LogEntry::Epoch { epoch, loss: mean, val_loss: v }, &mut log)?;
        val_losses.push(v);
        if select_best(&val_losses) == Some(epoch) {
            best = Checkpoint::from_model(&state.model, epoch, v, train_classes.clone());
        }
    }
    Ok(FitOutcome { best, val_losses, log })
}

#[derive(Clone, Debug)]
pub struct ZeroShotResult {
    pub report: RetrievalReport,
    pub similarity: Tensor,
}

/// Similarity matrix between all test EEG embeddings and all test image embeddings.
pub fn similarity(model: &NeuroClip, test: &PairedBatch) -> Result<Tensor> {
    let (ze, zi) = model.embed_all(test, 64)?;
    let g = Graph::new();
    let s = cosine_sim_matrix(&g, g.constant(ze), g.constant(zi))?;
    let out = g.value(s).clone();
    Ok(out)
}

/// Retrieval on classes the checkpoint never trained on.
pub fn evaluate_zero_shot(ckpt: &Checkpoint, test: &PairedBatch, ks: &[usize]) -> Result<ZeroShotResult> {
    let seen: BTreeSet<usize> = ckpt.train_classes.iter().copied().collect();
    let overlap: Vec<usize> = test.classes().intersection(&seen).copied().collect();
    if !overlap.is_empty() {
        return Err(Error::Contract(format!("test classes {overlap:?} were seen during training")));
    }
    let test = prepare(test, &ckpt.config.data)?;
    let model = ckpt.model()?;
    let s = similarity(&model, &test)?;
    Ok(ZeroShotResult { report: retrieval_report(&s, ks)?, similarity: s })
}
