//! Toy training on the synthetic dataset.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::loss::sequence_loss;
use super::model::{upsample_flow, FlowModel, ModelError};
use crate::autograd::Tape;
use crate::metrics::{epe, f1_all, s40, MetricError, OutlierRule};
use crate::nn::ParamStore;
use crate::optim::{AdamW, AdamWConfig, OptimError};
use crate::scalar::Scalar;
use crate::synth::{gen_synthetic, split, FlowSample, SynthConfig};
use crate::tensor::{Tensor, TensorError};

pub const LOG_HEADER: &str = "step,loss,epe,f1_all,s40";

#[derive(Debug, Error)]
pub enum TrainError<T: Scalar> {
    #[error("loss diverged at step {step} (value {loss}); last good weights are from step {last_good_step}")]
    Diverged { step: usize, loss: f64, last_good_step: usize, last_good: Box<ParamStore<T>> },
    #[error("training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("writing log: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub gamma: f64,
    /// Seeds both the initialisation and the dataset.
    pub seed: u64,
    /// Evaluate on the holdout every this many steps (0: only at the end).
    pub eval_every: usize,
    /// Samples generated before the 80/20 split.
    pub samples: usize,
    pub data: SynthConfig,
}

impl TrainConfig {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            steps: 1000,
            lr: 5e-4,
            weight_decay: 1e-4,
            batch: 4,
            gamma: super::loss::DEFAULT_GAMMA,
            seed: 0,
            eval_every: 100,
            samples: 320,
            data: SynthConfig { rotation_share: 0.0, ..SynthConfig::new(height, width, 4.0) },
        }
    }
}

/// One line of the metric log. Metrics are over the holdout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    /// Mean training loss since the previous row.
    pub loss: f64,
    pub epe: f64,
    pub f1_all: f64,
    pub s40: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub epe: f64,
    /// Holdout EPE of each `Vⁱ` upsampled to image resolution.
    pub epe_per_iteration: Vec<f64>,
    pub f1_all: f64,
    pub s40: Option<f64>,
    /// EPE over pixels whose source stays inside frame 1, and over the
    /// rest; `None` when a set is empty.
    pub epe_matched: Option<f64>,
    pub epe_unmatched: Option<f64>,
}

pub struct TrainOutcome<T: Scalar> {
    pub store: ParamStore<T>,
    pub log: Vec<LogRow>,
    pub initial: EvalReport,
    pub last: EvalReport,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in rows {
        let s40 = r.s40.map_or_else(String::new, |v| v.to_string());
        let _ = writeln!(out, "{},{},{},{},{}", r.step, r.loss, r.epe, r.f1_all, s40);
    }
    out
}

pub fn write_log(rows: &[LogRow], path: impl AsRef<Path>) -> std::io::Result<()> {
    std::fs::write(path, log_csv(rows))
}

/// Holdout metrics, pooled over all pixels of all samples.
pub fn evaluate<T: Scalar>(
    model: &FlowModel,
    store: &ParamStore<T>,
    samples: &[FlowSample],
    iterations: Option<usize>,
) -> Result<EvalReport, TrainError<T>> {
    if samples.is_empty() {
        return Err(TrainError::Config("evaluation needs at least one sample".into()));
    }
    let n = iterations.unwrap_or(model.config.iterations);
    let (mut preds, mut gts, mut matched) = (Vec::new(), Vec::new(), Vec::new());
    let mut per_iter: Vec<Vec<f32>> = vec![Vec::new(); n + 1];
    for s in samples {
        let tape = Tape::<T>::new();
        let p = store.bind_frozen(&tape);
        let out = model.forward(&p, tape.constant(s.img1.cast()), tape.constant(s.img2.cast()), Some(n))?;
        for (acc, f) in per_iter.iter_mut().zip(&out.flows) {
            acc.extend(upsample_flow(*f, model.config.stride)?.value().cast::<f32>().data());
        }
        preds.extend_from_slice(out.flow.value().cast::<f32>().data());
        gts.extend_from_slice(s.flow.data());
        matched.extend(s.occluded.iter().map(|&o| !o));
    }
    let len = gts.len() / 2;
    let gt = Tensor::new(&[1, len, 2], gts)?;
    let pred = Tensor::new(&[1, len, 2], preds)?;
    let epe_per_iteration = per_iter
        .into_iter()
        .map(|d| Tensor::new(&[1, len, 2], d).map_err(TrainError::from).and_then(|t| Ok(epe(&t, &gt, None)?)))
        .collect::<Result<_, _>>()?;
    let unmatched: Vec<bool> = matched.iter().map(|&m| !m).collect();
    let masked = |m: &[bool]| -> Result<Option<f64>, TrainError<T>> {
        Ok(if m.contains(&true) { Some(epe(&pred, &gt, Some(m))?) } else { None })
    };
    Ok(EvalReport {
        epe_matched: masked(&matched)?,
        epe_unmatched: masked(&unmatched)?,
        epe: epe(&pred, &gt, None)?,
        epe_per_iteration,
        f1_all: f1_all(&pred, &gt, None, OutlierRule::And)?,
        s40: s40(&pred, &gt)?,
    })
}

/// Mean sequence loss over `batch` and the summed parameter gradients.
fn batch_gradients<T: Scalar>(
    model: &FlowModel,
    store: &ParamStore<T>,
    batch: &[&FlowSample],
    gamma: f64,
) -> Result<(f64, Vec<Tensor<T>>), TrainError<T>> {
    let scale = T::from_f64_lossy(1.0 / batch.len() as f64);
    let mut total = 0.0;
    let mut grads: Option<Vec<Tensor<T>>> = None;
    // one tape per sample keeps memory flat; summation order is fixed
    for s in batch {
        let tape = Tape::<T>::new();
        let p = store.bind(&tape);
        let out = model.forward(&p, tape.constant(s.img1.cast()), tape.constant(s.img2.cast()), None)?;
        let full = out.flows.iter().map(|&f| upsample_flow(f, model.config.stride)).collect::<Result<Vec<_>, _>>()?;
        let loss = sequence_loss(&full, tape.constant(s.flow.cast()), gamma)?.scale(scale);
        total += loss.value().item()?.to_f64_lossy();
        let g = p.grads(&tape.backward(loss)?);
        grads = Some(match grads {
            None => g,
            Some(acc) => acc
                .iter()
                .zip(&g)
                .map(|(a, b)| a.zip_map(b, "accumulate gradients", |x, y| x + y))
                .collect::<Result<_, _>>()?,
        });
    }
    Ok((total, grads.expect("non-empty batch")))
}

/// Trains `model` from `store` with AdamW. The batch at step `k` is a
/// fixed function of the seed, so runs are reproducible bit for bit.
pub fn train_toy<T: Scalar>(
    model: &FlowModel,
    mut store: ParamStore<T>,
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainOutcome<T>, TrainError<T>> {
    if cfg.batch == 0 || cfg.samples < 2 {
        return Err(TrainError::Config("batch must be positive and at least two samples are needed".into()));
    }
    let (train, holdout) = split(gen_synthetic(cfg.seed, cfg.samples, &cfg.data));
    let initial = evaluate(model, &store, &holdout, None)?;
    let mut opt =
        AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() }, &store);
    let mut log = Vec::new();
    let mut last = initial.clone();
    let (mut running, mut since) = (0.0, 0usize);
    for step in 1..=cfg.steps {
        let batch: Vec<&FlowSample> =
            (0..cfg.batch).map(|b| &train[((step - 1) * cfg.batch + b) % train.len()]).collect();
        let (loss, grads) = batch_gradients(model, &store, &batch, cfg.gamma)?;
        if !loss.is_finite() || grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(TrainError::Diverged { step, loss, last_good_step: step - 1, last_good: Box::new(store) });
        }
        opt.step(&mut store, &grads)?;
        running += loss;
        since += 1;
        let eval_now = (cfg.eval_every > 0 && step % cfg.eval_every == 0) || step == cfg.steps;
        if eval_now {
            last = evaluate(model, &store, &holdout, None)?;
            let row = LogRow { step, loss: running / since as f64, epe: last.epe, f1_all: last.f1_all, s40: last.s40 };
            on_row(&row);
            log.push(row);
            running = 0.0;
            since = 0;
        }
    }
    Ok(TrainOutcome { store, log, initial, last })
}
