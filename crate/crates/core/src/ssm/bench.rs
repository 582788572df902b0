//! Timing of the three scan forms across sequence lengths.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{apply_kernel, kernel_form, scan_parallel, scan_sequential, Result, StaticSsm};
use crate::tensor::Tensor;

pub const CSV_HEADER: &str = "form,L,N,D,ns_per_element";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Form {
    Sequential,
    Kernel,
    Parallel,
}

impl Form {
    pub const ALL: [Form; 3] = [Form::Sequential, Form::Kernel, Form::Parallel];

    pub fn as_str(self) -> &'static str {
        match self {
            Form::Sequential => "sequential",
            Form::Kernel => "kernel",
            Form::Parallel => "parallel",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub form: Form,
    pub len: usize,
    pub state: usize,
    pub channels: usize,
    pub ns_per_element: f64,
}

/// Times `forms` at every length; each point keeps the fastest of `reps`
/// runs. Kernel construction is included in the kernel-form timing.
pub fn run(
    forms: &[Form],
    lens: &[usize],
    state: usize,
    channels: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (0..state).map(|_| -rng.gen_range(0.1..2.0)).collect();
    let b: Vec<f64> = (0..state).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let c: Vec<f64> = (0..state).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ssm = StaticSsm::new(a, b, c, 0.05)?;
    let mut rows = Vec::new();
    for &len in lens {
        let params = ssm.steps(len, channels)?;
        let x = Tensor::<f64>::randn(&[len, channels], 1.0, &mut rng)?;
        for &form in forms {
            let mut best = f64::INFINITY;
            for _ in 0..reps.max(1) {
                let start = Instant::now();
                let y = match form {
                    Form::Sequential => scan_sequential(&params, &x)?,
                    Form::Kernel => apply_kernel(&kernel_form(&params)?, &x)?,
                    Form::Parallel => scan_parallel(&params, &x)?,
                };
                let ns = start.elapsed().as_nanos() as f64;
                std::hint::black_box(y);
                best = best.min(ns);
            }
            rows.push(BenchRow { form, len, state, channels, ns_per_element: best / (len * channels) as f64 });
        }
    }
    Ok(rows)
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{:.3}", r.form.as_str(), r.len, r.state, r.channels, r.ns_per_element);
    }
    out
}

/// `time(2L) / time(L)` for consecutive doublings of one form, as
/// `(L, ratio)` pairs. Totals are compared, not per-element figures.
pub fn doubling_ratios(rows: &[BenchRow], form: Form) -> Vec<(usize, f64)> {
    let mut pts: Vec<(usize, f64)> = rows
        .iter()
        .filter(|r| r.form == form)
        .map(|r| (r.len, r.ns_per_element * (r.len * r.channels) as f64))
        .collect();
    pts.sort_by_key(|p| p.0);
    pts.windows(2).filter(|w| w[1].0 == 2 * w[0].0).map(|w| (w[0].0, w[1].1 / w[0].1)).collect()
}
