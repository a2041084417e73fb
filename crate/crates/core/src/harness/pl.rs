//! Convergence testbed on a synthetic strongly-convex quadratic: runs the
//! federated loop with exact gradients, logs the optimality gap per
//! iteration, fits the log-linear decay rate, and measures the terminal
//! plateau. Gradient descent on this objective has a closed-form gap
//! recurrence, which anchors the fitted rate.

use crate::compress::{Codec, CompressError, EmaThresholdState, ResidualBuffer, ResidualPolicy};
use crate::data::{make_synthetic_quadratic, DataError, Quadratic};
use crate::fedcore::{codec_stream, sparq_compress_step};
use crate::halfcodec::RoundingMode;
use crate::tensor::{LayerLayout, ParamVector, SeededRng};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlError {
    #[error("step {step} exceeds the stable limit 1/L = {limit}")]
    StepTooLarge { step: f64, limit: f64 },
    #[error("iterate diverged at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Compress(#[from] CompressError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlStrategy {
    /// Plain gradient descent: clients send exact deltas.
    Uncompressed,
    /// The adaptive threshold/quantize/error-feedback pipeline.
    FedSparq,
}

#[derive(Debug, Clone)]
pub struct PlConfig {
    pub dim: usize,
    pub cond: f64,
    pub strategy: PlStrategy,
    pub iterations: usize,
    pub step: f64,
    pub seed: u64,
    pub clients: usize,
    pub rounding: RoundingMode,
    pub residual: ResidualPolicy,
    pub beta_ema: f64,
}

impl PlConfig {
    pub fn new(dim: usize, cond: f64, strategy: PlStrategy) -> Self {
        PlConfig {
            dim,
            cond,
            strategy,
            iterations: 400,
            step: 1.0 / cond,
            seed: 0,
            clients: 1,
            rounding: RoundingMode::Stochastic,
            residual: ResidualPolicy::FullEf,
            beta_ema: 0.9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlReport {
    pub l_const: f64,
    pub mu_pl: f64,
    /// Optimality gap after each server update; index 0 is the start.
    pub gaps: Vec<f64>,
    /// Per-iteration gap ratio fitted on the log-linear window.
    pub fitted_rate: f64,
    pub fit_r2: f64,
    pub fit_window: (usize, usize),
    /// Median gap over the trailing fifth of the run.
    pub plateau: f64,
}

impl PlReport {
    /// The gap contraction factor `(1 - step * mu)^2` that plain descent
    /// approaches once the fast modes die out.
    pub fn analytic_rate(step: f64, mu_pl: f64) -> f64 {
        (1.0 - step * mu_pl).powi(2)
    }
}

const QUADRATIC_STREAM: u64 = 0x50;

/// Closed-form gap sequence for plain descent from the origin.
pub fn closed_form_gaps(q: &Quadratic, step: f64, iterations: usize) -> Vec<f64> {
    let xs = q.minimizer();
    (0..=iterations)
        .map(|t| {
            q.diag
                .iter()
                .zip(&xs)
                .map(|(&a, &x_star)| {
                    let residual = (1.0 - step * a).powi(t as i32) * x_star;
                    0.5 * a * residual * residual
                })
                .sum()
        })
        .collect()
}

fn median(sorted: &mut [f64]) -> f64 {
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Least squares of `ln(gap)` against iteration over `[start, end]`;
/// returns `(rate_per_iteration, r_squared)`.
fn fit_log_linear(gaps: &[f64], start: usize, end: usize) -> (f64, f64) {
    let points: Vec<(f64, f64)> = (start..=end)
        .filter(|&t| gaps[t] > 0.0)
        .map(|t| (t as f64, gaps[t].ln()))
        .collect();
    let n = points.len() as f64;
    if points.len() < 2 {
        return (f64::NAN, 0.0);
    }
    let sx: f64 = points.iter().map(|p| p.0).sum();
    let sy: f64 = points.iter().map(|p| p.1).sum();
    let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    let intercept = (sy - slope * sx) / n;
    let mean_y = sy / n;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (x, y) in &points {
        let pred = intercept + slope * x;
        ss_res += (y - pred) * (y - pred);
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 };
    (slope.exp(), r2)
}

/// Pick the log-linear segment: past the multi-mode transient, above the
/// plateau noise floor.
fn fit_window(gaps: &[f64], plateau: f64) -> (usize, usize) {
    let n = gaps.len();
    let transient_level = gaps[0] * 0.05;
    let start = (1..n)
        .find(|&t| gaps[t] <= transient_level)
        .unwrap_or(1)
        .max(2);
    let end = (0..n)
        .rev()
        .find(|&t| gaps[t] >= plateau * 50.0)
        .unwrap_or(n - 1);
    if end <= start + 7 {
        // degenerate run (immediate convergence or no decay): fall back to
        // the first half
        (2.min(n - 1), (n / 2).max(3).min(n - 1))
    } else {
        (start, end)
    }
}

/// Run the loop and report rates. `clients > 1` replicates the objective on
/// every client (their updates are averaged), which leaves plain descent
/// unchanged and exercises per-client pipeline state.
pub fn run_pl_testbed(cfg: &PlConfig) -> Result<PlReport, PlError> {
    let quadratic = make_synthetic_quadratic(
        cfg.dim,
        cfg.cond,
        &mut SeededRng::new(cfg.seed, QUADRATIC_STREAM),
    )?;
    let l_const = quadratic.l_const();
    let mu_pl = quadratic.mu_pl();
    let limit = 1.0 / l_const;
    if cfg.step > limit * (1.0 + 1e-12) {
        return Err(PlError::StepTooLarge {
            step: cfg.step,
            limit,
        });
    }

    let layout = LayerLayout::new(vec![("quad", cfg.dim)]).expect("one non-empty layer");
    let mut w = ParamVector::zeros(&layout);
    let f_star = quadratic.min_value();
    let mut residuals: Vec<ResidualBuffer> =
        (0..cfg.clients).map(|_| ResidualBuffer::zeros(&layout)).collect();
    let mut thresholds: Vec<EmaThresholdState> = (0..cfg.clients)
        .map(|_| {
            EmaThresholdState::new(
                &layout,
                cfg.beta_ema,
                crate::compress::ThresholdScope::PerLayer,
            )
        })
        .collect::<Result<_, _>>()?;
    let mut codec_rngs: Vec<SeededRng> = (0..cfg.clients)
        .map(|k| SeededRng::new(cfg.seed, codec_stream(k as u32)))
        .collect();

    let gap_of = |w: &ParamVector| -> f64 {
        let x: Vec<f64> = w.values().iter().map(|&v| v as f64).collect();
        quadratic.value(&x) - f_star
    };
    let mut gaps = Vec::with_capacity(cfg.iterations + 1);
    gaps.push(gap_of(&w));

    for iteration in 0..cfg.iterations {
        let x: Vec<f64> = w.values().iter().map(|&v| v as f64).collect();
        let grad = quadratic.gradient(&x);
        let mut delta = ParamVector::zeros(&layout);
        for (slot, &g) in delta.values_mut().iter_mut().zip(&grad) {
            *slot = (-cfg.step * g) as f32;
        }
        let mut acc = vec![0.0f64; cfg.dim];
        for k in 0..cfg.clients {
            let update = match cfg.strategy {
                PlStrategy::Uncompressed => delta.clone(),
                PlStrategy::FedSparq => {
                    let step = sparq_compress_step(
                        &delta,
                        &mut residuals[k],
                        &mut thresholds[k],
                        Codec::Binary16(cfg.rounding),
                        cfg.residual,
                        None,
                        Some(&mut codec_rngs[k]),
                        iteration as u32,
                        k as u32,
                    )?;
                    step.update
                }
            };
            for (slot, &u) in acc.iter_mut().zip(update.values()) {
                *slot += u as f64 / cfg.clients as f64;
            }
        }
        for (slot, &a) in w.values_mut().iter_mut().zip(&acc) {
            *slot += a as f32;
        }
        let gap = gap_of(&w);
        if !gap.is_finite() {
            return Err(PlError::Diverged { iteration });
        }
        gaps.push(gap);
    }

    let tail = gaps.len() / 5;
    let mut tail_gaps: Vec<f64> = gaps[gaps.len() - tail.max(5)..].to_vec();
    let plateau = median(&mut tail_gaps);
    let (start, end) = fit_window(&gaps, plateau);
    let (fitted_rate, fit_r2) = fit_log_linear(&gaps, start, end);
    Ok(PlReport {
        l_const,
        mu_pl,
        gaps,
        fitted_rate,
        fit_r2,
        fit_window: (start, end),
        plateau,
    })
}
