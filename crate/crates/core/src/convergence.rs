//! Empirical checks of the FedAvg descent bound under one deviating client:
//! deviation measurement, smoothness estimation, the per-round descent
//! inequality, and the final min-gradient-norm bound.
//!
//! Multi-epoch client updates enter the theory as effective single-step
//! directions `(W_global - W_local) / (lr * steps)`; this conversion is a
//! modeling choice and every report carries that caveat.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Caveat string attached to every emitted report.
pub const EFFECTIVE_DIRECTION_NOTE: &str = "multi-epoch client updates are converted to \
effective single-step directions (W_global - W_local)/(lr*steps); deviations are measured \
under that conversion";

/// Constants of the descent analysis. `smoothness` and `grad_bound` may be
/// analytic (stub problems) or estimated lower bounds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TheoremParams {
    /// L: smoothness constant of the aggregate objective.
    pub smoothness: f64,
    /// G: bound on local gradient norms along the trajectory.
    pub grad_bound: f64,
    /// Server learning rate.
    pub learning_rate: f64,
    /// Aggregation weight of the deviating client.
    pub malicious_weight: f64,
}

impl TheoremParams {
    pub fn validate(&self) -> Result<()> {
        if self.smoothness <= 0.0
            || self.grad_bound <= 0.0
            || self.learning_rate <= 0.0
            || self.malicious_weight <= 0.0
        {
            return Err(Error::contract(
                "theorem parameters must all be positive",
            ));
        }
        Ok(())
    }

    /// The step-size assumption `lr <= 1/L`.
    pub fn a3_satisfied(&self) -> bool {
        self.learning_rate <= 1.0 / self.smoothness
    }
}

/// Per-round measurement consumed by the checks.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConvergenceRecord {
    pub round: usize,
    /// Objective value on the fixed probe batch at the round-start
    /// parameters.
    pub loss: f64,
    /// Gradient norm of that objective at the round-start parameters.
    pub grad_norm: f64,
    /// Measured deviation of the malicious update (0 on honest rounds).
    pub epsilon: f64,
}

/// Convert a multi-step local update into an effective gradient direction.
pub fn effective_direction(
    global: &[f64],
    local: &[f64],
    lr: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    if global.len() != local.len() {
        return Err(Error::contract(format!(
            "parameter length mismatch: {} vs {}",
            global.len(),
            local.len()
        )));
    }
    if lr <= 0.0 || steps == 0 {
        return Err(Error::contract(
            "effective_direction needs lr > 0 and steps > 0",
        ));
    }
    let scale = 1.0 / (lr * steps as f64);
    Ok(global
        .iter()
        .zip(local)
        .map(|(g, l)| (g - l) * scale)
        .collect())
}

/// L2 distance between the malicious direction and the clean reference.
pub fn measure_epsilon(g_malicious: &[f64], g_clean: &[f64]) -> Result<f64> {
    if g_malicious.len() != g_clean.len() {
        return Err(Error::contract(format!(
            "direction length mismatch: {} vs {}",
            g_malicious.len(),
            g_clean.len()
        )));
    }
    Ok(g_malicious
        .iter()
        .zip(g_clean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

/// Estimate the smoothness constant as the max gradient-difference ratio
/// over random nearby parameter pairs. This is a lower bound on the true
/// constant; the caveat is part of the estimate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SmoothnessEstimate {
    pub value: f64,
    pub pairs_used: usize,
    /// Always true: sampling can only under-estimate the supremum.
    pub is_lower_bound: bool,
}

pub fn estimate_smoothness<F>(
    loss_grad: F,
    theta_samples: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Result<SmoothnessEstimate>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    if theta_samples.len() < 2 && theta_samples.is_empty() {
        return Err(Error::contract("need at least one parameter point"));
    }
    if theta_samples.is_empty() {
        return Err(Error::contract("need at least one parameter point"));
    }
    let pairs = 50;
    let mut best = 0.0f64;
    let mut used = 0usize;
    for k in 0..pairs {
        let theta = &theta_samples[k % theta_samples.len()];
        let dim = theta.len();
        let mut dir: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue; // identical points are skipped
        }
        let scale_base = theta.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        let delta = 1e-3 * scale_base;
        for d in dir.iter_mut() {
            *d *= delta / norm;
        }
        let theta2: Vec<f64> = theta.iter().zip(&dir).map(|(a, b)| a + b).collect();
        let (_, g1) = loss_grad(theta);
        let (_, g2) = loss_grad(&theta2);
        let gd = g1
            .iter()
            .zip(&g2)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let td = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if td > 0.0 {
            best = best.max(gd / td);
            used += 1;
        }
    }
    Ok(SmoothnessEstimate {
        value: best,
        pairs_used: used,
        is_lower_bound: true,
    })
}

/// One round's descent-inequality residual.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DescentResidual {
    pub round: usize,
    /// `(L_t - L_{t+1}) - [ lr/2 * |g_t|^2 - lr*rho^2*eps_t^2/2 - L*lr^2*G^2/2 ]`;
    /// the analysis predicts this is >= 0 under the assumptions.
    pub residual: f64,
    pub a3_violated: bool,
}

/// Evaluate the per-round descent inequality over consecutive records.
/// Rounds with a gap in the stream are skipped and reported.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DescentCheck {
    pub residuals: Vec<DescentResidual>,
    pub skipped_rounds: Vec<usize>,
    pub a3_violated: bool,
}

pub fn descent_check(records: &[ConvergenceRecord], params: &TheoremParams) -> Result<DescentCheck> {
    params.validate()?;
    if records.len() < 2 {
        return Err(Error::contract(
            "descent_check needs at least two consecutive records",
        ));
    }
    let eta = params.learning_rate;
    let rho = params.malicious_weight;
    let boundary = params.smoothness * eta * eta * params.grad_bound * params.grad_bound / 2.0;
    let a3_violated = !params.a3_satisfied();
    let mut residuals = Vec::new();
    let mut skipped = Vec::new();
    for w in records.windows(2) {
        let (cur, next) = (&w[0], &w[1]);
        if next.round != cur.round + 1 {
            skipped.push(cur.round);
            continue;
        }
        if !cur.loss.is_finite() || !next.loss.is_finite() {
            skipped.push(cur.round);
            continue;
        }
        let predicted = eta / 2.0 * cur.grad_norm * cur.grad_norm
            - eta * rho * rho * cur.epsilon * cur.epsilon / 2.0
            - boundary;
        residuals.push(DescentResidual {
            round: cur.round,
            residual: (cur.loss - next.loss) - predicted,
            a3_violated,
        });
    }
    Ok(DescentCheck {
        residuals,
        skipped_rounds: skipped,
        a3_violated,
    })
}

/// Final bound comparison:
/// `min_t |g_t|^2  <=  2 (L(θ_0) - L*) / (lr T)  +  c * rho * max_t eps_t^2`
/// with `c = rho` (the per-round `rho^2 eps^2` rearrangement term) exposed
/// explicitly and the running-minimum loss standing in for the infimum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub rounds: usize,
    pub min_grad_norm_sq: f64,
    pub clean_term: f64,
    pub deviation_constant: f64,
    pub max_epsilon_sq: f64,
    pub deviation_term: f64,
    pub bound: f64,
    pub dominated: bool,
    pub margin: f64,
    /// Running minimum observed loss, the stand-in for the unknowable
    /// infimum (conservative in the favorable direction).
    pub loss_floor: f64,
    pub a3_violated: bool,
    pub caveat: String,
}

pub fn bound_report(records: &[ConvergenceRecord], params: &TheoremParams) -> Result<BoundReport> {
    params.validate()?;
    if records.is_empty() {
        return Err(Error::contract("bound_report needs at least one record"));
    }
    let t = records.len();
    let loss_floor = records
        .iter()
        .map(|r| r.loss)
        .fold(f64::INFINITY, f64::min);
    let clean_term =
        2.0 * (records[0].loss - loss_floor) / (params.learning_rate * t as f64);
    let max_eps_sq = records
        .iter()
        .map(|r| r.epsilon * r.epsilon)
        .fold(0.0f64, f64::max);
    let c = params.malicious_weight;
    let deviation_term = c * params.malicious_weight * max_eps_sq;
    let bound = clean_term + deviation_term;
    let min_grad_sq = records
        .iter()
        .map(|r| r.grad_norm * r.grad_norm)
        .fold(f64::INFINITY, f64::min);
    Ok(BoundReport {
        rounds: t,
        min_grad_norm_sq: min_grad_sq,
        clean_term,
        deviation_constant: c,
        max_epsilon_sq: max_eps_sq,
        deviation_term,
        bound,
        dominated: min_grad_sq <= bound + 1e-12,
        margin: bound - min_grad_sq,
        loss_floor,
        a3_violated: !params.a3_satisfied(),
        caveat: EFFECTIVE_DIRECTION_NOTE.to_string(),
    })
}
