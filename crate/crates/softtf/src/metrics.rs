//! Continual-learning metrics, mask statistics, attention maps, and the
//! step-size/averaging probe for the subgradient convergence bound.

use crate::adaptation::MaskSet;
use crate::backbone::ForwardTrace;
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::Tensor;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Lower-triangular accuracy matrix: `a(l, t)` is accuracy on task `t`'s test
/// split measured after finishing stage `l`, defined for `t <= l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    rows: Vec<Vec<f64>>,
}

impl EvalMatrix {
    /// Builds from triangular rows; row `l` must hold exactly `l + 1` entries
    /// in `[0, 1]`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<EvalMatrix> {
        for (l, row) in rows.iter().enumerate() {
            if row.len() != l + 1 {
                return Err(Error::contract(format!(
                    "eval matrix row {l} has {} entries, expected {}",
                    row.len(),
                    l + 1
                )));
            }
            for (t, &v) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::contract(format!(
                        "eval matrix entry ({l}, {t}) = {v} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(EvalMatrix { rows })
    }

    pub fn num_tasks(&self) -> usize {
        self.rows.len()
    }

    /// Accuracy on task `t` after stage `l` (`t <= l`).
    pub fn at(&self, l: usize, t: usize) -> f64 {
        self.rows[l][t]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }
}

/// Final-model metrics over a full run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean final-stage accuracy over all tasks.
    pub acc: f64,
    /// Mean over non-final tasks of (best historical accuracy − final
    /// accuracy); 0 by convention for a single task.
    pub forget: f64,
}

/// ACC and forgetting from a populated eval matrix.
pub fn compute_metrics(m: &EvalMatrix) -> Result<Metrics> {
    let t_count = m.num_tasks();
    if t_count == 0 {
        return Err(Error::contract("compute_metrics: empty eval matrix"));
    }
    let last = t_count - 1;
    let acc = (0..t_count).map(|t| m.at(last, t)).sum::<f64>() / t_count as f64;
    let forget = if t_count == 1 {
        0.0
    } else {
        let mut sum = 0.0;
        for t in 0..t_count - 1 {
            let best = (t..t_count).map(|l| m.at(l, t)).fold(f64::NEG_INFINITY, f64::max);
            sum += best - m.at(last, t);
        }
        sum / (t_count - 1) as f64
    };
    Ok(Metrics { acc, forget })
}

/// Histogram plus exact moments of one mask matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixHistogram {
    pub layer: usize,
    pub target: String,
    /// `bins + 1` edges spanning `[min, max]` of the matrix.
    pub edges: Vec<f64>,
    /// Occupancy per bin; sums to the matrix element count.
    pub counts: Vec<u64>,
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
}

/// Per-matrix histograms over a mask set.
pub fn mask_histogram(set: &MaskSet, bins: usize) -> Result<Vec<MatrixHistogram>> {
    if bins == 0 {
        return Err(Error::contract("mask_histogram: bins must be >= 1"));
    }
    set.entries
        .iter()
        .map(|e| {
            let data = &e.tensor.data;
            let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut counts = vec![0u64; bins];
            let edges: Vec<f64>;
            if lo == hi {
                // Degenerate (e.g. untouched all-ones mask): everything lands
                // in one bin of zero width.
                edges = (0..=bins).map(|_| lo).collect();
                counts[0] = data.len() as u64;
            } else {
                let width = (hi - lo) / bins as f64;
                edges = (0..=bins).map(|i| lo + width * i as f64).collect();
                for &v in data {
                    let idx = (((v - lo) / width) as usize).min(bins - 1);
                    counts[idx] += 1;
                }
            }
            Ok(MatrixHistogram {
                layer: e.layer,
                target: e.target.name().to_string(),
                edges,
                counts,
                mean: e.tensor.mean(),
                variance: e.tensor.variance(),
            })
        })
        .collect()
}

/// Mean over heads of one layer's attention matrix from a recorded forward.
pub fn attention_map(trace: &ForwardTrace, layer: usize) -> Result<Tensor> {
    let heads = trace
        .attention
        .get(layer)
        .ok_or_else(|| Error::contract(format!("attention_map: layer {layer} not recorded")))?;
    if heads.is_empty() {
        return Err(Error::contract("attention_map: no heads recorded"));
    }
    let mut mean = Tensor::zeros(&heads[0].shape);
    for h in heads {
        if h.shape != mean.shape {
            return Err(Error::contract("attention_map: ragged head shapes"));
        }
        for (m, &v) in mean.data.iter_mut().zip(&h.data) {
            *m += v;
        }
    }
    let n = heads.len() as f64;
    for m in &mut mean.data {
        *m /= n;
    }
    Ok(mean)
}

// ── Convergence probe ───────────────────────────────────────────────────────

/// Outcome of one subgradient-descent probe run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// `f(mean iterate) − f(minimizer)`.
    pub suboptimality: f64,
    /// `B·ρ/√T`.
    pub bound: f64,
    /// Step size used, `B/(ρ·√T)`.
    pub eta: f64,
    pub satisfied: bool,
}

const PROBE_SLACK: f64 = 1e-12;

/// Runs averaged subgradient descent on `f(w) = ρ·‖w − w*‖₂` with the
/// bound-optimal constant step size and checks the guarantee
/// `f(w̄) − f(w*) ≤ B·ρ/√T`.
///
/// The start point sits at distance exactly `B` from the optimum (`W(1)=0`,
/// `‖w*‖ = B`), `f` is exactly ρ-Lipschitz, so the probe instantiates the
/// bound's worst-case constants.
pub fn convergence_probe(b: f64, rho: f64, t_steps: usize, dim: usize, seed: u64) -> Result<ProbeResult> {
    probe_from_distance(b, b, rho, t_steps, dim, seed)
}

/// Probe outcome pair for the warm-start comparison: a run whose start is at
/// the full distance `b` and one started closer at `b_m < b`, each using its
/// own distance bound. The closer start carries the strictly smaller bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmStartProbe {
    pub cold: ProbeResult,
    pub warm: ProbeResult,
    /// Whether `warm.bound < cold.bound` strictly.
    pub bound_ordering: bool,
}

pub fn convergence_probe_warm(
    b: f64,
    b_m: f64,
    rho: f64,
    t_steps: usize,
    dim: usize,
    seed: u64,
) -> Result<WarmStartProbe> {
    if !(b_m < b) {
        return Err(Error::contract(format!("warm-start distance {b_m} must be smaller than {b}")));
    }
    let cold = probe_from_distance(b, b, rho, t_steps, dim, seed)?;
    let warm = probe_from_distance(b_m, b_m, rho, t_steps, dim, seed)?;
    let bound_ordering = warm.bound < cold.bound;
    Ok(WarmStartProbe { cold, warm, bound_ordering })
}

/// Shared probe body: start at distance `start_dist` from the optimum, use
/// `dist_bound` as the distance constant in the step size and the bound.
fn probe_from_distance(
    dist_bound: f64,
    start_dist: f64,
    rho: f64,
    t_steps: usize,
    dim: usize,
    seed: u64,
) -> Result<ProbeResult> {
    if !(dist_bound > 0.0) || !(rho > 0.0) {
        return Err(Error::contract("probe: distance bound and Lipschitz constant must be positive"));
    }
    if t_steps == 0 || dim == 0 {
        return Err(Error::contract("probe: iteration count and dimension must be positive"));
    }
    let mut rng = seeds::stream_rng(seed, seeds::PROBE_INIT);
    // Random direction, normalized; the optimum sits at start_dist along it
    // so that w(1) = 0 is exactly start_dist away.
    let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        dir[0] = 1.0;
    } else {
        for v in &mut dir {
            *v /= norm;
        }
    }
    let w_star: Vec<f64> = dir.iter().map(|v| v * start_dist).collect();

    let eta = dist_bound / (rho * (t_steps as f64).sqrt());
    let mut w = vec![0.0; dim];
    let mut w_sum = vec![0.0; dim];
    for _ in 0..t_steps {
        for (s, &wi) in w_sum.iter_mut().zip(&w) {
            *s += wi;
        }
        // Subgradient of ρ‖w − w*‖: ρ·(w − w*)/‖w − w*‖, zero at the optimum.
        let diff: Vec<f64> = w.iter().zip(&w_star).map(|(a, b)| a - b).collect();
        let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dist > 0.0 {
            for (wi, d) in w.iter_mut().zip(&diff) {
                *wi -= eta * rho * d / dist;
            }
        }
    }
    let inv_t = 1.0 / t_steps as f64;
    let mean_dist = w_sum
        .iter()
        .zip(&w_star)
        .map(|(s, ws)| {
            let d = s * inv_t - ws;
            d * d
        })
        .sum::<f64>()
        .sqrt();
    let suboptimality = rho * mean_dist;
    let bound = dist_bound * rho / (t_steps as f64).sqrt();
    Ok(ProbeResult { suboptimality, bound, eta, satisfied: suboptimality <= bound + PROBE_SLACK })
}
