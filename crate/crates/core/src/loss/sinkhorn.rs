//! Log-domain Sinkhorn for entropic optimal transport.
//!
//! Solves `min_P <P, C> + eps * KL(P | a ⊗ b)` over couplings of `a` and `b`
//! by alternating exact updates of the dual potentials `f`, `g`:
//!
//! ```text
//! f_i = -eps * log sum_j b_j exp((g_j - C_ij) / eps)
//! g_j = -eps * log sum_i a_i exp((f_i - C_ij) / eps)
//! P_ij = a_i b_j exp((f_i + g_j - C_ij) / eps)
//! ```
//!
//! Zero-weight bins drop out of the log-sum-exps, so sparse marginals are
//! handled exactly. At the fixed point the entropic value equals
//! `<f, a> + <g, b>` and its gradient with respect to `a` is `f` (up to a
//! constant that vanishes on the simplex).

use thiserror::Error;

pub const DEFAULT_REG_EPS: f64 = 1e-2;
pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum SinkhornError {
    #[error("weights must be finite and non-negative (index {index} of {side})")]
    NonNegativeViolation { side: &'static str, index: usize },
    #[error("source mass {source_mass} and target mass {target_mass} differ")]
    MassMismatch { source_mass: f64, target_mass: f64 },
    #[error("cost matrix has {found} entries, expected {expected}")]
    CostShape { expected: usize, found: usize },
    #[error("regularization must be positive, got {0}")]
    BadRegularization(f64),
    #[error("both marginals must carry positive mass")]
    ZeroMass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    /// Row-major `n x m` coupling.
    pub plan: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    /// Source potential `f`.
    pub dual_u: Vec<f64>,
    /// Target potential `g`.
    pub dual_v: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Transport cost `<P, C>`.
    pub cost: f64,
    /// Entropic objective `<P, C> + eps KL(P | a ⊗ b)`, evaluated as
    /// `<f, a> + <g, b>`.
    pub objective: f64,
    /// Final `|row_sums - a|_1 + |col_sums - b|_1`.
    pub marginal_error: f64,
}

impl TransportPlan {
    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks_exact(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.plan.chunks_exact(self.cols) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }
}

fn validate(w: &[f64], side: &'static str) -> Result<f64, SinkhornError> {
    for (index, &v) in w.iter().enumerate() {
        if !(v >= 0.0) || !v.is_finite() {
            return Err(SinkhornError::NonNegativeViolation { side, index });
        }
    }
    Ok(w.iter().sum())
}

/// `-eps * log sum_k exp(log_w_k + (pot_k - c_k) / eps)` over the support.
#[inline]
fn soft_min(log_w: &[f64], pot: &[f64], cost_at: impl Fn(usize) -> f64, eps: f64) -> f64 {
    let term = |k: usize| log_w[k] + (pot[k] - cost_at(k)) / eps;
    let support = || (0..log_w.len()).filter(|&k| log_w[k] > f64::NEG_INFINITY);
    let top = support().map(term).fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = support().map(|k| (term(k) - top).exp()).sum();
    -eps * (top + s.ln())
}

/// `(shift, w)` with `w_k = exp(log_w_k + pot_k / eps - shift)` and `shift`
/// the largest exponent, so every `w_k <= 1`.
fn scaled_weights(log_w: &[f64], pot: &[f64], eps: f64) -> (f64, Vec<f64>) {
    let s: Vec<f64> = log_w.iter().zip(pot).map(|(lw, p)| lw + p / eps).collect();
    let shift = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (shift, s.iter().map(|x| (x - shift).exp()).collect())
}

/// Smallest kernel sum trusted before falling back to the log domain.
const MIN_KERNEL_SUM: f64 = 1e-200;

fn kernel_sum(kernel_row: &[f64], w: &[f64]) -> Option<f64> {
    let s: f64 = kernel_row.iter().zip(w).map(|(k, x)| k * x).sum();
    (s > MIN_KERNEL_SUM).then_some(s)
}

/// Entropic OT between `source` (length n) and `target` (length m) under the
/// row-major `n x m` cost. Both marginals are normalized to unit mass first;
/// their original masses must agree to 1e-9 (relative).
pub fn sinkhorn(
    source: &[f64],
    target: &[f64],
    cost: &[f64],
    reg_eps: f64,
    max_iter: usize,
    tol: f64,
) -> Result<TransportPlan, SinkhornError> {
    let (n, m) = (source.len(), target.len());
    if cost.len() != n * m {
        return Err(SinkhornError::CostShape {
            expected: n * m,
            found: cost.len(),
        });
    }
    if !(reg_eps > 0.0) || !reg_eps.is_finite() {
        return Err(SinkhornError::BadRegularization(reg_eps));
    }
    let sa = validate(source, "source")?;
    let sb = validate(target, "target")?;
    if sa <= 0.0 || sb <= 0.0 {
        return Err(SinkhornError::ZeroMass);
    }
    if (sa - sb).abs() > 1e-9 * sa.max(sb) {
        return Err(SinkhornError::MassMismatch {
            source_mass: sa,
            target_mass: sb,
        });
    }
    let a: Vec<f64> = source.iter().map(|v| v / sa).collect();
    let b: Vec<f64> = target.iter().map(|v| v / sb).collect();
    let log_a: Vec<f64> = a.iter().map(|v| v.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|v| v.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    // Gibbs kernel in both layouts; rows whose shifted sum underflows fall
    // back to the direct log-sum-exp.
    let kernel: Vec<f64> = cost.iter().map(|c| (-c / reg_eps).exp()).collect();
    let mut kernel_t = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            kernel_t[j * n + i] = kernel[i * m + j];
        }
    }

    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        iterations += 1;
        let (shift, v) = scaled_weights(&log_b, &g, reg_eps);
        for i in 0..n {
            f[i] = match kernel_sum(&kernel[i * m..(i + 1) * m], &v) {
                Some(sum) => -reg_eps * (shift + sum.ln()),
                None => soft_min(&log_b, &g, |j| cost[i * m + j], reg_eps),
            };
        }
        let (shift, u) = scaled_weights(&log_a, &f, reg_eps);
        for j in 0..m {
            g[j] = match kernel_sum(&kernel_t[j * n..(j + 1) * n], &u) {
                Some(sum) => -reg_eps * (shift + sum.ln()),
                None => soft_min(&log_a, &f, |i| cost[i * m + j], reg_eps),
            };
        }
        // After the g update columns match exactly; measure the rows.
        let (shift, v) = scaled_weights(&log_b, &g, reg_eps);
        let mut err = 0.0;
        for i in 0..n {
            if a[i] == 0.0 {
                continue;
            }
            let row = match kernel_sum(&kernel[i * m..(i + 1) * m], &v) {
                Some(sum) => (f[i] / reg_eps + shift + sum.ln()).exp(),
                None => (0..m)
                    .filter(|&j| b[j] > 0.0)
                    .map(|j| b[j] * ((f[i] + g[j] - cost[i * m + j]) / reg_eps).exp())
                    .sum(),
            };
            err += (a[i] * row - a[i]).abs();
        }
        if err < tol {
            converged = true;
            break;
        }
    }

    let mut plan = vec![0.0; n * m];
    let mut transport = 0.0;
    for i in 0..n {
        if a[i] == 0.0 {
            continue;
        }
        for j in 0..m {
            if b[j] == 0.0 {
                continue;
            }
            let p = a[i] * b[j] * ((f[i] + g[j] - cost[i * m + j]) / reg_eps).exp();
            plan[i * m + j] = p;
            transport += p * cost[i * m + j];
        }
    }
    let dot = |w: &[f64], pot: &[f64]| -> f64 {
        w.iter().zip(pot).filter(|(&wi, _)| wi > 0.0).map(|(wi, p)| wi * p).sum()
    };
    let objective = dot(&a, &f) + dot(&b, &g);
    let mut out = TransportPlan {
        plan,
        rows: n,
        cols: m,
        dual_u: f,
        dual_v: g,
        iterations,
        converged,
        cost: transport,
        objective,
        marginal_error: 0.0,
    };
    let rs = out.row_sums();
    let cs = out.col_sums();
    out.marginal_error = rs.iter().zip(&a).map(|(r, x)| (r - x).abs()).sum::<f64>()
        + cs.iter().zip(&b).map(|(c, x)| (c - x).abs()).sum::<f64>();
    Ok(out)
}

/// Squared Euclidean cost between pixel centers of a `width x height` grid,
/// coordinates scaled by `1 / max(width - 1, height - 1)` into `[0, 1]²`.
pub fn grid_cost(width: usize, height: usize) -> Vec<f64> {
    let n = width * height;
    let scale = 1.0 / (width.max(height).saturating_sub(1).max(1)) as f64;
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        let (yi, xi) = ((i / width) as f64 * scale, (i % width) as f64 * scale);
        for j in 0..n {
            let (yj, xj) = ((j / width) as f64 * scale, (j % width) as f64 * scale);
            c[i * n + j] = (xi - xj).powi(2) + (yi - yj).powi(2);
        }
    }
    c
}
