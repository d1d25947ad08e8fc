//! Distortion evaluation, generalized Voronoi assignment and per-cell
//! center computation.
//!
//! The cost of reproducing a sample `s = [y_1 ⋯ y_L]` by a center `u` is
//! `Σ_ℓ λ_ℓ ‖u − y_ℓ‖^r`. Cells are formed by the argmin of this cost over
//! the codebook and each cell's center minimizes the summed cost, which is a
//! convex problem for every `r ≥ 1`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Codebook, DistortionSpec, MultiDataset, MultiSample, Partition};

/// Sample count above which assignment is split across worker threads.
const PAR_CHUNK: usize = 4096;

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `‖w‖^r` from `‖w‖²`.
#[inline]
pub(crate) fn norm_pow(sq: f64, r: f64) -> f64 {
    if r == 2.0 {
        sq
    } else {
        half_pow(sq, r)
    }
}

/// `q^{e/2}`, using multiplications and one square root when `e` is an integer.
#[inline]
pub(crate) fn half_pow(q: f64, e: f64) -> f64 {
    if e.fract() != 0.0 || e.abs() > 64.0 {
        return q.powf(0.5 * e);
    }
    let k = e.abs() as i32;
    let mut v = q.powi(k / 2);
    if k % 2 == 1 {
        v *= q.sqrt();
    }
    if e < 0.0 {
        1.0 / v
    } else {
        v
    }
}

#[inline]
pub(crate) fn cost_unchecked(u: &[f64], s: MultiSample<'_>, weights: &[f64], r: f64) -> f64 {
    s.iter()
        .zip(weights)
        .map(|(y, w)| w * norm_pow(sq_dist(u, y), r))
        .sum()
}

fn check_sample(u: &[f64], s: MultiSample<'_>, spec: &DistortionSpec) -> Result<()> {
    if u.len() != s.dim() {
        return Err(Error::DimensionMismatch(format!(
            "center has dimension {} but observations have dimension {}",
            u.len(),
            s.dim()
        )));
    }
    if s.observations() != spec.observations() {
        return Err(Error::DimensionMismatch(format!(
            "sample has {} observations but {} weights were given",
            s.observations(),
            spec.observations()
        )));
    }
    Ok(())
}

/// `Σ_ℓ λ_ℓ ‖u − y_ℓ‖^r`.
pub fn sample_cost(u: &[f64], s: MultiSample<'_>, spec: &DistortionSpec) -> Result<f64> {
    check_sample(u, s, spec)?;
    Ok(cost_unchecked(u, s, spec.weights(), spec.r()))
}

/// The weighted average `z = (1/c1) Σ_ℓ λ_ℓ y_ℓ`.
pub fn weighted_average(s: MultiSample<'_>, spec: &DistortionSpec) -> Vec<f64> {
    let mut z = vec![0.0; s.dim()];
    for (y, w) in s.iter().zip(spec.weights()) {
        for (zj, yj) in z.iter_mut().zip(y) {
            *zj += w * yj;
        }
    }
    let c1 = spec.c1();
    z.iter_mut().for_each(|zj| *zj /= c1);
    z
}

/// Per-sample constant of the squared-error decomposition:
/// `Σ_ℓ λ_ℓ ‖y_ℓ‖² − (1/c1) ‖Σ_ℓ λ_ℓ y_ℓ‖²`.
pub fn r2_offset(s: MultiSample<'_>, spec: &DistortionSpec) -> f64 {
    let z = weighted_average(s, spec);
    let c1 = spec.c1();
    let energy: f64 = s
        .iter()
        .zip(spec.weights())
        .map(|(y, w)| w * y.iter().map(|v| v * v).sum::<f64>())
        .sum();
    energy - c1 * z.iter().map(|v| v * v).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellAssignment {
    pub labels: Vec<usize>,
    pub per_sample_cost: Vec<f64>,
}

impl CellAssignment {
    /// Mean per-sample cost, summed in sample order.
    pub fn distortion(&self) -> f64 {
        self.per_sample_cost.iter().sum::<f64>() / self.per_sample_cost.len() as f64
    }

    /// Sample indices of each of the `n` cells.
    pub fn cells(&self, n: usize) -> Vec<Vec<usize>> {
        let mut cells = vec![Vec::new(); n];
        for (i, &k) in self.labels.iter().enumerate() {
            cells[k].push(i);
        }
        cells
    }

    pub fn partition(&self, n: usize) -> Result<Partition> {
        Partition::with_clusters(self.labels.clone(), n)
    }
}

#[inline]
fn nearest(cb: &Codebook, s: MultiSample<'_>, weights: &[f64], r: f64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, u) in cb.centers().enumerate() {
        let c = cost_unchecked(u, s, weights, r);
        if c < best.1 {
            best = (k, c);
        }
    }
    best
}

/// Maps every sample to the center of lowest cost, ties going to the lowest
/// index. Work is chunked over threads for large inputs; the result does not
/// depend on the number of workers.
pub fn assign(cb: &Codebook, ds: &MultiDataset, spec: &DistortionSpec) -> Result<CellAssignment> {
    spec.check_dataset(ds)?;
    if cb.dim() != ds.dim() {
        return Err(Error::DimensionMismatch(format!(
            "codebook has dimension {} but dataset has dimension {}",
            cb.dim(),
            ds.dim()
        )));
    }
    let (weights, r) = (spec.weights(), spec.r());
    let m = ds.len();
    let mut labels = vec![0; m];
    let mut costs = vec![0.0; m];
    let work = |offset: usize, labels: &mut [usize], costs: &mut [f64]| {
        for (j, (label, cost)) in labels.iter_mut().zip(costs.iter_mut()).enumerate() {
            let (k, c) = nearest(cb, ds.sample(offset + j), weights, r);
            *label = k;
            *cost = c;
        }
    };
    if m > PAR_CHUNK {
        labels
            .par_chunks_mut(PAR_CHUNK)
            .zip(costs.par_chunks_mut(PAR_CHUNK))
            .enumerate()
            .for_each(|(c, (l, w))| work(c * PAR_CHUNK, l, w));
    } else {
        work(0, &mut labels, &mut costs);
    }
    Ok(CellAssignment {
        labels,
        per_sample_cost: costs,
    })
}

/// `(1/m) Σ_i min_k Σ_ℓ λ_ℓ ‖u_k − y_{ℓ,i}‖^r`.
pub fn empirical_distortion(cb: &Codebook, ds: &MultiDataset, spec: &DistortionSpec) -> Result<f64> {
    Ok(assign(cb, ds, spec)?.distortion())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterSolution {
    pub center: Vec<f64>,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

fn objective_of(u: &[f64], cell: &[MultiSample<'_>], spec: &DistortionSpec) -> f64 {
    cell.iter()
        .map(|s| cost_unchecked(u, *s, spec.weights(), spec.r()))
        .sum()
}

/// Gradient of the exact objective. Terms at zero distance contribute nothing.
fn exact_gradient(u: &[f64], cell: &[MultiSample<'_>], spec: &DistortionSpec) -> Vec<f64> {
    let r = spec.r();
    let mut g = vec![0.0; u.len()];
    for s in cell {
        for (y, w) in s.iter().zip(spec.weights()) {
            let sq = sq_dist(u, y);
            if sq == 0.0 {
                continue;
            }
            let coef = w * r * sq.powf(0.5 * (r - 2.0));
            for ((gj, uj), yj) in g.iter_mut().zip(u).zip(y) {
                *gj += coef * (uj - yj);
            }
        }
    }
    g
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Global minimizer of `‖x1 − u‖^r + λ2 ‖x2 − u‖^r`, which lies at
/// `(x1 + α x2)/(1 + α)` with `α = λ2^{1/(r−1)}`.
pub fn lemma1_center(x1: &[f64], x2: &[f64], lambda2: f64, r: f64) -> Result<CenterSolution> {
    if !(r.is_finite() && r > 1.0) {
        return Err(Error::InvalidPower(r));
    }
    if !(lambda2.is_finite() && lambda2 > 0.0) {
        return Err(Error::InvalidWeights(format!("lambda2 = {lambda2} is not positive")));
    }
    if x1.len() != x2.len() || x1.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "points of dimension {} and {}",
            x1.len(),
            x2.len()
        )));
    }
    let alpha = lambda2.powf(1.0 / (r - 1.0));
    let t = alpha / (1.0 + alpha);
    let center: Vec<f64> = x1.iter().zip(x2).map(|(a, b)| a + t * (b - a)).collect();
    let objective = (alpha / (1.0 + alpha)).powf(r - 1.0) * norm_pow(sq_dist(x1, x2), r);
    let spec = DistortionSpec::new(r, vec![1.0, lambda2])?;
    let pair = [x1, x2].concat();
    let s = MultiSample::new(&pair, x1.len())?;
    let gradient_norm = norm(&exact_gradient(&center, &[s], &spec));
    Ok(CenterSolution {
        center,
        objective,
        gradient_norm,
        iterations: 0,
    })
}

/// Squared-error cell center: the mean of the per-sample weighted averages.
pub fn center_r2(cell: &[MultiSample<'_>], spec: &DistortionSpec) -> Result<CenterSolution> {
    if spec.r() != 2.0 {
        return Err(Error::InvalidPower(spec.r()));
    }
    let first = cell.first().ok_or(Error::EmptyCell)?;
    let d = first.dim();
    for s in cell {
        check_sample(&vec![0.0; d], *s, spec)?;
    }
    let mut center = vec![0.0; d];
    for s in cell {
        for (c, z) in center.iter_mut().zip(weighted_average(*s, spec)) {
            *c += z;
        }
    }
    let len = cell.len() as f64;
    center.iter_mut().for_each(|c| *c /= len);
    Ok(CenterSolution {
        objective: objective_of(&center, cell, spec),
        gradient_norm: norm(&exact_gradient(&center, cell, spec)),
        center,
        iterations: 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Stop once `‖∇‖ ≤ tol · (1 + Σ λ r ‖u − y‖^{r−1})`.
    pub tol: f64,
    pub max_iters: usize,
    /// Smoothing added to squared distances inside the weights.
    pub epsilon: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iters: 10_000,
            epsilon: 1e-12,
        }
    }
}

struct Smoothed<'a, 'b> {
    cell: &'a [MultiSample<'b>],
    weights: &'a [f64],
    r: f64,
    eps: f64,
    d: usize,
}

struct Local {
    value: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
    weight_sum: f64,
    scale: f64,
}

impl Smoothed<'_, '_> {
    fn value(&self, u: &[f64]) -> f64 {
        let mut f = 0.0;
        for s in self.cell {
            for (y, w) in s.iter().zip(self.weights) {
                f += w * half_pow(sq_dist(u, y) + self.eps, self.r);
            }
        }
        f
    }

    fn local(&self, u: &[f64]) -> Local {
        let (d, r) = (self.d, self.r);
        let mut out = Local {
            value: 0.0,
            grad: vec![0.0; d],
            hess: vec![0.0; d * d],
            weight_sum: 0.0,
            scale: 0.0,
        };
        let mut diff = vec![0.0; d];
        for s in self.cell {
            for (y, w) in s.iter().zip(self.weights) {
                for ((dj, uj), yj) in diff.iter_mut().zip(u).zip(y) {
                    *dj = uj - yj;
                }
                let q = diff.iter().map(|x| x * x).sum::<f64>() + self.eps;
                let base = half_pow(q, r - 2.0);
                let wt = w * r * base;
                out.value += w * base * q;
                out.scale += wt * q.sqrt();
                out.weight_sum += wt;
                let curv = w * r * (r - 2.0) * base / q;
                for a in 0..d {
                    out.grad[a] += wt * diff[a];
                    out.hess[a * d + a] += wt;
                    for b in 0..d {
                        out.hess[a * d + b] += curv * diff[a] * diff[b];
                    }
                }
            }
        }
        out
    }
}

/// Solves `h x = rhs` for symmetric positive definite `h` by Cholesky.
fn cholesky_solve(h: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let d = rhs.len();
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut sum = h[i * d + j];
            for k in 0..j {
                sum -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(sum > 0.0) || !sum.is_finite() {
                    return None;
                }
                l[i * d + i] = sum.sqrt();
            } else {
                l[i * d + j] = sum / l[j * d + j];
            }
        }
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut sum = rhs[i];
        for k in 0..i {
            sum -= l[i * d + k] * y[k];
        }
        y[i] = sum / l[i * d + i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut sum = y[i];
        for k in i + 1..d {
            sum -= l[k * d + i] * x[k];
        }
        x[i] = sum / l[i * d + i];
    }
    Some(x)
}

/// Minimizes `u ↦ Σ_{i∈cell} Σ_ℓ λ_ℓ ‖u − y_{ℓ,i}‖^r` starting from the mean
/// of the per-sample weighted averages.
pub fn center_general(
    cell: &[MultiSample<'_>],
    spec: &DistortionSpec,
    tol: f64,
) -> Result<CenterSolution> {
    let first = cell.first().ok_or(Error::EmptyCell)?;
    let mut start = vec![0.0; first.dim()];
    for s in cell {
        check_sample(&start, *s, spec)?;
        for (c, z) in start.iter_mut().zip(weighted_average(*s, spec)) {
            *c += z;
        }
    }
    let len = cell.len() as f64;
    start.iter_mut().for_each(|c| *c /= len);
    let opts = SolverOptions {
        tol,
        ..SolverOptions::default()
    };
    center_general_from(cell, spec, &start, &opts)
}

/// Damped reweighted Newton iteration on the smoothed objective
/// `Σ λ (‖u − y‖² + ε)^{r/2}`.
///
/// Each step solves the reweighted system with the full Hessian, falling back
/// to the scalar-weight (Weiszfeld-type) step when that system is not
/// positive definite. Steps are halved until the smoothed objective does not
/// increase, so iterates never get worse than `start`.
pub fn center_general_from(
    cell: &[MultiSample<'_>],
    spec: &DistortionSpec,
    start: &[f64],
    opts: &SolverOptions,
) -> Result<CenterSolution> {
    if cell.is_empty() {
        return Err(Error::EmptyCell);
    }
    for s in cell {
        check_sample(start, *s, spec)?;
    }
    let problem = Smoothed {
        cell,
        weights: spec.weights(),
        r: spec.r(),
        eps: opts.epsilon,
        d: start.len(),
    };
    let mut u = start.to_vec();
    let mut iterations = 0;
    let mut converged = false;
    let mut grad_norm;
    loop {
        let local = problem.local(&u);
        grad_norm = norm(&local.grad);
        if grad_norm <= opts.tol * (1.0 + local.scale) {
            converged = true;
            break;
        }
        if iterations >= opts.max_iters {
            break;
        }
        iterations += 1;
        let neg_grad: Vec<f64> = local.grad.iter().map(|g| -g).collect();
        let irls: Vec<f64> = neg_grad.iter().map(|g| g / local.weight_sum).collect();
        let newton = cholesky_solve(&local.hess, &neg_grad);
        let mut moved = false;
        for dir in newton.iter().chain(std::iter::once(&irls)) {
            let mut t = 1.0;
            for _ in 0..60 {
                let cand: Vec<f64> = u.iter().zip(dir).map(|(a, p)| a + t * p).collect();
                let value = problem.value(&cand);
                // near the optimum the objective is flat to rounding; then
                // the gradient decides
                let flat = value <= local.value + 8.0 * f64::EPSILON * local.value.abs();
                if value <= local.value || (flat && norm(&problem.local(&cand).grad) < grad_norm) {
                    moved = cand != u;
                    u = cand;
                    break;
                }
                t *= 0.5;
            }
            if moved {
                break;
            }
        }
        if !moved {
            // no representable descent step remains
            let local = problem.local(&u);
            grad_norm = norm(&local.grad);
            converged = grad_norm <= 1e3 * opts.tol * (1.0 + local.scale);
            break;
        }
    }
    let solution = CenterSolution {
        objective: objective_of(&u, cell, spec),
        center: u,
        gradient_norm: grad_norm,
        iterations,
    };
    if converged {
        Ok(solution)
    } else {
        Err(Error::NoConvergence(Box::new(solution)))
    }
}
