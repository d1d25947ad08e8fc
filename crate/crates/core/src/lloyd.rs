//! Generalized Lloyd iteration: alternate generalized-Voronoi assignment and
//! convex per-cell center updates until the average distortion stops
//! decreasing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Codebook, DistortionSpec, FitInfo, MultiDataset, MultiSample};
use crate::quantizer::{
    assign, center_general_from, center_r2, cost_unchecked, lemma1_center, weighted_average,
    CellAssignment, CenterSolution, SolverOptions,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub n: usize,
    pub max_iters: usize,
    /// Stop once the relative distortion decrease falls below this.
    pub rel_tol: f64,
    pub restarts: usize,
    pub seed: u64,
}

impl FitOptions {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            max_iters: 500,
            rel_tol: 1e-9,
            restarts: 10,
            seed,
        }
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidOption("n must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidOption("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidOption("rel_tol must be positive".into()));
        }
        if self.restarts == 0 {
            return Err(Error::InvalidOption("restarts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FitHistory {
    /// Average distortion after the initial assignment and after every
    /// completed iteration.
    pub distortions: Vec<f64>,
    /// Flattened centers matching each entry of `distortions`.
    pub trajectory: Vec<Vec<f64>>,
    pub iterations: usize,
    /// Index of the restart that produced the returned codebook.
    pub restart: usize,
    /// Relative increase of the step that stopped the run, if one did; such
    /// a step is discarded rather than recorded.
    pub rejected_increase: f64,
}

/// Largest discarded relative increase still attributed to rounding.
pub const ROUNDING_INCREASE: f64 = 1e-12;

impl FitHistory {
    pub fn is_non_increasing(&self) -> bool {
        self.distortions.windows(2).all(|w| w[1] <= w[0])
    }

    /// Non-increasing, and any discarded step was a rounding-level blip.
    pub fn is_monotone(&self) -> bool {
        self.is_non_increasing() && self.rejected_increase <= ROUNDING_INCREASE
    }
}

/// Per-sample minimizers and their costs.
struct Representatives {
    points: Vec<Vec<f64>>,
    costs: Vec<f64>,
}

fn accept_best(res: Result<CenterSolution>) -> Result<CenterSolution> {
    match res {
        Err(Error::NoConvergence(best)) => Ok(*best),
        other => other,
    }
}

fn representative(s: MultiSample<'_>, spec: &DistortionSpec) -> Result<Vec<f64>> {
    let (r, w) = (spec.r(), spec.weights());
    if s.observations() == 1 {
        return Ok(s.observation(0).to_vec());
    }
    if r == 2.0 {
        return Ok(weighted_average(s, spec));
    }
    if s.observations() == 2 {
        let (x1, x2) = (s.observation(0), s.observation(1));
        if r > 1.0 {
            return Ok(lemma1_center(x1, x2, w[1] / w[0], r)?.center);
        }
        // r = 1: the heavier observation wins, any segment point on a tie
        return Ok(if w[1] > w[0] {
            x2.to_vec()
        } else if w[1] < w[0] {
            x1.to_vec()
        } else {
            x1.iter().zip(x2).map(|(a, b)| 0.5 * (a + b)).collect()
        });
    }
    let start = weighted_average(s, spec);
    Ok(accept_best(center_general_from(&[s], spec, &start, &SolverOptions::default()))?.center)
}

fn compute_representatives(ds: &MultiDataset, spec: &DistortionSpec) -> Result<Representatives> {
    let points = ds
        .samples()
        .map(|s| representative(s, spec))
        .collect::<Result<Vec<_>>>()?;
    let costs = ds
        .samples()
        .zip(&points)
        .map(|(s, b)| cost_unchecked(b, s, spec.weights(), spec.r()))
        .collect();
    Ok(Representatives { points, costs })
}

/// The per-sample optimum `b_i = argmin_u Σ_ℓ λ_ℓ ‖u − y_{ℓ,i}‖^r`.
pub fn representative_points(ds: &MultiDataset, spec: &DistortionSpec) -> Result<Vec<Vec<f64>>> {
    spec.check_dataset(ds)?;
    Ok(compute_representatives(ds, spec)?.points)
}

fn check_fit(ds: &MultiDataset, spec: &DistortionSpec, opts: &FitOptions) -> Result<()> {
    opts.validate()?;
    spec.check_dataset(ds)?;
    if opts.n > ds.len() {
        return Err(Error::TooManyCenters {
            n: opts.n,
            m: ds.len(),
        });
    }
    Ok(())
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    rng.random::<f64>()
}

fn seed_centers(
    ds: &MultiDataset,
    spec: &DistortionSpec,
    reps: &Representatives,
    n: usize,
    seed: u64,
) -> Result<Codebook> {
    let m = ds.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let excess = |i: usize, u: &[f64]| {
        (cost_unchecked(u, ds.sample(i), spec.weights(), spec.r()) - reps.costs[i]).max(0.0)
    };
    let first = ((unit(&mut rng) * m as f64) as usize).min(m - 1);
    let mut chosen = vec![false; m];
    chosen[first] = true;
    let mut picks = vec![first];
    let mut weight: Vec<f64> = (0..m).map(|i| excess(i, &reps.points[first])).collect();
    while picks.len() < n {
        let total: f64 = weight.iter().sum();
        let u = unit(&mut rng);
        let next = if total > 0.0 && total.is_finite() {
            let target = u * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, w) in weight.iter().enumerate() {
                acc += w;
                if acc > target && *w > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            pick.or_else(|| weight.iter().rposition(|w| *w > 0.0))
                .expect("positive total implies a positive weight")
        } else {
            // every remaining sample is already reproduced at its optimum
            let free: Vec<usize> = (0..m).filter(|i| !chosen[*i]).collect();
            free[((u * free.len() as f64) as usize).min(free.len() - 1)]
        };
        chosen[next] = true;
        picks.push(next);
        for (i, w) in weight.iter_mut().enumerate() {
            *w = w.min(excess(i, &reps.points[next]));
        }
    }
    let mut cb = Codebook::new(picks.iter().map(|&i| reps.points[i].clone()).collect())?;
    cb.fit_info.seed = seed;
    Ok(cb)
}

/// Distance-weighted seeding over the representative points. The first center
/// is drawn uniformly; each further one with probability proportional to the
/// excess cost `min_k cost(u_k, s_i) − cost(b_i, s_i)` of every sample.
pub fn init_codebook(ds: &MultiDataset, spec: &DistortionSpec, opts: &FitOptions) -> Result<Codebook> {
    check_fit(ds, spec, opts)?;
    let reps = compute_representatives(ds, spec)?;
    seed_centers(ds, spec, &reps, opts.n, opts.seed)
}

/// Moves each empty center onto the representative of the worst-served sample.
fn repair_empty(
    cb: &mut Codebook,
    a: &mut CellAssignment,
    ds: &MultiDataset,
    spec: &DistortionSpec,
    reps: &Representatives,
) -> Result<()> {
    for _ in 0..cb.len() {
        let mut counts = vec![0usize; cb.len()];
        a.labels.iter().for_each(|&k| counts[k] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            break;
        };
        let mut worst = 0;
        for (i, c) in a.per_sample_cost.iter().enumerate() {
            if *c > a.per_sample_cost[worst] {
                worst = i;
            }
        }
        if a.per_sample_cost[worst] <= reps.costs[worst] {
            break;
        }
        cb.set_center(empty, &reps.points[worst]);
        *a = assign(cb, ds, spec)?;
    }
    Ok(())
}

fn solve_cell(
    ds: &MultiDataset,
    spec: &DistortionSpec,
    members: &[usize],
    current: &[f64],
) -> Result<Vec<f64>> {
    let cell: Vec<MultiSample<'_>> = members.iter().map(|&i| ds.sample(i)).collect();
    let sol = if spec.r() == 2.0 {
        center_r2(&cell, spec)?
    } else {
        accept_best(center_general_from(&cell, spec, current, &SolverOptions::default()))?
    };
    Ok(sol.center)
}

fn lloyd(
    ds: &MultiDataset,
    spec: &DistortionSpec,
    reps: &Representatives,
    mut cb: Codebook,
    opts: &FitOptions,
) -> Result<(Codebook, FitHistory)> {
    let n = cb.len();
    let mut a = assign(&cb, ds, spec)?;
    repair_empty(&mut cb, &mut a, ds, spec, reps)?;
    let mut history = FitHistory {
        distortions: vec![a.distortion()],
        trajectory: vec![cb.as_flat().to_vec()],
        ..FitHistory::default()
    };
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let cells = a.cells(n);
        let updates = cells
            .par_iter()
            .enumerate()
            .map(|(k, members)| {
                if members.is_empty() {
                    Ok(None)
                } else {
                    solve_cell(ds, spec, members, cb.center(k)).map(Some)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut next = cb.clone();
        for (k, u) in updates.into_iter().enumerate() {
            if let Some(u) = u {
                next.set_center(k, &u);
            }
        }
        let mut next_a = assign(&next, ds, spec)?;
        repair_empty(&mut next, &mut next_a, ds, spec, reps)?;
        let prev = *history.distortions.last().expect("history starts non-empty");
        let cur = next_a.distortion();
        if cur > prev {
            history.rejected_increase = (cur - prev) / prev;
            break;
        }
        cb = next;
        a = next_a;
        history.distortions.push(cur);
        history.trajectory.push(cb.as_flat().to_vec());
        if prev - cur <= opts.rel_tol * prev {
            break;
        }
    }
    history.iterations = iterations;
    cb.fit_info = FitInfo {
        distortion: *history.distortions.last().expect("non-empty"),
        iterations,
        seed: opts.seed,
    };
    Ok((cb, history))
}

/// Single generalized Lloyd run from the seeded initial codebook.
pub fn fit(ds: &MultiDataset, spec: &DistortionSpec, opts: &FitOptions) -> Result<(Codebook, FitHistory)> {
    check_fit(ds, spec, opts)?;
    let reps = compute_representatives(ds, spec)?;
    let init = seed_centers(ds, spec, &reps, opts.n, opts.seed)?;
    lloyd(ds, spec, &reps, init, opts)
}

/// Generalized Lloyd run from a caller-supplied codebook; `opts.n` is ignored.
pub fn fit_from(
    ds: &MultiDataset,
    spec: &DistortionSpec,
    initial: Codebook,
    opts: &FitOptions,
) -> Result<(Codebook, FitHistory)> {
    let opts = FitOptions {
        n: initial.len(),
        ..*opts
    };
    check_fit(ds, spec, &opts)?;
    if initial.dim() != ds.dim() {
        return Err(Error::DimensionMismatch(format!(
            "initial codebook has dimension {} but dataset has dimension {}",
            initial.dim(),
            ds.dim()
        )));
    }
    let reps = compute_representatives(ds, spec)?;
    lloyd(ds, spec, &reps, initial, &opts)
}

/// Best of `opts.restarts` runs seeded `seed, seed+1, …`; ties on distortion
/// go to the lowest restart index.
pub fn fit_multistart(
    ds: &MultiDataset,
    spec: &DistortionSpec,
    opts: &FitOptions,
) -> Result<(Codebook, FitHistory)> {
    Ok(best_run(fit_all_restarts(ds, spec, opts)?).expect("restarts >= 1"))
}

/// Lowest-distortion run; ties go to the lowest restart index.
pub fn best_run(runs: Vec<(Codebook, FitHistory)>) -> Option<(Codebook, FitHistory)> {
    runs.into_iter().min_by(|a, b| {
        a.0.fit_info
            .distortion
            .total_cmp(&b.0.fit_info.distortion)
            .then(a.1.restart.cmp(&b.1.restart))
    })
}

/// Every restart's result, in restart order.
pub fn fit_all_restarts(
    ds: &MultiDataset,
    spec: &DistortionSpec,
    opts: &FitOptions,
) -> Result<Vec<(Codebook, FitHistory)>> {
    check_fit(ds, spec, opts)?;
    let reps = compute_representatives(ds, spec)?;
    (0..opts.restarts)
        .into_par_iter()
        .map(|j| {
            let run = FitOptions {
                seed: opts.seed.wrapping_add(j as u64),
                ..*opts
            };
            let init = seed_centers(ds, spec, &reps, run.n, run.seed)?;
            let (cb, mut hist) = lloyd(ds, spec, &reps, init, &run)?;
            hist.restart = j;
            Ok((cb, hist))
        })
        .collect()
}
