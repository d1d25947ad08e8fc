//! High-resolution approximations of the optimal distortion for large codebooks,
//! optimal point densities, and codebooks built from them by inverse transform
//! sampling.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Codebook, DistortionSpec, MultiDataset};
use crate::quadrature::{integrate_pieces, Quadrature};
use crate::quantizer::r2_offset;

/// Default absolute tolerance for outer integrals.
pub const QUAD_TOL: f64 = 1e-8;
const INNER_TOL: f64 = 1e-11;
const CELLS: usize = 4096;
const MAX_SUM_TERMS: usize = 16;

/// Normalized second moment of the best known lattice cell.
pub fn kappa_const(d: usize) -> Result<f64> {
    match d {
        0 => Err(Error::InvalidOption("dimension must be at least 1".into())),
        1 => Ok(1.0 / 12.0),
        2 => Ok(5.0 / (18.0 * 3f64.sqrt())),
        _ => Err(Error::UnknownConstant(d)),
    }
}

/// `E|X1 - X2|^r` for independent uniform `[0, 1]` variables.
pub fn expected_pair_moment(r: f64) -> f64 {
    2.0 / ((r + 1.0) * (r + 2.0))
}

fn quad(tol: f64, panels: usize) -> Quadrature {
    Quadrature {
        abs_tol: tol,
        max_panels: panels.max(4000),
    }
}

/// Regularly spaced tabulated density in one coordinate per source,
/// interpolated linearly (one source) or bilinearly (two sources).
#[derive(Debug, Clone, PartialEq)]
pub struct GridDensity {
    lo: f64,
    hi: f64,
    nodes: usize,
    values: Vec<f64>,
}

impl GridDensity {
    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    /// Values in row-major order, first source varying slowest.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.nodes - 1) as f64
    }

    fn node(&self, i: usize) -> f64 {
        if i + 1 == self.nodes {
            self.hi
        } else {
            self.lo + i as f64 * self.step()
        }
    }

    fn breaks(&self) -> Vec<f64> {
        (0..self.nodes).map(|i| self.node(i)).collect()
    }

    fn locate(&self, x: f64) -> Option<(usize, f64)> {
        if !(x >= self.lo && x <= self.hi) {
            return None;
        }
        let t = (x - self.lo) / self.step();
        let i = (t.floor() as usize).min(self.nodes - 2);
        Some((i, (t - i as f64).clamp(0.0, 1.0)))
    }

    fn eval1(&self, x: f64) -> f64 {
        match self.locate(x) {
            Some((i, t)) => self.values[i] * (1.0 - t) + self.values[i + 1] * t,
            None => 0.0,
        }
    }

    fn eval2(&self, x1: f64, x2: f64) -> f64 {
        let (Some((i, s)), Some((j, t))) = (self.locate(x1), self.locate(x2)) else {
            return 0.0;
        };
        let n = self.nodes;
        let v = |a: usize, b: usize| self.values[a * n + b];
        (1.0 - s) * ((1.0 - t) * v(i, j) + t * v(i, j + 1))
            + s * ((1.0 - t) * v(i + 1, j) + t * v(i + 1, j + 1))
    }

    // Exact for the interpolant.
    fn mass(&self, sources: usize) -> f64 {
        let h = self.step();
        let w = |i: usize| if i == 0 || i + 1 == self.nodes { 0.5 } else { 1.0 };
        let n = self.nodes;
        if sources == 1 {
            h * (0..n).map(|i| w(i) * self.values[i]).sum::<f64>()
        } else {
            let mut s = 0.0;
            for i in 0..n {
                for j in 0..n {
                    s += w(i) * w(j) * self.values[i * n + j];
                }
            }
            h * h * s
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DensityKind {
    /// Independent sources, each uniform on the unit cube.
    UniformCube,
    /// One source whose coordinates are independent copies of
    /// `Σ_j a_j U_j` with `U_j` independent uniform on `[0, 1]`.
    UniformSum { coefficients: Vec<f64> },
    /// Tabulated joint density of one or two scalar sources.
    Grid(GridDensity),
}

/// Joint density of the sources, each taking values in `R^dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityModel {
    dim: usize,
    sources: usize,
    kind: DensityKind,
}

impl DensityModel {
    pub fn uniform_cube(dim: usize, sources: usize) -> Result<Self> {
        if dim == 0 || sources == 0 {
            return Err(Error::InvalidDensity(
                "dimension and source count must be positive".into(),
            ));
        }
        Ok(Self {
            dim,
            sources,
            kind: DensityKind::UniformCube,
        })
    }

    pub fn uniform_sum(dim: usize, coefficients: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDensity("dimension must be positive".into()));
        }
        if coefficients.is_empty() || coefficients.len() > MAX_SUM_TERMS {
            return Err(Error::InvalidDensity(format!(
                "need between 1 and {MAX_SUM_TERMS} coefficients"
            )));
        }
        if coefficients.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::InvalidDensity("coefficients must be positive".into()));
        }
        Ok(Self {
            dim,
            sources: 1,
            kind: DensityKind::UniformSum { coefficients },
        })
    }

    /// Tabulated scalar density on `[lo, hi]^sources`. `values` holds
    /// `nodes^sources` samples in row-major order.
    pub fn grid(sources: usize, lo: f64, hi: f64, values: Vec<f64>) -> Result<Self> {
        let nodes = match sources {
            1 => values.len(),
            2 => {
                let n = (values.len() as f64).sqrt().round() as usize;
                if n * n != values.len() {
                    return Err(Error::InvalidDensity(
                        "two-source grid must be square".into(),
                    ));
                }
                n
            }
            _ => {
                return Err(Error::Unsupported(
                    "tabulated densities support one or two sources".into(),
                ))
            }
        };
        if nodes < 2 {
            return Err(Error::InvalidDensity("grid needs at least two nodes".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidDensity(format!("bad support [{lo}, {hi}]")));
        }
        if values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidDensity(
                "values must be finite and nonnegative".into(),
            ));
        }
        let g = GridDensity {
            lo,
            hi,
            nodes,
            values,
        };
        let mass = g.mass(sources);
        if (mass - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidDensity(format!(
                "density integrates to {mass}, not 1"
            )));
        }
        Ok(Self {
            dim: 1,
            sources,
            kind: DensityKind::Grid(g),
        })
    }

    /// Reads a tabulated density. Two columns `(x, value)` give one source;
    /// three columns `(x1, x2, value)` give a joint density of two sources.
    /// A non-numeric first row is treated as a header.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let rows = read_numeric_rows(path)?;
        let Some(first) = rows.first() else {
            return Err(Error::Empty);
        };
        let width = first.1.len();
        let grid_error = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: msg.to_string(),
        };
        match width {
            2 => {
                let xs: Vec<f64> = rows.iter().map(|r| r.1[0]).collect();
                check_regular(&xs).map_err(|m| grid_error(&m))?;
                let values = rows.iter().map(|r| r.1[1]).collect();
                Self::grid(1, xs[0], xs[xs.len() - 1], values)
            }
            3 => {
                let mut axis: Vec<f64> = rows.iter().map(|r| r.1[0]).collect();
                axis.sort_by(f64::total_cmp);
                axis.dedup();
                check_regular(&axis).map_err(|m| grid_error(&m))?;
                let n = axis.len();
                if rows.len() != n * n {
                    return Err(grid_error("joint grid is incomplete"));
                }
                let index = |x: f64| axis.binary_search_by(|a| a.total_cmp(&x)).ok();
                let mut values = vec![f64::NAN; n * n];
                for (line, row) in &rows {
                    let (Some(i), Some(j)) = (index(row[0]), index(row[1])) else {
                        return Err(Error::Parse {
                            path: path.to_path_buf(),
                            line: *line,
                            message: "coordinate is off the grid".into(),
                        });
                    };
                    values[i * n + j] = row[2];
                }
                if values.iter().any(|v| v.is_nan()) {
                    return Err(grid_error("joint grid has duplicate points"));
                }
                Self::grid(2, axis[0], axis[n - 1], values)
            }
            w => Err(grid_error(&format!("expected 2 or 3 columns, found {w}"))),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sources(&self) -> usize {
        self.sources
    }

    pub fn kind(&self) -> &DensityKind {
        &self.kind
    }

    /// Range of every coordinate of every source.
    pub fn bounds(&self) -> (f64, f64) {
        match &self.kind {
            DensityKind::UniformCube => (0.0, 1.0),
            DensityKind::UniformSum { coefficients } => (0.0, coefficients.iter().sum()),
            DensityKind::Grid(g) => (g.lo, g.hi),
        }
    }

    /// Density at `x`, the concatenation of all source vectors.
    pub fn pdf(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim * self.sources);
        match &self.kind {
            DensityKind::UniformCube => {
                if x.iter().all(|v| (0.0..=1.0).contains(v)) {
                    1.0
                } else {
                    0.0
                }
            }
            DensityKind::UniformSum { coefficients } => {
                x.iter().map(|&v| box_spline(v, coefficients)).product()
            }
            DensityKind::Grid(g) => match self.sources {
                1 => g.eval1(x[0]),
                _ => g.eval2(x[0], x[1]),
            },
        }
    }

    // Kinks of the one-coordinate marginal.
    fn marginal_breaks(&self) -> Vec<f64> {
        match &self.kind {
            DensityKind::UniformCube => vec![0.0, 1.0],
            DensityKind::UniformSum { coefficients } => subset_sums(coefficients),
            DensityKind::Grid(g) => g.breaks(),
        }
    }

    /// Density of `Z = Σ λ_ℓ X_ℓ / Σ λ_ℓ`.
    pub fn average_density(&self, weights: &[f64]) -> Result<DensityModel> {
        if weights.len() != self.sources {
            return Err(Error::DimensionMismatch(format!(
                "{} weights for {} sources",
                weights.len(),
                self.sources
            )));
        }
        if self.sources == 1 {
            return Ok(self.clone());
        }
        let c1: f64 = weights.iter().sum();
        match &self.kind {
            DensityKind::UniformCube => {
                Self::uniform_sum(self.dim, weights.iter().map(|w| w / c1).collect())
            }
            DensityKind::Grid(g) => {
                let a = weights[0] / c1;
                let b = weights[1] / c1;
                let q = quad(INNER_TOL, 8 * g.nodes);
                let breaks = g.breaks();
                let mut values = Vec::with_capacity(g.nodes);
                for k in 0..g.nodes {
                    let z = g.node(k);
                    // x2 = (z - a x1) / b must stay in [lo, hi]
                    let x_lo = ((z - b * g.hi) / a).max(g.lo);
                    let x_hi = ((z - b * g.lo) / a).min(g.hi);
                    if x_lo >= x_hi {
                        values.push(0.0);
                        continue;
                    }
                    let mut pts = vec![x_lo];
                    for &t in &breaks {
                        for s in [t, (z - b * t) / a] {
                            if s > x_lo && s < x_hi {
                                pts.push(s);
                            }
                        }
                    }
                    pts.push(x_hi);
                    pts.sort_by(f64::total_cmp);
                    let v = integrate_pieces(|x1| g.eval2(x1, (z - a * x1) / b) / b, &pts, &q)?;
                    values.push(v.value.max(0.0));
                }
                let mut out = GridDensity {
                    lo: g.lo,
                    hi: g.hi,
                    nodes: g.nodes,
                    values,
                };
                let mass = out.mass(1);
                if !(mass > 0.0) {
                    return Err(Error::InvalidDensity("average has no mass".into()));
                }
                out.values.iter_mut().for_each(|v| *v /= mass);
                Ok(Self {
                    dim: 1,
                    sources: 1,
                    kind: DensityKind::Grid(out),
                })
            }
            DensityKind::UniformSum { .. } => unreachable!("single source"),
        }
    }
}

fn read_numeric_rows(path: &Path) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    let mut width = None;
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(idx + 1, |p| p.line() as usize);
        let parsed: std::result::Result<Vec<f64>, _> =
            rec.iter().map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if idx == 0 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: e.to_string(),
                })
            }
        };
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::RaggedRows {
                    path: path.to_path_buf(),
                    line,
                    expected: w,
                    found: values.len(),
                })
            }
            _ => {}
        }
        rows.push((line, values));
    }
    Ok(rows)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(std::io::Error::new(
            io.kind(),
            format!("{}: {io}", path.display()),
        )),
        kind => Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

fn check_regular(xs: &[f64]) -> std::result::Result<(), String> {
    if xs.len() < 2 {
        return Err("grid needs at least two nodes".into());
    }
    let h = (xs[xs.len() - 1] - xs[0]) / (xs.len() - 1) as f64;
    let span = xs[xs.len() - 1] - xs[0];
    for (i, &x) in xs.iter().enumerate() {
        if (x - (xs[0] + i as f64 * h)).abs() > 1e-9 * span.max(1.0) {
            return Err("grid coordinates are not regularly spaced and increasing".into());
        }
    }
    Ok(())
}

/// Density of `Σ a_j U_j` for independent uniform `[0, 1]` variables.
fn box_spline(z: f64, a: &[f64]) -> f64 {
    let total: f64 = a.iter().sum();
    if !(z >= 0.0 && z <= total) {
        return 0.0;
    }
    if a.len() == 1 {
        return 1.0 / a[0];
    }
    let l = a.len();
    let scale: f64 = a.iter().product::<f64>() * (1..l).map(|k| k as f64).product::<f64>();
    let mut s = 0.0;
    for mask in 0u32..(1 << l) {
        let shift: f64 = (0..l).filter(|j| mask >> j & 1 == 1).map(|j| a[j]).sum();
        let t = z - shift;
        if t > 0.0 {
            let term = t.powi(l as i32 - 1);
            if mask.count_ones() % 2 == 1 {
                s -= term;
            } else {
                s += term;
            }
        }
    }
    (s / scale).max(0.0)
}

fn subset_sums(a: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0];
    for &x in a {
        let more: Vec<f64> = sums.iter().map(|s| s + x).collect();
        sums.extend(more);
    }
    sums.sort_by(f64::total_cmp);
    sums.dedup_by(|x, y| (*x - *y).abs() <= 1e-15);
    sums
}

fn sorted_breaks(mut pts: Vec<f64>, lo: f64, hi: f64) -> Vec<f64> {
    pts.retain(|p| *p > lo && *p < hi);
    pts.push(lo);
    pts.push(hi);
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    pts
}

/// `(∫ f^p)^{1/p}` for a single-source density.
pub fn density_pnorm(f: &DensityModel, p: f64) -> Result<f64> {
    if f.sources != 1 {
        return Err(Error::InvalidDensity(format!(
            "expected one source, found {}",
            f.sources
        )));
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::InvalidOption(format!("p = {p} is not in (0, 1]")));
    }
    match &f.kind {
        DensityKind::UniformCube => Ok(1.0),
        DensityKind::UniformSum { coefficients } => {
            let breaks = subset_sums(coefficients);
            let q = quad(INNER_TOL, 0);
            let one = integrate_pieces(|z| box_spline(z, coefficients).powf(p), &breaks, &q)?;
            Ok(one.value.powf(f.dim as f64 / p))
        }
        DensityKind::Grid(g) => {
            let q = quad(INNER_TOL, 8 * g.nodes);
            let v = integrate_pieces(|z| g.eval1(z).powf(p), &g.breaks(), &q)?;
            Ok(v.value.powf(1.0 / p))
        }
    }
}

/// Constants of the high-resolution expansions. Fields that do not apply to
/// the distortion at hand are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HighResConstants {
    pub dim: usize,
    pub c1: f64,
    pub c2: Option<f64>,
    pub c3: Option<f64>,
    pub c4: Option<f64>,
    pub alpha: Option<f64>,
    pub kappa: Option<f64>,
}

pub enum ConstantSource<'a> {
    Dataset(&'a MultiDataset),
    Density(&'a DensityModel),
}

/// `c1 = Σλ` and the irreducible part
/// `c2 = E[Σλ‖X_ℓ‖² − ‖Σλ X_ℓ‖²/c1]` for the squared error.
pub fn r2_constants(src: ConstantSource<'_>, spec: &DistortionSpec) -> Result<HighResConstants> {
    if spec.r() != 2.0 {
        return Err(Error::InvalidPower(spec.r()));
    }
    let c1 = spec.c1();
    let (dim, c2) = match src {
        ConstantSource::Dataset(ds) => {
            spec.check_dataset(ds)?;
            let total: f64 = ds.samples().map(|s| r2_offset(s, spec)).sum();
            (ds.dim(), total / ds.len() as f64)
        }
        ConstantSource::Density(f) => {
            if f.sources != spec.observations() {
                return Err(Error::DimensionMismatch(format!(
                    "{} sources but {} weights",
                    f.sources,
                    spec.observations()
                )));
            }
            let c2 = match &f.kind {
                _ if f.sources == 1 => 0.0,
                DensityKind::UniformCube => {
                    let sq: f64 = spec.weights().iter().map(|w| w * w).sum();
                    f.dim as f64 * (c1 * c1 - sq) / (12.0 * c1)
                }
                DensityKind::Grid(g) => {
                    let w = spec.weights();
                    let k = w[0] * w[1] / c1;
                    k * grid_pair_integral(g, |x1, x2| (x1 - x2).powi(2))?
                }
                DensityKind::UniformSum { .. } => unreachable!("single source"),
            };
            (f.dim, c2)
        }
    };
    Ok(HighResConstants {
        dim,
        c1,
        c2: Some(c2.max(0.0)),
        c3: None,
        c4: None,
        alpha: spec.alpha(),
        kappa: kappa_const(dim).ok(),
    })
}

// ∫∫ h(x1, x2) f(x1, x2), with a break on the diagonal.
fn grid_pair_integral<H: Fn(f64, f64) -> f64>(g: &GridDensity, h: H) -> Result<f64> {
    let breaks = g.breaks();
    let q = quad(INNER_TOL, 8 * g.nodes);
    let mut failure = None;
    let outer = integrate_pieces(
        |x1| {
            let mut pts = breaks.clone();
            pts.push(x1);
            let pts = sorted_breaks(pts, g.lo, g.hi);
            match integrate_pieces(|x2| h(x1, x2) * g.eval2(x1, x2), &pts, &q) {
                Ok(v) => v.value,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        &breaks,
        &quad(QUAD_TOL, 8 * g.nodes),
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(outer?.value)
}

fn pair_moment(f: &DensityModel, r: f64) -> Result<f64> {
    match (&f.kind, f.dim) {
        (DensityKind::UniformCube, 1) => Ok(expected_pair_moment(r)),
        (DensityKind::UniformCube, 2) => {
            // each coordinate difference has density 1 − |t| on [−1, 1]
            let q = quad(INNER_TOL, 0);
            let mut failure = None;
            let outer = integrate_pieces(
                |t1| {
                    let inner = integrate_pieces(
                        |t2| (t1 * t1 + t2 * t2).powf(r / 2.0) * (1.0 - t2),
                        &[0.0, 1.0],
                        &q,
                    );
                    match inner {
                        Ok(v) => v.value * (1.0 - t1),
                        Err(e) => {
                            failure.get_or_insert(e);
                            f64::NAN
                        }
                    }
                },
                &[0.0, 1.0],
                &q,
            );
            if let Some(e) = failure {
                return Err(e);
            }
            Ok(4.0 * outer?.value)
        }
        (DensityKind::Grid(g), 1) if f.sources == 2 => {
            grid_pair_integral(g, |x1, x2| (x1 - x2).abs().powf(r))
        }
        _ => Err(Error::Unsupported(
            "pair moment needs a uniform cube (d ≤ 2) or a two-source grid".into(),
        )),
    }
}

fn check_pair(f: &DensityModel, spec: &DistortionSpec) -> Result<f64> {
    if spec.observations() != 2 || f.sources != 2 {
        return Err(Error::Unsupported(
            "general-power asymptotics need exactly two observations".into(),
        ));
    }
    if !(spec.r() > 1.0) {
        return Err(Error::InvalidPower(spec.r()));
    }
    Ok(spec.alpha().expect("two observations with r > 1"))
}

/// Constants of the two-observation expansion for a general power `r > 1`.
/// They scale linearly with `λ1`; `α = (λ2/λ1)^{1/(r−1)}`.
pub fn pair_constants(f: &DensityModel, spec: &DistortionSpec) -> Result<HighResConstants> {
    let alpha = check_pair(f, spec)?;
    let r = spec.r();
    let lambda1 = spec.weights()[0];
    let c3 = lambda1 * r * alpha.powf(r - 2.0) / (2.0 * (1.0 + alpha).powf(r - 3.0));
    let c4 = lambda1 * (alpha / (1.0 + alpha)).powf(r - 1.0) * pair_moment(f, r)?;
    Ok(HighResConstants {
        dim: f.dim,
        c1: spec.c1(),
        c2: (r == 2.0).then_some(c4),
        c3: Some(c3),
        c4: Some(c4),
        alpha: Some(alpha),
        kappa: kappa_const(f.dim).ok(),
    })
}

/// Symmetric matrix `B(z)` weighting the local quadratic error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BMatrix {
    pub z: Vec<f64>,
    pub dim: usize,
    /// Row-major `dim × dim` entries.
    pub matrix: Vec<f64>,
}

impl BMatrix {
    fn zero(z: &[f64]) -> Self {
        let d = z.len();
        Self {
            z: z.to_vec(),
            dim: d,
            matrix: vec![0.0; d * d],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.dim + j]
    }

    pub fn det(&self) -> f64 {
        match self.dim {
            1 => self.matrix[0],
            2 => self.get(0, 0) * self.get(1, 1) - self.get(0, 1) * self.get(1, 0),
            _ => unreachable!("B is only built for d ≤ 2"),
        }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        match self.dim {
            1 => self.matrix[0],
            2 => {
                let (a, b, c) = (self.get(0, 0), self.get(0, 1), self.get(1, 1));
                let mean = 0.5 * (a + c);
                let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
                mean - rad
            }
            _ => unreachable!("B is only built for d ≤ 2"),
        }
    }
}

// (r−1)∫ |v|^{r−2} g(v) dv over [vlo, vhi] ∋ 0, split at 0. For r < 2 the
// substitution s = |v|^{r−1} removes the singularity.
fn radial_1d<G: Fn(f64) -> f64>(
    g: G,
    vlo: f64,
    vhi: f64,
    breaks: &[f64],
    r: f64,
    q: &Quadrature,
) -> Result<f64> {
    let mut total = 0.0;
    for sign in [1.0, -1.0] {
        let reach = if sign > 0.0 { vhi } else { -vlo };
        if reach <= 0.0 {
            continue;
        }
        let pts = sorted_breaks(breaks.iter().map(|b| b * sign).collect(), 0.0, reach);
        let value = if r < 2.0 {
            let e = r - 1.0;
            let mapped: Vec<f64> = pts.iter().map(|p| p.powf(e)).collect();
            integrate_pieces(|s| g(sign * s.powf(1.0 / e)), &mapped, q)?.value
        } else {
            integrate_pieces(|v| (r - 1.0) * v.powf(r - 2.0) * g(sign * v), &pts, q)?.value
        };
        total += value;
    }
    Ok(total)
}

/// `B(z) = ∫‖v‖^{r−2}(I + (r−2)v̂v̂ᵀ) f(z + αv/(1+α), z − v/(1+α)) dv`
/// by adaptive quadrature. Scalar grids and uniform cubes with `d ≤ 2` are
/// supported.
pub fn bz_numeric(f: &DensityModel, z: &[f64], spec: &DistortionSpec) -> Result<BMatrix> {
    let alpha = check_pair(f, spec)?;
    bz_with_alpha(f, z, spec.r(), alpha, INNER_TOL)
}

fn bz_with_alpha(f: &DensityModel, z: &[f64], r: f64, alpha: f64, tol: f64) -> Result<BMatrix> {
    if z.len() != f.dim {
        return Err(Error::DimensionMismatch(format!(
            "point has {} coordinates, density has {}",
            z.len(),
            f.dim
        )));
    }
    let a1 = alpha / (1.0 + alpha);
    let a2 = 1.0 / (1.0 + alpha);
    let (lo, hi) = f.bounds();
    // reachable box in v, per coordinate
    let mut vlo = vec![0.0; f.dim];
    let mut vhi = vec![0.0; f.dim];
    for (j, &zj) in z.iter().enumerate() {
        vlo[j] = ((lo - zj) / a1).max((zj - hi) / a2);
        vhi[j] = ((hi - zj) / a1).min((zj - lo) / a2);
        if !(vlo[j] <= 0.0 && vhi[j] >= 0.0) || vlo[j] >= vhi[j] {
            return Ok(BMatrix::zero(z));
        }
    }
    match (f.dim, &f.kind) {
        (1, _) => {
            let z0 = z[0];
            let mut breaks = Vec::new();
            if let DensityKind::Grid(g) = &f.kind {
                for t in g.breaks() {
                    breaks.push((t - z0) / a1);
                    breaks.push((z0 - t) / a2);
                }
            }
            let q = quad(tol, 0);
            let v = radial_1d(
                |v| f.pdf(&[z0 + a1 * v, z0 - a2 * v]),
                vlo[0],
                vhi[0],
                &breaks,
                r,
                &q,
            )?;
            Ok(BMatrix {
                z: z.to_vec(),
                dim: 1,
                matrix: vec![v],
            })
        }
        (2, DensityKind::UniformCube) => {
            use std::f64::consts::{FRAC_PI_2, PI, TAU};
            let radius = |c: f64, s: f64| {
                let mut best = f64::INFINITY;
                for (cj, j) in [(c, 0), (s, 1)] {
                    if cj > 0.0 {
                        best = best.min(vhi[j] / cj);
                    } else if cj < 0.0 {
                        best = best.min(vlo[j] / cj);
                    }
                }
                best
            };
            let mut angles = vec![FRAC_PI_2, PI, 3.0 * FRAC_PI_2];
            for x in [vlo[0], vhi[0]] {
                for y in [vlo[1], vhi[1]] {
                    angles.push(y.atan2(x).rem_euclid(TAU));
                }
            }
            let angles = sorted_breaks(angles, 0.0, TAU);
            let q = quad(tol, 0);
            let entry = |i: usize, j: usize| {
                integrate_pieces(
                    |th: f64| {
                        let (s, c) = th.sin_cos();
                        let u = [c, s];
                        let delta = if i == j { 1.0 } else { 0.0 };
                        (delta + (r - 2.0) * u[i] * u[j]) * radius(c, s).powf(r) / r
                    },
                    &angles,
                    &q,
                )
                .map(|v| v.value)
            };
            let b00 = entry(0, 0)?;
            let b01 = entry(0, 1)?;
            let b11 = entry(1, 1)?;
            Ok(BMatrix {
                z: z.to_vec(),
                dim: 2,
                matrix: vec![b00, b01, b01, b11],
            })
        }
        _ => Err(Error::Unsupported(
            "B(z) is available for scalar sources or the uniform square".into(),
        )),
    }
}

/// Large-`n` distortion `constant + coefficient · n^{−2/dim}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Prediction {
    pub dim: usize,
    pub constant: f64,
    pub coefficient: f64,
}

impl Prediction {
    pub fn at(&self, n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::InvalidOption("codebook size must be positive".into()));
        }
        Ok(self.constant + self.coefficient * (n as f64).powf(-2.0 / self.dim as f64))
    }
}

/// Squared-error prediction `c2 + c1 κ_d n^{−2/d} ‖f_Z‖_{d/(d+2)}`.
pub fn theorem1_prediction(consts: &HighResConstants, fz: &DensityModel) -> Result<Prediction> {
    let c2 = consts
        .c2
        .ok_or_else(|| Error::InvalidOption("c2 is only defined for r = 2".into()))?;
    let d = fz.dim;
    let kappa = kappa_const(d)?;
    let norm = density_pnorm(fz, d as f64 / (d as f64 + 2.0))?;
    Ok(Prediction {
        dim: d,
        constant: c2,
        coefficient: consts.c1 * kappa * norm,
    })
}

pub fn theorem1_predict(consts: &HighResConstants, fz: &DensityModel, n: usize) -> Result<f64> {
    theorem1_prediction(consts, fz)?.at(n)
}

/// `‖(det B)^{1/d}‖_{d/(d+2)}` over the support.
pub fn b_norm(f: &DensityModel, spec: &DistortionSpec) -> Result<f64> {
    let alpha = check_pair(f, spec)?;
    let r = spec.r();
    let (lo, hi) = f.bounds();
    let a1 = alpha / (1.0 + alpha);
    let a2 = 1.0 / (1.0 + alpha);
    let mut kinks = vec![lo + a2 * (hi - lo), lo + a1 * (hi - lo)];
    if let DensityKind::Grid(g) = &f.kind {
        kinks.extend(g.breaks());
    }
    let breaks = sorted_breaks(kinks, lo, hi);
    let mut failure = None;
    match f.dim {
        1 => {
            let v = integrate_pieces(
                |z| match bz_with_alpha(f, &[z], r, alpha, INNER_TOL) {
                    Ok(b) => b.det().max(0.0).cbrt(),
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                },
                &breaks,
                &quad(INNER_TOL, 0),
            );
            if let Some(e) = failure {
                return Err(e);
            }
            Ok(v?.value.powi(3))
        }
        2 => {
            let tol = 1e-7;
            let inner_q = quad(tol, 0);
            let v = integrate_pieces(
                |z0| {
                    let inner = integrate_pieces(
                        |z1| match bz_with_alpha(f, &[z0, z1], r, alpha, 1e-9) {
                            Ok(b) => b.det().max(0.0).powf(0.25),
                            Err(e) => {
                                failure.get_or_insert(e);
                                f64::NAN
                            }
                        },
                        &breaks,
                        &inner_q,
                    );
                    match inner {
                        Ok(v) => v.value,
                        Err(e) => {
                            failure.get_or_insert(e);
                            f64::NAN
                        }
                    }
                },
                &breaks,
                &quad(tol, 0),
            );
            if let Some(e) = failure {
                return Err(e);
            }
            Ok(v?.value.powi(2))
        }
        d => Err(Error::UnknownConstant(d)),
    }
}

/// General-power prediction `c4 + c3 κ_d n^{−2/d} ‖(det B)^{1/d}‖_{d/(d+2)}`.
pub fn theorem2_prediction(f: &DensityModel, spec: &DistortionSpec) -> Result<Prediction> {
    let kappa = kappa_const(f.dim)?;
    let consts = pair_constants(f, spec)?;
    let norm = b_norm(f, spec)?;
    Ok(Prediction {
        dim: f.dim,
        constant: consts.c4.expect("set by pair_constants"),
        coefficient: consts.c3.expect("set by pair_constants") * kappa * norm,
    })
}

pub fn theorem2_predict(f: &DensityModel, spec: &DistortionSpec, n: usize) -> Result<f64> {
    theorem2_prediction(f, spec)?.at(n)
}

/// Closed form of `B(z)` for independent uniform `[0, 1]` sources. Since
/// `B` is unchanged under `α ↦ 1/α` for independent identically distributed
/// sources, `α < 1` is mapped to `1/α`.
pub fn example2_bz(z: f64, r: f64, alpha: f64) -> f64 {
    let alpha = if alpha < 1.0 { 1.0 / alpha } else { alpha };
    if !(0.0..=1.0).contains(&z) {
        return 0.0;
    }
    let e = r - 1.0;
    let edge = |t: f64| t.powf(e) * (1.0 + alpha).powf(e) * (1.0 + alpha.powf(-e));
    if z <= 1.0 / (1.0 + alpha) {
        edge(z)
    } else if z <= alpha / (1.0 + alpha) {
        ((1.0 + alpha) / alpha).powf(e) * ((1.0 - z).powf(e) + z.powf(e))
    } else {
        edge(1.0 - z)
    }
}

/// `∫₀¹ B(z)^{1/3} dz` for independent uniform `[0, 1]` sources.
pub fn example2_norm_constant(r: f64, alpha: f64) -> Result<f64> {
    if !(r > 1.0) {
        return Err(Error::InvalidPower(r));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidOption(format!("alpha = {alpha} must be positive")));
    }
    let alpha = if alpha < 1.0 { 1.0 / alpha } else { alpha };
    let e = r - 1.0;
    let outer = 6.0 / ((r + 2.0) * (1.0 + alpha)) * (1.0 + alpha.powf(-e)).cbrt();
    let lo = 1.0 / (1.0 + alpha);
    let hi = alpha / (1.0 + alpha);
    let middle = if hi > lo {
        integrate_pieces(
            |z: f64| ((1.0 - z).powf(e) + z.powf(e)).cbrt(),
            &[lo, hi],
            &quad(1e-13, 0),
        )?
        .value
    } else {
        0.0
    };
    Ok(outer + (1.0 + 1.0 / alpha).powf(e / 3.0) * middle)
}

/// Normalized point density on an interval, tabulated on a regular grid
/// together with its cumulative distribution.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointDensity {
    lo: f64,
    hi: f64,
    nodes: Vec<f64>,
    density: Vec<f64>,
    cumulative: Vec<f64>,
    normalizer: f64,
}

impl PointDensity {
    /// Tabulates `g / ∫g` on `[lo, hi]`; `kinks` lists points where `g` is
    /// not smooth.
    pub fn tabulate<G: Fn(f64) -> f64>(g: G, lo: f64, hi: f64, kinks: &[f64]) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidDensity(format!("bad support [{lo}, {hi}]")));
        }
        let mut kinks: Vec<f64> = kinks.iter().copied().filter(|k| *k > lo && *k < hi).collect();
        kinks.sort_by(f64::total_cmp);
        let h = (hi - lo) / CELLS as f64;
        let nodes: Vec<f64> = (0..=CELLS)
            .map(|k| if k == CELLS { hi } else { lo + k as f64 * h })
            .collect();
        let q = quad(1e-13, 0);
        let mut masses = Vec::with_capacity(CELLS);
        let mut next = 0;
        for w in nodes.windows(2) {
            let mut pts = vec![w[0]];
            while next < kinks.len() && kinks[next] < w[1] {
                if kinks[next] > w[0] {
                    pts.push(kinks[next]);
                }
                next += 1;
            }
            pts.push(w[1]);
            masses.push(integrate_pieces(&g, &pts, &q)?.value.max(0.0));
        }
        let normalizer: f64 = masses.iter().sum();
        if !(normalizer > 0.0 && normalizer.is_finite()) {
            return Err(Error::InvalidDensity("point density has no mass".into()));
        }
        let mut cumulative = Vec::with_capacity(CELLS + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for m in &masses {
            acc += m;
            cumulative.push((acc / normalizer).min(1.0));
        }
        cumulative[CELLS] = 1.0;
        let density = nodes.iter().map(|&z| g(z).max(0.0) / normalizer).collect();
        Ok(Self {
            lo,
            hi,
            nodes,
            density,
            cumulative,
            normalizer,
        })
    }

    pub fn support(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn cumulative(&self) -> &[f64] {
        &self.cumulative
    }

    /// Integral of the unnormalized density.
    pub fn normalizer(&self) -> f64 {
        self.normalizer
    }

    /// Total mass of the normalized density, summed over cells.
    pub fn mass(&self) -> f64 {
        self.cumulative.windows(2).map(|w| w[1] - w[0]).sum()
    }

    fn cell_cdf(&self, k: usize, t: f64) -> f64 {
        let (c0, c1) = (self.cumulative[k], self.cumulative[k + 1]);
        let (d0, d1) = (self.density[k], self.density[k + 1]);
        let frac = if d0 + d1 > 0.0 {
            (d0 * t + 0.5 * (d1 - d0) * t * t) / (0.5 * (d0 + d1))
        } else {
            t
        };
        c0 + (c1 - c0) * frac.clamp(0.0, 1.0)
    }

    /// Cumulative point density `Λ(z)`.
    pub fn cdf(&self, z: f64) -> f64 {
        if z <= self.lo {
            return 0.0;
        }
        if z >= self.hi {
            return 1.0;
        }
        let h = (self.hi - self.lo) / CELLS as f64;
        let k = (((z - self.lo) / h) as usize).min(CELLS - 1);
        self.cell_cdf(k, ((z - self.nodes[k]) / h).clamp(0.0, 1.0))
    }

    /// `Λ^{−1}(p)` by bisection.
    pub fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        // first cell whose right end reaches p
        let k = self.cumulative[1..]
            .partition_point(|&c| c < p)
            .min(CELLS - 1);
        let (mut a, mut b) = (0.0, 1.0);
        for _ in 0..200 {
            let t = 0.5 * (a + b);
            let c = self.cell_cdf(k, t);
            if (c - p).abs() <= 1e-14 {
                a = t;
                b = t;
                break;
            }
            if c < p {
                a = t;
            } else {
                b = t;
            }
        }
        let t = 0.5 * (a + b);
        self.nodes[k] + t * (self.nodes[k + 1] - self.nodes[k])
    }
}

/// Optimal point density for scalar sources. With one observation and
/// squared error it is `∝ f^{1/3}`; with two observations `∝ B(z)^{1/3}`;
/// with more observations and squared error `∝ f_Z^{1/3}`.
pub fn optimal_point_density(f: &DensityModel, spec: &DistortionSpec) -> Result<PointDensity> {
    if f.dim != 1 {
        return Err(Error::Unsupported(
            "point densities are tabulated for scalar sources only".into(),
        ));
    }
    if f.sources != spec.observations() {
        return Err(Error::DimensionMismatch(format!(
            "{} sources but {} weights",
            f.sources,
            spec.observations()
        )));
    }
    let r = spec.r();
    let (lo, hi) = f.bounds();
    if f.sources == 2 {
        let alpha = check_pair(f, spec)?;
        let a1 = alpha / (1.0 + alpha);
        let a2 = 1.0 / (1.0 + alpha);
        let mut kinks = vec![lo + a2 * (hi - lo), lo + a1 * (hi - lo)];
        if let DensityKind::Grid(g) = &f.kind {
            kinks.extend(g.breaks());
        }
        let failure = std::cell::RefCell::new(None);
        let pd = PointDensity::tabulate(
            |z| match bz_with_alpha(f, &[z], r, alpha, INNER_TOL) {
                Ok(b) => b.det().max(0.0).cbrt(),
                Err(e) => {
                    failure.borrow_mut().get_or_insert(e);
                    f64::NAN
                }
            },
            lo,
            hi,
            &kinks,
        );
        if let Some(e) = failure.into_inner() {
            return Err(e);
        }
        return pd;
    }
    if r != 2.0 {
        return Err(Error::Unsupported(
            "point densities for this source count need r = 2".into(),
        ));
    }
    let fz = f.average_density(spec.weights())?;
    let (lo, hi) = fz.bounds();
    PointDensity::tabulate(|z| fz.pdf(&[z]).cbrt(), lo, hi, &fz.marginal_breaks())
}

/// Points `Λ^{−1}((2i − 1)/(2n))`, `i = 1..n`.
pub fn inverse_transform_codebook(pd: &PointDensity, n: usize) -> Result<Codebook> {
    if n == 0 {
        return Err(Error::InvalidOption("codebook size must be positive".into()));
    }
    let points: Vec<Vec<f64>> = (1..=n)
        .map(|i| vec![pd.quantile((2 * i - 1) as f64 / (2 * n) as f64)])
        .collect();
    Codebook::new(points)
}
