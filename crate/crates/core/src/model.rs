//! Core data types: multi-observation datasets, distortion parameters,
//! codebooks and partitions.
//!
//! A [`MultiDataset`] holds `m` samples, each made of `L` observations of a
//! `d`-dimensional vector. Storage is a single row-major buffer so that the
//! concatenated `L·d` view of a sample is a contiguous slice.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MultiDataset {
    data: Vec<f64>,
    m: usize,
    l: usize,
    d: usize,
}

/// Borrowed view of one sample: `L` observations of dimension `d`.
#[derive(Debug, Clone, Copy)]
pub struct MultiSample<'a> {
    data: &'a [f64],
    d: usize,
}

impl<'a> MultiSample<'a> {
    pub fn new(data: &'a [f64], d: usize) -> Result<Self> {
        if d == 0 || data.is_empty() || !data.len().is_multiple_of(d) {
            return Err(Error::DimensionMismatch(format!(
                "sample of length {} is not a whole number of {d}-vectors",
                data.len()
            )));
        }
        Ok(Self { data, d })
    }

    pub fn observations(&self) -> usize {
        self.data.len() / self.d
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn observation(&self, l: usize) -> &'a [f64] {
        &self.data[l * self.d..(l + 1) * self.d]
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a [f64]> + 'a {
        self.data.chunks_exact(self.d)
    }

    /// The concatenation `[y_1 ⋯ y_L]`.
    pub fn as_flat(&self) -> &'a [f64] {
        self.data
    }
}

impl MultiDataset {
    /// Validates raw input given as one `L × d` matrix per sample.
    pub fn from_raw(raw: &[Vec<Vec<f64>>]) -> Result<Self> {
        let first = raw.first().ok_or(Error::Empty)?;
        let l = first.len();
        let d = first.first().map(Vec::len).unwrap_or(0);
        if l == 0 || d == 0 {
            return Err(Error::DimensionMismatch(
                "sample 0 has no observations or zero-dimensional observations".into(),
            ));
        }
        let mut data = Vec::with_capacity(raw.len() * l * d);
        for (i, sample) in raw.iter().enumerate() {
            if sample.len() != l {
                return Err(Error::DimensionMismatch(format!(
                    "sample {i} has {} observations, expected {l}",
                    sample.len()
                )));
            }
            for (j, obs) in sample.iter().enumerate() {
                if obs.len() != d {
                    return Err(Error::DimensionMismatch(format!(
                        "sample {i}, observation {j} has dimension {}, expected {d}",
                        obs.len()
                    )));
                }
                data.extend_from_slice(obs);
            }
        }
        Self::from_flat(data, raw.len(), l, d)
    }

    /// Builds a dataset from a row-major buffer of `m · l · d` values.
    pub fn from_flat(data: Vec<f64>, m: usize, l: usize, d: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Empty);
        }
        if l == 0 || d == 0 || data.len() != m * l * d {
            return Err(Error::DimensionMismatch(format!(
                "buffer of length {} does not hold {m} samples of {l} x {d}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            let per_sample = l * d;
            return Err(Error::NonFinite {
                sample: pos / per_sample,
                observation: (pos % per_sample) / d,
                coordinate: pos % d,
            });
        }
        Ok(Self { data, m, l, d })
    }

    /// Single-observation dataset (`L = 1`) from a list of points.
    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let raw: Vec<Vec<Vec<f64>>> = points.iter().map(|p| vec![p.clone()]).collect();
        Self::from_raw(&raw)
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    /// Observations per sample (`L`).
    pub fn observations(&self) -> usize {
        self.l
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn sample(&self, i: usize) -> MultiSample<'_> {
        let w = self.l * self.d;
        MultiSample {
            data: &self.data[i * w..(i + 1) * w],
            d: self.d,
        }
    }

    pub fn samples(&self) -> impl ExactSizeIterator<Item = MultiSample<'_>> + '_ {
        let d = self.d;
        self.data
            .chunks_exact(self.l * self.d)
            .map(move |data| MultiSample { data, d })
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Every sample flattened to one `L·d` vector, in observation order.
    pub fn concat_view(&self) -> MultiDataset {
        MultiDataset {
            data: self.data.clone(),
            m: self.m,
            l: 1,
            d: self.l * self.d,
        }
    }

    /// Nested `m × L × d` representation, the inverse of [`MultiDataset::from_raw`].
    pub fn to_raw(&self) -> Vec<Vec<Vec<f64>>> {
        self.samples()
            .map(|s| s.iter().map(<[f64]>::to_vec).collect())
            .collect()
    }

    /// Keeps the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<MultiDataset> {
        let w = self.l * self.d;
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= self.m {
                return Err(Error::InvalidOption(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&self.data[i * w..(i + 1) * w]);
        }
        Self::from_flat(data, indices.len(), self.l, self.d)
    }
}

/// Power `r` and per-observation weights of the distortion
/// `Σ_ℓ λ_ℓ ‖u − y_ℓ‖^r`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionSpec {
    r: f64,
    weights: Vec<f64>,
}

impl DistortionSpec {
    pub fn new(r: f64, weights: Vec<f64>) -> Result<Self> {
        if !(r.is_finite() && r >= 1.0) {
            return Err(Error::InvalidPower(r));
        }
        if weights.is_empty() {
            return Err(Error::InvalidWeights("at least one weight is required".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::InvalidWeights(format!("weight {w} is not positive")));
        }
        Ok(Self { r, weights })
    }

    /// `L` equal unit weights.
    pub fn uniform(r: f64, l: usize) -> Result<Self> {
        Self::new(r, vec![1.0; l])
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn observations(&self) -> usize {
        self.weights.len()
    }

    /// Sum of the weights.
    pub fn c1(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// `(λ_2/λ_1)^{1/(r−1)}`, the position of the two-observation optimum
    /// along the segment. Defined only for `L = 2` and `r > 1`.
    pub fn alpha(&self) -> Option<f64> {
        match self.weights.as_slice() {
            [w1, w2] if self.r > 1.0 => Some((w2 / w1).powf(1.0 / (self.r - 1.0))),
            _ => None,
        }
    }

    /// Same weights multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.r, self.weights.iter().map(|w| w * c).collect())
    }

    pub(crate) fn check_dataset(&self, ds: &MultiDataset) -> Result<()> {
        if ds.observations() != self.weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "dataset has {} observations per sample but {} weights were given",
                ds.observations(),
                self.weights.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FitInfo {
    pub distortion: f64,
    pub iterations: usize,
    pub seed: u64,
}

/// `n` centers of dimension `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centers: Vec<f64>,
    n: usize,
    d: usize,
    pub fit_info: FitInfo,
}

impl Codebook {
    pub fn new(centers: Vec<Vec<f64>>) -> Result<Self> {
        let d = centers.first().map(Vec::len).ok_or(Error::Empty)?;
        if d == 0 {
            return Err(Error::DimensionMismatch("zero-dimensional center".into()));
        }
        if let Some(c) = centers.iter().find(|c| c.len() != d) {
            return Err(Error::DimensionMismatch(format!(
                "center of dimension {} among centers of dimension {d}",
                c.len()
            )));
        }
        let n = centers.len();
        Self::from_flat(centers.concat(), n, d)
    }

    pub fn from_flat(centers: Vec<f64>, n: usize, d: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty);
        }
        if d == 0 || centers.len() != n * d {
            return Err(Error::DimensionMismatch(format!(
                "buffer of length {} does not hold {n} centers of dimension {d}",
                centers.len()
            )));
        }
        if let Some(pos) = centers.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                sample: pos / d,
                observation: 0,
                coordinate: pos % d,
            });
        }
        Ok(Self {
            centers,
            n,
            d,
            fit_info: FitInfo::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn center(&self, k: usize) -> &[f64] {
        &self.centers[k * self.d..(k + 1) * self.d]
    }

    pub fn centers(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.centers.chunks_exact(self.d)
    }

    pub fn to_vecs(&self) -> Vec<Vec<f64>> {
        self.centers().map(<[f64]>::to_vec).collect()
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.centers
    }

    pub(crate) fn set_center(&mut self, k: usize, value: &[f64]) {
        self.centers[k * self.d..(k + 1) * self.d].copy_from_slice(value);
    }
}

/// Cluster labels of `m` samples, each in `[0, n)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    labels: Vec<usize>,
    n: usize,
}

impl Partition {
    /// `n` is taken as one more than the largest label.
    pub fn new(labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty);
        }
        let n = labels.iter().max().map_or(0, |m| m + 1);
        Ok(Self { labels, n })
    }

    pub fn with_clusters(labels: Vec<usize>, n: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Empty);
        }
        if let Some(l) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::InvalidPartition(format!("label {l} is not below {n}")));
        }
        Ok(Self { labels, n })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn clusters(&self) -> usize {
        self.n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn validates_well_formed_input() {
        let raw = vec![
            vec![vec![0.0, 1.0], vec![2.0, 3.0]],
            vec![vec![4.0, 5.0], vec![6.0, 7.0]],
            vec![vec![8.0, 9.0], vec![10.0, 11.0]],
        ];
        let ds = MultiDataset::from_raw(&raw).unwrap();
        assert_eq!((ds.len(), ds.observations(), ds.dim()), (3, 2, 2));
        assert_eq!(ds.sample(1).observation(1), &[6.0, 7.0]);
    }

    #[test]
    fn rejects_ragged_observation() {
        let raw = vec![
            vec![vec![0.0, 1.0], vec![2.0, 3.0]],
            vec![vec![4.0, 5.0], vec![6.0, 7.0, 8.0]],
        ];
        assert!(matches!(
            MultiDataset::from_raw(&raw),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn rejects_nan() {
        let raw = vec![vec![vec![0.0, 1.0]], vec![vec![f64::NAN, 1.0]]];
        assert!(matches!(
            MultiDataset::from_raw(&raw),
            Err(Error::NonFinite {
                sample: 1,
                observation: 0,
                coordinate: 0
            })
        ));
        let raw = vec![vec![vec![f64::INFINITY]]];
        assert!(matches!(
            MultiDataset::from_raw(&raw),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn rejects_empty() {
        assert!(matches!(MultiDataset::from_raw(&[]), Err(Error::Empty)));
    }

    #[test]
    fn concat_examples() {
        let ds = MultiDataset::from_raw(&[vec![vec![1.0, 2.0], vec![3.0, 4.0]]]).unwrap();
        let flat = ds.concat_view();
        assert_eq!((flat.observations(), flat.dim()), (1, 4));
        assert_eq!(flat.sample(0).observation(0), &[1.0, 2.0, 3.0, 4.0]);

        let single = MultiDataset::from_points(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(single.concat_view(), single);

        let ds = MultiDataset::from_raw(&[
            vec![vec![0.0], vec![1.0]],
            vec![vec![2.0], vec![3.0]],
        ])
        .unwrap();
        let flat = ds.concat_view();
        assert_eq!(flat.sample(0).observation(0), &[0.0, 1.0]);
        assert_eq!(flat.sample(1).observation(0), &[2.0, 3.0]);
    }

    #[test]
    fn concat_index_map_is_exhaustive() {
        for (m, l, d) in [(1, 1, 1), (2, 3, 2), (3, 2, 3), (4, 4, 1)] {
            let raw: Vec<Vec<Vec<f64>>> = (0..m)
                .map(|i| {
                    (0..l)
                        .map(|ell| (0..d).map(|j| (i * 100 + ell * 10 + j) as f64).collect())
                        .collect()
                })
                .collect();
            let ds = MultiDataset::from_raw(&raw).unwrap();
            let flat = ds.concat_view();
            assert_eq!(flat.len(), m);
            for i in 0..m {
                let row = flat.sample(i).observation(0);
                for ell in 0..l {
                    for j in 0..d {
                        assert_eq!(row[ell * d + j], raw[i][ell][j]);
                    }
                }
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(matches!(DistortionSpec::new(0.5, vec![1.0]), Err(Error::InvalidPower(_))));
        assert!(matches!(
            DistortionSpec::new(2.0, vec![1.0, 0.0]),
            Err(Error::InvalidWeights(_))
        ));
        let spec = DistortionSpec::new(3.0, vec![1.0, 8.0]).unwrap();
        assert_eq!(spec.c1(), 9.0);
        assert!((spec.alpha().unwrap() - 8f64.sqrt()).abs() < 1e-15);
        assert!(DistortionSpec::new(1.0, vec![1.0, 2.0]).unwrap().alpha().is_none());
        assert!(DistortionSpec::new(2.0, vec![1.0, 2.0, 3.0]).unwrap().alpha().is_none());
    }

    #[test]
    fn partition_bounds() {
        assert_eq!(Partition::new(vec![0, 2, 1]).unwrap().clusters(), 3);
        assert!(Partition::with_clusters(vec![0, 3], 3).is_err());
    }

    proptest! {
        #[test]
        fn validate_roundtrip_is_idempotent(
            m in 1usize..6, l in 1usize..4, d in 1usize..4,
            seed in proptest::collection::vec(-1e6f64..1e6, 64)
        ) {
            let raw: Vec<Vec<Vec<f64>>> = (0..m)
                .map(|i| (0..l).map(|ell| (0..d).map(|j| seed[(i * 13 + ell * 5 + j) % 64]).collect()).collect())
                .collect();
            let once = MultiDataset::from_raw(&raw).unwrap();
            let twice = MultiDataset::from_raw(&once.to_raw()).unwrap();
            prop_assert_eq!(&once, &twice);
            prop_assert_eq!(once.to_raw(), raw);
        }
    }
}
