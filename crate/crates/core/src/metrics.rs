//! Partition similarity: adjusted Rand index and adjusted mutual information.

use crate::error::{Error, Result};
use crate::model::Partition;

/// Counts `n_ij` of samples with label `i` in the first partition and `j` in
/// the second.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContingencyTable {
    rows: usize,
    cols: usize,
    counts: Vec<u64>,
    row_sums: Vec<u64>,
    col_sums: Vec<u64>,
    total: u64,
}

impl ContingencyTable {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.cols + j]
    }

    pub fn row_sums(&self) -> &[u64] {
        &self.row_sums
    }

    pub fn col_sums(&self) -> &[u64] {
        &self.col_sums
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    fn cells(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        (0..self.rows).flat_map(move |i| (0..self.cols).map(move |j| (i, j, self.get(i, j))))
    }

    /// True when each nonempty row and column holds exactly one nonzero cell,
    /// i.e. the partitions agree up to relabeling.
    pub fn is_matching(&self) -> bool {
        let mut row_hits = vec![0usize; self.rows];
        let mut col_hits = vec![0usize; self.cols];
        for (i, j, c) in self.cells() {
            if c > 0 {
                row_hits[i] += 1;
                col_hits[j] += 1;
            }
        }
        row_hits.iter().chain(&col_hits).all(|&h| h <= 1)
    }
}

pub fn contingency(p: &Partition, q: &Partition) -> Result<ContingencyTable> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            left: p.len(),
            right: q.len(),
        });
    }
    let (rows, cols) = (p.clusters(), q.clusters());
    let mut counts = vec![0u64; rows * cols];
    let mut row_sums = vec![0u64; rows];
    let mut col_sums = vec![0u64; cols];
    for (&a, &b) in p.labels().iter().zip(q.labels()) {
        counts[a * cols + b] += 1;
        row_sums[a] += 1;
        col_sums[b] += 1;
    }
    Ok(ContingencyTable {
        rows,
        cols,
        counts,
        row_sums,
        col_sums,
        total: p.len() as u64,
    })
}

// Order the pair so the metrics are exactly symmetric.
fn canonical<'a>(p: &'a Partition, q: &'a Partition) -> (&'a Partition, &'a Partition) {
    if (p.labels(), p.clusters()) <= (q.labels(), q.clusters()) {
        (p, q)
    } else {
        (q, p)
    }
}

fn pairs(k: u64) -> f64 {
    let k = k as f64;
    k * (k - 1.0) / 2.0
}

/// Adjusted Rand index. Returns 1 for identical partitions (up to
/// relabeling) and 0 for other degenerate cases.
pub fn ari(p: &Partition, q: &Partition) -> Result<f64> {
    let (p, q) = canonical(p, q);
    let t = contingency(p, q)?;
    if t.is_matching() {
        return Ok(1.0);
    }
    let index: f64 = t.cells().map(|(_, _, c)| pairs(c)).sum();
    let a: f64 = t.row_sums.iter().map(|&c| pairs(c)).sum();
    let b: f64 = t.col_sums.iter().map(|&c| pairs(c)).sum();
    let total = pairs(t.total);
    if total == 0.0 {
        return Ok(0.0);
    }
    let expected = a * b / total;
    let denom = 0.5 * (a + b) - expected;
    if denom.abs() <= 1e-12 * total {
        return Ok(0.0);
    }
    Ok((index - expected) / denom)
}

fn entropy(sums: &[u64], m: f64) -> f64 {
    sums.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / m;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information (natural log) of the table.
pub fn mutual_information(t: &ContingencyTable) -> f64 {
    let m = t.total as f64;
    t.cells()
        .filter(|&(_, _, c)| c > 0)
        .map(|(i, j, c)| {
            let c = c as f64;
            let ab = t.row_sums[i] as f64 * t.col_sums[j] as f64;
            c / m * (m * c / ab).ln()
        })
        .sum()
}

/// Expected mutual information of random partitions with the same margins
/// under the hypergeometric model.
pub fn expected_mutual_information(t: &ContingencyTable) -> f64 {
    let m = t.total as usize;
    let mut ln_fact = vec![0.0f64; m + 1];
    for k in 1..=m {
        ln_fact[k] = ln_fact[k - 1] + (k as f64).ln();
    }
    let mf = m as f64;
    let mut emi = 0.0;
    for &a in t.row_sums.iter().filter(|&&a| a > 0) {
        for &b in t.col_sums.iter().filter(|&&b| b > 0) {
            let (a, b) = (a as usize, b as usize);
            let start = (a + b).saturating_sub(m).max(1);
            let common = ln_fact[a] + ln_fact[b] + ln_fact[m - a] + ln_fact[m - b] - ln_fact[m];
            for n in start..=a.min(b) {
                let ln_p = common
                    - ln_fact[n]
                    - ln_fact[a - n]
                    - ln_fact[b - n]
                    - ln_fact[m + n - a - b];
                let nf = n as f64;
                emi += nf / mf * (mf * nf / (a as f64 * b as f64)).ln() * ln_p.exp();
            }
        }
    }
    emi
}

/// Adjusted mutual information with the arithmetic-mean normalizer. Returns
/// 1 for identical partitions (up to relabeling) and 0 when the normalizer
/// vanishes otherwise.
pub fn ami(p: &Partition, q: &Partition) -> Result<f64> {
    let (p, q) = canonical(p, q);
    let t = contingency(p, q)?;
    if t.is_matching() {
        return Ok(1.0);
    }
    let m = t.total as f64;
    let mi = mutual_information(&t);
    let emi = expected_mutual_information(&t);
    let mean_h = 0.5 * (entropy(&t.row_sums, m) + entropy(&t.col_sums, m));
    let denom = mean_h - emi;
    if denom.abs() <= 1e-15 {
        return Ok(0.0);
    }
    Ok((mi - emi) / denom)
}
