//! Feature normalization and NCM augmentation with class-ratio balancing.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Label, NcmSample, Provenance};
use crate::error::{Error, Result};

/// Per-feature mean and population standard deviation learned from a
/// fitting set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl Normalizer {
    /// Fit column means and population standard deviations.
    pub fn fit(rows: &[&[f64]]) -> Result<Normalizer> {
        if rows.len() < 2 {
            return Err(Error::Contract(
                "normalizer fit requires at least 2 rows".into(),
            ));
        }
        let width = rows[0].len();
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Dimension("normalizer: ragged rows".into()));
        }
        let n = rows.len() as f64;
        let mut means = vec![0.0; width];
        for row in rows {
            for (m, &v) in means.iter_mut().zip(*row) {
                *m += v;
            }
        }
        for m in means.iter_mut() {
            *m /= n;
        }
        let mut stds = vec![0.0; width];
        for row in rows {
            for j in 0..width {
                let d = row[j] - means[j];
                stds[j] += d * d;
            }
        }
        for (j, s) in stds.iter_mut().enumerate() {
            *s = (*s / n).sqrt();
            if *s <= 0.0 {
                return Err(Error::DegenerateFeature(format!(
                    "column {j} is constant in the fitting set"
                )));
            }
        }
        Ok(Normalizer { means, stds })
    }

    pub fn fit_arrays<const W: usize>(rows: &[[f64; W]]) -> Result<Normalizer> {
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        Normalizer::fit(&refs)
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn stds(&self) -> &[f64] {
        &self.stds
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect()
    }

    pub fn inverse_transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(&v, (&m, &s))| v * s + m)
            .collect()
    }
}

fn sample_permutation<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        p.swap(i, j);
    }
    p
}

fn apply_permutation(matrix: &[f64], n: usize, perm: &[usize]) -> Vec<f64> {
    // out[perm[i]][perm[j]] = in[i][j]
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[perm[i] * n + perm[j]] = matrix[i * n + j];
        }
    }
    out
}

/// `count` distinct symmetric permutations P·M·Pᵀ of an n×n matrix, none the
/// identity. Diagonal elements move together with their rows/columns, so all
/// pairwise relations (and the spectrum) are preserved.
pub fn augment_ncm<R: Rng>(
    matrix: &[f64],
    n: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    if matrix.len() != n * n {
        return Err(Error::Dimension(format!(
            "augment_ncm: {} entries for a {n}x{n} matrix",
            matrix.len()
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    // non-identity permutations available: n! - 1 (checked only for tiny n,
    // where it can actually bind)
    if n <= 6 {
        let mut fact = 1usize;
        for k in 2..=n {
            fact *= k;
        }
        if count > fact.saturating_sub(1) {
            return Err(Error::Contract(format!(
                "augment_ncm: {count} distinct permutations requested, only {} exist",
                fact.saturating_sub(1)
            )));
        }
    }
    let identity: Vec<usize> = (0..n).collect();
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 1000 * count + 1000 {
            return Err(Error::Contract(
                "augment_ncm: unable to sample enough distinct permutations".into(),
            ));
        }
        let p = sample_permutation(n, rng);
        if p == identity || !seen.insert(p.clone()) {
            continue;
        }
        out.push(apply_permutation(matrix, n, &p));
    }
    Ok(out)
}

/// Default augmentation count: N-1 generated matrices per NxN input.
pub fn default_augment_count(n: usize) -> usize {
    n.saturating_sub(1)
}

/// Appends permutation-augmented copies of broken-class matrices until
/// broken/(broken+normal) >= target_ratio. Round-robin over the broken
/// originals; permutations are distinct per original within one call.
pub fn balance_to_ratio<R: Rng>(
    samples: &[NcmSample],
    target_ratio: f64,
    rng: &mut R,
) -> Result<Vec<NcmSample>> {
    if !(target_ratio > 0.0 && target_ratio < 1.0) {
        return Err(Error::Contract(format!(
            "target ratio {target_ratio} outside (0,1)"
        )));
    }
    let broken_idx: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == Label::Broken)
        .map(|(i, _)| i)
        .collect();
    if broken_idx.is_empty() {
        return Err(Error::Contract(
            "balance_to_ratio: no broken samples to augment".into(),
        ));
    }
    let total = samples.len() as f64;
    let broken = broken_idx.len() as f64;
    let mut out = samples.to_vec();
    if broken / total >= target_ratio {
        return Ok(out);
    }
    // smallest k with (b+k)/(t+k) >= r  =>  k >= (r*t - b)/(1-r)
    let k = ((target_ratio * total - broken) / (1.0 - target_ratio)).ceil() as usize;

    let n = crate::data::NCM_DIM;
    let identity: Vec<usize> = (0..n).collect();
    let mut seen: Vec<HashSet<Vec<usize>>> = vec![HashSet::new(); broken_idx.len()];
    for appended in 0..k {
        let slot = appended % broken_idx.len();
        let src = &samples[broken_idx[slot]];
        let perm = loop {
            let p = sample_permutation(n, rng);
            if p != identity && seen[slot].insert(p.clone()) {
                break p;
            }
        };
        out.push(NcmSample {
            coil_id: src.coil_id.clone(),
            matrix: apply_permutation(&src.matrix, n, &perm),
            label: Label::Broken,
            provenance: Provenance::Augmented,
        });
    }
    Ok(out)
}
