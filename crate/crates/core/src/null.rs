//! Permutation null for W and P-values from a fitted location-scale t.
//!
//! Each replicate relabels the samples, recomputes τ and b̂ on the permuted
//! profile and keeps β̂, ĉ and the original contrast scales. Replicates of
//! all genes are pooled and a t distribution is fitted to them.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrast::StatisticEngine;
use crate::data::ExpressionMatrix;
use crate::error::{Error, Result};
use crate::format::fmt_f64;
use crate::seed;
use crate::ttest::t_two_sided_p;

/// Full enumeration is used when at most this many arrangements exist.
pub const ENUMERATION_LIMIT: u128 = 10_000;

/// A set of relabelings of the samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationPlan {
    pub labels: Vec<usize>,
    /// B label vectors, none equal to `labels`.
    pub arrangements: Vec<Vec<usize>>,
    pub seed: u64,
    /// Set when fewer than B distinct non-identity arrangements exist.
    pub with_replacement: bool,
}

impl PermutationPlan {
    pub fn len(&self) -> usize {
        self.arrangements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrangements.is_empty()
    }

    /// Column map for arrangement `b`: the permuted profile is `y[perm[k]]`
    /// read with the original labels.
    pub fn column_permutation(&self, b: usize) -> Vec<usize> {
        label_to_columns(&self.labels, &self.arrangements[b])
    }
}

/// `perm[k]` is the sample that lands in original column `k`: the r-th
/// column of class h receives the r-th sample relabeled as h.
pub fn label_to_columns(original: &[usize], permuted: &[usize]) -> Vec<usize> {
    let m = original.iter().copied().max().unwrap_or(0);
    let mut sources: Vec<Vec<usize>> = vec![Vec::new(); m + 1];
    for (k, &h) in permuted.iter().enumerate() {
        sources[h].push(k);
    }
    let mut next = vec![0usize; m + 1];
    original
        .iter()
        .map(|&h| {
            let k = sources[h][next[h]];
            next[h] += 1;
            k
        })
        .collect()
}

/// Number of distinct label vectors with the same class counts, minus one.
pub fn count_non_identity(labels: &[usize]) -> u128 {
    let mut counts = std::collections::BTreeMap::new();
    for &h in labels {
        *counts.entry(h).or_insert(0u128) += 1;
    }
    // multinomial via successive binomials, saturating
    let mut total: u128 = 1;
    let mut placed: u128 = 0;
    for &c in counts.values() {
        for i in 1..=c {
            placed += 1;
            total = match total.checked_mul(placed) {
                Some(v) => v / i,
                None => return u128::MAX,
            };
        }
    }
    total - 1
}

fn enumerate_arrangements(labels: &[usize]) -> Vec<Vec<usize>> {
    // lexicographic next-permutation over the multiset
    let mut cur = labels.to_vec();
    cur.sort_unstable();
    let mut out = Vec::new();
    loop {
        if cur != labels {
            out.push(cur.clone());
        }
        let n = cur.len();
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            break;
        };
        let j = (i + 1..n).rev().find(|&j| cur[j] > cur[i]).unwrap();
        cur.swap(i, j);
        cur[i + 1..].reverse();
    }
    out
}

/// Draw B relabelings of `labels`. Deterministic in `seed_value`.
pub fn permute_labels(labels: &[usize], b: usize, seed_value: u64) -> Result<PermutationPlan> {
    if b < 1 {
        return Err(Error::ParameterDomain("number of permutations must be at least 1".into()));
    }
    if labels.len() < 4 {
        return Err(Error::Data(format!("permutation needs p ≥ 4 samples, found {}", labels.len())));
    }
    let available = count_non_identity(labels);
    if available < 2 {
        return Err(Error::Data(format!(
            "label multiset admits only {available} non-identity arrangement(s)"
        )));
    }
    let mut rng = seed::rng(seed_value, 0x5045_524d);
    let with_replacement = (b as u128) > available;
    let arrangements = if available <= ENUMERATION_LIMIT {
        let all = enumerate_arrangements(labels);
        if with_replacement {
            (0..b).map(|_| all.choose(&mut rng).unwrap().clone()).collect()
        } else {
            let mut idx: Vec<usize> = (0..all.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(b);
            idx.into_iter().map(|i| all[i].clone()).collect()
        }
    } else {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(b);
        let mut cur = labels.to_vec();
        while out.len() < b {
            cur.shuffle(&mut rng);
            if cur.as_slice() != labels && seen.insert(cur.clone()) {
                out.push(cur.clone());
            }
        }
        out
    };
    if with_replacement {
        log::warn!("only {available} distinct arrangements exist; sampling {b} with replacement");
    }
    Ok(PermutationPlan {
        labels: labels.to_vec(),
        arrangements,
        seed: seed_value,
        with_replacement,
    })
}

/// Null replicates W^(b), n × B row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateMatrix {
    pub n: usize,
    pub b: usize,
    pub values: Vec<f64>,
}

impl ReplicateMatrix {
    pub fn get(&self, j: usize, b: usize) -> f64 {
        self.values[j * self.b + b]
    }

    /// Pooled values, gene-major.
    pub fn pooled(&self) -> &[f64] {
        &self.values
    }

    pub fn write_tsv(&self, path: &Path, feature_ids: &[String]) -> Result<()> {
        let mut s = String::from("feature_id");
        for b in 1..=self.b {
            s.push_str(&format!("\tperm_{b}"));
        }
        s.push('\n');
        for j in 0..self.n {
            s.push_str(&feature_ids[j]);
            for b in 0..self.b {
                s.push('\t');
                s.push_str(&fmt_f64(self.get(j, b)));
            }
            s.push('\n');
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// W^(b)_j for every gene and arrangement, using the engine built from the
/// unpermuted fit.
pub fn replicate_statistics(data: &ExpressionMatrix, engine: &StatisticEngine, plan: &PermutationPlan) -> Result<ReplicateMatrix> {
    if plan.labels != data.class_of_sample() {
        return Err(Error::Data("permutation plan was built for different labels".into()));
    }
    let n = data.n_features();
    let b = plan.len();
    let perms: Vec<Vec<usize>> = (0..b).map(|i| plan.column_permutation(i)).collect();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|j| {
            let y = data.profile(j);
            let mut yb = vec![0.0; y.len()];
            perms
                .iter()
                .map(|perm| {
                    for (dst, &src) in yb.iter_mut().zip(perm) {
                        *dst = y[src];
                    }
                    engine.evaluate(&yb, j).w
                })
                .collect()
        })
        .collect();
    let values: Vec<f64> = rows.into_iter().flatten().collect();
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite null replicate for feature {} permutation {}",
            k / b + 1,
            k % b + 1
        )));
    }
    Ok(ReplicateMatrix { n, b, values })
}

/// Fitted location-scale t for the pooled null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullDistribution {
    pub mu: f64,
    pub s: f64,
    pub nu: f64,
    pub log_likelihood: f64,
    /// Log-likelihood of the normal MLE on the same values.
    pub normal_log_likelihood: f64,
    pub n_values: usize,
}

pub const NU_MIN: f64 = 1.0;
pub const NU_MAX: f64 = 200.0;

fn t_loglik(x: &[f64], mu: f64, s: f64, nu: f64) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let n = x.len() as f64;
    let c = ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln() - s.ln();
    let mut acc = 0.0;
    for &v in x {
        let z = (v - mu) / s;
        acc += (z * z / nu).ln_1p();
    }
    n * c - 0.5 * (nu + 1.0) * acc
}

/// ML location and scale at fixed ν by EM on the normal scale-mixture form.
fn fit_at_nu(x: &[f64], nu: f64, start: (f64, f64)) -> (f64, f64, f64) {
    let (mut mu, mut s2) = (start.0, start.1 * start.1);
    let n = x.len() as f64;
    let mut prev = f64::NEG_INFINITY;
    for _ in 0..2000 {
        let mut sw = 0.0;
        let mut swx = 0.0;
        for &v in x {
            let d = v - mu;
            let w = (nu + 1.0) / (nu + d * d / s2);
            sw += w;
            swx += w * v;
        }
        mu = swx / sw;
        let mut ss = 0.0;
        for &v in x {
            let d = v - mu;
            let w = (nu + 1.0) / (nu + d * d / s2);
            ss += w * d * d;
        }
        s2 = (ss / n).max(1e-300);
        let ll = t_loglik(x, mu, s2.sqrt(), nu);
        if (ll - prev).abs() <= 1e-12 * ll.abs().max(1.0) {
            prev = ll;
            break;
        }
        prev = ll;
    }
    (mu, s2.sqrt(), prev)
}

/// Maximum-likelihood location-scale t with ν profiled over `[1, 200]`.
pub fn fit_t_df(pooled: &[f64]) -> Result<NullDistribution> {
    if pooled.is_empty() {
        return Err(Error::Data("no null values to fit".into()));
    }
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value among null replicates".into()));
    }
    if pooled.len() < 500 {
        log::warn!("fitting the null t to only {} values", pooled.len());
    }
    let n = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / n;
    let var = pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::Numerical("null replicates have zero variance".into()));
    }
    let sd = var.sqrt();
    let normal_ll = -0.5 * n * ((2.0 * std::f64::consts::PI * var).ln() + 1.0);

    // profile over u = ln ν
    let profile = |u: f64| fit_at_nu(pooled, u.exp(), (mean, sd));
    let (lo, hi) = (NU_MIN.ln(), NU_MAX.ln());
    let grid = 25;
    let us: Vec<f64> = (0..grid).map(|k| lo + (hi - lo) * k as f64 / (grid - 1) as f64).collect();
    let lls: Vec<f64> = us.par_iter().map(|&u| profile(u).2).collect();
    let best = crate::em::argmax(&lls);
    let (mut a, mut b) = (us[best.saturating_sub(1)], us[(best + 1).min(grid - 1)]);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    let mut fc = profile(c).2;
    let mut fd = profile(d).2;
    // stop when the ν bracket is narrower than 1e-4
    while b.exp() - a.exp() > 1e-4 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - phi * (b - a);
            fc = profile(c).2;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + phi * (b - a);
            fd = profile(d).2;
        }
    }
    let mut cands = [(us[best], lls[best]), (c, fc), (d, fd)];
    cands.sort_by(|x, y| y.1.total_cmp(&x.1));
    let u = cands[0].0;
    let (mu, s, ll) = profile(u);
    Ok(NullDistribution {
        mu,
        s,
        nu: u.exp(),
        log_likelihood: ll,
        normal_log_likelihood: normal_ll,
        n_values: pooled.len(),
    })
}

/// Two-sided P-values `2·Pr(T_ν > |W − μ|/s)`.
pub fn p_values(w: &[f64], null: &NullDistribution) -> Vec<f64> {
    w.iter().map(|&v| t_two_sided_p((v - null.mu) / null.s, null.nu)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn four_samples_two_classes() {
        assert_eq!(count_non_identity(&[1, 1, 2, 2]), 5);
        let plan = permute_labels(&[1, 1, 2, 2], 5, 3).unwrap();
        assert_eq!(plan.len(), 5);
        assert!(!plan.with_replacement);
        assert!(plan.arrangements.iter().all(|a| a != &vec![1, 1, 2, 2]));
        let uniq: HashSet<_> = plan.arrangements.iter().collect();
        assert_eq!(uniq.len(), 5);
        let plan = permute_labels(&[1, 1, 2, 2], 6, 3).unwrap();
        assert!(plan.with_replacement);
        assert_eq!(plan.len(), 6);
    }

    #[test]
    fn deterministic_plan() {
        let labels: Vec<usize> = (0..20).map(|k| 1 + k / 10).collect();
        assert_eq!(permute_labels(&labels, 50, 1).unwrap(), permute_labels(&labels, 50, 1).unwrap());
        assert_ne!(permute_labels(&labels, 50, 1).unwrap(), permute_labels(&labels, 50, 2).unwrap());
        let plan = permute_labels(&labels, 50, 1).unwrap();
        let uniq: HashSet<_> = plan.arrangements.iter().collect();
        assert_eq!(uniq.len(), 50);
    }

    #[test]
    fn degenerate_labels() {
        assert!(permute_labels(&[1, 1, 2, 2], 0, 1).is_err());
        assert!(permute_labels(&[1, 2, 2], 1, 1).is_err());
        assert_eq!(count_non_identity(&[1, 1, 1, 1]), 0);
        assert!(permute_labels(&[1, 1, 1, 1], 1, 1).is_err());
    }

    #[test]
    fn enumeration_matches_count() {
        let labels = [1, 2, 1, 3, 2, 3, 1];
        let all = enumerate_arrangements(&labels);
        assert_eq!(all.len() as u128, count_non_identity(&labels));
        let uniq: HashSet<_> = all.iter().collect();
        assert_eq!(uniq.len(), all.len());
    }

    #[test]
    fn column_map_is_a_permutation() {
        let orig = [1, 1, 2, 2, 2];
        let perm = label_to_columns(&orig, &[2, 1, 2, 1, 2]);
        assert_eq!(perm, vec![1, 3, 0, 2, 4]);
        assert_eq!(label_to_columns(&orig, &orig), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn p_value_examples() {
        let null = NullDistribution {
            mu: 0.3,
            s: 2.0,
            nu: 200.0,
            log_likelihood: 0.0,
            normal_log_likelihood: 0.0,
            n_values: 0,
        };
        let p = p_values(&[0.3, 0.3 + 1.96 * 2.0], &null);
        assert_eq!(p[0], 1.0);
        assert_relative_eq!(p[1], 0.0513, epsilon = 2e-4);
    }

    #[test]
    fn scale_equivariance() {
        use rand_distr::{Distribution, StudentT};
        let mut rng = seed::rng(5, 0);
        let t = StudentT::new(5.0).unwrap();
        let x: Vec<f64> = (0..3000).map(|_| t.sample(&mut rng)).collect();
        let a = fit_t_df(&x).unwrap();
        let y: Vec<f64> = x.iter().map(|v| v * 10.0).collect();
        let b = fit_t_df(&y).unwrap();
        assert_relative_eq!(b.s, 10.0 * a.s, max_relative = 1e-4);
        assert_relative_eq!(b.nu, a.nu, max_relative = 1e-3);
        assert!(a.log_likelihood >= a.normal_log_likelihood - 1e-6);
    }
}
