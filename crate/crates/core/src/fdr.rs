//! Multiple-testing control and truth-based evaluation.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Benjamini–Hochberg step-up selection with monotone q-values.
#[derive(Debug, Clone, PartialEq)]
pub struct BhResult {
    pub selected: Vec<bool>,
    pub q_values: Vec<f64>,
    pub n_selected: usize,
}

pub fn benjamini_hochberg(p: &[f64], alpha: f64) -> Result<BhResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::ParameterDomain(format!("alpha = {alpha} outside (0, 1)")));
    }
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
        return Err(Error::ParameterDomain(format!("P-value {v} outside [0, 1]")));
    }
    let n = p.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    let nf = n as f64;
    let k_star = order
        .iter()
        .enumerate()
        .filter(|(r, &j)| p[j] <= alpha * (r + 1) as f64 / nf)
        .map(|(r, _)| r + 1)
        .max()
        .unwrap_or(0);
    let mut q_values = vec![0.0; n];
    let mut running = 1.0f64;
    for (r, &j) in order.iter().enumerate().rev() {
        running = running.min(nf * p[j] / (r + 1) as f64);
        q_values[j] = running.min(1.0);
    }
    let mut selected = vec![false; n];
    for &j in &order[..k_star] {
        selected[j] = true;
    }
    Ok(BhResult {
        selected,
        q_values,
        n_selected: k_star,
    })
}

pub const P_CLAMP: f64 = 1e-15;

/// `z = Φ⁻¹(1 − P)`, with P clamped to `[1e-15, 1 − 1e-15]`.
pub fn z_scores(p: &[f64]) -> Vec<f64> {
    let std = Normal::standard();
    let mut clamped = 0usize;
    let z = p
        .iter()
        .map(|&v| {
            let c = v.clamp(P_CLAMP, 1.0 - P_CLAMP);
            if c != v {
                clamped += 1;
            }
            -std.inverse_cdf(c)
        })
        .collect();
    if clamped > 0 {
        log::warn!("{clamped} P-value(s) clamped before the probit transform");
    }
    z
}

/// Fitted `π0·N(μ0, σ0²) + (1−π0)·N(μ1, σ1²)`; component 0 is the null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoNormalFit {
    pub pi0: f64,
    pub mu0: f64,
    pub sd0: f64,
    pub mu1: f64,
    pub sd1: f64,
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    /// A standard deviation hit the floor.
    pub degenerate: bool,
    /// Null fixed at N(0, 1).
    pub theoretical_null: bool,
    #[serde(skip)]
    pub local_fdr: Vec<f64>,
}

const SD_FLOOR: f64 = 1e-6;

fn log_norm(x: f64, mu: f64, sd: f64) -> f64 {
    let z = (x - mu) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// EM fit of the two-normal mixture; `theoretical_null` fixes μ0 = 0, σ0 = 1.
pub fn fit_two_normal_mixture(z: &[f64], theoretical_null: bool) -> Result<TwoNormalFit> {
    let n = z.len();
    if n < 2 {
        return Err(Error::Data("need at least two z-scores".into()));
    }
    if n < 100 {
        log::warn!("two-normal mixture fitted to only {n} z-scores");
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite z-score".into()));
    }
    let (mut pi0, mut mu0, mut sd0) = (0.9f64, 0.0f64, 1.0f64);
    let mut mu1 = quantile(z, 0.9);
    if mu1 <= mu0 {
        mu1 = mu0 + 1.0;
    }
    let mut sd1 = 1.0;
    let mut post0 = vec![0.0; n];
    let mut prev = f64::NEG_INFINITY;
    let mut ll = f64::NEG_INFINITY;
    let mut converged = false;
    let mut degenerate = false;
    let mut iterations = 0;
    for it in 1..=5000 {
        iterations = it;
        ll = 0.0;
        for (k, &x) in z.iter().enumerate() {
            let a = pi0.ln() + log_norm(x, mu0, sd0);
            let b = (1.0 - pi0).ln() + log_norm(x, mu1, sd1);
            let mx = a.max(b);
            let lse = mx + ((a - mx).exp() + (b - mx).exp()).ln();
            post0[k] = (a - lse).exp();
            ll += lse;
        }
        if (ll - prev).abs() < 1e-8 * ll.abs().max(1.0) {
            converged = true;
            break;
        }
        prev = ll;
        let w0: f64 = post0.iter().sum();
        let w1 = n as f64 - w0;
        pi0 = (w0 / n as f64).clamp(1e-10, 1.0 - 1e-10);
        if w1 > 1e-10 {
            mu1 = z.iter().zip(&post0).map(|(x, p)| (1.0 - p) * x).sum::<f64>() / w1;
            let v1 = z.iter().zip(&post0).map(|(x, p)| (1.0 - p) * (x - mu1).powi(2)).sum::<f64>() / w1;
            sd1 = v1.sqrt();
        }
        if !theoretical_null && w0 > 1e-10 {
            mu0 = z.iter().zip(&post0).map(|(x, p)| p * x).sum::<f64>() / w0;
            let v0 = z.iter().zip(&post0).map(|(x, p)| p * (x - mu0).powi(2)).sum::<f64>() / w0;
            sd0 = v0.sqrt();
        }
        if !(sd0 >= SD_FLOOR) {
            sd0 = SD_FLOOR;
            degenerate = true;
        }
        if !(sd1 >= SD_FLOOR) {
            sd1 = SD_FLOOR;
            degenerate = true;
        }
    }
    if degenerate {
        log::warn!("two-normal mixture hit the standard-deviation floor");
    }
    // fall back to a single null component when the alternative does not
    // earn its three extra parameters under BIC; on signal-free data the
    // free mixture otherwise splits the null into two overlapping normals
    let (bmu, bsd) = if theoretical_null {
        (0.0, 1.0)
    } else {
        let mean = z.iter().sum::<f64>() / n as f64;
        let var = z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        (mean, var.sqrt().max(SD_FLOOR))
    };
    let boundary_ll: f64 = z.iter().map(|&x| log_norm(x, bmu, bsd)).sum();
    if 2.0 * (ll - boundary_ll) <= 3.0 * (n as f64).ln() {
        return Ok(TwoNormalFit {
            pi0: 1.0,
            mu0: bmu,
            sd0: bsd,
            mu1: mu1.max(bmu),
            sd1,
            log_likelihood: boundary_ll,
            iterations,
            converged,
            degenerate,
            theoretical_null,
            local_fdr: vec![1.0; n],
        });
    }
    let mut fit = TwoNormalFit {
        pi0,
        mu0,
        sd0,
        mu1,
        sd1,
        log_likelihood: ll,
        iterations,
        converged,
        degenerate,
        theoretical_null,
        local_fdr: post0,
    };
    if !theoretical_null && fit.mu1 < fit.mu0 {
        std::mem::swap(&mut fit.mu0, &mut fit.mu1);
        std::mem::swap(&mut fit.sd0, &mut fit.sd1);
        fit.pi0 = 1.0 - fit.pi0;
        for v in &mut fit.local_fdr {
            *v = 1.0 - *v;
        }
    }
    Ok(fit)
}

/// Local-FDR posterior of the null for new z-values under a fitted mixture.
pub fn local_fdr(fit: &TwoNormalFit, z: &[f64]) -> Vec<f64> {
    z.iter()
        .map(|&x| {
            let a = fit.pi0.ln() + log_norm(x, fit.mu0, fit.sd0);
            let b = (1.0 - fit.pi0).ln() + log_norm(x, fit.mu1, fit.sd1);
            1.0 / (1.0 + (b - a).exp())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalFdrSelection {
    pub selected: Vec<bool>,
    pub n_selected: usize,
    /// Mean local FDR over the selection; 0 when empty.
    pub implied_fdr: f64,
    pub empty: bool,
}

/// Select `{j : local_fdr_j < c0}`.
pub fn select_by_local_fdr(local_fdr: &[f64], c0: f64) -> Result<LocalFdrSelection> {
    if !(c0 > 0.0 && c0 <= 1.0) {
        return Err(Error::ParameterDomain(format!("c0 = {c0} outside (0, 1]")));
    }
    let selected: Vec<bool> = local_fdr.iter().map(|&v| v < c0 || c0 >= 1.0).collect();
    let n_selected = selected.iter().filter(|s| **s).count();
    let implied_fdr = if n_selected == 0 {
        0.0
    } else {
        local_fdr.iter().zip(&selected).filter(|(_, s)| **s).map(|(v, _)| v).sum::<f64>() / n_selected as f64
    };
    Ok(LocalFdrSelection {
        selected,
        n_selected,
        implied_fdr,
        empty: n_selected == 0,
    })
}

/// Per-feature inference outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResults {
    pub p: Vec<f64>,
    pub z: Vec<f64>,
    pub local_fdr: Vec<f64>,
    pub bh_q: Vec<f64>,
    pub selected: Vec<bool>,
    pub method: SelectionMethod,
    pub c0: f64,
    pub alpha: f64,
    pub mixture: TwoNormalFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMethod {
    Bh,
    LocalFdr,
}

impl std::str::FromStr for SelectionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bh" => Ok(Self::Bh),
            "localfdr" => Ok(Self::LocalFdr),
            _ => Err(Error::ParameterDomain(format!("unknown method `{s}` (bh or localfdr)"))),
        }
    }
}

impl SelectionMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Bh => "bh",
            Self::LocalFdr => "localfdr",
        }
    }
}

/// z-scores, local FDR, BH q-values and the selection from one rule.
pub fn infer(p: &[f64], method: SelectionMethod, alpha: f64, c0: f64, theoretical_null: bool) -> Result<InferenceResults> {
    let z = z_scores(p);
    let mixture = fit_two_normal_mixture(&z, theoretical_null)?;
    let bh = benjamini_hochberg(p, alpha)?;
    let lf = select_by_local_fdr(&mixture.local_fdr, c0)?;
    let selected = match method {
        SelectionMethod::Bh => bh.selected,
        SelectionMethod::LocalFdr => lf.selected,
    };
    Ok(InferenceResults {
        p: p.to_vec(),
        z,
        local_fdr: mixture.local_fdr.clone(),
        bh_q: bh.q_values,
        selected,
        method,
        c0,
        alpha,
        mixture,
    })
}

/// Confusion-matrix summary of a selection against truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationMetrics {
    pub n_selected: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub n_de: usize,
    pub n: usize,
    pub fdp: f64,
    pub fndp: f64,
    pub power: f64,
}

pub fn evaluate_against_truth(selected: &[bool], is_de: &[bool]) -> Result<EvaluationMetrics> {
    if selected.len() != is_de.len() {
        return Err(Error::Data(format!(
            "truth has {} features but the selection has {}",
            is_de.len(),
            selected.len()
        )));
    }
    let n = selected.len();
    let n_selected = selected.iter().filter(|s| **s).count();
    let n_de = is_de.iter().filter(|s| **s).count();
    let tp = selected.iter().zip(is_de).filter(|(s, d)| **s && **d).count();
    let fp = n_selected - tp;
    let fneg = n_de - tp;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(EvaluationMetrics {
        n_selected,
        true_positives: tp,
        false_positives: fp,
        false_negatives: fneg,
        n_de,
        n,
        fdp: ratio(fp, n_selected),
        fndp: ratio(fneg, n - n_selected),
        power: ratio(tp, n_de),
    })
}

/// Selection of the first `k` features of `order`.
pub fn top_k_selection(order: &[usize], n: usize, k: usize) -> Result<Vec<bool>> {
    if k > order.len() {
        return Err(Error::ParameterDomain(format!("top-{k} requested from {} features", order.len())));
    }
    let mut sel = vec![false; n];
    for &j in &order[..k] {
        sel[j] = true;
    }
    Ok(sel)
}

/// FDP among the top k, for k = 1..=K.
pub fn fdp_curve(order: &[usize], is_de: &[bool], max_k: usize) -> Result<Vec<f64>> {
    if order.len() != is_de.len() {
        return Err(Error::Data("ranking and truth lengths differ".into()));
    }
    if max_k > order.len() {
        return Err(Error::ParameterDomain(format!("curve up to {max_k} exceeds {} features", order.len())));
    }
    let mut nulls = 0usize;
    Ok(order[..max_k]
        .iter()
        .enumerate()
        .map(|(r, &j)| {
            if !is_de[j] {
                nulls += 1;
            }
            nulls as f64 / (r + 1) as f64
        })
        .collect())
}
