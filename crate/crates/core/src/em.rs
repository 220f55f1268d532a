//! Maximum-likelihood fitting of the mixture by an ECM algorithm.
//!
//! One iteration:
//!
//! 1. propose ĉ_i as the τ-weighted conditional mean `E[c_i | y]` under the
//!    current parameters (a p×p solve per component);
//! 2. accept the proposal, or the largest step towards it by halving, that
//!    does not lower the ĉ-conditional log-likelihood;
//! 3. compute τ, `E[b | y, ĉ]` and `cov[b | y, ĉ]` at the accepted ĉ;
//! 4. M-step: closed-form π, β, σ²_e and σ²_c; coordinate ascent over
//!    (σ_b, ρ) for the B part of the expected complete-data log-likelihood,
//!    accepted only if it does not decrease.
//!
//! Steps 2 and 4 make the traced log-likelihood
//! `L = Σ_j log Σ_i π_i N(y_j; Xβ_i + ĉ_i, Σ_i)` non-decreasing.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_design_matrices, ExpressionMatrix};
use crate::error::{Error, Result};
use crate::lmm::{
    equicorrelation_inverse, log_sum_exp, softmax_in_place, ComponentKernel, ComponentParams, MixtureModel, RHO_MAX,
    VARIANCE_FLOOR,
};
use crate::seed;

/// EM settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub n_starts: usize,
    pub seed: u64,
    /// Inclusive range of component counts tried by [`select_g`].
    pub g_range: (usize, usize),
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            rel_tol: 1e-8,
            n_starts: 10,
            seed: 0,
            g_range: (1, 1),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 || !(self.rel_tol > 0.0) || self.n_starts < 1 {
            return Err(Error::ParameterDomain(
                "EM config needs max_iter ≥ 1, rel_tol > 0 and n_starts ≥ 1".into(),
            ));
        }
        if self.g_range.0 < 1 || self.g_range.1 < self.g_range.0 {
            return Err(Error::ParameterDomain(format!(
                "invalid g range {}..{}",
                self.g_range.0, self.g_range.1
            )));
        }
        Ok(())
    }
}

/// Record of one EM run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    /// Log-likelihood before the first iteration and after each one.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub best_start: usize,
    /// Number of variance updates that hit [`VARIANCE_FLOOR`].
    pub floored: usize,
    /// Components removed because their MAP count reached zero.
    pub dropped_components: usize,
}

impl FitTrace {
    /// Largest decrease between consecutive log-likelihood values.
    pub fn max_decrease(&self) -> f64 {
        self.log_likelihood
            .windows(2)
            .map(|w| w[0] - w[1])
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Conditional moments of every profile under fixed parameters and ĉ.
#[derive(Debug, Clone)]
pub(crate) struct Moments {
    /// n×g, row-major.
    pub tau: Vec<f64>,
    /// n×g×m, index `(j*g + i)*m + h`.
    pub b_hat: Vec<f64>,
    pub log_likelihood: f64,
}

pub(crate) fn moments(
    data: &ExpressionMatrix,
    kernels: &[ComponentKernel],
    c_hat: &[Vec<f64>],
    want_b: bool,
) -> Moments {
    let g = kernels.len();
    let m = kernels[0].m;
    let p = kernels[0].p;
    let n = data.n_features();
    let mut tau = vec![0.0; n * g];
    let mut b_hat = vec![0.0; if want_b { n * g * m } else { 0 }];
    let mut ll_j = vec![0.0; n];
    let bm = if want_b { g * m } else { 0 };
    let gene = |j: usize, t: &mut [f64], b: &mut [f64], lj: &mut f64| {
        let y = data.profile(j);
        let mut r = vec![0.0; p];
        for (i, k) in kernels.iter().enumerate() {
            k.residual_into(y, &c_hat[i], &mut r);
            let sums = k.class_sums(&r);
            t[i] = k.log_pi + k.log_density_from(&r, &sums);
            if !b.is_empty() {
                for h in 0..m {
                    b[i * m + h] = (0..m).map(|l| k.m_inv[(h, l)] * sums[l]).sum();
                }
            }
        }
        *lj = log_sum_exp(t);
        softmax_in_place(t);
    };
    if want_b {
        tau.par_chunks_mut(g)
            .zip(b_hat.par_chunks_mut(bm))
            .zip(ll_j.par_iter_mut())
            .enumerate()
            .for_each(|(j, ((t, b), lj))| gene(j, t, b, lj));
    } else {
        tau.par_chunks_mut(g)
            .zip(ll_j.par_iter_mut())
            .enumerate()
            .for_each(|(j, (t, lj))| gene(j, t, &mut [], lj));
    }
    // fixed-order reduction
    let ll: f64 = ll_j.iter().sum();
    Moments {
        tau,
        b_hat,
        log_likelihood: ll,
    }
}

/// `L = Σ_j log Σ_i π_i N(y_j; Xβ_i + ĉ_i, Σ_i)`.
pub fn log_likelihood(data: &ExpressionMatrix, model: &MixtureModel, c_hat: &[Vec<f64>]) -> Result<f64> {
    let kernels = model.kernels()?;
    Ok(moments(data, &kernels, c_hat, false).log_likelihood)
}

/// τ-weighted conditional mean of c_i and the trace of its conditional
/// covariance:
/// `E[c | y] = σ²_c (T σ²_c I + Σ)⁻¹ Σ_j τ_j (y_j − Xβ)`,
/// `cov[c | y] = σ²_c (T σ²_c I + Σ)⁻¹ Σ`.
pub(crate) fn conditional_c(
    data: &ExpressionMatrix,
    model: &MixtureModel,
    kernels: &[ComponentKernel],
    tau: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let g = model.g;
    let p = model.n_samples();
    let zero = vec![0.0; p];
    let mut c_hat = Vec::with_capacity(g);
    let mut traces = Vec::with_capacity(g);
    for (i, k) in kernels.iter().enumerate() {
        let s2c = model.components[i].sigma_c_sq;
        let mut weighted = DVector::zeros(p);
        let mut total = 0.0;
        let mut r = vec![0.0; p];
        for j in 0..data.n_features() {
            let t = tau[j * g + i];
            if t == 0.0 {
                continue;
            }
            total += t;
            k.residual_into(data.profile(j), &zero, &mut r);
            for (w, v) in weighted.iter_mut().zip(&r) {
                *w += t * v;
            }
        }
        if s2c <= 0.0 {
            c_hat.push(vec![0.0; p]);
            traces.push(0.0);
            continue;
        }
        let sigma = dense_sigma(k);
        let mut a = sigma.clone();
        for d in 0..p {
            a[(d, d)] += total * s2c;
        }
        let chol = Cholesky::new(a).ok_or_else(|| Error::Conditioning {
            component: i,
            message: "T σ²_c I + Σ is not positive definite".into(),
        })?;
        let c = chol.solve(&weighted) * s2c;
        let cov_tr = (chol.solve(&sigma) * s2c).trace();
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Conditioning {
                component: i,
                message: "non-finite shared random effect".into(),
            });
        }
        c_hat.push(c.as_slice().to_vec());
        traces.push(cov_tr);
    }
    Ok((c_hat, traces))
}

fn dense_sigma(k: &ComponentKernel) -> DMatrix<f64> {
    let b = &k.b;
    let p = k.p;
    DMatrix::from_fn(p, p, |a, c| {
        let v = b[(k.class_of_sample[a] - 1, k.class_of_sample[c] - 1)];
        if a == c {
            v + k.sigma_e_sq
        } else {
            v
        }
    })
}

/// Output of [`e_step`].
#[derive(Debug, Clone)]
pub struct EStep {
    /// n×g posteriors at the model's current ĉ.
    pub tau: Vec<f64>,
    /// n×g×m BLUPs `E[b_ij | y_j, z_ij = 1]`, evaluated at the updated ĉ.
    pub b_hat: Vec<f64>,
    /// Updated `E[c_i | y]`.
    pub c_hat: Vec<Vec<f64>>,
    /// `cov[b_ij | y_j, z_ij = 1]` per component (identical across genes).
    pub b_cov: Vec<DMatrix<f64>>,
    /// `tr cov[c_i | y]` per component.
    pub c_cov_trace: Vec<f64>,
    pub g: usize,
    pub m: usize,
}

impl EStep {
    pub fn b_hat_at(&self, j: usize, i: usize) -> &[f64] {
        let o = (j * self.g + i) * self.m;
        &self.b_hat[o..o + self.m]
    }
}

/// E-step: τ at the current ĉ, then ĉ ← E[c | y], then b̂ given the new ĉ.
pub fn e_step(data: &ExpressionMatrix, model: &MixtureModel) -> Result<EStep> {
    let kernels = model.kernels()?;
    let before = moments(data, &kernels, &model.c_hat, false);
    let (c_hat, c_cov_trace) = conditional_c(data, model, &kernels, &before.tau)?;
    let after = moments(data, &kernels, &c_hat, true);
    Ok(EStep {
        tau: before.tau,
        b_hat: after.b_hat,
        c_hat,
        b_cov: kernels.iter().map(|k| k.b_conditional_cov()).collect(),
        c_cov_trace,
        g: model.g,
        m: model.n_classes(),
    })
}

/// Summary of an M-step.
#[derive(Debug, Clone, Copy, Default)]
pub struct MStepReport {
    pub floored: usize,
}

/// `Σ_i T_i [−log|B_i| − tr(B_i⁻¹ S_i)]`, the B part of Q up to a factor ½.
pub(crate) fn b_objective(weights: &[f64], stats: &[DMatrix<f64>], sigma_b: &[Vec<f64>], rho: f64) -> f64 {
    let m = stats[0].nrows();
    let (r_inv, log_det_r) = equicorrelation_inverse(m, rho);
    let mut total = 0.0;
    for ((w, s), sig) in weights.iter().zip(stats).zip(sigma_b) {
        if *w <= 0.0 {
            continue;
        }
        let mut tr = 0.0;
        for h in 0..m {
            for k in 0..m {
                tr += r_inv[(h, k)] * s[(h, k)] / (sig[h] * sig[k]);
            }
        }
        let log_det = log_det_r + 2.0 * sig.iter().map(|v| v.ln()).sum::<f64>();
        total += w * (-log_det - tr);
    }
    total
}

fn rho_bounds(m: usize) -> (f64, f64) {
    if m <= 2 {
        (-RHO_MAX, RHO_MAX)
    } else {
        ((-1.0 / (m as f64 - 1.0) + 1e-3).max(-RHO_MAX), RHO_MAX)
    }
}

/// Coordinate update of every σ_b given ρ; each step is the exact maximizer
/// in `s_h = 1/σ_h` of `2 log s_h − a s_h² − 2 b s_h`.
fn sweep_sigma(stats: &DMatrix<f64>, sig: &mut [f64], rho: f64) {
    let m = sig.len();
    let (r_inv, _) = equicorrelation_inverse(m, rho);
    for _ in 0..100 {
        let mut change: f64 = 0.0;
        for h in 0..m {
            let a = r_inv[(h, h)] * stats[(h, h)];
            let b: f64 = (0..m)
                .filter(|&k| k != h)
                .map(|k| r_inv[(h, k)] * stats[(h, k)] / sig[k])
                .sum();
            let s = (-b + (b * b + 4.0 * a).sqrt()) / (2.0 * a);
            let new = (1.0 / s).max(VARIANCE_FLOOR.sqrt());
            change = change.max(((new - sig[h]) / sig[h]).abs());
            sig[h] = new;
        }
        if change < 1e-12 {
            break;
        }
    }
}

/// Maximize the B objective over per-component σ_b and the shared ρ,
/// starting from (`sigma_prev`, `rho_prev`). Never returns a point with a
/// lower objective than the start.
pub(crate) fn update_b(
    weights: &[f64],
    stats: &[DMatrix<f64>],
    sigma_prev: &[Vec<f64>],
    rho_prev: f64,
) -> (Vec<Vec<f64>>, f64) {
    let m = stats[0].nrows();
    let start = b_objective(weights, stats, sigma_prev, rho_prev);
    let mut sig = sigma_prev.to_vec();
    if m == 1 {
        for (s, st) in sig.iter_mut().zip(stats) {
            s[0] = st[(0, 0)].sqrt().max(VARIANCE_FLOOR.sqrt());
        }
        let val = b_objective(weights, stats, &sig, rho_prev);
        return if val >= start { (sig, rho_prev) } else { (sigma_prev.to_vec(), rho_prev) };
    }
    let (lo, hi) = rho_bounds(m);

    // moment candidate: T-weighted average of the component correlations
    let mut num = 0.0;
    let mut den = 0.0;
    for (w, s) in weights.iter().zip(stats) {
        let mut acc = 0.0;
        let mut cnt = 0.0;
        for h in 0..m {
            for k in (h + 1)..m {
                acc += s[(h, k)] / (s[(h, h)] * s[(k, k)]).sqrt();
                cnt += 1.0;
            }
        }
        num += w * acc / cnt;
        den += w;
    }
    let moment_rho = if den > 0.0 { (num / den).clamp(lo, hi) } else { rho_prev };

    let mut rho = rho_prev;
    let mut current = start;
    for _ in 0..20 {
        for (s, st) in sig.iter_mut().zip(stats) {
            sweep_sigma(st, s, rho);
        }
        let f = |r: f64| b_objective(weights, stats, &sig, r);
        // grid then golden refinement
        let n_grid = 40;
        let step = (hi - lo) / n_grid as f64;
        let mut best_r = rho;
        let mut best_v = f(rho);
        for cand in (0..=n_grid).map(|t| lo + step * t as f64).chain([moment_rho]) {
            let v = f(cand);
            if v > best_v {
                best_v = v;
                best_r = cand;
            }
        }
        let (mut a, mut b) = ((best_r - step).max(lo), (best_r + step).min(hi));
        let gr = 0.5 * (5f64.sqrt() - 1.0);
        let mut x1 = b - gr * (b - a);
        let mut x2 = a + gr * (b - a);
        let (mut f1, mut f2) = (f(x1), f(x2));
        while b - a > 1e-10 {
            if f1 < f2 {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + gr * (b - a);
                f2 = f(x2);
            } else {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - gr * (b - a);
                f1 = f(x1);
            }
        }
        let mid = 0.5 * (a + b);
        if f(mid) > best_v {
            best_r = mid;
        }
        rho = best_r;
        let val = b_objective(weights, stats, &sig, rho);
        let gain = val - current;
        current = val;
        if gain.abs() <= 1e-13 * val.abs().max(1.0) {
            break;
        }
    }
    if current >= start {
        (sig, rho)
    } else {
        (sigma_prev.to_vec(), rho_prev)
    }
}

/// M-step from the conditional moments at ĉ.
pub fn m_step(data: &ExpressionMatrix, estep: &EStep, previous: &MixtureModel) -> Result<(MixtureModel, MStepReport)> {
    let g = previous.g;
    let m = previous.n_classes();
    let p = previous.n_samples();
    let n = data.n_features();
    let cls = previous.design.class_of_sample();
    let class_sizes: Vec<f64> = previous.design.class_sizes().iter().map(|&s| s as f64).collect();
    let mut report = MStepReport::default();
    let mut floor = |v: f64| {
        if v < VARIANCE_FLOOR || !v.is_finite() {
            report.floored += 1;
            VARIANCE_FLOOR
        } else {
            v
        }
    };

    let mut comps = previous.components.clone();
    let mut weights = vec![0.0; g];
    let mut stats = Vec::with_capacity(g);
    for i in 0..g {
        let t_i: f64 = (0..n).map(|j| estep.tau[j * g + i]).sum();
        weights[i] = t_i;
        let c = &estep.c_hat[i];
        if t_i < 1e-12 {
            stats.push(previous.components[i].b_matrix()?);
            continue;
        }
        // β: weighted least squares of y − X b̂ − ĉ on X
        let mut class_tot = vec![0.0; m];
        for j in 0..n {
            let t = estep.tau[j * g + i];
            if t == 0.0 {
                continue;
            }
            let y = data.profile(j);
            let b = estep.b_hat_at(j, i);
            for k in 0..p {
                class_tot[cls[k] - 1] += t * (y[k] - b[cls[k] - 1] - c[k]);
            }
        }
        let beta: Vec<f64> = (0..m).map(|h| class_tot[h] / (t_i * class_sizes[h])).collect();

        // σ²_e from the expected residual sum of squares
        let r_cov = &estep.b_cov[i];
        let tr_rp: f64 = (0..m).map(|h| r_cov[(h, h)] * class_sizes[h]).sum();
        let mut sse = 0.0;
        let mut s_b = DMatrix::zeros(m, m);
        for j in 0..n {
            let t = estep.tau[j * g + i];
            if t == 0.0 {
                continue;
            }
            let y = data.profile(j);
            let b = estep.b_hat_at(j, i);
            let mut rss = 0.0;
            for k in 0..p {
                let h = cls[k] - 1;
                let e = y[k] - beta[h] - b[h] - c[k];
                rss += e * e;
            }
            sse += t * rss;
            for h in 0..m {
                for l in 0..m {
                    s_b[(h, l)] += t * b[h] * b[l];
                }
            }
        }
        let sigma_e_sq = floor((sse / t_i + tr_rp) / p as f64);
        s_b = s_b / t_i + r_cov;
        stats.push(s_b);

        // σ²_c from E[c'c | y]
        let cc: f64 = c.iter().map(|v| v * v).sum();
        let sigma_c_sq = floor((cc + estep.c_cov_trace[i]) / p as f64);

        let comp = &mut comps[i];
        comp.pi = t_i / n as f64;
        comp.beta = beta;
        comp.sigma_e_sq = sigma_e_sq;
        comp.sigma_c_sq = sigma_c_sq;
    }
    // components with vanishing weight keep their previous parameters
    let active: Vec<usize> = (0..g).filter(|&i| weights[i] >= 1e-12).collect();
    if !active.is_empty() {
        let w: Vec<f64> = active.iter().map(|&i| weights[i]).collect();
        let s: Vec<DMatrix<f64>> = active.iter().map(|&i| stats[i].clone()).collect();
        let sig_prev: Vec<Vec<f64>> = active.iter().map(|&i| comps[i].sigma_b.clone()).collect();
        let (sig, rho) = update_b(&w, &s, &sig_prev, previous.rho());
        for (a, &i) in active.iter().enumerate() {
            for v in &sig[a] {
                if *v <= VARIANCE_FLOOR.sqrt() {
                    report.floored += 1;
                }
            }
            comps[i].sigma_b = sig[a].clone();
        }
        for c in comps.iter_mut() {
            c.rho = rho;
        }
    }
    // keep π strictly inside (0, 1] and summing to one
    let tiny = 1e-300;
    for c in comps.iter_mut() {
        c.pi = c.pi.max(tiny);
    }
    let total: f64 = comps.iter().map(|c| c.pi).sum();
    for c in comps.iter_mut() {
        c.pi /= total;
        if g == 1 {
            c.pi = 1.0;
        }
    }
    let mut model = previous.clone();
    model.components = comps;
    model.c_hat = estep.c_hat.clone();
    Ok((model, report))
}

/// Lloyd's k-means with k-means++ seeding. `None` if a cluster empties.
pub(crate) fn kmeans<R: Rng>(data: &ExpressionMatrix, k: usize, rng: &mut R) -> Option<Vec<usize>> {
    let n = data.n_features();
    let p = data.n_samples();
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(data.profile(rng.random_range(0..n)).to_vec());
    let mut d2: Vec<f64> = (0..n).map(|j| dist2(data.profile(j), &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (j, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = j;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(data.profile(next).to_vec());
        for j in 0..n {
            d2[j] = d2[j].min(dist2(data.profile(j), centers.last().unwrap()));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..300 {
        let mut changed = false;
        for j in 0..n {
            let y = data.profile(j);
            let best = (0..k)
                .map(|c| (c, dist2(y, &centers[c])))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc })
                .0;
            if assign[j] != best {
                assign[j] = best;
                changed = true;
            }
        }
        let mut sums = vec![vec![0.0; p]; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            counts[assign[j]] += 1;
            for (s, v) in sums[assign[j]].iter_mut().zip(data.profile(j)) {
                *s += v;
            }
        }
        if counts.contains(&0) {
            return None;
        }
        for c in 0..k {
            for (ctr, s) in centers[c].iter_mut().zip(&sums[c]) {
                *ctr = s / counts[c] as f64;
            }
        }
        if !changed {
            break;
        }
    }
    Some(assign)
}

/// Initial parameters from a k-means partition of the profiles.
pub fn initialize(data: &ExpressionMatrix, g: usize, seed_value: u64) -> Result<MixtureModel> {
    let n = data.n_features();
    if g < 1 || g > (n / 10).max(1) {
        return Err(Error::ParameterDomain(format!("g = {g} must lie in 1..={}", (n / 10).max(1))));
    }
    let mut assign = None;
    for attempt in 0..20u64 {
        let mut rng = seed::rng(seed_value, attempt);
        if let Some(a) = kmeans(data, g, &mut rng) {
            assign = Some(a);
            break;
        }
    }
    let assign = assign.ok_or_else(|| {
        Error::Initialization(format!("k-means produced an empty cluster in 20 attempts (g = {g})"))
    })?;
    initialize_from_partition(data, g, &assign)
}

/// Initial parameters given a hard partition of the features.
pub fn initialize_from_partition(data: &ExpressionMatrix, g: usize, assign: &[usize]) -> Result<MixtureModel> {
    let design = build_design_matrices(data.class_of_sample())?;
    let m = data.n_classes();
    let p = data.n_samples();
    let n = data.n_features();
    let cls = data.class_of_sample();
    let sizes: Vec<f64> = data.class_sizes().iter().map(|&s| s as f64).collect();
    let gene_class_means = |j: usize| -> Vec<f64> {
        let mut t = vec![0.0; m];
        for (k, v) in data.profile(j).iter().enumerate() {
            t[cls[k] - 1] += v;
        }
        t.iter().zip(&sizes).map(|(a, b)| a / b).collect()
    };
    let within_ss = |j: usize, means: &[f64]| -> f64 {
        data.profile(j)
            .iter()
            .enumerate()
            .map(|(k, v)| (v - means[cls[k] - 1]).powi(2))
            .sum()
    };
    let floor_sd = VARIANCE_FLOOR.sqrt();

    // global fallbacks
    let all_means: Vec<Vec<f64>> = (0..n).map(gene_class_means).collect();
    let global_sd: Vec<f64> = (0..m)
        .map(|h| sample_sd(all_means.iter().map(|v| v[h])).max(floor_sd))
        .collect();
    let dof = (p - m).max(1) as f64;
    let global_e = ((0..n).map(|j| within_ss(j, &all_means[j])).sum::<f64>() / (n as f64 * dof)).max(VARIANCE_FLOOR);

    let floor_pi = 1.0 / (10.0 * g as f64);
    let mut comps = Vec::with_capacity(g);
    for i in 0..g {
        let members: Vec<usize> = (0..n).filter(|&j| assign[j] == i).collect();
        let cnt = members.len();
        let beta: Vec<f64> = if cnt == 0 {
            vec![0.0; m]
        } else {
            (0..m)
                .map(|h| members.iter().map(|&j| all_means[j][h]).sum::<f64>() / cnt as f64)
                .collect()
        };
        let sigma_b: Vec<f64> = (0..m)
            .map(|h| {
                if cnt >= 2 {
                    sample_sd(members.iter().map(|&j| all_means[j][h])).max(floor_sd)
                } else {
                    global_sd[h]
                }
            })
            .collect();
        let sigma_e_sq = if cnt >= 1 {
            (members.iter().map(|&j| within_ss(j, &all_means[j])).sum::<f64>() / (cnt as f64 * dof)).max(VARIANCE_FLOOR)
        } else {
            global_e
        };
        comps.push(ComponentParams {
            pi: (cnt as f64 / n as f64).max(floor_pi),
            beta,
            sigma_b,
            rho: 0.0,
            sigma_c_sq: 0.01,
            sigma_e_sq,
        });
    }
    let total: f64 = comps.iter().map(|c| c.pi).sum();
    for c in comps.iter_mut() {
        c.pi /= total;
    }
    if g == 1 {
        comps[0].pi = 1.0;
    }
    MixtureModel::from_components(comps, design)
}

fn sample_sd(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// BIC = −2L + d log n.
pub fn bic(model: &MixtureModel, data: &ExpressionMatrix) -> f64 {
    bic_value(model.log_likelihood, model.n_free_parameters(), data.n_features())
}

pub fn bic_value(log_likelihood: f64, n_params: usize, n: usize) -> f64 {
    -2.0 * log_likelihood + n_params as f64 * (n as f64).ln()
}

/// Fill τ, MAP labels and counts from moments at the model's ĉ.
pub fn finalize(data: &ExpressionMatrix, mut model: MixtureModel) -> Result<MixtureModel> {
    let kernels = model.kernels()?;
    let mom = moments(data, &kernels, &model.c_hat, false);
    let g = model.g;
    model.tau = mom.tau;
    model.z_map = (0..data.n_features())
        .map(|j| argmax(&model.tau[j * g..(j + 1) * g]))
        .collect();
    model.n_map = vec![0; g];
    for &z in &model.z_map {
        model.n_map[z] += 1;
    }
    model.log_likelihood = mom.log_likelihood;
    model.bic = bic(&model, data);
    Ok(model)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Run EM from `model` until convergence or `max_iter`.
pub fn run_em(data: &ExpressionMatrix, mut model: MixtureModel, config: &EmConfig) -> Result<(MixtureModel, FitTrace)> {
    let g = model.g;
    let m = model.n_classes();
    let mut kernels = model.kernels()?;
    let mut current = moments(data, &kernels, &model.c_hat, true);
    check_finite(current.log_likelihood)?;
    let mut trace = FitTrace {
        log_likelihood: vec![current.log_likelihood],
        converged: false,
        iterations: 0,
        best_start: 0,
        floored: 0,
        dropped_components: 0,
    };
    for _ in 0..config.max_iter {
        // ĉ proposal and safeguarded acceptance
        let (proposal, c_tr) = conditional_c(data, &model, &kernels, &current.tau)?;
        let mut accepted = None;
        let mut step = 1.0;
        for _ in 0..=C_HALVINGS {
            let cand: Vec<Vec<f64>> = if step == 1.0 {
                proposal.clone()
            } else {
                model
                    .c_hat
                    .iter()
                    .zip(&proposal)
                    .map(|(old, new)| old.iter().zip(new).map(|(a, b)| a + step * (b - a)).collect())
                    .collect()
            };
            let mom = moments(data, &kernels, &cand, true);
            if mom.log_likelihood >= current.log_likelihood {
                accepted = Some((cand, mom));
                break;
            }
            step *= 0.5;
        }
        let (c_acc, mom_acc) = accepted.unwrap_or_else(|| (model.c_hat.clone(), current.clone()));
        let estep = EStep {
            tau: mom_acc.tau,
            b_hat: mom_acc.b_hat,
            c_hat: c_acc,
            b_cov: kernels.iter().map(|k| k.b_conditional_cov()).collect(),
            c_cov_trace: c_tr,
            g,
            m,
        };
        let (next, report) = m_step(data, &estep, &model)?;
        trace.floored += report.floored;
        let next_kernels = next.kernels()?;
        let next_mom = moments(data, &next_kernels, &next.c_hat, true);
        check_finite(next_mom.log_likelihood)?;
        let old = *trace.log_likelihood.last().unwrap();
        let new = next_mom.log_likelihood;
        trace.log_likelihood.push(new);
        trace.iterations += 1;
        model = next;
        kernels = next_kernels;
        current = next_mom;
        if (new - old).abs() / old.abs().max(1.0) < config.rel_tol {
            trace.converged = true;
            break;
        }
    }
    Ok((model, trace))
}

/// Halvings of the ĉ step before the previous ĉ is kept. Near a fixed
/// point the shrunk proposal is usually not an ascent direction for the
/// ĉ-conditional likelihood at any step size, so long searches are wasted.
const C_HALVINGS: usize = 1;

fn check_finite(ll: f64) -> Result<()> {
    if ll.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("non-finite log-likelihood {ll}")))
    }
}

/// One start: initialize, run EM, drop components left without MAP members
/// and continue from the reduced model.
fn fit_one_start(data: &ExpressionMatrix, g: usize, config: &EmConfig, start: usize) -> Result<(MixtureModel, FitTrace)> {
    let start_seed = seed::derive(config.seed, start as u64);
    let model = initialize(data, g, start_seed)?;
    let (mut model, mut trace) = run_em(data, model, config)?;
    let mut dropped = 0;
    loop {
        model = finalize(data, model)?;
        let empty: Vec<usize> = (0..model.g).filter(|&i| model.n_map[i] == 0).collect();
        if empty.is_empty() || model.g == 1 {
            break;
        }
        dropped += empty.len();
        let keep: Vec<usize> = (0..model.g).filter(|i| !empty.contains(i)).collect();
        let mut comps: Vec<ComponentParams> = keep.iter().map(|&i| model.components[i].clone()).collect();
        let total: f64 = comps.iter().map(|c| c.pi).sum();
        for c in comps.iter_mut() {
            c.pi = if keep.len() == 1 { 1.0 } else { c.pi / total };
        }
        let c_hat: Vec<Vec<f64>> = keep.iter().map(|&i| model.c_hat[i].clone()).collect();
        let mut reduced = MixtureModel::from_components(comps, model.design.clone())?;
        reduced.c_hat = c_hat;
        let (m2, t2) = run_em(data, reduced, config)?;
        model = m2;
        trace = t2;
    }
    trace.dropped_components = dropped;
    trace.best_start = start;
    Ok((model, trace))
}

/// Best of `n_starts` EM runs by final log-likelihood.
pub fn fit_mixture(data: &ExpressionMatrix, g: usize, config: &EmConfig) -> Result<(MixtureModel, FitTrace)> {
    config.validate()?;
    if !data.is_standardized() {
        return Err(Error::Data("fit_mixture expects column-standardized data".into()));
    }
    let runs: Vec<Result<(MixtureModel, FitTrace)>> = (0..config.n_starts)
        .into_par_iter()
        .map(|s| fit_one_start(data, g, config, s))
        .collect();
    let mut best: Option<(MixtureModel, FitTrace)> = None;
    let mut first_err = None;
    for r in runs {
        match r {
            Ok((m, t)) => {
                let better = best.as_ref().is_none_or(|(b, _)| m.log_likelihood > b.log_likelihood);
                if better {
                    best = Some((m, t));
                }
            }
            Err(e) => {
                log::warn!("EM start failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    match best {
        Some(b) => Ok(b),
        None => Err(first_err.unwrap_or_else(|| Error::Numerical("no EM start succeeded".into()))),
    }
}

/// One row of the model-selection table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GFit {
    pub g: usize,
    pub log_likelihood: f64,
    pub bic: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Component count after dropping empty components.
    pub fitted_g: usize,
    pub error: Option<String>,
}

/// Fit every g in the configured range; return the BIC-minimizing model
/// (ties to smaller g) and the table sorted by g.
pub fn select_g(data: &ExpressionMatrix, config: &EmConfig) -> Result<(MixtureModel, FitTrace, Vec<GFit>)> {
    config.validate()?;
    let (lo, hi) = config.g_range;
    let fits: Vec<(usize, Result<(MixtureModel, FitTrace)>)> = (lo..=hi)
        .into_par_iter()
        .map(|g| (g, fit_mixture(data, g, config)))
        .collect();
    let mut table = Vec::new();
    let mut best: Option<(MixtureModel, FitTrace)> = None;
    let mut first_err = None;
    for (g, r) in fits {
        match r {
            Ok((model, trace)) => {
                table.push(GFit {
                    g,
                    log_likelihood: model.log_likelihood,
                    bic: model.bic,
                    converged: trace.converged,
                    iterations: trace.iterations,
                    fitted_g: model.g,
                    error: None,
                });
                if best.as_ref().is_none_or(|(b, _)| model.bic < b.bic) {
                    best = Some((model, trace));
                }
            }
            Err(e) => {
                table.push(GFit {
                    g,
                    log_likelihood: f64::NAN,
                    bic: f64::NAN,
                    converged: false,
                    iterations: 0,
                    fitted_g: 0,
                    error: Some(e.to_string()),
                });
                first_err.get_or_insert(e);
            }
        }
    }
    match best {
        Some((m, t)) => Ok((m, t, table)),
        None => Err(first_err.unwrap_or_else(|| Error::Numerical("every g failed".into()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::column_standardize;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn bic_formula() {
        // g = 1, m = 2 → d = 7
        assert_relative_eq!(bic_value(-100.0, 7, 1000), 248.354, epsilon = 1e-3);
        assert_relative_eq!(bic_value(-100.0, 7, 1000), 200.0 + 7.0 * 1000f64.ln(), epsilon = 1e-12);
    }

    fn two_groups(seed: u64, n_per: usize, gap: f64) -> (ExpressionMatrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for grp in 0..2 {
            for _ in 0..n_per {
                let base = grp as f64 * gap;
                rows.push(
                    (0..6)
                        .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); base + z })
                        .collect::<Vec<f64>>(),
                );
                truth.push(grp);
            }
        }
        (ExpressionMatrix::from_rows(&rows, vec![1, 1, 1, 2, 2, 2]).unwrap(), truth)
    }

    #[test]
    fn kmeans_recovers_separated_groups() {
        let (d, truth) = two_groups(3, 60, 10.0);
        let mut rng = seed::rng(11, 0);
        let a = kmeans(&d, 2, &mut rng).unwrap();
        let agree = a.iter().zip(&truth).filter(|(x, y)| x == y).count();
        let acc = agree.max(a.len() - agree) as f64 / a.len() as f64;
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn initialize_single_cluster_closed_form() {
        let (d, _) = two_groups(5, 20, 1.0);
        let d = column_standardize(&d).unwrap();
        let m = initialize(&d, 1, 1).unwrap();
        assert_eq!(m.components[0].pi, 1.0);
        for h in 0..2 {
            let mut s = 0.0;
            let mut c = 0.0;
            for j in 0..d.n_features() {
                for k in 0..6 {
                    if d.class_of_sample()[k] == h + 1 {
                        s += d.get(j, k);
                        c += 1.0;
                    }
                }
            }
            assert_relative_eq!(m.components[0].beta[h], s / c, epsilon = 1e-12);
        }
    }

    #[test]
    fn initialize_is_deterministic() {
        let (d, _) = two_groups(9, 40, 3.0);
        let d = column_standardize(&d).unwrap();
        let (a, b) = (initialize(&d, 2, 77).unwrap(), initialize(&d, 2, 77).unwrap());
        assert_eq!(a.components, b.components);
    }

    #[test]
    fn update_b_never_decreases_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mk = |rng: &mut ChaCha8Rng| {
                let a: DMatrix<f64> = DMatrix::from_fn(2, 2, |_, _| StandardNormal.sample(rng));
                a.transpose() * a + DMatrix::identity(2, 2) * 0.1
            };
            let stats = vec![mk(&mut rng), mk(&mut rng)];
            let w = vec![3.0, 7.0];
            let prev = vec![vec![0.5, 2.0], vec![1.5, 0.3]];
            let before = b_objective(&w, &stats, &prev, 0.1);
            let (sig, rho) = update_b(&w, &stats, &prev, 0.1);
            assert!(b_objective(&w, &stats, &sig, rho) >= before);
            assert!(rho.abs() <= RHO_MAX);
        }
    }

    #[test]
    fn m_step_single_component_gives_class_means() {
        let (d, _) = two_groups(2, 30, 0.0);
        let d = column_standardize(&d).unwrap();
        let model = initialize(&d, 1, 0).unwrap();
        let n = d.n_features();
        let estep = EStep {
            tau: vec![1.0; n],
            b_hat: vec![0.0; n * 2],
            c_hat: vec![vec![0.0; 6]],
            b_cov: vec![DMatrix::identity(2, 2) * 0.1],
            c_cov_trace: vec![0.0],
            g: 1,
            m: 2,
        };
        let (next, _) = m_step(&d, &estep, &model).unwrap();
        for h in 0..2 {
            let mut mean = 0.0;
            for j in 0..n {
                for k in 0..6 {
                    if d.class_of_sample()[k] == h + 1 {
                        mean += d.get(j, k);
                    }
                }
            }
            mean /= (n * 3) as f64;
            assert_relative_eq!(next.components[0].beta[h], mean, epsilon = 1e-12);
        }
    }

    #[test]
    fn m_step_mirrored_tau_gives_equal_proportions() {
        let (d, _) = two_groups(4, 25, 4.0);
        let d = column_standardize(&d).unwrap();
        let model = initialize(&d, 2, 0).unwrap();
        let n = d.n_features();
        let mut es = e_step(&d, &model).unwrap();
        for j in 0..n {
            let t = if j < n / 2 { 0.8 } else { 0.2 };
            es.tau[j * 2] = t;
            es.tau[j * 2 + 1] = 1.0 - t;
        }
        let (next, _) = m_step(&d, &es, &model).unwrap();
        assert_relative_eq!(next.components[0].pi, 0.5, epsilon = 1e-12);
        assert_relative_eq!(next.components[1].pi, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn select_g_singleton_range() {
        let (d, _) = two_groups(8, 40, 4.0);
        let d = column_standardize(&d).unwrap();
        let cfg = EmConfig {
            n_starts: 2,
            g_range: (2, 2),
            max_iter: 200,
            ..Default::default()
        };
        let (m, _, table) = select_g(&d, &cfg).unwrap();
        assert_eq!(m.g, 2);
        assert_eq!(table.len(), 1);
    }

    #[test]
    fn config_validation() {
        assert!(EmConfig { n_starts: 0, ..Default::default() }.validate().is_err());
        assert!(EmConfig { g_range: (0, 3), ..Default::default() }.validate().is_err());
        assert!(EmConfig { g_range: (4, 3), ..Default::default() }.validate().is_err());
    }
}
