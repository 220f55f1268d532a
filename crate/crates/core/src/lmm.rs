//! The g-component mixture of linear mixed models.
//!
//! Conditional on membership of component i, a profile follows
//!
//! ```text
//! y = X β_i + U b_i + V c_i + ε,   b_i ~ N(0, B_i),  c_i ~ N(0, σ²_c,i I),  ε ~ N(0, σ²_e,i I)
//! ```
//!
//! with `U = X` (class indicators) and `V = I_p`. Given the shared effect
//! `c_i`, the profile is normal with covariance `Σ_i = X B_i Xᵀ + σ²_e,i I`.
//! Because X is an indicator matrix, every quantity the EM needs from `Σ_i`
//! reduces to m×m algebra through the Woodbury identity; [`ComponentKernel`]
//! holds that factorization.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::DesignMatrices;
use crate::error::{Error, Result};

/// Largest admissible |ρ|.
pub const RHO_MAX: f64 = 0.99;

/// Floor applied to every variance parameter.
pub const VARIANCE_FLOOR: f64 = 1e-10;

/// Parameters of one mixture component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentParams {
    pub pi: f64,
    /// Fixed effects, one per class.
    pub beta: Vec<f64>,
    /// Standard deviations of the gene-specific random effects, one per class.
    pub sigma_b: Vec<f64>,
    /// Correlation between a gene's class effects. Shared by all components.
    pub rho: f64,
    pub sigma_c_sq: f64,
    pub sigma_e_sq: f64,
}

impl ComponentParams {
    pub fn n_classes(&self) -> usize {
        self.beta.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::ParameterDomain(msg));
        if !(self.pi > 0.0 && self.pi < 1.0) && self.pi != 1.0 {
            return bad(format!("mixing proportion {} outside (0,1)", self.pi));
        }
        if self.sigma_b.len() != self.beta.len() {
            return bad("sigma_b and beta lengths differ".into());
        }
        if self.sigma_b.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return bad("sigma_b must be positive".into());
        }
        if !(self.rho.abs() <= RHO_MAX) {
            return bad(format!("|rho| = {} exceeds {RHO_MAX}", self.rho.abs()));
        }
        if !(self.sigma_c_sq >= 0.0) || !(self.sigma_e_sq > 0.0) {
            return bad("variance components must be non-negative (sigma_e_sq > 0)".into());
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return bad("non-finite fixed effect".into());
        }
        Ok(())
    }

    pub fn b_matrix(&self) -> Result<DMatrix<f64>> {
        build_b(&self.sigma_b, self.rho)
    }
}

/// B_i: diagonal σ²_bh, off-diagonal ρ σ_bh σ_bk.
pub fn build_b(sigma_b: &[f64], rho: f64) -> Result<DMatrix<f64>> {
    if !(rho.abs() <= RHO_MAX) {
        return Err(Error::ParameterDomain(format!("|rho| = {} exceeds {RHO_MAX}", rho.abs())));
    }
    if sigma_b.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::ParameterDomain("sigma_b must be positive".into()));
    }
    let m = sigma_b.len();
    if m > 2 && rho <= -1.0 / (m as f64 - 1.0) {
        return Err(Error::ParameterDomain(format!(
            "rho = {rho} makes the {m}-class equicorrelation matrix singular"
        )));
    }
    Ok(DMatrix::from_fn(m, m, |h, k| {
        if h == k {
            sigma_b[h] * sigma_b[h]
        } else {
            rho * sigma_b[h] * sigma_b[k]
        }
    }))
}

/// Inverse and log-determinant of the m×m equicorrelation matrix
/// `(1−ρ) I + ρ 11ᵀ`.
pub(crate) fn equicorrelation_inverse(m: usize, rho: f64) -> (DMatrix<f64>, f64) {
    if m == 1 {
        return (DMatrix::from_element(1, 1, 1.0), 0.0);
    }
    let mf = m as f64;
    let a = 1.0 - rho;
    let denom = 1.0 + (mf - 1.0) * rho;
    let off = -rho / (a * denom);
    let inv = DMatrix::from_fn(m, m, |h, k| if h == k { 1.0 / a + off } else { off });
    let logdet = (mf - 1.0) * a.ln() + denom.ln();
    (inv, logdet)
}

/// `Σ_i = U B_i Uᵀ + σ²_e,i I_p`, the covariance of a profile given c_i.
pub fn conditional_covariance(comp: &ComponentParams, design: &DesignMatrices) -> Result<DMatrix<f64>> {
    comp.validate()?;
    let b = comp.b_matrix()?;
    let u = &design.u;
    let p = u.nrows();
    Ok(u * b * u.transpose() + DMatrix::identity(p, p) * comp.sigma_e_sq)
}

/// Per-component factorization used by the E-step, the likelihood and the
/// BLUPs.
///
/// With `P = XᵀX = diag(p_h)` and `M = σ²_e B⁻¹ + P`:
/// `Σ⁻¹ = (I − X M⁻¹ Xᵀ)/σ²_e`, `log|Σ| = log|B| + log|M| + (p−m) log σ²_e`,
/// `E[b | y, c] = M⁻¹ Xᵀ r` and `cov[b | y, c] = σ²_e M⁻¹`.
#[derive(Debug, Clone)]
pub struct ComponentKernel {
    pub(crate) component: usize,
    pub(crate) p: usize,
    pub(crate) m: usize,
    pub(crate) class_of_sample: Vec<usize>,
    pub(crate) class_sizes: Vec<f64>,
    pub(crate) beta: Vec<f64>,
    pub(crate) sigma_e_sq: f64,
    pub(crate) log_pi: f64,
    pub(crate) m_inv: DMatrix<f64>,
    pub(crate) b: DMatrix<f64>,
    pub(crate) b_inv: DMatrix<f64>,
    pub(crate) log_det_sigma: f64,
    pub(crate) log_det_b: f64,
}

impl ComponentKernel {
    pub fn new(component: usize, comp: &ComponentParams, design: &DesignMatrices) -> Result<Self> {
        let m = comp.n_classes();
        if design.n_classes() != m {
            return Err(Error::Data(format!(
                "component {component} has {m} fixed effects but the design has {} classes",
                design.n_classes()
            )));
        }
        let p = design.n_samples();
        let cond = |message: String| Error::Conditioning { component, message };
        let (r_inv, log_det_r) = equicorrelation_inverse(m, comp.rho);
        let b_inv = DMatrix::from_fn(m, m, |h, k| r_inv[(h, k)] / (comp.sigma_b[h] * comp.sigma_b[k]));
        let log_det_b = log_det_r + 2.0 * comp.sigma_b.iter().map(|s| s.ln()).sum::<f64>();
        let class_sizes: Vec<f64> = design.class_sizes().iter().map(|&s| s as f64).collect();
        let mut mm = &b_inv * comp.sigma_e_sq;
        for h in 0..m {
            mm[(h, h)] += class_sizes[h];
        }
        let chol = Cholesky::new(mm.clone()).ok_or_else(|| cond("M = σ²_e B⁻¹ + XᵀX is not positive definite".into()))?;
        let log_det_m: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let m_inv = chol.inverse();
        let log_det_sigma = log_det_b + log_det_m + (p as f64 - m as f64) * comp.sigma_e_sq.ln();
        if !log_det_sigma.is_finite() || m_inv.iter().any(|v| !v.is_finite()) {
            return Err(cond("singular component covariance".into()));
        }
        Ok(Self {
            component,
            p,
            m,
            class_of_sample: design.class_of_sample().to_vec(),
            class_sizes,
            beta: comp.beta.clone(),
            sigma_e_sq: comp.sigma_e_sq,
            log_pi: comp.pi.ln(),
            m_inv,
            b: comp.b_matrix()?,
            b_inv,
            log_det_sigma,
            log_det_b,
        })
    }

    pub fn component(&self) -> usize {
        self.component
    }

    pub fn class_sizes(&self) -> &[f64] {
        &self.class_sizes
    }

    /// `log|B_i|`.
    pub fn log_det_b(&self) -> f64 {
        self.log_det_b
    }

    /// Residual `y − Xβ − c` written into `out`.
    pub(crate) fn residual_into(&self, y: &[f64], c: &[f64], out: &mut [f64]) {
        for k in 0..self.p {
            out[k] = y[k] - self.beta[self.class_of_sample[k] - 1] - c[k];
        }
    }

    /// Class sums Xᵀr.
    pub(crate) fn class_sums(&self, r: &[f64]) -> DVector<f64> {
        let mut s = DVector::zeros(self.m);
        for (k, &v) in r.iter().enumerate() {
            s[self.class_of_sample[k] - 1] += v;
        }
        s
    }

    /// `rᵀ Σ⁻¹ r` given the residual and its class sums.
    pub(crate) fn quad_form(&self, r: &[f64], sums: &DVector<f64>) -> f64 {
        let rr: f64 = r.iter().map(|v| v * v).sum();
        let mut corr = 0.0;
        for h in 0..self.m {
            let mut row = 0.0;
            for k in 0..self.m {
                row += self.m_inv[(h, k)] * sums[k];
            }
            corr += sums[h] * row;
        }
        (rr - corr) / self.sigma_e_sq
    }

    /// log N(y; Xβ + c, Σ).
    pub fn log_density(&self, y: &[f64], c: &[f64]) -> f64 {
        let mut r = vec![0.0; self.p];
        self.residual_into(y, c, &mut r);
        let sums = self.class_sums(&r);
        self.log_density_from(&r, &sums)
    }

    pub(crate) fn log_density_from(&self, r: &[f64], sums: &DVector<f64>) -> f64 {
        -0.5 * (self.p as f64 * (2.0 * PI).ln() + self.log_det_sigma + self.quad_form(r, sums))
    }

    /// `E[b | y, c] = B Xᵀ Σ⁻¹ r = M⁻¹ Xᵀ r`.
    pub fn blup_b(&self, y: &[f64], c: &[f64]) -> DVector<f64> {
        let mut r = vec![0.0; self.p];
        self.residual_into(y, c, &mut r);
        &self.m_inv * self.class_sums(&r)
    }

    /// `cov[b | y, c] = σ²_e M⁻¹`, the same for every profile.
    pub fn b_conditional_cov(&self) -> DMatrix<f64> {
        &self.m_inv * self.sigma_e_sq
    }

    /// Dense `Σ⁻¹` (p×p).
    pub fn sigma_inverse(&self) -> DMatrix<f64> {
        let p = self.p;
        DMatrix::from_fn(p, p, |a, b| {
            let v = -self.m_inv[(self.class_of_sample[a] - 1, self.class_of_sample[b] - 1)];
            (if a == b { 1.0 + v } else { v }) / self.sigma_e_sq
        })
    }

    pub fn log_pi(&self) -> f64 {
        self.log_pi
    }
}

/// Normalize log-weights onto the simplex with the log-sum-exp shift.
pub fn softmax_in_place(logw: &mut [f64]) {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        let u = 1.0 / logw.len() as f64;
        logw.iter_mut().for_each(|w| *w = u);
        return;
    }
    let mut sum = 0.0;
    for w in logw.iter_mut() {
        *w = (*w - max).exp();
        sum += *w;
    }
    logw.iter_mut().for_each(|w| *w /= sum);
}

/// `log Σ exp(x)`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// A fitted (or initial) mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModel {
    pub g: usize,
    pub components: Vec<ComponentParams>,
    pub design: DesignMatrices,
    /// Component-shared random effects ĉ_i (g × p) the posteriors condition on.
    pub c_hat: Vec<Vec<f64>>,
    /// n × g posterior probabilities, row-major.
    pub tau: Vec<f64>,
    /// 0-based MAP component per feature.
    pub z_map: Vec<usize>,
    pub n_map: Vec<usize>,
    pub log_likelihood: f64,
    pub bic: f64,
}

impl MixtureModel {
    /// Model with the given parameters and ĉ = 0; posterior fields empty.
    pub fn from_components(components: Vec<ComponentParams>, design: DesignMatrices) -> Result<Self> {
        let g = components.len();
        if g == 0 {
            return Err(Error::ParameterDomain("a mixture needs at least one component".into()));
        }
        let p = design.n_samples();
        for c in &components {
            c.validate()?;
        }
        let total: f64 = components.iter().map(|c| c.pi).sum();
        if (total - 1.0).abs() > 1e-10 {
            return Err(Error::ParameterDomain(format!("mixing proportions sum to {total}, not 1")));
        }
        Ok(Self {
            g,
            components,
            design,
            c_hat: vec![vec![0.0; p]; g],
            tau: Vec::new(),
            z_map: Vec::new(),
            n_map: vec![0; g],
            log_likelihood: f64::NAN,
            bic: f64::NAN,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.design.n_classes()
    }

    pub fn n_samples(&self) -> usize {
        self.design.n_samples()
    }

    /// The shared correlation (identical across components).
    pub fn rho(&self) -> f64 {
        self.components[0].rho
    }

    pub fn kernels(&self) -> Result<Vec<ComponentKernel>> {
        self.components
            .iter()
            .enumerate()
            .map(|(i, c)| ComponentKernel::new(i, c, &self.design))
            .collect()
    }

    /// Row `j` of τ.
    pub fn tau_row(&self, j: usize) -> &[f64] {
        &self.tau[j * self.g..(j + 1) * self.g]
    }

    /// Count of free parameters: mixing (g−1), β (gm), σ_b (gm), σ²_e (g),
    /// σ²_c (g) and the shared ρ.
    pub fn n_free_parameters(&self) -> usize {
        let (g, m) = (self.g, self.n_classes());
        (g - 1) + 2 * g * m + 2 * g + 1
    }
}

/// Posterior membership of profile `y` given ĉ_i for each component:
/// `τ_i ∝ π_i N(y; Xβ_i + ĉ_i, Σ_i)`.
pub fn posterior_tau(y: &[f64], model: &MixtureModel, c_hats: &[Vec<f64>]) -> Result<Vec<f64>> {
    if c_hats.len() != model.g {
        return Err(Error::Data(format!("{} ĉ vectors for {} components", c_hats.len(), model.g)));
    }
    let kernels = model.kernels()?;
    let mut logw: Vec<f64> = kernels
        .iter()
        .zip(c_hats)
        .map(|(k, c)| k.log_pi + k.log_density(y, c))
        .collect();
    softmax_in_place(&mut logw);
    Ok(logw)
}
