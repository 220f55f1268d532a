//! Cluster-specific normalized contrasts and the weighted statistic W.
//!
//! For component i the stacked effect vector is `r_i = (β_i, b_i1 … b_in′, c_i)`
//! and the contrast for a gene in slot s is
//!
//! ```text
//! dᵀ r_i = (β_hi − β_ki) + (b_h,s − b_k,s)
//! ```
//!
//! Its variance `λ² = dᵀ Ω_i d` uses the inverse of the mixed-model
//! coefficient matrix
//!
//! ```text
//!        ⎡ n′K       1ᵀ⊗K     n′L  ⎤
//! Ω⁻¹ =  ⎢ 1⊗K      I⊗D      1⊗L  ⎥ ,  K = XᵀX/σ²_e, L = Xᵀ/σ²_e,
//!        ⎣ n′Lᵀ     1ᵀ⊗Lᵀ    n′G  ⎦    D = K + B⁻¹, G = I/σ²_e + I/σ²_c.
//! ```
//!
//! Eliminating the n′ identical gene blocks leaves the (m+p)-dimensional
//! system `n′ S (β, c) = rhs` with `S` the one-gene Schur complement
//! `[[K, L], [Lᵀ, G]] − [K; Lᵀ] D⁻¹ [K, L]`, so λ² never needs the
//! `m + m n′ + p` matrix and does not depend on the slot.

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;

use crate::data::ExpressionMatrix;
use crate::em;
use crate::error::{Error, Result};
use crate::lmm::{softmax_in_place, ComponentKernel, MixtureModel, VARIANCE_FLOOR};

/// BLUPs of the random effects for every (feature, component) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffectsEstimates {
    pub n: usize,
    pub g: usize,
    pub m: usize,
    pub p: usize,
    /// n×g×m, index `(j*g + i)*m + h`.
    pub b_hat: Vec<f64>,
    /// g × p.
    pub c_hat: Vec<Vec<f64>>,
    /// g × m, copied from the model.
    pub beta_hat: Vec<Vec<f64>>,
}

impl RandomEffectsEstimates {
    pub fn b_hat_at(&self, j: usize, i: usize) -> &[f64] {
        let o = (j * self.g + i) * self.m;
        &self.b_hat[o..o + self.m]
    }
}

/// `b̂_ij = E[b_ij | y_j, z_ij = 1]` for all pairs and `ĉ_i = E[c_i | y]`,
/// from a final E-step on the fitted model.
pub fn estimate_blups(data: &ExpressionMatrix, model: &MixtureModel) -> Result<RandomEffectsEstimates> {
    let es = em::e_step(data, model)?;
    Ok(RandomEffectsEstimates {
        n: data.n_features(),
        g: model.g,
        m: model.n_classes(),
        p: model.n_samples(),
        b_hat: es.b_hat,
        c_hat: es.c_hat,
        beta_hat: model.components.iter().map(|c| c.beta.clone()).collect(),
    })
}

/// A contrast vector in the layout `β | b_1 … b_n′ | c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ContrastVector {
    /// 1-based classes, h < k.
    pub class_pair: (usize, usize),
    /// 1-based position of the target gene among the n′ gene blocks.
    pub slot: usize,
    pub n_prime: usize,
    pub m: usize,
}

impl ContrastVector {
    pub fn new(class_pair: (usize, usize), slot: usize, n_prime: usize, m: usize) -> Result<Self> {
        let (h, k) = class_pair;
        if !(1 <= h && h < k && k <= m) {
            return Err(Error::ParameterDomain(format!("class pair ({h},{k}) invalid for m = {m}")));
        }
        if slot < 1 || slot > n_prime {
            return Err(Error::ParameterDomain(format!("slot {slot} outside 1..={n_prime}")));
        }
        Ok(Self {
            class_pair,
            slot,
            n_prime,
            m,
        })
    }

    /// The m-vector `e_h − e_k` used in both the β and the slot partition.
    pub fn class_difference(&self) -> DVector<f64> {
        let mut e = DVector::zeros(self.m);
        e[self.class_pair.0 - 1] = 1.0;
        e[self.class_pair.1 - 1] = -1.0;
        e
    }

    pub fn len(&self, p: usize) -> usize {
        self.m + self.m * self.n_prime + p
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Materialized vector (tests and diagnostics only).
    pub fn to_dense(&self, p: usize) -> DVector<f64> {
        let mut d = DVector::zeros(self.len(p));
        let e = self.class_difference();
        let off = self.m + (self.slot - 1) * self.m;
        for h in 0..self.m {
            d[h] = e[h];
            d[off + h] = e[h];
        }
        d
    }
}

/// The distinct blocks of Ω_i⁻¹. Replicated gene blocks are stored once.
#[derive(Debug, Clone, PartialEq)]
pub struct OmegaBlocks {
    pub component: usize,
    pub n_prime: usize,
    /// `n′ XᵀA⁻¹X`.
    pub omega_beta: DMatrix<f64>,
    /// Unit block `XᵀA⁻¹U` replicated as `1ᵀ ⊗ ·`.
    pub omega_beta_b: DMatrix<f64>,
    /// `n′ XᵀA⁻¹V`.
    pub omega_beta_c: DMatrix<f64>,
    /// Per-gene block `UᵀA⁻¹U + B⁻¹` replicated as `I ⊗ ·`.
    pub omega_b: DMatrix<f64>,
    /// Unit block `UᵀA⁻¹V` replicated as `1 ⊗ ·`.
    pub omega_b_c: DMatrix<f64>,
    /// `n′ (VᵀA⁻¹V + C⁻¹)`.
    pub omega_c: DMatrix<f64>,
}

impl OmegaBlocks {
    pub fn m(&self) -> usize {
        self.omega_beta.nrows()
    }

    pub fn p(&self) -> usize {
        self.omega_c.nrows()
    }

    /// The full coefficient matrix (before inversion). Only for small n′.
    pub fn dense_precision(&self) -> DMatrix<f64> {
        let (m, p, n) = (self.m(), self.p(), self.n_prime);
        let dim = m + m * n + p;
        let mut a = DMatrix::zeros(dim, dim);
        let c0 = m + m * n;
        a.view_mut((0, 0), (m, m)).copy_from(&self.omega_beta);
        a.view_mut((0, c0), (m, p)).copy_from(&self.omega_beta_c);
        a.view_mut((c0, 0), (p, m)).copy_from(&self.omega_beta_c.transpose());
        a.view_mut((c0, c0), (p, p)).copy_from(&self.omega_c);
        for s in 0..n {
            let o = m + s * m;
            a.view_mut((0, o), (m, m)).copy_from(&self.omega_beta_b);
            a.view_mut((o, 0), (m, m)).copy_from(&self.omega_beta_b.transpose());
            a.view_mut((o, o), (m, m)).copy_from(&self.omega_b);
            a.view_mut((o, c0), (m, p)).copy_from(&self.omega_b_c);
            a.view_mut((c0, o), (p, m)).copy_from(&self.omega_b_c.transpose());
        }
        a
    }
}

/// Blocks of Ω_i⁻¹ with `A_i = σ²_e I`, `C_i = σ²_c I`, `U = X`, `V = I`.
/// `n′ = n_i` for members, `n_i + 1` for a gene scored as appended.
pub fn assemble_omega(model: &MixtureModel, i: usize, member: bool) -> Result<OmegaBlocks> {
    if i >= model.g {
        return Err(Error::ParameterDomain(format!("component {i} out of range")));
    }
    let n_i = model.n_map.get(i).copied().unwrap_or(0);
    if member && n_i == 0 {
        return Err(Error::EmptyComponent(i));
    }
    let n_prime = if member { n_i } else { n_i + 1 };
    omega_blocks(i, &model.components[i], &model.design, n_prime)
}

/// Blocks for explicit parameters and n′.
pub fn omega_blocks(
    component: usize,
    comp: &crate::lmm::ComponentParams,
    design: &crate::data::DesignMatrices,
    n_prime: usize,
) -> Result<OmegaBlocks> {
    if n_prime == 0 {
        return Err(Error::EmptyComponent(component));
    }
    let kernel = ComponentKernel::new(component, comp, design)?;
    let x = &design.x;
    let p = design.n_samples();
    let inv_e = 1.0 / comp.sigma_e_sq;
    let inv_c = 1.0 / comp.sigma_c_sq.max(VARIANCE_FLOOR);
    let k = x.transpose() * x * inv_e;
    let l = x.transpose() * inv_e;
    let nf = n_prime as f64;
    Ok(OmegaBlocks {
        component,
        n_prime,
        omega_beta: &k * nf,
        omega_beta_b: k.clone(),
        omega_beta_c: &l * nf,
        omega_b: &k + &kernel.b_inv,
        omega_b_c: l,
        omega_c: DMatrix::identity(p, p) * (nf * (inv_e + inv_c)),
    })
}

/// `λ² = dᵀ Ω_i d`, by block elimination of the gene partition.
pub fn contrast_variance(blocks: &OmegaBlocks, d: &ContrastVector) -> Result<f64> {
    let (m, p) = (blocks.m(), blocks.p());
    if d.m != m || d.n_prime != blocks.n_prime {
        return Err(Error::ParameterDomain(format!(
            "contrast dimensioned for (m={}, n′={}) but blocks have (m={m}, n′={})",
            d.m, d.n_prime, blocks.n_prime
        )));
    }
    let cond = |message: &str| Error::Conditioning {
        component: blocks.component,
        message: message.to_string(),
    };
    let nf = blocks.n_prime as f64;
    let k = &blocks.omega_beta_b;
    let l = &blocks.omega_b_c;
    let g = &blocks.omega_c / nf;
    let d_chol = Cholesky::new(blocks.omega_b.clone()).ok_or_else(|| cond("per-gene block is not positive definite"))?;
    let dinv_k = d_chol.solve(k);
    let dinv_l = d_chol.solve(l);

    // one-gene Schur complement S, scaled by n′
    let mut s = DMatrix::zeros(m + p, m + p);
    s.view_mut((0, 0), (m, m)).copy_from(&(k - k * &dinv_k));
    let s_bc = l - k * &dinv_l;
    s.view_mut((0, m), (m, p)).copy_from(&s_bc);
    s.view_mut((m, 0), (p, m)).copy_from(&s_bc.transpose());
    s.view_mut((m, m), (p, p)).copy_from(&(&g - l.transpose() * &dinv_l));
    s *= nf;

    let e_beta = d.class_difference();
    let e_slot = d.class_difference();
    let dinv_es = d_chol.solve(&e_slot);
    let mut rhs = DVector::zeros(m + p);
    rhs.rows_mut(0, m).copy_from(&(&e_beta - k * &dinv_es));
    rhs.rows_mut(m, p).copy_from(&(-(l.transpose() * &dinv_es)));

    let s_chol = Cholesky::new(s).ok_or_else(|| cond("reduced (β, c) system is not positive definite"))?;
    let sol = s_chol.solve(&rhs);
    let beta = sol.rows(0, m);
    let c = sol.rows(m, p);
    // b at the slot: D⁻¹ (e − Kβ − Lc)
    let b_slot = d_chol.solve(&(&e_slot - k * beta - l * c));
    let lambda_sq = e_beta.dot(&beta) + e_slot.dot(&b_slot);
    if !(lambda_sq > 0.0) || !lambda_sq.is_finite() {
        return Err(cond("non-positive contrast variance"));
    }
    Ok(lambda_sq)
}

/// `Ŝ_ij = (β̂_hi − β̂_ki + b̂_hij − b̂_kij) / λ_ij`.
pub fn normalized_contrast(estimates: &RandomEffectsEstimates, j: usize, i: usize, pair: (usize, usize), lambda: f64) -> f64 {
    let (h, k) = (pair.0 - 1, pair.1 - 1);
    let beta = &estimates.beta_hat[i];
    let b = estimates.b_hat_at(j, i);
    (beta[h] - beta[k] + b[h] - b[k]) / lambda
}

/// `W_j = Σ_i τ_ij Ŝ_ij`.
pub fn weighted_statistic(tau_row: &[f64], s_row: &[f64]) -> f64 {
    tau_row.iter().zip(s_row).map(|(t, s)| t * s).sum()
}

/// Contrast scales λ_i for members and for appended non-members.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastScales {
    pub class_pair: (usize, usize),
    /// `None` when the component has no MAP members.
    pub member: Vec<Option<f64>>,
    pub appended: Vec<f64>,
}

pub fn contrast_scales(model: &MixtureModel, class_pair: (usize, usize)) -> Result<ContrastScales> {
    let m = model.n_classes();
    let mut member = Vec::with_capacity(model.g);
    let mut appended = Vec::with_capacity(model.g);
    for i in 0..model.g {
        let n_i = model.n_map[i];
        member.push(if n_i > 0 {
            let blocks = assemble_omega(model, i, true)?;
            let d = ContrastVector::new(class_pair, 1, n_i, m)?;
            Some(contrast_variance(&blocks, &d)?.sqrt())
        } else {
            None
        });
        let blocks = assemble_omega(model, i, false)?;
        let d = ContrastVector::new(class_pair, n_i + 1, n_i + 1, m)?;
        appended.push(contrast_variance(&blocks, &d)?.sqrt());
    }
    Ok(ContrastScales {
        class_pair,
        member,
        appended,
    })
}

/// Everything needed to evaluate W for an arbitrary profile of a given gene
/// under the fitted model: used for the observed statistic and, unchanged,
/// for permutation replicates.
#[derive(Debug, Clone)]
pub struct StatisticEngine {
    kernels: Vec<ComponentKernel>,
    c_hat: Vec<Vec<f64>>,
    beta_hat: Vec<Vec<f64>>,
    z_map: Vec<usize>,
    scales: ContrastScales,
    g: usize,
    p: usize,
}

/// Per-gene output of the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneStatistic {
    pub w: f64,
    pub tau: Vec<f64>,
    pub s: Vec<f64>,
}

impl StatisticEngine {
    pub fn new(model: &MixtureModel, estimates: &RandomEffectsEstimates, class_pair: (usize, usize)) -> Result<Self> {
        if model.z_map.is_empty() {
            return Err(Error::Data("model has no MAP assignment; fit it first".into()));
        }
        Ok(Self {
            kernels: model.kernels()?,
            c_hat: estimates.c_hat.clone(),
            beta_hat: estimates.beta_hat.clone(),
            z_map: model.z_map.clone(),
            scales: contrast_scales(model, class_pair)?,
            g: model.g,
            p: model.n_samples(),
        })
    }

    pub fn scales(&self) -> &ContrastScales {
        &self.scales
    }

    /// τ(y; Ψ̂, ĉ), b̂(y) and the weighted contrast for profile `y`, scored
    /// with gene `j`'s MAP membership.
    pub fn evaluate(&self, y: &[f64], j: usize) -> GeneStatistic {
        let (h, k) = (self.scales.class_pair.0 - 1, self.scales.class_pair.1 - 1);
        let mut r = vec![0.0; self.p];
        let mut logw = vec![0.0; self.g];
        let mut s = vec![0.0; self.g];
        for (i, kern) in self.kernels.iter().enumerate() {
            kern.residual_into(y, &self.c_hat[i], &mut r);
            let sums = kern.class_sums(&r);
            logw[i] = kern.log_pi + kern.log_density_from(&r, &sums);
            let b = &kern.m_inv * &sums;
            let lambda = if self.z_map[j] == i {
                self.scales.member[i].unwrap_or(self.scales.appended[i])
            } else {
                self.scales.appended[i]
            };
            let beta = &self.beta_hat[i];
            s[i] = (beta[h] - beta[k] + b[h] - b[k]) / lambda;
        }
        softmax_in_place(&mut logw);
        let w = weighted_statistic(&logw, &s);
        GeneStatistic { w, tau: logw, s }
    }

    /// Observed statistics for every feature.
    pub fn evaluate_all(&self, data: &ExpressionMatrix) -> Vec<GeneStatistic> {
        (0..data.n_features())
            .into_par_iter()
            .map(|j| self.evaluate(data.profile(j), j))
            .collect()
    }
}

/// Regulation direction of a feature (class 2 relative to class 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// W < 0: higher in the second class.
    Up,
    /// W > 0: lower in the second class.
    Down,
    None,
}

impl Direction {
    pub fn from_w(w: f64) -> Self {
        if w < 0.0 {
            Direction::Up
        } else if w > 0.0 {
            Direction::Down
        } else {
            Direction::None
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::None => "none",
        }
    }
}

/// One ranked feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedFeature {
    /// 0-based feature index.
    pub index: usize,
    /// 1-based rank.
    pub rank: usize,
    pub w: f64,
    pub direction: Direction,
}

/// Order by |W| descending, ties by ascending feature index.
pub fn rank_genes(w: &[f64]) -> Result<Vec<RankedFeature>> {
    if let Some(j) = w.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("non-finite statistic for feature {}", j + 1)));
    }
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()).then(a.cmp(&b)));
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(r, j)| RankedFeature {
            index: j,
            rank: r + 1,
            w: w[j],
            direction: Direction::from_w(w[j]),
        })
        .collect())
}

/// First `k` entries of a ranking.
pub fn top_k(ranked: &[RankedFeature], k: usize) -> Result<&[RankedFeature]> {
    if k > ranked.len() {
        return Err(Error::ParameterDomain(format!("top-{k} requested from {} features", ranked.len())));
    }
    Ok(&ranked[..k])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_design_matrices;
    use crate::lmm::ComponentParams;
    use approx::assert_relative_eq;

    fn est_one(beta: Vec<f64>, b: Vec<f64>) -> RandomEffectsEstimates {
        RandomEffectsEstimates {
            n: 1,
            g: 1,
            m: 2,
            p: 4,
            b_hat: b,
            c_hat: vec![vec![0.0; 4]],
            beta_hat: vec![beta],
        }
    }

    #[test]
    fn normalized_contrast_examples() {
        // figure-caption values with λ = 1
        let e = est_one(vec![0.303, 0.0], vec![0.646, 0.0]);
        assert_relative_eq!(normalized_contrast(&e, 0, 0, (1, 2), 1.0), 0.949, epsilon = 1e-12);
        let e = est_one(vec![0.047, 0.0], vec![0.487, 0.0]);
        assert_relative_eq!(normalized_contrast(&e, 0, 0, (1, 2), 1.0), 0.534, epsilon = 1e-12);
        let e = est_one(vec![0.0, 0.0], vec![0.0, 0.0]);
        assert_eq!(normalized_contrast(&e, 0, 0, (1, 2), 1.0), 0.0);
    }

    #[test]
    fn weighted_statistic_examples() {
        assert_eq!(weighted_statistic(&[1.0], &[1.7]), 1.7);
        assert_eq!(weighted_statistic(&[0.5, 0.5], &[2.0, -2.0]), 0.0);
        assert_relative_eq!(weighted_statistic(&[0.9, 0.1], &[1.0, 3.0]), 1.2, epsilon = 1e-15);
    }

    #[test]
    fn ranking_examples() {
        let r = rank_genes(&[0.1, -5.0, 2.0]).unwrap();
        assert_eq!(r.iter().map(|x| x.index + 1).collect::<Vec<_>>(), vec![2, 3, 1]);
        assert_eq!(r[0].direction, Direction::Up);
        assert_eq!(r[1].direction, Direction::Down);
        let r = rank_genes(&[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!(r.iter().map(|x| x.index).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(top_k(&r, 5).is_err());
        assert_eq!(top_k(&r, 2).unwrap().len(), 2);
    }

    fn comp() -> ComponentParams {
        ComponentParams {
            pi: 1.0,
            beta: vec![0.2, -0.1],
            sigma_b: vec![0.8, 1.1],
            rho: 0.3,
            sigma_c_sq: 0.05,
            sigma_e_sq: 0.7,
        }
    }

    #[test]
    fn omega_blocks_closed_forms() {
        let design = build_design_matrices(&[1, 1, 1, 2, 2]).unwrap();
        let c = comp();
        let b = omega_blocks(0, &c, &design, 4).unwrap();
        let xtx = design.x.transpose() * &design.x;
        assert_relative_eq!(b.omega_beta, &xtx * (4.0 / 0.7), epsilon = 1e-12);
        let b_inv = c.b_matrix().unwrap().try_inverse().unwrap();
        assert_relative_eq!(b.omega_b, &xtx / 0.7 + b_inv, epsilon = 1e-10);
        assert_relative_eq!(b.omega_c, DMatrix::identity(5, 5) * (4.0 * (1.0 / 0.7 + 1.0 / 0.05)), epsilon = 1e-10);
    }

    #[test]
    fn contrast_vector_sums_to_zero() {
        for n in 1..6 {
            for s in 1..=n {
                let d = ContrastVector::new((1, 2), s, n, 2).unwrap().to_dense(5);
                assert_eq!(d.sum(), 0.0);
                assert_eq!(d.iter().filter(|v| **v != 0.0).count(), 4);
                assert!(d.rows(2 + 2 * n, 5).iter().all(|v| *v == 0.0));
            }
        }
        assert!(ContrastVector::new((2, 1), 1, 3, 2).is_err());
        assert!(ContrastVector::new((1, 2), 4, 3, 2).is_err());
    }

    #[test]
    fn matches_dense_inverse_small() {
        let design = build_design_matrices(&[1, 1, 2, 2, 2]).unwrap();
        let b = omega_blocks(0, &comp(), &design, 3).unwrap();
        let dense = b.dense_precision().try_inverse().unwrap();
        for slot in 1..=3 {
            let d = ContrastVector::new((1, 2), slot, 3, 2).unwrap();
            let dv = d.to_dense(5);
            let want = (dv.transpose() * &dense * &dv)[(0, 0)];
            let got = contrast_variance(&b, &d).unwrap();
            assert_relative_eq!(got, want, max_relative = 1e-10);
        }
    }

    #[test]
    fn variance_grows_with_sigma_c() {
        // a looser prior on c can only increase the prediction error variance
        let design = build_design_matrices(&[1, 1, 2, 2]).unwrap();
        let mut prev = 0.0;
        for s2c in [0.01, 1.0, 1e3, 1e6, 1e9] {
            let mut c = comp();
            c.sigma_c_sq = s2c;
            let b = omega_blocks(0, &c, &design, 10).unwrap();
            let l = contrast_variance(&b, &ContrastVector::new((1, 2), 1, 10, 2).unwrap()).unwrap();
            assert!(l.is_finite() && l >= prev * (1.0 - 1e-9), "{prev} then {l}");
            prev = l;
        }
    }

    #[test]
    fn empty_member_component_is_an_error() {
        let design = build_design_matrices(&[1, 1, 2, 2]).unwrap();
        let mut model = MixtureModel::from_components(vec![comp()], design).unwrap();
        model.n_map = vec![0];
        assert!(matches!(assemble_omega(&model, 0, true), Err(Error::EmptyComponent(0))));
        assert_eq!(assemble_omega(&model, 0, false).unwrap().n_prime, 1);
    }
}
