#![allow(dead_code)]

use clustcontrast::contrast::{ContrastVector, OmegaBlocks};
use clustcontrast::data::{build_design_matrices, ExpressionMatrix};
use clustcontrast::lmm::{build_b, ComponentParams, MixtureModel};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha20Rng {
    clustcontrast::seed::rng(seed, 0xacce)
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Two classes of sizes `p1` and `p2`, class 1 first.
pub fn two_classes(p1: usize, p2: usize) -> Vec<usize> {
    std::iter::repeat_n(1, p1).chain(std::iter::repeat_n(2, p2)).collect()
}

/// A valid component with random parameters.
pub fn random_component(rng: &mut impl Rng, m: usize, pi: f64) -> ComponentParams {
    ComponentParams {
        pi,
        beta: (0..m).map(|_| rng.random_range(-2.0..2.0)).collect(),
        sigma_b: (0..m).map(|_| rng.random_range(0.1..1.5)).collect(),
        rho: rng.random_range(-0.9..0.9),
        sigma_c_sq: rng.random_range(0.01..1.0),
        sigma_e_sq: rng.random_range(0.2..2.0),
    }
}

/// Draw `n` profiles from the mixture: per component one shared `c_i`, per
/// gene a component label, `b_j ~ N(0, B_i)` and white noise.
pub fn simulate_mixture(
    components: &[ComponentParams],
    class_of_sample: &[usize],
    n: usize,
    rng: &mut impl Rng,
) -> (ExpressionMatrix, Vec<usize>) {
    let p = class_of_sample.len();
    let shared: Vec<Vec<f64>> = components
        .iter()
        .map(|c| (0..p).map(|_| c.sigma_c_sq.sqrt() * normal(rng)).collect())
        .collect();
    let chol: Vec<DMatrix<f64>> = components
        .iter()
        .map(|c| build_b(&c.sigma_b, c.rho).unwrap().cholesky().unwrap().l())
        .collect();
    let mut rows = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut i = components.len() - 1;
        for (k, c) in components.iter().enumerate() {
            acc += c.pi;
            if u < acc {
                i = k;
                break;
            }
        }
        let c = &components[i];
        let m = c.beta.len();
        let e = DVector::from_fn(m, |_, _| normal(rng));
        let b = &chol[i] * e;
        let row: Vec<f64> = (0..p)
            .map(|k| {
                let h = class_of_sample[k] - 1;
                c.beta[h] + b[h] + shared[i][k] + c.sigma_e_sq.sqrt() * normal(rng)
            })
            .collect();
        rows.push(row);
        z.push(i);
    }
    (ExpressionMatrix::from_rows(&rows, class_of_sample.to_vec()).unwrap(), z)
}

/// `dᵀ Ω d` from an explicit inverse of the full coefficient matrix.
pub fn dense_lambda_sq(blocks: &OmegaBlocks, d: &ContrastVector) -> f64 {
    let a = blocks.dense_precision();
    let inv = a.try_inverse().expect("coefficient matrix is invertible");
    let v = d.to_dense(blocks.p());
    (v.transpose() * inv * v)[(0, 0)]
}

/// `E[b_j | Y]` (n × m) and `E[c | Y]` for a single-component model, by
/// conditioning the stacked Gaussian vector directly.
pub fn joint_gaussian_blups(data: &ExpressionMatrix, comp: &ComponentParams) -> (Vec<Vec<f64>>, Vec<f64>) {
    let design = build_design_matrices(data.class_of_sample()).unwrap();
    let x = &design.x;
    let (n, p) = (data.n_features(), data.n_samples());
    let b = build_b(&comp.sigma_b, comp.rho).unwrap();
    let sigma = x * &b * x.transpose() + DMatrix::identity(p, p) * comp.sigma_e_sq;
    // cov(Y): block diagonal Σ plus σ²_c I in every block
    let mut cov = DMatrix::zeros(n * p, n * p);
    for j in 0..n {
        for l in 0..n {
            for a in 0..p {
                cov[(j * p + a, l * p + a)] += comp.sigma_c_sq;
            }
        }
        let mut block = cov.view_mut((j * p, j * p), (p, p));
        block += &sigma;
    }
    let beta = DVector::from_vec(comp.beta.clone());
    let mean = x * beta;
    let mut r = DVector::zeros(n * p);
    for j in 0..n {
        for a in 0..p {
            r[j * p + a] = data.get(j, a) - mean[a];
        }
    }
    let w = cov.try_inverse().unwrap() * r;
    // cov(b_j, Y) = B Xᵀ in block j; cov(c, Y) = σ²_c I in every block
    let bx = &b * x.transpose();
    let b_hat = (0..n)
        .map(|j| (&bx * w.rows(j * p, p)).iter().copied().collect())
        .collect();
    let mut c = vec![0.0; p];
    for j in 0..n {
        for a in 0..p {
            c[a] += comp.sigma_c_sq * w[j * p + a];
        }
    }
    (b_hat, c)
}

/// Single-component model on the data's design.
pub fn single_component_model(data: &ExpressionMatrix, mut comp: ComponentParams) -> MixtureModel {
    comp.pi = 1.0;
    let design = build_design_matrices(data.class_of_sample()).unwrap();
    MixtureModel::from_components(vec![comp], design).unwrap()
}

/// Kolmogorov–Smirnov distance of a sample from U(0, 1).
pub fn ks_uniform(p: &[f64]) -> f64 {
    let mut s = p.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &v)| {
            let lo = v - i as f64 / n;
            let hi = (i + 1) as f64 / n - v;
            lo.max(hi)
        })
        .fold(0.0, f64::max)
}

/// Fraction of `est` labels that agree with `truth` under the best
/// matching of label values (brute force over permutations of `g` labels).
pub fn clustering_accuracy(est: &[usize], truth: &[usize], g: usize) -> f64 {
    let mut perm: Vec<usize> = (0..g).collect();
    let mut best = 0usize;
    permute(&mut perm, 0, &mut |pm| {
        let hits = est.iter().zip(truth).filter(|(e, t)| pm[**e] == **t).count();
        best = best.max(hits);
    });
    best as f64 / est.len() as f64
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}
