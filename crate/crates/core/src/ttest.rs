//! Pooled two-sample t-test.

use rayon::prelude::*;
use statrs::function::beta::beta_reg;

use crate::data::ExpressionMatrix;
use crate::error::{Error, Result};

/// Per-feature pooled t statistic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTestResult {
    /// `(ȳ₁ − ȳ₂) / se`; ±∞ when the pooled variance is zero and the means differ.
    pub t: f64,
    pub p_value: f64,
    pub zero_variance: bool,
}

/// Two-sided P-value of a t statistic with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Pooled t statistic for one profile with `class_of_sample` in {1, 2}.
pub fn pooled_t_profile(y: &[f64], class_of_sample: &[usize]) -> TTestResult {
    let mut n = [0.0f64; 2];
    let mut sum = [0.0f64; 2];
    for (v, &c) in y.iter().zip(class_of_sample) {
        n[c - 1] += 1.0;
        sum[c - 1] += v;
    }
    let mean = [sum[0] / n[0], sum[1] / n[1]];
    let mut ss = 0.0;
    for (v, &c) in y.iter().zip(class_of_sample) {
        let d = v - mean[c - 1];
        ss += d * d;
    }
    let df = n[0] + n[1] - 2.0;
    let sp2 = ss / df;
    let diff = mean[0] - mean[1];
    let se = (sp2 * (1.0 / n[0] + 1.0 / n[1])).sqrt();
    let scale = mean[0].abs().max(mean[1].abs()).max(1.0);
    if se <= 1e-14 * scale {
        let t = if diff.abs() <= 1e-14 * scale {
            0.0
        } else {
            diff.signum() * f64::INFINITY
        };
        let p_value = if t == 0.0 { 1.0 } else { 0.0 };
        return TTestResult {
            t,
            p_value,
            zero_variance: true,
        };
    }
    let t = diff / se;
    TTestResult {
        t,
        p_value: t_two_sided_p(t, df),
        zero_variance: false,
    }
}

/// Pooled t-test for every feature of a two-class matrix.
pub fn pooled_t(data: &ExpressionMatrix) -> Result<Vec<TTestResult>> {
    if data.n_classes() != 2 {
        return Err(Error::Data(format!("pooled t-test needs 2 classes, found {}", data.n_classes())));
    }
    let classes = data.class_of_sample();
    let out: Vec<TTestResult> = (0..data.n_features())
        .into_par_iter()
        .map(|j| pooled_t_profile(data.profile(j), classes))
        .collect();
    let flagged = out.iter().filter(|r| r.zero_variance).count();
    if flagged > 0 {
        log::warn!("{flagged} feature(s) have zero pooled variance");
    }
    Ok(out)
}
