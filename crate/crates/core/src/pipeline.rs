//! The stages chained together: standardize, fit, score, permute, infer.

use serde::{Deserialize, Serialize};

use crate::contrast::{estimate_blups, rank_genes, GeneStatistic, RandomEffectsEstimates, RankedFeature, StatisticEngine};
use crate::data::{column_standardize, ExpressionMatrix};
use crate::em::{fit_mixture, select_g, EmConfig, FitTrace, GFit};
use crate::error::{Error, Result};
use crate::fdr::{infer, InferenceResults, SelectionMethod};
use crate::lmm::MixtureModel;
use crate::null::{fit_t_df, p_values, permute_labels, replicate_statistics, NullDistribution, PermutationPlan, ReplicateMatrix};
use crate::seed;

/// Number of components: fixed, or an inclusive range chosen by BIC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GSpec {
    Fixed(usize),
    Range(usize, usize),
}

impl std::str::FromStr for GSpec {
    type Err = Error;
    /// `"5"` or `"3..15"`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::ParameterDomain(format!("cannot parse g specification `{s}` (use N or A..B)"));
        if let Some((a, b)) = s.split_once("..") {
            let a: usize = a.trim().parse().map_err(|_| bad())?;
            let b: usize = b.trim().parse().map_err(|_| bad())?;
            if a < 1 || b < a {
                return Err(bad());
            }
            Ok(GSpec::Range(a, b))
        } else {
            let g: usize = s.trim().parse().map_err(|_| bad())?;
            if g < 1 {
                return Err(bad());
            }
            Ok(GSpec::Fixed(g))
        }
    }
}

/// A fitted mixture with its diagnostics.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub model: MixtureModel,
    pub trace: FitTrace,
    pub table: Vec<GFit>,
}

/// Fit on already standardized data.
pub fn fit(data: &ExpressionMatrix, g: GSpec, config: &EmConfig) -> Result<FitOutcome> {
    match g {
        GSpec::Fixed(g) => {
            let (model, trace) = fit_mixture(data, g, config)?;
            let table = vec![GFit {
                g,
                log_likelihood: model.log_likelihood,
                bic: model.bic,
                converged: trace.converged,
                iterations: trace.iterations,
                fitted_g: model.g,
                error: None,
            }];
            Ok(FitOutcome { model, trace, table })
        }
        GSpec::Range(a, b) => {
            let cfg = EmConfig {
                g_range: (a, b),
                ..config.clone()
            };
            let (model, trace, table) = select_g(data, &cfg)?;
            Ok(FitOutcome { model, trace, table })
        }
    }
}

/// Observed statistics and everything needed to permute them.
#[derive(Debug, Clone)]
pub struct Scores {
    pub estimates: RandomEffectsEstimates,
    pub engine: StatisticEngine,
    pub stats: Vec<GeneStatistic>,
    pub w: Vec<f64>,
    pub ranked: Vec<RankedFeature>,
}

/// BLUPs, contrast scales and W for the class pair (1, 2).
pub fn score(data: &ExpressionMatrix, model: &MixtureModel) -> Result<Scores> {
    let estimates = estimate_blups(data, model)?;
    let engine = StatisticEngine::new(model, &estimates, (1, 2))?;
    let stats = engine.evaluate_all(data);
    let w: Vec<f64> = stats.iter().map(|s| s.w).collect();
    let ranked = rank_genes(&w)?;
    Ok(Scores {
        estimates,
        engine,
        stats,
        w,
        ranked,
    })
}

/// Permutation null and P-values.
#[derive(Debug, Clone)]
pub struct NullOutcome {
    pub plan: PermutationPlan,
    pub replicates: ReplicateMatrix,
    pub null: NullDistribution,
    pub p: Vec<f64>,
}

pub fn permutation_p_values(data: &ExpressionMatrix, scores: &Scores, n_perms: usize, seed_value: u64) -> Result<NullOutcome> {
    let plan = permute_labels(data.class_of_sample(), n_perms, seed_value)?;
    let replicates = replicate_statistics(data, &scores.engine, &plan)?;
    let null = fit_t_df(replicates.pooled())?;
    let p = p_values(&scores.w, &null);
    Ok(NullOutcome {
        plan,
        replicates,
        null,
        p,
    })
}

/// Settings for the whole chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub g: GSpec,
    pub em: EmConfig,
    pub n_perms: usize,
    pub method: String,
    pub alpha: f64,
    pub c0: f64,
    pub theoretical_null: bool,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            g: GSpec::Fixed(3),
            em: EmConfig::default(),
            n_perms: 50,
            method: "localfdr".into(),
            alpha: 0.05,
            c0: 0.1,
            theoretical_null: false,
            seed: 0,
        }
    }
}

/// Outputs of [`analyze`].
#[derive(Debug, Clone)]
pub struct Analysis {
    pub standardized: ExpressionMatrix,
    pub fit: FitOutcome,
    pub scores: Scores,
    pub null: NullOutcome,
    pub inference: InferenceResults,
}

/// Raw data in, per-feature inference out. Stage seeds are derived from
/// `config.seed` so each stage is reproducible on its own.
pub fn analyze(data: &ExpressionMatrix, config: &AnalysisConfig) -> Result<Analysis> {
    let standardized = column_standardize(data)?;
    let em = EmConfig {
        seed: seed::derive(config.seed, 1),
        ..config.em.clone()
    };
    let fit = fit(&standardized, config.g, &em)?;
    let scores = score(&standardized, &fit.model)?;
    let null = permutation_p_values(&standardized, &scores, config.n_perms, seed::derive(config.seed, 2))?;
    let method: SelectionMethod = config.method.parse()?;
    let inference = infer(&null.p, method, config.alpha, config.c0, config.theoretical_null)?;
    Ok(Analysis {
        standardized,
        fit,
        scores,
        null,
        inference,
    })
}

/// Feature indices in rank order.
pub fn rank_order(ranked: &[RankedFeature]) -> Vec<usize> {
    ranked.iter().map(|r| r.index).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn g_spec_parsing() {
        assert_eq!("5".parse::<GSpec>().unwrap(), GSpec::Fixed(5));
        assert_eq!("3..15".parse::<GSpec>().unwrap(), GSpec::Range(3, 15));
        assert!("0".parse::<GSpec>().is_err());
        assert!("4..2".parse::<GSpec>().is_err());
        assert!("x..2".parse::<GSpec>().is_err());
    }
}
