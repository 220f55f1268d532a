use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::Args;
use serde::Serialize;

use clustcontrast::contrast::rank_genes;
use clustcontrast::data::{column_standardize, load_expression_matrix, ExpressionMatrix};
use clustcontrast::em::EmConfig;
use clustcontrast::fdr::{evaluate_against_truth, fdp_curve, infer, top_k_selection, SelectionMethod};
use clustcontrast::io::{
    load_model, metrics_summary, metrics_tsv, save_model, write_bic_tsv, write_curve_tsv, write_pvalues_tsv,
    write_ranked_tsv, write_results_tsv, write_ttest_tsv, DataDigest, MetricsRow, RunManifest, Table, BIC_FILE,
    MANIFEST_FILE, MODEL_FILE, TAU_FILE,
};
use clustcontrast::lmm::MixtureModel;
use clustcontrast::pipeline::{self, GSpec};
use clustcontrast::sim::{generate_dataset, SimConfig, SimulationTruth, PRESETS};
use clustcontrast::ttest::pooled_t;
use clustcontrast::{seed, Error};

use crate::CliError;

pub const MATRIX_FILE: &str = "matrix.tsv";
pub const LABELS_FILE: &str = "labels.tsv";
pub const TRUTH_FILE: &str = "truth.tsv";
pub const RANKED_FILE: &str = "ranked.tsv";
pub const PVALUES_FILE: &str = "pvalues.tsv";
pub const NULL_FILE: &str = "null.json";
pub const REPLICATES_FILE: &str = "replicates.tsv";
pub const RESULTS_FILE: &str = "results.tsv";
pub const FDR_FILE: &str = "fdr.json";
pub const TTEST_FILE: &str = "ttest.tsv";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const CURVES_FILE: &str = "curves.tsv";

type CliResult = Result<(), CliError>;

pub struct Context {
    pub seed: u64,
    pub out: PathBuf,
    pub argv: Vec<String>,
}

impl Context {
    fn manifest(&self, command: &str, config: &impl Serialize) -> RunManifest {
        let config = serde_json::to_value(config).unwrap_or(serde_json::Value::Null);
        RunManifest::new(command, self.argv.clone(), config, self.seed)
    }

    fn finish(&self, mut manifest: RunManifest, inputs: &[&Path], outputs: &[&str], started: Instant) -> CliResult {
        for p in inputs {
            manifest.add_input(p)?;
        }
        manifest.add_outputs(&self.out, outputs)?;
        manifest.wall_time_seconds = started.elapsed().as_secs_f64();
        manifest.write(&self.out)?;
        Ok(())
    }
}

/// When `path` sits next to a manifest that lists it, its current digest
/// must match the recorded one.
fn verify_recorded(path: &Path) -> Result<(), Error> {
    let Some(dir) = path.parent() else { return Ok(()) };
    let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
    if !dir.join(MANIFEST_FILE).exists() {
        return Ok(());
    }
    let manifest = RunManifest::read(dir)?;
    let Some(name) = path.file_name().and_then(|n| n.to_str()) else { return Ok(()) };
    if let Some(recorded) = manifest.outputs.get(name) {
        let current = clustcontrast::io::file_digest(path)?;
        if &current != recorded {
            return Err(Error::StaleInput(format!(
                "{} changed after `{}` wrote it; rerun that stage",
                path.display(),
                manifest.command
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DataArgs {
    /// Expression matrix TSV (header of sample ids, one row per feature).
    #[arg(long)]
    pub matrix: PathBuf,
    /// Labels TSV (`sample_id<TAB>class`).
    #[arg(long)]
    pub labels: PathBuf,
}

impl DataArgs {
    fn load(&self) -> Result<(ExpressionMatrix, DataDigest), Error> {
        verify_recorded(&self.matrix)?;
        verify_recorded(&self.labels)?;
        let data = load_expression_matrix(&self.matrix, &self.labels)?;
        let digest = DataDigest::of_files(&self.matrix, &self.labels)?;
        Ok((data, digest))
    }

    fn paths(&self) -> [&Path; 2] {
        [&self.matrix, &self.labels]
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    /// Named parameter set (overrides δ and ρ).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub delta: Option<f64>,
    /// Within-block correlation.
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub p1: Option<usize>,
    #[arg(long)]
    pub p2: Option<usize>,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub n_blocks: Option<usize>,
    #[arg(long)]
    pub de_fraction: Option<f64>,
    /// Spread DE features evenly across blocks.
    #[arg(long)]
    pub stratified: bool,
}

impl SimulateArgs {
    fn config(&self) -> Result<SimConfig, CliError> {
        let mut c = match &self.preset {
            Some(name) => SimConfig::preset(name)
                .map_err(|_| CliError::Usage(format!("unknown preset `{name}`; choose from {}", PRESETS.join(", "))))?,
            None => SimConfig::default(),
        };
        if let Some(v) = self.delta {
            c.delta = v;
        }
        if let Some(v) = self.rho {
            c.rho_sim = v;
        }
        if let Some(v) = self.p1 {
            c.p1 = v;
        }
        if let Some(v) = self.p2 {
            c.p2 = v;
        }
        if let Some(v) = self.block_size {
            c.block_size = v;
        }
        if let Some(v) = self.n_blocks {
            c.n_blocks = v;
        }
        if let Some(v) = self.de_fraction {
            c.de_fraction = v;
        }
        c.stratified |= self.stratified;
        c.validate()?;
        Ok(c)
    }
}

pub fn simulate(ctx: &Context, a: &SimulateArgs) -> CliResult {
    let started = Instant::now();
    let config = a.config()?;
    let (data, truth) = generate_dataset(&config, ctx.seed)?;
    data.write_matrix_tsv(&ctx.out.join(MATRIX_FILE))?;
    data.write_labels_tsv(&ctx.out.join(LABELS_FILE))?;
    truth.write_tsv(&ctx.out.join(TRUTH_FILE))?;
    println!(
        "simulated {} features x {} samples, {} DE (delta {}, rho {})",
        data.n_features(),
        data.n_samples(),
        truth.n_de(),
        config.delta,
        config.rho_sim
    );
    let m = ctx.manifest("simulate", &config);
    ctx.finish(m, &[], &[MATRIX_FILE, LABELS_FILE, TRUTH_FILE], started)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Component count `N`, or a range `A..B` searched by BIC.
    #[arg(long, default_value = "3")]
    pub g: String,
    /// Random starts per g.
    #[arg(long, default_value_t = 10)]
    pub starts: usize,
    #[arg(long, default_value_t = 2000)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    pub rel_tol: f64,
}

pub fn fit(ctx: &Context, a: &FitArgs) -> CliResult {
    let started = Instant::now();
    let g: GSpec = a.g.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let em = EmConfig {
        max_iter: a.max_iter,
        rel_tol: a.rel_tol,
        n_starts: a.starts,
        seed: seed::derive(ctx.seed, 1),
        ..EmConfig::default()
    };
    em.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let (data, digest) = a.data.load()?;
    let std = column_standardize(&data)?;
    let outcome = pipeline::fit(&std, g, &em)?;
    save_model(&ctx.out, &outcome.model, data.feature_ids(), &digest)?;
    write_bic_tsv(&ctx.out.join(BIC_FILE), &outcome.table)?;
    for row in &outcome.table {
        if let Some(err) = &row.error {
            eprintln!("g = {}: fit failed: {err}", row.g);
        }
    }
    let model = &outcome.model;
    println!(
        "g = {}  loglik = {:.4}  BIC = {:.4}  converged = {}  iterations = {}  sizes = {:?}",
        model.g, model.log_likelihood, model.bic, outcome.trace.converged, outcome.trace.iterations, model.n_map
    );
    let m = ctx.manifest("fit", &(a, &em));
    ctx.finish(m, &a.data.paths(), &[MODEL_FILE, TAU_FILE, BIC_FILE], started)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// `model.json` written by `fit`.
    #[arg(long)]
    pub model: PathBuf,
}

impl ModelArgs {
    /// Load data and model, refusing a model fitted to other data.
    fn load(&self) -> Result<(ExpressionMatrix, MixtureModel), Error> {
        let (data, digest) = self.data.load()?;
        verify_recorded(&self.model)?;
        let (model, file) = load_model(&self.model)?;
        file.data.check(&digest, &format!("model {}", self.model.display()))?;
        let std = column_standardize(&data)?;
        Ok((std, model))
    }

    fn inputs(&self) -> [&Path; 3] {
        [&self.data.matrix, &self.data.labels, &self.model]
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RankArgs {
    #[command(flatten)]
    pub input: ModelArgs,
}

pub fn rank(ctx: &Context, a: &RankArgs) -> CliResult {
    let started = Instant::now();
    let (data, model) = a.input.load()?;
    let scores = pipeline::score(&data, &model)?;
    write_ranked_tsv(
        &ctx.out.join(RANKED_FILE),
        data.feature_ids(),
        &scores.ranked,
        &scores.stats,
        &model.z_map,
    )?;
    println!("ranked {} features; top: {}", data.n_features(), top_ids(&data, &scores.ranked, 5));
    let m = ctx.manifest("rank", a);
    ctx.finish(m, &a.input.inputs(), &[RANKED_FILE], started)
}

fn top_ids(data: &ExpressionMatrix, ranked: &[clustcontrast::contrast::RankedFeature], k: usize) -> String {
    ranked
        .iter()
        .take(k)
        .map(|r| data.feature_ids()[r.index].as_str())
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PvalueArgs {
    #[command(flatten)]
    pub input: ModelArgs,
    /// Number of label permutations B.
    #[arg(long, default_value_t = 50)]
    pub perms: usize,
    /// Also write the feature × permutation replicate table.
    #[arg(long)]
    pub dump_null: bool,
}

#[derive(Serialize)]
struct NullReport<'a> {
    null: &'a clustcontrast::null::NullDistribution,
    permutations: usize,
    with_replacement: bool,
    permutation_seed: u64,
}

pub fn pvalue(ctx: &Context, a: &PvalueArgs) -> CliResult {
    let started = Instant::now();
    if a.perms == 0 {
        return Err(CliError::Usage("--perms must be at least 1".into()));
    }
    let (data, model) = a.input.load()?;
    let scores = pipeline::score(&data, &model)?;
    let perm_seed = seed::derive(ctx.seed, 2);
    let outcome = pipeline::permutation_p_values(&data, &scores, a.perms, perm_seed)?;
    write_pvalues_tsv(&ctx.out.join(PVALUES_FILE), data.feature_ids(), &scores.w, &outcome.p)?;
    let report = NullReport {
        null: &outcome.null,
        permutations: outcome.plan.len(),
        with_replacement: outcome.plan.with_replacement,
        permutation_seed: perm_seed,
    };
    write_json(&ctx.out.join(NULL_FILE), &report)?;
    let mut outputs = vec![PVALUES_FILE, NULL_FILE];
    if a.dump_null {
        outcome.replicates.write_tsv(&ctx.out.join(REPLICATES_FILE), data.feature_ids())?;
        outputs.push(REPLICATES_FILE);
    }
    if outcome.plan.with_replacement {
        eprintln!("warning: fewer distinct relabelings than --perms; some were reused");
    }
    let n = &outcome.null;
    println!("null t: mu = {:.4}  s = {:.4}  nu = {:.3}  ({} values)", n.mu, n.s, n.nu, n.n_values);
    let m = ctx.manifest("pvalue", a);
    ctx.finish(m, &a.input.inputs(), &outputs, started)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(format!("serializing: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FdrArgs {
    /// `pvalues.tsv` written by `pvalue`.
    #[arg(long)]
    pub pvalues: PathBuf,
    /// `bh` or `localfdr`.
    #[arg(long, default_value = "localfdr")]
    pub method: String,
    /// BH level.
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Local-FDR threshold.
    #[arg(long, default_value_t = 0.1)]
    pub c0: f64,
    /// Fix the null component at N(0, 1).
    #[arg(long)]
    pub theoretical_null: bool,
}

#[derive(Serialize)]
struct FdrReport<'a> {
    method: &'a str,
    alpha: f64,
    c0: f64,
    n_selected: usize,
    mixture: &'a clustcontrast::fdr::TwoNormalFit,
}

pub fn fdr(ctx: &Context, a: &FdrArgs) -> CliResult {
    let started = Instant::now();
    let method: SelectionMethod = a.method.parse().map_err(|e: Error| CliError::Usage(e.to_string()))?;
    if !(a.alpha > 0.0 && a.alpha < 1.0) || !(a.c0 > 0.0 && a.c0 < 1.0) {
        return Err(CliError::Usage("--alpha and --c0 must lie in (0, 1)".into()));
    }
    verify_recorded(&a.pvalues)?;
    let table = Table::read(&a.pvalues)?;
    let ids = table.str_column("feature_id")?;
    let w = table.f64_column("W")?;
    let p = table.f64_column("P")?;
    let r = infer(&p, method, a.alpha, a.c0, a.theoretical_null)?;
    write_results_tsv(&ctx.out.join(RESULTS_FILE), &ids, &w, &r)?;
    let n_selected = r.selected.iter().filter(|&&s| s).count();
    write_json(
        &ctx.out.join(FDR_FILE),
        &FdrReport {
            method: method.as_str(),
            alpha: a.alpha,
            c0: a.c0,
            n_selected,
            mixture: &r.mixture,
        },
    )?;
    println!(
        "{}: selected {} of {} features (pi0 = {:.4})",
        method.as_str(),
        n_selected,
        ids.len(),
        r.mixture.pi0
    );
    let m = ctx.manifest("fdr", a);
    ctx.finish(m, &[&a.pvalues], &[RESULTS_FILE, FDR_FILE], started)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TtestArgs {
    #[command(flatten)]
    pub data: DataArgs,
}

pub fn ttest(ctx: &Context, a: &TtestArgs) -> CliResult {
    let started = Instant::now();
    let (data, _) = a.data.load()?;
    let res = pooled_t(&data)?;
    let t: Vec<f64> = res.iter().map(|r| r.t).collect();
    let p: Vec<f64> = res.iter().map(|r| r.p_value).collect();
    let ranked = rank_genes(&t)?;
    write_ttest_tsv(&ctx.out.join(TTEST_FILE), data.feature_ids(), &ranked, &p)?;
    let zero = res.iter().filter(|r| r.zero_variance).count();
    if zero > 0 {
        eprintln!("warning: {zero} features have zero within-class variance (t set to 0)");
    }
    println!("t-test ranked {} features; top: {}", data.n_features(), top_ids(&data, &ranked, 5));
    let m = ctx.manifest("ttest", a);
    ctx.finish(m, &a.data.paths(), &[TTEST_FILE], started)
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchmarkArgs {
    /// Truth TSV written by `simulate`.
    #[arg(long)]
    pub truth: PathBuf,
    /// Ranked tables (`rank` column) or P-value tables (`P` column).
    #[arg(long, num_args = 1.., required = true)]
    pub scores: Vec<PathBuf>,
    /// Cut-off k for the top-k metric rows.
    #[arg(long, default_value_t = 600)]
    pub top: usize,
}

/// Feature order of a score table: by `rank` when present, else ascending `P`.
fn score_order(table: &Table, index: &HashMap<&str, usize>) -> Result<Vec<usize>, Error> {
    let ids = table.str_column("feature_id")?;
    if ids.len() != index.len() {
        return Err(Error::Data(format!(
            "{} has {} features, the truth has {}",
            table.origin,
            ids.len(),
            index.len()
        )));
    }
    let rows: Vec<usize> = ids
        .iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Data(format!("{}: feature `{id}` is not in the truth table", table.origin)))
        })
        .collect::<Result<_, _>>()?;
    let key = if table.column("rank").is_ok() {
        table.f64_column("rank")?
    } else {
        table.f64_column("P")?
    };
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| key[a].total_cmp(&key[b]).then(a.cmp(&b)));
    Ok(order.into_iter().map(|r| rows[r]).collect())
}

/// Selection flags from a `selected` column, aligned to the truth order.
fn selected_flags(table: &Table, index: &HashMap<&str, usize>) -> Result<Option<Vec<bool>>, Error> {
    if table.column("selected").is_err() {
        return Ok(None);
    }
    let ids = table.str_column("feature_id")?;
    let sel = table.str_column("selected")?;
    let mut flags = vec![false; index.len()];
    for (id, s) in ids.iter().zip(&sel) {
        if let Some(&j) = index.get(id.as_str()) {
            flags[j] = s == "1";
        }
    }
    Ok(Some(flags))
}

pub fn benchmark(ctx: &Context, a: &BenchmarkArgs) -> CliResult {
    let started = Instant::now();
    if a.top == 0 {
        return Err(CliError::Usage("--top must be at least 1".into()));
    }
    verify_recorded(&a.truth)?;
    let truth = SimulationTruth::read_tsv(&a.truth)?;
    let is_de = truth.is_de();
    let n = is_de.len();
    if a.top > n {
        return Err(CliError::Usage(format!("--top {} exceeds the {n} features", a.top)));
    }
    let index: HashMap<&str, usize> = truth.feature_ids.iter().enumerate().map(|(j, s)| (s.as_str(), j)).collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut curves = Vec::new();
    for path in &a.scores {
        verify_recorded(path)?;
        let table = Table::read(path)?;
        let label = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        let order = score_order(&table, &index)?;
        let top = top_k_selection(&order, n, a.top)?;
        rows.push(MetricsRow {
            label: label.clone(),
            cutoff: format!("top{}", a.top),
            metrics: evaluate_against_truth(&top, &is_de)?,
        });
        if let Some(flags) = selected_flags(&table, &index)? {
            rows.push(MetricsRow {
                label: label.clone(),
                cutoff: "selected".into(),
                metrics: evaluate_against_truth(&flags, &is_de)?,
            });
        }
        curves.push(fdp_curve(&order, &is_de, n)?);
        labels.push(label);
    }
    std::fs::write(ctx.out.join(METRICS_FILE), metrics_tsv(&rows)).map_err(|e| Error::Io {
        path: ctx.out.join(METRICS_FILE),
        source: e,
    })?;
    write_curve_tsv(&ctx.out.join(CURVES_FILE), &labels, &curves)?;
    print!("{}", metrics_summary(&rows));
    let mut inputs: Vec<&Path> = vec![&a.truth];
    inputs.extend(a.scores.iter().map(PathBuf::as_path));
    let m = ctx.manifest("benchmark", a);
    ctx.finish(m, &inputs, &[METRICS_FILE, CURVES_FILE], started)
}
