//! File formats shared by the pipeline stages: model JSON, TSV tables,
//! digests and run manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrast::{GeneStatistic, RankedFeature};
use crate::data::{build_design_matrices, ExpressionMatrix};
use crate::em::GFit;
use crate::error::{Error, Result};
use crate::fdr::{EvaluationMetrics, InferenceResults};
use crate::format::fmt_f64;
use crate::lmm::{ComponentParams, MixtureModel};

pub const MODEL_FILE: &str = "model.json";
pub const TAU_FILE: &str = "tau.tsv";
pub const BIC_FILE: &str = "bic.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Digests of the matrix/labels pair a stage was run on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDigest {
    pub matrix_sha256: String,
    pub labels_sha256: String,
}

impl DataDigest {
    pub fn of_files(matrix: &Path, labels: &Path) -> Result<Self> {
        Ok(Self {
            matrix_sha256: file_digest(matrix)?,
            labels_sha256: file_digest(labels)?,
        })
    }

    /// Refuse to continue when `self` (recorded upstream) differs from `current`.
    pub fn check(&self, current: &DataDigest, what: &str) -> Result<()> {
        if self != current {
            return Err(Error::StaleInput(format!(
                "{what} was produced from different input data (recorded matrix {}…, labels {}…; \
                 current matrix {}…, labels {}…); rerun the earlier stage",
                &self.matrix_sha256[..12],
                &self.labels_sha256[..12],
                &current.matrix_sha256[..12],
                &current.labels_sha256[..12]
            )));
        }
        Ok(())
    }
}

/// On-disk form of a fitted mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub g: usize,
    pub components: Vec<ComponentParams>,
    pub log_likelihood: f64,
    pub bic: f64,
    pub tau_path: String,
    pub class_of_sample: Vec<usize>,
    pub c_hat: Vec<Vec<f64>>,
    /// 1-based MAP component per feature.
    pub z_map: Vec<usize>,
    pub n_map: Vec<usize>,
    pub data: DataDigest,
    pub n_features: usize,
}

/// Write `model.json` and `tau.tsv` into `dir`.
pub fn save_model(dir: &Path, model: &MixtureModel, feature_ids: &[String], digest: &DataDigest) -> Result<()> {
    let file = ModelFile {
        g: model.g,
        components: model.components.clone(),
        log_likelihood: model.log_likelihood,
        bic: model.bic,
        tau_path: TAU_FILE.to_string(),
        class_of_sample: model.design.class_of_sample().to_vec(),
        c_hat: model.c_hat.clone(),
        z_map: model.z_map.iter().map(|z| z + 1).collect(),
        n_map: model.n_map.clone(),
        data: digest.clone(),
        n_features: feature_ids.len(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Numerical(format!("serializing model: {e}")))?;
    write_text(&dir.join(MODEL_FILE), &(json + "\n"))?;
    write_tau_tsv(&dir.join(TAU_FILE), model, feature_ids)
}

pub fn write_tau_tsv(path: &Path, model: &MixtureModel, feature_ids: &[String]) -> Result<()> {
    let mut s = String::from("feature_id");
    for i in 1..=model.g {
        let _ = write!(s, "\ttau_{i}");
    }
    s.push('\n');
    for (j, id) in feature_ids.iter().enumerate() {
        s.push_str(id);
        for t in model.tau_row(j) {
            s.push('\t');
            s.push_str(&fmt_f64(*t));
        }
        s.push('\n');
    }
    write_text(path, &s)
}

/// Read `model.json` (and its τ table) back into a model.
pub fn load_model(path: &Path) -> Result<(MixtureModel, ModelFile)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: path.display().to_string(),
        message: e.to_string(),
    })?;
    let design = build_design_matrices(&file.class_of_sample)?;
    let p = design.n_samples();
    let mut model = MixtureModel::from_components(file.components.clone(), design)?;
    let bad = |message: String| Error::Parse {
        file: path.display().to_string(),
        message,
    };
    if file.c_hat.len() != file.g || file.c_hat.iter().any(|c| c.len() != p) {
        return Err(bad("c_hat has the wrong shape".into()));
    }
    if file.z_map.len() != file.n_features || file.z_map.iter().any(|&z| z < 1 || z > file.g) {
        return Err(bad("z_map is inconsistent with g or n_features".into()));
    }
    model.c_hat = file.c_hat.clone();
    model.z_map = file.z_map.iter().map(|z| z - 1).collect();
    model.n_map = file.n_map.clone();
    model.log_likelihood = file.log_likelihood;
    model.bic = file.bic;
    let tau_path = path.parent().unwrap_or(Path::new(".")).join(&file.tau_path);
    let table = Table::read(&tau_path)?;
    if table.rows.len() != file.n_features || table.header.len() != file.g + 1 {
        return Err(Error::Parse {
            file: tau_path.display().to_string(),
            message: "tau table does not match the model".into(),
        });
    }
    let mut tau = Vec::with_capacity(file.n_features * file.g);
    for i in 0..table.rows.len() {
        for c in 1..=file.g {
            tau.push(table.f64_at(i, c)?);
        }
    }
    model.tau = tau;
    Ok((model, file))
}

/// Per-g BIC table.
pub fn write_bic_tsv(path: &Path, table: &[GFit]) -> Result<()> {
    let mut s = String::from("g\tloglik\tbic\tconverged\titers\n");
    for r in table {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            r.g,
            fmt_f64(r.log_likelihood),
            fmt_f64(r.bic),
            r.converged,
            r.iterations
        );
    }
    write_text(path, &s)
}

/// Ranked table: `feature_id, rank, W, direction, map_cluster, tau_1..tau_g`.
pub fn write_ranked_tsv(
    path: &Path,
    feature_ids: &[String],
    ranked: &[RankedFeature],
    stats: &[GeneStatistic],
    z_map: &[usize],
) -> Result<()> {
    let g = stats.first().map_or(0, |s| s.tau.len());
    let mut s = String::from("feature_id\trank\tW\tdirection\tmap_cluster");
    for i in 1..=g {
        let _ = write!(s, "\ttau_{i}");
    }
    s.push('\n');
    for r in ranked {
        let _ = write!(
            s,
            "{}\t{}\t{}\t{}\t{}",
            feature_ids[r.index],
            r.rank,
            fmt_f64(r.w),
            r.direction.as_str(),
            z_map[r.index] + 1
        );
        for t in &stats[r.index].tau {
            s.push('\t');
            s.push_str(&fmt_f64(*t));
        }
        s.push('\n');
    }
    write_text(path, &s)
}

/// Pooled t ranking in the ranked-table layout (no clusters: `map_cluster`
/// is `NA`), with the two-sided P appended.
pub fn write_ttest_tsv(path: &Path, feature_ids: &[String], ranked: &[RankedFeature], p: &[f64]) -> Result<()> {
    let mut s = String::from("feature_id\trank\tW\tdirection\tmap_cluster\tP\n");
    for r in ranked {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\tNA\t{}",
            feature_ids[r.index],
            r.rank,
            fmt_f64(r.w),
            r.direction.as_str(),
            fmt_f64(p[r.index])
        );
    }
    write_text(path, &s)
}

/// `feature_id, W, P` in feature order.
pub fn write_pvalues_tsv(path: &Path, feature_ids: &[String], w: &[f64], p: &[f64]) -> Result<()> {
    let mut s = String::from("feature_id\tW\tP\n");
    for j in 0..feature_ids.len() {
        let _ = writeln!(s, "{}\t{}\t{}", feature_ids[j], fmt_f64(w[j]), fmt_f64(p[j]));
    }
    write_text(path, &s)
}

/// `feature_id, W, P, z, local_fdr, bh_q, selected`.
pub fn write_results_tsv(path: &Path, feature_ids: &[String], w: &[f64], r: &InferenceResults) -> Result<()> {
    let mut s = String::from("feature_id\tW\tP\tz\tlocal_fdr\tbh_q\tselected\n");
    for j in 0..feature_ids.len() {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            feature_ids[j],
            fmt_f64(w[j]),
            fmt_f64(r.p[j]),
            fmt_f64(r.z[j]),
            fmt_f64(r.local_fdr[j]),
            fmt_f64(r.bh_q[j]),
            u8::from(r.selected[j])
        );
    }
    write_text(path, &s)
}

/// One labelled metrics row.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub label: String,
    pub cutoff: String,
    pub metrics: EvaluationMetrics,
}

pub fn metrics_tsv(rows: &[MetricsRow]) -> String {
    let mut s = String::from("method\tcutoff\tN_r\tFDP\tFNDP\tpower\tTP\tFP\tFN\n");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.label,
            r.cutoff,
            m.n_selected,
            fmt_f64(m.fdp),
            fmt_f64(m.fndp),
            fmt_f64(m.power),
            m.true_positives,
            m.false_positives,
            m.false_negatives
        );
    }
    s
}

/// Fixed-width summary for terminals.
pub fn metrics_summary(rows: &[MetricsRow]) -> String {
    let w = rows.iter().map(|r| r.label.len()).max().unwrap_or(6).max(6);
    let mut s = format!("{:<w$}  {:>10}  {:>6}  {:>8}  {:>8}  {:>8}\n", "method", "cutoff", "N_r", "FDP", "FNDP", "power");
    for r in rows {
        let m = &r.metrics;
        let _ = writeln!(
            s,
            "{:<w$}  {:>10}  {:>6}  {:>8.4}  {:>8.4}  {:>8.4}",
            r.label, r.cutoff, m.n_selected, m.fdp, m.fndp, m.power
        );
    }
    s
}

/// FDP-vs-k curves, one column per method.
pub fn write_curve_tsv(path: &Path, labels: &[String], curves: &[Vec<f64>]) -> Result<()> {
    let mut s = String::from("k");
    for l in labels {
        let _ = write!(s, "\t{l}");
    }
    s.push('\n');
    let k_max = curves.iter().map(Vec::len).min().unwrap_or(0);
    for k in 0..k_max {
        let _ = write!(s, "{}", k + 1);
        for c in curves {
            s.push('\t');
            s.push_str(&fmt_f64(c[k]));
        }
        s.push('\n');
    }
    write_text(path, &s)
}

/// A headed TSV read as strings.
#[derive(Debug, Clone)]
pub struct Table {
    pub origin: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Parse {
                file: origin.into(),
                message: "empty file".into(),
            })?
            .split('\t')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (i, l) in lines.enumerate() {
            let r: Vec<String> = l.split('\t').map(str::to_string).collect();
            if r.len() != header.len() {
                return Err(Error::Parse {
                    file: origin.into(),
                    message: format!("row {} has {} fields, header has {}", i + 2, r.len(), header.len()),
                });
            }
            rows.push(r);
        }
        Ok(Self {
            origin: origin.into(),
            header,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            file: self.origin.clone(),
            message: format!("missing column `{name}`"),
        })
    }

    pub fn f64_at(&self, row: usize, col: usize) -> Result<f64> {
        let v = &self.rows[row][col];
        v.parse::<f64>().map_err(|_| Error::Parse {
            file: self.origin.clone(),
            message: format!("non-numeric value `{v}` at row {}, column {}", row + 2, col + 1),
        })
    }

    pub fn f64_column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.column(name)?;
        (0..self.rows.len()).map(|r| self.f64_at(r, c)).collect()
    }

    pub fn str_column(&self, name: &str) -> Result<Vec<String>> {
        let c = self.column(name)?;
        Ok(self.rows.iter().map(|r| r[c].clone()).collect())
    }
}

/// Provenance record written once per output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    /// Input path → SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name → SHA-256.
    pub outputs: BTreeMap<String, String>,
    pub wall_time_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, config: serde_json::Value, seed: u64) -> Self {
        let mut versions = BTreeMap::new();
        versions.insert("clustcontrast".to_string(), env!("CARGO_PKG_VERSION").to_string());
        Self {
            command: command.into(),
            args,
            config,
            seed,
            versions,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            wall_time_seconds: 0.0,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), file_digest(path)?);
        Ok(())
    }

    /// Record digests of the named files in `dir`.
    pub fn add_outputs(&mut self, dir: &Path, names: &[&str]) -> Result<()> {
        for n in names {
            self.outputs.insert(n.to_string(), file_digest(&dir.join(n))?);
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Numerical(format!("serializing manifest: {e}")))?;
        write_text(&path, &(json + "\n"))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// Map feature ids onto row indices of `data`, requiring the same set.
pub fn align_features(data: &ExpressionMatrix, ids: &[String], origin: &str) -> Result<Vec<usize>> {
    let index: std::collections::HashMap<&str, usize> =
        data.feature_ids().iter().enumerate().map(|(j, s)| (s.as_str(), j)).collect();
    if ids.len() != data.n_features() {
        return Err(Error::Data(format!(
            "{origin} lists {} features but the data has {}",
            ids.len(),
            data.n_features()
        )));
    }
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Data(format!("{origin}: unknown feature `{id}`")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmm::ComponentParams;

    fn comp(pi: f64, b: f64) -> ComponentParams {
        ComponentParams {
            pi,
            beta: vec![b, -b],
            sigma_b: vec![0.5, 0.7],
            rho: 0.2,
            sigma_c_sq: 0.01,
            sigma_e_sq: 0.3,
        }
    }

    #[test]
    fn model_round_trip() {
        let design = build_design_matrices(&[1, 1, 2, 2]).unwrap();
        let mut model = MixtureModel::from_components(vec![comp(0.25, 1.0), comp(0.75, -1.0)], design).unwrap();
        model.tau = vec![0.1, 0.9, 0.7, 0.3, 1.0 / 3.0, 2.0 / 3.0];
        model.z_map = vec![1, 0, 1];
        model.n_map = vec![1, 2];
        model.c_hat = vec![vec![0.1, -0.1, 0.2, -0.2], vec![0.0; 4]];
        model.log_likelihood = -12.345678901;
        model.bic = 40.0;
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let digest = DataDigest {
            matrix_sha256: sha256_hex(b"m"),
            labels_sha256: sha256_hex(b"l"),
        };
        let dir = tempfile::tempdir().unwrap();
        save_model(dir.path(), &model, &ids, &digest).unwrap();
        let (back, file) = load_model(&dir.path().join(MODEL_FILE)).unwrap();
        assert_eq!(back, model);
        assert_eq!(file.data, digest);
    }

    #[test]
    fn stale_digest_is_refused() {
        let a = DataDigest {
            matrix_sha256: sha256_hex(b"one"),
            labels_sha256: sha256_hex(b"l"),
        };
        let b = DataDigest {
            matrix_sha256: sha256_hex(b"two"),
            labels_sha256: sha256_hex(b"l"),
        };
        assert!(a.check(&a, "model").is_ok());
        assert!(matches!(a.check(&b, "model"), Err(Error::StaleInput(_))));
    }

    #[test]
    fn table_parsing() {
        let t = Table::parse("a\tb\n1\tx\n2.5\ty\n", "mem").unwrap();
        assert_eq!(t.f64_column("a").unwrap(), vec![1.0, 2.5]);
        assert!(t.f64_column("b").is_err());
        assert!(t.column("c").is_err());
        assert!(Table::parse("a\tb\n1\n", "mem").is_err());
    }
}
