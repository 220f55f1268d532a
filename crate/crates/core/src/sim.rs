//! Correlated-block synthetic expression data with known DE features.
//!
//! Features come in independent blocks. Within a block, each sample is
//! equicorrelated normal with mean `base_mean`, variance `sigma_sq` and
//! correlation `rho_sim`, drawn as `mean + σ(√ρ·s + √(1−ρ)·e)`. A random
//! set of features gets `±δ` added to every class-2 sample.

use std::path::Path;

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ExpressionMatrix;
use crate::error::{Error, Result};
use crate::seed;

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub p1: usize,
    pub p2: usize,
    pub block_size: usize,
    pub n_blocks: usize,
    pub base_mean: f64,
    pub sigma_sq: f64,
    pub rho_sim: f64,
    pub delta: f64,
    pub de_fraction: f64,
    /// Draw the same number of DE features from each block.
    pub stratified: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            p1: 10,
            p2: 10,
            block_size: 500,
            n_blocks: 6,
            base_mean: 10.0,
            sigma_sq: 4.0,
            rho_sim: 0.0,
            delta: 2.0,
            de_fraction: 0.2,
            stratified: false,
        }
    }
}

/// Named presets: `table2-set1..4` and `fig3-set1..4`.
pub const PRESETS: [&str; 8] = [
    "table2-set1",
    "table2-set2",
    "table2-set3",
    "table2-set4",
    "fig3-set1",
    "fig3-set2",
    "fig3-set3",
    "fig3-set4",
];

impl SimConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (delta, rho_sim) = match name {
            "table2-set1" => (2.0, 0.0),
            "table2-set2" => (2.0, 0.4),
            "table2-set3" => (3.0, 0.0),
            "table2-set4" => (3.0, 0.4),
            "fig3-set1" => (2.0, 0.0),
            "fig3-set2" => (2.0, 0.4),
            "fig3-set3" => (2.0, 0.6),
            "fig3-set4" => (2.0, 0.8),
            _ => {
                return Err(Error::ParameterDomain(format!(
                    "unknown preset `{name}` (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        };
        Ok(Self {
            delta,
            rho_sim,
            ..Self::default()
        })
    }

    pub fn n_features(&self) -> usize {
        self.block_size * self.n_blocks
    }

    pub fn n_samples(&self) -> usize {
        self.p1 + self.p2
    }

    /// Number of up (and of down) regulated features.
    pub fn n_de_each(&self) -> Result<usize> {
        let total = self.de_fraction * self.n_features() as f64;
        let k = total.round();
        if (total - k).abs() > 1e-9 || !(k as usize).is_multiple_of(2) {
            return Err(Error::ParameterDomain(format!(
                "de_fraction · n = {total} is not an even integer"
            )));
        }
        Ok(k as usize / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p1 < 2 || self.p2 < 2 {
            return Err(Error::ParameterDomain("each class needs at least 2 samples".into()));
        }
        if self.block_size == 0 || self.n_blocks == 0 {
            return Err(Error::ParameterDomain("empty block layout".into()));
        }
        if !(0.0..1.0).contains(&self.rho_sim) {
            return Err(Error::ParameterDomain(format!("rho_sim = {} outside [0, 1)", self.rho_sim)));
        }
        if !(self.sigma_sq > 0.0) || !self.base_mean.is_finite() || !self.delta.is_finite() {
            return Err(Error::ParameterDomain("sigma_sq must be positive and means finite".into()));
        }
        if !(0.0..=1.0).contains(&self.de_fraction) {
            return Err(Error::ParameterDomain("de_fraction outside [0, 1]".into()));
        }
        let each = self.n_de_each()?;
        if self.stratified && !(2 * each).is_multiple_of(self.n_blocks) {
            return Err(Error::ParameterDomain("stratified selection needs DE count divisible by n_blocks".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeLabel {
    Null,
    Up,
    Down,
}

impl DeLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            DeLabel::Null => "null",
            DeLabel::Up => "up",
            DeLabel::Down => "down",
        }
    }

    pub fn is_de(&self) -> bool {
        *self != DeLabel::Null
    }
}

/// Ground truth aligned to the generated features.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTruth {
    pub feature_ids: Vec<String>,
    pub de_label: Vec<DeLabel>,
    /// Shift added to class-2 samples.
    pub shift: Vec<f64>,
}

impl SimulationTruth {
    pub fn n_de(&self) -> usize {
        self.de_label.iter().filter(|l| l.is_de()).count()
    }

    pub fn is_de(&self) -> Vec<bool> {
        self.de_label.iter().map(DeLabel::is_de).collect()
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("feature_id\tde_label\tshift\n");
        for ((id, l), d) in self.feature_ids.iter().zip(&self.de_label).zip(&self.shift) {
            s.push_str(&format!("{id}\t{}\t{}\n", l.as_str(), crate::format::fmt_f64(*d)));
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text, &path.display().to_string())
    }

    pub fn parse_tsv(text: &str, origin: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            file: origin.to_string(),
            message: format!("line {line}: {message}"),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.split('\t').next() == Some("feature_id") => {}
            _ => return Err(perr(1, "expected header starting with feature_id".into())),
        }
        let mut t = SimulationTruth {
            feature_ids: vec![],
            de_label: vec![],
            shift: vec![],
        };
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() < 2 {
                return Err(perr(i + 1, "expected at least feature_id and de_label".into()));
            }
            let label = match f[1] {
                "null" => DeLabel::Null,
                "up" => DeLabel::Up,
                "down" => DeLabel::Down,
                other => return Err(perr(i + 1, format!("unknown de_label `{other}`"))),
            };
            let shift = match f.get(2) {
                Some(v) => v.parse::<f64>().map_err(|_| perr(i + 1, format!("bad shift `{v}`")))?,
                None => 0.0,
            };
            t.feature_ids.push(f[0].to_string());
            t.de_label.push(label);
            t.shift.push(shift);
        }
        Ok(t)
    }
}

fn choose_de(config: &SimConfig, master: u64) -> Vec<usize> {
    let n = config.n_features();
    let total = 2 * config.n_de_each().unwrap_or(0);
    let mut rng = seed::rng(master, 0);
    if config.stratified {
        let per = total / config.n_blocks;
        let mut out = Vec::with_capacity(total);
        for blk in 0..config.n_blocks {
            out.extend(sample(&mut rng, config.block_size, per).into_iter().map(|k| blk * config.block_size + k));
        }
        // round-robin over blocks so the first (up) half is balanced too
        let mut inter = Vec::with_capacity(total);
        for r in 0..per {
            for blk in 0..config.n_blocks {
                inter.push(out[blk * per + r]);
            }
        }
        inter
    } else {
        sample(&mut rng, n, total).into_vec()
    }
}

/// Generate a dataset and its truth. Deterministic in `seed_value`.
pub fn generate_dataset(config: &SimConfig, seed_value: u64) -> Result<(ExpressionMatrix, SimulationTruth)> {
    config.validate()?;
    let n = config.n_features();
    let p = config.n_samples();
    let sigma = config.sigma_sq.sqrt();
    let (a, b) = (config.rho_sim.sqrt(), (1.0 - config.rho_sim).sqrt());

    // column-major draws, one RNG stream per sample
    let columns: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|k| {
            let mut rng = seed::rng(seed_value, 1 + k as u64);
            let mut col = Vec::with_capacity(n);
            for _ in 0..config.n_blocks {
                let s: f64 = StandardNormal.sample(&mut rng);
                for _ in 0..config.block_size {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    col.push(config.base_mean + sigma * (a * s + b * e));
                }
            }
            col
        })
        .collect();

    let each = config.n_de_each()?;
    let chosen = choose_de(config, seed_value);
    let mut de_label = vec![DeLabel::Null; n];
    let mut shift = vec![0.0; n];
    for (r, &j) in chosen.iter().enumerate() {
        let up = r < each;
        de_label[j] = if up { DeLabel::Up } else { DeLabel::Down };
        shift[j] = if up { config.delta } else { -config.delta };
    }

    let mut values = vec![0.0; n * p];
    for (k, col) in columns.iter().enumerate() {
        let class2 = k >= config.p1;
        for j in 0..n {
            values[j * p + k] = col[j] + if class2 { shift[j] } else { 0.0 };
        }
    }
    let width = n.to_string().len();
    let feature_ids: Vec<String> = (1..=n).map(|j| format!("g{j:0width$}")).collect();
    let sample_ids: Vec<String> = (1..=p).map(|k| format!("s{k:02}")).collect();
    let classes: Vec<usize> = (0..p).map(|k| if k < config.p1 { 1 } else { 2 }).collect();
    let data = ExpressionMatrix::new(values, feature_ids.clone(), sample_ids, classes)?;
    Ok((
        data,
        SimulationTruth {
            feature_ids,
            de_label,
            shift,
        },
    ))
}
