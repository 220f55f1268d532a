//! Expression matrices, class labels and the design matrices of the
//! component models.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::format::fmt_f64;

/// An n×p matrix of feature measurements with per-sample class labels.
///
/// Rows are features (genes), columns are samples. Values are stored
/// row-major so a feature profile is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    n: usize,
    p: usize,
    values: Vec<f64>,
    feature_ids: Vec<String>,
    sample_ids: Vec<String>,
    class_of_sample: Vec<usize>,
    n_classes: usize,
    standardized: bool,
}

impl ExpressionMatrix {
    /// Build from row-major values. Classes are 1-based and must form 1..m
    /// with at least two samples each.
    pub fn new(
        values: Vec<f64>,
        feature_ids: Vec<String>,
        sample_ids: Vec<String>,
        class_of_sample: Vec<usize>,
    ) -> Result<Self> {
        let n = feature_ids.len();
        let p = sample_ids.len();
        if n == 0 || p == 0 {
            return Err(Error::Data("matrix must have at least one feature and one sample".into()));
        }
        if values.len() != n * p {
            return Err(Error::Data(format!(
                "expected {} values for a {}x{} matrix, got {}",
                n * p,
                n,
                p,
                values.len()
            )));
        }
        if class_of_sample.len() != p {
            return Err(Error::Data(format!(
                "{} class labels for {} samples",
                class_of_sample.len(),
                p
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value at row {}, column {}",
                pos / p + 1,
                pos % p + 1
            )));
        }
        let mut seen = HashSet::new();
        for id in &feature_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Data(format!("duplicate feature id {id:?}")));
            }
        }
        let n_classes = check_classes(&class_of_sample)?;
        Ok(Self {
            n,
            p,
            values,
            feature_ids,
            sample_ids,
            class_of_sample,
            n_classes,
            standardized: false,
        })
    }

    /// Convenience constructor with generated ids (`f1..`, `s1..`).
    pub fn from_rows(rows: &[Vec<f64>], class_of_sample: Vec<usize>) -> Result<Self> {
        let p = class_of_sample.len();
        let mut values = Vec::with_capacity(rows.len() * p);
        for (j, r) in rows.iter().enumerate() {
            if r.len() != p {
                return Err(Error::Data(format!("row {} has {} values, expected {}", j + 1, r.len(), p)));
            }
            values.extend_from_slice(r);
        }
        let feature_ids = (1..=rows.len()).map(|j| format!("f{j}")).collect();
        let sample_ids = (1..=p).map(|k| format!("s{k}")).collect();
        Self::new(values, feature_ids, sample_ids, class_of_sample)
    }

    pub fn n_features(&self) -> usize {
        self.n
    }

    pub fn n_samples(&self) -> usize {
        self.p
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn is_standardized(&self) -> bool {
        self.standardized
    }

    pub fn feature_ids(&self) -> &[String] {
        &self.feature_ids
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    /// 1-based class of each sample, in column order.
    pub fn class_of_sample(&self) -> &[usize] {
        &self.class_of_sample
    }

    /// Number of samples in each class, index 0 ↔ class 1.
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_classes];
        for &c in &self.class_of_sample {
            sizes[c - 1] += 1;
        }
        sizes
    }

    /// Profile of feature `j` (length p).
    pub fn profile(&self, j: usize) -> &[f64] {
        &self.values[j * self.p..(j + 1) * self.p]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.values[j * self.p + k]
    }

    /// Same data with feature rows reordered: row `r` of the result is row
    /// `order[r]` of `self`.
    pub fn permute_rows(&self, order: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        let mut ids = Vec::with_capacity(self.n);
        for &j in order {
            values.extend_from_slice(self.profile(j));
            ids.push(self.feature_ids[j].clone());
        }
        Self {
            values,
            feature_ids: ids,
            ..self.clone()
        }
    }

    /// Write the matrix TSV (header of sample ids, then one row per feature).
    pub fn write_matrix_tsv(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        let io = |e| Error::io(path, e);
        write!(w, "feature_id").map_err(io)?;
        for s in &self.sample_ids {
            write!(w, "\t{s}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
        for j in 0..self.n {
            write!(w, "{}", self.feature_ids[j]).map_err(io)?;
            for &v in self.profile(j) {
                write!(w, "\t{}", fmt_f64(v)).map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Write the labels TSV (`sample_id<TAB>class_index`).
    pub fn write_labels_tsv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (s, c) in self.sample_ids.iter().zip(&self.class_of_sample) {
            out.push_str(&format!("{s}\t{c}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn check_classes(class_of_sample: &[usize]) -> Result<usize> {
    let m = class_of_sample.iter().copied().max().unwrap_or(0);
    if class_of_sample.contains(&0) {
        return Err(Error::Data("class indices must start at 1".into()));
    }
    let mut sizes = vec![0usize; m];
    for &c in class_of_sample {
        sizes[c - 1] += 1;
    }
    for (h, &s) in sizes.iter().enumerate() {
        if s == 0 {
            return Err(Error::Data(format!(
                "class indices do not form 1..{m}: class {} is absent",
                h + 1
            )));
        }
    }
    for (h, &s) in sizes.iter().enumerate() {
        if s < 2 {
            return Err(Error::Data(format!("class {} has fewer than 2 samples", h + 1)));
        }
    }
    Ok(m)
}

/// Parse the matrix and labels TSV pair.
pub fn load_expression_matrix(matrix_path: &Path, labels_path: &Path) -> Result<ExpressionMatrix> {
    let text = fs::read_to_string(matrix_path).map_err(|e| Error::io(matrix_path, e))?;
    let labels_text = fs::read_to_string(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_expression_matrix(&text, &labels_text, &matrix_path.display().to_string())
}

/// Parse from in-memory TSV text; `origin` names the matrix source in errors.
pub fn parse_expression_matrix(matrix: &str, labels: &str, origin: &str) -> Result<ExpressionMatrix> {
    let perr = |file: &str, message: String| Error::Parse {
        file: file.to_string(),
        message,
    };
    let mut label_map: HashMap<String, usize> = HashMap::new();
    for (ln, line) in labels.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(sid), Some(cls)) = (parts.next(), parts.next()) else {
            return Err(perr("labels", format!("line {}: expected sample_id<TAB>class_index", ln + 1)));
        };
        let c: usize = cls
            .trim()
            .parse()
            .map_err(|_| perr("labels", format!("line {}: class index {cls:?} is not a positive integer", ln + 1)))?;
        if label_map.insert(sid.trim().to_string(), c).is_some() {
            return Err(perr("labels", format!("line {}: duplicate sample id {sid:?}", ln + 1)));
        }
    }

    let mut lines = matrix.lines().map(|l| l.trim_end_matches('\r'));
    let header = lines
        .next()
        .ok_or_else(|| perr(origin, "empty matrix file".into()))?;
    let mut cols = header.split('\t');
    let _corner = cols.next();
    let sample_ids: Vec<String> = cols.map(|s| s.trim().to_string()).collect();
    if sample_ids.is_empty() {
        return Err(perr(origin, "header has no sample columns".into()));
    }
    let p = sample_ids.len();
    let mut class_of_sample = Vec::with_capacity(p);
    for s in &sample_ids {
        match label_map.get(s) {
            Some(&c) => class_of_sample.push(c),
            None => return Err(Error::Data(format!("sample {s:?} in matrix header is missing from labels file"))),
        }
    }

    let mut values = Vec::new();
    let mut feature_ids = Vec::new();
    for (r, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        // file row number: header is row 1
        let row_no = r + 2;
        let mut cells = line.split('\t');
        let id = cells.next().unwrap_or("").trim().to_string();
        let mut count = 0;
        for (k, cell) in cells.enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                perr(origin, format!("non-numeric value at row {row_no}, column {}", k + 2))
            })?;
            if !v.is_finite() {
                return Err(perr(origin, format!("non-numeric value at row {row_no}, column {}", k + 2)));
            }
            values.push(v);
            count += 1;
        }
        if count != p {
            return Err(perr(origin, format!("row {row_no} has {count} values, expected {p}")));
        }
        feature_ids.push(id);
    }
    ExpressionMatrix::new(values, feature_ids, sample_ids, class_of_sample)
}

/// Rescale every column to mean 0 and sample sd 1 (n−1 denominator over
/// the features). Rows are never standardized.
pub fn column_standardize(data: &ExpressionMatrix) -> Result<ExpressionMatrix> {
    if data.n < 2 {
        return Err(Error::Data("column standardization needs at least 2 features".into()));
    }
    let (n, p) = (data.n, data.p);
    let mut out = data.clone();
    for k in 0..p {
        let mean = (0..n).map(|j| data.get(j, k)).sum::<f64>() / n as f64;
        let ss: f64 = (0..n).map(|j| (data.get(j, k) - mean).powi(2)).sum();
        let sd = (ss / (n - 1) as f64).sqrt();
        if !(sd > 1e-12 * mean.abs().max(f64::MIN_POSITIVE)) {
            return Err(Error::Data(format!(
                "constant column {} ({:?}) cannot be standardized",
                k + 1,
                data.sample_ids[k]
            )));
        }
        for j in 0..n {
            out.values[j * p + k] = (data.get(j, k) - mean) / sd;
        }
    }
    out.standardized = true;
    Ok(out)
}

/// Design matrices of the component model: X (class indicators), U = X,
/// V = I_p.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    pub x: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    class_of_sample: Vec<usize>,
}

impl DesignMatrices {
    pub fn n_classes(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_samples(&self) -> usize {
        self.x.nrows()
    }

    pub fn class_of_sample(&self) -> &[usize] {
        &self.class_of_sample
    }

    /// Diagonal of XᵀX, i.e. the class sizes.
    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_classes()];
        for &c in &self.class_of_sample {
            sizes[c - 1] += 1;
        }
        sizes
    }
}

/// Build X, U and V for 1-based contiguous class labels.
pub fn build_design_matrices(class_of_sample: &[usize]) -> Result<DesignMatrices> {
    let m = class_of_sample.iter().copied().max().unwrap_or(0);
    let p = class_of_sample.len();
    if p == 0 || class_of_sample.contains(&0) {
        return Err(Error::Data("class labels must be 1-based and non-empty".into()));
    }
    let present: HashSet<usize> = class_of_sample.iter().copied().collect();
    if present.len() != m {
        return Err(Error::Data(format!("class indices do not form 1..{m}")));
    }
    let mut x = DMatrix::zeros(p, m);
    for (k, &c) in class_of_sample.iter().enumerate() {
        x[(k, c - 1)] = 1.0;
    }
    Ok(DesignMatrices {
        u: x.clone(),
        x,
        v: DMatrix::identity(p, p),
        class_of_sample: class_of_sample.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const M34: &str = "id\ts1\ts2\ts3\ts4\ng1\t1\t2\t3\t4\ng2\t0.5\t-1\t2\t7\ng3\t3\t3\t1\t0\n";
    const L34: &str = "s1\t1\ns2\t1\ns3\t2\ns4\t2\n";

    #[test]
    fn parses_small_matrix() {
        let d = parse_expression_matrix(M34, L34, "m").unwrap();
        assert_eq!(d.n_features(), 3);
        assert_eq!(d.n_samples(), 4);
        assert_eq!(d.n_classes(), 2);
        assert_eq!(d.class_sizes(), vec![2, 2]);
        assert!(!d.is_standardized());
        assert_eq!(d.profile(1), &[0.5, -1.0, 2.0, 7.0]);
    }

    #[test]
    fn labels_not_column_order_define_classes() {
        let labels = "s4\t1\ns3\t1\ns2\t2\ns1\t2\n";
        let d = parse_expression_matrix(M34, labels, "m").unwrap();
        assert_eq!(d.class_of_sample(), &[2, 2, 1, 1]);
    }

    #[test]
    fn rejects_small_class() {
        let m = "id\ts1\ts2\ts3\ng1\t1\t2\t3\ng2\t1\t1\t1\n";
        let l = "s1\t1\ns2\t1\ns3\t2\n";
        let err = parse_expression_matrix(m, l, "m").unwrap_err();
        assert!(err.to_string().contains("class 2 has fewer than 2 samples"), "{err}");
    }

    #[test]
    fn rejects_non_numeric() {
        let m = "id\ts1\ts2\ts3\ts4\ng1\t1\tNA\t3\t4\n";
        let err = parse_expression_matrix(m, L34, "m").unwrap_err();
        assert!(err.to_string().contains("non-numeric value at row 2, column 3"), "{err}");
    }

    #[test]
    fn rejects_missing_sample_and_gapped_classes_and_duplicates() {
        let l = "s1\t1\ns2\t1\ns3\t2\n";
        assert!(parse_expression_matrix(M34, l, "m").unwrap_err().to_string().contains("missing from labels"));
        let l = "s1\t1\ns2\t1\ns3\t3\ns4\t3\n";
        assert!(parse_expression_matrix(M34, l, "m").unwrap_err().to_string().contains("do not form"));
        let m = "id\ts1\ts2\ts3\ts4\ng1\t1\t2\t3\t4\ng1\t1\t2\t3\t5\n";
        assert!(parse_expression_matrix(m, L34, "m").unwrap_err().to_string().contains("duplicate feature"));
    }

    #[test]
    fn standardizes_simple_column() {
        let d = ExpressionMatrix::from_rows(
            &[vec![1.0, 4.0], vec![2.0, 0.0], vec![3.0, 5.0]],
            vec![1, 1],
        )
        .unwrap();
        let s = column_standardize(&d).unwrap();
        assert!(s.is_standardized());
        let col: Vec<f64> = (0..3).map(|j| s.get(j, 0)).collect();
        for (a, b) in col.iter().zip([-1.0, 0.0, 1.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_column_is_an_error() {
        let d = ExpressionMatrix::from_rows(
            &[vec![5.0, 1.0], vec![5.0, 2.0], vec![5.0, 3.0]],
            vec![1, 1],
        )
        .unwrap();
        let err = column_standardize(&d).unwrap_err();
        assert!(err.to_string().contains("constant column 1"), "{err}");
    }

    #[test]
    fn design_for_two_classes() {
        let d = build_design_matrices(&[1, 1, 2]).unwrap();
        assert_eq!(d.x, DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
        assert_eq!(d.u, d.x);
        assert_eq!(d.v, DMatrix::<f64>::identity(3, 3));
        let xtx = d.x.transpose() * &d.x;
        assert_eq!(xtx, DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.0])));
    }

    #[test]
    fn design_single_class() {
        let d = build_design_matrices(&[1, 1]).unwrap();
        assert_eq!(d.x, DMatrix::from_element(2, 1, 1.0));
    }
}
