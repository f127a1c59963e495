//! Survey-structured functional datasets: validation, design summaries and CSV I/O.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const INTERCEPT: &str = "(Intercept)";

/// `n` individuals observed on a common grid of `L` points, each with `P`
/// covariates (intercept included), a survey weight, a stratum and a PSU.
///
/// Stratum and PSU labels are mapped to dense indices ordered by label, so
/// the mapping does not depend on row order. PSU indices are global: a label
/// reused in two strata denotes two distinct PSUs.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalDesignDataset {
    outcomes: DMatrix<f64>,
    covariates: DMatrix<f64>,
    covariate_names: Vec<String>,
    weights: Vec<f64>,
    strata: Vec<usize>,
    psus: Vec<usize>,
    stratum_labels: Vec<String>,
    psu_labels: Vec<String>,
    psu_stratum: Vec<usize>,
    grid: Vec<f64>,
    grid_labels: Vec<f64>,
}

/// Raw inputs for [`FunctionalDesignDataset::new`].
#[derive(Clone, Debug)]
pub struct DatasetParts {
    pub outcomes: DMatrix<f64>,
    pub covariates: DMatrix<f64>,
    pub covariate_names: Vec<String>,
    pub weights: Vec<f64>,
    pub strata: Vec<String>,
    pub psus: Vec<String>,
    /// Grid labels in input units; `None` means `L` equispaced points on [0,1].
    pub grid: Option<Vec<f64>>,
}

impl FunctionalDesignDataset {
    pub fn new(parts: DatasetParts) -> Result<Self> {
        let DatasetParts {
            outcomes,
            covariates,
            covariate_names,
            weights,
            strata,
            psus,
            grid,
        } = parts;
        let n = outcomes.nrows();
        let n_grid = outcomes.ncols();
        if covariates.nrows() != n || weights.len() != n || strata.len() != n || psus.len() != n {
            return Err(Error::Schema(format!(
                "row count mismatch: outcomes {n}, covariates {}, weights {}, strata {}, psus {}",
                covariates.nrows(),
                weights.len(),
                strata.len(),
                psus.len()
            )));
        }
        if covariate_names.len() != covariates.ncols() {
            return Err(Error::Schema(format!(
                "{} covariate names for {} covariate columns",
                covariate_names.len(),
                covariates.ncols()
            )));
        }
        if n == 0 {
            return Err(Error::validation("dataset has no rows", vec![]));
        }
        if n < covariates.ncols() {
            return Err(Error::validation(
                format!("n = {n} is smaller than the number of covariates {}", covariates.ncols()),
                vec![],
            ));
        }

        let bad_weights: Vec<usize> = weights
            .iter()
            .enumerate()
            .filter(|(_, w)| !(w.is_finite() && **w > 0.0))
            .map(|(i, _)| i)
            .collect();
        if !bad_weights.is_empty() {
            return Err(Error::validation("weights must be finite and positive", bad_weights));
        }
        let bad_outcomes = nonfinite_rows(&outcomes);
        if !bad_outcomes.is_empty() {
            return Err(Error::validation("outcomes contain non-finite values", bad_outcomes));
        }
        let bad_covariates = nonfinite_rows(&covariates);
        if !bad_covariates.is_empty() {
            return Err(Error::validation("covariates contain non-finite values", bad_covariates));
        }

        let grid_labels = match grid {
            Some(g) => {
                if g.len() != n_grid {
                    return Err(Error::Schema(format!(
                        "grid has {} points but outcomes have {n_grid} columns",
                        g.len()
                    )));
                }
                g
            }
            None => equispaced_grid(n_grid),
        };
        let grid = normalize_grid(&grid_labels)?;

        let stratum_labels: Vec<String> = strata.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
        let stratum_index: BTreeMap<&str, usize> = stratum_labels
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let strata_idx: Vec<usize> = strata.iter().map(|s| stratum_index[s.as_str()]).collect();

        let psu_keys: BTreeSet<(usize, &str)> = strata_idx
            .iter()
            .zip(psus.iter())
            .map(|(&h, c)| (h, c.as_str()))
            .collect();
        let psu_index: BTreeMap<(usize, &str), usize> =
            psu_keys.iter().enumerate().map(|(i, &k)| (k, i)).collect();
        let psu_labels: Vec<String> = psu_keys.iter().map(|(_, c)| c.to_string()).collect();
        let psu_stratum: Vec<usize> = psu_keys.iter().map(|(h, _)| *h).collect();
        let psus_idx: Vec<usize> = strata_idx
            .iter()
            .zip(psus.iter())
            .map(|(&h, c)| psu_index[&(h, c.as_str())])
            .collect();

        let mut label_strata: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for (h, c) in &psu_keys {
            label_strata.entry(c).or_default().insert(*h);
        }
        for (label, hs) in &label_strata {
            if hs.len() > 1 {
                warn!(
                    "PSU label `{label}` appears in {} strata; treated as distinct PSUs",
                    hs.len()
                );
            }
        }

        Ok(Self {
            outcomes,
            covariates,
            covariate_names,
            weights,
            strata: strata_idx,
            psus: psus_idx,
            stratum_labels,
            psu_labels,
            psu_stratum,
            grid,
            grid_labels,
        })
    }

    pub fn n(&self) -> usize {
        self.outcomes.nrows()
    }

    pub fn n_grid(&self) -> usize {
        self.outcomes.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    /// `n × L` functional outcomes.
    pub fn outcomes(&self) -> &DMatrix<f64> {
        &self.outcomes
    }

    /// `n × P` design matrix.
    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Dense stratum index of each row.
    pub fn strata(&self) -> &[usize] {
        &self.strata
    }

    /// Dense global PSU index of each row.
    pub fn psus(&self) -> &[usize] {
        &self.psus
    }

    pub fn n_strata(&self) -> usize {
        self.stratum_labels.len()
    }

    pub fn n_psus(&self) -> usize {
        self.psu_labels.len()
    }

    pub fn stratum_labels(&self) -> &[String] {
        &self.stratum_labels
    }

    /// Original label of each global PSU.
    pub fn psu_labels(&self) -> &[String] {
        &self.psu_labels
    }

    /// Stratum containing each global PSU.
    pub fn psu_stratum(&self) -> &[usize] {
        &self.psu_stratum
    }

    /// Grid normalized to [0,1].
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Grid in input units, used to label outputs.
    pub fn grid_labels(&self) -> &[f64] {
        &self.grid_labels
    }

    /// Mean of each row's functional outcome over the grid.
    pub fn outcome_means(&self) -> Vec<f64> {
        let l = self.n_grid() as f64;
        (0..self.n())
            .map(|i| self.outcomes.row(i).iter().sum::<f64>() / l)
            .collect()
    }

    /// Copy with the survey weights replaced.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        let mut parts = self.to_parts();
        parts.weights = weights;
        Self::new(parts)
    }

    /// Rows `rows` (in the given order) as a new dataset.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let parts = self.to_parts();
        Self::new(DatasetParts {
            outcomes: self.outcomes.select_rows(rows.iter()),
            covariates: self.covariates.select_rows(rows.iter()),
            covariate_names: parts.covariate_names,
            weights: rows.iter().map(|&i| self.weights[i]).collect(),
            strata: rows.iter().map(|&i| parts.strata[i].clone()).collect(),
            psus: rows.iter().map(|&i| parts.psus[i].clone()).collect(),
            grid: parts.grid,
        })
    }

    pub fn to_parts(&self) -> DatasetParts {
        DatasetParts {
            outcomes: self.outcomes.clone(),
            covariates: self.covariates.clone(),
            covariate_names: self.covariate_names.clone(),
            weights: self.weights.clone(),
            strata: self.strata.iter().map(|&h| self.stratum_labels[h].clone()).collect(),
            psus: self.psus.iter().map(|&c| self.psu_labels[c].clone()).collect(),
            grid: Some(self.grid_labels.clone()),
        }
    }
}

fn nonfinite_rows(m: &DMatrix<f64>) -> Vec<usize> {
    (0..m.nrows())
        .filter(|&i| m.row(i).iter().any(|v| !v.is_finite()))
        .collect()
}

pub fn equispaced_grid(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![0.0];
    }
    let denom = (len - 1) as f64;
    (0..len).map(|l| l as f64 / denom).collect()
}

/// Affinely maps a strictly increasing grid onto [0,1].
pub fn normalize_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.len() < 2 {
        return Err(Error::validation(
            format!("grid must have at least 2 points, got {}", grid.len()),
            vec![],
        ));
    }
    if grid.iter().any(|g| !g.is_finite()) {
        return Err(Error::validation("grid contains non-finite values", vec![]));
    }
    let not_increasing: Vec<usize> = grid
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] <= w[0])
        .map(|(i, _)| i + 1)
        .collect();
    if !not_increasing.is_empty() {
        return Err(Error::validation("grid must be strictly increasing", not_increasing));
    }
    let lo = grid[0];
    let span = grid[grid.len() - 1] - lo;
    let last = grid.len() - 1;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(l, g)| if l == last { 1.0 } else { (g - lo) / span })
        .collect())
}

/// Counts and memberships of the two-stage design.
#[derive(Clone, Debug)]
pub struct DesignSummary {
    pub n_strata: usize,
    pub stratum_labels: Vec<String>,
    /// `C_h`: PSUs per stratum.
    pub psu_counts: Vec<usize>,
    /// Global PSU indices in each stratum.
    pub stratum_psus: Vec<Vec<usize>>,
    /// Stratum of each global PSU.
    pub psu_stratum: Vec<usize>,
    /// `I_{h,c}`: individuals per global PSU.
    pub psu_sizes: Vec<usize>,
    /// Row indices belonging to each global PSU.
    pub psu_members: Vec<Vec<usize>>,
    pub n_individuals: usize,
    /// `N`: total survey weight.
    pub total_weight: f64,
}

impl DesignSummary {
    pub fn n_psus(&self) -> usize {
        self.psu_sizes.len()
    }
}

pub fn summarize_design(ds: &FunctionalDesignDataset) -> DesignSummary {
    let n_psus = ds.n_psus();
    let mut psu_members = vec![Vec::new(); n_psus];
    for (i, &c) in ds.psus().iter().enumerate() {
        psu_members[c].push(i);
    }
    let mut stratum_psus = vec![Vec::new(); ds.n_strata()];
    for (c, &h) in ds.psu_stratum().iter().enumerate() {
        stratum_psus[h].push(c);
    }
    // sorted summation makes the total independent of row order
    let mut sorted = ds.weights().to_vec();
    sorted.sort_by(f64::total_cmp);
    DesignSummary {
        n_strata: ds.n_strata(),
        stratum_labels: ds.stratum_labels().to_vec(),
        psu_counts: stratum_psus.iter().map(Vec::len).collect(),
        psu_stratum: ds.psu_stratum().to_vec(),
        psu_sizes: psu_members.iter().map(Vec::len).collect(),
        stratum_psus,
        psu_members,
        n_individuals: ds.n(),
        total_weight: sorted.iter().sum(),
    }
}

/// Column names used when reading and writing dataset CSVs.
#[derive(Clone, Debug)]
pub struct ColumnMap {
    pub outcome_prefix: String,
    pub covariates: Vec<String>,
    pub weight: String,
    pub stratum: String,
    pub psu: String,
    /// Prepend an intercept column to the design.
    pub intercept: bool,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            outcome_prefix: "y_".into(),
            covariates: Vec::new(),
            weight: "weight".into(),
            stratum: "stratum".into(),
            psu: "psu".into(),
            intercept: true,
        }
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_dataset(path: &Path, columns: &ColumnMap, grid: Option<Vec<f64>>) -> Result<FunctionalDesignDataset> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    read_dataset(BufReader::new(file), columns, grid)
}

pub fn read_dataset<R: std::io::Read>(
    reader: R,
    columns: &ColumnMap,
    grid: Option<Vec<f64>>,
) -> Result<FunctionalDesignDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let weight_col = find(&columns.weight)?;
    let stratum_col = find(&columns.stratum)?;
    let psu_col = find(&columns.psu)?;
    let cov_cols = columns
        .covariates
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let outcome_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with(&columns.outcome_prefix))
        .map(|(i, _)| i)
        .collect();
    if outcome_cols.is_empty() {
        return Err(Error::Schema(format!(
            "no outcome columns with prefix `{}`",
            columns.outcome_prefix
        )));
    }

    let n_cov = cov_cols.len() + usize::from(columns.intercept);
    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut weights = Vec::new();
    let mut strata = Vec::new();
    let mut psus = Vec::new();
    let mut bad_rows = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |col: usize| -> Option<f64> { rec.get(col).and_then(|v| v.parse::<f64>().ok()) };
        let w = parse(weight_col);
        let ys: Option<Vec<f64>> = outcome_cols.iter().map(|&c| parse(c)).collect();
        let xs: Option<Vec<f64>> = cov_cols.iter().map(|&c| parse(c)).collect();
        match (w, ys, xs) {
            (Some(w), Some(ys), Some(xs)) => {
                weights.push(w);
                y.extend(ys);
                if columns.intercept {
                    x.push(1.0);
                }
                x.extend(xs);
            }
            _ => {
                bad_rows.push(row);
                continue;
            }
        }
        strata.push(rec.get(stratum_col).unwrap_or_default().to_string());
        psus.push(rec.get(psu_col).unwrap_or_default().to_string());
    }
    if !bad_rows.is_empty() {
        return Err(Error::validation("unparseable or missing numeric values", bad_rows));
    }
    let n = weights.len();
    let mut names = Vec::with_capacity(n_cov);
    if columns.intercept {
        names.push(INTERCEPT.to_string());
    }
    names.extend(columns.covariates.iter().cloned());
    FunctionalDesignDataset::new(DatasetParts {
        outcomes: DMatrix::from_row_slice(n, outcome_cols.len(), &y),
        covariates: DMatrix::from_row_slice(n, n_cov, &x),
        covariate_names: names,
        weights,
        strata,
        psus,
        grid,
    })
}

/// Zero-padded outcome column names `y_0001..`.
/// Shortest round-trip text of `v`, in exponent form when plain notation
/// would be long.
pub fn format_float(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) || !v.is_finite() {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

pub fn outcome_column_names(prefix: &str, len: usize) -> Vec<String> {
    let width = len.to_string().len().max(4);
    (1..=len).map(|l| format!("{prefix}{l:0width$}")).collect()
}

/// Writes the dataset in the schema [`read_dataset`] accepts. The intercept
/// column is omitted; floats use the shortest round-trip representation.
pub fn write_dataset<W: Write>(ds: &FunctionalDesignDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let cov_idx: Vec<usize> = (0..ds.n_covariates())
        .filter(|&j| ds.covariate_names()[j] != INTERCEPT)
        .collect();
    let mut header = vec!["stratum".to_string(), "psu".to_string(), "weight".to_string()];
    header.extend(cov_idx.iter().map(|&j| ds.covariate_names()[j].clone()));
    header.extend(outcome_column_names("y_", ds.n_grid()));
    wtr.write_record(&header)?;
    let mut rec = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        rec.clear();
        rec.push(ds.stratum_labels()[ds.strata()[i]].clone());
        rec.push(ds.psu_labels()[ds.psus()[i]].clone());
        rec.push(format_float(ds.weights()[i]));
        rec.extend(cov_idx.iter().map(|&j| format_float(ds.covariates()[(i, j)])));
        rec.extend(ds.outcomes().row(i).iter().map(|v| format_float(*v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::Io {
        path: "<writer>".into(),
        source: e,
    })?;
    Ok(())
}

pub fn save_dataset(ds: &FunctionalDesignDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    write_dataset(ds, BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cols(covs: &[&str]) -> ColumnMap {
        ColumnMap {
            covariates: covs.iter().map(|s| s.to_string()).collect(),
            ..ColumnMap::default()
        }
    }

    #[test]
    fn minimal_csv_loads() {
        let csv = "stratum,psu,weight,x,y_0001,y_0002\n\
                   a,1,1.5,0.3,1.0,2.0\n\
                   a,2,2.0,-0.1,0.5,0.25\n\
                   b,1,3.0,1.2,0.0,1.0\n";
        let ds = read_dataset(csv.as_bytes(), &cols(&[]), None).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.n_grid(), 2);
        assert_eq!(ds.n_covariates(), 1);
        assert_eq!(ds.grid(), &[0.0, 1.0]);
        let ds = read_dataset(csv.as_bytes(), &cols(&["x"]), None).unwrap();
        assert_eq!(ds.n_covariates(), 2);
        assert_eq!(ds.covariates()[(2, 1)], 1.2);
    }

    #[test]
    fn zero_weight_is_rejected_with_row() {
        let csv = "stratum,psu,weight,y_0001,y_0002\na,1,1,0,0\na,1,0,1,1\na,2,2,1,1\n";
        match read_dataset(csv.as_bytes(), &cols(&[]), None) {
            Err(Error::Validation { rows, .. }) => assert_eq!(rows, vec![1]),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let csv = "stratum,weight,y_0001,y_0002\na,1,0,0\n";
        assert!(matches!(
            read_dataset(csv.as_bytes(), &cols(&[]), None),
            Err(Error::Schema(_))
        ));
        let csv = "stratum,psu,weight,y_0001,y_0002\na,1,1,0,0\n";
        assert!(matches!(
            read_dataset(csv.as_bytes(), &cols(&["age"]), None),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn nonfinite_outcome_rejected() {
        let csv = "stratum,psu,weight,y_0001,y_0002\na,1,1,0,NaN\na,2,1,0,1\n";
        match read_dataset(csv.as_bytes(), &cols(&[]), None) {
            Err(Error::Validation { rows, .. }) => assert_eq!(rows, vec![0]),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn psu_label_reused_across_strata_is_split() {
        let csv = "stratum,psu,weight,y_0001,y_0002\n\
                   s1,A,1,0,0\ns1,B,1,0,0\ns2,A,1,0,0\ns2,B,1,0,0\ns2,A,1,0,0\n";
        let ds = read_dataset(csv.as_bytes(), &cols(&[]), None).unwrap();
        assert_eq!(ds.n_psus(), 4);
        assert_ne!(ds.psus()[0], ds.psus()[2]);
        assert_eq!(ds.psus()[2], ds.psus()[4]);
        assert_ne!(ds.psus()[1], ds.psus()[3]);
        let summary = summarize_design(&ds);
        assert_eq!(summary.psu_counts, vec![2, 2]);
        assert_eq!(summary.psu_sizes.iter().sum::<usize>(), 5);
    }

    #[test]
    fn grid_is_normalized_and_labels_kept() {
        let csv = "stratum,psu,weight,y_0001,y_0002,y_0003\na,1,1,0,0,0\na,2,1,1,1,1\n";
        let ds = read_dataset(csv.as_bytes(), &cols(&[]), Some(vec![60.0, 120.0, 300.0])).unwrap();
        assert_eq!(ds.grid(), &[0.0, 0.25, 1.0]);
        assert_eq!(ds.grid_labels(), &[60.0, 120.0, 300.0]);
        assert!(read_dataset(csv.as_bytes(), &cols(&[]), Some(vec![0.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn design_counts() {
        let mut strata = Vec::new();
        let mut psus = Vec::new();
        for h in 0..30 {
            for c in 0..2 {
                for _ in 0..100 {
                    strata.push(format!("h{h}"));
                    psus.push(format!("c{c}"));
                }
            }
        }
        let n = strata.len();
        let ds = FunctionalDesignDataset::new(DatasetParts {
            outcomes: DMatrix::zeros(n, 2),
            covariates: DMatrix::from_element(n, 1, 1.0),
            covariate_names: vec![INTERCEPT.into()],
            weights: vec![1.0; n],
            strata,
            psus,
            grid: None,
        })
        .unwrap();
        let s = summarize_design(&ds);
        assert_eq!(s.n_strata, 30);
        assert!(s.psu_counts.iter().all(|&c| c == 2));
        assert_eq!(s.n_individuals, 6000);
        assert_eq!(s.total_weight, 6000.0);
        assert_eq!(s.psu_counts.iter().sum::<usize>(), s.n_psus());
    }
}
