//! Accuracy and coverage metrics for simulation studies.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;

use crate::data::{format_float, FunctionalDesignDataset};
use crate::error::{Error, Result};
use crate::inference::BandEstimate;

/// Trapezoidal `∫ (β̂ - β)²` over the grid.
pub fn ise(beta_hat: &[f64], beta_true: &[f64], grid: &[f64]) -> Result<f64> {
    if beta_hat.len() != grid.len() || beta_true.len() != grid.len() {
        return Err(Error::GridMismatch(format!(
            "estimate has {} points, truth {}, grid {}",
            beta_hat.len(),
            beta_true.len(),
            grid.len()
        )));
    }
    let sq: Vec<f64> = beta_hat.iter().zip(beta_true).map(|(a, b)| (a - b).powi(2)).collect();
    Ok(trapezoid(&sq, grid))
}

pub fn trapezoid(values: &[f64], grid: &[f64]) -> f64 {
    values
        .windows(2)
        .zip(grid.windows(2))
        .map(|(v, s)| 0.5 * (v[0] + v[1]) * (s[1] - s[0]).abs())
        .sum()
}

/// Share of grid points with truth inside `β̂ ± mult·se`, and whether the
/// truth lies inside the CMA band everywhere, per coefficient.
pub fn coverage_with(bands: &BandEstimate, beta_true: &DMatrix<f64>, mult: f64) -> Result<(Vec<f64>, Vec<bool>)> {
    if beta_true.shape() != bands.beta_hat.shape() {
        return Err(Error::GridMismatch(format!(
            "truth is {:?}, bands are {:?}",
            beta_true.shape(),
            bands.beta_hat.shape()
        )));
    }
    let (p, l) = bands.beta_hat.shape();
    let mut pointwise = Vec::with_capacity(p);
    let mut joint = Vec::with_capacity(p);
    for j in 0..p {
        let mut hits = 0;
        let mut all = true;
        for s in 0..l {
            let t = beta_true[(j, s)];
            let (b, se) = (bands.beta_hat[(j, s)], bands.se[(j, s)]);
            if (t - b).abs() <= mult * se {
                hits += 1;
            }
            if !(bands.cma_lo[(j, s)] <= t && t <= bands.cma_hi[(j, s)]) {
                all = false;
            }
        }
        pointwise.push(hits as f64 / l as f64);
        joint.push(all);
    }
    Ok((pointwise, joint))
}

/// Coverage with the ±2 standard error pointwise band.
pub fn coverage(bands: &BandEstimate, beta_true: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<bool>)> {
    coverage_with(bands, beta_true, 2.0)
}

/// Integrated between-PSU variance of the PSU mean curves over the
/// integrated total variance.
pub fn variance_proportion(ds: &FunctionalDesignDataset) -> Result<f64> {
    let k = ds.n_psus();
    if k < 2 {
        return Err(Error::Design("variance proportion needs at least two PSUs".into()));
    }
    let (n, l) = ds.outcomes().shape();
    let y = ds.outcomes();
    let mut count = vec![0usize; k];
    let mut sums = DMatrix::<f64>::zeros(k, l);
    for i in 0..n {
        let c = ds.psus()[i];
        count[c] += 1;
        for s in 0..l {
            sums[(c, s)] += y[(i, s)];
        }
    }
    let (mut between, mut total) = (0.0, 0.0);
    for s in 0..l {
        let grand = y.column(s).sum() / n as f64;
        for c in 0..k {
            if count[c] > 0 {
                let m = sums[(c, s)] / count[c] as f64;
                between += count[c] as f64 * (m - grand).powi(2);
            }
        }
        total += y.column(s).iter().map(|v| (v - grand).powi(2)).sum::<f64>();
    }
    if total <= 0.0 {
        return Ok(0.0);
    }
    Ok((between / total).clamp(0.0, 1.0))
}

/// Metrics of one fitted run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Setting and method labels used for grouping.
    pub labels: BTreeMap<String, String>,
    pub coefficient_names: Vec<String>,
    pub ise: Vec<f64>,
    pub pointwise_coverage: Vec<f64>,
    pub joint_coverage: Vec<bool>,
    pub variance_proportion: Option<f64>,
}

impl EvalReport {
    pub fn new(
        labels: BTreeMap<String, String>,
        bands: &BandEstimate,
        beta_true: &DMatrix<f64>,
        grid: &[f64],
    ) -> Result<Self> {
        let (pointwise_coverage, joint_coverage) = coverage(bands, beta_true)?;
        let ise = (0..bands.n_coefficients())
            .map(|j| {
                let est: Vec<f64> = bands.beta_hat.row(j).iter().cloned().collect();
                let tru: Vec<f64> = beta_true.row(j).iter().cloned().collect();
                ise(&est, &tru, grid)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            labels,
            coefficient_names: bands.coefficient_names.clone(),
            ise,
            pointwise_coverage,
            joint_coverage,
            variance_proportion: None,
        })
    }
}

/// One row of an aggregated table.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub group: Vec<(String, String)>,
    pub coefficient: String,
    pub n_runs: usize,
    pub mise: f64,
    pub log10_mise: f64,
    pub pointwise_coverage: f64,
    pub joint_coverage: f64,
    pub variance_proportion: Option<f64>,
}

/// Groups reports by the values of `keys` and averages each coefficient's
/// metrics within a group. Groups appear in sorted key order.
pub fn aggregate_runs(reports: &[EvalReport], keys: &[&str]) -> Result<Vec<SummaryRow>> {
    if reports.is_empty() {
        return Err(Error::Parameter("no reports to aggregate".into()));
    }
    let mut groups: BTreeMap<Vec<(String, String)>, Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        let key = keys
            .iter()
            .map(|k| (k.to_string(), r.labels.get(*k).cloned().unwrap_or_default()))
            .collect();
        groups.entry(key).or_default().push(r);
    }
    let mut rows = Vec::new();
    for (group, members) in groups {
        let names = &members[0].coefficient_names;
        if members.iter().any(|m| &m.coefficient_names != names) {
            return Err(Error::Parameter(format!("reports in group {group:?} have different coefficients")));
        }
        let runs = members.len() as f64;
        let vp: Vec<f64> = members.iter().filter_map(|m| m.variance_proportion).collect();
        for (j, name) in names.iter().enumerate() {
            let mise = members.iter().map(|m| m.ise[j]).sum::<f64>() / runs;
            rows.push(SummaryRow {
                group: group.clone(),
                coefficient: name.clone(),
                n_runs: members.len(),
                mise,
                log10_mise: mise.log10(),
                pointwise_coverage: members.iter().map(|m| m.pointwise_coverage[j]).sum::<f64>() / runs,
                joint_coverage: members.iter().filter(|m| m.joint_coverage[j]).count() as f64 / runs,
                variance_proportion: (!vp.is_empty()).then(|| vp.iter().sum::<f64>() / vp.len() as f64),
            });
        }
    }
    Ok(rows)
}

/// Long-format CSV: group columns, then coefficient and metrics.
pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let group_keys: Vec<String> = rows.first().map(|r| r.group.iter().map(|(k, _)| k.clone()).collect()).unwrap_or_default();
    let mut header = group_keys.clone();
    header.extend(
        ["coefficient", "n_runs", "mise", "log10_mise", "pointwise_coverage", "joint_coverage", "variance_proportion"]
            .map(String::from),
    );
    wtr.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = r.group.iter().map(|(_, v)| v.clone()).collect();
        rec.push(r.coefficient.clone());
        rec.push(r.n_runs.to_string());
        rec.push(format_float(r.mise));
        rec.push(format_float(r.log10_mise));
        rec.push(format_float(r.pointwise_coverage));
        rec.push(format_float(r.joint_coverage));
        rec.push(r.variance_proportion.map(format_float).unwrap_or_default());
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::Io {
        path: "<writer>".into(),
        source: e,
    })?;
    Ok(())
}

/// Truth curves keyed by coefficient name, as stored in a truth file.
#[derive(Clone, Debug, PartialEq)]
pub struct TruthTable {
    pub grid: Vec<f64>,
    pub columns: BTreeMap<String, Vec<f64>>,
}

impl TruthTable {
    pub fn new(grid: Vec<f64>) -> Self {
        Self {
            grid,
            columns: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if values.len() != self.grid.len() {
            return Err(Error::GridMismatch(format!(
                "truth column `{name}` has {} points, grid {}",
                values.len(),
                self.grid.len()
            )));
        }
        self.columns.insert(name.to_string(), values);
        Ok(())
    }

    /// Stacks the named columns into a `P × L` matrix.
    pub fn matrix(&self, names: &[String]) -> Result<DMatrix<f64>> {
        let cols: Vec<&Vec<f64>> = names
            .iter()
            .map(|n| {
                self.columns
                    .get(n)
                    .ok_or_else(|| Error::Schema(format!("truth file has no column `{n}`")))
            })
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(names.len(), self.grid.len(), |j, s| cols[j][s]))
    }

    /// CSV with column `s` followed by one column per curve.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["s".to_string()];
        header.extend(self.columns.keys().cloned());
        wtr.write_record(&header)?;
        for (i, s) in self.grid.iter().enumerate() {
            let mut rec = vec![format_float(*s)];
            rec.extend(self.columns.values().map(|c| format_float(c[i])));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        let s_col = headers
            .iter()
            .position(|h| h == "s")
            .ok_or_else(|| Error::Schema("truth file lacks column `s`".into()))?;
        let mut values: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for (k, v) in rec.iter().enumerate().take(headers.len()) {
                let x = v
                    .parse::<f64>()
                    .map_err(|_| Error::validation(format!("bad value in truth column `{}`", headers[k]), vec![row]))?;
                values[k].push(x);
            }
        }
        let mut table = Self::new(values[s_col].clone());
        for (k, h) in headers.iter().enumerate() {
            if k != s_col {
                table.insert(h, values[k].clone())?;
            }
        }
        Ok(table)
    }

    /// Fails unless `grid` matches this table's grid to 1e-9.
    pub fn check_grid(&self, grid: &[f64]) -> Result<()> {
        let same = grid.len() == self.grid.len()
            && grid.iter().zip(&self.grid).all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        if same {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "band grid has {} points, truth grid {}",
                grid.len(),
                self.grid.len()
            )))
        }
    }
}
