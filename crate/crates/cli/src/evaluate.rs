use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use clap::Args;
use nalgebra::DMatrix;
use svyfosr::evaluation::{aggregate_runs, write_summary_csv, EvalReport, SummaryRow, TruthTable};
use svyfosr::inference::{BandEstimate, BandTable};
use svyfosr::Error;

use crate::manifest::{create_dir, create_file, open_file, RunManifest};

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Output directory of a `fit` run; repeatable.
    #[arg(long = "run")]
    pub runs: Vec<PathBuf>,
    /// Truth file shared by every `--run`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// CSV listing runs: columns `run`, `truth` and any label columns.
    #[arg(long)]
    pub runs_file: Option<PathBuf>,
    /// Extra `key=value` label attached to every `--run`.
    #[arg(long = "label")]
    pub labels: Vec<String>,
    /// Label keys to group by (default: all labels).
    #[arg(long, value_delimiter = ',')]
    pub group_by: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

struct RunSpec {
    dir: PathBuf,
    truth: PathBuf,
    labels: BTreeMap<String, String>,
}

fn run_specs(args: &EvaluateArgs) -> Result<Vec<RunSpec>> {
    let mut extra = BTreeMap::new();
    for l in &args.labels {
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| Error::Parameter(format!("label `{l}` is not `key=value`")))?;
        extra.insert(k.trim().to_string(), v.trim().to_string());
    }
    let mut specs = Vec::new();
    if !args.runs.is_empty() {
        let truth = args
            .truth
            .clone()
            .ok_or_else(|| Error::Parameter("`--run` needs a `--truth` file".into()))?;
        for dir in &args.runs {
            specs.push(RunSpec {
                dir: dir.clone(),
                truth: truth.clone(),
                labels: extra.clone(),
            });
        }
    }
    if let Some(path) = &args.runs_file {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open_file(path)?);
        let headers: Vec<String> = rdr.headers().map_err(Error::from)?.iter().map(String::from).collect();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Schema(format!("runs file lacks column `{name}`")))
        };
        let (run_col, truth_col) = (col("run")?, col("truth")?);
        for rec in rdr.records() {
            let rec = rec.map_err(Error::from)?;
            let mut labels = extra.clone();
            for (k, h) in headers.iter().enumerate() {
                if k != run_col && k != truth_col {
                    labels.insert(h.clone(), rec.get(k).unwrap_or("").to_string());
                }
            }
            specs.push(RunSpec {
                dir: base.join(rec.get(run_col).unwrap_or("")),
                truth: base.join(rec.get(truth_col).unwrap_or("")),
                labels,
            });
        }
    }
    if specs.is_empty() {
        return Err(Error::Parameter("no runs given; use `--run` or `--runs-file`".into()).into());
    }
    Ok(specs)
}

fn bands_from_tables(names: Vec<String>, tables: &[BandTable]) -> BandEstimate {
    let l = tables[0].s.len();
    let m = |f: fn(&BandTable) -> &Vec<f64>| DMatrix::from_fn(tables.len(), l, |j, s| f(&tables[j])[s]);
    BandEstimate {
        coefficient_names: names,
        grid: tables[0].s.clone(),
        beta_hat: m(|t| &t.beta_hat),
        se: m(|t| &t.se),
        pointwise_lo: m(|t| &t.pw_lo),
        pointwise_hi: m(|t| &t.pw_hi),
        cma_lo: m(|t| &t.cma_lo),
        cma_hi: m(|t| &t.cma_hi),
        q: vec![f64::NAN; tables.len()],
        z: f64::NAN,
        alpha: f64::NAN,
        corr: None,
    }
}

fn evaluate_run(spec: &RunSpec) -> Result<EvalReport> {
    let manifest = RunManifest::read(&spec.dir)?;
    if manifest.coefficients.is_empty() {
        return Err(Error::Schema(format!("{} lists no coefficient files", spec.dir.display())).into());
    }
    let names: Vec<String> = manifest.coefficients.iter().map(|c| c.name.clone()).collect();
    let tables: Vec<BandTable> = manifest
        .coefficients
        .iter()
        .map(|c| BandTable::read_csv(open_file(&spec.dir.join(&c.file))?).map_err(anyhow::Error::from))
        .collect::<Result<_>>()?;
    let truth = TruthTable::read_csv(open_file(&spec.truth)?)?;
    for t in &tables {
        truth.check_grid(&t.s)?;
    }
    let beta_true = truth.matrix(&names)?;
    let bands = bands_from_tables(names, &tables);
    let mut labels = spec.labels.clone();
    if let Some(m) = manifest.config.get("boot_type") {
        labels.entry("method".into()).or_insert_with(|| m.clone());
    }
    Ok(EvalReport::new(labels, &bands, &beta_true, &truth.grid)?)
}

/// Methods as columns, pointwise coverage as values.
fn write_wide_table(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut methods: Vec<String> = Vec::new();
    let mut table: BTreeMap<(Vec<(String, String)>, String), BTreeMap<String, f64>> = BTreeMap::new();
    for r in rows {
        let method = r.group.iter().find(|(k, _)| k == "method").map(|(_, v)| v.clone()).unwrap_or_default();
        if !methods.contains(&method) {
            methods.push(method.clone());
        }
        let key: Vec<(String, String)> = r.group.iter().filter(|(k, _)| k != "method").cloned().collect();
        table.entry((key, r.coefficient.clone())).or_default().insert(method, r.pointwise_coverage);
    }
    let mut wtr = csv::Writer::from_writer(create_file(path)?);
    let setting_keys: Vec<String> = table
        .keys()
        .next()
        .map(|(k, _)| k.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();
    let mut header = setting_keys.clone();
    header.push("coefficient".into());
    header.extend(methods.iter().cloned());
    wtr.write_record(&header).map_err(Error::from)?;
    for ((key, coef), values) in &table {
        let mut rec: Vec<String> = key.iter().map(|(_, v)| v.clone()).collect();
        rec.push(coef.clone());
        rec.extend(methods.iter().map(|m| values.get(m).map(|v| v.to_string()).unwrap_or_default()));
        wtr.write_record(&rec).map_err(Error::from)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn run(args: EvaluateArgs) -> Result<()> {
    let started = Instant::now();
    let specs = run_specs(&args)?;
    let reports: Vec<EvalReport> = specs.iter().map(evaluate_run).collect::<Result<_>>()?;
    let keys: Vec<String> = if args.group_by.is_empty() {
        let mut all: Vec<String> = reports.iter().flat_map(|r| r.labels.keys().cloned()).collect();
        all.sort();
        all.dedup();
        all
    } else {
        args.group_by.clone()
    };
    let key_refs: Vec<&str> = keys.iter().map(String::as_str).collect();
    let rows = aggregate_runs(&reports, &key_refs)?;

    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("evaluate", 0);
    let per_run = args.out.join("per_run.csv");
    {
        let mut wtr = csv::Writer::from_writer(create_file(&per_run)?);
        let mut header = vec!["run".to_string()];
        header.extend(keys.iter().cloned());
        header.extend(["coefficient", "ise", "pointwise_coverage", "joint_coverage"].map(String::from));
        wtr.write_record(&header).map_err(Error::from)?;
        for (spec, rep) in specs.iter().zip(&reports) {
            for (j, name) in rep.coefficient_names.iter().enumerate() {
                let mut rec = vec![spec.dir.display().to_string()];
                rec.extend(keys.iter().map(|k| rep.labels.get(k).cloned().unwrap_or_default()));
                rec.push(name.clone());
                rec.push(rep.ise[j].to_string());
                rec.push(rep.pointwise_coverage[j].to_string());
                rec.push(u8::from(rep.joint_coverage[j]).to_string());
                wtr.write_record(&rec).map_err(Error::from)?;
            }
        }
        wtr.flush()?;
    }
    let summary = args.out.join("summary.csv");
    write_summary_csv(&rows, create_file(&summary)?)?;
    manifest.output(&per_run);
    manifest.output(&summary);
    if keys.iter().any(|k| k == "method") {
        let table = args.out.join("table.csv");
        write_wide_table(&rows, &table)?;
        manifest.output(&table);
    }
    manifest.set("runs", specs.len());
    manifest.set("group_by", keys.join(","));
    manifest.write(&args.out, started)?;
    Ok(())
}
