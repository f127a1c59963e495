use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use clap::Args;
use svyfosr::data::{load_dataset, save_dataset, ColumnMap};
use svyfosr::evaluation::TruthTable;
use svyfosr::glm::{fit_pointwise, IrlsOptions};
use svyfosr::simulation::{empirical_subsample, SubsampleScheme};
use svyfosr::GlmFamily;

use crate::manifest::{create_dir, create_file, RunManifest};

#[derive(Args, Debug)]
pub struct SubsampleArgs {
    /// Population CSV carrying base weights.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    #[arg(long)]
    pub no_intercept: bool,
    #[arg(long, default_value = "y_")]
    pub outcome_prefix: String,
    #[arg(long, default_value = "weight")]
    pub weight: String,
    #[arg(long, default_value = "stratum")]
    pub stratum: String,
    #[arg(long, default_value = "psu")]
    pub psu: String,
    /// uniform, weight, outcome or mixed.
    #[arg(long)]
    pub scheme: SubsampleScheme,
    /// Expected subsample size.
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Family of the population reference fit written to the truth file.
    #[arg(long, default_value = "gaussian")]
    pub family: GlmFamily,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: SubsampleArgs) -> Result<()> {
    let started = Instant::now();
    let columns = ColumnMap {
        outcome_prefix: args.outcome_prefix.clone(),
        covariates: args.covariates.clone(),
        weight: args.weight.clone(),
        stratum: args.stratum.clone(),
        psu: args.psu.clone(),
        intercept: !args.no_intercept,
    };
    let pop = load_dataset(&args.data, &columns, None)?;
    let draw = empirical_subsample(&pop, args.scheme, args.n, args.seed)?;
    let reference = fit_pointwise(&pop, &vec![1.0; pop.n()], args.family, IrlsOptions::default())?;

    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("subsample", args.seed);
    let data_path = args.out.join("subsample.csv");
    save_dataset(&draw.dataset, &data_path)?;
    let prob_path = args.out.join("probabilities.csv");
    draw.probabilities.write_csv(&draw.dataset, create_file(&prob_path)?)?;
    let mut truth = TruthTable::new(pop.grid_labels().to_vec());
    for (j, name) in pop.covariate_names().iter().enumerate() {
        truth.insert(name, reference.beta.row(j).iter().cloned().collect())?;
    }
    let truth_path = args.out.join("truth.csv");
    truth.write_csv(create_file(&truth_path)?)?;
    for p in [&data_path, &prob_path, &truth_path] {
        manifest.output(p);
    }
    manifest.set("data", args.data.display());
    manifest.set("scheme", args.scheme);
    manifest.set("n", args.n);
    manifest.set("drawn", draw.dataset.n());
    manifest.set("family", args.family);
    manifest.set("covariates", pop.covariate_names().join(","));
    manifest.write(&args.out, started)?;
    Ok(())
}
