use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use clap::Args;
use svyfosr::data::{load_dataset, ColumnMap};
use svyfosr::inference::{fit_svy_fosr, write_band_csv, FitOptions, PointwiseMultiplier};
use svyfosr::resampling::{BootScheme, StageProbabilities};
use svyfosr::smoothing::{Lambda, SmootherSpec};
use svyfosr::GlmFamily;

use crate::manifest::{create_dir, create_file, file_stem, open_file, CoefficientEntry, RunManifest};

#[derive(Args, Debug)]
pub struct FitArgs {
    /// Dataset CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Covariate columns, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub covariates: Vec<String>,
    /// Leave the intercept out of the design.
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
    #[arg(long, default_value = "gaussian")]
    pub family: GlmFamily,
    /// unweighted, weighted, brr or rwyb.
    #[arg(long, default_value = "weighted")]
    pub boot_type: BootScheme,
    #[arg(long, default_value_t = 100)]
    pub num_boots: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads for replicate fits.
    #[arg(long)]
    pub parallel: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Per-row stage probabilities (columns pi1, pi2); required for rwyb.
    #[arg(long)]
    pub probabilities: Option<PathBuf>,
    /// RWYB first-stage draws per stratum (default n1 - 1).
    #[arg(long)]
    pub m1: Option<usize>,
    /// Spline basis dimension (default min(L, 100)).
    #[arg(long)]
    pub basis_dim: Option<usize>,
    /// Fixed smoothing parameter instead of GCV.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    pub mc_samples: usize,
    /// Pointwise band as ±2 SE instead of ±z SE.
    #[arg(long)]
    pub two_sd: bool,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: FitArgs) -> Result<()> {
    let started = Instant::now();
    let columns = ColumnMap {
        outcome_prefix: args.outcome_prefix.clone(),
        covariates: args.covariates.clone(),
        weight: args.weight.clone(),
        stratum: args.stratum.clone(),
        psu: args.psu.clone(),
        intercept: !args.no_intercept,
    };
    let ds = load_dataset(&args.data, &columns, None)?;
    let probabilities = match &args.probabilities {
        Some(p) => Some(StageProbabilities::read_csv(&ds, open_file(p)?)?),
        None => None,
    };
    let opts = FitOptions {
        family: args.family,
        scheme: args.boot_type,
        n_replicates: args.num_boots,
        smoother: SmootherSpec {
            basis_dim: args.basis_dim,
            lambda: args.lambda.map_or(Lambda::Auto, Lambda::Fixed),
            ..SmootherSpec::default()
        },
        alpha: args.alpha,
        seed: args.seed,
        mc_samples: args.mc_samples,
        pointwise: if args.two_sd { PointwiseMultiplier::TwoSd } else { PointwiseMultiplier::Normal },
        m1: args.m1,
        threads: args.parallel,
        ..FitOptions::default()
    };
    let fit = fit_svy_fosr(&ds, &opts, probabilities.as_ref())?;

    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("fit", args.seed);
    manifest.set("data", args.data.display());
    manifest.set("covariates", ds.covariate_names().join(","));
    manifest.set("family", args.family);
    manifest.set("boot_type", args.boot_type);
    manifest.set("num_boots", args.num_boots);
    manifest.set("alpha", args.alpha);
    manifest.set("pointwise", if args.two_sd { "two-sd" } else { "normal" });
    manifest.set("basis_dim", fit.smoothed.basis.basis_dim());
    manifest.set("mc_samples", args.mc_samples);
    manifest.set("n", ds.n());
    manifest.set("grid_len", ds.n_grid());
    if let Some(p) = &args.probabilities {
        manifest.set("probabilities", p.display());
    }
    if let Some(m1) = args.m1 {
        manifest.set("m1", m1);
    }
    for (j, name) in ds.covariate_names().iter().enumerate() {
        let file = format!("coef_{}.csv", file_stem(name));
        let path = args.out.join(&file);
        write_band_csv(&fit.bands, j, create_file(&path)?)?;
        manifest.output(&path);
        manifest.coefficients.push(CoefficientEntry {
            name: name.clone(),
            file,
            lambda: fit.smoothed.lambdas[j],
            q95: fit.bands.q[j],
        });
    }
    manifest.replicate_failures = fit.n_failed;
    manifest.write(&args.out, started)?;
    Ok(())
}
