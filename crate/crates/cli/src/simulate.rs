use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use clap::Args;
use log::info;
use svyfosr::data::save_dataset;
use svyfosr::evaluation::TruthTable;
use svyfosr::simulation::{
    calibrate_variances, draw_two_stage_sample, generate_superpopulation, parse_key_values, Informativeness, ReMode,
    Superpopulation, SuperpopulationConfig,
};
use svyfosr::{Error, GlmFamily};

use crate::manifest::{create_dir, create_file, with_threads, RunManifest};

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Plain-text `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// One output directory per setting of the evaluation grid.
    #[arg(long)]
    pub batch: bool,
    #[arg(long)]
    pub parallel: Option<usize>,
    #[arg(long)]
    pub n_pop: Option<usize>,
    #[arg(long)]
    pub strata: Option<usize>,
    /// `min,max` PSUs per stratum.
    #[arg(long)]
    pub psu_range: Option<String>,
    #[arg(long)]
    pub dirichlet_strata: Option<f64>,
    #[arg(long)]
    pub dirichlet_psu: Option<f64>,
    #[arg(long)]
    pub family: Option<GlmFamily>,
    #[arg(long)]
    pub re_basis_dim: Option<usize>,
    #[arg(long)]
    pub sigma_s: Option<f64>,
    #[arg(long)]
    pub sigma_h: Option<f64>,
    #[arg(long)]
    pub sigma_eps: Option<f64>,
    /// none, noise-only or scaling-and-noise.
    #[arg(long)]
    pub re_mode: Option<String>,
    #[arg(long)]
    pub grid_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub memory_cap: Option<usize>,
    #[arg(long)]
    pub streaming: Option<bool>,
    #[arg(long)]
    pub snr_b: Option<f64>,
    #[arg(long)]
    pub snr_eps: Option<f64>,
    #[arg(long)]
    pub per_psu_n: Option<usize>,
    /// none, medium or high.
    #[arg(long)]
    pub informativeness: Option<String>,
    #[arg(long)]
    pub sample_seed: Option<u64>,
    /// Samples drawn from the superpopulation.
    #[arg(long)]
    pub reps: Option<usize>,
}

#[derive(Clone, Debug)]
struct Settings {
    cfg: SuperpopulationConfig,
    snr_b: Option<f64>,
    snr_eps: Option<f64>,
    per_psu_n: usize,
    informativeness: Informativeness,
    sample_seed: u64,
    reps: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            cfg: SuperpopulationConfig::default(),
            snr_b: None,
            snr_eps: None,
            per_psu_n: 100,
            informativeness: Informativeness::None,
            sample_seed: 1,
            reps: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Parameter(format!("invalid value `{value}` for configuration key `{key}`")).into())
}

impl Settings {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "snr-b" => self.snr_b = Some(parse(key, value)?),
            "snr-eps" => self.snr_eps = Some(parse(key, value)?),
            "per-psu-n" => self.per_psu_n = parse(key, value)?,
            "informativeness" => self.informativeness = value.parse()?,
            "sample-seed" => self.sample_seed = parse(key, value)?,
            "reps" => self.reps = parse(key, value)?,
            _ => self.cfg.set(key, value)?,
        }
        Ok(())
    }

    fn pairs(&self) -> Vec<(String, String)> {
        let mut out = self.cfg.to_pairs();
        if let Some(v) = self.snr_b {
            out.push(("snr-b".into(), v.to_string()));
        }
        if let Some(v) = self.snr_eps {
            out.push(("snr-eps".into(), v.to_string()));
        }
        out.push(("per-psu-n".into(), self.per_psu_n.to_string()));
        out.push(("informativeness".into(), self.informativeness.to_string()));
        out.push(("sample-seed".into(), self.sample_seed.to_string()));
        out.push(("reps".into(), self.reps.to_string()));
        out
    }
}

fn overrides(args: &SimulateArgs) -> Vec<(&'static str, String)> {
    let mut out = Vec::new();
    macro_rules! push {
        ($key:literal, $field:expr) => {
            if let Some(v) = &$field {
                out.push(($key, v.to_string()));
            }
        };
    }
    push!("n-pop", args.n_pop);
    push!("strata", args.strata);
    push!("psu-range", args.psu_range);
    push!("dirichlet-strata", args.dirichlet_strata);
    push!("dirichlet-psu", args.dirichlet_psu);
    push!("family", args.family);
    push!("re-basis-dim", args.re_basis_dim);
    push!("sigma-s", args.sigma_s);
    push!("sigma-h", args.sigma_h);
    push!("sigma-eps", args.sigma_eps);
    push!("re-mode", args.re_mode);
    push!("grid-len", args.grid_len);
    push!("seed", args.seed);
    push!("memory-cap", args.memory_cap);
    push!("streaming", args.streaming);
    push!("snr-b", args.snr_b);
    push!("snr-eps", args.snr_eps);
    push!("per-psu-n", args.per_psu_n);
    push!("informativeness", args.informativeness);
    push!("sample-seed", args.sample_seed);
    push!("reps", args.reps);
    out
}

fn resolve(args: &SimulateArgs) -> Result<Settings> {
    let mut settings = Settings::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        for (k, v) in parse_key_values(&text)? {
            settings.set(&k, &v)?;
        }
    }
    for (k, v) in overrides(args) {
        settings.set(k, &v)?;
    }
    if settings.reps == 0 {
        return Err(Error::Parameter("reps must be positive".into()).into());
    }
    Ok(settings)
}

/// The evaluation grid: informativeness × random-effect mode × SNR_b,
/// and SNR_ε for Gaussian outcomes.
fn batch_settings(base: &Settings) -> Vec<(String, Settings)> {
    let snrs = [0.5, 1.0, 5.0];
    let eps: Vec<Option<f64>> = if base.cfg.family == GlmFamily::Gaussian {
        snrs.iter().map(|v| Some(*v)).collect()
    } else {
        vec![None]
    };
    let mut out = Vec::new();
    for inf in Informativeness::ALL {
        for mode in [ReMode::None, ReMode::NoiseOnly, ReMode::ScalingAndNoise] {
            for &snr_b in &snrs {
                for &snr_eps in &eps {
                    let mut s = base.clone();
                    s.informativeness = inf;
                    s.cfg.re_mode = mode;
                    s.snr_b = Some(snr_b);
                    s.snr_eps = snr_eps.or(base.snr_eps);
                    let mut name = format!("inf-{inf}_re-{mode}_snrb-{snr_b}");
                    if let Some(e) = snr_eps {
                        name.push_str(&format!("_snreps-{e}"));
                    }
                    out.push((name, s));
                }
            }
        }
    }
    out
}

pub fn run(args: SimulateArgs) -> Result<()> {
    let started = Instant::now();
    let settings = resolve(&args)?;
    create_dir(&args.out)?;
    if args.batch {
        for (name, s) in batch_settings(&settings) {
            info!("simulating setting {name}");
            run_setting(s, &args.out.join(&name), args.parallel, started)?;
        }
        Ok(())
    } else {
        run_setting(settings, &args.out, args.parallel, started)
    }
}

fn run_setting(mut s: Settings, dir: &Path, threads: Option<usize>, started: Instant) -> Result<()> {
    create_dir(dir)?;
    if s.snr_b.is_some() || s.snr_eps.is_some() {
        let (sigma_h, sigma_eps) = calibrate_variances(&s.cfg, s.snr_b.unwrap_or(f64::INFINITY), s.snr_eps.unwrap_or(f64::INFINITY))?;
        if s.snr_b.is_some() {
            s.cfg.sigma_h = sigma_h;
        }
        if s.snr_eps.is_some() {
            s.cfg.sigma_eps = sigma_eps;
        }
    }
    let mut manifest = RunManifest::new("simulate", s.cfg.seed);
    let pop: Superpopulation = with_threads(threads, || generate_superpopulation(&s.cfg))??;

    let mut truth = TruthTable::new(pop.grid().to_vec());
    truth.insert(svyfosr::data::INTERCEPT, pop.reference().row(0).iter().cloned().collect())?;
    truth.insert("x", pop.reference().row(1).iter().cloned().collect())?;
    truth.insert("beta0", pop.truth().beta0.clone())?;
    truth.insert("beta1", pop.truth().beta1.clone())?;
    let truth_path = dir.join("truth.csv");
    truth.write_csv(create_file(&truth_path)?)?;
    manifest.output(&truth_path);

    for r in 0..s.reps {
        let seed = s.sample_seed.wrapping_add(r as u64);
        let draw = with_threads(threads, || draw_two_stage_sample(&pop, s.per_psu_n, s.informativeness, seed))??;
        let data_path = dir.join(format!("sample_{:03}.csv", r + 1));
        save_dataset(&draw.dataset, &data_path)?;
        let prob_path = dir.join(format!("probabilities_{:03}.csv", r + 1));
        draw.probabilities.write_csv(&draw.dataset, create_file(&prob_path)?)?;
        manifest.output(&data_path);
        manifest.output(&prob_path);
    }

    let pairs = s.pairs();
    let config_path = dir.join("config.txt");
    let text: String = pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    fs::write(&config_path, text).map_err(|e| Error::Io {
        path: config_path.display().to_string(),
        source: e,
    })?;
    manifest.output(&config_path);
    for (k, v) in pairs {
        manifest.set(&k, v);
    }
    manifest.set("n_strata", pop.n_strata());
    manifest.set("n_psus", pop.n_psus());
    manifest.set("streaming", pop.is_streaming());
    manifest.write(dir, started)?;
    Ok(())
}
