//! Replicate generation: unweighted and survey-weighted bootstraps of
//! individuals, balanced repeated replication (BRR) half-samples, and
//! Rao-Wu-Yue-Beaumont (RWYB) bootstrap weights.
//!
//! Each replicate draws from its own keyed random stream, so a replicate
//! set depends only on the seed, never on the number of worker threads.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{format_float, DesignSummary, FunctionalDesignDataset};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BootScheme {
    Unweighted,
    Weighted,
    Brr,
    Rwyb,
}

impl BootScheme {
    pub const ALL: [BootScheme; 4] = [
        BootScheme::Unweighted,
        BootScheme::Weighted,
        BootScheme::Brr,
        BootScheme::Rwyb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BootScheme::Unweighted => "unweighted",
            BootScheme::Weighted => "weighted",
            BootScheme::Brr => "brr",
            BootScheme::Rwyb => "rwyb",
        }
    }

    /// Whether the point estimate uses the survey weights.
    pub fn uses_survey_weights(self) -> bool {
        self != BootScheme::Unweighted
    }
}

impl fmt::Display for BootScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BootScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unweighted" | "standard" => Ok(BootScheme::Unweighted),
            "weighted" | "survey" => Ok(BootScheme::Weighted),
            "brr" => Ok(BootScheme::Brr),
            "rwyb" => Ok(BootScheme::Rwyb),
            other => Err(Error::Parameter(format!("unknown bootstrap type `{other}`"))),
        }
    }
}

/// One replicate: a resample of row indices, or a full weight vector.
#[derive(Clone, Debug, PartialEq)]
pub enum Replicate {
    Indices(Vec<usize>),
    Weights(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplicateWeightSet {
    pub scheme: BootScheme,
    pub replicates: Vec<Replicate>,
    pub seed: u64,
}

impl ReplicateWeightSet {
    pub fn len(&self) -> usize {
        self.replicates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replicates.is_empty()
    }

    /// Weights for refitting replicate `b`. Index resamples become
    /// multiplicity counts multiplied into `base_weights`; the unweighted
    /// bootstrap uses unit base weights.
    pub fn fit_weights(&self, b: usize, base_weights: &[f64]) -> Vec<f64> {
        match &self.replicates[b] {
            Replicate::Weights(w) => w.clone(),
            Replicate::Indices(idx) => {
                let mut counts = vec![0.0; base_weights.len()];
                for &i in idx {
                    counts[i] += 1.0;
                }
                if self.scheme == BootScheme::Unweighted {
                    counts
                } else {
                    counts.iter().zip(base_weights).map(|(c, w)| c * w).collect()
                }
            }
        }
    }
}

fn generate<F>(b: usize, seed: u64, f: F) -> Vec<Replicate>
where
    F: Fn(&mut ChaCha8Rng) -> Replicate + Sync,
{
    (0..b)
        .into_par_iter()
        .map(|r| f(&mut stream_rng(seed, r as u64)))
        .collect()
}

/// `B` uniform with-replacement resamples of `0..n`.
pub fn resample_unweighted(n: usize, b: usize, seed: u64) -> ReplicateWeightSet {
    let replicates = generate(b, seed, |rng| Replicate::Indices((0..n).map(|_| rng.gen_range(0..n)).collect()));
    ReplicateWeightSet {
        scheme: BootScheme::Unweighted,
        replicates,
        seed,
    }
}

/// `B` with-replacement resamples of size `n` drawn with probability
/// proportional to the survey weights.
pub fn resample_survey_weighted(weights: &[f64], b: usize, seed: u64) -> Result<ReplicateWeightSet> {
    let dist = WeightedIndex::new(weights)
        .map_err(|e| Error::Parameter(format!("invalid bootstrap weights: {e}")))?;
    let n = weights.len();
    let replicates = generate(b, seed, |rng| Replicate::Indices((0..n).map(|_| dist.sample(rng)).collect()));
    Ok(ReplicateWeightSet {
        scheme: BootScheme::Weighted,
        replicates,
        seed,
    })
}

/// Balanced repeated replication with random half-samples: in every
/// stratum half of the PSUs are kept with doubled weights, the rest get 0.
pub fn resample_brr(
    design: &DesignSummary,
    base_weights: &[f64],
    b: usize,
    seed: u64,
) -> Result<ReplicateWeightSet> {
    for (h, &count) in design.psu_counts.iter().enumerate() {
        if count % 2 != 0 || count == 0 {
            return Err(Error::Design(format!(
                "BRR needs an even number of PSUs per stratum; stratum `{}` has {count}",
                design.stratum_labels.get(h).map(String::as_str).unwrap_or("?")
            )));
        }
    }
    check_len(base_weights, design.n_individuals)?;
    let replicates = generate(b, seed, |rng| {
        let mut w = vec![0.0; base_weights.len()];
        for psus in &design.stratum_psus {
            let mut chosen = psus.clone();
            chosen.shuffle(rng);
            for &c in &chosen[..chosen.len() / 2] {
                for &i in &design.psu_members[c] {
                    w[i] = 2.0 * base_weights[i];
                }
            }
        }
        Replicate::Weights(w)
    });
    Ok(ReplicateWeightSet {
        scheme: BootScheme::Brr,
        replicates,
        seed,
    })
}

fn check_len(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(Error::Parameter(format!("{} base weights for {n} individuals", w.len())));
    }
    Ok(())
}

/// Selection probabilities of a two-stage sample.
#[derive(Clone, Debug, PartialEq)]
pub struct StageProbabilities {
    /// `π_{1c}` per global PSU.
    pub pi1: Vec<f64>,
    /// `π_{2ci}` per individual.
    pub pi2: Vec<f64>,
    /// Set for single-stage samples, where no PSU-stage probability exists.
    pub single_stage: bool,
}

impl StageProbabilities {
    /// Builds from per-row probabilities, checking that `π_1` is constant
    /// within each PSU.
    pub fn from_rows(ds: &FunctionalDesignDataset, pi1_rows: &[f64], pi2: Vec<f64>) -> Result<Self> {
        if pi1_rows.len() != ds.n() || pi2.len() != ds.n() {
            return Err(Error::Schema(format!(
                "{} / {} probability rows for {} individuals",
                pi1_rows.len(),
                pi2.len(),
                ds.n()
            )));
        }
        let mut pi1 = vec![f64::NAN; ds.n_psus()];
        let mut bad = Vec::new();
        for (i, (&c, &p)) in ds.psus().iter().zip(pi1_rows).enumerate() {
            if pi1[c].is_nan() {
                pi1[c] = p;
            } else if pi1[c] != p {
                bad.push(i);
            }
        }
        if !bad.is_empty() {
            return Err(Error::validation("first-stage probability varies within a PSU", bad));
        }
        let probs = Self {
            pi1,
            pi2,
            single_stage: false,
        };
        probs.validate()?;
        Ok(probs)
    }

    pub fn validate(&self) -> Result<()> {
        let bad1: Vec<usize> = self.pi1.iter().enumerate().filter(|(_, p)| !(**p > 0.0 && **p <= 1.0)).map(|(i, _)| i).collect();
        if !bad1.is_empty() {
            return Err(Error::Probability(format!(
                "first-stage probabilities must lie in (0, 1]; offending PSUs {bad1:?}"
            )));
        }
        let bad2: Vec<usize> = self.pi2.iter().enumerate().filter(|(_, p)| !(**p > 0.0 && **p <= 1.0)).map(|(i, _)| i).collect();
        if !bad2.is_empty() {
            return Err(Error::Probability(format!(
                "second-stage probabilities must lie in (0, 1]; offending rows {bad2:?}"
            )));
        }
        Ok(())
    }

    /// Per-row CSV with columns `pi1,pi2`; `pi1` is left empty for
    /// single-stage samples.
    pub fn write_csv<W: Write>(&self, ds: &FunctionalDesignDataset, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["pi1", "pi2"])?;
        for (i, &c) in ds.psus().iter().enumerate() {
            let pi1 = if self.single_stage { String::new() } else { format_float(self.pi1[c]) };
            wtr.write_record([pi1, format_float(self.pi2[i])])?;
        }
        wtr.flush().map_err(|e| Error::Io {
            path: "<writer>".into(),
            source: e,
        })?;
        Ok(())
    }

    pub fn read_csv<R: Read>(ds: &FunctionalDesignDataset, reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Schema(format!("probability file lacks column `{name}`")))
        };
        let (c1, c2) = (col("pi1")?, col("pi2")?);
        let mut pi1: Vec<Option<f64>> = Vec::new();
        let mut pi2 = Vec::new();
        let mut bad = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let first = match rec.get(c1).unwrap_or("") {
                "" => Some(None),
                v => v.parse::<f64>().ok().map(Some),
            };
            match (first, rec.get(c2).and_then(|v| v.parse::<f64>().ok())) {
                (Some(a), Some(b)) => {
                    pi1.push(a);
                    pi2.push(b);
                }
                _ => bad.push(row),
            }
        }
        if !bad.is_empty() {
            return Err(Error::validation("unparseable probabilities", bad));
        }
        if pi1.iter().all(Option::is_none) {
            if pi2.len() != ds.n() {
                return Err(Error::Schema(format!("{} probability rows for {} individuals", pi2.len(), ds.n())));
            }
            let probs = Self {
                pi1: vec![1.0; ds.n_psus()],
                pi2,
                single_stage: true,
            };
            probs.validate()?;
            return Ok(probs);
        }
        let missing: Vec<usize> = pi1.iter().enumerate().filter(|(_, v)| v.is_none()).map(|(i, _)| i).collect();
        if !missing.is_empty() {
            return Err(Error::validation("pi1 is empty on some rows but not all", missing));
        }
        let pi1: Vec<f64> = pi1.into_iter().flatten().collect();
        Self::from_rows(ds, &pi1, pi2)
    }
}

/// Stage adjustments drawn for one RWYB replicate.
#[derive(Clone, Debug)]
pub struct RwybDraw {
    /// `m*_{1c}` per global PSU.
    pub psu_draws: Vec<usize>,
    /// Uncalibrated `a_{1c}` per global PSU.
    pub a1: Vec<f64>,
    /// Calibrated `a^cal_{1c}` per global PSU.
    pub a1_cal: Vec<f64>,
    /// Gamma draws `ã_{2ci}` per individual.
    pub a2_tilde: Vec<f64>,
    /// `a_{2ci}` per individual.
    pub a2: Vec<f64>,
}

/// Validated RWYB inputs for one design.
#[derive(Clone, Debug)]
pub struct RwybPlan<'a> {
    design: &'a DesignSummary,
    probs: &'a StageProbabilities,
    m1: Vec<usize>,
}

impl<'a> RwybPlan<'a> {
    /// `m1 = None` uses `n_1 - 1` in every stratum.
    pub fn new(design: &'a DesignSummary, probs: &'a StageProbabilities, m1: Option<usize>) -> Result<Self> {
        if probs.single_stage {
            return Err(Error::Probability(
                "RWYB needs selection probabilities for both sampling stages".into(),
            ));
        }
        if probs.pi1.len() != design.n_psus() || probs.pi2.len() != design.n_individuals {
            return Err(Error::Probability(format!(
                "probabilities cover {} PSUs / {} individuals, design has {} / {}",
                probs.pi1.len(),
                probs.pi2.len(),
                design.n_psus(),
                design.n_individuals
            )));
        }
        probs.validate()?;
        let mut m1s = Vec::with_capacity(design.n_strata);
        for (h, &n1) in design.psu_counts.iter().enumerate() {
            let label = design.stratum_labels.get(h).map(String::as_str).unwrap_or("?");
            if n1 < 2 {
                return Err(Error::Design(format!(
                    "RWYB needs at least 2 PSUs per stratum; stratum `{label}` has {n1}"
                )));
            }
            let m = m1.unwrap_or(n1 - 1);
            if m == 0 || m > n1 - 1 {
                return Err(Error::Parameter(format!(
                    "m1 = {m} outside 1..={} for stratum `{label}`",
                    n1 - 1
                )));
            }
            m1s.push(m);
        }
        Ok(Self {
            design,
            probs,
            m1: m1s,
        })
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> RwybDraw {
        let design = self.design;
        let pi1 = &self.probs.pi1;
        let n_psus = design.n_psus();
        let mut psu_draws = vec![0usize; n_psus];
        let mut a1 = vec![1.0; n_psus];
        let mut a1_cal = vec![1.0; n_psus];
        for (h, psus) in design.stratum_psus.iter().enumerate() {
            let n1 = psus.len();
            let m1 = self.m1[h];
            for _ in 0..m1 {
                psu_draws[psus[rng.gen_range(0..n1)]] += 1;
            }
            for &c in psus {
                a1[c] = first_stage_adjustment(n1, m1, pi1[c], psu_draws[c]);
            }
            // certainty PSUs keep adjustment 1; the rest share n_1 minus their count
            let random: Vec<usize> = psus.iter().cloned().filter(|&c| pi1[c] < 1.0).collect();
            let target = random.len() as f64;
            let total: f64 = random.iter().map(|&c| a1[c]).sum();
            for &c in psus {
                a1_cal[c] = if pi1[c] < 1.0 { a1[c] * target / total } else { 1.0 };
            }
        }
        let n = design.n_individuals;
        let mut a2_tilde = vec![1.0; n];
        let mut a2 = vec![1.0; n];
        for (c, members) in design.psu_members.iter().enumerate() {
            let root = (pi1[c] / (2.0 - pi1[c])).sqrt();
            for &i in members {
                let p2 = self.probs.pi2[i];
                let t = if p2 < 1.0 {
                    let q = 1.0 - p2;
                    Gamma::new(1.0 / q, q).expect("valid gamma parameters").sample(rng)
                } else {
                    1.0
                };
                a2_tilde[i] = t;
                a2[i] = 1.0 - root + root * t;
            }
        }
        RwybDraw {
            psu_draws,
            a1,
            a1_cal,
            a2_tilde,
            a2,
        }
    }
}

/// `a_{1c} = 1 - r + r (n_1/m_1) m*` with `r = sqrt(m_1 (1 - π_{1c}) / (n_1 - 1))`.
pub fn first_stage_adjustment(n1: usize, m1: usize, pi1: f64, draws: usize) -> f64 {
    let r = (m1 as f64 * (1.0 - pi1) / (n1 as f64 - 1.0)).sqrt();
    1.0 - r + r * (n1 as f64 / m1 as f64) * draws as f64
}

/// RWYB bootstrap weights `w*_i = w_i · a^cal_{1,c(i)} · a_{2,i}`.
pub fn make_rwyb_weights(
    design: &DesignSummary,
    base_weights: &[f64],
    probs: &StageProbabilities,
    m1: Option<usize>,
    b: usize,
    seed: u64,
) -> Result<ReplicateWeightSet> {
    check_len(base_weights, design.n_individuals)?;
    let plan = RwybPlan::new(design, probs, m1)?;
    let psu_of: Vec<usize> = {
        let mut v = vec![0; design.n_individuals];
        for (c, members) in design.psu_members.iter().enumerate() {
            for &i in members {
                v[i] = c;
            }
        }
        v
    };
    let replicates = generate(b, seed, |rng| {
        let d = plan.draw(rng);
        Replicate::Weights(
            base_weights
                .iter()
                .enumerate()
                .map(|(i, w)| w * d.a1_cal[psu_of[i]] * d.a2[i])
                .collect(),
        )
    });
    Ok(ReplicateWeightSet {
        scheme: BootScheme::Rwyb,
        replicates,
        seed,
    })
}

/// Inputs for [`replicate_set`].
#[derive(Clone, Copy, Debug)]
pub struct ReplicateRequest<'a> {
    pub scheme: BootScheme,
    pub n_replicates: usize,
    pub seed: u64,
    pub probabilities: Option<&'a StageProbabilities>,
    pub m1: Option<usize>,
}

/// Generates the replicate set for `ds` under the requested scheme.
pub fn replicate_set(ds: &FunctionalDesignDataset, design: &DesignSummary, req: ReplicateRequest<'_>) -> Result<ReplicateWeightSet> {
    match req.scheme {
        BootScheme::Unweighted => Ok(resample_unweighted(ds.n(), req.n_replicates, req.seed)),
        BootScheme::Weighted => resample_survey_weighted(ds.weights(), req.n_replicates, req.seed),
        BootScheme::Brr => resample_brr(design, ds.weights(), req.n_replicates, req.seed),
        BootScheme::Rwyb => {
            let probs = req.probabilities.ok_or_else(|| {
                Error::Probability(
                    "RWYB requires selection probabilities at each sampling stage; supply a stage-probability file".into(),
                )
            })?;
            make_rwyb_weights(design, ds.weights(), probs, req.m1, req.n_replicates, req.seed)
        }
    }
}

/// Writes the replicate fit weights as `n` rows × `B` columns.
pub fn write_replicate_weights<W: Write>(set: &ReplicateWeightSet, base_weights: &[f64], writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let width = set.len().to_string().len().max(3);
    let header: Vec<String> = (1..=set.len()).map(|b| format!("rep_{b:0width$}")).collect();
    wtr.write_record(&header)?;
    let cols: Vec<Vec<f64>> = (0..set.len()).map(|b| set.fit_weights(b, base_weights)).collect();
    for i in 0..base_weights.len() {
        wtr.write_record(cols.iter().map(|c| format_float(c[i])))?;
    }
    wtr.flush().map_err(|e| Error::Io {
        path: "<writer>".into(),
        source: e,
    })?;
    Ok(())
}
