//! Monte Carlo study of the unadjusted and IPW estimators on simulated
//! three-treatment networks.
//!
//! Four designs are generated: A vs C, B vs C, A vs B and the three-arm
//! A/B/C, with C the reference. Every study draws its own true log odds
//! ratios, a control event rate, a sample size and binomial event counts;
//! publication is then decided by a selection model applied to the
//! study's t-statistic.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Binomial, Distribution, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Comparison, ComparisonOutcome, DesignType, Direction, NetworkDataset, StudyRecord, TreatmentId};
use crate::error::{Error, Result};
use crate::ipw::{bootstrap_streams, fit_ipw_with_reference};
use crate::model::{fit_weighted, TauMode};
use crate::rng::substream;
use crate::selection::{publish_probability, SelectionParams, SelectionSpec};

/// Largest tolerated share of failed replicates per estimator.
pub const MAX_REPLICATE_FAILURES: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeRegime {
    /// 5 to 10 studies per design, drawn uniformly per replicate.
    Small,
    /// 10 studies per design.
    Moderate,
    /// 20 studies per design.
    Large,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueSelection {
    /// Selection model token, e.g. `logitK1`.
    pub model: String,
    pub beta: Vec<f64>,
}

fn default_mu_ac() -> f64 {
    0.5
}
fn default_mu_bc() -> f64 {
    0.3
}
fn default_control_rate() -> (f64, f64) {
    (0.2, 0.9)
}
fn default_log_n() -> (f64, f64) {
    (5.0, 1.0)
}
fn default_min_total() -> u32 {
    20
}
fn default_estimators() -> Vec<String> {
    vec!["mre".into()]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    pub replications: usize,
    #[serde(default = "default_mu_ac")]
    pub mu_ac: f64,
    #[serde(default = "default_mu_bc")]
    pub mu_bc: f64,
    /// One value shared by all designs, or one per design.
    pub tau: Vec<f64>,
    pub size: SizeRegime,
    /// Publication model; absent means every study is published.
    #[serde(default)]
    pub selection: Option<TrueSelection>,
    /// Benefit direction used for t* in selection and in the IPW analyses.
    #[serde(default)]
    pub direction: Direction,
    /// Heterogeneity structure of the analysis model.
    #[serde(default)]
    pub tau_mode: TauMode,
    /// `mre` and/or selection model tokens.
    #[serde(default = "default_estimators")]
    pub estimators: Vec<String>,
    /// Bootstrap replicates for IPW intervals; 0 skips the bootstrap.
    #[serde(default)]
    pub bootstrap: usize,
    /// IPW estimators that get bootstrap intervals; all of them if absent.
    #[serde(default)]
    pub bootstrap_estimators: Option<Vec<String>>,
    #[serde(default = "default_control_rate")]
    pub control_rate: (f64, f64),
    /// Mean and SD of log total sample size per comparison.
    #[serde(default = "default_log_n")]
    pub log_n: (f64, f64),
    #[serde(default = "default_min_total")]
    pub min_total: u32,
}

impl SimConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.replications == 0 {
            return bad("replications must be at least 1");
        }
        if !(self.tau.len() == 1 || self.tau.len() == N_DESIGNS) || self.tau.iter().any(|t| !(*t >= 0.0)) {
            return bad("tau needs one or four non-negative values");
        }
        let (lo, hi) = self.control_rate;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return bad("control_rate must satisfy 0 < low <= high < 1");
        }
        if !(self.log_n.1 >= 0.0) || self.min_total < 2 {
            return bad("sample size law is invalid");
        }
        if self.bootstrap == 1 {
            return bad("bootstrap needs 0 or at least 2 replicates");
        }
        if let Some(sel) = &self.selection {
            let spec = SelectionSpec::from_str(&sel.model)?;
            if sel.beta.len() != spec.n_params(N_DESIGNS) {
                return Err(Error::Config(format!(
                    "selection model {} needs {} coefficients",
                    sel.model,
                    spec.n_params(N_DESIGNS)
                )));
            }
        }
        self.parsed_estimators()?;
        Ok(())
    }

    fn tau_for(&self, design: usize) -> f64 {
        if self.tau.len() == 1 {
            self.tau[0]
        } else {
            self.tau[design - 1]
        }
    }

    pub fn parsed_estimators(&self) -> Result<Vec<Estimator>> {
        if self.estimators.is_empty() {
            return Err(Error::Config("at least one estimator is required".into()));
        }
        self.estimators.iter().map(|s| s.parse()).collect()
    }

    fn boots(&self, est: &Estimator) -> bool {
        match est {
            Estimator::Mre => false,
            Estimator::Ipw(spec) => {
                self.bootstrap >= 2
                    && self
                        .bootstrap_estimators
                        .as_ref()
                        .is_none_or(|list| list.iter().any(|s| s == spec.token()))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Estimator {
    Mre,
    Ipw(SelectionSpec),
}

impl Estimator {
    pub fn label(&self) -> String {
        match self {
            Estimator::Mre => "mre".into(),
            Estimator::Ipw(spec) => format!("ipw-{}", spec.token()),
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "mre" {
            Ok(Estimator::Mre)
        } else {
            Ok(Estimator::Ipw(s.parse()?))
        }
    }
}

pub const N_DESIGNS: usize = 4;

fn tid(s: &str) -> TreatmentId {
    TreatmentId::new(s).expect("non-empty label")
}

/// The four simulated designs in index order.
pub fn simulation_designs() -> Vec<DesignType> {
    let (a, b, c) = (tid("A"), tid("B"), tid("C"));
    vec![
        DesignType::new(1, vec![Comparison::new(a.clone(), c.clone())]),
        DesignType::new(2, vec![Comparison::new(b.clone(), c.clone())]),
        DesignType::new(3, vec![Comparison::new(a.clone(), b.clone())]),
        DesignType::new(4, vec![Comparison::new(a, c.clone()), Comparison::new(b, c)]),
    ]
    .into_iter()
    .collect::<Result<_>>()
    .expect("designs are well formed")
}

/// Event rate of a treatment whose log odds ratio against a control with
/// rate `p_c` is `mu`.
pub fn event_rate(mu: f64, p_c: f64) -> f64 {
    let e = mu.exp();
    e * p_c / (1.0 - p_c + p_c * e)
}

/// Per-arm size and event counts behind one simulated study.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyCounts {
    pub arm_size: f64,
    /// Events in arms A, B, C; `None` for arms the design drops.
    pub events: [Option<f64>; 3],
    pub corrected: bool,
}

/// Arms used by each design (indices into A, B, C).
fn design_arms(design: usize) -> &'static [usize] {
    match design {
        1 => &[0, 2],
        2 => &[1, 2],
        3 => &[0, 1],
        _ => &[0, 1, 2],
    }
}

fn log_odds(e: f64, n: f64) -> f64 {
    (e / (n - e)).ln()
}

fn cell_var(e: f64, n: f64) -> f64 {
    1.0 / e + 1.0 / (n - e)
}

/// One study with given study-level log odds ratios (A vs C, B vs C),
/// control rate and arm size.
pub fn simulate_study(
    id: String,
    design: usize,
    mu_ac: f64,
    mu_bc: f64,
    p_c: f64,
    arm_size: u64,
    rng: &mut impl Rng,
) -> (StudyRecord, StudyCounts) {
    let rates = [event_rate(mu_ac, p_c), event_rate(mu_bc, p_c), p_c];
    let arms = design_arms(design);
    let n = arm_size as f64;
    let mut events = [None; 3];
    let mut corrected = true;
    for _ in 0..100 {
        let mut ok = true;
        for &a in arms {
            let e = Binomial::new(arm_size, rates[a]).expect("valid binomial").sample(rng) as f64;
            ok &= e > 0.0 && e < n;
            events[a] = Some(e);
        }
        if ok {
            corrected = false;
            break;
        }
    }
    let (ev, nn): ([f64; 3], f64) = if corrected {
        (events.map(|e| e.map_or(0.0, |v| v + 0.5)), n + 1.0)
    } else {
        (events.map(|e| e.unwrap_or(0.0)), n)
    };
    let total = 2 * arm_size as u32;
    let outcome = |x: usize, y: usize, label_x: &str, label_y: &str| ComparisonOutcome {
        comparison: Comparison::new(tid(label_x), tid(label_y)),
        y: log_odds(ev[x], nn) - log_odds(ev[y], nn),
        se: (cell_var(ev[x], nn) + cell_var(ev[y], nn)).sqrt(),
        n: total,
    };
    let record = match design {
        1 => StudyRecord::published(id, 1, vec![outcome(0, 2, "A", "C")], None),
        2 => StudyRecord::published(id, 2, vec![outcome(1, 2, "B", "C")], None),
        3 => StudyRecord::published(id, 3, vec![outcome(0, 1, "A", "B")], None),
        _ => StudyRecord::published(
            id,
            4,
            vec![outcome(0, 2, "A", "C"), outcome(1, 2, "B", "C")],
            Some(cell_var(ev[2], nn)),
        ),
    };
    (
        record,
        StudyCounts {
            arm_size: nn,
            events: [0, 1, 2].map(|a| arms.contains(&a).then_some(ev[a])),
            corrected,
        },
    )
}

/// Fully published network for one replicate.
pub fn generate_complete_network(cfg: &SimConfig, rng: &mut impl Rng) -> Result<NetworkDataset> {
    let log_n = LogNormal::new(cfg.log_n.0, cfg.log_n.1).map_err(|e| Error::Config(e.to_string()))?;
    let mut studies = Vec::new();
    for design in 1..=N_DESIGNS {
        let count = match cfg.size {
            SizeRegime::Small => rng.random_range(5..=10),
            SizeRegime::Moderate => 10,
            SizeRegime::Large => 20,
        };
        let tau = cfg.tau_for(design);
        let normal = |m: f64| Normal::new(m, tau).expect("finite parameters");
        for i in 1..=count {
            let mu_ac = normal(cfg.mu_ac).sample(rng);
            let mu_bc = normal(cfg.mu_bc).sample(rng);
            let p_c = rng.random_range(cfg.control_rate.0..=cfg.control_rate.1);
            let total = (log_n.sample(rng).round() as u32).max(cfg.min_total);
            let arm = total.div_ceil(2) as u64;
            let (record, _) = simulate_study(format!("k{design}-{i}"), design, mu_ac, mu_bc, p_c, arm, rng);
            studies.push(record);
        }
    }
    NetworkDataset::new(simulation_designs(), studies)
}

/// Decide publication for every study; unpublished studies keep only their
/// registry entry (design and planned size).
pub fn apply_selection(
    data: &NetworkDataset,
    spec: &SelectionSpec,
    params: &SelectionParams,
    rng: &mut impl Rng,
) -> Result<NetworkDataset> {
    let mut out = Vec::with_capacity(data.studies().len());
    for s in data.studies() {
        if !s.published {
            out.push(s.clone());
            continue;
        }
        let pi = publish_probability(spec, params, s.design, s.t_statistic(spec.direction)?);
        let u: f64 = rng.random();
        if u < pi {
            out.push(s.clone());
        } else {
            out.push(StudyRecord::registry(s.study_id.clone(), s.design, s.n_planned));
        }
    }
    data.with_studies(out)
}

/// Selection-applied dataset for replicate `r`; also used by tests.
pub fn generate_replicate(cfg: &SimConfig, r: u64) -> Result<NetworkDataset> {
    let mut rng = substream(cfg.seed, &[r, 0]);
    let full = generate_complete_network(cfg, &mut rng)?;
    match &cfg.selection {
        None => Ok(full),
        Some(sel) => {
            let spec = SelectionSpec::from_str(&sel.model)?.with_direction(cfg.direction);
            let params = SelectionParams::new(spec.structure, sel.beta.clone());
            let mut rng = substream(cfg.seed, &[r, 1]);
            apply_selection(&full, &spec, &params, &mut rng)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct EstimateRecord {
    estimates: Vec<f64>,
    ci: Vec<Option<(f64, f64)>>,
}

#[derive(Clone, Debug)]
struct ReplicateOutcome {
    unpublished_fraction: Option<f64>,
    /// Per estimator, `None` on failure.
    fits: Vec<Option<EstimateRecord>>,
}

fn run_replicate(cfg: &SimConfig, estimators: &[Estimator], r: u64) -> ReplicateOutcome {
    let data = match generate_replicate(cfg, r) {
        Ok(d) => d,
        Err(_) => {
            return ReplicateOutcome {
                unpublished_fraction: None,
                fits: vec![None; estimators.len()],
            }
        }
    };
    let reference = tid("C");
    let frac = data.n_unpublished() as f64 / data.n_total() as f64;
    let fits = estimators
        .iter()
        .enumerate()
        .map(|(e, est)| match est {
            Estimator::Mre => fit_weighted(&data, &reference, cfg.tau_mode, None).ok().map(|f| EstimateRecord {
                estimates: f.params.to_vector(),
                ci: f.ci,
            }),
            Estimator::Ipw(spec) => {
                let spec = spec.with_direction(cfg.direction);
                let fit = fit_ipw_with_reference(&data, &spec, &reference, cfg.tau_mode).ok()?;
                let estimates = fit.estimates();
                let ci = if cfg.boots(est) {
                    let seed: u64 = substream(cfg.seed, &[r, 2, e as u64]).random();
                    let streams: Vec<u64> = (0..cfg.bootstrap as u64).collect();
                    let boot = bootstrap_streams(&data, &fit, &streams, seed).ok()?;
                    boot.ci.into_iter().map(Some).collect()
                } else {
                    vec![None; estimates.len()]
                };
                Some(EstimateRecord { estimates, ci })
            }
        })
        .collect();
    ReplicateOutcome {
        unpublished_fraction: Some(frac),
        fits,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub estimator: String,
    pub parameter: String,
    pub truth: f64,
    /// Successful replicates.
    pub n: usize,
    pub failures: usize,
    pub ave: f64,
    pub sd: Option<f64>,
    /// Coverage of the truth by the estimator's 95% interval.
    pub cp: Option<f64>,
    /// Mean interval length.
    pub loci: Option<f64>,
    /// Exact-zero estimates, heterogeneity parameters only.
    pub noz: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub schema: String,
    pub seed: u64,
    pub replications: usize,
    pub bootstrap: usize,
    pub tau_mode: TauMode,
    pub mean_unpublished_fraction: f64,
    pub rows: Vec<MetricRow>,
}

impl SimMetrics {
    pub fn row(&self, estimator: &str, parameter: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.parameter == parameter)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let mut s = String::from("estimator,parameter,truth,n,failures,ave,sd,cp,loci,noz\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.6},{},{},{},{}",
                r.estimator,
                r.parameter,
                r.truth,
                r.n,
                r.failures,
                r.ave,
                opt(r.sd),
                opt(r.cp),
                opt(r.loci),
                r.noz.map_or(String::new(), |v| v.to_string())
            );
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn parameter_layout(cfg: &SimConfig) -> (Vec<String>, Vec<f64>) {
    let mut names = vec!["mu[A:C]".to_string(), "mu[B:C]".to_string()];
    let mut truth = vec![cfg.mu_ac, cfg.mu_bc];
    match cfg.tau_mode {
        TauMode::Common => {
            names.push("tau".into());
            truth.push(cfg.tau[0]);
        }
        TauMode::DesignSpecific => {
            for k in 1..=N_DESIGNS {
                names.push(format!("tau[{k}]"));
                truth.push(cfg.tau_for(k));
            }
        }
    }
    (names, truth)
}

/// Run the Monte Carlo experiment. Replicates run in parallel on the
/// current rayon pool; results depend only on the configuration.
pub fn run_monte_carlo(cfg: &SimConfig) -> Result<SimMetrics> {
    cfg.validate()?;
    let estimators = cfg.parsed_estimators()?;
    let outcomes: Vec<ReplicateOutcome> = (0..cfg.replications as u64)
        .into_par_iter()
        .map(|r| run_replicate(cfg, &estimators, r))
        .collect();

    let (names, truth) = parameter_layout(cfg);
    let r_total = cfg.replications;
    let fracs: Vec<f64> = outcomes.iter().filter_map(|o| o.unpublished_fraction).collect();
    let mean_frac = if fracs.is_empty() {
        f64::NAN
    } else {
        fracs.iter().sum::<f64>() / fracs.len() as f64
    };
    let mut rows = Vec::new();
    for (e, est) in estimators.iter().enumerate() {
        let ok: Vec<&EstimateRecord> = outcomes.iter().filter_map(|o| o.fits[e].as_ref()).collect();
        let failures = r_total - ok.len();
        if failures as f64 > MAX_REPLICATE_FAILURES * r_total as f64 {
            return Err(Error::Simulation(format!(
                "{} failed on {failures} of {r_total} replicates",
                est.label()
            )));
        }
        for (j, name) in names.iter().enumerate() {
            let vals: Vec<f64> = ok.iter().map(|f| f.estimates[j]).collect();
            let n = vals.len();
            let ave = vals.iter().sum::<f64>() / n as f64;
            let sd = (n > 1).then(|| (vals.iter().map(|v| (v - ave).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
            let cis: Vec<(f64, f64)> = ok.iter().filter_map(|f| f.ci[j]).collect();
            let (cp, loci) = if cis.is_empty() {
                (None, None)
            } else {
                let m = cis.len() as f64;
                let cover = cis.iter().filter(|(lo, hi)| *lo <= truth[j] && truth[j] <= *hi).count() as f64;
                let len = cis.iter().map(|(lo, hi)| hi - lo).sum::<f64>();
                (Some(cover / m), Some(len / m))
            };
            let noz = name.starts_with("tau").then(|| vals.iter().filter(|v| **v == 0.0).count());
            rows.push(MetricRow {
                estimator: est.label(),
                parameter: name.clone(),
                truth: truth[j],
                n,
                failures,
                ave,
                sd,
                cp,
                loci,
                noz,
            });
        }
    }
    Ok(SimMetrics {
        schema: "sim-v1".into(),
        seed: cfg.seed,
        replications: r_total,
        bootstrap: cfg.bootstrap,
        tau_mode: cfg.tau_mode,
        mean_unpublished_fraction: mean_frac,
        rows,
    })
}
