//! Versioned output documents: `fit-v1` for MRE and IPW fits, `rank-v1` for
//! P-score rankings, plus text and CSV renderings.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Direction, NetworkDataset, TreatmentId};
use crate::error::{Error, Result};
use crate::ipw::{BootstrapSummary, IpwFit};
use crate::model::{derived_contrast, FitResult, HeterogeneityStructure, ModelParams, TauMode, Z_975};
use crate::ranking::{LeagueEntry, LeagueTable, RankTable};

pub const FIT_SCHEMA: &str = "fit-v1";
pub const RANK_SCHEMA: &str = "rank-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterRow {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub token: String,
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub saturated_designs: Vec<usize>,
    /// False when `β̂` minimizes the residual norm without reaching a root.
    pub exact: bool,
    pub residual: f64,
    pub iterations: usize,
    pub condition: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapInfo {
    pub seed: Option<u64>,
    pub requested: usize,
    pub successful: usize,
    pub dropped: usize,
}

/// A fitted model as written to disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDocument {
    pub schema: String,
    /// `mre` or `ipw`.
    pub method: String,
    /// Selection-model token for IPW fits.
    pub selection: Option<String>,
    pub direction: Direction,
    pub tau_mode: TauMode,
    pub reference: TreatmentId,
    /// Every treatment, sorted by label.
    pub treatments: Vec<TreatmentId>,
    /// Basic contrasts against `reference`, then heterogeneity.
    pub parameters: Vec<ParameterRow>,
    /// Every pair `x < y` in label order; `estimate` is `x − y`.
    pub league: Vec<LeagueEntry>,
    pub loglik: f64,
    pub converged: bool,
    pub n_evals: usize,
    pub selection_fit: Option<SelectionSummary>,
    pub bootstrap: Option<BootstrapInfo>,
    pub warnings: Vec<String>,
}

fn pairs(treatments: &[TreatmentId]) -> impl Iterator<Item = (&TreatmentId, &TreatmentId)> {
    treatments
        .iter()
        .enumerate()
        .flat_map(move |(i, x)| treatments[i + 1..].iter().map(move |y| (x, y)))
}

fn contrast_coefficients(params: &ModelParams, x: &TreatmentId, y: &TreatmentId, len: usize) -> Vec<f64> {
    let mut coef = vec![0.0; len];
    if let Some(i) = params.treatments.iter().position(|t| t == x) {
        coef[i] += 1.0;
    }
    if let Some(i) = params.treatments.iter().position(|t| t == y) {
        coef[i] -= 1.0;
    }
    coef
}

impl FitDocument {
    /// Document for an unweighted fit, with Wald intervals.
    pub fn from_mre(fit: &FitResult, direction: Direction) -> Result<Self> {
        let p = &fit.params;
        let treatments = p.all_treatments();
        let parameters = p
            .parameter_names()
            .into_iter()
            .zip(p.to_vector())
            .enumerate()
            .map(|(i, (name, estimate))| ParameterRow {
                name,
                estimate,
                se: fit.se[i],
                ci_lower: fit.ci[i].map(|c| c.0),
                ci_upper: fit.ci[i].map(|c| c.1),
            })
            .collect();
        let league = pairs(&treatments)
            .map(|(x, y)| {
                let c = derived_contrast(fit, x, y)?;
                Ok(LeagueEntry {
                    treat_x: x.clone(),
                    treat_y: y.clone(),
                    estimate: c.estimate,
                    se: c.se,
                    ci_lower: c.se.map(|s| c.estimate - Z_975 * s),
                    ci_upper: c.se.map(|s| c.estimate + Z_975 * s),
                })
            })
            .collect::<Result<_>>()?;
        Ok(FitDocument {
            schema: FIT_SCHEMA.into(),
            method: "mre".into(),
            selection: None,
            direction,
            tau_mode: p.tau.mode,
            reference: p.reference.clone(),
            treatments,
            parameters,
            league,
            loglik: fit.loglik,
            converged: fit.converged,
            n_evals: fit.n_evals,
            selection_fit: None,
            bootstrap: None,
            warnings: fit.warnings.clone(),
        })
    }

    /// Document for an IPW fit. Uncertainty comes only from the bootstrap;
    /// without one, standard errors and intervals are absent.
    pub fn from_ipw(fit: &IpwFit, seed: Option<u64>) -> Result<Self> {
        let p = &fit.fit.params;
        let treatments = p.all_treatments();
        let boot = fit.boot.as_ref();
        let parameters = p
            .parameter_names()
            .into_iter()
            .zip(p.to_vector())
            .enumerate()
            .map(|(i, (name, estimate))| ParameterRow {
                name,
                estimate,
                se: boot.map(|b| b.sd[i]),
                ci_lower: boot.map(|b| b.ci[i].0),
                ci_upper: boot.map(|b| b.ci[i].1),
            })
            .collect();
        let league = pairs(&treatments)
            .map(|(x, y)| {
                let estimate = derived_contrast(&fit.fit, x, y)?.estimate;
                let interval = boot.map(|b| b.contrast(&contrast_coefficients(p, x, y, b.estimate.len())));
                Ok(LeagueEntry {
                    treat_x: x.clone(),
                    treat_y: y.clone(),
                    estimate,
                    se: interval.as_ref().map(|i| i.sd),
                    ci_lower: interval.as_ref().map(|i| i.ci.0),
                    ci_upper: interval.as_ref().map(|i| i.ci.1),
                })
            })
            .collect::<Result<_>>()?;
        let selection_fit = fit.selection.as_ref().map(|s| SelectionSummary {
            token: s.spec.token().into(),
            beta: s.params.beta.clone(),
            saturated_designs: s.params.saturated.iter().map(|k| k + 1).collect(),
            exact: s.diagnostics.exact,
            residual: s.diagnostics.residual,
            iterations: s.diagnostics.iterations,
            condition: s.diagnostics.condition,
        });
        let mut warnings = fit.fit.warnings.clone();
        warnings.extend(fit.warnings.iter().cloned());
        Ok(FitDocument {
            schema: FIT_SCHEMA.into(),
            method: "ipw".into(),
            selection: Some(fit.spec.token().into()),
            direction: fit.spec.direction,
            tau_mode: p.tau.mode,
            reference: p.reference.clone(),
            treatments,
            parameters,
            league,
            loglik: fit.fit.loglik,
            converged: fit.fit.converged,
            n_evals: fit.fit.n_evals,
            selection_fit,
            bootstrap: boot.map(|b| BootstrapInfo {
                seed,
                requested: b.requested,
                successful: b.b,
                dropped: b.dropped,
            }),
            warnings,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FitDocument = serde_json::from_str(text)?;
        if doc.schema != FIT_SCHEMA {
            return Err(Error::Schema(format!("expected schema '{FIT_SCHEMA}', found '{}'", doc.schema)));
        }
        Ok(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn league_table(&self) -> LeagueTable {
        LeagueTable {
            method: self.method.clone(),
            treatments: self.treatments.clone(),
            entries: self.league.clone(),
        }
    }

    /// Point estimates as a fit, for centering funnel plots. Covariance and
    /// standard errors are not carried.
    pub fn point_fit(&self) -> Result<FitResult> {
        let n_mu = self.treatments.len() - 1;
        if self.parameters.len() <= n_mu {
            return Err(Error::Schema("fit document has too few parameters".into()));
        }
        let treatments: Vec<TreatmentId> = self.treatments.iter().filter(|t| **t != self.reference).cloned().collect();
        if treatments.len() != n_mu {
            return Err(Error::Schema(format!("reference '{}' is not among the treatments", self.reference)));
        }
        let values: Vec<f64> = self.parameters.iter().map(|r| r.estimate).collect();
        let params = ModelParams {
            reference: self.reference.clone(),
            treatments,
            mu: values[..n_mu].to_vec(),
            tau: HeterogeneityStructure {
                mode: self.tau_mode,
                values: values[n_mu..].to_vec(),
            },
        };
        let expected = params.parameter_names();
        let found: Vec<&str> = self.parameters.iter().map(|r| r.name.as_str()).collect();
        if expected.iter().map(String::as_str).ne(found.iter().copied()) {
            return Err(Error::Schema(format!("parameter names {found:?} do not match {expected:?}")));
        }
        Ok(FitResult {
            params,
            loglik: self.loglik,
            se: vec![None; values.len()],
            ci: vec![None; values.len()],
            mu_covariance: None,
            converged: self.converged,
            n_evals: self.n_evals,
            warnings: self.warnings.clone(),
        })
    }

    pub fn to_text(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let label = match &self.selection {
            Some(tok) => format!("ipw ({tok})"),
            None => self.method.clone(),
        };
        let _ = writeln!(s, "method: {label}   tau: {}   reference: {}", self.tau_mode, self.reference);
        let _ = writeln!(s, "log-likelihood: {:.6}   converged: {}", self.loglik, self.converged);
        if let Some(sel) = &self.selection_fit {
            let beta: Vec<String> = sel.beta.iter().map(|b| format!("{b:.4}")).collect();
            let _ = writeln!(
                s,
                "selection beta: [{}]   residual: {:.2e}{}",
                beta.join(", "),
                sel.residual,
                if sel.exact { "" } else { "   (least-squares fallback)" }
            );
        }
        if let Some(b) = &self.bootstrap {
            let _ = writeln!(s, "bootstrap: {} of {} replicates", b.successful, b.requested);
        }
        let _ = writeln!(s, "\n{:<14} {:>9} {:>9} {:>20}", "parameter", "estimate", "se", "95% CI");
        for r in &self.parameters {
            let ci = match (r.ci_lower, r.ci_upper) {
                (Some(a), Some(b)) => format!("[{a:.4}, {b:.4}]"),
                _ => "-".into(),
            };
            let _ = writeln!(s, "{:<14} {:>9.4} {:>9} {:>20}", r.name, r.estimate, fmt_opt(r.se), ci);
        }
        let _ = writeln!(s, "\n{:<12} {:>9} {:>9} {:>20}", "contrast", "estimate", "se", "95% CI");
        for e in &self.league {
            let ci = match (e.ci_lower, e.ci_upper) {
                (Some(a), Some(b)) => format!("[{a:.4}, {b:.4}]"),
                _ => "-".into(),
            };
            let _ = writeln!(
                s,
                "{:<12} {:>9.4} {:>9} {:>20}",
                format!("{} - {}", e.treat_x, e.treat_y),
                e.estimate,
                fmt_opt(e.se),
                ci
            );
        }
        for w in &self.warnings {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }

    /// League table as CSV.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("treat_x,treat_y,estimate,se,ci_lower,ci_upper\n");
        for e in &self.league {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                e.treat_x,
                e.treat_y,
                e.estimate,
                opt(e.se),
                opt(e.ci_lower),
                opt(e.ci_upper)
            );
        }
        s
    }
}

/// Bootstrap replicate matrix: one row per successful replicate.
pub fn replicates_csv(boot: &BootstrapSummary) -> String {
    let mut s = format!("replicate,{}\n", boot.names.join(","));
    for (i, row) in boot.replicates.iter().enumerate() {
        let vals: Vec<String> = row.iter().map(f64::to_string).collect();
        let _ = writeln!(s, "{},{}", i + 1, vals.join(","));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankDocument {
    pub schema: String,
    #[serde(flatten)]
    pub table: RankTable,
}

impl RankDocument {
    pub fn new(table: RankTable) -> Self {
        RankDocument {
            schema: RANK_SCHEMA.into(),
            table,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,treatment,p_score\n");
        for (r, t, p) in self.table.ranked() {
            let _ = writeln!(s, "{r},{t},{p}");
        }
        s
    }
}

/// Check that every treatment of a document occurs in the dataset.
pub fn check_treatments(doc: &FitDocument, data: &NetworkDataset) -> Result<()> {
    for t in &doc.treatments {
        data.treatment(t.as_str())?;
    }
    Ok(())
}
