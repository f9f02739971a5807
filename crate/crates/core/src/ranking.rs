//! P-score ranking: the mean certainty that a treatment beats each of the
//! others, `P̄_i = (T−1)⁻¹ Σ_{j≠i} Φ(μ̂_ij / σ_ij)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{Direction, TreatmentId};
use crate::error::{Error, Result};
use crate::ipw::IpwFit;
use crate::model::{derived_contrast, FitResult};
use crate::selection::normal_cdf;

/// Anything that can report pairwise contrasts with standard errors.
pub trait ContrastSource {
    /// Method tag, e.g. `mre` or `ipw`.
    fn method(&self) -> String;
    /// Every treatment in the network.
    fn treatments(&self) -> Vec<TreatmentId>;
    /// Estimate of `x − y` and its standard error, if available.
    fn contrast(&self, x: &TreatmentId, y: &TreatmentId) -> Result<(f64, Option<f64>)>;
}

impl ContrastSource for FitResult {
    fn method(&self) -> String {
        "mre".into()
    }

    fn treatments(&self) -> Vec<TreatmentId> {
        self.params.all_treatments()
    }

    fn contrast(&self, x: &TreatmentId, y: &TreatmentId) -> Result<(f64, Option<f64>)> {
        let c = derived_contrast(self, x, y)?;
        Ok((c.estimate, c.se))
    }
}

impl ContrastSource for IpwFit {
    fn method(&self) -> String {
        "ipw".into()
    }

    fn treatments(&self) -> Vec<TreatmentId> {
        self.fit.params.all_treatments()
    }

    /// Standard errors come from replicate-wise differences of the bootstrap.
    fn contrast(&self, x: &TreatmentId, y: &TreatmentId) -> Result<(f64, Option<f64>)> {
        let p = &self.fit.params;
        let est = derived_contrast(&self.fit, x, y)?.estimate;
        let Some(boot) = &self.boot else {
            return Ok((est, None));
        };
        let mut coef = vec![0.0; boot.estimate.len()];
        if let Some(i) = p.treatments.iter().position(|t| t == x) {
            coef[i] += 1.0;
        }
        if let Some(i) = p.treatments.iter().position(|t| t == y) {
            coef[i] -= 1.0;
        }
        Ok((est, Some(boot.contrast(&coef).sd)))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeagueEntry {
    pub treat_x: TreatmentId,
    pub treat_y: TreatmentId,
    pub estimate: f64,
    pub se: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
}

/// Pairwise contrasts as stored in a fit document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeagueTable {
    pub method: String,
    pub treatments: Vec<TreatmentId>,
    pub entries: Vec<LeagueEntry>,
}

impl ContrastSource for LeagueTable {
    fn method(&self) -> String {
        self.method.clone()
    }

    fn treatments(&self) -> Vec<TreatmentId> {
        self.treatments.clone()
    }

    fn contrast(&self, x: &TreatmentId, y: &TreatmentId) -> Result<(f64, Option<f64>)> {
        for t in [x, y] {
            if !self.treatments.contains(t) {
                return Err(Error::UnknownTreatment(t.to_string()));
            }
        }
        if x == y {
            return Ok((0.0, Some(0.0)));
        }
        for e in &self.entries {
            if &e.treat_x == x && &e.treat_y == y {
                return Ok((e.estimate, e.se));
            }
            if &e.treat_x == y && &e.treat_y == x {
                return Ok((-e.estimate, e.se));
            }
        }
        Ok((f64::NAN, None))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub method: String,
    pub direction: Direction,
    /// Treatments in label order; rows and columns of `pairwise`.
    pub treatments: Vec<TreatmentId>,
    /// `pairwise[i][j]`: certainty that treatment `i` is better than `j`.
    pub pairwise: Vec<Vec<f64>>,
    /// P-score per treatment, aligned with `treatments`.
    pub p_score: Vec<f64>,
    /// Indices into `treatments`, best first.
    pub order: Vec<usize>,
}

impl RankTable {
    pub fn ranked(&self) -> impl Iterator<Item = (usize, &TreatmentId, f64)> + '_ {
        self.order
            .iter()
            .enumerate()
            .map(|(r, &i)| (r + 1, &self.treatments[i], self.p_score[i]))
    }
}

impl fmt::Display for RankTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "P-score ranking ({}, {} is better)", self.method, self.direction)?;
        writeln!(f, "{:>4}  {:<16} {:>8}", "rank", "treatment", "P-score")?;
        for (r, t, p) in self.ranked() {
            writeln!(f, "{r:>4}  {:<16} {p:>8.4}", t.as_str())?;
        }
        Ok(())
    }
}

/// Certainty that a contrast `mu` with standard error `sd` favours its first
/// treatment.
fn certainty(mu: f64, sd: f64, direction: Direction) -> f64 {
    let signed = match direction {
        Direction::Higher => mu,
        Direction::Lower => -mu,
    };
    if sd == 0.0 {
        return if signed > 0.0 {
            1.0
        } else if signed < 0.0 {
            0.0
        } else {
            0.5
        };
    }
    normal_cdf(signed / sd)
}

pub fn p_score(source: &dyn ContrastSource, direction: Direction) -> Result<RankTable> {
    let mut treatments = source.treatments();
    treatments.sort();
    let t = treatments.len();
    if t < 2 {
        return Err(Error::Config("ranking needs at least two treatments".into()));
    }
    let mut pairwise = vec![vec![f64::NAN; t]; t];
    for i in 0..t {
        for j in (i + 1)..t {
            let (mu, sd) = source.contrast(&treatments[i], &treatments[j])?;
            let sd = sd
                .filter(|s| s.is_finite() && *s >= 0.0 && mu.is_finite())
                .ok_or_else(|| Error::MissingSe(treatments[i].to_string(), treatments[j].to_string()))?;
            let p = certainty(mu, sd, direction);
            pairwise[i][j] = p;
            pairwise[j][i] = 1.0 - p;
        }
    }
    let p_score: Vec<f64> = (0..t)
        .map(|i| (0..t).filter(|&j| j != i).map(|j| pairwise[i][j]).sum::<f64>() / (t - 1) as f64)
        .collect();
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|&a, &b| p_score[b].total_cmp(&p_score[a]).then_with(|| treatments[a].cmp(&treatments[b])));
    Ok(RankTable {
        method: source.method(),
        direction,
        treatments,
        pairwise,
        p_score,
        order,
    })
}
