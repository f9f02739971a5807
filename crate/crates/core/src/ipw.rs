//! Inverse-probability-weighted likelihood fit and its parametric bootstrap.
//!
//! Each published study's log-likelihood contribution is weighted by
//! `1/π̂`, with `π̂` from the solved selection model. Standard errors and
//! intervals come from a parametric bootstrap that resamples published
//! outcomes from the fitted model, re-solves the selection equations and
//! refits.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{extreme_t, NetworkDataset, TreatmentId};
use crate::error::{Error, Result};
use crate::model::{FitResult, Likelihood, TauMode};
use crate::rng::substream;
use crate::selection::{
    self, default_moment_function, publish_probability, RootPolicy, SelectionFit, SelectionSpec, Unit,
};

/// Largest tolerated share of failed bootstrap replicates.
pub const MAX_FAILURE_SHARE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct IpwFit {
    pub spec: SelectionSpec,
    /// Weighted maximum-likelihood fit; its Wald fields use the weighted
    /// information and are not valid intervals for the IPW estimator.
    pub fit: FitResult,
    /// `None` when every study was published and all weights are 1.
    pub selection: Option<SelectionFit>,
    /// `π̂` per published study, in published order.
    pub pi_hat: Vec<f64>,
    pub boot: Option<BootstrapSummary>,
    /// Policy used for the selection equations here and in the bootstrap.
    pub root_policy: RootPolicy,
    pub warnings: Vec<String>,
}

impl IpwFit {
    pub fn estimates(&self) -> Vec<f64> {
        self.fit.params.to_vector()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    /// Successful replicates.
    pub b: usize,
    pub requested: usize,
    pub dropped: usize,
    pub names: Vec<String>,
    pub estimate: Vec<f64>,
    pub sd: Vec<f64>,
    /// 2.5% and 97.5% quantiles of the standardized replicates.
    pub quantiles: Vec<(f64, f64)>,
    pub ci: Vec<(f64, f64)>,
    /// Replicate estimates, one row per successful replicate in stream order.
    pub replicates: Vec<Vec<f64>>,
    /// Number of basic contrasts at the front of every parameter vector.
    pub n_mu: usize,
}

/// Bootstrap standard deviation and interval of one scalar statistic.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Interval {
    pub sd: f64,
    pub quantiles: (f64, f64),
    pub ci: (f64, f64),
}

/// Type-7 sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `σ = √(B⁻¹ Σ (θ̃ − θ̄)²)`, and `θ̂ + q·σ` with `q` the 2.5%/97.5%
/// quantiles of `(θ̃ − θ̄)/σ`.
pub fn standardized_interval(estimate: f64, draws: &[f64]) -> Interval {
    let b = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / b;
    let sd = if draws.iter().all(|x| *x == draws[0]) {
        0.0
    } else {
        (draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / b).sqrt()
    };
    if sd == 0.0 || !sd.is_finite() {
        return Interval {
            sd: if sd.is_finite() { sd } else { f64::NAN },
            quantiles: (0.0, 0.0),
            ci: (estimate, estimate),
        };
    }
    let mut z: Vec<f64> = draws.iter().map(|x| (x - mean) / sd).collect();
    z.sort_by(f64::total_cmp);
    let q = (quantile_sorted(&z, 0.025), quantile_sorted(&z, 0.975));
    Interval {
        sd,
        quantiles: q,
        ci: (estimate + q.0 * sd, estimate + q.1 * sd),
    }
}

impl BootstrapSummary {
    fn from_replicates(names: Vec<String>, estimate: Vec<f64>, n_mu: usize, replicates: Vec<Vec<f64>>, requested: usize) -> Self {
        let p = estimate.len();
        let mut sd = Vec::with_capacity(p);
        let mut quantiles = Vec::with_capacity(p);
        let mut ci = Vec::with_capacity(p);
        for j in 0..p {
            let draws: Vec<f64> = replicates.iter().map(|r| r[j]).collect();
            let iv = standardized_interval(estimate[j], &draws);
            sd.push(iv.sd);
            quantiles.push(iv.quantiles);
            ci.push(if j >= n_mu { (iv.ci.0.max(0.0), iv.ci.1) } else { iv.ci });
        }
        BootstrapSummary {
            b: replicates.len(),
            requested,
            dropped: requested - replicates.len(),
            names,
            estimate,
            sd,
            quantiles,
            ci,
            replicates,
            n_mu,
        }
    }

    /// Interval for `Σ coef_j μ_j`, from the replicate-wise linear combination.
    pub fn contrast(&self, coef: &[f64]) -> Interval {
        let lin = |v: &[f64]| coef.iter().zip(v).map(|(c, x)| c * x).sum::<f64>();
        let draws: Vec<f64> = self.replicates.iter().map(|r| lin(r)).collect();
        standardized_interval(lin(&self.estimate), &draws)
    }
}

/// Weights `1/π̂` (or unit weights) and the selection fit behind them.
fn selection_weights(
    data: &NetworkDataset,
    spec: &SelectionSpec,
    policy: RootPolicy,
) -> Result<(Option<SelectionFit>, Vec<f64>, Vec<String>)> {
    let g = default_moment_function(spec, data.designs().len());
    match selection::solve_selection_policy(data, spec, &g, policy) {
        Ok(sel) => {
            let pi = sel.published_probabilities(data)?;
            let warnings = sel.diagnostics.warnings.clone();
            Ok((Some(sel), pi, warnings))
        }
        Err(Error::AllPublished) => Ok((
            None,
            vec![1.0; data.n_published()],
            vec!["every study is published; using unit weights".into()],
        )),
        Err(e) => Err(e),
    }
}

/// IPW fit using the dataset's default reference treatment.
pub fn fit_ipw(data: &NetworkDataset, spec: &SelectionSpec, mode: TauMode) -> Result<IpwFit> {
    fit_ipw_with_reference(data, spec, &data.default_reference(), mode)
}

/// IPW fit; when the selection equations have no exact root the
/// least-squares solution is used and a warning recorded.
pub fn fit_ipw_with_reference(
    data: &NetworkDataset,
    spec: &SelectionSpec,
    reference: &TreatmentId,
    mode: TauMode,
) -> Result<IpwFit> {
    fit_ipw_policy(data, spec, reference, mode, RootPolicy::LeastSquares)
}

pub fn fit_ipw_policy(
    data: &NetworkDataset,
    spec: &SelectionSpec,
    reference: &TreatmentId,
    mode: TauMode,
    policy: RootPolicy,
) -> Result<IpwFit> {
    let (selection, pi_hat, mut warnings) = selection_weights(data, spec, policy)?;
    let weights: Vec<f64> = pi_hat.iter().map(|p| 1.0 / p).collect();
    let lik = Likelihood::new(data, reference, mode, Some(&weights))?;
    let fit = lik.fit(&lik.default_starts())?;
    warnings.extend(fit.warnings.iter().cloned());
    Ok(IpwFit {
        spec: *spec,
        fit,
        selection,
        pi_hat,
        boot: None,
        root_policy: policy,
        warnings,
    })
}

/// Parametric bootstrap with `b` replicates drawn from streams `0..b` of `seed`.
pub fn parametric_bootstrap(data: &NetworkDataset, fit: &IpwFit, b: usize, seed: u64) -> Result<BootstrapSummary> {
    let streams: Vec<u64> = (0..b as u64).collect();
    bootstrap_streams(data, fit, &streams, seed)
}

/// Fit and attach a bootstrap summary in one call.
pub fn fit_ipw_bootstrap(
    data: &NetworkDataset,
    spec: &SelectionSpec,
    reference: &TreatmentId,
    mode: TauMode,
    b: usize,
    seed: u64,
) -> Result<IpwFit> {
    let mut fit = fit_ipw_with_reference(data, spec, reference, mode)?;
    fit.boot = Some(parametric_bootstrap(data, &fit, b, seed)?);
    Ok(fit)
}

/// Bootstrap over an explicit list of stream indices; rows of the replicate
/// matrix follow the list order.
pub fn bootstrap_streams(data: &NetworkDataset, fit: &IpwFit, streams: &[u64], seed: u64) -> Result<BootstrapSummary> {
    if streams.len() < 2 {
        return Err(Error::Config("bootstrap needs at least 2 replicates".into()));
    }
    let params = &fit.fit.params;
    let weights: Vec<f64> = fit.pi_hat.iter().map(|p| 1.0 / p).collect();
    let lik = Likelihood::new(data, &params.reference, params.tau.mode, Some(&weights))?;
    let theta = params.to_vector();
    let base_units = selection::units(data, fit.spec.direction)?;
    // Position of each published study within the full study list.
    let published_pos: Vec<usize> = data
        .studies()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.published)
        .map(|(i, _)| i)
        .collect();
    // Cholesky factors of each block's fitted marginal covariance.
    let factors: Vec<Vec<f64>> = lik
        .blocks
        .iter()
        .map(|blk| {
            let tau = theta[lik.n_mu + tau_slot(&lik, blk.design)];
            lower_cholesky(&blk.marginal(tau), blk.d)
        })
        .collect::<Option<_>>()
        .ok_or_else(|| Error::SingularCovariance("fitted marginal covariance".into()))?;
    let n_designs = data.designs().len();
    let g = default_moment_function(&fit.spec, n_designs);

    let replicate = |stream: u64| -> Option<Vec<f64>> {
        let mut rng = substream(seed, &[stream]);
        let mut lik_b = lik.clone();
        let mut units = base_units.clone();
        let mut mean = [0.0; 8];
        for (i, blk) in lik_b.blocks.iter_mut().enumerate() {
            let d = blk.d;
            blk.mean(&theta[..lik.n_mu], &mut mean[..d]);
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let l = &factors[i];
            for a in 0..d {
                blk.y[a] = mean[a] + (0..=a).map(|c| l[a * d + c] * z[c]).sum::<f64>();
            }
            let t = extreme_t(
                (0..d).map(|a| blk.y[a] / blk.sigma[a * d + a].sqrt()),
                fit.spec.direction,
            );
            units[published_pos[i]] = Unit {
                t: Some(t),
                ..units[published_pos[i]]
            };
        }
        if let Some(sel) = &fit.selection {
            let sel_b = selection::solve_units(&fit.spec, n_designs, &units, &g, Some(&sel.params), fit.root_policy).ok()?;
            for (i, blk) in lik_b.blocks.iter_mut().enumerate() {
                let u = units[published_pos[i]];
                blk.weight = 1.0 / publish_probability(&fit.spec, &sel_b.params, u.design + 1, u.t?);
            }
        }
        let (theta_b, _, _) = lik_b
            .fit_point(std::slice::from_ref(&theta))
            .or_else(|_| lik_b.fit_point(&lik_b.default_starts()))
            .ok()?;
        Some(theta_b)
    };

    let results: Vec<Option<Vec<f64>>> = streams.par_iter().map(|&s| replicate(s)).collect();
    let requested = streams.len();
    let replicates: Vec<Vec<f64>> = results.into_iter().flatten().collect();
    let dropped = requested - replicates.len();
    if dropped as f64 > MAX_FAILURE_SHARE * requested as f64 || replicates.len() < 2 {
        return Err(Error::TooManyFailures { dropped, requested });
    }
    Ok(BootstrapSummary::from_replicates(
        params.parameter_names(),
        theta,
        lik.n_mu,
        replicates,
        requested,
    ))
}

fn tau_slot(lik: &Likelihood, design: usize) -> usize {
    match lik.mode {
        TauMode::Common => 0,
        TauMode::DesignSpecific => design,
    }
}

/// Row-major lower Cholesky factor of a small SPD matrix.
fn lower_cholesky(v: &[f64], d: usize) -> Option<Vec<f64>> {
    let m = DMatrix::from_row_slice(d, d, v);
    let l = m.cholesky()?.l();
    Some(l.transpose().as_slice().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Comparison, ComparisonOutcome, DesignType, StudyRecord};
    use crate::model::{fit_mre, fit_weighted};
    use crate::selection::{Family, Structure};
    use approx::assert_relative_eq;

    fn t(s: &str) -> TreatmentId {
        TreatmentId::new(s).unwrap()
    }

    fn pairwise(effects: &[(f64, f64)], unpublished: &[u32]) -> NetworkDataset {
        let designs = vec![DesignType::new(1, vec![Comparison::new(t("A"), t("B"))]).unwrap()];
        let mut studies: Vec<StudyRecord> = effects
            .iter()
            .enumerate()
            .map(|(i, &(y, se))| {
                StudyRecord::published(
                    format!("s{i}"),
                    1,
                    vec![ComparisonOutcome {
                        comparison: Comparison::new(t("A"), t("B")),
                        y,
                        se,
                        n: (4.0 / (se * se)).min(1e5) as u32 + 2,
                    }],
                    None,
                )
            })
            .collect();
        for (j, &n) in unpublished.iter().enumerate() {
            studies.push(StudyRecord::registry(format!("u{j}"), 1, n));
        }
        NetworkDataset::new(designs, studies).unwrap()
    }

    fn toy() -> NetworkDataset {
        pairwise(
            &[(0.1, 0.2), (0.6, 0.25), (0.9, 0.3), (0.2, 0.15), (1.3, 0.4), (0.4, 0.2), (0.7, 0.35)],
            &[40, 60, 120],
        )
    }

    fn logit2() -> SelectionSpec {
        SelectionSpec::new(Family::Logistic, Structure::Common)
    }

    #[test]
    fn unit_weights_reproduce_mre_exactly() {
        let d = pairwise(&[(0.1, 0.2), (0.6, 0.25), (0.9, 0.3), (0.2, 0.15)], &[]);
        let ipw = fit_ipw(&d, &logit2(), TauMode::DesignSpecific).unwrap();
        let mre = fit_mre(&d, TauMode::DesignSpecific).unwrap();
        assert!(ipw.selection.is_none());
        assert_eq!(ipw.fit.params, mre.params);
    }

    #[test]
    fn frequency_weights_match_duplicated_study() {
        let eff = [(0.1, 0.2), (0.9, 0.3), (0.5, 0.25)];
        let d = pairwise(&eff, &[]);
        let weighted = fit_weighted(&d, &t("B"), TauMode::DesignSpecific, Some(&[2.0, 1.0, 1.0])).unwrap();
        let dup = pairwise(&[eff[0], eff[0], eff[1], eff[2]], &[]);
        let plain = fit_mre(&dup, TauMode::DesignSpecific).unwrap();
        for (a, b) in weighted.params.to_vector().iter().zip(plain.params.to_vector()) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn lower_probability_pulls_estimate_toward_study() {
        let d = pairwise(&[(0.1, 0.2), (0.6, 0.25), (0.9, 0.3), (0.2, 0.15)], &[]);
        let mut last = f64::NEG_INFINITY;
        for w in [1.0, 1.5, 2.0, 4.0] {
            let fit = fit_weighted(&d, &t("B"), TauMode::DesignSpecific, Some(&[1.0, 1.0, w, 1.0])).unwrap();
            // study 2 has the largest effect, so its growing weight raises mu
            assert!(fit.params.mu[0] > last, "w = {w}");
            last = fit.params.mu[0];
        }
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let d = toy();
        let fit = fit_ipw(&d, &logit2(), TauMode::DesignSpecific).unwrap();
        let a = parametric_bootstrap(&d, &fit, 40, 11).unwrap();
        let b = parametric_bootstrap(&d, &fit, 40, 11).unwrap();
        assert_eq!(a, b);
        let c = parametric_bootstrap(&d, &fit, 40, 12).unwrap();
        assert_ne!(a.replicates, c.replicates);
        for j in 0..a.estimate.len() {
            assert!(a.ci[j].0 <= a.ci[j].1);
            if a.quantiles[j].0 < 0.0 && a.quantiles[j].1 > 0.0 {
                assert!(a.ci[j].0 <= a.estimate[j] && a.estimate[j] <= a.ci[j].1);
            }
        }
    }

    #[test]
    fn permuted_streams_permute_rows() {
        let d = toy();
        let fit = fit_ipw(&d, &logit2(), TauMode::DesignSpecific).unwrap();
        let fwd: Vec<u64> = (0..30).collect();
        let rev: Vec<u64> = (0..30).rev().collect();
        let a = bootstrap_streams(&d, &fit, &fwd, 3).unwrap();
        let b = bootstrap_streams(&d, &fit, &rev, 3).unwrap();
        let mut rows_b = b.replicates.clone();
        rows_b.reverse();
        assert_eq!(a.replicates, rows_b);
        for j in 0..a.sd.len() {
            assert!((a.sd[j] - b.sd[j]).abs() < 1e-12);
            assert!((a.quantiles[j].0 - b.quantiles[j].0).abs() < 1e-12);
            assert!((a.quantiles[j].1 - b.quantiles[j].1).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_standard_errors_collapse_interval() {
        let mut widths = Vec::new();
        for scale in [1e-1, 1e-2, 1e-3] {
            let eff: Vec<(f64, f64)> = [1.0, 2.0, 1.5, 1.0, 3.0].iter().map(|s| (0.5, s * scale)).collect();
            let d = pairwise(&eff, &[]);
            let fit = fit_ipw(&d, &logit2(), TauMode::DesignSpecific).unwrap();
            let boot = parametric_bootstrap(&d, &fit, 50, 5).unwrap();
            assert_eq!(boot.dropped, 0);
            assert!(boot.sd[0] < 2.0 * scale, "sd {} at scale {scale}", boot.sd[0]);
            widths.push(boot.ci[0].1 - boot.ci[0].0);
        }
        assert!(widths[1] < 0.2 * widths[0] && widths[2] < 0.2 * widths[1], "{widths:?}");
    }

    #[test]
    fn standardized_interval_hand_values() {
        let iv = standardized_interval(1.0, &[0.0, 2.0]);
        assert_relative_eq!(iv.sd, 1.0);
        assert_relative_eq!(iv.quantiles.0, -0.95, epsilon = 1e-12);
        assert_relative_eq!(iv.ci.1, 1.95, epsilon = 1e-12);
        let flat = standardized_interval(0.3, &[0.2, 0.2, 0.2]);
        assert_eq!(flat.ci, (0.3, 0.3));
    }
}
