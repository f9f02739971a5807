//! Contrast-based multivariate random-effects model for network
//! meta-analysis, fitted by (optionally weighted) maximum likelihood.
//!
//! Parameters are the basic contrasts `mu[t]` of every non-reference
//! treatment against the reference, and the between-study standard
//! deviations `tau`. A study of design `k` reporting comparisons `c_1..c_d`
//! has marginal covariance `Sigma_i + tau_k² C_k` with
//! `C_k[a][b] = ½ (e_xa - e_ya)·(e_xb - e_yb)`, i.e. `tau²` on the diagonal
//! and `tau²/2` between comparisons sharing their baseline arm. Contrasts
//! between two non-reference treatments follow from consistency.
//!
//! Reported log-likelihoods omit the `2π` constant.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{DesignType, NetworkDataset, TreatmentId};
use crate::error::{Error, Result};
use crate::optim::{self, minimize_box};

/// Two-sided 95% normal quantile.
pub const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauMode {
    Common,
    #[default]
    #[serde(rename = "design")]
    DesignSpecific,
}

impl FromStr for TauMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "common" => Ok(TauMode::Common),
            "design" | "design_specific" => Ok(TauMode::DesignSpecific),
            other => Err(Error::Config(format!("tau mode must be 'common' or 'design', got '{other}'"))),
        }
    }
}

impl fmt::Display for TauMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TauMode::Common => "common",
            TauMode::DesignSpecific => "design",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeterogeneityStructure {
    pub mode: TauMode,
    /// One value in common mode, one per design otherwise.
    pub values: Vec<f64>,
}

impl HeterogeneityStructure {
    /// Heterogeneity SD applying to design `k` (1-based).
    pub fn for_design(&self, k: usize) -> f64 {
        match self.mode {
            TauMode::Common => self.values[0],
            TauMode::DesignSpecific => self.values[k - 1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub reference: TreatmentId,
    /// Non-reference treatments, in the order of `mu`.
    pub treatments: Vec<TreatmentId>,
    /// Basic contrasts: effect of `treatments[i]` versus `reference`.
    pub mu: Vec<f64>,
    pub tau: HeterogeneityStructure,
}

impl ModelParams {
    /// Basic contrast of `t` against the reference; zero for the reference.
    pub fn mu_of(&self, t: &TreatmentId) -> Option<f64> {
        if t == &self.reference {
            return Some(0.0);
        }
        self.treatments.iter().position(|x| x == t).map(|i| self.mu[i])
    }

    pub fn to_vector(&self) -> Vec<f64> {
        self.mu.iter().chain(&self.tau.values).copied().collect()
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .treatments
            .iter()
            .map(|t| format!("mu[{}:{}]", t, self.reference))
            .collect();
        match self.tau.mode {
            TauMode::Common => names.push("tau".into()),
            TauMode::DesignSpecific => {
                names.extend((1..=self.tau.values.len()).map(|k| format!("tau[{k}]")))
            }
        }
        names
    }

    /// All treatments including the reference, sorted by label.
    pub fn all_treatments(&self) -> Vec<TreatmentId> {
        let mut all = self.treatments.clone();
        all.push(self.reference.clone());
        all.sort();
        all
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ModelParams,
    pub loglik: f64,
    /// Wald standard error per parameter, in `params.to_vector()` order.
    pub se: Vec<Option<f64>>,
    /// Wald 95% interval per parameter; `tau` intervals are truncated at 0.
    pub ci: Vec<Option<(f64, f64)>>,
    /// Inverse observed information over the `mu` block.
    pub mu_covariance: Option<DMatrix<f64>>,
    pub converged: bool,
    pub n_evals: usize,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn parameter_names(&self) -> Vec<String> {
        self.params.parameter_names()
    }
}

/// Estimate and standard error of a treatment contrast.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contrast {
    pub estimate: f64,
    pub se: Option<f64>,
}

/// `½ (e_xa - e_ya)·(e_xb - e_yb)` for every pair of the design's comparisons.
fn compound_matrix(design: &DesignType) -> Vec<f64> {
    let d = design.comparisons.len();
    let mut c = vec![0.0; d * d];
    for (a, ca) in design.comparisons.iter().enumerate() {
        for (b, cb) in design.comparisons.iter().enumerate() {
            let mut dot = 0.0;
            for (p, q, sign) in [
                (&ca.treat_x, &cb.treat_x, 1.0),
                (&ca.treat_x, &cb.treat_y, -1.0),
                (&ca.treat_y, &cb.treat_x, -1.0),
                (&ca.treat_y, &cb.treat_y, 1.0),
            ] {
                if p == q {
                    dot += sign;
                }
            }
            c[a * d + b] = 0.5 * dot;
        }
    }
    c
}

/// Between-study covariance `Omega` of a study of this design.
pub fn design_heterogeneity_matrix(design: &DesignType, tau: f64) -> DMatrix<f64> {
    let d = design.comparisons.len();
    let c = compound_matrix(design);
    DMatrix::from_fn(d, d, |i, j| tau * tau * c[i * d + j])
}

/// Likelihood contribution of one published study.
#[derive(Clone, Debug)]
pub(crate) struct Block {
    pub(crate) design: usize,
    pub(crate) d: usize,
    /// Per comparison, up to two `(mu index, coefficient)` terms.
    pub(crate) rows: Vec<Vec<(usize, f64)>>,
    pub(crate) y: Vec<f64>,
    pub(crate) sigma: Vec<f64>,
    pub(crate) c: Vec<f64>,
    pub(crate) weight: f64,
}

impl Block {
    /// Mean of the study's outcome vector under basic contrasts `mu`.
    pub(crate) fn mean(&self, mu: &[f64], out: &mut [f64]) {
        for (a, row) in self.rows.iter().enumerate() {
            out[a] = row.iter().map(|&(j, coef)| coef * mu[j]).sum();
        }
    }

    /// Marginal covariance `Sigma + tau² C`.
    pub(crate) fn marginal(&self, tau: f64) -> Vec<f64> {
        let t2 = tau * tau;
        self.sigma.iter().zip(&self.c).map(|(s, c)| s + t2 * c).collect()
    }
}

struct BlockEval {
    /// `log|V| + rᵀ V⁻¹ r`
    deviance: f64,
    /// `V⁻¹ r`
    alpha: [f64; 8],
    /// `tr(V⁻¹ C) - αᵀ C α`
    tau_term: f64,
}

/// Dense inverse and log-determinant of a small SPD matrix via Cholesky.
fn spd_inverse(v: &[f64], d: usize) -> Option<(Vec<f64>, f64)> {
    match d {
        1 => {
            if v[0] <= 0.0 || !v[0].is_finite() {
                return None;
            }
            Some((vec![1.0 / v[0]], v[0].ln()))
        }
        2 => {
            let (p, q, r) = (v[0], v[1], v[3]);
            let det = p * r - q * q;
            if !(p > 0.0 && det > 0.0 && det.is_finite()) {
                return None;
            }
            Some((vec![r / det, -q / det, -q / det, p / det], det.ln()))
        }
        _ => {
            let m = DMatrix::from_row_slice(d, d, v);
            let chol = m.cholesky()?;
            let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            let inv = chol.inverse();
            Some((inv.transpose().as_slice().to_vec(), logdet))
        }
    }
}

fn eval_block(block: &Block, mu: &[f64], tau: f64) -> Option<BlockEval> {
    let d = block.d;
    debug_assert!(d <= 8, "designs with more than 9 arms are not supported");
    let v = block.marginal(tau);
    let (inv, logdet) = spd_inverse(&v, d)?;
    let mut mean = [0.0; 8];
    block.mean(mu, &mut mean[..d]);
    let mut r = [0.0; 8];
    for a in 0..d {
        r[a] = block.y[a] - mean[a];
    }
    let mut alpha = [0.0; 8];
    for a in 0..d {
        alpha[a] = (0..d).map(|b| inv[a * d + b] * r[b]).sum();
    }
    let quad: f64 = (0..d).map(|a| r[a] * alpha[a]).sum();
    let mut trace = 0.0;
    let mut aca = 0.0;
    for a in 0..d {
        for b in 0..d {
            trace += inv[a * d + b] * block.c[b * d + a];
            aca += alpha[a] * block.c[a * d + b] * alpha[b];
        }
    }
    Some(BlockEval {
        deviance: logdet + quad,
        alpha,
        tau_term: trace - aca,
    })
}

/// The (weighted) full-network log-likelihood as a function of the packed
/// parameter vector `[mu..., tau...]`.
#[derive(Clone, Debug)]
pub(crate) struct Likelihood {
    pub(crate) blocks: Vec<Block>,
    pub(crate) n_mu: usize,
    pub(crate) mode: TauMode,
    pub(crate) n_designs: usize,
    /// Design-specific taus with no published study to inform them.
    pub(crate) fixed_tau: Vec<bool>,
    pub(crate) reference: TreatmentId,
    pub(crate) treatments: Vec<TreatmentId>,
}

impl Likelihood {
    pub(crate) fn new(
        data: &NetworkDataset,
        reference: &TreatmentId,
        mode: TauMode,
        weights: Option<&[f64]>,
    ) -> Result<Self> {
        if !data.treatments().contains(reference) {
            return Err(Error::UnknownTreatment(reference.to_string()));
        }
        let treatments: Vec<TreatmentId> =
            data.treatments().iter().filter(|t| *t != reference).cloned().collect();
        let index_of = |t: &TreatmentId| treatments.iter().position(|x| x == t);
        let compounds: Vec<Vec<f64>> = data.designs().iter().map(compound_matrix).collect();
        let mut blocks = Vec::new();
        let published: Vec<_> = data.published().collect();
        if let Some(w) = weights {
            if w.len() != published.len() {
                return Err(Error::Config(format!(
                    "{} weights supplied for {} published studies",
                    w.len(),
                    published.len()
                )));
            }
            if w.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(Error::Config("weights must be positive and finite".into()));
            }
        }
        for (i, s) in published.iter().enumerate() {
            let sigma = s.covariance()?;
            let d = s.outcomes.len();
            let rows = s
                .outcomes
                .iter()
                .map(|o| {
                    let mut row = Vec::with_capacity(2);
                    if let Some(j) = index_of(&o.comparison.treat_x) {
                        row.push((j, 1.0));
                    }
                    if let Some(j) = index_of(&o.comparison.treat_y) {
                        row.push((j, -1.0));
                    }
                    row
                })
                .collect();
            blocks.push(Block {
                design: s.design - 1,
                d,
                rows,
                y: s.outcomes.iter().map(|o| o.y).collect(),
                sigma: sigma.transpose().as_slice().to_vec(),
                c: compounds[s.design - 1].clone(),
                weight: weights.map_or(1.0, |w| w[i]),
            });
        }
        let n_designs = data.designs().len();
        let fixed_tau = match mode {
            TauMode::Common => vec![false],
            TauMode::DesignSpecific => (0..n_designs)
                .map(|k| !blocks.iter().any(|b| b.design == k))
                .collect(),
        };
        Ok(Likelihood {
            blocks,
            n_mu: treatments.len(),
            mode,
            n_designs,
            fixed_tau,
            reference: reference.clone(),
            treatments,
        })
    }

    pub(crate) fn n_tau(&self) -> usize {
        match self.mode {
            TauMode::Common => 1,
            TauMode::DesignSpecific => self.n_designs,
        }
    }

    pub(crate) fn n_params(&self) -> usize {
        self.n_mu + self.n_tau()
    }

    fn tau_index(&self, design: usize) -> usize {
        match self.mode {
            TauMode::Common => 0,
            TauMode::DesignSpecific => design,
        }
    }

    /// Log-likelihood and, optionally, its gradient. `None` when some
    /// marginal covariance is not positive definite.
    pub(crate) fn eval(&self, theta: &[f64], grad: Option<&mut [f64]>) -> Option<f64> {
        let (mu, tau) = theta.split_at(self.n_mu);
        let mut total = 0.0;
        let want_grad = grad.is_some();
        let mut g_mu = vec![0.0; if want_grad { self.n_mu } else { 0 }];
        let mut s_tau = vec![0.0; if want_grad { tau.len() } else { 0 }];
        for b in &self.blocks {
            let t = self.tau_index(b.design);
            let e = eval_block(b, mu, tau[t])?;
            total += b.weight * e.deviance;
            if want_grad {
                for (a, row) in b.rows.iter().enumerate() {
                    for &(j, coef) in row {
                        g_mu[j] += b.weight * coef * e.alpha[a];
                    }
                }
                s_tau[t] += b.weight * e.tau_term;
            }
        }
        if let Some(g) = grad {
            g[..self.n_mu].copy_from_slice(&g_mu);
            for (k, s) in s_tau.iter().enumerate() {
                // d/dtau of -½ Σ w (...) with dV/dtau = 2 tau C
                g[self.n_mu + k] = -tau[k] * s;
            }
        }
        Some(-0.5 * total)
    }

    /// Score with respect to `tau²` for each tau parameter.
    pub(crate) fn variance_scores(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let (mu, tau) = theta.split_at(self.n_mu);
        let mut s = vec![0.0; tau.len()];
        for b in &self.blocks {
            let t = self.tau_index(b.design);
            let e = eval_block(b, mu, tau[t])?;
            s[t] += -0.5 * b.weight * e.tau_term;
        }
        Some(s)
    }

    /// Inverse-variance weighted means of the direct estimates of each basic
    /// contrast, 0 where no direct evidence exists.
    pub(crate) fn direct_means(&self) -> Vec<f64> {
        let mut num = vec![0.0; self.n_mu];
        let mut den = vec![0.0; self.n_mu];
        for b in &self.blocks {
            for (a, row) in b.rows.iter().enumerate() {
                if let [(j, coef)] = row.as_slice() {
                    let w = b.weight / b.sigma[a * b.d + a];
                    num[*j] += w * coef * b.y[a];
                    den[*j] += w;
                }
            }
        }
        num.iter().zip(&den).map(|(n, d)| if *d > 0.0 { n / d } else { 0.0 }).collect()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let mut lower = vec![f64::NEG_INFINITY; self.n_mu];
        let mut upper = vec![f64::INFINITY; self.n_mu];
        for &fixed in &self.fixed_tau {
            lower.push(0.0);
            upper.push(if fixed { 0.0 } else { f64::INFINITY });
        }
        (lower, upper)
    }

    fn unpack(&self, theta: &[f64]) -> ModelParams {
        ModelParams {
            reference: self.reference.clone(),
            treatments: self.treatments.clone(),
            mu: theta[..self.n_mu].to_vec(),
            tau: HeterogeneityStructure {
                mode: self.mode,
                values: theta[self.n_mu..].to_vec(),
            },
        }
    }

    /// Maximise from one start, then settle every tau that belongs on the
    /// zero boundary (and release any stuck there at a saddle).
    pub(crate) fn maximize_from(&self, start: &[f64]) -> Option<(Vec<f64>, f64, bool, usize)> {
        let (lower, upper) = self.bounds();
        let opts = optim::Options::default();
        let objective = |x: &[f64], g: &mut [f64]| match self.eval(x, Some(g)) {
            Some(v) => {
                g.iter_mut().for_each(|v| *v = -*v);
                -v
            }
            None => f64::NAN,
        };
        let mut theta = start.to_vec();
        for (k, &fixed) in self.fixed_tau.iter().enumerate() {
            if fixed {
                theta[self.n_mu + k] = 0.0;
            }
        }
        let mut n_evals = 0;
        let mut best: Option<(Vec<f64>, f64, bool)> = None;
        for round in 0..4 {
            let m = minimize_box(objective, &theta, &lower, &upper, &opts);
            n_evals += m.n_evals;
            if !m.value.is_finite() {
                break;
            }
            let value = -m.value;
            if let Some((_, bv, _)) = &best {
                // A snap or release that costs likelihood is undone.
                if value < bv - 1e-8 * bv.abs().max(1.0) {
                    break;
                }
            }
            best = Some((m.x.clone(), value, m.converged));
            if round == 3 {
                break;
            }
            theta = m.x;
            let scores = self.variance_scores(&theta)?;
            let mut changed = false;
            for k in 0..self.n_tau() {
                if self.fixed_tau[k] {
                    continue;
                }
                let j = self.n_mu + k;
                if theta[j] == 0.0 && scores[k] > 1e-10 {
                    // Zero is a saddle here: the likelihood rises with tau².
                    theta[j] = 0.05;
                    changed = true;
                } else if theta[j] > 0.0 && theta[j] < 1e-2 {
                    let mut cand = theta.clone();
                    cand[j] = 0.0;
                    let s0 = self.variance_scores(&cand)?;
                    if s0[k] <= 0.0 {
                        theta = cand;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        let (theta, _, converged) = best?;
        let value = self.eval(&theta, None)?;
        Some((theta, value, converged, n_evals))
    }

    pub(crate) fn default_starts(&self) -> Vec<Vec<f64>> {
        let direct = self.direct_means();
        let zero = vec![0.0; self.n_mu];
        let mut starts = Vec::with_capacity(5);
        for (mu, tau) in [
            (&direct, 0.01),
            (&direct, 0.1),
            (&direct, 0.3),
            (&zero, 0.1),
            (&zero, 0.3),
        ] {
            let mut s = mu.clone();
            s.extend(std::iter::repeat_n(tau, self.n_tau()));
            starts.push(s);
        }
        starts
    }

    /// Multi-start maximisation followed by Wald inference.
    pub(crate) fn fit(&self, starts: &[Vec<f64>]) -> Result<FitResult> {
        let (theta, loglik, n_evals) = self.fit_point(starts)?;
        Ok(self.finish(theta, loglik, n_evals))
    }

    /// Multi-start maximisation only: `(theta, loglik, evaluations)`.
    pub(crate) fn fit_point(&self, starts: &[Vec<f64>]) -> Result<(Vec<f64>, f64, usize)> {
        let mut best: Option<(Vec<f64>, f64, bool)> = None;
        let mut n_evals = 0;
        for start in starts {
            let Some((theta, value, converged, evals)) = self.maximize_from(start) else {
                continue;
            };
            n_evals += evals;
            let better = match &best {
                None => true,
                Some((_, v, c)) => (converged && !c) || (converged == *c && value > *v),
            };
            if better {
                best = Some((theta, value, converged));
            }
        }
        let (theta, loglik, converged) =
            best.ok_or_else(|| Error::NonConvergence("no start produced a finite likelihood".into()))?;
        if !converged {
            return Err(Error::NonConvergence(format!(
                "no start converged after {} restarts",
                starts.len()
            )));
        }
        Ok((theta, loglik, n_evals))
    }

    /// Numerical Hessian of the log-likelihood from central differences of
    /// the analytic gradient, restricted to the free parameters.
    pub(crate) fn hessian(&self, theta: &[f64], free: &[usize]) -> Option<DMatrix<f64>> {
        let p = self.n_params();
        let m = free.len();
        let mut h = DMatrix::zeros(m, m);
        let mut gp = vec![0.0; p];
        let mut gm = vec![0.0; p];
        for (col, &j) in free.iter().enumerate() {
            let step = 1e-5 * theta[j].abs().max(1.0);
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[j] += step;
            tm[j] -= step;
            // tau enters only through tau², so the reflection below zero is
            // a valid evaluation point.
            self.eval(&tp, Some(&mut gp))?;
            self.eval(&tm, Some(&mut gm))?;
            for (row, &i) in free.iter().enumerate() {
                h[(row, col)] = (gp[i] - gm[i]) / (2.0 * step);
            }
        }
        Some((&h + h.transpose()) * 0.5)
    }

    pub(crate) fn finish(&self, theta: Vec<f64>, loglik: f64, n_evals: usize) -> FitResult {
        let p = self.n_params();
        let mut warnings = Vec::new();
        let free: Vec<usize> = (0..p)
            .filter(|&j| j < self.n_mu || !self.fixed_tau[j - self.n_mu])
            .collect();
        for (k, &fixed) in self.fixed_tau.iter().enumerate() {
            if fixed {
                warnings.push(format!("design {} has no published study; tau fixed at 0", k + 1));
            }
        }
        let mut se = vec![None; p];
        let mut mu_cov = None;
        let invert = |idx: &[usize]| -> Option<DMatrix<f64>> {
            let h = self.hessian(&theta, idx)?;
            let info = -h;
            let chol = info.cholesky()?;
            Some(chol.inverse())
        };
        match invert(&free) {
            Some(cov) => {
                for (a, &j) in free.iter().enumerate() {
                    se[j] = Some(cov[(a, a)].max(0.0).sqrt());
                }
                mu_cov = Some(cov.view((0, 0), (self.n_mu, self.n_mu)).into_owned());
            }
            None => {
                let mu_idx: Vec<usize> = (0..self.n_mu).collect();
                match invert(&mu_idx) {
                    Some(cov) => {
                        warnings.push("observed information singular in tau; tau intervals unavailable".into());
                        for j in 0..self.n_mu {
                            se[j] = Some(cov[(j, j)].max(0.0).sqrt());
                        }
                        mu_cov = Some(cov);
                    }
                    None => warnings.push("observed information singular; Wald intervals unavailable".into()),
                }
            }
        }
        let ci = (0..p)
            .map(|j| {
                se[j].map(|s| {
                    let (lo, hi) = (theta[j] - Z_975 * s, theta[j] + Z_975 * s);
                    if j >= self.n_mu {
                        (lo.max(0.0), hi)
                    } else {
                        (lo, hi)
                    }
                })
            })
            .collect();
        FitResult {
            params: self.unpack(&theta),
            loglik,
            se,
            ci,
            mu_covariance: mu_cov,
            converged: true,
            n_evals,
            warnings,
        }
    }
}

/// Full-network log-likelihood (2π constant omitted), summed over published
/// studies with optional per-study weights in published-study order.
pub fn log_likelihood(data: &NetworkDataset, params: &ModelParams, weights: Option<&[f64]>) -> Result<f64> {
    let lik = Likelihood::new(data, &params.reference, params.tau.mode, weights)?;
    check_layout(&lik, params)?;
    let theta = params.to_vector();
    lik.eval(&theta, None).ok_or_else(|| singular_study(data, &lik, &theta))
}

/// Gradient of [`log_likelihood`] with respect to `[mu..., tau...]`.
pub fn log_likelihood_gradient(
    data: &NetworkDataset,
    params: &ModelParams,
    weights: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let lik = Likelihood::new(data, &params.reference, params.tau.mode, weights)?;
    check_layout(&lik, params)?;
    let theta = params.to_vector();
    let mut g = vec![0.0; theta.len()];
    lik.eval(&theta, Some(&mut g))
        .ok_or_else(|| singular_study(data, &lik, &theta))?;
    Ok(g)
}

fn check_layout(lik: &Likelihood, params: &ModelParams) -> Result<()> {
    if params.treatments != lik.treatments {
        return Err(Error::Config("parameter treatments do not match the dataset".into()));
    }
    if params.tau.values.len() != lik.n_tau() {
        return Err(Error::Config(format!(
            "expected {} tau value(s), got {}",
            lik.n_tau(),
            params.tau.values.len()
        )));
    }
    if params.tau.values.iter().any(|t| *t < 0.0) {
        return Err(Error::Config("tau must be non-negative".into()));
    }
    Ok(())
}

fn singular_study(data: &NetworkDataset, lik: &Likelihood, theta: &[f64]) -> Error {
    let (mu, tau) = theta.split_at(lik.n_mu);
    let ids: Vec<&str> = data.published().map(|s| s.study_id.as_str()).collect();
    for (b, id) in lik.blocks.iter().zip(ids) {
        if eval_block(b, mu, tau[lik.tau_index(b.design)]).is_none() {
            return Error::SingularCovariance(id.to_string());
        }
    }
    Error::SingularCovariance("<unknown>".into())
}

/// Maximum-likelihood fit of the random-effects model to the published
/// studies, using the dataset's default reference treatment.
pub fn fit_mre(data: &NetworkDataset, mode: TauMode) -> Result<FitResult> {
    fit_weighted(data, &data.default_reference(), mode, None)
}

/// Weighted maximum-likelihood fit; `weights` are per published study.
pub fn fit_weighted(
    data: &NetworkDataset,
    reference: &TreatmentId,
    mode: TauMode,
    weights: Option<&[f64]>,
) -> Result<FitResult> {
    let lik = Likelihood::new(data, reference, mode, weights)?;
    let starts = lik.default_starts();
    lik.fit(&starts)
}

/// Contrast `x` versus `y` by consistency, with a delta-method standard error.
pub fn derived_contrast(result: &FitResult, x: &TreatmentId, y: &TreatmentId) -> Result<Contrast> {
    let p = &result.params;
    let mx = p.mu_of(x).ok_or_else(|| Error::UnknownTreatment(x.to_string()))?;
    let my = p.mu_of(y).ok_or_else(|| Error::UnknownTreatment(y.to_string()))?;
    if x == y {
        return Ok(Contrast {
            estimate: 0.0,
            se: Some(0.0),
        });
    }
    let mut coef = vec![0.0; p.mu.len()];
    if let Some(i) = p.treatments.iter().position(|t| t == x) {
        coef[i] += 1.0;
    }
    if let Some(i) = p.treatments.iter().position(|t| t == y) {
        coef[i] -= 1.0;
    }
    let se = result.mu_covariance.as_ref().map(|cov| {
        let mut v = 0.0;
        for i in 0..coef.len() {
            for j in 0..coef.len() {
                v += coef[i] * cov[(i, j)] * coef[j];
            }
        }
        v.max(0.0).sqrt()
    });
    Ok(Contrast {
        estimate: mx - my,
        se,
    })
}
