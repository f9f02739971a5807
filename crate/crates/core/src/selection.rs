//! Publication-probability models and the registry-calibrated estimating
//! equations that identify them.
//!
//! A published study's chance of publication is `π = F(η)` with
//! `η = β0(k) + β1(k)·t*`, `F` the logistic or normal CDF, and `t*` the
//! study's extreme t-statistic. Given every registered study (published or
//! not) the parameters solve
//!
//! ```text
//! U(β) = Σ_i {1 − Z_i / π_i(β)} g(n_i) = 0
//! ```

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::data::{Direction, NetworkDataset};
use crate::error::{Error, Result};

const PI_FLOOR: f64 = 1e-10;
/// Required `‖U(β̂)‖∞`.
pub const RESIDUAL_TOL: f64 = 1e-8;
const CONDITION_WARN: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Logistic,
    Probit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// One intercept and one slope shared by all designs.
    Common,
    /// One intercept per design and a shared slope.
    DesignIntercept,
    /// Intercept and slope per design.
    Separate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectionSpec {
    pub family: Family,
    pub structure: Structure,
    pub direction: Direction,
}

impl SelectionSpec {
    pub fn new(family: Family, structure: Structure) -> Self {
        SelectionSpec {
            family,
            structure,
            direction: Direction::Higher,
        }
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    /// Every family/structure combination, in CLI token order.
    pub fn all() -> [SelectionSpec; 6] {
        use Family::*;
        use Structure::*;
        [
            SelectionSpec::new(Logistic, Common),
            SelectionSpec::new(Probit, Common),
            SelectionSpec::new(Logistic, DesignIntercept),
            SelectionSpec::new(Probit, DesignIntercept),
            SelectionSpec::new(Logistic, Separate),
            SelectionSpec::new(Probit, Separate),
        ]
    }

    pub fn token(&self) -> &'static str {
        match (self.family, self.structure) {
            (Family::Logistic, Structure::Common) => "logit2",
            (Family::Probit, Structure::Common) => "probit2",
            (Family::Logistic, Structure::DesignIntercept) => "logitK1",
            (Family::Probit, Structure::DesignIntercept) => "probitK1",
            (Family::Logistic, Structure::Separate) => "logit2K",
            (Family::Probit, Structure::Separate) => "probit2K",
        }
    }

    pub fn n_params(&self, n_designs: usize) -> usize {
        match self.structure {
            Structure::Common => 2,
            Structure::DesignIntercept => n_designs + 1,
            Structure::Separate => 2 * n_designs,
        }
    }

    /// `F(η)`, strictly inside (0, 1) for finite `η`.
    pub fn link(&self, eta: f64) -> f64 {
        match self.family {
            Family::Logistic => 1.0 / (1.0 + (-eta).exp()),
            Family::Probit => normal_cdf(eta),
        }
    }

    /// `1 − 1/F(η)` without cancellation, with `F` floored at 1e-10.
    fn one_minus_inverse(&self, eta: f64) -> f64 {
        let p = self.link(eta);
        if p < PI_FLOOR {
            return 1.0 - 1.0 / PI_FLOOR;
        }
        match self.family {
            Family::Logistic => -(-eta).exp(),
            Family::Probit => -normal_sf(eta) / p,
        }
    }
}

impl FromStr for SelectionSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        SelectionSpec::all()
            .into_iter()
            .find(|spec| spec.token() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown selection model '{s}' (expected logit2, probit2, logitK1, probitK1, logit2K or probit2K)"
                ))
            })
    }
}

impl fmt::Display for SelectionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / std::f64::consts::SQRT_2)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub structure: Structure,
    /// common: (β0, β1); design intercept: (β01..β0K, β1);
    /// separate: (β0k, β1k) for each design in turn.
    pub beta: Vec<f64>,
    /// Designs (0-based) whose studies are all published under the separate
    /// structure; their publication probability is fixed at 1.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub saturated: Vec<usize>,
}

impl SelectionParams {
    pub fn new(structure: Structure, beta: Vec<f64>) -> Self {
        SelectionParams {
            structure,
            beta,
            saturated: Vec::new(),
        }
    }

    /// `(intercept, slope)` for design `k` (1-based).
    pub fn coefficients(&self, k: usize) -> (f64, f64) {
        match self.structure {
            Structure::Common => (self.beta[0], self.beta[1]),
            Structure::DesignIntercept => (self.beta[k - 1], self.beta[self.beta.len() - 1]),
            Structure::Separate => (self.beta[2 * (k - 1)], self.beta[2 * (k - 1) + 1]),
        }
    }
}

/// Publication probability of a study of design `k` (1-based) with
/// statistic `t_star`.
pub fn publish_probability(spec: &SelectionSpec, params: &SelectionParams, k: usize, t_star: f64) -> f64 {
    if params.saturated.contains(&(k - 1)) {
        return 1.0;
    }
    let (b0, b1) = params.coefficients(k);
    spec.link(b0 + b1 * t_star)
}

type CustomBasis = Arc<dyn Fn(f64, usize) -> Vec<f64> + Send + Sync>;

/// The moment function `g(n)` of the estimating equations.
#[derive(Clone)]
pub enum MomentFunction {
    /// `(1, n^½, n, …, n^{(m−1)/2})`.
    Powers(usize),
    /// `(1, √n)` placed in the block of the study's design, zeros elsewhere.
    PerDesign { n_designs: usize },
    /// User basis: `(n, design index 0-based) ↦ g`, of a fixed dimension.
    Custom { dim: usize, f: CustomBasis },
}

impl fmt::Debug for MomentFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MomentFunction::Powers(m) => write!(f, "Powers({m})"),
            MomentFunction::PerDesign { n_designs } => write!(f, "PerDesign({n_designs})"),
            MomentFunction::Custom { dim, .. } => write!(f, "Custom(dim={dim})"),
        }
    }
}

impl MomentFunction {
    pub fn dim(&self) -> usize {
        match self {
            MomentFunction::Powers(m) => *m,
            MomentFunction::PerDesign { n_designs } => 2 * n_designs,
            MomentFunction::Custom { dim, .. } => *dim,
        }
    }

    /// `g(n)` for a study of design `design` (0-based).
    pub fn eval(&self, n: f64, design: usize) -> Vec<f64> {
        match self {
            MomentFunction::Powers(m) => {
                let r = n.sqrt();
                let mut out = Vec::with_capacity(*m);
                let mut v = 1.0;
                for _ in 0..*m {
                    out.push(v);
                    v *= r;
                }
                out
            }
            MomentFunction::PerDesign { n_designs } => {
                let mut out = vec![0.0; 2 * n_designs];
                out[2 * design] = 1.0;
                out[2 * design + 1] = n.sqrt();
                out
            }
            MomentFunction::Custom { f, .. } => f(n, design),
        }
    }
}

pub fn default_moment_function(spec: &SelectionSpec, n_designs: usize) -> MomentFunction {
    match spec.structure {
        Structure::Common => MomentFunction::Powers(2),
        Structure::DesignIntercept => MomentFunction::Powers(n_designs + 1),
        Structure::Separate => MomentFunction::PerDesign { n_designs },
    }
}

/// One registered study as seen by the estimating equations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Unit {
    /// 0-based design index.
    pub(crate) design: usize,
    pub(crate) n: f64,
    /// `Some(t*)` if published.
    pub(crate) t: Option<f64>,
}

pub(crate) fn units(data: &NetworkDataset, direction: Direction) -> Result<Vec<Unit>> {
    data.studies()
        .iter()
        .map(|s| {
            Ok(Unit {
                design: s.design - 1,
                n: s.n_planned as f64,
                t: if s.published { Some(s.t_statistic(direction)?) } else { None },
            })
        })
        .collect()
}

/// Neumaier-compensated accumulator.
#[derive(Clone, Copy, Default)]
struct Sum {
    s: f64,
    c: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.s + x;
        if self.s.abs() >= x.abs() {
            self.c += (self.s - t) + x;
        } else {
            self.c += (x - t) + self.s;
        }
        self.s = t;
    }

    fn value(self) -> f64 {
        self.s + self.c
    }
}

/// Precomputed `g(n)` rows so the equations are cheap to re-evaluate.
struct System<'a> {
    spec: SelectionSpec,
    units: &'a [Unit],
    g: Vec<Vec<f64>>,
    /// Row transform applied to the equations before solving.
    shift: Vec<f64>,
    scale: Vec<f64>,
    dim: usize,
}

impl<'a> System<'a> {
    fn new(spec: SelectionSpec, units: &'a [Unit], g: &MomentFunction, standardize: bool) -> Self {
        let rows: Vec<Vec<f64>> = units.iter().map(|u| g.eval(u.n, u.design)).collect();
        let dim = g.dim();
        let mut shift = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        if standardize && !rows.is_empty() {
            let m = rows.len() as f64;
            for j in 1..dim {
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / m;
                let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / m;
                if var > 0.0 {
                    shift[j] = mean;
                    scale[j] = var.sqrt();
                }
            }
        }
        System {
            spec,
            units,
            g: rows,
            shift,
            scale,
            dim,
        }
    }

    fn raw(&self, params: &SelectionParams) -> Vec<f64> {
        let mut sums = vec![Sum::default(); self.dim];
        for (u, g) in self.units.iter().zip(&self.g) {
            let w = match u.t {
                None => 1.0,
                Some(_) if params.saturated.contains(&u.design) => 0.0,
                Some(t) => {
                    let (b0, b1) = params.coefficients(u.design + 1);
                    self.spec.one_minus_inverse(b0 + b1 * t)
                }
            };
            for (s, gj) in sums.iter_mut().zip(g) {
                s.add(w * gj);
            }
        }
        sums.into_iter().map(Sum::value).collect()
    }

    /// `A U` where `A` maps each `g` row to its standardized version:
    /// component 0 is kept, component `j ≥ 1` becomes `(g_j − m_j g_0)/s_j`.
    fn transformed(&self, raw: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|j| {
                if j == 0 {
                    raw[0]
                } else {
                    (raw[j] - self.shift[j] * raw[0]) / self.scale[j]
                }
            })
            .collect()
    }
}

/// What to return when the equations have no exact root.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RootPolicy {
    /// Fail with [`Error::NoRoot`].
    #[default]
    Exact,
    /// Fall back to the minimiser of the squared (standardized) residual,
    /// with coefficients bounded by ±40, and flag it in the diagnostics.
    LeastSquares,
}

/// Bound on every coefficient in the least-squares fallback; at ±40 the
/// probability is within 1e-17 of its limit.
const BETA_BOUND: f64 = 40.0;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    /// Whether `β̂` is a root to tolerance rather than a least-squares fallback.
    pub exact: bool,
    /// `‖U(β̂)‖∞` on the raw equations.
    pub residual: f64,
    pub iterations: usize,
    /// 2-norm condition number of the Jacobian of the system actually solved.
    pub condition: f64,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionFit {
    pub spec: SelectionSpec,
    pub params: SelectionParams,
    pub diagnostics: SolveDiagnostics,
}

impl SelectionFit {
    /// `π̂` for every published study, in published order.
    pub fn published_probabilities(&self, data: &NetworkDataset) -> Result<Vec<f64>> {
        data.published()
            .map(|s| {
                Ok(publish_probability(
                    &self.spec,
                    &self.params,
                    s.design,
                    s.t_statistic(self.spec.direction)?,
                ))
            })
            .collect()
    }
}

/// `U(β)` summed over all registered studies.
pub fn estimating_equation(
    data: &NetworkDataset,
    spec: &SelectionSpec,
    params: &SelectionParams,
    g: &MomentFunction,
) -> Result<Vec<f64>> {
    let units = units(data, spec.direction)?;
    check_dims(spec, params, g, data.designs().len())?;
    Ok(System::new(*spec, &units, g, false).raw(params))
}

fn check_dims(spec: &SelectionSpec, params: &SelectionParams, g: &MomentFunction, k: usize) -> Result<()> {
    let p = spec.n_params(k);
    if params.beta.len() != p || params.structure != spec.structure {
        return Err(Error::Config(format!(
            "{} expects {p} parameters, got {}",
            spec.token(),
            params.beta.len()
        )));
    }
    if g.dim() != p {
        return Err(Error::Config(format!("moment function has dimension {}, need {p}", g.dim())));
    }
    Ok(())
}

/// Solve the estimating equations with the default moment function.
pub fn solve_selection(data: &NetworkDataset, spec: &SelectionSpec) -> Result<SelectionFit> {
    let g = default_moment_function(spec, data.designs().len());
    solve_selection_with(data, spec, &g)
}

pub fn solve_selection_with(data: &NetworkDataset, spec: &SelectionSpec, g: &MomentFunction) -> Result<SelectionFit> {
    solve_selection_policy(data, spec, g, RootPolicy::Exact)
}

pub fn solve_selection_policy(
    data: &NetworkDataset,
    spec: &SelectionSpec,
    g: &MomentFunction,
    policy: RootPolicy,
) -> Result<SelectionFit> {
    let units = units(data, spec.direction)?;
    solve_units(spec, data.designs().len(), &units, g, None, policy)
}

/// Solver entry shared with the bootstrap, which swaps in resampled `t*`.
pub(crate) fn solve_units(
    spec: &SelectionSpec,
    n_designs: usize,
    units: &[Unit],
    g: &MomentFunction,
    warm: Option<&SelectionParams>,
    policy: RootPolicy,
) -> Result<SelectionFit> {
    let p = spec.n_params(n_designs);
    if g.dim() != p {
        return Err(Error::Config(format!("moment function has dimension {}, need {p}", g.dim())));
    }
    if units.iter().all(|u| u.t.is_some()) {
        return Err(Error::AllPublished);
    }
    if spec.structure == Structure::Separate && matches!(g, MomentFunction::PerDesign { .. }) {
        return solve_separate(spec, n_designs, units, warm, policy);
    }
    let standardize = spec.structure == Structure::DesignIntercept;
    let starts = match warm {
        // Resampled problems sit close to the original one.
        Some(w) if policy == RootPolicy::LeastSquares => vec![w.beta.clone()],
        _ => start_grid(spec, n_designs, warm.map(|w| w.beta.as_slice())),
    };
    let system = System::new(*spec, units, g, standardize);
    let (beta, diagnostics) = solve_system(&system, spec.structure, &starts, policy)?;
    Ok(SelectionFit {
        spec: *spec,
        params: SelectionParams::new(spec.structure, beta),
        diagnostics,
    })
}

/// Each design's two equations involve only its own parameters, so the
/// stacked system splits into `K` independent 2×2 problems.
fn solve_separate(
    spec: &SelectionSpec,
    n_designs: usize,
    units: &[Unit],
    warm: Option<&SelectionParams>,
    policy: RootPolicy,
) -> Result<SelectionFit> {
    let mut beta = vec![0.0; 2 * n_designs];
    let mut saturated = Vec::new();
    let mut diag = SolveDiagnostics {
        exact: true,
        condition: 1.0,
        ..Default::default()
    };
    let common = SelectionSpec {
        structure: Structure::Common,
        ..*spec
    };
    for k in 0..n_designs {
        let sub: Vec<Unit> = units
            .iter()
            .filter(|u| u.design == k)
            .map(|u| Unit { design: 0, ..*u })
            .collect();
        if sub.iter().all(|u| u.t.is_some()) {
            saturated.push(k);
            diag.warnings.push(format!(
                "design {} has no unpublished study; publication probability fixed at 1",
                k + 1
            ));
            continue;
        }
        if sub.iter().all(|u| u.t.is_none()) {
            diag.warnings.push(format!(
                "design {} has no published study; its selection parameters are not identified",
                k + 1
            ));
            continue;
        }
        let warm_k = warm.map(|w| vec![w.beta[2 * k], w.beta[2 * k + 1]]);
        let starts = match warm_k {
            Some(w) if policy == RootPolicy::LeastSquares && !warm.is_some_and(|w| w.saturated.contains(&k)) => vec![w],
            _ => start_grid(&common, 1, warm_k.as_deref()),
        };
        let system = System::new(common, &sub, &MomentFunction::Powers(2), false);
        let (b, d) = solve_system(&system, Structure::Common, &starts, policy)
            .map_err(|e| Error::NoRoot(format!("design {}: {e}", k + 1)))?;
        diag.exact &= d.exact;
        beta[2 * k] = b[0];
        beta[2 * k + 1] = b[1];
        diag.residual = diag.residual.max(d.residual);
        diag.iterations += d.iterations;
        diag.condition = diag.condition.max(d.condition);
        diag.warnings.extend(d.warnings.into_iter().map(|w| format!("design {}: {w}", k + 1)));
    }
    Ok(SelectionFit {
        spec: *spec,
        params: SelectionParams {
            structure: Structure::Separate,
            beta,
            saturated,
        },
        diagnostics: diag,
    })
}

fn start_grid(spec: &SelectionSpec, n_designs: usize, warm: Option<&[f64]>) -> Vec<Vec<f64>> {
    let mut starts = Vec::new();
    if let Some(w) = warm {
        starts.push(w.to_vec());
    }
    for b0 in [-1.0, 0.0, 1.0] {
        for b1 in [0.0, 0.5, 1.0] {
            let beta = match spec.structure {
                Structure::Common => vec![b0, b1],
                Structure::DesignIntercept => {
                    let mut v = vec![b0; n_designs];
                    v.push(b1);
                    v
                }
                Structure::Separate => (0..n_designs).flat_map(|_| [b0, b1]).collect(),
            };
            starts.push(beta);
        }
    }
    starts
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn two_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Damped Newton with a central-difference Jacobian, from each start in
/// turn until one reaches the residual tolerance.
fn solve_system(
    system: &System<'_>,
    structure: Structure,
    starts: &[Vec<f64>],
    policy: RootPolicy,
) -> Result<(Vec<f64>, SolveDiagnostics)> {
    let make = |b: &[f64]| SelectionParams::new(structure, b.to_vec());
    let eval = |b: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let raw = system.raw(&make(b));
        let f = system.transformed(&raw);
        (raw, f)
    };
    let jacobian = |b: &[f64]| -> DMatrix<f64> {
        let p = b.len();
        let mut j = DMatrix::zeros(p, p);
        let mut x = b.to_vec();
        for c in 0..p {
            let h = 1e-6 * b[c].abs().max(1.0);
            x[c] = b[c] + h;
            let (_, fp) = eval(&x);
            x[c] = b[c] - h;
            let (_, fm) = eval(&x);
            x[c] = b[c];
            for r in 0..p {
                j[(r, c)] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
        j
    };

    let mut total_iter = 0;
    let mut best: Option<(Vec<f64>, f64)> = None;
    for start in starts {
        let mut beta = start.clone();
        let (mut raw, mut f) = eval(&beta);
        let mut converged = false;
        for _ in 0..100 {
            if !raw.iter().all(|x| x.is_finite()) {
                break;
            }
            if inf_norm(&raw) < RESIDUAL_TOL {
                converged = true;
                break;
            }
            total_iter += 1;
            let Some(step) = newton_step(&jacobian(&beta), &f) else {
                break;
            };
            let f_norm = two_norm(&f);
            let mut lambda = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + lambda * s).collect();
                let (r2, f2) = eval(&trial);
                let n2 = two_norm(&f2);
                if n2.is_finite() && n2 < (1.0 - 1e-4 * lambda) * f_norm {
                    beta = trial;
                    raw = r2;
                    f = f2;
                    accepted = true;
                    break;
                }
                lambda *= 0.5;
            }
            if !accepted || beta.iter().any(|b| b.abs() > 1e3) {
                break;
            }
        }
        if converged {
            // A few extra steps while they still shrink the raw residual.
            for _ in 0..3 {
                let Some(step) = newton_step(&jacobian(&beta), &f) else {
                    break;
                };
                let trial: Vec<f64> = beta.iter().zip(&step).map(|(b, s)| b + s).collect();
                let (r2, f2) = eval(&trial);
                if inf_norm(&r2) < inf_norm(&raw) {
                    beta = trial;
                    raw = r2;
                    f = f2;
                    total_iter += 1;
                } else {
                    break;
                }
            }
            let condition = condition_number(&jacobian(&beta));
            let mut warnings = Vec::new();
            if condition > CONDITION_WARN {
                warnings.push(format!("Jacobian is ill-conditioned (condition {condition:.3e})"));
            }
            return Ok((
                beta,
                SolveDiagnostics {
                    exact: true,
                    residual: inf_norm(&raw),
                    iterations: total_iter,
                    condition,
                    warnings,
                },
            ));
        }
        let r = inf_norm(&raw);
        if r.is_finite() && best.as_ref().is_none_or(|(_, b)| r < *b) {
            best = Some((beta, r));
        }
    }
    if policy == RootPolicy::LeastSquares {
        if let Some((beta, iterations)) = least_squares(&eval, &jacobian, starts) {
            let (raw, _) = eval(&beta);
            let residual = inf_norm(&raw);
            let condition = condition_number(&jacobian(&beta));
            let warnings = vec![format!(
                "estimating equations have no exact root; using the least-squares solution (residual {residual:.3e})"
            )];
            return Ok((
                beta,
                SolveDiagnostics {
                    exact: false,
                    residual,
                    iterations: total_iter + iterations,
                    condition,
                    warnings,
                },
            ));
        }
    }
    let detail = best.map_or("no finite residual".to_string(), |(b, r)| {
        format!("best residual {r:.3e} at beta = {b:?}")
    });
    Err(Error::NoRoot(format!("{} starts exhausted; {detail}", starts.len())))
}

/// Bounded Levenberg-Marquardt on `½‖F(β)‖²` from every start; returns the
/// best end point and the iterations spent.
fn least_squares<E, J>(eval: &E, jacobian: &J, starts: &[Vec<f64>]) -> Option<(Vec<f64>, usize)>
where
    E: Fn(&[f64]) -> (Vec<f64>, Vec<f64>),
    J: Fn(&[f64]) -> DMatrix<f64>,
{
    let clamp = |b: &mut [f64]| b.iter_mut().for_each(|x| *x = x.clamp(-BETA_BOUND, BETA_BOUND));
    let cost_of = |f: &[f64]| 0.5 * f.iter().map(|x| x * x).sum::<f64>();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut iterations = 0;
    for start in starts {
        let mut beta = start.clone();
        clamp(&mut beta);
        let (_, mut f) = eval(&beta);
        let mut cost = cost_of(&f);
        if !cost.is_finite() {
            continue;
        }
        let mut lambda = 1e-3;
        for _ in 0..200 {
            iterations += 1;
            let j = jacobian(&beta);
            let fv = DVector::from_column_slice(&f);
            let jtj = j.transpose() * &j;
            let jtf = j.transpose() * fv;
            if jtf.amax() <= 1e-13 * cost.max(1e-300).sqrt() {
                break;
            }
            let mut accepted = false;
            while lambda < 1e12 {
                let mut a = jtj.clone();
                for i in 0..a.nrows() {
                    a[(i, i)] += lambda * jtj[(i, i)].max(1e-12);
                }
                let Some(step) = a.lu().solve(&(-&jtf)) else {
                    lambda *= 4.0;
                    continue;
                };
                let mut trial: Vec<f64> = beta.iter().zip(step.iter()).map(|(b, s)| b + s).collect();
                clamp(&mut trial);
                let (_, f2) = eval(&trial);
                let c2 = cost_of(&f2);
                if c2.is_finite() && c2 < cost {
                    let gain = cost - c2;
                    beta = trial;
                    f = f2;
                    cost = c2;
                    lambda = (lambda / 3.0).max(1e-12);
                    accepted = gain > 1e-14 * cost.max(1e-300);
                    break;
                }
                lambda *= 4.0;
            }
            if !accepted {
                break;
            }
        }
        if best.as_ref().is_none_or(|(_, c)| cost < *c) {
            best = Some((beta, cost));
        }
    }
    best.map(|(b, _)| (b, iterations))
}

fn newton_step(j: &DMatrix<f64>, f: &[f64]) -> Option<Vec<f64>> {
    let rhs = -DVector::from_column_slice(f);
    let step = j.clone().lu().solve(&rhs)?;
    step.iter().all(|x| x.is_finite()).then(|| step.iter().copied().collect())
}

fn condition_number(j: &DMatrix<f64>) -> f64 {
    let sv = j.singular_values();
    let max = sv.iter().fold(0.0f64, |m, v| m.max(*v));
    let min = sv.iter().fold(f64::INFINITY, |m, v| m.min(*v));
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}
