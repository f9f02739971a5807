//! Comparison-adjusted funnel plot data with registry overlays, and Egger's
//! regression test for funnel asymmetry.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::NetworkDataset;
use crate::error::{Error, Result};
use crate::model::{derived_contrast, FitResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunnelPoint {
    pub study_id: String,
    pub design: String,
    pub comparison: String,
    /// Effect minus the fitted summary of its comparison.
    pub centered: f64,
    pub se: f64,
    pub precision: f64,
}

/// Horizontal line for an unpublished study at `√n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunnelOverlay {
    pub study_id: String,
    pub design: String,
    pub height: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunnelData {
    pub points: Vec<FunnelPoint>,
    pub overlays: Vec<FunnelOverlay>,
}

pub fn funnel_data(data: &NetworkDataset, fit: &FitResult) -> Result<FunnelData> {
    let mut points = Vec::new();
    for s in data.published() {
        let design = data.design(s.design).label();
        for o in &s.outcomes {
            let summary = derived_contrast(fit, &o.comparison.treat_x, &o.comparison.treat_y)?;
            points.push(FunnelPoint {
                study_id: s.study_id.clone(),
                design: design.clone(),
                comparison: o.comparison.to_string(),
                centered: o.y - summary.estimate,
                se: o.se,
                precision: 1.0 / o.se,
            });
        }
    }
    let overlays = data
        .unpublished()
        .map(|s| FunnelOverlay {
            study_id: s.study_id.clone(),
            design: data.design(s.design).label(),
            height: (s.n_planned as f64).sqrt(),
        })
        .collect();
    Ok(FunnelData { points, overlays })
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl FunnelData {
    /// `funnel-v1` CSV: one row per point and per overlay line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,study_id,design,comparison,centered_effect,se,precision,height\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "point,{},{},{},{},{},{},",
                csv_field(&p.study_id),
                csv_field(&p.design),
                csv_field(&p.comparison),
                p.centered,
                p.se,
                p.precision
            );
        }
        for o in &self.overlays {
            let _ = writeln!(
                out,
                "overlay,{},{},,,,,{}",
                csv_field(&o.study_id),
                csv_field(&o.design),
                o.height
            );
        }
        out
    }

    /// Static scatter of centered effect against precision, colored by
    /// design, with dashed lines at the registry heights.
    pub fn to_svg(&self) -> String {
        const W: f64 = 640.0;
        const H: f64 = 480.0;
        const M: f64 = 50.0;
        const PALETTE: [&str; 8] = [
            "#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666",
        ];
        let xmax = self
            .points
            .iter()
            .map(|p| p.centered.abs())
            .fold(0.0f64, f64::max)
            .max(1e-9)
            * 1.1;
        let ymax = self
            .points
            .iter()
            .map(|p| p.precision)
            .chain(self.overlays.iter().map(|o| o.height))
            .fold(0.0f64, f64::max)
            .max(1e-9)
            * 1.05;
        let sx = |x: f64| M + (x + xmax) / (2.0 * xmax) * (W - 2.0 * M);
        let sy = |y: f64| H - M - y / ymax * (H - 2.0 * M);
        let mut designs: Vec<&str> = self
            .points
            .iter()
            .map(|p| p.design.as_str())
            .chain(self.overlays.iter().map(|o| o.design.as_str()))
            .collect();
        designs.sort();
        designs.dedup();
        let color = |d: &str| PALETTE[designs.iter().position(|x| *x == d).unwrap_or(0) % PALETTE.len()];

        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<line x1="{M}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/>"#,
            y = H - M,
            x2 = W - M
        );
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="{M}" x2="{x}" y2="{y2}" stroke="black" stroke-dasharray="2,2"/>"#,
            x = sx(0.0),
            y2 = H - M
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">effect minus comparison summary</text>"#,
            W / 2.0,
            H - 12.0
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})">precision (1/se)</text>"#,
            H / 2.0,
            H / 2.0
        );
        for o in &self.overlays {
            let _ = writeln!(
                s,
                r#"<line x1="{M}" y1="{y:.2}" x2="{x2}" y2="{y:.2}" stroke="{c}" stroke-dasharray="6,3" stroke-opacity="0.6"/>"#,
                y = sy(o.height),
                x2 = W - M,
                c = color(&o.design)
            );
        }
        for p in &self.points {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{}"/>"#,
                sx(p.centered),
                sy(p.precision),
                color(&p.design)
            );
        }
        for (i, d) in designs.iter().enumerate() {
            let y = M + 16.0 * i as f64;
            let _ = writeln!(
                s,
                r#"<circle cx="{}" cy="{y}" r="4" fill="{}"/><text x="{}" y="{}" font-size="11">{d}</text>"#,
                W - M - 90.0,
                color(d),
                W - M - 80.0,
                y + 4.0
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EggerResult {
    pub schema: String,
    /// Published comparisons in the regression.
    pub m: usize,
    pub intercept: f64,
    pub se: f64,
    pub t: f64,
    pub df: usize,
    pub p_value: f64,
    pub slope: f64,
}

/// Weighted least squares of `z` on `x` with weights `w`: intercept, its
/// standard error, and slope.
pub(crate) fn weighted_line(z: &[f64], x: &[f64], w: &[f64]) -> Option<(f64, f64, f64)> {
    let m = z.len();
    let (mut sw, mut swx, mut swxx, mut swz, mut swxz) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..m {
        sw += w[i];
        swx += w[i] * x[i];
        swxx += w[i] * x[i] * x[i];
        swz += w[i] * z[i];
        swxz += w[i] * x[i] * z[i];
    }
    let det = sw * swxx - swx * swx;
    if !(det > 0.0) {
        return None;
    }
    let a = (swxx * swz - swx * swxz) / det;
    let b = (sw * swxz - swx * swz) / det;
    let rss: f64 = (0..m).map(|i| w[i] * (z[i] - a - b * x[i]).powi(2)).sum();
    let sigma2 = rss / (m as f64 - 2.0);
    Some((a, (sigma2 * swxx / det).sqrt(), b))
}

/// Egger's test: weighted regression (weights 1/se²) of the standardized
/// centered effect on precision; the intercept measures asymmetry.
pub fn eggers_test(data: &NetworkDataset, fit: &FitResult) -> Result<EggerResult> {
    let funnel = funnel_data(data, fit)?;
    egger_from_points(&funnel.points)
}

pub fn egger_from_points(points: &[FunnelPoint]) -> Result<EggerResult> {
    let m = points.len();
    if m < 3 {
        return Err(Error::TooFewStudies(m));
    }
    let z: Vec<f64> = points.iter().map(|p| p.centered / p.se).collect();
    let x: Vec<f64> = points.iter().map(|p| p.precision).collect();
    let w: Vec<f64> = points.iter().map(|p| 1.0 / (p.se * p.se)).collect();
    let (intercept, se, slope) = weighted_line(&z, &x, &w)
        .ok_or_else(|| Error::validation(None, "precision does not vary across comparisons"))?;
    let df = m - 2;
    let t = intercept / se;
    let p_value = if se == 0.0 {
        if intercept == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Config(e.to_string()))?;
        2.0 * dist.sf(t.abs())
    };
    Ok(EggerResult {
        schema: "egger-v1".into(),
        m,
        intercept,
        se,
        t,
        df,
        p_value,
        slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Comparison, ComparisonOutcome, DesignType, StudyRecord, TreatmentId};
    use crate::model::{fit_mre, HeterogeneityStructure, ModelParams, TauMode};
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
                        n: 100,
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

    fn fixed_fit(mu: f64) -> FitResult {
        FitResult {
            params: ModelParams {
                reference: t("B"),
                treatments: vec![t("A")],
                mu: vec![mu],
                tau: HeterogeneityStructure {
                    mode: TauMode::DesignSpecific,
                    values: vec![0.0],
                },
            },
            loglik: 0.0,
            se: vec![None, None],
            ci: vec![None, None],
            mu_covariance: None,
            converged: true,
            n_evals: 0,
            warnings: vec![],
        }
    }

    #[test]
    fn centering_and_overlays() {
        let d = pairwise(&[(0.5, 0.2), (0.1, 0.4)], &[64, 100]);
        let f = funnel_data(&d, &fixed_fit(0.3)).unwrap();
        assert_eq!(f.points.len(), 2);
        assert_relative_eq!(f.points[0].centered, 0.2, epsilon = 1e-15);
        assert_eq!(f.points[0].precision, 5.0);
        let heights: Vec<f64> = f.overlays.iter().map(|o| o.height).collect();
        assert_eq!(heights, vec![8.0, 10.0]);
        let csv = f.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(3).unwrap().starts_with("overlay,u0,A:B,"));
        assert!(f.to_svg().contains("<circle"));

        let none = funnel_data(&pairwise(&[(0.5, 0.2), (0.1, 0.4)], &[]), &fixed_fit(0.3)).unwrap();
        assert!(none.overlays.is_empty());
    }

    #[test]
    fn three_point_weighted_fit_by_hand() {
        // z = (1, 2, 2), x = (1, 2, 3), w = (1, 1, 2):
        // Sw=4 Swx=9 Swxx=23 Swz=7 Swxz=17, det=11 → a=(161-153)/11, b=(68-63)/11
        let (a, se, b) = weighted_line(&[1.0, 2.0, 2.0], &[1.0, 2.0, 3.0], &[1.0, 1.0, 2.0]).unwrap();
        assert_relative_eq!(a, 8.0 / 11.0, epsilon = 1e-14);
        assert_relative_eq!(b, 5.0 / 11.0, epsilon = 1e-14);
        let resid: [f64; 3] = [1.0 - 13.0 / 11.0, 2.0 - 18.0 / 11.0, 2.0 - 23.0 / 11.0];
        let rss = resid[0].powi(2) + resid[1].powi(2) + 2.0 * resid[2].powi(2);
        assert_relative_eq!(se, (rss * 23.0 / 11.0).sqrt(), epsilon = 1e-14);
    }

    #[test]
    fn symmetric_sample_has_no_asymmetry() {
        let mut eff = Vec::new();
        for (i, se) in [0.1, 0.15, 0.2, 0.3, 0.4, 0.5].iter().enumerate() {
            let d = 0.1 * (i as f64 + 1.0);
            eff.push((0.4 + d, *se));
            eff.push((0.4 - d, *se));
        }
        let data = pairwise(&eff, &[]);
        let r = eggers_test(&data, &fixed_fit(0.4)).unwrap();
        assert!(r.intercept.abs() < 1e-12, "{}", r.intercept);
        assert!(r.p_value > 0.999);
        let fit = fit_mre(&data, TauMode::DesignSpecific).unwrap();
        let f = funnel_data(&data, &fit).unwrap();
        let mean = f.points.iter().map(|p| p.centered).sum::<f64>() / f.points.len() as f64;
        assert!(mean.abs() < 1e-6);
    }

    #[test]
    fn planted_asymmetry_is_detected() {
        use rand::Rng;
        let mut rng = crate::rng::substream(17, &[0]);
        let eff: Vec<(f64, f64)> = (0..40)
            .map(|i| {
                let se = 0.05 + 0.01 * i as f64;
                let noise: f64 = rng.random_range(-0.5..0.5);
                (0.3 + 1.5 * se + noise * se, se)
            })
            .collect();
        let data = pairwise(&eff, &[]);
        let fit = fit_mre(&data, TauMode::DesignSpecific).unwrap();
        let r = eggers_test(&data, &fit).unwrap();
        assert_eq!((r.m, r.df), (40, 38));
        assert!(r.p_value < 0.05, "p = {}", r.p_value);
        assert!(r.intercept > 0.0);
    }

    #[test]
    fn shifting_a_comparison_group_leaves_intercept() {
        let eff = [(0.2, 0.1), (0.5, 0.3), (0.1, 0.2), (0.9, 0.5), (0.4, 0.25)];
        let base = eggers_test(&pairwise(&eff, &[]), &fixed_fit(0.35)).unwrap();
        let c = 1.7;
        let shifted: Vec<(f64, f64)> = eff.iter().map(|&(y, s)| (y + c, s)).collect();
        let moved = eggers_test(&pairwise(&shifted, &[]), &fixed_fit(0.35 + c)).unwrap();
        assert!((base.intercept - moved.intercept).abs() < 1e-10);
    }

    #[test]
    fn too_few_comparisons() {
        let d = pairwise(&[(0.5, 0.2), (0.1, 0.4)], &[]);
        assert!(matches!(eggers_test(&d, &fixed_fit(0.3)), Err(Error::TooFewStudies(2))));
    }
}
