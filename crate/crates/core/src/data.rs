//! Extended network data: published contrast-level outcomes plus registry
//! records of studies that were never published.
//!
//! Every study belongs to a design type (the set of arms it randomised). A
//! published study carries one [`ComparisonOutcome`] per basic comparison of
//! its design; a registry record carries only the planned sample size.
//! Standard errors are stored as given; [`StudyRecord::covariance`] turns them
//! into the within-study variance-covariance matrix used by the likelihood.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TreatmentId(String);

impl TreatmentId {
    pub fn new(label: impl Into<String>) -> Result<Self> {
        let label = label.into();
        if label.trim().is_empty() {
            return Err(Error::validation(None, "treatment label must be non-empty"));
        }
        Ok(TreatmentId(label))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TreatmentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Which sign of the effect estimate counts as benefit. Drives both the
/// multi-arm t-statistic rule and the P-score orientation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Higher,
    Lower,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::Higher => Direction::Lower,
            Direction::Lower => Direction::Higher,
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "higher" => Ok(Direction::Higher),
            "lower" => Ok(Direction::Lower),
            other => Err(Error::Config(format!(
                "direction must be 'higher' or 'lower', got '{other}'"
            ))),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Higher => "higher",
            Direction::Lower => "lower",
        })
    }
}

/// Effect of `treat_x` relative to `treat_y`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Comparison {
    pub treat_x: TreatmentId,
    pub treat_y: TreatmentId,
}

impl Comparison {
    pub fn new(treat_x: TreatmentId, treat_y: TreatmentId) -> Self {
        Comparison { treat_x, treat_y }
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.treat_x, self.treat_y)
    }
}

/// A design type: the arms a trial randomised and the basic comparisons it
/// reports. Multi-arm designs report every arm against one common baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignType {
    pub index: usize,
    pub treatments: Vec<TreatmentId>,
    pub comparisons: Vec<Comparison>,
}

impl DesignType {
    pub fn new(index: usize, comparisons: Vec<Comparison>) -> Result<Self> {
        let ctx = || Some(format!("design {index}"));
        if index == 0 {
            return Err(Error::validation(None, "design indices start at 1"));
        }
        if comparisons.is_empty() {
            return Err(Error::validation(ctx(), "design has no comparisons"));
        }
        let baseline = &comparisons[0].treat_y;
        let mut treatments = vec![baseline.clone()];
        for c in &comparisons {
            if &c.treat_y != baseline {
                return Err(Error::validation(
                    ctx(),
                    format!(
                        "multi-arm comparisons must share one baseline arm; found {} and {}",
                        baseline, c.treat_y
                    ),
                ));
            }
            if c.treat_x == c.treat_y {
                return Err(Error::validation(ctx(), format!("self-comparison {c}")));
            }
            if treatments.contains(&c.treat_x) {
                return Err(Error::validation(ctx(), format!("duplicate arm {}", c.treat_x)));
            }
            treatments.push(c.treat_x.clone());
        }
        treatments.sort();
        Ok(DesignType {
            index,
            treatments,
            comparisons,
        })
    }

    pub fn arms(&self) -> usize {
        self.treatments.len()
    }

    pub fn is_multi_arm(&self) -> bool {
        self.arms() > 2
    }

    pub fn label(&self) -> String {
        self.treatments
            .iter()
            .map(TreatmentId::as_str)
            .collect::<Vec<_>>()
            .join(":")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonOutcome {
    pub comparison: Comparison,
    /// Effect estimate, e.g. a log odds ratio.
    pub y: f64,
    /// Standard error of `y`.
    pub se: f64,
    /// Subjects contributing to this comparison.
    pub n: u32,
}

impl ComparisonOutcome {
    pub fn t(&self) -> f64 {
        self.y / self.se
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StudyRecord {
    pub study_id: String,
    /// Index of the study's design type (1-based).
    pub design: usize,
    pub published: bool,
    /// Outcomes in the design's comparison order; empty for registry records.
    pub outcomes: Vec<ComparisonOutcome>,
    /// Variance of the common baseline arm, multi-arm published studies only.
    pub shared_arm_variance: Option<f64>,
    /// Sample size entering the moment function. For published studies the
    /// largest per-comparison `n`; for registry records the planned size.
    pub n_planned: u32,
}

impl StudyRecord {
    pub fn published(
        study_id: impl Into<String>,
        design: usize,
        outcomes: Vec<ComparisonOutcome>,
        shared_arm_variance: Option<f64>,
    ) -> Self {
        let n_planned = outcomes.iter().map(|o| o.n).max().unwrap_or(0);
        StudyRecord {
            study_id: study_id.into(),
            design,
            published: true,
            outcomes,
            shared_arm_variance,
            n_planned,
        }
    }

    pub fn registry(study_id: impl Into<String>, design: usize, n_planned: u32) -> Self {
        StudyRecord {
            study_id: study_id.into(),
            design,
            published: false,
            outcomes: Vec::new(),
            shared_arm_variance: None,
            n_planned,
        }
    }

    /// Within-study variance-covariance matrix of the outcome vector.
    ///
    /// Diagonal entries are `se²`; for multi-arm studies every off-diagonal
    /// entry is the variance of the shared baseline arm.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        if !self.published {
            return Err(Error::Unpublished(self.study_id.clone()));
        }
        let d = self.outcomes.len();
        if d == 1 {
            let v = self.outcomes[0].se * self.outcomes[0].se;
            return Ok(DMatrix::from_element(1, 1, v));
        }
        let shared = self
            .shared_arm_variance
            .ok_or_else(|| Error::MissingCovariance(self.study_id.clone()))?;
        let min_var = self
            .outcomes
            .iter()
            .map(|o| o.se * o.se)
            .fold(f64::INFINITY, f64::min);
        if shared < 0.0 || shared >= min_var {
            return Err(Error::NotPositiveDefinite {
                study: self.study_id.clone(),
                message: format!(
                    "shared-arm variance {shared} must lie in [0, {min_var}) (smallest se²)"
                ),
            });
        }
        let m = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                self.outcomes[i].se * self.outcomes[i].se
            } else {
                shared
            }
        });
        if m.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite {
                study: self.study_id.clone(),
                message: "Cholesky factorisation failed".into(),
            });
        }
        Ok(m)
    }

    /// The t-type statistic driving publication: `y/se` for two-arm studies,
    /// the most remarkable (max for higher, min for lower) for multi-arm.
    pub fn t_statistic(&self, direction: Direction) -> Result<f64> {
        if !self.published || self.outcomes.is_empty() {
            return Err(Error::Unpublished(self.study_id.clone()));
        }
        Ok(extreme_t(self.outcomes.iter().map(ComparisonOutcome::t), direction))
    }
}

pub(crate) fn extreme_t(ts: impl Iterator<Item = f64>, direction: Direction) -> f64 {
    match direction {
        Direction::Higher => ts.fold(f64::NEG_INFINITY, f64::max),
        Direction::Lower => ts.fold(f64::INFINITY, f64::min),
    }
}

/// Validated network: designs numbered `1..=K`, studies that reference them,
/// and a published evidence network connecting every treatment.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkDataset {
    treatments: Vec<TreatmentId>,
    designs: Vec<DesignType>,
    studies: Vec<StudyRecord>,
    direction: Direction,
}

impl NetworkDataset {
    pub fn new(designs: Vec<DesignType>, studies: Vec<StudyRecord>) -> Result<Self> {
        let mut designs = designs;
        designs.sort_by_key(|d| d.index);
        for (pos, d) in designs.iter().enumerate() {
            if d.index != pos + 1 {
                return Err(Error::validation(
                    None,
                    format!("design indices must run 1..K without gaps; found {}", d.index),
                ));
            }
        }
        let treatments: Vec<TreatmentId> = designs
            .iter()
            .flat_map(|d| d.treatments.iter().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();

        let mut ids = BTreeSet::new();
        let mut studies = studies;
        for s in &mut studies {
            if !ids.insert(s.study_id.clone()) {
                return Err(Error::validation(Some(s.study_id.clone()), "duplicate study_id"));
            }
            let design = designs.get(s.design.wrapping_sub(1)).ok_or_else(|| {
                Error::validation(
                    Some(s.study_id.clone()),
                    format!("references undeclared design {}", s.design),
                )
            })?;
            validate_study(s, design)?;
        }

        let data = NetworkDataset {
            treatments,
            designs,
            studies,
            direction: Direction::default(),
        };
        data.check_connected()?;
        Ok(data)
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn treatments(&self) -> &[TreatmentId] {
        &self.treatments
    }

    pub fn designs(&self) -> &[DesignType] {
        &self.designs
    }

    pub fn design(&self, index: usize) -> &DesignType {
        &self.designs[index - 1]
    }

    pub fn studies(&self) -> &[StudyRecord] {
        &self.studies
    }

    pub fn published(&self) -> impl Iterator<Item = &StudyRecord> {
        self.studies.iter().filter(|s| s.published)
    }

    pub fn unpublished(&self) -> impl Iterator<Item = &StudyRecord> {
        self.studies.iter().filter(|s| !s.published)
    }

    /// N: number of published studies.
    pub fn n_published(&self) -> usize {
        self.published().count()
    }

    /// M: number of registry-only studies.
    pub fn n_unpublished(&self) -> usize {
        self.studies.len() - self.n_published()
    }

    /// S = N + M.
    pub fn n_total(&self) -> usize {
        self.studies.len()
    }

    /// `(published, unpublished)` per design, in design order.
    pub fn counts_by_design(&self) -> Vec<(usize, usize)> {
        let mut counts = vec![(0, 0); self.designs.len()];
        for s in &self.studies {
            let c = &mut counts[s.design - 1];
            if s.published {
                c.0 += 1;
            } else {
                c.1 += 1;
            }
        }
        counts
    }

    pub fn treatment(&self, label: &str) -> Result<&TreatmentId> {
        self.treatments
            .iter()
            .find(|t| t.as_str() == label)
            .ok_or_else(|| Error::UnknownTreatment(label.to_string()))
    }

    /// Most frequent baseline arm among published outcomes; ties go to the
    /// lexicographically smallest label.
    pub fn default_reference(&self) -> TreatmentId {
        let mut counts: BTreeMap<&TreatmentId, usize> = BTreeMap::new();
        for o in self.published().flat_map(|s| &s.outcomes) {
            *counts.entry(&o.comparison.treat_y).or_default() += 1;
        }
        let best = counts.values().copied().max().unwrap_or(0);
        counts
            .into_iter()
            .find(|(_, c)| *c == best)
            .map(|(t, _)| t.clone())
            .unwrap_or_else(|| self.treatments[0].clone())
    }

    /// Copy of this dataset with a different set of studies over the same
    /// designs, re-validated.
    pub fn with_studies(&self, studies: Vec<StudyRecord>) -> Result<Self> {
        Ok(NetworkDataset::new(self.designs.clone(), studies)?.with_direction(self.direction))
    }

    fn check_connected(&self) -> Result<()> {
        if self.n_published() == 0 {
            return Err(Error::validation(None, "dataset has no published studies"));
        }
        let index: HashMap<&TreatmentId, usize> =
            self.treatments.iter().enumerate().map(|(i, t)| (t, i)).collect();
        let mut parent: Vec<usize> = (0..self.treatments.len()).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for o in self.published().flat_map(|s| &s.outcomes) {
            let a = find(&mut parent, index[&o.comparison.treat_x]);
            let b = find(&mut parent, index[&o.comparison.treat_y]);
            parent[a] = b;
        }
        let root = find(&mut parent, 0);
        for i in 1..self.treatments.len() {
            if find(&mut parent, i) != root {
                return Err(Error::validation(
                    None,
                    format!(
                        "published network is disconnected: {} is not linked to {}",
                        self.treatments[i], self.treatments[0]
                    ),
                ));
            }
        }
        Ok(())
    }
}

fn validate_study(s: &mut StudyRecord, design: &DesignType) -> Result<()> {
    let err = |m: String| Error::validation(Some(s.study_id.clone()), m);
    if s.n_planned < 2 {
        return Err(err(format!("sample size {} is below 2", s.n_planned)));
    }
    if !s.published {
        if !s.outcomes.is_empty() || s.shared_arm_variance.is_some() {
            return Err(err("unpublished study must not carry outcomes".into()));
        }
        return Ok(());
    }
    if s.outcomes.len() != design.comparisons.len() {
        return Err(err(format!(
            "has {} outcomes but design {} has {} comparisons",
            s.outcomes.len(),
            design.index,
            design.comparisons.len()
        )));
    }
    // Reorder into design order, rejecting anything not in the design.
    let mut ordered = Vec::with_capacity(s.outcomes.len());
    for c in &design.comparisons {
        let pos = s
            .outcomes
            .iter()
            .position(|o| &o.comparison == c)
            .ok_or_else(|| err(format!("missing comparison {c} of design {}", design.index)))?;
        ordered.push(s.outcomes[pos].clone());
    }
    for o in &ordered {
        if !(o.y.is_finite()) {
            return Err(err(format!("non-finite effect for {}", o.comparison)));
        }
        if !(o.se.is_finite() && o.se > 0.0) {
            return Err(err(format!("se must be > 0 for {}, got {}", o.comparison, o.se)));
        }
        if o.n < 2 {
            return Err(err(format!("n must be >= 2 for {}", o.comparison)));
        }
    }
    s.outcomes = ordered;
    if design.is_multi_arm() {
        match s.shared_arm_variance {
            None => return Err(Error::MissingCovariance(s.study_id.clone())),
            Some(v) if !v.is_finite() || v < 0.0 => {
                return Err(err(format!("shared-arm variance must be >= 0, got {v}")))
            }
            _ => {}
        }
    } else if s.shared_arm_variance.is_some() {
        return Err(err("two-arm study must not carry a shared-arm variance".into()));
    }
    s.covariance().map_err(|e| err(e.to_string()))?;
    Ok(())
}

/// Identifier of a supported on-disk layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schema {
    /// One row per (study, comparison). See the data-format chapter of the guide.
    StudiesLongV1,
}

impl FromStr for Schema {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "studies-long-v1" => Ok(Schema::StudiesLongV1),
            other => Err(Error::Schema(format!("unknown schema '{other}'"))),
        }
    }
}

const COLUMNS: [&str; 9] = [
    "study_id",
    "design_k",
    "treat_x",
    "treat_y",
    "y",
    "se",
    "shared_arm_var",
    "n",
    "published",
];

#[derive(Debug, Deserialize, Serialize)]
struct Row {
    study_id: String,
    design_k: i64,
    treat_x: String,
    treat_y: String,
    y: Option<f64>,
    se: Option<f64>,
    shared_arm_var: Option<f64>,
    n: i64,
    published: u8,
}

pub fn load_dataset(path: impl AsRef<Path>, schema: Schema) -> Result<NetworkDataset> {
    let file = std::fs::File::open(path)?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: Read>(reader: R, schema: Schema) -> Result<NetworkDataset> {
    let Schema::StudiesLongV1 = schema;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(csv_error)?.clone();
    let missing: Vec<&str> = COLUMNS
        .iter()
        .copied()
        .filter(|c| !headers.iter().any(|h| h == *c))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Schema(format!("missing column(s): {}", missing.join(", "))));
    }

    // study_id -> (design, published, rows) in first-appearance order
    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, (i64, u8, Vec<Row>)> = HashMap::new();
    for result in rdr.deserialize::<Row>() {
        let row = result.map_err(csv_error)?;
        if row.published > 1 {
            return Err(Error::validation(
                Some(row.study_id.clone()),
                format!("published must be 0 or 1, got {}", row.published),
            ));
        }
        let entry = grouped.entry(row.study_id.clone()).or_insert_with(|| {
            order.push(row.study_id.clone());
            (row.design_k, row.published, Vec::new())
        });
        if entry.0 != row.design_k || entry.1 != row.published {
            return Err(Error::validation(
                Some(row.study_id.clone()),
                "design_k and published must be constant within a study",
            ));
        }
        if entry
            .2
            .iter()
            .any(|r| r.treat_x == row.treat_x && r.treat_y == row.treat_y)
        {
            return Err(Error::validation(
                Some(row.study_id.clone()),
                format!("duplicate row for pair {}-{}", row.treat_x, row.treat_y),
            ));
        }
        entry.2.push(row);
    }

    let mut designs: BTreeMap<usize, Vec<Comparison>> = BTreeMap::new();
    let mut studies = Vec::with_capacity(order.len());
    for id in order {
        let (design_k, published, rows) = grouped.remove(&id).expect("grouped by id");
        if design_k < 1 {
            return Err(Error::validation(
                Some(id),
                format!("references undeclared design {design_k}"),
            ));
        }
        let design_k = design_k as usize;
        let mut comparisons = Vec::with_capacity(rows.len());
        for r in &rows {
            comparisons.push(Comparison::new(
                TreatmentId::new(r.treat_x.clone())?,
                TreatmentId::new(r.treat_y.clone())?,
            ));
        }
        match designs.get(&design_k) {
            Some(declared) => {
                let a: BTreeSet<_> = declared.iter().collect();
                let b: BTreeSet<_> = comparisons.iter().collect();
                if a != b {
                    return Err(Error::validation(
                        Some(id),
                        format!("comparisons do not match design {design_k}"),
                    ));
                }
            }
            None => {
                designs.insert(design_k, comparisons.clone());
            }
        }
        let study_err = |m: String| Error::validation(Some(id.clone()), m);
        let n_of = |r: &Row| -> Result<u32> {
            u32::try_from(r.n).map_err(|_| study_err(format!("invalid sample size {}", r.n)))
        };
        if published == 1 {
            let mut outcomes = Vec::with_capacity(rows.len());
            let mut shared: Option<f64> = None;
            for (r, c) in rows.iter().zip(comparisons) {
                let (y, se) = match (r.y, r.se) {
                    (Some(y), Some(se)) => (y, se),
                    _ => return Err(study_err(format!("published row {c} lacks y or se"))),
                };
                if let Some(v) = r.shared_arm_var {
                    if shared.is_some_and(|s| s != v) {
                        return Err(study_err("shared_arm_var differs between rows".into()));
                    }
                    shared = Some(v);
                }
                outcomes.push(ComparisonOutcome {
                    comparison: c,
                    y,
                    se,
                    n: n_of(r)?,
                });
            }
            if rows.len() > 1 && rows.iter().any(|r| r.shared_arm_var.is_none()) {
                return Err(Error::MissingCovariance(id));
            }
            studies.push(StudyRecord::published(id, design_k, outcomes, shared));
        } else {
            if rows.iter().any(|r| r.y.is_some() || r.se.is_some() || r.shared_arm_var.is_some()) {
                return Err(study_err("unpublished study must not carry outcomes".into()));
            }
            let n = n_of(&rows[0])?;
            if rows.iter().any(|r| r.n != rows[0].n) {
                return Err(study_err("registry rows must share one planned size".into()));
            }
            studies.push(StudyRecord::registry(id, design_k, n));
        }
    }

    let designs = designs
        .into_iter()
        .map(|(k, c)| DesignType::new(k, c))
        .collect::<Result<Vec<_>>>()?;
    NetworkDataset::new(designs, studies)
}

pub fn save_dataset(data: &NetworkDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset(data, file)
}

pub fn write_dataset<W: Write>(data: &NetworkDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(COLUMNS).map_err(csv_error)?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in data.studies() {
        let design = data.design(s.design);
        if s.published {
            for o in &s.outcomes {
                wtr.write_record([
                    s.study_id.clone(),
                    s.design.to_string(),
                    o.comparison.treat_x.to_string(),
                    o.comparison.treat_y.to_string(),
                    fmt(Some(o.y)),
                    fmt(Some(o.se)),
                    fmt(s.shared_arm_variance),
                    o.n.to_string(),
                    "1".into(),
                ])
                .map_err(csv_error)?;
            }
        } else {
            for c in &design.comparisons {
                wtr.write_record([
                    s.study_id.clone(),
                    s.design.to_string(),
                    c.treat_x.to_string(),
                    c.treat_y.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    s.n_planned.to_string(),
                    "0".into(),
                ])
                .map_err(csv_error)?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            line,
            message: format!("{kind:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> TreatmentId {
        TreatmentId::new(s).unwrap()
    }

    fn cmp(x: &str, y: &str) -> Comparison {
        Comparison::new(t(x), t(y))
    }

    fn outcome(x: &str, y: &str, eff: f64, se: f64) -> ComparisonOutcome {
        ComparisonOutcome {
            comparison: cmp(x, y),
            y: eff,
            se,
            n: 100,
        }
    }

    const MINIMAL: &str = "\
study_id,design_k,treat_x,treat_y,y,se,shared_arm_var,n,published
s1,1,A,B,0.4,0.2,,120,1
r1,1,A,B,,,,80,0
";

    #[test]
    fn minimal_file_counts() {
        let d = read_dataset(MINIMAL.as_bytes(), Schema::StudiesLongV1).unwrap();
        assert_eq!(d.n_published(), 1);
        assert_eq!(d.n_unpublished(), 1);
        assert_eq!(d.n_total(), 2);
        assert_eq!(d.treatments().len(), 2);
    }

    #[test]
    fn three_arm_registry_record() {
        let csv = "\
study_id,design_k,treat_x,treat_y,y,se,shared_arm_var,n,published
s1,1,A,C,0.4,0.2,,120,1
s2,2,A,C,0.5,0.3,0.01,90,1
s2,2,B,C,0.2,0.3,0.01,90,1
r1,2,A,C,,,,60,0
r1,2,B,C,,,,60,0
";
        let d = read_dataset(csv.as_bytes(), Schema::StudiesLongV1).unwrap();
        assert_eq!(d.n_published(), 2);
        assert_eq!(d.n_unpublished(), 1);
        assert_eq!(d.studies()[2].n_planned, 60);
        assert!(d.design(2).is_multi_arm());
    }

    #[test]
    fn zero_se_rejected() {
        let csv = MINIMAL.replace("0.4,0.2", "0.4,0");
        let err = read_dataset(csv.as_bytes(), Schema::StudiesLongV1).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }), "{err}");
    }

    #[test]
    fn undeclared_design_rejected() {
        let csv = format!("{MINIMAL}r2,3,A,B,,,,50,0\n");
        let err = read_dataset(csv.as_bytes(), Schema::StudiesLongV1).unwrap_err();
        assert!(matches!(err, Error::Validation { .. }), "{err}");
        let csv = format!("{MINIMAL}r2,0,A,B,,,,50,0\n");
        assert!(read_dataset(csv.as_bytes(), Schema::StudiesLongV1).is_err());
    }

    #[test]
    fn missing_column_is_schema_error() {
        let csv = "study_id,design_k,treat_x,treat_y,y,se,n,published\n";
        let err = read_dataset(csv.as_bytes(), Schema::StudiesLongV1).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn malformed_number_is_parse_error() {
        let csv = MINIMAL.replace("0.4,0.2", "abc,0.2");
        let err = read_dataset(csv.as_bytes(), Schema::StudiesLongV1).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn duplicate_pair_rejected() {
        let csv = format!("{MINIMAL}s1,1,A,B,0.1,0.2,,120,1\n");
        assert!(read_dataset(csv.as_bytes(), Schema::StudiesLongV1).is_err());
    }

    #[test]
    fn unpublished_with_outcome_rejected() {
        let csv = MINIMAL.replace("r1,1,A,B,,,,80,0", "r1,1,A,B,0.3,,,80,0");
        assert!(read_dataset(csv.as_bytes(), Schema::StudiesLongV1).is_err());
    }

    #[test]
    fn disconnected_network_rejected() {
        let csv = "\
study_id,design_k,treat_x,treat_y,y,se,shared_arm_var,n,published
s1,1,A,B,0.4,0.2,,120,1
s2,2,C,D,0.4,0.2,,120,1
";
        let err = read_dataset(csv.as_bytes(), Schema::StudiesLongV1).unwrap_err();
        assert!(err.to_string().contains("disconnected"));
    }

    #[test]
    fn covariance_two_arm() {
        let s = StudyRecord::published("s", 1, vec![outcome("A", "C", 0.1, 0.5)], None);
        let m = s.covariance().unwrap();
        assert_eq!(m.shape(), (1, 1));
        assert_eq!(m[(0, 0)], 0.25);
    }

    #[test]
    fn covariance_three_arm() {
        let s = StudyRecord::published(
            "s",
            1,
            vec![outcome("A", "C", 0.1, 1.0), outcome("B", "C", 0.2, 1.0)],
            Some(0.4),
        );
        let m = s.covariance().unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 1.0]));
    }

    #[test]
    fn covariance_not_positive_definite() {
        let s = StudyRecord::published(
            "s",
            1,
            vec![outcome("A", "C", 0.1, 0.5), outcome("B", "C", 0.2, 0.5)],
            Some(0.3),
        );
        // eigenvalues of [[.25,.3],[.3,.25]] are 0.55 and -0.05
        assert!(matches!(s.covariance(), Err(Error::NotPositiveDefinite { .. })));
        let s = StudyRecord { shared_arm_variance: None, ..s };
        assert!(matches!(s.covariance(), Err(Error::MissingCovariance(_))));
    }

    #[test]
    fn t_statistics() {
        let s = StudyRecord::published("s", 1, vec![outcome("A", "C", 0.6, 0.3)], None);
        assert!((s.t_statistic(Direction::Higher).unwrap() - 2.0).abs() < 1e-15);
        let s = StudyRecord::published(
            "s",
            1,
            vec![outcome("A", "C", 1.2, 1.0), outcome("B", "C", 2.5, 1.0)],
            Some(0.1),
        );
        assert_eq!(s.t_statistic(Direction::Higher).unwrap(), 2.5);
        assert_eq!(s.t_statistic(Direction::Lower).unwrap(), 1.2);
        let r = StudyRecord::registry("r", 1, 50);
        assert!(matches!(r.t_statistic(Direction::Higher), Err(Error::Unpublished(_))));
    }

    #[test]
    fn design_requires_common_baseline() {
        let err = DesignType::new(1, vec![cmp("A", "C"), cmp("B", "A")]).unwrap_err();
        assert!(err.to_string().contains("baseline"));
        let d = DesignType::new(1, vec![cmp("A", "C"), cmp("B", "C")]).unwrap();
        assert_eq!(d.arms(), 3);
        assert_eq!(d.label(), "A:B:C");
    }

    #[test]
    fn default_reference_is_common_baseline() {
        let csv = "\
study_id,design_k,treat_x,treat_y,y,se,shared_arm_var,n,published
s1,1,A,C,0.4,0.2,,120,1
s2,2,B,C,0.4,0.2,,120,1
s3,3,A,B,0.4,0.2,,120,1
";
        let d = read_dataset(csv.as_bytes(), Schema::StudiesLongV1).unwrap();
        assert_eq!(d.default_reference().as_str(), "C");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn dataset_strategy() -> impl Strategy<Value = NetworkDataset> {
            let study = (
                0usize..3,
                any::<bool>(),
                -3.0f64..3.0,
                -3.0f64..3.0,
                0.05f64..2.0,
                0.05f64..2.0,
                0.0f64..1.0,
                2u32..5000,
            );
            proptest::collection::vec(study, 1..12).prop_map(|rows| {
                let designs = vec![
                    DesignType::new(1, vec![cmp("A", "C")]).unwrap(),
                    DesignType::new(2, vec![cmp("B", "C")]).unwrap(),
                    DesignType::new(3, vec![cmp("A", "C"), cmp("B", "C")]).unwrap(),
                ];
                let mut studies = vec![
                    StudyRecord::published("anchor1", 1, vec![outcome("A", "C", 0.1, 0.4)], None),
                    StudyRecord::published("anchor2", 2, vec![outcome("B", "C", 0.1, 0.4)], None),
                    StudyRecord::published(
                        "anchor3",
                        3,
                        vec![outcome("A", "C", 0.1, 0.4), outcome("B", "C", 0.2, 0.4)],
                        Some(0.05),
                    ),
                ];
                for (i, (k, published, y1, y2, se1, se2, frac, n)) in rows.into_iter().enumerate() {
                    let id = format!("s{i}");
                    let design = k + 1;
                    if !published {
                        studies.push(StudyRecord::registry(id, design, n));
                        continue;
                    }
                    let mk = |x: &str, y: f64, se: f64| ComparisonOutcome {
                        comparison: cmp(x, "C"),
                        y,
                        se,
                        n,
                    };
                    let s = match design {
                        1 => StudyRecord::published(id, 1, vec![mk("A", y1, se1)], None),
                        2 => StudyRecord::published(id, 2, vec![mk("B", y1, se1)], None),
                        _ => {
                            let shared = frac * se1.min(se2).powi(2) * 0.99;
                            StudyRecord::published(
                                id,
                                3,
                                vec![mk("A", y1, se1), mk("B", y2, se2)],
                                Some(shared),
                            )
                        }
                    };
                    studies.push(s);
                }
                NetworkDataset::new(designs, studies).unwrap()
            })
        }

        proptest! {
            #[test]
            fn csv_round_trip_is_exact(d in dataset_strategy()) {
                let mut buf = Vec::new();
                write_dataset(&d, &mut buf).unwrap();
                let back = read_dataset(buf.as_slice(), Schema::StudiesLongV1).unwrap();
                prop_assert_eq!(back, d);
            }

            #[test]
            fn covariance_is_positive_definite(d in dataset_strategy()) {
                for s in d.published() {
                    let m = s.covariance().unwrap();
                    prop_assert!(m.clone().cholesky().is_some());
                    prop_assert_eq!(m.transpose(), m);
                }
            }

            #[test]
            fn max_t_dominates_min_t(d in dataset_strategy()) {
                for s in d.published().filter(|s| s.outcomes.len() > 1) {
                    let hi = s.t_statistic(Direction::Higher).unwrap();
                    let lo = s.t_statistic(Direction::Lower).unwrap();
                    prop_assert!(hi >= lo);
                    let all_equal = s.outcomes.iter().all(|o| o.t() == s.outcomes[0].t());
                    prop_assert_eq!(hi == lo, all_equal);
                }
            }
        }
    }
}
