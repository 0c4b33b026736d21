//! Command-line surface: long-format ingestion, run configuration and the
//! `check`, `fit`, `tune` and `simulate` subcommands.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, PenaltyOrder};
use crate::correlation::CorrelationSpec;
use crate::design::CrossoverDesign;
use crate::error::{Error, Result};
use crate::estimability::check_estimability;
use crate::glm::Family;
use crate::inference::{curve_band, two_sided_p, DEFAULT_LEVELS};
use crate::par::Execution;
use crate::pgee::{BlockKind, FitResult, ModelSpec, Observations, Penalties};
use crate::simulate::{preset, run_table, summary_csv, table_csv, ModelKind, SimulationScenario};
use crate::tuning::{qic, select_with, Criterion, SelectConfig, TuningGrid, TuningResult};

pub const CURVE_GRID_POINTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRow {
    pub unit: String,
    pub sequence: String,
    pub period: usize,
    pub time: f64,
    pub treatment: String,
    pub y: f64,
    pub denominator: Option<u32>,
}

/// A validated complete panel in `(sequence, unit, period, time)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct LongDataset {
    rows: Vec<LongRow>,
    times: Vec<f64>,
    periods: usize,
}

const COLUMNS: [(&str, &[&str]); 6] = [
    ("unit", &["unit", "unit_id"]),
    ("sequence", &["sequence", "sequence_id"]),
    ("period", &["period"]),
    ("time", &["time"]),
    ("treatment", &["treatment"]),
    ("y", &["y"]),
];

pub fn parse_long_csv<R: Read>(reader: R) -> Result<LongDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |aliases: &[&str]| headers.iter().position(|h| aliases.contains(&h));
    let mut idx = [0usize; 6];
    for (slot, (name, aliases)) in idx.iter_mut().zip(COLUMNS) {
        *slot = find(aliases).ok_or_else(|| Error::MissingColumn(name.to_string()))?;
    }
    let denom_col = find(&["denominator"]);

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |column: &str| Error::NonNumericValue { line, column: column.to_string() };
        let field = |i: usize| rec.get(i).unwrap_or("");
        let period: usize = field(idx[2]).parse().map_err(|_| bad("period"))?;
        if period == 0 {
            return Err(Error::InvalidInput(format!("line {line}: periods are numbered from 1")));
        }
        let time: f64 = field(idx[3]).parse().map_err(|_| bad("time"))?;
        let y: f64 = field(idx[5]).parse().map_err(|_| bad("y"))?;
        if !time.is_finite() || !y.is_finite() {
            return Err(Error::InvalidInput(format!("line {line}: non-finite value")));
        }
        let denominator = match denom_col {
            Some(c) => {
                let d: u32 = field(c).parse().map_err(|_| bad("denominator"))?;
                if d == 0 {
                    return Err(Error::InvalidInput(format!("line {line}: denominator must be positive")));
                }
                if !(0.0..=1.0).contains(&y) {
                    return Err(Error::InvalidInput(format!("line {line}: proportion {y} outside [0, 1]")));
                }
                Some(d)
            }
            None => None,
        };
        rows.push(LongRow {
            unit: field(idx[0]).to_string(),
            sequence: field(idx[1]).to_string(),
            period,
            time,
            treatment: field(idx[4]).to_string(),
            y,
            denominator,
        });
    }
    LongDataset::new(rows)
}

impl LongDataset {
    pub fn new(mut rows: Vec<LongRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("data has no rows".into()));
        }
        rows.sort_by(|a, b| {
            (&a.sequence, &a.unit, a.period)
                .cmp(&(&b.sequence, &b.unit, b.period))
                .then(a.time.total_cmp(&b.time))
        });
        let times: Vec<f64> = {
            let mut t: Vec<f64> = rows.iter().map(|r| r.time).collect();
            t.sort_by(f64::total_cmp);
            t.dedup();
            t
        };
        let periods = rows.iter().map(|r| r.period).max().unwrap_or(0);

        let mut unit_seq: BTreeMap<&str, &str> = BTreeMap::new();
        for r in &rows {
            if let Some(s) = unit_seq.insert(&r.unit, &r.sequence) {
                if s != r.sequence {
                    return Err(Error::InvalidInput(format!("unit {} appears in sequences {s} and {}", r.unit, r.sequence)));
                }
            }
        }
        let mut cells: BTreeMap<(&str, usize), Vec<&LongRow>> = BTreeMap::new();
        for r in &rows {
            cells.entry((&r.unit, r.period)).or_default().push(r);
        }
        let mut units: Vec<(&str, &str)> = unit_seq.iter().map(|(u, s)| (*s, *u)).collect();
        units.sort();
        for (_, unit) in &units {
            for p in 1..=periods {
                let cell = cells.get(&(*unit, p)).map(Vec::as_slice).unwrap_or(&[]);
                let complete = cell.len() == times.len() && cell.iter().zip(&times).all(|(r, t)| r.time == *t);
                if !complete {
                    return Err(Error::IncompletePanel { unit: unit.to_string(), period: p });
                }
                if cell.iter().any(|r| r.treatment != cell[0].treatment) {
                    return Err(Error::InvalidInput(format!("unit {unit} period {p} mixes treatments")));
                }
            }
        }
        let has_denominator = rows[0].denominator.is_some();
        if rows.iter().any(|r| r.denominator.is_some() != has_denominator) {
            return Err(Error::InvalidInput("denominator given for some rows only".into()));
        }
        let data = Self { rows, times, periods };
        data.layout()?;
        Ok(data)
    }

    /// Long rows for responses laid out in the row order of `design`.
    pub fn from_design(design: &CrossoverDesign, data: &Observations) -> Result<Self> {
        if data.len() != design.num_observations() {
            return Err(Error::DataShapeMismatch { expected: design.num_observations(), found: data.len() });
        }
        let width = design.units_per_sequence().to_string().len();
        let mut rows = Vec::with_capacity(data.len());
        let mut i = 0;
        for (s, seq) in design.sequences().iter().enumerate() {
            let name = &design.sequence_names()[s];
            for u in 0..design.units_per_sequence() {
                for (p, treatment) in seq.iter().enumerate() {
                    for &time in design.times() {
                        rows.push(LongRow {
                            unit: format!("{name}-{:0width$}", u + 1),
                            sequence: name.clone(),
                            period: p + 1,
                            time,
                            treatment: treatment.clone(),
                            y: data.y[i],
                            denominator: data.weights.as_ref().map(|w| w[i].round() as u32),
                        });
                        i += 1;
                    }
                }
            }
        }
        Self::new(rows)
    }

    pub fn rows(&self) -> &[LongRow] {
        &self.rows
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn obs_per_period(&self) -> usize {
        self.times.len()
    }

    fn cell_treatment(&self, unit: &str, period: usize) -> &str {
        self.rows.iter().find(|r| r.unit == unit && r.period == period).map_or("", |r| r.treatment.as_str())
    }

    /// Sequence name → unit ids, both sorted.
    pub fn units_by_sequence(&self) -> BTreeMap<String, Vec<String>> {
        let mut m: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for r in &self.rows {
            m.entry(r.sequence.clone()).or_default().insert(r.unit.clone());
        }
        m.into_iter().map(|(s, u)| (s, u.into_iter().collect())).collect()
    }

    /// Sequence names and treatment layouts observed in the data.
    pub fn layout(&self) -> Result<(Vec<String>, Vec<Vec<String>>)> {
        let mut names = Vec::new();
        let mut layout = Vec::new();
        for (seq, units) in self.units_by_sequence() {
            let row: Vec<String> =
                (1..=self.periods).map(|p| self.cell_treatment(&units[0], p).to_string()).collect();
            for u in &units[1..] {
                if (1..=self.periods).any(|p| self.cell_treatment(u, p) != row[p - 1]) {
                    return Err(Error::InvalidInput(format!("unit {u} does not follow sequence {seq}")));
                }
            }
            names.push(seq);
            layout.push(row);
        }
        Ok((names, layout))
    }

    /// Checks the data against a declared layout.
    pub fn check_layout(&self, names: &[String], layout: &[Vec<String>]) -> Result<()> {
        let (seen_names, seen) = self.layout()?;
        for (name, row) in seen_names.iter().zip(&seen) {
            let j = names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::InvalidInput(format!("sequence {name} is not in the design file")))?;
            if &layout[j] != row {
                return Err(Error::InvalidInput(format!(
                    "sequence {name} has treatments {} in the data but {} in the design file",
                    row.join(","),
                    layout[j].join(",")
                )));
            }
        }
        if let Some(missing) = names.iter().find(|n| !seen_names.contains(n)) {
            return Err(Error::InvalidInput(format!("sequence {missing} has no units in the data")));
        }
        Ok(())
    }

    /// Common number of units per sequence.
    pub fn units_per_sequence(&self) -> Result<usize> {
        let counts: BTreeSet<usize> = self.units_by_sequence().values().map(Vec::len).collect();
        match counts.len() {
            1 => Ok(*counts.iter().next().expect("one count")),
            _ => Err(Error::InvalidInput("sequences have different numbers of units".into())),
        }
    }

    /// Responses in the row order of `design` (sequence order of the layout).
    pub fn observations(&self, design: &CrossoverDesign, family: Family) -> Result<Observations> {
        let by_seq = self.units_by_sequence();
        let mut y = Vec::with_capacity(self.rows.len());
        let mut w = Vec::with_capacity(self.rows.len());
        for name in design.sequence_names() {
            let units = by_seq
                .get(name)
                .ok_or_else(|| Error::InvalidInput(format!("sequence {name} has no units in the data")))?;
            for u in units {
                for r in self.rows.iter().filter(|r| &r.unit == u) {
                    y.push(r.y);
                    w.push(r.denominator.map_or(1.0, f64::from));
                }
            }
        }
        if y.len() != design.num_observations() {
            return Err(Error::DataShapeMismatch { expected: design.num_observations(), found: y.len() });
        }
        match family {
            Family::Binomial if y.iter().any(|v| !(0.0..=1.0).contains(v)) => {
                return Err(Error::InvalidInput("binomial responses must be proportions in [0, 1]".into()))
            }
            Family::Poisson if y.iter().any(|v| *v < 0.0) => {
                return Err(Error::InvalidInput("poisson responses must be non-negative".into()))
            }
            _ => {}
        }
        if self.rows[0].denominator.is_some() {
            Ok(Observations::with_weights(y, w))
        } else {
            Ok(Observations::new(y))
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let denom = self.rows[0].denominator.is_some();
        let mut header = vec!["unit", "sequence", "period", "time", "treatment", "y"];
        if denom {
            header.push("denominator");
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec =
                vec![r.unit.clone(), r.sequence.clone(), r.period.to_string(), r.time.to_string(), r.treatment.clone(), r.y.to_string()];
            if let Some(d) = r.denominator {
                rec.push(d.to_string());
            }
            w.write_record(&rec)?;
        }
        finish(w)
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 csv"))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub design: DesignSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub basis: BasisSection,
    #[serde(default)]
    pub penalty: PenaltySection,
    pub tuning: Option<TuningSection>,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub simulation: SimulationSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSection {
    /// Layout file: one sequence per line, `name: A,B`.
    pub layout: Option<PathBuf>,
    pub units_per_sequence: Option<usize>,
    pub times: Option<Vec<f64>>,
    pub obs_per_period: Option<usize>,
    pub t_domain: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub family: String,
    pub correlation: String,
    pub max_iter: usize,
    pub tol: f64,
    pub allow_rank_deficient: bool,
    pub allow_nonconverged: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            family: "gaussian".into(),
            correlation: "exchangeable".into(),
            max_iter: 200,
            tol: 1e-6,
            allow_rank_deficient: false,
            allow_nonconverged: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BasisSection {
    /// `bspline` or `fourier`.
    pub kind: String,
    pub order: usize,
    pub internal_knots: usize,
    pub harmonics: usize,
    pub centered: bool,
}

impl Default for BasisSection {
    fn default() -> Self {
        Self { kind: "bspline".into(), order: 4, internal_knots: 3, harmonics: 1, centered: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    fn to_vec(&self) -> Vec<f64> {
        match self {
            OneOrMany::One(v) => vec![*v],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltySection {
    pub lambda_time: f64,
    /// One value for every pair, or one per pair in lexicographic pair order.
    pub lambda_carry: OneOrMany,
    /// 0 (ridge) or 2 (second difference); the basis default when absent.
    pub order_time: Option<u32>,
    pub order_carry: Option<u32>,
}

impl Default for PenaltySection {
    fn default() -> Self {
        Self { lambda_time: 0.0, lambda_carry: OneOrMany::One(0.0), order_time: None, order_carry: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningSection {
    pub criterion: String,
    pub grid: Option<Vec<f64>>,
    pub sweeps: usize,
    pub tune_time: bool,
    pub tune_carry: bool,
}

impl Default for TuningSection {
    fn default() -> Self {
        Self { criterion: "qic".into(), grid: None, sweeps: 1, tune_time: true, tune_carry: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    pub grid_points: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("pgee-out"), grid_points: CURVE_GRID_POINTS }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub preset: Option<String>,
    pub l: Option<usize>,
    pub n: Option<usize>,
    pub beta1: Option<Vec<f64>>,
    pub replicates: Option<usize>,
    pub sigma: Option<f64>,
    pub models: Option<Vec<String>>,
    /// `bspline` (default) or `fourier`.
    pub basis: Option<String>,
    pub criterion: Option<String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.design.layout, &self.data.path].into_iter().flatten() {
            if !p.is_file() {
                return Err(Error::InvalidConfig(format!("file {} does not exist", p.display())));
            }
        }
        self.family()?;
        self.correlation()?;
        if let Some(t) = &self.tuning {
            t.criterion.parse::<Criterion>()?;
        }
        if self.output.grid_points < 2 {
            return Err(Error::InvalidConfig("output.grid_points must be at least 2".into()));
        }
        Ok(())
    }

    pub fn family(&self) -> Result<Family> {
        self.model.family.parse()
    }

    pub fn correlation(&self) -> Result<CorrelationSpec> {
        self.model.correlation.parse()
    }

    pub fn basis(&self, t_domain: f64) -> Result<BasisSpec> {
        let b = &self.basis;
        let spec = match b.kind.to_ascii_lowercase().as_str() {
            "bspline" | "b-spline" => BasisSpec::bspline(b.order, b.internal_knots, t_domain),
            "fourier" => BasisSpec::fourier(b.harmonics, t_domain),
            other => return Err(Error::InvalidConfig(format!("unknown basis kind `{other}`"))),
        }
        .centered(b.centered);
        spec.validate()?;
        Ok(spec)
    }

    pub fn model_spec(&self, t_domain: f64) -> Result<ModelSpec> {
        let order = |o: Option<u32>| o.map(PenaltyOrder::try_from).transpose();
        Ok(ModelSpec {
            lambda_time: self.penalty.lambda_time,
            lambda_carry: self.penalty.lambda_carry.to_vec(),
            penalty_order_time: order(self.penalty.order_time)?,
            penalty_order_carry: order(self.penalty.order_carry)?,
            max_iter: self.model.max_iter,
            tol: self.model.tol,
            allow_rank_deficient: self.model.allow_rank_deficient,
            ..ModelSpec::new(self.family()?, self.correlation()?, self.basis(t_domain)?)
        })
    }

    fn declared_layout(&self) -> Result<Option<(Vec<String>, Vec<Vec<String>>)>> {
        match &self.design.layout {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", p.display())))?;
                CrossoverDesign::parse_layout(&text).map(Some)
            }
            None => Ok(None),
        }
    }

    /// The crossover design, taken from the data when given and otherwise from
    /// the `[design]` section.
    pub fn build_design(&self, data: Option<&LongDataset>) -> Result<CrossoverDesign> {
        let declared = self.declared_layout()?;
        let (names, layout, n, times) = match data {
            Some(d) => {
                let (names, layout) = match declared {
                    Some((names, layout)) => {
                        d.check_layout(&names, &layout)?;
                        (names, layout)
                    }
                    None => d.layout()?,
                };
                (names, layout, d.units_per_sequence()?, d.times().to_vec())
            }
            None => {
                let (names, layout) = declared
                    .ok_or_else(|| Error::InvalidConfig("design.layout is required without data".into()))?;
                let times = match (&self.design.times, self.design.obs_per_period) {
                    (Some(t), _) => t.clone(),
                    (None, Some(l)) => (1..=l).map(|k| k as f64).collect(),
                    (None, None) => {
                        return Err(Error::InvalidConfig("design.times or design.obs_per_period is required".into()))
                    }
                };
                (names, layout, self.design.units_per_sequence.unwrap_or(1), times)
            }
        };
        let t_domain = self.design.t_domain.unwrap_or_else(|| times.last().copied().unwrap_or(0.0));
        CrossoverDesign::with_names(layout, names, n, times, t_domain)
    }

    pub fn grid(&self) -> Result<TuningGrid> {
        match self.tuning.as_ref().and_then(|t| t.grid.clone()) {
            Some(g) => TuningGrid::new(g),
            None => Ok(TuningGrid::default()),
        }
    }

    pub fn scenarios(&self) -> Result<Vec<SimulationScenario>> {
        let s = &self.simulation;
        let mut out = match (&s.preset, s.l, s.n) {
            (Some(p), _, _) => preset(p)?,
            (None, Some(l), Some(n)) => s
                .beta1
                .clone()
                .unwrap_or_else(|| vec![-1.0, 0.0, 1.0])
                .into_iter()
                .map(|b| SimulationScenario::new(l, n, b))
                .collect(),
            _ => return Err(Error::InvalidConfig("simulation needs a preset or both l and n".into())),
        };
        for sc in &mut out {
            if let Some(r) = s.replicates {
                sc.replicates = r;
            }
            if let Some(seed) = self.seed {
                sc.seed = seed;
            }
            if let Some(sigma) = s.sigma {
                sc.sigma = sigma;
            }
            if let Some(c) = &s.criterion {
                sc.criterion = c.parse()?;
            }
            match s.basis.as_deref() {
                None | Some("bspline") => {}
                Some("fourier") => *sc = sc.clone().with_fourier(1),
                Some(other) => return Err(Error::InvalidConfig(format!("unknown simulation basis `{other}`"))),
            }
            sc.validate()?;
        }
        Ok(out)
    }

    pub fn models(&self) -> Result<Vec<ModelKind>> {
        match &self.simulation.models {
            Some(m) => m.iter().map(|s| s.parse()).collect(),
            None => Ok(ModelKind::ALL.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub curve_id: String,
    pub time: f64,
    pub estimate: f64,
    pub lo90: f64,
    pub hi90: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub lo99: f64,
    pub hi99: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub family: Family,
    pub correlation: CorrelationSpec,
    pub iterations: usize,
    pub converged: bool,
    pub alpha: Vec<f64>,
    pub phi: f64,
    pub edf: f64,
    pub qic: Option<f64>,
    pub lambda_time: f64,
    pub lambda_carry: Vec<f64>,
}

pub fn estimate_rows(fit: &FitResult) -> Vec<EstimateRow> {
    fit.names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let estimate = fit.coefficients[j];
            let se = fit.std_error(j);
            let z = estimate / se;
            EstimateRow { name: name.clone(), estimate, se, z, p: two_sided_p(z) }
        })
        .collect()
}

/// Pointwise bands for the time curve and every carry-over curve on a uniform
/// grid over `[0, t_domain]`.
pub fn curve_rows(fit: &FitResult, basis: &crate::basis::BasisMatrix, t_domain: f64, points: usize) -> Result<Vec<CurveRow>> {
    let grid: Vec<f64> = (0..points).map(|i| t_domain * i as f64 / (points - 1) as f64).collect();
    let mut rows = Vec::new();
    for (kind, label, _) in &fit.blocks {
        let id = match kind {
            BlockKind::Beta => continue,
            BlockKind::Time => "time".to_string(),
            BlockKind::Carry(_) => format!("carry[{label}]"),
        };
        let band = curve_band(fit, basis, *kind, &grid, &DEFAULT_LEVELS)?;
        let iv: Vec<(Vec<f64>, Vec<f64>)> =
            DEFAULT_LEVELS.iter().map(|&l| band.interval(l).expect("level present")).collect();
        for i in 0..grid.len() {
            rows.push(CurveRow {
                curve_id: id.clone(),
                time: grid[i],
                estimate: band.estimate[i],
                lo90: iv[0].0[i],
                hi90: iv[0].1[i],
                lo95: iv[1].0[i],
                hi95: iv[1].1[i],
                lo99: iv[2].0[i],
                hi99: iv[2].1[i],
            });
        }
    }
    Ok(rows)
}

pub fn write_rows<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    finish(w)
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(text: &str) -> Result<Vec<T>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Grid table: one column per λ plus the score.
pub fn tuning_csv(result: &TuningResult, carry_labels: &[String]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["lambda_time".to_string()];
    header.extend(carry_labels.iter().map(|l| format!("lambda_carry[{l}]")));
    header.extend(["score".to_string(), "converged".to_string()]);
    w.write_record(&header)?;
    for e in &result.table {
        let mut rec = vec![e.lambda_time.to_string()];
        rec.extend((0..carry_labels.len()).map(|c| e.penalties().carry_for(c).to_string()));
        rec.extend([e.score.to_string(), e.converged.to_string()]);
        w.write_record(&rec)?;
    }
    finish(w)
}

/// Parses [`tuning_csv`] output into `(penalties, score, converged)` rows.
pub fn parse_tuning_csv(text: &str) -> Result<Vec<(Penalties, f64, bool)>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let width = rdr.headers()?.len();
    if width < 3 {
        return Err(Error::InvalidInput("tuning table needs lambda_time, score and converged".into()));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |j: usize| -> Result<f64> {
            rec[j].parse().map_err(|_| Error::NonNumericValue { line: i + 2, column: j.to_string() })
        };
        let carry = (1..width - 2).map(num).collect::<Result<Vec<f64>>>()?;
        let converged = rec[width - 1]
            .parse()
            .map_err(|_| Error::NonNumericValue { line: i + 2, column: "converged".into() })?;
        out.push((Penalties::new(num(0)?, carry), num(width - 2)?, converged));
    }
    Ok(out)
}

pub fn selected_csv(result: &TuningResult) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["effect", "lambda"])?;
    w.write_record(["time".to_string(), result.selected.lambda_time.to_string()])?;
    for (effect, lambda) in &result.per_effect_lambda {
        if effect != "time" {
            w.write_record([format!("carry[{effect}]"), lambda.to_string()])?;
        }
    }
    finish(w)
}

#[derive(Debug, Parser)]
#[command(name = "pgee", version, about = "Penalized GEE for crossover designs with carry-over curves")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Certify estimability of a design and basis.
    Check(CommonArgs),
    /// Fit the penalized model and write estimates, curves and diagnostics.
    Fit(FitArgs),
    /// Select smoothing parameters over a grid.
    Tune(TuneArgs),
    /// Run the Monte Carlo study.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Long-format CSV (overrides `data.path`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Layout file (overrides `design.layout`).
    #[arg(long)]
    pub design: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Keep a fit that hit the iteration limit.
    #[arg(long)]
    pub allow_nonconverged: bool,
    /// Fit even when the design is not certified estimable.
    #[arg(long)]
    pub allow_rank_deficient: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// qic, loco_cv or gcv (overrides `tuning.criterion`).
    #[arg(long)]
    pub criterion: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Named scenario, e.g. `L20-n10` or `L10-n2-fourier`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated model names; all six by default.
    #[arg(long, value_delimiter = ',')]
    pub models: Vec<String>,
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Run replicates on the calling thread only.
    #[arg(long)]
    pub sequential: bool,
}

/// Outcome of one command: exit code, files written and the console report.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub files: Vec<PathBuf>,
    pub message: String,
}

pub fn exit_code(err: &Error) -> i32 {
    if err.is_numerical() {
        2
    } else {
        1
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(o) => {
            print!("{}", o.message);
            o.code
        }
        Err(e) => {
            eprintln!("pgee: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &common.data {
        cfg.data.path = Some(d.clone());
    }
    if let Some(d) = &common.design {
        cfg.design.layout = Some(d.clone());
    }
    if let Some(o) = &common.out {
        cfg.output.dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<Option<LongDataset>> {
    match &cfg.data.path {
        Some(p) => {
            let f = fs::File::open(p).map_err(|e| Error::InvalidConfig(format!("cannot open {}: {e}", p.display())))?;
            parse_long_csv(f).map(Some)
        }
        None => Ok(None),
    }
}

fn require_data(cfg: &RunConfig) -> Result<LongDataset> {
    load_data(cfg)?.ok_or_else(|| Error::InvalidConfig("a data file is required (data.path or --data)".into()))
}

struct Writer {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Writer {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), files: Vec::new() })
    }

    fn put(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, contents)?;
        self.files.push(path);
        Ok(())
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

pub fn execute(cmd: &Command) -> Result<Outcome> {
    match cmd {
        Command::Check(a) => cmd_check(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

fn cmd_check(args: &CommonArgs) -> Result<Outcome> {
    let cfg = load_config(args)?;
    let data = load_data(&cfg)?;
    let design = cfg.build_design(data.as_ref())?;
    let basis = cfg.basis(design.t_domain())?;
    let report = check_estimability(&design, &basis);
    let mut w = Writer::new(&cfg.output.dir)?;
    w.put("report.json", &to_json(&report))?;
    Ok(Outcome { code: if report.estimable { 0 } else { 1 }, files: w.files, message: report.to_text() })
}

fn tune_with(cfg: &RunConfig, problem: &crate::pgee::Problem, data: &Observations, spec: &ModelSpec) -> Result<TuningResult> {
    let t = cfg.tuning.clone().unwrap_or_default();
    let sel = SelectConfig {
        sweeps: t.sweeps,
        tune_time: t.tune_time,
        tune_carry: t.tune_carry,
        start: None,
        ..SelectConfig::new(t.criterion.parse()?)
    };
    select_with(problem, data, &spec.options(), &cfg.grid()?, &sel)
}

fn cmd_fit(args: &FitArgs) -> Result<Outcome> {
    let mut cfg = load_config(&args.common)?;
    cfg.model.allow_rank_deficient |= args.allow_rank_deficient;
    cfg.model.allow_nonconverged |= args.allow_nonconverged;
    let dataset = require_data(&cfg)?;
    let design = cfg.build_design(Some(&dataset))?;
    let mut spec = cfg.model_spec(design.t_domain())?;
    let problem = spec.problem(&design)?;
    let data = dataset.observations(&design, spec.family)?;
    if cfg.tuning.is_some() {
        let tuned = tune_with(&cfg, &problem, &data, &spec)?;
        spec = spec.with_penalties(&tuned.selected.penalties());
    }
    let fit = problem.fit(&data, &spec.options(), &spec.penalties())?;
    if !fit.converged && !cfg.model.allow_nonconverged {
        return Err(Error::NotConverged { iterations: fit.iterations, change: fit.trace.last().copied().unwrap_or(f64::NAN) });
    }

    let basis = problem.basis().expect("design problems carry a basis");
    let meta = FitMeta {
        family: fit.family,
        correlation: fit.correlation,
        iterations: fit.iterations,
        converged: fit.converged,
        alpha: fit.alpha.alpha.clone(),
        phi: fit.dispersion,
        edf: fit.edf,
        qic: qic(&fit, &data, None).ok().map(|q| q.qic),
        lambda_time: spec.lambda_time,
        lambda_carry: (0..problem.num_carry()).map(|c| spec.penalties().carry_for(c)).collect(),
    };
    let estimates = estimate_rows(&fit);
    let mut w = Writer::new(&cfg.output.dir)?;
    w.put("estimates.csv", &write_rows(&estimates)?)?;
    w.put("curves.csv", &write_rows(&curve_rows(&fit, basis, design.t_domain(), cfg.output.grid_points)?)?)?;
    w.put("fit_meta.json", &to_json(&meta))?;

    let mut message =
        format!("converged: {} after {} iterations, phi {:.6}\n", fit.converged, fit.iterations, fit.dispersion);
    for e in estimates.iter().filter(|e| !e.name.starts_with("time[") && !e.name.starts_with("carry[")) {
        message.push_str(&format!("  {:<16} {:>12.6} (se {:.6}, p {:.4})\n", e.name, e.estimate, e.se, e.p));
    }
    Ok(Outcome { code: 0, files: w.files, message })
}

fn cmd_tune(args: &TuneArgs) -> Result<Outcome> {
    let mut cfg = load_config(&args.common)?;
    let mut t = cfg.tuning.clone().unwrap_or_default();
    if let Some(c) = &args.criterion {
        c.parse::<Criterion>()?;
        t.criterion = c.clone();
    }
    cfg.tuning = Some(t);
    let dataset = require_data(&cfg)?;
    let design = cfg.build_design(Some(&dataset))?;
    let spec = cfg.model_spec(design.t_domain())?;
    let problem = spec.problem(&design)?;
    let data = dataset.observations(&design, spec.family)?;
    let result = tune_with(&cfg, &problem, &data, &spec)?;
    let labels: Vec<String> = problem.pairs().iter().map(|p| p.to_string()).collect();

    let mut w = Writer::new(&cfg.output.dir)?;
    w.put("tuning.csv", &tuning_csv(&result, &labels)?)?;
    w.put("selected.csv", &selected_csv(&result)?)?;
    let mut message = format!("criterion {}: score {}\n", result.criterion, result.selected.score);
    for (effect, lambda) in &result.per_effect_lambda {
        message.push_str(&format!("  {effect}: lambda {lambda}\n"));
    }
    Ok(Outcome { code: 0, files: w.files, message })
}

fn cmd_simulate(args: &SimulateArgs) -> Result<Outcome> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = &args.preset {
        cfg.simulation.preset = Some(p.clone());
    }
    if let Some(r) = args.replicates {
        cfg.simulation.replicates = Some(r);
    }
    if let Some(s) = args.seed {
        cfg.seed = Some(s);
    }
    if !args.models.is_empty() {
        cfg.simulation.models = Some(args.models.clone());
    }
    if let Some(o) = &args.out {
        cfg.output.dir = o.clone();
    }
    let scenarios = cfg.scenarios()?;
    let models = cfg.models()?;
    let exec = if args.sequential { Execution::Sequential } else { Execution::Parallel };
    let summary = run_table(&scenarios, &models, exec)?;
    let table = table_csv(&summary);
    let mut w = Writer::new(&cfg.output.dir)?;
    w.put("table.csv", &table)?;
    w.put("summary.csv", &summary_csv(&summary)?)?;
    Ok(Outcome { code: 0, files: w.files, message: table })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(rows_missing: usize) -> String {
        let mut s = String::from("unit,sequence,period,time,treatment,y\n");
        let mut skipped = 0;
        for (u, seq, tr) in [("u1", "AB", ["A", "B"]), ("u2", "BA", ["B", "A"])] {
            for p in 1..=2 {
                for t in 1..=3 {
                    if u == "u1" && p == 2 && t == 3 && skipped < rows_missing {
                        skipped += 1;
                        continue;
                    }
                    s.push_str(&format!("{u},{seq},{p},{t},{},{}\n", tr[p - 1], p * t));
                }
            }
        }
        s
    }

    #[test]
    fn toy_file_parses() {
        let d = parse_long_csv(toy(0).as_bytes()).unwrap();
        assert_eq!(d.rows().len(), 12);
        assert_eq!(d.obs_per_period(), 3);
        assert_eq!(d.periods(), 2);
        let (names, layout) = d.layout().unwrap();
        assert_eq!(names, ["AB", "BA"]);
        assert_eq!(layout[1], ["B", "A"]);
    }

    #[test]
    fn missing_row_is_incomplete_panel() {
        match parse_long_csv(toy(1).as_bytes()) {
            Err(Error::IncompletePanel { unit, period }) => assert_eq!((unit.as_str(), period), ("u1", 2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_column_and_bad_number() {
        let text = toy(0).replace("treatment", "arm");
        assert!(matches!(parse_long_csv(text.as_bytes()), Err(Error::MissingColumn(c)) if c == "treatment"));
        let text = toy(0).replacen("u1,AB,1,2,A,2", "u1,AB,1,2,A,abc", 1);
        assert!(matches!(parse_long_csv(text.as_bytes()), Err(Error::NonNumericValue { line: 3, ref column }) if column == "y"));
    }

    #[test]
    fn denominators_require_proportions() {
        let mut text = String::from("unit,sequence,period,time,treatment,y,denominator\n");
        for (u, seq, tr) in [("u1", "AB", ["A", "B"]), ("u2", "BA", ["B", "A"])] {
            for p in 1..=2 {
                for t in 1..=3 {
                    text.push_str(&format!("{u},{seq},{p},{t},{},0.25,4\n", tr[p - 1]));
                }
            }
        }
        let d = parse_long_csv(text.as_bytes()).unwrap();
        assert_eq!(d.rows()[0].denominator, Some(4));
        let bad = text.replacen("0.25,4", "1.5,4", 1);
        assert!(matches!(parse_long_csv(bad.as_bytes()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn rows_are_normalized() {
        let text = toy(0);
        let mut lines: Vec<&str> = text.lines().collect();
        let header = lines.remove(0);
        lines.reverse();
        let shuffled = format!("{header}\n{}\n", lines.join("\n"));
        assert_eq!(parse_long_csv(shuffled.as_bytes()).unwrap(), parse_long_csv(text.as_bytes()).unwrap());
    }

    #[test]
    fn dataset_csv_round_trips() {
        let d = parse_long_csv(toy(0).as_bytes()).unwrap();
        let again = parse_long_csv(d.to_csv().unwrap().as_bytes()).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let text = "seed = 7\n[model]\nfamily = \"poisson\"\n[penalty]\nlambda_time = 10.0\nlambda_carry = [1.0, 2.0]\n[tuning]\ncriterion = \"gcv\"\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.family().unwrap(), Family::Poisson);
        assert_eq!(cfg.penalty.lambda_carry.to_vec(), [1.0, 2.0]);
        assert_eq!(RunConfig::parse(&cfg.to_toml().unwrap()).unwrap(), cfg);
        assert!(matches!(RunConfig::parse("[model]\nfamly = \"x\"\n"), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn exit_codes_split_input_from_numerics() {
        assert_eq!(exit_code(&Error::MissingColumn("y".into())), 1);
        assert_eq!(exit_code(&Error::NotConverged { iterations: 3, change: 1.0 }), 2);
        assert_eq!(exit_code(&Error::SingularBread), 2);
    }
}
