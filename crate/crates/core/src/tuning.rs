//! Smoothing-parameter selection by QIC, GCV or leave-one-unit-out CV.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::Family;
use crate::linalg::CompensatedSum;
use crate::par::{map_indices, map_slice, Execution};
use crate::pgee::{BlockKind, FitOptions, FitResult, Observations, Penalties, Problem};

const TIE_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Qic,
    LocoCv,
    Gcv,
}

impl FromStr for Criterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "qic" => Ok(Criterion::Qic),
            "loco_cv" | "cv" | "loco" => Ok(Criterion::LocoCv),
            "gcv" => Ok(Criterion::Gcv),
            other => Err(Error::InvalidConfig(format!("unknown criterion `{other}`"))),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Criterion::Qic => "qic",
            Criterion::LocoCv => "loco_cv",
            Criterion::Gcv => "gcv",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    lambda_values: Vec<f64>,
}

impl Default for TuningGrid {
    /// `{0, 0.01, 0.1, 1, 10, …, 10⁹}`.
    fn default() -> Self {
        let mut v = vec![0.0, 0.01, 0.1];
        v.extend((0..=9).map(|e| 10f64.powi(e)));
        Self { lambda_values: v }
    }
}

impl TuningGrid {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidConfig("grid needs finite non-negative values".into()));
        }
        values.sort_by(f64::total_cmp);
        values.dedup();
        Ok(Self { lambda_values: values })
    }

    pub fn values(&self) -> &[f64] {
        &self.lambda_values
    }

    pub fn median(&self) -> f64 {
        self.lambda_values[(self.lambda_values.len() - 1) / 2]
    }

    pub fn min(&self) -> f64 {
        self.lambda_values[0]
    }

    pub fn max(&self) -> f64 {
        *self.lambda_values.last().expect("non-empty grid")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub lambda_time: f64,
    pub lambda_carry: Vec<f64>,
    pub score: f64,
    pub converged: bool,
}

impl GridEntry {
    pub fn penalties(&self) -> Penalties {
        Penalties::new(self.lambda_time, self.lambda_carry.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuningResult {
    pub criterion: Criterion,
    /// Every evaluated point, in evaluation order.
    pub table: Vec<GridEntry>,
    pub selected: GridEntry,
    /// `"time"` and each carry-over pair label → selected λ.
    pub per_effect_lambda: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QicValue {
    pub qic: f64,
    pub quasi_likelihood: f64,
    pub trace: f64,
    pub scale: f64,
}

/// `−2Q(μ̂; y)/φ + 2·tr(Ω_I·V_r)` over all coefficients.
///
/// `scale` overrides φ; otherwise φ = 1 for binomial/poisson and the fit's
/// φ̂ for gaussian.
pub fn qic(fit: &FitResult, data: &Observations, scale: Option<f64>) -> Result<QicValue> {
    let phi = match (scale, fit.family) {
        (Some(s), _) => s,
        (None, Family::Gaussian) => fit.dispersion,
        (None, _) => 1.0,
    };
    let phi = if phi > 0.0 && phi.is_finite() { phi } else { 1.0 };
    let q: CompensatedSum = (0..data.y.len())
        .map(|i| {
            let w = data.weights.as_ref().map_or(1.0, |w| w[i]);
            fit.family.quasi_likelihood(data.y[i], fit.fitted[i], w)
        })
        .collect();
    let q = q.value() / phi;
    if !q.is_finite() {
        return Err(Error::NonFiniteQuasiLikelihood);
    }
    let trace = (&fit.independence_info * &fit.vcov_joint).trace() / phi;
    Ok(QicValue { qic: -2.0 * q + 2.0 * trace, quasi_likelihood: q, trace, scale: phi })
}

/// `‖y − μ̂‖² / (1 − tr(S_λ)/N)²`.
pub fn gcv(fit: &FitResult, data: &Observations) -> Result<f64> {
    if fit.family != Family::Gaussian {
        return Err(Error::InvalidModel("GCV needs the gaussian family".into()));
    }
    let n = data.y.len() as f64;
    if fit.edf >= n - 1e-9 {
        return Err(Error::EffectiveDofTooLarge { trace: fit.edf, n: data.y.len() });
    }
    let rss: CompensatedSum = data.y.iter().zip(&fit.fitted).map(|(y, m)| (y - m) * (y - m)).collect();
    Ok(rss.value() / (1.0 - fit.edf / n).powi(2))
}

/// `Σᵢ ‖yᵢ − μ̂ᵢ^(−i)‖²` with each unit predicted from a fit without it.
/// Returns `+∞` if any held-out fit fails to converge.
pub fn loco_cv_score(problem: &Problem, data: &Observations, opts: &FitOptions, pen: &Penalties) -> Result<f64> {
    if problem.num_units() < 3 {
        return Err(Error::TooFewUnits(problem.num_units()));
    }
    let inner = FitOptions { execution: Execution::Sequential, ..*opts };
    let parts = map_indices(problem.num_units(), opts.execution, |i| -> Result<f64> {
        let rows = problem.unit_rows(i);
        let sub = problem.without_unit(i)?;
        let fit = sub.fit(&data.without_rows(rows.clone()), &inner, pen)?;
        if !fit.converged {
            return Ok(f64::INFINITY);
        }
        let eta = problem.x().rows(rows.start, rows.len()) * &fit.coefficients;
        Ok(rows
            .zip(eta.iter())
            .map(|(r, &e)| {
                let d = data.y[r] - opts.family.eval(e).0;
                d * d
            })
            .sum())
    });
    let mut total = CompensatedSum::default();
    for p in parts {
        total.add(p?);
    }
    Ok(total.value())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectConfig {
    pub criterion: Criterion,
    pub sweeps: usize,
    pub tune_time: bool,
    pub tune_carry: bool,
    /// Starting values; `None` means the grid median.
    pub start: Option<Penalties>,
    /// QIC scale; `None` takes φ̂ from the least-penalized fit for gaussian data.
    pub qic_scale: Option<f64>,
}

impl SelectConfig {
    pub fn new(criterion: Criterion) -> Self {
        Self { criterion, sweeps: 1, tune_time: true, tune_carry: true, start: None, qic_scale: None }
    }
}

/// Coordinate-wise grid search with one sweep and ties broken toward larger λ.
pub fn select(
    problem: &Problem,
    data: &Observations,
    opts: &FitOptions,
    grid: &TuningGrid,
    criterion: Criterion,
) -> Result<TuningResult> {
    select_with(problem, data, opts, grid, &SelectConfig::new(criterion))
}

pub fn loco_cv(problem: &Problem, data: &Observations, opts: &FitOptions, grid: &TuningGrid) -> Result<TuningResult> {
    select(problem, data, opts, grid, Criterion::LocoCv)
}

struct Scorer<'a> {
    problem: &'a Problem,
    data: &'a Observations,
    opts: FitOptions,
    criterion: Criterion,
    scale: Option<f64>,
}

impl Scorer<'_> {
    fn score(&self, pen: &Penalties) -> (f64, bool) {
        let result = match self.criterion {
            Criterion::LocoCv => {
                loco_cv_score(self.problem, self.data, &self.opts, pen).map(|s| (s, s.is_finite()))
            }
            Criterion::Qic | Criterion::Gcv => self.problem.fit(self.data, &self.opts, pen).and_then(|fit| {
                if !fit.converged {
                    return Ok((f64::INFINITY, false));
                }
                let s = match self.criterion {
                    Criterion::Qic => qic(&fit, self.data, self.scale)?.qic,
                    _ => gcv(&fit, self.data)?,
                };
                Ok((s, true))
            }),
        };
        match result {
            Ok((s, ok)) if s.is_finite() => (s, ok),
            _ => (f64::INFINITY, false),
        }
    }
}

fn key(p: &Penalties) -> Vec<u64> {
    std::iter::once(p.time).chain(p.carry.iter().copied()).map(f64::to_bits).collect()
}

/// Index of the minimum, preferring the later (larger-λ) entry within a relative tie band.
fn argmin_prefer_last(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        let b = scores[best];
        let tie = s.is_finite() && b.is_finite() && (s - b).abs() <= TIE_RTOL * b.abs().max(s.abs());
        if s < b || tie || (b.is_infinite() && s.is_infinite()) {
            best = i;
        }
    }
    best
}

pub fn select_with(
    problem: &Problem,
    data: &Observations,
    opts: &FitOptions,
    grid: &TuningGrid,
    cfg: &SelectConfig,
) -> Result<TuningResult> {
    if cfg.criterion == Criterion::LocoCv && problem.num_units() < 3 {
        return Err(Error::TooFewUnits(problem.num_units()));
    }
    if cfg.criterion == Criterion::Gcv && opts.family != Family::Gaussian {
        return Err(Error::InvalidModel("GCV needs the gaussian family".into()));
    }
    let c = problem.num_carry();
    let mut current = cfg.start.clone().unwrap_or_else(|| Penalties::new(grid.median(), vec![grid.median(); c]));
    if current.carry.len() != c {
        current.carry = (0..c).map(|k| current.carry_for(k)).collect();
    }

    let scale = match (cfg.criterion, cfg.qic_scale, opts.family) {
        (Criterion::Qic, Some(s), _) => Some(s),
        (Criterion::Qic, None, Family::Gaussian) => {
            let reference = Penalties::new(grid.min(), vec![grid.min(); c]);
            problem.fit(data, opts, &reference).ok().map(|f| f.dispersion).filter(|d| *d > 0.0)
        }
        _ => None,
    };
    let inner = FitOptions { execution: Execution::Sequential, ..*opts };
    let scorer = Scorer { problem, data, opts: inner, criterion: cfg.criterion, scale };

    let mut cache: HashMap<Vec<u64>, (f64, bool)> = HashMap::new();
    let mut table = Vec::new();
    let evaluate = |cands: Vec<Penalties>, cache: &mut HashMap<Vec<u64>, (f64, bool)>, table: &mut Vec<GridEntry>| {
        let todo: Vec<Penalties> = cands.iter().filter(|p| !cache.contains_key(&key(p))).cloned().collect();
        let scored = map_slice(&todo, opts.execution, |p| scorer.score(p));
        for (p, (s, ok)) in todo.iter().zip(scored) {
            cache.insert(key(p), (s, ok));
            table.push(GridEntry { lambda_time: p.time, lambda_carry: p.carry.clone(), score: s, converged: ok });
        }
        cands.iter().map(|p| cache[&key(p)].0).collect::<Vec<f64>>()
    };

    evaluate(vec![current.clone()], &mut cache, &mut table);
    for _ in 0..cfg.sweeps.max(1) {
        let mut coords: Vec<Option<usize>> = Vec::new();
        if cfg.tune_time {
            coords.push(None);
        }
        if cfg.tune_carry {
            coords.extend((0..c).map(Some));
        }
        for coord in coords {
            let cands: Vec<Penalties> = grid
                .values()
                .iter()
                .map(|&v| {
                    let mut p = current.clone();
                    match coord {
                        None => p.time = v,
                        Some(k) => p.carry[k] = v,
                    }
                    p
                })
                .collect();
            let scores = evaluate(cands.clone(), &mut cache, &mut table);
            current = cands[argmin_prefer_last(&scores)].clone();
        }
    }

    let (score, converged) = cache[&key(&current)];
    let selected = GridEntry { lambda_time: current.time, lambda_carry: current.carry.clone(), score, converged };
    let mut per_effect_lambda = BTreeMap::new();
    per_effect_lambda.insert("time".to_string(), current.time);
    for b in problem.blocks() {
        if let BlockKind::Carry(k) = b.kind {
            per_effect_lambda.insert(b.label.clone(), current.carry[k]);
        }
    }
    Ok(TuningResult { criterion: cfg.criterion, table, selected, per_effect_lambda })
}

/// Exhaustive search over the full factorial grid (small problems only).
pub fn exhaustive(
    problem: &Problem,
    data: &Observations,
    opts: &FitOptions,
    grid: &TuningGrid,
    criterion: Criterion,
    qic_scale: Option<f64>,
) -> Result<GridEntry> {
    let c = problem.num_carry();
    let g = grid.values();
    let total = g.len().pow(c as u32 + 1);
    let inner = FitOptions { execution: Execution::Sequential, ..*opts };
    let scorer = Scorer { problem, data, opts: inner, criterion, scale: qic_scale };
    let points: Vec<Penalties> = (0..total)
        .map(|mut idx| {
            let mut vals = Vec::with_capacity(c + 1);
            for _ in 0..=c {
                vals.push(g[idx % g.len()]);
                idx /= g.len();
            }
            Penalties::new(vals[0], vals[1..].to_vec())
        })
        .collect();
    let scores = map_slice(&points, opts.execution, |p| scorer.score(p));
    let best = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::InvalidConfig("empty grid".into()))?;
    Ok(GridEntry {
        lambda_time: points[best].time,
        lambda_carry: points[best].carry.clone(),
        score: scores[best].0,
        converged: scores[best].1,
    })
}

/// Penalized residual sum of squares plus complexity, the gaussian reduction of QIC.
pub fn gaussian_qic_reduction(fit: &FitResult, data: &Observations, scale: f64) -> f64 {
    let rss: f64 = data.y.iter().zip(&fit.fitted).map(|(y, m)| (y - m) * (y - m)).sum();
    rss / scale + 2.0 * (&fit.independence_info * &fit.vcov_joint).trace() / scale
}

#[doc(hidden)]
pub fn coefficient_norm(fit: &FitResult, kind: BlockKind) -> f64 {
    fit.block_coefficients(kind).map_or(0.0, |v: DVector<f64>| v.norm())
}
