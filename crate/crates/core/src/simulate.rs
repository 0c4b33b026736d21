//! Monte Carlo study on the two-period AB/BA layout.
//!
//! `Y = β₀ + β₁x₁ + β₂x₂ + f(Z) + f₁(Z)·1{AB, period 2} + f₂(Z)·1{BA, period 2} + ε`
//! with `f = f₁ = sin(2πZ/L)`, `f₂ = cos(2πZ/L)`, `Z = 1..L`, all centered over
//! the grid.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, PenaltyOrder};
use crate::correlation::CorrelationSpec;
use crate::design::CrossoverDesign;
use crate::error::{Error, Result};
use crate::glm::Family;
use crate::inference::{normal_quantile, two_sided_p};
use crate::par::{map_indices, Execution};
use crate::pgee::{Block, BlockKind, FitOptions, FitResult, Observations, Penalties, Problem};
use crate::tuning::{qic, select_with, Criterion, SelectConfig, TuningGrid};

pub const Z_975: f64 = 1.959964;
const GAM_CARRY_LAMBDA: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    GeeMain,
    GamTime,
    GeeCarry,
    GeeInt,
    GeeSmooth,
    GeeSpline,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::GamTime,
        ModelKind::GeeCarry,
        ModelKind::GeeInt,
        ModelKind::GeeMain,
        ModelKind::GeeSmooth,
        ModelKind::GeeSpline,
    ];
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::GeeMain => "GEE-main",
            ModelKind::GamTime => "GAM-time",
            ModelKind::GeeCarry => "GEE-carry",
            ModelKind::GeeInt => "GEE-int",
            ModelKind::GeeSmooth => "GEE-smooth",
            ModelKind::GeeSpline => "GEE-spline",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase().replace('_', "-");
        ModelKind::ALL
            .into_iter()
            .find(|m| m.to_string().to_ascii_lowercase() == t)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationScenario {
    /// `(β₀, β₁, β₂)`.
    pub beta: [f64; 3],
    pub sigma: f64,
    pub l: usize,
    pub n_per_sequence: usize,
    pub replicates: usize,
    pub seed: u64,
    pub basis: BasisSpec,
    pub correlation: CorrelationSpec,
    pub criterion: Criterion,
    pub grid: TuningGrid,
}

impl SimulationScenario {
    /// Cubic B-splines with three internal knots, exchangeable working correlation.
    pub fn new(l: usize, n_per_sequence: usize, beta1: f64) -> Self {
        Self {
            beta: [0.0, beta1, 0.2],
            sigma: 1.0,
            l,
            n_per_sequence,
            replicates: 200,
            seed: 20240601,
            basis: BasisSpec::bspline(4, 3, l as f64),
            correlation: CorrelationSpec::Exchangeable,
            criterion: Criterion::Qic,
            grid: TuningGrid::default(),
        }
    }

    pub fn with_fourier(mut self, harmonics: usize) -> Self {
        self.basis = BasisSpec::fourier(harmonics, self.l as f64);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.l < 2 || self.n_per_sequence < 1 {
            return Err(Error::InvalidConfig("need L >= 2 and n >= 1".into()));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::InvalidConfig("sigma must be non-negative".into()));
        }
        if (self.basis.t_domain - self.l as f64).abs() > 1e-12 {
            return Err(Error::InvalidConfig("basis domain must equal L".into()));
        }
        self.basis.validate()
    }

    pub fn design(&self) -> Result<CrossoverDesign> {
        let seqs = vec![vec!["A".to_string(), "B".to_string()], vec!["B".to_string(), "A".to_string()]];
        CrossoverDesign::with_names(
            seqs,
            vec!["AB".into(), "BA".into()],
            self.n_per_sequence,
            self.times(),
            self.l as f64,
        )
    }

    pub fn times(&self) -> Vec<f64> {
        (1..=self.l).map(|k| k as f64).collect()
    }
}

/// Named presets; each expands to one scenario per `β₁ ∈ {−1, 0, 1}`.
pub fn preset(name: &str) -> Result<Vec<SimulationScenario>> {
    let rest = name.strip_prefix("paper-").unwrap_or(name);
    let (rest, fourier) = match rest.strip_suffix("-fourier") {
        Some(r) => (r, true),
        None => (rest, false),
    };
    let (l, n) = rest
        .split_once('-')
        .and_then(|(a, b)| Some((a.strip_prefix('L')?.parse().ok()?, b.strip_prefix('n')?.parse().ok()?)))
        .ok_or_else(|| Error::InvalidConfig(format!("unknown preset `{name}`")))?;
    Ok([-1.0, 0.0, 1.0]
        .into_iter()
        .map(|b| {
            let s = SimulationScenario::new(l, n, b);
            if fourier {
                s.with_fourier(1)
            } else {
                s
            }
        })
        .collect())
}

/// The centered truth `(f, f₁, f₂)` on `Z = 1..L`.
pub fn truth(l: usize) -> [Vec<f64>; 3] {
    let raw = |g: fn(f64) -> f64| {
        let v: Vec<f64> = (1..=l).map(|k| g(2.0 * PI * k as f64 / l as f64)).collect();
        let m = v.iter().sum::<f64>() / l as f64;
        v.into_iter().map(|x| x - m).collect::<Vec<f64>>()
    };
    [raw(f64::sin), raw(f64::sin), raw(f64::cos)]
}

#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub design: CrossoverDesign,
    pub observations: Observations,
}

/// One dataset; the noise stream is `(seed, replicate_index)` on ChaCha20.
pub fn generate_dataset(scenario: &SimulationScenario, replicate_index: usize) -> Result<SimulatedDataset> {
    scenario.validate()?;
    let design = scenario.design()?;
    let observations = Observations::new(responses(scenario, replicate_index));
    Ok(SimulatedDataset { design, observations })
}

fn responses(scenario: &SimulationScenario, replicate_index: usize) -> Vec<f64> {
    let mut rng = ChaCha20Rng::seed_from_u64(scenario.seed);
    rng.set_stream(replicate_index as u64);
    let noise = Normal::new(0.0, scenario.sigma.max(0.0)).expect("valid sigma");
    let [f, f1, f2] = truth(scenario.l);
    let [b0, b1, b2] = scenario.beta;
    let mut y = Vec::with_capacity(4 * scenario.n_per_sequence * scenario.l);
    for seq in 0..2 {
        for _ in 0..scenario.n_per_sequence {
            for period in 0..2 {
                let x1 = f64::from(u8::from((seq == 0) == (period == 1)));
                let x2 = period as f64;
                for k in 0..scenario.l {
                    let carry = match (seq, period) {
                        (0, 1) => f1[k],
                        (1, 1) => f2[k],
                        _ => 0.0,
                    };
                    let e = if scenario.sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                    y.push(b0 + b1 * x1 + b2 * x2 + f[k] + carry + e);
                }
            }
        }
    }
    y
}

/// Prebuilt problems for every comparator model of one scenario.
pub struct ModelBank {
    scenario: SimulationScenario,
    full: Problem,
    no_carry: Problem,
    main: Problem,
    carry: Problem,
    interaction: Problem,
}

fn parametric_problem(full: &Problem, extra: &[Vec<f64>], extra_names: &[&str], periods: usize, obs: usize) -> Result<Problem> {
    let beta = full.block(BlockKind::Beta).expect("beta block").cols.clone();
    let n = full.x().nrows();
    let p = beta.len() + extra.len();
    let mut x = DMatrix::zeros(n, p);
    x.columns_mut(0, beta.len()).copy_from(&full.x().columns(beta.start, beta.len()));
    for (j, col) in extra.iter().enumerate() {
        x.set_column(beta.len() + j, &DVector::from_column_slice(col));
    }
    let mut names: Vec<String> = full.coef_names()[beta.clone()].to_vec();
    names.extend(extra_names.iter().map(|s| s.to_string()));
    let blocks = vec![Block { kind: BlockKind::Beta, label: "beta".into(), cols: 0..p, penalty: None }];
    Problem::custom(x, blocks, periods, obs, names, Some(0))
}

impl ModelBank {
    pub fn new(scenario: &SimulationScenario) -> Result<Self> {
        scenario.validate()?;
        let design = scenario.design()?;
        let full = Problem::from_design(
            &design,
            &scenario.basis,
            scenario.basis.default_penalty_order(),
            PenaltyOrder::Ridge,
        )?;
        let (periods, obs) = (2, scenario.l);

        // the "previous treatment was B" indicator: BA units in period 2
        let m = periods * obs;
        let mut carry = vec![0.0; full.x().nrows()];
        let mut inter = vec![0.0; full.x().nrows()];
        let mut time = vec![0.0; full.x().nrows()];
        let zbar = (scenario.l as f64 + 1.0) / 2.0;
        for (r, t) in time.iter_mut().enumerate() {
            *t = (r % obs + 1) as f64 - zbar;
        }
        for unit in design.num_units() / 2..design.num_units() {
            for k in 0..obs {
                let r = unit * m + obs + k;
                carry[r] = 1.0;
                inter[r] = (k + 1) as f64 - zbar;
            }
        }
        let main = parametric_problem(&full, &[], &[], periods, obs)?;
        let carry_p = parametric_problem(&full, &[carry.clone()], &["carry"], periods, obs)?;
        let inter_p =
            parametric_problem(&full, &[time, carry, inter], &["time", "carry", "carry:time"], periods, obs)?;

        let keep: Vec<usize> = full
            .blocks()
            .iter()
            .filter(|b| !matches!(b.kind, BlockKind::Carry(_)))
            .flat_map(|b| b.cols.clone())
            .collect();
        let x = full.x().select_columns(&keep);
        let time = full.block(BlockKind::Time).expect("time block");
        let beta = full.block(BlockKind::Beta).expect("beta block");
        let d = time.len();
        let blocks = vec![
            Block { kind: BlockKind::Time, label: "time".into(), cols: beta.len()..beta.len() + d, penalty: time.penalty.clone() },
            Block { kind: BlockKind::Beta, label: "beta".into(), cols: 0..beta.len(), penalty: None },
        ];
        // reorder columns as [beta | time]
        let mut order: Vec<usize> = beta.cols.clone().collect();
        order.extend(time.cols.clone());
        let x_nc = full.x().select_columns(&order);
        debug_assert_eq!(x.ncols(), x_nc.ncols());
        let names = order.iter().map(|&j| full.coef_names()[j].clone()).collect();
        let mut no_carry = Problem::custom(x_nc, blocks, periods, obs, names, Some(0))?;
        if let Some(b) = full.basis() {
            no_carry = no_carry.with_basis(b.clone());
        }

        Ok(Self { scenario: scenario.clone(), full, no_carry, main, carry: carry_p, interaction: inter_p })
    }

    pub fn full(&self) -> &Problem {
        &self.full
    }

    pub fn no_carry(&self) -> &Problem {
        &self.no_carry
    }

    fn options(&self, correlation: CorrelationSpec) -> FitOptions {
        FitOptions { execution: Execution::Sequential, ..FitOptions::new(Family::Gaussian, correlation) }
    }

    /// Fits one comparator model.
    pub fn fit(&self, kind: ModelKind, data: &Observations) -> Result<FitResult> {
        let s = &self.scenario;
        let exch = self.options(s.correlation);
        match kind {
            ModelKind::GeeMain => self.main.fit(data, &exch, &Penalties::none()),
            ModelKind::GeeCarry => self.carry.fit(data, &exch, &Penalties::none()),
            ModelKind::GeeInt => self.interaction.fit(data, &exch, &Penalties::none()),
            ModelKind::GeeSpline => self.full.fit(data, &exch, &Penalties::none()),
            ModelKind::GeeSmooth => {
                let tuned = select_with(&self.full, data, &exch, &s.grid, &SelectConfig::new(s.criterion))?;
                self.full.fit(data, &exch, &tuned.selected.penalties())
            }
            ModelKind::GamTime => {
                let ind = self.options(CorrelationSpec::Independence);
                let cfg = SelectConfig {
                    tune_carry: false,
                    start: Some(Penalties::uniform(s.grid.median(), GAM_CARRY_LAMBDA)),
                    ..SelectConfig::new(Criterion::Gcv)
                };
                let tuned = select_with(&self.full, data, &ind, &s.grid, &cfg)?;
                self.full.fit(data, &ind, &tuned.selected.penalties())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub estimate: f64,
    pub std_error: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: ModelKind,
    pub beta1: f64,
    pub l: usize,
    pub n: usize,
    pub replicates: usize,
    pub failures: usize,
    pub mean_estimate: f64,
    pub coverage: f64,
    pub rmse_sigma: f64,
    pub mean_std_error: f64,
    pub sd_estimate: f64,
    /// Share of replicates rejecting `β₁ = 0` at the 5% level.
    pub rejection_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub rows: Vec<SummaryRow>,
}

impl SimulationSummary {
    pub fn row(&self, model: ModelKind, beta1: f64) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.model == model && r.beta1 == beta1)
    }
}

fn summarize(model: ModelKind, scenario: &SimulationScenario, records: &[Option<ReplicateRecord>]) -> SummaryRow {
    let ok: Vec<&ReplicateRecord> = records.iter().flatten().collect();
    let k = ok.len().max(1) as f64;
    let b1 = scenario.beta[1];
    let mean = ok.iter().map(|r| r.estimate).sum::<f64>() / k;
    let var = ok.iter().map(|r| (r.estimate - mean).powi(2)).sum::<f64>() / (ok.len().saturating_sub(1).max(1)) as f64;
    let covered = ok.iter().filter(|r| (r.estimate - b1).abs() <= Z_975 * r.std_error).count();
    let rejected = ok.iter().filter(|r| r.estimate.abs() > Z_975 * r.std_error).count();
    SummaryRow {
        model,
        beta1: b1,
        l: scenario.l,
        n: scenario.n_per_sequence,
        replicates: ok.len(),
        failures: records.len() - ok.len(),
        mean_estimate: mean,
        coverage: covered as f64 / k,
        rmse_sigma: ok.iter().map(|r| r.rmse).sum::<f64>() / k,
        mean_std_error: ok.iter().map(|r| r.std_error).sum::<f64>() / k,
        sd_estimate: var.sqrt(),
        rejection_rate: rejected as f64 / k,
    }
}

/// Per-replicate records for each model; `None` marks a failed or
/// non-converged fit.
pub fn replicate_records(
    scenario: &SimulationScenario,
    models: &[ModelKind],
    exec: Execution,
) -> Result<Vec<Vec<Option<ReplicateRecord>>>> {
    if models.is_empty() {
        return Err(Error::InvalidConfig("no models requested".into()));
    }
    let bank = ModelBank::new(scenario)?;
    let per_rep = map_indices(scenario.replicates, exec, |rep| {
        let data = Observations::new(responses(scenario, rep));
        models
            .iter()
            .map(|&m| {
                let fit = bank.fit(m, &data).ok().filter(|f| f.converged)?;
                let (estimate, std_error) = fit.coefficient(&treatment_name(&fit))?;
                Some(ReplicateRecord { replicate: rep, estimate, std_error, rmse: fit.residual_rmse(&data) })
            })
            .collect::<Vec<_>>()
    });
    Ok((0..models.len()).map(|j| per_rep.iter().map(|r| r[j]).collect()).collect())
}

fn treatment_name(fit: &FitResult) -> String {
    fit.names.iter().find(|n| n.starts_with("treatment[")).cloned().unwrap_or_default()
}

pub fn run_monte_carlo(scenario: &SimulationScenario, models: &[ModelKind]) -> Result<SimulationSummary> {
    run_monte_carlo_with(scenario, models, Execution::default())
}

pub fn run_monte_carlo_with(
    scenario: &SimulationScenario,
    models: &[ModelKind],
    exec: Execution,
) -> Result<SimulationSummary> {
    let recs = replicate_records(scenario, models, exec)?;
    Ok(SimulationSummary { rows: models.iter().zip(&recs).map(|(&m, r)| summarize(m, scenario, r)).collect() })
}

/// Runs several scenarios and concatenates their rows.
pub fn run_table(scenarios: &[SimulationScenario], models: &[ModelKind], exec: Execution) -> Result<SimulationSummary> {
    let mut rows = Vec::new();
    for s in scenarios {
        rows.extend(run_monte_carlo_with(s, models, exec)?.rows);
    }
    Ok(SimulationSummary { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveErrors {
    pub time: f64,
    pub carry_ab: f64,
    pub carry_ba: f64,
    pub replicates: usize,
    pub failures: usize,
}

/// Mean integrated squared error of the GEE-smooth curves against the truth,
/// as a Riemann sum over `Z = 1..L` with spacing `T/L`.
pub fn curve_recovery(scenario: &SimulationScenario, exec: Execution) -> Result<CurveErrors> {
    let bank = ModelBank::new(scenario)?;
    let [f, f1, f2] = truth(scenario.l);
    let phi = bank.full.basis().expect("basis").values.clone();
    let h = scenario.basis.t_domain / scenario.l as f64;
    let ise = |coef: Option<DVector<f64>>, target: &[f64]| -> f64 {
        let est = &phi * coef.expect("block present");
        est.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * h
    };
    let per_rep = map_indices(scenario.replicates, exec, |rep| {
        let data = Observations::new(responses(scenario, rep));
        let fit = bank.fit(ModelKind::GeeSmooth, &data).ok().filter(|f| f.converged)?;
        Some([ise(fit.theta(), &f), ise(fit.theta_c(0), &f1), ise(fit.theta_c(1), &f2)])
    });
    let ok: Vec<[f64; 3]> = per_rep.iter().flatten().copied().collect();
    let k = ok.len().max(1) as f64;
    let mean = |i: usize| ok.iter().map(|v| v[i]).sum::<f64>() / k;
    Ok(CurveErrors {
        time: mean(0),
        carry_ab: mean(1),
        carry_ba: mean(2),
        replicates: ok.len(),
        failures: per_rep.len() - ok.len(),
    })
}

/// Curve errors for one fixed penalty (no tuning).
pub fn curve_errors_fixed(scenario: &SimulationScenario, replicate: usize, pen: &Penalties) -> Result<[f64; 3]> {
    let bank = ModelBank::new(scenario)?;
    let data = Observations::new(responses(scenario, replicate));
    let fit = bank.full.fit(&data, &bank.options(scenario.correlation), pen)?;
    let [f, f1, f2] = truth(scenario.l);
    let phi = &bank.full.basis().expect("basis").values;
    let h = scenario.basis.t_domain / scenario.l as f64;
    let ise = |coef: DVector<f64>, target: &[f64]| {
        (phi * coef).iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * h
    };
    Ok([
        ise(fit.theta().expect("time"), &f),
        ise(fit.theta_c(0).expect("carry"), &f1),
        ise(fit.theta_c(1).expect("carry"), &f2),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QicComparison {
    pub complex: Vec<f64>,
    pub no_carry: Vec<f64>,
    pub failures: usize,
}

impl QicComparison {
    /// Share of replicates where the complex model has the smaller QIC.
    pub fn complex_preferred(&self) -> f64 {
        let wins = self.complex.iter().zip(&self.no_carry).filter(|(c, n)| c < n).count();
        wins as f64 / self.complex.len().max(1) as f64
    }
}

/// QIC of the tuned complex carry-over model against a tuned model with
/// main effects and a time smooth only, both on the complex model's scale.
pub fn qic_comparison(scenario: &SimulationScenario, exec: Execution) -> Result<QicComparison> {
    let bank = ModelBank::new(scenario)?;
    let opts = bank.options(scenario.correlation);
    let per_rep = map_indices(scenario.replicates, exec, |rep| -> Option<(f64, f64)> {
        let data = Observations::new(responses(scenario, rep));
        let complex = bank.fit(ModelKind::GeeSmooth, &data).ok().filter(|f| f.converged)?;
        let scale = complex.dispersion;
        let cfg = SelectConfig { tune_carry: false, qic_scale: Some(scale), ..SelectConfig::new(Criterion::Qic) };
        let tuned = select_with(&bank.no_carry, &data, &opts, &scenario.grid, &cfg).ok()?;
        let simple = bank.no_carry.fit(&data, &opts, &tuned.selected.penalties()).ok().filter(|f| f.converged)?;
        Some((qic(&complex, &data, Some(scale)).ok()?.qic, qic(&simple, &data, Some(scale)).ok()?.qic))
    });
    let ok: Vec<(f64, f64)> = per_rep.iter().flatten().copied().collect();
    Ok(QicComparison {
        complex: ok.iter().map(|p| p.0).collect(),
        no_carry: ok.iter().map(|p| p.1).collect(),
        failures: per_rep.len() - ok.len(),
    })
}

/// Wald p-value of `β₁ = 0` for one record.
pub fn record_p_value(r: &ReplicateRecord) -> f64 {
    two_sided_p(r.estimate / r.std_error)
}

/// Critical value used for coverage, kept next to the exact quantile for reference.
pub fn coverage_critical_value() -> (f64, f64) {
    (Z_975, normal_quantile(0.95))
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// CSV in the published table layout: one line per `(L, n, model)` with
/// Estimate, Coverage and RMSE columns for each `β₁`.
pub fn table_csv(summary: &SimulationSummary) -> String {
    let mut betas: Vec<f64> = summary.rows.iter().map(|r| r.beta1).collect();
    betas.sort_by(f64::total_cmp);
    betas.dedup();
    let mut keys: Vec<(usize, usize, ModelKind)> = summary.rows.iter().map(|r| (r.l, r.n, r.model)).collect();
    keys.sort_by_key(|&(l, n, m)| (l, n, m.to_string()));
    keys.dedup();

    let mut out = String::from("L,n,model");
    for metric in ["estimate", "coverage", "rmse"] {
        for b in &betas {
            out.push_str(&format!(",{metric}[beta1={}]", fmt_num(*b)));
        }
    }
    out.push('\n');
    for (l, n, m) in keys {
        out.push_str(&format!("{l},{n},{m}"));
        let find = |b: f64| summary.rows.iter().find(|r| r.l == l && r.n == n && r.model == m && r.beta1 == b);
        for metric in 0..3 {
            for &b in &betas {
                out.push(',');
                if let Some(r) = find(b) {
                    let v = [r.mean_estimate, r.coverage, r.rmse_sigma][metric];
                    out.push_str(&fmt_num(v));
                }
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableCell {
    pub l: usize,
    pub n: usize,
    pub model: ModelKind,
    pub beta1: f64,
    pub estimate: f64,
    pub coverage: f64,
    pub rmse: f64,
}

/// Parses [`table_csv`] output back into cells.
pub fn parse_table_csv(text: &str) -> Result<Vec<TableCell>> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let betas: Vec<f64> = headers
        .iter()
        .filter_map(|h| h.strip_prefix("estimate[beta1=")?.strip_suffix(']')?.parse().ok())
        .collect();
    let nb = betas.len();
    if headers.len() != 3 + 3 * nb {
        return Err(Error::InvalidInput("unexpected table header".into()));
    }
    let mut cells = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::NonNumericValue { line: line + 2, column: headers[i].to_string() })
        };
        let l = rec[0].parse().map_err(|_| Error::NonNumericValue { line: line + 2, column: "L".into() })?;
        let n = rec[1].parse().map_err(|_| Error::NonNumericValue { line: line + 2, column: "n".into() })?;
        let model: ModelKind = rec[2].parse()?;
        for (j, &b) in betas.iter().enumerate() {
            if rec[3 + j].is_empty() {
                continue;
            }
            cells.push(TableCell {
                l,
                n,
                model,
                beta1: b,
                estimate: num(3 + j)?,
                coverage: num(3 + nb + j)?,
                rmse: num(3 + 2 * nb + j)?,
            });
        }
    }
    Ok(cells)
}

/// Long CSV with every summary field.
pub fn summary_csv(summary: &SimulationSummary) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "model",
        "beta1",
        "L",
        "n",
        "replicates",
        "failures",
        "mean_estimate",
        "coverage",
        "rmse_sigma",
        "mean_std_error",
        "sd_estimate",
        "rejection_rate",
    ])?;
    for r in &summary.rows {
        w.write_record([
            r.model.to_string(),
            fmt_num(r.beta1),
            r.l.to_string(),
            r.n.to_string(),
            r.replicates.to_string(),
            r.failures.to_string(),
            fmt_num(r.mean_estimate),
            fmt_num(r.coverage),
            fmt_num(r.rmse_sigma),
            fmt_num(r.mean_std_error),
            fmt_num(r.sd_estimate),
            fmt_num(r.rejection_rate),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(beta1: f64) -> SimulationScenario {
        SimulationScenario { replicates: 4, ..SimulationScenario::new(10, 2, beta1) }
    }

    #[test]
    fn noise_free_period_one_is_the_time_trend() {
        let s = SimulationScenario { sigma: 0.0, beta: [0.0, 0.0, 0.0], ..small(0.0) };
        let data = generate_dataset(&s, 0).unwrap();
        let [f, f1, _] = truth(10);
        let y = &data.observations.y;
        for k in 0..10 {
            assert_eq!(y[k], f[k]);
        }
        let s = SimulationScenario { sigma: 0.0, beta: [0.3, 1.0, 0.2], ..small(1.0) };
        let y = generate_dataset(&s, 0).unwrap().observations.y;
        for k in 0..10 {
            let v = y[10 + k] - f[k] - 0.3 - 1.0 - 0.2;
            assert!((v - f1[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn truth_is_centered() {
        for l in [10, 20, 50] {
            for curve in truth(l) {
                assert!(curve.iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn period_means_equal_the_parametric_part() {
        let s = SimulationScenario { sigma: 0.0, beta: [0.5, -1.0, 0.2], ..small(-1.0) };
        let y = generate_dataset(&s, 0).unwrap().observations.y;
        let means: Vec<f64> = y.chunks(10).map(|c| c.iter().sum::<f64>() / 10.0).collect();
        // AB: A then B; BA: B then A
        let expect = [[0.5, 0.5 - 1.0 + 0.2], [0.5 - 1.0, 0.5 + 0.2]];
        for (i, m) in means.iter().enumerate() {
            let (seq, period) = (i / 4, i % 2);
            assert!((m - expect[seq][period]).abs() < 1e-12, "{i}");
        }
    }

    #[test]
    fn replicate_streams_are_deterministic_and_distinct() {
        let s = small(1.0);
        let a = generate_dataset(&s, 3).unwrap().observations.y;
        let b = generate_dataset(&s, 3).unwrap().observations.y;
        let c = generate_dataset(&s, 4).unwrap().observations.y;
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn comparator_models_fit() {
        let s = small(1.0);
        let bank = ModelBank::new(&s).unwrap();
        let data = generate_dataset(&s, 0).unwrap().observations;
        for m in ModelKind::ALL {
            let f = bank.fit(m, &data).unwrap();
            assert!(f.converged, "{m}");
            assert!(f.coefficient("treatment[B]").is_some(), "{m}");
        }
        assert_eq!(bank.no_carry().num_params(), 3 + s.basis.dim());
    }

    #[test]
    fn model_names_round_trip() {
        for m in ModelKind::ALL {
            assert_eq!(m.to_string().parse::<ModelKind>().unwrap(), m);
        }
    }

    #[test]
    fn presets_expand_over_beta() {
        let p = preset("paper-L20-n10").unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|s| s.l == 20 && s.n_per_sequence == 10));
        assert!(preset("paper-L20").is_err());
        assert_eq!(preset("L20-n10").unwrap(), p);
        assert_eq!(preset("paper-L10-n2-fourier").unwrap()[0].basis.dim(), 2);
    }

    #[test]
    fn summaries_are_identical_across_execution_modes() {
        let s = small(0.0);
        let models = [ModelKind::GeeMain, ModelKind::GeeSpline];
        let a = run_monte_carlo_with(&s, &models, Execution::Sequential).unwrap();
        let b = run_monte_carlo_with(&s, &models, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert!(a.rows.iter().all(|r| (0.0..=1.0).contains(&r.coverage)));
    }

    #[test]
    fn table_csv_round_trips() {
        let mut rows = Vec::new();
        for b in [-1.0, 0.0, 1.0] {
            for m in [ModelKind::GeeMain, ModelKind::GeeSmooth] {
                rows.push(SummaryRow {
                    model: m,
                    beta1: b,
                    l: 20,
                    n: 10,
                    replicates: 5,
                    failures: 0,
                    mean_estimate: b + 0.1234567890123,
                    coverage: 0.95,
                    rmse_sigma: 0.985 + b * 1e-3,
                    mean_std_error: 0.1,
                    sd_estimate: 0.1,
                    rejection_rate: 0.05,
                });
            }
        }
        let summary = SimulationSummary { rows };
        let cells = parse_table_csv(&table_csv(&summary)).unwrap();
        assert_eq!(cells.len(), 6);
        for c in cells {
            let r = summary.row(c.model, c.beta1).unwrap();
            assert_eq!((c.estimate, c.coverage, c.rmse), (r.mean_estimate, r.coverage, r.rmse_sigma));
        }
    }

    #[test]
    fn noise_free_fourier_recovers_curves_exactly() {
        let s = SimulationScenario { sigma: 0.0, replicates: 1, ..SimulationScenario::new(40, 2, 1.0) }.with_fourier(1);
        let ise = curve_errors_fixed(&s, 0, &Penalties::none()).unwrap();
        assert!(ise.iter().all(|&e| e < 1e-10), "{ise:?}");
    }
}
