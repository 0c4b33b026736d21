//! Penalized GEE fitted by block-wise Fisher scoring.
//!
//! One iteration updates the time block, each carry-over block and the
//! parametric block in that order, then re-estimates the dispersion and the
//! working correlation.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{penalty_matrix, BasisMatrix, BasisSpec, PenaltyOrder};
use crate::correlation::{inverse_r, update_alpha, AlphaEstimate, CorrelationSpec};
use crate::design::{CarryoverPair, CrossoverDesign};
use crate::error::{Error, Result};
use crate::estimability::{assemble_unchecked, check_estimability, BlockName, EstimabilityReport, RANK_TOLERANCE};
use crate::glm::{pearson_weighted, Family};
use crate::linalg::{inverse_spd, numerical_rank, solve_spd, symmetrize};
use crate::par::{map_indices, Execution};

const REL_FLOOR: f64 = 1e-4;
const DAMPING_HALVINGS: usize = 5;
const DAMPING_RATIO: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Beta,
    Time,
    Carry(usize),
}

#[derive(Debug, Clone)]
pub struct Block {
    pub kind: BlockKind,
    pub label: String,
    pub cols: Range<usize>,
    /// Penalty matrix; `None` for unpenalized blocks.
    pub penalty: Option<DMatrix<f64>>,
}

impl Block {
    pub fn len(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }
}

/// Smoothing parameters. A single `carry` value is broadcast to every pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    pub time: f64,
    pub carry: Vec<f64>,
}

impl Penalties {
    pub fn new(time: f64, carry: Vec<f64>) -> Self {
        Self { time, carry }
    }

    pub fn uniform(time: f64, carry: f64) -> Self {
        Self { time, carry: vec![carry] }
    }

    pub fn none() -> Self {
        Self::uniform(0.0, 0.0)
    }

    pub fn carry_for(&self, c: usize) -> f64 {
        match self.carry.len() {
            0 => 0.0,
            1 => self.carry[0],
            _ => self.carry[c],
        }
    }

    fn validate(&self, num_carry: usize) -> Result<()> {
        if self.carry.len() > 1 && self.carry.len() != num_carry {
            return Err(Error::InvalidModel(format!(
                "{} carry-over penalties given for {num_carry} pairs",
                self.carry.len()
            )));
        }
        if std::iter::once(&self.time).chain(&self.carry).any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::InvalidModel("smoothing parameters must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn for_block(&self, kind: BlockKind) -> f64 {
        match kind {
            BlockKind::Beta => 0.0,
            BlockKind::Time => self.time,
            BlockKind::Carry(c) => self.carry_for(c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub family: Family,
    pub correlation: CorrelationSpec,
    pub max_iter: usize,
    pub tol: f64,
    pub allow_rank_deficient: bool,
    #[serde(skip)]
    pub execution: Execution,
}

impl FitOptions {
    pub fn new(family: Family, correlation: CorrelationSpec) -> Self {
        Self { family, correlation, max_iter: 200, tol: 1e-6, allow_rank_deficient: false, execution: Execution::default() }
    }
}

/// Full model specification for a crossover design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub correlation: CorrelationSpec,
    pub basis: BasisSpec,
    pub lambda_time: f64,
    pub lambda_carry: Vec<f64>,
    /// `None` picks the basis default.
    pub penalty_order_time: Option<PenaltyOrder>,
    /// `None` means ridge.
    pub penalty_order_carry: Option<PenaltyOrder>,
    pub max_iter: usize,
    pub tol: f64,
    pub allow_rank_deficient: bool,
}

impl ModelSpec {
    pub fn new(family: Family, correlation: CorrelationSpec, basis: BasisSpec) -> Self {
        Self {
            family,
            correlation,
            basis,
            lambda_time: 0.0,
            lambda_carry: vec![0.0],
            penalty_order_time: None,
            penalty_order_carry: None,
            max_iter: 200,
            tol: 1e-6,
            allow_rank_deficient: false,
        }
    }

    pub fn with_penalties(mut self, p: &Penalties) -> Self {
        self.lambda_time = p.time;
        self.lambda_carry = p.carry.clone();
        self
    }

    pub fn penalties(&self) -> Penalties {
        Penalties::new(self.lambda_time, self.lambda_carry.clone())
    }

    pub fn options(&self) -> FitOptions {
        FitOptions {
            max_iter: self.max_iter,
            tol: self.tol,
            allow_rank_deficient: self.allow_rank_deficient,
            ..FitOptions::new(self.family, self.correlation)
        }
    }

    pub fn time_order(&self) -> PenaltyOrder {
        self.penalty_order_time.unwrap_or_else(|| self.basis.default_penalty_order())
    }

    pub fn carry_order(&self) -> PenaltyOrder {
        self.penalty_order_carry.unwrap_or(PenaltyOrder::Ridge)
    }

    pub fn problem(&self, design: &CrossoverDesign) -> Result<Problem> {
        Problem::from_design(design, &self.basis, self.time_order(), self.carry_order())
    }
}

/// Responses in design row order with optional binomial denominators.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub y: Vec<f64>,
    pub weights: Option<Vec<f64>>,
}

impl Observations {
    pub fn new(y: Vec<f64>) -> Self {
        Self { y, weights: None }
    }

    pub fn with_weights(y: Vec<f64>, weights: Vec<f64>) -> Self {
        Self { y, weights: Some(weights) }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    pub fn without_rows(&self, rows: Range<usize>) -> Self {
        let cut = |v: &Vec<f64>| v[..rows.start].iter().chain(&v[rows.end..]).copied().collect::<Vec<_>>();
        Self { y: cut(&self.y), weights: self.weights.as_ref().map(cut) }
    }

    fn weighted_mean(&self) -> f64 {
        let (mut s, mut w) = (0.0, 0.0);
        for i in 0..self.y.len() {
            s += self.weight(i) * self.y[i];
            w += self.weight(i);
        }
        if w > 0.0 {
            s / w
        } else {
            0.0
        }
    }
}

/// A design matrix partitioned into blocks, with `units` clusters of
/// `periods × obs` consecutive rows.
#[derive(Debug, Clone)]
pub struct Problem {
    x: DMatrix<f64>,
    blocks: Vec<Block>,
    periods: usize,
    obs: usize,
    units: usize,
    coef_names: Vec<String>,
    intercept: Option<usize>,
    basis: Option<BasisMatrix>,
    pairs: Vec<CarryoverPair>,
    rank: usize,
    report: Option<EstimabilityReport>,
}

impl Problem {
    /// Builds the full semiparametric problem for a crossover layout.
    pub fn from_design(
        design: &CrossoverDesign,
        basis: &BasisSpec,
        time_order: PenaltyOrder,
        carry_order: PenaltyOrder,
    ) -> Result<Self> {
        let report = check_estimability(design, basis);
        let full = assemble_unchecked(design, basis)?;
        let p_time = penalty_matrix(basis, time_order)?.values;
        let p_carry = penalty_matrix(basis, carry_order)?.values;
        let d = full.basis.dim();

        let beta = full.parametric_columns();
        let mut names = vec!["(Intercept)".to_string()];
        for t in &full.treatment_labels {
            names.push(format!("treatment[{t}]"));
        }
        for p in 2..=design.num_periods() {
            names.push(format!("period[{p}]"));
        }
        for k in 1..=d {
            names.push(format!("time[{k}]"));
        }
        for pair in &full.pairs {
            for k in 1..=d {
                names.push(format!("carry[{pair}][{k}]"));
            }
        }

        let mut blocks = Vec::new();
        if let Some(r) = full.block(&BlockName::Time) {
            blocks.push(Block { kind: BlockKind::Time, label: "time".into(), cols: r, penalty: Some(p_time) });
        }
        for (c, pair) in full.pairs.iter().enumerate() {
            if let Some(r) = full.block(&BlockName::Carryover(c)) {
                blocks.push(Block {
                    kind: BlockKind::Carry(c),
                    label: pair.to_string(),
                    cols: r,
                    penalty: Some(p_carry.clone()),
                });
            }
        }
        blocks.push(Block { kind: BlockKind::Beta, label: "beta".into(), cols: beta, penalty: None });

        Ok(Self {
            rank: report.rank_found,
            x: full.values,
            blocks,
            periods: design.num_periods(),
            obs: design.obs_per_period(),
            units: design.num_units(),
            coef_names: names,
            intercept: Some(0),
            basis: Some(full.basis),
            pairs: full.pairs,
            report: Some(report),
        })
    }

    /// A problem over an arbitrary matrix. Blocks are updated in the given order.
    pub fn custom(
        x: DMatrix<f64>,
        blocks: Vec<Block>,
        periods: usize,
        obs: usize,
        coef_names: Vec<String>,
        intercept: Option<usize>,
    ) -> Result<Self> {
        let m = periods * obs;
        if m == 0 || x.nrows() % m != 0 {
            return Err(Error::DataShapeMismatch { expected: m, found: x.nrows() });
        }
        if coef_names.len() != x.ncols() {
            return Err(Error::InvalidModel("one name per column required".into()));
        }
        let mut covered = vec![0u8; x.ncols()];
        for b in &blocks {
            if b.cols.end > x.ncols() {
                return Err(Error::InvalidModel(format!("block {} exceeds the design", b.label)));
            }
            if let Some(p) = &b.penalty {
                if p.nrows() != b.len() || p.ncols() != b.len() {
                    return Err(Error::InvalidModel(format!("penalty of block {} has wrong size", b.label)));
                }
            }
            for c in b.cols.clone() {
                covered[c] += 1;
            }
        }
        if covered.iter().any(|&c| c != 1) {
            return Err(Error::InvalidModel("blocks must partition the columns".into()));
        }
        let rank = numerical_rank(&x, RANK_TOLERANCE);
        Ok(Self {
            units: x.nrows() / m,
            x,
            blocks,
            periods,
            obs,
            coef_names,
            intercept,
            basis: None,
            pairs: Vec::new(),
            rank,
            report: None,
        })
    }

    pub fn with_basis(mut self, basis: BasisMatrix) -> Self {
        self.basis = Some(basis);
        self
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, kind: BlockKind) -> Option<&Block> {
        self.blocks.iter().find(|b| b.kind == kind)
    }

    pub fn num_params(&self) -> usize {
        self.x.ncols()
    }

    pub fn num_units(&self) -> usize {
        self.units
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn obs_per_period(&self) -> usize {
        self.obs
    }

    pub fn cluster_size(&self) -> usize {
        self.periods * self.obs
    }

    pub fn coef_names(&self) -> &[String] {
        &self.coef_names
    }

    pub fn basis(&self) -> Option<&BasisMatrix> {
        self.basis.as_ref()
    }

    pub fn pairs(&self) -> &[CarryoverPair] {
        &self.pairs
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn estimability(&self) -> Option<&EstimabilityReport> {
        self.report.as_ref()
    }

    pub fn num_carry(&self) -> usize {
        self.blocks.iter().filter(|b| matches!(b.kind, BlockKind::Carry(_))).count()
    }

    pub fn unit_rows(&self, unit: usize) -> Range<usize> {
        let m = self.cluster_size();
        unit * m..(unit + 1) * m
    }

    /// The same problem with one cluster removed.
    pub fn without_unit(&self, unit: usize) -> Result<Self> {
        if self.units < 2 {
            return Err(Error::TooFewUnits(self.units));
        }
        let rows = self.unit_rows(unit);
        let keep: Vec<usize> = (0..self.x.nrows()).filter(|r| !rows.contains(r)).collect();
        let x = self.x.select_rows(&keep);
        Ok(Self {
            rank: numerical_rank(&x, RANK_TOLERANCE),
            x,
            units: self.units - 1,
            report: None,
            ..self.clone()
        })
    }

    /// Block-diagonal `Λ` over all coefficients.
    pub fn penalty_full(&self, pen: &Penalties) -> DMatrix<f64> {
        let q = self.num_params();
        let mut out = DMatrix::zeros(q, q);
        for b in &self.blocks {
            if let Some(p) = &b.penalty {
                let l = pen.for_block(b.kind);
                if l > 0.0 {
                    out.view_mut((b.cols.start, b.cols.start), (b.len(), b.len())).copy_from(&(p * l));
                }
            }
        }
        out
    }

    pub fn linear_predictor(&self, coef: &DVector<f64>) -> DVector<f64> {
        &self.x * coef
    }

    fn check(&self, data: &Observations) -> Result<()> {
        if data.y.len() != self.x.nrows() {
            return Err(Error::DataShapeMismatch { expected: self.x.nrows(), found: data.y.len() });
        }
        if let Some(w) = &data.weights {
            if w.len() != data.y.len() {
                return Err(Error::DataShapeMismatch { expected: data.y.len(), found: w.len() });
            }
            if w.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::InvalidInput("weights must be positive".into()));
            }
        }
        if data.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("responses must be finite".into()));
        }
        Ok(())
    }

    /// Fits the model from the default start.
    pub fn fit(&self, data: &Observations, opts: &FitOptions, pen: &Penalties) -> Result<FitResult> {
        self.check(data)?;
        let mut coef = DVector::zeros(self.num_params());
        if let Some(i) = self.intercept {
            coef[i] = opts.family.link(data.weighted_mean());
        }
        self.fit_from(data, opts, pen, coef)
    }

    /// Fits the model starting at `start` with independence working correlation.
    pub fn fit_from(
        &self,
        data: &Observations,
        opts: &FitOptions,
        pen: &Penalties,
        start: DVector<f64>,
    ) -> Result<FitResult> {
        self.check(data)?;
        pen.validate(self.num_carry())?;
        if !(opts.tol > 0.0) {
            return Err(Error::InvalidModel("tolerance must be positive".into()));
        }
        if start.len() != self.num_params() {
            return Err(Error::DataShapeMismatch { expected: self.num_params(), found: start.len() });
        }
        if self.rank < self.num_params() && !opts.allow_rank_deficient {
            let detail = match &self.report {
                Some(r) => r.summary(),
                None => format!("rank {}/{}", self.rank, self.num_params()),
            };
            return Err(Error::NotEstimable(detail));
        }

        let mut coef = start;
        let mut alpha = AlphaEstimate::zeros(&opts.correlation);
        let mut eta = self.linear_predictor(&coef);
        let mut trace = Vec::new();
        let mut converged = false;

        for _ in 0..opts.max_iter {
            let rinv = WorkingInverse::new(&opts.correlation, &alpha, self.periods, self.obs)?;
            let mut change: f64 = 0.0;
            for b in &self.blocks {
                let lam = pen.for_block(b.kind);
                let delta = self.block_step(data, opts, &rinv, &eta, &coef, b, lam)?;
                let step = self.damped_step(data, opts.family, &eta, b, &delta);
                for (j, c) in b.cols.clone().enumerate() {
                    let d = step * delta[j];
                    coef[c] += d;
                    change = change.max(d.abs() / (coef[c].abs() + REL_FLOOR));
                }
                eta = self.linear_predictor(&coef);
            }
            if opts.correlation.num_params() > 0 {
                let mu: Vec<f64> = eta.iter().map(|&e| opts.family.eval(e).0).collect();
                let res = pearson_weighted(
                    opts.family,
                    &data.y,
                    &mu,
                    data.weights.as_deref(),
                    self.num_params() as f64,
                )?;
                let next = update_alpha(&res, &opts.correlation, self.periods, self.obs)?;
                for (a, b) in next.alpha.iter().zip(&alpha.alpha) {
                    change = change.max((a - b).abs() / (a.abs() + REL_FLOOR));
                }
                alpha = next;
            }
            trace.push(change);
            if change <= opts.tol {
                converged = true;
                break;
            }
        }

        // one joint step at the converged α removes the residual error of the block sweeps
        if converged {
            if let Ok(next) = self.joint_update(data, opts, pen, &coef, &alpha) {
                let next_eta = self.linear_predictor(&next);
                let base = self.pearson_chi2(data, opts.family, &eta);
                if self.pearson_chi2(data, opts.family, &next_eta) <= DAMPING_RATIO * base {
                    coef = next;
                }
            }
        }

        self.finish(data, opts, pen, coef, alpha, trace, converged)
    }

    /// One undamped joint Fisher-scoring step over every coefficient.
    pub fn joint_update(
        &self,
        data: &Observations,
        opts: &FitOptions,
        pen: &Penalties,
        coef: &DVector<f64>,
        alpha: &AlphaEstimate,
    ) -> Result<DVector<f64>> {
        self.check(data)?;
        pen.validate(self.num_carry())?;
        let rinv = WorkingInverse::new(&opts.correlation, alpha, self.periods, self.obs)?;
        let eta = self.linear_predictor(coef);
        let acc = self.accumulate(data, opts.family, &rinv, &eta, 0..self.num_params(), false, opts.execution);
        let lp = self.penalty_full(pen);
        let lhs = acc.h + &lp;
        let rhs = acc.u - &lp * coef;
        let delta = solve_spd(&lhs, &rhs).ok_or_else(|| Error::SingularSystem("joint system".into()))?;
        Ok(coef + delta)
    }

    /// Solves the penalized scoring system for one block.
    #[allow(clippy::too_many_arguments)]
    pub fn block_step(
        &self,
        data: &Observations,
        opts: &FitOptions,
        rinv: &WorkingInverse,
        eta: &DVector<f64>,
        coef: &DVector<f64>,
        block: &Block,
        lambda: f64,
    ) -> Result<DVector<f64>> {
        let acc = self.accumulate(data, opts.family, rinv, eta, block.cols.clone(), false, opts.execution);
        let mut lhs = acc.h;
        let mut rhs = acc.u;
        if let (Some(p), true) = (&block.penalty, lambda > 0.0) {
            let cur = coef.rows(block.cols.start, block.len()).into_owned();
            lhs += p * lambda;
            rhs -= p * cur * lambda;
        }
        solve_spd(&lhs, &rhs).ok_or_else(|| Error::SingularSystem(format!("{} block", block.label)))
    }

    fn pearson_chi2(&self, data: &Observations, family: Family, eta: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        for (i, &e) in eta.iter().enumerate() {
            let (mu, _, v) = family.eval(e);
            let r = data.y[i] - mu;
            s += data.weight(i) * r * r / v;
        }
        s
    }

    fn damped_step(&self, data: &Observations, family: Family, eta: &DVector<f64>, b: &Block, delta: &DVector<f64>) -> f64 {
        if family == Family::Gaussian && delta.amax() == 0.0 {
            return 1.0;
        }
        let base = self.pearson_chi2(data, family, eta);
        let dir = self.x.columns(b.cols.start, b.len()) * delta;
        let mut step = 1.0;
        for _ in 0..=DAMPING_HALVINGS {
            let trial = eta + &dir * step;
            if self.pearson_chi2(data, family, &trial) <= DAMPING_RATIO * base {
                return step;
            }
            step *= 0.5;
        }
        1.0
    }

    /// Per-unit sums `Σ DᵢᵀVᵢ⁻¹Dᵢ`, `Σ DᵢᵀVᵢ⁻¹rᵢ` and optionally the meat
    /// `Σ (DᵢᵀVᵢ⁻¹rᵢ)(DᵢᵀVᵢ⁻¹rᵢ)ᵀ` over the columns `cols`, reduced in unit order.
    #[allow(clippy::too_many_arguments)]
    pub fn accumulate(
        &self,
        data: &Observations,
        family: Family,
        rinv: &WorkingInverse,
        eta: &DVector<f64>,
        cols: Range<usize>,
        with_meat: bool,
        exec: Execution,
    ) -> Accumulated {
        let k = cols.len();
        let m = self.cluster_size();
        let parts = map_indices(self.units, exec, |unit| {
            let base = unit * m;
            let mut g = self.x.view((base, cols.start), (m, k)).into_owned();
            let mut s = DVector::zeros(m);
            for r in 0..m {
                let (mu, dmu, v) = family.eval(eta[base + r]);
                let w = data.weight(base + r);
                let a = (w / v).sqrt();
                g.row_mut(r).scale_mut(dmu * a);
                s[r] = (data.y[base + r] - mu) * a;
            }
            let rg = rinv.apply(&g);
            let h = g.transpose() * &rg;
            let u = rg.transpose() * s;
            (h, u)
        });
        let mut acc = Accumulated {
            h: DMatrix::zeros(k, k),
            u: DVector::zeros(k),
            meat: with_meat.then(|| DMatrix::zeros(k, k)),
        };
        for (h, u) in parts {
            acc.h += h;
            if let Some(meat) = acc.meat.as_mut() {
                *meat += &u * u.transpose();
            }
            acc.u += u;
        }
        acc
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        data: &Observations,
        opts: &FitOptions,
        pen: &Penalties,
        coef: DVector<f64>,
        alpha: AlphaEstimate,
        trace: Vec<f64>,
        converged: bool,
    ) -> Result<FitResult> {
        let q = self.num_params();
        let eta = self.linear_predictor(&coef);
        let rinv = WorkingInverse::new(&opts.correlation, &alpha, self.periods, self.obs)?;
        let acc = self.accumulate(data, opts.family, &rinv, &eta, 0..q, true, opts.execution);
        let info = self
            .accumulate(data, opts.family, &WorkingInverse::Identity, &eta, 0..q, false, opts.execution)
            .h;
        let lp = self.penalty_full(pen);
        let bread = inverse_spd(&(&acc.h + &lp)).ok_or(Error::SingularBread)?;
        let edf = (&bread * &acc.h).trace();
        let mu: Vec<f64> = eta.iter().map(|&e| opts.family.eval(e).0).collect();
        let res = pearson_weighted(opts.family, &data.y, &mu, data.weights.as_deref(), edf)?;
        let dispersion = match opts.family {
            Family::Gaussian => res.dispersion,
            _ => res.dispersion,
        };
        let meat = acc.meat.expect("meat requested");
        let vcov_joint = symmetrize(&(&bread * &meat * &bread));

        let mut vcov_blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (s, n) = (b.cols.start, b.len());
            let hb = acc.h.view((s, s), (n, n)) + lp.view((s, s), (n, n));
            let ib = inverse_spd(&hb).ok_or(Error::SingularBread)?;
            let mb = meat.view((s, s), (n, n));
            vcov_blocks.push(symmetrize(&(&ib * mb * &ib)));
        }

        Ok(FitResult {
            family: opts.family,
            correlation: opts.correlation,
            penalties: pen.clone(),
            names: self.coef_names.clone(),
            blocks: self.blocks.iter().map(|b| (b.kind, b.label.clone(), b.cols.clone())).collect(),
            iterations: trace.len(),
            coefficients: coef,
            alpha,
            dispersion,
            edf,
            converged,
            trace,
            eta,
            fitted: mu,
            working_info: acc.h,
            independence_info: info,
            meat,
            penalty: lp,
            vcov_joint,
            vcov_blocks,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Accumulated {
    pub h: DMatrix<f64>,
    pub u: DVector<f64>,
    pub meat: Option<DMatrix<f64>>,
}

/// `R(α)⁻¹`, kept in closed form where one exists.
#[derive(Debug, Clone)]
pub enum WorkingInverse {
    Identity,
    /// `a·I + b·11ᵀ`.
    Exchangeable { a: f64, b: f64 },
    Dense(DMatrix<f64>),
}

impl WorkingInverse {
    pub fn new(spec: &CorrelationSpec, alpha: &AlphaEstimate, periods: usize, obs: usize) -> Result<Self> {
        let m = (periods * obs) as f64;
        match spec {
            CorrelationSpec::Independence => Ok(Self::Identity),
            CorrelationSpec::Exchangeable => {
                let r = alpha.alpha.first().copied().unwrap_or(0.0);
                if r == 0.0 {
                    return Ok(Self::Identity);
                }
                let min_eig = (1.0 - r).min(1.0 + (m - 1.0) * r);
                if min_eig < 1e-10 {
                    return Err(Error::NotPositiveDefinite { min_eigenvalue: min_eig });
                }
                let a = 1.0 / (1.0 - r);
                Ok(Self::Exchangeable { a, b: -a * r / (1.0 + (m - 1.0) * r) })
            }
            _ => Ok(Self::Dense(inverse_r(spec, alpha, periods, obs)?)),
        }
    }

    pub fn apply(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Self::Identity => g.clone(),
            Self::Exchangeable { a, b } => {
                let sums = g.row_sum();
                let mut out = g * *a;
                for mut row in out.row_iter_mut() {
                    row += &sums * *b;
                }
                out
            }
            Self::Dense(r) => r * g,
        }
    }

    pub fn to_dense(&self, m: usize) -> DMatrix<f64> {
        self.apply(&DMatrix::identity(m, m))
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub family: Family,
    pub correlation: CorrelationSpec,
    pub penalties: Penalties,
    pub names: Vec<String>,
    pub blocks: Vec<(BlockKind, String, Range<usize>)>,
    pub coefficients: DVector<f64>,
    pub alpha: AlphaEstimate,
    pub dispersion: f64,
    /// `tr((H + Λ)⁻¹H)` with `H` the working information.
    pub edf: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
    pub eta: DVector<f64>,
    pub fitted: Vec<f64>,
    /// `Σ DᵀV⁻¹D` at the final iterate (unit scale).
    pub working_info: DMatrix<f64>,
    /// `Σ DᵀA⁻¹D`, the independence information (unit scale).
    pub independence_info: DMatrix<f64>,
    pub meat: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
    pub vcov_joint: DMatrix<f64>,
    /// Per-block sandwich covariances, in block order.
    pub vcov_blocks: Vec<DMatrix<f64>>,
}

impl FitResult {
    fn block_index(&self, kind: BlockKind) -> Option<usize> {
        self.blocks.iter().position(|(k, _, _)| *k == kind)
    }

    pub fn block_range(&self, kind: BlockKind) -> Option<Range<usize>> {
        self.block_index(kind).map(|i| self.blocks[i].2.clone())
    }

    pub fn block_coefficients(&self, kind: BlockKind) -> Option<DVector<f64>> {
        self.block_range(kind).map(|r| self.coefficients.rows(r.start, r.len()).into_owned())
    }

    pub fn block_vcov(&self, kind: BlockKind) -> Option<&DMatrix<f64>> {
        self.block_index(kind).map(|i| &self.vcov_blocks[i])
    }

    /// Sub-block of the joint sandwich for `kind`.
    pub fn joint_block_vcov(&self, kind: BlockKind) -> Option<DMatrix<f64>> {
        self.block_range(kind).map(|r| self.vcov_joint.view((r.start, r.start), (r.len(), r.len())).into_owned())
    }

    pub fn beta(&self) -> DVector<f64> {
        self.block_coefficients(BlockKind::Beta).unwrap_or_else(|| DVector::zeros(0))
    }

    pub fn theta(&self) -> Option<DVector<f64>> {
        self.block_coefficients(BlockKind::Time)
    }

    pub fn theta_c(&self, c: usize) -> Option<DVector<f64>> {
        self.block_coefficients(BlockKind::Carry(c))
    }

    pub fn num_carry(&self) -> usize {
        self.blocks.iter().filter(|(k, _, _)| matches!(k, BlockKind::Carry(_))).count()
    }

    pub fn vcov_beta(&self) -> Option<&DMatrix<f64>> {
        self.block_vcov(BlockKind::Beta)
    }

    /// Robust standard error of coefficient `j` from its block's sandwich.
    pub fn std_error(&self, j: usize) -> f64 {
        for (i, (_, _, r)) in self.blocks.iter().enumerate() {
            if r.contains(&j) {
                let k = j - r.start;
                return self.vcov_blocks[i][(k, k)].max(0.0).sqrt();
            }
        }
        f64::NAN
    }

    pub fn coefficient(&self, name: &str) -> Option<(f64, f64)> {
        let j = self.names.iter().position(|n| n == name)?;
        Some((self.coefficients[j], self.std_error(j)))
    }

    pub fn residual_rmse(&self, data: &Observations) -> f64 {
        let n = data.y.len().max(1) as f64;
        let ss: f64 = data.y.iter().zip(&self.fitted).map(|(y, m)| (y - m) * (y - m)).sum();
        (ss / n).sqrt()
    }
}

/// Fits the full model of `spec` on a crossover layout.
pub fn fit(design: &CrossoverDesign, data: &Observations, spec: &ModelSpec) -> Result<FitResult> {
    spec.problem(design)?.fit(data, &spec.options(), &spec.penalties())
}
