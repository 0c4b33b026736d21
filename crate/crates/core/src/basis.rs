//! Functional bases for the time and carry-over curves.
//!
//! B-splines use equally spaced internal knots with full boundary multiplicity;
//! the first basis function is dropped so the span excludes constants. Fourier
//! bases carry `sin`/`cos` pairs at harmonics `1..=K` of the domain length and
//! no constant column.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BasisKind {
    BSpline { order: usize, internal_knots: usize },
    Fourier { harmonics: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub t_domain: f64,
    pub centered: bool,
}

impl BasisSpec {
    /// Centered B-spline basis of order `order` (degree `order − 1`).
    pub fn bspline(order: usize, internal_knots: usize, t_domain: f64) -> Self {
        Self { kind: BasisKind::BSpline { order, internal_knots }, t_domain, centered: true }
    }

    pub fn fourier(harmonics: usize, t_domain: f64) -> Self {
        Self { kind: BasisKind::Fourier { harmonics }, t_domain, centered: true }
    }

    pub fn centered(mut self, centered: bool) -> Self {
        self.centered = centered;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_domain > 0.0) || !self.t_domain.is_finite() {
            return Err(Error::InvalidBasis(format!("domain length must be positive, got {}", self.t_domain)));
        }
        match self.kind {
            BasisKind::BSpline { order, .. } if order < 2 => {
                Err(Error::InvalidBasis(format!("B-spline order must be >= 2, got {order}")))
            }
            BasisKind::Fourier { harmonics: 0 } => Err(Error::InvalidBasis("Fourier basis needs K >= 1".into())),
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        basis_dim(self)
    }

    /// Smoothness penalty for splines, ridge for trigonometric coefficients.
    pub fn default_penalty_order(&self) -> PenaltyOrder {
        match self.kind {
            BasisKind::BSpline { .. } if self.dim() >= 3 => PenaltyOrder::SecondDifference,
            _ => PenaltyOrder::Ridge,
        }
    }
}

/// `m + k − 1` for B-splines, `2K` for Fourier.
pub fn basis_dim(spec: &BasisSpec) -> usize {
    match spec.kind {
        BasisKind::BSpline { order, internal_knots } => internal_knots + order - 1,
        BasisKind::Fourier { harmonics } => 2 * harmonics,
    }
}

/// Full open-uniform knot vector: `order` copies of each boundary.
pub fn knot_vector(order: usize, internal_knots: usize, t_domain: f64) -> Vec<f64> {
    let mut knots = vec![0.0; order];
    knots.extend((1..=internal_knots).map(|i| t_domain * i as f64 / (internal_knots + 1) as f64));
    knots.extend(std::iter::repeat_n(t_domain, order));
    knots
}

/// All `m + k` B-spline basis functions at `t` by the Cox–de Boor recursion.
pub fn bspline_all(order: usize, knots: &[f64], t: f64) -> Vec<f64> {
    let nbasis = knots.len() - order;
    let degree = order - 1;
    let mut out = vec![0.0; nbasis];
    // span index with knots[span] <= t < knots[span+1]; right end closes the last span
    let last = nbasis - 1;
    let span = if t >= knots[nbasis] {
        last
    } else {
        let mut s = degree;
        while s < last && !(t < knots[s + 1]) {
            s += 1;
        }
        s
    };

    let mut local = vec![0.0; order];
    let mut left = vec![0.0; order];
    let mut right = vec![0.0; order];
    local[0] = 1.0;
    for j in 1..=degree {
        left[j] = t - knots[span + 1 - j];
        right[j] = knots[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let temp = if denom == 0.0 { 0.0 } else { local[r] / denom };
            local[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        local[j] = saved;
    }
    for (r, v) in local.into_iter().enumerate() {
        out[span - degree + r] = v;
    }
    out
}

/// Uncentered basis row at `t` (intercept-free).
pub fn raw_row(spec: &BasisSpec, t: f64) -> Vec<f64> {
    match spec.kind {
        BasisKind::BSpline { order, internal_knots } => {
            let knots = knot_vector(order, internal_knots, spec.t_domain);
            bspline_all(order, &knots, t)[1..].to_vec()
        }
        BasisKind::Fourier { harmonics } => {
            let mut row = Vec::with_capacity(2 * harmonics);
            for h in 1..=harmonics {
                let w = 2.0 * PI * h as f64 * t / spec.t_domain;
                row.push(w.sin());
                row.push(w.cos());
            }
            row
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    pub values: DMatrix<f64>,
    pub spec: BasisSpec,
    pub times: Vec<f64>,
    /// Column means subtracted from the raw basis when `spec.centered`.
    pub column_means: Option<DVector<f64>>,
}

fn raw_matrix(spec: &BasisSpec, times: &[f64]) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let d = basis_dim(spec);
    let mut m = DMatrix::zeros(times.len(), d);
    for (r, &t) in times.iter().enumerate() {
        if !(0.0..=spec.t_domain).contains(&t) {
            return Err(Error::TimeOutOfDomain { time: t, domain: spec.t_domain });
        }
        for (c, v) in raw_row(spec, t).into_iter().enumerate() {
            m[(r, c)] = v;
        }
    }
    Ok(m)
}

/// Basis evaluation matrix `L × d` at `times`, centered over those times if
/// the spec asks for it.
pub fn evaluate(spec: &BasisSpec, times: &[f64]) -> Result<BasisMatrix> {
    if times.is_empty() {
        return Err(Error::InvalidBasis("no evaluation times".into()));
    }
    let mut values = raw_matrix(spec, times)?;
    let column_means = if spec.centered {
        let means = values.row_mean().transpose();
        for mut row in values.row_iter_mut() {
            row -= means.transpose();
        }
        Some(means)
    } else {
        None
    };
    Ok(BasisMatrix { values, spec: *spec, times: times.to_vec(), column_means })
}

impl BasisMatrix {
    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Evaluates the same functions at other times, reusing the centering
    /// shift of the original evaluation times.
    pub fn evaluate_at(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = raw_matrix(&self.spec, times)?;
        if let Some(means) = &self.column_means {
            for mut row in m.row_iter_mut() {
                row -= means.transpose();
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PenaltyOrder {
    Ridge = 0,
    SecondDifference = 2,
}

impl TryFrom<u32> for PenaltyOrder {
    type Error = Error;
    fn try_from(v: u32) -> Result<Self> {
        match v {
            0 => Ok(PenaltyOrder::Ridge),
            2 => Ok(PenaltyOrder::SecondDifference),
            other => Err(Error::InvalidConfig(format!("penalty order must be 0 or 2, got {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyMatrix {
    pub values: DMatrix<f64>,
    pub order: PenaltyOrder,
}

pub fn penalty_matrix(spec: &BasisSpec, order: PenaltyOrder) -> Result<PenaltyMatrix> {
    let d = basis_dim(spec);
    let values = match order {
        PenaltyOrder::Ridge => DMatrix::identity(d, d),
        PenaltyOrder::SecondDifference => {
            if d < 3 {
                return Err(Error::PenaltyOrderTooHigh { dim: d });
            }
            let mut diff = DMatrix::zeros(d - 2, d);
            for r in 0..d - 2 {
                diff[(r, r)] = 1.0;
                diff[(r, r + 1)] = -2.0;
                diff[(r, r + 2)] = 1.0;
            }
            diff.transpose() * diff
        }
    };
    Ok(PenaltyMatrix { values, order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::numerical_rank;
    use proptest::prelude::*;

    #[test]
    fn dimensions() {
        assert_eq!(basis_dim(&BasisSpec::bspline(4, 3, 1.0)), 6);
        assert_eq!(basis_dim(&BasisSpec::fourier(1, 1.0)), 2);
        assert_eq!(basis_dim(&BasisSpec::bspline(4, 0, 1.0)), 3);
    }

    #[test]
    fn fourier_at_zero() {
        let m = evaluate(&BasisSpec::fourier(1, 10.0).centered(false), &[0.0]).unwrap();
        assert_eq!(m.values.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0]);
    }

    #[test]
    fn partition_of_unity() {
        let knots = knot_vector(4, 2, 7.0);
        for i in 0..=70 {
            let t = i as f64 * 0.1;
            let s: f64 = bspline_all(4, &knots, t).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "t={t} sum={s}");
        }
    }

    #[test]
    fn cox_de_boor_matches_naive_recursion() {
        fn naive(i: usize, k: usize, knots: &[f64], t: f64, right_end: bool) -> f64 {
            if k == 1 {
                let inside = knots[i] <= t && t < knots[i + 1];
                let closes = right_end && t == knots[i + 1] && knots[i] < knots[i + 1] && knots[i + 1] == *knots.last().unwrap();
                return if inside || closes { 1.0 } else { 0.0 };
            }
            let mut v = 0.0;
            let d1 = knots[i + k - 1] - knots[i];
            if d1 > 0.0 {
                v += (t - knots[i]) / d1 * naive(i, k - 1, knots, t, right_end);
            }
            let d2 = knots[i + k] - knots[i + 1];
            if d2 > 0.0 {
                v += (knots[i + k] - t) / d2 * naive(i + 1, k - 1, knots, t, right_end);
            }
            v
        }
        for order in 2..=5 {
            let knots = knot_vector(order, 3, 4.0);
            let nb = knots.len() - order;
            for step in 0..=40 {
                let t = step as f64 * 0.1;
                let fast = bspline_all(order, &knots, t);
                for (i, v) in fast.iter().enumerate().take(nb) {
                    let slow = naive(i, order, &knots, t, true);
                    assert!((v - slow).abs() < 1e-12, "order {order} t {t} i {i}");
                }
            }
        }
    }

    #[test]
    fn sampled_fourier_columns_are_orthogonal() {
        let times: Vec<f64> = (0..10).map(|k| k as f64).collect();
        let m = evaluate(&BasisSpec::fourier(2, 10.0), &times).unwrap();
        let g = m.values.transpose() * &m.values;
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(g[(i, j)].abs() < 1e-10, "gram[{i},{j}] = {}", g[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn centered_columns_have_zero_mean_and_match_shift() {
        let times: Vec<f64> = (1..=12).map(|k| k as f64).collect();
        let spec = BasisSpec::bspline(4, 3, 12.0);
        let c = evaluate(&spec, &times).unwrap();
        let u = evaluate(&spec.centered(false), &times).unwrap();
        for j in 0..c.dim() {
            assert!(c.values.column(j).mean().abs() < 1e-12);
            assert!(c.values.column(j).amax() > 0.0);
            let shift = &u.values.column(j) - &c.values.column(j);
            assert!(shift.iter().all(|s| (s - shift[0]).abs() < 1e-12));
        }
        assert_eq!(c.evaluate_at(&times).unwrap(), c.values);
    }

    #[test]
    fn full_rank_on_spread_times() {
        let times: Vec<f64> = (1..=10).map(|k| k as f64).collect();
        for spec in [BasisSpec::bspline(4, 2, 10.0), BasisSpec::fourier(2, 10.0), BasisSpec::bspline(3, 4, 10.0)] {
            let m = evaluate(&spec, &times).unwrap();
            assert_eq!(numerical_rank(&m.values, 1e-9), spec.dim());
        }
    }

    #[test]
    fn out_of_domain_time() {
        assert!(matches!(
            evaluate(&BasisSpec::fourier(1, 1.0), &[1.5]),
            Err(Error::TimeOutOfDomain { .. })
        ));
    }

    #[test]
    fn penalty_examples() {
        let p0 = penalty_matrix(&BasisSpec::fourier(2, 1.0), PenaltyOrder::Ridge).unwrap();
        assert_eq!(p0.values, DMatrix::identity(4, 4));
        let p2 = penalty_matrix(&BasisSpec::bspline(4, 0, 1.0), PenaltyOrder::SecondDifference).unwrap();
        let want = DMatrix::from_row_slice(3, 3, &[1., -2., 1., -2., 4., -2., 1., -2., 1.]);
        assert_eq!(p2.values, want);
        let spec = BasisSpec::bspline(4, 5, 1.0);
        let p = penalty_matrix(&spec, PenaltyOrder::SecondDifference).unwrap();
        let lin = DVector::from_fn(spec.dim(), |i, _| (i + 1) as f64);
        assert!((&p.values * lin).amax() < 1e-12);
        assert!(matches!(
            penalty_matrix(&BasisSpec::fourier(1, 1.0), PenaltyOrder::SecondDifference),
            Err(Error::PenaltyOrderTooHigh { dim: 2 })
        ));
    }

    proptest! {
        #[test]
        fn penalties_are_symmetric_psd(m in 1usize..8, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let spec = BasisSpec::bspline(4, m, 1.0);
            let p = penalty_matrix(&spec, PenaltyOrder::SecondDifference).unwrap().values;
            prop_assert!((&p - p.transpose()).amax() < 1e-12);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..1000 {
                let x = DVector::from_fn(spec.dim(), |_, _| rng.random_range(-10.0..10.0));
                prop_assert!(x.dot(&(&p * &x)) >= -1e-10);
            }
        }
    }
}
