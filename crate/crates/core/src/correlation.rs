//! Working correlation over the `P·L` observations of one unit, flattened in
//! `(period, time)` order, and moment estimation of its parameters.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::ResidualBundle;
use crate::linalg::{inverse_spd, kron, min_eigenvalue, CompensatedSum};

const CLIP_MARGIN: f64 = 1e-4;
const MIN_PRODUCTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Structure {
    Independence,
    Exchangeable,
    Ar1,
}

impl Structure {
    fn params(self) -> usize {
        usize::from(self != Structure::Independence)
    }

    fn matrix(self, alpha: f64, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, m, |i, j| {
            if i == j {
                1.0
            } else {
                match self {
                    Structure::Independence => 0.0,
                    Structure::Exchangeable => alpha,
                    Structure::Ar1 => alpha.powi(i.abs_diff(j) as i32),
                }
            }
        })
    }

    /// Open admissible interval for a matrix of size `m`.
    fn bounds(self, m: usize) -> (f64, f64) {
        match self {
            Structure::Independence => (0.0, 0.0),
            Structure::Exchangeable if m > 1 => (-1.0 / (m as f64 - 1.0), 1.0),
            Structure::Exchangeable => (-1.0, 1.0),
            Structure::Ar1 => (-1.0, 1.0),
        }
    }
}

impl FromStr for Structure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "independence" | "ind" => Ok(Structure::Independence),
            "exchangeable" | "exch" => Ok(Structure::Exchangeable),
            "ar1" => Ok(Structure::Ar1),
            other => Err(Error::InvalidConfig(format!("unknown correlation structure `{other}`"))),
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Structure::Independence => "independence",
            Structure::Exchangeable => "exchangeable",
            Structure::Ar1 => "ar1",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrelationSpec {
    Independence,
    Exchangeable,
    Ar1,
    /// `R_between (P×P) ⊗ R_within (L×L)`.
    Kronecker { between: Structure, within: Structure },
}

impl FromStr for CorrelationSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if let Some(inner) = t.strip_prefix("kronecker(").and_then(|r| r.strip_suffix(')')) {
            let (b, w) = inner
                .split_once(',')
                .ok_or_else(|| Error::InvalidConfig(format!("kronecker needs two structures: `{s}`")))?;
            return Ok(CorrelationSpec::Kronecker { between: b.parse()?, within: w.parse()? });
        }
        Ok(match t.parse::<Structure>()? {
            Structure::Independence => CorrelationSpec::Independence,
            Structure::Exchangeable => CorrelationSpec::Exchangeable,
            Structure::Ar1 => CorrelationSpec::Ar1,
        })
    }
}

impl fmt::Display for CorrelationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorrelationSpec::Independence => f.write_str("independence"),
            CorrelationSpec::Exchangeable => f.write_str("exchangeable"),
            CorrelationSpec::Ar1 => f.write_str("ar1"),
            CorrelationSpec::Kronecker { between, within } => write!(f, "kronecker({between},{within})"),
        }
    }
}

impl CorrelationSpec {
    /// Number of correlation parameters. Kronecker stores `[between.., within..]`.
    pub fn num_params(&self) -> usize {
        match self {
            CorrelationSpec::Independence => 0,
            CorrelationSpec::Exchangeable | CorrelationSpec::Ar1 => 1,
            CorrelationSpec::Kronecker { between, within } => between.params() + within.params(),
        }
    }

    /// Per-parameter `(structure, matrix size)`.
    fn components(&self, periods: usize, obs: usize) -> Vec<(Structure, usize)> {
        match *self {
            CorrelationSpec::Independence => vec![],
            CorrelationSpec::Exchangeable => vec![(Structure::Exchangeable, periods * obs)],
            CorrelationSpec::Ar1 => vec![(Structure::Ar1, periods * obs)],
            CorrelationSpec::Kronecker { between, within } => {
                let mut v = Vec::new();
                if between != Structure::Independence {
                    v.push((between, periods));
                }
                if within != Structure::Independence {
                    v.push((within, obs));
                }
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaEstimate {
    pub alpha: Vec<f64>,
    pub valid: bool,
}

impl AlphaEstimate {
    /// All-zero start (independence).
    pub fn zeros(spec: &CorrelationSpec) -> Self {
        Self { alpha: vec![0.0; spec.num_params()], valid: true }
    }

    pub fn new(spec: &CorrelationSpec, alpha: Vec<f64>, periods: usize, obs: usize) -> Self {
        let comps = spec.components(periods, obs);
        let valid = alpha.len() == comps.len()
            && alpha.iter().zip(&comps).all(|(&a, &(s, m))| {
                let (lo, hi) = s.bounds(m);
                a > lo && a < hi
            });
        Self { alpha, valid }
    }
}

/// Working correlation matrix `R(α)` of size `PL × PL`.
pub fn build_r(spec: &CorrelationSpec, alpha: &AlphaEstimate, periods: usize, obs: usize) -> Result<DMatrix<f64>> {
    let r = build_r_unchecked(spec, alpha, periods, obs)?;
    if spec.num_params() > 0 {
        let min = min_eigenvalue(&r);
        if min < 1e-10 {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
        }
    }
    Ok(r)
}

fn build_r_unchecked(
    spec: &CorrelationSpec,
    alpha: &AlphaEstimate,
    periods: usize,
    obs: usize,
) -> Result<DMatrix<f64>> {
    if alpha.alpha.len() != spec.num_params() {
        return Err(Error::InvalidModel(format!(
            "{spec} needs {} correlation parameters, got {}",
            spec.num_params(),
            alpha.alpha.len()
        )));
    }
    let m = periods * obs;
    Ok(match *spec {
        CorrelationSpec::Independence => DMatrix::identity(m, m),
        CorrelationSpec::Exchangeable => Structure::Exchangeable.matrix(alpha.alpha[0], m),
        CorrelationSpec::Ar1 => Structure::Ar1.matrix(alpha.alpha[0], m),
        CorrelationSpec::Kronecker { between, within } => {
            let (rb, rw) = kron_factors(between, within, &alpha.alpha, periods, obs);
            kron(&rb, &rw)
        }
    })
}

fn kron_factors(
    between: Structure,
    within: Structure,
    alpha: &[f64],
    periods: usize,
    obs: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut it = alpha.iter().copied();
    let ab = if between.params() > 0 { it.next().unwrap_or(0.0) } else { 0.0 };
    let aw = if within.params() > 0 { it.next().unwrap_or(0.0) } else { 0.0 };
    (between.matrix(ab, periods), within.matrix(aw, obs))
}

/// `R(α)⁻¹`, using `A⁻¹ ⊗ B⁻¹` for Kronecker structures.
pub fn inverse_r(spec: &CorrelationSpec, alpha: &AlphaEstimate, periods: usize, obs: usize) -> Result<DMatrix<f64>> {
    let m = periods * obs;
    match *spec {
        CorrelationSpec::Independence => Ok(DMatrix::identity(m, m)),
        CorrelationSpec::Kronecker { between, within } => {
            let (rb, rw) = kron_factors(between, within, &alpha.alpha, periods, obs);
            let min = min_eigenvalue(&rb) * min_eigenvalue(&rw);
            if min < 1e-10 {
                return Err(Error::NotPositiveDefinite { min_eigenvalue: min });
            }
            let ib = inverse_spd(&rb).ok_or(Error::NotPositiveDefinite { min_eigenvalue: min })?;
            let iw = inverse_spd(&rw).ok_or(Error::NotPositiveDefinite { min_eigenvalue: min })?;
            Ok(kron(&ib, &iw))
        }
        _ => {
            let r = build_r(spec, alpha, periods, obs)?;
            inverse_spd(&r).ok_or(Error::NotPositiveDefinite { min_eigenvalue: min_eigenvalue(&r) })
        }
    }
}

/// Moment estimate of `α` from Pearson residuals ordered unit-major, then
/// period, then time.
///
/// Between-period parameters use same-time products across periods;
/// within-period parameters use products inside a period. Flattened
/// exchangeable/AR(1) structures use all pairs / lag-1 neighbours of the
/// `P·L` vector. Estimates are clipped into the admissible interval.
pub fn update_alpha(
    residuals: &ResidualBundle,
    spec: &CorrelationSpec,
    periods: usize,
    obs: usize,
) -> Result<AlphaEstimate> {
    let m = periods * obs;
    let r = &residuals.pearson;
    if m == 0 || r.len() % m != 0 {
        return Err(Error::DataShapeMismatch { expected: m, found: r.len() });
    }
    let units = r.len() / m;
    let phi = residuals.dispersion;

    let mut alpha = Vec::with_capacity(spec.num_params());
    let products = |pairs: &dyn Fn(usize, &mut dyn FnMut(usize, usize))| -> Result<f64> {
        // per-unit partial sums, reduced in unit order
        let mut total = CompensatedSum::default();
        let mut count = 0usize;
        for u in 0..units {
            let base = u * m;
            let mut acc = CompensatedSum::default();
            pairs(base, &mut |a, b| {
                acc.add(r[a] * r[b]);
                count += 1;
            });
            total.add(acc.value());
        }
        if count < MIN_PRODUCTS {
            return Err(Error::InsufficientData(format!(
                "{count} residual products available, need at least {MIN_PRODUCTS}"
            )));
        }
        if phi > 0.0 {
            Ok(total.value() / count as f64 / phi)
        } else {
            Ok(0.0)
        }
    };

    let flat_exch = |base: usize, f: &mut dyn FnMut(usize, usize)| {
        for a in 0..m {
            for b in a + 1..m {
                f(base + a, base + b);
            }
        }
    };
    let flat_ar1 = |base: usize, f: &mut dyn FnMut(usize, usize)| {
        for a in 0..m.saturating_sub(1) {
            f(base + a, base + a + 1);
        }
    };
    let between_exch = |base: usize, f: &mut dyn FnMut(usize, usize)| {
        for k in 0..obs {
            for j in 0..periods {
                for j2 in j + 1..periods {
                    f(base + j * obs + k, base + j2 * obs + k);
                }
            }
        }
    };
    let between_ar1 = |base: usize, f: &mut dyn FnMut(usize, usize)| {
        for k in 0..obs {
            for j in 0..periods.saturating_sub(1) {
                f(base + j * obs + k, base + (j + 1) * obs + k);
            }
        }
    };
    let within_exch = |base: usize, f: &mut dyn FnMut(usize, usize)| {
        for j in 0..periods {
            for k in 0..obs {
                for k2 in k + 1..obs {
                    f(base + j * obs + k, base + j * obs + k2);
                }
            }
        }
    };
    let within_ar1 = |base: usize, f: &mut dyn FnMut(usize, usize)| {
        for j in 0..periods {
            for k in 0..obs.saturating_sub(1) {
                f(base + j * obs + k, base + j * obs + k + 1);
            }
        }
    };

    match *spec {
        CorrelationSpec::Independence => {}
        CorrelationSpec::Exchangeable => alpha.push(products(&flat_exch)?),
        CorrelationSpec::Ar1 => alpha.push(products(&flat_ar1)?),
        CorrelationSpec::Kronecker { between, within } => {
            match between {
                Structure::Independence => {}
                Structure::Exchangeable => alpha.push(products(&between_exch)?),
                Structure::Ar1 => alpha.push(products(&between_ar1)?),
            }
            match within {
                Structure::Independence => {}
                Structure::Exchangeable => alpha.push(products(&within_exch)?),
                Structure::Ar1 => alpha.push(products(&within_ar1)?),
            }
        }
    }

    for (a, (s, size)) in alpha.iter_mut().zip(spec.components(periods, obs)) {
        let (lo, hi) = s.bounds(size);
        *a = a.clamp(lo + CLIP_MARGIN, hi - CLIP_MARGIN);
    }
    Ok(AlphaEstimate::new(spec, alpha, periods, obs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn exch(a: f64) -> AlphaEstimate {
        AlphaEstimate { alpha: vec![a], valid: true }
    }

    #[test]
    fn independence_and_zero_alpha_are_identity() {
        let ind = build_r(&CorrelationSpec::Independence, &AlphaEstimate::zeros(&CorrelationSpec::Independence), 2, 3)
            .unwrap();
        assert_eq!(ind, DMatrix::identity(6, 6));
        let ex = build_r(&CorrelationSpec::Exchangeable, &exch(0.0), 2, 3).unwrap();
        assert_eq!(ex, DMatrix::identity(6, 6));
    }

    #[test]
    fn kronecker_block_structure() {
        let spec = CorrelationSpec::Kronecker { between: Structure::Exchangeable, within: Structure::Independence };
        let r = build_r(&spec, &exch(0.5), 2, 3).unwrap();
        let i3 = DMatrix::<f64>::identity(3, 3);
        assert_eq!(r.view((0, 0), (3, 3)), i3);
        assert_eq!(r.view((0, 3), (3, 3)), &i3 * 0.5);
        assert_eq!(r.view((3, 0), (3, 3)), &i3 * 0.5);
        assert_eq!(r.view((3, 3), (3, 3)), i3);
    }

    #[test]
    fn ar1_lags_in_flattened_order() {
        let r = build_r(&CorrelationSpec::Ar1, &exch(0.5), 2, 2).unwrap();
        assert_eq!(r[(0, 3)], 0.125);
        assert_eq!(r[(1, 2)], 0.5);
    }

    #[test]
    fn not_positive_definite_is_rejected() {
        let bad = AlphaEstimate { alpha: vec![-0.5], valid: false };
        assert!(matches!(
            build_r(&CorrelationSpec::Exchangeable, &bad, 2, 3),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn kronecker_inverse_fast_path_matches_direct() {
        for (b, w) in [
            (Structure::Exchangeable, Structure::Ar1),
            (Structure::Ar1, Structure::Exchangeable),
            (Structure::Ar1, Structure::Ar1),
        ] {
            let spec = CorrelationSpec::Kronecker { between: b, within: w };
            let a = AlphaEstimate::new(&spec, vec![0.3, 0.6], 3, 5);
            assert!(a.valid);
            let fast = inverse_r(&spec, &a, 3, 5).unwrap();
            let direct = build_r(&spec, &a, 3, 5).unwrap().try_inverse().unwrap();
            assert!((fast - direct).amax() < 1e-8);
        }
    }

    #[test]
    fn replicated_periods_give_unit_between_correlation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (units, p, l) = (20, 2, 5);
        let mut r = Vec::new();
        for _ in 0..units {
            let first: Vec<f64> = (0..l).map(|_| StandardNormal.sample(&mut rng)).collect();
            r.extend(&first);
            r.extend(&first);
        }
        let phi = r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64;
        let spec = CorrelationSpec::Kronecker { between: Structure::Exchangeable, within: Structure::Independence };
        let a = update_alpha(&ResidualBundle { pearson: r, dispersion: phi }, &spec, p, l).unwrap();
        assert!((a.alpha[0] - (1.0 - CLIP_MARGIN)).abs() < 1e-12, "{:?}", a.alpha);
        assert!(a.valid);
    }

    #[test]
    fn independent_residuals_give_near_zero_alpha() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (p, l) = (2, 5);
        let n_obs = 10_000;
        let r: Vec<f64> = (0..n_obs).map(|_| StandardNormal.sample(&mut rng)).collect();
        let phi = r.iter().map(|x| x * x).sum::<f64>() / n_obs as f64;
        let bundle = ResidualBundle { pearson: r, dispersion: phi };
        let bound = 3.0 / (n_obs as f64).sqrt();
        for spec in [
            CorrelationSpec::Exchangeable,
            CorrelationSpec::Ar1,
            CorrelationSpec::Kronecker { between: Structure::Exchangeable, within: Structure::Ar1 },
        ] {
            let a = update_alpha(&bundle, &spec, p, l).unwrap();
            for v in a.alpha {
                assert!(v.abs() < bound, "{spec}: {v}");
            }
        }
    }

    #[test]
    fn too_few_products() {
        let b = ResidualBundle { pearson: vec![1.0, -1.0], dispersion: 1.0 };
        assert!(matches!(
            update_alpha(&b, &CorrelationSpec::Exchangeable, 2, 1),
            Err(Error::InsufficientData(_))
        ));
        let spec = CorrelationSpec::Kronecker { between: Structure::Exchangeable, within: Structure::Independence };
        assert!(matches!(update_alpha(&b, &spec, 2, 1), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn parses_structures() {
        assert_eq!("exchangeable".parse::<CorrelationSpec>().unwrap(), CorrelationSpec::Exchangeable);
        let k: CorrelationSpec = "kronecker(ar1, exchangeable)".parse().unwrap();
        assert_eq!(k, CorrelationSpec::Kronecker { between: Structure::Ar1, within: Structure::Exchangeable });
        assert_eq!(k.to_string().parse::<CorrelationSpec>().unwrap(), k);
        assert!("unstructured".parse::<CorrelationSpec>().is_err());
    }

    fn specs() -> impl Strategy<Value = CorrelationSpec> {
        let s = prop_oneof![Just(Structure::Independence), Just(Structure::Exchangeable), Just(Structure::Ar1)];
        prop_oneof![
            Just(CorrelationSpec::Exchangeable),
            Just(CorrelationSpec::Ar1),
            (s.clone(), s).prop_map(|(between, within)| CorrelationSpec::Kronecker { between, within }),
        ]
    }

    proptest! {
        #[test]
        fn update_then_build_is_always_positive_definite(
            spec in specs(),
            p in 2usize..4,
            l in 2usize..5,
            units in 2usize..6,
            seed in any::<u64>(),
            shared in 0.0f64..1.0,
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let m = p * l;
            let mut r = Vec::new();
            for _ in 0..units {
                let common: f64 = StandardNormal.sample(&mut rng);
                for _ in 0..m {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    r.push(shared * common + (1.0 - shared) * e);
                }
            }
            let phi = r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64;
            let a = update_alpha(&ResidualBundle { pearson: r, dispersion: phi }, &spec, p, l).unwrap();
            prop_assert!(a.valid);
            let rm = build_r(&spec, &a, p, l).unwrap();
            prop_assert!((&rm - rm.transpose()).amax() == 0.0);
            prop_assert!(rm.diagonal().iter().all(|&d| d == 1.0));
        }
    }
}
