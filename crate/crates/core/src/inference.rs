//! Robust covariances, pointwise curve bands and Wald tests.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::basis::BasisMatrix;
use crate::error::{Error, Result};
use crate::linalg::{inverse_spd, symmetrize};
use crate::pgee::{BlockKind, FitResult};

pub const DEFAULT_LEVELS: [f64; 3] = [0.90, 0.95, 0.99];

/// `B⁻¹ M B⁻¹` with `B = info + penalty`, symmetrized.
pub fn sandwich(info: &DMatrix<f64>, penalty: &DMatrix<f64>, meat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let bread = inverse_spd(&(info + penalty)).ok_or(Error::SingularBread)?;
    Ok(symmetrize(&(&bread * meat * &bread)))
}

/// Sandwich covariance of one block, with the bread restricted to that block.
pub fn sandwich_block(fit: &FitResult, kind: BlockKind) -> Result<DMatrix<f64>> {
    let r = fit
        .block_range(kind)
        .ok_or_else(|| Error::InvalidModel(format!("fit has no {kind:?} block")))?;
    let (s, n) = (r.start, r.len());
    sandwich(
        &fit.working_info.view((s, s), (n, n)).into_owned(),
        &fit.penalty.view((s, s), (n, n)).into_owned(),
        &fit.meat.view((s, s), (n, n)).into_owned(),
    )
}

/// Sandwich covariance of every coefficient jointly.
pub fn sandwich_joint(fit: &FitResult) -> Result<DMatrix<f64>> {
    sandwich(&fit.working_info, &fit.penalty, &fit.meat)
}

pub fn normal_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveBand {
    pub times: Vec<f64>,
    pub estimate: Vec<f64>,
    /// Level (per mille) → half widths.
    pub half_widths: BTreeMap<u32, Vec<f64>>,
}

impl CurveBand {
    pub fn half_width(&self, level: f64) -> Option<&[f64]> {
        self.half_widths.get(&level_key(level)).map(Vec::as_slice)
    }

    /// `(lower, upper)` at `level`.
    pub fn interval(&self, level: f64) -> Option<(Vec<f64>, Vec<f64>)> {
        let hw = self.half_width(level)?;
        let lo = self.estimate.iter().zip(hw).map(|(e, h)| e - h).collect();
        let hi = self.estimate.iter().zip(hw).map(|(e, h)| e + h).collect();
        Some((lo, hi))
    }
}

fn level_key(level: f64) -> u32 {
    (level * 1000.0).round() as u32
}

/// Pointwise band for the curve of `kind` (time or one carry-over pair), using
/// the joint sandwich so the uncertainty of the other blocks is carried along.
pub fn curve_band(
    fit: &FitResult,
    basis: &BasisMatrix,
    kind: BlockKind,
    grid: &[f64],
    levels: &[f64],
) -> Result<CurveBand> {
    let theta = fit
        .block_coefficients(kind)
        .ok_or_else(|| Error::InvalidModel(format!("fit has no {kind:?} block")))?;
    let vcov = fit.joint_block_vcov(kind).expect("block present");
    band_from(basis, &theta, &vcov, grid, levels)
}

pub fn band_from(
    basis: &BasisMatrix,
    theta: &DVector<f64>,
    vcov: &DMatrix<f64>,
    grid: &[f64],
    levels: &[f64],
) -> Result<CurveBand> {
    if levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
        return Err(Error::InvalidInput("confidence levels must lie in (0, 1)".into()));
    }
    let phi = basis.evaluate_at(grid)?;
    let estimate = (&phi * theta).iter().copied().collect();
    let pv = &phi * vcov;
    let se: Vec<f64> = (0..grid.len()).map(|i| pv.row(i).dot(&phi.row(i)).max(0.0).sqrt()).collect();
    let half_widths = levels
        .iter()
        .map(|&l| {
            let z = normal_quantile(l);
            (level_key(l), se.iter().map(|s| z * s).collect())
        })
        .collect();
    Ok(CurveBand { times: grid.to_vec(), estimate, half_widths })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldTest {
    pub estimate: f64,
    pub std_error: f64,
    pub statistic: f64,
    pub p_value: f64,
}

/// Two-sided normal test of `cᵀβ = 0`.
pub fn wald(fit: &FitResult, contrast: &[f64]) -> Result<WaldTest> {
    let beta = fit.beta();
    let vcov = fit.vcov_beta().ok_or(Error::ZeroVariance)?;
    wald_from(&beta, vcov, contrast)
}

pub fn wald_from(beta: &DVector<f64>, vcov: &DMatrix<f64>, contrast: &[f64]) -> Result<WaldTest> {
    if contrast.len() != beta.len() {
        return Err(Error::DataShapeMismatch { expected: beta.len(), found: contrast.len() });
    }
    let c = DVector::from_column_slice(contrast);
    let var = (c.transpose() * vcov * &c)[(0, 0)];
    if !(var > 0.0) {
        return Err(Error::ZeroVariance);
    }
    let estimate = c.dot(beta);
    let std_error = var.sqrt();
    let statistic = estimate / std_error;
    Ok(WaldTest { estimate, std_error, statistic, p_value: two_sided_p(statistic) })
}

pub fn two_sided_p(z: f64) -> f64 {
    2.0 * Normal::standard().sf(z.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{evaluate, BasisSpec};
    use crate::correlation::{inverse_r, CorrelationSpec, Structure};
    use crate::design::CrossoverDesign;
    use crate::glm::Family;
    use crate::pgee::{fit as fit_model, Block, FitOptions, ModelSpec, Observations, Penalties, Problem};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn ab_ba(n: usize, l: usize) -> CrossoverDesign {
        let seqs = vec![vec!["A".to_string(), "B".to_string()], vec!["B".to_string(), "A".to_string()]];
        CrossoverDesign::new(seqs, n, (1..=l).map(|k| k as f64).collect(), l as f64).unwrap()
    }

    fn noisy(design: &CrossoverDesign, seed: u64) -> Observations {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = design.obs_per_period() as f64;
        let y = (0..design.num_observations())
            .map(|i| {
                let k = (i % design.obs_per_period()) as f64 + 1.0;
                let e: f64 = StandardNormal.sample(&mut rng);
                (2.0 * std::f64::consts::PI * k / l).sin() + e
            })
            .collect();
        Observations::new(y)
    }

    /// Dense `(DᵀV⁻¹D + Λ)⁻¹ DᵀV⁻¹ blockdiag(rᵢrᵢᵀ) V⁻¹D (DᵀV⁻¹D + Λ)⁻¹` for gaussian identity.
    fn dense_oracle(
        x: &DMatrix<f64>,
        y: &[f64],
        mu: &[f64],
        rinv: &DMatrix<f64>,
        lp: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let n = x.nrows();
        let m = rinv.nrows();
        let mut vinv = DMatrix::zeros(n, n);
        let mut rr = DMatrix::zeros(n, n);
        for u in 0..n / m {
            vinv.view_mut((u * m, u * m), (m, m)).copy_from(rinv);
            for a in 0..m {
                for b in 0..m {
                    rr[(u * m + a, u * m + b)] = (y[u * m + a] - mu[u * m + a]) * (y[u * m + b] - mu[u * m + b]);
                }
            }
        }
        let bread = (x.transpose() * &vinv * x + lp).try_inverse().unwrap();
        let meat = x.transpose() * &vinv * rr * &vinv * x;
        &bread * meat * &bread
    }

    #[test]
    fn joint_sandwich_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for corr in [
            CorrelationSpec::Independence,
            CorrelationSpec::Exchangeable,
            CorrelationSpec::Kronecker { between: Structure::Ar1, within: Structure::Exchangeable },
        ] {
            let (periods, obs, units, q) = (2, 4, 8, 6);
            let n = periods * obs * units;
            let x = DMatrix::from_fn(n, q, |_, _| StandardNormal.sample(&mut rng));
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 3.0).collect();
            let blocks = vec![
                Block { kind: BlockKind::Time, label: "t".into(), cols: 2..q, penalty: Some(DMatrix::identity(4, 4)) },
                Block { kind: BlockKind::Beta, label: "b".into(), cols: 0..2, penalty: None },
            ];
            let names = (0..q).map(|j| j.to_string()).collect();
            let prob = Problem::custom(x.clone(), blocks, periods, obs, names, None).unwrap();
            let opts = FitOptions { tol: 1e-10, ..FitOptions::new(Family::Gaussian, corr) };
            let pen = Penalties::uniform(0.7, 0.0);
            let fit = prob.fit(&Observations::new(y.clone()), &opts, &pen).unwrap();
            let rinv = inverse_r(&corr, &fit.alpha, periods, obs).unwrap();
            let oracle = dense_oracle(&x, &y, &fit.fitted, &rinv, &prob.penalty_full(&pen));
            let ours = sandwich_joint(&fit).unwrap();
            assert!((&ours - &oracle).amax() <= 1e-10 * oracle.amax(), "{corr}");
            assert!((&fit.vcov_joint - &oracle).amax() <= 1e-10 * oracle.amax());
        }
    }

    #[test]
    fn zero_residuals_give_zero_covariance() {
        let design = ab_ba(3, 6);
        let spec = ModelSpec::new(Family::Gaussian, CorrelationSpec::Independence, BasisSpec::fourier(1, 6.0));
        let fit = fit_model(&design, &Observations::new(vec![1.5; design.num_observations()]), &spec).unwrap();
        for kind in [BlockKind::Beta, BlockKind::Time, BlockKind::Carry(0)] {
            assert_eq!(sandwich_block(&fit, kind).unwrap().amax(), 0.0);
        }
    }

    #[test]
    fn larger_time_penalty_shrinks_bread() {
        for seed in 0..10 {
            let design = ab_ba(4, 12);
            let data = noisy(&design, seed);
            let base = ModelSpec {
                penalty_order_time: Some(crate::basis::PenaltyOrder::Ridge),
                ..ModelSpec::new(Family::Gaussian, CorrelationSpec::Independence, BasisSpec::bspline(4, 2, 12.0))
            };
            let fit = fit_model(&design, &data, &base.with_penalties(&Penalties::uniform(1.0, 1.0))).unwrap();
            let r = fit.block_range(BlockKind::Time).unwrap();
            let h = fit.working_info.view((r.start, r.start), (r.len(), r.len())).into_owned();
            let p = DMatrix::identity(r.len(), r.len());
            // model-based variance B H B and the bread B itself at λ and 2λ
            let at = |lam: f64| {
                let b = inverse_spd(&(&h + &p * lam)).unwrap();
                let model = &b * &h * &b;
                (b, model)
            };
            let (b1, m1) = at(1.0);
            let (b2, m2) = at(2.0);
            assert!(crate::linalg::min_eigenvalue(&(&b1 - &b2)) >= -1e-12);
            for j in 0..r.len() {
                assert!(b2[(j, j)] <= b1[(j, j)] && m2[(j, j)] <= m1[(j, j)] * (1.0 + 1e-12), "seed {seed} coef {j}");
            }
        }
    }

    #[test]
    fn covariances_are_psd() {
        let design = ab_ba(5, 10);
        let spec = ModelSpec::new(Family::Gaussian, CorrelationSpec::Exchangeable, BasisSpec::bspline(4, 2, 10.0))
            .with_penalties(&Penalties::uniform(1.0, 10.0));
        let fit = fit_model(&design, &noisy(&design, 4), &spec).unwrap();
        for v in fit.vcov_blocks.iter().chain(std::iter::once(&fit.vcov_joint)) {
            assert_eq!(v, &v.transpose());
            let min = crate::linalg::min_eigenvalue(v);
            assert!(min >= -1e-8 * v.trace());
        }
    }

    #[test]
    fn band_widths_increase_with_level() {
        let design = ab_ba(5, 10);
        let spec = ModelSpec::new(Family::Gaussian, CorrelationSpec::Exchangeable, BasisSpec::bspline(4, 2, 10.0))
            .with_penalties(&Penalties::uniform(1.0, 10.0));
        let prob = spec.problem(&design).unwrap();
        let fit = prob.fit(&noisy(&design, 8), &spec.options(), &spec.penalties()).unwrap();
        let grid: Vec<f64> = (0..50).map(|i| 10.0 * i as f64 / 49.0).collect();
        let band = curve_band(&fit, prob.basis().unwrap(), BlockKind::Time, &grid, &DEFAULT_LEVELS).unwrap();
        let (w90, w95, w99) = (band.half_width(0.90).unwrap(), band.half_width(0.95).unwrap(), band.half_width(0.99).unwrap());
        for i in 0..grid.len() {
            assert!(w90[i] >= 0.0 && w90[i] < w95[i] && w95[i] < w99[i]);
        }
        assert!(curve_band(&fit, prob.basis().unwrap(), BlockKind::Time, &[11.0], &DEFAULT_LEVELS).is_err());
    }

    #[test]
    fn zero_coefficients_give_zero_estimate() {
        let basis = evaluate(&BasisSpec::fourier(2, 5.0), &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let band = band_from(&basis, &DVector::zeros(4), &DMatrix::identity(4, 4), &[0.0, 2.5, 5.0], &[0.95]).unwrap();
        assert!(band.estimate.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn wald_examples() {
        let beta = DVector::from_vec(vec![1.0, 2.0]);
        let v = DMatrix::from_diagonal(&DVector::from_vec(vec![0.25, 1.0]));
        let t = wald_from(&beta, &v, &[1.0, 0.0]).unwrap();
        assert!((t.statistic - 2.0).abs() < 1e-15);
        assert!((t.p_value - 0.0455002638963584).abs() < 1e-9);
        assert!(matches!(wald_from(&beta, &v, &[0.0, 0.0]), Err(Error::ZeroVariance)));
        assert!(wald_from(&beta, &v, &[1.0]).is_err());
        assert!((normal_quantile(0.95) - 1.959963984540054).abs() < 1e-9);
    }
}
