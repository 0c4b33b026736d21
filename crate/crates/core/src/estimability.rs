//! Full design matrix and the estimability certificate.
//!
//! The matrix is `[1 | T⊗1_L | 𝒫⊗1_L | 1_{nP}⊗Φ | C⊗Φ]` with rows ordered by
//! sequence, unit, period and then the `L` within-period times. A design is
//! certified when assumptions A1–A5 hold and the matrix has full column rank.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::ops::Range;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::basis::{evaluate, BasisMatrix, BasisSpec};
use crate::design::{
    build_indicators, unit_periods_per_pair, validate_layout, Assumption, AssumptionDiagnostic, CarryoverPair,
    CrossoverDesign,
};
use crate::error::{Error, Result};
use crate::linalg::{kron, numerical_rank, ones};

pub const RANK_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum BlockName {
    Intercept,
    Treatment,
    Period,
    Time,
    Carryover(usize),
}

#[derive(Debug, Clone)]
pub struct FullDesignMatrix {
    pub values: DMatrix<f64>,
    pub block_index: Vec<(BlockName, Range<usize>)>,
    pub q: usize,
    pub pairs: Vec<CarryoverPair>,
    /// Non-reference treatment labels, in column order.
    pub treatment_labels: Vec<String>,
    pub basis: BasisMatrix,
}

impl FullDesignMatrix {
    pub fn block(&self, name: &BlockName) -> Option<Range<usize>> {
        self.block_index.iter().find(|(n, _)| n == name).map(|(_, r)| r.clone())
    }

    /// Columns of the unpenalized parametric part (intercept, treatment, period).
    pub fn parametric_columns(&self) -> Range<usize> {
        0..self.block(&BlockName::Time).map_or(self.q, |r| r.start)
    }
}

/// Assembles the design matrix after checking layout assumptions A1–A3.
pub fn assemble_design_matrix(design: &CrossoverDesign, basis: &BasisSpec) -> Result<FullDesignMatrix> {
    let failures: Vec<String> = validate_layout(design)
        .into_iter()
        .filter(|d| !d.passed)
        .map(|d| format!("{}: {}", d.assumption, d.detail))
        .collect();
    if !failures.is_empty() {
        return Err(Error::AssumptionFailed(failures.join("; ")));
    }
    assemble_unchecked(design, basis)
}

/// Assembles the design matrix without checking layout assumptions.
pub fn assemble_unchecked(design: &CrossoverDesign, basis: &BasisSpec) -> Result<FullDesignMatrix> {
    let ind = build_indicators(design)?;
    let phi = evaluate(basis, design.times())?;
    let l = design.obs_per_period();
    let unit_periods = ind.treatment.nrows();
    let d = phi.dim();
    let c = ind.pairs.len();

    let ones_l = ones(l);
    let parts: Vec<(BlockName, DMatrix<f64>)> = vec![
        (BlockName::Intercept, ones(unit_periods * l)),
        (BlockName::Treatment, kron(&ind.treatment, &ones_l)),
        (BlockName::Period, kron(&ind.period, &ones_l)),
        (BlockName::Time, kron(&ones(unit_periods), &phi.values)),
    ];
    let carry = kron(&ind.carryover, &phi.values);

    let q = 1 + ind.treatment.ncols() + ind.period.ncols() + (c + 1) * d;
    let rows = unit_periods * l;
    let mut values = DMatrix::zeros(rows, q);
    let mut block_index = Vec::new();
    let mut col = 0;
    for (name, m) in parts {
        values.columns_mut(col, m.ncols()).copy_from(&m);
        block_index.push((name, col..col + m.ncols()));
        col += m.ncols();
    }
    values.columns_mut(col, c * d).copy_from(&carry);
    for k in 0..c {
        block_index.push((BlockName::Carryover(k), col + k * d..col + (k + 1) * d));
    }
    debug_assert_eq!(col + c * d, q);

    Ok(FullDesignMatrix {
        values,
        block_index,
        q,
        pairs: ind.pairs,
        treatment_labels: ind.treatment_labels,
        basis: phi,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PairActivity {
    pub pair: String,
    /// Active observations: `L` per realizing unit-period.
    pub active_observations: usize,
    pub distinct_active_times: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimabilityReport {
    pub assumption_results: Vec<AssumptionDiagnostic>,
    pub rank_found: usize,
    pub rank_required: usize,
    pub estimable: bool,
    pub per_pair_active_counts: Vec<PairActivity>,
    pub basis_dim: usize,
}

pub fn check_estimability(design: &CrossoverDesign, basis: &BasisSpec) -> EstimabilityReport {
    let mut results = validate_layout(design);
    let d = basis.dim();

    let pairs = crate::design::carryover_pairs(design);
    let unit_periods = unit_periods_per_pair(design, &pairs);
    let distinct_times = design.times().iter().map(|t| t.to_bits()).collect::<BTreeSet<_>>().len();
    let per_pair: Vec<PairActivity> = pairs
        .iter()
        .zip(&unit_periods)
        .map(|(p, &k)| PairActivity {
            pair: p.to_string(),
            active_observations: k * design.obs_per_period(),
            distinct_active_times: if k > 0 { distinct_times } else { 0 },
        })
        .collect();

    let short: Vec<String> = per_pair
        .iter()
        .filter(|a| a.active_observations < d || a.distinct_active_times < d)
        .map(|a| {
            format!(
                "{} ({} active observations at {} distinct times)",
                a.pair, a.active_observations, a.distinct_active_times
            )
        })
        .collect();
    results.push(AssumptionDiagnostic {
        assumption: Assumption::A4,
        passed: short.is_empty(),
        detail: if short.is_empty() {
            format!("every carry-over is active at >= {d} observations and distinct times")
        } else {
            format!("fewer than d = {d} active observations or distinct times: {}", short.join(", "))
        },
    });

    let phi_rank = evaluate(basis, design.times())
        .map(|phi| numerical_rank(&phi.values, RANK_TOLERANCE))
        .unwrap_or(0);
    results.push(AssumptionDiagnostic {
        assumption: Assumption::A5,
        passed: phi_rank == d && design.obs_per_period() >= d,
        detail: format!("basis evaluation matrix has rank {phi_rank} of d = {d} with L = {}", design.obs_per_period()),
    });

    let rank_required = 1 + (design.treatments().len() - 1) + (design.num_periods() - 1) + (pairs.len() + 1) * d;
    let rank_found = assemble_unchecked(design, basis)
        .map(|x| numerical_rank(&x.values, RANK_TOLERANCE))
        .unwrap_or(0);

    let estimable = results.iter().all(|r| r.passed) && rank_found == rank_required;
    EstimabilityReport {
        assumption_results: results,
        rank_found,
        rank_required,
        estimable,
        per_pair_active_counts: per_pair,
        basis_dim: d,
    }
}

impl EstimabilityReport {
    pub fn failed(&self) -> Vec<Assumption> {
        self.assumption_results.iter().filter(|r| !r.passed).map(|r| r.assumption).collect()
    }

    pub fn summary(&self) -> String {
        format!("estimable: {}, rank {}/{}", self.estimable, self.rank_found, self.rank_required)
    }

    /// Multi-line human-readable report.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.summary());
        for r in &self.assumption_results {
            let _ = writeln!(s, "  {} {}: {}", r.assumption, if r.passed { "pass" } else { "FAIL" }, r.detail);
        }
        let _ = writeln!(s, "  active observations per carry-over (L per realizing unit-period):");
        for a in &self.per_pair_active_counts {
            let _ = writeln!(
                s,
                "    {}: {} observations, {} distinct times",
                a.pair, a.active_observations, a.distinct_active_times
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(rows: &[&str]) -> Vec<Vec<String>> {
        rows.iter().map(|r| r.chars().map(|c| c.to_string()).collect()).collect()
    }

    fn design(rows: &[&str], n: usize, l: usize) -> CrossoverDesign {
        let times = (1..=l).map(|k| k as f64).collect();
        CrossoverDesign::new(layout(rows), n, times, l as f64).unwrap()
    }

    #[test]
    fn abba_shape_and_rank() {
        let d = design(&["AB", "BA"], 1, 10);
        let basis = BasisSpec::bspline(4, 2, 10.0);
        let x = assemble_design_matrix(&d, &basis).unwrap();
        assert_eq!(x.values.shape(), (40, 18));
        let report = check_estimability(&d, &basis);
        assert!(report.estimable, "{}", report.to_text());
        assert_eq!((report.rank_found, report.rank_required), (18, 18));
    }

    #[test]
    fn period_one_carry_rows_are_zero() {
        let d = design(&["BADC", "CDAB", "DBCA", "ACBD"], 2, 6);
        let x = assemble_design_matrix(&d, &BasisSpec::fourier(1, 6.0)).unwrap();
        let start = x.block(&BlockName::Carryover(0)).unwrap().start;
        for unit in 0..d.num_units() {
            for k in 0..6 {
                let row = unit * 4 * 6 + k;
                assert!(x.values.view((row, start), (1, x.q - start)).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn williams_shape_and_certificate() {
        let d = design(&["BADC", "CDAB", "DBCA", "ACBD"], 1, 6);
        let basis = BasisSpec::fourier(1, 6.0);
        let x = assemble_design_matrix(&d, &basis).unwrap();
        assert_eq!(x.values.shape(), (96, 33));
        let report = check_estimability(&d, &basis);
        assert!(report.estimable, "{}", report.to_text());
        assert_eq!(report.rank_found, 33);
    }

    #[test]
    fn too_few_times_fails_a4_a5() {
        let d = design(&["AB", "BA"], 2, 3);
        let report = check_estimability(&d, &BasisSpec::bspline(4, 2, 3.0));
        assert!(!report.estimable);
        let failed = report.failed();
        assert!(failed.contains(&Assumption::A4) && failed.contains(&Assumption::A5), "{failed:?}");
    }

    #[test]
    fn single_sequence_treatment_fails_a1() {
        let d = design(&["AB", "BA", "CA", "AC"], 1, 8);
        let d2 = design(&["AB", "BA", "BC"], 1, 8);
        assert!(check_estimability(&d, &BasisSpec::fourier(1, 8.0)).estimable);
        let report = check_estimability(&d2, &BasisSpec::fourier(1, 8.0));
        assert!(!report.estimable);
        assert!(report.failed().contains(&Assumption::A1));
        assert!(assemble_design_matrix(&d2, &BasisSpec::fourier(1, 8.0)).is_err());
    }

    #[test]
    fn block_index_is_disjoint_cover() {
        let d = design(&["BADC", "CDAB", "DBCA", "ACBD"], 1, 8);
        let x = assemble_design_matrix(&d, &BasisSpec::bspline(4, 1, 8.0)).unwrap();
        let mut covered = vec![0; x.q];
        for (_, r) in &x.block_index {
            for c in r.clone() {
                covered[c] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn estimable_gram_is_well_conditioned_after_scaling() {
        for (rows, l, basis) in [
            (vec!["AB", "BA"], 10, BasisSpec::bspline(4, 2, 10.0)),
            (vec!["BADC", "CDAB", "DBCA", "ACBD"], 6, BasisSpec::fourier(1, 6.0)),
            (vec!["ABC", "BCA", "CAB", "ACB", "BAC", "CBA"], 12, BasisSpec::bspline(3, 3, 12.0)),
        ] {
            let d = design(&rows, 2, l);
            assert!(check_estimability(&d, &basis).estimable);
            let mut x = assemble_design_matrix(&d, &basis).unwrap().values;
            for mut c in x.column_iter_mut() {
                let n = c.norm();
                c /= n;
            }
            let gram = x.transpose() * &x;
            assert!(crate::linalg::min_eigenvalue(&gram) >= 1e-9);
        }
    }

    #[test]
    fn kronecker_rank_identity_on_designs() {
        for (rows, l, basis) in [
            (vec!["AB", "BA"], 10, BasisSpec::bspline(4, 2, 10.0)),
            (vec!["BADC", "CDAB", "DBCA", "ACBD"], 6, BasisSpec::fourier(1, 6.0)),
        ] {
            let d = design(&rows, 2, l);
            let ind = build_indicators(&d).unwrap();
            let phi = evaluate(&basis, d.times()).unwrap();
            let k = kron(&ind.carryover, &phi.values);
            assert_eq!(
                numerical_rank(&k, RANK_TOLERANCE),
                numerical_rank(&ind.carryover, RANK_TOLERANCE) * numerical_rank(&phi.values, RANK_TOLERANCE)
            );
        }
    }
}
