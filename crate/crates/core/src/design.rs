//! Crossover layouts and the indicator blocks of the design matrix.
//!
//! Rows of every indicator block are unit-periods in the order
//! `(sequence, unit within sequence, period)`.

use std::collections::BTreeSet;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CrossoverDesign {
    sequences: Vec<Vec<String>>,
    sequence_names: Vec<String>,
    units_per_sequence: usize,
    obs_per_period: usize,
    times: Vec<f64>,
    t_domain: f64,
}

impl CrossoverDesign {
    pub fn new(
        sequences: Vec<Vec<String>>,
        units_per_sequence: usize,
        times: Vec<f64>,
        t_domain: f64,
    ) -> Result<Self> {
        let names = (1..=sequences.len()).map(|i| i.to_string()).collect();
        Self::with_names(sequences, names, units_per_sequence, times, t_domain)
    }

    pub fn with_names(
        sequences: Vec<Vec<String>>,
        sequence_names: Vec<String>,
        units_per_sequence: usize,
        times: Vec<f64>,
        t_domain: f64,
    ) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::InvalidDesign("no sequences".into()));
        }
        if sequence_names.len() != sequences.len() {
            return Err(Error::InvalidDesign("one name per sequence required".into()));
        }
        let periods = sequences[0].len();
        if periods < 2 {
            return Err(Error::InvalidDesign(format!("need at least 2 periods, got {periods}")));
        }
        if let Some((s, row)) = sequences.iter().enumerate().find(|(_, r)| r.len() != periods) {
            return Err(Error::InvalidDesign(format!(
                "sequence {} has {} periods, expected {periods}",
                s + 1,
                row.len()
            )));
        }
        let labels: BTreeSet<&str> = sequences
            .iter()
            .flatten()
            .map(String::as_str)
            .filter(|l| !l.is_empty())
            .collect();
        if labels.len() < 2 {
            return Err(Error::InvalidDesign("need at least 2 distinct treatments".into()));
        }
        if units_per_sequence == 0 {
            return Err(Error::InvalidDesign("units_per_sequence must be positive".into()));
        }
        if times.is_empty() {
            return Err(Error::InvalidDesign("no measurement times".into()));
        }
        if !(t_domain > 0.0) || !t_domain.is_finite() {
            return Err(Error::InvalidDesign(format!("t_domain must be positive, got {t_domain}")));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidDesign("times must be strictly increasing".into()));
        }
        if let Some(&t) = times.iter().find(|&&t| !(0.0..=t_domain).contains(&t)) {
            return Err(Error::TimeOutOfDomain { time: t, domain: t_domain });
        }
        Ok(Self {
            sequences,
            sequence_names,
            units_per_sequence,
            obs_per_period: times.len(),
            times,
            t_domain,
        })
    }

    /// Parses the plain-text layout: one sequence per line, comma-separated
    /// labels, optionally prefixed by `name:`. Blank lines and `#` comments
    /// are ignored.
    pub fn parse_layout(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>)> {
        let mut names = Vec::new();
        let mut rows = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, body) = match line.split_once(':') {
                Some((n, b)) => (n.trim().to_string(), b),
                None => ((rows.len() + 1).to_string(), line),
            };
            rows.push(body.split(',').map(|s| s.trim().to_string()).collect());
            names.push(name);
        }
        if rows.is_empty() {
            return Err(Error::InvalidDesign("layout file has no sequences".into()));
        }
        Ok((names, rows))
    }

    pub fn sequences(&self) -> &[Vec<String>] {
        &self.sequences
    }

    pub fn sequence_names(&self) -> &[String] {
        &self.sequence_names
    }

    pub fn num_sequences(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_periods(&self) -> usize {
        self.sequences[0].len()
    }

    pub fn units_per_sequence(&self) -> usize {
        self.units_per_sequence
    }

    pub fn num_units(&self) -> usize {
        self.units_per_sequence * self.sequences.len()
    }

    pub fn obs_per_period(&self) -> usize {
        self.obs_per_period
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn t_domain(&self) -> f64 {
        self.t_domain
    }

    /// Distinct treatment labels in lexicographic order; the first is the reference.
    pub fn treatments(&self) -> Vec<String> {
        let set: BTreeSet<&String> = self.sequences.iter().flatten().filter(|l| !l.is_empty()).collect();
        set.into_iter().cloned().collect()
    }

    /// Sequence index of unit `u` (units are grouped by sequence).
    pub fn sequence_of_unit(&self, unit: usize) -> usize {
        unit / self.units_per_sequence
    }

    /// Total number of observations `n·S·P·L`.
    pub fn num_observations(&self) -> usize {
        self.num_units() * self.num_periods() * self.obs_per_period
    }

    /// Same layout with a different replication count.
    pub fn with_units_per_sequence(&self, n: usize) -> Result<Self> {
        Self::with_names(
            self.sequences.clone(),
            self.sequence_names.clone(),
            n,
            self.times.clone(),
            self.t_domain,
        )
    }
}

/// Directed first-order carry-over `from → to`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CarryoverPair {
    pub from: String,
    pub to: String,
}

impl CarryoverPair {
    pub fn new(from: impl Into<String>, to: impl Into<String>) -> Self {
        Self { from: from.into(), to: to.into() }
    }
}

impl fmt::Display for CarryoverPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.from, self.to)
    }
}

impl std::str::FromStr for CarryoverPair {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once("->")
            .ok_or_else(|| Error::InvalidInput(format!("carry-over pair `{s}` is not of the form A->B")))?;
        Ok(Self::new(a.trim(), b.trim()))
    }
}

/// Ordered pairs realized anywhere in `layout`, excluding self-pairs.
pub fn pairs_in_layout(layout: &[Vec<String>]) -> Vec<CarryoverPair> {
    let set: BTreeSet<CarryoverPair> = layout
        .iter()
        .flat_map(|row| row.windows(2))
        .filter(|w| w[0] != w[1] && !w[0].is_empty() && !w[1].is_empty())
        .map(|w| CarryoverPair::new(w[0].clone(), w[1].clone()))
        .collect();
    set.into_iter().collect()
}

pub fn carryover_pairs(design: &CrossoverDesign) -> Vec<CarryoverPair> {
    pairs_in_layout(&design.sequences)
}

#[derive(Debug, Clone)]
pub struct IndicatorBlocks {
    /// `nSP × (D−1)`, one column per non-reference treatment.
    pub treatment: DMatrix<f64>,
    /// `nSP × (P−1)`, one column per period after the first.
    pub period: DMatrix<f64>,
    /// `nSP × C`, one column per realized carry-over pair.
    pub carryover: DMatrix<f64>,
    pub pairs: Vec<CarryoverPair>,
    pub treatment_labels: Vec<String>,
}

pub fn build_indicators(design: &CrossoverDesign) -> Result<IndicatorBlocks> {
    for (s, row) in design.sequences.iter().enumerate() {
        if let Some(p) = row.iter().position(|l| l.trim().is_empty()) {
            return Err(Error::DuplicateTreatmentInSequencePeriod { sequence: s + 1, period: p + 1 });
        }
    }
    let labels = design.treatments();
    let pairs = carryover_pairs(design);
    let n = design.units_per_sequence;
    let p = design.num_periods();
    let rows = design.num_units() * p;

    let mut treatment = DMatrix::zeros(rows, labels.len() - 1);
    let mut period = DMatrix::zeros(rows, p - 1);
    let mut carryover = DMatrix::zeros(rows, pairs.len());

    for (s, seq) in design.sequences.iter().enumerate() {
        for i in 0..n {
            let unit = s * n + i;
            for j in 0..p {
                let row = unit * p + j;
                let t = labels.iter().position(|l| l == &seq[j]).expect("label from design");
                if t > 0 {
                    treatment[(row, t - 1)] = 1.0;
                }
                if j > 0 {
                    period[(row, j - 1)] = 1.0;
                    if seq[j - 1] != seq[j] {
                        let key = CarryoverPair::new(seq[j - 1].clone(), seq[j].clone());
                        let c = pairs.binary_search(&key).expect("pair from design");
                        carryover[(row, c)] = 1.0;
                    }
                }
            }
        }
    }

    Ok(IndicatorBlocks {
        treatment,
        period,
        carryover,
        pairs,
        treatment_labels: labels[1..].to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Assumption {
    A1,
    A2,
    A3,
    A4,
    A5,
}

impl fmt::Display for Assumption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionDiagnostic {
    pub assumption: Assumption,
    pub passed: bool,
    /// Human-readable explanation; names the offending item on failure.
    pub detail: String,
}

/// Layout assumptions A1–A3 for the pairs realized by the design.
pub fn validate_layout(design: &CrossoverDesign) -> Vec<AssumptionDiagnostic> {
    validate_layout_with_pairs(design, &carryover_pairs(design))
}

/// Layout assumptions A1–A3 with an explicit list of carry-over pairs the
/// model is asked to include.
pub fn validate_layout_with_pairs(
    design: &CrossoverDesign,
    requested: &[CarryoverPair],
) -> Vec<AssumptionDiagnostic> {
    let seqs = &design.sequences;
    let labels = design.treatments();
    let p = design.num_periods();

    // A1: every treatment in at least two sequences
    let a1_fail: Vec<String> = labels
        .iter()
        .filter(|t| seqs.iter().filter(|row| row.contains(t)).count() < 2)
        .cloned()
        .collect();
    let a1 = AssumptionDiagnostic {
        assumption: Assumption::A1,
        passed: a1_fail.is_empty(),
        detail: if a1_fail.is_empty() {
            "every treatment appears in at least two sequences".into()
        } else {
            format!("treatments in fewer than two sequences: {}", a1_fail.join(", "))
        },
    };

    // A2: every treatment in >1 period, every period with >1 treatment
    let trt_fail: Vec<String> = labels
        .iter()
        .filter(|t| (0..p).filter(|&j| seqs.iter().any(|row| &row[j] == *t)).count() < 2)
        .cloned()
        .collect();
    let per_fail: Vec<String> = (0..p)
        .filter(|&j| seqs.iter().map(|row| &row[j]).collect::<BTreeSet<_>>().len() < 2)
        .map(|j| (j + 1).to_string())
        .collect();
    let mut problems = Vec::new();
    if !trt_fail.is_empty() {
        problems.push(format!("treatments in a single period: {}", trt_fail.join(", ")));
    }
    if !per_fail.is_empty() {
        problems.push(format!("periods with a single treatment: {}", per_fail.join(", ")));
    }
    let a2 = AssumptionDiagnostic {
        assumption: Assumption::A2,
        passed: problems.is_empty(),
        detail: if problems.is_empty() {
            "treatments span several periods and periods mix treatments".into()
        } else {
            problems.join("; ")
        },
    };

    // A3: requested pairs must be realized
    let realized = carryover_pairs(design);
    let missing: Vec<String> = requested
        .iter()
        .filter(|pr| realized.binary_search(pr).is_err())
        .map(|pr| pr.to_string())
        .collect();
    let a3 = AssumptionDiagnostic {
        assumption: Assumption::A3,
        passed: missing.is_empty(),
        detail: if missing.is_empty() {
            format!("all {} carry-over pairs are realized", requested.len())
        } else {
            format!("carry-over pairs never realized: {}", missing.join(", "))
        },
    };

    vec![a1, a2, a3]
}

/// Number of unit-periods realizing each pair of `pairs`.
pub fn unit_periods_per_pair(design: &CrossoverDesign, pairs: &[CarryoverPair]) -> Vec<usize> {
    pairs
        .iter()
        .map(|pr| {
            let per_seq: usize = design
                .sequences
                .iter()
                .map(|row| row.windows(2).filter(|w| w[0] == pr.from && w[1] == pr.to).count())
                .sum();
            per_seq * design.units_per_sequence
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn layout(rows: &[&str]) -> Vec<Vec<String>> {
        rows.iter().map(|r| r.chars().map(|c| c.to_string()).collect()).collect()
    }

    fn grid(l: usize) -> Vec<f64> {
        (1..=l).map(|k| k as f64).collect()
    }

    fn abba(n: usize) -> CrossoverDesign {
        CrossoverDesign::new(layout(&["AB", "BA"]), n, grid(10), 10.0).unwrap()
    }

    fn williams(n: usize) -> CrossoverDesign {
        CrossoverDesign::new(layout(&["BADC", "CDAB", "DBCA", "ACBD"]), n, grid(6), 6.0).unwrap()
    }

    #[test]
    fn abba_pairs() {
        assert_eq!(
            carryover_pairs(&abba(2)),
            vec![CarryoverPair::new("A", "B"), CarryoverPair::new("B", "A")]
        );
    }

    #[test]
    fn williams_has_twelve_pairs() {
        let pairs = carryover_pairs(&williams(1));
        assert_eq!(pairs.len(), 12);
        assert!(pairs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn single_treatment_layout_has_no_pairs() {
        assert!(pairs_in_layout(&layout(&["AA", "AA"])).is_empty());
    }

    #[test]
    fn abba_indicator_matrices_match_worked_example() {
        let ind = build_indicators(&abba(2)).unwrap();
        let t: Vec<f64> = ind.treatment.column(0).iter().copied().collect();
        let p: Vec<f64> = ind.period.column(0).iter().copied().collect();
        assert_eq!(t, vec![0., 1., 0., 1., 1., 0., 1., 0.]);
        assert_eq!(p, vec![0., 1., 0., 1., 0., 1., 0., 1.]);
        let c = DMatrix::from_row_slice(
            8,
            2,
            &[0., 0., 1., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 1.],
        );
        assert_eq!(ind.carryover, c);
    }

    #[test]
    fn williams_carryover_block() {
        let ind = build_indicators(&williams(1)).unwrap();
        assert_eq!(ind.carryover.shape(), (16, 12));
        assert_eq!(ind.carryover.sum(), 12.0);
        for r in 0..16 {
            let s: f64 = ind.carryover.row(r).sum();
            assert!(s <= 1.0);
            if r % 4 == 0 {
                assert_eq!(s, 0.0, "period-1 row {r}");
            }
        }
        for c in 0..12 {
            assert_eq!(ind.carryover.column(c).sum(), 1.0);
        }
    }

    #[test]
    fn empty_label_rejected() {
        let mut rows = layout(&["AB", "BA"]);
        rows.push(vec!["A".into(), "".into()]);
        let d = CrossoverDesign::new(rows, 1, grid(3), 3.0).unwrap();
        assert!(matches!(
            build_indicators(&d),
            Err(Error::DuplicateTreatmentInSequencePeriod { sequence: 3, period: 2 })
        ));
    }

    #[test]
    fn abba_layout_passes() {
        assert!(validate_layout(&abba(1)).iter().all(|d| d.passed));
    }

    #[test]
    fn abab_fails_a2() {
        let d = CrossoverDesign::new(layout(&["AB", "AB"]), 1, grid(3), 3.0).unwrap();
        let diag = validate_layout(&d);
        assert!(!diag[1].passed);
        assert!(diag[1].detail.contains('A'));
    }

    #[test]
    fn unrealized_pair_fails_a3() {
        let d = CrossoverDesign::new(layout(&["AB", "AB", "BB"]), 1, grid(3), 3.0).unwrap();
        let diag = validate_layout_with_pairs(&d, &[CarryoverPair::new("A", "B"), CarryoverPair::new("B", "A")]);
        assert!(!diag[2].passed);
        assert!(diag[2].detail.contains("B->A"));
    }

    #[test]
    fn single_sequence_treatment_fails_a1() {
        let d = CrossoverDesign::new(layout(&["AB", "BA", "BC"]), 1, grid(3), 3.0).unwrap();
        let diag = validate_layout(&d);
        assert!(!diag[0].passed);
        assert!(diag[0].detail.contains('C'));
    }

    #[test]
    fn layout_text_parsing() {
        let (names, rows) = CrossoverDesign::parse_layout("AB: A, B\n# c\nBA: B,A\n").unwrap();
        assert_eq!(names, vec!["AB", "BA"]);
        assert_eq!(rows[1], vec!["B", "A"]);
        let (names, _) = CrossoverDesign::parse_layout("A,B\nB,A").unwrap();
        assert_eq!(names, vec!["1", "2"]);
    }

    #[test]
    fn constructor_rejects_bad_inputs() {
        assert!(CrossoverDesign::new(layout(&["A", "B"]), 1, grid(2), 2.0).is_err());
        assert!(CrossoverDesign::new(layout(&["AA", "AA"]), 1, grid(2), 2.0).is_err());
        assert!(CrossoverDesign::new(layout(&["AB", "BA"]), 1, vec![1.0, 1.0], 2.0).is_err());
        assert!(matches!(
            CrossoverDesign::new(layout(&["AB", "BA"]), 1, vec![1.0, 5.0], 2.0),
            Err(Error::TimeOutOfDomain { .. })
        ));
    }

    #[test]
    fn column_sums_count_realizations() {
        let d = williams(3);
        let ind = build_indicators(&d).unwrap();
        let counts = unit_periods_per_pair(&d, &ind.pairs);
        for (c, &k) in counts.iter().enumerate() {
            assert_eq!(ind.carryover.column(c).sum(), k as f64);
        }
        assert_eq!(ind.treatment.nrows(), 3 * 4 * 4);
    }

    #[test]
    fn relabeling_preserves_rank() {
        use crate::linalg::numerical_rank;
        let a = build_indicators(&williams(1)).unwrap();
        let b = build_indicators(
            &CrossoverDesign::new(layout(&["QPSR", "RSPQ", "SQRP", "PRQS"]), 1, grid(6), 6.0).unwrap(),
        )
        .unwrap();
        let stack = |i: &IndicatorBlocks| {
            let mut m = DMatrix::zeros(16, i.treatment.ncols() + i.period.ncols() + i.carryover.ncols());
            m.columns_mut(0, 3).copy_from(&i.treatment);
            m.columns_mut(3, 3).copy_from(&i.period);
            m.columns_mut(6, 12).copy_from(&i.carryover);
            m
        };
        assert_eq!(numerical_rank(&stack(&a), 1e-9), numerical_rank(&stack(&b), 1e-9));
        assert_eq!(numerical_rank(&a.carryover, 1e-9), 12);
    }
}
