//! Confusion matrix, overall/average accuracy and Cohen's kappa.
//!
//! With `n` the total count, `p_o = trace/n` and
//! `p_e = Σ_k row_k·col_k / n²`, kappa is `(p_o − p_e) / (1 − p_e)`.

use std::fmt::Write as _;

use crate::classify::PredictionMap;
use crate::data::{GroundTruth, Role, SplitMask};
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes (both 0-based here).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::InvalidArgument("confusion matrix must be square".into()));
        }
        Ok(Self {
            k,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    /// Count for 1-based `truth` and `predicted`.
    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[(truth - 1) * self.k + predicted - 1]
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[(truth - 1) * self.k + predicted - 1] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.counts[i * self.k + i]).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[(truth - 1) * self.k..truth * self.k].iter().sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.k).map(|i| self.counts[i * self.k + predicted - 1]).sum()
    }
}

/// Tallies every Test pixel; Train and unlabeled pixels are ignored.
pub fn confusion(pred: &PredictionMap, gt: &GroundTruth, mask: &SplitMask) -> Result<ConfusionMatrix> {
    mask.check_against(gt)?;
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(
            "prediction vs groundtruth",
            format!("{}x{}", gt.height(), gt.width()),
            format!("{}x{}", pred.height(), pred.width()),
        ));
    }
    if mask.count(Role::Test) == 0 {
        return Err(Error::InvalidArgument("mask has no test pixels to evaluate".into()));
    }
    let k = gt.num_classes();
    let mut cm = ConfusionMatrix::new(k);
    for (p, &role) in mask.roles().iter().enumerate() {
        if role != Role::Test {
            continue;
        }
        let predicted = pred.labels()[p] as usize;
        if predicted == 0 {
            return Err(Error::InvalidArgument(format!("test pixel {p} has no prediction")));
        }
        if predicted > k {
            return Err(Error::InvalidArgument(format!(
                "prediction {predicted} exceeds {k} classes"
            )));
        }
        cm.record(gt.labels()[p] as usize, predicted);
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Per-class recall; `None` for classes with no test samples.
    pub per_class: Vec<Option<f64>>,
}

pub fn oa_aa_kappa(cm: &ConfusionMatrix) -> Result<Scores> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    let n = total as f64;
    let k = cm.num_classes();
    let per_class: Vec<Option<f64>> = (1..=k)
        .map(|c| {
            let row = cm.row_sum(c);
            (row > 0).then(|| cm.get(c, c) as f64 / row as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.len() < k {
        log::warn!("{} classes without test samples excluded from AA", k - present.len());
    }
    let aa = present.iter().sum::<f64>() / present.len() as f64;
    let oa = cm.trace() as f64 / n;
    let pe = (1..=k)
        .map(|c| cm.row_sum(c) as f64 * cm.col_sum(c) as f64)
        .sum::<f64>()
        / (n * n);
    // p_e = 1 only when truth and prediction are both constant and equal
    let kappa = if pe == 1.0 { 1.0 } else { (oa - pe) / (1.0 - pe) };
    Ok(Scores {
        oa,
        aa,
        kappa,
        per_class,
    })
}

/// Plain mean of repeated runs; per-class entries average over runs where present.
pub fn mean_scores(runs: &[Scores]) -> Result<Scores> {
    let first = runs
        .first()
        .ok_or_else(|| Error::InvalidArgument("no runs to average".into()))?;
    let n = runs.len() as f64;
    let k = first.per_class.len();
    if runs.iter().any(|r| r.per_class.len() != k) {
        return Err(Error::InvalidArgument("runs disagree on class count".into()));
    }
    let per_class = (0..k)
        .map(|c| {
            let vals: Vec<f64> = runs.iter().filter_map(|r| r.per_class[c]).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect();
    Ok(Scores {
        oa: runs.iter().map(|r| r.oa).sum::<f64>() / n,
        aa: runs.iter().map(|r| r.aa).sum::<f64>() / n,
        kappa: runs.iter().map(|r| r.kappa).sum::<f64>() / n,
        per_class,
    })
}

/// `class,name,accuracy` rows for every class, then `OA`, `AA` and `kappa` rows.
pub fn scores_to_csv(scores: &Scores, class_names: &[String]) -> String {
    let mut s = String::from("class,name,accuracy\n");
    for (i, acc) in scores.per_class.iter().enumerate() {
        let name = class_names.get(i).map(String::as_str).unwrap_or("");
        let acc = acc.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{}", i + 1, name.replace(',', ";"), acc);
    }
    let _ = writeln!(s, "OA,,{}", scores.oa);
    let _ = writeln!(s, "AA,,{}", scores.aa);
    let _ = writeln!(s, "kappa,,{}", scores.kappa);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn diagonal_is_perfect() {
        let cm = ConfusionMatrix::from_rows(&[vec![4, 0], vec![0, 7]]).unwrap();
        let s = oa_aa_kappa(&cm).unwrap();
        assert_eq!((s.oa, s.aa, s.kappa), (1.0, 1.0, 1.0));
    }

    #[test]
    fn chance_level() {
        let cm = ConfusionMatrix::from_rows(&[vec![1, 1], vec![1, 1]]).unwrap();
        let s = oa_aa_kappa(&cm).unwrap();
        assert_eq!(s.oa, 0.5);
        assert_eq!(s.kappa, 0.0);
    }

    #[test]
    fn hand_computed_kappa() {
        let cm = ConfusionMatrix::from_rows(&[vec![50, 10], vec![5, 35]]).unwrap();
        let s = oa_aa_kappa(&cm).unwrap();
        assert!((s.oa - 0.85).abs() < 1e-12);
        assert!((s.aa - (50.0 / 60.0 + 35.0 / 40.0) / 2.0).abs() < 1e-12);
        assert!((s.kappa - (0.85 - 0.51) / 0.49).abs() < 1e-12);
        assert!((s.kappa - 0.693878).abs() < 1e-6);
    }

    #[test]
    fn empty_row_excluded_from_aa() {
        let cm = ConfusionMatrix::from_rows(&[vec![3, 1], vec![0, 0]]).unwrap();
        let s = oa_aa_kappa(&cm).unwrap();
        assert_eq!(s.per_class, vec![Some(0.75), None]);
        assert_eq!(s.aa, 0.75);
        assert!(oa_aa_kappa(&ConfusionMatrix::new(2)).is_err());
    }

    #[test]
    fn confusion_counts_only_test_pixels() {
        let gt = GroundTruth::with_default_names(1, 4, vec![2, 1, 1, 0], 2).unwrap();
        let mask = SplitMask::new(1, 4, vec![Role::Test, Role::Train, Role::Test, Role::Neither]).unwrap();
        let pred = PredictionMap::new(1, 4, vec![1, 2, 1, 0]).unwrap();
        let cm = confusion(&pred, &gt, &mask).unwrap();
        assert_eq!(cm.get(2, 1), 1);
        assert_eq!(cm.get(1, 1), 1);
        assert_eq!(cm.total(), 2);
        let unpredicted = PredictionMap::new(1, 4, vec![0, 0, 1, 0]).unwrap();
        assert!(confusion(&unpredicted, &gt, &mask).is_err());
        let train_only = SplitMask::new(1, 4, vec![Role::Train, Role::Train, Role::Neither, Role::Neither]).unwrap();
        assert!(confusion(&pred, &gt, &train_only).is_err());
    }

    #[test]
    fn csv_layout() {
        let cm = ConfusionMatrix::from_rows(&[vec![50, 10], vec![5, 35]]).unwrap();
        let s = oa_aa_kappa(&cm).unwrap();
        let csv = scores_to_csv(&s, &["Water".into(), "Trees".into()]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,name,accuracy");
        assert!(lines[1].starts_with("1,Water,0.8333"));
        assert_eq!(lines[3], "OA,,0.85");
        assert_eq!(lines.len(), 6);
    }

    #[test]
    fn mean_of_runs() {
        let a = Scores {
            oa: 0.8,
            aa: 0.6,
            kappa: 0.5,
            per_class: vec![Some(1.0), None],
        };
        let b = Scores {
            oa: 0.9,
            aa: 0.8,
            kappa: 0.7,
            per_class: vec![Some(0.5), Some(0.2)],
        };
        let m = mean_scores(&[a, b]).unwrap();
        assert!((m.oa - 0.85).abs() < 1e-15);
        assert_eq!(m.per_class, vec![Some(0.75), Some(0.2)]);
    }

    fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<u64>>> {
        (2usize..5).prop_flat_map(|k| prop::collection::vec(prop::collection::vec(0u64..30, k), k))
    }

    proptest! {
        #[test]
        fn score_ranges_and_permutation_invariance(rows in matrix_strategy(), seed in 0u64..1000) {
            let cm = ConfusionMatrix::from_rows(&rows).unwrap();
            prop_assume!(cm.total() > 0);
            let s = oa_aa_kappa(&cm).unwrap();
            prop_assert!((0.0..=1.0).contains(&s.oa) && (0.0..=1.0).contains(&s.aa));
            prop_assert!((-1.0..=1.0 + 1e-12).contains(&s.kappa));
            if s.oa < 1.0 {
                prop_assert!(s.kappa <= s.oa + 1e-12);
            }
            let k = rows.len();
            let mut perm: Vec<usize> = (0..k).collect();
            perm.rotate_left(seed as usize % k);
            let permuted: Vec<Vec<u64>> = (0..k).map(|i| (0..k).map(|j| rows[perm[i]][perm[j]]).collect()).collect();
            let p = oa_aa_kappa(&ConfusionMatrix::from_rows(&permuted).unwrap()).unwrap();
            prop_assert!((p.oa - s.oa).abs() < 1e-12);
            prop_assert!((p.aa - s.aa).abs() < 1e-12);
            prop_assert!((p.kappa - s.kappa).abs() < 1e-12);
        }

        #[test]
        fn kappa_one_iff_diagonal(rows in matrix_strategy()) {
            let cm = ConfusionMatrix::from_rows(&rows).unwrap();
            prop_assume!(cm.trace() > 0);
            let s = oa_aa_kappa(&cm).unwrap();
            let diagonal = (0..rows.len()).all(|i| (0..rows.len()).all(|j| i == j || rows[i][j] == 0));
            prop_assert_eq!(s.kappa == 1.0, diagonal);
        }
    }
}
