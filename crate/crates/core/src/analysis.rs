//! Signed areas under curves and attribute x perturbation AUC matrices.

use std::collections::BTreeSet;

use crate::curves::{Curve, PruningMode, Task};
use crate::error::{Error, Result};
use crate::scalar::AucScalar;

/// Row label used for match-rate curves, which have no subgroup.
pub const IRC_ROW: &str = "irc";

/// Trapezoidal integral of `ys` over `xs` (assumed non-decreasing).
pub fn trapezoid<S: AucScalar>(xs: &[S], ys: &[S]) -> S {
    let two = S::one() + S::one();
    let mut total = S::zero();
    for k in 1..xs.len().min(ys.len()) {
        let dx = xs[k].clone() - xs[k - 1].clone();
        let sy = ys[k - 1].clone() + ys[k].clone();
        total = total + dx * sy / two.clone();
    }
    total
}

/// Signed AUC of a curve on the stimulus axis normalized to `[0, 1]` by the
/// ladder bounds, integrating over defined points only.
pub fn curve_auc<S: AucScalar>(curve: &Curve) -> Result<S> {
    let defined = curve.points.iter().filter(|p| p.defined()).count();
    let (lower, upper) = curve.bounds().ok_or(Error::AucUndefined { defined })?;
    if defined < 2 || upper <= lower {
        return Err(Error::AucUndefined { defined });
    }
    let lo = S::from_f64_exact(lower);
    let span = S::from_f64_exact(upper) - lo.clone();
    let (xs, ys): (Vec<S>, Vec<S>) = curve
        .points
        .iter()
        .filter_map(|p| {
            let v = p.value?;
            Some(((S::from_f64_exact(p.stimulus) - lo.clone()) / span.clone(), S::from_f64_exact(v)))
        })
        .unzip();
    Ok(trapezoid(&xs, &ys))
}

/// Row label of a curve: `Attr=1`, `Attr=-1`, or [`IRC_ROW`].
pub fn row_label(curve: &Curve) -> String {
    curve.subgroup.as_ref().map_or_else(|| IRC_ROW.to_string(), |s| s.label())
}

/// Attribute x perturbation grid of signed AUCs with L1 marginals over the
/// defined cells.
#[derive(Debug, Clone, PartialEq)]
pub struct AucMatrix<S> {
    pub task: Task,
    pub pruning: PruningMode,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<Vec<Option<S>>>,
    pub row_l1: Vec<S>,
    pub col_l1: Vec<S>,
    pub matrix_l1: S,
    pub undefined_cells: usize,
}

impl<S: AucScalar> AucMatrix<S> {
    /// Assemble a matrix from cell values and compute its marginals.
    pub fn from_values(
        task: Task,
        pruning: PruningMode,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        values: Vec<Vec<Option<S>>>,
    ) -> Result<Self> {
        if values.len() != row_labels.len() || values.iter().any(|r| r.len() != col_labels.len()) {
            return Err(Error::InvalidArgument(format!(
                "AUC values do not form a {}x{} grid",
                row_labels.len(),
                col_labels.len()
            )));
        }
        let mut row_l1 = vec![S::zero(); row_labels.len()];
        let mut col_l1 = vec![S::zero(); col_labels.len()];
        let mut matrix_l1 = S::zero();
        let mut undefined_cells = 0;
        for (i, row) in values.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                match cell {
                    Some(v) => {
                        let a = v.abs();
                        row_l1[i] = row_l1[i].clone() + a.clone();
                        col_l1[j] = col_l1[j].clone() + a.clone();
                        matrix_l1 = matrix_l1 + a;
                    }
                    None => undefined_cells += 1,
                }
            }
        }
        Ok(AucMatrix {
            task,
            pruning,
            row_labels,
            col_labels,
            values,
            row_l1,
            col_l1,
            matrix_l1,
            undefined_cells,
        })
    }

    /// Nearest-f64 view. Marginals are rounded from the exact sums, not re-summed.
    pub fn to_f64(&self) -> AucMatrix<f64> {
        AucMatrix {
            task: self.task,
            pruning: self.pruning,
            row_labels: self.row_labels.clone(),
            col_labels: self.col_labels.clone(),
            values: self
                .values
                .iter()
                .map(|r| r.iter().map(|c| c.as_ref().map(AucScalar::to_f64_nearest)).collect())
                .collect(),
            row_l1: self.row_l1.iter().map(AucScalar::to_f64_nearest).collect(),
            col_l1: self.col_l1.iter().map(AucScalar::to_f64_nearest).collect(),
            matrix_l1: self.matrix_l1.to_f64_nearest(),
            undefined_cells: self.undefined_cells,
        }
    }

    pub fn get(&self, row: &str, col: &str) -> Option<&S> {
        let i = self.row_labels.iter().position(|r| r == row)?;
        let j = self.col_labels.iter().position(|c| c == col)?;
        self.values[i][j].as_ref()
    }
}

/// Build the AUC matrix of curves sharing one task and pruning mode. Rows
/// and columns follow first appearance; cells without a curve, or whose
/// curve has fewer than two defined points, are undefined.
pub fn build_auc_matrix<S: AucScalar>(curves: &[Curve]) -> Result<AucMatrix<S>> {
    let first = curves
        .first()
        .ok_or_else(|| Error::InvalidArgument("no curves to reduce".into()))?;
    let mut rows: Vec<String> = Vec::new();
    let mut cols: Vec<String> = Vec::new();
    for c in curves {
        if c.task != first.task || c.pruning != first.pruning {
            return Err(Error::InvalidArgument(format!(
                "mixed curves: {}/{} and {}/{}",
                first.task, first.pruning, c.task, c.pruning
            )));
        }
        let r = row_label(c);
        if !rows.contains(&r) {
            rows.push(r);
        }
        let k = c.kind.name().to_string();
        if !cols.contains(&k) {
            cols.push(k);
        }
    }
    let mut values: Vec<Vec<Option<S>>> = vec![vec![None; cols.len()]; rows.len()];
    let mut seen = BTreeSet::new();
    for c in curves {
        let (r, k) = (row_label(c), c.kind.name());
        if !seen.insert((r.clone(), k)) {
            return Err(Error::DuplicateCell { row: r, col: k.to_string() });
        }
        let i = rows.iter().position(|x| *x == r).expect("row registered");
        let j = cols.iter().position(|x| x == k).expect("column registered");
        values[i][j] = match curve_auc::<S>(c) {
            Ok(v) => Some(v),
            Err(Error::AucUndefined { defined }) => {
                log::warn!("AUC undefined for {r} x {k}: {defined} defined point(s)");
                None
            }
            Err(e) => return Err(e),
        };
    }
    AucMatrix::from_values(first.task, first.pruning, rows, cols, values)
}

#[cfg(test)]
mod tests {
    use num_rational::BigRational;

    use super::*;
    use crate::curves::CurvePoint;
    use crate::dataset::SubgroupSpec;
    use crate::perturb::PerturbationKind;

    fn curve(kind: PerturbationKind, attr: &str, pts: &[(f64, Option<f64>)]) -> Curve {
        Curve {
            task: Task::Verification,
            kind,
            subgroup: Some(SubgroupSpec::new(attr, true)),
            pruning: PruningMode::None,
            points: pts
                .iter()
                .enumerate()
                .map(|(i, &(s, v))| CurvePoint {
                    level_index: i,
                    stimulus: s,
                    value: v,
                    n_protected: 1,
                    n_unprotected: 1,
                })
                .collect(),
        }
    }

    fn q(n: i64, d: i64) -> BigRational {
        BigRational::new(n.into(), d.into())
    }

    #[test]
    fn auc_examples() {
        let c = curve(PerturbationKind::GaussianBlur, "A", &[(0.0, Some(0.3)), (4.0, Some(0.3)), (8.0, Some(0.3))]);
        assert!((curve_auc::<f64>(&c).unwrap() - 0.3).abs() < 1e-15);
        let c = curve(PerturbationKind::GaussianBlur, "A", &[(0.0, Some(0.0)), (8.0, Some(1.0))]);
        assert_eq!(curve_auc::<f64>(&c).unwrap(), 0.5);
        let c = curve(PerturbationKind::GaussianBlur, "A", &[(0.0, Some(0.2)), (4.0, Some(0.4)), (8.0, Some(0.0))]);
        assert!((curve_auc::<f64>(&c).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn auc_undefined_and_skipped_points() {
        let c = curve(PerturbationKind::Exposure, "A", &[(-4.0, None), (0.0, Some(0.5)), (4.0, None)]);
        assert!(matches!(curve_auc::<f64>(&c), Err(Error::AucUndefined { defined: 1 })));
        // Undefined middle point: integrate straight across it.
        let c = curve(PerturbationKind::Exposure, "A", &[(-4.0, Some(1.0)), (0.0, None), (4.0, Some(1.0))]);
        assert_eq!(curve_auc::<f64>(&c).unwrap(), 1.0);
    }

    #[test]
    fn matrix_marginals_hand_example() {
        let v = vec![vec![Some(q(1, 10)), Some(q(-2, 10))], vec![Some(q(-3, 10)), Some(q(4, 10))]];
        let m = AucMatrix::from_values(
            Task::Verification,
            PruningMode::None,
            vec!["A=1".into(), "B=1".into()],
            vec!["gaussian-blur".into(), "exposure".into()],
            v,
        )
        .unwrap();
        assert_eq!(m.row_l1, vec![q(3, 10), q(7, 10)]);
        assert_eq!(m.col_l1, vec![q(4, 10), q(6, 10)]);
        assert_eq!(m.matrix_l1, q(1, 1));
        let f = m.to_f64();
        assert_eq!(f.row_l1, vec![0.3, 0.7]);
        assert_eq!(f.matrix_l1, 1.0);
    }

    #[test]
    fn build_rejects_duplicates_and_mixed_modes() {
        let a = curve(PerturbationKind::GaussianBlur, "A", &[(0.0, Some(0.0)), (8.0, Some(0.0))]);
        assert!(matches!(
            build_auc_matrix::<f64>(&[a.clone(), a.clone()]),
            Err(Error::DuplicateCell { .. })
        ));
        let mut b = a.clone();
        b.kind = PerturbationKind::Rotation;
        b.pruning = PruningMode::VerificationPairs;
        assert!(build_auc_matrix::<f64>(&[a.clone(), b]).is_err());
        let m = build_auc_matrix::<f64>(&[a]).unwrap();
        assert_eq!(m.values, vec![vec![Some(0.0)]]);
        assert_eq!(m.matrix_l1, 0.0);
    }

    #[test]
    fn missing_cells_count_as_undefined() {
        let a = curve(PerturbationKind::GaussianBlur, "A", &[(0.0, Some(0.5)), (8.0, Some(0.5))]);
        let b = curve(PerturbationKind::Rotation, "B", &[(0.0, Some(-0.5)), (90.0, Some(-0.5))]);
        let m = build_auc_matrix::<f64>(&[a, b]).unwrap();
        assert_eq!(m.undefined_cells, 2);
        assert_eq!(m.matrix_l1, 1.0);
        assert_eq!(m.get("B=1", "rotation"), Some(&-0.5));
    }
}
