//! Standardization, cross-correlation matrices and the row softmax.

use crate::error::{Error, Result};
use crate::tensor::Var;

pub use crate::tensor::Axis;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorrelationMode {
    /// `D×D` feature correlation, `C = zᵀ·z′ / B`.
    Features,
    /// `B×B` sample similarity, `M = z·z′ᵀ / D`.
    Samples,
}

/// A square correlation matrix recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct CorrelationMatrix<'t> {
    pub values: Var<'t>,
    pub mode: CorrelationMode,
}

impl CorrelationMatrix<'_> {
    pub fn size(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Standardize each slice along `axis` to mean 0 and population std 1.
pub fn standardize<'t>(z: Var<'t>, axis: Axis, allow_degenerate: bool) -> Result<Var<'t>> {
    z.standardize(axis, allow_degenerate)
}

/// Divide-by-count correlation of two `[B×D]` matrices.
///
/// For inputs standardized per the mode (columns for `Features`, rows for
/// `Samples`) this is the cosine-normalized correlation.
pub fn cross_correlation<'t>(
    z: Var<'t>,
    z2: Var<'t>,
    mode: CorrelationMode,
) -> Result<CorrelationMatrix<'t>> {
    let (sa, sb) = (z.shape(), z2.shape());
    if sa.len() != 2 || sa != sb {
        return Err(Error::Dimension {
            op: "cross_correlation",
            lhs: sa,
            rhs: sb,
        });
    }
    let (b, d) = (sa[0], sa[1]);
    let values = match mode {
        CorrelationMode::Features => z.transpose()?.matmul(z2)?.scale(1.0 / b as f64),
        CorrelationMode::Samples => z.matmul(z2.transpose()?)?.scale(1.0 / d as f64),
    };
    Ok(CorrelationMatrix { values, mode })
}

/// Row-wise softmax of `m / tau`; each row is one original sample's
/// distribution over the virtual batch.
pub fn row_softmax<'t>(m: &CorrelationMatrix<'t>, tau: f64) -> Result<Var<'t>> {
    m.values.row_softmax(tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn standardize_two_entry_column() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap());
        let s = standardize(z, Axis::Batch, false).unwrap().value();
        assert_eq!(s.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn standardize_is_idempotent() {
        let tape = Tape::new();
        let raw = Tensor::new(
            vec![4, 3],
            vec![
                0.3, 1.0, -2.0, 1.1, 0.0, 5.0, -0.7, 2.5, 1.0, 0.9, -1.0, 0.1,
            ],
        )
        .unwrap();
        for axis in [Axis::Batch, Axis::Feature] {
            let once = standardize(tape.leaf(raw.clone()), axis, false).unwrap();
            let twice = standardize(once, axis, false).unwrap();
            assert!(once.value().max_abs_diff(&twice.value()) < 1e-12);
        }
    }

    #[test]
    fn constant_column_is_degenerate() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![3, 2], vec![1.0, 4.0, 2.0, 4.0, 3.0, 4.0]).unwrap());
        match standardize(z, Axis::Batch, false) {
            Err(Error::Degenerate { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected degenerate error, got {other:?}"),
        }
        let patched = standardize(z, Axis::Batch, true).unwrap().value();
        assert_eq!(patched.at(0, 1), 0.0);
    }

    #[test]
    fn single_row_batch_rejected() {
        let tape = Tape::new();
        let z = tape.leaf(Tensor::ones(&[1, 4]));
        assert!(matches!(
            standardize(z, Axis::Batch, false),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn self_correlation_has_unit_diagonal() {
        let tape = Tape::new();
        let raw = Tensor::new(
            vec![5, 3],
            (0..15).map(|v| (f64::from(v) * 1.7).sin()).collect(),
        )
        .unwrap();
        let z = standardize(tape.leaf(raw), Axis::Batch, false).unwrap();
        let c = cross_correlation(z, z, CorrelationMode::Features)
            .unwrap()
            .values
            .value();
        for i in 0..3 {
            assert!((c.at(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_columns_have_zero_off_diagonal() {
        let tape = Tape::new();
        // [[1,1],[-1,1]] has a constant second column; stack it with its negation
        // so both columns vary and stay orthogonal.
        let z = standardize(
            tape.leaf(
                Tensor::from_rows(&[
                    vec![1.0, 1.0],
                    vec![-1.0, 1.0],
                    vec![1.0, -1.0],
                    vec![-1.0, -1.0],
                ])
                .unwrap(),
            ),
            Axis::Batch,
            false,
        )
        .unwrap();
        let c = cross_correlation(z, z, CorrelationMode::Features)
            .unwrap()
            .values
            .value();
        assert_eq!(c.at(0, 1), 0.0);
        assert_eq!(c.at(1, 0), 0.0);
    }

    #[test]
    fn correlation_shape_mismatch() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[4, 3]));
        let b = tape.leaf(Tensor::ones(&[4, 2]));
        assert!(matches!(
            cross_correlation(a, b, CorrelationMode::Features),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn softmax_closed_forms() {
        let tape = Tape::new();
        let m = CorrelationMatrix {
            values: tape.leaf(Tensor::from_rows(&[vec![2.0, 0.0], vec![0.5, 0.5]]).unwrap()),
            mode: CorrelationMode::Samples,
        };
        let p = row_softmax(&m, 2.0).unwrap().value();
        let e = std::f64::consts::E;
        assert!((p.at(0, 0) - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.at(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((p.at(0, 0) - 0.731059).abs() < 1e-6);
        assert_eq!(p.at(1, 0), 0.5);

        let sharp = CorrelationMatrix {
            values: tape.leaf(Tensor::from_rows(&[vec![0.3, 0.1, 0.2]]).unwrap()),
            mode: CorrelationMode::Samples,
        };
        assert!(row_softmax(&sharp, 0.01).unwrap().value().at(0, 0) > 0.999);
        assert!(row_softmax(&sharp, 0.0).is_err());
    }
}
