use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::Matrix;

/// How features are scaled before forming inner products.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramNorm {
    /// One Frobenius norm over the whole feature map; trace(G) = 1.
    #[default]
    GlobalFrobenius,
    /// Each patch vector normalized on its own; diag(G) = 1.
    PerRow,
}

/// `N x N` patch-correlation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    values: Matrix,
}

impl GramMatrix {
    pub fn from_matrix(values: Matrix) -> Result<Self> {
        if values.rows() != values.cols() || values.is_empty() {
            return Err(shape_err!("gram matrix must be square, got {:?}", values.shape()));
        }
        if !values.all_finite() {
            return Err(shape_err!("gram matrix must be finite"));
        }
        Ok(Self { values })
    }

    pub fn size(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn trace(&self) -> f64 {
        (0..self.size()).map(|i| self.values.get(i, i)).sum()
    }
}

fn check_nondegenerate(f: &Matrix, norm: GramNorm) -> Result<()> {
    let degenerate = match norm {
        GramNorm::GlobalFrobenius => f.data().iter().all(|&v| v == 0.0),
        GramNorm::PerRow => (0..f.rows()).any(|r| f.row(r).iter().all(|&v| v == 0.0)),
    };
    if degenerate {
        return Err(Error::Degenerate(
            "cannot normalize an all-zero feature map (or zero row)".into(),
        ));
    }
    Ok(())
}

pub fn gram(f: &FeatureMap, norm: GramNorm) -> Result<GramMatrix> {
    let m = f.values();
    check_nondegenerate(m, norm)?;
    let normed = match norm {
        // dividing once by the squared norm avoids the rounding of 1/sqrt
        GramNorm::GlobalFrobenius => m.clone(),
        GramNorm::PerRow => {
            let mut out = m.clone();
            let cols = m.cols();
            for (r, row) in out.data_mut().chunks_exact_mut(cols).enumerate() {
                let n = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v /= n);
            }
            out
        }
    };
    let mut g = normed.matmul(&normed.transpose())?;
    if norm == GramNorm::GlobalFrobenius {
        let sq: f64 = m.data().iter().map(|v| v * v).sum();
        g.data_mut().iter_mut().for_each(|v| *v /= sq);
    }
    // exact symmetry regardless of summation order
    let n = g.rows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (g.get(i, j) + g.get(j, i));
            g.set(i, j, v);
            g.set(j, i, v);
        }
    }
    GramMatrix::from_matrix(g)
}

/// Differentiable Gram matrix of an `N x d` feature value.
pub fn gram_var(tape: &mut Tape, f: Var, norm: GramNorm) -> Result<Var> {
    check_nondegenerate(tape.value(f), norm)?;
    let normed = match norm {
        GramNorm::GlobalFrobenius => tape.normalize_global(f),
        GramNorm::PerRow => tape.normalize_rows(f),
    };
    let t = tape.transpose(normed);
    Ok(tape.matmul(normed, t))
}

/// Mean squared entry difference, `||Ga - Gb||_F^2 / N^2`.
pub fn gram_distance(ga: &GramMatrix, gb: &GramMatrix) -> Result<f64> {
    if ga.size() != gb.size() {
        return Err(shape_err!("gram sizes {} vs {}", ga.size(), gb.size()));
    }
    let n = ga.size() as f64;
    let sq: f64 = ga
        .values
        .data()
        .iter()
        .zip(gb.values.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / (n * n))
}

pub fn gram_distance_var(tape: &mut Tape, ga: Var, gb: Var) -> Result<Var> {
    if tape.shape(ga) != tape.shape(gb) || tape.shape(ga).0 != tape.shape(ga).1 {
        return Err(shape_err!("gram shapes {:?} vs {:?}", tape.shape(ga), tape.shape(gb)));
    }
    Ok(tape.mse(ga, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(rows: usize, cols: usize, data: &[f64]) -> FeatureMap {
        FeatureMap::new(Matrix::from_vec(rows, cols, data.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn hand_examples() {
        let g1 = gram(&fm(2, 2, &[1.0, 0.0, 0.0, 1.0]), GramNorm::GlobalFrobenius).unwrap();
        assert_eq!(g1.values().data(), &[0.5, 0.0, 0.0, 0.5]);
        let g2 = gram(&fm(2, 2, &[1.0; 4]), GramNorm::GlobalFrobenius).unwrap();
        for v in g2.values().data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
        assert!((gram_distance(&g1, &g2).unwrap() - 0.125).abs() < 1e-12);
        assert_eq!(gram_distance(&g1, &g1).unwrap(), 0.0);
    }

    #[test]
    fn per_row_unit_diagonal() {
        let g = gram(&fm(3, 2, &[3.0, 4.0, -1.0, 0.5, 0.0, 2.0]), GramNorm::PerRow).unwrap();
        for i in 0..3 {
            assert!((g.values().get(i, i) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_and_mismatch() {
        let z = FeatureMap::new(Matrix::zeros(2, 2)).unwrap();
        assert!(matches!(gram(&z, GramNorm::GlobalFrobenius), Err(Error::Degenerate(_))));
        let a = gram(&fm(2, 1, &[1.0, 2.0]), GramNorm::GlobalFrobenius).unwrap();
        let b = gram(&fm(3, 1, &[1.0, 2.0, 3.0]), GramNorm::GlobalFrobenius).unwrap();
        assert!(matches!(gram_distance(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn tape_matches_direct() {
        let f = fm(3, 2, &[0.3, -1.0, 2.0, 0.1, 0.7, 0.7]);
        for norm in [GramNorm::GlobalFrobenius, GramNorm::PerRow] {
            let mut t = Tape::new();
            let v = t.constant(f.values().clone());
            let g = gram_var(&mut t, v, norm).unwrap();
            let direct = gram(&f, norm).unwrap();
            assert!(t.value(g).max_abs_diff(direct.values()) < 1e-14);
        }
    }
}
