use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::FeatureMap;
use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::Binder;
use crate::tensor::Matrix;

/// Two-layer MLP projecting encoder features into the denoiser's token space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub trainable: bool,
}

impl AdapterParams {
    pub fn zeros(dim: usize, hidden: usize, cond: usize) -> Self {
        Self {
            w1: Matrix::zeros(dim, hidden),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, cond),
            b2: Matrix::zeros(1, cond),
            trainable: false,
        }
    }

    /// He-style init for the first layer, small second layer.
    pub fn init(dim: usize, hidden: usize, cond: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n1 = Normal::new(0.0, (2.0 / dim as f64).sqrt()).expect("positive std");
        let n2 = Normal::new(0.0, (1.0 / hidden as f64).sqrt()).expect("positive std");
        Self {
            w1: Matrix::from_fn(dim, hidden, |_, _| n1.sample(&mut rng)),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::from_fn(hidden, cond, |_, _| n2.sample(&mut rng)),
            b2: Matrix::zeros(1, cond),
            trainable: false,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.w1.cols();
        if self.b1.shape() != (1, h)
            || self.w2.rows() != h
            || self.b2.shape() != (1, self.w2.cols())
        {
            return Err(shape_err!("inconsistent adapter parameter shapes"));
        }
        if ![&self.w1, &self.b1, &self.w2, &self.b2].iter().all(|m| m.all_finite()) {
            return Err(shape_err!("adapter parameters must be finite"));
        }
        Ok(())
    }

    /// `(name, tensor)` pairs in a fixed order, for checkpoints and optimizers.
    pub fn named(&self) -> [(&'static str, &Matrix); 4] {
        [
            ("adapter.w1", &self.w1),
            ("adapter.b1", &self.b1),
            ("adapter.w2", &self.w2),
            ("adapter.b2", &self.b2),
        ]
    }

    pub fn named_mut(&mut self) -> [(&'static str, &mut Matrix); 4] {
        [
            ("adapter.w1", &mut self.w1),
            ("adapter.b1", &mut self.b1),
            ("adapter.w2", &mut self.w2),
            ("adapter.b2", &mut self.b2),
        ]
    }
}

/// Row-wise `relu(f w1 + b1) w2 + b2`.
pub fn adapt(f: &FeatureMap, params: &AdapterParams) -> Result<Matrix> {
    params.validate()?;
    if f.dim() != params.input_dim() {
        return Err(shape_err!(
            "adapter expects {}-dim features, got {}",
            params.input_dim(),
            f.dim()
        ));
    }
    let mut tape = Tape::new();
    let fv = tape.constant(f.values().clone());
    let out = adapt_var(&mut tape, fv, params, &mut Binder::new(), false)?;
    Ok(tape.value(out).clone())
}

/// Adapter forward on the tape. With `track`, the four parameters are bound
/// through `binder` as trainable leaves under their [`AdapterParams::named`] names.
pub fn adapt_var(
    tape: &mut Tape,
    f: Var,
    params: &AdapterParams,
    binder: &mut Binder,
    track: bool,
) -> Result<Var> {
    if tape.shape(f).1 != params.input_dim() {
        return Err(shape_err!(
            "adapter expects {}-dim features, got {:?}",
            params.input_dim(),
            tape.shape(f)
        ));
    }
    let [(n1, w1), (n2, b1), (n3, w2), (n4, b2)] = params.named();
    let w1 = binder.bind(tape, n1, w1, track);
    let b1 = binder.bind(tape, n2, b1, track);
    let w2 = binder.bind(tape, n3, w2, track);
    let b2 = binder.bind(tape, n4, b2, track);
    let h = tape.matmul(f, w1);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let out = tape.matmul(h, w2);
    Ok(tape.add_row(out, b2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn zero_params_zero_tokens() {
        let f = FeatureMap::new(Matrix::filled(3, 4, 0.7)).unwrap();
        let out = adapt(&f, &AdapterParams::zeros(4, 4, 5)).unwrap();
        assert_eq!(out, Matrix::zeros(3, 5));
    }

    #[test]
    fn identity_passthrough() {
        let f = FeatureMap::new(Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64)).unwrap();
        let p = AdapterParams {
            w1: Matrix::identity(4),
            b1: Matrix::zeros(1, 4),
            w2: Matrix::identity(4),
            b2: Matrix::zeros(1, 4),
            trainable: false,
        };
        assert_eq!(&adapt(&f, &p).unwrap(), f.values());
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = |rows, cols| Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0));
        let f = r(3, 4);
        let p = AdapterParams {
            w1: r(4, 6),
            b1: r(1, 6),
            w2: r(6, 5),
            b2: r(1, 5),
            trainable: true,
        };
        let got = adapt(&FeatureMap::new(f.clone()).unwrap(), &p).unwrap();
        for i in 0..3 {
            let mut hidden = [0.0; 6];
            for (j, hv) in hidden.iter_mut().enumerate() {
                let mut s = p.b1.get(0, j);
                for k in 0..4 {
                    s += f.get(i, k) * p.w1.get(k, j);
                }
                *hv = s.max(0.0);
            }
            for o in 0..5 {
                let mut s = p.b2.get(0, o);
                for (j, hv) in hidden.iter().enumerate() {
                    s += hv * p.w2.get(j, o);
                }
                assert!((got.get(i, o) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dim_mismatch() {
        let f = FeatureMap::new(Matrix::filled(2, 3, 1.0)).unwrap();
        assert!(adapt(&f, &AdapterParams::zeros(4, 4, 4)).is_err());
    }
}
