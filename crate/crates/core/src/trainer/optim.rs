use std::collections::BTreeMap;

use crate::tensor::Matrix;

/// Adaptive-moment optimizer with bias correction; state keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Advances the shared step counter; call once before updating a step's parameters.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut Matrix, grad: &Matrix) {
        assert!(self.t > 0, "begin_step must precede update");
        assert_eq!(param.shape(), grad.shape(), "gradient shape for {name}");
        let (rows, cols) = param.shape();
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| Matrix::zeros(rows, cols));
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| Matrix::zeros(rows, cols));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..param.len() {
            let g = grad.data()[i];
            let mi = &mut m.data_mut()[i];
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
            let vi = &mut v.data_mut()[i];
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            param.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
