//! Binding named parameters onto a tape and collecting their gradients.

use std::collections::BTreeMap;

use crate::autograd::{Gradients, Tape, Var};
use crate::tensor::Matrix;

/// Gradients keyed by fully qualified parameter name.
pub type GradMap = BTreeMap<String, Matrix>;

/// Records which tape leaves stand for trainable parameters.
#[derive(Debug, Default)]
pub struct Binder {
    entries: Vec<(String, Var)>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Places `value` on the tape. Frozen values become constants and are not recorded.
    pub fn bind(&mut self, tape: &mut Tape, name: &str, value: &Matrix, trainable: bool) -> Var {
        let v = tape.leaf(value.clone(), trainable);
        if trainable {
            self.entries.push((name.to_string(), v));
        }
        v
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    /// Adds this tape's parameter gradients into `acc`, scaled by `weight`.
    pub fn accumulate_into(&self, grads: &Gradients, weight: f64, acc: &mut GradMap) {
        for (name, var) in &self.entries {
            let Some(g) = grads.get(*var) else { continue };
            match acc.get_mut(name) {
                Some(existing) => {
                    for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                        *a += weight * b;
                    }
                }
                None => {
                    acc.insert(name.clone(), g.scale(weight));
                }
            }
        }
    }
}
