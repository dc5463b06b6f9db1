use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_RANK: usize = 4;

/// The three adapter sets, in the order they are trained and composed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoRAName {
    Pix,
    Sem,
    Gram,
}

impl LoRAName {
    pub const ALL: [LoRAName; 3] = [LoRAName::Pix, LoRAName::Sem, LoRAName::Gram];

    pub fn as_str(self) -> &'static str {
        match self {
            LoRAName::Pix => "pix",
            LoRAName::Sem => "sem",
            LoRAName::Gram => "gram",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for LoRAName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoRAName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pix" => Ok(LoRAName::Pix),
            "sem" => Ok(LoRAName::Sem),
            "gram" => Ok(LoRAName::Gram),
            other => Err(config_err!("unknown adapter set {other:?}")),
        }
    }
}

/// Low-rank factors for one target weight of shape `[in, out]`.
///
/// `a` is `rank x in` and `b` is `out x rank`; the weight update is
/// `scaling * (b a)^T` in the `[in, out]` storage layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoRAPair {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoRAPair {
    /// Update to add to the stored `[in, out]` weight.
    pub fn delta(&self, scaling: f64) -> Matrix {
        self.b
            .matmul(&self.a)
            .expect("pair shapes checked at construction")
            .transpose()
            .scale(scaling)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoRAParamSet {
    pub name: LoRAName,
    pub rank: usize,
    pub scaling: f64,
    /// Keyed by layer name from the denoiser registry.
    pub targets: BTreeMap<String, LoRAPair>,
    pub trainable: bool,
    pub active: bool,
}

impl LoRAParamSet {
    /// `a` drawn from a seeded normal, `b` zero, so the set starts as a no-op.
    pub fn new(
        name: LoRAName,
        rank: usize,
        shapes: &[(String, usize, usize)],
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(config_err!("adapter rank must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x10_4A << name.index()));
        let mut targets = BTreeMap::new();
        for (layer, fan_in, fan_out) in shapes {
            let dist = Normal::new(0.0, (1.0 / *fan_in as f64).sqrt()).expect("positive std");
            let a = Matrix::from_fn(rank, *fan_in, |_, _| dist.sample(&mut rng));
            let b = Matrix::zeros(*fan_out, rank);
            targets.insert(layer.clone(), LoRAPair { a, b });
        }
        Ok(Self {
            name,
            rank,
            scaling: 1.0 / rank as f64,
            targets,
            trainable: false,
            active: true,
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        self.targets
            .keys()
            .flat_map(|layer| {
                [
                    lora_param_name(self.name, layer, 'a'),
                    lora_param_name(self.name, layer, 'b'),
                ]
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || !self.scaling.is_finite() {
            return Err(config_err!("adapter set {} has invalid rank or scaling", self.name));
        }
        for (layer, p) in &self.targets {
            if p.a.rows() != self.rank || p.b.cols() != self.rank {
                return Err(shape_err!("adapter {}.{layer} does not have rank {}", self.name, self.rank));
            }
            if !p.a.all_finite() || !p.b.all_finite() {
                return Err(shape_err!("adapter {}.{layer} is not finite", self.name));
            }
        }
        Ok(())
    }

    pub fn zero_b(&mut self) {
        for p in self.targets.values_mut() {
            p.b = Matrix::zeros(p.b.rows(), p.b.cols());
        }
    }
}

pub fn lora_param_name(set: LoRAName, layer: &str, factor: char) -> String {
    format!("lora.{set}.{layer}.{factor}")
}

/// Which adapter sets take part in a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LoRAActivation {
    pub pix: bool,
    pub sem: bool,
    pub gram: bool,
}

impl LoRAActivation {
    pub const NONE: Self = Self::prefix(0);
    pub const ALL: Self = Self::prefix(3);

    /// The first `k` sets in training order: none, pix, pix+sem, all three.
    pub const fn prefix(k: usize) -> Self {
        Self {
            pix: k >= 1,
            sem: k >= 2,
            gram: k >= 3,
        }
    }

    pub fn is_active(&self, name: LoRAName) -> bool {
        match name {
            LoRAName::Pix => self.pix,
            LoRAName::Sem => self.sem,
            LoRAName::Gram => self.gram,
        }
    }

    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut act = Self::NONE;
        for n in names {
            match n.as_ref().parse::<LoRAName>()? {
                LoRAName::Pix => act.pix = true,
                LoRAName::Sem => act.sem = true,
                LoRAName::Gram => act.gram = true,
            }
        }
        Ok(act)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_zero_b() {
        let s = LoRAParamSet::new(LoRAName::Pix, 4, &[("l".into(), 8, 8)], 1).unwrap();
        let p = &s.targets["l"];
        assert_eq!(p.a.shape(), (4, 8));
        assert_eq!(p.b.shape(), (8, 4));
        assert!(p.b.data().iter().all(|&v| v == 0.0));
        assert_eq!(p.delta(s.scaling), Matrix::zeros(8, 8));
        assert_eq!(s.scaling, 0.25);
        assert!(LoRAParamSet::new(LoRAName::Pix, 0, &[], 1).is_err());
    }

    #[test]
    fn activation_names() {
        assert_eq!(LoRAActivation::from_names(&["pix", "sem"]).unwrap(), LoRAActivation::prefix(2));
        assert!(matches!(LoRAActivation::from_names(&["texture"]), Err(Error::Config(_))));
    }
}
