//! Named parameter storage. Names form a stable ordered namespace
//! (`group.layer.tensor`); the leading segment is the trainability group.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{s, Scalar};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Unet,
    Encoder,
    Adaptor,
    MaskHead,
}

pub const ALL_GROUPS: [ParamGroup; 4] = [
    ParamGroup::Unet,
    ParamGroup::Encoder,
    ParamGroup::Adaptor,
    ParamGroup::MaskHead,
];

impl ParamGroup {
    pub fn prefix(&self) -> &'static str {
        match self {
            ParamGroup::Unet => "unet",
            ParamGroup::Encoder => "encoder",
            ParamGroup::Adaptor => "adaptor",
            ParamGroup::MaskHead => "mask_head",
        }
    }

    pub fn of_name(name: &str) -> Result<ParamGroup> {
        let head = name.split('.').next().unwrap_or("");
        ALL_GROUPS
            .into_iter()
            .find(|g| g.prefix() == head)
            .ok_or_else(|| Error::Invalid(format!("parameter '{name}' has unknown group")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<F: Scalar> {
    pub entries: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> &ArrayD<F> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter '{name}'"))
    }

    pub fn same_namespace(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((na, va), (nb, vb))| na == nb && va.shape() == vb.shape())
    }

    /// Total element count, for reporting.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Builder used by the architecture definitions: He-normal weights, zero
/// biases, unit norm scales, with selected output layers zero-initialized.
pub struct ParamInit<F: Scalar> {
    pub params: ParamSet<F>,
    rng: rand_chacha::ChaCha8Rng,
}

impl<F: Scalar> ParamInit<F> {
    pub fn new(seed: u64) -> Self {
        ParamInit {
            params: ParamSet::new(),
            rng: rng::stream_rng(seed, "param-init"),
        }
    }

    pub fn conv(&mut self, name: &str, cout: usize, cin: usize, kernel: usize, zero: bool) {
        let fan_in = (cin * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = if zero {
            ArrayD::zeros(IxDyn(&[cout, cin, kernel, kernel]))
        } else {
            self.randn(&[cout, cin, kernel, kernel], std)
        };
        self.params.entries.insert(format!("{name}.weight"), w);
        self.params
            .entries
            .insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])));
    }

    pub fn linear(&mut self, name: &str, dout: usize, din: usize, zero: bool) {
        let std = (2.0 / din as f64).sqrt();
        let w = if zero {
            ArrayD::zeros(IxDyn(&[dout, din]))
        } else {
            self.randn(&[dout, din], std)
        };
        self.params.entries.insert(format!("{name}.weight"), w);
        self.params
            .entries
            .insert(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[dout])));
    }

    pub fn norm(&mut self, name: &str, channels: usize) {
        self.params.entries.insert(
            format!("{name}.gamma"),
            ArrayD::from_elem(IxDyn(&[channels]), F::one()),
        );
        self.params
            .entries
            .insert(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
    }

    fn randn(&mut self, shape: &[usize], std: f64) -> ArrayD<F> {
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n)
            .map(|_| {
                let z: f64 = self.rng.sample(StandardNormal);
                s::<F>(z * std)
            })
            .collect();
        ArrayD::from_shape_vec(IxDyn(shape), data).expect("randn shape")
    }
}
