//! DDPM forward-process schedule: linear betas, precomputed alpha products.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num::{s, Scalar};

pub const DEFAULT_T: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule<F: Scalar> {
    pub betas: Vec<F>,
}

impl<F: Scalar> NoiseSchedule<F> {
    pub fn linear(t_count: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_count < 1 {
            return Err(Error::Invalid("schedule needs T >= 1".into()));
        }
        let betas = (0..t_count)
            .map(|i| {
                let frac = if t_count == 1 {
                    0.0
                } else {
                    i as f64 / (t_count - 1) as f64
                };
                s::<F>(beta_start + (beta_end - beta_start) * frac)
            })
            .collect();
        Ok(NoiseSchedule { betas })
    }

    pub fn default_linear() -> Self {
        Self::linear(DEFAULT_T, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule")
    }

    pub fn from_betas(betas: Vec<F>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Invalid("schedule needs T >= 1".into()));
        }
        Ok(NoiseSchedule { betas })
    }

    pub fn t_count(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[F] {
        &self.betas
    }

    /// Cumulative product of (1 - beta) up to and including `t`.
    pub fn alpha_bar(&self, t: usize) -> F {
        self.betas[..=t]
            .iter()
            .fold(F::one(), |acc, &b| acc * (F::one() - b))
    }

    /// All alpha-bar values, for samplers that index repeatedly.
    pub fn alpha_bars(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.betas.len());
        let mut acc = F::one();
        for &b in &self.betas {
            acc = acc * (F::one() - b);
            out.push(acc);
        }
        out
    }
}
