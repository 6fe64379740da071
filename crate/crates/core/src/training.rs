use panfore_autodiff::{adam_step, AdamConfig, ParamStore};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Optimisation recipe shared by every learned component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            lr: 2e-3,
            batch: 16,
            clip_norm: 5.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            clip_norm: (self.clip_norm > 0.0).then_some(self.clip_norm),
            ..AdamConfig::default()
        }
    }

    pub(crate) fn validate(&self, what: &str) -> Result<()> {
        if self.batch == 0 {
            return Err(crate::Error::config(format!("{what}.batch must be positive")));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(crate::Error::config(format!("{what}.lr must be positive")));
        }
        Ok(())
    }
}

/// Loss per optimisation step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub fn first(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// Means over consecutive windows of `w` steps.
    pub fn smoothed(&self, w: usize) -> Vec<f64> {
        self.losses
            .chunks(w.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn render(&self) -> String {
        let mut s = String::from("step\tloss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i}\t{l:.8}\n"));
        }
        s
    }
}

pub(crate) fn step(store: &mut ParamStore, cfg: &TrainConfig) -> Result<()> {
    adam_step(store, &cfg.adam())?;
    Ok(())
}
