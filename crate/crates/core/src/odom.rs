//! Ego-motion forecasting from past odometry readings.

use panfore_autodiff::{Graph, GruCell, Linear, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Odometry;
use crate::training::{self, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OdomConfig {
    pub hidden: usize,
    /// Readings consumed before forecasting.
    pub history: usize,
}

impl Default for OdomConfig {
    fn default() -> Self {
        OdomConfig { hidden: 32, history: 9 }
    }
}

const META_CONFIG: &str = "odom.config";
const META_NORM: &str = "odom.norm";

/// `GRU_cam` over normalised `[v, yaw rate]` followed by a linear `f_cam`.
#[derive(Debug, Clone)]
pub struct OdomModel {
    pub cfg: OdomConfig,
    pub store: ParamStore,
    gru: GruCell,
    f_cam: Linear,
}

/// The history window and the readings that follow it.
#[derive(Debug, Clone, PartialEq)]
pub struct OdomSample {
    pub history: Vec<Odometry>,
    pub future: Vec<Odometry>,
}

/// Every window of `history` readings followed by `future` more.
pub fn odom_windows(script: &[Odometry], history: usize, future: usize) -> Vec<OdomSample> {
    if history == 0 || script.len() < history + future {
        return Vec::new();
    }
    (0..=script.len() - history - future)
        .map(|s| OdomSample {
            history: script[s..s + history].to_vec(),
            future: script[s + history..s + history + future].to_vec(),
        })
        .collect()
}

/// Repeats the last observed reading.
pub fn hold_last(observed: &[Odometry], steps: usize) -> Vec<Odometry> {
    observed.last().map_or_else(Vec::new, |o| vec![*o; steps])
}

impl OdomModel {
    fn build(cfg: OdomConfig, store: ParamStore) -> Result<Self> {
        if cfg.hidden == 0 || cfg.history == 0 {
            return Err(Error::config("odom.hidden and odom.history must be positive"));
        }
        Ok(OdomModel {
            gru: GruCell::new("gru_cam", 2, cfg.hidden),
            f_cam: Linear::new("f_cam", cfg.hidden, 2),
            cfg,
            store,
        })
    }

    pub fn new(cfg: OdomConfig, seed: u64) -> Result<Self> {
        let mut m = Self::build(cfg, ParamStore::new())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.gru.init(&mut m.store, &mut rng)?;
        m.f_cam.init(&mut m.store, &mut rng)?;
        m.store.set_meta(META_CONFIG, vec![cfg.hidden as f64, cfg.history as f64]);
        m.store.set_meta(META_NORM, vec![0.0, 0.0, 1.0, 1.0]);
        Ok(m)
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let c = store
            .meta(META_CONFIG)
            .filter(|c| c.len() == 2)
            .ok_or_else(|| Error::config("weights lack odometry configuration"))?;
        let cfg = OdomConfig {
            hidden: c[0] as usize,
            history: c[1] as usize,
        };
        let reference = Self::new(cfg, 0)?;
        for (name, t) in reference.store.iter() {
            if store.get(name).map(|g| g.shape() != t.shape()).unwrap_or(true) {
                return Err(Error::config(format!("weights lack a matching tensor {name}")));
            }
        }
        Self::build(cfg, store)
    }

    /// `(mean, std)` of `[v, yaw rate]`.
    pub fn norm(&self) -> ([f64; 2], [f64; 2]) {
        let n = self.store.meta(META_NORM).filter(|n| n.len() == 4).unwrap_or(&[0.0, 0.0, 1.0, 1.0]);
        ([n[0], n[1]], [n[2], n[3]])
    }

    fn fit_norm(&mut self, samples: &[OdomSample]) {
        let vals: Vec<[f64; 2]> = samples
            .iter()
            .flat_map(|s| s.history.iter().chain(&s.future))
            .map(|o| [o.v, o.yaw_rate])
            .collect();
        let n = vals.len().max(1) as f64;
        let mut mean = [0.0; 2];
        let mut std = [1.0; 2];
        for k in 0..2 {
            mean[k] = vals.iter().map(|v| v[k]).sum::<f64>() / n;
            let s = (vals.iter().map(|v| (v[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt();
            std[k] = if s < 1e-9 { 1.0 } else { s };
        }
        self.store.set_meta(META_NORM, vec![mean[0], mean[1], std[0], std[1]]);
    }

    fn normalized(&self, o: &Odometry) -> [f64; 2] {
        let (m, s) = self.norm();
        [(o.v - m[0]) / s[0], (o.yaw_rate - m[1]) / s[1]]
    }

    /// Teacher-forced over `history` (each `B × 2`), then `steps` outputs fed
    /// back autoregressively. Returns normalised predictions `B × 2`.
    fn rollout(&self, g: &Graph<'_>, history: &[Tensor], steps: usize) -> Result<Vec<Var>> {
        let b = history.first().map_or(0, |t| t.shape()[0]);
        let mut h = g.input(Tensor::zeros(&[b, self.cfg.hidden]));
        for x in history {
            h = self.gru.forward(g, g.input(x.clone()), h)?;
        }
        let mut out = Vec::with_capacity(steps);
        for k in 0..steps {
            let y = self.f_cam.forward(g, h)?;
            out.push(y);
            if k + 1 < steps {
                h = self.gru.forward(g, y, h)?;
            }
        }
        Ok(out)
    }

    fn history_tensors(&self, batch: &[&[Odometry]]) -> Result<Vec<Tensor>> {
        let n = batch[0].len();
        (0..n)
            .map(|t| {
                let data = batch.iter().flat_map(|h| self.normalized(&h[t])).collect();
                Ok(Tensor::new(&[batch.len(), 2], data)?)
            })
            .collect()
    }

    /// The next `steps` readings after `observed`, each with time step `dt`.
    pub fn forecast(&self, observed: &[Odometry], steps: usize, dt: f64) -> Result<Vec<Odometry>> {
        if observed.is_empty() {
            return Err(Error::usage("odometry forecast needs at least one observed reading"));
        }
        if steps == 0 {
            return Ok(Vec::new());
        }
        let g = Graph::new(&self.store);
        let preds = self.rollout(&g, &self.history_tensors(&[observed])?, steps)?;
        let (m, s) = self.norm();
        preds
            .into_iter()
            .map(|y| {
                let v = g.value(y);
                Odometry::new(v.data()[0] * s[0] + m[0], v.data()[1] * s[1] + m[1], dt)
            })
            .collect()
    }

    fn loss(&self, g: &Graph<'_>, batch: &[&OdomSample]) -> Result<Var> {
        let hist: Vec<&[Odometry]> = batch.iter().map(|s| s.history.as_slice()).collect();
        let steps = batch[0].future.len();
        let preds = self.rollout(g, &self.history_tensors(&hist)?, steps)?;
        let w = 1.0 / (2 * batch.len() * steps) as f64;
        let mut total: Option<Var> = None;
        for (k, y) in preds.into_iter().enumerate() {
            let target = batch.iter().flat_map(|s| self.normalized(&s.future[k])).collect();
            let term = g.weighted_sum(g.squared_error(y, target)?, vec![w; 2 * batch.len()])?;
            total = Some(match total {
                Some(t) => g.add(t, term)?,
                None => term,
            });
        }
        total.ok_or_else(|| Error::usage("odometry samples have no future readings"))
    }

    /// Mean squared error over `samples` in normalised units.
    pub fn evaluate(&self, samples: &[OdomSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::usage("odometry evaluation set is empty"));
        }
        let g = Graph::new(&self.store);
        let batch: Vec<&OdomSample> = samples.iter().collect();
        let l = self.loss(&g, &batch)?;
        Ok(g.item(l))
    }

    /// Mean squared error of `pred` against `truth` in this model's
    /// normalised units.
    pub fn normalized_mse(&self, pred: &[Odometry], truth: &[Odometry]) -> f64 {
        let n = pred.len().min(truth.len());
        if n == 0 {
            return 0.0;
        }
        pred.iter()
            .zip(truth)
            .map(|(p, t)| {
                let (a, b) = (self.normalized(p), self.normalized(t));
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)) / 2.0
            })
            .sum::<f64>()
            / n as f64
    }
}

/// Adam on the normalised squared error of autoregressive rollouts.
pub fn train_odom(model: &mut OdomModel, samples: &[OdomSample], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate("odom")?;
    let first = samples.first().ok_or_else(|| Error::usage("odometry training set is empty"))?;
    let (h, f) = (first.history.len(), first.future.len());
    if h == 0 || f == 0 || samples.iter().any(|s| s.history.len() != h || s.future.len() != f) {
        return Err(Error::usage("odometry samples must share non-empty history and future lengths"));
    }
    model.fit_norm(samples);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let batch = cfg.batch.min(samples.len());
    for _ in 0..cfg.steps {
        let picks: Vec<&OdomSample> = rand::seq::index::sample(&mut rng, samples.len(), batch)
            .into_iter()
            .map(|i| &samples[i])
            .collect();
        let (value, grads) = {
            let g = Graph::new(&model.store);
            let l = model.loss(&g, &picks)?;
            (g.item(l), g.backward(l)?)
        };
        grads.apply_to(&mut model.store)?;
        training::step(&mut model.store, cfg)?;
        log.losses.push(value);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn script(n: usize, v: f64, yaw: f64) -> Vec<Odometry> {
        (0..n).map(|_| Odometry::new(v, yaw, 0.1).unwrap()).collect()
    }

    #[test]
    fn zero_parameters_forecast_the_mean() {
        let mut m = OdomModel::new(OdomConfig::default(), 0).unwrap();
        m.store.set_meta(META_NORM, vec![5.0, 0.2, 2.0, 0.1]);
        let names: Vec<String> = m.store.names().filter(|n| !n.starts_with("meta.")).map(String::from).collect();
        for n in names {
            m.store.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let out = m.forecast(&script(4, 1.0, 0.0), 3, 0.1).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|o| (o.v - 5.0).abs() < 1e-12 && (o.yaw_rate - 0.2).abs() < 1e-12 && o.dt == 0.1));
        assert!(m.forecast(&script(4, 1.0, 0.0), 0, 0.1).unwrap().is_empty());
    }

    #[test]
    fn zero_steps_leave_weights_alone() {
        let mut m = OdomModel::new(OdomConfig::default(), 2).unwrap();
        let before = m.store.clone();
        let samples = odom_windows(&script(12, 3.0, 0.1), 9, 3);
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        train_odom(&mut m, &samples, &cfg).unwrap();
        for (name, t) in before.iter().filter(|(n, _)| !n.starts_with("meta.")) {
            assert_eq!(m.store.get(name).unwrap().data(), t.data());
        }
        assert!(train_odom(&mut m, &[], &cfg).is_err());
    }

    #[test]
    fn windows_cover_the_script() {
        let w = odom_windows(&script(12, 1.0, 0.0), 9, 3);
        assert_eq!(w.len(), 1);
        assert_eq!(odom_windows(&script(14, 1.0, 0.0), 9, 3).len(), 3);
        assert!(odom_windows(&script(5, 1.0, 0.0), 9, 3).is_empty());
        assert_eq!(hold_last(&script(2, 2.0, 0.5), 2), script(2, 2.0, 0.5));
    }
}
