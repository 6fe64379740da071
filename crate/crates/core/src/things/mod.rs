//! Per-instance forecasting: a GRU over box features and a ConvLSTM over
//! mask features, run as an encoder over observed steps and autoregressively
//! as a decoder over future steps.

mod mask;
mod train;

pub use mask::{mask_confidence, paste_mask, MaskOut, MaskSample};
pub use train::{
    batch_loss, copy_last_baseline, linear_baseline, train_mask_out, train_things, ThingsSample,
};

use panfore_autodiff::{ConvLstmCell, Conv2d, Graph, GruCell, Linear, Mlp, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tracks::{BoxFeature, FeatureDims, Track, BOX_DIM};

pub const EGO_DIM: usize = 5;

/// `[v, yaw rate, x, y, θ]`: the reading at the previous step and the planar
/// motion from the previous step to this one.
pub type EgoVector = [f64; EGO_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThingsConfig {
    pub box_hidden: usize,
    pub mask_hidden: usize,
    pub lstm_layers: usize,
    pub kernel: usize,
    pub bfeat: usize,
    pub mfeat_channels: usize,
    pub mfeat: usize,
    pub head_hidden: usize,
    pub mask_out_hidden: usize,
    pub dims: FeatureDims,
    pub num_things: usize,
    /// Class id of the first thing class.
    pub first_thing: u16,
    pub lambda: f64,
}

impl Default for ThingsConfig {
    fn default() -> Self {
        ThingsConfig {
            box_hidden: 32,
            mask_hidden: 16,
            lstm_layers: 1,
            kernel: 3,
            bfeat: 4,
            mfeat_channels: 8,
            mfeat: 16,
            head_hidden: 32,
            mask_out_hidden: 16,
            dims: FeatureDims::default(),
            num_things: 2,
            first_thing: 5,
            lambda: 0.1,
        }
    }
}

impl ThingsConfig {
    /// Dimensions used at full scale (hidden 128, two 256-channel ConvLSTM
    /// layers, 256×14×14 mask features).
    pub fn reference() -> Self {
        ThingsConfig {
            box_hidden: 128,
            mask_hidden: 256,
            lstm_layers: 2,
            kernel: 3,
            bfeat: 16,
            mfeat_channels: 8,
            mfeat: 64,
            head_hidden: 128,
            mask_out_hidden: 256,
            dims: FeatureDims {
                channels: 256,
                height: 14,
                width: 14,
            },
            num_things: 8,
            first_thing: 11,
            lambda: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("box_hidden", self.box_hidden),
            ("mask_hidden", self.mask_hidden),
            ("lstm_layers", self.lstm_layers),
            ("bfeat", self.bfeat),
            ("mfeat_channels", self.mfeat_channels),
            ("mfeat", self.mfeat),
            ("head_hidden", self.head_hidden),
            ("mask_out_hidden", self.mask_out_hidden),
            ("dims.channels", self.dims.channels),
            ("dims.height", self.dims.height),
            ("dims.width", self.dims.width),
            ("num_things", self.num_things),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("things.{name} must be positive")));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config("things.kernel must be odd"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("things.lambda must be positive"));
        }
        Ok(())
    }

    fn encode(&self) -> Vec<f64> {
        [
            self.box_hidden,
            self.mask_hidden,
            self.lstm_layers,
            self.kernel,
            self.bfeat,
            self.mfeat_channels,
            self.mfeat,
            self.head_hidden,
            self.mask_out_hidden,
            self.dims.channels,
            self.dims.height,
            self.dims.width,
            self.num_things,
            self.first_thing as usize,
        ]
        .iter()
        .map(|&v| v as f64)
        .chain([self.lambda])
        .collect()
    }

    fn decode(v: &[f64]) -> Result<Self> {
        if v.len() != 15 || v.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::config("malformed things configuration in weights"));
        }
        let u = |i: usize| v[i] as usize;
        let cfg = ThingsConfig {
            box_hidden: u(0),
            mask_hidden: u(1),
            lstm_layers: u(2),
            kernel: u(3),
            bfeat: u(4),
            mfeat_channels: u(5),
            mfeat: u(6),
            head_hidden: u(7),
            mask_out_hidden: u(8),
            dims: FeatureDims {
                channels: u(9),
                height: u(10),
                width: u(11),
            },
            num_things: u(12),
            first_thing: v[13] as u16,
            lambda: v[14],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn gru_input(&self) -> usize {
        BOX_DIM + EGO_DIM + self.mfeat
    }
}

/// Per-dimension standardisation of box features and ego vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub box_mean: [f64; BOX_DIM],
    pub box_std: [f64; BOX_DIM],
    pub ego_mean: EgoVector,
    pub ego_std: EgoVector,
}

impl Default for NormStats {
    fn default() -> Self {
        NormStats {
            box_mean: [0.0; BOX_DIM],
            box_std: [1.0; BOX_DIM],
            ego_mean: [0.0; EGO_DIM],
            ego_std: [1.0; EGO_DIM],
        }
    }
}

fn mean_std<const N: usize>(rows: impl Iterator<Item = [f64; N]>) -> ([f64; N], [f64; N]) {
    let mut sum = [0.0; N];
    let mut sq = [0.0; N];
    let mut n = 0usize;
    for r in rows {
        for k in 0..N {
            sum[k] += r[k];
            sq[k] += r[k] * r[k];
        }
        n += 1;
    }
    let mut mean = [0.0; N];
    let mut std = [1.0; N];
    if n > 0 {
        for k in 0..N {
            mean[k] = sum[k] / n as f64;
            let s = (sq[k] / n as f64 - mean[k] * mean[k]).max(0.0).sqrt();
            std[k] = if s < 1e-9 { 1.0 } else { s };
        }
    }
    (mean, std)
}

impl NormStats {
    pub fn fit<'a>(boxes: impl Iterator<Item = &'a BoxFeature>, egos: impl Iterator<Item = &'a EgoVector>) -> Self {
        let (box_mean, box_std) = mean_std(boxes.copied());
        let (ego_mean, ego_std) = mean_std(egos.copied());
        NormStats {
            box_mean,
            box_std,
            ego_mean,
            ego_std,
        }
    }

    pub fn norm_box(&self, b: &BoxFeature) -> BoxFeature {
        std::array::from_fn(|k| (b[k] - self.box_mean[k]) / self.box_std[k])
    }

    pub fn denorm_box(&self, b: &[f64]) -> BoxFeature {
        std::array::from_fn(|k| b[k] * self.box_std[k] + self.box_mean[k])
    }

    pub fn norm_ego(&self, e: &EgoVector) -> EgoVector {
        std::array::from_fn(|k| (e[k] - self.ego_mean[k]) / self.ego_std[k])
    }
}

const META_CONFIG: &str = "things.config";
const META_BOX_MEAN: &str = "things.box_mean";
const META_BOX_STD: &str = "things.box_std";
const META_EGO_MEAN: &str = "things.ego_mean";
const META_EGO_STD: &str = "things.ego_std";

/// Recurrent state and the latest prediction, all bound to one graph.
#[derive(Debug, Clone)]
pub struct State {
    pub h_b: Var,
    /// `(h, c)` per ConvLSTM layer.
    pub cells: Vec<(Var, Var)>,
    pub x: Var,
    pub r: Var,
}

/// One encoder step for a batch: normalised boxes `B×10`, mask features
/// `B×C×h×w` and normalised ego vectors `B×5`.
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub x: Tensor,
    pub r: Tensor,
    pub ego: Tensor,
}

#[derive(Debug, Clone)]
struct Branch {
    gru: GruCell,
    lstm: Vec<ConvLstmCell>,
}

#[derive(Debug, Clone)]
pub struct ThingsModel {
    pub cfg: ThingsConfig,
    pub store: ParamStore,
    enc: Branch,
    dec: Branch,
    f_bbox: Mlp,
    f_enc_b: Mlp,
    f_bfeat: Linear,
    f_mfeat_conv: Conv2d,
    f_mfeat_fc: Linear,
    f_mask: Conv2d,
    f_enc_m: Conv2d,
    pub mask_out: MaskOut,
}

impl ThingsModel {
    fn build(cfg: ThingsConfig, store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.dims;
        let branch = |tag: &str| -> Result<Branch> {
            let lstm = (0..cfg.lstm_layers)
                .map(|l| {
                    let input = if l == 0 { dims.channels + cfg.bfeat } else { cfg.mask_hidden };
                    ConvLstmCell::new(format!("lstm_{tag}.{l}"), input, cfg.mask_hidden, cfg.kernel)
                })
                .collect::<std::result::Result<_, _>>()?;
            Ok(Branch {
                gru: GruCell::new(format!("gru_{tag}"), cfg.gru_input(), cfg.box_hidden),
                lstm,
            })
        };
        Ok(ThingsModel {
            enc: branch("enc")?,
            dec: branch("dec")?,
            f_bbox: Mlp::new("f_bbox", &[cfg.box_hidden, cfg.head_hidden, BOX_DIM]),
            f_enc_b: Mlp::new("f_enc_b", &[cfg.box_hidden, cfg.head_hidden, BOX_DIM]),
            f_bfeat: Linear::new("f_bfeat", cfg.box_hidden, cfg.bfeat),
            f_mfeat_conv: Conv2d::new("f_mfeat.conv", dims.channels, cfg.mfeat_channels, 1)?,
            f_mfeat_fc: Linear::new("f_mfeat.fc", cfg.mfeat_channels * dims.height * dims.width, cfg.mfeat),
            f_mask: Conv2d::new("f_mask", cfg.mask_hidden, dims.channels, 1)?,
            f_enc_m: Conv2d::new("f_enc_m", cfg.mask_hidden, dims.channels, 1)?,
            mask_out: MaskOut::new(&cfg)?,
            cfg,
            store,
        })
    }

    pub fn new(cfg: ThingsConfig, seed: u64) -> Result<Self> {
        let mut m = Self::build(cfg, ParamStore::new())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for b in [&m.enc, &m.dec] {
            b.gru.init(&mut store, &mut rng)?;
            for l in &b.lstm {
                l.init(&mut store, &mut rng)?;
            }
        }
        m.f_bbox.init(&mut store, &mut rng)?;
        m.f_enc_b.init(&mut store, &mut rng)?;
        m.f_bfeat.init(&mut store, &mut rng)?;
        m.f_mfeat_conv.init(&mut store, &mut rng)?;
        m.f_mfeat_fc.init(&mut store, &mut rng)?;
        m.f_mask.init(&mut store, &mut rng)?;
        m.f_enc_m.init(&mut store, &mut rng)?;
        m.mask_out.init(&mut store, &mut rng)?;
        store.set_meta(META_CONFIG, cfg.encode());
        m.store = store;
        m.set_stats(&NormStats::default());
        Ok(m)
    }

    /// Rebuilds a model from loaded weights, checking every expected tensor.
    pub fn from_store(store: ParamStore) -> Result<Self> {
        let cfg = ThingsConfig::decode(
            store
                .meta(META_CONFIG)
                .ok_or_else(|| Error::config("weights lack things configuration"))?,
        )?;
        let reference = Self::new(cfg, 0)?;
        for (name, t) in reference.store.iter() {
            match store.get(name) {
                Some(got) if got.shape() == t.shape() => {}
                Some(got) => {
                    return Err(Error::config(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        got.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::config(format!("weights lack tensor {name}"))),
            }
        }
        Self::build(cfg, store)
    }

    pub fn stats(&self) -> NormStats {
        let arr = |key: &str, fill: f64| -> Vec<f64> { self.store.meta(key).map_or_else(|| vec![fill], <[f64]>::to_vec) };
        let take = |v: Vec<f64>, n: usize, fill: f64| -> Vec<f64> { if v.len() == n { v } else { vec![fill; n] } };
        let b_m = take(arr(META_BOX_MEAN, 0.0), BOX_DIM, 0.0);
        let b_s = take(arr(META_BOX_STD, 1.0), BOX_DIM, 1.0);
        let e_m = take(arr(META_EGO_MEAN, 0.0), EGO_DIM, 0.0);
        let e_s = take(arr(META_EGO_STD, 1.0), EGO_DIM, 1.0);
        NormStats {
            box_mean: b_m.try_into().expect("sized"),
            box_std: b_s.try_into().expect("sized"),
            ego_mean: e_m.try_into().expect("sized"),
            ego_std: e_s.try_into().expect("sized"),
        }
    }

    pub fn set_stats(&mut self, s: &NormStats) {
        self.store.set_meta(META_BOX_MEAN, s.box_mean.to_vec());
        self.store.set_meta(META_BOX_STD, s.box_std.to_vec());
        self.store.set_meta(META_EGO_MEAN, s.ego_mean.to_vec());
        self.store.set_meta(META_EGO_STD, s.ego_std.to_vec());
    }

    fn mfeat(&self, g: &Graph<'_>, r: Var) -> Result<Var> {
        let b = g.shape(r)[0];
        let h = g.relu(self.f_mfeat_conv.forward(g, r)?);
        let d = &self.cfg.dims;
        let flat = g.reshape(h, &[b, self.cfg.mfeat_channels * d.height * d.width])?;
        Ok(self.f_mfeat_fc.forward(g, flat)?)
    }

    fn cell(&self, g: &Graph<'_>, branch: &Branch, x: Var, r: Var, ego: Var, h_b: Var, cells: &mut [(Var, Var)]) -> Result<Var> {
        let mf = self.mfeat(g, r)?;
        let inp = g.concat(&[x, ego, mf])?;
        let h_b = branch.gru.forward(g, inp, h_b)?;
        let d = &self.cfg.dims;
        let bf = g.broadcast_spatial(self.f_bfeat.forward(g, h_b)?, d.height, d.width)?;
        let mut input = g.concat(&[r, bf])?;
        for (l, (h, c)) in branch.lstm.iter().zip(cells.iter_mut()) {
            let (nh, nc) = l.forward(g, input, *h, *c)?;
            *h = nh;
            *c = nc;
            input = nh;
        }
        Ok(h_b)
    }

    fn check_batch(&self, s: &StepBatch, b: usize) -> Result<()> {
        let d = &self.cfg.dims;
        if s.x.shape() != [b, BOX_DIM] || s.ego.shape() != [b, EGO_DIM] || s.r.shape() != [b, d.channels, d.height, d.width] {
            return Err(Error::usage(format!(
                "encoder step shapes {:?}/{:?}/{:?} do not fit batch {b} and features {:?}",
                s.x.shape(),
                s.r.shape(),
                s.ego.shape(),
                d
            )));
        }
        Ok(())
    }

    /// Runs the encoder over observed steps and returns the state with the
    /// filled-in estimate for the last observed step.
    pub fn encode(&self, g: &Graph<'_>, steps: &[StepBatch]) -> Result<State> {
        let first = steps.first().ok_or_else(|| Error::usage("encoder needs at least one step"))?;
        let b = first.x.shape().first().copied().unwrap_or(0);
        let d = self.cfg.dims;
        let mut h_b = g.input(Tensor::zeros(&[b, self.cfg.box_hidden]));
        let mut cells: Vec<(Var, Var)> = (0..self.cfg.lstm_layers)
            .map(|_| {
                let z = || g.input(Tensor::zeros(&[b, self.cfg.mask_hidden, d.height, d.width]));
                (z(), z())
            })
            .collect();
        for s in steps {
            self.check_batch(s, b)?;
            let (x, r, e) = (g.input(s.x.clone()), g.input(s.r.clone()), g.input(s.ego.clone()));
            h_b = self.cell(g, &self.enc, x, r, e, h_b, &mut cells)?;
        }
        let x = self.f_enc_b.forward(g, h_b)?;
        let r = self.f_enc_m.forward(g, cells.last().expect("at least one layer").0)?;
        Ok(State { h_b, cells, x, r })
    }

    /// Autoregressive decoding, one step per ego vector. Returns every
    /// intermediate `(x̂, r̂)` and the state after the last step.
    pub fn decode(&self, g: &Graph<'_>, state: &State, ego: &[Tensor]) -> Result<(Vec<(Var, Var)>, State)> {
        if ego.is_empty() {
            return Err(Error::usage("decoder needs at least one future step"));
        }
        let mut s = state.clone();
        let mut out = Vec::with_capacity(ego.len());
        for e in ego {
            let e = g.input(e.clone());
            s.h_b = self.cell(g, &self.dec, s.x, s.r, e, s.h_b, &mut s.cells)?;
            let delta = self.f_bbox.forward(g, s.h_b)?;
            s.x = g.add(s.x, delta)?;
            s.r = self.f_mask.forward(g, s.cells.last().expect("at least one layer").0)?;
            out.push((s.x, s.r));
        }
        Ok((out, s))
    }

    /// Encoder inputs for a batch of tracks, each with its own ego vectors.
    /// Absent steps contribute zeros in normalised space.
    pub fn encoder_inputs(&self, tracks: &[&Track], ego: &[&[EgoVector]]) -> Result<Vec<StepBatch>> {
        let steps = tracks.first().map_or(0, |t| t.steps.len());
        if tracks.len() != ego.len() || tracks.iter().any(|t| t.steps.len() != steps) || ego.iter().any(|e| e.len() != steps) {
            return Err(Error::usage("every track needs one ego vector per observed step"));
        }
        let st = self.stats();
        let d = self.cfg.dims;
        let b = tracks.len();
        (0..steps)
            .map(|t| {
                let mut x = Vec::with_capacity(b * BOX_DIM);
                let mut r = Vec::with_capacity(b * d.len());
                let mut e = Vec::with_capacity(b * EGO_DIM);
                for (tr, eg) in tracks.iter().zip(ego) {
                    match &tr.steps[t] {
                        Some(o) => {
                            if o.mask.len() != d.len() {
                                return Err(Error::usage(format!(
                                    "mask feature of length {} does not match {:?}",
                                    o.mask.len(),
                                    d
                                )));
                            }
                            x.extend(st.norm_box(&o.bbox));
                            r.extend(&o.mask);
                        }
                        None => {
                            x.extend([0.0; BOX_DIM]);
                            r.extend(std::iter::repeat_n(0.0, d.len()));
                        }
                    }
                    e.extend(st.norm_ego(&eg[t]));
                }
                Ok(StepBatch {
                    x: Tensor::new(&[b, BOX_DIM], x)?,
                    r: Tensor::new(&[b, d.channels, d.height, d.width], r)?,
                    ego: Tensor::new(&[b, EGO_DIM], e)?,
                })
            })
            .collect()
    }

    pub fn ego_batch(&self, ego: &[&EgoVector]) -> Result<Tensor> {
        let st = self.stats();
        let data = ego.iter().flat_map(|e| st.norm_ego(e)).collect();
        Ok(Tensor::new(&[ego.len(), EGO_DIM], data)?)
    }

    /// Forecasts every track of one sequence `future.len()` steps ahead.
    /// Returns per track the denormalised boxes and mask features for each
    /// future step.
    pub fn forecast(&self, tracks: &[Track], observed: &[EgoVector], future: &[EgoVector]) -> Result<Vec<Vec<(BoxFeature, Vec<f64>)>>> {
        if tracks.is_empty() {
            return Ok(Vec::new());
        }
        let refs: Vec<&Track> = tracks.iter().collect();
        let egos: Vec<&[EgoVector]> = vec![observed; tracks.len()];
        let inputs = self.encoder_inputs(&refs, &egos)?;
        let g = Graph::new(&self.store);
        let state = self.encode(&g, &inputs)?;
        let ego: Vec<Tensor> = future
            .iter()
            .map(|e| self.ego_batch(&vec![e; tracks.len()]))
            .collect::<Result<_>>()?;
        let (preds, _) = self.decode(&g, &state, &ego)?;
        let st = self.stats();
        let j = self.cfg.dims.len();
        let mut out = vec![Vec::with_capacity(future.len()); tracks.len()];
        for (x, r) in preds {
            let (xv, rv) = (g.value(x), g.value(r));
            for (i, o) in out.iter_mut().enumerate() {
                o.push((st.denorm_box(&xv.data()[i * BOX_DIM..(i + 1) * BOX_DIM]), rv.data()[i * j..(i + 1) * j].to_vec()));
            }
        }
        Ok(out)
    }
}

/// Supervision for one step of a batch: normalised boxes `B×10`, mask
/// features `B×J` and presence flags.
#[derive(Debug, Clone)]
pub struct StepTarget {
    pub x: Vec<f64>,
    pub r: Vec<f64>,
    pub present: Vec<bool>,
}

/// Batch mean over instances of
/// `(1/Z)·Σ_t p_t·(λ·SmoothL1(x̂_t, x_t) + MSE(r̂_t, r_t))`, where `Z` counts
/// the supervised steps. Instances with `Z = 0` are skipped; `None` when
/// no instance is supervised.
pub fn things_loss(g: &Graph<'_>, preds: &[(Var, Var)], targets: &[StepTarget], lambda: f64) -> Result<Option<Var>> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::usage(format!(
            "{} predictions for {} supervised steps",
            preds.len(),
            targets.len()
        )));
    }
    let b = targets[0].present.len();
    let z: Vec<usize> = (0..b).map(|i| targets.iter().filter(|t| t.present[i]).count()).collect();
    let included = z.iter().filter(|&&n| n > 0).count();
    if included == 0 {
        return Ok(None);
    }
    let mut total: Option<Var> = None;
    for ((x, r), t) in preds.iter().zip(targets) {
        let j = g.shape(*r).iter().skip(1).product::<usize>();
        if t.present.len() != b || t.x.len() != b * BOX_DIM || t.r.len() != b * j {
            return Err(Error::usage("target batch does not match predictions"));
        }
        let weight = |i: usize, per: usize| -> f64 {
            if t.present[i] {
                1.0 / (per as f64 * z[i] as f64 * included as f64)
            } else {
                0.0
            }
        };
        let wb: Vec<f64> = (0..b * BOX_DIM).map(|k| lambda * weight(k / BOX_DIM, BOX_DIM)).collect();
        let wm: Vec<f64> = (0..b * j).map(|k| weight(k / j, j)).collect();
        let rf = g.reshape(*r, &[b, j])?;
        let lb = g.weighted_sum(g.smooth_l1(*x, t.x.clone())?, wb)?;
        let lm = g.weighted_sum(g.squared_error(rf, t.r.clone())?, wm)?;
        let step = g.add(lb, lm)?;
        total = Some(match total {
            Some(acc) => g.add(acc, step)?,
            None => step,
        });
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ThingsConfig {
        ThingsConfig {
            box_hidden: 6,
            mask_hidden: 3,
            bfeat: 2,
            mfeat_channels: 2,
            mfeat: 3,
            head_hidden: 5,
            mask_out_hidden: 3,
            dims: FeatureDims {
                channels: 2,
                height: 3,
                width: 3,
            },
            ..ThingsConfig::default()
        }
    }

    fn zeroed(m: &mut ThingsModel) {
        let names: Vec<String> = m.store.names().filter(|n| !n.starts_with("meta.")).map(String::from).collect();
        for n in names {
            m.store.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
    }

    fn batch(m: &ThingsModel, b: usize, seed: f64) -> StepBatch {
        let d = m.cfg.dims;
        let gen = |n: usize, k: f64| (0..n).map(|i| ((i as f64 + k) * 0.37).sin()).collect::<Vec<_>>();
        StepBatch {
            x: Tensor::new(&[b, BOX_DIM], gen(b * BOX_DIM, seed)).unwrap(),
            r: Tensor::new(&[b, d.channels, d.height, d.width], gen(b * d.len(), seed + 1.0)).unwrap(),
            ego: Tensor::new(&[b, EGO_DIM], gen(b * EGO_DIM, seed + 2.0)).unwrap(),
        }
    }

    #[test]
    fn zero_parameters_hold_the_origin() {
        let mut m = ThingsModel::new(tiny(), 1).unwrap();
        zeroed(&mut m);
        let g = Graph::new(&m.store);
        let s = m.encode(&g, &[batch(&m, 2, 0.0), batch(&m, 2, 1.0)]).unwrap();
        assert!(g.value(s.x).data().iter().all(|&v| v == 0.0));
        assert!(g.value(s.r).data().iter().all(|&v| v == 0.0));
        let ego: Vec<Tensor> = (0..3).map(|k| batch(&m, 2, k as f64).ego).collect();
        let (preds, _) = m.decode(&g, &s, &ego).unwrap();
        for (x, r) in preds {
            assert!(g.value(x).data().iter().all(|&v| v == 0.0));
            assert!(g.value(r).data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn config_round_trips_through_meta() {
        let m = ThingsModel::new(tiny(), 3).unwrap();
        let back = ThingsModel::from_store(m.store.clone()).unwrap();
        assert_eq!(back.cfg, m.cfg);
        let mut broken = m.store.clone();
        broken.set_meta(META_CONFIG, vec![1.0]);
        assert!(ThingsModel::from_store(broken).is_err());
    }

    #[test]
    fn loss_closed_forms() {
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[1, BOX_DIM]));
        let r = g.input(Tensor::zeros(&[1, 4]));
        let exact = StepTarget {
            x: vec![0.0; BOX_DIM],
            r: vec![0.0; 4],
            present: vec![true],
        };
        let l = things_loss(&g, &[(x, r)], std::slice::from_ref(&exact), 0.1).unwrap().unwrap();
        assert_eq!(g.item(l), 0.0);
        let off = StepTarget {
            x: vec![0.5; BOX_DIM],
            ..exact.clone()
        };
        let l = things_loss(&g, &[(x, r)], &[off], 0.1).unwrap().unwrap();
        assert!((g.item(l) - 0.0125).abs() < 1e-15);
        let far = StepTarget {
            r: vec![2.0; 4],
            ..exact.clone()
        };
        let l = things_loss(&g, &[(x, r)], &[far], 0.1).unwrap().unwrap();
        assert!((g.item(l) - 4.0).abs() < 1e-15);
        let absent = StepTarget {
            present: vec![false],
            ..exact
        };
        assert!(things_loss(&g, &[(x, r)], &[absent], 0.1).unwrap().is_none());
    }
}
