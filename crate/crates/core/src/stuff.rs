//! Background forecasting: reproject stuff pixels into the target view, then
//! complete the sparse map.

use std::collections::VecDeque;

use panfore_autodiff::{Conv2d, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, RigidTransform};
use crate::maps::{DepthMap, Grid, Mask, SemanticMap, UNKNOWN};
use crate::training::{self, TrainConfig, TrainLog};

/// Per target pixel: the winning stuff label and its depth in the target view.
pub type SparseProjection = Grid<Option<(u16, f64)>>;

/// Back-projects every pixel flagged in `bg`, moves it by `h`, and splats it
/// into the target view keeping the nearest point per pixel.
pub fn project_background(
    m: &SemanticMap,
    d: &DepthMap,
    k: &Intrinsics,
    h: &RigidTransform,
    bg: &Mask,
) -> Result<SparseProjection> {
    if !m.same_dims(d) || !m.same_dims(bg) {
        return Err(Error::Input("semantics, depth and background mask differ in size".into()));
    }
    let (rows, cols) = m.dims();
    let bad = bg
        .indices()
        .filter(|&i| {
            let z = d.data()[i];
            !(z > 0.0 && z.is_finite())
        })
        .count();
    if bad > 0 {
        return Err(Error::Input(format!("{bad} background pixels have invalid depth")));
    }
    let mut out: SparseProjection = Grid::filled(rows, cols, None);
    for i in bg.indices() {
        let label = m.data()[i];
        if label == UNKNOWN {
            continue;
        }
        let (r, c) = (i / cols, i % cols);
        let p = h.apply(k.backproject(c as f64, r as f64, d.data()[i] as f64));
        if p[2] <= 0.0 {
            continue;
        }
        let (u, v) = k.project(p);
        let (u, v) = (u.round(), v.round());
        if !(u >= 0.0 && v >= 0.0 && u < cols as f64 && v < rows as f64) {
            continue;
        }
        let j = v as usize * cols + u as usize;
        let slot = &mut out.data_mut()[j];
        if slot.is_none_or(|(_, z)| p[2] < z) {
            *slot = Some((label, p[2]));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    Learned,
    NearestFill,
}

/// Newest labelled projection per pixel, then breadth-first label spreading
/// (ties to the smaller class id).
pub fn nearest_fill(projections: &[SparseProjection]) -> Result<SemanticMap> {
    let (rows, cols) = check_projections(projections)?;
    let mut label = vec![UNKNOWN; rows * cols];
    for p in projections {
        for (l, v) in label.iter_mut().zip(p.data()) {
            if let Some((c, _)) = v {
                *l = *c;
            }
        }
    }
    let mut frontier: VecDeque<usize> = (0..label.len()).filter(|&i| label[i] != UNKNOWN).collect();
    while !frontier.is_empty() {
        // next ring: every unlabelled neighbour takes the smallest label around it
        let mut next: Vec<(usize, u16)> = Vec::new();
        for &i in &frontier {
            let (r, c) = (i / cols, i % cols);
            let neighbours = [
                (r > 0).then(|| i - cols),
                (r + 1 < rows).then(|| i + cols),
                (c > 0).then(|| i - 1),
                (c + 1 < cols).then(|| i + 1),
            ];
            for j in neighbours.into_iter().flatten() {
                if label[j] == UNKNOWN {
                    next.push((j, label[i]));
                }
            }
        }
        next.sort_unstable();
        next.dedup_by_key(|e| e.0);
        for &(j, l) in &next {
            label[j] = l;
        }
        frontier = next.into_iter().map(|e| e.0).collect();
    }
    Grid::from_vec(rows, cols, label)
}

fn check_projections(projections: &[SparseProjection]) -> Result<(usize, usize)> {
    let first = projections
        .first()
        .ok_or_else(|| Error::Degenerate("no projections supplied".into()))?;
    if projections.iter().any(|p| !p.same_dims(first)) {
        return Err(Error::Input("projections differ in size".into()));
    }
    if projections.iter().all(|p| p.data().iter().all(Option::is_none)) {
        return Err(Error::Degenerate("no projection has a labelled pixel".into()));
    }
    Ok(first.dims())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub frames: usize,
    pub classes: usize,
    pub hidden: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            frames: 3,
            classes: 5,
            hidden: 16,
        }
    }
}

impl RefineConfig {
    pub fn in_channels(&self) -> usize {
        self.frames * (self.classes + 1)
    }
}

const META_CONFIG: &str = "refine.config";
const META_DEPTH: &str = "refine.depth";

/// Three 3×3 conv + ReLU layers followed by a 1×1 conv to stuff logits.
#[derive(Debug, Clone)]
pub struct RefineModel {
    pub cfg: RefineConfig,
    pub store: ParamStore,
    layers: Vec<Conv2d>,
}

impl RefineModel {
    fn layers(cfg: &RefineConfig) -> Result<Vec<Conv2d>> {
        let h = cfg.hidden;
        Ok(vec![
            Conv2d::new("refine.c0", cfg.in_channels(), h, 3)?,
            Conv2d::new("refine.c1", h, h, 3)?,
            Conv2d::new("refine.c2", h, h, 3)?,
            Conv2d::new("refine.out", h, cfg.classes, 1)?,
        ])
    }

    pub fn new(cfg: RefineConfig, seed: u64) -> Result<Self> {
        if cfg.frames == 0 || cfg.classes < 2 || cfg.hidden == 0 {
            return Err(Error::config("refine model needs frames >= 1, classes >= 2, hidden >= 1"));
        }
        let layers = Self::layers(&cfg)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &layers {
            l.init(&mut store, &mut rng)?;
        }
        store.set_meta(META_CONFIG, vec![cfg.frames as f64, cfg.classes as f64, cfg.hidden as f64]);
        store.set_meta(META_DEPTH, vec![0.0, 1.0]);
        Ok(RefineModel { cfg, store, layers })
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let c = store
            .meta(META_CONFIG)
            .filter(|c| c.len() == 3)
            .ok_or_else(|| Error::config("weights lack refine configuration"))?;
        let cfg = RefineConfig {
            frames: c[0] as usize,
            classes: c[1] as usize,
            hidden: c[2] as usize,
        };
        let layers = Self::layers(&cfg)?;
        for l in &layers {
            for suffix in ["w", "b"] {
                if !store.contains(&format!("{}.{suffix}", l.name)) {
                    return Err(Error::config(format!("weights lack {}.{suffix}", l.name)));
                }
            }
        }
        Ok(RefineModel { cfg, store, layers })
    }

    pub fn depth_norm(&self) -> (f64, f64) {
        let d = self.store.meta(META_DEPTH).unwrap_or(&[0.0, 1.0]);
        (d[0], d[1])
    }

    pub fn set_depth_norm(&mut self, mean: f64, std: f64) {
        self.store.set_meta(META_DEPTH, vec![mean, std.max(1e-6)]);
    }

    /// `frames·(classes+1) × H × W` input: one-hot labels then standardised
    /// depth per frame, oldest first; unlabelled pixels are all zeros.
    pub fn encode_input(&self, projections: &[SparseProjection]) -> Result<Tensor> {
        if projections.len() != self.cfg.frames {
            return Err(Error::config(format!(
                "refine model expects {} projections, got {}",
                self.cfg.frames,
                projections.len()
            )));
        }
        let (rows, cols) = check_projections_shape(projections)?;
        let plane = rows * cols;
        let c = self.cfg.classes;
        let (mean, std) = self.depth_norm();
        let mut data = vec![0.0; self.cfg.in_channels() * plane];
        for (f, p) in projections.iter().enumerate() {
            let base = f * (c + 1) * plane;
            for (i, v) in p.data().iter().enumerate() {
                if let Some((label, z)) = v {
                    let l = *label as usize;
                    if l >= c {
                        return Err(Error::Label(format!("projected label {l} is not a stuff class")));
                    }
                    data[base + l * plane + i] = 1.0;
                    data[base + c * plane + i] = (z - mean) / std;
                }
            }
        }
        Ok(Tensor::new(&[self.cfg.in_channels(), rows, cols], data)?)
    }

    /// Logits `B × classes × H × W` for a `B × C_in × H × W` input.
    pub fn forward(&self, g: &Graph<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    pub fn predict(&self, projections: &[SparseProjection]) -> Result<SemanticMap> {
        check_projections(projections)?;
        let x = self.encode_input(projections)?;
        let (rows, cols) = (x.shape()[1], x.shape()[2]);
        let g = Graph::new(&self.store);
        let x = g.input(x.reshape(&[1, self.cfg.in_channels(), rows, cols])?);
        let logits = g.value(self.forward(&g, x)?);
        Ok(argmax_map(logits.data(), self.cfg.classes, rows, cols))
    }
}

fn check_projections_shape(projections: &[SparseProjection]) -> Result<(usize, usize)> {
    let first = projections
        .first()
        .ok_or_else(|| Error::Degenerate("no projections supplied".into()))?;
    if projections.iter().any(|p| !p.same_dims(first)) {
        return Err(Error::Input("projections differ in size".into()));
    }
    Ok(first.dims())
}

/// Per-pixel argmax over `classes` planes; ties go to the smaller id.
pub fn argmax_map(logits: &[f64], classes: usize, rows: usize, cols: usize) -> SemanticMap {
    let plane = rows * cols;
    let labels = (0..plane)
        .map(|i| {
            let mut best = 0;
            for k in 1..classes {
                if logits[k * plane + i] > logits[best * plane + i] {
                    best = k;
                }
            }
            best as u16
        })
        .collect();
    Grid::from_vec(rows, cols, labels).expect("sized")
}

pub fn fuse_and_refine(projections: &[SparseProjection], mode: RefineMode, model: Option<&RefineModel>) -> Result<SemanticMap> {
    match (mode, model) {
        (RefineMode::NearestFill, _) => nearest_fill(projections),
        (RefineMode::Learned, Some(m)) => m.predict(projections),
        (RefineMode::Learned, None) => Err(Error::usage("learned refinement needs stuff weights")),
    }
}

/// Mean cross-entropy over pixels outside `fg`; zero when every pixel is
/// foreground. `logits` is `1 × C × H × W`.
pub fn stuff_loss(g: &Graph<'_>, logits: Var, target: &SemanticMap, fg: &Mask) -> Result<Var> {
    let shape = g.shape(logits);
    if shape.len() != 4 || shape[0] != 1 || (shape[2], shape[3]) != target.dims() || !target.same_dims(fg) {
        return Err(Error::Input(format!(
            "logits {shape:?} do not match target {:?}",
            target.dims()
        )));
    }
    let classes = shape[1];
    let counted = fg.data().iter().filter(|&&f| !f).count();
    let mut labels = Vec::with_capacity(target.len());
    let mut weights = Vec::with_capacity(target.len());
    for (&c, &f) in target.data().iter().zip(fg.data()) {
        if !f && c as usize >= classes {
            return Err(Error::Label(format!("target class {c} at a counted pixel exceeds {classes} stuff classes")));
        }
        labels.push(if f { 0 } else { c as usize });
        weights.push(if f { 0.0 } else { 1.0 / counted as f64 });
    }
    Ok(g.cross_entropy(logits, labels, weights)?)
}

/// One refinement training example.
#[derive(Debug, Clone)]
pub struct StuffSample {
    pub projections: Vec<SparseProjection>,
    pub target: SemanticMap,
    pub foreground: Mask,
}

/// Depth mean and standard deviation over every projected pixel.
pub fn depth_stats(samples: &[StuffSample]) -> (f64, f64) {
    let zs: Vec<f64> = samples
        .iter()
        .flat_map(|s| s.projections.iter())
        .flat_map(|p| p.data().iter().filter_map(|v| v.map(|(_, z)| z)))
        .collect();
    if zs.is_empty() {
        return (0.0, 1.0);
    }
    let mean = zs.iter().sum::<f64>() / zs.len() as f64;
    let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / zs.len() as f64;
    (mean, var.sqrt().max(1e-6))
}

/// Adam on `stuff_loss`, averaged over shuffled mini-batches.
pub fn train_refiner(model: &mut RefineModel, samples: &[StuffSample], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate("stuff")?;
    if samples.is_empty() {
        return Err(Error::usage("stuff training set is empty"));
    }
    let (mean, std) = depth_stats(samples);
    model.set_depth_norm(mean, std);
    let inputs: Vec<Tensor> = samples
        .iter()
        .map(|s| model.encode_input(&s.projections))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut cursor = order.len();
    let mut log = TrainLog::default();
    for _ in 0..cfg.steps {
        let mut total = 0.0;
        let batch = cfg.batch.min(samples.len());
        for _ in 0..batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            let g = Graph::new(&model.store);
            let shape = inputs[i].shape();
            let x = g.input(inputs[i].clone().reshape(&[1, shape[0], shape[1], shape[2]])?);
            let logits = model.forward(&g, x)?;
            let loss = stuff_loss(&g, logits, &samples[i].target, &samples[i].foreground)?;
            let loss = g.affine(loss, 1.0 / batch as f64, 0.0);
            total += g.item(loss);
            let grads = g.backward(loss)?;
            grads.apply_to(&mut model.store)?;
        }
        log.losses.push(total);
        training::step(&mut model.store, cfg)?;
    }
    Ok(log)
}
