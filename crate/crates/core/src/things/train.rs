use panfore_autodiff::{Graph, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::maps::PanopticMap;
use crate::scene::Frame;
use crate::tracks::{BoxFeature, Track, BOX_DIM};
use crate::training::{self, TrainConfig, TrainLog};

use super::{things_loss, EgoVector, MaskSample, NormStats, StepTarget, ThingsModel};

/// One training instance: noisy observations over the input steps, clean
/// supervision from the last input step through the horizon, and one ego
/// vector per step.
#[derive(Debug, Clone)]
pub struct ThingsSample {
    pub input: Track,
    pub target: Track,
    pub ego: Vec<EgoVector>,
}

impl ThingsSample {
    fn horizon(&self) -> usize {
        self.target.steps.len().saturating_sub(1)
    }
}

fn check_samples(samples: &[ThingsSample]) -> Result<(usize, usize)> {
    let first = samples.first().ok_or_else(|| Error::usage("things training set is empty"))?;
    let (t, f) = (first.input.steps.len(), first.horizon());
    if t == 0 || f == 0 {
        return Err(Error::usage("things samples need at least one input and one future step"));
    }
    for s in samples {
        if s.input.steps.len() != t || s.horizon() != f || s.ego.len() != t + f {
            return Err(Error::usage("things samples disagree on horizon or ego length"));
        }
    }
    Ok((t, f))
}

fn step_targets(model: &ThingsModel, batch: &[&ThingsSample]) -> Vec<StepTarget> {
    let st = model.stats();
    let j = model.cfg.dims.len();
    let steps = batch[0].target.steps.len();
    (0..steps)
        .map(|s| {
            let mut t = StepTarget {
                x: Vec::with_capacity(batch.len() * BOX_DIM),
                r: Vec::with_capacity(batch.len() * j),
                present: Vec::with_capacity(batch.len()),
            };
            for b in batch {
                match &b.target.steps[s] {
                    Some(o) if o.mask.len() == j => {
                        t.x.extend(st.norm_box(&o.bbox));
                        t.r.extend(&o.mask);
                        t.present.push(true);
                    }
                    _ => {
                        t.x.extend([0.0; BOX_DIM]);
                        t.r.extend(std::iter::repeat_n(0.0, j));
                        t.present.push(false);
                    }
                }
            }
            t
        })
        .collect()
}

/// Batch loss over `batch`, or `None` when nothing in it is supervised.
pub fn batch_loss(g: &Graph<'_>, model: &ThingsModel, batch: &[&ThingsSample]) -> Result<Option<panfore_autodiff::Var>> {
    let t = batch[0].input.steps.len();
    let tracks: Vec<&Track> = batch.iter().map(|s| &s.input).collect();
    let ego_in: Vec<&[EgoVector]> = batch.iter().map(|s| &s.ego[..t]).collect();
    let inputs = model.encoder_inputs(&tracks, &ego_in)?;
    let state = model.encode(g, &inputs)?;
    let ego_out: Vec<Tensor> = (t..batch[0].ego.len())
        .map(|k| model.ego_batch(&batch.iter().map(|s| &s.ego[k]).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    let (mut preds, _) = model.decode(g, &state, &ego_out)?;
    preds.insert(0, (state.x, state.r));
    things_loss(g, &preds, &step_targets(model, batch), model.cfg.lambda)
}

fn batches<'a, T>(items: &'a [T], cfg: &TrainConfig) -> impl Iterator<Item = Vec<&'a T>> + 'a {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut cursor = order.len();
    let batch = cfg.batch.min(items.len()).max(1);
    (0..cfg.steps).map(move |_| {
        (0..batch)
            .map(|_| {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                cursor += 1;
                &items[order[cursor - 1]]
            })
            .collect()
    })
}

/// Fits normalisation statistics on `samples`, then runs Adam on the
/// things loss. Mask head parameters are left untouched.
pub fn train_things(model: &mut ThingsModel, samples: &[ThingsSample], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate("things")?;
    check_samples(samples)?;
    let stats = NormStats::fit(
        samples
            .iter()
            .flat_map(|s| s.input.steps.iter().chain(&s.target.steps))
            .flatten()
            .map(|o| &o.bbox),
        samples.iter().flat_map(|s| s.ego.iter()),
    );
    model.set_stats(&stats);
    let mut log = TrainLog::default();
    for batch in batches(samples, cfg) {
        let loss = {
            let g = Graph::new(&model.store);
            match batch_loss(&g, model, &batch)? {
                Some(loss) => Some((g.item(loss), g.backward(loss)?)),
                None => None,
            }
        };
        match loss {
            Some((value, grads)) => {
                grads.apply_to(&mut model.store)?;
                training::step(&mut model.store, cfg)?;
                log.losses.push(value);
            }
            None => log.losses.push(0.0),
        }
    }
    Ok(log)
}

/// Mean binary cross-entropy of the mask head on `samples`, optimised on
/// the mask head parameters only.
pub fn train_mask_out(model: &mut ThingsModel, samples: &[MaskSample], cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate("mask_out")?;
    if samples.is_empty() {
        return Err(Error::usage("mask head training set is empty"));
    }
    let head = model.mask_out.clone();
    let (h, w) = (head.height / 2, head.width / 2);
    let plane = head.height * head.width;
    for s in samples {
        if s.feature.len() != head.channels * h * w || s.target.len() != plane || s.thing >= model.cfg.num_things {
            return Err(Error::usage("mask head sample does not match the model dimensions"));
        }
    }
    let mut sub = ParamStore::new();
    let names: Vec<String> = model.store.names().filter(|n| n.starts_with("mask_out.")).map(String::from).collect();
    for n in &names {
        sub.insert(n.clone(), model.store.get(n).expect("listed").clone())?;
    }
    let mut log = TrainLog::default();
    for batch in batches(samples, cfg) {
        let (value, grads) = {
            let g = Graph::new(&sub);
            let b = batch.len();
            let feats = batch.iter().flat_map(|s| s.feature.iter().copied()).collect();
            let r = g.input(Tensor::new(&[b, head.channels, h, w], feats)?);
            let logits = head.forward(&g, r)?;
            let idx: Vec<usize> = batch.iter().map(|s| s.thing).collect();
            let sel = g.select_channel(logits, &idx)?;
            let target = batch.iter().flat_map(|s| s.target.iter().copied()).collect();
            let loss = g.bce_with_logits(sel, target, vec![1.0 / (b * plane) as f64; b * plane])?;
            (g.item(loss), g.backward(loss)?)
        };
        grads.apply_to(&mut sub)?;
        training::step(&mut sub, cfg)?;
        log.losses.push(value);
    }
    for n in &names {
        let data = sub.get(n).expect("copied").data().to_vec();
        model.store.get_mut(n).expect("listed").data_mut().copy_from_slice(&data);
    }
    Ok(log)
}

/// Extrapolates the last observed box with its per-step velocity and keeps
/// the last mask feature. Velocity is the last delta divided by the gap to
/// the previous observation.
pub fn linear_baseline(track: &Track, horizon: usize) -> Result<Vec<(BoxFeature, Vec<f64>)>> {
    let (last, obs) = track
        .last_present()
        .ok_or_else(|| Error::Degenerate(format!("track {} has no observation", track.instance_id)))?;
    let gap = track.steps[..last].iter().rposition(Option::is_some).map_or(1, |p| last - p) as f64;
    let ahead = track.steps.len() - 1 - last;
    Ok((1..=horizon)
        .map(|k| {
            let n = (ahead + k) as f64;
            let mut b = obs.bbox;
            for i in 0..5 {
                b[i] += n * obs.bbox[5 + i] / gap;
                b[5 + i] = obs.bbox[5 + i] / gap;
            }
            (b, obs.mask.clone())
        })
        .collect())
}

/// The last observed frame's panoptic map, unchanged.
pub fn copy_last_baseline(frame: &Frame) -> PanopticMap {
    frame.panoptic()
}
