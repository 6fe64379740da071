//! Frame schedule, ego-motion, and the full forecast of one sequence.

use serde::{Deserialize, Serialize};

use crate::assembly::{aggregate, InstanceForecast};
use crate::error::{Error, Result};
use crate::geometry::{camera_step, chain, compose_steps, Odometry, RigidTransform};
use crate::maps::{Grid, Mask};
use crate::odom::{OdomModel, OdomSample};
use crate::scene::{Prediction, SceneSequence};
use crate::stuff::{fuse_and_refine, project_background, RefineMode, RefineModel, SparseProjection, StuffSample};
use crate::things::{linear_baseline, paste_mask, EgoVector, MaskSample, ThingsModel, ThingsSample};
use crate::tracks::{derive_tracks, soft_occupancy, BoxFeature, Track, TrackOptions};

/// `inputs` observed frames spaced `stride` apart; the target lies
/// `future` frames after the last of them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Horizon {
    pub inputs: usize,
    pub future: usize,
    pub stride: usize,
}

impl Default for Horizon {
    fn default() -> Self {
        Horizon::short()
    }
}

impl Horizon {
    pub fn short() -> Self {
        Horizon {
            inputs: 3,
            future: 3,
            stride: 3,
        }
    }

    pub fn mid() -> Self {
        Horizon {
            inputs: 3,
            future: 9,
            stride: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs == 0 || self.future == 0 || self.stride == 0 {
            return Err(Error::config("horizon.inputs, horizon.future and horizon.stride must be positive"));
        }
        if !self.future.is_multiple_of(self.stride) {
            return Err(Error::config(format!(
                "horizon.future ({}) must be a multiple of horizon.stride ({})",
                self.future, self.stride
            )));
        }
        Ok(())
    }

    /// Decoder steps between the last input and the target.
    pub fn steps(&self) -> usize {
        self.future / self.stride
    }

    /// Smallest sequence length that fits the schedule, including one
    /// stride before the first input for its ego vector.
    pub fn min_frames(&self) -> usize {
        self.inputs * self.stride + self.future + 1
    }

    fn check(&self, len: usize, target: usize) -> Result<()> {
        self.validate()?;
        if target >= len || target + 1 < self.min_frames() {
            return Err(Error::config(format!(
                "target frame {target} of {len} does not fit {} inputs, stride {} and {} future frames",
                self.inputs, self.stride, self.future
            )));
        }
        Ok(())
    }

    /// Input frames followed by the decoder's frames, ending at `target`.
    pub fn schedule(&self, target: usize) -> Vec<usize> {
        let last = target - self.future;
        let first = last - (self.inputs - 1) * self.stride;
        (0..self.inputs + self.steps()).map(|k| first + k * self.stride).collect()
    }

    /// Targets usable for training in a sequence of `len` frames.
    pub fn targets(&self, len: usize) -> std::ops::Range<usize> {
        self.min_frames().saturating_sub(1)..len
    }
}

/// The reading at `from` and the planar motion from `from` to `to`.
pub fn ego_vector(readings: &[Odometry], from: usize, to: usize) -> EgoVector {
    let o = readings[from];
    let p = compose_steps(&readings[from..to]);
    [o.v, o.yaw_rate, p.x, p.y, p.theta]
}

/// One ego vector per scheduled frame, each covering the stride before it.
pub fn ego_schedule(readings: &[Odometry], schedule: &[usize], stride: usize) -> Vec<EgoVector> {
    schedule.iter().map(|&f| ego_vector(readings, f - stride, f)).collect()
}

/// Camera transform from frame `from` to a later frame `to` by chaining
/// per-reading steps.
pub fn camera_transform(seq: &SceneSequence, readings: &[Odometry], from: usize, to: usize) -> Result<RigidTransform> {
    if from == to {
        return Ok(RigidTransform::identity());
    }
    let steps: Vec<RigidTransform> = readings[from..to].iter().map(|o| camera_step(o, &seq.extrinsics)).collect();
    chain(&steps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdometryMode {
    /// The recorded future readings are known.
    Active,
    /// Future readings come from the odometry model.
    Passive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    CopyLast,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastOptions {
    pub horizon: Horizon,
    pub odometry: OdometryMode,
    pub refine: RefineMode,
    pub baseline: Option<Baseline>,
    pub tracks: TrackOptions,
    /// Drop tracks that are not observed in the last input frame.
    pub filter_last_frame_presence: bool,
}

impl Default for ForecastOptions {
    fn default() -> Self {
        ForecastOptions {
            horizon: Horizon::short(),
            odometry: OdometryMode::Passive,
            refine: RefineMode::Learned,
            baseline: None,
            tracks: TrackOptions::default(),
            filter_last_frame_presence: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Models<'a> {
    pub things: Option<&'a ThingsModel>,
    pub stuff: Option<&'a RefineModel>,
    pub odom: Option<&'a OdomModel>,
}

impl Models<'_> {
    /// Names of the components `opts` needs but that are not loaded.
    pub fn missing(&self, opts: &ForecastOptions) -> Vec<&'static str> {
        let mut out = Vec::new();
        if opts.baseline == Some(Baseline::CopyLast) {
            return out;
        }
        if self.things.is_none() {
            out.push("things");
        }
        if opts.refine == RefineMode::Learned && self.stuff.is_none() {
            out.push("stuff");
        }
        if opts.odometry == OdometryMode::Passive && self.odom.is_none() {
            out.push("odom");
        }
        out
    }
}

/// Readings for frames `0..=target`: recorded up to the last input frame,
/// then recorded or forecast depending on `mode`.
pub fn readings(seq: &SceneSequence, last_input: usize, target: usize, mode: OdometryMode, odom: Option<&OdomModel>) -> Result<Vec<Odometry>> {
    let recorded = seq.odometry();
    match mode {
        OdometryMode::Active => Ok(recorded[..=target].to_vec()),
        OdometryMode::Passive => {
            let model = odom.ok_or_else(|| Error::usage("passive odometry needs odom weights"))?;
            let start = (last_input + 1).saturating_sub(model.cfg.history);
            let observed = &recorded[start..=last_input];
            let mut out = recorded[..=last_input].to_vec();
            out.extend(model.forecast(observed, target - last_input, recorded[last_input].dt)?);
            Ok(out)
        }
    }
}

/// Stuff pixels of frame `f`.
pub fn background_mask(seq: &SceneSequence, f: usize) -> Mask {
    let ns = seq.classes.num_stuff() as u16;
    let sem = &seq.frames[f].semantic;
    Grid::from_vec(sem.height(), sem.width(), sem.data().iter().map(|&c| c < ns).collect()).expect("same size")
}

/// Stuff projections of every input frame, each moved by `transform(frame)`.
pub fn project_inputs(seq: &SceneSequence, inputs: &[usize], transform: impl Fn(usize) -> Result<RigidTransform>) -> Result<Vec<SparseProjection>> {
    inputs
        .iter()
        .map(|&f| {
            let fr = &seq.frames[f];
            project_background(&fr.semantic, &fr.depth, &seq.intrinsics, &transform(f)?, &background_mask(seq, f))
        })
        .collect()
}

/// Tracks observed in `frames` with at least one present step; with
/// `last_only`, tracks must be present in the last frame.
fn observed_tracks(seq: &SceneSequence, frames: &[usize], opts: &TrackOptions, last_only: bool) -> Result<Vec<Track>> {
    let n = frames.len();
    Ok(derive_tracks(seq, frames, opts)?
        .into_iter()
        .filter(|t| t.last_present().is_some() && (!last_only || t.present(n - 1)))
        .collect())
}

fn instance_of(model: &ThingsModel, seq: &SceneSequence, track: &Track, bbox: &BoxFeature, feature: &[f64]) -> Result<(InstanceForecast, f64)> {
    let (h, w) = seq.dims();
    let k = seq
        .classes
        .thing_index(track.class)
        .ok_or_else(|| Error::Label(format!("track class {} is not a thing class", track.class)))?;
    let prob = model.mask_out.probabilities(&model.store, feature, k)?;
    let mask = paste_mask(&prob, model.mask_out.height, model.mask_out.width, bbox, h, w);
    let depth = if bbox[4].is_finite() { bbox[4].max(1e-3) } else { 1e-3 };
    Ok((
        InstanceForecast {
            mask,
            class: track.class,
            depth,
        },
        crate::things::mask_confidence(&prob),
    ))
}

/// Forecast of the panoptic map at the last frame of `seq`.
pub fn forecast_sequence(seq: &SceneSequence, models: &Models<'_>, opts: &ForecastOptions) -> Result<Prediction> {
    let target = seq.len().checked_sub(1).ok_or_else(|| Error::Input("empty sequence".into()))?;
    forecast_at(seq, target, models, opts)
}

pub fn forecast_at(seq: &SceneSequence, target: usize, models: &Models<'_>, opts: &ForecastOptions) -> Result<Prediction> {
    let hz = opts.horizon;
    hz.check(seq.len(), target)?;
    let missing = models.missing(opts);
    if !missing.is_empty() {
        return Err(Error::usage(format!("missing weights for: {}", missing.join(", "))));
    }
    let schedule = hz.schedule(target);
    let inputs = &schedule[..hz.inputs];
    let last = inputs[hz.inputs - 1];
    if opts.baseline == Some(Baseline::CopyLast) {
        let panoptic = seq.frames[last].panoptic();
        let confidence = seq.frames[last].instances.iter().map(|i| (i.id, 1.0)).collect();
        return Ok(Prediction { panoptic, confidence });
    }
    let readings = readings(seq, last, target, opts.odometry, models.odom)?;

    let projections = project_inputs(seq, inputs, |f| camera_transform(seq, &readings, f, target))?;
    let bg = fuse_and_refine(&projections, opts.refine, models.stuff)?;

    let things = models.things.expect("checked above");
    let tracks = observed_tracks(seq, inputs, &opts.tracks, opts.filter_last_frame_presence)?;
    let finals: Vec<(BoxFeature, Vec<f64>)> = match opts.baseline {
        Some(Baseline::Linear) => tracks
            .iter()
            .map(|t| linear_baseline(t, hz.steps()).map(|mut v| v.pop().expect("at least one step")))
            .collect::<Result<_>>()?,
        _ => {
            let ego = ego_schedule(&readings, &schedule, hz.stride);
            things
                .forecast(&tracks, &ego[..hz.inputs], &ego[hz.inputs..])?
                .into_iter()
                .map(|mut v| v.pop().expect("at least one step"))
                .collect()
        }
    };
    let mut instances = Vec::with_capacity(tracks.len());
    let mut confidence = Vec::with_capacity(tracks.len());
    for (i, (t, (b, r))) in tracks.iter().zip(&finals).enumerate() {
        let (inst, conf) = instance_of(things, seq, t, b, r)?;
        instances.push(inst);
        confidence.push(((i + 1) as u16, conf));
    }
    let panoptic = aggregate(&bg, &instances)?;
    Ok(Prediction { panoptic, confidence })
}

/// Things training instances for every usable target of `seq`. Inputs are
/// derived with `opts` (dropout and noise); supervision is clean.
pub fn things_samples(seq: &SceneSequence, hz: &Horizon, opts: &TrackOptions) -> Result<Vec<ThingsSample>> {
    let recorded = seq.odometry();
    let mut out = Vec::new();
    for target in hz.targets(seq.len()) {
        hz.check(seq.len(), target)?;
        let schedule = hz.schedule(target);
        let inputs = &schedule[..hz.inputs];
        let supervised = &schedule[hz.inputs - 1..];
        let opts = TrackOptions {
            seed: opts.seed ^ (target as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..*opts
        };
        let clean = TrackOptions {
            dropout: 0.0,
            noise: 0.0,
            ..opts
        };
        let ego = ego_schedule(&recorded, &schedule, hz.stride);
        let targets = derive_tracks(seq, supervised, &clean)?;
        for input in observed_tracks(seq, inputs, &opts, false)? {
            let target = targets
                .iter()
                .find(|t| t.instance_id == input.instance_id)
                .cloned()
                .unwrap_or_else(|| Track {
                    instance_id: input.instance_id,
                    class: input.class,
                    steps: vec![None; supervised.len()],
                });
            out.push(ThingsSample {
                input,
                target,
                ego: ego.clone(),
            });
        }
    }
    Ok(out)
}

/// Mask head pairs: a noisy feature of every visible instance and its
/// occupancy on the head's output grid.
pub fn mask_samples(seq: &SceneSequence, model: &ThingsModel, opts: &TrackOptions) -> Result<Vec<MaskSample>> {
    let frames: Vec<usize> = (0..seq.len()).collect();
    let tracks = derive_tracks(seq, &frames, &TrackOptions { dropout: 0.0, ..*opts })?;
    let mut out = Vec::new();
    for t in &tracks {
        let thing = seq
            .classes
            .thing_index(t.class)
            .ok_or_else(|| Error::Label(format!("track class {} is not a thing class", t.class)))?;
        for (f, obs) in t.steps.iter().enumerate() {
            let (Some(obs), Some(inst)) = (obs, seq.frames[f].instance(t.instance_id)) else {
                continue;
            };
            out.push(MaskSample {
                feature: obs.mask.clone(),
                thing,
                target: soft_occupancy(&inst.mask, model.mask_out.height, model.mask_out.width),
            });
        }
    }
    Ok(out)
}

/// Refinement examples from recorded inter-frame transforms.
pub fn stuff_samples(seq: &SceneSequence, hz: &Horizon) -> Result<Vec<StuffSample>> {
    hz.targets(seq.len())
        .map(|target| {
            hz.check(seq.len(), target)?;
            let schedule = hz.schedule(target);
            let projections = project_inputs(seq, &schedule[..hz.inputs], |f| Ok(seq.transform(f, target)))?;
            Ok(StuffSample {
                projections,
                target: seq.frames[target].semantic.clone(),
                foreground: seq.frames[target].foreground(),
            })
        })
        .collect()
}

/// Odometry windows of `history` readings followed by `future`.
pub fn odom_samples(seq: &SceneSequence, history: usize, future: usize) -> Vec<OdomSample> {
    crate::odom::odom_windows(&seq.odometry(), history, future)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate, SceneSpec};

    #[test]
    fn preset_schedules() {
        assert_eq!(Horizon::short().schedule(19), vec![10, 13, 16, 19]);
        assert_eq!(Horizon::mid().schedule(19), vec![4, 7, 10, 13, 16, 19]);
        assert_eq!(Horizon::mid().min_frames(), 19);
        assert!(Horizon { future: 4, ..Horizon::short() }.validate().is_err());
    }

    #[test]
    fn chained_readings_match_recorded_transforms() {
        let seq = generate(&SceneSpec { height: 16, width: 24, focal: 14.0, ..SceneSpec::default() }).unwrap();
        let r = seq.odometry();
        let a = camera_transform(&seq, &r, 10, 19).unwrap();
        let b = seq.transform(10, 19);
        assert!((a.matrix() - b.matrix()).amax() < 1e-9);
    }

    #[test]
    fn copy_last_needs_no_weights() {
        let seq = generate(&SceneSpec { height: 16, width: 24, focal: 14.0, ..SceneSpec::default() }).unwrap();
        let opts = ForecastOptions { baseline: Some(Baseline::CopyLast), ..ForecastOptions::default() };
        let p = forecast_sequence(&seq, &Models::default(), &opts).unwrap();
        assert_eq!(p.panoptic, seq.frames[16].panoptic());
        let err = forecast_sequence(&seq, &Models::default(), &ForecastOptions::default()).unwrap_err();
        assert!(err.to_string().contains("things, stuff, odom"));
    }
}
