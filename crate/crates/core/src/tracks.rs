//! Per-instance observation tracks derived from rendered episodes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{DepthMap, Mask};
use crate::scene::SceneSequence;

/// `[cx, cy, w, h, d, Δcx, Δcy, Δw, Δh, Δd]`
pub const BOX_DIM: usize = 10;
pub type BoxFeature = [f64; BOX_DIM];

/// Channel and spatial size of the per-instance appearance grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for FeatureDims {
    fn default() -> Self {
        FeatureDims {
            channels: 8,
            height: 7,
            width: 7,
        }
    }
}

impl FeatureDims {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub bbox: BoxFeature,
    /// `channels × height × width`, row-major.
    pub mask: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub instance_id: u16,
    pub class: u16,
    /// One entry per step; `None` where the instance was not observed.
    pub steps: Vec<Option<Observation>>,
}

impl Track {
    pub fn present(&self, t: usize) -> bool {
        self.steps.get(t).is_some_and(Option::is_some)
    }

    pub fn last_present(&self) -> Option<(usize, &Observation)> {
        self.steps.iter().enumerate().rev().find_map(|(t, o)| o.as_ref().map(|o| (t, o)))
    }

    /// Copy restricted to steps `range`.
    pub fn window(&self, range: std::ops::Range<usize>) -> Track {
        Track {
            instance_id: self.instance_id,
            class: self.class,
            steps: self.steps[range].to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackOptions {
    /// Probability that a visible instance goes undetected at a step.
    pub dropout: f64,
    /// Standard deviation of the noise added to every appearance cell.
    pub noise: f64,
    pub seed: u64,
    pub dims: FeatureDims,
}

impl Default for TrackOptions {
    fn default() -> Self {
        TrackOptions {
            dropout: 0.0,
            noise: 0.0,
            seed: 0,
            dims: FeatureDims::default(),
        }
    }
}

/// Median with the mean of the two central values for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Pixel box `[cx, cy, w, h]` of a mask; pixel (r, c) covers `[c, c+1) × [r, r+1)`.
pub fn mask_box(mask: &Mask) -> Option<[f64; 4]> {
    let (t, l, b, r) = mask.bbox()?;
    Some([
        (l + r) as f64 / 2.0,
        (t + b) as f64 / 2.0,
        (r - l) as f64,
        (b - t) as f64,
    ])
}

const SUBSAMPLES: usize = 4;

/// Fraction of each cell of an `gh × gw` grid over `mask`'s bounding box
/// that the mask covers, estimated on a regular sub-grid.
pub fn soft_occupancy(mask: &Mask, gh: usize, gw: usize) -> Vec<f64> {
    let Some((t, l, b, r)) = mask.bbox() else {
        return vec![0.0; gh * gw];
    };
    let (bh, bw) = ((b - t) as f64, (r - l) as f64);
    let mut out = vec![0.0; gh * gw];
    let total = (SUBSAMPLES * SUBSAMPLES) as f64;
    for i in 0..gh {
        for j in 0..gw {
            let mut hits = 0usize;
            for si in 0..SUBSAMPLES {
                for sj in 0..SUBSAMPLES {
                    let y = t as f64 + (i as f64 + (si as f64 + 0.5) / SUBSAMPLES as f64) * bh / gh as f64;
                    let x = l as f64 + (j as f64 + (sj as f64 + 0.5) / SUBSAMPLES as f64) * bw / gw as f64;
                    let (py, px) = ((y as usize).min(b - 1), (x as usize).min(r - 1));
                    hits += *mask.get(py, px) as usize;
                }
            }
            out[i * gw + j] = hits as f64 / total;
        }
    }
    out
}

fn instance_depth(mask: &Mask, depth: &DepthMap) -> Option<f64> {
    let mut v: Vec<f64> = mask.indices().map(|i| depth.data()[i] as f64).filter(|d| *d > 0.0).collect();
    median(&mut v)
}

fn with_deltas(obs: &mut [Option<Observation>]) {
    let mut prev: Option<[f64; 5]> = None;
    for o in obs.iter_mut().flatten() {
        let cur: [f64; 5] = o.bbox[..5].try_into().expect("five leading fields");
        for k in 0..5 {
            o.bbox[5 + k] = prev.map_or(0.0, |p| cur[k] - p[k]);
        }
        prev = Some(cur);
    }
}

/// Tracks for every instance visible in any of `frames` (in that order).
pub fn derive_tracks(seq: &SceneSequence, frames: &[usize], opts: &TrackOptions) -> Result<Vec<Track>> {
    if !(0.0..1.0).contains(&opts.dropout) {
        return Err(Error::config(format!("dropout must lie in [0, 1), got {}", opts.dropout)));
    }
    if !(opts.noise >= 0.0 && opts.noise.is_finite()) {
        return Err(Error::config("feature noise must be non-negative"));
    }
    if let Some(&bad) = frames.iter().find(|&&f| f >= seq.len()) {
        return Err(Error::Input(format!("frame {bad} out of range for {} frames", seq.len())));
    }
    let mut ids: Vec<(u16, u16)> = frames
        .iter()
        .flat_map(|&f| seq.frames[f].instances.iter().map(|i| (i.id, i.class)))
        .collect();
    ids.sort_unstable();
    ids.dedup_by_key(|p| p.0);

    let dims = opts.dims;
    let noise = Normal::new(0.0, opts.noise).map_err(|e| Error::config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut tracks = Vec::with_capacity(ids.len());
    for (id, class) in ids {
        let mut steps = Vec::with_capacity(frames.len());
        for &f in frames {
            let frame = &seq.frames[f];
            let dropped = rng.random::<f64>() < opts.dropout;
            let obs = frame.instance(id).filter(|_| !dropped).and_then(|inst| {
                let [cx, cy, w, h] = mask_box(&inst.mask)?;
                let d = instance_depth(&inst.mask, &frame.depth)?;
                let occ = soft_occupancy(&inst.mask, dims.height, dims.width);
                let mut mask = Vec::with_capacity(dims.len());
                for _ in 0..dims.channels {
                    mask.extend(occ.iter().map(|&v| v + noise.sample(&mut rng)));
                }
                let mut bbox = [0.0; BOX_DIM];
                bbox[..5].copy_from_slice(&[cx, cy, w, h, d]);
                Some(Observation { bbox, mask })
            });
            steps.push(obs);
        }
        with_deltas(&mut steps);
        tracks.push(Track {
            instance_id: id,
            class,
            steps,
        });
    }
    Ok(tracks)
}

/// Image-space tracks whose box centres move along circular arcs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TurnTrackSpec {
    pub count: usize,
    pub steps: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub class: u16,
    /// Pixels per step.
    pub speed: [f64; 2],
    /// Absolute heading change per step (radians); the sign is random.
    pub turn: [f64; 2],
    pub noise: f64,
    pub dims: FeatureDims,
}

impl Default for TurnTrackSpec {
    fn default() -> Self {
        TurnTrackSpec {
            count: 32,
            steps: 6,
            seed: 0,
            height: 64,
            width: 96,
            class: 0,
            speed: [3.0, 6.0],
            turn: [0.15, 0.4],
            noise: 0.02,
            dims: FeatureDims::default(),
        }
    }
}

fn ellipse_occupancy(dims: &FeatureDims) -> Vec<f64> {
    let (gh, gw) = (dims.height, dims.width);
    let mut out = Vec::with_capacity(gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            let y = (i as f64 + 0.5) / gh as f64 * 2.0 - 1.0;
            let x = (j as f64 + 0.5) / gw as f64 * 2.0 - 1.0;
            out.push(if x * x + y * y <= 1.0 { 1.0 } else { 0.0 });
        }
    }
    out
}

/// Fully observed constant-turn tracks.
pub fn turn_tracks(spec: &TurnTrackSpec) -> Result<Vec<Track>> {
    if spec.speed[0] > spec.speed[1] || spec.turn[0] > spec.turn[1] || spec.steps == 0 {
        return Err(Error::config("turn track ranges must be ordered and steps positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
    let base = ellipse_occupancy(&spec.dims);
    let (w, h) = (spec.width as f64, spec.height as f64);
    let span = |rng: &mut ChaCha8Rng, r: [f64; 2]| if r[0] == r[1] { r[0] } else { rng.random_range(r[0]..r[1]) };
    let mut tracks = Vec::with_capacity(spec.count);
    for k in 0..spec.count {
        let speed = span(&mut rng, spec.speed);
        let turn = span(&mut rng, spec.turn) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
        let mut cx = rng.random_range(0.3 * w..0.7 * w);
        let mut cy = rng.random_range(0.3 * h..0.7 * h);
        let bw = rng.random_range(6.0..16.0);
        let bh = rng.random_range(6.0..16.0);
        let depth = rng.random_range(5.0..30.0);
        let mut steps = Vec::with_capacity(spec.steps);
        for t in 0..spec.steps {
            if t > 0 {
                let a = heading + turn * t as f64;
                cx += speed * a.cos();
                cy += speed * a.sin();
            }
            let mut mask = Vec::with_capacity(spec.dims.len());
            for _ in 0..spec.dims.channels {
                mask.extend(base.iter().map(|&v| v + noise.sample(&mut rng)));
            }
            let mut bbox = [0.0; BOX_DIM];
            bbox[..5].copy_from_slice(&[cx, cy, bw, bh, depth]);
            steps.push(Some(Observation { bbox, mask }));
        }
        with_deltas(&mut steps);
        tracks.push(Track {
            instance_id: (k + 1) as u16,
            class: spec.class,
            steps,
        });
    }
    Ok(tracks)
}
