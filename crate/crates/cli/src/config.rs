use std::path::{Path, PathBuf};

use panfore::odom::OdomConfig;
use panfore::pipeline::{Baseline, ForecastOptions, Horizon, OdometryMode};
use panfore::scene::SceneSpec;
use panfore::stuff::{RefineConfig, RefineMode};
use panfore::things::ThingsConfig;
use panfore::tracks::TrackOptions;
use panfore::training::TrainConfig;
use panfore::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Short,
    Mid,
}

impl Preset {
    pub fn horizon(self) -> Horizon {
        match self {
            Preset::Short => Horizon::short(),
            Preset::Mid => Horizon::mid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub val: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { train: 200, val: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub data: PathBuf,
    pub things: PathBuf,
    pub stuff: PathBuf,
    pub odom: PathBuf,
    pub predictions: PathBuf,
}

impl Default for PathConfig {
    fn default() -> Self {
        PathConfig {
            data: "data".into(),
            things: "weights/things.pfw".into(),
            stuff: "weights/stuff.pfw".into(),
            odom: "weights/odom.pfw".into(),
            predictions: "predictions".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Detection noise applied to the observed part of training tracks.
    pub tracks: TrackOptions,
    pub things: TrainConfig,
    pub mask: TrainConfig,
    pub stuff: TrainConfig,
    /// The refiner trains on the first few training sequences only.
    pub stuff_sequences: usize,
    pub odom: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            tracks: TrackOptions { dropout: 0.1, noise: 0.05, ..TrackOptions::default() },
            things: TrainConfig { steps: 2000, ..TrainConfig::default() },
            mask: TrainConfig { steps: 300, ..TrainConfig::default() },
            stuff: TrainConfig { steps: 100, batch: 4, ..TrainConfig::default() },
            stuff_sequences: 2,
            odom: TrainConfig { steps: 500, ..TrainConfig::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    pub odometry: OdometryMode,
    pub refine: RefineMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Baseline>,
    pub filter_last_frame_presence: bool,
    pub tracks: TrackOptions,
}

impl Default for ForecastSection {
    fn default() -> Self {
        ForecastSection {
            odometry: OdometryMode::Passive,
            refine: RefineMode::Learned,
            baseline: None,
            filter_last_frame_presence: false,
            tracks: TrackOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub horizon: Horizon,
    pub scene: SceneSpec,
    pub data: DataConfig,
    pub things: ThingsConfig,
    pub stuff: RefineConfig,
    pub odom: OdomConfig,
    pub train: TrainSection,
    pub forecast: ForecastSection,
    pub paths: PathConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            horizon: Horizon::short(),
            scene: SceneSpec::default(),
            data: DataConfig::default(),
            things: ThingsConfig::default(),
            stuff: RefineConfig::default(),
            odom: OdomConfig::default(),
            train: TrainSection::default(),
            forecast: ForecastSection::default(),
            paths: PathConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        RunConfig { horizon: p.horizon(), ..RunConfig::default() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &location(text, e.span())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.horizon.validate()?;
        if self.scene.frames < self.horizon.min_frames() {
            return Err(Error::Config(format!(
                "scene.frames ({}) is shorter than the {} frames horizon.inputs={}, horizon.stride={} and horizon.future={} span",
                self.scene.frames,
                self.horizon.min_frames(),
                self.horizon.inputs,
                self.horizon.stride,
                self.horizon.future
            )));
        }
        self.things.validate()?;
        if !(self.things.lambda > 0.0 && self.things.lambda.is_finite()) {
            return Err(Error::Config("things.lambda must be positive".into()));
        }
        if self.things.num_things != self.scene.num_things || self.things.first_thing as usize != self.scene.num_stuff {
            return Err(Error::Config(format!(
                "things.num_things/things.first_thing ({}, {}) do not match scene.num_things/scene.num_stuff ({}, {})",
                self.things.num_things, self.things.first_thing, self.scene.num_things, self.scene.num_stuff
            )));
        }
        if self.stuff.classes != self.scene.num_stuff {
            return Err(Error::Config(format!(
                "stuff.classes ({}) does not match scene.num_stuff ({})",
                self.stuff.classes, self.scene.num_stuff
            )));
        }
        if self.stuff.frames != self.horizon.inputs {
            return Err(Error::Config(format!(
                "stuff.frames ({}) does not match horizon.inputs ({})",
                self.stuff.frames, self.horizon.inputs
            )));
        }
        if self.stuff.hidden == 0 || self.odom.hidden == 0 || self.odom.history == 0 {
            return Err(Error::Config("stuff.hidden, odom.hidden and odom.history must be positive".into()));
        }
        for (name, tracks) in [("train.tracks", &self.train.tracks), ("forecast.tracks", &self.forecast.tracks)] {
            if tracks.dims != self.things.dims {
                return Err(Error::Config(format!("{name}.dims does not match things.dims")));
            }
            if !(0.0..1.0).contains(&tracks.dropout) || !(tracks.noise >= 0.0 && tracks.noise.is_finite()) {
                return Err(Error::Config(format!("{name}.dropout must lie in [0, 1) and {name}.noise must be non-negative")));
            }
        }
        for (name, t) in [
            ("train.things", &self.train.things),
            ("train.mask", &self.train.mask),
            ("train.stuff", &self.train.stuff),
            ("train.odom", &self.train.odom),
        ] {
            if t.batch == 0 || !(t.lr > 0.0 && t.lr.is_finite()) || t.clip_norm < 0.0 {
                return Err(Error::Config(format!("{name} needs batch >= 1, lr > 0 and clip_norm >= 0")));
            }
        }
        if self.train.stuff_sequences == 0 {
            return Err(Error::Config("train.stuff_sequences must be positive".into()));
        }
        Ok(())
    }

    pub fn forecast_options(&self) -> ForecastOptions {
        ForecastOptions {
            horizon: self.horizon,
            odometry: self.forecast.odometry,
            refine: self.forecast.refine,
            baseline: self.forecast.baseline,
            tracks: self.forecast.tracks,
            filter_last_frame_presence: self.forecast.filter_last_frame_presence,
        }
    }

    /// Scene seed of sequence `index` in a split.
    pub fn sequence_seed(&self, split: Split, index: usize) -> u64 {
        let offset = match split {
            Split::Train => 0,
            Split::Val => 1 << 31,
        };
        (self.seed << 32).wrapping_add(offset + index as u64)
    }

    /// Seeds one component's initialisation and sampling from the run seed.
    pub fn component_seed(&self, component: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ component
    }
}

fn location(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(s) => {
            let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}
