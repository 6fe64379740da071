use std::fs;
use std::path::{Path, PathBuf};

use panfore::metrics::{Evaluator, Report};
use panfore::odom::{train_odom, OdomModel};
use panfore::pipeline::{forecast_sequence, mask_samples, odom_samples, stuff_samples, things_samples, Models};
use panfore::scene::{load_prediction, save_prediction, SceneSequence};
use panfore::stuff::{train_refiner, RefineModel};
use panfore::things::{train_mask_out, train_things, ThingsModel};
use panfore::training::{TrainConfig, TrainLog};
use panfore::{Error, Result};
use panfore_autodiff::{load_weights, save_weights};
use rayon::prelude::*;

use crate::config::{RunConfig, Split};
use crate::data::{check_compatible, load_split, Manifest};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Component {
    Things,
    Stuff,
    Odom,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Things => "things",
            Component::Stuff => "stuff",
            Component::Odom => "odom",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Component::Things => 1,
            Component::Stuff => 2,
            Component::Odom => 3,
        }
    }
}

/// Per-step losses written next to a weights file.
pub fn log_path(weights: &Path, suffix: &str) -> PathBuf {
    let stem = weights.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "weights".into());
    weights.with_file_name(format!("{stem}{suffix}.log"))
}

fn seeded(cfg: &RunConfig, t: &TrainConfig, c: Component) -> TrainConfig {
    TrainConfig { seed: t.seed ^ cfg.component_seed(c.salt() << 8), ..*t }
}

fn write_log(path: &Path, log: &TrainLog) -> Result<()> {
    fs::write(path, log.render())?;
    Ok(())
}

fn prepare_out(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct Trained {
    pub logs: Vec<(PathBuf, TrainLog)>,
}

/// Trains one component on the training split and writes its weights and
/// loss logs.
pub fn train(cfg: &RunConfig, data: &Path, which: Component, out: &Path) -> Result<Trained> {
    cfg.validate()?;
    let (_, seqs) = load_split(data, Split::Train)?;
    if seqs.is_empty() {
        return Err(Error::Usage(format!("{} has no training sequences", data.display())));
    }
    check_compatible(cfg, &seqs)?;
    prepare_out(out)?;
    let init = cfg.component_seed(which.salt());
    let mut logs = Vec::new();
    match which {
        Component::Things => {
            let mut model = ThingsModel::new(cfg.things, init)?;
            let samples = collect(&seqs, |s| things_samples(s, &cfg.horizon, &cfg.train.tracks))?;
            logs.push((log_path(out, ""), train_things(&mut model, &samples, &seeded(cfg, &cfg.train.things, which))?));
            let masks = collect(&seqs, |s| mask_samples(s, &model, &cfg.train.tracks))?;
            let mask_cfg = TrainConfig { seed: cfg.train.mask.seed ^ init ^ 0xA5, ..cfg.train.mask };
            logs.push((log_path(out, ".mask"), train_mask_out(&mut model, &masks, &mask_cfg)?));
            save_weights(&model.store, out)?;
        }
        Component::Stuff => {
            let mut model = RefineModel::new(cfg.stuff, init)?;
            let n = cfg.train.stuff_sequences.min(seqs.len());
            let samples = collect(&seqs[..n], |s| stuff_samples(s, &cfg.horizon))?;
            logs.push((log_path(out, ""), train_refiner(&mut model, &samples, &seeded(cfg, &cfg.train.stuff, which))?));
            save_weights(&model.store, out)?;
        }
        Component::Odom => {
            let mut model = OdomModel::new(cfg.odom, init)?;
            let samples = collect(&seqs, |s| Ok(odom_samples(s, cfg.odom.history, cfg.horizon.future)))?;
            if samples.is_empty() {
                return Err(Error::Config(format!(
                    "sequences are too short for odom.history ({}) plus horizon.future ({})",
                    cfg.odom.history, cfg.horizon.future
                )));
            }
            logs.push((log_path(out, ""), train_odom(&mut model, &samples, &seeded(cfg, &cfg.train.odom, which))?));
            save_weights(&model.store, out)?;
        }
    }
    for (path, log) in &logs {
        write_log(path, log)?;
    }
    Ok(Trained { logs })
}

fn collect<T>(seqs: &[SceneSequence], f: impl Fn(&SceneSequence) -> Result<Vec<T>>) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for s in seqs {
        out.extend(f(s)?);
    }
    Ok(out)
}

/// Weight files for the forecast; `None` where not supplied.
#[derive(Debug, Clone, Default)]
pub struct WeightPaths {
    pub things: Option<PathBuf>,
    pub stuff: Option<PathBuf>,
    pub odom: Option<PathBuf>,
}

pub struct Loaded {
    pub things: Option<ThingsModel>,
    pub stuff: Option<RefineModel>,
    pub odom: Option<OdomModel>,
}

impl Loaded {
    pub fn models(&self) -> Models<'_> {
        Models { things: self.things.as_ref(), stuff: self.stuff.as_ref(), odom: self.odom.as_ref() }
    }
}

fn load_if<T>(path: &Option<PathBuf>, f: impl Fn(panfore_autodiff::ParamStore) -> Result<T>) -> Result<Option<T>> {
    match path {
        Some(p) if p.exists() => Ok(Some(f(load_weights(p)?)?)),
        _ => Ok(None),
    }
}

pub fn load_models(paths: &WeightPaths) -> Result<Loaded> {
    Ok(Loaded {
        things: load_if(&paths.things, ThingsModel::from_store)?,
        stuff: load_if(&paths.stuff, RefineModel::from_store)?,
        odom: load_if(&paths.odom, OdomModel::from_store)?,
    })
}

/// Forecasts the last frame of every sequence in `split` and writes one
/// prediction file per sequence.
pub fn forecast(cfg: &RunConfig, data: &Path, split: Split, weights: &WeightPaths, out: &Path) -> Result<usize> {
    cfg.validate()?;
    let opts = cfg.forecast_options();
    let loaded = load_models(weights)?;
    let models = loaded.models();
    let missing = models.missing(&opts);
    if !missing.is_empty() {
        return Err(Error::Usage(format!("missing weights for: {}", missing.join(", "))));
    }
    let (manifest, seqs) = load_split(data, split)?;
    check_compatible(cfg, &seqs)?;
    fs::create_dir_all(out)?;
    let entries = manifest.split(split);
    seqs.par_iter().zip(entries.par_iter()).try_for_each(|(seq, e)| -> Result<()> {
        let p = forecast_sequence(seq, &models, &opts)?;
        save_prediction(&p, out.join(format!("{}.pfp", e.name)))
    })?;
    Ok(seqs.len())
}

fn prediction_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    let listing = fs::read_dir(dir).map_err(|e| Error::Usage(format!("cannot read predictions {}: {e}", dir.display())))?;
    for entry in listing {
        let path = entry?.path();
        if path.extension().is_some_and(|x| x == "pfp") {
            if let Some(stem) = path.file_stem() {
                names.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Scores the predictions in `pred` against the last frame of each
/// sequence in `split`.
pub fn eval(data: &Path, split: Split, pred: &Path) -> Result<Report> {
    let manifest = Manifest::load(data)?;
    let entries = manifest.split(split);
    let found = prediction_files(pred)?;
    if found.len() != entries.len() {
        return Err(Error::Usage(format!(
            "{} holds {} predictions but the {} split has {} sequences",
            pred.display(),
            found.len(),
            split.name(),
            entries.len()
        )));
    }
    if let Some(e) = entries.iter().find(|e| found.binary_search(&e.name).is_err()) {
        return Err(Error::Usage(format!("no prediction for sequence {}", e.name)));
    }
    let (_, seqs) = load_split(data, split)?;
    let pairs = seqs
        .par_iter()
        .zip(entries.par_iter())
        .map(|(seq, e)| {
            let p = load_prediction(pred.join(format!("{}.pfp", e.name)))?;
            let gt = seq.frames.last().ok_or_else(|| Error::Input(format!("sequence {} is empty", e.name)))?.panoptic();
            Ok((p, gt))
        })
        .collect::<Result<Vec<_>>>()?;
    let classes = match seqs.first() {
        Some(s) => s.classes.clone(),
        None => return Err(Error::Usage(format!("the {} split is empty", split.name()))),
    };
    let mut ev = Evaluator::new(classes);
    for (p, gt) in &pairs {
        ev.add(&p.panoptic, &p.confidence, gt)?;
    }
    Ok(ev.report())
}

pub fn report_json(r: &Report) -> String {
    let map: serde_json::Map<String, serde_json::Value> =
        r.entries.iter().map(|(k, v)| (k.clone(), v.map_or(serde_json::Value::Null, serde_json::Value::from))).collect();
    serde_json::to_string_pretty(&map).expect("report serializes")
}

pub fn report_from_json(text: &str) -> Result<Report> {
    let map: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(text).map_err(|e| Error::Input(format!("report JSON: {e}")))?;
    let entries = map
        .into_iter()
        .map(|(k, v)| match v {
            serde_json::Value::Null => Ok((k, None)),
            serde_json::Value::Number(n) => Ok((k, n.as_f64())),
            other => Err(Error::Input(format!("report value for {k} is not a number: {other}"))),
        })
        .collect::<Result<_>>()?;
    Ok(Report { entries })
}
