use std::fs;
use std::path::{Path, PathBuf};

use panfore::scene::{generate, load_sequence, save_sequence, SceneSequence, SceneSpec};
use panfore::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Split};

pub const MANIFEST: &str = "manifest.json";

/// Index of a generated dataset; paths are relative to its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub train: Vec<Entry>,
    pub val: Vec<Entry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub name: String,
    pub path: PathBuf,
    pub scene_seed: u64,
}

impl Manifest {
    pub fn split(&self, split: Split) -> &[Entry] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Usage(format!("cannot read dataset manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
    }
}

fn entries(cfg: &RunConfig, split: Split, n: usize) -> Vec<Entry> {
    (0..n)
        .map(|i| {
            let name = format!("{:06}", i);
            Entry {
                path: Path::new(split.name()).join(format!("{name}.pfd")),
                name,
                scene_seed: cfg.sequence_seed(split, i),
            }
        })
        .collect()
}

/// Generates and writes every sequence, then the manifest.
pub fn generate_dataset(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let manifest = Manifest {
        format: "PFD1".into(),
        seed: cfg.seed,
        train: entries(cfg, Split::Train, cfg.data.train),
        val: entries(cfg, Split::Val, cfg.data.val),
    };
    for split in [Split::Train, Split::Val] {
        fs::create_dir_all(out.join(split.name()))?;
    }
    manifest
        .train
        .par_iter()
        .chain(manifest.val.par_iter())
        .try_for_each(|e| -> Result<()> {
            let seq = generate(&SceneSpec { seed: e.scene_seed, ..cfg.scene.clone() })?;
            save_sequence(&seq, out.join(&e.path))
        })?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(out.join(MANIFEST), text + "\n")?;
    Ok(manifest)
}

/// Loads one split in manifest order.
pub fn load_split(dir: &Path, split: Split) -> Result<(Manifest, Vec<SceneSequence>)> {
    let manifest = Manifest::load(dir)?;
    let seqs = manifest
        .split(split)
        .par_iter()
        .map(|e| load_sequence(dir.join(&e.path)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, seqs))
}

/// Rejects sequences whose dimensions disagree with the configured models.
pub fn check_compatible(cfg: &RunConfig, seqs: &[SceneSequence]) -> Result<()> {
    for (i, s) in seqs.iter().enumerate() {
        let (ns, nt) = (s.classes.num_stuff(), s.classes.num_things());
        if ns != cfg.scene.num_stuff || nt != cfg.scene.num_things {
            return Err(Error::Config(format!(
                "sequence {i} has {ns} stuff and {nt} thing classes but scene.num_stuff/scene.num_things are {}/{}",
                cfg.scene.num_stuff, cfg.scene.num_things
            )));
        }
        if s.len() < cfg.horizon.min_frames() {
            return Err(Error::Config(format!(
                "sequence {i} has {} frames but the horizon needs {}",
                s.len(),
                cfg.horizon.min_frames()
            )));
        }
    }
    Ok(())
}
