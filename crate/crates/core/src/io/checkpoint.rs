//! Training checkpoints and saved pyramids on top of [`Archive`].

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{discriminator_layout, generator_layout, Discriminator, Generator, InitScheme, ParamSet, ParamSpec};
use crate::pyramid::LaplacianPyramid;
use crate::train::{AdamState, TrainConfig, TrainState};

use super::archive::Archive;

pub const CHECKPOINT_KIND: &str = "train_state";
pub const PYRAMID_KIND: &str = "pyramid";

fn put(archive: &mut Archive, prefix: &str, set: &ParamSet) {
    for (name, t) in set.iter() {
        archive.tensors.insert(format!("{prefix}.{name}"), t.clone());
    }
}

pub fn checkpoint_archive(state: &TrainState) -> Archive {
    let mut a = Archive::new(CHECKPOINT_KIND);
    a.meta.push(("step".into(), state.step.to_string()));
    a.meta.push(("adam_g.step".into(), state.adam_g.step.to_string()));
    a.meta.push(("adam_d.step".into(), state.adam_d.step.to_string()));
    for (k, v) in state.config.to_pairs() {
        a.meta.push((format!("config.{k}"), v));
    }
    put(&mut a, "generator", &state.generator.params);
    put(&mut a, "discriminator", &state.discriminator.params);
    put(&mut a, "adam_g.m", &state.adam_g.m);
    put(&mut a, "adam_g.v", &state.adam_g.v);
    put(&mut a, "adam_d.m", &state.adam_d.m);
    put(&mut a, "adam_d.v", &state.adam_d.v);
    a
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    checkpoint_archive(state).save(path)
}

fn meta_u64(a: &Archive, path: &Path, key: &str) -> Result<u64> {
    a.meta(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(path, 0, format!("missing or invalid `{key}` entry")))
}

/// The configuration snapshot stored in a checkpoint.
pub fn read_checkpoint_config(path: impl AsRef<Path>) -> Result<TrainConfig> {
    let path = path.as_ref();
    config_of(&Archive::load(path)?, path)
}

fn config_of(a: &Archive, path: &Path) -> Result<TrainConfig> {
    if a.kind != CHECKPOINT_KIND {
        return Err(Error::format(path, 0, format!("archive holds a `{}`, not a checkpoint", a.kind)));
    }
    let pairs = a.meta.iter().filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k, v.as_str())));
    TrainConfig::from_pairs(pairs)
}

/// Takes the `prefix.*` tensors matching `layout` out of the archive.
fn take(a: &mut Archive, path: &Path, prefix: &str, layout: &[ParamSpec]) -> Result<ParamSet> {
    let mut set = ParamSet::new();
    for spec in layout {
        let name = format!("{prefix}.{}", spec.name);
        let layout_err = |reason: String| Error::Layout { path: path.display().to_string(), tensor: name.clone(), reason };
        let t = a.tensors.shift_remove(&name).ok_or_else(|| layout_err("missing from the checkpoint".into()))?;
        if t.shape() != spec.shape {
            return Err(layout_err(format!("stored shape {} but the configuration needs {}", t.shape(), spec.shape)));
        }
        set.insert(spec.name.clone(), t);
    }
    Ok(set)
}

/// Loads a checkpoint, checking every tensor against `expected` (or, when
/// `None`, against the stored configuration).
pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&TrainConfig>) -> Result<TrainState> {
    let path = path.as_ref();
    let mut a = Archive::load(path)?;
    let stored = config_of(&a, path)?;
    let config = expected.cloned().unwrap_or(stored);
    config.validate()?;
    let g_layout = generator_layout(&config.generator, InitScheme::Random)?;
    let d_layout = discriminator_layout(&config.discriminator)?;

    let step = meta_u64(&a, path, "step")?;
    let g_step = meta_u64(&a, path, "adam_g.step")?;
    let d_step = meta_u64(&a, path, "adam_d.step")?;
    let gp = take(&mut a, path, "generator", &g_layout)?;
    let dp = take(&mut a, path, "discriminator", &d_layout)?;
    let gm = take(&mut a, path, "adam_g.m", &g_layout)?;
    let gv = take(&mut a, path, "adam_g.v", &g_layout)?;
    let dm = take(&mut a, path, "adam_d.m", &d_layout)?;
    let dv = take(&mut a, path, "adam_d.v", &d_layout)?;
    if let Some(name) = a.tensors.keys().next() {
        return Err(Error::Layout {
            path: path.display().to_string(),
            tensor: name.clone(),
            reason: "not part of the configuration".into(),
        });
    }
    Ok(TrainState {
        generator: Generator { config: config.generator.clone(), params: gp },
        discriminator: Discriminator { config: config.discriminator.clone(), params: dp },
        adam_g: AdamState { m: gm, v: gv, step: g_step },
        adam_d: AdamState { m: dm, v: dv, step: d_step },
        config,
        step,
    })
}

pub fn save_pyramid(pyr: &LaplacianPyramid, path: impl AsRef<Path>) -> Result<()> {
    let mut a = Archive::new(PYRAMID_KIND);
    a.meta.push(("levels".into(), pyr.levels().to_string()));
    a.meta.push(("original_height".into(), pyr.original_size.0.to_string()));
    a.meta.push(("original_width".into(), pyr.original_size.1.to_string()));
    for (l, h) in pyr.highs.iter().enumerate() {
        a.tensors.insert(format!("high.{l}"), h.clone());
    }
    a.tensors.insert("low".into(), pyr.low.clone());
    a.save(path)
}

pub fn load_pyramid(path: impl AsRef<Path>) -> Result<LaplacianPyramid> {
    let path = path.as_ref();
    let mut a = Archive::load(path)?;
    if a.kind != PYRAMID_KIND {
        return Err(Error::format(path, 0, format!("archive holds a `{}`, not a pyramid", a.kind)));
    }
    let levels = meta_u64(&a, path, "levels")? as usize;
    let oh = meta_u64(&a, path, "original_height")? as usize;
    let ow = meta_u64(&a, path, "original_width")? as usize;
    let missing = |name: String| Error::Layout { path: path.display().to_string(), tensor: name, reason: "missing".into() };
    let highs = (0..levels)
        .map(|l| a.tensors.shift_remove(&format!("high.{l}")).ok_or_else(|| missing(format!("high.{l}"))))
        .collect::<Result<Vec<_>>>()?;
    let low = a.tensors.shift_remove("low").ok_or_else(|| missing("low".into()))?;
    let pyr = LaplacianPyramid { highs, low, original_size: (oh, ow) };
    pyr.validate()?;
    Ok(pyr)
}
