use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BeatAnnotation, Dataset, Example, Splits, SyntheticConfig};
use crate::error::{Error, IoContext, Result};
use crate::foundation::{load_features, save_features, LayerFeatureStack};
use crate::postprocess::parse_beats;

/// `time position` per line, six decimals.
pub fn format_annotation(a: &BeatAnnotation) -> String {
    let mut out = String::new();
    for (t, p) in a.beat_times.iter().zip(&a.positions) {
        writeln!(out, "{t:.6} {p}").expect("writing to a String");
    }
    out
}

pub fn parse_annotation(text: &str) -> Result<BeatAnnotation> {
    let seq = parse_beats(text)?;
    if seq.is_empty() {
        return Ok(BeatAnnotation::default());
    }
    let positions = seq
        .positions()
        .ok_or_else(|| Error::Parse {
            line: 1,
            message: "annotation lines need a position column".into(),
        })?
        .to_vec();
    BeatAnnotation::new(seq.times().to_vec(), positions)
}

pub fn write_annotation(a: &BeatAnnotation, path: &Path) -> Result<()> {
    std::fs::write(path, format_annotation(a)).at(path)
}

pub fn read_annotation(path: &Path) -> Result<BeatAnnotation> {
    parse_annotation(&std::fs::read_to_string(path).at(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub items: Vec<String>,
    pub splits: Splits,
    pub config: SyntheticConfig,
}

/// Writes `item_{k}.hgft`, `item_{k}.beats` and `manifest.json`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).at(dir)?;
    for ex in &ds.items {
        let stack = LayerFeatureStack::new(vec![ex.features.clone()], ex.frame_rate)?;
        save_features(&stack, &dir.join(format!("{}.hgft", ex.id)))?;
        write_annotation(&ex.annotation, &dir.join(format!("{}.beats", ex.id)))?;
    }
    let manifest = Manifest {
        format_version: 1,
        seed: ds.config.seed,
        items: ds.items.iter().map(|e| e.id.clone()).collect(),
        splits: ds.splits.clone(),
        config: ds.config.clone(),
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).at(&path)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&path).at(&path)?)?;
    manifest.splits.validate(manifest.items.len())?;
    let items = manifest
        .items
        .iter()
        .map(|id| {
            let stack = load_features(&dir.join(format!("{id}.hgft")))?;
            if stack.n_layers() != 1 {
                return Err(Error::invalid(format!("{id}.hgft should hold a single layer")));
            }
            let frame_rate = stack.frame_rate;
            Ok(Example {
                id: id.clone(),
                features: stack.into_layers().remove(0),
                annotation: read_annotation(&dir.join(format!("{id}.beats")))?,
                frame_rate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: manifest.config,
        items,
        splits: manifest.splits,
    })
}
