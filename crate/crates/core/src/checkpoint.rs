//! Versioned JSON checkpoint of a [`TrainState`].
//!
//! Layout (`format` = `featadv-checkpoint`, `version` = 1):
//!
//! ```text
//! {
//!   "format": "featadv-checkpoint",
//!   "version": 1,
//!   "config_hash": "<hex sha-256 of the effective config>",
//!   "phase": "pretrain" | "adapt" | "asn",
//!   "iter": <completed iterations of the phase>,
//!   "model": { "classes", "split", "frozen_g", "blocks": [layer], "head": [layer] },
//!   "disc": { "layers": [layer] },
//!   "sgd": { "momentum", "weight_decay", "velocity" },
//!   "adam": { "beta1", "beta2", "eps", "t", "m", "v" },
//!   "rng": <ChaCha8 state>,
//!   "metrics": [{ "iter", "metric_name", "value" }],
//!   "intensities": [{ "iter", "k", "objective", "log10_l1_norm" }]
//! }
//! ```
//!
//! A layer is `{ "shape": [o, i, k, k], "weight": [...], "bias": [...],
//! "stride", "padding" }`. Floats are written with round-trip precision so
//! a reload is bit-exact.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Tensor;
use crate::models::{ConvLayer, Discriminator, SegmentationModel};
use crate::perturb::{GradientIntensityRecord, Layer};
use crate::train::{Adam, MetricsRecord, Phase, Sgd, TrainState};

pub const FORMAT: &str = "featadv-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    shape: Vec<usize>,
    weight: Vec<f64>,
    bias: Vec<f64>,
    stride: usize,
    padding: usize,
}

impl LayerRecord {
    fn from_layer(l: &ConvLayer) -> Self {
        Self {
            shape: l.weight.shape().to_vec(),
            weight: l.weight.data().to_vec(),
            bias: l.bias.data().to_vec(),
            stride: l.stride,
            padding: l.padding,
        }
    }

    fn into_layer(self) -> Result<ConvLayer> {
        let out_c = *self.shape.first().unwrap_or(&0);
        Ok(ConvLayer {
            weight: Tensor::new(&self.shape, self.weight)?,
            bias: Tensor::new(&[out_c], self.bias)?,
            stride: self.stride,
            padding: self.padding,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ModelRecord {
    classes: usize,
    split: Layer,
    frozen_g: bool,
    blocks: Vec<LayerRecord>,
    head: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
struct DiscRecord {
    layers: Vec<LayerRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config_hash: String,
    phase: Phase,
    iter: usize,
    model: ModelRecord,
    disc: DiscRecord,
    sgd: Sgd,
    adam: Adam,
    rng: ChaCha8Rng,
    metrics: Vec<MetricsRecord>,
    intensities: Vec<GradientIntensityRecord>,
}

pub fn save_checkpoint(state: &TrainState, config_hash: &str, path: &Path) -> Result<()> {
    let (blocks, head) = state.model.layers();
    let file = CheckpointFile {
        format: FORMAT.to_owned(),
        version: VERSION,
        config_hash: config_hash.to_owned(),
        phase: state.phase,
        iter: state.iter,
        model: ModelRecord {
            classes: state.model.classes(),
            split: state.model.split(),
            frozen_g: state.model.is_frozen(),
            blocks: blocks.iter().map(LayerRecord::from_layer).collect(),
            head: head.iter().map(LayerRecord::from_layer).collect(),
        },
        disc: DiscRecord {
            layers: state.disc.layers().iter().map(LayerRecord::from_layer).collect(),
        },
        sgd: state.sgd.clone(),
        adam: state.adam.clone(),
        rng: state.rng.clone(),
        metrics: state.metrics.clone(),
        intensities: state.intensities.clone(),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_string(&file).expect("checkpoint serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and returns it with the config hash it was saved
/// under.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, String)> {
    if !path.is_file() {
        return Err(Error::Missing {
            what: "checkpoint",
            path: path.to_owned(),
        });
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if f.format != FORMAT || f.version != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint {} v{}", f.format, f.version),
        ));
    }
    let layers = |v: Vec<LayerRecord>| -> Result<Vec<ConvLayer>> {
        v.into_iter()
            .map(|l| l.into_layer().map_err(|e| Error::format(path, e.to_string())))
            .collect()
    };
    let model = SegmentationModel::from_layers(
        layers(f.model.blocks)?,
        layers(f.model.head)?,
        f.model.classes,
        f.model.split,
        f.model.frozen_g,
    )
    .map_err(|e| Error::format(path, e.to_string()))?;
    let disc = Discriminator::from_layers(layers(f.disc.layers)?);
    if f.sgd.velocity.len() != model.params().len() || f.adam.m.len() != disc.params().len() {
        return Err(Error::format(path, "optimizer state does not match the networks"));
    }
    Ok((
        TrainState {
            phase: f.phase,
            model,
            disc,
            sgd: f.sgd,
            adam: f.adam,
            iter: f.iter,
            rng: f.rng,
            metrics: f.metrics,
            intensities: f.intensities,
        },
        f.config_hash,
    ))
}
