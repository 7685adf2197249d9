//! Run configuration: one TOML tree with `data`, `model`, `perturb`, `train`
//! and `eval` sections plus dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DomainSpec;
use crate::error::{Error, Result};
use crate::eval::Variant;
use crate::models::ModelConfig;
use crate::perturb::PerturbConfig;
use crate::train::TrainConfig;

/// Environment variable naming the directory under which runs without an
/// explicit `output_dir` are placed.
pub const OUTPUT_ROOT_ENV: &str = "FEATADV_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub n_source: usize,
    pub n_target: usize,
    pub n_target_eval: usize,
    /// Dataset directories; empty means `<output_dir>/data/<split>`.
    pub source_dir: String,
    pub target_dir: String,
    pub target_eval_dir: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DomainSpec::default(),
            target: DomainSpec::target_default(),
            n_source: 200,
            n_target: 200,
            n_target_eval: 100,
            source_dir: String::new(),
            target_dir: String::new(),
            target_eval_dir: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Seeds of the ablation grid; empty means the top-level seed only.
    pub seeds: Vec<u64>,
    /// Built-in grid: `components`, `methods`, `layers` or `comparison`.
    /// Ignored when `variants` is non-empty.
    pub grid: String,
    pub variants: Vec<Variant>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seeds: Vec::new(),
            grid: "components".to_owned(),
            variants: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn resolve_grid(&self, encoder_depth: usize) -> Result<Vec<Variant>> {
        if !self.variants.is_empty() {
            return Ok(self.variants.clone());
        }
        match self.grid.as_str() {
            "components" => Ok(Variant::component_grid()),
            "methods" => Ok(Variant::method_grid()),
            "layers" => Ok(Variant::layer_grid(encoder_depth)),
            "comparison" => Ok(comparison_grid()),
            other => Err(Error::Config(format!("unknown grid `{other}`"))),
        }
    }
}

/// Source-only, the alignment baselines and the full method.
pub fn comparison_grid() -> Vec<Variant> {
    use crate::train::{Baseline, Components};
    vec![
        Variant::baseline("source_only", Baseline::SourceOnly),
        Variant::baseline("asn", Baseline::Asn),
        Variant::baseline("asn_weighted_ce", Baseline::AsnWeightedCe),
        Variant::baseline("asn_lovasz", Baseline::AsnLovasz),
        Variant::method("full", Components::default()),
    ]
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Single source of randomness: the data and training seeds are derived
    /// from it by [`RunConfig::resolve`].
    pub seed: u64,
    /// Empty means `$FEATADV_OUTPUT_ROOT/default` (or `runs/default`).
    pub output_dir: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub perturb: PerturbConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Seed offsets of the three generated splits.
const TARGET_SEED_OFFSET: u64 = 1;
const TARGET_EVAL_SEED_OFFSET: u64 = 2;

impl RunConfig {
    /// Parses TOML text, applies `key.path=value` overrides and resolves
    /// derived fields. Unknown keys are errors.
    ///
    /// The text is merged onto the serialized defaults key by key, so a
    /// partial `[data.target]` table keeps the target's shift instead of
    /// falling back to the source defaults.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut tree: toml::Table =
            toml::from_str(&RunConfig::default().to_toml()).expect("defaults round-trip");
        merge(&mut tree, user);
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(tree)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Missing {
                what: "config file",
                path: path.to_owned(),
            });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Derives every sub-seed from `seed` and validates the sections.
    pub fn resolve(&mut self) -> Result<()> {
        self.train.seed = self.seed;
        self.data.source.seed = self.seed;
        self.data.target.seed = self.seed.wrapping_add(TARGET_SEED_OFFSET);
        self.data.source.validate()?;
        self.data.target.validate()?;
        if self.data.source.class_names != self.data.target.class_names {
            return Err(Error::Config("source and target class names differ".into()));
        }
        self.train.validate()?;
        self.perturb.validate()?;
        if self.perturb.layer.depth() > self.model.encoder_channels.len() {
            return Err(Error::Config(format!(
                "perturbing layer {} is deeper than the {}-block encoder",
                self.perturb.layer,
                self.model.encoder_channels.len()
            )));
        }
        Ok(())
    }

    /// Spec of the labeled target evaluation split: the target domain with
    /// its own seed, so its scenes differ from the training scenes.
    pub fn target_eval_spec(&self) -> DomainSpec {
        DomainSpec {
            seed: self.seed.wrapping_add(TARGET_EVAL_SEED_OFFSET),
            ..self.data.target.clone()
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        if !self.output_dir.is_empty() {
            return PathBuf::from(&self.output_dir);
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        root.join("default")
    }

    fn data_dir(&self, explicit: &str, split: &str) -> PathBuf {
        if explicit.is_empty() {
            self.output_dir().join("data").join(split)
        } else {
            PathBuf::from(explicit)
        }
    }

    pub fn source_dir(&self) -> PathBuf {
        self.data_dir(&self.data.source_dir, "source")
    }

    pub fn target_dir(&self) -> PathBuf {
        self.data_dir(&self.data.target_dir, "target")
    }

    pub fn target_eval_dir(&self) -> PathBuf {
        self.data_dir(&self.data.target_eval_dir, "target_eval")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Overlays `top` onto `base`; tables merge recursively, anything else
/// replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Sets `a.b.c = value` in a TOML tree. The value is parsed as a TOML
/// literal when possible and taken as a string otherwise.
pub fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path `{path}`")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    let (last, parents) = keys.split_last().expect("non-empty path");
    let mut node = tree;
    for k in parents {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path `{path}` crosses a value")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perturb::AttackMethod;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_str("", &[]).unwrap();
        let mut d = RunConfig::default();
        d.resolve().unwrap();
        assert_eq!(cfg, d);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_toml_str("[perturb]\nkk = 3\n", &[]).unwrap_err();
        assert!(err.to_string().contains("kk"), "{err}");
        let err = RunConfig::from_toml_str("", &["train.lrr=1".into()]).unwrap_err();
        assert!(err.to_string().contains("lrr"), "{err}");
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::from_toml_str(
            "",
            &[
                "perturb.method=I-FGSM".into(),
                "perturb.k=5".into(),
                "perturb.layer=\"block2\"".into(),
                "train.components.entropy=false".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.perturb.method, AttackMethod::IFgsm);
        assert_eq!(cfg.perturb.k, 5);
        assert_eq!(cfg.perturb.layer, crate::perturb::Layer::Block(2));
        assert!(!cfg.train.components.entropy);
        assert!(cfg.to_toml().contains("I-FGSM"));
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::from_toml_str("seed = 9\n", &[]).unwrap();
        let again = RunConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
    }

    #[test]
    fn partial_target_table_keeps_the_shift() {
        let cfg = RunConfig::from_toml_str(
            "[data.target]\nnoise = 0.1\n",
            &["data.target.tail_presence=0.2".into()],
        )
        .unwrap();
        assert_eq!(cfg.data.target.shift, crate::data::Shift::target_default());
        assert_eq!(cfg.data.target.noise, 0.1);
        assert_eq!(cfg.data.target.tail_presence, 0.2);
    }

    #[test]
    fn too_deep_layer_rejected() {
        assert!(RunConfig::from_toml_str("", &["perturb.layer=block5".into()]).is_err());
    }
}
