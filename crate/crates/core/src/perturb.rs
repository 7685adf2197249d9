//! Adversarial feature generation.
//!
//! Three attack objectives act on a perturbed copy `f*` of a feature map:
//! the discriminator term (confuse `D`), the Euclidean distance to the
//! original features (keep `f*` close) and, for labeled source features, the
//! Lovász-Softmax segmentation loss (make `F` fail). The sign-preposed
//! methods take the sign of each objective's gradient separately before
//! mixing them, so no single objective can dominate the update direction the
//! way it does in plain I-FGSM.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{self, DomainLabel, LabelMap};
use crate::math::{self, GradientMap, Objective, Tape, Tensor};
use crate::models::{Discriminator, SegmentationModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn label(self) -> DomainLabel {
        match self {
            Domain::Source => DomainLabel::Source,
            Domain::Target => DomainLabel::Target,
        }
    }
}

/// Network depth at which features are taken and perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Layer {
    /// The input image itself.
    Pixel,
    /// Output of encoder block `n` (1-based).
    Block(usize),
}

impl Layer {
    /// Number of encoder blocks in front of this layer.
    pub fn depth(self) -> usize {
        match self {
            Layer::Pixel => 0,
            Layer::Block(n) => n,
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Pixel => f.write_str("pixel"),
            Layer::Block(n) => write!(f, "block{n}"),
        }
    }
}

impl FromStr for Layer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "pixel" {
            return Ok(Layer::Pixel);
        }
        s.strip_prefix("block")
            .and_then(|n| n.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .map(Layer::Block)
            .ok_or_else(|| format!("unknown layer `{s}` (expected `pixel` or `blockN`)"))
    }
}

impl TryFrom<String> for Layer {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Layer> for String {
    fn from(l: Layer) -> String {
        l.to_string()
    }
}

/// Intermediate representation tagged with the domain it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
    origin: Domain,
    layer: Layer,
}

impl FeatureMap {
    pub fn new(values: Tensor, origin: Domain, layer: Layer) -> Result<Self> {
        values.dims4()?;
        values.ensure_finite("feature map")?;
        Ok(Self {
            values,
            origin,
            layer,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn origin(&self) -> Domain {
        self.origin
    }

    pub fn layer(&self) -> Layer {
        self.layer
    }

    /// Same origin and layer, new values.
    fn with_values(&self, values: Tensor) -> Result<Self> {
        Self::new(values, self.origin, self.layer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackMethod {
    #[serde(rename = "None")]
    None,
    #[serde(rename = "FGSPM")]
    Fgspm,
    #[serde(rename = "I-FGSM")]
    IFgsm,
    #[serde(rename = "MI-FGSPM")]
    MiFgspm,
    #[serde(rename = "I-FGSPM")]
    IFgspm,
}

impl AttackMethod {
    pub const ALL: [AttackMethod; 5] = [
        AttackMethod::None,
        AttackMethod::IFgsm,
        AttackMethod::Fgspm,
        AttackMethod::MiFgspm,
        AttackMethod::IFgspm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::None => "None",
            AttackMethod::Fgspm => "FGSPM",
            AttackMethod::IFgsm => "I-FGSM",
            AttackMethod::MiFgspm => "MI-FGSPM",
            AttackMethod::IFgspm => "I-FGSPM",
        }
    }
}

impl fmt::Display for AttackMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::contract(format!("unknown attack method `{s}`")))
    }
}

/// Step intensities for the three objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Epsilons {
    pub adv: f64,
    pub l2: f64,
    pub seg: f64,
}

impl Epsilons {
    pub fn total(&self) -> f64 {
        self.adv + self.l2 + self.seg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbConfig {
    pub method: AttackMethod,
    /// Generation iterations.
    pub k: usize,
    /// `[ε₁, ε₂, ε₃]`: discriminator, L2 and segmentation step sizes.
    pub epsilon: [f64; 3],
    /// `[β₁, β₂, β₃]` for I-FGSM: segmentation, L2 and discriminator weights.
    pub beta: [f64; 3],
    /// Momentum decay for MI-FGSPM.
    pub momentum: f64,
    /// Perturbing layer.
    pub layer: Layer,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self {
            method: AttackMethod::IFgspm,
            k: 3,
            epsilon: [0.01, 0.002, 0.011],
            beta: [1.0, 1.0, 1.0],
            momentum: 1.0,
            layer: Layer::Block(4),
        }
    }
}

impl PerturbConfig {
    pub fn epsilons(&self) -> Epsilons {
        Epsilons {
            adv: self.epsilon[0],
            l2: self.epsilon[1],
            seg: self.epsilon[2],
        }
    }

    /// Shared I-FGSM step: the sum of the per-objective budgets.
    pub fn ifgsm_epsilon(&self) -> f64 {
        self.epsilons().total()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon.iter().chain(&self.beta).any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::contract("epsilon and beta must be finite and non-negative"));
        }
        if !(self.momentum >= 0.0 && self.momentum.is_finite()) {
            return Err(Error::contract("momentum must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Frozen networks the attack differentiates through.
#[derive(Clone, Copy)]
pub struct AttackContext<'a> {
    pub model: &'a SegmentationModel,
    pub disc: &'a Discriminator,
}

/// Per-objective gradients at one generation step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackGradients {
    pub adv: GradientMap,
    pub l2: GradientMap,
    pub seg: Option<GradientMap>,
}

impl AttackGradients {
    pub fn iter(&self) -> impl Iterator<Item = &GradientMap> {
        [Some(&self.adv), Some(&self.l2), self.seg.as_ref()]
            .into_iter()
            .flatten()
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn check_labels(origin: Domain, labels: Option<&LabelMap>) -> Result<()> {
    match (origin, labels) {
        (Domain::Source, None) => Err(Error::contract("source features need labels")),
        (Domain::Target, Some(_)) => Err(Error::contract(
            "labels given for target features, which have none",
        )),
        _ => Ok(()),
    }
}

/// Gradients of every attack objective with respect to `f_star`, taken
/// through `F` (and `D`) with all network parameters held constant.
pub fn attack_gradients(
    f_star: &FeatureMap,
    f: &FeatureMap,
    ctx: AttackContext<'_>,
    labels: Option<&LabelMap>,
) -> Result<AttackGradients> {
    check_labels(f_star.origin, labels)?;
    if f_star.origin != f.origin || f_star.layer != f.layer {
        return Err(Error::contract("f_star and f must share origin and layer"));
    }
    f_star.values.ensure_same_shape(&f.values)?;

    let mut tape = Tape::new();
    let fp = ctx.model.bind(&mut tape, false, false);
    let dp = ctx.disc.bind(&mut tape, false);
    let x = tape.leaf(f_star.values.clone());
    let probs = ctx.model.f_forward(&mut tape, &fp, x)?;
    let d = ctx.disc.forward(&mut tape, &dp, probs)?;
    let adv_loss = losses::domain_term_node(&mut tape, d, f_star.origin.label())?;
    let adv = math::grad(&tape, adv_loss, x, Objective::Adv)?;
    let seg = match labels {
        Some(y) => {
            let seg_loss = losses::lovasz_softmax_node(&mut tape, probs, y)?;
            Some(math::grad(&tape, seg_loss, x, Objective::Seg)?)
        }
        None => None,
    };
    let l2_loss = losses::feature_l2_node(&mut tape, x, &f.values)?;
    let l2 = math::grad(&tape, l2_loss, x, Objective::L2)?;
    Ok(AttackGradients { adv, l2, seg })
}

/// Sign-preposed combination:
/// `ε₁·sign(∇adv) − ε₂·sign(∇L2) + ε₃·sign(∇seg)`.
pub fn sign_preposed_delta(
    adv: &Tensor,
    l2: &Tensor,
    seg: Option<&Tensor>,
    eps: Epsilons,
) -> Result<Tensor> {
    let mut delta = adv.zip_map(l2, |a, l| eps.adv * math::sign(a) - eps.l2 * math::sign(l))?;
    if let Some(s) = seg {
        delta = delta.zip_map(s, |d, s| d + eps.seg * math::sign(s))?;
    }
    Ok(delta)
}

/// Plain I-FGSM: `ε·sign(β₁∇seg − β₂∇L2 + β₃∇adv)`.
pub fn i_fgsm_delta(
    adv: &Tensor,
    l2: &Tensor,
    seg: Option<&Tensor>,
    epsilon: f64,
    beta: [f64; 3],
) -> Result<Tensor> {
    let mut mix = adv.zip_map(l2, |a, l| beta[2] * a - beta[1] * l)?;
    if let Some(s) = seg {
        mix = mix.zip_map(s, |m, s| m + beta[0] * s)?;
    }
    Ok(mix.map(|v| epsilon * math::sign(v)))
}

fn step_with(f_k: &FeatureMap, grads: &AttackGradients, eps: Epsilons) -> Result<FeatureMap> {
    let delta = sign_preposed_delta(
        &grads.adv.values,
        &grads.l2.values,
        grads.seg.as_ref().map(|g| &g.values),
        eps,
    )?;
    f_k.with_values(f_k.values.add(&delta)?)
}

/// One sign-preposed step on target features.
pub fn i_fgspm_step_target(
    f_k: &FeatureMap,
    f: &FeatureMap,
    ctx: AttackContext<'_>,
    eps: Epsilons,
) -> Result<FeatureMap> {
    if f_k.origin != Domain::Target {
        return Err(Error::contract("i_fgspm_step_target needs target features"));
    }
    let grads = attack_gradients(f_k, f, ctx, None)?;
    step_with(f_k, &grads, eps)
}

/// One sign-preposed step on labeled source features.
pub fn i_fgspm_step_source(
    f_k: &FeatureMap,
    f: &FeatureMap,
    labels: &LabelMap,
    ctx: AttackContext<'_>,
    eps: Epsilons,
) -> Result<FeatureMap> {
    if f_k.origin != Domain::Source {
        return Err(Error::contract("i_fgspm_step_source needs source features"));
    }
    let grads = attack_gradients(f_k, f, ctx, Some(labels))?;
    step_with(f_k, &grads, eps)
}

/// Log-intensity of one objective's gradient at one generation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientIntensityRecord {
    /// Training iteration the generation belongs to.
    pub iter: usize,
    /// Generation step within that call.
    pub k: usize,
    pub objective: Objective,
    pub log10_l1_norm: f64,
}

/// Perturbs `f` with the configured method. Returns the adversarial copy
/// and one intensity record per objective and generation step.
pub fn generate_adversarial(
    f: &FeatureMap,
    cfg: &PerturbConfig,
    ctx: AttackContext<'_>,
    labels: Option<&LabelMap>,
    iter: usize,
) -> Result<(FeatureMap, Vec<GradientIntensityRecord>)> {
    cfg.validate()?;
    check_labels(f.origin, labels)?;
    let steps = match cfg.method {
        AttackMethod::None => return Ok((f.clone(), Vec::new())),
        AttackMethod::Fgspm => 1,
        _ => cfg.k,
    };
    let eps = cfg.epsilons();
    let mut records = Vec::new();
    let mut current = f.clone();
    let mut momentum: Option<[Tensor; 3]> = None;
    for k in 0..steps {
        let grads = attack_gradients(&current, f, ctx, labels)?;
        records.extend(grads.iter().map(|g| GradientIntensityRecord {
            iter,
            k,
            objective: g.objective,
            log10_l1_norm: math::log_intensity(&g.values),
        }));
        let seg = grads.seg.as_ref().map(|g| &g.values);
        let delta = match cfg.method {
            AttackMethod::Fgspm | AttackMethod::IFgspm => sign_preposed_delta(
                &grads.adv.values,
                &grads.l2.values,
                seg,
                eps,
            )?,
            AttackMethod::IFgsm => i_fgsm_delta(
                &grads.adv.values,
                &grads.l2.values,
                seg,
                cfg.ifgsm_epsilon(),
                cfg.beta,
            )?,
            AttackMethod::MiFgspm => {
                let zero = || Tensor::zeros(f.values.shape());
                let acc = momentum.get_or_insert_with(|| [zero(), zero(), zero()]);
                let fresh = [Some(&grads.adv.values), Some(&grads.l2.values), seg];
                for (buf, g) in acc.iter_mut().zip(fresh) {
                    *buf = buf.scale(cfg.momentum);
                    if let Some(g) = g {
                        let l1 = g.norm_l1();
                        if l1 > 0.0 {
                            buf.axpy(1.0 / l1, g);
                        }
                    }
                }
                sign_preposed_delta(&acc[0], &acc[1], seg.map(|_| &acc[2]), eps)?
            }
            AttackMethod::None => unreachable!("handled above"),
        };
        current = current.with_values(current.values.add(&delta)?)?;
    }
    Ok((current, records))
}

pub const INTENSITY_CSV_HEADER: &str = "iter,k,objective,log10_l1_norm";

pub fn write_intensity_csv(path: &Path, records: &[GradientIntensityRecord]) -> Result<()> {
    let mut out = String::from(INTENSITY_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.iter, r.k, r.objective, r.log10_l1_norm
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

pub fn read_intensity_csv(path: &Path) -> Result<Vec<GradientIntensityRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == INTENSITY_CSV_HEADER => {}
        _ => return Err(Error::format(path, "missing gradient-intensity header")),
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format(path, format!("malformed row {}: `{line}`", i + 2));
        let fields: Vec<&str> = line.split(',').collect();
        let [iter, k, obj, v] = fields.as_slice() else {
            return Err(bad());
        };
        records.push(GradientIntensityRecord {
            iter: iter.parse().map_err(|_| bad())?,
            k: k.parse().map_err(|_| bad())?,
            objective: Objective::parse(obj).ok_or_else(bad)?,
            log10_l1_norm: v.parse().map_err(|_| bad())?,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (SegmentationModel, Discriminator, FeatureMap, FeatureMap, LabelMap) {
        let cfg = ModelConfig::default();
        let model = SegmentationModel::new(&cfg, 3, seed).unwrap();
        let disc = Discriminator::new(&cfg, 3, seed + 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..2 * 3 * 32 * 32).map(|_| rng.gen()).collect();
        let x = Tensor::new(&[2, 3, 32, 32], x).unwrap();
        let fs = model.extract_features(&x, Domain::Source).unwrap();
        let ft = model.extract_features(&x, Domain::Target).unwrap();
        let y: Vec<u8> = (0..2 * 32 * 32).map(|_| rng.gen_range(0..3)).collect();
        let y = LabelMap::new(2, 32, 32, y).unwrap();
        (model, disc, fs, ft, y)
    }

    #[test]
    fn layer_names() {
        assert_eq!("pixel".parse::<Layer>().unwrap(), Layer::Pixel);
        assert_eq!("block3".parse::<Layer>().unwrap(), Layer::Block(3));
        assert!("block0".parse::<Layer>().is_err());
        assert!("deep".parse::<Layer>().is_err());
        assert_eq!(Layer::Block(4).to_string(), "block4");
    }

    #[test]
    fn method_names() {
        for m in AttackMethod::ALL {
            assert_eq!(m.name().parse::<AttackMethod>().unwrap(), m);
        }
        assert!("PGD".parse::<AttackMethod>().is_err());
    }

    #[test]
    fn target_yields_two_maps_and_zero_l2_at_start() {
        let (model, disc, _, ft, _) = setup(3);
        let ctx = AttackContext { model: &model, disc: &disc };
        let g = attack_gradients(&ft, &ft, ctx, None).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.l2.values, Tensor::zeros(ft.values().shape()));
    }

    #[test]
    fn label_contract() {
        let (model, disc, fs, ft, y) = setup(4);
        let ctx = AttackContext { model: &model, disc: &disc };
        assert!(attack_gradients(&ft, &ft, ctx, Some(&y)).is_err());
        assert!(attack_gradients(&fs, &fs, ctx, None).is_err());
        assert_eq!(attack_gradients(&fs, &fs, ctx, Some(&y)).unwrap().len(), 3);
        let eps = PerturbConfig::default().epsilons();
        assert!(i_fgspm_step_target(&fs, &fs, ctx, eps).is_err());
        assert!(i_fgspm_step_source(&ft, &ft, &y, ctx, eps).is_err());
    }

    #[test]
    fn zero_gradients_leave_features_unchanged() {
        let z = Tensor::zeros(&[1, 2, 2, 2]);
        let eps = PerturbConfig::default().epsilons();
        assert_eq!(sign_preposed_delta(&z, &z, Some(&z), eps).unwrap(), z);
        assert_eq!(i_fgsm_delta(&z, &z, Some(&z), 0.023, [1.0; 3]).unwrap(), z);
    }

    #[test]
    fn positive_adv_gradient_saturates_to_eps1() {
        let adv = Tensor::full(&[1, 1, 2, 2], 1e-9);
        let z = Tensor::zeros(&[1, 1, 2, 2]);
        let d = sign_preposed_delta(&adv, &z, None, PerturbConfig::default().epsilons()).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.01));
    }

    #[test]
    fn none_and_k0_are_identity() {
        let (model, disc, fs, ft, y) = setup(5);
        let ctx = AttackContext { model: &model, disc: &disc };
        let none = PerturbConfig {
            method: AttackMethod::None,
            ..Default::default()
        };
        let (out, rec) = generate_adversarial(&fs, &none, ctx, Some(&y), 0).unwrap();
        assert_eq!(out, fs);
        assert!(rec.is_empty());
        let k0 = PerturbConfig {
            method: AttackMethod::IFgsm,
            k: 0,
            ..Default::default()
        };
        assert_eq!(generate_adversarial(&ft, &k0, ctx, None, 0).unwrap().0, ft);
        let zero_eps = PerturbConfig {
            epsilon: [0.0; 3],
            ..Default::default()
        };
        for method in AttackMethod::ALL {
            let cfg = PerturbConfig { method, ..zero_eps.clone() };
            assert_eq!(generate_adversarial(&ft, &cfg, ctx, None, 0).unwrap().0, ft);
        }
    }

    #[test]
    fn fgspm_is_one_step_of_ifgspm() {
        let (model, disc, fs, _, y) = setup(6);
        let ctx = AttackContext { model: &model, disc: &disc };
        let fgspm = PerturbConfig {
            method: AttackMethod::Fgspm,
            ..Default::default()
        };
        let one = PerturbConfig { k: 1, ..Default::default() };
        let a = generate_adversarial(&fs, &fgspm, ctx, Some(&y), 0).unwrap();
        let b = generate_adversarial(&fs, &one, ctx, Some(&y), 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn origin_preserved_and_params_untouched() {
        let (model, disc, fs, ft, y) = setup(7);
        let (mc, dc) = (model.checksum(), disc.checksum());
        let ctx = AttackContext { model: &model, disc: &disc };
        for method in AttackMethod::ALL {
            let cfg = PerturbConfig { method, ..Default::default() };
            let (s, rs) = generate_adversarial(&fs, &cfg, ctx, Some(&y), 0).unwrap();
            let (t, _) = generate_adversarial(&ft, &cfg, ctx, None, 0).unwrap();
            assert_eq!(s.origin(), Domain::Source);
            assert_eq!(t.origin(), Domain::Target);
            let bound = match method {
                AttackMethod::None => 0.0,
                AttackMethod::Fgspm => 0.023,
                _ => 3.0 * 0.023,
            };
            assert!(s.values().sub(fs.values()).unwrap().max_abs() <= bound + 1e-12);
            let steps = match method {
                AttackMethod::None => 0,
                AttackMethod::Fgspm => 1,
                _ => 3,
            };
            assert_eq!(rs.len(), steps * 3);
        }
        assert_eq!(model.checksum(), mc);
        assert_eq!(disc.checksum(), dc);
    }

    #[test]
    fn intensity_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.csv");
        let recs = vec![
            GradientIntensityRecord {
                iter: 3,
                k: 1,
                objective: Objective::Seg,
                log10_l1_norm: -2.25,
            },
            GradientIntensityRecord {
                iter: 3,
                k: 2,
                objective: Objective::L2,
                log10_l1_norm: 1.0 / 3.0,
            },
        ];
        write_intensity_csv(&path, &recs).unwrap();
        assert_eq!(read_intensity_csv(&path).unwrap(), recs);
    }
}
