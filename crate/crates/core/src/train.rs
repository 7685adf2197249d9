//! Source pretraining, the alternating perturb-and-train adaptation loop and
//! the output-space alignment baseline.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{self, DomainLabel, LabelMap, TradeOffs};
use crate::math::{Tape, Tensor, Var};
use crate::models::{Discriminator, ModelConfig, SegmentationModel};
use crate::perturb::{
    generate_adversarial, AttackContext, Domain, FeatureMap, GradientIntensityRecord,
    PerturbConfig,
};

/// `base · (1 − iter/max_iter)^power`, zero once `iter ≥ max_iter`.
pub fn poly_lr(base: f64, iter: usize, max_iter: usize, power: f64) -> f64 {
    if iter >= max_iter {
        return 0.0;
    }
    base * (1.0 - iter as f64 / max_iter as f64).powf(power)
}

/// SGD with momentum and L2 weight decay, PyTorch update order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, n_params: usize) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![None; n_params],
        }
    }

    /// Updates every parameter that received a gradient; the rest are left
    /// bitwise untouched.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g else { continue };
            let v = v.get_or_insert_with(|| vec![0.0; g.len()]);
            for ((w, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = gi + self.weight_decay * *w;
                *vi = self.momentum * *vi + d;
                *w -= lr * *vi;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, params: &[&Tensor]) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = g else { continue };
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// The method itself.
    None,
    SourceOnly,
    Asn,
    AsnWeightedCe,
    AsnLovasz,
}

impl Baseline {
    pub const ALL: [Baseline; 5] = [
        Baseline::None,
        Baseline::SourceOnly,
        Baseline::Asn,
        Baseline::AsnWeightedCe,
        Baseline::AsnLovasz,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::None => "none",
            Baseline::SourceOnly => "source_only",
            Baseline::Asn => "asn",
            Baseline::AsnWeightedCe => "asn_weighted_ce",
            Baseline::AsnLovasz => "asn_lovasz",
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Baseline {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown baseline `{s}`")))
    }
}

/// On/off switches for the three parts of the adaptation objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    pub perturbation: bool,
    /// Lovász-Softmax segmentation terms; cross entropy when off.
    pub lovasz: bool,
    pub entropy: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            perturbation: true,
            lovasz: true,
            entropy: true,
        }
    }
}

impl Components {
    pub fn any(self) -> bool {
        self.perturbation || self.lovasz || self.entropy
    }

    /// All eight on/off combinations, perturbation varying slowest.
    pub fn grid() -> Vec<Components> {
        (0..8)
            .map(|i| Components {
                perturbation: i & 4 != 0,
                lovasz: i & 2 != 0,
                entropy: i & 1 != 0,
            })
            .collect()
    }

    pub fn label(self) -> String {
        let mark = |b: bool| if b { '+' } else { '-' };
        format!(
            "{}perturb {}lovasz {}entropy",
            mark(self.perturbation),
            mark(self.lovasz),
            mark(self.entropy)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// `[α₁, α₂, α₃]`: consistency, clean-target entropy and perturbed-target
    /// entropy weights.
    pub alpha: [f64; 3],
    /// Base learning rate of `G` and `F` (SGD).
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Base learning rate of `D` (Adam).
    pub disc_lr: f64,
    pub disc_betas: [f64; 2],
    pub poly_power: f64,
    /// Source pretraining iterations.
    pub pretrain_iters: usize,
    /// Adaptation iterations.
    pub max_iter: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub components: Components,
    pub baseline: Baseline,
    /// Weight of the generator confusion term in the alignment baseline.
    pub asn_adv_weight: f64,
    /// Add Lovász-Softmax to the cross entropy during source pretraining.
    pub pretrain_lovasz: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: [0.2, 0.002, 0.0005],
            lr: 2.5e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            disc_lr: 1e-4,
            disc_betas: [0.9, 0.99],
            poly_power: 0.9,
            pretrain_iters: 2000,
            max_iter: 5000,
            batch_size: 4,
            seed: 0,
            components: Components::default(),
            baseline: Baseline::None,
            asn_adv_weight: 0.001,
            pretrain_lovasz: false,
        }
    }
}

impl TrainConfig {
    pub fn trade_offs(&self) -> TradeOffs {
        TradeOffs {
            consistency: self.alpha[0],
            entropy_clean: self.alpha[1],
            entropy_perturbed: self.alpha[2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let nonneg = self
            .alpha
            .iter()
            .chain([&self.lr, &self.disc_lr, &self.weight_decay, &self.asn_adv_weight]);
        if nonneg.into_iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(
                "weights and learning rates must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One logged scalar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: usize,
    pub metric_name: String,
    pub value: f64,
}

pub const METRICS_CSV_HEADER: &str = "iter,metric_name,value";

pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.iter, r.metric_name, r.value));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    match lines.next() {
        Some(Ok(h)) if h.trim() == METRICS_CSV_HEADER => {}
        _ => return Err(Error::format(path, "missing metrics header")),
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = || Error::format(path, format!("malformed row `{line}`"));
        let mut parts = line.splitn(3, ',');
        let (Some(i), Some(n), Some(v)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad());
        };
        out.push(MetricsRecord {
            iter: i.parse().map_err(|_| bad())?,
            metric_name: n.to_owned(),
            value: v.parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Adapt,
    Asn,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub phase: Phase,
    pub model: SegmentationModel,
    pub disc: Discriminator,
    pub sgd: Sgd,
    pub adam: Adam,
    /// Completed iterations of the current phase.
    pub iter: usize,
    pub rng: ChaCha8Rng,
    pub metrics: Vec<MetricsRecord>,
    pub intensities: Vec<GradientIntensityRecord>,
}

impl TrainState {
    /// Freshly initialized networks for `classes` classes. All randomness
    /// derives from `seed`.
    pub fn init(
        model_cfg: &ModelConfig,
        perturb: &PerturbConfig,
        train: &TrainConfig,
        classes: usize,
    ) -> Result<Self> {
        let model = SegmentationModel::new(model_cfg, classes, train.seed.wrapping_mul(3) + 1)?
            .with_split(perturb.layer)?;
        let disc = Discriminator::new(model_cfg, classes, train.seed.wrapping_mul(3) + 2)?;
        let n = model.params().len();
        let adam = Adam::new(train.disc_betas[0], train.disc_betas[1], &disc.params());
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        rng.set_stream(1);
        Ok(Self {
            phase: Phase::Pretrain,
            model,
            disc,
            sgd: Sgd::new(train.momentum, train.weight_decay, n),
            adam,
            iter: 0,
            rng,
            metrics: Vec::new(),
            intensities: Vec::new(),
        })
    }

    fn log(&mut self, name: &str, value: f64) {
        self.metrics.push(MetricsRecord {
            iter: self.iter,
            metric_name: name.to_owned(),
            value,
        });
    }

    fn sample(&mut self, ds: &Dataset, batch: usize) -> Result<(Tensor, LabelMap)> {
        let idx: Vec<usize> = (0..batch).map(|_| self.rng.gen_range(0..ds.len())).collect();
        ds.batch(&idx)
    }

    /// Starts a new phase: resets the iteration counter, the optimizer
    /// states and the logs while keeping the networks.
    fn enter(&mut self, phase: Phase, train: &TrainConfig) {
        self.phase = phase;
        self.iter = 0;
        self.sgd = Sgd::new(train.momentum, train.weight_decay, self.model.params().len());
        self.adam = Adam::new(train.disc_betas[0], train.disc_betas[1], &self.disc.params());
        self.metrics.clear();
        self.intensities.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        rng.set_stream(match phase {
            Phase::Pretrain => 1,
            Phase::Adapt => 2,
            Phase::Asn => 3,
        });
        self.rng = rng;
    }
}

fn check_dataset(ds: &Dataset, what: &str, classes: usize) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::contract(format!("{what} dataset is empty")));
    }
    if ds.classes() != classes {
        return Err(Error::contract(format!(
            "{what} dataset has {} classes, the model {classes}",
            ds.classes()
        )));
    }
    Ok(())
}

/// Segmentation loss on a probability node: Lovász-Softmax or cross entropy.
fn seg_node(tape: &mut Tape, p: Var, y: &LabelMap, lovasz: bool) -> Result<Var> {
    if lovasz {
        losses::lovasz_softmax_node(tape, p, y)
    } else {
        losses::cross_entropy_node(tape, p, y)
    }
}

/// Step 1: trains `G` and `F` on labeled source data with cross entropy
/// (plus Lovász-Softmax when `pretrain_lovasz` is set).
pub fn pretrain_source(
    ds_s: &Dataset,
    model_cfg: &ModelConfig,
    perturb: &PerturbConfig,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    cfg.validate()?;
    check_dataset(ds_s, "source", ds_s.classes())?;
    let mut state = TrainState::init(model_cfg, perturb, cfg, ds_s.classes())?;
    run_pretrain(&mut state, ds_s, cfg, None)?;
    Ok(state)
}

/// Continues a pretraining state up to `cfg.pretrain_iters`, or only up to
/// `until` when given.
pub fn run_pretrain(
    state: &mut TrainState,
    ds_s: &Dataset,
    cfg: &TrainConfig,
    until: Option<usize>,
) -> Result<()> {
    if state.phase != Phase::Pretrain {
        return Err(Error::contract("state is not in the pretraining phase"));
    }
    check_dataset(ds_s, "source", state.model.classes())?;
    let stop = until.map_or(cfg.pretrain_iters, |u| u.min(cfg.pretrain_iters));
    while state.iter < stop {
        let lr = poly_lr(cfg.lr, state.iter, cfg.pretrain_iters, cfg.poly_power);
        let (x, y) = state.sample(ds_s, cfg.batch_size)?;
        let mut tape = Tape::new();
        let params = state.model.bind(&mut tape, true, true);
        let xv = tape.constant(x);
        let f = state.model.g_forward(&mut tape, &params, xv)?;
        let p = state.model.f_forward(&mut tape, &params, f)?;
        let ce = losses::cross_entropy_node(&mut tape, p, &y)?;
        let mut terms = vec![(ce, 1.0)];
        if cfg.pretrain_lovasz {
            let lz = losses::lovasz_softmax_node(&mut tape, p, &y)?;
            state.log("lovasz_source", tape.value(lz).item());
            terms.push((lz, 1.0));
        }
        let total = tape.weighted_sum(&terms)?;
        let mut grads = tape.backward(total)?;
        let g = params.collect(&mut grads);
        state.log("ce_source", tape.value(ce).item());
        state.log("lr", lr);
        state.sgd.step(state.model.params_mut(), &g, lr);
        state.iter += 1;
    }
    Ok(())
}

/// Forward results of one adaptation batch through `F` with `F` trainable.
struct ClassifierStep {
    value: f64,
    parts: Vec<(&'static str, f64)>,
    grads: Vec<Option<Tensor>>,
}

/// The classifier objective on (perturbed) features, with `F` trainable and
/// everything else constant.
fn classifier_step(
    model: &SegmentationModel,
    f_s: &FeatureMap,
    f_s_star: &FeatureMap,
    y_s: &LabelMap,
    f_t: &FeatureMap,
    f_t_star: &FeatureMap,
    cfg: &TrainConfig,
) -> Result<ClassifierStep> {
    let c = cfg.components;
    let alpha = cfg.trade_offs();
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, false, true);
    let run = |tape: &mut Tape, f: &FeatureMap| -> Result<Var> {
        let v = tape.constant(f.values().clone());
        model.f_forward(tape, &params, v)
    };
    let p_s = run(&mut tape, f_s)?;
    let mut terms = Vec::new();
    let mut parts = Vec::new();
    let seg_s = seg_node(&mut tape, p_s, y_s, c.lovasz)?;
    terms.push((seg_s, 1.0));
    parts.push(("seg_source", tape.value(seg_s).item()));
    let p_t = if c.perturbation || c.entropy {
        Some(run(&mut tape, f_t)?)
    } else {
        None
    };
    if c.perturbation {
        let p_s_star = run(&mut tape, f_s_star)?;
        let p_t_star = run(&mut tape, f_t_star)?;
        let p_t = p_t.expect("computed above");
        let seg_ss = seg_node(&mut tape, p_s_star, y_s, c.lovasz)?;
        let cons = losses::consistency_node(&mut tape, p_t, p_t_star)?;
        terms.push((seg_ss, 1.0));
        terms.push((cons, alpha.consistency));
        parts.push(("seg_source_star", tape.value(seg_ss).item()));
        parts.push(("consistency", tape.value(cons).item()));
        if c.entropy {
            let ent_ts = losses::entropy_node(&mut tape, p_t_star)?;
            terms.push((ent_ts, alpha.entropy_perturbed));
            parts.push(("entropy_target_star", tape.value(ent_ts).item()));
        }
    }
    if c.entropy {
        let ent_t = losses::entropy_node(&mut tape, p_t.expect("computed above"))?;
        terms.push((ent_t, alpha.entropy_clean));
        parts.push(("entropy_target", tape.value(ent_t).item()));
    }
    let total = tape.weighted_sum(&terms)?;
    let value = tape.value(total).item();
    let mut grads = tape.backward(total)?;
    Ok(ClassifierStep {
        value,
        parts,
        grads: params.collect(&mut grads),
    })
}

/// Discriminator update on clean and perturbed predictions (inputs
/// detached); perturbed maps keep their origin's label.
fn discriminator_step(
    disc: &Discriminator,
    probs: [(&Tensor, DomainLabel); 4],
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let params = disc.bind(&mut tape, true);
    let mut terms = Vec::new();
    for (p, label) in probs {
        let pv = tape.constant(p.clone());
        let d = disc.forward(&mut tape, &params, pv)?;
        terms.push((losses::domain_term_node(&mut tape, d, label)?, 1.0));
    }
    let total = tape.weighted_sum(&terms)?;
    let value = tape.value(total).item();
    let mut grads = tape.backward(total)?;
    Ok((value, params.collect(&mut grads)))
}

/// Steps 2 and 3, alternated once per batch: perturb the frozen-`G`
/// features of a source and a target batch, update `F` on the classifier
/// objective, then update `D` on clean and perturbed predictions.
///
/// Consumes a pretraining state. With every component off the networks are
/// returned unchanged.
pub fn adapt(
    mut state: TrainState,
    ds_s: &Dataset,
    ds_t: &Dataset,
    perturb: &PerturbConfig,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    begin_adapt(&mut state, perturb, cfg)?;
    continue_adapt(&mut state, ds_s, ds_t, perturb, cfg, None)?;
    Ok(state)
}

/// Starts the adaptation phase on a pretraining state without running any
/// iteration.
pub fn begin_adapt(state: &mut TrainState, perturb: &PerturbConfig, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    perturb.validate()?;
    if state.phase == Phase::Adapt {
        return Err(Error::contract("state is already adapting"));
    }
    state.model.set_split(perturb.layer)?;
    state.model.set_frozen(true);
    state.enter(Phase::Adapt, cfg);
    Ok(())
}

/// Runs adaptation iterations until `cfg.max_iter`, or only up to `until`
/// when given.
pub fn continue_adapt(
    state: &mut TrainState,
    ds_s: &Dataset,
    ds_t: &Dataset,
    perturb: &PerturbConfig,
    cfg: &TrainConfig,
    until: Option<usize>,
) -> Result<()> {
    let classes = state.model.classes();
    check_dataset(ds_s, "source", classes)?;
    check_dataset(ds_t, "target", classes)?;
    if state.phase != Phase::Adapt {
        return Err(Error::contract("state is not in the adaptation phase"));
    }
    if cfg.components.perturbation && !state.model.is_frozen() {
        return Err(Error::contract(
            "adaptation with perturbation requires a frozen feature extractor",
        ));
    }
    let stop = until.map_or(cfg.max_iter, |u| u.min(cfg.max_iter));
    if !cfg.components.any() {
        state.iter = state.iter.max(stop);
        return Ok(());
    }
    while state.iter < stop {
        let lr = poly_lr(cfg.lr, state.iter, cfg.max_iter, cfg.poly_power);
        let disc_lr = poly_lr(cfg.disc_lr, state.iter, cfg.max_iter, cfg.poly_power);
        let (x_s, y_s) = state.sample(ds_s, cfg.batch_size)?;
        let (x_t, _) = state.sample(ds_t, cfg.batch_size)?;
        let f_s = state.model.extract_features(&x_s, Domain::Source)?;
        let f_t = state.model.extract_features(&x_t, Domain::Target)?;

        let (f_s_star, f_t_star) = if cfg.components.perturbation {
            let ctx = AttackContext {
                model: &state.model,
                disc: &state.disc,
            };
            // Only the source generation is logged: it is the one where all
            // three objectives compete.
            let (s, records) = generate_adversarial(&f_s, perturb, ctx, Some(&y_s), state.iter)?;
            let (t, _) = generate_adversarial(&f_t, perturb, ctx, None, state.iter)?;
            state.intensities.extend(records);
            (s, t)
        } else {
            (f_s.clone(), f_t.clone())
        };

        let step = classifier_step(&state.model, &f_s, &f_s_star, &y_s, &f_t, &f_t_star, cfg)?;
        state.sgd.step(state.model.params_mut(), &step.grads, lr);
        for (name, v) in &step.parts {
            state.log(name, *v);
        }
        state.log("classifier_loss", step.value);

        if cfg.components.perturbation {
            let p = |f: &FeatureMap| state.model.classify(f).map(|p| p.into_tensor());
            let (ps, pt, pss, pts) = (p(&f_s)?, p(&f_t)?, p(&f_s_star)?, p(&f_t_star)?);
            let (d_loss, d_grads) = discriminator_step(
                &state.disc,
                [
                    (&ps, DomainLabel::Source),
                    (&pt, DomainLabel::Target),
                    (&pss, DomainLabel::Source),
                    (&pts, DomainLabel::Target),
                ],
            )?;
            state.adam.step(state.disc.params_mut(), &d_grads, disc_lr);
            state.log("disc_loss", d_loss);
        }
        state.log("lr", lr);
        state.iter += 1;
    }
    Ok(())
}

/// Output-space alignment baseline: `G` and `F` minimize the source
/// segmentation loss plus `λ·(−mean log D(P_t))`, while `D` separates
/// source from target predictions. Trains from the state's current
/// networks for `iters` iterations.
pub fn train_asn_baseline(
    mut state: TrainState,
    ds_s: &Dataset,
    ds_t: &Dataset,
    cfg: &TrainConfig,
    iters: usize,
) -> Result<TrainState> {
    cfg.validate()?;
    let classes = state.model.classes();
    check_dataset(ds_s, "source", classes)?;
    check_dataset(ds_t, "target", classes)?;
    state.model.set_frozen(false);
    state.enter(Phase::Asn, cfg);
    let weights = match cfg.baseline {
        Baseline::AsnWeightedCe => Some(losses::inverse_frequency_weights(&ds_s.class_counts())),
        _ => None,
    };
    while state.iter < iters {
        let lr = poly_lr(cfg.lr, state.iter, iters, cfg.poly_power);
        let disc_lr = poly_lr(cfg.disc_lr, state.iter, iters, cfg.poly_power);
        let (x_s, y_s) = state.sample(ds_s, cfg.batch_size)?;
        let (x_t, _) = state.sample(ds_t, cfg.batch_size)?;

        let mut tape = Tape::new();
        let params = state.model.bind(&mut tape, true, true);
        let dparams = state.disc.bind(&mut tape, false);
        let xs = tape.constant(x_s);
        let xt = tape.constant(x_t);
        let fs = state.model.g_forward(&mut tape, &params, xs)?;
        let ps = state.model.f_forward(&mut tape, &params, fs)?;
        let ft = state.model.g_forward(&mut tape, &params, xt)?;
        let pt = state.model.f_forward(&mut tape, &params, ft)?;
        let seg = match (&weights, cfg.baseline) {
            (Some(w), _) => losses::weighted_cross_entropy_node(&mut tape, ps, &y_s, w)?,
            (None, Baseline::AsnLovasz) => {
                let ce = losses::cross_entropy_node(&mut tape, ps, &y_s)?;
                let lz = losses::lovasz_softmax_node(&mut tape, ps, &y_s)?;
                tape.weighted_sum(&[(ce, 1.0), (lz, 1.0)])?
            }
            (None, _) => losses::cross_entropy_node(&mut tape, ps, &y_s)?,
        };
        let mut terms = vec![(seg, 1.0)];
        let confusion = if cfg.asn_adv_weight > 0.0 {
            let dt = state.disc.forward(&mut tape, &dparams, pt)?;
            // Target predictions scored as source.
            let conf = losses::domain_term_node(&mut tape, dt, DomainLabel::Source)?;
            terms.push((conf, cfg.asn_adv_weight));
            Some(tape.value(conf).item())
        } else {
            None
        };
        let total = tape.weighted_sum(&terms)?;
        let mut grads = tape.backward(total)?;
        let g = params.collect(&mut grads);
        state.log("seg_source", tape.value(seg).item());
        if let Some(c) = confusion {
            state.log("confusion", c);
        }
        let ps_v = tape.value(ps).clone();
        let pt_v = tape.value(pt).clone();
        drop(tape);
        state.sgd.step(state.model.params_mut(), &g, lr);

        if cfg.asn_adv_weight > 0.0 {
            let mut tape = Tape::new();
            let dp = state.disc.bind(&mut tape, true);
            let a = tape.constant(ps_v);
            let b = tape.constant(pt_v);
            let da = state.disc.forward(&mut tape, &dp, a)?;
            let db = state.disc.forward(&mut tape, &dp, b)?;
            let l = losses::adversarial_loss_node(&mut tape, da, db)?;
            let mut grads = tape.backward(l)?;
            let g = dp.collect(&mut grads);
            state.log("disc_loss", tape.value(l).item());
            state.adam.step(state.disc.params_mut(), &g, disc_lr);
        }
        state.log("lr", lr);
        state.iter += 1;
    }
    Ok(state)
}
