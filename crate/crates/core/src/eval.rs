//! Confusion matrices, IoU, tail-class reports, ablation grids and the
//! gradient-intensity plot.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{LabelMap, IGNORE_LABEL};
use crate::math::Objective;
use crate::models::{ModelConfig, SegmentationModel};
use crate::perturb::{write_intensity_csv, AttackMethod, GradientIntensityRecord, Layer, PerturbConfig};
use crate::train::{self, Baseline, Components, TrainConfig, TrainState};

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every valid pixel of `pred` against `gt`.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::contract(format!(
                "prediction {:?} and ground truth {:?} differ in shape",
                pred.dims(),
                gt.dims()
            )));
        }
        for (&p, &g) in pred.values().iter().zip(gt.values()) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(Error::contract(format!(
                    "label out of range for {} classes",
                    self.classes
                )));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Elementwise sum with a matrix over another shard.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::contract("cannot merge matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

/// Per-class IoU (`None` where the class has an empty union) and their mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

impl IouReport {
    /// Mean IoU over the given classes that are evaluable.
    pub fn subset_mean(&self, classes: &[usize]) -> Option<f64> {
        let v: Vec<f64> = classes.iter().filter_map(|&c| self.per_class[c]).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

pub fn iou(cm: &ConfusionMatrix) -> Result<IouReport> {
    let c = cm.classes;
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.get(k, k);
            let fp: u64 = (0..c).filter(|&g| g != k).map(|g| cm.get(g, k)).sum();
            let fn_: u64 = (0..c).filter(|&p| p != k).map(|p| cm.get(k, p)).sum();
            let union = tp + fp + fn_;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::NoEvaluableClasses);
    }
    let miou = valid.iter().sum::<f64>() / valid.len() as f64;
    Ok(IouReport { per_class, miou })
}

/// Confusion matrix of the model's argmax predictions over a dataset.
pub fn evaluate(model: &SegmentationModel, ds: &Dataset) -> Result<ConfusionMatrix> {
    const CHUNK: usize = 8;
    let mut cm = ConfusionMatrix::new(model.classes());
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(CHUNK) {
        let (x, y) = ds.batch(chunk)?;
        let pred = model.predict(&x)?.argmax();
        cm.accumulate(&pred, &y)?;
    }
    Ok(cm)
}

/// IoU of the given tail classes for one configuration, with deltas against
/// the reference configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub config: String,
    pub iou: Vec<Option<f64>>,
    pub delta: Vec<Option<f64>>,
    pub tail_mean: Option<f64>,
    pub tail_mean_delta: Option<f64>,
}

pub fn tail_report(
    results: &[(String, IouReport)],
    class_names: &[String],
    tail_classes: &[String],
    reference: &str,
) -> Result<Vec<TailRow>> {
    let idx: Vec<usize> = tail_classes
        .iter()
        .map(|n| {
            class_names
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| Error::contract(format!("unknown class `{n}`")))
        })
        .collect::<Result<_>>()?;
    let reference = &results
        .iter()
        .find(|(name, _)| name == reference)
        .ok_or_else(|| Error::contract(format!("unknown reference config `{reference}`")))?
        .1;
    let ref_mean = reference.subset_mean(&idx);
    Ok(results
        .iter()
        .map(|(name, r)| {
            let iou: Vec<Option<f64>> = idx.iter().map(|&c| r.per_class[c]).collect();
            let delta = idx
                .iter()
                .map(|&c| Some(r.per_class[c]? - reference.per_class[c]?))
                .collect();
            let tail_mean = r.subset_mean(&idx);
            TailRow {
                config: name.clone(),
                iou,
                delta,
                tail_mean,
                tail_mean_delta: tail_mean.zip(ref_mean).map(|(a, b)| a - b),
            }
        })
        .collect())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{:.4}", x))
}

pub fn format_tail_report(rows: &[TailRow], tail_classes: &[String]) -> String {
    let mut out = format!("{:<28}", "config");
    for n in tail_classes {
        let _ = write!(out, " {:>10} {:>10}", n, format!("d_{n}"));
    }
    let _ = writeln!(out, " {:>10} {:>10}", "tail_mean", "d_tail");
    for r in rows {
        let _ = write!(out, "{:<28}", r.config);
        for (i, d) in r.iou.iter().zip(&r.delta) {
            let _ = write!(out, " {:>10} {:>10}", fmt_opt(*i), fmt_opt(*d));
        }
        let _ = writeln!(
            out,
            " {:>10} {:>10}",
            fmt_opt(r.tail_mean),
            fmt_opt(r.tail_mean_delta)
        );
    }
    out
}

/// One configuration of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub name: String,
    /// A baseline other than `none` ignores the remaining fields.
    #[serde(default = "default_baseline")]
    pub baseline: Baseline,
    #[serde(default)]
    pub components: Components,
    #[serde(default = "default_method")]
    pub method: AttackMethod,
    #[serde(default = "default_layer")]
    pub layer: Layer,
    /// Start adaptation from the alignment baseline instead of the
    /// source-only model.
    #[serde(default)]
    pub asn_base: bool,
}

fn default_baseline() -> Baseline {
    Baseline::None
}

fn default_method() -> AttackMethod {
    PerturbConfig::default().method
}

fn default_layer() -> Layer {
    PerturbConfig::default().layer
}

impl Variant {
    pub fn method(name: &str, components: Components) -> Self {
        Self {
            name: name.to_owned(),
            baseline: Baseline::None,
            components,
            method: default_method(),
            layer: default_layer(),
            asn_base: false,
        }
    }

    pub fn baseline(name: &str, baseline: Baseline) -> Self {
        Self {
            baseline,
            ..Self::method(name, Components::default())
        }
    }

    /// Rows of the component ablation: all eight toggle combinations.
    pub fn component_grid() -> Vec<Variant> {
        Components::grid()
            .into_iter()
            .map(|c| Variant::method(&c.label(), c))
            .collect()
    }

    /// Rows of the attack-method comparison.
    pub fn method_grid() -> Vec<Variant> {
        AttackMethod::ALL
            .into_iter()
            .map(|m| {
                let components = Components {
                    perturbation: m != AttackMethod::None,
                    ..Components::default()
                };
                Variant {
                    method: m,
                    ..Variant::method(m.name(), components)
                }
            })
            .collect()
    }

    /// Rows of the perturbing-layer comparison for a `depth`-block encoder.
    pub fn layer_grid(depth: usize) -> Vec<Variant> {
        std::iter::once(Layer::Pixel)
            .chain((1..=depth).map(Layer::Block))
            .map(|l| Variant {
                layer: l,
                ..Variant::method(&l.to_string(), Components::default())
            })
            .collect()
    }
}

/// Source data, unlabeled target training data and labeled target
/// evaluation data.
pub struct Benchmark {
    pub source: Dataset,
    pub target: Dataset,
    pub target_eval: Dataset,
}

/// Pretrained states keyed by seed, shared by every variant of a grid.
#[derive(Default)]
pub struct PretrainCache {
    states: BTreeMap<u64, TrainState>,
    asn: BTreeMap<u64, TrainState>,
}

impl PretrainCache {
    fn source_only(
        &mut self,
        bench: &Benchmark,
        model: &ModelConfig,
        perturb: &PerturbConfig,
        train: &TrainConfig,
    ) -> Result<TrainState> {
        if let Some(s) = self.states.get(&train.seed) {
            return Ok(s.clone());
        }
        let s = train::pretrain_source(&bench.source, model, perturb, train)?;
        self.states.insert(train.seed, s.clone());
        Ok(s)
    }

    fn asn(
        &mut self,
        bench: &Benchmark,
        model: &ModelConfig,
        perturb: &PerturbConfig,
        train: &TrainConfig,
    ) -> Result<TrainState> {
        if let Some(s) = self.asn.get(&train.seed) {
            return Ok(s.clone());
        }
        let base = self.source_only(bench, model, perturb, train)?;
        let cfg = TrainConfig {
            baseline: Baseline::Asn,
            ..train.clone()
        };
        let s = train::train_asn_baseline(base, &bench.source, &bench.target, &cfg, train.max_iter)?;
        self.asn.insert(train.seed, s.clone());
        Ok(s)
    }
}

/// Trains one variant for one seed and returns its final state.
///
/// Baselines start from the source-only model; the alignment baselines then
/// train for `max_iter` iterations so every adapted row sees the same number
/// of updates.
pub fn train_variant(
    variant: &Variant,
    bench: &Benchmark,
    model: &ModelConfig,
    perturb: &PerturbConfig,
    train: &TrainConfig,
    cache: &mut PretrainCache,
) -> Result<TrainState> {
    let perturb = PerturbConfig {
        method: variant.method,
        layer: variant.layer,
        ..perturb.clone()
    };
    let train = TrainConfig {
        components: variant.components,
        baseline: variant.baseline,
        ..train.clone()
    };
    match variant.baseline {
        Baseline::SourceOnly => cache.source_only(bench, model, &perturb, &train),
        Baseline::Asn if train.asn_adv_weight > 0.0 => cache.asn(bench, model, &perturb, &train),
        Baseline::Asn | Baseline::AsnWeightedCe | Baseline::AsnLovasz => {
            let base = cache.source_only(bench, model, &perturb, &train)?;
            train::train_asn_baseline(base, &bench.source, &bench.target, &train, train.max_iter)
        }
        Baseline::None => {
            let base = if variant.asn_base {
                cache.asn(bench, model, &perturb, &train)?
            } else {
                cache.source_only(bench, model, &perturb, &train)?
            };
            train::adapt(base, &bench.source, &bench.target, &perturb, &train)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub variant: String,
    pub seed: u64,
    pub report: Option<IouReport>,
    pub tail_miou: Option<f64>,
    pub error: Option<String>,
}

/// Trains and evaluates every variant under every seed. Failures are
/// recorded in the row and the grid continues.
pub fn ablation_run(
    grid: &[Variant],
    bench: &Benchmark,
    model: &ModelConfig,
    perturb: &PerturbConfig,
    train: &TrainConfig,
    seeds: &[u64],
    tail_classes: &[usize],
) -> Vec<AblationResult> {
    let mut out = Vec::with_capacity(grid.len() * seeds.len());
    for &seed in seeds {
        let mut cache = PretrainCache::default();
        let train = TrainConfig {
            seed,
            ..train.clone()
        };
        for v in grid {
            let result = train_variant(v, bench, model, perturb, &train, &mut cache)
                .and_then(|s| iou(&evaluate(&s.model, &bench.target_eval)?));
            out.push(match result {
                Ok(report) => AblationResult {
                    variant: v.name.clone(),
                    seed,
                    tail_miou: report.subset_mean(tail_classes),
                    report: Some(report),
                    error: None,
                },
                Err(e) => AblationResult {
                    variant: v.name.clone(),
                    seed,
                    report: None,
                    tail_miou: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    out
}

pub fn ablation_csv(results: &[AblationResult], class_names: &[String]) -> String {
    let mut out = String::from("variant,seed");
    for n in class_names {
        let _ = write!(out, ",iou_{n}");
    }
    out.push_str(",miou,tail_miou,error\n");
    let num = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for r in results {
        let _ = write!(out, "{},{}", r.variant, r.seed);
        for c in 0..class_names.len() {
            let v = r.report.as_ref().and_then(|rep| rep.per_class[c]);
            let _ = write!(out, ",{}", num(v));
        }
        let _ = writeln!(
            out,
            ",{},{},{}",
            num(r.report.as_ref().map(|rep| rep.miou)),
            num(r.tail_miou),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        );
    }
    out
}

/// Aligned text table with one row per result and a per-variant mean block.
pub fn ablation_table(results: &[AblationResult], class_names: &[String]) -> String {
    let mut out = format!("{:<28} {:>5}", "variant", "seed");
    for n in class_names {
        let _ = write!(out, " {:>9}", n);
    }
    let _ = writeln!(out, " {:>9} {:>9}", "mIoU", "tail");
    let row = |out: &mut String, name: &str, seed: &str, ious: Vec<Option<f64>>, m: Option<f64>, t: Option<f64>| {
        let _ = write!(out, "{:<28} {:>5}", name, seed);
        for v in ious {
            let _ = write!(out, " {:>9}", fmt_opt(v));
        }
        let _ = writeln!(out, " {:>9} {:>9}", fmt_opt(m), fmt_opt(t));
    };
    for r in results {
        match &r.report {
            Some(rep) => row(&mut out, &r.variant, &r.seed.to_string(), rep.per_class.clone(), Some(rep.miou), r.tail_miou),
            None => {
                let _ = writeln!(out, "{:<28} {:>5} failed: {}", r.variant, r.seed, r.error.as_deref().unwrap_or(""));
            }
        }
    }
    let mut names: Vec<&str> = Vec::new();
    for r in results {
        if !names.contains(&r.variant.as_str()) {
            names.push(&r.variant);
        }
    }
    let _ = writeln!(out, "\nmean over seeds");
    for n in names {
        let ok: Vec<&AblationResult> = results
            .iter()
            .filter(|r| r.variant == n && r.report.is_some())
            .collect();
        if ok.is_empty() {
            continue;
        }
        let mean = |f: &dyn Fn(&AblationResult) -> Option<f64>| {
            let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let ious = (0..class_names.len())
            .map(|c| mean(&|r| r.report.as_ref().and_then(|rep| rep.per_class[c])))
            .collect();
        row(
            &mut out,
            n,
            &ok.len().to_string(),
            ious,
            mean(&|r| r.report.as_ref().map(|rep| rep.miou)),
            mean(&|r| r.tail_miou),
        );
    }
    out
}

/// Mean mIoU per variant over the successful rows.
pub fn mean_miou(results: &[AblationResult], variant: &str) -> Option<f64> {
    let v: Vec<f64> = results
        .iter()
        .filter(|r| r.variant == variant)
        .filter_map(|r| r.report.as_ref().map(|rep| rep.miou))
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Writes `gradient_intensity.csv` and `gradient_intensity.svg` into `dir`:
/// one curve per objective over the sequence of generation steps.
pub fn plot_gradient_intensity(records: &[GradientIntensityRecord], dir: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::contract("no gradient-intensity records to plot"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_intensity_csv(&dir.join("gradient_intensity.csv"), records)?;

    let steps = records.iter().map(|r| r.k).max().unwrap_or(0) + 1;
    let mut series: BTreeMap<&'static str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        let x = (r.iter * steps + r.k) as f64;
        series.entry(r.objective.name()).or_default().push((x, r.log10_l1_norm));
    }
    let (xmin, xmax) = records
        .iter()
        .map(|r| (r.iter * steps + r.k) as f64)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (ymin, ymax) = records
        .iter()
        .map(|r| r.log10_l1_norm)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    let pad = ((ymax - ymin) * 0.05).max(0.5);

    let path = dir.join("gradient_intensity.svg");
    let plot_err = |e: String| Error::format(&path, e);
    {
        let root = SVGBackend::new(&path, (800, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| plot_err(e.to_string()))?;
        let mut chart = ChartBuilder::on(&root)
            .caption("gradient log-intensity", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(36)
            .y_label_area_size(48)
            .build_cartesian_2d(xmin..xmax.max(xmin + 1.0), (ymin - pad)..(ymax + pad))
            .map_err(|e| plot_err(e.to_string()))?;
        chart
            .configure_mesh()
            .x_desc("generation step")
            .y_desc("log10 L1 norm")
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        for (i, o) in Objective::ALL.iter().enumerate() {
            let Some(points) = series.get(o.name()) else { continue };
            let color = Palette99::pick(i).to_rgba();
            chart
                .draw_series(LineSeries::new(points.iter().copied(), color.stroke_width(2)))
                .map_err(|e| plot_err(e.to_string()))?
                .label(o.name())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE.mix(0.8))
            .draw()
            .map_err(|e| plot_err(e.to_string()))?;
        root.present().map_err(|e| plot_err(e.to_string()))?;
    }
    Ok(())
}
