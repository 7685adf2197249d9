//! Scalar objectives: supervised segmentation losses, the domain
//! discriminator loss, the feature-distance constraint, and the
//! consistency and entropy regularizers used when defending against
//! perturbed features.
//!
//! Every loss has a value form and a `*_grad` form returning the analytic
//! gradient with respect to its probability or feature inputs. The `*_node`
//! helpers record a loss on a [`Tape`] so it can be composed with model
//! forward passes.
//!
//! Probability tensors are `[n, c, h, w]`; label maps are `[n, h, w]`.

use crate::error::{Error, Result};
use crate::math::{Tape, Tensor, Var};

/// Label value excluded from every loss and metric.
pub const IGNORE_LABEL: u8 = 255;

/// Clamp applied to discriminator probabilities before any logarithm.
pub const DOMAIN_EPS: f64 = 1e-7;

/// Floor applied to probabilities inside the cross-entropy logarithm.
const CE_FLOOR: f64 = 1e-12;

/// Per-pixel class indices, `IGNORE_LABEL` for unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    n: usize,
    h: usize,
    w: usize,
    values: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, values: Vec<u8>) -> Result<Self> {
        if n * h * w != values.len() || n == 0 || h == 0 || w == 0 {
            return Err(Error::contract(format!(
                "label map {n}x{h}x{w} cannot hold {} values",
                values.len()
            )));
        }
        Ok(Self { n, h, w, values })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [u8] {
        &mut self.values
    }

    /// Checks every non-ignore value is below `classes`.
    pub fn validate(&self, classes: usize) -> Result<()> {
        match self
            .values
            .iter()
            .find(|&&v| v != IGNORE_LABEL && v as usize >= classes)
        {
            Some(v) => Err(Error::contract(format!(
                "label {v} out of range for {classes} classes"
            ))),
            None => Ok(()),
        }
    }

    /// Stack single-image label maps into a batch.
    pub fn stack(maps: &[&LabelMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::contract("cannot stack zero label maps"))?;
        let (h, w) = (first.h, first.w);
        let mut values = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            if (m.h, m.w) != (h, w) {
                return Err(Error::contract("label maps differ in size"));
            }
            values.extend_from_slice(&m.values);
        }
        let n = values.len() / (h * w);
        Self::new(n, h, w, values)
    }
}

/// Per-pixel class distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxMap(Tensor);

impl SoftmaxMap {
    /// Validates that every pixel holds a distribution over the class axis.
    pub fn new(t: Tensor) -> Result<Self> {
        let [n, c, h, w] = t.dims4()?;
        let hw = h * w;
        let d = t.data();
        if d.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::contract("softmax entries must lie in [0, 1]"));
        }
        for i in 0..n {
            for p in 0..hw {
                let s: f64 = (0..c).map(|k| d[(i * c + k) * hw + p]).sum();
                if (s - 1.0).abs() > 1e-5 {
                    return Err(Error::contract(format!(
                        "pixel class vector sums to {s}, not 1"
                    )));
                }
            }
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Most probable class per pixel.
    pub fn argmax(&self) -> LabelMap {
        argmax(&self.0).expect("softmax map is 4-d")
    }
}

/// Per-pixel argmax over the class axis of `[n, c, h, w]`; ties go to the
/// lowest class index.
pub fn argmax(p: &Tensor) -> Result<LabelMap> {
    let [n, c, h, w] = p.dims4()?;
    let hw = h * w;
    let d = p.data();
    let mut out = Vec::with_capacity(n * hw);
    for i in 0..n {
        for q in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if d[(i * c + k) * hw + q] > d[(i * c + best) * hw + q] {
                    best = k;
                }
            }
            out.push(best as u8);
        }
    }
    LabelMap::new(n, h, w, out)
}

/// Discriminator output: probability that each cell comes from the source
/// domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainMap(Tensor);

impl DomainMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::contract("domain probabilities must lie in [0, 1]"));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

fn check_pair(p: &Tensor, y: &LabelMap) -> Result<(usize, usize, usize)> {
    let [n, c, h, w] = p.dims4()?;
    if y.dims() != (n, h, w) {
        return Err(Error::Shape {
            expected: vec![n, h, w],
            actual: vec![y.n, y.h, y.w],
        });
    }
    y.validate(c)?;
    Ok((n, c, h * w))
}

/// Mean negative log-likelihood of the true class over non-ignore pixels.
pub fn cross_entropy(p: &Tensor, y: &LabelMap) -> Result<f64> {
    Ok(cross_entropy_grad(p, y)?.0)
}

pub fn cross_entropy_grad(p: &Tensor, y: &LabelMap) -> Result<(f64, Tensor)> {
    let c = p.dims4()?[1];
    weighted_cross_entropy_grad(p, y, &vec![1.0; c])
}

/// `Σᵢ w[yᵢ]·(−log P_i[yᵢ]) / N_valid`: weights scale the per-pixel terms
/// while the normalizer stays the number of labeled pixels.
pub fn weighted_cross_entropy(p: &Tensor, y: &LabelMap, weights: &[f64]) -> Result<f64> {
    Ok(weighted_cross_entropy_grad(p, y, weights)?.0)
}

pub fn weighted_cross_entropy_grad(
    p: &Tensor,
    y: &LabelMap,
    weights: &[f64],
) -> Result<(f64, Tensor)> {
    let (n, c, hw) = check_pair(p, y)?;
    if weights.len() != c {
        return Err(Error::contract(format!(
            "{} class weights for {c} classes",
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|&&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::contract(format!(
            "class weights must be positive, got {w}"
        )));
    }
    let valid = y.values.iter().filter(|&&v| v != IGNORE_LABEL).count();
    let mut grad = Tensor::zeros(p.shape());
    if valid == 0 {
        return Ok((0.0, grad));
    }
    let norm = valid as f64;
    let d = p.data();
    let g = grad.data_mut();
    let mut total = 0.0;
    for i in 0..n {
        for q in 0..hw {
            let label = y.values[i * hw + q];
            if label == IGNORE_LABEL {
                continue;
            }
            let k = label as usize;
            let j = (i * c + k) * hw + q;
            let prob = d[j].max(CE_FLOOR);
            total -= weights[k] * prob.ln();
            g[j] = -weights[k] / (norm * prob);
        }
    }
    Ok((total / norm, grad))
}

/// Inverse-frequency class weights normalized to mean 1 over the classes
/// that occur; absent classes get weight 1.
pub fn inverse_frequency_weights(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    let inv: Vec<Option<f64>> = counts
        .iter()
        .map(|&n| (n > 0).then(|| total as f64 / n as f64))
        .collect();
    let present: Vec<f64> = inv.iter().flatten().copied().collect();
    if present.is_empty() {
        return vec![1.0; counts.len()];
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    inv.into_iter().map(|w| w.map_or(1.0, |w| w / mean)).collect()
}

/// Gradient of the Lovász extension of the Jaccard loss with respect to
/// errors sorted in decreasing order, given the ground-truth indicator in
/// that same order.
pub fn lovasz_grad(sorted_gt: &[bool]) -> Result<Vec<f64>> {
    if sorted_gt.is_empty() {
        return Err(Error::contract("lovasz_grad needs at least one pixel"));
    }
    let gts = sorted_gt.iter().filter(|&&g| g).count() as f64;
    let mut out = Vec::with_capacity(sorted_gt.len());
    let (mut cum_fg, mut cum_bg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &g in sorted_gt {
        if g {
            cum_fg += 1.0;
        } else {
            cum_bg += 1.0;
        }
        let jaccard = 1.0 - (gts - cum_fg) / (gts + cum_bg);
        out.push(jaccard - prev);
        prev = jaccard;
    }
    Ok(out)
}

/// Lovász-Softmax over all non-ignore pixels of the batch, averaged over the
/// classes present in `y`.
pub fn lovasz_softmax(p: &Tensor, y: &LabelMap) -> Result<f64> {
    Ok(lovasz_softmax_grad(p, y)?.0)
}

pub fn lovasz_softmax_grad(p: &Tensor, y: &LabelMap) -> Result<(f64, Tensor)> {
    let (n, c, hw) = check_pair(p, y)?;
    let d = p.data();
    let pixels: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..hw).map(move |q| (i, q)))
        .filter(|&(i, q)| y.values[i * hw + q] != IGNORE_LABEL)
        .collect();
    let mut grad = Tensor::zeros(p.shape());
    let mut present = 0usize;
    let mut total = 0.0;
    let mut errors: Vec<(f64, usize)> = Vec::with_capacity(pixels.len());
    let mut sorted_gt: Vec<bool> = Vec::with_capacity(pixels.len());
    let mut class_grads: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
    for k in 0..c {
        let is_fg = |idx: usize| {
            let (i, q) = pixels[idx];
            y.values[i * hw + q] as usize == k
        };
        if !(0..pixels.len()).any(is_fg) {
            continue;
        }
        present += 1;
        errors.clear();
        for (idx, &(i, q)) in pixels.iter().enumerate() {
            let prob = d[(i * c + k) * hw + q];
            let m = if is_fg(idx) { 1.0 - prob } else { prob };
            errors.push((m, idx));
        }
        errors.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        sorted_gt.clear();
        sorted_gt.extend(errors.iter().map(|&(_, idx)| is_fg(idx)));
        let g = lovasz_grad(&sorted_gt)?;
        total += errors.iter().zip(&g).map(|(e, gi)| e.0 * gi).sum::<f64>();
        let entries = errors
            .iter()
            .zip(&g)
            .map(|(&(_, idx), &gi)| (idx, if is_fg(idx) { -gi } else { gi }))
            .collect();
        class_grads.push((k, entries));
    }
    if present == 0 {
        return Ok((0.0, grad));
    }
    let scale = 1.0 / present as f64;
    let gd = grad.data_mut();
    for (k, entries) in class_grads {
        for (idx, gi) in entries {
            let (i, q) = pixels[idx];
            gd[(i * c + k) * hw + q] += scale * gi;
        }
    }
    Ok((total * scale, grad))
}

fn clamp_domain(v: f64) -> f64 {
    v.clamp(DOMAIN_EPS, 1.0 - DOMAIN_EPS)
}

/// Which label a discriminator output is scored against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DomainLabel {
    /// Label 1: term `−mean log d`.
    Source,
    /// Label 0: term `−mean log(1 − d)`.
    Target,
}

/// One side of the adversarial loss.
pub fn domain_term_grad(d: &Tensor, label: DomainLabel) -> (f64, Tensor) {
    let n = d.len() as f64;
    let mut value = 0.0;
    let grad = d.map(|raw| {
        let v = clamp_domain(raw);
        let inside = raw == v;
        match label {
            DomainLabel::Source => {
                value -= v.ln();
                if inside {
                    -1.0 / (n * v)
                } else {
                    0.0
                }
            }
            DomainLabel::Target => {
                value -= (1.0 - v).ln();
                if inside {
                    1.0 / (n * (1.0 - v))
                } else {
                    0.0
                }
            }
        }
    });
    (value / n, grad)
}

/// `−mean log d_s − mean log(1 − d_t)`: sources are labeled 1, targets 0.
pub fn adversarial_loss(d_s: &Tensor, d_t: &Tensor) -> f64 {
    adversarial_loss_grad(d_s, d_t).0
}

pub fn adversarial_loss_grad(d_s: &Tensor, d_t: &Tensor) -> (f64, Tensor, Tensor) {
    let (a, ga) = domain_term_grad(d_s, DomainLabel::Source);
    let (b, gb) = domain_term_grad(d_t, DomainLabel::Target);
    (a + b, ga, gb)
}

/// Adversarial loss on the clean pair plus the same loss on the perturbed
/// pair; perturbed maps keep the label of the domain they came from.
pub fn discriminator_loss(d_s: &Tensor, d_t: &Tensor, d_s_star: &Tensor, d_t_star: &Tensor) -> f64 {
    adversarial_loss(d_s, d_t) + adversarial_loss(d_s_star, d_t_star)
}

/// Euclidean distance between a perturbed feature map and its origin.
pub fn feature_l2(f_star: &Tensor, f: &Tensor) -> Result<f64> {
    Ok(feature_l2_grad(f_star, f)?.0)
}

/// Gradient with respect to `f_star`; the zero subgradient at `f_star = f`.
pub fn feature_l2_grad(f_star: &Tensor, f: &Tensor) -> Result<(f64, Tensor)> {
    let diff = f_star.sub(f)?;
    let norm = diff.norm_l2();
    if norm == 0.0 {
        return Ok((0.0, Tensor::zeros(f.shape())));
    }
    Ok((norm, diff.scale(1.0 / norm)))
}

/// Mean over pixels of the class-axis Euclidean distance between two
/// probability maps.
pub fn consistency_loss(p_t: &Tensor, p_t_star: &Tensor) -> Result<f64> {
    Ok(consistency_loss_grad(p_t, p_t_star)?.0)
}

pub fn consistency_loss_grad(p_t: &Tensor, p_t_star: &Tensor) -> Result<(f64, Tensor, Tensor)> {
    p_t.ensure_same_shape(p_t_star)?;
    let [n, c, h, w] = p_t.dims4()?;
    let hw = h * w;
    let pixels = (n * hw) as f64;
    let (a, b) = (p_t.data(), p_t_star.data());
    let mut ga = Tensor::zeros(p_t.shape());
    let mut total = 0.0;
    {
        let g = ga.data_mut();
        for i in 0..n {
            for q in 0..hw {
                let idx = |k: usize| (i * c + k) * hw + q;
                let norm = (0..c)
                    .map(|k| (a[idx(k)] - b[idx(k)]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                total += norm;
                if norm > 0.0 {
                    for k in 0..c {
                        g[idx(k)] = (a[idx(k)] - b[idx(k)]) / (norm * pixels);
                    }
                }
            }
        }
    }
    let gb = ga.scale(-1.0);
    Ok((total / pixels, ga, gb))
}

/// Mean over pixels of the class entropy normalized by `ln C`, with
/// `0·log 0 = 0`.
pub fn entropy_loss(p: &Tensor) -> Result<f64> {
    Ok(entropy_loss_grad(p)?.0)
}

pub fn entropy_loss_grad(p: &Tensor) -> Result<(f64, Tensor)> {
    let [n, c, h, w] = p.dims4()?;
    if c < 2 {
        return Err(Error::contract("entropy needs at least two classes"));
    }
    let pixels = (n * h * w) as f64;
    let scale = -1.0 / (c as f64).ln();
    let mut total = 0.0;
    let grad = p.map(|v| {
        if v > 0.0 {
            total += v * v.ln();
            scale * (v.ln() + 1.0) / pixels
        } else {
            scale * (LOG_FLOOR.ln() + 1.0) / pixels
        }
    });
    // Uniform maps can land one ulp above 1.
    Ok(((scale * total / pixels).clamp(0.0, 1.0), grad))
}

const LOG_FLOOR: f64 = 1e-300;

/// Trade-off factors of the classifier objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TradeOffs {
    pub consistency: f64,
    pub entropy_clean: f64,
    pub entropy_perturbed: f64,
}

impl Default for TradeOffs {
    fn default() -> Self {
        Self {
            consistency: 0.2,
            entropy_clean: 0.002,
            entropy_perturbed: 0.0005,
        }
    }
}

/// Lovász-Softmax on perturbed and clean source predictions plus the
/// weighted consistency and target entropy terms.
pub fn classifier_loss(
    p_s: &Tensor,
    p_s_star: &Tensor,
    y_s: &LabelMap,
    p_t: &Tensor,
    p_t_star: &Tensor,
    alpha: TradeOffs,
) -> Result<f64> {
    Ok(lovasz_softmax(p_s_star, y_s)?
        + lovasz_softmax(p_s, y_s)?
        + alpha.consistency * consistency_loss(p_t, p_t_star)?
        + alpha.entropy_clean * entropy_loss(p_t)?
        + alpha.entropy_perturbed * entropy_loss(p_t_star)?)
}

// Tape adapters.

pub fn cross_entropy_node(tape: &mut Tape, p: Var, y: &LabelMap) -> Result<Var> {
    let (v, g) = cross_entropy_grad(tape.value(p), y)?;
    tape.loss(vec![p], v, vec![g])
}

pub fn weighted_cross_entropy_node(
    tape: &mut Tape,
    p: Var,
    y: &LabelMap,
    weights: &[f64],
) -> Result<Var> {
    let (v, g) = weighted_cross_entropy_grad(tape.value(p), y, weights)?;
    tape.loss(vec![p], v, vec![g])
}

pub fn lovasz_softmax_node(tape: &mut Tape, p: Var, y: &LabelMap) -> Result<Var> {
    let (v, g) = lovasz_softmax_grad(tape.value(p), y)?;
    tape.loss(vec![p], v, vec![g])
}

pub fn domain_term_node(tape: &mut Tape, d: Var, label: DomainLabel) -> Result<Var> {
    let (v, g) = domain_term_grad(tape.value(d), label);
    tape.loss(vec![d], v, vec![g])
}

pub fn adversarial_loss_node(tape: &mut Tape, d_s: Var, d_t: Var) -> Result<Var> {
    let (v, gs, gt) = adversarial_loss_grad(tape.value(d_s), tape.value(d_t));
    tape.loss(vec![d_s, d_t], v, vec![gs, gt])
}

pub fn feature_l2_node(tape: &mut Tape, f_star: Var, f: &Tensor) -> Result<Var> {
    let (v, g) = feature_l2_grad(tape.value(f_star), f)?;
    tape.loss(vec![f_star], v, vec![g])
}

pub fn consistency_node(tape: &mut Tape, p_t: Var, p_t_star: Var) -> Result<Var> {
    let (v, ga, gb) = consistency_loss_grad(tape.value(p_t), tape.value(p_t_star))?;
    tape.loss(vec![p_t, p_t_star], v, vec![ga, gb])
}

pub fn entropy_node(tape: &mut Tape, p: Var) -> Result<Var> {
    let (v, g) = entropy_loss_grad(tape.value(p))?;
    tape.loss(vec![p], v, vec![g])
}
