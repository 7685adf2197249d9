//! Toy segmentation network (feature extractor `G` + classifier `F`) and the
//! fully convolutional domain discriminator `D`.
//!
//! The encoder is a stack of stride-2 blocks. The perturbing layer picks the
//! split point: `G` is everything before it, `F` the remaining blocks plus
//! the 1×1 head, the bilinear resize back to image resolution and the
//! softmax.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{DomainMap, SoftmaxMap};
use crate::math::{Gradients, Tape, Tensor, Var};
use crate::perturb::{Domain, FeatureMap, Layer};

const DISC_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output channels of each encoder block.
    pub encoder_channels: Vec<usize>,
    /// Width of the hidden 1×1 layer in the head.
    pub head_hidden: usize,
    /// Output channels of the discriminator's hidden layers; a final
    /// 1-channel layer is appended.
    pub disc_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![16, 32, 64, 64],
            head_hidden: 32,
            disc_channels: vec![8, 16, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    fn init(
        rng: &mut ChaCha8Rng,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
    ) -> Self {
        let fan_in = (in_c * kernel * kernel) as f64;
        let bound = gain * (3.0 / fan_in).sqrt();
        let weight: Vec<f64> = (0..out_c * in_c * kernel * kernel)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::new(&[out_c, in_c, kernel, kernel], weight).expect("sized above"),
            bias: Tensor::zeros(&[out_c]),
            stride,
            padding,
        }
    }

    fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> LayerVars {
        let (w, b) = if trainable {
            (tape.leaf(self.weight.clone()), tape.leaf(self.bias.clone()))
        } else {
            (
                tape.constant(self.weight.clone()),
                tape.constant(self.bias.clone()),
            )
        };
        LayerVars { w, b }
    }

    fn apply(&self, tape: &mut Tape, vars: LayerVars, x: Var) -> Result<Var> {
        tape.conv2d(x, vars.w, vars.b, self.stride, self.padding)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    w: Var,
    b: Var,
}

/// Tape handles for every layer of a bound network, in parameter order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    layers: Vec<LayerVars>,
}

impl BoundParams {
    /// Gradients for each parameter tensor in `params()` order; `None` where
    /// the parameter was constant or unreachable.
    pub fn collect(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.layers
            .iter()
            .flat_map(|l| [grads.take(l.w), grads.take(l.b)])
            .collect()
    }
}

fn layer_params(layers: &[ConvLayer]) -> impl Iterator<Item = &Tensor> {
    layers.iter().flat_map(|l| [&l.weight, &l.bias])
}

fn layer_params_mut(layers: &mut [ConvLayer]) -> impl Iterator<Item = &mut Tensor> {
    layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
}

/// Encoder blocks plus classifier head with a movable split point.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationModel {
    blocks: Vec<ConvLayer>,
    head: Vec<ConvLayer>,
    classes: usize,
    split: Layer,
    frozen_g: bool,
}

impl SegmentationModel {
    pub fn new(cfg: &ModelConfig, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::contract("need at least two classes"));
        }
        if cfg.encoder_channels.is_empty() || cfg.encoder_channels.contains(&0) || cfg.head_hidden == 0 {
            return Err(Error::contract("encoder and head widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let mut in_c = 3;
        for &c in &cfg.encoder_channels {
            blocks.push(ConvLayer::init(&mut rng, in_c, c, 3, 2, 1, 2f64.sqrt()));
            in_c = c;
        }
        let head = vec![
            ConvLayer::init(&mut rng, in_c, cfg.head_hidden, 1, 1, 0, 2f64.sqrt()),
            ConvLayer::init(&mut rng, cfg.head_hidden, classes, 1, 1, 0, 1.0),
        ];
        let depth = blocks.len();
        Ok(Self {
            blocks,
            head,
            classes,
            split: Layer::Block(depth),
            frozen_g: false,
        })
    }

    pub fn with_split(mut self, split: Layer) -> Result<Self> {
        self.set_split(split)?;
        Ok(self)
    }

    pub fn set_split(&mut self, split: Layer) -> Result<()> {
        if split.depth() > self.blocks.len() {
            return Err(Error::contract(format!(
                "split {split} is deeper than the {}-block encoder",
                self.blocks.len()
            )));
        }
        self.split = split;
        Ok(())
    }

    pub fn split(&self) -> Layer {
        self.split
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// When frozen, optimizer steps leave the feature extractor untouched.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen_g = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen_g
    }

    /// All parameter tensors: encoder blocks, then head.
    pub fn params(&self) -> Vec<&Tensor> {
        layer_params(&self.blocks).chain(layer_params(&self.head)).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let (blocks, head) = (&mut self.blocks, &mut self.head);
        layer_params_mut(blocks).chain(layer_params_mut(head)).collect()
    }

    /// Number of leading `params()` entries that belong to `G`.
    pub fn g_param_count(&self) -> usize {
        2 * self.split.depth()
    }

    /// Whether each parameter may be updated under the current freeze state.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let g = self.g_param_count();
        (0..self.params().len())
            .map(|i| !(self.frozen_g && i < g))
            .collect()
    }

    pub fn g_checksum(&self) -> u64 {
        checksum(&self.params()[..self.g_param_count()])
    }

    pub fn checksum(&self) -> u64 {
        checksum(&self.params())
    }

    /// Registers parameters on a tape. `G` (`F`) layers are trainable leaves
    /// only when `train_g` (`train_f`) is set; frozen `G` is always constant.
    pub fn bind(&self, tape: &mut Tape, train_g: bool, train_f: bool) -> BoundParams {
        let split = self.split.depth();
        let train_g = train_g && !self.frozen_g;
        let mut layers = Vec::with_capacity(self.blocks.len() + self.head.len());
        for (i, l) in self.blocks.iter().enumerate() {
            layers.push(l.bind(tape, if i < split { train_g } else { train_f }));
        }
        for l in &self.head {
            layers.push(l.bind(tape, train_f));
        }
        BoundParams { layers }
    }

    /// Forward through `G`.
    pub fn g_forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var> {
        let [_, c, _, _] = tape.value(x).dims4()?;
        if c != 3 {
            return Err(Error::contract(format!("images must have 3 channels, got {c}")));
        }
        let mut h = x;
        for (i, block) in self.blocks[..self.split.depth()].iter().enumerate() {
            h = block.apply(tape, p.layers[i], h)?;
            h = tape.relu(h);
        }
        Ok(h)
    }

    /// Forward through `F`, returning per-pixel softmax at image resolution.
    pub fn f_forward(&self, tape: &mut Tape, p: &BoundParams, f: Var) -> Result<Var> {
        let [_, c, fh, fw] = tape.value(f).dims4()?;
        let split = self.split.depth();
        let expected_c = if split == 0 {
            3
        } else {
            self.blocks[split - 1].weight.shape()[0]
        };
        if c != expected_c {
            return Err(Error::contract(format!(
                "features at {} must have {expected_c} channels, got {c}",
                self.split
            )));
        }
        let (out_h, out_w) = (fh << split, fw << split);
        let mut h = f;
        for (i, block) in self.blocks.iter().enumerate().skip(split) {
            h = block.apply(tape, p.layers[i], h)?;
            h = tape.relu(h);
        }
        let base = self.blocks.len();
        h = self.head[0].apply(tape, p.layers[base], h)?;
        h = tape.relu(h);
        h = self.head[1].apply(tape, p.layers[base + 1], h)?;
        h = tape.upsample(h, out_h, out_w)?;
        tape.softmax(h)
    }

    /// Features at the split point for a batch of images `[n, 3, H, W]`.
    pub fn extract_features(&self, x: &Tensor, origin: Domain) -> Result<FeatureMap> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false, false);
        let xv = tape.constant(x.clone());
        let f = self.g_forward(&mut tape, &p, xv)?;
        FeatureMap::new(tape.value(f).clone(), origin, self.split)
    }

    pub fn classify(&self, f: &FeatureMap) -> Result<SoftmaxMap> {
        if f.layer() != self.split {
            return Err(Error::contract(format!(
                "features from {} fed to a classifier split at {}",
                f.layer(),
                self.split
            )));
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false, false);
        let fv = tape.constant(f.values().clone());
        let out = self.f_forward(&mut tape, &p, fv)?;
        SoftmaxMap::new(tape.value(out).clone())
    }

    /// `F(G(x))` for a batch of images.
    pub fn predict(&self, x: &Tensor) -> Result<SoftmaxMap> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false, false);
        let xv = tape.constant(x.clone());
        let f = self.g_forward(&mut tape, &p, xv)?;
        let out = self.f_forward(&mut tape, &p, f)?;
        SoftmaxMap::new(tape.value(out).clone())
    }

    pub(crate) fn from_layers(
        blocks: Vec<ConvLayer>,
        head: Vec<ConvLayer>,
        classes: usize,
        split: Layer,
        frozen_g: bool,
    ) -> Result<Self> {
        let chained = blocks.iter().chain(&head).try_fold(3, |in_c, l| {
            (l.in_channels() == in_c).then(|| l.weight.shape()[0])
        });
        if head.len() != 2 || chained != Some(classes) || classes < 2 {
            return Err(Error::contract("layer shapes do not form a segmentation model"));
        }
        let model = Self {
            blocks,
            head,
            classes,
            split: Layer::Pixel,
            frozen_g,
        };
        model.with_split(split)
    }

    pub(crate) fn layers(&self) -> (&[ConvLayer], &[ConvLayer]) {
        (&self.blocks, &self.head)
    }
}

/// DCGAN-style discriminator without normalization layers: 4×4 stride-2
/// convolutions with leaky ReLU, a 1-channel output and a sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    layers: Vec<ConvLayer>,
}

impl Discriminator {
    pub fn new(cfg: &ModelConfig, classes: usize, seed: u64) -> Result<Self> {
        if cfg.disc_channels.contains(&0) {
            return Err(Error::contract("discriminator widths must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut in_c = classes;
        for &c in &cfg.disc_channels {
            layers.push(ConvLayer::init(&mut rng, in_c, c, 4, 2, 1, 2f64.sqrt()));
            in_c = c;
        }
        layers.push(ConvLayer::init(&mut rng, in_c, 1, 4, 2, 1, 1.0));
        Ok(Self { layers })
    }

    pub fn params(&self) -> Vec<&Tensor> {
        layer_params(&self.layers).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        layer_params_mut(&mut self.layers).collect()
    }

    pub fn checksum(&self) -> u64 {
        checksum(&self.params())
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        BoundParams {
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, probs: Var) -> Result<Var> {
        let c = tape.value(probs).dims4()?[1];
        if c != self.layers[0].in_channels() {
            return Err(Error::contract(format!(
                "discriminator expects {} classes, got {c}",
                self.layers[0].in_channels()
            )));
        }
        let mut h = probs;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(tape, p.layers[i], h)?;
            if i < last {
                h = tape.leaky_relu(h, DISC_SLOPE);
            }
        }
        Ok(tape.sigmoid(h))
    }

    pub fn discriminate(&self, probs: &SoftmaxMap) -> Result<DomainMap> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(probs.tensor().clone());
        let d = self.forward(&mut tape, &p, x)?;
        DomainMap::new(tape.value(d).clone())
    }

    pub(crate) fn from_layers(layers: Vec<ConvLayer>) -> Self {
        Self { layers }
    }

    pub(crate) fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }
}

fn checksum(params: &[&Tensor]) -> u64 {
    params
        .iter()
        .fold(0u64, |acc, p| acc.rotate_left(7) ^ p.checksum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(n: usize, hw: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * hw * hw).map(|_| rng.gen::<f64>()).collect();
        Tensor::new(&[n, 3, hw, hw], data).unwrap()
    }

    #[test]
    fn pixel_split_returns_input() {
        let m = SegmentationModel::new(&ModelConfig::default(), 5, 1)
            .unwrap()
            .with_split(Layer::Pixel)
            .unwrap();
        let x = image(1, 16, 2);
        let f = m.extract_features(&x, Domain::Source).unwrap();
        assert_eq!(f.values(), &x);
        assert_eq!(f.layer(), Layer::Pixel);
    }

    #[test]
    fn full_split_extent_and_output_shape() {
        let m = SegmentationModel::new(&ModelConfig::default(), 5, 1).unwrap();
        let x = image(2, 64, 3);
        let f = m.extract_features(&x, Domain::Target).unwrap();
        assert_eq!(f.values().shape(), &[2, 64, 4, 4]);
        let p = m.classify(&f).unwrap();
        assert_eq!(p.tensor().shape(), &[2, 5, 64, 64]);
        let again = m.extract_features(&x, Domain::Target).unwrap();
        assert_eq!(f, again);
    }

    #[test]
    fn every_split_produces_full_resolution() {
        for depth in 0..=4 {
            let split = if depth == 0 { Layer::Pixel } else { Layer::Block(depth) };
            let m = SegmentationModel::new(&ModelConfig::default(), 3, 9)
                .unwrap()
                .with_split(split)
                .unwrap();
            let x = image(1, 32, 4);
            let f = m.extract_features(&x, Domain::Source).unwrap();
            assert_eq!(f.values().shape()[2], 32 >> depth);
            let p = m.classify(&f).unwrap();
            assert_eq!(p.tensor().shape(), &[1, 3, 32, 32]);
            // same network regardless of split
            let full = SegmentationModel::new(&ModelConfig::default(), 3, 9).unwrap();
            let diff = p.tensor().sub(full.predict(&x).unwrap().tensor()).unwrap();
            assert!(diff.max_abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let m = SegmentationModel::new(&ModelConfig::default(), 5, 1).unwrap();
        let x = Tensor::zeros(&[1, 4, 16, 16]);
        assert!(matches!(
            m.extract_features(&x, Domain::Source),
            Err(Error::Contract(_))
        ));
        let bad = FeatureMap::new(Tensor::zeros(&[1, 32, 4, 4]), Domain::Source, Layer::Block(4)).unwrap();
        assert!(m.classify(&bad).is_err());
    }

    #[test]
    fn discriminator_outputs_probabilities() {
        let cfg = ModelConfig::default();
        let m = SegmentationModel::new(&cfg, 5, 1).unwrap();
        let d = Discriminator::new(&cfg, 5, 2).unwrap();
        let p = m.predict(&image(2, 64, 5)).unwrap();
        let out = d.discriminate(&p).unwrap();
        assert_eq!(out.tensor().shape(), &[2, 1, 4, 4]);
        assert!(out.tensor().data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(out, d.discriminate(&p).unwrap());
    }

    #[test]
    fn freezing_masks_g_and_keeps_outputs() {
        let mut m = SegmentationModel::new(&ModelConfig::default(), 5, 1).unwrap();
        let x = image(1, 32, 6);
        let before = m.predict(&x).unwrap();
        m.set_frozen(true);
        assert_eq!(m.predict(&x).unwrap(), before);
        let mask = m.trainable_mask();
        assert_eq!(mask.iter().filter(|&&t| !t).count(), 8);
        assert!(mask[8..].iter().all(|&t| t));
    }
}
