//! Procedural two-domain segmentation scenes and their on-disk format.
//!
//! A scene is a stack of horizontal bands (the frequent classes) with a few
//! small shapes painted on top (the rare classes). Labels are exact by
//! construction. The target domain reuses the generator with a [`Shift`]:
//! rotated hues, stronger noise, smaller objects and displaced layouts.
//!
//! On disk a dataset is `images/%06d.png` (8-bit RGB), `labels/%06d.png`
//! (8-bit gray, class index or 255) and `manifest.json`.

use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::losses::{LabelMap, IGNORE_LABEL};
use crate::math::Tensor;

/// Classes whose pixel ratio is below this are tail classes.
pub const TAIL_RATIO: f64 = 0.02;

pub const MANIFEST_VERSION: u32 = 1;

/// Appearance and layout differences applied on top of the base generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Shift {
    /// Added to every palette hue, in turns.
    pub hue_offset: f64,
    /// Multiplies the texture noise level.
    pub noise_scale: f64,
    /// Multiplies the linear size of tail-class shapes.
    pub object_scale: f64,
    /// Moves band boundaries and shape centers down by this fraction of the
    /// image height.
    pub layout_bias: f64,
}

impl Shift {
    pub fn none() -> Self {
        Self {
            hue_offset: 0.0,
            noise_scale: 1.0,
            object_scale: 1.0,
            layout_bias: 0.0,
        }
    }

    pub fn target_default() -> Self {
        Self {
            hue_offset: 0.15,
            noise_scale: 2.0,
            object_scale: 0.8,
            layout_bias: 0.1,
        }
    }
}

impl Default for Shift {
    fn default() -> Self {
        Self::none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSpec {
    pub class_names: Vec<String>,
    /// Target pixel ratio per class; sums to 1.
    pub class_frequency: Vec<f64>,
    /// Base RGB color per class, components in `[0, 1]`.
    pub palette: Vec<[f64; 3]>,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the per-pixel Gaussian noise before shifting.
    pub noise: f64,
    /// Amplitude of the class-specific stripe texture.
    pub texture: f64,
    /// Probability that a scene contains a given tail class.
    pub tail_presence: f64,
    pub shift: Shift,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            class_names: ["sky", "building", "road", "sign", "person"]
                .map(String::from)
                .to_vec(),
            class_frequency: vec![0.30, 0.34, 0.33, 0.015, 0.015],
            // Muted head colors and near-neutral tail colors: the hue
            // offset degrades the tails without erasing them.
            palette: vec![
                [0.765, 0.825, 0.90],
                [0.62, 0.56, 0.524],
                [0.408, 0.408, 0.42],
                [0.95, 0.90, 0.75],
                [0.18, 0.10, 0.12],
            ],
            height: 64,
            width: 64,
            noise: 0.04,
            texture: 0.08,
            tail_presence: 0.1,
            shift: Shift::none(),
            seed: 0,
        }
    }
}

impl DomainSpec {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    /// The default target domain: the same scenes under [`Shift::target_default`].
    pub fn target_default() -> Self {
        Self {
            shift: Shift::target_default(),
            ..Self::default()
        }
    }

    pub fn tail_classes(&self) -> Vec<usize> {
        (0..self.classes())
            .filter(|&c| self.class_frequency[c] < TAIL_RATIO)
            .collect()
    }

    fn head_classes(&self) -> Vec<usize> {
        (0..self.classes())
            .filter(|&c| self.class_frequency[c] >= TAIL_RATIO)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes();
        if !(2..=IGNORE_LABEL as usize).contains(&c) {
            return Err(Error::Config(format!("class count {c} out of range")));
        }
        if self.class_frequency.len() != c || self.palette.len() != c {
            return Err(Error::Config(format!(
                "{c} class names but {} frequencies and {} palette entries",
                self.class_frequency.len(),
                self.palette.len()
            )));
        }
        if self.class_frequency.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::Config("class frequencies must be positive".into()));
        }
        let total: f64 = self.class_frequency.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "class frequencies sum to {total}, not 1"
            )));
        }
        if self.tail_classes().is_empty() {
            return Err(Error::Config(format!(
                "no class has a target ratio below {TAIL_RATIO}"
            )));
        }
        if self.head_classes().is_empty() {
            return Err(Error::Config("every class is a tail class".into()));
        }
        if self.palette.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("palette components must lie in [0, 1]".into()));
        }
        if !(self.tail_presence > 0.0 && self.tail_presence <= 1.0) {
            return Err(Error::Config("tail_presence must lie in (0, 1]".into()));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::Config("scenes must be at least 8x8".into()));
        }
        let s = &self.shift;
        if !(self.noise >= 0.0 && self.texture >= 0.0 && s.noise_scale >= 0.0 && s.object_scale > 0.0)
            || ![s.hue_offset, s.layout_bias].iter().all(|v| v.is_finite())
        {
            return Err(Error::Config("invalid noise, texture or shift values".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// RGB image, channel-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width || height == 0 || width == 0 {
            return Err(Error::contract(format!(
                "{height}x{width} RGB image cannot hold {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::contract("image values must lie in [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Labeled images plus the metadata written to `manifest.json`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub class_names: Vec<String>,
    /// Free-form split tag, e.g. `source` or `target`.
    pub split: String,
    pub spec_hash: String,
    pub images: Vec<Image>,
    pub labels: Vec<LabelMap>,
}

impl Dataset {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Images `[n, 3, H, W]` and labels for the given indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, LabelMap)> {
        let first = indices
            .first()
            .map(|&i| &self.images[i])
            .ok_or_else(|| Error::contract("empty batch"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(indices.len() * 3 * h * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self
                .images
                .get(i)
                .ok_or_else(|| Error::contract(format!("index {i} out of range")))?;
            if (img.height, img.width) != (h, w) {
                return Err(Error::contract("images in a batch differ in size"));
            }
            data.extend_from_slice(&img.data);
            labels.push(&self.labels[i]);
        }
        Ok((
            Tensor::new(&[indices.len(), 3, h, w], data)?,
            LabelMap::stack(&labels)?,
        ))
    }

    /// Per-class pixel counts over all labels, ignore excluded.
    pub fn class_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.classes()];
        for l in &self.labels {
            for &v in l.values() {
                if v != IGNORE_LABEL {
                    counts[v as usize] += 1;
                }
            }
        }
        counts
    }
}

/// Pixel ratio of each class over the whole dataset.
pub fn category_distribution(ds: &Dataset) -> Result<Vec<f64>> {
    if ds.is_empty() {
        return Err(Error::contract("category distribution of an empty dataset"));
    }
    let counts = ds.class_counts();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::contract("dataset has no labeled pixels"));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

fn scene_rngs(seed: u64, index: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut layout = ChaCha8Rng::seed_from_u64(seed);
    layout.set_stream(2 * index);
    let mut look = ChaCha8Rng::seed_from_u64(seed);
    look.set_stream(2 * index + 1);
    (layout, look)
}

fn paint_layout(spec: &DomainSpec, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let head = spec.head_classes();
    let head_mass: f64 = head.iter().map(|&c| spec.class_frequency[c]).sum();
    let bias = spec.shift.layout_bias * h as f64;

    // Wavy band boundaries at the jittered cumulative head ratios.
    let mut labels = vec![0u8; h * w];
    let mut cum = 0.0;
    let mut bounds = Vec::with_capacity(head.len() - 1);
    for &c in &head[..head.len() - 1] {
        cum += spec.class_frequency[c] / head_mass;
        let base = cum * h as f64 + rng.gen_range(-0.06..0.06) * h as f64 + bias;
        let amp = rng.gen_range(0.0..0.05) * h as f64;
        let freq = rng.gen_range(0.5..2.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        bounds.push((base, amp, freq, phase));
    }
    for x in 0..w {
        let rows: Vec<f64> = bounds
            .iter()
            .map(|&(base, amp, freq, phase)| {
                base + amp * (2.0 * PI * freq * x as f64 / w as f64 + phase).sin()
            })
            .collect();
        for y in 0..h {
            let band = rows.iter().filter(|&&r| (y as f64) >= r).count();
            labels[y * w + x] = head[band] as u8;
        }
    }

    // Tail shapes: at most one per class and scene, discs for even class
    // ids and squares for odd ones, sized so the expected covered area
    // matches the target ratio.
    for c in spec.tail_classes() {
        let present = rng.gen_bool(spec.tail_presence);
        let area = spec.class_frequency[c] * (h * w) as f64 / spec.tail_presence;
        if present {
            let jitter = rng.gen_range(0.85..1.15);
            let cy = rng.gen_range(0.2..0.8) * h as f64 + bias;
            let cx = rng.gen_range(0.2..0.8) * w as f64;
            let scale = spec.shift.object_scale * jitter;
            if c % 2 == 0 {
                let r = (area / PI).sqrt() * scale;
                for y in 0..h {
                    for x in 0..w {
                        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                        if dy * dy + dx * dx <= r * r {
                            labels[y * w + x] = c as u8;
                        }
                    }
                }
            } else {
                let half = area.sqrt() * scale / 2.0;
                for y in 0..h {
                    for x in 0..w {
                        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                        if dy.abs() <= half && dx.abs() <= half {
                            labels[y * w + x] = c as u8;
                        }
                    }
                }
            }
        }
    }
    labels
}

/// One scene of the domain. Deterministic in `(spec.seed, index)`; pixel
/// values are quantized to 8 bits so they survive a PNG round trip.
pub fn generate_scene(spec: &DomainSpec, index: u64) -> Result<(Image, LabelMap)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let (mut layout_rng, mut look_rng) = scene_rngs(spec.seed, index);
    let labels = paint_layout(spec, &mut layout_rng);

    let colors: Vec<[f64; 3]> = spec
        .palette
        .iter()
        .map(|&rgb| {
            let [hue, s, v] = rgb_to_hsv(rgb);
            hsv_to_rgb([hue + spec.shift.hue_offset, s, v])
        })
        .collect();
    let sigma = spec.noise * spec.shift.noise_scale;
    let noise = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let brightness = look_rng.gen_range(-0.05..0.05);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let c = labels[y * w + x] as usize;
            // Stripes whose orientation and period depend on the class only.
            let angle = PI * c as f64 / spec.classes() as f64;
            let period = 3.0 + c as f64;
            let phase = (x as f64 * angle.cos() + y as f64 * angle.sin()) / period;
            let stripe = spec.texture * (2.0 * PI * phase).sin();
            for ch in 0..3 {
                let n = if sigma > 0.0 {
                    noise.sample(&mut look_rng)
                } else {
                    0.0
                };
                let v = colors[c][ch] + stripe + brightness + n;
                data[ch * h * w + y * w + x] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    Ok((Image::new(h, w, data)?, LabelMap::new(1, h, w, labels)?))
}

/// Scenes `0..n` of a domain.
pub fn generate_dataset(spec: &DomainSpec, n: usize, split: &str) -> Result<Dataset> {
    spec.validate()?;
    let (images, labels) = (0..n as u64)
        .map(|i| generate_scene(spec, i))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    Ok(Dataset {
        class_names: spec.class_names.clone(),
        split: split.to_owned(),
        spec_hash: spec.hash(),
        images,
        labels,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    #[serde(rename = "C")]
    classes: usize,
    class_names: Vec<String>,
    n: usize,
    spec_hash: String,
    split: String,
    class_pixel_counts: Vec<u64>,
}

fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("images").join(format!("{i:06}.png"))
}

fn label_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("labels").join(format!("{i:06}.png"))
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()
        .and_then(|mut wr| wr.write_image_data(bytes))
        .map_err(|e| Error::format(path, e.to_string()))
}

fn read_png(path: &Path, color: png::ColorType) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(BufReader::new(file))
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != color || info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!(
                "expected 8-bit {color:?}, found {:?} {:?}",
                info.bit_depth, info.color_type
            ),
        ));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (i, (img, lab)) in ds.images.iter().zip(&ds.labels).enumerate() {
        let (h, w) = (img.height, img.width);
        let mut rgb = vec![0u8; 3 * h * w];
        for p in 0..h * w {
            for ch in 0..3 {
                rgb[3 * p + ch] = (img.data[ch * h * w + p] * 255.0).round() as u8;
            }
        }
        write_png(&image_path(dir, i), w, h, png::ColorType::Rgb, &rgb)?;
        write_png(&label_path(dir, i), w, h, png::ColorType::Grayscale, lab.values())?;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        classes: ds.classes(),
        class_names: ds.class_names.clone(),
        n: ds.len(),
        spec_hash: ds.spec_hash.clone(),
        split: ds.split.clone(),
        class_pixel_counts: ds.class_counts(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Err(Error::Missing {
            what: "dataset manifest",
            path,
        });
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::format(
            &path,
            format!("unsupported manifest version {}", m.version),
        ));
    }
    if m.classes != m.class_names.len() {
        return Err(Error::format(
            &path,
            format!(
                "C = {} but {} class names are listed",
                m.classes,
                m.class_names.len()
            ),
        ));
    }
    let mut images = Vec::with_capacity(m.n);
    let mut labels = Vec::with_capacity(m.n);
    for i in 0..m.n {
        let ip = image_path(dir, i);
        let (w, h, rgb) = read_png(&ip, png::ColorType::Rgb)?;
        let mut data = vec![0.0; 3 * h * w];
        for p in 0..h * w {
            for ch in 0..3 {
                data[ch * h * w + p] = rgb[3 * p + ch] as f64 / 255.0;
            }
        }
        images.push(Image::new(h, w, data).map_err(|e| Error::format(&ip, e.to_string()))?);

        let lp = label_path(dir, i);
        let (lw, lh, values) = read_png(&lp, png::ColorType::Grayscale)?;
        if (lw, lh) != (w, h) {
            return Err(Error::format(&lp, "label size differs from its image"));
        }
        if let Some(&bad) = values
            .iter()
            .find(|&&v| v != IGNORE_LABEL && v as usize >= m.classes)
        {
            return Err(Error::format(
                &lp,
                format!("label value {bad} out of range for C = {}", m.classes),
            ));
        }
        labels.push(LabelMap::new(1, h, w, values)?);
    }
    let ds = Dataset {
        class_names: m.class_names,
        split: m.split,
        spec_hash: m.spec_hash,
        images,
        labels,
    };
    if ds.class_counts() != m.class_pixel_counts {
        return Err(Error::format(&path, "class pixel counts disagree with labels"));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid_with_two_tail_classes() {
        let spec = DomainSpec::default();
        spec.validate().unwrap();
        assert_eq!(spec.tail_classes(), vec![3, 4]);
        DomainSpec::target_default().validate().unwrap();
    }

    #[test]
    fn hsv_round_trip() {
        for rgb in [[0.1, 0.5, 0.9], [0.9, 0.9, 0.1], [0.3, 0.3, 0.3], [1.0, 0.0, 0.2]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for (a, b) in rgb.iter().zip(back) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let spec = DomainSpec::target_default();
        let a = generate_scene(&spec, 7).unwrap();
        let b = generate_scene(&spec, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_scene(&spec, 8).unwrap());
        assert!(a.0.data().iter().all(|v| (0.0..=1.0).contains(v)));
        a.1.validate(spec.classes()).unwrap();
    }

    #[test]
    fn single_class_distribution() {
        let ds = Dataset {
            class_names: vec!["a".into(), "b".into(), "c".into()],
            split: "x".into(),
            spec_hash: String::new(),
            images: vec![Image::new(2, 2, vec![0.0; 12]).unwrap()],
            labels: vec![LabelMap::new(1, 2, 2, vec![0, 0, 0, IGNORE_LABEL]).unwrap()],
        };
        assert_eq!(category_distribution(&ds).unwrap(), vec![1.0, 0.0, 0.0]);
        let empty = Dataset {
            images: vec![],
            labels: vec![],
            ..ds
        };
        assert!(category_distribution(&empty).is_err());
    }

    #[test]
    fn spec_validation() {
        let mut s = DomainSpec::default();
        s.class_frequency = vec![0.2; 5];
        assert!(s.validate().is_err(), "no tail class");
        let mut s = DomainSpec::default();
        s.palette.pop();
        assert!(s.validate().is_err());
    }
}
