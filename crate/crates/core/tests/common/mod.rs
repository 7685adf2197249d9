//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use featadv::losses::{LabelMap, IGNORE_LABEL};
use featadv::math::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Central finite difference of `f` at `x`, one coordinate at a time.
pub fn central_difference(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.sub(b).unwrap().norm_l2();
    let scale = a.norm_l2().max(b.norm_l2());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Channel softmax of Gaussian logits: every pixel a strictly positive
/// distribution.
pub fn random_softmax(rng: &mut ChaCha8Rng, shape: [usize; 4], temperature: f64) -> Tensor {
    let [n, c, h, w] = shape;
    let logits = gaussian(rng, &shape, temperature);
    let hw = h * w;
    let mut out = Tensor::zeros(&shape);
    for i in 0..n {
        for q in 0..hw {
            let idx = |k: usize| (i * c + k) * hw + q;
            let m = (0..c).map(|k| logits.data()[idx(k)]).fold(f64::MIN, f64::max);
            let z: f64 = (0..c).map(|k| (logits.data()[idx(k)] - m).exp()).sum();
            for k in 0..c {
                out.data_mut()[idx(k)] = (logits.data()[idx(k)] - m).exp() / z;
            }
        }
    }
    out
}

/// Uniform labels in `0..classes` with a fraction of ignore pixels; the
/// first pixel is always labeled.
pub fn random_labels(
    rng: &mut ChaCha8Rng,
    (n, h, w): (usize, usize, usize),
    classes: usize,
    ignore: f64,
) -> LabelMap {
    let mut v: Vec<u8> = (0..n * h * w)
        .map(|_| {
            if rng.gen_bool(ignore) {
                IGNORE_LABEL
            } else {
                rng.gen_range(0..classes) as u8
            }
        })
        .collect();
    if v[0] == IGNORE_LABEL {
        v[0] = 0;
    }
    LabelMap::new(n, h, w, v).unwrap()
}

/// A fast end-to-end configuration writing under `out`.
pub fn tiny_toml(out: &Path) -> String {
    format!(
        r#"seed = 3
output_dir = "{}"

[data]
n_source = 8
n_target = 8
n_target_eval = 4

[data.source]
height = 32
width = 32

[data.target]
height = 32
width = 32

[model]
encoder_channels = [4, 8, 8, 8]
head_hidden = 8
disc_channels = [4, 4, 4]

[perturb]
k = 2

[train]
lr = 2.5e-3
pretrain_iters = 4
max_iter = 3
batch_size = 2

[eval]
seeds = [3, 4]
grid = "comparison"
"#,
        out.display()
    )
}
