//! Reverse-mode gradients of the tape primitives and both networks against
//! central differences.

mod common;

use featadv::losses::{self, DomainLabel};
use featadv::math::{Tape, Tensor, Var};
use featadv::models::{Discriminator, ModelConfig, SegmentationModel};
use featadv::perturb::{Domain, FeatureMap, Layer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{central_difference, gaussian, random_labels, random_softmax, relative_error};

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

/// Builds `op` on fresh leaves, reduces its output with fixed random weights
/// and compares the gradient for every input with central differences.
fn check_op(inputs: &[Tensor], seed: u64, op: impl Fn(&mut Tape, &[Var]) -> Var) {
    let eval = |args: &[Tensor]| -> (Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = args.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = op(&mut tape, &vars);
        (tape, vars, out)
    };
    let (mut tape, vars, out) = eval(inputs);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = gaussian(&mut rng, tape.value(out).shape(), 1.0);
    let dot = |t: &Tensor| t.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();
    let value = dot(tape.value(out));
    let root = tape.loss(vec![out], value, vec![r.clone()]).unwrap();
    let mut grads = tape.backward(root).unwrap();

    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.take(v).expect("gradient for every leaf");
        let mut args = inputs.to_vec();
        let fd = central_difference(&inputs[i], H, |x| {
            args[i] = x.clone();
            let (tape, _, out) = eval(&args);
            dot(tape.value(out))
        });
        let err = relative_error(&fd, &analytic);
        assert!(err < TOL, "input {i}: relative error {err}");
    }
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (stride, padding, size) in [(1, 1, 5), (2, 1, 6), (2, 0, 7), (1, 0, 4)] {
        let x = gaussian(&mut rng, &[2, 3, size, size], 1.0);
        let w = gaussian(&mut rng, &[4, 3, 3, 3], 0.5);
        let b = gaussian(&mut rng, &[4], 0.5);
        check_op(&[x, w, b], 2, |t, v| t.conv2d(v[0], v[1], v[2], stride, padding).unwrap());
    }
}

#[test]
fn pointwise_nonlinearity_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = gaussian(&mut rng, &[2, 3, 4, 4], 1.0);
    check_op(std::slice::from_ref(&x), 4, |t, v| t.relu(v[0]));
    check_op(std::slice::from_ref(&x), 5, |t, v| t.leaky_relu(v[0], 0.2));
    check_op(&[x], 6, |t, v| t.sigmoid(v[0]));
}

#[test]
fn upsample_and_softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = gaussian(&mut rng, &[2, 3, 2, 3], 1.0);
    check_op(std::slice::from_ref(&x), 8, |t, v| t.upsample(v[0], 5, 7).unwrap());
    check_op(std::slice::from_ref(&x), 9, |t, v| t.upsample(v[0], 8, 12).unwrap());
    check_op(&[x], 10, |t, v| t.softmax(v[0]).unwrap());
    let sq = gaussian(&mut rng, &[1, 2, 2, 2], 1.0);
    check_op(&[sq], 13, |t, v| t.upsample(v[0], 16, 16).unwrap());
}

#[test]
fn weighted_sum_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = gaussian(&mut rng, &[1, 2, 3, 3], 1.0);
    let b = gaussian(&mut rng, &[1, 2, 3, 3], 1.0);
    check_op(&[a, b], 12, |t, v| t.weighted_sum(&[(v[0], 0.7), (v[1], -1.3)]).unwrap());
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder_channels: vec![3, 4, 4],
        head_hidden: 4,
        disc_channels: vec![3, 3],
    }
}

#[test]
fn segmentation_model_parameter_gradients() {
    let classes = 3;
    let model = SegmentationModel::new(&tiny_model_config(), classes, 5)
        .unwrap()
        .with_split(Layer::Block(2))
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = gaussian(&mut rng, &[2, 3, 8, 8], 1.0);
    let y = random_labels(&mut rng, (2, 8, 8), classes, 0.1);

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true, true);
    let xv = tape.constant(x.clone());
    let f = model.g_forward(&mut tape, &bound, xv).unwrap();
    let p = model.f_forward(&mut tape, &bound, f).unwrap();
    let loss = losses::cross_entropy_node(&mut tape, p, &y).unwrap();
    let mut grads = tape.backward(loss).unwrap();
    let analytic = bound.collect(&mut grads);

    for (i, g) in analytic.iter().enumerate() {
        let g = g.as_ref().expect("every parameter is trainable here");
        let base = model.params()[i].clone();
        let fd = central_difference(&base, H, |w| {
            let mut m = model.clone();
            *m.params_mut()[i] = w.clone();
            losses::cross_entropy(m.predict(&x).unwrap().tensor(), &y).unwrap()
        });
        let err = relative_error(&fd, g);
        assert!(err < 1e-5, "parameter {i}: relative error {err}");
    }
}

#[test]
fn classifier_gradient_with_respect_to_features() {
    let classes = 3;
    let model = SegmentationModel::new(&tiny_model_config(), classes, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = gaussian(&mut rng, &[1, 3, 16, 16], 1.0);
    let f = model.extract_features(&x, Domain::Target).unwrap();
    // Shift off zero: an all-zero feature column with zero head bias sits
    // exactly on the ReLU kink.
    let f = FeatureMap::new(f.values().map(|v| v + 0.1), Domain::Target, f.layer()).unwrap();
    let y = random_labels(&mut rng, (1, 16, 16), classes, 0.0);

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false, false);
    let fv = tape.leaf(f.values().clone());
    let p = model.f_forward(&mut tape, &bound, fv).unwrap();
    // Cross entropy rather than Lovász: upsampling replicates edge pixels,
    // and the resulting ties put Lovász on a kink.
    let loss = losses::cross_entropy_node(&mut tape, p, &y).unwrap();
    let analytic = tape.grad(loss, fv).unwrap();

    let fd = central_difference(f.values(), H, |v| {
        let fm = FeatureMap::new(v.clone(), Domain::Target, f.layer()).unwrap();
        losses::cross_entropy(model.classify(&fm).unwrap().tensor(), &y).unwrap()
    });
    let err = relative_error(&fd, &analytic);
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn discriminator_gradient_with_respect_to_its_input() {
    let classes = 3;
    let disc = Discriminator::new(&tiny_model_config(), classes, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let probs = random_softmax(&mut rng, [2, classes, 8, 8], 1.0);

    for label in [DomainLabel::Source, DomainLabel::Target] {
        let mut tape = Tape::new();
        let bound = disc.bind(&mut tape, false);
        let pv = tape.leaf(probs.clone());
        let d = disc.forward(&mut tape, &bound, pv).unwrap();
        let loss = losses::domain_term_node(&mut tape, d, label).unwrap();
        let analytic = tape.grad(loss, pv).unwrap();

        // Probes leave the simplex, so evaluate on a tape rather than
        // through the validated `discriminate`.
        let fd = central_difference(&probs, H, |p| {
            let mut tape = Tape::new();
            let bound = disc.bind(&mut tape, false);
            let pv = tape.constant(p.clone());
            let d = disc.forward(&mut tape, &bound, pv).unwrap();
            losses::domain_term_grad(tape.value(d), label).0
        });
        let err = relative_error(&fd, &analytic);
        assert!(err < 1e-5, "{label:?}: relative error {err}");
    }
}
