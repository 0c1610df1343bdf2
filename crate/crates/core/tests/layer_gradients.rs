//! Finite-difference checks of every layer's backward pass, plus a
//! whole-network check of the auto-encoder, all in double precision.

use dbc_core::fcae::{FcaeModel, NetworkSpec, ReconstructionProbe};
use dbc_core::tensor::{grad_check, max_pool_forward, BatchNorm, Conv, Deconv, Layer, LayerProbe, Mode, Shape4, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

fn uniform(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values at least 0.05 away from zero, so no central difference straddles
/// the ReLU kink.
fn off_zero(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A shuffled grid of well-separated values, so every 2×2 window has a clear
/// maximum.
fn separated(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4<f64> {
    let n = shape.len();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor4::from_vec(shape, vals).unwrap()
}

fn check(layer: Layer<f64>, input: Tensor4<f64>, mode: Mode, switches: Option<dbc_core::tensor::PoolSwitches>, rng: &mut ChaCha8Rng) {
    let kind = layer.kind().name();
    let out = layer.output_shape(input.shape(), switches.as_ref()).unwrap();
    let weights = uniform(out, rng);
    let mut probe = LayerProbe::new(layer, input, mode, switches, weights).unwrap();
    let report = grad_check(&mut probe, STEP, FLOOR, None);
    assert!(report.passes(TOL), "{kind} {mode:?}: {:?}", report.groups);
    assert!(report.checked > 0);
}

#[test]
fn conv_with_and_without_padding() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, pad) = [(3, 0), (3, 1), (2, 0), (1, 0)][seed as usize % 4];
        let mut conv = Conv::<f64>::new(2, 3, k, pad);
        conv.init(&mut rng);
        conv.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let x = uniform(Shape4::new(2, 2, 5, 5), &mut rng);
        check(Layer::Conv(conv), x, Mode::Train, None, &mut rng);
    }
}

#[test]
fn deconv_with_and_without_padding() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (k, pad) = [(3, 0), (3, 1), (4, 0), (1, 0)][seed as usize % 4];
        let mut deconv = Deconv::<f64>::new(3, 2, k, pad);
        deconv.init(&mut rng);
        deconv.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let x = uniform(Shape4::new(2, 3, 4, 4), &mut rng);
        check(Layer::Deconv(deconv), x, Mode::Train, None, &mut rng);
    }
}

#[test]
fn batch_norm_train_and_eval() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut bn = BatchNorm::<f64>::new(3);
        for c in 0..3 {
            bn.gamma[c] = rng.random_range(0.5..1.5);
            bn.beta[c] = rng.random_range(-0.5..0.5);
            bn.running_mean[c] = rng.random_range(-0.5..0.5);
            bn.running_var[c] = rng.random_range(0.5..2.0);
        }
        let x = uniform(Shape4::new(3, 3, 3, 3), &mut rng);
        check(Layer::BatchNorm(bn.clone()), x.clone(), Mode::Train, None, &mut rng);
        check(Layer::BatchNorm(bn), x, Mode::Eval, None, &mut rng);
    }
}

#[test]
fn relu_away_from_the_kink() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let x = off_zero(Shape4::new(2, 2, 3, 3), &mut rng);
        check(Layer::Relu, x, Mode::Train, None, &mut rng);
    }
}

#[test]
fn max_pool_and_unpool() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = separated(Shape4::new(2, 2, 4, 6), &mut rng);
        let (_, switches) = max_pool_forward(&x).unwrap();
        check(Layer::MaxPool, x, Mode::Train, None, &mut rng);
        let y = uniform(switches.output_shape, &mut rng);
        check(Layer::Unpool, y, Mode::Train, Some(switches), &mut rng);
    }
}

#[test]
fn whole_autoencoder_in_both_modes() {
    let spec = NetworkSpec::parse("tiny", (1, 8, 8), "conv3x3,pool,conv3x4").unwrap();
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let model = FcaeModel::<f64>::new(spec.clone(), &mut rng);
        let input = separated(model.input_shape(3), &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let mut probe = ReconstructionProbe { model: model.clone(), input: input.clone(), mode };
            let report = grad_check(&mut probe, STEP, 1e-4, Some(12));
            // ReLU kinks inside the network can occasionally sit within one
            // step of a perturbed unit, so this bound is looser than the
            // per-layer one.
            assert!(report.max_rel_error < 1e-3, "seed {seed} {mode:?}: {:?}", report.groups);
        }
    }
}
