use pam::bitalloc::{
    joint_loss, joint_loss_with_noise, lambda_to_allocation, standard_normal, train_allocation, AllocTrainConfig,
};
use pam::dsp::{SpecExample, Spectrogram};
use pam::neural::model::uniform_tensor;
use pam::neural::{Architecture, DetectorSpec, ModelParams, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};

fn tiny() -> Architecture {
    Architecture::Detector(DetectorSpec {
        frames: 6,
        bands: 5,
        blocks: 2,
        layers_per_block: 2,
        growth: 2,
        kernel: 3,
    })
}

fn setup(seed: u64) -> (ModelParams<f64>, Vec<f64>, Tensor<f64>, Vec<usize>, Vec<f64>) {
    let arch = tiny();
    let m = ModelParams::<f64>::init(arch, seed).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let lam: Vec<f64> = (0..arch.bands()).map(|_| rng.gen_range(-0.5..1.5)).collect();
    let x = uniform_tensor(&[4, 1, arch.frames(), arch.bands()], seed + 1);
    let y = vec![0, 1, 1, 0];
    let beta = standard_normal(x.len(), seed + 2);
    (m, lam, x, y, beta)
}

#[test]
fn lambda_gradient_matches_finite_differences_with_frozen_noise() {
    let (m, lam, x, y, beta) = setup(3);
    let mu = 0.01;
    let j = joint_loss_with_noise(&m, &lam, &x, &y, mu, beta.clone()).unwrap();
    let eps = 1e-4;
    for f in 0..lam.len() {
        let mut up = lam.clone();
        up[f] += eps;
        let mut down = lam.clone();
        down[f] -= eps;
        let lu = joint_loss_with_noise(&m, &up, &x, &y, mu, beta.clone()).unwrap().loss;
        let ld = joint_loss_with_noise(&m, &down, &x, &y, mu, beta.clone()).unwrap().loss;
        let numeric = (lu - ld) / (2.0 * eps);
        let analytic = j.lambda_grad[f];
        assert!(
            (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()) + 1e-6,
            "band {f}: {analytic} vs {numeric}"
        );
    }
}

#[test]
fn joint_loss_parameter_gradients_match_finite_differences() {
    let (mut m, lam, x, y, beta) = setup(4);
    let j = joint_loss_with_noise(&m, &lam, &x, &y, 1e-3, beta.clone()).unwrap();
    let eps = 1e-4;
    let names: Vec<String> = m.params.keys().cloned().collect();
    for name in names {
        for i in 0..m.params[&name].len() {
            let orig = m.params[&name].data[i];
            m.params.get_mut(&name).unwrap().data[i] = orig + eps;
            let up = joint_loss_with_noise(&m, &lam, &x, &y, 1e-3, beta.clone()).unwrap().loss;
            m.params.get_mut(&name).unwrap().data[i] = orig - eps;
            let down = joint_loss_with_noise(&m, &lam, &x, &y, 1e-3, beta.clone()).unwrap().loss;
            m.params.get_mut(&name).unwrap().data[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = j.param_grads[&name][i];
            assert!(
                (analytic - numeric).abs() <= 1e-4 * analytic.abs().max(numeric.abs()) + 1e-6,
                "{name}[{i}]: {analytic} vs {numeric}"
            );
        }
    }
}

#[test]
fn lambda_gradient_is_the_noise_weighted_input_gradient_plus_mu() {
    let (m, lam, x, y, beta) = setup(5);
    let mu = 0.3;
    let j = joint_loss_with_noise(&m, &lam, &x, &y, mu, beta.clone()).unwrap();
    let bands = lam.len();
    for f in 0..bands {
        let s: f64 = (0..x.len()).filter(|i| i % bands == f).map(|i| beta[i] * j.input_grad[i]).sum();
        let expected = -(-lam[f]).exp() * s + mu;
        assert!(
            (j.lambda_grad[f] - expected).abs() <= 1e-6 * expected.abs().max(1e-12),
            "band {f}: {} vs {expected}",
            j.lambda_grad[f]
        );
    }
}

#[test]
fn joint_loss_decomposes_into_cross_entropy_and_penalty() {
    let (m, lam, x, y, _) = setup(6);
    // mu = 0 is the classification loss on the noised input
    let j0 = joint_loss(&m, &lam, &x, &y, 0.0, 42).unwrap();
    assert_eq!(j0.penalty, 0.0);
    assert_eq!(j0.loss, j0.class_loss);

    // straightline: noise the input by hand, run the plain model, add mu * sum
    let beta = standard_normal(x.len(), 42);
    let mut noised = x.clone();
    for (i, v) in noised.data.iter_mut().enumerate() {
        *v += (-lam[i % lam.len()]).exp() * beta[i];
    }
    let plain = m.backward(&noised, &y).unwrap().loss;
    let mu = 0.25;
    let j = joint_loss(&m, &lam, &x, &y, mu, 42).unwrap();
    let expected = plain + mu * lam.iter().sum::<f64>();
    assert!((j.loss - expected).abs() < 1e-12);

    // doubling lambda doubles the penalty exactly
    let doubled: Vec<f64> = lam.iter().map(|l| 2.0 * l).collect();
    let jd = joint_loss(&m, &doubled, &x, &y, mu, 42).unwrap();
    assert!((jd.penalty - 2.0 * j.penalty).abs() <= 1e-15 * j.penalty.abs().max(1.0));
    assert!(joint_loss(&m, &lam[1..], &x, &y, mu, 42).is_err());
}

fn toy(n: usize, seed: u64, random_labels: bool) -> Vec<SpecExample> {
    let arch = tiny();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = if random_labels { rng.gen_bool(0.5) } else { i % 2 == 0 };
            let mut data: Vec<f64> = (0..arch.frames() * arch.bands()).map(|_| rng.gen_range(-0.2..0.2)).collect();
            if i % 2 == 0 {
                for t in 0..arch.frames() {
                    data[t * arch.bands() + 1] += 1.0;
                }
            }
            SpecExample {
                spec: Spectrogram::new(arch.frames(), arch.bands(), data).unwrap(),
                frame_labels: vec![label; arch.frames()],
                label,
            }
        })
        .collect()
}

fn cfg(mu: f64, epochs: usize, seed: u64) -> AllocTrainConfig {
    AllocTrainConfig {
        mu,
        lambda_init: 2.0,
        train: TrainConfig {
            epochs,
            batch_size: 8,
            learning_rate: 0.05,
            crop_pad: 0,
            seed,
            ..TrainConfig::default()
        },
    }
}

#[test]
fn heavy_penalty_drives_lambda_down_every_epoch() {
    let data = toy(64, 7, false);
    let mut c = cfg(1.0, 10, 8);
    c.train.learning_rate = 0.03;
    c.train.batch_size = 16;
    let (lam, _, h) = train_allocation(tiny(), &data, &c, None).unwrap();
    let sums = h.lambda_sums();
    assert_eq!(sums.len(), 11);
    for w in sums.windows(2) {
        assert!(w[1] < w[0], "{sums:?}");
    }
    assert_eq!(h.epochs.last().unwrap().lambda, lam);
}

#[test]
fn without_penalty_pure_noise_labels_show_no_systematic_downward_drift() {
    // With mu = 0 only the classification term moves lambda, and that term
    // never rewards more noise on average, so the sum should not fall.
    let mut drifts = Vec::new();
    for seed in 0..5 {
        let data = toy(48, 100 + seed, true);
        let (lam, _, h) = train_allocation(tiny(), &data, &cfg(0.0, 4, 200 + seed), None).unwrap();
        drifts.push(lam.iter().sum::<f64>() - h.initial_lambda.iter().sum::<f64>());
    }
    let downward = drifts.iter().filter(|&&d| d < 0.0).count();
    assert!(downward <= 2, "{drifts:?}");
}

#[test]
fn allocation_training_is_deterministic() {
    let data = toy(32, 9, false);
    let a = train_allocation(tiny(), &data, &cfg(1e-7, 2, 10), None).unwrap();
    let b = train_allocation(tiny(), &data, &cfg(1e-7, 2, 10), None).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    assert_eq!(a.2.epochs.len(), 2);
    assert!(train_allocation(tiny(), &[], &cfg(1e-7, 2, 10), None).is_err());
    assert!(train_allocation(tiny(), &data, &cfg(-1.0, 2, 10), None).is_err());
}

#[test]
fn warm_start_keeps_the_given_classifier_as_the_starting_point() {
    let data = toy(16, 11, false);
    let start = ModelParams::<f32>::init(tiny(), 99).unwrap();
    let mut c = cfg(1e-7, 1, 12);
    c.train.epochs = 0;
    let (_, m, _) = train_allocation(tiny(), &data, &c, Some(start.clone())).unwrap();
    assert_eq!(m, start);
    let other = ModelParams::<f32>::init(Architecture::Detector(DetectorSpec::default()), 1).unwrap();
    assert!(train_allocation(tiny(), &data, &c, Some(other)).is_err());
}

#[test]
fn learned_plans_respect_budget_and_floor() {
    let lam = standard_normal(47, 5);
    for budget in [235, 329, 423, 1504] {
        let p = lambda_to_allocation(&lam, budget, 5).unwrap();
        assert_eq!(p.total_bits(), budget);
        assert!(p.bits.iter().all(|&b| (5..=32).contains(&b)));
    }
}

