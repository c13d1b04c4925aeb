//! The two-party engine against the cleartext fixed-point engine.

use duet_core::bfv::BfvParams;
use duet_core::linear::DpConfig;
use duet_core::nn::{
    data_owner_step, model_owner_step, prepare_banks, reference_step, LayerSpec, LinearMode, Model, ModelSpec, Network, Private,
    Reference, TrainConfig,
};
use duet_core::nonlinear::TruncMode;
use duet_core::ot::OtBackend;
use duet_core::party::{local_pair, run_both, Party};
use duet_core::prep::{BankPlan, ScalarMode};
use duet_core::ring::{RingParams, RingTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn he_pair(seed: u64) -> (Party, Party) {
    let (mut a, mut b) = local_pair(RingParams::small(), OtBackend::Dealer, seed);
    run_both(&mut a, &mut b, |p| p.setup_he(BfvParams::small()).unwrap());
    (a, b)
}

fn batch(spec: &ModelSpec, b: usize, seed: u64) -> (RingTensor, Vec<u8>) {
    let ring = RingParams::small();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = b * spec.input_len();
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..2.0)).collect();
    let labels = (0..b).map(|_| rng.random_range(0..spec.classes() as u8)).collect();
    let mut shape = vec![b];
    shape.extend_from_slice(&spec.input);
    (RingTensor::encode(&ring, &shape, &x, ring.frac_bits).unwrap(), labels)
}

/// Run `steps` private steps and the same steps in the clear; every
/// revealed gradient and the final parameters must agree exactly.
fn equivalence(spec: ModelSpec, b: usize, steps: usize, prep: bool) {
    let ring = RingParams::small();
    let cfg = TrainConfig {
        batch: b,
        lr: 0.05,
        ..Default::default()
    };
    let (mut mo, mut dataowner) = he_pair(11);
    let mut private_model = Model::init(spec.clone(), 4).unwrap();
    let mut reference_model = private_model.clone();
    let mut reference = Reference::new(ring, DpConfig::disabled(), 0);
    let peer = Network::peer(spec.clone()).unwrap();
    let modes = if prep {
        let net = private_model.quantize(&ring).unwrap();
        let plan = BankPlan {
            masks: 2,
            scalars: ScalarMode::Uniform,
            reuse_cap: None,
            need_input_grad: true,
        };
        let (a, bk) = run_both(&mut mo, &mut dataowner, |p| {
            let view = if p.is_mo() { &net } else { &peer };
            prepare_banks(p, view, b, &plan).unwrap()
        });
        (LinearMode::Prep(a), LinearMode::Prep(bk))
    } else {
        (LinearMode::FullHe, LinearMode::FullHe)
    };
    let mut mo_engine = Private::new(&mut mo, modes.0, TruncMode::Faithful, DpConfig::disabled());
    let mut do_engine = Private::new(&mut dataowner, modes.1, TruncMode::Faithful, DpConfig::disabled());
    for step in 0..steps {
        let (x, labels) = batch(&spec, b, 100 + step as u64);
        let net_before = reference_model.quantize(&ring).unwrap();
        let expected = duet_core::nn::train_step(&mut reference, &net_before, Some((&x, &labels)), b).unwrap();
        reference_step(&mut reference_model, &ring, &mut reference, &cfg, &x, &labels).unwrap();
        let (mo_res, do_res) = std::thread::scope(|s| {
            let h = s.spawn(|| data_owner_step(&mut do_engine, &peer, &x, &labels).unwrap());
            let m = model_owner_step(&mut mo_engine, &mut private_model, &cfg).unwrap();
            (m, h.join().unwrap())
        });
        assert_eq!(mo_res.grads, expected.grads, "step {step}: gradients differ");
        assert_eq!(do_res.logits, expected.logits);
        assert_eq!(do_res.loss, expected.loss);
        assert!(mo_res.loss.is_none() && do_res.grads.is_none());
    }
    assert_eq!(private_model, reference_model);
}

fn tiny_mlp() -> ModelSpec {
    ModelSpec::new(
        "tiny_mlp",
        vec![1, 4, 4],
        vec![
            LayerSpec::Flatten,
            LayerSpec::dense(16, 12),
            LayerSpec::Relu,
            LayerSpec::dense(12, 8),
            LayerSpec::Relu,
            LayerSpec::dense(8, 3),
        ],
    )
    .unwrap()
}

fn tiny_cnn() -> ModelSpec {
    ModelSpec::new(
        "tiny_cnn",
        vec![2, 8, 8],
        vec![
            LayerSpec::conv(2, 3, 3, 1, 1, 8),
            LayerSpec::Relu,
            LayerSpec::AvgPool2,
            LayerSpec::conv(3, 4, 3, 2, 1, 4),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::dense(16, 5),
        ],
    )
    .unwrap()
}

#[test]
fn fullhe_matches_reference_mlp() {
    equivalence(tiny_mlp(), 4, 3, false);
}

#[test]
fn prep_matches_reference_mlp() {
    equivalence(tiny_mlp(), 4, 3, true);
}

#[test]
fn fullhe_matches_reference_cnn() {
    equivalence(tiny_cnn(), 3, 2, false);
}

#[test]
fn prep_matches_reference_cnn() {
    equivalence(tiny_cnn(), 3, 2, true);
}
