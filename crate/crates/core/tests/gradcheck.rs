mod common;

use common::{
    band_labels, disc_gradients, entry_rel_error, net_fixture, norm_rel_error, random_embeddings, total_gradients,
    total_tensor_error, FD_STEP,
};
use curvseg::embednet::LossConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn disc_fixture(seed: u64) -> (curvseg::EmbeddingField, curvseg::LabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = band_labels(8, 8, 2 + (seed as usize % 2), &mut rng);
    // Loose clusters close together: both pull and push hinges are active.
    let emb = random_embeddings(&labels, 1.0, 1.0, &mut rng);
    (emb, labels)
}

#[test]
fn discriminative_gradient_matches_finite_differences() {
    let cfg = LossConfig::default();
    for seed in 0..10 {
        let (emb, labels) = disc_fixture(seed);
        let (a, n) = disc_gradients(&emb, &labels, &cfg, FD_STEP);
        let err = norm_rel_error(&a, &n);
        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn discriminative_gradient_is_entrywise_exact_at_fine_step() {
    let cfg = LossConfig::default();
    for seed in 0..10 {
        let (emb, labels) = disc_fixture(seed);
        let (a, n) = disc_gradients(&emb, &labels, &cfg, 1e-5);
        let err = entry_rel_error(&a, &n);
        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn total_gradient_matches_finite_differences() {
    let cfg = LossConfig::default();
    for seed in 0..3 {
        let (a, n) = total_gradients(&net_fixture(seed), &cfg, FD_STEP);
        let err = total_tensor_error(&a, &n);
        assert!(err <= 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn total_gradient_is_entrywise_exact_at_fine_step() {
    let cfg = LossConfig::default();
    let (a, n) = total_gradients(&net_fixture(11), &cfg, 1e-5);
    let err = entry_rel_error(&a.to_flat(), &n.to_flat());
    assert!(err <= 1e-4, "relative error {err}");
}

#[test]
fn gradient_with_shifted_loss_weights() {
    let cfg = LossConfig {
        w_dice: 1.0,
        w_var: 2.0,
        w_dist: 0.5,
        ..LossConfig::default()
    };
    let (a, n) = total_gradients(&net_fixture(5), &cfg, FD_STEP);
    let err = total_tensor_error(&a, &n);
    assert!(err <= 1e-4, "relative error {err}");
}
