use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use csr_core::collab::{normalize_matrix, CollabState};
use csr_core::data::{make_gaussian_clusters, ClusterSpec};
use csr_core::model::ModelState;
use csr_core::noise::NoiseParams;
use csr_core::rundir::metrics_csv;
use csr_core::trainer::{batch_gradient, train, Exec, Method, TrainConfig};

#[test]
fn scheduled_and_sequential_batches_agree_bitwise() {
    let (tr, _) = make_gaussian_clusters(&ClusterSpec {
        samples: 1500,
        classes: 5,
        dim: 10,
        separation: 3.0,
        within_std: 1.0,
        seed: 4,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = ModelState::new(&[10, 24, 24, 5], &mut rng).unwrap();
    let noise = NoiseParams::new(tr.len(), 5, 1e-2, &mut rng);
    let mut collab = CollabState::identity(5, 1e-3, 1e-3);
    collab.m[3] = 0.07;
    collab.m[7] = -0.02;
    let norm = normalize_matrix(&collab).unwrap();
    let inputs = tr.rows();
    let weights: Vec<f64> = (0..tr.len()).map(|i| 0.3 + 0.7 * ((i * 37) % 100) as f64 / 100.0).collect();

    for size in [1, 7, 128, 1200] {
        let batch: Vec<usize> = (0..size).map(|i| (i * 13) % tr.len()).collect();
        let (ga, la) = batch_gradient(&model, &inputs, &tr.labels, &batch, &norm, &noise, &weights, Exec::Default).unwrap();
        let (gb, lb) =
            batch_gradient(&model, &inputs, &tr.labels, &batch, &norm, &noise, &weights, Exec::Sequential).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        let (fa, fb) = (ga.flat(), gb.flat());
        assert!(fa.iter().zip(&fb).all(|(a, b)| a.to_bits() == b.to_bits()), "batch {size}");
    }
}

#[test]
fn training_is_reproducible_for_every_method() {
    let (tr, te) = make_gaussian_clusters(&ClusterSpec {
        samples: 500,
        classes: 4,
        dim: 6,
        separation: 3.0,
        within_std: 1.0,
        seed: 2,
    })
    .unwrap();
    for method in Method::ALL {
        let cfg = TrainConfig {
            method,
            epochs: 6,
            warmup: Some(2),
            batch_size: 50,
            ..TrainConfig::default()
        };
        let a = train(&tr, &te, &cfg).unwrap();
        let b = train(&tr, &te, &cfg).unwrap();
        assert_eq!(metrics_csv(&a.log), metrics_csv(&b.log), "{method}");
        assert_eq!(a.model, b.model, "{method}");
    }
}
