//! Manual timing probe for the training hot path. Ignored by default; run
//! with `cargo test --test perf_probe -- --ignored --nocapture`.

use gaugefill::data::mask::{dynamic_mask, FillMode};
use gaugefill::synth::{generate, FieldSpec};
use gaugefill::train::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
#[ignore]
fn time_default_model_training_step() {
    let ds = generate(&FieldSpec {
        seed: 1,
        n_stations: 80,
        n_snapshots: 32,
        ..Default::default()
    })
    .unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let seqs: Vec<_> = (0..16)
        .filter_map(|i| {
            dynamic_mask(&ds.snapshots[i % ds.snapshots.len()], i, 0.2, FillMode::Mean, &mut rng)
                .unwrap()
        })
        .collect();
    assert!(!seqs.is_empty());

    // One full epoch over 32 snapshots with remask 1, default model dims.
    let cfg = TrainConfig {
        epochs: 1,
        remask_count: 1,
        ..Default::default()
    };
    let t0 = std::time::Instant::now();
    train(&ds.roster, &ds.snapshots, &cfg, |_, _| {}).unwrap();
    let dt = t0.elapsed();
    println!(
        "epoch over {} sequences took {:?} ({:.1} ms/sequence)",
        ds.snapshots.len(),
        dt,
        dt.as_secs_f64() * 1e3 / ds.snapshots.len() as f64
    );
}
