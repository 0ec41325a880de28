use mobichain_core::model::{init_model, ModelConfig};
use mobichain_core::transfer::*;
use mobichain_core::encoding::{encode_day_windowed, EncodeConfig};
use mobichain_core::simgen::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig { d_model: 16, heads: 2, mlp_hidden: 24, dow_embed_dim: 4, time_embed_dim: 4,
        dropout_p: 0.0, seed: 5, ..ModelConfig::default() }
}

#[test]
fn two_identical_partial_runs() {
    let params = init_model::<f32>(&tiny_model()).unwrap();
    let profile = build_region_profile("region_B_egypt_like").unwrap();
    let complete = generate_dataset(&profile, 4, 4, chrono::NaiveDate::from_ymd_opt(2024, 3, 4).unwrap(), 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let dcfg = DegradationConfig::default();
    let enc = EncodeConfig::default();
    let targets: Vec<_> = complete.iter().take(10).map(|c| {
        let (d, m) = degrade_observation(c, &dcfg, &mut rng);
        encode_day_windowed(&d, &enc, Some(&m))
    }).filter(|s| s.observed_count() >= 24).collect();
    let cfg = TransferConfig { max_iterations: 2, epochs_per_iteration: 4, batch_size: 16, grad_shards: 2, seed: 23, ..TransferConfig::default() };
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let (_, s1) = run_transfer_loop(&params, &targets, &cfg, Some(d1.path())).unwrap();
    let (_, s2) = run_transfer_loop(&params, &targets, &cfg, Some(d2.path())).unwrap();
    assert_eq!(s1.trajectory, s2.trajectory, "identical runs differ");
    let j1 = std::fs::read_to_string(d1.path().join("trajectory.json")).unwrap();
    // round-trip check
    let parsed: Vec<mobichain_core::metrics::JsdReport> = serde_json::from_str(&j1).unwrap();
    assert_eq!(parsed, s1.trajectory, "JSON round trip changed values");
}
