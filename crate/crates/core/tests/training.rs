use sparsetrain::harness::config::ExperimentConfig;
use sparsetrain::harness::task::generate_task;
use sparsetrain::harness::train::{run_training, train_replica};

#[test]
fn loss_halves_over_twenty_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ratios: Vec<f64> = (0..20)
        .map(|seed| {
            let mut cfg = ExperimentConfig::default();
            cfg.seed = seed;
            let s = run_training(&cfg, &tmp.path().join(seed.to_string())).unwrap();
            assert_eq!(s.steps, cfg.train.steps);
            s.final_eval_loss / s.initial_eval_loss
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let median = 0.5 * (ratios[9] + ratios[10]);
    assert!(median < 0.5, "median final/initial = {median}");
}

#[test]
fn smoothed_loss_strictly_decreases() {
    for seed in 0..20 {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.train.eval_every = 0;
        assert_eq!((cfg.model.d_model, cfg.model.n_experts, cfg.model.k_top, cfg.train.steps), (16, 8, 2, 500));
        let data = generate_task(&cfg.task, &cfg.model, seed).unwrap();
        let out = train_replica(&cfg, &data, 1, cfg.train.spike_guard, None, false).unwrap();
        let losses: Vec<f64> = out.records.iter().map(|r| r.loss).collect();
        assert_eq!(losses.len(), 500);
        let blocks: Vec<f64> = losses.chunks(50).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        for (i, w) in blocks.windows(2).enumerate() {
            assert!(w[1] < w[0], "seed {seed}: block {} mean {} >= block {i} mean {}", i + 1, w[1], w[0]);
        }
    }
}
