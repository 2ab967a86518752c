use gadnet::data::synthetic::build_synthetic_dataset;
use gadnet::data::{sample_batch, LoadedDataset};
use gadnet::training::{init_stage, stage1_step, stage2_step, pretrain_c2_step, StageKind, TrainingConfig};
use std::time::Instant;

fn main() {
    let dir = std::env::temp_dir().join("gadnet_pilot_data");
    if !dir.join("factors.csv").exists() {
        println!("building dataset...");
        build_synthetic_dataset(10, 50, 7, 32, &dir).unwrap();
    }
    let (manifest, _) = gadnet::data::load_manifest(&dir, 1).unwrap();
    let data = LoadedDataset::load(manifest, 32).unwrap();
    let cfg = TrainingConfig::desk();
    let out = std::env::temp_dir().join("gadnet_pilot_out");

    let mut state = init_stage(StageKind::Stage1, &cfg, &out).unwrap();
    // warmup
    let batch = sample_batch(&data, 16, &mut state.rng).unwrap();
    stage1_step(&mut state, &batch).unwrap();
    let t = Instant::now();
    let n = 20;
    for _ in 0..n {
        let batch = sample_batch(&data, 16, &mut state.rng).unwrap();
        stage1_step(&mut state, &batch).unwrap();
    }
    let per = t.elapsed().as_secs_f64() / n as f64;
    println!("stage1: {:.3} s/iter -> 20k iters = {:.1} min", per, per * 20_000.0 / 60.0);

    let mut c2 = init_stage(StageKind::C2Pretrain, &cfg, &out).unwrap();
    let batch = sample_batch(&data, 16, &mut c2.rng).unwrap();
    pretrain_c2_step(&mut c2, &batch).unwrap();
    let t = Instant::now();
    for _ in 0..n {
        let batch = sample_batch(&data, 16, &mut c2.rng).unwrap();
        pretrain_c2_step(&mut c2, &batch).unwrap();
    }
    let per = t.elapsed().as_secs_f64() / n as f64;
    println!("c2: {:.3} s/iter -> 4k iters = {:.1} min", per, per * 4_000.0 / 60.0);

    // fake a stage-2 state without prerequisites by reusing stage-1 nets
    let mut s2 = init_stage(StageKind::Stage1, &cfg, &out).unwrap();
    s2.stage = StageKind::Stage2;
    s2.nets.insert("c2".into(), c2.nets["c2"].clone());
    let mut rngi = gadnet::rng::Stream::new(1, "pilot-d");
    s2.nets.insert("discriminator".into(), gadnet::networks::build_network::<f32>(&cfg.arch, gadnet::networks::Role::Discriminator, &mut rngi).unwrap());
    s2.opt.insert("d".into(), gadnet::training::OptState::new(cfg.stage2.optimizer));
    s2.opt.insert("c2".into(), gadnet::training::OptState::new(cfg.stage2.optimizer));
    s2.opt.insert("gs".into(), gadnet::training::OptState::new(cfg.stage2.optimizer));
    let batch = sample_batch(&data, 16, &mut s2.rng).unwrap();
    stage2_step(&mut s2, &batch).unwrap();
    let t = Instant::now();
    for _ in 0..n {
        let batch = sample_batch(&data, 16, &mut s2.rng).unwrap();
        stage2_step(&mut s2, &batch).unwrap();
    }
    let per = t.elapsed().as_secs_f64() / n as f64;
    println!("stage2: {:.3} s/iter -> 20k iters = {:.1} min", per, per * 20_000.0 / 60.0);
}
