use gadnet::data::synthetic::build_synthetic_dataset;
use gadnet::data::{sample_batch, LoadedDataset};
use gadnet::networks::register_params;
use gadnet::training::*;
use gadnet::tensor::Graph;
use std::time::Instant;

fn main() {
    let dir = std::env::temp_dir().join("gadnet_pilot_data");
    if !dir.join("factors.csv").exists() {
        build_synthetic_dataset(10, 50, 7, 32, &dir).unwrap();
    }
    let (manifest, _) = gadnet::data::load_manifest(&dir, 1).unwrap();
    let data = LoadedDataset::load(manifest, 32).unwrap();
    let cfg = TrainingConfig::desk();
    let out = std::env::temp_dir().join("gadnet_pilot_out");
    let mut state = init_stage(StageKind::Stage1, &cfg, &out).unwrap();
    let batch = sample_batch(&data, 16, &mut state.rng).unwrap();
    let noise = draw_noise::<f32>(&mut state.rng, &cfg.arch, 16);
    let labels: Vec<usize> = batch.labels.iter().map(|a| a.0).collect();
    let labels_mm: Vec<usize> = batch.mismatched.iter().map(|a| a.0).collect();

    let n = 30;
    // forward+build of generator-phase graph
    let t = Instant::now();
    for _ in 0..n {
        let (g, refs) = build_stage1_generator_graph(
            &cfg, &state.nets["encoder"], &state.nets["generator"], &state.nets["c1"],
            &state.style, &batch.images, &labels, &labels_mm, &noise);
        std::hint::black_box(g.scalar(refs.total));
    }
    println!("phaseB build+forward: {:.1} ms", t.elapsed().as_secs_f64()/n as f64*1e3);

    let (g, refs) = build_stage1_generator_graph(
        &cfg, &state.nets["encoder"], &state.nets["generator"], &state.nets["c1"],
        &state.style, &batch.images, &labels, &labels_mm, &noise);
    let t = Instant::now();
    for _ in 0..n {
        let grads = g.backward(refs.total);
        std::hint::black_box(&grads);
    }
    println!("phaseB backward: {:.1} ms", t.elapsed().as_secs_f64()/n as f64*1e3);

    // param registration cost alone
    let t = Instant::now();
    for _ in 0..n {
        let mut g2 = Graph::<f32>::new();
        let a = register_params(&mut g2, &state.nets["encoder"], true);
        let b = register_params(&mut g2, &state.nets["generator"], true);
        let c = register_params(&mut g2, &state.nets["c1"], false);
        std::hint::black_box((a, b, c));
    }
    println!("param registration: {:.1} ms", t.elapsed().as_secs_f64()/n as f64*1e3);

    // classifier input (no-grad fwd)
    let t = Instant::now();
    for _ in 0..n {
        let v = stage1_classifier_input(&cfg.arch, cfg.stage1_classifier, &state.nets["encoder"],
            &state.nets["generator"], &state.style, &batch.images, &labels_mm, &noise);
        std::hint::black_box(&v);
    }
    println!("phaseA no-grad fwd: {:.1} ms", t.elapsed().as_secs_f64()/n as f64*1e3);
}
