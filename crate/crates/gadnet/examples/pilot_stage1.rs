use gadnet::data::synthetic::{build_synthetic_dataset, read_factor_table};
use gadnet::data::{load_manifest, LoadedDataset};
use gadnet::eval::{encode_all_means, flatten_pixels, probe_disentanglement};
use gadnet::training::{run_training, load_checkpoint, read_loss_csv, StageKind, TrainingConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2500);
    let out = std::path::PathBuf::from(args.get(2).cloned().unwrap_or("/tmp/gadnet_pilot1".into()));
    let data_dir = std::path::PathBuf::from("/tmp/gadnet_desk_data");
    if !data_dir.join("factors.csv").exists() {
        eprintln!("building desk dataset 10x500...");
        build_synthetic_dataset(10, 500, 7, 32, &data_dir).unwrap();
    }
    let (manifest, _) = load_manifest(&data_dir, 1).unwrap();
    let data = LoadedDataset::load(manifest, 32).unwrap();

    let mut cfg = TrainingConfig::desk();
    cfg.stage1.iterations = iters;
    let t = std::time::Instant::now();
    let final_path = run_training(StageKind::Stage1, &cfg, &data, &out, true).unwrap();
    eprintln!("stage1 {} iters in {:.1} min", iters, t.elapsed().as_secs_f64() / 60.0);

    let bundle = load_checkpoint(&final_path).unwrap();
    let losses = read_loss_csv(&out.join("stage1/loss.csv")).unwrap();
    let rec100 = losses.get(&(100u64, "rec".to_string())).copied().unwrap_or(f64::NAN);
    let rec_final = losses.get(&(iters, "rec".to_string())).copied().unwrap_or(f64::NAN);
    eprintln!("rec@100 = {rec100:.4}  rec@final = {rec_final:.4}  ratio = {:.3}", rec_final / rec100);
    let c1_final = losses.get(&(iters, "c1".to_string())).copied().unwrap_or(f64::NAN);
    eprintln!("c1@final = {c1_final:.4} (ln10 = {:.4})", (10.0f64).ln());

    let rows = read_factor_table(&data_dir.join("factors.csv")).unwrap();
    let means = encode_all_means(&cfg.arch, &bundle.nets["encoder"], &data).unwrap();
    let probe = probe_disentanglement(&means, &rows, 10, cfg.seed).unwrap();
    eprintln!("CODE probe: style acc = {:.4} (chance 0.1), r2 = {:?}", probe.style_accuracy, probe.content_r2);
    eprintln!("mean pos/scale r2 = {:.4}", probe.mean_position_scale_r2());

    let pixels = flatten_pixels(&data);
    let pprobe = probe_disentanglement(&pixels, &rows, 10, cfg.seed).unwrap();
    eprintln!("PIXEL probe: style acc = {:.4}", pprobe.style_accuracy);
}
