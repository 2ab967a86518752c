//! Ablation harness: each variant retrains the affected stage under a
//! modified config and reports its metric next to the paired baseline value.

use std::path::Path;

use crate::data::LoadedDataset;
use crate::error::{GadError, Result};
use crate::eval::{content_consistency, eval_style_accuracy, fit_content_prior, ContentPrior};
use crate::networks::mlp_forward;
use crate::rng::Stream;
use crate::tensor::Graph;
use crate::training::{
    load_checkpoint, run_training, CheckpointBundle, Stage1Classifier, StageKind, TrainingConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    /// MLP-on-codes classifier instead of the convolutional classifier on
    /// generated images (stage 1 variant).
    MlpStage1,
    /// Same classifier input, but the encoder ignores it (lambda_c1 = 0).
    NoC1,
    /// Stage 2 without the fake-sample unlikelihood term in C2's loss.
    NonAdversarialC2,
    /// Stage 2 with lambda_cont = 0.
    NoContentLoss,
}

impl AblationKind {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "mlp-stage1" => AblationKind::MlpStage1,
            "no-c1" => AblationKind::NoC1,
            "non-adv-c2" => AblationKind::NonAdversarialC2,
            "no-cont" => AblationKind::NoContentLoss,
            other => {
                return Err(GadError::Config(format!(
                    "unknown ablation `{other}` (mlp-stage1, no-c1, non-adv-c2, no-cont)"
                )))
            }
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AblationKind::MlpStage1 => "mlp-stage1",
            AblationKind::NoC1 => "no-c1",
            AblationKind::NonAdversarialC2 => "non-adv-c2",
            AblationKind::NoContentLoss => "no-cont",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub kind: &'static str,
    /// (metric name, value); baseline pairs carry a `baseline_` prefix.
    pub metrics: Vec<(String, f64)>,
}

impl AblationReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.metrics {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("ablation: {}\n", self.kind);
        for (k, v) in &self.metrics {
            s.push_str(&format!("  {k:32} {v:.6}\n"));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| GadError::io(dir, e))?;
        std::fs::write(dir.join("report.csv"), self.to_csv())
            .map_err(|e| GadError::io(dir, e))?;
        std::fs::write(dir.join("report.txt"), self.to_text())
            .map_err(|e| GadError::io(dir, e))?;
        Ok(())
    }
}

/// Copy stage-2 prerequisites (stage-1 final and C2 final) from a baseline
/// run root into a variant root.
pub fn prepare_stage2_root(variant_root: &Path, baseline_root: &Path) -> Result<()> {
    for stage in [StageKind::Stage1, StageKind::C2Pretrain] {
        let src = baseline_root.join(stage.dir_name()).join("final.gad");
        if !src.exists() {
            return Err(GadError::Dependency(format!(
                "baseline {} checkpoint missing at {}",
                stage.dir_name(),
                src.display()
            )));
        }
        let dst_dir = variant_root.join(stage.dir_name());
        std::fs::create_dir_all(&dst_dir).map_err(|e| GadError::io(&dst_dir, e))?;
        std::fs::copy(&src, dst_dir.join("final.gad")).map_err(|e| GadError::io(&src, e))?;
    }
    Ok(())
}

/// Top-1 accuracy of a stage-1 MLP code classifier over the dataset, on
/// sampled codes (the inputs it was trained on).
pub fn mlp_code_accuracy(
    bundle: &CheckpointBundle,
    data: &LoadedDataset,
    seed: u64,
) -> Result<f64> {
    let spec = &bundle.config.arch;
    let encoder = bundle
        .nets
        .get("encoder")
        .ok_or_else(|| GadError::Checkpoint("bundle lacks encoder".into()))?;
    let c1 = bundle
        .nets
        .get("c1")
        .ok_or_else(|| GadError::Checkpoint("bundle lacks c1".into()))?;
    if bundle.config.stage1_classifier != Stage1Classifier::MlpCode {
        return Err(GadError::contract(
            "code accuracy is defined for the MLP-on-codes classifier variant",
        ));
    }
    let mut rng = Stream::new(seed, "mlp-code-eval");
    let mut correct = 0usize;
    let n = data.len();
    let mut i = 0;
    while i < n {
        let hi = (i + 64).min(n);
        let idx: Vec<usize> = (i..hi).collect();
        let images = data.gather(&idx)?;
        let codes = crate::networks::encode(spec, encoder, &images)?;
        let mut sampled = codes.mean.clone();
        for ((s, &m), &l) in sampled
            .iter_mut()
            .zip(codes.mean.iter())
            .zip(codes.logstd.iter())
        {
            *s = m + l.exp() * rng.normal() as f32;
        }
        let mut g = Graph::<f32>::new();
        let nodes = crate::networks::register_params(&mut g, c1, false);
        let input = g.constant(sampled.into_dyn());
        let logits = mlp_forward(&mut g, &nodes, input);
        let lv = g.value(logits).to_owned();
        let lv = lv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        for (r, &gi) in idx.iter().enumerate() {
            let row = lv.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == data.label(gi).0 {
                correct += 1;
            }
        }
        i = hi;
    }
    Ok(correct as f64 / n as f64)
}

fn stage1_final(root: &Path) -> Result<CheckpointBundle> {
    let p = root.join(StageKind::Stage1.dir_name()).join("final.gad");
    if !p.exists() {
        return Err(GadError::Dependency(format!(
            "missing stage-1 checkpoint at {}",
            p.display()
        )));
    }
    load_checkpoint(&p)
}

fn stage2_final(root: &Path) -> Result<CheckpointBundle> {
    let p = root.join(StageKind::Stage2.dir_name()).join("final.gad");
    if !p.exists() {
        return Err(GadError::Dependency(format!(
            "missing stage-2 checkpoint at {}",
            p.display()
        )));
    }
    load_checkpoint(&p)
}

/// Number of generated-vs-encoded pairs used by the content consistency
/// metric in ablation reports.
pub const CONSISTENCY_SAMPLES: usize = 512;

/// Run one ablation. `baseline_root` must hold the corresponding baseline
/// artifacts (stage 1 for the stage-1 ablations; stages 1, c2 and 2 for the
/// stage-2 ablations). The variant trains under `variant_root`.
pub fn run_ablation(
    kind: AblationKind,
    base_cfg: &TrainingConfig,
    data: &LoadedDataset,
    baseline_root: &Path,
    variant_root: &Path,
) -> Result<AblationReport> {
    let mut metrics = Vec::new();
    match kind {
        AblationKind::MlpStage1 | AblationKind::NoC1 => {
            let mut cfg = base_cfg.clone();
            cfg.stage1_classifier = Stage1Classifier::MlpCode;
            if kind == AblationKind::NoC1 {
                cfg.lambda_c1 = 0.0;
            }
            let final_path = run_training(StageKind::Stage1, &cfg, data, variant_root, true)?;
            let bundle = load_checkpoint(&final_path)?;
            let acc = mlp_code_accuracy(&bundle, data, cfg.seed)?;
            metrics.push(("mlp_code_top1".into(), acc));
            metrics.push(("lambda_c1".into(), cfg.lambda_c1));

            // paired baseline: the probe accuracy on the baseline encoder
            let baseline = stage1_final(baseline_root)?;
            let encoder = baseline
                .nets
                .get("encoder")
                .ok_or_else(|| GadError::Checkpoint("baseline lacks encoder".into()))?;
            let means = crate::eval::encode_all_means(&baseline.config.arch, encoder, data)?;
            let rows = crate::data::synthetic::read_factor_table(
                &data.manifest.root.join("factors.csv"),
            )?;
            let probe = crate::eval::probe_disentanglement(
                &means,
                &rows,
                data.manifest.n_artists(),
                base_cfg.seed,
            )?;
            metrics.push(("baseline_probe_style_top1".into(), probe.style_accuracy));
        }
        AblationKind::NonAdversarialC2 => {
            let mut cfg = base_cfg.clone();
            cfg.c2_adversarial = false;
            prepare_stage2_root(variant_root, baseline_root)?;
            let variant_final = run_training(StageKind::Stage2, &cfg, data, variant_root, true)?;

            let baseline = stage2_final(baseline_root)?;
            let variant = load_checkpoint(&variant_final)?;
            let spec = &baseline.config.arch;
            let s1 = stage1_final(baseline_root)?;
            let encoder = &s1.nets["encoder"];
            let prior: ContentPrior = fit_content_prior(spec, encoder, data)?;
            let counts = &data.manifest.artist_counts;

            // 2x2 accuracy table: generators x classifiers
            let mut rng = Stream::new(base_cfg.seed, "ablation-nonadv-eval");
            for (gname, gen) in [("adv_g", &baseline), ("nonadv_g", &variant)] {
                for (cname, cls) in [("adv_c2", &baseline), ("nonadv_c2", &variant)] {
                    let acc = eval_style_accuracy(
                        spec,
                        &gen.nets["generator"],
                        gen.style.as_ref().unwrap(),
                        &cls.nets["c2"],
                        &prior,
                        counts,
                        &mut rng,
                    )?;
                    metrics.push((format!("acc_{gname}_by_{cname}"), acc));
                }
            }
        }
        AblationKind::NoContentLoss => {
            let mut cfg = base_cfg.clone();
            cfg.lambda_cont = 0.0;
            prepare_stage2_root(variant_root, baseline_root)?;
            let variant_final = run_training(StageKind::Stage2, &cfg, data, variant_root, true)?;

            let baseline = stage2_final(baseline_root)?;
            let variant = load_checkpoint(&variant_final)?;
            let s1 = stage1_final(baseline_root)?;
            let encoder = &s1.nets["encoder"];
            let spec = &baseline.config.arch;

            // same eval seed for both sides
            let mut rng = Stream::new(base_cfg.seed, "ablation-nocont-eval");
            let variant_cc = content_consistency(
                spec,
                encoder,
                &variant.nets["generator"],
                variant.style.as_ref().unwrap(),
                data,
                CONSISTENCY_SAMPLES,
                &mut rng,
            )?;
            let mut rng = Stream::new(base_cfg.seed, "ablation-nocont-eval");
            let baseline_cc = content_consistency(
                spec,
                encoder,
                &baseline.nets["generator"],
                baseline.style.as_ref().unwrap(),
                data,
                CONSISTENCY_SAMPLES,
                &mut rng,
            )?;
            metrics.push(("content_consistency".into(), variant_cc));
            metrics.push(("baseline_content_consistency".into(), baseline_cc));
            metrics.push(("ratio".into(), variant_cc / baseline_cc));
        }
    }
    let report = AblationReport {
        kind: kind.as_str(),
        metrics,
    };
    report.write(&variant_root.join("ablation"))?;
    Ok(report)
}
