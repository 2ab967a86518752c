//! The two-stage training procedure.
//!
//! Stage 1 trains the style-independent content encoder: per iteration the
//! classifier C1 first learns to name the true author of the mismatched
//! reconstruction G(E(x), S(a')), then (fresh forward pass) encoder,
//! generator and style table minimize reconstruction minus the classifier's
//! success, plus KL regularizers. The C2 pre-train stage fits a classifier
//! on real samples only. Stage 2 freezes the encoder and trains the
//! generator and style table against a least-squares discriminator and the
//! (optionally adversarial) classifier C2, with an explicit content
//! consistency term through the frozen encoder.
//!
//! Every phase builds its own tape, so an update in one phase can never
//! leak gradients into another phase's parameters. Per-iteration draw order
//! is fixed (batch indices, mismatched labels, then noise matrices), which
//! makes runs bit-reproducible and resumable.

pub mod checkpoint;
pub mod config;
pub mod optim;

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::{Array2, ArrayD};

use crate::data::{sample_batch, Batch, LoadedDataset};
use crate::error::{GadError, Result};
use crate::networks::{
    build_mlp_classifier, build_network, classifier_forward, discriminator_forward,
    encoder_forward, generator_forward, mlp_classifier_width, mlp_forward, register_params,
    ArchitectureSpec, NetNodes, NetworkParams, Role, StyleTable,
};
use crate::rng::Stream;
use crate::tensor::{Graph, NodeId, Scalar};
use crate::types::ImageBatch;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle, StageKind};
pub use config::{load_config, OptimKind, Stage1Classifier, StagePlan, TrainingConfig};
pub use optim::OptState;

/// Scalar loss terms of one iteration, every objective term separately.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub iteration: u64,
    pub terms: Vec<(&'static str, f64)>,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.terms.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    fn check_finite(&self) -> std::result::Result<(), &'static str> {
        for (name, v) in &self.terms {
            if !v.is_finite() {
                return Err(name);
            }
        }
        Ok(())
    }
}

/// Mutable state of one training run.
pub struct TrainerState {
    pub stage: StageKind,
    pub cfg: TrainingConfig,
    pub nets: IndexMap<String, NetworkParams<f32>>,
    pub style: StyleTable<f32>,
    pub opt: IndexMap<String, OptState>,
    pub rng: Stream,
    pub iteration: u64,
}

impl TrainerState {
    pub fn to_bundle(&self) -> CheckpointBundle {
        CheckpointBundle {
            stage: self.stage,
            iteration: self.iteration,
            config: self.cfg.clone(),
            rng: self.rng.state(),
            nets: self.nets.clone(),
            style: Some(self.style.clone()),
            opt: self.opt.clone(),
        }
    }

    pub fn from_bundle(bundle: CheckpointBundle) -> Result<Self> {
        let style = bundle
            .style
            .ok_or_else(|| GadError::Checkpoint("bundle has no style table".into()))?;
        Ok(TrainerState {
            stage: bundle.stage,
            cfg: bundle.config,
            nets: bundle.nets,
            style,
            opt: bundle.opt,
            rng: Stream::restore(&bundle.rng),
            iteration: bundle.iteration,
        })
    }
}

/// Per-iteration noise draws, in draw order.
pub struct StageNoise<T: Scalar> {
    pub content: Array2<T>,
    pub style_a: Array2<T>,
    pub style_mm: Array2<T>,
}

fn normal_matrix<T: Scalar>(rng: &mut Stream, rows: usize, cols: usize) -> Array2<T> {
    let mut m = Array2::<T>::zeros((rows, cols));
    for v in m.iter_mut() {
        *v = T::from_f64(rng.normal());
    }
    m
}

/// Draw the per-iteration noise matrices in their fixed order: content,
/// style-for-a, style-for-a'.
pub fn draw_noise<T: Scalar>(rng: &mut Stream, spec: &ArchitectureSpec, b: usize) -> StageNoise<T> {
    StageNoise {
        content: normal_matrix(rng, b, spec.content_dim),
        style_a: normal_matrix(rng, b, spec.style_dim),
        style_mm: normal_matrix(rng, b, spec.style_dim),
    }
}

fn labels_of(ids: &[crate::types::ArtistId]) -> Vec<usize> {
    ids.iter().map(|a| a.0).collect()
}

fn image_const<T: Scalar>(g: &mut Graph<T>, images: &ImageBatch) -> NodeId {
    g.constant(images.data().mapv(|v| T::from_f64(v as f64)).into_dyn())
}

/// Style-table leaves inside a graph.
pub struct StyleNodes {
    pub means: NodeId,
    pub log_stds: NodeId,
}

fn register_style<T: Scalar>(g: &mut Graph<T>, style: &StyleTable<T>, trainable: bool) -> StyleNodes {
    StyleNodes {
        means: g.leaf(style.means.clone().into_dyn(), trainable),
        log_stds: g.leaf(style.log_stds.clone().into_dyn(), trainable),
    }
}

/// Gather style rows for `ids` and sample codes with the given noise.
fn style_sample<T: Scalar>(
    g: &mut Graph<T>,
    style: &StyleNodes,
    ids: &[usize],
    noise: &Array2<T>,
) -> (NodeId, NodeId, NodeId) {
    let mean = g.gather_rows(style.means, ids);
    let logstd = g.gather_rows(style.log_stds, ids);
    let sample = g.reparam(mean, logstd, noise.clone().into_dyn());
    (mean, logstd, sample)
}

// ---------------------------------------------------------------------------
// Stage 1
// ---------------------------------------------------------------------------

/// Forward pass producing the stage-1 classifier input (all constants):
/// the mismatch image for the convolutional classifier, or the sampled
/// content code for the MLP-on-codes variant.
pub fn stage1_classifier_input<T: Scalar>(
    spec: &ArchitectureSpec,
    kind: Stage1Classifier,
    enc: &NetworkParams<T>,
    gen: &NetworkParams<T>,
    style: &StyleTable<T>,
    images: &ImageBatch,
    labels_mm: &[usize],
    noise: &StageNoise<T>,
) -> ArrayD<T> {
    let mut g = Graph::<T>::new();
    let enc_nodes = register_params(&mut g, enc, false);
    let gen_nodes = register_params(&mut g, gen, false);
    let style_nodes = register_style(&mut g, style, false);
    let x = image_const(&mut g, images);
    let (mean, logstd) = encoder_forward(&mut g, spec, &enc_nodes, x);
    let content = g.reparam(mean, logstd, noise.content.clone().into_dyn());
    match kind {
        Stage1Classifier::MlpCode => g.value(content).to_owned(),
        Stage1Classifier::Conv => {
            let (_, _, style_sample) = style_sample(&mut g, &style_nodes, labels_mm, &noise.style_mm);
            let fake = generator_forward(&mut g, spec, &gen_nodes, content, style_sample);
            g.value(fake).to_owned()
        }
    }
}

/// Classifier-phase graph: C1 trainable on a constant input.
pub fn build_stage1_classifier_graph<T: Scalar>(
    spec: &ArchitectureSpec,
    kind: Stage1Classifier,
    c1: &NetworkParams<T>,
    input: ArrayD<T>,
    labels_a: &[usize],
) -> (Graph<T>, NetNodes, NodeId) {
    let mut g = Graph::<T>::new();
    let c1_nodes = register_params(&mut g, c1, true);
    let inp = g.constant(input);
    let logits = match kind {
        Stage1Classifier::Conv => classifier_forward(&mut g, spec, &c1_nodes, inp),
        Stage1Classifier::MlpCode => mlp_forward(&mut g, &c1_nodes, inp),
    };
    let loss = g.nll_mean(logits, labels_a);
    (g, c1_nodes, loss)
}

/// Node handles of the stage-1 generator-phase graph.
pub struct Stage1Refs {
    pub enc: NetNodes,
    pub gen: NetNodes,
    pub style: StyleNodes,
    pub l_rec: NodeId,
    pub l_c1: NodeId,
    pub l_e_kl: NodeId,
    pub l_s_kl: NodeId,
    pub total: NodeId,
}

/// Generator-phase graph: encoder, generator and style trainable; C1 frozen.
/// total = L_rec - lambda_c1 * L_C1 + lambda_e_kl * L_E-KL + lambda_s_kl * L_S-KL.
#[allow(clippy::too_many_arguments)]
pub fn build_stage1_generator_graph<T: Scalar>(
    cfg: &TrainingConfig,
    enc: &NetworkParams<T>,
    gen: &NetworkParams<T>,
    c1: &NetworkParams<T>,
    style: &StyleTable<T>,
    images: &ImageBatch,
    labels_a: &[usize],
    labels_mm: &[usize],
    noise: &StageNoise<T>,
) -> (Graph<T>, Stage1Refs) {
    let spec = &cfg.arch;
    let mut g = Graph::<T>::new();
    let enc_nodes = register_params(&mut g, enc, true);
    let gen_nodes = register_params(&mut g, gen, true);
    let c1_nodes = register_params(&mut g, c1, false);
    let style_nodes = register_style(&mut g, style, true);

    let x = image_const(&mut g, images);
    let (mean, logstd) = encoder_forward(&mut g, spec, &enc_nodes, x);
    let content = g.reparam(mean, logstd, noise.content.clone().into_dyn());

    let (sa_mean, sa_logstd, sa_sample) = style_sample(&mut g, &style_nodes, labels_a, &noise.style_a);
    let (_, _, smm_sample) = style_sample(&mut g, &style_nodes, labels_mm, &noise.style_mm);

    let recon = generator_forward(&mut g, spec, &gen_nodes, content, sa_sample);
    let l_rec = g.pixel_l2_mean(recon, x);

    let l_c1 = match cfg.stage1_classifier {
        Stage1Classifier::Conv => {
            let fake = generator_forward(&mut g, spec, &gen_nodes, content, smm_sample);
            let logits = classifier_forward(&mut g, spec, &c1_nodes, fake);
            g.nll_mean(logits, labels_a)
        }
        Stage1Classifier::MlpCode => {
            let logits = mlp_forward(&mut g, &c1_nodes, content);
            g.nll_mean(logits, labels_a)
        }
    };

    let l_e_kl = g.kl_std_normal_mean(mean, logstd);
    let l_s_kl = g.kl_std_normal_mean(sa_mean, sa_logstd);

    let total = g.weighted_sum(&[
        (l_rec, T::one()),
        (l_c1, T::from_f64(-cfg.lambda_c1)),
        (l_e_kl, T::from_f64(cfg.lambda_e_kl)),
        (l_s_kl, T::from_f64(cfg.lambda_s_kl)),
    ]);

    (
        g,
        Stage1Refs {
            enc: enc_nodes,
            gen: gen_nodes,
            style: style_nodes,
            l_rec,
            l_c1,
            l_e_kl,
            l_s_kl,
            total,
        },
    )
}

fn update_net(
    opt: &mut OptState,
    prefix: &str,
    net: &mut NetworkParams<f32>,
    nodes: &NetNodes,
    grads: &mut crate::tensor::Grads<f32>,
    lr: f64,
) {
    for (name, id) in nodes.iter() {
        if let Some(grad) = grads.take(*id) {
            let param = net.arrays.get_mut(name).expect("registered param exists");
            opt.step(&format!("{prefix}/{name}"), param, &grad, lr);
        }
    }
}

fn update_style(
    opt: &mut OptState,
    style: &mut StyleTable<f32>,
    nodes: &StyleNodes,
    grads: &mut crate::tensor::Grads<f32>,
    lr: f64,
) {
    if let Some(gm) = grads.take(nodes.means) {
        let mut arr = style.means.clone().into_dyn();
        opt.step("style/means", &mut arr, &gm, lr);
        style.means = arr.into_dimensionality().unwrap();
    }
    if let Some(gl) = grads.take(nodes.log_stds) {
        let mut arr = style.log_stds.clone().into_dyn();
        opt.step("style/log_stds", &mut arr, &gl, lr);
        style.log_stds = arr.into_dimensionality().unwrap();
    }
}

/// Phase (ii): update C1 on the mismatch image (or code), which it sees as a
/// constant. Returns the classifier loss.
pub fn stage1_classifier_phase(
    state: &mut TrainerState,
    batch: &Batch,
    noise: &StageNoise<f32>,
) -> Result<f64> {
    let cfg = state.cfg.clone();
    let input = stage1_classifier_input(
        &cfg.arch,
        cfg.stage1_classifier,
        &state.nets["encoder"],
        &state.nets["generator"],
        &state.style,
        &batch.images,
        &labels_of(&batch.mismatched),
        noise,
    );
    let (g, c1_nodes, loss) =
        build_stage1_classifier_graph(&cfg.arch, cfg.stage1_classifier, &state.nets["c1"], input, &labels_of(&batch.labels));
    let value = g.scalar(loss) as f64;
    let mut grads = g.backward(loss);

    let TrainerState { nets, opt, .. } = state;
    let opt_c1 = opt.get_mut("c1").expect("c1 optimizer");
    opt_c1.advance();
    update_net(opt_c1, "c1", nets.get_mut("c1").unwrap(), &c1_nodes, &mut grads, cfg.stage1.lr_others);
    Ok(value)
}

/// Phase (iii): fresh forward; update encoder, generator and style table
/// with C1 frozen. Returns (rec, c1_adv, e_kl, s_kl, total).
pub fn stage1_generator_phase(
    state: &mut TrainerState,
    batch: &Batch,
    noise: &StageNoise<f32>,
) -> Result<[f64; 5]> {
    let cfg = state.cfg.clone();
    let (g, refs) = build_stage1_generator_graph(
        &cfg,
        &state.nets["encoder"],
        &state.nets["generator"],
        &state.nets["c1"],
        &state.style,
        &batch.images,
        &labels_of(&batch.labels),
        &labels_of(&batch.mismatched),
        noise,
    );
    let values = [
        g.scalar(refs.l_rec) as f64,
        g.scalar(refs.l_c1) as f64,
        g.scalar(refs.l_e_kl) as f64,
        g.scalar(refs.l_s_kl) as f64,
        g.scalar(refs.total) as f64,
    ];
    let mut grads = g.backward(refs.total);

    let TrainerState { nets, style, opt, .. } = state;
    let opt_egs = opt.get_mut("egs").expect("egs optimizer");
    opt_egs.advance();
    update_net(opt_egs, "encoder", nets.get_mut("encoder").unwrap(), &refs.enc, &mut grads, cfg.stage1.lr_others);
    update_net(opt_egs, "generator", nets.get_mut("generator").unwrap(), &refs.gen, &mut grads, cfg.stage1.lr_others);
    update_style(opt_egs, style, &refs.style, &mut grads, cfg.stage1.lr_style);
    Ok(values)
}

/// One full stage-1 iteration: draw noise, adversary phase, generator phase.
pub fn stage1_step(state: &mut TrainerState, batch: &Batch) -> Result<LossReport> {
    let noise = draw_noise::<f32>(&mut state.rng, &state.cfg.arch.clone(), batch.labels.len());
    let c1_loss = stage1_classifier_phase(state, batch, &noise)?;
    let [rec, c1_adv, e_kl, s_kl, total] = stage1_generator_phase(state, batch, &noise)?;
    state.iteration += 1;
    let report = LossReport {
        iteration: state.iteration,
        terms: vec![
            ("rec", rec),
            ("c1", c1_loss),
            ("c1_adv", c1_adv),
            ("e_kl", e_kl),
            ("s_kl", s_kl),
            ("egs_total", total),
        ],
    };
    report
        .check_finite()
        .map_err(|term| GadError::Diverged {
            term: term.to_string(),
            iteration: state.iteration,
            last_checkpoint: None,
        })?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// C2 pre-training
// ---------------------------------------------------------------------------

pub fn build_c2_pretrain_graph<T: Scalar>(
    spec: &ArchitectureSpec,
    c2: &NetworkParams<T>,
    images: &ImageBatch,
    labels_a: &[usize],
) -> (Graph<T>, NetNodes, NodeId) {
    let mut g = Graph::<T>::new();
    let c2_nodes = register_params(&mut g, c2, true);
    let x = image_const(&mut g, images);
    let logits = classifier_forward(&mut g, spec, &c2_nodes, x);
    let loss = g.nll_mean(logits, labels_a);
    (g, c2_nodes, loss)
}

pub fn pretrain_c2_step(state: &mut TrainerState, batch: &Batch) -> Result<LossReport> {
    let cfg = state.cfg.clone();
    let (g, c2_nodes, loss) =
        build_c2_pretrain_graph(&cfg.arch, &state.nets["c2"], &batch.images, &labels_of(&batch.labels));
    let value = g.scalar(loss) as f64;
    let mut grads = g.backward(loss);
    let TrainerState { nets, opt, .. } = state;
    let opt_c2 = opt.get_mut("c2").expect("c2 optimizer");
    opt_c2.advance();
    update_net(opt_c2, "c2", nets.get_mut("c2").unwrap(), &c2_nodes, &mut grads, cfg.c2_pretrain.lr_others);
    state.iteration += 1;
    let report = LossReport {
        iteration: state.iteration,
        terms: vec![("c2_real", value)],
    };
    report.check_finite().map_err(|term| GadError::Diverged {
        term: term.to_string(),
        iteration: state.iteration,
        last_checkpoint: None,
    })?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------------

/// Constants generated before the stage-2 phases: the fake batch and the
/// content targets, all through the frozen encoder.
pub struct Stage2Forward<T: Scalar> {
    pub fake: ArrayD<T>,
    pub content_sample: Array2<T>,
    pub content_target: Array2<T>,
}

pub fn stage2_forward<T: Scalar>(
    spec: &ArchitectureSpec,
    enc: &NetworkParams<T>,
    gen: &NetworkParams<T>,
    style: &StyleTable<T>,
    images: &ImageBatch,
    labels_mm: &[usize],
    noise: &StageNoise<T>,
) -> Stage2Forward<T> {
    let mut g = Graph::<T>::new();
    let enc_nodes = register_params(&mut g, enc, false);
    let gen_nodes = register_params(&mut g, gen, false);
    let style_nodes = register_style(&mut g, style, false);
    let x = image_const(&mut g, images);
    let (mean, logstd) = encoder_forward(&mut g, spec, &enc_nodes, x);
    let content = g.reparam(mean, logstd, noise.content.clone().into_dyn());
    let (_, _, smm) = style_sample(&mut g, &style_nodes, labels_mm, &noise.style_mm);
    let fake = generator_forward(&mut g, spec, &gen_nodes, content, smm);
    Stage2Forward {
        fake: g.value(fake).to_owned(),
        content_sample: g.value(content).to_owned().into_dimensionality().unwrap(),
        content_target: g.value(mean).to_owned().into_dimensionality().unwrap(),
    }
}

/// Discriminator phase graph: least squares on real (target 1) and fake
/// (target -1), fakes constant.
pub fn build_stage2_discriminator_graph<T: Scalar>(
    spec: &ArchitectureSpec,
    d: &NetworkParams<T>,
    images: &ImageBatch,
    fake: ArrayD<T>,
) -> (Graph<T>, NetNodes, NodeId, NodeId, NodeId) {
    let mut g = Graph::<T>::new();
    let d_nodes = register_params(&mut g, d, true);
    let x = image_const(&mut g, images);
    let fake = g.constant(fake);
    let d_real = discriminator_forward(&mut g, spec, &d_nodes, x);
    let d_fake = discriminator_forward(&mut g, spec, &d_nodes, fake);
    let l_real = g.lsq_mean(d_real, T::one());
    let l_fake = g.lsq_mean(d_fake, T::from_f64(-1.0));
    let total = g.weighted_sum(&[(l_real, T::one()), (l_fake, T::one())]);
    (g, d_nodes, l_real, l_fake, total)
}

/// Classifier phase graph: NLL on real samples plus (when adversarial) NLU
/// on fakes conditioned on a'.
#[allow(clippy::too_many_arguments)]
pub fn build_stage2_classifier_graph<T: Scalar>(
    spec: &ArchitectureSpec,
    c2: &NetworkParams<T>,
    images: &ImageBatch,
    labels_a: &[usize],
    fake: ArrayD<T>,
    labels_mm: &[usize],
    adversarial: bool,
) -> (Graph<T>, NetNodes, NodeId, Option<NodeId>, NodeId) {
    let mut g = Graph::<T>::new();
    let c2_nodes = register_params(&mut g, c2, true);
    let x = image_const(&mut g, images);
    let logits_real = classifier_forward(&mut g, spec, &c2_nodes, x);
    let l_real = g.nll_mean(logits_real, labels_a);
    let (l_fake, total) = if adversarial {
        let fake = g.constant(fake);
        let logits_fake = classifier_forward(&mut g, spec, &c2_nodes, fake);
        let l_fake = g.nlu_mean(logits_fake, labels_mm);
        let total = g.weighted_sum(&[(l_real, T::one()), (l_fake, T::one())]);
        (Some(l_fake), total)
    } else {
        let total = g.weighted_sum(&[(l_real, T::one())]);
        (None, total)
    };
    (g, c2_nodes, l_real, l_fake, total)
}

/// Node handles of the stage-2 generator-phase graph.
pub struct Stage2Refs {
    pub gen: NetNodes,
    pub style: StyleNodes,
    pub l_d_adv: NodeId,
    pub l_c2_adv: NodeId,
    pub l_cont: NodeId,
    pub l_s_kl: NodeId,
    pub total: NodeId,
}

/// Generator phase: fresh forward with D, C2 and E frozen; generator and
/// style table trainable. The content code is a constant (the encoder is
/// fixed, so no gradient can reach it).
#[allow(clippy::too_many_arguments)]
pub fn build_stage2_generator_graph<T: Scalar>(
    cfg: &TrainingConfig,
    enc: &NetworkParams<T>,
    gen: &NetworkParams<T>,
    d: &NetworkParams<T>,
    c2: &NetworkParams<T>,
    style: &StyleTable<T>,
    content_sample: &Array2<T>,
    content_target: &Array2<T>,
    labels_mm: &[usize],
    noise_style_mm: &Array2<T>,
) -> (Graph<T>, Stage2Refs) {
    let spec = &cfg.arch;
    let mut g = Graph::<T>::new();
    let enc_nodes = register_params(&mut g, enc, false);
    let gen_nodes = register_params(&mut g, gen, true);
    let d_nodes = register_params(&mut g, d, false);
    let c2_nodes = register_params(&mut g, c2, false);
    let style_nodes = register_style(&mut g, style, true);

    let content = g.constant(content_sample.clone().into_dyn());
    let (smm_mean, smm_logstd, smm) = style_sample(&mut g, &style_nodes, labels_mm, noise_style_mm);
    let fake = generator_forward(&mut g, spec, &gen_nodes, content, smm);

    let d_out = discriminator_forward(&mut g, spec, &d_nodes, fake);
    let l_d_adv = g.lsq_mean(d_out, T::zero());

    let logits = classifier_forward(&mut g, spec, &c2_nodes, fake);
    let l_c2_adv = g.nll_mean(logits, labels_mm);

    let (fake_mean, _) = encoder_forward(&mut g, spec, &enc_nodes, fake);
    let target = g.constant(content_target.clone().into_dyn());
    let l_cont = g.sq_dist_mean(fake_mean, target);

    let l_s_kl = g.kl_std_normal_mean(smm_mean, smm_logstd);

    let total = g.weighted_sum(&[
        (l_d_adv, T::from_f64(cfg.lambda_d)),
        (l_c2_adv, T::from_f64(cfg.lambda_c2)),
        (l_cont, T::from_f64(cfg.lambda_cont)),
        (l_s_kl, T::from_f64(cfg.lambda_s_kl)),
    ]);

    (
        g,
        Stage2Refs {
            gen: gen_nodes,
            style: style_nodes,
            l_d_adv,
            l_c2_adv,
            l_cont,
            l_s_kl,
            total,
        },
    )
}

pub fn stage2_step(state: &mut TrainerState, batch: &Batch) -> Result<LossReport> {
    let cfg = state.cfg.clone();
    let spec = &cfg.arch;
    let b = batch.labels.len();
    // draw order: content noise, then mismatched style noise (style_a unused
    // in stage 2 but drawn for a uniform per-iteration draw layout)
    let noise = draw_noise::<f32>(&mut state.rng, spec, b);
    let labels_a = labels_of(&batch.labels);
    let labels_mm = labels_of(&batch.mismatched);

    let fwd = stage2_forward(
        spec,
        &state.nets["encoder"],
        &state.nets["generator"],
        &state.style,
        &batch.images,
        &labels_mm,
        &noise,
    );

    // discriminator update
    let (g, d_nodes, l_real, l_fake, d_total) =
        build_stage2_discriminator_graph(spec, &state.nets["discriminator"], &batch.images, fwd.fake.clone());
    let d_real_v = g.scalar(l_real) as f64;
    let d_fake_v = g.scalar(l_fake) as f64;
    let d_total_v = g.scalar(d_total) as f64;
    let mut grads = g.backward(d_total);
    {
        let TrainerState { nets, opt, .. } = &mut *state;
        let opt_d = opt.get_mut("d").expect("d optimizer");
        opt_d.advance();
        update_net(opt_d, "discriminator", nets.get_mut("discriminator").unwrap(), &d_nodes, &mut grads, cfg.stage2.lr_others);
    }

    // classifier update
    let (g, c2_nodes, l_real, l_fake, c2_total) = build_stage2_classifier_graph(
        spec,
        &state.nets["c2"],
        &batch.images,
        &labels_a,
        fwd.fake.clone(),
        &labels_mm,
        cfg.c2_adversarial,
    );
    let c2_real_v = g.scalar(l_real) as f64;
    let c2_fake_v = l_fake.map(|n| g.scalar(n) as f64).unwrap_or(0.0);
    let c2_total_v = g.scalar(c2_total) as f64;
    let mut grads = g.backward(c2_total);
    {
        let TrainerState { nets, opt, .. } = &mut *state;
        let opt_c2 = opt.get_mut("c2").expect("c2 optimizer");
        opt_c2.advance();
        update_net(opt_c2, "c2", nets.get_mut("c2").unwrap(), &c2_nodes, &mut grads, cfg.stage2.lr_others);
    }

    // generator + style update, fresh forward
    let (g, refs) = build_stage2_generator_graph(
        &cfg,
        &state.nets["encoder"],
        &state.nets["generator"],
        &state.nets["discriminator"],
        &state.nets["c2"],
        &state.style,
        &fwd.content_sample,
        &fwd.content_target,
        &labels_mm,
        &noise.style_mm,
    );
    let d_adv_v = g.scalar(refs.l_d_adv) as f64;
    let c2_adv_v = g.scalar(refs.l_c2_adv) as f64;
    let cont_v = g.scalar(refs.l_cont) as f64;
    let s_kl_v = g.scalar(refs.l_s_kl) as f64;
    let g_total_v = g.scalar(refs.total) as f64;
    let mut grads = g.backward(refs.total);
    {
        let TrainerState { nets, style, opt, .. } = &mut *state;
        let opt_gs = opt.get_mut("gs").expect("gs optimizer");
        opt_gs.advance();
        update_net(opt_gs, "generator", nets.get_mut("generator").unwrap(), &refs.gen, &mut grads, cfg.stage2.lr_others);
        update_style(opt_gs, style, &refs.style, &mut grads, cfg.stage2.lr_style);
    }

    state.iteration += 1;
    let report = LossReport {
        iteration: state.iteration,
        terms: vec![
            ("d_real", d_real_v),
            ("d_fake", d_fake_v),
            ("d_total", d_total_v),
            ("c2_real", c2_real_v),
            ("c2_fake", c2_fake_v),
            ("c2_total", c2_total_v),
            ("d_adv", d_adv_v),
            ("c2_adv", c2_adv_v),
            ("cont", cont_v),
            ("s_kl", s_kl_v),
            ("g_total", g_total_v),
        ],
    };
    report.check_finite().map_err(|term| GadError::Diverged {
        term: term.to_string(),
        iteration: state.iteration,
        last_checkpoint: None,
    })?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Run loop
// ---------------------------------------------------------------------------

fn stage_plan(cfg: &TrainingConfig, stage: StageKind) -> &StagePlan {
    match stage {
        StageKind::Stage1 => &cfg.stage1,
        StageKind::C2Pretrain => &cfg.c2_pretrain,
        StageKind::Stage2 => &cfg.stage2,
    }
}

/// Build the fresh initial state for a stage, loading prerequisite
/// checkpoints where the procedure requires them.
pub fn init_stage(stage: StageKind, cfg: &TrainingConfig, out_root: &Path) -> Result<TrainerState> {
    cfg.validate()?;
    let spec = &cfg.arch;
    let mut nets = IndexMap::new();
    let mut opt = IndexMap::new();
    let style;
    match stage {
        StageKind::Stage1 => {
            let mut init = Stream::new(cfg.seed, "stage1-init");
            nets.insert("encoder".into(), build_network::<f32>(spec, Role::Encoder, &mut init)?);
            nets.insert("generator".into(), build_network::<f32>(spec, Role::Generator, &mut init)?);
            let c1 = match cfg.stage1_classifier {
                Stage1Classifier::Conv => build_network::<f32>(spec, Role::Classifier, &mut init)?,
                Stage1Classifier::MlpCode => build_mlp_classifier::<f32>(
                    spec.content_dim,
                    mlp_classifier_width(spec),
                    10,
                    spec.n_artists,
                    &mut init,
                )?,
            };
            nets.insert("c1".into(), c1);
            style = StyleTable::new(spec.n_artists, spec.style_dim);
            opt.insert("c1".into(), OptState::new(cfg.stage1.optimizer));
            opt.insert("egs".into(), OptState::new(cfg.stage1.optimizer));
        }
        StageKind::C2Pretrain => {
            let mut init = Stream::new(cfg.seed, "c2-init");
            nets.insert("c2".into(), build_network::<f32>(spec, Role::Classifier, &mut init)?);
            style = StyleTable::new(spec.n_artists, spec.style_dim);
            opt.insert("c2".into(), OptState::new(cfg.c2_pretrain.optimizer));
        }
        StageKind::Stage2 => {
            let stage1_final = out_root.join(StageKind::Stage1.dir_name()).join("final.gad");
            let c2_final = out_root.join(StageKind::C2Pretrain.dir_name()).join("final.gad");
            for (what, path) in [("stage 1", &stage1_final), ("C2 pre-training", &c2_final)] {
                if !path.exists() {
                    return Err(GadError::Dependency(format!(
                        "stage 2 requires the final {what} checkpoint at {}",
                        path.display()
                    )));
                }
            }
            let s1 = load_checkpoint(&stage1_final)?;
            let c2b = load_checkpoint(&c2_final)?;
            let enc = s1.nets.get("encoder").cloned().ok_or_else(|| {
                GadError::Checkpoint("stage-1 checkpoint lacks an encoder".into())
            })?;
            let gen = s1.nets.get("generator").cloned().ok_or_else(|| {
                GadError::Checkpoint("stage-1 checkpoint lacks a generator".into())
            })?;
            let c2 = c2b.nets.get("c2").cloned().ok_or_else(|| {
                GadError::Checkpoint("C2 checkpoint lacks the classifier".into())
            })?;
            enc.check_against(spec)?;
            gen.check_against(spec)?;
            c2.check_against(spec)?;
            style = s1
                .style
                .ok_or_else(|| GadError::Checkpoint("stage-1 checkpoint lacks the style table".into()))?;
            nets.insert("encoder".into(), enc);
            nets.insert("generator".into(), gen);
            nets.insert("c2".into(), c2);
            let mut init = Stream::new(cfg.seed, "stage2-init");
            nets.insert("discriminator".into(), build_network::<f32>(spec, Role::Discriminator, &mut init)?);
            opt.insert("d".into(), OptState::new(cfg.stage2.optimizer));
            opt.insert("c2".into(), OptState::new(cfg.stage2.optimizer));
            opt.insert("gs".into(), OptState::new(cfg.stage2.optimizer));
        }
    }
    Ok(TrainerState {
        stage,
        cfg: cfg.clone(),
        nets,
        style,
        opt,
        rng: Stream::new(cfg.seed, match stage {
            StageKind::Stage1 => "train-stage1",
            StageKind::C2Pretrain => "train-c2",
            StageKind::Stage2 => "train-stage2",
        }),
        iteration: 0,
    })
}

fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut best: Option<(u64, PathBuf)> = None;
    let entries = std::fs::read_dir(dir).ok()?;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().to_string();
        let iter = if let Some(rest) = name.strip_prefix("ckpt_") {
            rest.strip_suffix(".gad").and_then(|s| s.parse::<u64>().ok())
        } else if name == "final.gad" {
            Some(u64::MAX)
        } else {
            None
        };
        if let Some(it) = iter {
            if best.as_ref().map(|(b, _)| it > *b).unwrap_or(true) {
                best = Some((it, entry.path()));
            }
        }
    }
    best.map(|(_, p)| p)
}

fn append_loss_rows(path: &Path, report: &LossReport) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| GadError::io(path, e))?;
    if file.metadata().map(|m| m.len()).unwrap_or(0) == 0 {
        writeln!(file, "iter,term,value").map_err(|e| GadError::io(path, e))?;
    }
    for (term, value) in &report.terms {
        writeln!(file, "{},{},{}", report.iteration, term, value).map_err(|e| GadError::io(path, e))?;
    }
    Ok(())
}

/// Run (or resume) one training stage to its configured iteration count.
/// Logs every term at the log interval (plus the first and last iteration),
/// checkpoints at the checkpoint interval, and writes `final.gad` at the
/// end. Returns the path of the final checkpoint.
pub fn run_training(
    stage: StageKind,
    cfg: &TrainingConfig,
    data: &LoadedDataset,
    out_root: &Path,
    resume: bool,
) -> Result<PathBuf> {
    if data.manifest.n_artists() != cfg.arch.n_artists {
        return Err(GadError::contract(format!(
            "config expects {} artists but the dataset has {}",
            cfg.arch.n_artists,
            data.manifest.n_artists()
        )));
    }
    if data.image_side != cfg.arch.base_size {
        return Err(GadError::contract(format!(
            "config expects {}px images but the dataset was loaded at {}px",
            cfg.arch.base_size, data.image_side
        )));
    }
    if stage != StageKind::Stage1 && cfg.arch.n_artists < 2 {
        return Err(GadError::contract("classifier stages need n_artists >= 2"));
    }

    let dir = out_root.join(stage.dir_name());
    std::fs::create_dir_all(&dir).map_err(|e| GadError::io(&dir, e))?;
    let loss_csv = dir.join("loss.csv");
    let final_path = dir.join("final.gad");

    let mut state = match latest_checkpoint(&dir) {
        Some(path) if resume => {
            let bundle = load_checkpoint(&path)?;
            if bundle.stage != stage {
                return Err(GadError::Checkpoint(format!(
                    "checkpoint {} belongs to a different stage",
                    path.display()
                )));
            }
            if bundle.config.arch != cfg.arch {
                return Err(GadError::Checkpoint(
                    "checkpoint architecture differs from the requested config".into(),
                ));
            }
            let mut st = TrainerState::from_bundle(bundle)?;
            st.cfg = cfg.clone();
            st
        }
        _ => init_stage(stage, cfg, out_root)?,
    };

    let plan = stage_plan(cfg, stage).clone();
    let mut last_ckpt: Option<PathBuf> = None;
    while state.iteration < plan.iterations {
        let batch = sample_batch(data, plan.batch_size, &mut state.rng)?;
        let step_result = match stage {
            StageKind::Stage1 => stage1_step(&mut state, &batch),
            StageKind::C2Pretrain => pretrain_c2_step(&mut state, &batch),
            StageKind::Stage2 => stage2_step(&mut state, &batch),
        };
        let report = step_result.map_err(|e| match e {
            GadError::Diverged { term, iteration, .. } => GadError::Diverged {
                term,
                iteration,
                last_checkpoint: last_ckpt.clone(),
            },
            other => other,
        })?;

        let it = state.iteration;
        if it == 1 || it == plan.iterations || it % cfg.log_interval == 0 {
            append_loss_rows(&loss_csv, &report)?;
        }
        if it % cfg.checkpoint_interval == 0 && it != plan.iterations {
            let path = dir.join(format!("ckpt_{it:08}.gad"));
            save_checkpoint(&state.to_bundle(), &path)?;
            last_ckpt = Some(path);
        }
    }

    save_checkpoint(&state.to_bundle(), &final_path)?;
    Ok(final_path)
}

/// Parse a loss CSV into (iteration, term) -> value, keeping the last
/// occurrence of each key (resumed runs may append duplicates).
pub fn read_loss_csv(path: &Path) -> Result<IndexMap<(u64, String), f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| GadError::io(path, e))?;
    let mut out = IndexMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "iter,term,value" {
                return Err(GadError::contract(format!(
                    "loss csv must start with `iter,term,value`, got {line:?}"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, ',');
        let (Some(it), Some(term), Some(value)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(GadError::contract(format!("malformed loss row: {line:?}")));
        };
        let it: u64 = it
            .parse()
            .map_err(|_| GadError::contract(format!("bad iteration in loss row: {line:?}")))?;
        let value: f64 = value
            .parse()
            .map_err(|_| GadError::contract(format!("bad value in loss row: {line:?}")))?;
        out.insert((it, term.to_string()), value);
    }
    Ok(out)
}
