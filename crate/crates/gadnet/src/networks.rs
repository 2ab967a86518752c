//! The five parameterized functions (encoder, generator, style table, the
//! two classifiers, discriminator), all built from one residual architecture
//! family with role-specific heads.
//!
//! A trunk network runs stages outermost-to-innermost; each stage is one
//! stride-2 residual block followed by `blocks_per_stage` stride-1 residual
//! blocks. The innermost map is flattened into a fully connected layer of
//! `head_width` features (with ReLU), then a role head: logits for a
//! classifier, one score for the discriminator, two parallel heads (mean and
//! log-std) for the encoder. The generator mirrors the trunk right-to-left:
//! a fully connected input layer from (content_dim + style_dim) to
//! `head_width`, a second one up to the innermost map, then per stage the
//! stride-1 blocks and a x2 nearest-upsample block, ending in 3 channels
//! under tanh.
//!
//! Residual blocks use a single convolution on the residue branch with ReLU
//! applied before the add; shortcuts are identity when shape is preserved
//! and a 1x1 projection otherwise. No normalization layers anywhere, so a
//! forward pass is a deterministic, batch-independent function.
//!
//! Parameter arrays are named by a stable scheme (also the checkpoint
//! layout):
//!
//! ```text
//! stage{i}.down.conv.weight/.bias     stride-2 residue conv   (trunk)
//! stage{i}.down.proj.weight/.bias     stride-2 1x1 shortcut   (trunk)
//! stage{i}.res{j}.conv.weight/.bias   stride-1 residue conv
//! stage{i}.up.conv.weight/.bias       upsample residue conv   (generator)
//! stage{i}.up.proj.weight/.bias       upsample 1x1 shortcut   (generator)
//! fc.weight/.bias                     innermost <-> head_width
//! input.weight/.bias                  (content+style) -> head_width (generator)
//! head.mean / head.logstd / head.logits / head.score  (role heads)
//! ```

use indexmap::IndexMap;
use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{GadError, Result};
use crate::rng::Stream;
use crate::tensor::{Graph, NodeId, Scalar};
use crate::types::{ArtistId, CodeBatch, ImageBatch};

/// Sizes of one architecture instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub base_size: usize,
    pub stage_channels: Vec<usize>,
    pub head_width: usize,
    pub content_dim: usize,
    pub style_dim: usize,
    pub n_artists: usize,
    pub blocks_per_stage: usize,
    pub kernel_size: usize,
}

impl ArchitectureSpec {
    /// Full-scale instance: 256x256 images, channels 32..1024, 2048-wide
    /// head, 256 content + 256 style dims.
    pub fn paper() -> Self {
        ArchitectureSpec {
            base_size: 256,
            stage_channels: vec![32, 64, 128, 256, 512, 1024],
            head_width: 2048,
            content_dim: 256,
            style_dim: 256,
            n_artists: 1139,
            blocks_per_stage: 2,
            kernel_size: 3,
        }
    }

    /// Desk-scale instance used by the synthetic experiments.
    pub fn desk(n_artists: usize) -> Self {
        ArchitectureSpec {
            base_size: 32,
            stage_channels: vec![32, 64, 128],
            head_width: 256,
            content_dim: 32,
            style_dim: 32,
            n_artists,
            blocks_per_stage: 1,
            kernel_size: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.base_size.is_power_of_two() || self.base_size < 8 {
            return Err(GadError::contract(format!(
                "base_size must be a power of two >= 8, got {}",
                self.base_size
            )));
        }
        if self.stage_channels.is_empty() {
            return Err(GadError::contract("stage_channels must be non-empty"));
        }
        if self.inner_side() < 4 {
            return Err(GadError::contract(format!(
                "innermost spatial size {} < 4 (too many stages for base {})",
                self.inner_side(),
                self.base_size
            )));
        }
        if self.n_artists < 2 {
            return Err(GadError::contract("n_artists must be >= 2"));
        }
        if self.blocks_per_stage < 1 {
            return Err(GadError::contract("blocks_per_stage must be >= 1"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(GadError::contract("kernel_size must be odd"));
        }
        if self.content_dim == 0 {
            return Err(GadError::contract("content_dim must be positive"));
        }
        Ok(())
    }

    pub fn n_stages(&self) -> usize {
        self.stage_channels.len()
    }

    pub fn inner_side(&self) -> usize {
        self.base_size >> self.n_stages()
    }

    pub fn inner_channels(&self) -> usize {
        *self.stage_channels.last().unwrap()
    }

    /// Features entering the fully connected layer.
    pub fn flat_features(&self) -> usize {
        self.inner_side() * self.inner_side() * self.inner_channels()
    }

    /// Generator input width.
    pub fn code_width(&self) -> usize {
        self.content_dim + self.style_dim
    }

    /// Channel count entering stage `i` from the outside (3 for stage 0).
    fn in_channels(&self, stage: usize) -> usize {
        if stage == 0 {
            3
        } else {
            self.stage_channels[stage - 1]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Encoder,
    Generator,
    Classifier,
    Discriminator,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Encoder => "encoder",
            Role::Generator => "generator",
            Role::Classifier => "classifier",
            Role::Discriminator => "discriminator",
        }
    }
}

/// Declared shape of one parameter array, in build order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDecl {
    pub name: String,
    pub shape: Vec<usize>,
    /// Fan-in used by He-uniform initialization. Zero means zero-init (biases).
    pub fan_in: usize,
}

/// The full ordered list of parameter arrays for a role. This is the single
/// source of truth for building, registering and checkpointing a network.
pub fn layer_plan(spec: &ArchitectureSpec, role: Role) -> Vec<LayerDecl> {
    let k = spec.kernel_size;
    let mut plan = Vec::new();
    let mut weight = |name: String, shape: Vec<usize>, fan_in: usize| {
        plan.push(LayerDecl { name: format!("{name}.weight"), shape: shape.clone(), fan_in });
        plan.push(LayerDecl { name: format!("{name}.bias"), shape: vec![shape[0]], fan_in: 0 });
    };

    match role {
        Role::Generator => {
            weight("input".into(), vec![spec.head_width, spec.code_width()], spec.code_width());
            weight("fc".into(), vec![spec.flat_features(), spec.head_width], spec.head_width);
            for i in (0..spec.n_stages()).rev() {
                let ch = spec.stage_channels[i];
                let out = spec.in_channels(i);
                for j in 0..spec.blocks_per_stage {
                    weight(format!("stage{i}.res{j}.conv"), vec![ch, k, k, ch], ch * k * k);
                }
                weight(format!("stage{i}.up.conv"), vec![out, k, k, ch], ch * k * k);
                weight(format!("stage{i}.up.proj"), vec![out, 1, 1, ch], ch);
            }
        }
        _ => {
            for i in 0..spec.n_stages() {
                let cin = spec.in_channels(i);
                let ch = spec.stage_channels[i];
                weight(format!("stage{i}.down.conv"), vec![ch, k, k, cin], cin * k * k);
                weight(format!("stage{i}.down.proj"), vec![ch, 1, 1, cin], cin);
                for j in 0..spec.blocks_per_stage {
                    weight(format!("stage{i}.res{j}.conv"), vec![ch, k, k, ch], ch * k * k);
                }
            }
            weight("fc".into(), vec![spec.head_width, spec.flat_features()], spec.flat_features());
            // classifier and discriminator heads start at zero, so a fresh
            // classifier opens at the uniform distribution and the
            // discriminator at score 0; encoder heads stay randomly
            // initialized so codes respond to the input from step one
            match role {
                Role::Encoder => {
                    weight("head.mean".into(), vec![spec.content_dim, spec.head_width], spec.head_width);
                    weight("head.logstd".into(), vec![spec.content_dim, spec.head_width], spec.head_width);
                }
                Role::Classifier => {
                    weight("head.logits".into(), vec![spec.n_artists, spec.head_width], 0);
                }
                Role::Discriminator => {
                    weight("head.score".into(), vec![1, spec.head_width], 0);
                }
                Role::Generator => unreachable!(),
            }
        }
    }
    plan
}

/// Named parameter arrays for one network.
#[derive(Debug, Clone)]
pub struct NetworkParams<T: Scalar> {
    pub role: Role,
    pub arrays: IndexMap<String, ArrayD<T>>,
}

impl<T: Scalar> NetworkParams<T> {
    pub fn param_count(&self) -> usize {
        self.arrays.values().map(|a| a.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkParams<U> {
        NetworkParams {
            role: self.role,
            arrays: self
                .arrays
                .iter()
                .map(|(k, v)| (k.clone(), v.mapv(|x| U::from_f64(x.to_f64()))))
                .collect(),
        }
    }

    /// Validate array names and shapes against a spec, naming the first
    /// offending array.
    pub fn check_against(&self, spec: &ArchitectureSpec) -> Result<()> {
        let plan = layer_plan(spec, self.role);
        if plan.len() != self.arrays.len() {
            return Err(GadError::contract(format!(
                "{} has {} arrays, spec expects {}",
                self.role.as_str(),
                self.arrays.len(),
                plan.len()
            )));
        }
        for decl in &plan {
            match self.arrays.get(&decl.name) {
                None => {
                    return Err(GadError::contract(format!(
                        "{} is missing array `{}`",
                        self.role.as_str(),
                        decl.name
                    )))
                }
                Some(arr) if arr.shape() != decl.shape.as_slice() => {
                    return Err(GadError::contract(format!(
                        "{} array `{}` has shape {:?}, spec expects {:?}",
                        self.role.as_str(),
                        decl.name,
                        arr.shape(),
                        decl.shape
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// He-uniform fan-in initialization of every declared layer, biases zero.
pub fn build_network<T: Scalar>(
    spec: &ArchitectureSpec,
    role: Role,
    rng: &mut Stream,
) -> Result<NetworkParams<T>> {
    spec.validate()?;
    let mut arrays = IndexMap::new();
    for decl in layer_plan(spec, role) {
        let mut arr = ArrayD::<T>::zeros(IxDyn(&decl.shape));
        if decl.fan_in > 0 {
            let bound = (6.0 / decl.fan_in as f64).sqrt();
            for v in arr.iter_mut() {
                *v = T::from_f64(rng.uniform_in(-bound, bound));
            }
        }
        arrays.insert(decl.name, arr);
    }
    Ok(NetworkParams { role, arrays })
}

/// The learned per-artist style code distributions: just matrices, not a
/// network. Zero-initialized, so every style starts at N(0, I).
#[derive(Debug, Clone)]
pub struct StyleTable<T: Scalar> {
    pub means: Array2<T>,
    pub log_stds: Array2<T>,
}

impl<T: Scalar> StyleTable<T> {
    pub fn new(n_artists: usize, style_dim: usize) -> Self {
        StyleTable {
            means: Array2::zeros((n_artists, style_dim)),
            log_stds: Array2::zeros((n_artists, style_dim)),
        }
    }

    pub fn n_artists(&self) -> usize {
        self.means.nrows()
    }

    pub fn style_dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn cast<U: Scalar>(&self) -> StyleTable<U> {
        StyleTable {
            means: self.means.mapv(|x| U::from_f64(x.to_f64())),
            log_stds: self.log_stds.mapv(|x| U::from_f64(x.to_f64())),
        }
    }
}

/// Node ids of one network's parameters inside a graph.
pub struct NetNodes {
    ids: IndexMap<String, NodeId>,
}

impl NetNodes {
    pub fn get(&self, name: &str) -> NodeId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("network parameter `{name}` not registered"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ids.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.ids.iter()
    }
}

/// Register every parameter array as a graph leaf. `trainable: false` freezes
/// the network (no gradient is accumulated for it) while still letting
/// gradients flow through its operations.
pub fn register_params<T: Scalar>(
    g: &mut Graph<T>,
    params: &NetworkParams<T>,
    trainable: bool,
) -> NetNodes {
    let mut ids = IndexMap::new();
    for (name, arr) in &params.arrays {
        ids.insert(name.clone(), g.leaf(arr.clone(), trainable));
    }
    NetNodes { ids }
}

/// One residual block: residue = relu(conv(x)); shortcut is identity or the
/// provided projection; output = shortcut + residue.
pub fn residual_block<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    conv_w: NodeId,
    conv_b: NodeId,
    proj: Option<(NodeId, NodeId)>,
    stride: usize,
    pad: usize,
) -> NodeId {
    let residue = g.conv2d(x, conv_w, conv_b, stride, pad);
    let residue = g.relu(residue);
    let shortcut = match proj {
        Some((pw, pb)) => g.conv2d(x, pw, pb, stride, 0),
        None => x,
    };
    g.add(shortcut, residue)
}

/// Upsampling residual block: both branches see the x2 nearest-upsampled
/// input; the shortcut projects channels with a 1x1 convolution.
fn upsample_block<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    conv_w: NodeId,
    conv_b: NodeId,
    proj_w: NodeId,
    proj_b: NodeId,
    pad: usize,
) -> NodeId {
    let up = g.upsample2x(x);
    let residue = g.conv2d(up, conv_w, conv_b, 1, pad);
    let residue = g.relu(residue);
    let shortcut = g.conv2d(up, proj_w, proj_b, 1, 0);
    g.add(shortcut, residue)
}

/// Shared trunk of encoder / classifier / discriminator: stages then the
/// fully connected layer, ReLU applied. Returns the (batch, head_width)
/// feature node.
pub fn trunk_forward<T: Scalar>(
    g: &mut Graph<T>,
    spec: &ArchitectureSpec,
    nodes: &NetNodes,
    input: NodeId,
) -> NodeId {
    let pad = spec.kernel_size / 2;
    let mut x = input;
    for i in 0..spec.n_stages() {
        x = residual_block(
            g,
            x,
            nodes.get(&format!("stage{i}.down.conv.weight")),
            nodes.get(&format!("stage{i}.down.conv.bias")),
            Some((
                nodes.get(&format!("stage{i}.down.proj.weight")),
                nodes.get(&format!("stage{i}.down.proj.bias")),
            )),
            2,
            pad,
        );
        for j in 0..spec.blocks_per_stage {
            x = residual_block(
                g,
                x,
                nodes.get(&format!("stage{i}.res{j}.conv.weight")),
                nodes.get(&format!("stage{i}.res{j}.conv.bias")),
                None,
                1,
                pad,
            );
        }
    }
    let batch = g.value(x).shape()[0];
    let flat = g.reshape(x, &[batch, spec.flat_features()]);
    let fc = g.linear(flat, nodes.get("fc.weight"), nodes.get("fc.bias"));
    g.relu(fc)
}

pub fn encoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    spec: &ArchitectureSpec,
    nodes: &NetNodes,
    input: NodeId,
) -> (NodeId, NodeId) {
    let feat = trunk_forward(g, spec, nodes, input);
    let mean = g.linear(feat, nodes.get("head.mean.weight"), nodes.get("head.mean.bias"));
    let logstd = g.linear(feat, nodes.get("head.logstd.weight"), nodes.get("head.logstd.bias"));
    (mean, logstd)
}

pub fn classifier_forward<T: Scalar>(
    g: &mut Graph<T>,
    spec: &ArchitectureSpec,
    nodes: &NetNodes,
    input: NodeId,
) -> NodeId {
    let feat = trunk_forward(g, spec, nodes, input);
    g.linear(feat, nodes.get("head.logits.weight"), nodes.get("head.logits.bias"))
}

pub fn discriminator_forward<T: Scalar>(
    g: &mut Graph<T>,
    spec: &ArchitectureSpec,
    nodes: &NetNodes,
    input: NodeId,
) -> NodeId {
    let feat = trunk_forward(g, spec, nodes, input);
    g.linear(feat, nodes.get("head.score.weight"), nodes.get("head.score.bias"))
}

/// Generator forward from (batch, content_dim) and (batch, style_dim) code
/// nodes to a (batch, 3, base, base) image node in [-1, 1].
pub fn generator_forward<T: Scalar>(
    g: &mut Graph<T>,
    spec: &ArchitectureSpec,
    nodes: &NetNodes,
    content: NodeId,
    style: NodeId,
) -> NodeId {
    let pad = spec.kernel_size / 2;
    let z = g.concat_cols(content, style);
    let h = g.linear(z, nodes.get("input.weight"), nodes.get("input.bias"));
    let h = g.relu(h);
    let h = g.linear(h, nodes.get("fc.weight"), nodes.get("fc.bias"));
    let h = g.relu(h);
    let batch = g.value(h).shape()[0];
    let side = spec.inner_side();
    let mut x = g.reshape(h, &[batch, side, side, spec.inner_channels()]);
    for i in (0..spec.n_stages()).rev() {
        for j in 0..spec.blocks_per_stage {
            x = residual_block(
                g,
                x,
                nodes.get(&format!("stage{i}.res{j}.conv.weight")),
                nodes.get(&format!("stage{i}.res{j}.conv.bias")),
                None,
                1,
                pad,
            );
        }
        x = upsample_block(
            g,
            x,
            nodes.get(&format!("stage{i}.up.conv.weight")),
            nodes.get(&format!("stage{i}.up.conv.bias")),
            nodes.get(&format!("stage{i}.up.proj.weight")),
            nodes.get(&format!("stage{i}.up.proj.bias")),
            pad,
        );
    }
    g.tanh(x)
}

/// Hidden width used by the MLP-on-codes classifier variant: scales with the
/// content dimension instead of copying the full-scale constant.
pub fn mlp_classifier_width(spec: &ArchitectureSpec) -> usize {
    4 * spec.content_dim
}

/// Declared layers of the MLP-on-codes classifier: `depth` hidden ReLU
/// layers of `width` features, then the logits layer.
pub fn mlp_plan(in_dim: usize, width: usize, depth: usize, out_dim: usize) -> Vec<LayerDecl> {
    let mut plan = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, fan_in: usize| {
        plan.push(LayerDecl { name: format!("{name}.weight"), shape: shape.clone(), fan_in });
        plan.push(LayerDecl { name: format!("{name}.bias"), shape: vec![shape[0]], fan_in: 0 });
    };
    let mut prev = in_dim;
    for i in 0..depth {
        push(format!("h{i}"), vec![width, prev], prev);
        prev = width;
    }
    // zero-init logits layer, same as the convolutional classifier head
    push("out".into(), vec![out_dim, prev], 0);
    plan
}

/// Build the MLP classifier (role tag: classifier).
pub fn build_mlp_classifier<T: Scalar>(
    in_dim: usize,
    width: usize,
    depth: usize,
    out_dim: usize,
    rng: &mut Stream,
) -> Result<NetworkParams<T>> {
    if in_dim == 0 || width == 0 || depth == 0 || out_dim < 2 {
        return Err(GadError::contract("mlp classifier needs positive dims and >= 2 classes"));
    }
    let mut arrays = IndexMap::new();
    for decl in mlp_plan(in_dim, width, depth, out_dim) {
        let mut arr = ArrayD::<T>::zeros(IxDyn(&decl.shape));
        if decl.fan_in > 0 {
            let bound = (6.0 / decl.fan_in as f64).sqrt();
            for v in arr.iter_mut() {
                *v = T::from_f64(rng.uniform_in(-bound, bound));
            }
        }
        arrays.insert(decl.name, arr);
    }
    Ok(NetworkParams { role: Role::Classifier, arrays })
}

/// Forward pass of the MLP classifier on (batch, in_dim) codes.
pub fn mlp_forward<T: Scalar>(g: &mut Graph<T>, nodes: &NetNodes, input: NodeId) -> NodeId {
    let mut x = input;
    let mut i = 0;
    loop {
        let wname = format!("h{i}.weight");
        if !nodes.contains(&wname) {
            break;
        }
        x = g.linear(x, nodes.get(&wname), nodes.get(&format!("h{i}.bias")));
        x = g.relu(x);
        i += 1;
    }
    g.linear(x, nodes.get("out.weight"), nodes.get("out.bias"))
}

fn require_role<T: Scalar>(params: &NetworkParams<T>, role: Role) -> Result<()> {
    if params.role != role {
        return Err(GadError::contract(format!(
            "expected a {} network, got {}",
            role.as_str(),
            params.role.as_str()
        )));
    }
    Ok(())
}

/// Forward-only encoding of an image batch into per-image Gaussian codes.
pub fn encode(
    spec: &ArchitectureSpec,
    params: &NetworkParams<f32>,
    images: &ImageBatch,
) -> Result<CodeBatch> {
    require_role(params, Role::Encoder)?;
    let mut g = Graph::<f32>::new();
    let nodes = register_params(&mut g, params, false);
    let input = g.constant(images.data().clone().into_dyn());
    let (mean, logstd) = encoder_forward(&mut g, spec, &nodes, input);
    Ok(CodeBatch {
        mean: g.value(mean).to_owned().into_dimensionality().unwrap(),
        logstd: g.value(logstd).to_owned().into_dimensionality().unwrap(),
    })
}

/// Row extraction from the style table; std = exp(log_std row).
pub fn style_lookup(table: &StyleTable<f32>, artists: &[ArtistId]) -> Result<CodeBatch> {
    let n = table.n_artists();
    let d = table.style_dim();
    let mut mean = Array2::<f32>::zeros((artists.len(), d));
    let mut logstd = Array2::<f32>::zeros((artists.len(), d));
    for (i, a) in artists.iter().enumerate() {
        if a.0 >= n {
            return Err(GadError::contract(format!(
                "artist id {} out of range (table has {n} rows)",
                a.0
            )));
        }
        mean.row_mut(i).assign(&table.means.row(a.0));
        logstd.row_mut(i).assign(&table.log_stds.row(a.0));
    }
    Ok(CodeBatch { mean, logstd })
}

/// Forward-only generation from content and style code vectors.
pub fn generate(
    spec: &ArchitectureSpec,
    params: &NetworkParams<f32>,
    content: &Array2<f32>,
    style: &Array2<f32>,
) -> Result<ImageBatch> {
    require_role(params, Role::Generator)?;
    if content.ncols() != spec.content_dim || style.ncols() != spec.style_dim {
        return Err(GadError::contract(format!(
            "generator expects ({}, {}) code dims, got ({}, {})",
            spec.content_dim,
            spec.style_dim,
            content.ncols(),
            style.ncols()
        )));
    }
    if content.nrows() != style.nrows() {
        return Err(GadError::contract("content/style batch size mismatch"));
    }
    let mut g = Graph::<f32>::new();
    let nodes = register_params(&mut g, params, false);
    let c = g.constant(content.clone().into_dyn());
    let s = g.constant(style.clone().into_dyn());
    let out = generator_forward(&mut g, spec, &nodes, c, s);
    let arr = g.value(out).to_owned().into_dimensionality().unwrap();
    ImageBatch::from_clamped(arr)
}

/// Forward-only classification; one logits row per image.
pub fn classify(
    spec: &ArchitectureSpec,
    params: &NetworkParams<f32>,
    images: &ImageBatch,
) -> Result<Array2<f32>> {
    require_role(params, Role::Classifier)?;
    let mut g = Graph::<f32>::new();
    let nodes = register_params(&mut g, params, false);
    let input = g.constant(images.data().clone().into_dyn());
    let logits = classifier_forward(&mut g, spec, &nodes, input);
    Ok(g.value(logits).to_owned().into_dimensionality().unwrap())
}

/// Forward-only discrimination; one score per image.
pub fn discriminate(
    spec: &ArchitectureSpec,
    params: &NetworkParams<f32>,
    images: &ImageBatch,
) -> Result<Vec<f32>> {
    require_role(params, Role::Discriminator)?;
    let mut g = Graph::<f32>::new();
    let nodes = register_params(&mut g, params, false);
    let input = g.constant(images.data().clone().into_dyn());
    let score = discriminator_forward(&mut g, spec, &nodes, input);
    Ok(g.value(score).iter().cloned().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn small_spec() -> ArchitectureSpec {
        ArchitectureSpec {
            base_size: 16,
            stage_channels: vec![6, 10],
            head_width: 24,
            content_dim: 5,
            style_dim: 3,
            n_artists: 4,
            blocks_per_stage: 1,
            kernel_size: 3,
        }
    }

    #[test]
    fn spec_validation() {
        assert!(ArchitectureSpec::paper().validate().is_ok());
        assert!(ArchitectureSpec::desk(10).validate().is_ok());
        let mut bad = small_spec();
        bad.base_size = 12;
        assert!(bad.validate().is_err());
        let mut bad = small_spec();
        bad.stage_channels = vec![4, 4, 4]; // 16 / 8 = 2 < 4
        assert!(bad.validate().is_err());
        let mut bad = small_spec();
        bad.kernel_size = 4;
        assert!(bad.validate().is_err());
        let mut bad = small_spec();
        bad.n_artists = 1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn paper_scale_shapes() {
        let spec = ArchitectureSpec::paper();
        assert_eq!(spec.inner_side(), 4);
        assert_eq!(spec.inner_channels(), 1024);
        assert_eq!(spec.flat_features(), 16 * 1024);
        assert_eq!(spec.code_width(), 512);
        let plan = layer_plan(&spec, Role::Classifier);
        let logits = plan.iter().find(|d| d.name == "head.logits.weight").unwrap();
        assert_eq!(logits.shape, vec![1139, 2048]);
    }

    #[test]
    fn parameter_count_matches_declared_shapes() {
        let spec = small_spec();
        let mut rng = Stream::new(1, "count");
        for role in [Role::Encoder, Role::Generator, Role::Classifier, Role::Discriminator] {
            let params = build_network::<f32>(&spec, role, &mut rng).unwrap();
            let declared: usize = layer_plan(&spec, role)
                .iter()
                .map(|d| d.shape.iter().product::<usize>())
                .sum();
            assert_eq!(params.param_count(), declared, "{role:?}");
            params.check_against(&spec).unwrap();
        }
    }

    #[test]
    fn forward_shapes_small() {
        let spec = small_spec();
        let mut rng = Stream::new(2, "shapes");
        let enc = build_network::<f32>(&spec, Role::Encoder, &mut rng).unwrap();
        let gen = build_network::<f32>(&spec, Role::Generator, &mut rng).unwrap();
        let cls = build_network::<f32>(&spec, Role::Classifier, &mut rng).unwrap();
        let dsc = build_network::<f32>(&spec, Role::Discriminator, &mut rng).unwrap();

        let images = ImageBatch::new(Array4::zeros((2, 16, 16, 3))).unwrap();
        let codes = encode(&spec, &enc, &images).unwrap();
        assert_eq!((codes.len(), codes.dim()), (2, 5));
        for i in 0..2 {
            let c = codes.item(i).unwrap();
            assert!(c.std.iter().all(|&s| s > 0.0));
        }

        let logits = classify(&spec, &cls, &images).unwrap();
        assert_eq!(logits.dim(), (2, 4));
        let scores = discriminate(&spec, &dsc, &images).unwrap();
        assert_eq!(scores.len(), 2);
        assert!(scores.iter().all(|s| s.is_finite()));

        let content = Array2::<f32>::zeros((2, 5));
        let style = Array2::<f32>::zeros((2, 3));
        let out = generate(&spec, &gen, &content, &style).unwrap();
        assert_eq!(out.data().dim(), (2, 16, 16, 3));
    }

    #[test]
    fn wrong_role_is_rejected() {
        let spec = small_spec();
        let mut rng = Stream::new(3, "role");
        let cls = build_network::<f32>(&spec, Role::Classifier, &mut rng).unwrap();
        let images = ImageBatch::new(Array4::zeros((1, 16, 16, 3))).unwrap();
        assert!(encode(&spec, &cls, &images).is_err());
        assert!(discriminate(&spec, &cls, &images).is_err());
    }

    #[test]
    fn forward_is_deterministic_and_input_sensitive() {
        let spec = small_spec();
        let mut rng = Stream::new(4, "det");
        let enc = build_network::<f32>(&spec, Role::Encoder, &mut rng).unwrap();
        let mut data = Array4::<f32>::zeros((2, 16, 16, 3));
        data[(1, 3, 3, 0)] = 0.5;
        let mut dup = Array4::<f32>::zeros((2, 16, 16, 3));
        dup[(0, 3, 3, 0)] = 0.5;
        dup[(1, 3, 3, 0)] = 0.5;

        let codes = encode(&spec, &enc, &ImageBatch::new(data).unwrap()).unwrap();
        let codes_dup = encode(&spec, &enc, &ImageBatch::new(dup).unwrap()).unwrap();
        // duplicated image -> identical codes; distinct images -> different codes
        assert_eq!(codes_dup.mean.row(0), codes_dup.mean.row(1));
        assert_ne!(codes.mean.row(0), codes.mean.row(1));
        // repeated call -> identical output
        let again = encode(
            &spec,
            &enc,
            &ImageBatch::new(ndarray::Array4::zeros((1, 16, 16, 3))).unwrap(),
        )
        .unwrap();
        let again2 = encode(
            &spec,
            &enc,
            &ImageBatch::new(ndarray::Array4::zeros((1, 16, 16, 3))).unwrap(),
        )
        .unwrap();
        assert_eq!(again.mean, again2.mean);
    }

    #[test]
    fn style_lookup_round_trip() {
        let mut table = StyleTable::<f32>::new(3, 4);
        // zero table: mean 0, std exp(0) = 1
        let codes = style_lookup(&table, &[ArtistId(0), ArtistId(0)]).unwrap();
        assert_eq!(codes.mean.row(0), codes.mean.row(1));
        assert_eq!(codes.item(0).unwrap().std, vec![1.0; 4]);

        table.means.row_mut(2).fill(0.25);
        table.log_stds.row_mut(2).fill(-0.5);
        let codes = style_lookup(&table, &[ArtistId(2)]).unwrap();
        assert_eq!(codes.mean[(0, 1)], 0.25);
        assert_eq!(codes.logstd[(0, 3)], -0.5);
        assert!(style_lookup(&table, &[ArtistId(3)]).is_err());
    }

    #[test]
    fn zeroed_residue_blocks_are_transparent() {
        let spec = small_spec();
        let mut rng = Stream::new(6, "transparent");
        let mut enc = build_network::<f32>(&spec, Role::Encoder, &mut rng).unwrap();
        let baseline = {
            // zero every stride-1 residue conv
            for i in 0..spec.n_stages() {
                for j in 0..spec.blocks_per_stage {
                    enc.arrays[&format!("stage{i}.res{j}.conv.weight")].fill(0.0);
                    enc.arrays[&format!("stage{i}.res{j}.conv.bias")].fill(0.0);
                }
            }
            enc.clone()
        };
        // with zero residue weights each stage's output equals the
        // stride-2 block output: drop the res blocks entirely and compare
        let mut rng2 = Stream::new(7, "img");
        let mut data = Array4::<f32>::zeros((1, 16, 16, 3));
        for v in data.iter_mut() {
            *v = rng2.uniform_in(-1.0, 1.0) as f32;
        }
        let images = ImageBatch::new(data).unwrap();
        let full = encode(&spec, &baseline, &images).unwrap();

        let mut g = Graph::<f32>::new();
        let nodes = register_params(&mut g, &baseline, false);
        let input = g.constant(images.data().clone().into_dyn());
        let pad = spec.kernel_size / 2;
        let mut x = input;
        for i in 0..spec.n_stages() {
            x = residual_block(
                &mut g,
                x,
                nodes.get(&format!("stage{i}.down.conv.weight")),
                nodes.get(&format!("stage{i}.down.conv.bias")),
                Some((
                    nodes.get(&format!("stage{i}.down.proj.weight")),
                    nodes.get(&format!("stage{i}.down.proj.bias")),
                )),
                2,
                pad,
            );
        }
        let flat = g.reshape(x, &[1, spec.flat_features()]);
        let fc = g.linear(flat, nodes.get("fc.weight"), nodes.get("fc.bias"));
        let feat = g.relu(fc);
        let mean = g.linear(feat, nodes.get("head.mean.weight"), nodes.get("head.mean.bias"));
        let skipped: Array2<f32> = g.value(mean).to_owned().into_dimensionality().unwrap();
        assert_eq!(full.mean, skipped);
    }

    #[test]
    fn identity_residual_block_with_zero_weights() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(ArrayD::from_elem(IxDyn(&[1, 8, 8, 4]), 0.37));
        let w = g.constant(ArrayD::zeros(IxDyn(&[4, 3, 3, 4])));
        let b = g.constant(ArrayD::zeros(IxDyn(&[4])));
        let y = residual_block(&mut g, x, w, b, None, 1, 1);
        assert_eq!(g.value(y).to_owned(), g.value(x).to_owned());
    }

    #[test]
    fn strided_block_halves_and_rechannels() {
        let mut rng = Stream::new(8, "sblock");
        let mut g = Graph::<f32>::new();
        let mut xv = ArrayD::<f32>::zeros(IxDyn(&[2, 16, 16, 32]));
        for v in xv.iter_mut() {
            *v = rng.uniform_in(-1.0, 1.0) as f32;
        }
        let x = g.constant(xv);
        let mut mk = |shape: &[usize]| {
            let mut a = ArrayD::<f32>::zeros(IxDyn(shape));
            for v in a.iter_mut() {
                *v = rng.uniform_in(-0.1, 0.1) as f32;
            }
            a
        };
        let w = mk(&[64, 3, 3, 32]);
        let b = mk(&[64]);
        let pw = mk(&[64, 1, 1, 32]);
        let pb = mk(&[64]);
        let (w, b, pw, pb) = {
            let mut g2 = (None, None, None, None);
            g2.0 = Some(g.constant(w));
            g2.1 = Some(g.constant(b));
            g2.2 = Some(g.constant(pw));
            g2.3 = Some(g.constant(pb));
            (g2.0.unwrap(), g2.1.unwrap(), g2.2.unwrap(), g2.3.unwrap())
        };
        let y = residual_block(&mut g, x, w, b, Some((pw, pb)), 2, 1);
        assert_eq!(g.value(y).shape(), &[2, 8, 8, 64]);
    }

    #[test]
    fn flat_features_is_16x_inner_channels_when_ratio_is_4() {
        for spec in [ArchitectureSpec::paper(), ArchitectureSpec::desk(10)] {
            assert_eq!(spec.inner_side(), 4);
            assert_eq!(spec.flat_features(), 16 * spec.inner_channels());
        }
    }
}
