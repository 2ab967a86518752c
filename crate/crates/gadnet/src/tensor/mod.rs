//! Reverse-mode automatic differentiation over `ndarray` values.
//!
//! The networks in this crate need a dozen operations, so the tape is
//! specialized to exactly those: convolution, dense layers, ReLU/tanh,
//! nearest upsampling, code plumbing (concat, row gather, reparameterized
//! sampling) and the scalar loss heads. Graphs are built per training phase
//! and dropped afterwards; parameters enter as leaves, with `trainable`
//! deciding whether a gradient is accumulated for them. Frozen networks are
//! registered as non-trainable leaves, which still lets gradients flow
//! *through* them (the stage-2 generator needs exactly that).
//!
//! Everything is generic over [`Scalar`] so training can run in `f32` while
//! gradient checks run the same code in `f64`.

pub mod conv;

use ndarray::{ArrayD, ArrayViewD, Axis, IxDyn, ScalarOperand};
use num_traits::Float;

use conv::{conv2d_backward, conv2d_forward};

/// Element type of the engine: `f32` or `f64`.
pub trait Scalar:
    ndarray::LinalgScalar + Float + ScalarOperand + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op<T: Scalar> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
        patches: Option<ndarray::Array2<T>>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    Upsample2x {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    ConcatCols {
        a: NodeId,
        b: NodeId,
    },
    GatherRows {
        table: NodeId,
        ids: Vec<usize>,
    },
    Reparam {
        mean: NodeId,
        logstd: NodeId,
        noise: ArrayD<T>,
        std: ArrayD<T>,
    },
    PixelL2Mean {
        x: NodeId,
        target: NodeId,
        norms: ArrayD<T>,
    },
    NllMean {
        logits: NodeId,
        labels: Vec<usize>,
        probs: ndarray::Array2<T>,
    },
    NluMean {
        logits: NodeId,
        labels: Vec<usize>,
        probs: ndarray::Array2<T>,
        probs_excl: ndarray::Array2<T>,
    },
    KlStdNormalMean {
        mean: NodeId,
        logstd: NodeId,
    },
    SqDistMean {
        a: NodeId,
        b: NodeId,
    },
    LsqMean {
        x: NodeId,
        target: T,
    },
    WeightedSum {
        terms: Vec<(NodeId, T)>,
    },
}

struct Node<T: Scalar> {
    value: ArrayD<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Gradients harvested by [`Graph::backward`], indexed by node.
pub struct Grads<T: Scalar> {
    slots: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn take(&mut self, id: NodeId) -> Option<ArrayD<T>> {
        self.slots[id.0].take()
    }

    pub fn get(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.slots[id.0].as_ref()
    }
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::with_capacity(256) }
    }

    fn push(&mut self, value: ArrayD<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: NodeId) -> ArrayViewD<'_, T> {
        self.nodes[id.0].value.view()
    }

    pub fn scalar(&self, id: NodeId) -> T {
        let v = &self.nodes[id.0].value;
        assert!(v.len() == 1, "scalar() on non-scalar node");
        *v.iter().next().unwrap()
    }

    pub fn leaf(&mut self, value: ArrayD<T>, trainable: bool) -> NodeId {
        self.push(value, trainable, Op::Leaf)
    }

    pub fn constant(&mut self, value: ArrayD<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        let keep = self.needs(w);
        let out = {
            let xv = self.nodes[x.0].value.view().into_dimensionality().expect("conv input rank 4");
            let wv = self.nodes[w.0].value.view().into_dimensionality().expect("conv weight rank 4");
            let bv = self.nodes[b.0].value.as_slice().expect("bias layout");
            conv2d_forward(&xv, &wv, bv, stride, pad, keep)
        };
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            out.0.into_dyn(),
            needs,
            Op::Conv2d { x, w, b, stride, pad, patches: out.1 },
        )
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = as2(&self.nodes[x.0].value);
        let wv = as2(&self.nodes[w.0].value);
        let bias = self.nodes[b.0].value.as_slice().expect("bias layout");
        let (n, din) = xv.dim();
        let (dout, win) = wv.dim();
        assert_eq!(din, win, "linear shape mismatch");
        let mut y = ndarray::Array2::<T>::zeros((n, dout));
        ndarray::linalg::general_mat_mul(T::one(), &xv, &wv.t(), T::zero(), &mut y);
        for mut row in y.axis_iter_mut(Axis(0)) {
            for (v, &bb) in row.iter_mut().zip(bias.iter()) {
                *v = *v + bb;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(y.into_dyn(), needs, Op::Linear { x, w, b })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|e| if e > T::zero() { e } else { T::zero() });
        let needs = self.needs(x);
        self.push(v, needs, Op::Relu { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|e| e.tanh());
        let needs = self.needs(x);
        self.push(v, needs, Op::Tanh { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let needs = self.needs(a) || self.needs(b);
        self.push(v, needs, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|e| e * c);
        let needs = self.needs(x);
        self.push(v, needs, Op::Scale { x, c })
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let shape = xv.shape();
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, 2 * h, 2 * w, c]));
        {
            let xs = xv.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            let row = w * c; // source row length
            for bi in 0..b {
                for y in 0..h {
                    let src = (bi * h + y) * row;
                    let dst = (bi * 2 * h + 2 * y) * 2 * row;
                    // duplicate each pixel's channel run, then the whole row
                    unsafe {
                        for xx in 0..w {
                            std::ptr::copy_nonoverlapping(
                                xs.as_ptr().add(src + xx * c),
                                os.as_mut_ptr().add(dst + 2 * xx * c),
                                c,
                            );
                            std::ptr::copy_nonoverlapping(
                                xs.as_ptr().add(src + xx * c),
                                os.as_mut_ptr().add(dst + (2 * xx + 1) * c),
                                c,
                            );
                        }
                        std::ptr::copy_nonoverlapping(
                            os.as_ptr().add(dst),
                            os.as_mut_ptr().add(dst + 2 * row),
                            2 * row,
                        );
                    }
                }
            }
        }
        let needs = self.needs(x);
        self.push(out, needs, Op::Upsample2x { x })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let src = &self.nodes[x.0].value;
        let v = match src.clone().into_shape_with_order(IxDyn(shape)) {
            Ok(v) => v,
            Err(_) => src
                .as_standard_layout()
                .to_owned()
                .into_shape_with_order(IxDyn(shape))
                .expect("reshape size mismatch"),
        };
        let needs = self.needs(x);
        self.push(v, needs, Op::Reshape { x })
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = as2(&self.nodes[a.0].value);
        let bv = as2(&self.nodes[b.0].value);
        assert_eq!(av.nrows(), bv.nrows(), "concat row mismatch");
        let (n, da, db) = (av.nrows(), av.ncols(), bv.ncols());
        let mut v = ndarray::Array2::<T>::zeros((n, da + db));
        v.slice_mut(ndarray::s![.., ..da]).assign(&av);
        v.slice_mut(ndarray::s![.., da..]).assign(&bv);
        let needs = self.needs(a) || self.needs(b);
        self.push(v.into_dyn(), needs, Op::ConcatCols { a, b })
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let tv = as2(&self.nodes[table.0].value);
        let d = tv.ncols();
        let mut out = ndarray::Array2::<T>::zeros((ids.len(), d));
        for (mut row, &i) in out.axis_iter_mut(Axis(0)).zip(ids.iter()) {
            row.assign(&tv.row(i));
        }
        let needs = self.needs(table);
        self.push(out.into_dyn(), needs, Op::GatherRows { table, ids: ids.to_vec() })
    }

    /// mean + exp(logstd) * noise, with `noise` a fixed sample.
    pub fn reparam(&mut self, mean: NodeId, logstd: NodeId, noise: ArrayD<T>) -> NodeId {
        let std = self.nodes[logstd.0].value.mapv(|e| e.exp());
        let v = &self.nodes[mean.0].value + &(&std * &noise);
        let needs = self.needs(mean) || self.needs(logstd);
        self.push(v, needs, Op::Reparam { mean, logstd, noise, std })
    }

    /// Mean over batch and pixels of the per-pixel channel-euclidean distance.
    pub fn pixel_l2_mean(&mut self, x: NodeId, target: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let tv = &self.nodes[target.0].value;
        assert_eq!(xv.shape(), tv.shape(), "pixel_l2 shape mismatch");
        let shape = xv.shape();
        let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let mut norms = ArrayD::<T>::zeros(IxDyn(&[b, h, w]));
        {
            let xs = xv.as_slice().unwrap();
            let ts = tv.as_slice().unwrap();
            let ns = norms.as_slice_mut().unwrap();
            for p in 0..b * h * w {
                let off = p * c;
                let mut acc = T::zero();
                for ci in 0..c {
                    let d = xs[off + ci] - ts[off + ci];
                    acc = acc + d * d;
                }
                ns[p] = acc.sqrt();
            }
        }
        let total = norms.iter().fold(T::zero(), |a, &v| a + v);
        let value = total / T::from_f64((b * h * w) as f64);
        let needs = self.needs(x) || self.needs(target);
        self.push(
        ArrayD::from_elem(IxDyn(&[]), value),
            needs,
            Op::PixelL2Mean { x, target, norms },
        )
    }

    /// Mean negative log-likelihood of `labels` under softmax of `logits`.
    pub fn nll_mean(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = as2(&self.nodes[logits.0].value);
        let (b, k) = lv.dim();
        assert_eq!(labels.len(), b);
        let mut probs = ndarray::Array2::<T>::zeros((b, k));
        let mut total = T::zero();
        for (i, row) in lv.axis_iter(Axis(0)).enumerate() {
            let label = labels[i];
            assert!(label < k, "label out of range");
            let lse = logsumexp_into(&row, &mut probs.row_mut(i));
            total = total + lse - row[label];
        }
        let value = total / T::from_f64(b as f64);
        let needs = self.needs(logits);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), value),
            needs,
            Op::NllMean { logits, labels: labels.to_vec(), probs },
        )
    }

    /// Mean negative log-unlikelihood: -log(1 - softmax(logits)[label]),
    /// computed as logsumexp(all) - logsumexp(all except label).
    pub fn nlu_mean(&mut self, logits: NodeId, labels: &[usize]) -> NodeId {
        let lv = as2(&self.nodes[logits.0].value);
        let (b, k) = lv.dim();
        assert!(k >= 2, "nlu needs at least two classes");
        assert_eq!(labels.len(), b);
        let mut probs = ndarray::Array2::<T>::zeros((b, k));
        let mut probs_excl = ndarray::Array2::<T>::zeros((b, k));
        let mut total = T::zero();
        for (i, row) in lv.axis_iter(Axis(0)).enumerate() {
            let label = labels[i];
            assert!(label < k, "label out of range");
            let lse_all = logsumexp_into(&row, &mut probs.row_mut(i));
            let lse_excl = logsumexp_excl_into(&row, label, &mut probs_excl.row_mut(i));
            total = total + lse_all - lse_excl;
        }
        let value = total / T::from_f64(b as f64);
        let needs = self.needs(logits);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), value),
            needs,
            Op::NluMean { logits, labels: labels.to_vec(), probs, probs_excl },
        )
    }

    /// Mean over batch of the diagonal-Gaussian KL to N(0, I), parameterized
    /// by mean and log-std rows.
    pub fn kl_std_normal_mean(&mut self, mean: NodeId, logstd: NodeId) -> NodeId {
        let mv = as2(&self.nodes[mean.0].value);
        let sv = as2(&self.nodes[logstd.0].value);
        assert_eq!(mv.dim(), sv.dim());
        let b = mv.nrows();
        let half = T::from_f64(0.5);
        let two = T::from_f64(2.0);
        let mut total = T::zero();
        for (m, l) in mv.iter().zip(sv.iter()) {
            total = total + half * (*m * *m + (two * *l).exp() - T::one() - two * *l);
        }
        let value = total / T::from_f64(b as f64);
        let needs = self.needs(mean) || self.needs(logstd);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), value),
            needs,
            Op::KlStdNormalMean { mean, logstd },
        )
    }

    /// Mean over batch of the squared euclidean distance between code rows.
    pub fn sq_dist_mean(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.shape(), bv.shape());
        let rows = av.shape()[0];
        let mut total = T::zero();
        for (x, y) in av.iter().zip(bv.iter()) {
            let d = *x - *y;
            total = total + d * d;
        }
        let value = total / T::from_f64(rows as f64);
        let needs = self.needs(a) || self.needs(b);
        self.push(ArrayD::from_elem(IxDyn(&[]), value), needs, Op::SqDistMean { a, b })
    }

    /// Mean over batch of (x - target)^2; the least-squares GAN building block.
    pub fn lsq_mean(&mut self, x: NodeId, target: T) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let n = xv.shape()[0];
        let mut total = T::zero();
        for v in xv.iter() {
            let d = *v - target;
            total = total + d * d;
        }
        let value = total / T::from_f64(n as f64);
        let needs = self.needs(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), value), needs, Op::LsqMean { x, target })
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, T)]) -> NodeId {
        let mut total = T::zero();
        let mut needs = false;
        for &(id, wgt) in terms {
            total = total + self.scalar(id) * wgt;
            needs |= self.needs(id);
        }
        self.push(
            ArrayD::from_elem(IxDyn(&[]), total),
            needs,
            Op::WeightedSum { terms: terms.to_vec() },
        )
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients for
    /// every node on a path to a trainable leaf (and the intermediate nodes
    /// needed to get there).
    pub fn backward(&self, loss: NodeId) -> Grads<T> {
        assert!(self.nodes[loss.0].value.len() == 1, "backward needs a scalar loss");
        let mut slots: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(ArrayD::from_elem(self.nodes[loss.0].value.raw_dim(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(gout) = slots[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    // needs_grad on a leaf means trainable; keep its gradient
                    slots[idx] = Some(gout);
                }
                Op::Conv2d { x, w, b, stride, pad, patches } => {
                    let gv = gout.view().into_dimensionality().unwrap();
                    let wv = self.nodes[w.0].value.view().into_dimensionality().unwrap();
                    let xdim = {
                        let s = self.nodes[x.0].value.shape();
                        (s[0], s[1], s[2], s[3])
                    };
                    let grads = conv2d_backward(
                        &gv,
                        &wv,
                        patches.as_ref(),
                        xdim,
                        *stride,
                        *pad,
                        self.needs(*x),
                        self.needs(*w),
                        self.needs(*b),
                    );
                    if let Some(gx) = grads.gx {
                        acc(&mut slots, *x, gx.into_dyn());
                    }
                    if let Some(gw) = grads.gw {
                        acc(&mut slots, *w, gw.into_dyn());
                    }
                    if let Some(gb) = grads.gb {
                        acc(&mut slots, *b, ndarray::Array1::from_vec(gb).into_dyn());
                    }
                }
                Op::Linear { x, w, b } => {
                    let gy = as2(&gout);
                    if self.needs(*x) {
                        let wv = as2(&self.nodes[w.0].value);
                        let mut gx = ndarray::Array2::<T>::zeros((gy.nrows(), wv.ncols()));
                        ndarray::linalg::general_mat_mul(T::one(), &gy, &wv, T::zero(), &mut gx);
                        acc(&mut slots, *x, gx.into_dyn());
                    }
                    if self.needs(*w) {
                        let xv = as2(&self.nodes[x.0].value);
                        let mut gw = ndarray::Array2::<T>::zeros((gy.ncols(), xv.ncols()));
                        ndarray::linalg::general_mat_mul(T::one(), &gy.t(), &xv, T::zero(), &mut gw);
                        acc(&mut slots, *w, gw.into_dyn());
                    }
                    if self.needs(*b) {
                        let gb = gy.sum_axis(Axis(0));
                        acc(&mut slots, *b, gb.into_dyn());
                    }
                }
                Op::Relu { x } => {
                    let mut gx = gout;
                    for (g, &y) in gx.iter_mut().zip(node.value.iter()) {
                        if y <= T::zero() {
                            *g = T::zero();
                        }
                    }
                    acc(&mut slots, *x, gx);
                }
                Op::Tanh { x } => {
                    let mut gx = gout;
                    for (g, &y) in gx.iter_mut().zip(node.value.iter()) {
                        *g = *g * (T::one() - y * y);
                    }
                    acc(&mut slots, *x, gx);
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        acc(&mut slots, *a, gout.clone());
                    }
                    if self.needs(*b) {
                        acc(&mut slots, *b, gout);
                    }
                }
                Op::Scale { x, c } => {
                    acc(&mut slots, *x, gout.mapv(|g| g * *c));
                }
                Op::Upsample2x { x } => {
                    let shape = self.nodes[x.0].value.shape();
                    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
                    let mut gx = ArrayD::<T>::zeros(IxDyn(&[b, h, w, c]));
                    {
                        let gs = gout.as_slice().unwrap();
                        let xs = gx.as_slice_mut().unwrap();
                        let row = w * c;
                        for bi in 0..b {
                            for y in 0..h {
                                let dst = (bi * h + y) * row;
                                let src = (bi * 2 * h + 2 * y) * 2 * row;
                                // 2x2 pixel blocks sum back into one pixel
                                unsafe {
                                    for xx in 0..w {
                                        let d = dst + xx * c;
                                        let s0 = src + 2 * xx * c;
                                        let s1 = src + (2 * xx + 1) * c;
                                        let s2 = s0 + 2 * row;
                                        let s3 = s1 + 2 * row;
                                        for ch in 0..c {
                                            *xs.get_unchecked_mut(d + ch) = *gs.get_unchecked(s0 + ch)
                                                + *gs.get_unchecked(s1 + ch)
                                                + *gs.get_unchecked(s2 + ch)
                                                + *gs.get_unchecked(s3 + ch);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    acc(&mut slots, *x, gx);
                }
                Op::Reshape { x } => {
                    let shape = self.nodes[x.0].value.raw_dim();
                    acc(&mut slots, *x, gout.into_shape_with_order(shape).unwrap());
                }
                Op::ConcatCols { a, b } => {
                    let g = as2(&gout);
                    let da = self.nodes[a.0].value.shape()[1];
                    if self.needs(*a) {
                        acc(&mut slots, *a, g.slice(ndarray::s![.., ..da]).to_owned().into_dyn());
                    }
                    if self.needs(*b) {
                        acc(&mut slots, *b, g.slice(ndarray::s![.., da..]).to_owned().into_dyn());
                    }
                }
                Op::GatherRows { table, ids } => {
                    let shape = self.nodes[table.0].value.raw_dim();
                    let mut gt = ArrayD::<T>::zeros(shape);
                    {
                        let mut gt2 = gt.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                        let g = as2(&gout);
                        for (row, &i) in g.axis_iter(Axis(0)).zip(ids.iter()) {
                            let mut dst = gt2.row_mut(i);
                            for (d, &s) in dst.iter_mut().zip(row.iter()) {
                                *d = *d + s;
                            }
                        }
                    }
                    acc(&mut slots, *table, gt);
                }
                Op::Reparam { mean, logstd, noise, std } => {
                    if self.needs(*mean) {
                        acc(&mut slots, *mean, gout.clone());
                    }
                    if self.needs(*logstd) {
                        let mut gl = gout;
                        for ((g, &s), &n) in gl.iter_mut().zip(std.iter()).zip(noise.iter()) {
                            *g = *g * s * n;
                        }
                        acc(&mut slots, *logstd, gl);
                    }
                }
                Op::PixelL2Mean { x, target, norms } => {
                    let g0 = *gout.iter().next().unwrap();
                    let shape = self.nodes[x.0].value.shape();
                    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
                    let scale = g0 / T::from_f64((b * h * w) as f64);
                    let tiny = T::from_f64(1e-30);
                    let mut gx = ArrayD::<T>::zeros(IxDyn(&[b, h, w, c]));
                    {
                        let xs = self.nodes[x.0].value.as_slice().unwrap();
                        let ts = self.nodes[target.0].value.as_slice().unwrap();
                        let ns = norms.as_slice().unwrap();
                        let gs = gx.as_slice_mut().unwrap();
                        for p in 0..b * h * w {
                            let nrm = ns[p];
                            if nrm <= tiny {
                                continue; // zero subgradient at the kink
                            }
                            let f = scale / nrm;
                            let off = p * c;
                            for ci in 0..c {
                                gs[off + ci] = (xs[off + ci] - ts[off + ci]) * f;
                            }
                        }
                    }
                    if self.needs(*target) {
                        acc(&mut slots, *target, gx.mapv(|v| -v));
                    }
                    if self.needs(*x) {
                        acc(&mut slots, *x, gx);
                    }
                }
                Op::NllMean { logits, labels, probs } => {
                    let g0 = *gout.iter().next().unwrap();
                    let b = labels.len();
                    let scale = g0 / T::from_f64(b as f64);
                    let mut gl = probs.clone();
                    for (i, &label) in labels.iter().enumerate() {
                        gl[(i, label)] = gl[(i, label)] - T::one();
                    }
                    acc(&mut slots, *logits, gl.mapv(|v| v * scale).into_dyn());
                }
                Op::NluMean { logits, labels, probs, probs_excl } => {
                    let g0 = *gout.iter().next().unwrap();
                    let b = labels.len();
                    let scale = g0 / T::from_f64(b as f64);
                    let gl = (probs - probs_excl).mapv(|v| v * scale);
                    acc(&mut slots, *logits, gl.into_dyn());
                }
                Op::KlStdNormalMean { mean, logstd } => {
                    let g0 = *gout.iter().next().unwrap();
                    let b = self.nodes[mean.0].value.shape()[0];
                    let scale = g0 / T::from_f64(b as f64);
                    if self.needs(*mean) {
                        let gm = self.nodes[mean.0].value.mapv(|m| m * scale);
                        acc(&mut slots, *mean, gm);
                    }
                    if self.needs(*logstd) {
                        let two = T::from_f64(2.0);
                        let gl = self.nodes[logstd.0]
                            .value
                            .mapv(|l| ((two * l).exp() - T::one()) * scale);
                        acc(&mut slots, *logstd, gl);
                    }
                }
                Op::SqDistMean { a, b } => {
                    let g0 = *gout.iter().next().unwrap();
                    let rows = self.nodes[a.0].value.shape()[0];
                    let scale = g0 * T::from_f64(2.0) / T::from_f64(rows as f64);
                    let diff = &self.nodes[a.0].value - &self.nodes[b.0].value;
                    if self.needs(*a) {
                        acc(&mut slots, *a, diff.mapv(|v| v * scale));
                    }
                    if self.needs(*b) {
                        acc(&mut slots, *b, diff.mapv(|v| -v * scale));
                    }
                }
                Op::LsqMean { x, target } => {
                    let g0 = *gout.iter().next().unwrap();
                    let n = self.nodes[x.0].value.shape()[0];
                    let scale = g0 * T::from_f64(2.0) / T::from_f64(n as f64);
                    let gx = self.nodes[x.0].value.mapv(|v| (v - *target) * scale);
                    acc(&mut slots, *x, gx);
                }
                Op::WeightedSum { terms } => {
                    let g0 = *gout.iter().next().unwrap();
                    for &(id, wgt) in terms {
                        if self.needs(id) {
                            acc(&mut slots, id, ArrayD::from_elem(IxDyn(&[]), g0 * wgt));
                        }
                    }
                }
            }
        }
        Grads { slots }
    }
}

fn acc<T: Scalar>(slots: &mut [Option<ArrayD<T>>], id: NodeId, g: ArrayD<T>) {
    match &mut slots[id.0] {
        Some(existing) => existing.zip_mut_with(&g, |a, &b| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

fn as2<T: Scalar>(v: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    v.view().into_dimensionality().expect("rank-2 value expected")
}

/// Log-sum-exp of a row with the max shift; also writes softmax into `probs`.
fn logsumexp_into<T: Scalar>(
    row: &ndarray::ArrayView1<T>,
    probs: &mut ndarray::ArrayViewMut1<T>,
) -> T {
    let mut maxv = T::neg_infinity();
    for &v in row.iter() {
        if v > maxv {
            maxv = v;
        }
    }
    let mut sum = T::zero();
    for (p, &v) in probs.iter_mut().zip(row.iter()) {
        let e = (v - maxv).exp();
        *p = e;
        sum = sum + e;
    }
    let inv = T::one() / sum;
    for p in probs.iter_mut() {
        *p = *p * inv;
    }
    maxv + sum.ln()
}

/// Log-sum-exp over all entries except `skip`; writes the excluded softmax
/// (zero at `skip`) into `probs`.
fn logsumexp_excl_into<T: Scalar>(
    row: &ndarray::ArrayView1<T>,
    skip: usize,
    probs: &mut ndarray::ArrayViewMut1<T>,
) -> T {
    let mut maxv = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if j != skip && v > maxv {
            maxv = v;
        }
    }
    let mut sum = T::zero();
    for (j, (p, &v)) in probs.iter_mut().zip(row.iter()).enumerate() {
        if j == skip {
            *p = T::zero();
            continue;
        }
        let e = (v - maxv).exp();
        *p = e;
        sum = sum + e;
    }
    let inv = T::one() / sum;
    for (j, p) in probs.iter_mut().enumerate() {
        if j != skip {
            *p = *p * inv;
        }
    }
    maxv + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn randn(s: &mut Stream, shape: &[usize]) -> ArrayD<f64> {
        let mut a = ArrayD::<f64>::zeros(IxDyn(shape));
        for v in a.iter_mut() {
            *v = s.normal();
        }
        a
    }

    /// Finite-difference check of an arbitrary scalar graph builder with
    /// respect to one leaf input.
    fn fd_check(
        shape: &[usize],
        build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId,
        seed: u64,
        tol: f64,
    ) {
        let mut s = Stream::new(seed, "fd");
        let x0 = randn(&mut s, shape);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(x0.clone(), true);
        let loss = build(&mut g, x);
        let mut grads = g.backward(loss);
        let gx = grads.take(x).expect("gradient missing");

        let eval = |arr: &ArrayD<f64>| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(arr.clone(), false);
            let loss = build(&mut g, x);
            g.scalar(loss)
        };

        let h = 1e-5;
        let n_checks = x0.len().min(24);
        for t in 0..n_checks {
            let lin = (t * 7919) % x0.len();
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus.as_slice_mut().unwrap()[lin] += h;
            minus.as_slice_mut().unwrap()[lin] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = gx.as_slice().unwrap()[lin];
            let denom = an.abs().max(fd.abs()).max(1e-4);
            assert!(
                ((fd - an) / denom).abs() < tol,
                "fd {fd} vs analytic {an} at {lin}"
            );
        }
    }

    #[test]
    fn relu_tanh_linear_chain() {
        let mut s = Stream::new(2, "wts");
        let w = randn(&mut s, &[5, 7]);
        let b = randn(&mut s, &[5]);
        let w2 = randn(&mut s, &[1, 5]);
        let b2 = randn(&mut s, &[1]);
        fd_check(
            &[3, 7],
            move |g, x| {
                let wn = g.leaf(w.clone(), true);
                let bn = g.leaf(b.clone(), true);
                let h1 = g.linear(x, wn, bn);
                let h2 = g.relu(h1);
                let h3 = g.tanh(h2);
                let w2n = g.leaf(w2.clone(), true);
                let b2n = g.leaf(b2.clone(), true);
                let y = g.linear(h3, w2n, b2n);
                g.lsq_mean(y, 0.3)
            },
            3,
            1e-5,
        );
    }

    #[test]
    fn conv_upsample_chain() {
        let mut s = Stream::new(4, "conv-chain");
        let w = randn(&mut s, &[4, 3, 3, 2]);
        let b = randn(&mut s, &[4]);
        let target = randn(&mut s, &[2, 8, 8, 4]);
        fd_check(
            &[2, 4, 4, 2],
            move |g, x| {
                let up = g.upsample2x(x);
                let wn = g.leaf(w.clone(), true);
                let bn = g.leaf(b.clone(), true);
                let y = g.conv2d(up, wn, bn, 1, 1);
                let yt = g.tanh(y);
                let t = g.constant(target.clone());
                g.pixel_l2_mean(yt, t)
            },
            5,
            1e-4,
        );
    }

    #[test]
    fn classifier_losses() {
        fd_check(
            &[4, 6],
            |g, x| {
                let labels = vec![0usize, 3, 5, 2];
                g.nll_mean(x, &labels)
            },
            6,
            1e-5,
        );
        fd_check(
            &[4, 6],
            |g, x| {
                let labels = vec![1usize, 1, 4, 0];
                g.nlu_mean(x, &labels)
            },
            7,
            1e-5,
        );
    }

    #[test]
    fn kl_reparam_gather() {
        let mut s = Stream::new(8, "klrg");
        let noise = randn(&mut s, &[3, 4]);
        fd_check(
            &[6, 4],
            move |g, x| {
                // x plays the role of a style table; gather, reparameterize, KL
                let ids = vec![0usize, 2, 5];
                let mean = g.gather_rows(x, &ids);
                let logstd = g.scale(mean, -0.5);
                let sample = g.reparam(mean, logstd, noise.clone());
                let kl = g.kl_std_normal_mean(mean, logstd);
                let sq = g.sq_dist_mean(sample, mean);
                g.weighted_sum(&[(kl, 1.0), (sq, 0.7)])
            },
            9,
            1e-4,
        );
    }

    #[test]
    fn concat_reshape_scale() {
        let mut s = Stream::new(10, "ccr");
        let other = randn(&mut s, &[2, 3]);
        fd_check(
            &[2, 5],
            move |g, x| {
                let o = g.constant(other.clone());
                let cat = g.concat_cols(x, o);
                let r = g.reshape(cat, &[2, 8, 1, 1]);
                let r2 = g.reshape(r, &[2, 8]);
                let sc = g.scale(r2, -1.25);
                let z = g.constant(ArrayD::zeros(IxDyn(&[2, 8])));
                g.sq_dist_mean(sc, z)
            },
            11,
            1e-5,
        );
    }

    #[test]
    fn grad_accumulates_across_uses() {
        // the same leaf feeds two branches; gradient must be the sum
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 1.5), true);
        let a = g.scale(x, 2.0);
        let b = g.scale(x, 3.0);
        let s = g.add(a, b);
        let z = g.constant(ArrayD::zeros(IxDyn(&[2, 2])));
        let loss = g.sq_dist_mean(s, z);
        let mut grads = g.backward(loss);
        let gx = grads.take(x).unwrap();
        // d/dx mean_rows sum (5x)^2 = 2*25*x / rows = 25*1.5*2/2
        for &v in gx.iter() {
            assert!((v - 37.5).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn frozen_leaves_get_no_gradient_but_pass_it_through() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[2, 3]), 0.5), true);
        let w_frozen = g.leaf(ArrayD::from_elem(IxDyn(&[4, 3]), 0.1), false);
        let b_frozen = g.leaf(ArrayD::zeros(IxDyn(&[4])), false);
        let y = g.linear(x, w_frozen, b_frozen);
        let z = g.constant(ArrayD::zeros(IxDyn(&[2, 4])));
        let loss = g.sq_dist_mean(y, z);
        let mut grads = g.backward(loss);
        assert!(grads.take(x).is_some());
        assert!(grads.take(w_frozen).is_none());
        assert!(grads.take(b_frozen).is_none());
    }
}
