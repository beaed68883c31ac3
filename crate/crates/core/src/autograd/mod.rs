//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameters are
//! pulled from a [`ParamStore`] on first use; whether they participate in
//! backpropagation is decided by the graph's trainable [`GroupSet`], which is
//! how gradient routing between generator, discriminator and encoder is
//! enforced. Operations whose inputs do not require gradients are recorded as
//! constants and are skipped by [`Graph::backward`].

mod kernels;

use alloc::vec;
use alloc::vec::Vec;

use crate::nn::{GroupSet, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::{numel, Tensor};

pub use kernels::{col2im, conv_out, im2col, BilinearAxis};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine(Var, f64),
    Square(Var),
    Sqrt(Var),
    Rsqrt(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu { x: Var, slope: f64, gain: f64 },
    Softplus(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    BroadcastTo(Var),
    SumTo(Var),
    AddBias { x: Var, b: Var },
    ScaleChannels { x: Var, s: Var },
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    UpsampleNearest2x(Var),
    UpsampleBilinear(Var),
    AvgPool2x(Var),
    Concat1(Vec<Var>),
    Slice1 { x: Var, start: usize },
    Gather0 { x: Var, idx: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    LogSoftmax1(Var),
    Softmax1(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients<S> {
    nodes: Vec<Option<Tensor<S>>>,
    params: Vec<(ParamId, Tensor<S>)>,
}

impl<S: Real> Gradients<S> {
    /// Gradient with respect to a leaf variable (`None` if it does not
    /// require gradients or the root does not depend on it).
    pub fn wrt(&self, var: Var) -> Option<&Tensor<S>> {
        self.nodes.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> &[(ParamId, Tensor<S>)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor<S>)> {
        self.params
    }
}

/// Accumulated parameter gradients, summed over several backward passes.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads<S> {
    grads: Vec<(ParamId, Tensor<S>)>,
}

impl<S: Real> ParamGrads<S> {
    pub fn new() -> Self {
        Self { grads: Vec::new() }
    }

    /// Adds `scale * g` for every parameter gradient in `g`.
    pub fn accumulate(&mut self, g: &Gradients<S>, scale: S) {
        for (id, t) in g.params() {
            self.add(*id, t, scale);
        }
    }

    /// Like [`ParamGrads::accumulate`], keeping only parameters whose group
    /// is in `groups`.
    pub fn accumulate_groups(&mut self, g: &Gradients<S>, scale: S, store: &ParamStore<S>, groups: GroupSet) {
        for (id, t) in g.params() {
            if groups.contains(store.group(*id)) {
                self.add(*id, t, scale);
            }
        }
    }

    pub fn add(&mut self, id: ParamId, t: &Tensor<S>, scale: S) {
        match self.grads.iter_mut().find(|(p, _)| *p == id) {
            Some((_, acc)) => acc.axpy(scale, t),
            None => {
                let mut v = t.clone();
                if scale != S::one() {
                    v.data_mut().iter_mut().for_each(|x| *x *= scale);
                }
                self.grads.push((id, v));
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(ParamId, Tensor<S>)> {
        self.grads.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|(_, g)| g.all_finite())
    }
}

/// Operation recorder. See the module documentation.
pub struct Graph<'a, S> {
    store: Option<&'a ParamStore<S>>,
    trainable: GroupSet,
    nodes: Vec<Node<S>>,
    param_vars: Vec<Option<Var>>,
}

impl<'a, S: Real> Graph<'a, S> {
    /// A graph without parameters.
    pub fn new() -> Self {
        Self {
            store: None,
            trainable: GroupSet::NONE,
            nodes: Vec::new(),
            param_vars: Vec::new(),
        }
    }

    /// A graph reading parameters from `store`; only parameters whose group is
    /// in `trainable` receive gradients.
    pub fn with_params(store: &'a ParamStore<S>, trainable: GroupSet) -> Self {
        Self {
            store: Some(store),
            trainable,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore<S> {
        self.store.expect("graph has no parameter store")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// A constant input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input leaf whose gradient can be read back after `backward`.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, v: S) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.store();
        let rg = self.trainable.contains(store.group(id));
        let v = self.push(store.get(id).clone(), Op::Param(id), rg);
        self.param_vars[id.0] = Some(v);
        v
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(S) -> S) -> Var {
        let value = self.val(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = self.val(a).zip_map(self.val(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = self.val(a).zip_map(self.val(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = self.val(a).zip_map(self.val(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        let value = self.val(a).zip_map(self.val(b), |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Div(a, b), rg)
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (S::lit(scale), S::lit(shift));
        self.unary(a, Op::Affine(a, scale), move |x| x * s + t)
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    /// `1 / sqrt(a)`.
    pub fn rsqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Rsqrt(a), |x| x.sqrt().recip())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), |x| x.ln())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    /// `gain * (x if x > 0 else slope * x)`.
    pub fn leaky_relu(&mut self, a: Var, slope: f64, gain: f64) -> Var {
        let (sl, gn) = (S::lit(slope), S::lit(gain));
        self.unary(
            a,
            Op::LeakyRelu {
                x: a,
                slope,
                gain,
            },
            move |x| if x > S::zero() { gn * x } else { gn * sl * x },
        )
    }

    /// `ln(1 + exp(a))`, computed stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    /// Product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul: {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = Tensor::zeros(&[m, n]);
        S::gemm(
            m,
            k,
            n,
            S::one(),
            self.val(a).data(),
            k as isize,
            1,
            self.val(b).data(),
            n as isize,
            1,
            S::zero(),
            out.data_mut(),
            n as isize,
            1,
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = transpose2(self.val(a));
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .val(a)
            .clone()
            .reshape(shape)
            .expect("reshape: element count mismatch");
        let rg = self.rg(a);
        self.push(value, Op::Reshape(a), rg)
    }

    /// Broadcasts `a` to `shape`; `a` must have the same rank, with each axis
    /// either 1 or equal to the target extent.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let map = broadcast_map(self.shape(a), shape);
        let src = self.val(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let value = Tensor::from_vec(shape, data).unwrap();
        let rg = self.rg(a);
        self.push(value, Op::BroadcastTo(a), rg)
    }

    /// Sums `a` down to `shape` (the inverse of [`Graph::broadcast_to`]).
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Var {
        let map = broadcast_map(shape, self.shape(a));
        let mut out = Tensor::zeros(shape);
        {
            let o = out.data_mut();
            for (&j, &v) in map.iter().zip(self.val(a).data()) {
                o[j] += v;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SumTo(a), rg)
    }

    /// Adds a per-channel bias `b: [C]` to `x: [N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let sx = self.shape(x).to_vec();
        assert!(sx.len() >= 2 && self.shape(b) == [sx[1]], "add_bias: {sx:?} + {:?}", self.shape(b));
        let inner = numel(&sx[2..]);
        let c = sx[1];
        let bias = self.val(b).data().to_vec();
        let mut out = self.val(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bv = bias[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddBias { x, b }, rg)
    }

    /// Multiplies `x: [N, C, ...]` by per-sample, per-channel factors `s: [N, C]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Var {
        let sx = self.shape(x).to_vec();
        assert!(sx.len() >= 2 && self.shape(s) == [sx[0], sx[1]], "scale_channels: {sx:?} * {:?}", self.shape(s));
        let inner = numel(&sx[2..]);
        let sv = self.val(s).data().to_vec();
        let mut out = self.val(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
            let f = sv[i];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let rg = self.rg(x) || self.rg(s);
        self.push(out, Op::ScaleChannels { x, s }, rg)
    }

    /// 2D cross-correlation of `x: [N, C, H, W]` with `w: [O, C, K, K]`,
    /// zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        assert!(sx.len() == 4 && sw.len() == 4 && sx[1] == sw[1] && sw[2] == sw[3], "conv2d: {sx:?} * {sw:?}");
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        let (ho, wo) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad));
        let ckk = c * k * k;
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        let mut col = vec![S::zero(); ckk * ho * wo];
        {
            let xv = self.val(x).data();
            let wv = self.val(w).data();
            let od = out.data_mut();
            for b in 0..n {
                let xs = &xv[b * c * h * wd..(b + 1) * c * h * wd];
                let cols: &[S] = if k == 1 && stride == 1 && pad == 0 {
                    xs
                } else {
                    im2col(xs, c, h, wd, k, stride, pad, &mut col);
                    &col
                };
                S::gemm(
                    o,
                    ckk,
                    ho * wo,
                    S::one(),
                    wv,
                    ckk as isize,
                    1,
                    cols,
                    (ho * wo) as isize,
                    1,
                    S::zero(),
                    &mut od[b * o * ho * wo..(b + 1) * o * ho * wo],
                    (ho * wo) as isize,
                    1,
                );
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(out, Op::Conv2d { x, w, stride, pad }, rg)
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Var {
        let value = kernels::upsample_nearest2x(self.val(x));
        let rg = self.rg(x);
        self.push(value, Op::UpsampleNearest2x(x), rg)
    }

    /// Bilinear resize of `x: [N, C, H, W]` to `[N, C, out_h, out_w]`
    /// (half-pixel centers, edge clamped).
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let value = kernels::bilinear_forward(self.val(x), out_h, out_w);
        let rg = self.rg(x);
        self.push(value, Op::UpsampleBilinear(x), rg)
    }

    pub fn avg_pool2x(&mut self, x: Var) -> Var {
        let value = kernels::avg_pool2x(self.val(x));
        let rg = self.rg(x);
        self.push(value, Op::AvgPool2x(x), rg)
    }

    /// Concatenation along axis 1.
    pub fn concat1(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat1: no inputs");
        let s0 = self.shape(xs[0]).to_vec();
        let n = s0[0];
        let inner = numel(&s0[2..]);
        let mut total_c = 0;
        for &v in xs {
            let s = self.shape(v);
            assert!(s[0] == n && s[2..] == s0[2..], "concat1: {s:?} vs {s0:?}");
            total_c += s[1];
        }
        let mut shape = s0.clone();
        shape[1] = total_c;
        let mut data = Vec::with_capacity(numel(&shape));
        for b in 0..n {
            for &v in xs {
                let t = self.val(v);
                let block = t.dim(1) * inner;
                data.extend_from_slice(&t.data()[b * block..(b + 1) * block]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Concat1(xs.to_vec()), rg)
    }

    /// `x[:, start..start + len, ...]`.
    pub fn slice1(&mut self, x: Var, start: usize, len: usize) -> Var {
        let sx = self.shape(x).to_vec();
        assert!(start + len <= sx[1], "slice1: {start}+{len} out of {sx:?}");
        let inner = numel(&sx[2..]);
        let mut shape = sx.clone();
        shape[1] = len;
        let mut data = Vec::with_capacity(numel(&shape));
        let src = self.val(x).data();
        for b in 0..sx[0] {
            let base = b * sx[1] * inner;
            data.extend_from_slice(&src[base + start * inner..base + (start + len) * inner]);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(&shape, data).unwrap(), Op::Slice1 { x, start }, rg)
    }

    /// Selects entries along axis 0.
    pub fn gather0(&mut self, x: Var, idx: &[usize]) -> Var {
        let sx = self.shape(x).to_vec();
        let inner = numel(&sx[1..]);
        let src = self.val(x).data();
        let mut data = Vec::with_capacity(inner * idx.len());
        for &i in idx {
            assert!(i < sx[0], "gather0: index {i} out of {}", sx[0]);
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let mut shape = sx;
        shape[0] = idx.len();
        let rg = self.rg(x);
        self.push(
            Tensor::from_vec(&shape, data).unwrap(),
            Op::Gather0 {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.val(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.val(x).mean());
        let rg = self.rg(x);
        self.push(value, Op::MeanAll(x), rg)
    }

    /// Log-softmax over axis 1 of `[N, C, ...]`.
    pub fn log_softmax1(&mut self, x: Var) -> Var {
        let value = kernels::softmax1(self.val(x), true);
        let rg = self.rg(x);
        self.push(value, Op::LogSoftmax1(x), rg)
    }

    /// Softmax over axis 1 of `[N, C, ...]`.
    pub fn softmax1(&mut self, x: Var) -> Var {
        let value = kernels::softmax1(self.val(x), false);
        let rg = self.rg(x);
        self.push(value, Op::Softmax1(x), rg)
    }

    /// Backpropagates from a single-element `root`.
    pub fn backward(&self, root: Var) -> Gradients<S> {
        assert_eq!(self.val(root).len(), 1, "backward: root must be a scalar");
        let seed = Tensor::ones(self.shape(root));
        self.backward_with(root, seed)
    }

    /// Backpropagates `seed` (shaped like `root`) through the graph.
    pub fn backward_with(&self, root: Var, seed: Tensor<S>) -> Gradients<S> {
        assert_eq!(seed.shape(), self.shape(root), "backward: seed shape");
        let mut grads: Vec<Option<Tensor<S>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        let mut params = Vec::new();
        if self.rg(root) {
            grads[root.0] = Some(seed);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        params.push((*id, g));
                    }
                    continue;
                }
                _ => {}
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        params.sort_by_key(|(id, _)| *id);
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.rg(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(t) => t.axpy(S::one(), &g),
            slot => *slot = Some(g),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor<S>>], v: Var, f: impl FnOnce() -> Tensor<S>) {
        if self.rg(v) {
            let g = f();
            self.acc(grads, v, g);
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let y = &self.nodes[i].value;
        match self.nodes[i].op.clone() {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc_with(grads, a, || g.clone());
                self.acc_with(grads, b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.acc_with(grads, a, || g.clone());
                self.acc_with(grads, b, || g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.acc_with(grads, a, || g.zip_map(self.val(b), |gv, bv| gv * bv));
                self.acc_with(grads, b, || g.zip_map(self.val(a), |gv, av| gv * av));
            }
            Op::Div(a, b) => {
                self.acc_with(grads, a, || g.zip_map(self.val(b), |gv, bv| gv / bv));
                self.acc_with(grads, b, || {
                    let t = g.zip_map(y, |gv, yv| gv * yv);
                    t.zip_map(self.val(b), |tv, bv| -tv / bv)
                });
            }
            Op::Affine(a, scale) => {
                let s = S::lit(scale);
                self.acc_with(grads, a, || g.map(|v| v * s));
            }
            Op::Square(a) => {
                let two = S::lit(2.0);
                self.acc_with(grads, a, || g.zip_map(self.val(a), |gv, av| two * av * gv));
            }
            Op::Sqrt(a) => {
                let half = S::lit(0.5);
                self.acc_with(grads, a, || g.zip_map(y, |gv, yv| half * gv / yv));
            }
            Op::Rsqrt(a) => {
                let mhalf = S::lit(-0.5);
                self.acc_with(grads, a, || g.zip_map(y, |gv, yv| mhalf * gv * yv * yv * yv));
            }
            Op::Exp(a) => self.acc_with(grads, a, || g.zip_map(y, |gv, yv| gv * yv)),
            Op::Ln(a) => self.acc_with(grads, a, || g.zip_map(self.val(a), |gv, av| gv / av)),
            Op::Tanh(a) => {
                self.acc_with(grads, a, || g.zip_map(y, |gv, yv| gv * (S::one() - yv * yv)))
            }
            Op::Sigmoid(a) => {
                self.acc_with(grads, a, || g.zip_map(y, |gv, yv| gv * yv * (S::one() - yv)))
            }
            Op::LeakyRelu { x, slope, gain } => {
                let (pos, neg) = (S::lit(gain), S::lit(gain * slope));
                self.acc_with(grads, x, || {
                    g.zip_map(self.val(x), |gv, xv| if xv > S::zero() { gv * pos } else { gv * neg })
                });
            }
            Op::Softplus(a) => {
                self.acc_with(grads, a, || g.zip_map(self.val(a), |gv, av| gv * sigmoid(av)))
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                self.acc_with(grads, a, || {
                    // dA = dY · Bᵀ
                    let mut da = Tensor::zeros(&[m, k]);
                    S::gemm(m, n, k, S::one(), g.data(), n as isize, 1, self.val(b).data(), 1, n as isize, S::zero(), da.data_mut(), k as isize, 1);
                    da
                });
                self.acc_with(grads, b, || {
                    // dB = Aᵀ · dY
                    let mut db = Tensor::zeros(&[k, n]);
                    S::gemm(k, m, n, S::one(), self.val(a).data(), 1, k as isize, g.data(), n as isize, 1, S::zero(), db.data_mut(), n as isize, 1);
                    db
                });
            }
            Op::Transpose(a) => self.acc_with(grads, a, || transpose2(g)),
            Op::Reshape(a) => {
                self.acc_with(grads, a, || g.clone().reshape(self.shape(a)).unwrap())
            }
            Op::BroadcastTo(a) => self.acc_with(grads, a, || {
                let map = broadcast_map(self.shape(a), g.shape());
                let mut out = Tensor::zeros(self.shape(a));
                let o = out.data_mut();
                for (&j, &v) in map.iter().zip(g.data()) {
                    o[j] += v;
                }
                out
            }),
            Op::SumTo(a) => self.acc_with(grads, a, || {
                let map = broadcast_map(g.shape(), self.shape(a));
                let data = map.iter().map(|&j| g.data()[j]).collect();
                Tensor::from_vec(self.shape(a), data).unwrap()
            }),
            Op::AddBias { x, b } => {
                self.acc_with(grads, x, || g.clone());
                self.acc_with(grads, b, || {
                    let c = self.shape(b)[0];
                    let inner = numel(&g.shape()[2..]);
                    let mut gb = Tensor::zeros(&[c]);
                    let d = gb.data_mut();
                    for (k, chunk) in g.data().chunks(inner).enumerate() {
                        d[k % c] += chunk.iter().copied().sum::<S>();
                    }
                    gb
                });
            }
            Op::ScaleChannels { x, s } => {
                let inner = numel(&g.shape()[2..]).max(1);
                self.acc_with(grads, x, || {
                    let sv = self.val(s).data();
                    let mut gx = g.clone();
                    for (k, chunk) in gx.data_mut().chunks_mut(inner).enumerate() {
                        let f = sv[k];
                        chunk.iter_mut().for_each(|v| *v *= f);
                    }
                    gx
                });
                self.acc_with(grads, s, || {
                    let xv = self.val(x).data();
                    let data = g
                        .data()
                        .chunks(inner)
                        .zip(xv.chunks(inner))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    Tensor::from_vec(self.shape(s), data).unwrap()
                });
            }
            Op::Conv2d { x, w, stride, pad } => self.conv2d_backward(x, w, stride, pad, g, grads),
            Op::UpsampleNearest2x(x) => {
                self.acc_with(grads, x, || kernels::upsample_nearest2x_backward(g, self.shape(x)))
            }
            Op::UpsampleBilinear(x) => {
                self.acc_with(grads, x, || kernels::bilinear_backward(g, self.shape(x)))
            }
            Op::AvgPool2x(x) => {
                self.acc_with(grads, x, || kernels::avg_pool2x_backward(g, self.shape(x)))
            }
            Op::Concat1(xs) => {
                let n = g.dim(0);
                let inner = numel(&g.shape()[2..]);
                let total = g.dim(1) * inner;
                let mut offset = 0;
                for v in xs {
                    let c = self.shape(v)[1];
                    let block = c * inner;
                    self.acc_with(grads, v, || {
                        let mut data = Vec::with_capacity(n * block);
                        for b in 0..n {
                            let base = b * total + offset;
                            data.extend_from_slice(&g.data()[base..base + block]);
                        }
                        Tensor::from_vec(self.shape(v), data).unwrap()
                    });
                    offset += block;
                }
            }
            Op::Slice1 { x, start } => self.acc_with(grads, x, || {
                let sx = self.shape(x);
                let inner = numel(&sx[2..]);
                let len = g.dim(1);
                let mut gx = Tensor::zeros(sx);
                let d = gx.data_mut();
                for b in 0..sx[0] {
                    let dst = b * sx[1] * inner + start * inner;
                    let src = b * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                gx
            }),
            Op::Gather0 { x, idx } => self.acc_with(grads, x, || {
                let sx = self.shape(x);
                let inner = numel(&sx[1..]);
                let mut gx = Tensor::zeros(sx);
                let d = gx.data_mut();
                for (k, &i) in idx.iter().enumerate() {
                    for (dv, &gv) in d[i * inner..(i + 1) * inner]
                        .iter_mut()
                        .zip(&g.data()[k * inner..(k + 1) * inner])
                    {
                        *dv += gv;
                    }
                }
                gx
            }),
            Op::SumAll(x) => {
                let gv = g.item();
                self.acc_with(grads, x, || Tensor::full(self.shape(x), gv));
            }
            Op::MeanAll(x) => {
                let n = S::from_usize(self.val(x).len().max(1)).unwrap();
                let gv = g.item() / n;
                self.acc_with(grads, x, || Tensor::full(self.shape(x), gv));
            }
            Op::LogSoftmax1(x) => self.acc_with(grads, x, || kernels::log_softmax1_backward(y, g)),
            Op::Softmax1(x) => self.acc_with(grads, x, || kernels::softmax1_backward(y, g)),
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
    ) {
        let sx = self.shape(x);
        let sw = self.shape(w);
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, k) = (sw[0], sw[2]);
        let (ho, wo) = (g.dim(2), g.dim(3));
        let ckk = c * k * k;
        let hw = ho * wo;
        let direct = k == 1 && stride == 1 && pad == 0;
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        let mut gw = if need_w { Some(Tensor::zeros(sw)) } else { None };
        let mut gx = if need_x { Some(Tensor::zeros(sx)) } else { None };
        let mut col = vec![S::zero(); ckk * hw];
        let mut gcol = vec![S::zero(); ckk * hw];
        let xv = self.val(x).data();
        let wv = self.val(w).data();
        for b in 0..n {
            let gb = &g.data()[b * o * hw..(b + 1) * o * hw];
            if let Some(gw) = gw.as_mut() {
                let xs = &xv[b * c * h * wd..(b + 1) * c * h * wd];
                let cols: &[S] = if direct {
                    xs
                } else {
                    im2col(xs, c, h, wd, k, stride, pad, &mut col);
                    &col
                };
                // dW += dY_b · colᵀ
                S::gemm(o, hw, ckk, S::one(), gb, hw as isize, 1, cols, 1, hw as isize, S::one(), gw.data_mut(), ckk as isize, 1);
            }
            if let Some(gx) = gx.as_mut() {
                let dst = &mut gx.data_mut()[b * c * h * wd..(b + 1) * c * h * wd];
                if direct {
                    // dX_b = Wᵀ · dY_b
                    S::gemm(ckk, o, hw, S::one(), wv, 1, ckk as isize, gb, hw as isize, 1, S::zero(), dst, hw as isize, 1);
                } else {
                    S::gemm(ckk, o, hw, S::one(), wv, 1, ckk as isize, gb, hw as isize, 1, S::zero(), &mut gcol, hw as isize, 1);
                    col2im(&gcol, c, h, wd, k, stride, pad, dst);
                }
            }
        }
        if let Some(gw) = gw {
            self.acc(grads, w, gw);
        }
        if let Some(gx) = gx {
            self.acc(grads, x, gx);
        }
    }
}

impl<S: Real> Default for Graph<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

pub(crate) fn softplus<S: Real>(x: S) -> S {
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn transpose2<S: Real>(t: &Tensor<S>) -> Tensor<S> {
    assert_eq!(t.rank(), 2, "transpose: rank-2 tensor required");
    let (r, c) = (t.dim(0), t.dim(1));
    let src = t.data();
    Tensor::from_fn(&[c, r], |i| {
        let (ci, ri) = (i / r, i % r);
        src[ri * c + ci]
    })
}

/// For every flat index of `to`, the flat index of `from` it reads under
/// broadcasting. `from` must match the rank of `to` with extents 1 or equal.
fn broadcast_map(from: &[usize], to: &[usize]) -> Vec<usize> {
    assert_eq!(from.len(), to.len(), "broadcast: rank mismatch {from:?} -> {to:?}");
    for (&f, &t) in from.iter().zip(to) {
        assert!(f == t || f == 1, "broadcast: {from:?} -> {to:?}");
    }
    let rank = to.len();
    let mut from_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        from_strides[d] = if from[d] == 1 { 0 } else { acc };
        acc *= from[d];
    }
    let total = numel(to);
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        out.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += from_strides[d];
            if idx[d] < to[d] {
                break;
            }
            offset -= from_strides[d] * to[d];
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests;
