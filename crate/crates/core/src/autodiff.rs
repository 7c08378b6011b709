//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive application in execution order, so
//! node ids are already a topological order. [`Graph::backward`] walks the
//! record once in reverse and writes parameter gradients into the
//! [`ParamStore`] the leaves were taken from.

use crate::error::{invalid, shape_err, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    Param(usize),
    Constant,
}

#[derive(Debug)]
enum Op {
    Leaf(LeafKind),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Affine { x: Var, scale: f64 },
    Relu(Var),
    Exp(Var),
    Powf(Var, f64),
    LayerNorm { x: Var, gain: Var, bias: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    LogSoftmax(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    MeanAxis { x: Var, axis: usize },
    Pick { x: Var, index: Vec<usize> },
    SegmentMean { x: Var, segment: Vec<usize>, counts: Vec<usize> },
    Dot { x: Var, weights: Vec<f64> },
    Sum(Var),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Mul(..) => "mul",
            Op::MulConst(..) => "mul_const",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::Powf(..) => "powf",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Pick { .. } => "pick",
            Op::SegmentMean { .. } => "segment_mean",
            Op::Dot { .. } => "dot",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// The computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn op_kind(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf(LeafKind::Constant))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).value.clone();
        self.push(value, Op::Leaf(LeafKind::Param(id.0)))
    }

    /// Looks a parameter up by name; missing names are an error.
    pub fn param_named(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        match store.id(name) {
            Some(id) => Ok(self.param(store, id)),
            None => invalid(format!("unknown parameter `{name}`")),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul: cannot multiply {sa:?} by {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    /// Batched product `[n,m,k]·[n,k,p]`, or `[n,m,k]·[n,p,k]^T` when
    /// `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return shape_err(format!(
                "batch_matmul: cannot multiply {sa:?} by {sb:?} (transpose_b = {transpose_b})"
            ));
        }
        let (n, m, k) = (sa[0], sa[1], sa[2]);
        let p = if transpose_b { sb[1] } else { sb[2] };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * m * p);
        for i in 0..n {
            let ai = &av[i * m * k..(i + 1) * m * k];
            let bi = &bv[i * k * p..(i + 1) * k * p];
            if transpose_b {
                out.extend(matmul_nt(ai, bi, m, k, p));
            } else {
                out.extend(matmul_raw(ai, bi, m, k, p));
            }
        }
        Ok(self.push(
            Tensor::new(vec![n, m, p], out)?,
            Op::BatchMatMul { a, b, transpose_b },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "add: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds a `[d]` bias to every row of a `[..., d]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return shape_err(format!(
                "add_bias: bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            ));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(d) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "mul: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise product with a constant tensor (e.g. a dropout mask).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return shape_err(format!(
                "mul_const: shapes {:?} and {:?} differ",
                self.shape(x),
                c.shape()
            ));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .collect();
        let out = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(out, Op::MulConst(x, c)))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push(out, Op::Exp(x))
    }

    /// Elementwise `x^p` for non-negative `x`.
    pub fn powf(&mut self, x: Var, p: f64) -> Var {
        let out = self.value(x).map(|v| v.powf(p));
        self.push(out, Op::Powf(x, p))
    }

    /// Normalises each row over the last axis with population variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return invalid(format!("layer_norm: eps must be positive, got {eps}"));
        }
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err(format!(
                "layer_norm: gain {:?} / bias {:?} do not match last axis of {:?}",
                self.shape(gain),
                self.shape(bias),
                self.shape(x)
            ));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / d;
        let mut normed = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let n = (v - mean) * is;
                normed.push(n);
                out.push(n * gv[j] + bv[j]);
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm { x, gain, bias, normed, inv_std },
        ))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.value(x));
        self.push(out, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let d = t.last_dim();
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::LogSoftmax(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshaped(shape).map_err(|_| {
            crate::error::Error::Shape(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape(x)
            ))
        })?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return shape_err(format!("permute: {axes:?} is not a permutation of the axes of {shape:?}"));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let data = permute_data(self.value(x).data(), &shape, axes);
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::Permute(x, axes.to_vec())))
    }

    /// Mean over one axis, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape.len() < 2 {
            return shape_err(format!("mean_axis: axis {axis} invalid for {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for s in 0..len {
                let src = &xv[(o * len + s) * inner..(o * len + s + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let inv = 1.0 / len as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(out, Op::MeanAxis { x, axis }))
    }

    /// Selects `x[i, index[i]]` from a `[b, c]` tensor.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != index.len() {
            return shape_err(format!(
                "pick: {} indices for tensor {shape:?}",
                index.len()
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= shape[1]) {
            return invalid(format!("pick: index {bad} out of range for {} columns", shape[1]));
        }
        let xv = self.value(x).data();
        let data = index.iter().enumerate().map(|(r, &c)| xv[r * shape[1] + c]).collect();
        let out = Tensor::new(vec![index.len()], data)?;
        Ok(self.push(out, Op::Pick { x, index: index.to_vec() }))
    }

    /// Per-segment means of a `[b]` vector; empty segments yield 0.
    pub fn segment_mean(&mut self, x: Var, segment: &[usize], num_segments: usize) -> Result<Var> {
        if num_segments == 0 {
            return invalid("segment_mean: need at least one segment");
        }
        if self.shape(x) != [segment.len()] {
            return shape_err(format!(
                "segment_mean: {} segment ids for tensor {:?}",
                segment.len(),
                self.shape(x)
            ));
        }
        if let Some(&bad) = segment.iter().find(|&&s| s >= num_segments) {
            return invalid(format!("segment_mean: id {bad} out of range for {num_segments} segments"));
        }
        let xv = self.value(x).data();
        let mut sums = vec![0.0; num_segments];
        let mut counts = vec![0usize; num_segments];
        for (&s, &v) in segment.iter().zip(xv) {
            sums[s] += v;
            counts[s] += 1;
        }
        let data = sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
            .collect();
        let out = Tensor::new(vec![num_segments], data)?;
        Ok(self.push(
            out,
            Op::SegmentMean { x, segment: segment.to_vec(), counts },
        ))
    }

    /// Inner product of a vector node with constant weights.
    pub fn dot_const(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if self.value(x).len() != weights.len() {
            return shape_err(format!(
                "dot_const: {} weights for tensor {:?}",
                weights.len(),
                self.shape(x)
            ));
        }
        let v = self
            .value(x)
            .data()
            .iter()
            .zip(weights)
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(v), Op::Dot { x, weights: weights.to_vec() }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = self.value(x).sum();
        self.push(Tensor::scalar(v), Op::Sum(x))
    }

    /// Mean of all entries, as a one-segment [`Graph::segment_mean`].
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n]).expect("same element count");
        self.segment_mean(flat, &vec![0; n], 1)
            .expect("a single segment always matches")
    }

    /// Reverse pass from a scalar root. Gradients are accumulated into
    /// the parameters of `store` that appear as leaves.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<()> {
        self.backward_full(root, store).map(|_| ())
    }

    /// Like [`Graph::backward`] but also returns the gradient with respect
    /// to every node (`None` where none flowed).
    pub fn backward_full(&self, root: Var, store: &mut ParamStore) -> Result<Vec<Option<Tensor>>> {
        if self.value(root).len() != 1 {
            return shape_err(format!(
                "backward: root must be scalar, got shape {:?}",
                self.shape(root)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root)));
        let mut out: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, store);
            out[i] = Some(g);
        }
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], store: &mut ParamStore) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf(LeafKind::Param(id)) => store.accumulate_grad(*id, g),
            Op::Leaf(LeafKind::Constant) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga = matmul_nt(gd, bv, m, n, k);
                let gb = matmul_tn(av, gd, m, k, n);
                acc(*a, Tensor::new(sa.to_vec(), ga).unwrap());
                acc(*b, Tensor::new(sb.to_vec(), gb).unwrap());
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, m, k) = (sa[0], sa[1], sa[2]);
                let p = if *transpose_b { sb[1] } else { sb[2] };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let mut ga = Vec::with_capacity(av.len());
                let mut gb = Vec::with_capacity(bv.len());
                for bi in 0..n {
                    let ai = &av[bi * m * k..(bi + 1) * m * k];
                    let bmat = &bv[bi * k * p..(bi + 1) * k * p];
                    let gi = &gd[bi * m * p..(bi + 1) * m * p];
                    if *transpose_b {
                        // out = A·Bᵀ, B: [p,k]
                        ga.extend(matmul_raw(gi, bmat, m, p, k));
                        gb.extend(matmul_tn(gi, ai, m, p, k));
                    } else {
                        // out = A·B, B: [k,p]
                        ga.extend(matmul_nt(gi, bmat, m, p, k));
                        gb.extend(matmul_tn(ai, gi, m, k, p));
                    }
                }
                acc(*a, Tensor::new(sa.to_vec(), ga).unwrap());
                acc(*b, Tensor::new(sb.to_vec(), gb).unwrap());
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddBias(x, bias) => {
                let d = self.value(*bias).len();
                let mut gb = vec![0.0; d];
                for row in gd.chunks(d) {
                    for (acc_b, v) in gb.iter_mut().zip(row) {
                        *acc_b += v;
                    }
                }
                acc(*x, g.clone());
                acc(*bias, Tensor::new(vec![d], gb).unwrap());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                let gb = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                acc(*a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                acc(*b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
            }
            Op::MulConst(x, c) => {
                let gx = gd.iter().zip(c.data()).map(|(g, m)| g * m).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), gx).unwrap());
            }
            Op::Affine { x, scale } => acc(*x, g.map(|v| v * scale)),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), gx).unwrap());
            }
            Op::Exp(x) => {
                let ov = node.value.data();
                let gx = gd.iter().zip(ov).map(|(g, o)| g * o).collect();
                acc(*x, Tensor::new(g.shape().to_vec(), gx).unwrap());
            }
            Op::Powf(x, p) => {
                let xv = self.value(*x).data();
                let gx = gd
                    .iter()
                    .zip(xv)
                    .map(|(g, &v)| {
                        let d = p * v.powf(p - 1.0);
                        if d.is_finite() { g * d } else { 0.0 }
                    })
                    .collect();
                acc(*x, Tensor::new(g.shape().to_vec(), gx).unwrap());
            }
            Op::LayerNorm { x, gain, bias, normed, inv_std } => {
                let d = self.value(*gain).len();
                let gain_v = self.value(*gain).data();
                let mut gg = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let mut gx = Vec::with_capacity(gd.len());
                for (r, (grow, nrow)) in gd.chunks(d).zip(normed.chunks(d)).enumerate() {
                    // dL/dn = g * gain
                    let mut dn_sum = 0.0;
                    let mut dn_n_sum = 0.0;
                    for j in 0..d {
                        gg[j] += grow[j] * nrow[j];
                        gbias[j] += grow[j];
                        let dn = grow[j] * gain_v[j];
                        dn_sum += dn;
                        dn_n_sum += dn * nrow[j];
                    }
                    let is = inv_std[r];
                    let inv_d = 1.0 / d as f64;
                    for j in 0..d {
                        let dn = grow[j] * gain_v[j];
                        gx.push(is * (dn - inv_d * dn_sum - nrow[j] * inv_d * dn_n_sum));
                    }
                }
                acc(*x, Tensor::new(g.shape().to_vec(), gx).unwrap());
                acc(*gain, Tensor::new(vec![d], gg).unwrap());
                acc(*bias, Tensor::new(vec![d], gbias).unwrap());
            }
            Op::Softmax(x) => {
                let d = node.value.last_dim();
                let mut gx = Vec::with_capacity(gd.len());
                for (grow, prow) in gd.chunks(d).zip(node.value.data().chunks(d)) {
                    let dot: f64 = grow.iter().zip(prow).map(|(a, b)| a * b).sum();
                    gx.extend(grow.iter().zip(prow).map(|(g, p)| p * (g - dot)));
                }
                acc(*x, Tensor::new(g.shape().to_vec(), gx).unwrap());
            }
            Op::LogSoftmax(x) => {
                let d = node.value.last_dim();
                let mut gx = Vec::with_capacity(gd.len());
                for (grow, lrow) in gd.chunks(d).zip(node.value.data().chunks(d)) {
                    let total: f64 = grow.iter().sum();
                    gx.extend(grow.iter().zip(lrow).map(|(g, l)| g - l.exp() * total));
                }
                acc(*x, Tensor::new(g.shape().to_vec(), gx).unwrap());
            }
            Op::Reshape(x) => {
                acc(*x, g.reshaped(self.shape(*x)).unwrap());
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let data = permute_data(gd, g.shape(), &inverse);
                acc(*x, Tensor::new(self.shape(*x).to_vec(), data).unwrap());
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x);
                let (outer, len, inner) = split_axis(shape, *axis);
                let inv = 1.0 / len as f64;
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let grow = &gd[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        gx.extend(grow.iter().map(|v| v * inv));
                    }
                }
                acc(*x, Tensor::new(shape.to_vec(), gx).unwrap());
            }
            Op::Pick { x, index } => {
                let shape = self.shape(*x);
                let mut gx = Tensor::zeros(shape);
                let c = shape[1];
                for (r, &col) in index.iter().enumerate() {
                    gx.data_mut()[r * c + col] += gd[r];
                }
                acc(*x, gx);
            }
            Op::SegmentMean { x, segment, counts } => {
                let gx = segment
                    .iter()
                    .map(|&s| gd[s] / counts[s] as f64)
                    .collect::<Vec<_>>();
                acc(*x, Tensor::new(self.shape(*x).to_vec(), gx).unwrap());
            }
            Op::Dot { x, weights } => {
                let gx = weights.iter().map(|w| w * gd[0]).collect();
                acc(*x, Tensor::new(self.shape(*x).to_vec(), gx).unwrap());
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x), gd[0])),
        }
    }
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let d = t.last_dim();
    let mut data = Vec::with_capacity(t.len());
    for row in t.data().chunks(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = data.len();
        data.extend(row.iter().map(|v| (v - max).exp()));
        let z: f64 = data[start..].iter().sum();
        data[start..].iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    out
}
