use std::collections::HashMap;
use std::ops::Range;
use std::rc::Rc;

use rand::Rng;

use super::kernels::{self, gemm, MatRef};
use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One query block attending over one key block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

/// How the rows of packed query/key matrices are grouped into independent
/// attention problems (typically one per sentence).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub segments: Vec<AttentionSegment>,
    /// Query `i` of a segment may only see keys `0..=i`.
    pub causal: bool,
}

impl AttentionLayout {
    /// Offsets of each segment's weight block inside the flat weight buffer.
    fn weight_offsets(&self) -> (Vec<usize>, usize) {
        let mut offsets = Vec::with_capacity(self.segments.len());
        let mut total = 0;
        for s in &self.segments {
            offsets.push(total);
            total += self.heads * s.q_len * s.k_len;
        }
        (offsets, total)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    GatherRows { table: Var, idx: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    SegmentMean { x: Var, segments: Vec<Range<usize>> },
    Attention { q: Var, k: Var, v: Var, layout: Rc<AttentionLayout>, weights: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, smoothing: f64, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    /// Empty for parameters, whose values live in the store.
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients, in first-use order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(id, n)| self.nodes[n].as_deref().map(|g| (id, g)))
    }

    /// Folds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in self.params() {
            store.get_mut(id).accumulate_grad(g)?;
        }
        Ok(())
    }
}

/// A dynamic tape. Operations are recorded as they execute and replayed in
/// reverse by [`Graph::backward`].
pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: Option<&'p ParamStore>,
    param_nodes: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => {
            let c = *shape.last().unwrap();
            (shape.iter().product::<usize>() / c, c)
        }
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_nodes: HashMap::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            nodes: Vec::new(),
            store: Some(store),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self
                .store
                .expect("parameter node without a store")
                .get(id)
                .data(),
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        rows_cols(self.shape(v))
    }

    /// Copies a node's current value into a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("graph shapes are valid")
    }

    /// Records an input tensor. Gradients flow to it iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, rg)
    }

    /// Records a constant with no gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(t))
    }

    /// References a stored parameter. Repeated lookups share one node, which
    /// keeps tied weights on a single gradient accumulator.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), Vec::new(), Op::Param(id), t.requires_grad());
        self.param_nodes.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn matmul_general(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if self.shape(a).len() != 2 || self.shape(b).len() != 2 || k1 != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?}{} and {:?}{}",
                self.shape(a),
                if ta { "^T" } else { "" },
                self.shape(b),
                if tb { "^T" } else { "" }
            )));
        }
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            let am = if ta { MatRef::t(av, ar, ac) } else { MatRef::new(av, ar, ac) };
            let bm = if tb { MatRef::t(bv, br, bc) } else { MatRef::new(bv, br, bc) };
            gemm(am, bm, &mut out, false);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// `a · b` for 2-D operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, false)
    }

    /// `a · bᵀ` for 2-D operands.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_general(a, b, false, true)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(a);
        if self.value(row).len() != c {
            return Err(Error::Dimension(format!(
                "add_row: row of shape {:?} against matrix {:?}",
                self.shape(row),
                self.shape(a)
            )));
        }
        let mut out = self.value(a).to_vec();
        let bv = self.value(row);
        for i in 0..r {
            out[i * c..(i + 1) * c].iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x);
        let mut out = vec![0.0; src.len()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for j in 0..len {
                    buf[j] = src[base + j * inner];
                }
                kernels::softmax_in_place(&mut buf);
                for j in 0..len {
                    out[base + j * inner] = buf[j];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// Per-row normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-6;
        let (r, c) = self.dims(x);
        if c < 2 || self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::Dimension(format!(
                "layer_norm over {:?} with gain {:?} and bias {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + EPS).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            rg,
        ))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`. Identity
    /// when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Parameter(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, rg))
    }

    /// Selects rows of a 2-D table (embedding lookup when `table` is an
    /// embedding matrix).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("row index {bad} out of range for {r} rows")));
        }
        if idx.is_empty() {
            return Err(Error::Dimension("gather_rows with no indices".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![idx.len(), c], out, Op::GatherRows { table, idx: idx.to_vec() }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > c {
            return Err(Error::Dimension(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                self.shape(x)
            )));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.dims(parts[0]).0;
        if parts.iter().any(|&p| self.dims(p).0 != r) {
            return Err(Error::Dimension("concat_cols with differing row counts".into()));
        }
        let total: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.dims(parts[0]).1;
        if parts.iter().any(|&p| self.dims(p).1 != c) {
            return Err(Error::Dimension("concat_rows with differing column counts".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rows = out.len() / c;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Mean of each row range, giving one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segments: &[Range<usize>]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if segments.iter().any(|s| s.is_empty() || s.end > r) {
            return Err(Error::Dimension(format!("segment_mean segments outside {r} rows")));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; segments.len() * c];
        for (si, s) in segments.iter().enumerate() {
            let inv = 1.0 / s.len() as f64;
            for i in s.clone() {
                for j in 0..c {
                    out[si * c + j] += xv[i * c + j] * inv;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![segments.len(), c],
            out,
            Op::SegmentMean { x, segments: segments.to_vec() },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention over packed rows. `q` is
    /// `Nq x d`, `k` and `v` are `Nk x d`; head `h` uses columns
    /// `h*d/H .. (h+1)*d/H`. Output is `Nq x d` with heads concatenated.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Rc<AttentionLayout>) -> Result<Var> {
        let (nq, d) = self.dims(q);
        let (nk, dk) = self.dims(k);
        let (nv, dv) = self.dims(v);
        let heads = layout.heads;
        if dk != d || dv != d || nv != nk || heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!(
                "attention with q {:?}, k {:?}, v {:?}, {heads} heads",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        for s in &layout.segments {
            if s.q_start + s.q_len > nq || s.k_start + s.k_len > nk || s.k_len == 0 {
                return Err(Error::Dimension(format!("attention segment {s:?} outside {nq}x{nk}")));
            }
            if layout.causal && s.q_len > s.k_len {
                return Err(Error::Dimension("causal segment with more queries than keys".into()));
            }
        }
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (offsets, total) = layout.weight_offsets();
        let mut weights = vec![0.0; total];
        let mut out = vec![0.0; nq * d];
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        for (si, s) in layout.segments.iter().enumerate() {
            for h in 0..heads {
                let base = offsets[si] + h * s.q_len * s.k_len;
                for i in 0..s.q_len {
                    let qrow = &qv[(s.q_start + i) * d + h * hd..(s.q_start + i) * d + (h + 1) * hd];
                    let visible = if layout.causal { i + 1 } else { s.k_len };
                    let w = &mut weights[base + i * s.k_len..base + (i + 1) * s.k_len];
                    for j in 0..visible {
                        let krow = &kv[(s.k_start + j) * d + h * hd..(s.k_start + j) * d + (h + 1) * hd];
                        w[j] = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                    }
                    kernels::softmax_in_place(&mut w[..visible]);
                    let orow = &mut out[(s.q_start + i) * d + h * hd..(s.q_start + i) * d + (h + 1) * hd];
                    for j in 0..visible {
                        let vrow = &vv[(s.k_start + j) * d + h * hd..(s.k_start + j) * d + (h + 1) * hd];
                        let wj = w[j];
                        orow.iter_mut().zip(vrow).for_each(|(o, x)| *o += wj * x);
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(vec![nq, d], out, Op::Attention { q, k, v, layout, weights }, rg))
    }

    /// Attention weights recorded by an [`Graph::attention`] node, indexed as
    /// `[segment][head][query][key]`.
    pub fn attention_weights(&self, v: Var) -> Option<Vec<Vec<Vec<Vec<f64>>>>> {
        let Op::Attention { layout, weights, .. } = &self.nodes[v.0].op else {
            return None;
        };
        let (offsets, _) = layout.weight_offsets();
        Some(
            layout
                .segments
                .iter()
                .zip(offsets)
                .map(|(s, off)| {
                    (0..layout.heads)
                        .map(|h| {
                            (0..s.q_len)
                                .map(|i| {
                                    let b = off + (h * s.q_len + i) * s.k_len;
                                    weights[b..b + s.k_len].to_vec()
                                })
                                .collect()
                        })
                        .collect()
                })
                .collect(),
        )
    }

    /// Summed token-level cross-entropy of `logits` (`N x V`) against
    /// `targets`, with optional label smoothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
        let (n, vsize) = self.dims(logits);
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= vsize) {
            return Err(Error::Contract(format!("target id {t} outside vocabulary of {vsize}")));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * vsize];
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let lp = kernels::log_softmax_row(&lv[i * vsize..(i + 1) * vsize]);
            loss -= (1.0 - smoothing) * lp[t];
            if smoothing > 0.0 {
                loss -= smoothing / vsize as f64 * lp.iter().sum::<f64>();
            }
            for (p, l) in probs[i * vsize..(i + 1) * vsize].iter_mut().zip(&lp) {
                *p = l.exp();
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec(), smoothing, probs },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut params: Vec<(ParamId, usize)> = self.param_nodes.iter().map(|(&id, v)| (id, v.0)).collect();
        params.sort_unstable();
        Ok(Gradients { nodes: grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.value(v).len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.dims(a);
                let (br, bc) = self.dims(b);
                let (m, _) = rows_cols(&node.shape);
                let n = node.shape[1];
                let gm = MatRef::new(g, m, n);
                let (av, bv) = (self.value(a), self.value(b));
                // C = op(A) op(B); dop(A) = G op(B)^T, dop(B) = op(A)^T G.
                acc(a, &mut |ga| {
                    if ta {
                        // dA = op(B) G^T, A stored ar x ac = k x m
                        let bm = if tb { MatRef::t(bv, br, bc) } else { MatRef::new(bv, br, bc) };
                        gemm(bm, MatRef::t(g, m, n), ga, true);
                    } else {
                        let bt = if tb { MatRef::new(bv, br, bc) } else { MatRef::t(bv, br, bc) };
                        gemm(gm, bt, ga, true);
                    }
                });
                acc(b, &mut |gb| {
                    if tb {
                        // dB = G^T op(A), B stored n x k
                        let am = if ta { MatRef::t(av, ar, ac) } else { MatRef::new(av, ar, ac) };
                        gemm(MatRef::t(g, m, n), am, gb, true);
                    } else {
                        let at = if ta { MatRef::new(av, ar, ac) } else { MatRef::t(av, ar, ac) };
                        gemm(at, gm, gb, true);
                    }
                });
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            &Op::AddRow(a, row) => {
                acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(row, &mut |gr| {
                    let c = gr.len();
                    for chunk in g.chunks(c) {
                        gr.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            &Op::Scale(a, s) => acc(a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            &Op::Relu(a) => {
                let av = self.value(a);
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            &Op::Tanh(a) => {
                let y = &node.value;
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            &Op::Sigmoid(a) => {
                let y = &node.value;
                acc(a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let p = base + j * inner;
                                gx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (r, c) = rows_cols(&node.shape);
                let gv = self.value(*gain);
                acc(*x, &mut |gx| {
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let xh = &xhat[i * c..(i + 1) * c];
                        let dxh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let m1 = dxh.iter().sum::<f64>() / c as f64;
                        let m2 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gx[i * c + j] += rstd[i] * (dxh[j] - m1 - xh[j] * m2);
                        }
                    }
                });
                acc(*gain, &mut |gg| {
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for chunk in g.chunks(c) {
                        gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::Dropout { x, mask } => acc(*x, &mut |gx| {
                for i in 0..gx.len() {
                    gx[i] += g[i] * mask[i];
                }
            }),
            Op::GatherRows { table, idx } => {
                let c = node.shape[1];
                acc(*table, &mut |gt| {
                    for (r, &i) in idx.iter().enumerate() {
                        gt[i * c..(i + 1) * c]
                            .iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(x, y)| *x += y);
                    }
                });
            }
            &Op::SliceCols { x, start } => {
                let (r, len) = (node.shape[0], node.shape[1]);
                let c = self.dims(x).1;
                acc(x, &mut |gx| {
                    for i in 0..r {
                        gx[i * c + start..i * c + start + len]
                            .iter_mut()
                            .zip(&g[i * len..(i + 1) * len])
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (node.shape[0], node.shape[1]);
                let mut off = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    acc(p, &mut |gp| {
                        for i in 0..r {
                            gp[i * c..(i + 1) * c]
                                .iter_mut()
                                .zip(&g[i * total + off..i * total + off + c])
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &mut |gp| gp.iter_mut().zip(&g[off..off + n]).for_each(|(a, b)| *a += b));
                    off += n;
                }
            }
            &Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|v| *v += g[0])),
            Op::SegmentMean { x, segments } => {
                let c = node.shape[1];
                acc(*x, &mut |gx| {
                    for (si, s) in segments.iter().enumerate() {
                        let inv = 1.0 / s.len() as f64;
                        for i in s.clone() {
                            for j in 0..c {
                                gx[i * c + j] += g[si * c + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::Attention { q, k, v, layout, weights } => {
                self.attention_backward(*q, *k, *v, layout, weights, g, grads);
            }
            Op::CrossEntropy { logits, targets, smoothing, probs } => {
                let vsize = self.dims(*logits).1;
                let uniform = smoothing / vsize as f64;
                acc(*logits, &mut |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &mut gl[i * vsize..(i + 1) * vsize];
                        let p = &probs[i * vsize..(i + 1) * vsize];
                        for j in 0..vsize {
                            row[j] += g[0] * (p[j] - uniform);
                        }
                        row[t] -= g[0] * (1.0 - smoothing);
                    }
                });
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        weights: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (_, d) = self.dims(q);
        let heads = layout.heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![0.0; qv.len()];
        let mut gk = vec![0.0; kv.len()];
        let mut gv = vec![0.0; vv.len()];
        let (offsets, _) = layout.weight_offsets();
        for (si, s) in layout.segments.iter().enumerate() {
            for h in 0..heads {
                let cols = h * hd..(h + 1) * hd;
                let base = offsets[si] + h * s.q_len * s.k_len;
                let mut dscore = vec![0.0; s.k_len];
                for i in 0..s.q_len {
                    let qi = (s.q_start + i) * d;
                    let go = &g[qi + cols.start..qi + cols.end];
                    let w = &weights[base + i * s.k_len..base + (i + 1) * s.k_len];
                    let visible = if layout.causal { i + 1 } else { s.k_len };
                    // dA_ij = go . v_j ; dV_j += A_ij go
                    for j in 0..visible {
                        let kj = (s.k_start + j) * d;
                        let vrow = &vv[kj + cols.start..kj + cols.end];
                        dscore[j] = go.iter().zip(vrow).map(|(a, b)| a * b).sum();
                        let wj = w[j];
                        gv[kj + cols.start..kj + cols.end]
                            .iter_mut()
                            .zip(go)
                            .for_each(|(x, y)| *x += wj * y);
                    }
                    let dot: f64 = (0..visible).map(|j| dscore[j] * w[j]).sum();
                    for j in 0..visible {
                        let ds = w[j] * (dscore[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = (s.k_start + j) * d;
                        for c in cols.clone() {
                            gq[qi + c] += ds * kv[kj + c];
                            gk[kj + c] += ds * qv[qi + c];
                        }
                    }
                }
            }
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if !self.nodes[var.0].requires_grad {
                continue;
            }
            match &mut grads[var.0] {
                Some(slot) => slot.iter_mut().zip(&buf).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(buf),
            }
        }
    }
}
