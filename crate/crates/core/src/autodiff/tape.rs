//! Wengert tape: records primitive tensor operations during the forward pass
//! and replays them in reverse to accumulate gradients.
//!
//! Matrices are row-major `[rows, cols]`; sequence encodings keep one feature
//! column per position, so a length-`L` encoding of width `d` is `[d, L]`.

use rand::Rng;

use super::tensor::Param;
use crate::error::{Error, Result};

/// Handle to a value on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

enum Op {
    Leaf { src: Option<Param> },
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Div { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddConst { a: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    Exp { a: usize },
    Log { a: usize },
    SoftmaxMasked { a: usize, mask: Vec<bool> },
    LogSumExp { a: usize },
    MaxPoolTime { a: usize, argmax: Vec<usize> },
    ConcatRows { parts: Vec<usize> },
    StackCols { parts: Vec<usize> },
    SliceCols { a: usize, lo: usize },
    Slice { a: usize, lo: usize },
    Reshape { a: usize },
    Gather { a: usize, idxs: Vec<usize> },
    Embed { table: usize, ids: Vec<usize> },
    BroadcastCol { a: usize },
    SumAll { a: usize },
    Dropout { a: usize, mask: Vec<f64> },
}

/// Ordered record of primitive operations. Construction order is topological,
/// so one reverse sweep visits every node exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    bound: Vec<(usize, usize)>, // (param ptr id, node idx) for leaf dedupe
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        let n = data.len();
        self.nodes.push(Node { data, shape, op });
        self.grads.push(vec![0.0; n]);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Bind a parameter as a leaf. Binding the same parameter twice on one
    /// tape returns the same node, so its gradient accumulates in one place.
    pub fn param(&mut self, p: &Param) -> Var {
        let key = p.ptr_id();
        if let Some(&(_, idx)) = self.bound.iter().find(|(k, _)| *k == key) {
            return Var(idx);
        }
        let t = p.borrow();
        let v = self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            Op::Leaf {
                src: Some(p.clone()),
            },
        );
        drop(t);
        self.bound.push((key, v.0));
        v
    }

    /// A constant input: takes part in the forward, receives no gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::dim(
                "constant",
                format!("data length {} != shape {:?}", data.len(), shape),
            ));
        }
        Ok(self.push(data, shape, Op::Leaf { src: None }))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![v], vec![1], Op::Leaf { src: None })
    }

    pub fn vector(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(data, vec![n], Op::Leaf { src: None })
    }

    // ── Linear algebra ───────────────────────────────────────────────

    /// Matrix product. `[m,k] x [k,n] -> [m,n]`; a rank-1 right operand is
    /// treated as a column, giving `[m,k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asp, bsp) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if asp.len() != 2 {
            return Err(Error::dim("matmul", format!("left operand rank {} != 2", asp.len())));
        }
        let (m, k) = (asp[0], asp[1]);
        let (kb, n, vec_rhs) = match bsp.len() {
            1 => (bsp[0], 1, true),
            2 => (bsp[0], bsp[1], false),
            r => return Err(Error::dim("matmul", format!("right operand rank {r}"))),
        };
        if k != kb {
            return Err(Error::dim("matmul", format!("inner extents {k} != {kb}")));
        }
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        let shape = if vec_rhs { vec![m] } else { vec![m, n] };
        Ok(self.push(out, shape, Op::Matmul { a: a.0, b: b.0, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sp = self.shape(a).to_vec();
        if sp.len() != 2 {
            return Err(Error::dim("transpose", format!("rank {} != 2", sp.len())));
        }
        let (r, c) = (sp[0], sp[1]);
        let ad = &self.nodes[a.0].data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = ad[i * c + j];
            }
        }
        Ok(self.push(out, vec![c, r], Op::Transpose { a: a.0 }))
    }

    // ── Elementwise ──────────────────────────────────────────────────

    fn binary(&mut self, op: &'static str, a: Var, b: Var) -> Result<(Vec<f64>, Vec<usize>)> {
        let (asp, bsp) = (self.shape(a), self.shape(b));
        if asp != bsp {
            return Err(Error::dim(op, format!("{asp:?} vs {bsp:?}")));
        }
        Ok((Vec::with_capacity(self.nodes[a.0].data.len()), asp.to_vec()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, shape) = self.binary("add", a, b)?;
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        out.extend(ad.iter().zip(bd).map(|(x, y)| x + y));
        Ok(self.push(out, shape, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, shape) = self.binary("sub", a, b)?;
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        out.extend(ad.iter().zip(bd).map(|(x, y)| x - y));
        Ok(self.push(out, shape, Op::Sub { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, shape) = self.binary("mul", a, b)?;
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        out.extend(ad.iter().zip(bd).map(|(x, y)| x * y));
        Ok(self.push(out, shape, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (mut out, shape) = self.binary("div", a, b)?;
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        out.extend(ad.iter().zip(bd).map(|(x, y)| x / y));
        Ok(self.push(out, shape, Op::Div { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::Scale { a: a.0, c })
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::AddConst { a: a.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::Tanh { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::Sigmoid { a: a.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::Exp { a: a.0 })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.nodes[a.0].data.iter().find(|x| **x <= 0.0) {
            return Err(Error::Domain(format!("log of nonpositive value {bad}")));
        }
        let out: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(out, shape, Op::Log { a: a.0 }))
    }

    // ── Normalization and reductions ─────────────────────────────────

    /// Softmax over the unmasked positions of a vector. Masked positions are
    /// exactly zero in the output; the rest use max-subtraction so huge
    /// scores stay finite.
    pub fn softmax_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let sp = self.shape(a);
        if sp.len() != 1 {
            return Err(Error::dim("softmax_masked", format!("rank {} != 1", sp.len())));
        }
        if mask.len() != sp[0] {
            return Err(Error::dim(
                "softmax_masked",
                format!("mask length {} != {}", mask.len(), sp[0]),
            ));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptySupport);
        }
        let xs = &self.nodes[a.0].data;
        let max = xs
            .iter()
            .zip(mask)
            .filter(|(_, m)| **m)
            .map(|(x, _)| *x)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out = vec![0.0; xs.len()];
        let mut z = 0.0;
        for (i, (x, m)) in xs.iter().zip(mask).enumerate() {
            if *m {
                out[i] = (x - max).exp();
                z += out[i];
            }
        }
        for o in out.iter_mut() {
            *o /= z;
        }
        Ok(self.push(
            out,
            vec![xs.len()],
            Op::SoftmaxMasked { a: a.0, mask: mask.to_vec() },
        ))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.shape(a)[0];
        self.softmax_masked(a, &vec![true; n])
    }

    /// `log(sum(exp(x)))` of a vector, max-stabilized, as a scalar.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let sp = self.shape(a);
        if sp.len() != 1 {
            return Err(Error::dim("logsumexp", format!("rank {} != 1", sp.len())));
        }
        if sp[0] == 0 {
            return Err(Error::EmptySequence);
        }
        let xs = &self.nodes[a.0].data;
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = xs.iter().map(|x| (x - max).exp()).sum();
        let lse = max + z.ln();
        Ok(self.push(vec![lse], vec![1], Op::LogSumExp { a: a.0 }))
    }

    /// Per-row maximum of a `[d, L]` matrix. Backward routes each row's
    /// gradient to the first position attaining the maximum.
    pub fn max_pool_time(&mut self, a: Var) -> Result<Var> {
        let sp = self.shape(a).to_vec();
        if sp.len() != 2 {
            return Err(Error::dim("max_pool_time", format!("rank {} != 2", sp.len())));
        }
        let (d, l) = (sp[0], sp[1]);
        if l == 0 {
            return Err(Error::EmptySequence);
        }
        let ad = &self.nodes[a.0].data;
        let mut out = vec![0.0; d];
        let mut argmax = vec![0usize; d];
        for i in 0..d {
            let row = &ad[i * l..(i + 1) * l];
            let (mut best, mut bj) = (row[0], 0);
            for (j, &x) in row.iter().enumerate().skip(1) {
                if x > best {
                    best = x;
                    bj = j;
                }
            }
            out[i] = best;
            argmax[i] = bj;
        }
        Ok(self.push(out, vec![d], Op::MaxPoolTime { a: a.0, argmax }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        self.push(vec![s], vec![1], Op::SumAll { a: a.0 })
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].data.len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum_all(p))
    }

    // ── Shape plumbing ───────────────────────────────────────────────

    /// Stack along axis 0. Rank-1 parts concatenate lengthwise; rank-2 parts
    /// must agree on column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows", "no parts".to_string()));
        }
        let rank = self.shape(parts[0]).len();
        let mut out = Vec::new();
        let shape = match rank {
            1 => {
                for p in parts {
                    if self.shape(*p).len() != 1 {
                        return Err(Error::dim("concat_rows", "mixed ranks".to_string()));
                    }
                    out.extend_from_slice(&self.nodes[p.0].data);
                }
                vec![out.len()]
            }
            2 => {
                let cols = self.shape(parts[0])[1];
                let mut rows = 0;
                for p in parts {
                    let sp = self.shape(*p);
                    if sp.len() != 2 || sp[1] != cols {
                        return Err(Error::dim(
                            "concat_rows",
                            format!("part shape {sp:?}, want [_, {cols}]"),
                        ));
                    }
                    rows += sp[0];
                    out.extend_from_slice(&self.nodes[p.0].data);
                }
                vec![rows, cols]
            }
            r => return Err(Error::dim("concat_rows", format!("rank {r}"))),
        };
        Ok(self.push(
            out,
            shape,
            Op::ConcatRows {
                parts: parts.iter().map(|v| v.0).collect(),
            },
        ))
    }

    /// Assemble equal-length vectors into a `[d, n]` matrix, one per column.
    pub fn stack_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("stack_cols", "no parts".to_string()));
        }
        let d = match self.shape(parts[0]) {
            [d] => *d,
            sp => return Err(Error::dim("stack_cols", format!("part shape {sp:?}"))),
        };
        let n = parts.len();
        let mut out = vec![0.0; d * n];
        for (j, p) in parts.iter().enumerate() {
            let sp = self.shape(*p);
            if sp != [d] {
                return Err(Error::dim("stack_cols", format!("part shape {sp:?}, want [{d}]")));
            }
            for i in 0..d {
                out[i * n + j] = self.nodes[p.0].data[i];
            }
        }
        Ok(self.push(
            out,
            vec![d, n],
            Op::StackCols {
                parts: parts.iter().map(|v| v.0).collect(),
            },
        ))
    }

    /// Columns `lo..hi` of a `[d, L]` matrix.
    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let sp = self.shape(a).to_vec();
        if sp.len() != 2 {
            return Err(Error::dim("slice_cols", format!("rank {} != 2", sp.len())));
        }
        let (d, l) = (sp[0], sp[1]);
        if lo >= hi || hi > l {
            return Err(Error::Bounds(format!("columns {lo}..{hi} of [{d}, {l}]")));
        }
        let w = hi - lo;
        let ad = &self.nodes[a.0].data;
        let mut out = vec![0.0; d * w];
        for i in 0..d {
            out[i * w..(i + 1) * w].copy_from_slice(&ad[i * l + lo..i * l + hi]);
        }
        Ok(self.push(out, vec![d, w], Op::SliceCols { a: a.0, lo }))
    }

    /// One column of a `[d, L]` matrix as a `[d]` vector.
    pub fn col(&mut self, a: Var, j: usize) -> Result<Var> {
        let d = self.shape(a)[0];
        let s = self.slice_cols(a, j, j + 1)?;
        self.reshape(s, vec![d])
    }

    /// Elements `lo..hi` of a vector.
    pub fn slice(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let sp = self.shape(a);
        if sp.len() != 1 {
            return Err(Error::dim("slice", format!("rank {} != 1", sp.len())));
        }
        if lo >= hi || hi > sp[0] {
            return Err(Error::Bounds(format!("elements {lo}..{hi} of [{}]", sp[0])));
        }
        let out = self.nodes[a.0].data[lo..hi].to_vec();
        let n = out.len();
        Ok(self.push(out, vec![n], Op::Slice { a: a.0, lo }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.nodes[a.0].shape),
            ));
        }
        let out = self.nodes[a.0].data.clone();
        Ok(self.push(out, shape, Op::Reshape { a: a.0 }))
    }

    /// Pick arbitrary (possibly repeated) elements of a vector.
    pub fn gather(&mut self, a: Var, idxs: &[usize]) -> Result<Var> {
        let sp = self.shape(a);
        if sp.len() != 1 {
            return Err(Error::dim("gather", format!("rank {} != 1", sp.len())));
        }
        let n = sp[0];
        if let Some(bad) = idxs.iter().find(|i| **i >= n) {
            return Err(Error::Bounds(format!("gather index {bad} of [{n}]")));
        }
        let out: Vec<f64> = idxs.iter().map(|&i| self.nodes[a.0].data[i]).collect();
        let m = out.len();
        Ok(self.push(out, vec![m], Op::Gather { a: a.0, idxs: idxs.to_vec() }))
    }

    /// Look up embedding rows of a `[V, d]` table, one column per id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let sp = self.shape(table).to_vec();
        if sp.len() != 2 {
            return Err(Error::dim("embed", format!("table rank {} != 2", sp.len())));
        }
        let (v, d) = (sp[0], sp[1]);
        if let Some(bad) = ids.iter().find(|i| **i >= v) {
            return Err(Error::Bounds(format!("token id {bad} of vocab {v}")));
        }
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        let l = ids.len();
        let td = &self.nodes[table.0].data;
        let mut out = vec![0.0; d * l];
        for (t, &id) in ids.iter().enumerate() {
            for i in 0..d {
                out[i * l + t] = td[id * d + i];
            }
        }
        Ok(self.push(out, vec![d, l], Op::Embed { table: table.0, ids: ids.to_vec() }))
    }

    /// Repeat a `[d]` vector as every column of a `[d, l]` matrix.
    pub fn broadcast_col(&mut self, a: Var, l: usize) -> Result<Var> {
        let sp = self.shape(a);
        if sp.len() != 1 {
            return Err(Error::dim("broadcast_col", format!("rank {} != 1", sp.len())));
        }
        if l == 0 {
            return Err(Error::EmptySequence);
        }
        let d = sp[0];
        let ad = &self.nodes[a.0].data;
        let mut out = vec![0.0; d * l];
        for i in 0..d {
            for t in 0..l {
                out[i * l + t] = ad[i];
            }
        }
        Ok(self.push(out, vec![d, l], Op::BroadcastCol { a: a.0 }))
    }

    // ── Regularization ───────────────────────────────────────────────

    /// Inverted dropout: in training each element is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1-rate)`; in eval it is the
    /// identity (the input handle is returned unchanged).
    pub fn dropout(&mut self, a: Var, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidParam(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(out, shape, Op::Dropout { a: a.0, mask }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Node gradients are rebuilt from
    /// scratch on every call; parameter grad buffers accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss shape {:?} is not scalar", self.nodes[loss.0].shape),
            ));
        }
        for g in self.grads.iter_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        self.grads[loss.0][0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut self.grads[i]);
            self.propagate(i, &g);
            self.grads[i] = g;
        }

        for node in &self.nodes {
            if let Op::Leaf { src: Some(p) } = &node.op {
                if p.borrow().requires_grad() {
                    let idx = self
                        .bound
                        .iter()
                        .find(|(k, _)| *k == p.ptr_id())
                        .map(|(_, i)| *i)
                        .expect("bound param");
                    p.borrow_mut().accumulate_grad(&self.grads[idx]);
                }
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        match &self.nodes[i].op {
            Op::Leaf { .. } => {}
            Op::Matmul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                {
                    // dA += g . B^T
                    let bd = std::mem::take(&mut self.nodes[b].data);
                    let ga = &mut self.grads[a];
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[r * n + j] * bd[p * n + j];
                            }
                            ga[r * k + p] += s;
                        }
                    }
                    self.nodes[b].data = bd;
                }
                {
                    // dB += A^T . g
                    let ad = std::mem::take(&mut self.nodes[a].data);
                    let gb = &mut self.grads[b];
                    for r in 0..m {
                        for p in 0..k {
                            let arp = ad[r * k + p];
                            if arp == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += arp * g[r * n + j];
                            }
                        }
                    }
                    self.nodes[a].data = ad;
                }
            }
            Op::Transpose { a } => {
                let a = *a;
                let (r, c) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let ga = &mut self.grads[a];
                for x in 0..r {
                    for y in 0..c {
                        ga[x * c + y] += g[y * r + x];
                    }
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                for (ga, gi) in self.grads[a].iter_mut().zip(g) {
                    *ga += gi;
                }
                for (gb, gi) in self.grads[b].iter_mut().zip(g) {
                    *gb += gi;
                }
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                for (ga, gi) in self.grads[a].iter_mut().zip(g) {
                    *ga += gi;
                }
                for (gb, gi) in self.grads[b].iter_mut().zip(g) {
                    *gb -= gi;
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let bd = std::mem::take(&mut self.nodes[b].data);
                for ((ga, gi), bv) in self.grads[a].iter_mut().zip(g).zip(&bd) {
                    *ga += gi * bv;
                }
                self.nodes[b].data = bd;
                let ad = std::mem::take(&mut self.nodes[a].data);
                for ((gb, gi), av) in self.grads[b].iter_mut().zip(g).zip(&ad) {
                    *gb += gi * av;
                }
                self.nodes[a].data = ad;
            }
            Op::Div { a, b } => {
                let (a, b) = (*a, *b);
                let bd = std::mem::take(&mut self.nodes[b].data);
                let ad = std::mem::take(&mut self.nodes[a].data);
                for i2 in 0..g.len() {
                    self.grads[a][i2] += g[i2] / bd[i2];
                    self.grads[b][i2] -= g[i2] * ad[i2] / (bd[i2] * bd[i2]);
                }
                self.nodes[a].data = ad;
                self.nodes[b].data = bd;
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                for (ga, gi) in self.grads[a].iter_mut().zip(g) {
                    *ga += gi * c;
                }
            }
            Op::AddConst { a } => {
                let a = *a;
                for (ga, gi) in self.grads[a].iter_mut().zip(g) {
                    *ga += gi;
                }
            }
            Op::Tanh { a } => {
                let a = *a;
                let y = &self.nodes[i].data;
                for ((ga, gi), yi) in self.grads[a].iter_mut().zip(g).zip(y) {
                    *ga += gi * (1.0 - yi * yi);
                }
            }
            Op::Sigmoid { a } => {
                let a = *a;
                let y = &self.nodes[i].data;
                for ((ga, gi), yi) in self.grads[a].iter_mut().zip(g).zip(y) {
                    *ga += gi * yi * (1.0 - yi);
                }
            }
            Op::Exp { a } => {
                let a = *a;
                let y = &self.nodes[i].data;
                for ((ga, gi), yi) in self.grads[a].iter_mut().zip(g).zip(y) {
                    *ga += gi * yi;
                }
            }
            Op::Log { a } => {
                let a = *a;
                let x = std::mem::take(&mut self.nodes[a].data);
                for ((ga, gi), xi) in self.grads[a].iter_mut().zip(g).zip(&x) {
                    *ga += gi / xi;
                }
                self.nodes[a].data = x;
            }
            Op::SoftmaxMasked { a, mask } => {
                let a = *a;
                let y = &self.nodes[i].data;
                let dot: f64 = y
                    .iter()
                    .zip(g)
                    .zip(mask)
                    .filter(|(_, m)| **m)
                    .map(|((yi, gi), _)| yi * gi)
                    .sum();
                let mask = mask.clone();
                for (j, ((yi, gi), m)) in y.clone().iter().zip(g).zip(&mask).enumerate() {
                    if *m {
                        self.grads[a][j] += yi * (gi - dot);
                    }
                }
            }
            Op::LogSumExp { a } => {
                let a = *a;
                let lse = self.nodes[i].data[0];
                let x = std::mem::take(&mut self.nodes[a].data);
                for (ga, xi) in self.grads[a].iter_mut().zip(&x) {
                    *ga += g[0] * (xi - lse).exp();
                }
                self.nodes[a].data = x;
            }
            Op::MaxPoolTime { a, argmax } => {
                let a = *a;
                let l = self.nodes[a].shape[1];
                let argmax = argmax.clone();
                for (r, &j) in argmax.iter().enumerate() {
                    self.grads[a][r * l + j] += g[r];
                }
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p].data.len();
                    for (gp, gi) in self.grads[p].iter_mut().zip(&g[off..off + n]) {
                        *gp += gi;
                    }
                    off += n;
                }
            }
            Op::StackCols { parts } => {
                let parts = parts.clone();
                let n = parts.len();
                let d = self.nodes[i].shape[0];
                for (j, p) in parts.iter().enumerate() {
                    for r in 0..d {
                        self.grads[*p][r] += g[r * n + j];
                    }
                }
            }
            Op::SliceCols { a, lo } => {
                let (a, lo) = (*a, *lo);
                let l = self.nodes[a].shape[1];
                let (d, w) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                for r in 0..d {
                    for j in 0..w {
                        self.grads[a][r * l + lo + j] += g[r * w + j];
                    }
                }
            }
            Op::Slice { a, lo } => {
                let (a, lo) = (*a, *lo);
                for (j, gi) in g.iter().enumerate() {
                    self.grads[a][lo + j] += gi;
                }
            }
            Op::Reshape { a } => {
                let a = *a;
                for (ga, gi) in self.grads[a].iter_mut().zip(g) {
                    *ga += gi;
                }
            }
            Op::Gather { a, idxs } => {
                let a = *a;
                let idxs = idxs.clone();
                for (j, &src) in idxs.iter().enumerate() {
                    self.grads[a][src] += g[j];
                }
            }
            Op::Embed { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.nodes[table].shape[1];
                let l = ids.len();
                for (t, &id) in ids.iter().enumerate() {
                    for r in 0..d {
                        self.grads[table][id * d + r] += g[r * l + t];
                    }
                }
            }
            Op::BroadcastCol { a } => {
                let a = *a;
                let d = self.nodes[a].shape[0];
                let l = self.nodes[i].shape[1];
                for r in 0..d {
                    let mut s = 0.0;
                    for t in 0..l {
                        s += g[r * l + t];
                    }
                    self.grads[a][r] += s;
                }
            }
            Op::SumAll { a } => {
                let a = *a;
                for ga in self.grads[a].iter_mut() {
                    *ga += g[0];
                }
            }
            Op::Dropout { a, mask } => {
                let a = *a;
                let mask = mask.clone();
                for ((ga, gi), m) in self.grads[a].iter_mut().zip(g).zip(&mask) {
                    *ga += gi * m;
                }
            }
        }
    }
}
