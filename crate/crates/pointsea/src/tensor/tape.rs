use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{axpy, mm_nn, mm_nt_add, mm_tn_add};
use super::{Agg, Array, SegmentOrder, TensorError};

/// Records one executed primitive: input ids, output id, saved state needed
/// for the reverse sweep.  Replaying a record is pure, so repeated backward
/// passes produce bitwise-identical contributions.
enum Record {
    Add { a: usize, b: usize, out: usize },
    Sub { a: usize, b: usize, out: usize },
    Mul { a: usize, b: usize, out: usize },
    AddScalar { a: usize, out: usize },
    MulScalar { a: usize, c: f64, out: usize },
    Relu { a: usize, out: usize },
    Matmul { a: usize, b: usize, out: usize, m: usize, k: usize, n: usize },
    BiasAdd { a: usize, b: usize, out: usize, rows: usize, cols: usize },
    Softmax { a: usize, out: usize },
    L2Norm { a: usize, out: usize },
    RowNormBcast { a: usize, out: usize, rows: usize, cols: usize },
    SegMeanRows { a: usize, out: usize, order: Rc<SegmentOrder>, cols: usize },
    SegReduce { a: usize, out: usize, order: Rc<SegmentOrder>, agg: Agg, cols: usize, arg: Vec<u32> },
    Reduce { a: usize, out: usize, agg: Agg, outer: usize, len: usize, inner: usize, arg: Vec<u32> },
    SumAll { a: usize, out: usize },
    Concat { parts: Vec<usize>, out: usize, outer: usize, lens: Vec<usize>, inner: usize },
    Reshape { a: usize, out: usize },
    GatherRows { a: usize, out: usize, idx: Rc<Vec<u32>>, cols: usize },
    WeightedSum { w: usize, xs: Vec<usize>, out: usize },
    SumN { xs: Vec<usize>, out: usize },
    CrossEntropy { logits: usize, out: usize, labels: Vec<u32>, probs: Vec<f64>, cols: usize },
}

impl Record {
    fn out_id(&self) -> usize {
        match self {
            Record::Add { out, .. }
            | Record::Sub { out, .. }
            | Record::Mul { out, .. }
            | Record::AddScalar { out, .. }
            | Record::MulScalar { out, .. }
            | Record::Relu { out, .. }
            | Record::Matmul { out, .. }
            | Record::BiasAdd { out, .. }
            | Record::Softmax { out, .. }
            | Record::L2Norm { out, .. }
            | Record::RowNormBcast { out, .. }
            | Record::SegMeanRows { out, .. }
            | Record::SegReduce { out, .. }
            | Record::Reduce { out, .. }
            | Record::SumAll { out, .. }
            | Record::Concat { out, .. }
            | Record::Reshape { out, .. }
            | Record::GatherRows { out, .. }
            | Record::WeightedSum { out, .. }
            | Record::SumN { out, .. }
            | Record::CrossEntropy { out, .. } => *out,
        }
    }
}

struct Inner {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    records: Vec<Record>,
}

/// Gradient tape.  Create tensors with [`Tape::input`] / [`Tape::param`],
/// build the computation through [`Tensor`] methods, then call
/// [`Tensor::backward`] on a scalar.  Leaf gradients accumulate across
/// backward calls until [`Tape::zero_grad`].
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                shapes: Vec::new(),
                values: Vec::new(),
                grads: Vec::new(),
                requires: Vec::new(),
                records: Vec::new(),
            }),
        }
    }

    /// Leaf that never receives a gradient.
    pub fn input(&self, a: &Array) -> Tensor<'_> {
        self.leaf(a.shape().to_vec(), a.data().to_vec(), false)
    }

    /// Leaf that accumulates a gradient during backward.
    pub fn param(&self, a: &Array) -> Tensor<'_> {
        self.leaf(a.shape().to_vec(), a.data().to_vec(), true)
    }

    /// All-zero constant leaf.
    pub fn zeros(&self, shape: &[usize]) -> Tensor<'_> {
        let numel = shape.iter().product();
        self.leaf(shape.to_vec(), vec![0.0; numel], false)
    }

    fn leaf(&self, shape: Vec<usize>, data: Vec<f64>, requires: bool) -> Tensor<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.push_node(shape, data, requires);
        Tensor { tape: self, id }
    }

    /// Clears every gradient buffer; values and records stay.
    pub fn zero_grad(&self) {
        for g in self.inner.borrow_mut().grads.iter_mut() {
            *g = None;
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().shapes.len()
    }

    pub fn num_records(&self) -> usize {
        self.inner.borrow().records.len()
    }

    /// Concatenate along `axis`.  All parts must agree on the other axes.
    pub fn concat<'t>(&'t self, parts: &[Tensor<'t>], axis: usize) -> Result<Tensor<'t>, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::BadShape {
                op: "concat",
                shape: vec![],
                why: "needs at least one part",
            });
        }
        let mut inner = self.inner.borrow_mut();
        let first = parts[0].id;
        let rank = inner.shapes[first].len();
        if axis >= rank {
            return Err(TensorError::Axis { op: "concat", axis, rank });
        }
        for p in parts {
            let s = &inner.shapes[p.id];
            if s.len() != rank
                || s[..axis] != inner.shapes[first][..axis]
                || s[axis + 1..] != inner.shapes[first][axis + 1..]
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: inner.shapes[first].clone(),
                    rhs: s.clone(),
                });
            }
        }
        let outer: usize = inner.shapes[first][..axis].iter().product();
        let inner_len: usize = inner.shapes[first][axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| inner.shapes[p.id][axis]).collect();
        let total: usize = lens.iter().sum();
        let mut shape = inner.shapes[first].clone();
        shape[axis] = total;
        let mut data = vec![0.0; outer * total * inner_len];
        for o in 0..outer {
            let mut off = 0;
            for (p, &len) in parts.iter().zip(&lens) {
                let src = &inner.values[p.id][o * len * inner_len..(o + 1) * len * inner_len];
                let dst_start = (o * total + off) * inner_len;
                data[dst_start..dst_start + len * inner_len].copy_from_slice(src);
                off += len;
            }
        }
        let req = parts.iter().any(|p| inner.requires[p.id]);
        let out = inner.push_node(shape, data, req);
        inner.records.push(Record::Concat {
            parts: parts.iter().map(|p| p.id).collect(),
            out,
            outer,
            lens,
            inner: inner_len,
        });
        Ok(Tensor { tape: self, id: out })
    }

    /// out = Σ weights[i] · xs[i].  `weights` is a rank-1 tensor of length
    /// `xs.len()`; all xs share one shape.
    pub fn weighted_sum<'t>(&'t self, weights: Tensor<'t>, xs: &[Tensor<'t>]) -> Result<Tensor<'t>, TensorError> {
        let mut inner = self.inner.borrow_mut();
        let wshape = inner.shapes[weights.id].clone();
        if wshape.len() != 1 || wshape[0] != xs.len() || xs.is_empty() {
            return Err(TensorError::BadShape {
                op: "weighted_sum",
                shape: wshape,
                why: "weights must be rank 1 with one entry per operand",
            });
        }
        let shape = inner.shapes[xs[0].id].clone();
        for x in xs {
            if inner.shapes[x.id] != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: shape.clone(),
                    rhs: inner.shapes[x.id].clone(),
                });
            }
        }
        let mut data = vec![0.0; inner.values[xs[0].id].len()];
        for (i, x) in xs.iter().enumerate() {
            let w = inner.values[weights.id][i];
            axpy(&mut data, w, &inner.values[x.id]);
        }
        let req = inner.requires[weights.id] || xs.iter().any(|x| inner.requires[x.id]);
        let out = inner.push_node(shape, data, req);
        inner.records.push(Record::WeightedSum {
            w: weights.id,
            xs: xs.iter().map(|x| x.id).collect(),
            out,
        });
        Ok(Tensor { tape: self, id: out })
    }

    /// out = Σ xs[i], all same shape.
    pub fn sum_n<'t>(&'t self, xs: &[Tensor<'t>]) -> Result<Tensor<'t>, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::BadShape {
                op: "sum_n",
                shape: vec![],
                why: "needs at least one operand",
            });
        }
        let mut inner = self.inner.borrow_mut();
        let shape = inner.shapes[xs[0].id].clone();
        for x in xs {
            if inner.shapes[x.id] != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "sum_n",
                    lhs: shape.clone(),
                    rhs: inner.shapes[x.id].clone(),
                });
            }
        }
        let mut data = inner.values[xs[0].id].clone();
        for x in &xs[1..] {
            for (d, &v) in data.iter_mut().zip(&inner.values[x.id]) {
                *d += v;
            }
        }
        let req = xs.iter().any(|x| inner.requires[x.id]);
        let out = inner.push_node(shape, data, req);
        inner.records.push(Record::SumN {
            xs: xs.iter().map(|x| x.id).collect(),
            out,
        });
        Ok(Tensor { tape: self, id: out })
    }
}

impl Inner {
    fn push_node(&mut self, shape: Vec<usize>, data: Vec<f64>, requires: bool) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = self.shapes.len();
        self.shapes.push(shape);
        self.values.push(data);
        self.grads.push(None);
        self.requires.push(requires);
        id
    }

    /// Record outputs are transient per sweep; only leaves accumulate.
    fn clear_intermediate_grads(&mut self) {
        let Inner { grads, records, .. } = self;
        for rec in records.iter() {
            grads[rec.out_id()] = None;
        }
    }

    fn backprop(&mut self) {
        let Inner {
            values,
            grads,
            requires,
            records,
            ..
        } = self;
        for rec in records.iter().rev() {
            step(rec, values, grads, requires);
        }
    }
}

/// Gradient buffer for `id`, allocated on first touch.
fn buf<'a>(grads: &'a mut [Option<Vec<f64>>], values: &[Vec<f64>], id: usize) -> &'a mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; values[id].len()])
}

fn step(rec: &Record, values: &[Vec<f64>], grads: &mut [Option<Vec<f64>>], requires: &[bool]) {
    let out = rec.out_id();
    if !requires[out] {
        return;
    }
    // Temporarily taking the output gradient lets inputs (possibly aliased
    // with the output) accumulate safely; it is merged back afterwards.
    let Some(g) = grads[out].take() else {
        return;
    };

    match rec {
        Record::Add { a, b, .. } => {
            if requires[*a] {
                axpy(buf(grads, values, *a), 1.0, &g);
            }
            if requires[*b] {
                axpy(buf(grads, values, *b), 1.0, &g);
            }
        }
        Record::Sub { a, b, .. } => {
            if requires[*a] {
                axpy(buf(grads, values, *a), 1.0, &g);
            }
            if requires[*b] {
                axpy(buf(grads, values, *b), -1.0, &g);
            }
        }
        Record::Mul { a, b, .. } => {
            if requires[*a] {
                let bv = &values[*b];
                let da = buf(grads, values, *a);
                for i in 0..g.len() {
                    da[i] += g[i] * bv[i];
                }
            }
            if requires[*b] {
                let av = &values[*a];
                let db = buf(grads, values, *b);
                for i in 0..g.len() {
                    db[i] += g[i] * av[i];
                }
            }
        }
        Record::AddScalar { a, .. } => {
            if requires[*a] {
                axpy(buf(grads, values, *a), 1.0, &g);
            }
        }
        Record::MulScalar { a, c, .. } => {
            if requires[*a] {
                axpy(buf(grads, values, *a), *c, &g);
            }
        }
        Record::Relu { a, .. } => {
            if requires[*a] {
                let av = &values[*a];
                let da = buf(grads, values, *a);
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        da[i] += g[i];
                    }
                }
            }
        }
        Record::Matmul { a, b, m, k, n, .. } => {
            if requires[*a] {
                let (da, bv) = (buf(grads, values, *a), &values[*b]);
                mm_nt_add(&g, bv, da, *m, *k, *n);
            }
            if requires[*b] {
                let (db, av) = (buf(grads, values, *b), &values[*a]);
                mm_tn_add(av, &g, db, *m, *k, *n);
            }
        }
        Record::BiasAdd { a, b, rows, cols, .. } => {
            if requires[*a] {
                axpy(buf(grads, values, *a), 1.0, &g);
            }
            if requires[*b] {
                let db = buf(grads, values, *b);
                for r in 0..*rows {
                    for c in 0..*cols {
                        db[c] += g[r * cols + c];
                    }
                }
            }
        }
        Record::Softmax { a, out, .. } => {
            if requires[*a] {
                let y = &values[*out];
                let dot: f64 = g.iter().zip(y).map(|(gv, yv)| gv * yv).sum();
                let da = buf(grads, values, *a);
                for i in 0..g.len() {
                    da[i] += y[i] * (g[i] - dot);
                }
            }
        }
        Record::L2Norm { a, out } => {
            if requires[*a] {
                let norm = values[*out][0];
                // Gradient at the origin is defined as zero.
                if norm > 0.0 {
                    let av = &values[*a];
                    let da = buf(grads, values, *a);
                    for i in 0..da.len() {
                        da[i] += g[0] * av[i] / norm;
                    }
                }
            }
        }
        Record::RowNormBcast { a, out, rows, cols } => {
            if requires[*a] {
                let mut factors = vec![0.0; *rows];
                for r in 0..*rows {
                    let mut s = 0.0;
                    for c in 0..*cols {
                        s += g[r * cols + c];
                    }
                    factors[r] = s;
                }
                let norms: Vec<f64> = (0..*rows).map(|r| values[*out][r * cols]).collect();
                let av = &values[*a];
                let da = buf(grads, values, *a);
                for r in 0..*rows {
                    if norms[r] > 0.0 {
                        let f = factors[r] / norms[r];
                        for c in 0..*cols {
                            da[r * cols + c] += f * av[r * cols + c];
                        }
                    }
                }
            }
        }
        Record::SegMeanRows { a, order, cols, .. } => {
            if requires[*a] {
                let k = order.k as f64;
                let mut gacc = vec![0.0; *cols];
                let da = buf(grads, values, *a);
                for s in 0..order.seg {
                    gacc.fill(0.0);
                    let block = &order.rows[s * order.k..(s + 1) * order.k];
                    for &r in block {
                        let r = r as usize;
                        for c in 0..*cols {
                            gacc[c] += g[r * cols + c];
                        }
                    }
                    for &r in block {
                        let r = r as usize;
                        for c in 0..*cols {
                            da[r * cols + c] += gacc[c] / k;
                        }
                    }
                }
            }
        }
        Record::SegReduce { a, order, agg, cols, arg, .. } => {
            if requires[*a] {
                let da = buf(grads, values, *a);
                match agg {
                    Agg::Max => {
                        for s in 0..order.seg {
                            for c in 0..*cols {
                                let r = arg[s * cols + c] as usize;
                                da[r * cols + c] += g[s * cols + c];
                            }
                        }
                    }
                    Agg::Sum | Agg::Mean => {
                        let scale = if *agg == Agg::Mean { 1.0 / order.k as f64 } else { 1.0 };
                        for s in 0..order.seg {
                            for &r in &order.rows[s * order.k..(s + 1) * order.k] {
                                let r = r as usize;
                                for c in 0..*cols {
                                    da[r * cols + c] += scale * g[s * cols + c];
                                }
                            }
                        }
                    }
                }
            }
        }
        Record::Reduce { a, agg, outer, len, inner, arg, .. } => {
            if requires[*a] {
                let da = buf(grads, values, *a);
                match agg {
                    Agg::Max => {
                        for o in 0..*outer {
                            for i in 0..*inner {
                                let l = arg[o * inner + i] as usize;
                                da[(o * len + l) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                    Agg::Sum | Agg::Mean => {
                        let scale = if *agg == Agg::Mean { 1.0 / *len as f64 } else { 1.0 };
                        for o in 0..*outer {
                            for l in 0..*len {
                                for i in 0..*inner {
                                    da[(o * len + l) * inner + i] += scale * g[o * inner + i];
                                }
                            }
                        }
                    }
                }
            }
        }
        Record::SumAll { a, .. } => {
            if requires[*a] {
                let da = buf(grads, values, *a);
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Record::Concat { parts, outer, lens, inner, .. } => {
            let total: usize = lens.iter().sum();
            for o in 0..*outer {
                let mut off = 0;
                for (p, &len) in parts.iter().zip(lens) {
                    if requires[*p] {
                        let src = &g[(o * total + off) * inner..(o * total + off + len) * inner];
                        let dst = &mut buf(grads, values, *p)[o * len * inner..(o + 1) * len * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                    off += len;
                }
            }
        }
        Record::Reshape { a, .. } => {
            if requires[*a] {
                axpy(buf(grads, values, *a), 1.0, &g);
            }
        }
        Record::GatherRows { a, idx, cols, .. } => {
            if requires[*a] {
                let da = buf(grads, values, *a);
                for (j, &src) in idx.iter().enumerate() {
                    let src = src as usize;
                    for c in 0..*cols {
                        da[src * cols + c] += g[j * cols + c];
                    }
                }
            }
        }
        Record::WeightedSum { w, xs, .. } => {
            if requires[*w] {
                let mut dws = vec![0.0; xs.len()];
                for (i, x) in xs.iter().enumerate() {
                    let xv = &values[*x];
                    let mut s = 0.0;
                    for (gv, xvv) in g.iter().zip(xv) {
                        s += gv * xvv;
                    }
                    dws[i] = s;
                }
                let dw = buf(grads, values, *w);
                for (d, s) in dw.iter_mut().zip(dws) {
                    *d += s;
                }
            }
            let ws = values[*w].clone();
            for (i, x) in xs.iter().enumerate() {
                if requires[*x] {
                    axpy(buf(grads, values, *x), ws[i], &g);
                }
            }
        }
        Record::SumN { xs, .. } => {
            for x in xs {
                if requires[*x] {
                    axpy(buf(grads, values, *x), 1.0, &g);
                }
            }
        }
        Record::CrossEntropy { logits, labels, probs, cols, .. } => {
            if requires[*logits] {
                let rows = labels.len();
                let scale = g[0] / rows as f64;
                let da = buf(grads, values, *logits);
                for r in 0..rows {
                    for c in 0..*cols {
                        let indicator = if labels[r] as usize == c { 1.0 } else { 0.0 };
                        da[r * cols + c] += scale * (probs[r * cols + c] - indicator);
                    }
                }
            }
        }
    }

    match &mut grads[out] {
        Some(existing) => axpy(existing, 1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

/// Handle to one tape node.  Copy; tied to its tape's lifetime.
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
}

impl<'t> Tensor<'t> {
    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().shapes[self.id].clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.inner.borrow().values[self.id].len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().requires[self.id]
    }

    /// Detached copy of the current value.
    pub fn value(&self) -> Array {
        let inner = self.tape.inner.borrow();
        Array::new(inner.shapes[self.id].clone(), inner.values[self.id].clone())
            .expect("node shape and data always agree")
    }

    /// Accumulated gradient, if any backward pass has reached this node.
    pub fn grad(&self) -> Option<Array> {
        let inner = self.tape.inner.borrow();
        inner.grads[self.id].as_ref().map(|g| {
            Array::new(inner.shapes[self.id].clone(), g.clone())
                .expect("gradient buffer matches node shape")
        })
    }

    /// Reverse sweep from a scalar.  Leaf gradients accumulate across
    /// sweeps until [`Tape::zero_grad`]; intermediate gradients are
    /// recomputed fresh each sweep.
    pub fn backward(&self) -> Result<(), TensorError> {
        let mut inner = self.tape.inner.borrow_mut();
        if inner.values[self.id].len() != 1 {
            return Err(TensorError::NotScalar {
                shape: inner.shapes[self.id].clone(),
            });
        }
        inner.clear_intermediate_grads();
        let id = self.id;
        match &mut inner.grads[id] {
            Some(g) => g[0] += 1.0,
            slot @ None => *slot = Some(vec![1.0]),
        }
        inner.backprop();
        Ok(())
    }

    fn binary(self, rhs: Tensor<'t>, op: &'static str) -> Result<(usize, usize), TensorError> {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape), "tensors from different tapes");
        let inner = self.tape.inner.borrow();
        if inner.shapes[self.id] != inner.shapes[rhs.id] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: inner.shapes[self.id].clone(),
                rhs: inner.shapes[rhs.id].clone(),
            });
        }
        Ok((self.id, rhs.id))
    }

    pub fn add(self, rhs: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        let (a, b) = self.binary(rhs, "add")?;
        let mut inner = self.tape.inner.borrow_mut();
        let data: Vec<f64> = inner.values[a].iter().zip(&inner.values[b]).map(|(x, y)| x + y).collect();
        let shape = inner.shapes[a].clone();
        let req = inner.requires[a] || inner.requires[b];
        let out = inner.push_node(shape, data, req);
        inner.records.push(Record::Add { a, b, out });
        Ok(Tensor { tape: self.tape, id: out })
    }

    pub fn sub(self, rhs: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        let (a, b) = self.binary(rhs, "sub")?;
        let mut inner = self.tape.inner.borrow_mut();
        let data: Vec<f64> = inner.values[a].iter().zip(&inner.values[b]).map(|(x, y)| x - y).collect();
        let shape = inner.shapes[a].clone();
        let req = inner.requires[a] || inner.requires[b];
        let out = inner.push_node(shape, data, req);
        inner.records.push(Record::Sub { a, b, out });
        Ok(Tensor { tape: self.tape, id: out })
    }

    pub fn mul(self, rhs: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        let (a, b) = self.binary(rhs, "mul")?;
        let mut inner = self.tape.inner.borrow_mut();
        let data: Vec<f64> = inner.values[a].iter().zip(&inner.values[b]).map(|(x, y)| x * y).collect();
        let shape = inner.shapes[a].clone();
        let req = inner.requires[a] || inner.requires[b];
        let out = inner.push_node(shape, data, req);
        inner.records.push(Record::Mul { a, b, out });
        Ok(Tensor { tape: self.tape, id: out })
    }

    pub fn add_scalar(self, c: f64) -> Tensor<'t> {
        let mut inner = self.tape.inner.borrow_mut();
        let a = self.id;
        let data: Vec<f64> = inner.values[a].iter().map(|x| x + c).collect();
        let shape = inner.shapes[a].clone();
        let req = inner.requires[a];
        let out = inner.push_node(shape, data, req);
        inner.records.push(Record::AddScalar { a, out });
        Tensor { tape: self.tape, id: out }
    }

    pub fn mul_scalar(self, c: f64) -> Tensor<'t> {
        let mut inner = self.tape.inner.borrow_mut();
        let a = self.id;
        let data: Vec<f64> = inner.values[a].iter().map(|x| x * c).collect();
        let shape = inner.shapes[a].clone();
        let req = inner.requires[a];
        let out = inner.push_node(shape, data, req);
        inner.records.push(Record::MulScalar { a, c, out });
        Tensor { tape: self.tape, id: out }
    }

    /// max(x, 0); the subgradient at 0 is 0.
    pub fn relu(self) -> Tensor<'t> {
        let mut inner = self.tape.inner.borrow_mut();
        let a = self.id;
        let data: Vec<f64> = inner.values[a].iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = inner.shapes[a].clone();
        let req = inner.requires[a];
        let out = inner.push_node(shape, data, req);
        inner.records.push(Record::Relu { a, out });
        Tensor { tape: self.tape, id: out }
    }

    /// Rank-2 matrix product.
    pub fn matmul(self, rhs: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape), "tensors from different tapes");
        let mut inner = self.tape.inner.borrow_mut();
        let (a, b) = (self.id, rhs.id);
        let (sa, sb) = (inner.shapes[a].clone(), inner.shapes[b].clone());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        mm_nn(&inner.values[a], &inner.values[b], &mut data, m, k, n);
        let req = inner.requires[a] || inner.requires[b];
        let out = inner.push_node(vec![m, n], data, req);
        inner.records.push(Record::Matmul { a, b, out, m, k, n });
        Ok(Tensor { tape: self.tape, id: out })
    }

    /// Adds a length-`cols` bias vector to every row of a rank-2 tensor.
    pub fn bias_add(self, bias: Tensor<'t>) -> Result<Tensor<'t>, TensorError> {
        let mut inner = self.tape.inner.borrow_mut();
        let (a, b) = (self.id, bias.id);
        let (sa, sb) = (inner.shapes[a].clone(), inner.shapes[b].clone());
        if sa.len() != 2 || sb.len() != 1 || sb[0] != sa[1] {
            return Err(TensorError::ShapeMismatch { op: "bias_add", lhs: sa, rhs: sb });
        }
        let (rows, cols) = (sa[0], sa[1]);
        let mut data = inner.values[a].clone();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += inner.values[b][c];
            }
        }
        let req = inner.requires[a] || inner.requires[b];
        let out = inner.push_node(sa, data, req);
        inner.records.push(Record::BiasAdd { a, b, out, rows, cols });
        Ok(Tensor { tape: self.tape, id: out })
    }

    /// Numerically stable softmax of a rank-1 tensor.
    pub fn softmax(self) -> Result<Tensor<'t>, TensorError> {
        let mut inner = self.tape.inner.borrow_mut();
        let a = self.id;
        let shape = inner.shapes[a].clone();
        if shape.len() != 1 || shape[0] == 0 {
            return Err(TensorError::BadShape {
                op: "softmax",
                shape,
                why: "expects a non-empty rank-1 tensor",
            });
        }
        let v = &inner.values[a];
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let data: Vec<f64> = exps.iter().map(|e| e / total).collect();
        let req = inner.requires[a];
        let out = inner.push_node(shape, data, req);
        inner.records.push(Record::Softmax { a, out });
        Ok(Tensor { tape: self.tape, id: out })
    }

    /// Euclidean norm of a rank-1 tensor; scalar output.
    /// The gradient at the origin is defined as 0.
    pub fn l2norm(self) -> Result<Tensor<'t>, TensorError> {
        let mut inner = self.tape.inner.borrow_mut();
        let a = self.id;
        let shape = inner.shapes[a].clone();
        if shape.len() != 1 {
            return Err(TensorError::BadShape {
                op: "l2norm",
                shape,
                why: "expects a rank-1 tensor",
            });
        }
        let norm = inner.values[a].iter().map(|x| x * x).sum::<f64>().sqrt();
        let req = inner.requires[a];
        let out = inner.push_node(vec![], vec![norm], req);
        inner.records.push(Record::L2Norm { a, out });
        Ok(Tensor { tape: self.tape, id: out })
    }

    /// Per-row Euclidean norm of a rank-2 tensor, broadcast back across the
    /// row: out[r, c] = ‖row r‖ for every c.
    pub fn row_norm_bcast(self) -> Result<Tensor<'t>, TensorError> {
        let mut inner = self.tape.inner.borrow_mut();
        let a = self.id;
        let shape = inner.shapes[a].clone();
        if shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "row_norm_bcast",
                shape,
                why: "expects a rank-2 tensor",
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &inner.values[a][r * cols..(r + 1) * cols];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            data[r * cols..(r + 1) * cols].fill(norm);
        }
        let req = inner.requires[a];
        let out = inner.push_node(shape, data, req);
        inner.records.push(Record::RowNormBcast { a, out, rows, cols });
        Ok(Tensor { tape: self.tape, id: out })
    }

    /// Per-segment mean of rows, broadcast back to every row of the segment.
    /// Accumulation follows `order`, so results are invariant to within-
    /// segment row permutations of the caller's data layout.
    pub fn seg_mean_rows(self, order: &Rc<SegmentOrder>) -> Result<Tensor<'t>, TensorError> {
        let mut inner = self.tape.inner.borrow_mut();
        let a = self.id;
        let shape = inner.shapes[a].clone();
        if shape.len() != 2 || shape[0] != order.seg * order.k {
            return Err(TensorError::BadShape {
                op: "seg_mean_rows",
                shape,
                why: "rows must equal segments × segment length",
            });
        }
        let cols = shape[1];
        let k = order.k as f64;
        let mut data = vec![0.0; shape[0] * cols];
        let mut acc = vec![0.0; cols];
        for s in 0..order.seg {
            acc.fill(0.0);
            let block = &order.rows[s * order.k..(s + 1) * order.k];
            for &r in block {
                let r = r as usize;
                for c in 0..cols {
                    acc[c] += inner.values[a][r * cols + c];
                }
            }
            for &r in block {
                let r = r as usize;
                for c in 0..cols {
                    data[r * cols + c] = acc[c] / k;
                }
            }
        }
        let req = inner.requires[a];
        let out = inner.push_node(shape, data, req);
        inner.records.push(Record::SegMeanRows {
            a,
            out,
            order: Rc::clone(order),
            cols,
        });
        Ok(Tensor { tape: self.tape, id: out })
    }

    /// Reduces each segment of rows to one output row.  Max ties go to the
    /// earliest row in `order`; sums accumulate in `order`.
    pub fn seg_reduce(self, order: &Rc<SegmentOrder>, agg: Agg) -> Result<Tensor<'t>, TensorError> {
        let mut inner = self.tape.inner.borrow_mut();
        let a = self.id;
        let shape = inner.shapes[a].clone();
        if shape.len() != 2 || shape[0] != order.seg * order.k {
            return Err(TensorError::BadShape {
                op: "seg_reduce",
                shape,
                why: "rows must equal segments × segment length",
            });
        }
        let cols = shape[1];
        let mut data = vec![0.0; order.seg * cols];
        let mut arg = Vec::new();
        match agg {
            Agg::Max => {
                arg = vec![0u32; order.seg * cols];
                for s in 0..order.seg {
                    let block = &order.rows[s * order.k..(s + 1) * order.k];
                    for c in 0..cols {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_row = block[0];
                        for &r in block {
                            let v = inner.values[a][r as usize * cols + c];
                            if v > best {
                                best = v;
                                best_row = r;
                            }
                        }
                        data[s * cols + c] = best;
                        arg[s * cols + c] = best_row;
                    }
                }
            }
            Agg::Sum | Agg::Mean => {
                let scale = if agg == Agg::Mean { 1.0 / order.k as f64 } else { 1.0 };
                for s in 0..order.seg {
                    for &r in &order.rows[s * order.k..(s + 1) * order.k] {
                        let r = r as usize;
                        for c in 0..cols {
                            data[s * cols + c] += inner.values[a][r * cols + c];
                        }
                    }
                    for c in 0..cols {
                        data[s * cols + c] *= scale;
                    }
                }
            }
        }
        let req = inner.requires[a];
        let out = inner.push_node(vec![order.seg, cols], data, req);
        inner.records.push(Record::SegReduce {
            a,
            out,
            order: Rc::clone(order),
            agg,
            cols,
            arg,
        });
        Ok(Tensor { tape: self.tape, id: out })
    }

    /// Reduction along one axis; the axis disappears from the shape.
    /// Max ties route the gradient to the lowest index.
    pub fn reduce(self, agg: Agg, axis: usize) -> Result<Tensor<'t>, TensorError> {
        let mut inner = self.tape.inner.borrow_mut();
        let a = self.id;
        let shape = inner.shapes[a].clone();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "reduce",
                axis,
                rank: shape.len(),
            });
        }
        if shape[axis] == 0 {
            return Err(TensorError::BadShape {
                op: "reduce",
                shape,
                why: "cannot reduce an empty axis",
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner_len: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let mut data = vec![0.0; outer * inner_len];
        let mut arg = Vec::new();
        match agg {
            Agg::Max => {
                arg = vec![0u32; outer * inner_len];
                for o in 0..outer {
                    for i in 0..inner_len {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_l = 0u32;
                        for l in 0..len {
                            let v = inner.values[a][(o * len + l) * inner_len + i];
                            if v > best {
                                best = v;
                                best_l = l as u32;
                            }
                        }
                        data[o * inner_len + i] = best;
                        arg[o * inner_len + i] = best_l;
                    }
                }
            }
            Agg::Sum | Agg::Mean => {
                let scale = if agg == Agg::Mean { 1.0 / len as f64 } else { 1.0 };
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner_len {
                            data[o * inner_len + i] += inner.values[a][(o * len + l) * inner_len + i];
                        }
                    }
                    for i in 0..inner_len {
                        data[o * inner_len + i] *= scale;
                    }
                }
            }
        }
        let req = inner.requires[a];
        let out = inner.push_node(out_shape, data, req);
        inner.records.push(Record::Reduce {
            a,
            out,
            agg,
            outer,
            len,
            inner: inner_len,
            arg,
        });
        Ok(Tensor { tape: self.tape, id: out })
    }

    /// Sum of every element; scalar output.
    pub fn sum_all(self) -> Tensor<'t> {
        let mut inner = self.tape.inner.borrow_mut();
        let a = self.id;
        let total: f64 = inner.values[a].iter().sum();
        let req = inner.requires[a];
        let out = inner.push_node(vec![], vec![total], req);
        inner.records.push(Record::SumAll { a, out });
        Tensor { tape: self.tape, id: out }
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(self, shape: &[usize]) -> Result<Tensor<'t>, TensorError> {
        let mut inner = self.tape.inner.borrow_mut();
        let a = self.id;
        let numel: usize = shape.iter().product();
        if numel != inner.values[a].len() {
            return Err(TensorError::Length {
                op: "reshape",
                shape: shape.to_vec(),
                len: inner.values[a].len(),
            });
        }
        let data = inner.values[a].clone();
        let req = inner.requires[a];
        let out = inner.push_node(shape.to_vec(), data, req);
        inner.records.push(Record::Reshape { a, out });
        Ok(Tensor { tape: self.tape, id: out })
    }

    /// Selects rows of a rank-2 tensor; indices may repeat.  The backward
    /// pass scatter-adds in ascending output-row order.
    pub fn gather_rows(self, idx: &Rc<Vec<u32>>) -> Result<Tensor<'t>, TensorError> {
        let mut inner = self.tape.inner.borrow_mut();
        let a = self.id;
        let shape = inner.shapes[a].clone();
        if shape.len() != 2 {
            return Err(TensorError::BadShape {
                op: "gather_rows",
                shape,
                why: "expects a rank-2 tensor",
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        for &r in idx.iter() {
            if r as usize >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r as usize,
                    bound: rows,
                });
            }
        }
        let mut data = vec![0.0; idx.len() * cols];
        for (j, &src) in idx.iter().enumerate() {
            let src = src as usize;
            data[j * cols..(j + 1) * cols]
                .copy_from_slice(&inner.values[a][src * cols..(src + 1) * cols]);
        }
        let req = inner.requires[a];
        let out = inner.push_node(vec![idx.len(), cols], data, req);
        inner.records.push(Record::GatherRows {
            a,
            out,
            idx: Rc::clone(idx),
            cols,
        });
        Ok(Tensor { tape: self.tape, id: out })
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of a
    /// rank-2 logits tensor; scalar output.
    pub fn cross_entropy(self, labels: &[u32]) -> Result<Tensor<'t>, TensorError> {
        let mut inner = self.tape.inner.borrow_mut();
        let a = self.id;
        let shape = inner.shapes[a].clone();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(TensorError::BadShape {
                op: "cross_entropy",
                shape,
                why: "expects a non-empty rank-2 logits tensor",
            });
        }
        let (rows, cols) = (shape[0], shape[1]);
        if labels.len() != rows {
            return Err(TensorError::Length {
                op: "cross_entropy",
                shape: vec![rows],
                len: labels.len(),
            });
        }
        for &l in labels {
            if l as usize >= cols {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: l as usize,
                    bound: cols,
                });
            }
        }
        let mut probs = vec![0.0; rows * cols];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &inner.values[a][r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                probs[r * cols + c] = e;
                total += e;
            }
            for c in 0..cols {
                probs[r * cols + c] /= total;
            }
            let lse = max + total.ln();
            loss += lse - row[labels[r] as usize];
        }
        loss /= rows as f64;
        let req = inner.requires[a];
        let out = inner.push_node(vec![], vec![loss], req);
        inner.records.push(Record::CrossEntropy {
            logits: a,
            out,
            labels: labels.to_vec(),
            probs,
            cols,
        });
        Ok(Tensor { tape: self.tape, id: out })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> Array {
        Array::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let tape = Tape::new();
        let a = tape.input(&arr(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.input(&arr(
            &[3, 4],
            &[1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 3.0, 1.0, 1.0, 1.0, 1.0],
        ));
        let c = a.matmul(b).unwrap();
        assert_eq!(c.shape(), vec![2, 4]);
        assert_eq!(
            c.value().data(),
            &[4.0, 5.0, 5.0, 9.0, 10.0, 11.0, 14.0, 21.0]
        );
    }

    #[test]
    fn softmax_of_log_weights_gives_exact_ratios() {
        let tape = Tape::new();
        let x = tape.input(&arr(&[3], &[0.0, 2f64.ln(), 4f64.ln()]));
        let y = x.softmax().unwrap().value();
        let want = [1.0 / 7.0, 2.0 / 7.0, 4.0 / 7.0];
        for (got, want) in y.data().iter().zip(want) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
        let total: f64 = y.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn max_reduce_ties_route_gradient_to_lowest_index() {
        let tape = Tape::new();
        let x = tape.param(&arr(&[3, 2], &[1.0, 5.0, 7.0, 5.0, 7.0, 3.0]));
        let m = x.reduce(Agg::Max, 0).unwrap();
        assert_eq!(m.value().data(), &[7.0, 5.0]);
        m.sum_all().backward().unwrap();
        // Column 0 ties rows 1 and 2 at 7; row 1 wins.  Column 1 ties rows
        // 0 and 1 at 5; row 0 wins.
        assert_eq!(
            x.grad().unwrap().data(),
            &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn seg_reduce_max_ties_follow_segment_order() {
        // One segment of 3 rows visited as [2, 0, 1]; rows 0 and 2 tie, so
        // the earlier visit (row 2) takes the gradient.
        let order = Rc::new(SegmentOrder::new(1, 3, vec![2, 0, 1]).unwrap());
        let tape = Tape::new();
        let x = tape.param(&arr(&[3, 1], &[4.0, 1.0, 4.0]));
        let m = x.seg_reduce(&order, Agg::Max).unwrap();
        assert_eq!(m.value().data(), &[4.0]);
        m.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_until_zero_grad() {
        let tape = Tape::new();
        let x = tape.param(&arr(&[2], &[3.0, -1.0]));
        let loss = x.mul(x).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0, -2.0]);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[12.0, -4.0]);
        tape.zero_grad();
        assert!(x.grad().is_none());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn inputs_stay_gradient_free() {
        let tape = Tape::new();
        let x = tape.param(&arr(&[2], &[1.0, 2.0]));
        let c = tape.input(&arr(&[2], &[5.0, 5.0]));
        assert!(x.requires_grad());
        assert!(!c.requires_grad());
        let loss = x.mul(c).unwrap().sum_all();
        assert!(loss.requires_grad());
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[5.0, 5.0]);
        assert!(c.grad().is_none());
    }

    #[test]
    fn zeros_leaf_contributes_nothing() {
        let tape = Tape::new();
        let x = tape.param(&arr(&[2], &[1.0, 2.0]));
        let z = tape.zeros(&[2]);
        assert_eq!(z.value().data(), &[0.0, 0.0]);
        let loss = x.add(z).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn gather_rows_scatter_adds_repeated_indices() {
        let tape = Tape::new();
        let x = tape.param(&arr(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let idx = Rc::new(vec![1u32, 1, 0]);
        let g = x.gather_rows(&idx).unwrap();
        assert_eq!(g.value().data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        g.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_classes() {
        let tape = Tape::new();
        let x = tape.input(&arr(&[2, 4], &[0.5; 8]));
        let loss = x.cross_entropy(&[0, 3]).unwrap();
        assert!((loss.value().data()[0] - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn relu_and_norm_gradients_vanish_at_kinks() {
        let tape = Tape::new();
        let x = tape.param(&arr(&[3], &[0.0, -2.0, 3.0]));
        x.relu().sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0, 1.0]);

        let tape = Tape::new();
        let v = tape.param(&arr(&[3], &[0.0, 0.0, 0.0]));
        v.l2norm().unwrap().backward().unwrap();
        let g = v.grad();
        assert!(g.is_none() || g.unwrap().data().iter().all(|&x| x == 0.0));

        let tape = Tape::new();
        let m = tape.param(&arr(&[2, 2], &[0.0, 0.0, 1.0, 0.0]));
        m.row_norm_bcast().unwrap().sum_all().backward().unwrap();
        assert_eq!(m.grad().unwrap().data(), &[0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn seg_ops_visit_values_in_order_not_storage_layout() {
        // The same logical rows stored in two layouts, with orders that
        // visit identical value sequences: sums must agree bitwise even
        // though f64 addition does not commute exactly.
        let r = [[0.1, 1.7], [-0.3, 2.9], [1e-8, -7.0], [0.25, 0.5]];
        let flat = |perm: &[usize]| -> Vec<f64> {
            perm.iter().flat_map(|&i| r[i].to_vec()).collect()
        };
        let tape = Tape::new();
        // Storage layout r0 r1 r2 r3, visited 0 1 | 2 3.
        let x1 = tape.input(&arr(&[4, 2], &flat(&[0, 1, 2, 3])));
        let o1 = Rc::new(SegmentOrder::new(2, 2, vec![0, 1, 2, 3]).unwrap());
        // Storage layout r1 r0 r3 r2, visited so values still arrive as
        // r0 r1 | r2 r3.
        let x2 = tape.input(&arr(&[4, 2], &flat(&[1, 0, 3, 2])));
        let o2 = Rc::new(SegmentOrder::new(2, 2, vec![1, 0, 3, 2]).unwrap());
        for agg in [Agg::Sum, Agg::Mean, Agg::Max] {
            let a = x1.seg_reduce(&o1, agg).unwrap().value();
            let b = x2.seg_reduce(&o2, agg).unwrap().value();
            assert_eq!(a.data(), b.data());
        }
        let m1 = x1.seg_mean_rows(&o1).unwrap().value();
        let m2 = x2.seg_mean_rows(&o2).unwrap().value();
        // Broadcast rows come back in storage order; compare per logical row.
        assert_eq!(m1.data()[0..2], m2.data()[2..4]);
        assert_eq!(m1.data()[2..4], m2.data()[0..2]);
        assert_eq!(m1.data()[4..6], m2.data()[6..8]);
    }

    #[test]
    fn concat_round_trips_blocks() {
        let tape = Tape::new();
        let a = tape.input(&arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.input(&arr(&[2, 1], &[9.0, 8.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3]);
        assert_eq!(c.value().data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let tape = Tape::new();
        let a = tape.input(&arr(&[2, 2], &[1.0; 4]));
        let b = tape.input(&arr(&[2], &[1.0; 2]));
        assert!(a.add(b).is_err());
        assert!(a.matmul(b).is_err());
        assert!(a.backward().is_err());
    }
}
