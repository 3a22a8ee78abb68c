//! Flat-arena reverse-mode tape.
//!
//! Forward calls append nodes and validate shapes eagerly; [`Tape::backward`]
//! walks the arena in reverse and accumulates parameter gradients. Gradient
//! flow is pruned through the `tracked` flag: a node is tracked iff any of
//! its inputs is tracked, with parameters tracked by construction.

use super::tensor::{ParamSet, Scalar, Tensor};
use super::{invalid, NumError};

/// Index of a node on a tape. Only valid for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<F> {
    Leaf,
    Param { slot: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: F },
    AddBias { a: Var, b: Var },
    RowMul { a: Var, w: Var },
    MulScalar { a: Var, s: Var },
    Dot { a: Var, b: Var },
    Matmul { a: Var, b: Var },
    MatmulTB { a: Var, b: Var },
    MatVec { m: Var, v: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    SumAll { a: Var },
    SoftmaxVec { a: Var },
    SoftmaxRows { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    StackCols { parts: Vec<Var> },
    SliceLast { a: Var, offset: usize, len: usize },
    SliceCol { a: Var, col: usize },
    EmbedRow { table: Var, id: u32 },
    EmbedRows { table: Var, ids: Vec<u32> },
    SparseLinear { w: Var, rows: Vec<Vec<(u32, F)>> },
    MaxPoolRows { a: Var, ranges: Vec<(usize, usize)> },
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    tracked: bool,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
    grads: Vec<Vec<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.node(v).value
    }

    /// Gradient of the last backward pass with respect to `v`. `None` before
    /// backward or for untracked nodes.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).filter(|g| !g.is_empty()).map(|g| g.as_slice())
    }

    /// Records an input that never receives gradients.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    /// Records an input; it is tracked iff the tensor requires gradients.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let tracked = t.requires_grad();
        self.push(t, Op::Leaf, tracked)
    }

    /// Binds a registered parameter to this tape. Backward accumulates into
    /// the parameter's grad buffer through this node.
    pub fn param(&mut self, params: &ParamSet<F>, slot: usize) -> Var {
        let value = params.value(slot).clone();
        self.push(value, Op::Param { slot }, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        let value = self.like(a, data);
        Ok(self.push_binary(value, Op::Add { a, b }, a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        let value = self.like(a, data);
        Ok(self.push_binary(value, Op::Mul { a, b }, a, b))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        let value = self.like(a, data);
        let tracked = self.node(a).tracked;
        self.push(value, Op::Scale { a, c }, tracked)
    }

    /// Adds a length-`n` bias vector to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, n) = self.rank2("add_bias", a)?;
        if self.shape(b) != [n] {
            return Err(self.mismatch("add_bias", a, b));
        }
        let bd = self.data(b);
        let mut data = self.data(a).to_vec();
        for r in 0..m {
            for j in 0..n {
                data[r * n + j] += bd[j];
            }
        }
        let value = self.like(a, data);
        Ok(self.push_binary(value, Op::AddBias { a, b }, a, b))
    }

    /// Scales row `r` of an `[m, n]` matrix by `w[r]`.
    pub fn row_mul(&mut self, a: Var, w: Var) -> Result<Var, NumError> {
        let (m, n) = self.rank2("row_mul", a)?;
        if self.shape(w) != [m] {
            return Err(self.mismatch("row_mul", a, w));
        }
        let wd = self.data(w);
        let ad = self.data(a);
        let mut data = vec![F::zero(); m * n];
        for r in 0..m {
            for j in 0..n {
                data[r * n + j] = ad[r * n + j] * wd[r];
            }
        }
        let value = self.like(a, data);
        Ok(self.push_binary(value, Op::RowMul { a, w }, a, w))
    }

    /// Multiplies every entry of `a` by a single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, NumError> {
        if self.value(s).numel() != 1 {
            return Err(invalid("mul_scalar", format!("scale has shape {:?}", self.shape(s))));
        }
        let sv = self.data(s)[0];
        let data = self.data(a).iter().map(|&x| x * sv).collect();
        let value = self.like(a, data);
        Ok(self.push_binary(value, Op::MulScalar { a, s }, a, s))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.want_rank("dot", a, 1)?;
        self.same_shape("dot", a, b)?;
        let mut acc = F::zero();
        for (x, y) in self.data(a).iter().zip(self.data(b)) {
            acc += *x * *y;
        }
        let value = Tensor::scalar(acc);
        Ok(self.push_binary(value, Op::Dot { a, b }, a, b))
    }

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let data = mm_nn(self.data(a), self.data(b), m, k, n);
        let value = Tensor::from_vec(vec![m, n], data).expect("kernel sized");
        Ok(self.push_binary(value, Op::Matmul { a, b }, a, b))
    }

    /// `[m, k] · [n, k]ᵀ -> [m, n]`. Row `i` of the output is `b · a_i`, so a
    /// batched right-multiplication by a stored `[out, in]` weight matrix
    /// reproduces per-row `matvec` results bit for bit.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.rank2("matmul_tb", a)?;
        let (n, k2) = self.rank2("matmul_tb", b)?;
        if k != k2 {
            return Err(self.mismatch("matmul_tb", a, b));
        }
        let data = mm_nt(self.data(a), self.data(b), m, k, n);
        let value = Tensor::from_vec(vec![m, n], data).expect("kernel sized");
        Ok(self.push_binary(value, Op::MatmulTB { a, b }, a, b))
    }

    /// `[r, c] · [c] -> [r]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var, NumError> {
        let (r, c) = self.rank2("matvec", m)?;
        if self.shape(v) != [c] {
            return Err(self.mismatch("matvec", m, v));
        }
        let md = self.data(m);
        let vd = self.data(v);
        let mut data = vec![F::zero(); r];
        for i in 0..r {
            let mut acc = F::zero();
            for p in 0..c {
                acc += md[i * c + p] * vd[p];
            }
            data[i] = acc;
        }
        let value = Tensor::vector(data);
        Ok(self.push_binary(value, Op::MatVec { m, v }, m, v))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self
            .data(a)
            .iter()
            .map(|&x| F::one() / (F::one() + (-x).exp()))
            .collect();
        let value = self.like(a, data);
        let tracked = self.node(a).tracked;
        self.push(value, Op::Sigmoid { a }, tracked)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x.tanh()).collect();
        let value = self.like(a, data);
        let tracked = self.node(a).tracked;
        self.push(value, Op::Tanh { a }, tracked)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let mut acc = F::zero();
        for &x in self.data(a) {
            acc += x;
        }
        let tracked = self.node(a).tracked;
        self.push(Tensor::scalar(acc), Op::SumAll { a }, tracked)
    }

    /// Numerically stable softmax of a rank-1 tensor: the row maximum is
    /// subtracted before exponentiation.
    pub fn softmax_vec(&mut self, a: Var) -> Result<Var, NumError> {
        self.want_rank("softmax_vec", a, 1)?;
        if self.value(a).numel() == 0 {
            return Err(invalid("softmax_vec", "empty vector"));
        }
        let mut data = vec![F::zero(); self.value(a).numel()];
        softmax_slice(self.data(a), &mut data);
        let value = Tensor::vector(data);
        let tracked = self.node(a).tracked;
        Ok(self.push(value, Op::SoftmaxVec { a }, tracked))
    }

    /// Row-wise softmax of an `[m, n]` matrix, same stabilization as
    /// [`Tape::softmax_vec`] applied per row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let (m, n) = self.rank2("softmax_rows", a)?;
        if n == 0 {
            return Err(invalid("softmax_rows", "empty rows"));
        }
        let ad = self.data(a);
        let mut data = vec![F::zero(); m * n];
        for r in 0..m {
            softmax_slice(&ad[r * n..(r + 1) * n], &mut data[r * n..(r + 1) * n]);
        }
        let value = Tensor::from_vec(vec![m, n], data).expect("kernel sized");
        let tracked = self.node(a).tracked;
        Ok(self.push(value, Op::SoftmaxRows { a }, tracked))
    }

    /// Concatenates along `axis`. Rank-1 inputs support axis 0; rank-2 inputs
    /// support axis 0 (stack rows) and axis 1 (widen rows).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumError> {
        if parts.is_empty() {
            return Err(invalid("concat", "no inputs"));
        }
        let rank = self.value(parts[0]).rank();
        for &p in parts {
            if self.value(p).rank() != rank {
                return Err(self.mismatch("concat", parts[0], p));
            }
        }
        let value = match (rank, axis) {
            (1, 0) => {
                let mut data = Vec::new();
                for &p in parts {
                    data.extend_from_slice(self.data(p));
                }
                Tensor::vector(data)
            }
            (2, 0) => {
                let cols = self.shape(parts[0])[1];
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    if self.shape(p)[1] != cols {
                        return Err(self.mismatch("concat", parts[0], p));
                    }
                    rows += self.shape(p)[0];
                    data.extend_from_slice(self.data(p));
                }
                Tensor::from_vec(vec![rows, cols], data).expect("sizes verified")
            }
            (2, 1) => {
                let rows = self.shape(parts[0])[0];
                let mut cols = 0;
                for &p in parts {
                    if self.shape(p)[0] != rows {
                        return Err(self.mismatch("concat", parts[0], p));
                    }
                    cols += self.shape(p)[1];
                }
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        let w = self.shape(p)[1];
                        data.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
                    }
                }
                Tensor::from_vec(vec![rows, cols], data).expect("sizes verified")
            }
            _ => {
                return Err(invalid(
                    "concat",
                    format!("rank {rank} with axis {axis} not supported"),
                ))
            }
        };
        let tracked = parts.iter().any(|&p| self.node(p).tracked);
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, tracked))
    }

    /// Stacks `t` rank-1 tensors of length `m` into an `[m, t]` matrix whose
    /// column `i` is `parts[i]`.
    pub fn stack_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        if parts.is_empty() {
            return Err(invalid("stack_cols", "no inputs"));
        }
        let m = self.value(parts[0]).numel();
        for &p in parts {
            self.want_rank("stack_cols", p, 1)?;
            if self.value(p).numel() != m {
                return Err(self.mismatch("stack_cols", parts[0], p));
            }
        }
        let t = parts.len();
        let mut data = vec![F::zero(); m * t];
        for (i, &p) in parts.iter().enumerate() {
            for (r, &x) in self.data(p).iter().enumerate() {
                data[r * t + i] = x;
            }
        }
        let value = Tensor::from_vec(vec![m, t], data).expect("sizes verified");
        let tracked = parts.iter().any(|&p| self.node(p).tracked);
        Ok(self.push(value, Op::StackCols { parts: parts.to_vec() }, tracked))
    }

    /// Contiguous window along the last axis: a rank-1 `[n]` tensor yields
    /// `[len]`, a rank-2 `[m, n]` tensor yields `[m, len]`.
    pub fn slice_last(&mut self, a: Var, offset: usize, len: usize) -> Result<Var, NumError> {
        let shape = self.shape(a).to_vec();
        let n = *shape.last().expect("tensors are non-empty");
        if len == 0 || offset + len > n {
            return Err(invalid(
                "slice_last",
                format!("window {offset}..{} out of axis length {n}", offset + len),
            ));
        }
        let value = match shape.len() {
            1 => Tensor::vector(self.data(a)[offset..offset + len].to_vec()),
            2 => {
                let m = shape[0];
                let mut data = Vec::with_capacity(m * len);
                for r in 0..m {
                    data.extend_from_slice(&self.data(a)[r * n + offset..r * n + offset + len]);
                }
                Tensor::from_vec(vec![m, len], data).expect("sizes verified")
            }
            r => return Err(invalid("slice_last", format!("rank {r} not supported"))),
        };
        let tracked = self.node(a).tracked;
        Ok(self.push(value, Op::SliceLast { a, offset, len }, tracked))
    }

    /// Column `col` of an `[m, n]` matrix as a rank-1 `[m]` tensor.
    pub fn slice_col(&mut self, a: Var, col: usize) -> Result<Var, NumError> {
        let (m, n) = self.rank2("slice_col", a)?;
        if col >= n {
            return Err(invalid("slice_col", format!("column {col} out of {n}")));
        }
        let ad = self.data(a);
        let data = (0..m).map(|r| ad[r * n + col]).collect();
        let tracked = self.node(a).tracked;
        Ok(self.push(Tensor::vector(data), Op::SliceCol { a, col }, tracked))
    }

    /// Row `id` of an embedding table `[v, d]` as a `[d]` vector.
    pub fn embed_row(&mut self, table: Var, id: u32) -> Result<Var, NumError> {
        let (v, d) = self.rank2("embed_row", table)?;
        if id as usize >= v {
            return Err(invalid("embed_row", format!("id {id} out of vocabulary {v}")));
        }
        let row = id as usize;
        let data = self.data(table)[row * d..(row + 1) * d].to_vec();
        let tracked = self.node(table).tracked;
        Ok(self.push(Tensor::vector(data), Op::EmbedRow { table, id }, tracked))
    }

    /// Rows `ids` of an embedding table `[v, d]` stacked into `[len(ids), d]`.
    pub fn embed_rows(&mut self, table: Var, ids: &[u32]) -> Result<Var, NumError> {
        let (v, d) = self.rank2("embed_rows", table)?;
        if ids.is_empty() {
            return Err(invalid("embed_rows", "no ids"));
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id as usize >= v {
                return Err(invalid("embed_rows", format!("id {id} out of vocabulary {v}")));
            }
            let row = id as usize;
            data.extend_from_slice(&td[row * d..(row + 1) * d]);
        }
        let value = Tensor::from_vec(vec![ids.len(), d], data).expect("sizes verified");
        let tracked = self.node(table).tracked;
        Ok(self.push(value, Op::EmbedRows { table, ids: ids.to_vec() }, tracked))
    }

    /// Sparse feature rows times a dense `[h, n]` weight, `[batch, h]` out.
    /// `rows[b]` lists `(feature_index, value)` pairs of example `b`.
    pub fn sparse_linear(&mut self, w: Var, rows: Vec<Vec<(u32, F)>>) -> Result<Var, NumError> {
        let (h, n) = self.rank2("sparse_linear", w)?;
        if rows.is_empty() {
            return Err(invalid("sparse_linear", "no rows"));
        }
        for row in &rows {
            if let Some((i, _)) = row.iter().find(|(i, _)| *i as usize >= n) {
                return Err(invalid("sparse_linear", format!("feature {i} out of width {n}")));
            }
        }
        let wd = self.data(w);
        let b = rows.len();
        let mut data = vec![F::zero(); b * h];
        for (r, row) in rows.iter().enumerate() {
            for j in 0..h {
                let wrow = &wd[j * n..(j + 1) * n];
                let mut acc = F::zero();
                for &(i, c) in row {
                    acc += c * wrow[i as usize];
                }
                data[r * h + j] = acc;
            }
        }
        let value = Tensor::from_vec(vec![b, h], data).expect("sizes verified");
        let tracked = self.node(w).tracked;
        Ok(self.push(value, Op::SparseLinear { w, rows }, tracked))
    }

    /// Column-wise max over row ranges of an `[m, n]` matrix. `ranges` are
    /// half-open and non-empty; output is `[len(ranges), n]`. Ties route
    /// gradient to the earliest row.
    pub fn max_pool_rows(
        &mut self,
        a: Var,
        ranges: Vec<(usize, usize)>,
    ) -> Result<Var, NumError> {
        let (m, n) = self.rank2("max_pool_rows", a)?;
        if ranges.is_empty() {
            return Err(invalid("max_pool_rows", "no ranges"));
        }
        for &(s, e) in &ranges {
            if s >= e || e > m {
                return Err(invalid("max_pool_rows", format!("range {s}..{e} out of {m} rows")));
            }
        }
        let ad = self.data(a);
        let mut data = vec![F::zero(); ranges.len() * n];
        for (ri, &(s, e)) in ranges.iter().enumerate() {
            for j in 0..n {
                let mut best = ad[s * n + j];
                for r in s + 1..e {
                    if ad[r * n + j] > best {
                        best = ad[r * n + j];
                    }
                }
                data[ri * n + j] = best;
            }
        }
        let value = Tensor::from_vec(vec![ranges.len(), n], data).expect("sizes verified");
        let tracked = self.node(a).tracked;
        Ok(self.push(value, Op::MaxPoolRows { a, ranges }, tracked))
    }

    /// Mean cross-entropy of `[batch, classes]` logits against class indices,
    /// computed with the log-sum-exp trick. Output is a single element.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var, NumError> {
        let (b, c) = self.rank2("cross_entropy", logits)?;
        if targets.len() != b {
            return Err(invalid(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), b),
            ));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= c) {
            return Err(invalid("cross_entropy", format!("target {t} out of {c} classes")));
        }
        let ld = self.data(logits);
        let mut total = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &ld[r * c..(r + 1) * c];
            let mut mx = row[0];
            for &z in &row[1..] {
                if z > mx {
                    mx = z;
                }
            }
            let mut sum = F::zero();
            for &z in row {
                sum += (z - mx).exp();
            }
            total += mx + sum.ln() - row[t];
        }
        let mean = total / F::from_f64(b as f64);
        let tracked = self.node(logits).tracked;
        Ok(self.push(Tensor::scalar(mean), Op::CrossEntropy { logits, targets }, tracked))
    }

    /// Reverse pass from a scalar loss. Gradients of bound parameters are
    /// accumulated (`+=`) into `params`; calling backward twice therefore
    /// doubles them. Errors if the loss is not a single element or is not
    /// connected to any tracked node.
    pub fn backward(&mut self, loss: Var, params: &mut ParamSet<F>) -> Result<(), NumError> {
        let loss_node = self.node(loss);
        if loss_node.value.numel() != 1 {
            return Err(NumError::NotScalarLoss { shape: loss_node.value.shape().to_vec() });
        }
        if !loss_node.tracked {
            return Err(NumError::DetachedLoss);
        }

        let mut grads: Vec<Vec<F>> = self
            .nodes
            .iter()
            .map(|n| if n.tracked { vec![F::zero(); n.value.numel()] } else { Vec::new() })
            .collect();
        grads[loss.0][0] = F::one();

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            self.propagate(idx, &g, &mut grads, params);
            grads[idx] = g;
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[F], grads: &mut [Vec<F>], params: &mut ParamSet<F>) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Param { slot } => params.add_grad(*slot, g),
            Op::Add { a, b } => {
                self.accum(grads, *a, |da| {
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += *gi;
                    }
                });
                self.accum(grads, *b, |db| {
                    for (d, gi) in db.iter_mut().zip(g) {
                        *d += *gi;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.accum(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                self.accum(grads, *b, |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale { a, c } => {
                let c = *c;
                self.accum(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * c;
                    }
                });
            }
            Op::AddBias { a, b } => {
                let n = self.shape(*b)[0];
                self.accum(grads, *a, |da| {
                    for (d, gi) in da.iter_mut().zip(g) {
                        *d += *gi;
                    }
                });
                self.accum(grads, *b, |db| {
                    for (r, chunk) in g.chunks(n).enumerate() {
                        let _ = r;
                        for j in 0..n {
                            db[j] += chunk[j];
                        }
                    }
                });
            }
            Op::RowMul { a, w } => {
                let shape = self.shape(*a);
                let (m, n) = (shape[0], shape[1]);
                let (av, wv) = (self.data(*a), self.data(*w));
                self.accum(grads, *a, |da| {
                    for r in 0..m {
                        for j in 0..n {
                            da[r * n + j] += g[r * n + j] * wv[r];
                        }
                    }
                });
                self.accum(grads, *w, |dw| {
                    for r in 0..m {
                        let mut acc = F::zero();
                        for j in 0..n {
                            acc += g[r * n + j] * av[r * n + j];
                        }
                        dw[r] += acc;
                    }
                });
            }
            Op::MulScalar { a, s } => {
                let (av, sv) = (self.data(*a), self.data(*s)[0]);
                self.accum(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * sv;
                    }
                });
                self.accum(grads, *s, |ds| {
                    let mut acc = F::zero();
                    for i in 0..av.len() {
                        acc += g[i] * av[i];
                    }
                    ds[0] += acc;
                });
            }
            Op::Dot { a, b } => {
                let (av, bv) = (self.data(*a), self.data(*b));
                let g0 = g[0];
                self.accum(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g0 * bv[i];
                    }
                });
                self.accum(grads, *b, |db| {
                    for i in 0..db.len() {
                        db[i] += g0 * av[i];
                    }
                });
            }
            Op::Matmul { a, b } => {
                let (m, k) = dims2(self.shape(*a));
                let n = self.shape(*b)[1];
                let (av, bv) = (self.data(*a), self.data(*b));
                self.accum(grads, *a, |da| {
                    add_assign(da, &mm_nt(g, bv, m, n, k));
                });
                self.accum(grads, *b, |db| {
                    add_assign(db, &mm_tn(av, g, m, k, n));
                });
            }
            Op::MatmulTB { a, b } => {
                let (m, k) = dims2(self.shape(*a));
                let n = self.shape(*b)[0];
                let (av, bv) = (self.data(*a), self.data(*b));
                self.accum(grads, *a, |da| {
                    add_assign(da, &mm_nn(g, bv, m, n, k));
                });
                self.accum(grads, *b, |db| {
                    add_assign(db, &mm_tn(g, av, m, n, k));
                });
            }
            Op::MatVec { m, v } => {
                let (r, c) = dims2(self.shape(*m));
                let (mv, vv) = (self.data(*m), self.data(*v));
                self.accum(grads, *m, |dm| {
                    for i in 0..r {
                        for j in 0..c {
                            dm[i * c + j] += g[i] * vv[j];
                        }
                    }
                });
                self.accum(grads, *v, |dv| {
                    for i in 0..r {
                        let gi = g[i];
                        for j in 0..c {
                            dv[j] += gi * mv[i * c + j];
                        }
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = node.value.data();
                self.accum(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * y[i] * (F::one() - y[i]);
                    }
                });
            }
            Op::Tanh { a } => {
                let y = node.value.data();
                self.accum(grads, *a, |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * (F::one() - y[i] * y[i]);
                    }
                });
            }
            Op::SumAll { a } => {
                let g0 = g[0];
                self.accum(grads, *a, |da| {
                    for d in da.iter_mut() {
                        *d += g0;
                    }
                });
            }
            Op::SoftmaxVec { a } => {
                let y = node.value.data();
                self.accum(grads, *a, |da| {
                    softmax_backward(y, g, da);
                });
            }
            Op::SoftmaxRows { a } => {
                let y = node.value.data();
                let n = self.shape(*a)[1];
                self.accum(grads, *a, |da| {
                    for r in 0..da.len() / n {
                        softmax_backward(
                            &y[r * n..(r + 1) * n],
                            &g[r * n..(r + 1) * n],
                            &mut da[r * n..(r + 1) * n],
                        );
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let rank = self.value(parts[0]).rank();
                match (rank, axis) {
                    (1, 0) | (2, 0) => {
                        let mut off = 0;
                        for &p in parts {
                            let len = self.value(p).numel();
                            self.accum(grads, p, |dp| {
                                add_assign(dp, &g[off..off + len]);
                            });
                            off += len;
                        }
                    }
                    (2, 1) => {
                        let rows = self.shape(parts[0])[0];
                        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                        let mut off = 0;
                        for &p in parts {
                            let w = self.shape(p)[1];
                            self.accum(grads, p, |dp| {
                                for r in 0..rows {
                                    for j in 0..w {
                                        dp[r * w + j] += g[r * total + off + j];
                                    }
                                }
                            });
                            off += w;
                        }
                    }
                    _ => unreachable!("validated in forward"),
                }
            }
            Op::StackCols { parts } => {
                let t = parts.len();
                for (i, &p) in parts.iter().enumerate() {
                    self.accum(grads, p, |dp| {
                        for r in 0..dp.len() {
                            dp[r] += g[r * t + i];
                        }
                    });
                }
            }
            Op::SliceLast { a, offset, len } => {
                let shape = self.shape(*a);
                match shape.len() {
                    1 => self.accum(grads, *a, |da| {
                        for j in 0..*len {
                            da[offset + j] += g[j];
                        }
                    }),
                    2 => {
                        let (m, n) = (shape[0], shape[1]);
                        self.accum(grads, *a, |da| {
                            for r in 0..m {
                                for j in 0..*len {
                                    da[r * n + offset + j] += g[r * len + j];
                                }
                            }
                        });
                    }
                    _ => unreachable!("validated in forward"),
                }
            }
            Op::SliceCol { a, col } => {
                let n = self.shape(*a)[1];
                self.accum(grads, *a, |da| {
                    for r in 0..g.len() {
                        da[r * n + col] += g[r];
                    }
                });
            }
            Op::EmbedRow { table, id } => {
                let d = self.shape(*table)[1];
                let row = *id as usize;
                self.accum(grads, *table, |dt| {
                    for j in 0..d {
                        dt[row * d + j] += g[j];
                    }
                });
            }
            Op::EmbedRows { table, ids } => {
                let d = self.shape(*table)[1];
                self.accum(grads, *table, |dt| {
                    for (b, &id) in ids.iter().enumerate() {
                        let row = id as usize;
                        for j in 0..d {
                            dt[row * d + j] += g[b * d + j];
                        }
                    }
                });
            }
            Op::SparseLinear { w, rows } => {
                let (h, n) = dims2(self.shape(*w));
                self.accum(grads, *w, |dw| {
                    for (b, row) in rows.iter().enumerate() {
                        for j in 0..h {
                            let gj = g[b * h + j];
                            for &(i, c) in row {
                                dw[j * n + i as usize] += gj * c;
                            }
                        }
                    }
                });
            }
            Op::MaxPoolRows { a, ranges } => {
                let n = self.shape(*a)[1];
                let av = self.data(*a);
                self.accum(grads, *a, |da| {
                    for (ri, &(s, e)) in ranges.iter().enumerate() {
                        for j in 0..n {
                            let mut best_row = s;
                            for r in s + 1..e {
                                if av[r * n + j] > av[best_row * n + j] {
                                    best_row = r;
                                }
                            }
                            da[best_row * n + j] += g[ri * n + j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets } => {
                let (b, c) = dims2(self.shape(*logits));
                let ld = self.data(*logits);
                let scale = g[0] / F::from_f64(b as f64);
                self.accum(grads, *logits, |dl| {
                    let mut probs = vec![F::zero(); c];
                    for (r, &t) in targets.iter().enumerate() {
                        softmax_slice(&ld[r * c..(r + 1) * c], &mut probs);
                        for j in 0..c {
                            let ind = if j == t { F::one() } else { F::zero() };
                            dl[r * c + j] += (probs[j] - ind) * scale;
                        }
                    }
                });
            }
        }
    }

    /// Applies `f` to the gradient buffer of `v` if `v` is tracked.
    fn accum(&self, grads: &mut [Vec<F>], v: Var, f: impl FnOnce(&mut [F])) {
        if self.nodes[v.0].tracked {
            f(&mut grads[v.0]);
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn push_binary(&mut self, value: Tensor<F>, op: Op<F>, a: Var, b: Var) -> Var {
        let tracked = self.node(a).tracked || self.node(b).tracked;
        self.push(value, op, tracked)
    }

    fn node(&self, v: Var) -> &Node<F> {
        &self.nodes[v.0]
    }

    fn data(&self, v: Var) -> &[F] {
        self.node(v).value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    fn like(&self, v: Var, data: Vec<F>) -> Tensor<F> {
        Tensor::from_vec(self.shape(v).to_vec(), data).expect("same shape as existing node")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    fn want_rank(&self, op: &'static str, v: Var, rank: usize) -> Result<(), NumError> {
        if self.value(v).rank() != rank {
            return Err(invalid(op, format!("expected rank {rank}, got {:?}", self.shape(v))));
        }
        Ok(())
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize), NumError> {
        self.want_rank(op, v, 2)?;
        let s = self.shape(v);
        Ok((s[0], s[1]))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> NumError {
        NumError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1])
}

fn zip_map<F: Scalar>(a: &[F], b: &[F], f: impl Fn(F, F) -> F) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_assign<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// `out = a · b` for `a [m, k]`, `b [k, n]`. Accumulation over `k` ascends,
/// so per-element sums match a naive triple loop bit for bit.
fn mm_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `out = a · bᵀ` for `a [m, k]`, `b [n, k]`.
fn mm_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `out = aᵀ · b` for `a [m, k]`, `b [m, n]`.
fn mm_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = arow[p];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

fn softmax_slice<F: Scalar>(xs: &[F], out: &mut [F]) {
    let mut mx = xs[0];
    for &v in &xs[1..] {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(xs) {
        let e = (v - mx).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// dL/dx_i = y_i (g_i - Σ_j g_j y_j) for y = softmax(x).
fn softmax_backward<F: Scalar>(y: &[F], g: &[F], dx: &mut [F]) {
    let mut inner = F::zero();
    for i in 0..y.len() {
        inner += g[i] * y[i];
    }
    for i in 0..y.len() {
        dx[i] += y[i] * (g[i] - inner);
    }
}
