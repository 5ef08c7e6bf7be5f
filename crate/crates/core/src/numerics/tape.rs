use super::kernels::{self, axpy, dot, gelu, gelu_grad, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Ids increase in creation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    MulScalar(Var, Var),
    MulRows(Var, Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Vec<(Var, Vec<usize>)>),
    GatherElems(Var, Vec<usize>),
    ColSum(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    TopkWeights {
        probs: Var,
        selected: Vec<usize>,
        k: usize,
        renorm: bool,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) | MulScalar(a, b)
            | MulRows(a, b) => vec![*a, *b],
            Scale(a, _) | MulConst(a, _) | Gelu(a) | Softmax(a) | Transpose(a) | Reshape(a)
            | SliceRows(a, _) | GatherRows(a, _) | GatherElems(a, _) | ColSum(a) | Sum(a)
            | Mean(a) => vec![*a],
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            ConcatRows(vs) => vs.clone(),
            ScatterRows(parts) => parts.iter().map(|(v, _)| *v).collect(),
            CrossEntropy { logits, .. } => vec![*logits],
            Attention { qkv, .. } => vec![*qkv],
            TopkWeights { probs, .. } => vec![*probs],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of one forward pass.
///
/// Nodes are created in topological order, so `backward` is a single sweep
/// from the loss down to id 0. Gradients are summed into each input in the
/// order consumers are visited, which is fixed by the tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            other => other.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; gradients are retained after `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- forward ops -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(av.data(), bv.data(), m, k, n, &mut out);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data).expect("zip_map shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(bv.len()) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect())
            .expect("scale shape");
        self.push(t, Op::Scale(a, c))
    }

    /// Elementwise product with a constant (no gradient to the constant).
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != c.shape() {
            return Err(Error::shape("mul_const", av.shape(), c.shape()));
        }
        let data = av.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulConst(a, c.data().to_vec())))
    }

    /// `a · s` for a scalar node `s` of shape `[1]`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).item();
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| x * c).collect())?;
        Ok(self.push(t, Op::MulScalar(a, s)))
    }

    /// Scales row `i` of `x[r×c]` by `w[i]`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.len() != xv.rows() {
            return Err(Error::shape("mul_rows", xv.shape(), wv.shape()));
        }
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for (row, &s) in out.chunks_mut(c).zip(wv.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::MulRows(x, w)))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| gelu(x)).collect())
            .expect("gelu shape");
        self.push(t, Op::Gelu(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("softmax input contains NaN".into()));
        }
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(av.cols()) {
            kernels::softmax_in_place(row);
        }
        let t = Tensor::new(av.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(a)))
    }

    /// Normalizes each row over the last axis, then applies `gamma`/`beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (m, n) = rows_cols(xv);
        if gv.len() != n || bv.len() != n {
            return Err(Error::shape("layernorm", xv.shape(), gv.shape()));
        }
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() != 2 {
            return Err(Error::shape("transpose", av.shape(), &[2]));
        }
        let (m, n) = (av.shape()[0], av.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av.data()[i * n + j];
            }
        }
        let t = Tensor::matrix(n, m, out)?;
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Rows `start..start+count` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = rows_cols(av);
        if count == 0 || start + count > m {
            return Err(Error::shape("slice_rows", av.shape(), &[start, count]));
        }
        let data = av.data()[start * n..(start + count) * n].to_vec();
        let t = Tensor::matrix(count, n, data)?;
        Ok(self.push(t, Op::SliceRows(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != n {
                return Err(Error::shape("concat_rows", self.shape(parts[0]), pv.shape()));
            }
            data.extend_from_slice(pv.data());
        }
        let m = data.len() / n;
        let t = Tensor::matrix(m, n, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = rows_cols(av);
        if rows.is_empty() || rows.iter().any(|&r| r >= m) {
            return Err(Error::Contract(format!("gather_rows: bad row set for {m} rows")));
        }
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(av.row(r));
        }
        let t = Tensor::matrix(rows.len(), n, data)?;
        Ok(self.push(t, Op::GatherRows(a, rows.to_vec())))
    }

    /// Sums each part into the listed rows of a zero `[total_rows×n]` matrix.
    pub fn scatter_rows(&mut self, parts: Vec<(Var, Vec<usize>)>, total_rows: usize) -> Result<Var> {
        let n = self.value(parts[0].0).cols();
        let mut out = vec![0.0; total_rows * n];
        for (p, rows) in &parts {
            let pv = self.value(*p);
            if pv.cols() != n || pv.rows() != rows.len() || rows.iter().any(|&r| r >= total_rows) {
                return Err(Error::shape("scatter_rows", pv.shape(), &[rows.len(), n]));
            }
            for (i, &r) in rows.iter().enumerate() {
                for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(pv.row(i)) {
                    *o += v;
                }
            }
        }
        let t = Tensor::matrix(total_rows, n, out)?;
        Ok(self.push(t, Op::ScatterRows(parts)))
    }

    /// Picks flat-indexed elements into a vector (indices may repeat).
    pub fn gather_elems(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if idx.is_empty() || idx.iter().any(|&i| i >= av.len()) {
            return Err(Error::Contract("gather_elems: index out of range".into()));
        }
        let data = idx.iter().map(|&i| av.data()[i]).collect();
        Ok(self.push(Tensor::vector(data), Op::GatherElems(a, idx.to_vec())))
    }

    /// Column sums of a matrix.
    pub fn col_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = rows_cols(av);
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(av.row(i)) {
                *o += v;
            }
        }
        self.push(Tensor::vector(out), Op::ColSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Mean over rows of `-log softmax(logits_row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (m, c) = rows_cols(lv);
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Contract(format!(
                "cross_entropy target {bad} out of range for {c} classes"
            )));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            kernels::softmax_in_place(&mut probs[i * c..(i + 1) * c]);
        }
        loss /= m as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Multi-head scaled dot-product attention over a fused `[T×3D]` qkv
    /// matrix laid out as `[Q | K | V]`, heads contiguous within each block.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Result<Var> {
        let qv = self.value(qkv);
        let (t, three_d) = rows_cols(qv);
        if heads == 0 || three_d % 3 != 0 || (three_d / 3) % heads != 0 {
            return Err(Error::shape("attention", qv.shape(), &[heads]));
        }
        let d = three_d / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = qv.data();
        let mut probs = vec![0.0; heads * t * t];
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
            let a = &mut probs[h * t * t..(h + 1) * t * t];
            for i in 0..t {
                let qi = &q[i * three_d + qo..i * three_d + qo + dh];
                for j in 0..t {
                    let kj = &q[j * three_d + ko..j * three_d + ko + dh];
                    a[i * t + j] = dot(qi, kj) * scale;
                }
                kernels::softmax_in_place(&mut a[i * t..(i + 1) * t]);
                let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..t {
                    let vj = &q[j * three_d + vo..j * three_d + vo + dh];
                    axpy(a[i * t + j], vj, orow);
                }
            }
        }
        let tensor = Tensor::matrix(t, d, out)?;
        Ok(self.push(tensor, Op::Attention { qkv, heads, probs }))
    }

    /// Attention probabilities saved by an [`Tape::attention`] node,
    /// laid out `[heads × T × T]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mixing weights of the selected experts.
    ///
    /// `probs` is `[R×N]`; `selected` holds `k` expert indices per row.
    /// With `renorm` the selected probabilities are rescaled to sum to one,
    /// otherwise they are used as-is.
    pub fn topk_weights(
        &mut self,
        probs: Var,
        selected: &[usize],
        k: usize,
        renorm: bool,
    ) -> Result<Var> {
        let pv = self.value(probs);
        let (r, n) = rows_cols(pv);
        if k == 0 || selected.len() != r * k || selected.iter().any(|&e| e >= n) {
            return Err(Error::shape("topk_weights", pv.shape(), &[selected.len(), k]));
        }
        let mut out = vec![0.0; r * k];
        for i in 0..r {
            let row = pv.row(i);
            let sel = &selected[i * k..(i + 1) * k];
            let denom: f64 = if renorm { sel.iter().map(|&e| row[e]).sum() } else { 1.0 };
            for (j, &e) in sel.iter().enumerate() {
                out[i * k + j] = row[e] / denom;
            }
        }
        let t = Tensor::matrix(r, k, out)?;
        Ok(self.push(
            t,
            Op::TopkWeights {
                probs,
                selected: selected.to_vec(),
                k,
                renorm,
            },
        ))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients of all nodes that
    /// require them are retained and readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            backprop_node(&self.nodes, &mut self.grads, id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }
}

fn val(nodes: &[Node], v: Var) -> &Tensor {
    &nodes[v.0].value
}

fn rg(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, g: &[f64]) {
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = rows_cols(val(nodes, *a));
            let n = val(nodes, *b).cols();
            if rg(nodes, *a) {
                let bv = nodes[b.0].value.data();
                let ga = acc(nodes, grads, *a).unwrap();
                matmul_nt_acc(g, bv, m, n, k, ga);
            }
            if rg(nodes, *b) {
                let av = nodes[a.0].value.data();
                let gb = acc(nodes, grads, *b).unwrap();
                matmul_tn_acc(av, g, m, k, n, gb);
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(gv) = acc(nodes, grads, v) {
                    axpy(1.0, g, gv);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                axpy(1.0, g, ga);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                axpy(-1.0, g, gb);
            }
        }
        Op::Mul(a, b) => {
            let av = val(nodes, *a).data();
            let bv = val(nodes, *b).data();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                    *o += gi * bi;
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                    *o += gi * ai;
                }
            }
        }
        Op::AddBias(x, b) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                axpy(1.0, g, gx);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let n = gb.len();
                for row in g.chunks(n) {
                    axpy(1.0, row, gb);
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                axpy(*c, g, ga);
            }
        }
        Op::MulConst(a, c) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((o, gi), ci) in ga.iter_mut().zip(g).zip(c) {
                    *o += gi * ci;
                }
            }
        }
        Op::MulScalar(a, s) => {
            let c = val(nodes, *s).item();
            if rg(nodes, *s) {
                let d = dot(g, val(nodes, *a).data());
                acc(nodes, grads, *s).unwrap()[0] += d;
            }
            if let Some(ga) = acc(nodes, grads, *a) {
                axpy(c, g, ga);
            }
        }
        Op::MulRows(x, w) => {
            let c = val(nodes, *x).cols();
            if rg(nodes, *w) {
                let xv = val(nodes, *x).data();
                let gw = acc(nodes, grads, *w).unwrap();
                for (i, o) in gw.iter_mut().enumerate() {
                    *o += dot(&g[i * c..(i + 1) * c], &xv[i * c..(i + 1) * c]);
                }
            }
            if rg(nodes, *x) {
                let wv = val(nodes, *w).data();
                let gx = acc(nodes, grads, *x).unwrap();
                for (i, &s) in wv.iter().enumerate() {
                    axpy(s, &g[i * c..(i + 1) * c], &mut gx[i * c..(i + 1) * c]);
                }
            }
        }
        Op::Gelu(a) => {
            let av = val(nodes, *a).data();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((o, gi), x) in ga.iter_mut().zip(g).zip(av) {
                    *o += gi * gelu_grad(*x);
                }
            }
        }
        Op::Softmax(a) => {
            let y = nodes[id].value.data();
            let n = nodes[id].value.cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((gy, yr), o) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let s = dot(gy, yr);
                    for j in 0..n {
                        o[j] += yr[j] * (gy[j] - s);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = val(nodes, *gamma).len();
            let gam = val(nodes, *gamma).data();
            if let Some(gg) = acc(nodes, grads, *gamma) {
                for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *beta) {
                for grow in g.chunks(n) {
                    axpy(1.0, grow, gb);
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                let nf = n as f64;
                for (i, (grow, hrow)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..n {
                        let dh = grow[j] * gam[j];
                        s1 += dh;
                        s2 += dh * hrow[j];
                    }
                    let r = rstd[i];
                    let out = &mut gx[i * n..(i + 1) * n];
                    for j in 0..n {
                        let dh = grow[j] * gam[j];
                        out[j] += r * (dh - s1 / nf - hrow[j] * s2 / nf);
                    }
                }
            }
        }
        Op::Transpose(a) => {
            let (m, n) = rows_cols(val(nodes, *a));
            if let Some(ga) = acc(nodes, grads, *a) {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += g[j * m + i];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                axpy(1.0, g, ga);
            }
        }
        Op::SliceRows(a, start) => {
            let n = val(nodes, *a).cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                axpy(1.0, g, &mut ga[start * n..start * n + g.len()]);
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = val(nodes, p).len();
                if let Some(gp) = acc(nodes, grads, p) {
                    axpy(1.0, &g[off..off + len], gp);
                }
                off += len;
            }
        }
        Op::GatherRows(a, rows) => {
            let n = val(nodes, *a).cols();
            if let Some(ga) = acc(nodes, grads, *a) {
                for (i, &r) in rows.iter().enumerate() {
                    axpy(1.0, &g[i * n..(i + 1) * n], &mut ga[r * n..(r + 1) * n]);
                }
            }
        }
        Op::ScatterRows(parts) => {
            let n = nodes[id].value.cols();
            for (p, rows) in parts {
                if let Some(gp) = acc(nodes, grads, *p) {
                    for (i, &r) in rows.iter().enumerate() {
                        axpy(1.0, &g[r * n..(r + 1) * n], &mut gp[i * n..(i + 1) * n]);
                    }
                }
            }
        }
        Op::GatherElems(a, idx) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for (gi, &i) in g.iter().zip(idx) {
                    ga[i] += gi;
                }
            }
        }
        Op::ColSum(a) => {
            let n = g.len();
            if let Some(ga) = acc(nodes, grads, *a) {
                for row in ga.chunks_mut(n) {
                    axpy(1.0, g, row);
                }
            }
        }
        Op::Sum(a) => {
            let s = g[0];
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().for_each(|v| *v += s);
            }
        }
        Op::Mean(a) => {
            let len = val(nodes, *a).len() as f64;
            let s = g[0] / len;
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().for_each(|v| *v += s);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let c = val(nodes, *logits).cols();
            let s = g[0] / targets.len() as f64;
            if let Some(gl) = acc(nodes, grads, *logits) {
                for (i, &t) in targets.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gl[i * c + j] += s * (probs[i * c + j] - onehot);
                    }
                }
            }
        }
        Op::Attention { qkv, heads, probs } => {
            if rg(nodes, *qkv) {
                let q = val(nodes, *qkv).data();
                let (t, three_d) = rows_cols(val(nodes, *qkv));
                let gq = acc(nodes, grads, *qkv).unwrap();
                attention_backward(q, probs, g, t, three_d, *heads, gq);
            }
        }
        Op::TopkWeights {
            probs,
            selected,
            k,
            renorm,
        } => {
            let n = val(nodes, *probs).cols();
            let pv = val(nodes, *probs).data();
            let w = nodes[id].value.data();
            if let Some(gp) = acc(nodes, grads, *probs) {
                for (i, (sel, grow)) in selected.chunks(*k).zip(g.chunks(*k)).enumerate() {
                    let prow = &pv[i * n..(i + 1) * n];
                    if *renorm {
                        let denom: f64 = sel.iter().map(|&e| prow[e]).sum();
                        let wrow = &w[i * k..(i + 1) * k];
                        let s = dot(grow, wrow);
                        for (j, &e) in sel.iter().enumerate() {
                            gp[i * n + e] += (grow[j] - s) / denom;
                        }
                    } else {
                        for (j, &e) in sel.iter().enumerate() {
                            gp[i * n + e] += grow[j];
                        }
                    }
                }
            }
        }
    }
}

fn attention_backward(
    q: &[f64],
    probs: &[f64],
    g: &[f64],
    t: usize,
    three_d: usize,
    heads: usize,
    gq: &mut [f64],
) {
    let d = three_d / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ds = vec![0.0; t * t];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        let a = &probs[h * t * t..(h + 1) * t * t];
        // dA = dO · Vᵀ, then softmax backward into dS.
        for i in 0..t {
            let go = &g[i * d + h * dh..i * d + (h + 1) * dh];
            let mut s = 0.0;
            for j in 0..t {
                let vj = &q[j * three_d + vo..j * three_d + vo + dh];
                let da = dot(go, vj);
                ds[i * t + j] = da;
                s += da * a[i * t + j];
            }
            for j in 0..t {
                ds[i * t + j] = a[i * t + j] * (ds[i * t + j] - s);
            }
        }
        for i in 0..t {
            let go = &g[i * d + h * dh..i * d + (h + 1) * dh];
            for j in 0..t {
                // dV_j += A_ij · dO_i
                let aij = a[i * t + j];
                let base = j * three_d + vo;
                axpy(aij, go, &mut gq[base..base + dh]);
                // dQ_i += dS_ij · K_j · scale ; dK_j += dS_ij · Q_i · scale
                let dsij = ds[i * t + j] * scale;
                if dsij != 0.0 {
                    let kj_base = j * three_d + ko;
                    let qi_base = i * three_d + qo;
                    for c in 0..dh {
                        gq[qi_base + c] += dsij * q[kj_base + c];
                    }
                    for c in 0..dh {
                        gq[kj_base + c] += dsij * q[qi_base + c];
                    }
                }
            }
        }
    }
}
