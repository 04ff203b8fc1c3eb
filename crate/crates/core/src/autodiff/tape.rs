use super::tensor::{validate_shape, Tensor};
use crate::error::{Error, Result};

/// Floor applied to the per-row variance in [`Tape::var_normalize`].
pub const VARIANCE_FLOOR: f64 = 1e-9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the second operand of a binary op is broadcast against the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// Second operand matches the trailing `n` elements of the first and is
    /// repeated over the leading block dimension.
    Trailing(usize),
    Scalar,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Div(Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sigmoid(Var),
    Clamp(Var, f64, f64),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Variance(Var),
    Transpose(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Select {
        input: Var,
        index: usize,
    },
    VarNormalize {
        input: Var,
        /// Clamped denominator per row, and whether the clamp was active.
        denom: Vec<f64>,
        clamped: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Detach,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Append-only record of one forward pass.
///
/// Nodes are topologically ordered by construction, so `backward` is a single
/// reverse sweep. A tape is single-use: build it, call `backward` once, read
/// gradients, drop it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ----- leaves -----

    /// Records a tensor as a leaf; gradients flow to it iff it requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            Op::Leaf,
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, vec![1], vec![value], false)
    }

    // ----- accessors -----

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        let n = self.node(v);
        debug_assert_eq!(n.value.len(), 1);
        n.value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node has valid shape")
    }

    /// Gradient of the last `backward` target w.r.t. `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    /// Copies the gradient of `v` into the tensor's grad slot (accumulating).
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    // ----- elementwise binary -----

    fn broadcast(&self, a: Var, b: Var, op: &str) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Bcast::Same);
        }
        if sb.iter().product::<usize>() == 1 {
            return Ok(Bcast::Scalar);
        }
        if sb.len() < sa.len() && sa.ends_with(sb) {
            return Ok(Bcast::Trailing(sb.iter().product()));
        }
        Err(Error::shape(format!(
            "{op}: cannot broadcast {sb:?} against {sa:?}"
        )))
    }

    /// Resolves broadcasting for a commutative op, swapping operands so the
    /// broadcast one comes second.
    fn commutative(&self, a: Var, b: Var, op: &str) -> Result<(Var, Var, Bcast)> {
        match self.broadcast(a, b, op) {
            Ok(bc) => Ok((a, b, bc)),
            Err(e) => match self.broadcast(b, a, op) {
                Ok(bc) => Ok((b, a, bc)),
                Err(_) => Err(e),
            },
        }
    }

    fn binary(&mut self, a: Var, b: Var, bc: Bcast, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = &self.node(a).value;
        let vb = &self.node(b).value;
        let value: Vec<f64> = match bc {
            Bcast::Same => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => va.iter().map(|&x| f(x, vb[0])).collect(),
            Bcast::Trailing(n) => va
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, vb[i % n]))
                .collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(op, shape, value, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, bc) = self.commutative(a, b, "add")?;
        Ok(self.binary(a, b, bc, |x, y| x + y, Op::Add(a, b, bc)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast(a, b, "sub")?;
        Ok(self.binary(a, b, bc, |x, y| x - y, Op::Sub(a, b, bc)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, bc) = self.commutative(a, b, "mul")?;
        Ok(self.binary(a, b, bc, |x, y| x * y, Op::Mul(a, b, bc)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast(a, b, "div")?;
        Ok(self.binary(a, b, bc, |x, y| x / y, Op::Div(a, b, bc)))
    }

    // ----- elementwise unary -----

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.node(x).value.iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(op, shape, value, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| c * v, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Clamps into `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Same value, no gradient through the result.
    pub fn detach(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(Op::Detach, shape, value, false)
    }

    // ----- reductions -----

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Op::Sum(x), vec![1], vec![s], rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Op::Mean(x), vec![1], vec![m], rg)
    }

    /// Population variance over all elements.
    pub fn variance(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|&x| (x - m) * (x - m)).sum::<f64>() / n;
        let rg = self.rg(x);
        self.push(Op::Variance(x), vec![1], vec![var], rg)
    }

    /// Softmax along the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().expect("non-empty shape");
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                z += *e;
            }
            row.iter_mut().for_each(|e| *e /= z);
        }
        let rg = self.rg(x);
        self.push(Op::Softmax(x), shape, value, rg)
    }

    // ----- shape ops -----

    /// Swaps the last two dimensions (2-D or batched 3-D).
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 && shape.len() != 3 {
            return Err(Error::shape(format!("transpose: rank-2/3 only, got {shape:?}")));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let value = transpose_blocks(self.value(x), r, c);
        let mut out_shape = shape.clone();
        let k = out_shape.len();
        out_shape.swap(k - 2, k - 1);
        let rg = self.rg(x);
        Ok(self.push(Op::Transpose(x), out_shape, value, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        validate_shape(&shape)?;
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(format!(
                "reshape: {:?} -> {shape:?} changes element count",
                self.shape(x)
            )));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape(x), shape, value, rg))
    }

    /// Matrix product of `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut value = vec![0.0; m * n];
        gemm(self.value(a), self.value(b), &mut value, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::MatMul(a, b), vec![m, n], value, rg))
    }

    /// Batched product of `[B, m, k] x [B, k, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape(format!("batch_matmul: {sa:?} x {sb:?}")));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut value = vec![0.0; bsz * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..bsz {
            gemm(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                &mut value[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::BatchMatMul(a, b), vec![bsz, m, n], value, rg))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape(format!("embedding table must be 2-D, got {shape:?}")));
        }
        let (vocab, d) = (shape[0], shape[1]);
        if ids.is_empty() {
            return Err(Error::Input("embedding: empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!(
                "token id {bad} out of range for vocabulary of {vocab}"
            )));
        }
        let tv = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            value.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            vec![ids.len(), d],
            value,
            rg,
        ))
    }

    /// One element of `x` as a `[1]` node.
    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = self.value(x);
        if index >= v.len() {
            return Err(Error::shape(format!(
                "select: index {index} out of {} elements",
                v.len()
            )));
        }
        let value = vec![v[index]];
        let rg = self.rg(x);
        Ok(self.push(Op::Select { input: x, index }, vec![1], value, rg))
    }

    // ----- fused ops -----

    /// Row-wise `h / max(var(h), VARIANCE_FLOOR)` over the last dimension.
    ///
    /// Divides by the variance itself, not the standard deviation, and does
    /// not subtract the mean from the numerator.
    pub fn var_normalize(&mut self, h: Var) -> Var {
        let shape = self.shape(h).to_vec();
        let cols = *shape.last().expect("non-empty shape");
        let hv = self.value(h);
        let rows = hv.len() / cols;
        let mut value = Vec::with_capacity(hv.len());
        let mut denom = Vec::with_capacity(rows);
        let mut clamped = Vec::with_capacity(rows);
        for row in hv.chunks(cols) {
            let (_, var) = row_stats(row);
            let c = var < VARIANCE_FLOOR;
            let den = if c { VARIANCE_FLOOR } else { var };
            value.extend(row.iter().map(|&x| x / den));
            denom.push(den);
            clamped.push(c);
        }
        let rg = self.rg(h);
        self.push(
            Op::VarNormalize {
                input: h,
                denom,
                clamped,
            },
            shape,
            value,
            rg,
        )
    }

    /// `var_normalize(h) * s + b` with `s`, `b` broadcast over rows.
    pub fn layernorm_scale(&mut self, h: Var, s: Var, b: Var) -> Result<Var> {
        let n = self.var_normalize(h);
        let scaled = self.mul(n, s)?;
        self.add(scaled, b)
    }

    /// Mean cross-entropy of row-wise logits `[N, V]` against target ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(format!(
                "cross_entropy: logits {shape:?} vs {} targets",
                targets.len()
            )));
        }
        let v = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!("target id {bad} out of range {v}")));
        }
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(lv.len());
        let mut loss = 0.0;
        for (row, &t) in lv.chunks(v).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        loss /= targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
            rg,
        ))
    }

    // ----- backward -----

    /// Reverse sweep from a scalar `loss`, filling gradients of every node that
    /// requires grad. Shared subexpressions accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                self.nodes[idx].grad = Some(g);
                continue;
            }
            let contributions = self.input_grads(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (input, ig) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut self.nodes[input.0].grad {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn input_grads(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::with_capacity(2);

        match &node.op {
            Op::Leaf | Op::Detach => {}
            &Op::Add(a, b, bc) | &Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if needs(a) {
                    out.push((a, g.to_vec()));
                }
                if needs(b) {
                    let gb: Vec<f64> = g.iter().map(|&x| sign * x).collect();
                    out.push((b, reduce_broadcast(&gb, bc, val(b).len())));
                }
            }
            &Op::Mul(a, b, bc) => {
                let (va, vb) = (val(a), val(b));
                if needs(a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * vb[bidx(i, bc)])
                        .collect();
                    out.push((a, ga));
                }
                if needs(b) {
                    let gb: Vec<f64> = g.iter().zip(va).map(|(&x, &av)| x * av).collect();
                    out.push((b, reduce_broadcast(&gb, bc, vb.len())));
                }
            }
            &Op::Div(a, b, bc) => {
                let (va, vb) = (val(a), val(b));
                if needs(a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x / vb[bidx(i, bc)])
                        .collect();
                    out.push((a, ga));
                }
                if needs(b) {
                    let gb: Vec<f64> = g
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| {
                            let d = vb[bidx(i, bc)];
                            -x * va[i] / (d * d)
                        })
                        .collect();
                    out.push((b, reduce_broadcast(&gb, bc, vb.len())));
                }
            }
            &Op::Scale(x, c) => out.push((x, g.iter().map(|&v| c * v).collect())),
            &Op::AddScalar(x) => out.push((x, g.to_vec())),
            &Op::Exp(x) => out.push((x, g.iter().zip(y).map(|(&a, &b)| a * b).collect())),
            &Op::Log(x) => out.push((x, g.iter().zip(val(x)).map(|(&a, &b)| a / b).collect())),
            &Op::Relu(x) => out.push((
                x,
                g.iter()
                    .zip(val(x))
                    .map(|(&a, &b)| if b > 0.0 { a } else { 0.0 })
                    .collect(),
            )),
            &Op::Sigmoid(x) => out.push((
                x,
                g.iter().zip(y).map(|(&a, &s)| a * s * (1.0 - s)).collect(),
            )),
            &Op::Clamp(x, lo, hi) => out.push((
                x,
                g.iter()
                    .zip(val(x))
                    .map(|(&a, &b)| if (lo..=hi).contains(&b) { a } else { 0.0 })
                    .collect(),
            )),
            &Op::Softmax(x) => {
                let cols = *node.shape.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out_r) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, &gi), &yi) in out_r.iter_mut().zip(gr).zip(yr) {
                        *o = yi * (gi - dot);
                    }
                }
                out.push((x, gx));
            }
            &Op::Sum(x) => out.push((x, vec![g[0]; val(x).len()])),
            &Op::Mean(x) => {
                let n = val(x).len();
                out.push((x, vec![g[0] / n as f64; n]));
            }
            &Op::Variance(x) => {
                let xv = val(x);
                let n = xv.len() as f64;
                let m = xv.iter().sum::<f64>() / n;
                out.push((x, xv.iter().map(|&v| g[0] * 2.0 * (v - m) / n).collect()));
            }
            &Op::Transpose(x) => {
                let s = &node.shape;
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                out.push((x, transpose_blocks(g, r, c)));
            }
            &Op::Reshape(x) => out.push((x, g.to_vec())),
            &Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g, val(b), &mut ga, m, n, k);
                    out.push((a, ga));
                }
                if needs(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(val(a), g, &mut gb, m, k, n);
                    out.push((b, gb));
                }
            }
            &Op::BatchMatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (val(a), val(b));
                if needs(a) {
                    let mut ga = vec![0.0; bsz * m * k];
                    for i in 0..bsz {
                        gemm_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    out.push((a, ga));
                }
                if needs(b) {
                    let mut gb = vec![0.0; bsz * k * n];
                    for i in 0..bsz {
                        gemm_tn(
                            &va[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    out.push((b, gb));
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.nodes[table.0].shape[1];
                let mut gt = vec![0.0; val(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                out.push((*table, gt));
            }
            &Op::Select { input, index } => {
                let mut gi = vec![0.0; val(input).len()];
                gi[index] = g[0];
                out.push((input, gi));
            }
            Op::VarNormalize {
                input,
                denom,
                clamped,
            } => {
                let cols = *node.shape.last().unwrap();
                let hv = val(*input);
                let mut gh = vec![0.0; hv.len()];
                for (r, ((hr, gr), ghr)) in hv
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(gh.chunks_mut(cols))
                    .enumerate()
                {
                    let den = denom[r];
                    for (o, &gi) in ghr.iter_mut().zip(gr) {
                        *o = gi / den;
                    }
                    if !clamped[r] {
                        // d(var)/dh_k = 2 (h_k - mean) / cols
                        let (mean, _) = row_stats(hr);
                        let gh_dot: f64 = gr.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let coef = -gh_dot / (den * den) * 2.0 / cols as f64;
                        for (o, &h) in ghr.iter_mut().zip(hr) {
                            *o += coef * (h - mean);
                        }
                    }
                }
                out.push((*input, gh));
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.nodes[logits.0].shape[1];
                let scale = g[0] / targets.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * v + t] -= scale;
                }
                out.push((*logits, gl));
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn bidx(i: usize, bc: Bcast) -> usize {
    match bc {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Trailing(n) => i % n,
    }
}

fn reduce_broadcast(g: &[f64], bc: Bcast, len: usize) -> Vec<f64> {
    match bc {
        Bcast::Same => g.to_vec(),
        Bcast::Scalar => vec![g.iter().sum()],
        Bcast::Trailing(n) => {
            debug_assert_eq!(n, len);
            let mut out = vec![0.0; n];
            for blk in g.chunks(n) {
                out.iter_mut().zip(blk).for_each(|(o, x)| *o += x);
            }
            out
        }
    }
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

fn transpose_blocks(v: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (src, dst) in v.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

/// `c += a[m,k] * b[k,n]`
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c += g[m,n] * b[k,n]^T`, giving `[m,k]`.
fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            c[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c += a[m,k]^T * g[m,n]`, giving `[k,n]`.
fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += aip * gv;
            }
        }
    }
}
