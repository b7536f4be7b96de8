use super::kernels::{self, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::Tensor;
use crate::error::{Error, Result};

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

/// Lower clamp applied to a probability before taking its log.
pub const PROB_CLAMP: f64 = 1e-12;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        a: Var,
    },
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Sigmoid {
        a: Var,
    },
    Relu {
        a: Var,
    },
    SoftmaxRows {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1dSame {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    MeanRows {
        x: Var,
        weights: Vec<f64>,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Sum {
        a: Var,
    },
    Nll {
        probs: Var,
        gold: usize,
        clamped: bool,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation for reverse-mode differentiation.
///
/// One tape per forward pass. A tensor's `requires_grad` flag propagates
/// forward: an op's output requires grad iff any input does. `backward`
/// may be called once; a second call is an error.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
    clamp_events: usize,
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

    /// Number of `nll` evaluations whose probability hit [`PROB_CLAMP`].
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    /// Records a leaf that does not require grad.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf)
    }

    /// Records a leaf that requires grad.
    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(true);
        self.push(t, Op::Leaf)
    }

    /// Records a leaf, keeping the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn emit(&mut self, shape: Vec<usize>, data: Vec<f64>, inputs: &[Var], op: Op) -> Var {
        let mut t = Tensor::new(shape, data).expect("kernel produced consistent shape");
        t.set_requires_grad(inputs.iter().any(|&v| self.needs(v)));
        self.push(t, op)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.emit(vec![m, n], out, &[a, b], Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.emit(vec![c, r], out, &[a], Op::Transpose { a }))
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let (shape, out): (Vec<usize>, Vec<f64>) = if sa == sb {
            (sa, va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect())
        } else if vb.len() == 1 {
            (sa, va.iter().map(|&x| f(x, vb[0])).collect())
        } else if va.len() == 1 {
            (sb, vb.iter().map(|&y| f(va[0], y)).collect())
        } else {
            let op = match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::dim(op, &sa, &sb));
        };
        Ok(self.emit(shape, out, &[a, b], Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * c).collect();
        self.emit(t.shape().to_vec(), out, &[a], Op::Scale { a, c })
    }

    /// `c - a`, elementwise.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let k = self.constant(Tensor::scalar(c));
        self.binary(Binary::Sub, k, a).expect("scalar broadcast")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| kernels::sigmoid(x)).collect();
        self.emit(t.shape().to_vec(), out, &[a], Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| x.max(0.0)).collect();
        self.emit(t.shape().to_vec(), out, &[a], Op::Relu { a })
    }

    /// Softmax over the last axis of every row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            kernels::softmax_in_place(row);
        }
        self.emit(t.shape().to_vec(), out, &[a], Op::SoftmaxRows { a })
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer-norm eps must be > 0, got {eps}")));
        }
        let t = self.value(x);
        let d = t.last_dim();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::dim("layer_norm", t.shape(), self.shape(gamma)));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = t.rows();
        let mut xhat = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.emit(
            shape,
            out,
            &[x, gamma, beta],
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Cross-correlation along the sequence axis with "same" zero padding.
    ///
    /// `x: [seq, d_in]`, `kernel: [w, d_in, d_out]`, `bias: [d_out]`; `w` odd.
    pub fn conv1d_same(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (seq, d_in) = self.dims2(x, "conv1d_same")?;
        let (w, kd_in, d_out) = match *self.shape(kernel) {
            [w, i, o] => (w, i, o),
            ref s => return Err(Error::dim("conv1d_same", s, &[0, d_in, 0])),
        };
        if w % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width must be odd, got {w}")));
        }
        if kd_in != d_in || self.value(bias).numel() != d_out {
            return Err(Error::dim("conv1d_same", self.shape(x), self.shape(kernel)));
        }
        let pad = (w - 1) / 2;
        let (xv, kv, bv) = (self.value(x).data(), self.value(kernel).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(seq * d_out);
        for _ in 0..seq {
            out.extend_from_slice(bv);
        }
        for t in 0..seq {
            let out_row = &mut out[t * d_out..(t + 1) * d_out];
            for k in 0..w {
                let Some(src) = (t + k).checked_sub(pad).filter(|&s| s < seq) else {
                    continue;
                };
                let x_row = &xv[src * d_in..(src + 1) * d_in];
                let k_slab = &kv[k * d_in * d_out..(k + 1) * d_in * d_out];
                matmul_acc(x_row, k_slab, out_row, 1, d_in, d_out);
            }
        }
        Ok(self.emit(
            vec![seq, d_out],
            out,
            &[x, kernel, bias],
            Op::Conv1dSame { x, kernel, bias },
        ))
    }

    /// Mean over the rows of `x: [seq, d]` whose mask entry is nonzero.
    pub fn mean_rows(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let (seq, d) = self.dims2(x, "mean_rows")?;
        if mask.len() != seq {
            return Err(Error::dim("mean_rows", self.shape(x), &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m != 0.0).count();
        if count == 0 {
            return Err(Error::EmptyInput("mean_rows mask has no nonzero entry".into()));
        }
        let inv = 1.0 / count as f64;
        let weights: Vec<f64> = mask.iter().map(|&m| if m != 0.0 { inv } else { 0.0 }).collect();
        let xv = self.value(x).data();
        let mut out = vec![0.0; d];
        for (i, row) in xv.chunks(d).enumerate() {
            if weights[i] == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        Ok(self.emit(vec![d], out, &[x], Op::MeanRows { x, weights }))
    }

    /// Adds `bias: [d]` to every row of `x: [.., d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        let b = self.value(bias).data();
        if b.len() != d {
            return Err(Error::dim("add_bias", t.shape(), self.shape(bias)));
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let shape = t.shape().to_vec();
        Ok(self.emit(shape, out, &[x, bias], Op::AddBias { x, bias }))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::EmptyInput("concat_cols of zero tensors".into()))?;
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &c) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        Ok(self.emit(vec![rows, total], out, parts, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Embedding lookup: rows `ids` of `table: [V, d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::EmptyInput("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Data(format!("id {bad} out of range for table with {v} rows")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.emit(
            vec![ids.len(), d],
            out,
            &[table],
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let data = t.data().to_vec();
        Ok(self.emit(t.shape().to_vec(), data, &[a], Op::Reshape { a }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.emit(vec![1], vec![s], &[a], Op::Sum { a })
    }

    /// `-ln(max(probs[gold], PROB_CLAMP))`; `probs` holds one distribution.
    pub fn nll(&mut self, probs: Var, gold: usize) -> Result<Var> {
        let p = self.value(probs).data();
        if gold >= p.len() {
            return Err(Error::Contract(format!(
                "gold class {gold} out of range for {} classes",
                p.len()
            )));
        }
        let pg = p[gold];
        let clamped = pg < PROB_CLAMP;
        if clamped {
            self.clamp_events += 1;
        }
        let loss = -pg.max(PROB_CLAMP).ln();
        Ok(self.emit(vec![1], vec![loss], &[probs], Op::Nll { probs, gold, clamped }))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Autograd("backward already ran on this tape".into()));
        }
        self.backward_done = true;
        if self.value(out).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        if !self.needs(out) {
            return Ok(());
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..=out.0).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            self.nodes[idx].value.set_grad(g);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let needs = |v: Var| self.needs(v);
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                grads[v.0].get_or_insert_with(|| vec![0.0; self.value(v).numel()])
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if needs(*a) {
                    matmul_nt_acc(g, self.value(*b).data(), slot!(*a), m, k, n);
                }
                if needs(*b) {
                    matmul_tn_acc(self.value(*a).data(), g, slot!(*b), m, k, n);
                }
            }
            Op::Transpose { a } => {
                if needs(*a) {
                    let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let ga = slot!(*a);
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Binary { kind, a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let n = g.len();
                let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                for (operand, other, is_lhs) in [(*a, vb, true), (*b, va, false)] {
                    if !needs(operand) {
                        continue;
                    }
                    let go = slot!(operand);
                    let broadcast = go.len() == 1 && n != 1;
                    for i in 0..n {
                        let d = match kind {
                            Binary::Add => g[i],
                            Binary::Sub if is_lhs => g[i],
                            Binary::Sub => -g[i],
                            Binary::Mul => g[i] * at(other, i),
                        };
                        if broadcast {
                            go[0] += d;
                        } else {
                            go[i] += d;
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                if needs(*a) {
                    for (o, gv) in slot!(*a).iter_mut().zip(g) {
                        *o += c * gv;
                    }
                }
            }
            Op::Sigmoid { a } => {
                if needs(*a) {
                    for ((o, gv), yv) in slot!(*a).iter_mut().zip(g).zip(y) {
                        *o += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Relu { a } => {
                if needs(*a) {
                    let x = self.value(*a).data();
                    for ((o, gv), xv) in slot!(*a).iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                if needs(*a) {
                    let d = node.value.last_dim();
                    let ga = slot!(*a);
                    for ((gr, yr), or) in g.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for ((o, gv), yv) in or.iter_mut().zip(gr).zip(yr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.last_dim();
                let gam = self.value(*gamma).data();
                if needs(*x) {
                    let gx = slot!(*x);
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
                if needs(*gamma) {
                    let gg = slot!(*gamma);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((o, gv), hv) in gg.iter_mut().zip(gr).zip(hr) {
                            *o += gv * hv;
                        }
                    }
                }
                if needs(*beta) {
                    let gb = slot!(*beta);
                    for gr in g.chunks(d) {
                        for (o, gv) in gb.iter_mut().zip(gr) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Conv1dSame { x, kernel, bias } => {
                let (seq, d_in) = (self.shape(*x)[0], self.shape(*x)[1]);
                let w = self.shape(*kernel)[0];
                let d_out = node.value.last_dim();
                let pad = (w - 1) / 2;
                let (xv, kv) = (self.value(*x).data(), self.value(*kernel).data());
                let taps = |t: usize, k: usize| (t + k).checked_sub(pad).filter(|&s| s < seq);
                if needs(*x) {
                    let gx = slot!(*x);
                    for t in 0..seq {
                        let g_row = &g[t * d_out..(t + 1) * d_out];
                        for k in 0..w {
                            let Some(src) = taps(t, k) else { continue };
                            let k_slab = &kv[k * d_in * d_out..(k + 1) * d_in * d_out];
                            matmul_nt_acc(g_row, k_slab, &mut gx[src * d_in..(src + 1) * d_in], 1, d_in, d_out);
                        }
                    }
                }
                if needs(*kernel) {
                    let gk = slot!(*kernel);
                    for t in 0..seq {
                        let g_row = &g[t * d_out..(t + 1) * d_out];
                        for k in 0..w {
                            let Some(src) = taps(t, k) else { continue };
                            let x_row = &xv[src * d_in..(src + 1) * d_in];
                            let slab = &mut gk[k * d_in * d_out..(k + 1) * d_in * d_out];
                            matmul_tn_acc(x_row, g_row, slab, 1, d_in, d_out);
                        }
                    }
                }
                if needs(*bias) {
                    let gb = slot!(*bias);
                    for g_row in g.chunks(d_out) {
                        for (o, gv) in gb.iter_mut().zip(g_row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::MeanRows { x, weights } => {
                if needs(*x) {
                    let d = g.len();
                    let gx = slot!(*x);
                    for (i, &wt) in weights.iter().enumerate() {
                        if wt == 0.0 {
                            continue;
                        }
                        for (o, gv) in gx[i * d..(i + 1) * d].iter_mut().zip(g) {
                            *o += wt * gv;
                        }
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if needs(*x) {
                    for (o, gv) in slot!(*x).iter_mut().zip(g) {
                        *o += gv;
                    }
                }
                if needs(*bias) {
                    let gb = slot!(*bias);
                    for g_row in g.chunks(gb.len()) {
                        for (o, gv) in gb.iter_mut().zip(g_row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if needs(p) {
                        let gp = slot!(p);
                        for i in 0..rows {
                            for j in 0..c {
                                gp[i * c + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::GatherRows { table, ids } => {
                if needs(*table) {
                    let d = node.value.last_dim();
                    let gt = slot!(*table);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, gv) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if needs(*a) {
                    for (o, gv) in slot!(*a).iter_mut().zip(g) {
                        *o += gv;
                    }
                }
            }
            Op::Sum { a } => {
                if needs(*a) {
                    for o in slot!(*a).iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Nll { probs, gold, clamped } => {
                if needs(*probs) && !clamped {
                    let p = self.value(*probs).data()[*gold];
                    slot!(*probs)[*gold] -= g[0] / p;
                }
            }
        }
    }
}
