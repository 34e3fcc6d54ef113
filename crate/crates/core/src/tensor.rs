//! Dense f64 tensors with a reverse-mode tape.
//!
//! A [`Tape`] owns every intermediate value of one forward computation.
//! Operations return [`Var`] handles; `backward` (scalar root) or
//! `backward_seeded` (explicit output gradients) fills the gradient
//! buffers of all `requires_grad` leaves. Callers are responsible for
//! zeroing/collecting gradients between steps; repeated backward calls
//! accumulate.

use crate::error::{Result, SudaError};

/// Plain shaped value, row-major contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(SudaError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} wants {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// matrix [m,n] + row bias [n]
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    /// x: [C, T], slope: [C]
    Prelu(Var, Var),
    /// x: [C_in, T], w: [C_out, C_in, K], b: [C_out]
    Conv1d(Var, Var, Var),
    /// [C, T] -> [C]
    MeanTime(Var),
    /// [m, n] -> [n, m]
    Transpose(Var),
    /// [m, n] -> [1, n]
    Row(Var, usize),
    /// [m, n] -> [m, hi-lo], column range
    Cols(Var, usize, usize),
    /// k rows of [1, n] -> [k, n]
    ConcatRows(Vec<Var>),
    SumAll(Var),
    /// vector [n] -> log-softmax [n]
    LogSoftmax(Var),
    /// w: [n_out, n_in], x: [n_in], b: [n_out] -> [n_out]
    AffineVec(Var, Var, Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Computation tape; owns all nodes of one graph.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    // sign-split form avoids overflow of exp for large |x|; the clamps keep
    // the output strictly inside (0,1) even where exp saturates
    if x >= 0.0 {
        (1.0 / (1.0 + (-x).exp())).min(1.0 - f64::EPSILON / 2.0)
    } else {
        let e = x.exp();
        (e / (1.0 + e)).max(f64::MIN_POSITIVE)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of a node, if backward has populated it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self, v: Var) {
        if let Some(g) = self.nodes[v.0].grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let grad = if requires_grad {
            Some(vec![0.0; value.numel()])
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            grad,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn child(&mut self, value: Tensor, parents: &[Var], op: Op) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(value, rg, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(SudaError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", sa, sb),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let da = &self.nodes[a.0].value.data;
            let db = &self.nodes[b.0].value.data;
            for i in 0..m {
                for p in 0..k {
                    let av = da[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &db[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += av * brow[j];
                    }
                }
            }
        }
        let t = Tensor {
            shape: vec![m, n],
            data: out,
        };
        Ok(self.child(t, &[a, b], Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise2(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise2(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ewise2(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn ewise2(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(SudaError::ShapeMismatch {
                op: name,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let data: Vec<f64> = self.nodes[a.0]
            .value
            .data
            .iter()
            .zip(&self.nodes[b.0].value.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        Ok(self.child(t, &[a, b], op))
    }

    /// matrix [m, n] plus row vector [n], broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(SudaError::ShapeMismatch {
                op: "add_bias",
                detail: format!("{:?} + {:?}", sx, sb),
            });
        }
        let n = sx[1];
        let bd = self.nodes[b.0].value.data.clone();
        let data: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % n])
            .collect();
        let t = Tensor { shape: sx, data };
        Ok(self.child(t, &[x, b], Op::AddBias(x, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.0].value.data.iter().map(|&v| v * c).collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.child(t, &[x], Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.0].value.data.iter().map(|&v| v + c).collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.child(t, &[x], Op::AddScalar(x))
    }

    /// 1 - x, used for complement masks.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .map(|&v| stable_sigmoid(v))
            .collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.child(t, &[x], Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.0].value.data.iter().map(|&v| v.tanh()).collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.child(t, &[x], Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.nodes[x.0]
            .value
            .data
            .iter()
            .map(|&v| v.max(0.0))
            .collect();
        let t = Tensor {
            shape: self.shape(x).to_vec(),
            data,
        };
        self.child(t, &[x], Op::Relu(x))
    }

    /// PReLU over a [C, T] map with one learnable slope per channel.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let ss = self.shape(slope).to_vec();
        if sx.len() != 2 || ss.len() != 1 || ss[0] != sx[0] {
            return Err(SudaError::ShapeMismatch {
                op: "prelu",
                detail: format!("x {:?}, slope {:?}", sx, ss),
            });
        }
        let (c, t) = (sx[0], sx[1]);
        let sd = self.nodes[slope.0].value.data.clone();
        let mut data = vec![0.0; c * t];
        for ch in 0..c {
            let a = sd[ch];
            for j in 0..t {
                let v = self.nodes[x.0].value.data[ch * t + j];
                data[ch * t + j] = if v > 0.0 { v } else { a * v };
            }
        }
        let tns = Tensor { shape: sx, data };
        Ok(self.child(tns, &[x, slope], Op::Prelu(x, slope)))
    }

    /// Valid 1-D cross-correlation along time, stride 1, no padding.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 2 || sw.len() != 3 || sb.len() != 1 {
            return Err(SudaError::ShapeMismatch {
                op: "conv1d",
                detail: format!("x {:?}, w {:?}, b {:?}", sx, sw, sb),
            });
        }
        let (c_in, t) = (sx[0], sx[1]);
        let (c_out, wc_in, k) = (sw[0], sw[1], sw[2]);
        if wc_in != c_in || sb[0] != c_out {
            return Err(SudaError::ShapeMismatch {
                op: "conv1d",
                detail: format!("x {:?}, w {:?}, b {:?}", sx, sw, sb),
            });
        }
        if t < k {
            return Err(SudaError::UtteranceTooShort {
                needed: k,
                got: t,
                unit: "frames",
            });
        }
        let t_out = t - k + 1;
        let mut data = vec![0.0; c_out * t_out];
        {
            let xd = &self.nodes[x.0].value.data;
            let wd = &self.nodes[w.0].value.data;
            let bd = &self.nodes[b.0].value.data;
            for co in 0..c_out {
                let orow = &mut data[co * t_out..(co + 1) * t_out];
                orow.iter_mut().for_each(|v| *v = bd[co]);
                for ci in 0..c_in {
                    let xrow = &xd[ci * t..(ci + 1) * t];
                    let wrow = &wd[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                    for (tau, &wv) in wrow.iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        for j in 0..t_out {
                            orow[j] += wv * xrow[j + tau];
                        }
                    }
                }
            }
        }
        let tns = Tensor {
            shape: vec![c_out, t_out],
            data,
        };
        Ok(self.child(tns, &[x, w, b], Op::Conv1d(x, w, b)))
    }

    /// Mean along the time axis of a [C, T] map -> [C].
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(SudaError::ShapeMismatch {
                op: "mean_time",
                detail: format!("{:?}", sx),
            });
        }
        let (c, t) = (sx[0], sx[1]);
        if t == 0 {
            return Err(SudaError::EmptyInput("mean_time"));
        }
        let xd = &self.nodes[x.0].value.data;
        let data: Vec<f64> = (0..c)
            .map(|ch| xd[ch * t..(ch + 1) * t].iter().sum::<f64>() / t as f64)
            .collect();
        let tns = Tensor {
            shape: vec![c],
            data,
        };
        Ok(self.child(tns, &[x], Op::MeanTime(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(SudaError::ShapeMismatch {
                op: "transpose",
                detail: format!("{:?}", sx),
            });
        }
        let (m, n) = (sx[0], sx[1]);
        let xd = &self.nodes[x.0].value.data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xd[i * n + j];
            }
        }
        let tns = Tensor {
            shape: vec![n, m],
            data,
        };
        Ok(self.child(tns, &[x], Op::Transpose(x)))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || i >= sx[0] {
            return Err(SudaError::ShapeMismatch {
                op: "row",
                detail: format!("row {} of {:?}", i, sx),
            });
        }
        let n = sx[1];
        let data = self.nodes[x.0].value.data[i * n..(i + 1) * n].to_vec();
        let tns = Tensor {
            shape: vec![1, n],
            data,
        };
        Ok(self.child(tns, &[x], Op::Row(x, i)))
    }

    pub fn cols(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || lo >= hi || hi > sx[1] {
            return Err(SudaError::ShapeMismatch {
                op: "cols",
                detail: format!("cols {}..{} of {:?}", lo, hi, sx),
            });
        }
        let (m, n) = (sx[0], sx[1]);
        let w = hi - lo;
        let mut data = vec![0.0; m * w];
        for r in 0..m {
            data[r * w..(r + 1) * w]
                .copy_from_slice(&self.nodes[x.0].value.data[r * n + lo..r * n + hi]);
        }
        let tns = Tensor {
            shape: vec![m, w],
            data,
        };
        Ok(self.child(tns, &[x], Op::Cols(x, lo, hi)))
    }

    pub fn concat_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(SudaError::EmptyInput("concat_rows"));
        }
        let n = {
            let s = self.shape(rows[0]);
            if s.len() != 2 || s[0] != 1 {
                return Err(SudaError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("{:?}", s),
                });
            }
            s[1]
        };
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let s = self.shape(r);
            if s != [1, n] {
                return Err(SudaError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("expected [1, {}], got {:?}", n, s),
                });
            }
            data.extend_from_slice(&self.nodes[r.0].value.data);
        }
        let tns = Tensor {
            shape: vec![rows.len(), n],
            data,
        };
        Ok(self.child(tns, rows, Op::ConcatRows(rows.to_vec())))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].value.data.iter().sum();
        self.child(Tensor::scalar(s), &[x], Op::SumAll(x))
    }

    /// Log-softmax over a 1-D vector.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 1 {
            return Err(SudaError::ShapeMismatch {
                op: "log_softmax",
                detail: format!("{:?}", sx),
            });
        }
        let xd = &self.nodes[x.0].value.data;
        let mx = xd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + xd.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
        let data: Vec<f64> = xd.iter().map(|&v| v - lse).collect();
        let tns = Tensor { shape: sx, data };
        Ok(self.child(tns, &[x], Op::LogSoftmax(x)))
    }

    /// w·x + b for vector x.
    pub fn affine_vec(&mut self, w: Var, x: Var, b: Var) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        if sw.len() != 2 || sx.len() != 1 || sb.len() != 1 || sw[1] != sx[0] || sw[0] != sb[0] {
            return Err(SudaError::ShapeMismatch {
                op: "affine_vec",
                detail: format!("w {:?}, x {:?}, b {:?}", sw, sx, sb),
            });
        }
        let (no, ni) = (sw[0], sw[1]);
        let wd = &self.nodes[w.0].value.data;
        let xd = &self.nodes[x.0].value.data;
        let bd = &self.nodes[b.0].value.data;
        let data: Vec<f64> = (0..no)
            .map(|i| {
                bd[i]
                    + wd[i * ni..(i + 1) * ni]
                        .iter()
                        .zip(xd)
                        .map(|(&a, &v)| a * v)
                        .sum::<f64>()
            })
            .collect();
        let tns = Tensor {
            shape: vec![no],
            data,
        };
        Ok(self.child(tns, &[w, x, b], Op::AffineVec(w, x, b)))
    }

    /// Backward from a scalar root with seed gradient 1.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.nodes[root.0].value.is_scalar() {
            return Err(SudaError::ShapeMismatch {
                op: "backward",
                detail: format!("root must be scalar, got {:?}", self.shape(root)),
            });
        }
        self.backward_seeded(&[(root, vec![1.0])])
    }

    /// Backward with explicit output gradients on several roots.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Vec<f64>)]) -> Result<()> {
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; n];
        for (v, g) in seeds {
            if g.len() != self.nodes[v.0].value.numel() {
                return Err(SudaError::ShapeMismatch {
                    op: "backward_seeded",
                    detail: format!(
                        "seed len {} vs value len {}",
                        g.len(),
                        self.nodes[v.0].value.numel()
                    ),
                });
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; g.len()]);
            for (a, b) in slot.iter_mut().zip(g) {
                *a += b;
            }
        }
        // nodes are created in topological order; reverse replay visits
        // each reachable node exactly once
        for i in (0..n).rev() {
            let Some(dy) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                if let Some(g) = self.nodes[i].grad.as_mut() {
                    for (a, b) in g.iter_mut().zip(&dy) {
                        *a += b;
                    }
                }
                continue;
            }
            self.propagate(i, &dy, &mut adj);
        }
        Ok(())
    }

    fn accum(&self, adj: &mut [Option<Vec<f64>>], v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let slot = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
        contrib(slot);
    }

    fn propagate(&mut self, i: usize, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        // split borrows: read values via raw indexing on an immutable view
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = {
                    let s = self.shape(*a);
                    (s[0], s[1])
                };
                let n = self.shape(*b)[1];
                let da = self.nodes[a.0].value.data.clone();
                let db = self.nodes[b.0].value.data.clone();
                self.accum(adj, *a, |ga| {
                    // dA = dC · Bᵀ
                    for r in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += dy[r * n + j] * db[p * n + j];
                            }
                            ga[r * k + p] += s;
                        }
                    }
                });
                self.accum(adj, *b, |gb| {
                    // dB = Aᵀ · dC
                    for p in 0..k {
                        for r in 0..m {
                            let av = da[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * dy[r * n + j];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accum(adj, *a, |g| {
                    for (x, d) in g.iter_mut().zip(dy) {
                        *x += d;
                    }
                });
                self.accum(adj, *b, |g| {
                    for (x, d) in g.iter_mut().zip(dy) {
                        *x += d;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accum(adj, *a, |g| {
                    for (x, d) in g.iter_mut().zip(dy) {
                        *x += d;
                    }
                });
                self.accum(adj, *b, |g| {
                    for (x, d) in g.iter_mut().zip(dy) {
                        *x -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let da = self.nodes[a.0].value.data.clone();
                let db = self.nodes[b.0].value.data.clone();
                self.accum(adj, *a, |g| {
                    for ((x, d), bv) in g.iter_mut().zip(dy).zip(&db) {
                        *x += d * bv;
                    }
                });
                self.accum(adj, *b, |g| {
                    for ((x, d), av) in g.iter_mut().zip(dy).zip(&da) {
                        *x += d * av;
                    }
                });
            }
            Op::AddBias(x, b) => {
                let n = self.shape(*b)[0];
                self.accum(adj, *x, |g| {
                    for (v, d) in g.iter_mut().zip(dy) {
                        *v += d;
                    }
                });
                self.accum(adj, *b, |g| {
                    for (idx, d) in dy.iter().enumerate() {
                        g[idx % n] += d;
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accum(adj, *x, |g| {
                    for (v, d) in g.iter_mut().zip(dy) {
                        *v += c * d;
                    }
                });
            }
            Op::AddScalar(x) => {
                self.accum(adj, *x, |g| {
                    for (v, d) in g.iter_mut().zip(dy) {
                        *v += d;
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data.clone();
                self.accum(adj, *x, |g| {
                    for ((v, d), yv) in g.iter_mut().zip(dy).zip(&y) {
                        *v += d * yv * (1.0 - yv);
                    }
                });
            }
            Op::Tanh(x) => {
                let y = self.nodes[i].value.data.clone();
                self.accum(adj, *x, |g| {
                    for ((v, d), yv) in g.iter_mut().zip(dy).zip(&y) {
                        *v += d * (1.0 - yv * yv);
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.nodes[x.0].value.data.clone();
                self.accum(adj, *x, |g| {
                    for ((v, d), xv) in g.iter_mut().zip(dy).zip(&xd) {
                        if *xv > 0.0 {
                            *v += d;
                        }
                    }
                });
            }
            Op::Prelu(x, slope) => {
                let sx = self.shape(*x).to_vec();
                let (c, t) = (sx[0], sx[1]);
                let xd = self.nodes[x.0].value.data.clone();
                let sd = self.nodes[slope.0].value.data.clone();
                self.accum(adj, *x, |g| {
                    for ch in 0..c {
                        for j in 0..t {
                            let xv = xd[ch * t + j];
                            let d = dy[ch * t + j];
                            g[ch * t + j] += if xv > 0.0 { d } else { sd[ch] * d };
                        }
                    }
                });
                self.accum(adj, *slope, |g| {
                    for ch in 0..c {
                        let mut s = 0.0;
                        for j in 0..t {
                            let xv = xd[ch * t + j];
                            if xv <= 0.0 {
                                s += xv * dy[ch * t + j];
                            }
                        }
                        g[ch] += s;
                    }
                });
            }
            Op::Conv1d(x, w, b) => {
                let sx = self.shape(*x).to_vec();
                let sw = self.shape(*w).to_vec();
                let (c_in, t) = (sx[0], sx[1]);
                let (c_out, k) = (sw[0], sw[2]);
                let t_out = t - k + 1;
                let xd = self.nodes[x.0].value.data.clone();
                let wd = self.nodes[w.0].value.data.clone();
                self.accum(adj, *x, |g| {
                    for co in 0..c_out {
                        let drow = &dy[co * t_out..(co + 1) * t_out];
                        for ci in 0..c_in {
                            let wrow = &wd[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
                            for (tau, &wv) in wrow.iter().enumerate() {
                                if wv == 0.0 {
                                    continue;
                                }
                                for j in 0..t_out {
                                    g[ci * t + j + tau] += wv * drow[j];
                                }
                            }
                        }
                    }
                });
                self.accum(adj, *w, |g| {
                    for co in 0..c_out {
                        let drow = &dy[co * t_out..(co + 1) * t_out];
                        for ci in 0..c_in {
                            let xrow = &xd[ci * t..(ci + 1) * t];
                            for tau in 0..k {
                                let mut s = 0.0;
                                for j in 0..t_out {
                                    s += drow[j] * xrow[j + tau];
                                }
                                g[(co * c_in + ci) * k + tau] += s;
                            }
                        }
                    }
                });
                self.accum(adj, *b, |g| {
                    for co in 0..c_out {
                        g[co] += dy[co * t_out..(co + 1) * t_out].iter().sum::<f64>();
                    }
                });
            }
            Op::MeanTime(x) => {
                let sx = self.shape(*x).to_vec();
                let (c, t) = (sx[0], sx[1]);
                let inv = 1.0 / t as f64;
                self.accum(adj, *x, |g| {
                    for ch in 0..c {
                        let d = dy[ch] * inv;
                        for j in 0..t {
                            g[ch * t + j] += d;
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let sx = self.shape(*x).to_vec();
                let (m, n) = (sx[0], sx[1]);
                self.accum(adj, *x, |g| {
                    for r in 0..m {
                        for c in 0..n {
                            g[r * n + c] += dy[c * m + r];
                        }
                    }
                });
            }
            Op::Row(x, r) => {
                let n = self.shape(*x)[1];
                let r = *r;
                self.accum(adj, *x, |g| {
                    for (j, d) in dy.iter().enumerate() {
                        g[r * n + j] += d;
                    }
                });
            }
            Op::Cols(x, lo, hi) => {
                let sx = self.shape(*x).to_vec();
                let (m, n) = (sx[0], sx[1]);
                let (lo, w) = (*lo, *hi - *lo);
                self.accum(adj, *x, |g| {
                    for r in 0..m {
                        for j in 0..w {
                            g[r * n + lo + j] += dy[r * w + j];
                        }
                    }
                });
            }
            Op::ConcatRows(rows) => {
                let n = self.shape(rows[0])[1];
                for (r, var) in rows.iter().enumerate() {
                    self.accum(adj, *var, |g| {
                        for j in 0..n {
                            g[j] += dy[r * n + j];
                        }
                    });
                }
            }
            Op::SumAll(x) => {
                let d = dy[0];
                self.accum(adj, *x, |g| {
                    for v in g.iter_mut() {
                        *v += d;
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = self.nodes[i].value.data.clone();
                let dsum: f64 = dy.iter().sum();
                self.accum(adj, *x, |g| {
                    for ((v, d), yv) in g.iter_mut().zip(dy).zip(&y) {
                        *v += d - yv.exp() * dsum;
                    }
                });
            }
            Op::AffineVec(w, x, b) => {
                let sw = self.shape(*w).to_vec();
                let (no, ni) = (sw[0], sw[1]);
                let wd = self.nodes[w.0].value.data.clone();
                let xd = self.nodes[x.0].value.data.clone();
                self.accum(adj, *w, |g| {
                    for o in 0..no {
                        for j in 0..ni {
                            g[o * ni + j] += dy[o] * xd[j];
                        }
                    }
                });
                self.accum(adj, *x, |g| {
                    for o in 0..no {
                        let d = dy[o];
                        if d == 0.0 {
                            continue;
                        }
                        for j in 0..ni {
                            g[j] += d * wd[o * ni + j];
                        }
                    }
                });
                self.accum(adj, *b, |g| {
                    for o in 0..no {
                        g[o] += dy[o];
                    }
                });
            }
        }
        self.nodes[i].op = op;
    }
}

/// LSTM weights for one layer, row-vector convention:
/// gates = x·w_x + h·w_h + b with gate order (input, forget, cell, output).
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b: Var,
}

/// One LSTM cell update.
pub fn lstm_step(
    tape: &mut Tape,
    x_t: Var,
    h_prev: Var,
    c_prev: Var,
    w: &LstmVars,
) -> Result<(Var, Var)> {
    let hidden = tape.shape(w.w_h)[0];
    let zx = tape.matmul(x_t, w.w_x)?;
    let zh = tape.matmul(h_prev, w.w_h)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_bias(z, w.b)?;
    let zi = tape.cols(z, 0, hidden)?;
    let zf = tape.cols(z, hidden, 2 * hidden)?;
    let zg = tape.cols(z, 2 * hidden, 3 * hidden)?;
    let zo = tape.cols(z, 3 * hidden, 4 * hidden)?;
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Run an LSTM over a [T, D] sequence, returning the [T, H] hidden states.
pub fn lstm_forward(tape: &mut Tape, xs: Var, w: &LstmVars) -> Result<Var> {
    let t_len = tape.shape(xs)[0];
    let hidden = tape.shape(w.w_h)[0];
    let mut h = tape.leaf(Tensor::zeros(vec![1, hidden]), false);
    let mut c = tape.leaf(Tensor::zeros(vec![1, hidden]), false);
    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x_t = tape.row(xs, t)?;
        let (h_t, c_t) = lstm_step(tape, x_t, h, c, w)?;
        h = h_t;
        c = c_t;
        rows.push(h);
    }
    tape.concat_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape, data).unwrap(), true)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Central finite differences of a scalar function of one leaf's data.
    fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        let mut buf = x.to_vec();
        for i in 0..x.len() {
            buf[i] = x[i] + h;
            let fp = f(&buf);
            buf[i] = x[i] - h;
            let fm = f(&buf);
            buf[i] = x[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity_and_small() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = leaf(&mut tape, vec![2, 1], vec![3.0, 4.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data, vec![3.0, 4.0]);

        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![1, 2], vec![1.0, 2.0]);
        let b = leaf(&mut tape, vec![2, 1], vec![3.0, 4.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data, vec![11.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut tape, vec![2, 2], vec![0.0; 4]);
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_grad_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ad = rand_vec(&mut rng, 12);
        let bd = rand_vec(&mut rng, 8);
        let mut tape = Tape::new();
        let a = leaf(&mut tape, vec![3, 4], ad.clone());
        let b = leaf(&mut tape, vec![4, 2], bd.clone());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum_all(c);
        tape.backward(s).unwrap();
        let ga = tape.grad(a).unwrap().to_vec();
        let bd2 = bd.clone();
        let fd = fd_grad(
            |x| {
                let mut t = Tape::new();
                let a = leaf(&mut t, vec![3, 4], x.to_vec());
                let b = leaf(&mut t, vec![4, 2], bd2.clone());
                let c = t.matmul(a, b).unwrap();
                { let s = t.sum_all(c); t.value(s).data[0] }
            },
            &ad,
            1e-5,
        );
        assert!(max_rel_err(&ga, &fd) < 1e-6);
        // gradient of sum w.r.t. a is the column-sums of b broadcast over rows
        for r in 0..3 {
            for k in 0..4 {
                let colsum: f64 = (0..2).map(|j| bd[k * 2 + j]).sum();
                assert!((ga[r * 4 + k] - colsum).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sigmoid_values() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3], vec![0.0, 3.0f64.ln(), -700.0]);
        let y = tape.sigmoid(x);
        let d = &tape.value(y).data;
        assert!((d[0] - 0.5).abs() < 1e-15);
        assert!((d[1] - 0.75).abs() < 1e-12);
        assert!(d[2] > 0.0 && d[2] <= 1e-300);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sigmoid_strictly_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xs: Vec<f64> = (0..1000).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![xs.len()], xs);
        let y = tape.sigmoid(x);
        assert!(tape.value(y).data.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn prelu_values_and_slope_grad() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 2], vec![2.0, -2.0]);
        let a = leaf(&mut tape, vec![1], vec![0.25]);
        let y = tape.prelu(x, a).unwrap();
        assert_eq!(tape.value(y).data, vec![2.0, -0.5]);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        // d/da at x=-2 with dy=1 is -2
        assert!((tape.grad(a).unwrap()[0] - (-2.0)).abs() < 1e-12);
        // positive passthrough for x >= 0
        assert_eq!(tape.grad(x).unwrap()[0], 1.0);
    }

    #[test]
    fn prelu_grad_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xd = rand_vec(&mut rng, 12);
        let sd = vec![0.25, 0.1, 0.5];
        let loss = |xv: &[f64], sv: &[f64]| {
            let mut t = Tape::new();
            let x = leaf(&mut t, vec![3, 4], xv.to_vec());
            let a = leaf(&mut t, vec![3], sv.to_vec());
            let y = t.prelu(x, a).unwrap();
            { let s = t.sum_all(y); t.value(s).data[0] }
        };
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![3, 4], xd.clone());
        let a = leaf(&mut tape, vec![3], sd.clone());
        let y = tape.prelu(x, a).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        let fd_x = fd_grad(|v| loss(v, &sd), &xd, 1e-5);
        let fd_a = fd_grad(|v| loss(&xd, v), &sd, 1e-5);
        assert!(max_rel_err(tape.grad(x).unwrap(), &fd_x) < 1e-6);
        assert!(max_rel_err(tape.grad(a).unwrap(), &fd_a) < 1e-6);
    }

    #[test]
    fn conv1d_shape_law_and_delta_kernel() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 100], (0..100).map(|i| i as f64).collect());
        let w = leaf(&mut tape, vec![1, 1, 5], vec![0.0, 0.0, 1.0, 0.0, 0.0]);
        let b = leaf(&mut tape, vec![1], vec![0.0]);
        let y = tape.conv1d(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[1, 96]);
        // delta kernel shifts by 2
        for j in 0..96 {
            assert_eq!(tape.value(y).data[j], (j + 2) as f64);
        }
    }

    #[test]
    fn conv1d_too_short() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![1, 4], vec![0.0; 4]);
        let w = leaf(&mut tape, vec![1, 1, 5], vec![0.0; 5]);
        let b = leaf(&mut tape, vec![1], vec![0.0]);
        assert!(matches!(
            tape.conv1d(x, w, b),
            Err(SudaError::UtteranceTooShort { .. })
        ));
    }

    #[test]
    fn conv1d_grad_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xd = rand_vec(&mut rng, 2 * 8);
        let wd = rand_vec(&mut rng, 3 * 2 * 5);
        let bd = rand_vec(&mut rng, 3);
        let loss = |xv: &[f64], wv: &[f64], bv: &[f64]| {
            let mut t = Tape::new();
            let x = leaf(&mut t, vec![2, 8], xv.to_vec());
            let w = leaf(&mut t, vec![3, 2, 5], wv.to_vec());
            let b = leaf(&mut t, vec![3], bv.to_vec());
            let y = t.conv1d(x, w, b).unwrap();
            { let s = t.sum_all(y); t.value(s).data[0] }
        };
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 8], xd.clone());
        let w = leaf(&mut tape, vec![3, 2, 5], wd.clone());
        let b = leaf(&mut tape, vec![3], bd.clone());
        let y = tape.conv1d(x, w, b).unwrap();
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert!(max_rel_err(tape.grad(x).unwrap(), &fd_grad(|v| loss(v, &wd, &bd), &xd, 1e-5)) < 1e-6);
        assert!(max_rel_err(tape.grad(w).unwrap(), &fd_grad(|v| loss(&xd, v, &bd), &wd, 1e-5)) < 1e-6);
        assert!(max_rel_err(tape.grad(b).unwrap(), &fd_grad(|v| loss(&xd, &wd, v), &bd, 1e-5)) < 1e-6);
    }

    #[test]
    fn mean_time_values_and_grad() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 3], vec![1.0, 2.0, 3.0, 5.0, 5.0, 5.0]);
        let y = tape.mean_time(x).unwrap();
        assert_eq!(tape.value(y).data, vec![2.0, 5.0]);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        for &g in tape.grad(x).unwrap() {
            assert!((g - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn backward_sum_gives_ones_and_accumulates() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let s = tape.sum_all(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn composite_sigmoid_matmul_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wd = rand_vec(&mut rng, 6);
        let xd = rand_vec(&mut rng, 3);
        let loss = |wv: &[f64]| {
            let mut t = Tape::new();
            let w = leaf(&mut t, vec![2, 3], wv.to_vec());
            let x = leaf(&mut t, vec![3, 1], xd.to_vec());
            let z = t.matmul(w, x).unwrap();
            let y = t.sigmoid(z);
            { let s = t.sum_all(y); t.value(s).data[0] }
        };
        let mut tape = Tape::new();
        let w = leaf(&mut tape, vec![2, 3], wd.clone());
        let x = leaf(&mut tape, vec![3, 1], xd.clone());
        let z = tape.matmul(w, x).unwrap();
        let y = tape.sigmoid(z);
        let s = tape.sum_all(y);
        tape.backward(s).unwrap();
        assert!(max_rel_err(tape.grad(w).unwrap(), &fd_grad(loss, &wd, 1e-5)) < 1e-6);
    }

    #[test]
    fn log_softmax_normalizes_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xd = rand_vec(&mut rng, 5);
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![5], xd.clone());
        let y = tape.log_softmax(x).unwrap();
        let lse: f64 = tape.value(y).data.iter().map(|v| v.exp()).sum();
        assert!((lse - 1.0).abs() < 1e-12);
        // grad of first component vs finite differences
        let mut seed = vec![0.0; 5];
        seed[0] = 1.0;
        tape.backward_seeded(&[(y, seed)]).unwrap();
        let fd = fd_grad(
            |v| {
                let mut t = Tape::new();
                let x = leaf(&mut t, vec![5], v.to_vec());
                let y = t.log_softmax(x).unwrap();
                t.value(y).data[0]
            },
            &xd,
            1e-5,
        );
        assert!(max_rel_err(tape.grad(x).unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn lstm_zero_weights_zero_states() {
        let (d, h) = (3, 4);
        let mut tape = Tape::new();
        let w = LstmVars {
            w_x: tape.leaf(Tensor::zeros(vec![d, 4 * h]), true),
            w_h: tape.leaf(Tensor::zeros(vec![h, 4 * h]), true),
            b: tape.leaf(Tensor::zeros(vec![4 * h]), true),
        };
        let xs = tape.leaf(
            Tensor::new(vec![5, d], vec![1.0; 5 * d]).unwrap(),
            false,
        );
        let hs = lstm_forward(&mut tape, xs, &w).unwrap();
        assert!(tape.value(hs).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_single_step_hand_formula() {
        // scalar sizes: d = h = 1, hand-set weights
        let (wxi, wxf, wxg, wxo) = (0.3, -0.2, 0.5, 0.1);
        let (whi, whf, whg, who) = (0.05, 0.4, -0.3, 0.2);
        let (bi, bf, bg, bo) = (0.01, 1.0, -0.02, 0.03);
        let x = 0.7;
        let (h0, c0) = (0.2, -0.1);
        let sig = stable_sigmoid;
        let i = sig(x * wxi + h0 * whi + bi);
        let f = sig(x * wxf + h0 * whf + bf);
        let g = (x * wxg + h0 * whg + bg).tanh();
        let o = sig(x * wxo + h0 * who + bo);
        let c1 = f * c0 + i * g;
        let h1 = o * c1.tanh();

        let mut tape = Tape::new();
        let w = LstmVars {
            w_x: leaf(&mut tape, vec![1, 4], vec![wxi, wxf, wxg, wxo]),
            w_h: leaf(&mut tape, vec![1, 4], vec![whi, whf, whg, who]),
            b: leaf(&mut tape, vec![4], vec![bi, bf, bg, bo]),
        };
        let x_t = leaf(&mut tape, vec![1, 1], vec![x]);
        let h_prev = leaf(&mut tape, vec![1, 1], vec![h0]);
        let c_prev = leaf(&mut tape, vec![1, 1], vec![c0]);
        let (h_t, c_t) = lstm_step(&mut tape, x_t, h_prev, c_prev, &w).unwrap();
        assert!((tape.value(h_t).data[0] - h1).abs() < 1e-12);
        assert!((tape.value(c_t).data[0] - c1).abs() < 1e-12);
    }

    #[test]
    fn lstm_grad_vs_finite_differences() {
        let (d, h, t_len) = (2, 3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let wxd = rand_vec(&mut rng, d * 4 * h);
        let whd = rand_vec(&mut rng, h * 4 * h);
        let bd = rand_vec(&mut rng, 4 * h);
        let xsd = rand_vec(&mut rng, t_len * d);
        let loss = |wx: &[f64], wh: &[f64], b: &[f64]| {
            let mut t = Tape::new();
            let w = LstmVars {
                w_x: leaf(&mut t, vec![d, 4 * h], wx.to_vec()),
                w_h: leaf(&mut t, vec![h, 4 * h], wh.to_vec()),
                b: leaf(&mut t, vec![4 * h], b.to_vec()),
            };
            let xs = t.leaf(Tensor::new(vec![t_len, d], xsd.clone()).unwrap(), false);
            let hs = lstm_forward(&mut t, xs, &w).unwrap();
            let last = t.row(hs, t_len - 1).unwrap();
            { let s = t.sum_all(last); t.value(s).data[0] }
        };
        let mut tape = Tape::new();
        let w = LstmVars {
            w_x: leaf(&mut tape, vec![d, 4 * h], wxd.clone()),
            w_h: leaf(&mut tape, vec![h, 4 * h], whd.clone()),
            b: leaf(&mut tape, vec![4 * h], bd.clone()),
        };
        let xs = tape.leaf(Tensor::new(vec![t_len, d], xsd.clone()).unwrap(), false);
        let hs = lstm_forward(&mut tape, xs, &w).unwrap();
        let last = tape.row(hs, t_len - 1).unwrap();
        let s = tape.sum_all(last);
        tape.backward(s).unwrap();
        assert!(max_rel_err(tape.grad(w.w_x).unwrap(), &fd_grad(|v| loss(v, &whd, &bd), &wxd, 1e-5)) < 1e-4);
        assert!(max_rel_err(tape.grad(w.w_h).unwrap(), &fd_grad(|v| loss(&wxd, v, &bd), &whd, 1e-5)) < 1e-4);
        assert!(max_rel_err(tape.grad(w.b).unwrap(), &fd_grad(|v| loss(&wxd, &whd, v), &bd, 1e-5)) < 1e-4);
    }

    #[test]
    fn forward_finite_on_finite_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xd = rand_vec(&mut rng, 8);
        let mut tape = Tape::new();
        let x = leaf(&mut tape, vec![2, 4], xd);
        let y = tape.sigmoid(x);
        let y = tape.tanh(y);
        let y = tape.transpose(y).unwrap();
        let y = tape.mean_time(y).unwrap();
        assert!(tape.value(y).all_finite());
    }
}
