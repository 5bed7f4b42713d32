//! Minimal tape-based reverse-mode automatic differentiation over 64-bit
//! dense matrices. The op set is exactly what the trajectory encoder and the
//! toy contrastive trainer need: dense linear algebra, strided convolution,
//! bilinear resizing, rotary rotation, softmax/log-sum-exp, and row
//! normalization. Forward values are computed eagerly; `backward` replays
//! the tape in reverse.

use crate::error::{Error, Result};

/// Dense row-major matrix of f64. Vectors are (1, d) rows; scalars (1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Config(format!(
                "tensor data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

/// Base for rotary frequencies, matching the usual transformer convention.
pub const ROTARY_BASE: f64 = 10000.0;

const BASE_10000: f64 = ROTARY_BASE;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// (n,d) + (1,d) broadcast over rows.
    AddRowBroadcast,
    /// (n,m) + (n,1) broadcast over columns.
    AddColBroadcast,
    /// elementwise multiply by a (1,1) scalar node.
    MulScalar,
    Recip,
    MatMul,
    Transpose,
    Silu,
    SoftmaxRows,
    LogSumExpRows,
    TakeDiag,
    MeanAll,
    MeanRows,
    ConcatRows,
    ConcatCols,
    SliceCols {
        start: usize,
        len: usize,
    },
    /// input (c_in, h*w), weight (c_out, c_in*k*k), output (c_out, oh*ow)
    Conv2d {
        in_c: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    },
    /// (c, src*src) -> (c, dst*dst), half-pixel-center bilinear sampling
    BilinearResize {
        src: usize,
        dst: usize,
    },
    /// rotate each row's (2j, 2j+1) pairs by positions[row] * theta_j
    Rotary {
        positions: Vec<usize>,
    },
    L2NormalizeRows,
    /// rows gathered from an embedding table (parent) by token id
    EmbedRows {
        ids: Vec<usize>,
    },
}

struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Tensor,
}

/// Index of a node on a tape.
pub type Var = usize;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[inline]
fn conv_out_side(side: usize, k: usize, stride: usize, pad: usize) -> usize {
    (side + 2 * pad - k) / stride + 1
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn rotary_theta(d: usize, j: usize) -> f64 {
    BASE_10000.powf(-((2 * j) as f64) / d as f64)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v].value
    }

    fn push(&mut self, op: Op, parents: Vec<usize>, value: Tensor) -> Var {
        self.nodes.push(Node { op, parents, value });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, vec![], value)
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::DimensionMismatch(ta.rows, ta.cols, tb.rows, tb.cols));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let v = Tensor { rows: ta.rows, cols: ta.cols, data };
        Ok(self.push(Op::Add, vec![a, b], v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let v = Tensor { rows: ta.rows, cols: ta.cols, data };
        Ok(self.push(Op::Sub, vec![a, b], v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let v = Tensor { rows: ta.rows, cols: ta.cols, data };
        Ok(self.push(Op::Mul, vec![a, b], v))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| x * c).collect();
        let v = Tensor { rows: ta.rows, cols: ta.cols, data };
        self.push(Op::Scale(c), vec![a], v)
    }

    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows != 1 || tb.cols != ta.cols {
            return Err(Error::DimensionMismatch(ta.rows, ta.cols, tb.rows, tb.cols));
        }
        let mut data = ta.data.clone();
        for r in 0..ta.rows {
            for c in 0..ta.cols {
                data[r * ta.cols + c] += tb.data[c];
            }
        }
        let v = Tensor { rows: ta.rows, cols: ta.cols, data };
        Ok(self.push(Op::AddRowBroadcast, vec![a, b], v))
    }

    pub fn add_col_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.cols != 1 || tb.rows != ta.rows {
            return Err(Error::DimensionMismatch(ta.rows, ta.cols, tb.rows, tb.cols));
        }
        let mut data = ta.data.clone();
        for r in 0..ta.rows {
            for c in 0..ta.cols {
                data[r * ta.cols + c] += tb.data[r];
            }
        }
        let v = Tensor { rows: ta.rows, cols: ta.cols, data };
        Ok(self.push(Op::AddColBroadcast, vec![a, b], v))
    }

    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ta, ts) = (self.value(a), self.value(s));
        if ts.shape() != (1, 1) {
            return Err(Error::DimensionMismatch(1, 1, ts.rows, ts.cols));
        }
        let sv = ts.data[0];
        let data = ta.data.iter().map(|x| x * sv).collect();
        let v = Tensor { rows: ta.rows, cols: ta.cols, data };
        Ok(self.push(Op::MulScalar, vec![a, s], v))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|x| 1.0 / x).collect();
        let v = Tensor { rows: ta.rows, cols: ta.cols, data };
        self.push(Op::Recip, vec![a], v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(Error::DimensionMismatch(ta.rows, ta.cols, tb.rows, tb.cols));
        }
        let (n, k, m) = (ta.rows, ta.cols, tb.cols);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for l in 0..k {
                let av = ta.data[i * k + l];
                if av == 0.0 {
                    continue;
                }
                for j in 0..m {
                    data[i * m + j] += av * tb.data[l * m + j];
                }
            }
        }
        let v = Tensor { rows: n, cols: m, data };
        Ok(self.push(Op::MatMul, vec![a, b], v))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (n, m) = ta.shape();
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            for c in 0..m {
                data[c * n + r] = ta.data[r * m + c];
            }
        }
        let v = Tensor { rows: m, cols: n, data };
        self.push(Op::Transpose, vec![a], v)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta.data.iter().map(|&x| x * sigmoid(x)).collect();
        let v = Tensor { rows: ta.rows, cols: ta.cols, data };
        self.push(Op::Silu, vec![a], v)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (n, m) = ta.shape();
        let mut data = vec![0.0; n * m];
        for r in 0..n {
            let row = &ta.data[r * m..(r + 1) * m];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..m {
                let e = (row[c] - mx).exp();
                data[r * m + c] = e;
                sum += e;
            }
            for c in 0..m {
                data[r * m + c] /= sum;
            }
        }
        let v = Tensor { rows: n, cols: m, data };
        self.push(Op::SoftmaxRows, vec![a], v)
    }

    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (n, m) = ta.shape();
        let mut data = vec![0.0; n];
        for (out, row) in data.iter_mut().zip(ta.data.chunks(m)) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&x| (x - mx).exp()).sum();
            *out = mx + s.ln();
        }
        let v = Tensor { rows: n, cols: 1, data };
        self.push(Op::LogSumExpRows, vec![a], v)
    }

    pub fn take_diag(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows != ta.cols {
            return Err(Error::DimensionMismatch(ta.rows, ta.rows, ta.rows, ta.cols));
        }
        let n = ta.rows;
        let data = (0..n).map(|i| ta.data[i * n + i]).collect();
        let v = Tensor { rows: n, cols: 1, data };
        Ok(self.push(Op::TakeDiag, vec![a], v))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let m = ta.data.iter().sum::<f64>() / ta.data.len() as f64;
        self.push(Op::MeanAll, vec![a], Tensor::scalar(m))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (n, m) = ta.shape();
        let mut data = vec![0.0; m];
        for row in ta.data.chunks(m) {
            for (acc, &x) in data.iter_mut().zip(row) {
                *acc += x;
            }
        }
        for v in &mut data {
            *v /= n as f64;
        }
        let v = Tensor { rows: 1, cols: m, data };
        self.push(Op::MeanRows, vec![a], v)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero parts".into()));
        }
        let cols = self.value(parts[0]).cols;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols != cols {
                return Err(Error::DimensionMismatch(rows, cols, t.rows, t.cols));
            }
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        let v = Tensor { rows, cols, data };
        Ok(self.push(Op::ConcatRows, parts.to_vec(), v))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero parts".into()));
        }
        let rows = self.value(parts[0]).rows;
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows != rows {
                return Err(Error::DimensionMismatch(rows, cols, t.rows, t.cols));
            }
            cols += t.cols;
        }
        let mut data = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in parts {
            let t = self.value(p).clone();
            for r in 0..rows {
                data[r * cols + off..r * cols + off + t.cols]
                    .copy_from_slice(&t.data[r * t.cols..(r + 1) * t.cols]);
            }
            off += t.cols;
        }
        let v = Tensor { rows, cols, data };
        Ok(self.push(Op::ConcatCols, parts.to_vec(), v))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        let (n, m) = ta.shape();
        if start + len > m {
            return Err(Error::Config(format!(
                "column slice [{start},{}) exceeds width {m}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&ta.data[r * m + start..r * m + start + len]);
        }
        let v = Tensor { rows: n, cols: len, data };
        Ok(self.push(Op::SliceCols { start, len }, vec![a], v))
    }

    /// 2D convolution with zero padding. `a` is (in_c, h*w); `weight` is
    /// (out_c, in_c*k*k); output is (out_c, oh*ow).
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        &mut self,
        a: Var,
        weight: Var,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(weight));
        let in_c = ta.rows;
        if ta.cols != h * w {
            return Err(Error::DimensionMismatch(in_c, h * w, ta.rows, ta.cols));
        }
        if tw.cols != in_c * k * k {
            return Err(Error::DimensionMismatch(tw.rows, in_c * k * k, tw.rows, tw.cols));
        }
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::Config("invalid convolution geometry".into()));
        }
        let out_c = tw.rows;
        let oh = conv_out_side(h, k, stride, pad);
        let ow = conv_out_side(w, k, stride, pad);
        let mut data = vec![0.0; out_c * oh * ow];
        for o in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..in_c {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                acc += tw.data[o * in_c * k * k + c * k * k + ky * k + kx]
                                    * ta.data[c * h * w + iy as usize * w + ix as usize];
                            }
                        }
                    }
                    data[o * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        let v = Tensor { rows: out_c, cols: oh * ow, data };
        Ok(self.push(
            Op::Conv2d { in_c, h, w, k, stride, pad },
            vec![a, weight],
            v,
        ))
    }

    fn bilinear_taps(src: usize, dst: usize, j: usize) -> (usize, usize, f64) {
        // half-pixel-center sampling: dst center j+0.5 maps into src space
        let x = ((j as f64 + 0.5) * src as f64 / dst as f64 - 0.5)
            .clamp(0.0, (src - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(src - 1);
        (x0, x1, x - x0 as f64)
    }

    /// Bilinear resize of a square (c, src*src) map to (c, dst*dst).
    pub fn bilinear_resize(&mut self, a: Var, src: usize, dst: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.cols != src * src || src == 0 || dst == 0 {
            return Err(Error::DimensionMismatch(ta.rows, src * src, ta.rows, ta.cols));
        }
        let c = ta.rows;
        let mut data = vec![0.0; c * dst * dst];
        for ch in 0..c {
            for dy in 0..dst {
                let (y0, y1, fy) = Self::bilinear_taps(src, dst, dy);
                for dx in 0..dst {
                    let (x0, x1, fx) = Self::bilinear_taps(src, dst, dx);
                    let g = |y: usize, x: usize| ta.data[ch * src * src + y * src + x];
                    let v = g(y0, x0) * (1.0 - fy) * (1.0 - fx)
                        + g(y0, x1) * (1.0 - fy) * fx
                        + g(y1, x0) * fy * (1.0 - fx)
                        + g(y1, x1) * fy * fx;
                    data[ch * dst * dst + dy * dst + dx] = v;
                }
            }
        }
        let v = Tensor { rows: c, cols: dst * dst, data };
        Ok(self.push(Op::BilinearResize { src, dst }, vec![a], v))
    }

    /// Rotary rotation: row i's (2j, 2j+1) pairs rotate by positions[i]·θ_j
    /// with θ_j = 10000^(−2j/d).
    pub fn rotary(&mut self, a: Var, positions: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let (n, d) = ta.shape();
        if positions.len() != n {
            return Err(Error::Config(format!(
                "{} rotary positions for {n} rows",
                positions.len()
            )));
        }
        if d % 2 != 0 {
            return Err(Error::Config("rotary width must be even".into()));
        }
        let mut data = ta.data.clone();
        for (r, &p) in positions.iter().enumerate() {
            for j in 0..d / 2 {
                let ang = p as f64 * rotary_theta(d, j);
                let (s, c) = ang.sin_cos();
                let x0 = ta.data[r * d + 2 * j];
                let x1 = ta.data[r * d + 2 * j + 1];
                data[r * d + 2 * j] = x0 * c - x1 * s;
                data[r * d + 2 * j + 1] = x0 * s + x1 * c;
            }
        }
        let v = Tensor { rows: n, cols: d, data };
        Ok(self.push(
            Op::Rotary { positions: positions.to_vec() },
            vec![a],
            v,
        ))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (n, d) = ta.shape();
        let mut data = ta.data.clone();
        for r in 0..n {
            let norm = ta.data[r * d..(r + 1) * d]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(1e-12);
            for c in 0..d {
                data[r * d + c] /= norm;
            }
        }
        let v = Tensor { rows: n, cols: d, data };
        self.push(Op::L2NormalizeRows, vec![a], v)
    }

    /// Gather rows of an embedding table by token id.
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v_count, d) = tt.shape();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v_count {
                return Err(Error::Config(format!(
                    "token id {id} out of vocabulary of {v_count}"
                )));
            }
            data.extend_from_slice(&tt.data[id * d..(id + 1) * d]);
        }
        let v = Tensor { rows: ids.len(), cols: d, data };
        Ok(self.push(Op::EmbedRows { ids: ids.to_vec() }, vec![table], v))
    }

    /// x @ W + b for x (n,d_in), W (d_in,d_out), b (1,d_out).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_broadcast(y, b)
    }

    /// Reverse-mode sweep from a scalar root; returns one gradient tensor
    /// per tape node (zero for nodes the root does not depend on).
    pub fn backward(&self, root: Var) -> Result<Vec<Tensor>> {
        let rt = self.value(root);
        if rt.shape() != (1, 1) {
            return Err(Error::Config("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.rows, n.value.cols))
            .collect();
        grads[root].data[0] = 1.0;
        for i in (0..=root).rev() {
            if grads[i].data.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[i].clone();
            let node = &self.nodes[i];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::Add => {
                    for &p in &node.parents {
                        for (gd, gs) in grads[p].data.iter_mut().zip(&g.data) {
                            *gd += gs;
                        }
                    }
                }
                Op::Sub => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    for (gd, gs) in grads[a].data.iter_mut().zip(&g.data) {
                        *gd += gs;
                    }
                    for (gd, gs) in grads[b].data.iter_mut().zip(&g.data) {
                        *gd -= gs;
                    }
                }
                Op::Mul => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    let (va, vb) = (self.value(a).data.clone(), self.value(b).data.clone());
                    for (j, gs) in g.data.iter().enumerate() {
                        grads[a].data[j] += gs * vb[j];
                        grads[b].data[j] += gs * va[j];
                    }
                }
                Op::Scale(c) => {
                    let a = node.parents[0];
                    for (gd, gs) in grads[a].data.iter_mut().zip(&g.data) {
                        *gd += gs * c;
                    }
                }
                Op::AddRowBroadcast => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    for (gd, gs) in grads[a].data.iter_mut().zip(&g.data) {
                        *gd += gs;
                    }
                    let cols = out.cols;
                    for r in 0..out.rows {
                        for c in 0..cols {
                            grads[b].data[c] += g.data[r * cols + c];
                        }
                    }
                }
                Op::AddColBroadcast => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    for (gd, gs) in grads[a].data.iter_mut().zip(&g.data) {
                        *gd += gs;
                    }
                    let cols = out.cols;
                    for r in 0..out.rows {
                        for c in 0..cols {
                            grads[b].data[r] += g.data[r * cols + c];
                        }
                    }
                }
                Op::MulScalar => {
                    let (a, s) = (node.parents[0], node.parents[1]);
                    let sv = self.value(s).data[0];
                    let va = self.value(a).data.clone();
                    for (j, gs) in g.data.iter().enumerate() {
                        grads[a].data[j] += gs * sv;
                        grads[s].data[0] += gs * va[j];
                    }
                }
                Op::Recip => {
                    let a = node.parents[0];
                    let va = self.value(a).data.clone();
                    for (j, gs) in g.data.iter().enumerate() {
                        grads[a].data[j] += -gs / (va[j] * va[j]);
                    }
                }
                Op::MatMul => {
                    let (a, b) = (node.parents[0], node.parents[1]);
                    let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
                    let (n, k, m) = (ta.rows, ta.cols, tb.cols);
                    // dA = g @ B^T ; dB = A^T @ g
                    for i2 in 0..n {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..m {
                                acc += g.data[i2 * m + j] * tb.data[l * m + j];
                            }
                            grads[a].data[i2 * k + l] += acc;
                        }
                    }
                    for l in 0..k {
                        for j in 0..m {
                            let mut acc = 0.0;
                            for i2 in 0..n {
                                acc += ta.data[i2 * k + l] * g.data[i2 * m + j];
                            }
                            grads[b].data[l * m + j] += acc;
                        }
                    }
                }
                Op::Transpose => {
                    let a = node.parents[0];
                    let (n, m) = out.shape(); // out is m x n of input
                    for r in 0..n {
                        for c in 0..m {
                            grads[a].data[c * n + r] += g.data[r * m + c];
                        }
                    }
                }
                Op::Silu => {
                    let a = node.parents[0];
                    let va = self.value(a).data.clone();
                    for (j, gs) in g.data.iter().enumerate() {
                        let s = sigmoid(va[j]);
                        grads[a].data[j] += gs * (s * (1.0 + va[j] * (1.0 - s)));
                    }
                }
                Op::SoftmaxRows => {
                    let a = node.parents[0];
                    let (n, m) = out.shape();
                    for r in 0..n {
                        let y = &out.data[r * m..(r + 1) * m];
                        let gr = &g.data[r * m..(r + 1) * m];
                        let dot: f64 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for c in 0..m {
                            grads[a].data[r * m + c] += y[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::LogSumExpRows => {
                    let a = node.parents[0];
                    let ta = self.value(a).clone();
                    let (n, m) = ta.shape();
                    for r in 0..n {
                        let lse = out.data[r];
                        for c in 0..m {
                            grads[a].data[r * m + c] +=
                                g.data[r] * (ta.data[r * m + c] - lse).exp();
                        }
                    }
                }
                Op::TakeDiag => {
                    let a = node.parents[0];
                    let n = out.rows;
                    for r in 0..n {
                        grads[a].data[r * n + r] += g.data[r];
                    }
                }
                Op::MeanAll => {
                    let a = node.parents[0];
                    let len = grads[a].data.len() as f64;
                    let gv = g.data[0] / len;
                    for gd in grads[a].data.iter_mut() {
                        *gd += gv;
                    }
                }
                Op::MeanRows => {
                    let a = node.parents[0];
                    let (n, m) = self.value(a).shape();
                    for r in 0..n {
                        for c in 0..m {
                            grads[a].data[r * m + c] += g.data[c] / n as f64;
                        }
                    }
                }
                Op::ConcatRows => {
                    let mut off = 0;
                    for &p in &node.parents {
                        let len = self.value(p).data.len();
                        for (gd, gs) in grads[p].data.iter_mut().zip(&g.data[off..off + len]) {
                            *gd += gs;
                        }
                        off += len;
                    }
                }
                Op::ConcatCols => {
                    let cols = out.cols;
                    let mut off = 0;
                    for &p in &node.parents {
                        let pc = self.value(p).cols;
                        for r in 0..out.rows {
                            for c in 0..pc {
                                grads[p].data[r * pc + c] += g.data[r * cols + off + c];
                            }
                        }
                        off += pc;
                    }
                }
                Op::SliceCols { start, len } => {
                    let a = node.parents[0];
                    let m = self.value(a).cols;
                    for r in 0..out.rows {
                        for c in 0..*len {
                            grads[a].data[r * m + start + c] += g.data[r * len + c];
                        }
                    }
                }
                Op::Conv2d { in_c, h, w, k, stride, pad } => {
                    let (a, wt) = (node.parents[0], node.parents[1]);
                    let ta = self.value(a).data.clone();
                    let tw = self.value(wt).data.clone();
                    let out_c = out.rows;
                    let oh = conv_out_side(*h, *k, *stride, *pad);
                    let ow = conv_out_side(*w, *k, *stride, *pad);
                    for o in 0..out_c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g.data[o * oh * ow + oy * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for c in 0..*in_c {
                                    for ky in 0..*k {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy as usize >= *h {
                                            continue;
                                        }
                                        for kx in 0..*k {
                                            let ix =
                                                (ox * stride + kx) as isize - *pad as isize;
                                            if ix < 0 || ix as usize >= *w {
                                                continue;
                                            }
                                            let wi =
                                                o * in_c * k * k + c * k * k + ky * k + kx;
                                            let ai =
                                                c * h * w + iy as usize * w + ix as usize;
                                            grads[a].data[ai] += gv * tw[wi];
                                            grads[wt].data[wi] += gv * ta[ai];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                Op::BilinearResize { src, dst } => {
                    let a = node.parents[0];
                    let c = out.rows;
                    for ch in 0..c {
                        for dy in 0..*dst {
                            let (y0, y1, fy) = Self::bilinear_taps(*src, *dst, dy);
                            for dx in 0..*dst {
                                let (x0, x1, fx) = Self::bilinear_taps(*src, *dst, dx);
                                let gv = g.data[ch * dst * dst + dy * dst + dx];
                                let base = ch * src * src;
                                grads[a].data[base + y0 * src + x0] +=
                                    gv * (1.0 - fy) * (1.0 - fx);
                                grads[a].data[base + y0 * src + x1] += gv * (1.0 - fy) * fx;
                                grads[a].data[base + y1 * src + x0] += gv * fy * (1.0 - fx);
                                grads[a].data[base + y1 * src + x1] += gv * fy * fx;
                            }
                        }
                    }
                }
                Op::Rotary { positions } => {
                    // rotation is orthogonal: pull back by the inverse rotation
                    let a = node.parents[0];
                    let d = out.cols;
                    for (r, &p) in positions.iter().enumerate() {
                        for j in 0..d / 2 {
                            let ang = p as f64 * rotary_theta(d, j);
                            let (s, cs) = ang.sin_cos();
                            let g0 = g.data[r * d + 2 * j];
                            let g1 = g.data[r * d + 2 * j + 1];
                            grads[a].data[r * d + 2 * j] += g0 * cs + g1 * s;
                            grads[a].data[r * d + 2 * j + 1] += -g0 * s + g1 * cs;
                        }
                    }
                }
                Op::L2NormalizeRows => {
                    let a = node.parents[0];
                    let ta = self.value(a).clone();
                    let (n, d) = ta.shape();
                    for r in 0..n {
                        let norm = ta.data[r * d..(r + 1) * d]
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt()
                            .max(1e-12);
                        let y = &out.data[r * d..(r + 1) * d];
                        let gr = &g.data[r * d..(r + 1) * d];
                        let dot: f64 = y.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        for c in 0..d {
                            grads[a].data[r * d + c] += (gr[c] - dot * y[c]) / norm;
                        }
                    }
                }
                Op::EmbedRows { ids } => {
                    let a = node.parents[0];
                    let d = out.cols;
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            grads[a].data[id * d + c] += g.data[r * d + c];
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor { rows, cols, data }
    }

    /// Central finite differences on every entry of `inputs[target]` through
    /// an arbitrary scalar-valued graph builder, against analytic gradients.
    fn grad_check<F>(inputs: &[Tensor], target: usize, build: F, tol: f64)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &vars);
        let grads = tape.backward(root).unwrap();
        let analytic = grads[vars[target]].clone();

        let eps = 1e-5;
        for j in 0..inputs[target].data.len() {
            let eval = |delta: f64| {
                let mut bumped: Vec<Tensor> = inputs.to_vec();
                bumped[target].data[j] += delta;
                let mut t2 = Tape::new();
                let vs: Vec<Var> = bumped.iter().map(|t| t2.leaf(t.clone())).collect();
                let r = build(&mut t2, &vs);
                t2.value(r).data[0]
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data[j];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom <= tol,
                "entry {j}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn matmul_forward_matches_hand_example() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.leaf(Tensor::new(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![rand_tensor(&mut rng, 3, 4), rand_tensor(&mut rng, 4, 2)];
        for target in 0..2 {
            grad_check(
                &inputs,
                target,
                |t, v| {
                    let m = t.matmul(v[0], v[1]).unwrap();
                    let s = t.silu(m);
                    t.mean_all(s)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn softmax_rows_sums_to_one_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, 3, 5);
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let s = t.softmax_rows(v);
        for r in 0..3 {
            let sum: f64 = (0..5).map(|c| t.value(s).at(r, c)).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        grad_check(
            &[x],
            0,
            |t, v| {
                let s = t.softmax_rows(v[0]);
                let w = t.leaf(Tensor::new(3, 5, (0..15).map(|i| i as f64 / 7.0).collect()).unwrap());
                let p = t.mul(s, w).unwrap();
                t.mean_all(p)
            },
            1e-6,
        );
    }

    #[test]
    fn logsumexp_matches_direct_and_grads() {
        let x = Tensor::new(1, 3, vec![0.1, 0.7, -0.4]).unwrap();
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let l = t.logsumexp_rows(v);
        let direct = (0.1f64.exp() + 0.7f64.exp() + (-0.4f64).exp()).ln();
        assert!((t.value(l).data[0] - direct).abs() < 1e-12);
        grad_check(
            &[x],
            0,
            |t, v| {
                let l = t.logsumexp_rows(v[0]);
                t.mean_all(l)
            },
            1e-6,
        );
    }

    #[test]
    fn conv2d_identity_kernel() {
        // 1x1 kernel with weight 1: output equals input
        let x = Tensor::new(1, 9, (0..9).map(|i| i as f64).collect()).unwrap();
        let w = Tensor::new(1, 1, vec![1.0]).unwrap();
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.leaf(w);
        let y = t.conv2d(xv, wv, 3, 3, 1, 1, 0).unwrap();
        assert_eq!(t.value(y).data, x.data);
    }

    #[test]
    fn conv2d_matches_direct_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c_in, h, w, c_out, k, stride, pad) = (2, 5, 5, 3, 3, 2, 1);
        let x = rand_tensor(&mut rng, c_in, h * w);
        let wt = rand_tensor(&mut rng, c_out, c_in * k * k);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let wv = t.leaf(wt.clone());
        let y = t.conv2d(xv, wv, h, w, k, stride, pad).unwrap();
        let oh = (h + 2 * pad - k) / stride + 1;
        // brute-force oracle with explicit zero padding
        for o in 0..c_out {
            for oy in 0..oh {
                for ox in 0..oh {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                if iy < pad || ix < pad {
                                    continue;
                                }
                                let (iy, ix) = (iy - pad, ix - pad);
                                if iy >= h || ix >= w {
                                    continue;
                                }
                                acc += wt.at(o, c * k * k + ky * k + kx) * x.at(c, iy * w + ix);
                            }
                        }
                    }
                    assert!((t.value(y).at(o, oy * oh + ox) - acc).abs() < 1e-12);
                }
            }
        }
        for target in 0..2 {
            grad_check(
                &[x.clone(), wt.clone()],
                target,
                |t, v| {
                    let y = t.conv2d(v[0], v[1], h, w, k, stride, pad).unwrap();
                    let s = t.silu(y);
                    t.mean_all(s)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn bilinear_resize_constant_preserved() {
        let x = Tensor::new(1, 16, vec![3.5; 16]).unwrap();
        let mut t = Tape::new();
        let v = t.leaf(x);
        let y = t.bilinear_resize(v, 4, 7).unwrap();
        assert!(t.value(y).data.iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn bilinear_resize_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 2, 16);
        grad_check(
            &[x],
            0,
            |t, v| {
                let y = t.bilinear_resize(v[0], 4, 6).unwrap();
                let s = t.silu(y);
                t.mean_all(s)
            },
            1e-6,
        );
    }

    #[test]
    fn rotary_preserves_norm_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, 3, 8);
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let y = t.rotary(v, &[0, 3, 11]).unwrap();
        for r in 0..3 {
            let n_in: f64 = (0..8).map(|c| x.at(r, c).powi(2)).sum();
            let n_out: f64 = (0..8).map(|c| t.value(y).at(r, c).powi(2)).sum();
            assert!((n_in - n_out).abs() < 1e-12);
        }
        // position 0 is the identity rotation
        for c in 0..8 {
            assert_eq!(t.value(y).at(0, c), x.at(0, c));
        }
        grad_check(
            &[x],
            0,
            |t, v| {
                let y = t.rotary(v[0], &[2, 5, 9]).unwrap();
                let s = t.silu(y);
                t.mean_all(s)
            },
            1e-6,
        );
    }

    #[test]
    fn l2_normalize_unit_norm_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, 3, 6);
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let y = t.l2_normalize_rows(v);
        for r in 0..3 {
            let n: f64 = (0..6).map(|c| t.value(y).at(r, c).powi(2)).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        grad_check(
            &[x],
            0,
            |t, v| {
                let y = t.l2_normalize_rows(v[0]);
                let s = t.silu(y);
                t.mean_all(s)
            },
            1e-6,
        );
    }

    #[test]
    fn embed_rows_gathers_and_scatters() {
        let table = Tensor::new(4, 2, (0..8).map(|i| i as f64).collect()).unwrap();
        let mut t = Tape::new();
        let tv = t.leaf(table.clone());
        let e = t.embed_rows(tv, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(e).data, vec![4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
        grad_check(
            &[table],
            0,
            |t, v| {
                let e = t.embed_rows(v[0], &[2, 0, 2]).unwrap();
                let s = t.silu(e);
                t.mean_all(s)
            },
            1e-6,
        );
    }

    #[test]
    fn broadcast_scalar_and_misc_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![
            rand_tensor(&mut rng, 3, 4),
            rand_tensor(&mut rng, 1, 4),
            rand_tensor(&mut rng, 3, 1),
            Tensor::scalar(0.37),
        ];
        for target in 0..4 {
            grad_check(
                &inputs,
                target,
                |t, v| {
                    let a = t.add_row_broadcast(v[0], v[1]).unwrap();
                    let b = t.add_col_broadcast(a, v[2]).unwrap();
                    let r = t.recip(v[3]);
                    let c = t.mul_scalar(b, r).unwrap();
                    let s = t.silu(c);
                    t.mean_all(s)
                },
                1e-6,
            );
        }
    }

    #[test]
    fn composite_attention_shape_grads() {
        // a miniature single-query attention wired from primitive ops
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = vec![
            rand_tensor(&mut rng, 1, 4), // query
            rand_tensor(&mut rng, 5, 4), // keys
            rand_tensor(&mut rng, 5, 4), // values
        ];
        for target in 0..3 {
            grad_check(
                &inputs,
                target,
                |t, v| {
                    let q = t.rotary(v[0], &[0]).unwrap();
                    let k = t.rotary(v[1], &[0, 1, 2, 3, 4]).unwrap();
                    let kt = t.transpose(k);
                    let scores = t.matmul(q, kt).unwrap();
                    let scaled = t.scale(scores, 0.5);
                    let w = t.softmax_rows(scaled);
                    let o = t.matmul(w, v[2]).unwrap();
                    let s = t.silu(o);
                    t.mean_all(s)
                },
                1e-5,
            );
        }
    }

    #[test]
    fn diag_and_mean_rows() {
        let x = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let d = t.take_diag(v).unwrap();
        assert_eq!(t.value(d).data, vec![1.0, 4.0]);
        let m = t.mean_rows(v);
        assert_eq!(t.value(m).data, vec![2.0, 3.0]);
        grad_check(
            &[x],
            0,
            |t, v| {
                let d = t.take_diag(v[0]).unwrap();
                let m = t.mean_rows(v[0]);
                let mt = t.transpose(m);
                let both = t.concat_rows(&[d, mt]).unwrap();
                let s = t.silu(both);
                t.mean_all(s)
            },
            1e-6,
        );
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, 2, 6);
        let mut t = Tape::new();
        let v = t.leaf(x.clone());
        let a = t.slice_cols(v, 0, 3).unwrap();
        let b = t.slice_cols(v, 3, 3).unwrap();
        let back = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.value(back).data, x.data);
        grad_check(
            &[x],
            0,
            |t, v| {
                let a = t.slice_cols(v[0], 1, 2).unwrap();
                let b = t.slice_cols(v[0], 4, 2).unwrap();
                let c = t.concat_cols(&[a, b]).unwrap();
                let s = t.silu(c);
                t.mean_all(s)
            },
            1e-6,
        );
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::zeros(2, 3));
        let b = t.leaf(Tensor::zeros(3, 3));
        assert!(t.add(a, b).is_err());
        assert!(t.matmul(b, a).is_err());
        let odd = t.leaf(Tensor::zeros(1, 3));
        assert!(t.rotary(odd, &[0]).is_err());
    }
}
