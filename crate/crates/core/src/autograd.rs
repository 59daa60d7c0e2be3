//! A small reverse-mode automatic differentiation tape over row-major `f64`
//! matrices.
//!
//! Every tensor in the model is a 2-D matrix: token sequences are
//! `tokens × channels` and spatial feature maps are `(rows·cols) × channels`
//! in row-major pixel order. Spatial operators (convolution patches,
//! upsampling, bilinear resize) are expressed as row gathers so they share one
//! backward rule.

use std::sync::Arc;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

pub type Mat = Array2<f64>;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Norms below this are treated as zero by [`Tape::l2_normalize_rows`].
pub const ZERO_NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A sparse linear map over rows: output row `r` is `Σ w · input[src]` over
/// `rows[r]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMap {
    pub input_rows: usize,
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl RowMap {
    /// Nearest-neighbour 2x upsampling of an `h × w` grid.
    pub fn nearest_upsample2x(h: usize, w: usize) -> Self {
        let (oh, ow) = (2 * h, 2 * w);
        let mut rows = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            for x in 0..ow {
                rows.push(vec![((y / 2) * w + x / 2, 1.0)]);
            }
        }
        Self {
            input_rows: h * w,
            rows,
        }
    }

    /// Bilinear resize from `h × w` to `oh × ow` using half-pixel centres
    /// (no corner alignment), edge-clamped.
    pub fn bilinear_resize(h: usize, w: usize, oh: usize, ow: usize) -> Self {
        let ys = axis_weights(h, oh);
        let xs = axis_weights(w, ow);
        let mut rows = Vec::with_capacity(oh * ow);
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let mut entry: Vec<(usize, f64)> = Vec::with_capacity(4);
                let mut push = |idx: usize, wgt: f64| {
                    if wgt == 0.0 {
                        return;
                    }
                    if let Some(e) = entry.iter_mut().find(|e| e.0 == idx) {
                        e.1 += wgt;
                    } else {
                        entry.push((idx, wgt));
                    }
                };
                push(y0 * w + x0, (1.0 - ly) * (1.0 - lx));
                push(y0 * w + x1, (1.0 - ly) * lx);
                push(y1 * w + x0, ly * (1.0 - lx));
                push(y1 * w + x1, ly * lx);
                rows.push(entry);
            }
        }
        Self {
            input_rows: h * w,
            rows,
        }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Mat {
        let mut out = Mat::zeros((self.rows.len(), x.ncols()));
        for (r, entry) in self.rows.iter().enumerate() {
            let mut dst = out.row_mut(r);
            for &(src, wgt) in entry {
                dst.scaled_add(wgt, &x.row(src));
            }
        }
        out
    }

    fn apply_transpose(&self, g: ArrayView2<f64>) -> Mat {
        let mut out = Mat::zeros((self.input_rows, g.ncols()));
        for (r, entry) in self.rows.iter().enumerate() {
            for &(src, wgt) in entry {
                out.row_mut(src).scaled_add(wgt, &g.row(r));
            }
        }
        out
    }
}

fn axis_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let lambda = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            (i0, i1, lambda)
        })
        .collect()
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    ConcatRows(Var, Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Arc<RowMap>),
    Im2Col {
        x: Var,
        h: usize,
        w: usize,
    },
    L2NormalizeRows {
        x: Var,
        inv_norms: Vec<Option<f64>>,
    },
    BceWithLogits {
        logits: Var,
        target: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so that [`Tape::backward`] can replay it in
/// reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by the [`Var`]s of the tape they were computed on.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let t = (C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise GELU (tanh approximation), exposed for array-level code paths.
pub fn gelu_scalar(x: f64) -> f64 {
    gelu(x)
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

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a `1 × n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.shape(row).0, 1);
        let value = self.value(a) + self.value(row);
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `x · w + b` with `b` a `1 × n` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(gelu);
        let ng = self.ng(a);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalisation with affine `gamma`/`beta` (`1 × n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let ng = self.ng(a);
        self.push(value, Op::SoftmaxRows(a), ng)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let value = concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()])
            .expect("concat_rows: column counts differ");
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::ConcatRows(a, b), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![start..start + len, ..]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceRows(a, start), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn gather(&mut self, a: Var, map: Arc<RowMap>) -> Var {
        assert_eq!(self.shape(a).0, map.input_rows, "gather: row count mismatch");
        let value = map.apply(self.value(a).view());
        let ng = self.ng(a);
        self.push(value, Op::Gather(a, map), ng)
    }

    /// Expands an `(h·w) × c` map into `(h·w) × 9c` 3x3 zero-padded patches.
    /// Column block `k = (dy+1)·3 + (dx+1)` holds the neighbour at offset
    /// `(dy, dx)`.
    pub fn im2col3x3(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), h * w, "im2col3x3: row count mismatch");
        let c = xv.ncols();
        let mut value = Mat::zeros((h * w, 9 * c));
        for y in 0..h {
            for xx in 0..w {
                let mut dst = value.row_mut(y * w + xx);
                for (k, (dy, dx)) in TAPS.iter().enumerate() {
                    let (sy, sx) = (y as isize + dy, xx as isize + dx);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    let src = xv.row(sy as usize * w + sx as usize);
                    dst.slice_mut(s![k * c..(k + 1) * c]).assign(&src);
                }
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::Im2Col { x, h, w }, ng)
    }

    /// Scales every row to unit L2 norm; rows with norm below
    /// [`ZERO_NORM_GUARD`] become zero rows and pass no gradient.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut inv_norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm < ZERO_NORM_GUARD {
                row.fill(0.0);
                inv_norms.push(None);
            } else {
                row.mapv_inplace(|v| v / norm);
                inv_norms.push(Some(1.0 / norm));
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::L2NormalizeRows { x, inv_norms }, ng)
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`,
    /// returned as a `1 × 1` matrix.
    pub fn bce_with_logits(&mut self, logits: Var, target: Mat) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.dim(), target.dim(), "bce_with_logits: shape mismatch");
        let n = lv.len() as f64;
        let total: f64 = Zip::from(lv)
            .and(&target)
            .fold(0.0, |acc, &x, &y| acc + softplus(x) - x * y);
        let value = Mat::from_elem((1, 1), total / n);
        let ng = self.ng(logits);
        self.push(value, Op::BceWithLogits { logits, target }, ng)
    }

    /// Reverse pass from a `1 × 1` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Mat, g: &Mat, grads: &mut [Option<Mat>]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.ng(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g * *s),
            Op::Gelu(a) => {
                let mut d = self.value(*a).mapv(gelu_grad);
                d *= g;
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if self.ng(*gamma) {
                    self.accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*beta) {
                    self.accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.ng(*x) {
                    let gxhat = g * self.value(*gamma);
                    let n = xhat.ncols() as f64;
                    let mut dx = Mat::zeros(xhat.dim());
                    for (r, mut drow) in dx.rows_mut().into_iter().enumerate() {
                        let gr = gxhat.row(r);
                        let xr = xhat.row(r);
                        let mean_g = gr.sum() / n;
                        let mean_gx = gr.dot(&xr) / n;
                        Zip::from(&mut drow).and(&gr).and(&xr).for_each(|d, &gv, &xv| {
                            *d = inv_std[r] * (gv - mean_g - xv * mean_gx);
                        });
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::SoftmaxRows(a) => {
                let mut d = Mat::zeros(out.dim());
                for (r, mut drow) in d.rows_mut().into_iter().enumerate() {
                    let yr = out.row(r);
                    let gr = g.row(r);
                    let dot = yr.dot(&gr);
                    Zip::from(&mut drow)
                        .and(&yr)
                        .and(&gr)
                        .for_each(|dv, &y, &gv| *dv = y * (gv - dot));
                }
                self.accumulate(grads, *a, d);
            }
            Op::ConcatRows(a, b) => {
                let na = self.shape(*a).0;
                self.accumulate(grads, *a, g.slice(s![..na, ..]).to_owned());
                self.accumulate(grads, *b, g.slice(s![na.., ..]).to_owned());
            }
            Op::SliceRows(a, start) => {
                if self.ng(*a) {
                    let mut d = Mat::zeros(self.shape(*a));
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                    self.accumulate(grads, *a, d);
                }
            }
            Op::SliceCols(a, start) => {
                if self.ng(*a) {
                    let mut d = Mat::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                    self.accumulate(grads, *a, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p).1;
                    self.accumulate(grads, p, g.slice(s![.., offset..offset + c]).to_owned());
                    offset += c;
                }
            }
            Op::Gather(a, map) => self.accumulate(grads, *a, map.apply_transpose(g.view())),
            Op::Im2Col { x, h, w } => {
                let (h, w) = (*h, *w);
                let c = self.shape(*x).1;
                let mut d = Mat::zeros((h * w, c));
                for y in 0..h {
                    for xx in 0..w {
                        let src = g.row(y * w + xx);
                        for (k, (dy, dx)) in TAPS.iter().enumerate() {
                            let (sy, sx) = (y as isize + dy, xx as isize + dx);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            d.row_mut(sy as usize * w + sx as usize)
                                .scaled_add(1.0, &src.slice(s![k * c..(k + 1) * c]));
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::L2NormalizeRows { x, inv_norms } => {
                let mut d = Mat::zeros(out.dim());
                for (r, mut drow) in d.rows_mut().into_iter().enumerate() {
                    let Some(inv) = inv_norms[r] else { continue };
                    let yr = out.row(r);
                    let gr = g.row(r);
                    let dot = yr.dot(&gr);
                    Zip::from(&mut drow)
                        .and(&yr)
                        .and(&gr)
                        .for_each(|dv, &y, &gv| *dv = inv * (gv - y * dot));
                }
                self.accumulate(grads, *x, d);
            }
            Op::BceWithLogits { logits, target } => {
                let scale = g[[0, 0]] / target.len() as f64;
                let mut d = self.value(*logits).mapv(sigmoid);
                d -= target;
                d *= scale;
                self.accumulate(grads, *logits, d);
            }
        }
    }
}

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Compares tape gradients of `f` against central differences for every
    /// entry of every input.
    fn check<F>(inputs: Vec<Mat>, f: F)
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let out = f(&mut tape, &vars);
        let grads = tape.backward(out);

        let eval = |mats: &[Mat]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = mats.iter().map(|m| t.constant(m.clone())).collect();
            let o = f(&mut t, &vs);
            t.value(o)[[0, 0]]
        };
        let h = 1e-6;
        for (i, m) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Mat::zeros(m.dim()));
            for idx in ndarray::indices(m.dim()) {
                let mut plus = inputs.clone();
                plus[i][idx] += h;
                let mut minus = inputs.clone();
                minus[i][idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[idx];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
                assert!(err < 1e-5, "input {i} {idx:?}: analytic {a} numeric {numeric}");
            }
        }
    }

    fn reduce(tape: &mut Tape, v: Var) -> Var {
        let (r, c) = tape.shape(v);
        let target = Mat::from_shape_fn((r, c), |(i, j)| ((i + j) % 2) as f64);
        tape.bce_with_logits(v, target)
    }

    #[test]
    fn matmul_and_affine_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 1, 2)];
        check(inputs, |t, v| {
            let y = t.affine(v[0], v[1], v[2]);
            let y = t.gelu(y);
            reduce(t, y)
        });
    }

    #[test]
    fn attention_pieces_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![random(&mut rng, 4, 6), random(&mut rng, 3, 6)];
        check(inputs, |t, v| {
            let x = t.concat_rows(v[0], v[1]);
            let q = t.slice_cols(x, 0, 3);
            let k = t.slice_cols(x, 3, 3);
            let s = t.matmul_t(q, k);
            let s = t.scale(s, 0.7);
            let a = t.softmax_rows(s);
            let o = t.matmul(a, x);
            let top = t.slice_rows(o, 1, 4);
            let q4 = t.slice_rows(q, 0, 4);
            let cat = t.concat_cols(&[top, q4]);
            reduce(t, cat)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![random(&mut rng, 3, 5), random(&mut rng, 1, 5), random(&mut rng, 1, 5)];
        check(inputs, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            reduce(t, y)
        });
    }

    #[test]
    fn spatial_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let inputs = vec![random(&mut rng, 6, 2), random(&mut rng, 18, 2)];
        check(inputs, |t, v| {
            let p = t.im2col3x3(v[0], 2, 3);
            let y = t.matmul(p, v[1]);
            let up = t.gather(y, Arc::new(RowMap::nearest_upsample2x(2, 3)));
            let rs = t.gather(up, Arc::new(RowMap::bilinear_resize(4, 6, 5, 7)));
            let n = t.l2_normalize_rows(rs);
            reduce(t, n)
        });
    }

    #[test]
    fn nearest_upsample_is_row_major_replication() {
        let map = RowMap::nearest_upsample2x(1, 2);
        let out = map.apply(array![[1.0], [2.0]].view());
        assert_eq!(out, array![[1.0], [1.0], [2.0], [2.0], [1.0], [1.0], [2.0], [2.0]]);
    }

    #[test]
    fn bilinear_preserves_constants_and_identity() {
        let x = Mat::from_elem((12, 3), 0.25);
        let map = RowMap::bilinear_resize(3, 4, 7, 5);
        assert!(map.apply(x.view()).iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = random(&mut rng, 12, 2);
        assert_eq!(RowMap::bilinear_resize(3, 4, 3, 4).apply(y.view()), y);
    }

    #[test]
    fn bilinear_downsample_by_two_averages_pairs() {
        // Half-pixel centres: output 0 samples input coordinate 0.5.
        let x = array![[0.0], [1.0], [2.0], [3.0]];
        let out = RowMap::bilinear_resize(1, 4, 1, 2).apply(x.view());
        assert_eq!(out, array![[0.5], [2.5]]);
    }

    #[test]
    fn zero_rows_normalize_to_zero() {
        let mut t = Tape::new();
        let x = t.param(array![[0.0, 0.0], [3.0, 4.0]]);
        let n = t.l2_normalize_rows(x);
        assert_eq!(t.value(n), &array![[0.0, 0.0], [0.6, 0.8]]);
        let out = reduce(&mut t, n);
        let g = t.backward(out);
        let gx = g.get(x).unwrap();
        assert!(gx.iter().all(|v| v.is_finite()));
        assert_eq!(gx.row(0).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn bce_zero_logits_is_ln2() {
        let mut t = Tape::new();
        let x = t.constant(Mat::zeros((3, 2)));
        let target = array![[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]];
        let l = t.bce_with_logits(x, target);
        assert!((t.value(l)[[0, 0]] - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
