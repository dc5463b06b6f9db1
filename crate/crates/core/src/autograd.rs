//! Reverse-mode differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Nodes created from
//! frozen weights or data carry no gradient; anything computed from a node that
//! does is tracked, and [`Tape::backward`] walks the record in reverse.

use std::sync::Arc;

use crate::tensor::{gemm, GemmArgs, Matrix};

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNormRows { src: Var, inv_std: Vec<f64> },
    Gather { src: Var, index: Arc<[usize]> },
    ConcatCols(Var, Var),
    Im2Col3 { src: Var, h: usize, w: usize },
    AvgPool2 { src: Var, h: usize, w: usize },
    Upsample2 { src: Var, h: usize, w: usize },
    Sum(Var),
    Mean(Var),
    NormalizeGlobal { src: Var, norm: f64 },
    NormalizeRows { src: Var, norms: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is collected when `trainable`.
    pub fn leaf(&mut self, value: Matrix, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions {m}x{k} * {k2}x{n}");
        let mut out = Matrix::zeros(m, n);
        gemm(
            GemmArgs {
                m,
                k,
                n,
                a: self.value(a).data(),
                a_trans: false,
                b: self.value(b).data(),
                b_trans: false,
                accumulate: false,
            },
            out.data_mut(),
        );
        let t = self.tracked(&[a, b]);
        self.push(out, Op::MatMul(a, b), t)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = self
            .value(a)
            .zip_map(self.value(b), f)
            .expect("elementwise operands must share a shape");
        let t = self.tracked(&[a, b]);
        self.push(out, op, t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (rows, cols) = self.shape(a);
        assert_eq!(self.shape(row), (1, cols), "row broadcast shape");
        let r = self.value(row).data();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_exact_mut(cols) {
            for (o, b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        debug_assert_eq!(out.rows(), rows);
        let t = self.tracked(&[a, row]);
        self.push(out, Op::AddRow(a, row), t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let t = self.tracked(&[a]);
        self.push(out, Op::Scale(a, s), t)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let t = self.tracked(&[a]);
        self.push(out, Op::Silu(a), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(0.0));
        let t = self.tracked(&[a]);
        self.push(out, Op::Relu(a), t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let cols = self.shape(a).1;
        let mut out = self.value(a).clone();
        for row in out.data_mut().chunks_exact_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let t = self.tracked(&[a]);
        self.push(out, Op::SoftmaxRows(a), t)
    }

    /// Zero-mean, unit-variance rows (no affine parameters).
    pub fn layer_norm_rows(&mut self, a: Var) -> Var {
        let cols = self.shape(a).1;
        let mut out = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_exact_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let t = self.tracked(&[a]);
        self.push(out, Op::LayerNormRows { src: a, inv_std }, t)
    }

    /// `out.data[i] = src.data[index[i]]`, reshaped to `rows x cols`.
    pub fn gather(&mut self, src: Var, index: Arc<[usize]>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length");
        let s = self.value(src).data();
        let data: Vec<f64> = index.iter().map(|&i| s[i]).collect();
        let out = Matrix::from_vec(rows, cols, data).expect("gather shape");
        let t = self.tracked(&[src]);
        self.push(out, Op::Gather { src, index }, t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let index: Arc<[usize]> = (0..r * c).map(|i| (i % r) * c + i / r).collect();
        self.gather(a, index, c, r)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        assert_eq!(ra, rb, "concat row counts");
        let mut out = Matrix::zeros(ra, ca + cb);
        for r in 0..ra {
            let dst = &mut out.data_mut()[r * (ca + cb)..(r + 1) * (ca + cb)];
            dst[..ca].copy_from_slice(self.value(a).row(r));
            dst[ca..].copy_from_slice(self.value(b).row(r));
        }
        let t = self.tracked(&[a, b]);
        self.push(out, Op::ConcatCols(a, b), t)
    }

    /// 3x3 zero-padded patch unfolding of an `h x w` grid stored as `[h*w, c]`.
    /// Column order is `(ky, kx, channel)`.
    pub fn im2col3(&mut self, src: Var, h: usize, w: usize) -> Var {
        let (n, c) = self.shape(src);
        assert_eq!(n, h * w, "im2col grid");
        let s = self.value(src).data();
        let mut out = Matrix::zeros(n, 9 * c);
        let od = out.data_mut();
        for y in 0..h {
            for x in 0..w {
                let row = (y * w + x) * 9 * c;
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = x as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src_off = (sy as usize * w + sx as usize) * c;
                        let dst_off = row + (ky * 3 + kx) * c;
                        od[dst_off..dst_off + c].copy_from_slice(&s[src_off..src_off + c]);
                    }
                }
            }
        }
        let t = self.tracked(&[src]);
        self.push(out, Op::Im2Col3 { src, h, w }, t)
    }

    pub fn avg_pool2(&mut self, src: Var, h: usize, w: usize) -> Var {
        let (n, c) = self.shape(src);
        assert!(n == h * w && h % 2 == 0 && w % 2 == 0, "avg_pool2 grid");
        let (oh, ow) = (h / 2, w / 2);
        let s = self.value(src).data();
        let mut out = Matrix::zeros(oh * ow, c);
        let od = out.data_mut();
        for y in 0..oh {
            for x in 0..ow {
                let dst = (y * ow + x) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let src_off = ((2 * y + dy) * w + 2 * x + dx) * c;
                    for ch in 0..c {
                        od[dst + ch] += 0.25 * s[src_off + ch];
                    }
                }
            }
        }
        let t = self.tracked(&[src]);
        self.push(out, Op::AvgPool2 { src, h, w }, t)
    }

    /// Nearest-neighbour 2x upsampling of an `h x w` grid.
    pub fn upsample2(&mut self, src: Var, h: usize, w: usize) -> Var {
        let (n, c) = self.shape(src);
        assert_eq!(n, h * w, "upsample2 grid");
        let (oh, ow) = (2 * h, 2 * w);
        let s = self.value(src).data();
        let mut out = Matrix::zeros(oh * ow, c);
        let od = out.data_mut();
        for y in 0..oh {
            for x in 0..ow {
                let src_off = ((y / 2) * w + x / 2) * c;
                let dst = (y * ow + x) * c;
                od[dst..dst + c].copy_from_slice(&s[src_off..src_off + c]);
            }
        }
        let t = self.tracked(&[src]);
        self.push(out, Op::Upsample2 { src, h, w }, t)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let t = self.tracked(&[a]);
        self.push(Matrix::filled(1, 1, s), Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        let t = self.tracked(&[a]);
        self.push(Matrix::filled(1, 1, s), Op::Mean(a), t)
    }

    /// `mean((a - b)^2)` as a `1 x 1` node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Divides by the Frobenius norm of the whole matrix. The caller guarantees a nonzero norm.
    pub fn normalize_global(&mut self, a: Var) -> Var {
        let norm = self.value(a).frobenius_norm();
        assert!(norm > 0.0, "normalize_global of a zero matrix");
        let out = self.value(a).scale(1.0 / norm);
        let t = self.tracked(&[a]);
        self.push(out, Op::NormalizeGlobal { src: a, norm }, t)
    }

    /// Divides each row by its Euclidean norm. The caller guarantees nonzero rows.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let cols = self.shape(a).1;
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_exact_mut(cols) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(n > 0.0, "normalize_rows of a zero row");
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let t = self.tracked(&[a]);
        self.push(out, Op::NormalizeRows { src: a, norms }, t)
    }

    /// Backpropagates from the scalar `root`, seeding its gradient with 1.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        self.backward_with(root, Matrix::filled(1, 1, 1.0))
    }

    /// Backpropagates an arbitrary upstream gradient from `root`.
    pub fn backward_with(&self, root: Var, seed: Matrix) -> Gradients {
        assert_eq!(self.shape(root), seed.shape(), "seed gradient shape");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].tracked {
            return Gradients { grads };
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, f: impl FnOnce() -> Matrix) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let g = f();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                self.accumulate(grads, *a, || {
                    let mut ga = Matrix::zeros(m, k);
                    gemm(
                        GemmArgs {
                            m,
                            k: n,
                            n: k,
                            a: g.data(),
                            a_trans: false,
                            b: self.value(*b).data(),
                            b_trans: true,
                            accumulate: false,
                        },
                        ga.data_mut(),
                    );
                    ga
                });
                self.accumulate(grads, *b, || {
                    let mut gb = Matrix::zeros(k, n);
                    gemm(
                        GemmArgs {
                            m: k,
                            k: m,
                            n,
                            a: self.value(*a).data(),
                            a_trans: true,
                            b: g.data(),
                            b_trans: false,
                            accumulate: false,
                        },
                        gb.data_mut(),
                    );
                    gb
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *b, || g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, || {
                    g.zip_map(self.value(*b), |x, y| x * y).expect("shape")
                });
                self.accumulate(grads, *b, || {
                    g.zip_map(self.value(*a), |x, y| x * y).expect("shape")
                });
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, || g.clone());
                self.accumulate(grads, *row, || {
                    let cols = g.cols();
                    let mut r = Matrix::zeros(1, cols);
                    for chunk in g.data().chunks_exact(cols) {
                        for (o, v) in r.data_mut().iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    r
                });
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, || g.scale(*s)),
            Op::Silu(a) => self.accumulate(grads, *a, || {
                g.zip_map(self.value(*a), |gv, x| {
                    let s = sigmoid(x);
                    gv * s * (1.0 + x * (1.0 - s))
                })
                .expect("shape")
            }),
            Op::Relu(a) => self.accumulate(grads, *a, || {
                g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })
                    .expect("shape")
            }),
            Op::SoftmaxRows(a) => self.accumulate(grads, *a, || {
                let cols = out.cols();
                let mut ga = Matrix::zeros(out.rows(), cols);
                for ((gr, yr), dst) in g
                    .data()
                    .chunks_exact(cols)
                    .zip(out.data().chunks_exact(cols))
                    .zip(ga.data_mut().chunks_exact_mut(cols))
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = y * (gv - dot);
                    }
                }
                ga
            }),
            Op::LayerNormRows { src, inv_std } => self.accumulate(grads, *src, || {
                let cols = out.cols();
                let n = cols as f64;
                let mut ga = Matrix::zeros(out.rows(), cols);
                for (((gr, yr), dst), is) in g
                    .data()
                    .chunks_exact(cols)
                    .zip(out.data().chunks_exact(cols))
                    .zip(ga.data_mut().chunks_exact_mut(cols))
                    .zip(inv_std)
                {
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((d, gv), y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = is * (gv - mean_g - y * mean_gy);
                    }
                }
                ga
            }),
            Op::Gather { src, index } => self.accumulate(grads, *src, || {
                let (r, c) = self.shape(*src);
                let mut ga = Matrix::zeros(r, c);
                let gd = ga.data_mut();
                for (gv, &ix) in g.data().iter().zip(index.iter()) {
                    gd[ix] += gv;
                }
                ga
            }),
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let cb = self.shape(*b).1;
                let rows = g.rows();
                self.accumulate(grads, *a, || {
                    Matrix::from_fn(rows, ca, |r, c| g.get(r, c))
                });
                self.accumulate(grads, *b, || {
                    Matrix::from_fn(rows, cb, |r, c| g.get(r, ca + c))
                });
            }
            Op::Im2Col3 { src, h, w } => self.accumulate(grads, *src, || {
                let (h, w) = (*h, *w);
                let c = self.shape(*src).1;
                let mut ga = Matrix::zeros(h * w, c);
                let gd = ga.data_mut();
                let gs = g.data();
                for y in 0..h {
                    for x in 0..w {
                        let row = (y * w + x) * 9 * c;
                        for ky in 0..3 {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let sx = x as isize + kx as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let dst = (sy as usize * w + sx as usize) * c;
                                let off = row + (ky * 3 + kx) * c;
                                for ch in 0..c {
                                    gd[dst + ch] += gs[off + ch];
                                }
                            }
                        }
                    }
                }
                ga
            }),
            Op::AvgPool2 { src, h, w } => self.accumulate(grads, *src, || {
                let (h, w) = (*h, *w);
                let c = self.shape(*src).1;
                let ow = w / 2;
                Matrix::from_fn(h * w, c, |r, ch| {
                    let (y, x) = (r / w, r % w);
                    0.25 * g.get((y / 2) * ow + x / 2, ch)
                })
            }),
            Op::Upsample2 { src, h, w } => self.accumulate(grads, *src, || {
                let (h, w) = (*h, *w);
                let c = self.shape(*src).1;
                let ow = 2 * w;
                let mut ga = Matrix::zeros(h * w, c);
                for y in 0..2 * h {
                    for x in 0..ow {
                        let dst = (y / 2) * w + x / 2;
                        for ch in 0..c {
                            let v = ga.get(dst, ch) + g.get(y * ow + x, ch);
                            ga.set(dst, ch, v);
                        }
                    }
                }
                ga
            }),
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                let gv = g.get(0, 0);
                self.accumulate(grads, *a, || Matrix::filled(r, c, gv));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                let gv = g.get(0, 0) / (r * c) as f64;
                self.accumulate(grads, *a, || Matrix::filled(r, c, gv));
            }
            Op::NormalizeGlobal { src, norm } => self.accumulate(grads, *src, || {
                let dot: f64 = g.data().iter().zip(out.data()).map(|(a, b)| a * b).sum();
                g.zip_map(out, |gv, y| (gv - y * dot) / norm).expect("shape")
            }),
            Op::NormalizeRows { src, norms } => self.accumulate(grads, *src, || {
                let cols = out.cols();
                let mut ga = Matrix::zeros(out.rows(), cols);
                for (((gr, yr), dst), n) in g
                    .data()
                    .chunks_exact(cols)
                    .zip(out.data().chunks_exact(cols))
                    .zip(ga.data_mut().chunks_exact_mut(cols))
                    .zip(norms)
                {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), y) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = (gv - y * dot) / n;
                    }
                }
                ga
            }),
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
