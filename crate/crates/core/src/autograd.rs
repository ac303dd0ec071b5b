//! A small reverse-mode tape covering the operations the towers need.
//!
//! Each forward pass builds a fresh [`Graph`]; [`Graph::backward`] walks it in
//! reverse and returns gradients for every node that requires them.

use std::sync::Arc;

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Additive attention mask rule, evaluated inside the attention kernel.
#[derive(Debug, Clone)]
pub enum MaskRule {
    None,
    /// Query rows flagged as reference may not read key columns flagged as noisy.
    RefBlocksNoisy {
        query_is_ref: Arc<[bool]>,
        key_is_ref: Arc<[bool]>,
    },
}

/// Pre-softmax value used for masked logits.
pub const MASK_VALUE: f64 = -1e9;

/// Per-row rotation tables for rotary embeddings; `cos`/`sin` are `[rows, pairs]`
/// where `pairs = width / 2` and pair `p` rotates channels `(2p, 2p + 1)`.
#[derive(Clone)]
pub struct RotaryTable<R> {
    pub cos: Tensor<R>,
    pub sin: Tensor<R>,
}

enum Op<R> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, R),
    AddScalar(usize),
    LayerNorm {
        a: usize,
        rstd: Vec<R>,
    },
    Silu(usize),
    Gelu(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        scale: R,
        probs: Vec<R>,
    },
    Rotary {
        a: usize,
        table: Arc<RotaryTable<R>>,
    },
    ConcatRows(Vec<usize>),
    SliceRows {
        a: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    SliceCols {
        a: usize,
        start: usize,
    },
    Mse {
        a: usize,
        target: Tensor<R>,
    },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

pub struct Graph<R> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by [`Var`].
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<R>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn gelu<R: Real>(x: R) -> R {
    let c = R::lit(0.797_884_560_802_865_4);
    let inner = c * (x + R::lit(0.044715) * x * x * x);
    R::lit(0.5) * x * (R::one() + inner.tanh())
}

fn gelu_grad<R: Real>(x: R) -> R {
    let c = R::lit(0.797_884_560_802_865_4);
    let x2 = x * x;
    let inner = c * (x + R::lit(0.044715) * x2 * x);
    let th = inner.tanh();
    let sech2 = R::one() - th * th;
    R::lit(0.5) * (R::one() + th) + R::lit(0.5) * x * sech2 * c * (R::one() + R::lit(3.0 * 0.044715) * x2)
}

fn sigmoid<R: Real>(x: R) -> R {
    R::one() / (R::one() + (-x).exp())
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
        }
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::MatMul(a.0, b.0), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Add(a.0, b.0), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Mul(a.0, b.0), rg)
    }

    /// `a[i, :] + row[0, :]` for every row `i`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.len(), self.value(a).cols(), "add_row width");
        let mut value = self.value(a).clone();
        let c = value.cols();
        let rd = r.data().to_vec();
        for chunk in value.data_mut().chunks_mut(c) {
            for (x, &y) in chunk.iter_mut().zip(&rd) {
                *x += y;
            }
        }
        let rg = self.rg(a.0) || self.rg(row.0);
        self.push(value, Op::AddRow(a.0, row.0), rg)
    }

    /// `a[i, :] * row[0, :]` for every row `i`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.len(), self.value(a).cols(), "mul_row width");
        let mut value = self.value(a).clone();
        let c = value.cols();
        let rd = r.data().to_vec();
        for chunk in value.data_mut().chunks_mut(c) {
            for (x, &y) in chunk.iter_mut().zip(&rd) {
                *x *= y;
            }
        }
        let rg = self.rg(a.0) || self.rg(row.0);
        self.push(value, Op::MulRow(a.0, row.0), rg)
    }

    pub fn scale(&mut self, a: Var, s: R) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a.0);
        self.push(value, Op::Scale(a.0, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: R) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(a.0);
        self.push(value, Op::AddScalar(a.0), rg)
    }

    /// Row-wise standardization without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: R) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut value = x.clone();
        let mut rstd = Vec::with_capacity(x.rows());
        let inv_c = R::one() / R::from_usize(c).unwrap();
        for row in value.data_mut().chunks_mut(c) {
            let mean = row.iter().copied().sum::<R>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() * inv_c;
            let r = R::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let rg = self.rg(a.0);
        self.push(value, Op::LayerNorm { a: a.0, rstd }, rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a.0);
        self.push(value, Op::Silu(a.0), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a.0);
        self.push(value, Op::Gelu(a.0), rg)
    }

    /// Multi-head scaled dot-product attention `softmax(QKᵀ/√d + M) V`.
    ///
    /// `q` is `[Lq, D]`, `k`/`v` are `[Lk, D]`; heads split `D` into contiguous chunks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &MaskRule) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = (qv.rows(), qv.cols());
        let lk = kv.rows();
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.cols(), d);
        assert_eq!(vv.rows(), lk);
        assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = R::one() / R::from_usize(dh).unwrap().sqrt();
        let neg = R::lit(MASK_VALUE);
        let mut probs = vec![R::zero(); heads * lq * lk];
        let mut out = Tensor::zeros(&[lq, d]);
        for h in 0..heads {
            let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
            R::gemm(
                lq,
                dh,
                lk,
                scale,
                &qv.data()[h * dh..],
                d as isize,
                1,
                &kv.data()[h * dh..],
                1,
                d as isize,
                R::zero(),
                p,
                lk as isize,
                1,
            );
            if let MaskRule::RefBlocksNoisy {
                query_is_ref,
                key_is_ref,
            } = mask
            {
                for i in 0..lq {
                    if query_is_ref[i] {
                        for j in 0..lk {
                            if !key_is_ref[j] {
                                p[i * lk + j] += neg;
                            }
                        }
                    }
                }
            }
            for row in p.chunks_mut(lk) {
                let m = row.iter().copied().fold(R::neg_infinity(), R::max);
                let mut s = R::zero();
                for x in row.iter_mut() {
                    *x = (*x - m).exp();
                    s += *x;
                }
                let inv = R::one() / s;
                for x in row.iter_mut() {
                    *x *= inv;
                }
            }
            R::gemm(
                lq,
                lk,
                dh,
                R::one(),
                p,
                lk as isize,
                1,
                &vv.data()[h * dh..],
                d as isize,
                1,
                R::zero(),
                &mut out.data_mut()[h * dh..],
                d as isize,
                1,
            );
        }
        let rg = self.rg(q.0) || self.rg(k.0) || self.rg(v.0);
        self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                scale,
                probs,
            },
            rg,
        )
    }

    pub fn rotary(&mut self, a: Var, table: Arc<RotaryTable<R>>) -> Var {
        let x = self.value(a);
        let (rows, c) = (x.rows(), x.cols());
        assert_eq!(table.cos.rows(), rows, "rotary table rows");
        assert_eq!(table.cos.cols() * 2, c, "rotary table width");
        let mut value = x.clone();
        for i in 0..rows {
            let cos = table.cos.row(i);
            let sin = table.sin.row(i);
            let row = value.row_mut(i);
            for p in 0..c / 2 {
                let (x0, x1) = (row[2 * p], row[2 * p + 1]);
                row[2 * p] = x0 * cos[p] - x1 * sin[p];
                row[2 * p + 1] = x0 * sin[p] + x1 * cos[p];
            }
        }
        let rg = self.rg(a.0);
        self.push(value, Op::Rotary { a: a.0, table }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tensors: Vec<&Tensor<R>> = parts.iter().map(|p| self.value(*p)).collect();
        let value = Tensor::concat_rows(&tensors);
        let rg = parts.iter().any(|p| self.rg(p.0));
        self.push(value, Op::ConcatRows(parts.iter().map(|p| p.0).collect()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice_rows(start, len);
        let rg = self.rg(a.0);
        self.push(value, Op::SliceRows { a: a.0, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut value = Tensor::zeros(&[rows, total]);
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let src = self.value(*p);
            assert_eq!(src.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                value.row_mut(i)[off..off + w].copy_from_slice(src.row(i));
            }
            off += w;
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        self.push(value, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let src = self.value(a);
        let rows = src.rows();
        let mut value = Tensor::zeros(&[rows, len]);
        for i in 0..rows {
            value.row_mut(i).copy_from_slice(&src.row(i)[start..start + len]);
        }
        let rg = self.rg(a.0);
        self.push(value, Op::SliceCols { a: a.0, start }, rg)
    }

    /// Mean squared error against a constant target, as a `[1, 1]` scalar.
    pub fn mse(&mut self, a: Var, target: &Tensor<R>) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), target.len(), "mse shape mismatch");
        let n = R::from_usize(x.len().max(1)).unwrap();
        let s: R = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        let rg = self.rg(a.0);
        self.push(
            Tensor::full(&[1, 1], s / n),
            Op::Mse {
                a: a.0,
                target: target.clone(),
            },
            rg,
        )
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<R> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<R>>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), R::one()));

        fn acc<R: Real>(grads: &mut [Option<Tensor<R>>], i: usize, g: Tensor<R>) {
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.matmul_t(false, bv, true));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, av.matmul_t(true, &g, false));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.map(|x| -x));
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.zip_map(bv, |x, y| x * y));
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g.zip_map(av, |x, y| x * y));
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        let c = g.cols();
                        let mut gr = Tensor::zeros(self.nodes[*row].value.shape());
                        for chunk in g.data().chunks(c) {
                            for (x, &y) in gr.data_mut().iter_mut().zip(chunk) {
                                *x += y;
                            }
                        }
                        acc(&mut grads, *row, gr);
                    }
                    if self.rg(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::MulRow(a, row) => {
                    let av = &self.nodes[*a].value;
                    let rv = &self.nodes[*row].value;
                    let c = g.cols();
                    if self.rg(*row) {
                        let mut gr = Tensor::zeros(rv.shape());
                        for (gc, ac) in g.data().chunks(c).zip(av.data().chunks(c)) {
                            for ((x, &gy), &ay) in gr.data_mut().iter_mut().zip(gc).zip(ac) {
                                *x += gy * ay;
                            }
                        }
                        acc(&mut grads, *row, gr);
                    }
                    if self.rg(*a) {
                        let mut ga = g;
                        let rd = rv.data();
                        for chunk in ga.data_mut().chunks_mut(c) {
                            for (x, &y) in chunk.iter_mut().zip(rd) {
                                *x *= y;
                            }
                        }
                        acc(&mut grads, *a, ga);
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|x| x * s));
                }
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::LayerNorm { a, rstd } => {
                    let y = &node.value;
                    let c = y.cols();
                    let inv_c = R::one() / R::from_usize(c).unwrap();
                    let mut gx = g;
                    for (r, (grow, yrow)) in gx.data_mut().chunks_mut(c).zip(y.data().chunks(c)).enumerate() {
                        let mg = grow.iter().copied().sum::<R>() * inv_c;
                        let mgy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<R>() * inv_c;
                        for (gv, &yv) in grow.iter_mut().zip(yrow) {
                            *gv = rstd[r] * (*gv - mg - yv * mgy);
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::Silu(a) => {
                    let x = &self.nodes[*a].value;
                    let gx = g.zip_map(x, |gv, xv| {
                        let s = sigmoid(xv);
                        gv * (s + xv * s * (R::one() - s))
                    });
                    acc(&mut grads, *a, gx);
                }
                Op::Gelu(a) => {
                    let x = &self.nodes[*a].value;
                    acc(&mut grads, *a, g.zip_map(x, |gv, xv| gv * gelu_grad(xv)));
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    scale,
                    probs,
                } => {
                    let (qv, kv, vv) = (&self.nodes[*q].value, &self.nodes[*k].value, &self.nodes[*v].value);
                    let (lq, d) = (qv.rows(), qv.cols());
                    let lk = kv.rows();
                    let dh = d / heads;
                    let mut gq = Tensor::zeros(&[lq, d]);
                    let mut gk = Tensor::zeros(&[lk, d]);
                    let mut gv = Tensor::zeros(&[lk, d]);
                    let mut dp = vec![R::zero(); lq * lk];
                    for h in 0..*heads {
                        let p = &probs[h * lq * lk..(h + 1) * lq * lk];
                        // dV = Pᵀ dO
                        R::gemm(
                            lk,
                            lq,
                            dh,
                            R::one(),
                            p,
                            1,
                            lk as isize,
                            &g.data()[h * dh..],
                            d as isize,
                            1,
                            R::zero(),
                            &mut gv.data_mut()[h * dh..],
                            d as isize,
                            1,
                        );
                        // dP = dO Vᵀ
                        R::gemm(
                            lq,
                            dh,
                            lk,
                            R::one(),
                            &g.data()[h * dh..],
                            d as isize,
                            1,
                            &vv.data()[h * dh..],
                            1,
                            d as isize,
                            R::zero(),
                            &mut dp,
                            lk as isize,
                            1,
                        );
                        // dS = P ⊙ (dP − rowsum(P ⊙ dP))
                        for (prow, drow) in p.chunks(lk).zip(dp.chunks_mut(lk)) {
                            let dot: R = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                            for (dv, &pv) in drow.iter_mut().zip(prow) {
                                *dv = pv * (*dv - dot);
                            }
                        }
                        R::gemm(
                            lq,
                            lk,
                            dh,
                            *scale,
                            &dp,
                            lk as isize,
                            1,
                            &kv.data()[h * dh..],
                            d as isize,
                            1,
                            R::zero(),
                            &mut gq.data_mut()[h * dh..],
                            d as isize,
                            1,
                        );
                        R::gemm(
                            lk,
                            lq,
                            dh,
                            *scale,
                            &dp,
                            1,
                            lk as isize,
                            &qv.data()[h * dh..],
                            d as isize,
                            1,
                            R::zero(),
                            &mut gk.data_mut()[h * dh..],
                            d as isize,
                            1,
                        );
                    }
                    if self.rg(*q) {
                        acc(&mut grads, *q, gq);
                    }
                    if self.rg(*k) {
                        acc(&mut grads, *k, gk);
                    }
                    if self.rg(*v) {
                        acc(&mut grads, *v, gv);
                    }
                }
                Op::Rotary { a, table } => {
                    let c = g.cols();
                    let mut gx = g;
                    for i in 0..gx.rows() {
                        let cos = table.cos.row(i);
                        let sin = table.sin.row(i);
                        let row = gx.row_mut(i);
                        for p in 0..c / 2 {
                            let (g0, g1) = (row[2 * p], row[2 * p + 1]);
                            row[2 * p] = g0 * cos[p] + g1 * sin[p];
                            row[2 * p + 1] = -g0 * sin[p] + g1 * cos[p];
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let r = self.nodes[p].value.rows();
                        if self.rg(p) {
                            acc(&mut grads, p, g.slice_rows(off, r));
                        }
                        off += r;
                    }
                }
                Op::SliceRows { a, start } => {
                    let src = &self.nodes[*a].value;
                    let mut ga = Tensor::zeros(&[src.rows(), src.cols()]);
                    let c = src.cols();
                    ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.cols();
                        if self.rg(p) {
                            let rows = g.rows();
                            let mut gp = Tensor::zeros(&[rows, w]);
                            for r in 0..rows {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                            }
                            acc(&mut grads, p, gp);
                        }
                        off += w;
                    }
                }
                Op::SliceCols { a, start } => {
                    let src = &self.nodes[*a].value;
                    let mut ga = Tensor::zeros(&[src.rows(), src.cols()]);
                    let w = g.cols();
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Mse { a, target } => {
                    let x = &self.nodes[*a].value;
                    let n = R::from_usize(x.len().max(1)).unwrap();
                    let coeff = R::lit(2.0) * g.data()[0] / n;
                    let gx = x.zip_map(target, |p, t| coeff * (p - t));
                    acc(&mut grads, *a, gx);
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences over every entry of `x` for a scalar-valued builder.
    fn check<F>(x: &Tensor<f64>, build: F)
    where
        F: Fn(&mut Graph<f64>, Var) -> Var,
    {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let out = build(&mut g, xv);
        let grads = g.backward(out);
        let analytic = grads.get(xv).unwrap().clone();
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let f = |t: Tensor<f64>| {
                let mut g = Graph::new();
                let v = g.param(t);
                let o = build(&mut g, v);
                g.value(o).data()[0]
            };
            let numeric = (f(xp) - f(xm)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-6 * (1.0 + numeric.abs()),
                "entry {i}: analytic {a} numeric {numeric}"
            );
        }
    }

    #[test]
    fn layer_norm_gelu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[3, 5]);
        let target = rand_tensor(&mut rng, &[3, 5]);
        check(&x, |g, v| {
            let n = g.layer_norm(v, 1e-5);
            let a = g.gelu(n);
            let s = g.silu(a);
            g.mse(s, &target)
        });
    }

    #[test]
    fn attention_gradients_with_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[4, 8]);
        let wk = rand_tensor(&mut rng, &[8, 8]);
        let target = rand_tensor(&mut rng, &[4, 8]);
        let mask = MaskRule::RefBlocksNoisy {
            query_is_ref: Arc::from(vec![true, false, false, true]),
            key_is_ref: Arc::from(vec![true, false, false, true]),
        };
        check(&x, |g, v| {
            let w = g.constant(wk.clone());
            let k = g.matmul(v, w);
            let o = g.attention(v, k, v, 2, &mask);
            g.mse(o, &target)
        });
    }

    #[test]
    fn rotary_and_structural_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let angles = rand_tensor(&mut rng, &[3, 2]);
        let table = Arc::new(RotaryTable {
            cos: angles.map(f64::cos),
            sin: angles.map(f64::sin),
        });
        let row = rand_tensor(&mut rng, &[1, 4]);
        check(&x, |g, v| {
            let r = g.rotary(v, table.clone());
            let rw = g.constant(row.clone());
            let m = g.mul_row(r, rw);
            let a = g.add_row(m, rw);
            let top = g.slice_rows(a, 0, 2);
            let all = g.concat_rows(&[a, top]);
            let c1 = g.slice_cols(all, 1, 2);
            let c2 = g.scale(all, 0.5);
            let cat = g.concat_cols(&[c2, c1]);
            let cat = g.add_scalar(cat, 0.1);
            let sq = g.mul(cat, cat);
            let d = g.sub(sq, cat);
            g.mse(d, &Tensor::zeros(&[5, 6]))
        });
    }

    #[test]
    fn rotation_preserves_row_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[5, 6]);
        let angles = rand_tensor(&mut rng, &[5, 3]).map(|a| a * 10.0);
        let table = Arc::new(RotaryTable {
            cos: angles.map(f64::cos),
            sin: angles.map(f64::sin),
        });
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let r = g.rotary(v, table);
        for i in 0..5 {
            let n0: f64 = x.row(i).iter().map(|a| a * a).sum();
            let n1: f64 = g.value(r).row(i).iter().map(|a| a * a).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }
}
