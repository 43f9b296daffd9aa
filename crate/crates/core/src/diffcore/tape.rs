//! Define-by-run computation record and its reverse sweep.
//!
//! Every primitive appends one node holding its forward value and whatever
//! activations the backward rule needs. Nodes are appended in evaluation
//! order, so the record is topologically sorted by construction and the
//! backward pass is a single reverse scan.

use super::functional::{gemm, kl_row, softmax_into, KL_EPSILON};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_trans: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Sum(Var),
    SumCols(Var),
    MeanRows(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        a: Var,
        start: usize,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    GatherRows {
        a: Var,
        idx: Vec<usize>,
    },
    Take {
        a: Var,
        idx: Vec<(usize, usize)>,
    },
    Stack(Vec<Var>),
    LayerNorm {
        a: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    KlRows {
        p: Var,
        q: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf tracked or not depending on `tracked`.
    pub fn leaf(&mut self, value: Tensor, tracked: bool) -> Var {
        self.push(value, Op::Leaf, tracked)
    }

    /// Copy of `a` that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::matrix(m, n, out),
            Op::MatMul {
                a,
                b,
                b_trans: false,
            },
            rg,
        )
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        assert_eq!(k, k2, "matmul_nt inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        self.push(
            Tensor::matrix(m, n, out),
            Op::MatMul {
                a,
                b,
                b_trans: true,
            },
            rg,
        )
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!((r, c), self.dims(b), "elementwise shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::matrix(r, c, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(row), (1, c), "add_row expects a 1x{c} row");
        let bias = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(bias).map(|(x, b)| x + b))
            .collect();
        let rg = self.rg(&[a, row]);
        self.push(Tensor::matrix(r, c, data), Op::AddRow { a, row }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let (r, c) = self.dims(a);
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(r, c, data), op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Ln(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; r * c];
        for (src, dst) in self.value(a).data().chunks(c).zip(out.chunks_mut(c)) {
            softmax_into(src, dst);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(r, c, out), Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut out = Vec::with_capacity(r * c);
        for src in self.value(a).data().chunks(c) {
            let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + src.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            out.extend(src.iter().map(|&x| x - lse));
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(r, c, out), Op::LogSoftmaxRows(a), rg)
    }

    /// Sum of every entry, as a `1×1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, as an `r×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .map(|row| row.iter().sum())
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(r, 1, data), Op::SumCols(a), rg)
    }

    /// Column means over rows, as a `1×c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut data = vec![0.0; c];
        for row in self.value(a).data().chunks(c) {
            for (d, x) in data.iter_mut().zip(row) {
                *d += x;
            }
        }
        for d in &mut data {
            *d /= r as f64;
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(1, c, data), Op::MeanRows(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(c, r, data), Op::Transpose(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.dims(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.dims(p);
            assert_eq!(pc, c, "concat_rows column mismatch");
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::matrix(rows, c, data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = self.dims(p);
                assert_eq!(pr, r, "concat_cols row mismatch");
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::matrix(r, total, data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(
            start + len <= r && len > 0,
            "slice_rows {start}+{len} of {r}"
        );
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(len, c, data), Op::SliceRows { a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.dims(a);
        assert!(
            start + len <= c && len > 0,
            "slice_cols {start}+{len} of {c}"
        );
        let data = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::matrix(r, len, data), Op::SliceCols { a, start }, rg)
    }

    /// Rows of `a` picked by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather_rows index {i} out of {r}");
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        self.push(
            Tensor::matrix(idx.len(), c, data),
            Op::GatherRows {
                a,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Individual entries `(row, col)` of `a`, as a `1×n` row.
    pub fn take(&mut self, a: Var, idx: &[(usize, usize)]) -> Var {
        let t = self.value(a);
        let data = idx.iter().map(|&(r, c)| t.get(r, c)).collect();
        let rg = self.rg(&[a]);
        self.push(
            Tensor::matrix(1, idx.len(), data),
            Op::Take {
                a,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Packs one-element nodes into a `rows×cols` matrix (row-major).
    pub fn stack(&mut self, scalars: &[Var], rows: usize, cols: usize) -> Var {
        assert_eq!(scalars.len(), rows * cols, "stack count");
        let data = scalars.iter().map(|&s| self.value(s).item()).collect();
        let rg = self.rg(scalars);
        self.push(
            Tensor::matrix(rows, cols, data),
            Op::Stack(scalars.to_vec()),
            rg,
        )
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (`1×c` each).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(gamma), (1, c));
        assert_eq!(self.dims(beta), (1, c));
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(a).data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(s);
            for (j, &x) in row.iter().enumerate() {
                let h = (x - mean) * s;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let rg = self.rg(&[a, gamma, beta]);
        self.push(
            Tensor::matrix(r, c, out),
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Row-wise `KL(p ∥ q)`, as an `r×1` column.
    pub fn kl_rows(&mut self, p: Var, q: Var) -> Var {
        let (r, c) = self.dims(p);
        assert_eq!((r, c), self.dims(q), "kl_rows shape mismatch");
        let data = self
            .value(p)
            .data()
            .chunks(c)
            .zip(self.value(q).data().chunks(c))
            .map(|(pr, qr)| kl_row(pr, qr))
            .collect();
        let rg = self.rg(&[p, q]);
        self.push(Tensor::matrix(r, 1, data), Op::KlRows { p, q }, rg)
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(id, g)| {
                let node = &self.nodes[id];
                match (&node.op, g) {
                    (Op::Leaf, Some(g)) if node.requires_grad => {
                        let (r, c) = (node.value.rows(), node.value.cols());
                        Some(Tensor::matrix(r, c, g))
                    }
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            contrib(slot);
        };
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, b_trans } => {
                let (m, k) = self.dims(a);
                let n = out.cols();
                let av = self.value(a).data();
                let bv = self.value(b).data();
                // dA = dC · op(B)ᵀ
                acc(a, &mut |s| gemm(m, n, k, g, false, bv, !b_trans, s, true));
                if b_trans {
                    // B is n×k: dB = dCᵀ · A
                    acc(b, &mut |s| gemm(n, m, k, g, true, av, false, s, true));
                } else {
                    // B is k×n: dB = Aᵀ · dC
                    acc(b, &mut |s| gemm(k, m, n, av, true, g, false, s, true));
                }
            }
            &Op::Add(a, b) => {
                acc(a, &mut |s| add_into(s, g));
                acc(b, &mut |s| add_into(s, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |s| add_into(s, g));
                acc(b, &mut |s| s.iter_mut().zip(g).for_each(|(d, x)| *d -= x));
            }
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                acc(a, &mut |s| {
                    for ((d, x), y) in s.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                });
                acc(b, &mut |s| {
                    for ((d, x), y) in s.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                });
            }
            &Op::AddRow { a, row } => {
                let c = out.cols();
                acc(a, &mut |s| add_into(s, g));
                acc(row, &mut |s| {
                    for chunk in g.chunks(c) {
                        add_into(s, chunk);
                    }
                });
            }
            &Op::Scale(a, k) => acc(a, &mut |s| {
                s.iter_mut().zip(g).for_each(|(d, x)| *d += k * x)
            }),
            &Op::AddScalar(a) => acc(a, &mut |s| add_into(s, g)),
            &Op::Exp(a) => acc(a, &mut |s| {
                for ((d, x), y) in s.iter_mut().zip(g).zip(out.data()) {
                    *d += x * y;
                }
            }),
            &Op::Ln(a) => {
                let av = self.value(a).data();
                acc(a, &mut |s| {
                    for ((d, x), y) in s.iter_mut().zip(g).zip(av) {
                        *d += x / y;
                    }
                })
            }
            &Op::Tanh(a) => acc(a, &mut |s| {
                for ((d, x), y) in s.iter_mut().zip(g).zip(out.data()) {
                    *d += x * (1.0 - y * y);
                }
            }),
            &Op::Relu(a) => {
                let av = self.value(a).data();
                acc(a, &mut |s| {
                    for ((d, x), y) in s.iter_mut().zip(g).zip(av) {
                        if *y > 0.0 {
                            *d += x;
                        }
                    }
                })
            }
            &Op::SoftmaxRows(a) => {
                let c = out.cols();
                acc(a, &mut |s| {
                    for ((ds, gs), ys) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c))
                    {
                        let inner: f64 = gs.iter().zip(ys).map(|(x, y)| x * y).sum();
                        for ((d, x), y) in ds.iter_mut().zip(gs).zip(ys) {
                            *d += y * (x - inner);
                        }
                    }
                })
            }
            &Op::LogSoftmaxRows(a) => {
                let c = out.cols();
                acc(a, &mut |s| {
                    for ((ds, gs), ys) in s.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c))
                    {
                        let total: f64 = gs.iter().sum();
                        for ((d, x), y) in ds.iter_mut().zip(gs).zip(ys) {
                            *d += x - y.exp() * total;
                        }
                    }
                })
            }
            &Op::Sum(a) => acc(a, &mut |s| s.iter_mut().for_each(|d| *d += g[0])),
            &Op::SumCols(a) => {
                let c = self.dims(a).1;
                acc(a, &mut |s| {
                    for (ds, &x) in s.chunks_mut(c).zip(g) {
                        ds.iter_mut().for_each(|d| *d += x);
                    }
                })
            }
            &Op::MeanRows(a) => {
                let (r, c) = self.dims(a);
                let inv = 1.0 / r as f64;
                acc(a, &mut |s| {
                    for ds in s.chunks_mut(c) {
                        for (d, x) in ds.iter_mut().zip(g) {
                            *d += x * inv;
                        }
                    }
                })
            }
            &Op::Transpose(a) => {
                let (r, c) = self.dims(a);
                acc(a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[j * r + i];
                        }
                    }
                })
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    acc(p, &mut |s| add_into(s, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut col = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    acc(p, &mut |s| {
                        for (i, ds) in s.chunks_mut(w).enumerate() {
                            add_into(ds, &g[i * total + col..i * total + col + w]);
                        }
                    });
                    col += w;
                }
            }
            &Op::SliceRows { a, start } => {
                let c = out.cols();
                acc(a, &mut |s| {
                    add_into(&mut s[start * c..start * c + g.len()], g)
                });
            }
            &Op::SliceCols { a, start } => {
                let c = self.dims(a).1;
                let w = out.cols();
                acc(a, &mut |s| {
                    for (ds, gs) in s.chunks_mut(c).zip(g.chunks(w)) {
                        add_into(&mut ds[start..start + w], gs);
                    }
                })
            }
            Op::GatherRows { a, idx } => {
                let c = out.cols();
                acc(*a, &mut |s| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                })
            }
            Op::Take { a, idx } => {
                let c = self.dims(*a).1;
                acc(*a, &mut |s| {
                    for (k, &(r, col)) in idx.iter().enumerate() {
                        s[r * c + col] += g[k];
                    }
                })
            }
            Op::Stack(scalars) => {
                for (k, &v) in scalars.iter().enumerate() {
                    acc(v, &mut |s| s[0] += g[k]);
                }
            }
            Op::LayerNorm {
                a,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = out.cols();
                let gv = self.value(*gamma).data();
                acc(*gamma, &mut |s| {
                    for (gs, hs) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((d, x), h) in s.iter_mut().zip(gs).zip(hs) {
                            *d += x * h;
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for gs in g.chunks(c) {
                        add_into(s, gs);
                    }
                });
                acc(*a, &mut |s| {
                    let inv_c = 1.0 / c as f64;
                    for (((ds, gs), hs), &rs) in s
                        .chunks_mut(c)
                        .zip(g.chunks(c))
                        .zip(xhat.chunks(c))
                        .zip(rstd.iter())
                    {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..c {
                            let dh = gs[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hs[j];
                        }
                        mean_dh *= inv_c;
                        mean_dh_h *= inv_c;
                        for j in 0..c {
                            let dh = gs[j] * gv[j];
                            ds[j] += rs * (dh - mean_dh - hs[j] * mean_dh_h);
                        }
                    }
                });
            }
            &Op::KlRows { p, q } => {
                let c = self.dims(p).1;
                let pv = self.value(p).data();
                let qv = self.value(q).data();
                acc(p, &mut |s| {
                    for (k, d) in s.iter_mut().enumerate() {
                        let pi = pv[k];
                        if pi > 0.0 {
                            *d += g[k / c] * ((pi / qv[k].max(KL_EPSILON)).ln() + 1.0);
                        }
                    }
                });
                acc(q, &mut |s| {
                    for (k, d) in s.iter_mut().enumerate() {
                        if qv[k] >= KL_EPSILON {
                            *d -= g[k / c] * pv[k] / qv[k];
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
