use std::sync::Arc;

use super::gemm::{gemm, View};
use super::tape::Node;
use super::{Scalar, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// sqrt(2/pi) for the tanh-approximate GELU.
const GELU_K: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044715;

pub(crate) enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Bmm {
        a: usize,
        b: usize,
        tb: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    AddBias {
        x: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        s: T,
    },
    Gelu {
        x: usize,
    },
    Relu {
        x: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax {
        x: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    CrossEntropy {
        logits: usize,
        probs: Vec<T>,
        targets: Vec<Option<usize>>,
        count: usize,
    },
    GatherRows {
        x: usize,
        idx: Arc<Vec<usize>>,
        row_len: usize,
    },
    Concat {
        parts: Vec<usize>,
    },
    Reshape {
        x: usize,
    },
    Sum {
        x: usize,
    },
    GroupedMix {
        x: usize,
        w: usize,
        b: usize,
        windows: usize,
        tokens: usize,
        channels: usize,
        heads: usize,
    },
}

fn same_tape<T: Scalar>(a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(shape_err!("operands live on different tapes"))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    fn emit(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'t, T> {
        self.tape.push(Arc::new(value), op, requires_grad)
    }

    fn mm(&self, other: &Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        same_tape(self, other)?;
        let (a, b) = (self.value(), other.value());
        let (&[ar, ac], &[br, bc]) = (a.shape(), b.shape()) else {
            return Err(shape_err!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            ));
        };
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err!(
                "matmul inner dims differ: {:?}{} x {:?}{}",
                a.shape(),
                if ta { "ᵀ" } else { "" },
                b.shape(),
                if tb { "ᵀ" } else { "" }
            ));
        }
        let mut out = vec![T::zero(); m * n];
        let av = View::dense(0, ar, ac);
        let bv = View::dense(0, br, bc);
        gemm(
            a.data(),
            if ta { av.t() } else { av },
            b.data(),
            if tb { bv.t() } else { bv },
            &mut out,
            View::dense(0, m, n),
            false,
        );
        self.tape.counter().add((m * k * n) as u64);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.emit(
            Tensor::new([m, n], out)?,
            Op::MatMul {
                a: self.id,
                b: other.id,
                ta,
                tb,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.mm(other, false, false)
    }

    /// `[m,k] × [n,k]ᵀ → [m,n]`; the layout of `nn.Linear` weights.
    pub fn matmul_t(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.mm(other, false, true)
    }

    fn bmm_impl(&self, other: &Var<'t, T>, tb: bool) -> Result<Var<'t, T>> {
        same_tape(self, other)?;
        let (a, b) = (self.value(), other.value());
        let (&[batch, m, k], &[b0, b1, b2]) = (a.shape(), b.shape()) else {
            return Err(shape_err!(
                "bmm needs rank-3 operands, got {:?} and {:?}",
                a.shape(),
                b.shape()
            ));
        };
        let (k2, n) = if tb { (b2, b1) } else { (b1, b2) };
        if b0 != batch || k2 != k {
            return Err(shape_err!(
                "bmm shape mismatch: {:?} x {:?} (transpose_b={tb})",
                a.shape(),
                b.shape()
            ));
        }
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let bv = View::dense(i * b1 * b2, b1, b2);
            gemm(
                a.data(),
                View::dense(i * m * k, m, k),
                b.data(),
                if tb { bv.t() } else { bv },
                &mut out,
                View::dense(i * m * n, m, n),
                false,
            );
        }
        self.tape.counter().add((batch * m * k * n) as u64);
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.emit(
            Tensor::new([batch, m, n], out)?,
            Op::Bmm {
                a: self.id,
                b: other.id,
                tb,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Batched `[B,m,k] × [B,k,n] → [B,m,n]`.
    pub fn bmm(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.bmm_impl(other, false)
    }

    /// Batched `[B,m,k] × [B,n,k]ᵀ → [B,m,n]`.
    pub fn bmm_t(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        self.bmm_impl(other, true)
    }

    fn zip_same(&self, other: &Var<'t, T>, what: &str, f: impl Fn(T, T) -> T) -> Result<(Tensor<T>, bool)> {
        same_tape(self, other)?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err!(
                "{what} needs equal shapes, got {:?} and {:?}",
                a.shape(),
                b.shape()
            ));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok((Tensor::new(a.shape().to_vec(), data)?, rg))
    }

    pub fn add(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (v, rg) = self.zip_same(other, "add", |x, y| x + y)?;
        Ok(self.emit(
            v,
            Op::Add {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    pub fn mul(&self, other: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (v, rg) = self.zip_same(other, "mul", |x, y| x * y)?;
        Ok(self.emit(
            v,
            Op::Mul {
                a: self.id,
                b: other.id,
            },
            rg,
        ))
    }

    /// Adds a `[C]` vector to every row of a `[..., C]` tensor.
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(self, bias)?;
        let (x, b) = (self.value(), bias.value());
        let c = *x.shape().last().unwrap();
        if b.numel() != c || b.rank() != 1 {
            return Err(shape_err!(
                "bias of shape {:?} does not match last dim of {:?}",
                b.shape(),
                x.shape()
            ));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.emit(
            Tensor::new(x.shape().to_vec(), data)?,
            Op::AddBias { x: self.id, b: bias.id },
            rg,
        ))
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        let x = self.value();
        let data = x.data().iter().map(|&v| v * s).collect();
        let v = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.emit(v, Op::Scale { x: self.id, s }, self.requires_grad())
    }

    /// Tanh-approximate GELU.
    pub fn gelu(&self) -> Var<'t, T> {
        let x = self.value();
        let (k, c, half) = (T::from_f64(GELU_K), T::from_f64(GELU_C), T::from_f64(0.5));
        let data = x
            .data()
            .iter()
            .map(|&v| half * v * (T::one() + (k * (v + c * v * v * v)).tanh()))
            .collect();
        self.tape.counter().add_elementwise(x.numel() as u64);
        let v = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.emit(v, Op::Gelu { x: self.id }, self.requires_grad())
    }

    pub fn relu(&self) -> Var<'t, T> {
        let x = self.value();
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let v = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        self.emit(v, Op::Relu { x: self.id }, self.requires_grad())
    }

    /// Normalizes over the last dim, then applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        same_tape(self, gamma)?;
        same_tape(self, beta)?;
        let (x, g, b) = (self.value(), gamma.value(), beta.value());
        let c = *x.shape().last().unwrap();
        if g.numel() != c || b.numel() != c {
            return Err(shape_err!(
                "layernorm over {c} channels given gamma {:?} and beta {:?}",
                g.shape(),
                b.shape()
            ));
        }
        let rows = x.numel() / c;
        let inv_c = T::from_f64(1.0 / c as f64);
        let eps = T::from_f64(eps);
        let mut out = vec![T::zero(); x.numel()];
        let mut xhat = vec![T::zero(); x.numel()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g.data()[j] + b.data()[j];
            }
        }
        self.tape.counter().add_elementwise(x.numel() as u64);
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        Ok(self.emit(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(shape_err!("softmax axis {axis} out of range for {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = x.data();
        let mut out = vec![T::zero(); x.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        self.tape.counter().add_elementwise(x.numel() as u64);
        Ok(self.emit(
            Tensor::new(shape.to_vec(), out)?,
            Op::Softmax {
                x: self.id,
                outer,
                len,
                inner,
            },
            self.requires_grad(),
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `[L,V]` logits, skipping positions equal to `ignore_id`.
    pub fn cross_entropy(&self, targets: &[usize], ignore_id: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let &[rows, vocab] = x.shape() else {
            return Err(shape_err!("cross_entropy needs [L,V] logits, got {:?}", x.shape()));
        };
        if targets.len() != rows {
            return Err(shape_err!("{} targets for {rows} logit rows", targets.len()));
        }
        let mut probs = vec![T::zero(); x.numel()];
        let mut kept = Vec::with_capacity(rows);
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            let row = &x.data()[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            for (p, &v) in probs[r * vocab..(r + 1) * vocab].iter_mut().zip(row) {
                *p = (v - max).exp() / sum;
            }
            if t == ignore_id {
                kept.push(None);
                continue;
            }
            if t >= vocab {
                return Err(shape_err!("target id {t} outside vocabulary of {vocab}"));
            }
            total += (sum.ln() + max - row[t]).as_f64();
            count += 1;
            kept.push(Some(t));
        }
        if count == 0 {
            return Err(Error::UndefinedLoss);
        }
        let loss = T::from_f64(total / count as f64);
        Ok(self.emit(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                probs,
                targets: kept,
                count,
            },
            self.requires_grad(),
        ))
    }

    /// Builds `out_shape` by copying rows of length `row_len`:
    /// output row `r` is input row `idx[r]`.
    pub fn gather_rows(
        &self,
        idx: Arc<Vec<usize>>,
        row_len: usize,
        out_shape: impl Into<Vec<usize>>,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let out_shape = out_shape.into();
        if row_len == 0 || !x.numel().is_multiple_of(row_len) {
            return Err(shape_err!("row length {row_len} does not tile {:?}", x.shape()));
        }
        let in_rows = x.numel() / row_len;
        if idx.len() * row_len != out_shape.iter().product::<usize>() {
            return Err(shape_err!("{} rows of {row_len} cannot fill {out_shape:?}", idx.len()));
        }
        let mut out = Vec::with_capacity(idx.len() * row_len);
        for &i in idx.iter() {
            if i >= in_rows {
                return Err(shape_err!("row index {i} out of range ({in_rows} rows)"));
            }
            out.extend_from_slice(&x.data()[i * row_len..(i + 1) * row_len]);
        }
        Ok(self.emit(
            Tensor::new(out_shape, out)?,
            Op::GatherRows {
                x: self.id,
                idx,
                row_len,
            },
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let x = self.value();
        let v = Tensor::new(shape, x.data().to_vec())?;
        Ok(self.emit(v, Op::Reshape { x: self.id }, self.requires_grad()))
    }

    /// Concatenates along the leading axis.
    pub fn concat(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let tail = first.shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for p in parts {
            same_tape(first, p)?;
            let v = p.value();
            if v.shape()[1..] != tail[..] {
                return Err(shape_err!(
                    "concat trailing shapes differ: {:?} vs {:?}",
                    first.shape(),
                    v.shape()
                ));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
            rg |= p.requires_grad();
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(first.emit(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
            },
            rg,
        ))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let x = self.value();
        let total = x.data().iter().copied().sum();
        self.emit(Tensor::scalar(total), Op::Sum { x: self.id }, self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = T::from_f64(self.numel() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Per-window, per-head mixing along the token axis.
    ///
    /// `self` is `[W,S,C]`, `weights` `[n,S,S]`, `bias` `[n,S]`. Channels
    /// are split into `n` contiguous groups; group `i` is mixed by
    /// `weights[i]`: `out[w,j,c] = Σ_k weights[i,j,k]·x[w,k,c] + bias[i,j]`.
    pub fn grouped_mix(&self, weights: &Var<'t, T>, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(self, weights)?;
        same_tape(self, bias)?;
        let (x, w, b) = (self.value(), weights.value(), bias.value());
        let &[windows, tokens, channels] = x.shape() else {
            return Err(shape_err!("grouped mix input must be [W,S,C], got {:?}", x.shape()));
        };
        let &[heads, s1, s2] = w.shape() else {
            return Err(shape_err!("mix weights must be [n,S,S], got {:?}", w.shape()));
        };
        if s1 != tokens || s2 != tokens {
            return Err(shape_err!(
                "mix weights {:?} do not match {tokens} tokens per window",
                w.shape()
            ));
        }
        if b.shape() != [heads, tokens] {
            return Err(shape_err!("mix bias {:?} should be [{heads}, {tokens}]", b.shape()));
        }
        if channels % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide {channels} channels"
            )));
        }
        let d = channels / heads;
        let mut out = vec![T::zero(); x.numel()];
        for win in 0..windows {
            for h in 0..heads {
                let off = win * tokens * channels + h * d;
                gemm(
                    w.data(),
                    View::dense(h * tokens * tokens, tokens, tokens),
                    x.data(),
                    View::strided(off, tokens, d, channels),
                    &mut out,
                    View::strided(off, tokens, d, channels),
                    false,
                );
                for j in 0..tokens {
                    let bv = b.data()[h * tokens + j];
                    let row = off + j * channels;
                    for v in &mut out[row..row + d] {
                        *v += bv;
                    }
                }
            }
        }
        self.tape.counter().add((windows * heads * tokens * tokens * d) as u64);
        let rg = self.requires_grad() || weights.requires_grad() || bias.requires_grad();
        Ok(self.emit(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::GroupedMix {
                x: self.id,
                w: weights.id,
                b: bias.id,
                windows,
                tokens,
                channels,
                heads,
            },
            rg,
        ))
    }
}

/// Zero-initialized gradient buffer for `id`, or `None` if it needs no grad.
fn slot<'g, T: Scalar>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let n = nodes[id].value.numel();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
}

fn val<T: Scalar>(nodes: &[Node<T>], id: usize) -> &Tensor<T> {
    &nodes[id].value
}

pub(crate) fn backward_op<T: Scalar>(
    op: &Op<T>,
    out: &Tensor<T>,
    g: &[T],
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
) {
    match op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb, m, k, n } => {
            let gv = View::dense(0, m, n);
            let (av, bv) = (val(nodes, a), val(nodes, b));
            // logical views of op(a) [m,k] and op(b) [k,n]
            let a_log = if ta {
                View::dense(0, k, m).t()
            } else {
                View::dense(0, m, k)
            };
            let b_log = if tb {
                View::dense(0, n, k).t()
            } else {
                View::dense(0, k, n)
            };
            if let Some(ga) = slot(grads, nodes, a) {
                // d op(a) = G · op(b)ᵀ, written through the stored layout
                let target = if ta {
                    View::dense(0, k, m).t()
                } else {
                    View::dense(0, m, k)
                };
                gemm(g, gv, bv.data(), b_log.t(), ga, target, true);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                let target = if tb {
                    View::dense(0, n, k).t()
                } else {
                    View::dense(0, k, n)
                };
                gemm(av.data(), a_log.t(), g, gv, gb, target, true);
            }
        }
        &Op::Bmm {
            a,
            b,
            tb,
            batch,
            m,
            k,
            n,
        } => {
            let (av, bv) = (val(nodes, a), val(nodes, b));
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..batch {
                    let b_log = if tb {
                        View::dense(i * n * k, n, k).t()
                    } else {
                        View::dense(i * k * n, k, n)
                    };
                    gemm(
                        g,
                        View::dense(i * m * n, m, n),
                        bv.data(),
                        b_log.t(),
                        ga,
                        View::dense(i * m * k, m, k),
                        true,
                    );
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for i in 0..batch {
                    let target = if tb {
                        View::dense(i * n * k, n, k).t()
                    } else {
                        View::dense(i * k * n, k, n)
                    };
                    gemm(
                        av.data(),
                        View::dense(i * m * k, m, k).t(),
                        g,
                        View::dense(i * m * n, m, n),
                        gb,
                        target,
                        true,
                    );
                }
            }
        }
        &Op::Add { a, b } => {
            for id in [a, b] {
                if let Some(s) = slot(grads, nodes, id) {
                    s.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
                }
            }
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (val(nodes, a).data(), val(nodes, b).data());
            if let Some(s) = slot(grads, nodes, a) {
                for ((d, &gv), &o) in s.iter_mut().zip(g).zip(bv) {
                    *d += gv * o;
                }
            }
            if let Some(s) = slot(grads, nodes, b) {
                for ((d, &gv), &o) in s.iter_mut().zip(g).zip(av) {
                    *d += gv * o;
                }
            }
        }
        &Op::AddBias { x, b } => {
            if let Some(s) = slot(grads, nodes, x) {
                s.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
            if let Some(s) = slot(grads, nodes, b) {
                let c = s.len();
                for row in g.chunks_exact(c) {
                    s.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
            }
        }
        &Op::Scale { x, s } => {
            if let Some(d) = slot(grads, nodes, x) {
                d.iter_mut().zip(g).for_each(|(d, &v)| *d += v * s);
            }
        }
        &Op::Gelu { x } => {
            let xv = val(nodes, x).data();
            let (k, c, half) = (T::from_f64(GELU_K), T::from_f64(GELU_C), T::from_f64(0.5));
            let three = T::from_f64(3.0);
            if let Some(d) = slot(grads, nodes, x) {
                for ((d, &gv), &v) in d.iter_mut().zip(g).zip(xv) {
                    let t = (k * (v + c * v * v * v)).tanh();
                    let dt = (T::one() - t * t) * k * (T::one() + three * c * v * v);
                    *d += gv * (half * (T::one() + t) + half * v * dt);
                }
            }
        }
        &Op::Relu { x } => {
            let xv = val(nodes, x).data();
            if let Some(d) = slot(grads, nodes, x) {
                for ((d, &gv), &v) in d.iter_mut().zip(g).zip(xv) {
                    if v > T::zero() {
                        *d += gv;
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
            let gm = val(nodes, *gamma).data();
            let c = gm.len();
            if let Some(d) = slot(grads, nodes, *gamma) {
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for j in 0..c {
                        d[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(d) = slot(grads, nodes, *beta) {
                for grow in g.chunks_exact(c) {
                    d.iter_mut().zip(grow).for_each(|(d, &v)| *d += v);
                }
            }
            if let Some(d) = slot(grads, nodes, *x) {
                let inv_c = T::from_f64(1.0 / c as f64);
                for (r, (grow, hrow)) in g.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                    let mut mean_g = T::zero();
                    let mut mean_gh = T::zero();
                    for j in 0..c {
                        let gh = grow[j] * gm[j];
                        mean_g += gh;
                        mean_gh += gh * hrow[j];
                    }
                    mean_g = mean_g * inv_c;
                    mean_gh = mean_gh * inv_c;
                    for j in 0..c {
                        let gh = grow[j] * gm[j];
                        d[r * c + j] += rstd[r] * (gh - mean_g - hrow[j] * mean_gh);
                    }
                }
            }
        }
        &Op::Softmax { x, outer, len, inner } => {
            let y = out.data();
            if let Some(d) = slot(grads, nodes, x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            probs,
            targets,
            count,
        } => {
            let scale = g[0] / T::from_f64(*count as f64);
            let vocab = probs.len() / targets.len();
            if let Some(d) = slot(grads, nodes, *logits) {
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..vocab {
                        let mut p = probs[r * vocab + j];
                        if j == t {
                            p = p - T::one();
                        }
                        d[r * vocab + j] += scale * p;
                    }
                }
            }
        }
        Op::GatherRows { x, idx, row_len } => {
            let row_len = *row_len;
            if let Some(d) = slot(grads, nodes, *x) {
                for (r, &i) in idx.iter().enumerate() {
                    let src = &g[r * row_len..(r + 1) * row_len];
                    d[i * row_len..(i + 1) * row_len]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &v)| *d += v);
                }
            }
        }
        Op::Concat { parts } => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p].value.numel();
                if let Some(d) = slot(grads, nodes, p) {
                    d.iter_mut().zip(&g[offset..offset + n]).for_each(|(d, &v)| *d += v);
                }
                offset += n;
            }
        }
        &Op::Reshape { x } => {
            if let Some(d) = slot(grads, nodes, x) {
                d.iter_mut().zip(g).for_each(|(d, &v)| *d += v);
            }
        }
        &Op::Sum { x } => {
            if let Some(d) = slot(grads, nodes, x) {
                d.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        &Op::GroupedMix {
            x,
            w,
            b,
            windows,
            tokens,
            channels,
            heads,
        } => {
            let d = channels / heads;
            let (xv, wv) = (val(nodes, x).data(), val(nodes, w).data());
            if let Some(gx) = slot(grads, nodes, x) {
                for win in 0..windows {
                    for h in 0..heads {
                        let off = win * tokens * channels + h * d;
                        gemm(
                            wv,
                            View::dense(h * tokens * tokens, tokens, tokens).t(),
                            g,
                            View::strided(off, tokens, d, channels),
                            gx,
                            View::strided(off, tokens, d, channels),
                            true,
                        );
                    }
                }
            }
            if let Some(gw) = slot(grads, nodes, w) {
                for win in 0..windows {
                    for h in 0..heads {
                        let off = win * tokens * channels + h * d;
                        gemm(
                            g,
                            View::strided(off, tokens, d, channels),
                            xv,
                            View::strided(off, tokens, d, channels).t(),
                            gw,
                            View::dense(h * tokens * tokens, tokens, tokens),
                            true,
                        );
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for win in 0..windows {
                    for h in 0..heads {
                        for j in 0..tokens {
                            let row = win * tokens * channels + j * channels + h * d;
                            gb[h * tokens + j] += g[row..row + d].iter().copied().sum();
                        }
                    }
                }
            }
        }
    }
}
