//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends one node holding its output and whatever it needs
//! for the backward pass. Nodes are only ever appended after their inputs, so
//! walking the node list backwards is a reverse topological order.

use alloc::vec;
use alloc::vec::Vec;

use crate::dual::{self, AttentionKind, ScanDims};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, MatmulPlan, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    ScaleRows(Var, Var),
    Neg(Var),
    Exp(Var),
    Sigmoid(Var),
    Softplus(Var),
    Silu(Var),
    MatMul(Var, Var, MatmulPlan),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<S>,
    },
    Softmax(Var),
    Rope {
        x: Var,
        positions: Vec<usize>,
        theta: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        kind: AttentionKind,
        scale: S,
        causal: bool,
        weights: Vec<S>,
    },
    Conv {
        x: Var,
        w: Var,
        bias: Var,
    },
    Embedding {
        table: Var,
        tokens: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<S>,
        probs: Vec<S>,
    },
    Scan {
        c: Option<Var>,
        b: Var,
        x: Var,
        dt: Var,
        decay: Var,
        h0: Option<Var>,
        states: Vec<S>,
        dims: ScanDims,
    },
    Sum(Var),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// A single-owner record of operations.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && &a[a.len() - b.len()..] == b
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softplus<S: Scalar>(x: S) -> S {
    // log(1 + e^x) without overflow.
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

/// Elementwise helpers shared with the non-recording inference path.
pub mod scalar_fn {
    use super::*;

    pub fn sigmoid<S: Scalar>(x: S) -> S {
        super::sigmoid(x)
    }

    pub fn softplus<S: Scalar>(x: S) -> S {
        super::softplus(x)
    }

    pub fn silu<S: Scalar>(x: S) -> S {
        x * super::sigmoid(x)
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn binary(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (va, vb) = (self.value(a), self.value(b));
        if !suffix_broadcast(va.shape(), vb.shape()) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let nb = vb.numel().max(1);
        let (da, db) = (va.data(), vb.data());
        let data = da.iter().enumerate().map(|(i, &x)| f(x, db[i % nb])).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    /// `a + b`, where `b`'s shape may be a trailing suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// `a ∘ b`, where `b`'s shape may be a trailing suffix of `a`'s.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    /// Multiplies every last-axis row of `a: [.., W]` by the matching entry of `b: [..]`.
    pub fn scale_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() == 0 || &va.shape()[..va.rank() - 1] != vb.shape() {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let w = va.shape()[va.rank() - 1].max(1);
        let data = va.data().iter().enumerate().map(|(i, &x)| x * vb.data()[i / w]).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ScaleRows(a, b), &[a, b]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.push(out, Op::Neg(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(scalar_fn::silu);
        self.push(out, Op::Silu(a), &[a])
    }

    /// Batched `[.., m, k] @ [k, n]` or `[.., m, k] @ [.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let mut out = vec![S::zero(); numel(&plan.out_shape)];
        plan.run(self.value(a).data(), self.value(b).data(), &mut out);
        let out = Tensor::new(plan.out_shape.clone(), out)?;
        Ok(self.push(out, Op::MatMul(a, b, plan), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), &[a]))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(invalid("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let out = self.value(x).slice_axis(axis, start, end)?;
        Ok(self.push(out, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let out = self.value(a).concat_axis(self.value(b), axis)?;
        Ok(self.push(out, Op::Concat { a, b, axis }, &[a, b]))
    }

    /// Root-mean-square normalisation over the last axis, scaled by `w`.
    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        let d = vw.numel();
        if vw.rank() != 1 || vx.shape().last() != Some(&d) {
            return Err(Error::ShapeMismatch {
                op: "rmsnorm",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        let eps = S::lit(eps);
        let rows = vx.numel() / d;
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.numel());
        for r in 0..rows {
            let row = &vx.data()[r * d..(r + 1) * d];
            let ms = row.iter().map(|&v| v * v).sum::<S>() / S::lit(d as f64);
            let inv = S::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            out.extend(row.iter().zip(vw.data()).map(|(&v, &g)| v * inv * g));
        }
        let out = Tensor::new(vx.shape().to_vec(), out)?;
        Ok(self.push(out, Op::RmsNorm { x, w, inv_rms }, &[x, w]))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_lastdim(self.value(a))?;
        Ok(self.push(out, Op::Softmax(a), &[a]))
    }

    pub fn rope(&mut self, x: Var, positions: &[usize], theta: f64) -> Result<Var> {
        let out = dual::rope_single(self.value(x), positions, theta)?;
        Ok(self.push(
            out,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                theta,
            },
            &[x],
        ))
    }

    /// Fused attention over `[.., T, H, D]` inputs.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        kind: AttentionKind,
        scale: S,
        causal: bool,
    ) -> Result<Var> {
        let (out, weights) =
            dual::attention_kernel(self.value(q), self.value(k), self.value(v), kind, scale, causal)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                kind,
                scale,
                causal,
                weights,
            },
            &[q, k, v],
        ))
    }

    /// Depthwise causal convolution: `x: [B, T, C]`, `w: [W, C]`, `bias: [C]`.
    /// Tap `W-1` multiplies the current position.
    pub fn causal_conv(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let out = causal_conv_forward(self.value(x), self.value(w), self.value(bias))?;
        Ok(self.push(out, Op::Conv { x, w, bias }, &[x, w, bias]))
    }

    /// Row gather: `tokens` (flattened, with `shape` as leading extents) into `table: [V, D]`.
    pub fn embedding(&mut self, table: Var, tokens: &[usize], shape: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 || numel(shape) != tokens.len() {
            return Err(invalid("embedding expects a [V, D] table and matching token shape"));
        }
        let (vocab, d) = (tv.dim(0), tv.dim(1));
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            if t >= vocab {
                return Err(invalid(alloc::format!("token {t} outside vocabulary {vocab}")));
            }
            out.extend_from_slice(&tv.data()[t * d..(t + 1) * d]);
        }
        let mut out_shape = shape.to_vec();
        out_shape.push(d);
        let out = Tensor::new(out_shape, out)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                tokens: tokens.to_vec(),
            },
            &[table],
        ))
    }

    /// Weighted mean cross-entropy over rows of `logits: [.., V]`.
    ///
    /// `weights` has one entry per row; rows with zero weight are ignored and
    /// the result is divided by the total weight.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[S]) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = *lv.shape().last().ok_or_else(|| invalid("cross_entropy on a scalar"))?;
        let rows = lv.numel() / vocab.max(1);
        if targets.len() != rows || weights.len() != rows {
            return Err(invalid("cross_entropy: one target and weight per row"));
        }
        let total: S = weights.iter().copied().sum();
        if total <= S::zero() {
            return Err(invalid("cross_entropy: no weighted rows"));
        }
        let probs = softmax_lastdim(lv)?.into_data();
        let mut loss = S::zero();
        let mut norm_w = Vec::with_capacity(rows);
        for r in 0..rows {
            let w = weights[r] / total;
            norm_w.push(w);
            if weights[r] != S::zero() {
                if targets[r] >= vocab {
                    return Err(invalid("cross_entropy: target outside vocabulary"));
                }
                let row = &lv.data()[r * vocab..(r + 1) * vocab];
                let m = row.iter().copied().fold(S::neg_infinity(), S::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<S>().ln();
                loss = loss + w * (lse - row[targets[r]]);
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: norm_w,
                probs,
            },
            &[logits],
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn scan_impl(
        &mut self,
        c: Option<Var>,
        b: Var,
        x: Var,
        dt: Var,
        decay: Var,
        h0: Option<Var>,
    ) -> Result<Var> {
        let dims = dual::scan_dims(
            self.shape(b),
            self.shape(x),
            self.shape(dt),
            self.shape(decay),
            c.map(|c| self.shape(c)),
            h0.map(|h| self.shape(h)),
        )?;
        let (y, states, fin) = dual::scan_kernel(
            c.map(|c| self.value(c).data()),
            self.value(b).data(),
            self.value(x).data(),
            self.value(dt).data(),
            self.value(decay).data(),
            h0.map(|h| self.value(h).data()),
            dims,
        );
        let batched = self.shape(b).len() == 4;
        let out = if c.is_some() {
            Tensor::new(self.shape(x).to_vec(), y)?
        } else if batched {
            Tensor::new(vec![dims.batch, dims.heads, dims.n, dims.d], fin)?
        } else {
            Tensor::new(vec![dims.heads, dims.n, dims.d], fin)?
        };
        let mut inputs = vec![b, x, dt, decay];
        inputs.extend(c);
        inputs.extend(h0);
        Ok(self.push(
            out,
            Op::Scan {
                c,
                b,
                x,
                dt,
                decay,
                h0,
                states,
                dims,
            },
            &inputs,
        ))
    }

    /// SSM readout `y` for `c, b: [.., T, H, N]`, `x: [.., T, H, D]`,
    /// `dt, decay: [.., T, H]` and optional initial state `[.., H, N, D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn ssm_scan(&mut self, c: Var, b: Var, x: Var, dt: Var, decay: Var, h0: Option<Var>) -> Result<Var> {
        self.scan_impl(Some(c), b, x, dt, decay, h0)
    }

    /// Final SSM state `[.., H, N, D]` after consuming the sequence from zero.
    pub fn ssm_final_state(&mut self, b: Var, x: Var, dt: Var, decay: Var) -> Result<Var> {
        self.scan_impl(None, b, x, dt, decay, None)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Runs the reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        if self.value(loss).numel() != 1 {
            return Err(invalid("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Grads {
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| {
                    let node = &self.nodes[i];
                    match (&node.op, g) {
                        (Op::Leaf, Some(g)) if node.needs_grad => {
                            Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                        }
                        _ => None,
                    }
                })
                .collect(),
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let acc = |grads: &mut [Option<Vec<S>>], v: Var, contrib: &dyn Fn(&mut [S])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); self.nodes[v.0].value.numel()]);
            contrib(slot);
        };
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, &|s| add_into(s, g));
                acc(grads, *b, &|s| reduce_into(s, g, |gg, _| gg));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let nb = db.len().max(1);
                acc(grads, *a, &|s| {
                    for (i, v) in s.iter_mut().enumerate() {
                        *v = *v + g[i] * db[i % nb];
                    }
                });
                acc(grads, *b, &|s| reduce_into(s, g, |gg, i| gg * da[i]));
            }
            Op::Scale(a, c) => acc(grads, *a, &|s| {
                for (v, &gg) in s.iter_mut().zip(g) {
                    *v = *v + gg * *c;
                }
            }),
            Op::ScaleRows(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let w = (da.len() / db.len().max(1)).max(1);
                acc(grads, *a, &|s| {
                    for (i, v) in s.iter_mut().enumerate() {
                        *v = *v + g[i] * db[i / w];
                    }
                });
                acc(grads, *b, &|s| {
                    for (i, (&gg, &x)) in g.iter().zip(da).enumerate() {
                        s[i / w] = s[i / w] + gg * x;
                    }
                });
            }
            Op::Neg(a) => acc(grads, *a, &|s| {
                for (v, &gg) in s.iter_mut().zip(g) {
                    *v = *v - gg;
                }
            }),
            Op::Exp(a) => acc(grads, *a, &|s| {
                for ((v, &gg), &o) in s.iter_mut().zip(g).zip(out) {
                    *v = *v + gg * o;
                }
            }),
            Op::Sigmoid(a) => acc(grads, *a, &|s| {
                for ((v, &gg), &o) in s.iter_mut().zip(g).zip(out) {
                    *v = *v + gg * o * (S::one() - o);
                }
            }),
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, &|s| {
                    for ((v, &gg), &xx) in s.iter_mut().zip(g).zip(x) {
                        *v = *v + gg * sigmoid(xx);
                    }
                })
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                acc(grads, *a, &|s| {
                    for ((v, &gg), &xx) in s.iter_mut().zip(g).zip(x) {
                        let sg = sigmoid(xx);
                        *v = *v + gg * sg * (S::one() + xx * (S::one() - sg));
                    }
                })
            }
            Op::MatMul(a, b, plan) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = self.wants(*a).then(|| vec![S::zero(); da.len()]);
                let mut gb = self.wants(*b).then(|| vec![S::zero(); db.len()]);
                plan.backward(da, db, g, ga.as_deref_mut(), gb.as_deref_mut());
                if let Some(ga) = ga {
                    acc(grads, *a, &|s| add_into(s, &ga));
                }
                if let Some(gb) = gb {
                    acc(grads, *b, &|s| add_into(s, &gb));
                }
            }
            Op::Reshape(a) => acc(grads, *a, &|s| add_into(s, g)),
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())
                    .and_then(|t| t.permute(&inv))
                    .expect("permute adjoint");
                acc(grads, *a, &|s| add_into(s, gt.data()));
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let outer = numel(&xs[..*axis]);
                let inner = numel(&xs[axis + 1..]);
                let (len, width) = (xs[*axis], node.value.shape()[*axis]);
                acc(grads, *x, &|s| {
                    for o in 0..outer {
                        let dst = &mut s[(o * len + start) * inner..(o * len + start + width) * inner];
                        add_into(dst, &g[o * width * inner..(o + 1) * width * inner]);
                    }
                });
            }
            Op::Concat { a, b, axis } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let outer = numel(&sa[..*axis]);
                let inner = numel(&sa[axis + 1..]);
                let (la, lb) = (sa[*axis] * inner, sb[*axis] * inner);
                acc(grads, *a, &|s| {
                    for o in 0..outer {
                        add_into(&mut s[o * la..(o + 1) * la], &g[o * (la + lb)..o * (la + lb) + la]);
                    }
                });
                acc(grads, *b, &|s| {
                    for o in 0..outer {
                        add_into(&mut s[o * lb..(o + 1) * lb], &g[o * (la + lb) + la..(o + 1) * (la + lb)]);
                    }
                });
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                let d = wd.len();
                acc(grads, *x, &|s| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = &xd[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        // dot(g∘w, x) / d
                        let dot: S = (0..d).map(|i| gr[i] * wd[i] * row[i]).sum::<S>() / S::lit(d as f64);
                        let inv3 = inv * inv * inv;
                        for i in 0..d {
                            s[r * d + i] = s[r * d + i] + gr[i] * wd[i] * inv - row[i] * dot * inv3;
                        }
                    }
                });
                acc(grads, *w, &|s| {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for i in 0..d {
                            s[i] = s[i] + g[r * d + i] * xd[r * d + i] * inv;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let d = node.value.shape().last().copied().unwrap_or(1).max(1);
                acc(grads, *a, &|s| {
                    for r in 0..out.len() / d {
                        let (o, gr) = (&out[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                        let dot: S = o.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for i in 0..d {
                            s[r * d + i] = s[r * d + i] + o[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            Op::Rope { x, positions, theta } => {
                let gt = Tensor::new(node.value.shape().to_vec(), g.to_vec())
                    .and_then(|t| dual::rope_inverse(&t, positions, *theta))
                    .expect("rope adjoint");
                acc(grads, *x, &|s| add_into(s, gt.data()));
            }
            Op::Attention {
                q,
                k,
                v,
                kind,
                scale,
                causal,
                weights,
            } => {
                let (gq, gk, gv) = dual::attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    weights,
                    g,
                    *kind,
                    *scale,
                    *causal,
                );
                acc(grads, *q, &|s| add_into(s, &gq));
                acc(grads, *k, &|s| add_into(s, &gk));
                acc(grads, *v, &|s| add_into(s, &gv));
            }
            Op::Conv { x, w, bias } => {
                let (gx, gw, gb) = causal_conv_backward(self.value(*x), self.value(*w), g);
                acc(grads, *x, &|s| add_into(s, &gx));
                acc(grads, *w, &|s| add_into(s, &gw));
                acc(grads, *bias, &|s| add_into(s, &gb));
            }
            Op::Embedding { table, tokens } => {
                let d = self.shape(*table)[1];
                acc(grads, *table, &|s| {
                    for (r, &t) in tokens.iter().enumerate() {
                        add_into(&mut s[t * d..(t + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let vocab = *self.shape(*logits).last().expect("rank >= 1");
                let g0 = g[0];
                acc(grads, *logits, &|s| {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == S::zero() {
                            continue;
                        }
                        let scale = g0 * w;
                        for j in 0..vocab {
                            s[r * vocab + j] = s[r * vocab + j] + scale * probs[r * vocab + j];
                        }
                        s[r * vocab + targets[r]] = s[r * vocab + targets[r]] - scale;
                    }
                });
            }
            Op::Scan {
                c,
                b,
                x,
                dt,
                decay,
                h0,
                states,
                dims,
            } => {
                let sg = dual::scan_backward(
                    c.map(|c| self.value(c).data()),
                    self.value(*b).data(),
                    self.value(*x).data(),
                    self.value(*dt).data(),
                    self.value(*decay).data(),
                    h0.map(|h| self.value(h).data()),
                    states,
                    c.is_some().then_some(g),
                    c.is_none().then_some(g),
                    *dims,
                );
                if let Some(c) = c {
                    acc(grads, *c, &|s| add_into(s, &sg.c));
                }
                acc(grads, *b, &|s| add_into(s, &sg.b));
                acc(grads, *x, &|s| add_into(s, &sg.x));
                acc(grads, *dt, &|s| add_into(s, &sg.dt));
                acc(grads, *decay, &|s| add_into(s, &sg.decay));
                if let Some(h0) = h0 {
                    acc(grads, *h0, &|s| add_into(s, &sg.h0));
                }
            }
            Op::Sum(a) => acc(grads, *a, &|s| {
                for v in s.iter_mut() {
                    *v = *v + g[0];
                }
            }),
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Sums `f(g[i], i)` of a full-shape gradient into a suffix-shaped slot.
fn reduce_into<S: Scalar>(dst: &mut [S], g: &[S], f: impl Fn(S, usize) -> S) {
    let n = dst.len().max(1);
    for (i, &gg) in g.iter().enumerate() {
        dst[i % n] = dst[i % n] + f(gg, i);
    }
}

/// Softmax over the last axis, stabilised by subtracting each row's maximum.
pub fn softmax_lastdim<S: Scalar>(t: &Tensor<S>) -> Result<Tensor<S>> {
    let d = *t.shape().last().ok_or_else(|| invalid("softmax on a scalar"))?;
    let mut out = t.clone();
    if d == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(d) {
        let m = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut z = S::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Ok(out)
}

fn conv_dims(x: &[usize], w: &[usize], bias: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let (b, t, c) = match *x {
        [t, c] => (1, t, c),
        [b, t, c] => (b, t, c),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "causal_conv",
                lhs: x.to_vec(),
                rhs: w.to_vec(),
            })
        }
    };
    if w.len() != 2 || w[1] != c || bias != [c] {
        return Err(Error::ShapeMismatch {
            op: "causal_conv",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        });
    }
    Ok((b, t, c, w[0]))
}

pub(crate) fn causal_conv_forward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, bias: &Tensor<S>) -> Result<Tensor<S>> {
    let (b, t, c, width) = conv_dims(x.shape(), w.shape(), bias.shape())?;
    let (xd, wd) = (x.data(), w.data());
    let mut out = Vec::with_capacity(xd.len());
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                let mut acc = bias.data()[ci];
                for j in 0..width {
                    let lag = width - 1 - j;
                    if lag <= ti {
                        acc = acc + wd[j * c + ci] * xd[(bi * t + ti - lag) * c + ci];
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn causal_conv_backward<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, g: &[S]) -> (Vec<S>, Vec<S>, Vec<S>) {
    let c = *x.shape().last().expect("checked");
    let t = x.shape()[x.rank() - 2];
    let b = x.numel() / (t * c).max(1);
    let width = w.dim(0);
    let (xd, wd) = (x.data(), w.data());
    let mut gx = vec![S::zero(); xd.len()];
    let mut gw = vec![S::zero(); wd.len()];
    let mut gb = vec![S::zero(); c];
    for bi in 0..b {
        for ti in 0..t {
            for ci in 0..c {
                let gg = g[(bi * t + ti) * c + ci];
                gb[ci] = gb[ci] + gg;
                for j in 0..width {
                    let lag = width - 1 - j;
                    if lag <= ti {
                        let src = (bi * t + ti - lag) * c + ci;
                        gw[j * c + ci] = gw[j * c + ci] + gg * xd[src];
                        gx[src] = gx[src] + gg * wd[j * c + ci];
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}
