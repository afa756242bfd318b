//! Reverse-mode gradient tape.
//!
//! Every op appends a node holding its forward value and the ids of its
//! inputs; [`Tape::backward`] walks the nodes in reverse and accumulates
//! adjoints. Nodes whose inputs never touch a trainable leaf are marked
//! `needs_grad = false` and skipped entirely on the way back.

use std::rc::Rc;

use crate::error::{Error, Result};

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear(Var, Var),
    BatchMatMul(Var, Var),
    BatchMatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Slice { input: Var, start: usize },
    Reshape(Var),
    RmsNorm { input: Var, inv_rms: Vec<f64> },
    Embedding { table: Var, ids: Rc<Vec<usize>> },
    GateMix { gates: Var, stacked: Var },
    CrossEntropy {
        logits: Var,
        targets: Rc<Vec<usize>>,
        weights: Rc<Vec<f64>>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records forward computations for one step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf that tracks gradient iff the tensor has `requires_grad` set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        let mut value = t.clone();
        value.zero_grad();
        self.push(value, Op::Leaf, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn check_finite(&self, op: &'static str, v: Var) -> Result<()> {
        if self.nodes[v.0].value.is_finite() {
            Ok(())
        } else {
            Err(Error::numeric(op, "non-finite input"))
        }
    }

    /// `a @ b` with `a: [.., k]` (leading axes flattened) and `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let k = *sa.last().unwrap();
        if sb.len() != 2 || sb[0] != k {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (n, 1),
            &mut out,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), ng))
    }

    /// `a @ wᵀ` with `a: [.., k]` and `w: [n, k]`.
    pub fn linear(&mut self, a: Var, w: Var) -> Result<Var> {
        let (sa, sw) = (self.shape(a).to_vec(), self.shape(w).to_vec());
        let k = *sa.last().unwrap();
        if sw.len() != 2 || sw[1] != k {
            return Err(Error::Dimension {
                op: "linear",
                lhs: sa,
                rhs: sw,
            });
        }
        let n = sw[0];
        let m = self.value(a).numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k, 1),
            self.value(w).data(),
            (1, k),
            &mut out,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(&[a, w]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear(a, w), ng))
    }

    /// Per-batch `a_b @ b_b` for `[B, S, T] x [B, T, D]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dimension {
                op: "batch_matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (bs, s, t, d) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * s * d];
        for i in 0..bs {
            gemm(
                s,
                t,
                d,
                &self.value(a).data()[i * s * t..],
                (t, 1),
                &self.value(b).data()[i * t * d..],
                (d, 1),
                &mut out[i * s * d..(i + 1) * s * d],
            );
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor::new(&[bs, s, d], out)?,
            Op::BatchMatMul(a, b),
            ng,
        ))
    }

    /// Per-batch `a_b @ b_bᵀ` for `[B, S, D] x [B, T, D]`.
    pub fn batch_matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::Dimension {
                op: "batch_matmul_t",
                lhs: sa,
                rhs: sb,
            });
        }
        let (bs, s, d, t) = (sa[0], sa[1], sa[2], sb[1]);
        let mut out = vec![0.0; bs * s * t];
        for i in 0..bs {
            gemm(
                s,
                d,
                t,
                &self.value(a).data()[i * s * d..],
                (d, 1),
                &self.value(b).data()[i * t * d..],
                (1, d),
                &mut out[i * s * t..(i + 1) * s * t],
            );
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(
            Tensor::new(&[bs, s, t], out)?,
            Op::BatchMatMulT(a, b),
            ng,
        ))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(())
        } else {
            Err(Error::Dimension {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        self.broadcast_check(op, a, b)?;
        let va = self.value(a);
        let vb = self.value(b).data();
        let nb = vb.len();
        let out: Vec<f64> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb[i % nb]))
            .collect();
        let shape = va.shape().to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, mk(a, b), ng))
    }

    /// Elementwise `a + b`; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a);
        let out = v.data().iter().map(|x| x * c).collect();
        let shape = v.shape().to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Scale(a, c), ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let v = self.value(a);
        let out = v.data().iter().map(|&x| f(x)).collect();
        let shape = v.shape().to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, op, ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.check_finite("softplus", a)?;
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.unary(a, f64::exp, Op::Exp(a))?;
        if !self.value(out).is_finite() {
            return Err(Error::numeric("exp", "overflow"));
        }
        Ok(out)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&x| x <= 0.0 || !x.is_finite()) {
            return Err(Error::numeric("log", "non-positive or non-finite input"));
        }
        self.unary(a, f64::ln, Op::Log(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax(a, None)
    }

    /// Softmax over the last axis restricted to entries with `keep[i]`;
    /// excluded entries come out as exact zeros. Every row must keep at
    /// least one entry.
    pub fn masked_softmax(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        self.check_finite("softmax", a)?;
        let v = self.value(a);
        if let Some(k) = keep {
            if k.len() != v.numel() {
                return Err(Error::Dimension {
                    op: "masked_softmax",
                    lhs: v.shape().to_vec(),
                    rhs: vec![k.len()],
                });
            }
        }
        let c = v.cols();
        let mut out = vec![0.0; v.numel()];
        for (r, (row, orow)) in v.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let kept = |j: usize| keep.is_none_or(|k| k[r * c + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &x) in row.iter().enumerate() {
                if kept(j) && x > max {
                    max = x;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract("masked_softmax row keeps no entries".into()));
            }
            let mut sum = 0.0;
            for (j, &x) in row.iter().enumerate() {
                if kept(j) {
                    orow[j] = (x - max).exp();
                    sum += orow[j];
                }
            }
            orow.iter_mut().for_each(|y| *y /= sum);
        }
        let shape = v.shape().to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), ng))
    }

    /// Concatenation along axis 0; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?)
            .to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = first;
        shape[0] = rows;
        let ng = self.ng(parts);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), ng))
    }

    /// Rows `start..start + len` along axis 0.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if len == 0 || start + len > s[0] {
            return Err(Error::Index {
                context: "slice",
                index: start + len,
                len: s[0],
            });
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(a).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Slice { input: a, start }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)` over the last axis, no gain.
    pub fn rms_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.check_finite("rms_norm", a)?;
        let v = self.value(a);
        let c = v.cols();
        let mut out = vec![0.0; v.numel()];
        let mut inv_rms = Vec::with_capacity(v.numel() / c);
        for (row, orow) in v.data().chunks(c).zip(out.chunks_mut(c)) {
            let ms = row.iter().map(|x| x * x).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            orow.iter_mut().zip(row).for_each(|(o, x)| *o = x * inv);
            inv_rms.push(inv);
        }
        let shape = v.shape().to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::RmsNorm { input: a, inv_rms }, ng))
    }

    /// Row lookup: `ids` laid out with `index_shape`, output `index_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], index_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || index_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::Dimension {
                op: "embedding",
                lhs: ts,
                rhs: index_shape.to_vec(),
            });
        }
        let d = ts[1];
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= ts[0] {
                return Err(Error::Index {
                    context: "embedding",
                    index: id,
                    len: ts[0],
                });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let ng = self.ng(&[table]);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Embedding {
                table,
                ids: Rc::new(ids.to_vec()),
            },
            ng,
        ))
    }

    /// `out[t] = Σ_e gates[t, e] · stacked[e, t]` for `gates: [T, E]`,
    /// `stacked: [E, T, D]`.
    pub fn gate_mix(&mut self, gates: Var, stacked: Var) -> Result<Var> {
        let (sg, ss) = (self.shape(gates).to_vec(), self.shape(stacked).to_vec());
        if sg.len() != 2 || ss.len() != 3 || sg[1] != ss[0] || sg[0] != ss[1] {
            return Err(Error::Dimension {
                op: "gate_mix",
                lhs: sg,
                rhs: ss,
            });
        }
        let (t, e, d) = (sg[0], sg[1], ss[2]);
        let g = self.value(gates).data();
        let y = self.value(stacked).data();
        let mut out = vec![0.0; t * d];
        for ti in 0..t {
            let orow = &mut out[ti * d..(ti + 1) * d];
            for ei in 0..e {
                let w = g[ti * e + ei];
                if w == 0.0 {
                    continue;
                }
                let yrow = &y[(ei * t + ti) * d..(ei * t + ti + 1) * d];
                orow.iter_mut().zip(yrow).for_each(|(o, v)| *o += w * v);
            }
        }
        let ng = self.ng(&[gates, stacked]);
        Ok(self.push(
            Tensor::new(&[t, d], out)?,
            Op::GateMix { gates, stacked },
            ng,
        ))
    }

    /// Weighted mean token cross-entropy. `logits: [.., V]` with one target
    /// and one weight per row; rows with weight 0 carry no loss.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        self.check_finite("cross_entropy", logits)?;
        let v = self.value(logits);
        let c = v.cols();
        let rows = v.numel() / c;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: v.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let total_w: f64 = weights.iter().sum();
        if total_w <= 0.0 {
            return Err(Error::Contract("cross_entropy with no loss-bearing rows".into()));
        }
        let mut probs = vec![0.0; v.numel()];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &v.data()[r * c..(r + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            if weights[r] != 0.0 {
                let t = targets[r];
                if t >= c {
                    return Err(Error::Index {
                        context: "cross_entropy",
                        index: t,
                        len: c,
                    });
                }
                loss += weights[r] * (lse - row[t]);
            }
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / total_w),
            Op::CrossEntropy {
                logits,
                targets: Rc::new(targets.to_vec()),
                weights: Rc::new(weights.to_vec()),
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar. Gradients of earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let out = &self.nodes[i].value;
        let mut updates: Vec<(Var, Vec<f64>)> = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (k, n) = (vb.shape()[0], vb.shape()[1]);
                let m = va.numel() / k;
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), vb.data(), (1, n), &mut da);
                    updates.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, va.data(), (1, k), g, (n, 1), &mut db);
                    updates.push((*b, db));
                }
            }
            Op::Linear(a, w) => {
                let (va, vw) = (self.value(*a), self.value(*w));
                let (n, k) = (vw.shape()[0], vw.shape()[1]);
                let m = va.numel() / k;
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), vw.data(), (k, 1), &mut da);
                    updates.push((*a, da));
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; n * k];
                    gemm(n, m, k, g, (1, n), va.data(), (k, 1), &mut dw);
                    updates.push((*w, dw));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, s, t) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let d = vb.shape()[2];
                if self.wants(*a) {
                    let mut da = vec![0.0; bs * s * t];
                    for bi in 0..bs {
                        gemm(
                            s,
                            d,
                            t,
                            &g[bi * s * d..],
                            (d, 1),
                            &vb.data()[bi * t * d..],
                            (1, d),
                            &mut da[bi * s * t..(bi + 1) * s * t],
                        );
                    }
                    updates.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; bs * t * d];
                    for bi in 0..bs {
                        gemm(
                            t,
                            s,
                            d,
                            &va.data()[bi * s * t..],
                            (1, t),
                            &g[bi * s * d..],
                            (d, 1),
                            &mut db[bi * t * d..(bi + 1) * t * d],
                        );
                    }
                    updates.push((*b, db));
                }
            }
            Op::BatchMatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (bs, s, d) = (va.shape()[0], va.shape()[1], va.shape()[2]);
                let t = vb.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![0.0; bs * s * d];
                    for bi in 0..bs {
                        gemm(
                            s,
                            t,
                            d,
                            &g[bi * s * t..],
                            (t, 1),
                            &vb.data()[bi * t * d..],
                            (d, 1),
                            &mut da[bi * s * d..(bi + 1) * s * d],
                        );
                    }
                    updates.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; bs * t * d];
                    for bi in 0..bs {
                        gemm(
                            t,
                            s,
                            d,
                            &g[bi * s * t..],
                            (1, t),
                            &va.data()[bi * s * d..],
                            (d, 1),
                            &mut db[bi * t * d..(bi + 1) * t * d],
                        );
                    }
                    updates.push((*b, db));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    updates.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    let nb = self.value(*b).numel();
                    let mut db = vec![0.0; nb];
                    for (j, gv) in g.iter().enumerate() {
                        db[j % nb] += sign * gv;
                    }
                    updates.push((*b, db));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let nb = vb.len();
                if self.wants(*a) {
                    let da = g.iter().enumerate().map(|(j, gv)| gv * vb[j % nb]).collect();
                    updates.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; nb];
                    for (j, gv) in g.iter().enumerate() {
                        db[j % nb] += gv * va[j];
                    }
                    updates.push((*b, db));
                }
            }
            Op::Scale(a, c) => {
                updates.push((*a, g.iter().map(|x| x * c).collect()));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let da = g
                    .iter()
                    .zip(x)
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                updates.push((*a, da));
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let da = g.iter().zip(x).map(|(gv, &xv)| gv * sigmoid(xv)).collect();
                updates.push((*a, da));
            }
            Op::Exp(a) => {
                let da = g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect();
                updates.push((*a, da));
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let da = g.iter().zip(x).map(|(gv, xv)| gv / xv).collect();
                updates.push((*a, da));
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut da = vec![0.0; out.numel()];
                for ((y, gr), dr) in out
                    .data()
                    .chunks(c)
                    .zip(g.chunks(c))
                    .zip(da.chunks_mut(c))
                {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = y[j] * (gr[j] - dot);
                    }
                }
                updates.push((*a, da));
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                updates.push((*a, vec![g[0]; n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                updates.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if self.wants(*p) {
                        updates.push((*p, g[offset..offset + n].to_vec()));
                    }
                    offset += n;
                }
            }
            Op::Slice { input, start } => {
                let vi = self.value(*input);
                let inner: usize = vi.shape()[1..].iter().product();
                let mut da = vec![0.0; vi.numel()];
                da[start * inner..start * inner + g.len()].copy_from_slice(g);
                updates.push((*input, da));
            }
            Op::Reshape(a) => updates.push((*a, g.to_vec())),
            Op::RmsNorm { input, inv_rms } => {
                let c = out.cols();
                let mut da = vec![0.0; out.numel()];
                for (r, inv) in inv_rms.iter().enumerate() {
                    let y = &out.data()[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot = y.iter().zip(gr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        da[r * c + j] = inv * (gr[j] - y[j] * dot);
                    }
                }
                updates.push((*input, da));
            }
            Op::Embedding { table, ids } => {
                let vt = self.value(*table);
                let d = vt.cols();
                let mut dt = vec![0.0; vt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                updates.push((*table, dt));
            }
            Op::GateMix { gates, stacked } => {
                let (vg, vs) = (self.value(*gates), self.value(*stacked));
                let (t, e) = (vg.shape()[0], vg.shape()[1]);
                let d = vs.shape()[2];
                if self.wants(*gates) {
                    let mut dg = vec![0.0; t * e];
                    for ti in 0..t {
                        let grow = &g[ti * d..(ti + 1) * d];
                        for ei in 0..e {
                            let yrow = &vs.data()[(ei * t + ti) * d..(ei * t + ti + 1) * d];
                            dg[ti * e + ei] = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        }
                    }
                    updates.push((*gates, dg));
                }
                if self.wants(*stacked) {
                    let mut ds = vec![0.0; e * t * d];
                    for ei in 0..e {
                        for ti in 0..t {
                            let w = vg.data()[ti * e + ei];
                            if w == 0.0 {
                                continue;
                            }
                            ds[(ei * t + ti) * d..(ei * t + ti + 1) * d]
                                .iter_mut()
                                .zip(&g[ti * d..(ti + 1) * d])
                                .for_each(|(a, b)| *a = w * b);
                        }
                    }
                    updates.push((*stacked, ds));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let total_w: f64 = weights.iter().sum();
                let mut dl = vec![0.0; probs.len()];
                for (r, &w) in weights.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let s = g[0] * w / total_w;
                    for j in 0..c {
                        dl[r * c + j] = s * probs[r * c + j];
                    }
                    dl[r * c + targets[r]] -= s;
                }
                updates.push((*logits, dl));
            }
        }
        for (v, d) in updates {
            self.accumulate(v, d);
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// `c += a @ b` where `a` is `m x k`, `b` is `k x n`, each given with
/// (row, column) strides; `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
