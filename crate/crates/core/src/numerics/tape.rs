//! Tensor-level reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its output and the
//! data its backward rule needs. `backward` walks the nodes in reverse
//! recorded order and accumulates gradients into every node that requires
//! them; only leaf gradients are kept in the result.

use crate::activations::ActivationKind;
use crate::error::{dim_err, Error, Result};
use crate::numerics::gemm::gemm;
use crate::numerics::softmax::{softmax_row, Mask};
use crate::numerics::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detach,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: f64,
    },
    Sum {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Activation {
        a: Var,
        kind: ActivationKind,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SplitHeads {
        a: Var,
        heads: usize,
    },
    MergeHeads {
        a: Var,
    },
    Rope {
        a: Var,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    Softmax {
        a: Var,
    },
    SoftmaxSink {
        a: Var,
        sink: Var,
        heads: usize,
        rows: usize,
        sink_mass: Vec<f64>,
    },
    AffineReweight {
        probs: Var,
        alpha: Var,
        heads: usize,
        mask: Mask,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    ForwardKl {
        logits: Var,
        teacher_probs: Vec<f64>,
        student_probs: Vec<f64>,
        temperature: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Stores the gradient of `v` (zeros if none flowed) in `t`'s grad slot.
    pub fn write_to(&mut self, v: Var, t: &mut Tensor) -> Result<()> {
        let g = self.take(v).unwrap_or_else(|| vec![0.0; t.numel()]);
        t.set_grad(g)
    }
}

fn accumulate<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor; it receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t, Op::Leaf, rg)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    /// Records a trainable tensor.
    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Stop-gradient: forwards the value, passes no gradient back.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Detach, false)
    }

    /// `a @ b`. `a` is `[..., m, k]`; `b` is `[k, n]` (shared across the
    /// batch) or `[..., k, n]` with the same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ bᵀ` over the last two axes of `b`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return dim_err(format!("matmul needs matrices, got {sa:?} and {sb:?}"));
        }
        let m = sa[sa.len() - 2];
        let k = sa[sa.len() - 1];
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return dim_err(format!("matmul inner dimensions differ: {sa:?} x {sb:?}"));
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let b_shared = lead_b.is_empty();
        if !b_shared && lead_a != lead_b {
            return dim_err(format!("matmul batch dimensions differ: {sa:?} x {sb:?}"));
        }
        let batch: usize = lead_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            if b_shared {
                gemm(batch * m, k, n, av, false, bv, trans_b, &mut out, 0.0);
            } else {
                for i in 0..batch {
                    gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..],
                        false,
                        &bv[i * k * n..],
                        trans_b,
                        &mut out[i * m * n..],
                        0.0,
                    );
                }
            }
        }
        let mut shape = lead_a.to_vec();
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                b_shared,
            },
            rg,
        ))
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return dim_err(format!("cannot add {sb:?} onto {sa:?}"));
        }
        let bv = self.value(b).data();
        let nb = bv.len().max(1);
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % nb])
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "elementwise product of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Scale { a, c },
            rg,
        )
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    pub fn activation(&mut self, a: Var, kind: ActivationKind) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| kind.apply(x)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(a);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Activation { a, kind },
            rg,
        )
    }

    /// RMS normalisation over the last axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] {
            return dim_err(format!(
                "rms_norm gain {:?} does not match last axis {d}",
                self.shape(gain)
            ));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut inv_rms = Vec::with_capacity(rows);
        for (xr, or) in xv.chunks(d).zip(out.chunks_mut(d)) {
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + eps).sqrt();
            inv_rms.push(r);
            for ((o, &xi), &g) in or.iter_mut().zip(xr).zip(gv) {
                *o = xi * r * g;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::RmsNorm { x, gain, inv_rms },
            rg,
        ))
    }

    /// Gathers rows of `table` (`[vocab, dim]`) for ids laid out as `id_shape`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], id_shape: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return dim_err(format!("embedding table must be 2-D, got {st:?}"));
        }
        let (vocab, dim) = (st[0], st[1]);
        if id_shape.iter().product::<usize>() != ids.len() {
            return dim_err("id shape does not match id count");
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Input(format!("token id {bad} out of range for vocab {vocab}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        let mut shape = id_shape.to_vec();
        shape.push(dim);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// `[B, T, H·d] → [B, H, T, d]`.
    pub fn split_heads(&mut self, a: Var, heads: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return dim_err(format!("cannot split {s:?} into {heads} heads"));
        }
        let (b, t, d) = (s[0], s[1], s[2] / heads);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for ti in 0..t {
                for h in 0..heads {
                    let from = ((bi * t + ti) * heads + h) * d;
                    let to = ((bi * heads + h) * t + ti) * d;
                    out[to..to + d].copy_from_slice(&src[from..from + d]);
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![b, heads, t, d], out)?,
            Op::SplitHeads { a, heads },
            rg,
        ))
    }

    /// `[B, H, T, d] → [B, T, H·d]`.
    pub fn merge_heads(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 {
            return dim_err(format!("merge_heads expects 4-D input, got {s:?}"));
        }
        let (b, heads, t, d) = (s[0], s[1], s[2], s[3]);
        let src = self.value(a).data();
        let out = merge_heads_raw(src, b, heads, t, d);
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(vec![b, t, heads * d], out)?,
            Op::MergeHeads { a },
            rg,
        ))
    }

    /// Rotary position embedding on `[B, H, T, d]` with even `d`.
    pub fn rope(&mut self, a: Var, base: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 || s[3] % 2 != 0 {
            return dim_err(format!("rope expects [B,H,T,even d], got {s:?}"));
        }
        let (t, d) = (s[2], s[3]);
        let half = d / 2;
        let mut cos = vec![0.0; t * half];
        let mut sin = vec![0.0; t * half];
        for pos in 0..t {
            for i in 0..half {
                let theta = pos as f64 * base.powf(-2.0 * i as f64 / d as f64);
                cos[pos * half + i] = theta.cos();
                sin[pos * half + i] = theta.sin();
            }
        }
        let mut out = self.value(a).data().to_vec();
        rotate_pairs(&mut out, t, d, &cos, &sin, 1.0);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(s, out)?, Op::Rope { a, cos, sin }, rg))
    }

    /// Masked softmax over the last axis.
    pub fn softmax(&mut self, a: Var, mask: &Mask) -> Result<Var> {
        let out = crate::numerics::softmax::softmax_rows(self.value(a), mask)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax { a }, rg))
    }

    /// Softmax whose denominator gains `e^{s_h}` for head `h`. The head of a
    /// row is its index along axis −3 (a single head for 1-D/2-D input).
    /// Returns the token weights and the per-row sink mass.
    pub fn softmax_sink(&mut self, a: Var, sink: Var, mask: &Mask) -> Result<(Var, Vec<f64>)> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = mask.check(&shape)?;
        let heads = if shape.len() >= 3 { shape[shape.len() - 3] } else { 1 };
        if self.value(sink).numel() != heads {
            return dim_err(format!(
                "sink has {} entries for {heads} heads",
                self.value(sink).numel()
            ));
        }
        let xv = self.value(a).data();
        let sv = self.value(sink).data();
        let mut out = vec![0.0; xv.len()];
        let mut sink_mass = Vec::with_capacity(xv.len() / cols.max(1));
        for (r, (xr, or)) in xv.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let head = (r / rows) % heads;
            sink_mass.push(softmax_row(xr, mask.row(r % rows, rows, cols), Some(sv[head]), or)?);
        }
        let rg = self.rg(a) || self.rg(sink);
        let v = self.push(
            Tensor::new(shape, out)?,
            Op::SoftmaxSink {
                a,
                sink,
                heads,
                rows,
                sink_mass: sink_mass.clone(),
            },
            rg,
        );
        Ok((v, sink_mass))
    }

    /// Affine reweighting of attention probabilities.
    ///
    /// `probs` is `[B, H, Tq, N]`, `alpha` is `[B, Tq, H]` and `alpha_ma`
    /// holds one running mean per head (treated as a constant). Valid
    /// positions get `α·p + (alpha_ma − α)/N`; masked positions stay 0.
    pub fn affine_reweight(
        &mut self,
        probs: Var,
        alpha: Var,
        alpha_ma: &[f64],
        mask: &Mask,
    ) -> Result<Var> {
        let sp = self.shape(probs).to_vec();
        if sp.len() != 4 {
            return dim_err(format!("affine_reweight expects [B,H,T,N] probs, got {sp:?}"));
        }
        let (b, h, tq, n) = (sp[0], sp[1], sp[2], sp[3]);
        if self.shape(alpha) != [b, tq, h] {
            return dim_err(format!(
                "alpha shape {:?} does not match [{b}, {tq}, {h}]",
                self.shape(alpha)
            ));
        }
        if alpha_ma.len() != h {
            return Err(Error::State(format!(
                "running mean has {} heads, attention has {h}",
                alpha_ma.len()
            )));
        }
        mask.check(&sp)?;
        let pv = self.value(probs).data();
        let av = self.value(alpha).data();
        let inv_n = 1.0 / n as f64;
        let mut out = vec![0.0; pv.len()];
        for bi in 0..b {
            for hi in 0..h {
                for q in 0..tq {
                    let alpha_q = av[(bi * tq + q) * h + hi];
                    let beta = (alpha_ma[hi] - alpha_q) * inv_n;
                    let row = mask.row(q, tq, n);
                    let off = ((bi * h + hi) * tq + q) * n;
                    for k in 0..n {
                        if row.is_valid(k) {
                            out[off + k] = alpha_q * pv[off + k] + beta;
                        }
                    }
                }
            }
        }
        let rg = self.rg(probs) || self.rg(alpha);
        Ok(self.push(
            Tensor::new(sp, out)?,
            Op::AffineReweight {
                probs,
                alpha,
                heads: h,
                mask: mask.clone(),
            },
            rg,
        ))
    }

    /// Mean next-token cross-entropy over all rows of `logits` (`[..., V]`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.numel() / v.max(1);
        if targets.len() != rows {
            return dim_err(format!("{} targets for {rows} logit rows", targets.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!("target {bad} out of range for vocab {v}")));
        }
        let mut probs = vec![0.0; lv.numel()];
        let mut total = 0.0;
        for ((lr, pr), &t) in lv.data().chunks(v).zip(probs.chunks_mut(v)).zip(targets) {
            let lse = log_softmax_into(lr, 1.0, pr);
            total += lse - lr[t];
        }
        let loss = total / rows as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// `T² · mean_rows KL(softmax(teacher/T) ‖ softmax(student/T))`.
    pub fn forward_kl(&mut self, logits: Var, teacher: &Tensor, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::Input(format!("temperature must be positive, got {temperature}")));
        }
        let sv = self.value(logits);
        if sv.shape() != teacher.shape() {
            return dim_err(format!(
                "student logits {:?} vs teacher logits {:?}",
                sv.shape(),
                teacher.shape()
            ));
        }
        let v = sv.last_dim();
        let rows = sv.numel() / v.max(1);
        let mut sp = vec![0.0; sv.numel()];
        let mut tp = vec![0.0; sv.numel()];
        let mut total = 0.0;
        let inv_t = 1.0 / temperature;
        for (((sr, tr), spr), tpr) in sv
            .data()
            .chunks(v)
            .zip(teacher.data().chunks(v))
            .zip(sp.chunks_mut(v))
            .zip(tp.chunks_mut(v))
        {
            let s_lse = log_softmax_into(sr, inv_t, spr);
            let t_lse = log_softmax_into(tr, inv_t, tpr);
            for j in 0..v {
                let log_p = tr[j] * inv_t - t_lse;
                let log_q = sr[j] * inv_t - s_lse;
                if tpr[j] > 0.0 {
                    total += tpr[j] * (log_p - log_q);
                }
            }
        }
        let loss = temperature * temperature * total / rows as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::ForwardKl {
                logits,
                teacher_probs: tp,
                student_probs: sp,
                temperature,
            },
            rg,
        ))
    }

    /// Reverse pass from `root`, seeded with ones (the gradient of the sum
    /// of `root`'s entries).
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.rg(root) {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0; self.value(root).numel()]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::MatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
                b_shared,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let ga = accumulate(grads, *a, av.len());
                    if *b_shared {
                        gemm(*batch * m, n, k, g, false, bv, !*trans_b, ga, 1.0);
                    } else {
                        for i in 0..*batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[i * m * n..],
                                false,
                                &bv[i * k * n..],
                                !*trans_b,
                                &mut ga[i * m * k..],
                                1.0,
                            );
                        }
                    }
                }
                if self.rg(*b) {
                    let gb = accumulate(grads, *b, bv.len());
                    let (reps, mm) = if *b_shared { (1, *batch * m) } else { (*batch, m) };
                    for i in 0..reps {
                        let (aa, gg) = (&av[i * mm * k..], &g[i * mm * n..]);
                        let out = &mut gb[i * k * n..];
                        if *trans_b {
                            // dB (n×k) = gᵀ a
                            gemm(n, mm, k, gg, true, aa, false, out, 1.0);
                        } else {
                            // dB (k×n) = aᵀ g
                            gemm(k, mm, n, aa, true, gg, false, out, 1.0);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.rg(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if self.rg(*b) {
                    let nb = self.value(*b).numel();
                    let gb = accumulate(grads, *b, nb);
                    for (i, y) in g.iter().enumerate() {
                        gb[i % nb] += y;
                    }
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.rg(*a) {
                    let ga = accumulate(grads, *a, g.len());
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                }
                if self.rg(*b) {
                    let gb = accumulate(grads, *b, g.len());
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                }
            }
            Op::Scale { a, c } => {
                let ga = accumulate(grads, *a, g.len());
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi * c;
                }
            }
            Op::Sum { a } => {
                let n = self.value(*a).numel();
                let ga = accumulate(grads, *a, n);
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
            Op::Reshape { a } => {
                let ga = accumulate(grads, *a, g.len());
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi;
                }
            }
            Op::Activation { a, kind } => {
                let av = self.value(*a).data();
                let ga = accumulate(grads, *a, g.len());
                for ((x, gi), &ai) in ga.iter_mut().zip(g).zip(av) {
                    *x += gi * kind.derivative(ai);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let d = gv.len();
                if self.rg(*gain) {
                    let gg = accumulate(grads, *gain, d);
                    for ((xr, gr), &r) in xv.chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                        for j in 0..d {
                            gg[j] += gr[j] * xr[j] * r;
                        }
                    }
                }
                if self.rg(*x) {
                    let gx = accumulate(grads, *x, xv.len());
                    let mut dxhat = vec![0.0; d];
                    for (((xr, gr), outr), &r) in xv
                        .chunks(d)
                        .zip(g.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .zip(inv_rms)
                    {
                        let mut dot = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            dot += dxhat[j] * xr[j] * r;
                        }
                        let mean = dot / d as f64;
                        for j in 0..d {
                            outr[j] += r * (dxhat[j] - xr[j] * r * mean);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let st = self.shape(*table);
                let dim = st[1];
                let gt = accumulate(grads, *table, st[0] * dim);
                for (gr, &i) in g.chunks(dim).zip(ids) {
                    for (x, y) in gt[i * dim..(i + 1) * dim].iter_mut().zip(gr) {
                        *x += y;
                    }
                }
            }
            Op::SplitHeads { a, heads } => {
                let s = node.value.shape();
                let (b, t, d) = (s[0], s[2], s[3]);
                let merged = merge_heads_raw(g, b, *heads, t, d);
                let ga = accumulate(grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(&merged) {
                    *x += y;
                }
            }
            Op::MergeHeads { a } => {
                let s = self.shape(*a);
                let (b, heads, t, d) = (s[0], s[1], s[2], s[3]);
                let ga = accumulate(grads, *a, g.len());
                for bi in 0..b {
                    for ti in 0..t {
                        for h in 0..heads {
                            let from = ((bi * t + ti) * heads + h) * d;
                            let to = ((bi * heads + h) * t + ti) * d;
                            for j in 0..d {
                                ga[to + j] += g[from + j];
                            }
                        }
                    }
                }
            }
            Op::Rope { a, cos, sin } => {
                let s = node.value.shape();
                let mut back = g.to_vec();
                rotate_pairs(&mut back, s[2], s[3], cos, sin, -1.0);
                let ga = accumulate(grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(&back) {
                    *x += y;
                }
            }
            Op::Softmax { a } => {
                let p = node.value.data();
                let cols = node.value.last_dim();
                let ga = accumulate(grads, *a, p.len());
                for ((pr, gr), out) in p.chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                    let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                    for j in 0..cols {
                        out[j] += pr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::SoftmaxSink {
                a,
                sink,
                heads,
                rows,
                sink_mass,
            } => {
                let w = node.value.data();
                let cols = node.value.last_dim();
                let mut dots = Vec::with_capacity(sink_mass.len());
                for (wr, gr) in w.chunks(cols).zip(g.chunks(cols)) {
                    dots.push(wr.iter().zip(gr).map(|(x, y)| x * y).sum::<f64>());
                }
                if self.rg(*a) {
                    let ga = accumulate(grads, *a, w.len());
                    for (((wr, gr), out), dot) in w
                        .chunks(cols)
                        .zip(g.chunks(cols))
                        .zip(ga.chunks_mut(cols))
                        .zip(&dots)
                    {
                        for j in 0..cols {
                            out[j] += wr[j] * (gr[j] - dot);
                        }
                    }
                }
                if self.rg(*sink) {
                    let gs = accumulate(grads, *sink, *heads);
                    for (r, (s, dot)) in sink_mass.iter().zip(&dots).enumerate() {
                        gs[(r / rows) % heads] -= s * dot;
                    }
                }
            }
            Op::AffineReweight {
                probs,
                alpha,
                heads,
                mask,
            } => {
                let s = node.value.shape();
                let (b, h, tq, n) = (s[0], *heads, s[2], s[3]);
                let pv = self.value(*probs).data();
                let av = self.value(*alpha).data();
                let inv_n = 1.0 / n as f64;
                let want_p = self.rg(*probs);
                let want_a = self.rg(*alpha);
                let mut gp = want_p.then(|| grads[probs.0].take().unwrap_or_else(|| vec![0.0; pv.len()]));
                let mut ga = want_a.then(|| grads[alpha.0].take().unwrap_or_else(|| vec![0.0; av.len()]));
                for bi in 0..b {
                    for hi in 0..h {
                        for q in 0..tq {
                            let ai = (bi * tq + q) * h + hi;
                            let alpha_q = av[ai];
                            let row = mask.row(q, tq, n);
                            let off = ((bi * h + hi) * tq + q) * n;
                            let mut da = 0.0;
                            for k in 0..n {
                                if row.is_valid(k) {
                                    let gk = g[off + k];
                                    if let Some(gp) = gp.as_mut() {
                                        gp[off + k] += alpha_q * gk;
                                    }
                                    da += gk * (pv[off + k] - inv_n);
                                }
                            }
                            if let Some(ga) = ga.as_mut() {
                                ga[ai] += da;
                            }
                        }
                    }
                }
                if let Some(gp) = gp {
                    grads[probs.0] = Some(gp);
                }
                if let Some(ga) = ga {
                    grads[alpha.0] = Some(ga);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.value(*logits).last_dim();
                let scale = g[0] / targets.len() as f64;
                let gl = accumulate(grads, *logits, probs.len());
                for ((pr, out), &t) in probs.chunks(v).zip(gl.chunks_mut(v)).zip(targets) {
                    for j in 0..v {
                        out[j] += scale * pr[j];
                    }
                    out[t] -= scale;
                }
            }
            Op::ForwardKl {
                logits,
                teacher_probs,
                student_probs,
                temperature,
            } => {
                let v = self.value(*logits).last_dim();
                let rows = student_probs.len() / v.max(1);
                let scale = g[0] * temperature / rows as f64;
                let gl = accumulate(grads, *logits, student_probs.len());
                for ((x, q), p) in gl.iter_mut().zip(student_probs).zip(teacher_probs) {
                    *x += scale * (q - p);
                }
            }
        }
    }
}

/// Writes `softmax(x·scale)` into `out` and returns `logsumexp(x·scale)`.
fn log_softmax_into(x: &[f64], scale: f64, out: &mut [f64]) -> f64 {
    let m = x.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v * scale));
    let mut denom = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v * scale - m).exp();
        denom += *o;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
    m + denom.ln()
}

fn merge_heads_raw(src: &[f64], b: usize, heads: usize, t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                let from = ((bi * heads + h) * t + ti) * d;
                let to = ((bi * t + ti) * heads + h) * d;
                out[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
    }
    out
}

/// Rotates interleaved pairs `(2i, 2i+1)` of every `[T, d]` block by
/// `sign · θ(pos, i)`.
fn rotate_pairs(x: &mut [f64], t: usize, d: usize, cos: &[f64], sin: &[f64], sign: f64) {
    let half = d / 2;
    for block in x.chunks_mut(t * d) {
        for pos in 0..t {
            for i in 0..half {
                let (c, s) = (cos[pos * half + i], sign * sin[pos * half + i]);
                let j = pos * d + 2 * i;
                let (x0, x1) = (block[j], block[j + 1]);
                block[j] = x0 * c - x1 * s;
                block[j + 1] = x0 * s + x1 * c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn row_times_column() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let b = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[1, 1]);
        assert_eq!(tape.value(c).item(), 11.0);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
        let c = tape.constant(Tensor::zeros(&[4, 3, 2]));
        let d = tape.constant(Tensor::zeros(&[5, 2, 2]));
        assert!(matches!(tape.matmul(c, d), Err(Error::Dimension(_))));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.detach(x);
        let z = tape.mul(y, x).unwrap();
        let s = tape.sum(z);
        let g = tape.backward(s).unwrap();
        // d/dx (stop(x)·x) = stop(x)
        assert_eq!(g.get(x).unwrap(), &[1.0, 2.0]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let y = tape.detach(x);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
    }

    #[test]
    fn leaf_gradient_accumulates_across_uses() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![3.0]));
        let y = tape.add(x, x).unwrap();
        let z = tape.mul(y, x).unwrap();
        let g = tape.backward(z).unwrap();
        // z = 2x² → dz/dx = 4x
        assert_eq!(g.get(x).unwrap(), &[12.0]);
    }

    #[test]
    fn split_then_merge_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(f64::from).collect();
        let x = tape.constant(Tensor::new(vec![2, 3, 4], data.clone()).unwrap());
        let s = tape.split_heads(x, 2).unwrap();
        assert_eq!(tape.shape(s), &[2, 2, 3, 2]);
        // batch 0, head 1, t 2 holds features 2..4 of token 2
        assert_eq!(tape.value(s).at(&[0, 1, 2, 0]), data[2 * 4 + 2]);
        let m = tape.merge_heads(s).unwrap();
        assert_eq!(tape.value(m).data(), &data[..]);
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut tape = Tape::new();
        let table = tape.param(Tensor::zeros(&[4, 2]));
        assert!(matches!(
            tape.embedding(table, &[0, 4], &[1, 2]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn rope_preserves_norm_and_position_zero() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect();
        let x = tape.constant(Tensor::new(vec![1, 1, 3, 4], data.clone()).unwrap());
        let y = tape.rope(x, 10_000.0).unwrap();
        let yv = tape.value(y).data();
        assert_eq!(&yv[..4], &data[..4]);
        for p in 0..3 {
            let n0: f64 = data[p * 4..p * 4 + 4].iter().map(|v| v * v).sum();
            let n1: f64 = yv[p * 4..p * 4 + 4].iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-12);
        }
    }
}
