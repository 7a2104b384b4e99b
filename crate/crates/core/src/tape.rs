//! Wengert-list reverse-mode differentiation.
//!
//! A forward pass records primitive ops into a linear tape; `backward`
//! replays them once in reverse, accumulating adjoints. One training step
//! owns one tape. Values are kept in an arena indexed by [`ValueId`].

use crate::kernels::{bmm, mm_nn, mm_nt, mm_tn};
use crate::tensor::{arg_err, shape_err, KernelError, Real, Result, Tensor};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// One routed expert inside a [`Tape::mix_rows`] combination: the expert
/// column in the weight matrix, the expert's output rows, and the token
/// rows they scatter back into.
pub struct MixPart {
    pub expert: usize,
    pub value: ValueId,
    pub rows: Vec<u32>,
}

enum Op<S: Real> {
    Matmul { a: ValueId, b: ValueId, out: ValueId },
    Bmm { a: ValueId, b: ValueId, trans_b: bool, out: ValueId },
    Add { a: ValueId, b: ValueId, out: ValueId },
    AddScaled { a: ValueId, b: ValueId, coeff: S, out: ValueId },
    Mul { a: ValueId, b: ValueId, out: ValueId },
    Scale { x: ValueId, coeff: S, out: ValueId },
    Silu { x: ValueId, out: ValueId },
    RmsNorm { x: ValueId, gain: ValueId, inv: Vec<S>, out: ValueId },
    Softmax { x: ValueId, out: ValueId },
    CausalSoftmax { x: ValueId, out: ValueId },
    SplitHeads { x: ValueId, b: usize, t: usize, heads: usize, out: ValueId },
    MergeHeads { x: ValueId, b: usize, t: usize, heads: usize, out: ValueId },
    GatherRows { table: ValueId, idx: Vec<u32>, out: ValueId },
    CrossEntropy { logits: ValueId, targets: Vec<u32>, row_weights: Vec<f64>, out: ValueId },
    TopkRenorm { probs: ValueId, sel: Vec<u32>, k: usize, out: ValueId },
    MeanRows { x: ValueId, out: ValueId },
    DotVec { x: ValueId, coeffs: Vec<S>, out: ValueId },
    MixRows { weights: ValueId, parts: Vec<MixPart>, out: ValueId },
    MeanScalars { xs: Vec<ValueId>, out: ValueId },
}

pub struct Tape<S: Real = f32> {
    vals: Vec<Tensor<S>>,
    ops: Vec<Op<S>>,
    recording: bool,
}

/// Adjoints produced by [`Tape::backward`], indexed by the forward ids.
pub struct Grads<S: Real> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Real> Grads<S> {
    pub fn get(&self, id: ValueId) -> Option<&Tensor<S>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of a leaf, exact zeros when the value never fed the loss.
    pub fn get_or_zeros(&self, id: ValueId, shape: &[usize]) -> Tensor<S> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), ops: Vec::new(), recording: true }
    }

    /// A tape that executes ops but records nothing; backward is unavailable.
    pub fn eval() -> Self {
        Tape { vals: Vec::new(), ops: Vec::new(), recording: false }
    }

    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        &self.vals[id.0]
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn leaf(&mut self, t: Tensor<S>) -> Result<ValueId> {
        if !t.is_finite() {
            return Err(KernelError::NonFinite { op: "leaf" });
        }
        Ok(self.push_val(t))
    }

    fn push_val(&mut self, t: Tensor<S>) -> ValueId {
        self.vals.push(t);
        ValueId(self.vals.len() - 1)
    }

    fn finish(&mut self, op_name: &'static str, out: Tensor<S>, op: impl FnOnce(ValueId) -> Op<S>) -> Result<ValueId> {
        if !out.is_finite() {
            return Err(KernelError::NonFinite { op: op_name });
        }
        let id = self.push_val(out);
        if self.recording {
            let rec = op(id);
            self.ops.push(rec);
        }
        Ok(id)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.vals[a.0].dims2("matmul")?;
        let (kb, n) = self.vals[b.0].dims2("matmul")?;
        if ka != kb {
            return Err(shape_err(
                "matmul",
                format!("inner dimensions disagree: {:?} x {:?}", self.vals[a.0].shape(), self.vals[b.0].shape()),
            ));
        }
        let mut out = Tensor::zeros(&[m, n]);
        mm_nn(self.vals[a.0].data(), self.vals[b.0].data(), m, ka, n, out.data_mut());
        self.finish("matmul", out, |out| Op::Matmul { a, b, out })
    }

    /// Batched matmul over rank-3 operands; `trans_b` multiplies by the
    /// transpose of each B slab (B laid out [bs x n x k]).
    pub fn bmm(&mut self, a: ValueId, b: ValueId, trans_b: bool) -> Result<ValueId> {
        let (bs, m, k) = self.vals[a.0].dims3("bmm")?;
        let (bs_b, d1, d2) = self.vals[b.0].dims3("bmm")?;
        let (kb, n) = if trans_b { (d2, d1) } else { (d1, d2) };
        if bs != bs_b || k != kb {
            return Err(shape_err(
                "bmm",
                format!("incompatible shapes {:?} x {:?} (trans_b={})", self.vals[a.0].shape(), self.vals[b.0].shape(), trans_b),
            ));
        }
        let mut out = Tensor::zeros(&[bs, m, n]);
        bmm(self.vals[a.0].data(), self.vals[b.0].data(), bs, m, k, n, trans_b, out.data_mut());
        self.finish("bmm", out, |out| Op::Bmm { a, b, trans_b, out })
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.finish("add", out, |out| Op::Add { a, b, out })
    }

    /// out = a + coeff * b (used for the Eq. 7 style loss combination).
    pub fn add_scaled(&mut self, a: ValueId, b: ValueId, coeff: S) -> Result<ValueId> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(shape_err("add_scaled", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + coeff * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.finish("add_scaled", out, |out| Op::AddScaled { a, b, coeff, out })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (&self.vals[a.0], &self.vals[b.0]);
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape(), data)?;
        self.finish("mul", out, |out| Op::Mul { a, b, out })
    }

    pub fn scale(&mut self, x: ValueId, coeff: S) -> Result<ValueId> {
        let out = self.vals[x.0].map(|v| v * coeff);
        self.finish("scale", out, |out| Op::Scale { x, coeff, out })
    }

    pub fn silu(&mut self, x: ValueId) -> Result<ValueId> {
        let out = self.vals[x.0].map(silu_scalar);
        self.finish("silu", out, |out| Op::Silu { x, out })
    }

    /// Row-wise RMS normalization with a learned per-column gain.
    pub fn rms_norm(&mut self, x: ValueId, gain: ValueId) -> Result<ValueId> {
        let (rows, d) = self.vals[x.0].dims2("rms_norm")?;
        let g = &self.vals[gain.0];
        if g.shape() != [d] {
            return Err(shape_err("rms_norm", format!("gain shape {:?}, expected [{d}]", g.shape())));
        }
        let eps = S::of_f64(RMS_EPS);
        let mut inv = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(self.vals[x.0].shape());
        let xd = self.vals[x.0].data();
        let gd = g.data();
        let od = out.data_mut();
        let denom = S::of_f64(d as f64);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let ms = row.iter().map(|&v| v * v).sum::<S>() / denom;
            let irms = (ms + eps).sqrt().recip();
            inv.push(irms);
            for c in 0..d {
                od[r * d + c] = row[c] * irms * gd[c];
            }
        }
        self.finish("rms_norm", out, |out| Op::RmsNorm { x, gain, inv, out })
    }

    /// Softmax over the last dimension with max-subtraction.
    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let t = &self.vals[x.0];
        let last = *t.shape().last().expect("non-empty shape");
        let out_data = softmax_rows(t.data(), last);
        let out = Tensor::new(t.shape(), out_data)?;
        self.finish("softmax", out, |out| Op::Softmax { x, out })
    }

    /// Softmax over the last dimension of [m x t x t] scores restricted to
    /// columns <= row index; masked columns are exactly zero.
    pub fn causal_softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let (m, t1, t2) = self.vals[x.0].dims3("causal_softmax")?;
        if t1 != t2 {
            return Err(shape_err("causal_softmax", format!("scores must be square, got {t1}x{t2}")));
        }
        let xd = self.vals[x.0].data();
        let mut out = Tensor::zeros(self.vals[x.0].shape());
        let od = out.data_mut();
        for s in 0..m {
            for i in 0..t1 {
                let base = (s * t1 + i) * t2;
                let row = &xd[base..base + i + 1];
                let mx = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
                let mut denom = S::zero();
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - mx).exp();
                    od[base + j] = e;
                    denom = denom + e;
                }
                for j in 0..=i {
                    od[base + j] = od[base + j] / denom;
                }
            }
        }
        self.finish("causal_softmax", out, |out| Op::CausalSoftmax { x, out })
    }

    /// [b*t x heads*hd] -> [b*heads x t x hd].
    pub fn split_heads(&mut self, x: ValueId, b: usize, t: usize, heads: usize) -> Result<ValueId> {
        let (rows, d) = self.vals[x.0].dims2("split_heads")?;
        if rows != b * t || d % heads != 0 {
            return Err(shape_err(
                "split_heads",
                format!("shape {:?} does not split as b={b}, t={t}, heads={heads}", self.vals[x.0].shape()),
            ));
        }
        let out = split_heads_data(&self.vals[x.0], b, t, heads);
        self.finish("split_heads", out, |out| Op::SplitHeads { x, b, t, heads, out })
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: ValueId, b: usize, t: usize, heads: usize) -> Result<ValueId> {
        let (bh, t_in, _hd) = self.vals[x.0].dims3("merge_heads")?;
        if bh != b * heads || t_in != t {
            return Err(shape_err(
                "merge_heads",
                format!("shape {:?} does not merge as b={b}, t={t}, heads={heads}", self.vals[x.0].shape()),
            ));
        }
        let out = merge_heads_data(&self.vals[x.0], b, t, heads);
        self.finish("merge_heads", out, |out| Op::MergeHeads { x, b, t, heads, out })
    }

    /// Row lookup: out[r] = table[idx[r]]; the embedding primitive.
    pub fn gather_rows(&mut self, table: ValueId, idx: &[u32]) -> Result<ValueId> {
        let (rows, d) = self.vals[table.0].dims2("gather_rows")?;
        for &i in idx {
            if i as usize >= rows {
                return Err(KernelError::IndexOutOfRange { op: "gather_rows", index: i as usize, bound: rows });
            }
        }
        let td = self.vals[table.0].data();
        let mut out = Tensor::zeros(&[idx.len(), d]);
        let od = out.data_mut();
        for (r, &i) in idx.iter().enumerate() {
            od[r * d..(r + 1) * d].copy_from_slice(&td[i as usize * d..(i as usize + 1) * d]);
        }
        self.finish("gather_rows", out, |out| Op::GatherRows { table, idx: idx.to_vec(), out })
    }

    /// Weighted token-level cross entropy: sum_r w_r * (-log p_r(target_r)).
    /// The per-row log partition runs in f64 so uniform rows are exact.
    pub fn cross_entropy_weighted(&mut self, logits: ValueId, targets: &[u32], row_weights: Vec<f64>) -> Result<ValueId> {
        let (rows, v) = self.vals[logits.0].dims2("cross_entropy")?;
        if targets.len() != rows || row_weights.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{rows} logit rows vs {} targets / {} weights", targets.len(), row_weights.len()),
            ));
        }
        for &t in targets {
            if t as usize >= v {
                return Err(KernelError::IndexOutOfRange { op: "cross_entropy", index: t as usize, bound: v });
            }
        }
        let ld = self.vals[logits.0].data();
        let mut acc = 0.0f64;
        for r in 0..rows {
            let w = row_weights[r];
            if w == 0.0 {
                continue;
            }
            let row = &ld[r * v..(r + 1) * v];
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b.as_f64()));
            let lse = mx + row.iter().map(|&x| (x.as_f64() - mx).exp()).sum::<f64>().ln();
            acc += w * (lse - row[targets[r] as usize].as_f64());
        }
        let out = Tensor::scalar(S::of_f64(acc));
        self.finish("cross_entropy", out, |out| Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            row_weights,
            out,
        })
    }

    /// Mean over positions of -log p(target), the plain Eq. 5 inner term.
    pub fn cross_entropy(&mut self, logits: ValueId, targets: &[u32]) -> Result<ValueId> {
        let (rows, _) = self.vals[logits.0].dims2("cross_entropy")?;
        if rows == 0 {
            return Err(arg_err("cross_entropy", "at least one position required"));
        }
        self.cross_entropy_weighted(logits, targets, vec![1.0 / rows as f64; rows])
    }

    /// Top-k selection with re-normalization: per row, the k largest
    /// probabilities are rescaled to sum to 1, the rest zeroed (Eq. 3).
    /// Returns the weight matrix and the row-major [rows x k] selection.
    pub fn topk_renorm(&mut self, probs: ValueId, k: usize) -> Result<(ValueId, Vec<u32>)> {
        let (rows, n) = self.vals[probs.0].dims2("topk_renorm")?;
        if k == 0 || k > n {
            return Err(arg_err("topk_renorm", format!("k must be in 1..={n}, got {k}")));
        }
        let pd = self.vals[probs.0].data();
        let mut sel = Vec::with_capacity(rows * k);
        let mut out = Tensor::zeros(self.vals[probs.0].shape());
        let od = out.data_mut();
        for r in 0..rows {
            let row = &pd[r * n..(r + 1) * n];
            let chosen = crate::tensor::topk(row, k)?;
            let s: S = chosen.iter().map(|&i| row[i]).sum();
            for &i in &chosen {
                od[r * n + i] = row[i] / s;
                sel.push(i as u32);
            }
        }
        let id = self.finish("topk_renorm", out, |out| Op::TopkRenorm { probs, sel: sel.clone(), k, out })?;
        Ok((id, sel))
    }

    /// Column means of a [rows x n] matrix; the P_i accumulator of Eq. 6.
    pub fn mean_rows(&mut self, x: ValueId) -> Result<ValueId> {
        let (rows, n) = self.vals[x.0].dims2("mean_rows")?;
        let xd = self.vals[x.0].data();
        let mut data = vec![S::zero(); n];
        for r in 0..rows {
            for c in 0..n {
                data[c] = data[c] + xd[r * n + c];
            }
        }
        let denom = S::of_f64(rows as f64);
        for v in data.iter_mut() {
            *v = *v / denom;
        }
        let out = Tensor::new(&[n], data)?;
        self.finish("mean_rows", out, |out| Op::MeanRows { x, out })
    }

    /// Scalar dot product against a constant coefficient vector; the
    /// gradient flows only through `x` (f_i stays a constant in Eq. 6).
    pub fn dot_vec(&mut self, x: ValueId, coeffs: Vec<S>) -> Result<ValueId> {
        let t = &self.vals[x.0];
        if t.shape() != [coeffs.len()] {
            return Err(shape_err("dot_vec", format!("{:?} vs {} coeffs", t.shape(), coeffs.len())));
        }
        let v: S = t.data().iter().zip(&coeffs).map(|(&a, &c)| a * c).sum();
        let out = Tensor::scalar(v);
        self.finish("dot_vec", out, |out| Op::DotVec { x, coeffs, out })
    }

    /// Scatter-weighted expert combination: out[token] = sum_i w[token, i] *
    /// expert_i(rows), for the routed token rows of each part (Eq. 4 minus
    /// the residual).
    pub fn mix_rows(&mut self, weights: ValueId, parts: Vec<MixPart>, d: usize) -> Result<ValueId> {
        let (t_rows, n_exp) = self.vals[weights.0].dims2("mix_rows")?;
        for p in &parts {
            if p.expert >= n_exp {
                return Err(KernelError::IndexOutOfRange { op: "mix_rows", index: p.expert, bound: n_exp });
            }
            let (r, pd) = self.vals[p.value.0].dims2("mix_rows")?;
            if r != p.rows.len() || pd != d {
                return Err(shape_err(
                    "mix_rows",
                    format!("part of shape {:?} vs {} rows, d={d}", self.vals[p.value.0].shape(), p.rows.len()),
                ));
            }
            for &row in &p.rows {
                if row as usize >= t_rows {
                    return Err(KernelError::IndexOutOfRange { op: "mix_rows", index: row as usize, bound: t_rows });
                }
            }
        }
        let mut out = Tensor::zeros(&[t_rows, d]);
        {
            let wd = self.vals[weights.0].data();
            let od = out.data_mut();
            for p in &parts {
                let ed = self.vals[p.value.0].data();
                for (r, &tok) in p.rows.iter().enumerate() {
                    let w = wd[tok as usize * n_exp + p.expert];
                    let dst = &mut od[tok as usize * d..(tok as usize + 1) * d];
                    let src = &ed[r * d..(r + 1) * d];
                    for (o, &e) in dst.iter_mut().zip(src) {
                        *o = *o + w * e;
                    }
                }
            }
        }
        self.finish("mix_rows", out, |out| Op::MixRows { weights, parts, out })
    }

    /// Arithmetic mean of scalar values (per-layer loss aggregation).
    pub fn mean_scalars(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(arg_err("mean_scalars", "at least one scalar required"));
        }
        let mut acc = 0.0f64;
        for &x in xs {
            let t = &self.vals[x.0];
            if t.numel() != 1 {
                return Err(shape_err("mean_scalars", format!("expected scalars, got {:?}", t.shape())));
            }
            acc += t.item().as_f64();
        }
        let out = Tensor::scalar(S::of_f64(acc / xs.len() as f64));
        self.finish("mean_scalars", out, |out| Op::MeanScalars { xs: xs.to_vec(), out })
    }

    /// Reverse replay. `loss` must be a recorded scalar.
    pub fn backward(&self, loss: ValueId) -> Result<Grads<S>> {
        if !self.recording {
            return Err(arg_err("backward", "tape was created in eval mode"));
        }
        if self.vals[loss.0].numel() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", self.vals[loss.0].shape())));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.vals.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));
        for op in self.ops.iter().rev() {
            self.apply_vjp(op, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn apply_vjp(&self, op: &Op<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        match op {
            Op::Matmul { a, b, out } => {
                let Some(dc) = grads[out.0].take() else { return Ok(()) };
                let (m, k) = self.vals[a.0].dims2("matmul")?;
                let (_, n) = self.vals[b.0].dims2("matmul")?;
                let mut da = Tensor::zeros(self.vals[a.0].shape());
                mm_nt(dc.data(), self.vals[b.0].data(), m, n, k, da.data_mut());
                acc(grads, *a, da);
                let mut db = Tensor::zeros(self.vals[b.0].shape());
                mm_tn(self.vals[a.0].data(), dc.data(), k, m, n, db.data_mut());
                acc(grads, *b, db);
                grads[out.0] = Some(dc);
            }
            Op::Bmm { a, b, trans_b, out } => {
                let Some(dc) = grads[out.0].take() else { return Ok(()) };
                let (bs, m, k) = self.vals[a.0].dims3("bmm")?;
                let n = *self.vals[out.0].shape().last().unwrap();
                let mut da = Tensor::zeros(self.vals[a.0].shape());
                let mut db = Tensor::zeros(self.vals[b.0].shape());
                if *trans_b {
                    // C = A * B^T with B [bs x n x k]: dA = dC * B, dB = dC^T * A
                    bmm(dc.data(), self.vals[b.0].data(), bs, m, n, k, false, da.data_mut());
                    for s in 0..bs {
                        mm_tn(
                            &dc.data()[s * m * n..(s + 1) * m * n],
                            &self.vals[a.0].data()[s * m * k..(s + 1) * m * k],
                            n,
                            m,
                            k,
                            &mut db.data_mut()[s * n * k..(s + 1) * n * k],
                        );
                    }
                } else {
                    // C = A * B with B [bs x k x n]: dA = dC * B^T, dB = A^T * dC
                    bmm(dc.data(), self.vals[b.0].data(), bs, m, n, k, true, da.data_mut());
                    for s in 0..bs {
                        mm_tn(
                            &self.vals[a.0].data()[s * m * k..(s + 1) * m * k],
                            &dc.data()[s * m * n..(s + 1) * m * n],
                            k,
                            m,
                            n,
                            &mut db.data_mut()[s * k * n..(s + 1) * k * n],
                        );
                    }
                }
                acc(grads, *a, da);
                acc(grads, *b, db);
                grads[out.0] = Some(dc);
            }
            Op::Add { a, b, out } => {
                let Some(d) = grads[out.0].take() else { return Ok(()) };
                acc(grads, *a, d.clone());
                acc(grads, *b, d.clone());
                grads[out.0] = Some(d);
            }
            Op::AddScaled { a, b, coeff, out } => {
                let Some(d) = grads[out.0].take() else { return Ok(()) };
                acc(grads, *a, d.clone());
                acc(grads, *b, d.map(|v| v * *coeff));
                grads[out.0] = Some(d);
            }
            Op::Mul { a, b, out } => {
                let Some(d) = grads[out.0].take() else { return Ok(()) };
                let da = elt_mul(&d, &self.vals[b.0]);
                let db = elt_mul(&d, &self.vals[a.0]);
                acc(grads, *a, da);
                acc(grads, *b, db);
                grads[out.0] = Some(d);
            }
            Op::Scale { x, coeff, out } => {
                let Some(d) = grads[out.0].take() else { return Ok(()) };
                acc(grads, *x, d.map(|v| v * *coeff));
                grads[out.0] = Some(d);
            }
            Op::Silu { x, out } => {
                let Some(d) = grads[out.0].take() else { return Ok(()) };
                let xs = &self.vals[x.0];
                let data = d
                    .data()
                    .iter()
                    .zip(xs.data())
                    .map(|(&g, &v)| {
                        let s = sigmoid(v);
                        g * s * (S::one() + v * (S::one() - s))
                    })
                    .collect();
                acc(grads, *x, Tensor::new(xs.shape(), data)?);
                grads[out.0] = Some(d);
            }
            Op::RmsNorm { x, gain, inv, out } => {
                let Some(d) = grads[out.0].take() else { return Ok(()) };
                let xs = &self.vals[x.0];
                let g = &self.vals[gain.0];
                let (rows, dim) = xs.dims2("rms_norm")?;
                let mut dx = Tensor::zeros(xs.shape());
                let mut dg = Tensor::zeros(g.shape());
                let denom = S::of_f64(dim as f64);
                {
                    let xd = xs.data();
                    let gd = g.data();
                    let dd = d.data();
                    let dxd = dx.data_mut();
                    let dgd = dg.data_mut();
                    for r in 0..rows {
                        let ir = inv[r];
                        let base = r * dim;
                        let mut dot = S::zero();
                        for c in 0..dim {
                            dot = dot + dd[base + c] * gd[c] * xd[base + c];
                        }
                        let coef = ir * ir * ir / denom * dot;
                        for c in 0..dim {
                            dxd[base + c] = ir * gd[c] * dd[base + c] - coef * xd[base + c];
                            dgd[c] = dgd[c] + dd[base + c] * xd[base + c] * ir;
                        }
                    }
                }
                acc(grads, *x, dx);
                acc(grads, *gain, dg);
                grads[out.0] = Some(d);
            }
            Op::Softmax { x, out } => {
                let Some(d) = grads[out.0].take() else { return Ok(()) };
                let p = &self.vals[out.0];
                let last = *p.shape().last().unwrap();
                let rows = p.numel() / last;
                let mut dx = Tensor::zeros(p.shape());
                {
                    let pd = p.data();
                    let dd = d.data();
                    let dxd = dx.data_mut();
                    for r in 0..rows {
                        let base = r * last;
                        let mut dot = S::zero();
                        for c in 0..last {
                            dot = dot + dd[base + c] * pd[base + c];
                        }
                        for c in 0..last {
                            dxd[base + c] = pd[base + c] * (dd[base + c] - dot);
                        }
                    }
                }
                acc(grads, *x, dx);
                grads[out.0] = Some(d);
            }
            Op::CausalSoftmax { x, out } => {
                let Some(d) = grads[out.0].take() else { return Ok(()) };
                let p = &self.vals[out.0];
                let (m, t, _) = p.dims3("causal_softmax")?;
                let mut dx = Tensor::zeros(p.shape());
                {
                    let pd = p.data();
                    let dd = d.data();
                    let dxd = dx.data_mut();
                    for s in 0..m {
                        for i in 0..t {
                            let base = (s * t + i) * t;
                            let mut dot = S::zero();
                            for j in 0..=i {
                                dot = dot + dd[base + j] * pd[base + j];
                            }
                            for j in 0..=i {
                                dxd[base + j] = pd[base + j] * (dd[base + j] - dot);
                            }
                        }
                    }
                }
                acc(grads, *x, dx);
                grads[out.0] = Some(d);
            }
            Op::SplitHeads { x, b, t, heads, out } => {
                let Some(d) = grads[out.0].take() else { return Ok(()) };
                acc(grads, *x, merge_heads_data(&d, *b, *t, *heads));
                grads[out.0] = Some(d);
            }
            Op::MergeHeads { x, b, t, heads, out } => {
                let Some(d) = grads[out.0].take() else { return Ok(()) };
                acc(grads, *x, split_heads_data(&d, *b, *t, *heads));
                grads[out.0] = Some(d);
            }
            Op::GatherRows { table, idx, out } => {
                let Some(d) = grads[out.0].take() else { return Ok(()) };
                let dim = self.vals[table.0].shape()[1];
                let mut dt = Tensor::zeros(self.vals[table.0].shape());
                {
                    let dd = d.data();
                    let dtd = dt.data_mut();
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut dtd[i as usize * dim..(i as usize + 1) * dim];
                        let src = &dd[r * dim..(r + 1) * dim];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o = *o + v;
                        }
                    }
                }
                acc(grads, *table, dt);
                grads[out.0] = Some(d);
            }
            Op::CrossEntropy { logits, targets, row_weights, out } => {
                let Some(d) = grads[out.0].take() else { return Ok(()) };
                let dscale = d.item();
                let l = &self.vals[logits.0];
                let (rows, v) = l.dims2("cross_entropy")?;
                let mut dl = Tensor::zeros(l.shape());
                {
                    let ld = l.data();
                    let dld = dl.data_mut();
                    for r in 0..rows {
                        if row_weights[r] == 0.0 {
                            continue;
                        }
                        let w = S::of_f64(row_weights[r]);
                        let row = &ld[r * v..(r + 1) * v];
                        let probs = softmax_rows(row, v);
                        let base = r * v;
                        for c in 0..v {
                            let indicator = if c == targets[r] as usize { S::one() } else { S::zero() };
                            dld[base + c] = dscale * w * (probs[c] - indicator);
                        }
                    }
                }
                acc(grads, *logits, dl);
                grads[out.0] = Some(d);
            }
            Op::TopkRenorm { probs, sel, k, out } => {
                let Some(d) = grads[out.0].take() else { return Ok(()) };
                let p = &self.vals[probs.0];
                let w = &self.vals[out.0];
                let (rows, n) = p.dims2("topk_renorm")?;
                let mut dp = Tensor::zeros(p.shape());
                {
                    let pd = p.data();
                    let wd = w.data();
                    let dd = d.data();
                    let dpd = dp.data_mut();
                    for r in 0..rows {
                        let chosen = &sel[r * k..(r + 1) * k];
                        let mut s = S::zero();
                        let mut dot = S::zero();
                        for &i in chosen {
                            s = s + pd[r * n + i as usize];
                            dot = dot + dd[r * n + i as usize] * wd[r * n + i as usize];
                        }
                        for &i in chosen {
                            dpd[r * n + i as usize] = (dd[r * n + i as usize] - dot) / s;
                        }
                    }
                }
                acc(grads, *probs, dp);
                grads[out.0] = Some(d);
            }
            Op::MeanRows { x, out } => {
                let Some(d) = grads[out.0].take() else { return Ok(()) };
                let xs = &self.vals[x.0];
                let (rows, n) = xs.dims2("mean_rows")?;
                let inv = S::of_f64(1.0 / rows as f64);
                let mut dx = Tensor::zeros(xs.shape());
                {
                    let dd = d.data();
                    let dxd = dx.data_mut();
                    for r in 0..rows {
                        for c in 0..n {
                            dxd[r * n + c] = dd[c] * inv;
                        }
                    }
                }
                acc(grads, *x, dx);
                grads[out.0] = Some(d);
            }
            Op::DotVec { x, coeffs, out } => {
                let Some(d) = grads[out.0].take() else { return Ok(()) };
                let ds = d.item();
                let data = coeffs.iter().map(|&c| c * ds).collect();
                acc(grads, *x, Tensor::new(self.vals[x.0].shape(), data)?);
                grads[out.0] = Some(d);
            }
            Op::MixRows { weights, parts, out } => {
                let Some(d) = grads[out.0].take() else { return Ok(()) };
                let w = &self.vals[weights.0];
                let (_, n_exp) = w.dims2("mix_rows")?;
                let dim = self.vals[out.0].shape()[1];
                let mut dw = Tensor::zeros(w.shape());
                {
                    let wd = w.data();
                    let dd = d.data();
                    let dwd = dw.data_mut();
                    for p in parts {
                        let ed = self.vals[p.value.0].data();
                        let mut de = Tensor::zeros(self.vals[p.value.0].shape());
                        {
                            let ded = de.data_mut();
                            for (r, &tok) in p.rows.iter().enumerate() {
                                let tok = tok as usize;
                                let wv = wd[tok * n_exp + p.expert];
                                let drow = &dd[tok * dim..(tok + 1) * dim];
                                let erow = &ed[r * dim..(r + 1) * dim];
                                let mut dot = S::zero();
                                for ((o, &g), &e) in ded[r * dim..(r + 1) * dim].iter_mut().zip(drow).zip(erow) {
                                    *o = wv * g;
                                    dot = dot + g * e;
                                }
                                dwd[tok * n_exp + p.expert] = dwd[tok * n_exp + p.expert] + dot;
                            }
                        }
                        acc(grads, p.value, de);
                    }
                }
                acc(grads, *weights, dw);
                grads[out.0] = Some(d);
            }
            Op::MeanScalars { xs, out } => {
                let Some(d) = grads[out.0].take() else { return Ok(()) };
                let share = d.item() / S::of_f64(xs.len() as f64);
                for &x in xs {
                    acc(grads, x, Tensor::scalar(share));
                }
                grads[out.0] = Some(d);
            }
        }
        Ok(())
    }
}

fn acc<S: Real>(grads: &mut [Option<Tensor<S>>], id: ValueId, contribution: Tensor<S>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (o, &c) in existing.data_mut().iter_mut().zip(contribution.data()) {
                *o = *o + c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn elt_mul<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

fn sigmoid<S: Real>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn silu_scalar<S: Real>(x: S) -> S {
    x * sigmoid(x)
}

fn softmax_rows<S: Real>(data: &[S], last: usize) -> Vec<S> {
    let rows = data.len() / last;
    let mut out = vec![S::zero(); data.len()];
    for r in 0..rows {
        let row = &data[r * last..(r + 1) * last];
        let mx = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let mut denom = S::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            out[r * last + j] = e;
            denom = denom + e;
        }
        for j in 0..last {
            out[r * last + j] = out[r * last + j] / denom;
        }
    }
    out
}

fn split_heads_data<S: Real>(x: &Tensor<S>, b: usize, t: usize, heads: usize) -> Tensor<S> {
    let d = x.shape()[1];
    let hd = d / heads;
    let mut out = Tensor::zeros(&[b * heads, t, hd]);
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ti in 0..t {
            for h in 0..heads {
                let src = (bi * t + ti) * d + h * hd;
                let dst = ((bi * heads + h) * t + ti) * hd;
                od[dst..dst + hd].copy_from_slice(&xd[src..src + hd]);
            }
        }
    }
    out
}

fn merge_heads_data<S: Real>(x: &Tensor<S>, b: usize, t: usize, heads: usize) -> Tensor<S> {
    let hd = x.shape()[2];
    let d = heads * hd;
    let mut out = Tensor::zeros(&[b * t, d]);
    let xd = x.data();
    let od = out.data_mut();
    for bi in 0..b {
        for ti in 0..t {
            for h in 0..heads {
                let src = ((bi * heads + h) * t + ti) * hd;
                let dst = (bi * t + ti) * d + h * hd;
                od[dst..dst + hd].copy_from_slice(&xd[src..src + hd]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn leaf64(tape: &mut Tape<f64>, shape: &[usize], data: Vec<f64>) -> ValueId {
        tape.leaf(Tensor::new(shape, data).unwrap()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::<f64>::new();
        let i2 = leaf64(&mut tape, &[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let a = leaf64(&mut tape, &[2, 2], vec![3.0, -1.0, 2.5, 7.0]);
        let c = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(c).data(), tape.value(a).data());
    }

    #[test]
    fn matmul_hand_case() {
        let mut tape = Tape::<f64>::new();
        let a = leaf64(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf64(&mut tape, &[2, 1], vec![0.0, 1.0]);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = leaf64(&mut tape, &[2, 3], vec![0.0; 6]);
        let b = leaf64(&mut tape, &[2, 2], vec![0.0; 4]);
        assert!(matches!(tape.matmul(a, b), Err(KernelError::ShapeMismatch { .. })));
    }

    /// Gradient of sum(A*B) w.r.t. A is ones(m,n) * B^T, checked against a
    /// central finite-difference oracle in both precisions.
    #[test]
    fn matmul_gradient_matches_ones_bt_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (5, 7, 3);
        let a_t = Tensor::<f64>::randn(&[m, k], 1.0, &mut rng);
        let b_t = Tensor::<f64>::randn(&[k, n], 1.0, &mut rng);

        let loss_of = |a_data: &[f64]| -> f64 {
            let mut tape = Tape::<f64>::eval();
            let a = tape.leaf(Tensor::new(&[m, k], a_data.to_vec()).unwrap()).unwrap();
            let b = tape.leaf(b_t.clone()).unwrap();
            let c = tape.matmul(a, b).unwrap();
            tape.value(c).data().iter().sum()
        };

        // sum(C) = ones_row * C * ones_col via two matmuls.
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(a_t.clone()).unwrap();
        let b = tape.leaf(b_t.clone()).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let ones_row = tape.leaf(Tensor::full(&[1, m], 1.0)).unwrap();
        let ones_col = tape.leaf(Tensor::full(&[n, 1], 1.0)).unwrap();
        let rowsum = tape.matmul(ones_row, c).unwrap();
        let total = tape.matmul(rowsum, ones_col).unwrap();
        let grads = tape.backward(total).unwrap();
        let da = grads.get(a).unwrap();

        // Analytic expectation: ones(m,n) * B^T.
        let mut expect = vec![0.0; m * k];
        for i in 0..m {
            for l in 0..k {
                expect[i * k + l] = (0..n).map(|j| b_t.data()[l * n + j]).sum();
            }
        }
        for (g, e) in da.data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "analytic gradient mismatch: {g} vs {e}");
        }

        // Finite differences, f64 tolerance 1e-6.
        let eps = 1e-5;
        for idx in [0usize, 3, 11, 20, 34] {
            let mut lo = a_t.data().to_vec();
            let mut hi = lo.clone();
            lo[idx] -= eps;
            hi[idx] += eps;
            let fd = (loss_of(&hi) - loss_of(&lo)) / (2.0 * eps);
            let an = da.data()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-9);
            assert!(rel < 1e-6, "fd {fd} vs analytic {an}");
        }

        // Same check in binary32 at the looser tolerance.
        let a32 = a_t.to_f32();
        let b32 = b_t.to_f32();
        let loss32 = |a_data: &[f32]| -> f32 {
            let mut tape = Tape::<f32>::eval();
            let a = tape.leaf(Tensor::new(&[m, k], a_data.to_vec()).unwrap()).unwrap();
            let b = tape.leaf(b32.clone()).unwrap();
            let c = tape.matmul(a, b).unwrap();
            tape.value(c).data().iter().sum()
        };
        let eps32 = 1e-2f32;
        for idx in [0usize, 7, 19] {
            let mut lo = a32.data().to_vec();
            let mut hi = lo.clone();
            lo[idx] -= eps32;
            hi[idx] += eps32;
            let fd = (loss32(&hi) - loss32(&lo)) / (2.0 * eps32);
            let an = expect[idx] as f32;
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            assert!(rel < 1e-3, "f32 fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn silu_values() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, &[3], vec![0.0, 10.0, 1.0]);
        let y = tape.silu(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 10.0).abs() < 5e-4);
        assert!((d[2] - 0.731059).abs() < 1e-5);
    }

    #[test]
    fn softmax_uniform_and_hand_case() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, &[1, 4], vec![0.0; 4]);
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        let x2 = leaf64(&mut tape, &[1, 4], vec![5.0f64.ln(), 3.0f64.ln(), 0.0, 0.0]);
        let y2 = tape.softmax(x2).unwrap();
        let want = [0.5, 0.3, 0.1, 0.1];
        for (v, w) in tape.value(y2).data().iter().zip(&want) {
            assert!((v - w).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant_rows_sum_to_one(
            logits in prop::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let n = logits.len();
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(Tensor::new(&[1, n], logits.clone()).unwrap()).unwrap();
            let y = tape.softmax(x).unwrap();
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let xs = tape.leaf(Tensor::new(&[1, n], shifted).unwrap()).unwrap();
            let ys = tape.softmax(xs).unwrap();
            let sum: f64 = tape.value(y).data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(tape.value(y).data().iter().all(|&p| p > 0.0));
            for (a, b) in tape.value(y).data().iter().zip(tape.value(ys).data()) {
                prop_assert!((a - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let v = 11usize;
        let mut tape = Tape::<f32>::new();
        let logits = tape.leaf(Tensor::zeros(&[3, v])).unwrap();
        let loss = tape.cross_entropy(logits, &[1, 5, 10]).unwrap();
        assert_eq!(tape.value(loss).item(), (v as f32).ln());
    }

    #[test]
    fn cross_entropy_saturation() {
        let v = 10usize;
        let mut data = vec![0.0f64; v];
        data[v - 1] = 20.0;
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::new(&[1, v], data).unwrap()).unwrap();
        let loss = tape.cross_entropy(logits, &[(v - 1) as u32]).unwrap();
        assert!(tape.value(loss).item() < 1e-6);
    }

    #[test]
    fn cross_entropy_hand_case() {
        // From the softmax hand case: p(target=1) = 0.3.
        let mut tape = Tape::<f64>::new();
        let logits = tape
            .leaf(Tensor::new(&[1, 4], vec![5.0f64.ln(), 3.0f64.ln(), 0.0, 0.0]).unwrap())
            .unwrap();
        let loss = tape.cross_entropy(logits, &[1]).unwrap();
        assert!((tape.value(loss).item() - 1.20397).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(&[1, 4])).unwrap();
        assert!(matches!(
            tape.cross_entropy(logits, &[4]),
            Err(KernelError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn nan_input_is_rejected_at_leaf() {
        let mut tape = Tape::<f32>::new();
        assert!(matches!(
            tape.leaf(Tensor::new(&[1], vec![f32::NAN]).unwrap()),
            Err(KernelError::NonFinite { .. })
        ));
    }

    #[test]
    fn overflow_to_infinity_is_reported_with_op_name() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::full(&[1, 1], 1e30)).unwrap();
        let b = tape.leaf(Tensor::full(&[1, 1], 1e30)).unwrap();
        match tape.matmul(a, b) {
            Err(KernelError::NonFinite { op }) => assert_eq!(op, "matmul"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn topk_renorm_hand_case_and_tie_break() {
        let mut tape = Tape::<f64>::new();
        let p = leaf64(&mut tape, &[1, 4], vec![0.5, 0.3, 0.1, 0.1]);
        let (w, sel) = tape.topk_renorm(p, 2).unwrap();
        assert_eq!(sel, vec![0, 1]);
        let wd = tape.value(w).data();
        assert!((wd[0] - 0.625).abs() < 1e-12);
        assert!((wd[1] - 0.375).abs() < 1e-12);
        assert_eq!(wd[2], 0.0);
        assert_eq!(wd[3], 0.0);

        let uniform = leaf64(&mut tape, &[1, 4], vec![0.25; 4]);
        let (wu, selu) = tape.topk_renorm(uniform, 2).unwrap();
        assert_eq!(selu, vec![0, 1]);
        assert_eq!(tape.value(wu).data(), &[0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn unused_leaf_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let used = leaf64(&mut tape, &[1, 2], vec![1.0, 2.0]);
        let unused = leaf64(&mut tape, &[2, 2], vec![1.0; 4]);
        let loss = tape.cross_entropy(used, &[0]).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(unused).is_none());
        let z = grads.get_or_zeros(unused, &[2, 2]);
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert!(grads.get(used).is_some());
    }

    #[test]
    fn causal_softmax_masks_upper_triangle() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, &[1, 3, 3], vec![1.0, 9.0, 9.0, 0.5, 0.5, 9.0, 1.0, 1.0, 1.0]);
        let y = tape.causal_softmax(x).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
        assert!((d[3] - 0.5).abs() < 1e-12 && (d[4] - 0.5).abs() < 1e-12);
        assert_eq!(d[5], 0.0);
        let last: f64 = d[6..9].iter().sum();
        assert!((last - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_merge_heads_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, t, heads, d) = (2, 3, 2, 4);
        let x = Tensor::<f64>::randn(&[b * t, d], 1.0, &mut rng);
        let mut tape = Tape::<f64>::new();
        let xid = tape.leaf(x.clone()).unwrap();
        let s = tape.split_heads(xid, b, t, heads).unwrap();
        let m = tape.merge_heads(s, b, t, heads).unwrap();
        assert!(tape.value(m).bit_eq(&x));
    }
}
