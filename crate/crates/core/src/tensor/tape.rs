//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Forward calls record each executed op together with its output value;
//! `backward` replays the tape in reverse, visiting each node exactly once
//! and accumulating vector-Jacobian products into the inputs. Leaves staged
//! from a [`Params`] registry carry their `ParamId` so gradients can be
//! flushed back after the pass. Dropping the tape frees all intermediates.

use crate::error::{Error, Result};
use crate::tensor::kernels as k;
use crate::tensor::{Array, ParamId, Params};

/// Handle to a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// out = a @ b
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Gelu { a: Var },
    /// Row softmax over the last axis of a rank-2 input.
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, rstd: Vec<f64> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<f64>, rstd: Vec<f64> },
    /// Per-channel 2-D cross-correlation, kernel (C, kh, kw).
    ConvDw { x: Var, kern: Var, stride: usize, pad: usize },
    /// 1x1 cross-channel convolution, kernel (C_out, C_in).
    ConvPw { x: Var, kern: Var },
    /// Dense convolution, kernel (C_out, C_in, kh, kw).
    Conv2d { x: Var, kern: Var, stride: usize, pad: usize },
    AdaptiveAvgPool { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    /// Mean NLL over non-ignored rows; saves probabilities for backward.
    CrossEntropy { logits: Var, targets: Vec<i64>, ignore_index: i64, probs: Vec<f64>, count: usize },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    Sum { a: Var },
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    /// Gradient of the loss w.r.t. `v`, if one flowed there during `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node { value, op, needs_grad, param });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── Leaves ───────────────────────────────────────────────────────

    /// Differentiable leaf (used by tests and gradient checks).
    pub fn var(&mut self, a: Array) -> Var {
        self.push(a, Op::Leaf, true, None)
    }

    /// Non-differentiable leaf (inputs, masks, frozen activations).
    pub fn constant(&mut self, a: Array) -> Var {
        self.push(a, Op::Leaf, false, None)
    }

    /// Stage a registered parameter. Trainable entries become differentiable
    /// leaves; frozen entries are constants, so no gradient ever reaches them.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        let e = params.get(id);
        self.push(e.value.clone(), Op::Leaf, e.trainable, Some(id))
    }

    // ── Ops ──────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(Error::Shape(format!(
                "matmul: inner dims disagree, lhs {:?} rhs {:?}",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        let mut out = vec![0.0; m * n];
        k::matmul_nn(&self.value(a).data, &self.value(b).data, m, ka, n, &mut out);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Array { shape: vec![m, n], data: out }, Op::MatMul { a, b }, ng, None))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let mut out = vec![0.0; r * c];
        k::transpose(&self.value(a).data, r, c, &mut out);
        let ng = self.needs(a);
        Ok(self.push(Array { shape: vec![c, r], data: out }, Op::Transpose { a }, ng, None))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(Error::Shape(format!(
                "reshape: {:?} has {} elements, target {:?} needs {}",
                self.value(a).shape,
                self.value(a).numel(),
                shape,
                n
            )));
        }
        let value = Array { shape: shape.to_vec(), data: self.value(a).data.clone() };
        let ng = self.needs(a);
        Ok(self.push(value, Op::Reshape { a }, ng, None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Array { shape, data }, Op::Add { a, b }, ng, None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Array { shape, data }, Op::Mul { a, b }, ng, None))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|x| x * c).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.needs(a);
        self.push(Array { shape, data }, Op::Scale { a, c }, ng, None)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.value(a).data.iter().map(|&x| k::gelu(x)).collect();
        let shape = self.value(a).shape.clone();
        let ng = self.needs(a);
        self.push(Array { shape, data }, Op::Gelu { a }, ng, None)
    }

    /// Softmax of a rank-2 array along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => self.softmax_last(a),
            0 => {
                let t = self.transpose(a)?;
                let s = self.softmax_last(t)?;
                self.transpose(s)
            }
            _ => Err(Error::Shape(format!("softmax: axis {axis} out of range for rank 2"))),
        }
    }

    fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        let mut data = self.value(a).data.clone();
        k::softmax_rows(&mut data, r, c);
        let ng = self.needs(a);
        Ok(self.push(Array { shape: vec![r, c], data }, Op::Softmax { a }, ng, None))
    }

    /// Per-row normalization over the last axis of a rank-2 input, then a
    /// per-feature affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!(
                "layer_norm: affine shapes {:?}/{:?} do not match feature dim {}",
                self.value(gamma).shape,
                self.value(beta).shape,
                c
            )));
        }
        let mut mean = vec![0.0; r];
        let mut rstd = vec![0.0; r];
        let mut data = vec![0.0; r * c];
        {
            let xv = &self.value(x).data;
            let g = &self.value(gamma).data;
            let b = &self.value(beta).data;
            for i in 0..r {
                let row = &xv[i * c..(i + 1) * c];
                let m: f64 = row.iter().sum::<f64>() / c as f64;
                let var: f64 = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / c as f64;
                let rs = 1.0 / (var + eps).sqrt();
                mean[i] = m;
                rstd[i] = rs;
                for j in 0..c {
                    data[i * c + j] = g[j] * (row[j] - m) * rs + b[j];
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Array { shape: vec![r, c], data },
            Op::LayerNorm { x, gamma, beta, mean, rstd },
            ng,
            None,
        ))
    }

    /// GroupNorm over a (C, H, W) input: each group of C/groups channels is
    /// normalized over (channels-in-group x H x W), then a per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: channel count {c} not divisible by {groups} groups"
            )));
        }
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!(
                "group_norm: affine shapes {:?}/{:?} do not match channel dim {}",
                self.value(gamma).shape,
                self.value(beta).shape,
                c
            )));
        }
        let cg = c / groups;
        let hw = h * w;
        let gn = cg * hw;
        let mut mean = vec![0.0; groups];
        let mut rstd = vec![0.0; groups];
        let mut data = vec![0.0; c * hw];
        {
            let xv = &self.value(x).data;
            let gv = &self.value(gamma).data;
            let bv = &self.value(beta).data;
            for g in 0..groups {
                let seg = &xv[g * gn..(g + 1) * gn];
                let m: f64 = seg.iter().sum::<f64>() / gn as f64;
                let var: f64 = seg.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / gn as f64;
                let rs = 1.0 / (var + eps).sqrt();
                mean[g] = m;
                rstd[g] = rs;
                for ci in 0..cg {
                    let ch = g * cg + ci;
                    for p in 0..hw {
                        let idx = ch * hw + p;
                        data[idx] = gv[ch] * (xv[idx] - m) * rs + bv[ch];
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Array { shape: vec![c, h, w], data },
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd },
            ng,
            None,
        ))
    }

    /// Depthwise 2-D cross-correlation: input (C, H, W), kernel (C, kh, kw),
    /// zero padding, floor output sizing.
    pub fn conv2d_depthwise(&mut self, x: Var, kern: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let (ck, kh, kw) = self.value(kern).dims3()?;
        if c != ck {
            return Err(Error::Shape(format!(
                "conv2d_depthwise: input has {c} channels, kernel {ck}"
            )));
        }
        let h2 = k::conv_out_dim(h, kh, stride, pad);
        let w2 = k::conv_out_dim(w, kw, stride, pad);
        let mut data = vec![0.0; c * h2 * w2];
        {
            let xv = &self.value(x).data;
            let kv = &self.value(kern).data;
            for ch in 0..c {
                let xc = &xv[ch * h * w..(ch + 1) * h * w];
                let kc = &kv[ch * kh * kw..(ch + 1) * kh * kw];
                let oc = &mut data[ch * h2 * w2..(ch + 1) * h2 * w2];
                for i in 0..h2 {
                    for j in 0..w2 {
                        let mut s = 0.0;
                        for u in 0..kh {
                            let y = (i * stride + u) as isize - pad as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            for v in 0..kw {
                                let xx = (j * stride + v) as isize - pad as isize;
                                if xx < 0 || xx >= w as isize {
                                    continue;
                                }
                                s += xc[y as usize * w + xx as usize] * kc[u * kw + v];
                            }
                        }
                        oc[i * w2 + j] = s;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(kern);
        Ok(self.push(
            Array { shape: vec![c, h2, w2], data },
            Op::ConvDw { x, kern, stride, pad },
            ng,
            None,
        ))
    }

    /// Pointwise 1x1 convolution: input (C_in, H, W), kernel (C_out, C_in).
    pub fn conv2d_pointwise(&mut self, x: Var, kern: Var) -> Result<Var> {
        let (cin, h, w) = self.value(x).dims3()?;
        let (cout, ck) = self.value(kern).dims2()?;
        if cin != ck {
            return Err(Error::Shape(format!(
                "conv2d_pointwise: input has {cin} channels, kernel expects {ck}"
            )));
        }
        let hw = h * w;
        let mut data = vec![0.0; cout * hw];
        k::matmul_nn(&self.value(kern).data, &self.value(x).data, cout, cin, hw, &mut data);
        let ng = self.needs(x) || self.needs(kern);
        Ok(self.push(Array { shape: vec![cout, h, w], data }, Op::ConvPw { x, kern }, ng, None))
    }

    /// Dense 2-D convolution: input (C_in, H, W), kernel (C_out, C_in, kh, kw).
    /// Exists for the standard-convolution ablation variant.
    pub fn conv2d(&mut self, x: Var, kern: Var, stride: usize, pad: usize) -> Result<Var> {
        let (cin, h, w) = self.value(x).dims3()?;
        let kshape = self.value(kern).shape.clone();
        let [cout, ck, kh, kw] = match kshape[..] {
            [a, b, c2, d] => [a, b, c2, d],
            _ => return Err(Error::Shape(format!("conv2d: kernel must be rank 4, got {kshape:?}"))),
        };
        if cin != ck {
            return Err(Error::Shape(format!(
                "conv2d: input has {cin} channels, kernel expects {ck}"
            )));
        }
        let h2 = k::conv_out_dim(h, kh, stride, pad);
        let w2 = k::conv_out_dim(w, kw, stride, pad);
        let mut data = vec![0.0; cout * h2 * w2];
        {
            let xv = &self.value(x).data;
            let kv = &self.value(kern).data;
            for o in 0..cout {
                for i in 0..h2 {
                    for j in 0..w2 {
                        let mut s = 0.0;
                        for ci in 0..cin {
                            let xc = &xv[ci * h * w..(ci + 1) * h * w];
                            let kc = &kv[(o * cin + ci) * kh * kw..(o * cin + ci + 1) * kh * kw];
                            for u in 0..kh {
                                let y = (i * stride + u) as isize - pad as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                for v in 0..kw {
                                    let xx = (j * stride + v) as isize - pad as isize;
                                    if xx < 0 || xx >= w as isize {
                                        continue;
                                    }
                                    s += xc[y as usize * w + xx as usize] * kc[u * kw + v];
                                }
                            }
                        }
                        data[(o * h2 + i) * w2 + j] = s;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(kern);
        Ok(self.push(
            Array { shape: vec![cout, h2, w2], data },
            Op::Conv2d { x, kern, stride, pad },
            ng,
            None,
        ))
    }

    /// Adaptive average pooling with floor-partition windows: output cell
    /// (i, j) is the mean of the input over rows
    /// [floor(i*H/out_h), floor((i+1)*H/out_h)) and the analogous columns.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
            return Err(Error::Shape(format!(
                "adaptive_avg_pool2d: output {out_h}x{out_w} invalid for input {h}x{w}"
            )));
        }
        let mut data = vec![0.0; c * out_h * out_w];
        {
            let xv = &self.value(x).data;
            for ch in 0..c {
                let xc = &xv[ch * h * w..(ch + 1) * h * w];
                for i in 0..out_h {
                    let r0 = i * h / out_h;
                    let r1 = (i + 1) * h / out_h;
                    for j in 0..out_w {
                        let c0 = j * w / out_w;
                        let c1 = (j + 1) * w / out_w;
                        let mut s = 0.0;
                        for r in r0..r1 {
                            for cc in c0..c1 {
                                s += xc[r * w + cc];
                            }
                        }
                        data[(ch * out_h + i) * out_w + j] = s / ((r1 - r0) * (c1 - c0)) as f64;
                    }
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Array { shape: vec![c, out_h, out_w], data },
            Op::AdaptiveAvgPool { x },
            ng,
            None,
        ))
    }

    /// Row lookup: table (V, D), ids -> (len(ids), D).
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Data(format!("embedding id {bad} out of vocabulary range {v}")));
        }
        let tv = &self.value(table).data;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            Array { shape: vec![ids.len(), d], data },
            Op::Embedding { table, ids: ids.to_vec() },
            ng,
            None,
        ))
    }

    /// Mean negative log-likelihood over rows whose target is not
    /// `ignore_index`. Returns a scalar.
    pub fn cross_entropy_from_logits(
        &mut self,
        logits: Var,
        targets: &[i64],
        ignore_index: i64,
    ) -> Result<Var> {
        let (r, v) = self.value(logits).dims2()?;
        if targets.len() != r {
            return Err(Error::Shape(format!(
                "cross_entropy: {} logit rows but {} targets",
                r,
                targets.len()
            )));
        }
        if let Some(&bad) = targets
            .iter()
            .find(|&&t| t != ignore_index && (t < 0 || t >= v as i64))
        {
            return Err(Error::Data(format!("target id {bad} out of vocabulary range {v}")));
        }
        let count = targets.iter().filter(|&&t| t != ignore_index).count();
        if count == 0 {
            return Err(Error::Data("empty target: every position is ignored".into()));
        }
        let mut probs = self.value(logits).data.clone();
        k::softmax_rows(&mut probs, r, v);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t != ignore_index {
                // Clamp exact zeros away from ln; NaN/Inf must still propagate.
                let p = probs[i * v + t as usize];
                let p = if p < f64::MIN_POSITIVE { f64::MIN_POSITIVE } else { p };
                loss -= p.ln();
            }
        }
        loss /= count as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Array::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), ignore_index, probs, count },
            ng,
            None,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if start + len > r {
            return Err(Error::Shape(format!(
                "slice_rows: rows {start}..{} out of range for {r}",
                start + len
            )));
        }
        let data = self.value(a).data[start * c..(start + len) * c].to_vec();
        let ng = self.needs(a);
        Ok(self.push(Array { shape: vec![len, c], data }, Op::SliceRows { a, start }, ng, None))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2()?;
        if start + len > c {
            return Err(Error::Shape(format!(
                "slice_cols: cols {start}..{} out of range for {c}",
                start + len
            )));
        }
        let av = &self.value(a).data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(a);
        Ok(self.push(Array { shape: vec![r, len], data }, Op::SliceCols { a, start }, ng, None))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows: no parts".into()));
        }
        let (_, c) = self.value(parts[0]).dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(Error::Shape(format!(
                    "concat_rows: column mismatch, {:?} vs {:?}",
                    self.value(parts[0]).shape,
                    self.value(p).shape
                )));
            }
            rows += r;
            data.extend_from_slice(&self.value(p).data);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Array { shape: vec![rows, c], data },
            Op::ConcatRows { parts: parts.to_vec() },
            ng,
            None,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no parts".into()));
        }
        let (r, _) = self.value(parts[0]).dims2()?;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::Shape(format!(
                    "concat_cols: row mismatch, {:?} vs {:?}",
                    self.value(parts[0]).shape,
                    self.value(p).shape
                )));
            }
            cols += pc;
        }
        let mut data = vec![0.0; r * cols];
        let mut off = 0;
        for &p in parts {
            let (_, pc) = self.value(p).dims2()?;
            let pv = &self.value(p).data;
            for i in 0..r {
                data[i * cols + off..i * cols + off + pc].copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Array { shape: vec![r, cols], data },
            Op::ConcatCols { parts: parts.to_vec() },
            ng,
            None,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data.iter().sum();
        let ng = self.needs(a);
        self.push(Array::scalar(s), Op::Sum { a }, ng, None)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse replay from a scalar loss. Consumes the tape: gradients stay
    /// readable, but a second backward is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Config("backward: tape already consumed".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Gradients of every trainable parameter staged on this tape, keyed by
    /// `ParamId`, in staging order. Entries the loss never reached are
    /// omitted. Call after `backward`.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.needs_grad)
            .filter_map(|(i, n)| Some((n.param?, self.grads[i].clone()?)))
            .collect()
    }

    /// Add `scale * grad` into the gradient accumulators of every trainable
    /// parameter staged on this tape. Call after `backward`.
    pub fn accumulate_param_grads(&self, params: &mut Params, scale: f64) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, self.grads[i].as_ref()) {
                let entry = params.get_mut(pid);
                if entry.trainable {
                    for (dst, src) in entry.grad.iter_mut().zip(g) {
                        *dst += scale * src;
                    }
                }
            }
        }
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape != self.value(b).shape {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape,
                self.value(b).shape
            )));
        }
        Ok(())
    }

    fn accum(&mut self, v: Var, f: impl FnOnce(&[f64], &mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let value = &self.nodes[v.0].value.data;
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(value, slot);
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Clone out the small op metadata; saved buffers (probs, means) are
        // moved back untouched because ops are matched by reference.
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, kk) = (self.value(a).shape[0], self.value(a).shape[1]);
                let n = self.value(b).shape[1];
                let (av, bv) = (self.value(a).data.clone(), self.value(b).data.clone());
                self.accum(a, |_, ga| k::matmul_nt(g, &bv, m, n, kk, ga));
                self.accum(b, |_, gb| k::matmul_tn(&av, g, m, kk, n, gb));
            }
            &Op::Transpose { a } => {
                let (r, c) = (self.value(a).shape[0], self.value(a).shape[1]);
                self.accum(a, |_, ga| {
                    // g has shape (c, r); transpose it back.
                    for j in 0..c {
                        for ii in 0..r {
                            ga[ii * c + j] += g[j * r + ii];
                        }
                    }
                });
            }
            &Op::Reshape { a } => {
                self.accum(a, |_, ga| {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            &Op::Add { a, b } => {
                self.accum(a, |_, ga| {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                });
                self.accum(b, |_, gb| {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            &Op::Mul { a, b } => {
                let bv = self.value(b).data.clone();
                let av = self.value(a).data.clone();
                self.accum(a, |_, ga| {
                    for ((d, s), o) in ga.iter_mut().zip(g).zip(&bv) {
                        *d += s * o;
                    }
                });
                self.accum(b, |_, gb| {
                    for ((d, s), o) in gb.iter_mut().zip(g).zip(&av) {
                        *d += s * o;
                    }
                });
            }
            &Op::Scale { a, c } => {
                self.accum(a, |_, ga| {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s * c;
                    }
                });
            }
            &Op::Gelu { a } => {
                self.accum(a, |xv, ga| {
                    for ((d, s), &x) in ga.iter_mut().zip(g).zip(xv) {
                        *d += s * k::gelu_deriv(x);
                    }
                });
            }
            &Op::Softmax { a } => {
                let (r, c) = (self.value(i_var(i)).shape[0], self.value(i_var(i)).shape[1]);
                let y = self.value(i_var(i)).data.clone();
                self.accum(a, |_, ga| {
                    for row in 0..r {
                        let yr = &y[row * c..(row + 1) * c];
                        let gr = &g[row * c..(row + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                        let out = &mut ga[row * c..(row + 1) * c];
                        for j in 0..c {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (mean, rstd) = (mean.clone(), rstd.clone());
                let (r, c) = (self.value(x).shape[0], self.value(x).shape[1]);
                let xv = self.value(x).data.clone();
                let gv = self.value(gamma).data.clone();
                let xhat = |row: usize, j: usize| (xv[row * c + j] - mean[row]) * rstd[row];
                self.accum(gamma, |_, gg| {
                    for row in 0..r {
                        for j in 0..c {
                            gg[j] += g[row * c + j] * xhat(row, j);
                        }
                    }
                });
                self.accum(beta, |_, gb| {
                    for row in 0..r {
                        for j in 0..c {
                            gb[j] += g[row * c + j];
                        }
                    }
                });
                self.accum(x, |_, gx| {
                    for row in 0..r {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let dh = g[row * c + j] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat(row, j);
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let dh = g[row * c + j] * gv[j];
                            gx[row * c + j] += rstd[row] * (dh - m1 - xhat(row, j) * m2);
                        }
                    }
                });
            }
            Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                let (x, gamma, beta, groups) = (*x, *gamma, *beta, *groups);
                let (mean, rstd) = (mean.clone(), rstd.clone());
                let (c, h, w) = (
                    self.value(x).shape[0],
                    self.value(x).shape[1],
                    self.value(x).shape[2],
                );
                let hw = h * w;
                let cg = c / groups;
                let gn = cg * hw;
                let xv = self.value(x).data.clone();
                let gv = self.value(gamma).data.clone();
                let xhat =
                    |idx: usize, grp: usize| (xv[idx] - mean[grp]) * rstd[grp];
                self.accum(gamma, |_, gg| {
                    for ch in 0..c {
                        let grp = ch / cg;
                        for p in 0..hw {
                            let idx = ch * hw + p;
                            gg[ch] += g[idx] * xhat(idx, grp);
                        }
                    }
                });
                self.accum(beta, |_, gb| {
                    for ch in 0..c {
                        for p in 0..hw {
                            gb[ch] += g[ch * hw + p];
                        }
                    }
                });
                self.accum(x, |_, gx| {
                    for grp in 0..groups {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for ci in 0..cg {
                            let ch = grp * cg + ci;
                            for p in 0..hw {
                                let idx = ch * hw + p;
                                let dh = g[idx] * gv[ch];
                                m1 += dh;
                                m2 += dh * xhat(idx, grp);
                            }
                        }
                        m1 /= gn as f64;
                        m2 /= gn as f64;
                        for ci in 0..cg {
                            let ch = grp * cg + ci;
                            for p in 0..hw {
                                let idx = ch * hw + p;
                                let dh = g[idx] * gv[ch];
                                gx[idx] += rstd[grp] * (dh - m1 - xhat(idx, grp) * m2);
                            }
                        }
                    }
                });
            }
            &Op::ConvDw { x, kern, stride, pad } => {
                let (c, h, w) = (
                    self.value(x).shape[0],
                    self.value(x).shape[1],
                    self.value(x).shape[2],
                );
                let (kh, kw) = (self.value(kern).shape[1], self.value(kern).shape[2]);
                let (h2, w2) = (
                    self.value(i_var(i)).shape[1],
                    self.value(i_var(i)).shape[2],
                );
                let xv = self.value(x).data.clone();
                let kv = self.value(kern).data.clone();
                self.accum(x, |_, gx| {
                    for ch in 0..c {
                        for ii in 0..h2 {
                            for j in 0..w2 {
                                let go = g[(ch * h2 + ii) * w2 + j];
                                for u in 0..kh {
                                    let y = (ii * stride + u) as isize - pad as isize;
                                    if y < 0 || y >= h as isize {
                                        continue;
                                    }
                                    for v in 0..kw {
                                        let xx = (j * stride + v) as isize - pad as isize;
                                        if xx < 0 || xx >= w as isize {
                                            continue;
                                        }
                                        gx[(ch * h + y as usize) * w + xx as usize] +=
                                            go * kv[(ch * kh + u) * kw + v];
                                    }
                                }
                            }
                        }
                    }
                });
                self.accum(kern, |_, gk| {
                    for ch in 0..c {
                        for ii in 0..h2 {
                            for j in 0..w2 {
                                let go = g[(ch * h2 + ii) * w2 + j];
                                for u in 0..kh {
                                    let y = (ii * stride + u) as isize - pad as isize;
                                    if y < 0 || y >= h as isize {
                                        continue;
                                    }
                                    for v in 0..kw {
                                        let xx = (j * stride + v) as isize - pad as isize;
                                        if xx < 0 || xx >= w as isize {
                                            continue;
                                        }
                                        gk[(ch * kh + u) * kw + v] +=
                                            go * xv[(ch * h + y as usize) * w + xx as usize];
                                    }
                                }
                            }
                        }
                    }
                });
            }
            &Op::ConvPw { x, kern } => {
                let (cin, h, w) = (
                    self.value(x).shape[0],
                    self.value(x).shape[1],
                    self.value(x).shape[2],
                );
                let cout = self.value(kern).shape[0];
                let hw = h * w;
                let xv = self.value(x).data.clone();
                let kv = self.value(kern).data.clone();
                // y = K @ X  =>  dX = K^T @ dY, dK = dY @ X^T
                self.accum(x, |_, gx| k::matmul_tn(&kv, g, cout, cin, hw, gx));
                self.accum(kern, |_, gk| k::matmul_nt(g, &xv, cout, hw, cin, gk));
            }
            &Op::Conv2d { x, kern, stride, pad } => {
                let (cin, h, w) = (
                    self.value(x).shape[0],
                    self.value(x).shape[1],
                    self.value(x).shape[2],
                );
                let (cout, kh, kw) = (
                    self.value(kern).shape[0],
                    self.value(kern).shape[2],
                    self.value(kern).shape[3],
                );
                let (h2, w2) = (
                    self.value(i_var(i)).shape[1],
                    self.value(i_var(i)).shape[2],
                );
                let xv = self.value(x).data.clone();
                let kv = self.value(kern).data.clone();
                self.accum(x, |_, gx| {
                    for o in 0..cout {
                        for ii in 0..h2 {
                            for j in 0..w2 {
                                let go = g[(o * h2 + ii) * w2 + j];
                                for ci in 0..cin {
                                    for u in 0..kh {
                                        let y = (ii * stride + u) as isize - pad as isize;
                                        if y < 0 || y >= h as isize {
                                            continue;
                                        }
                                        for v in 0..kw {
                                            let xx = (j * stride + v) as isize - pad as isize;
                                            if xx < 0 || xx >= w as isize {
                                                continue;
                                            }
                                            gx[(ci * h + y as usize) * w + xx as usize] += go
                                                * kv[((o * cin + ci) * kh + u) * kw + v];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.accum(kern, |_, gk| {
                    for o in 0..cout {
                        for ii in 0..h2 {
                            for j in 0..w2 {
                                let go = g[(o * h2 + ii) * w2 + j];
                                for ci in 0..cin {
                                    for u in 0..kh {
                                        let y = (ii * stride + u) as isize - pad as isize;
                                        if y < 0 || y >= h as isize {
                                            continue;
                                        }
                                        for v in 0..kw {
                                            let xx = (j * stride + v) as isize - pad as isize;
                                            if xx < 0 || xx >= w as isize {
                                                continue;
                                            }
                                            gk[((o * cin + ci) * kh + u) * kw + v] += go
                                                * xv[(ci * h + y as usize) * w + xx as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            &Op::AdaptiveAvgPool { x } => {
                let (c, h, w) = (
                    self.value(x).shape[0],
                    self.value(x).shape[1],
                    self.value(x).shape[2],
                );
                let (oh, ow) = (
                    self.value(i_var(i)).shape[1],
                    self.value(i_var(i)).shape[2],
                );
                self.accum(x, |_, gx| {
                    for ch in 0..c {
                        for ii in 0..oh {
                            let r0 = ii * h / oh;
                            let r1 = (ii + 1) * h / oh;
                            for j in 0..ow {
                                let c0 = j * w / ow;
                                let c1 = (j + 1) * w / ow;
                                let share =
                                    g[(ch * oh + ii) * ow + j] / ((r1 - r0) * (c1 - c0)) as f64;
                                for r in r0..r1 {
                                    for cc in c0..c1 {
                                        gx[(ch * h + r) * w + cc] += share;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let d = self.value(table).shape[1];
                self.accum(table, |_, gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[row * d + j];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, ignore_index, probs, count } => {
                let logits = *logits;
                let (targets, ignore_index, count) = (targets.clone(), *ignore_index, *count);
                let probs = probs.clone();
                let v = self.value(logits).shape[1];
                let scale = g[0] / count as f64;
                self.accum(logits, |_, gl| {
                    for (row, &t) in targets.iter().enumerate() {
                        if t == ignore_index {
                            continue;
                        }
                        for j in 0..v {
                            let ind = if j as i64 == t { 1.0 } else { 0.0 };
                            gl[row * v + j] += scale * (probs[row * v + j] - ind);
                        }
                    }
                });
            }
            &Op::SliceRows { a, start } => {
                let c = self.value(a).shape[1];
                let len = self.value(i_var(i)).shape[0];
                self.accum(a, |_, ga| {
                    for (d, s) in ga[start * c..(start + len) * c].iter_mut().zip(g) {
                        *d += s;
                    }
                });
            }
            &Op::SliceCols { a, start } => {
                let c = self.value(a).shape[1];
                let (r, len) = (self.value(i_var(i)).shape[0], self.value(i_var(i)).shape[1]);
                self.accum(a, |_, ga| {
                    for row in 0..r {
                        for j in 0..len {
                            ga[row * c + start + j] += g[row * len + j];
                        }
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let (r, c) = (self.value(p).shape[0], self.value(p).shape[1]);
                    let seg = g[off..off + r * c].to_vec();
                    self.accum(p, |_, gp| {
                        for (d, s) in gp.iter_mut().zip(&seg) {
                            *d += s;
                        }
                    });
                    off += r * c;
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let r = self.value(i_var(i)).shape[0];
                let cols = self.value(i_var(i)).shape[1];
                let mut off = 0;
                for p in parts {
                    let pc = self.value(p).shape[1];
                    let mut seg = vec![0.0; r * pc];
                    for row in 0..r {
                        seg[row * pc..(row + 1) * pc]
                            .copy_from_slice(&g[row * cols + off..row * cols + off + pc]);
                    }
                    self.accum(p, |_, gp| {
                        for (d, s) in gp.iter_mut().zip(&seg) {
                            *d += s;
                        }
                    });
                    off += pc;
                }
            }
            &Op::Sum { a } => {
                let s = g[0];
                self.accum(a, |_, ga| {
                    for d in ga.iter_mut() {
                        *d += s;
                    }
                });
            }
        }
    }
}

fn i_var(i: usize) -> Var {
    Var(i)
}
