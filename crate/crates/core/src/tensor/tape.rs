use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{matmul_a_bt, matmul_at_b, matmul_into, Tensor};

pub const BN_EPS: f64 = 1e-5;
const CE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Max,
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    value: Tensor,
    op: Op,
}

enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    AddRowBias {
        x: NodeId,
        bias: NodeId,
    },
    Relu {
        x: NodeId,
    },
    SoftmaxRows {
        x: NodeId,
    },
    Conv2d {
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
        cols: Vec<f64>,
        batch: usize,
        in_ch: usize,
        out_hw: (usize, usize),
        pad: usize,
        in_hw: (usize, usize),
    },
    Pool2d {
        x: NodeId,
        kind: PoolKind,
        argmax: Vec<usize>,
        in_shape: Vec<usize>,
    },
    BatchNormTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        var: Vec<f64>,
        xhat: Vec<f64>,
    },
    BatchNormInfer {
        x: NodeId,
        scale: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<f64>,
    },
    Reshape {
        x: NodeId,
    },
    CrossEntropy {
        probs: NodeId,
        labels: Vec<usize>,
    },
    WeightedSum {
        x: NodeId,
        weights: Vec<f64>,
    },
}

/// Ordered record of executed operations; replaying adjoints walks it in
/// exact reverse execution order, accumulating gradients additively.
pub struct GradTape {
    nodes: Vec<Node>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul: incompatible shapes {:?} x {:?}",
                sa, sb
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }))
    }

    /// `[n,f] + [f]`, broadcasting the bias over rows.
    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (sx, sb) = (self.value(x).shape(), self.value(bias).shape());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "add_row_bias: shapes {:?} + {:?}",
                sx, sb
            )));
        }
        let f = sx[1];
        let bd = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(f) {
            for (o, &b) in row.iter_mut().zip(&bd) {
                *o += b;
            }
        }
        let shape = sx.to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRowBias { x, bias }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu { x })
    }

    /// Row-wise softmax with max-subtraction. Accepts `[k]` or `[n,k]`.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let shape = self.value(x).shape().to_vec();
        let k = *shape.last().ok_or_else(|| {
            Error::Dimension("softmax: empty shape".into())
        })?;
        if shape.len() > 2 {
            return Err(Error::Dimension(format!(
                "softmax: expected rank 1 or 2, got {:?}",
                shape
            )));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::SoftmaxRows { x }))
    }

    /// 3x3 cross-correlation over `[N,C,H,W]` (or `[C,H,W]`, treated as N=1).
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernels: NodeId,
        bias: NodeId,
        padding: Padding,
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let rank3 = xs.len() == 3;
        let (batch, in_ch, h, w) = match xs.len() {
            3 => (1, xs[0], xs[1], xs[2]),
            4 => (xs[0], xs[1], xs[2], xs[3]),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv2d: expected [C,H,W] or [N,C,H,W], got {:?}",
                    xs
                )))
            }
        };
        let ks = self.value(kernels).shape().to_vec();
        if ks.len() != 4 || ks[1] != in_ch || ks[2] != 3 || ks[3] != 3 {
            return Err(Error::Dimension(format!(
                "conv2d: kernels {:?} incompatible with input {:?} (want [C_out,{},3,3])",
                ks, xs, in_ch
            )));
        }
        let out_ch = ks[0];
        if self.value(bias).shape() != [out_ch] {
            return Err(Error::Dimension(format!(
                "conv2d: bias shape {:?}, want [{}]",
                self.value(bias).shape(),
                out_ch
            )));
        }
        let pad = match padding {
            Padding::Same => 1,
            Padding::Valid => 0,
        };
        if padding == Padding::Valid && (h < 3 || w < 3) {
            return Err(Error::Dimension(format!(
                "conv2d: input {}x{} smaller than 3x3 kernel under valid padding",
                h, w
            )));
        }
        let (oh, ow) = (h + 2 * pad - 2, w + 2 * pad - 2);
        let kdim = in_ch * 9;
        let ohw = oh * ow;
        let mut cols = vec![0.0; batch * kdim * ohw];
        let xd = self.value(x).data();
        for n in 0..batch {
            let xoff = n * in_ch * h * w;
            let coff = n * kdim * ohw;
            for c in 0..in_ch {
                let plane = &xd[xoff + c * h * w..xoff + (c + 1) * h * w];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let r = c * 9 + dy * 3 + dx;
                        let crow = &mut cols[coff + r * ohw..coff + (r + 1) * ohw];
                        for oy in 0..oh {
                            let iy = (oy + dy) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = (ox + dx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                crow[oy * ow + ox] = plane[iy as usize * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        let kd = self.value(kernels).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; batch * out_ch * ohw];
        for n in 0..batch {
            let c = &cols[n * kdim * ohw..(n + 1) * kdim * ohw];
            let o = &mut out[n * out_ch * ohw..(n + 1) * out_ch * ohw];
            matmul_into(kd, c, out_ch, kdim, ohw, o);
            for co in 0..out_ch {
                let b = bd[co];
                for v in &mut o[co * ohw..(co + 1) * ohw] {
                    *v += b;
                }
            }
        }
        let shape = if rank3 {
            vec![out_ch, oh, ow]
        } else {
            vec![batch, out_ch, oh, ow]
        };
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                x,
                kernels,
                bias,
                cols,
                batch,
                in_ch,
                out_hw: (oh, ow),
                pad,
                in_hw: (h, w),
            },
        ))
    }

    /// 2x2 pooling with stride 2; odd trailing rows/columns are truncated.
    pub fn pool2d(&mut self, x: NodeId, kind: PoolKind) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let (batch, ch, h, w) = match xs.len() {
            3 => (1, xs[0], xs[1], xs[2]),
            4 => (xs[0], xs[1], xs[2], xs[3]),
            _ => {
                return Err(Error::Dimension(format!(
                    "pool2d: expected [C,H,W] or [N,C,H,W], got {:?}",
                    xs
                )))
            }
        };
        if h < 2 || w < 2 {
            return Err(Error::Dimension(format!(
                "pool2d: spatial dims {}x{} smaller than 2x2 window",
                h, w
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let planes = batch * ch;
        let mut out = vec![0.0; planes * oh * ow];
        let mut argmax = vec![0usize; if kind == PoolKind::Max { planes * oh * ow } else { 0 }];
        let xd = self.value(x).data();
        for p in 0..planes {
            let plane = &xd[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let oidx = p * oh * ow + oy * ow + ox;
                    let base = (oy * 2) * w + ox * 2;
                    let idxs = [base, base + 1, base + w, base + w + 1];
                    match kind {
                        PoolKind::Max => {
                            let mut best = idxs[0];
                            for &i in &idxs[1..] {
                                if plane[i] > plane[best] {
                                    best = i;
                                }
                            }
                            out[oidx] = plane[best];
                            argmax[oidx] = p * h * w + best;
                        }
                        PoolKind::Average => {
                            out[oidx] =
                                (plane[idxs[0]] + plane[idxs[1]] + plane[idxs[2]] + plane[idxs[3]])
                                    / 4.0;
                        }
                    }
                }
            }
        }
        let shape = match xs.len() {
            3 => vec![ch, oh, ow],
            _ => vec![batch, ch, oh, ow],
        };
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Pool2d {
                x,
                kind,
                argmax,
                in_shape: xs,
            },
        ))
    }

    /// Train-mode batch normalization over `[n,f]` columns. Returns the output
    /// node together with the batch mean and (population) variance per column,
    /// so callers can update running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>)> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Dimension(format!(
                "batchnorm: expected [n,f], got {:?}",
                xs
            )));
        }
        let (n, f) = (xs[0], xs[1]);
        if n < 2 {
            return Err(Error::Contract(
                "batchnorm in train mode requires batch size >= 2".into(),
            ));
        }
        if self.value(gamma).shape() != [f] || self.value(beta).shape() != [f] {
            return Err(Error::Dimension(format!(
                "batchnorm: scale/shift must have shape [{}]",
                f
            )));
        }
        let xd = self.value(x).data();
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for row in xd.chunks(f) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        for row in xd.chunks(f) {
            for j in 0..f {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        for v in var.iter_mut() {
            *v /= n as f64;
        }
        let mut xhat = vec![0.0; n * f];
        for (i, row) in xd.chunks(f).enumerate() {
            for j in 0..f {
                xhat[i * f + j] = (row[j] - mean[j]) / (var[j] + BN_EPS).sqrt();
            }
        }
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            for j in 0..f {
                out[i * f + j] = gd[j] * xhat[i * f + j] + bd[j];
            }
        }
        let id = self.push(
            Tensor::new(xs, out)?,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                var: var.clone(),
                xhat,
            },
        );
        Ok((id, mean, var))
    }

    /// Inference-mode batch normalization using fixed running statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: NodeId,
        gamma: &[f64],
        beta: &[f64],
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 2 || xs[1] != gamma.len() {
            return Err(Error::Dimension(format!(
                "batchnorm_infer: input {:?} vs {} features",
                xs,
                gamma.len()
            )));
        }
        let f = xs[1];
        let scale: Vec<f64> = (0..f)
            .map(|j| gamma[j] / (running_var[j] + BN_EPS).sqrt())
            .collect();
        let shift: Vec<f64> = (0..f)
            .map(|j| beta[j] - running_mean[j] * scale[j])
            .collect();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(f) {
            for j in 0..f {
                row[j] = row[j] * scale[j] + shift[j];
            }
        }
        Ok(self.push(
            Tensor::new(xs, out)?,
            Op::BatchNormInfer { x, scale },
        ))
    }

    /// Inverted dropout with an explicit precomputed mask
    /// (entries 0 or 1/(1-rate)).
    pub fn dropout_masked(&mut self, x: NodeId, mask: Vec<f64>) -> Result<NodeId> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "dropout: mask length {} vs input {}",
                mask.len(),
                self.value(x).len()
            )));
        }
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        Ok(self.push(out, Op::Dropout { x, mask }))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Mean of -log(prob of true class) over the batch, clamped at 1e-12.
    pub fn cross_entropy(&mut self, probs: NodeId, labels: &[usize]) -> Result<NodeId> {
        let ps = self.value(probs).shape().to_vec();
        if ps.len() != 2 {
            return Err(Error::Dimension(format!(
                "cross_entropy: expected [n,k] probs, got {:?}",
                ps
            )));
        }
        let (n, k) = (ps[0], ps[1]);
        if labels.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} rows vs {} labels",
                n,
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!(
                "cross_entropy: label {} outside 0..{}",
                bad, k
            )));
        }
        let pd = self.value(probs).data();
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            loss -= pd[i * k + l].max(CE_CLAMP).ln();
        }
        loss /= n as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Scalar dot(weights, x); test harness hook for gradient checks.
    pub fn weighted_sum(&mut self, x: NodeId, weights: &[f64]) -> Result<NodeId> {
        if weights.len() != self.value(x).len() {
            return Err(Error::Dimension(format!(
                "weighted_sum: {} weights vs {} elements",
                weights.len(),
                self.value(x).len()
            )));
        }
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights)
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar root; gradients accumulate additively.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(
                "backward requires a scalar root node".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, contrib: Tensor) {
        match &mut grads[id.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.value(*a).shape(), self.value(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let mut da = vec![0.0; m * k];
                matmul_a_bt(gd, self.value(*b).data(), m, n, k, &mut da);
                let mut db = vec![0.0; k * n];
                matmul_at_b(self.value(*a).data(), gd, m, k, n, &mut db);
                self.accumulate(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                self.accumulate(grads, *b, Tensor::new(vec![k, n], db).unwrap());
            }
            Op::AddRowBias { x, bias } => {
                let f = self.value(*bias).len();
                let mut db = vec![0.0; f];
                for row in gd.chunks(f) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, g.clone());
                self.accumulate(grads, *bias, Tensor::new(vec![f], db).unwrap());
            }
            Op::Relu { x } => {
                let xd = self.value(*x).data();
                let mut dx = gd.to_vec();
                for (d, &v) in dx.iter_mut().zip(xd) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap(),
                );
            }
            Op::SoftmaxRows { x } => {
                let k = *self.nodes[idx].value.shape().last().unwrap();
                let pd = self.nodes[idx].value.data();
                let mut dx = vec![0.0; pd.len()];
                for r in 0..pd.len() / k {
                    let p = &pd[r * k..(r + 1) * k];
                    let go = &gd[r * k..(r + 1) * k];
                    let dot: f64 = p.iter().zip(go).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dx[r * k + j] = p[j] * (go[j] - dot);
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap(),
                );
            }
            Op::Conv2d {
                x,
                kernels,
                bias,
                cols,
                batch,
                in_ch,
                out_hw,
                pad,
                in_hw,
            } => {
                let ks = self.value(*kernels).shape();
                let out_ch = ks[0];
                let kdim = in_ch * 9;
                let (oh, ow) = *out_hw;
                let (h, w) = *in_hw;
                let ohw = oh * ow;
                let mut dk = vec![0.0; out_ch * kdim];
                let mut db = vec![0.0; out_ch];
                let mut dx = vec![0.0; batch * in_ch * h * w];
                let kd = self.value(*kernels).data();
                for n in 0..*batch {
                    let go = &gd[n * out_ch * ohw..(n + 1) * out_ch * ohw];
                    let c = &cols[n * kdim * ohw..(n + 1) * kdim * ohw];
                    // dK += gO · colsᵀ
                    matmul_a_bt(go, c, out_ch, ohw, kdim, &mut dk);
                    for co in 0..out_ch {
                        db[co] += go[co * ohw..(co + 1) * ohw].iter().sum::<f64>();
                    }
                    // dcols = Kᵀ · gO, then scatter back (col2im).
                    let mut dcols = vec![0.0; kdim * ohw];
                    matmul_at_b(kd, go, out_ch, kdim, ohw, &mut dcols);
                    let dxn = &mut dx[n * in_ch * h * w..(n + 1) * in_ch * h * w];
                    for ci in 0..*in_ch {
                        for dy in 0..3 {
                            for dxk in 0..3 {
                                let r = ci * 9 + dy * 3 + dxk;
                                let drow = &dcols[r * ohw..(r + 1) * ohw];
                                for oy in 0..oh {
                                    let iy = (oy + dy) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for ox in 0..ow {
                                        let ix = (ox + dxk) as isize - *pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        dxn[ci * h * w + iy as usize * w + ix as usize] +=
                                            drow[oy * ow + ox];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap(),
                );
                self.accumulate(
                    grads,
                    *kernels,
                    Tensor::new(ks.to_vec(), dk).unwrap(),
                );
                self.accumulate(grads, *bias, Tensor::new(vec![out_ch], db).unwrap());
            }
            Op::Pool2d {
                x,
                kind,
                argmax,
                in_shape,
            } => {
                let total_in: usize = in_shape.iter().product();
                let mut dx = vec![0.0; total_in];
                match kind {
                    PoolKind::Max => {
                        for (o, &src) in argmax.iter().enumerate() {
                            dx[src] += gd[o];
                        }
                    }
                    PoolKind::Average => {
                        let (h, w) = (in_shape[in_shape.len() - 2], in_shape[in_shape.len() - 1]);
                        let (oh, ow) = (h / 2, w / 2);
                        let planes = total_in / (h * w);
                        for p in 0..planes {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = gd[p * oh * ow + oy * ow + ox] / 4.0;
                                    let base = p * h * w + (oy * 2) * w + ox * 2;
                                    dx[base] += gv;
                                    dx[base + 1] += gv;
                                    dx[base + w] += gv;
                                    dx[base + w + 1] += gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(in_shape.clone(), dx).unwrap());
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                var,
                xhat,
            } => {
                let f = var.len();
                let n = xhat.len() / f;
                let gamma_d = self.value(*gamma).data();
                let mut dgamma = vec![0.0; f];
                let mut dbeta = vec![0.0; f];
                let mut sum_dxhat = vec![0.0; f];
                let mut sum_dxhat_xhat = vec![0.0; f];
                for i in 0..n {
                    for j in 0..f {
                        let go = gd[i * f + j];
                        dgamma[j] += go * xhat[i * f + j];
                        dbeta[j] += go;
                        let dxh = go * gamma_d[j];
                        sum_dxhat[j] += dxh;
                        sum_dxhat_xhat[j] += dxh * xhat[i * f + j];
                    }
                }
                let mut dx = vec![0.0; n * f];
                for i in 0..n {
                    for j in 0..f {
                        let dxh = gd[i * f + j] * gamma_d[j];
                        dx[i * f + j] = (dxh * n as f64
                            - sum_dxhat[j]
                            - xhat[i * f + j] * sum_dxhat_xhat[j])
                            / (n as f64 * (var[j] + BN_EPS).sqrt());
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![n, f], dx).unwrap());
                self.accumulate(grads, *gamma, Tensor::new(vec![f], dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::new(vec![f], dbeta).unwrap());
            }
            Op::BatchNormInfer { x, scale } => {
                let f = scale.len();
                let mut dx = gd.to_vec();
                for row in dx.chunks_mut(f) {
                    for (d, &s) in row.iter_mut().zip(scale) {
                        *d *= s;
                    }
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap(),
                );
            }
            Op::Dropout { x, mask } => {
                let mut dx = gd.to_vec();
                for (d, &m) in dx.iter_mut().zip(mask) {
                    *d *= m;
                }
                self.accumulate(
                    grads,
                    *x,
                    Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap(),
                );
            }
            Op::Reshape { x } => {
                let dx = Tensor::new(self.value(*x).shape().to_vec(), gd.to_vec()).unwrap();
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropy { probs, labels } => {
                let ps = self.value(*probs).shape();
                let (n, k) = (ps[0], ps[1]);
                let pd = self.value(*probs).data();
                let mut dp = vec![0.0; n * k];
                let scale = gd[0] / n as f64;
                for (i, &l) in labels.iter().enumerate() {
                    let p = pd[i * k + l];
                    if p > CE_CLAMP {
                        dp[i * k + l] = -scale / p;
                    }
                }
                self.accumulate(grads, *probs, Tensor::new(vec![n, k], dp).unwrap());
            }
            Op::WeightedSum { x, weights } => {
                let dx: Vec<f64> = weights.iter().map(|w| w * gd[0]).collect();
                self.accumulate(
                    grads,
                    *x,
                    Tensor::new(self.value(*x).shape().to_vec(), dx).unwrap(),
                );
            }
        }
    }
}

/// Adjoints produced by [`GradTape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

/// Inverted-dropout mask: each entry 0 with probability `rate`, else
/// 1/(1-rate).
pub fn dropout_mask<R: Rng>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
    if rate == 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect()
}
