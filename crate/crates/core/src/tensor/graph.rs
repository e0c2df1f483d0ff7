use super::kernels::{self, Conv2dGeometry};
use super::{ConvKernel, Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, used to update running estimates.
    pub var_unbiased: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geo: Conv2dGeometry },
    Dense { x: Var, w: Var, b: Option<Var> },
    Relu(Var),
    MaxPool2d { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Affine2d { x: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    Softmax(Var),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<f64>, probs: Vec<f64> },
    CrossEntropy { probs: Var, targets: Vec<f64> },
    Triplet { emb: Var, triples: Vec<(usize, usize, usize)>, margin: f64 },
    L2Normalize { x: Var, norms: Vec<f64> },
    Concat(Vec<Var>),
    MeanLastAxis(Var),
    Dropout { x: Var, mask: Vec<f64> },
}

struct Node<F: Element> {
    value: Tensor<F>,
    op: Op,
}

/// Records a forward computation for one pass and replays it in reverse.
///
/// Leaves keep their `requires_grad` flag; every other node requires a
/// gradient iff one of its inputs does.
pub struct Graph<F: Element = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Element> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

const BN_EPS: f64 = 1e-5;
const CE_EPS: f64 = 1e-12;
const NORM_EPS: f64 = 1e-12;

impl<F: Element> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad()
    }

    /// Clone of the node's value, without gradient.
    pub fn take(&self, v: Var) -> Tensor<F> {
        let mut t = self.nodes[v.0].value.clone();
        t.grad = None;
        t.requires_grad = false;
        t
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.requires(v));
        let value = Tensor { shape, data, grad: None, requires_grad: rg };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| F::from_f64(f(x.to_f64(), y.to_f64())))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a, b])
    }

    fn unary_map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(a).iter().map(|&x| F::from_f64(f(x.to_f64()))).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary_map(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary_map(a, Op::Square(a), |x| x * x)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary_map(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().map(|v| v.to_f64()).sum();
        self.push(vec![1], vec![F::from_f64(s)], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s: f64 = d.iter().map(|v| v.to_f64()).sum::<f64>() / d.len() as f64;
        self.push(vec![1], vec![F::from_f64(s)], Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.value(a).numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape(a))));
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape, data, Op::Reshape(a), &[a]))
    }

    /// Cross-correlation of NCHW `x` with OIHW `w`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dim(format!("conv2d expects NCHW input and OIHW weight, got {xs:?} and {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::dim(format!(
                "conv2d input channels {} (input {xs:?}) != weight C_in {} (weight {ws:?})",
                xs[1], ws[1]
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        if xs[2] + 2 * padding.0 < ws[2] || xs[3] + 2 * padding.1 < ws[3] {
            return Err(Error::dim(format!(
                "conv2d padded input {xs:?} (padding {padding:?}) smaller than kernel {ws:?}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::dim(format!("conv2d bias {:?} vs weight {ws:?}", self.shape(b))));
            }
        }
        let geo = Conv2dGeometry {
            batch: xs[0],
            in_channels: xs[1],
            out_channels: ws[0],
            in_h: xs[2],
            in_w: xs[3],
            k_h: ws[2],
            k_w: ws[3],
            stride,
            padding,
        };
        let out = kernels::conv2d_forward(&geo, self.data(x), self.data(w), b.map(|b| self.data(b)));
        let shape = vec![xs[0], ws[0], geo.out_h(), geo.out_w()];
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(shape, out, Op::Conv2d { x, w, b, geo }, &inputs))
    }

    /// Convolution with kernel tensors copied in as constants.
    pub fn conv2d_kernel(&mut self, x: Var, kernel: &ConvKernel<F>) -> Result<Var> {
        let w = self.leaf(kernel.weight.clone());
        let b = kernel.bias.clone().map(|b| self.leaf(b));
        self.conv2d(x, w, b, kernel.stride, kernel.padding)
    }

    /// `(k,1)` stage followed directly by the `(1,k)` stage.
    pub fn conv2d_factorized(
        &mut self,
        x: Var,
        vertical: &ConvKernel<F>,
        horizontal: &ConvKernel<F>,
    ) -> Result<Var> {
        if vertical.out_channels() != horizontal.in_channels() {
            return Err(Error::dim(format!(
                "factorized stages disagree: vertical weight {:?} outputs {} channels, horizontal weight {:?} expects {}",
                vertical.weight.shape(),
                vertical.out_channels(),
                horizontal.weight.shape(),
                horizontal.in_channels()
            )));
        }
        let mid = self.conv2d_kernel(x, vertical)?;
        self.conv2d_kernel(mid, horizontal)
    }

    /// `x [N, in] · wᵀ + b` with `w [out, in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::dim(format!("dense: input {xs:?} incompatible with weight {ws:?}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::dim(format!("dense: bias {:?} vs weight {ws:?}", self.shape(b))));
            }
        }
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = b.map(|b| self.data(b));
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            let row = &xd[r * k..][..k];
            for o in 0..m {
                let wrow = &wd[o * k..][..k];
                let mut s = bd.map_or(0.0, |b| b[o].to_f64());
                for (a, c) in row.iter().zip(wrow) {
                    s += a.to_f64() * c.to_f64();
                }
                out.push(F::from_f64(s));
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(vec![n, m], out, Op::Dense { x, w, b }, &inputs))
    }

    pub fn maxpool2d(&mut self, x: Var, pool: (usize, usize)) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || pool.0 == 0 || pool.1 == 0 || xs[2] < pool.0 || xs[3] < pool.1 {
            return Err(Error::dim(format!("maxpool2d {pool:?} on input {xs:?}")));
        }
        let (out, argmax) = kernels::maxpool2d_forward(&xs, self.data(x), pool);
        let shape = vec![xs[0], xs[1], xs[2] / pool.0, xs[3] / pool.1];
        Ok(self.push(shape, out, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// Training-mode batch norm over (N, H, W) per channel.
    pub fn batchnorm2d_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let xs = self.check_bn(x, gamma, beta)?;
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let (mean, var) = kernels::channel_moments(&xs, self.data(x));
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let count = (n * hw) as f64;
        let var_unbiased = var
            .iter()
            .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
            .collect();
        let xd = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for b in 0..n {
            for ch in 0..c {
                let (gm, bb) = (g[ch].to_f64(), bt[ch].to_f64());
                for &v in &xd[(b * c + ch) * hw..][..hw] {
                    let h = (v.to_f64() - mean[ch]) * inv_std[ch];
                    xhat.push(h);
                    out.push(F::from_f64(gm * h + bb));
                }
            }
        }
        let stats = BatchStats { mean, var_unbiased };
        let v = self.push(xs, out, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]);
        Ok((v, stats))
    }

    /// Eval-mode batch norm: a fixed per-channel affine map from running
    /// statistics.
    pub fn batchnorm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[F],
        running_var: &[F],
    ) -> Result<Var> {
        let xs = self.check_bn(x, gamma, beta)?;
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim(format!(
                "batchnorm running stats have {} / {} channels, input {xs:?}",
                running_mean.len(),
                running_var.len()
            )));
        }
        let mean: Vec<f64> = running_mean.iter().map(|v| v.to_f64()).collect();
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v.to_f64() + BN_EPS).sqrt()).collect();
        let xd = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut out = Vec::with_capacity(xd.len());
        for b in 0..n {
            for ch in 0..c {
                let (gm, bb) = (g[ch].to_f64(), bt[ch].to_f64());
                for &v in &xd[(b * c + ch) * hw..][..hw] {
                    out.push(F::from_f64(gm * (v.to_f64() - mean[ch]) * inv_std[ch] + bb));
                }
            }
        }
        Ok(self.push(xs, out, Op::Affine2d { x, gamma, beta, mean, inv_std }, &[x, gamma, beta]))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<Vec<usize>> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(Error::dim(format!(
                "batchnorm2d input {xs:?} with gamma {:?} / beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        Ok(xs)
    }

    fn rows(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(format!("{what} expects a 2-D [rows, classes] tensor, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Row-wise softmax along the last axis of a 2-D tensor.
    pub fn softmax(&mut self, z: Var) -> Result<Var> {
        let (n, c) = self.rows(z, "softmax")?;
        let probs = softmax_rows(self.data(z), n, c);
        let shape = self.shape(z).to_vec();
        Ok(self.push(shape, probs.into_iter().map(F::from_f64).collect(), Op::Softmax(z), &[z]))
    }

    /// Mean over rows of `-Σ t·log(max(p, 1e-12))` for probability rows `p`.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[f64]) -> Result<Var> {
        let (n, c) = self.rows(probs, "cross_entropy")?;
        if targets.len() != n * c {
            return Err(Error::dim(format!("cross_entropy targets have {} values for [{n}, {c}]", targets.len())));
        }
        let p = self.data(probs);
        let mut s = 0.0;
        for (pv, &t) in p.iter().zip(targets) {
            if t != 0.0 {
                s -= t * pv.to_f64().max(CE_EPS).ln();
            }
        }
        let loss = F::from_f64(s / n as f64);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { probs, targets: targets.to_vec() }, &[probs]))
    }

    /// Cross-entropy of `softmax(logits)` against (possibly soft) targets,
    /// computed with log-sum-exp.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let (n, c) = self.rows(logits, "softmax_cross_entropy")?;
        if targets.len() != n * c {
            return Err(Error::dim(format!(
                "softmax_cross_entropy targets have {} values for [{n}, {c}]",
                targets.len()
            )));
        }
        let z = self.data(logits);
        let mut s = 0.0;
        for r in 0..n {
            let row = &z[r * c..][..c];
            let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln();
            for (v, &t) in row.iter().zip(&targets[r * c..][..c]) {
                if t != 0.0 {
                    s -= t * (v.to_f64() - lse);
                }
            }
        }
        let probs = softmax_rows(z, n, c);
        let loss = F::from_f64(s / n as f64);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    /// Mean over `(anchor, positive, negative)` row triples of
    /// `max(‖a−p‖² − ‖a−n‖² + margin, 0)`. An empty triple list gives 0.
    pub fn triplet(&mut self, emb: Var, triples: &[(usize, usize, usize)], margin: f64) -> Result<Var> {
        let (n, d) = self.rows(emb, "triplet")?;
        if let Some(bad) = triples.iter().find(|t| t.0 >= n || t.1 >= n || t.2 >= n) {
            return Err(Error::dim(format!("triplet {bad:?} indexes past {n} embedding rows")));
        }
        let e = self.data(emb);
        let mut total = 0.0;
        for &(a, p, q) in triples {
            let h = sqdist(e, a, p, d) - sqdist(e, a, q, d) + margin;
            if h > 0.0 {
                total += h;
            }
        }
        let loss = if triples.is_empty() { 0.0 } else { total / triples.len() as f64 };
        Ok(self.push(
            vec![1],
            vec![F::from_f64(loss)],
            Op::Triplet { emb, triples: triples.to_vec(), margin },
            &[emb],
        ))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.rows(x, "l2_normalize_rows")?;
        let xd = self.data(x);
        let mut norms = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for r in 0..n {
            let row = &xd[r * d..][..d];
            let norm = row.iter().map(|v| v.to_f64().powi(2)).sum::<f64>().sqrt().max(NORM_EPS);
            norms.push(norm);
            out.extend(row.iter().map(|v| F::from_f64(v.to_f64() / norm)));
        }
        let shape = vec![n, d];
        Ok(self.push(shape, out, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Concatenate 2-D tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let (n, _) = self.rows(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pn, pd) = self.rows(p, "concat_cols")?;
            if pn != n {
                return Err(Error::dim(format!(
                    "concat_cols row mismatch: {:?} vs {:?}",
                    self.shape(first),
                    self.shape(p)
                )));
            }
            widths.push(pd);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..][..w]);
            }
        }
        Ok(self.push(vec![n, total], out, Op::Concat(parts.to_vec()), parts))
    }

    /// Average over the last axis, dropping it.
    pub fn mean_last_axis(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim(format!("mean_last_axis on {xs:?}")));
        }
        let w = *xs.last().unwrap();
        let out = self
            .data(x)
            .chunks(w)
            .map(|c| F::from_f64(c.iter().map(|v| v.to_f64()).sum::<f64>() / w as f64))
            .collect();
        Ok(self.push(xs[..xs.len() - 1].to_vec(), out, Op::MeanLastAxis(x), &[x]))
    }

    /// Multiply by a fixed mask (entries 0 or `1/(1-p)`).
    pub fn dropout(&mut self, x: Var, keep: &[bool], p: f64) -> Result<Var> {
        if keep.len() != self.value(x).numel() {
            return Err(Error::dim(format!("dropout mask of {} for {:?}", keep.len(), self.shape(x))));
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { scale } else { 0.0 }).collect();
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| F::from_f64(v.to_f64() * m)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x, mask }, &[x]))
    }

    /// Reverse pass from a one-element `loss`. Gradients accumulate into
    /// every `requires_grad` node across repeated calls; nodes off the path
    /// end up with an all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward() needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            let gf: Vec<F> = g.iter().map(|&v| F::from_f64(v)).collect();
            self.nodes[idx].value.accumulate_grad(&gf);
        }
        for node in &mut self.nodes {
            if node.value.requires_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![F::default(); node.value.numel()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let send = |v: Var, contrib: Vec<f64>, grads: &mut [Option<Vec<f64>>]| {
            if !self.requires(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, c)| *b += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let f = |v: Var| -> Vec<f64> { self.data(v).iter().map(|x| x.to_f64()).collect() };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec(), grads);
                send(*b, g.to_vec(), grads);
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec(), grads);
                send(*b, g.iter().map(|v| -v).collect(), grads);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (f(*a), f(*b));
                send(*a, g.iter().zip(&bv).map(|(g, y)| g * y).collect(), grads);
                send(*b, g.iter().zip(&av).map(|(g, x)| g * x).collect(), grads);
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|v| v * c).collect(), grads),
            Op::Square(a) => {
                let av = f(*a);
                send(*a, g.iter().zip(&av).map(|(g, x)| 2.0 * g * x).collect(), grads);
            }
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()], grads),
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                send(*a, vec![g[0] / n as f64; n], grads);
            }
            Op::Reshape(a) => send(*a, g.to_vec(), grads),
            Op::Relu(a) => {
                let av = self.data(*a);
                send(*a, g.iter().zip(av).map(|(g, x)| if x.to_f64() > 0.0 { *g } else { 0.0 }).collect(), grads);
            }
            Op::Conv2d { x, w, b, geo } => {
                let need = (self.requires(*x), self.requires(*w), b.is_some_and(|b| self.requires(b)));
                // Upstream gradients stay f64, so the kernel runs on an f64 view.
                let grads_k = kernels::conv2d_backward::<f64>(geo, &f(*x), &f(*w), g, need);
                if let Some(gi) = grads_k.input {
                    send(*x, gi, grads);
                }
                if let Some(gw) = grads_k.weight {
                    send(*w, gw, grads);
                }
                if let (Some(b), Some(gb)) = (b, grads_k.bias) {
                    send(*b, gb, grads);
                }
            }
            Op::Dense { x, w, b } => {
                let xs = self.shape(*x);
                let (n, k) = (xs[0], xs[1]);
                let m = self.shape(*w)[0];
                let (xv, wv) = (f(*x), f(*w));
                if self.requires(*x) {
                    let mut gx = vec![0.0; n * k];
                    for r in 0..n {
                        for o in 0..m {
                            let go = g[r * m + o];
                            for (gxv, wvv) in gx[r * k..][..k].iter_mut().zip(&wv[o * k..][..k]) {
                                *gxv += go * wvv;
                            }
                        }
                    }
                    send(*x, gx, grads);
                }
                if self.requires(*w) {
                    let mut gw = vec![0.0; m * k];
                    for r in 0..n {
                        for o in 0..m {
                            let go = g[r * m + o];
                            for (gwv, xvv) in gw[o * k..][..k].iter_mut().zip(&xv[r * k..][..k]) {
                                *gwv += go * xvv;
                            }
                        }
                    }
                    send(*w, gw, grads);
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; m];
                    for r in 0..n {
                        for o in 0..m {
                            gb[o] += g[r * m + o];
                        }
                    }
                    send(*b, gb, grads);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (gv, &j) in g.iter().zip(argmax) {
                    gx[j] += gv;
                }
                send(*x, gx, grads);
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let xs = self.shape(*x);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let gm = f(*gamma);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for j in base..base + hw {
                            sum_g[ch] += g[j];
                            sum_gx[ch] += g[j] * xhat[j];
                        }
                    }
                }
                if self.requires(*x) {
                    let m = (n * hw) as f64;
                    let mut gx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let k = gm[ch] * inv_std[ch] / m;
                            for j in base..base + hw {
                                gx[j] = k * (m * g[j] - sum_g[ch] - xhat[j] * sum_gx[ch]);
                            }
                        }
                    }
                    send(*x, gx, grads);
                }
                send(*gamma, sum_gx, grads);
                send(*beta, sum_g, grads);
            }
            Op::Affine2d { x, gamma, beta, mean, inv_std } => {
                let xs = self.shape(*x);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let gm = f(*gamma);
                let xv = f(*x);
                let mut gx = vec![0.0; g.len()];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for j in base..base + hw {
                            gx[j] = g[j] * gm[ch] * inv_std[ch];
                            ggamma[ch] += g[j] * (xv[j] - mean[ch]) * inv_std[ch];
                            gbeta[ch] += g[j];
                        }
                    }
                }
                send(*x, gx, grads);
                send(*gamma, ggamma, grads);
                send(*beta, gbeta, grads);
            }
            Op::Softmax(z) => {
                let c = self.shape(*z)[1];
                let y: Vec<f64> = node.value.data().iter().map(|v| v.to_f64()).collect();
                let mut gz = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(gz.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                send(*z, gz, grads);
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                let (n, c) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                let scale = g[0] / n as f64;
                let mut gz = vec![0.0; n * c];
                for r in 0..n {
                    let t = &targets[r * c..][..c];
                    let tsum: f64 = t.iter().sum();
                    for j in 0..c {
                        gz[r * c + j] = scale * (probs[r * c + j] * tsum - t[j]);
                    }
                }
                send(*logits, gz, grads);
            }
            Op::CrossEntropy { probs, targets } => {
                let n = self.shape(*probs)[0];
                let p = self.data(*probs);
                let scale = g[0] / n as f64;
                let gp = p
                    .iter()
                    .zip(targets)
                    .map(|(pv, &t)| {
                        let pv = pv.to_f64();
                        if t != 0.0 && pv > CE_EPS {
                            -scale * t / pv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                send(*probs, gp, grads);
            }
            Op::Triplet { emb, triples, margin } => {
                let d = self.shape(*emb)[1];
                let e = f(*emb);
                let mut ge = vec![0.0; e.len()];
                if !triples.is_empty() {
                    let scale = g[0] / triples.len() as f64;
                    for &(a, p, q) in triples {
                        let h = sqdist(self.data(*emb), a, p, d) - sqdist(self.data(*emb), a, q, d) + margin;
                        if h <= 0.0 {
                            continue;
                        }
                        for j in 0..d {
                            let (av, pv, qv) = (e[a * d + j], e[p * d + j], e[q * d + j]);
                            ge[a * d + j] += scale * 2.0 * (qv - pv);
                            ge[p * d + j] += scale * -2.0 * (av - pv);
                            ge[q * d + j] += scale * 2.0 * (av - qv);
                        }
                    }
                }
                send(*emb, ge, grads);
            }
            Op::L2Normalize { x, norms } => {
                let d = self.shape(*x)[1];
                let y: Vec<f64> = node.value.data().iter().map(|v| v.to_f64()).collect();
                let mut gx = vec![0.0; y.len()];
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * d..][..d];
                    let gr = &g[r * d..][..d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                send(*x, gx, grads);
            }
            Op::Concat(parts) => {
                let n = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    let mut gp = Vec::with_capacity(n * w);
                    for r in 0..n {
                        gp.extend_from_slice(&g[r * total + offset..][..w]);
                    }
                    send(p, gp, grads);
                    offset += w;
                }
            }
            Op::MeanLastAxis(x) => {
                let w = *self.shape(*x).last().unwrap();
                let gx = g.iter().flat_map(|&v| std::iter::repeat_n(v / w as f64, w)).collect();
                send(*x, gx, grads);
            }
            Op::Dropout { x, mask } => {
                send(*x, g.iter().zip(mask).map(|(a, b)| a * b).collect(), grads);
            }
        }
    }
}

fn softmax_rows<F: Element>(z: &[F], n: usize, c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * c);
    for r in 0..n {
        let row = &z[r * c..][..c];
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
        let s: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / s));
    }
    out
}

fn sqdist<F: Element>(e: &[F], i: usize, j: usize, d: usize) -> f64 {
    e[i * d..][..d]
        .iter()
        .zip(&e[j * d..][..d])
        .map(|(a, b)| {
            let t = a.to_f64() - b.to_f64();
            t * t
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_unit_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_f64(vec![2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn square_sum_gradient_at_three() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::scalar(3.0));
        let sq = g.square(w);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::scalar(3.0));
        let sq = g.square(w);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[12.0]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[6.0]);
    }

    #[test]
    fn off_path_grad_is_zero() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::scalar(3.0));
        let unused = g.param(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        let s = g.sum(w);
        g.backward(s).unwrap();
        assert_eq!(g.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
        let r = g.relu(w);
        assert!(matches!(g.backward(r), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![2], vec![-2.5, 3.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1000.0, 0.0]).unwrap());
        let p = g.softmax(z).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5, 1.0, 0.0]);
    }

    #[test]
    fn softmax_rejects_non_matrix() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        assert!(g.softmax(z).is_err());
    }

    #[test]
    fn conv_shape_error_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![1, 2, 5, 5]));
        let w = g.constant(Tensor::zeros(vec![4, 3, 3, 3]));
        let msg = g.conv2d(x, w, None, (1, 1), (0, 0)).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 5, 5]") && msg.contains("[4, 3, 3, 3]"), "{msg}");
    }

    #[test]
    fn dense_identity_and_bias_only() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]).unwrap());
        let eye = g.constant(
            Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let zero_b = g.constant(Tensor::zeros(vec![3]));
        let y = g.dense(x, eye, Some(zero_b)).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());

        let zero_w = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::new(vec![2], vec![0.25, -1.5]).unwrap());
        let y = g.dense(x, zero_w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[0.25, -1.5, 0.25, -1.5]);
    }

    #[test]
    fn maxpool_halves_spatial_dims() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![1, 1, 4, 5], (0..20).map(|v| v as f32).collect()).unwrap());
        let y = g.maxpool2d(x, (2, 2)).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[6.0, 8.0, 16.0, 18.0]);
    }

    #[test]
    fn batchnorm_eval_is_affine_and_repeatable() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new(vec![1, 2, 1, 2], vec![1.0, 3.0, -1.0, 5.0]).unwrap());
        let gm = g.constant(Tensor::new(vec![2], vec![2.0, 1.0]).unwrap());
        let bt = g.constant(Tensor::new(vec![2], vec![0.5, 0.0]).unwrap());
        let a = g.batchnorm2d_eval(x, gm, bt, &[1.0, 0.0], &[4.0, 1.0]).unwrap();
        let b = g.batchnorm2d_eval(x, gm, bt, &[1.0, 0.0], &[4.0, 1.0]).unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
        let v = g.value(a).data();
        assert!((v[1] - (2.0 * 2.0 / (4.0f32 + 1e-5).sqrt() + 0.5)).abs() < 1e-6);
    }
}
