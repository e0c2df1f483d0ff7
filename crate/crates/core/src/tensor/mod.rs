//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Storage is generic over [`Element`] so the same kernels run in `f32` for
//! training and in `f64` for finite-difference gradient checks. Reductions
//! always accumulate in `f64`.

mod graph;
pub mod kernels;

pub use graph::{BatchStats, Graph, Var};

use std::fmt::Debug;

use crate::error::{Error, Result};

/// Scalar storage type of a [`Tensor`].
pub trait Element: Copy + Default + PartialEq + PartialOrd + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Element for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Row-major n-dimensional array with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Element = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
}

impl<F: Element> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!("shape {shape:?} must have positive dimensions")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data, grad: None, requires_grad: false })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::default())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        assert!(!shape.is_empty() && shape.iter().all(|&d| d > 0), "invalid shape {shape:?}");
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n], grad: None, requires_grad: false }
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![1], data: vec![value], grad: None, requires_grad: false }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| F::from_f64(v)).collect())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[F]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => {
                for (b, &v) in buf.iter_mut().zip(g) {
                    *b = F::from_f64(b.to_f64() + v.to_f64());
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Copy of `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.shape.len() || start + len > self.shape[axis] || len == 0 {
            return Err(Error::dim(format!(
                "narrow(axis={axis}, start={start}, len={len}) out of range for {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let dim = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(shape, data)
    }

    /// Concatenate along a new leading axis. All parts must share a shape.
    pub fn stack(parts: &[&Tensor<F>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::dim("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::dim(format!(
                    "stack shape mismatch: {:?} vs {:?}",
                    first.shape, p.shape
                )));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn cast<G: Element>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.to_f64())).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.to_f64().is_finite())
    }
}

/// Convolution weights plus stride and padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel<F: Element = f32> {
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl<F: Element> ConvKernel<F> {
    pub fn new(weight: Tensor<F>, bias: Option<Tensor<F>>) -> Result<Self> {
        if weight.shape().len() != 4 {
            return Err(Error::dim(format!(
                "conv weight must be (C_out, C_in, k_h, k_w), got {:?}",
                weight.shape()
            )));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(Error::dim(format!(
                    "conv bias {:?} does not match weight {:?}",
                    b.shape(),
                    weight.shape()
                )));
            }
        }
        Ok(ConvKernel { weight, bias, stride: (1, 1), padding: (0, 0) })
    }

    pub fn with_padding(mut self, padding: (usize, usize)) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_stride(mut self, stride: (usize, usize)) -> Self {
        self.stride = stride;
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn parameter_count(&self) -> usize {
        self.weight.numel() + self.bias.as_ref().map_or(0, |b| b.numel())
    }
}

/// Convolution through a throwaway graph; the graph-free entry point for
/// inference-only callers and tests.
pub fn conv2d<F: Element>(input: &Tensor<F>, kernel: &ConvKernel<F>) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = g.conv2d_kernel(x, kernel)?;
    Ok(g.take(y))
}

/// Vertical `(k,1)` stage followed by horizontal `(1,k)` stage with no
/// nonlinearity in between.
pub fn conv2d_factorized<F: Element>(
    input: &Tensor<F>,
    vertical: &ConvKernel<F>,
    horizontal: &ConvKernel<F>,
) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let y = g.conv2d_factorized(x, vertical, horizontal)?;
    Ok(g.take(y))
}

/// Full `(k_h, k_w)` kernel equivalent to a factorized pair:
/// `W[o,i] = Σ_m h[o,m] ⊗ v[m,i]`, each term a rank-1 outer product.
pub fn compose_factorized<F: Element>(
    vertical: &ConvKernel<F>,
    horizontal: &ConvKernel<F>,
) -> Result<ConvKernel<F>> {
    let (kh, one_v) = vertical.kernel_size();
    let (one_h, kw) = horizontal.kernel_size();
    if one_v != 1 || one_h != 1 {
        return Err(Error::dim(format!(
            "factorized pair needs (k,1) then (1,k) kernels, got {:?} and {:?}",
            vertical.weight.shape(),
            horizontal.weight.shape()
        )));
    }
    if vertical.out_channels() != horizontal.in_channels() {
        return Err(Error::dim(format!(
            "factorized stage channels disagree: vertical {:?} vs horizontal {:?}",
            vertical.weight.shape(),
            horizontal.weight.shape()
        )));
    }
    // The pair carries its bias on the horizontal stage only.
    if vertical.bias.is_some() {
        return Err(Error::config("factorized vertical stage must not carry a bias"));
    }
    let (c_in, mid, c_out) =
        (vertical.in_channels(), vertical.out_channels(), horizontal.out_channels());
    let v = vertical.weight.data();
    let h = horizontal.weight.data();
    let mut w = vec![0.0f64; c_out * c_in * kh * kw];
    for o in 0..c_out {
        for i in 0..c_in {
            for m in 0..mid {
                for y in 0..kh {
                    let vv = v[(m * c_in + i) * kh + y].to_f64();
                    for x in 0..kw {
                        w[((o * c_in + i) * kh + y) * kw + x] += h[(o * mid + m) * kw + x].to_f64() * vv;
                    }
                }
            }
        }
    }
    let weight = Tensor::from_f64(vec![c_out, c_in, kh, kw], &w)?;
    Ok(ConvKernel {
        weight,
        bias: horizontal.bias.clone(),
        stride: (1, 1),
        padding: (vertical.padding.0, horizontal.padding.1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn narrow_middle_axis() {
        let t = Tensor::<f32>::new(vec![1, 4, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        let n = t.narrow(1, 1, 2).unwrap();
        assert_eq!(n.shape(), &[1, 2, 2]);
        assert_eq!(n.data(), &[2.0, 3.0, 4.0, 5.0]);
        assert!(t.narrow(1, 3, 2).is_err());
    }

    #[test]
    fn compose_rejects_wrong_orientation() {
        let v = ConvKernel::new(Tensor::<f32>::zeros(vec![1, 1, 1, 3]), None).unwrap();
        let h = ConvKernel::new(Tensor::<f32>::zeros(vec![1, 1, 1, 3]), None).unwrap();
        assert!(compose_factorized(&v, &h).is_err());
    }
}
