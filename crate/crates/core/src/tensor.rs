//! Dense row-major `f64` tensors and the raw numeric kernels used by the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    /// Gradient slot filled by [`crate::tape::Tape::backward`] consumers.
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    /// Builds a rank-2 tensor from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Uniform samples in `[-limit, limit]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], limit: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn clamp01(&self) -> Tensor {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn l2_distance(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn mse(&self, other: &Tensor) -> f64 {
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        s / self.data.len() as f64
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Copy of row `i` of the leading axis, keeping the trailing shape.
    pub fn row(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let shape = if self.shape.len() == 1 {
            vec![1]
        } else {
            self.shape[1..].to_vec()
        };
        Tensor {
            shape,
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
            grad: None,
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }
}

/// Index of the largest element; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `Aᵀ·B` where `A` is `k×m` and `B` is `k×n`.
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `A·Bᵀ` where `A` is `m×k` and `B` is `n×k`.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// Plain (untracked) matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::dim("matmul", a, b));
    }
    Ok((a[0], a[1], b[1]))
}

/// Geometry of a (batched) 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernels: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, c_in, h, w) = match *input {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => return Err(Error::dim("conv2d", input, kernels)),
        };
        let [c_out, kc, kh, kw] = *kernels else {
            return Err(Error::dim("conv2d", input, kernels));
        };
        if kc != c_in || kh != kw {
            return Err(Error::dim("conv2d", input, kernels));
        }
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be >= 1".into()));
        }
        let k = kh;
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::dim("conv2d", input, kernels));
        }
        Ok(ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            out_h: (h + 2 * pad - k) / stride + 1,
            out_w: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.c_out, self.out_h, self.out_w]
        } else {
            vec![self.c_out, self.out_h, self.out_w]
        }
    }

    /// Visits every (output index, input index, kernel index) triple that
    /// lands inside the unpadded input.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ih, iw) = (self.h as isize, self.w as isize);
        for n in 0..self.batch {
            for co in 0..self.c_out {
                for oy in 0..self.out_h {
                    for ox in 0..self.out_w {
                        let out_idx = ((n * self.c_out + co) * self.out_h + oy) * self.out_w + ox;
                        for ci in 0..self.c_in {
                            for ky in 0..self.k {
                                let y = (oy * self.stride + ky) as isize - self.pad as isize;
                                if y < 0 || y >= ih {
                                    continue;
                                }
                                for kx in 0..self.k {
                                    let x = (ox * self.stride + kx) as isize - self.pad as isize;
                                    if x < 0 || x >= iw {
                                        continue;
                                    }
                                    let in_idx = ((n * self.c_in + ci) * self.h + y as usize)
                                        * self.w
                                        + x as usize;
                                    let k_idx = ((co * self.c_in + ci) * self.k + ky) * self.k + kx;
                                    f(out_idx, in_idx, k_idx);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, input: &[f64], kernels: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.batch * self.c_out * self.out_h * self.out_w];
        self.for_each_tap(|o, i, k| out[o] += input[i] * kernels[k]);
        out
    }

    pub fn backward(
        &self,
        input: &[f64],
        kernels: &[f64],
        grad_out: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let mut gi = vec![0.0; input.len()];
        let mut gk = vec![0.0; kernels.len()];
        self.for_each_tap(|o, i, k| {
            let g = grad_out[o];
            gi[i] += g * kernels[k];
            gk[k] += g * input[i];
        });
        (gi, gk)
    }
}

/// Plain (untracked) cross-correlation with zero padding.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), kernels.shape(), stride, padding)?;
    Tensor::new(
        g.out_shape(input.rank() == 4),
        g.forward(input.data(), kernels.data()),
    )
}

/// Row-wise softmax over the last axis with max subtraction.
pub(crate) fn softmax_rows(data: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for (src, dst) in data.chunks(width).zip(out.chunks_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

pub fn softmax(x: &Tensor) -> Tensor {
    let width = *x.shape().last().unwrap_or(&1);
    Tensor {
        shape: x.shape.clone(),
        data: softmax_rows(&x.data, width),
        grad: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_zero() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(matmul(&a, &eye).unwrap().data(), a.data());
        let z = Tensor::zeros(&[2, 3]);
        assert!(matmul(&a, &z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_column() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn transposed_products_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect();
        let b: Vec<f64> = (0..8).map(|v| (v as f64).sin()).collect();
        // a: 2x3 viewed as k=2,m=3 ; b: 2x4
        let tn = matmul_tn(&a, &b, 2, 3, 4);
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        assert_eq!(tn, matmul_raw(&at, &b, 3, 2, 4));
        let mut bt = vec![0.0; 8];
        for i in 0..2 {
            for j in 0..4 {
                bt[j * 2 + i] = b[i * 4 + j];
            }
        }
        // at is 3x2, bt is 4x2 → at·btᵀ = at·b
        assert_eq!(matmul_nt(&at, &bt, 3, 2, 4), matmul_raw(&at, &b, 3, 2, 4));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::new(vec![1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_all_ones_sums() {
        let x = Tensor::full(&[1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_output_geometry_and_padding() {
        let x = Tensor::full(&[2, 5, 5], 1.0);
        let k = Tensor::full(&[3, 2, 3, 3], 1.0);
        let y = conv2d(&x, &k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, 3, 3]);
        // corner sees a 2x2 patch per channel
        assert_eq!(y.data()[0], 8.0);
        // centre sees the full 3x3 patch per channel
        assert_eq!(y.data()[4], 18.0);
    }

    #[test]
    fn conv_kernel_too_large() {
        let x = Tensor::zeros(&[1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(Error::Dimension { .. })));
        assert!(conv2d(&x, &k, 1, 1).is_ok());
    }

    #[test]
    fn softmax_values() {
        let s = softmax(&Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let s = softmax(&Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        // direct e^x / Σ e^x
        let z: f64 = (1.0f64).exp() + (2.0f64).exp() + (3.0f64).exp();
        let expect = [1.0f64.exp() / z, 2.0f64.exp() / z, 3.0f64.exp() / z];
        for (a, b) in s.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((s.data()[0] - 0.09003).abs() < 1e-5);
        assert!((s.data()[2] - 0.66524).abs() < 1e-5);
        let s = softmax(&Tensor::from_vec(vec![1000.0, 0.0]));
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }
}
