//! Dense row-major `f64` tensors and the plain (untraced) kernels behind
//! every differentiable op on the tape.

use std::fmt;

use crate::error::{Error, Result};

/// A dense n-dimensional array of finite 64-bit floats, stored row-major.
///
/// Every extent is positive and `shape.iter().product() == data.len()`.
/// Scalars are rank-1 tensors of shape `[1]`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Shape(
            "tensor shape must have at least one extent".into(),
        ));
    }
    if let Some(pos) = shape.iter().position(|&d| d == 0) {
        return Err(Error::Shape(format!("extent {pos} of {shape:?} is zero")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Builds a tensor, validating the element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel = check_shape(&shape)?;
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for kernels whose outputs are finite by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = check_shape(shape).expect("zeros/full need positive extents");
        assert!(value.is_finite(), "fill value must be finite");
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[1], value)
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != n) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Self::new(vec![m, n], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!(
                "expected a single element, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::Shape(format!(
                "expected a 2-D tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        let n = self.shape[self.shape.len() - 1];
        self.data[i * n + j]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel = check_shape(shape)?;
        if numel != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Elementwise map; the caller guarantees finiteness of the result.
    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub(crate) fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul of {m}x{k} by {k2}x{n}: inner extents differ"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2()?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor::from_parts(vec![n, m], out))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    masked_softmax_rows(x, None)
}

/// Row-wise softmax restricted to `permitted` entries.
///
/// Forbidden entries behave as `-inf` logits: they receive exactly zero
/// weight and the row renormalizes over the permitted keys. Every row must
/// keep at least one permitted entry.
pub fn masked_softmax_rows(x: &Tensor, permitted: Option<&[bool]>) -> Result<Tensor> {
    let (m, n) = x.dims2()?;
    if let Some(p) = permitted {
        if p.len() != m * n {
            return Err(Error::Dimension(format!(
                "softmax mask has {} entries for a {m}x{n} input",
                p.len()
            )));
        }
    }
    let allowed = |idx: usize| permitted.is_none_or(|p| p[idx]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let base = i * n;
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if allowed(base + j) {
                max = max.max(x.data[base + j]);
            }
        }
        assert!(max.is_finite(), "softmax row {i} has no permitted entries");
        let mut total = 0.0;
        for j in 0..n {
            if allowed(base + j) {
                let e = (x.data[base + j] - max).exp();
                out[base + j] = e;
                total += e;
            }
        }
        for v in &mut out[base..base + n] {
            *v /= total;
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Flat indices of the `k` largest elements, ties broken by ascending index.
pub fn topk_indices(x: &Tensor, k: usize) -> Result<Vec<usize>> {
    let n = x.numel();
    if k == 0 || k > n {
        return Err(Error::Argument(format!("top-k with k={k} on {n} elements")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x.data[b].total_cmp(&x.data[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Mean of the `k` largest elements.
pub fn topk_mean(x: &Tensor, k: usize) -> Result<f64> {
    let idx = topk_indices(x, k)?;
    Ok(idx.iter().map(|&i| x.data[i]).sum::<f64>() / k as f64)
}

/// Which axis of an `h x w` map is squeezed by a max-projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Max over rows: output has one entry per column (length `w`).
    Rows,
    /// Max over columns: output has one entry per row (length `h`).
    Cols,
}

/// Max-projection of a 2-D map along `axis`, with the flat index of the
/// winning element for each output entry (first index on ties).
pub fn axis_max_with_argmax(x: &Tensor, axis: Axis) -> Result<(Tensor, Vec<usize>)> {
    let (h, w) = x.dims2()?;
    let (outer, inner) = match axis {
        Axis::Rows => (w, h),
        Axis::Cols => (h, w),
    };
    let flat = |o: usize, i: usize| match axis {
        Axis::Rows => i * w + o,
        Axis::Cols => o * w + i,
    };
    let mut vals = Vec::with_capacity(outer);
    let mut arg = Vec::with_capacity(outer);
    for o in 0..outer {
        let mut best = flat(o, 0);
        for i in 1..inner {
            let f = flat(o, i);
            if x.data[f] > x.data[best] {
                best = f;
            }
        }
        vals.push(x.data[best]);
        arg.push(best);
    }
    Ok((Tensor::from_parts(vec![outer], vals), arg))
}

pub fn axis_max_project(x: &Tensor, axis: Axis) -> Result<Tensor> {
    axis_max_with_argmax(x, axis).map(|(t, _)| t)
}
