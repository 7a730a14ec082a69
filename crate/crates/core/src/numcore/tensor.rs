use std::fmt;

use crate::error::{shape_err, Error, Result};

/// Dense row-major array of `f32`.
///
/// The element count always equals the product of `dims`, and every
/// constructor and public operation rejects non-finite values.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn numel(dims: &[usize]) -> usize {
    dims.iter().product()
}

fn check_finite(data: &[f32], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Domain(format!(
            "{what}: non-finite value {} at flat index {i}",
            data[i]
        ))),
    }
}

impl Tensor {
    pub fn new(dims: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let dims = dims.into();
        if numel(&dims) != data.len() {
            return shape_err(format!(
                "dims {dims:?} need {} elements, got {}",
                numel(&dims),
                data.len()
            ));
        }
        check_finite(&data, "Tensor::new")?;
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: impl Into<Vec<usize>>) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: impl Into<Vec<usize>>, value: f32) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        let dims = dims.into();
        let data = vec![value; numel(&dims)];
        Self { dims, data }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(dims: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f32) -> Result<Self> {
        let dims = dims.into();
        let data = (0..numel(&dims)).map(f).collect();
        Self::new(dims, data)
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable view of the flat storage. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if numel(&dims) != self.data.len() {
            return shape_err(format!("cannot reshape {:?} into {dims:?}", self.dims));
        }
        Ok(Self {
            dims,
            data: self.data,
        })
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims.as_slice() {
            &[r, c] => Ok((r, c)),
            d => shape_err(format!("expected a 2-D tensor, got dims {d:?}")),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let (_, c) = self.shape2().expect("row() on non-2-D tensor");
        &self.data[i * c..(i + 1) * c]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        let c = self.dims.last().copied().unwrap_or(1).max(1);
        self.data.chunks(c)
    }

    /// Numerically stable softmax of each row of a 2-D tensor.
    ///
    /// Exponentials and the normaliser are accumulated in `f64` so rows sum
    /// to one within a few `f32` ulps even for a few thousand columns.
    pub fn row_softmax(&self) -> Result<Self> {
        let (r, c) = self.shape2()?;
        let mut out = vec![0.0f32; r * c];
        let mut scratch = vec![0.0f64; c];
        for (src, dst) in self
            .data
            .chunks(c.max(1))
            .zip(out.chunks_mut(c.max(1)))
            .take(r)
        {
            let max = src.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let mut sum = 0.0f64;
            for (s, &v) in scratch.iter_mut().zip(src) {
                *s = (v as f64 - max).exp();
                sum += *s;
            }
            for (d, &s) in dst.iter_mut().zip(&scratch) {
                *d = (s / sum) as f32;
            }
        }
        Self::new([r, c], out)
    }

    /// Matrix product with a fixed summation order: every output element
    /// accumulates its `k` terms left to right starting from `0.0`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Self> {
        let (r, k) = self.shape2()?;
        let (k2, c) = rhs.shape2()?;
        if k != k2 {
            return shape_err(format!(
                "matmul inner dims differ: {:?} x {:?}",
                self.dims, rhs.dims
            ));
        }
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * c..(i + 1) * c];
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &rhs.data[kk * c..(kk + 1) * c];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        check_finite(&out, "matmul")?;
        Ok(Self {
            dims: vec![r, c],
            data: out,
        })
    }

    /// `self · rhsᵀ` without materialising the transpose.
    pub fn matmul_transposed(&self, rhs: &Tensor) -> Result<Self> {
        let (r, k) = self.shape2()?;
        let (c, k2) = rhs.shape2()?;
        if k != k2 {
            return shape_err(format!(
                "matmul_transposed inner dims differ: {:?} x {:?}ᵀ",
                self.dims, rhs.dims
            ));
        }
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..c {
                let b_row = &rhs.data[j * k..(j + 1) * k];
                let mut acc = 0.0f32;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out[i * c + j] = acc;
            }
        }
        check_finite(&out, "matmul_transposed")?;
        Ok(Self {
            dims: vec![r, c],
            data: out,
        })
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (r, c) = self.shape2()?;
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            dims: vec![c, r],
            data: out,
        })
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` with the
    /// population variance, computed two-pass in `f64`.
    pub fn layer_norm(&self, eps: f32) -> Result<Self> {
        let (r, d) = self.shape2()?;
        if d == 0 {
            return shape_err("layer_norm needs at least one column");
        }
        let mut out = vec![0.0f32; r * d];
        for (src, dst) in self.data.chunks(d).zip(out.chunks_mut(d)) {
            let mean = src.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = src.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps as f64).sqrt();
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = ((v as f64 - mean) * inv) as f32;
            }
        }
        check_finite(&out, "layer_norm")?;
        Ok(Self {
            dims: vec![r, d],
            data: out,
        })
    }

    fn same_dims(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.dims != other.dims {
            return shape_err(format!("{op}: dims {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(())
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.same_dims(other, "zip_map")?;
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(&data, "zip_map")?;
        Ok(Self {
            dims: self.dims.clone(),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        let data: Vec<f32> = self.data.iter().map(|&a| f(a)).collect();
        check_finite(&data, "map")?;
        Ok(Self {
            dims: self.dims.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Result<Self> {
        self.map(|a| a * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_dims(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        check_finite(&self.data, "add_assign")
    }

    /// Sum of squared elements, accumulated in `f64`.
    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.same_dims(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// `‖self - other‖₂ / ‖other‖₂` in `f64`.
    pub fn relative_l2(&self, other: &Tensor) -> Result<f64> {
        self.same_dims(other, "relative_l2")?;
        let num: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        let den = other.sum_squares();
        Ok((num / den.max(f64::MIN_POSITIVE)).sqrt())
    }

    /// Bitwise equality of dims and every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Concatenates equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return shape_err("stack of zero tensors");
        };
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            first.same_dims(p, "stack")?;
            data.extend_from_slice(&p.data);
        }
        let mut dims = vec![parts.len()];
        dims.extend_from_slice(&first.dims);
        Ok(Self { dims, data })
    }
}
