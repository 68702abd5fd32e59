//! Dense row-major `f64` tensors.
//!
//! A [`Tensor`] is an immutable value: every kernel here allocates a fresh
//! result. Binary kernels broadcast along unit extents only, and both operands
//! must have the same rank.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::dim("Tensor::from_rows", &[cols], &[row.len()]));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Row `i` of a tensor viewed as `rows × cols`.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows()).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Applies `f` pairwise with unit-extent broadcasting.
    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Tensor {
                shape: self.shape.clone(),
                data,
            });
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| Error::dim(op, &self.shape, &other.shape))?;
        let n: usize = out_shape.iter().product();
        let sa = broadcast_strides(&self.shape);
        let sb = broadcast_strides(&other.shape);
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..n {
            let (mut ia, mut ib) = (0, 0);
            for (k, &i) in idx.iter().enumerate() {
                ia += i * sa[k];
                ib += i * sb[k];
            }
            data.push(f(self.data[ia], other.data[ib]));
            increment(&mut idx, &out_shape);
        }
        Ok(Tensor { shape: out_shape, data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Self> {
        if other.data.contains(&0.0) {
            return Err(Error::Numeric("division by exact zero".into()));
        }
        self.zip_with(other, "div", |a, b| a / b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| x * c)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::dim("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::dim("transpose", &self.shape, &[2]));
        }
        self.permute(&[1, 0])
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", &self.shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        let mut data = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; r];
        for _ in 0..self.numel() {
            let off: usize = idx.iter().zip(perm).map(|(&i, &p)| i * in_strides[p]).sum();
            data.push(self.data[off]);
            increment(&mut idx, &out_shape);
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Sums over `axes`, keeping them as unit extents.
    pub fn sum_axes_keepdim(&self, axes: &[usize]) -> Result<Self> {
        let r = self.rank();
        if axes.iter().any(|&a| a >= r) {
            return Err(Error::dim("reduce", &self.shape, axes));
        }
        let mut out_shape = self.shape.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let out_strides = broadcast_strides(&out_shape);
        let mut data = vec![0.0; out_shape.iter().product()];
        let mut idx = vec![0usize; r];
        for &v in &self.data {
            let off: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
            data[off] += v;
            increment(&mut idx, &self.shape);
        }
        Ok(Tensor { shape: out_shape, data })
    }

    /// Sums a broadcast result back down to `shape`.
    pub fn reduce_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        if shape.len() != self.rank() {
            return Err(Error::dim("reduce_to", &self.shape, shape));
        }
        let axes: Vec<usize> = (0..shape.len()).filter(|&k| shape[k] == 1 && self.shape[k] != 1).collect();
        let out = self.sum_axes_keepdim(&axes)?;
        if out.shape != shape {
            return Err(Error::dim("reduce_to", &self.shape, shape));
        }
        Ok(out)
    }

    /// Expands unit extents to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let zeros = Tensor::zeros(shape);
        let out = zeros.zip_with(self, "broadcast_to", |_, b| b)?;
        if out.shape != shape {
            return Err(Error::dim("broadcast_to", &self.shape, shape));
        }
        Ok(out)
    }

    /// Selects rows (axis-0 slices) by index; indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        let n = self.rows();
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(Error::dim("gather_rows", &self.shape, &[i]));
            }
            data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Ok(Tensor { shape, data })
    }

    /// Concatenates along axis 0.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Numeric("concat of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::dim("concat_rows", &first.shape, &p.shape));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }

    /// Rows rescaled to unit Euclidean norm; zero rows are left as zero.
    pub fn l2_normalize_rows(&self) -> Self {
        let c = self.cols();
        let mut data = self.data.clone();
        for row in data.chunks_mut(c.max(1)) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for k in (0..shape.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * shape[k + 1];
    }
    s
}

/// Strides with zero for unit extents, so indexing repeats the single slice.
fn broadcast_strides(shape: &[usize]) -> Vec<usize> {
    strides(shape)
        .into_iter()
        .zip(shape)
        .map(|(s, &e)| if e == 1 { 0 } else { s })
        .collect()
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for k in (0..idx.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_expansion() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_zero() {
        let m = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.5, 7.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&m).unwrap(), m);
        assert_eq!(Tensor::zeros(&[2, 2]).matmul(&m).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn broadcasting_along_unit_extents() {
        let a = Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap();
        let b = Tensor::new(vec![1, 3], vec![10.0, 20.0, 30.0]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.data(), &[10.0, 21.0, 32.0, 13.0, 24.0, 35.0]);
        assert!(a.add(&Tensor::zeros(&[2, 2])).is_err());
        assert!(a.add(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn div_by_exact_zero_is_error() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![1.0, 0.0]);
        assert!(matches!(a.div(&b), Err(Error::Numeric(_))));
    }

    #[test]
    fn permute_roundtrip() {
        let a = Tensor::new(vec![2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = a.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[1], a.data()[4]);
        assert_eq!(p.permute(&[1, 2, 0]).unwrap(), a);
    }

    #[test]
    fn reduce_and_broadcast_back() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let s = a.sum_axes_keepdim(&[0]).unwrap();
        assert_eq!(s.data(), &[5.0, 7.0, 9.0]);
        assert_eq!(s.broadcast_to(&[2, 3]).unwrap().data(), &[5.0, 7.0, 9.0, 5.0, 7.0, 9.0]);
    }
}
