use crate::error::{ExnError, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor. Shape `[]` is a scalar with one element.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Visits every multi-index of `shape` in row-major order.
pub fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize])) {
    if shape.iter().any(|&d| d == 0) {
        return;
    }
    let mut idx = vec![0usize; shape.len()];
    loop {
        f(&idx);
        let mut axis = shape.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            idx[axis] += 1;
            if idx[axis] < shape[axis] {
                break;
            }
            idx[axis] = 0;
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel_of(&shape) != data.len() {
            return Err(ExnError::shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); numel_of(shape)],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; numel_of(shape)],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let strides = strides_of(&self.shape);
        idx.iter().zip(&strides).map(|(i, s)| i * s).sum()
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel_of(shape) != self.data.len() {
            return Err(ExnError::shape(format!(
                "cannot reshape {:?} ({} elems) to {:?} ({} elems)",
                self.shape,
                self.data.len(),
                shape,
                numel_of(shape)
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// One-directional broadcast: `self` expands to `shape`. Ranks must match
    /// and every axis of `self` must equal the target or be 1.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if !broadcast_ok(&self.shape, shape) {
            return Err(ExnError::shape(format!(
                "cannot broadcast {:?} to {:?}",
                self.shape, shape
            )));
        }
        if self.shape == shape {
            return Ok(self.clone());
        }
        let mut out = Tensor::zeros(shape);
        let src_strides = strides_of(&self.shape);
        let mut flat = 0usize;
        for_each_index(shape, |idx| {
            let mut so = 0usize;
            for (axis, &i) in idx.iter().enumerate() {
                if self.shape[axis] != 1 {
                    so += i * src_strides[axis];
                }
            }
            out.data[flat] = self.data[so];
            flat += 1;
        });
        Ok(out)
    }

    /// Inverse of broadcast: sums over every axis that was expanded from 1.
    /// Used to route gradients back to broadcast operands.
    pub fn reduce_to(&self, shape: &[usize]) -> Result<Self> {
        if !broadcast_ok(shape, &self.shape) {
            return Err(ExnError::shape(format!(
                "cannot reduce {:?} to {:?}",
                self.shape, shape
            )));
        }
        if self.shape == *shape {
            return Ok(self.clone());
        }
        let mut acc = vec![0f64; numel_of(shape)];
        let dst_strides = strides_of(shape);
        let mut flat = 0usize;
        for_each_index(&self.shape, |idx| {
            let mut dov = 0usize;
            for (axis, &i) in idx.iter().enumerate() {
                if shape[axis] != 1 {
                    dov += i * dst_strides[axis];
                }
            }
            acc[dov] += self.data[flat].as_f64();
            flat += 1;
        });
        Ok(Tensor {
            shape: shape.to_vec(),
            data: acc.into_iter().map(T::of_f64).collect(),
        })
    }

    /// Sum or mean over `axes`. Accumulates in f64. With `keepdims` the
    /// reduced axes stay as size 1, otherwise they are dropped.
    pub fn reduce(&self, axes: &[usize], keepdims: bool, mean: bool) -> Result<Self> {
        for &a in axes {
            if a >= self.rank() {
                return Err(ExnError::invalid(format!(
                    "reduce axis {} out of range for rank {}",
                    a,
                    self.rank()
                )));
            }
        }
        let mut reduced = vec![false; self.rank()];
        for &a in axes {
            reduced[a] = true;
        }
        let kept_shape: Vec<usize> = self
            .shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if reduced[i] { 1 } else { d })
            .collect();
        let mut count = 1usize;
        for (i, &d) in self.shape.iter().enumerate() {
            if reduced[i] {
                count *= d;
            }
        }
        let mut acc = vec![0f64; numel_of(&kept_shape)];
        let kept_strides = strides_of(&kept_shape);
        let mut flat = 0usize;
        for_each_index(&self.shape, |idx| {
            let mut o = 0usize;
            for (axis, &i) in idx.iter().enumerate() {
                if !reduced[axis] {
                    o += i * kept_strides[axis];
                }
            }
            acc[o] += self.data[flat].as_f64();
            flat += 1;
        });
        if mean && count > 0 {
            let inv = 1.0 / count as f64;
            for v in &mut acc {
                *v *= inv;
            }
        }
        let data: Vec<T> = acc.into_iter().map(T::of_f64).collect();
        let out_shape = if keepdims {
            kept_shape
        } else {
            self.shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !reduced[*i])
                .map(|(_, &d)| d)
                .collect()
        };
        Tensor::new(out_shape, data)
    }

    pub fn sum_all_f64(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    /// Transpose of a rank-2 tensor.
    pub fn t2(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(ExnError::shape(format!(
                "t2 needs rank 2, got {:?}",
                self.shape
            )));
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = Tensor::zeros(&[n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(out)
    }
}

pub fn broadcast_ok(src: &[usize], dst: &[usize]) -> bool {
    src.len() == dst.len() && src.iter().zip(dst).all(|(&s, &d)| s == d || s == 1)
}

/// Naive rank-2 matrix product with f64 accumulation.
pub fn matmul2d<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(ExnError::shape(format!(
            "matmul needs rank-2 operands, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(ExnError::shape(format!(
            "matmul inner dims differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for j in 0..n {
            let mut s = 0f64;
            for p in 0..k {
                s += a.data[i * k + p].as_f64() * b.data[p * n + j].as_f64();
            }
            out.data[i * n + j] = T::of_f64(s);
        }
    }
    Ok(out)
}

pub fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_abs_diff shape mismatch");
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn strides_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[5]), vec![1]);
        assert!(strides_of(&[]).is_empty());
    }

    #[test]
    fn broadcast_expands_unit_axes() {
        let t = Tensor::new(vec![1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let b = t.broadcast_to(&[2, 3]).unwrap();
        assert_eq!(b.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert!(t.broadcast_to(&[3, 2]).is_err());
        assert!(t.broadcast_to(&[2, 3, 1]).is_err());
    }

    #[test]
    fn reduce_to_sums_expanded_axes() {
        let t = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = t.reduce_to(&[1, 3]).unwrap();
        assert_eq!(r.data(), &[5.0, 7.0, 9.0]);
        let r2 = t.reduce_to(&[2, 1]).unwrap();
        assert_eq!(r2.data(), &[6.0, 15.0]);
    }

    #[test]
    fn reduce_mean_keepdims() {
        let t = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let m = t.reduce(&[0], true, true).unwrap();
        assert_eq!(m.shape(), &[1, 2]);
        assert_eq!(m.data(), &[2.0, 3.0]);
        let s = t.reduce(&[0, 1], false, false).unwrap();
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.data(), &[10.0]);
    }

    #[test]
    fn matmul_small_known_answer() {
        let a = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul2d(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let at = a.t2().unwrap();
        assert_eq!(at.shape(), &[3, 2]);
        assert_eq!(at.t2().unwrap(), a);
    }
}
