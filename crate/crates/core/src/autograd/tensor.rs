//! Dense row-major `f64` storage used by the autograd graph.

use std::fmt;

/// Contiguous row-major array of `f64`.
///
/// Most of the network works on rank-2 tensors (`[rows, cols]`); higher ranks
/// only carry shape metadata for reshapes and persistence.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match data length {}",
            data.len()
        );
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(vec![1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// `(rows, cols)` of a rank-2 tensor; rank-1 tensors are a single row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [c] => (1, *c),
            [r, c] => (*r, *c),
            s => panic!("expected rank-2 tensor, got shape {s:?}"),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "elementwise shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `op(self) · op(rhs)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul(&self, rhs: &Self, trans_a: bool, trans_b: bool) -> Self {
        let (ar, ac) = self.dims2();
        let (br, bc) = rhs.dims2();
        let (m, k, rsa, csa) = if trans_a {
            (ac, ar, 1, ac)
        } else {
            (ar, ac, ac, 1)
        };
        let (k2, n, rsb, csb) = if trans_b {
            (bc, br, 1, bc)
        } else {
            (br, bc, bc, 1)
        };
        assert_eq!(k, k2, "matmul inner dimension mismatch: {m}x{k} · {k2}x{n}");
        let mut out = vec![0.0; m * n];
        if m > 0 && n > 0 && k > 0 {
            // SAFETY: the strides describe exactly the row-major buffers above,
            // all of which are live and sized m*k, k*n and m*n.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data.as_ptr(),
                    rsa as isize,
                    csa as isize,
                    rhs.data.as_ptr(),
                    rsb as isize,
                    csb as isize,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Self::new(vec![m, n], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2();
        let (_, n) = b.dims2();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
                }
            }
        }
        Tensor::new(vec![m, n], out)
    }

    fn transpose(a: &Tensor) -> Tensor {
        let (r, c) = a.dims2();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    #[test]
    fn matmul_transpose_flags_agree_with_naive_product() {
        let a = Tensor::new(vec![3, 4], (0..12).map(|x| x as f64 * 0.5 - 2.0).collect());
        let b = Tensor::new(vec![4, 2], (0..8).map(|x| (x as f64).sin()).collect());
        let expected = naive(&a, &b);
        assert!(a.matmul(&b, false, false).max_abs_diff(&expected) < 1e-12);
        assert!(transpose(&a).matmul(&b, true, false).max_abs_diff(&expected) < 1e-12);
        assert!(a.matmul(&transpose(&b), false, true).max_abs_diff(&expected) < 1e-12);
        assert!(transpose(&a)
            .matmul(&transpose(&b), true, true)
            .max_abs_diff(&expected)
            < 1e-12);
    }
}
