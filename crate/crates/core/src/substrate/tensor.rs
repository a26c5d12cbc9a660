use super::Real;

/// Dense row-major matrix. Vectors are `1 x n` or `n x 1`, scalars `1 x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data does not match shape");
        Self { rows, cols, data }
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    /// Value of a `1 x 1` tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::c(v.as_f64())).collect(),
        }
    }
}

/// `c += a · b` for `a: m x k`, `b: k x n`, `c: m x n`.
pub(crate) fn gemm_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (k_, n_) = (k as isize, n as isize);
    T::gemm_strided(m, k, n, a, k_, 1, b, n_, 1, c, n_, 1);
}

/// `c += aᵀ · b` for `a: m x k`, `b: m x n`, `c: k x n`.
pub(crate) fn gemm_tn_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    let (k_, n_) = (k as isize, n as isize);
    T::gemm_strided(k, m, n, a, 1, k_, b, n_, 1, c, n_, 1);
}

/// `c += a · bᵀ` for `a: m x k`, `b: n x k`, `c: m x n`.
pub(crate) fn gemm_nt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let (k_, n_) = (k as isize, n as isize);
    T::gemm_strided(m, k, n, a, k_, 1, b, 1, k_, c, n_, 1);
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let mut out = Tensor::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut s = 0.0;
                for p in 0..a.cols {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.data[i * b.cols + j] = s;
            }
        }
        out
    }

    fn sample(rows: usize, cols: usize, offset: f64) -> Tensor<f64> {
        let data = (0..rows * cols)
            .map(|i| ((i as f64 + offset) * 0.37).sin())
            .collect();
        Tensor::from_vec(rows, cols, data)
    }

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let a = sample(3, 5, 0.0);
        let b = sample(5, 4, 1.0);
        let expect = naive(&a, &b);

        let mut c = vec![0.0; 12];
        gemm_acc(&a.data, &b.data, &mut c, 3, 5, 4);
        let mut c_nt = vec![0.0; 12];
        gemm_nt_acc(&a.data, &b.transpose().data, &mut c_nt, 3, 5, 4);
        let mut c_tn = vec![0.0; 12];
        gemm_tn_acc(&a.transpose().data, &b.data, &mut c_tn, 5, 3, 4);

        for i in 0..12 {
            assert!((c[i] - expect.data[i]).abs() < 1e-12);
            assert!((c_nt[i] - expect.data[i]).abs() < 1e-12);
            assert!((c_tn[i] - expect.data[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_twice_is_identity() {
        let a = sample(4, 7, 2.0);
        assert_eq!(a.transpose().transpose(), a);
    }
}
