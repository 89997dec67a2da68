//! Dense row-major f64 matrices and the handful of kernels everything
//! else is built from. Shapes are (rows, cols); a column vector is
//! (n, 1) and a scalar is (1, 1).

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Tensor { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(1, 1, vec![v])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Single scalar value of a (1,1) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Reinterprets the buffer with a new shape of identical length.
    pub fn reshaped(mut self, rows: usize, cols: usize) -> Tensor {
        assert_eq!(self.data.len(), rows * cols, "reshape length mismatch");
        self.rows = rows;
        self.cols = cols;
        self
    }

    pub fn check_same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// C = A (m,k) * B (k,n). Row-major; k is unrolled by 4 so each pass
/// over the output row does four fused axpys, which keeps the row in
/// registers and vectorizes over n.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dims {} vs {}", a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = vec![0.0; m * n];
    let k4 = k - k % 4;
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        let mut l = 0;
        while l < k4 {
            let a0 = a_row[l];
            let a1 = a_row[l + 1];
            let a2 = a_row[l + 2];
            let a3 = a_row[l + 3];
            let b0 = &b.data[l * n..(l + 1) * n];
            let b1 = &b.data[(l + 1) * n..(l + 2) * n];
            let b2 = &b.data[(l + 2) * n..(l + 3) * n];
            let b3 = &b.data[(l + 3) * n..(l + 4) * n];
            for j in 0..n {
                c_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            l += 4;
        }
        while l < k {
            let a_il = a_row[l];
            let b_row = &b.data[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_il * bv;
            }
            l += 1;
        }
    }
    Tensor::from_vec(m, n, c)
}

/// C = A^T (k,m)^T... i.e. A is (m,k), B is (m,n), result (k,n) = sum_i
/// a[i,:]^T outer b[i,:]. This is the weight-gradient kernel.
pub fn matmul_at_b(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_at_b row counts {} vs {}", a.rows, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let b_row = &b.data[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == 0.0 {
                continue;
            }
            let c_row = &mut c[l * n..(l + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_il * bv;
            }
        }
    }
    Tensor::from_vec(k, n, c)
}

/// C = A (m,k) * B^T where B is (n,k); result (m,n). Dot-product kernel,
/// used for input gradients dX = dZ * W^T.
pub fn matmul_a_bt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_a_bt inner dims {} vs {}", a.cols, b.cols);
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b.data[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *cv = acc;
        }
    }
    Tensor::from_vec(m, n, c)
}

/// y += alpha * x, elementwise over equal-length slices.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let mut c = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for l in 0..a.cols() {
                    acc += a.get(i, l) * b.get(l, j);
                }
                c.set(i, j, acc);
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive() {
        let mut seed = 1u64;
        let mut next = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let a = Tensor::from_fn(7, 5, |_, _| next());
        let b = Tensor::from_fn(5, 9, |_, _| next());
        let c = matmul(&a, &b);
        let c_ref = naive_matmul(&a, &b);
        for (x, y) in c.data().iter().zip(c_ref.data()) {
            assert!((x - y).abs() < 1e-14);
        }

        // odd inner dim exercises the unroll remainder
        let a2 = Tensor::from_fn(6, 7, |_, _| next());
        let b2 = Tensor::from_fn(7, 4, |_, _| next());
        let c2 = matmul(&a2, &b2);
        let c2_ref = naive_matmul(&a2, &b2);
        for (x, y) in c2.data().iter().zip(c2_ref.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn transposed_kernels_match_explicit_transpose() {
        let a = Tensor::from_fn(6, 4, |r, c| (r * 7 + c) as f64 * 0.1 - 1.0);
        let b = Tensor::from_fn(6, 3, |r, c| (r + c * 5) as f64 * 0.05 - 0.4);
        let at = Tensor::from_fn(4, 6, |r, c| a.get(c, r));
        let expect = naive_matmul(&at, &b);
        let got = matmul_at_b(&a, &b);
        got.check_same_shape(&expect, "at_b").unwrap();
        for (x, y) in got.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-14);
        }

        let w = Tensor::from_fn(5, 4, |r, c| (r * 3 + c) as f64 * 0.02 - 0.1);
        let wt = Tensor::from_fn(4, 5, |r, c| w.get(c, r));
        let expect2 = naive_matmul(&a, &wt);
        let got2 = matmul_a_bt(&a, &w);
        for (x, y) in got2.data().iter().zip(expect2.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    // Throughput probe for sizing training configs; run with
    // `cargo test -p decomp-core --release throughput -- --ignored --nocapture`.
    #[test]
    #[ignore]
    fn throughput_probe() {
        let m = 16384;
        let k = 40;
        let n = 32;
        let a = Tensor::from_fn(m, k, |r, c| ((r * 31 + c * 17) % 97) as f64 * 0.01);
        let b = Tensor::from_fn(k, n, |r, c| ((r * 13 + c * 7) % 89) as f64 * 0.01);
        let reps = 50;
        let t0 = std::time::Instant::now();
        let mut sink = 0.0;
        for _ in 0..reps {
            let c = matmul(&a, &b);
            sink += c.get(0, 0);
        }
        let dt = t0.elapsed().as_secs_f64();
        let flops = 2.0 * (m * k * n * reps) as f64;
        println!("matmul {}x{}x{}: {:.2} GFlop/s (sink {sink})", m, k, n, flops / dt / 1e9);

        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            let c = matmul_at_b(&a, &a);
            sink += c.get(0, 0);
        }
        let dt = t0.elapsed().as_secs_f64();
        let flops = 2.0 * (m * k * k * reps) as f64;
        println!("matmul_at_b: {:.2} GFlop/s (sink {sink})", flops / dt / 1e9);
    }
}
