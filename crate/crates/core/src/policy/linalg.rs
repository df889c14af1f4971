//! Row-major dense kernels over `matrixmultiply`.

const SMALL_ROWS: usize = 4;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorise.
    let mut acc = [0.0; 4];
    let (ac, ar) = a.split_at(a.len() - a.len() % 4);
    let (bc, br) = b.split_at(ac.len());
    for (x, y) in ac.chunks_exact(4).zip(bc.chunks_exact(4)) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y[n x out] = x[n x in] * w[out x in]^T + b`.
pub fn affine(x: &[f64], n: usize, input: usize, w: &[f64], b: &[f64], y: &mut [f64]) {
    let out = b.len();
    debug_assert_eq!(x.len(), n * input);
    debug_assert_eq!(w.len(), out * input);
    debug_assert_eq!(y.len(), n * out);
    for row in y.chunks_exact_mut(out) {
        row.copy_from_slice(b);
    }
    matmul_nt_acc(x, n, input, w, out, y);
}

/// `y[n x out] += x[n x in] * w[out x in]^T`.
pub fn matmul_nt_acc(x: &[f64], n: usize, input: usize, w: &[f64], out: usize, y: &mut [f64]) {
    debug_assert_eq!(x.len(), n * input);
    debug_assert_eq!(w.len(), out * input);
    debug_assert_eq!(y.len(), n * out);
    if n == 0 {
        return;
    }
    // Packing the weights costs as much as the product itself for a few rows.
    if n <= SMALL_ROWS {
        for (xr, yr) in x.chunks_exact(input).zip(y.chunks_exact_mut(out)) {
            for (yo, wr) in yr.iter_mut().zip(w.chunks_exact(input)) {
                *yo += dot(xr, wr);
            }
        }
        return;
    }
    // SAFETY: slice lengths checked above; strides describe the row-major
    // layouts of x, w^T and y.
    unsafe {
        matrixmultiply::dgemm(
            n,
            input,
            out,
            1.0,
            x.as_ptr(),
            input as isize,
            1,
            w.as_ptr(),
            1,
            input as isize,
            1.0,
            y.as_mut_ptr(),
            out as isize,
            1,
        );
    }
}

/// `dx[n x in] (+)= dy[n x out] * w[out x in]`. Overwrites when `accumulate`
/// is false.
pub fn matmul_nn(dy: &[f64], n: usize, out: usize, w: &[f64], input: usize, dx: &mut [f64], accumulate: bool) {
    debug_assert_eq!(dy.len(), n * out);
    debug_assert_eq!(w.len(), out * input);
    debug_assert_eq!(dx.len(), n * input);
    if n == 0 {
        return;
    }
    if !accumulate {
        dx.fill(0.0);
    }
    // SAFETY: as in `affine`.
    unsafe {
        matrixmultiply::dgemm(
            n,
            out,
            input,
            1.0,
            dy.as_ptr(),
            out as isize,
            1,
            w.as_ptr(),
            input as isize,
            1,
            1.0,
            dx.as_mut_ptr(),
            input as isize,
            1,
        );
    }
}

/// Weight and bias gradients: `dw[out x in] += dy^T x`, `db += sum_rows dy`.
pub fn accumulate_grads(dy: &[f64], n: usize, out: usize, x: &[f64], input: usize, dw: &mut [f64], db: Option<&mut [f64]>) {
    debug_assert_eq!(dy.len(), n * out);
    debug_assert_eq!(x.len(), n * input);
    debug_assert_eq!(dw.len(), out * input);
    if n == 0 {
        return;
    }
    // SAFETY: dy^T has row stride 1 and column stride `out`.
    unsafe {
        matrixmultiply::dgemm(
            out,
            n,
            input,
            1.0,
            dy.as_ptr(),
            1,
            out as isize,
            x.as_ptr(),
            input as isize,
            1,
            1.0,
            dw.as_mut_ptr(),
            input as isize,
            1,
        );
    }
    if let Some(db) = db {
        for row in dy.chunks_exact(out) {
            for (g, d) in db.iter_mut().zip(row) {
                *g += d;
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        LEAKY_SLOPE * x
    }
}

pub fn leaky_relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        LEAKY_SLOPE
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &[f64], n: usize, input: usize, w: &[f64], out: usize) -> Vec<f64> {
        let mut y = vec![0.0; n * out];
        for r in 0..n {
            for o in 0..out {
                y[r * out + o] = (0..input).map(|k| x[r * input + k] * w[o * input + k]).sum();
            }
        }
        y
    }

    #[test]
    fn kernels_match_naive_loops() {
        let (n, input, out) = (3, 5, 4);
        let x: Vec<f64> = (0..n * input).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..out * input).map(|i| (i as f64 * 0.11).cos()).collect();
        let b = vec![0.5; out];
        let mut y = vec![0.0; n * out];
        affine(&x, n, input, &w, &b, &mut y);
        let expect = naive(&x, n, input, &w, out);
        for (a, e) in y.iter().zip(&expect) {
            assert!((a - (e + 0.5)).abs() < 1e-12);
        }

        let dy: Vec<f64> = (0..n * out).map(|i| i as f64 - 3.0).collect();
        let mut dx = vec![0.0; n * input];
        matmul_nn(&dy, n, out, &w, input, &mut dx, false);
        for r in 0..n {
            for k in 0..input {
                let e: f64 = (0..out).map(|o| dy[r * out + o] * w[o * input + k]).sum();
                assert!((dx[r * input + k] - e).abs() < 1e-12);
            }
        }

        let mut dw = vec![0.0; out * input];
        let mut db = vec![0.0; out];
        accumulate_grads(&dy, n, out, &x, input, &mut dw, Some(&mut db));
        for o in 0..out {
            for k in 0..input {
                let e: f64 = (0..n).map(|r| dy[r * out + o] * x[r * input + k]).sum();
                assert!((dw[o * input + k] - e).abs() < 1e-12);
            }
            let e: f64 = (0..n).map(|r| dy[r * out + o]).sum();
            assert!((db[o] - e).abs() < 1e-12);
        }
    }

    #[test]
    fn row_count_does_not_change_results() {
        // Small batches take the dot-product path, larger ones dgemm.
        let (input, out) = (37, 9);
        let w: Vec<f64> = (0..out * input).map(|i| (i as f64 * 0.23).sin()).collect();
        for n in [1, 4, 5, 17] {
            let x: Vec<f64> = (0..n * input).map(|i| (i as f64 * 0.71).cos()).collect();
            let mut y = vec![0.0; n * out];
            matmul_nt_acc(&x, n, input, &w, out, &mut y);
            for (a, e) in y.iter().zip(naive(&x, n, input, &w, out)) {
                assert!((a - e).abs() < 1e-12, "n = {n}");
            }
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert!(sigmoid(800.0) <= 1.0);
    }
}
