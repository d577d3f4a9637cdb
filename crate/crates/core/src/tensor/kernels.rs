//! Forward kernels shared by the tape and the value-level API.

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// `out (+)= op(a) · op(b)` for row-major buffers, where `op` optionally
/// transposes. `a_dims`/`b_dims` are the stored (rows, cols).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_dims: (usize, usize),
    trans_a: bool,
    b: &[f64],
    b_dims: (usize, usize),
    trans_b: bool,
    out: &mut [f64],
    accumulate: bool,
) {
    let (m, k) = if trans_a { (a_dims.1, a_dims.0) } else { a_dims };
    let (k2, n) = if trans_b { (b_dims.1, b_dims.0) } else { b_dims };
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(a.len(), a_dims.0 * a_dims.1);
    assert_eq!(b.len(), b_dims.0 * b_dims.1);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, a_dims.1 as isize)
    } else {
        (a_dims.1 as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b_dims.1 as isize)
    } else {
        (b_dims.1 as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every stride/extent pair was checked against the buffer
    // lengths above, so all accessed offsets are in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// (outer, extent, inner) strides for reducing over `axis`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stabilized softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(shape_err(
            "softmax",
            format!("axis {axis} out of range for rank {}", x.rank()),
        ));
    }
    if !x.is_finite() {
        return Err(Error::NonFinite);
    }
    let (outer, n, inner) = axis_layout(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..n {
                max = max.max(src[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..n {
                let e = (src[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..n {
                out[base + j * inner] /= sum;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub(crate) struct LayerNormOut {
    pub out: Vec<f64>,
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> Result<LayerNormOut> {
    let c = *x.shape().last().unwrap_or(&0);
    if c == 0 || gamma.len() != c || beta.len() != c {
        return Err(shape_err(
            "layer_norm",
            format!(
                "{c} channels but gamma/beta have {}/{}",
                gamma.len(),
                beta.len()
            ),
        ));
    }
    let rows = x.len() / c;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let mut xhat = vec![0.0; src.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &src[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let s = 1.0 / (var + eps).sqrt();
        rstd[r] = s;
        for j in 0..c {
            let h = (row[j] - mean) * s;
            xhat[r * c + j] = h;
            out[r * c + j] = h * gamma[j] + beta[j];
        }
    }
    Ok(LayerNormOut { out, xhat, rstd })
}

/// Layer normalization over the last axis with affine `gamma`/`beta`.
pub fn layer_norm_rows(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let res = layer_norm_forward(x, gamma.data(), beta.data(), eps)?;
    Tensor::new(x.shape().to_vec(), res.out)
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_closed_form() {
        let y = softmax(&Tensor::new(vec![3], vec![0.0; 3]).unwrap(), 0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = softmax(&Tensor::new(vec![2], vec![0.0, 2f64.ln()]).unwrap(), 0).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        let err = softmax(&x, 0).unwrap_err();
        assert_eq!(err.to_string(), "tensor: non-finite input");
    }

    #[test]
    fn softmax_middle_axis_sums_to_one() {
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let x = Tensor::new(vec![2, 3, 4], data).unwrap();
        let y = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| y.data()[o * 12 + j * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_basic_cases() {
        let g = Tensor::filled(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let x = Tensor::matrix(1, 4, vec![3.0; 4]).unwrap();
        let y = layer_norm_rows(&x, &g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));

        let g = Tensor::filled(&[2], 1.0);
        let b = Tensor::zeros(&[2]);
        let x = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        let y = layer_norm_rows(&x, &g, &b, 0.0).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);
    }

    #[test]
    fn layer_norm_channel_mismatch() {
        let x = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let g = Tensor::filled(&[4], 1.0);
        assert!(layer_norm_rows(&x, &g, &g, 1e-5).is_err());
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        gemm(&a, (2, 2), true, &b, (2, 2), false, &mut out, false);
        assert_eq!(out, [26.0, 30.0, 38.0, 44.0]);
        gemm(&a, (2, 2), false, &b, (2, 2), true, &mut out, false);
        assert_eq!(out, [17.0, 23.0, 39.0, 53.0]);
        gemm(&a, (2, 2), false, &b, (2, 2), false, &mut out, true);
        assert_eq!(out, [17.0 + 19.0, 23.0 + 22.0, 39.0 + 43.0, 53.0 + 50.0]);
    }
}
