//! Dense kernels for the toy model. Matrices are row-major; weights are
//! `[out, in]`.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c = alpha · a·b + beta · c` for row-major `a: [m, k]` (or its transpose
/// when `a_t`), `b: [k, n]` (or its transpose when `b_t`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserted lengths cover every index the strides reach.
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
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `y[t, o] = Σ_i x[t, i] · w[o, i]`
pub fn linear(x: &[f64], w: &[f64], rows: usize, input: usize, output: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * output];
    gemm(rows, input, output, &x[..rows * input], false, &w[..output * input], true, 0.0, &mut y);
    y
}

/// Backward of [`linear`]. Accumulates `dx += dy · w`, and when `dw` is
/// given, `dw[o] += Σ_t dy[t, o] · x[t]` for the rows `trainable` admits.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    rows: usize,
    input: usize,
    output: usize,
    dx: &mut [f64],
    dw: Option<&mut [f64]>,
    trainable: Option<&[bool]>,
) {
    gemm(rows, output, input, dy, false, &w[..output * input], false, 1.0, &mut dx[..rows * input]);
    let Some(dw) = dw else { return };
    // dyᵀ restricted to each run of trainable rows.
    let mut dyt = vec![0.0; output * rows];
    for t in 0..rows {
        for o in 0..output {
            dyt[o * rows + t] = dy[t * output + o];
        }
    }
    let mut o = 0;
    while o < output {
        if trainable.is_some_and(|m| !m[o]) {
            o += 1;
            continue;
        }
        let start = o;
        while o < output && trainable.is_none_or(|m| m[o]) {
            o += 1;
        }
        gemm(
            o - start,
            rows,
            input,
            &dyt[start * rows..o * rows],
            false,
            &x[..rows * input],
            false,
            1.0,
            &mut dw[start * input..o * input],
        );
    }
}

pub(crate) const NORM_EPS: f64 = 1e-5;

/// RMS normalization with a learned scale. Returns the output and the
/// per-row inverse RMS.
pub fn rmsnorm(x: &[f64], scale: &[f64], rows: usize, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut y = vec![0.0; rows * dim];
    let mut inv = vec![0.0; rows];
    for t in 0..rows {
        let xr = &x[t * dim..(t + 1) * dim];
        let r = 1.0 / (dot(xr, xr) / dim as f64 + NORM_EPS).sqrt();
        inv[t] = r;
        for ((yi, &xi), &g) in y[t * dim..(t + 1) * dim].iter_mut().zip(xr).zip(scale) {
            *yi = xi * r * g;
        }
    }
    (y, inv)
}

#[allow(clippy::too_many_arguments)]
pub fn rmsnorm_backward(
    dy: &[f64],
    x: &[f64],
    inv: &[f64],
    scale: &[f64],
    rows: usize,
    dim: usize,
    dx: &mut [f64],
    dscale: &mut [f64],
) {
    let mut z = vec![0.0; dim];
    for t in 0..rows {
        let xr = &x[t * dim..(t + 1) * dim];
        let dyr = &dy[t * dim..(t + 1) * dim];
        let r = inv[t];
        for i in 0..dim {
            dscale[i] += dyr[i] * xr[i] * r;
            z[i] = dyr[i] * scale[i];
        }
        let coef = r * r * r * dot(&z, xr) / dim as f64;
        for (i, d) in dx[t * dim..(t + 1) * dim].iter_mut().enumerate() {
            *d += r * z[i] - coef * xr[i];
        }
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x · Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}
