//! Layer primitives with hand-written backward passes.
//!
//! Backward functions accumulate into their gradient outputs so callers can
//! sum over tokens and batches without temporaries.

/// out = W x + b with W stored row-major [out_dim][in_dim].
pub(crate) fn linear_forward(
    w: &[f64],
    b: &[f64],
    x: &[f64],
    out: &mut [f64],
    in_dim: usize,
    out_dim: usize,
) {
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = b[o];
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        out[o] = acc;
    }
}

/// Accumulates dx += W^T dout, dw += dout x^T, db += dout.
pub(crate) fn linear_backward(
    w: &[f64],
    x: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
    in_dim: usize,
    out_dim: usize,
) {
    for o in 0..out_dim {
        let g = dout[o];
        if g == 0.0 {
            continue;
        }
        if let Some(dx) = dx.as_deref_mut() {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            for (d, wi) in dx.iter_mut().zip(row) {
                *d += g * wi;
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            let row = &mut dw[o * in_dim..(o + 1) * in_dim];
            for (d, xi) in row.iter_mut().zip(x) {
                *d += g * xi;
            }
        }
        if let Some(db) = db.as_deref_mut() {
            db[o] += g;
        }
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct LnStats {
    pub mean: f64,
    pub rstd: f64,
}

/// y = gamma * (x - mean) / sqrt(var + eps) + beta over one vector.
pub(crate) fn layernorm_forward(
    gamma: &[f64],
    beta: &[f64],
    x: &[f64],
    out: &mut [f64],
) -> LnStats {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for ((o, xi), (g, b)) in out.iter_mut().zip(x).zip(gamma.iter().zip(beta)) {
        *o = g * (xi - mean) * rstd + b;
    }
    LnStats { mean, rstd }
}

/// Accumulates dx, dgamma, dbeta for one vector given the forward stats.
pub(crate) fn layernorm_backward(
    gamma: &[f64],
    x: &[f64],
    stats: LnStats,
    dout: &[f64],
    dx: &mut [f64],
    mut dgamma: Option<&mut [f64]>,
    mut dbeta: Option<&mut [f64]>,
) {
    let n = x.len() as f64;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for ((&g, &xi), &d) in gamma.iter().zip(x).zip(dout) {
        let xhat = (xi - stats.mean) * stats.rstd;
        let dxhat = d * g;
        m1 += dxhat;
        m2 += dxhat * xhat;
    }
    m1 /= n;
    m2 /= n;
    for i in 0..x.len() {
        let xhat = (x[i] - stats.mean) * stats.rstd;
        let dxhat = dout[i] * gamma[i];
        dx[i] += stats.rstd * (dxhat - m1 - xhat * m2);
        if let Some(dg) = dgamma.as_deref_mut() {
            dg[i] += dout[i] * xhat;
        }
        if let Some(db) = dbeta.as_deref_mut() {
            db[i] += dout[i];
        }
    }
}

const GELU_S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044715;

/// tanh-approximated GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_S * (x + GELU_C * x * x * x)).tanh())
}

/// Derivative of the same approximation.
pub(crate) fn gelu_deriv(x: f64) -> f64 {
    let u = GELU_S * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_S * (1.0 + 3.0 * GELU_C * x * x)
}

/// Numerically stable in-place softmax over one row.
pub(crate) fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// ds = a * (da - sum(da * a)) for post-softmax activations a.
pub(crate) fn softmax_backward(a: &[f64], da: &[f64], ds: &mut [f64]) {
    let dot: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
    for ((s, &ai), &di) in ds.iter_mut().zip(a).zip(da) {
        *s = ai * (di - dot);
    }
}
