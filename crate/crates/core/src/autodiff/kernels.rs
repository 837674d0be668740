//! Numeric kernels behind the graph operations.

use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// `[1, n]` over `[m, n]`
    Row,
    /// `[m, 1]` over `[m, n]`
    Col,
    Scalar,
}

impl Broadcast {
    pub(crate) fn resolve(a: &[usize], b: &[usize]) -> Option<Self> {
        if a == b {
            return Some(Self::Same);
        }
        if b.iter().product::<usize>() == 1 {
            return Some(Self::Scalar);
        }
        if a.len() == 2 && b.len() == 2 {
            if b[0] == 1 && b[1] == a[1] {
                return Some(Self::Row);
            }
            if b[1] == 1 && b[0] == a[0] {
                return Some(Self::Col);
            }
        }
        None
    }
}

/// `C = op(A)·op(B) + beta·C` for row-major storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_transposed {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_transposed {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the asserts above guarantee every index addressed through the
    // given strides lies inside the slices.
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

pub(crate) fn zip_broadcast(
    a: &Tensor,
    b: &Tensor,
    kind: Broadcast,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    zip_broadcast_raw(a.data(), a.shape(), b, kind, f)
}

pub(crate) fn zip_broadcast_raw(
    a: &[f64],
    a_shape: &[usize],
    b: &Tensor,
    kind: Broadcast,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let bd = b.data();
    match kind {
        Broadcast::Same => a.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Scalar => a.iter().map(|&x| f(x, bd[0])).collect(),
        Broadcast::Row => {
            let n = a_shape[1];
            a.iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % n]))
                .collect()
        }
        Broadcast::Col => {
            let n = a_shape[1];
            a.iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i / n]))
                .collect()
        }
    }
}

/// Sums a gradient of shape `a_shape` down to the broadcast operand.
pub(crate) fn reduce_broadcast(
    g: &[f64],
    a_shape: &[usize],
    b_len: usize,
    kind: Broadcast,
) -> Vec<f64> {
    match kind {
        Broadcast::Same => g.to_vec(),
        Broadcast::Scalar => vec![g.iter().sum(); b_len],
        Broadcast::Row => {
            let n = a_shape[1];
            let mut out = vec![0.0; n];
            for row in g.chunks_exact(n) {
                axpy(&mut out, row);
            }
            out
        }
        Broadcast::Col => {
            let n = a_shape[1];
            g.chunks_exact(n).map(|row| row.iter().sum()).collect()
        }
    }
}

pub(crate) fn axpy(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
    out
}

pub(crate) fn softmax_backward(y: &[f64], g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks_exact(cols).zip(g.chunks_exact(cols)) {
        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
        out.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
    }
    out
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub(crate) fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}
