//! Differentiable primitives.
//!
//! Each forward has an explicit backward taking the output cotangent and
//! returning input (and parameter) gradients. There is no tape: the network
//! module composes these by hand and the finite-difference oracle in
//! [`super::gradcheck`] certifies every composition.
//!
//! All kernels accumulate each output element in a fixed (ascending index)
//! order, so parallel and sequential execution are bitwise identical.

use crate::error::{Error, Result};
use crate::exec;
use crate::numcore::Tensor;

/// `a (M×K) · b (K×N)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(Error::Shape(format!("matmul: {m}×{k} · {kb}×{n}")));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    exec::for_each_chunk_mut(&mut out, n.max(1), k, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `a (M×K) · bᵀ (K×N)` where `b` is stored N×K.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if k != kb {
        return Err(Error::Shape(format!("matmul_nt: {m}×{k} · ({n}×{kb})ᵀ")));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    exec::for_each_chunk_mut(&mut out, n.max(1), k, |i, row| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    });
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `aᵀ (K×M) · b (K×N)` where `a` is stored K×M.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(Error::Shape(format!("matmul_tn: ({k}×{m})ᵀ · {kb}×{n}")));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    // out[j][l] = Σ_i a[i][j] b[i][l], i ascending for every element.
    exec::for_each_chunk_mut(&mut out, n.max(1), k, |j, row| {
        for i in 0..k {
            let av = ad[i * m + j];
            let brow = &bd[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `x (M×I) · w (I×O) + b (O)`.
pub fn linear_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, o) = w.dims2()?;
    if b.shape() != [o] {
        return Err(Error::Shape(format!(
            "linear bias {:?} vs out width {o}",
            b.shape()
        )));
    }
    let mut y = matmul(x, w)?;
    let (rows, cols) = y.dims2()?;
    let bd = b.data().to_vec();
    exec::for_each_chunk_mut(y.data_mut(), cols, 1, |_, row| {
        for (v, &bv) in row.iter_mut().zip(&bd) {
            *v += bv;
        }
    });
    let _ = rows;
    Ok(y)
}

/// Gradients of [`linear_forward`]: returns `(dx, dw, db)`.
pub fn linear_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let dx = matmul_nt(dy, w)?;
    let dw = matmul_tn(x, dy)?;
    let db = col_sums(dy)?;
    Ok((dx, dw, db))
}

/// Column sums (rows accumulated in ascending order).
pub fn col_sums(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        for (o, &v) in out.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    Ok(Tensor::from_parts(vec![cols], out))
}

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.dims2()?;
    if cols == 0 {
        return Err(Error::EmptyInput("softmax over zero columns".into()));
    }
    let mut y = x.clone();
    exec::for_each_chunk_mut(y.data_mut(), cols, 4, |_, row| {
        softmax_in_place(row);
    });
    let _ = rows;
    Ok(y)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Backward of row-wise softmax given its output `y`:
/// `dx = y ⊙ (dy − Σ_j dy_j y_j)` per row.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let (rows, cols) = y.dims2()?;
    if y.shape() != dy.shape() {
        return Err(Error::Shape("softmax backward: y/dy mismatch".into()));
    }
    let mut dx = vec![0.0; rows * cols];
    let (yd, dyd) = (y.data(), dy.data());
    exec::for_each_chunk_mut(&mut dx, cols, 4, |i, drow| {
        let yr = &yd[i * cols..(i + 1) * cols];
        let dyr = &dyd[i * cols..(i + 1) * cols];
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &dyv) in drow.iter_mut().zip(yr).zip(dyr) {
            *o = yv * (dyv - dot);
        }
    });
    Ok(Tensor::from_parts(vec![rows, cols], dx))
}

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Per-row statistics cached by [`layernorm_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Row-wise layer normalization with learned gain/bias.
pub fn layernorm_forward(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, LayerNormCache)> {
    let (rows, cols) = x.dims2()?;
    if gain.shape() != [cols] || bias.shape() != [cols] {
        return Err(Error::Shape(format!(
            "layernorm params {:?}/{:?} vs width {cols}",
            gain.shape(),
            bias.shape()
        )));
    }
    let mut y = vec![0.0; rows * cols];
    let mut mean = vec![0.0; rows];
    let mut rstd = vec![0.0; rows];
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    // Stats are tiny; compute them serially, then fill rows (possibly parallel).
    for i in 0..rows {
        let xr = &xd[i * cols..(i + 1) * cols];
        let m: f64 = xr.iter().sum::<f64>() / cols as f64;
        let var: f64 = xr.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / cols as f64;
        mean[i] = m;
        rstd[i] = 1.0 / (var + LAYERNORM_EPS).sqrt();
    }
    exec::for_each_chunk_mut(&mut y, cols, 2, |i, row| {
        let xr = &xd[i * cols..(i + 1) * cols];
        let (m, rs) = (mean[i], rstd[i]);
        for (j, o) in row.iter_mut().enumerate() {
            *o = gd[j] * ((xr[j] - m) * rs) + bd[j];
        }
    });
    Ok((Tensor::from_parts(vec![rows, cols], y), LayerNormCache { mean, rstd }))
}

/// Gradients of [`layernorm_forward`]: returns `(dx, dgain, dbias)`.
pub fn layernorm_backward(
    x: &Tensor,
    gain: &Tensor,
    cache: &LayerNormCache,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, cols) = x.dims2()?;
    if dy.shape() != x.shape() {
        return Err(Error::Shape("layernorm backward: x/dy mismatch".into()));
    }
    let xd = x.data();
    let dyd = dy.data();
    let gd = gain.data();
    let mut dx = vec![0.0; rows * cols];
    let mut dgain = vec![0.0; cols];
    let mut dbias = vec![0.0; cols];
    for i in 0..rows {
        let xr = &xd[i * cols..(i + 1) * cols];
        let dyr = &dyd[i * cols..(i + 1) * cols];
        let (m, rs) = (cache.mean[i], cache.rstd[i]);
        for j in 0..cols {
            let xhat = (xr[j] - m) * rs;
            dgain[j] += dyr[j] * xhat;
            dbias[j] += dyr[j];
        }
    }
    exec::for_each_chunk_mut(&mut dx, cols, 4, |i, drow| {
        let xr = &xd[i * cols..(i + 1) * cols];
        let dyr = &dyd[i * cols..(i + 1) * cols];
        let (m, rs) = (cache.mean[i], cache.rstd[i]);
        let inv_n = 1.0 / cols as f64;
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..cols {
            let xhat = (xr[j] - m) * rs;
            let dxhat = dyr[j] * gd[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat *= inv_n;
        mean_dxhat_xhat *= inv_n;
        for (j, o) in drow.iter_mut().enumerate() {
            let xhat = (xr[j] - m) * rs;
            let dxhat = dyr[j] * gd[j];
            *o = rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    });
    Ok((
        Tensor::from_parts(vec![rows, cols], dx),
        Tensor::from_parts(vec![cols], dgain),
        Tensor::from_parts(vec![cols], dbias),
    ))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044715;

/// GELU, tanh approximation (smooth, so finite differences behave).
pub fn gelu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        let u = GELU_C * (*v + GELU_A * *v * *v * *v);
        *v = 0.5 * *v * (1.0 + u.tanh());
    }
    y
}

pub fn gelu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(Error::Shape("gelu backward: x/dy mismatch".into()));
    }
    let mut dx = x.clone();
    for (v, &g) in dx.data_mut().iter_mut().zip(dy.data()) {
        let xv = *v;
        let u = GELU_C * (xv + GELU_A * xv * xv * xv);
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * GELU_A * xv * xv);
        *v = g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du);
    }
    Ok(dx)
}

/// Row-wise L2 normalization. Returns the unit-norm rows and the input norms.
/// A (near-)zero row has no direction and is a numeric error.
pub fn l2_normalize_rows(x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
    let (rows, cols) = x.dims2()?;
    let mut y = x.clone();
    let mut norms = vec![0.0; rows];
    for i in 0..rows {
        let n = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n.is_finite() && n > 1e-30) {
            return Err(Error::Numeric(format!("zero-norm row {i} in l2_normalize")));
        }
        norms[i] = n;
        let inv = 1.0 / n;
        for v in y.row_mut(i) {
            *v *= inv;
        }
    }
    let _ = cols;
    Ok((y, norms))
}

/// Backward of [`l2_normalize_rows`]: `dx = (dy − y (y·dy)) / ‖x‖` per row.
pub fn l2_normalize_rows_backward(y: &Tensor, norms: &[f64], dy: &Tensor) -> Result<Tensor> {
    let (rows, cols) = y.dims2()?;
    if dy.shape() != y.shape() || norms.len() != rows {
        return Err(Error::Shape("l2 normalize backward: shape mismatch".into()));
    }
    let mut dx = vec![0.0; rows * cols];
    let (yd, dyd) = (y.data(), dy.data());
    exec::for_each_chunk_mut(&mut dx, cols, 3, |i, drow| {
        let yr = &yd[i * cols..(i + 1) * cols];
        let dyr = &dyd[i * cols..(i + 1) * cols];
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        let inv = 1.0 / norms[i];
        for ((o, &yv), &dyv) in drow.iter_mut().zip(yr).zip(dyr) {
            *o = (dyv - yv * dot) * inv;
        }
    });
    Ok(Tensor::from_parts(vec![rows, cols], dx))
}

/// Column-wise concatenation of two matrices with equal row counts.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ra, ca) = a.dims2()?;
    let (rb, cb) = b.dims2()?;
    if ra != rb {
        return Err(Error::Shape(format!("concat_cols: {ra} vs {rb} rows")));
    }
    let mut out = vec![0.0; ra * (ca + cb)];
    for i in 0..ra {
        out[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(a.row(i));
        out[i * (ca + cb) + ca..(i + 1) * (ca + cb)].copy_from_slice(b.row(i));
    }
    Ok(Tensor::from_parts(vec![ra, ca + cb], out))
}

/// Inverse of [`concat_cols`]: split after `ca` columns.
pub fn split_cols(x: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let (rows, cols) = x.dims2()?;
    if ca > cols {
        return Err(Error::Shape(format!("split_cols at {ca} of {cols}")));
    }
    let cb = cols - ca;
    let mut a = vec![0.0; rows * ca];
    let mut b = vec![0.0; rows * cb];
    for i in 0..rows {
        let r = x.row(i);
        a[i * ca..(i + 1) * ca].copy_from_slice(&r[..ca]);
        b[i * cb..(i + 1) * cb].copy_from_slice(&r[ca..]);
    }
    Ok((
        Tensor::from_parts(vec![rows, ca], a),
        Tensor::from_parts(vec![rows, cb], b),
    ))
}

/// Elementwise sum.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(&[3, 2], &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 1.0, -1.0]);
        let bt = t(&[4, 3], &[1.0, 0.0, 2.0, -1.0, 1.0, 0.5, 2.0, 2.0, 2.0, 0.0, -3.0, 1.0]);
        // a·bᵀ via matmul_nt must equal matmul against the explicit transpose.
        let mut b = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                b[j * 4 + i] = bt.data()[i * 3 + j];
            }
        }
        let b = t(&[3, 4], &b);
        let c1 = matmul_nt(&a, &bt).unwrap();
        let c2 = matmul(&a, &b).unwrap();
        assert_eq!(c1.data(), c2.data());

        // aᵀ·b via matmul_tn.
        let c3 = matmul_tn(&a, &a).unwrap(); // 3×3 gram
        for i in 0..3 {
            for j in 0..3 {
                let want = a.data()[i] * a.data()[j] + a.data()[3 + i] * a.data()[3 + j];
                assert!((c3.data()[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_identity_passthrough() {
        // identity weight, zero bias → input unchanged
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let w = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2], &[0.0, 0.0]);
        let y = linear_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let x = t(&[1, 5], &[3.2; 5]);
        let y = softmax_rows(&x).unwrap();
        for &v in y.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = t(&[3, 4], &[0.1, -2.0, 5.0, 1.0, 0.0, 0.0, 0.0, 0.0, -9.0, 3.0, 2.0, 1.0]);
        let y = softmax_rows(&x).unwrap();
        for i in 0..3 {
            let s: f64 = y.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = t(&[1, 4], &[0.3, -1.2, 2.0, 0.7]);
        let shifted = t(&[1, 4], &[0.3 + 11.0, -1.2 + 11.0, 2.0 + 11.0, 0.7 + 11.0]);
        let a = softmax_rows(&x).unwrap();
        let b = softmax_rows(&shifted).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_rows_are_normalized() {
        let x = t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 10.0]);
        let g = t(&[4], &[1.0; 4]);
        let b = t(&[4], &[0.0; 4]);
        let (y, _) = layernorm_forward(&x, &g, &b).unwrap();
        for i in 0..2 {
            let m: f64 = y.row(i).iter().sum::<f64>() / 4.0;
            let v: f64 = y.row(i).iter().map(|u| (u - m) * (u - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4); // eps-regularized
        }
    }

    #[test]
    fn l2_normalize_unit_rows_and_zero_row_error() {
        let x = t(&[2, 3], &[3.0, 0.0, 4.0, 1.0, 1.0, 1.0]);
        let (y, norms) = l2_normalize_rows(&x).unwrap();
        assert!((norms[0] - 5.0).abs() < 1e-12);
        for i in 0..2 {
            let n: f64 = y.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let z = t(&[1, 3], &[0.0, 0.0, 0.0]);
        assert!(matches!(l2_normalize_rows(&z), Err(Error::Numeric(_))));
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = t(&[2, 2], &[1.0, 2.0, 5.0, 6.0]);
        let b = t(&[2, 3], &[3.0, 4.0, 4.5, 7.0, 8.0, 8.5]);
        let c = concat_cols(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 5]);
        let (a2, b2) = split_cols(&c, 2).unwrap();
        assert_eq!(a2.data(), a.data());
        assert_eq!(b2.data(), b.data());
    }
}
