//! Small differentiable building blocks shared by the relation and loss code.

use candle_core::{DType, Tensor, D};

use crate::error::{Error, Result};

/// Squared values at or below this are treated as exact zeros by [`safe_sqrt`].
pub(crate) const SQRT_FLOOR: f64 = 1e-24;

/// Row-wise log-softmax over the last dimension.
///
/// The row maximum is detached before shifting; the shift cancels analytically
/// so the gradient is unaffected.
pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(x)?.exp()?)
}

/// Square root with a zero subgradient at the origin.
///
/// Entries `<= SQRT_FLOOR` map to exactly 0 and receive no gradient, which keeps
/// norms of coincident points from producing `inf * 0` in the backward pass.
pub fn safe_sqrt(sq: &Tensor) -> Result<Tensor> {
    let mask = sq.gt(SQRT_FLOOR)?.to_dtype(sq.dtype())?;
    Ok(substitute_ones(sq, &mask)?.sqrt()?.mul(&mask)?)
}

/// `x` where `mask` is 1 and exactly 1 elsewhere, with no gradient flowing
/// into the replaced entries.
pub(crate) fn substitute_ones(x: &Tensor, mask: &Tensor) -> Result<Tensor> {
    Ok(x.mul(mask)?.add(&mask.affine(-1.0, 1.0)?)?)
}

/// Elementwise Huber penalty of `diff` with threshold `delta`.
pub fn huber(diff: &Tensor, delta: f64) -> Result<Tensor> {
    let abs = diff.abs()?;
    let quad = diff.sqr()?.affine(0.5, 0.0)?;
    let lin = abs.affine(delta, -0.5 * delta * delta)?;
    let small = abs.lt(delta)?;
    Ok(small.where_cond(&quad, &lin)?)
}

pub fn all_finite(t: &Tensor) -> Result<bool> {
    let v: Vec<f64> = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1()?;
    Ok(v.iter().all(|x| x.is_finite()))
}

pub(crate) fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if all_finite(t)? {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite values")))
    }
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

/// `out×in` row-stochastic matrix implementing 1-D bilinear resampling with
/// half-pixel centres (no corner alignment).
pub fn interpolation_matrix(input: usize, output: usize) -> Vec<f64> {
    let mut m = vec![0.0; output * input];
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let frac = src - i0 as f64;
        m[o * input + i0] += 1.0 - frac;
        m[o * input + i1] += frac;
    }
    m
}

/// Bilinear resize of a `B×K×H×W` tensor to `B×K×out_h×out_w`, expressed as two
/// matrix products so it stays differentiable.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (b, k, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize target must be non-empty"));
    }
    let dev = x.device();
    let mh = Tensor::from_vec(interpolation_matrix(h, out_h), (out_h, h), dev)?.to_dtype(x.dtype())?;
    let mw = Tensor::from_vec(interpolation_matrix(w, out_w), (out_w, w), dev)?
        .to_dtype(x.dtype())?
        .t()?;
    let flat = x.reshape((b * k, h, w))?;
    let rows = mh.broadcast_left(b * k)?.contiguous()?.matmul(&flat.contiguous()?)?;
    let out = rows.matmul(&mw.broadcast_left(b * k)?.contiguous()?)?;
    Ok(out.reshape((b, k, out_h, out_w))?)
}
