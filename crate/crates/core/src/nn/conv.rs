//! Dense convolutions lowered to gather + matmul.
//!
//! candle 0.9's `conv1d`/`conv2d` backward produces wrong weight gradients
//! once both the batch and the output channel count exceed one, so every
//! trainable dense convolution goes through these instead. Forward results
//! match the candle kernels.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Frames `start, start + step, ...` (`count` of them) along `dim`.
fn strided(x: &Tensor, dim: usize, start: usize, step: usize, count: usize) -> Result<Tensor> {
    if step == 1 {
        return Ok(x.narrow(dim, start, count)?);
    }
    let idx: Vec<u32> = (0..count).map(|i| (start + i * step) as u32).collect();
    Ok(x.index_select(&Tensor::from_vec(idx, count, x.device())?, dim)?)
}

/// Output length of a valid (unpadded) convolution.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, dilation: usize) -> Option<usize> {
    let span = (kernel - 1) * dilation + 1;
    (len >= span).then(|| (len - span) / stride + 1)
}

/// `x` `[N, C_in, T]`, `w` `[C_out, C_in, K]` -> `[N, C_out, T_out]` with
/// zero padding on both sides.
pub fn conv1d(x: &Tensor, w: &Tensor, padding: usize, stride: usize, dilation: usize) -> Result<Tensor> {
    let (n, cin, _) = x.dims3()?;
    let (cout, wcin, k) = w.dims3()?;
    if cin != wcin {
        return Err(Error::Shape(format!("conv1d: input has {cin} channels, weight expects {wcin}")));
    }
    let x = if padding > 0 { x.pad_with_zeros(2, padding, padding)? } else { x.clone() };
    let t = x.dim(2)?;
    let t_out = conv_out_len(t, k, stride, dilation)
        .ok_or_else(|| Error::Shape(format!("conv1d: length {t} shorter than kernel span")))?;
    // Columns ordered (tap, channel) to match the permuted weight below.
    let cols = (0..k)
        .map(|j| strided(&x, 2, j * dilation, stride, t_out))
        .collect::<Result<Vec<_>>>()?;
    let cols = Tensor::cat(&cols, 1)?; // [N, K * C_in, T_out]
    let w = w.permute((0, 2, 1))?.reshape((cout, k * cin))?;
    let y = w.broadcast_matmul(&cols)?;
    debug_assert_eq!(y.dims(), &[n, cout, t_out]);
    Ok(y)
}

/// `x` `[N, C_in, H, W]`, `w` `[C_out, C_in, K, K]`, stride 1, symmetric
/// zero padding -> `[N, C_out, H', W']`.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize) -> Result<Tensor> {
    let (n, cin, _, _) = x.dims4()?;
    let (cout, wcin, kh, kw) = w.dims4()?;
    if cin != wcin {
        return Err(Error::Shape(format!("conv2d: input has {cin} channels, weight expects {wcin}")));
    }
    let x = if padding > 0 {
        x.pad_with_zeros(2, padding, padding)?.pad_with_zeros(3, padding, padding)?
    } else {
        x.clone()
    };
    let (h, wd) = (x.dim(2)?, x.dim(3)?);
    let err = || Error::Shape(format!("conv2d: input {h}x{wd} smaller than kernel {kh}x{kw}"));
    let h_out = conv_out_len(h, kh, 1, 1).ok_or_else(err)?;
    let w_out = conv_out_len(wd, kw, 1, 1).ok_or_else(err)?;
    let mut cols = Vec::with_capacity(kh * kw);
    for a in 0..kh {
        let rows = x.narrow(2, a, h_out)?;
        for b in 0..kw {
            cols.push(rows.narrow(3, b, w_out)?);
        }
    }
    let cols = Tensor::cat(&cols, 1)?.reshape((n, kh * kw * cin, h_out * w_out))?;
    let w = w.permute((0, 2, 3, 1))?.reshape((cout, kh * kw * cin))?;
    Ok(w.broadcast_matmul(&cols)?.reshape((n, cout, h_out, w_out))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn conv1d_forward_matches_candle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (n, cin, cout, t, k, pad, stride, dil) in
            [(2, 3, 4, 17, 3, 1, 1, 1), (3, 2, 5, 20, 5, 2, 2, 1), (1, 4, 2, 30, 3, 0, 1, 3), (2, 1, 1, 9, 1, 0, 3, 1)]
        {
            let x = rand(&[n, cin, t], &mut rng);
            let w = rand(&[cout, cin, k], &mut rng);
            let ours = vals(&conv1d(&x, &w, pad, stride, dil).unwrap());
            let theirs = vals(&x.conv1d(&w, pad, stride, dil, 1).unwrap());
            assert_eq!(ours.len(), theirs.len());
            for (a, b) in ours.iter().zip(&theirs) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_forward_matches_candle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand(&[2, 3, 7, 6], &mut rng);
        let w = rand(&[4, 3, 5, 5], &mut rng);
        let ours = vals(&conv2d(&x, &w, 2).unwrap());
        let theirs = vals(&x.conv2d(&w, 2, 1, 1, 1).unwrap());
        for (a, b) in ours.iter().zip(&theirs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn check_grad(shape: &[usize], rng: &mut ChaCha8Rng, f: impl Fn(&Tensor) -> Tensor) {
        let w = Var::from_tensor(&rand(shape, rng)).unwrap();
        let g = vals(f(w.as_tensor()).backward().unwrap().get(&w).unwrap());
        let base = vals(w.as_tensor());
        for i in 0..base.len() {
            let at = |d: f64| {
                let mut v = base.clone();
                v[i] += d;
                let l = f(&Tensor::from_vec(v, shape, &Device::Cpu).unwrap());
                l.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
            };
            let fd = (at(1e-6) - at(-1e-6)) / 2e-6;
            assert!((g[i] - fd).abs() < 1e-7, "{shape:?}[{i}]: {} vs {fd}", g[i]);
        }
    }

    /// Batch and output channels above one: the case candle gets wrong.
    #[test]
    fn weight_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x1 = rand(&[3, 2, 11], &mut rng);
        let x2 = rand(&[2, 2, 5, 6], &mut rng);
        let probe = rand(&[400], &mut rng);
        let weighted = |y: Tensor| {
            let m = y.elem_count();
            (y.flatten_all().unwrap() * probe.narrow(0, 0, m).unwrap())
                .unwrap()
                .sum_all()
                .unwrap()
        };
        check_grad(&[4, 2, 3], &mut rng, |w| weighted(conv1d(&x1, w, 1, 2, 1).unwrap()));
        check_grad(&[3, 2, 3, 3], &mut rng, |w| weighted(conv2d(&x2, w, 1).unwrap()));
    }
}
