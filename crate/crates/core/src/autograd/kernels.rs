//! Forward and backward kernels for the graph operators.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Real, Tensor};

/// MSE values at or below this are treated as this value; caps PSNR at 120 dB.
pub const MSE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new<T: Real>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride < 1 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (is, ks) = (input.shape(), kernel.shape());
        if is.len() != 4 || ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {is:?} and kernel {ks:?} must be 4-d"),
            ));
        }
        if is[1] != ks[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {} vs kernel channels {}", is[1], ks[1]),
            ));
        }
        if bias.shape() != [ks[0]] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} output channels", bias.shape(), ks[0]),
            ));
        }
        let (h, w, kh, kw) = (is[2], is[3], ks[2], ks[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w}+{padding}"),
            ));
        }
        Ok(ConvGeom {
            n: is[0],
            cin: is[1],
            h,
            w,
            cout: ks[0],
            kh,
            kw,
            stride,
            padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.oh * self.ow
    }

    /// Maps output row `oy`, kernel row `ky` to an input row, if inside the image.
    #[inline]
    fn src(&self, o: usize, kk: usize, size: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }
}

/// Unfolds one image `[cin,h,w]` into `[cin·kh·kw, oh·ow]` columns.
fn im2col<T: Real>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    let hw = g.hw_out();
    for ci in 0..g.cin {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * hw;
                for oy in 0..g.oh {
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    match g.src(oy, ky, g.h) {
                        None => dst.fill(T::zero()),
                        Some(iy) => {
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = match g.src(ox, kx, g.w) {
                                    Some(ix) => plane[iy * g.w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image gradient.
fn col2im<T: Real>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    let hw = g.hw_out();
    for ci in 0..g.cin {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * hw;
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        continue;
                    };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.src(ox, kx, g.w) {
                            plane[iy * g.w + ix] = plane[iy * g.w + ix] + cols[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, kernel, bias, stride, padding)?;
    let (k, hw) = (g.k(), g.hw_out());
    let mut out = vec![T::zero(); g.n * g.cout * hw];
    let mut cols = vec![T::zero(); k * hw];
    let in_stride = g.cin * g.h * g.w;
    for n in 0..g.n {
        im2col(&g, &input.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
        let dst = &mut out[n * g.cout * hw..(n + 1) * g.cout * hw];
        for (c, row) in dst.chunks_mut(hw).enumerate() {
            row.fill(bias.data()[c]);
        }
        gemm(
            Mat::new(kernel.data(), g.cout, k),
            Mat::new(&cols, k, hw),
            T::one(),
            dst,
        );
    }
    Tensor::new(&[g.n, g.cout, g.oh, g.ow], out)
}

/// Gradients of a convolution: `(d_input, d_kernel, d_bias)`; `d_input` only when requested.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(input, kernel, bias, stride, padding)?;
    let (k, hw) = (g.k(), g.hw_out());
    let mut d_kernel = vec![T::zero(); g.cout * k];
    let mut d_bias = vec![T::zero(); g.cout];
    let mut d_input = want_input.then(|| vec![T::zero(); input.numel()]);
    let mut cols = vec![T::zero(); k * hw];
    let mut d_cols = vec![T::zero(); k * hw];
    let in_stride = g.cin * g.h * g.w;
    for n in 0..g.n {
        let go = &grad_out.data()[n * g.cout * hw..(n + 1) * g.cout * hw];
        for (c, row) in go.chunks(hw).enumerate() {
            d_bias[c] = d_bias[c] + row.iter().copied().sum();
        }
        im2col(&g, &input.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
        gemm(
            Mat::new(go, g.cout, hw),
            Mat::t(&cols, hw, k),
            T::one(),
            &mut d_kernel,
        );
        if let Some(d_in) = d_input.as_mut() {
            gemm(
                Mat::t(kernel.data(), k, g.cout),
                Mat::new(go, g.cout, hw),
                T::zero(),
                &mut d_cols,
            );
            col2im(&g, &d_cols, &mut d_in[n * in_stride..(n + 1) * in_stride]);
        }
    }
    Ok((
        d_input
            .map(|d| Tensor::new(input.shape(), d))
            .transpose()?,
        Tensor::new(kernel.shape(), d_kernel)?,
        Tensor::new(bias.shape(), d_bias)?,
    ))
}

/// Per-location statistics cached by the forward pass.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

fn nchw(t: &Tensor<impl Real>, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[n, c, h, w] => Ok((n, c, h * w)),
        s => Err(Error::shape(op, format!("expected NCHW, got {s:?}"))),
    }
}

/// Normalizes across channels at every spatial location.
pub fn layer_norm_forward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let (n, c, hw) = nchw(input, "layer_norm")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma {:?} beta {:?} for {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument("layer_norm eps must be > 0".into()));
    }
    let x = input.data();
    let inv_c = T::of(1.0 / c as f64);
    let mut mean = vec![T::zero(); n * hw];
    let mut rstd = vec![T::zero(); n * hw];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * c * hw;
        let m = &mut mean[b * hw..(b + 1) * hw];
        for ci in 0..c {
            for (acc, &v) in m.iter_mut().zip(&x[base + ci * hw..base + (ci + 1) * hw]) {
                *acc = *acc + v;
            }
        }
        m.iter_mut().for_each(|v| *v = *v * inv_c);
        let r = &mut rstd[b * hw..(b + 1) * hw];
        for ci in 0..c {
            let xs = &x[base + ci * hw..base + (ci + 1) * hw];
            for ((acc, &v), &mu) in r.iter_mut().zip(xs).zip(m.iter()) {
                *acc = *acc + (v - mu) * (v - mu);
            }
        }
        let e = T::of(eps);
        r.iter_mut().for_each(|v| *v = (*v * inv_c + e).sqrt().recip());
        for ci in 0..c {
            let (gm, bt) = (gamma.data()[ci], beta.data()[ci]);
            let range = base + ci * hw..base + (ci + 1) * hw;
            for (((o, &v), &mu), &rs) in out[range.clone()]
                .iter_mut()
                .zip(&x[range])
                .zip(m.iter())
                .zip(r.iter())
            {
                *o = gm * (v - mu) * rs + bt;
            }
        }
    }
    Ok((Tensor::new(input.shape(), out)?, NormStats { mean, rstd }))
}

/// `(d_input, d_gamma, d_beta)` of [`layer_norm_forward`].
pub fn layer_norm_backward<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, hw) = nchw(input, "layer_norm")?;
    let (x, dy) = (input.data(), grad_out.data());
    let inv_c = T::of(1.0 / c as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut s1 = vec![T::zero(); hw];
    let mut s2 = vec![T::zero(); hw];
    for b in 0..n {
        let base = b * c * hw;
        let m = &stats.mean[b * hw..(b + 1) * hw];
        let r = &stats.rstd[b * hw..(b + 1) * hw];
        s1.fill(T::zero());
        s2.fill(T::zero());
        for ci in 0..c {
            let gm = gamma.data()[ci];
            let (mut dg, mut db) = (T::zero(), T::zero());
            for p in 0..hw {
                let i = base + ci * hw + p;
                let xhat = (x[i] - m[p]) * r[p];
                let g = dy[i];
                dg = dg + g * xhat;
                db = db + g;
                let dxhat = g * gm;
                s1[p] = s1[p] + dxhat;
                s2[p] = s2[p] + dxhat * xhat;
            }
            dgamma[ci] = dgamma[ci] + dg;
            dbeta[ci] = dbeta[ci] + db;
        }
        for ci in 0..c {
            let gm = gamma.data()[ci];
            for p in 0..hw {
                let i = base + ci * hw + p;
                let xhat = (x[i] - m[p]) * r[p];
                let dxhat = dy[i] * gm;
                dx[i] = r[p] * (dxhat - s1[p] * inv_c - xhat * s2[p] * inv_c);
            }
        }
    }
    Ok((
        Tensor::new(input.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

/// Splits channels in half and multiplies the halves.
pub fn gate_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c2, hw) = nchw(input, "gate")?;
    if c2 % 2 != 0 {
        return Err(Error::shape("gate", format!("odd channel count {c2}")));
    }
    let c = c2 / 2;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * hw);
    for b in 0..n {
        let base = b * c2 * hw;
        let (lo, hi) = x[base..base + c2 * hw].split_at(c * hw);
        out.extend(lo.iter().zip(hi).map(|(&a, &g)| a * g));
    }
    let s = input.shape();
    Tensor::new(&[n, c, s[2], s[3]], out)
}

pub fn gate_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c2, hw) = nchw(input, "gate")?;
    let c = c2 / 2;
    let (x, dy) = (input.data(), grad_out.data());
    let mut dx = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * c2 * hw;
        let ob = b * c * hw;
        for i in 0..c * hw {
            let (a, g) = (x[base + i], x[base + c * hw + i]);
            dx[base + i] = dy[ob + i] * g;
            dx[base + c * hw + i] = dy[ob + i] * a;
        }
    }
    Tensor::new(input.shape(), dx)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2x_forward<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input.shape() else {
        return Err(Error::shape("upsample", format!("{:?}", input.shape())));
    };
    let x = input.data();
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                out[plane * oh * ow + oy * ow + ox] = x[plane * h * w + (oy / 2) * w + ox / 2];
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

pub fn upsample2x_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input.shape() else {
        return Err(Error::shape("upsample", format!("{:?}", input.shape())));
    };
    let dy = grad_out.data();
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); input.numel()];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let i = plane * h * w + (oy / 2) * w + ox / 2;
                dx[i] = dx[i] + dy[plane * oh * ow + oy * ow + ox];
            }
        }
    }
    Tensor::new(input.shape(), dx)
}

fn split_groups<T: Real>(pred: &Tensor<T>, groups: usize) -> Result<usize> {
    if groups == 0 || pred.numel() % groups != 0 || pred.dim(0) % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot split leading dimension {} into {groups} groups",
            pred.dim(0)
        )));
    }
    Ok(pred.numel() / groups)
}

/// Mean squared error of each of `groups` equal leading-axis slices.
pub fn group_mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, groups: usize) -> Result<Vec<f64>> {
    pred.expect_same_shape(target, "mse")?;
    let len = split_groups(pred, groups)?;
    Ok(pred
        .data()
        .chunks(len)
        .zip(target.data().chunks(len))
        .map(|(p, t)| {
            p.iter()
                .zip(t)
                .map(|(&a, &b)| {
                    let d = (a - b).f64();
                    d * d
                })
                .sum::<f64>()
                / len as f64
        })
        .collect())
}

/// Mean over groups of `-PSNR`, with MSE floored at [`MSE_FLOOR`].
pub fn psnr_loss_forward<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    max_val: f64,
    groups: usize,
) -> Result<T> {
    if max_val <= 0.0 {
        return Err(Error::InvalidArgument("max_val must be > 0".into()));
    }
    let mses = group_mse(pred, target, groups)?;
    let peak = 20.0 * max_val.log10();
    let loss = mses
        .iter()
        .map(|&m| -(peak - 10.0 * m.max(MSE_FLOOR).log10()))
        .sum::<f64>()
        / groups as f64;
    Ok(T::of(loss))
}

pub fn psnr_loss_backward<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    groups: usize,
    upstream: T,
) -> Result<Tensor<T>> {
    let mses = group_mse(pred, target, groups)?;
    let len = pred.numel() / groups;
    let mut grad = vec![T::zero(); pred.numel()];
    for (g, &mse) in mses.iter().enumerate() {
        if mse <= MSE_FLOOR {
            continue;
        }
        // d(10·log10 mse)/dmse · dmse/dp
        let coef = T::of(10.0 / std::f64::consts::LN_10 / mse * 2.0 / len as f64 / groups as f64);
        for i in g * len..(g + 1) * len {
            grad[i] = upstream * coef * (pred.data()[i] - target.data()[i]);
        }
    }
    Tensor::new(pred.shape(), grad)
}

pub fn l1_loss_forward<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    pred.expect_same_shape(target, "l1")?;
    let total: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum();
    Ok(total / T::of(pred.numel() as f64))
}

pub fn l1_loss_backward<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, upstream: T) -> Tensor<T> {
    let scale = upstream / T::of(pred.numel() as f64);
    pred.zip_map(target, |a, b| {
        if a > b {
            scale
        } else if a < b {
            -scale
        } else {
            T::zero()
        }
    })
    .expect("shapes checked in forward")
}
