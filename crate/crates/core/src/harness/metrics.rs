//! PSNR on RGB or on the BT.601 luma plane.

use serde::{Deserialize, Serialize};

use crate::autograd::kernels::group_mse;
use crate::autograd::MSE_FLOOR;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Rgb,
    Y,
}

/// `Y = 0.299R + 0.587G + 0.114B` of a `[3,H,W]` or `[N,3,H,W]` image.
pub fn luma<T: Real>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = img.shape();
    let c_axis = shape.len().checked_sub(3).filter(|_| shape.len() <= 4);
    let Some(c_axis) = c_axis.filter(|&a| shape[a] == 3) else {
        return Err(Error::shape("luma", format!("expected [..,3,H,W], got {shape:?}")));
    };
    let plane = shape[c_axis + 1] * shape[c_axis + 2];
    let n = if c_axis == 1 { shape[0] } else { 1 };
    let w = [0.299, 0.587, 0.114].map(T::of);
    let x = img.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let base = b * 3 * plane;
        for i in 0..plane {
            out.push(w[0] * x[base + i] + w[1] * x[base + plane + i] + w[2] * x[base + 2 * plane + i]);
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape[c_axis] = 1;
    Tensor::new(&out_shape, out)
}

/// PSNR in dB for signals in `[0,1]`, capped where the loss is (MSE floor).
pub fn psnr_metric<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, domain: Domain) -> Result<f64> {
    pred.expect_same_shape(target, "psnr")?;
    let mse = match domain {
        Domain::Rgb => group_mse(pred, target, 1)?[0],
        Domain::Y => group_mse(&luma(pred)?, &luma(target)?, 1)?[0],
    };
    Ok(-10.0 * mse.max(MSE_FLOOR).log10())
}
