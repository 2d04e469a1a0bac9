//! Isotropic blur kernels, motion trajectories and reflect-padded filtering.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Radial profile of an isotropic blur kernel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum BlurFamily {
    Gaussian,
    /// `exp(-½ (r²/σ²)^shape)`
    Generalized { shape: f64 },
    /// `1 / (1 + (r²/σ²)^shape)`
    Plateau { shape: f64 },
}

/// Normalized `size×size` kernel, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    fn normalized(size: usize, mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::OutOfDomain("kernel has no mass".into()));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Kernel { size, weights })
    }
}

pub fn isotropic_kernel(size: usize, sigma: f64, family: BlurFamily) -> Result<Kernel> {
    let c = (size as f64 - 1.0) / 2.0;
    let s2 = sigma * sigma;
    let mut w = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let r2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            let q = r2 / s2;
            w.push(match family {
                BlurFamily::Gaussian => (-0.5 * q).exp(),
                BlurFamily::Generalized { shape } => (-0.5 * q.powf(shape)).exp(),
                BlurFamily::Plateau { shape } => 1.0 / (1.0 + q.powf(shape)),
            });
        }
    }
    Kernel::normalized(size, w)
}

/// Rasterizes a polyline (coordinates relative to the kernel centre) with bilinear splatting.
pub fn motion_kernel(size: usize, trajectory: &[[f64; 2]]) -> Result<Kernel> {
    if trajectory.is_empty() {
        return Err(Error::OutOfDomain("motion trajectory needs at least one vertex".into()));
    }
    let c = (size as f64 - 1.0) / 2.0;
    if trajectory
        .iter()
        .any(|p| !(p[0].abs() <= c && p[1].abs() <= c))
    {
        return Err(Error::OutOfDomain(format!(
            "motion trajectory leaves the {size}x{size} kernel"
        )));
    }
    let mut w = vec![0.0; size * size];
    let mut splat = |x: f64, y: f64| {
        let (fx, fy) = (x + c, y + c);
        let (x0, y0) = (fx.floor(), fy.floor());
        let (ax, ay) = (fx - x0, fy - y0);
        for (dx, wx) in [(0, 1.0 - ax), (1, ax)] {
            for (dy, wy) in [(0, 1.0 - ay), (1, ay)] {
                let (xi, yi) = (x0 as isize + dx, y0 as isize + dy);
                if xi >= 0 && yi >= 0 && (xi as usize) < size && (yi as usize) < size {
                    w[yi as usize * size + xi as usize] += wx * wy;
                }
            }
        }
    };
    if trajectory.len() == 1 {
        splat(trajectory[0][0], trajectory[0][1]);
    }
    for seg in trajectory.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let steps = ((len * 4.0).ceil() as usize).max(1);
        for s in 0..steps {
            let t = (s as f64 + 0.5) / steps as f64;
            splat(a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]));
        }
    }
    Kernel::normalized(size, w)
}

/// Mirror index without repeating the edge sample.
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Filters every channel of a `[C,H,W]` image with `kernel`, reflect padding.
/// Each side must exceed the kernel radius.
pub fn filter(img: &Tensor<f32>, kernel: &Kernel) -> Result<Tensor<f32>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::shape("filter", format!("expected CHW, got {:?}", img.shape())));
    };
    let r = kernel.size / 2;
    // reflection needs more samples than the kernel radius
    if h <= r || w <= r {
        return Err(Error::InvalidArgument(format!(
            "image {h}x{w} too small for a {0}x{0} kernel",
            kernel.size
        )));
    }
    let r = r as isize;
    let x = img.data();
    let mut out = vec![0.0f32; x.len()];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0f64;
                for ky in 0..kernel.size {
                    let sy = reflect(y as isize + ky as isize - r, h);
                    let row = &kernel.weights[ky * kernel.size..(ky + 1) * kernel.size];
                    for (kx, &kw) in row.iter().enumerate() {
                        if kw == 0.0 {
                            continue;
                        }
                        let sx = reflect(xx as isize + kx as isize - r, w);
                        acc += kw * f64::from(plane[sy * w + sx]);
                    }
                }
                out[ch * h * w + y * w + xx] = acc as f32;
            }
        }
    }
    Tensor::new(img.shape(), out)
}
