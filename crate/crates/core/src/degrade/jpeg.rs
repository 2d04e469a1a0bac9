//! Lossy half of a baseline JPEG round trip: colour transform, 8×8 DCT,
//! quantization with IJG-scaled tables, and the inverse path. Entropy coding
//! is lossless and therefore skipped.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[rustfmt::skip]
const LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
];

#[rustfmt::skip]
const CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// IJG quality scaling of a base table.
pub fn scaled_table(base: &[u16; 64], quality: u8) -> [f64; 64] {
    let q = i64::from(quality.clamp(1, 100));
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((i64::from(b) * scale + 50) / 100).clamp(1, 255) as f64;
    }
    out
}

/// `cos((2x+1)uπ/16)·c(u)/2` indexed `[u][x]`.
fn dct_basis() -> &'static [[f64; 8]; 8] {
    static BASIS: OnceLock<[[f64; 8]; 8]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; 8]; 8];
        for (u, row) in b.iter_mut().enumerate() {
            let cu = if u == 0 { 1.0 / 2f64.sqrt() } else { 1.0 };
            for (x, v) in row.iter_mut().enumerate() {
                *v = 0.5 * cu * ((2 * x + 1) as f64 * u as f64 * PI / 16.0).cos();
            }
        }
        b
    })
}

fn fdct(block: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| b[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| b[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

fn idct(coef: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| b[u][x] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| b[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

/// Compresses and decompresses an RGB `[3,H,W]` image in `[0,1]` at `quality`.
pub fn round_trip(img: &Tensor<f32>, quality: u8) -> Result<Tensor<f32>> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::shape("jpeg", format!("expected [3,H,W], got {:?}", img.shape())));
    };
    let px = img.data();
    let plane = h * w;
    // JFIF YCbCr on the 0..255 scale, each pixel quantized to 8 bits first
    let mut ycc = [vec![0.0f64; plane], vec![0.0f64; plane], vec![0.0f64; plane]];
    for i in 0..plane {
        let [r, g, b] = [0, 1, 2].map(|c| (f64::from(px[c * plane + i]) * 255.0).round().clamp(0.0, 255.0));
        ycc[0][i] = 0.299 * r + 0.587 * g + 0.114 * b;
        ycc[1][i] = -0.168_736 * r - 0.331_264 * g + 0.5 * b + 128.0;
        ycc[2][i] = 0.5 * r - 0.418_688 * g - 0.081_312 * b + 128.0;
    }
    let tables = [scaled_table(&LUMA, quality), scaled_table(&CHROMA, quality)];
    for (ch, data) in ycc.iter_mut().enumerate() {
        let table = &tables[usize::from(ch > 0)];
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        // edge replication for partial blocks
                        let (sy, sx) = ((by + y).min(h - 1), (bx + x).min(w - 1));
                        block[y * 8 + x] = data[sy * w + sx] - 128.0;
                    }
                }
                let mut coef = fdct(&block);
                for (c, q) in coef.iter_mut().zip(table) {
                    *c = (*c / q).round() * q;
                }
                let rec = idct(&coef);
                for y in 0..8.min(h - by) {
                    for x in 0..8.min(w - bx) {
                        data[(by + y) * w + bx + x] = rec[y * 8 + x] + 128.0;
                    }
                }
            }
        }
    }
    let mut out = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        let (y, cb, cr) = (ycc[0][i], ycc[1][i] - 128.0, ycc[2][i] - 128.0);
        let rgb = [
            y + 1.402 * cr,
            y - 0.344_136 * cb - 0.714_136 * cr,
            y + 1.772 * cb,
        ];
        for (c, v) in rgb.iter().enumerate() {
            out[c * plane + i] = (v.round().clamp(0.0, 255.0) / 255.0) as f32;
        }
    }
    Tensor::new(img.shape(), out)
}
