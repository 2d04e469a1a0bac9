//! Image files, synthetic clean corpora, degraded pair sets and augmentation.
//!
//! A pair set is a directory with `clean/` and `degraded/` holding images of
//! the same names, plus `manifest.jsonl` with one recipe per image.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::write_file;
use crate::degrade::{apply_recipe, sample_recipe, DegradationRecipe, DegradeConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 4] = ["png", "ppm", "pnm", "pgm"];

/// `[3,H,W]` in `[0,1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        f32::from(raw[p * 3 + c]) / 255.0
    }))
}

/// Writes an 8-bit image; the format follows the extension.
pub fn save_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::shape("save_image", format!("expected [3,H,W], got {:?}", img.shape())));
    };
    let x = img.data();
    let buf = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |px, py| {
        let p = py as usize * w + px as usize;
        Rgb([0, 1, 2].map(|c| (x[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Image files directly inside `dir`, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_dir(dir: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    list_images(dir)?
        .into_iter()
        .map(|p| Ok((file_name(&p), load_image(&p)?)))
        .collect()
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// A smooth two-colour gradient with soft-edged discs, boxes and striped patches.
pub fn synthetic_image<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize) -> Tensor<f32> {
    let mut colour = || [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
    let (c0, c1) = (colour(), colour());
    let mut img = vec![[0.0f32; 3]; h * w];
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    for y in 0..h {
        for x in 0..w {
            let t = ((x as f32 / w as f32 - 0.5) * ca + (y as f32 / h as f32 - 0.5) * sa + 0.5).clamp(0.0, 1.0);
            img[y * w + x] = [0, 1, 2].map(|c| c0[c] * (1.0 - t) + c1[c] * t);
        }
    }
    let scale = h.min(w) as f32;
    for _ in 0..rng.random_range(3..9) {
        let col = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let (cy, cx) = (rng.random_range(0.0..h as f32), rng.random_range(0.0..w as f32));
        let r = rng.random_range(0.08..0.35) * scale;
        let kind = rng.random_range(0..3);
        let (freq, phase) = (rng.random_range(0.3..1.5f32), rng.random_range(0.0..std::f32::consts::TAU));
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f32 - cy, x as f32 - cx);
                let dist = match kind {
                    0 => (dy * dy + dx * dx).sqrt() - r,
                    _ => dy.abs().max(dx.abs()) - r,
                };
                let cover = (0.5 - dist).clamp(0.0, 1.0);
                if cover == 0.0 {
                    continue;
                }
                let texture = if kind == 2 { 0.5 + 0.5 * (freq * (x as f32 + y as f32) + phase).sin() } else { 1.0 };
                let px = &mut img[y * w + x];
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - cover) + col[c] * texture * cover;
                }
            }
        }
    }
    Tensor::from_fn(&[3, h, w], |i| img[i % (h * w)][i / (h * w)])
}

/// Writes `count` synthetic `size×size` PNGs named `img_0000.png`….
pub fn write_synthetic_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i);
            let path = dir.join(format!("img_{i:04}.png"));
            save_image(&path, &synthetic_image(&mut rng, size, size))?;
            Ok(path)
        })
        .collect()
}

/// Independent generator for item `i` of a run seeded with `seed`.
pub fn stream_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub recipe: DegradationRecipe,
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub name: String,
    pub degraded: Tensor<f32>,
    pub clean: Tensor<f32>,
}

/// Degrades every image of `clean_dir` `count` times, each with a freshly sampled
/// recipe, writing a pair set to `out_dir`. Variants past the first get a `_v` suffix.
pub fn degrade_corpus(clean_dir: &Path, out_dir: &Path, task: &DegradeConfig, seed: u64, count: usize) -> Result<Vec<ManifestEntry>> {
    task.validate()?;
    if count < 1 {
        return Err(Error::InvalidArgument("count must be ≥ 1".into()));
    }
    let files = list_images(clean_dir)?;
    if files.is_empty() {
        return Err(Error::Empty("clean image directory"));
    }
    let jobs: Vec<(usize, usize)> = (0..files.len()).flat_map(|f| (0..count).map(move |v| (f, v))).collect();
    let entries: Vec<ManifestEntry> = jobs
        .par_iter()
        .map(|&(f, v)| {
            let path = &files[f];
            let clean = load_image(path)?;
            let recipe = sample_recipe(&mut stream_rng(seed, f * count + v), task)?;
            let degraded = apply_recipe(&clean, &recipe)?;
            let stem = Path::new(&file_name(path)).with_extension("").to_string_lossy().into_owned();
            let name = if v == 0 { format!("{stem}.png") } else { format!("{stem}_{v}.png") };
            save_image(&out_dir.join("clean").join(&name), &clean)?;
            save_image(&out_dir.join("degraded").join(&name), &degraded)?;
            Ok(ManifestEntry { name, recipe })
        })
        .collect::<Result<_>>()?;
    let mut manifest = String::new();
    for e in &entries {
        manifest.push_str(&serde_json::to_string(e)?);
        manifest.push('\n');
    }
    write_file(&out_dir.join("manifest.jsonl"), manifest.as_bytes())?;
    Ok(entries)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join("manifest.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.clone(),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// Loads `dir/degraded` and `dir/clean`, matched by file name.
pub fn load_pairs(dir: &Path) -> Result<Vec<Pair>> {
    let clean = load_dir(&dir.join("clean"))?;
    let degraded = load_dir(&dir.join("degraded"))?;
    if clean.is_empty() {
        return Err(Error::Empty("pair set"));
    }
    if clean.len() != degraded.len() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            reason: format!("{} clean vs {} degraded images", clean.len(), degraded.len()),
        });
    }
    clean
        .into_iter()
        .zip(degraded)
        .map(|((cn, c), (dn, d))| {
            if cn != dn || c.shape() != d.shape() {
                return Err(Error::Format {
                    path: dir.to_path_buf(),
                    reason: format!("{cn} and {dn} do not pair up"),
                });
            }
            Ok(Pair {
                name: cn,
                degraded: d,
                clean: c,
            })
        })
        .collect()
}

/// `size×size` window of a `[C,H,W]` image at `(y, x)`.
pub fn crop(img: &Tensor<f32>, y: usize, x: usize, size: usize) -> Result<Tensor<f32>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::shape("crop", format!("expected CHW, got {:?}", img.shape())));
    };
    if y + size > h || x + size > w {
        return Err(Error::InvalidArgument(format!("{size}x{size} crop at ({y},{x}) leaves a {h}x{w} image")));
    }
    let d = img.data();
    Ok(Tensor::from_fn(&[c, size, size], |i| {
        let (ch, r, col) = (i / (size * size), (i / size) % size, i % size);
        d[ch * h * w + (y + r) * w + x + col]
    }))
}

/// Central `size×size` window of both halves of a pair.
pub fn center_crop(p: &Pair, size: usize) -> Result<Pair> {
    let (h, w) = (p.clean.dim(1), p.clean.dim(2));
    if h < size || w < size {
        return Err(Error::InvalidArgument(format!("{} is smaller than a {size}x{size} crop", p.name)));
    }
    let (y, x) = ((h - size) / 2, (w - size) / 2);
    Ok(Pair {
        name: p.name.clone(),
        degraded: crop(&p.degraded, y, x, size)?,
        clean: crop(&p.clean, y, x, size)?,
    })
}

/// Flips and quarter turns, applied identically to both images of a pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rot90: u8,
}

impl Augment {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Augment {
            flip_h: rng.random(),
            flip_v: rng.random(),
            rot90: rng.random_range(0..4),
        }
    }

    /// Square `[C,S,S]` images only, so rotations keep the shape.
    pub fn apply(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let (c, s) = (img.dim(0), img.dim(1));
        let d = img.data();
        Tensor::from_fn(&[c, s, s], |i| {
            let (ch, mut y, mut x) = (i / (s * s), (i / s) % s, i % s);
            for _ in 0..self.rot90 {
                (y, x) = (x, s - 1 - y);
            }
            if self.flip_v {
                y = s - 1 - y;
            }
            if self.flip_h {
                x = s - 1 - x;
            }
            d[ch * s * s + y * s + x]
        })
    }
}

/// Stacks equally shaped images along a new leading axis.
pub fn stack(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images.first().ok_or(Error::Empty("image batch"))?;
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for img in images {
        img.expect_same_shape(first, "stack")?;
        data.extend_from_slice(img.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn augment_is_a_permutation() {
        let img = Tensor::from_fn(&[1, 3, 3], |i| i as f32);
        let mut sorted: Vec<f32> = Augment {
            flip_h: true,
            flip_v: false,
            rot90: 3,
        }
        .apply(&img)
        .into_data();
        sorted.sort_by(f32::total_cmp);
        assert_eq!(sorted, img.data());
        let turned = Augment {
            rot90: 1,
            ..Default::default()
        }
        .apply(&img);
        let back = Augment {
            rot90: 3,
            ..Default::default()
        }
        .apply(&turned);
        assert_eq!(back, img);
        assert_ne!(turned, img);
    }

    #[test]
    fn crop_bounds() {
        let img = Tensor::from_fn(&[3, 4, 5], |i| i as f32);
        let c = crop(&img, 1, 2, 3).unwrap();
        assert_eq!(c.data()[0], img.data()[5 + 2]);
        assert!(crop(&img, 2, 0, 3).is_err());
    }

    #[test]
    fn synthetic_images_are_in_range_and_varied() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = synthetic_image(&mut rng, 24, 24);
        let b = synthetic_image(&mut rng, 24, 24);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a, b);
    }

    #[test]
    fn image_files_round_trip_at_eight_bits() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[3, 5, 7], |i| (i % 256) as f32 / 255.0);
        for name in ["a.png", "b.ppm"] {
            let p = dir.path().join(name);
            save_image(&p, &img).unwrap();
            assert_eq!(load_image(&p).unwrap(), img);
        }
        assert_eq!(list_images(dir.path()).unwrap().len(), 2);
    }
}
