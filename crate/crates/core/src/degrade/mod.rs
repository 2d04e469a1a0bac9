//! Synthetic degradations and random-order recipes.
//!
//! A [`DegradationRecipe`] is an ordered list of fully resolved
//! [`DegradationStep`]s plus the seed of the generator that drives the
//! stochastic steps (noise realisations, rain streak placement), so any
//! degraded image can be regenerated from its recipe alone.

pub mod blur;
pub mod jpeg;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use blur::{BlurFamily, Kernel};

/// The five degradation functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    Blur,
    Noise,
    Jpeg,
    MotionBlur,
    Rain,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 5] = [
        DegradationKind::Blur,
        DegradationKind::Noise,
        DegradationKind::Jpeg,
        DegradationKind::MotionBlur,
        DegradationKind::Rain,
    ];
}

impl std::str::FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "blur" => DegradationKind::Blur,
            "noise" => DegradationKind::Noise,
            "jpeg" => DegradationKind::Jpeg,
            "motion_blur" | "motion" => DegradationKind::MotionBlur,
            "rain" => DegradationKind::Rain,
            other => return Err(Error::InvalidArgument(format!("unknown degradation kind {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum NoiseModel {
    /// Standard deviation on the 0–255 scale.
    Gaussian { sigma: f64 },
    Poisson { scale: f64 },
}

/// One degradation with every parameter resolved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationStep {
    Blur {
        size: usize,
        sigma: f64,
        family: BlurFamily,
    },
    Noise {
        noise: NoiseModel,
    },
    Jpeg {
        quality: u8,
    },
    MotionBlur {
        size: usize,
        /// Polyline vertices relative to the kernel centre, in pixels.
        trajectory: Vec<[f64; 2]>,
    },
    Rain {
        /// Streak density: expected streaks per 25,600 pixels.
        amount: f64,
        length: f64,
        alpha: f64,
        /// Degrees from vertical.
        angle: f64,
    },
}

impl DegradationStep {
    pub fn kind(&self) -> DegradationKind {
        match self {
            DegradationStep::Blur { .. } => DegradationKind::Blur,
            DegradationStep::Noise { .. } => DegradationKind::Noise,
            DegradationStep::Jpeg { .. } => DegradationKind::Jpeg,
            DegradationStep::MotionBlur { .. } => DegradationKind::MotionBlur,
            DegradationStep::Rain { .. } => DegradationKind::Rain,
        }
    }

    /// Checks every parameter against its sampling domain.
    pub fn validate(&self) -> Result<()> {
        fn within(name: &str, v: f64, lo: f64, hi: f64) -> Result<()> {
            if (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::OutOfDomain(format!("{name}={v} not in [{lo}, {hi}]")))
            }
        }
        fn odd_size(name: &str, size: usize, lo: usize, hi: usize) -> Result<()> {
            if size % 2 == 1 && (lo..=hi).contains(&size) {
                Ok(())
            } else {
                Err(Error::OutOfDomain(format!("{name} kernel size {size} not odd in [{lo}, {hi}]")))
            }
        }
        match self {
            DegradationStep::Blur { size, sigma, family } => {
                odd_size("blur", *size, 7, 21)?;
                if !(*sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::OutOfDomain(format!("blur sigma {sigma} must be > 0")));
                }
                match family {
                    BlurFamily::Gaussian => Ok(()),
                    BlurFamily::Generalized { shape } => within("generalized shape", *shape, 0.5, 4.0),
                    BlurFamily::Plateau { shape } => within("plateau shape", *shape, 1.0, 2.0),
                }
            }
            DegradationStep::Noise { noise } => match noise {
                NoiseModel::Gaussian { sigma } => within("noise sigma", *sigma, 1.0, 30.0),
                NoiseModel::Poisson { scale } => within("poisson scale", *scale, 0.05, 3.0),
            },
            DegradationStep::Jpeg { quality } => within("jpeg quality", f64::from(*quality), 30.0, 95.0),
            DegradationStep::MotionBlur { size, trajectory } => {
                odd_size("motion", *size, 5, 31)?;
                blur::motion_kernel(*size, trajectory).map(|_| ())
            }
            DegradationStep::Rain {
                amount,
                length,
                alpha,
                angle,
            } => {
                within("rain amount", *amount, 10.0, 1000.0)?;
                within("rain length", *length, 10.0, 90.0)?;
                within("rain alpha", *alpha, 0.3, 1.3)?;
                within("rain angle", *angle, -80.0, 80.0)
            }
        }
    }

    /// Spatial kernel for the blur kinds.
    pub fn kernel(&self) -> Result<Option<Kernel>> {
        match self {
            DegradationStep::Blur { size, sigma, family } => {
                blur::isotropic_kernel(*size, *sigma, *family).map(Some)
            }
            DegradationStep::MotionBlur { size, trajectory } => {
                blur::motion_kernel(*size, trajectory).map(Some)
            }
            _ => Ok(None),
        }
    }
}

fn check_image(img: &Tensor<f32>) -> Result<(usize, usize)> {
    match img.shape() {
        &[3, h, w] => Ok((h, w)),
        s => Err(Error::shape("degrade", format!("expected [3,H,W], got {s:?}"))),
    }
}

fn clamp01(t: Tensor<f32>) -> Tensor<f32> {
    t.map(|v| v.clamp(0.0, 1.0))
}

/// Applies one step to a `[3,H,W]` image in `[0,1]`; output is clamped to `[0,1]`.
pub fn apply_step<R: Rng + ?Sized>(img: &Tensor<f32>, step: &DegradationStep, rng: &mut R) -> Result<Tensor<f32>> {
    let (h, w) = check_image(img)?;
    step.validate()?;
    let out = match step {
        DegradationStep::Blur { .. } | DegradationStep::MotionBlur { .. } => {
            let kernel = step.kernel()?.expect("blur kinds have kernels");
            blur::filter(img, &kernel)?
        }
        DegradationStep::Noise { noise } => match *noise {
            NoiseModel::Gaussian { sigma } => {
                let normal = Normal::new(0.0, sigma / 255.0).expect("sigma validated");
                Tensor::from_fn(img.shape(), |i| (f64::from(img.data()[i]) + normal.sample(rng)) as f32)
            }
            NoiseModel::Poisson { scale } => Tensor::from_fn(img.shape(), |i| {
                let v = img.data()[i];
                let lambda = f64::from(v) * 255.0;
                let count = if lambda > 0.0 {
                    Poisson::new(lambda).expect("positive rate").sample(rng)
                } else {
                    0.0
                };
                let noise = count / 255.0 - f64::from(v);
                (f64::from(v) + scale * noise) as f32
            }),
        },
        DegradationStep::Jpeg { quality } => jpeg::round_trip(img, *quality)?,
        DegradationStep::Rain {
            amount,
            length,
            alpha,
            angle,
        } => {
            let mask = rain_mask(h, w, *amount, *length, *angle, rng);
            let plane = h * w;
            Tensor::from_fn(img.shape(), |i| img.data()[i] + (*alpha * mask[i % plane]) as f32)
        }
    };
    Ok(clamp01(out))
}

/// Anti-aliased streak layer in `[0,1]`; streak origins are Bernoulli per pixel.
fn rain_mask<R: Rng + ?Sized>(h: usize, w: usize, amount: f64, length: f64, angle: f64, rng: &mut R) -> Vec<f64> {
    let p = amount / 25_600.0;
    let (dx, dy) = (angle.to_radians().sin(), angle.to_radians().cos());
    let mut mask = vec![0.0f64; h * w];
    let steps = (length * 2.0).ceil() as usize;
    for y in 0..h {
        for x in 0..w {
            if !rng.random_bool(p) {
                continue;
            }
            let brightness: f64 = rng.random_range(0.5..1.0);
            for s in 0..=steps {
                let t = s as f64 / steps as f64 - 0.5;
                let (fx, fy) = (x as f64 + t * length * dx, y as f64 + t * length * dy);
                let (x0, y0) = (fx.floor(), fy.floor());
                let (ax, ay) = (fx - x0, fy - y0);
                for (ox, wx) in [(0, 1.0 - ax), (1, ax)] {
                    for (oy, wy) in [(0, 1.0 - ay), (1, ay)] {
                        let (xi, yi) = (x0 as isize + ox, y0 as isize + oy);
                        if xi < 0 || yi < 0 || xi >= w as isize || yi >= h as isize {
                            continue;
                        }
                        let cell = &mut mask[yi as usize * w + xi as usize];
                        *cell = cell.max(brightness * wx * wy);
                    }
                }
            }
        }
    }
    mask
}

/// Ordered steps plus the seed of the generator that drives them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationRecipe {
    pub steps: Vec<DegradationStep>,
    pub seed: u64,
}

/// Applies the steps left to right with a generator seeded from `recipe.seed`.
pub fn apply_recipe(img: &Tensor<f32>, recipe: &DegradationRecipe) -> Result<Tensor<f32>> {
    if recipe.steps.is_empty() {
        return Err(Error::Empty("degradation recipe"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
    recipe
        .steps
        .iter()
        .try_fold(img.clone(), |acc, step| apply_step(&acc, step, &mut rng))
}

/// What [`sample_recipe`] may draw.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeConfig {
    /// Longest recipe, `N`.
    pub max_depth: usize,
    pub kinds: Vec<DegradationKind>,
    /// Gaussian sigma band on the 0–255 scale; must lie inside `[1, 30]`.
    pub noise_sigma: [f64; 2],
    /// Whether noise steps may use the Poisson model.
    pub poisson_noise: bool,
}

impl Default for DegradeConfig {
    fn default() -> Self {
        DegradeConfig {
            max_depth: 6,
            kinds: DegradationKind::ALL.to_vec(),
            noise_sigma: [1.0, 30.0],
            poisson_noise: true,
        }
    }
}

/// Blur sigma is sampled from this range.
pub const BLUR_SIGMA: [f64; 2] = [0.2, 3.0];

impl DegradeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth < 1 {
            return Err(Error::InvalidArgument("max_depth must be >= 1".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::Empty("degradation kind set"));
        }
        let [lo, hi] = self.noise_sigma;
        if !(1.0 <= lo && lo <= hi && hi <= 30.0) {
            return Err(Error::OutOfDomain(format!("noise sigma band [{lo}, {hi}] outside [1, 30]")));
        }
        Ok(())
    }
}

fn odd_in<R: Rng + ?Sized>(rng: &mut R, lo: usize, hi: usize) -> usize {
    lo + 2 * rng.random_range(0..=(hi - lo) / 2)
}

/// Draws one fully resolved step of `kind`.
pub fn sample_step<R: Rng + ?Sized>(rng: &mut R, kind: DegradationKind, cfg: &DegradeConfig) -> DegradationStep {
    match kind {
        DegradationKind::Blur => {
            let size = odd_in(rng, 7, 21);
            let sigma = rng.random_range(BLUR_SIGMA[0]..=BLUR_SIGMA[1]);
            let family = match rng.random_range(0..3) {
                0 => BlurFamily::Gaussian,
                1 => BlurFamily::Generalized {
                    shape: rng.random_range(0.5..=4.0),
                },
                _ => BlurFamily::Plateau {
                    shape: rng.random_range(1.0..=2.0),
                },
            };
            DegradationStep::Blur { size, sigma, family }
        }
        DegradationKind::Noise => {
            let noise = if cfg.poisson_noise && rng.random_bool(0.5) {
                NoiseModel::Poisson {
                    scale: rng.random_range(0.05..=3.0),
                }
            } else {
                NoiseModel::Gaussian {
                    sigma: rng.random_range(cfg.noise_sigma[0]..=cfg.noise_sigma[1]),
                }
            };
            DegradationStep::Noise { noise }
        }
        DegradationKind::Jpeg => DegradationStep::Jpeg {
            quality: rng.random_range(30..=95),
        },
        DegradationKind::MotionBlur => {
            let size = odd_in(rng, 5, 31);
            DegradationStep::MotionBlur {
                size,
                trajectory: sample_trajectory(rng, size),
            }
        }
        DegradationKind::Rain => DegradationStep::Rain {
            amount: rng.random_range(10.0..=1000.0),
            length: rng.random_range(10.0..=90.0),
            alpha: rng.random_range(0.3..=1.3),
            angle: rng.random_range(-80.0..=80.0),
        },
    }
}

/// Random piecewise-linear camera path, centred on its arc-length centroid and
/// scaled to fit the kernel.
fn sample_trajectory<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Vec<[f64; 2]> {
    let half = (size as f64 - 1.0) / 2.0;
    let segments = rng.random_range(1..=4);
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let mut pts = vec![[0.0f64, 0.0f64]];
    for _ in 0..segments {
        let len = rng.random_range(1.0..=half.max(1.0));
        heading += rng.random_range(-std::f64::consts::FRAC_PI_2..=std::f64::consts::FRAC_PI_2);
        let last = *pts.last().expect("non-empty");
        pts.push([last[0] + len * heading.cos(), last[1] + len * heading.sin()]);
    }
    let (mut cx, mut cy, mut total) = (0.0, 0.0, 0.0);
    for seg in pts.windows(2) {
        let len = ((seg[1][0] - seg[0][0]).powi(2) + (seg[1][1] - seg[0][1]).powi(2)).sqrt();
        cx += len * (seg[0][0] + seg[1][0]) / 2.0;
        cy += len * (seg[0][1] + seg[1][1]) / 2.0;
        total += len;
    }
    if total > 0.0 {
        cx /= total;
        cy /= total;
    }
    for p in &mut pts {
        p[0] -= cx;
        p[1] -= cy;
    }
    let reach = pts.iter().fold(0.0f64, |m, p| m.max(p[0].abs()).max(p[1].abs()));
    let limit = half * 0.999;
    if reach > limit {
        let s = limit / reach;
        for p in &mut pts {
            p[0] *= s;
            p[1] *= s;
        }
    }
    pts
}

/// Draws a recipe: length uniform in `1..=N`, kinds uniform with replacement.
pub fn sample_recipe<R: Rng + ?Sized>(rng: &mut R, cfg: &DegradeConfig) -> Result<DegradationRecipe> {
    cfg.validate()?;
    let len = rng.random_range(1..=cfg.max_depth);
    let steps = (0..len)
        .map(|_| {
            let kind = cfg.kinds[rng.random_range(0..cfg.kinds.len())];
            sample_step(rng, kind, cfg)
        })
        .collect();
    Ok(DegradationRecipe {
        steps,
        seed: rng.random(),
    })
}

/// Count of distinct ordered kind sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct RecipeSpace {
    /// `Σ_{k=1..N} H^k`: non-empty sequences of length at most `N`.
    pub sequences: u128,
    /// `(H^{N+1} − 1)/(H − 1)`, which also counts the empty sequence.
    pub with_empty: u128,
}

pub fn recipe_space_size(kinds: u32, max_depth: u32) -> Result<RecipeSpace> {
    if kinds < 2 {
        return Err(Error::InvalidArgument("need at least two degradation kinds".into()));
    }
    if max_depth < 1 {
        return Err(Error::InvalidArgument("max depth must be >= 1".into()));
    }
    let overflow = || Error::InvalidArgument("recipe space exceeds u128".into());
    let h = u128::from(kinds);
    let mut sequences: u128 = 0;
    let mut power: u128 = 1;
    for _ in 0..max_depth {
        power = power.checked_mul(h).ok_or_else(overflow)?;
        sequences = sequences.checked_add(power).ok_or_else(overflow)?;
    }
    Ok(RecipeSpace {
        sequences,
        with_empty: sequences + 1,
    })
}
