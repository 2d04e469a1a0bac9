#![allow(dead_code)]

use std::collections::BTreeMap;

use colora_lab::autograd::{finite_diff_grad, relative_error, Graph, NodeId};
use colora_lab::{ModelSpec, Real, Result, Stage, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Six nested loops, zero padding, no kernel flip.
pub fn naive_conv2d(
    input: &Tensor<f64>,
    kernel: &Tensor<f64>,
    bias: &Tensor<f64>,
    stride: usize,
    padding: usize,
) -> Tensor<f64> {
    let (n, cin, h, w) = (input.dim(0), input.dim(1), input.dim(2), input.dim(3));
    let (cout, kh, kw) = (kernel.dim(0), kernel.dim(2), kernel.dim(3));
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xi = ((b * cin + ci) * h + iy as usize) * w + ix as usize;
                                let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                acc += x[xi] * k[ki];
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

pub type Params = BTreeMap<String, Tensor<f64>>;

/// Builds `sum(op(params) ⊙ R)` for a fixed random `R` so every output element matters.
pub fn weighted_loss(
    params: &Params,
    weights_seed: u64,
    build: &dyn Fn(&mut Graph<f64>, &BTreeMap<String, NodeId>) -> Result<NodeId>,
) -> Result<(Graph<f64>, NodeId)> {
    let mut g = Graph::<f64>::new();
    let mut ids = BTreeMap::new();
    for (name, t) in params {
        ids.insert(name.clone(), g.param(name.clone(), t.clone())?);
    }
    let out = build(&mut g, &ids)?;
    let shape = g.value(out).shape().to_vec();
    let loss = if shape.iter().product::<usize>() == 1 {
        out
    } else {
        let mut r = rng(weights_seed);
        let w = Tensor::<f64>::from_fn(&shape, |_| r.random_range(-1.0..1.0));
        let wc = g.constant(w);
        let prod = g.mul(out, wc)?;
        g.sum(prod)?
    };
    Ok((g, loss))
}

/// Largest per-tensor relative error between backprop and central differences.
pub fn gradient_check(
    params: &Params,
    build: &dyn Fn(&mut Graph<f64>, &BTreeMap<String, NodeId>) -> Result<NodeId>,
) -> f64 {
    let (g, loss) = weighted_loss(params, 99, build).unwrap();
    let analytic = g.backprop(loss).unwrap();
    let numeric = finite_diff_grad(
        |p| {
            let (g, loss) = weighted_loss(p, 99, build)?;
            Ok(g.value(loss).item())
        },
        params,
        1e-4,
    )
    .unwrap();
    analytic
        .iter()
        .map(|(k, a)| relative_error(a, &numeric[k]).unwrap())
        .fold(0.0, f64::max)
}

pub fn random_tensor<T: Real>(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(r.random_range(lo..hi)))
}

/// Runs the gradient check for every differentiable operator over `cases` random shapes.
/// Returns `(operator, worst relative error)`.
pub fn gradient_suite(cases: usize, seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let mut report = Vec::new();
    let mut run = |name: &'static str, r: &mut ChaCha8Rng, make: &dyn Fn(&mut ChaCha8Rng) -> (Params, Box<dyn Fn(&mut Graph<f64>, &BTreeMap<String, NodeId>) -> Result<NodeId>>)| {
        let worst = (0..cases)
            .map(|_| {
                let (params, build) = make(r);
                gradient_check(&params, build.as_ref())
            })
            .fold(0.0, f64::max);
        report.push((name, worst));
    };

    run("add", &mut r, &|r| {
        let shape = [r.random_range(1..4), r.random_range(1..5)];
        let p = Params::from([
            ("a".into(), random_tensor(&shape, -1.0, 1.0, r)),
            ("b".into(), random_tensor(&shape, -1.0, 1.0, r)),
        ]);
        (p, Box::new(|g, ids| g.add(ids["a"], ids["b"])))
    });
    run("mul", &mut r, &|r| {
        let shape = [r.random_range(1..4), r.random_range(1..5)];
        let p = Params::from([
            ("a".into(), random_tensor(&shape, -1.0, 1.0, r)),
            ("b".into(), random_tensor(&shape, -1.0, 1.0, r)),
        ]);
        (p, Box::new(|g, ids| g.mul(ids["a"], ids["b"])))
    });
    run("scale", &mut r, &|r| {
        let shape = [r.random_range(1..6)];
        let s = r.random_range(-2.0..2.0);
        let p = Params::from([("a".into(), random_tensor(&shape, -1.0, 1.0, r))]);
        (p, Box::new(move |g, ids| g.scale(ids["a"], s)))
    });
    run("sum", &mut r, &|r| {
        let shape = [r.random_range(1..4), r.random_range(1..4)];
        let p = Params::from([("a".into(), random_tensor(&shape, -1.0, 1.0, r))]);
        // square first so the sum is not linear in every element
        (p, Box::new(|g, ids| {
            let sq = g.mul(ids["a"], ids["a"])?;
            g.sum(sq)
        }))
    });
    run("matmul", &mut r, &|r| {
        let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let p = Params::from([
            ("a".into(), random_tensor(&[m, k], -1.0, 1.0, r)),
            ("b".into(), random_tensor(&[k, n], -1.0, 1.0, r)),
        ]);
        (p, Box::new(|g, ids| g.matmul(ids["a"], ids["b"])))
    });
    run("reshape", &mut r, &|r| {
        let (a, b) = (r.random_range(1..4), r.random_range(1..4));
        let p = Params::from([("a".into(), random_tensor(&[a, b], -1.0, 1.0, r))]);
        (p, Box::new(move |g, ids| g.reshape(ids["a"], &[b, a])))
    });
    run("conv2d", &mut r, &|r| {
        let n = r.random_range(1..3);
        let cin = r.random_range(1..4);
        let cout = r.random_range(1..4);
        let k = [1usize, 3][r.random_range(0..2)];
        let stride = r.random_range(1..3);
        let pad = (k - 1) / 2;
        let (h, w) = (r.random_range(k.max(2)..7), r.random_range(k.max(2)..7));
        let p = Params::from([
            ("x".into(), random_tensor(&[n, cin, h, w], -1.0, 1.0, r)),
            ("k".into(), random_tensor(&[cout, cin, k, k], -1.0, 1.0, r)),
            ("b".into(), random_tensor(&[cout], -1.0, 1.0, r)),
        ]);
        (p, Box::new(move |g, ids| g.conv2d(ids["x"], ids["k"], ids["b"], stride, pad)))
    });
    run("layer_norm", &mut r, &|r| {
        let (n, c, h, w) = (r.random_range(1..3), r.random_range(2..5), r.random_range(1..4), r.random_range(1..4));
        let p = Params::from([
            ("x".into(), random_tensor(&[n, c, h, w], -1.0, 1.0, r)),
            ("gamma".into(), random_tensor(&[c], 0.5, 1.5, r)),
            ("beta".into(), random_tensor(&[c], -0.5, 0.5, r)),
        ]);
        (p, Box::new(|g, ids| g.layer_norm(ids["x"], ids["gamma"], ids["beta"], 1e-6)))
    });
    run("gate", &mut r, &|r| {
        let (n, c, h, w) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
        let p = Params::from([("x".into(), random_tensor(&[n, 2 * c, h, w], -1.0, 1.0, r))]);
        (p, Box::new(|g, ids| g.gate(ids["x"])))
    });
    run("upsample2x", &mut r, &|r| {
        let (n, c, h, w) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4), r.random_range(1..4));
        let p = Params::from([("x".into(), random_tensor(&[n, c, h, w], -1.0, 1.0, r))]);
        (p, Box::new(|g, ids| g.upsample2x(ids["x"])))
    });
    run("loss_psnr", &mut r, &|r| {
        let groups = r.random_range(1..4);
        let shape = [groups, r.random_range(1..3), r.random_range(2..5), r.random_range(2..5)];
        let target = random_tensor(&shape, 0.0, 1.0, r);
        let p = Params::from([("p".into(), random_tensor(&shape, 0.0, 1.0, r))]);
        (p, Box::new(move |g, ids| g.loss_psnr_grouped(ids["p"], &target, 1.0, groups)))
    });
    run("loss_l1", &mut r, &|r| {
        let shape = [r.random_range(1..3), r.random_range(1..6)];
        let target = random_tensor(&shape, 0.0, 1.0, r);
        // keep every element at least 0.01 away from the kink
        let pred = Tensor::from_fn(&shape, |i| {
            let off = r.random_range(0.01..0.5);
            target.data()[i] + if r.random_bool(0.5) { off } else { -off }
        });
        let p = Params::from([("p".into(), pred)]);
        (p, Box::new(move |g, ids| g.loss_l1(ids["p"], &target)))
    });
    report
}

/// One parameter tensor found by walking the architecture by hand.
pub struct Walked {
    pub stage: Stage,
    /// `(d, k)` for conv weights, `None` for bias and norm vectors.
    pub matrix: Option<(usize, usize)>,
    pub numel: usize,
}

/// Every parameter tensor of `spec`, without going through `ModelSpec::layers`.
pub fn walk_tensors(spec: &ModelSpec) -> Vec<Walked> {
    let mut out = Vec::new();
    let conv = |out: &mut Vec<Walked>, stage: Stage, cout: usize, cin: usize, k: usize| {
        out.push(Walked { stage, matrix: Some((cout, cin * k * k)), numel: cout * cin * k * k });
        out.push(Walked { stage, matrix: None, numel: cout });
    };
    let w = spec.width;
    conv(&mut out, Stage::Intro, w, 3, 3);
    conv(&mut out, Stage::End, 3, w, 3);
    let mut blocks = Vec::new();
    let mut c = w;
    for (i, &n) in spec.enc_blocks.iter().enumerate() {
        blocks.extend(std::iter::repeat_n((Stage::Enc(i + 1), c), n));
        conv(&mut out, Stage::Enc(i + 1), 2 * c, c, 3);
        c *= 2;
    }
    blocks.extend(std::iter::repeat_n((Stage::Middle, c), spec.middle_blocks));
    for (i, &n) in spec.dec_blocks.iter().enumerate() {
        c /= 2;
        conv(&mut out, Stage::Dec(i + 1), c, 2 * c, 1);
        blocks.extend(std::iter::repeat_n((Stage::Dec(i + 1), c), n));
    }
    for (stage, c) in blocks {
        conv(&mut out, stage, 2 * c, c, 3);
        conv(&mut out, stage, c, c, 1);
        out.push(Walked { stage, matrix: None, numel: c });
        out.push(Walked { stage, matrix: None, numel: c });
    }
    out
}

/// Trainable-parameter count of a strategy, recomputed from the walk.
///
/// `deltas` holds the per-stage δ for the contribution rule.
pub fn oracle_tuned(spec: &ModelSpec, strategy: &str, deltas: &BTreeMap<Stage, f64>, min_rank: usize, lora_rank: usize) -> usize {
    walk_tensors(spec)
        .iter()
        .map(|t| match (strategy, t.matrix) {
            ("full", _) => t.numel,
            ("decoder_only", _) => match t.stage {
                Stage::Dec(_) | Stage::End => t.numel,
                _ => 0,
            },
            ("bias_norm_only", m) => if m.is_none() { t.numel } else { 0 },
            ("lora_fixed", Some((d, k))) => lora_rank * (d + k),
            ("lora_fixed", None) => 0,
            ("colora", None) => t.numel,
            ("colora", Some(_)) if matches!(t.stage, Stage::Intro | Stage::End) => t.numel,
            ("colora", Some((d, k))) => {
                let raw = (deltas[&t.stage] * (d * k) as f64 / (d + k) as f64 + 0.5).floor() as usize;
                raw.clamp(min_rank, d.min(k)) * (d + k)
            }
            _ => panic!("unknown strategy {strategy}"),
        })
        .sum()
}

/// Published normalized stage scores of the four-level reference network.
pub fn table_s1() -> BTreeMap<Stage, f64> {
    BTreeMap::from([
        (Stage::Enc(1), 0.794),
        (Stage::Enc(2), 1.0),
        (Stage::Enc(3), 0.563),
        (Stage::Enc(4), 0.352),
        (Stage::Middle, 0.089),
        (Stage::Dec(1), 0.391),
        (Stage::Dec(2), 0.831),
        (Stage::Dec(3), 0.932),
        (Stage::Dec(4), 0.920),
    ])
}

/// Four-level profile folded onto the two-level desk model by averaging neighbours, then renormalized.
pub fn desk_scores() -> BTreeMap<Stage, f64> {
    let t = table_s1();
    let raw = BTreeMap::from([
        (Stage::Enc(1), (t[&Stage::Enc(1)] + t[&Stage::Enc(2)]) / 2.0),
        (Stage::Enc(2), (t[&Stage::Enc(3)] + t[&Stage::Enc(4)]) / 2.0),
        (Stage::Middle, t[&Stage::Middle]),
        (Stage::Dec(1), (t[&Stage::Dec(1)] + t[&Stage::Dec(2)]) / 2.0),
        (Stage::Dec(2), (t[&Stage::Dec(3)] + t[&Stage::Dec(4)]) / 2.0),
    ]);
    let max = raw.values().copied().fold(0.0, f64::max);
    raw.into_iter().map(|(s, v)| (s, v / max)).collect()
}

