mod common;

use std::collections::BTreeMap;

use colora_lab::autograd::Graph;
use colora_lab::faig::{
    attribution, completeness_residual, faig_scores, interpolate, layer_scores, normalize_stage_scores, path_integral,
    probe_gradient, FaigReport, Probe,
};
use colora_lab::{Checkpoint, ModelSpec, Result, Stage, Tensor};
use proptest::prelude::*;

use common::{random_tensor, rng};

fn tiny() -> ModelSpec {
    ModelSpec {
        width: 2,
        enc_blocks: vec![1],
        middle_blocks: 1,
        dec_blocks: vec![1],
    }
}

fn probe(seed: u64, n: usize, size: usize) -> Probe<f64> {
    let mut r = rng(seed);
    let clean = random_tensor::<f64>(&[n, 3, size, size], 0.0, 1.0, &mut r);
    let noisy = clean.add(&random_tensor(&[n, 3, size, size], -0.2, 0.2, &mut r)).unwrap();
    Probe::new(noisy, clean).unwrap()
}

/// Target = base plus a fixed random perturbation.
fn pair(spec: &ModelSpec, seed: u64, spread: f64) -> (Checkpoint<f64>, Checkpoint<f64>) {
    let ba = Checkpoint::<f64>::build(spec, seed).unwrap();
    let mut ta = ba.clone();
    let mut r = rng(seed + 1000);
    for t in ta.params.values_mut() {
        *t = t.add(&random_tensor(t.shape(), -spread, spread, &mut r)).unwrap();
    }
    (ba, ta)
}

/// Squared error of `y = w·x` against `y*`, differentiated by the tape.
fn quadratic_grad(x: f64, y_star: f64) -> impl Fn(&BTreeMap<u8, Tensor<f64>>) -> Result<BTreeMap<u8, Tensor<f64>>> + Sync {
    move |p| {
        let mut g = Graph::new();
        let w = g.param("w", p[&0].clone())?;
        let xi = g.constant(Tensor::scalar(x));
        let y = g.mul(w, xi)?;
        let off = g.constant(Tensor::scalar(-y_star));
        let d = g.add(y, off)?;
        let sq = g.mul(d, d)?;
        let l = g.sum(sq)?;
        let mut grads = g.backprop(l)?;
        Ok(BTreeMap::from([(0, grads.remove("w").unwrap())]))
    }
}

#[test]
fn quadratic_ig_converges_to_closed_form() {
    let (x, y_star, w0, w1) = (1.5, 0.7, -0.4, 1.3);
    let loss = |w: f64| (w * x - y_star).powi(2);
    let exact = loss(w0) - loss(w1);
    let ba = BTreeMap::from([(0u8, Tensor::scalar(w0))]);
    let ta = BTreeMap::from([(0u8, Tensor::scalar(w1))]);
    let mut last = f64::INFINITY;
    for m in [10, 100, 1000] {
        let ig = path_integral(&ba, &ta, m, quadratic_grad(x, y_star)).unwrap()[&0].item();
        let residual = (ig - exact).abs();
        // left Riemann sum of a linear gradient misses exactly x²Δ²/M
        let bound = (w0 - w1).powi(2) * x * x / m as f64;
        assert!((residual - bound).abs() < 1e-12, "M={m}: {residual} vs {bound}");
        assert!(residual < last);
        last = residual;
    }
}

#[test]
fn completeness_residual_shrinks_with_steps() {
    let spec = ModelSpec::default();
    let (ba, ta) = pair(&spec, 11, 0.1);
    let p = probe(12, 2, 8);
    let r: Vec<f64> = [10, 100, 1000]
        .iter()
        .map(|&m| completeness_residual(&ba, &ta, &p, m).unwrap())
        .collect();
    assert!(r[0] > r[1] && r[1] > r[2], "{r:?}");
}

#[test]
fn identical_models_score_zero() {
    let ckpt = Checkpoint::<f64>::build(&ModelSpec::default(), 3).unwrap();
    let p = probe(4, 2, 8);
    let report = faig_scores(&ckpt, &ckpt, &p, 10).unwrap();
    assert!(report.per_layer.values().all(|&v| v == 0.0));
    assert!(report.per_stage.values().all(|&v| v == 0.0));
    assert!(report.normalized.all_zero);
    assert_eq!(completeness_residual(&ckpt, &ckpt, &p, 10).unwrap(), 0.0);
}

#[test]
fn report_shape_and_normalization() {
    let spec = ModelSpec::default();
    let (ba, ta) = pair(&spec, 5, 0.05);
    let report = faig_scores(&ba, &ta, &probe(6, 2, 8), 8).unwrap();
    assert_eq!(report.per_layer.len(), spec.layers().len());
    assert_eq!(report.per_stage.len(), 7);
    assert_eq!(report.normalized.values.len(), 5);
    assert!(!report.normalized.values.contains_key(&Stage::Intro));
    let max = report.normalized.values.values().copied().fold(0.0, f64::max);
    assert_eq!(max, 1.0);
    for (stage, ids) in spec.stage_partition() {
        let mean = ids.iter().map(|id| report.per_layer[id]).sum::<f64>() / ids.len() as f64;
        assert!((report.per_stage[&stage] - mean).abs() <= 1e-15 * mean.max(1.0));
    }
}

#[test]
fn loss_scaling_scales_scores_and_keeps_normalization() {
    let spec = tiny();
    let (ba, ta) = pair(&spec, 7, 0.1);
    let p = probe(8, 2, 4);
    let base = layer_scores(&attribution(&ba, &ta, &p, 12).unwrap());
    for c in [3.5, -2.0] {
        let scaled = path_integral(&ba.params, &ta.params, 12, |params| {
            Ok(probe_gradient(&spec, params, &p)?
                .into_iter()
                .map(|(k, g)| (k, g.scale(c)))
                .collect())
        })
        .unwrap();
        let scaled = layer_scores(&scaled);
        for (id, v) in &base {
            assert!((scaled[id] - c.abs() * v).abs() <= 1e-12 * (1.0 + v.abs()), "{id}");
        }
        let a = FaigReport::from_layers(base.clone(), 12, p.describe()).unwrap();
        let b = FaigReport::from_layers(scaled, 12, p.describe()).unwrap();
        for (s, v) in &a.normalized.values {
            assert!((b.normalized.values[s] - v).abs() < 1e-12);
        }
    }
}

#[test]
fn published_normalized_scores_pass_through() {
    let published = [
        (Stage::Enc(1), 0.794),
        (Stage::Enc(2), 1.0),
        (Stage::Enc(3), 0.563),
        (Stage::Enc(4), 0.352),
        (Stage::Middle, 0.089),
        (Stage::Dec(1), 0.391),
        (Stage::Dec(2), 0.831),
        (Stage::Dec(3), 0.932),
        (Stage::Dec(4), 0.920),
    ];
    let map: BTreeMap<Stage, f64> = published.into_iter().collect();
    assert_eq!(normalize_stage_scores(&map).unwrap().values, map);
}

#[test]
fn interpolation_endpoints_and_errors() {
    let (ba, ta) = pair(&ModelSpec::default(), 9, 0.3);
    assert_eq!(interpolate(&ba, &ta, 0.0).unwrap().params, ta.params);
    assert_eq!(interpolate(&ba, &ta, 1.0).unwrap().params, ba.params);
    assert!(interpolate(&ba, &ta, 1.5).is_err());
    let other = Checkpoint::<f64>::build(&tiny(), 1).unwrap();
    assert!(interpolate(&ba, &other, 0.5).is_err());
    assert!(faig_scores(&ba, &other, &probe(1, 1, 8), 4).is_err());
}

#[test]
fn empty_probe_is_rejected() {
    assert!(Probe::<f32>::from_pairs(&[]).is_err());
    assert!(Probe::new(Tensor::<f32>::zeros(&[0, 3, 4, 4]), Tensor::zeros(&[0, 3, 4, 4])).is_err());
}

#[test]
fn averaged_report_round_trips_through_json() {
    let spec = tiny();
    let p = probe(2, 1, 4);
    let (ba, ta) = pair(&spec, 1, 0.1);
    let (_, tb) = pair(&spec, 2, 0.1);
    let r1 = faig_scores(&ba, &ta, &p, 4).unwrap();
    let r2 = faig_scores(&ba, &tb, &p, 4).unwrap();
    let avg = FaigReport::average(&[r1.clone(), r2.clone()]).unwrap();
    assert_eq!(avg.tasks, 2);
    for (id, v) in &avg.per_layer {
        assert!((v - (r1.per_layer[id] + r2.per_layer[id]) / 2.0).abs() < 1e-15 * (1.0 + v));
    }
    let back: FaigReport = serde_json::from_str(&avg.to_json().unwrap()).unwrap();
    assert_eq!(back, avg);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn scores_are_never_negative(seed in 0u64..1000, spread in 0.01f64..1.0, steps in 1usize..6) {
        let (ba, ta) = pair(&tiny(), seed, spread);
        let report = faig_scores(&ba, &ta, &probe(seed, 2, 4), steps).unwrap();
        prop_assert!(report.per_layer.values().all(|&v| v >= 0.0 && v.is_finite()));
        prop_assert!(report.per_stage.values().all(|&v| v >= 0.0));
        prop_assert!(report.normalized.values.values().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
