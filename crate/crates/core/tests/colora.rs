mod common;

use std::collections::BTreeMap;

use colora_lab::autograd::Graph;
use colora_lab::colora::{
    adapted_forward, delta_of_rank, matrix_dims, merge, plan_ranks, rank_of_delta, stage_deltas, tuned_param_count,
    AdapterBinder, AdapterSet, LoraPair, RankPlan,
};
use colora_lab::net::forward_graph;
use colora_lab::{Checkpoint, LayerId, ModelSpec, Real, Stage, Tensor};
use proptest::prelude::*;

use common::{desk_scores, random_tensor, rng, table_s1};

fn uniform_scores(spec: &ModelSpec, v: f64) -> BTreeMap<Stage, f64> {
    spec.stages().into_iter().filter(|s| !s.is_boundary()).map(|s| (s, v)).collect()
}

/// Counts what `attach` actually allocates.
fn allocated(set: &AdapterSet<f32>) -> usize {
    set.pairs.values().map(|p| p.a.numel() + p.b.numel()).sum::<usize>() + set.tuned.values().map(Tensor::numel).sum::<usize>()
}

fn randomize_b<T: Real>(set: &mut AdapterSet<T>, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for p in set.pairs.values_mut() {
        p.b = random_tensor(p.b.shape(), -scale, scale, &mut r);
    }
    for t in set.tuned.values_mut() {
        *t = t.add(&random_tensor(t.shape(), -scale, scale, &mut r)).unwrap();
    }
}

#[test]
fn published_scores_give_published_deltas() {
    let d = stage_deltas(&table_s1(), 1.0, 0.2);
    let expected = [0.794, 1.0, 0.563, 0.0704, 0.0178, 0.0782, 0.831, 0.932, 0.920];
    for (got, want) in d.values().zip(expected) {
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn zero_init_adapters_reproduce_base_bitwise() {
    let spec = ModelSpec::default();
    let base = Checkpoint::<f32>::build(&spec, 1).unwrap();
    let plan = plan_ranks(&desk_scores(), 1.0, 0.2, &spec, 1).unwrap();
    let set = AdapterSet::attach(&base, &plan, 2).unwrap();
    let mut r = rng(3);
    for _ in 0..5 {
        let x = random_tensor::<f32>(&[2, 3, 8, 8], 0.0, 1.0, &mut r);
        let (a, b) = (adapted_forward(&base, &set, &x).unwrap(), base.forward(&x).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn attach_is_deterministic() {
    let spec = ModelSpec::default();
    let base = Checkpoint::<f32>::build(&spec, 1).unwrap();
    let plan = RankPlan::fixed(&spec, 4).unwrap();
    assert_eq!(AdapterSet::attach(&base, &plan, 7).unwrap(), AdapterSet::attach(&base, &plan, 7).unwrap());
    assert_ne!(AdapterSet::attach(&base, &plan, 7).unwrap(), AdapterSet::attach(&base, &plan, 8).unwrap());
    let set = AdapterSet::attach(&base, &plan, 7).unwrap();
    for (id, p) in &set.pairs {
        let bound = 1.0 / (matrix_dims(base.params[id].shape()).1 as f32).sqrt();
        assert!(p.a.data().iter().all(|v| v.abs() <= bound));
        assert!(p.b.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn tuned_counts_match_allocation() {
    let spec = ModelSpec::default();
    let base = Checkpoint::<f32>::build(&spec, 1).unwrap();
    let layers: BTreeMap<LayerId, Vec<usize>> = spec.layers().into_iter().collect();
    let plans = [
        plan_ranks(&desk_scores(), 1.0, 0.2, &spec, 1).unwrap(),
        plan_ranks(&uniform_scores(&spec, 1.0), 1.0, 0.2, &spec, 1).unwrap(),
        RankPlan::fixed(&spec, 16).unwrap(),
        RankPlan::fixed(&spec, 1).unwrap(),
    ];
    for plan in &plans {
        let set = AdapterSet::attach(&base, plan, 0).unwrap();
        assert_eq!(tuned_param_count(plan, &spec).unwrap().count, allocated(&set));
    }
    let fixed = tuned_param_count(&plans[2], &spec).unwrap().count;
    let by_hand: usize = layers
        .iter()
        .filter(|(id, _)| id.is_conv_weight())
        .map(|(_, s)| 16 * (s[0] + s[1] * s[2] * s[3]))
        .sum();
    assert_eq!(fixed, by_hand);
}

#[test]
fn desk_plan_fraction_stays_small() {
    let spec = ModelSpec::default();
    let plan = plan_ranks(&desk_scores(), 1.0, 0.2, &spec, 1).unwrap();
    let c = tuned_param_count(&plan, &spec).unwrap();
    println!("desk colora plan: {} of {} parameters ({:.4})", c.count, c.total, c.fraction);
    assert!(c.fraction < 0.20);
}

#[test]
fn zero_rank_floor_leaves_only_direct_tensors() {
    let spec = ModelSpec::default();
    let plan = plan_ranks(&uniform_scores(&spec, 0.01), 1.0, 0.01, &spec, 0).unwrap();
    assert!(plan.per_layer_rank.values().all(|&r| r == 0));
    let layers: BTreeMap<LayerId, Vec<usize>> = spec.layers().into_iter().collect();
    let direct: usize = layers
        .iter()
        .filter(|(id, _)| id.is_extra() || id.stage.is_boundary())
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    assert_eq!(tuned_param_count(&plan, &spec).unwrap().count, direct);
    let base = Checkpoint::<f32>::build(&spec, 1).unwrap();
    assert!(AdapterSet::attach(&base, &plan, 0).unwrap().pairs.is_empty());
}

/// Sets every adapter so that `B·A = W* − W₀` exactly, using an identity factor.
fn factorize_towards<T: Real>(set: &mut AdapterSet<T>, base: &Checkpoint<T>, target: &Checkpoint<T>) {
    for (id, pair) in set.pairs.iter_mut() {
        let w = &base.params[id];
        let (d, k) = matrix_dims(w.shape());
        let diff = target.params[id].sub(w).unwrap().reshape(&[d, k]).unwrap();
        let eye = |n: usize| Tensor::from_fn(&[n, n], |i| if i / n == i % n { T::one() } else { T::zero() });
        *pair = if d <= k {
            LoraPair { a: diff, b: eye(d) }
        } else {
            LoraPair { a: eye(k), b: diff }
        };
    }
    for (id, t) in set.tuned.iter_mut() {
        *t = target.params[id].clone();
    }
}

#[test]
fn full_rank_factorization_reaches_any_target() {
    let spec = ModelSpec::default();
    let base = Checkpoint::<f64>::build(&spec, 1).unwrap();
    let target = Checkpoint::<f64>::build(&spec, 2).unwrap();
    let plan = plan_ranks(&uniform_scores(&spec, 1.0), 4.0, 1.0, &spec, 1).unwrap();
    let mut set = AdapterSet::attach(&base, &plan, 0).unwrap();
    factorize_towards(&mut set, &base, &target);
    let x = random_tensor::<f64>(&[2, 3, 8, 8], 0.0, 1.0, &mut rng(5));
    let diff = adapted_forward(&base, &set, &x).unwrap().max_abs_diff(&target.forward(&x).unwrap()).unwrap();
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn full_rank_factorization_of_one_small_layer() {
    let spec = ModelSpec::default();
    let base = Checkpoint::<f32>::build(&spec, 1).unwrap();
    let intro: LayerId = "intro.0.conv_weight".parse().unwrap();
    let mut target = base.clone();
    target.params.insert(intro, Checkpoint::<f32>::build(&spec, 2).unwrap().params[&intro].clone());
    let mut plan = RankPlan::fixed(&spec, 8).unwrap();
    plan.per_layer_rank.retain(|id, _| *id == intro);
    let mut set = AdapterSet::attach(&base, &plan, 0).unwrap();
    factorize_towards(&mut set, &base, &target);
    let x = random_tensor::<f32>(&[2, 3, 8, 8], 0.0, 1.0, &mut rng(5));
    let diff = adapted_forward(&base, &set, &x).unwrap().max_abs_diff(&target.forward(&x).unwrap()).unwrap();
    assert!(diff < 1e-5, "{diff}");
}

#[test]
fn base_weights_receive_no_gradient() {
    let spec = ModelSpec::default();
    let base = Checkpoint::<f64>::build(&spec, 1).unwrap();
    let plan = plan_ranks(&desk_scores(), 1.0, 0.2, &spec, 1).unwrap();
    let mut set = AdapterSet::attach(&base, &plan, 2).unwrap();
    randomize_b(&mut set, 3, 0.05);
    let x = random_tensor::<f64>(&[1, 3, 8, 8], 0.0, 1.0, &mut rng(4));
    let mut g = Graph::new();
    let xi = g.constant(x.clone());
    let mut binder = AdapterBinder {
        base: &base,
        adapters: &set,
        trainable: true,
    };
    let y = forward_graph(&spec, &mut g, &mut binder, xi).unwrap();
    let l = g.loss_psnr(y, &x.map(|v| v * 0.9), 1.0).unwrap();
    let grads = g.backprop(l).unwrap();
    let names: Vec<String> = set.clone().named_mut().into_iter().map(|(n, _)| n).collect();
    assert_eq!(grads.keys().cloned().collect::<Vec<_>>(), {
        let mut n = names.clone();
        n.sort();
        n
    });
    for id in set.pairs.keys() {
        assert!(!grads.contains_key(&id.to_string()));
    }
    assert!(grads.values().any(|t| t.max_abs() > 0.0));
}

#[test]
fn merged_model_matches_adapted_model() {
    let spec = ModelSpec::default();
    let base32 = Checkpoint::<f32>::build(&spec, 1).unwrap();
    let base64 = base32.cast::<f64>();
    let plan = plan_ranks(&desk_scores(), 1.0, 0.2, &spec, 1).unwrap();
    let mut set64 = AdapterSet::attach(&base64, &plan, 2).unwrap();
    randomize_b(&mut set64, 3, 0.1);
    let set32 = AdapterSet::<f32> {
        plan: set64.plan.clone(),
        pairs: set64
            .pairs
            .iter()
            .map(|(id, p)| (*id, LoraPair { a: p.a.cast(), b: p.b.cast() }))
            .collect(),
        tuned: set64.tuned.iter().map(|(id, t)| (*id, t.cast())).collect(),
        base_fingerprint: set64.base_fingerprint.clone(),
        seed: set64.seed,
    };
    let m32 = merge(&base32, &set32).unwrap();
    let m64 = merge(&base64, &set64).unwrap();
    assert_eq!(m32.param_count(), base32.param_count());
    let mut r = rng(9);
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let x = random_tensor::<f64>(&[1, 3, 8, 8], 0.0, 1.0, &mut r);
        let x32 = x.cast::<f32>();
        let d32 = m32.forward(&x32).unwrap().max_abs_diff(&adapted_forward(&base32, &set32, &x32).unwrap()).unwrap();
        let d64 = m64.forward(&x).unwrap().max_abs_diff(&adapted_forward(&base64, &set64, &x).unwrap()).unwrap();
        worst32 = worst32.max(f64::from(d32));
        worst64 = worst64.max(d64);
    }
    assert!(worst32 <= 1e-5, "{worst32}");
    assert!(worst64 <= 1e-10, "{worst64}");
}

#[test]
fn merge_of_zero_adapters_is_the_base() {
    let spec = ModelSpec::default();
    let base = Checkpoint::<f32>::build(&spec, 1).unwrap();
    let set = AdapterSet::attach(&base, &RankPlan::fixed(&spec, 3).unwrap(), 0).unwrap();
    let merged = merge(&base, &set).unwrap();
    assert_eq!(merged.params, base.params);
}

#[test]
fn adapters_refuse_a_different_base() {
    let spec = ModelSpec::default();
    let base = Checkpoint::<f32>::build(&spec, 1).unwrap();
    let other = Checkpoint::<f32>::build(&spec, 2).unwrap();
    let set = AdapterSet::attach(&base, &RankPlan::fixed(&spec, 2).unwrap(), 0).unwrap();
    assert!(merge(&other, &set).is_err());
    let small = ModelSpec {
        width: 4,
        ..spec.clone()
    };
    assert!(AdapterSet::attach(&Checkpoint::<f32>::build(&small, 1).unwrap(), &set.plan, 0).is_err());
}

#[test]
fn alpha_grid_is_monotone() {
    let spec = ModelSpec::default();
    let scores = desk_scores();
    let plans: Vec<RankPlan> = [0.6, 0.8, 1.0, 1.2, 1.5]
        .iter()
        .map(|&a| plan_ranks(&scores, a, 0.2, &spec, 1).unwrap())
        .collect();
    for w in plans.windows(2) {
        for (s, d) in &w[0].per_stage_delta {
            assert!(w[1].per_stage_delta[s] >= *d);
        }
        for (id, r) in &w[0].per_layer_rank {
            assert!(w[1].per_layer_rank[id] >= *r);
        }
        assert!(tuned_param_count(&w[1], &spec).unwrap().count >= tuned_param_count(&w[0], &spec).unwrap().count);
    }
}

#[test]
fn plan_and_adapter_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ModelSpec::default();
    let plan = plan_ranks(&desk_scores(), 1.0, 0.2, &spec, 1).unwrap();
    plan.save(dir.path().join("plan.json")).unwrap();
    assert_eq!(RankPlan::load(dir.path().join("plan.json")).unwrap(), plan);

    let base = Checkpoint::<f32>::build(&spec, 1).unwrap();
    let mut set = AdapterSet::attach(&base, &plan, 4).unwrap();
    randomize_b(&mut set, 5, 0.1);
    set.save(dir.path().join("a.adapters")).unwrap();
    let back = AdapterSet::<f32>::load(dir.path().join("a.adapters")).unwrap();
    assert_eq!(back, set);
    let file = std::fs::metadata(dir.path().join("a.adapters")).unwrap().len() as usize;
    assert!(file < base.to_bytes().unwrap().len());
}

proptest! {
    #[test]
    fn rank_round_trip_is_within_one_unit(d in 1usize..512, k in 1usize..4608, delta in 0.0f64..1.0) {
        let raw = rank_of_delta(delta, d, k);
        let r = (raw + 0.5).floor() as usize;
        let back = delta_of_rank(r, d, k);
        prop_assert!((back - delta).abs() <= (d + k) as f64 / (d * k) as f64 + 1e-12);
    }
}

