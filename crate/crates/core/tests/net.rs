mod common;

use std::collections::BTreeMap;

use colora_lab::autograd::Graph;
use colora_lab::net::{forward_graph, ParamBinder};
use colora_lab::{Checkpoint, LayerId, ModelSpec, Stage, Tensor};

use common::{random_tensor, rng};

/// Counts parameters straight from the architecture description, without `ModelSpec::layers`.
fn enumerate_param_count(spec: &ModelSpec) -> usize {
    let conv = |cout: usize, cin: usize, k: usize| cout * cin * k * k + cout;
    let block = |c: usize| 2 * c + conv(2 * c, c, 3) + conv(c, c, 1);
    let w = spec.width;
    let mut total = conv(w, 3, 3) + conv(3, w, 3);
    let mut c = w;
    for &n in &spec.enc_blocks {
        total += n * block(c) + conv(2 * c, c, 3);
        c *= 2;
    }
    total += spec.middle_blocks * block(c);
    for &n in &spec.dec_blocks {
        c /= 2;
        total += conv(c, 2 * c, 1) + n * block(c);
    }
    total
}

fn nafnet_like() -> ModelSpec {
    ModelSpec {
        width: 8,
        enc_blocks: vec![2, 2, 4, 8],
        middle_blocks: 12,
        dec_blocks: vec![2, 2, 2, 2],
    }
}

#[test]
fn parameter_count_matches_enumeration() {
    for spec in [
        ModelSpec::default(),
        nafnet_like(),
        ModelSpec {
            width: 4,
            enc_blocks: vec![3],
            middle_blocks: 1,
            dec_blocks: vec![2],
        },
    ] {
        let ckpt = Checkpoint::<f32>::build(&spec, 0).unwrap();
        assert_eq!(ckpt.param_count(), enumerate_param_count(&spec));
        assert_eq!(spec.param_count(), enumerate_param_count(&spec));
    }
}

#[test]
fn zero_weights_give_identity() {
    let mut ckpt = Checkpoint::<f32>::build(&ModelSpec::default(), 5).unwrap();
    for (id, t) in ckpt.params.iter_mut() {
        if id.is_conv_weight() {
            *t = Tensor::zeros(t.shape());
        }
    }
    let x = random_tensor::<f32>(&[2, 3, 8, 12], 0.0, 1.0, &mut rng(1));
    assert_eq!(ckpt.forward(&x).unwrap(), x);
}

#[test]
fn zero_end_conv_gives_identity() {
    let mut ckpt = Checkpoint::<f32>::build(&ModelSpec::default(), 5).unwrap();
    for (id, t) in ckpt.params.iter_mut() {
        if id.stage == Stage::End {
            *t = Tensor::zeros(t.shape());
        }
    }
    let x = random_tensor::<f32>(&[1, 3, 8, 8], 0.0, 1.0, &mut rng(2));
    assert_eq!(ckpt.forward(&x).unwrap(), x);
}

#[test]
fn same_seed_same_checkpoint() {
    let a = Checkpoint::<f32>::build(&ModelSpec::default(), 9).unwrap();
    let b = Checkpoint::<f32>::build(&ModelSpec::default(), 9).unwrap();
    let c = Checkpoint::<f32>::build(&ModelSpec::default(), 10).unwrap();
    assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    assert_ne!(a, c);
}

#[test]
fn random_model_output_is_finite() {
    let ckpt = Checkpoint::<f32>::build(&ModelSpec::default(), 3).unwrap();
    let x = random_tensor::<f32>(&[2, 3, 16, 16], 0.0, 1.0, &mut rng(3));
    let y = ckpt.forward(&x).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.is_finite());
}

#[test]
fn save_load_forward_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let ckpt = Checkpoint::<f32>::build(&ModelSpec::default(), 4).unwrap();
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::<f32>::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    let x = random_tensor::<f32>(&[1, 3, 8, 8], 0.0, 1.0, &mut rng(4));
    let (a, b) = (ckpt.forward(&x).unwrap(), loaded.forward(&x).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

#[test]
fn partition_covers_every_layer_once() {
    let spec = ModelSpec::default();
    let parts = spec.stage_partition();
    assert_eq!(parts.len(), 7);
    let mut seen: Vec<LayerId> = parts.values().flatten().copied().collect();
    let n = seen.len();
    seen.sort();
    seen.dedup();
    assert_eq!(seen.len(), n);
    let all: Vec<LayerId> = spec.layers().into_iter().map(|(id, _)| id).collect();
    assert_eq!(seen, all);
    let order: Vec<String> = spec.stages().iter().map(|s| s.to_string()).collect();
    assert_eq!(order, ["intro", "enc.1", "enc.2", "middle", "dec.1", "dec.2", "end"]);
}

#[test]
fn stage_counts_sum_to_total() {
    let spec = nafnet_like();
    let shapes: BTreeMap<LayerId, usize> = spec.layers().into_iter().map(|(id, s)| (id, s.iter().product())).collect();
    let per_stage: Vec<usize> = spec
        .stage_partition()
        .values()
        .map(|ids| ids.iter().map(|id| shapes[id]).sum())
        .collect();
    assert_eq!(per_stage.iter().sum::<usize>(), spec.param_count());
}

#[test]
fn middle_holds_largest_share_in_nafnet_like_spec() {
    let spec = nafnet_like();
    let shapes: BTreeMap<LayerId, usize> = spec.layers().into_iter().map(|(id, s)| (id, s.iter().product())).collect();
    let counts: BTreeMap<Stage, usize> = spec
        .stage_partition()
        .into_iter()
        .map(|(s, ids)| (s, ids.iter().map(|id| shapes[id]).sum()))
        .collect();
    let middle = counts[&Stage::Middle];
    assert!(counts.iter().all(|(s, &c)| *s == Stage::Middle || c < middle));
    assert!(middle as f64 / spec.param_count() as f64 > 0.5);
}

#[test]
fn one_small_step_reduces_loss() {
    let ckpt = Checkpoint::<f64>::build(&ModelSpec::default(), 6).unwrap();
    let mut r = rng(6);
    let clean = random_tensor::<f64>(&[1, 3, 8, 8], 0.0, 1.0, &mut r);
    let noisy = clean.add(&random_tensor(&[1, 3, 8, 8], -0.1, 0.1, &mut r)).unwrap();
    let loss_and_grads = |params: &BTreeMap<LayerId, Tensor<f64>>| {
        let mut g = Graph::new();
        let x = g.constant(noisy.clone());
        let mut b = ParamBinder { params, trainable: &|_| true };
        let y = forward_graph(&ckpt.spec, &mut g, &mut b, x).unwrap();
        let l = g.loss_psnr(y, &clean, 1.0).unwrap();
        (g.value(l).item(), g.backprop(l).unwrap())
    };
    let (before, grads) = loss_and_grads(&ckpt.params);
    let stepped: BTreeMap<LayerId, Tensor<f64>> = ckpt
        .params
        .iter()
        .map(|(id, t)| {
            let g = &grads[&id.to_string()];
            (*id, t.sub(&g.scale(1e-4)).unwrap())
        })
        .collect();
    let (after, _) = loss_and_grads(&stepped);
    assert!(after < before, "{after} !< {before}");
}
