//! A two-layer conv model on the tape, checked against central differences.

use std::collections::BTreeMap;

use anyhow::Result;
use colora_lab::autograd::{finite_diff_grad, relative_error, Graph};
use colora_lab::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    params.insert("k1".into(), Tensor::uniform(&[4, 3, 3, 3], -0.3, 0.3, &mut rng));
    params.insert("b1".into(), Tensor::zeros(&[4]));
    params.insert("k2".into(), Tensor::uniform(&[3, 2, 1, 1], -0.3, 0.3, &mut rng));
    params.insert("b2".into(), Tensor::zeros(&[3]));
    let x = Tensor::<f64>::uniform(&[2, 3, 6, 6], 0.0, 1.0, &mut rng);
    let target = Tensor::<f64>::uniform(&[2, 3, 6, 6], 0.0, 1.0, &mut rng);

    let build = |p: &BTreeMap<String, Tensor<f64>>| -> colora_lab::Result<(Graph<f64>, _)> {
        let mut g = Graph::new();
        let ids: BTreeMap<&str, _> = p
            .iter()
            .map(|(k, v)| Ok((k.as_str(), g.param(k.clone(), v.clone())?)))
            .collect::<colora_lab::Result<_>>()?;
        let input = g.constant(x.clone());
        let h = g.conv2d(input, ids["k1"], ids["b1"], 1, 1)?;
        let h = g.gate(h)?; // 4 channels -> 2
        let y = g.conv2d(h, ids["k2"], ids["b2"], 1, 0)?;
        let loss = g.loss_psnr(y, &target, 1.0)?;
        Ok((g, loss))
    };

    let (g, loss) = build(&params)?;
    println!("tape holds {} nodes, loss {:.4}", g.len(), g.value(loss).item());
    let analytic = g.backprop(loss)?;
    let numeric = finite_diff_grad(
        |p| {
            let (g, l) = build(p)?;
            Ok(g.value(l).item())
        },
        &params,
        1e-5,
    )?;
    for (name, grad) in &analytic {
        println!("{name:>3}: relative error {:.2e}", relative_error(grad, &numeric[name])?);
    }
    Ok(())
}
