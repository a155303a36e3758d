//! Reverse-mode gradients of a small MLP loss against central differences.

use gag::numerics::{grad_check, ParamSet, Tensor};

fn main() -> anyhow::Result<()> {
    let mut params = ParamSet::<f64>::new();
    params.insert(
        "w1",
        Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?,
    );
    params.insert(
        "w2",
        Tensor::new(vec![4, 5], (0..20).map(|i| (i as f64 * 0.91).cos() * 0.5).collect())?,
    );
    let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 0.8, 1.5, 0.1, -0.4])?;
    let report = grad_check(
        |tape, b| {
            let x = tape.constant(x.clone());
            let h = tape.matmul(x, b.var("w1"))?;
            let h = tape.gelu(h);
            let logits = tape.matmul(h, b.var("w2"))?;
            tape.cross_entropy(logits, &[1, 3], &[true, true])
        },
        &params,
        1e-6,
    )?;
    println!(
        "checked {} values, max relative error {:.2e} ({}[{}])",
        report.checked, report.max_rel_error, report.worst_param, report.worst_index
    );
    Ok(())
}
