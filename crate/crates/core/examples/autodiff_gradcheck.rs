//! Builds a tiny convolution + logistic model on the tape, backpropagates,
//! and compares every gradient against central differences.

use disentangled_cbm::autodiff::{ConvGeometry, Tape, Var};
use disentangled_cbm::gradcheck::{central_differences, compare};
use disentangled_cbm::{Result, Tensor};

fn ramp(shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|i| ((i * 7919 % 101) as f64 / 50.0 - 1.0) * scale).collect()).expect("shape")
}

/// Mean sigmoid of pooled, rectified conv responses.
fn forward(tape: &mut Tape, x: &Tensor, w: &Tensor, b: &Tensor, trainable: bool) -> Result<(f64, [Var; 2], Var)> {
    let x = tape.constant(x.clone());
    let wv = tape.leaf(w.clone(), trainable);
    let bv = tape.leaf(b.clone(), trainable);
    let y = tape.conv2d(x, wv, bv, ConvGeometry { stride: 1, padding: 1 })?;
    let y = tape.relu(y);
    let z = tape.global_avg_pool(y)?;
    let p = tape.sigmoid(z);
    let out = tape.mean(p);
    Ok((tape.value(out).item()?, [wv, bv], out))
}

fn main() -> Result<()> {
    let x = ramp(&[2, 5, 5, 3], 0.1);
    let w = ramp(&[3, 3, 3, 4], 0.05);
    let b = Tensor::from_vec(vec![0.1, -0.2, 0.05, 0.3]);

    let mut tape = Tape::new();
    let (value, vars, out) = forward(&mut tape, &x, &w, &b, true)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let numerical = central_differences(
        |p| forward(&mut Tape::new(), &x, &p[0], &p[1], false).map(|r| r.0),
        &[w.clone(), b.clone()],
        1e-5,
    )?;
    let report = compare(&analytic, &numerical);
    println!("objective {value:.6}");
    println!("{} gradient entries, max relative error {:.3e}", report.elements, report.max_relative_error);
    println!("{}", if report.passes(1e-4) { "gradients agree" } else { "gradients DISAGREE" });
    Ok(())
}
