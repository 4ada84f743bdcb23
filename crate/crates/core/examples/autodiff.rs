//! The tape on its own: record a small computation, backpropagate, and take
//! a few SGD steps.
//!
//!     cargo run --example autodiff

use sgscn::tensor::{grad_check, sgd_step, Param, Tape, Tensor};

fn main() -> sgscn::Result<()> {
    // loss(x) = sum(softmax(norm(x)) * target) over a 3-channel 2x2 map
    let x = Tensor::from_fn([3, 2, 2], |i| (i as f64 * 0.37).sin());
    let target: Vec<f64> = (0..12).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
    let f = |t: &mut Tape<f64>, v| {
        let y = t.channel_norm(v, 1e-5)?;
        let p = t.softmax_channels(y)?;
        t.weighted_sum(p, target.clone())
    };

    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let loss = f(&mut tape, v)?;
    tape.backward(loss)?;
    println!("loss {:.6}", tape.value(loss).item());
    println!("grad {:?}", tape.grad(v).expect("param").data());
    println!("max rel err vs central differences: {:.2e}", grad_check(f, &x, 1e-5)?);

    // gradient descent on a quadratic bowl
    let mut p = Param::new("w", Tensor::from_fn([4], |i| i as f64));
    for step in 0..5 {
        let mut tape = Tape::new();
        let w = tape.param(p.value.clone());
        let loss = tape.sum_squares(w);
        tape.backward(loss)?;
        p.grad = tape.grad(w);
        println!("step {step}: loss {:.4}", tape.value(loss).item());
        sgd_step(std::iter::once(&mut p), 0.1, 0.5)?;
    }
    Ok(())
}
