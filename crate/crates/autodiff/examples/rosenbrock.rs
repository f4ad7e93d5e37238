//! Minimizes the Rosenbrock function with L-BFGS, taking gradients from the
//! tape, then differentiates a gradient norm a second time.
//!
//! cargo run --release -p glab-autodiff --example rosenbrock

use glab_autodiff::{grad, minimize, value_and_grad, Optimizer, OptimizerKind, Tensor};

fn rosenbrock(p: &Tensor) -> Tensor {
    let x = p.narrow(0, 0, 1).unwrap();
    let y = p.narrow(0, 1, 1).unwrap();
    let a = x.neg().add_scalar(1.0).square();
    let b = y.sub(&x.square()).unwrap().square().scale(100.0);
    a.add(&b).unwrap().sum()
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut params = vec![-1.2, 1.0];
    let mut eval = |p: &[f64]| {
        let t = Tensor::variable(p.to_vec(), &[2])?;
        let (v, mut g) = value_and_grad(&rosenbrock(&t), &[t])?;
        Ok((v, g.remove(0).to_vec()))
    };
    let mut opt = Optimizer::new(OptimizerKind::Lbfgs, 1.0);
    let trace = minimize(&mut opt, &mut params, 100, &mut eval, &|_| {})?;
    println!("L-BFGS: {} steps, f = {:.3e} at ({:.6}, {:.6})", trace.len() - 1, trace.last().unwrap(), params[0], params[1]);

    // ‖∇f‖² is itself differentiable because the backward pass is recorded.
    let p = Tensor::variable(vec![0.5, 0.5], &[2])?;
    let g = grad(&rosenbrock(&p), std::slice::from_ref(&p), true)?.remove(0);
    let gg = grad(&g.square().sum(), &[p], false)?.remove(0);
    println!("∇‖∇f‖² at (0.5, 0.5) = {:?}", gg.data());
    Ok(())
}
