//! Hessian-vector product through the tape, checked against finite differences.
//!
//! f(x) = sum(exp(x) * x^2). The gradient is built with `create_graph`, so
//! differentiating `<grad f, v>` again gives `H v`.

use fairmeta::{Tape, Tensor};

fn f_grad(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&xi| xi.exp() * (xi * xi + 2.0 * xi)).collect()
}

fn main() -> fairmeta::Result<()> {
    let x0 = vec![0.3, -1.2, 0.8];
    let v = vec![1.0, 0.5, -2.0];

    let tape = Tape::new();
    let x = tape.param(Tensor::vector(x0.clone()));
    let f = x.exp()?.mul(x.square()?)?.sum()?;
    let grad = tape.backward(f, true)?.get(x).expect("x reaches f");
    let directional = grad.mul(tape.constant(Tensor::vector(v.clone())))?.sum()?;
    let hv = tape.backward(directional, false)?.tensor(x);

    let h = 1e-6;
    let plus: Vec<f64> = x0.iter().zip(&v).map(|(a, b)| a + h * b).collect();
    let minus: Vec<f64> = x0.iter().zip(&v).map(|(a, b)| a - h * b).collect();
    let fd: Vec<f64> = f_grad(&plus).iter().zip(f_grad(&minus)).map(|(p, m)| (p - m) / (2.0 * h)).collect();

    println!("f(x)          = {:.6}", f.item());
    println!("H v (tape)    = {:?}", hv.data());
    println!("H v (central) = {fd:?}");
    let err = hv.data().iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("max abs difference {err:.2e}");
    Ok(())
}
