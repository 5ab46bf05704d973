//! Tour of the tape-based autodiff engine: build a graph, run ops, take
//! gradients, and verify one of them against a finite difference.
//!
//! Run with: cargo run --example autodiff_basics

use viewdelta::tensor::Graph;

fn main() -> anyhow::Result<()> {
    // y = sum(relu(A·x + b)) with everything trainable.
    let mut g = Graph::new();
    let a = g.leaf(vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75], vec![2, 3], true);
    let x = g.leaf(vec![1.0, 2.0, -1.0], vec![3, 1], true);
    let b = g.leaf(vec![0.1, -0.2], vec![2], true);

    let ax = g.matmul(a, x)?;
    let ax = g.reshape(ax, vec![1, 2])?;
    let z = g.add_bias_rows(ax, b)?;
    let h = g.relu(z);
    let y = g.sum(h);

    println!("forward: y = {}", g.data(y)[0]);

    g.backward(y)?;
    println!("dy/dA = {:?}", g.grad(a).unwrap());
    println!("dy/dx = {:?}", g.grad(x).unwrap());
    println!("dy/db = {:?}", g.grad(b).unwrap());

    // Check dy/dx[0] by central finite difference.
    let eval = |x0: f64| -> anyhow::Result<f64> {
        let mut g = Graph::new();
        let a = g.constant(vec![0.5, -1.0, 2.0, 1.5, 0.25, -0.75], vec![2, 3]);
        let x = g.constant(vec![x0, 2.0, -1.0], vec![3, 1]);
        let b = g.constant(vec![0.1, -0.2], vec![2]);
        let ax = g.matmul(a, x)?;
        let ax = g.reshape(ax, vec![1, 2])?;
        let z = g.add_bias_rows(ax, b)?;
        let h = g.relu(z);
        let y = g.sum(h);
        Ok(g.data(y)[0])
    };
    let h = 1e-6;
    let fd = (eval(1.0 + h)? - eval(1.0 - h)?) / (2.0 * h);
    let an = g.grad(x).unwrap()[0];
    println!("dy/dx[0]: analytic {an:.9}, finite difference {fd:.9}");
    assert!((fd - an).abs() < 1e-6);

    // The same graph API powers softmax/layer_norm/attention/convolutions;
    // every op records its own backward closure on the tape.
    let mut g = Graph::new();
    let q = g.leaf(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2], true);
    let att = g.attention(q, q, q, 1)?;
    let loss = g.mean(att);
    g.backward(loss)?;
    println!("attention grad: {:?}", g.grad(q).unwrap());
    Ok(())
}
