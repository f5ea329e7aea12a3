//! Backpropagated gradients against central finite differences.
//!
//!     cargo run --release --example gradient_check

use ctql::qnet::init_params_with;
use ctql::rng::RngState;

fn main() {
    let (net, _, _) = init_params_with(2, &[32, 32], 11, 1e-3);
    let mut rng = RngState::from_seed(5);
    let step = 1e-5;
    for _ in 0..5 {
        let z = vec![rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0)];
        let (q, grad) = net.value_and_input_gradient(&z);
        let fd: Vec<f64> = (0..2)
            .map(|k| {
                let (mut p, mut m) = (z.clone(), z.clone());
                p[k] += step;
                m[k] -= step;
                (net.value(&p) - net.value(&m)) / (2.0 * step)
            })
            .collect();
        println!(
            "z = ({:+.3}, {:+.3})  Q = {q:+.5}  dQ/dz = ({:+.6}, {:+.6})  fd = ({:+.6}, {:+.6})",
            z[0], z[1], grad[0], grad[1], fd[0], fd[1]
        );
    }

    let batch: Vec<(Vec<f64>, f64)> = (0..8)
        .map(|_| (vec![rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0)], rng.uniform()))
        .collect();
    let (loss, grads) = net.loss_and_gradient(&batch).expect("shapes match");
    let dir: Vec<f64> = (0..net.num_params()).map(|_| rng.standard_normal()).collect();
    let (mut plus, mut minus) = (net.clone(), net.clone());
    for ((p, m), d) in plus.params_mut().zip(minus.params_mut()).zip(&dir) {
        *p += step * d;
        *m -= step * d;
    }
    let fd = (plus.mse_loss(&batch).unwrap() - minus.mse_loss(&batch).unwrap()) / (2.0 * step);
    let analytic: f64 = grads.params().zip(&dir).map(|(g, d)| g * d).sum();
    println!("\nloss {loss:.6}: directional derivative {analytic:.8} vs fd {fd:.8}");
}
