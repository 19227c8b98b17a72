use asq_core::graph::Graph;
use asq_core::tensor::Tensor;
use std::time::Instant;

fn bench(n: usize, cin: usize, cout: usize, hw: usize, stride: usize, iters: usize) -> (f64, f64) {
    let x = Tensor::full(vec![n, cin, hw, hw], 0.5);
    let w = Tensor::full(vec![cout, cin, 3, 3], 0.01);
    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..iters {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let wv = g.leaf(w.clone(), true);
        let y = g.conv2d(xv, wv, stride, 1).unwrap();
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        sink += g.value(loss).data()[0];
    }
    let dt = t0.elapsed().as_secs_f64() / iters as f64;
    let hout = hw / stride;
    let macs = (n * cin * cout * hout * hout * 9) as f64;
    // fwd + input-grad + weight-grad ~ 3x the forward MACs
    (dt, 3.0 * 2.0 * macs / dt / 1e9 + sink * 0.0)
}

fn main() {
    for (n, cin, cout, hw, st) in [
        (64, 8, 8, 32, 1),
        (64, 16, 16, 16, 1),
        (64, 32, 32, 8, 1),
        (64, 3, 8, 32, 1),
        (128, 8, 8, 32, 1),
    ] {
        let (dt, gf) = bench(n, cin, cout, hw, st, 3);
        println!("n={n} {cin}->{cout} @{hw}x{hw}/s{st}: {:.1} ms/iter, ~{gf:.1} GFLOP/s (fwd+bwd)", dt * 1e3);
    }
}
