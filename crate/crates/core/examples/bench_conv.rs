// Scratch conv micro-benchmark.

use sicl_core::numerics::{tensor, Tape, Tensor};
use std::time::Instant;

fn main() {
    let b = 128;
    let x = Tensor::from_vec(vec![b, 6, 100], (0..b * 600).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let w1 = Tensor::from_vec(vec![32, 6, 5], (0..960).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
    let t0 = Instant::now();
    let mut sink = 0.0;
    for _ in 0..50 {
        let y = tensor::conv1d(&x, &w1, 1).unwrap();
        sink += y.data()[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 50.0 * 2.0 * (b * 32 * 96 * 6 * 5) as f64;
    println!("conv1 fwd: {:.2} GFLOP/s ({sink})", flops / dt / 1e9);

    // full encoder fwd+bwd step cost
    let params = sicl_core::model::EncoderParams::init(6, &mut sicl_core::rng::stream(0, sicl_core::rng::Domain::Init, 0));
    let t0 = Instant::now();
    let iters = 10;
    for _ in 0..iters {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let fwd = params.forward(&mut tape, xv).unwrap();
        let cot = tape.input(Tensor::from_vec(vec![b, 32], vec![0.01; b * 32]).unwrap());
        let p = tape.mul(fwd.z, cot).unwrap();
        let root = tape.sum_all(p);
        let grads = tape.backward(root).unwrap();
        sink += grads.get(fwd.params[0].1).unwrap().data()[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("encoder fwd+bwd [128,6,100]: {:.1} ms/step ({sink})", dt / iters as f64 * 1e3);
}
