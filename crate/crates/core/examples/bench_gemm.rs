use std::time::Instant;
use tokenmix::tensor::{Scalar, Tensor, Tape};

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a = vec![0.5f32; m * k];
    let b = vec![0.25f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let t0 = Instant::now();
    for _ in 0..reps {
        f32::gemm(false, false, m, k, n, &a, &b, &mut c);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "{m}x{k}x{n}: {:.2} GFLOP/s ({:.3} ms/call)",
        2.0 * (m * k * n * reps) as f64 / dt / 1e9,
        dt * 1000.0 / reps as f64
    );
}

fn main() {
    bench(256, 64, 64, 2000);   // qkv/o projections
    bench(256, 32, 256, 2000);  // per-head scores / AV
    bench(256, 64, 256, 2000);  // ffn
    bench(256, 64, 257, 2000);  // logits
    bench(256, 256, 64, 2000);  // AV actually [LxL]@[Lxd_h]
    // elementwise op cost probe: silu over 256x256 via tape
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::filled(vec![256, 256], 0.3f32));
    let t0 = Instant::now();
    for _ in 0..500 {
        let _ = tape.silu(x).unwrap();
    }
    println!("tape silu 256x256: {:.3} ms/call", t0.elapsed().as_secs_f64() * 2.0);
    let mut tape = Tape::<f32>::new();
    let s = tape.constant(Tensor::filled(vec![256, 256], 0.1f32));
    let t0 = Instant::now();
    for _ in 0..500 {
        let _ = tape.softmax_causal_rows(s).unwrap();
    }
    println!("tape softmax 256x256: {:.3} ms/call", t0.elapsed().as_secs_f64() * 2.0);
}
