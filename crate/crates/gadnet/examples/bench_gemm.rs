use ndarray::{Array2, linalg::general_mat_mul};
use std::time::Instant;

fn bench_f32(m: usize, k: usize, n: usize, reps: usize) -> f64 {
    let a = Array2::<f32>::from_elem((m, k), 1.01);
    let b = Array2::<f32>::from_elem((k, n), 0.99);
    let mut c = Array2::<f32>::zeros((m, n));
    let t = Instant::now();
    for _ in 0..reps {
        general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    }
    let secs = t.elapsed().as_secs_f64();
    (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / secs / 1e9
}

fn bench_f64(m: usize, k: usize, n: usize, reps: usize) -> f64 {
    let a = Array2::<f64>::from_elem((m, k), 1.01);
    let b = Array2::<f64>::from_elem((k, n), 0.99);
    let mut c = Array2::<f64>::zeros((m, n));
    let t = Instant::now();
    for _ in 0..reps {
        general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    }
    let secs = t.elapsed().as_secs_f64();
    (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / secs / 1e9
}

fn main() {
    // conv-shaped gemms at desk scale, batch 16
    for (m, k, n) in [(4096usize, 27usize, 32usize), (4096, 288, 32), (1024, 576, 64), (256, 1152, 128), (16, 2048, 256), (1024, 1024, 1024)] {
        let g32 = bench_f32(m, k, n, 40);
        let g64 = bench_f64(m, k, n, 20);
        println!("m={m:5} k={k:5} n={n:5}  f32 {g32:6.2} GFLOPS   f64 {g64:6.2} GFLOPS");
    }
}
