use gadnet::tensor::conv::im2col;
use ndarray::{Array2, Array4, linalg::general_mat_mul};
use std::time::Instant;

fn main() {
    let b = 16;
    let (cin, cout, hs, stride, k) = (32usize, 32usize, 16usize, 1usize, 3usize);
    let x = Array4::<f32>::from_elem((b, cin, hs, hs), 0.5);
    let w = Array2::<f32>::from_elem((cout, cin*k*k), 0.01);
    let reps = 100;

    let t = Instant::now();
    let mut patches = im2col(&x.view(), k, stride, k/2, );
    for _ in 0..reps { patches = im2col(&x.view(), k, stride, k/2); }
    let t_im2col = t.elapsed().as_secs_f64() / reps as f64;

    let m = patches.nrows();
    let mut out = Array2::<f32>::zeros((m, cout));
    // transposed-view B
    let t = Instant::now();
    for _ in 0..reps { general_mat_mul(1.0f32, &patches, &w.t(), 0.0, &mut out); }
    let t_gemm_t = t.elapsed().as_secs_f64() / reps as f64;
    // contiguous B
    let wt = w.t().to_owned();
    let t = Instant::now();
    for _ in 0..reps { general_mat_mul(1.0f32, &patches, &wt, 0.0, &mut out); }
    let t_gemm_c = t.elapsed().as_secs_f64() / reps as f64;

    let flops = 2.0 * (m * cin*k*k * cout) as f64;
    println!("im2col: {:.3} ms ({:.1} MB written)", t_im2col*1e3, (m*cin*k*k*4) as f64/1e6);
    println!("gemm (B transposed view): {:.3} ms ({:.1} GF/s)", t_gemm_t*1e3, flops/t_gemm_t/1e9);
    println!("gemm (B contiguous):      {:.3} ms ({:.1} GF/s)", t_gemm_c*1e3, flops/t_gemm_c/1e9);

    // fresh allocation cost
    let t = Instant::now();
    for _ in 0..reps { let z = Array2::<f32>::zeros((m, cin*k*k)); std::hint::black_box(&z); }
    println!("alloc+zero patches: {:.3} ms", t.elapsed().as_secs_f64()/reps as f64*1e3);
}
