use gadnet::tensor::conv::{conv2d_forward, conv2d_backward};
use ndarray::Array4;
use std::time::Instant;

fn main() {
    // desk stage shapes at batch 16
    let shapes: Vec<(usize, usize, usize, usize, usize)> = vec![
        // (cin, cout, in_size, stride, kernel)
        (3, 32, 32, 2, 3),
        (32, 32, 16, 1, 3),
        (32, 64, 16, 2, 3),
        (64, 64, 8, 1, 3),
        (64, 128, 8, 2, 3),
        (128, 128, 4, 1, 3),
    ];
    let b = 16;
    for (cin, cout, hs, stride, k) in shapes {
        let x = Array4::<f32>::from_elem((b, cin, hs, hs), 0.5);
        let w = Array4::<f32>::from_elem((cout, cin, k, k), 0.01);
        let bias = vec![0.0f32; cout];
        let os = (hs + 2*(k/2) - k)/stride + 1;
        let flops_fwd = 2.0 * (b*os*os*cout*cin*k*k) as f64;
        let reps = 50;
        let t = Instant::now();
        let mut patches = None;
        for _ in 0..reps {
            let r = conv2d_forward(&x.view(), &w.view(), &bias, stride, k/2, true);
            patches = r.1;
        }
        let fwd = t.elapsed().as_secs_f64() / reps as f64;
        let gout = Array4::<f32>::from_elem((b, cout, os, os), 0.1);
        let t = Instant::now();
        for _ in 0..reps {
            let _ = conv2d_backward(&gout.view(), &w.view(), patches.as_ref(), (b, cin, hs, hs), stride, k/2, true, true, true);
        }
        let bwd = t.elapsed().as_secs_f64() / reps as f64;
        println!("cin{cin:4} cout{cout:4} in{hs:3} s{stride}: fwd {:7.3} ms ({:5.1} GF/s)  bwd {:7.3} ms ({:5.1} GF/s)",
            fwd*1e3, flops_fwd/fwd/1e9, bwd*1e3, 3.0*flops_fwd/bwd/1e9);
    }
}
