//! Temporary: conv2d wrapper vs raw GEMM cost on the hot shapes.

use std::time::Instant;

use candid::tensor::{Padding, Tensor};

fn bench_conv(cin: usize, cout: usize, hw: usize, reps: u32) {
    let x = Tensor::new(&[cin, hw, hw], vec![0.3; cin * hw * hw], true).unwrap();
    let w = Tensor::new(&[cout, cin, 3, 3], vec![0.01; cout * cin * 9], true).unwrap();
    let b = Tensor::new(&[cout], vec![0.0; cout], true).unwrap();
    let t = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(x.conv2d(&w, &b, Padding::Same).unwrap());
    }
    let fwd = t.elapsed() / reps;
    let t = Instant::now();
    for _ in 0..reps {
        let y = x.conv2d(&w, &b, Padding::Same).unwrap();
        y.sum().unwrap().backward().unwrap();
        x.zero_grad();
        w.zero_grad();
        b.zero_grad();
    }
    let both = t.elapsed() / reps;
    let mflop = 2.0 * (cout * cin * 9 * hw * hw) as f64 / 1e6;
    println!(
        "conv {cin:>3}->{cout:>3} @{hw}x{hw}: fwd {fwd:>10?} ({:.1} GF/s), fwd+bwd {both:>10?}",
        mflop / fwd.as_secs_f64() / 1e3
    );
}

fn bench_raw_gemm(m: usize, k: usize, n: usize, reps: u32) {
    let a = vec![0.3f32; m * k];
    let b = vec![0.2f32; k * n];
    let mut c = vec![0.0f32; m * n];
    let t = Instant::now();
    for _ in 0..reps {
        unsafe {
            matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0, c.as_mut_ptr(), n as isize, 1);
        }
        std::hint::black_box(&c);
    }
    let el = t.elapsed() / reps;
    let gf = 2.0 * (m * k * n) as f64 / el.as_secs_f64() / 1e9;
    println!("gemm {m}x{k}x{n}: {el:?} ({gf:.1} GF/s)");
}

fn main() {
    bench_conv(32, 16, 48, 50);
    bench_conv(16, 16, 48, 50);
    bench_conv(16, 136, 48, 50);
    bench_conv(2, 16, 48, 50);
    bench_conv(108, 16, 48, 50);
    bench_raw_gemm(136, 144, 2304, 50);
    bench_raw_gemm(16, 288, 2304, 50);
}
