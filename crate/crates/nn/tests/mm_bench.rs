use smv4d_core::tensor::Tensor;
use smv4d_nn::linalg::{matmul, matmul_nt, matmul_tn};

#[test]
#[ignore]
fn bench_matmul() {
    let a = Tensor::<f32>::from_fn(&[488, 48], |i| (i % 17) as f32 * 0.01);
    let b = Tensor::<f32>::from_fn(&[48, 192], |i| (i % 13) as f32 * 0.01);
    let reps = 2000;
    let t0 = std::time::Instant::now();
    for _ in 0..reps { std::hint::black_box(matmul(&a, &b)); }
    let dt = t0.elapsed();
    let flops = 2.0 * 488.0 * 48.0 * 192.0 * reps as f64;
    println!("matmul 488x48x192: {:?}/op, {:.2} GFLOP/s", dt / reps, flops / dt.as_secs_f64() / 1e9);

    let bt = Tensor::<f32>::from_fn(&[192, 48], |i| (i % 13) as f32 * 0.01);
    let t0 = std::time::Instant::now();
    for _ in 0..reps { std::hint::black_box(matmul_nt(&a, &bt)); }
    let dt = t0.elapsed();
    println!("matmul_nt: {:?}/op, {:.2} GFLOP/s", dt / reps, flops / dt.as_secs_f64() / 1e9);

    let g = Tensor::<f32>::from_fn(&[488, 192], |i| (i % 19) as f32 * 0.01);
    let t0 = std::time::Instant::now();
    for _ in 0..reps { std::hint::black_box(matmul_tn(&a, &g)); }
    let dt = t0.elapsed();
    println!("matmul_tn: {:?}/op, {:.2} GFLOP/s", dt / reps, flops / dt.as_secs_f64() / 1e9);
}
