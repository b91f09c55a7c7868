use std::sync::Arc;
use smv4d_core::scalar::Scalar;
use smv4d_core::tensor::Tensor;
use smv4d_nn::tape::{AttnSpan, Tape};

#[test]
#[ignore]
fn bench_real_sizes() {
    // exp_fast throughput
    let xs: Vec<f32> = (0..100_000).map(|i| (i % 1000) as f32 * 0.01 - 5.0).collect();
    let t0 = std::time::Instant::now();
    let mut acc = 0.0f32;
    for _ in 0..100 {
        for &x in &xs {
            acc += x.exp_fast();
        }
    }
    println!("exp_fast: {:.2} ns/call (acc {acc})", t0.elapsed().as_nanos() as f64 / 10_000_000.0);

    // real inter: 5 spans of 158; real intra: 3 spans of 258; d=48, heads=4
    for (name, n_spans, glen) in [("inter", 5usize, 158usize), ("intra", 3, 258)] {
        let rows = n_spans * glen;
        let q = Tensor::<f32>::from_fn(&[rows, 48], |i| ((i % 23) as f32 - 11.0) * 0.05);
        let spans: Vec<AttnSpan> = (0..n_spans)
            .map(|g| AttnSpan { q0: g * glen, q1: (g + 1) * glen, k0: g * glen, k1: (g + 1) * glen })
            .collect();
        let spans = Arc::new(spans);
        let reps = 100;
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::<f32>::new();
            let qi = tape.input(q.clone());
            let ki = tape.input(q.clone());
            let vi = tape.input(q.clone());
            std::hint::black_box(tape.attention(qi, ki, vi, 4, spans.clone()));
        }
        let per = t0.elapsed() / reps;
        let flops = (n_spans * glen * glen * 48 * 2 * 2) as f64;
        println!("{name} fwd: {per:?} ({:.2} GFLOP/s)", flops / per.as_secs_f64() / 1e9);

        // fwd+bwd
        let t0 = std::time::Instant::now();
        for _ in 0..reps {
            let mut tape = Tape::<f32>::new();
            let qi = tape.param("q", q.clone());
            let ki = tape.param("k", q.clone());
            let vi = tape.param("v", q.clone());
            let o = tape.attention(qi, ki, vi, 4, spans.clone());
            let loss = tape.mse_loss(o, Tensor::zeros(&[rows, 48]), None);
            std::hint::black_box(tape.backward(loss));
        }
        println!("{name} fwd+bwd: {:?}", t0.elapsed() / reps);
    }
}
