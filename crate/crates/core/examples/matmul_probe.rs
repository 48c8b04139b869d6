// Raw kernel throughput probe at training-relevant sizes.
use pccot_core::Tensor;
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a = Tensor::<f32>::new(m, k, (0..m * k).map(|i| (i % 7) as f32 * 0.1).collect());
    let b = Tensor::<f32>::new(k, n, (0..k * n).map(|i| (i % 5) as f32 * 0.1).collect());
    let start = Instant::now();
    let mut sink = 0.0f32;
    for _ in 0..reps {
        let c = pccot_core::tape::test_hooks::matmul(&a, &b);
        sink += c.data()[0];
    }
    let dt = start.elapsed().as_secs_f64();
    let gflops = (2.0 * m as f64 * k as f64 * n as f64 * reps as f64) / dt / 1e9;
    println!("[{m}x{k}]x[{k}x{n}]: {gflops:.2} GFLOP/s (sink {sink})");
}

fn main() {
    bench(75, 32, 32, 20000);
    bench(75, 32, 128, 8000);
    bench(75, 128, 32, 8000);
    bench(1, 32, 128, 100000);
    bench(8, 32, 32, 100000);
    bench(75, 24, 96, 8000);
}
