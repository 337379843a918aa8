use morphkit::tensor::matmul_slices;
use morphkit::rng::Rng;
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let mut rng = Rng::new(3);
    let a: Vec<f64> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let b: Vec<f64> = (0..k * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let t0 = Instant::now();
    for _ in 0..reps {
        std::hint::black_box(matmul_slices(&a, &b, m, k, n));
    }
    let dt = t0.elapsed().as_secs_f64() / reps as f64;
    println!("{m}x{k}x{n}: {:.2} ms  ({:.1} Gflop/s)", dt * 1e3, 2.0 * (m * k * n) as f64 / dt / 1e9);
}

fn main() {
    bench(12544, 27, 16, 20);    // enc1 fwd
    bench(3136, 144, 32, 20);    // enc2 fwd
    bench(12544, 288, 16, 20);   // dec1 fwd
    bench(50176, 144, 1, 20);    // dec2 fwd
    bench(288, 12544, 16, 20);   // dec1 bwd_k (colsT x gout)
    bench(64, 2352, 1024, 20);   // MLP fc1
    bench(512, 512, 512, 10);    // reference square
}
