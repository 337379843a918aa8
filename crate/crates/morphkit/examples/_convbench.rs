use morphkit::tensor::{Tape, Tensor, Pad};
use morphkit::rng::Rng;
use std::time::Instant;

fn t(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-0.5, 0.5)).collect()).unwrap()
}

fn main() {
    let mut rng = Rng::new(1);
    // TN-like stack on [64,28,28,3]
    let x0 = t(&[64, 28, 28, 3], &mut rng);
    let k1 = t(&[3, 3, 3, 16], &mut rng);
    let k2 = t(&[3, 3, 16, 32], &mut rng);
    let k3 = t(&[3, 3, 32, 16], &mut rng);
    let k4 = t(&[3, 3, 16, 1], &mut rng);
    let reps = 10;
    let start = Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let a = tape.leaf(k1.clone(), true);
        let b = tape.leaf(k2.clone(), true);
        let c = tape.leaf(k3.clone(), true);
        let d = tape.leaf(k4.clone(), true);
        let h1 = tape.conv2d(x, a, 2, Pad::Same).unwrap();
        let h1 = tape.relu(h1);
        let h2 = tape.conv2d(h1, b, 2, Pad::Same).unwrap();
        let h2 = tape.relu(h2);
        let u1 = tape.upsample2(h2).unwrap();
        let h3 = tape.conv2d(u1, c, 1, Pad::Same).unwrap();
        let h3 = tape.relu(h3);
        let u2 = tape.upsample2(h3).unwrap();
        let h4 = tape.conv2d(u2, d, 1, Pad::Same).unwrap();
        let s = tape.sigmoid(h4);
        let loss = tape.mean_all(s).unwrap();
        let g = tape.backward(loss).unwrap();
        std::hint::black_box(g.wrt(a));
    }
    let dt = start.elapsed().as_secs_f64() / reps as f64;
    // fwd flops ~1.7e8, fwd+bwd ~5e8
    println!("TN fwd+bwd batch64 28x28x3: {:.1} ms/iter  (~{:.1} Gflop/s)", dt * 1e3, 5e8 / dt / 1e9);
}
