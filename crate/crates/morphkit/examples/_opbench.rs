use morphkit::tensor::{Tape, Tensor, Pad};
use morphkit::rng::Rng;
use std::time::Instant;

fn t(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-0.5, 0.5)).collect()).unwrap()
}

fn main() {
    let mut rng = Rng::new(1);
    let x0 = t(&[64, 28, 28, 3], &mut rng);
    let k1 = t(&[3, 3, 3, 16], &mut rng);
    let k2 = t(&[3, 3, 16, 32], &mut rng);
    let k3 = t(&[3, 3, 32, 16], &mut rng);
    let k4 = t(&[3, 3, 16, 1], &mut rng);
    let reps = 20;
    let mut stage = vec![0.0f64; 12];
    let names = ["enc1 conv", "relu1", "enc2 conv", "relu2", "up1", "dec1 conv", "relu3", "up2", "dec2 conv", "sigmoid+mean", "backward", "tape drop"];
    for _ in 0..reps {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let a = tape.leaf(k1.clone(), true);
        let b = tape.leaf(k2.clone(), true);
        let c = tape.leaf(k3.clone(), true);
        let d = tape.leaf(k4.clone(), true);
        let mut t0 = Instant::now();
        let mut tick = |slot: usize, t0: &mut Instant| { stage[slot] += t0.elapsed().as_secs_f64(); *t0 = Instant::now(); };
        let h1 = tape.conv2d(x, a, 2, Pad::Same).unwrap(); tick(0, &mut t0);
        let h1 = tape.relu(h1); tick(1, &mut t0);
        let h2 = tape.conv2d(h1, b, 2, Pad::Same).unwrap(); tick(2, &mut t0);
        let h2 = tape.relu(h2); tick(3, &mut t0);
        let u1 = tape.upsample2(h2).unwrap(); tick(4, &mut t0);
        let h3 = tape.conv2d(u1, c, 1, Pad::Same).unwrap(); tick(5, &mut t0);
        let h3 = tape.relu(h3); tick(6, &mut t0);
        let u2 = tape.upsample2(h3).unwrap(); tick(7, &mut t0);
        let h4 = tape.conv2d(u2, d, 1, Pad::Same).unwrap(); tick(8, &mut t0);
        let s = tape.sigmoid(h4);
        let loss = tape.mean_all(s).unwrap(); tick(9, &mut t0);
        let g = tape.backward(loss).unwrap(); tick(10, &mut t0);
        std::hint::black_box(&g);
        drop(g); drop(tape); tick(11, &mut t0);
    }
    for (n, s) in names.iter().zip(&stage) {
        println!("{n:14} {:.2} ms", s / reps as f64 * 1e3);
    }
}
