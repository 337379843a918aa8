use std::time::Instant;

fn main() {
    let n = 16_000_000usize; // 128 MB
    let src: Vec<f64> = (0..n).map(|i| i as f64).collect();
    // alloc-zero cost
    let t0 = Instant::now();
    let mut dst = vec![0.0f64; n];
    let t_alloc = t0.elapsed().as_secs_f64();
    // copy cost
    let t0 = Instant::now();
    dst.copy_from_slice(&src);
    let t_copy = t0.elapsed().as_secs_f64();
    std::hint::black_box(&dst);
    // streaming add
    let t0 = Instant::now();
    for (d, s) in dst.iter_mut().zip(&src) { *d += *s; }
    let t_add = t0.elapsed().as_secs_f64();
    std::hint::black_box(&dst);
    let mb = (n * 8) as f64 / 1e6;
    println!("alloc+zero 128MB: {:.1} ms ({:.1} GB/s write)", t_alloc * 1e3, mb / 1e3 / t_alloc);
    println!("copy 128MB:       {:.1} ms ({:.1} GB/s r+w)", t_copy * 1e3, 2.0 * mb / 1e3 / t_copy);
    println!("add 128MB:        {:.1} ms ({:.1} GB/s r+w)", t_add * 1e3, 3.0 * mb / 1e3 / t_add);
}
