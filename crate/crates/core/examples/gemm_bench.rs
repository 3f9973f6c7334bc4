use snet::{Matrix, Rng};
use std::time::Instant;

fn main() {
    let mut rng = Rng::new(0);
    for &(m, k, n) in &[(1024, 1024, 1024), (120, 120, 2400), (128, 784, 360), (128, 840, 840), (128, 2800, 2800), (840, 128, 840), (128, 840, 360)] {
        let a = Matrix::from_vec(m, k, (0..m * k).map(|_| rng.normal()).collect()).unwrap();
        let b = Matrix::from_vec(k, n, (0..k * n).map(|_| rng.normal()).collect()).unwrap();
        let reps = (2e9 / (2.0 * (m * n * k) as f64)).ceil() as usize;
        let t = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(a.matmul(&b).unwrap());
        }
        let dt = t.elapsed().as_secs_f64();
        let at = a.transpose();
        let t2 = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(at.t_matmul(&b).unwrap());
        }
        let dt2 = t2.elapsed().as_secs_f64();
        let bt = b.transpose();
        let t3 = Instant::now();
        for _ in 0..reps {
            std::hint::black_box(a.matmul_t(&bt).unwrap());
        }
        let dt3 = t3.elapsed().as_secs_f64();
        let f = 2.0 * (m * n * k * reps) as f64;
        println!("{m}x{k}x{n}: nn {:.1} tn {:.1} nt {:.1} GFLOP/s", f / dt / 1e9, f / dt2 / 1e9, f / dt3 / 1e9);
    }
}
