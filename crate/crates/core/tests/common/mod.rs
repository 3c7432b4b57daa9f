#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` points distributed uniformly by area on the ellipsoid with semi-axes
/// `(a, b, c)`, by rejection on the area element of the radial map.
pub fn ellipsoid_points(n: usize, axes: [f64; 3], seed: u64) -> Vec<f64> {
    let [a, b, c] = axes;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wmax = (a * b).max(a * c).max(b * c);
    let mut out = Vec::with_capacity(3 * n);
    while out.len() < 3 * n {
        let u: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        let r2: f64 = u.iter().map(|x| x * x).sum();
        if !(1e-6..=1.0).contains(&r2) {
            continue;
        }
        let r = r2.sqrt();
        let u = [u[0] / r, u[1] / r, u[2] / r];
        let w = ((b * c * u[0]).powi(2) + (a * c * u[1]).powi(2) + (a * b * u[2]).powi(2)).sqrt();
        if rng.gen::<f64>() * wmax > w {
            continue;
        }
        out.extend([a * u[0], b * u[1], c * u[2]]);
    }
    out
}

pub fn write_points_csv(path: &std::path::Path, points: &[f64]) {
    let mut text = String::from("x,y,z\n");
    for p in points.chunks(3) {
        text.push_str(&format!("{},{},{}\n", p[0], p[1], p[2]));
    }
    std::fs::write(path, text).unwrap();
}
