#![allow(dead_code)]

use flowsense::ingest::DatasetTable;
use flowsense::linalg::DenseMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Standard normal features `x0..x{d-1}`; the label is `1[x0 + x1 > 0]`.
pub fn sum_rule_table(n: usize, d: usize, seed: u64) -> DatasetTable {
    let mut r = rng(seed);
    let x = gaussian_matrix(n, d, &mut r);
    let labels = (0..n).map(|i| u8::from(x.get(i, 0) + x.get(i, 1) > 0.0)).collect();
    let names = (0..d).map(|j| format!("x{j}")).collect();
    DatasetTable::new(x, names, labels).unwrap()
}

/// Two well separated Gaussian blobs in `d` dimensions, balanced classes.
pub fn blobs_table(n: usize, d: usize, seed: u64) -> DatasetTable {
    let mut r = rng(seed);
    let mut labels = Vec::with_capacity(n);
    let x = DenseMatrix::from_fn(n, d, |i, j| {
        let y = (i % 2) as f64;
        if j == 0 {
            labels.push(y as u8);
        }
        let centre = if j < 2 { 4.0 * y - 2.0 } else { 0.0 };
        let z: f64 = StandardNormal.sample(&mut r);
        centre + z * 0.7
    });
    let names = (0..d).map(|j| format!("f{j}")).collect();
    DatasetTable::new(x, names, labels).unwrap()
}

/// Writes a CSV with a numeric feature block, one categorical column and a
/// 0/1 `label`, in the layout of the built-in schemas.
pub fn write_flow_csv(path: &std::path::Path, rows: usize, seed: u64) {
    use rand::Rng;
    let mut r = rng(seed);
    let mut out = String::from("dur,sbytes,dbytes,rate,proto,label\n");
    for i in 0..rows {
        let y = i % 3 == 0;
        let shift = if y { 1.5 } else { -1.5 };
        let mut v = |s: f64| {
            let z: f64 = StandardNormal.sample(&mut r);
            s + z
        };
        let (a, b, c, d) = (v(shift), v(shift * 0.5), v(0.0), v(-shift));
        let proto = ["tcp", "udp", "icmp"][r.random_range(0..3)];
        out.push_str(&format!("{a},{b},{c},{d},{proto},{}\n", u8::from(y)));
    }
    std::fs::write(path, out).unwrap();
}
