//! Fixtures shared by the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use cdsr_core::corpus::{
    filter_and_sequence, ingest_records, split_leave_one_out, DomainLabels, FilterThresholds, IdMap, ItemCatalog, SplitDataset,
};
use cdsr_core::semantic::{GlobalTable, SemanticStore};
use cdsr_core::synthetic::{generate, SyntheticConfig, SyntheticData};
use cdsr_core::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect())
}

pub fn synthetic(users: usize) -> (SyntheticData, SplitDataset) {
    let data = generate(&SyntheticConfig { users, ..Default::default() });
    let log = ingest_records(data.records.iter().cloned().enumerate(), &data.catalog, &data.labels).unwrap();
    let corpus = filter_and_sequence(&log, FilterThresholds::default(), &data.labels).unwrap();
    let ds = split_leave_one_out(&corpus);
    (data, ds)
}

pub fn synthetic_catalog(users: usize) -> (ItemCatalog, SplitDataset) {
    let (data, ds) = synthetic(users);
    (data.catalog, ds)
}

/// Random `E^LLM` over `id_map` plus its PCA tables and clusters.
pub fn random_store(id_map: IdMap, d_llm: usize, d: usize, k: usize, seed: u64) -> SemanticStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let global = GlobalTable { matrix: gaussian(&mut rng, id_map.len(), d_llm, 1.0), id_map };
    SemanticStore::build(global, d, k, seed).unwrap()
}

pub fn numbered_id_map(n_a: usize, n_b: usize) -> IdMap {
    IdMap::new(DomainLabels::default(), (0..n_a).map(|i| format!("a{i:04}")).collect(), (0..n_b).map(|i| format!("b{i:04}")).collect())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix: eigenvalues descending and
/// the matching unit eigenvectors as columns.
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..200 {
        let mut off = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off += a[i][j] * a[i][j];
                }
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = if theta == 0.0 { 1.0 } else { theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt()) };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[y][y].partial_cmp(&a[x][x]).unwrap());
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = (0..n).map(|r| order.iter().map(|&c| v[r][c]).collect()).collect();
    (values, vectors)
}
