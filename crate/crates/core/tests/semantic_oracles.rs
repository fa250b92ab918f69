#![allow(clippy::needless_range_loop)]

mod common;

use std::sync::Arc;

use cdsr_core::corpus::{Domain, ItemRef};
use cdsr_core::gateway::{build_item_prompt, Gateway, PromptTemplates, ResponseCache, StubEmbedder, StubMode, StubSummarizer};
use cdsr_core::semantic::{assemble_global_table, kmeans, partition_sequence, pca_project, DomainNouns};
use cdsr_core::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn pca_matches_a_dense_eigensolver_up_to_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (n, dim, d) = (50, 12, 8);
    let rows = common::gaussian(&mut rng, n, dim, 1.0).matmul(&common::gaussian(&mut rng, dim, dim, 1.0));
    let (projected, report) = pca_project(&rows, d).unwrap();

    let mean: Vec<f64> = (0..dim).map(|j| (0..n).map(|r| rows.get(r, j)).sum::<f64>() / n as f64).collect();
    let centred: Vec<Vec<f64>> = (0..n).map(|r| (0..dim).map(|j| rows.get(r, j) - mean[j]).collect()).collect();
    let mut cov = vec![vec![0.0; dim]; dim];
    for row in &centred {
        for i in 0..dim {
            for j in 0..dim {
                cov[i][j] += row[i] * row[j] / (n - 1) as f64;
            }
        }
    }
    let (values, vectors) = common::jacobi_eigen(cov);
    for k in 0..d {
        assert!((report.eigenvalues[k] - values[k]).abs() < 1e-8 * values[0], "eigenvalue {k}");
        let oracle: Vec<f64> = centred.iter().map(|row| (0..dim).map(|j| row[j] * vectors[j][k]).sum()).collect();
        let ours: Vec<f64> = (0..n).map(|r| projected.get(r, k)).collect();
        let same: f64 = ours.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let flipped: f64 = ours.iter().zip(&oracle).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max);
        assert!(same.min(flipped) < 1e-5, "component {k}: {same} / {flipped}");
    }
}

fn inertia(points: &Mat, labels: &[usize], k: usize) -> f64 {
    let dim = points.cols;
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for j in 0..dim {
            sums[l][j] += points.get(i, j);
        }
    }
    labels.iter().enumerate().map(|(i, &l)| (0..dim).map(|j| (points.get(i, j) - sums[l][j] / counts[l] as f64).powi(2)).sum::<f64>()).sum()
}

#[test]
fn kmeans_beats_every_random_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let points = common::gaussian(&mut rng, 200, 5, 1.0);
    let k = 10;
    let a = kmeans(&points, k, 3).unwrap();
    let ours = inertia(&points, &a.labels, k);
    assert!((ours - a.inertia_history.last().unwrap()).abs() < 1e-9 * ours);
    for trial in 0..20 {
        // every cluster non-empty so the centroid is defined
        let mut labels: Vec<usize> = (0..200).map(|i| i % k).collect();
        for i in (1..200).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        let random = inertia(&points, &labels, k);
        assert!(ours <= random, "trial {trial}: {ours} > {random}");
    }
}

#[test]
fn partition_reconstructs_by_original_index() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let points = common::gaussian(&mut rng, 120, 6, 1.0);
    let a = kmeans(&points, 10, 1).unwrap();
    let mixed: Vec<ItemRef> = (0..300)
        .map(|_| {
            let item = rng.random_range(0..120);
            ItemRef { item, domain: if item < 60 { Domain::A } else { Domain::B } }
        })
        .collect();
    let parts = partition_sequence(&mixed, &a).unwrap();
    assert_eq!(parts.len(), 10);
    // tag every entry with its original index, then sort the concatenation
    let mut next = [0usize; 10];
    let mut tagged = Vec::new();
    for (pos, r) in mixed.iter().enumerate() {
        let c = a.labels[r.item];
        assert_eq!(parts[c][next[c]], *r);
        next[c] += 1;
        tagged.push((c, pos));
    }
    let mut concatenated: Vec<(usize, ItemRef)> = Vec::new();
    for (c, part) in parts.iter().enumerate() {
        let positions: Vec<usize> = tagged.iter().filter(|t| t.0 == c).map(|t| t.1).collect();
        assert_eq!(positions.len(), part.len());
        concatenated.extend(positions.into_iter().zip(part.iter().copied()));
    }
    concatenated.sort_by_key(|&(pos, _)| pos);
    let rebuilt: Vec<ItemRef> = concatenated.into_iter().map(|(_, r)| r).collect();
    assert_eq!(rebuilt, mixed);
}

#[test]
fn every_table_row_equals_a_fresh_single_embedding() {
    let (catalog, ds) = common::synthetic_catalog(700);
    let id_map = &ds.id_map;
    assert!(id_map.len() >= 500, "{} items", id_map.len());
    let dir = tempfile::tempdir().unwrap();
    let embedder = || Arc::new(StubEmbedder::new(5, 64, StubMode::Tokens));
    let gw = Gateway::new(embedder(), Arc::new(StubSummarizer), Some(ResponseCache::new(dir.path())));
    let nouns = DomainNouns::default();
    let table = assemble_global_table(&catalog, id_map, &gw, &PromptTemplates::default(), &nouns).unwrap();

    let fresh = Gateway::new(embedder(), Arc::new(StubSummarizer), None);
    for i in 0..500 {
        let item = catalog.get(id_map.item_id(i)).unwrap();
        let prompt = build_item_prompt(item, nouns.noun(id_map.domain_of(i))).unwrap().text;
        let row = fresh.embed_texts(&[prompt]).unwrap().rows.remove(0);
        let expect: Vec<f64> = row.into_iter().map(f64::from).collect();
        assert_eq!(table.matrix.row(i), expect.as_slice(), "row {i}");
    }
}
