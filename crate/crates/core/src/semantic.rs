//! Frozen global item table, PCA-initialised local tables and item clustering.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Domain, IdMap, ItemCatalog, ItemRef};
use crate::gateway::cache::{decode_embedding, encode_embedding, write_atomic};
use crate::gateway::{Gateway, GatewayError, PromptTemplates};
use crate::tensor::Mat;

#[derive(Debug, Error)]
pub enum SemanticError {
    #[error("items missing from catalog: {0:?}")]
    MissingCatalogItems(Vec<String>),
    #[error("embedding failed for items {items:?}: {reason}")]
    EmbeddingFailed { items: Vec<String>, reason: String },
    #[error("requested local dimension {d} exceeds limit {limit} (d_llm {d_llm}, domain items {items})")]
    DimensionTooLarge { d: usize, limit: usize, d_llm: usize, items: usize },
    #[error("invalid cluster count {k} for {n} items")]
    InvalidK { k: usize, n: usize },
    #[error("item {0} has no cluster label")]
    Unlabelled(usize),
    #[error("corrupt table file {0}")]
    Corrupt(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// `E^LLM`: one frozen row per item, domain A rows first.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalTable {
    pub matrix: Mat,
    pub id_map: IdMap,
}

#[derive(Serialize, Deserialize)]
struct TableSidecar {
    rows: usize,
    dim: usize,
    id_map_checksum: String,
    id_map: IdMap,
}

fn mat_to_f32_bytes(m: &Mat) -> Vec<u8> {
    let v: Vec<f32> = m.data.iter().map(|&x| x as f32).collect();
    encode_embedding(&v)
}

fn mat_from_f32_bytes(bytes: &[u8], rows: usize, cols: usize, what: &str) -> Result<Mat, SemanticError> {
    let v = decode_embedding(bytes).ok_or_else(|| SemanticError::Corrupt(what.to_string()))?;
    if v.len() != rows * cols {
        return Err(SemanticError::Corrupt(format!("{what}: expected {} values, found {}", rows * cols, v.len())));
    }
    Ok(Mat::from_vec(rows, cols, v.into_iter().map(f64::from).collect()))
}

impl GlobalTable {
    pub fn dim(&self) -> usize {
        self.matrix.cols
    }

    pub fn domain_rows(&self, d: Domain) -> Mat {
        let idx: Vec<usize> = self.id_map.domain_range(d).collect();
        self.matrix.select_rows(&idx)
    }

    pub fn checksum(&self) -> String {
        checksum_mat(&self.matrix)
    }

    pub fn save(&self, dir: &Path) -> Result<(), SemanticError> {
        fs::create_dir_all(dir)?;
        write_atomic(&dir.join("global.bin"), &mat_to_f32_bytes(&self.matrix))?;
        let side = TableSidecar {
            rows: self.matrix.rows,
            dim: self.matrix.cols,
            id_map_checksum: self.id_map.checksum(),
            id_map: self.id_map.clone(),
        };
        write_atomic(&dir.join("global.json"), serde_json::to_string_pretty(&side)?.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SemanticError> {
        let side_text = fs::read_to_string(dir.join("global.json"))?;
        let side: TableSidecar = serde_json::from_str(&side_text)?;
        let id_map = IdMap::from_json(&serde_json::to_string(&side.id_map)?).map_err(|e| SemanticError::Corrupt(e.to_string()))?;
        let matrix = mat_from_f32_bytes(&fs::read(dir.join("global.bin"))?, side.rows, side.dim, "global.bin")?;
        Ok(Self { matrix, id_map })
    }
}

pub fn checksum_mat(m: &Mat) -> String {
    let mut h = Sha256::new();
    h.update((m.rows as u64).to_le_bytes());
    h.update((m.cols as u64).to_le_bytes());
    for x in &m.data {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Human-readable nouns used in the item template, per domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainNouns {
    pub a: String,
    pub b: String,
}

impl Default for DomainNouns {
    fn default() -> Self {
        Self { a: "cloth".into(), b: "sport".into() }
    }
}

impl DomainNouns {
    pub fn noun(&self, d: Domain) -> &str {
        match d {
            Domain::A => &self.a,
            Domain::B => &self.b,
        }
    }
}

/// Renders one item prompt per id-map row.
pub fn item_prompts(
    catalog: &ItemCatalog,
    id_map: &IdMap,
    templates: &PromptTemplates,
    nouns: &DomainNouns,
) -> Result<Vec<String>, SemanticError> {
    let mut missing = Vec::new();
    let mut prompts = Vec::with_capacity(id_map.len());
    for idx in 0..id_map.len() {
        let id = id_map.item_id(idx);
        match catalog.get(id) {
            Some(item) => prompts.push(templates.item_prompt(item, nouns.noun(id_map.domain_of(idx)))?.text),
            None => missing.push(id.to_string()),
        }
    }
    if !missing.is_empty() {
        return Err(SemanticError::MissingCatalogItems(missing));
    }
    Ok(prompts)
}

pub fn assemble_global_table(
    catalog: &ItemCatalog,
    id_map: &IdMap,
    gateway: &Gateway,
    templates: &PromptTemplates,
    nouns: &DomainNouns,
) -> Result<GlobalTable, SemanticError> {
    let prompts = item_prompts(catalog, id_map, templates, nouns)?;
    let emb = gateway.embed_texts(&prompts).map_err(|e| match e {
        GatewayError::EmbeddingFailed { indices, reason } => {
            SemanticError::EmbeddingFailed { items: indices.iter().map(|&i| id_map.item_id(i).to_string()).collect(), reason }
        }
        other => SemanticError::Gateway(other),
    })?;
    let data = emb.rows.iter().flatten().map(|&x| f64::from(x)).collect();
    Ok(GlobalTable { matrix: Mat::from_vec(id_map.len(), emb.dim, data), id_map: id_map.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalSource {
    PcaInit,
    Scratch,
}

/// `E^A` or `E^B`, indexed by local (within-domain) item index.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalTable {
    pub matrix: Mat,
    pub source: LocalSource,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaReport {
    /// Eigenvalues of the sample covariance, descending, for the retained components.
    pub eigenvalues: Vec<f64>,
    pub rank: usize,
    pub zero_padded: usize,
}

/// Projects mean-centred rows onto the top-`d` principal directions.
///
/// Components follow descending eigenvalue order; each component's largest-magnitude
/// coordinate is made positive. Directions beyond the numerical rank are zero.
pub fn pca_project(rows: &Mat, d: usize) -> Result<(Mat, PcaReport), SemanticError> {
    let (n, dim) = rows.shape();
    if d > dim || d > n {
        return Err(SemanticError::DimensionTooLarge { d, limit: dim.min(n), d_llm: dim, items: n });
    }
    let mut mean = vec![0.0; dim];
    for r in 0..n {
        for (m, x) in mean.iter_mut().zip(rows.row(r)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centred = rows.clone();
    for r in 0..n {
        for (x, m) in centred.row_mut(r).iter_mut().zip(&mean) {
            *x -= m;
        }
    }
    let denom = if n > 1 { (n - 1) as f64 } else { 1.0 };
    let cov = centred.matmul_at(&centred).map(|x| x / denom);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(dim, dim, &cov.data));

    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = (top * 1e-10).max(1e-14);
    let rank = order.iter().filter(|&&i| eig.eigenvalues[i] > tol).count();

    let mut components = Mat::zeros(dim, d);
    let mut eigenvalues = Vec::with_capacity(d);
    for (k, &ci) in order.iter().take(d).enumerate() {
        let lambda = eig.eigenvalues[ci];
        if lambda <= tol {
            eigenvalues.push(0.0);
            continue;
        }
        eigenvalues.push(lambda);
        let col: Vec<f64> = (0..dim).map(|j| eig.eigenvectors[(j, ci)]).collect();
        let pivot = col.iter().enumerate().fold(0, |best, (j, v)| if v.abs() > col[best].abs() { j } else { best });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (j, v) in col.iter().enumerate() {
            components.set(j, k, sign * v);
        }
    }
    let zero_padded = d.saturating_sub(rank);
    if zero_padded > 0 {
        log::warn!("PCA input has rank {rank} < {d}; {zero_padded} trailing components are zero");
    }
    Ok((centred.matmul(&components), PcaReport { eigenvalues, rank, zero_padded }))
}

pub fn pca_local_init(global: &GlobalTable, domain: Domain, d: usize) -> Result<(LocalTable, PcaReport), SemanticError> {
    let rows = global.domain_rows(domain);
    let (matrix, report) = pca_project(&rows, d)?;
    Ok((LocalTable { matrix, source: LocalSource::PcaInit }, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub k: usize,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn single(n: usize, dim: usize) -> Self {
        Self { labels: vec![0; n], centroids: vec![vec![0.0; dim]], k: 1, inertia_history: Vec::new() }
    }

    pub fn label(&self, item: usize) -> Option<usize> {
        self.labels.get(item).copied()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub const KMEANS_MAX_ITERS: usize = 100;

/// Lloyd's algorithm with seeded k-means++ initialisation on raw rows.
pub fn kmeans(points: &Mat, k: usize, seed: u64) -> Result<ClusterAssignment, SemanticError> {
    let n = points.rows;
    if k == 0 || k > n {
        return Err(SemanticError::InvalidK { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    centroids.push(points.row(rng.random_range(0..n)).to_vec());
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points.row(pick).to_vec();
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &c));
        }
        centroids.push(c);
    }

    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        let mut inertia = 0.0;
        for i in 0..n {
            let p = points.row(i);
            let (best, dist) = centroids.iter().enumerate().map(|(c, cen)| (c, sq_dist(p, cen))).fold((0, f64::INFINITY), |acc, x| {
                if x.1 < acc.1 {
                    x
                } else {
                    acc
                }
            });
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
            inertia += dist;
        }
        history.push(inertia);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; points.cols]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, x) in sums[labels[i]].iter_mut().zip(points.row(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .map(|i| (i, sq_dist(points.row(i), &centroids[labels[i]])))
                    .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc })
                    .0;
                log::debug!("k-means cluster {c} empty; re-seeding at item {far}");
                centroids[c] = points.row(far).to_vec();
                counts[c] = 1;
            }
        }
    }
    Ok(ClusterAssignment { labels, centroids, k, inertia_history: history })
}

pub fn cluster_items(global: &GlobalTable, k: usize, seed: u64) -> Result<ClusterAssignment, SemanticError> {
    kmeans(&global.matrix, k, seed)
}

/// Splits a mixed sequence by cluster label, preserving relative order. Sub-sequence `k`
/// may be empty.
pub fn partition_sequence(mixed: &[ItemRef], assignment: &ClusterAssignment) -> Result<Vec<Vec<ItemRef>>, SemanticError> {
    let mut parts = vec![Vec::new(); assignment.k];
    for r in mixed {
        let label = assignment.label(r.item).ok_or(SemanticError::Unlabelled(r.item))?;
        parts[label].push(*r);
    }
    Ok(parts)
}

/// Everything derived from the item catalog before training.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticStore {
    pub global: GlobalTable,
    pub local_a: LocalTable,
    pub local_b: LocalTable,
    pub clusters: ClusterAssignment,
}

#[derive(Serialize, Deserialize)]
struct LocalSidecar {
    d: usize,
    rows_a: usize,
    rows_b: usize,
}

impl SemanticStore {
    pub fn build(global: GlobalTable, d: usize, k: usize, seed: u64) -> Result<Self, SemanticError> {
        let (local_a, _) = pca_local_init(&global, Domain::A, d)?;
        let (local_b, _) = pca_local_init(&global, Domain::B, d)?;
        let clusters = cluster_items(&global, k, seed)?;
        Ok(Self { global, local_a, local_b, clusters })
    }

    pub fn local(&self, d: Domain) -> &LocalTable {
        match d {
            Domain::A => &self.local_a,
            Domain::B => &self.local_b,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), SemanticError> {
        self.global.save(dir)?;
        write_atomic(&dir.join("local_a.bin"), &mat_to_f32_bytes(&self.local_a.matrix))?;
        write_atomic(&dir.join("local_b.bin"), &mat_to_f32_bytes(&self.local_b.matrix))?;
        let side = LocalSidecar { d: self.local_a.matrix.cols, rows_a: self.local_a.matrix.rows, rows_b: self.local_b.matrix.rows };
        write_atomic(&dir.join("local.json"), serde_json::to_string_pretty(&side)?.as_bytes())?;
        write_atomic(&dir.join("clusters.json"), serde_json::to_string(&self.clusters)?.as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, SemanticError> {
        let global = GlobalTable::load(dir)?;
        let side: LocalSidecar = serde_json::from_str(&fs::read_to_string(dir.join("local.json"))?)?;
        let a = mat_from_f32_bytes(&fs::read(dir.join("local_a.bin"))?, side.rows_a, side.d, "local_a.bin")?;
        let b = mat_from_f32_bytes(&fs::read(dir.join("local_b.bin"))?, side.rows_b, side.d, "local_b.bin")?;
        let clusters: ClusterAssignment = serde_json::from_str(&fs::read_to_string(dir.join("clusters.json"))?)?;
        Ok(Self {
            global,
            local_a: LocalTable { matrix: a, source: LocalSource::PcaInit },
            local_b: LocalTable { matrix: b, source: LocalSource::PcaInit },
            clusters,
        })
    }
}
