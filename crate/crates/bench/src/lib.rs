//! Fixtures shared by the benchmarks.

use cdsr_core::corpus::{filter_and_sequence, ingest_records, split_leave_one_out, DomainLabels, FilterThresholds, IdMap, SplitDataset};
use cdsr_core::model::{Model, ModelConfig};
use cdsr_core::semantic::{GlobalTable, SemanticStore};
use cdsr_core::synthetic::{generate, SyntheticConfig};
use cdsr_core::tensor::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
}

pub fn store_for(id_map: IdMap, d_llm: usize, d: usize, k: usize) -> SemanticStore {
    let global = GlobalTable { matrix: gaussian(id_map.len(), d_llm, 1), id_map };
    SemanticStore::build(global, d, k, 1).expect("semantic store")
}

pub fn random_store(n_per_domain: usize, d_llm: usize, d: usize) -> SemanticStore {
    let ids = |p: &str| (0..n_per_domain).map(|i| format!("{p}{i:05}")).collect();
    store_for(IdMap::new(DomainLabels::default(), ids("a"), ids("b")), d_llm, d, 4)
}

pub fn synthetic_dataset(users: usize) -> SplitDataset {
    let data = generate(&SyntheticConfig { users, ..Default::default() });
    let log = ingest_records(data.records.iter().cloned().enumerate(), &data.catalog, &data.labels).expect("ingest");
    let corpus = filter_and_sequence(&log, FilterThresholds::default(), &data.labels).expect("filter");
    split_leave_one_out(&corpus)
}

pub fn model(store: &SemanticStore, d: usize, l_max: usize) -> Model {
    Model::new(ModelConfig { d, l_max, ..Default::default() }, store, 7).expect("model")
}
