//! Stage orchestration over an output directory.
//!
//! ```text
//! <out>/prepare   splits.jsonl, split_meta.json, id_map.json, catalog.jsonl
//! <out>/embed     global.{bin,json}, local_{a,b}.bin, local.json, clusters.json
//! <out>/profile   clustered/ and (on demand) single/ profile stores
//! <out>/train/<variant>   checkpoint.bin, report.json, metrics.jsonl
//! <out>/eval/<variant>    valid.json, test.json
//! <out>/ablate    table.json, table.csv
//! <out>/sweep     sweep.json, sweep.csv
//! <out>/cache     provider responses
//! ```
//!
//! Every stage directory also receives `config.json`, the exact configuration that
//! produced it.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    filter_and_sequence, ingest, split_leave_one_out, DomainLabels, FilterThresholds, IdMap, ItemCatalog, Split, SplitDataset, SplitMeta,
};
use crate::evaluator::{evaluate, overlap_views, EvalConfig, MetricReport};
use crate::gateway::cache::write_atomic;
use crate::gateway::{Gateway, PromptTemplates, ProviderConfig, StubMode};
use crate::model::Model;
use crate::profiler::{profile_all, ProfileContext, ProfileReport, UserProfileStore};
use crate::semantic::{assemble_global_table, ClusterAssignment, DomainNouns, SemanticStore};
use crate::synthetic::{generate, SyntheticConfig};
use crate::trainer::{train, TrainConfig, TrainInputs, Variant};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing {artifact}; run `{stage}` first")]
    MissingPrerequisite { stage: &'static str, artifact: PathBuf },
    #[error("{0}")]
    Runtime(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::MissingPrerequisite { .. } => 2,
            PipelineError::Runtime(_) => 3,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Runtime(e.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub interactions: PathBuf,
    pub catalog: PathBuf,
    pub labels: DomainLabels,
    pub nouns: DomainNouns,
    pub thresholds: FilterThresholds,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            interactions: PathBuf::from("data/interactions.jsonl"),
            catalog: PathBuf::from("data/items.jsonl"),
            labels: DomainLabels { a: "cloth".into(), b: "sport".into() },
            nouns: DomainNouns::default(),
            thresholds: FilterThresholds::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub provider: ProviderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub variant: Variant,
    pub ablation_variants: Vec<Variant>,
    pub ratios: Vec<f64>,
    pub sweep_variants: Vec<Variant>,
    pub out: PathBuf,
    /// Cache provider responses under `<out>/cache`.
    pub cache: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            provider: ProviderConfig { stub_mode: StubMode::Tokens, ..Default::default() },
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            variant: Variant::Full,
            ablation_variants: Variant::ALL.to_vec(),
            ratios: vec![1.0, 0.75, 0.5, 0.25],
            sweep_variants: vec![Variant::Full, Variant::WoUnified],
            out: PathBuf::from("runs/default"),
            cache: true,
        }
    }
}

impl PipelineConfig {
    pub fn from_json_file(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.train.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.provider.dim == 0 {
            return Err(PipelineError::Config("provider.dim must be positive".into()));
        }
        if self.train.d > self.provider.dim {
            return Err(PipelineError::Config(format!("train.d = {} exceeds the embedding dimension {}", self.train.d, self.provider.dim)));
        }
        if self.data.labels.a == self.data.labels.b {
            return Err(PipelineError::Config("the two domain labels must differ".into()));
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(PipelineError::Config(format!("ratios must be non-empty fractions in [0, 1], got {:?}", self.ratios)));
        }
        if self.eval.k_list.is_empty() || self.eval.k_list.contains(&0) {
            return Err(PipelineError::Config("eval.k_list must hold positive cutoffs".into()));
        }
        Ok(())
    }

    fn dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    fn snapshot(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir).map_err(runtime)?;
        write_atomic(&dir.join("config.json"), serde_json::to_string_pretty(self).map_err(runtime)?.as_bytes()).map_err(runtime)
    }

    pub fn gateway(&self) -> Result<Gateway, PipelineError> {
        let cache = self.cache.then(|| self.out.join("cache"));
        Gateway::from_config(&self.provider, cache).map_err(|e| PipelineError::Config(e.to_string()))
    }
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingPrerequisite { stage, artifact: path })
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(runtime)
}

fn read_catalog(path: &Path) -> Result<ItemCatalog, PipelineError> {
    let f = File::open(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    ItemCatalog::read_jsonl(BufReader::new(f)).map_err(runtime)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareSummary {
    pub users: usize,
    pub items_a: usize,
    pub items_b: usize,
    pub overlap_users: usize,
    pub rejected_lines: usize,
    pub excluded_short: usize,
}

pub fn prepare(cfg: &PipelineConfig) -> Result<PrepareSummary, PipelineError> {
    let catalog = read_catalog(&cfg.data.catalog)?;
    let f = File::open(&cfg.data.interactions).map_err(|e| PipelineError::Config(format!("{}: {e}", cfg.data.interactions.display())))?;
    let log = ingest(BufReader::new(f), &catalog, &cfg.data.labels).map_err(runtime)?;
    let corpus = filter_and_sequence(&log, cfg.data.thresholds, &cfg.data.labels).map_err(runtime)?;
    let ds = split_leave_one_out(&corpus);
    let dir = cfg.dir("prepare");
    cfg.snapshot(&dir)?;
    write_atomic(&dir.join("splits.jsonl"), &ds.to_jsonl_bytes()).map_err(runtime)?;
    write_json(&dir.join("split_meta.json"), &ds.meta())?;
    write_json(&dir.join("id_map.json"), &ds.id_map)?;
    let mut out = Vec::new();
    catalog.write_jsonl(&mut out).map_err(runtime)?;
    write_atomic(&dir.join("catalog.jsonl"), &out).map_err(runtime)?;
    let summary = PrepareSummary {
        users: ds.users.len(),
        items_a: ds.id_map.items_a.len(),
        items_b: ds.id_map.items_b.len(),
        overlap_users: ds.overlap_users(),
        rejected_lines: log.rejected,
        excluded_short: ds.excluded_short,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

pub fn load_dataset(cfg: &PipelineConfig) -> Result<(SplitDataset, ItemCatalog), PipelineError> {
    let dir = cfg.dir("prepare");
    let splits = require(dir.join("splits.jsonl"), "prepare")?;
    let id_map: IdMap =
        IdMap::from_json(&fs::read_to_string(require(dir.join("id_map.json"), "prepare")?).map_err(runtime)?).map_err(runtime)?;
    let meta: SplitMeta =
        serde_json::from_str(&fs::read_to_string(require(dir.join("split_meta.json"), "prepare")?).map_err(runtime)?).map_err(runtime)?;
    let ds = SplitDataset::read_jsonl(BufReader::new(File::open(splits).map_err(runtime)?), id_map, &meta).map_err(runtime)?;
    let catalog = read_catalog(&require(dir.join("catalog.jsonl"), "prepare")?)?;
    Ok((ds, catalog))
}

pub fn embed(cfg: &PipelineConfig) -> Result<(), PipelineError> {
    let (ds, catalog) = load_dataset(cfg)?;
    let gateway = cfg.gateway()?;
    let global = assemble_global_table(&catalog, &ds.id_map, &gateway, &PromptTemplates::default(), &cfg.data.nouns).map_err(runtime)?;
    let store = SemanticStore::build(global, cfg.train.d, cfg.train.k, cfg.train.seed).map_err(runtime)?;
    let dir = cfg.dir("embed");
    cfg.snapshot(&dir)?;
    store.save(&dir).map_err(runtime)?;
    log::info!("embedded {} items ({} provider calls)", ds.id_map.len(), gateway.stats().embed_calls());
    Ok(())
}

pub fn load_semantic(cfg: &PipelineConfig) -> Result<SemanticStore, PipelineError> {
    let dir = cfg.dir("embed");
    require(dir.join("global.bin"), "embed")?;
    require(dir.join("clusters.json"), "embed")?;
    SemanticStore::load(&dir).map_err(runtime)
}

fn profile_with(
    cfg: &PipelineConfig,
    ds: &SplitDataset,
    catalog: &ItemCatalog,
    assignment: &ClusterAssignment,
    store: &mut UserProfileStore,
) -> Result<ProfileReport, PipelineError> {
    let gateway = cfg.gateway()?;
    let templates = PromptTemplates::default();
    let ctx = ProfileContext { assignment, catalog, id_map: &ds.id_map, gateway: &gateway, templates: &templates };
    let report = profile_all(ds, &ctx, store).map_err(runtime)?;
    if let Some((user, err)) = report.failed.first() {
        return Err(PipelineError::Runtime(format!("{} users failed profiling, first {user}: {err}", report.failed.len())));
    }
    Ok(report)
}

/// Profiles every training user; `single` skips the cluster partition.
pub fn profile(cfg: &PipelineConfig, single: bool) -> Result<ProfileReport, PipelineError> {
    let (ds, catalog) = load_dataset(cfg)?;
    let semantic = load_semantic(cfg)?;
    let dir = cfg.dir("profile");
    cfg.snapshot(&dir)?;
    let (sub, assignment) = if single {
        ("single", ClusterAssignment::single(ds.id_map.len(), semantic.global.dim()))
    } else {
        ("clustered", semantic.clusters.clone())
    };
    let mut store = UserProfileStore::open(dir.join(sub)).map_err(runtime)?;
    let report = profile_with(cfg, &ds, &catalog, &assignment, &mut store)?;
    write_json(&dir.join(format!("{sub}_report.json")), &report)?;
    Ok(report)
}

fn load_profiles(cfg: &PipelineConfig, single: bool) -> Result<UserProfileStore, PipelineError> {
    let sub = if single { "single" } else { "clustered" };
    let dir = require(cfg.dir("profile").join(sub).join("profiles.jsonl"), "profile")?;
    UserProfileStore::open(dir.parent().expect("store dir")).map_err(runtime)
}

fn train_one(
    cfg: &PipelineConfig,
    ds: &SplitDataset,
    semantic: &SemanticStore,
    profiles: &UserProfileStore,
    single: Option<&UserProfileStore>,
    variant: Variant,
    dir: &Path,
) -> Result<Model, PipelineError> {
    fs::create_dir_all(dir).map_err(runtime)?;
    cfg.snapshot(dir)?;
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.jsonl")).map_err(runtime)?);
    let inputs = TrainInputs { dataset: ds, semantic, profiles, single_cluster_profiles: single };
    let out = train(&inputs, &cfg.train, variant, Some(&mut metrics)).map_err(|e| match e {
        crate::trainer::TrainError::Config(m) | crate::trainer::TrainError::IncompatibleVariant { reason: m, .. } => {
            PipelineError::Config(m)
        }
        other => runtime(other),
    })?;
    metrics.flush().map_err(runtime)?;
    write_atomic(&dir.join("checkpoint.bin"), &out.checkpoint).map_err(runtime)?;
    write_json(&dir.join("report.json"), &out.report)?;
    if !out.report.freeze.holds() {
        return Err(PipelineError::Runtime("frozen embeddings changed during training".into()));
    }
    Ok(out.model)
}

fn ensure_single_profiles(cfg: &PipelineConfig) -> Result<UserProfileStore, PipelineError> {
    match load_profiles(cfg, true) {
        Ok(s) => Ok(s),
        Err(PipelineError::MissingPrerequisite { .. }) => {
            profile(cfg, true)?;
            load_profiles(cfg, true)
        }
        Err(e) => Err(e),
    }
}

pub fn train_stage(cfg: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let (ds, _) = load_dataset(cfg)?;
    let semantic = load_semantic(cfg)?;
    let profiles = load_profiles(cfg, false)?;
    let single = if cfg.variant == Variant::WoCluster { Some(ensure_single_profiles(cfg)?) } else { None };
    let dir = cfg.dir("train").join(cfg.variant.name());
    train_one(cfg, &ds, &semantic, &profiles, single.as_ref(), cfg.variant, &dir)?;
    Ok(dir.join("checkpoint.bin"))
}

pub fn load_checkpoint(cfg: &PipelineConfig, semantic: &SemanticStore) -> Result<Model, PipelineError> {
    let path = require(cfg.dir("train").join(cfg.variant.name()).join("checkpoint.bin"), "train")?;
    let bytes = fs::read(path).map_err(runtime)?;
    Model::from_checkpoint(&bytes, semantic).map(|(m, _)| m).map_err(runtime)
}

/// Writes validation and test reports for the configured variant; returns the test report.
pub fn eval_stage(cfg: &PipelineConfig) -> Result<MetricReport, PipelineError> {
    let semantic = load_semantic(cfg)?;
    let model = load_checkpoint(cfg, &semantic)?;
    let (ds, _) = load_dataset(cfg)?;
    let dir = cfg.dir("eval").join(cfg.variant.name());
    cfg.snapshot(&dir)?;
    let valid = evaluate(&model, &ds, Split::Valid, &cfg.eval).map_err(runtime)?;
    let test = evaluate(&model, &ds, Split::Test, &cfg.eval).map_err(runtime)?;
    write_json(&dir.join("valid.json"), &valid.records)?;
    write_json(&dir.join("test.json"), &test.records)?;
    Ok(test)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub best_epoch: usize,
    pub test: MetricReport,
}

fn results_csv(rows: &[VariantResult]) -> String {
    let mut out = String::from("variant,domain,k,hit,ndcg,n_users\n");
    for row in rows {
        for r in &row.test.records {
            out.push_str(&format!("{},{},{},{},{},{}\n", row.variant, r.domain, r.k, r.hit, r.ndcg, r.n_users));
        }
    }
    out
}

pub fn ablate(cfg: &PipelineConfig) -> Result<Vec<VariantResult>, PipelineError> {
    let (ds, _) = load_dataset(cfg)?;
    let semantic = load_semantic(cfg)?;
    let profiles = load_profiles(cfg, false)?;
    let single = if cfg.ablation_variants.contains(&Variant::WoCluster) { Some(ensure_single_profiles(cfg)?) } else { None };
    let dir = cfg.dir("ablate");
    cfg.snapshot(&dir)?;
    let mut rows = Vec::new();
    for &variant in &cfg.ablation_variants {
        let model = train_one(cfg, &ds, &semantic, &profiles, single.as_ref(), variant, &dir.join(variant.name()))?;
        let test = evaluate(&model, &ds, Split::Test, &cfg.eval).map_err(runtime)?;
        let best_epoch =
            serde_json::from_str::<serde_json::Value>(&fs::read_to_string(dir.join(variant.name()).join("report.json")).map_err(runtime)?)
                .map_err(runtime)?["best_epoch"]
                .as_u64()
                .unwrap_or(0) as usize;
        rows.push(VariantResult { variant, best_epoch, test });
    }
    write_json(&dir.join("table.json"), &rows)?;
    write_atomic(&dir.join("table.csv"), results_csv(&rows).as_bytes()).map_err(runtime)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub ratio: f64,
    pub overlap_users: usize,
    pub train_users: usize,
    pub test: MetricReport,
}

pub fn overlap_sweep_stage(cfg: &PipelineConfig) -> Result<Vec<SweepRow>, PipelineError> {
    let (base, catalog) = load_dataset(cfg)?;
    let semantic = load_semantic(cfg)?;
    let dir = cfg.dir("sweep");
    cfg.snapshot(&dir)?;
    let mut rows = Vec::new();
    for &ratio in &cfg.ratios {
        let (train_ds, eval_ds) =
            overlap_views(&base, ratio, cfg.train.seed, cfg.data.thresholds.min_user_interactions).map_err(runtime)?;
        let rdir = dir.join(format!("ratio_{ratio:.2}"));
        // profiles follow the reduced training sequences
        let mut profiles = UserProfileStore::open(rdir.join("profiles")).map_err(runtime)?;
        profile_with(cfg, &train_ds, &catalog, &semantic.clusters, &mut profiles)?;
        let single = if cfg.sweep_variants.contains(&Variant::WoCluster) {
            let mut s = UserProfileStore::open(rdir.join("profiles_single")).map_err(runtime)?;
            let one = ClusterAssignment::single(base.id_map.len(), semantic.global.dim());
            profile_with(cfg, &train_ds, &catalog, &one, &mut s)?;
            Some(s)
        } else {
            None
        };
        for &variant in &cfg.sweep_variants {
            let model = train_one(cfg, &train_ds, &semantic, &profiles, single.as_ref(), variant, &rdir.join(variant.name()))?;
            let mut test = evaluate(&model, &eval_ds, Split::Test, &cfg.eval).map_err(runtime)?;
            test.records.iter_mut().for_each(|r| r.overlap_ratio = ratio);
            rows.push(SweepRow { variant, ratio, overlap_users: train_ds.overlap_users(), train_users: train_ds.users.len(), test });
        }
    }
    write_json(&dir.join("sweep.json"), &rows)?;
    let mut csv = String::from("variant,overlap_ratio,domain,k,hit,ndcg,n_users,train_users,overlap_users\n");
    for row in &rows {
        for r in &row.test.records {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                row.variant, row.ratio, r.domain, r.k, r.hit, r.ndcg, r.n_users, row.train_users, row.overlap_users
            ));
        }
    }
    write_atomic(&dir.join("sweep.csv"), csv.as_bytes()).map_err(runtime)?;
    Ok(rows)
}

/// Writes the planted-structure dataset as `interactions.jsonl` and `items.jsonl`.
pub fn write_synthetic(dir: &Path, cfg: &SyntheticConfig) -> Result<(PathBuf, PathBuf), PipelineError> {
    fs::create_dir_all(dir).map_err(runtime)?;
    let data = generate(cfg);
    let (inter, items) = (dir.join("interactions.jsonl"), dir.join("items.jsonl"));
    let mut buf = Vec::new();
    data.write_interactions(&mut buf).map_err(runtime)?;
    write_atomic(&inter, &buf).map_err(runtime)?;
    let mut buf = Vec::new();
    data.write_catalog(&mut buf).map_err(runtime)?;
    write_atomic(&items, &buf).map_err(runtime)?;
    Ok((inter, items))
}

/// prepare → embed → profile → train → eval for the configured variant.
pub fn run_all(cfg: &PipelineConfig) -> Result<MetricReport, PipelineError> {
    cfg.validate()?;
    prepare(cfg)?;
    embed(cfg)?;
    profile(cfg, false)?;
    train_stage(cfg)?;
    eval_stage(cfg)
}
