//! Hierarchical user profiling: one summary per non-empty cluster of the training
//! mixed sequence, one overall summary over those, and a frozen embedding of it.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{IdMap, ItemCatalog, ItemRef, SplitDataset};
use crate::gateway::cache::{decode_embedding, encode_embedding, write_atomic};
use crate::gateway::{Gateway, GatewayError, PromptTemplates};
use crate::semantic::{partition_sequence, ClusterAssignment, SemanticError};
use crate::tensor::Mat;

/// Most recent titles kept per sub-sequence prompt.
pub const MAX_SUBSEQUENCE_TITLES: usize = 50;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("user {0} has an empty training sequence")]
    EmptySequence(String),
    #[error("item {0} is not in the catalog")]
    UnknownItem(String),
    #[error("provider returned a non-text payload")]
    NotText,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error("profile store: {0}")]
    Io(#[from] std::io::Error),
    #[error("profile store: {0}")]
    Json(#[from] serde_json::Error),
    #[error("corrupt embedding file {0}")]
    CorruptEmbedding(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    /// `(cluster id, summary)` in ascending cluster order.
    pub sub_summaries: Vec<(usize, String)>,
    pub overall_text: String,
    #[serde(skip)]
    pub embedding: Vec<f32>,
}

/// Everything [`profile_user`] needs besides the user's sequence.
pub struct ProfileContext<'a> {
    pub assignment: &'a ClusterAssignment,
    pub catalog: &'a ItemCatalog,
    pub id_map: &'a IdMap,
    pub gateway: &'a Gateway,
    pub templates: &'a PromptTemplates,
}

fn complete(gateway: &Gateway, prompt: &str) -> Result<String, ProfileError> {
    let r = gateway.summarize(prompt)?;
    r.text().map(str::to_string).ok_or(ProfileError::NotText)
}

pub fn profile_user(user_id: &str, mixed: &[ItemRef], ctx: &ProfileContext<'_>) -> Result<UserProfile, ProfileError> {
    if mixed.is_empty() {
        return Err(ProfileError::EmptySequence(user_id.to_string()));
    }
    let parts = partition_sequence(mixed, ctx.assignment)?;
    let mut sub_summaries = Vec::new();
    for (k, part) in parts.iter().enumerate().filter(|(_, p)| !p.is_empty()) {
        let tail = &part[part.len().saturating_sub(MAX_SUBSEQUENCE_TITLES)..];
        let titles = tail
            .iter()
            .map(|r| {
                let id = ctx.id_map.item_id(r.item);
                let item = ctx.catalog.get(id).ok_or_else(|| ProfileError::UnknownItem(id.to_string()))?;
                Ok(item.title.clone().unwrap_or_else(|| crate::gateway::prompts::UNKNOWN.to_string()))
            })
            .collect::<Result<Vec<_>, ProfileError>>()?;
        let prompt = ctx.templates.subsequence_prompt(&titles)?;
        sub_summaries.push((k, complete(ctx.gateway, &prompt)?));
    }
    let texts: Vec<&str> = sub_summaries.iter().map(|(_, s)| s.as_str()).collect();
    let overall_text = complete(ctx.gateway, &ctx.templates.overall_prompt(&texts)?)?;
    let embedding = ctx.gateway.embed_texts(&[overall_text.as_str()])?.rows.remove(0);
    Ok(UserProfile { user_id: user_id.to_string(), sub_summaries, overall_text, embedding })
}

/// Profiles keyed by user id, optionally backed by a directory of per-user files.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct UserProfileStore {
    dir: Option<PathBuf>,
    profiles: BTreeMap<String, UserProfile>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub profiled: usize,
    pub skipped: usize,
    /// `(user id, error)` for each user that could not be profiled.
    pub failed: Vec<(String, String)>,
}

const USERS_DIR: &str = "users";
const INDEX_FILE: &str = "profiles.jsonl";

impl UserProfileStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) a store, loading any profiles already on disk.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, ProfileError> {
        let dir = dir.into();
        let users = dir.join(USERS_DIR);
        fs::create_dir_all(&users)?;
        let mut profiles = BTreeMap::new();
        for entry in fs::read_dir(&users)? {
            let path = entry?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let emb_path = path.with_extension("emb");
            // A json file without its embedding is an interrupted write; profile again.
            let Ok(bytes) = fs::read(&emb_path) else { continue };
            let mut p: UserProfile = serde_json::from_slice(&fs::read(&path)?)?;
            p.embedding = decode_embedding(&bytes).ok_or_else(|| ProfileError::CorruptEmbedding(emb_path.clone()))?;
            profiles.insert(p.user_id.clone(), p);
        }
        Ok(Self { dir: Some(dir), profiles })
    }

    fn stem(&self, user_id: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(USERS_DIR).join(hex::encode(user_id.as_bytes())))
    }

    pub fn insert(&mut self, profile: UserProfile) -> Result<(), ProfileError> {
        if let Some(stem) = self.stem(&profile.user_id) {
            write_atomic(&stem.with_extension("emb"), &encode_embedding(&profile.embedding))?;
            write_atomic(&stem.with_extension("json"), &serde_json::to_vec(&profile)?)?;
        }
        self.profiles.insert(profile.user_id.clone(), profile);
        Ok(())
    }

    /// Rewrites the consolidated JSON-lines index in user order.
    pub fn write_index(&self) -> Result<(), ProfileError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let mut out = Vec::new();
        for p in self.profiles.values() {
            serde_json::to_writer(
                &mut out,
                &serde_json::json!({
                    "user": p.user_id,
                    "sub_summaries": p.sub_summaries,
                    "overall_text": p.overall_text,
                }),
            )?;
            out.push(b'\n');
        }
        write_atomic(&dir.join(INDEX_FILE), &out)?;
        Ok(())
    }

    pub fn get(&self, user_id: &str) -> Option<&UserProfile> {
        self.profiles.get(user_id)
    }

    pub fn contains(&self, user_id: &str) -> bool {
        self.profiles.contains_key(user_id)
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &UserProfile> {
        self.profiles.values()
    }

    pub fn dim(&self) -> Option<usize> {
        self.profiles.values().next().map(|p| p.embedding.len())
    }

    /// Rows of profile embeddings in the order of `user_ids`.
    pub fn embedding_matrix<S: AsRef<str>>(&self, user_ids: &[S]) -> Option<Mat> {
        let rows = user_ids
            .iter()
            .map(|u| self.get(u.as_ref()).map(|p| p.embedding.iter().map(|&x| f64::from(x)).collect()))
            .collect::<Option<Vec<Vec<f64>>>>()?;
        Some(Mat::from_rows(&rows))
    }

    /// Hash of every user id and embedding byte; used to audit that profiles stay frozen.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.profiles.values() {
            h.update((p.user_id.len() as u64).to_le_bytes());
            h.update(p.user_id.as_bytes());
            h.update(encode_embedding(&p.embedding));
        }
        hex::encode(h.finalize())
    }
}

/// Profiles every user in `dataset` from the training mixed sequence only, skipping
/// users already in `store`. Failures are reported per user and do not stop the run.
pub fn profile_all(dataset: &SplitDataset, ctx: &ProfileContext<'_>, store: &mut UserProfileStore) -> Result<ProfileReport, ProfileError> {
    let pending: Vec<_> = dataset.users.iter().filter(|u| !store.contains(&u.user_id)).collect();
    let mut report = ProfileReport { skipped: dataset.users.len() - pending.len(), ..Default::default() };
    let workers = ctx.gateway.max_in_flight().min(pending.len()).max(1);
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<(usize, Result<UserProfile, ProfileError>)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("work index");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(u) = pending.get(i) else { break };
                let r = profile_user(&u.user_id, &u.train_mixed, ctx);
                results.lock().expect("results").push((i, r));
            });
        }
    });
    let mut results = results.into_inner().expect("results");
    results.sort_by_key(|(i, _)| *i);
    for (i, r) in results {
        match r {
            Ok(p) => {
                store.insert(p)?;
                report.profiled += 1;
            }
            Err(e) => {
                log::warn!("profiling user {} failed: {e}", pending[i].user_id);
                report.failed.push((pending[i].user_id.clone(), e.to_string()));
            }
        }
    }
    store.write_index()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CatalogItem, Domain, DomainLabels, SplitUser};
    use crate::gateway::{StubEmbedder, StubMode, StubSummarizer};
    use std::sync::Arc;

    fn fixture(n_users: usize) -> (ItemCatalog, IdMap, ClusterAssignment, SplitDataset) {
        let ids: Vec<String> = (0..6).map(|i| format!("a{i}")).collect();
        let catalog = ItemCatalog::new(ids.iter().map(|id| CatalogItem {
            item_id: id.clone(),
            domain: "A".into(),
            title: Some(format!("title {id}")),
            brand: None,
            date: None,
            price: None,
            features: None,
            description: None,
        }));
        let id_map = IdMap::new(DomainLabels::default(), ids, Vec::new());
        let assignment = ClusterAssignment { labels: vec![0, 1, 0, 2, 1, 0], centroids: vec![vec![0.0]; 3], k: 3, inertia_history: vec![] };
        let r = |i| ItemRef { item: i, domain: Domain::A };
        let users = (0..n_users)
            .map(|u| SplitUser {
                user_id: format!("u{u:03}"),
                train_a: vec![0, 1, 2],
                train_b: vec![],
                train_mixed: vec![r(0), r(1), r(2)],
                valid: r(3),
                test: r(4),
            })
            .collect();
        let ds = SplitDataset { id_map: id_map.clone(), users, overlap_ratio: 1.0, original_overlap: 0, excluded_short: 0 };
        (catalog, id_map, assignment, ds)
    }

    fn gateway() -> Gateway {
        Gateway::new(Arc::new(StubEmbedder::new(1, 8, StubMode::Text)), Arc::new(StubSummarizer), None)
    }

    #[test]
    fn hierarchy_and_leakage() {
        let (catalog, id_map, assignment, ds) = fixture(1);
        let gw = gateway();
        let templates = PromptTemplates::default();
        let ctx = ProfileContext { assignment: &assignment, catalog: &catalog, id_map: &id_map, gateway: &gw, templates: &templates };
        let p = profile_user("u", &ds.users[0].train_mixed, &ctx).unwrap();
        assert_eq!(p.sub_summaries.iter().map(|(k, _)| *k).collect::<Vec<_>>(), vec![0, 1]);
        // validation (a3) and test (a4) titles never reach the summaries
        assert!(!p.overall_text.contains("title a3") && !p.overall_text.contains("title a4"));
        assert!(p.overall_text.contains("title a0"));
        assert_eq!(p.embedding.len(), 8);
        assert_eq!(profile_user("u", &ds.users[0].train_mixed, &ctx).unwrap(), p);
    }

    #[test]
    fn resumable_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let (catalog, id_map, assignment, ds) = fixture(10);
        let templates = PromptTemplates::default();
        let gw = gateway();
        let ctx = ProfileContext { assignment: &assignment, catalog: &catalog, id_map: &id_map, gateway: &gw, templates: &templates };
        let half = SplitDataset { users: ds.users[..5].to_vec(), ..ds.clone() };
        let mut store = UserProfileStore::open(dir.path()).unwrap();
        assert_eq!(profile_all(&half, &ctx, &mut store).unwrap().profiled, 5);

        let gw2 = gateway();
        let ctx2 = ProfileContext { gateway: &gw2, ..ctx };
        let mut store = UserProfileStore::open(dir.path()).unwrap();
        let report = profile_all(&ds, &ctx2, &mut store).unwrap();
        assert_eq!((report.profiled, report.skipped), (5, 5));
        assert_eq!(gw2.stats().embed_calls(), 5);

        let reopened = UserProfileStore::open(dir.path()).unwrap();
        assert_eq!(reopened, store);
        assert_eq!(reopened.checksum(), store.checksum());
        assert_eq!(fs::read_to_string(dir.path().join(INDEX_FILE)).unwrap().lines().count(), 10);
    }

    #[test]
    fn empty_dataset_gives_empty_store() {
        let (catalog, id_map, assignment, ds) = fixture(0);
        let templates = PromptTemplates::default();
        let gw = gateway();
        let ctx = ProfileContext { assignment: &assignment, catalog: &catalog, id_map: &id_map, gateway: &gw, templates: &templates };
        let mut store = UserProfileStore::in_memory();
        assert_eq!(profile_all(&ds, &ctx, &mut store).unwrap(), ProfileReport::default());
        assert!(store.is_empty());
    }
}
