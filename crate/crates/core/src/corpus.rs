//! Interaction ingestion, min-count filtering, leave-one-out splitting and
//! overlap-ratio adjustment.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line {line}: malformed record: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: unknown domain label {label:?}")]
    UnknownDomain { line: usize, label: String },
    #[error("no interactions survive filtering (users in: {users_in}, items in: {items_in}, interactions in: {interactions_in})")]
    EmptyAfterFilter { users_in: usize, items_in: usize, interactions_in: usize },
    #[error("invalid threshold: {0}")]
    InvalidThreshold(String),
    #[error("target overlap ratio {target} exceeds current ratio {current}")]
    OverlapAboveCurrent { target: f64, current: f64 },
    #[error("target overlap ratio {0} outside [0, 1]")]
    OverlapOutOfRange(f64),
    #[error("split file line {line}: {reason}")]
    BadSplit { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::A, Domain::B];

    pub fn index(self) -> usize {
        match self {
            Domain::A => 0,
            Domain::B => 1,
        }
    }

    pub fn other(self) -> Domain {
        match self {
            Domain::A => Domain::B,
            Domain::B => Domain::A,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::A => "A",
            Domain::B => "B",
        })
    }
}

/// The raw labels used for the two domains in input files (e.g. "cloth", "sport").
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainLabels {
    pub a: String,
    pub b: String,
}

impl Default for DomainLabels {
    fn default() -> Self {
        Self { a: "A".into(), b: "B".into() }
    }
}

impl DomainLabels {
    pub fn resolve(&self, label: &str) -> Option<Domain> {
        if label == self.a {
            Some(Domain::A)
        } else if label == self.b {
            Some(Domain::B)
        } else {
            None
        }
    }

    pub fn label(&self, d: Domain) -> &str {
        match d {
            Domain::A => &self.a,
            Domain::B => &self.b,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub domain: Domain,
    pub timestamp: u64,
}

/// Textual attributes of one item.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogItem {
    #[serde(rename = "item")]
    pub item_id: String,
    pub domain: String,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub brand: Option<String>,
    #[serde(default)]
    pub date: Option<String>,
    #[serde(default)]
    pub price: Option<String>,
    #[serde(default)]
    pub features: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct ItemCatalog {
    items: BTreeMap<String, CatalogItem>,
}

impl ItemCatalog {
    pub fn new(items: impl IntoIterator<Item = CatalogItem>) -> Self {
        Self { items: items.into_iter().map(|i| (i.item_id.clone(), i)).collect() }
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, CorpusError> {
        let mut items = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let item: CatalogItem =
                serde_json::from_str(&line).map_err(|e| CorpusError::Malformed { line: n + 1, reason: e.to_string() })?;
            items.push(item);
        }
        Ok(Self::new(items))
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), CorpusError> {
        for item in self.items.values() {
            serde_json::to_writer(&mut w, item)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn get(&self, item_id: &str) -> Option<&CatalogItem> {
        self.items.get(item_id)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CatalogItem> {
        self.items.values()
    }
}

/// One line of the interactions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub user: String,
    pub item: String,
    pub domain: String,
    pub ts: i64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InteractionLog {
    /// Per user, in chronological order with the deterministic tie-break.
    pub by_user: BTreeMap<String, Vec<Interaction>>,
    pub rejected: usize,
}

impl InteractionLog {
    pub fn num_interactions(&self) -> usize {
        self.by_user.values().map(Vec::len).sum()
    }
}

fn chrono_key(i: &Interaction) -> (u64, &str, Domain) {
    (i.timestamp, i.item_id.as_str(), i.domain)
}

/// Parses a JSON-lines interactions stream and resolves every record against the catalog.
pub fn ingest(reader: impl BufRead, catalog: &ItemCatalog, labels: &DomainLabels) -> Result<InteractionLog, CorpusError> {
    let mut records = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed { line: n + 1, reason: e.to_string() })?;
        records.push((n + 1, rec));
    }
    ingest_records(records, catalog, labels)
}

/// Like [`ingest`] for already-parsed records tagged with their source line.
pub fn ingest_records(
    records: impl IntoIterator<Item = (usize, RawRecord)>,
    catalog: &ItemCatalog,
    labels: &DomainLabels,
) -> Result<InteractionLog, CorpusError> {
    let mut log = InteractionLog::default();
    for (line, rec) in records {
        let domain = labels.resolve(&rec.domain).ok_or_else(|| CorpusError::UnknownDomain { line, label: rec.domain.clone() })?;
        if rec.ts < 0 {
            return Err(CorpusError::Malformed { line, reason: format!("negative timestamp {}", rec.ts) });
        }
        let known = catalog.get(&rec.item).is_some_and(|c| labels.resolve(&c.domain) == Some(domain));
        if !known {
            log.rejected += 1;
            continue;
        }
        log.by_user.entry(rec.user.clone()).or_default().push(Interaction {
            user_id: rec.user,
            item_id: rec.item,
            domain,
            timestamp: rec.ts as u64,
        });
    }
    for seq in log.by_user.values_mut() {
        seq.sort_by(|a, b| chrono_key(a).cmp(&chrono_key(b)));
    }
    if log.rejected > 0 {
        log::warn!("ingest rejected {} records with unknown items", log.rejected);
    }
    Ok(log)
}

/// A reference to an item by its unified row index, tagged with its domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ItemRef {
    pub item: usize,
    pub domain: Domain,
}

/// Maps item ids to unified row indices: domain A occupies `[0, |A|)`, domain B `[|A|, |A|+|B|)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdMap {
    pub labels: DomainLabels,
    pub items_a: Vec<String>,
    pub items_b: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new(labels: DomainLabels, mut items_a: Vec<String>, mut items_b: Vec<String>) -> Self {
        items_a.sort();
        items_a.dedup();
        items_b.sort();
        items_b.dedup();
        let mut map = Self { labels, items_a, items_b, index: HashMap::new() };
        map.rebuild_index();
        map
    }

    fn rebuild_index(&mut self) {
        self.index = self.items_a.iter().chain(&self.items_b).cloned().enumerate().map(|(i, id)| (id, i)).collect();
    }

    pub fn from_json(s: &str) -> Result<Self, CorpusError> {
        let mut map: IdMap = serde_json::from_str(s)?;
        map.rebuild_index();
        Ok(map)
    }

    pub fn len(&self) -> usize {
        self.items_a.len() + self.items_b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn domain_len(&self, d: Domain) -> usize {
        match d {
            Domain::A => self.items_a.len(),
            Domain::B => self.items_b.len(),
        }
    }

    /// First unified index belonging to domain `d`.
    pub fn offset(&self, d: Domain) -> usize {
        match d {
            Domain::A => 0,
            Domain::B => self.items_a.len(),
        }
    }

    pub fn domain_range(&self, d: Domain) -> std::ops::Range<usize> {
        let o = self.offset(d);
        o..o + self.domain_len(d)
    }

    pub fn domain_of(&self, index: usize) -> Domain {
        if index < self.items_a.len() {
            Domain::A
        } else {
            Domain::B
        }
    }

    pub fn index_of(&self, item_id: &str) -> Option<usize> {
        self.index.get(item_id).copied()
    }

    pub fn item_id(&self, index: usize) -> &str {
        if index < self.items_a.len() {
            &self.items_a[index]
        } else {
            &self.items_b[index - self.items_a.len()]
        }
    }

    pub fn item_ref(&self, index: usize) -> ItemRef {
        ItemRef { item: index, domain: self.domain_of(index) }
    }

    /// SHA-256 over the canonical id order, used to bind checkpoints to a dataset.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for id in self.items_a.iter().chain(&self.items_b) {
            h.update(id.as_bytes());
            h.update([0u8]);
        }
        h.update(b"|");
        h.update(self.items_a.len().to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSequences {
    pub user_id: String,
    pub seq_a: Vec<usize>,
    pub seq_b: Vec<usize>,
    pub mixed: Vec<ItemRef>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequencedCorpus {
    pub id_map: IdMap,
    pub users: BTreeMap<String, UserSequences>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterThresholds {
    pub min_user_interactions: usize,
    pub min_item_interactions: usize,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self { min_user_interactions: 5, min_item_interactions: 3 }
    }
}

/// Drops, per domain, users with fewer than `min_user_interactions` and items consumed fewer
/// than `min_item_interactions` times, repeating until nothing changes; then builds the per-user
/// local and mixed sequences.
pub fn filter_and_sequence(
    log: &InteractionLog,
    thresholds: FilterThresholds,
    labels: &DomainLabels,
) -> Result<SequencedCorpus, CorpusError> {
    if thresholds.min_user_interactions == 0 || thresholds.min_item_interactions == 0 {
        return Err(CorpusError::InvalidThreshold("thresholds must be at least 1".into()));
    }
    let mut alive: Vec<&Interaction> = log.by_user.values().flatten().collect();
    loop {
        let mut user_counts: HashMap<(&str, Domain), usize> = HashMap::new();
        let mut item_counts: HashMap<&str, usize> = HashMap::new();
        for i in &alive {
            *user_counts.entry((&i.user_id, i.domain)).or_default() += 1;
            *item_counts.entry(&i.item_id).or_default() += 1;
        }
        let before = alive.len();
        alive.retain(|i| {
            user_counts[&(i.user_id.as_str(), i.domain)] >= thresholds.min_user_interactions
                && item_counts[i.item_id.as_str()] >= thresholds.min_item_interactions
        });
        if alive.len() == before {
            break;
        }
    }
    if alive.is_empty() {
        let items_in: BTreeSet<&str> = log.by_user.values().flatten().map(|i| i.item_id.as_str()).collect();
        return Err(CorpusError::EmptyAfterFilter {
            users_in: log.by_user.len(),
            items_in: items_in.len(),
            interactions_in: log.num_interactions(),
        });
    }

    let mut items_a = Vec::new();
    let mut items_b = Vec::new();
    for i in &alive {
        match i.domain {
            Domain::A => items_a.push(i.item_id.clone()),
            Domain::B => items_b.push(i.item_id.clone()),
        }
    }
    let id_map = IdMap::new(labels.clone(), items_a, items_b);

    // `alive` keeps the per-user chronological order of the log.
    let mut users: BTreeMap<String, UserSequences> = BTreeMap::new();
    for i in alive {
        let idx = id_map.index_of(&i.item_id).expect("surviving item is indexed");
        let seqs = users.entry(i.user_id.clone()).or_insert_with(|| UserSequences {
            user_id: i.user_id.clone(),
            seq_a: Vec::new(),
            seq_b: Vec::new(),
            mixed: Vec::new(),
        });
        match i.domain {
            Domain::A => seqs.seq_a.push(idx),
            Domain::B => seqs.seq_b.push(idx),
        }
        seqs.mixed.push(ItemRef { item: idx, domain: i.domain });
    }
    Ok(SequencedCorpus { id_map, users })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitUser {
    pub user_id: String,
    pub train_a: Vec<usize>,
    pub train_b: Vec<usize>,
    pub train_mixed: Vec<ItemRef>,
    pub valid: ItemRef,
    pub test: ItemRef,
}

impl SplitUser {
    pub fn train_local(&self, d: Domain) -> &[usize] {
        match d {
            Domain::A => &self.train_a,
            Domain::B => &self.train_b,
        }
    }

    pub fn is_overlap(&self) -> bool {
        !self.train_a.is_empty() && !self.train_b.is_empty()
    }

    /// Histories visible when predicting the validation target (`train`) or the
    /// test target (`train` plus the validation item).
    pub fn history(&self, split: Split) -> (Vec<ItemRef>, Vec<usize>, Vec<usize>) {
        let mut mixed = self.train_mixed.clone();
        let mut a = self.train_a.clone();
        let mut b = self.train_b.clone();
        if split == Split::Test {
            mixed.push(self.valid);
            match self.valid.domain {
                Domain::A => a.push(self.valid.item),
                Domain::B => b.push(self.valid.item),
            }
        }
        (mixed, a, b)
    }

    pub fn target(&self, split: Split) -> ItemRef {
        match split {
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub id_map: IdMap,
    /// Sorted by user id.
    pub users: Vec<SplitUser>,
    /// Current overlap users divided by `original_overlap`.
    pub overlap_ratio: f64,
    pub original_overlap: usize,
    pub excluded_short: usize,
}

impl SplitDataset {
    pub fn overlap_users(&self) -> usize {
        self.users.iter().filter(|u| u.is_overlap()).count()
    }
}

/// Last mixed item → test, penultimate → validation, regardless of domain.
pub fn split_leave_one_out(corpus: &SequencedCorpus) -> SplitDataset {
    let mut users = Vec::new();
    let mut excluded = 0;
    for seqs in corpus.users.values() {
        let n = seqs.mixed.len();
        if n < 3 {
            excluded += 1;
            continue;
        }
        let test = seqs.mixed[n - 1];
        let valid = seqs.mixed[n - 2];
        let train_mixed = seqs.mixed[..n - 2].to_vec();
        let train_a = train_mixed.iter().filter(|r| r.domain == Domain::A).map(|r| r.item).collect();
        let train_b = train_mixed.iter().filter(|r| r.domain == Domain::B).map(|r| r.item).collect();
        users.push(SplitUser { user_id: seqs.user_id.clone(), train_a, train_b, train_mixed, valid, test });
    }
    if excluded > 0 {
        log::warn!("{excluded} users with fewer than 3 interactions excluded from the split");
    }
    let original_overlap = users.iter().filter(|u| u.is_overlap()).count();
    SplitDataset { id_map: corpus.id_map.clone(), users, overlap_ratio: 1.0, original_overlap, excluded_short: excluded }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverlapAdjustment {
    pub dataset: SplitDataset,
    pub converted: usize,
    pub dropped: usize,
}

/// De-overlaps seeded-uniformly chosen overlap users by deleting the training
/// interactions of their smaller domain until `overlap users / original overlap`
/// equals `target_ratio`. Validation and test targets are left in place.
pub fn adjust_overlap(
    dataset: &SplitDataset,
    target_ratio: f64,
    seed: u64,
    min_user_interactions: usize,
) -> Result<OverlapAdjustment, CorpusError> {
    if !(0.0..=1.0).contains(&target_ratio) {
        return Err(CorpusError::OverlapOutOfRange(target_ratio));
    }
    if target_ratio > dataset.overlap_ratio + 1e-9 {
        return Err(CorpusError::OverlapAboveCurrent { target: target_ratio, current: dataset.overlap_ratio });
    }
    let current: Vec<usize> = (0..dataset.users.len()).filter(|&i| dataset.users[i].is_overlap()).collect();
    let keep = (target_ratio * dataset.original_overlap as f64).round() as usize;
    let n_remove = current.len().saturating_sub(keep);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = current.clone();
    order.shuffle(&mut rng);
    let mut selected: Vec<usize> = order.into_iter().take(n_remove).collect();
    selected.sort_unstable();

    let mut users = dataset.users.clone();
    let mut drop = BTreeSet::new();
    for &ui in &selected {
        let u = &mut users[ui];
        let (na, nb) = (u.train_a.len(), u.train_b.len());
        let delete = match na.cmp(&nb) {
            std::cmp::Ordering::Less => Domain::A,
            std::cmp::Ordering::Greater => Domain::B,
            std::cmp::Ordering::Equal => {
                if rng.random::<bool>() {
                    Domain::A
                } else {
                    Domain::B
                }
            }
        };
        u.train_mixed.retain(|r| r.domain != delete);
        match delete {
            Domain::A => u.train_a.clear(),
            Domain::B => u.train_b.clear(),
        }
        let kept = delete.other();
        let surviving = u.train_local(kept).len() + usize::from(u.valid.domain == kept) + usize::from(u.test.domain == kept);
        if surviving < min_user_interactions {
            drop.insert(ui);
        }
    }
    if !drop.is_empty() {
        log::warn!("{} de-overlapped users fell below the interaction threshold and were dropped", drop.len());
    }
    let users: Vec<SplitUser> = users.into_iter().enumerate().filter(|(i, _)| !drop.contains(i)).map(|(_, u)| u).collect();
    let overlap_now = users.iter().filter(|u| u.is_overlap()).count();
    let overlap_ratio = if dataset.original_overlap == 0 { 1.0 } else { overlap_now as f64 / dataset.original_overlap as f64 };
    Ok(OverlapAdjustment {
        dataset: SplitDataset {
            id_map: dataset.id_map.clone(),
            users,
            overlap_ratio,
            original_overlap: dataset.original_overlap,
            excluded_short: dataset.excluded_short,
        },
        converted: selected.len(),
        dropped: drop.len(),
    })
}

#[derive(Serialize, Deserialize)]
struct SplitLine {
    user: String,
    train_a: Vec<usize>,
    train_b: Vec<usize>,
    train_mixed: Vec<usize>,
    valid: ItemRef,
    test: ItemRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub overlap_ratio: f64,
    pub original_overlap: usize,
    pub excluded_short: usize,
    pub users: usize,
}

impl SplitDataset {
    pub fn meta(&self) -> SplitMeta {
        SplitMeta {
            overlap_ratio: self.overlap_ratio,
            original_overlap: self.original_overlap,
            excluded_short: self.excluded_short,
            users: self.users.len(),
        }
    }

    /// One JSON object per user per line.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<(), CorpusError> {
        for u in &self.users {
            let line = SplitLine {
                user: u.user_id.clone(),
                train_a: u.train_a.clone(),
                train_b: u.train_b.clone(),
                train_mixed: u.train_mixed.iter().map(|r| r.item).collect(),
                valid: u.valid,
                test: u.test,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_jsonl(reader: impl BufRead, id_map: IdMap, meta: &SplitMeta) -> Result<Self, CorpusError> {
        let mut users = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: SplitLine = serde_json::from_str(&line).map_err(|e| CorpusError::BadSplit { line: n + 1, reason: e.to_string() })?;
            let bad = |reason: String| CorpusError::BadSplit { line: n + 1, reason };
            for &i in rec.train_a.iter().chain(&rec.train_b).chain(&rec.train_mixed).chain([&rec.valid.item, &rec.test.item]) {
                if i >= id_map.len() {
                    return Err(bad(format!("item index {i} outside id map of {} items", id_map.len())));
                }
            }
            users.push(SplitUser {
                user_id: rec.user,
                train_a: rec.train_a,
                train_b: rec.train_b,
                train_mixed: rec.train_mixed.into_iter().map(|i| id_map.item_ref(i)).collect(),
                valid: rec.valid,
                test: rec.test,
            });
        }
        Ok(Self {
            id_map,
            users,
            overlap_ratio: meta.overlap_ratio,
            original_overlap: meta.original_overlap,
            excluded_short: meta.excluded_short,
        })
    }
}
