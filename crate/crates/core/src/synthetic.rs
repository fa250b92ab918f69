//! Planted-structure two-domain dataset for offline runs.
//!
//! Items of both domains are grouped into topics whose pseudo-words appear in the
//! titles and attributes, so token-mode stub embeddings place same-topic items of
//! either domain close together. Users drift between a few preferred topics with a
//! sticky Markov chain and pick the domain of every step at random. A slice of
//! short-history users and rarely touched items exercises the filters.

use std::io::{self, Write};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CatalogItem, DomainLabels, ItemCatalog, RawRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub users: usize,
    pub topics: usize,
    pub items_per_topic: usize,
    /// Items per domain that sit outside every topic and are almost never chosen.
    pub rare_items: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that the next step stays in the current topic.
    pub stickiness: f64,
    /// Share of users that only ever interact with one domain.
    pub single_domain_share: f64,
    /// Share of users whose history is too short to survive filtering.
    pub noise_share: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            users: 400,
            topics: 25,
            items_per_topic: 12,
            rare_items: 6,
            min_len: 10,
            max_len: 24,
            stickiness: 0.8,
            single_domain_share: 0.1,
            noise_share: 0.08,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub labels: DomainLabels,
    pub catalog: ItemCatalog,
    pub records: Vec<RawRecord>,
    /// Topic of each catalog item id, `None` for rare items.
    pub topic_of: Vec<(String, Option<usize>)>,
}

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "mi", "ze", "tu", "ra", "no", "vi", "sa", "de", "po", "gu", "fe", "xi", "ba", "jo", "ne", "qu", "ry", "wa", "hi", "co",
    "dy", "me",
];

fn word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect()
}

fn item(id: String, domain: &str, title: String, brand: String, features: String) -> CatalogItem {
    CatalogItem {
        item_id: id,
        domain: domain.to_string(),
        title: Some(title),
        brand: Some(brand),
        date: None,
        price: None,
        features: Some(features),
        description: None,
    }
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticData {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let labels = DomainLabels { a: "cloth".into(), b: "sport".into() };
    let topic_words: Vec<[String; 3]> = (0..cfg.topics).map(|_| [word(&mut rng, 3), word(&mut rng, 3), word(&mut rng, 2)]).collect();

    let mut items = Vec::new();
    let mut topic_of = Vec::new();
    // per domain, per topic: item ids
    let mut by_topic: Vec<Vec<Vec<String>>> = vec![vec![Vec::new(); cfg.topics]; 2];
    let mut rare: Vec<Vec<String>> = vec![Vec::new(); 2];
    for (di, label) in [&labels.a, &labels.b].into_iter().enumerate() {
        let prefix = if di == 0 { "c" } else { "s" };
        for (t, words) in topic_words.iter().enumerate() {
            for j in 0..cfg.items_per_topic {
                let id = format!("{prefix}{t:02}{j:02}");
                let unique = word(&mut rng, 3);
                let title = format!("{} {} {unique}", words[0], words[1]);
                items.push(item(id.clone(), label, title, words[2].clone(), format!("{} {}", words[0], words[2])));
                topic_of.push((id.clone(), Some(t)));
                by_topic[di][t].push(id);
            }
        }
        for j in 0..cfg.rare_items {
            let id = format!("{prefix}r{j:02}");
            let title = format!("{} {}", word(&mut rng, 3), word(&mut rng, 3));
            items.push(item(id.clone(), label, title, word(&mut rng, 2), word(&mut rng, 3)));
            topic_of.push((id.clone(), None));
            rare[di].push(id);
        }
    }

    let mut records = Vec::new();
    for u in 0..cfg.users {
        let user = format!("u{u:04}");
        let noise = rng.random_bool(cfg.noise_share);
        let single = (!noise && rng.random_bool(cfg.single_domain_share)).then(|| rng.random_range(0..2usize));
        let len = if noise { rng.random_range(2..5) } else { rng.random_range(cfg.min_len..=cfg.max_len) };
        let n_pref = rng.random_range(2..=3).min(cfg.topics);
        let prefs = rand::seq::index::sample(&mut rng, cfg.topics, n_pref).into_vec();
        let mut topic = prefs[0];
        let mut ts: i64 = rng.random_range(1_000..10_000);
        for _ in 0..len {
            if !rng.random_bool(cfg.stickiness) {
                topic = *prefs.choose(&mut rng).expect("non-empty");
            }
            let di = single.unwrap_or_else(|| rng.random_range(0..2));
            let pool = if rng.random_bool(0.01) && !rare[di].is_empty() { &rare[di] } else { &by_topic[di][topic] };
            let id = pool.choose(&mut rng).expect("non-empty pool").clone();
            // gap 0 produces timestamp ties
            ts += rng.random_range(0..4);
            let domain = if di == 0 { labels.a.clone() } else { labels.b.clone() };
            records.push(RawRecord { user: user.clone(), item: id, domain, ts });
        }
    }
    SyntheticData { labels, catalog: ItemCatalog::new(items), records, topic_of }
}

impl SyntheticData {
    /// One JSON object per line: `{user, item, domain, ts}`.
    pub fn write_interactions(&self, mut w: impl Write) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_catalog(&self, w: impl Write) -> io::Result<()> {
        self.catalog.write_jsonl(w).map_err(io::Error::other)
    }
}
