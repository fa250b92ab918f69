mod common;

use std::sync::{Arc, Mutex};

use cdsr_core::corpus::SplitDataset;
use cdsr_core::gateway::{
    ChatProvider, EmbeddingProvider, Gateway, PromptTemplates, ProviderError, StubEmbedder, StubMode, StubSummarizer,
};
use cdsr_core::profiler::{profile_all, profile_user, ProfileContext, UserProfileStore};
use cdsr_core::semantic::kmeans;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stub summariser that keeps every prompt it receives.
#[derive(Default)]
struct Recording {
    prompts: Mutex<Vec<String>>,
}

impl ChatProvider for Recording {
    fn id(&self) -> &str {
        "recording-stub"
    }

    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        self.prompts.lock().unwrap().push(prompt.to_string());
        StubSummarizer.complete(prompt)
    }
}

/// Stub embedder that counts calls.
struct Counting {
    inner: StubEmbedder,
    calls: Mutex<usize>,
}

impl EmbeddingProvider for Counting {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn dim(&self) -> Option<usize> {
        self.inner.dim()
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        *self.calls.lock().unwrap() += 1;
        self.inner.embed(text)
    }
}

#[test]
fn overall_prompt_contains_every_sub_summary() {
    let (catalog, ds) = common::synthetic_catalog(40);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let assignment = kmeans(&common::gaussian(&mut rng, ds.id_map.len(), 8, 1.0), 6, 2).unwrap();
    let chat = Arc::new(Recording::default());
    let gw = Gateway::new(Arc::new(StubEmbedder::new(0, 16, StubMode::Tokens)), chat.clone(), None);
    let templates = PromptTemplates::default();
    let ctx = ProfileContext { assignment: &assignment, catalog: &catalog, id_map: &ds.id_map, gateway: &gw, templates: &templates };
    let mut multi = 0;
    for user in ds.users.iter().take(20) {
        chat.prompts.lock().unwrap().clear();
        let p = profile_user(&user.user_id, &user.train_mixed, &ctx).unwrap();
        let prompts = chat.prompts.lock().unwrap().clone();
        assert_eq!(prompts.len(), p.sub_summaries.len() + 1, "one call per non-empty cluster plus the overall call");
        let overall = prompts.last().unwrap();
        let mut last = 0;
        for (_, s) in &p.sub_summaries {
            let at = overall[last..].find(s.as_str()).unwrap_or_else(|| panic!("{}: summary {s:?} missing", user.user_id));
            last += at + s.len();
        }
        multi += usize::from(p.sub_summaries.len() > 1);
    }
    assert!(multi > 10, "partitioning should usually yield several clusters ({multi}/20)");
}

#[test]
fn resuming_makes_one_embedding_call_per_remaining_user() {
    let (catalog, ds) = common::synthetic_catalog(140);
    let ds = SplitDataset { users: ds.users[..100].to_vec(), ..ds };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let assignment = kmeans(&common::gaussian(&mut rng, ds.id_map.len(), 8, 1.0), 4, 2).unwrap();
    let templates = PromptTemplates::default();
    let dir = tempfile::tempdir().unwrap();
    let counting = || Arc::new(Counting { inner: StubEmbedder::new(0, 16, StubMode::Tokens), calls: Mutex::new(0) });

    let first = counting();
    let gw = Gateway::new(first.clone(), Arc::new(StubSummarizer), None);
    let ctx = ProfileContext { assignment: &assignment, catalog: &catalog, id_map: &ds.id_map, gateway: &gw, templates: &templates };
    let half = SplitDataset { users: ds.users[..50].to_vec(), ..ds.clone() };
    let mut store = UserProfileStore::open(dir.path()).unwrap();
    assert_eq!(profile_all(&half, &ctx, &mut store).unwrap().profiled, 50);
    assert_eq!(*first.calls.lock().unwrap(), 50);

    let second = counting();
    let gw = Gateway::new(second.clone(), Arc::new(StubSummarizer), None);
    let ctx = ProfileContext { gateway: &gw, ..ctx };
    let mut store = UserProfileStore::open(dir.path()).unwrap();
    let report = profile_all(&ds, &ctx, &mut store).unwrap();
    assert_eq!((report.profiled, report.skipped), (50, 50));
    assert_eq!(*second.calls.lock().unwrap(), 50);
    assert_eq!(store.len(), 100);

    // a run from scratch yields the same profiles
    let gw = Gateway::new(counting(), Arc::new(StubSummarizer), None);
    let ctx = ProfileContext { gateway: &gw, ..ctx };
    let mut fresh = UserProfileStore::in_memory();
    profile_all(&ds, &ctx, &mut fresh).unwrap();
    assert_eq!(fresh.checksum(), store.checksum());
}
