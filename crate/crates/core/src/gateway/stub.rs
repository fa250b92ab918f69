//! Deterministic offline providers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::prompts::{OVERALL_WORD_LIMIT, SUBSEQUENCE_WORD_LIMIT};
use super::{ChatProvider, EmbeddingProvider, ProviderError};

/// How the stub embedder turns text into a seed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StubMode {
    /// One Gaussian draw seeded by the whole text.
    #[default]
    Text,
    /// Sum of per-token Gaussian draws, so texts sharing words land near each other.
    Tokens,
}

pub fn seed_for(seed: u64, text: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(text.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 digest has 32 bytes"))
}

fn gaussian(seed: u64, text: &str, dim: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed_for(seed, text));
    (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

#[derive(Clone, Debug)]
pub struct StubEmbedder {
    seed: u64,
    dim: usize,
    mode: StubMode,
    id: String,
}

impl StubEmbedder {
    pub fn new(seed: u64, dim: usize, mode: StubMode) -> Self {
        let tag = match mode {
            StubMode::Text => "text",
            StubMode::Tokens => "tokens",
        };
        Self { seed, dim, mode, id: format!("stub-embed-{tag}-s{seed}-d{dim}") }
    }

    pub fn embed_text(&self, text: &str) -> Vec<f32> {
        let mut v = match self.mode {
            StubMode::Text => gaussian(self.seed, text, self.dim),
            StubMode::Tokens => {
                let mut acc = vec![0.0; self.dim];
                let mut n = 0;
                for t in tokens(text) {
                    for (a, g) in acc.iter_mut().zip(gaussian(self.seed, &t, self.dim)) {
                        *a += g;
                    }
                    n += 1;
                }
                if n == 0 {
                    gaussian(self.seed, text, self.dim)
                } else {
                    acc
                }
            }
        };
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v.into_iter().map(|x| x as f32).collect()
    }
}

impl EmbeddingProvider for StubEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, ProviderError> {
        Ok(self.embed_text(text))
    }
}

/// Echoes the list a profiling prompt carries: `"Prefers: " + "; "-joined entries`,
/// cut to the word limit of the template it recognises.
#[derive(Clone, Debug, Default)]
pub struct StubSummarizer;

pub const STUB_PREFIX: &str = "Prefers: ";

impl StubSummarizer {
    pub fn summarize_text(&self, prompt: &str) -> String {
        let lines: Vec<&str> = prompt.lines().collect();
        let marker = lines
            .iter()
            .position(|l| l.starts_with("The commodities are segmented"))
            .map(|p| (p, SUBSEQUENCE_WORD_LIMIT))
            .or_else(|| lines.iter().position(|l| l.starts_with("Please illustrate")).map(|p| (p, OVERALL_WORD_LIMIT)));
        let (entries, limit): (Vec<String>, usize) = match marker {
            Some((end, limit)) if end > 1 => {
                let body = &lines[1..end];
                let entries = body
                    .iter()
                    .enumerate()
                    .map(|(i, l)| {
                        let l = if i + 1 == body.len() { l.strip_suffix('.').unwrap_or(l) } else { l };
                        let l = l.strip_suffix(';').unwrap_or(l);
                        l.strip_prefix(STUB_PREFIX).unwrap_or(l).trim().to_string()
                    })
                    .filter(|l| !l.is_empty())
                    .collect();
                (entries, limit)
            }
            _ => (vec![prompt.trim().to_string()], SUBSEQUENCE_WORD_LIMIT),
        };
        let full = format!("{STUB_PREFIX}{}", entries.join("; "));
        full.split_whitespace().take(limit).collect::<Vec<_>>().join(" ")
    }
}

impl ChatProvider for StubSummarizer {
    fn id(&self) -> &str {
        "stub-chat"
    }

    fn complete(&self, prompt: &str) -> Result<String, ProviderError> {
        Ok(self.summarize_text(prompt))
    }
}
