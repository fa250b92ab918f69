//! Prompt templates for item embeddings and two-level user profiling.

use serde::{Deserialize, Serialize};

use super::GatewayError;
use crate::corpus::CatalogItem;

pub const UNKNOWN: &str = "unknown";

pub const ITEM_TEMPLATE: &str = "The {DOMAIN} item has the following attributes: name is {TITLE}; brand is {BRAND}; \
rating is {DATE}; price is {PRICE}. The item has the following features: {FEATURE}. \
The item has the following descriptions: {DESCRIPTION}.";

pub const SUBSEQUENCE_TEMPLATE: &str = "Assume you are a consumer who is shopping online. \
You have shown interest in the following commodities: \n{ITEMS}.\n\
The commodities are segmented by '\\n'.\n\
Please conclude it not beyond 50 words. Do not only evaluate one specific commodity but illustrate the interests overall.";

pub const OVERALL_TEMPLATE: &str = "Assume you are a consumer and there are preference demonstrations from several aspects as follows: \
\n{SUMMARIES}.\n\
Please illustrate your preference with fewer than 100 words";

pub const SUBSEQUENCE_WORD_LIMIT: usize = 50;
pub const OVERALL_WORD_LIMIT: usize = 100;

/// Per-dataset template set. Defaults are the English e-commerce templates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    pub item: String,
    pub subsequence: String,
    pub overall: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self { item: ITEM_TEMPLATE.into(), subsequence: SUBSEQUENCE_TEMPLATE.into(), overall: OVERALL_TEMPLATE.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemPrompt {
    pub item_id: String,
    pub text: String,
}

/// Single-pass `{NAME}` substitution; substituted values are never rescanned.
pub fn render(template: &str, lookup: impl Fn(&str) -> Option<String>) -> String {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        match tail.find('}') {
            Some(end) => {
                let name = &tail[1..end];
                match lookup(name) {
                    Some(v) => out.push_str(&v),
                    None => out.push_str(&tail[..=end]),
                }
                rest = &tail[end + 1..];
            }
            None => {
                out.push_str(tail);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

fn attr(v: &Option<String>) -> String {
    match v.as_deref().map(str::trim) {
        Some(s) if !s.is_empty() => s.to_string(),
        _ => UNKNOWN.to_string(),
    }
}

impl PromptTemplates {
    pub fn item_prompt(&self, item: &CatalogItem, domain_noun: &str) -> Result<ItemPrompt, GatewayError> {
        let title = item.title.as_deref().map(str::trim).filter(|t| !t.is_empty());
        let Some(title) = title else {
            return Err(GatewayError::MissingTitle(item.item_id.clone()));
        };
        let text = render(&self.item, |name| match name {
            "DOMAIN" => Some(domain_noun.to_string()),
            "TITLE" => Some(title.to_string()),
            "BRAND" => Some(attr(&item.brand)),
            "DATE" => Some(attr(&item.date)),
            "PRICE" => Some(attr(&item.price)),
            "FEATURE" => Some(attr(&item.features)),
            "DESCRIPTION" => Some(attr(&item.description)),
            _ => None,
        });
        Ok(ItemPrompt { item_id: item.item_id.clone(), text })
    }

    pub fn subsequence_prompt<S: AsRef<str>>(&self, titles: &[S]) -> Result<String, GatewayError> {
        if titles.is_empty() {
            return Err(GatewayError::EmptyPromptInput("sub-sequence title list"));
        }
        let items = titles.iter().map(AsRef::as_ref).collect::<Vec<_>>().join("\n");
        Ok(render(&self.subsequence, |name| (name == "ITEMS").then(|| items.clone())))
    }

    /// Empty summaries are skipped; at least one must remain.
    pub fn overall_prompt<S: AsRef<str>>(&self, summaries: &[S]) -> Result<String, GatewayError> {
        let kept: Vec<&str> = summaries.iter().map(AsRef::as_ref).filter(|s| !s.trim().is_empty()).collect();
        if kept.is_empty() {
            return Err(GatewayError::EmptyPromptInput("overall summary list"));
        }
        let joined = kept.join(";\n");
        Ok(render(&self.overall, |name| (name == "SUMMARIES").then(|| joined.clone())))
    }
}

pub fn build_item_prompt(item: &CatalogItem, domain_noun: &str) -> Result<ItemPrompt, GatewayError> {
    PromptTemplates::default().item_prompt(item, domain_noun)
}

pub fn build_subsequence_prompt<S: AsRef<str>>(titles: &[S]) -> Result<String, GatewayError> {
    PromptTemplates::default().subsequence_prompt(titles)
}

pub fn build_overall_prompt<S: AsRef<str>>(summaries: &[S]) -> Result<String, GatewayError> {
    PromptTemplates::default().overall_prompt(summaries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tee() -> CatalogItem {
        CatalogItem {
            item_id: "i1".into(),
            domain: "A".into(),
            title: Some("Blue Tee".into()),
            brand: Some("Acme".into()),
            ..Default::default()
        }
    }

    #[test]
    fn missing_attributes_render_unknown() {
        let p = build_item_prompt(&tee(), "cloth").unwrap();
        assert!(p.text.contains("name is Blue Tee; brand is Acme; rating is unknown; price is unknown"));
        assert!(p.text.starts_with("The cloth item has the following attributes: "));
        assert!(p.text.ends_with("The item has the following descriptions: unknown."));
    }

    #[test]
    fn full_item_has_no_leftover_placeholders() {
        let item = CatalogItem {
            item_id: "i2".into(),
            domain: "A".into(),
            title: Some("Runner {X}".into()),
            brand: Some("B".into()),
            date: Some("2019".into()),
            price: Some("$12".into()),
            features: Some("light".into()),
            description: Some("for running".into()),
        };
        let p = build_item_prompt(&item, "sport").unwrap();
        assert!(!p.text.contains('<'));
        assert!(!p.text.contains(UNKNOWN));
        for needle in ["{TITLE}", "{BRAND}", "{DATE}", "{PRICE}", "{FEATURE}", "{DESCRIPTION}", "{DOMAIN}"] {
            assert!(!p.text.contains(needle));
        }
        // values are not rescanned
        assert!(p.text.contains("name is Runner {X};"));
    }

    #[test]
    fn missing_title_is_an_error() {
        let mut item = tee();
        item.title = None;
        assert!(matches!(build_item_prompt(&item, "cloth"), Err(GatewayError::MissingTitle(_))));
    }

    #[test]
    fn subsequence_prompt_layout() {
        let p = build_subsequence_prompt(&["X"]).unwrap();
        assert!(p.contains("You have shown interest in the following commodities: \nX"));
        assert!(p.contains("Please conclude it not beyond 50 words."));
        assert!(p.contains("The commodities are segmented by '\\n'."));
        let two = build_subsequence_prompt(&["X", "Y"]).unwrap();
        assert!(two.contains("\nX\nY.\n"));
        assert!(build_subsequence_prompt::<&str>(&[]).is_err());
    }

    #[test]
    fn subsequence_prompt_length_matches_concatenation() {
        let titles: Vec<String> = (0..50).map(|i| format!("Item number {i} ü")).collect();
        let p = build_subsequence_prompt(&titles).unwrap();
        let mut oracle = String::new();
        oracle += "Assume you are a consumer who is shopping online. You have shown interest in the following commodities: \n";
        for (i, t) in titles.iter().enumerate() {
            if i > 0 {
                oracle += "\n";
            }
            oracle += t;
        }
        oracle += ".\nThe commodities are segmented by '\\n'.\nPlease conclude it not beyond 50 words. ";
        oracle += "Do not only evaluate one specific commodity but illustrate the interests overall.";
        assert_eq!(p.len(), oracle.len());
        assert_eq!(p, oracle);
    }

    #[test]
    fn overall_prompt_keeps_order_and_skips_empty() {
        let p = build_overall_prompt(&["likes sci-fi"]).unwrap();
        assert!(p.contains("likes sci-fi"));
        assert!(p.contains("Please illustrate your preference with fewer than 100 words"));
        assert!(p.contains("preference demonstrations from several aspects"));
        let s: Vec<String> = (1..=5).map(|i| format!("summary-{i}")).collect();
        let p = build_overall_prompt(&s).unwrap();
        let pos: Vec<usize> = s.iter().map(|x| p.find(x.as_str()).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        assert!(build_overall_prompt(&["", "  "]).is_err());
        assert_eq!(build_overall_prompt(&["a", "", "b"]).unwrap(), build_overall_prompt(&["a", "b"]).unwrap());
    }

    #[test]
    fn item_prompts_are_deterministic_across_runs() {
        let items: Vec<CatalogItem> = (0..1000)
            .map(|i| CatalogItem {
                item_id: format!("i{i}"),
                domain: "A".into(),
                title: Some(format!("Title {i}")),
                price: (i % 3 == 0).then(|| format!("{i}.99")),
                ..Default::default()
            })
            .collect();
        let run = || items.iter().map(|i| build_item_prompt(i, "cloth").unwrap().text).collect::<Vec<_>>();
        assert_eq!(run(), run());
    }
}
