//! Literature and dataset search behind provider traits. The fixture
//! providers rank a local corpus by query-term overlap; the hub provider asks
//! the public Hugging Face API.

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ProviderError {
    #[error("empty query")]
    EmptyQuery,
    #[error("provider failed: {0}")]
    Failed(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Publication {
    pub source_id: String,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub source_id: String,
    pub description: String,
    /// Record count when known.
    #[serde(default)]
    pub size: Option<u64>,
}

pub trait LiteratureProvider: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Result<Vec<Publication>, ProviderError>;
}

pub trait DatasetProvider: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Result<Vec<DatasetInfo>, ProviderError>;
}

pub fn search_literature(query: &str, provider: &dyn LiteratureProvider, k: usize) -> Result<Vec<Publication>, ProviderError> {
    if query.trim().is_empty() {
        return Err(ProviderError::EmptyQuery);
    }
    let mut hits = provider.search(query, k)?;
    hits.truncate(k);
    Ok(hits)
}

pub fn search_datasets(query: &str, provider: &dyn DatasetProvider, k: usize) -> Result<Vec<DatasetInfo>, ProviderError> {
    if query.trim().is_empty() {
        return Err(ProviderError::EmptyQuery);
    }
    let mut hits = provider.search(query, k)?;
    hits.truncate(k);
    Ok(hits)
}

fn terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.len() > 1)
        .map(|t| t.to_lowercase())
        .collect()
}

/// Items with at least one query term, most matching terms first, corpus
/// order on ties. Matching is on word prefixes so "molecule" hits "molecules".
fn rank<'a, T>(items: &'a [T], text: impl Fn(&T) -> String, query: &str, k: usize) -> Vec<&'a T> {
    let q = terms(query);
    let mut scored: Vec<(usize, usize, &T)> = items
        .iter()
        .enumerate()
        .filter_map(|(i, item)| {
            let words = terms(&text(item));
            let hits = q.iter().filter(|t| words.iter().any(|w| w.starts_with(t.as_str()))).count();
            (hits > 0).then_some((hits, i, item))
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(k).map(|(_, _, item)| item).collect()
}

#[derive(Clone, Debug, Default)]
pub struct FixtureLiterature {
    pub publications: Vec<Publication>,
}

impl FixtureLiterature {
    pub fn builtin() -> Self {
        Self { publications: serde_json::from_str(include_str!("../../fixtures/literature.json")).expect("bundled corpus parses") }
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path).map_err(|e| ProviderError::Failed(format!("{}: {e}", path.display())))?;
        let publications = serde_json::from_str(&text).map_err(|e| ProviderError::Failed(e.to_string()))?;
        Ok(Self { publications })
    }
}

impl LiteratureProvider for FixtureLiterature {
    fn search(&self, query: &str, k: usize) -> Result<Vec<Publication>, ProviderError> {
        Ok(rank(&self.publications, |p| format!("{} {}", p.title, p.abstract_text), query, k).into_iter().cloned().collect())
    }
}

#[derive(Clone, Debug, Default)]
pub struct FixtureDatasets {
    pub datasets: Vec<DatasetInfo>,
}

impl FixtureDatasets {
    pub fn builtin() -> Self {
        Self { datasets: serde_json::from_str(include_str!("../../fixtures/datasets.json")).expect("bundled corpus parses") }
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path).map_err(|e| ProviderError::Failed(format!("{}: {e}", path.display())))?;
        let datasets = serde_json::from_str(&text).map_err(|e| ProviderError::Failed(e.to_string()))?;
        Ok(Self { datasets })
    }
}

impl DatasetProvider for FixtureDatasets {
    fn search(&self, query: &str, k: usize) -> Result<Vec<DatasetInfo>, ProviderError> {
        Ok(rank(&self.datasets, |d| format!("{} {}", d.source_id, d.description), query, k).into_iter().cloned().collect())
    }
}

/// Dataset search against `https://huggingface.co/api/datasets`.
#[derive(Clone, Debug)]
pub struct HubDatasets {
    pub base_url: String,
    pub timeout: Duration,
}

impl Default for HubDatasets {
    fn default() -> Self {
        Self { base_url: "https://huggingface.co".into(), timeout: Duration::from_secs(20) }
    }
}

#[derive(Deserialize)]
struct HubEntry {
    id: String,
    #[serde(default)]
    description: Option<String>,
    #[serde(default, rename = "cardData")]
    card: Option<serde_json::Value>,
}

impl DatasetProvider for HubDatasets {
    fn search(&self, query: &str, k: usize) -> Result<Vec<DatasetInfo>, ProviderError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(self.timeout)
            .build()
            .map_err(|e| ProviderError::Failed(e.to_string()))?;
        let entries: Vec<HubEntry> = client
            .get(format!("{}/api/datasets", self.base_url.trim_end_matches('/')))
            .query(&[("search", query), ("limit", &k.to_string())])
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| ProviderError::Failed(e.to_string()))?;
        Ok(entries
            .into_iter()
            .map(|e| {
                let pretty = e.card.as_ref().and_then(|c| c["pretty_name"].as_str()).map(str::to_string);
                DatasetInfo {
                    source_id: e.id,
                    description: e.description.or(pretty).unwrap_or_default(),
                    size: None,
                }
            })
            .collect())
    }
}
