//! Review corpus: records, per-user and per-item indices, recency retrieval
//! and peer lookup.

mod ingest;
mod split;
mod synth;

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::sha256_hex;

pub use ingest::{ingest, parse_corpus, write_corpus, IngestReport, RejectedLine};
pub use split::{split, SplitPolicy, Splits};
pub use synth::{generate_synthetic, write_synthetic, GenConfig, SynthFiles, UserStyle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Review {
    pub user_id: String,
    pub item_id: String,
    pub title: String,
    pub text: String,
    pub rating: f64,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Item {
    pub item_id: String,
    pub title: String,
    #[serde(default)]
    pub description: String,
}

/// Up to `K` reviews of one user, most recent first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RetrievedHistory {
    pub reviews: Vec<Review>,
}

impl RetrievedHistory {
    pub fn len(&self) -> usize {
        self.reviews.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reviews.is_empty()
    }
}

/// Newest first; equal timestamps by item id, then user id, ascending.
fn recency_order(a: &Review, b: &Review) -> Ordering {
    b.timestamp
        .cmp(&a.timestamp)
        .then_with(|| a.item_id.cmp(&b.item_id))
        .then_with(|| a.user_id.cmp(&b.user_id))
}

#[derive(Clone, Debug)]
pub struct Corpus {
    reviews: Vec<Review>,
    items: Vec<Item>,
    item_index: BTreeMap<String, usize>,
    by_user: BTreeMap<String, Vec<usize>>,
    by_item: BTreeMap<String, Vec<usize>>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.reviews == other.reviews && self.items == other.items
    }
}

impl Corpus {
    /// Indexes validated records. Callers that want per-record rejection
    /// reports go through [`ingest`] / [`parse_corpus`].
    pub fn new(reviews: Vec<Review>, items: Vec<Item>) -> Result<Self> {
        let mut item_index = BTreeMap::new();
        for (i, it) in items.iter().enumerate() {
            if item_index.insert(it.item_id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate item_id {}", it.item_id)));
            }
        }
        let mut keys = BTreeSet::new();
        for r in &reviews {
            validate_review(r)?;
            if !item_index.contains_key(&r.item_id) {
                return Err(Error::Data(format!(
                    "review by {} references unknown item {}",
                    r.user_id, r.item_id
                )));
            }
            if !keys.insert((r.user_id.as_str(), r.item_id.as_str(), r.timestamp)) {
                return Err(Error::Data(format!(
                    "duplicate review ({}, {}, {})",
                    r.user_id, r.item_id, r.timestamp
                )));
            }
        }
        let mut by_user: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut by_item: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in reviews.iter().enumerate() {
            by_user.entry(r.user_id.clone()).or_default().push(i);
            by_item.entry(r.item_id.clone()).or_default().push(i);
        }
        for list in by_user.values_mut().chain(by_item.values_mut()) {
            list.sort_by(|&a, &b| recency_order(&reviews[a], &reviews[b]));
        }
        Ok(Self {
            reviews,
            items,
            item_index,
            by_user,
            by_item,
        })
    }

    pub fn reviews(&self) -> &[Review] {
        &self.reviews
    }

    pub fn review(&self, idx: usize) -> &Review {
        &self.reviews[idx]
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn item(&self, item_id: &str) -> Option<&Item> {
        self.item_index.get(item_id).map(|&i| &self.items[i])
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.by_user.keys().map(String::as_str)
    }

    pub fn num_users(&self) -> usize {
        self.by_user.len()
    }

    /// Review indices of `user`, most recent first.
    pub fn user_review_indices(&self, user: &str) -> &[usize] {
        self.by_user.get(user).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Review indices of `item`, most recent first.
    pub fn item_review_indices(&self, item: &str) -> &[usize] {
        self.by_item.get(item).map(Vec::as_slice).unwrap_or(&[])
    }

    /// SHA-256 of the canonical line-delimited serialization.
    pub fn content_hash(&self) -> String {
        let (main, meta) = write_corpus(self);
        let mut bytes = main.into_bytes();
        bytes.push(0);
        bytes.extend_from_slice(meta.as_bytes());
        sha256_hex(&bytes)
    }

    /// The user's `k` most recent reviews, skipping any review of `target_item`.
    pub fn retrieve_recent(&self, user: &str, target_item: &str, k: usize) -> RetrievedHistory {
        self.retrieve_recent_before(user, target_item, k, None)
    }

    /// As [`Corpus::retrieve_recent`], restricted to reviews strictly older
    /// than `before` when given.
    pub fn retrieve_recent_before(
        &self,
        user: &str,
        target_item: &str,
        k: usize,
        before: Option<i64>,
    ) -> RetrievedHistory {
        let reviews = self
            .user_review_indices(user)
            .iter()
            .map(|&i| &self.reviews[i])
            .filter(|r| r.item_id != target_item)
            .filter(|r| before.is_none_or(|t| r.timestamp < t))
            .take(k)
            .cloned()
            .collect();
        RetrievedHistory { reviews }
    }

    /// Up to `m_max` reviews of `item` by users other than `exclude_user`,
    /// one per peer (their newest), most recent first. With `before`, only
    /// reviews strictly older than it are considered.
    pub fn peers(
        &self,
        item: &str,
        exclude_user: &str,
        m_max: usize,
        before: Option<i64>,
    ) -> Vec<Review> {
        let mut seen = BTreeSet::new();
        self.item_review_indices(item)
            .iter()
            .map(|&i| &self.reviews[i])
            .filter(|r| r.user_id != exclude_user)
            .filter(|r| before.is_none_or(|t| r.timestamp < t))
            .filter(|r| seen.insert(r.user_id.as_str()))
            .take(m_max)
            .cloned()
            .collect()
    }
}

pub(crate) fn validate_review(r: &Review) -> Result<()> {
    if !(1.0..=5.0).contains(&r.rating) {
        return Err(Error::Data(format!(
            "rating {} outside [1, 5] for ({}, {})",
            r.rating, r.user_id, r.item_id
        )));
    }
    if r.user_id.is_empty() || r.item_id.is_empty() {
        return Err(Error::Data("empty user_id or item_id".into()));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub fn review(user: &str, item: &str, ts: i64, text: &str) -> Review {
        Review {
            user_id: user.into(),
            item_id: item.into(),
            title: String::new(),
            text: text.into(),
            rating: 4.0,
            timestamp: ts,
        }
    }

    pub fn item(id: &str) -> Item {
        Item {
            item_id: id.into(),
            title: format!("title {id}"),
            description: String::new(),
        }
    }

    fn items(ids: &[&str]) -> Vec<Item> {
        ids.iter().map(|i| item(i)).collect()
    }

    #[test]
    fn unknown_user_gets_empty_history() {
        let c = Corpus::new(vec![review("a", "i1", 1, "x")], items(&["i1"])).unwrap();
        assert!(c.retrieve_recent("nobody", "i1", 8).is_empty());
    }

    #[test]
    fn returns_all_newest_first() {
        let c = Corpus::new(
            vec![
                review("a", "i1", 10, "x"),
                review("a", "i2", 30, "y"),
                review("a", "i3", 20, "z"),
            ],
            items(&["i1", "i2", "i3", "t"]),
        )
        .unwrap();
        let h = c.retrieve_recent("a", "t", 8);
        let ts: Vec<_> = h.reviews.iter().map(|r| r.timestamp).collect();
        assert_eq!(ts, vec![30, 20, 10]);
    }

    #[test]
    fn equal_timestamps_break_by_item_id() {
        let c = Corpus::new(
            vec![review("a", "i9", 5, "x"), review("a", "i2", 5, "y")],
            items(&["i2", "i9"]),
        )
        .unwrap();
        let h = c.retrieve_recent("a", "none", 8);
        let ids: Vec<_> = h.reviews.iter().map(|r| r.item_id.as_str()).collect();
        assert_eq!(ids, vec!["i2", "i9"]);
    }

    #[test]
    fn excludes_target_item_and_respects_k() {
        let c = Corpus::new(
            vec![
                review("a", "i1", 1, "x"),
                review("a", "i2", 2, "y"),
                review("a", "i3", 3, "z"),
            ],
            items(&["i1", "i2", "i3"]),
        )
        .unwrap();
        let h = c.retrieve_recent("a", "i3", 1);
        assert_eq!(h.len(), 1);
        assert_eq!(h.reviews[0].item_id, "i2");
        assert!(c.retrieve_recent("a", "i3", 0).is_empty());
        let before = c.retrieve_recent_before("a", "none", 8, Some(3));
        assert_eq!(before.len(), 2);
    }

    #[test]
    fn peers_rules() {
        let c = Corpus::new(
            vec![
                review("me", "i", 1, "mine"),
                review("p1", "i", 2, "old"),
                review("p1", "i", 9, "new"),
                review("p2", "i", 3, "b"),
                review("p3", "i", 4, "c"),
                review("me", "solo", 5, "only me"),
            ],
            items(&["i", "solo"]),
        )
        .unwrap();
        assert!(c.peers("solo", "me", 16, None).is_empty());
        assert!(c.peers("missing", "me", 16, None).is_empty());
        let p = c.peers("i", "me", 16, None);
        assert_eq!(p.len(), 3);
        assert_eq!(p[0].text, "new");
        assert!(p.iter().all(|r| r.user_id != "me"));
        assert_eq!(c.peers("i", "me", 2, None).len(), 2);
        let early = c.peers("i", "me", 16, Some(4));
        assert_eq!(early.len(), 2);
        assert_eq!(early[0].text, "b");
    }

    #[test]
    fn rejects_bad_records() {
        assert!(Corpus::new(vec![review("a", "zz", 1, "x")], items(&["i"])).is_err());
        let mut r = review("a", "i", 1, "x");
        r.rating = 6.0;
        assert!(Corpus::new(vec![r], items(&["i"])).is_err());
        assert!(Corpus::new(
            vec![review("a", "i", 1, "x"), review("a", "i", 1, "y")],
            items(&["i"])
        )
        .is_err());
    }
}
