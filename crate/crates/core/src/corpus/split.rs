use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::hash::derive_seed;

/// Per user, newest first: review 0 is the test target, review 1 is a
/// validation candidate, the next `train_per_user` reviews are training
/// targets. Validation keeps a seeded sample of `validation_size` candidates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitPolicy {
    pub train_per_user: usize,
    pub validation_size: usize,
    pub seed: u64,
}

impl Default for SplitPolicy {
    fn default() -> Self {
        Self {
            train_per_user: 1,
            validation_size: 512,
            seed: 0,
        }
    }
}

/// Review indices of target instances per split, ordered by user id and then recency.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split(corpus: &Corpus, policy: &SplitPolicy) -> Splits {
    let mut out = Splits::default();
    let mut candidates = Vec::new();
    for user in corpus.users() {
        let idx = corpus.user_review_indices(user);
        if let Some(&t) = idx.first() {
            out.test.push(t);
        }
        if let Some(&v) = idx.get(1) {
            candidates.push(v);
        }
        out.train
            .extend(idx.iter().skip(2).take(policy.train_per_user).copied());
    }
    if candidates.len() > policy.validation_size {
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(policy.seed, "validation", 0));
        order.shuffle(&mut rng);
        let mut keep = order[..policy.validation_size].to_vec();
        keep.sort_unstable();
        candidates = keep.into_iter().map(|i| candidates[i]).collect();
    }
    out.validation = candidates;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::{item, review};
    use std::collections::BTreeSet;

    fn corpus() -> Corpus {
        let mut reviews = Vec::new();
        for u in ["a", "b", "c"] {
            for (t, it) in ["i1", "i2", "i3", "i4"].iter().enumerate() {
                reviews.push(review(u, it, t as i64, "text"));
            }
        }
        Corpus::new(reviews, ["i1", "i2", "i3", "i4"].map(item).to_vec()).unwrap()
    }

    #[test]
    fn splits_are_disjoint() {
        let c = corpus();
        let s = split(&c, &SplitPolicy::default());
        let all: Vec<_> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
        let set: BTreeSet<_> = all.iter().collect();
        assert_eq!(all.len(), set.len());
        assert_eq!(s.test.len(), 3);
        assert_eq!(s.validation.len(), 3);
        assert_eq!(s.train.len(), 3);
        for &t in &s.test {
            assert_eq!(c.review(t).timestamp, 3);
        }
    }

    #[test]
    fn validation_sample_is_seeded() {
        let c = corpus();
        let p = SplitPolicy {
            validation_size: 2,
            seed: 11,
            ..Default::default()
        };
        let a = split(&c, &p);
        assert_eq!(a, split(&c, &p));
        assert_eq!(a.validation.len(), 2);
    }

    #[test]
    fn target_never_in_own_history() {
        let c = corpus();
        let s = split(&c, &SplitPolicy::default());
        for &t in s.train.iter().chain(&s.validation).chain(&s.test) {
            let r = c.review(t);
            let h = c.retrieve_recent(&r.user_id, &r.item_id, 8);
            assert!(h.reviews.iter().all(|x| x != r));
        }
    }
}
