use crate::corpus::{Corpus, Review, Splits};
use crate::diffrep::{DiffBuilder, DiffCache, DiffRepresentation, RetrievalConfig};
use crate::embedder::EmbedderSpec;
use crate::error::{Error, Result};
use crate::toylm::{assemble_prompt, PromptFlags, PromptInput, PromptPlan, Template};

/// One target review with its retrieved histories and their representations.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub review: usize,
    pub histories: Vec<Review>,
    pub reps: Vec<DiffRepresentation>,
}

impl Instance {
    pub fn truncated(&self, k: usize) -> Instance {
        Instance {
            review: self.review,
            histories: self.histories.iter().take(k).cloned().collect(),
            reps: self.reps.iter().take(k).cloned().collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Instance>,
    pub validation: Vec<Instance>,
    pub test: Vec<Instance>,
}

fn history_for(corpus: &Corpus, review: usize, r: &RetrievalConfig) -> Vec<Review> {
    let t = corpus.review(review);
    let before = r.history_before_target.then_some(t.timestamp);
    corpus
        .retrieve_recent_before(&t.user_id, &t.item_id, r.k, before)
        .reviews
}

/// Retrieves histories and builds representations for `indices`. Values are
/// rounded to `f32` so instances built here match ones read from a cache.
pub fn prepare(
    corpus: &Corpus,
    builder: &mut DiffBuilder<'_>,
    indices: &[usize],
    r: &RetrievalConfig,
) -> Result<Vec<Instance>> {
    indices
        .iter()
        .map(|&i| {
            let t = corpus.review(i);
            let histories = history_for(corpus, i, r);
            let peers_before = r.peers_before_target.then_some(t.timestamp);
            let mut reps = builder.for_histories(corpus, &t.user_id, &histories, r.m_max, peers_before)?;
            reps.iter_mut().for_each(DiffRepresentation::round_to_f32);
            Ok(Instance { review: i, histories, reps })
        })
        .collect()
}

impl Dataset {
    pub fn build(corpus: &Corpus, spec: &EmbedderSpec, splits: &Splits, r: &RetrievalConfig) -> Result<Self> {
        let mut b = DiffBuilder::new(spec);
        Ok(Self {
            train: prepare(corpus, &mut b, &splits.train, r)?,
            validation: prepare(corpus, &mut b, &splits.validation, r)?,
            test: prepare(corpus, &mut b, &splits.test, r)?,
        })
    }

    /// Reassembles a dataset from cached representations; histories are
    /// re-retrieved and must line up with the cached rows.
    pub fn from_cache(corpus: &Corpus, cache: &DiffCache, splits: &Splits) -> Result<Self> {
        let r = &cache.key.retrieval;
        let lookup = |indices: &[usize]| -> Result<Vec<Instance>> {
            indices
                .iter()
                .map(|&i| {
                    let reps = cache
                        .instances
                        .iter()
                        .find(|(idx, _)| *idx == i)
                        .map(|(_, reps)| reps.clone())
                        .ok_or_else(|| Error::Data(format!("review {i} missing from the representation cache")))?;
                    let histories = history_for(corpus, i, r);
                    let aligned = histories.len() == reps.len()
                        && histories.iter().zip(&reps).all(|(h, rep)| h.item_id == rep.item_id);
                    if !aligned {
                        return Err(Error::Data(format!("cached representations of review {i} do not match its histories")));
                    }
                    Ok(Instance { review: i, histories, reps })
                })
                .collect()
        };
        Ok(Self {
            train: lookup(&splits.train)?,
            validation: lookup(&splits.validation)?,
            test: lookup(&splits.test)?,
        })
    }

    pub fn all(&self) -> impl Iterator<Item = &Instance> {
        self.train.iter().chain(&self.validation).chain(&self.test)
    }
}

/// Prompt for `inst`. Training plans carry the target review as the
/// supervised span; inference plans keep `reserve` positions free.
pub fn plan_for(
    corpus: &Corpus,
    template: &Template,
    context: usize,
    reserve: usize,
    inst: &Instance,
    flags: &PromptFlags,
    training: bool,
) -> Result<PromptPlan> {
    let t = corpus.review(inst.review);
    let item = corpus
        .item(&t.item_id)
        .ok_or_else(|| Error::Data(format!("unknown item {}", t.item_id)))?;
    let input = PromptInput {
        item,
        title: &t.title,
        rating: t.rating,
        histories: &inst.histories,
        target: training.then_some(t.text.as_str()),
    };
    assemble_prompt(template, context, reserve, &input, flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, parse_corpus, split, GenConfig, SplitPolicy};
    use crate::diffrep::DiffCacheKey;

    fn corpus() -> Corpus {
        let f = generate_synthetic(&GenConfig {
            users: 6,
            items: 8,
            reviews_per_user: 5,
            ..Default::default()
        })
        .unwrap();
        parse_corpus(&f.main, &f.meta).unwrap().0
    }

    #[test]
    fn histories_are_older_and_aligned() {
        let c = corpus();
        let s = split(&c, &SplitPolicy { train_per_user: 3, ..Default::default() });
        let spec = EmbedderSpec::default();
        let d = Dataset::build(&c, &spec, &s, &RetrievalConfig::default()).unwrap();
        for inst in d.all() {
            let t = c.review(inst.review);
            assert_eq!(inst.histories.len(), inst.reps.len());
            for (h, r) in inst.histories.iter().zip(&inst.reps) {
                assert!(h.timestamp < t.timestamp);
                assert_eq!(h.user_id, t.user_id);
                assert_eq!(h.item_id, r.item_id);
            }
        }
        let t = d.test[0].truncated(1);
        assert_eq!((t.histories.len(), t.reps.len()), (1, 1));

        let cache = DiffCache {
            key: DiffCacheKey {
                corpus_hash: c.content_hash(),
                spec: spec.clone(),
                retrieval: RetrievalConfig::default(),
            },
            instances: d.all().map(|i| (i.review, i.reps.clone())).collect(),
        };
        assert_eq!(Dataset::from_cache(&c, &cache, &s).unwrap(), d);
    }
}
