//! Seeded synthetic review corpus with planted per-user style.
//!
//! Every user owns a catchphrase that opens each of their reviews and a
//! rating bias. Catchphrases are built from letters that never occur in the
//! shared item vocabulary, so the style signal is separable from item content.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write_corpus, Corpus, Item, Review};
use crate::error::{Error, Result};
use crate::hash::derive_seed;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserStyle {
    pub catchphrase: String,
    pub rating_bias: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub users: usize,
    pub items: usize,
    pub reviews_per_user: usize,
    pub seed: u64,
    /// Size of the catchphrase pool users draw from.
    pub catchphrases: usize,
    /// Explicit styles for the first `styles.len()` users; the rest are drawn.
    pub styles: Vec<UserStyle>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            users: 50,
            items: 60,
            reviews_per_user: 8,
            seed: 0,
            catchphrases: 8,
            styles: Vec::new(),
        }
    }
}

pub struct SynthFiles {
    pub main: String,
    pub meta: String,
    pub styles: Vec<UserStyle>,
}

const PHRASES: [&str; 8] = [
    "jazzy and quirky",
    "wow just wow",
    "yikes kinda wacky",
    "zany vibes",
    "quixotic joy",
    "vexing yet jolly",
    "kooky wizardry",
    "xtra juicy",
];
const RARE: [char; 8] = ['j', 'k', 'q', 'v', 'w', 'x', 'y', 'z'];
const CONSONANTS: [char; 12] = ['b', 'd', 'f', 'g', 'h', 'l', 'm', 'n', 'p', 'r', 's', 't'];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
const ADJECTIVES: [&str; 10] = [
    "silent", "golden", "fallen", "hidden", "last", "lost", "bright", "dim", "open", "second",
];
const NOUNS: [&str; 8] = [
    "saga", "tale", "album", "record", "film", "fable", "opus", "epic",
];
const GENRES: [&str; 8] = [
    "drama", "noir", "thriller", "romance", "horror", "satire", "legend", "ballad",
];
const ASPECTS: [&str; 6] = [
    "the pacing",
    "the cast",
    "the ending",
    "the sound",
    "the prose",
    "the mood",
];
const SENTIMENT: [&str; 5] = ["dire", "poor", "fine", "good", "superb"];
const BASE_TS: i64 = 1_600_000_000_000;
const DAY_MS: i64 = 86_400_000;

fn pseudo_word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    (0..syllables)
        .flat_map(|_| {
            [
                CONSONANTS[rng.random_range(0..CONSONANTS.len())],
                VOWELS[rng.random_range(0..VOWELS.len())],
            ]
        })
        .collect()
}

fn rare_word(rng: &mut ChaCha8Rng, first: char) -> String {
    let mut w = String::new();
    w.push(first);
    w.push(VOWELS[rng.random_range(0..VOWELS.len())]);
    w.push(RARE[rng.random_range(0..RARE.len())]);
    w.push(VOWELS[rng.random_range(0..VOWELS.len())]);
    w
}

fn phrase_pool(n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    (0..n)
        .map(|i| match PHRASES.get(i) {
            Some(p) => p.to_string(),
            None => format!(
                "{} {}",
                rare_word(rng, RARE[i % RARE.len()]),
                rare_word(rng, RARE[(i / RARE.len()) % RARE.len()])
            ),
        })
        .collect()
}

/// Builds deterministic `(main, meta)` line-delimited files.
pub fn generate_synthetic(cfg: &GenConfig) -> Result<SynthFiles> {
    if cfg.users == 0 || cfg.items == 0 || cfg.reviews_per_user == 0 {
        return Err(Error::Config("synthetic corpus needs users, items and reviews".into()));
    }
    if cfg.reviews_per_user > cfg.items {
        return Err(Error::Config(format!(
            "infeasible density: {} reviews per user but only {} items",
            cfg.reviews_per_user, cfg.items
        )));
    }
    if cfg.catchphrases == 0 && cfg.styles.len() < cfg.users {
        return Err(Error::Config("catchphrase pool is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "synth", 0));
    let pool = phrase_pool(cfg.catchphrases, &mut rng);

    let mut items = Vec::with_capacity(cfg.items);
    let mut keywords = Vec::with_capacity(cfg.items);
    let mut quality = Vec::with_capacity(cfg.items);
    for i in 0..cfg.items {
        let syllables = 2 + rng.random_range(0..2usize);
        let kw = pseudo_word(&mut rng, syllables);
        let noun = NOUNS[rng.random_range(0..NOUNS.len())];
        let adj = ADJECTIVES[rng.random_range(0..ADJECTIVES.len())];
        let genre = GENRES[rng.random_range(0..GENRES.len())];
        items.push(Item {
            item_id: format!("i{i:04}"),
            title: format!("the {adj} {kw}"),
            description: format!("a {genre} {noun} about {}", pseudo_word(&mut rng, 2)),
        });
        keywords.push((kw, noun));
        quality.push(rng.random_range(2..=4i32));
    }

    let styles: Vec<UserStyle> = (0..cfg.users)
        .map(|u| match cfg.styles.get(u) {
            Some(s) => s.clone(),
            None => UserStyle {
                catchphrase: pool[rng.random_range(0..pool.len())].clone(),
                rating_bias: rng.random_range(-1..=1),
            },
        })
        .collect();

    let mut order: Vec<usize> = (0..cfg.items).collect();
    order.shuffle(&mut rng);
    let mut reviews = Vec::with_capacity(cfg.users * cfg.reviews_per_user);
    for (u, style) in styles.iter().enumerate() {
        for r in 0..cfg.reviews_per_user {
            let it = order[(u * cfg.reviews_per_user + r) % cfg.items];
            let noise = [-1, 0, 0, 1][rng.random_range(0..4usize)];
            let rating = (quality[it] + style.rating_bias + noise).clamp(1, 5);
            let sentiment = SENTIMENT[(rating - 1) as usize];
            let aspect = ASPECTS[rng.random_range(0..ASPECTS.len())];
            let (kw, noun) = &keywords[it];
            reviews.push(Review {
                user_id: format!("u{u:04}"),
                item_id: items[it].item_id.clone(),
                title: format!("{sentiment} {noun}"),
                text: format!("{}. {kw} is {sentiment}, {aspect} too.", style.catchphrase),
                rating: f64::from(rating),
                timestamp: BASE_TS + r as i64 * DAY_MS + u as i64 * 1000,
            });
        }
    }
    let corpus = Corpus::new(reviews, items)?;
    let (main, meta) = write_corpus(&corpus);
    Ok(SynthFiles { main, meta, styles })
}

pub fn write_synthetic(cfg: &GenConfig, main_path: &Path, meta_path: &Path) -> Result<SynthFiles> {
    let files = generate_synthetic(cfg)?;
    for (path, body) in [(main_path, &files.main), (meta_path, &files.meta)] {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, body).map_err(|e| Error::io(path, e))?;
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::parse_corpus;

    #[test]
    fn tiny_config_is_byte_identical_on_rerun() {
        let cfg = GenConfig {
            users: 2,
            items: 2,
            reviews_per_user: 1,
            seed: 7,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.main, b.main);
        assert_eq!(a.meta, b.meta);
    }

    #[test]
    fn catchphrase_in_every_review() {
        let cfg = GenConfig::default();
        let files = generate_synthetic(&cfg).unwrap();
        let (c, _) = parse_corpus(&files.main, &files.meta).unwrap();
        for r in c.reviews() {
            let u: usize = r.user_id[1..].parse().unwrap();
            assert!(r.text.contains(&files.styles[u].catchphrase));
        }
    }

    #[test]
    fn items_have_two_reviewers_when_dense_enough() {
        let files = generate_synthetic(&GenConfig::default()).unwrap();
        let (c, _) = parse_corpus(&files.main, &files.meta).unwrap();
        for it in c.items() {
            let idx = c.item_review_indices(&it.item_id);
            let users: std::collections::BTreeSet<_> =
                idx.iter().map(|&i| &c.review(i).user_id).collect();
            assert!(users.len() >= 2, "{} has {} reviewers", it.item_id, users.len());
        }
    }

    #[test]
    fn infeasible_density_rejected() {
        let cfg = GenConfig {
            users: 3,
            items: 2,
            reviews_per_user: 3,
            ..Default::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn style_letters_absent_from_item_vocabulary() {
        let files = generate_synthetic(&GenConfig::default()).unwrap();
        for line in files.meta.lines() {
            let it: Item = serde_json::from_str(line).unwrap();
            let text = format!("{} {}", it.title, it.description);
            assert!(!text.chars().any(|c| RARE.contains(&c)), "{text}");
        }
        for line in files.main.lines() {
            let r: Review = serde_json::from_str(line).unwrap();
            let rest = r.text.split_once(". ").unwrap().1;
            assert!(!rest.chars().any(|c| RARE.contains(&c)), "{rest}");
        }
    }
}
