//! Prompt template and plan assembly.
//!
//! Layout, in order: system block; guidance block (when requested and at
//! least one history is shown); input block; one history block per kept
//! history, most recent first; then `BOS`, and for training the target
//! review bytes and `EOS`. `{his}` expands to `HIS_START HIS_SLOT… HIS_END`
//! and `{diff}` to `DIFF_START DIFF_SLOT… DIFF_END`.

use std::ops::Range;
use std::path::Path;

use crate::corpus::{Item, Review};
use crate::error::{Error, Result};

use super::{BOS, DIFF_END, DIFF_SLOT, DIFF_START, EOS, HIS_END, HIS_SLOT, HIS_START};

const DEFAULT_TEMPLATE: &str = include_str!("../../templates/prompt.txt");

const INPUT_KEYS: [&str; 4] = ["item_title", "item_description", "title", "rating"];
const HISTORY_KEYS: [&str; 3] = ["text", "his", "diff"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SlotKind {
    His,
    Diff,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub position: usize,
    pub kind: SlotKind,
    /// Index into the kept histories.
    pub history: usize,
    /// Index among the slots of one embedding (multiplicity > 1).
    pub part: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptPlan {
    pub tokens: Vec<usize>,
    pub slots: Vec<Slot>,
    /// Supervised positions (target bytes and `EOS`); `None` for inference plans.
    pub target: Option<Range<usize>>,
    /// Histories that fit in the context.
    pub histories: usize,
}

impl PromptPlan {
    pub fn slot_count(&self, kind: SlotKind) -> usize {
        self.slots.iter().filter(|s| s.kind == kind).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptFlags {
    pub use_text: bool,
    pub use_his: bool,
    pub use_diff: bool,
    pub guidance: bool,
    pub slot_multiplicity: usize,
}

impl Default for PromptFlags {
    fn default() -> Self {
        Self {
            use_text: true,
            use_his: true,
            use_diff: true,
            guidance: true,
            slot_multiplicity: 1,
        }
    }
}

impl PromptFlags {
    pub fn non_perso() -> Self {
        Self {
            use_text: false,
            use_his: false,
            use_diff: false,
            ..Self::default()
        }
    }

    fn any_source(&self) -> bool {
        self.use_text || self.use_his || self.use_diff
    }
}

pub struct PromptInput<'a> {
    pub item: &'a Item,
    pub title: &'a str,
    pub rating: f64,
    pub histories: &'a [Review],
    /// Target review text for training plans.
    pub target: Option<&'a str>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Piece {
    Text(String),
    Key(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    system: Vec<Piece>,
    guidance: Vec<Piece>,
    input: Vec<Piece>,
    history: Vec<Piece>,
}

fn parse_pieces(section: &str, body: &str, allowed: &[&str]) -> Result<Vec<Piece>> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('{') {
        let close = rest[open..]
            .find('}')
            .ok_or_else(|| Error::Config(format!("template {section}: unclosed placeholder")))?;
        let key = &rest[open + 1..open + close];
        if !allowed.contains(&key) {
            return Err(Error::Config(format!("template {section}: unknown placeholder {{{key}}}")));
        }
        if open > 0 {
            out.push(Piece::Text(rest[..open].to_string()));
        }
        out.push(Piece::Key(key.to_string()));
        rest = &rest[open + close + 1..];
    }
    if !rest.is_empty() {
        out.push(Piece::Text(rest.to_string()));
    }
    Ok(out)
}

impl Default for Template {
    fn default() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled template parses")
    }
}

impl Template {
    pub fn parse(src: &str) -> Result<Self> {
        let mut sections: Vec<(String, Vec<&str>)> = Vec::new();
        for line in src.lines() {
            if let Some(name) = line.strip_prefix("## ") {
                sections.push((name.trim().to_string(), Vec::new()));
            } else if let Some((_, lines)) = sections.last_mut() {
                lines.push(line);
            } else if !line.starts_with('#') && !line.trim().is_empty() {
                return Err(Error::Config(format!("template: text outside a section: {line:?}")));
            }
        }
        let mut get = |name: &str, keys: &[&str]| -> Result<Vec<Piece>> {
            let idx = sections
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("template: missing section {name}")))?;
            let (_, lines) = sections.remove(idx);
            let mut body = lines.join("\n");
            body.push('\n');
            parse_pieces(name, &body, keys)
        };
        let t = Self {
            system: get("system", &[])?,
            guidance: get("guidance", &[])?,
            input: get("input", &INPUT_KEYS)?,
            history: get("history", &HISTORY_KEYS)?,
        };
        if let Some((name, _)) = sections.first() {
            return Err(Error::Config(format!("template: unknown section {name}")));
        }
        for key in HISTORY_KEYS {
            if !t.history.contains(&Piece::Key(key.into())) {
                return Err(Error::Config(format!("template history lacks {{{key}}}")));
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&src)
    }
}

fn render_rating(r: f64) -> String {
    if r.fract() == 0.0 {
        format!("{r:.0}")
    } else {
        format!("{r}")
    }
}

fn push_bytes(out: &mut Vec<usize>, s: &str) {
    out.extend(s.bytes().map(usize::from));
}

/// Tokens of one history block plus `(offset, kind, part)` for each slot.
fn history_block(
    t: &Template,
    review: &Review,
    flags: &PromptFlags,
) -> (Vec<usize>, Vec<(usize, SlotKind, usize)>) {
    let mut toks = Vec::new();
    let mut slots = Vec::new();
    for piece in &t.history {
        match piece {
            Piece::Text(s) => push_bytes(&mut toks, s),
            Piece::Key(k) => match k.as_str() {
                "text" if flags.use_text => push_bytes(&mut toks, &review.text),
                "his" if flags.use_his => {
                    toks.push(HIS_START);
                    for part in 0..flags.slot_multiplicity {
                        slots.push((toks.len(), SlotKind::His, part));
                        toks.push(HIS_SLOT);
                    }
                    toks.push(HIS_END);
                }
                "diff" if flags.use_diff => {
                    toks.push(DIFF_START);
                    for part in 0..flags.slot_multiplicity {
                        slots.push((toks.len(), SlotKind::Diff, part));
                        toks.push(DIFF_SLOT);
                    }
                    toks.push(DIFF_END);
                }
                _ => {}
            },
        }
    }
    (toks, slots)
}

fn render_plain(pieces: &[Piece], fill: impl Fn(&str) -> String) -> Vec<usize> {
    let mut out = Vec::new();
    for p in pieces {
        match p {
            Piece::Text(s) => push_bytes(&mut out, s),
            Piece::Key(k) => push_bytes(&mut out, &fill(k)),
        }
    }
    out
}

/// Builds the token plan, dropping whole trailing histories until it fits
/// `context`. Inference plans (no target) reserve `reserve` positions for
/// generation; training plans need room for the full target.
pub fn assemble_prompt(
    template: &Template,
    context: usize,
    reserve: usize,
    input: &PromptInput<'_>,
    flags: &PromptFlags,
) -> Result<PromptPlan> {
    if flags.slot_multiplicity == 0 {
        return Err(Error::Config("slot multiplicity must be positive".into()));
    }
    let target_tokens = match input.target {
        Some(t) if t.is_empty() => return Err(Error::Data("target review is empty".into())),
        Some(t) => {
            let mut v = vec![BOS];
            push_bytes(&mut v, t);
            v.push(EOS);
            v
        }
        None => vec![BOS],
    };
    let tail = if input.target.is_some() { 0 } else { reserve };
    let system = render_plain(&template.system, |_| String::new());
    let guidance = render_plain(&template.guidance, |_| String::new());
    let body = render_plain(&template.input, |k| match k {
        "item_title" => input.item.title.clone(),
        "item_description" => input.item.description.clone(),
        "title" => input.title.to_string(),
        _ => render_rating(input.rating),
    });
    let blocks: Vec<_> = if flags.any_source() {
        input.histories.iter().map(|h| history_block(template, h, flags)).collect()
    } else {
        Vec::new()
    };
    let fixed = system.len() + body.len() + target_tokens.len() + tail;
    let with_guidance = if flags.guidance { guidance.len() } else { 0 };
    let mut used = fixed + with_guidance;
    let mut kept = 0;
    for (toks, _) in &blocks {
        if used + toks.len() > context {
            break;
        }
        used += toks.len();
        kept += 1;
    }
    if kept == 0 && fixed > context {
        return Err(Error::Data(format!(
            "prompt needs {fixed} positions but the context is {context}"
        )));
    }

    let mut tokens = system;
    if flags.guidance && kept > 0 {
        tokens.extend_from_slice(&guidance);
    }
    tokens.extend_from_slice(&body);
    let mut slots = Vec::new();
    for (h, (toks, offs)) in blocks.into_iter().take(kept).enumerate() {
        for (off, kind, part) in offs {
            slots.push(Slot {
                position: tokens.len() + off,
                kind,
                history: h,
                part,
            });
        }
        tokens.extend(toks);
    }
    let start = tokens.len() + 1;
    tokens.extend_from_slice(&target_tokens);
    let target = input.target.map(|_| start..tokens.len());
    Ok(PromptPlan {
        tokens,
        slots,
        target,
        histories: kept,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::{item, review};

    fn input<'a>(it: &'a Item, hs: &'a [Review], target: Option<&'a str>) -> PromptInput<'a> {
        PromptInput {
            item: it,
            title: "good saga",
            rating: 4.0,
            histories: hs,
            target,
        }
    }

    #[test]
    fn default_template_parses() {
        let t = Template::default();
        assert!(!t.system.is_empty());
        assert!(Template::parse("## system\nx\n").is_err());
        let bad = DEFAULT_TEMPLATE.replace("{rating}", "{stars}");
        assert!(Template::parse(&bad).is_err());
    }

    #[test]
    fn non_perso_has_no_slots() {
        let it = item("i");
        let hs = vec![review("u", "a", 1, "past words")];
        let plan = assemble_prompt(
            &Template::default(),
            512,
            0,
            &input(&it, &hs, Some("new words")),
            &PromptFlags::non_perso(),
        )
        .unwrap();
        assert!(plan.slots.is_empty());
        assert_eq!(plan.histories, 0);
        let span = plan.target.clone().unwrap();
        assert_eq!(plan.tokens[span.start - 1], BOS);
        assert_eq!(*plan.tokens.last().unwrap(), EOS);
        assert_eq!(span.len(), "new words".len() + 1);
    }

    #[test]
    fn his_before_diff_per_history() {
        let it = item("i");
        let hs = vec![review("u", "a", 2, "one"), review("u", "b", 1, "two")];
        let plan = assemble_prompt(
            &Template::default(),
            512,
            0,
            &input(&it, &hs, Some("t")),
            &PromptFlags::default(),
        )
        .unwrap();
        assert_eq!(plan.slots.len(), 4);
        assert_eq!(plan.slot_count(SlotKind::His), 2);
        for pair in plan.slots.chunks(2) {
            assert_eq!(pair[0].kind, SlotKind::His);
            assert_eq!(pair[1].kind, SlotKind::Diff);
            assert!(pair[0].position < pair[1].position);
            assert_eq!(pair[0].history, pair[1].history);
        }
        for s in &plan.slots {
            let (open, slot, close) = match s.kind {
                SlotKind::His => (HIS_START, HIS_SLOT, HIS_END),
                SlotKind::Diff => (DIFF_START, DIFF_SLOT, DIFF_END),
            };
            assert_eq!(plan.tokens[s.position], slot);
            assert_eq!(plan.tokens[s.position - 1], open);
            assert_eq!(plan.tokens[s.position + 1], close);
        }
    }

    #[test]
    fn multiplicity_repeats_slots() {
        let it = item("i");
        let hs = vec![review("u", "a", 2, "one")];
        let flags = PromptFlags {
            use_diff: false,
            slot_multiplicity: 3,
            ..Default::default()
        };
        let plan = assemble_prompt(&Template::default(), 512, 0, &input(&it, &hs, Some("t")), &flags).unwrap();
        assert_eq!(plan.slots.len(), 3);
        assert_eq!(plan.slot_count(SlotKind::Diff), 0);
        let parts: Vec<_> = plan.slots.iter().map(|s| s.part).collect();
        assert_eq!(parts, vec![0, 1, 2]);
    }

    #[test]
    fn oversized_history_drops_exactly_one() {
        let it = item("i");
        let hs: Vec<Review> = (0..4).map(|k| review("u", &format!("h{k}"), 10 - k, "some history text")).collect();
        let t = Template::default();
        let flags = PromptFlags::default();
        let full = assemble_prompt(&t, 4096, 0, &input(&it, &hs, Some("target")), &flags).unwrap();
        assert_eq!(full.histories, 4);
        let ctx = full.tokens.len() - 10;
        let cut = assemble_prompt(&t, ctx, 0, &input(&it, &hs, Some("target")), &flags).unwrap();
        assert_eq!(cut.histories, 3);
        assert_eq!(cut.slots.len(), full.slots.len() - 2);
        assert!(cut.tokens.len() <= ctx);
    }

    #[test]
    fn empty_target_and_tiny_context_rejected() {
        let it = item("i");
        let t = Template::default();
        let flags = PromptFlags::default();
        assert!(assemble_prompt(&t, 512, 0, &input(&it, &[], Some("")), &flags).is_err());
        assert!(assemble_prompt(&t, 8, 0, &input(&it, &[], Some("x")), &flags).is_err());
    }

    #[test]
    fn guidance_only_with_histories() {
        let it = item("i");
        let t = Template::default();
        let flags = PromptFlags::default();
        let none = assemble_prompt(&t, 512, 0, &input(&it, &[], None), &flags).unwrap();
        let np = assemble_prompt(&t, 512, 0, &input(&it, &[], None), &PromptFlags::non_perso()).unwrap();
        assert_eq!(none, np);
        let hs = vec![review("u", "a", 2, "one")];
        let with = assemble_prompt(&t, 512, 0, &input(&it, &hs, None), &flags).unwrap();
        assert!(with.tokens.len() > none.tokens.len() + "one".len());
    }
}
