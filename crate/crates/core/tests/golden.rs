//! Pinned outputs. A change here means every cached artifact is invalid.

use dep_core::corpus::{generate_synthetic, parse_corpus, GenConfig};
use dep_core::embedder::{embed_text, EmbedderSpec};
use dep_core::toylm::{LmConfig, LmState};

#[test]
fn pinned_hashes() {
    let f = generate_synthetic(&GenConfig::default()).unwrap();
    let (c, report) = parse_corpus(&f.main, &f.meta).unwrap();
    assert!(report.rejected.is_empty());
    let spec = EmbedderSpec::default();
    let lm = LmState::init(&LmConfig::default()).unwrap();
    let v = embed_text(&spec, "Quietly brilliant. It works.");
    let got = [
        c.content_hash(),
        spec.param_hash(),
        lm.param_hash(),
        format!("{:.12}", v.iter().take(8).sum::<f64>()),
    ];
    let want = [
        "9c5cb115238cce6f702c447feabdd120a08fb8f8f4709ef268ce1f6d63908dfe",
        "cd4d0f8d6cf50ede99c251a60c75c0157a8dd483aa595982dde23f3b65ea84df",
        "cea1c87b930d8c8cab8709e0659847f94cab3c6648cc33b6a41cbe49f8f8c744",
        "0.027482485496",
    ];
    assert_eq!(got, want);
}
