use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{predict, train, Checkpoint, Context, Dataset, DepParams, Mode, Prediction, Refinement, TrainConfig, TrainReport};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport, UniquenessSplit};

pub fn score(preds: &[Prediction]) -> Result<MetricReport> {
    let c: Vec<String> = preds.iter().map(|p| p.prediction.clone()).collect();
    let r: Vec<String> = preds.iter().map(|p| p.reference.clone()).collect();
    evaluate(&c, &r)
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ModeRun {
    pub mode: Mode,
    pub refinement: Refinement,
    pub report: MetricReport,
    pub predictions: Vec<Prediction>,
    pub checkpoint: Option<Checkpoint>,
    pub train: Option<TrainReport>,
}

impl ModeRun {
    pub fn label(&self) -> String {
        format!("{}/{}", self.mode, self.refinement)
    }
}

/// Trains when the mode has an embedding path, then predicts the test split.
pub fn run_mode(ctx: &Context<'_>, data: &Dataset, cfg: &TrainConfig) -> Result<ModeRun> {
    cfg.validate()?;
    let (checkpoint, report) = if cfg.mode.uses_embeddings() {
        let (c, r) = train(ctx, data, cfg)?;
        (Some(c), Some(r))
    } else {
        (None, None)
    };
    let predictions = predict(ctx, checkpoint.as_ref().map(|c| &c.params), &data.test, cfg, &cfg.test_sampling)?;
    Ok(ModeRun {
        mode: cfg.mode,
        refinement: cfg.refinement,
        report: score(&predictions)?,
        predictions,
        checkpoint,
        train: report,
    })
}

/// Every mode with full refinement (baselines without embeddings use none).
pub fn mode_rows() -> Vec<(Mode, Refinement)> {
    Mode::ALL
        .into_iter()
        .map(|m| (m, if m.uses_embeddings() { Refinement::Sae } else { Refinement::None }))
        .collect()
}

/// Refinement variants with and without history text.
pub fn refinement_rows() -> Vec<(Mode, Refinement)> {
    [Mode::HisDiff, Mode::HisDiffNoText]
        .into_iter()
        .flat_map(|m| Refinement::ALL.into_iter().map(move |r| (m, r)))
        .collect()
}

/// Runs each distinct `(mode, refinement)` row once, in the given order.
pub fn ablation_grid(
    ctx: &Context<'_>,
    data: &Dataset,
    cfg: &TrainConfig,
    rows: &[(Mode, Refinement)],
) -> Result<Vec<ModeRun>> {
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for &(m, r) in rows {
        let c = cfg.for_mode(m, r);
        if seen.contains(&(c.mode, c.refinement)) {
            continue;
        }
        seen.push((c.mode, c.refinement));
        out.push(run_mode(ctx, data, &c)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub report: MetricReport,
}

/// Test metrics with histories truncated to each `k`. One set of trained
/// parameters serves every `k`; `k = 0` keeps no history and therefore
/// produces the non-personalized prompt.
pub fn sweep_k(
    ctx: &Context<'_>,
    data: &Dataset,
    cfg: &TrainConfig,
    params: Option<&DepParams>,
    ks: &[usize],
) -> Result<Vec<(SweepPoint, Vec<Prediction>)>> {
    ks.iter()
        .map(|&k| {
            let test: Vec<_> = data.test.iter().map(|i| i.truncated(k)).collect();
            let preds = predict(ctx, params, &test, cfg, &cfg.test_sampling)?;
            Ok((SweepPoint { k, report: score(&preds)? }, preds))
        })
        .collect()
}

/// Metrics of the unique and non-unique user groups; `None` for a group
/// without predictions.
pub fn group_reports(
    preds: &[Prediction],
    split: &UniquenessSplit,
) -> Result<(Option<MetricReport>, Option<MetricReport>)> {
    let pick = |users: &[String]| -> Result<Option<MetricReport>> {
        let g: Vec<Prediction> = preds.iter().filter(|p| users.contains(&p.user_id)).cloned().collect();
        if g.is_empty() {
            Ok(None)
        } else {
            score(&g).map(Some)
        }
    };
    Ok((pick(&split.unique)?, pick(&split.non_unique)?))
}

#[cfg(test)]
mod tests {
    use super::super::tests::{fixture, small_cfg};
    use super::*;

    #[test]
    fn k_zero_equals_non_perso() {
        let cfg = small_cfg();
        let fx = fixture(&cfg);
        let ctx = fx.ctx();
        let base = run_mode(&ctx, &fx.data, &cfg.for_mode(Mode::NonPerso, Refinement::None)).unwrap();
        let sweep = sweep_k(&ctx, &fx.data, &cfg, None, &[0]).unwrap();
        assert_eq!(sweep[0].1, base.predictions);
        assert_eq!(sweep[0].0.report, base.report);
    }

    #[test]
    fn grid_rows_and_prediction_files() {
        assert_eq!(mode_rows().len(), 6);
        let rr = refinement_rows();
        assert_eq!(rr.len(), 6);
        assert!(rr.contains(&(Mode::HisDiffNoText, Refinement::Ae)));
        let cfg = TrainConfig { epochs: 1, ..small_cfg() };
        let fx = fixture(&cfg);
        let runs = ablation_grid(
            &fx.ctx(),
            &fx.data,
            &cfg,
            &[(Mode::NonPerso, Refinement::Sae), (Mode::NonPerso, Refinement::None), (Mode::HisOnly, Refinement::None)],
        )
        .unwrap();
        assert_eq!(runs.len(), 2);
        assert!(runs[0].checkpoint.is_none());
        assert!(runs[1].checkpoint.as_ref().unwrap().params.sae.is_none());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        write_predictions(&path, &runs[1].predictions).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), runs[1].predictions);
    }
}
