use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use super::config::{Resolved, RunConfig};
use super::Command;
use crate::corpus::{ingest, split, write_corpus, write_synthetic, Corpus, Splits};
use crate::diffrep::{DiffCache, DiffCacheKey};
use crate::error::{Error, Result};
use crate::metrics::{meteor_lite, render_table, rouge1, uniqueness_split, MetricReport};
use crate::toylm::{pretrain_frozen, pretraining_plans, LmState, Template};
use crate::trainer::{
    ablation_grid, group_reports, predict, read_predictions, score, sweep_k, mode_rows, refinement_rows, train,
    write_predictions, Checkpoint, Context, Dataset, Prediction,
};

pub(super) struct Run {
    pub cfg: RunConfig,
    pub paths: Resolved,
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} not found at {}", path.display())))
    }
}

fn rows_json(rows: &[(String, MetricReport)]) -> Value {
    Value::Array(rows.iter().map(|(l, m)| json!({"label": l, "metrics": m})).collect())
}

impl Run {
    pub fn new(cfg: RunConfig, out: &Path) -> Self {
        let paths = Resolved::new(&cfg.paths, out);
        Self { cfg, paths }
    }

    fn corpus(&self) -> Result<Corpus> {
        require(&self.paths.main, "corpus main file")?;
        require(&self.paths.meta, "corpus meta file")?;
        Ok(ingest(&self.paths.main, &self.paths.meta)?.0)
    }

    fn template(&self) -> Result<Template> {
        match &self.paths.template {
            Some(p) => Template::load(p),
            None => Ok(Template::default()),
        }
    }

    fn lm(&self) -> Result<LmState> {
        require(&self.paths.lm, "frozen LM (run pretrain-lm)")?;
        let lm = LmState::load(&self.paths.lm)?;
        if lm.config != self.cfg.lm {
            return Err(Error::Config("the saved LM was built with a different LM config".into()));
        }
        Ok(lm)
    }

    fn splits(&self, corpus: &Corpus) -> Splits {
        split(corpus, &self.cfg.split)
    }

    fn cache_key(&self, corpus: &Corpus) -> DiffCacheKey {
        DiffCacheKey {
            corpus_hash: corpus.content_hash(),
            spec: self.cfg.embedder.clone(),
            retrieval: self.cfg.train.retrieval.clone(),
        }
    }

    /// Uses the representation cache when its key matches, else builds.
    fn dataset(&self, corpus: &Corpus, splits: &Splits) -> Result<Dataset> {
        if self.paths.cache.exists() {
            let cache = DiffCache::read(&self.paths.cache)?;
            if cache.key == self.cache_key(corpus) {
                return Dataset::from_cache(corpus, &cache, splits);
            }
        }
        Dataset::build(corpus, &self.cfg.embedder, splits, &self.cfg.train.retrieval)
    }

    fn report(&self, name: &str, corpus: &Corpus, checkpoint: Option<&Checkpoint>, body: Value) -> Result<Value> {
        let mut v = json!({
            "command": name,
            "config_hash": self.cfg.hash(),
            "corpus_hash": corpus.content_hash(),
            "checkpoint_hash": checkpoint.map(Checkpoint::content_hash),
            "config": self.cfg,
        });
        if let (Value::Object(m), Value::Object(b)) = (&mut v, body) {
            m.extend(b);
        }
        write_file(&self.report_path(name, "json"), &format!("{v}\n"))?;
        if let Some(rows) = v.get("rows").and_then(Value::as_array) {
            write_file(&self.report_path(name, "txt"), &table_from_rows(rows)?)?;
        }
        Ok(json!({"command": name, "report": self.report_path(name, "json"), "config_hash": v["config_hash"]}))
    }

    fn report_path(&self, name: &str, ext: &str) -> PathBuf {
        self.paths.reports.join(format!("{name}.{ext}"))
    }

    /// The saved checkpoint when it was trained under the current config
    /// against this LM; otherwise a fresh training run.
    fn checkpoint_or_train(&self, ctx: &Context<'_>, data: &Dataset) -> Result<Checkpoint> {
        if self.paths.checkpoint.exists() {
            let c = Checkpoint::load(&self.paths.checkpoint)?;
            if c.config == self.cfg.train && c.lm_hash == ctx.lm.param_hash() && c.corpus_hash == ctx.corpus.content_hash() {
                return Ok(c);
            }
        }
        Ok(train(ctx, data, &self.cfg.train)?.0)
    }
}

fn table_from_rows(rows: &[Value]) -> Result<String> {
    let parsed: Vec<(String, MetricReport)> = rows
        .iter()
        .map(|r| {
            let label = r["label"].as_str().unwrap_or_default().to_string();
            let m = serde_json::from_value(r["metrics"].clone()).map_err(|e| Error::Format(format!("report row: {e}")))?;
            Ok((label, m))
        })
        .collect::<Result<_>>()?;
    Ok(render_table(&parsed))
}

pub(super) fn dispatch(run: &Run, cmd: &Command) -> Result<Value> {
    match cmd {
        Command::Synth => synth(run),
        Command::Ingest { main, meta } => ingest_cmd(run, main, meta),
        Command::Embed => embed(run),
        Command::PretrainLm => pretrain(run),
        Command::Train => train_cmd(run),
        Command::Generate => generate_cmd(run),
        Command::Evaluate { predictions } => evaluate_cmd(run, predictions.as_deref()),
        Command::Ablate => ablate(run),
        Command::SweepK => sweep(run),
        Command::Uniqueness => uniqueness(run),
        Command::Report => report_cmd(run),
    }
}

fn synth(run: &Run) -> Result<Value> {
    let f = write_synthetic(&run.cfg.synth, &run.paths.main, &run.paths.meta)?;
    Ok(json!({
        "command": "synth",
        "main": run.paths.main,
        "meta": run.paths.meta,
        "reviews": f.main.lines().count(),
        "items": f.meta.lines().count(),
    }))
}

fn ingest_cmd(run: &Run, main: &Path, meta: &Path) -> Result<Value> {
    let (corpus, report) = ingest(main, meta)?;
    let (m, t) = write_corpus(&corpus);
    write_file(&run.paths.main, &m)?;
    write_file(&run.paths.meta, &t)?;
    let body = json!({"reviews": corpus.reviews().len(), "items": corpus.items().len(), "ingest": report});
    run.report("ingest", &corpus, None, body)
}

fn embed(run: &Run) -> Result<Value> {
    let corpus = run.corpus()?;
    let splits = run.splits(&corpus);
    let data = Dataset::build(&corpus, &run.cfg.embedder, &splits, &run.cfg.train.retrieval)?;
    let cache = DiffCache {
        key: run.cache_key(&corpus),
        instances: data.all().map(|i| (i.review, i.reps.clone())).collect(),
    };
    cache.write(&run.paths.cache)?;
    Ok(json!({"command": "embed", "cache": run.paths.cache, "instances": cache.instances.len()}))
}

fn pretrain(run: &Run) -> Result<Value> {
    let corpus = run.corpus()?;
    let template = run.template()?;
    let splits = run.splits(&corpus);
    let exclude: BTreeSet<usize> = if run.cfg.pretrain_excludes_eval {
        splits.validation.iter().chain(&splits.test).copied().collect()
    } else {
        BTreeSet::new()
    };
    let p = &run.cfg.pretrain;
    let docs = pretraining_plans(&corpus, &template, run.cfg.lm.context, &exclude, None, p.max_histories, p.seed)?;
    let held = if run.cfg.pretrain_excludes_eval {
        let val: BTreeSet<usize> = splits.validation.iter().copied().collect();
        pretraining_plans(&corpus, &template, run.cfg.lm.context, &exclude, Some(&val), p.max_histories, p.seed)?
    } else {
        Vec::new()
    };
    let (lm, report) = pretrain_frozen(&run.cfg.lm, &docs, &held, p)?;
    lm.save(&run.paths.lm)?;
    let body = json!({
        "lm_hash": lm.param_hash(),
        "documents": docs.len(),
        "held_out_before": report.held_out_before,
        "held_out_after": report.held_out_after,
        "first_loss": report.step_losses.first(),
        "last_loss": report.step_losses.last(),
    });
    run.report("pretrain_lm", &corpus, None, body)
}

fn train_cmd(run: &Run) -> Result<Value> {
    let corpus = run.corpus()?;
    let (lm, template) = (run.lm()?, run.template()?);
    let data = run.dataset(&corpus, &run.splits(&corpus))?;
    let ctx = Context { corpus: &corpus, lm: &lm, spec: &run.cfg.embedder, template: &template };
    let (ck, rep) = train(&ctx, &data, &run.cfg.train)?;
    ck.save(&run.paths.checkpoint)?;
    let mut log = String::new();
    for s in &rep.steps {
        log.push_str(&serde_json::to_string(s).expect("step serializes"));
        log.push('\n');
    }
    write_file(&run.paths.reports.join("train_log.jsonl"), &log)?;
    let body = json!({
        "best_epoch": rep.best_epoch,
        "initial": rep.initial,
        "last": rep.last,
        "epochs": rep.epochs,
        "lm_hash": rep.lm_hash_after,
        "embedder_hash": rep.embedder_hash_after,
    });
    run.report("train", &corpus, Some(&ck), body)
}

fn generate_cmd(run: &Run) -> Result<Value> {
    let corpus = run.corpus()?;
    let (lm, template) = (run.lm()?, run.template()?);
    let data = run.dataset(&corpus, &run.splits(&corpus))?;
    let ctx = Context { corpus: &corpus, lm: &lm, spec: &run.cfg.embedder, template: &template };
    let cfg = &run.cfg.train;
    let ck = if cfg.mode.uses_embeddings() {
        require(&run.paths.checkpoint, "checkpoint (run train)")?;
        let c = Checkpoint::load(&run.paths.checkpoint)?;
        if c.config != *cfg {
            return Err(Error::Config("checkpoint was trained under a different train config".into()));
        }
        if c.lm_hash != lm.param_hash() {
            return Err(Error::Data("checkpoint was trained against a different LM".into()));
        }
        Some(c)
    } else {
        None
    };
    let preds = predict(&ctx, ck.as_ref().map(|c| &c.params), &data.test, cfg, &cfg.test_sampling)?;
    write_predictions(&run.paths.predictions, &preds)?;
    Ok(json!({"command": "generate", "predictions": run.paths.predictions, "count": preds.len()}))
}

fn evaluate_cmd(run: &Run, path: Option<&Path>) -> Result<Value> {
    let path = path.unwrap_or(&run.paths.predictions);
    require(path, "predictions file")?;
    let preds = read_predictions(path)?;
    let corpus = run.corpus()?;
    let m = score(&preds)?;
    let mut lines = String::new();
    for p in &preds {
        let r = rouge1(&p.prediction, &p.reference);
        let rec = json!({"review": p.review, "user_id": p.user_id, "item_id": p.item_id, "rouge1": r, "meteor": meteor_lite(&p.prediction, &p.reference)});
        lines.push_str(&format!("{rec}\n"));
    }
    write_file(&run.report_path("evaluate", "jsonl"), &lines)?;
    let ck = if run.paths.checkpoint.exists() && run.cfg.train.mode.uses_embeddings() {
        Some(Checkpoint::load(&run.paths.checkpoint)?)
    } else {
        None
    };
    let label = format!("{}/{}", run.cfg.train.mode, run.cfg.train.refinement);
    let body = json!({"rows": rows_json(&[(label, m)]), "predictions_sha256": crate::hash::sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?)});
    run.report("evaluate", &corpus, ck.as_ref(), body)
}

fn ablate(run: &Run) -> Result<Value> {
    let corpus = run.corpus()?;
    let (lm, template) = (run.lm()?, run.template()?);
    let data = run.dataset(&corpus, &run.splits(&corpus))?;
    let ctx = Context { corpus: &corpus, lm: &lm, spec: &run.cfg.embedder, template: &template };
    let rows: Vec<_> = mode_rows().into_iter().chain(refinement_rows()).collect();
    let runs = ablation_grid(&ctx, &data, &run.cfg.train, &rows)?;
    let table: Vec<(String, MetricReport)> = runs.iter().map(|r| (r.label(), r.report.clone())).collect();
    let hashes: Vec<Value> = runs
        .iter()
        .map(|r| json!({"label": r.label(), "checkpoint_hash": r.checkpoint.as_ref().map(Checkpoint::content_hash)}))
        .collect();
    run.report("ablate", &corpus, None, json!({"rows": rows_json(&table), "checkpoints": hashes}))
}

fn sweep(run: &Run) -> Result<Value> {
    let corpus = run.corpus()?;
    let (lm, template) = (run.lm()?, run.template()?);
    let data = run.dataset(&corpus, &run.splits(&corpus))?;
    let ctx = Context { corpus: &corpus, lm: &lm, spec: &run.cfg.embedder, template: &template };
    let cfg = &run.cfg.train;
    let ck = if cfg.mode.uses_embeddings() { Some(run.checkpoint_or_train(&ctx, &data)?) } else { None };
    let ks: Vec<usize> = (0..=cfg.retrieval.k).collect();
    let points = sweep_k(&ctx, &data, cfg, ck.as_ref().map(|c| &c.params), &ks)?;
    let table: Vec<(String, MetricReport)> = points.iter().map(|(p, _)| (format!("K={}", p.k), p.report.clone())).collect();
    run.report("sweep_k", &corpus, ck.as_ref(), json!({"rows": rows_json(&table)}))
}

fn uniqueness(run: &Run) -> Result<Value> {
    let corpus = run.corpus()?;
    let (lm, template) = (run.lm()?, run.template()?);
    let data = run.dataset(&corpus, &run.splits(&corpus))?;
    let ctx = Context { corpus: &corpus, lm: &lm, spec: &run.cfg.embedder, template: &template };
    let cfg = &run.cfg.train;
    let groups = uniqueness_split(&corpus, &run.cfg.embedder)?;
    let ck = if cfg.mode.uses_embeddings() { Some(run.checkpoint_or_train(&ctx, &data)?) } else { None };
    let preds: Vec<Prediction> = predict(&ctx, ck.as_ref().map(|c| &c.params), &data.test, cfg, &cfg.test_sampling)?;
    let (u, n) = group_reports(&preds, &groups)?;
    let mut rows = Vec::new();
    rows.extend(u.map(|m| ("unique".to_string(), m)));
    rows.extend(n.map(|m| ("non_unique".to_string(), m)));
    let body = json!({"rows": rows_json(&rows), "unique_users": groups.unique, "non_unique_users": groups.non_unique});
    run.report("uniqueness", &corpus, ck.as_ref(), body)
}

fn report_cmd(run: &Run) -> Result<Value> {
    let dir = &run.paths.reports;
    require(dir, "reports directory")?;
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    names.sort();
    let mut out = String::new();
    for p in &names {
        let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        if let Some(rows) = v.get("rows").and_then(Value::as_array) {
            out.push_str(&format!("# {}\n", v["command"].as_str().unwrap_or("?")));
            out.push_str(&table_from_rows(rows)?);
            out.push('\n');
        }
    }
    let path = dir.join("summary.txt");
    write_file(&path, &out)?;
    Ok(json!({"command": "report", "summary": path, "reports": names.len()}))
}
