//! One function per subcommand. Each writes into its own run directory and
//! returns the directory path.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use peifg_core::datagen::{annotate_distractors, annotate_feedback, export_dataset, run_batch, write_split, Annotated};
use peifg_core::eval::{evaluate_records, extract_level, EvalRecord, IdentityEmbedder};
use peifg_core::generator::GenerationMode;
use peifg_core::llm::{CannedClient, CannedEntry, HttpLlmClient, LlmClient};
use peifg_core::model::PeifgModel;
use peifg_core::refine::{refine, RuleBasedJudge};
use peifg_core::sample::{read_jsonl, synthetic_samples, write_jsonl, Sample};
use peifg_core::train::{evaluate_loss, train, train_stage1, Stage1Model, StepLog};
use peifg_service::{ReviewQueue, SystemClock};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{param_path, parse_value, set_path, DataConfig, LlmConfig, RunConfig, API_KEY_ENV};
use crate::error::{CliError, CliResult};
use crate::run::{output_root, RunDir};

fn samples(path: Option<&Path>, n: usize, seed: u64) -> CliResult<Vec<Sample>> {
    Ok(match path {
        Some(p) => read_jsonl(p)?,
        None => synthetic_samples(n, seed),
    })
}

pub fn train_samples(data: &DataConfig) -> CliResult<Vec<Sample>> {
    samples(data.train.as_deref(), data.synthetic_train, data.synthetic_seed)
}

/// Synthetic test samples use the next seed so ids never collide with
/// training ones.
pub fn test_samples(data: &DataConfig) -> CliResult<Vec<Sample>> {
    samples(data.test.as_deref(), data.synthetic_test, data.synthetic_seed.wrapping_add(1))
}

fn llm_client(cfg: &LlmConfig, allow_rule: bool, field: &str) -> CliResult<Box<dyn LlmClient>> {
    Ok(match cfg {
        LlmConfig::Rule if allow_rule => Box::new(RuleBasedJudge),
        LlmConfig::Rule => return Err(CliError::config(field, "the rule-based judge cannot generate data")),
        LlmConfig::Canned { path } => {
            let entries: Vec<CannedEntry> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
            Box::new(CannedClient { entries })
        }
        LlmConfig::Http(http) => {
            let mut http = http.clone();
            if http.api_key.is_none() {
                http.api_key = std::env::var(API_KEY_ENV).ok();
            }
            Box::new(HttpLlmClient::new(http)?)
        }
    })
}

fn build_model(cfg: &RunConfig, require_checkpoint: bool) -> CliResult<PeifgModel> {
    let model = PeifgModel::new(&cfg.model)?;
    if let Some(region) = &cfg.region_checkpoint {
        model.load_weights(region)?;
    }
    match &cfg.checkpoint {
        Some(ckpt) => model.load_weights(ckpt)?,
        None if require_checkpoint => return Err(CliError::config("checkpoint", "this command needs a trained model")),
        None => tracing::warn!("no checkpoint configured; using freshly initialized weights"),
    }
    Ok(model)
}

pub fn stage1_train(cfg: &RunConfig, dir: Option<&Path>) -> CliResult<PathBuf> {
    let mut run = RunDir::create(cfg, "stage1-train", dir)?;
    let model = Stage1Model::new(&cfg.model.vfe, cfg.model.seed)?;
    let data = train_samples(&cfg.data)?;
    let mut logs = Vec::new();
    train_stage1(&model, &data, &cfg.stage1, |l| logs.push(l.clone()))?;
    for l in &logs {
        run.log(l)?;
    }
    model.save_region(&run.checkpoint("region.safetensors"))?;
    run.write_output("metrics.json", &TrainSummary::new(&logs, None))?;
    run.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first: Option<StepLog>,
    pub last: Option<StepLog>,
    /// Mean losses on the test samples after training.
    pub eval: Option<StepLog>,
}

impl TrainSummary {
    fn new(logs: &[StepLog], eval: Option<StepLog>) -> Self {
        Self { steps: logs.len(), first: logs.first().cloned(), last: logs.last().cloned(), eval }
    }
}

pub fn train_cmd(cfg: &RunConfig, dir: Option<&Path>) -> CliResult<PathBuf> {
    let mut run = RunDir::create(cfg, "train", dir)?;
    let model = build_model(cfg, false)?;
    let data = train_samples(&cfg.data)?;
    let mut logs = Vec::new();
    train(&model, &data, &cfg.train, |l| {
        tracing::info!(step = l.step, total = l.total, l_lan = l.l_lan, "step");
        logs.push(l.clone());
    })?;
    for l in &logs {
        run.log(l)?;
    }
    let test = test_samples(&cfg.data)?;
    let eval = if test.is_empty() {
        None
    } else {
        let prepared = test.iter().map(|s| model.prepare(s)).collect::<peifg_core::Result<Vec<_>>>()?;
        Some(evaluate_loss(&model, &prepared, cfg.train.mode, &cfg.train.weights)?)
    };
    model.save(&run.checkpoint("model.safetensors"))?;
    run.write_output("metrics.json", &TrainSummary::new(&logs, eval))?;
    run.finish()
}

pub fn refine_cmd(cfg: &RunConfig, dir: Option<&Path>) -> CliResult<PathBuf> {
    let model = build_model(cfg, true)?;
    let judge = llm_client(&cfg.judge, true, "judge")?;
    let mut run = RunDir::create(cfg, "refine", dir)?;
    let data = train_samples(&cfg.data)?;
    let mut steps = Vec::new();
    let report = refine(&model, &data, judge.as_ref(), &cfg.refine, |s| steps.push(s.clone()))?;
    for s in &steps {
        run.log(s)?;
    }
    write_jsonl(&run.output("transcripts.jsonl"), &report.transcripts)?;
    write_jsonl(&run.output("pairs.jsonl"), &report.pairs)?;
    model.save(&run.checkpoint("model.safetensors"))?;
    run.write_output(
        "metrics.json",
        &serde_json::json!({
            "pairs": report.pairs.len(),
            "steps": report.steps.len(),
            "first": report.steps.first(),
            "last": report.steps.last(),
        }),
    )?;
    run.finish()
}

pub fn generate_cmd(cfg: &RunConfig, mode: GenerationMode, dir: Option<&Path>) -> CliResult<PathBuf> {
    if mode == GenerationMode::Distractor && cfg.model.top_k != 3 {
        return Err(CliError::config(
            "model.top_k",
            format!("distractor generation pairs one expert with each of 3 outputs, got K = {}", cfg.model.top_k),
        ));
    }
    let model = build_model(cfg, false)?;
    let mut run = RunDir::create(cfg, &format!("generate-{}", mode_name(mode)), dir)?;
    let mut records = Vec::new();
    for sample in test_samples(&cfg.data)? {
        let prep = model.prepare(&sample)?;
        let gold = sample.level.map(|l| l.to_string());
        match mode {
            GenerationMode::Feedback => {
                for item in 0..sample.distractors.len().min(sample.feedbacks.len()) {
                    let (g, plan) = model.generate_feedback(&prep, item, &cfg.decode)?;
                    run.log(&serde_json::json!({"id": sample.id, "item": item, "experts": plan.expert_indices(), "truncated": g.truncated}))?;
                    records.push(EvalRecord {
                        id: format!("{}#{item}", sample.id),
                        predicted_level: extract_level(&g.text).map(|l| l.to_string()),
                        hypothesis: g.text,
                        reference: sample.feedback_text(item)?,
                        gold_level: gold.clone(),
                    });
                }
            }
            GenerationMode::Distractor => {
                for (item, (g, plan)) in model.generate_distractors(&prep, &cfg.decode)?.into_iter().enumerate() {
                    run.log(&serde_json::json!({"id": sample.id, "item": item, "experts": plan.expert_indices(), "truncated": g.truncated}))?;
                    records.push(EvalRecord {
                        id: format!("{}#{item}", sample.id),
                        hypothesis: g.text,
                        reference: sample.distractors.get(item).cloned().unwrap_or_default(),
                        predicted_level: None,
                        gold_level: None,
                    });
                }
            }
        }
    }
    write_jsonl(&run.output("generations.jsonl"), &records)?;
    run.finish()
}

fn mode_name(mode: GenerationMode) -> &'static str {
    match mode {
        GenerationMode::Feedback => "feedback",
        GenerationMode::Distractor => "distractor",
    }
}

pub fn evaluate_cmd(cfg: &RunConfig, input: &Path, dir: Option<&Path>) -> CliResult<PathBuf> {
    let records: Vec<EvalRecord> = read_jsonl(input)?;
    let run = RunDir::create(cfg, "evaluate", dir)?;
    let report = evaluate_records(&records, &IdentityEmbedder)?;
    run.write_output("metrics.json", &report)?;
    run.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum DatagenStage {
    /// Level classification plus five distractor candidates.
    Distractors,
    /// Feedback for the distractors already on each sample.
    Feedback,
    /// Seeded train/test split of a filtered manifest.
    Export,
}

pub fn datagen_cmd(cfg: &RunConfig, stage: DatagenStage, dir: Option<&Path>) -> CliResult<PathBuf> {
    let manifest = cfg.datagen.manifest.as_deref().ok_or_else(|| CliError::config("datagen.manifest", "required"))?;
    let input: Vec<Sample> = read_jsonl(manifest)?;
    if stage == DatagenStage::Export {
        let run = RunDir::create(cfg, "datagen-export", dir)?;
        let split = export_dataset(&input, cfg.datagen.split_ratio, cfg.datagen.split_seed)?;
        write_split(&split, &run.root.join("outputs"))?;
        run.write_output("split.json", &serde_json::json!({"train": split.train.len(), "test": split.test.len(), "seed": split.seed, "ratio": split.ratio}))?;
        return run.finish();
    }
    let client = llm_client(&cfg.datagen.llm, false, "datagen.llm")?;
    let mut run = RunDir::create(cfg, &format!("datagen-{stage:?}").to_lowercase(), dir)?;
    let results = run_batch(&input, cfg.datagen.concurrency, |s| match stage {
        DatagenStage::Distractors => annotate_distractors(s, client.as_ref()),
        _ => annotate_feedback(s, client.as_ref()),
    });
    let mut done: Vec<Sample> = Vec::new();
    let mut transcripts = Vec::new();
    for (sample, r) in input.iter().zip(results) {
        match r {
            Ok(Annotated { sample, objects_omitted, transcripts: t }) => {
                run.log(&serde_json::json!({"id": sample.id, "ok": true, "objects_omitted": objects_omitted}))?;
                transcripts.extend(t);
                done.push(sample);
            }
            Err(e) => {
                tracing::warn!(id = %sample.id, error = %e, "datagen failed");
                run.log(&serde_json::json!({"id": sample.id, "ok": false, "error": e.to_string()}))?;
            }
        }
    }
    write_jsonl(&run.output("samples.jsonl"), &done)?;
    write_jsonl(&run.output("transcripts.jsonl"), &transcripts)?;
    run.finish()
}

pub fn serve_review(cfg: &RunConfig, load: Option<&Path>) -> CliResult<()> {
    let queue = Arc::new(ReviewQueue::open(&cfg.review.journal, Arc::new(SystemClock), cfg.review.lease_ms)?);
    if let Some(p) = load {
        let added = queue.add(read_jsonl(p)?)?;
        tracing::info!(added, "queued samples");
    }
    let addr = cfg.review.addr.parse().map_err(|e| CliError::config("review.addr", e))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(peifg_service::serve(addr, queue))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub param: String,
    pub value: Value,
    pub dir: PathBuf,
    pub last_total: Option<f64>,
    pub eval_total: Option<f64>,
}

/// Trains once per value of one parameter, each in `sweep-{param}/{param}={value}`.
pub fn sweep_cmd(cfg: &RunConfig, param: &str, values: &[String], parallel: bool) -> CliResult<PathBuf> {
    let root = output_root(cfg).join(format!("{}-sweep-{param}", cfg.name));
    let path = param_path(param);
    let mut jobs = Vec::new();
    for raw in values {
        let mut doc = serde_json::to_value(cfg)?;
        let value = parse_value(raw);
        set_path(&mut doc, path, value.clone())?;
        let run: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::config(path, e))?;
        run.validate()?;
        jobs.push((value, run, root.join(format!("{param}={raw}"))));
    }
    let go = |(value, run, dir): &(Value, RunConfig, PathBuf)| -> CliResult<SweepEntry> {
        let out = train_cmd(run, Some(dir))?;
        let summary: TrainSummary = serde_json::from_str(&std::fs::read_to_string(out.join("outputs/metrics.json"))?)?;
        Ok(SweepEntry {
            param: param.to_string(),
            value: value.clone(),
            dir: out,
            last_total: summary.last.map(|l| l.total),
            eval_total: summary.eval.map(|l| l.total),
        })
    };
    let entries: Vec<SweepEntry> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs.iter().map(|j| s.spawn(move || go(j))).collect();
            handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect::<CliResult<_>>()
        })?
    } else {
        jobs.iter().map(go).collect::<CliResult<_>>()?
    };
    std::fs::create_dir_all(&root)?;
    std::fs::write(root.join("summary.json"), serde_json::to_string_pretty(&entries)? + "\n")?;
    Ok(root)
}
