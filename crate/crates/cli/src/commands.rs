use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use csen_core::checkpoint::Checkpoint;
use csen_core::data::{load_manifest, synth_generate, Dataset, Sample, Split};
use csen_core::evaluation::{
    evaluate_features, export_embeddings, extract_features, retrieval_features, EvalReport, RerankConfig,
};
use csen_core::losses::MetricLoss;
use csen_core::model::{Ablation, Model};
use csen_core::training::{fit, ImageSet, TrainState};

use crate::config::{resolve, RunConfig};
use crate::{verify, CliError, Command, ConfigArgs, VERSION};

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(runtime)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| runtime(format!("writing {}: {e}", path.display())))
}

/// Creates `out` and records the resolved config and tool version in it.
pub fn prepare_out(out: &Path, command: &str, cfg: &RunConfig, extra: Value) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| runtime(format!("creating {}: {e}", out.display())))?;
    write_json(&out.join("resolved_config.json"), &cfg.to_value())?;
    let mut info = json!({
        "tool": "csen",
        "version": VERSION,
        "command": command,
        "config_hash": cfg.hash(),
        "threads": rayon::current_num_threads(),
    });
    if let (Value::Object(m), Value::Object(x)) = (&mut info, extra) {
        m.extend(x);
    }
    write_json(&out.join("run_info.json"), &info)
}

fn resolve_args(args: &ConfigArgs) -> Result<RunConfig, CliError> {
    resolve(args.profile, args.config.as_deref(), &args.set)
}

fn data_path(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.data.clone())
        .ok_or_else(|| CliError::Usage("no dataset: pass --data or set `data` in the config".into()))
}

pub fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Synth { cfg, out } => {
            let cfg = resolve_args(&cfg)?;
            let ds = cmd_synth(&cfg, &out)?;
            println!("{}", json!({ "images": ds.len(), "manifest": out.join("manifest.jsonl") }));
            Ok(())
        }
        Command::Train {
            cfg,
            data,
            out,
            ablate,
            resume,
        } => {
            let mut cfg = resolve_args(&cfg)?;
            if let Some(a) = ablate {
                a.apply(&mut cfg.model);
                cfg.validate()?;
            }
            let data = data_path(data, &cfg)?;
            let extra = json!({ "ablate": ablate, "data": data, "resume": resume });
            prepare_out(&out, "train", &cfg, extra)?;
            let prepared = Prepared::load(&data)?;
            let outcome = train_run(&cfg, &prepared, &out, resume.as_deref())?;
            println!("{}", serde_json::to_string(&outcome.summary()).map_err(runtime)?);
            Ok(())
        }
        Command::Eval {
            cfg,
            checkpoint,
            data,
            out,
            rerank,
        } => {
            let mut cfg = resolve_args(&cfg)?;
            if rerank && cfg.eval.rerank.is_none() {
                cfg.eval.rerank = Some(RerankConfig::default());
            }
            if !rerank {
                cfg.eval.rerank = None;
            }
            let data = data_path(data, &cfg)?;
            prepare_out(&out, "eval", &cfg, json!({ "checkpoint": checkpoint, "data": data }))?;
            let report = cmd_eval(&cfg, &checkpoint, &data)?;
            write_json(&out.join("report.json"), &report)?;
            println!("{}", json!({ "mAP": report.map, "rank1": report.rank(1), "rank5": rank_or_nan(&report, 5) }));
            Ok(())
        }
        Command::Rerank {
            cfg,
            checkpoint,
            data,
            out,
        } => {
            let mut cfg = resolve_args(&cfg)?;
            let rr = cfg.eval.rerank.unwrap_or_default();
            cfg.eval.rerank = Some(rr);
            let data = data_path(data, &cfg)?;
            prepare_out(&out, "rerank", &cfg, json!({ "checkpoint": checkpoint, "data": data }))?;
            let (model, ds) = load_for_eval(&checkpoint, &data)?;
            let f = retrieval_features(&model, &ds, cfg.eval.batch_size)?;
            let mut plain = cfg.eval.clone();
            plain.rerank = None;
            let before = evaluate_features(&f, &plain)?;
            let after = evaluate_features(&f, &cfg.eval)?;
            let doc = json!({ "rerank": rr, "plain": before, "reranked": after });
            write_json(&out.join("rerank.json"), &doc)?;
            println!("{}", json!({ "mAP_plain": before.map, "mAP_reranked": after.map }));
            Ok(())
        }
        Command::AblateGroups { cfg, data, out, groups } => {
            let cfg = resolve_args(&cfg)?;
            let data = data_path(data, &cfg)?;
            prepare_out(&out, "ablate-groups", &cfg, json!({ "data": data, "groups": groups }))?;
            let table = cmd_ablate_groups(&cfg, &data, &out, &groups)?;
            println!("{}", serde_json::to_string(&table).map_err(runtime)?);
            Ok(())
        }
        Command::AblateLoss { cfg, data, out, metrics } => {
            let cfg = resolve_args(&cfg)?;
            let metrics = metrics.iter().map(|m| parse_metric(m)).collect::<Result<Vec<_>, _>>()?;
            let data = data_path(data, &cfg)?;
            prepare_out(&out, "ablate-loss", &cfg, json!({ "data": data, "metrics": metrics }))?;
            let table = cmd_ablate_loss(&cfg, &data, &out, &metrics)?;
            println!("{}", serde_json::to_string(&table).map_err(runtime)?);
            Ok(())
        }
        Command::ExportEmbeddings {
            cfg,
            checkpoint,
            data,
            out,
            split,
            ids,
        } => {
            let cfg = resolve_args(&cfg)?;
            let split = parse_split(&split)?;
            let data = data_path(data, &cfg)?;
            let extra = json!({ "checkpoint": checkpoint, "data": data, "split": split, "ids": ids });
            prepare_out(&out, "export-embeddings", &cfg, extra)?;
            let n = cmd_export(&cfg, &checkpoint, &data, &out.join("embeddings.jsonl"), split, ids)?;
            println!("{}", json!({ "records": n, "path": out.join("embeddings.jsonl") }));
            Ok(())
        }
        Command::Verify { out, perturb } => {
            let perturb = perturb.as_deref().map(verify::parse_perturb).transpose()?;
            if let Some(out) = &out {
                let extra = json!({ "perturb": perturb.as_ref().map(|(o, f)| format!("{o}:{f}")) });
                prepare_out(out, "verify", &RunConfig::default(), extra)?;
            }
            let report = verify::run_suite(perturb.as_ref().map(|(o, f)| (o.as_str(), *f)))?;
            for c in &report.checks {
                eprintln!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if let Some(out) = &out {
                write_json(&out.join("verify.json"), &report)?;
            }
            let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
            if failed.is_empty() {
                println!("{}", json!({ "passed": report.checks.len(), "failed": 0 }));
                Ok(())
            } else {
                Err(CliError::Runtime(format!("verification failed: {}", failed.join(", "))))
            }
        }
    }
}

fn rank_or_nan(r: &EvalReport, k: usize) -> f64 {
    if k <= r.cmc.len() {
        r.rank(k)
    } else {
        f64::NAN
    }
}

fn parse_metric(s: &str) -> Result<MetricLoss, CliError> {
    match s {
        "supcon" => Ok(MetricLoss::Supcon),
        "triplet" => Ok(MetricLoss::Triplet),
        "none" => Ok(MetricLoss::None),
        other => Err(CliError::Usage(format!(
            "unknown metric loss `{other}` (expected supcon, triplet or none)"
        ))),
    }
}

fn parse_split(s: &str) -> Result<Option<Split>, CliError> {
    match s {
        "all" => Ok(None),
        "train" => Ok(Some(Split::Train)),
        "query" => Ok(Some(Split::Query)),
        "gallery" => Ok(Some(Split::Gallery)),
        other => Err(CliError::Usage(format!(
            "unknown split `{other}` (expected train, query, gallery or all)"
        ))),
    }
}

pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Dataset, CliError> {
    prepare_out(out, "synth", cfg, json!({}))?;
    Ok(synth_generate(&cfg.synth, out)?)
}

/// A loaded dataset with its decoded training split.
pub struct Prepared {
    pub dataset: Dataset,
    pub train: ImageSet,
    /// Original identity of each contiguous training label.
    pub label_ids: Vec<usize>,
}

impl Prepared {
    pub fn load(manifest: &Path) -> Result<Self, CliError> {
        let dataset = load_manifest(manifest)?;
        let train: Vec<Sample> = dataset.samples.iter().filter(|s| s.split == Split::Train).cloned().collect();
        if train.is_empty() {
            return Err(CliError::Runtime(format!("{} has no train samples", manifest.display())));
        }
        let (train, label_ids) = ImageSet::from_samples(&dataset, &train)?;
        Ok(Self {
            dataset,
            train,
            label_ids,
        })
    }

    fn has_retrieval_split(&self) -> bool {
        let has = |split| self.dataset.samples.iter().any(|s| s.split == split);
        has(Split::Query) && has(Split::Gallery)
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub checkpoint: PathBuf,
    pub report: Option<EvalReport>,
    pub seconds: f64,
}

impl TrainOutcome {
    pub fn summary(&self) -> Value {
        let last = self.state.history.steps.last();
        json!({
            "epochs": self.state.epoch,
            "steps": self.state.history.steps.len(),
            "final_loss": last.map(|s| s.loss),
            "checkpoint": self.checkpoint,
            "mAP": self.report.as_ref().map(|r| r.map),
            "rank1": self.report.as_ref().map(|r| r.rank(1)),
            "seconds": self.seconds,
        })
    }
}

fn save_checkpoint(state: &TrainState, cfg: &RunConfig, path: &Path) -> csen_core::Result<()> {
    Checkpoint::from_state(state, cfg.train.precision, cfg.train.seed, cfg.to_value(), cfg.hash()).save(path)
}

/// Trains `cfg` on `data` into `out`: periodic checkpoints under
/// `out/checkpoints/`, the final one at `out/checkpoint.ckpt`, the loss
/// history at `out/history.json` and, when the dataset has query and
/// gallery samples, `out/report.json`.
pub fn train_run(cfg: &RunConfig, data: &Prepared, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome, CliError> {
    let t0 = Instant::now();
    fs::create_dir_all(out).map_err(|e| runtime(format!("creating {}: {e}", out.display())))?;
    let num_ids = data.label_ids.len();
    let mut state = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.meta.model != cfg.model || ck.meta.num_ids != num_ids || ck.meta.seed != cfg.train.seed {
                return Err(CliError::Usage(format!(
                    "{} was written for a different model, identity count or seed",
                    path.display()
                )));
            }
            ck.into_state()?
        }
        None => TrainState::new(Model::new(cfg.model.clone(), num_ids, cfg.train.seed)?, &cfg.train),
    };
    let every = cfg.train.checkpoint_every;
    let ck_dir = out.join("checkpoints");
    if every > 0 {
        fs::create_dir_all(&ck_dir).map_err(|e| runtime(format!("creating {}: {e}", ck_dir.display())))?;
    }
    let epochs = cfg.train.epochs;
    fit(&mut state, &data.train, &cfg.train, &cfg.loss, |s| {
        if let Some(last) = s.history.steps.last() {
            eprintln!(
                "epoch {}/{epochs} loss {:.4} ce {:.4} lr {:.3e} {:.1}s",
                s.epoch,
                last.loss,
                last.ce,
                last.lr,
                t0.elapsed().as_secs_f64()
            );
        }
        if every > 0 && s.epoch % every == 0 {
            save_checkpoint(s, cfg, &ck_dir.join(format!("epoch_{:03}.ckpt", s.epoch)))?;
        }
        Ok(())
    })?;
    let checkpoint = out.join("checkpoint.ckpt");
    save_checkpoint(&state, cfg, &checkpoint)?;
    write_json(&out.join("history.json"), &state.history)?;
    let report = if data.has_retrieval_split() {
        let f = retrieval_features(&state.model, &data.dataset, cfg.eval.batch_size)?;
        let r = evaluate_features(&f, &cfg.eval)?;
        write_json(&out.join("report.json"), &r)?;
        Some(r)
    } else {
        None
    };
    Ok(TrainOutcome {
        state,
        checkpoint,
        report,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

fn load_for_eval(checkpoint: &Path, data: &Path) -> Result<(Model, Dataset), CliError> {
    let state = Checkpoint::load(checkpoint)?.into_state()?;
    Ok((state.model, load_manifest(data)?))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, data: &Path) -> Result<EvalReport, CliError> {
    let (model, ds) = load_for_eval(checkpoint, data)?;
    let f = retrieval_features(&model, &ds, cfg.eval.batch_size)?;
    Ok(evaluate_features(&f, &cfg.eval)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub valid: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub config_hash: String,
    #[serde(rename = "mAP")]
    pub map: Option<f64>,
    pub rank1: Option<f64>,
    pub rank5: Option<f64>,
    pub final_loss: Option<f64>,
    pub seconds: Option<f64>,
}

impl AblationRow {
    fn invalid(name: String, cfg: &RunConfig, reason: String) -> Self {
        Self {
            name,
            valid: false,
            reason: Some(reason),
            config_hash: cfg.hash(),
            map: None,
            rank1: None,
            rank5: None,
            final_loss: None,
            seconds: None,
        }
    }
}

/// One training run of an ablation grid; configuration and runtime
/// failures become invalid rows so the grid keeps going.
fn ablation_run(name: String, cfg: &RunConfig, data: &Prepared, out: &Path) -> AblationRow {
    if let Err(e) = cfg.validate() {
        return AblationRow::invalid(name, cfg, e.to_string());
    }
    let result = prepare_out(out, "ablation-run", cfg, json!({ "name": name }))
        .and_then(|_| train_run(cfg, data, out, None));
    match result {
        Ok(o) => match &o.report {
            Some(r) => AblationRow {
                name,
                valid: true,
                reason: None,
                config_hash: cfg.hash(),
                map: Some(r.map),
                rank1: Some(r.rank(1)),
                rank5: (r.cmc.len() >= 5).then(|| r.rank(5)),
                final_loss: o.state.history.steps.last().map(|s| s.loss),
                seconds: Some(o.seconds),
            },
            None => AblationRow::invalid(name, cfg, "dataset has no query/gallery split".into()),
        },
        Err(e) => AblationRow::invalid(name, cfg, e.to_string()),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub base_config_hash: String,
    pub rows: Vec<AblationRow>,
}

pub fn cmd_ablate_groups(cfg: &RunConfig, data: &Path, out: &Path, groups: &[usize]) -> Result<AblationTable, CliError> {
    if groups.is_empty() {
        return Err(CliError::Usage("--groups needs at least one value".into()));
    }
    let prepared = Prepared::load(data)?;
    let mut rows = Vec::new();
    for &g in groups {
        let mut c = cfg.clone();
        c.model.groups = g;
        eprintln!("groups = {g}");
        rows.push(ablation_run(format!("G={g}"), &c, &prepared, &out.join(format!("g{g}"))));
    }
    let table = AblationTable {
        base_config_hash: cfg.hash(),
        rows,
    };
    write_json(&out.join("ablate_groups.json"), &table)?;
    Ok(table)
}

pub fn cmd_ablate_loss(cfg: &RunConfig, data: &Path, out: &Path, metrics: &[MetricLoss]) -> Result<AblationTable, CliError> {
    let prepared = Prepared::load(data)?;
    let mut rows = Vec::new();
    for (model_name, ablation) in [("full", None), ("baseline", Some(Ablation::Baseline))] {
        for &metric in metrics {
            let mut c = cfg.clone();
            if let Some(a) = ablation {
                a.apply(&mut c.model);
            }
            c.loss.metric = metric;
            let tag = match metric {
                MetricLoss::Supcon => "supcon",
                MetricLoss::Triplet => "triplet",
                MetricLoss::None => "ce-only",
            };
            let name = format!("{model_name}-{tag}");
            eprintln!("{name}");
            rows.push(ablation_run(name.clone(), &c, &prepared, &out.join(&name)));
        }
    }
    let table = AblationTable {
        base_config_hash: cfg.hash(),
        rows,
    };
    write_json(&out.join("ablate_loss.json"), &table)?;
    Ok(table)
}

pub fn cmd_export(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    path: &Path,
    split: Option<Split>,
    ids: Option<usize>,
) -> Result<usize, CliError> {
    let (model, ds) = load_for_eval(checkpoint, data)?;
    let mut samples: Vec<Sample> = ds
        .samples
        .iter()
        .filter(|s| split.is_none_or(|sp| s.split == sp))
        .cloned()
        .collect();
    if let Some(n) = ids {
        let mut all: Vec<usize> = samples.iter().map(|s| s.id).collect::<BTreeSet<_>>().into_iter().collect();
        all.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.train.seed));
        let keep: BTreeSet<usize> = all.into_iter().take(n).collect();
        samples.retain(|s| keep.contains(&s.id));
    }
    if samples.is_empty() {
        return Err(CliError::Runtime("no samples selected for export".into()));
    }
    let (set, _) = ImageSet::from_samples(&ds, &samples)?;
    let feats = extract_features(&model, &set, cfg.eval.batch_size)?;
    let keys: Vec<String> = samples.iter().map(|s| s.key.clone()).collect();
    let id_list: Vec<usize> = samples.iter().map(|s| s.id).collect();
    let cams: Vec<usize> = samples.iter().map(|s| s.camera).collect();
    export_embeddings(&feats, &keys, &id_list, &cams, path)?;
    Ok(samples.len())
}
