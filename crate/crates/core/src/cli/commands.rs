use std::io::Write;
use std::path::{Path, PathBuf};

use super::config::{DataFormat, RunConfig};
use super::workdir::{require_file, write_artifact, WorkDirLock};
use super::CliError;
use crate::data::io::{
    load_item_map, load_prompts, load_sessions, load_step_rewards, write_item_map, write_prompts, write_sessions,
    write_step_rewards, Provenance,
};
use crate::data::{
    compact_items, filter_sessions, generate_prompts, ingest_events, max_item, split_dataset, synth_corpus, Behavior,
    EventLayout, IngestReport, Session, StepRewardAverages,
};
use crate::eval::{evaluate as evaluate_report, evaluate_runs, sweep as run_sweep, write_report_csv, write_report_text, write_sweep_csv};
use crate::model::{
    train as run_training, Checkpoint, CheckpointKind, EpochSummary, ModelError, PrlModel, TrainObserver,
};
use crate::tensor::{Adam, AdamConfig};

pub const SESSIONS: &str = "sessions.tsv";
pub const TRAIN: &str = "train.tsv";
pub const VALIDATION: &str = "validation.tsv";
pub const TEST: &str = "test.tsv";
pub const ITEM_MAP: &str = "item_map.tsv";
pub const PROMPTS: &str = "prompts.csv";
pub const STEP_REWARDS: &str = "step_rewards.csv";
pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "checkpoint.bin";
pub const BEST: &str = "best.bin";
pub const LOSS_TRACE: &str = "loss_trace.csv";
pub const EPOCHS: &str = "epochs.csv";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";

/// Cutoff of the validation metric that selects the best checkpoint.
const VALIDATION_K: usize = 10;

fn provenance(c: &RunConfig) -> Provenance {
    Provenance {
        config_hash: c.hash(),
        seed: c.seed,
    }
}

fn identity_map(sessions: &[Session]) -> Vec<String> {
    (1..=max_item(sessions)).map(|i| i.to_string()).collect()
}

fn input_path(c: &RunConfig) -> Result<&Path, CliError> {
    let path = c
        .paths
        .input
        .as_deref()
        .ok_or_else(|| CliError::Validation(format!("{:?} data needs an input path (--input)", c.data.format)))?;
    require_file(path, "input")?;
    Ok(path)
}

/// Sessions, raw item labels and the ingest counts when events were parsed.
type RawData = (Vec<Session>, Vec<String>, Option<IngestReport>);

fn load_raw(c: &RunConfig) -> Result<RawData, CliError> {
    let layout = match c.data.format {
        DataFormat::Canonical => {
            let sessions = load_sessions(input_path(c)?)?;
            let map = identity_map(&sessions);
            return Ok((sessions, map, None));
        }
        DataFormat::Synthetic => {
            let sessions = synth_corpus(&c.synth_config())?;
            let map = identity_map(&sessions);
            return Ok((sessions, map, None));
        }
        DataFormat::Challenge15 => EventLayout::challenge15(),
        DataFormat::Retailrocket => EventLayout::retailrocket(),
    };
    let (events, unparseable) = layout.read_csv(input_path(c)?)?;
    let ingested = ingest_events(events, &layout, unparseable)?;
    Ok((ingested.sessions, ingested.item_map, Some(ingested.report)))
}

fn sessions_artifact(path: &Path, sessions: &[Session], prov: &Provenance) -> Result<(), CliError> {
    write_artifact(path, |w| write_sessions(w, sessions, Some(prov)))
}

pub fn prepare(c: &RunConfig) -> Result<(), CliError> {
    let prov = provenance(c);
    let (raw, raw_map, ingest) = load_raw(c)?;
    let raw_count = raw.len();
    let mut sessions = filter_sessions(raw, &c.filter())?;
    let item_map = compact_items(&mut sessions, &raw_map);
    let split = split_dataset(sessions.clone(), c.seed)?;
    let rewards = c.rewards();
    let prompts = generate_prompts(&split.train, &rewards)?;
    let averages = StepRewardAverages::from_prompts(&prompts)?;

    let dir = &c.paths.work_dir;
    let _lock = WorkDirLock::acquire(dir)?;
    sessions_artifact(&dir.join(SESSIONS), &sessions, &prov)?;
    sessions_artifact(&dir.join(TRAIN), &split.train, &prov)?;
    sessions_artifact(&dir.join(VALIDATION), &split.validation, &prov)?;
    sessions_artifact(&dir.join(TEST), &split.test, &prov)?;
    write_artifact(&dir.join(ITEM_MAP), |w| write_item_map(w, &item_map, Some(&prov)))?;
    write_artifact(&dir.join(PROMPTS), |w| write_prompts(w, &prompts, Some(&prov)))?;
    write_artifact(&dir.join(STEP_REWARDS), |w| write_step_rewards(w, &averages, Some(&prov)))?;

    let manifest = serde_json::json!({
        "config_hash": prov.config_hash,
        "seed": prov.seed,
        "config": c.echo(),
        "counts": {
            "raw_sessions": raw_count,
            "sessions": sessions.len(),
            "items": item_map.len(),
            "train": split.train.len(),
            "validation": split.validation.len(),
            "test": split.test.len(),
            "prompts": prompts.len(),
            "steps_with_rewards": averages.len(),
        },
        "ingest": ingest,
        "artifacts": [SESSIONS, TRAIN, VALIDATION, TEST, ITEM_MAP, PROMPTS, STEP_REWARDS],
    });
    write_artifact(&dir.join(MANIFEST), |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        writeln!(w)
    })?;
    if let Some(r) = ingest {
        if r.skipped() > 0 {
            eprintln!(
                "warning: skipped {} of {} rows ({} unparseable, {} unknown behavior)",
                r.skipped(),
                r.rows,
                r.unparseable,
                r.unknown_behavior
            );
        }
    }
    println!(
        "prepared {} sessions ({} train / {} validation / {} test), {} items, {} prompts in {}",
        sessions.len(),
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        item_map.len(),
        prompts.len(),
        dir.display()
    );
    Ok(())
}

fn checkpoint_of(c: &RunConfig, model: &PrlModel, optimizer: Option<&Adam>, averages: &StepRewardAverages) -> Checkpoint {
    let mut config = c.echo();
    config["config_hash"] = serde_json::Value::String(c.hash());
    Checkpoint {
        model: model.clone(),
        seed: c.seed,
        config,
        optimizer: optimizer.cloned(),
        step_rewards: Some(averages.clone()),
    }
}

fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), CliError> {
    write_artifact(path, |w| ck.write_to(w).map_err(|e| std::io::Error::other(e.to_string())))
}

/// Purchase NDCG@10 on the validation split, or click NDCG@10 when the
/// split has no purchase targets.
fn validation_score(c: &RunConfig, model: &PrlModel, sessions: &[Session], averages: &StepRewardAverages) -> crate::eval::Result<f64> {
    let r = evaluate_report(model, sessions, averages, &c.rewards(), &c.inference(), &[VALIDATION_K])?;
    let behavior = if r.purchase.steps > 0 { Behavior::Purchase } else { Behavior::Click };
    Ok(r.metrics(behavior).ndcg[0])
}

struct CliObserver<'a> {
    config: &'a RunConfig,
    dir: &'a Path,
    validation: Vec<Session>,
    averages: StepRewardAverages,
    failure: Option<CliError>,
}

impl CliObserver<'_> {
    fn fail(&mut self, e: CliError) -> ModelError {
        let msg = e.to_string();
        self.failure = Some(e);
        ModelError::Config(msg)
    }
}

impl TrainObserver for CliObserver<'_> {
    fn validate(&mut self, model: &PrlModel) -> crate::model::Result<Option<f64>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        match validation_score(self.config, model, &self.validation, &self.averages) {
            Ok(v) => Ok(Some(v)),
            Err(e) => Err(self.fail(e.into())),
        }
    }

    fn checkpoint(&mut self, kind: CheckpointKind, model: &PrlModel, optimizer: &Adam) -> crate::model::Result<()> {
        let name = match kind {
            CheckpointKind::EpochEnd(_) => CHECKPOINT,
            CheckpointKind::Best(_) => BEST,
        };
        let ck = checkpoint_of(self.config, model, Some(optimizer), &self.averages);
        save_checkpoint(&self.dir.join(name), &ck).map_err(|e| self.fail(e))
    }

    fn epoch_end(&mut self, s: &EpochSummary) {
        let validation = s
            .validation
            .map_or_else(|| "-".to_owned(), |v| format!("{v:.4}"));
        println!(
            "epoch {:>3}  steps {:>7}  loss {:.6}  val_ndcg@{VALIDATION_K} {validation}",
            s.epoch, s.steps, s.mean_loss
        );
    }
}

pub fn train(c: &RunConfig) -> Result<(), CliError> {
    let dir = &c.paths.work_dir;
    for name in [ITEM_MAP, PROMPTS, VALIDATION, STEP_REWARDS] {
        require_file(&dir.join(name), "prepared artifact")?;
    }
    let n_items = load_item_map(&dir.join(ITEM_MAP))?.len();
    let prompts = load_prompts(&dir.join(PROMPTS))?;
    let validation = load_sessions(&dir.join(VALIDATION))?;
    let averages = load_step_rewards(&dir.join(STEP_REWARDS))?;
    let train_cfg = c.train_config();
    let mut model = PrlModel::new(c.model_config(n_items), c.seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            learning_rate: train_cfg.learning_rate,
            ..AdamConfig::default()
        },
        model.params(),
    );

    let prov = provenance(c);
    let _lock = WorkDirLock::acquire(dir)?;
    let mut observer = CliObserver {
        config: c,
        dir,
        validation,
        averages,
        failure: None,
    };
    let outcome = match run_training(&mut model, &mut adam, &prompts, &train_cfg, &mut observer) {
        Ok(o) => o,
        Err(e) => return Err(observer.failure.take().unwrap_or_else(|| e.into())),
    };
    write_artifact(&dir.join(LOSS_TRACE), |w| {
        writeln!(w, "{}", prov.comment())?;
        writeln!(w, "step,loss")?;
        for (i, l) in outcome.loss_trace.iter().enumerate() {
            writeln!(w, "{},{l}", i + 1)?;
        }
        Ok(())
    })?;
    write_artifact(&dir.join(EPOCHS), |w| {
        writeln!(w, "{}", prov.comment())?;
        writeln!(w, "epoch,steps,mean_loss,validation_ndcg{VALIDATION_K}")?;
        for e in &outcome.epochs {
            let v = e.validation.map_or_else(String::new, |v| v.to_string());
            writeln!(w, "{},{},{},{v}", e.epoch, e.steps, e.mean_loss)?;
        }
        Ok(())
    })?;
    if let Some(reason) = outcome.halted {
        let path = dir.join(CHECKPOINT);
        save_checkpoint(&path, &checkpoint_of(c, &model, Some(&adam), &observer.averages))?;
        return Err(CliError::Numerical(format!(
            "training halted after {} updates: {reason}; last good parameters saved to {}",
            outcome.loss_trace.len(),
            path.display()
        )));
    }
    match outcome.best {
        Some((epoch, score)) => println!("best validation ndcg@{VALIDATION_K} {score:.4} at epoch {epoch}"),
        None => println!("no validation split; {} holds the final model", CHECKPOINT),
    }
    Ok(())
}

/// Explicit checkpoint, else the best one, else the last epoch's.
fn checkpoint_path(c: &RunConfig) -> Result<PathBuf, CliError> {
    if let Some(p) = &c.paths.checkpoint {
        require_file(p, "checkpoint")?;
        return Ok(p.clone());
    }
    let dir = &c.paths.work_dir;
    let best = dir.join(BEST);
    if best.is_file() {
        return Ok(best);
    }
    let last = dir.join(CHECKPOINT);
    require_file(&last, "checkpoint")?;
    Ok(last)
}

fn load_for_eval(c: &RunConfig) -> Result<(Checkpoint, Vec<Session>, StepRewardAverages), CliError> {
    let ck_path = checkpoint_path(c)?;
    let test_path = c.paths.work_dir.join(TEST);
    require_file(&test_path, "test split")?;
    let ck = Checkpoint::load(&ck_path)?;
    let test = load_sessions(&test_path)?;
    let averages = match &ck.step_rewards {
        Some(a) => a.clone(),
        None => load_step_rewards(&c.paths.work_dir.join(STEP_REWARDS))?,
    };
    Ok((ck, test, averages))
}

pub fn evaluate(c: &RunConfig) -> Result<(), CliError> {
    let (ck, test, averages) = load_for_eval(c)?;
    let report = evaluate_runs(&ck.model, &test, &averages, &c.rewards(), &c.inference(), &c.eval.ks, c.eval.runs)?;
    let prov = provenance(c);
    let dir = &c.paths.work_dir;
    let _lock = WorkDirLock::acquire(dir)?;
    write_artifact(&dir.join(REPORT_TEXT), |w| write_report_text(w, &report, Some(&prov)))?;
    write_artifact(&dir.join(REPORT_CSV), |w| write_report_csv(w, &report, Some(&prov)))?;
    print!("{}", report.table());
    Ok(())
}

pub fn sweep(c: &RunConfig) -> Result<(), CliError> {
    let (ck, test, averages) = load_for_eval(c)?;
    let rows = run_sweep(&ck.model, &test, &averages, &c.rewards(), &c.inference(), c.sweep.param, &c.sweep.grid)?;
    let prov = provenance(c);
    let dir = &c.paths.work_dir;
    let out = c
        .paths
        .out
        .clone()
        .unwrap_or_else(|| dir.join(format!("sweep_{}.csv", c.sweep.param)));
    let _lock = WorkDirLock::acquire(dir)?;
    write_artifact(&out, |w| write_sweep_csv(w, &rows, Some(&prov)))?;
    println!("{:>10}  cumulative_reward@1", c.sweep.param);
    for r in &rows {
        println!("{:>10}  {}", r.parameter, r.report.cumulative_reward_at_1);
    }
    Ok(())
}

pub fn synth(c: &RunConfig) -> Result<(), CliError> {
    let out = c
        .paths
        .out
        .as_deref()
        .ok_or_else(|| CliError::Validation("synth needs an output path (--out)".into()))?;
    let sessions = synth_corpus(&c.synth_config())?;
    sessions_artifact(out, &sessions, &provenance(c))?;
    println!("wrote {} sessions to {}", sessions.len(), out.display());
    Ok(())
}
