//! Subcommand implementations.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use m2po_core::datamodel::{read_pools, write_pools, CandidatePool};
use m2po_core::fusion::alpha_at;
use m2po_core::pairing::PreferencePair;
use m2po_core::policy::PolicyParams;
use m2po_core::reward::score_corpus;
use m2po_core::synthbench::{
    band_residual_variance, gen_corpus, motivation_report, scatter_csv, source_set, CoverageOracle, FlawedQe,
    MetricScores, MotivationReport, SynthTask,
};
use m2po_core::trainer::{evaluate, rank_pool, train as run_training, EpochRecord, EvalMetrics, Evaluator, StepRecord, TrainMode};
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::{AnalyzeArgs, CliError, EvalArgs, GenArgs, ScoreArgs, TrainArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";
pub const SCATTER_FILE: &str = "scatter.csv";

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{what} {} does not exist", path.display())))
    }
}

fn load_corpus(path: &Path, what: &str) -> Result<Vec<CandidatePool>, CliError> {
    require_file(path, what)?;
    Ok(read_pools(path)?)
}

fn require_scored(pools: &[CandidatePool], path: &Path) -> Result<(), CliError> {
    let scored = pools
        .iter()
        .flat_map(|p| &p.scorecards)
        .any(|c| c.r_s != 0.0 || c.r_qe != 0.0 || c.s_align != 0.0);
    if scored {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{} has no static scores; run `m2po score` first", path.display())))
    }
}

/// Every token must lie inside the configured vocabulary.
fn check_vocab(pools: &[CandidatePool], task: &SynthTask, path: &Path) -> Result<(), CliError> {
    let v = task.vocab();
    for p in pools {
        let src_ok = p.source.tokens.iter().all(|&t| (t as usize) < v);
        let cand_ok = p.candidates.iter().all(|c| c.tokens.iter().all(|&t| (t as usize) <= v));
        if !(src_ok && cand_ok) {
            return Err(CliError::Validation(format!(
                "{}: pool '{}' has tokens outside task.vocab = {v}",
                path.display(),
                p.source.id
            )));
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| CliError::Runtime(format!("cannot serialize output: {e}")))
}

fn to_json_line<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string(value).map_err(|e| CliError::Runtime(format!("cannot serialize output: {e}")))
}

fn candidate_count(pools: &[CandidatePool]) -> usize {
    pools.iter().map(|p| p.k()).sum()
}

pub fn gen(mut cfg: PipelineConfig, a: &GenArgs) -> Result<(), CliError> {
    if let Some(n) = a.n_sources {
        cfg.corpus.n_sources = n;
    }
    if let Some(k) = a.k {
        cfg.corpus.k = k;
    }
    if let Some(p) = &a.id_prefix {
        cfg.corpus.id_prefix = p.clone();
    }
    cfg.validate()?;
    let task = cfg.synth_task()?;
    let exclude = match &a.exclude {
        Some(path) => source_set(&load_corpus(path, "excluded corpus")?),
        None => HashSet::new(),
    };
    let pools = gen_corpus(&task, &cfg.corpus, &exclude)?;
    write_pools(&pools, &a.out)?;
    println!(
        "wrote {} pools, {} candidates to {}",
        pools.len(),
        candidate_count(&pools),
        a.out.display()
    );
    Ok(())
}

pub fn score(mut cfg: PipelineConfig, a: &ScoreArgs) -> Result<(), CliError> {
    if let Some(l) = a.lambda_f {
        cfg.reward.lambda_f = l;
    }
    cfg.validate()?;
    let task = cfg.synth_task()?;
    let pools = load_corpus(&a.corpus, "corpus")?;
    check_vocab(&pools, &task, &a.corpus)?;
    let qe = FlawedQe {
        task: &task,
        config: cfg.qe,
    };
    let cov = CoverageOracle { task: &task };
    let scored = score_corpus(&pools, &qe, &cov, &cfg.reward()?)?;
    write_pools(&scored, &a.out)?;
    println!(
        "scored {} pools, {} candidates to {}",
        scored.len(),
        candidate_count(&scored),
        a.out.display()
    );
    Ok(())
}

/// Final JSON summary of a training run.
#[derive(Debug, Serialize)]
struct TrainSummary {
    mode: TrainMode,
    n_sources: usize,
    total_steps: usize,
    checkpoint: &'static str,
    last_step: Option<StepRecord>,
    epochs: Vec<EpochRecord>,
    initial_eval: Option<EvalMetrics>,
    final_eval: Option<EvalMetrics>,
}

/// Ranking and pairs of one pool at the first training step.
#[derive(Debug, Serialize)]
struct PairsRecord<'a> {
    source_id: &'a str,
    alpha: f64,
    ranking: Vec<usize>,
    pairs: Vec<PreferencePair>,
}

pub fn train(mut cfg: PipelineConfig, a: &TrainArgs) -> Result<(), CliError> {
    let t = &mut cfg.train;
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = a.mode {
        t.mode = v;
    }
    if let Some(v) = a.lambda_pref {
        t.loss.lambda_pref = v;
    }
    if let Some(v) = a.lambda_rank {
        t.loss.lambda_rank = v;
    }
    if let Some(v) = a.lambda_bc {
        t.loss.lambda_bc = v;
    }
    cfg.validate()?;
    let task = cfg.synth_task()?;
    let corpus = load_corpus(&a.corpus, "training corpus")?;
    check_vocab(&corpus, &task, &a.corpus)?;
    require_scored(&corpus, &a.corpus)?;
    let held = match &a.held_out {
        Some(path) => {
            let h = load_corpus(path, "held-out corpus")?;
            check_vocab(&h, &task, path)?;
            Some(h)
        }
        None => None,
    };
    if cfg.train.on_policy_samples > 0 && held.is_none() {
        return Err(CliError::Validation(
            "train.on_policy_samples > 0 needs --held-out for its scorers".into(),
        ));
    }
    let init = match &a.init {
        Some(path) => {
            require_file(path, "initial checkpoint")?;
            PolicyParams::load(path)?
        }
        None => PolicyParams::uniform(cfg.policy())?,
    };
    if init.config().target_vocab != task.vocab() || init.config().source_vocab != task.vocab() {
        return Err(CliError::Validation(format!(
            "checkpoint vocabulary does not match task.vocab = {}",
            task.vocab()
        )));
    }

    let qe = FlawedQe {
        task: &task,
        config: cfg.qe,
    };
    let cov = CoverageOracle { task: &task };
    let evaluator = Evaluator {
        coverage: &cov,
        qe: &qe,
        reward: cfg.reward()?,
    };

    let schedule = cfg.train.schedule(corpus.len())?;
    let alpha0 = alpha_at(0, &schedule)?;
    let mut pairs_body = String::new();
    for pool in &corpus {
        let r = rank_pool(&init, pool, alpha0, &cfg.train)?;
        let rec = PairsRecord {
            source_id: &pool.source.id,
            alpha: alpha0,
            ranking: r.ranking,
            pairs: r.pairs,
        };
        pairs_body.push_str(&to_json_line(&rec)?);
        pairs_body.push('\n');
    }

    let outcome = run_training(&corpus, &init, &cfg.train, held.as_deref().map(|h| (&evaluator, h)))?;

    create_dir(&a.out_dir)?;
    let out = |name: &str| -> PathBuf { a.out_dir.join(name) };
    outcome.params.save(&out(CHECKPOINT_FILE))?;
    let mut metrics_body = String::new();
    for s in &outcome.metrics.steps {
        metrics_body.push_str(&to_json_line(s)?);
        metrics_body.push('\n');
    }
    write_file(&out(METRICS_FILE), &metrics_body)?;
    write_file(&out(PAIRS_FILE), &pairs_body)?;
    let m = outcome.metrics;
    let summary = TrainSummary {
        mode: m.mode,
        n_sources: corpus.len(),
        total_steps: m.total_steps,
        checkpoint: CHECKPOINT_FILE,
        last_step: m.steps.last().copied(),
        epochs: m.epochs,
        initial_eval: m.initial_eval,
        final_eval: m.final_eval,
    };
    write_file(&out(SUMMARY_FILE), &to_json(&summary)?)?;

    let mut line = format!("trained {} steps on {} sources", m.total_steps, corpus.len());
    if let Some(last) = summary.last_step {
        let _ = write!(line, ", final loss {:.6}", last.l_total);
    }
    if let Some(e) = summary.final_eval {
        let _ = write!(line, ", held-out coverage {:.2}", e.mean_coverage);
    }
    println!("{line}; outputs in {}", a.out_dir.display());
    Ok(())
}

pub fn eval(cfg: PipelineConfig, a: &EvalArgs) -> Result<(), CliError> {
    cfg.validate()?;
    let task = cfg.synth_task()?;
    require_file(&a.checkpoint, "checkpoint")?;
    let params = PolicyParams::load(&a.checkpoint)?;
    if params.config().target_vocab != task.vocab() {
        return Err(CliError::Validation(format!(
            "checkpoint target vocabulary {} does not match task.vocab = {}",
            params.config().target_vocab,
            task.vocab()
        )));
    }
    let pools = load_corpus(&a.corpus, "corpus")?;
    check_vocab(&pools, &task, &a.corpus)?;
    let qe = FlawedQe {
        task: &task,
        config: cfg.qe,
    };
    let cov = CoverageOracle { task: &task };
    let evaluator = Evaluator {
        coverage: &cov,
        qe: &qe,
        reward: cfg.reward()?,
    };
    let metrics = evaluate(&params, &pools, &evaluator)?;
    let body = to_json(&metrics)?;
    match &a.out {
        Some(path) => write_file(path, &body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

#[derive(Debug, Serialize)]
struct BandVariance {
    inside: Option<f64>,
    outside: Option<f64>,
}

#[derive(Debug, Serialize)]
struct AnalyzeReport {
    motivation: MotivationReport,
    /// Variance of `qe - coverage` inside and outside the 30–70 coverage band.
    residual_variance: BandVariance,
    scatter_rows: usize,
}

pub fn analyze(cfg: PipelineConfig, a: &AnalyzeArgs) -> Result<(), CliError> {
    cfg.validate()?;
    let pools = load_corpus(&a.corpus, "corpus")?;
    require_scored(&pools, &a.corpus)?;
    // the scores already on the cards, so the report matches the scatter
    let column = |name: &str, f: fn(&m2po_core::datamodel::ScoreCard) -> f64| MetricScores {
        name: name.into(),
        scores: pools.iter().map(|p| p.scorecards.iter().map(f).collect()).collect(),
    };
    let coverage = column("coverage", |c| c.s_align);
    let qe = column("qe", |c| c.r_qe);
    let flat = |m: &MetricScores| m.scores.iter().flatten().copied().collect::<Vec<f64>>();
    let (inside, outside) = band_residual_variance(&flat(&coverage), &flat(&qe));
    let motivation = motivation_report(&pools, &[coverage, qe])?;
    let report = AnalyzeReport {
        residual_variance: BandVariance { inside, outside },
        scatter_rows: candidate_count(&pools),
        motivation,
    };

    create_dir(&a.out_dir)?;
    write_file(&a.out_dir.join(REPORT_JSON), &to_json(&report)?)?;
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
    let mut text = report.motivation.to_text();
    let _ = writeln!(
        text,
        "residual variance of qe - coverage: inside [30, 70] {}, outside {}",
        fmt(inside),
        fmt(outside)
    );
    write_file(&a.out_dir.join(REPORT_TEXT), &text)?;
    write_file(&a.out_dir.join(SCATTER_FILE), &scatter_csv(&pools))?;
    print!("{text}");
    Ok(())
}
