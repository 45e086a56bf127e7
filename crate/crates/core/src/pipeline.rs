//! Glue between training and scoring: evaluating a trained model on a task's
//! held-out pools, and the anomaly-budget sweep.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{build_task, Corpus, TrainingTask};
use crate::encoder::{EncoderConfig, PooledClip};
use crate::error::{Error, Result};
use crate::frontend::Role;
use crate::metrics::EvalOutcome;
use crate::scoring::{
    resolve_alpha, score_clips, select_alpha, standardize_distances, AlphaChoice, AlphaPolicy, ClipKey,
    ScoreReport, ScoringConfig,
};
use crate::trainer::{train, HistoryRow, TrainConfig};

pub fn clip_keys(corpus: &Corpus, indices: &[usize]) -> Vec<ClipKey> {
    indices
        .iter()
        .map(|&i| {
            let c = &corpus.clips[i];
            ClipKey {
                clip_id: c.clip_id.clone(),
                machine_type: c.machine_type.clone(),
                machine_id: c.machine_id,
                role: c.role,
            }
        })
        .collect()
}

/// `(p, d)` for each listed clip.
pub fn raw_scores(ck: &Checkpoint, clips: &[PooledClip], indices: &[usize]) -> Result<Vec<(f64, f64)>> {
    let refs: Vec<&PooledClip> = indices
        .iter()
        .map(|&i| clips.get(i).ok_or_else(|| Error::contract(format!("clip index {i} outside the bank"))))
        .collect::<Result<_>>()?;
    score_clips(&ck.params, &refs, &ck.centroids)
}

fn has_both_classes(corpus: &Corpus, indices: &[usize]) -> bool {
    let anomalous = indices
        .iter()
        .filter(|&&i| corpus.clips[i].role == Role::Anomalous)
        .count();
    anomalous > 0 && anomalous < indices.len()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskEvaluation {
    pub alpha: f64,
    /// Whether α came from the validation grid search.
    pub alpha_searched: bool,
    /// `None` when the validation pool lacks a class.
    pub validation: Option<ScoreReport>,
    pub evaluation: ScoreReport,
}

/// Scores the task's validation and evaluation pools, settles α (searching
/// the grid on validation when the policy asks for it) and reports the
/// evaluation split.
pub fn evaluate_task(
    corpus: &Corpus,
    task: &TrainingTask,
    clips: &[PooledClip],
    ck: &Checkpoint,
    scoring: &ScoringConfig,
    digest: &str,
) -> Result<TaskEvaluation> {
    scoring.validate()?;
    if !has_both_classes(corpus, &task.evaluation) {
        return Err(Error::Composition(format!(
            "evaluation pool of {}:{} needs normal and anomalous clips",
            task.target_type, task.target_id
        )));
    }
    let val_ok = has_both_classes(corpus, &task.validation);
    let val_raw = if val_ok {
        Some(raw_scores(ck, clips, &task.validation)?)
    } else {
        None
    };
    let (alpha, alpha_searched) = match resolve_alpha(scoring, ck.loss.variant, &task.target_type)? {
        AlphaChoice::Known(a) => (a, false),
        AlphaChoice::SearchGrid => {
            let raw = val_raw.as_ref().ok_or_else(|| {
                Error::Composition(format!(
                    "alpha search needs both classes in the validation pool of {}:{}",
                    task.target_type, task.target_id
                ))
            })?;
            let p: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let d: Vec<f64> = raw.iter().map(|r| r.1).collect();
            let roles: Vec<Role> = task.validation.iter().map(|&i| corpus.clips[i].role).collect();
            (select_alpha(&p, &standardize_distances(&d), &roles)?.0, true)
        }
    };
    let validation = match val_raw {
        Some(raw) => Some(ScoreReport::build(
            clip_keys(corpus, &task.validation),
            &raw,
            alpha,
            "validation",
            digest,
        )?),
        None => None,
    };
    let eval_raw = raw_scores(ck, clips, &task.evaluation)?;
    let evaluation = ScoreReport::build(
        clip_keys(corpus, &task.evaluation),
        &eval_raw,
        alpha,
        "evaluation",
        digest,
    )?;
    Ok(TaskEvaluation {
        alpha,
        alpha_searched,
        validation,
        evaluation,
    })
}

/// One trained and evaluated target.
#[derive(Clone, Debug)]
pub struct TargetRun {
    pub task: TrainingTask,
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRow>,
    pub evaluation: TaskEvaluation,
}

/// Builds the task for a target with budget `k`, trains (fresh, or
/// fine-tuning from `warm_start`) and evaluates.
#[allow(clippy::too_many_arguments)]
pub fn run_target(
    corpus: &Corpus,
    clips: &[PooledClip],
    target: (&str, u32),
    k: usize,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    scoring: &ScoringConfig,
    warm_start: Option<&Checkpoint>,
    digest: &str,
) -> Result<TargetRun> {
    let task = build_task(corpus, target.0, target.1, k, config.seed)?;
    let (checkpoint, history) = train(&task, clips, encoder, config, warm_start, digest)?;
    let evaluation = evaluate_task(corpus, &task, clips, &checkpoint, scoring, digest)?;
    Ok(TargetRun {
        task,
        checkpoint,
        history,
        evaluation,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub budgets: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            budgets: vec![0, 1, 2, 4, 8, 16, 32, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BudgetRow {
    pub k: usize,
    pub alpha: f64,
    pub outcome: EvalOutcome,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub base: TargetRun,
    pub rows: Vec<BudgetRow>,
}

impl SweepResult {
    /// `k,auc,ci_low,ci_high,n_normal,n_anomalous,alpha` rows and a digest line.
    pub fn to_text(&self, digest: &str) -> String {
        let mut out = String::from("k,auc,ci_low,ci_high,n_normal,n_anomalous,alpha\n");
        for r in &self.rows {
            let o = &r.outcome;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.k, o.auc, o.ci_low, o.ci_high, o.n_normal, o.n_anomalous, r.alpha
            );
        }
        let _ = writeln!(out, "# digest={digest}");
        out
    }
}

/// Trains the `k = 0` base model (unless given), then for each non-zero
/// budget fine-tunes from it with `k` injected anomalies and evaluates.
///
/// α is settled once, on the base model, and held fixed for every budget so
/// that rows differ only in the injected anomalies.
#[allow(clippy::too_many_arguments)]
pub fn sweep_anomaly_budget(
    corpus: &Corpus,
    clips: &[PooledClip],
    target: (&str, u32),
    budgets: &[usize],
    encoder: &EncoderConfig,
    config: &TrainConfig,
    scoring: &ScoringConfig,
    base: Option<TargetRun>,
    digest: &str,
) -> Result<SweepResult> {
    if budgets.is_empty() {
        return Err(Error::config("sweep needs at least one budget"));
    }
    let base = match base {
        Some(b) => b,
        None => run_target(corpus, clips, target, 0, encoder, config, scoring, None, digest)?,
    };
    let fixed = ScoringConfig {
        alpha_policy: AlphaPolicy::Fixed,
        alpha: base.evaluation.alpha,
    };
    let mut rows = Vec::with_capacity(budgets.len());
    for &k in budgets {
        let eval = if k == 0 {
            base.evaluation.clone()
        } else {
            run_target(
                corpus,
                clips,
                target,
                k,
                encoder,
                config,
                &fixed,
                Some(&base.checkpoint),
                digest,
            )?
            .evaluation
        };
        rows.push(BudgetRow {
            k,
            alpha: eval.alpha,
            outcome: eval.evaluation.pooled,
        });
    }
    Ok(SweepResult { base, rows })
}
