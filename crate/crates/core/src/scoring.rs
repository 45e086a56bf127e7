//! Anomaly scores: per-clip averaging over the ten inference segments,
//! min-max standardization of centroid distances over the scored set, and
//! the α-weighted fusion `s = α(1 − p) + (1 − α)d′`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::centroids::CentroidPair;
use crate::encoder::{ClipOutputs, ModelParams, PooledClip};
use crate::error::{Error, Result};
use crate::frontend::Role;
use crate::losses::LossVariant;
use crate::metrics::{self, EvalOutcome};

/// Fused score inputs and output for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipScore {
    pub clip_id: String,
    pub machine_type: String,
    pub machine_id: u32,
    pub role: Role,
    /// Mean posterior of the normal class.
    pub p: f64,
    /// Mean squared distance to `c_p`.
    pub d: f64,
    /// `d` min-max standardized over the scored set.
    pub d_std: f64,
    pub s: f64,
}

/// `(p, d)` from one clip's segment outputs.
pub fn segment_scores(out: &ClipOutputs, c_p: &[f64]) -> (f64, f64) {
    let n = out.p.len() as f64;
    let p = out.p.iter().sum::<f64>() / n;
    let d = out
        .z
        .iter()
        .map(|z| z.iter().zip(c_p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / n;
    (p, d)
}

/// Mean posterior and mean squared distance to `c_p` over the clip's ten
/// inference segments.
pub fn score_clip(
    params: &ModelParams,
    clip: &PooledClip,
    centroids: &CentroidPair,
) -> Result<(f64, f64)> {
    Ok(score_clips(params, &[clip], centroids)?[0])
}

pub fn score_clips(
    params: &ModelParams,
    clips: &[&PooledClip],
    centroids: &CentroidPair,
) -> Result<Vec<(f64, f64)>> {
    if centroids.dim() != params.embedding_dim() {
        return Err(Error::contract("centroid dimension does not match the encoder"));
    }
    Ok(params
        .clip_outputs(clips)?
        .iter()
        .map(|o| segment_scores(o, &centroids.c_p))
        .collect())
}

/// `(d − min) / (max − min)`; all zeros when every distance is equal.
pub fn standardize_distances(d: &[f64]) -> Vec<f64> {
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    let max = d.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return vec![0.0; d.len()];
    }
    d.iter().map(|v| (v - min) / (max - min)).collect()
}

pub fn fuse_score(p: f64, d_std: f64, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(alpha * (1.0 - p) + (1.0 - alpha) * d_std)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::config(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// The eleven candidate weights `0, 0.1, …, 1.0`.
pub fn alpha_grid() -> impl Iterator<Item = f64> {
    (0..=10).map(|i| i as f64 / 10.0)
}

/// Published per-type weights for the two multi-task variants on the DCASE
/// machine types.
pub fn table_alpha(variant: LossVariant, machine_type: &str) -> Option<f64> {
    let row = match variant {
        LossVariant::BceDdcsad => [0.1, 1.0, 1.0, 0.1, 0.0, 1.0],
        LossVariant::BceDsad => [0.1, 0.2, 0.0, 0.0, 0.0, 0.0],
        _ => return None,
    };
    let col = ["fan", "pump", "slider", "ToyCar", "ToyConveyor", "valve"]
        .iter()
        .position(|t| *t == machine_type)?;
    Some(row[col])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaPolicy {
    /// BCE → 1, pure metric losses → 0, multi-task → table entry for known
    /// machine types, otherwise the validation grid.
    Auto,
    /// Use `ScoringConfig::alpha` as given.
    Fixed,
    /// Maximize validation AUC over [`alpha_grid`].
    Grid,
    /// Table entry; an error for machine types without one.
    Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub alpha_policy: AlphaPolicy,
    pub alpha: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            alpha_policy: AlphaPolicy::Auto,
            alpha: 1.0,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)
    }
}

/// How α should be obtained for a run, before any validation data is seen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaChoice {
    Known(f64),
    SearchGrid,
}

pub fn resolve_alpha(
    config: &ScoringConfig,
    variant: LossVariant,
    machine_type: &str,
) -> Result<AlphaChoice> {
    Ok(match config.alpha_policy {
        AlphaPolicy::Fixed => {
            check_alpha(config.alpha)?;
            AlphaChoice::Known(config.alpha)
        }
        AlphaPolicy::Grid => AlphaChoice::SearchGrid,
        AlphaPolicy::Table => AlphaChoice::Known(table_alpha(variant, machine_type).ok_or_else(
            || {
                Error::config(format!(
                    "no tabulated alpha for variant {} and machine type {machine_type}",
                    variant.name()
                ))
            },
        )?),
        AlphaPolicy::Auto => match variant {
            LossVariant::Bce => AlphaChoice::Known(1.0),
            LossVariant::Dsad | LossVariant::Ddcsad => AlphaChoice::Known(0.0),
            _ => match table_alpha(variant, machine_type) {
                Some(a) => AlphaChoice::Known(a),
                None => AlphaChoice::SearchGrid,
            },
        },
    })
}

/// Splits fused scores by role into (normal, anomalous) lists.
fn split_by_role(s: &[f64], roles: &[Role]) -> (Vec<f64>, Vec<f64>) {
    let mut normal = Vec::new();
    let mut anomalous = Vec::new();
    for (&v, &r) in s.iter().zip(roles) {
        match r {
            Role::Anomalous => anomalous.push(v),
            _ => normal.push(v),
        }
    }
    (normal, anomalous)
}

/// Grid α maximizing AUC on a scored split; ties go to the smaller α.
/// Returns `(α, auc)`.
pub fn select_alpha(p: &[f64], d_std: &[f64], roles: &[Role]) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for alpha in alpha_grid() {
        let s: Vec<f64> = p
            .iter()
            .zip(d_std)
            .map(|(&p, &d)| fuse_score(p, d, alpha))
            .collect::<Result<_>>()?;
        let (n, a) = split_by_role(&s, roles);
        let auc = metrics::auc(&n, &a)?;
        if best.map_or(true, |(_, b)| auc > b) {
            best = Some((alpha, auc));
        }
    }
    Ok(best.expect("grid is non-empty"))
}

/// Identity and role of a scored clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipKey {
    pub clip_id: String,
    pub machine_type: String,
    pub machine_id: u32,
    pub role: Role,
}

/// Per-clip rows plus the AUC summary of one scored split.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreReport {
    pub digest: String,
    pub split: String,
    pub alpha: f64,
    pub rows: Vec<ClipScore>,
    /// AUC over all rows together.
    pub pooled: EvalOutcome,
    /// AUC per `(machine_type, machine_id)`, for IDs that have both classes.
    pub per_id: Vec<((String, u32), EvalOutcome)>,
}

impl ScoreReport {
    /// Standardizes `d` over the whole set, fuses with `alpha`, and evaluates.
    pub fn build(
        keys: Vec<ClipKey>,
        raw: &[(f64, f64)],
        alpha: f64,
        split: &str,
        digest: &str,
    ) -> Result<Self> {
        if keys.len() != raw.len() || keys.is_empty() {
            return Err(Error::contract("score report needs one (p, d) pair per clip"));
        }
        let d: Vec<f64> = raw.iter().map(|r| r.1).collect();
        let d_std = standardize_distances(&d);
        let mut rows = Vec::with_capacity(keys.len());
        for ((k, &(p, d)), ds) in keys.into_iter().zip(raw).zip(d_std) {
            rows.push(ClipScore {
                clip_id: k.clip_id,
                machine_type: k.machine_type,
                machine_id: k.machine_id,
                role: k.role,
                p,
                d,
                d_std: ds,
                s: fuse_score(p, ds, alpha)?,
            });
        }
        let s: Vec<f64> = rows.iter().map(|r| r.s).collect();
        let roles: Vec<Role> = rows.iter().map(|r| r.role).collect();
        let (n, a) = split_by_role(&s, &roles);
        let pooled = EvalOutcome::from_scores(&n, &a)?;
        let mut groups: BTreeMap<(String, u32), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for r in &rows {
            let e = groups
                .entry((r.machine_type.clone(), r.machine_id))
                .or_default();
            if r.role == Role::Anomalous {
                e.1.push(r.s);
            } else {
                e.0.push(r.s);
            }
        }
        let per_id = groups
            .into_iter()
            .filter(|(_, (n, a))| !n.is_empty() && !a.is_empty())
            .map(|(k, (n, a))| Ok((k, EvalOutcome::from_scores(&n, &a)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            digest: digest.to_string(),
            split: split.to_string(),
            alpha,
            rows,
            pooled,
            per_id,
        })
    }

    pub fn mean_id_auc(&self) -> Option<f64> {
        let outcomes: Vec<EvalOutcome> = self.per_id.iter().map(|(_, o)| *o).collect();
        metrics::mean_auc(&outcomes)
    }

    /// Comma-separated rows followed by a `#`-prefixed summary block.
    pub fn to_text(&self) -> String {
        let mut out = String::from("clip_id,machine_type,machine_id,role,p,d,d_std,s\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.clip_id,
                r.machine_type,
                r.machine_id,
                r.role.as_str(),
                r.p,
                r.d,
                r.d_std,
                r.s
            );
        }
        let o = &self.pooled;
        let _ = writeln!(out, "# digest={}", self.digest);
        let _ = writeln!(out, "# split={} alpha={}", self.split, self.alpha);
        let _ = writeln!(
            out,
            "# auc={} ci_low={} ci_high={} n_normal={} n_anomalous={}",
            o.auc, o.ci_low, o.ci_high, o.n_normal, o.n_anomalous
        );
        for ((t, id), o) in &self.per_id {
            let _ = writeln!(
                out,
                "# id={t}:{id} auc={} ci_low={} ci_high={} n_normal={} n_anomalous={}",
                o.auc, o.ci_low, o.ci_high, o.n_normal, o.n_anomalous
            );
        }
        if let Some(m) = self.mean_id_auc() {
            let _ = writeln!(out, "# mean_id_auc={m}");
        }
        out
    }
}
