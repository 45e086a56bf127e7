//! Binary cross-entropy, single- and double-centroid metric losses, and
//! their multi-task combination.
//!
//! Every loss comes in two forms: a plain evaluation over recorded
//! `(z, p)` values, and a graph form used for training that consumes head
//! logits so that `log p` and `log(1 − p)` stay finite when the sigmoid
//! saturates. The plain form doubles as an oracle for the graph form.
//!
//! Outlier items always carry the pseudo-anomalous label `−1`.

use serde::{Deserialize, Serialize};

use crate::centroids::CentroidPair;
use crate::encoder::ForwardVars;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Squared distances are clamped to at least this value before a negative
/// exponent is applied, bounding `‖z − c‖⁻²` by `1e6`.
pub const DIST_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    /// `+1`
    Normal,
    /// `−1`: anomalous or outlier
    Anomalous,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Normal => 1.0,
            Label::Anomalous => -1.0,
        }
    }

    pub fn from_value(y: i32) -> Result<Self> {
        match y {
            1 => Ok(Label::Normal),
            -1 => Ok(Label::Anomalous),
            other => Err(Error::Domain(format!("label must be +1 or -1, got {other}"))),
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Normal => Label::Anomalous,
            Label::Anomalous => Label::Normal,
        }
    }
}

/// `u(y)`: 1 for `y > 0`, 0 otherwise.
pub fn step_u(y: i32) -> Result<u8> {
    Ok(match Label::from_value(y)? {
        Label::Normal => 1,
        Label::Anomalous => 0,
    })
}

/// Which of the two training sets an item was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    /// The labeled normal/anomalous set (weighted by `η` in the metric losses).
    Labeled,
    /// The outlier set.
    Outlier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemMeta {
    pub label: Label,
    pub source: Source,
}

impl ItemMeta {
    pub fn normal() -> Self {
        Self {
            label: Label::Normal,
            source: Source::Labeled,
        }
    }

    pub fn anomalous() -> Self {
        Self {
            label: Label::Anomalous,
            source: Source::Labeled,
        }
    }

    pub fn outlier() -> Self {
        Self {
            label: Label::Anomalous,
            source: Source::Outlier,
        }
    }

    fn check(&self) -> Result<()> {
        if self.source == Source::Outlier && self.label != Label::Anomalous {
            return Err(Error::contract("outlier items must carry label -1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub z: Vec<f64>,
    pub p: f64,
    pub meta: ItemMeta,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct LabeledBatch {
    pub items: Vec<BatchItem>,
}

impl LabeledBatch {
    pub fn new(items: Vec<BatchItem>) -> Result<Self> {
        for it in &items {
            it.meta.check()?;
        }
        if let Some(first) = items.first() {
            if items.iter().any(|it| it.z.len() != first.z.len()) {
                return Err(Error::contract("embeddings in a batch must share a dimension"));
            }
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossVariant {
    #[serde(rename = "bce")]
    Bce,
    #[serde(rename = "dsad")]
    Dsad,
    #[serde(rename = "ddcsad")]
    Ddcsad,
    #[serde(rename = "bce+dsad")]
    BceDsad,
    #[serde(rename = "bce+ddcsad")]
    BceDdcsad,
}

impl LossVariant {
    pub const ALL: [LossVariant; 5] = [
        LossVariant::Bce,
        LossVariant::Dsad,
        LossVariant::Ddcsad,
        LossVariant::BceDsad,
        LossVariant::BceDdcsad,
    ];

    pub fn uses_bce(self) -> bool {
        matches!(self, Self::Bce | Self::BceDsad | Self::BceDdcsad)
    }

    pub fn uses_single_centroid(self) -> bool {
        matches!(self, Self::Dsad | Self::BceDsad)
    }

    pub fn uses_double_centroid(self) -> bool {
        matches!(self, Self::Ddcsad | Self::BceDdcsad)
    }

    pub fn uses_centroids(self) -> bool {
        self.uses_single_centroid() || self.uses_double_centroid()
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Bce => "bce",
            Self::Dsad => "dsad",
            Self::Ddcsad => "ddcsad",
            Self::BceDsad => "bce+dsad",
            Self::BceDdcsad => "bce+ddcsad",
        }
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config(format!("unknown loss variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub variant: LossVariant,
    /// Weight of the labeled set in the metric losses.
    #[serde(default = "default_eta")]
    pub eta: f64,
    /// Weight of the metric loss in the multi-task sum.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
}

fn default_eta() -> f64 {
    2.0
}

fn default_lambda() -> f64 {
    1.0
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: LossVariant::BceDdcsad,
            eta: default_eta(),
            lambda: default_lambda(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("eta must be positive, got {}", self.eta)));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

fn squared_distance(z: &[f64], c: &[f64]) -> Result<f64> {
    if z.len() != c.len() {
        return Err(Error::contract(format!(
            "embedding has {} components but centroid has {}",
            z.len(),
            c.len()
        )));
    }
    Ok(z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// `‖·‖^{2·sign}` given the squared norm, with the inverse branch clamped.
pub fn signed_power(sq_dist: f64, sign: f64) -> f64 {
    if sign > 0.0 {
        sq_dist
    } else {
        1.0 / sq_dist.max(DIST_FLOOR)
    }
}

fn item_weight(meta: ItemMeta, eta: f64) -> f64 {
    match meta.source {
        Source::Outlier => 1.0,
        Source::Labeled => eta,
    }
}

/// Mean binary cross-entropy with outliers as the negative class.
pub fn bce_loss(batch: &LabeledBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut total = 0.0;
    for it in &batch.items {
        if !(it.p > 0.0 && it.p < 1.0) {
            return Err(Error::Domain(format!("posterior {} outside (0, 1)", it.p)));
        }
        let u = step_u(it.meta.label.sign() as i32)? as f64;
        total += u * it.p.ln() + (1.0 - u) * (1.0 - it.p).ln();
    }
    Ok(-total / batch.len() as f64)
}

/// Single-centroid metric loss.
pub fn dsad_loss(batch: &LabeledBatch, c: &[f64], eta: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut total = 0.0;
    for it in &batch.items {
        let d = squared_distance(&it.z, c)?;
        total += item_weight(it.meta, eta) * signed_power(d, it.meta.label.sign());
    }
    Ok(total / batch.len() as f64)
}

/// Double-centroid metric loss: pull toward the own-class centroid, push
/// away from the other.
pub fn ddcsad_loss(batch: &LabeledBatch, centroids: &CentroidPair, eta: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut total = 0.0;
    for it in &batch.items {
        let s = it.meta.label.sign();
        let dp = squared_distance(&it.z, &centroids.c_p)?;
        let dn = squared_distance(&it.z, &centroids.c_n)?;
        total += item_weight(it.meta, eta) * (signed_power(dp, s) + signed_power(dn, -s));
    }
    Ok(total / batch.len() as f64)
}

/// The configured objective. DSAD variants use `c_p` as their single centroid.
pub fn combined_loss(
    batch: &LabeledBatch,
    centroids: Option<&CentroidPair>,
    config: &LossConfig,
) -> Result<f64> {
    let need = || {
        centroids.ok_or_else(|| {
            Error::config(format!(
                "loss variant {} needs centroids",
                config.variant.name()
            ))
        })
    };
    Ok(match config.variant {
        LossVariant::Bce => bce_loss(batch)?,
        LossVariant::Dsad => dsad_loss(batch, &need()?.c_p, config.eta)?,
        LossVariant::Ddcsad => ddcsad_loss(batch, need()?, config.eta)?,
        LossVariant::BceDsad => {
            bce_loss(batch)? + config.lambda * dsad_loss(batch, &need()?.c_p, config.eta)?
        }
        LossVariant::BceDdcsad => {
            bce_loss(batch)? + config.lambda * ddcsad_loss(batch, need()?, config.eta)?
        }
    })
}

// ---------------------------------------------------------------------------
// graph forms

fn mask(g: &mut Graph, meta: &[ItemMeta], f: impl Fn(ItemMeta) -> f64) -> Var {
    g.constant(Tensor::vector(meta.iter().map(|&m| f(m)).collect()))
}

/// BCE from `[N]` logits: `softplus(−l)` for label `+1`, `softplus(l)` for `−1`.
pub fn bce_graph(g: &mut Graph, logit: Var, meta: &[ItemMeta]) -> Result<Var> {
    if g.shape(logit) != [meta.len()] || meta.is_empty() {
        return Err(Error::contract("logits and batch metadata disagree in length"));
    }
    let n = meta.len() as f64;
    let pos = mask(g, meta, |m| if m.label == Label::Normal { 1.0 / n } else { 0.0 });
    let neg = mask(g, meta, |m| if m.label == Label::Normal { 0.0 } else { 1.0 / n });
    let neg_logit = g.scale(logit, -1.0);
    let log_p = g.softplus(neg_logit);
    let log_q = g.softplus(logit);
    let a = g.mul(log_p, pos)?;
    let b = g.mul(log_q, neg)?;
    let terms = g.add(a, b)?;
    Ok(g.sum(terms))
}

/// `Σ w_i ‖z_i − c‖^{2 s_i}` with `s_i = sign(i)`.
fn signed_distance_sum(
    g: &mut Graph,
    z: Var,
    centroid: &[f64],
    meta: &[ItemMeta],
    eta: f64,
    sign: impl Fn(ItemMeta) -> f64,
) -> Result<Var> {
    let n = meta.len() as f64;
    let c = g.constant(Tensor::vector(centroid.to_vec()));
    let diff = g.sub(z, c)?;
    let sq = g.square(diff);
    let d2 = g.sum_last_axis(sq)?;
    let pull_w = mask(g, meta, |m| {
        if sign(m) > 0.0 {
            item_weight(m, eta) / n
        } else {
            0.0
        }
    });
    let push_w = mask(g, meta, |m| {
        if sign(m) > 0.0 {
            0.0
        } else {
            item_weight(m, eta) / n
        }
    });
    let pull = g.mul(d2, pull_w)?;
    let clamped = g.clamp_min(d2, DIST_FLOOR);
    let inv = g.recip(clamped);
    let push = g.mul(inv, push_w)?;
    let both = g.add(pull, push)?;
    Ok(g.sum(both))
}

fn check_z(g: &Graph, z: Var, meta: &[ItemMeta], dim: usize) -> Result<()> {
    if g.shape(z) != [meta.len(), dim] || meta.is_empty() {
        return Err(Error::contract(format!(
            "embeddings {:?} do not match {} items of dimension {dim}",
            g.shape(z),
            meta.len()
        )));
    }
    Ok(())
}

pub fn dsad_graph(g: &mut Graph, z: Var, c: &[f64], meta: &[ItemMeta], eta: f64) -> Result<Var> {
    check_z(g, z, meta, c.len())?;
    signed_distance_sum(g, z, c, meta, eta, |m| m.label.sign())
}

pub fn ddcsad_graph(
    g: &mut Graph,
    z: Var,
    centroids: &CentroidPair,
    meta: &[ItemMeta],
    eta: f64,
) -> Result<Var> {
    check_z(g, z, meta, centroids.c_p.len())?;
    let to_p = signed_distance_sum(g, z, &centroids.c_p, meta, eta, |m| m.label.sign())?;
    let to_n = signed_distance_sum(g, z, &centroids.c_n, meta, eta, |m| -m.label.sign())?;
    g.add(to_p, to_n)
}

pub fn combined_graph(
    g: &mut Graph,
    out: &ForwardVars,
    meta: &[ItemMeta],
    centroids: Option<&CentroidPair>,
    config: &LossConfig,
) -> Result<Var> {
    for m in meta {
        m.check()?;
    }
    let need = || {
        centroids.ok_or_else(|| {
            Error::config(format!(
                "loss variant {} needs centroids",
                config.variant.name()
            ))
        })
    };
    let metric = match config.variant {
        LossVariant::Bce => None,
        LossVariant::Dsad | LossVariant::BceDsad => {
            Some(dsad_graph(g, out.z, &need()?.c_p, meta, config.eta)?)
        }
        LossVariant::Ddcsad | LossVariant::BceDdcsad => {
            Some(ddcsad_graph(g, out.z, need()?, meta, config.eta)?)
        }
    };
    let bce = if config.variant.uses_bce() {
        Some(bce_graph(g, out.logit, meta)?)
    } else {
        None
    };
    match (bce, metric) {
        (Some(b), None) => Ok(b),
        (None, Some(m)) => Ok(m),
        (Some(b), Some(m)) => {
            let weighted = g.scale(m, config.lambda);
            g.add(b, weighted)
        }
        (None, None) => unreachable!("every variant has at least one term"),
    }
}
