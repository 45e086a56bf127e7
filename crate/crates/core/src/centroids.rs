//! The normal-class centroid `c_p` and the outlier-class centroid `c_n`.
//!
//! Both are plain means of per-clip embeddings under the current parameters.
//! They are recomputed at epoch boundaries and never receive gradients.

use serde::{Deserialize, Serialize};

use crate::encoder::{ModelParams, PooledClip};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidPair {
    pub c_p: Vec<f64>,
    pub c_n: Vec<f64>,
    /// Epoch index at which the pair was computed (0 = initialization).
    pub epoch_computed: usize,
    /// Number of (normal, outlier-or-anomalous) clips averaged.
    pub member_counts: (usize, usize),
}

impl CentroidPair {
    /// Builds the pair from per-clip embeddings of both classes.
    pub fn from_embeddings(
        normal: &[Vec<f64>],
        negative: &[Vec<f64>],
        epoch_computed: usize,
    ) -> Result<Self> {
        let c_p = mean_vector(normal).ok_or_else(|| {
            Error::config("cannot compute c_p: no normal training clips")
        })?;
        let c_n = mean_vector(negative).ok_or_else(|| {
            Error::config("cannot compute c_n: no outlier or anomalous training clips")
        })?;
        let pair = Self {
            c_p,
            c_n,
            epoch_computed,
            member_counts: (normal.len(), negative.len()),
        };
        pair.check()?;
        Ok(pair)
    }

    pub fn dim(&self) -> usize {
        self.c_p.len()
    }

    pub fn check(&self) -> Result<()> {
        if self.c_p.len() != self.c_n.len() || self.c_p.is_empty() {
            return Err(Error::contract(format!(
                "centroid dimensions differ or are empty: {} vs {}",
                self.c_p.len(),
                self.c_n.len()
            )));
        }
        if !self.c_p.iter().chain(&self.c_n).all(|v| v.is_finite()) {
            return Err(Error::Domain("non-finite centroid".into()));
        }
        Ok(())
    }
}

/// Coordinate-wise arithmetic mean, summing in input order. `None` when empty.
pub fn mean_vector(vectors: &[Vec<f64>]) -> Option<Vec<f64>> {
    let first = vectors.first()?;
    let mut sum = vec![0.0; first.len()];
    for v in vectors {
        assert_eq!(v.len(), sum.len(), "embedding dimensions differ");
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x;
        }
    }
    let n = vectors.len() as f64;
    Some(sum.into_iter().map(|s| s / n).collect())
}

/// Per-clip embedding used for centroids: the mean over the clip's ten
/// inference segments.
pub fn clip_embeddings(params: &ModelParams, clips: &[&PooledClip]) -> Result<Vec<Vec<f64>>> {
    Ok(params
        .clip_outputs(clips)?
        .iter()
        .map(|o| o.mean_embedding())
        .collect())
}

/// Computes `c_p` over `normal` clips and `c_n` over `negative` clips (outliers
/// plus any injected anomalies, which share the −1 label).
pub fn compute_centroids(
    params: &ModelParams,
    normal: &[&PooledClip],
    negative: &[&PooledClip],
    epoch: usize,
) -> Result<CentroidPair> {
    if normal.is_empty() || negative.is_empty() {
        return Err(Error::config(format!(
            "centroids need both classes, got {} normal and {} negative clips",
            normal.len(),
            negative.len()
        )));
    }
    let zn = clip_embeddings(params, normal)?;
    let zo = clip_embeddings(params, negative)?;
    CentroidPair::from_embeddings(&zn, &zo, epoch)
}

/// Centroids from freshly initialized parameters.
pub fn init_centroids(
    params: &ModelParams,
    normal: &[&PooledClip],
    negative: &[&PooledClip],
) -> Result<CentroidPair> {
    compute_centroids(params, normal, negative, 0)
}

/// Epoch-boundary refresh with the current parameters.
pub fn recompute_centroids(
    params: &ModelParams,
    normal: &[&PooledClip],
    negative: &[&PooledClip],
    epoch: usize,
) -> Result<CentroidPair> {
    compute_centroids(params, normal, negative, epoch)
}
