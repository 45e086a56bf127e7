//! Mini-batch training: Adam with separate learning rates for the feature
//! extractor and the head, stepwise decay, centroid refreshes at epoch
//! boundaries, and warm-start fine-tuning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::centroids::{compute_centroids, CentroidPair};
use crate::checkpoint::Checkpoint;
use crate::dataset::{derive_seed, BatchComposer, TrainingTask};
use crate::encoder::{crops_to_input, init_params, EncoderConfig, ModelParams, ParamGroup, PooledClip};
use crate::error::{Error, Result};
use crate::frontend::SEGMENT_FRAMES;
use crate::losses::{combined_graph, LossConfig, LossVariant};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr_conv: f64,
    pub lr_head: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    /// Iterations of a fresh run.
    pub total_iterations: usize,
    /// Iterations of a warm-started run.
    pub finetune_iterations: usize,
    /// Iterations per centroid refresh.
    pub centroid_epoch: usize,
    pub batch_size: usize,
    /// Refresh the single centroid of the DSAD variants as well; by default it
    /// stays at its initial value.
    pub recompute_single_centroid: bool,
    pub adam: AdamConfig,
    #[serde(skip)]
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_conv: 1e-4,
            lr_head: 1e-3,
            decay_factor: 0.5,
            decay_every: 1000,
            total_iterations: 4000,
            finetune_iterations: 2000,
            centroid_epoch: 250,
            batch_size: 64,
            recompute_single_centroid: false,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let rates = [self.lr_conv, self.lr_head, self.decay_factor];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(Error::config("learning rates and decay factor must be finite and >= 0"));
        }
        if self.decay_every == 0 || self.centroid_epoch == 0 {
            return Err(Error::config("decay_every and centroid_epoch must be positive"));
        }
        for (name, n) in [
            ("total_iterations", self.total_iterations),
            ("finetune_iterations", self.finetune_iterations),
        ] {
            if n % self.centroid_epoch != 0 {
                return Err(Error::config(format!(
                    "{name} = {n} is not a multiple of centroid_epoch = {}",
                    self.centroid_epoch
                )));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::config("adam needs beta1, beta2 in [0, 1) and eps > 0"));
        }
        Ok(())
    }

    /// `base · decay_factor^⌊iteration / decay_every⌋`.
    pub fn lr_at(&self, base: f64, iteration: usize) -> f64 {
        base * self.decay_factor.powi((iteration / self.decay_every) as i32)
    }

    /// `(conv, head)` learning rates at `iteration`.
    pub fn rates_at(&self, iteration: usize) -> (f64, f64) {
        (
            self.lr_at(self.lr_conv, iteration),
            self.lr_at(self.lr_head, iteration),
        )
    }

    fn refreshes_centroids(&self) -> bool {
        match self.loss.variant {
            LossVariant::Bce => false,
            LossVariant::Dsad | LossVariant::BceDsad => self.recompute_single_centroid,
            LossVariant::Ddcsad | LossVariant::BceDdcsad => true,
        }
    }
}

/// First and second moment estimates for every parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .params
            .iter()
            .map(|p| vec![0.0; p.tensor.len()])
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update with the learning rate of each
/// parameter's group.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr_conv: f64,
    lr_head: f64,
    config: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.params.len() || state.m.len() != grads.len() {
        return Err(Error::contract("gradient list does not match the parameter registry"));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (i, p) in params.params.iter_mut().enumerate() {
        let g = &grads[i];
        if g.len() != p.tensor.len() {
            return Err(Error::contract(format!("gradient shape mismatch for {}", p.name)));
        }
        let lr = match p.group {
            ParamGroup::Conv => lr_conv,
            ParamGroup::Head => lr_head,
        };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gv), mv), vv) in p.tensor.data_mut().iter_mut().zip(g).zip(m).zip(v) {
            *mv = config.beta1 * *mv + (1.0 - config.beta1) * gv;
            *vv = config.beta2 * *vv + (1.0 - config.beta2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub loss: f64,
    pub lr_conv: f64,
    pub lr_head: f64,
}

/// Loss history as `iteration,loss,lr_conv,lr_head` rows and a digest line.
pub fn history_csv(rows: &[HistoryRow], digest: &str) -> String {
    let mut out = String::from("iteration,loss,lr_conv,lr_head\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.iteration, r.loss, r.lr_conv, r.lr_head));
    }
    out.push_str(&format!("# digest={digest}\n"));
    out
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Steps taken in this run.
    pub iteration: usize,
    /// Steps the run will take in total.
    pub total: usize,
    /// Steps taken before this run started (non-zero when warm-started).
    pub prior_iterations: usize,
    /// Epoch counter offset carried over from a warm start.
    pub epoch_offset: usize,
    pub params: ModelParams,
    pub adam: AdamState,
    pub centroids: Option<CentroidPair>,
    pub history: Vec<HistoryRow>,
    pub composer: BatchComposer,
    pub crop_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("train state serializes to JSON")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("train state: {e}")))
    }
}

/// A training run over one task. `clips` holds pooled inputs for every
/// corpus clip, indexed like the corpus.
pub struct Trainer<'a> {
    task: &'a TrainingTask,
    clips: &'a [PooledClip],
    config: TrainConfig,
    state: TrainState,
}

const TAG_INIT: u64 = 11;
const TAG_BATCH: u64 = 12;
const TAG_CROP: u64 = 13;

impl<'a> Trainer<'a> {
    /// A fresh run from randomly initialized parameters, or a fine-tuning run
    /// from `warm_start` (optimizer moments reset).
    pub fn new(
        task: &'a TrainingTask,
        clips: &'a [PooledClip],
        encoder: &EncoderConfig,
        config: &TrainConfig,
        warm_start: Option<&Checkpoint>,
    ) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let (params, total, prior, epoch_offset, start_centroids) = match warm_start {
            None => (
                init_params(encoder, derive_seed(seed, TAG_INIT, 0))?,
                config.total_iterations,
                0,
                0,
                None,
            ),
            Some(ck) => (
                ck.params.clone(),
                config.finetune_iterations,
                ck.iterations,
                ck.centroids.epoch_computed,
                Some(ck.centroids.clone()),
            ),
        };
        let composer = BatchComposer::new(task, config.batch_size, derive_seed(seed, TAG_BATCH, 0))?;
        let mut trainer = Self {
            task,
            clips,
            config: config.clone(),
            state: TrainState {
                iteration: 0,
                total,
                prior_iterations: prior,
                epoch_offset,
                adam: AdamState::new(&params),
                params,
                centroids: None,
                history: Vec::new(),
                composer,
                crop_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_CROP, 0)),
            },
        };
        trainer.check_clips()?;
        let variant = config.loss.variant;
        trainer.state.centroids = match (start_centroids, variant.uses_centroids()) {
            (_, false) => None,
            (Some(c), true) if !config.refreshes_centroids() => Some(c),
            _ => Some(trainer.centroids_now(epoch_offset)?),
        };
        Ok(trainer)
    }

    /// Continues a run from a serialized state.
    pub fn resume(
        task: &'a TrainingTask,
        clips: &'a [PooledClip],
        config: &TrainConfig,
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        let trainer = Self {
            task,
            clips,
            config: config.clone(),
            state,
        };
        trainer.check_clips()?;
        Ok(trainer)
    }

    fn check_clips(&self) -> Result<()> {
        let pool = self.state.params.config.input_pool;
        for &i in self.task.training_clips().iter() {
            let clip = self
                .clips
                .get(i)
                .ok_or_else(|| Error::contract(format!("clip index {i} outside the clip bank")))?;
            if clip.frame_count() < SEGMENT_FRAMES {
                return Err(Error::TooShort(format!(
                    "clip {i} has {} frames, crops need {SEGMENT_FRAMES}",
                    clip.frame_count()
                )));
            }
            if clip.input_pool() != pool {
                return Err(Error::contract("clip bank pooled for a different encoder"));
            }
        }
        Ok(())
    }

    fn centroids_now(&self, epoch: usize) -> Result<CentroidPair> {
        let normal: Vec<&PooledClip> = self.task.normal_set.iter().map(|&i| &self.clips[i]).collect();
        let negative: Vec<&PooledClip> = self
            .task
            .negative_set()
            .iter()
            .map(|&i| &self.clips[i])
            .collect();
        compute_centroids(&self.state.params, &normal, &negative, epoch).map_err(|e| match e {
            Error::Domain(reason) => Error::Divergence {
                iteration: self.state.prior_iterations + self.state.iteration,
                reason,
            },
            other => other,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.iteration >= self.state.total
    }

    /// One optimizer step, preceded by a centroid refresh when the step opens
    /// a new epoch. Returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let it = self.state.iteration;
        let epoch = self.config.centroid_epoch;
        if it > 0 && it % epoch == 0 && self.config.refreshes_centroids() {
            self.state.centroids = Some(self.centroids_now(self.state.epoch_offset + it / epoch)?);
        }
        let (lr_conv, lr_head) = self.config.rates_at(it);
        let batch = self.state.composer.next_batch();
        let crops: Vec<&[f64]> = batch
            .iter()
            .map(|e| {
                let clip = &self.clips[e.clip];
                let offset = self
                    .state
                    .crop_rng
                    .gen_range(0..=clip.frame_count() - SEGMENT_FRAMES);
                clip.crop(offset)
            })
            .collect();
        let meta: Vec<_> = batch.iter().map(|e| e.meta).collect();
        let input = crops_to_input(&crops, &self.state.params.config)?;

        let mut g = Graph::new();
        let vars = self.state.params.bind(&mut g, true);
        let x = g.constant(input);
        let out = self.state.params.forward_graph(&mut g, &vars, x)?;
        let loss = combined_graph(&mut g, &out, &meta, self.state.centroids.as_ref(), &self.config.loss)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::Divergence {
                iteration: self.state.prior_iterations + it,
                reason: format!("loss is {value}"),
            });
        }
        g.backward(loss)?;
        let grads: Vec<Vec<f64>> = vars
            .iter()
            .zip(&self.state.params.params)
            .map(|(&v, p)| match g.grad(v) {
                Some(t) => t.data().to_vec(),
                None => vec![0.0; p.tensor.len()],
            })
            .collect();
        if grads.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                iteration: self.state.prior_iterations + it,
                reason: "non-finite gradient".into(),
            });
        }
        adam_step(
            &mut self.state.params,
            &grads,
            &mut self.state.adam,
            lr_conv,
            lr_head,
            &self.config.adam,
        )?;
        self.state.history.push(HistoryRow {
            iteration: self.state.prior_iterations + it,
            loss: value,
            lr_conv,
            lr_head,
        });
        self.state.iteration += 1;
        Ok(value)
    }

    /// Steps until `iteration` (capped at the run length).
    pub fn run_until(&mut self, iteration: usize) -> Result<()> {
        while self.state.iteration < iteration.min(self.state.total) {
            self.step()?;
        }
        Ok(())
    }

    /// Runs to completion and packages the final parameters with centroids
    /// computed from them (or the frozen initial ones for DSAD variants).
    pub fn finish(mut self, digest: &str) -> Result<(Checkpoint, Vec<HistoryRow>)> {
        self.run_until(self.state.total)?;
        let epoch = self.state.epoch_offset + self.state.total / self.config.centroid_epoch;
        let centroids = match self.state.centroids.take() {
            Some(c) if !self.config.refreshes_centroids() => c,
            Some(c) if self.state.total == 0 => c,
            _ => self.centroids_now(epoch)?,
        };
        let ck = Checkpoint {
            params: self.state.params,
            centroids,
            loss: self.config.loss.clone(),
            iterations: self.state.prior_iterations + self.state.total,
            digest: digest.to_string(),
        };
        Ok((ck, self.state.history))
    }
}

/// Trains `task` to completion; see [`Trainer::new`].
pub fn train(
    task: &TrainingTask,
    clips: &[PooledClip],
    encoder: &EncoderConfig,
    config: &TrainConfig,
    warm_start: Option<&Checkpoint>,
    digest: &str,
) -> Result<(Checkpoint, Vec<HistoryRow>)> {
    Trainer::new(task, clips, encoder, config, warm_start)?.finish(digest)
}
