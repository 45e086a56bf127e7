//! The network: a small convolutional feature extractor, a global average
//! pooling aggregator producing the embedding `z`, and a linear + sigmoid
//! head producing the normal-class posterior `p`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::{segment_offsets, FeatureMatrix, MEL_BINS, NUM_SEGMENTS, SEGMENT_FRAMES};
use crate::tensor::{kernels, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Output channels of each conv block.
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    /// Embedding dimension `D`.
    pub embedding_dim: usize,
    /// Average-pool downsampling after every block (2×2 for images, 2 along
    /// time for band channels).
    pub pooling_between_blocks: bool,
    /// Fixed (time, frequency) mean-pooling applied to the input segment
    /// before the first block. `[1, 1]` feeds the full-resolution segment.
    pub input_pool: [usize; 2],
    pub layout: InputLayout,
}

/// How a pooled segment is presented to the first conv block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputLayout {
    /// One input channel holding the time × mel image; `k × k` kernels and
    /// 2×2 pooling.
    Image,
    /// Each mel band is an input channel over a time axis; `1 × k` kernels
    /// and pooling along time only. Global average pooling then cannot erase
    /// which band carried the energy.
    BandChannels,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    /// Three 3×3 blocks over the full-resolution time × mel image.
    pub fn image() -> Self {
        Self {
            conv_channels: vec![16, 32, 64],
            kernel_size: 3,
            embedding_dim: 64,
            pooling_between_blocks: true,
            input_pool: [1, 1],
            layout: InputLayout::Image,
        }
    }

    /// A profile small enough to train thousands of iterations per minute on
    /// a single CPU core.
    pub fn desk() -> Self {
        Self {
            conv_channels: vec![16],
            kernel_size: 3,
            embedding_dim: 16,
            pooling_between_blocks: true,
            input_pool: [8, 4],
            layout: InputLayout::BandChannels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim < 2 {
            return Err(Error::config("embedding_dim must be at least 2"));
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::config(
                "encoder needs at least one conv block with non-zero channels",
            ));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config("kernel_size must be odd"));
        }
        let [pt, pf] = self.input_pool;
        if pt == 0 || pf == 0 || SEGMENT_FRAMES % pt != 0 || MEL_BINS % pf != 0 {
            return Err(Error::config(format!(
                "input_pool {:?} must tile a {SEGMENT_FRAMES}x{MEL_BINS} segment",
                self.input_pool
            )));
        }
        let [_, mut h, mut w] = self.input_shape();
        let [ph, pw] = self.block_pool();
        if self.pooling_between_blocks {
            for _ in &self.conv_channels {
                if h % ph != 0 || w % pw != 0 {
                    return Err(Error::config(
                        "too many pooled conv blocks for the input resolution",
                    ));
                }
                h /= ph;
                w /= pw;
            }
        }
        Ok(())
    }

    /// `[C, H, W]` of one network input.
    pub fn input_shape(&self) -> [usize; 3] {
        let (t, f) = (SEGMENT_FRAMES / self.input_pool[0], MEL_BINS / self.input_pool[1]);
        match self.layout {
            InputLayout::Image => [1, t, f],
            InputLayout::BandChannels => [f, 1, t],
        }
    }

    fn kernel_shape(&self) -> [usize; 2] {
        match self.layout {
            InputLayout::Image => [self.kernel_size, self.kernel_size],
            InputLayout::BandChannels => [1, self.kernel_size],
        }
    }

    fn block_pool(&self) -> [usize; 2] {
        match self.layout {
            InputLayout::Image => [2, 2],
            InputLayout::BandChannels => [1, 2],
        }
    }
}

/// Which learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Feature extractor: conv blocks and the projection to `D`.
    Conv,
    /// The fully connected classification head.
    Head,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

/// All trainable weights plus the architecture they belong to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: EncoderConfig,
    pub params: Vec<NamedParam>,
}

/// Graph handles produced by one forward pass over a batch.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[N, D]` embeddings.
    pub z: Var,
    /// `[N]` pre-sigmoid head outputs.
    pub logit: Var,
    /// `[N]` posteriors.
    pub p: Var,
}

fn glorot(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(shape, data).expect("shape matches generated data")
}

/// Random initialization: `uniform(−a, a)`, `a = sqrt(6 / (fan_in + fan_out))`
/// for weights, zeros for biases.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [kh, kw] = config.kernel_shape();
    let mut params = Vec::new();
    let mut c_in = config.input_shape()[0];
    for (i, &c_out) in config.conv_channels.iter().enumerate() {
        params.push(NamedParam {
            name: format!("conv{i}.weight"),
            group: ParamGroup::Conv,
            tensor: glorot(&mut rng, vec![c_out, c_in, kh, kw], c_in * kh * kw, c_out * kh * kw),
        });
        params.push(NamedParam {
            name: format!("conv{i}.bias"),
            group: ParamGroup::Conv,
            tensor: Tensor::zeros([c_out]),
        });
        c_in = c_out;
    }
    let d = config.embedding_dim;
    params.push(NamedParam {
        name: "proj.weight".into(),
        group: ParamGroup::Conv,
        tensor: glorot(&mut rng, vec![c_in, d], c_in, d),
    });
    params.push(NamedParam {
        name: "proj.bias".into(),
        group: ParamGroup::Conv,
        tensor: Tensor::zeros([d]),
    });
    params.push(NamedParam {
        name: "head.weight".into(),
        group: ParamGroup::Head,
        tensor: glorot(&mut rng, vec![d, 1], d, 1),
    });
    params.push(NamedParam {
        name: "head.bias".into(),
        group: ParamGroup::Head,
        tensor: Tensor::zeros([1]),
    });
    Ok(ModelParams {
        config: config.clone(),
        params,
    })
}

impl ModelParams {
    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn get(&self, name: &str) -> Option<&NamedParam> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Places every parameter on `g`, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.param(p.tensor.clone())
                } else {
                    g.constant(p.tensor.clone())
                }
            })
            .collect()
    }

    /// Forward pass over a prepared input (see [`prepare_input`]).
    pub fn forward_graph(&self, g: &mut Graph, vars: &[Var], input: Var) -> Result<ForwardVars> {
        if vars.len() != self.params.len() {
            return Err(Error::contract("parameter bindings do not match the registry"));
        }
        let blocks = self.config.conv_channels.len();
        let mut x = input;
        let [ph, pw] = self.config.block_pool();
        for b in 0..blocks {
            x = g.conv2d(x, vars[2 * b], vars[2 * b + 1])?;
            x = g.relu(x);
            if self.config.pooling_between_blocks {
                x = g.avg_pool2d(x, ph, pw)?;
            }
        }
        // 1×1 conv followed by global pooling equals pooling followed by the
        // same affine map.
        let pooled = g.global_average_pool(x)?;
        let projected = g.matmul(pooled, vars[2 * blocks])?;
        let z = g.add(projected, vars[2 * blocks + 1])?;
        let head = g.matmul(z, vars[2 * blocks + 2])?;
        let head = g.add(head, vars[2 * blocks + 3])?;
        let n = g.shape(head)[0];
        let logit = g.reshape(head, [n])?;
        let p = g.sigmoid(logit);
        Ok(ForwardVars { z, logit, p })
    }

    /// Embeddings and posteriors for a batch of raw `256 × 128` segments,
    /// without recording gradients.
    pub fn embed_segments(&self, segments: &[&[f32]]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        self.embed_input(prepare_input(segments, &self.config)?)
    }

    /// Same as [`embed_segments`](Self::embed_segments) for crops taken from
    /// [`PooledClip`]s built with this model's `input_pool`.
    pub fn embed_crops(&self, crops: &[&[f64]]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        self.embed_input(crops_to_input(crops, &self.config)?)
    }

    /// Outputs for every inference segment of each clip, batched across
    /// clips. Per-segment results do not depend on how segments are batched.
    pub fn clip_outputs(&self, clips: &[&PooledClip]) -> Result<Vec<ClipOutputs>> {
        let mut crops = Vec::with_capacity(clips.len() * NUM_SEGMENTS);
        for clip in clips {
            if clip.input_pool != self.config.input_pool {
                return Err(Error::contract(format!(
                    "clip pooled with {:?}, model expects {:?}",
                    clip.input_pool, self.config.input_pool
                )));
            }
            for offset in segment_offsets(clip.frame_count)? {
                crops.push(clip.crop(offset));
            }
        }
        let mut z = Vec::with_capacity(crops.len());
        let mut p = Vec::with_capacity(crops.len());
        for chunk in crops.chunks(INFERENCE_BATCH) {
            let (cz, cp) = self.embed_crops(chunk)?;
            z.extend(cz);
            p.extend(cp);
        }
        let mut z = z.into_iter();
        let mut p = p.into_iter();
        Ok(clips
            .iter()
            .map(|_| ClipOutputs {
                z: z.by_ref().take(NUM_SEGMENTS).collect(),
                p: p.by_ref().take(NUM_SEGMENTS).collect(),
            })
            .collect())
    }

    fn embed_input(&self, input: Tensor) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(input);
        let out = self.forward_graph(&mut g, &vars, x)?;
        let d = self.embedding_dim();
        let z = g.value(out.z).data().chunks(d).map(|c| c.to_vec()).collect();
        Ok((z, g.value(out.p).data().to_vec()))
    }
}

/// Segments per inference forward pass.
const INFERENCE_BATCH: usize = 64;

/// Embeddings and posteriors of a clip's ten inference segments.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipOutputs {
    pub z: Vec<Vec<f64>>,
    pub p: Vec<f64>,
}

impl ClipOutputs {
    /// Arithmetic mean of the segment embeddings.
    pub fn mean_embedding(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.z[0].len()];
        for z in &self.z {
            for (m, v) in mean.iter_mut().zip(z) {
                *m += v;
            }
        }
        let n = self.z.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// Single-segment forward: `(z, p)` for one `256 × 128` feature block.
pub fn forward(segment: &Tensor, params: &ModelParams) -> Result<(Vec<f64>, f64)> {
    if segment.shape() != [SEGMENT_FRAMES, MEL_BINS] {
        return Err(Error::contract(format!(
            "encoder input must be {SEGMENT_FRAMES}x{MEL_BINS}, got {:?}",
            segment.shape()
        )));
    }
    let as_f32: Vec<f32> = segment.data().iter().map(|&v| v as f32).collect();
    let (mut z, p) = params.embed_segments(&[&as_f32])?;
    Ok((z.remove(0), p[0]))
}

/// Builds the network input for raw `256 × 128` segments, applying the
/// fixed input pooling and the configured layout.
pub fn prepare_input(segments: &[&[f32]], config: &EncoderConfig) -> Result<Tensor> {
    let [pt, pf] = config.input_pool;
    let seg_len = SEGMENT_FRAMES * MEL_BINS;
    if let Some(bad) = segments.iter().find(|s| s.len() != seg_len) {
        return Err(Error::contract(format!(
            "segment must hold {seg_len} values, got {}",
            bad.len()
        )));
    }
    let pooled: Vec<Vec<f64>> = segments
        .iter()
        .map(|seg| {
            let full: Vec<f64> = seg.iter().map(|&v| v as f64).collect();
            if pt == 1 && pf == 1 {
                full
            } else {
                kernels::avg_pool_forward(&full, 1, SEGMENT_FRAMES, MEL_BINS, pt, pf)
            }
        })
        .collect();
    let refs: Vec<&[f64]> = pooled.iter().map(|v| v.as_slice()).collect();
    crops_to_input(&refs, config)
}

/// Stacks pooled `(256/pt) × (128/pf)` crops (time-major) into an
/// `[N, C, H, W]` input in the configured layout.
pub fn crops_to_input(crops: &[&[f64]], config: &EncoderConfig) -> Result<Tensor> {
    let (t, f) = (SEGMENT_FRAMES / config.input_pool[0], MEL_BINS / config.input_pool[1]);
    let mut data = Vec::with_capacity(crops.len() * t * f);
    for c in crops {
        if c.len() != t * f {
            return Err(Error::contract(format!(
                "pooled crop must hold {} values, got {}",
                t * f,
                c.len()
            )));
        }
        match config.layout {
            InputLayout::Image => data.extend_from_slice(c),
            InputLayout::BandChannels => {
                for band in 0..f {
                    data.extend((0..t).map(|frame| c[frame * f + band]));
                }
            }
        }
    }
    let [ch, h, w] = config.input_shape();
    Tensor::new([crops.len(), ch, h, w], data)
}

/// A clip's features mean-pooled by `input_pool`, precomputed once per time
/// phase so that the pooled version of any 256-frame window is a contiguous
/// slice. Values equal what [`prepare_input`] produces for the same window.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledClip {
    frame_count: usize,
    input_pool: [usize; 2],
    phases: Vec<Vec<f64>>,
}

impl PooledClip {
    pub fn new(features: &FeatureMatrix, input_pool: [usize; 2]) -> Result<Self> {
        let [pt, pf] = input_pool;
        if pt == 0 || pf == 0 || SEGMENT_FRAMES % pt != 0 || MEL_BINS % pf != 0 {
            return Err(Error::config(format!("invalid input_pool {input_pool:?}")));
        }
        let t = features.frame_count;
        let w = MEL_BINS / pf;
        let scale = 1.0 / (pt * pf) as f64;
        let phases = (0..pt)
            .map(|r| {
                let rows = if t >= r { (t - r) / pt } else { 0 };
                let mut out = Vec::with_capacity(rows * w);
                for j in 0..rows {
                    if pt == 1 && pf == 1 {
                        out.extend(features.row(r + j).iter().map(|&v| v as f64));
                        continue;
                    }
                    for f in 0..w {
                        let mut acc = 0.0;
                        for dy in 0..pt {
                            let row = features.row(r + pt * j + dy);
                            for v in &row[f * pf..][..pf] {
                                acc += *v as f64;
                            }
                        }
                        out.push(acc * scale);
                    }
                }
                out
            })
            .collect();
        Ok(Self {
            frame_count: t,
            input_pool,
            phases,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn input_pool(&self) -> [usize; 2] {
        self.input_pool
    }

    /// Pooled window of the 256 frames starting at `offset`.
    pub fn crop(&self, offset: usize) -> &[f64] {
        let [pt, pf] = self.input_pool;
        let (h, w) = (SEGMENT_FRAMES / pt, MEL_BINS / pf);
        assert!(
            offset + SEGMENT_FRAMES <= self.frame_count,
            "crop at {offset} exceeds {} frames",
            self.frame_count
        );
        &self.phases[offset % pt][(offset / pt) * w..][..h * w]
    }
}
