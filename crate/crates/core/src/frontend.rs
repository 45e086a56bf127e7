//! Waveform normalization, STFT, log-mel features and inference segmentation.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 1024;
pub const HOP: usize = 512;
pub const N_BINS: usize = WINDOW / 2 + 1;
pub const MEL_BINS: usize = 128;
pub const SEGMENT_FRAMES: usize = 256;
pub const NUM_SEGMENTS: usize = 10;
pub const LOG_FLOOR: f64 = 1e-10;

/// Minimum usable standard deviation for amplitude normalization.
pub const MIN_STD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Normal,
    Anomalous,
    Outlier,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Normal => "normal",
            Role::Anomalous => "anomalous",
            Role::Outlier => "outlier",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Role::Normal),
            "anomalous" => Ok(Role::Anomalous),
            "outlier" => Ok(Role::Outlier),
            other => Err(Error::Format(format!("unknown role {other:?}"))),
        }
    }
}

/// A labeled mono waveform.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub clip_id: String,
    pub machine_type: String,
    pub machine_id: u32,
    pub role: Role,
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

/// Amplitude statistics of a training corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

/// Streaming mean/variance accumulator (pairwise-merged per clip).
#[derive(Clone, Copy, Debug, Default)]
pub struct MomentAccumulator {
    count: f64,
    mean: f64,
    m2: f64,
}

impl MomentAccumulator {
    pub fn push_clip(&mut self, samples: &[f64]) {
        if samples.is_empty() {
            return;
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let m2 = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
        let total = self.count + n;
        let delta = mean - self.mean;
        self.mean += delta * n / total;
        self.m2 += m2 + delta * delta * self.count * n / total;
        self.count = total;
    }

    pub fn count(&self) -> usize {
        self.count as usize
    }

    /// Population statistics; errors when the corpus is empty or silent.
    pub fn finish(&self) -> Result<NormStats> {
        if self.count == 0.0 {
            return Err(Error::DegenerateCorpus("no samples to normalize with".into()));
        }
        let stats = NormStats {
            mean: self.mean,
            std: (self.m2 / self.count).sqrt(),
        };
        if stats.std < MIN_STD {
            return Err(Error::DegenerateCorpus(format!(
                "amplitude std {} is below {MIN_STD}",
                stats.std
            )));
        }
        Ok(stats)
    }
}

/// `(samples − mean) / std`, metadata untouched.
pub fn normalize_waveform(clip: &AudioClip, stats: NormStats) -> Result<AudioClip> {
    if !(stats.std >= MIN_STD) {
        return Err(Error::DegenerateCorpus(format!(
            "amplitude std {} is below {MIN_STD}",
            stats.std
        )));
    }
    let inv = 1.0 / stats.std;
    Ok(AudioClip {
        samples: clip.samples.iter().map(|x| (x - stats.mean) * inv).collect(),
        ..clip.clone()
    })
}

/// Number of full frames under no-padding framing.
pub fn frame_count(len: usize) -> Result<usize> {
    if len < WINDOW {
        return Err(Error::TooShort(format!(
            "{len} samples is shorter than one {WINDOW}-sample window"
        )));
    }
    Ok(1 + (len - WINDOW) / HOP)
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Complex short-time spectrum, `frames × N_BINS`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub frames: usize,
    pub data: Vec<Complex<f64>>,
}

impl Spectrogram {
    pub fn frame(&self, t: usize) -> &[Complex<f64>] {
        &self.data[t * N_BINS..][..N_BINS]
    }
}

/// Hann-windowed 1024-point STFT with hop 512; trailing partial frames are dropped.
pub fn compute_stft(clip: &AudioClip) -> Result<Spectrogram> {
    let frames = frame_count(clip.samples.len())?;
    let fft = FftPlanner::new().plan_fft_forward(WINDOW);
    let window = hann_window(WINDOW);
    let mut buf = vec![Complex::new(0.0, 0.0); WINDOW];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = Vec::with_capacity(frames * N_BINS);
    for t in 0..frames {
        let chunk = &clip.samples[t * HOP..][..WINDOW];
        for ((b, x), w) in buf.iter_mut().zip(chunk).zip(&window) {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend_from_slice(&buf[..N_BINS]);
    }
    Ok(Spectrogram { frames, data })
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters over the one-sided FFT grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    /// `n_mels × n_bins`, row-major.
    pub weights: Vec<f64>,
    /// Center frequency of each filter in Hz.
    pub centers: Vec<f64>,
    /// Lower and upper edge (Hz) of the whole bank.
    pub edges: (f64, f64),
    spans: Vec<(usize, usize)>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..][..self.n_bins]
    }

    /// Projects one power spectrum frame onto the mel bands.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (m, o) in out.iter_mut().enumerate() {
            let (lo, hi) = self.spans[m];
            let row = &self.row(m)[lo..hi];
            *o = row.iter().zip(&power[lo..hi]).map(|(w, p)| w * p).sum();
        }
    }
}

pub fn build_mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
) -> Result<MelFilterbank> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(0.0 <= f_min && f_min < f_max && f_max <= nyquist) {
        return Err(Error::config(format!(
            "mel range must satisfy 0 <= f_min < f_max <= {nyquist}, got [{f_min}, {f_max}]"
        )));
    }
    if n_mels == 0 || n_fft < 2 {
        return Err(Error::config("n_mels and n_fft must be positive"));
    }
    let n_bins = n_fft / 2 + 1;
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let (mel_lo, mel_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let points: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut weights = vec![0.0; n_mels * n_bins];
    let mut spans = Vec::with_capacity(n_mels);
    for m in 0..n_mels {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        let row = &mut weights[m * n_bins..][..n_bins];
        let mut lo = n_bins;
        let mut hi = 0;
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let rising = (f - left) / (center - left);
            let falling = (right - f) / (right - center);
            *w = rising.min(falling).max(0.0);
            if *w > 0.0 {
                lo = lo.min(k);
                hi = k + 1;
            }
        }
        if hi == 0 {
            return Err(Error::config(format!(
                "mel filter {m} ({left:.1}-{right:.1} Hz) covers no FFT bin; \
                 too many mel bands for a {n_fft}-point grid"
            )));
        }
        spans.push((lo, hi));
    }
    Ok(MelFilterbank {
        n_mels,
        n_bins,
        weights,
        centers: points[1..=n_mels].to_vec(),
        edges: (points[0], points[n_mels + 1]),
        spans,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    pub f_min: f64,
    pub f_max: f64,
    pub log_floor: f64,
    /// Scope of the amplitude statistics.
    pub norm_scope: NormScope,
    /// Shift and scale log-mel values by the mean and standard deviation of
    /// all training-split values.
    pub standardize: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormScope {
    /// One set of statistics per (machine type, machine id).
    PerId,
    /// One set per machine type.
    PerType,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            f_min: 50.0,
            f_max: 8000.0,
            log_floor: LOG_FLOOR,
            norm_scope: NormScope::PerId,
            standardize: true,
        }
    }
}

/// A `T × 128` log-mel matrix, row-major, stored in single precision.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frame_count: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(frame_count: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != frame_count * MEL_BINS {
            return Err(Error::contract(format!(
                "{frame_count} frames need {} values, got {}",
                frame_count * MEL_BINS,
                values.len()
            )));
        }
        Ok(Self {
            frame_count,
            values,
        })
    }

    pub fn mel_bins(&self) -> usize {
        MEL_BINS
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.values[t * MEL_BINS..][..MEL_BINS]
    }

    /// `SEGMENT_FRAMES` consecutive frames starting at `offset`.
    pub fn window(&self, offset: usize) -> &[f32] {
        &self.values[offset * MEL_BINS..][..SEGMENT_FRAMES * MEL_BINS]
    }

    /// Writes the flat cache format: `T`, `128` as little-endian u32, then
    /// row-major little-endian f32 values.
    pub fn write_cache(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.frame_count as u32).to_le_bytes())?;
        w.write_all(&(MEL_BINS as u32).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_cache(r: &mut impl Read) -> Result<Self> {
        let mut header = [0u8; 8];
        r.read_exact(&mut header)
            .map_err(|e| Error::Format(format!("feature cache header: {e}")))?;
        let frames = u32::from_le_bytes(header[..4].try_into().unwrap()) as usize;
        let bins = u32::from_le_bytes(header[4..].try_into().unwrap()) as usize;
        if bins != MEL_BINS {
            return Err(Error::Format(format!(
                "feature cache has {bins} mel bins, expected {MEL_BINS}"
            )));
        }
        let mut raw = vec![0u8; frames * bins * 4];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("feature cache body: {e}")))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(frames, values)
    }
}

/// Reusable STFT + mel pipeline.
pub struct LogMelExtractor {
    config: FrontendConfig,
    filterbank: MelFilterbank,
}

impl LogMelExtractor {
    pub fn new(config: FrontendConfig) -> Result<Self> {
        let filterbank =
            build_mel_filterbank(MEL_BINS, WINDOW, SAMPLE_RATE, config.f_min, config.f_max)?;
        if !(config.log_floor > 0.0) {
            return Err(Error::config("log_floor must be positive"));
        }
        Ok(Self { config, filterbank })
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// `log(max(mel · |STFT|², floor))` for an already-normalized clip.
    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        let spec = compute_stft(clip)?;
        let mut power = vec![0.0; N_BINS];
        let mut mel = vec![0.0; MEL_BINS];
        let mut values = Vec::with_capacity(spec.frames * MEL_BINS);
        for t in 0..spec.frames {
            for (p, c) in power.iter_mut().zip(spec.frame(t)) {
                *p = c.norm_sqr();
            }
            self.filterbank.apply(&power, &mut mel);
            values.extend(
                mel.iter()
                    .map(|&e| e.max(self.config.log_floor).ln() as f32),
            );
        }
        FeatureMatrix::new(spec.frames, values)
    }
}

/// Log-mel features with the default frontend configuration.
pub fn extract_log_mel(clip: &AudioClip) -> Result<FeatureMatrix> {
    LogMelExtractor::new(FrontendConfig::default())?.extract(clip)
}

/// The ten evenly spaced, possibly overlapping 256-frame inference windows.
#[derive(Clone, Copy, Debug)]
pub struct SegmentSet<'a> {
    pub features: &'a FeatureMatrix,
    pub offsets: [usize; NUM_SEGMENTS],
}

impl<'a> SegmentSet<'a> {
    pub fn segment(&self, k: usize) -> &'a [f32] {
        self.features.window(self.offsets[k])
    }

    pub fn iter(&self) -> impl Iterator<Item = &'a [f32]> + '_ {
        self.offsets.iter().map(|&o| self.features.window(o))
    }
}

/// `round(k · (T − 256) / 9)` for `k = 0..9`.
pub fn segment_offsets(frame_count: usize) -> Result<[usize; NUM_SEGMENTS]> {
    if frame_count < SEGMENT_FRAMES {
        return Err(Error::TooShort(format!(
            "{frame_count} frames cannot hold a {SEGMENT_FRAMES}-frame segment"
        )));
    }
    let span = frame_count - SEGMENT_FRAMES;
    let steps = NUM_SEGMENTS - 1;
    let mut offsets = [0; NUM_SEGMENTS];
    for (k, o) in offsets.iter_mut().enumerate() {
        // integer round-half-up of k * span / steps
        *o = (2 * k * span + steps) / (2 * steps);
    }
    Ok(offsets)
}

pub fn make_segments(features: &FeatureMatrix) -> Result<SegmentSet<'_>> {
    Ok(SegmentSet {
        features,
        offsets: segment_offsets(features.frame_count)?,
    })
}

/// Reads a 16-bit PCM mono 16 kHz WAV file.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1
        || spec.sample_rate != SAMPLE_RATE
        || spec.bits_per_sample != 16
        || spec.sample_format != hound::SampleFormat::Int
    {
        return Err(Error::Format(format!(
            "{}: expected 16-bit PCM mono at {SAMPLE_RATE} Hz, got {spec:?}",
            path.display()
        )));
    }
    reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0).map_err(wav_err))
        .collect()
}

/// Writes samples in `[-1, 1]` as 16-bit PCM mono, clipping out-of-range values.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let wav_err = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in samples {
        let v = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}
