//! Corpora, training tasks and mini-batch composition.
//!
//! A corpus is a list of clips, each tagged with machine type, machine id,
//! role (normal or anomalous) and split. Clips are either synthesized on
//! demand from a [`CorpusSpec`] or read from a DCASE-style directory tree.
//! A [`TrainingTask`] picks one target id: its training normals become the
//! labeled `+1` set, every other id's training normals become outliers, and
//! a budget of the target's test anomalies can be moved into training.

use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::PooledClip;
use crate::error::{Error, Result};
use crate::frontend::{
    normalize_waveform, read_wav, AudioClip, FeatureMatrix, FrontendConfig, LogMelExtractor,
    MomentAccumulator, NormScope, NormStats, Role, MIN_STD, SAMPLE_RATE,
};
use crate::losses::ItemMeta;

/// Highest frequency any synthesized component may reach.
const MAX_COMPONENT_HZ: f64 = 7900.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MachineProfile {
    pub name: String,
    /// Range from which each id draws its fundamental frequency, in Hz.
    pub band_hz: [f64; 2],
    pub harmonics: usize,
    /// RMS of the colored background noise relative to the fundamental's amplitude.
    pub noise_floor: f64,
}

impl MachineProfile {
    fn validate(&self) -> Result<()> {
        if self.name.is_empty()
            || !self
                .name
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-')
        {
            return Err(Error::config(format!(
                "machine type name {:?} must be non-empty ASCII letters, digits or '-'",
                self.name
            )));
        }
        let [lo, hi] = self.band_hz;
        if !(20.0 <= lo && lo < hi) {
            return Err(Error::config(format!(
                "{}: band {:?} must satisfy 20 <= lo < hi",
                self.name, self.band_hz
            )));
        }
        if self.harmonics == 0 || self.harmonics as f64 * hi * 1.15 > MAX_COMPONENT_HZ {
            return Err(Error::config(format!(
                "{}: {} harmonics of {hi} Hz (plus a 15% shift) exceed {MAX_COMPONENT_HZ} Hz",
                self.name, self.harmonics
            )));
        }
        if !(self.noise_floor >= 0.0 && self.noise_floor.is_finite()) {
            return Err(Error::config(format!("{}: noise_floor must be >= 0", self.name)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyTransform {
    /// One harmonic moved by 5–15% up or down.
    FrequencyShift,
    /// A short decaying broadband burst.
    AddedTransient,
    /// Inter-harmonic components at half-integer multiples of the fundamental.
    HarmonicDistortion,
    /// Frequency shift and transient together.
    ShiftAndTransient,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub machine_types: Vec<MachineProfile>,
    pub ids_per_type: u32,
    /// Training-split normals per id.
    pub normal_clips_per_id: usize,
    /// Test-split normals per id.
    pub test_normal_clips_per_id: usize,
    /// Test-split anomalies per id.
    pub anomaly_clips_per_id: usize,
    pub anomaly_transform: AnomalyTransform,
    /// Relative frequency shift of the moved harmonic, drawn per clip.
    pub shift_range: [f64; 2],
    /// Transient peak level relative to the clip's tonal RMS, drawn per clip.
    pub transient_level: [f64; 2],
    /// Inter-harmonic level relative to the neighbouring harmonic, drawn per clip.
    pub distortion_level: [f64; 2],
    /// Fraction of each id's test clips (per role) held out for α selection.
    pub validation_fraction: f64,
    pub clip_seconds: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        let profile = |name: &str, band_hz, harmonics, noise_floor| MachineProfile {
            name: name.into(),
            band_hz,
            harmonics,
            noise_floor,
        };
        Self {
            machine_types: vec![
                profile("hum", [100.0, 130.0], 12, 0.3),
                profile("whine", [340.0, 420.0], 8, 0.3),
                profile("buzz", [1000.0, 1250.0], 5, 0.3),
            ],
            ids_per_type: 4,
            normal_clips_per_id: 100,
            test_normal_clips_per_id: 80,
            anomaly_clips_per_id: 80,
            anomaly_transform: AnomalyTransform::HarmonicDistortion,
            shift_range: [0.05, 0.15],
            transient_level: [1.0, 3.0],
            distortion_level: [0.08, 0.25],
            validation_fraction: 0.2,
            clip_seconds: 10.0,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.machine_types.len() < 2 {
            return Err(Error::config(
                "at least 2 machine types are required: outliers are drawn from the other types",
            ));
        }
        if self.ids_per_type < 2 {
            return Err(Error::config(
                "at least 2 ids per type are required: outliers include the target type's other ids",
            ));
        }
        let mut names: Vec<&str> = self.machine_types.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.machine_types.len() {
            return Err(Error::config("machine type names must be unique"));
        }
        for p in &self.machine_types {
            p.validate()?;
        }
        if self.normal_clips_per_id == 0 || self.test_normal_clips_per_id == 0 {
            return Err(Error::config("every id needs training and test normals"));
        }
        if self.anomaly_clips_per_id == 0 {
            return Err(Error::config("every id needs test anomalies"));
        }
        let [s0, s1] = self.shift_range;
        if !(0.0 < s0 && s0 < s1 && s1 < 1.0) {
            return Err(Error::config("shift_range must satisfy 0 < lo < hi < 1"));
        }
        let [t0, t1] = self.transient_level;
        if !(0.0 <= t0 && t0 < t1 && t1.is_finite()) {
            return Err(Error::config("transient_level must satisfy 0 <= lo < hi"));
        }
        let [d0, d1] = self.distortion_level;
        if !(0.0 <= d0 && d0 < d1 && d1.is_finite()) {
            return Err(Error::config("distortion_level must satisfy 0 <= lo < hi"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("validation_fraction must lie in [0, 1)"));
        }
        if !(self.clip_seconds * SAMPLE_RATE as f64 >= 1024.0 && self.clip_seconds <= 60.0) {
            return Err(Error::config("clip_seconds must cover one window and at most 60 s"));
        }
        Ok(())
    }

    pub fn samples_per_clip(&self) -> usize {
        (self.clip_seconds * SAMPLE_RATE as f64).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Evaluation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Evaluation => "evaluation",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "evaluation" => Ok(Split::Evaluation),
            other => Err(Error::Format(format!("unknown split {other:?}"))),
        }
    }
}

/// Where a clip's waveform comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum ClipSource {
    Synthetic { seed: u64 },
    Wav(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipMeta {
    pub clip_id: String,
    pub machine_type: String,
    pub machine_id: u32,
    pub role: Role,
    pub split: Split,
    pub source: ClipSource,
}

impl ClipMeta {
    pub fn id_key(&self) -> (&str, u32) {
        (&self.machine_type, self.machine_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    /// `None` for corpora read from disk.
    pub spec: Option<CorpusSpec>,
    pub clips: Vec<ClipMeta>,
}

/// SplitMix64 finalizer, used to derive independent seeds from one base seed.
fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for stream `tag`, item `index`, under `base`.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    mix(mix(mix(base) ^ tag) ^ index)
}

const TAG_VOICE: u64 = 1;
const TAG_CLIP: u64 = 2;
const TAG_SPLIT: u64 = 3;

/// Lays out clip metadata and splits; waveforms are rendered on demand.
pub fn synthesize_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut clips = Vec::new();
    for (ti, profile) in spec.machine_types.iter().enumerate() {
        for id in 0..spec.ids_per_type {
            let id_index = (ti as u64) << 32 | id as u64;
            let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, TAG_SPLIT, id_index));
            let mut push = |role: Role, split: Split, label: &str, k: usize| {
                let clip_id = format!("{}_id{id:02}_{label}_{k:04}", profile.name);
                let seed = derive_seed(spec.seed, TAG_CLIP, mix(id_index) ^ mix(clips.len() as u64));
                clips.push(ClipMeta {
                    clip_id,
                    machine_type: profile.name.clone(),
                    machine_id: id,
                    role,
                    split,
                    source: ClipSource::Synthetic { seed },
                });
            };
            for k in 0..spec.normal_clips_per_id {
                push(Role::Normal, Split::Train, "train_normal", k);
            }
            for (role, count, label) in [
                (Role::Normal, spec.test_normal_clips_per_id, "test_normal"),
                (Role::Anomalous, spec.anomaly_clips_per_id, "test_anomaly"),
            ] {
                let n_val = (count as f64 * spec.validation_fraction).round() as usize;
                let mut order: Vec<usize> = (0..count).collect();
                order.shuffle(&mut split_rng);
                let mut is_val = vec![false; count];
                for &k in &order[..n_val] {
                    is_val[k] = true;
                }
                for (k, &val) in is_val.iter().enumerate() {
                    let split = if val { Split::Validation } else { Split::Evaluation };
                    push(role, split, label, k);
                }
            }
        }
    }
    Ok(Corpus {
        spec: Some(spec.clone()),
        clips,
    })
}

/// Fixed acoustic character of one (type, id).
#[derive(Clone, Debug, PartialEq)]
struct Voice {
    f0: f64,
    amps: Vec<f64>,
    noise_pole: f64,
    am_rate: f64,
    am_depth: f64,
}

fn voice(spec: &CorpusSpec, type_index: usize, id: u32) -> Voice {
    let profile = &spec.machine_types[type_index];
    // Noise color and modulation belong to the machine type; ids differ only
    // in their harmonic structure.
    let mut type_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, TAG_VOICE, (type_index as u64) << 32 | 0xFFFF_FFFF));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
        spec.seed,
        TAG_VOICE,
        (type_index as u64) << 32 | id as u64,
    ));
    let [lo, hi] = profile.band_hz;
    let slot = (id as f64 + 0.1 + 0.8 * rng.gen::<f64>()) / spec.ids_per_type as f64;
    let amps = (1..=profile.harmonics)
        .map(|h| (h as f64).powf(-0.7) * (0.6 * (2.0 * rng.gen::<f64>() - 1.0)).exp())
        .collect();
    Voice {
        f0: lo + (hi - lo) * slot,
        amps,
        noise_pole: type_rng.gen_range(0.3..0.9),
        am_rate: type_rng.gen_range(0.5..4.0),
        am_depth: type_rng.gen_range(0.05..0.2),
    }
}

/// Adds `amp · sin(2π f t + phase)` to `out` with a renormalized phasor.
fn add_sinusoid(out: &mut [f64], freq: f64, amp: f64, phase: f64) {
    let w = 2.0 * PI * freq / SAMPLE_RATE as f64;
    let (ws, wc) = w.sin_cos();
    let (mut s, mut c) = phase.sin_cos();
    for (i, o) in out.iter_mut().enumerate() {
        *o += amp * s;
        let (ns, nc) = (s * wc + c * ws, c * wc - s * ws);
        s = ns;
        c = nc;
        if i % 4096 == 4095 {
            let r = 1.0 / (s * s + c * c).sqrt();
            s *= r;
            c *= r;
        }
    }
}

/// Deterministically renders one synthetic clip.
pub fn render_synthetic(spec: &CorpusSpec, meta: &ClipMeta, seed: u64) -> Result<Vec<f64>> {
    let type_index = spec
        .machine_types
        .iter()
        .position(|p| p.name == meta.machine_type)
        .ok_or_else(|| Error::contract(format!("unknown machine type {}", meta.machine_type)))?;
    let profile = &spec.machine_types[type_index];
    let v = voice(spec, type_index, meta.machine_id);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.samples_per_clip();
    let sr = SAMPLE_RATE as f64;

    let f0 = v.f0 * (1.0 + 0.005 * (2.0 * rng.gen::<f64>() - 1.0));
    let gain = 10f64.powf(rng.gen_range(-3.0..3.0) / 20.0);
    let amps: Vec<f64> = v
        .amps
        .iter()
        .map(|a| a * (0.1 * (2.0 * rng.gen::<f64>() - 1.0)).exp())
        .collect();
    let mut freqs: Vec<f64> = (1..=profile.harmonics).map(|h| h as f64 * f0).collect();
    let phases: Vec<f64> = (0..profile.harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let am_phase = rng.gen_range(0.0..2.0 * PI);

    let anomalous = meta.role == Role::Anomalous;
    let transform = spec.anomaly_transform;
    let shift = anomalous
        && matches!(transform, AnomalyTransform::FrequencyShift | AnomalyTransform::ShiftAndTransient);
    let transient = anomalous
        && matches!(transform, AnomalyTransform::AddedTransient | AnomalyTransform::ShiftAndTransient);
    let distortion = anomalous && transform == AnomalyTransform::HarmonicDistortion;

    if shift {
        let h = rng.gen_range(0..profile.harmonics);
        let delta = rng.gen_range(spec.shift_range[0]..spec.shift_range[1]) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        freqs[h] *= 1.0 + delta;
    }
    let mut extra = Vec::new();
    if distortion {
        let level = rng.gen_range(spec.distortion_level[0]..spec.distortion_level[1]);
        for h in 0..profile.harmonics {
            let f = (h as f64 + 1.5) * f0;
            if f < MAX_COMPONENT_HZ {
                extra.push((f, level * amps[h], rng.gen_range(0.0..2.0 * PI)));
            }
        }
    }

    let mut tonal = vec![0.0; n];
    for ((&f, &a), &ph) in freqs.iter().zip(&amps).zip(&phases) {
        add_sinusoid(&mut tonal, f, a, ph);
    }
    for &(f, a, ph) in &extra {
        add_sinusoid(&mut tonal, f, a, ph);
    }
    let mut envelope = vec![1.0; n];
    add_sinusoid(&mut envelope, v.am_rate, v.am_depth, am_phase);

    // Colored noise: uniform white noise through a one-pole low-pass, scaled
    // to the requested RMS relative to the fundamental.
    let p = v.noise_pole;
    let unit = ((1.0 - p) / (1.0 + p) / 3.0).sqrt();
    let noise_scale = profile.noise_floor * amps[0] / unit;
    let mut y = 0.0;
    let mut out: Vec<f64> = tonal
        .iter()
        .zip(&envelope)
        .map(|(t, e)| {
            let x: f64 = rng.gen_range(-1.0..1.0);
            y = p * y + (1.0 - p) * x;
            t * e + noise_scale * y
        })
        .collect();

    if transient {
        let tonal_rms = (amps.iter().map(|a| a * a).sum::<f64>() / 2.0).sqrt();
        let level = rng.gen_range(spec.transient_level[0]..spec.transient_level[1]) * tonal_rms * 3f64.sqrt();
        let dur = rng.gen_range(0.05..0.15);
        let start = (rng.gen_range(0.05..0.9) * n as f64) as usize;
        let tau = dur * sr / 3.0;
        let len = ((dur * sr) as usize).min(n - start);
        for (i, o) in out[start..start + len].iter_mut().enumerate() {
            let x: f64 = rng.gen_range(-1.0..1.0);
            *o += level * (-(i as f64) / tau).exp() * x;
        }
    }
    for o in &mut out {
        *o *= gain;
    }
    Ok(out)
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Raw (unnormalized) waveform of clip `index`.
    pub fn render(&self, index: usize) -> Result<AudioClip> {
        let meta = &self.clips[index];
        let samples = match &meta.source {
            ClipSource::Synthetic { seed } => {
                let spec = self
                    .spec
                    .as_ref()
                    .ok_or_else(|| Error::contract("synthetic clip without a corpus spec"))?;
                render_synthetic(spec, meta, *seed)?
            }
            ClipSource::Wav(path) => read_wav(path)?,
        };
        Ok(AudioClip {
            clip_id: meta.clip_id.clone(),
            machine_type: meta.machine_type.clone(),
            machine_id: meta.machine_id,
            role: meta.role,
            sample_rate: SAMPLE_RATE,
            samples,
        })
    }

    /// Machine types in first-appearance order.
    pub fn machine_types(&self) -> Vec<String> {
        let mut seen = Vec::<String>::new();
        for c in &self.clips {
            if !seen.contains(&c.machine_type) {
                seen.push(c.machine_type.clone());
            }
        }
        seen
    }

    /// All (type, id) pairs in first-appearance order.
    pub fn machine_ids(&self) -> Vec<(String, u32)> {
        let mut seen = Vec::<(String, u32)>::new();
        for c in &self.clips {
            let key = (c.machine_type.clone(), c.machine_id);
            if !seen.contains(&key) {
                seen.push(key);
            }
        }
        seen
    }

    /// `clip_id,machine_type,machine_id,role,split,seed,path` rows.
    pub fn manifest(&self) -> String {
        let mut out = String::from("clip_id,machine_type,machine_id,role,split,seed,path\n");
        for c in &self.clips {
            let (seed, path) = match &c.source {
                ClipSource::Synthetic { seed } => (seed.to_string(), String::new()),
                ClipSource::Wav(p) => (String::new(), p.display().to_string()),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{seed},{path}",
                c.clip_id,
                c.machine_type,
                c.machine_id,
                c.role.as_str(),
                c.split.as_str()
            );
        }
        out
    }

    /// Reads clip metadata back from [`manifest`](Self::manifest) text.
    pub fn parse_manifest(text: &str, spec: Option<CorpusSpec>) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("clip_id,machine_type,machine_id,role,split,seed,path") {
            return Err(Error::Format("manifest header mismatch".into()));
        }
        let mut clips = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.splitn(7, ',').collect();
            let bad = |what: &str| Error::Format(format!("manifest line {}: {what}", n + 2));
            if f.len() != 7 {
                return Err(bad("expected 7 fields"));
            }
            let source = if f[5].is_empty() {
                ClipSource::Wav(PathBuf::from(f[6]))
            } else {
                ClipSource::Synthetic {
                    seed: f[5].parse().map_err(|_| bad("bad seed"))?,
                }
            };
            clips.push(ClipMeta {
                clip_id: f[0].to_string(),
                machine_type: f[1].to_string(),
                machine_id: f[2].parse().map_err(|_| bad("bad machine id"))?,
                role: f[3].parse()?,
                split: f[4].parse()?,
                source,
            });
        }
        Ok(Self { spec, clips })
    }
}

/// Parses `<normal|anomaly>_id_XX_<rest>.wav` into role and id.
fn parse_dcase_name(name: &str) -> Option<(Role, u32)> {
    let stem = name.strip_suffix(".wav")?;
    let (role, rest) = if let Some(r) = stem.strip_prefix("normal_id_") {
        (Role::Normal, r)
    } else if let Some(r) = stem.strip_prefix("anomaly_id_") {
        (Role::Anomalous, r)
    } else {
        return None;
    };
    let id = rest.split('_').next()?.parse().ok()?;
    Some((role, id))
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    Ok(entries)
}

/// Reads a DCASE-style tree `<root>/<type>/<train|test>/<role>_id_XX_*.wav`.
///
/// Training files become the train split. Test files of each (id, role)
/// are split into validation and evaluation with a seeded shuffle.
pub fn ingest_dcase(root: &Path, validation_fraction: f64, seed: u64) -> Result<Corpus> {
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::config("validation_fraction must lie in [0, 1)"));
    }
    let mut clips = Vec::new();
    let mut tests: BTreeMap<(String, u32, Role), Vec<PathBuf>> = BTreeMap::new();
    for type_dir in sorted_dir(root)? {
        if !type_dir.is_dir() {
            continue;
        }
        let machine_type = type_dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Format(format!("bad directory name {}", type_dir.display())))?
            .to_string();
        for (sub, is_train) in [("train", true), ("test", false)] {
            let dir = type_dir.join(sub);
            if !dir.is_dir() {
                continue;
            }
            for file in sorted_dir(&dir)? {
                let Some((role, id)) = file
                    .file_name()
                    .and_then(|n| n.to_str())
                    .and_then(parse_dcase_name)
                else {
                    continue;
                };
                if is_train {
                    if role != Role::Normal {
                        continue;
                    }
                    let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
                    clips.push(ClipMeta {
                        clip_id: format!("{machine_type}_train_{stem}"),
                        machine_type: machine_type.clone(),
                        machine_id: id,
                        role,
                        split: Split::Train,
                        source: ClipSource::Wav(file),
                    });
                } else {
                    tests
                        .entry((machine_type.clone(), id, role))
                        .or_default()
                        .push(file);
                }
            }
        }
    }
    for (group, ((machine_type, id, role), files)) in tests.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, TAG_SPLIT, group as u64));
        let n_val = (files.len() as f64 * validation_fraction).round() as usize;
        let mut order: Vec<usize> = (0..files.len()).collect();
        order.shuffle(&mut rng);
        let mut is_val = vec![false; files.len()];
        for &k in &order[..n_val] {
            is_val[k] = true;
        }
        for (file, val) in files.into_iter().zip(is_val) {
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            clips.push(ClipMeta {
                clip_id: format!("{machine_type}_test_{stem}"),
                machine_type: machine_type.clone(),
                machine_id: id,
                role,
                split: if val { Split::Validation } else { Split::Evaluation },
                source: ClipSource::Wav(file),
            });
        }
    }
    if clips.is_empty() {
        return Err(Error::Format(format!("no DCASE-style wav files under {}", root.display())));
    }
    Ok(Corpus { spec: None, clips })
}

/// Log-mel features for every clip of a corpus, indexed like `corpus.clips`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub features: Vec<FeatureMatrix>,
    /// Amplitude statistics per normalization group.
    pub stats: BTreeMap<String, NormStats>,
    /// Log-mel `(mean, std)` removed from every value, when standardized.
    pub feature_scale: Option<(f64, f64)>,
}

fn norm_group(meta: &ClipMeta, scope: NormScope) -> String {
    match scope {
        NormScope::PerId => format!("{}:{}", meta.machine_type, meta.machine_id),
        NormScope::PerType => meta.machine_type.clone(),
    }
}

/// Normalizes every clip with its group's training-split statistics and
/// extracts log-mel features.
pub fn featurize(corpus: &Corpus, config: &FrontendConfig) -> Result<FeatureStore> {
    let mut acc: BTreeMap<String, MomentAccumulator> = BTreeMap::new();
    for (i, meta) in corpus.clips.iter().enumerate() {
        if meta.split == Split::Train {
            let clip = corpus.render(i)?;
            acc.entry(norm_group(meta, config.norm_scope))
                .or_default()
                .push_clip(&clip.samples);
        }
    }
    let stats: BTreeMap<String, NormStats> = acc
        .into_iter()
        .map(|(k, a)| Ok((k, a.finish()?)))
        .collect::<Result<_>>()?;
    let extractor = LogMelExtractor::new(config.clone())?;
    let mut features = Vec::with_capacity(corpus.len());
    for (i, meta) in corpus.clips.iter().enumerate() {
        let group = norm_group(meta, config.norm_scope);
        let s = stats.get(&group).ok_or_else(|| {
            Error::DegenerateCorpus(format!("no training clips to normalize group {group}"))
        })?;
        let clip = normalize_waveform(&corpus.render(i)?, *s)?;
        features.push(extractor.extract(&clip)?);
    }
    let feature_scale = if config.standardize {
        let scale = training_moments(corpus, &features)?;
        standardize_features(&mut features, scale);
        Some(scale)
    } else {
        None
    };
    Ok(FeatureStore {
        features,
        stats,
        feature_scale,
    })
}

/// Mean and standard deviation of every training-split log-mel value.
fn training_moments(corpus: &Corpus, features: &[FeatureMatrix]) -> Result<(f64, f64)> {
    let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
    for (meta, f) in corpus.clips.iter().zip(features) {
        if meta.split == Split::Train {
            for &v in &f.values {
                n += 1;
                sum += v as f64;
                sq += v as f64 * v as f64;
            }
        }
    }
    if n == 0 {
        return Err(Error::DegenerateCorpus("no training clips to standardize features".into()));
    }
    let mean = sum / n as f64;
    let std = (sq / n as f64 - mean * mean).max(0.0).sqrt();
    Ok((mean, std.max(MIN_STD)))
}

/// Applies `(v − mean) / std` to every value.
pub fn standardize_features(features: &mut [FeatureMatrix], (mean, std): (f64, f64)) {
    for f in features {
        for v in &mut f.values {
            *v = ((*v as f64 - mean) / std) as f32;
        }
    }
}

/// Pooled network inputs for every clip of a store.
pub fn pool_features(store: &FeatureStore, input_pool: [usize; 2]) -> Result<Vec<PooledClip>> {
    store
        .features
        .iter()
        .map(|f| PooledClip::new(f, input_pool))
        .collect()
}

/// Writes a feature list as a clip count followed by each matrix.
pub fn write_features(path: &Path, features: &[FeatureMatrix]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        w.write_all(&(features.len() as u64).to_le_bytes())?;
        for f in features {
            f.write_cache(&mut w)?;
        }
        w.flush()
    };
    body().map_err(|e| Error::io(path, e))
}

/// Reads what [`write_features`] wrote, checking the clip count.
pub fn read_features(path: &Path, expected: usize) -> Result<Vec<FeatureMatrix>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(file);
    let mut count = [0u8; 8];
    r.read_exact(&mut count).map_err(|e| Error::io(path, e))?;
    let n = u64::from_le_bytes(count) as usize;
    if n != expected {
        return Err(Error::Format(format!(
            "{} holds {n} clips, expected {expected}",
            path.display()
        )));
    }
    (0..n).map(|_| FeatureMatrix::read_cache(&mut r)).collect()
}

/// One target id's training sets and evaluation pools, as clip indices.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTask {
    pub target_type: String,
    pub target_id: u32,
    /// Target-id training normals (label `+1`).
    pub normal_set: Vec<usize>,
    /// Training normals of every other id (label `−1`).
    pub outlier_set: Vec<usize>,
    pub anomaly_budget: usize,
    /// Target-id test anomalies moved into training (label `−1`).
    pub injected_anomalies: Vec<usize>,
    pub validation: Vec<usize>,
    pub evaluation: Vec<usize>,
}

/// Maximum anomaly budget; the selection pool is drawn once at this size.
pub const MAX_BUDGET: usize = 64;

/// Builds the task for `(target_type, target_id)` with `k` injected anomalies.
///
/// Injected anomalies are the first `k` of a seeded permutation of the
/// target's validation and evaluation anomalies taken together, so budgets
/// built with the same seed are nested.
pub fn build_task(
    corpus: &Corpus,
    target_type: &str,
    target_id: u32,
    k: usize,
    seed: u64,
) -> Result<TrainingTask> {
    let is_target = |c: &ClipMeta| c.machine_type == target_type && c.machine_id == target_id;
    let normal_set: Vec<usize> = (0..corpus.len())
        .filter(|&i| {
            let c = &corpus.clips[i];
            is_target(c) && c.split == Split::Train && c.role == Role::Normal
        })
        .collect();
    if normal_set.is_empty() {
        return Err(Error::config(format!(
            "no training normals for target {target_type}:{target_id}"
        )));
    }
    let outlier_set: Vec<usize> = (0..corpus.len())
        .filter(|&i| {
            let c = &corpus.clips[i];
            !is_target(c) && c.split == Split::Train && c.role == Role::Normal
        })
        .collect();
    if outlier_set.is_empty() {
        return Err(Error::config("no outlier clips: the corpus has a single machine id"));
    }
    let mut pool: Vec<usize> = (0..corpus.len())
        .filter(|&i| {
            let c = &corpus.clips[i];
            is_target(c) && c.split != Split::Train && c.role == Role::Anomalous
        })
        .collect();
    let cap = pool.len().min(MAX_BUDGET);
    if k > cap {
        return Err(Error::Budget(format!(
            "budget {k} exceeds the {cap} selectable anomalies of {target_type}:{target_id}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xB0D6, target_id as u64));
    pool.shuffle(&mut rng);
    pool.truncate(cap);
    let injected_anomalies: Vec<usize> = pool[..k].to_vec();
    let held = |split: Split| -> Vec<usize> {
        (0..corpus.len())
            .filter(|i| {
                let c = &corpus.clips[*i];
                is_target(c) && c.split == split && !injected_anomalies.contains(i)
            })
            .collect()
    };
    let validation = held(Split::Validation);
    let evaluation = held(Split::Evaluation);
    Ok(TrainingTask {
        target_type: target_type.to_string(),
        target_id,
        normal_set,
        outlier_set,
        anomaly_budget: k,
        injected_anomalies,
        validation,
        evaluation,
    })
}

impl TrainingTask {
    /// Clips whose embeddings feed `c_n`: outliers and injected anomalies.
    pub fn negative_set(&self) -> Vec<usize> {
        let mut v = self.outlier_set.clone();
        v.extend(&self.injected_anomalies);
        v
    }

    pub fn training_clips(&self) -> Vec<usize> {
        let mut v = self.normal_set.clone();
        v.extend(self.negative_set());
        v
    }
}

/// Cycles through a class in reshuffled passes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ClassSampler {
    items: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
}

impl ClassSampler {
    fn new(items: Vec<usize>) -> Self {
        Self {
            order: Vec::new(),
            pos: 0,
            items,
        }
    }

    fn draw(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order = self.items.clone();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// One batch slot: a clip index and its loss metadata.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchEntry {
    pub clip: usize,
    pub meta: ItemMeta,
}

/// Draws mini-batches at the fixed class ratio: normal:outlier:anomalous =
/// 32:31:1 per 64 when anomalies were injected, otherwise normal:outlier 1:1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchComposer {
    batch_size: usize,
    counts: [usize; 3],
    samplers: [ClassSampler; 3],
    rng: ChaCha8Rng,
}

/// Per-class counts `(normal, outlier, anomalous)` for a batch.
pub fn class_counts(batch_size: usize, with_anomalies: bool) -> [usize; 3] {
    let normal = batch_size / 2;
    let anomalous = if with_anomalies {
        (batch_size / 64).max(1)
    } else {
        0
    };
    [normal, batch_size - normal - anomalous, anomalous]
}

impl BatchComposer {
    pub fn new(task: &TrainingTask, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size < 2 {
            return Err(Error::config("batch_size must be at least 2"));
        }
        let with_anomalies = !task.injected_anomalies.is_empty();
        let counts = class_counts(batch_size, with_anomalies);
        if counts[1] == 0 {
            return Err(Error::config("batch_size too small for the class ratio"));
        }
        let sets = [&task.normal_set, &task.outlier_set, &task.injected_anomalies];
        for (c, set) in counts.iter().zip(sets) {
            if *c > 0 && set.is_empty() {
                return Err(Error::Composition("a required class has no clips".into()));
            }
        }
        Ok(Self {
            batch_size,
            counts,
            samplers: sets.map(|s| ClassSampler::new(s.clone())),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn counts(&self) -> [usize; 3] {
        self.counts
    }

    /// Normals first, then outliers, then anomalies.
    pub fn next_batch(&mut self) -> Vec<BatchEntry> {
        let metas = [ItemMeta::normal(), ItemMeta::outlier(), ItemMeta::anomalous()];
        let mut batch = Vec::with_capacity(self.batch_size);
        for class in 0..3 {
            for _ in 0..self.counts[class] {
                batch.push(BatchEntry {
                    clip: self.samplers[class].draw(&mut self.rng),
                    meta: metas[class],
                });
            }
        }
        batch
    }
}

/// Counts clips per (type, id, role, split), keyed for reporting.
pub fn census(corpus: &Corpus) -> HashMap<(String, u32, Role, Split), usize> {
    let mut m = HashMap::new();
    for c in &corpus.clips {
        *m.entry((c.machine_type.clone(), c.machine_id, c.role, c.split))
            .or_insert(0) += 1;
    }
    m
}
