//! Deterministic synthetic subjects, latent videos and the dataset file format.
//!
//! A subject owns one unit-norm signature per facial component plus one for
//! the background. A video places every token slot on a component (or the
//! background) with a layout fixed per subject; each token is its slot's
//! signature plus a smooth per-frame drift shared by the whole frame plus
//! Gaussian noise.
//!
//! All randomness comes from ChaCha8 streams seeded from the subject or
//! motion seed, so every sample can be regenerated from its seeds.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::router::ComponentMasks;
use crate::tensor::Tensor;
use crate::video::LatentVideo;

/// Peak displacement of the per-frame drift.
pub const DRIFT_AMPLITUDE: f64 = 0.3;
/// Angular frequency of the drift, in radians per frame.
pub const DRIFT_FREQUENCY: f64 = 0.4;
/// Signatures whose cosine similarity reaches this value are redrawn.
pub const MAX_SIGNATURE_COSINE: f64 = 0.99;
/// Per-entry noise added to signatures when building local feature grids.
pub const FEATURE_NOISE: f64 = 0.1;

const SIGNATURE_RETRIES: usize = 64;

const STREAM_SIGNATURES: u64 = 0;
const STREAM_LAYOUT: u64 = 1;
const STREAM_FEATURES: u64 = 2;
const STREAM_DRIFT: u64 = 0;
const STREAM_NOISE: u64 = 1;

pub const DATASET_MAGIC: &[u8; 4] = b"LVID";
pub const DATASET_VERSION: u8 = 1;
/// Generator tag stored in the header: ChaCha8 with `seed_from_u64`.
pub const RNG_CHACHA8: u8 = 1;
pub const DATASET_HEADER_LEN: usize = 28;
/// Mask byte for background tokens.
pub const BACKGROUND: u8 = 255;

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> bool {
    let n = dot(v, v).sqrt();
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// SplitMix64 finaliser, used to derive child seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectIdentity {
    pub id_seed: u64,
    /// `M` unit vectors of width `D'`.
    pub signatures: Vec<Vec<f64>>,
    /// Unit vector used for background tokens.
    pub background: Vec<f64>,
    /// Normalised sum of the component signatures.
    pub identity_vector: Vec<f64>,
}

impl SubjectIdentity {
    pub fn components(&self) -> usize {
        self.signatures.len()
    }

    pub fn dim(&self) -> usize {
        self.background.len()
    }

    /// Slot assignment for `tokens_per_frame` slots: every component gets at
    /// least one slot, the rest go to a component or the background.
    pub fn layout(&self, tokens_per_frame: usize) -> Result<Vec<Option<usize>>> {
        let m = self.components();
        if tokens_per_frame < m {
            return Err(Error::Layout {
                tokens: tokens_per_frame,
                components: m,
            });
        }
        let mut rng = stream(self.id_seed, STREAM_LAYOUT);
        let mut slots: Vec<usize> = (0..tokens_per_frame).collect();
        slots.shuffle(&mut rng);
        let mut layout = vec![None; tokens_per_frame];
        for (i, &slot) in slots.iter().enumerate() {
            layout[slot] = if i < m {
                Some(i)
            } else {
                let c = rng.random_range(0..=m);
                (c < m).then_some(c)
            };
        }
        Ok(layout)
    }

    /// One `tokens×D'` feature grid per component: each row is the
    /// component signature plus small noise.
    pub fn local_features(&self, tokens: usize) -> Result<Vec<Tensor>> {
        let d = self.dim();
        let mut rng = stream(self.id_seed, STREAM_FEATURES);
        self.signatures
            .iter()
            .map(|sig| {
                let mut data = Vec::with_capacity(tokens * d);
                for _ in 0..tokens {
                    for &s in sig {
                        let n: f64 = rng.sample(StandardNormal);
                        data.push(s + FEATURE_NOISE * n);
                    }
                }
                Tensor::new(&[tokens, d], data)
            })
            .collect()
    }

    pub fn identity_tensor(&self) -> Result<Tensor> {
        Tensor::new(&[self.identity_vector.len()], self.identity_vector.clone())
    }
}

/// Draws `M` component signatures and one background signature, redrawing
/// any candidate too close to one already accepted.
pub fn gen_subject(seed: u64, components: usize, dim: usize) -> Result<SubjectIdentity> {
    if components < 2 {
        return Err(Error::DegenerateRouting(components));
    }
    if dim == 0 {
        return Err(Error::Generation("signature width must be positive".into()));
    }
    let mut rng = stream(seed, STREAM_SIGNATURES);
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(components + 1);
    for i in 0..=components {
        let mut found = None;
        for _ in 0..SIGNATURE_RETRIES {
            let mut v = normal_vec(&mut rng, dim);
            if !normalize(&mut v) {
                continue;
            }
            if accepted.iter().all(|a| dot(a, &v) < MAX_SIGNATURE_COSINE) {
                found = Some(v);
                break;
            }
        }
        match found {
            Some(v) => accepted.push(v),
            None => {
                return Err(Error::Generation(format!(
                    "signature {i} of subject {seed} stayed within cosine {MAX_SIGNATURE_COSINE} of another after {SIGNATURE_RETRIES} draws"
                )))
            }
        }
    }
    let background = accepted.pop().expect("components + 1 signatures");
    let mut identity_vector = vec![0.0; dim];
    for s in &accepted {
        identity_vector.iter_mut().zip(s).for_each(|(acc, x)| *acc += x);
    }
    if !normalize(&mut identity_vector) {
        identity_vector = accepted[0].clone();
    }
    Ok(SubjectIdentity {
        id_seed: seed,
        signatures: accepted,
        background,
        identity_vector,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub latents: LatentVideo,
    /// Component of each token, frame-major; `None` is background.
    pub labels: Vec<Option<usize>>,
    pub subject: SubjectIdentity,
    pub motion_seed: u64,
}

impl SyntheticSample {
    pub fn masks(&self) -> Result<ComponentMasks> {
        ComponentMasks::from_labels(&self.labels, self.subject.components())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.latents.bit_eq(&other.latents)
            && self.labels == other.labels
            && self.subject == other.subject
            && self.motion_seed == other.motion_seed
    }
}

/// Orthonormal drift directions for a motion seed.
pub fn drift_basis(motion_seed: u64, dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if dim < 2 {
        return Err(Error::Generation("drift needs a latent width of at least 2".into()));
    }
    let mut rng = stream(motion_seed, STREAM_DRIFT);
    for _ in 0..SIGNATURE_RETRIES {
        let mut a = normal_vec(&mut rng, dim);
        let mut b = normal_vec(&mut rng, dim);
        if !normalize(&mut a) {
            continue;
        }
        let p = dot(&a, &b);
        b.iter_mut().zip(&a).for_each(|(x, y)| *x -= p * y);
        if normalize(&mut b) {
            return Ok((a, b));
        }
    }
    Err(Error::Generation("could not draw drift directions".into()))
}

/// Drift offset shared by every token of frame `f`.
pub fn drift_at(a: &[f64], b: &[f64], frame: usize) -> Vec<f64> {
    let phase = DRIFT_FREQUENCY * frame as f64;
    let (c, s) = (phase.cos(), phase.sin());
    a.iter()
        .zip(b)
        .map(|(x, y)| DRIFT_AMPLITUDE * (c * x + s * y))
        .collect()
}

/// Distance between the drift offsets of consecutive frames.
pub fn drift_step_magnitude() -> f64 {
    2.0 * DRIFT_AMPLITUDE * (DRIFT_FREQUENCY / 2.0).sin()
}

pub fn gen_video_latents(
    subject: &SubjectIdentity,
    motion_seed: u64,
    frames: usize,
    tokens_per_frame: usize,
    noise_level: f64,
) -> Result<SyntheticSample> {
    if frames == 0 {
        return Err(Error::Generation("a video needs at least one frame".into()));
    }
    if !(noise_level >= 0.0 && noise_level.is_finite()) {
        return Err(Error::Generation(format!("noise level must be ≥ 0, got {noise_level}")));
    }
    let layout = subject.layout(tokens_per_frame)?;
    let d = subject.dim();
    let (a, b) = drift_basis(motion_seed, d)?;
    let mut rng = stream(motion_seed, STREAM_NOISE);
    let mut data = Vec::with_capacity(frames * tokens_per_frame * d);
    let mut labels = Vec::with_capacity(frames * tokens_per_frame);
    for f in 0..frames {
        let drift = drift_at(&a, &b, f);
        for &slot in &layout {
            let sig = match slot {
                Some(c) => &subject.signatures[c],
                None => &subject.background,
            };
            for (s, o) in sig.iter().zip(&drift) {
                let n: f64 = if noise_level > 0.0 {
                    rng.sample(StandardNormal)
                } else {
                    0.0
                };
                data.push(s + o + noise_level * n);
            }
            labels.push(slot);
        }
    }
    Ok(SyntheticSample {
        latents: LatentVideo::new(Tensor::new(&[frames, tokens_per_frame, d], data)?)?,
        labels,
        subject: subject.clone(),
        motion_seed,
    })
}

/// Adds an independent offset `jitter·ξ_f`, `ξ_f ~ N(0, 1)`, to every
/// entry of frame `f`.
pub fn corrupt_temporal(video: &LatentVideo, jitter: f64, seed: u64) -> Result<LatentVideo> {
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(Error::Parameter(format!("jitter must be ≥ 0, got {jitter}")));
    }
    if jitter == 0.0 {
        return Ok(video.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_frame = video.tokens_per_frame() * video.dim();
    let mut data = video.data().to_vec();
    for frame in data.chunks_mut(per_frame) {
        let xi: f64 = rng.sample(StandardNormal);
        frame.iter_mut().for_each(|x| *x += jitter * xi);
    }
    LatentVideo::new(Tensor::new(video.tensor().shape(), data)?)
}

/// Shape parameters of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DatasetShape {
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub dim: usize,
    pub components: usize,
}

impl DatasetShape {
    pub fn record_len(&self) -> usize {
        let n = self.frames * self.tokens_per_frame;
        16 + 8 * n * self.dim + n
    }

    pub fn file_len(&self, count: usize) -> usize {
        DATASET_HEADER_LEN + count * self.record_len()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DatasetSpec {
    pub subjects: usize,
    pub videos_per_subject: usize,
    pub frames: usize,
    pub tokens_per_frame: usize,
    pub dim: usize,
    pub components: usize,
    pub noise_level: f64,
    pub seed: u64,
}

/// Generates `subjects × videos_per_subject` samples. Subject and motion
/// seeds are derived from `seed`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SyntheticSample>> {
    let mut out = Vec::with_capacity(spec.subjects * spec.videos_per_subject);
    for i in 0..spec.subjects {
        let id_seed = mix_seed(spec.seed, i as u64);
        let subject = gen_subject(id_seed, spec.components, spec.dim)?;
        for v in 0..spec.videos_per_subject {
            let motion_seed = mix_seed(id_seed, v as u64 + 1);
            out.push(gen_video_latents(
                &subject,
                motion_seed,
                spec.frames,
                spec.tokens_per_frame,
                spec.noise_level,
            )?);
        }
    }
    Ok(out)
}

fn shape_of(samples: &[SyntheticSample]) -> Result<DatasetShape> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Contract("cannot infer the shape of an empty dataset".into()))?;
    let shape = DatasetShape {
        frames: first.latents.frames(),
        tokens_per_frame: first.latents.tokens_per_frame(),
        dim: first.latents.dim(),
        components: first.subject.components(),
    };
    for s in samples {
        let other = DatasetShape {
            frames: s.latents.frames(),
            tokens_per_frame: s.latents.tokens_per_frame(),
            dim: s.latents.dim(),
            components: s.subject.components(),
        };
        if other != shape {
            return Err(Error::Contract(format!("mixed sample shapes {shape:?} and {other:?}")));
        }
    }
    Ok(shape)
}

fn u32_field(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Contract(format!("{what} {v} does not fit in 32 bits")))
}

pub fn save_dataset(samples: &[SyntheticSample], path: impl AsRef<Path>) -> Result<()> {
    let shape = shape_of(samples)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&[DATASET_VERSION, RNG_CHACHA8, 0, 0])?;
    for (v, what) in [
        (shape.frames, "frame count"),
        (shape.tokens_per_frame, "tokens per frame"),
        (shape.dim, "latent width"),
        (shape.components, "component count"),
        (samples.len(), "sample count"),
    ] {
        w.write_all(&u32_field(v, what)?)?;
    }
    for s in samples {
        w.write_all(&s.subject.id_seed.to_le_bytes())?;
        w.write_all(&s.motion_seed.to_le_bytes())?;
        for x in s.latents.data() {
            w.write_all(&x.to_le_bytes())?;
        }
        let mask: Vec<u8> = s
            .labels
            .iter()
            .map(|l| match l {
                Some(c) => u8::try_from(*c).map_err(|_| Error::Contract(format!("component {c} exceeds 254"))),
                None => Ok(BACKGROUND),
            })
            .collect::<Result<_>>()?;
        w.write_all(&mask)?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32(bytes: &[u8], at: usize) -> usize {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

/// Reads a dataset; subjects are regenerated from their stored seeds.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<SyntheticSample>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format("missing LVID magic".into()));
    }
    if bytes.len() < DATASET_HEADER_LEN {
        return Err(Error::Corruption(format!("header truncated at {} bytes", bytes.len())));
    }
    if bytes[4] != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {}", bytes[4])));
    }
    if bytes[5] != RNG_CHACHA8 {
        return Err(Error::Format(format!("unknown generator tag {}", bytes[5])));
    }
    let shape = DatasetShape {
        frames: read_u32(&bytes, 8),
        tokens_per_frame: read_u32(&bytes, 12),
        dim: read_u32(&bytes, 16),
        components: read_u32(&bytes, 20),
    };
    let count = read_u32(&bytes, 24);
    if shape.frames == 0 || shape.tokens_per_frame == 0 || shape.dim == 0 {
        return Err(Error::Format(format!("degenerate shape {shape:?}")));
    }
    let expected = shape.file_len(count);
    if bytes.len() != expected {
        return Err(Error::Corruption(format!(
            "expected {expected} bytes for {count} records, found {}",
            bytes.len()
        )));
    }
    let n = shape.frames * shape.tokens_per_frame;
    let mut samples = Vec::with_capacity(count);
    let mut at = DATASET_HEADER_LEN;
    let mut subject: Option<SubjectIdentity> = None;
    for _ in 0..count {
        let id_seed = read_u64(&bytes, at);
        let motion_seed = read_u64(&bytes, at + 8);
        at += 16;
        let data: Vec<f64> = bytes[at..at + 8 * n * shape.dim]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        at += 8 * n * shape.dim;
        let labels = bytes[at..at + n]
            .iter()
            .map(|&b| match b {
                BACKGROUND => Ok(None),
                c if (c as usize) < shape.components => Ok(Some(c as usize)),
                c => Err(Error::Corruption(format!("mask byte {c} names no component"))),
            })
            .collect::<Result<Vec<_>>>()?;
        at += n;
        let subject = match &subject {
            Some(s) if s.id_seed == id_seed => s.clone(),
            _ => {
                let s = gen_subject(id_seed, shape.components, shape.dim)?;
                subject = Some(s.clone());
                s
            }
        };
        let tensor = Tensor::new(&[shape.frames, shape.tokens_per_frame, shape.dim], data)
            .map_err(|e| Error::Corruption(format!("latent record: {e}")))?;
        samples.push(SyntheticSample {
            latents: LatentVideo::new(tensor)?,
            labels,
            subject,
            motion_seed,
        });
    }
    Ok(samples)
}
