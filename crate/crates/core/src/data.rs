//! Synthetic paired audio-visual word dataset and the data-side augmentations.
//!
//! Every class has a visual prototype (a moving, reshaping blob on a small
//! grayscale frame) and an audio prototype (two drifting spectral bumps over
//! `F` bins), both parametrised by normalised time inside the word. Frames
//! outside the word show a distractor word from another class, so the word
//! boundary carries real information. Declared confusable pairs share their
//! visual prototype exactly and keep distinct audio prototypes.
//!
//! A sample is a pure function of `(seed, split, index)`: each one draws from
//! its own ChaCha stream.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const DUMP_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub visual_frames: usize,
    pub height: usize,
    pub width: usize,
    pub audio_frames: usize,
    pub audio_bins: usize,
    /// Std of additive Gaussian pixel noise.
    pub visual_noise: f64,
    /// Std of additive Gaussian spectrogram noise.
    pub audio_noise: f64,
    /// Class pairs whose visual prototypes coincide.
    pub confusable_pairs: Vec<(usize, usize)>,
    /// Minimum L2 distance between the audio prototypes of a confusable pair.
    pub audio_margin: f64,
    /// Nominal word length in visual frames.
    pub word_frames: usize,
    /// Maximum shift of the word centre, in visual frames.
    pub boundary_jitter: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            train_per_class: 60,
            val_per_class: 10,
            test_per_class: 20,
            visual_frames: 29,
            height: 16,
            width: 16,
            audio_frames: 139,
            audio_bins: 20,
            visual_noise: 0.6,
            audio_noise: 0.3,
            confusable_pairs: vec![(0, 1), (2, 3), (4, 5), (6, 7)],
            audio_margin: 1.0,
            word_frames: 13,
            boundary_jitter: 3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.num_classes < 2 {
            return Err(format!("data.num_classes must be at least 2, got {}", self.num_classes));
        }
        for (name, v) in [
            ("visual_frames", self.visual_frames),
            ("height", self.height),
            ("width", self.width),
            ("audio_bins", self.audio_bins),
            ("word_frames", self.word_frames),
        ] {
            if v == 0 {
                return Err(format!("data.{name} must be positive"));
            }
        }
        if self.audio_frames < self.visual_frames {
            return Err("data.audio_frames must be at least data.visual_frames".into());
        }
        if self.word_frames + 2 * self.boundary_jitter + 1 > self.visual_frames {
            return Err("data.word_frames plus jitter does not fit in the clip".into());
        }
        if !(self.visual_noise >= 0.0) || !(self.audio_noise >= 0.0) {
            return Err("data noise levels must be >= 0".into());
        }
        let mut seen = vec![false; self.num_classes];
        for &(a, b) in &self.confusable_pairs {
            if a >= self.num_classes || b >= self.num_classes {
                return Err(format!("data.confusable_pairs: ({a}, {b}) out of range"));
            }
            if a == b || seen[a] || seen[b] {
                return Err(format!("data.confusable_pairs: ({a}, {b}) overlaps another pair"));
            }
            seen[a] = true;
            seen[b] = true;
        }
        Ok(())
    }

    pub fn per_class(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_class,
            Split::Val => self.val_per_class,
            Split::Test => self.test_per_class,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvSample {
    /// `[T_v, C, H, W]`.
    pub visual: Tensor,
    /// `[T_a, F]`.
    pub audio: Tensor,
    pub label: usize,
    /// Half-open visual frame interval holding the word.
    pub boundary_v: (usize, usize),
    pub boundary_a: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub train: Vec<AvSample>,
    pub val: Vec<AvSample>,
    pub test: Vec<AvSample>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[AvSample] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct VisualProto {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    fx: f64,
    fy: f64,
    px: f64,
    py: f64,
    sx: f64,
    sy: f64,
    open_amp: f64,
    open_phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct AudioProto {
    /// (base bin, drift amplitude, frequency, phase, gain) per formant.
    formants: [(f64, f64, f64, f64, f64); 2],
}

/// Class prototypes derived from the config seed.
#[derive(Clone, Debug)]
pub struct Prototypes {
    visual: Vec<VisualProto>,
    audio: Vec<AudioProto>,
    height: usize,
    width: usize,
    bins: usize,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

const PROTO_STREAM: u64 = 3 << 40;

impl Prototypes {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate().map_err(TensorError::Invalid)?;
        let (h, w, f) = (cfg.height as f64, cfg.width as f64, cfg.audio_bins as f64);
        let mut visual = Vec::with_capacity(cfg.num_classes);
        let mut audio = Vec::with_capacity(cfg.num_classes);
        for c in 0..cfg.num_classes {
            let mut r = stream(cfg.seed, PROTO_STREAM | c as u64);
            visual.push(VisualProto {
                cx: w * r.random_range(0.3..0.7),
                cy: h * r.random_range(0.3..0.7),
                ax: w * r.random_range(0.05..0.25),
                ay: h * r.random_range(0.05..0.25),
                fx: r.random_range(0.5..2.0),
                fy: r.random_range(0.5..2.0),
                px: r.random_range(0.0..2.0 * PI),
                py: r.random_range(0.0..2.0 * PI),
                sx: w * r.random_range(0.08..0.16),
                sy: h * r.random_range(0.08..0.16),
                open_amp: r.random_range(0.2..0.8),
                open_phase: r.random_range(0.0..2.0 * PI),
            });
            audio.push(Self::draw_audio(&mut r, f));
        }
        for &(a, b) in &cfg.confusable_pairs {
            visual[b] = visual[a].clone();
        }
        let mut protos = Self {
            visual,
            audio,
            height: cfg.height,
            width: cfg.width,
            bins: cfg.audio_bins,
        };
        // keep each pair audibly distinct; redraws come from a separate stream
        for &(a, b) in &cfg.confusable_pairs {
            let mut r = stream(cfg.seed, PROTO_STREAM | (1 << 32) | b as u64);
            let mut tries = 0;
            while protos.audio_distance(a, b, cfg.audio_frames) < cfg.audio_margin {
                tries += 1;
                if tries > 1000 {
                    return Err(TensorError::Invalid(format!(
                        "could not separate audio prototypes of pair ({a}, {b}) by {}",
                        cfg.audio_margin
                    )));
                }
                protos.audio[b] = Self::draw_audio(&mut r, f);
            }
        }
        Ok(protos)
    }

    fn draw_audio(r: &mut ChaCha8Rng, f: f64) -> AudioProto {
        let mut fm = [(0.0, 0.0, 0.0, 0.0, 0.0); 2];
        for (k, slot) in fm.iter_mut().enumerate() {
            let lo = if k == 0 { 0.1 } else { 0.5 };
            *slot = (
                f * r.random_range(lo..lo + 0.4),
                f * r.random_range(0.03..0.15),
                r.random_range(0.5..2.0),
                r.random_range(0.0..2.0 * PI),
                r.random_range(0.7..1.3),
            );
        }
        AudioProto { formants: fm }
    }

    /// Noiseless visual frame of class `c` at normalised word time `u`.
    pub fn visual_frame(&self, c: usize, u: f64, out: &mut [f64]) {
        let p = &self.visual[c];
        let x0 = p.cx + p.ax * (2.0 * PI * p.fx * u + p.px).sin();
        let y0 = p.cy + p.ay * (2.0 * PI * p.fy * u + p.py).sin();
        let open = 1.0 + p.open_amp * (2.0 * PI * u + p.open_phase).sin();
        let sy = p.sy * open;
        for y in 0..self.height {
            for x in 0..self.width {
                let dx = (x as f64 - x0) / p.sx;
                let dy = (y as f64 - y0) / sy;
                out[y * self.width + x] = (-0.5 * (dx * dx + dy * dy)).exp();
            }
        }
    }

    /// Noiseless spectral frame of class `c` at normalised word time `u`.
    pub fn audio_frame(&self, c: usize, u: f64, out: &mut [f64]) {
        out.fill(0.0);
        for &(base, amp, freq, phase, gain) in &self.audio[c].formants {
            let centre = base + amp * (2.0 * PI * freq * u + phase).sin();
            for (b, o) in out.iter_mut().enumerate() {
                let d = (b as f64 - centre) / 1.5;
                *o += gain * (-0.5 * d * d).exp();
            }
        }
    }

    /// Distance between the audio prototypes of two classes over a word of
    /// `frames` steps.
    pub fn audio_distance(&self, a: usize, b: usize, frames: usize) -> f64 {
        let mut fa = vec![0.0; self.bins];
        let mut fb = vec![0.0; self.bins];
        let mut s = 0.0;
        for t in 0..frames {
            let u = (t as f64 + 0.5) / frames as f64;
            self.audio_frame(a, u, &mut fa);
            self.audio_frame(b, u, &mut fb);
            s += fa.iter().zip(&fb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
        }
        s.sqrt()
    }

    /// Noiseless word rendered over the given boundaries, zero outside.
    pub fn render(&self, c: usize, cfg: &SynthConfig, bv: (usize, usize), ba: (usize, usize)) -> (Tensor, Tensor) {
        let mut v = Tensor::zeros(&[cfg.visual_frames, 1, cfg.height, cfg.width]);
        let mut a = Tensor::zeros(&[cfg.audio_frames, cfg.audio_bins]);
        let hw = cfg.height * cfg.width;
        for t in bv.0..bv.1 {
            let u = word_time(t, bv);
            self.visual_frame(c, u, &mut v.data_mut()[t * hw..(t + 1) * hw]);
        }
        let f = cfg.audio_bins;
        for t in ba.0..ba.1 {
            let u = word_time(t, ba);
            self.audio_frame(c, u, &mut a.data_mut()[t * f..(t + 1) * f]);
        }
        (v, a)
    }
}

fn word_time(t: usize, b: (usize, usize)) -> f64 {
    (t as f64 + 0.5 - b.0 as f64) / (b.1 - b.0) as f64
}

/// Audio interval for a visual interval: both ends scaled by `T_a/T_v` and rounded.
pub fn audio_boundary(bv: (usize, usize), visual_frames: usize, audio_frames: usize) -> (usize, usize) {
    let s = |x: usize| ((x as f64) * audio_frames as f64 / visual_frames as f64).round() as usize;
    (s(bv.0), s(bv.1).min(audio_frames))
}

/// One sample of `split` at `index`; labels cycle through the classes.
pub fn generate_sample(cfg: &SynthConfig, protos: &Prototypes, split: Split, index: usize) -> AvSample {
    let n = cfg.num_classes;
    let label = index % n;
    let mut r = stream(cfg.seed, (split.id() << 40) | index as u64);
    let j = cfg.boundary_jitter as i64;
    let shift = r.random_range(-j..=j);
    let len = cfg.word_frames as i64 + r.random_range(-1..=1);
    let len = len.max(1);
    let start = ((cfg.visual_frames as i64 - len) / 2 + shift).clamp(0, cfg.visual_frames as i64 - len);
    let bv = (start as usize, (start + len) as usize);
    let ba = audio_boundary(bv, cfg.visual_frames, cfg.audio_frames);
    let mut distractor = r.random_range(0..n - 1);
    if distractor >= label {
        distractor += 1;
    }

    let hw = cfg.height * cfg.width;
    let mut visual = Tensor::zeros(&[cfg.visual_frames, 1, cfg.height, cfg.width]);
    for t in 0..cfg.visual_frames {
        let frame = &mut visual.data_mut()[t * hw..(t + 1) * hw];
        if t >= bv.0 && t < bv.1 {
            protos.visual_frame(label, word_time(t, bv), frame);
        } else {
            // neighbouring words continue on the same time scale
            let u = word_time(t, bv).rem_euclid(1.0);
            protos.visual_frame(distractor, u, frame);
        }
    }
    let f = cfg.audio_bins;
    let mut audio = Tensor::zeros(&[cfg.audio_frames, f]);
    for t in 0..cfg.audio_frames {
        let frame = &mut audio.data_mut()[t * f..(t + 1) * f];
        if t >= ba.0 && t < ba.1 {
            protos.audio_frame(label, word_time(t, ba), frame);
        } else {
            let u = word_time(t, ba).rem_euclid(1.0);
            protos.audio_frame(distractor, u, frame);
        }
    }
    for v in visual.data_mut() {
        let z: f64 = StandardNormal.sample(&mut r);
        *v += cfg.visual_noise * z;
    }
    for v in audio.data_mut() {
        let z: f64 = StandardNormal.sample(&mut r);
        *v += cfg.audio_noise * z;
    }
    AvSample {
        visual,
        audio,
        label,
        boundary_v: bv,
        boundary_a: ba,
    }
}

pub fn generate_split(cfg: &SynthConfig, protos: &Prototypes, split: Split) -> Vec<AvSample> {
    (0..cfg.per_class(split) * cfg.num_classes)
        .map(|i| generate_sample(cfg, protos, split, i))
        .collect()
}

pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    let protos = Prototypes::new(cfg)?;
    Ok(Dataset {
        config: cfg.clone(),
        train: generate_split(cfg, &protos, Split::Train),
        val: generate_split(cfg, &protos, Split::Val),
        test: generate_split(cfg, &protos, Split::Test),
    })
}

/// Append a channel that is 1 on frames inside the word and 0 elsewhere.
pub fn attach_word_boundary_indicator(visual: &Tensor, boundary: (usize, usize)) -> Result<Tensor> {
    let s = visual.shape();
    if s.len() != 4 || boundary.0 >= boundary.1 || boundary.1 > s[0] {
        return Err(TensorError::Invalid(format!(
            "word boundary {boundary:?} invalid for visual shape {s:?}"
        )));
    }
    let (t, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(t * (c + 1) * hw);
    for f in 0..t {
        out.extend_from_slice(&visual.data()[f * c * hw..(f + 1) * c * hw]);
        let on = if f >= boundary.0 && f < boundary.1 { 1.0 } else { 0.0 };
        out.extend(std::iter::repeat_n(on, hw));
    }
    Tensor::new(vec![t, c + 1, s[2], s[3]], out)
}

/// Zero every audio frame outside `[start, end)`.
pub fn word_isolate(audio: &Tensor, boundary: (usize, usize)) -> Result<Tensor> {
    let s = audio.shape();
    if s.len() != 2 || boundary.0 >= boundary.1 || boundary.1 > s[0] {
        return Err(TensorError::Invalid(format!(
            "audio boundary {boundary:?} invalid for shape {s:?}"
        )));
    }
    let f = s[1];
    let mut out = audio.clone();
    let d = out.data_mut();
    d[..boundary.0 * f].fill(0.0);
    d[boundary.1 * f..].fill(0.0);
    Ok(out)
}

/// Mask one random time band and one random frequency band.
pub fn spec_augment<R: Rng + ?Sized>(
    audio: &Tensor,
    max_time_mask: usize,
    max_freq_mask: usize,
    rng: &mut R,
) -> Result<Tensor> {
    let s = audio.shape();
    if s.len() != 2 || max_time_mask >= s[0] || max_freq_mask >= s[1] {
        return Err(TensorError::Invalid(format!(
            "mask widths ({max_time_mask}, {max_freq_mask}) too large for shape {s:?}"
        )));
    }
    let (t, f) = (s[0], s[1]);
    let mut out = audio.clone();
    let tw = rng.random_range(0..=max_time_mask);
    let t0 = rng.random_range(0..=t - tw);
    let fw = rng.random_range(0..=max_freq_mask);
    let f0 = rng.random_range(0..=f - fw);
    let d = out.data_mut();
    d[t0 * f..(t0 + tw) * f].fill(0.0);
    for row in d.chunks_mut(f) {
        row[f0..f0 + fw].fill(0.0);
    }
    Ok(out)
}

/// Channel-mean grayscale of `[T, 3, H, W]` frames and a crop to `out_h × out_w`.
/// Training picks one random offset per clip; evaluation centre-crops.
pub fn grayscale_and_crop<R: Rng + ?Sized>(
    frames: &Tensor,
    out_h: usize,
    out_w: usize,
    rng: &mut R,
    train: bool,
) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(TensorError::Invalid(format!("expected [T, 3, H, W] frames, got {s:?}")));
    }
    let (t, h, w) = (s[0], s[2], s[3]);
    if out_h > h || out_w > w || out_h == 0 || out_w == 0 {
        return Err(TensorError::Invalid(format!(
            "crop {out_h}x{out_w} larger than frame {h}x{w}"
        )));
    }
    let (oy, ox) = if train {
        (rng.random_range(0..=h - out_h), rng.random_range(0..=w - out_w))
    } else {
        ((h - out_h) / 2, (w - out_w) / 2)
    };
    let d = frames.data();
    let mut out = Vec::with_capacity(t * out_h * out_w);
    for f in 0..t {
        for y in oy..oy + out_h {
            for x in ox..ox + out_w {
                let px = |c: usize| d[((f * 3 + c) * h + y) * w + x];
                out.push((px(0) + px(1) + px(2)) / 3.0);
            }
        }
    }
    Tensor::new(vec![t, 1, out_h, out_w], out)
}

#[derive(Serialize, Deserialize)]
struct SplitEntry {
    file: String,
    count: usize,
    visual_shape: Vec<usize>,
    audio_shape: Vec<usize>,
    labels: Vec<usize>,
    boundaries_v: Vec<(usize, usize)>,
    boundaries_a: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct DumpManifest {
    version: u32,
    dtype: String,
    seed: u64,
    config: SynthConfig,
    splits: Vec<(Split, SplitEntry)>,
}

fn io_err(path: &Path, e: std::io::Error) -> TensorError {
    TensorError::Invalid(format!("{}: {e}", path.display()))
}

/// Write the dataset as one little-endian f64 blob per split plus `manifest.json`.
/// Returns the manifest path.
pub fn dump_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let samples = ds.split(split);
        let file = format!("{}.bin", split.name());
        let path = dir.join(&file);
        let mut buf = Vec::new();
        for s in samples {
            for v in s.visual.data().iter().chain(s.audio.data()) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| io_err(&path, e))?;
        let c = &ds.config;
        splits.push((
            split,
            SplitEntry {
                file,
                count: samples.len(),
                visual_shape: vec![c.visual_frames, 1, c.height, c.width],
                audio_shape: vec![c.audio_frames, c.audio_bins],
                labels: samples.iter().map(|s| s.label).collect(),
                boundaries_v: samples.iter().map(|s| s.boundary_v).collect(),
                boundaries_a: samples.iter().map(|s| s.boundary_a).collect(),
            },
        ));
    }
    let manifest = DumpManifest {
        version: DUMP_VERSION,
        dtype: "f64-le".into(),
        seed: ds.config.seed,
        config: ds.config.clone(),
        splits,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| TensorError::Invalid(e.to_string()))?;
    fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    let m: DumpManifest = serde_json::from_str(&text)
        .map_err(|e| TensorError::Invalid(format!("{}: {e}", mpath.display())))?;
    if m.version != DUMP_VERSION {
        return Err(TensorError::Invalid(format!(
            "dataset dump version {} (expected {DUMP_VERSION})",
            m.version
        )));
    }
    let mut ds = Dataset {
        config: m.config,
        train: vec![],
        val: vec![],
        test: vec![],
    };
    for (split, e) in m.splits {
        let path = dir.join(&e.file);
        let mut bytes = Vec::new();
        fs::File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|err| io_err(&path, err))?;
        let nv: usize = e.visual_shape.iter().product();
        let na: usize = e.audio_shape.iter().product();
        if bytes.len() != e.count * (nv + na) * 8
            || e.labels.len() != e.count
            || e.boundaries_v.len() != e.count
            || e.boundaries_a.len() != e.count
        {
            return Err(TensorError::Invalid(format!("{}: length does not match manifest", path.display())));
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let samples = (0..e.count)
            .map(|i| {
                let base = i * (nv + na);
                Ok(AvSample {
                    visual: Tensor::new(e.visual_shape.clone(), vals[base..base + nv].to_vec())?,
                    audio: Tensor::new(e.audio_shape.clone(), vals[base + nv..base + nv + na].to_vec())?,
                    label: e.labels[i],
                    boundary_v: e.boundaries_v[i],
                    boundary_a: e.boundaries_a[i],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        match split {
            Split::Train => ds.train = samples,
            Split::Val => ds.val = samples,
            Split::Test => ds.test = samples,
        }
    }
    Ok(ds)
}
