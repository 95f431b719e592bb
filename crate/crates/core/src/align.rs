//! Gaussian sliding-window alignment from audio frames onto video frames.
//!
//! Each of the `J` visual steps is matched to a centre audio frame
//! `c_j = floor((j + 0.5) · T_a / J)`. Its aligned audio state is a weighted
//! average over a `window`-wide neighbourhood of that centre with weights
//! `exp(−k² / 2σ²)`. Offsets that fall outside the sequence are dropped and
//! the remaining weights renormalised, so every row is a convex combination.
//! The map is a fixed constant; no gradient flows into it.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentMap {
    audio_frames: usize,
    /// Row `j`: first nonzero column and the contiguous weights from there.
    rows: Vec<(usize, Vec<f64>)>,
    centers: Vec<usize>,
    window: usize,
    sigma: f64,
}

/// Centre audio frame for visual step `j`.
pub fn center_index(j: usize, audio_frames: usize, visual_frames: usize) -> usize {
    // (2j + 1) · T_a / (2J) in integers equals floor((j + 0.5) · T_a / J)
    ((2 * j + 1) * audio_frames) / (2 * visual_frames)
}

impl AlignmentMap {
    pub fn build(audio_frames: usize, visual_frames: usize, sigma: f64, window: usize) -> Result<Self> {
        if visual_frames == 0 {
            return Err(TensorError::Invalid("alignment needs at least one visual frame".into()));
        }
        if audio_frames < visual_frames {
            return Err(TensorError::Invalid(format!(
                "alignment needs at least as many audio frames as visual frames ({audio_frames} < {visual_frames})"
            )));
        }
        if window.is_multiple_of(2) {
            return Err(TensorError::Invalid(format!("window must be odd, got {window}")));
        }
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(TensorError::Invalid(format!("sigma must be positive and finite, got {sigma}")));
        }
        let half = (window / 2) as isize;
        let mut rows = Vec::with_capacity(visual_frames);
        let mut centers = Vec::with_capacity(visual_frames);
        for j in 0..visual_frames {
            let c = center_index(j, audio_frames, visual_frames);
            let lo = (c as isize - half).max(0) as usize;
            let hi = ((c as isize + half) as usize).min(audio_frames - 1);
            let raw: Vec<f64> = (lo..=hi)
                .map(|t| {
                    let k = t as f64 - c as f64;
                    (-k * k / (2.0 * sigma * sigma)).exp()
                })
                .collect();
            let total: f64 = raw.iter().sum();
            rows.push((lo, raw.into_iter().map(|w| w / total).collect()));
            centers.push(c);
        }
        Ok(Self {
            audio_frames,
            rows,
            centers,
            window,
            sigma,
        })
    }

    pub fn audio_frames(&self) -> usize {
        self.audio_frames
    }

    pub fn visual_frames(&self) -> usize {
        self.rows.len()
    }

    pub fn centers(&self) -> &[usize] {
        &self.centers
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Weight `[j, t]`.
    pub fn weight(&self, j: usize, t: usize) -> f64 {
        let (start, w) = &self.rows[j];
        if t >= *start && t < start + w.len() {
            w[t - start]
        } else {
            0.0
        }
    }

    /// Nonzero support of row `j` as `(first column, weights)`.
    pub fn row(&self, j: usize) -> (usize, &[f64]) {
        let (s, w) = &self.rows[j];
        (*s, w)
    }

    /// Dense `[J, T_a]` weight matrix.
    pub fn dense(&self) -> Tensor {
        let ta = self.audio_frames;
        let mut m = Tensor::zeros(&[self.rows.len(), ta]);
        for (j, (s, w)) in self.rows.iter().enumerate() {
            m.data_mut()[j * ta + s..j * ta + s + w.len()].copy_from_slice(w);
        }
        m
    }

    /// Aligned states `[B, J, D]` from audio states `[B, T_a, D]` on a tape.
    pub fn apply(&self, tape: &mut Tape, audio_states: Var) -> Result<Var> {
        let shape = tape.shape(audio_states);
        if shape.len() != 3 || shape[1] != self.audio_frames {
            return Err(TensorError::ShapeMismatch {
                op: "apply_alignment",
                lhs: shape.to_vec(),
                rhs: vec![self.rows.len(), self.audio_frames],
            });
        }
        let m = tape.constant(self.dense());
        tape.bmm_left(m, audio_states)
    }

    /// Aligned states `[J, D]` for a single sequence `[T_a, D]`.
    pub fn apply_tensor(&self, audio_states: &Tensor) -> Result<Tensor> {
        let s = audio_states.shape();
        if s.len() != 2 || s[0] != self.audio_frames {
            return Err(TensorError::ShapeMismatch {
                op: "apply_alignment",
                lhs: s.to_vec(),
                rhs: vec![self.rows.len(), self.audio_frames],
            });
        }
        let d = s[1];
        let mut out = Tensor::zeros(&[self.rows.len(), d]);
        for (j, (start, w)) in self.rows.iter().enumerate() {
            for (o, &wt) in w.iter().enumerate() {
                let src = &audio_states.data()[(start + o) * d..(start + o + 1) * d];
                for (dst, &v) in out.data_mut()[j * d..(j + 1) * d].iter_mut().zip(src) {
                    *dst += wt * v;
                }
            }
        }
        Ok(out)
    }

    /// CSV with one row per visual frame and one column per audio frame.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let header: Vec<String> = (0..self.audio_frames).map(|t| format!("a{t}")).collect();
        s.push_str("j,center,");
        s.push_str(&header.join(","));
        s.push('\n');
        for j in 0..self.rows.len() {
            s.push_str(&format!("{j},{}", self.centers[j]));
            for t in 0..self.audio_frames {
                s.push_str(&format!(",{:.17e}", self.weight(j, t)));
            }
            s.push('\n');
        }
        s
    }
}
