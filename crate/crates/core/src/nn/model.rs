use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AudioFrontend, BiGru, Ctx, EncoderOutput, Linear, VisualFrontend};
use crate::autodiff::Var;
use crate::error::{Result, TensorError};
use crate::params::ParamSet;

/// Architecture shared by the audio teacher and the visual student.
///
/// There is a single `hidden` size, so both encoders always produce
/// `2 * hidden`-dimensional states and the distillation losses need no
/// projection between them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub visual_frames: usize,
    /// Raw image channels before the optional word-boundary channel.
    pub visual_channels: usize,
    pub visual_height: usize,
    pub visual_width: usize,
    pub audio_frames: usize,
    pub audio_bins: usize,
    pub visual_widths: Vec<usize>,
    pub audio_widths: Vec<usize>,
    /// Output width of the visual front-end's per-frame linear layer.
    pub visual_embed: usize,
    /// Output width of the audio front-end's per-frame linear layer.
    pub audio_embed: usize,
    pub kernel: usize,
    pub se_reduction: usize,
    pub hidden: usize,
    pub gru_layers: usize,
    pub num_classes: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            visual_frames: 29,
            visual_channels: 1,
            visual_height: 16,
            visual_width: 16,
            audio_frames: 139,
            audio_bins: 20,
            visual_widths: vec![8, 16],
            audio_widths: vec![32, 32, 32],
            visual_embed: 32,
            audio_embed: 16,
            kernel: 3,
            se_reduction: 4,
            hidden: 64,
            gru_layers: 3,
            num_classes: 20,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let positive = [
            ("visual_frames", self.visual_frames),
            ("visual_channels", self.visual_channels),
            ("visual_height", self.visual_height),
            ("visual_width", self.visual_width),
            ("audio_frames", self.audio_frames),
            ("audio_bins", self.audio_bins),
            ("audio_embed", self.audio_embed),
            ("visual_embed", self.visual_embed),
            ("se_reduction", self.se_reduction),
            ("hidden", self.hidden),
            ("gru_layers", self.gru_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("model.{name} must be positive"));
            }
        }
        if self.num_classes < 2 {
            return Err("model.num_classes must be at least 2".into());
        }
        if self.kernel.is_multiple_of(2) {
            return Err(format!("model.kernel must be odd, got {}", self.kernel));
        }
        if self.visual_widths.is_empty() || self.visual_widths.contains(&0) {
            return Err("model.visual_widths must be non-empty and positive".into());
        }
        if self.audio_widths.is_empty() || self.audio_widths.contains(&0) {
            return Err("model.audio_widths must be non-empty and positive".into());
        }
        let pools = self.visual_widths.len();
        if (self.visual_height >> pools) == 0 || (self.visual_width >> pools) == 0 {
            return Err("model.visual_widths: too many blocks for the frame size".into());
        }
        if self.audio_frames < self.kernel {
            return Err("model.audio_frames shorter than the convolution kernel".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("model.dropout must be in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// Visual input channels including the word-boundary indicator when used.
    pub fn visual_in_channels(&self, word_boundary: bool) -> usize {
        self.visual_channels + usize::from(word_boundary)
    }

    pub fn encoder_dim(&self) -> usize {
        2 * self.hidden
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Audio recogniser.
    Teacher,
    /// Lipreading model.
    Student,
}

#[derive(Clone, Debug)]
pub enum Frontend {
    Visual(VisualFrontend),
    Audio(AudioFrontend),
}

/// Front-end, bidirectional GRU backend, pooled classifier head.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub role: Role,
    pub frontend: Frontend,
    pub encoder: BiGru,
    pub head: Linear,
    pub dropout: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub encoder: EncoderOutput,
    /// `[B, N]` pre-softmax scores.
    pub logits: Var,
}

impl Classifier {
    /// Build the network and initialise its parameters from `seed`.
    pub fn new(cfg: &ModelConfig, role: Role, word_boundary: bool, seed: u64) -> (Self, ParamSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let (frontend, d_in) = match role {
            Role::Student => {
                let fe = VisualFrontend::new(
                    &mut params,
                    "frontend",
                    cfg.visual_in_channels(word_boundary),
                    (cfg.visual_height, cfg.visual_width),
                    &cfg.visual_widths,
                    cfg.kernel,
                    cfg.se_reduction,
                    cfg.visual_embed,
                    cfg.dropout,
                    &mut rng,
                );
                let d = fe.output_dim();
                (Frontend::Visual(fe), d)
            }
            Role::Teacher => {
                let fe = AudioFrontend::new(
                    &mut params,
                    "frontend",
                    cfg.audio_bins,
                    &cfg.audio_widths,
                    cfg.kernel,
                    cfg.audio_embed,
                    &mut rng,
                );
                let d = fe.output_dim();
                (Frontend::Audio(fe), d)
            }
        };
        let encoder = BiGru::new(
            &mut params,
            "encoder",
            d_in,
            cfg.hidden,
            cfg.gru_layers,
            cfg.dropout,
            &mut rng,
        );
        let head = Linear::new(
            &mut params,
            "head",
            encoder.output_dim(),
            cfg.num_classes,
            &mut rng,
        );
        (
            Self {
                role,
                frontend,
                encoder,
                head,
                dropout: cfg.dropout,
            },
            params,
        )
    }

    pub fn encoder_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Per-frame features from the front-end alone.
    pub fn features(&self, ctx: &mut Ctx, input: Var) -> Result<Var> {
        match &self.frontend {
            Frontend::Visual(fe) => fe.forward(ctx, input),
            Frontend::Audio(fe) => fe.forward(ctx, input),
        }
    }

    /// Classifier head: dropout then a linear map to class scores.
    pub fn classify(&self, ctx: &mut Ctx, sequence_vector: Var) -> Result<Var> {
        let d = ctx.tape.shape(sequence_vector).last().copied();
        if d != Some(self.head.in_dim) {
            return Err(TensorError::ShapeMismatch {
                op: "classifier_head",
                lhs: ctx.tape.shape(sequence_vector).to_vec(),
                rhs: vec![self.head.in_dim],
            });
        }
        let x = ctx.dropout(sequence_vector, self.dropout)?;
        self.head.forward(ctx, x)
    }

    /// Visual input `[B, T_v, C, H, W]` for the student, spectrogram
    /// `[B, T_a, F]` for the teacher.
    pub fn forward(&self, ctx: &mut Ctx, input: Var) -> Result<ModelOutput> {
        let feats = self.features(ctx, input)?;
        let encoder = self.encoder.forward(ctx, feats)?;
        let logits = self.classify(ctx, encoder.sequence_vector)?;
        Ok(ModelOutput { encoder, logits })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheckConfig;
    use crate::nn::{check_params, Mode};
    use crate::tensor::Tensor;
    use rand::Rng;

    #[test]
    fn default_config_is_valid_and_matched() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        let (t, _) = Classifier::new(&cfg, Role::Teacher, false, 0);
        let (s, _) = Classifier::new(&cfg, Role::Student, true, 0);
        assert_eq!(t.encoder_dim(), s.encoder_dim());
        assert_eq!(t.encoder_dim(), 128);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = [
            ModelConfig { num_classes: 1, ..Default::default() },
            ModelConfig { kernel: 4, ..Default::default() },
            ModelConfig { dropout: 1.0, ..Default::default() },
            ModelConfig { visual_widths: vec![], ..Default::default() },
            ModelConfig { hidden: 0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn zero_head_gives_uniform_scores() {
        let cfg = ModelConfig {
            hidden: 4,
            gru_layers: 1,
            num_classes: 5,
            ..Default::default()
        };
        let (m, mut p) = Classifier::new(&cfg, Role::Teacher, false, 1);
        p.get_mut(m.head.w).data_mut().fill(0.0);
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let sv = ctx.input(Tensor::from_fn(&[2, 8], |i| i as f64));
        let logits = m.classify(&mut ctx, sv).unwrap();
        let probs = ctx.tape.softmax(logits).unwrap();
        assert!(ctx.tape.value(probs).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn full_scale_head_has_500_outputs() {
        let cfg = ModelConfig {
            num_classes: 500,
            hidden: 4,
            gru_layers: 1,
            ..Default::default()
        };
        let (m, p) = Classifier::new(&cfg, Role::Student, false, 1);
        assert_eq!(p.get(m.head.w).shape(), &[8, 500]);
    }

    #[test]
    fn tiny_student_end_to_end_gradcheck() {
        let cfg = ModelConfig {
            visual_frames: 5,
            visual_height: 8,
            visual_width: 8,
            visual_widths: vec![2, 3],
            se_reduction: 2,
            hidden: 4,
            gru_layers: 3,
            num_classes: 3,
            dropout: 0.2,
            ..Default::default()
        };
        let (m, p) = Classifier::new(&cfg, Role::Student, true, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::from_fn(&[1, 5, 2, 8, 8], |_| rng.random_range(-1.0..1.0));
        // Train mode exercises dropout with a reproducible mask.
        let r = check_params(&p, Mode::Train, GradCheckConfig::default(), |ctx| {
            let xi = ctx.input(x.clone());
            let out = m.forward(ctx, xi)?;
            let lp = ctx.tape.log_softmax(out.logits)?;
            let pick = ctx.input(Tensor::new(vec![1, 3], vec![0.1, 0.8, 0.1]).unwrap());
            let l = ctx.tape.mul(lp, pick)?;
            let l = ctx.tape.sum_all(l);
            Ok(ctx.tape.scale(l, -1.0))
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
