//! Teacher pretraining, student distillation, evaluation and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub use optim::{cosine_lr, Adam, AdamConfig};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::AlignmentMap;
use crate::autodiff::Var;
use crate::data::{attach_word_boundary_indicator, spec_augment, word_isolate, AvSample, Dataset};
use crate::error::{Result, TensorError};
use crate::losses::{
    frame_kd_loss, label_smoothed_ce, mixup_batch, sample_mixup_lambda, seq_kd_loss,
    smoothed_targets, total_loss, DistillConfig,
};
use crate::nn::{Classifier, Ctx, Mode, ModelConfig, Role};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Zero teacher audio outside the word.
    pub word_isolation: bool,
    /// Training-time time/frequency masking of teacher audio.
    pub spec_augment: bool,
    /// Extra visual channel marking the word frames (student).
    pub word_boundary: bool,
    pub max_time_mask: usize,
    pub max_freq_mask: usize,
    /// Stop after this many optimizer steps; the cosine schedule spans the
    /// shorter of this and the full epoch budget.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 3e-4,
            epochs: 30,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
            word_isolation: true,
            spec_augment: true,
            word_boundary: true,
            max_time_mask: 20,
            max_freq_mask: 4,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return Err(format!("train.initial_lr must be > 0, got {}", self.initial_lr));
        }
        if self.epochs == 0 {
            return Err("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return Err("train.batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("train.beta1 and train.beta2 must be in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err("train.adam_eps must be > 0 and train.weight_decay >= 0".into());
        }
        if self.max_steps == Some(0) {
            return Err("train.max_steps must be at least 1".into());
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// One optimizer step's logged values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss_base: f64,
    pub loss_kd1: f64,
    pub loss_kd2: f64,
    pub loss_total: f64,
}

/// Per-epoch summary; one JSON line each in the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss_base: f64,
    pub loss_kd1: f64,
    pub loss_kd2: f64,
    pub loss_total: f64,
    pub train_top1: f64,
    pub val_top1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation Top-1.
    pub best: Checkpoint,
    pub final_params: ParamSet,
    pub metrics: Vec<EpochMetrics>,
    pub steps: Vec<StepRecord>,
}

pub fn write_metrics_jsonl(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| TensorError::Invalid(format!("{}: {e}", path.display())))?;
    for m in metrics {
        let line = serde_json::to_string(m).map_err(|e| TensorError::Invalid(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| TensorError::Invalid(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn derive_seed(seed: u64, purpose: u64, k: u64) -> u64 {
    splitmix(splitmix(seed ^ splitmix(purpose)) ^ k)
}

const INIT: u64 = 1;
const DATA: u64 = 2;
const DROPOUT: u64 = 3;

/// How raw samples become network inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputPrep {
    pub word_boundary: bool,
    pub word_isolation: bool,
}

impl InputPrep {
    pub fn for_checkpoint(ck: &Checkpoint) -> Self {
        Self {
            word_boundary: ck.train.word_boundary && ck.role == Role::Student,
            word_isolation: ck.train.word_isolation,
        }
    }
}

/// `[B, T_v, C, H, W]`, with the boundary channel when requested.
pub fn visual_batch(samples: &[&AvSample], word_boundary: bool) -> Result<Tensor> {
    let frames = samples
        .iter()
        .map(|s| {
            if word_boundary {
                attach_word_boundary_indicator(&s.visual, s.boundary_v)
            } else {
                Ok(s.visual.clone())
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&frames)
}

/// `[B, T_a, F]` after optional word isolation and training-time masking.
pub fn audio_batch(
    samples: &[&AvSample],
    word_isolation: bool,
    mut masking: Option<(usize, usize, &mut ChaCha8Rng)>,
) -> Result<Tensor> {
    let specs = samples
        .iter()
        .map(|s| {
            let a = if word_isolation {
                word_isolate(&s.audio, s.boundary_a)?
            } else {
                s.audio.clone()
            };
            match masking.as_mut() {
                Some((tm, fm, rng)) => spec_augment(&a, *tm, *fm, *rng),
                None => Ok(a),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&specs)
}

fn model_input(role: Role, samples: &[&AvSample], prep: InputPrep) -> Result<Tensor> {
    match role {
        Role::Student => visual_batch(samples, prep.word_boundary),
        Role::Teacher => audio_batch(samples, prep.word_isolation, None),
    }
}

const EVAL_BATCH: usize = 32;

/// Predicted class per sample in evaluation mode.
pub fn predict(model: &Classifier, params: &ParamSet, samples: &[AvSample], prep: InputPrep) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&AvSample> = chunk.iter().collect();
        let x = model_input(model.role, &refs, prep)?;
        let mut ctx = Ctx::new(params, false, Mode::Eval, 0);
        let xi = ctx.input(x);
        let o = model.forward(&mut ctx, xi)?;
        out.extend(ctx.tape.value(o.logits).argmax_rows());
    }
    Ok(out)
}

/// Fraction of samples whose top-scoring class is the label.
pub fn evaluate_top1(model: &Classifier, params: &ParamSet, samples: &[AvSample], prep: InputPrep) -> Result<f64> {
    if samples.is_empty() {
        return Err(TensorError::Empty("evaluate_top1"));
    }
    let pred = predict(model, params, samples, prep)?;
    let correct = pred.iter().zip(samples).filter(|(p, s)| **p == s.label).count();
    Ok(correct as f64 / samples.len() as f64)
}

pub fn evaluate_checkpoint(ck: &Checkpoint, samples: &[AvSample]) -> Result<f64> {
    evaluate_top1(&ck.classifier(), &ck.params, samples, InputPrep::for_checkpoint(ck))
}

fn check_dataset(ds: &Dataset, cfg: &ModelConfig) -> Result<()> {
    let d = &ds.config;
    let ok = d.visual_frames == cfg.visual_frames
        && d.height == cfg.visual_height
        && d.width == cfg.visual_width
        && cfg.visual_channels == 1
        && d.audio_frames == cfg.audio_frames
        && d.audio_bins == cfg.audio_bins
        && d.num_classes == cfg.num_classes;
    if !ok {
        return Err(TensorError::Invalid(
            "dataset geometry (frames, size, bins, classes) does not match the model config".into(),
        ));
    }
    if ds.train.is_empty() {
        return Err(TensorError::Empty("training split"));
    }
    Ok(())
}

/// Frozen teacher evaluated in eval mode with parameters bound as constants.
struct TeacherView<'a> {
    model: Classifier,
    params: &'a ParamSet,
    word_isolation: bool,
    map: AlignmentMap,
}

impl TeacherView<'_> {
    /// Sequence vectors `[B, D]` and aligned frame states `[B, J, D]`.
    fn targets(&self, audio: Tensor) -> Result<(Tensor, Tensor)> {
        let mut ctx = Ctx::new(self.params, false, Mode::Eval, 0);
        let a = ctx.input(audio);
        let out = self.model.forward(&mut ctx, a)?;
        let aligned = self.map.apply(&mut ctx.tape, out.encoder.frame_states)?;
        Ok((
            ctx.tape.value(out.encoder.sequence_vector).clone(),
            ctx.tape.value(aligned).clone(),
        ))
    }
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    Tensor::stack(&idx.iter().map(|&i| t.index0(i)).collect::<Vec<_>>())
}

struct Run<'a> {
    role: Role,
    ds: &'a Dataset,
    model_cfg: &'a ModelConfig,
    cfg: &'a TrainConfig,
    distill: DistillConfig,
    teacher: Option<TeacherView<'a>>,
}

impl Run<'_> {
    fn prep(&self) -> InputPrep {
        InputPrep {
            word_boundary: self.cfg.word_boundary && self.role == Role::Student,
            word_isolation: self.cfg.word_isolation,
        }
    }

    fn execute(self) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        let (model, mut params) = Classifier::new(
            self.model_cfg,
            self.role,
            self.prep().word_boundary,
            derive_seed(cfg.seed, INIT, 0),
        );
        let mut adam = Adam::new(params.tensors(), cfg.adam());
        let n = self.ds.train.len();
        let steps_per_epoch = n.div_ceil(cfg.batch_size);
        let total_steps = match cfg.max_steps {
            Some(m) => m.min(cfg.epochs * steps_per_epoch),
            None => cfg.epochs * steps_per_epoch,
        };
        let data_seed = derive_seed(cfg.seed, DATA, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
        let kd = self.teacher.is_some() && (self.distill.kd1_enabled || self.distill.kd2_enabled);

        // Without mixup the teacher sees fixed inputs, so its outputs are computed once.
        let cache = match &self.teacher {
            Some(t) if kd && !self.distill.mixup_enabled => {
                let mut seqs = Vec::new();
                let mut frames = Vec::new();
                for chunk in self.ds.train.chunks(EVAL_BATCH) {
                    let refs: Vec<&AvSample> = chunk.iter().collect();
                    let (s, f) = t.targets(audio_batch(&refs, t.word_isolation, None)?)?;
                    for i in 0..refs.len() {
                        seqs.push(s.index0(i));
                        frames.push(f.index0(i));
                    }
                }
                Some((Tensor::stack(&seqs)?, Tensor::stack(&frames)?))
            }
            _ => None,
        };

        let mut order: Vec<usize> = (0..n).collect();
        let mut steps = Vec::with_capacity(total_steps);
        let mut metrics = Vec::new();
        let mut best: Option<Checkpoint> = None;
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            if step >= total_steps {
                break;
            }
            order.shuffle(&mut rng);
            let first = steps.len();
            let mut correct = 0usize;
            let mut seen = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                if step >= total_steps {
                    break;
                }
                let lr = cosine_lr(step, total_steps, cfg.initial_lr);
                let rec = self
                    .step(&model, &mut params, &mut adam, &mut rng, cache.as_ref(), batch, step, epoch, lr)
                    .map_err(|e| match e {
                        TensorError::NaN(_) => TensorError::Diverged { step, what: "activation" },
                        other => other,
                    })?;
                correct += rec.1;
                seen += batch.len();
                steps.push(rec.0);
                step += 1;
            }
            let ep = &steps[first..];
            let k = ep.len() as f64;
            let mean = |f: fn(&StepRecord) -> f64| ep.iter().map(f).sum::<f64>() / k;
            let val_top1 = if self.ds.val.is_empty() {
                0.0
            } else {
                evaluate_top1(&model, &params, &self.ds.val, self.prep())?
            };
            let m = EpochMetrics {
                epoch,
                lr: ep[0].lr,
                loss_base: mean(|r| r.loss_base),
                loss_kd1: mean(|r| r.loss_kd1),
                loss_kd2: mean(|r| r.loss_kd2),
                loss_total: mean(|r| r.loss_total),
                train_top1: correct as f64 / seen as f64,
                val_top1,
            };
            if best.as_ref().is_none_or(|b| val_top1 > b.metrics.as_ref().map_or(-1.0, |x| x.val_top1)) {
                best = Some(Checkpoint {
                    role: self.role,
                    model: self.model_cfg.clone(),
                    train: cfg.clone(),
                    distill: (self.role == Role::Student).then(|| self.distill.clone()),
                    epoch,
                    rng: RngState {
                        seed: data_seed,
                        word_pos: rng.get_word_pos().to_string(),
                    },
                    metrics: Some(m.clone()),
                    params: params.clone(),
                });
            }
            metrics.push(m);
        }
        Ok(TrainOutcome {
            best: best.expect("at least one epoch runs"),
            final_params: params,
            metrics,
            steps,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn step(
        &self,
        model: &Classifier,
        params: &mut ParamSet,
        adam: &mut Adam,
        rng: &mut ChaCha8Rng,
        cache: Option<&(Tensor, Tensor)>,
        batch: &[usize],
        step: usize,
        epoch: usize,
        lr: f64,
    ) -> Result<(StepRecord, usize)> {
        let cfg = self.cfg;
        let samples: Vec<&AvSample> = batch.iter().map(|&i| &self.ds.train[i]).collect();
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let mut targets = smoothed_targets(&labels, self.model_cfg.num_classes, self.distill.epsilon)?;
        let prep = self.prep();

        let teacher_wi = self.teacher.as_ref().map(|t| t.word_isolation);
        let need_audio = self.role == Role::Teacher || (teacher_wi.is_some() && cache.is_none());
        let mut visual = if self.role == Role::Student {
            Some(visual_batch(&samples, prep.word_boundary)?)
        } else {
            None
        };
        let mut audio = if need_audio {
            let wi = teacher_wi.unwrap_or(cfg.word_isolation);
            let masking = (self.role == Role::Teacher && cfg.spec_augment)
                .then_some((cfg.max_time_mask, cfg.max_freq_mask, &mut *rng));
            Some(audio_batch(&samples, wi, masking)?)
        } else {
            None
        };

        if self.distill.mixup_enabled {
            let lambda = sample_mixup_lambda(self.distill.mixup_alpha, rng)?;
            let mut perm: Vec<usize> = (0..batch.len()).collect();
            perm.shuffle(rng);
            let placeholder = Tensor::zeros(&[batch.len(), 1]);
            let v = visual.clone().unwrap_or_else(|| placeholder.clone());
            let a = audio.clone().unwrap_or_else(|| placeholder.clone());
            let mixed = mixup_batch(
                (&v, &a, &targets),
                (&gather_rows(&v, &perm)?, &gather_rows(&a, &perm)?, &gather_rows(&targets, &perm)?),
                lambda,
            )?;
            if visual.is_some() {
                visual = Some(mixed.visual);
            }
            if audio.is_some() {
                audio = Some(mixed.audio);
            }
            targets = mixed.targets;
        }

        // Teacher targets: constants, never on the student's gradient path.
        let kd_targets = match (&self.teacher, cache) {
            (Some(_), Some((s, f))) => Some((gather_rows(s, batch)?, gather_rows(f, batch)?)),
            (Some(t), None) if self.distill.kd1_enabled || self.distill.kd2_enabled => {
                Some(t.targets(audio.clone().expect("teacher audio prepared"))?)
            }
            _ => None,
        };

        let input = match self.role {
            Role::Student => visual.expect("student input"),
            Role::Teacher => audio.expect("teacher input"),
        };
        let mut ctx = Ctx::new(params, true, Mode::Train, derive_seed(cfg.seed, DROPOUT, step as u64));
        let x = ctx.input(input);
        let out = model.forward(&mut ctx, x)?;
        let q = ctx.input(targets);
        let base = label_smoothed_ce(&mut ctx.tape, out.logits, q)?;
        let (mut kd1, mut kd2): (Option<Var>, Option<Var>) = (None, None);
        if let Some((s_a, h_a)) = kd_targets {
            if self.distill.kd1_enabled {
                let s = ctx.input(s_a);
                kd1 = Some(seq_kd_loss(&mut ctx.tape, s, out.encoder.sequence_vector)?);
            }
            if self.distill.kd2_enabled {
                let h = ctx.input(h_a);
                kd2 = Some(frame_kd_loss(&mut ctx.tape, out.encoder.frame_states, h)?);
            }
        }
        let total = total_loss(&mut ctx.tape, base, kd1, kd2, &self.distill)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| ctx.tape.value(v).item());
        let rec = StepRecord {
            step,
            epoch,
            lr,
            loss_base: ctx.tape.value(base).item(),
            loss_kd1: value(kd1),
            loss_kd2: value(kd2),
            loss_total: ctx.tape.value(total).item(),
        };
        if !rec.loss_total.is_finite() {
            return Err(TensorError::Diverged { step, what: "loss" });
        }
        let correct = ctx
            .tape
            .value(out.logits)
            .argmax_rows()
            .iter()
            .zip(&labels)
            .filter(|(p, y)| p == y)
            .count();
        let mut grads = ctx.tape.backward(total)?;
        let g = ctx.param_grads(&mut grads);
        adam.step(params.tensors_mut(), &g, lr).map_err(|e| match e {
            TensorError::NaN(_) => TensorError::Diverged { step, what: "gradient" },
            other => other,
        })?;
        Ok((rec, correct))
    }
}

/// Train the audio teacher with label-smoothed cross-entropy.
pub fn train_teacher(ds: &Dataset, model_cfg: &ModelConfig, cfg: &TrainConfig, epsilon: f64) -> Result<TrainOutcome> {
    model_cfg.validate().map_err(TensorError::Invalid)?;
    cfg.validate().map_err(TensorError::Invalid)?;
    check_dataset(ds, model_cfg)?;
    let distill = DistillConfig {
        epsilon,
        kd1_enabled: false,
        kd2_enabled: false,
        mixup_enabled: false,
        ..Default::default()
    };
    distill.validate().map_err(TensorError::Invalid)?;
    Run {
        role: Role::Teacher,
        ds,
        model_cfg,
        cfg,
        distill,
        teacher: None,
    }
    .execute()
}

/// Train the visual student against a frozen teacher.
pub fn train_student(
    ds: &Dataset,
    teacher: &Checkpoint,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    distill: &DistillConfig,
) -> Result<TrainOutcome> {
    model_cfg.validate().map_err(TensorError::Invalid)?;
    cfg.validate().map_err(TensorError::Invalid)?;
    distill.validate().map_err(TensorError::Invalid)?;
    check_dataset(ds, model_cfg)?;
    if teacher.role != Role::Teacher {
        return Err(TensorError::Invalid("checkpoint passed as teacher is a student".into()));
    }
    if teacher.model.encoder_dim() != model_cfg.encoder_dim() {
        return Err(TensorError::ShapeMismatch {
            op: "teacher/student encoder",
            lhs: vec![teacher.model.encoder_dim()],
            rhs: vec![model_cfg.encoder_dim()],
        });
    }
    if teacher.model.audio_frames != ds.config.audio_frames || teacher.model.audio_bins != ds.config.audio_bins {
        return Err(TensorError::Invalid("teacher audio geometry does not match the dataset".into()));
    }
    let map = AlignmentMap::build(
        teacher.model.audio_frames,
        model_cfg.visual_frames,
        distill.sigma,
        distill.window,
    )?;
    Run {
        role: Role::Student,
        ds,
        model_cfg,
        cfg,
        distill: distill.clone(),
        teacher: Some(TeacherView {
            model: teacher.classifier(),
            params: &teacher.params,
            word_isolation: teacher.train.word_isolation,
            map,
        }),
    }
    .execute()
}
