//! Finite-difference checks over every layer and loss, on tiny shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::AlignmentMap;
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::gradcheck::{analytic_gradients, check_against, GradCheckConfig, GradCheckReport};
use crate::losses::{
    frame_kd_loss, label_smoothed_ce, seq_kd_loss, smoothed_targets, total_loss, DistillConfig,
};
use crate::nn::{
    AudioFrontend, BiGru, Classifier, Ctx, GruCell, Linear, Mode, ModelConfig, ResBlock1d,
    ResBlock2d, Role, SeBlock, VisualFrontend,
};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const COMPONENTS: [&str; 15] = [
    "linear",
    "gru_cell",
    "bigru_3layer",
    "se_block",
    "resblock2d",
    "resblock1d",
    "visual_frontend",
    "audio_frontend",
    "student_classifier",
    "teacher_classifier",
    "label_smoothed_ce",
    "seq_kd",
    "frame_kd",
    "alignment",
    "total_loss",
];

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: GradCheckReport,
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Scalar readout `Σ tanh(y) ⊙ r` with a fixed random `r`, so no gradient
/// cancels by symmetry.
fn readout(ctx: &mut Ctx, y: Var, r: &Tensor) -> Result<Var> {
    let t = ctx.tape.tanh(y)?;
    let rv = ctx.input(r.clone());
    let p = ctx.tape.mul(t, rv)?;
    Ok(ctx.tape.sum_all(p))
}

/// Wrap a layer objective so the parameter set is bound through a [`Ctx`].
fn layer<F>(mode: Mode, build: F) -> Objective
where
    F: Fn(&mut Ctx) -> Result<Var> + 'static,
{
    Box::new(move |tape: &mut Tape, vars: &[Var]| {
        let mut ctx = Ctx::with_vars(std::mem::take(tape), vars.to_vec(), mode, 0);
        let out = build(&mut ctx);
        *tape = ctx.tape;
        out
    })
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        visual_frames: 4,
        visual_height: 6,
        visual_width: 6,
        visual_widths: vec![2, 3],
        audio_frames: 9,
        audio_bins: 4,
        audio_widths: vec![3],
        audio_embed: 3,
        se_reduction: 2,
        hidden: 2,
        gru_layers: 1,
        num_classes: 3,
        dropout: 0.2,
        ..Default::default()
    }
}

fn build(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Objective) {
    let mut p = ParamSet::new();
    match name {
        "linear" => {
            let l = Linear::new(&mut p, "fc", 3, 2, rng);
            *p.get_mut(l.b) = uniform(rng, &[2], 0.5);
            let x = uniform(rng, &[2, 3, 3], 1.0);
            let r = uniform(rng, &[2, 3, 2], 1.0);
            (p.tensors().to_vec(), layer(Mode::Eval, move |ctx| {
                let xi = ctx.input(x.clone());
                let y = l.forward(ctx, xi)?;
                readout(ctx, y, &r)
            }))
        }
        "gru_cell" => {
            let c = GruCell::new(&mut p, "gru", 3, 2, rng);
            *p.get_mut(c.b) = uniform(rng, &[6], 0.5);
            let x = uniform(rng, &[2, 5, 3], 1.0);
            let r = uniform(rng, &[2, 5, 2], 1.0);
            (p.tensors().to_vec(), layer(Mode::Eval, move |ctx| {
                let xi = ctx.input(x.clone());
                let y = c.scan(ctx, xi, false)?;
                readout(ctx, y, &r)
            }))
        }
        "bigru_3layer" => {
            let g = BiGru::new(&mut p, "enc", 3, 2, 3, 0.2, rng);
            let x = uniform(rng, &[1, 4, 3], 1.0);
            let r = uniform(rng, &[1, 4, 4], 1.0);
            let rs = uniform(rng, &[1, 4], 1.0);
            (p.tensors().to_vec(), layer(Mode::Train, move |ctx| {
                let xi = ctx.input(x.clone());
                let o = g.forward(ctx, xi)?;
                let a = readout(ctx, o.frame_states, &r)?;
                let b = readout(ctx, o.sequence_vector, &rs)?;
                ctx.tape.add(a, b)
            }))
        }
        "se_block" => {
            let se = SeBlock::new(&mut p, "se", 4, 2, rng);
            let x = uniform(rng, &[2, 4, 3, 3], 1.0);
            let r = uniform(rng, &[2, 4, 3, 3], 1.0);
            (p.tensors().to_vec(), layer(Mode::Eval, move |ctx| {
                let xi = ctx.input(x.clone());
                let y = se.forward(ctx, xi)?;
                readout(ctx, y, &r)
            }))
        }
        "resblock2d" => {
            let b = ResBlock2d::new(&mut p, "res", 2, 4, 3, Some(2), rng);
            let x = uniform(rng, &[1, 2, 4, 4], 1.0);
            let r = uniform(rng, &[1, 4, 4, 4], 1.0);
            (p.tensors().to_vec(), layer(Mode::Eval, move |ctx| {
                let xi = ctx.input(x.clone());
                let y = b.forward(ctx, xi)?;
                readout(ctx, y, &r)
            }))
        }
        "resblock1d" => {
            let b = ResBlock1d::new(&mut p, "res", 2, 3, 3, rng);
            let x = uniform(rng, &[2, 5, 2], 1.0);
            let r = uniform(rng, &[2, 5, 3], 1.0);
            (p.tensors().to_vec(), layer(Mode::Eval, move |ctx| {
                let xi = ctx.input(x.clone());
                let y = b.forward(ctx, xi)?;
                readout(ctx, y, &r)
            }))
        }
        "visual_frontend" => {
            let fe = VisualFrontend::new(&mut p, "fe", 2, (4, 4), &[2, 3], 3, 2, 3, 0.2, rng);
            let x = uniform(rng, &[1, 3, 2, 4, 4], 1.0);
            let r = uniform(rng, &[1, 3, 3], 1.0);
            (p.tensors().to_vec(), layer(Mode::Train, move |ctx| {
                let xi = ctx.input(x.clone());
                let y = fe.forward(ctx, xi)?;
                readout(ctx, y, &r)
            }))
        }
        "audio_frontend" => {
            let fe = AudioFrontend::new(&mut p, "fe", 3, &[2, 2], 3, 2, rng);
            let x = uniform(rng, &[1, 6, 3], 1.0);
            let r = uniform(rng, &[1, 6, 2], 1.0);
            (p.tensors().to_vec(), layer(Mode::Eval, move |ctx| {
                let xi = ctx.input(x.clone());
                let y = fe.forward(ctx, xi)?;
                readout(ctx, y, &r)
            }))
        }
        "student_classifier" | "teacher_classifier" => {
            let cfg = tiny_model();
            let (role, shape) = if name == "student_classifier" {
                (Role::Student, vec![1, 4, 2, 6, 6])
            } else {
                (Role::Teacher, vec![1, 9, 4])
            };
            let (m, params) = Classifier::new(&cfg, role, true, rng.random());
            let x = uniform(rng, &shape, 1.0);
            let q = smoothed_targets(&[1], 3, 0.1).expect("valid label");
            (params.tensors().to_vec(), layer(Mode::Train, move |ctx| {
                let xi = ctx.input(x.clone());
                let o = m.forward(ctx, xi)?;
                let qi = ctx.input(q.clone());
                label_smoothed_ce(&mut ctx.tape, o.logits, qi)
            }))
        }
        "label_smoothed_ce" => {
            let logits = uniform(rng, &[3, 5], 2.0);
            let q = smoothed_targets(&[0, 4, 2], 5, 0.1).expect("valid labels");
            (vec![logits], Box::new(move |t: &mut Tape, v: &[Var]| {
                let qi = t.constant(q.clone());
                label_smoothed_ce(t, v[0], qi)
            }))
        }
        "seq_kd" => {
            let sa = uniform(rng, &[2, 4], 1.0);
            let sv = uniform(rng, &[2, 4], 1.0);
            (vec![sv], Box::new(move |t: &mut Tape, v: &[Var]| {
                let a = t.constant(sa.clone());
                seq_kd_loss(t, a, v[0])
            }))
        }
        "frame_kd" => {
            let map = AlignmentMap::build(12, 4, 3.0, 7).expect("valid map");
            let ha = uniform(rng, &[2, 12, 3], 1.0);
            let hv = uniform(rng, &[2, 4, 3], 1.0);
            (vec![hv], Box::new(move |t: &mut Tape, v: &[Var]| {
                let a = t.constant(ha.clone());
                let aligned = map.apply(t, a)?;
                frame_kd_loss(t, v[0], aligned)
            }))
        }
        "alignment" => {
            let map = AlignmentMap::build(13, 5, 2.0, 5).expect("valid map");
            let h = uniform(rng, &[1, 13, 3], 1.0);
            let r = uniform(rng, &[1, 5, 3], 1.0);
            (vec![h], Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = map.apply(t, v[0])?;
                let ri = t.constant(r.clone());
                let p = t.mul(y, ri)?;
                Ok(t.sum_all(p))
            }))
        }
        "total_loss" => {
            // tiny student distilled from fixed teacher states
            let cfg = tiny_model();
            let (m, params) = Classifier::new(&cfg, Role::Student, true, rng.random());
            let x = uniform(rng, &[2, 4, 2, 6, 6], 1.0);
            let q = smoothed_targets(&[0, 2], 3, 0.1).expect("valid labels");
            let sa = uniform(rng, &[2, 4], 1.0);
            let ha = uniform(rng, &[2, 9, 4], 1.0);
            let map = AlignmentMap::build(9, 4, 3.0, 7).expect("valid map");
            let dc = DistillConfig::default();
            (params.tensors().to_vec(), layer(Mode::Train, move |ctx| {
                let xi = ctx.input(x.clone());
                let o = m.forward(ctx, xi)?;
                let qi = ctx.input(q.clone());
                let base = label_smoothed_ce(&mut ctx.tape, o.logits, qi)?;
                let s = ctx.input(sa.clone());
                let k1 = seq_kd_loss(&mut ctx.tape, s, o.encoder.sequence_vector)?;
                let h = ctx.input(ha.clone());
                let aligned = map.apply(&mut ctx.tape, h)?;
                let k2 = frame_kd_loss(&mut ctx.tape, o.encoder.frame_states, aligned)?;
                total_loss(&mut ctx.tape, base, Some(k1), Some(k2), &dc)
            }))
        }
        other => unreachable!("unknown gradient-suite component {other}"),
    }
}

/// Check one component. With `corrupt`, the first analytic gradient element
/// is shifted before comparison so a working harness must fail it.
pub fn check_component(name: &str, seed: u64, corrupt: bool, cfg: GradCheckConfig) -> Result<GradCheckReport> {
    let idx = COMPONENTS.iter().position(|c| *c == name).unwrap_or(COMPONENTS.len()) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (idx << 32));
    let (params, f) = build(name, &mut rng);
    let mut analytic = analytic_gradients(&f, &params)?;
    if corrupt {
        let g = &mut analytic[0].data_mut()[0];
        *g += 0.1 * g.abs().max(1.0);
    }
    check_against(&f, &params, &analytic, cfg)
}

/// Run every component at one seed; `corrupt` names a component to sabotage.
pub fn run_suite(seed: u64, corrupt: Option<&str>) -> Result<Vec<SuiteEntry>> {
    COMPONENTS
        .iter()
        .map(|&name| {
            let report = check_component(name, seed, corrupt == Some(name), GradCheckConfig::default())?;
            Ok(SuiteEntry { name, report })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_component_passes() {
        for e in run_suite(0, None).unwrap() {
            assert!(e.report.passed, "{}: {:?}", e.name, e.report);
            assert!(e.report.checked > 0);
        }
    }

    #[test]
    fn corruption_is_caught() {
        let r = check_component("seq_kd", 0, true, GradCheckConfig::default()).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst, Some((0, 0)));
    }
}
