//! Layers and the teacher/student networks.
//!
//! Layers hold [`ParamId`]s into a [`ParamSet`] and build their forward
//! computation on the tape inside a [`Ctx`]. The same layer code therefore
//! serves training (tracked parameters), teacher inference (parameters bound
//! as constants) and finite-difference checks.

mod conv;
mod gru;
mod model;

pub use conv::{AudioFrontend, ResBlock1d, ResBlock2d, SeBlock, VisualFrontend};
pub use gru::{BiGru, EncoderOutput, GruCell};
pub use model::{Classifier, Frontend, ModelConfig, ModelOutput, Role};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A tape plus the parameter bindings and dropout stream for one forward pass.
pub struct Ctx {
    pub tape: Tape,
    vars: Vec<Var>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl Ctx {
    /// Bind every parameter onto a fresh tape. With `track == false` the
    /// parameters are constants and nothing computed from them gets a gradient.
    pub fn new(params: &ParamSet, track: bool, mode: Mode, dropout_seed: u64) -> Self {
        let mut tape = Tape::new();
        let vars = params
            .tensors()
            .iter()
            .map(|t| {
                if track {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Self {
            tape,
            vars,
            mode,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
        }
    }

    /// Bind explicit tensors (already on the tape) as the parameters.
    pub fn with_vars(tape: Tape, vars: Vec<Var>, mode: Mode, dropout_seed: u64) -> Self {
        Self {
            tape,
            vars,
            mode,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
        }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Inverted dropout in training mode; identity in evaluation mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        match self.mode {
            Mode::Eval => Ok(x),
            Mode::Train => self.tape.dropout(x, rate, &mut self.rng),
        }
    }

    /// Gradients for every bound parameter, in [`ParamSet`] order.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(self.tape.value(v).shape()))
            })
            .collect()
    }
}

/// Finite-difference check of a scalar built from every tensor in `params`.
///
/// `build` runs on a fresh [`Ctx`] for each evaluation with the dropout
/// stream reseeded the same way every time, so masks repeat exactly.
pub fn check_params<F>(
    params: &ParamSet,
    mode: Mode,
    cfg: GradCheckConfig,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    finite_diff_check(
        |tape, vars| {
            let mut ctx = Ctx::with_vars(std::mem::take(tape), vars.to_vec(), mode, 0);
            let out = build(&mut ctx);
            *tape = ctx.tape;
            out
        },
        params.tensors(),
        cfg,
    )
}

/// Fully connected layer `x · W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: rand::Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = params.add_uniform(format!("{name}.w"), &[in_dim, out_dim], bound, rng);
        let b = params.add_zeros(format!("{name}.b"), &[out_dim]);
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// Apply to `x: [.., in]`, flattening leading axes.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let lead: Vec<usize> = shape[..shape.len().saturating_sub(1)].to_vec();
        let rows: usize = lead.iter().product();
        let flat = if shape.len() == 2 {
            x
        } else {
            ctx.tape.reshape(x, &[rows, *shape.last().unwrap_or(&1)])?
        };
        let y = ctx.tape.matmul(flat, ctx.p(self.w))?;
        let y = ctx.tape.add_bias(y, ctx.p(self.b))?;
        if shape.len() == 2 {
            Ok(y)
        } else {
            let mut out = lead;
            out.push(self.out_dim);
            ctx.tape.reshape(y, &out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_and_hand_example() {
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut p, "fc", 2, 2, &mut rng);
        *p.get_mut(lin.w) = Tensor::identity(2);
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let x = ctx.input(Tensor::matrix(&[&[0.25, -3.0]]).unwrap());
        let y = lin.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.value(y).data(), &[0.25, -3.0]);

        let mut p = ParamSet::new();
        let lin = Linear::new(&mut p, "fc", 2, 1, &mut rng);
        *p.get_mut(lin.w) = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        *p.get_mut(lin.b) = Tensor::vector(&[1.0]);
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let x = ctx.input(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let y = lin.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.value(y).data(), &[3.0]);
    }

    #[test]
    fn linear_rejects_shape_mismatch() {
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut p, "fc", 3, 2, &mut rng);
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let x = ctx.input(Tensor::zeros(&[4, 2]));
        assert!(lin.forward(&mut ctx, x).is_err());
    }

    #[test]
    fn linear_gradcheck() {
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::new(&mut p, "fc", 3, 2, &mut rng);
        *p.get_mut(lin.b) = Tensor::vector(&[0.1, -0.2]);
        let x = Tensor::from_fn(&[2, 4, 3], |i| ((i * 7 % 11) as f64 / 11.0) - 0.5);
        let r = check_params(&p, Mode::Eval, GradCheckConfig::default(), |ctx| {
            let xin = ctx.input(x.clone());
            let y = lin.forward(ctx, xin)?;
            let y = ctx.tape.tanh(y)?;
            Ok(ctx.tape.sum_all(y))
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
