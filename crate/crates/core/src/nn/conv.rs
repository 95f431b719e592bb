//! Convolutional front-ends: squeeze-and-excitation, residual blocks, and the
//! per-frame visual and per-utterance audio feature extractors.

use rand::Rng;

use super::{Ctx, Linear};
use crate::autodiff::Var;
use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamSet};

/// Channel gate `sigmoid(W₂ · relu(W₁ · squeeze(x)))`.
#[derive(Clone, Debug)]
pub struct SeBlock {
    /// `[C, C/r]`
    pub w1: ParamId,
    /// `[C/r, C]`
    pub w2: ParamId,
    pub channels: usize,
}

impl SeBlock {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        channels: usize,
        reduction: usize,
        rng: &mut R,
    ) -> Self {
        let reduced = (channels / reduction.max(1)).max(1);
        let w1 = params.add_uniform(
            format!("{name}.w1"),
            &[channels, reduced],
            1.0 / (channels as f64).sqrt(),
            rng,
        );
        let w2 = params.add_uniform(
            format!("{name}.w2"),
            &[reduced, channels],
            1.0 / (reduced as f64).sqrt(),
            rng,
        );
        Self { w1, w2, channels }
    }

    /// Gate values `[N, C]` for `x: [N, C, H, W]` or `x: [N, C]`.
    pub fn gate(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if !(shape.len() == 2 || shape.len() == 4) || shape[1] != self.channels {
            return Err(TensorError::ShapeMismatch {
                op: "se_block",
                lhs: shape,
                rhs: vec![self.channels],
            });
        }
        let squeezed = if shape.len() == 4 {
            let flat = ctx.tape.reshape(x, &[shape[0], shape[1], shape[2] * shape[3]])?;
            ctx.tape.mean_axis(flat, 2)?
        } else {
            x
        };
        let e = ctx.tape.matmul(squeezed, ctx.p(self.w1))?;
        let e = ctx.tape.relu(e)?;
        let g = ctx.tape.matmul(e, ctx.p(self.w2))?;
        ctx.tape.sigmoid(g)
    }

    /// `x` scaled channelwise by its gate.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let g = self.gate(ctx, x)?;
        let g = if shape.len() == 4 {
            ctx.tape.reshape(g, &[shape[0], shape[1], 1, 1])?
        } else {
            g
        };
        ctx.tape.mul(x, g)
    }
}

fn conv2d_params<R: Rng + ?Sized>(
    params: &mut ParamSet,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    (
        params.add_uniform(format!("{name}.w"), &[cout, cin, k, k], bound, rng),
        params.add_zeros(format!("{name}.b"), &[cout]),
    )
}

fn conv1d_params<R: Rng + ?Sized>(
    params: &mut ParamSet,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut R,
) -> (ParamId, ParamId) {
    let bound = 1.0 / ((cin * k) as f64).sqrt();
    (
        params.add_uniform(format!("{name}.w"), &[k, cin, cout], bound, rng),
        params.add_zeros(format!("{name}.b"), &[cout]),
    )
}

/// `y = shortcut(x) + F(x)` with `F = conv → relu → conv (→ SE)`, on
/// `[N, C, H, W]` images. The shortcut is the identity when channel counts
/// match and a 1x1 convolution otherwise.
#[derive(Clone, Debug)]
pub struct ResBlock2d {
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    pub se: Option<SeBlock>,
    pub proj: Option<(ParamId, ParamId)>,
    pub cin: usize,
    pub cout: usize,
}

impl ResBlock2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        se_reduction: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let conv1 = conv2d_params(params, &format!("{name}.conv1"), cin, cout, kernel, rng);
        let conv2 = conv2d_params(params, &format!("{name}.conv2"), cout, cout, kernel, rng);
        let se = se_reduction.map(|r| SeBlock::new(params, &format!("{name}.se"), cout, r, rng));
        let proj = (cin != cout).then(|| conv2d_params(params, &format!("{name}.proj"), cin, cout, 1, rng));
        Self {
            conv1,
            conv2,
            se,
            proj,
            cin,
            cout,
        }
    }

    /// The residual branch `F(x)` alone.
    pub fn branch(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = ctx.tape.conv2d(x, ctx.p(self.conv1.0), ctx.p(self.conv1.1))?;
        let h = ctx.tape.relu(h)?;
        let h = ctx.tape.conv2d(h, ctx.p(self.conv2.0), ctx.p(self.conv2.1))?;
        match &self.se {
            Some(se) => se.forward(ctx, h),
            None => Ok(h),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.cin {
            return Err(TensorError::ShapeMismatch {
                op: "residual_block",
                lhs: shape,
                rhs: vec![self.cin],
            });
        }
        let f = self.branch(ctx, x)?;
        let skip = match self.proj {
            Some((w, b)) => ctx.tape.conv2d(x, ctx.p(w), ctx.p(b))?,
            None => x,
        };
        ctx.tape.add(skip, f)
    }
}

/// Residual block over time on channels-last `[N, T, C]` sequences.
#[derive(Clone, Debug)]
pub struct ResBlock1d {
    pub conv1: (ParamId, ParamId),
    pub conv2: (ParamId, ParamId),
    pub proj: Option<(ParamId, ParamId)>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl ResBlock1d {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let conv1 = conv1d_params(params, &format!("{name}.conv1"), cin, cout, kernel, rng);
        let conv2 = conv1d_params(params, &format!("{name}.conv2"), cout, cout, kernel, rng);
        let proj = (cin != cout).then(|| conv1d_params(params, &format!("{name}.proj"), cin, cout, 1, rng));
        Self {
            conv1,
            conv2,
            proj,
            cin,
            cout,
            kernel,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 3 || shape[2] != self.cin {
            return Err(TensorError::ShapeMismatch {
                op: "residual_block_1d",
                lhs: shape,
                rhs: vec![self.cin],
            });
        }
        let h = ctx.tape.conv1d(x, ctx.p(self.conv1.0), ctx.p(self.conv1.1))?;
        let h = ctx.tape.relu(h)?;
        let f = ctx.tape.conv1d(h, ctx.p(self.conv2.0), ctx.p(self.conv2.1))?;
        let skip = match self.proj {
            Some((w, b)) => ctx.tape.conv1d(x, ctx.p(w), ctx.p(b))?,
            None => x,
        };
        ctx.tape.add(skip, f)
    }
}

/// Per-frame 2D SE residual stack, each block followed by 2x2 average
/// pooling, then a linear projection of the flattened maps.
///
/// Flattening rather than global pooling keeps where things are in the
/// frame, which a shallow stack cannot encode otherwise.
#[derive(Clone, Debug)]
pub struct VisualFrontend {
    pub blocks: Vec<ResBlock2d>,
    pub proj: Linear,
    pub in_channels: usize,
    pub dropout: f64,
}

impl VisualFrontend {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_channels: usize,
        frame_hw: (usize, usize),
        widths: &[usize],
        kernel: usize,
        se_reduction: usize,
        embed: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let mut cin = in_channels;
        let blocks: Vec<ResBlock2d> = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let b = ResBlock2d::new(
                    params,
                    &format!("{name}.block{i}"),
                    cin,
                    w,
                    kernel,
                    Some(se_reduction),
                    rng,
                );
                cin = w;
                b
            })
            .collect();
        let n = blocks.len();
        let flat = cin * (frame_hw.0 >> n) * (frame_hw.1 >> n);
        let proj = Linear::new(params, &format!("{name}.proj"), flat, embed, rng);
        Self {
            blocks,
            proj,
            in_channels,
            dropout,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.proj.out_dim
    }

    /// The pooled block stack on `[N, C, H, W]`.
    pub fn feature_maps(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(ctx, h)?;
            h = ctx.tape.avg_pool2(h)?;
        }
        Ok(h)
    }

    /// `frames: [B, T, C, H, W]` to per-frame features `[B, T, D]`.
    pub fn forward(&self, ctx: &mut Ctx, frames: Var) -> Result<Var> {
        let s = ctx.tape.shape(frames).to_vec();
        if s.len() != 5 || s[2] != self.in_channels {
            return Err(TensorError::ShapeMismatch {
                op: "visual_frontend",
                lhs: s,
                rhs: vec![self.in_channels],
            });
        }
        let (b, t) = (s[0], s[1]);
        let x = ctx.tape.reshape(frames, &[b * t, s[2], s[3], s[4]])?;
        let h = self.feature_maps(ctx, x)?;
        let hs = ctx.tape.shape(h).to_vec();
        let flat = ctx.tape.reshape(h, &[b * t, hs[1] * hs[2] * hs[3]])?;
        let flat = ctx.dropout(flat, self.dropout)?;
        let y = self.proj.forward(ctx, flat)?;
        ctx.tape.reshape(y, &[b, t, self.proj.out_dim])
    }
}

/// Three (by default) 1D residual blocks over time followed by a per-frame
/// linear projection.
#[derive(Clone, Debug)]
pub struct AudioFrontend {
    pub blocks: Vec<ResBlock1d>,
    pub proj: Linear,
    pub bins: usize,
}

impl AudioFrontend {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        bins: usize,
        widths: &[usize],
        kernel: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut cin = bins;
        let blocks = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let b = ResBlock1d::new(params, &format!("{name}.block{i}"), cin, w, kernel, rng);
                cin = w;
                b
            })
            .collect();
        let proj = Linear::new(params, &format!("{name}.proj"), cin, out_dim, rng);
        Self { blocks, proj, bins }
    }

    pub fn output_dim(&self) -> usize {
        self.proj.out_dim
    }

    /// `spec: [B, T, F]` to `[B, T, D]`; time length is preserved.
    pub fn forward(&self, ctx: &mut Ctx, spec: Var) -> Result<Var> {
        let s = ctx.tape.shape(spec).to_vec();
        if s.len() != 3 || s[2] != self.bins {
            return Err(TensorError::ShapeMismatch {
                op: "audio_frontend",
                lhs: s,
                rhs: vec![self.bins],
            });
        }
        let mut h = spec;
        for block in &self.blocks {
            h = block.forward(ctx, h)?;
        }
        self.proj.forward(ctx, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheckConfig;
    use crate::nn::{check_params, Mode};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn weighted_sum(ctx: &mut Ctx, y: Var) -> Result<Var> {
        let shape = ctx.tape.shape(y).to_vec();
        let w = ctx.input(Tensor::from_fn(&shape, |i| (i as f64 * 0.91).sin()));
        let p = ctx.tape.mul(y, w)?;
        Ok(ctx.tape.sum_all(p))
    }

    #[test]
    fn zero_se_weights_halve_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        let se = SeBlock::new(&mut p, "se", 4, 2, &mut rng);
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let xt = rand_tensor(&[2, 4, 3, 3], &mut rng);
        let x = ctx.input(xt.clone());
        let y = se.forward(&mut ctx, x).unwrap();
        assert!(ctx.tape.value(y).bit_eq(&xt.scale(0.5)));
    }

    #[test]
    fn se_gates_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = ParamSet::new();
        let se = SeBlock::new(&mut p, "se", 6, 2, &mut rng);
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let x = ctx.input(rand_tensor(&[3, 6, 4, 4], &mut rng).scale(5.0));
        let g = se.gate(&mut ctx, x).unwrap();
        assert!(ctx.tape.value(g).data().iter().all(|&v| v > 0.0 && v < 1.0));
        let v = ctx.input(rand_tensor(&[3, 6], &mut rng));
        let g = se.gate(&mut ctx, v).unwrap();
        assert_eq!(ctx.tape.shape(g), &[3, 6]);
    }

    #[test]
    fn se_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamSet::new();
        let se = SeBlock::new(&mut p, "se", 4, 2, &mut rng);
        let x = p.add("x", rand_tensor(&[1, 4, 3, 3], &mut rng));
        let r = check_params(&p, Mode::Eval, GradCheckConfig::default(), |ctx| {
            let y = se.forward(ctx, ctx.p(x))?;
            weighted_sum(ctx, y)
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn zero_branch_is_identity_shortcut() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        let block = ResBlock2d::new(&mut p, "rb", 3, 3, 3, None, &mut rng);
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let xt = rand_tensor(&[2, 3, 5, 5], &mut rng);
        let x = ctx.input(xt.clone());
        let y = block.forward(&mut ctx, x).unwrap();
        assert!(ctx.tape.value(y).bit_eq(&xt));
    }

    #[test]
    fn zero_se_weights_halve_conv_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamSet::new();
        let block = ResBlock2d::new(&mut p, "rb", 2, 2, 3, Some(2), &mut rng);
        let se = block.se.clone().unwrap();
        p.get_mut(se.w1).data_mut().fill(0.0);
        p.get_mut(se.w2).data_mut().fill(0.0);
        let plain = ResBlock2d {
            se: None,
            ..block.clone()
        };
        let xt = rand_tensor(&[1, 2, 4, 4], &mut rng);
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let x = ctx.input(xt.clone());
        let y = block.forward(&mut ctx, x).unwrap();
        let conv = plain.branch(&mut ctx, x).unwrap();
        let want = ctx.tape.scale(conv, 0.5);
        let want = ctx.tape.add(x, want).unwrap();
        assert!(ctx.tape.value(y).max_abs_diff(ctx.tape.value(want)) < 1e-15);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamSet::new();
        let block = ResBlock2d::new(&mut p, "rb", 3, 4, 3, None, &mut rng);
        assert!(block.proj.is_some());
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let x = ctx.input(Tensor::zeros(&[1, 2, 4, 4]));
        assert!(block.forward(&mut ctx, x).is_err());
    }

    #[test]
    fn two_block_stack_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = ParamSet::new();
        let fe = VisualFrontend::new(&mut p, "v", 2, (4, 4), &[3, 4], 3, 2, 3, 0.0, &mut rng);
        let x = p.add("x", rand_tensor(&[2, 2, 4, 4], &mut rng));
        let r = check_params(&p, Mode::Eval, GradCheckConfig::default(), |ctx| {
            let y = fe.feature_maps(ctx, ctx.p(x))?;
            weighted_sum(ctx, y)
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn visual_features_project_flattened_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ParamSet::new();
        let fe = VisualFrontend::new(&mut p, "v", 1, (8, 8), &[4, 6], 3, 2, 5, 0.3, &mut rng);
        let frames = rand_tensor(&[1, 3, 1, 8, 8], &mut rng);
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let x = ctx.input(frames.clone());
        let y = fe.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(y), &[1, 3, 5]);
        let imgs = ctx.input(frames.reshape(&[3, 1, 8, 8]).unwrap());
        let maps = fe.feature_maps(&mut ctx, imgs).unwrap();
        assert_eq!(ctx.tape.shape(maps), &[3, 6, 2, 2]);
        let m = ctx.tape.value(maps).clone();
        let (w, b) = (p.get(fe.proj.w), p.get(fe.proj.b));
        for f in 0..3 {
            for o in 0..5 {
                let mut acc = b.data()[o];
                for k in 0..24 {
                    acc += m.data()[f * 24 + k] * w.data()[k * 5 + o];
                }
                assert!((acc - ctx.tape.value(y).data()[f * 5 + o]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn visual_frontend_preserves_time_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = ParamSet::new();
        let fe = VisualFrontend::new(&mut p, "v", 2, (16, 16), &[8, 16], 3, 4, 16, 0.2, &mut rng);
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let x = ctx.input(rand_tensor(&[1, 29, 2, 16, 16], &mut rng));
        let y = fe.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(y), &[1, 29, 16]);
        let bad = ctx.input(Tensor::zeros(&[1, 29, 3, 16, 16]));
        assert!(fe.forward(&mut ctx, bad).is_err());
    }

    #[test]
    fn eval_dropout_is_identity_train_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ParamSet::new();
        let fe = VisualFrontend::new(&mut p, "v", 1, (6, 6), &[4], 3, 2, 3, 0.5, &mut rng);
        let xt = rand_tensor(&[1, 4, 1, 6, 6], &mut rng);
        let run = |mode| {
            let mut ctx = Ctx::new(&p, false, mode, 11);
            let x = ctx.input(xt.clone());
            let y = fe.forward(&mut ctx, x).unwrap();
            let nodrop = VisualFrontend {
                dropout: 0.0,
                ..fe.clone()
            };
            let z = nodrop.forward(&mut ctx, x).unwrap();
            ctx.tape.value(y).bit_eq(ctx.tape.value(z))
        };
        assert!(run(Mode::Eval));
        assert!(!run(Mode::Train));
    }

    #[test]
    fn audio_frontend_shape_and_zero_conv_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = ParamSet::new();
        let fe = AudioFrontend::new(&mut p, "a", 20, &[20, 20, 20], 3, 16, &mut rng);
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let x = ctx.input(rand_tensor(&[2, 139, 20], &mut rng));
        let y = fe.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.tape.shape(y), &[2, 139, 16]);

        for id in p.ids().collect::<Vec<_>>() {
            if p.name(id).contains(".conv") {
                p.get_mut(id).data_mut().fill(0.0);
            }
        }
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let x = ctx.input(rand_tensor(&[2, 139, 20], &mut rng));
        let y = fe.forward(&mut ctx, x).unwrap();
        let direct = fe.proj.forward(&mut ctx, x).unwrap();
        assert!(ctx.tape.value(y).bit_eq(ctx.tape.value(direct)));
    }

    #[test]
    fn audio_shorter_than_kernel_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ParamSet::new();
        let fe = AudioFrontend::new(&mut p, "a", 4, &[4], 5, 3, &mut rng);
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let x = ctx.input(Tensor::zeros(&[1, 3, 4]));
        assert!(fe.forward(&mut ctx, x).is_err());
    }

    #[test]
    fn audio_frontend_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = ParamSet::new();
        let fe = AudioFrontend::new(&mut p, "a", 3, &[4, 4, 4], 3, 2, &mut rng);
        let x = p.add("x", rand_tensor(&[2, 5, 3], &mut rng));
        let r = check_params(&p, Mode::Eval, GradCheckConfig::default(), |ctx| {
            let y = fe.forward(ctx, ctx.p(x))?;
            weighted_sum(ctx, y)
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
