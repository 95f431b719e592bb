//! Gated recurrent units and the stacked bidirectional encoder.
//!
//! Cell convention (gate order `[z, r, h̃]` in the packed weights):
//!
//! ```text
//! z  = σ(W_z x + U_z h + b_z)
//! r  = σ(W_r x + U_r h + b_r)
//! h̃  = tanh(W_h x + U_h (r ⊙ h) + b_h)
//! h' = (1 − z) ⊙ h + z ⊙ h̃
//! ```

use rand::Rng;

use super::Ctx;
use crate::autodiff::Var;
use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GruCell {
    /// `[in, 3H]`, input weights for z, r and h̃.
    pub w_x: ParamId,
    /// `[H, 2H]`, recurrent weights for z and r.
    pub u_zr: ParamId,
    /// `[H, H]`, recurrent weights for the candidate.
    pub u_h: ParamId,
    /// `[3H]`
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_x: params.add_uniform(format!("{name}.w_x"), &[input, 3 * hidden], bound, rng),
            u_zr: params.add_uniform(format!("{name}.u_zr"), &[hidden, 2 * hidden], bound, rng),
            u_h: params.add_uniform(format!("{name}.u_h"), &[hidden, hidden], bound, rng),
            b: params.add_zeros(format!("{name}.b"), &[3 * hidden]),
            input,
            hidden,
        }
    }

    /// Input projection `x · W_x + b` for every row of `x: [.., in]`.
    pub fn project(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.last() != Some(&self.input) {
            return Err(TensorError::ShapeMismatch {
                op: "gru input",
                lhs: shape,
                rhs: vec![self.input],
            });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = ctx.tape.reshape(x, &[rows, self.input])?;
        let p = ctx.tape.matmul(flat, ctx.p(self.w_x))?;
        let p = ctx.tape.add_bias(p, ctx.p(self.b))?;
        let mut out = shape[..shape.len() - 1].to_vec();
        out.push(3 * self.hidden);
        ctx.tape.reshape(p, &out)
    }

    /// One recurrence step from a precomputed input projection `xp: [B, 3H]`.
    pub fn step(&self, ctx: &mut Ctx, xp: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let (u_zr, u_h) = (ctx.p(self.u_zr), ctx.p(self.u_h));
        let t = &mut ctx.tape;
        if t.shape(h) != [t.shape(xp)[0], hd] {
            return Err(TensorError::ShapeMismatch {
                op: "gru state",
                lhs: t.shape(h).to_vec(),
                rhs: vec![t.shape(xp)[0], hd],
            });
        }
        let hu = t.matmul(h, u_zr)?;
        let xzr = t.slice_last(xp, 0, 2 * hd)?;
        let pre = t.add(xzr, hu)?;
        let zr = t.sigmoid(pre)?;
        let z = t.slice_last(zr, 0, hd)?;
        let r = t.slice_last(zr, hd, hd)?;
        let rh = t.mul(r, h)?;
        let cand_h = t.matmul(rh, u_h)?;
        let cand_x = t.slice_last(xp, 2 * hd, hd)?;
        let cand = t.add(cand_x, cand_h)?;
        let cand = t.tanh(cand)?;
        let delta = t.sub(cand, h)?;
        let upd = t.mul(z, delta)?;
        t.add(h, upd)
    }

    /// One full step `h_t = cell(x_t, h_{t-1})` with `x: [B, in]`.
    pub fn cell(&self, ctx: &mut Ctx, x: Var, h: Var) -> Result<Var> {
        let xp = self.project(ctx, x)?;
        self.step(ctx, xp, h)
    }

    /// Run over `x: [B, T, in]` from a zero state, returning `[B, T, H]` in
    /// time order. `reverse` scans from the last frame to the first.
    pub fn scan(&self, ctx: &mut Ctx, x: Var, reverse: bool) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        let (b, steps) = (shape[0], shape[1]);
        if steps == 0 {
            return Err(TensorError::Empty("gru sequence"));
        }
        let xp = self.project(ctx, x)?;
        let mut h = ctx.input(Tensor::zeros(&[b, self.hidden]));
        let mut states = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for ti in order {
            let xt = ctx.tape.select_axis1(xp, ti)?;
            h = self.step(ctx, xt, h)?;
            states[ti] = h;
        }
        ctx.tape.stack_axis1(&states)
    }
}

/// Encoder outputs on the tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[B, T, 2H]`, final-layer forward and backward states concatenated.
    pub frame_states: Var,
    /// `[B, 2H]`, temporal mean of `frame_states`.
    pub sequence_vector: Var,
}

#[derive(Clone, Debug)]
pub struct BiGru {
    pub layers: Vec<(GruCell, GruCell)>,
    pub hidden: usize,
    pub dropout: f64,
}

impl BiGru {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let inp = if l == 0 { input } else { 2 * hidden };
                (
                    GruCell::new(params, &format!("{name}.l{l}.fwd"), inp, hidden, rng),
                    GruCell::new(params, &format!("{name}.l{l}.bwd"), inp, hidden, rng),
                )
            })
            .collect();
        Self {
            layers,
            hidden,
            dropout,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Same network with the two directions' cells exchanged in every layer.
    pub fn direction_swapped(&self) -> BiGru {
        BiGru {
            layers: self
                .layers
                .iter()
                .map(|(f, b)| (b.clone(), f.clone()))
                .collect(),
            hidden: self.hidden,
            dropout: self.dropout,
        }
    }

    /// Encode `x: [B, T, in]`. Dropout is applied between layers.
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<EncoderOutput> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 3 {
            return Err(TensorError::Invalid(format!(
                "encoder input must be [B, T, D], got {shape:?}"
            )));
        }
        let mut h = x;
        for (l, (fwd, bwd)) in self.layers.iter().enumerate() {
            if l > 0 {
                h = ctx.dropout(h, self.dropout)?;
            }
            let f = fwd.scan(ctx, h, false)?;
            let b = bwd.scan(ctx, h, true)?;
            h = ctx.tape.concat_last(f, b)?;
        }
        let pooled = ctx.tape.mean_axis(h, 1)?;
        Ok(EncoderOutput {
            frame_states: h,
            sequence_vector: pooled,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::GradCheckConfig;
    use crate::nn::{check_params, Mode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_cell_keeps_zero_state() {
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = GruCell::new(&mut p, "c", 3, 4, &mut rng);
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let x = ctx.input(rand_tensor(&[2, 3], &mut rng));
        let h0 = ctx.input(Tensor::zeros(&[2, 4]));
        let h1 = cell.cell(&mut ctx, x, h0).unwrap();
        assert!(ctx.tape.value(h1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_step() {
        // H = 1, in = 1, every weight 0.5, bias 0, x = 1, h = 0.5
        let mut p = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = GruCell::new(&mut p, "c", 1, 1, &mut rng);
        for id in [cell.w_x, cell.u_zr, cell.u_h] {
            p.get_mut(id).data_mut().fill(0.5);
        }
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let x = ctx.input(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let h0 = ctx.input(Tensor::new(vec![1, 1], vec![0.5]).unwrap());
        let h1 = cell.cell(&mut ctx, x, h0).unwrap();
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z = s(0.5 + 0.25);
        let r = z;
        let cand = (0.5 + 0.5 * r * 0.5_f64).tanh();
        let want = (1.0 - z) * 0.5 + z * cand;
        assert!((ctx.tape.value(h1).item() - want).abs() < 1e-15);
    }

    #[test]
    fn states_stay_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ParamSet::new();
        let cell = GruCell::new(&mut p, "c", 5, 6, &mut rng);
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
        }
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let x = ctx.input(rand_tensor(&[3, 40, 5], &mut rng).scale(3.0));
        let hs = cell.scan(&mut ctx, x, false).unwrap();
        assert!(ctx.tape.value(hs).data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn five_step_unroll_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        let cell = GruCell::new(&mut p, "c", 3, 4, &mut rng);
        let b = p.find("c.b").unwrap();
        *p.get_mut(b) = rand_tensor(&[12], &mut rng);
        let xs = p.add("x", rand_tensor(&[2, 5, 3], &mut rng));
        let r = check_params(&p, Mode::Eval, GradCheckConfig::default(), |ctx| {
            let hs = cell.scan(ctx, ctx.p(xs), false)?;
            let w = ctx.input(Tensor::from_fn(&[2, 5, 4], |i| (i as f64 * 0.37).sin()));
            let y = ctx.tape.mul(hs, w)?;
            Ok(ctx.tape.sum_all(y))
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn single_frame_sequence_vector_equals_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamSet::new();
        let enc = BiGru::new(&mut p, "enc", 3, 2, 3, 0.0, &mut rng);
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let x = ctx.input(rand_tensor(&[2, 1, 3], &mut rng));
        let out = enc.forward(&mut ctx, x).unwrap();
        let fs = ctx.tape.value(out.frame_states).clone().reshape(&[2, 4]).unwrap();
        assert!(fs.bit_eq(ctx.tape.value(out.sequence_vector)));
    }

    #[test]
    fn state_shape_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ParamSet::new();
        let cell = GruCell::new(&mut p, "c", 3, 2, &mut rng);
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let h = ctx.input(Tensor::zeros(&[1, 3]));
        assert!(cell.cell(&mut ctx, h, h).is_err());
    }

    #[test]
    fn sequence_vector_is_time_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = ParamSet::new();
        let enc = BiGru::new(&mut p, "enc", 3, 4, 3, 0.0, &mut rng);
        let mut ctx = Ctx::new(&p, false, Mode::Eval, 0);
        let x = ctx.input(rand_tensor(&[2, 7, 3], &mut rng));
        let out = enc.forward(&mut ctx, x).unwrap();
        let fs = ctx.tape.value(out.frame_states);
        let sv = ctx.tape.value(out.sequence_vector);
        assert_eq!(fs.shape(), &[2, 7, 8]);
        for b in 0..2 {
            for d in 0..8 {
                let m: f64 = (0..7).map(|t| fs.data()[(b * 7 + t) * 8 + d]).sum::<f64>() / 7.0;
                assert!((m - sv.data()[b * 8 + d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn time_reversal_with_swapped_directions() {
        let (t_len, din, hd, layers) = (6, 3, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = ParamSet::new();
        let enc = BiGru::new(&mut p, "enc", din, hd, layers, 0.0, &mut rng);
        for id in p.ids().collect::<Vec<_>>() {
            if p.name(id).ends_with(".b") {
                *p.get_mut(id) = rand_tensor(&[3 * hd], &mut rng);
            }
        }
        // Swapped parameter set: directions exchanged, and for layers > 0 the
        // input rows of W_x permuted so that [bwd, fwd] inputs line up.
        let swapped = enc.direction_swapped();
        let mut q = p.clone();
        for (f, b) in swapped.layers.iter().skip(1) {
            for cell in [f, b] {
                let w = p.get(cell.w_x);
                let cols = 3 * hd;
                let mut out = w.clone();
                for row in 0..2 * hd {
                    let src = (row + hd) % (2 * hd);
                    out.data_mut()[row * cols..(row + 1) * cols]
                        .copy_from_slice(&w.data()[src * cols..(src + 1) * cols]);
                }
                *q.get_mut(cell.w_x) = out;
            }
        }

        let x = rand_tensor(&[1, t_len, din], &mut rng);
        let mut xr = x.clone();
        for t in 0..t_len {
            for d in 0..din {
                xr.data_mut()[t * din + d] = x.data()[(t_len - 1 - t) * din + d];
            }
        }
        let mut c1 = Ctx::new(&p, false, Mode::Eval, 0);
        let xi = c1.input(x);
        let o1 = enc.forward(&mut c1, xi).unwrap();
        let mut c2 = Ctx::new(&q, false, Mode::Eval, 0);
        let xi = c2.input(xr);
        let o2 = swapped.forward(&mut c2, xi).unwrap();
        let (a, b) = (c1.tape.value(o1.frame_states), c2.tape.value(o2.frame_states));
        let w = 2 * hd;
        for t in 0..t_len {
            for d in 0..w {
                let mirrored = b.data()[(t_len - 1 - t) * w + (d + hd) % w];
                assert!((a.data()[t * w + d] - mirrored).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn encoder_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ParamSet::new();
        let enc = BiGru::new(&mut p, "enc", 3, 2, 3, 0.0, &mut rng);
        let xs = p.add("x", rand_tensor(&[1, 4, 3], &mut rng));
        let r = check_params(&p, Mode::Eval, GradCheckConfig::default(), |ctx| {
            let out = enc.forward(ctx, ctx.p(xs))?;
            let w = ctx.input(Tensor::from_fn(&[1, 4, 4], |i| (i as f64 * 0.7).cos()));
            let y = ctx.tape.mul(out.frame_states, w)?;
            let a = ctx.tape.sum_all(y);
            let s = ctx.tape.mul(out.sequence_vector, out.sequence_vector)?;
            let s = ctx.tape.sum_all(s);
            ctx.tape.add(a, s)
        })
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
