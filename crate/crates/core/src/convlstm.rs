//! ConvLSTM recurrence, standard and deformable, and the schedule deciding
//! which time steps take the deformable path.
//!
//! Gate layout per step, with `X̃ₖ` the input-to-state convolutions:
//!
//! ```text
//! H̃ₖ = wₖ ⊙ GAP(h)               k ∈ {i, f, o}   (per-channel, broadcast over space)
//! H̃g = conv(h; hidden_g)
//! i = σ(X̃i + H̃i + bi)   f = σ(X̃f + H̃f + bf)   o = σ(X̃o + H̃o + bo)
//! g = tanh(X̃g + H̃g + bg)
//! c' = f ⊙ c + i ⊙ g       h' = o ⊙ tanh(c')
//! ```
//!
//! On deformable steps `X̃g` is a deformable convolution whose offsets are
//! predicted from `x_t` by a regular convolution.

use std::collections::BTreeSet;

use rand::Rng;

use crate::autodiff::{self, Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::Conv2dGeometry;
use crate::tensor::{Real, Tensor};

/// Hidden and cell maps carried across time, both `[h, w, c_hidden]`.
#[derive(Clone, Debug)]
pub struct ConvLstmState<P> {
    pub h: P,
    pub c: P,
}

impl<'t, T: Real> ConvLstmState<Var<'t, T>> {
    pub fn zeros(tape: &'t Tape<T>, h: usize, w: usize, channels: usize) -> Result<Self> {
        Ok(ConvLstmState {
            h: tape.constant(Tensor::zeros(&[h, w, channels])?)?,
            c: tape.constant(Tensor::zeros(&[h, w, channels])?)?,
        })
    }
}

/// Gate index into the `[P; 4]` arrays.
pub const GATE_I: usize = 0;
pub const GATE_F: usize = 1;
pub const GATE_O: usize = 2;
pub const GATE_G: usize = 3;
const GATE_NAMES: [&str; 4] = ["i", "f", "o", "g"];

/// Parameters of one ConvLSTM cell. `P` is `Tensor<T>` for stored weights
/// and `Var<'t, T>` while a forward pass is being recorded.
///
/// All spatial convolutions are `kernel×kernel`, stride 1, "same" padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmCellParams<P> {
    pub kernel: usize,
    /// Input-to-state weights `[k, k, c_in, c_hidden]`, order i, f, o, g.
    pub input: [P; 4],
    /// Per-channel hidden-to-state weights `[c_hidden]` for i, f, o.
    pub gate_hidden: [P; 3],
    /// Hidden-to-state convolution of the candidate, `[k, k, c_hidden, c_hidden]`.
    pub hidden_g: P,
    /// Gate biases `[c_hidden]`, order i, f, o, g.
    pub bias: [P; 4],
    /// Offset predictor `([k, k, c_in, 2k²], [2k²])`; present only when the
    /// cell has deformable steps.
    pub offset: Option<(P, P)>,
}

impl<P> ConvLstmCellParams<P> {
    /// Parameter names relative to the cell, in a fixed order.
    pub fn named(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        for (k, w) in self.input.iter().enumerate() {
            out.push((format!("input_{}.weight", GATE_NAMES[k]), w));
        }
        for (k, w) in self.gate_hidden.iter().enumerate() {
            out.push((format!("hidden_{}.weight", GATE_NAMES[k]), w));
        }
        out.push(("hidden_g.weight".to_string(), &self.hidden_g));
        for (k, b) in self.bias.iter().enumerate() {
            out.push((format!("bias_{}", GATE_NAMES[k]), b));
        }
        if let Some((w, b)) = &self.offset {
            out.push(("offset.weight".to_string(), w));
            out.push(("offset.bias".to_string(), b));
        }
        out
    }

    /// Rebuilds a cell by looking up each name produced by [`named`](Self::named).
    pub fn from_named(kernel: usize, deformable: bool, mut get: impl FnMut(&str) -> Result<P>) -> Result<Self> {
        let input = [get("input_i.weight")?, get("input_f.weight")?, get("input_o.weight")?, get("input_g.weight")?];
        let gate_hidden = [get("hidden_i.weight")?, get("hidden_f.weight")?, get("hidden_o.weight")?];
        let hidden_g = get("hidden_g.weight")?;
        let bias = [get("bias_i")?, get("bias_f")?, get("bias_o")?, get("bias_g")?];
        let offset = if deformable { Some((get("offset.weight")?, get("offset.bias")?)) } else { None };
        Ok(ConvLstmCellParams { kernel, input, gate_hidden, hidden_g, bias, offset })
    }

    pub fn try_map<Q>(&self, mut f: impl FnMut(&P) -> Result<Q>) -> Result<ConvLstmCellParams<Q>> {
        let [a, b, c, d] = &self.input;
        let [e, g, h] = &self.gate_hidden;
        let [i, j, k, l] = &self.bias;
        Ok(ConvLstmCellParams {
            kernel: self.kernel,
            input: [f(a)?, f(b)?, f(c)?, f(d)?],
            gate_hidden: [f(e)?, f(g)?, f(h)?],
            hidden_g: f(&self.hidden_g)?,
            bias: [f(i)?, f(j)?, f(k)?, f(l)?],
            offset: match &self.offset {
                Some((w, b)) => Some((f(w)?, f(b)?)),
                None => None,
            },
        })
    }
}

fn uniform<T: Real>(dims: &[usize], bound: f64, rng: &mut impl Rng) -> Result<Tensor<T>> {
    Tensor::from_fn(dims, |_| T::from_f64(rng.gen_range(-bound..=bound)))
}

impl<T: Real> ConvLstmCellParams<Tensor<T>> {
    /// Convolution weights `U(±√(1/fan_in))`, per-channel gate weights
    /// `U(±1)`, forget bias 1, other biases 0, offset predictor all zeros.
    pub fn init(c_in: usize, c_hidden: usize, kernel: usize, deformable: bool, rng: &mut impl Rng) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("ConvLSTM kernel must be odd, got {kernel}")));
        }
        let in_bound = (1.0 / (kernel * kernel * c_in) as f64).sqrt();
        let hid_bound = (1.0 / (kernel * kernel * c_hidden) as f64).sqrt();
        let input = [(); 4].map(|_| uniform(&[kernel, kernel, c_in, c_hidden], in_bound, rng));
        let [a, b, c, d] = input;
        let gate_hidden = [(); 3].map(|_| uniform(&[c_hidden], 1.0, rng));
        let [e, f, g] = gate_hidden;
        let hidden_g = uniform(&[kernel, kernel, c_hidden, c_hidden], hid_bound, rng)?;
        let zeros = || Tensor::zeros(&[c_hidden]);
        let taps = 2 * kernel * kernel;
        Ok(ConvLstmCellParams {
            kernel,
            input: [a?, b?, c?, d?],
            gate_hidden: [e?, f?, g?],
            hidden_g,
            bias: [zeros()?, Tensor::full(&[c_hidden], T::ONE)?, zeros()?, zeros()?],
            offset: if deformable {
                Some((Tensor::zeros(&[kernel, kernel, c_in, taps])?, Tensor::zeros(&[taps])?))
            } else {
                None
            },
        })
    }

    pub fn hidden_channels(&self) -> usize {
        self.bias[0].len()
    }

    pub fn input_channels(&self) -> usize {
        self.input[0].dims()[2]
    }

    /// Records every tensor on `tape` as a parameter.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Result<ConvLstmCellParams<Var<'t, T>>> {
        self.try_map(|t| tape.param(t.clone()))
    }
}

/// One ConvLSTM time step. With `deformable` set, the candidate's
/// input-to-state path is a deformable convolution.
pub fn convlstm_step<'t, T: Real>(
    x_t: Var<'t, T>,
    state: &ConvLstmState<Var<'t, T>>,
    p: &ConvLstmCellParams<Var<'t, T>>,
    deformable: bool,
) -> Result<ConvLstmState<Var<'t, T>>> {
    let xd = x_t.dims();
    let hd = state.h.dims();
    if xd.len() != 3 || hd.len() != 3 || xd[..2] != hd[..2] {
        return Err(Error::mismatch("convlstm_step spatial extents", &hd, &xd));
    }
    if state.c.dims() != hd {
        return Err(Error::mismatch("convlstm_step cell state", &hd, &state.c.dims()));
    }
    let geom = Conv2dGeometry::same(p.kernel, p.kernel);

    let x_path = |k: usize| autodiff::conv2d(x_t, p.input[k], None, geom);
    let x_i = x_path(GATE_I)?;
    let x_f = x_path(GATE_F)?;
    let x_o = x_path(GATE_O)?;
    let x_g = if deformable {
        let (ow, ob) =
            p.offset.ok_or_else(|| Error::invalid("deformable step requested but the cell has no offset predictor"))?;
        let offsets = autodiff::conv2d(x_t, ow, Some(ob), geom)?;
        autodiff::deformable_conv2d(x_t, p.input[GATE_G], None, offsets, geom)?
    } else {
        x_path(GATE_G)?
    };

    let pooled = state.h.reduce_mean(&[0, 1])?;
    let gate = |x: Var<'t, T>, k: usize| -> Result<Var<'t, T>> {
        let shift = pooled.mul(p.gate_hidden[k])?.add(p.bias[k])?;
        x.add_channel(shift)?.sigmoid()
    };
    let i = gate(x_i, GATE_I)?;
    let f = gate(x_f, GATE_F)?;
    let o = gate(x_o, GATE_O)?;
    let h_g = autodiff::conv2d(state.h, p.hidden_g, None, geom)?;
    let g = x_g.add(h_g)?.add_channel(p.bias[GATE_G])?.tanh()?;

    let c = f.mul(state.c)?.add(i.mul(g)?)?;
    let h = o.mul(c.tanh()?)?;
    Ok(ConvLstmState { h, c })
}

/// Frame indices that take the deformable path.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DeformableSchedule(BTreeSet<usize>);

impl DeformableSchedule {
    pub fn empty() -> Self {
        Self::default()
    }

    /// `per_mark` consecutive frames starting at each of ⌊t/4⌋, ⌊t/2⌋ and
    /// ⌊3t/4⌋, clipped to `[0, t)`.
    pub fn quartiles(t: usize, per_mark: usize) -> Self {
        let marks = [t / 4, t / 2, 3 * t / 4];
        DeformableSchedule(marks.iter().flat_map(|&m| (0..per_mark).map(move |k| m + k)).filter(|&i| i < t).collect())
    }

    pub fn from_frames(frames: impl IntoIterator<Item = usize>) -> Self {
        DeformableSchedule(frames.into_iter().collect())
    }

    pub fn contains(&self, frame: usize) -> bool {
        self.0.contains(&frame)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }
}

/// Default schedule: three frames after each of the 25%, 50% and 75% marks.
pub fn deformable_schedule(t: usize) -> DeformableSchedule {
    DeformableSchedule::quartiles(t, 3)
}

/// Runs the cell over `x: [t, h, w, c_in]` from a zero state and stacks the
/// hidden maps into `[t, h, w, c_hidden]`.
pub fn unroll<'t, T: Real>(
    x: Var<'t, T>,
    p: &ConvLstmCellParams<Var<'t, T>>,
    schedule: &DeformableSchedule,
) -> Result<Var<'t, T>> {
    let dims = x.dims();
    let [t, h, w, _] = dims[..] else {
        return Err(Error::mismatch("unroll input [t,h,w,c]", &[0; 4], &dims));
    };
    let hidden = p.bias[0].dims()[0];
    let mut state = ConvLstmState::zeros(x.tape(), h, w, hidden)?;
    let mut outputs = Vec::with_capacity(t);
    for step in 0..t {
        let x_t = x.index_axis0(step)?;
        state = convlstm_step(x_t, &state, p, schedule.contains(step))?;
        outputs.push(state.h);
    }
    autodiff::stack(&outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{conv2d, deformable_conv2d, offset_predictor, Conv2DParams};
    use crate::tensor::{sigmoid, UnaryOp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0)).unwrap()
    }

    /// Step composed directly from tensor kernels, without the tape.
    fn reference_step(
        x: &Tensor<f64>,
        h: &Tensor<f64>,
        c: &Tensor<f64>,
        p: &ConvLstmCellParams<Tensor<f64>>,
        deformable: bool,
    ) -> (Tensor<f64>, Tensor<f64>) {
        let geom = Conv2dGeometry::same(p.kernel, p.kernel);
        let k = p.kernel;
        let conv = |x: &Tensor<f64>, w: &Tensor<f64>| conv2d(x, w, None, geom).unwrap();
        let xg = if deformable {
            let (ow, ob) = p.offset.as_ref().unwrap();
            let pred = Conv2DParams::new(ow.clone(), Some(ob.clone()), geom).unwrap();
            let off = offset_predictor(x, &pred, (k, k)).unwrap();
            let main = Conv2DParams::new(p.input[GATE_G].clone(), None, geom).unwrap();
            deformable_conv2d(x, &main, &off).unwrap()
        } else {
            conv(x, &p.input[GATE_G])
        };
        let hg = conv(h, &p.hidden_g);
        let pooled = h.reduce_mean(&[0, 1]).unwrap();
        let ch = pooled.len();
        let pre = |xk: Tensor<f64>, shift: &dyn Fn(usize) -> f64| {
            Tensor::from_fn(xk.dims(), |idx| xk.data()[idx] + shift(idx % ch)).unwrap()
        };
        let gate = |kk: usize| {
            let xk = conv(x, &p.input[kk]);
            let w = p.gate_hidden[kk].data().to_vec();
            let b = p.bias[kk].data().to_vec();
            let pd = pooled.data().to_vec();
            pre(xk, &move |c| w[c] * pd[c] + b[c]).map(UnaryOp::Sigmoid).unwrap()
        };
        let (i, f, o) = (gate(GATE_I), gate(GATE_F), gate(GATE_O));
        let bg = p.bias[GATE_G].data().to_vec();
        let g = pre(xg.add(&hg).unwrap(), &move |c| bg[c]).map(UnaryOp::Tanh).unwrap();
        let c_new = f.mul(c).unwrap().add(&i.mul(&g).unwrap()).unwrap();
        let h_new = o.mul(&c_new.map(UnaryOp::Tanh).unwrap()).unwrap();
        (h_new, c_new)
    }

    fn zero_cell(c_in: usize, hidden: usize) -> ConvLstmCellParams<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ConvLstmCellParams::<Tensor<f64>>::init(c_in, hidden, 3, true, &mut rng).unwrap();
        p.try_map(|t| Tensor::zeros(t.dims())).unwrap()
    }

    #[test]
    fn zero_cell_gives_half_gates_and_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = zero_cell(2, 3);
        let x = rand_tensor(&[4, 5, 2], &mut rng);
        let tape = Tape::<f64>::new();
        let pv = p.bind(&tape).unwrap();
        let s0 = ConvLstmState::zeros(&tape, 4, 5, 3).unwrap();
        let s1 = convlstm_step(tape.input(&x).unwrap(), &s0, &pv, false).unwrap();
        assert!(s1.c.value().data().iter().all(|&v| v == 0.0));
        assert!(s1.h.value().data().iter().all(|&v| v == 0.0));
        assert_eq!(sigmoid(0.0f64), 0.5);
    }

    #[test]
    fn saturated_forget_gate_carries_cell_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = zero_cell(2, 3);
        p.bias[GATE_F] = Tensor::full(&[3], 20.0).unwrap();
        let x = rand_tensor(&[4, 4, 2], &mut rng);
        let carried = rand_tensor(&[4, 4, 3], &mut rng);
        let tape = Tape::<f64>::new();
        let pv = p.bind(&tape).unwrap();
        let state = ConvLstmState {
            h: tape.input(&Tensor::zeros(&[4, 4, 3]).unwrap()).unwrap(),
            c: tape.input(&carried).unwrap(),
        };
        let next = convlstm_step(tape.input(&x).unwrap(), &state, &pv, false).unwrap();
        assert!(next.c.value().max_abs_diff(&carried).unwrap() < 1e-6);
    }

    #[test]
    fn zero_offset_predictor_makes_deformable_step_regular() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ConvLstmCellParams::<Tensor<f32>>::init(2, 3, 3, true, &mut rng).unwrap();
        let x = Tensor::from_fn(&[5, 5, 2], |_| rng.gen_range(-1.0f32..1.0)).unwrap();
        let h = Tensor::from_fn(&[5, 5, 3], |_| rng.gen_range(-0.9f32..0.9)).unwrap();
        let c = Tensor::from_fn(&[5, 5, 3], |_| rng.gen_range(-1.0f32..1.0)).unwrap();
        let run = |deformable| {
            let tape = Tape::<f32>::new();
            let pv = p.bind(&tape).unwrap();
            let s = ConvLstmState { h: tape.input(&h).unwrap(), c: tape.input(&c).unwrap() };
            let out = convlstm_step(tape.input(&x).unwrap(), &s, &pv, deformable).unwrap();
            (out.h.value().as_ref().clone(), out.c.value().as_ref().clone())
        };
        let (h0, c0) = run(false);
        let (h1, c1) = run(true);
        assert!(h0.max_abs_diff(&h1).unwrap() <= 1e-6);
        assert!(c0.max_abs_diff(&c1).unwrap() <= 1e-6);
    }

    #[test]
    fn step_matches_kernel_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ConvLstmCellParams::<Tensor<f64>>::init(2, 3, 3, true, &mut rng).unwrap();
        p.offset = Some((rand_tensor(&[3, 3, 2, 18], &mut rng), rand_tensor(&[18], &mut rng)));
        let x = rand_tensor(&[5, 4, 2], &mut rng);
        let h = rand_tensor(&[5, 4, 3], &mut rng);
        let c = rand_tensor(&[5, 4, 3], &mut rng);
        for deformable in [false, true] {
            let tape = Tape::<f64>::new();
            let pv = p.bind(&tape).unwrap();
            let s = ConvLstmState { h: tape.input(&h).unwrap(), c: tape.input(&c).unwrap() };
            let out = convlstm_step(tape.input(&x).unwrap(), &s, &pv, deformable).unwrap();
            let (hr, cr) = reference_step(&x, &h, &c, &p, deformable);
            assert!(out.h.value().max_abs_diff(&hr).unwrap() < 1e-12);
            assert!(out.c.value().max_abs_diff(&cr).unwrap() < 1e-12);
        }
    }

    #[test]
    fn deformable_step_without_predictor_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ConvLstmCellParams::<Tensor<f32>>::init(1, 2, 3, false, &mut rng).unwrap();
        let tape = Tape::<f32>::new();
        let pv = p.bind(&tape).unwrap();
        let s = ConvLstmState::zeros(&tape, 3, 3, 2).unwrap();
        let x = tape.input(&Tensor::zeros(&[3, 3, 1]).unwrap()).unwrap();
        assert!(convlstm_step(x, &s, &pv, true).is_err());
        let bad = tape.input(&Tensor::zeros(&[4, 3, 1]).unwrap()).unwrap();
        assert!(convlstm_step(bad, &s, &pv, false).is_err());
    }

    #[test]
    fn schedule_examples() {
        let s32: Vec<_> = deformable_schedule(32).frames().collect();
        assert_eq!(s32, vec![8, 9, 10, 16, 17, 18, 24, 25, 26]);
        assert_eq!(deformable_schedule(4).frames().collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(deformable_schedule(1).frames().collect::<Vec<_>>(), vec![0]);
        assert_eq!(deformable_schedule(16).frames().collect::<Vec<_>>(), vec![4, 5, 6, 8, 9, 10, 12, 13, 14]);
        for t in 1..200 {
            assert!(deformable_schedule(t).len() <= 9);
            assert!(deformable_schedule(t).frames().all(|f| f < t));
        }
    }

    #[test]
    fn unroll_matches_manual_three_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = ConvLstmCellParams::<Tensor<f64>>::init(2, 3, 3, true, &mut rng).unwrap();
        p.offset = Some((rand_tensor(&[3, 3, 2, 18], &mut rng), rand_tensor(&[18], &mut rng)));
        let x = rand_tensor(&[3, 4, 4, 2], &mut rng);
        let schedule = DeformableSchedule::from_frames([1]);
        let tape = Tape::<f64>::new();
        let pv = p.bind(&tape).unwrap();
        let out = unroll(tape.input(&x).unwrap(), &pv, &schedule).unwrap().value();
        assert_eq!(out.dims(), &[3, 4, 4, 3]);

        let mut h = Tensor::zeros(&[4, 4, 3]).unwrap();
        let mut c = Tensor::zeros(&[4, 4, 3]).unwrap();
        for step in 0..3 {
            (h, c) = reference_step(&x.index_axis0(step).unwrap(), &h, &c, &p, step == 1);
            assert!(out.index_axis0(step).unwrap().max_abs_diff(&h).unwrap() < 1e-12);
        }
    }

    #[test]
    fn unroll_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = zero_cell(2, 3);
        let x = rand_tensor(&[1, 3, 3, 2], &mut rng);
        let tape = Tape::<f64>::new();
        let pv = p.bind(&tape).unwrap();
        let out = unroll(tape.input(&x).unwrap(), &pv, &deformable_schedule(1)).unwrap();
        assert!(out.value().data().iter().all(|&v| v == 0.0));

        let p = ConvLstmCellParams::<Tensor<f32>>::init(2, 3, 3, true, &mut rng).unwrap();
        let x = Tensor::from_fn(&[6, 4, 4, 2], |_| rng.gen_range(-1.0f32..1.0)).unwrap();
        let run = |schedule: &DeformableSchedule| {
            let tape = Tape::<f32>::new();
            let pv = p.bind(&tape).unwrap();
            unroll(tape.input(&x).unwrap(), &pv, schedule).unwrap().value().as_ref().clone()
        };
        let plain = run(&DeformableSchedule::empty());
        let scheduled = run(&deformable_schedule(6));
        assert!(plain.max_abs_diff(&scheduled).unwrap() <= 1e-6);
        assert!(plain.data().iter().all(|v| v.abs() < 1.0));
    }
}
