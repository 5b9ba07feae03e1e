//! Finite-difference verification of every differentiable kernel.
//!
//! Each trial draws a small random instance, reduces the kernel output to a
//! scalar with a fixed random projection, and compares `Tape::backward`
//! (run in `f32` and in `f64`) against 64-bit central differences.
//! Inputs are kept away from kinks: relu inputs avoid 0, max-pool windows
//! hold well-separated values, and deformable offsets stay ≥ 0.1 from any
//! integer.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, finite_diff_grad, max_relative_error, Tape, Var, DEFAULT_EPS};
use crate::convlstm::{convlstm_step, unroll, ConvLstmCellParams, ConvLstmState, DeformableSchedule};
use crate::error::{Error, Result};
use crate::kernels::{Conv2dGeometry, Conv3dGeometry, Remainder};
use crate::tensor::{Real, Tensor};

/// Threshold for `f32` analytic gradients against the 64-bit oracle.
pub const F32_TOLERANCE: f64 = 1e-3;
/// Threshold for `f64` analytic gradients against the 64-bit oracle.
pub const F64_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GradKernel {
    Matmul,
    Sigmoid,
    Tanh,
    Relu,
    Conv2d,
    Conv3d,
    DeformableConv2d,
    MaxPool3d,
    AvgPool2d,
    CrossEntropy,
    ConvLstmStep,
    ConvLstmUnroll,
}

impl GradKernel {
    pub const ALL: [GradKernel; 12] = [
        GradKernel::Matmul,
        GradKernel::Sigmoid,
        GradKernel::Tanh,
        GradKernel::Relu,
        GradKernel::Conv2d,
        GradKernel::Conv3d,
        GradKernel::DeformableConv2d,
        GradKernel::MaxPool3d,
        GradKernel::AvgPool2d,
        GradKernel::CrossEntropy,
        GradKernel::ConvLstmStep,
        GradKernel::ConvLstmUnroll,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradKernel::Matmul => "matmul",
            GradKernel::Sigmoid => "sigmoid",
            GradKernel::Tanh => "tanh",
            GradKernel::Relu => "relu",
            GradKernel::Conv2d => "conv2d",
            GradKernel::Conv3d => "conv3d",
            GradKernel::DeformableConv2d => "deformable_conv2d",
            GradKernel::MaxPool3d => "maxpool3d",
            GradKernel::AvgPool2d => "avgpool2d",
            GradKernel::CrossEntropy => "cross_entropy",
            GradKernel::ConvLstmStep => "convlstm_step",
            GradKernel::ConvLstmUnroll => "convlstm_unroll",
        }
    }
}

impl fmt::Display for GradKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GradKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradKernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown kernel {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub kernel: GradKernel,
    pub trials: usize,
    pub max_rel_err_f32: f64,
    pub max_rel_err_f64: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err_f32 < F32_TOLERANCE && self.max_rel_err_f64 < F64_TOLERANCE
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: trials={} max_rel_err_f32={:.3e} (< {:.0e}) max_rel_err_f64={:.3e} (< {:.0e}) {}",
            self.kernel,
            self.trials,
            self.max_rel_err_f32,
            F32_TOLERANCE,
            self.max_rel_err_f64,
            F64_TOLERANCE,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Window and stride.
type Pool3dSpec = ((usize, usize, usize), (usize, usize, usize));
type Pool2dSpec = ((usize, usize), (usize, usize), Remainder);

/// Kernel-specific settings that are not differentiated.
#[derive(Clone, Debug, Default)]
struct Meta {
    conv2d: Option<Conv2dGeometry>,
    conv3d: Option<Conv3dGeometry>,
    pool3d: Option<Pool3dSpec>,
    pool2d: Option<Pool2dSpec>,
    label: usize,
    kernel: usize,
    deformable: bool,
    schedule: Vec<usize>,
}

/// One random instance: differentiated inputs, a projection that reduces
/// the output to a scalar, and settings.
struct Case {
    kernel: GradKernel,
    inputs: Vec<Tensor<f64>>,
    projection: Option<Tensor<f64>>,
    meta: Meta,
}

fn uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(lo..hi)).expect("valid dims")
}

/// Values bounded away from zero.
fn away_from_zero(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
    .expect("valid dims")
}

/// Distinct values spaced 0.02 apart, shuffled.
fn separated(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| -1.0 + 0.02 * i as f64).collect();
    vals.shuffle(rng);
    Tensor::from_vec(dims, vals).expect("valid dims")
}

/// Offsets whose fractional part lies in [0.1, 0.9].
fn fractional_offsets(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.gen_range(-2i32..2) as f64 + rng.gen_range(0.1..0.9)).expect("valid dims")
}

/// Random `(n, k, stride, pad)` with output extent `n_out` and `n ≤ max`.
fn conv_axis(rng: &mut ChaCha8Rng, max: usize, kernels: &[usize]) -> (usize, usize, usize, usize) {
    loop {
        let k = *kernels.choose(rng).expect("non-empty");
        let s = rng.gen_range(1..=2);
        let p = rng.gen_range(0..=k / 2);
        let out = rng.gen_range(1..=3);
        let n = (out - 1) * s + k;
        if n > 2 * p && n - 2 * p <= max {
            return (n - 2 * p, k, s, p);
        }
    }
}

fn make_case(kernel: GradKernel, rng: &mut ChaCha8Rng) -> Result<Case> {
    let mut meta = Meta::default();
    let mut projection_dims: Option<Vec<usize>> = None;
    let inputs = match kernel {
        GradKernel::Matmul => {
            let (m, k, n) = (rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=6));
            projection_dims = Some(vec![m, n]);
            vec![uniform(&[m, k], -1.0, 1.0, rng), uniform(&[k, n], -1.0, 1.0, rng)]
        }
        GradKernel::Sigmoid | GradKernel::Tanh => {
            let dims = [rng.gen_range(1..=6), rng.gen_range(1..=6)];
            projection_dims = Some(dims.to_vec());
            vec![uniform(&dims, -3.0, 3.0, rng)]
        }
        GradKernel::Relu => {
            let dims = [rng.gen_range(1..=6), rng.gen_range(1..=6)];
            projection_dims = Some(dims.to_vec());
            vec![away_from_zero(&dims, rng)]
        }
        GradKernel::Conv2d => {
            let (h, kh, sh, ph) = conv_axis(rng, 6, &[1, 3, 5]);
            let (w, kw, sw, pw) = conv_axis(rng, 6, &[1, 3]);
            let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let geom = Conv2dGeometry { stride: (sh, sw), padding: (ph, pw) };
            meta.conv2d = Some(geom);
            let ho = (h + 2 * ph - kh) / sh + 1;
            let wo = (w + 2 * pw - kw) / sw + 1;
            projection_dims = Some(vec![ho, wo, cout]);
            vec![
                uniform(&[h, w, cin], -1.0, 1.0, rng),
                uniform(&[kh, kw, cin, cout], -1.0, 1.0, rng),
                uniform(&[cout], -1.0, 1.0, rng),
            ]
        }
        GradKernel::Conv3d => {
            let (t, kt, st, pt) = conv_axis(rng, 4, &[1, 3]);
            let (h, kh, sh, ph) = conv_axis(rng, 5, &[1, 3]);
            let (w, kw, sw, pw) = conv_axis(rng, 5, &[1, 3]);
            let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let geom = Conv3dGeometry { stride: (st, sh, sw), padding: (pt, ph, pw) };
            meta.conv3d = Some(geom);
            let out = |n: usize, k: usize, s: usize, p: usize| (n + 2 * p - k) / s + 1;
            projection_dims = Some(vec![out(t, kt, st, pt), out(h, kh, sh, ph), out(w, kw, sw, pw), cout]);
            vec![
                uniform(&[t, h, w, cin], -1.0, 1.0, rng),
                uniform(&[kt, kh, kw, cin, cout], -1.0, 1.0, rng),
                uniform(&[cout], -1.0, 1.0, rng),
            ]
        }
        GradKernel::DeformableConv2d => {
            let (h, w) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
            let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
            let k = 3;
            meta.conv2d = Some(Conv2dGeometry::same(k, k));
            projection_dims = Some(vec![h, w, cout]);
            vec![
                uniform(&[h, w, cin], -1.0, 1.0, rng),
                uniform(&[k, k, cin, cout], -1.0, 1.0, rng),
                uniform(&[cout], -1.0, 1.0, rng),
                fractional_offsets(&[h, w, 2 * k * k], rng),
            ]
        }
        GradKernel::MaxPool3d => {
            let (window, stride) = if rng.gen_bool(0.5) { ((1, 2, 2), (1, 2, 2)) } else { ((2, 2, 2), (2, 2, 2)) };
            let (to, ho, wo) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
            let c = rng.gen_range(1..=3);
            meta.pool3d = Some((window, stride));
            projection_dims = Some(vec![to, ho, wo, c]);
            vec![separated(&[to * window.0, ho * 2, wo * 2, c], rng)]
        }
        GradKernel::AvgPool2d => {
            let (h, w, c) = (rng.gen_range(2..=6), rng.gen_range(2..=6), rng.gen_range(1..=3));
            meta.pool2d = Some(((2, 2), (2, 2), Remainder::Floor));
            projection_dims = Some(vec![(h - 2) / 2 + 1, (w - 2) / 2 + 1, c]);
            vec![uniform(&[h, w, c], -1.0, 1.0, rng)]
        }
        GradKernel::CrossEntropy => {
            let n = rng.gen_range(2..=6);
            meta.label = rng.gen_range(0..n);
            vec![uniform(&[n], -3.0, 3.0, rng)]
        }
        GradKernel::ConvLstmStep | GradKernel::ConvLstmUnroll => {
            let unrolled = kernel == GradKernel::ConvLstmUnroll;
            let (h, w) = if unrolled { (4, 4) } else { (rng.gen_range(2..=5), rng.gen_range(2..=5)) };
            let cin = if unrolled { 2 } else { rng.gen_range(1..=3) };
            let hidden = rng.gen_range(1..=3);
            let k = 3;
            meta.kernel = k;
            meta.deformable = true;
            let cell = ConvLstmCellParams::<Tensor<f64>>::init(cin, hidden, k, true, rng)?;
            let mut cell = cell.try_map(|t| Ok(t.clone()))?;
            // Predicted offsets = bias (fraction in [0.35, 0.65]) plus a
            // data term bounded by 9·c_in·0.005 ≤ 0.14.
            let taps = 2 * k * k;
            cell.offset = Some((
                uniform(&[k, k, cin, taps], -0.005, 0.005, rng),
                Tensor::from_fn(&[taps], |_| rng.gen_range(-1i32..1) as f64 + rng.gen_range(0.35..0.65))?,
            ));
            for b in cell.bias.iter_mut() {
                *b = uniform(&[hidden], -0.5, 0.5, rng);
            }
            let mut inputs: Vec<Tensor<f64>> = cell.named().into_iter().map(|(_, t)| t.clone()).collect();
            if unrolled {
                meta.schedule = vec![rng.gen_range(0..2)];
                inputs.push(uniform(&[2, h, w, cin], -1.0, 1.0, rng));
                projection_dims = Some(vec![2, h, w, hidden]);
            } else {
                inputs.push(uniform(&[h, w, cin], -1.0, 1.0, rng));
                inputs.push(uniform(&[h, w, hidden], -0.9, 0.9, rng));
                inputs.push(uniform(&[h, w, hidden], -1.0, 1.0, rng));
                // Reduce both h' and c' so the cell-state path is checked too.
                projection_dims = Some(vec![2, h, w, hidden]);
            }
            inputs
        }
    };
    let projection = projection_dims.map(|d| uniform(&d, -1.0, 1.0, rng));
    Ok(Case { kernel, inputs, projection, meta })
}

fn project<'t, T: Real>(tape: &'t Tape<T>, out: Var<'t, T>, projection: &Option<Tensor<f64>>) -> Result<Var<'t, T>> {
    match projection {
        Some(r) => out.mul(tape.constant(r.cast())?)?.sum(),
        None => Ok(out),
    }
}

fn cell_from_vars<'t, T: Real>(vars: &[Var<'t, T>], kernel: usize) -> Result<ConvLstmCellParams<Var<'t, T>>> {
    let mut iter = vars.iter().copied();
    ConvLstmCellParams::from_named(kernel, true, |_| {
        iter.next().ok_or_else(|| Error::invalid("missing cell parameter"))
    })
}

/// Number of cell parameters recorded by [`ConvLstmCellParams::named`] for
/// a deformable cell.
const CELL_PARAM_COUNT: usize = 4 + 3 + 1 + 4 + 2;

fn loss<'t, T: Real>(case: &Case, tape: &'t Tape<T>, vars: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let m = &case.meta;
    let out = match case.kernel {
        GradKernel::Matmul => vars[0].matmul(vars[1])?,
        GradKernel::Sigmoid => vars[0].sigmoid()?,
        GradKernel::Tanh => vars[0].tanh()?,
        GradKernel::Relu => vars[0].relu()?,
        GradKernel::Conv2d => autodiff::conv2d(vars[0], vars[1], Some(vars[2]), m.conv2d.expect("geometry"))?,
        GradKernel::Conv3d => autodiff::conv3d(vars[0], vars[1], Some(vars[2]), m.conv3d.expect("geometry"))?,
        GradKernel::DeformableConv2d => {
            autodiff::deformable_conv2d(vars[0], vars[1], Some(vars[2]), vars[3], m.conv2d.expect("geometry"))?
        }
        GradKernel::MaxPool3d => {
            let (window, stride) = m.pool3d.expect("pool settings");
            autodiff::maxpool3d(vars[0], window, stride, Remainder::Strict)?
        }
        GradKernel::AvgPool2d => {
            let (window, stride, mode) = m.pool2d.expect("pool settings");
            autodiff::avgpool2d(vars[0], window, stride, mode)?
        }
        GradKernel::CrossEntropy => vars[0].cross_entropy(m.label)?,
        GradKernel::ConvLstmStep => {
            let cell = cell_from_vars(&vars[..CELL_PARAM_COUNT], m.kernel)?;
            let [x, h, c] = vars[CELL_PARAM_COUNT..] else {
                return Err(Error::invalid("convlstm_step case expects x, h, c"));
            };
            let next = convlstm_step(x, &ConvLstmState { h, c }, &cell, m.deformable)?;
            autodiff::stack(&[next.h, next.c])?
        }
        GradKernel::ConvLstmUnroll => {
            let cell = cell_from_vars(&vars[..CELL_PARAM_COUNT], m.kernel)?;
            let schedule = DeformableSchedule::from_frames(m.schedule.iter().copied());
            unroll(vars[CELL_PARAM_COUNT], &cell, &schedule)?
        }
    };
    project(tape, out, &case.projection)
}

fn analytic<T: Real>(case: &Case) -> Result<Vec<Tensor<f64>>> {
    let tape = Tape::<T>::new();
    let vars = case.inputs.iter().map(|t| tape.param(t.cast())).collect::<Result<Vec<_>>>()?;
    let l = loss(case, &tape, &vars)?;
    let grads = tape.backward(l)?;
    vars.iter().map(|&v| grads.wrt_or_zero(v).map(|g| g.cast())).collect()
}

fn evaluate(case: &Case, inputs: &[Tensor<f64>]) -> Result<f64> {
    let tape = Tape::<f64>::new();
    let vars = inputs.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>>>()?;
    loss(case, &tape, &vars)?.value().item()
}

fn numeric(case: &Case) -> Result<Vec<Tensor<f64>>> {
    let mut out = Vec::with_capacity(case.inputs.len());
    for (j, x) in case.inputs.iter().enumerate() {
        let mut inputs = case.inputs.clone();
        let mut failure = None;
        let g = finite_diff_grad(
            |probe| {
                inputs[j] = probe.clone();
                evaluate(case, &inputs).unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    f64::NAN
                })
            },
            x,
            DEFAULT_EPS,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        out.push(g);
    }
    Ok(out)
}

fn worst(analytic: &[Tensor<f64>], numeric: &[Tensor<f64>]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| max_relative_error(a, n)).fold(0.0, f64::max)
}

/// Runs `trials` random instances of `kernel` and reports the largest
/// relative error seen for each precision.
pub fn check_kernel(kernel: GradKernel, trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (kernel as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut report = GradCheckReport { kernel, trials, max_rel_err_f32: 0.0, max_rel_err_f64: 0.0 };
    for _ in 0..trials {
        let case = make_case(kernel, &mut rng)?;
        let oracle = numeric(&case)?;
        report.max_rel_err_f32 = report.max_rel_err_f32.max(worst(&analytic::<f32>(&case)?, &oracle));
        report.max_rel_err_f64 = report.max_rel_err_f64.max(worst(&analytic::<f64>(&case)?, &oracle));
    }
    Ok(report)
}
