use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::conv::{conv_backward, conv_forward, ConvPlan, Needs};
use crate::kernels::deform::{deform_backward, deform_forward};
use crate::kernels::pool::{maxpool3d_forward, maxpool_backward, AvgPlan};
use crate::kernels::{Conv2dGeometry, Conv3dGeometry, Remainder};
use crate::tensor::{gemm, matmul_dims, BinaryOp, MatRef, Real, ReducePlan, Tensor, UnaryOp};

fn same_tape<T: Real>(a: &Var<'_, T>, b: &Var<'_, T>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(Error::Autodiff("operands were recorded on different tapes".into()))
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    Tensor::from_vec(a.dims(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

impl<'t, T: Real> Var<'t, T> {
    fn binary(self, other: Var<'t, T>, op: BinaryOp) -> Result<Var<'t, T>> {
        same_tape(&self, &other)?;
        let value = Tensor::elementwise(op, &self.value(), &other.value())?;
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Max => "max",
        };
        self.tape.record(
            name,
            value,
            &[self, other],
            Box::new(move |g, inputs, _| {
                let (a, b) = (inputs[0], inputs[1]);
                Ok(match op {
                    BinaryOp::Add => vec![Some(g.clone()), Some(g.clone())],
                    BinaryOp::Sub => vec![Some(g.clone()), Some(g.map(UnaryOp::Scale(-1.0))?)],
                    BinaryOp::Mul => vec![Some(zip_map(g, b, |g, b| g * b)?), Some(zip_map(g, a, |g, a| g * a)?)],
                    BinaryOp::Max => {
                        // Ties go to the left operand.
                        let mask_a: Vec<T> = a
                            .data()
                            .iter()
                            .zip(b.data())
                            .zip(g.data())
                            .map(|((&x, &y), &g)| if x >= y { g } else { T::ZERO })
                            .collect();
                        let ga = Tensor::from_vec(a.dims(), mask_a)?;
                        let gb = g.sub(&ga)?;
                        vec![Some(ga), Some(gb)]
                    }
                })
            }),
        )
    }

    // Fallible, so not the `std::ops` traits.
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryOp::Add)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryOp::Sub)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryOp::Mul)
    }

    pub fn maximum(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, BinaryOp::Max)
    }

    /// `self[…, c] + v[c]`, broadcasting `v` over every leading axis.
    pub fn add_channel(self, v: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &v)?;
        let x = self.value();
        let vv = v.value();
        let c = *x.dims().last().expect("rank ≥ 1");
        if vv.dims() != [c] {
            return Err(Error::mismatch("add_channel", &[c], vv.dims()));
        }
        let mut out = x.as_ref().clone();
        for px in out.data_mut().chunks_exact_mut(c) {
            for (o, &b) in px.iter_mut().zip(vv.data()) {
                *o += b;
            }
        }
        self.tape.record(
            "add_channel",
            out.ensure_finite("add_channel")?,
            &[self, v],
            Box::new(move |g, _, _| {
                let mut gv = vec![T::ZERO; c];
                for px in g.data().chunks_exact(c) {
                    for (d, &x) in gv.iter_mut().zip(px) {
                        *d += x;
                    }
                }
                Ok(vec![Some(g.clone()), Some(Tensor::from_vec(&[c], gv)?)])
            }),
        )
    }

    fn unary(self, op: UnaryOp, name: &'static str) -> Result<Var<'t, T>> {
        let value = self.value().map(op)?;
        self.tape.record(
            name,
            value,
            &[self],
            Box::new(move |g, inputs, out| {
                let x = inputs[0];
                let grad = match op {
                    UnaryOp::Sigmoid => zip_map(g, out, |g, s| g * s * (T::ONE - s))?,
                    UnaryOp::Tanh => zip_map(g, out, |g, t| g * (T::ONE - t * t))?,
                    // relu'(0) is taken as 0.
                    UnaryOp::Relu => zip_map(g, x, |g, x| if x > T::ZERO { g } else { T::ZERO })?,
                    UnaryOp::Scale(k) => g.map(UnaryOp::Scale(k))?,
                };
                Ok(vec![Some(grad)])
            }),
        )
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Sigmoid, "sigmoid")
    }

    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Tanh, "tanh")
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Relu, "relu")
    }

    pub fn scale(self, k: f64) -> Result<Var<'t, T>> {
        self.unary(UnaryOp::Scale(k), "scale")
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Result<Var<'t, T>> {
        let value = Tensor::scalar(self.value().sum()).ensure_finite("sum")?;
        self.tape.record(
            "sum",
            value,
            &[self],
            Box::new(|g, inputs, _| Ok(vec![Some(Tensor::full(inputs[0].dims(), g.data()[0])?)])),
        )
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(self) -> Result<Var<'t, T>> {
        let axes: Vec<usize> = (0..self.dims().len()).collect();
        self.reduce_mean(&axes)
    }

    pub fn reduce_mean(self, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let plan = ReducePlan::new(x.dims(), axes)?;
        let value = x.reduce_mean(axes)?.ensure_finite("reduce_mean")?;
        self.tape.record(
            "reduce_mean",
            value,
            &[self],
            Box::new(move |g, inputs, _| {
                let inv = T::ONE / T::from_usize(plan.group);
                let gd = g.data();
                let dx = Tensor::from_fn(inputs[0].dims(), |i| gd[plan.out_index(i)] * inv)?;
                Ok(vec![Some(dx)])
            }),
        )
    }

    /// `[m,k]·[k,n] → [m,n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        same_tape(&self, &other)?;
        let value = self.value().matmul(&other.value())?;
        self.tape.record(
            "matmul",
            value,
            &[self, other],
            Box::new(|g, inputs, _| {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k, n) = matmul_dims(a.dims(), b.dims())?;
                let mut ga = vec![T::ZERO; m * k];
                gemm(MatRef::new(g.data(), m, n), MatRef::t(b.data(), n, k), &mut ga, false);
                let mut gb = vec![T::ZERO; k * n];
                gemm(MatRef::t(a.data(), k, m), MatRef::new(g.data(), m, n), &mut gb, false);
                Ok(vec![Some(Tensor::from_vec(&[m, k], ga)?), Some(Tensor::from_vec(&[k, n], gb)?)])
            }),
        )
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().reshape(dims)?;
        self.tape.record(
            "reshape",
            value,
            &[self],
            Box::new(|g, inputs, _| Ok(vec![Some(g.reshape(inputs[0].dims())?)])),
        )
    }

    /// Slice `index` of the leading axis.
    pub fn index_axis0(self, index: usize) -> Result<Var<'t, T>> {
        let value = self.value().index_axis0(index)?;
        self.tape.record(
            "index_axis0",
            value,
            &[self],
            Box::new(move |g, inputs, _| {
                let x = inputs[0];
                let inner = g.len();
                let mut dx = vec![T::ZERO; x.len()];
                dx[index * inner..(index + 1) * inner].copy_from_slice(g.data());
                Ok(vec![Some(Tensor::from_vec(x.dims(), dx)?)])
            }),
        )
    }

    /// Negative log-softmax probability of `label` for `[n]` (or `[1,n]`)
    /// logits, using max-subtraction for stability.
    pub fn cross_entropy(self, label: usize) -> Result<Var<'t, T>> {
        let logits = self.value();
        let n = logits.len();
        if label >= n {
            return Err(Error::invalid(format!("label {label} out of range for {n} classes")));
        }
        let probs = softmax(logits.data());
        let lse = log_sum_exp(logits.data());
        let loss = lse - logits.data()[label];
        self.tape.record(
            "cross_entropy",
            Tensor::scalar(loss),
            &[self],
            Box::new(move |g, inputs, _| {
                let scale = g.data()[0];
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                d[label] -= scale;
                Ok(vec![Some(Tensor::from_vec(inputs[0].dims(), d)?)])
            }),
        )
    }
}

pub(crate) fn log_sum_exp<T: Real>(x: &[T]) -> T {
    let m = x.iter().copied().fold(x[0], T::max);
    m + x.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

pub fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let m = x.iter().copied().fold(x[0], T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Stacks equally-shaped vars along a new leading axis.
pub fn stack<'t, T: Real>(items: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = items.first().ok_or_else(|| Error::invalid("stack of zero vars"))?;
    for v in items {
        same_tape(first, v)?;
    }
    let values: Vec<Tensor<T>> = items.iter().map(|v| v.value().as_ref().clone()).collect();
    let value = Tensor::stack(&values)?;
    let count = items.len();
    first.tape.record(
        "stack",
        value,
        items,
        Box::new(move |g, _, _| (0..count).map(|i| g.index_axis0(i).map(Some)).collect()),
    )
}

fn conv_needs<T: Real>(x: &Var<'_, T>, w: &Var<'_, T>, b: Option<&Var<'_, T>>) -> Needs {
    Needs { x: x.requires_grad(), weight: w.requires_grad(), bias: b.is_some_and(|b| b.requires_grad()) }
}

fn conv_inputs<'t, T: Real>(x: Var<'t, T>, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Vec<Var<'t, T>>> {
    same_tape(&x, &w)?;
    let mut inputs = vec![x, w];
    if let Some(b) = b {
        same_tape(&x, &b)?;
        inputs.push(b);
    }
    Ok(inputs)
}

fn conv_record<'t, T: Real>(
    name: &'static str,
    plan: ConvPlan,
    out_dims: Vec<usize>,
    x: Var<'t, T>,
    w: Var<'t, T>,
    b: Option<Var<'t, T>>,
) -> Result<Var<'t, T>> {
    let needs = conv_needs(&x, &w, b.as_ref());
    let bias_value = b.map(|b| b.value());
    let out = conv_forward(&plan, x.value().data(), w.value().data(), bias_value.as_deref())?;
    let value = Tensor::from_vec(&out_dims, out)?;
    let inputs = conv_inputs(x, w, b)?;
    let has_bias = inputs.len() == 3;
    x.tape.record(
        name,
        value,
        &inputs,
        Box::new(move |g, inputs, _| {
            let (xv, wv) = (inputs[0], inputs[1]);
            let grads = conv_backward(&plan, xv.data(), wv.data(), g.data(), needs);
            let mut out = vec![
                grads.dx.map(|d| Tensor::from_vec(xv.dims(), d)).transpose()?,
                grads.dweight.map(|d| Tensor::from_vec(wv.dims(), d)).transpose()?,
            ];
            if has_bias {
                out.push(grads.dbias.map(|d| Tensor::from_vec(&[plan.cout], d)).transpose()?);
            }
            Ok(out)
        }),
    )
}

/// Differentiable 2D convolution; see [`crate::kernels::conv2d`].
pub fn conv2d<'t, T: Real>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    geom: Conv2dGeometry,
) -> Result<Var<'t, T>> {
    let plan = ConvPlan::new2d(&x.dims(), &weight.dims(), geom)?;
    conv_record("conv2d", plan, vec![plan.ho, plan.wo, plan.cout], x, weight, bias)
}

/// Differentiable 3D convolution; see [`crate::kernels::conv3d`].
pub fn conv3d<'t, T: Real>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    geom: Conv3dGeometry,
) -> Result<Var<'t, T>> {
    let plan = ConvPlan::new3d(&x.dims(), &weight.dims(), geom)?;
    conv_record("conv3d", plan, vec![plan.to, plan.ho, plan.wo, plan.cout], x, weight, bias)
}

/// Differentiable deformable convolution. Gradients flow to the input, the
/// weights, the bias and the offsets.
pub fn deformable_conv2d<'t, T: Real>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Option<Var<'t, T>>,
    offsets: Var<'t, T>,
    geom: Conv2dGeometry,
) -> Result<Var<'t, T>> {
    same_tape(&x, &offsets)?;
    let needs = conv_needs(&x, &weight, bias.as_ref());
    let need_offsets = offsets.requires_grad();
    let bias_value = bias.map(|b| b.value());
    let fwd = deform_forward(&x.value(), &weight.value(), bias_value.as_deref(), &offsets.value(), geom)?;
    let cols = fwd.cols;
    let mut inputs = conv_inputs(x, weight, bias)?;
    let has_bias = inputs.len() == 3;
    inputs.push(offsets);
    x.tape.record(
        "deformable_conv2d",
        fwd.out,
        &inputs,
        Box::new(move |g, inputs, _| {
            let (xv, wv) = (inputs[0], inputs[1]);
            let ov = *inputs.last().expect("offsets input");
            let grads = deform_backward(xv, wv, ov, &cols, g.data(), geom, needs, need_offsets)?;
            let cout = wv.dims()[3];
            let mut out = vec![
                grads.conv.dx.map(|d| Tensor::from_vec(xv.dims(), d)).transpose()?,
                grads.conv.dweight.map(|d| Tensor::from_vec(wv.dims(), d)).transpose()?,
            ];
            if has_bias {
                out.push(grads.conv.dbias.map(|d| Tensor::from_vec(&[cout], d)).transpose()?);
            }
            out.push(grads.doffsets.map(|d| Tensor::from_vec(ov.dims(), d)).transpose()?);
            Ok(out)
        }),
    )
}

/// Differentiable max pooling over `[t, h, w, c]`. Ties route the gradient
/// to the first maximum in scan order.
pub fn maxpool3d<'t, T: Real>(
    x: Var<'t, T>,
    window: (usize, usize, usize),
    stride: (usize, usize, usize),
    mode: Remainder,
) -> Result<Var<'t, T>> {
    let fwd = maxpool3d_forward(&x.value(), window, stride, mode)?;
    let argmax = fwd.argmax;
    x.tape.record(
        "maxpool3d",
        fwd.out,
        &[x],
        Box::new(move |g, inputs, _| {
            let dx = maxpool_backward(&argmax, g.data(), inputs[0].len());
            Ok(vec![Some(Tensor::from_vec(inputs[0].dims(), dx)?)])
        }),
    )
}

/// Differentiable average pooling over `[h, w, c]`.
pub fn avgpool2d<'t, T: Real>(
    x: Var<'t, T>,
    window: (usize, usize),
    stride: (usize, usize),
    mode: Remainder,
) -> Result<Var<'t, T>> {
    let plan = AvgPlan::new(&x.dims(), window, stride, mode)?;
    let value = Tensor::from_vec(&[plan.ho, plan.wo, plan.c], plan.forward(x.value().data()))?;
    x.tape.record(
        "avgpool2d",
        value,
        &[x],
        Box::new(move |g, inputs, _| Ok(vec![Some(Tensor::from_vec(inputs[0].dims(), plan.backward(g.data()))?)])),
    )
}

impl<T: Real> Tape<T> {
    /// Convenience: records `tensor` as a constant and returns it.
    pub fn input(&self, tensor: &Tensor<T>) -> Result<Var<'_, T>> {
        self.constant(tensor.clone())
    }
}
