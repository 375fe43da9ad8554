//! Masked forward/backward passes and exact Hessian-vector products.
//!
//! The Hessian-vector product is computed with the R-operator (forward-mode
//! differentiation of the backward pass), which is the double-backward route;
//! [`objective::finite_difference_hvp`](super::objective::finite_difference_hvp)
//! provides the independent finite-difference route.

use ndarray::{Array1, Array2, Axis};

use super::{Activation, Architecture, ParamVector, Real};
use crate::error::{Error, Result};
use crate::mask::PruneMask;

/// Supervision attached to a batch. Class targets train with softmax
/// cross-entropy, real-valued targets with mean squared error.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    Classes(Vec<u32>),
    Values(Vec<f32>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major feature matrix with one target per row.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub features: Array2<f32>,
    pub targets: Targets,
}

pub type LabeledBatch = Batch;

impl Batch {
    pub fn new(features: Array2<f32>, targets: Targets) -> Result<Self> {
        if features.nrows() != targets.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} targets",
                features.nrows(),
                targets.len()
            )));
        }
        Ok(Self { features, targets })
    }

    pub fn classes(features: Array2<f32>, labels: Vec<u32>) -> Result<Self> {
        Self::new(features, Targets::Classes(labels))
    }

    pub fn values(features: Array2<f32>, values: Vec<f32>) -> Result<Self> {
        Self::new(features, Targets::Values(values))
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub logits: Array2<T>,
    pub loss: T,
}

struct Layer<T> {
    weight: Array2<T>,
    bias: Option<Array1<T>>,
    activation: Activation,
}

/// Per-layer tensors materialized from a flat vector with the mask applied.
struct Net<T> {
    layers: Vec<Layer<T>>,
}

impl<T: Real> Net<T> {
    fn masked(arch: &Architecture, values: &[T], keep: &[bool]) -> Self {
        let layout = arch.layout();
        let mut slots = layout.slots().iter();
        let layers = arch
            .layers()
            .iter()
            .map(|spec| {
                let pick = |r: std::ops::Range<usize>| -> Vec<T> {
                    values[r.clone()]
                        .iter()
                        .zip(&keep[r])
                        .map(|(&v, &k)| if k { v } else { T::zero() })
                        .collect()
                };
                let w = slots.next().expect("weight slot");
                let weight = Array2::from_shape_vec((spec.out_dim, spec.in_dim), pick(w.range()))
                    .expect("slot length matches layer shape");
                let bias = spec.has_bias.then(|| Array1::from(pick(slots.next().expect("bias slot").range())));
                Layer { weight, bias, activation: spec.activation }
            })
            .collect();
        Self { layers }
    }
}

struct Trace<T> {
    /// Input to each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Array2<T>>,
    /// Pre-activation output of each layer; the last one holds the logits.
    pre: Vec<Array2<T>>,
}

fn check_inputs<T: Real>(params: &ParamVector<T>, mask: &PruneMask, batch: &Batch) -> Result<()> {
    if mask.len() != params.len() {
        return Err(Error::Shape(format!(
            "mask covers {} entries, parameters have {}",
            mask.len(),
            params.len()
        )));
    }
    let arch = params.architecture();
    if batch.features.ncols() != arch.input_dim() {
        return Err(Error::Shape(format!(
            "batch feature width {} does not match input dimension {}",
            batch.features.ncols(),
            arch.input_dim()
        )));
    }
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    match &batch.targets {
        Targets::Classes(labels) => {
            let classes = arch.output_dim();
            if let Some(bad) = labels.iter().find(|&&c| c as usize >= classes) {
                return Err(Error::Shape(format!("label {bad} out of range for {classes} outputs")));
            }
        }
        Targets::Values(_) => {
            if arch.output_dim() != 1 {
                return Err(Error::Shape("regression targets need a single output".into()));
            }
        }
    }
    Ok(())
}

fn run_forward<T: Real>(net: &Net<T>, features: &Array2<f32>) -> Result<Trace<T>> {
    let mut a: Array2<T> = features.mapv(|v| T::from_f64(v as f64));
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut pre = Vec::with_capacity(net.layers.len());
    for (index, layer) in net.layers.iter().enumerate() {
        let mut z = a.dot(&layer.weight.t());
        if let Some(b) = &layer.bias {
            z += b;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow { layer: index });
        }
        inputs.push(a);
        a = match layer.activation {
            Activation::Relu => z.mapv(|v| v.max(T::zero())),
            Activation::None => z.clone(),
        };
        pre.push(z);
    }
    Ok(Trace { inputs, pre })
}

fn softmax_rows<T: Real>(logits: &Array2<T>) -> Array2<T> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.iter().copied().sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Mean loss and its gradient with respect to the network output.
fn loss_and_delta<T: Real>(out: &Array2<T>, targets: &Targets) -> (T, Array2<T>) {
    let n = T::from_f64(out.nrows() as f64);
    match targets {
        Targets::Classes(labels) => {
            let mut total = T::zero();
            let mut delta = Array2::zeros(out.raw_dim());
            for ((row, mut d), &y) in out.rows().into_iter().zip(delta.rows_mut()).zip(labels) {
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                total = total + (lse - row[y as usize]);
                for (dj, &zj) in d.iter_mut().zip(row.iter()) {
                    *dj = (zj - lse).exp() / n;
                }
                d[y as usize] = d[y as usize] - T::one() / n;
            }
            (total / n, delta)
        }
        Targets::Values(values) => {
            let two = T::from_f64(2.0);
            let mut total = T::zero();
            let mut delta = Array2::zeros(out.raw_dim());
            for ((o, d), &t) in out.column(0).iter().zip(delta.column_mut(0)).zip(values) {
                let r = *o - T::from_f64(t as f64);
                total = total + r * r;
                *d = two * r / n;
            }
            (total / n, delta)
        }
    }
}

fn relu_gate<T: Real>(pre: &Array2<T>, activation: Activation) -> Option<Array2<T>> {
    match activation {
        Activation::Relu => Some(pre.mapv(|v| if v > T::zero() { T::one() } else { T::zero() })),
        Activation::None => None,
    }
}

/// Flattens per-layer weight/bias gradients in layout order and applies the mask.
fn flatten<T: Real>(parts: Vec<(Array2<T>, Option<Array1<T>>)>, keep: &[bool]) -> Vec<T> {
    let mut flat = Vec::with_capacity(keep.len());
    for (w, b) in parts {
        flat.extend(w.iter().copied());
        if let Some(b) = b {
            flat.extend(b.iter().copied());
        }
    }
    for (g, &k) in flat.iter_mut().zip(keep) {
        if !k {
            *g = T::zero();
        }
    }
    flat
}

fn run_backward<T: Real>(net: &Net<T>, trace: &Trace<T>, delta_out: Array2<T>) -> Vec<(Array2<T>, Option<Array1<T>>)> {
    let n_layers = net.layers.len();
    let mut parts = Vec::with_capacity(n_layers);
    let mut delta = delta_out;
    for l in (0..n_layers).rev() {
        let layer = &net.layers[l];
        let dw = delta.t().dot(&trace.inputs[l]);
        let db = layer.bias.as_ref().map(|_| delta.sum_axis(Axis(0)));
        if l > 0 {
            let mut prev = delta.dot(&layer.weight);
            if let Some(gate) = relu_gate(&trace.pre[l - 1], net.layers[l - 1].activation) {
                prev *= &gate;
            }
            delta = prev;
        }
        parts.push((dw, db));
    }
    parts.reverse();
    parts
}

/// Logits and mean loss of the masked network on `batch`.
pub fn forward<T: Real>(params: &ParamVector<T>, mask: &PruneMask, batch: &Batch) -> Result<ForwardOutput<T>> {
    check_inputs(params, mask, batch)?;
    let net = Net::masked(params.architecture(), params.values(), mask.bits());
    let mut trace = run_forward(&net, &batch.features)?;
    let logits = trace.pre.pop().expect("at least one layer");
    let (loss, _) = loss_and_delta(&logits, &batch.targets);
    Ok(ForwardOutput { logits, loss })
}

/// Network outputs for unlabeled rows.
pub fn predict<T: Real>(params: &ParamVector<T>, mask: &PruneMask, features: &Array2<f32>) -> Result<Array2<T>> {
    if mask.len() != params.len() {
        return Err(Error::Shape(format!("mask covers {} entries, parameters have {}", mask.len(), params.len())));
    }
    if features.ncols() != params.architecture().input_dim() {
        return Err(Error::Shape(format!(
            "feature width {} does not match input dimension {}",
            features.ncols(),
            params.architecture().input_dim()
        )));
    }
    let net = Net::masked(params.architecture(), params.values(), mask.bits());
    let mut trace = run_forward(&net, features)?;
    Ok(trace.pre.pop().expect("at least one layer"))
}

pub fn loss<T: Real>(params: &ParamVector<T>, mask: &PruneMask, batch: &Batch) -> Result<T> {
    forward(params, mask, batch).map(|o| o.loss)
}

/// Loss, logits and gradient in one pass.
pub(crate) fn value_and_grad<T: Real>(
    params: &ParamVector<T>,
    mask: &PruneMask,
    batch: &Batch,
) -> Result<(ForwardOutput<T>, Vec<T>)> {
    check_inputs(params, mask, batch)?;
    let net = Net::masked(params.architecture(), params.values(), mask.bits());
    let trace = run_forward(&net, &batch.features)?;
    let logits = trace.pre.last().expect("at least one layer").clone();
    let (loss, delta) = loss_and_delta(&logits, &batch.targets);
    let grad = flatten(run_backward(&net, &trace, delta), mask.bits());
    Ok((ForwardOutput { logits, loss }, grad))
}

/// Gradient of the masked loss; masked positions are exactly zero.
pub fn backward<T: Real>(params: &ParamVector<T>, mask: &PruneMask, batch: &Batch) -> Result<ParamVector<T>> {
    let (_, grad) = value_and_grad(params, mask, batch)?;
    ParamVector::from_values(params.architecture(), grad)
}

/// Hessian of the masked loss applied to `v`.
///
/// With `m` the mask, this is `diag(m) · H(θ ⊙ m) · diag(m) · v`, the exact
/// second derivative of `θ ↦ L(θ ⊙ m)`.
pub fn hvp<T: Real>(params: &ParamVector<T>, mask: &PruneMask, batch: &Batch, v: &[T]) -> Result<Vec<T>> {
    check_inputs(params, mask, batch)?;
    if v.len() != params.len() {
        return Err(Error::Shape(format!("direction has {} entries, parameters {}", v.len(), params.len())));
    }
    let arch = params.architecture();
    let net = Net::masked(arch, params.values(), mask.bits());
    let dir = Net::masked(arch, v, mask.bits());
    let trace = run_forward(&net, &batch.features)?;
    let n_layers = net.layers.len();
    let rows = batch.len();

    // Directional derivative of every layer input and pre-activation.
    let mut r_inputs = Vec::with_capacity(n_layers);
    let mut r_pre = Vec::with_capacity(n_layers);
    let mut r_a: Array2<T> = Array2::zeros((rows, arch.input_dim()));
    for l in 0..n_layers {
        let (layer, d) = (&net.layers[l], &dir.layers[l]);
        let mut rz = r_a.dot(&layer.weight.t()) + trace.inputs[l].dot(&d.weight.t());
        if let Some(vb) = &d.bias {
            rz += vb;
        }
        r_inputs.push(r_a);
        r_a = match relu_gate(&trace.pre[l], layer.activation) {
            Some(gate) => &rz * &gate,
            None => rz.clone(),
        };
        r_pre.push(rz);
    }

    let out = &trace.pre[n_layers - 1];
    let r_out = &r_pre[n_layers - 1];
    let n = T::from_f64(rows as f64);
    let (_, mut delta) = loss_and_delta(out, &batch.targets);
    let mut r_delta = match &batch.targets {
        Targets::Classes(_) => {
            let p = softmax_rows(out);
            let mut rp = &p * r_out;
            for (mut row, prow) in rp.rows_mut().into_iter().zip(p.rows()) {
                let s: T = row.iter().copied().sum();
                for (r, &pj) in row.iter_mut().zip(prow.iter()) {
                    *r = (*r - pj * s) / n;
                }
            }
            rp
        }
        Targets::Values(_) => r_out.mapv(|v| T::from_f64(2.0) * v / n),
    };

    let mut parts = Vec::with_capacity(n_layers);
    for l in (0..n_layers).rev() {
        let (layer, d) = (&net.layers[l], &dir.layers[l]);
        let hw = r_delta.t().dot(&trace.inputs[l]) + delta.t().dot(&r_inputs[l]);
        let hb = layer.bias.as_ref().map(|_| r_delta.sum_axis(Axis(0)));
        if l > 0 {
            let gate = relu_gate(&trace.pre[l - 1], net.layers[l - 1].activation);
            let mut next_r = r_delta.dot(&layer.weight) + delta.dot(&d.weight);
            let mut next = delta.dot(&layer.weight);
            if let Some(gate) = gate {
                next_r *= &gate;
                next *= &gate;
            }
            r_delta = next_r;
            delta = next;
        }
        parts.push((hw, hb));
    }
    parts.reverse();
    Ok(flatten(parts, mask.bits()))
}
