//! Dense multilayer-perceptron engine.
//!
//! Parameters live in one flat [`ParamVector`] whose [`Layout`] records where
//! each layer's weight matrix and bias vector sit. Weight matrices are stored
//! row-major with shape `(out_dim, in_dim)`; a layer's bias follows its weight.
//! Every pass takes a [`PruneMask`](crate::mask::PruneMask) and computes with
//! `params ⊙ mask`, so masked entries never influence logits or gradients.

mod engine;
pub mod objective;
pub mod train;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use engine::{backward, forward, hvp, loss, predict, Batch, ForwardOutput, LabeledBatch, Targets};

/// Floating point type the engine can run in: `f32` for speed, `f64` for
/// verification against numerical oracles.
pub trait Real:
    num_traits::Float
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::NumAssign
    + std::iter::Sum
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Default
    + 'static
{
    const NAME: &'static str;

    fn from_f64(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub has_bias: bool,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn weight_len(&self) -> usize {
        self.in_dim * self.out_dim
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + if self.has_bias { self.out_dim } else { 0 }
    }
}

/// A validated chain of layers: dimensions connect and the last layer emits
/// raw logits.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    layers: Vec<LayerSpec>,
}

impl Architecture {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("architecture needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(Error::Config(format!("layer {i} has a zero dimension")));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Config(format!(
                    "dimension chain broken between layer {i} (out {}) and layer {} (in {})",
                    pair[0].out_dim,
                    i + 1,
                    pair[1].in_dim
                )));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::None) {
            return Err(Error::Config("final layer must have no activation (logits)".into()));
        }
        Ok(Self { layers })
    }

    /// ReLU MLP through the given widths, e.g. `[784, 300, 100, 10]`.
    pub fn mlp(widths: &[usize], bias: bool) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("an MLP needs at least input and output widths".into()));
        }
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| LayerSpec {
                in_dim: w[0],
                out_dim: w[1],
                has_bias: bias,
                activation: if i + 1 == n { Activation::None } else { Activation::Relu },
            })
            .collect();
        Self::new(layers)
    }

    /// LeNet-300-100: 784 → 300 → 100 → 10 with ReLU and biases.
    pub fn lenet_300_100() -> Self {
        Self::mlp(&[784, 300, 100, 10], true).expect("static architecture is valid")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_len).sum()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.out_dim))
            .collect()
    }

    pub fn layout(&self) -> Layout {
        Layout::for_layers(&self.layers)
    }
}

/// Compact form `784-300-100-10`. A `:nobias` suffix marks a bias-free net and
/// `:bias=101` spells out a mixed per-layer pattern.
impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let widths: Vec<String> = self.widths().iter().map(|w| w.to_string()).collect();
        write!(f, "{}", widths.join("-"))?;
        if self.layers.iter().all(|l| l.has_bias) {
            Ok(())
        } else if self.layers.iter().all(|l| !l.has_bias) {
            write!(f, ":nobias")
        } else {
            let pattern: String = self.layers.iter().map(|l| if l.has_bias { '1' } else { '0' }).collect();
            write!(f, ":bias={pattern}")
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (dims, suffix) = match s.trim().split_once(':') {
            Some((d, suffix)) => (d, Some(suffix)),
            None => (s.trim(), None),
        };
        let widths = dims
            .split('-')
            .map(|w| {
                w.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad layer width {w:?} in architecture {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let arch = Self::mlp(&widths, suffix != Some("nobias"))?;
        match suffix {
            None | Some("nobias") => Ok(arch),
            Some(other) => {
                let pattern = other
                    .strip_prefix("bias=")
                    .filter(|p| p.len() == arch.layers.len() && p.chars().all(|c| c == '0' || c == '1'))
                    .ok_or_else(|| Error::Config(format!("bad architecture suffix {other:?}")))?;
                let mut layers = arch.layers;
                for (layer, c) in layers.iter_mut().zip(pattern.chars()) {
                    layer.has_bias = c == '1';
                }
                Self::new(layers)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Weight,
    Bias,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorSlot {
    pub layer: usize,
    pub role: TensorRole,
    pub offset: usize,
    pub len: usize,
}

impl TensorSlot {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Where each tensor lives inside a flat parameter array.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Layout {
    slots: Vec<TensorSlot>,
    len: usize,
}

impl Layout {
    fn for_layers(layers: &[LayerSpec]) -> Self {
        let mut slots = Vec::with_capacity(layers.len() * 2);
        let mut offset = 0;
        for (layer, spec) in layers.iter().enumerate() {
            slots.push(TensorSlot { layer, role: TensorRole::Weight, offset, len: spec.weight_len() });
            offset += spec.weight_len();
            if spec.has_bias {
                slots.push(TensorSlot { layer, role: TensorRole::Bias, offset, len: spec.out_dim });
                offset += spec.out_dim;
            }
        }
        Self { slots, len: offset }
    }

    /// A single weight tensor of length `k`; used for plain score vectors.
    pub fn flat(k: usize) -> Self {
        Self { slots: vec![TensorSlot { layer: 0, role: TensorRole::Weight, offset: 0, len: k }], len: k }
    }

    pub fn slots(&self) -> &[TensorSlot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn layer_count(&self) -> usize {
        self.slots.last().map_or(0, |s| s.layer + 1)
    }

    pub fn slot(&self, layer: usize, role: TensorRole) -> Option<&TensorSlot> {
        self.slots.iter().find(|s| s.layer == layer && s.role == role)
    }

    /// Rebuilds a layout from its slots; slots must tile `0..len` in order.
    pub fn from_slots(slots: Vec<TensorSlot>) -> Result<Self> {
        let mut offset = 0;
        for s in &slots {
            if s.offset != offset {
                return Err(Error::Shape(format!("slot at offset {} follows end {offset}", s.offset)));
            }
            offset += s.len;
        }
        Ok(Self { slots, len: offset })
    }

    /// Role of every flat position, in order.
    pub fn roles(&self) -> Vec<TensorRole> {
        let mut out = Vec::with_capacity(self.len);
        for s in &self.slots {
            out.extend(std::iter::repeat_n(s.role, s.len));
        }
        out
    }
}

/// Compact text form, e.g. `w0:6,b0:2,w1:4`.
impl fmt::Display for Layout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, s) in self.slots.iter().enumerate() {
            let tag = if s.role == TensorRole::Weight { 'w' } else { 'b' };
            write!(f, "{}{tag}{}:{}", if i > 0 { "," } else { "" }, s.layer, s.len)?;
        }
        Ok(())
    }
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed layout {text:?}"));
        let mut slots = Vec::new();
        let mut offset = 0;
        for part in text.split(',').filter(|p| !p.is_empty()) {
            let role = match part.as_bytes()[0] {
                b'w' => TensorRole::Weight,
                b'b' => TensorRole::Bias,
                _ => return Err(bad()),
            };
            let (layer, len) = part[1..].split_once(':').ok_or_else(bad)?;
            let layer = layer.parse().map_err(|_| bad())?;
            let len: usize = len.parse().map_err(|_| bad())?;
            slots.push(TensorSlot { layer, role, offset, len });
            offset += len;
        }
        Layout::from_slots(slots)
    }
}

/// Flat parameter store tied to an architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<T = f32> {
    values: Vec<T>,
    arch: Architecture,
    layout: Layout,
}

/// Gradients share the parameter layout.
pub type GradientVector<T = f32> = ParamVector<T>;

impl<T: Real> ParamVector<T> {
    pub fn zeros(arch: &Architecture) -> Self {
        Self::from_values(arch, vec![T::zero(); arch.param_count()]).expect("length matches")
    }

    pub fn from_values(arch: &Architecture, values: Vec<T>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::Shape(format!(
                "architecture {arch} has {} parameters, got {}",
                arch.param_count(),
                values.len()
            )));
        }
        Ok(Self { values, arch: arch.clone(), layout: arch.layout() })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, layer: usize, role: TensorRole) -> Option<&[T]> {
        self.layout.slot(layer, role).map(|s| &self.values[s.range()])
    }

    pub fn cast<U: Real>(&self) -> ParamVector<U> {
        ParamVector {
            values: self.values.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            arch: self.arch.clone(),
            layout: self.layout.clone(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.as_f64()).collect()
    }
}

/// Kaiming-normal weights (std `sqrt(2 / fan_in)`) and zero biases.
///
/// Samples are drawn in `f64` from a ChaCha8 stream, so the `f32` and `f64`
/// initializations for one seed agree up to rounding.
pub fn kaiming_init<T: Real>(arch: &Architecture, seed: u64) -> ParamVector<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(arch.param_count());
    for spec in arch.layers() {
        let normal = Normal::new(0.0, kaiming_std(spec.in_dim)).expect("finite std");
        values.extend((0..spec.weight_len()).map(|_| T::from_f64(normal.sample(&mut rng))));
        if spec.has_bias {
            values.extend(std::iter::repeat_n(T::zero(), spec.out_dim));
        }
    }
    ParamVector::from_values(arch, values).expect("length matches")
}

pub fn kaiming_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lenet_layout_is_contiguous() {
        let arch = Architecture::lenet_300_100();
        let layout = arch.layout();
        assert_eq!(arch.param_count(), 784 * 300 + 300 + 300 * 100 + 100 + 100 * 10 + 10);
        let mut next = 0;
        for s in layout.slots() {
            assert_eq!(s.offset, next);
            next += s.len;
        }
        assert_eq!(next, layout.len());
        assert_eq!(layout.layer_count(), 3);
    }

    #[test]
    fn broken_chain_is_a_config_error() {
        let layers = vec![
            LayerSpec { in_dim: 4, out_dim: 3, has_bias: true, activation: Activation::Relu },
            LayerSpec { in_dim: 2, out_dim: 2, has_bias: true, activation: Activation::None },
        ];
        assert!(matches!(Architecture::new(layers), Err(Error::Config(_))));
    }

    #[test]
    fn final_layer_must_emit_logits() {
        let layers = vec![LayerSpec { in_dim: 4, out_dim: 3, has_bias: true, activation: Activation::Relu }];
        assert!(Architecture::new(layers).is_err());
    }

    #[test]
    fn architecture_string_round_trip() {
        for s in ["784-300-100-10", "2-2-2:nobias", "784-500-150-10", "4-3-2:bias=01"] {
            let arch: Architecture = s.parse().unwrap();
            assert_eq!(arch.to_string(), s);
        }
        assert!("784-x-10".parse::<Architecture>().is_err());
        assert!("784".parse::<Architecture>().is_err());
    }

    #[test]
    fn kaiming_std_closed_forms() {
        assert!((kaiming_std(1) - 1.414_213_562).abs() < 1e-6);
        assert!((kaiming_std(784) - 0.050_507_627).abs() < 1e-6);
    }

    #[test]
    fn kaiming_empirical_std_at_fan_in_784() {
        let arch = Architecture::mlp(&[784, 128], false).unwrap();
        let p: ParamVector<f64> = kaiming_init(&arch, 11);
        let n = p.len() as f64;
        assert!(n >= 1e5);
        let mean = p.values().iter().sum::<f64>() / n;
        let var = p.values().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let rel = (var.sqrt() - kaiming_std(784)).abs() / kaiming_std(784);
        assert!(rel < 0.02, "relative std error {rel}");
    }

    #[test]
    fn kaiming_is_deterministic_with_zero_biases() {
        let arch = Architecture::mlp(&[5, 4, 3], true).unwrap();
        let a: ParamVector<f32> = kaiming_init(&arch, 3);
        let b: ParamVector<f32> = kaiming_init(&arch, 3);
        let c: ParamVector<f32> = kaiming_init(&arch, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.tensor(0, TensorRole::Bias).unwrap().iter().all(|&v| v == 0.0));
        assert!(a.tensor(1, TensorRole::Bias).unwrap().iter().all(|&v| v == 0.0));
        let wide: ParamVector<f64> = kaiming_init(&arch, 3);
        for (x, y) in a.values().iter().zip(wide.values()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
