//! Pruning-at-initialization saliency criteria.
//!
//! Every criterion returns a [`ScoreVector`] aligned with the parameter
//! layout; the mask keeps the highest scores. Positions that are already
//! pruned, or not eligible for pruning, carry `-inf` so they are never picked.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::PruneMask;
use crate::nn::objective::Objective;
use crate::nn::{self, Architecture, Batch, Layout, ParamVector, Real, TensorRole};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    layout: Layout,
    values: Vec<f64>,
    tag: String,
    normalized: bool,
}

impl ScoreVector {
    pub fn new(layout: Layout, values: Vec<f64>, tag: impl Into<String>) -> Self {
        assert_eq!(layout.len(), values.len(), "score vector must match its layout");
        Self { layout, values, tag: tag.into(), normalized: false }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
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

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn normalized(mut self, normalized: bool) -> Self {
        self.normalized = normalized;
        self
    }

    /// Replaces pruned and ineligible positions with `-inf`.
    pub fn with_sentinels(mut self, mask: &PruneMask) -> Self {
        for ((v, &kept), eligible) in self.values.iter_mut().zip(mask.bits()).zip(mask.eligible()) {
            if !kept || !eligible {
                *v = f64::NEG_INFINITY;
            }
        }
        self
    }

    /// Negated scores, which reverses which end of the ranking is kept.
    pub fn inverted(mut self) -> Self {
        for v in &mut self.values {
            if v.is_finite() {
                *v = -*v;
            }
        }
        self.tag.push_str("-inverted");
        self
    }
}

/// The criterion names accepted on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Criterion {
    Random,
    Magnitude,
    Snip,
    Grasp,
    Npb,
    Autos,
}

impl Criterion {
    pub const ALL: [Criterion; 6] =
        [Criterion::Random, Criterion::Magnitude, Criterion::Snip, Criterion::Grasp, Criterion::Npb, Criterion::Autos];

    pub fn name(self) -> &'static str {
        match self {
            Criterion::Random => "random",
            Criterion::Magnitude => "magnitude",
            Criterion::Snip => "snip",
            Criterion::Grasp => "grasp",
            Criterion::Npb => "npb",
            Criterion::Autos => "autos",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown criterion {s:?} (expected random|magnitude|snip|grasp|npb|autos)")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnipVariant {
    /// `|g|`
    #[default]
    GradOnly,
    /// `|θ ⊙ g|`, connection sensitivity as originally formulated.
    WeightTimesGrad,
}

impl fmt::Display for SnipVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SnipVariant::GradOnly => "grad_only",
            SnipVariant::WeightTimesGrad => "weight_times_grad",
        })
    }
}

impl FromStr for SnipVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad_only" => Ok(Self::GradOnly),
            "weight_times_grad" => Ok(Self::WeightTimesGrad),
            _ => Err(Error::Config(format!("unknown SNIP variant {s:?}"))),
        }
    }
}

/// Independent uniform(0, 1) scores.
pub fn random_score(layout: &Layout, seed: u64) -> ScoreVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..layout.len()).map(|_| rng.random::<f64>()).collect();
    ScoreVector::new(layout.clone(), values, "random")
}

pub fn magnitude_score<T: Real>(params: &ParamVector<T>) -> ScoreVector {
    let values = params.values().iter().map(|v| v.as_f64().abs()).collect();
    ScoreVector::new(params.layout().clone(), values, "magnitude")
}

/// Combines a weight vector and its gradient into SNIP scores.
pub fn snip_from_gradient(theta: &[f64], grad: &[f64], variant: SnipVariant) -> Vec<f64> {
    match variant {
        SnipVariant::GradOnly => grad.iter().map(|g| g.abs()).collect(),
        SnipVariant::WeightTimesGrad => theta.iter().zip(grad).map(|(t, g)| (t * g).abs()).collect(),
    }
}

pub fn snip_score<T: Real>(
    params: &ParamVector<T>,
    mask: &PruneMask,
    batch: &Batch,
    variant: SnipVariant,
) -> Result<ScoreVector> {
    let grad = nn::backward(params, mask, batch)?.to_f64_vec();
    let values = snip_from_gradient(&params.to_f64_vec(), &grad, variant);
    let tag = format!("snip/{variant}");
    Ok(ScoreVector::new(params.layout().clone(), values, tag).with_sentinels(mask))
}

/// `-θ ⊙ Hg` for any objective, with `g` its gradient at `θ`.
pub fn grasp_from_objective(obj: &dyn Objective, theta: &[f64]) -> Result<Vec<f64>> {
    let g = obj.gradient(theta)?;
    let hg = obj.hvp(theta, &g)?;
    Ok(theta.iter().zip(&hg).map(|(t, h)| -t * h).collect())
}

pub fn grasp_score<T: Real>(params: &ParamVector<T>, mask: &PruneMask, batch: &Batch) -> Result<ScoreVector> {
    let g = nn::backward(params, mask, batch)?;
    let hg = nn::hvp(params, mask, batch, g.values())?;
    let values = params.values().iter().zip(&hg).map(|(t, h)| -t.as_f64() * h.as_f64()).collect();
    Ok(ScoreVector::new(params.layout().clone(), values, "grasp").with_sentinels(mask))
}

/// Surviving input→node and node→output path counts of a masked MLP.
///
/// `in_paths[l][j]` counts paths from any input to node `j` of layer `l`
/// (layer 0 is the input layer); `out_paths[l][j]` counts paths from that node
/// to any output. Counts saturate at `u128::MAX`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathStats {
    pub in_paths: Vec<Vec<u128>>,
    pub out_paths: Vec<Vec<u128>>,
}

impl PathStats {
    pub fn node_is_effective(&self, layer: usize, node: usize) -> bool {
        self.in_paths[layer][node] > 0 && self.out_paths[layer][node] > 0
    }
}

pub fn path_stats(mask: &PruneMask, arch: &Architecture) -> Result<PathStats> {
    let layout = arch.layout();
    if mask.len() != layout.len() {
        return Err(Error::Shape(format!("mask has {} bits, architecture {}", mask.len(), layout.len())));
    }
    let widths = arch.widths();
    let bits = mask.bits();
    let kept = |layer: usize, out: usize, inp: usize| -> bool {
        let slot = layout.slot(layer, TensorRole::Weight).expect("every layer has a weight");
        bits[slot.offset + out * widths[layer] + inp]
    };

    let mut in_paths = vec![vec![1u128; widths[0]]];
    for (l, spec) in arch.layers().iter().enumerate() {
        let prev = &in_paths[l];
        let next = (0..spec.out_dim)
            .map(|o| {
                (0..spec.in_dim)
                    .filter(|&i| kept(l, o, i))
                    .fold(0u128, |acc, i| acc.saturating_add(prev[i]))
            })
            .collect();
        in_paths.push(next);
    }

    let n = arch.layers().len();
    let mut out_paths = vec![Vec::new(); n + 1];
    out_paths[n] = vec![1u128; widths[n]];
    for l in (0..n).rev() {
        let spec = &arch.layers()[l];
        let next = &out_paths[l + 1];
        out_paths[l] = (0..spec.in_dim)
            .map(|i| {
                (0..spec.out_dim)
                    .filter(|&o| kept(l, o, i))
                    .fold(0u128, |acc, o| acc.saturating_add(next[o]))
            })
            .collect();
    }
    Ok(PathStats { in_paths, out_paths })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NpbConfig {
    pub alpha: f64,
}

impl NpbConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&alpha) {
            Ok(Self { alpha })
        } else {
            Err(Error::Config(format!("NPB alpha must lie in [0, 1], got {alpha}")))
        }
    }
}

impl Default for NpbConfig {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

/// `α·f_n + (1 − α)·f_p` per parameter.
///
/// `f_p` is the number of input→output paths through the edge,
/// `in_paths(src) · out_paths(dst)`, min-max normalized over the unpruned
/// eligible edges; `f_n` is 1 when both endpoints are effective nodes. A bias
/// is treated as an edge from an always-on source.
pub fn npb_lite_score(mask: &PruneMask, arch: &Architecture, cfg: NpbConfig) -> Result<ScoreVector> {
    let stats = path_stats(mask, arch)?;
    let layout = arch.layout();
    let widths = arch.widths();
    let mut paths = vec![0f64; layout.len()];
    let mut nodes = vec![0f64; layout.len()];
    for slot in layout.slots() {
        let l = slot.layer;
        for (k, idx) in slot.range().enumerate() {
            let (src_in, src_ok, dst) = match slot.role {
                TensorRole::Weight => {
                    let (o, i) = (k / widths[l], k % widths[l]);
                    (stats.in_paths[l][i], stats.node_is_effective(l, i), o)
                }
                TensorRole::Bias => (1, true, k),
            };
            let through = src_in.saturating_mul(stats.out_paths[l + 1][dst]);
            paths[idx] = through as f64;
            nodes[idx] = if src_ok && stats.node_is_effective(l + 1, dst) { 1.0 } else { 0.0 };
        }
    }

    let live: Vec<usize> = mask
        .bits()
        .iter()
        .zip(mask.eligible())
        .enumerate()
        .filter(|(_, (&kept, eligible))| kept && *eligible)
        .map(|(i, _)| i)
        .collect();
    let (lo, hi) = live
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(paths[i]), hi.max(paths[i])));
    if hi <= 0.0 {
        log::warn!("degenerate network: no surviving input-to-output paths; NPB scores are all zero");
        let values = vec![0.0; layout.len()];
        return Ok(ScoreVector::new(layout, values, "npb-lite").normalized(true).with_sentinels(mask));
    }
    let values = paths
        .iter()
        .zip(&nodes)
        .map(|(&p, &f_n)| {
            let f_p = if hi > lo { (p - lo) / (hi - lo) } else { 1.0 };
            cfg.alpha * f_n + (1.0 - cfg.alpha) * f_p
        })
        .collect();
    Ok(ScoreVector::new(layout, values, "npb-lite").normalized(true).with_sentinels(mask))
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;
    use crate::mask::{topk_mask, DensityTarget, MaskOptions};
    use crate::nn::objective::Quadratic;

    fn flat(values: &[f64]) -> ParamVector<f64> {
        let arch = Architecture::mlp(&[values.len(), 1], false).unwrap();
        ParamVector::from_values(&arch, values.to_vec()).unwrap()
    }

    fn bits(mask: &PruneMask) -> Vec<u8> {
        mask.bits().iter().map(|&b| u8::from(b)).collect()
    }

    #[test]
    fn random_scores_follow_the_seed() {
        let layout = Layout::flat(50);
        assert_eq!(random_score(&layout, 1), random_score(&layout, 1));
        assert_ne!(random_score(&layout, 1), random_score(&layout, 2));
        assert!(random_score(&layout, 3).values().iter().all(|v| (0.0..1.0).contains(v)));
    }

    #[test]
    fn magnitude_scores_and_mask() {
        let p = flat(&[0.5, -0.2, 0.1, -0.9]);
        let s = magnitude_score(&p);
        assert_eq!(s.values(), &[0.5, 0.2, 0.1, 0.9]);
        let m = topk_mask(&s, DensityTarget::new(0.5).unwrap(), MaskOptions::default()).unwrap();
        assert_eq!(bits(&m), [1, 0, 0, 1]);
        let scaled = flat(&[1.5, -0.6, 0.3, -2.7]);
        let m3 = topk_mask(&magnitude_score(&scaled), DensityTarget::new(0.5).unwrap(), MaskOptions::default()).unwrap();
        assert_eq!(m, m3);
        let equal = flat(&[0.5, -0.5, 0.5, -0.5]);
        let me = topk_mask(&magnitude_score(&equal), DensityTarget::new(0.5).unwrap(), MaskOptions::default()).unwrap();
        assert_eq!(bits(&me), [1, 1, 0, 0]);
    }

    #[test]
    fn snip_variants() {
        assert_eq!(snip_from_gradient(&[2.0, 1.0], &[0.1, -0.5], SnipVariant::GradOnly), vec![0.1, 0.5]);
        assert_eq!(snip_from_gradient(&[2.0, 1.0], &[0.1, -0.5], SnipVariant::WeightTimesGrad), vec![0.2, 0.5]);
    }

    #[test]
    fn snip_marks_pruned_positions() {
        let arch = Architecture::mlp(&[2, 3, 2], true).unwrap();
        let params: ParamVector<f64> = nn::kaiming_init(&arch, 4);
        let mut b = vec![true; arch.param_count()];
        b[2] = false;
        let mask = PruneMask::from_bits(&arch.layout(), b, MaskOptions::default()).unwrap();
        let batch = Batch::classes(array![[0.2, 0.9], [0.7, 0.1]], vec![0, 1]).unwrap();
        let s = snip_score(&params, &mask, &batch, SnipVariant::GradOnly).unwrap();
        assert_eq!(s.values()[2], f64::NEG_INFINITY);
        // biases are not eligible by default
        let bias = arch.layout().slot(0, TensorRole::Bias).unwrap().offset;
        assert_eq!(s.values()[bias], f64::NEG_INFINITY);
        let m = topk_mask(&s, DensityTarget::new(0.9).unwrap(), MaskOptions::default()).unwrap();
        assert!(!m.bits()[2]);
    }

    #[test]
    fn grasp_on_the_quadratic() {
        let q = Quadratic { diagonal: vec![2.0, 3.0] };
        assert_eq!(grasp_from_objective(&q, &[1.0, 1.0]).unwrap(), vec![-4.0, -9.0]);
        assert_eq!(grasp_from_objective(&q, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn grasp_of_zero_params_is_zero() {
        let arch = Architecture::mlp(&[2, 3, 2], true).unwrap();
        let params = ParamVector::<f64>::zeros(&arch);
        let batch = Batch::classes(array![[0.2, 0.9]], vec![1]).unwrap();
        let mask = PruneMask::dense(&arch).with_options(MaskOptions { eligibility: crate::mask::Eligibility::All, ..Default::default() });
        let s = grasp_score(&params, &mask, &batch).unwrap();
        assert!(s.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_two_two_two_paths() {
        let arch = Architecture::mlp(&[2, 2, 2], false).unwrap();
        let stats = path_stats(&PruneMask::dense(&arch), &arch).unwrap();
        assert_eq!(stats.in_paths[1], vec![2, 2]);
        assert_eq!(stats.out_paths[1], vec![2, 2]);
        assert_eq!(stats.in_paths[2], vec![4, 4]);
        assert_eq!(stats.out_paths[0], vec![4, 4]);
        // every edge lies on 2 of the 8 input-output paths, so scores are uniform
        let s = npb_lite_score(&PruneMask::dense(&arch), &arch, NpbConfig::new(0.3).unwrap()).unwrap();
        assert!(s.values().iter().all(|&v| v == s.values()[0]));
    }

    #[test]
    fn pruned_layer_cuts_downstream_paths() {
        let arch = Architecture::mlp(&[2, 2, 2], false).unwrap();
        let mut b = vec![true; arch.param_count()];
        b[..4].fill(false);
        let mask = PruneMask::from_bits(&arch.layout(), b, MaskOptions::default()).unwrap();
        let stats = path_stats(&mask, &arch).unwrap();
        assert_eq!(stats.in_paths[1], vec![0, 0]);
        assert_eq!(stats.in_paths[2], vec![0, 0]);
    }

    #[test]
    fn single_chain_counts_are_one() {
        let arch = Architecture::mlp(&[1, 1, 1], true).unwrap();
        let stats = path_stats(&PruneMask::dense(&arch), &arch).unwrap();
        for layer in 0..3 {
            assert_eq!(stats.in_paths[layer], vec![1]);
            assert_eq!(stats.out_paths[layer], vec![1]);
        }
    }

    #[test]
    fn npb_alpha_one_is_node_effectiveness() {
        let arch = Architecture::mlp(&[2, 2, 1], false).unwrap();
        // hidden node 1 has no outgoing edge: edges into it are dangling
        let layout = arch.layout();
        let mut b = vec![true; layout.len()];
        b[5] = false; // second-layer weight from hidden 1 to the output
        let mask = PruneMask::from_bits(&layout, b, MaskOptions::default()).unwrap();
        let s = npb_lite_score(&mask, &arch, NpbConfig::new(1.0).unwrap()).unwrap();
        assert_eq!(&s.values()[..4], &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(s.values()[4], 1.0);
        assert_eq!(s.values()[5], f64::NEG_INFINITY);
    }

    #[test]
    fn npb_alpha_zero_ranks_the_chain_above_a_dangling_edge() {
        let arch = Architecture::mlp(&[1, 2, 1], false).unwrap();
        // weights: in->h0, in->h1, h0->out, h1->out; drop h1->out so h1 is dead
        let mask =
            PruneMask::from_bits(&arch.layout(), vec![true, true, true, false], MaskOptions::default()).unwrap();
        let s = npb_lite_score(&mask, &arch, NpbConfig::new(0.0).unwrap()).unwrap();
        assert_eq!(s.values()[0], 1.0);
        assert_eq!(s.values()[1], 0.0);
        assert_eq!(s.values()[2], 1.0);
    }

    #[test]
    fn criterion_names_round_trip() {
        for c in Criterion::ALL {
            assert_eq!(c.name().parse::<Criterion>().unwrap(), c);
        }
        assert!("synflow".parse::<Criterion>().is_err());
        assert!(NpbConfig::new(1.2).is_err());
    }
}
