//! Binary pruning masks and density bookkeeping.
//!
//! Density is always the fraction of eligible parameters that REMAIN.
//! Eligibility decides which positions pruning may touch; ineligible positions
//! (biases, by default) are always kept.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::criteria::ScoreVector;
use crate::error::{Error, Result};
use crate::nn::{Architecture, Layout, TensorRole};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskScope {
    /// One threshold across every eligible parameter.
    #[default]
    Global,
    /// Each layer keeps the same fraction of its own eligible parameters.
    PerLayer,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Eligibility {
    #[default]
    WeightsOnly,
    All,
}

impl Eligibility {
    pub fn admits(self, role: TensorRole) -> bool {
        match self {
            Eligibility::WeightsOnly => role == TensorRole::Weight,
            Eligibility::All => true,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Eligibility::WeightsOnly => "weights",
            Eligibility::All => "weights+biases",
        }
    }
}

impl std::str::FromStr for Eligibility {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weights" | "weights-only" => Ok(Eligibility::WeightsOnly),
            "weights+biases" | "all" => Ok(Eligibility::All),
            _ => Err(Error::Config(format!("unknown eligibility {s:?}"))),
        }
    }
}

impl fmt::Display for MaskScope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskScope::Global => "global",
            MaskScope::PerLayer => "per-layer",
        })
    }
}

impl std::str::FromStr for MaskScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(MaskScope::Global),
            "per-layer" | "per_layer" => Ok(MaskScope::PerLayer),
            _ => Err(Error::Config(format!("unknown mask scope {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskOptions {
    pub scope: MaskScope,
    pub eligibility: Eligibility,
}

/// Fraction of eligible parameters to keep, in `(0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct DensityTarget(f64);

impl DensityTarget {
    pub fn new(density: f64) -> Result<Self> {
        if density > 0.0 && density <= 1.0 {
            Ok(Self(density))
        } else {
            Err(Error::Config(format!("density must lie in (0, 1], got {density}")))
        }
    }

    /// `sparsity` is the fraction removed; density = 1 − sparsity.
    pub fn from_sparsity(sparsity: f64) -> Result<Self> {
        Self::new(1.0 - sparsity).map_err(|_| Error::Config(format!("sparsity must lie in [0, 1), got {sparsity}")))
    }

    pub fn density(self) -> f64 {
        self.0
    }

    pub fn sparsity(self) -> f64 {
        1.0 - self.0
    }

    pub fn kept_count(self, eligible: usize) -> usize {
        ((self.0 * eligible as f64).round() as usize).min(eligible)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneMask {
    bits: Vec<bool>,
    layout: Layout,
    options: MaskOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerReport {
    pub layer: usize,
    pub kept: usize,
    pub total: usize,
}

impl PruneMask {
    /// Keeps everything.
    pub fn dense(arch: &Architecture) -> Self {
        Self::ones(&arch.layout(), MaskOptions::default())
    }

    pub fn ones(layout: &Layout, options: MaskOptions) -> Self {
        Self { bits: vec![true; layout.len()], layout: layout.clone(), options }
    }

    pub fn from_bits(layout: &Layout, bits: Vec<bool>, options: MaskOptions) -> Result<Self> {
        if bits.len() != layout.len() {
            return Err(Error::Shape(format!("mask has {} bits, layout {}", bits.len(), layout.len())));
        }
        Ok(Self { bits, layout: layout.clone(), options })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn options(&self) -> MaskOptions {
        self.options
    }

    pub fn with_options(mut self, options: MaskOptions) -> Self {
        self.options = options;
        self
    }

    pub fn eligible(&self) -> Vec<bool> {
        eligible_positions(&self.layout, self.options.eligibility)
    }

    pub fn eligible_count(&self) -> usize {
        self.eligible().iter().filter(|&&e| e).count()
    }

    pub fn kept_eligible(&self) -> usize {
        self.bits.iter().zip(self.eligible()).filter(|(&b, e)| b && *e).count()
    }

    /// Kept fraction of the eligible parameters.
    pub fn density(&self) -> f64 {
        let eligible = self.eligible_count();
        if eligible == 0 {
            return 1.0;
        }
        self.kept_eligible() as f64 / eligible as f64
    }

    /// Eligible kept/total per layer; logs a warning for every collapsed layer.
    pub fn per_layer_report(&self) -> Vec<LayerReport> {
        let eligible = self.eligible();
        let mut out: Vec<LayerReport> = (0..self.layout.layer_count())
            .map(|layer| LayerReport { layer, kept: 0, total: 0 })
            .collect();
        for slot in self.layout.slots() {
            let r = &mut out[slot.layer];
            for i in slot.range() {
                if eligible[i] {
                    r.total += 1;
                    r.kept += usize::from(self.bits[i]);
                }
            }
        }
        for r in &out {
            if r.total > 0 && r.kept == 0 {
                log::warn!("layer {} is fully pruned (layer collapse)", r.layer);
            }
        }
        out
    }

    pub fn collapsed_layers(&self) -> Vec<usize> {
        self.per_layer_report()
            .into_iter()
            .filter(|r| r.total > 0 && r.kept == 0)
            .map(|r| r.layer)
            .collect()
    }

    /// True when every kept bit of `self` is also kept in `other`.
    pub fn is_subset_of(&self, other: &PruneMask) -> bool {
        self.bits.len() == other.bits.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

fn eligible_positions(layout: &Layout, eligibility: Eligibility) -> Vec<bool> {
    layout.roles().into_iter().map(|r| eligibility.admits(r)).collect()
}

fn validate_scores(scores: &ScoreVector, layout: &Layout) -> Result<()> {
    if scores.len() != layout.len() {
        return Err(Error::Shape(format!("{} scores for {} parameters", scores.len(), layout.len())));
    }
    if let Some(i) = scores.values().iter().position(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::Config(format!("score at index {i} is not finite")));
    }
    Ok(())
}

/// Highest score first; equal scores keep the lower flat index first.
fn rank(values: &[f64], a: usize, b: usize) -> Ordering {
    values[b].total_cmp(&values[a]).then(a.cmp(&b))
}

fn select_top(values: &[f64], mut candidates: Vec<usize>, keep: usize, bits: &mut [bool]) {
    if keep == 0 {
        return;
    }
    if keep < candidates.len() {
        candidates.select_nth_unstable_by(keep - 1, |&a, &b| rank(values, a, b));
        candidates.truncate(keep);
    }
    for i in candidates {
        bits[i] = true;
    }
}

/// Groups of candidate positions that share one kept-count: the whole net for
/// global scope, one group per layer otherwise.
fn groups(layout: &Layout, scope: MaskScope, candidate: impl Fn(usize) -> bool) -> Vec<Vec<usize>> {
    match scope {
        MaskScope::Global => vec![(0..layout.len()).filter(|&i| candidate(i)).collect()],
        MaskScope::PerLayer => {
            let mut out = vec![Vec::new(); layout.layer_count()];
            for slot in layout.slots() {
                out[slot.layer].extend(slot.range().filter(|&i| candidate(i)));
            }
            out
        }
    }
}

/// Keeps the `round(density · k)` highest-scoring eligible parameters.
///
/// In per-layer scope each layer keeps `round(density · k_layer)`, at least one.
pub fn topk_mask(scores: &ScoreVector, target: DensityTarget, options: MaskOptions) -> Result<PruneMask> {
    let layout = scores.layout().clone();
    validate_scores(scores, &layout)?;
    let eligible = eligible_positions(&layout, options.eligibility);
    let mut bits: Vec<bool> = eligible.iter().map(|&e| !e).collect();
    for group in groups(&layout, options.scope, |i| eligible[i]) {
        let keep = match options.scope {
            MaskScope::Global => target.kept_count(group.len()),
            MaskScope::PerLayer => target.kept_count(group.len()).max(1).min(group.len()),
        };
        select_top(scores.values(), group, keep, &mut bits);
    }
    let mask = PruneMask { bits, layout, options };
    mask.per_layer_report();
    Ok(mask)
}

/// Prunes further among the survivors of `current`; never revives a pruned
/// position, whatever its score.
pub fn refine_mask(current: &PruneMask, scores: &ScoreVector, target: DensityTarget) -> Result<PruneMask> {
    let layout = current.layout.clone();
    validate_scores(scores, &layout)?;
    if scores.layout() != &layout {
        return Err(Error::Shape("score layout differs from mask layout".into()));
    }
    let options = current.options;
    let eligible = current.eligible();
    let mut bits: Vec<bool> = eligible.iter().map(|&e| !e).collect();
    let eligible_groups = groups(&layout, options.scope, |i| eligible[i]);
    let survivor_groups = groups(&layout, options.scope, |i| eligible[i] && current.bits[i]);
    for (all, survivors) in eligible_groups.into_iter().zip(survivor_groups) {
        let requested = target.kept_count(all.len());
        let keep = match options.scope {
            MaskScope::Global => requested,
            MaskScope::PerLayer => requested.max(1).min(survivors.len()),
        };
        if keep > survivors.len() {
            return Err(Error::Monotonicity { current: survivors.len(), requested: keep });
        }
        select_top(scores.values(), survivors, keep, &mut bits);
    }
    let mask = PruneMask { bits, layout, options };
    mask.per_layer_report();
    Ok(mask)
}
