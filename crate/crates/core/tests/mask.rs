use autos_core::criteria::ScoreVector;
use autos_core::mask::{refine_mask, topk_mask, DensityTarget, Eligibility, MaskOptions, MaskScope};
use autos_core::nn::{Architecture, Layout, TensorRole};
use proptest::prelude::*;

fn layout(widths: &[usize]) -> Layout {
    Architecture::mlp(widths, true).unwrap().layout()
}

fn options() -> impl Strategy<Value = MaskOptions> {
    (prop::bool::ANY, prop::bool::ANY).prop_map(|(g, w)| MaskOptions {
        scope: if g { MaskScope::Global } else { MaskScope::PerLayer },
        eligibility: if w { Eligibility::WeightsOnly } else { Eligibility::All },
    })
}

/// Scores drawn from a small grid so that ties are common.
fn scores(layout: Layout, raw: Vec<u8>) -> ScoreVector {
    let n = layout.len();
    ScoreVector::new(layout, raw.into_iter().cycle().take(n).map(|v| f64::from(v % 7)).collect(), "test")
}

proptest! {
    #[test]
    fn global_kept_count_is_exact(
        raw in prop::collection::vec(any::<u8>(), 1..40),
        d in 0.001f64..=1.0,
        weights_only in prop::bool::ANY,
    ) {
        let lay = layout(&[9, 7, 3]);
        let options = MaskOptions {
            scope: MaskScope::Global,
            eligibility: if weights_only { Eligibility::WeightsOnly } else { Eligibility::All },
        };
        let target = DensityTarget::new(d).unwrap();
        let m = topk_mask(&scores(lay.clone(), raw), target, options).unwrap();
        prop_assert_eq!(m.kept_eligible(), target.kept_count(m.eligible_count()));
        // ineligible positions are always kept
        for (slot_role, bit) in lay.roles().iter().zip(m.bits()) {
            if weights_only && *slot_role == TensorRole::Bias {
                prop_assert!(*bit);
            }
        }
    }

    #[test]
    fn selection_respects_score_order(raw in prop::collection::vec(any::<u8>(), 1..40), d in 0.01f64..0.99) {
        let lay = layout(&[5, 4, 2]);
        let s = scores(lay, raw);
        let options = MaskOptions { scope: MaskScope::Global, eligibility: Eligibility::All };
        let m = topk_mask(&s, DensityTarget::new(d).unwrap(), options).unwrap();
        let v = s.values();
        for i in 0..v.len() {
            for j in 0..v.len() {
                if m.bits()[i] && !m.bits()[j] {
                    // ties go to the lower index
                    prop_assert!(v[i] > v[j] || (v[i] == v[j] && i < j));
                }
            }
        }
    }

    #[test]
    fn refinement_nests(
        raws in prop::collection::vec(prop::collection::vec(any::<u8>(), 1..30), 1..6),
        ds in prop::collection::vec(0.01f64..1.0, 1..6),
        options in options(),
    ) {
        let lay = layout(&[8, 6, 3]);
        let mut ds = ds;
        ds.sort_by(|a, b| b.total_cmp(a));
        let mut current = topk_mask(&scores(lay.clone(), raws[0].clone()), DensityTarget::new(ds[0]).unwrap(), options).unwrap();
        for (i, &d) in ds.iter().enumerate().skip(1) {
            let raw = raws[i % raws.len()].clone();
            let next = refine_mask(&current, &scores(lay.clone(), raw), DensityTarget::new(d).unwrap()).unwrap();
            prop_assert!(next.is_subset_of(&current));
            prop_assert!(next.kept_eligible() <= current.kept_eligible());
            current = next;
        }
    }
}

#[test]
fn density_targets_validate() {
    assert!(DensityTarget::new(0.0).is_err());
    assert!(DensityTarget::new(1.5).is_err());
    assert!(DensityTarget::new(f64::NAN).is_err());
    assert!((DensityTarget::from_sparsity(0.95).unwrap().density() - 0.05).abs() < 1e-15);
    assert_eq!(DensityTarget::new(0.5).unwrap().kept_count(7), 4);
}
