use autos_core::criteria::Criterion;
use autos_core::data::{synth_blobs, LabeledDataset};
use autos_core::irp::{self, merge_datasets, schedule_density, AutosDataset, IrpConfig};
use autos_core::nn::train::TrainHyper;
use autos_core::nn::Architecture;
use autos_core::store::Persist;

fn blobs() -> LabeledDataset {
    synth_blobs(4, 60, 32, 4.0, 11).unwrap()
}

fn arch() -> Architecture {
    Architecture::mlp(&[32, 24, 12, 4], true).unwrap()
}

fn cfg(criterion: Criterion, iterations: usize, seed: u64) -> IrpConfig {
    IrpConfig {
        criterion,
        iterations,
        final_density: 0.05,
        train: TrainHyper { epochs: 1, batch_size: 32, ..TrainHyper::default() },
        seed,
        score_batch_size: 64,
        keep_masks: true,
        ..IrpConfig::default()
    }
}

#[test]
fn theta0_is_never_modified() {
    let data = blobs();
    let theta0 = irp::initial_params(&arch(), 3);
    let before = theta0.clone();
    let out = irp::run_irp_from(&theta0, &data, &cfg(Criterion::Magnitude, 4, 3)).unwrap();
    assert_eq!(theta0, before);
    assert_eq!(out.theta0, before);
    // the feature column is θ₀ itself, bit for bit
    let eligible = out.final_mask.eligible();
    let expected: Vec<f64> = theta0.to_f64_vec().into_iter().zip(&eligible).filter(|(_, &e)| e).map(|(v, _)| v).collect();
    assert_eq!(out.dataset.theta0, expected);
}

#[test]
fn masks_nest_and_follow_the_schedule() {
    let data = blobs();
    for criterion in [Criterion::Magnitude, Criterion::Snip, Criterion::Grasp, Criterion::Random] {
        let c = cfg(criterion, 5, 1);
        let out = irp::run_irp(&arch(), &data, &c).unwrap();
        assert_eq!(out.masks.len(), 6, "{criterion}");
        for w in out.masks.windows(2) {
            assert!(w[1].is_subset_of(&w[0]), "{criterion}: round masks must nest");
        }
        for (i, m) in out.masks.iter().enumerate() {
            let target = schedule_density(c.final_density, c.iterations, i).unwrap();
            let want = (target * m.eligible_count() as f64).round() as usize;
            assert!(m.kept_eligible().abs_diff(want) <= 1, "{criterion} round {i}: {} vs {want}", m.kept_eligible());
        }
        assert_eq!(&out.final_mask, out.masks.last().unwrap());
    }
}

#[test]
fn labels_count_survived_rounds() {
    let data = blobs();
    let c = cfg(Criterion::Snip, 6, 2);
    let out = irp::run_irp(&arch(), &data, &c).unwrap();
    let eligible = out.final_mask.eligible();
    let mut row = 0;
    for (pos, &e) in eligible.iter().enumerate() {
        if !e {
            continue;
        }
        let survived = out.masks[1..].iter().filter(|m| m.bits()[pos]).count();
        assert_eq!(out.dataset.labels[row], survived as f64 / c.iterations as f64);
        row += 1;
    }
    assert_eq!(row, out.dataset.len());
    // final-mask members are exactly the label-1 rows
    let ones = out.dataset.labels.iter().filter(|&&l| l == 1.0).count();
    assert_eq!(ones, out.final_mask.kept_eligible());
}

#[test]
fn features_do_not_depend_on_round_count() {
    let data = blobs();
    let short = irp::run_irp(&arch(), &data, &cfg(Criterion::Snip, 2, 9)).unwrap();
    let long = irp::run_irp(&arch(), &data, &cfg(Criterion::Snip, 5, 9)).unwrap();
    assert_eq!(short.dataset.theta0, long.dataset.theta0);
    assert_eq!(short.dataset.grad0, long.dataset.grad0);
    assert_ne!(short.dataset.labels, long.dataset.labels);
}

#[test]
fn random_irp_labels_follow_the_schedule() {
    // under random scores, the fraction surviving exactly k rounds is
    // d_k - d_{k+1}, with d_N itself surviving all N
    let data = blobs();
    let c = cfg(Criterion::Random, 4, 5);
    let out = irp::run_irp(&arch(), &data, &c).unwrap();
    let n = out.dataset.len() as f64;
    for k in 0..=c.iterations {
        let frac = out.dataset.labels.iter().filter(|&&l| (l * c.iterations as f64).round() as usize == k).count() as f64 / n;
        let d = |i: usize| schedule_density(c.final_density, c.iterations, i).unwrap();
        let expected = if k == c.iterations { d(k) } else { d(k) - d(k + 1) };
        assert!((frac - expected).abs() < 2.0 / n, "k={k}: {frac} vs {expected}");
    }
    assert!(out.log.iter().all(|l| l.train_loss.is_none()), "random IRP does not train");
}

#[test]
fn runs_are_deterministic() {
    let data = blobs();
    let a = irp::run_irp(&arch(), &data, &cfg(Criterion::Magnitude, 3, 4)).unwrap();
    let b = irp::run_irp(&arch(), &data, &cfg(Criterion::Magnitude, 3, 4)).unwrap();
    assert_eq!(a.dataset.to_checkpoint().encode(), b.dataset.to_checkpoint().encode());
    let c = irp::run_irp(&arch(), &data, &cfg(Criterion::Magnitude, 3, 5)).unwrap();
    assert_ne!(a.dataset.theta0, c.dataset.theta0);
}

#[test]
fn dataset_round_trips_through_a_file() {
    let data = blobs();
    let a = irp::run_irp(&arch(), &data, &cfg(Criterion::Snip, 3, 6)).unwrap().dataset;
    let b = irp::run_irp(&arch(), &data, &cfg(Criterion::Magnitude, 2, 7)).unwrap().dataset;
    let merged = merge_datasets(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(merged.len(), a.len() + b.len());
    assert_eq!(merged.sources.len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.aspr");
    merged.save(&path).unwrap();
    let back = AutosDataset::load(&path).unwrap();
    assert_eq!(back, merged);
}

#[test]
fn training_subset_limits_round_training_only() {
    let data = blobs();
    let full = irp::run_irp(&arch(), &data, &cfg(Criterion::Magnitude, 2, 8)).unwrap();
    let sub = irp::run_irp(&arch(), &data, &IrpConfig { train_subset: Some(64), ..cfg(Criterion::Magnitude, 2, 8) }).unwrap();
    assert_eq!(full.dataset.grad0, sub.dataset.grad0);
    assert_ne!(full.dataset.labels, sub.dataset.labels);
}
