mod common;

use std::f64::consts::PI;

use common::{identity_trunk, mc_normalization, random_gaussian_2d, scene};
use gim::gaussian::{fit_gaussians, log_likelihood, threshold_for_tpr};
use gim::{ClassGaussian, Dataset, GimModel, LossKind, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FLOOR: f64 = 1e-6;

fn scene_model(n: usize, seed: u64) -> (GimModel, Dataset) {
    let data = scene(n, seed);
    (GimModel::fit(identity_trunk(2), &data, LossKind::Ctv, FLOOR).unwrap(), data)
}

/// Density × prior evaluated straight from the normal pdf.
fn brute_force_class(z: &[f64], gs: &[ClassGaussian]) -> usize {
    let total: usize = gs.iter().map(|g| g.count).sum();
    let mut best = (0, f64::NEG_INFINITY);
    for (c, g) in gs.iter().enumerate() {
        let mut p = g.count as f64 / total as f64;
        for j in 0..z.len() {
            let v = g.var_diag[j];
            p *= (-(z[j] - g.mean[j]).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
        }
        if p > best.1 {
            best = (c, p);
        }
    }
    best.0
}

#[test]
fn density_integrates_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for i in 0..3 {
        let g = random_gaussian_2d(&mut rng);
        let mass = mc_normalization(&g, 200_000, i);
        assert!((mass - 1.0).abs() < 0.01, "{g:?}: {mass}");
    }
}

#[test]
fn predictions_match_brute_force_density_oracle() {
    // Unequal class sizes so the prior matters.
    let data = gim::data::synth_gaussian_scene(
        &[[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]],
        &[[[1.0, 0.3], [0.3, 2.0]], [[0.5, 0.0], [0.0, 0.5]], [[2.0, 0.0], [0.0, 1.0]]],
        300,
        4,
    )
    .unwrap();
    let keep: Vec<usize> = (0..data.len()).filter(|&i| data.labels()[i] != 1 || i % 3 == 0).collect();
    let data = data.subset(&keep, "skewed").unwrap();
    let model = GimModel::fit(identity_trunk(2), &data, LossKind::Ctv, FLOOR).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..500 {
        let z = [rng.random_range(-4.0..7.0), rng.random_range(-4.0..7.0)];
        let pred = model.predict(&z).unwrap();
        assert_eq!(pred.class, brute_force_class(&z, model.gaussians()), "at {z:?}");
        let conf = model.gaussians().iter().map(|g| log_likelihood(&z, g)).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(pred.confidence, conf);
    }
}

#[test]
fn scaling_every_class_count_keeps_the_argmax() {
    let (model, data) = scene_model(60, 3);
    let rows: Vec<usize> = (0..data.len()).flat_map(|i| [i, i, i]).collect();
    let tripled = data.subset(&rows, "tripled").unwrap();
    let scaled = GimModel::fit(identity_trunk(2), &tripled, LossKind::Ctv, FLOOR).unwrap();
    for (a, b) in model.gaussians().iter().zip(scaled.gaussians()) {
        assert_eq!(3 * a.count, b.count);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..500 {
        let z = [rng.random_range(-5.0..13.0), rng.random_range(-5.0..13.0)];
        assert_eq!(model.predict(&z).unwrap().class, scaled.predict(&z).unwrap().class);
    }
}

#[test]
fn fitting_is_order_invariant() {
    let data = scene(100, 12);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(0));
    let shuffled = data.subset(&order, "shuffled").unwrap();
    let a = fit_gaussians(&identity_trunk(2), &data, FLOOR).unwrap();
    let b = fit_gaussians(&identity_trunk(2), &shuffled, FLOOR).unwrap();
    for (ga, gb) in a.iter().zip(&b) {
        assert_eq!(ga.count, gb.count);
        for (x, y) in ga.mean.iter().chain(&ga.var_diag).zip(gb.mean.iter().chain(&gb.var_diag)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }
    assert_eq!(a, fit_gaussians(&identity_trunk(2), &data, FLOOR).unwrap());
}

#[test]
fn likelihood_peaks_at_the_mean() {
    let (model, _) = scene_model(100, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for g in model.gaussians() {
        let peak = log_likelihood(&g.mean, g);
        for _ in 0..200 {
            let z: Vec<f64> = g.mean.iter().map(|m| m + rng.random_range(-1.0..1.0)).collect();
            assert!(log_likelihood(&z, g) < peak);
        }
    }
}

#[test]
fn calibration_order_statistic() {
    let scores: Vec<f64> = (1..=100).map(f64::from).collect();
    let cal = threshold_for_tpr(&scores, 0.97).unwrap();
    assert_eq!(cal.threshold, 4.0);
    assert_eq!(scores.iter().filter(|&&s| s >= cal.threshold).count(), 97);
    assert_eq!(threshold_for_tpr(&scores, 0.999).unwrap().threshold, 1.0);
    let cal = threshold_for_tpr(&scores, 0.5).unwrap();
    assert_eq!(cal.threshold, 51.0);
}

#[test]
fn calibrated_fraction_on_the_scene() {
    let (mut model, data) = scene_model(500, 11);
    model.calibrate_threshold(&data, 0.97).unwrap();
    let flagged = (0..data.len())
        .filter(|&i| model.is_ood(data.features().row(i)).unwrap())
        .count() as f64
        / data.len() as f64;
    assert!((flagged - 0.03).abs() <= 0.02, "{flagged}");
    for g in model.gaussians() {
        assert!(!model.is_ood(&g.mean).unwrap());
    }
    assert!(model.is_ood(&[1e6, -1e6]).unwrap());
}

#[test]
fn uncalibrated_model_refuses_ood_queries() {
    let (model, _) = scene_model(20, 1);
    assert!(model.is_ood(&[0.0, 0.0]).is_err());
}

#[test]
fn inputs_and_outputs_agree() {
    let (model, data) = scene_model(50, 9);
    let via_inputs = model.predict_inputs(data.features()).unwrap();
    for (i, p) in via_inputs.iter().enumerate() {
        assert_eq!(p, &model.predict(data.features().row(i)).unwrap());
    }
    let conf = model.confidences(&Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
    assert_eq!(conf[0], model.predict(&[0.0, 0.0]).unwrap().confidence);
}

proptest! {
    #[test]
    fn likelihood_decreases_along_rays(
        dir in prop::collection::vec(-1.0f64..1.0, 3),
        var in prop::collection::vec(0.01f64..10.0, 3),
        steps in prop::collection::vec(0.01f64..5.0, 1..10),
    ) {
        prop_assume!(dir.iter().any(|d| d.abs() > 1e-3));
        let g = ClassGaussian { mean: vec![1.0, -2.0, 0.5], var_diag: var, count: 1, log_prior: 0.0 };
        let mut t = 0.0;
        let mut last = log_likelihood(&g.mean, &g);
        for s in steps {
            t += s;
            let z: Vec<f64> = g.mean.iter().zip(&dir).map(|(m, d)| m + t * d).collect();
            let ll = log_likelihood(&z, &g);
            prop_assert!(ll < last);
            last = ll;
        }
    }
}
