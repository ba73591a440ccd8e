use demkit_core::adadem::{
    adadem_eval, adadem_sample, delta, AdaDemKind, AdaDemVariant, DeltaSource, MecState, NormKind,
};
use demkit_core::losses::{
    boundary_second_derivative, cadf, cadf_reward, cadf_tempered_eval, conditional_entropy, dem_eval,
    detached_em_eval, em_eval, gmc, gmc_reward, validate_config, DemConfig, Direction, Logits,
};
use demkit_core::numkit::{
    finite_diff_grad, logsumexp, max_abs_diff, max_rel_err, softmax, Rng, DEFAULT_FD_STEP,
};
use proptest::prelude::*;

fn logits(max_classes: usize, bound: f64) -> impl Strategy<Value = Vec<f64>> {
    (2..=max_classes).prop_flat_map(move |c| prop::collection::vec(-bound..bound, c))
}

fn lg(z: &[f64]) -> Logits {
    Logits::from_slice(z).unwrap()
}

/// Valid `(τ, α)` pairs, including the `α = 0` edge.
fn dem_config() -> impl Strategy<Value = DemConfig> {
    prop_oneof![
        (0.05..3.0f64).prop_map(|tau| (tau, 0.0)),
        (0.01..2.0f64, 0.05..1.0f64).prop_map(|(alpha, frac)| (frac * 2.0 / alpha, alpha)),
    ]
    .prop_map(|(tau, alpha)| DemConfig::new(tau, alpha, Direction::Minimize).unwrap())
}

proptest! {
    #[test]
    fn softmax_is_shift_invariant(z in logits(30, 50.0), c in -1e3..1e3f64) {
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        let p = softmax(&z).unwrap();
        prop_assert!(max_abs_diff(&p, &softmax(&shifted).unwrap()) <= 1e-12);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let lse = logsumexp(&z).unwrap();
        prop_assert!((logsumexp(&shifted).unwrap() - (lse + c)).abs() <= 1e-9);
    }

    #[test]
    fn entropy_splits_into_cadf_and_gmc(z in logits(50, 30.0)) {
        let z = lg(&z);
        prop_assert!((conditional_entropy(&z) - (cadf(&z) + gmc(&z))).abs() <= 1e-9);
    }

    #[test]
    fn em_gradient_is_minus_the_reward_sum(z in logits(20, 30.0)) {
        let z = lg(&z);
        let g = em_eval(&z, Direction::Minimize).grad;
        let total: Vec<f64> = cadf_reward(&z).iter().zip(gmc_reward(&z)).map(|(a, b)| -(a + b)).collect();
        prop_assert!(max_abs_diff(&g, &total) <= 1e-12);
        let d = detached_em_eval(&z);
        prop_assert!(max_abs_diff(&d.grad, &g) <= 1e-12);
        prop_assert_eq!(d.value, 0.0);
    }

    #[test]
    fn em_gradient_matches_finite_differences(z in logits(12, 8.0)) {
        let fd = finite_diff_grad(|v| em_eval(&lg(v), Direction::Minimize).value, &z, DEFAULT_FD_STEP).unwrap();
        prop_assert!(max_rel_err(&em_eval(&lg(&z), Direction::Minimize).grad, &fd) < 1e-5);
    }

    #[test]
    fn tempered_cadf_gradient_matches_finite_differences(z in logits(12, 8.0), tau in 0.2..3.0f64) {
        let fd = finite_diff_grad(|v| cadf_tempered_eval(&lg(v), tau).unwrap().value, &z, DEFAULT_FD_STEP).unwrap();
        prop_assert!(max_rel_err(&cadf_tempered_eval(&lg(&z), tau).unwrap().grad, &fd) < 1e-5);
    }

    #[test]
    fn dem_gradient_matches_finite_differences(z in logits(12, 8.0), cfg in dem_config()) {
        let fd = finite_diff_grad(|v| dem_eval(&lg(v), &cfg).unwrap().value, &z, DEFAULT_FD_STEP).unwrap();
        prop_assert!(max_rel_err(&dem_eval(&lg(&z), &cfg).unwrap().grad, &fd) < 1e-5);
    }

    #[test]
    fn dem_at_one_one_is_em(z in logits(20, 30.0)) {
        let z = lg(&z);
        let dem = dem_eval(&z, &DemConfig::classical()).unwrap();
        let em = em_eval(&z, Direction::Minimize);
        prop_assert!((dem.value - em.value).abs() <= 1e-12);
        prop_assert!(max_abs_diff(&dem.grad, &em.grad) <= 1e-12);
    }

    #[test]
    fn maximize_negates_value_and_gradient(z in logits(10, 10.0), cfg in dem_config()) {
        let z = lg(&z);
        let up = DemConfig { direction: Direction::Maximize, ..cfg };
        let (a, b) = (dem_eval(&z, &cfg).unwrap(), dem_eval(&z, &up).unwrap());
        prop_assert_eq!(a.value, -b.value);
        prop_assert!(a.grad.iter().zip(&b.grad).all(|(x, y)| *x == -*y));
    }

    #[test]
    fn argmax_keeps_the_largest_reward_near_uniform(
        base in prop::collection::vec(-0.05..0.05f64, 2..30),
        lead in 0..30usize,
        // first-order slope is (2/τ − α) − α·u for spread u, so the ordering
        // only survives a 0.1 spread with τα ≤ 1.7
        cfg in (0.01..2.0f64, 0.05..0.85f64)
            .prop_map(|(alpha, frac)| DemConfig::new(frac * 2.0 / alpha, alpha, Direction::Minimize).unwrap()),
    ) {
        let mut z = base;
        let k = lead % z.len();
        let top = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        z[k] = top + 1e-3;
        let reward: Vec<f64> = dem_eval(&lg(&z), &cfg).unwrap().grad.iter().map(|g| -g).collect();
        for (i, r) in reward.iter().enumerate() {
            if i != k {
                prop_assert!(reward[k] >= *r - 1e-12, "class {} reward {} > argmax reward {}", i, r, reward[k]);
            }
        }
    }

    #[test]
    fn curvature_sign_flips_at_the_validity_bound(alpha in 0.01..2.0f64, c in prop::sample::select(vec![2usize, 10, 100])) {
        let bound = 2.0 / alpha;
        prop_assert!(boundary_second_derivative(bound * 0.999, alpha, c).unwrap() < 0.0);
        prop_assert!(boundary_second_derivative(bound * 1.001, alpha, c).unwrap() > 0.0);
        prop_assert!(validate_config(bound * 0.999, alpha));
        prop_assert!(!validate_config(bound * 1.001, alpha));
    }

    #[test]
    fn adadem_gradient_matches_finite_differences(
        z in logits(10, 6.0),
        row_seed in any::<u64>(),
        norm in prop::sample::select(vec![NormKind::L1, NormKind::L2, NormKind::Linf]),
    ) {
        let mut rng = Rng::new(row_seed);
        let raw: Vec<f64> = (0..z.len()).map(|_| rng.uniform(0.0, 1.0)).collect();
        let total: f64 = raw.iter().sum();
        let calib: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let d = delta(&lg(&z), norm, DeltaSource::Cadf).unwrap();
        let f = |v: &[f64]| adadem_sample(v, &softmax(v).unwrap(), &calib, d).value;
        let fd = finite_diff_grad(f, &z, DEFAULT_FD_STEP).unwrap();
        let g = adadem_sample(&z, &softmax(&z).unwrap(), &calib, d).grad;
        prop_assert!(max_rel_err(&g, &fd) < 1e-5);
    }

    #[test]
    fn delta_stays_positive(z in logits(100, 30.0)) {
        prop_assert!(delta(&lg(&z), NormKind::L1, DeltaSource::Cadf).unwrap() >= 1e-6);
    }

    #[test]
    fn norm_only_is_rescaled_em(batch in prop::collection::vec(prop::collection::vec(-20.0..20.0f64, 6), 1..8)) {
        let rows: Vec<Logits> = batch.iter().map(|z| lg(z)).collect();
        let mut state = MecState::new(6).unwrap();
        let evals = adadem_eval(&rows, &mut state, &AdaDemVariant::of_kind(AdaDemKind::NormOnly), Direction::Minimize).unwrap();
        for (z, e) in rows.iter().zip(&evals) {
            let d = delta(z, NormKind::L1, DeltaSource::Cadf).unwrap();
            let scaled: Vec<f64> = e.grad.iter().map(|g| g * d).collect();
            prop_assert!(max_abs_diff(&scaled, &em_eval(z, Direction::Minimize).grad) <= 1e-12);
        }
    }

    #[test]
    fn calibrator_rows_stay_on_the_simplex(
        batches in prop::collection::vec(prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 5), 1..10), 1..30),
        momentum in 0.0..=1.0f64,
    ) {
        let mut state = MecState::with_momentum(5, momentum).unwrap();
        for b in &batches {
            let probs: Vec<Vec<f64>> = b.iter().map(|z| softmax(z).unwrap()).collect();
            let labels: Vec<usize> = probs.iter().map(|p| demkit_core::adadem::pseudo_label(p)).collect();
            state.update(&probs, &labels).unwrap();
        }
        for k in 0..5 {
            let row = state.row(k);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn calibrator_ignores_order_within_a_batch(
        b in prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 4), 2..12),
        seed in any::<u64>(),
    ) {
        let probs: Vec<Vec<f64>> = b.iter().map(|z| softmax(z).unwrap()).collect();
        let labels: Vec<usize> = probs.iter().map(|p| demkit_core::adadem::pseudo_label(p)).collect();
        let mut idx: Vec<usize> = (0..probs.len()).collect();
        Rng::new(seed).shuffle(&mut idx);
        let (p2, l2): (Vec<Vec<f64>>, Vec<usize>) = idx.iter().map(|&i| (probs[i].clone(), labels[i])).unzip();
        let mut a = MecState::new(4).unwrap();
        let mut s = MecState::new(4).unwrap();
        a.update(&probs, &labels).unwrap();
        s.update(&p2, &l2).unwrap();
        prop_assert!(max_abs_diff(a.table().as_slice(), s.table().as_slice()) <= 1e-15);
    }
}

#[test]
fn calibrator_is_order_sensitive_across_batches() {
    let first = vec![vec![0.9, 0.05, 0.05]];
    let second = vec![vec![0.5, 0.3, 0.2]];
    let mut a = MecState::new(3).unwrap();
    a.update(&first, &[0]).unwrap();
    a.update(&second, &[0]).unwrap();
    let mut b = MecState::new(3).unwrap();
    b.update(&second, &[0]).unwrap();
    b.update(&first, &[0]).unwrap();
    assert_ne!(a.row(0), b.row(0));
}

#[test]
fn calibrator_pulls_down_a_dominant_class() {
    // Confident batches dominated by class 0 raise row 0 above the
    // probability of a later, less confident class-0 sample; the full
    // variant then rewards class 0 less than norm-only does.
    let confident = Logits::from_slice(&[6.0, 0.0, 0.0, 0.0]).unwrap();
    let mut full = MecState::new(4).unwrap();
    for _ in 0..30 {
        adadem_eval(
            &vec![confident.clone(); 8],
            &mut full,
            &AdaDemVariant::default(),
            Direction::Minimize,
        )
        .unwrap();
    }
    let hesitant = Logits::from_slice(&[1.0, 0.5, 0.0, 0.0]).unwrap();
    let batch = vec![confident.clone(), confident, hesitant];
    let mut norm_state = full.clone();
    let f = adadem_eval(&batch, &mut full, &AdaDemVariant::default(), Direction::Minimize).unwrap();
    let n = adadem_eval(
        &batch,
        &mut norm_state,
        &AdaDemVariant::of_kind(AdaDemKind::NormOnly),
        Direction::Minimize,
    )
    .unwrap();
    let p_hesitant = batch[2].probs();
    assert!(full.row(0)[0] > p_hesitant[0]);
    // reward is minus the gradient
    assert!(-f[2].grad[0] < -n[2].grad[0]);
}

#[test]
fn calibrator_trajectory_is_deterministic() {
    let run = || {
        let mut rng = Rng::new(77);
        let mut state = MecState::new(5).unwrap();
        for _ in 0..50 {
            let batch: Vec<Logits> = (0..16)
                .map(|_| Logits::new((0..5).map(|_| 3.0 * rng.normal()).collect()).unwrap())
                .collect();
            adadem_eval(&batch, &mut state, &AdaDemVariant::default(), Direction::Minimize).unwrap();
        }
        state
    };
    assert_eq!(run(), run());
}

#[test]
fn argmax_reward_can_lose_right_at_the_validity_bound() {
    // τα = 1.95: the reward slope turns negative 0.025 above the mean logit
    let mut z = vec![0.0, 0.0, 0.041207672253895905, 0.0, -0.011901953057240741];
    z[0] = 0.041207672253895905 + 1e-3;
    let cfg = DemConfig::new(195.16808504950876, 0.01, Direction::Minimize).unwrap();
    let reward: Vec<f64> = dem_eval(&lg(&z), &cfg).unwrap().grad.iter().map(|g| -g).collect();
    assert!(reward[2] > reward[0]);
}
