use lifespan_core::ode::{
    default_horizon, integrate_blowup, membership_residuals, sweep_ode, BlowupStatus,
    IntegratorControls, OdeSpec, OdeVariant,
};
use lifespan_core::odi;
use proptest::prelude::*;

fn sub_run(a: f64, ctrl: &IntegratorControls) -> f64 {
    let spec = OdeSpec::subcritical(a, 2.0, 2, 0.125).unwrap();
    let h = default_horizon(&spec).unwrap();
    let res = integrate_blowup(&spec, (0.0, 0.0), ctrl, h).unwrap();
    assert!(res.blew_up(), "A = {a}: {:?}", res.status);
    res.t_blow
}

#[test]
fn subcritical_one_sided_bound_and_slope() {
    let ctrl = IntegratorControls::default();
    let spec = OdeSpec::subcritical(1.0, 2.0, 2, 0.125).unwrap();
    let a_values = [1.0, 0.5, 0.25, 0.125, 0.0625];
    let sweep = sweep_ode(&spec, &a_values, &ctrl, None).unwrap();
    let fit = sweep.fit.unwrap();
    assert!((fit.slope + 2.0).abs() <= 0.3, "slope {}", fit.slope);
    assert_eq!(sweep.target_slope, Some(-2.0));
    for row in &sweep.rows {
        let bound = odi::predict_lifespan_subcritical(row.a, 2, 2.0).unwrap();
        assert!(
            row.t_blow + 1.0 <= 1.1 * bound,
            "A = {}: {} vs {bound}",
            row.a,
            row.t_blow
        );
    }
}

/// Blow-up point of `w + s w' = 1 + s w^2`, `w(0) = 1`: the `A -> 0` limit of
/// `ln(t_blow) A` for the critical equality model with `p = 2`.
fn riccati_limit() -> f64 {
    let f = |s: f64, w: f64| (1.0 - w + s * w * w) / s;
    let (mut s, mut w) = (1e-4, 1.0 + 0.5e-4);
    let h = 1e-5;
    while w < 1e8 {
        let k1 = f(s, w);
        let k2 = f(s + h / 2.0, w + h / 2.0 * k1);
        let k3 = f(s + h / 2.0, w + h / 2.0 * k2);
        let k4 = f(s + h, w + h * k3);
        w += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        s += h;
    }
    s
}

#[test]
fn critical_products_bounded_and_decreasing_to_riccati_limit() {
    let spec = OdeSpec::critical(1.0, 2.0, 0.125).unwrap();
    let ctrl = IntegratorControls::for_variant(OdeVariant::Critical);
    let sweep = sweep_ode(&spec, &[2.0, 1.0, 0.5, 0.25, 0.125], &ctrl, None).unwrap();
    let products = sweep.products.unwrap();
    assert_eq!(products.len(), 5);
    for p in &products {
        assert!(*p <= 35.2, "product {p}");
    }
    // the equality model approaches its own limit from above
    let limit = riccati_limit();
    assert!((limit - 1.4458).abs() < 1e-3, "{limit}");
    assert!(products.windows(2).all(|w| w[1] < w[0]), "{products:?}");
    assert!(products.iter().all(|&p| p > limit));
    assert_eq!(sweep.products_monotone, Some(false));
}

#[test]
fn log_and_physical_coordinates_agree() {
    let spec = OdeSpec::critical(2.0, 2.0, 0.125).unwrap();
    let h = default_horizon(&spec).unwrap();
    let log = integrate_blowup(
        &spec,
        (0.0, 0.0),
        &IntegratorControls::for_variant(OdeVariant::Critical),
        h,
    )
    .unwrap();
    let phys = integrate_blowup(&spec, (0.0, 0.0), &IntegratorControls::default(), h).unwrap();
    assert!(log.blew_up() && phys.blew_up());
    let rel = (log.t_blow - phys.t_blow).abs() / phys.t_blow;
    assert!(rel < 1e-5, "{} vs {}", log.t_blow, phys.t_blow);
}

#[test]
fn threshold_insensitivity() {
    for spec in [
        OdeSpec::subcritical(0.5, 2.0, 2, 0.125).unwrap(),
        OdeSpec::critical(1.0, 2.0, 0.125).unwrap(),
    ] {
        let ctrl = IntegratorControls::for_variant(spec.variant);
        let h = default_horizon(&spec).unwrap();
        let base = integrate_blowup(&spec, (0.0, 0.0), &ctrl, h).unwrap();
        let hi = IntegratorControls {
            blowup_threshold: 1e60,
            ..ctrl
        };
        let raised = integrate_blowup(&spec, (0.0, 0.0), &hi, h).unwrap();
        let rel = (raised.t_blow - base.t_blow).abs() / base.t_blow;
        assert!(rel < 0.01, "{rel}");
        assert!(base.diagnostics.threshold_sensitivity < 0.01);
    }
}

#[test]
fn tolerance_convergence_within_error_estimate() {
    let spec = OdeSpec::subcritical(0.25, 2.0, 2, 0.125).unwrap();
    let ctrl = IntegratorControls::default();
    let h = default_horizon(&spec).unwrap();
    let base = integrate_blowup(&spec, (0.0, 0.0), &ctrl, h).unwrap();
    let fine = IntegratorControls {
        rel_tol: ctrl.rel_tol / 2.0,
        ..ctrl
    };
    let halved = integrate_blowup(&spec, (0.0, 0.0), &fine, h).unwrap();
    let est = base.diagnostics.error_estimate.unwrap();
    assert!(
        (halved.t_blow - base.t_blow).abs() <= est,
        "{} {} {est}",
        halved.t_blow,
        base.t_blow
    );
}

#[test]
fn blowup_status_without_nonlinearity_before_horizon() {
    // T0 beyond the horizon: only forcing acts, H stays polynomial
    let spec = OdeSpec::subcritical(1.0, 2.0, 2, 100.0).unwrap();
    let res = integrate_blowup(&spec, (0.0, 0.0), &IntegratorControls::default(), 50.0).unwrap();
    assert_eq!(res.status, BlowupStatus::HorizonReached);
    assert!((res.trace.last().unwrap().h - 1250.0).abs() < 1e-6);
}

#[test]
fn trace_is_bounded() {
    let spec = OdeSpec::critical(0.5, 2.0, 0.125).unwrap();
    let ctrl = IntegratorControls::for_variant(OdeVariant::Critical);
    let res = integrate_blowup(&spec, (0.0, 0.0), &ctrl, default_horizon(&spec).unwrap()).unwrap();
    assert!(res.trace.len() <= lifespan_core::ode::TRACE_CAPACITY);
    assert!(res.trace.windows(2).all(|w| w[0].t < w[1].t));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn larger_forcing_blows_up_sooner(a in 0.2f64..2.0, factor in 1.2f64..3.0) {
        let ctrl = IntegratorControls::default();
        let t_small = sub_run(a, &ctrl);
        let t_large = sub_run(a * factor, &ctrl);
        prop_assert!(t_large < t_small);
    }

    #[test]
    fn equality_models_are_members(a in 0.1f64..3.0, p in 1.1f64..2.9, t0 in 0.05f64..2.0, critical in any::<bool>()) {
        let spec = if critical {
            OdeSpec::critical(a, p, t0).unwrap()
        } else {
            OdeSpec::subcritical(a, p.min(2.9), 2, t0).unwrap()
        };
        let ctrl = IntegratorControls::for_variant(spec.variant);
        let res = integrate_blowup(&spec, (0.0, 0.0), &ctrl, 50.0).unwrap();
        let m = membership_residuals(&res, &spec).unwrap();
        prop_assert!(m.min_forcing >= -ctrl.abs_tol);
        if let Some(nl) = m.min_nonlinear {
            prop_assert!(nl >= -ctrl.abs_tol);
        }
    }
}
