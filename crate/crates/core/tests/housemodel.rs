use hel_core::error::Error;
use hel_core::housemodel::*;

fn params() -> HouseholdParams {
    HouseholdParams::new(0.96, 0.02, 0.8, 0.05)
}

fn binding_instance() -> ThreePeriodInput {
    ThreePeriodInput {
        beta: 0.9,
        phi: 0.3,
        y: [1.0, 0.2, 3.0],
        p: [1.0, 1.0, 1.0],
        gross_rate: 1.05,
        kappa_pm: 0.3,
        kappa_hel: 0.8,
    }
}

fn constrained_spec() -> PathSpec {
    // Rising consumption keeps the household up against the limit.
    let c: Vec<f64> = (0..8).map(|t| 1.0 + 0.05 * t as f64).collect();
    PathSpec {
        h: vec![3.0; 8],
        r: vec![0.03; 8],
        kappa: vec![0.8; 8],
        delta: vec![0.02; 8],
        terminal_price: 9.0,
        terminal_mu: 0.0,
        initial_assets: 0.0,
        c,
    }
}

#[test]
fn backward_induction_path_satisfies_focs() {
    let p = params();
    let path = build_path(&p, &constrained_spec()).unwrap();
    assert!(path.mu[..7].iter().all(|m| *m > 0.0));
    assert!(check_path(&path).is_empty(), "{:?}", check_path(&path));
    for r in price_foc_residual(&path, &p).unwrap() {
        assert!(r.abs() <= 1e-10, "residual {r}");
    }
    let mut bumped = path.clone();
    bumped.p[2] += 1e-3;
    let r = price_foc_residual(&bumped, &p).unwrap();
    assert!((r[2] - 1e-3).abs() < 1e-12);
}

#[test]
fn path_lagrangian_is_stationary() {
    let p = params();
    let path = build_path(&p, &constrained_spec()).unwrap();
    for (name, g) in path_lagrangian_gradient_fd(&p, &path, 1e-5).unwrap() {
        assert!(g.abs() <= 1e-6, "{name}: {g:e}");
    }
}

#[test]
fn unconstrained_steady_state_price() {
    let mut p = params();
    p.kappa_bar = 0.0;
    let r = 1.0 / p.beta - 1.0;
    let h = 2.0;
    let rent = p.phi / h;
    let price = p.beta * rent / (1.0 - p.beta * (1.0 - p.delta));
    let spec = PathSpec {
        c: vec![1.0; 6],
        h: vec![h; 6],
        r: vec![r; 6],
        kappa: vec![0.0; 6],
        delta: vec![p.delta; 6],
        terminal_price: price,
        terminal_mu: 0.0,
        initial_assets: 0.0,
    };
    let path = build_path(&p, &spec).unwrap();
    for (t, q) in path.p.iter().enumerate() {
        assert!((q - price).abs() < 1e-12, "period {t}");
    }
    assert!(path.csf(&p).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn discrete_state_expectation_matches_deterministic_average() {
    let p = params();
    let s = |c: f64| NextState { c, h: 2.0, mu: 0.01, kappa: 0.8, p: 10.0, delta: 0.02 };
    let two = price_foc_residual_states(&p, 9.0, 1.0, &[(0.5, s(1.0)), (0.5, s(1.2))]).unwrap();
    let a = price_foc_residual_states(&p, 9.0, 1.0, &[(1.0, s(1.0))]).unwrap();
    let b = price_foc_residual_states(&p, 9.0, 1.0, &[(1.0, s(1.2))]).unwrap();
    assert!((two - 0.5 * (a + b)).abs() < 1e-12);
    assert!(price_foc_residual_states(&p, 9.0, 1.0, &[(0.4, s(1.0))]).is_err());
}

#[test]
fn csf_monotone_in_kappa_and_mu() {
    let mut last = 0.0;
    for k in 0..=10 {
        let v = csf_decompose(0.8, 0.05, k as f64 / 10.0, 50.0).unwrap();
        assert!(v >= last);
        last = v;
    }
    last = 0.0;
    for m in 0..=10 {
        let v = csf_decompose(0.8, m as f64 / 100.0, 0.8, 50.0).unwrap();
        assert!(v >= last);
        last = v;
    }
}

#[test]
fn decomposition_matches_geometric_closed_form() {
    let (m, s, csf, delta) = (0.95, 0.6, 0.2, 0.02);
    let closed = (s + csf) * m / (1.0 - m * (1.0 - delta));
    for h in [1, 5, 40] {
        let d = price_decomposition(&vec![s; h], &vec![csf; h], &vec![m; h], delta, h, StationaryTail { m, rent: s, csf }).unwrap();
        assert!((closed - d.price()).abs() <= d.truncation_bound + 1e-12);
        assert!((closed - d.price_with_tail()).abs() < 1e-12);
    }
    let d = price_decomposition(&[s; 10], &[0.0; 10], &[m; 10], delta, 10, StationaryTail { m, rent: s, csf: 0.0 }).unwrap();
    assert_eq!(d.pdv_csf, 0.0);
    assert!(matches!(
        price_decomposition(&[s; 3], &[0.0; 3], &[m; 3], delta, 5, StationaryTail { m, rent: s, csf: 0.0 }),
        Err(Error::Alignment(_))
    ));
}

#[test]
fn constrained_spread_exceeds_unconstrained_by_csf_pdv() {
    let mut p = params();
    p.omega_own = 1.0;
    let (m, delta, p_rent) = (0.95, 0.02, 1.0);
    let tail = StationaryTail { m, rent: 0.0, csf: 0.0 };
    let base = price_decomposition(&[0.0; 30], &[0.0; 30], &[m; 30], delta, 30, tail).unwrap();
    let with = price_decomposition(&[0.0; 30], &[0.1; 30], &[m; 30], delta, 30, StationaryTail { csf: 0.1, ..tail }).unwrap();
    let gap = with.price_with_tail() - base.price_with_tail();
    // Own price = rent price + PDV of the collateral flow; next period's own
    // price carries the continuation.
    let p_own_next = p_rent + 0.1 * m / (1.0 - m * (1.0 - delta)) / m;
    let p_own = p_rent + gap;
    let s_con = own_rent_spread(&p, p_own, p_rent, &[(1.0, OwnNext { m, csf: 0.1, p_own: p_own_next - p_rent, delta })]).unwrap();
    let s_unc = own_rent_spread(&p, p_rent, p_rent, &[(1.0, OwnNext { m, csf: 0.0, p_own: 0.0, delta })]).unwrap();
    assert!(s_con.spread > s_unc.spread);
    assert!((s_con.spread - s_unc.spread - gap).abs() < 1e-12);
    assert!(s_unc.residual.abs() < 1e-15);
}

#[test]
fn timing_variants_agree_on_degenerate_calibration() {
    let p = HouseholdParams { delta: 0.0, ..params() };
    let x = TimingInputs { c: [1.0, 1.0], h_next: 2.0, mu: [0.0, 0.0], kappa: [0.8, 0.8], p: [4.0; 3], delta_next: 0.0 };
    let r: Vec<f64> = ConstraintTiming::ALL.iter().map(|t| timing_foc_residual(&p, *t, &x).unwrap()).collect();
    for a in &r {
        for b in &r {
            assert!((a - b).abs() <= 1e-8);
        }
    }
    // With binding constraints, the two anchors that only differ in which
    // price is pledged still agree when prices are flat.
    let x = TimingInputs { mu: [0.03, 0.03], ..x };
    let r: Vec<f64> = ConstraintTiming::ALL.iter().map(|t| timing_foc_residual(&p, *t, &x).unwrap()).collect();
    assert!((r[0] - r[1]).abs() <= 1e-12);
    assert!((r[2] - r[3]).abs() <= 1e-12);
}

fn assert_kkt(input: &ThreePeriodInput, s: &ThreePeriodSolution) {
    for g in three_period_lagrangian_gradient_fd(input, s, 1e-5) {
        assert!(g.abs() <= 1e-6, "Lagrangian gradient {g:e}");
    }
    assert!(s.mu0 >= -1e-12 && s.mu1 >= -1e-12);
    let (s0, s1) = input.slacks(s.b0_pm, s.b1_hel, s.h);
    assert!((s.mu0 * s0).abs() <= 1e-10 && (s.mu1 * s1).abs() <= 1e-10);
    assert!(s.housing_foc_residual(input).abs() <= 1e-8);
}

#[test]
fn three_period_binding_instance_matches_grid() {
    let input = binding_instance();
    let s = solve_three_period(&input).unwrap();
    assert_eq!(s.pattern, ActivityPattern { purchase_binds: true, hel_binds: true });
    assert!(s.mu0 > 0.0 && s.mu1 > 0.0);
    assert_kkt(&input, &s);
    let (b0, b1, h) = grid_search_three_period(&input, 1e-3).unwrap();
    assert!((b0 - s.b0_pm).abs() <= 2e-3, "b0 {b0} vs {}", s.b0_pm);
    assert!((b1 - s.b1_hel).abs() <= 2e-3, "b1 {b1} vs {}", s.b1_hel);
    assert!((h - s.h).abs() <= 2e-3, "h {h} vs {}", s.h);
}

#[test]
fn three_period_patterns_all_reachable() {
    let falling = [1.0, 0.9, 0.8];
    let cases = [
        (ThreePeriodInput { y: [3.0, 1.0, 0.3], p: falling, kappa_pm: 0.8, ..binding_instance() }, (false, false)),
        (ThreePeriodInput { y: [0.5, 2.0, 0.5], p: falling, kappa_pm: 0.8, ..binding_instance() }, (true, false)),
        (ThreePeriodInput { kappa_pm: 0.8, ..binding_instance() }, (false, true)),
        (binding_instance(), (true, true)),
    ];
    for (input, (pm, hel)) in cases {
        let s = solve_three_period(&input).unwrap();
        assert_eq!(s.pattern, ActivityPattern { purchase_binds: pm, hel_binds: hel });
        assert_kkt(&input, &s);
        let (b0, b1, h) = grid_search_three_period(&input, 1e-3).unwrap();
        assert!((b0 - s.b0_pm).abs() <= 2e-3 && (b1 - s.b1_hel).abs() <= 2e-3 && (h - s.h).abs() <= 2e-3, "{:?}", s.pattern);
    }
}

#[test]
fn closed_hel_market_zeroes_its_collateral_flow() {
    let input = ThreePeriodInput { y: [1.0, 1.0, 1.0], kappa_hel: 0.0, ..binding_instance() };
    let s = solve_three_period(&input).unwrap();
    assert_eq!(s.hel_csf(&input), 0.0);
    assert_kkt(&input, &s);
}

#[test]
fn opening_hel_weakly_raises_shadow_value() {
    let closed = ThreePeriodInput { kappa_hel: 0.0, ..binding_instance() };
    let open = binding_instance();
    let a = solve_three_period(&closed).unwrap();
    let b = solve_three_period(&open).unwrap();
    let sum = |s: &ThreePeriodSolution, i: &ThreePeriodInput| s.purchase_csf(i) + s.hel_csf(i);
    assert!(sum(&a, &closed) >= 0.0);
    assert!(b.hel_csf(&open) >= a.hel_csf(&closed));
}

#[test]
fn three_period_rejects_bad_inputs() {
    let input = ThreePeriodInput { gross_rate: 0.0, ..binding_instance() };
    assert!(matches!(solve_three_period(&input), Err(Error::Domain(_))));
}

#[test]
fn no_collateral_means_no_loans() {
    // Rising income makes the household want to borrow in both periods.
    let input = ThreePeriodInput { y: [0.5, 0.5, 3.0], kappa_pm: 0.0, kappa_hel: 0.0, ..binding_instance() };
    let s = solve_three_period(&input).unwrap();
    assert_eq!(s.pattern, ActivityPattern { purchase_binds: true, hel_binds: true });
    assert_eq!(s.b0_pm, 0.0);
    assert_eq!(s.b1_hel, 0.0);
    assert_eq!(s.purchase_csf(&input) + s.hel_csf(&input), 0.0);
    assert_kkt(&input, &s);
}
