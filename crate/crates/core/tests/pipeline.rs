use std::f64::consts::PI;

use expgrowth::estimates::*;
use expgrowth::grid::*;
use expgrowth::inner::HeightEquation;
use expgrowth::io::{parse_config, InitialCondition};
use expgrowth::rothe::*;

fn line_cosine(a: f64) -> Field {
    let g = build_grid(1, &[1.0], &[33]).unwrap();
    Field::from_fn(g, |x| a * (PI * x[0]).cos()).unwrap()
}

#[test]
fn refinement_in_the_first_order_regime() {
    let u0 = line_cosine(0.05);
    let trajs: Vec<Trajectory> = [16, 32, 64]
        .iter()
        .map(|&j| run(&u0, &RunConfig::new(0.1, j)).unwrap())
        .collect();
    let d1 = trajs[0].last().u.max_abs_diff(&trajs[1].last().u);
    let d2 = trajs[1].last().u.max_abs_diff(&trajs[2].last().u);
    assert!((1.5..=3.0).contains(&(d1 / d2)), "ratio {}", d1 / d2);
    let bounds: Vec<GlobalBounds> = trajs
        .iter()
        .map(|t| global_bounds_report(t).unwrap())
        .collect();
    for f in [
        |b: &GlobalBounds| b.sup_mass_plus_abs_log,
        |b: &GlobalBounds| b.sup_w22_u,
        |b: &GlobalBounds| b.sup_w22_rho,
        |b: &GlobalBounds| b.sup_w,
        |b: &GlobalBounds| b.total_dissipation,
    ] {
        let v: Vec<f64> = bounds.iter().map(f).collect();
        let hi = v.iter().cloned().fold(f64::MIN, f64::max);
        let lo = v.iter().cloned().fold(f64::MAX, f64::min);
        assert!(hi < 2.0 * lo, "{v:?}");
    }
}

#[test]
fn three_dimensional_run_satisfies_the_step_inequalities() {
    let g = build_grid(3, &[1.0, 1.0, 1.0], &[9, 9, 9]).unwrap();
    let u0 = InitialCondition::parse_modes("1 0 1 0.02; 0 1 0 -0.01", 3)
        .unwrap()
        .build(&g)
        .unwrap();
    let traj = run(&u0, &RunConfig::new(0.05, 8)).unwrap();
    assert!(traj.is_complete());
    assert_eq!(traj.diagnostics.len(), 8);
    for r in &traj.diagnostics {
        assert!(r.l31.pass && r.l34.pass, "k = {}", r.k);
        assert!(r.rg_gap >= -1e-9 && r.mean_identity_residual.abs() <= 1e-7);
        assert_eq!(r.sup_w, 1.0 / r.min_rho);
    }
    assert!(reconstruction_defect(&traj) <= 1e-12);
    let (lhs, rhs) = interpolant_gap(&traj);
    assert!(lhs <= rhs * (1.0 + 1e-12) + 1e-300);
}

#[test]
fn positive_variant_through_the_config() {
    let text = "grid.dim = 1\ngrid.nodes = 17\ntime.T = 0.05\ntime.j = 8\n\
                solver.variant = positive\nic.kind = expr\nic.expr = \"1 + 0.01*cos(pi*x)\"\n";
    let cfg = parse_config(text).unwrap();
    assert_eq!(cfg.height, HeightEquation::LogPositive);
    let traj = run(&cfg.initial_field().unwrap(), &cfg.run_config().unwrap()).unwrap();
    assert!(traj.is_complete());
    assert!(traj.slices().all(|s| s.u.min() > 0.0 && s.rho.min() > 0.0));

    let zero = text.replace("1 + 0.01*cos(pi*x)", "0.01*cos(pi*x)");
    assert!(parse_config(&zero).is_err());
}

#[test]
fn rest_state_bounds_sit_at_their_floor() {
    let g = build_grid(2, &[1.0, 2.0], &[5, 9]).unwrap();
    let traj = run(&Field::zeros(g), &RunConfig::new(0.25, 4)).unwrap();
    let b = global_bounds_report(&traj).unwrap();
    assert_eq!(b.sup_mass_plus_abs_log, 2.0);
    assert_eq!(b.sup_abs_mean_u, 0.0);
    assert_eq!(b.sup_w, 1.0);
    assert_eq!(b.sup_rho, 1.0);
    assert_eq!(b.total_dissipation, 0.0);
    assert_eq!(b.slices, 5);
    let mid = evaluate_interpolants(&traj, 0.125 + 0.03125).unwrap();
    assert_eq!(mid.u_tilde.max_abs(), 0.0);
}
