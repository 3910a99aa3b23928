use std::f64::consts::FRAC_PI_2;
use std::sync::Arc;

use fbsde::model::{counterexample, SineParams};
use fbsde::oracle::*;
use fbsde::paths::{forward_paths, generate_increments, IncrementSet};
use fbsde::solver::SolverConfig;
use fbsde::{Error, FbsdeProblem, Grid};

fn brownian(g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> FbsdeProblem {
    FbsdeProblem::builder(1, 1).diffusion(|_, _, _, out| out[0] = 1.0).terminal(g).build().unwrap()
}

fn wide(nodes: usize) -> OracleConfig {
    OracleConfig { x_lo: -12.0, x_hi: 12.0, nodes, ..OracleConfig::default() }
}

#[test]
fn gauss_hermite_moments() {
    let q = GaussHermite::new(32).unwrap();
    assert!((q.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    assert!(q.expect(|x| x).abs() < 1e-14);
    assert!((q.expect(|x| x * x) - 1.0).abs() < 1e-13);
    assert!((q.expect(|x| x.powi(4)) - 3.0).abs() < 1e-12);
    assert!((q.expect(|x| x.powi(6)) - 15.0).abs() < 1e-11);
    assert!(q.nodes.windows(2).all(|w| w[0] < w[1]));
    let q64 = GaussHermite::new(64).unwrap();
    let exact = (-0.5f64).exp();
    assert!((q.expect(f64::cos) - exact).abs() < 1e-12);
    assert!((q.expect(f64::cos) - q64.expect(f64::cos)).abs() < 1e-8);
    let odd = GaussHermite::new(9).unwrap();
    assert!(odd.nodes[4].abs() < 1e-14);
    assert!(GaussHermite::new(0).is_err());
}

#[test]
fn linear_terminal_is_reproduced() {
    let p = brownian(|x| x[0]);
    let grid = Grid::new(1.0, 5).unwrap();
    let o = quadrature_fixed_point(&p, &grid, &wide(241)).unwrap();
    let f = &o.function;
    for i in 0..=5 {
        for (j, x) in f.x_nodes().iter().enumerate() {
            if x.abs() <= 4.0 {
                assert!((f.u_values(i)[j] - x).abs() < 1e-10, "u_{i}({x})");
                if i < 5 {
                    assert!((f.v_values(i)[j] - 1.0).abs() < 1e-10, "v_{i}({x})");
                }
            }
        }
    }
    assert_eq!(f.v_values(5).iter().copied().fold(0.0, f64::max), 0.0);
}

#[test]
fn quadratic_terminal_second_moment() {
    let p = brownian(|x| x[0] * x[0]);
    let n = 5;
    let grid = Grid::new(1.0, n).unwrap();
    let cfg = wide(4001);
    let o = quadrature_fixed_point(&p, &grid, &cfg).unwrap();
    let f = &o.function;
    let dx = 24.0 / 4000.0;
    let interp_budget = n as f64 * dx * dx / 4.0;
    for i in 0..n {
        for (j, x) in f.x_nodes().iter().enumerate() {
            if x.abs() <= 4.0 {
                let exact = x * x + (n - i) as f64 * grid.step_size();
                assert!((f.u_values(i)[j] - exact).abs() <= interp_budget, "u_{i}({x})");
                assert!((f.v_values(i)[j] - 2.0 * x).abs() < 1e-3, "v_{i}({x})");
            }
        }
    }
}

#[test]
fn terminal_row_is_exact_and_interpolation_extrapolates() {
    let p = brownian(|x| x[0].sin());
    let grid = Grid::new(1.0, 3).unwrap();
    let cfg = OracleConfig { x_lo: -1.0, x_hi: 1.0, nodes: 21, ..OracleConfig::default() };
    let o = quadrature_fixed_point(&p, &grid, &cfg).unwrap();
    let f = &o.function;
    for (j, x) in f.x_nodes().iter().enumerate() {
        assert_eq!(f.u_values(3)[j], x.sin());
    }
    assert_eq!(f.u(3, -5.0), (-1.0f64).sin());
    assert_eq!(f.u(3, 7.0), 1.0f64.sin());
    let mid = 0.5 * (f.node(3) + f.node(4));
    assert!((f.u(3, mid) - 0.5 * (f.node(3).sin() + f.node(4).sin())).abs() < 1e-15);
}

#[test]
fn sine_oracle_within_step_of_exact() {
    let p = SineParams::new(1, 0.1, 0.0).problem().unwrap();
    let grid = Grid::new(1.0, 50).unwrap();
    let o = quadrature_fixed_point(&p, &grid, &OracleConfig::default()).unwrap();
    let u0 = o.function.u(0, FRAC_PI_2);
    assert!((u0 - 1.0).abs() <= grid.step_size(), "{u0}");
    assert_eq!(o.function.node(1000), FRAC_PI_2);
}

#[test]
fn fixed_point_residual_below_tolerance() {
    let p = SineParams::new(1, 0.2, 0.5).problem().unwrap();
    let grid = Grid::new(1.0, 10).unwrap();
    let cfg = OracleConfig { nodes: 401, ..OracleConfig::default() };
    let o = quadrature_fixed_point(&p, &grid, &cfg).unwrap();
    let again = apply_operator(&p, &o.function, &GaussHermite::new(cfg.quad_order).unwrap());
    assert!(again.sup_distance(&o.function) < cfg.inner_tol);
    assert!(o.last_change < cfg.inner_tol);
}

#[test]
fn doubling_quadrature_order_is_stable() {
    let p = SineParams::new(1, 0.1, 0.0).problem().unwrap();
    let grid = Grid::new(1.0, 10).unwrap();
    // Nodes near the window edge feel the constant extrapolation, so the
    // check is on the reported value at x0.
    let x0 = std::f64::consts::FRAC_PI_2;
    let a = quadrature_fixed_point(&p, &grid, &OracleConfig::default()).unwrap();
    let b = quadrature_fixed_point(&p, &grid, &OracleConfig { quad_order: 64, ..OracleConfig::default() }).unwrap();
    assert!((a.function.u(0, x0) - b.function.u(0, x0)).abs() < 1e-8);
    let q = brownian(|x| x[0]);
    let c = quadrature_fixed_point(&q, &grid, &wide(241)).unwrap();
    let d = quadrature_fixed_point(&q, &grid, &OracleConfig { quad_order: 64, ..wide(241) }).unwrap();
    let interior = 80..161;
    for i in 0..=grid.steps() {
        for j in interior.clone() {
            assert!((c.function.u_values(i)[j] - d.function.u_values(i)[j]).abs() < 1e-8);
            assert!((c.function.v_values(i)[j] - d.function.v_values(i)[j]).abs() < 1e-8);
        }
    }
}

#[test]
fn maximum_principle() {
    let p = FbsdeProblem::builder(1, 1)
        .drift(|_, _, y, out| out[0] = 0.3 * y)
        .diffusion(|_, x, _, out| out[0] = 0.5 + 0.2 * x[0].cos())
        .terminal(|x| (2.0 * x[0]).tanh())
        .build()
        .unwrap();
    let grid = Grid::new(1.0, 10).unwrap();
    let o = quadrature_fixed_point(&p, &grid, &OracleConfig { x_lo: -3.0, x_hi: 3.0, nodes: 301, ..OracleConfig::default() })
        .unwrap();
    for i in 0..=10 {
        assert!(o.function.u_values(i).iter().all(|u| u.abs() <= 1.0 + 1e-12));
    }
}

#[test]
fn counterexample_oracle_does_not_converge() {
    let p = counterexample(1.0, 3.0 * std::f64::consts::PI / 4.0).unwrap();
    let grid = Grid::new(p.horizon(), 20).unwrap();
    let cfg = OracleConfig { x_lo: -20.0, x_hi: 20.0, nodes: 401, inner_max: 60, ..OracleConfig::default() };
    match quadrature_fixed_point(&p, &grid, &cfg) {
        Err(Error::OracleNotConverged { iterations: 60, last_change }) => assert!(last_change > 1e-10),
        other => panic!("{:?}", other.map(|o| o.sweeps)),
    }
}

#[test]
fn oracle_argument_checks() {
    let two = FbsdeProblem::builder(2, 2).build().unwrap();
    let grid = Grid::new(1.0, 4).unwrap();
    assert!(quadrature_fixed_point(&two, &grid, &OracleConfig::default()).is_err());
    let one = brownian(|x| x[0]);
    assert!(quadrature_fixed_point(&one, &grid, &OracleConfig { quad_order: 4, ..OracleConfig::default() }).is_err());
    assert!(quadrature_fixed_point(&one, &grid, &OracleConfig { x_lo: 1.0, x_hi: 0.0, ..OracleConfig::default() }).is_err());
    assert!((boundary_margin(0.1, 4.0) - 0.8).abs() < 1e-15);
}

#[test]
fn grid_function_csv() {
    let p = brownian(|x| x[0]);
    let grid = Grid::new(1.0, 2).unwrap();
    let o = quadrature_fixed_point(&p, &grid, &OracleConfig { x_lo: -1.0, x_hi: 1.0, nodes: 5, ..OracleConfig::default() })
        .unwrap();
    let mut buf = Vec::new();
    o.function.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "i,t_i,x,u,v");
    assert_eq!(lines.len(), 1 + 3 * 5);
    let last: Vec<f64> = lines[15].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(last, vec![2.0, 1.0, 1.0, 1.0, 0.0]);
}

#[test]
fn reference_paths_degenerate_cases() {
    let grid = Grid::new(1.0, 4).unwrap();
    let zero = IncrementSet::from_data(4, 2, 3, 0.25, 0, vec![0.0; 24]).unwrap();
    let params = SineParams::new(2, 0.4, 0.7);
    let r = sine_reference_paths(&params, &grid, &zero).unwrap();
    for l in 0..3 {
        for i in 0..=4 {
            assert_eq!(r.state(l, i), &[FRAC_PI_2, FRAC_PI_2]);
            let expected = 2.0 * (-0.7 * (1.0 - grid.time(i))).exp();
            assert!((r.y(l, i) - expected).abs() < 1e-15);
        }
    }
    let inc = generate_increments(4, 2, 3, 0.25, 5).unwrap();
    let still = SineParams { sigma: 0.0, ..params };
    let r = sine_reference_paths(&still, &grid, &inc).unwrap();
    assert!(r.x.iter().all(|v| *v == FRAC_PI_2));
    let one = SineParams::new(1, 0.3, 0.0);
    let inc1 = generate_increments(4, 1, 10, 0.25, 5).unwrap();
    let r = sine_reference_paths(&one, &grid, &inc1).unwrap();
    assert!((0..10).all(|l| r.y(l, 0) == 1.0));
    assert!(sine_reference_paths(&params, &grid, &inc1).is_err());
}

#[test]
fn reference_matches_forward_pass_with_exact_solution() {
    let params = SineParams::new(3, 0.3, 0.4);
    let p = params.problem().unwrap();
    let grid = Grid::new(1.0, 16).unwrap();
    let inc = Arc::new(generate_increments(16, 3, 500, grid.step_size(), 44).unwrap());
    let perfect = |i: usize, x: &[f64]| params.exact_value(grid.time(i), x);
    let e = forward_paths(&p, &grid, &perfect, inc.clone(), 1).unwrap();
    let r = sine_reference_paths(&params, &grid, &inc).unwrap();
    assert!(e.states().iter().zip(&r.x).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn benchmark_result_consistency() {
    let params = SineParams::new(1, 0.1, 0.0);
    let grid = Grid::new(1.0, 10).unwrap();
    let cfg = SolverConfig { paths: 4000, seed: 3, ..SolverConfig::default() };
    let b = run_sine_benchmark(&params, &grid, &cfg).unwrap();
    assert_eq!(b.abs_error, (b.y0_estimate - b.y0_exact).abs());
    assert_eq!(b.y0_exact, 1.0);
    assert_eq!(b.mse_curve.len(), 11);
    assert!((b.mse_curve[0] - b.abs_error.powi(2)).abs() < 1e-18);
    // X̄ and the reference Euler paths differ only through ū versus u.
    assert!(b.mse_curve[10] < 1e-8);
    assert_eq!(b.m_stop, b.report.m_stop);
}

#[test]
fn slopes() {
    let pts: Vec<(f64, f64)> = [10.0, 20.0, 40.0].iter().map(|n: &f64| (*n, 3.0 * n.powf(-0.5))).collect();
    assert!((log_log_slope(&pts).unwrap() + 0.5).abs() < 1e-12);
    assert_eq!(log_log_slope(&pts[..1]), None);
    assert_eq!(log_log_slope(&[(10.0, 1.0), (20.0, 0.0)]), None);
    let params = SineParams::new(1, 0.1, 0.0);
    let cfg = SolverConfig { paths: 500, ..SolverConfig::default() };
    let study = convergence_study_n(&params, &[8], &[1, 2], &cfg).unwrap();
    assert_eq!(study.slope, None);
    assert_eq!(study.rows.len(), 1);
    assert_eq!(study.rows[0].y0_per_seed.len(), 2);
    assert!(convergence_study_n(&params, &[], &[1], &cfg).is_err());
}
