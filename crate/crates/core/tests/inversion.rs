use microlp::{ComparisonOp, OptimizationDirection, Problem, SolveOutcome};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sosconv::conv::{hand_crafted_model, PathModel};
use sosconv::geometry::{make_default_schedule, ImagingGrid};
use sosconv::inversion::{
    build_tv_operator, l1_objective, reconstruct, slowness_to_sos, sos_to_slowness, BeamformingConfig, InversionConfig,
};
use sosconv::metrics::{rmse_delay, rmse_sos, trace_is_monotone};
use sosconv::{DelayField, ForwardModel};

fn grid(nx: usize, nz: usize) -> ImagingGrid {
    ImagingGrid::desk().with_cells(nx, nz)
}

fn line_model(g: &ImagingGrid) -> ForwardModel {
    hand_crafted_model(g, &make_default_schedule(), &PathModel::Line).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, nz: usize, nx: usize, amp: f64) -> Array2<f64> {
    Array2::from_shape_fn((nz, nx), |_| rng.random_range(-amp..amp))
}

fn observe(model: &ForwardModel, s: &Array2<f64>, rng: &mut ChaCha8Rng, noise: f64) -> Vec<DelayField> {
    model
        .apply(s)
        .unwrap()
        .into_iter()
        .map(|t| {
            let (nz, nx) = t.dim();
            if noise == 0.0 {
                return DelayField::new(t);
            }
            DelayField::new(t + uniform(rng, nz, nx, noise))
        })
        .collect()
}

/// Rectangle of relative slowness `-8e-6` s/m (about +18 m/s) in a zero background.
fn block(nz: usize, nx: usize) -> Array2<f64> {
    let mut s = Array2::zeros((nz, nx));
    s.slice_mut(ndarray::s![nz / 3..2 * nz / 3, nx / 4..nx / 2 + 1]).fill(-8e-6);
    s
}

/// L1 objective minimized exactly as a linear program, in units `L/dx` and
/// `t/t_scale`.
fn lp_optimum(model: &ForwardModel, delays: &[DelayField], lambda: f64, kappa: f64) -> Array2<f64> {
    let (nz, nx) = model.grid.shape();
    let n = nz * nx;
    let dx = model.grid.dx();
    let mut mags: Vec<f64> = delays.iter().flat_map(|d| d.values.iter().map(|v| v.abs())).collect();
    mags.sort_by(f64::total_cmp);
    let ts = mags[mags.len() / 2];
    let rows = model.assemble_rows();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let s: Vec<_> = (0..n).map(|_| lp.add_var(0.0, (f64::NEG_INFINITY, f64::INFINITY))).collect();
    for (p, d) in delays.iter().enumerate() {
        for i in 0..n {
            if !d.is_valid(i / nx, i % nx) {
                continue;
            }
            let u = lp.add_var(1.0, (0.0, f64::INFINITY));
            let t = d.values[[i / nx, i % nx]] / ts;
            let terms: Vec<_> = rows.rows[p * n + i].iter().map(|&(j, v)| (s[j], v / dx)).collect();
            let mut pos = terms.clone();
            pos.push((u, -1.0));
            lp.add_constraint(&pos, ComparisonOp::Le, t);
            let mut neg: Vec<_> = terms.iter().map(|&(v, c)| (v, -c)).collect();
            neg.push((u, -1.0));
            lp.add_constraint(&neg, ComparisonOp::Le, -t);
        }
    }
    let lam = lambda / dx;
    let mut diff = |a: usize, b: usize, w: f64| {
        let v = lp.add_var(lam, (0.0, f64::INFINITY));
        lp.add_constraint([(s[b], w), (s[a], -w), (v, -1.0)], ComparisonOp::Le, 0.0);
        lp.add_constraint([(s[b], -w), (s[a], w), (v, -1.0)], ComparisonOp::Le, 0.0);
    };
    for z in 0..nz {
        for x in 0..nx {
            if z + 1 < nz {
                diff(z * nx + x, (z + 1) * nx + x, 1.0);
            }
            if x + 1 < nx {
                diff(z * nx + x, z * nx + x + 1, kappa);
            }
        }
    }
    let sol = match lp.solve().expect("LP solves") {
        SolveOutcome::Solution(sol) => sol,
        SolveOutcome::Interrupted(_) => panic!("LP interrupted"),
    };
    Array2::from_shape_fn((nz, nx), |(z, x)| sol.var_value(s[z * nx + x]) * ts / dx)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tv_matches_neighbor_differences(nz in 2usize..10, nx in 2usize..10, kappa in 0.1f64..3.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = uniform(&mut rng, nz, nx, 1.0);
        let tv = build_tv_operator(&grid(nx, nz), kappa).unwrap();
        let mut brute = 0.0;
        for z in 0..nz {
            for x in 0..nx {
                if z + 1 < nz { brute += (s[[z + 1, x]] - s[[z, x]]).abs(); }
                if x + 1 < nx { brute += kappa * (s[[z, x + 1]] - s[[z, x]]).abs(); }
            }
        }
        prop_assert!((tv.l1(&s) - brute).abs() <= 1e-12 * brute.max(1.0));
        prop_assert!(tv.apply(&Array2::from_elem((nz, nx), 3.5)).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn sos_conversion_is_monotone_and_invertible(a in -5e-5f64..5e-5, b in -5e-5f64..5e-5, c0 in 1400.0f64..1600.0) {
        let bf = BeamformingConfig::new(c0).unwrap();
        let s = Array2::from_shape_vec((1, 2), vec![a, b]).unwrap();
        let c = slowness_to_sos(&s, &bf).unwrap();
        if a < b { prop_assert!(c[[0, 0]] > c[[0, 1]]); }
        let back = sos_to_slowness(&c, &bf).unwrap();
        for (x, y) in s.iter().zip(back.iter()) {
            prop_assert!((x - y).abs() <= 1e-12 * (x.abs() + 1.0 / c0));
        }
    }

    #[test]
    fn objective_trace_never_increases(nz in 4usize..9, nx in 4usize..9, seed in any::<u64>(), lambda_exp in -6.0f64..-2.0) {
        let g = grid(nx, nz);
        let model = line_model(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth = uniform(&mut rng, nz, nx, 1e-5);
        let delays = observe(&model, &truth, &mut rng, 5e-9);
        let inv = InversionConfig { lambda: 10f64.powf(lambda_exp), ..Default::default() };
        let r = reconstruct(&model, &delays, &BeamformingConfig::default(), &inv).unwrap();
        prop_assert!(trace_is_monotone(&r.objective_trace), "{:?}", r.objective_trace);
    }
}

#[test]
fn huge_tv_weight_flattens_to_background() {
    let g = grid(8, 8);
    let model = line_model(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let delays = observe(&model, &block(8, 8), &mut rng, 1e-9);
    // Normalized TV weight 1e6 against a unit-scale data term.
    let inv = InversionConfig { lambda: 1e6 * g.dx(), ..Default::default() };
    let r = reconstruct(&model, &delays, &BeamformingConfig::default(), &inv).unwrap();
    let peak = r.slowness.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(peak < 1e-6, "max |s| = {peak:e}");
}

#[test]
fn irls_objective_is_near_lp_optimum_with_masks() {
    let g = grid(7, 7);
    let model = line_model(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let delays: Vec<DelayField> = observe(&model, &block(7, 7), &mut rng, 5e-9)
        .into_iter()
        .map(|d| {
            let mask = Array2::from_shape_fn((7, 7), |_| rng.random_bool(0.85));
            DelayField::with_mask(d.values, mask).unwrap()
        })
        .collect();
    let inv = InversionConfig::default();
    let r = reconstruct(&model, &delays, &BeamformingConfig::default(), &inv).unwrap();
    let s_lp = lp_optimum(&model, &delays, inv.lambda, inv.kappa);
    let opt = l1_objective(&model, &delays, &s_lp, inv.lambda, inv.kappa).unwrap();
    let got = l1_objective(&model, &delays, &r.slowness, inv.lambda, inv.kappa).unwrap();
    assert!((got - opt) / opt <= 0.005, "IRLS {got:e} vs LP {opt:e}");
    assert!((r.l1_objective - got).abs() <= 1e-9 * got);
}

#[test]
fn realizable_block_is_recovered_within_one_meter_per_second() {
    let g = grid(24, 24);
    let model = line_model(&g);
    let truth = block(24, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let delays = observe(&model, &truth, &mut rng, 0.0);
    let bf = BeamformingConfig::default();
    let inv = InversionConfig { lambda: 1e-5, max_iters: 80, ..Default::default() };
    let r = reconstruct(&model, &delays, &bf, &inv).unwrap();
    let err = rmse_sos(&slowness_to_sos(&truth, &bf).unwrap(), &r.sos).unwrap();
    assert!(err < 1.0, "RMSE_c {err} m/s");
}

#[test]
fn residual_stays_at_noise_level_for_consistent_model() {
    let g = grid(10, 10);
    let model = line_model(&g);
    let truth = block(10, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let sigma = 5e-9;
    let delays = observe(&model, &truth, &mut rng, sigma);
    let noise_rms = rmse_delay(&model, &truth, &delays).unwrap();
    let r = reconstruct(&model, &delays, &BeamformingConfig::default(), &InversionConfig::default()).unwrap();
    let fit = rmse_delay(&model, &r.slowness, &delays).unwrap();
    assert!(fit <= 1.1 * noise_rms, "fit {fit:e} s vs noise {noise_rms:e} s");
}
