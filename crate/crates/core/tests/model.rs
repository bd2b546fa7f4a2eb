use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use riskmap::config::{ModelConfig, PcPrior, PhiPrior};
use riskmap::geometry::{lattice_regions, AreaGraph, CoordUnit};
use riskmap::inference::LatentModel;
use riskmap::model::{build_layout, rw1_structure, cyclic_structure, ObservationPanel, SpatioTemporalModel};
use riskmap::simulate::sample_constrained;
use riskmap::sparsela::Constraints;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("R{i}")).collect()
}

fn months(t: usize) -> Vec<String> {
    (0..t).map(|k| format!("{:04}-{:02}", 2015 + k / 12, k % 12 + 1)).collect()
}

fn panel(n: usize, t: usize, p: usize) -> ObservationPanel {
    let rows = n * t;
    let covs = (0..p).map(|k| (format!("x{k}"), (0..rows).map(|r| ((r * (k + 3)) % 7) as f64).collect())).collect();
    ObservationPanel::new(ids(n), months(t), vec![1; rows], covs, vec![0.0; rows]).unwrap()
}

fn path_graph(n: usize) -> AreaGraph {
    let edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
    AreaGraph::new(ids(n), &edges, vec![1.0; n]).unwrap()
}

fn dense(q: &riskmap::sparsela::SparseSym) -> DMatrix<f64> {
    let d = q.to_dense();
    DMatrix::from_fn(q.dim(), q.dim(), |i, j| d[i][j])
}

/// Covariance of `N(0, Q⁻¹)` conditioned on the constraints, densely.
fn constrained_covariance(q: &DMatrix<f64>, c: &Constraints) -> DMatrix<f64> {
    let sigma = q.clone().try_inverse().unwrap();
    let mut a = DMatrix::zeros(c.len(), c.dim());
    for (k, row) in c.rows().iter().enumerate() {
        for &(i, v) in row {
            a[(k, i)] = v;
        }
    }
    let asa = &a * &sigma * a.transpose();
    &sigma - &sigma * a.transpose() * asa.try_inverse().unwrap() * &a * &sigma
}

fn spatial_only(phi: f64, tau_b: f64) -> ModelConfig {
    let mut cfg = ModelConfig { trend: false, jitter: 1e-8, ..ModelConfig::default() };
    cfg.seasonal.enabled = false;
    cfg.priors.intercept_precision = 1.0;
    cfg.fixed.insert("phi".into(), phi);
    cfg.fixed.insert("prec_bym2".into(), tau_b);
    cfg
}

#[test]
fn layout_dimensions_follow_the_blocks() {
    let g = path_graph(4);
    let p = panel(4, 24, 2);
    assert_eq!(build_layout(&p, &g, &ModelConfig::default()).unwrap().dim(), 47);
    let mut cfg = ModelConfig::default();
    cfg.seasonal.enabled = false;
    assert_eq!(build_layout(&p, &g, &cfg).unwrap().dim(), 35);
}

#[test]
fn layout_ranges_are_contiguous_and_ordered() {
    let lay = build_layout(&panel(4, 24, 2), &path_graph(4), &ModelConfig::default()).unwrap();
    let ranges = [lay.beta(), lay.b(), lay.u(), lay.f(), lay.s()];
    assert_eq!(ranges[0].start, 0);
    for w in ranges.windows(2) {
        assert_eq!(w[0].end, w[1].start);
    }
    assert_eq!(ranges[4].end, lay.dim());
}

#[test]
fn missing_region_is_named() {
    let g = AreaGraph::new(vec!["A".into(), "B".into(), "C".into(), "D".into()], &[(0, 1), (1, 2), (2, 3)], vec![1.0; 4])
        .unwrap();
    let p = ObservationPanel::new(vec!["A".into(), "B".into(), "C".into()], months(3), vec![0; 9], vec![], vec![0.0; 9])
        .unwrap();
    let err = build_layout(&p, &g, &ModelConfig::default()).unwrap_err().to_string();
    assert!(err.contains("[D]"), "{err}");
}

#[test]
fn design_row_touches_expected_entries() {
    let g = path_graph(4);
    let p = panel(4, 24, 2);
    let cfg = ModelConfig { covariates: vec!["x0".into(), "x1".into()], ..ModelConfig::default() };
    let lay = build_layout(&p, &g, &cfg).unwrap();
    let model = SpatioTemporalModel::new(lay.clone(), &g, &cfg).unwrap();
    let obs = model.observations(&p).unwrap();
    for (i, t) in [(0, 0), (2, 13), (3, 23)] {
        let r = p.row(i, t);
        let cols: Vec<usize> = obs.design.row_entries(r).iter().map(|&(c, _)| c).collect();
        let mut want = vec![0, 1, 2, lay.b().start + i, lay.f().start + t, lay.s().start + lay.season_of(t).unwrap()];
        want.sort_unstable();
        let mut got = cols.clone();
        got.sort_unstable();
        assert_eq!(got, want);
    }
}

#[test]
fn rw1_and_cyclic_structures() {
    let r = rw1_structure(3).to_dense();
    assert_eq!(r, vec![vec![1.0, -1.0, 0.0], vec![-1.0, 2.0, -1.0], vec![0.0, -1.0, 1.0]]);
    for s in [rw1_structure(7), cyclic_structure(12)] {
        for row in s.to_dense() {
            assert_eq!(row.iter().sum::<f64>(), 0.0);
        }
    }
}

#[test]
fn bym2_block_matches_dense_covariance_construction() {
    // two-region path, φ = 0.5, τ_b = 1; κ = 4 and R⁺ = [[1,-1],[-1,1]]/4
    let g = path_graph(2);
    let p = ObservationPanel::new(ids(2), months(1), vec![0; 2], vec![], vec![0.0; 2]).unwrap();
    let cfg = spatial_only(0.5, 1.0);
    let model = SpatioTemporalModel::new(build_layout(&p, &g, &cfg).unwrap(), &g, &cfg).unwrap();
    let prior = model.prior(&[]).unwrap();
    let cov = constrained_covariance(&dense(&prior.precision), &prior.constraints);
    let kappa = g.icar_scale()[0].unwrap();
    let r_plus = DMatrix::from_row_slice(2, 2, &[0.25, -0.25, -0.25, 0.25]);
    let want = DMatrix::<f64>::identity(2, 2) * 0.5 + r_plus * (0.5 * kappa);
    let b = model.layout().b();
    for i in 0..2 {
        for j in 0..2 {
            assert!((cov[(b.start + i, b.start + j)] - want[(i, j)]).abs() < 1e-6, "{cov}");
        }
    }
}

#[test]
fn phi_near_zero_decouples_b_from_u() {
    let g = path_graph(3);
    let p = ObservationPanel::new(ids(3), months(1), vec![0; 3], vec![], vec![0.0; 3]).unwrap();
    let cfg = spatial_only(1e-9, 2.0);
    let model = SpatioTemporalModel::new(build_layout(&p, &g, &cfg).unwrap(), &g, &cfg).unwrap();
    let q = model.prior(&[]).unwrap().precision;
    let (b, u) = (model.layout().b(), model.layout().u());
    for i in 0..3 {
        assert!((q.get(b.start + i, b.start + i) - 2.0).abs() < 1e-6);
        assert!(q.get(u.start + i, b.start + i).abs() < 1e-4);
    }
}

#[test]
fn scaled_marginal_variance_is_one_for_any_phi() {
    // geometric mean of Var(b_i) at τ_b = 1, exactly and by sampling
    let g = AreaGraph::from_regions(&lattice_regions(&[1.0; 3], &[1.0; 4]), 0.0, CoordUnit::Kilometers).unwrap();
    let n = g.len();
    let p = ObservationPanel::new(g.region_ids().to_vec(), months(1), vec![0; n], vec![], vec![0.0; n]).unwrap();
    for phi in [0.05, 0.5, 0.95] {
        let cfg = spatial_only(phi, 1.0);
        let model = SpatioTemporalModel::new(build_layout(&p, &g, &cfg).unwrap(), &g, &cfg).unwrap();
        let prior = model.prior(&[]).unwrap();
        let cov = constrained_covariance(&dense(&prior.precision), &prior.constraints);
        let b = model.layout().b();
        // the structured part has unit geometric-mean variance exactly; the
        // mixture is only ≈ 1 since the geometric mean is not linear (the
        // gap is largest near φ = 0.5 on small, irregular-degree graphs)
        let gm = (b.clone().map(|k| cov[(k, k)].ln()).sum::<f64>() / n as f64).exp();
        assert!((gm - 1.0).abs() < 0.03, "phi {phi}: {gm}");
        let u = model.layout().u();
        let gm_u = (u.clone().map(|k| cov[(k, k)].ln()).sum::<f64>() / n as f64).exp();
        assert!((gm_u - 1.0).abs() < 1e-5, "{gm_u}");
        for (i, k) in b.clone().enumerate() {
            let structured = cov[(u.start + i, u.start + i)];
            assert!((cov[(k, k)] - (1.0 - phi) - phi * structured).abs() < 1e-5);
        }

        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(9);
        let draws = 6000;
        let mut sq = vec![0.0; n];
        for _ in 0..draws {
            let z: Vec<f64> = (0..prior.precision.dim()).map(|_| StandardNormal.sample(&mut rng)).collect();
            let x = sample_constrained(&prior.precision, &prior.constraints, &z).unwrap();
            for i in 0..n {
                sq[i] += x[b.start + i].powi(2);
            }
        }
        let gm_hat = (sq.iter().map(|s| (s / draws as f64).ln()).sum::<f64>() / n as f64).exp();
        assert!((gm_hat / gm - 1.0).abs() < 0.05, "phi {phi}: sampled {gm_hat} vs {gm}");
    }
}

#[test]
fn precision_is_deterministic_and_factorizable() {
    let g = path_graph(5);
    let p = panel(5, 14, 1);
    let cfg = ModelConfig::default();
    let model = SpatioTemporalModel::new(build_layout(&p, &g, &cfg).unwrap(), &g, &cfg).unwrap();
    for theta in [[0.0, 0.0, 0.0, 0.0], [3.0, -4.0, 6.0, -2.0], [-5.0, 5.0, -3.0, 8.0]] {
        let a = model.prior(&theta).unwrap();
        let b = model.prior(&theta).unwrap();
        assert_eq!(a.precision, b.precision);
        assert_eq!(a.constrained_log_det.unwrap().to_bits(), b.constrained_log_det.unwrap().to_bits());
        // intercept is flat: add unit precision to check the remainder is PD
        let mut q = dense(&a.precision);
        q[(0, 0)] += 1.0;
        assert!(q.cholesky().is_some());
    }
}

#[test]
fn pc_prior_at_the_upper_bound() {
    let pc = PcPrior { u: 1.0, alpha: 0.01 };
    let lambda = -(0.01f64).ln();
    // σ = 1 ⇔ log τ = 0; density of log τ = density of σ × σ/2
    let want = (lambda * 0.01).ln() + 0.5f64.ln();
    assert!((pc.log_density_log_precision(0.0) - want).abs() < 1e-12);
    let pc2 = PcPrior { u: 0.5, alpha: 0.05 };
    let l2 = -(0.05f64).ln() / 0.5;
    let want2 = (l2 * (-l2 * 0.5f64).exp()).ln() + 0.25f64.ln();
    assert!((pc2.log_density_log_precision(-2.0 * 0.5f64.ln()) - want2).abs() < 1e-12);
}

#[test]
fn uniform_phi_prior_on_logit_scale() {
    assert!((PhiPrior::Uniform.log_density_logit(0.0) - 0.25f64.ln()).abs() < 1e-15);
}

fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    (0..=n).map(|k| f(a + k as f64 * h) * if k == 0 || k == n { 0.5 } else { 1.0 }).sum::<f64>() * h
}

#[test]
fn hyperprior_marginals_integrate_to_one() {
    for pc in [PcPrior::default(), PcPrior { u: 0.3, alpha: 0.1 }] {
        let mass = trapezoid(|x| pc.log_density_log_precision(x).exp(), -60.0, 80.0, 200_000);
        assert!((mass - 1.0).abs() < 1e-6, "{mass}");
    }
    for phi in [PhiPrior::Uniform, PhiPrior::Beta([2.0, 3.0])] {
        let mass = trapezoid(|x| phi.log_density_logit(x).exp(), -60.0, 60.0, 200_000);
        assert!((mass - 1.0).abs() < 1e-6, "{mass}");
    }
}

#[test]
fn joint_log_prior_is_the_sum_of_parts() {
    let g = path_graph(4);
    let p = panel(4, 24, 0);
    let cfg = ModelConfig::default();
    let model = SpatioTemporalModel::new(build_layout(&p, &g, &cfg).unwrap(), &g, &cfg).unwrap();
    let theta = [1.3, -0.4, 2.2, 0.7];
    let pri = &cfg.priors;
    let want = pri.bym2.log_density_log_precision(1.3)
        + pri.phi.log_density_logit(-0.4)
        + pri.rw1.log_density_log_precision(2.2)
        + pri.seasonal.log_density_log_precision(0.7);
    assert!((model.log_hyper_prior(&theta).unwrap() - want).abs() < 1e-12);
    assert!(model.log_hyper_prior(&[f64::NAN, 0.0, 0.0, 0.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn covariates_are_standardized(raw in prop::collection::vec(-1e3f64..1e3, 12), shift in -1e4f64..1e4) {
        let values: Vec<f64> = raw.iter().map(|v| v + shift).collect();
        prop_assume!(values.iter().any(|v| (v - values[0]).abs() > 1e-3));
        let p = ObservationPanel::new(ids(3), months(4), vec![0; 12], vec![("x".into(), values)], vec![0.0; 12]).unwrap();
        let (m, s) = riskmap::model::mean_sd(p.covariate(0));
        prop_assert!(m.abs() <= 1e-8);
        prop_assert!((s - 1.0).abs() <= 1e-8);
    }

    #[test]
    fn area_offset_is_log_area(areas in prop::collection::vec(0.01f64..1e4, 1..6)) {
        let n = areas.len();
        let p = ObservationPanel::with_area_offset(ids(n), months(3), vec![0; 3 * n], vec![], &areas).unwrap();
        for i in 0..n {
            for t in 0..3 {
                prop_assert_eq!(p.offsets()[p.row(i, t)], areas[i].ln());
            }
        }
    }
}
