use fdsvrg_core::analysis::{
    contraction_bound, logistic_constants, solve_optimum, verify_contraction, ConstantsSource,
};
use fdsvrg_core::config::RunConfig;
use fdsvrg_core::data::{LabeledDataset, SparseColumnMatrix};
use fdsvrg_core::error::AnalysisError;
use fdsvrg_core::model::{component_gradient, full_gradient, full_objective, LossKind, Regularizer};
use fdsvrg_core::sampling::IndexStream;
use fdsvrg_core::svrg::{svrg_run_with, DotMode};
use fdsvrg_core::synth::{make_synthetic, SyntheticSpec};
use fdsvrg_core::trace::RunOptions;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[test]
fn analytic_constants() {
    let x = SparseColumnMatrix::from_columns(2, [vec![(0, 2.0)]]).unwrap();
    let data = LabeledDataset::new(x, vec![1.0]).unwrap();
    let c = logistic_constants(&data, Regularizer::L2(0.1)).unwrap();
    assert_eq!(c.mu, 0.1);
    assert!((c.l - 1.1).abs() < 1e-15);
    assert_eq!(c.source, ConstantsSource::Analytic);
    assert!(matches!(
        logistic_constants(&data, Regularizer::L2(0.0)),
        Err(AnalysisError::NotStronglyConvex(_))
    ));
    assert!(matches!(
        logistic_constants(&data, Regularizer::L1(0.1)),
        Err(AnalysisError::Unsupported)
    ));
}

#[test]
fn smoothness_bounds_sampled_hessians() {
    let data = make_synthetic(&SyntheticSpec::new(8, 15, 0.6, 4).with_normalize(false))
        .unwrap()
        .data;
    let reg = Regularizer::L2(0.05);
    let c = logistic_constants(&data, reg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-5;
    for _ in 0..100 {
        let w: Vec<f64> = (0..data.d()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let i = rng.random_range(0..data.n());
        // power iteration on finite-difference Hessian-vector products
        let mut v: Vec<f64> = (0..data.d()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut lambda = 0.0;
        for _ in 0..30 {
            let nv = norm(&v);
            v.iter_mut().for_each(|x| *x /= nv);
            let plus: Vec<f64> = w.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = w.iter().zip(&v).map(|(a, b)| a - h * b).collect();
            let gp = component_gradient(&data, i, &plus, LossKind::Logistic, reg).unwrap();
            let gm = component_gradient(&data, i, &minus, LossKind::Logistic, reg).unwrap();
            let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            lambda = hv.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>();
            v = hv;
        }
        assert!(lambda <= c.l * (1.0 + 1e-6), "{lambda} > {}", c.l);
    }
}

fn fixture() -> (LabeledDataset, Regularizer) {
    (
        make_synthetic(&SyntheticSpec::new(20, 50, 0.4, 17)).unwrap().data,
        Regularizer::L2(1e-2),
    )
}

#[test]
fn oracle_optimum_is_stationary() {
    let (data, reg) = fixture();
    let opt = solve_optimum(&data, &RunConfig::new(0.5, data.n(), 1, reg), 1e-12, 2000).unwrap();
    assert!(opt.converged);
    let g = full_gradient(&data, &opt.weights, LossKind::Logistic, reg).unwrap();
    assert!(norm(&g) < 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let w: Vec<f64> = opt.weights.iter().map(|x| x + rng.random_range(-0.1..0.1)).collect();
        assert!(full_objective(&data, &w, LossKind::Logistic, reg).unwrap() >= opt.objective);
    }
}

fn one_outer_loop<'a>(
    data: &'a LabeledDataset,
    cfg: &'a RunConfig,
    w0: &'a [f64],
) -> impl FnMut(u64) -> Result<Vec<f64>, fdsvrg_core::error::RunError> + 'a {
    move |trial| {
        let opts = RunOptions::default().with_start(w0);
        let run = svrg_run_with(data, cfg, IndexStream::new(1000 + trial), &DotMode::Contiguous, &opts)?;
        Ok(run.weights)
    }
}

#[test]
fn empirical_contraction_within_bound() {
    let (data, reg) = fixture();
    let consts = logistic_constants(&data, reg).unwrap();
    let opt = solve_optimum(&data, &RunConfig::new(0.5, data.n(), 1, reg), 1e-12, 2000).unwrap();
    let eta = 0.2 * consts.mu / (4.0 * consts.l * consts.l);
    let inner = 2000;
    assert!(contraction_bound(&consts, eta, inner).unwrap().is_contractive());
    let cfg = RunConfig::new(eta, inner, 1, reg);
    let w0 = vec![0.5; data.d()];
    let report = verify_contraction(
        one_outer_loop(&data, &cfg, &w0),
        &consts,
        eta,
        inner,
        100,
        &w0,
        &opt.weights,
    )
    .unwrap();
    assert!(report.pass, "{report:?}");
    assert!(report.empirical_ratio <= report.allowed_ratio);

    let a = verify_contraction(
        one_outer_loop(&data, &cfg, &w0),
        &consts,
        eta,
        inner,
        1,
        &w0,
        &opt.weights,
    )
    .unwrap();
    let b = verify_contraction(
        one_outer_loop(&data, &cfg, &w0),
        &consts,
        eta,
        inner,
        1,
        &w0,
        &opt.weights,
    )
    .unwrap();
    assert_eq!(a.mean_final.to_bits(), b.mean_final.to_bits());
}

#[test]
fn contraction_check_guards() {
    let (data, reg) = fixture();
    let consts = logistic_constants(&data, reg).unwrap();
    let cfg = RunConfig::new(0.01, 5, 1, reg);
    let w0 = vec![0.0; data.d()];
    let run = one_outer_loop(&data, &cfg, &w0);
    assert!(matches!(
        verify_contraction(run, &consts, 0.01, 5, 10, &w0, &[0.0; 3]),
        Err(AnalysisError::MissingOptimum { .. })
    ));
    let run = one_outer_loop(&data, &cfg, &w0);
    assert!(matches!(
        verify_contraction(run, &consts, 0.01, 5, 0, &w0, &w0),
        Err(AnalysisError::NoTrials)
    ));
    let run = one_outer_loop(&data, &cfg, &w0);
    assert!(matches!(
        verify_contraction(run, &consts, 0.0, 5, 3, &w0, &w0),
        Err(AnalysisError::StepSize(_))
    ));
}
