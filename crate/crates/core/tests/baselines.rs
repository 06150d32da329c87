use fdsvrg_core::analysis::solve_optimum;
use fdsvrg_core::comm::{Endpoint, Phase};
use fdsvrg_core::config::RunConfig;
use fdsvrg_core::data::{partition_by_instance, InstanceShard, LabeledDataset, SparseColumnMatrix};
use fdsvrg_core::dsvrg::{dsvrg_cost_per_outer_loop, dsvrg_style_run};
use fdsvrg_core::model::{component_gradient, full_gradient, Regularizer};
use fdsvrg_core::ps::{
    asysvrg_run, synsvrg_cost_per_outer_loop, synsvrg_run, worker_streams, AsyncSchedule, Interleaving,
};
use fdsvrg_core::sampling::IndexStream;
use fdsvrg_core::svrg::svrg_run;
use fdsvrg_core::synth::{make_synthetic, SyntheticSpec};
use fdsvrg_core::trace::RunOptions;

fn problem(d: usize, n: usize, seed: u64) -> LabeledDataset {
    make_synthetic(&SyntheticSpec::new(d, n, 0.3, seed)).unwrap().data
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
        .fold(0.0, f64::max)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn synsvrg_single_worker_matches_serial() {
    let data = problem(15, 30, 1);
    let cfg = RunConfig::new(0.3, 30, 4, Regularizer::L2(1e-2)).with_seed(9);
    let shards = partition_by_instance(&data, 1).unwrap();
    let streams = worker_streams(cfg.seed, 1);
    let ps = synsvrg_run(&shards, 1, &cfg, &streams, &RunOptions::default()).unwrap();
    let serial = svrg_run(&data, &cfg, streams[0]).unwrap();
    assert!(max_abs(&ps.weights, &serial.weights) < 1e-12);
    for (a, b) in ps.trace.iter().zip(&serial.trace) {
        assert!((a.objective - b.objective).abs() < 1e-12);
    }
}

#[test]
fn synsvrg_ledger_is_dense() {
    let data = problem(12, 20, 2);
    let cfg = RunConfig::new(0.1, 5, 3, Regularizer::L2(1e-2));
    for (q, p) in [(1, 1), (2, 3), (4, 2)] {
        let shards = partition_by_instance(&data, q).unwrap();
        let out = synsvrg_run(&shards, p, &cfg, &worker_streams(0, q), &RunOptions::default()).unwrap();
        let per = synsvrg_cost_per_outer_loop(q, data.d(), cfg.inner);
        assert_eq!(per, 2 * q as u64 * 12 * 6);
        assert_eq!(out.ledger.algorithm_total(), 3 * per);
        for r in &out.trace {
            assert_eq!(r.comm_scalars, r.t as u64 * per);
        }
        assert!(out.ledger.is_consistent());
        // every broadcast to worker 1 from server 1 carries that server's
        // slice: one per round and outer loop, plus the final trace row
        let slice = fdsvrg_core::data::block_bounds(12, p)[1] as u64;
        assert_eq!(
            out.ledger.edge(Endpoint::Server(1), Endpoint::Worker(1)),
            3 * 6 * slice + slice
        );
    }
}

#[test]
fn synsvrg_identical_workers_average_to_one() {
    let x = SparseColumnMatrix::from_columns(3, [vec![(0, 0.5), (2, -1.0)], vec![(0, 0.5), (2, -1.0)]]).unwrap();
    let data = LabeledDataset::new(x, vec![1.0, 1.0]).unwrap();
    let cfg = RunConfig::new(0.2, 4, 2, Regularizer::L2(0.1));
    let two = synsvrg_run(
        &partition_by_instance(&data, 2).unwrap(),
        1,
        &cfg,
        &worker_streams(0, 2),
        &RunOptions::default(),
    )
    .unwrap();
    let single = LabeledDataset::new(
        SparseColumnMatrix::from_columns(3, [vec![(0, 0.5), (2, -1.0)]]).unwrap(),
        vec![1.0],
    )
    .unwrap();
    let one = synsvrg_run(
        &partition_by_instance(&single, 1).unwrap(),
        1,
        &cfg,
        &worker_streams(0, 1),
        &RunOptions::default(),
    )
    .unwrap();
    assert!(max_abs(&two.weights, &one.weights) < 1e-15);
}

/// Dense single-machine reference for the synchronous rounds.
fn synsvrg_oracle(
    shards: &[InstanceShard],
    data: &LabeledDataset,
    cfg: &RunConfig,
    streams: &[IndexStream],
) -> Vec<f64> {
    let mut w = vec![0.0; data.d()];
    for t in 0..cfg.outer {
        let snap = w.clone();
        let z = full_gradient(data, &snap, cfg.loss, cfg.reg).unwrap();
        let mut idx: Vec<_> = shards
            .iter()
            .zip(streams)
            .map(|(s, st)| st.epoch(t, s.data.n(), cfg.sampling))
            .collect();
        for _ in 0..cfg.inner {
            let mut avg = vec![0.0; data.d()];
            for (s, it) in shards.iter().zip(idx.iter_mut()) {
                let i = it.next_index();
                let a = component_gradient(&s.data, i, &w, cfg.loss, cfg.reg).unwrap();
                let b = component_gradient(&s.data, i, &snap, cfg.loss, cfg.reg).unwrap();
                for j in 0..avg.len() {
                    avg[j] += (a[j] - b[j]) / shards.len() as f64;
                }
            }
            for j in 0..w.len() {
                w[j] -= cfg.eta * (avg[j] + z[j]);
            }
        }
    }
    w
}

#[test]
fn synsvrg_matches_monolithic_average() {
    let data = problem(10, 24, 3);
    let cfg = RunConfig::new(0.4, 7, 3, Regularizer::L2(1e-2)).with_seed(4);
    for (q, p) in [(2, 1), (3, 2), (4, 5)] {
        let shards = partition_by_instance(&data, q).unwrap();
        let streams = worker_streams(cfg.seed, q);
        let out = synsvrg_run(&shards, p, &cfg, &streams, &RunOptions::default()).unwrap();
        let oracle = synsvrg_oracle(&shards, &data, &cfg, &streams);
        assert!(max_abs(&out.weights, &oracle) < 1e-12, "q={q} p={p}");
    }
}

#[test]
fn synsvrg_rejects_more_servers_than_parameters() {
    let data = problem(3, 6, 4);
    let cfg = RunConfig::new(0.1, 2, 1, Regularizer::L2(0.0));
    let shards = partition_by_instance(&data, 2).unwrap();
    assert!(synsvrg_run(&shards, 4, &cfg, &worker_streams(0, 2), &RunOptions::default()).is_err());
}

#[test]
fn asysvrg_serialized_single_worker_is_synchronous() {
    let data = problem(10, 20, 5);
    let cfg = RunConfig::new(0.3, 20, 3, Regularizer::L2(1e-2)).with_seed(2);
    let shards = partition_by_instance(&data, 1).unwrap();
    let streams = worker_streams(cfg.seed, 1);
    let syn = synsvrg_run(&shards, 2, &cfg, &streams, &RunOptions::default()).unwrap();
    for policy in [Interleaving::RoundRobin, Interleaving::Random] {
        let asy = asysvrg_run(
            &shards,
            2,
            &cfg,
            &streams,
            AsyncSchedule::new(0, 0, policy),
            &RunOptions::default(),
        )
        .unwrap();
        assert_eq!(asy.weights, syn.weights);
        assert_eq!(asy.ledger.algorithm_total(), syn.ledger.algorithm_total());
    }
}

/// Serialized round-robin at zero staleness: update m comes from worker
/// `m mod q` evaluated at the current parameter.
#[test]
fn asysvrg_zero_staleness_round_robin_oracle() {
    let data = problem(8, 21, 6);
    let cfg = RunConfig::new(0.3, 10, 2, Regularizer::L2(1e-2)).with_seed(3);
    let q = 3;
    let shards = partition_by_instance(&data, q).unwrap();
    let streams = worker_streams(cfg.seed, q);
    let out = asysvrg_run(
        &shards,
        1,
        &cfg,
        &streams,
        AsyncSchedule::new(0, 0, Interleaving::RoundRobin),
        &RunOptions::default(),
    )
    .unwrap();
    let mut w = vec![0.0; data.d()];
    for t in 0..cfg.outer {
        let snap = w.clone();
        let z = full_gradient(&data, &snap, cfg.loss, cfg.reg).unwrap();
        let mut idx: Vec<_> = shards
            .iter()
            .zip(&streams)
            .map(|(s, st)| st.epoch(t, s.data.n(), cfg.sampling))
            .collect();
        for m in 0..cfg.inner {
            let l = m % q;
            let i = idx[l].next_index();
            let a = component_gradient(&shards[l].data, i, &w, cfg.loss, cfg.reg).unwrap();
            let b = component_gradient(&shards[l].data, i, &snap, cfg.loss, cfg.reg).unwrap();
            for j in 0..w.len() {
                w[j] -= cfg.eta * (a[j] - b[j] + z[j]);
            }
        }
    }
    assert!(max_abs(&out.weights, &w) < 1e-12);
    let stats = out.stats.unwrap();
    assert_eq!(stats.max_staleness, 0);
    assert_eq!(stats.pushes, 20);
}

#[test]
fn asysvrg_replays_and_respects_bound() {
    let data = problem(12, 40, 7);
    let cfg = RunConfig::new(0.2, 10, 4, Regularizer::L2(1e-2)).with_seed(8);
    let shards = partition_by_instance(&data, 4).unwrap();
    let streams = worker_streams(cfg.seed, 4);
    for tau in [0, 1, 3, 6] {
        for policy in [Interleaving::RoundRobin, Interleaving::Random] {
            let sched = AsyncSchedule::new(11, tau, policy);
            let a = asysvrg_run(&shards, 3, &cfg, &streams, sched, &RunOptions::default()).unwrap();
            let b = asysvrg_run(&shards, 3, &cfg, &streams, sched, &RunOptions::default()).unwrap();
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.ledger, b.ledger);
            assert_eq!(a.stats, b.stats);
            let stats = a.stats.unwrap();
            assert!(stats.max_staleness <= tau);
            assert_eq!(stats.pushes, 40);
            assert_eq!(stats.end_signals, vec![4; 4]);
            assert_eq!(stats.pulls, stats.pushes + stats.abandoned);
            let d = data.d() as u64;
            assert_eq!(a.ledger.phase(Phase::InnerLoop), 2 * stats.pulls * d);
        }
    }
}

#[test]
fn asysvrg_with_staleness_still_converges() {
    let data = make_synthetic(&SyntheticSpec::new(20, 80, 0.5, 12)).unwrap().data;
    let q = 4;
    let reg = Regularizer::L2(1e-2);
    let base = RunConfig::new(0.5, data.n() / q, 200, reg).with_seed(1);
    let opt = solve_optimum(&data, &RunConfig::new(0.5, data.n(), 1, reg), 1e-12, 500).unwrap();
    assert!(opt.converged);
    let opts = RunOptions::default().with_optimum(opt.objective).with_stop_gap(1e-6);
    let shards = partition_by_instance(&data, q).unwrap();
    let streams = worker_streams(base.seed, q);
    let syn = synsvrg_run(&shards, 2, &base, &streams, &opts).unwrap();
    let syn_loops = syn.trace.last().unwrap().t;
    assert!(syn.trace.last().unwrap().gap <= 1e-6);
    let asy = asysvrg_run(
        &shards,
        2,
        &RunConfig {
            outer: 5 * syn_loops,
            ..base
        },
        &streams,
        AsyncSchedule::new(3, 4, Interleaving::Random),
        &opts,
    )
    .unwrap();
    assert!(asy.trace.last().unwrap().gap <= 1e-6, "syn took {syn_loops} loops");
}

#[test]
fn dsvrg_ledger_counter_and_rotation() {
    let data = problem(30, 22, 9);
    let cfg = RunConfig::new(0.2, 999, 7, Regularizer::L2(1e-2));
    let q = 3;
    let shards = partition_by_instance(&data, q).unwrap();
    let out = dsvrg_style_run(&shards, &cfg, &worker_streams(0, q), &RunOptions::default()).unwrap();
    assert_eq!(out.inner, 7);
    let per = dsvrg_cost_per_outer_loop(q, data.d());
    assert_eq!(per, 2 * 3 * 30 + 2 * 30);
    assert_eq!(out.ledger.algorithm_total(), 7 * per);
    assert_eq!(out.ledger.phase(Phase::ParameterExchange), 7 * 2 * 30);
    assert_eq!(out.gradient_evaluations, 7 * (22 + 7));
    assert_eq!(out.active, vec![1, 2, 3, 1, 2, 3, 1]);
    for (t, r) in out.touched.iter().enumerate() {
        let own = &shards[t % q].columns;
        assert!(
            own.start <= r.start && r.end <= own.end,
            "loop {t}: {r:?} outside {own:?}"
        );
    }
    for r in &out.trace {
        assert_eq!(r.comm_scalars, r.t as u64 * per);
    }
}

#[test]
fn dsvrg_single_machine_is_serial() {
    let data = problem(12, 25, 10);
    let cfg = RunConfig::new(0.3, 25, 4, Regularizer::L2(1e-2)).with_seed(6);
    let streams = worker_streams(cfg.seed, 1);
    let out = dsvrg_style_run(
        &partition_by_instance(&data, 1).unwrap(),
        &cfg,
        &streams,
        &RunOptions::default(),
    )
    .unwrap();
    assert_eq!(out.inner, 25);
    let serial = svrg_run(&data, &cfg, streams[0]).unwrap();
    assert!(max_abs(&out.weights, &serial.weights) < 1e-12);
    assert!(max_rel(&out.weights, &serial.weights) < 1e-9);
}

#[test]
fn dsvrg_cheaper_per_loop_only_when_features_are_few() {
    // d > N: feature distribution moves less per N inner gradients
    let (d, n, q) = (500u64, 100u64, 4u64);
    assert_eq!(2 * q * n, 800);
    assert_eq!(2 * q * d, 4000);
    assert_eq!(dsvrg_cost_per_outer_loop(4, 500), 4000 + 1000);
    assert!(2 * q * n < 2 * q * d);
}
