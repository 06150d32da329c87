use std::time::Duration;

use fdsvrg::fabric::Backend;
use fdsvrg::threaded::{asysvrg_threaded, dsvrg_threaded, fd_svrg_threaded, synsvrg_threaded, AsyncMode, NetOptions};
use fdsvrg::Error;
use fdsvrg_core::config::RunConfig;
use fdsvrg_core::data::{partition_by_feature, partition_by_instance, LabeledDataset};
use fdsvrg_core::dsvrg::dsvrg_style_run;
use fdsvrg_core::error::RunError;
use fdsvrg_core::fd::fd_svrg_run;
use fdsvrg_core::model::Regularizer;
use fdsvrg_core::ps::{asysvrg_run, synsvrg_run, worker_streams, AsyncSchedule, Interleaving};
use fdsvrg_core::sampling::IndexStream;
use fdsvrg_core::synth::{make_synthetic, SyntheticSpec};
use fdsvrg_core::trace::RunOptions;

const BACKENDS: [Backend; 2] = [Backend::InProc, Backend::Socket];

fn problem(d: usize, n: usize, seed: u64) -> LabeledDataset {
    make_synthetic(&SyntheticSpec::new(d, n, 0.2, seed)).unwrap().data
}

fn net(backend: Backend) -> NetOptions {
    NetOptions {
        backend,
        timeout: Duration::from_secs(20),
    }
}

// a known optimum keeps the gap column finite so whole outcomes compare
fn opts() -> RunOptions<'static> {
    RunOptions::default().with_optimum(0.0)
}

#[test]
fn fd_threaded_is_bit_identical() {
    let data = problem(60, 40, 3);
    for backend in BACKENDS {
        for (q, batch) in [(1, 1), (3, 2), (4, 1), (5, 3)] {
            let cfg = RunConfig::new(0.5, 40, 4, Regularizer::L2(1e-2))
                .with_seed(7)
                .with_batch(batch);
            let shards = partition_by_feature(&data, q).unwrap();
            let stream = IndexStream::new(cfg.seed);
            let want = fd_svrg_run(shards.clone(), &cfg, stream, &opts()).unwrap();
            let got = fd_svrg_threaded(shards, &cfg, stream, &opts(), &net(backend)).unwrap();
            assert_eq!(got, want, "{backend:?} q={q} u={batch}");
        }
    }
}

#[test]
fn fd_threaded_stops_with_the_core_runner() {
    let data = problem(30, 30, 4);
    let cfg = RunConfig::new(0.5, 30, 20, Regularizer::L2(1e-2));
    let shards = partition_by_feature(&data, 3).unwrap();
    let full = fd_svrg_run(shards.clone(), &cfg, IndexStream::new(0), &RunOptions::default()).unwrap();
    let target = full.trace[3].objective;
    let o = RunOptions::default().with_optimum(target).with_stop_gap(0.0);
    let want = fd_svrg_run(shards.clone(), &cfg, IndexStream::new(0), &o).unwrap();
    let got = fd_svrg_threaded(shards, &cfg, IndexStream::new(0), &o, &net(Backend::InProc)).unwrap();
    assert_eq!(want.trace.len(), 4);
    assert_eq!(got, want);
}

#[test]
fn fd_threaded_reports_divergence() {
    let data = problem(30, 30, 5);
    let cfg = RunConfig::new(1e200, 30, 5, Regularizer::L2(1.0));
    let shards = partition_by_feature(&data, 3).unwrap();
    let want = fd_svrg_run(shards.clone(), &cfg, IndexStream::new(0), &RunOptions::default()).unwrap_err();
    assert!(matches!(want, RunError::Divergence { .. }));
    let got = fd_svrg_threaded(
        shards,
        &cfg,
        IndexStream::new(0),
        &RunOptions::default(),
        &net(Backend::InProc),
    );
    match got {
        Err(Error::Run(e)) => assert_eq!(e, want),
        other => panic!("{other:?}"),
    }
}

#[test]
fn synsvrg_threaded_is_bit_identical() {
    let data = problem(20, 36, 6);
    let cfg = RunConfig::new(0.2, 12, 3, Regularizer::L2(1e-2)).with_seed(2);
    for backend in BACKENDS {
        for (q, p) in [(1, 1), (3, 2), (4, 5)] {
            let shards = partition_by_instance(&data, q).unwrap();
            let streams = worker_streams(cfg.seed, q);
            let want = synsvrg_run(&shards, p, &cfg, &streams, &opts()).unwrap();
            let got = synsvrg_threaded(&shards, p, &cfg, &streams, &opts(), &net(backend)).unwrap();
            assert_eq!(got, want, "{backend:?} q={q} p={p}");
        }
    }
}

#[test]
fn scheduled_asysvrg_threaded_is_bit_identical() {
    let data = problem(20, 36, 7);
    let cfg = RunConfig::new(0.2, 15, 3, Regularizer::L2(1e-2)).with_seed(4);
    for backend in BACKENDS {
        for (q, p, tau, policy) in [
            (1, 1, 0, Interleaving::RoundRobin),
            (3, 2, 0, Interleaving::Random),
            (4, 3, 4, Interleaving::RoundRobin),
            (4, 2, 3, Interleaving::Random),
        ] {
            let shards = partition_by_instance(&data, q).unwrap();
            let streams = worker_streams(cfg.seed, q);
            let schedule = AsyncSchedule::new(11, tau, policy);
            let want = asysvrg_run(&shards, p, &cfg, &streams, schedule, &opts()).unwrap();
            let mode = AsyncMode::Scheduled(schedule);
            let got = asysvrg_threaded(&shards, p, &cfg, &streams, mode, &opts(), &net(backend)).unwrap();
            assert_eq!(got, want, "{backend:?} q={q} p={p} tau={tau}");
        }
    }
}

#[test]
fn free_running_asysvrg_respects_the_bound() {
    let data = problem(20, 40, 8);
    let cfg = RunConfig::new(0.2, 20, 4, Regularizer::L2(1e-2));
    for tau in [0, 2, 6] {
        let shards = partition_by_instance(&data, 4).unwrap();
        let streams = worker_streams(cfg.seed, 4);
        let mode = AsyncMode::FreeRunning { staleness: tau };
        let out = asysvrg_threaded(&shards, 2, &cfg, &streams, mode, &opts(), &net(Backend::InProc)).unwrap();
        let stats = out.stats.unwrap();
        assert_eq!(stats.pushes, 4 * 20);
        assert!(stats.max_staleness <= tau);
        assert_eq!(stats.pulls, stats.pushes + stats.abandoned);
        assert_eq!(stats.end_signals, vec![4; 4]);
        assert!(out.trace.last().unwrap().objective < out.trace[0].objective);
    }
}

#[test]
fn dsvrg_threaded_is_bit_identical() {
    let data = problem(20, 37, 9);
    let cfg = RunConfig::new(0.2, 1, 5, Regularizer::L2(1e-2)).with_seed(3);
    for backend in BACKENDS {
        for q in [1, 2, 4] {
            let shards = partition_by_instance(&data, q).unwrap();
            let streams = worker_streams(cfg.seed, q);
            let want = dsvrg_style_run(&shards, &cfg, &streams, &opts()).unwrap();
            let got = dsvrg_threaded(&shards, &cfg, &streams, &opts(), &net(backend)).unwrap();
            assert_eq!(got, want, "{backend:?} q={q}");
        }
    }
}
