use std::sync::Arc;

use brpc::discrepancy::{Representation, Variant};
use brpc::engine::{run_method_on_stream, BrpcConfig, BrpcExpert, MethodSpec};
use brpc::gaussian::gram;
use brpc::restart::{Expert, WcusumConfig};
use brpc::seed::derive_seed;
use brpc::stream::{gen_stream, Stream, StreamConfig, StreamFamily};

fn small_brpc(variant: Variant) -> BrpcConfig {
    let mut cfg = BrpcConfig {
        particles: 128,
        ..Default::default()
    };
    cfg.disc.variant = variant;
    cfg
}

fn stream(family: StreamFamily, total: usize, seed: u64) -> Stream {
    gen_stream(&StreamConfig::new(family, total, 20, 0.2, seed)).unwrap()
}

#[test]
fn no_restart_rule_on_a_stationary_stream() {
    let s = stream(StreamFamily::Stationary, 300, 1);
    let log = run_method_on_stream(&MethodSpec::Brpc { brpc: small_brpc(Variant::E) }, &s, 2, false).unwrap();
    assert_eq!(log.entries.len(), 15);
    assert!(log.restart_batches().is_empty());
    let idx: Vec<usize> = log.entries.iter().map(|e| e.batch).collect();
    assert_eq!(idx, (0..15).collect::<Vec<_>>());
}

#[test]
fn same_inputs_give_the_same_log() {
    let s = stream(StreamFamily::Sudden, 400, 3);
    for spec in [
        MethodSpec::CBrpc {
            brpc: small_brpc(Variant::E),
            wcusum: WcusumConfig::default(),
        },
        MethodSpec::BBrpc {
            brpc: small_brpc(Variant::P),
            bocpd: Default::default(),
        },
        MethodSpec::Enkf {
            enkf: brpc::baselines::EnkfConfig {
                members: 64,
                ..Default::default()
            },
        },
    ] {
        let a = run_method_on_stream(&spec, &s, 9, true).unwrap();
        let b = run_method_on_stream(&spec, &s, 9, true).unwrap();
        assert_eq!(a, b);
        let c = run_method_on_stream(&spec, &s, 10, true).unwrap();
        assert_ne!(a, c);
    }
}

#[test]
fn fresh_predictive_is_the_gp_prior_plus_noise() {
    let s = stream(StreamFamily::Drifting, 60, 4);
    let cfg = Arc::new(small_brpc(Variant::E));
    let expert = BrpcExpert::fresh(cfg.clone(), s.simulator(), 5, false).unwrap();
    let batch = s.records[0].batch();
    let law = expert.forecast(&batch).unwrap().law;
    let mut want = gram(&batch.inputs, &cfg.disc.kernel);
    for i in 0..batch.len() {
        want[(i, i)] += cfg.disc.residual_noise_sd.powi(2);
    }
    for i in 0..law.len() {
        assert!((law.component_cov(i) - &want).amax() < 1e-12);
    }
}

#[test]
fn first_batch_is_scored_before_assimilation() {
    let s = stream(StreamFamily::Drifting, 100, 6);
    let cfg = small_brpc(Variant::E);
    let run_seed = 11;
    let log = run_method_on_stream(&MethodSpec::Brpc { brpc: cfg.clone() }, &s, run_seed, false).unwrap();
    let expert = BrpcExpert::fresh(Arc::new(cfg), s.simulator(), derive_seed(run_seed, &["expert"], 0), false).unwrap();
    let want = expert.forecast(&s.records[0].batch()).unwrap().log_density;
    assert_eq!(log.entries[0].log_pred, want);
}

#[test]
fn restarts_open_new_record_segments() {
    let s = stream(StreamFamily::Sudden, 800, 7);
    let spec = MethodSpec::CBrpc {
        brpc: small_brpc(Variant::E),
        wcusum: WcusumConfig::default(),
    };
    let log = run_method_on_stream(&spec, &s, 12, true).unwrap();
    let recs = log.propagation.as_ref().unwrap();
    assert_eq!(recs.len(), log.entries.len());
    let starts: Vec<usize> = recs.iter().filter(|r| r.segment_start).map(|r| r.batch).collect();
    let mut want = vec![0];
    want.extend(log.restart_batches());
    assert_eq!(starts, want);
    assert!(!log.restart_batches().is_empty());
}

#[test]
fn records_only_for_recursive_brpc() {
    let s = stream(StreamFamily::Drifting, 100, 8);
    let mut rra = small_brpc(Variant::E);
    rra.rra = true;
    for spec in [
        MethodSpec::BBrpcRra {
            brpc: rra,
            bocpd: Default::default(),
        },
        MethodSpec::Bc { bc: Default::default() },
    ] {
        assert!(run_method_on_stream(&spec, &s, 1, true).unwrap().propagation.is_none());
    }
    let p = run_method_on_stream(&MethodSpec::Brpc { brpc: small_brpc(Variant::P) }, &s, 1, true).unwrap();
    assert_eq!(p.propagation.map(|v| v.len()), Some(0));
    let f = run_method_on_stream(&MethodSpec::Brpc { brpc: small_brpc(Variant::F) }, &s, 1, false).unwrap();
    assert!(f.propagation.is_none());
}

#[test]
fn every_method_reports_finite_metrics() {
    let s = stream(StreamFamily::Mixed, 200, 9);
    let specs = [
        MethodSpec::b_brpc(Variant::F),
        MethodSpec::c_brpc(Variant::P),
        MethodSpec::Bc { bc: Default::default() },
        MethodSpec::WardPf { ward: Default::default() },
        MethodSpec::BocpdWardPf {
            ward: Default::default(),
            bocpd: Default::default(),
        },
        MethodSpec::Enkf { enkf: Default::default() },
    ];
    for spec in &specs {
        let log = run_method_on_stream(spec, &s, 3, false).unwrap();
        assert!(log.y_rmse().is_finite() && log.y_crps() > 0.0 && log.theta_crps() >= 0.0, "{spec:?}");
        assert!(log.entries.iter().all(|e| e.log_pred.is_finite() && e.theta_mean.len() == 1));
    }
}

#[test]
fn invalid_configuration_is_an_error() {
    let s = stream(StreamFamily::Drifting, 60, 10);
    let mut cfg = small_brpc(Variant::P);
    cfg.disc.representation = Representation::ParticleSpecific;
    assert!(run_method_on_stream(&MethodSpec::Brpc { brpc: cfg }, &s, 1, false).is_err());
    let mut wrong_dim = small_brpc(Variant::E);
    wrong_dim.theta.bounds = vec![(0.0, 3.0); 2];
    assert!(run_method_on_stream(&MethodSpec::Brpc { brpc: wrong_dim }, &s, 1, false).is_err());
}
