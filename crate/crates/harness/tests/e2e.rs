use std::collections::BTreeMap;

use guard_core::auth::{ChainFile, NonceLedger, Verifier};
use guard_core::crypto::PublicParams;
use guard_core::ids::NumericalId;
use guard_harness::config::{InitFault, QueryTargets};
use guard_harness::log::HEADER;
use guard_harness::{controller_run, load_config, EventKind, HarnessError, LogRecord, Mode, Phase, SimConfig};

fn small(n: usize, seed: u64, pairs: usize, dir: &std::path::Path) -> SimConfig {
    let mut cfg = SimConfig::new(n, seed);
    cfg.message_count = pairs;
    cfg.wait_time_max_s = 2;
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn done(records: &[LogRecord], mode: Mode) -> Vec<&LogRecord> {
    records.iter().filter(|r| r.event == EventKind::SearchDone && r.mode == Some(mode)).collect()
}

fn oracle(ids: &[NumericalId], q: NumericalId) -> NumericalId {
    let mut sorted = ids.to_vec();
    sorted.sort();
    sorted.iter().rev().find(|&&id| id <= q).copied().unwrap_or(*sorted.last().unwrap())
}

#[test]
fn honest_run_answers_every_search() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(16, 3, 4, dir.path());
    cfg.query_targets = QueryTargets::Any;
    let out = controller_run(&cfg).unwrap();
    assert_eq!(out.node_csvs.len(), 16);
    for mode in [Mode::Plain, Mode::Auth] {
        let d = done(&out.records, mode);
        assert_eq!(d.len(), 64);
        for r in d {
            let q = NumericalId::from_hex(&r.q_hex).unwrap();
            let result = NumericalId::from_hex(r.detail_field("result").unwrap()).unwrap();
            assert_eq!(result, oracle(&out.ids, q), "{}", r.detail);
        }
    }
    let auth = out.summary.mode(Mode::Auth);
    assert_eq!((auth.accepts, auth.rejects, auth.failures), (64, 0, 0));
    assert!(!out.records.iter().any(|r| r.event == EventKind::Reject));
}

#[test]
fn one_pair_per_node_gives_two_searches_each() {
    let dir = tempfile::tempdir().unwrap();
    let out = controller_run(&small(8, 5, 1, dir.path())).unwrap();
    let mut per_node: BTreeMap<&str, usize> = BTreeMap::new();
    for r in out.records.iter().filter(|r| r.event == EventKind::SearchDone) {
        *per_node.entry(&r.node_id).or_default() += 1;
    }
    assert_eq!(per_node.len(), 8);
    assert!(per_node.values().all(|&c| c == 2));
}

#[test]
fn same_seed_same_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let x = controller_run(&small(8, 21, 3, a.path())).unwrap();
    let y = controller_run(&small(8, 21, 3, b.path())).unwrap();
    assert_eq!(std::fs::read(&x.merged_csv).unwrap(), std::fs::read(&y.merged_csv).unwrap());
    let c = tempfile::tempdir().unwrap();
    let z = controller_run(&small(8, 22, 3, c.path())).unwrap();
    assert_ne!(std::fs::read(&x.merged_csv).unwrap(), std::fs::read(&z.merged_csv).unwrap());
}

#[test]
fn merged_csv_has_the_documented_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = controller_run(&small(4, 8, 1, dir.path())).unwrap();
    let text = std::fs::read_to_string(&out.merged_csv).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "ts_us,node_id,event,search_seq,mode,nonce_hex,q_hex,hop_count,latency_us,msg_bytes,compute_us,detail"
    );
    assert_eq!(text.lines().next().unwrap(), HEADER.join(","));
    let ts: Vec<u64> = out.records.iter().map(|r| r.ts_us).collect();
    assert!(ts.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn bad_table_proof_stops_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(8, 4, 1, dir.path());
    cfg.init_faults.insert(5, InitFault::BadTableProof);
    match controller_run(&cfg) {
        Err(HarnessError::Phase(e)) => {
            assert_eq!((e.node, e.phase), (5, Phase::Initialization));
        }
        other => panic!("expected a phase error, got {other:?}"),
    }
}

#[test]
fn auth_overhead_grows_with_hops() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(32, 9, 4, dir.path());
    cfg.query_targets = QueryTargets::Any;
    let out = controller_run(&cfg).unwrap();
    let mut by_hops: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for r in done(&out.records, Mode::Auth) {
        let e = by_hops.entry(r.hop_count.unwrap()).or_default();
        e.0 += r.latency_us.unwrap();
        e.1 += 1;
    }
    let means: Vec<f64> = by_hops.values().map(|(s, c)| *s as f64 / *c as f64).collect();
    assert!(means.len() >= 3);
    assert!(means.windows(2).all(|w| w[0] < w[1]), "{means:?}");
    let plain = out.summary.mode(Mode::Plain);
    let auth = out.summary.mode(Mode::Auth);
    assert!(auth.latency_us.value().unwrap() > plain.latency_us.value().unwrap());
    assert!(auth.msg_bytes.value().unwrap() > plain.msg_bytes.value().unwrap());
}

#[test]
fn sample_chains_verify_offline() {
    let dir = tempfile::tempdir().unwrap();
    let out = controller_run(&small(8, 12, 2, dir.path())).unwrap();
    assert_eq!(out.chain_files.len(), 8);
    let params = PublicParams::from_text(&std::fs::read_to_string(&out.params_file).unwrap()).unwrap();
    for p in &out.chain_files {
        let f = ChainFile::from_text(&std::fs::read_to_string(p).unwrap()).unwrap();
        let exp = guard_core::auth::Expectation { initiator: f.initiator, query: f.query, nonce: f.nonce };
        let v = Verifier::new(params.clone()).verify_chain(&f.chain, &exp, &mut NonceLedger::default());
        assert!(v.is_accept(), "{}: {v}", p.display());
    }
}

#[test]
fn adversarial_config_file_runs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("adv.conf");
    std::fs::write(
        &path,
        "node_count = 12\nseed = 2\nmessage_count = 6\nwait_time_max_s = 2\nquery_targets = any\n\
         adv.4 = drop:0.5,manipulate:0.5\nadv.7 = falsify\noutput_dir = out\n",
    )
    .unwrap();
    let cfg = load_config(&path).unwrap();
    assert_eq!(cfg.output_dir, dir.path().join("out"));
    let out = controller_run(&cfg).unwrap();
    assert!(out.merged_csv.starts_with(dir.path().join("out")));
    let tagged = out.records.iter().filter(|r| r.event == EventKind::Hop && r.detail.contains("adv:")).count();
    assert!(tagged > 0);
    for r in done(&out.records, Mode::Auth) {
        if r.detail_field("outcome") == Some("accept") {
            let q = NumericalId::from_hex(&r.q_hex).unwrap();
            let result = NumericalId::from_hex(r.detail_field("result").unwrap()).unwrap();
            assert_eq!(result, oracle(&out.ids, q));
        }
    }
}

fn single_behavior_run(b: guard_harness::Behavior, dir: &std::path::Path) -> Vec<LogRecord> {
    let mut cfg = small(10, 31, 6, dir);
    cfg.query_targets = QueryTargets::Any;
    cfg.adversaries = vec![guard_harness::AdversarySpec { node: 4, behaviors: vec![(b, 1.0)] }];
    controller_run(&cfg).unwrap().records
}

#[test]
fn falsified_results_fail_the_numerical_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let records = single_behavior_run(guard_harness::Behavior::Falsify, dir.path());
    let rejects: Vec<&LogRecord> = records.iter().filter(|r| r.event == EventKind::Reject).collect();
    assert!(!rejects.is_empty());
    for r in rejects {
        assert!(r.detail.starts_with("QueryRejected") && r.detail.contains("BadNumericalSig"), "{}", r.detail);
    }
}

#[test]
fn dropped_queries_time_out_as_failed_searches() {
    let dir = tempfile::tempdir().unwrap();
    let records = single_behavior_run(guard_harness::Behavior::Drop, dir.path());
    let rejects: Vec<&LogRecord> = records.iter().filter(|r| r.event == EventKind::Reject).collect();
    assert!(!rejects.is_empty());
    for r in rejects {
        assert_eq!(r.detail, "AuthSearchFailed;reason=timeout");
    }
    let plain_timeouts = done(&records, Mode::Plain).iter().filter(|r| r.detail_field("outcome") == Some("timeout")).count();
    assert!(plain_timeouts > 0);
}

#[test]
fn misdirected_auth_searches_are_rejected_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let records = single_behavior_run(guard_harness::Behavior::Misdirect, dir.path());
    let rejects: Vec<&LogRecord> = records.iter().filter(|r| r.event == EventKind::Reject).collect();
    assert!(!rejects.is_empty());
    for r in rejects {
        assert!(r.detail.contains("BadNameSig"), "{}", r.detail);
    }
}
