//! One line per acceptance criterion, at the stated tolerances.
//!
//! Everything runs inside a single test so the runtime budgets are measured
//! without other tests competing for the CPU.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use guard_core::auth::{Expectation, NonceLedger, ProofChain, RejectReason, RoutingProof, Verdict};
use guard_core::crypto::{
    combine_partials, derive_identity_keypair, keyed_permutation, keyed_permutation_inverse, partial_sign,
    split_3of3, verify_with_key, Identity, MasterSecret, PermutationKey,
};
use guard_core::fixture::GuardedOverlay;
use guard_core::ids::{NameId, NumericalId};
use guard_core::skipgraph::Overlay;
use guard_harness::config::QueryTargets;
use guard_harness::log::HEADER;
use guard_harness::{
    collusion_mc, controller_run, load_config, read_csv_file, Behavior, EventKind, LogRecord, Mode, RunOutput,
    SimConfig,
};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: u32, name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("criterion {id:>2} {} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, name, pass, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn oracle(sorted: &[NumericalId], q: NumericalId) -> NumericalId {
    match sorted.partition_point(|&id| id <= q) {
        0 => *sorted.last().expect("non-empty"),
        k => sorted[k - 1],
    }
}

fn sorted_ids(out: &RunOutput) -> Vec<NumericalId> {
    let mut ids = out.ids.clone();
    ids.sort();
    ids
}

fn searches(records: &[LogRecord]) -> impl Iterator<Item = &LogRecord> {
    records.iter().filter(|r| r.event == EventKind::SearchDone)
}

fn result_of(r: &LogRecord) -> Option<NumericalId> {
    r.detail_field("result").filter(|s| !s.is_empty()).and_then(|s| NumericalId::from_hex(s).ok())
}

fn q_of(r: &LogRecord) -> NumericalId {
    NumericalId::from_hex(&r.q_hex).expect("logged query")
}

fn run(cfg: &SimConfig) -> (RunOutput, tempfile::TempDir) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = cfg.clone();
    cfg.output_dir = dir.path().to_path_buf();
    (controller_run(&cfg).expect("harness run"), dir)
}

fn random_query_cfg(n: usize, pairs: usize, seed: u64) -> SimConfig {
    let mut cfg = SimConfig::new(n, seed);
    cfg.message_count = pairs;
    cfg.wait_time_max_s = 2;
    cfg.query_targets = QueryTargets::Any;
    cfg
}

/// Criteria 1 and 2 share the same runs.
fn search_correctness() -> [Outcome; 2] {
    let start = Instant::now();
    let (mut checked, mut wrong, mut paired, mut unpaired) = (0usize, 0usize, 0usize, 0usize);
    let mut per_n = Vec::new();
    for (n, seed) in [(8usize, 101u64), (32, 102), (128, 103)] {
        let (out, _dir) = run(&random_query_cfg(n, 500usize.div_ceil(n), seed));
        let ids = sorted_ids(&out);
        let mut pairs = 0;
        let mut by_node: BTreeMap<(&str, u64), &LogRecord> = BTreeMap::new();
        for r in searches(&out.records) {
            let ok = matches!(r.detail_field("outcome"), Some("ok" | "accept"));
            checked += 1;
            if !ok || result_of(r) != Some(oracle(&ids, q_of(r))) {
                wrong += 1;
            }
            by_node.insert((r.node_id.as_str(), r.search_seq.unwrap()), r);
        }
        // each pair is a PLAIN search followed by its AUTH twin
        for (&(node, seq), r) in &by_node {
            if r.mode != Some(Mode::Plain) {
                continue;
            }
            pairs += 1;
            match by_node.get(&(node, seq + 1)) {
                Some(a)
                    if a.mode == Some(Mode::Auth)
                        && a.q_hex == r.q_hex
                        && a.detail_field("path") == r.detail_field("path") =>
                {
                    paired += 1
                }
                _ => unpaired += 1,
            }
        }
        per_n.push(format!("n={n}: {pairs} pairs"));
    }
    let elapsed = start.elapsed();
    [
        report(
            1,
            "oracle equivalence",
            wrong == 0 && elapsed < Duration::from_secs(60),
            format!("{wrong} mismatches in {checked} searches ({}), {}", per_n.join(", "), secs(elapsed)),
        ),
        report(
            2,
            "path pairing",
            unpaired == 0 && paired > 0,
            format!("{paired} identical AUTH/PLAIN hop sequences, {unpaired} mismatches"),
        ),
    ]
}

fn hop_scaling() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut worst: Option<String> = None;
    let mut lines = Vec::new();
    for n in [16usize, 64, 256] {
        let mut ids = BTreeSet::new();
        while ids.len() < n {
            ids.insert(rng.next_u64());
        }
        let ids: Vec<u64> = ids.into_iter().collect();
        let overlay = Overlay::from_ids(&ids, 32).unwrap();
        let members: Vec<NumericalId> = overlay.ids().collect();
        let mut total = 0usize;
        let queries = 500;
        for _ in 0..queries {
            let initiator = members[rng.random_range(0..n)];
            let path = overlay.search_by_numerical_id(initiator, NumericalId(rng.next_u64())).unwrap();
            total += path.hops.len() - 1;
        }
        let mean = total as f64 / queries as f64;
        let bound = 2.0 * (n as f64).log2() + 4.0;
        lines.push(format!("n={n} mean {mean:.2} <= {bound:.0}"));
        if mean > bound {
            worst = Some(format!("n={n}"));
        }
    }
    report(3, "hop scaling", worst.is_none(), lines.join(", "))
}

/// Every single-field mutant of `chain`.
fn mutants(chain: &ProofChain) -> Vec<ProofChain> {
    let mut out = Vec::new();
    let with = |i: usize, f: &mut dyn FnMut(&mut RoutingProof)| {
        let mut c = chain.clone();
        f(&mut c.0[i]);
        c
    };
    for i in 0..chain.len() {
        for b in 0..64 {
            let bit = 1u64 << b;
            out.push(with(i, &mut |p| p.transcript.router.0 ^= bit));
            out.push(with(i, &mut |p| p.transcript.initiator.0 ^= bit));
            out.push(with(i, &mut |p| p.transcript.query.0 ^= bit));
            for field in 0..2 {
                let m = with(i, &mut |p| {
                    let slot = if field == 0 { &mut p.transcript.from } else { &mut p.transcript.to };
                    *slot = Some(NumericalId(slot.map_or(0, |v| v.0) ^ bit));
                });
                out.push(m);
            }
        }
        out.push(with(i, &mut |p| p.transcript.from = p.transcript.from.xor(Some(NumericalId(0)))));
        out.push(with(i, &mut |p| p.transcript.to = p.transcript.to.xor(Some(NumericalId(0)))));
        for byte in 0..16 {
            for b in 0..8 {
                out.push(with(i, &mut |p| p.transcript.nonce.0[byte] ^= 1 << b));
            }
        }
        for byte in 0..48 {
            for b in 0..8 {
                out.push(with(i, &mut |p| p.sig_numerical.0[byte] ^= 1 << b));
                out.push(with(i, &mut |p| p.sig_name.0[byte] ^= 1 << b));
            }
        }
        let mut deleted = chain.clone();
        deleted.0.remove(i);
        out.push(deleted);
        let mut dup = chain.clone();
        dup.0.insert(i, chain.0[i].clone());
        out.push(dup);
        if i + 1 < chain.len() {
            let mut swapped = chain.clone();
            swapped.0.swap(i, i + 1);
            out.push(swapped);
        }
    }
    out.retain(|m| m != chain);
    out
}

fn mutation_soundness() -> Outcome {
    let start = Instant::now();
    let mut g = GuardedOverlay::new(32, 32, 44).unwrap();
    let ids = g.ids();
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let (mut chains, mut total, mut accepted, mut lengths) = (0, 0usize, 0usize, BTreeMap::new());
    while chains < 50 {
        let initiator = ids[rng.random_range(0..ids.len())];
        let q = NumericalId(rng.next_u64());
        let run = g.auth_search(initiator, q).unwrap();
        assert!(run.verdict.is_accept(), "honest chain rejected: {}", run.verdict);
        chains += 1;
        *lengths.entry(run.chain.len()).or_insert(0) += 1;
        let exp = Expectation { initiator, query: q, nonce: run.nonce };
        for m in mutants(&run.chain) {
            total += 1;
            if g.verifier_mut().verify_chain(&m, &exp, &mut NonceLedger::default()).is_accept() {
                accepted += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    report(
        4,
        "proof soundness by mutation",
        accepted == 0 && elapsed < Duration::from_secs(90),
        format!("{accepted} of {total} mutants accepted over {chains} chains (lengths {lengths:?}), {}", secs(elapsed)),
    )
}

fn threshold_necessity() -> Outcome {
    let master = MasterSecret::new(&[9u8; 32]).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let (mut full_ok, mut exceptions, mut attempts) = (0, 0, 0);
    for i in 0..100u64 {
        let id = Identity::numerical(NumericalId(i));
        let (key, pk, _) = derive_identity_keypair(&master, &id).unwrap();
        let shares = split_3of3(&key).unwrap();
        let mut msg = vec![0u8; 64];
        let mut other = vec![0u8; 64];
        rng.fill(&mut msg[..]);
        rng.fill(&mut other[..]);
        let parts: Vec<_> = shares.iter().map(|s| partial_sign(s, &msg)).collect();
        let foreign: Vec<_> = shares.iter().map(|s| partial_sign(s, &other)).collect();

        match combine_partials(&parts) {
            Ok(sig) if verify_with_key(&pk, &msg, &sig) => full_ok += 1,
            _ => exceptions += 1,
        }
        for skip in 0..3 {
            attempts += 1;
            let two: Vec<_> = parts.iter().enumerate().filter(|(k, _)| *k != skip).map(|(_, p)| p.clone()).collect();
            if combine_partials(&two).is_ok_and(|s| verify_with_key(&pk, &msg, &s)) {
                exceptions += 1;
            }
            // the missing share signed another message, with and without
            // its digest relabelled to match
            for relabel in [false, true] {
                attempts += 1;
                let mut mixed = parts.clone();
                mixed[skip] = foreign[skip].clone();
                if relabel {
                    mixed[skip].msg_digest = Sha256::digest(&msg).into();
                }
                if combine_partials(&mixed).is_ok_and(|s| verify_with_key(&pk, &msg, &s)) {
                    exceptions += 1;
                }
            }
            attempts += 1;
            if verify_with_key(&pk, &msg, &parts[skip].point) {
                exceptions += 1;
            }
        }
    }
    report(
        5,
        "threshold necessity",
        exceptions == 0 && full_ok == 100,
        format!("{full_ok}/100 full combinations verify, {exceptions} exceptions in {attempts} partial or substituted attempts"),
    )
}

fn adversary_detection() -> Outcome {
    let mut lines = Vec::new();
    let mut pass = true;
    for b in Behavior::ALL {
        let mut cfg = SimConfig::new(16, 60 + b as u64);
        cfg.message_count = 25;
        cfg.wait_time_max_s = 2;
        cfg.adversaries = [3usize, 8, 13]
            .into_iter()
            .map(|node| guard_harness::AdversarySpec { node, behaviors: vec![(b, 1.0)] })
            .collect();
        let (out, _dir) = run(&cfg);
        let ids = sorted_ids(&out);
        let touched: BTreeSet<(String, u64, Option<Mode>)> = out
            .records
            .iter()
            .filter(|r| r.event == EventKind::Hop && r.detail.contains("adv:"))
            .map(|r| (r.detail_field("init").unwrap_or("").to_string(), r.search_seq.unwrap(), r.mode))
            .collect();
        let (mut through, mut caught, mut wrong_accepts, mut plain_wrong) = (0, 0, 0, 0);
        for r in searches(&out.records) {
            let key = (r.node_id.clone(), r.search_seq.unwrap(), r.mode);
            let correct = result_of(r) == Some(oracle(&ids, q_of(r)));
            let outcome = r.detail_field("outcome").unwrap_or("");
            match r.mode {
                Some(Mode::Auth) => {
                    if outcome == "accept" && !correct {
                        wrong_accepts += 1;
                    }
                    if touched.contains(&key) {
                        through += 1;
                        if matches!(outcome, "rejected" | "failed") {
                            caught += 1;
                        }
                    }
                }
                _ => {
                    if outcome == "ok" && !correct {
                        plain_wrong += 1;
                    }
                }
            }
        }
        let mut ok = through >= 50 && caught == through && wrong_accepts == 0;
        let mut line = format!("{b}: {caught}/{through} AUTH caught, {wrong_accepts} wrong accepts");
        if b == Behavior::Misdirect {
            ok &= plain_wrong >= 1;
            line.push_str(&format!(", {plain_wrong} silently wrong PLAIN results"));
        }
        pass &= ok;
        lines.push(line);
    }
    report(6, "adversary detection", pass, lines.join("; "))
}

fn replay() -> Outcome {
    let mut g = GuardedOverlay::new(24, 32, 77).unwrap();
    let ids = g.ids();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut replayed = 0;
    for _ in 0..20 {
        let initiator = ids[rng.random_range(0..ids.len())];
        let q = NumericalId(rng.next_u64());
        let run = g.auth_search(initiator, q).unwrap();
        assert!(run.verdict.is_accept());
        let exp = Expectation { initiator, query: q, nonce: run.nonce };
        if g.verify_at(initiator, &run.chain, &exp) == (Verdict::Reject { reason: RejectReason::ReplayedNonce, index: 0 }) {
            replayed += 1;
        }
    }
    report(7, "replay", replayed == 20, format!("{replayed}/20 resubmitted chains rejected as ReplayedNonce"))
}

fn guard_topology() -> Outcome {
    let g = GuardedOverlay::new(64, 32, 88).unwrap();
    let mut bad_nodes = 0;
    for id in g.ids() {
        let node = g.node(id).unwrap();
        let table = g.overlay().table(id).unwrap();
        let main_of = |e: &guard_core::skipgraph::NeighborEntry| g.node(e.numerical_id).unwrap().assignment.clone();
        let (left, right) = (main_of(table.left0().unwrap()), main_of(table.right0().unwrap()));
        let a = &node.assignment;
        let ok = a.guards[1].numerical_id == left.guards[0].numerical_id
            && a.guards[2].numerical_id == right.guards[0].numerical_id
            && a.names.side_left == left.names.main
            && a.names.side_right == right.names.main;
        if !ok {
            bad_nodes += 1;
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let mut bad_widths = Vec::new();
    for m in 1..=12usize {
        let key = PermutationKey::random(&mut rng, m).unwrap();
        let mut images = BTreeSet::new();
        let mut inverse_ok = true;
        for v in 0..(1u64 << m) {
            let name = NameId::from_u64(v, m).unwrap();
            let image = keyed_permutation(&key, &name).unwrap();
            inverse_ok &= keyed_permutation_inverse(&key, &image).unwrap() == name;
            images.insert(image.to_u64().unwrap());
        }
        if images.len() != 1 << m || !inverse_ok {
            bad_widths.push(m);
        }
    }
    report(
        8,
        "guard topology",
        bad_nodes == 0 && bad_widths.is_empty(),
        format!("{bad_nodes}/64 nodes with side guards off their neighbors' main guards; permutation non-bijective at m in {bad_widths:?} (scanned 1..=12)"),
    )
}

fn collusion() -> Outcome {
    let start = Instant::now();
    let r = collusion_mc(16, 4, 50_000, &mut ChaCha20Rng::seed_from_u64(9)).unwrap();
    let elapsed = start.elapsed();
    let oracle = (4.0 / 16.0) * (3.0 / 15.0) * (2.0 / 14.0);
    let sigma = (oracle * (1.0 - oracle) / 50_000.0f64).sqrt();
    let bound = (4.0f64 / 16.0).powi(3);
    let pass = (r.estimate - oracle).abs() <= 4.0 * sigma
        && r.estimate <= bound + 4.0 * sigma
        && (r.exact - oracle).abs() < 1e-12
        && elapsed < Duration::from_secs(60);
    report(
        9,
        "collusion Monte Carlo",
        pass,
        format!(
            "estimate {:.5} vs exact {oracle:.5} (|diff| = {:.2} sigma), bound {bound:.5}, {}",
            r.estimate,
            (r.estimate - oracle).abs() / sigma,
            secs(elapsed)
        ),
    )
}

fn pipeline_fidelity() -> Outcome {
    let start = Instant::now();
    let listing = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.conf");
    let parsed = load_config(&listing).unwrap();
    let values = (parsed.message_count, parsed.wait_time_max_s, parsed.message_length);

    let mut cfg = SimConfig::new(16, 2024);
    cfg.message_count = 20;
    cfg.time_scale = 1000;
    let (a, _da) = run(&cfg);
    let (b, _db) = run(&cfg);
    let bytes_a = std::fs::read(&a.merged_csv).unwrap();
    let identical = bytes_a == std::fs::read(&b.merged_csv).unwrap();
    let header_ok = String::from_utf8_lossy(&bytes_a).lines().next() == Some(HEADER.join(",").as_str());
    let schema_ok = read_csv_file(&a.merged_csv).is_ok();
    let (plain, auth) = (a.summary.mode(Mode::Plain), a.summary.mode(Mode::Auth));
    let lat = (plain.latency_us.value().unwrap_or(0.0), auth.latency_us.value().unwrap_or(0.0));
    let size = (plain.msg_bytes.value().unwrap_or(0.0), auth.msg_bytes.value().unwrap_or(0.0));
    let elapsed = start.elapsed();
    let pass = values == (1000, 5, 300)
        && identical
        && header_ok
        && schema_ok
        && auth.latency_us.count == 320
        && lat.1 >= lat.0
        && size.1 > size.0
        && elapsed < Duration::from_secs(120);
    report(
        10,
        "demo-pipeline fidelity",
        pass,
        format!(
            "config {values:?}, schema {}, rerun identical {identical}, latency AUTH {:.0}us vs PLAIN {:.0}us, msg_bytes AUTH {:.0} vs PLAIN {:.0}, {}",
            if header_ok && schema_ok { "ok" } else { "BAD" },
            lat.1,
            lat.0,
            size.1,
            size.0,
            secs(elapsed)
        ),
    )
}

#[test]
fn acceptance() {
    let mut all = Vec::new();
    all.extend(search_correctness());
    all.push(hop_scaling());
    all.push(mutation_soundness());
    all.push(threshold_necessity());
    all.push(adversary_detection());
    all.push(replay());
    all.push(guard_topology());
    all.push(collusion());
    all.push(pipeline_fidelity());
    let failed: Vec<String> =
        all.iter().filter(|o| !o.pass).map(|o| format!("{} {} ({})", o.id, o.name, o.detail)).collect();
    println!("acceptance: {}/{} criteria pass", all.len() - failed.len(), all.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
