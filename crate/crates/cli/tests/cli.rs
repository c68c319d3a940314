use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn guard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guard")).args(args).output().expect("spawn guard")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.conf");
    std::fs::write(
        &p,
        format!("node_count = 8\nseed = 17\nmessage_count = 2\nwait_time_max_s = 2\noutput_dir = out\n{extra}"),
    )
    .unwrap();
    p
}

#[test]
fn run_then_verify_and_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = guard(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    let merged = dir.path().join("out/merged.csv");
    assert!(out.contains(&format!("merged: {}", merged.display())));
    assert!(out.lines().any(|l| l.starts_with("AUTH,16,16,0,0,")), "{out}");

    let params = dir.path().join("out/params.txt");
    let chain = dir.path().join("out/chains/node_0000.chain");
    let o = guard(&["verify", "--chain", chain.to_str().unwrap(), "--params", params.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "Accept");

    // a different expected query makes the same proofs mismatch
    let text = std::fs::read_to_string(&chain).unwrap();
    let mutated: String = text
        .lines()
        .map(|l| match l.strip_prefix("query=") {
            Some(q) => format!("query={:016x}\n", u64::from_str_radix(q, 16).unwrap() ^ 1),
            None => format!("{l}\n"),
        })
        .collect();
    let bad = dir.path().join("bad.chain");
    std::fs::write(&bad, mutated).unwrap();
    let o = guard(&["verify", "--chain", bad.to_str().unwrap(), "--params", params.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).starts_with("Reject(FieldMismatch)"), "{}", stdout(&o));

    let cut = dir.path().join("cut.chain");
    std::fs::write(&cut, &text[..text.len() - 41]).unwrap();
    let o = guard(&["verify", "--chain", cut.to_str().unwrap(), "--params", params.to_str().unwrap()]);
    assert_eq!(code(&o), 2);

    let o = guard(&["metrics", "--csv", merged.to_str().unwrap(), "--query", "msgsize"]);
    assert_eq!(code(&o), 0);
    let table = stdout(&o);
    let avg = |mode: &str| -> f64 {
        let line = table.lines().find(|l| l.starts_with(mode)).unwrap();
        line.rsplit(',').next().unwrap().parse().unwrap()
    };
    assert!(avg("AUTH") > avg("PLAIN"), "{table}");
    for q in ["latency", "compute", "hops", "rejects"] {
        assert_eq!(code(&guard(&["metrics", "--csv", merged.to_str().unwrap(), "--query", q])), 0);
    }
    assert_eq!(code(&guard(&["metrics", "--csv", merged.to_str().unwrap(), "--query", "bogus"])), 2);
}

#[test]
fn config_and_phase_failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("noseed.conf");
    std::fs::write(&p, "node_count = 8\n").unwrap();
    let o = guard(&["run", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));

    let cfg = write_config(dir.path(), "init_fault.3 = bad_table_proof\n");
    let o = guard(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Initialization"));

    assert_eq!(code(&guard(&["run", "--config", "/nonexistent/guard.conf"])), 2);
}

#[test]
fn adversarial_run_reports_rejects() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "query_targets = any\nadv.2 = falsify\nadv.5 = manipulate\n");
    let o = guard(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let auth = stdout(&o).lines().find(|l| l.starts_with("AUTH,")).unwrap().to_string();
    let rejected: u64 = auth.split(',').nth(3).unwrap().parse().unwrap();
    assert!(rejected > 0, "{auth}");
}

#[test]
fn metrics_on_a_hand_written_log() {
    let dir = tempfile::tempdir().unwrap();
    let header = "ts_us,node_id,event,search_seq,mode,nonce_hex,q_hex,hop_count,latency_us,msg_bytes,compute_us,detail\n";
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, header).unwrap();
    let o = guard(&["metrics", "--csv", empty.to_str().unwrap(), "--query", "latency"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "mode,searches,avg_latency_us\n");

    let csv = dir.path().join("fixture.csv");
    std::fs::write(
        &csv,
        format!(
            "{header}\
             1,00000000000000aa,SEARCH_DONE,1,PLAIN,,0000000000000001,1,100,,,outcome=ok\n\
             2,00000000000000aa,SEARCH_DONE,2,PLAIN,,0000000000000001,1,200,,,outcome=ok\n\
             3,00000000000000bb,SEARCH_DONE,1,PLAIN,,0000000000000002,2,600,,,outcome=ok\n"
        ),
    )
    .unwrap();
    let o = guard(&["metrics", "--csv", csv.to_str().unwrap(), "--query", "latency"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "mode,searches,avg_latency_us\nPLAIN,3,300.0\n");

    let wrong = dir.path().join("wrong.csv");
    std::fs::write(&wrong, "a,b\n1,2\n").unwrap();
    assert_eq!(code(&guard(&["metrics", "--csv", wrong.to_str().unwrap(), "--query", "latency"])), 2);
}

#[test]
fn collusion_prints_estimate_and_oracle() {
    let o = guard(&["collusion", "--n", "16", "--f", "4", "--trials", "20000", "--seed", "1"]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    let row: Vec<&str> = out.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..3], &["16", "4", "20000"]);
    assert_eq!(row[5], "0.007143");
    assert_eq!(row[8], "full");
    assert_eq!(code(&guard(&["collusion", "--n", "16", "--f", "16", "--trials", "10", "--seed", "1"])), 2);
    // no subcommand is a usage error
    assert_eq!(code(&guard(&[])), 2);
}
