//! Black-box tests of the `breathlink` binary: artifacts, exit codes
//! and determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn breathlink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_breathlink"))
        .args(args)
        .output()
        .expect("spawn breathlink")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn simulate_into(dir: &Path, extra: &[&str]) {
    let dir_s = dir.to_str().unwrap();
    let mut args = vec!["simulate", "--out-dir", dir_s, "--duration-ms", "30000"];
    args.extend_from_slice(extra);
    assert_exit(&breathlink(&args), 0);
}

#[test]
fn simulate_writes_artifacts_and_report() {
    let dir = tempfile::tempdir().unwrap();
    simulate_into(dir.path(), &[]);
    for name in ["leader_trace.csv", "follower_trace.csv", "relay.log", "report.json"] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 1);
    assert_eq!(report["duration_ms"], 30000);
    assert!(report["config_sha256"].as_str().unwrap().len() == 64);
    assert!(report["pearson_r"].as_f64().unwrap().abs() <= 1.0);
    // Relay log holds complete 21-byte records.
    let log = fs::read(dir.path().join("relay.log")).unwrap();
    assert!(!log.is_empty());
    assert_eq!(log.len() % 21, 0);
}

#[test]
fn simulate_default_scenario_synchronizes() {
    let dir = tempfile::tempdir().unwrap();
    let dir_s = dir.path().to_str().unwrap();
    assert_exit(&breathlink(&["simulate", "--out-dir", dir_s]), 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(report["pearson_r"].as_f64().unwrap() >= 0.75);
    assert!(report["section"].is_array());

    // The simulate outputs analyzed back through the CLI agree.
    let out_dir = tempfile::tempdir().unwrap();
    let leader = dir.path().join("leader_trace.csv");
    let follower = dir.path().join("follower_trace.csv");
    assert_exit(
        &breathlink(&[
            "analyze",
            "--trace-a",
            leader.to_str().unwrap(),
            "--trace-b",
            follower.to_str().unwrap(),
            "--out-dir",
            out_dir.path().to_str().unwrap(),
        ]),
        0,
    );
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(out_dir.path().join("report.json")).unwrap(),
    )
    .unwrap();
    assert!(report["pearson_r"].as_f64().unwrap() >= 0.75);
    assert!(out_dir.path().join("windows.csv").exists());
}

#[test]
fn simulate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    simulate_into(a.path(), &["--seed", "7"]);
    simulate_into(b.path(), &["--seed", "7"]);
    for name in ["leader_trace.csv", "follower_trace.csv", "relay.log"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name} differs between identical runs"
        );
    }
    // A different seed must actually change the traces.
    let c = tempfile::tempdir().unwrap();
    simulate_into(c.path(), &["--seed", "8"]);
    assert_ne!(
        fs::read(a.path().join("leader_trace.csv")).unwrap(),
        fs::read(c.path().join("leader_trace.csv")).unwrap()
    );
}

#[test]
fn simulate_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let dir_s = dir.path().to_str().unwrap();
    assert_exit(
        &breathlink(&["simulate", "--out-dir", dir_s, "--duration-ms", "0"]),
        2,
    );
    assert_exit(
        &breathlink(&["simulate", "--out-dir", dir_s, "--pattern", "wavy"]),
        2,
    );
    // Out-of-range breath period is a config error too.
    assert_exit(
        &breathlink(&["simulate", "--out-dir", dir_s, "--leader-period-ms", "500"]),
        2,
    );
    // Unknown key in the config file.
    let cfg = dir.path().join("scenario.toml");
    fs::write(&cfg, "duratoin_ms = 90000\n").unwrap();
    assert_exit(
        &breathlink(&["simulate", "--out-dir", dir_s, "--config", cfg.to_str().unwrap()]),
        2,
    );
}

#[test]
fn simulate_reads_scenario_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scenario.toml");
    fs::write(
        &cfg,
        "duration_ms = 20000\nseed = 11\n[follower]\ncoupling_gain = 0.0\n",
    )
    .unwrap();
    let dir_s = dir.path().to_str().unwrap();
    assert_exit(
        &breathlink(&[
            "simulate",
            "--out-dir",
            dir_s,
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "12",
        ]),
        0,
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    // CLI override wins over the file value.
    assert_eq!(report["seed"], 12);
    assert_eq!(report["duration_ms"], 20000);
}

#[test]
fn envelope_dumps_one_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env.csv");
    assert_exit(
        &breathlink(&[
            "envelope",
            "--pattern",
            "coupled",
            "--t-ms",
            "2000",
            "--depth",
            "1.0",
            "--out",
            out.to_str().unwrap(),
        ]),
        0,
    );
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<(u64, u8)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let (t, v) = l.split_once(',').unwrap();
            (t.parse().unwrap(), v.parse().unwrap())
        })
        .collect();
    // 50 Hz over a 2T = 4 s cycle, endpoints included.
    assert_eq!(rows.len(), 201);
    assert_eq!(rows[0], (0, 0));
    // Full depth reaches level 100 exactly at the end of inspiration.
    assert_eq!(rows.iter().find(|(t, _)| *t == 2000).unwrap().1, 100);
    assert!(rows.iter().all(|(_, v)| *v <= 100));
}

#[test]
fn envelope_discrete_expiration_is_silent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env.csv");
    assert_exit(
        &breathlink(&[
            "envelope",
            "--pattern",
            "discrete",
            "--t-ms",
            "2000",
            "--out",
            out.to_str().unwrap(),
        ]),
        0,
    );
    let text = fs::read_to_string(&out).unwrap();
    for line in text.lines().skip(1) {
        let (t, v) = line.split_once(',').unwrap();
        let t: u64 = t.parse().unwrap();
        if t >= 2000 {
            assert_eq!(v, "0", "expiration row at t={t} not silent");
        }
    }
}

#[test]
fn envelope_depth_zero_is_flat_and_bad_pattern_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env.csv");
    assert_exit(
        &breathlink(&[
            "envelope",
            "--pattern",
            "inversed",
            "--t-ms",
            "1500",
            "--depth",
            "0",
            "--out",
            out.to_str().unwrap(),
        ]),
        0,
    );
    let text = fs::read_to_string(&out).unwrap();
    for line in text.lines().skip(1) {
        assert!(line.ends_with(",0"), "nonzero level at depth 0: {line}");
    }
    assert_exit(
        &breathlink(&[
            "envelope",
            "--pattern",
            "wavy",
            "--t-ms",
            "1500",
            "--out",
            out.to_str().unwrap(),
        ]),
        2,
    );
}

fn write_imu_sine(path: &Path, duration_s: f64, period_s: f64) {
    let mut text = String::from("t_ms,ax_f,ay_f,az_f,ax_b,ay_b,az_b\n");
    let n = (duration_s * 100.0) as u64;
    for i in 0..n {
        let t = i as f64 / 100.0;
        let az = 0.3 * (2.0 * std::f64::consts::PI * t / period_s).sin();
        text.push_str(&format!("{},0,0,{az},0,0,0\n", i * 10));
    }
    fs::write(path, text).unwrap();
}

#[test]
fn ingest_clean_sine_emits_alternating_events() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("imu.csv");
    write_imu_sine(&input, 60.0, 4.0);
    let dir_s = dir.path().to_str().unwrap();
    assert_exit(
        &breathlink(&["ingest", "--input", input.to_str().unwrap(), "--out-dir", dir_s]),
        0,
    );
    let resp = fs::read_to_string(dir.path().join("respiration.csv")).unwrap();
    assert!(resp.starts_with("t_ms,az_raw,az_filt\n"));
    assert_eq!(resp.lines().count(), 6001);

    let events: Vec<serde_json::Value> = fs::read_to_string(dir.path().join("events.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // ~15 cycles of 4 s in 60 s → ~30 alternating onsets.
    assert!(events.len() >= 26, "only {} events", events.len());
    for pair in events.windows(2) {
        assert_ne!(pair[0]["kind"], pair[1]["kind"], "events failed to alternate");
    }
    // Half-period spacing within a generous tolerance, past the
    // filter's warm-up transient.
    for pair in events[1..].windows(2) {
        let dt = pair[1]["t_ms"].as_u64().unwrap() - pair[0]["t_ms"].as_u64().unwrap();
        assert!((1500..=2500).contains(&dt), "onset spacing {dt} ms");
    }
}

#[test]
fn ingest_error_paths() {
    let dir = tempfile::tempdir().unwrap();
    let dir_s = dir.path().to_str().unwrap();

    // Wrong header: exit 3, line 1 named.
    let bad_header = dir.path().join("bad_header.csv");
    fs::write(&bad_header, "time,a,b,c,d,e,f\n0,0,0,0,0,0,0\n").unwrap();
    let out = breathlink(&["ingest", "--input", bad_header.to_str().unwrap(), "--out-dir", dir_s]);
    assert_exit(&out, 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    // Malformed row: exit 3 with its row number.
    let bad_row = dir.path().join("bad_row.csv");
    fs::write(
        &bad_row,
        "t_ms,ax_f,ay_f,az_f,ax_b,ay_b,az_b\n0,0,0,0,0,0,0\n10,0,0,oops,0,0,0\n",
    )
    .unwrap();
    let out = breathlink(&["ingest", "--input", bad_row.to_str().unwrap(), "--out-dir", dir_s]);
    assert_exit(&out, 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));

    // Header only: empty outputs, success.
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "t_ms,ax_f,ay_f,az_f,ax_b,ay_b,az_b\n").unwrap();
    assert_exit(
        &breathlink(&["ingest", "--input", empty.to_str().unwrap(), "--out-dir", dir_s]),
        0,
    );
    assert_eq!(
        fs::read_to_string(dir.path().join("respiration.csv")).unwrap(),
        "t_ms,az_raw,az_filt\n"
    );
    assert_eq!(fs::read_to_string(dir.path().join("events.jsonl")).unwrap(), "");
}

#[test]
fn analyze_trace_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.csv");
    let mut text = String::from("t_ms,az\n");
    for i in 0..4000u64 {
        let t = i as f64 / 100.0;
        text.push_str(&format!("{},{}\n", i * 10, (t * 1.3).sin()));
    }
    fs::write(&trace, text).unwrap();
    let dir_s = dir.path().to_str().unwrap();
    let t_s = trace.to_str().unwrap();
    assert_exit(
        &breathlink(&["analyze", "--trace-a", t_s, "--trace-b", t_s, "--out-dir", dir_s]),
        0,
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert!((report["pearson_r"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(report["lag_ms"], 0);
}

#[test]
fn analyze_disjoint_spans_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    fs::write(&a, "t_ms,az\n0,0.0\n10,1.0\n20,0.0\n").unwrap();
    fs::write(&b, "t_ms,az\n5000,0.0\n5010,1.0\n5020,0.0\n").unwrap();
    assert_exit(
        &breathlink(&[
            "analyze",
            "--trace-a",
            a.to_str().unwrap(),
            "--trace-b",
            b.to_str().unwrap(),
            "--out-dir",
            dir.path().to_str().unwrap(),
        ]),
        3,
    );
}
