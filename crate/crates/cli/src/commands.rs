//! Subcommand implementations. Each writes its artifacts into the
//! caller's output directory and nothing else.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use breathlink_core::analysis::{
    compensate_lag, estimate_lag, resample_align, window_scores, AnalysisError, ANALYSIS_RATE_HZ,
    DEFAULT_MAX_LAG_MS, SECTION_WINDOW_MS,
};
use breathlink_core::envelope::{envelope_for_phase, quantize_level, EnvelopeParams, Pattern};
use breathlink_core::sensing::{read_imu_csv, write_events_jsonl, SensingPipeline, IMU_RATE_HZ};
use breathlink_core::sensing::PhaseKind;
use breathlink_core::sim::run_closed_loop;
use breathlink_relay::server::RelayService;
use serde_json::json;

use crate::config::ScenarioConfig;
use crate::traces::{read_trace, write_respiration, write_trace};
use crate::CliError;

/// Envelope dump sample rate.
const ENVELOPE_DUMP_RATE_HZ: f64 = 50.0;

pub struct SimulateArgs {
    pub config: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub duration_ms: Option<u64>,
    pub pattern: Option<String>,
    pub seed: Option<u64>,
    pub leader_period_ms: Option<f64>,
    pub follower_period_ms: Option<f64>,
    pub coupling_gain: Option<f64>,
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::config(format!("output dir {dir:?}: {e}")))
}

fn parse_pattern(name: &str) -> Result<Pattern, CliError> {
    Pattern::parse_name(name).ok_or_else(|| {
        CliError::config(format!(
            "unknown pattern `{name}` (expected coupled, inversed or discrete)"
        ))
    })
}

pub fn simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::config(format!("config {path:?}: {e}")))?;
            toml::from_str::<ScenarioConfig>(&text)
                .map_err(|e| CliError::config(format!("config {path:?}: {e}")))?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(v) = args.duration_ms {
        cfg.duration_ms = v;
    }
    if let Some(v) = args.pattern {
        cfg.pattern = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.leader_period_ms {
        cfg.leader.period_ms = v;
    }
    if let Some(v) = args.follower_period_ms {
        cfg.follower.period_ms = v;
    }
    if let Some(v) = args.coupling_gain {
        cfg.follower.coupling_gain = v;
    }

    if cfg.duration_ms == 0 {
        return Err(CliError::config("duration_ms must be positive"));
    }
    let pattern = parse_pattern(&cfg.pattern)?;
    let leader = cfg.leader_params();
    let follower = cfg.follower_params();
    leader.validate().map_err(CliError::config)?;
    follower.validate().map_err(CliError::config)?;
    ensure_out_dir(&args.out_dir)?;

    let out = run_closed_loop(leader, follower, pattern, cfg.duration_ms)
        .map_err(CliError::runtime)?;

    let write = |name: &str, points: &[(u64, f64)]| -> Result<(), CliError> {
        let path = args.out_dir.join(name);
        let file = fs::File::create(&path)
            .map_err(|e| CliError::runtime(format!("write {path:?}: {e}")))?;
        write_trace(BufWriter::new(file), points)
            .map_err(|e| CliError::runtime(format!("write {path:?}: {e}")))
    };
    write("leader_trace.csv", &out.leader_trace)?;
    write("follower_trace.csv", &out.follower_trace)?;
    fs::write(args.out_dir.join("relay.log"), &out.relay_log)
        .map_err(|e| CliError::runtime(format!("write relay log: {e}")))?;

    // Correlate after the entrainment transient: skip the first third
    // of the run (capped at 30 s), mirroring how a session would be
    // scored after participants settle in.
    let settle_ms = (cfg.duration_ms / 3).min(30_000);
    let cut = |trace: &[(u64, f64)]| -> Vec<breathlink_core::analysis::TracePoint> {
        trace
            .iter()
            .filter(|(t, _)| *t >= settle_ms)
            .map(|&(t, v)| breathlink_core::analysis::TracePoint {
                t_ms: t as f64,
                value: v,
            })
            .collect()
    };
    let pair = resample_align(
        &cut(&out.leader_trace),
        &cut(&out.follower_trace),
        ANALYSIS_RATE_HZ,
    )
    .map_err(CliError::runtime)?;
    let report = breathlink_core::analysis::analyze(&pair, true).map_err(CliError::runtime)?;

    let report_json = json!({
        "config_sha256": cfg.sha256(),
        "seed": cfg.seed,
        "pattern": cfg.pattern,
        "duration_ms": cfg.duration_ms,
        "settle_skip_ms": settle_ms,
        "pearson_r": report.pearson_r,
        "lag_ms": report.lag_ms,
        "section": report.section,
        "relay_counters": {
            "routed": out.counters.routed,
            "undecodable_dropped": out.counters.undecodable_dropped,
            "unknown_source_dropped": out.counters.unknown_source_dropped,
        },
        "leader_events": out.leader_events.len(),
        "follower_events": out.follower_events.len(),
    });
    write_json(&args.out_dir.join("report.json"), &report_json)?;
    println!(
        "simulate: r={:.4} lag={} ms, artifacts in {:?}",
        report.pearson_r, report.lag_ms, args.out_dir
    );
    Ok(())
}

pub fn relay(listen: &str, log_dir: &Path) -> Result<(), CliError> {
    let runtime = tokio::runtime::Runtime::new()
        .map_err(|e| CliError::runtime(format!("tokio runtime: {e}")))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(listen)
            .await
            .map_err(|e| CliError::config(format!("cannot listen on {listen}: {e}")))?;
        let service = RelayService::new(log_dir)
            .map_err(|e| CliError::config(format!("log dir {log_dir:?}: {e}")))?;
        eprintln!("relay listening on {listen}, logs in {log_dir:?}");
        service
            .serve(listener, async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::runtime(format!("relay service: {e}")))
    })
}

pub fn ingest(input: &Path, out_dir: &Path, min_is_inspiration: bool) -> Result<(), CliError> {
    ensure_out_dir(out_dir)?;
    let file =
        fs::File::open(input).map_err(|e| CliError::config(format!("input {input:?}: {e}")))?;
    let frames = read_imu_csv(BufReader::new(file)).map_err(CliError::runtime)?;

    let mut pipeline = SensingPipeline::new(IMU_RATE_HZ, min_is_inspiration)
        .map_err(CliError::config)?;
    let mut samples = Vec::with_capacity(frames.len());
    let mut events = Vec::new();
    for frame in &frames {
        let (sample, event) = pipeline.push(frame).map_err(CliError::runtime)?;
        samples.push(sample);
        events.extend(event);
    }

    let resp_path = out_dir.join("respiration.csv");
    let resp = fs::File::create(&resp_path)
        .map_err(|e| CliError::runtime(format!("write {resp_path:?}: {e}")))?;
    write_respiration(BufWriter::new(resp), &samples)
        .map_err(|e| CliError::runtime(format!("write {resp_path:?}: {e}")))?;

    let events_path = out_dir.join("events.jsonl");
    let ev_file = fs::File::create(&events_path)
        .map_err(|e| CliError::runtime(format!("write {events_path:?}: {e}")))?;
    write_events_jsonl(BufWriter::new(ev_file), &events)
        .map_err(|e| CliError::runtime(format!("write {events_path:?}: {e}")))?;

    println!(
        "ingest: {} samples, {} phase events, artifacts in {out_dir:?}",
        samples.len(),
        events.len()
    );
    Ok(())
}

pub fn envelope(pattern: &str, t_ms: f64, depth: f64, out: &Path) -> Result<(), CliError> {
    let pattern = parse_pattern(pattern)?;
    if !(0.0..=1.0).contains(&depth) {
        return Err(CliError::config(format!("depth {depth} outside [0,1]")));
    }
    if t_ms <= 0.0 {
        return Err(CliError::config(format!(
            "phase duration {t_ms} ms must be positive"
        )));
    }
    let insp = EnvelopeParams {
        pattern,
        t_total_ms: t_ms,
        depth,
        phase_kind: PhaseKind::InspirationOnset,
    };
    let exp = EnvelopeParams {
        phase_kind: PhaseKind::ExpirationOnset,
        ..insp
    };

    let file = fs::File::create(out)
        .map_err(|e| CliError::runtime(format!("write {out:?}: {e}")))?;
    let mut w = BufWriter::new(file);
    let step_ms = 1000.0 / ENVELOPE_DUMP_RATE_HZ;
    (|| -> Result<(), CliError> {
        writeln!(w, "t_ms,level").map_err(CliError::runtime)?;
        let mut i = 0u64;
        loop {
            let t = i as f64 * step_ms;
            if t > 2.0 * t_ms {
                break;
            }
            // [0,T) is inspiration; [T,2T] is expiration local time.
            let level = if t < t_ms {
                envelope_for_phase(&insp, t)
            } else {
                envelope_for_phase(&exp, t - t_ms)
            }
            .map_err(CliError::runtime)?;
            let q = quantize_level(level).map_err(CliError::runtime)?;
            writeln!(w, "{},{q}", t as u64).map_err(CliError::runtime)?;
            i += 1;
        }
        w.flush().map_err(CliError::runtime)
    })()?;
    println!("envelope: wrote {out:?}");
    Ok(())
}

pub struct AnalyzeArgs {
    pub trace_a: PathBuf,
    pub trace_b: PathBuf,
    pub out_dir: PathBuf,
    pub raw: bool,
    pub lag_compensate: bool,
    pub start_ms: u64,
}

pub fn analyze_cmd_error(e: AnalysisError) -> CliError {
    CliError::runtime(e)
}

pub fn analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    ensure_out_dir(&args.out_dir)?;
    let load = |path: &Path| -> Result<Vec<breathlink_core::analysis::TracePoint>, CliError> {
        let file =
            fs::File::open(path).map_err(|e| CliError::config(format!("trace {path:?}: {e}")))?;
        let points = read_trace(BufReader::new(file), args.raw)
            .map_err(|e| CliError::runtime(format!("trace {path:?}: {e}")))?;
        Ok(points
            .into_iter()
            .filter(|p| p.t_ms >= args.start_ms as f64)
            .collect())
    };
    let a = load(&args.trace_a)?;
    let b = load(&args.trace_b)?;

    let pair = resample_align(&a, &b, ANALYSIS_RATE_HZ).map_err(analyze_cmd_error)?;
    let report =
        breathlink_core::analysis::analyze(&pair, args.lag_compensate).map_err(analyze_cmd_error)?;

    // Per-window correlation series on the lag-compensated pair.
    let windowed = if args.lag_compensate {
        let lag = estimate_lag(&pair, DEFAULT_MAX_LAG_MS).map_err(analyze_cmd_error)?;
        compensate_lag(&pair, lag)
    } else {
        pair
    };
    let scores = window_scores(&windowed).map_err(analyze_cmd_error)?;
    let windows_path = args.out_dir.join("windows.csv");
    let wf = fs::File::create(&windows_path)
        .map_err(|e| CliError::runtime(format!("write {windows_path:?}: {e}")))?;
    let mut w = BufWriter::new(wf);
    (|| -> std::io::Result<()> {
        writeln!(w, "start_ms,end_ms,r")?;
        for s in &scores {
            writeln!(w, "{},{},{}", s.start_ms, s.start_ms + SECTION_WINDOW_MS as f64, s.r)?;
        }
        w.flush()
    })()
    .map_err(|e| CliError::runtime(format!("write {windows_path:?}: {e}")))?;

    let report_json = json!({
        "trace_a": args.trace_a,
        "trace_b": args.trace_b,
        "raw_column": args.raw,
        "lag_compensated": args.lag_compensate,
        "start_ms": args.start_ms,
        "pearson_r": report.pearson_r,
        "lag_ms": report.lag_ms,
        "section": report.section,
    });
    write_json(&args.out_dir.join("report.json"), &report_json)?;
    println!(
        "analyze: r={:.4} lag={} ms, artifacts in {:?}",
        report.pearson_r, report.lag_ms, args.out_dir
    );
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::runtime(format!("serialize report: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::runtime(format!("write {path:?}: {e}")))
}
