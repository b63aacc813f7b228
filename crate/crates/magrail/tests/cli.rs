//! End-to-end checks of the command-line surface: exit codes, file
//! formats, and the map-build round trip.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_magrail")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn magrail")
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("magrail_cli").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn simulate(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "simulate",
        "--seed",
        "5",
        "--out-dir",
        dir.to_str().unwrap(),
        "--set",
        "length_m=3000",
        "--set",
        "profile=30:20",
        "--set",
        "noise_sigma=0.5",
    ];
    args.extend_from_slice(extra);
    let out = run(&args);
    assert!(out.status.success(), "simulate failed: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn print_config_dumps_effective_values() {
    let out = run(&["--print-config", "--set", "n_particles=1234", "simulate"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("n_particles = 1234"));
    assert!(text.contains("kernel = modified"));
}

#[test]
fn unknown_config_key_exits_2() {
    let out = run(&["--set", "particle_count=10", "simulate"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("particle_count"), "stderr: {err}");
}

#[test]
fn simulate_writes_all_artifacts_with_meta() {
    let dir = fresh_dir("simulate");
    simulate(&dir, &[]);
    for file in ["map.csv", "signal.csv", "truth.csv", "meta.txt"] {
        assert!(dir.join(file).exists(), "{file} missing");
    }
    let meta = std::fs::read_to_string(dir.join("meta.txt")).unwrap();
    assert!(meta.contains("command = simulate"));
    assert!(meta.contains("seed = 5"));
    assert!(meta.contains("config_sha256 = "));
}

#[test]
fn localise_warm_is_deterministic_and_tracks() {
    let dir = fresh_dir("warm");
    simulate(&dir, &[]);
    let map = dir.join("map.csv");
    let sig = dir.join("signal.csv");
    let mut outputs = Vec::new();
    for tag in ["r1", "r2"] {
        let out_dir = dir.join(tag);
        let out = run(&[
            "localise",
            "--map",
            map.to_str().unwrap(),
            "--signal",
            sig.to_str().unwrap(),
            "--mode",
            "warm",
            "--seed",
            "5",
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--set",
            "n_particles=2000",
            "--set",
            "x0_m=0",
            "--set",
            "v0_mps=20",
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(std::fs::read(out_dir.join("estimates.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "same seed must give identical estimates");
    let text = String::from_utf8(outputs[0].clone()).unwrap();
    assert!(text.lines().count() > 100);
    assert!(text.starts_with("t_s,x_m,v_mps,var_m2,lat_deg,lon_deg"));
}

#[test]
fn hybrid_mode_requires_velocity_channel() {
    let dir = fresh_dir("novel");
    simulate(&dir, &[]);
    // Strip the velocity column from the signal.
    let sig_text = std::fs::read_to_string(dir.join("signal.csv")).unwrap();
    let stripped: String = sig_text
        .lines()
        .map(|l| {
            let mut parts: Vec<&str> = l.split(',').collect();
            parts.truncate(4);
            parts.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n");
    let sig_path = dir.join("signal_nov.csv");
    std::fs::write(&sig_path, stripped + "\n").unwrap();

    let out = run(&[
        "localise",
        "--map",
        dir.join("map.csv").to_str().unwrap(),
        "--signal",
        sig_path.to_str().unwrap(),
        "--mode",
        "hybrid",
        "--out-dir",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("velocity"), "stderr: {err}");
}

#[test]
fn mismatched_dx_exits_2() {
    let dir = fresh_dir("dx");
    simulate(&dir, &[]);
    let out = run(&[
        "localise",
        "--map",
        dir.join("map.csv").to_str().unwrap(),
        "--signal",
        dir.join("signal.csv").to_str().unwrap(),
        "--mode",
        "warm",
        "--out-dir",
        dir.join("out").to_str().unwrap(),
        "--set",
        "dx_m=0.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("dx"), "stderr: {err}");
}

#[test]
fn map_build_round_trip_and_failure_modes() {
    let dir = fresh_dir("mapbuild");
    simulate(&dir, &[("--set"), ("noise_sigma=0")]);
    let rebuilt = dir.join("rebuilt.csv");
    let out = run(&[
        "map-build",
        "--signal",
        dir.join("signal.csv").to_str().unwrap(),
        "--truth",
        dir.join("truth.csv").to_str().unwrap(),
        "--out",
        rebuilt.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // The rebuilt map must reproduce the original field along the
    // traversed stretch, modulo the arclength rebase.
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rebase: f64 = stdout
        .lines()
        .find(|l| l.contains("rebased"))
        .and_then(|l| l.split("rebased by ").nth(1))
        .and_then(|s| s.split(' ').next())
        .and_then(|s| s.parse().ok())
        .expect("rebase note in output");
    let original = magrail::track::load_map(dir.join("map.csv")).unwrap();
    let rebuilt_map = magrail::track::load_map(&rebuilt).unwrap();
    let sd = {
        let xs: Vec<f64> = original.samples().iter().flat_map(|s| s.b).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64).sqrt()
    };
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for (i, smp) in rebuilt_map.samples().iter().enumerate() {
        let s_orig = rebase + i as f64 * rebuilt_map.dx();
        let want = original.lookup_field(s_orig).expect("within original map");
        for k in 0..3 {
            let d = smp.b[k] - want[k];
            sum_sq += d * d;
            count += 1;
        }
    }
    let rms = (sum_sq / count as f64).sqrt();
    assert!(rms < 0.01 * sd, "rebuilt map RMS {rms} vs sd {sd}");

    // Missing velocity channel: exit 2.
    let sig_text = std::fs::read_to_string(dir.join("signal.csv")).unwrap();
    let stripped: String = sig_text
        .lines()
        .map(|l| l.split(',').take(4).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("\n");
    let sig_nov = dir.join("signal_nov.csv");
    std::fs::write(&sig_nov, stripped + "\n").unwrap();
    let out = run(&[
        "map-build",
        "--signal",
        sig_nov.to_str().unwrap(),
        "--truth",
        dir.join("truth.csv").to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("velocity"));

    // Non-monotonic truth: exit 2 naming the monotonicity problem.
    let truth_text = std::fs::read_to_string(dir.join("truth.csv")).unwrap();
    let mut lines: Vec<String> = truth_text.lines().map(String::from).collect();
    let mid = lines.len() / 2;
    // Swap the two position values mid-file.
    let fix = |line: &str, x: f64| {
        let parts: Vec<&str> = line.split(',').collect();
        format!("{},{},{}", parts[0], x, parts[2])
    };
    lines[mid] = fix(&lines[mid], 10_000.0);
    let bad_truth = dir.join("truth_bad.csv");
    std::fs::write(&bad_truth, lines.join("\n") + "\n").unwrap();
    let out = run(&[
        "map-build",
        "--signal",
        dir.join("signal.csv").to_str().unwrap(),
        "--truth",
        bad_truth.to_str().unwrap(),
        "--out-dir",
        dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("monoton") || err.contains("increasing"),
        "stderr: {err}"
    );
}

#[test]
fn coldstart_study_emits_tables() {
    let dir = fresh_dir("study");
    let out = run(&[
        "coldstart-study",
        "--seed",
        "6",
        "--out-dir",
        dir.to_str().unwrap(),
        "--set",
        "length_m=8000",
        "--set",
        "profile=10:25",
        "--set",
        "starts=3",
        "--set",
        "k_max=3",
        "--set",
        "max_length_m=60",
        "--set",
        "align_metric=euclid",
        "--set",
        "noise_sigma=0.5",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let t1 = std::fs::read_to_string(dir.join("table1.csv")).unwrap();
    assert!(t1.starts_with("k,L_m"));
    assert_eq!(t1.lines().count(), 4); // header + k = 1..3
    let t2 = std::fs::read_to_string(dir.join("table2.csv")).unwrap();
    assert!(t2.starts_with("k,mean_m,std_m,min_m,max_m,not_found"));
    let lk = std::fs::read_to_string(dir.join("lk.csv")).unwrap();
    assert_eq!(lk.lines().count(), 1 + 3 * 3); // header + starts * k
}

#[test]
fn bench_reports_all_measurements() {
    let dir = fresh_dir("bench");
    let out = run(&[
        "bench",
        "--seed",
        "7",
        "--out-dir",
        dir.to_str().unwrap(),
        "--set",
        "length_m=4000",
        "--set",
        "n_particles=2000",
        "--set",
        "lookback_m=50",
        "--set",
        "align_metric=euclid",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.join("bench.txt")).unwrap();
    assert!(report.contains("real-time factor"));
    assert!(report.contains("pf scaling"));
    assert!(report.contains("cold-start search"));
    assert!(report.contains("machine:"));
}
