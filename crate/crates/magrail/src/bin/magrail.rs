//! Command-line interface: synthetic data generation, map building, replay
//! localisation, cold-start studies, and throughput benchmarks.
//!
//! Exit codes: 0 success, 2 validation failure, 3 unrecoverable filter
//! collapse during warm/cold replay.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use magrail::align::Metric;
use magrail::config::RunConfig;
use magrail::eval::{min_length_study, ErrorMode};
use magrail::hybrid::{align_top3, localise, save_estimates, save_events, EstimatePoint};
use magrail::pf::{FilterState, PfError};
use magrail::rng::{derive_seed, StreamRng};
use magrail::signal::{load_signal, TimeSignal};
use magrail::spacify::{invert_time, spacify};
use magrail::synth::{gen_map, load_truth, save_truth, simulate_run};
use magrail::track::{load_map, save_map, MapSample, TrackMap, EARTH_RADIUS_M};

#[derive(Parser)]
#[command(
    name = "magrail",
    version,
    about = "Magnetic-fingerprint rail vehicle localisation toolkit"
)]
struct Cli {
    /// Flat key=value configuration file; CLI flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. --set n_particles=5000.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Master seed; every stochastic component derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread cap. Results are identical for any value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory for generated files.
    #[arg(long, default_value = ".", global = true)]
    out_dir: PathBuf,

    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Known start: particles seeded around x0_m.
    Warm,
    /// Unknown start: particles uniform over the whole track.
    Cold,
    /// Alignment-initialised particle filter with automatic restarts.
    Hybrid,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic map plus a sensor replay with ground truth.
    Simulate,
    /// Rebuild a magnetic map from a recorded signal and its trajectory.
    MapBuild {
        #[arg(long)]
        signal: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Output map path; defaults to <out-dir>/map.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a signal against a map and write the estimate stream.
    Localise {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        signal: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
    },
    /// Minimum-subsequence-length study over seeded cold-start points.
    ColdstartStudy {
        /// Map file; generated from the config when omitted.
        #[arg(long)]
        map: Option<PathBuf>,
    },
    /// Filter throughput and alignment latency measurements.
    Bench {
        /// Map file; generated from the config when omitted.
        #[arg(long)]
        map: Option<PathBuf>,
    },
}

struct CliError {
    code: i32,
    msg: String,
}

fn validation(msg: impl Into<String>) -> CliError {
    CliError { code: 2, msg: msg.into() }
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError { code: 3, msg: msg.into() }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        validation(format!("io error: {e}"))
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e.msg);
            std::process::exit(e.code);
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| validation(format!("thread pool: {e}")))?;
    }

    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path).map_err(|e| validation(e.to_string()))?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(cli.set.iter().map(String::as_str))
        .map_err(|e| validation(e.to_string()))?;
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())
            .map_err(|e| validation(e.to_string()))?;
    }
    cfg.validate().map_err(|e| validation(e.to_string()))?;

    if cli.print_config {
        print!("{}", cfg.to_text());
        return Ok(());
    }

    std::fs::create_dir_all(&cli.out_dir)?;
    let command_name = match &cli.command {
        Command::Simulate => "simulate",
        Command::MapBuild { .. } => "map-build",
        Command::Localise { .. } => "localise",
        Command::ColdstartStudy { .. } => "coldstart-study",
        Command::Bench { .. } => "bench",
    };
    write_meta(&cli.out_dir, command_name, &cfg, cli.threads)?;

    match cli.command {
        Command::Simulate => cmd_simulate(&cli.out_dir, &cfg),
        Command::MapBuild { signal, truth, out } => {
            let out = out.unwrap_or_else(|| cli.out_dir.join("map.csv"));
            cmd_map_build(&signal, &truth, &out, &cfg)
        }
        Command::Localise { map, signal, mode } => {
            cmd_localise(&map, &signal, mode, &cli.out_dir, &cfg)
        }
        Command::ColdstartStudy { map } => cmd_coldstart_study(map.as_deref(), &cli.out_dir, &cfg),
        Command::Bench { map } => cmd_bench(map.as_deref(), &cli.out_dir, &cfg),
    }
}

fn write_meta(
    out_dir: &Path,
    command: &str,
    cfg: &RunConfig,
    threads: Option<usize>,
) -> Result<(), CliError> {
    let mut f = std::fs::File::create(out_dir.join("meta.txt"))?;
    writeln!(f, "command = {command}")?;
    writeln!(f, "version = {}", env!("CARGO_PKG_VERSION"))?;
    writeln!(f, "seed = {}", cfg.seed)?;
    writeln!(f, "config_sha256 = {}", cfg.sha256_hex())?;
    writeln!(
        f,
        "threads = {}",
        threads.map_or_else(|| "default".into(), |t| t.to_string())
    )?;
    Ok(())
}

fn cmd_simulate(out_dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let spec = cfg.synth_spec().map_err(|e| validation(e.to_string()))?;
    let map = gen_map(&spec).map_err(|e| validation(e.to_string()))?;
    let run = cfg.run_spec().map_err(|e| validation(e.to_string()))?;
    let (sig, truth) = simulate_run(&map, &run).map_err(|e| validation(e.to_string()))?;

    let map_path = out_dir.join("map.csv");
    let sig_path = out_dir.join("signal.csv");
    let truth_path = out_dir.join("truth.csv");
    save_map(&map, &map_path).map_err(|e| validation(e.to_string()))?;
    magrail::signal::save_signal(&sig, &sig_path).map_err(|e| validation(e.to_string()))?;
    save_truth(&truth, &truth_path)?;
    println!(
        "simulate: map {} samples over {:.0} m, run {} samples at {} Hz",
        map.len(),
        map.length(),
        sig.len(),
        cfg.sensor_rate_hz
    );
    println!(
        "wrote {}, {}, {}",
        map_path.display(),
        sig_path.display(),
        truth_path.display()
    );
    Ok(())
}

fn cmd_map_build(
    signal_path: &Path,
    truth_path: &Path,
    out: &Path,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    let sig = load_signal(signal_path).map_err(|e| validation(e.to_string()))?;
    if sig.v.is_none() {
        return Err(validation("signal has no velocity channel"));
    }
    let truth = load_truth(truth_path).map_err(|e| validation(e.to_string()))?;

    // Pair every signal sample with its trajectory position.
    let positions: Vec<f64> = (0..sig.len())
        .map(|i| {
            truth.position_at(sig.time_at(i)).ok_or_else(|| {
                validation(format!("truth does not cover signal time {}", sig.time_at(i)))
            })
        })
        .collect::<Result<_, _>>()?;
    let times: Vec<f64> = (0..sig.len()).map(|i| sig.time_at(i)).collect();
    let tmap = invert_time(&positions, &times)
        .map_err(|e| validation(format!("trajectory not usable for map building: {e}")))?;

    let dx = cfg.dx_m;
    let (x_lo, x_hi) = tmap.domain();
    let s_base = (x_lo / dx).ceil() * dx;
    let count = ((x_hi - s_base) / dx).floor() as usize + 1;
    if count < 2 {
        return Err(validation(format!(
            "trajectory covers {:.2} m, not enough for two map samples at dx = {dx}",
            x_hi - x_lo
        )));
    }

    let bearing = cfg.anchor_bearing_deg.to_radians();
    let lat0 = cfg.anchor_lat_deg.to_radians();
    let deg = 180.0 / std::f64::consts::PI;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let x_abs = s_base + i as f64 * dx;
        let t = tmap
            .query(x_abs.clamp(x_lo, x_hi))
            .map_err(|e| validation(e.to_string()))?;
        let b = sig.field_at(t).map_err(|e| validation(e.to_string()))?;
        let s = i as f64 * dx;
        samples.push(MapSample {
            s,
            lat: cfg.anchor_lat_deg + deg * s * bearing.cos() / EARTH_RADIUS_M,
            lon: cfg.anchor_lon_deg + deg * s * bearing.sin() / (EARTH_RADIUS_M * lat0.cos()),
            b,
        });
    }
    let map = TrackMap::new(samples).map_err(|e| validation(e.to_string()))?;
    save_map(&map, out).map_err(|e| validation(e.to_string()))?;
    println!(
        "map-build: {} samples at dx = {dx} m; arclength rebased by {:.3} m",
        map.len(),
        s_base
    );
    println!("wrote {}", out.display());
    Ok(())
}

/// Aggregates sensor samples into filter-rate measurement blocks and steps
/// the filter through them.
fn replay_filter(
    map: &TrackMap,
    sig: &TimeSignal,
    cfg: &RunConfig,
    mut state: FilterState,
) -> Result<Vec<EstimatePoint>, CliError> {
    let pf = cfg.pf_config();
    let ratio = pf.dt / sig.dt;
    let spu = ratio.round() as usize;
    if spu < 1 || (ratio - spu as f64).abs() > 1e-3 {
        return Err(validation(format!(
            "pf_dt_s {} is not a multiple of the sample interval {}",
            pf.dt, sig.dt
        )));
    }
    let mut out = Vec::new();
    for block in 0..sig.len() / spu {
        let lo = block * spu;
        let hi = lo + spu;
        let mut z = [0.0f64; 3];
        for sample in &sig.b[lo..hi] {
            z[0] += sample[0];
            z[1] += sample[1];
            z[2] += sample[2];
        }
        let inv = 1.0 / spu as f64;
        let z = [z[0] * inv, z[1] * inv, z[2] * inv];
        match state.step(map, &z, &pf) {
            Ok(est) => out.push(EstimatePoint {
                t: sig.time_at(hi - 1),
                x_hat: est.x_hat,
                v_hat: est.v_hat,
                var_x: est.var_x,
            }),
            Err(PfError::TotalCollapse) => {
                return Err(runtime(format!(
                    "filter collapsed at t = {:.2} s: no particle retains support",
                    sig.time_at(hi - 1)
                )));
            }
            Err(e) => return Err(validation(e.to_string())),
        }
    }
    Ok(out)
}

fn cmd_localise(
    map_path: &Path,
    signal_path: &Path,
    mode: Mode,
    out_dir: &Path,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    let map = load_map(map_path).map_err(|e| validation(e.to_string()))?;
    if (map.dx() - cfg.dx_m).abs() > 1e-9 * cfg.dx_m {
        return Err(validation(format!(
            "map spacing {} does not match configured dx_m {}",
            map.dx(),
            cfg.dx_m
        )));
    }
    let sig = load_signal(signal_path).map_err(|e| validation(e.to_string()))?;

    let est_path = out_dir.join("estimates.csv");
    let events_path = out_dir.join("events.csv");
    match mode {
        Mode::Warm => {
            let state = FilterState::init_local(
                &map,
                cfg.x0_m,
                cfg.spread_m,
                cfg.v0_mps,
                cfg.v_spread_mps,
                cfg.n_particles,
                cfg.filter_seed(),
            );
            let estimates = replay_filter(&map, &sig, cfg, state)?;
            save_estimates(&estimates, &map, &est_path)?;
            save_events(&[], &events_path)?;
            println!("localise warm: {} estimates", estimates.len());
        }
        Mode::Cold => {
            let state = FilterState::init_uniform(
                &map,
                cfg.n_particles,
                (cfg.v_prior_min_mps, cfg.v_prior_max_mps),
                cfg.filter_seed(),
            );
            let estimates = replay_filter(&map, &sig, cfg, state)?;
            save_estimates(&estimates, &map, &est_path)?;
            save_events(&[], &events_path)?;
            println!("localise cold: {} estimates", estimates.len());
        }
        Mode::Hybrid => {
            let hybrid_cfg = cfg.hybrid_config();
            let out = localise(&map, &sig, &hybrid_cfg).map_err(|e| validation(e.to_string()))?;
            save_estimates(&out.estimates, &map, &est_path)?;
            save_events(&out.events, &events_path)?;
            println!(
                "localise hybrid: {} estimates, {} events",
                out.estimates.len(),
                out.events.len()
            );
        }
    }
    println!("wrote {}, {}", est_path.display(), events_path.display());
    Ok(())
}

fn cmd_coldstart_study(
    map_path: Option<&Path>,
    out_dir: &Path,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    let map = match map_path {
        Some(p) => load_map(p).map_err(|e| validation(e.to_string()))?,
        None => {
            let spec = cfg.synth_spec().map_err(|e| validation(e.to_string()))?;
            gen_map(&spec).map_err(|e| validation(e.to_string()))?
        }
    };

    let base_run = cfg.run_spec().map_err(|e| validation(e.to_string()))?;
    let run_distance = {
        let total = magrail::synth::profile_duration(&base_run.profile);
        // Upper bound on distance, used to keep starts inside the map.
        let v_max = base_run
            .profile
            .iter()
            .map(|p| p.target.abs())
            .fold(0.0f64, f64::max);
        total * v_max
    };
    let margin = 50.0;
    let usable = map.length() - run_distance - 2.0 * margin;
    if usable <= 0.0 {
        return Err(validation(format!(
            "map of {:.0} m cannot host a {:.0} m run with margins",
            map.length(),
            run_distance
        )));
    }

    let k_values: Vec<usize> = (1..=cfg.k_max).collect();
    let mut lengths = Vec::new();
    let mut l = cfg.min_length_m;
    while l <= cfg.max_length_m + 1e-9 {
        lengths.push(l);
        l += cfg.length_step_m;
    }

    let starts_rng = StreamRng::new(derive_seed(cfg.seed, 5));
    let mut per_start: Vec<(f64, Vec<(usize, Option<f64>)>)> = Vec::new();
    let lk_path = out_dir.join("lk.csv");
    let mut lk = std::fs::File::create(&lk_path)?;
    writeln!(lk, "start_m,k,L_m")?;
    for s_idx in 0..cfg.starts {
        let u = starts_rng.uniform(s_idx as u64, 0);
        let start_s = margin + u * usable;
        let mut run = base_run.clone();
        run.start_s = start_s;
        run.seed = derive_seed(base_run.seed, s_idx as u64);
        let (sig, truth) = simulate_run(&map, &run).map_err(|e| validation(e.to_string()))?;
        let study = min_length_study(
            &map,
            &sig,
            &truth,
            &k_values,
            &lengths,
            cfg.metric(),
            cfg.threshold_m,
            ErrorMode::Geo,
        )
        .map_err(|e| validation(e.to_string()))?;
        for (k, l_k) in &study.l_of_k {
            match l_k {
                Some(v) => writeln!(lk, "{start_s:.2},{k},{v}")?,
                None => writeln!(lk, "{start_s:.2},{k},>{}", cfg.max_length_m)?,
            }
        }
        println!(
            "start {:>2} at {:>9.1} m: {}",
            s_idx,
            start_s,
            study
                .l_of_k
                .iter()
                .map(|(k, l)| match l {
                    Some(v) => format!("L({k})={v}"),
                    None => format!("L({k})=>{}", cfg.max_length_m),
                })
                .collect::<Vec<_>>()
                .join(" ")
        );
        per_start.push((start_s, study.l_of_k));
    }

    // Worst case over the start points per k, and the distribution.
    let t1_path = out_dir.join("table1.csv");
    let mut t1 = std::fs::File::create(&t1_path)?;
    writeln!(t1, "k,L_m")?;
    let t2_path = out_dir.join("table2.csv");
    let mut t2 = std::fs::File::create(&t2_path)?;
    writeln!(t2, "k,mean_m,std_m,min_m,max_m,not_found")?;
    for k in &k_values {
        let values: Vec<f64> = per_start
            .iter()
            .filter_map(|(_, lk)| lk.iter().find(|(kk, _)| kk == k).and_then(|(_, l)| *l))
            .collect();
        let not_found = per_start.len() - values.len();
        if values.is_empty() {
            writeln!(t1, "{k},>{}", cfg.max_length_m)?;
            writeln!(t2, "{k},,,,,{not_found}")?;
            continue;
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var =
            values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if not_found == 0 {
            writeln!(t1, "{k},{max}")?;
        } else {
            writeln!(t1, "{k},>{}", cfg.max_length_m)?;
        }
        writeln!(t2, "{k},{mean:.2},{:.2},{min},{max},{not_found}", var.sqrt())?;
    }
    println!(
        "wrote {}, {}, {}",
        lk_path.display(),
        t1_path.display(),
        t2_path.display()
    );
    Ok(())
}

fn machine_specs() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let mem_gb = std::fs::read_to_string("/proc/meminfo")
        .ok()
        .and_then(|s| {
            s.lines().find(|l| l.starts_with("MemTotal")).and_then(|l| {
                l.split_whitespace()
                    .nth(1)
                    .and_then(|kb| kb.parse::<f64>().ok())
            })
        })
        .map_or_else(|| "?".into(), |kb| format!("{:.1}", kb / 1024.0 / 1024.0));
    format!(
        "{model}; {} logical cores; {mem_gb} GiB RAM",
        std::thread::available_parallelism().map_or(0, |n| n.get())
    )
}

fn cmd_bench(map_path: Option<&Path>, out_dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let map = match map_path {
        Some(p) => load_map(p).map_err(|e| validation(e.to_string()))?,
        None => {
            let spec = cfg.synth_spec().map_err(|e| validation(e.to_string()))?;
            gen_map(&spec).map_err(|e| validation(e.to_string()))?
        }
    };

    let mut report = String::new();
    report.push_str(&format!("machine: {}\n", machine_specs()));
    report.push_str(&format!(
        "map: {} samples, {:.0} m at dx = {} m\n",
        map.len(),
        map.length(),
        map.dx()
    ));

    // Filter throughput: replay a run at the configured update rate and
    // compare processed data time against wall time.
    let sim_seconds = 30.0;
    let mut run = cfg.run_spec().map_err(|e| validation(e.to_string()))?;
    run.profile = vec![magrail::synth::ProfilePhase { duration: sim_seconds, target: 25.0 }];
    run.start_s = (map.length() / 4.0).min(map.length() - sim_seconds * 25.0 - 100.0);
    if run.start_s < 0.0 {
        return Err(validation("map too short for the throughput run"));
    }
    let (sig, truth) = simulate_run(&map, &run).map_err(|e| validation(e.to_string()))?;

    let state = FilterState::init_local(
        &map,
        truth.x[0],
        cfg.spread_m,
        truth.v[0],
        cfg.v_spread_mps,
        cfg.n_particles,
        cfg.filter_seed(),
    );
    let t0 = Instant::now();
    replay_filter(&map, &sig, cfg, state)?;
    let wall = t0.elapsed().as_secs_f64();
    let rtf = sim_seconds / wall;
    report.push_str(&format!(
        "pf replay: N = {}, {:.1} Hz updates, {:.0} Hz input: {sim_seconds} simulated s \
         in {wall:.2} wall s => real-time factor {rtf:.2}\n",
        cfg.n_particles,
        1.0 / cfg.pf_dt_s,
        cfg.sensor_rate_hz
    ));

    // Step-cost scaling: double the particle count, same replay.
    let state2 = FilterState::init_local(
        &map,
        truth.x[0],
        cfg.spread_m,
        truth.v[0],
        cfg.v_spread_mps,
        cfg.n_particles * 2,
        cfg.filter_seed(),
    );
    let t0 = Instant::now();
    replay_filter(&map, &sig, cfg, state2)?;
    let wall2 = t0.elapsed().as_secs_f64();
    report.push_str(&format!(
        "pf scaling: 2N = {} took {wall2:.2} s => ratio {:.2} (expect ~2)\n",
        cfg.n_particles * 2,
        wall2 / wall
    ));

    // Alignment latency: one cold-start search of the trailing lookback
    // window over the full map.
    let hybrid_cfg = cfg.hybrid_config();
    let window_sig = {
        let need_m = cfg.lookback_m + 10.0;
        let v = sig.v.as_ref().expect("synthetic runs carry velocity");
        let mut acc = 0.0;
        let mut j0 = sig.len();
        while j0 > 0 && acc < need_m {
            j0 -= 1;
            acc += v[j0] * sig.dt;
        }
        sig.slice(j0, sig.len())
    };
    let mut window = spacify(&window_sig, map.dx(), 0.0).map_err(|e| validation(e.to_string()))?;
    let target = (cfg.lookback_m / map.dx()).floor() as usize + 1;
    if window.len() > target {
        let cut = window.len() - target;
        window.b.drain(..cut);
        window.x0 += cut as f64 * window.dx;
    }
    let map_sig = map.to_space_signal();
    let t0 = Instant::now();
    let hits = align_top3(&map_sig, &window, &hybrid_cfg).map_err(|e| validation(e.to_string()))?;
    let dtw_wall = t0.elapsed().as_secs_f64();
    let metric_name = match hybrid_cfg.align_metric {
        Metric::Dtw => "dtw",
        Metric::Euclid => "euclid",
    };
    report.push_str(&format!(
        "cold-start search ({metric_name}): {:.0} m query over {:.0} m map in {dtw_wall:.2} s; \
         best match at {:.1} m (score {:.3})\n",
        window.span(),
        map.length(),
        hits.first().map_or(f64::NAN, |h| h.s),
        hits.first().map_or(f64::NAN, |h| h.score)
    ));

    print!("{report}");
    let path = out_dir.join("bench.txt");
    std::fs::write(&path, &report)?;
    println!("wrote {}", path.display());
    Ok(())
}
