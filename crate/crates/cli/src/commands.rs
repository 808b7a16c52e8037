use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use swarmwm_core::ingest::{
    combined_transition, gng_fit, label_sequence, load_flightlog, predict_and_correct, synthetic_two_uav_log, CorrectionReport,
};
use swarmwm_core::runtime::{
    evaluate_instance, evaluate_seeds, generate_demos, learn_model, load_demo_dir, run_offline, summarize, write_atomic, write_run,
    SkippedDemo, SuiteEntry, METRICS_FILE,
};
use swarmwm_core::{FilterKind, FlightLog, GngConfig, MetricsReport, MissionInstance, SimConfig, WorldModel};

use crate::config::layered;
use crate::manifest::{files_below, manifest_beside, ManifestBuilder};
use crate::{Command, ConfigArgs, Failure, FilterArg};

const MANIFEST_FILE: &str = "manifest.json";

pub fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenInstances { cfg, count, seed, out } => gen_instances(&cfg, count, seed, &out)?,
        Command::GenDemos { cfg, count, seed, out } => gen_demos(&cfg, count, seed, &out)?,
        Command::Learn { cfg, demos, alpha, out } => learn(&cfg, &demos, alpha, &out)?,
        Command::Simulate { cfg, model, instance, seed, count, filter, out } => {
            if count == 0 {
                return Err(Failure::Usage("--count must be at least 1".into()));
            }
            simulate(&cfg, model.as_deref(), instance.as_deref(), seed, count, filter, &out)?
        }
        Command::Ingest { log, synthetic, noise, resample_dt, gng_config, max_nodes, seed, alpha, beta, out } => {
            if resample_dt.is_some_and(|d| !(d > 0.0)) {
                return Err(Failure::Usage("--resample-dt must be positive".into()));
            }
            let source = match (log, synthetic) {
                (Some(p), None) => LogSource::File(p),
                (None, Some(s)) => LogSource::Synthetic { seed: s, noise },
                _ => return Err(Failure::Usage("give exactly one of --log and --synthetic".into())),
            };
            ingest(IngestArgs { source, resample_dt, gng_config, max_nodes, seed, alpha, beta, out })?
        }
        Command::Report { runs, out } => report(&runs, out.as_deref().unwrap_or(&runs))?,
    }
    Ok(())
}

fn resolve(args: &ConfigArgs) -> Result<SimConfig> {
    let base = SimConfig::preset(args.preset.name()).expect("presets are known");
    let cfg = layered(&base, args.config.as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn with_config_input(m: &mut ManifestBuilder, args: &ConfigArgs) {
    if let Some(p) = &args.config {
        m.input(p);
    }
}

fn gen_instances(args: &ConfigArgs, count: Option<usize>, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let count = count.unwrap_or(cfg.n_test);
    let first = seed.unwrap_or(cfg.test_seed);
    let seeds: Vec<u64> = (0..count as u64).map(|i| first + i).collect();
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut m = ManifestBuilder::new("gen-instances", &cfg)?;
    with_config_input(&mut m, args);
    m.seeds(seeds.iter().copied());
    let mut written = Vec::new();
    for &s in &seeds {
        let inst = cfg.instance.sample(s).with_context(|| format!("instance {s}"))?;
        let p = out.join(format!("instance_{s:06}.json"));
        inst.save(&p)?;
        written.push(p);
    }
    m.finish(&written, &out.join(MANIFEST_FILE))?;
    println!("wrote {} instances to {}", written.len(), out.display());
    Ok(())
}

fn gen_demos(args: &ConfigArgs, count: Option<usize>, seed: Option<u64>, out: &Path) -> Result<()> {
    let cfg = resolve(args)?;
    let count = count.unwrap_or(cfg.demonstrations);
    let first = seed.unwrap_or(cfg.train_seed);
    let seeds: Vec<u64> = (0..count as u64).map(|i| first + i).collect();
    let mut m = ManifestBuilder::new("gen-demos", &cfg)?;
    with_config_input(&mut m, args);
    let batch = generate_demos(&cfg, out, &seeds)?;
    m.seeds(batch.demos.iter().map(|(s, _)| *s));
    write_skipped(out, &batch.skipped)?;
    m.finish(&files_below(out)?, &out.join(MANIFEST_FILE))?;
    println!(
        "{} demonstrations in {} ({} new, {} reused, {} skipped)",
        batch.demos.len(),
        out.display(),
        batch.generated,
        batch.reused,
        batch.skipped.len()
    );
    if batch.demos.is_empty() {
        bail!("no demonstration could be planned");
    }
    Ok(())
}

fn write_skipped(dir: &Path, skipped: &[SkippedDemo]) -> Result<()> {
    let p = dir.join("skipped.json");
    if skipped.is_empty() {
        if p.exists() {
            std::fs::remove_file(&p)?;
        }
        return Ok(());
    }
    write_atomic(&p, &serde_json::to_vec_pretty(skipped)?)?;
    Ok(())
}

fn learn(args: &ConfigArgs, demos_dir: &Path, alpha: Option<f64>, out: &Path) -> Result<()> {
    let mut cfg = resolve(args)?;
    if let Some(a) = alpha {
        cfg.alpha = a;
    }
    cfg.validate()?;
    if !demos_dir.is_dir() {
        bail!("demonstration directory {} does not exist (create it with `swarmwm gen-demos`)", demos_dir.display());
    }
    let demos = load_demo_dir(demos_dir)?;
    if demos.is_empty() {
        bail!("no demo_<seed>.json files in {}", demos_dir.display());
    }
    let mut m = ManifestBuilder::new("learn", &cfg)?;
    with_config_input(&mut m, args);
    m.seeds(demos.iter().map(|(s, _)| *s));
    for (s, _) in &demos {
        m.input(demos_dir.join(format!("demo_{s:06}.json")));
    }
    let model = learn_model(&cfg, &demos)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(out, model.to_json()?.as_bytes())?;
    m.finish(&[out.to_path_buf()], &manifest_beside(out))?;
    let (nm, nr, nt) = model.dictionaries.sizes();
    println!("model from {} demonstrations: {nm} mission, {nr} route, {nt} motion words -> {}", demos.len(), out.display());
    Ok(())
}

fn flags_line(m: &MetricsReport) -> String {
    let s = &m.success;
    format!(
        "completion={} division={} ordering={} motion={} time={:.1}s distance={:.1}m",
        s.completion, s.division, s.ordering, s.motion, m.completion_time, m.total_distance
    )
}

fn simulate(
    args: &ConfigArgs,
    model_path: Option<&Path>,
    instance_path: Option<&Path>,
    seed: Option<u64>,
    count: usize,
    filter: Option<FilterArg>,
    out: &Path,
) -> Result<()> {
    let mut cfg = resolve(args)?;
    if let Some(f) = filter {
        cfg.filter = match f {
            FilterArg::Ekf => FilterKind::Ekf,
            FilterArg::Pf => FilterKind::Pf,
        };
    }
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let mut m = ManifestBuilder::new("simulate", &cfg)?;
    with_config_input(&mut m, args);
    let model = match model_path {
        Some(p) => {
            m.input(p);
            WorldModel::load(p).with_context(|| format!("cannot load model {} (create one with `swarmwm learn`)", p.display()))?
        }
        None => {
            log::info!("no --model given; training one into {}", out.display());
            let off = run_offline(&cfg, &out.join("demos"))?;
            write_atomic(&out.join("model.json"), off.model.to_json()?.as_bytes())?;
            off.model
        }
    };

    if let Some(ip) = instance_path {
        m.input(ip);
        let inst = MissionInstance::load(ip).with_context(|| format!("cannot load instance {}", ip.display()))?;
        let seed = seed.unwrap_or(inst.seed);
        m.seeds([seed]);
        let (run, metrics) = evaluate_instance(&cfg, &model, &inst, seed)?;
        write_run(out, &run, Some(&metrics))?;
        inst.save(&out.join("instance.json"))?;
        m.finish(&files_below(out)?, &out.join(MANIFEST_FILE))?;
        println!("{}", flags_line(&metrics));
        return Ok(());
    }

    let first = seed.unwrap_or(cfg.test_seed);
    let seeds: Vec<u64> = (0..count as u64).map(|i| first + i).collect();
    m.seeds(seeds.iter().copied());
    let results = evaluate_seeds(&cfg, &model, &seeds);
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for (s, r) in results {
        match r {
            Ok(ev) => {
                let dir = if count == 1 { out.to_path_buf() } else { out.join(format!("run_{s:06}")) };
                write_run(&dir, &ev.run, Some(&ev.metrics))?;
                ev.instance.save(&dir.join("instance.json"))?;
                if count == 1 {
                    println!("{}", flags_line(&ev.metrics));
                }
                entries.push(SuiteEntry { seed: s, n_cities: ev.instance.n_cities(), uav_count: ev.instance.uav_count, metrics: ev.metrics });
            }
            Err(e) => {
                log::error!("mission {s} failed: {e}");
                failures.push(SkippedDemo { seed: s, reason: e.to_string() });
            }
        }
    }
    let n_failed = failures.len();
    if count > 1 {
        let summary = summarize(entries, failures);
        write_atomic(&out.join("summary.json"), &serde_json::to_vec_pretty(&summary)?)?;
        let r = summary.success_rates;
        println!(
            "{} missions: completion {:.0}%, division {:.0}%, ordering {:.0}%, motion {:.0}%",
            summary.runs,
            100.0 * r.completion,
            100.0 * r.division,
            100.0 * r.ordering,
            100.0 * r.motion
        );
    }
    m.finish(&files_below(out)?, &out.join(MANIFEST_FILE))?;
    if n_failed > 0 {
        bail!("{n_failed} of {count} missions failed; see the log for reasons");
    }
    Ok(())
}

enum LogSource {
    File(PathBuf),
    Synthetic { seed: u64, noise: f64 },
}

struct IngestArgs {
    source: LogSource,
    resample_dt: Option<f64>,
    gng_config: Option<PathBuf>,
    max_nodes: Option<usize>,
    seed: Option<u64>,
    alpha: f64,
    beta: f64,
    out: PathBuf,
}

#[derive(Serialize)]
struct IngestSettings<'a> {
    gng: &'a GngConfig,
    alpha: f64,
    beta: f64,
    resample_dt: Option<f64>,
}

#[derive(Serialize)]
struct SequenceReport {
    uav_id: usize,
    #[serde(flatten)]
    report: CorrectionReport,
}

#[derive(Serialize)]
struct IngestReport {
    n: usize,
    predicted_errors: usize,
    corrected_errors: usize,
    sequences: Vec<SequenceReport>,
}

fn ingest(a: IngestArgs) -> Result<()> {
    let mut gng = layered(&GngConfig::default(), a.gng_config.as_deref())?;
    if let Some(n) = a.max_nodes {
        gng.max_nodes = n;
    }
    if let Some(s) = a.seed {
        gng.seed = s;
    }
    gng.validate()?;
    let settings = IngestSettings { gng: &gng, alpha: a.alpha, beta: a.beta, resample_dt: a.resample_dt };
    let mut m = ManifestBuilder::new("ingest", &settings)?;
    if let Some(p) = &a.gng_config {
        m.input(p);
    }
    let mut log: FlightLog = match &a.source {
        LogSource::File(p) => {
            m.input(p);
            load_flightlog(p).with_context(|| format!("cannot ingest {}", p.display()))?
        }
        LogSource::Synthetic { seed, noise } => {
            m.seeds([*seed]);
            synthetic_two_uav_log(*seed, *noise)
        }
    };
    if let Some(dt) = a.resample_dt {
        log.uavs = log.uavs.iter().map(|u| u.resampled(dt)).collect();
    }
    for u in &log.uavs {
        if !u.gaps.is_empty() {
            log::warn!("UAV {}: {} timing gaps", u.uav_id, u.gaps.len());
        }
    }
    let velocities: Vec<[f64; 3]> = log.uavs.iter().flat_map(|u| u.velocities()).collect();
    let codebook = gng_fit(&velocities, &gng)?;
    let seqs = label_sequence(&log, &codebook);
    let transition = combined_transition(&seqs, codebook.len(), a.alpha)?;
    let per: Vec<SequenceReport> = seqs
        .iter()
        .map(|s| SequenceReport { uav_id: s.uav_id, report: predict_and_correct(s, &transition, a.beta).report() })
        .collect();
    let report = IngestReport {
        n: per.iter().map(|p| p.report.n).sum(),
        predicted_errors: per.iter().map(|p| p.report.predicted_errors).sum(),
        corrected_errors: per.iter().map(|p| p.report.corrected_errors).sum(),
        sequences: per,
    };
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    let outputs = [
        (a.out.join("codebook.json"), serde_json::to_vec_pretty(&codebook)?),
        (a.out.join("transition.json"), serde_json::to_vec_pretty(&transition)?),
        (a.out.join("correction_report.json"), serde_json::to_vec_pretty(&report)?),
    ];
    for (p, bytes) in &outputs {
        write_atomic(p, bytes)?;
    }
    let paths: Vec<PathBuf> = outputs.iter().map(|(p, _)| p.clone()).collect();
    m.finish(&paths, &a.out.join(MANIFEST_FILE))?;
    println!(
        "{} nodes; {} labels: {} mismatches predicted, {} after correction",
        codebook.len(),
        report.n,
        report.predicted_errors,
        report.corrected_errors
    );
    Ok(())
}

const RUN_COLUMNS: [&str; 18] = [
    "run",
    "completion_time",
    "total_distance",
    "min_inter_uav_distance",
    "below_dmin_fraction",
    "division_similarity",
    "order_similarity",
    "rmse_ekf",
    "rmse_pf",
    "rmse_meas",
    "motion_match_fraction",
    "success_division",
    "success_ordering",
    "success_motion",
    "success_completion",
    "steps",
    "evaluated_candidates",
    "online_ga_invocations",
];

fn report(runs: &Path, out: &Path) -> Result<()> {
    if !runs.is_dir() {
        bail!("run directory {} does not exist", runs.display());
    }
    let metric_files: Vec<PathBuf> = files_below(runs)?
        .into_iter()
        .filter(|p| p.file_name().and_then(|n| n.to_str()) == Some(METRICS_FILE))
        .collect();
    if metric_files.is_empty() {
        bail!("no {METRICS_FILE} below {} (produce runs with `swarmwm simulate`)", runs.display());
    }
    let mut rows = Vec::new();
    for p in &metric_files {
        let text = std::fs::read_to_string(p)?;
        let m: MetricsReport = serde_json::from_str(&text).with_context(|| format!("{} is not a metrics report", p.display()))?;
        let name = p
            .parent()
            .and_then(|d| d.strip_prefix(runs).ok())
            .map(|d| d.display().to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| ".".into());
        rows.push((name, m));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RUN_COLUMNS)?;
    for (name, m) in &rows {
        let s = &m.success;
        w.write_record([
            name.clone(),
            m.completion_time.to_string(),
            m.total_distance.to_string(),
            m.min_inter_uav_distance.map(|d| d.to_string()).unwrap_or_default(),
            m.below_dmin_fraction.to_string(),
            m.division_similarity.to_string(),
            m.order_similarity.to_string(),
            m.rmse_ekf.to_string(),
            m.rmse_pf.to_string(),
            m.rmse_meas.to_string(),
            m.motion_match_fraction.to_string(),
            s.division.to_string(),
            s.ordering.to_string(),
            s.motion.to_string(),
            s.completion.to_string(),
            m.steps.to_string(),
            m.evaluated_candidates.to_string(),
            m.online_ga_invocations.to_string(),
        ])?;
    }
    let runs_csv = w.into_inner().map_err(|e| anyhow!("csv buffer: {e}"))?;

    let summary = summarize(
        rows.iter()
            .enumerate()
            .map(|(i, (_, m))| SuiteEntry { seed: i as u64, n_cities: 0, uav_count: 0, metrics: m.clone() })
            .collect(),
        Vec::new(),
    );
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "value"])?;
    let r = summary.success_rates;
    let lines: [(&str, String); 14] = [
        ("runs", summary.runs.to_string()),
        ("mean_completion_time", summary.mean_completion_time.to_string()),
        ("mean_total_distance", summary.mean_total_distance.to_string()),
        ("min_inter_uav_distance", summary.min_inter_uav_distance.map(|d| d.to_string()).unwrap_or_default()),
        ("below_dmin_fraction", summary.below_dmin_fraction.to_string()),
        ("mean_division_similarity", summary.mean_division_similarity.to_string()),
        ("mean_order_similarity", summary.mean_order_similarity.to_string()),
        ("mean_rmse_ekf", summary.mean_rmse_ekf.to_string()),
        ("mean_rmse_pf", summary.mean_rmse_pf.to_string()),
        ("mean_rmse_meas", summary.mean_rmse_meas.to_string()),
        ("success_rate_division", r.division.to_string()),
        ("success_rate_ordering", r.ordering.to_string()),
        ("success_rate_motion", r.motion.to_string()),
        ("success_rate_completion", r.completion.to_string()),
    ];
    for (k, v) in lines {
        w.write_record([k.to_string(), v])?;
    }
    let summary_csv = w.into_inner().map_err(|e| anyhow!("csv buffer: {e}"))?;

    std::fs::create_dir_all(out)?;
    let (rp, sp) = (out.join("runs.csv"), out.join("summary.csv"));
    write_atomic(&rp, &runs_csv)?;
    write_atomic(&sp, &summary_csv)?;
    let mut m = ManifestBuilder::new("report", serde_json::json!({ "runs": runs }))?;
    for p in &metric_files {
        m.input(p);
    }
    m.finish(&[rp.clone(), sp], &out.join("report.manifest.json"))?;
    println!("{} runs -> {}", rows.len(), rp.display());
    Ok(())
}
