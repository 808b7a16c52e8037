//! Offline pipeline, online mission loop and evaluation metrics.
//!
//! The offline side turns seeded random instances into expert
//! demonstrations and a [`WorldModel`]. The online side flies a mission with
//! noisy measurements and filter-corrected state estimates, calling
//! [`inference::step`] once per control period. Everything a metric needs is
//! kept in a serializable [`RunRecord`], so [`compute_metrics`] can be rerun
//! from files.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert_ga::{evolve, ga_invocations, load_demonstration, save_demonstration, ExpertDemonstration, GAConfig, GaError};
use crate::filters::{ekf_predict, ekf_update, pf_step, propagate, ContinuousState, EkfState, FilterError, NoiseConfig, ParticleSet};
use crate::geom::Vec2;
use crate::inference::{self, nn_tour_length, observed_abnormality, parse_motion_key, InferenceConfig, InferenceError, Observation, PlanState, StepContext, TraceRecord};
use crate::potential_field::{FieldConfig, FieldError, Neighborhood, TrajSample, Trajectory};
use crate::scenario::{generate_instance, validate_solution, Area, City, MissionInstance, Obstacle, ScenarioError, DEFAULT_ALTITUDE_M};
use crate::symbolic::{abstract_with_features, demo_features, fit_letter_codebook, hover_features, motion_features, FeatureVector, QuantizerConfig, SymbolicError};
use crate::world_model::{learn, Level, ModelError, ReferenceDistribution, WorldModel};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Ga(#[from] GaError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Symbolic(#[from] SymbolicError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("every demonstration failed; nothing to learn from")]
    NoDemonstrations,
    #[error("decision failed at t = {t:.1} s: {source}")]
    Aborted {
        t: f64,
        source: InferenceError,
        partial: Box<OnlineRun>,
    },
    #[error("the expert planner ran {0} times inside the online loop")]
    OptimizerInvoked(u64),
    #[error("step at t = {t:.1} s evaluated {evaluated} candidates but logged {logged}")]
    Accounting { t: f64, evaluated: usize, logged: usize },
    #[error("run output I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("run output format: {0}")]
    Json(#[from] serde_json::Error),
    #[error("run output CSV: {0}")]
    Csv(#[from] csv::Error),
}

/// How random instances are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceParams {
    pub n_min: usize,
    pub n_max: usize,
    /// Swarm size rule: `Q = clamp(ceil(N / cities_per_uav), 1, q_max)`.
    pub cities_per_uav: usize,
    pub q_max: usize,
    pub width: f64,
    pub height: f64,
    pub obstacles: usize,
    /// Flight altitude (m). Metadata only; all planning is planar.
    pub altitude: f64,
}

impl Default for InstanceParams {
    fn default() -> Self {
        Self {
            n_min: 10,
            n_max: 30,
            cities_per_uav: 6,
            q_max: 5,
            width: 1000.0,
            height: 1000.0,
            obstacles: 3,
            altitude: DEFAULT_ALTITUDE_M,
        }
    }
}

impl InstanceParams {
    pub fn area(&self) -> Area {
        Area::new(self.width, self.height)
    }

    pub fn uav_count(&self, n_cities: usize) -> usize {
        n_cities.div_ceil(self.cities_per_uav.max(1)).clamp(1, self.q_max.max(1))
    }

    /// Instance for `seed`. The city count is drawn from its own stream so
    /// it does not shift the placement draws.
    pub fn sample(&self, seed: u64) -> Result<MissionInstance, ScenarioError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
        let n = rng.random_range(self.n_min..=self.n_max);
        let mut inst = generate_instance(seed, n, self.uav_count(n), self.area(), self.obstacles)?;
        inst.altitude = self.altitude;
        Ok(inst)
    }

    fn validate(&self) -> Result<(), String> {
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(format!("city range {}..={} is empty or starts at 0", self.n_min, self.n_max));
        }
        if self.cities_per_uav == 0 || self.q_max == 0 {
            return Err("cities_per_uav and q_max must be >= 1".into());
        }
        if !(self.width > 0.0 && self.height > 0.0 && self.width.is_finite() && self.height.is_finite()) {
            return Err(format!("area must be positive, got {}x{}", self.width, self.height));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    NewCity { x: f64, y: f64 },
    NewObstacle { x: f64, y: f64, r: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl Event {
    pub fn new_city(t: f64, pos: Vec2) -> Self {
        Self { t, kind: EventKind::NewCity { x: pos.x, y: pos.y } }
    }

    pub fn new_obstacle(t: f64, center: Vec2, r: f64) -> Self {
        Self { t, kind: EventKind::NewObstacle { x: center.x, y: center.y, r } }
    }

    pub fn position(&self) -> Vec2 {
        match self.kind {
            EventKind::NewCity { x, y } | EventKind::NewObstacle { x, y, .. } => Vec2::new(x, y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    /// The EKF estimate drives control; the PF runs alongside for RMSE.
    #[default]
    Ekf,
    Pf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub instance: InstanceParams,
    pub ga: GAConfig,
    pub field: FieldConfig,
    pub inference: InferenceConfig,
    pub noise: NoiseConfig,
    pub quantizer: QuantizerConfig,
    /// Laplace smoothing for every learned distribution.
    pub alpha: f64,
    pub swarm_bin_width: usize,
    pub filter: FilterKind,
    /// Scheduled events, sorted by time.
    pub events: Vec<Event>,
    /// Number of training demonstrations (M).
    pub demonstrations: usize,
    pub train_seed: u64,
    pub n_test: usize,
    pub test_seed: u64,
    pub motion_threshold: f64,
    /// Sampling step (s) of flown legs before motion features are measured.
    pub abstraction_dt: f64,
    /// Hard cap on simulated time per mission (s).
    pub max_time: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl SimConfig {
    /// Full-scale settings: 5000 demonstrations, 1000 test missions.
    pub fn full() -> Self {
        Self {
            instance: InstanceParams::default(),
            ga: GAConfig::default(),
            field: FieldConfig::default(),
            inference: InferenceConfig::default(),
            noise: NoiseConfig::default(),
            quantizer: QuantizerConfig::default(),
            alpha: 1.0,
            swarm_bin_width: 5,
            filter: FilterKind::Ekf,
            events: Vec::new(),
            demonstrations: 5000,
            train_seed: 0,
            n_test: 1000,
            test_seed: 1_000_000,
            motion_threshold: 0.5,
            abstraction_dt: 1.0,
            max_time: 3600.0,
        }
    }

    /// Desk-scale settings that train and evaluate in a few minutes.
    pub fn ci() -> Self {
        Self {
            instance: InstanceParams {
                n_min: 4,
                n_max: 10,
                cities_per_uav: 4,
                q_max: 3,
                width: 800.0,
                height: 800.0,
                obstacles: 2,
                altitude: DEFAULT_ALTITUDE_M,
            },
            ga: GAConfig { population: 80, generations: 120, ..GAConfig::default() },
            noise: NoiseConfig { n_particles: 300, ..NoiseConfig::default() },
            demonstrations: 50,
            n_test: 20,
            ..Self::full()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "ci" => Some(Self::ci()),
            "full" | "paper" => Some(Self::full()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        let bad = |m: String| Err(RuntimeError::InvalidConfig(m));
        if let Err(m) = self.instance.validate() {
            return bad(m);
        }
        self.ga.validate()?;
        self.field.validate()?;
        self.inference.validate()?;
        self.noise.validate()?;
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if self.demonstrations == 0 {
            return bad("demonstrations must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.motion_threshold) {
            return bad(format!("motion_threshold must lie in [0, 1], got {}", self.motion_threshold));
        }
        if !(self.abstraction_dt > 0.0 && self.abstraction_dt.is_finite()) {
            return bad(format!("abstraction_dt must be > 0, got {}", self.abstraction_dt));
        }
        if !(self.max_time > 0.0) {
            return bad(format!("max_time must be > 0, got {}", self.max_time));
        }
        let area = self.instance.area();
        for (i, e) in self.events.iter().enumerate() {
            if !(e.t >= 0.0 && e.t.is_finite()) {
                return bad(format!("event {i} has invalid time {}", e.t));
            }
            if i > 0 && e.t < self.events[i - 1].t {
                return bad(format!("events must be sorted by time (event {i} at {} s)", e.t));
            }
            if !area.contains(e.position()) {
                return bad(format!("event {i} lies outside the {}x{} area", area.width, area.height));
            }
            if let EventKind::NewObstacle { r, .. } = e.kind {
                if !(r > 0.0 && r.is_finite()) {
                    return bad(format!("event {i} has obstacle radius {r}"));
                }
            }
        }
        Ok(())
    }
}

/// File stem of the demonstration generated from `seed`.
pub fn demo_stem(seed: u64) -> String {
    format!("demo_{seed:06}")
}

/// Expert plan for one instance. The GA seed is offset by `seed` so each
/// instance gets its own search stream.
pub fn expert_plan(instance: &MissionInstance, cfg: &SimConfig, seed: u64) -> Result<ExpertDemonstration, GaError> {
    let ga = GAConfig { seed: cfg.ga.seed.wrapping_add(seed), ..cfg.ga.clone() };
    evolve(instance, &ga, &cfg.field)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedDemo {
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct OfflineOutput {
    pub model: WorldModel,
    pub demos_dir: PathBuf,
    /// Seeds of the demonstrations the model was learned from.
    pub seeds: Vec<u64>,
    pub generated: usize,
    pub reused: usize,
    pub skipped: Vec<SkippedDemo>,
}

enum DemoOutcome {
    Reused(Box<ExpertDemonstration>),
    Generated(Box<ExpertDemonstration>),
    Skipped(String),
}

fn obtain_demo(cfg: &SimConfig, dir: &Path, seed: u64) -> Result<DemoOutcome, RuntimeError> {
    let stem = demo_stem(seed);
    if dir.join(format!("{stem}.json")).exists() {
        match load_demonstration(dir, &stem) {
            Ok(d) => return Ok(DemoOutcome::Reused(Box::new(d))),
            Err(e) => log::warn!("{stem}: unreadable ({e}), regenerating"),
        }
    }
    let inst = match cfg.instance.sample(seed) {
        Ok(i) => i,
        Err(e) => {
            log::warn!("{stem}: instance generation failed: {e}");
            return Ok(DemoOutcome::Skipped(e.to_string()));
        }
    };
    match expert_plan(&inst, cfg, seed) {
        Ok(d) => {
            save_demonstration(&d, dir, &stem)?;
            // Reload so a fresh run and a resumed run see the same bytes.
            Ok(DemoOutcome::Generated(Box::new(load_demonstration(dir, &stem)?)))
        }
        Err(GaError::Io(e)) => Err(e.into()),
        Err(e) => {
            log::warn!("{stem}: expert planner failed: {e}");
            Ok(DemoOutcome::Skipped(e.to_string()))
        }
    }
}

fn distinct_features(features: &[FeatureVector]) -> usize {
    let set: BTreeSet<[u64; 6]> = features.iter().map(|f| f.to_array().map(f64::to_bits)).collect();
    set.len()
}

/// Demonstrations obtained for a seed range.
#[derive(Debug, Clone)]
pub struct DemoBatch {
    /// `(seed, demonstration)` in seed order, skipped seeds left out.
    pub demos: Vec<(u64, ExpertDemonstration)>,
    pub generated: usize,
    pub reused: usize,
    pub skipped: Vec<SkippedDemo>,
}

/// Generates (or reuses) one demonstration per seed in `seeds`, stored in
/// `dir` as `demo_<seed>.json` plus per-UAV trajectory CSVs.
pub fn generate_demos(cfg: &SimConfig, dir: &Path, seeds: &[u64]) -> Result<DemoBatch, RuntimeError> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let outcomes: Vec<DemoOutcome> = seeds
        .par_iter()
        .map(|&s| obtain_demo(cfg, dir, s))
        .collect::<Result<_, _>>()?;
    let mut batch = DemoBatch { demos: Vec::new(), generated: 0, reused: 0, skipped: Vec::new() };
    for (&seed, o) in seeds.iter().zip(outcomes) {
        match o {
            DemoOutcome::Reused(d) => {
                batch.reused += 1;
                batch.demos.push((seed, *d));
            }
            DemoOutcome::Generated(d) => {
                batch.generated += 1;
                batch.demos.push((seed, *d));
            }
            DemoOutcome::Skipped(reason) => batch.skipped.push(SkippedDemo { seed, reason }),
        }
    }
    if !batch.skipped.is_empty() {
        log::warn!("{} of {} demonstrations skipped", batch.skipped.len(), seeds.len());
    }
    Ok(batch)
}

/// Loads every `demo_<seed>.json` in `dir`, sorted by seed.
pub fn load_demo_dir(dir: &Path) -> Result<Vec<(u64, ExpertDemonstration)>, RuntimeError> {
    let mut seeds = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(seed) = name.strip_prefix("demo_").and_then(|r| r.strip_suffix(".json")).and_then(|n| n.parse::<u64>().ok()) {
            seeds.push(seed);
        }
    }
    seeds.sort_unstable();
    seeds
        .par_iter()
        .map(|&s| Ok((s, load_demonstration(dir, &demo_stem(s))?)))
        .collect()
}

/// Fits the letter codebook and learns the world model from demonstrations.
pub fn learn_model(cfg: &SimConfig, demos: &[(u64, ExpertDemonstration)]) -> Result<WorldModel, RuntimeError> {
    if demos.is_empty() {
        return Err(RuntimeError::NoDemonstrations);
    }
    let features: Vec<Vec<Vec<FeatureVector>>> = demos.par_iter().map(|(_, d)| demo_features(d, &cfg.field)).collect();
    let flat: Vec<FeatureVector> = features.iter().flatten().flatten().copied().collect();
    let mut quantizer = cfg.quantizer;
    let distinct = distinct_features(&flat);
    if distinct < quantizer.letters {
        log::warn!("only {distinct} distinct leg features; shrinking the letter alphabet from {}", quantizer.letters);
        quantizer.letters = distinct.max(1);
    }
    let codebook = fit_letter_codebook(&flat, quantizer.letters, quantizer.seed)?;
    let triplets: Vec<_> = demos
        .iter()
        .zip(&features)
        .map(|((_, d), f)| abstract_with_features(d, f, &codebook, &quantizer))
        .collect();
    let seeds: Vec<u64> = demos.iter().map(|(s, _)| *s).collect();
    Ok(learn(&triplets, codebook, quantizer, cfg.alpha, seeds, cfg.swarm_bin_width)?)
}

/// Generates (or reuses) `cfg.demonstrations` demonstrations in `demos_dir`
/// and learns a world model from them.
pub fn run_offline(cfg: &SimConfig, demos_dir: &Path) -> Result<OfflineOutput, RuntimeError> {
    let all_seeds: Vec<u64> = (0..cfg.demonstrations as u64).map(|i| cfg.train_seed + i).collect();
    let batch = generate_demos(cfg, demos_dir, &all_seeds)?;
    let model = learn_model(cfg, &batch.demos)?;
    log::info!(
        "learned model from {} demonstrations ({} new, {} reused)",
        batch.demos.len(),
        batch.generated,
        batch.reused
    );
    Ok(OfflineOutput {
        model,
        demos_dir: demos_dir.to_path_buf(),
        seeds: batch.demos.iter().map(|(s, _)| *s).collect(),
        generated: batch.generated,
        reused: batch.reused,
        skipped: batch.skipped,
    })
}

/// One UAV sample per control step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackRow {
    pub step: usize,
    pub t: f64,
    pub truth: Vec2,
    pub vel: Vec2,
    pub meas: Vec2,
    pub ekf: Vec2,
    pub pf: Vec2,
    pub trace_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavTrack {
    pub uav: usize,
    /// Row `s` is the state after step `s`; row 0 is the launch state.
    pub rows: Vec<TrackRow>,
    /// Motion word that produced each row (empty for row 0).
    pub words: Vec<String>,
    /// Cities in the order they were captured.
    pub visited: Vec<usize>,
    /// Row indices of launch, each capture and the depot return.
    pub marks: Vec<usize>,
    pub return_time: Option<f64>,
}

/// Per-step abnormality of the executing plan, one series per level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AbnormalityTrace {
    pub t: Vec<f64>,
    pub mission: Vec<f64>,
    pub route: Vec<f64>,
    pub motion: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepAccounting {
    pub t: f64,
    /// Candidates scored by the decision levels.
    pub evaluated: usize,
    /// Candidates written to the decision trace.
    pub logged: usize,
}

/// Everything the metrics are computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    /// The instance after all applied events.
    pub instance: MissionInstance,
    pub events: Vec<Event>,
    pub dt: f64,
    pub d_min: f64,
    pub depot_zone: f64,
    pub plan: Option<PlanState>,
    /// Largest abnormality of a chosen mission-level action.
    pub mission_delta: f64,
    pub tracks: Vec<UavTrack>,
    pub accounting: Vec<StepAccounting>,
    pub abnormality: AbnormalityTrace,
    pub ga_invocations: u64,
    pub end_time: f64,
    pub timed_out: bool,
    #[serde(default)]
    pub expert_routes: Option<Vec<Vec<usize>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineRun {
    pub record: RunRecord,
    pub trace: Vec<TraceRecord>,
}

fn gauss(rng: &mut ChaCha8Rng, sigma: f64) -> f64 {
    if sigma > 0.0 {
        sigma * rng.sample::<f64, _>(StandardNormal)
    } else {
        0.0
    }
}

fn estimate(kind: FilterKind, ekf: &EkfState, pf: &ParticleSet) -> ContinuousState {
    match kind {
        FilterKind::Ekf => ekf.mean,
        FilterKind::Pf => pf.mean(),
    }
}

fn time_limit(cfg: &SimConfig, inst: &MissionInstance) -> f64 {
    let pts: Vec<Vec2> = inst.cities.iter().map(City::pos).collect();
    let tour = nn_tour_length(inst.depot, &pts, inst.depot);
    let extra = cfg.events.len() as f64 * 2.0 * inst.area.half_diagonal();
    let last = cfg.events.last().map_or(0.0, |e| e.t);
    (4.0 * (tour + extra) / cfg.field.v_max + 120.0 + last).min(cfg.max_time)
}

fn level_abnormality<'a>(keys: impl Iterator<Item = &'a str>, r: &ReferenceDistribution, beta: f64) -> Result<f64, InferenceError> {
    let words: Vec<usize> = keys.filter_map(|k| r.index_of(k)).collect();
    observed_abnormality(&words, &r.probs, beta)
}

/// Flies `instance` under the learned model. Never calls the expert planner.
pub fn run_online(cfg: &SimConfig, model: &WorldModel, instance: &MissionInstance, seed: u64) -> Result<OnlineRun, RuntimeError> {
    run_online_with_plan(cfg, model, instance, seed, None)
}

/// As [`run_online`], optionally starting from a fixed plan instead of the
/// mission and route decisions at `t = 0`.
pub fn run_online_with_plan(
    cfg: &SimConfig,
    model: &WorldModel,
    instance: &MissionInstance,
    seed: u64,
    initial_plan: Option<PlanState>,
) -> Result<OnlineRun, RuntimeError> {
    cfg.validate()?;
    instance.check()?;
    let ga_before = ga_invocations();
    let mut inst = instance.clone();
    let q_count = inst.uav_count;
    let field = &cfg.field;
    let dt = field.dt;
    let tau = cfg.noise.tau;
    let nm = cfg.noise.model();
    let zone = field.depot_zone_radius();
    let limit = time_limit(cfg, &inst);
    let ctx = StepContext { model, field, cfg: &cfg.inference, tau };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let start = ContinuousState::new(inst.depot, Vec2::ZERO);
    let mut truth = vec![start; q_count];
    let mut ekf = vec![EkfState::with_std(start, cfg.noise.sigma_meas.max(0.01), 0.1); q_count];
    let mut pf = (0..q_count)
        .map(|q| ParticleSet::from_gaussian(&start, &ekf[q].cov, cfg.noise.n_particles, seed ^ ((q as u64 + 1) << 40)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut active = vec![true; q_count];
    let mut tracks: Vec<UavTrack> = (0..q_count)
        .map(|q| UavTrack {
            uav: q,
            rows: vec![TrackRow {
                step: 0,
                t: 0.0,
                truth: start.pos,
                vel: start.vel,
                meas: start.pos,
                ekf: start.pos,
                pf: pf[q].mean().pos,
                trace_p: ekf[q].cov.trace(),
            }],
            words: vec![String::new()],
            visited: Vec::new(),
            marks: vec![0],
            return_time: None,
        })
        .collect();

    let mut plan = initial_plan;
    let mut trace = Vec::new();
    let mut accounting = Vec::new();
    let mut abn = AbnormalityTrace::default();
    let mut applied = Vec::new();
    let mut next_event = 0;
    let mut mission_delta: f64 = 0.0;
    let mut timed_out = false;
    let mut k = 0usize;

    let record = |inst: &MissionInstance, plan: &Option<PlanState>, tracks: Vec<UavTrack>, accounting, abn, applied, mission_delta, t, timed_out| RunRecord {
        seed,
        instance: inst.clone(),
        events: applied,
        dt,
        d_min: field.d_min,
        depot_zone: zone,
        plan: plan.clone(),
        mission_delta,
        tracks,
        accounting,
        abnormality: abn,
        ga_invocations: ga_invocations() - ga_before,
        end_time: t,
        timed_out,
        expert_routes: None,
    };

    loop {
        let t = k as f64 * dt;
        while next_event < cfg.events.len() && cfg.events[next_event].t <= t + 1e-9 {
            let e = cfg.events[next_event];
            match e.kind {
                EventKind::NewCity { x, y } => {
                    let id = inst.push_city(Vec2::new(x, y));
                    log::info!("t = {t:.1} s: new city {id} at ({x:.1}, {y:.1})");
                }
                EventKind::NewObstacle { x, y, r } => {
                    inst.obstacles.push(Obstacle::new(Vec2::new(x, y), r));
                    log::info!("t = {t:.1} s: new obstacle at ({x:.1}, {y:.1}) r = {r:.1}");
                }
            }
            applied.push(e);
            next_event += 1;
        }
        if active.iter().all(|a| !a) {
            break;
        }
        if t > limit {
            log::warn!("mission stopped at the {limit:.0} s time limit");
            timed_out = true;
            break;
        }
        
        let obs = Observation {
            t,
            depot: inst.depot,
            area: inst.area,
            cities: inst.cities.clone(),
            uav_states: (0..q_count).map(|q| estimate(cfg.filter, &ekf[q], &pf[q])).collect(),
            active: active.clone(),
            obstacles: inst.obstacles.clone(),
        };
        let outcome = match inference::step(&obs, &mut plan, ctx) {
            Ok(o) => o,
            Err(source) => {
                let partial = OnlineRun {
                    record: record(&inst, &plan, tracks, accounting, abn, applied, mission_delta, t, false),
                    trace,
                };
                return Err(RuntimeError::Aborted { t, source, partial: Box::new(partial) });
            }
        };
        let logged: usize = outcome.trace.iter().map(|r| r.candidates.len()).sum();
        if logged != outcome.evaluations {
            return Err(RuntimeError::Accounting { t, evaluated: outcome.evaluations, logged });
        }
        accounting.push(StepAccounting { t, evaluated: outcome.evaluations, logged });
        for r in outcome.trace.iter().filter(|r| r.level == Level::Msn) {
            if let Some(i) = r.chosen_index() {
                mission_delta = mission_delta.max(r.candidates[i].delta);
            }
        }
        trace.extend(outcome.trace);
        let p = plan.as_mut().expect("step initializes the plan");

        let icfg = &cfg.inference;
        abn.t.push(t);
        abn.mission.push(level_abnormality(p.mission_keys.iter().map(String::as_str), &model.mission_ref, icfg.beta_msn)?);
        abn.route.push(level_abnormality(p.route_keys.iter().map(String::as_str), &model.route_ref, icfg.beta_rte)?);
        abn.motion.push(level_abnormality(outcome.action.motion.iter().map(|m| m.word.as_str()), &model.motion_ref, icfg.beta_mot)?);

        let city_pos: BTreeMap<usize, Vec2> = inst.cities.iter().map(|c| (c.id, c.pos())).collect();
        for m in &outcome.action.motion {
            let q = m.uav;
            let u = m.command;
            let mut next = propagate(&truth[q], u, dt, tau);
            next.pos += Vec2::new(gauss(&mut rng, cfg.noise.sigma_pos), gauss(&mut rng, cfg.noise.sigma_pos));
            next.vel += Vec2::new(gauss(&mut rng, cfg.noise.sigma_vel), gauss(&mut rng, cfg.noise.sigma_vel));
            truth[q] = next;
            let z = next.pos + Vec2::new(gauss(&mut rng, cfg.noise.sigma_meas), gauss(&mut rng, cfg.noise.sigma_meas));
            ekf[q] = ekf_update(&ekf_predict(&ekf[q], u, dt, &nm)?, z, &nm)?;
            pf[q] = pf_step(&pf[q], u, z, &nm, dt)?;
            let est = estimate(cfg.filter, &ekf[q], &pf[q]).pos;
            let tr = &mut tracks[q];
            tr.rows.push(TrackRow {
                step: k + 1,
                t: t + dt,
                truth: next.pos,
                vel: next.vel,
                meas: z,
                ekf: ekf[q].mean.pos,
                pf: pf[q].mean().pos,
                trace_p: ekf[q].cov.trace(),
            });
            tr.words.push(m.word.clone());
            let row = tr.rows.len() - 1;
            while let Some(c) = p.next_city(q) {
                if est.distance(city_pos[&c]) > field.r_cap {
                    break;
                }
                p.progress[q] += 1;
                tr.visited.push(c);
                tr.marks.push(row);
            }
            if p.next_city(q).is_none() && est.distance(inst.depot) <= field.r_cap {
                active[q] = false;
                tr.return_time = Some(t + dt);
                tr.marks.push(row);
            }
        }
        k += 1;
    }
    let end = k as f64 * dt;
    let rec = record(&inst, &plan, tracks, accounting, abn, applied, mission_delta, end, timed_out);
    if rec.ga_invocations != 0 {
        return Err(RuntimeError::OptimizerInvoked(rec.ga_invocations));
    }
    Ok(OnlineRun { record: rec, trace })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessFlags {
    pub division: bool,
    pub ordering: bool,
    pub motion: bool,
    pub completion: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Time of the last depot return, or the end of the run if unfinished (s).
    pub completion_time: f64,
    pub total_distance: f64,
    /// Smallest true distance between two airborne UAVs; `None` when no two
    /// UAVs were ever airborne together.
    pub min_inter_uav_distance: Option<f64>,
    /// Share of steps with two or more airborne UAVs in which some pair was
    /// closer than `d_min`.
    pub below_dmin_fraction: f64,
    pub below_dmin_steps: usize,
    pub paired_steps: usize,
    pub division_similarity: f64,
    pub order_similarity: f64,
    pub rmse_ekf: f64,
    pub rmse_pf: f64,
    pub rmse_meas: f64,
    pub motion_match_fraction: f64,
    pub abnormality: AbnormalityTrace,
    pub success: SuccessFlags,
    pub steps: usize,
    pub evaluated_candidates: usize,
    pub online_ga_invocations: u64,
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut p: Vec<usize> = (0..n).collect();
    fn rec(k: usize, p: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == p.len() {
            out.push(p.clone());
            return;
        }
        for i in k..p.len() {
            p.swap(k, i);
            rec(k + 1, p, out);
            p.swap(k, i);
        }
    }
    rec(0, &mut p, &mut out);
    out
}

/// Label matching maximizing the number of cities assigned to matched
/// groups. Returns `m` with `m[i]` the group of `b` paired with group `i` of
/// `a` (indices beyond a side's length are empty padding) and the matched
/// count. Exhaustive up to 8 groups, greedy beyond.
pub fn best_matching(a: &[Vec<usize>], b: &[Vec<usize>]) -> (Vec<usize>, usize) {
    let q = a.len().max(b.len());
    let sets_b: Vec<BTreeSet<usize>> = (0..q).map(|j| b.get(j).map(|g| g.iter().copied().collect()).unwrap_or_default()).collect();
    let overlap: Vec<Vec<usize>> = (0..q)
        .map(|i| {
            let ga = a.get(i).map(Vec::as_slice).unwrap_or(&[]);
            (0..q).map(|j| ga.iter().filter(|c| sets_b[j].contains(c)).count()).collect()
        })
        .collect();
    if q <= 8 {
        let mut best = (Vec::new(), 0usize);
        for p in permutations(q) {
            let s: usize = p.iter().enumerate().map(|(i, &j)| overlap[i][j]).sum();
            if best.0.is_empty() || s > best.1 {
                best = (p, s);
            }
        }
        return best;
    }
    let mut pairs: Vec<(usize, usize, usize)> = (0..q).flat_map(|i| (0..q).map(move |j| (i, j, 0))).collect();
    for pr in pairs.iter_mut() {
        pr.2 = overlap[pr.0][pr.1];
    }
    pairs.sort_by(|x, y| y.2.cmp(&x.2).then(x.0.cmp(&y.0)).then(x.1.cmp(&y.1)));
    let mut m = vec![usize::MAX; q];
    let mut used = vec![false; q];
    let mut total = 0;
    for (i, j, s) in pairs {
        if m[i] == usize::MAX && !used[j] {
            m[i] = j;
            used[j] = true;
            total += s;
        }
    }
    (m, total)
}

/// Share of pairs from `a` that appear in the same relative order in `b`.
/// Both sequences must hold the same elements.
pub fn kendall_similarity(a: &[usize], b: &[usize]) -> f64 {
    let pos: BTreeMap<usize, usize> = b.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let (mut conc, mut total) = (0usize, 0usize);
    for i in 0..a.len() {
        for j in (i + 1)..a.len() {
            total += 1;
            if pos[&a[i]] < pos[&a[j]] {
                conc += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        conc as f64 / total as f64
    }
}

fn restrict(route: &[usize], keep: &BTreeSet<usize>) -> Vec<usize> {
    route.iter().copied().filter(|c| keep.contains(c)).collect()
}

fn matched_pairs<'a>(plan: &'a [Vec<usize>], expert: &'a [Vec<usize>]) -> (Vec<(&'a [usize], &'a [usize])>, usize) {
    let (m, matched) = best_matching(plan, expert);
    let pairs = m
        .iter()
        .enumerate()
        .filter_map(|(i, &j)| Some((plan.get(i)?.as_slice(), expert.get(j)?.as_slice())))
        .collect();
    (pairs, matched)
}

/// `(division, order)` similarity of two plans given as per-UAV city orders.
/// Division is the share of expert cities assigned to the matched UAV. Order
/// is the mean Kendall similarity over matched routes on their shared
/// cities, taken in whichever direction agrees better.
pub fn similarity_metrics(plan: &[Vec<usize>], expert: &[Vec<usize>]) -> (f64, f64) {
    let n: usize = expert.iter().flatten().collect::<BTreeSet<_>>().len();
    if n == 0 {
        return (1.0, 1.0);
    }
    let (pairs, matched) = matched_pairs(plan, expert);
    let mut sims = Vec::new();
    for (a, b) in pairs {
        let sa: BTreeSet<usize> = a.iter().copied().collect();
        let sb: BTreeSet<usize> = b.iter().copied().collect();
        let shared: BTreeSet<usize> = sa.intersection(&sb).copied().collect();
        if shared.len() < 2 {
            continue;
        }
        let s = kendall_similarity(&restrict(a, &shared), &restrict(b, &shared));
        sims.push(s.max(1.0 - s));
    }
    let order = if sims.is_empty() { 1.0 } else { sims.iter().sum::<f64>() / sims.len() as f64 };
    (matched as f64 / n as f64, order)
}

/// Matched routes agree on the order of their shared cities, read forwards
/// or backwards.
pub fn orders_match(plan: &[Vec<usize>], expert: &[Vec<usize>]) -> bool {
    let (pairs, _) = matched_pairs(plan, expert);
    pairs.iter().all(|(a, b)| {
        let sa: BTreeSet<usize> = a.iter().copied().collect();
        let sb: BTreeSet<usize> = b.iter().copied().collect();
        let shared: BTreeSet<usize> = sa.intersection(&sb).copied().collect();
        let x = restrict(a, &shared);
        let mut y = restrict(b, &shared);
        if x == y {
            return true;
        }
        y.reverse();
        x == y
    })
}

/// Depot-closed walks of a plan.
pub fn plan_walks(plan: &PlanState) -> Vec<Vec<usize>> {
    plan.routes
        .iter()
        .map(|r| {
            let mut w = vec![0];
            w.extend(r);
            w.push(0);
            w
        })
        .collect()
}

fn division_ok(rec: &RunRecord) -> bool {
    let Some(p) = &rec.plan else { return false };
    let mut seen = BTreeMap::new();
    for c in p.allocation.iter().flatten() {
        *seen.entry(*c).or_insert(0) += 1;
    }
    let all_once = rec.instance.cities.iter().all(|c| seen.get(&c.id) == Some(&1)) && seen.len() == rec.instance.n_cities();
    all_once && rec.mission_delta.is_finite() && validate_solution(&rec.instance, &p.allocation, &plan_walks(p)).ok
}

fn track_trajectory(rec: &RunRecord, tr: &UavTrack) -> Trajectory {
    let pos: BTreeMap<usize, Vec2> = rec.instance.cities.iter().map(|c| (c.id, c.pos())).collect();
    let mut waypoints = vec![rec.instance.depot];
    waypoints.extend(tr.visited.iter().map(|c| pos[c]));
    if tr.return_time.is_some() {
        waypoints.push(rec.instance.depot);
    }
    Trajectory {
        samples: tr.rows.iter().map(|r| TrajSample { t: r.t, pos: r.truth, vel: r.vel }).collect(),
        waypoints,
        waypoint_marks: tr.marks.clone(),
    }
}

fn majority(words: &[String]) -> Option<&str> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in words {
        *counts.entry(w.as_str()).or_default() += 1;
    }
    let best = counts.values().copied().max()?;
    counts.into_iter().find(|(_, c)| *c == best).map(|(w, _)| w)
}

/// Keeps the first sample at or after each multiple of `dt` from the leg
/// start, plus the final sample.
fn coarsen(seg: &[TrajSample], dt: f64) -> Vec<TrajSample> {
    let Some(first) = seg.first() else { return Vec::new() };
    let mut out = vec![*first];
    let mut next = first.t + dt;
    for s in &seg[1..] {
        if s.t >= next - 1e-9 {
            out.push(*s);
            next += dt * ((s.t - next) / dt).floor().max(0.0) + dt;
        }
    }
    let last = seg[seg.len() - 1];
    if out.last().is_some_and(|o| o.t < last.t) {
        out.push(last);
    }
    out
}

/// Share of flown legs whose observed letter belongs to the motion word
/// that was selected most often during that leg.
pub fn motion_match_fraction(rec: &RunRecord, model: &WorldModel, field: &FieldConfig, abstraction_dt: f64) -> f64 {
    let trajs: Vec<Trajectory> = rec.tracks.iter().map(|t| track_trajectory(rec, t)).collect();
    let (mut hits, mut legs) = (0usize, 0usize);
    for (q, tr) in rec.tracks.iter().enumerate() {
        let others: Vec<Trajectory> = trajs.iter().enumerate().filter(|(r, _)| *r != q).map(|(_, t)| t.clone()).collect();
        let nb = Neighborhood {
            obstacles: &rec.instance.obstacles,
            co_trajectories: &others,
            depot_zone: Some((rec.instance.depot, rec.depot_zone)),
        };
        let traj = &trajs[q];
        for i in 0..traj.n_legs() {
            let seg = coarsen(traj.leg(i), abstraction_dt);
            let target = traj.waypoints[i + 1];
            let f = motion_features(&seg, target, &nb, field).unwrap_or_else(|_| hover_features(&seg, target, &nb, field));
            let observed = model.dictionaries.letter_codebook.assign(&f) as u16;
            let (lo, hi) = (tr.marks[i] + 1, tr.marks[i + 1]);
            let Some(word) = (lo <= hi).then(|| majority(&tr.words[lo..=hi])).flatten() else { continue };
            legs += 1;
            if parse_motion_key(word).letters.contains(&observed) {
                hits += 1;
            }
        }
    }
    if legs == 0 {
        1.0
    } else {
        hits as f64 / legs as f64
    }
}

fn rmse(errs: &[f64]) -> f64 {
    if errs.is_empty() {
        0.0
    } else {
        (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt()
    }
}

/// Metrics of a finished run. Depends only on the record, the model's
/// letter codebook and the config thresholds.
pub fn compute_metrics(rec: &RunRecord, model: &WorldModel, cfg: &SimConfig) -> MetricsReport {
    let depot = rec.instance.depot;
    let steps = rec.tracks.iter().map(|t| t.rows.len()).max().unwrap_or(0);
    let mut min_d: Option<f64> = None;
    let (mut below, mut paired) = (0usize, 0usize);
    for s in 0..steps {
        let air: Vec<Vec2> = rec
            .tracks
            .iter()
            .filter_map(|t| t.rows.get(s))
            .map(|r| r.truth)
            .filter(|p| p.distance(depot) > rec.depot_zone)
            .collect();
        if air.len() < 2 {
            continue;
        }
        paired += 1;
        let mut m = f64::INFINITY;
        for i in 0..air.len() {
            for j in (i + 1)..air.len() {
                m = m.min(air[i].distance(air[j]));
            }
        }
        if m < rec.d_min {
            below += 1;
        }
        min_d = Some(min_d.map_or(m, |x| x.min(m)));
    }
    let total_distance: f64 = rec
        .tracks
        .iter()
        .map(|t| t.rows.windows(2).map(|w| w[0].truth.distance(w[1].truth)).sum::<f64>())
        .sum();
    let rows = || rec.tracks.iter().flat_map(|t| t.rows.iter().skip(1));
    let e_ekf: Vec<f64> = rows().map(|r| r.ekf.distance(r.truth)).collect();
    let e_pf: Vec<f64> = rows().map(|r| r.pf.distance(r.truth)).collect();
    let e_meas: Vec<f64> = rows().map(|r| r.meas.distance(r.truth)).collect();

    let visited: BTreeSet<usize> = rec.tracks.iter().flat_map(|t| t.visited.iter().copied()).collect();
    let all_visited = rec.instance.cities.iter().all(|c| visited.contains(&c.id));
    let all_home = rec.tracks.iter().all(|t| t.return_time.is_some());
    let completion = all_visited && all_home;
    let completion_time = if all_home {
        rec.tracks.iter().filter_map(|t| t.return_time).fold(0.0, f64::max)
    } else {
        rec.end_time
    };

    let plan_routes = rec.plan.as_ref().map(PlanState::city_routes).unwrap_or_default();
    let (division_similarity, order_similarity, ordering) = match &rec.expert_routes {
        Some(ex) => {
            let (d, o) = similarity_metrics(&plan_routes, ex);
            (d, o, orders_match(&plan_routes, ex))
        }
        None => (0.0, 0.0, false),
    };
    let motion_match = motion_match_fraction(rec, model, &cfg.field, cfg.abstraction_dt);
    MetricsReport {
        completion_time,
        total_distance,
        min_inter_uav_distance: min_d,
        below_dmin_fraction: if paired == 0 { 0.0 } else { below as f64 / paired as f64 },
        below_dmin_steps: below,
        paired_steps: paired,
        division_similarity,
        order_similarity,
        rmse_ekf: rmse(&e_ekf),
        rmse_pf: rmse(&e_pf),
        rmse_meas: rmse(&e_meas),
        motion_match_fraction: motion_match,
        abnormality: rec.abnormality.clone(),
        success: SuccessFlags {
            division: division_ok(rec),
            ordering,
            motion: motion_match >= cfg.motion_threshold,
            completion,
        },
        steps: rec.accounting.len(),
        evaluated_candidates: rec.accounting.iter().map(|a| a.evaluated).sum(),
        online_ga_invocations: rec.ga_invocations,
    }
}

/// Plans the expert solution (offline, before the loop), flies the mission
/// online and scores it against the expert.
pub fn evaluate_instance(
    cfg: &SimConfig,
    model: &WorldModel,
    instance: &MissionInstance,
    seed: u64,
) -> Result<(OnlineRun, MetricsReport), RuntimeError> {
    let expert = expert_plan(instance, cfg, seed)?;
    let mut run = run_online(cfg, model, instance, seed)?;
    run.record.expert_routes = Some(expert.city_routes());
    let m = compute_metrics(&run.record, model, cfg);
    Ok((run, m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteEntry {
    pub seed: u64,
    pub n_cities: usize,
    pub uav_count: usize,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuccessRates {
    pub division: f64,
    pub ordering: f64,
    pub motion: f64,
    pub completion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub runs: usize,
    pub failures: Vec<SkippedDemo>,
    pub mean_completion_time: f64,
    pub mean_total_distance: f64,
    pub mean_division_similarity: f64,
    pub mean_order_similarity: f64,
    pub mean_rmse_ekf: f64,
    pub mean_rmse_pf: f64,
    pub mean_rmse_meas: f64,
    pub min_inter_uav_distance: Option<f64>,
    /// Below-`d_min` steps over all paired steps of all runs.
    pub below_dmin_fraction: f64,
    pub success_rates: SuccessRates,
    pub entries: Vec<SuiteEntry>,
}

/// Aggregates entries; the result does not depend on their order.
pub fn summarize(entries: Vec<SuiteEntry>, failures: Vec<SkippedDemo>) -> SuiteReport {
    let n = entries.len().max(1) as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| entries.iter().map(|e| f(&e.metrics)).sum::<f64>() / n;
    let rate = |f: &dyn Fn(&SuccessFlags) -> bool| entries.iter().filter(|e| f(&e.metrics.success)).count() as f64 / n;
    let below: usize = entries.iter().map(|e| e.metrics.below_dmin_steps).sum();
    let paired: usize = entries.iter().map(|e| e.metrics.paired_steps).sum();
    SuiteReport {
        runs: entries.len(),
        mean_completion_time: mean(&|m| m.completion_time),
        mean_total_distance: mean(&|m| m.total_distance),
        mean_division_similarity: mean(&|m| m.division_similarity),
        mean_order_similarity: mean(&|m| m.order_similarity),
        mean_rmse_ekf: mean(&|m| m.rmse_ekf),
        mean_rmse_pf: mean(&|m| m.rmse_pf),
        mean_rmse_meas: mean(&|m| m.rmse_meas),
        min_inter_uav_distance: entries.iter().filter_map(|e| e.metrics.min_inter_uav_distance).reduce(f64::min),
        below_dmin_fraction: if paired == 0 { 0.0 } else { below as f64 / paired as f64 },
        success_rates: SuccessRates {
            division: rate(&|s| s.division),
            ordering: rate(&|s| s.ordering),
            motion: rate(&|s| s.motion),
            completion: rate(&|s| s.completion),
        },
        failures,
        entries,
    }
}

/// One evaluated mission of [`evaluate_seeds`].
#[derive(Debug, Clone)]
pub struct EvaluatedRun {
    pub seed: u64,
    pub instance: MissionInstance,
    pub run: OnlineRun,
    pub metrics: MetricsReport,
}

/// Samples and evaluates one instance per seed concurrently. Results keep the
/// order of `seeds`.
pub fn evaluate_seeds(cfg: &SimConfig, model: &WorldModel, seeds: &[u64]) -> Vec<(u64, Result<EvaluatedRun, RuntimeError>)> {
    seeds
        .par_iter()
        .map(|&seed| {
            let r = cfg.instance.sample(seed).map_err(RuntimeError::from).and_then(|instance| {
                let (run, metrics) = evaluate_instance(cfg, model, &instance, seed)?;
                Ok(EvaluatedRun { seed, instance, run, metrics })
            });
            (seed, r)
        })
        .collect()
}

/// Evaluates `cfg.n_test` fresh instances concurrently.
pub fn evaluate_suite(cfg: &SimConfig, model: &WorldModel) -> Result<SuiteReport, RuntimeError> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.n_test as u64).map(|i| cfg.test_seed + i).collect();
    let results: Vec<Result<SuiteEntry, (u64, String)>> = seeds
        .par_iter()
        .map(|&seed| {
            let inst = cfg.instance.sample(seed).map_err(|e| (seed, e.to_string()))?;
            let (_, metrics) = evaluate_instance(cfg, model, &inst, seed).map_err(|e| (seed, e.to_string()))?;
            Ok(SuiteEntry { seed, n_cities: inst.n_cities(), uav_count: inst.uav_count, metrics })
        })
        .collect();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(e) => entries.push(e),
            Err((seed, reason)) => {
                log::warn!("test mission {seed} failed: {reason}");
                failures.push(SkippedDemo { seed, reason });
            }
        }
    }
    Ok(summarize(entries, failures))
}

/// Two UAVs that cross paths head-on along `y = 500`, their lines offset by
/// `lateral_offset`, with the plan fixed so the encounter always happens.
pub fn head_on_scenario(lateral_offset: f64) -> (MissionInstance, PlanState) {
    let inst = MissionInstance {
        seed: 0,
        area: Area::new(1000.0, 1000.0),
        depot: Vec2::new(500.0, 300.0),
        cities: vec![
            City::new(1, Vec2::new(800.0, 500.0)),
            City::new(2, Vec2::new(200.0, 500.0 + lateral_offset)),
            City::new(3, Vec2::new(200.0, 500.0)),
            City::new(4, Vec2::new(800.0, 500.0 - lateral_offset)),
        ],
        obstacles: Vec::new(),
        uav_count: 2,
        altitude: DEFAULT_ALTITUDE_M,
    };
    let plan = PlanState {
        allocation: vec![vec![1, 2], vec![3, 4]],
        routes: vec![vec![1, 2], vec![3, 4]],
        progress: vec![0, 0],
        mission_keys: vec![String::new(); 2],
        route_keys: vec![String::new(); 2],
    };
    (inst, plan)
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(tmp, path)
}

/// Per-sample estimator log: truth, measurement and EKF estimate.
pub fn write_filter_trace<W: Write>(w: W, rec: &RunRecord) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["t", "uav_id", "truth_x", "truth_y", "meas_x", "meas_y", "est_x", "est_y", "trace_P"])?;
    for tr in &rec.tracks {
        for r in tr.rows.iter().skip(1) {
            wr.write_record([
                r.t.to_string(),
                tr.uav.to_string(),
                r.truth.x.to_string(),
                r.truth.y.to_string(),
                r.meas.x.to_string(),
                r.meas.y.to_string(),
                r.ekf.x.to_string(),
                r.ekf.y.to_string(),
                r.trace_p.to_string(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub const METRICS_FILE: &str = "metrics.json";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const FILTER_TRACE_FILE: &str = "filter_trace.csv";
pub const RUN_RECORD_FILE: &str = "run_record.json";

/// Writes the metrics, decision trace, filter trace and run record into
/// `dir` and returns the written paths.
pub fn write_run(dir: &Path, run: &OnlineRun, metrics: Option<&MetricsReport>) -> Result<Vec<PathBuf>, RuntimeError> {
    std::fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> std::io::Result<()> {
        let p = dir.join(name);
        write_atomic(&p, &bytes)?;
        out.push(p);
        Ok(())
    };
    let mut decisions = Vec::new();
    inference::write_trace(&mut decisions, &run.trace)?;
    emit(DECISIONS_FILE, decisions)?;
    let mut ft = Vec::new();
    write_filter_trace(&mut ft, &run.record)?;
    emit(FILTER_TRACE_FILE, ft)?;
    emit(RUN_RECORD_FILE, serde_json::to_vec(&run.record)?)?;
    if let Some(m) = metrics {
        emit(METRICS_FILE, serde_json::to_vec_pretty(m)?)?;
    }
    Ok(out)
}

pub fn load_run_record(path: &Path) -> Result<RunRecord, RuntimeError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
