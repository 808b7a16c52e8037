//! Genetic-algorithm expert planner with potential-field trajectory
//! synthesis. Produces the demonstrations the world model is learned from.

use std::cell::Cell;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;
use crate::potential_field::{self, FieldConfig, FieldError, Neighborhood, TrajSample, Trajectory};
use crate::scenario::{self, DistanceMatrix, MissionInstance, Obstacle};

thread_local! {
    static GA_INVOCATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`evolve`] calls made on the current thread.
pub fn ga_invocations() -> u64 {
    GA_INVOCATIONS.with(|c| c.get())
}

#[derive(Debug, Error)]
pub enum GaError {
    #[error("invalid GA config: {0}")]
    InvalidConfig(String),
    #[error("instance has no cities")]
    NoCities,
    #[error("trajectory synthesis failed for UAV {uav} even with a doubled step budget: {source}")]
    Trajectory {
        uav: usize,
        #[source]
        source: FieldError,
    },
    #[error("decoded plan is infeasible: {0}")]
    Infeasible(String),
    #[error("demonstration I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("demonstration format: {0}")]
    Format(#[from] serde_json::Error),
    #[error("demonstration CSV: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GAConfig {
    pub population: usize,
    pub generations: usize,
    pub tournament_k: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    pub elitism: usize,
    pub mu_bal: f64,
    pub mu_obs: f64,
    pub mu_uav: f64,
    pub seed: u64,
    /// Permit UAVs with empty routes. Forced on when there are fewer cities
    /// than UAVs.
    pub allow_idle: bool,
    /// Sampling period of the straight-line safety proxies (s).
    pub proxy_dt: f64,
}

impl Default for GAConfig {
    fn default() -> Self {
        Self {
            population: 200,
            generations: 500,
            tournament_k: 3,
            crossover_rate: 0.9,
            mutation_rate: 0.2,
            elitism: 2,
            mu_bal: 1e-4,
            mu_obs: 1000.0,
            mu_uav: 1000.0,
            seed: 0,
            allow_idle: false,
            proxy_dt: 1.0,
        }
    }
}

impl GAConfig {
    pub fn validate(&self) -> Result<(), GaError> {
        let bad = |m: String| Err(GaError::InvalidConfig(m));
        if self.population < 2 {
            return bad(format!("population must be >= 2, got {}", self.population));
        }
        if self.tournament_k == 0 {
            return bad("tournament_k must be >= 1".into());
        }
        for (n, r) in [("crossover_rate", self.crossover_rate), ("mutation_rate", self.mutation_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{n} must lie in [0, 1], got {r}"));
            }
        }
        if self.elitism >= self.population {
            return bad(format!("elitism {} must be below population {}", self.elitism, self.population));
        }
        for (n, w) in [("mu_bal", self.mu_bal), ("mu_obs", self.mu_obs), ("mu_uav", self.mu_uav)] {
            if !(w >= 0.0 && w.is_finite()) {
                return bad(format!("{n} must be >= 0, got {w}"));
            }
        }
        if !(self.proxy_dt > 0.0) {
            return bad(format!("proxy_dt must be > 0, got {}", self.proxy_dt));
        }
        Ok(())
    }
}

/// Grand tour over all cities plus `Q - 1` cut positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chromosome {
    pub grand_tour: Vec<usize>,
    pub breaks: Vec<usize>,
}

impl Chromosome {
    /// Splits the grand tour into per-UAV city lists (no depot entries).
    pub fn decode(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::with_capacity(self.breaks.len() + 1);
        let mut start = 0;
        for &b in &self.breaks {
            out.push(self.grand_tour[start..b].to_vec());
            start = b;
        }
        out.push(self.grand_tour[start..].to_vec());
        out
    }

    pub fn is_valid(&self, n: usize, q: usize, allow_idle: bool) -> bool {
        if self.grand_tour.len() != n || self.breaks.len() + 1 != q {
            return false;
        }
        let mut seen = vec![false; n + 1];
        for &c in &self.grand_tour {
            if c == 0 || c > n || seen[c] {
                return false;
            }
            seen[c] = true;
        }
        let mut prev = 0;
        for &b in &self.breaks {
            if b > n || b < prev || (!allow_idle && (b == prev || b == n)) {
                return false;
            }
            prev = b;
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub j_dist: f64,
    pub j_bal: f64,
    pub j_obs: f64,
    pub j_uav: f64,
    pub total: f64,
}

/// Closed tour length depot -> route -> depot. `route` holds cities only.
pub fn route_length(route: &[usize], dmat: &DistanceMatrix) -> f64 {
    if route.is_empty() {
        return 0.0;
    }
    let mut len = dmat.get(0, route[0]) + dmat.get(*route.last().unwrap(), 0);
    for w in route.windows(2) {
        len += dmat.get(w[0], w[1]);
    }
    len
}

pub fn distance_cost(routes: &[Vec<usize>], dmat: &DistanceMatrix) -> f64 {
    routes.iter().map(|r| route_length(r, dmat)).sum()
}

/// Sum of squared deviations of the given lengths from their mean.
pub fn balance_of_lengths(lengths: &[f64]) -> f64 {
    if lengths.is_empty() {
        return 0.0;
    }
    let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
    lengths.iter().map(|l| (l - mean).powi(2)).sum()
}

pub fn balance_cost(routes: &[Vec<usize>], dmat: &DistanceMatrix) -> f64 {
    let lens: Vec<f64> = routes.iter().map(|r| route_length(r, dmat)).collect();
    balance_of_lengths(&lens)
}

/// Squared-hinge separation penalties `(J_obs, J_uav)`, integrated by the
/// trapezoid rule over a common time grid. Inter-UAV terms count ordered
/// pairs and only while both UAVs are airborne.
pub fn safety_penalties(
    trajectories: &[Trajectory],
    obstacles: &[Obstacle],
    cfg: &FieldConfig,
    depot_zone: Option<(Vec2, f64)>,
) -> (f64, f64) {
    let t_end = trajectories.iter().map(|t| t.end_time()).fold(0.0, f64::max);
    let h = trajectories
        .iter()
        .find(|t| t.samples.len() >= 2)
        .map(|t| t.samples[1].t - t.samples[0].t);
    let grid: Vec<f64> = match h {
        Some(h) if h > 0.0 && t_end > 0.0 => {
            let n = (t_end / h - 1e-9).ceil() as usize;
            (0..=n).map(|k| (k as f64 * h).min(t_end)).collect()
        }
        _ => vec![0.0],
    };
    let mut obs_f = Vec::with_capacity(grid.len());
    let mut uav_f = Vec::with_capacity(grid.len());
    for &t in &grid {
        let mut fo = 0.0;
        for tr in trajectories {
            let x = tr.position_at(t);
            for o in obstacles {
                fo += (cfg.d_min_obs - o.surface_distance(x)).max(0.0).powi(2);
            }
        }
        let pos: Vec<Option<Vec2>> = trajectories.iter().map(|tr| tr.airborne_at(t, depot_zone)).collect();
        let mut fu = 0.0;
        for (i, a) in pos.iter().enumerate() {
            for (j, b) in pos.iter().enumerate() {
                if i == j {
                    continue;
                }
                if let (Some(a), Some(b)) = (a, b) {
                    fu += (cfg.d_min - a.distance(*b)).max(0.0).powi(2);
                }
            }
        }
        obs_f.push(fo);
        uav_f.push(fu);
    }
    let trap = |f: &[f64]| -> f64 {
        grid.windows(2)
            .zip(f.windows(2))
            .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
            .sum()
    };
    (trap(&obs_f), trap(&uav_f))
}

/// Constant-speed straight-line flight along `points`, sampled every `dt`.
pub fn straight_line_trajectory(points: &[Vec2], speed: f64, dt: f64) -> Trajectory {
    if points.len() < 2 {
        return Trajectory::hold(points.first().copied().unwrap_or(Vec2::ZERO));
    }
    let seg_len: Vec<f64> = points.windows(2).map(|w| w[0].distance(w[1])).collect();
    let total: f64 = seg_len.iter().sum();
    let n = ((total / (speed * dt)) - 1e-9).ceil().max(0.0) as usize;
    let mut samples = Vec::with_capacity(n + 1);
    let mut marks = vec![0];
    let mut seg = 0;
    let mut seg_start = 0.0;
    for k in 0..=n {
        let s = (k as f64 * speed * dt).min(total);
        while seg + 1 < seg_len.len() && s > seg_start + seg_len[seg] {
            seg_start += seg_len[seg];
            seg += 1;
            marks.push(k.saturating_sub(1));
        }
        let a = points[seg];
        let b = points[seg + 1];
        let dir = (b - a).normalized().unwrap_or(Vec2::ZERO);
        let pos = a + dir * (s - seg_start).min(seg_len[seg]);
        samples.push(TrajSample { t: k as f64 * dt, pos, vel: dir * speed });
    }
    while marks.len() < points.len() {
        marks.push(n);
    }
    Trajectory {
        samples,
        waypoints: points.to_vec(),
        waypoint_marks: marks,
    }
}

/// Everything the fitness function needs, precomputed once per instance.
pub struct FitnessContext<'a> {
    pub instance: &'a MissionInstance,
    pub dmat: DistanceMatrix,
    pub cfg: &'a GAConfig,
    pub field: &'a FieldConfig,
}

impl<'a> FitnessContext<'a> {
    pub fn new(instance: &'a MissionInstance, cfg: &'a GAConfig, field: &'a FieldConfig) -> Self {
        Self {
            instance,
            dmat: scenario::distance_matrix(instance),
            cfg,
            field,
        }
    }

    pub fn depot_zone(&self) -> Option<(Vec2, f64)> {
        Some((self.instance.depot, self.field.depot_zone_radius()))
    }

    fn waypoints(&self, route: &[usize]) -> Vec<Vec2> {
        let mut w = Vec::with_capacity(route.len() + 2);
        w.push(self.instance.depot);
        w.extend(route.iter().map(|&c| self.instance.node_pos(c)));
        w.push(self.instance.depot);
        w
    }

    /// Objective with safety terms evaluated on straight-line proxies.
    pub fn proxy_cost(&self, routes: &[Vec<usize>]) -> CostBreakdown {
        let lens: Vec<f64> = routes.iter().map(|r| route_length(r, &self.dmat)).collect();
        let j_dist: f64 = lens.iter().sum();
        let j_bal = balance_of_lengths(&lens);
        let need_obs = self.cfg.mu_obs > 0.0 && !self.instance.obstacles.is_empty();
        let need_uav = self.cfg.mu_uav > 0.0 && routes.iter().filter(|r| !r.is_empty()).count() >= 2;
        let (j_obs, j_uav) = if need_obs || need_uav {
            let trajs: Vec<Trajectory> = routes
                .iter()
                .map(|r| {
                    if r.is_empty() {
                        Trajectory::hold(self.instance.depot)
                    } else {
                        straight_line_trajectory(&self.waypoints(r), self.field.v_max, self.cfg.proxy_dt)
                    }
                })
                .collect();
            let obstacles: &[Obstacle] = if need_obs { &self.instance.obstacles } else { &[] };
            let (o, u) = safety_penalties(&trajs, obstacles, self.field, self.depot_zone());
            (o, if need_uav { u } else { 0.0 })
        } else {
            (0.0, 0.0)
        };
        self.combine(j_dist, j_bal, j_obs, j_uav)
    }

    fn combine(&self, j_dist: f64, j_bal: f64, j_obs: f64, j_uav: f64) -> CostBreakdown {
        CostBreakdown {
            j_dist,
            j_bal,
            j_obs,
            j_uav,
            total: j_dist + self.cfg.mu_bal * j_bal + self.cfg.mu_obs * j_obs + self.cfg.mu_uav * j_uav,
        }
    }

    /// Synthesizes potential-field trajectories UAV by UAV, each one
    /// reacting to the UAVs synthesized before it.
    pub fn synthesize(&self, routes: &[Vec<usize>]) -> Result<Vec<Trajectory>, GaError> {
        let mut trajs: Vec<Trajectory> = Vec::with_capacity(routes.len());
        for (q, r) in routes.iter().enumerate() {
            if r.is_empty() {
                trajs.push(Trajectory::hold(self.instance.depot));
                continue;
            }
            let wp = self.waypoints(r);
            let nb = Neighborhood {
                obstacles: &self.instance.obstacles,
                co_trajectories: &trajs,
                depot_zone: self.depot_zone(),
            };
            let tr = match potential_field::synthesize_trajectory(&wp, &nb, self.field) {
                Ok(t) => t,
                Err(FieldError::NonConvergence { .. }) => {
                    let doubled = FieldConfig {
                        step_budget: self.field.step_budget * 2,
                        ..*self.field
                    };
                    log::warn!("UAV {q}: trajectory did not converge, retrying with budget {}", doubled.step_budget);
                    potential_field::synthesize_trajectory(&wp, &nb, &doubled)
                        .map_err(|e| GaError::Trajectory { uav: q, source: e })?
                }
                Err(e) => return Err(GaError::Trajectory { uav: q, source: e }),
            };
            trajs.push(tr);
        }
        Ok(trajs)
    }

    /// Objective with safety terms evaluated on synthesized trajectories.
    pub fn exact_cost(&self, routes: &[Vec<usize>], trajectories: &[Trajectory]) -> CostBreakdown {
        let lens: Vec<f64> = routes.iter().map(|r| route_length(r, &self.dmat)).collect();
        let (j_obs, j_uav) =
            safety_penalties(trajectories, &self.instance.obstacles, self.field, self.depot_zone());
        self.combine(lens.iter().sum(), balance_of_lengths(&lens), j_obs, j_uav)
    }
}

pub fn fitness(chrom: &Chromosome, ctx: &FitnessContext<'_>) -> f64 {
    ctx.proxy_cost(&chrom.decode()).total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertDemonstration {
    pub instance: MissionInstance,
    /// Sorted city set per UAV.
    pub allocation: Vec<Vec<usize>>,
    /// Node walk per UAV, depot (0) at both ends.
    pub routes: Vec<Vec<usize>>,
    pub trajectories: Vec<Trajectory>,
    /// Objective value the search minimized (proxy safety terms).
    pub search_cost: f64,
    /// Objective re-evaluated on the synthesized trajectories.
    pub cost_breakdown: CostBreakdown,
    /// Best-so-far search cost after each generation.
    pub history: Vec<f64>,
}

impl ExpertDemonstration {
    /// Per-UAV city lists without depot entries.
    pub fn city_routes(&self) -> Vec<Vec<usize>> {
        self.routes
            .iter()
            .map(|r| r.iter().copied().filter(|&c| c != 0).collect())
            .collect()
    }
}

fn effective_idle(instance: &MissionInstance, cfg: &GAConfig) -> bool {
    cfg.allow_idle || instance.n_cities() < instance.uav_count
}

fn even_breaks(n: usize, q: usize) -> Vec<usize> {
    (1..q).map(|k| (k * n + q / 2) / q).collect()
}

fn random_breaks(rng: &mut ChaCha8Rng, n: usize, q: usize, allow_idle: bool) -> Vec<usize> {
    if q == 1 {
        return Vec::new();
    }
    let mut b: Vec<usize> = if allow_idle {
        (0..q - 1).map(|_| rng.random_range(0..=n)).collect()
    } else {
        rand::seq::index::sample(rng, n - 1, q - 1).into_iter().map(|i| i + 1).collect()
    };
    b.sort_unstable();
    b
}

/// Nearest-neighbour grand tour from the depot, cut into near-equal chunks.
pub fn nearest_neighbor_chromosome(instance: &MissionInstance, dmat: &DistanceMatrix) -> Chromosome {
    let n = instance.n_cities();
    let mut left: Vec<usize> = (1..=n).collect();
    let mut tour = Vec::with_capacity(n);
    let mut cur = 0;
    while !left.is_empty() {
        let (k, _) = left
            .iter()
            .enumerate()
            .min_by(|a, b| dmat.get(cur, *a.1).total_cmp(&dmat.get(cur, *b.1)).then(a.1.cmp(b.1)))
            .unwrap();
        cur = left.remove(k);
        tour.push(cur);
    }
    Chromosome {
        grand_tour: tour,
        breaks: even_breaks(n, instance.uav_count),
    }
}

fn tournament<'p>(rng: &mut ChaCha8Rng, pop: &'p [(Chromosome, f64)], k: usize) -> &'p Chromosome {
    let mut best = rng.random_range(0..pop.len());
    for _ in 1..k {
        let c = rng.random_range(0..pop.len());
        if pop[c].1 < pop[best].1 {
            best = c;
        }
    }
    &pop[best].0
}

/// Ordered crossover: keep a slice of `a`, fill the rest in `b`'s order.
pub fn ordered_crossover(a: &[usize], b: &[usize], i: usize, j: usize) -> Vec<usize> {
    let n = a.len();
    let (i, j) = (i.min(j), i.max(j));
    let mut child = vec![0usize; n];
    let mut used = std::collections::HashSet::with_capacity(n);
    for k in i..=j {
        child[k] = a[k];
        used.insert(a[k]);
    }
    let mut fill = b.iter().filter(|c| !used.contains(c));
    for (k, slot) in child.iter_mut().enumerate() {
        if k < i || k > j {
            *slot = *fill.next().expect("parents are permutations of the same set");
        }
    }
    child
}

fn mutate(rng: &mut ChaCha8Rng, c: &mut Chromosome, rate: f64, allow_idle: bool) {
    let n = c.grand_tour.len();
    if n >= 2 && rng.random_bool(rate) {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        c.grand_tour.swap(i, j);
    }
    if n >= 2 && rng.random_bool(rate) {
        let i = rng.random_range(0..n);
        let j = rng.random_range(0..n);
        let (i, j) = (i.min(j), i.max(j));
        c.grand_tour[i..=j].reverse();
    }
    if !c.breaks.is_empty() && rng.random_bool(rate) {
        let q = c.breaks.len() + 1;
        let k = rng.random_range(0..c.breaks.len());
        let lo = if k == 0 { 0 } else { c.breaks[k - 1] };
        let hi = if k + 1 == c.breaks.len() { n } else { c.breaks[k + 1] };
        let (lo, hi) = if allow_idle { (lo, hi) } else { (lo + 1, hi.saturating_sub(1)) };
        if lo <= hi {
            c.breaks[k] = rng.random_range(lo..=hi);
        }
        debug_assert_eq!(c.breaks.len() + 1, q);
    }
}

/// Runs the GA on `instance` and returns the decoded, trajectory-annotated
/// best plan. Deterministic for a given `cfg.seed`.
pub fn evolve(instance: &MissionInstance, cfg: &GAConfig, field: &FieldConfig) -> Result<ExpertDemonstration, GaError> {
    GA_INVOCATIONS.with(|c| c.set(c.get() + 1));
    cfg.validate()?;
    field
        .validate()
        .map_err(|e| GaError::InvalidConfig(e.to_string()))?;
    instance
        .check()
        .map_err(|e| GaError::InvalidConfig(e.to_string()))?;
    let n = instance.n_cities();
    if n == 0 {
        return Err(GaError::NoCities);
    }
    let q = instance.uav_count;
    let allow_idle = effective_idle(instance, cfg);
    let ctx = FitnessContext::new(instance, cfg, field);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut seeds = vec![nearest_neighbor_chromosome(instance, &ctx.dmat)];
    if allow_idle && n < q {
        // Even cuts may be invalid without idle UAVs only; with idle they are fine.
        seeds[0].breaks = even_breaks(n, q);
    }
    while seeds.len() < cfg.population {
        let mut tour: Vec<usize> = (1..=n).collect();
        tour.shuffle(&mut rng);
        seeds.push(Chromosome {
            grand_tour: tour,
            breaks: random_breaks(&mut rng, n, q, allow_idle),
        });
    }
    let eval = |pop: Vec<Chromosome>| -> Vec<(Chromosome, f64)> {
        let f: Vec<f64> = pop.par_iter().map(|c| fitness(c, &ctx)).collect();
        pop.into_iter().zip(f).collect()
    };
    let sort = |pop: &mut Vec<(Chromosome, f64)>| {
        pop.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.grand_tour.cmp(&b.0.grand_tour)).then_with(|| a.0.breaks.cmp(&b.0.breaks)));
    };
    let mut pop = eval(seeds);
    sort(&mut pop);
    let mut history = Vec::with_capacity(cfg.generations + 1);
    history.push(pop[0].1);

    for _ in 0..cfg.generations {
        let mut next: Vec<Chromosome> = pop.iter().take(cfg.elitism).map(|p| p.0.clone()).collect();
        while next.len() < cfg.population {
            let a = tournament(&mut rng, &pop, cfg.tournament_k);
            let b = tournament(&mut rng, &pop, cfg.tournament_k);
            let mut child = if rng.random_bool(cfg.crossover_rate) {
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..n);
                let breaks = if rng.random_bool(0.5) { a.breaks.clone() } else { b.breaks.clone() };
                Chromosome {
                    grand_tour: ordered_crossover(&a.grand_tour, &b.grand_tour, i, j),
                    breaks,
                }
            } else {
                a.clone()
            };
            mutate(&mut rng, &mut child, cfg.mutation_rate, allow_idle);
            debug_assert!(child.is_valid(n, q, allow_idle));
            next.push(child);
        }
        // Elites are re-evaluated too; fitness is pure so values are unchanged.
        pop = eval(next);
        sort(&mut pop);
        let best = pop[0].1.min(*history.last().unwrap());
        history.push(best);
    }

    let best = &pop[0].0;
    let city_routes = best.decode();
    let walks = scenario::close_routes(&city_routes);
    let allocation = scenario::allocation_of(&city_routes);
    let report = scenario::validate_solution(instance, &allocation, &walks);
    if !report.ok {
        return Err(GaError::Infeasible(format!("{:?}", report.violations)));
    }
    let trajectories = ctx.synthesize(&city_routes)?;
    let cost_breakdown = ctx.exact_cost(&city_routes, &trajectories);
    Ok(ExpertDemonstration {
        instance: instance.clone(),
        allocation,
        routes: walks,
        trajectories,
        search_cost: pop[0].1,
        cost_breakdown,
        history,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DemoFile {
    instance_ref: String,
    instance: MissionInstance,
    allocation: Vec<Vec<usize>>,
    routes: Vec<Vec<usize>>,
    waypoint_marks: Vec<Vec<usize>>,
    search_cost: f64,
    cost_breakdown: CostBreakdown,
    history: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    t: f64,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    uav_id: usize,
}

/// Writes `<stem>.json` plus `<stem>_uav<q>.csv` per UAV into `dir`.
pub fn save_demonstration(demo: &ExpertDemonstration, dir: &Path, stem: &str) -> Result<(), GaError> {
    std::fs::create_dir_all(dir)?;
    let file = DemoFile {
        instance_ref: format!("{stem}.json#instance"),
        instance: demo.instance.clone(),
        allocation: demo.allocation.clone(),
        routes: demo.routes.clone(),
        waypoint_marks: demo.trajectories.iter().map(|t| t.waypoint_marks.clone()).collect(),
        search_cost: demo.search_cost,
        cost_breakdown: demo.cost_breakdown,
        history: demo.history.clone(),
    };
    let tmp = dir.join(format!("{stem}.json.tmp"));
    for (q, tr) in demo.trajectories.iter().enumerate() {
        let mut w = csv::Writer::from_path(dir.join(format!("{stem}_uav{q}.csv")))?;
        for s in &tr.samples {
            w.serialize(CsvRow { t: s.t, x: s.pos.x, y: s.pos.y, vx: s.vel.x, vy: s.vel.y, uav_id: q })?;
        }
        w.flush()?;
    }
    std::fs::write(&tmp, serde_json::to_string_pretty(&file)?)?;
    std::fs::rename(tmp, dir.join(format!("{stem}.json")))?;
    Ok(())
}

pub fn load_demonstration(dir: &Path, stem: &str) -> Result<ExpertDemonstration, GaError> {
    let text = std::fs::read_to_string(dir.join(format!("{stem}.json")))?;
    let file: DemoFile = serde_json::from_str(&text)?;
    let mut trajectories = Vec::with_capacity(file.routes.len());
    for (q, walk) in file.routes.iter().enumerate() {
        let mut rd = csv::Reader::from_path(dir.join(format!("{stem}_uav{q}.csv")))?;
        let mut samples = Vec::new();
        for row in rd.deserialize() {
            let r: CsvRow = row?;
            samples.push(TrajSample { t: r.t, pos: Vec2::new(r.x, r.y), vel: Vec2::new(r.vx, r.vy) });
        }
        let waypoints: Vec<Vec2> = if walk.len() >= 2 {
            walk.iter().map(|&c| file.instance.node_pos(c)).collect()
        } else {
            vec![file.instance.depot, file.instance.depot]
        };
        let marks = file.waypoint_marks.get(q).cloned().unwrap_or_default();
        if samples.is_empty() || marks.len() != waypoints.len() || marks.iter().any(|&m| m >= samples.len()) {
            return Err(GaError::Infeasible(format!("{stem}: trajectory of UAV {q} does not match its route")));
        }
        trajectories.push(Trajectory { samples, waypoints, waypoint_marks: marks });
    }
    Ok(ExpertDemonstration {
        instance: file.instance,
        allocation: file.allocation,
        routes: file.routes,
        trajectories,
        search_cost: file.search_cost,
        cost_breakdown: file.cost_breakdown,
        history: file.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{Area, City, DEFAULT_ALTITUDE_M};
    use proptest::prelude::*;

    fn inst(points: &[(f64, f64)], q: usize) -> MissionInstance {
        MissionInstance {
            seed: 0,
            area: Area::new(400.0, 400.0),
            depot: Vec2::ZERO,
            cities: points.iter().enumerate().map(|(k, &(x, y))| City::new(k + 1, Vec2::new(x, y))).collect(),
            obstacles: vec![],
            uav_count: q,
            altitude: DEFAULT_ALTITUDE_M,
        }
    }

    fn corners() -> MissionInstance {
        inst(&[(100.0, 100.0), (-100.0, 100.0), (-100.0, -100.0), (100.0, -100.0)], 1)
    }

    fn small_cfg(seed: u64) -> GAConfig {
        GAConfig { population: 60, generations: 80, seed, ..GAConfig::default() }
    }

    #[test]
    fn distance_examples() {
        let i = inst(&[(3.0, 4.0)], 1);
        let d = scenario::distance_matrix(&i);
        assert_eq!(distance_cost(&[vec![1]], &d), 10.0);
        let c = corners();
        let d = scenario::distance_matrix(&c);
        let j = distance_cost(&[vec![1, 2, 3, 4]], &d);
        assert!((j - 882.84).abs() < 0.01);
        let two = inst(&[(10.0, 0.0), (0.0, 20.0)], 2);
        let d = scenario::distance_matrix(&two);
        assert_eq!(distance_cost(&[vec![1], vec![2]], &d), distance_cost(&[vec![2], vec![1]], &d));
    }

    #[test]
    fn balance_examples() {
        assert_eq!(balance_of_lengths(&[10.0, 10.0]), 0.0);
        assert_eq!(balance_of_lengths(&[10.0, 20.0]), 50.0);
        assert_eq!(balance_of_lengths(&[7.0]), 0.0);
    }

    fn stationary(p: Vec2, t_end: f64) -> Trajectory {
        Trajectory {
            samples: vec![TrajSample { t: 0.0, pos: p, vel: Vec2::ZERO }, TrajSample { t: t_end, pos: p, vel: Vec2::ZERO }],
            waypoints: vec![p, p],
            waypoint_marks: vec![0, 1],
        }
    }

    #[test]
    fn safety_examples() {
        let cfg = FieldConfig::default();
        let far = [stationary(Vec2::ZERO, 1.0), stationary(Vec2::new(100.0, 0.0), 1.0)];
        assert_eq!(safety_penalties(&far, &[], &cfg, None), (0.0, 0.0));
        let near = [stationary(Vec2::ZERO, 1.0), stationary(Vec2::new(cfg.d_min / 2.0, 0.0), 1.0)];
        let (_, ju) = safety_penalties(&near, &[], &cfg, None);
        assert!((ju - 2.0 * (cfg.d_min / 2.0).powi(2) * 1.0).abs() < 1e-12);
        let (_, ju) = safety_penalties(&near[..1], &[], &cfg, None);
        assert_eq!(ju, 0.0);
    }

    #[test]
    fn zero_weights_give_distance() {
        let c = inst(&[(50.0, 0.0), (0.0, 60.0), (-40.0, 10.0)], 2);
        let cfg = GAConfig { mu_bal: 0.0, mu_obs: 0.0, mu_uav: 0.0, ..GAConfig::default() };
        let f = FieldConfig::default();
        let ctx = FitnessContext::new(&c, &cfg, &f);
        let ch = Chromosome { grand_tour: vec![1, 3, 2], breaks: vec![1] };
        assert_eq!(fitness(&ch, &ctx), distance_cost(&ch.decode(), &ctx.dmat));
        let rev = Chromosome { grand_tour: vec![1, 2, 3], breaks: vec![1] };
        assert!((fitness(&rev, &ctx) - fitness(&ch, &ctx)).abs() < 1e-9);
    }

    fn permutations(items: &[usize]) -> Vec<Vec<usize>> {
        if items.len() <= 1 {
            return vec![items.to_vec()];
        }
        let mut out = Vec::new();
        for i in 0..items.len() {
            let mut rest = items.to_vec();
            let x = rest.remove(i);
            for mut p in permutations(&rest) {
                p.insert(0, x);
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn corner_optimum_by_brute_force() {
        let c = corners();
        let cfg = GAConfig::default();
        let f = FieldConfig::default();
        let ctx = FitnessContext::new(&c, &cfg, &f);
        let best = permutations(&[1, 2, 3, 4])
            .into_iter()
            .map(|p| fitness(&Chromosome { grand_tour: p, breaks: vec![] }, &ctx))
            .fold(f64::INFINITY, f64::min);
        assert!((best - 882.84).abs() < 0.01);
    }

    #[test]
    fn evolve_corners() {
        let c = corners();
        let d = evolve(&c, &small_cfg(3), &FieldConfig::default()).unwrap();
        assert!((d.search_cost - 882.84).abs() / 882.84 < 0.005, "{}", d.search_cost);
        assert!(scenario::validate_solution(&c, &d.allocation, &d.routes).ok);
        assert_eq!(d.trajectories.len(), 1);
    }

    #[test]
    fn evolve_is_deterministic_and_monotone() {
        let c = scenario::generate_instance(5, 8, 2, Area::new(600.0, 600.0), 1).unwrap();
        let a = evolve(&c, &small_cfg(9), &FieldConfig::default()).unwrap();
        let b = evolve(&c, &small_cfg(9), &FieldConfig::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn single_city() {
        let c = inst(&[(30.0, 40.0)], 1);
        for seed in 0..3 {
            let d = evolve(&c, &small_cfg(seed), &FieldConfig::default()).unwrap();
            assert_eq!(d.routes, vec![vec![0, 1, 0]]);
        }
    }

    #[test]
    fn fewer_cities_than_uavs() {
        let c = inst(&[(30.0, 40.0)], 3);
        let d = evolve(&c, &small_cfg(1), &FieldConfig::default()).unwrap();
        assert!(scenario::validate_solution(&c, &d.allocation, &d.routes).ok);
        assert_eq!(d.allocation.iter().filter(|a| !a.is_empty()).count(), 1);
    }

    #[test]
    fn counter_tracks_calls() {
        let before = ga_invocations();
        let c = inst(&[(30.0, 40.0)], 1);
        evolve(&c, &small_cfg(1), &FieldConfig::default()).unwrap();
        assert_eq!(ga_invocations(), before + 1);
    }

    #[test]
    fn ordered_crossover_keeps_permutation() {
        let a = vec![1, 2, 3, 4, 5, 6];
        let b = vec![6, 5, 4, 3, 2, 1];
        let c = ordered_crossover(&a, &b, 1, 3);
        assert_eq!(&c[1..=3], &[2, 3, 4]);
        assert_eq!(c, vec![6, 2, 3, 4, 5, 1]);
    }

    #[test]
    fn straight_line_proxy_reaches_end() {
        let pts = [Vec2::ZERO, Vec2::new(25.0, 0.0), Vec2::ZERO];
        let t = straight_line_trajectory(&pts, 10.0, 1.0);
        assert_eq!(t.samples.last().unwrap().pos, Vec2::ZERO);
        assert_eq!(t.samples.len(), 6);
        assert_eq!(t.waypoint_marks.len(), 3);
    }

    #[test]
    fn demo_roundtrip() {
        let c = scenario::generate_instance(2, 5, 2, Area::new(500.0, 500.0), 0).unwrap();
        let d = evolve(&c, &small_cfg(2), &FieldConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_demonstration(&d, dir.path(), "demo_0000").unwrap();
        let back = load_demonstration(dir.path(), "demo_0000").unwrap();
        assert_eq!(d, back);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn decode_is_disjoint_cover(n in 1usize..15, q in 1usize..5, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let allow_idle = n < q;
            let mut tour: Vec<usize> = (1..=n).collect();
            tour.shuffle(&mut rng);
            let mut ch = Chromosome { grand_tour: tour, breaks: random_breaks(&mut rng, n, q, allow_idle) };
            for _ in 0..20 {
                mutate(&mut rng, &mut ch, 0.5, allow_idle);
                prop_assert!(ch.is_valid(n, q, allow_idle));
            }
            let routes = ch.decode();
            prop_assert_eq!(routes.len(), q);
            let mut all: Vec<usize> = routes.concat();
            all.sort_unstable();
            prop_assert_eq!(all, (1..=n).collect::<Vec<_>>());
            if !allow_idle {
                prop_assert!(routes.iter().all(|r| !r.is_empty()));
            }
        }
    }
}
