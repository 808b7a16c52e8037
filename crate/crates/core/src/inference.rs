//! Online abnormality evaluation and the mission -> route -> motion decision
//! cascade.
//!
//! Every level follows the same recipe. Each candidate action gets a cost `J`.
//! Costs are rescaled across the candidate set. The candidate's induced words
//! are then penalized in a softmax likelihood over the level's dictionary. The
//! resulting posterior is compared to the learned reference with a KL
//! divergence, and the candidate with the smallest divergence wins.

use std::cell::Cell;
use std::collections::{BTreeMap, HashMap};
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::filters::{self, ContinuousState};
use crate::geom::{convex_hull, hulls_overlap, point_segment_distance, segments_cross, wrap_angle, Vec2};
use crate::potential_field::{self, FieldConfig};
use crate::scenario::{Area, City, Obstacle};
use crate::symbolic::{mission_word, route_word, MissionWord, MotionWord, RouteWord};
use crate::world_model::{Level, ReferenceDistribution, WorldModel};

thread_local! {
    static CANDIDATE_EVALS: Cell<u64> = const { Cell::new(0) };
}

/// Candidates scored on this thread since the last reset.
pub fn candidate_evaluations() -> u64 {
    CANDIDATE_EVALS.with(|c| c.get())
}

pub fn reset_candidate_evaluations() {
    CANDIDATE_EVALS.with(|c| c.set(0));
}

fn count_evaluations(n: usize) {
    CANDIDATE_EVALS.with(|c| c.set(c.get() + n as u64));
}

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("no candidate actions at the {0} level")]
    NoCandidates(Level),
    #[error("likelihood and reference have disjoint support")]
    DisjointSupport,
    #[error("support size mismatch: likelihood has {0} entries, reference {1}")]
    SupportMismatch(usize, usize),
    #[error("invalid inference config: {0}")]
    InvalidConfig(String),
    #[error("unknown city {0}")]
    UnknownCity(usize),
    #[error("city {0} is already part of the plan")]
    AlreadyAssigned(usize),
    #[error("observation lists {states} UAV states but the plan has {plan} UAVs")]
    UavMismatch { states: usize, plan: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub beta_msn: f64,
    pub beta_rte: f64,
    pub beta_mot: f64,
    pub lambda_msn: f64,
    pub lambda_rte: f64,
    pub lambda_mot: f64,
    pub omega_d: f64,
    pub omega_b: f64,
    pub omega_s: f64,
    pub omega_l: f64,
    pub omega_t: f64,
    pub omega_c: f64,
    pub omega_x: f64,
    pub omega_o: f64,
    pub omega_u: f64,
    /// Set partitions are enumerated when `Q^N` does not exceed this.
    pub mission_exhaustive_max: usize,
    pub mission_pool: usize,
    /// Routes with at most this many cities are scored over all orders.
    pub route_enumerate_max: usize,
    pub route_pool: usize,
    /// Motion look-ahead in control steps.
    pub horizon: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            beta_msn: 1.0,
            beta_rte: 1.0,
            beta_mot: 1.0,
            lambda_msn: 1.0,
            lambda_rte: 1.0,
            lambda_mot: 1.0,
            omega_d: 1.0,
            omega_b: 0.5,
            omega_s: 1.0,
            omega_l: 1.0,
            omega_t: 1.0,
            omega_c: 250.0,
            omega_x: 1.0,
            omega_o: 1.0,
            omega_u: 1.0,
            mission_exhaustive_max: 4096,
            mission_pool: 30,
            route_enumerate_max: 8,
            route_pool: 50,
            horizon: 20,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        for (name, b) in [("beta_msn", self.beta_msn), ("beta_rte", self.beta_rte), ("beta_mot", self.beta_mot)] {
            if !(b > 0.0 && b.is_finite()) {
                return Err(InferenceError::InvalidConfig(format!("{name} must be > 0, got {b}")));
            }
        }
        let weights = [
            ("lambda_msn", self.lambda_msn),
            ("lambda_rte", self.lambda_rte),
            ("lambda_mot", self.lambda_mot),
            ("omega_d", self.omega_d),
            ("omega_b", self.omega_b),
            ("omega_s", self.omega_s),
            ("omega_l", self.omega_l),
            ("omega_t", self.omega_t),
            ("omega_c", self.omega_c),
            ("omega_x", self.omega_x),
            ("omega_o", self.omega_o),
            ("omega_u", self.omega_u),
        ];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(InferenceError::InvalidConfig(format!("{name} must be >= 0, got {w}")));
            }
        }
        if self.mission_pool == 0 || self.route_pool == 0 || self.horizon == 0 {
            return Err(InferenceError::InvalidConfig("pool sizes and horizon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub level: Level,
    pub symbols: Vec<String>,
    pub probs: Vec<f64>,
}

/// Softmax of `-beta * cost`, computed with max-subtraction.
pub fn likelihood(costs: &[f64], beta: f64) -> Vec<f64> {
    let m = costs.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = costs.iter().map(|&c| (-beta * (c - m)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

fn posterior_probs(lik: &[f64], reference: &[f64]) -> Result<Vec<f64>, InferenceError> {
    if lik.len() != reference.len() {
        return Err(InferenceError::SupportMismatch(lik.len(), reference.len()));
    }
    let prod: Vec<f64> = lik.iter().zip(reference).map(|(a, b)| a * b).collect();
    let z: f64 = prod.iter().sum();
    if !(z > 0.0) {
        return Err(InferenceError::DisjointSupport);
    }
    Ok(prod.into_iter().map(|x| x / z).collect())
}

/// Normalized elementwise product of likelihood and reference.
pub fn posterior(lik: &[f64], reference: &ReferenceDistribution) -> Result<Belief, InferenceError> {
    Ok(Belief {
        level: reference.level,
        symbols: reference.symbols.clone(),
        probs: posterior_probs(lik, &reference.probs)?,
    })
}

/// `KL(q || p)` in nats with `0 log 0 = 0`.
pub fn abnormality(q: &[f64], p: &[f64]) -> f64 {
    let s: f64 = q
        .iter()
        .zip(p)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| if pi > 0.0 { qi * (qi / pi).ln() } else { f64::INFINITY })
        .sum();
    s.max(0.0)
}

pub fn total_abnormality(d_msn: f64, d_rte: f64, d_mot: f64, cfg: &InferenceConfig) -> f64 {
    cfg.lambda_msn * d_msn + cfg.lambda_rte * d_rte + cfg.lambda_mot * d_mot
}

/// Rescales costs to `(J - J_min) / (mean - J_min)`. Equal costs map to 0.
pub fn normalize_costs(js: &[f64]) -> Vec<f64> {
    if js.is_empty() {
        return Vec::new();
    }
    let min = js.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = js.iter().sum::<f64>() / js.len() as f64;
    let spread = mean - min;
    if !(spread > 1e-12 * mean.abs().max(1.0)) {
        return vec![0.0; js.len()];
    }
    js.iter().map(|j| (j - min) / spread).collect()
}

/// Abnormality of one candidate whose induced words (indices into the
/// reference support) carry normalized cost `j_hat`.
pub fn candidate_abnormality(j_hat: f64, words: &[usize], reference: &[f64], beta: f64) -> Result<f64, InferenceError> {
    let mut costs = vec![0.0; reference.len()];
    for &w in words {
        if let Some(c) = costs.get_mut(w) {
            *c = j_hat;
        }
    }
    let q = posterior_probs(&likelihood(&costs, beta), reference)?;
    Ok(abnormality(&q, reference))
}

/// Abnormality of an executed word set: the likelihood favours the observed
/// words, so rare expert words give large values.
pub fn observed_abnormality(words: &[usize], reference: &[f64], beta: f64) -> Result<f64, InferenceError> {
    let mut costs = vec![1.0; reference.len()];
    for &w in words {
        if let Some(c) = costs.get_mut(w) {
            *c = 0.0;
        }
    }
    let q = posterior_probs(&likelihood(&costs, beta), reference)?;
    Ok(abnormality(&q, reference))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub action: String,
    #[serde(rename = "J")]
    pub j: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelDecision<T> {
    pub chosen: T,
    pub index: usize,
    pub candidates: Vec<CandidateScore>,
}

impl<T> LevelDecision<T> {
    pub fn delta(&self) -> f64 {
        self.candidates[self.index].delta
    }
}

const DELTA_TIE: f64 = 1e-12;

/// Index of the smallest abnormality; ties go to the lower cost, then to the
/// lexicographically smaller action key.
pub fn select(candidates: &[CandidateScore]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        best = match best {
            None => Some(i),
            Some(b) => {
                let o = &candidates[b];
                let better = if (c.delta - o.delta).abs() > DELTA_TIE {
                    c.delta < o.delta
                } else if c.j != o.j {
                    c.j < o.j
                } else {
                    c.action < o.action
                };
                Some(if better { i } else { b })
            }
        };
    }
    best
}

struct Scored {
    key: String,
    j: f64,
    words: Vec<usize>,
}

fn score_level(level: Level, scored: Vec<Scored>, reference: &ReferenceDistribution, beta: f64) -> Result<(usize, Vec<CandidateScore>), InferenceError> {
    if scored.is_empty() {
        return Err(InferenceError::NoCandidates(level));
    }
    count_evaluations(scored.len());
    let js: Vec<f64> = scored.iter().map(|s| s.j).collect();
    let norm = normalize_costs(&js);
    let deltas: Vec<f64> = scored
        .par_iter()
        .zip(norm.par_iter())
        .map(|(s, &jh)| candidate_abnormality(jh, &s.words, &reference.probs, beta))
        .collect::<Result<_, _>>()?;
    let candidates: Vec<CandidateScore> = scored
        .into_iter()
        .zip(deltas)
        .map(|(s, delta)| CandidateScore { action: s.key, j: s.j, delta })
        .collect();
    let index = select(&candidates).ok_or(InferenceError::NoCandidates(level))?;
    Ok((index, candidates))
}

/// What the swarm sees at one decision instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: f64,
    pub depot: Vec2,
    pub area: Area,
    /// Every city known so far, visited or not.
    pub cities: Vec<City>,
    /// Filter estimates, one per UAV.
    pub uav_states: Vec<ContinuousState>,
    /// UAVs still flying their mission.
    pub active: Vec<bool>,
    pub obstacles: Vec<Obstacle>,
}

impl Observation {
    fn positions(&self) -> BTreeMap<usize, Vec2> {
        self.cities.iter().map(|c| (c.id, c.pos())).collect()
    }
}

fn lookup(pos: &BTreeMap<usize, Vec2>, ids: &[usize]) -> Result<Vec<Vec2>, InferenceError> {
    ids.iter().map(|id| pos.get(id).copied().ok_or(InferenceError::UnknownCity(*id))).collect()
}

/// Greedy nearest-neighbour open tour `start -> pts -> end`.
pub fn nn_tour_length(start: Vec2, pts: &[Vec2], end: Vec2) -> f64 {
    let mut left: Vec<Vec2> = pts.to_vec();
    let mut cur = start;
    let mut total = 0.0;
    while !left.is_empty() {
        let (i, d) = left
            .iter()
            .enumerate()
            .map(|(i, p)| (i, cur.distance(*p)))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        total += d;
        cur = left.remove(i);
    }
    total + cur.distance(end)
}

/// `J_Msn` for per-UAV remaining city sets flown from `starts`.
pub fn mission_cost(starts: &[Vec2], depot: Vec2, remaining: &[Vec<Vec2>], cfg: &InferenceConfig) -> f64 {
    let lengths: Vec<f64> = remaining
        .iter()
        .zip(starts)
        .map(|(pts, &s)| nn_tour_length(s, pts, depot))
        .collect();
    let q = lengths.len().max(1) as f64;
    let j_dist: f64 = lengths.iter().sum();
    let mean = j_dist / q;
    let j_bal = if mean > 0.0 {
        lengths.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / mean
    } else {
        0.0
    };
    let hulls: Vec<Vec<Vec2>> = remaining.iter().map(|p| convex_hull(p)).collect();
    let mut overlaps = 0usize;
    for a in 0..hulls.len() {
        for b in (a + 1)..hulls.len() {
            if hulls_overlap(&hulls[a], &hulls[b]) {
                overlaps += 1;
            }
        }
    }
    let j_safe = overlaps as f64 * mean;
    cfg.omega_d * j_dist + cfg.omega_b * j_bal + cfg.omega_s * j_safe
}

fn centroid(pts: &[Vec2]) -> Option<Vec2> {
    (!pts.is_empty()).then(|| pts.iter().fold(Vec2::ZERO, |a, &p| a + p) / pts.len() as f64)
}

fn bearing(depot: Vec2, p: Vec2) -> f64 {
    let r = p - depot;
    if r.norm() > 0.0 {
        r.angle().rem_euclid(2.0 * PI)
    } else {
        0.0
    }
}

/// Sorts ids inside groups and orders groups by centroid bearing from the
/// depot. Empty groups go last.
fn canonical(mut alloc: Vec<Vec<usize>>, pos: &BTreeMap<usize, Vec2>, depot: Vec2) -> Vec<Vec<usize>> {
    for g in &mut alloc {
        g.sort_unstable();
    }
    let key = |g: &Vec<usize>| -> (bool, f64) {
        let pts: Vec<Vec2> = g.iter().map(|id| pos[id]).collect();
        match centroid(&pts) {
            Some(c) => (false, bearing(depot, c)),
            None => (true, 0.0),
        }
    };
    alloc.sort_by(|a, b| {
        let (ea, ba) = key(a);
        let (eb, bb) = key(b);
        ea.cmp(&eb).then(ba.total_cmp(&bb)).then(a.cmp(b))
    });
    alloc
}

fn allocation_key(alloc: &[Vec<usize>]) -> String {
    alloc
        .iter()
        .map(|g| g.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join("|")
}

/// All set partitions of `ids` into at most `q` blocks (exactly `q` when
/// `ids.len() >= q`), padded with empty groups.
fn set_partitions(ids: &[usize], q: usize) -> Vec<Vec<Vec<usize>>> {
    let n = ids.len();
    let mut out = Vec::new();
    let mut labels = vec![0usize; n];
    fn rec(i: usize, max_used: usize, labels: &mut [usize], ids: &[usize], q: usize, out: &mut Vec<Vec<Vec<usize>>>) {
        let n = labels.len();
        if i == n {
            if n < q || max_used + 1 == q {
                let mut g = vec![Vec::new(); q];
                for (k, &l) in labels.iter().enumerate() {
                    g[l].push(ids[k]);
                }
                out.push(g);
            }
            return;
        }
        let top = if i == 0 { 0 } else { (max_used + 1).min(q - 1) };
        for l in 0..=top {
            labels[i] = l;
            rec(i + 1, max_used.max(l), labels, ids, q, out);
        }
    }
    rec(0, 0, &mut labels, ids, q, &mut out);
    out
}

/// Lloyd k-means on 2-D points with k-means++ seeding. Ties go to the lower
/// cluster id.
fn kmeans2(points: &[Vec2], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| p.distance(*c).powi(2)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            centers.push(points[rng.random_range(0..points.len())]);
            continue;
        }
        let mut r = rng.random::<f64>() * total;
        let mut pick = points.len() - 1;
        for (i, d) in d2.iter().enumerate() {
            if r < *d {
                pick = i;
                break;
            }
            r -= d;
        }
        centers.push(points[pick]);
    }
    let mut labels = vec![0usize; points.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let l = (0..k)
                .map(|c| (c, p.distance(centers[c])))
                .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
                .0;
            if l != labels[i] {
                labels[i] = l;
                changed = true;
            }
        }
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<Vec2> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| *p).collect();
            if let Some(m) = centroid(&members) {
                *center = m;
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

fn chunked(order: &[usize], q: usize) -> Vec<Vec<usize>> {
    let n = order.len();
    let mut out = Vec::with_capacity(q);
    let mut start = 0;
    for i in 0..q {
        let size = n / q + usize::from(i < n % q);
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    out
}

/// Candidate allocations of the visible cities over `q` UAVs.
pub fn mission_candidates(obs: &Observation, q: usize, cfg: &InferenceConfig) -> Vec<Vec<Vec<usize>>> {
    let pos = obs.positions();
    let ids: Vec<usize> = pos.keys().copied().collect();
    let n = ids.len();
    if q == 0 {
        return Vec::new();
    }
    let exhaustive = (n as f64) * (q as f64).ln() <= (cfg.mission_exhaustive_max as f64).ln();
    let mut seen: BTreeMap<String, ()> = BTreeMap::new();
    let mut out = Vec::new();
    let mut push = |alloc: Vec<Vec<usize>>, out: &mut Vec<Vec<Vec<usize>>>| {
        let c = canonical(alloc, &pos, obs.depot);
        if n >= q && c.iter().any(|g| g.is_empty()) {
            return;
        }
        if seen.insert(allocation_key(&c), ()).is_none() {
            out.push(c);
        }
    };
    if exhaustive {
        for p in set_partitions(&ids, q) {
            push(p, &mut out);
        }
        return out;
    }
    let pts: Vec<Vec2> = ids.iter().map(|id| pos[id]).collect();
    let cap = cfg.mission_pool;
    let mut sweep: Vec<usize> = (0..n).collect();
    sweep.sort_by(|&a, &b| {
        bearing(obs.depot, pts[a])
            .total_cmp(&bearing(obs.depot, pts[b]))
            .then(obs.depot.distance(pts[a]).total_cmp(&obs.depot.distance(pts[b])))
            .then(ids[a].cmp(&ids[b]))
    });
    let offsets = n.min(10);
    for o in 0..offsets {
        if out.len() >= cap / 3 {
            break;
        }
        let shift = o * n / offsets;
        let rotated: Vec<usize> = sweep[shift..].iter().chain(&sweep[..shift]).map(|&i| ids[i]).collect();
        push(chunked(&rotated, q), &mut out);
    }
    for s in 0..10u64 {
        if out.len() >= 2 * cap / 3 {
            break;
        }
        let labels = kmeans2(&pts, q, cfg.seed.wrapping_add(s));
        let mut g = vec![Vec::new(); q];
        for (i, &l) in labels.iter().enumerate() {
            g[l].push(ids[i]);
        }
        push(g, &mut out);
    }
    // Single-city moves from the first candidates towards the nearest other group.
    let base: Vec<Vec<Vec<usize>>> = out.clone();
    'outer: for alloc in &base {
        let cents: Vec<Option<Vec2>> = alloc
            .iter()
            .map(|g| centroid(&g.iter().map(|id| pos[id]).collect::<Vec<_>>()))
            .collect();
        for (gi, g) in alloc.iter().enumerate() {
            for &c in g {
                if out.len() >= cap {
                    break 'outer;
                }
                let to = (0..q)
                    .filter(|&h| h != gi)
                    .filter_map(|h| cents[h].map(|m| (h, m.distance(pos[&c]))))
                    .fold(None, |a: Option<(usize, f64)>, b| match a {
                        Some(x) if x.1 <= b.1 => Some(x),
                        _ => Some(b),
                    });
                if let Some((h, _)) = to {
                    let mut moved = alloc.clone();
                    moved[gi].retain(|&x| x != c);
                    moved[h].push(c);
                    push(moved, &mut out);
                }
            }
        }
    }
    out.truncate(cap);
    out
}

fn mission_reference(model: &WorldModel, n_cities: usize) -> &ReferenceDistribution {
    model
        .mission_context
        .get(&model.swarm_size.bin_of(n_cities))
        .unwrap_or(&model.mission_ref)
}

/// Raw mission word of every group, relative to `n_total` cities.
pub fn mission_words(groups: &[Vec<Vec2>], n_total: usize, obs: &Observation, model: &WorldModel) -> Vec<MissionWord> {
    groups
        .iter()
        .map(|g| mission_word(g, n_total, obs.depot, obs.area.half_diagonal(), &model.quantizer))
        .collect()
}

fn mission_indices(words: &[MissionWord], model: &WorldModel, reference: &ReferenceDistribution) -> Vec<usize> {
    let mut idx: Vec<usize> = words
        .iter()
        .filter_map(|w| reference.index_of(&model.dictionaries.nearest_mission(w, &model.quantizer).key()))
        .collect();
    idx.sort_unstable();
    idx.dedup();
    idx
}

/// Chooses an allocation of all visible cities over the observed UAVs.
pub fn decide_mission(obs: &Observation, model: &WorldModel, cfg: &InferenceConfig) -> Result<LevelDecision<Vec<Vec<usize>>>, InferenceError> {
    let q = obs.uav_states.len();
    let pos = obs.positions();
    let n = pos.len();
    let starts: Vec<Vec2> = obs.uav_states.iter().map(|s| s.pos).collect();
    let reference = mission_reference(model, n);
    let cands = mission_candidates(obs, q, cfg);
    let scored: Vec<Scored> = cands
        .par_iter()
        .map(|alloc| {
            let groups: Vec<Vec<Vec2>> = alloc.iter().map(|g| g.iter().map(|id| pos[id]).collect()).collect();
            Scored {
                key: allocation_key(alloc),
                j: mission_cost(&starts, obs.depot, &groups, cfg),
                words: mission_indices(&mission_words(&groups, n, obs, model), model, reference),
            }
        })
        .collect();
    let (index, candidates) = score_level(Level::Msn, scored, reference, cfg.beta_msn)?;
    Ok(LevelDecision { chosen: cands[index].clone(), index, candidates })
}

/// Executing plan: per-UAV city sets, visiting orders and progress.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanState {
    pub allocation: Vec<Vec<usize>>,
    pub routes: Vec<Vec<usize>>,
    /// Number of route cities already visited.
    pub progress: Vec<usize>,
    /// Dictionary keys describing each UAV's current plan.
    pub mission_keys: Vec<String>,
    pub route_keys: Vec<String>,
}

impl PlanState {
    pub fn uav_count(&self) -> usize {
        self.routes.len()
    }

    pub fn remaining(&self, q: usize) -> &[usize] {
        &self.routes[q][self.progress[q].min(self.routes[q].len())..]
    }

    pub fn contains(&self, city: usize) -> bool {
        self.allocation.iter().any(|g| g.contains(&city))
    }

    /// Next waypoint of UAV `q`: its next city, or `None` when only the
    /// return to the depot is left.
    pub fn next_city(&self, q: usize) -> Option<usize> {
        self.remaining(q).first().copied()
    }

    pub fn city_routes(&self) -> Vec<Vec<usize>> {
        self.routes.clone()
    }
}

/// Picks the UAV that takes the new city `c_star`.
pub fn assign_new_city(
    obs: &Observation,
    model: &WorldModel,
    plan: &PlanState,
    c_star: &City,
    cfg: &InferenceConfig,
) -> Result<LevelDecision<usize>, InferenceError> {
    if plan.contains(c_star.id) {
        return Err(InferenceError::AlreadyAssigned(c_star.id));
    }
    let q_count = plan.uav_count();
    if obs.uav_states.len() != q_count {
        return Err(InferenceError::UavMismatch { states: obs.uav_states.len(), plan: q_count });
    }
    let mut pos = obs.positions();
    pos.insert(c_star.id, c_star.pos());
    let n_total = plan.allocation.iter().map(|g| g.len()).sum::<usize>() + 1;
    let reference = mission_reference(model, n_total);
    let starts: Vec<Vec2> = obs.uav_states.iter().map(|s| s.pos).collect();
    let remaining: Vec<Vec<Vec2>> = (0..q_count).map(|r| lookup(&pos, plan.remaining(r))).collect::<Result<_, _>>()?;
    let full: Vec<Vec<Vec2>> = plan.allocation.iter().map(|g| lookup(&pos, g)).collect::<Result<_, _>>()?;
    let scored: Vec<Scored> = (0..q_count)
        .map(|q| {
            let mut rem = remaining.clone();
            rem[q].push(c_star.pos());
            let mut groups = full.clone();
            groups[q].push(c_star.pos());
            Scored {
                key: format!("uav={q}"),
                j: mission_cost(&starts, obs.depot, &rem, cfg),
                words: mission_indices(&mission_words(&groups, n_total, obs, model), model, reference),
            }
        })
        .collect();
    let (index, candidates) = score_level(Level::Msn, scored, reference, cfg.beta_msn)?;
    Ok(LevelDecision { chosen: index, index, candidates })
}

/// Ordering problem for one UAV.
#[derive(Debug, Clone)]
pub struct RouteProblem {
    pub start: Vec2,
    pub depot: Vec2,
    /// Cities already visited, in order; they shape the route word only.
    pub visited: Vec<Vec2>,
    /// Cities still to be ordered.
    pub cities: Vec<City>,
    /// Remaining polylines of the other UAVs.
    pub others: Vec<Vec<Vec2>>,
    /// Obstacles whose safety disc a straight leg should not cut.
    pub obstacles: Vec<Obstacle>,
    /// Clearance added to each obstacle radius (normally `d_min_obs`).
    pub clearance: f64,
    /// Raw mission word of this UAV's allocation.
    pub mission: MissionWord,
}

/// Heading changes above 90 degrees, summed (rad).
pub fn sharp_turns(path: &[Vec2]) -> f64 {
    let dirs: Vec<Vec2> = path.windows(2).map(|w| w[1] - w[0]).filter(|d| d.norm() > 1e-9).collect();
    dirs.windows(2)
        .map(|w| wrap_angle(w[1].angle() - w[0].angle()).abs())
        .filter(|&a| a > PI / 2.0)
        .sum()
}

/// Proper crossings between `path` and each of `others`, plus legs that cut
/// an obstacle's safety disc of radius `r + clearance`.
pub fn route_crossings(path: &[Vec2], others: &[Vec<Vec2>], obstacles: &[Obstacle], clearance: f64) -> usize {
    let mut n = 0;
    for a in path.windows(2) {
        n += obstacles
            .iter()
            .filter(|o| point_segment_distance(o.center(), a[0], a[1]) < o.r + clearance)
            .count();
        for o in others {
            for b in o.windows(2) {
                if segments_cross(a[0], a[1], b[0], b[1]) {
                    n += 1;
                }
            }
        }
    }
    n
}

pub fn polyline_length(path: &[Vec2]) -> f64 {
    path.windows(2).map(|w| w[0].distance(w[1])).sum()
}

fn route_path(p: &RouteProblem, stops: &[Vec2]) -> Vec<Vec2> {
    let mut path = Vec::with_capacity(stops.len() + 2);
    path.push(p.start);
    path.extend_from_slice(stops);
    path.push(p.depot);
    path
}

/// `J_Rte` of flying `stops` in order from the problem's start.
pub fn route_cost(p: &RouteProblem, stops: &[Vec2], cfg: &InferenceConfig) -> f64 {
    let path = route_path(p, stops);
    cfg.omega_l * polyline_length(&path) + cfg.omega_t * sharp_turns(&path) + cfg.omega_c * route_crossings(&path, &p.others, &p.obstacles, p.clearance) as f64
}

fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

fn two_opt(start: Vec2, end: Vec2, order: &mut [usize], pts: &[Vec2]) {
    let at = |order: &[usize], k: isize| -> Vec2 {
        if k < 0 {
            start
        } else if k as usize >= order.len() {
            end
        } else {
            pts[order[k as usize]]
        }
    };
    let n = order.len();
    let mut improved = true;
    while improved {
        improved = false;
        for i in 0..n {
            for j in (i + 1)..n {
                let a = at(order, i as isize - 1);
                let b = at(order, i as isize);
                let c = at(order, j as isize);
                let d = at(order, j as isize + 1);
                let delta = a.distance(c) + b.distance(d) - a.distance(b) - c.distance(d);
                if delta < -1e-9 {
                    order[i..=j].reverse();
                    improved = true;
                }
            }
        }
    }
}

fn nn_order(start: Vec2, pts: &[Vec2], first: Option<usize>) -> Vec<usize> {
    let mut left: Vec<usize> = (0..pts.len()).collect();
    let mut out = Vec::with_capacity(pts.len());
    let mut cur = start;
    if let Some(f) = first {
        left.retain(|&i| i != f);
        out.push(f);
        cur = pts[f];
    }
    while !left.is_empty() {
        let (k, _) = left
            .iter()
            .enumerate()
            .map(|(k, &i)| (k, cur.distance(pts[i])))
            .fold((0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
        let i = left.remove(k);
        cur = pts[i];
        out.push(i);
    }
    out
}

/// Candidate visiting orders as index vectors into `p.cities`.
pub fn route_candidates(p: &RouteProblem, cfg: &InferenceConfig) -> Vec<Vec<usize>> {
    let n = p.cities.len();
    if n <= cfg.route_enumerate_max {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut out = vec![perm.clone()];
        while next_permutation(&mut perm) {
            out.push(perm.clone());
        }
        return out;
    }
    let pts: Vec<Vec2> = p.cities.iter().map(|c| c.pos()).collect();
    let mut firsts: Vec<usize> = (0..n).collect();
    firsts.sort_by(|&a, &b| p.start.distance(pts[a]).total_cmp(&p.start.distance(pts[b])).then(a.cmp(&b)));
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    let starts = std::iter::once(None).chain(firsts.into_iter().map(Some));
    for f in starts {
        if out.len() >= cfg.route_pool {
            break;
        }
        let mut o = nn_order(p.start, &pts, f);
        two_opt(p.start, p.depot, &mut o, &pts);
        if seen.insert(o.clone()) {
            out.push(o);
        }
        let mut raw = nn_order(p.start, &pts, f);
        if out.len() < cfg.route_pool && seen.insert(raw.clone()) {
            out.push(std::mem::take(&mut raw));
        }
    }
    out
}

fn route_index(
    stops: &[Vec2],
    p: &RouteProblem,
    model: &WorldModel,
    reference: &ReferenceDistribution,
    memo: &mut HashMap<RouteWord, Option<usize>>,
) -> Vec<usize> {
    let mut all = p.visited.clone();
    all.extend_from_slice(stops);
    let w = route_word(p.mission, p.depot, &all, &model.quantizer);
    let idx = *memo
        .entry(w)
        .or_insert_with(|| reference.index_of(&model.dictionaries.nearest_route(&w, &model.quantizer).key()));
    idx.into_iter().collect()
}

fn route_reference<'m>(model: &'m WorldModel, mission: &MissionWord, owned: &'m mut Option<ReferenceDistribution>) -> &'m ReferenceDistribution {
    let key = model.dictionaries.nearest_mission(mission, &model.quantizer).key();
    *owned = model.t_msn_rte.row_distribution(&key);
    owned.as_ref().unwrap_or(&model.route_ref)
}

/// Dictionary key of the route word of `stops` flown after `visited`.
pub fn route_key(depot: Vec2, mission: MissionWord, visited_and_stops: &[Vec2], model: &WorldModel) -> String {
    let w = route_word(mission, depot, visited_and_stops, &model.quantizer);
    model.dictionaries.nearest_route(&w, &model.quantizer).key()
}

fn order_key(ids: &[usize]) -> String {
    ids.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("-")
}

/// Chooses a visiting order (city ids) for one UAV.
pub fn decide_route(p: &RouteProblem, model: &WorldModel, cfg: &InferenceConfig) -> Result<LevelDecision<Vec<usize>>, InferenceError> {
    let mut owned = None;
    let reference = route_reference(model, &p.mission, &mut owned);
    let cands = route_candidates(p, cfg);
    let pts: Vec<Vec2> = p.cities.iter().map(|c| c.pos()).collect();
    let mut memo = HashMap::new();
    let scored: Vec<Scored> = cands
        .iter()
        .map(|o| {
            let stops: Vec<Vec2> = o.iter().map(|&i| pts[i]).collect();
            let ids: Vec<usize> = o.iter().map(|&i| p.cities[i].id).collect();
            Scored {
                key: order_key(&ids),
                j: route_cost(p, &stops, cfg),
                words: route_index(&stops, p, model, reference, &mut memo),
            }
        })
        .collect();
    let (index, candidates) = score_level(Level::Rte, scored, reference, cfg.beta_rte)?;
    let chosen = cands[index].iter().map(|&i| p.cities[i].id).collect();
    Ok(LevelDecision { chosen, index, candidates })
}

/// Chooses where `c_star` enters the remaining route `p.cities` (kept in
/// order). Index `j` means "before the j-th remaining city".
pub fn insert_city(p: &RouteProblem, c_star: &City, model: &WorldModel, cfg: &InferenceConfig) -> Result<LevelDecision<usize>, InferenceError> {
    let mut owned = None;
    let reference = route_reference(model, &p.mission, &mut owned);
    let base: Vec<Vec2> = p.cities.iter().map(|c| c.pos()).collect();
    let mut memo = HashMap::new();
    let scored: Vec<Scored> = (0..=base.len())
        .map(|j| {
            let mut stops = base.clone();
            stops.insert(j, c_star.pos());
            Scored {
                key: format!("j={j}"),
                j: route_cost(p, &stops, cfg),
                words: route_index(&stops, p, model, reference, &mut memo),
            }
        })
        .collect();
    let (index, candidates) = score_level(Level::Rte, scored, reference, cfg.beta_rte)?;
    Ok(LevelDecision { chosen: index, index, candidates })
}

/// Local motion problem of one UAV.
#[derive(Debug, Clone)]
pub struct MotionProblem<'a> {
    pub state: ContinuousState,
    pub target: Vec2,
    pub obstacles: &'a [Obstacle],
    /// Estimates of the other airborne UAVs.
    pub others: Vec<ContinuousState>,
    /// Dictionary route key the motion is conditioned on.
    pub route_key: String,
    pub dt: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionChoice {
    pub word: MotionWord,
    pub key: String,
    /// Avoidance weight in `[0, 1]` derived from the word's letters.
    pub avoidance: f64,
    pub command: Vec2,
}

/// Mean repulsive-ratio centroid of the word's letters, scaled by the
/// largest letter value so the most avoidant letter maps to 1.
pub fn avoidance_weight(word: &MotionWord, model: &WorldModel) -> f64 {
    let cb = &model.dictionaries.letter_codebook;
    let rho_max = (0..cb.len()).map(|k| cb.centroid_features(k).rho).fold(0.0, f64::max);
    if word.letters.is_empty() || rho_max <= 0.0 {
        return 0.0;
    }
    let mean = word
        .letters
        .iter()
        .map(|&l| if (l as usize) < cb.len() { cb.centroid_features(l as usize).rho } else { 0.0 })
        .sum::<f64>()
        / word.letters.len() as f64;
    (mean / rho_max).clamp(0.0, 1.0)
}

/// Velocity command for avoidance weight `a`: slowed attraction, plain
/// repulsion, and a sidestep along the repulsion direction turned 60 degrees
/// counter-clockwise so head-on encounters resolve to opposite sides.
/// Obstacle repulsion and the sidestep fade quadratically inside `d_min_obs`
/// of the target so a city close to an obstacle is still reachable.
pub fn motion_command(pos: Vec2, target: Vec2, a: f64, obstacles: &[Obstacle], others: &[Vec2], field: &FieldConfig) -> Vec2 {
    let u_att = (-field.gain * potential_field::attractive_gradient(pos, target, field.k_att)).capped(field.v_max);
    let fade = if field.d_min_obs > 0.0 { (pos.distance(target) / field.d_min_obs).min(1.0).powi(2) } else { 1.0 };
    let g = potential_field::obstacle_gradient(pos, obstacles, field) * fade + potential_field::uav_gradient(pos, others, field);
    let u_rep = (-field.gain * g).capped(field.v_max);
    let side = (-g).normalized().map(|d| d.rotated(PI / 3.0)).unwrap_or(Vec2::ZERO);
    ((1.0 - 0.5 * a) * u_att + u_rep + a * fade * field.v_max * side).capped(field.v_max)
}

struct Rollout {
    end: Vec2,
    obs_hinge: f64,
    uav_hinge: f64,
    min_obs: f64,
    collision: bool,
}

fn rollout(p: &MotionProblem<'_>, a: f64, field: &FieldConfig, horizon: usize) -> Rollout {
    let mut s = p.state;
    let mut others = p.others.clone();
    let mut r = Rollout { end: s.pos, obs_hinge: 0.0, uav_hinge: 0.0, min_obs: f64::INFINITY, collision: false };
    for _ in 0..horizon {
        let op: Vec<Vec2> = others.iter().map(|o| o.pos).collect();
        let u = motion_command(s.pos, p.target, a, p.obstacles, &op, field);
        s = filters::propagate(&s, u, p.dt, p.tau);
        others = others.iter().map(|o| filters::propagate(o, o.vel, p.dt, p.tau)).collect();
        for o in p.obstacles {
            let d = o.surface_distance(s.pos);
            r.min_obs = r.min_obs.min(d);
            r.obs_hinge += ((field.d_min_obs - d).max(0.0) / field.d_min_obs).powi(2);
        }
        let mut preds = vec![s.pos];
        preds.extend(others.iter().map(|o| o.pos));
        if filters::predicted_collision(&preds, field.d_min).iter().any(|&(i, _)| i == 0) {
            r.collision = true;
        }
        for o in &others {
            r.uav_hinge += ((field.d_min - s.pos.distance(o.pos)).max(0.0) / field.d_min).powi(2);
        }
    }
    r.end = s.pos;
    r
}

/// `J_Mot` for avoidance weight `a` over the look-ahead horizon.
pub fn motion_cost(p: &MotionProblem<'_>, a: f64, field: &FieldConfig, cfg: &InferenceConfig) -> f64 {
    let r = rollout(p, a, field, cfg.horizon);
    let reach = field.v_max * cfg.horizon as f64 * p.dt;
    let to_target = p.target - p.state.pos;
    let x_ref = match to_target.normalized() {
        Some(dir) => p.state.pos + reach.min(to_target.norm()) * dir,
        None => p.target,
    };
    let scale = reach.max(1e-9);
    cfg.omega_x * (r.end.distance(x_ref) / scale).powi(2) + cfg.omega_o * r.obs_hinge + cfg.omega_u * r.uav_hinge
}

/// Whether the attraction-only look-ahead predicts a collision or an
/// obstacle approach closer than `d_min_obs`.
pub fn safety_triggered(p: &MotionProblem<'_>, field: &FieldConfig, cfg: &InferenceConfig) -> bool {
    let r = rollout(p, 0.0, field, cfg.horizon);
    r.collision || r.min_obs < field.d_min_obs
}

/// Candidate motion words: those observed after the route word, or the whole
/// dictionary when that set is empty or a safety hazard is predicted.
pub fn motion_candidates(p: &MotionProblem<'_>, model: &WorldModel, field: &FieldConfig, cfg: &InferenceConfig) -> Vec<usize> {
    let all: Vec<usize> = (0..model.t_rte_mot.to_symbols.len()).collect();
    if safety_triggered(p, field, cfg) {
        return all;
    }
    let support = model.t_rte_mot.support(&p.route_key);
    if support.is_empty() {
        all
    } else {
        support
    }
}

/// Inverse of [`MotionWord::key`]; malformed parts are dropped.
pub fn parse_motion_key(key: &str) -> MotionWord {
    let letters = key
        .strip_prefix('L')
        .map(|s| s.split('-').filter_map(|x| x.parse::<u16>().ok()).collect())
        .unwrap_or_default();
    MotionWord { letters }
}

pub fn decide_motion(
    p: &MotionProblem<'_>,
    model: &WorldModel,
    field: &FieldConfig,
    cfg: &InferenceConfig,
) -> Result<LevelDecision<MotionChoice>, InferenceError> {
    let owned = model.t_rte_mot.row_distribution(&p.route_key);
    let reference = owned.as_ref().unwrap_or(&model.motion_ref);
    let cands = motion_candidates(p, model, field, cfg);
    let symbols = &model.t_rte_mot.to_symbols;
    let words: Vec<(MotionWord, f64)> = cands
        .iter()
        .map(|&k| {
            let w = model
                .dictionaries
                .motion
                .iter()
                .find(|e| e.word().key() == symbols[k])
                .map(|e| e.word())
                .unwrap_or_else(|| parse_motion_key(&symbols[k]));
            let a = avoidance_weight(&w, model);
            (w, a)
        })
        .collect();
    let js: Vec<f64> = words.par_iter().map(|(_, a)| motion_cost(p, *a, field, cfg)).collect();
    let scored: Vec<Scored> = cands
        .iter()
        .zip(js)
        .map(|(&k, j)| Scored {
            key: symbols[k].clone(),
            j,
            words: reference.index_of(&symbols[k]).into_iter().collect(),
        })
        .collect();
    let (index, candidates) = score_level(Level::Mot, scored, reference, cfg.beta_mot)?;
    let (word, a) = words[index].clone();
    let others: Vec<Vec2> = p.others.iter().map(|o| o.pos).collect();
    let command = motion_command(p.state.pos, p.target, a, p.obstacles, &others, field);
    Ok(LevelDecision {
        chosen: MotionChoice { key: symbols[cands[index]].clone(), word, avoidance: a, command },
        index,
        candidates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MissionAction {
    Allocate { allocation: Vec<Vec<usize>> },
    Assign { city: usize, uav: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RouteAction {
    Order { uav: usize, order: Vec<usize> },
    Insert { uav: usize, city: usize, index: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionAction {
    pub uav: usize,
    pub word: String,
    pub avoidance: f64,
    pub command: Vec2,
}

/// Result of one cascade step. Empty mission/route lists mean the cached
/// plan was kept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalAction {
    pub t: f64,
    pub mission: Vec<MissionAction>,
    pub route: Vec<RouteAction>,
    pub motion: Vec<MotionAction>,
    /// Weighted abnormality of the chosen actions.
    pub delta_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: f64,
    pub level: Level,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uav: Option<usize>,
    pub candidates: Vec<CandidateScore>,
    pub chosen: String,
}

impl TraceRecord {
    fn from_decision<T>(t: f64, level: Level, uav: Option<usize>, d: &LevelDecision<T>) -> Self {
        Self { t, level, uav, chosen: d.candidates[d.index].action.clone(), candidates: d.candidates.clone() }
    }

    pub fn chosen_index(&self) -> Option<usize> {
        self.candidates.iter().position(|c| c.action == self.chosen)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub action: HierarchicalAction,
    pub trace: Vec<TraceRecord>,
    /// Candidates scored during the step, summed over levels.
    pub evaluations: usize,
}

/// Shared read-only inputs of a step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub model: &'a WorldModel,
    pub field: &'a FieldConfig,
    pub cfg: &'a InferenceConfig,
    /// Velocity time constant of the transition model (s).
    pub tau: f64,
}

fn refresh_keys(plan: &mut PlanState, q: usize, obs: &Observation, pos: &BTreeMap<usize, Vec2>, model: &WorldModel) -> Result<MissionWord, InferenceError> {
    let n_total: usize = plan.allocation.iter().map(|g| g.len()).sum();
    let group = lookup(pos, &plan.allocation[q])?;
    let mw = mission_word(&group, n_total, obs.depot, obs.area.half_diagonal(), &model.quantizer);
    plan.mission_keys[q] = model.dictionaries.nearest_mission(&mw, &model.quantizer).key();
    let stops = lookup(pos, &plan.routes[q])?;
    plan.route_keys[q] = route_key(obs.depot, mw, &stops, model);
    Ok(mw)
}

fn remaining_polyline(plan: &PlanState, q: usize, obs: &Observation, pos: &BTreeMap<usize, Vec2>) -> Result<Vec<Vec2>, InferenceError> {
    let mut path = vec![obs.uav_states[q].pos];
    path.extend(lookup(pos, plan.remaining(q))?);
    path.push(obs.depot);
    Ok(path)
}

/// One pass of the mission -> route -> motion cascade.
///
/// Without a plan, the visible cities are allocated and every route ordered.
/// Cities missing from an existing plan are assigned one by one and inserted
/// into the chosen UAV's remaining route. Every active UAV then gets a motion
/// decision towards its next waypoint.
pub fn step(obs: &Observation, plan: &mut Option<PlanState>, ctx: StepContext<'_>) -> Result<StepOutcome, InferenceError> {
    let StepContext { model, field, cfg, tau } = ctx;
    let before = candidate_evaluations();
    let pos = obs.positions();
    let q_count = obs.uav_states.len();
    let mut trace = Vec::new();
    let mut action = HierarchicalAction { t: obs.t, mission: Vec::new(), route: Vec::new(), motion: Vec::new(), delta_total: 0.0 };
    let (mut d_msn, mut d_rte, mut d_mot) = (0.0f64, 0.0f64, 0.0f64);

    if plan.is_none() {
        let m = decide_mission(obs, model, cfg)?;
        trace.push(TraceRecord::from_decision(obs.t, Level::Msn, None, &m));
        d_msn = d_msn.max(m.delta());
        let allocation = m.chosen.clone();
        action.mission.push(MissionAction::Allocate { allocation: allocation.clone() });
        let mut p = PlanState {
            allocation: allocation.clone(),
            routes: vec![Vec::new(); q_count],
            progress: vec![0; q_count],
            mission_keys: vec![String::new(); q_count],
            route_keys: vec![String::new(); q_count],
        };
        let mut decided: Vec<Vec<Vec2>> = Vec::new();
        for q in 0..q_count {
            let n_total = pos.len();
            let group = lookup(&pos, &allocation[q])?;
            let mw = mission_word(&group, n_total, obs.depot, obs.area.half_diagonal(), &model.quantizer);
            let rp = RouteProblem {
                start: obs.uav_states[q].pos,
                depot: obs.depot,
                visited: Vec::new(),
                cities: allocation[q].iter().map(|&id| City::new(id, pos[&id])).collect(),
                others: decided.clone(),
                obstacles: obs.obstacles.clone(),
                clearance: field.d_min_obs,
                mission: mw,
            };
            let r = decide_route(&rp, model, cfg)?;
            trace.push(TraceRecord::from_decision(obs.t, Level::Rte, Some(q), &r));
            d_rte = d_rte.max(r.delta());
            p.routes[q] = r.chosen.clone();
            action.route.push(RouteAction::Order { uav: q, order: r.chosen.clone() });
            let mut path = vec![rp.start];
            path.extend(lookup(&pos, &r.chosen)?);
            path.push(obs.depot);
            decided.push(path);
            refresh_keys(&mut p, q, obs, &pos, model)?;
        }
        *plan = Some(p);
    } else if let Some(p) = plan.as_mut() {
        if p.uav_count() != q_count {
            return Err(InferenceError::UavMismatch { states: q_count, plan: p.uav_count() });
        }
        let mut fresh: Vec<&City> = obs.cities.iter().filter(|c| !p.contains(c.id)).collect();
        fresh.sort_by_key(|c| c.id);
        for c in fresh {
            let m = assign_new_city(obs, model, p, c, cfg)?;
            trace.push(TraceRecord::from_decision(obs.t, Level::Msn, None, &m));
            d_msn = d_msn.max(m.delta());
            let q = m.chosen;
            action.mission.push(MissionAction::Assign { city: c.id, uav: q });
            let n_total = p.allocation.iter().map(|g| g.len()).sum::<usize>() + 1;
            let mut group = lookup(&pos, &p.allocation[q])?;
            group.push(c.pos());
            let mw = mission_word(&group, n_total, obs.depot, obs.area.half_diagonal(), &model.quantizer);
            let visited_ids = &p.routes[q][..p.progress[q].min(p.routes[q].len())];
            let others = (0..q_count)
                .filter(|&r| r != q)
                .map(|r| remaining_polyline(p, r, obs, &pos))
                .collect::<Result<Vec<_>, _>>()?;
            let rp = RouteProblem {
                start: obs.uav_states[q].pos,
                depot: obs.depot,
                visited: lookup(&pos, visited_ids)?,
                cities: p.remaining(q).iter().map(|&id| City::new(id, pos[&id])).collect(),
                others,
                obstacles: obs.obstacles.clone(),
                clearance: field.d_min_obs,
                mission: mw,
            };
            let r = insert_city(&rp, c, model, cfg)?;
            trace.push(TraceRecord::from_decision(obs.t, Level::Rte, Some(q), &r));
            d_rte = d_rte.max(r.delta());
            let at = p.progress[q] + r.chosen;
            p.routes[q].insert(at, c.id);
            p.allocation[q].push(c.id);
            p.allocation[q].sort_unstable();
            action.route.push(RouteAction::Insert { uav: q, city: c.id, index: r.chosen });
            refresh_keys(p, q, obs, &pos, model)?;
        }
    }

    let p = plan.as_ref().expect("plan initialized above");
    let zone = field.depot_zone_radius();
    for q in 0..q_count {
        if !obs.active.get(q).copied().unwrap_or(true) {
            continue;
        }
        let target = match p.next_city(q) {
            Some(id) => *pos.get(&id).ok_or(InferenceError::UnknownCity(id))?,
            None => obs.depot,
        };
        let others: Vec<ContinuousState> = (0..q_count)
            .filter(|&r| r != q && obs.active.get(r).copied().unwrap_or(true))
            .map(|r| obs.uav_states[r])
            .filter(|s| s.pos.distance(obs.depot) > zone)
            .collect();
        let own_grounded = obs.uav_states[q].pos.distance(obs.depot) <= zone;
        let mp = MotionProblem {
            state: obs.uav_states[q],
            target,
            obstacles: &obs.obstacles,
            others: if own_grounded { Vec::new() } else { others },
            route_key: p.route_keys[q].clone(),
            dt: field.dt,
            tau,
        };
        let m = decide_motion(&mp, model, field, cfg)?;
        trace.push(TraceRecord::from_decision(obs.t, Level::Mot, Some(q), &m));
        d_mot = d_mot.max(m.delta());
        action.motion.push(MotionAction { uav: q, word: m.chosen.key.clone(), avoidance: m.chosen.avoidance, command: m.chosen.command });
    }
    action.delta_total = total_abnormality(d_msn, d_rte, d_mot, cfg);
    let evaluations = (candidate_evaluations() - before) as usize;
    Ok(StepOutcome { action, trace, evaluations })
}

/// Writes decision records as JSON lines.
pub fn write_trace<W: std::io::Write>(mut w: W, records: &[TraceRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}
