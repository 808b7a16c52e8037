//! Symbolic abstraction of demonstrations into mission, route and motion
//! words, and the dictionaries built from them.
//!
//! Words are depot-relative and scale-normalized so that plans on unseen
//! city layouts land on symbols already present in the dictionaries.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expert_ga::ExpertDemonstration;
use crate::geom::{wrap_angle, Vec2};
use crate::potential_field::{self, FieldConfig, Neighborhood, TrajSample, Trajectory};

pub const N_FEATURES: usize = 6;

/// Smallest spread used when standardizing each feature, in raw units
/// (m/s, rad/s, 1/m, ratio, m, m). A feature that barely varies across the
/// demonstrations would otherwise blow up small deviations into letter flips.
pub const FEATURE_RESOLUTION: [f64; N_FEATURES] = [0.5, 0.05, 0.01, 0.05, 5.0, 5.0];

#[derive(Debug, Error)]
pub enum SymbolicError {
    #[error("degenerate motion segment: {0}")]
    Degenerate(String),
    #[error("only {distinct} distinct feature vectors for {k} letters; use a smaller letter count")]
    TooFewDistinct { distinct: usize, k: usize },
    #[error("letter count must be >= 1")]
    ZeroLetters,
    #[error("no triplets to build dictionaries from")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizerConfig {
    pub share_bins: u8,
    pub sector_bins: u8,
    pub ring_bins: u8,
    pub nn_bins: u8,
    /// Tours whose |signed area| is below this fraction of the area of a
    /// circle with the same perimeter are labelled mixed.
    pub mixed_threshold: f64,
    pub letters: usize,
    pub seed: u64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            share_bins: 5,
            sector_bins: 8,
            ring_bins: 4,
            nn_bins: 4,
            mixed_threshold: 0.01,
            letters: 8,
            seed: 0,
        }
    }
}

fn bin(x: f64, bins: u8) -> u8 {
    let b = (x * bins as f64).floor();
    if b.is_nan() || b < 0.0 {
        0
    } else {
        (b as u64).min(bins as u64 - 1) as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MissionWord {
    pub share_bin: u8,
    pub sector_bin: u8,
    pub ring_bin: u8,
}

impl MissionWord {
    pub fn key(&self) -> String {
        format!("M{}.{}.{}", self.share_bin, self.sector_bin, self.ring_bin)
    }
}

impl fmt::Display for MissionWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Mission word of a city subset: workload share, depot-relative bearing of
/// the subset centroid, and its distance normalized by the area half-diagonal.
pub fn mission_word(
    subset: &[Vec2],
    n_total: usize,
    depot: Vec2,
    half_diagonal: f64,
    q: &QuantizerConfig,
) -> MissionWord {
    let share = if n_total == 0 { 0.0 } else { subset.len() as f64 / n_total as f64 };
    let centroid = if subset.is_empty() {
        depot
    } else {
        subset.iter().fold(Vec2::ZERO, |a, &p| a + p) / subset.len() as f64
    };
    let rel = centroid - depot;
    let bearing = if rel.norm() > 0.0 { rel.angle().rem_euclid(2.0 * PI) } else { 0.0 };
    let ring = if half_diagonal > 0.0 { rel.norm() / half_diagonal } else { 0.0 };
    MissionWord {
        share_bin: bin(share, q.share_bins),
        sector_bin: bin(bearing / (2.0 * PI), q.sector_bins),
        ring_bin: bin(ring, q.ring_bins),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Cw,
    Ccw,
    Mixed,
}

impl Orientation {
    fn tag(self) -> &'static str {
        match self {
            Orientation::Cw => "cw",
            Orientation::Ccw => "ccw",
            Orientation::Mixed => "mix",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RouteWord {
    pub parent: MissionWord,
    pub orientation: Orientation,
    pub nn_bin: u8,
}

impl RouteWord {
    pub fn key(&self) -> String {
        format!("{}|{}.{}", self.parent.key(), self.orientation.tag(), self.nn_bin)
    }
}

impl fmt::Display for RouteWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Signed shoelace area of the closed polygon depot -> stops -> depot.
pub fn signed_tour_area(depot: Vec2, stops: &[Vec2]) -> f64 {
    let mut pts = Vec::with_capacity(stops.len() + 1);
    pts.push(depot);
    pts.extend_from_slice(stops);
    let n = pts.len();
    0.5 * (0..n).map(|i| pts[i].cross(pts[(i + 1) % n])).sum::<f64>()
}

pub fn tour_orientation(depot: Vec2, stops: &[Vec2], mixed_threshold: f64) -> Orientation {
    let area = signed_tour_area(depot, stops);
    let mut perim = 0.0;
    let mut prev = depot;
    for &p in stops.iter().chain(std::iter::once(&depot)) {
        perim += prev.distance(p);
        prev = p;
    }
    let scale = perim * perim / (4.0 * PI);
    if area.abs() <= mixed_threshold * scale {
        Orientation::Mixed
    } else if area > 0.0 {
        Orientation::Ccw
    } else {
        Orientation::Cw
    }
}

/// Fraction of outbound edges (depot to first stop, then stop to stop) that
/// go to the nearest not-yet-visited stop.
pub fn nn_fraction(depot: Vec2, stops: &[Vec2]) -> f64 {
    if stops.is_empty() {
        return 1.0;
    }
    let mut cur = depot;
    let mut hits = 0usize;
    for (k, &next) in stops.iter().enumerate() {
        let d = cur.distance(next);
        let best = stops[k..].iter().map(|p| cur.distance(*p)).fold(f64::INFINITY, f64::min);
        if d <= best + 1e-9 {
            hits += 1;
        }
        cur = next;
    }
    hits as f64 / stops.len() as f64
}

pub fn route_word(parent: MissionWord, depot: Vec2, stops: &[Vec2], q: &QuantizerConfig) -> RouteWord {
    RouteWord {
        parent,
        orientation: tour_orientation(depot, stops, q.mixed_threshold),
        nn_bin: bin(nn_fraction(depot, stops), q.nn_bins),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub v: f64,
    pub psi_dot: f64,
    pub kappa: f64,
    pub rho: f64,
    pub d_obs: f64,
    pub d_uav: f64,
}

impl FeatureVector {
    pub fn to_array(&self) -> [f64; N_FEATURES] {
        [self.v, self.psi_dot, self.kappa, self.rho, self.d_obs, self.d_uav]
    }

    pub fn from_array(a: [f64; N_FEATURES]) -> Self {
        Self { v: a[0], psi_dot: a[1], kappa: a[2], rho: a[3], d_obs: a[4], d_uav: a[5] }
    }
}

/// Distance recorded when no obstacle or neighbour is present.
pub fn distance_sentinel(cfg: &FieldConfig) -> f64 {
    10.0 * cfg.d0
}

fn clearances(segment: &[TrajSample], nb: &Neighborhood<'_>, cfg: &FieldConfig) -> (f64, f64) {
    let cap = distance_sentinel(cfg);
    let mut d_obs = cap;
    let mut d_uav = cap;
    for s in segment {
        for o in nb.obstacles {
            d_obs = d_obs.min(o.surface_distance(s.pos));
        }
        for p in nb.others_at(s.t, s.pos) {
            d_uav = d_uav.min(s.pos.distance(p));
        }
    }
    (d_obs, d_uav)
}

/// Kinematic and interaction features of one leg heading for `target`.
pub fn motion_features(
    segment: &[TrajSample],
    target: Vec2,
    nb: &Neighborhood<'_>,
    cfg: &FieldConfig,
) -> Result<FeatureVector, SymbolicError> {
    if segment.len() < 2 {
        return Err(SymbolicError::Degenerate(format!("{} samples", segment.len())));
    }
    let disp: Vec<Vec2> = segment
        .windows(2)
        .map(|w| w[1].pos - w[0].pos)
        .filter(|d| d.norm() > 1e-12)
        .collect();
    let length: f64 = disp.iter().map(|d| d.norm()).sum();
    let duration = segment.last().unwrap().t - segment[0].t;
    if length <= 1e-9 || duration <= 0.0 {
        return Err(SymbolicError::Degenerate(format!("length {length:.3e} m over {duration:.3e} s")));
    }
    let turns: Vec<f64> = disp.windows(2).map(|w| wrap_angle(w[1].angle() - w[0].angle())).collect();
    let (d_obs, d_uav) = clearances(segment, nb, cfg);
    Ok(FeatureVector {
        v: length / duration,
        psi_dot: turns.iter().sum::<f64>() / duration,
        kappa: turns.iter().map(|a| a.abs()).sum::<f64>() / length,
        rho: potential_field::repulsive_ratio(segment, target, nb, cfg),
        d_obs,
        d_uav,
    })
}

/// Features of a stationary leg (waypoint reached without moving).
pub fn hover_features(segment: &[TrajSample], target: Vec2, nb: &Neighborhood<'_>, cfg: &FieldConfig) -> FeatureVector {
    let (d_obs, d_uav) = clearances(segment, nb, cfg);
    FeatureVector {
        v: 0.0,
        psi_dot: 0.0,
        kappa: 0.0,
        rho: potential_field::repulsive_ratio(segment, target, nb, cfg),
        d_obs,
        d_uav,
    }
}

/// Per-UAV, per-leg features of a demonstration. Idle UAVs yield no legs.
pub fn demo_features(demo: &ExpertDemonstration, cfg: &FieldConfig) -> Vec<Vec<FeatureVector>> {
    let zone = Some((demo.instance.depot, cfg.depot_zone_radius()));
    (0..demo.trajectories.len())
        .map(|q| {
            let tr = &demo.trajectories[q];
            if demo.routes[q].iter().all(|&c| c == 0) {
                return Vec::new();
            }
            let others: Vec<Trajectory> = demo
                .trajectories
                .iter()
                .enumerate()
                .filter(|(r, _)| *r != q)
                .map(|(_, t)| t.clone())
                .collect();
            let nb = Neighborhood { obstacles: &demo.instance.obstacles, co_trajectories: &others, depot_zone: zone };
            (0..tr.n_legs())
                .map(|i| {
                    let seg = tr.leg(i);
                    let target = tr.waypoints[i + 1];
                    motion_features(seg, target, &nb, cfg).unwrap_or_else(|_| hover_features(seg, target, &nb, cfg))
                })
                .collect()
        })
        .collect()
}

/// k-means codebook over standardized feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LetterCodebook {
    pub means: [f64; N_FEATURES],
    pub stds: [f64; N_FEATURES],
    /// Centroids in standardized coordinates.
    pub centroids: Vec<[f64; N_FEATURES]>,
}

fn sq_dist(a: &[f64; N_FEATURES], b: &[f64; N_FEATURES]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

impl LetterCodebook {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn standardize(&self, f: &FeatureVector) -> [f64; N_FEATURES] {
        let a = f.to_array();
        std::array::from_fn(|i| (a[i] - self.means[i]) / self.stds[i])
    }

    /// Nearest centroid; ties go to the lowest letter id.
    pub fn assign(&self, f: &FeatureVector) -> usize {
        nearest(&self.centroids, &self.standardize(f)).0
    }

    /// Centroid `k` mapped back to raw feature units.
    pub fn centroid_features(&self, k: usize) -> FeatureVector {
        let c = &self.centroids[k];
        FeatureVector::from_array(std::array::from_fn(|i| c[i] * self.stds[i] + self.means[i]))
    }
}

fn nearest(centroids: &[[f64; N_FEATURES]], x: &[f64; N_FEATURES]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

const KMEANS_RESTARTS: u64 = 50;
const KMEANS_MAX_ITERS: usize = 100;

fn kmeans_once(data: &[[f64; N_FEATURES]], k: usize, rng: &mut ChaCha8Rng) -> (Vec<[f64; N_FEATURES]>, f64) {
    // k-means++ seeding.
    let mut centroids = vec![data[rng.random_range(0..data.len())]];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut idx = data.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..data.len())
        };
        centroids.push(data[pick]);
        for (i, x) in data.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &centroids[centroids.len() - 1]));
        }
    }
    let mut labels = vec![usize::MAX; data.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, x) in data.iter().enumerate() {
            let (l, _) = nearest(&centroids, x);
            if labels[i] != l {
                labels[i] = l;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![[0.0; N_FEATURES]; k];
        let mut counts = vec![0usize; k];
        for (x, &l) in data.iter().zip(&labels) {
            counts[l] += 1;
            for j in 0..N_FEATURES {
                sums[l][j] += x[j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = std::array::from_fn(|j| sums[c][j] / counts[c] as f64);
            } else {
                // Re-seed an empty cluster at the worst-served point.
                let far = data
                    .iter()
                    .enumerate()
                    .map(|(i, x)| (i, sq_dist(x, &centroids[labels[i]])))
                    .fold((0, -1.0), |a, b| if b.1 > a.1 { b } else { a })
                    .0;
                centroids[c] = data[far];
                labels[far] = c;
            }
        }
    }
    let inertia = data.iter().map(|x| nearest(&centroids, x).1).sum();
    (centroids, inertia)
}

/// Fits `k` motion letters: z-score standardization (spread floored at
/// [`FEATURE_RESOLUTION`]) followed by seeded
/// k-means++ with restarts, keeping the lowest-inertia run. The result does
/// not depend on the order of `features`.
pub fn fit_letter_codebook(features: &[FeatureVector], k: usize, seed: u64) -> Result<LetterCodebook, SymbolicError> {
    if k == 0 {
        return Err(SymbolicError::ZeroLetters);
    }
    let mut raw: Vec<[f64; N_FEATURES]> = features.iter().map(|f| f.to_array()).collect();
    raw.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut distinct = raw.clone();
    distinct.dedup_by(|a, b| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    if distinct.len() < k {
        return Err(SymbolicError::TooFewDistinct { distinct: distinct.len(), k });
    }
    let n = raw.len() as f64;
    let means: [f64; N_FEATURES] = std::array::from_fn(|j| raw.iter().map(|x| x[j]).sum::<f64>() / n);
    let stds: [f64; N_FEATURES] = std::array::from_fn(|j| {
        let var = raw.iter().map(|x| (x[j] - means[j]).powi(2)).sum::<f64>() / n;
        var.sqrt().max(FEATURE_RESOLUTION[j])
    });
    let data: Vec<[f64; N_FEATURES]> = raw
        .iter()
        .map(|x| std::array::from_fn(|j| (x[j] - means[j]) / stds[j]))
        .collect();
    let mut best: Option<(Vec<[f64; N_FEATURES]>, f64)> = None;
    for r in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(r));
        let run = kmeans_once(&data, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }
    let (mut centroids, _) = best.expect("at least one restart");
    // Canonical letter numbering: sort centroids lexicographically.
    centroids.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    Ok(LetterCodebook { means, stds, centroids })
}

/// Run-length compressed letter sequence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MotionWord {
    pub letters: Vec<u16>,
}

impl MotionWord {
    pub fn from_letters(seq: &[usize]) -> Self {
        let mut letters: Vec<u16> = Vec::with_capacity(seq.len());
        for &l in seq {
            if letters.last() != Some(&(l as u16)) {
                letters.push(l as u16);
            }
        }
        Self { letters }
    }

    pub fn key(&self) -> String {
        let parts: Vec<String> = self.letters.iter().map(|l| l.to_string()).collect();
        format!("L{}", parts.join("-"))
    }
}

impl fmt::Display for MotionWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Lossless run-length encoding of a letter sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLength {
    pub runs: Vec<(usize, usize)>,
}

impl RunLength {
    pub fn encode(seq: &[usize]) -> Self {
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for &l in seq {
            match runs.last_mut() {
                Some((x, n)) if *x == l => *n += 1,
                _ => runs.push((l, 1)),
            }
        }
        Self { runs }
    }

    pub fn decode(&self) -> Vec<usize> {
        self.runs.iter().flat_map(|&(l, n)| std::iter::repeat_n(l, n)).collect()
    }

    pub fn word(&self) -> MotionWord {
        MotionWord { letters: self.runs.iter().map(|&(l, _)| l as u16).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavWords {
    pub uav: usize,
    pub mission: MissionWord,
    pub route: RouteWord,
    pub motion: MotionWord,
}

/// Symbolic image of one demonstration; idle UAVs are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicTriplet {
    pub n_cities: usize,
    pub uav_count: usize,
    pub uavs: Vec<UavWords>,
}

pub fn abstract_demonstration(
    demo: &ExpertDemonstration,
    codebook: &LetterCodebook,
    q: &QuantizerConfig,
    field: &FieldConfig,
) -> SymbolicTriplet {
    abstract_with_features(demo, &demo_features(demo, field), codebook, q)
}

/// As [`abstract_demonstration`] with precomputed [`demo_features`].
pub fn abstract_with_features(
    demo: &ExpertDemonstration,
    features: &[Vec<FeatureVector>],
    codebook: &LetterCodebook,
    q: &QuantizerConfig,
) -> SymbolicTriplet {
    let inst = &demo.instance;
    let hd = inst.area.half_diagonal();
    let n = inst.n_cities();
    let mut uavs = Vec::new();
    for (u, walk) in demo.routes.iter().enumerate() {
        let stops: Vec<Vec2> = walk.iter().filter(|&&c| c != 0).map(|&c| inst.node_pos(c)).collect();
        if stops.is_empty() {
            continue;
        }
        let m = mission_word(&stops, n, inst.depot, hd, q);
        let r = route_word(m, inst.depot, &stops, q);
        let letters: Vec<usize> = features[u].iter().map(|f| codebook.assign(f)).collect();
        uavs.push(UavWords { uav: u, mission: m, route: r, motion: MotionWord::from_letters(&letters) });
    }
    SymbolicTriplet { n_cities: n, uav_count: inst.uav_count, uavs }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionEntry {
    pub signature: MissionWord,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteEntry {
    pub word: RouteWord,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionEntry {
    pub letters: Vec<u16>,
    pub count: u64,
}

impl MotionEntry {
    pub fn word(&self) -> MotionWord {
        MotionWord { letters: self.letters.clone() }
    }
}

/// Observed symbols per level with occurrence counts, sorted by key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dictionaries {
    pub letter_codebook: LetterCodebook,
    pub mission: Vec<MissionEntry>,
    pub route: Vec<RouteEntry>,
    pub motion: Vec<MotionEntry>,
}

impl Dictionaries {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.mission.len(), self.route.len(), self.motion.len())
    }

    pub fn mission_keys(&self) -> Vec<String> {
        self.mission.iter().map(|e| e.signature.key()).collect()
    }

    pub fn route_keys(&self) -> Vec<String> {
        self.route.iter().map(|e| e.word.key()).collect()
    }

    pub fn motion_keys(&self) -> Vec<String> {
        self.motion.iter().map(|e| e.word().key()).collect()
    }

    /// Dictionary mission word closest to `w` (itself when present).
    pub fn nearest_mission(&self, w: &MissionWord, q: &QuantizerConfig) -> MissionWord {
        self.mission
            .iter()
            .map(|e| e.signature)
            .min_by_key(|s| (mission_distance(s, w, q), s.key()))
            .unwrap_or(*w)
    }

    pub fn nearest_route(&self, w: &RouteWord, q: &QuantizerConfig) -> RouteWord {
        self.route
            .iter()
            .map(|e| e.word)
            .min_by_key(|s| (route_distance(s, w, q), s.key()))
            .unwrap_or(*w)
    }

    pub fn nearest_motion(&self, w: &MotionWord) -> MotionWord {
        self.motion
            .iter()
            .map(|e| e.word())
            .min_by_key(|s| (edit_distance(&s.letters, &w.letters), s.key()))
            .unwrap_or_else(|| w.clone())
    }
}

/// L1 bin distance with circular sectors.
pub fn mission_distance(a: &MissionWord, b: &MissionWord, q: &QuantizerConfig) -> u32 {
    let ds = (a.sector_bin as i32 - b.sector_bin as i32).unsigned_abs();
    let ds = ds.min(q.sector_bins as u32 - ds);
    (a.share_bin as i32 - b.share_bin as i32).unsigned_abs() + ds + (a.ring_bin as i32 - b.ring_bin as i32).unsigned_abs()
}

pub fn route_distance(a: &RouteWord, b: &RouteWord, q: &QuantizerConfig) -> u32 {
    mission_distance(&a.parent, &b.parent, q)
        + u32::from(a.orientation != b.orientation)
        + (a.nn_bin as i32 - b.nn_bin as i32).unsigned_abs()
}

pub fn edit_distance(a: &[u16], b: &[u16]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

pub fn build_dictionaries(triplets: &[SymbolicTriplet], codebook: LetterCodebook) -> Result<Dictionaries, SymbolicError> {
    if triplets.is_empty() {
        return Err(SymbolicError::Empty);
    }
    let mut m: BTreeMap<String, (MissionWord, u64)> = BTreeMap::new();
    let mut r: BTreeMap<String, (RouteWord, u64)> = BTreeMap::new();
    let mut o: BTreeMap<String, (MotionWord, u64)> = BTreeMap::new();
    for t in triplets {
        for u in &t.uavs {
            m.entry(u.mission.key()).or_insert((u.mission, 0)).1 += 1;
            r.entry(u.route.key()).or_insert((u.route, 0)).1 += 1;
            o.entry(u.motion.key()).or_insert((u.motion.clone(), 0)).1 += 1;
        }
    }
    Ok(Dictionaries {
        letter_codebook: codebook,
        mission: m.into_values().map(|(signature, count)| MissionEntry { signature, count }).collect(),
        route: r.into_values().map(|(word, count)| RouteEntry { word, count }).collect(),
        motion: o.into_values().map(|(w, count)| MotionEntry { letters: w.letters, count }).collect(),
    })
}
