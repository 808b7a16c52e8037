//! Mission instances, the depot-indexed distance matrix, and the multi-UAV
//! routing feasibility check.
//!
//! Node index 0 is always the depot; cities are numbered `1..=N`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;

/// Default cruise altitude in meters. Planning is planar; the altitude is
/// carried as metadata only.
pub const DEFAULT_ALTITUDE_M: f64 = 200.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid instance parameters: {0}")]
    InvalidParams(String),
    #[error("could not place {placed} of {wanted} cities outside obstacles after {attempts} attempts; enlarge the area or reduce obstacles")]
    Placement {
        placed: usize,
        wanted: usize,
        attempts: usize,
    },
    #[error("invalid instance: {0}")]
    Invalid(String),
    #[error("instance file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("instance file format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Area {
    pub width: f64,
    pub height: f64,
}

impl Area {
    pub fn new(width: f64, height: f64) -> Self {
        Self { width, height }
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(self.width / 2.0, self.height / 2.0)
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= self.width && p.y <= self.height
    }

    /// Distance from the center to a corner.
    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.width.hypot(self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct City {
    pub id: usize,
    pub x: f64,
    pub y: f64,
}

impl City {
    pub fn new(id: usize, pos: Vec2) -> Self {
        Self { id, x: pos.x, y: pos.y }
    }

    pub fn pos(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// A circular no-fly disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub x: f64,
    pub y: f64,
    pub r: f64,
}

impl Obstacle {
    pub fn new(center: Vec2, r: f64) -> Self {
        Self { x: center.x, y: center.y, r }
    }

    pub fn center(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Distance from `p` to the disk surface; zero inside the disk.
    pub fn surface_distance(&self, p: Vec2) -> f64 {
        (p.distance(self.center()) - self.r).max(0.0)
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.distance(self.center()) <= self.r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionInstance {
    pub seed: u64,
    pub area: Area,
    pub depot: Vec2,
    pub cities: Vec<City>,
    pub obstacles: Vec<Obstacle>,
    pub uav_count: usize,
    #[serde(default = "default_altitude")]
    pub altitude: f64,
}

fn default_altitude() -> f64 {
    DEFAULT_ALTITUDE_M
}

impl MissionInstance {
    pub fn n_cities(&self) -> usize {
        self.cities.len()
    }

    /// Position of node `i` (0 = depot).
    pub fn node_pos(&self, i: usize) -> Vec2 {
        if i == 0 {
            self.depot
        } else {
            self.cities[i - 1].pos()
        }
    }

    /// Checks the structural invariants: contiguous ids, `Q >= 1`, depot free.
    pub fn check(&self) -> Result<(), ScenarioError> {
        if self.uav_count == 0 {
            return Err(ScenarioError::Invalid("uav_count must be >= 1".into()));
        }
        for (k, c) in self.cities.iter().enumerate() {
            if c.id != k + 1 {
                return Err(ScenarioError::Invalid(format!(
                    "city ids must be contiguous 1..N; position {} has id {}",
                    k + 1,
                    c.id
                )));
            }
            if !c.x.is_finite() || !c.y.is_finite() {
                return Err(ScenarioError::Invalid(format!("city {} has non-finite position", c.id)));
            }
        }
        if let Some(o) = self.obstacles.iter().find(|o| o.contains(self.depot)) {
            return Err(ScenarioError::Invalid(format!(
                "obstacle at ({}, {}) r={} contains the depot",
                o.x, o.y, o.r
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path)?;
        let inst: MissionInstance = serde_json::from_str(&text)?;
        inst.check()?;
        Ok(inst)
    }

    pub fn save(&self, path: &Path) -> Result<(), ScenarioError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Appends a city with the next free id and returns that id.
    pub fn push_city(&mut self, pos: Vec2) -> usize {
        let id = self.cities.len() + 1;
        self.cities.push(City::new(id, pos));
        id
    }
}

const PLACEMENT_ATTEMPTS_PER_CITY: usize = 1000;

/// Samples a random instance. Cities are i.i.d. uniform in the area outside
/// the obstacle disks, the depot sits at the area center, and every random
/// draw comes from a ChaCha stream keyed by `seed`.
pub fn generate_instance(
    seed: u64,
    n_cities: usize,
    uav_count: usize,
    area: Area,
    n_obstacles: usize,
) -> Result<MissionInstance, ScenarioError> {
    if n_cities == 0 {
        return Err(ScenarioError::InvalidParams("n_cities must be >= 1".into()));
    }
    if uav_count == 0 {
        return Err(ScenarioError::InvalidParams("uav_count must be >= 1".into()));
    }
    if !(area.width > 0.0 && area.height > 0.0) || !area.width.is_finite() || !area.height.is_finite() {
        return Err(ScenarioError::InvalidParams(format!(
            "area must be positive, got {}x{}",
            area.width, area.height
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depot = area.center();
    let span = area.width.min(area.height);

    let mut obstacles = Vec::with_capacity(n_obstacles);
    let mut attempts = 0;
    while obstacles.len() < n_obstacles {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS_PER_CITY * n_obstacles.max(1) {
            return Err(ScenarioError::InvalidParams(format!(
                "could not place {n_obstacles} obstacles clear of the depot"
            )));
        }
        let r = rng.random_range(0.02..0.06) * span;
        let c = Vec2::new(rng.random_range(0.0..area.width), rng.random_range(0.0..area.height));
        // Keep a clear ring around the depot so departures are never blocked.
        if c.distance(depot) <= r + 0.1 * span {
            continue;
        }
        obstacles.push(Obstacle::new(c, r));
    }

    let budget = PLACEMENT_ATTEMPTS_PER_CITY * n_cities;
    let mut cities = Vec::with_capacity(n_cities);
    let mut attempts = 0;
    while cities.len() < n_cities {
        if attempts >= budget {
            return Err(ScenarioError::Placement {
                placed: cities.len(),
                wanted: n_cities,
                attempts,
            });
        }
        attempts += 1;
        let p = Vec2::new(rng.random_range(0.0..=area.width), rng.random_range(0.0..=area.height));
        if obstacles.iter().any(|o| o.contains(p)) {
            continue;
        }
        cities.push(City::new(cities.len() + 1, p));
    }

    Ok(MissionInstance {
        seed,
        area,
        depot,
        cities,
        obstacles,
        uav_count,
        altitude: DEFAULT_ALTITUDE_M,
    })
}

/// Symmetric Euclidean distances over depot + cities, `(N+1) x (N+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_points(points: &[Vec2]) -> Self {
        let n = points.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = points[i].distance(points[j]);
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        Self { n, d }
    }

    /// Number of nodes, depot included.
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }
}

pub fn distance_matrix(instance: &MissionInstance) -> DistanceMatrix {
    let pts: Vec<Vec2> = (0..=instance.n_cities()).map(|i| instance.node_pos(i)).collect();
    DistanceMatrix::from_points(&pts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintId {
    Visit,
    Flow,
    Subtour,
    Outgoing,
    DepotOut,
    DepotIn,
    DepotBalance,
}

impl fmt::Display for ConstraintId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ConstraintId::Visit => "visit",
            ConstraintId::Flow => "flow",
            ConstraintId::Subtour => "subtour",
            ConstraintId::Outgoing => "outgoing",
            ConstraintId::DepotOut => "depot_out",
            ConstraintId::DepotIn => "depot_in",
            ConstraintId::DepotBalance => "depot_balance",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub constraint_id: ConstraintId,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl FeasibilityReport {
    pub fn has(&self, id: ConstraintId) -> bool {
        self.violations.iter().any(|v| v.constraint_id == id)
    }
}

/// Checks a plan against the routing constraints.
///
/// `routes[q]` is the node walk of UAV `q`, normally `[0, c1, .., ck, 0]`;
/// an idle UAV may pass `[]`, `[0]` or `[0, 0]`. `allocation[q]` is the city
/// set the UAV is responsible for. Edges are read off consecutive pairs of
/// the walk, so a route that does not start and end at the depot shows up as
/// flow, depot or subtour violations rather than being rejected outright.
pub fn validate_solution(
    instance: &MissionInstance,
    allocation: &[Vec<usize>],
    routes: &[Vec<usize>],
) -> FeasibilityReport {
    let n = instance.n_cities();
    let mut violations = Vec::new();
    let mut push = |id: ConstraintId, detail: String| violations.push(Violation { constraint_id: id, detail });

    if routes.len() > instance.uav_count {
        push(
            ConstraintId::Visit,
            format!("{} routes for {} UAVs", routes.len(), instance.uav_count),
        );
    }

    let mut in_total = vec![0usize; n + 1];
    let mut out_total = vec![0usize; n + 1];

    for (q, walk) in routes.iter().enumerate() {
        if let Some(&bad) = walk.iter().find(|&&c| c > n) {
            push(ConstraintId::Visit, format!("UAV {q} references unknown node {bad}"));
            continue;
        }
        let edges: Vec<(usize, usize)> = walk
            .windows(2)
            .map(|w| (w[0], w[1]))
            .filter(|&(a, b)| !(a == 0 && b == 0))
            .collect();
        let mut in_q = vec![0usize; n + 1];
        let mut out_q = vec![0usize; n + 1];
        for &(a, b) in &edges {
            out_q[a] += 1;
            in_q[b] += 1;
        }
        for i in 1..=n {
            in_total[i] += in_q[i];
            out_total[i] += out_q[i];
            if in_q[i] != out_q[i] {
                push(
                    ConstraintId::Flow,
                    format!("UAV {q}: city {i} entered {} times, left {} times", in_q[i], out_q[i]),
                );
            }
        }
        if out_q[0] > 1 {
            push(ConstraintId::DepotOut, format!("UAV {q} departs the depot {} times", out_q[0]));
        }
        if in_q[0] > 1 {
            push(ConstraintId::DepotIn, format!("UAV {q} returns to the depot {} times", in_q[0]));
        }
        if out_q[0] != in_q[0] {
            push(
                ConstraintId::DepotBalance,
                format!("UAV {q}: {} departures vs {} returns", out_q[0], in_q[0]),
            );
        }

        // Single-cycle connectivity: every edge of this UAV must be reachable
        // from the depot by following successors.
        if !edges.is_empty() {
            let mut succ: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &(a, b) in &edges {
                succ.entry(a).or_default().push(b);
            }
            let mut seen: BTreeSet<usize> = BTreeSet::new();
            let mut stack = vec![0usize];
            while let Some(v) = stack.pop() {
                if !seen.insert(v) {
                    continue;
                }
                if let Some(next) = succ.get(&v) {
                    stack.extend(next.iter().copied());
                }
            }
            let stranded: Vec<usize> = edges
                .iter()
                .flat_map(|&(a, b)| [a, b])
                .filter(|v| !seen.contains(v))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if !stranded.is_empty() {
                push(
                    ConstraintId::Subtour,
                    format!("UAV {q}: nodes {stranded:?} form a loop disconnected from the depot"),
                );
            }
        }
    }

    for i in 1..=n {
        if in_total[i] != 1 {
            push(ConstraintId::Visit, format!("city {i} entered {} times across the swarm", in_total[i]));
        }
        if out_total[i] != 1 {
            push(ConstraintId::Outgoing, format!("city {i} left {} times across the swarm", out_total[i]));
        }
    }

    // Allocation must be a disjoint cover and agree with the routes.
    let mut owner: BTreeMap<usize, usize> = BTreeMap::new();
    for (q, set) in allocation.iter().enumerate() {
        for &c in set {
            if c == 0 || c > n {
                push(ConstraintId::Visit, format!("allocation of UAV {q} has unknown city {c}"));
            } else if let Some(prev) = owner.insert(c, q) {
                push(ConstraintId::Visit, format!("city {c} allocated to UAVs {prev} and {q}"));
            }
        }
    }
    if !allocation.is_empty() {
        for i in 1..=n {
            if !owner.contains_key(&i) {
                push(ConstraintId::Visit, format!("city {i} is not allocated"));
            }
        }
        for (q, walk) in routes.iter().enumerate() {
            let on_route: BTreeSet<usize> = walk.iter().copied().filter(|&c| c != 0 && c <= n).collect();
            let allotted: BTreeSet<usize> = allocation.get(q).map(|s| s.iter().copied().collect()).unwrap_or_default();
            if on_route != allotted {
                push(
                    ConstraintId::Visit,
                    format!("UAV {q}: route cities {on_route:?} differ from allocation {allotted:?}"),
                );
            }
        }
    }

    FeasibilityReport {
        ok: violations.is_empty(),
        violations,
    }
}

/// Wraps city-only routes as depot-closed walks.
pub fn close_routes(routes: &[Vec<usize>]) -> Vec<Vec<usize>> {
    routes
        .iter()
        .map(|r| {
            let mut w = Vec::with_capacity(r.len() + 2);
            w.push(0);
            w.extend_from_slice(r);
            w.push(0);
            w
        })
        .collect()
}

/// Sorted per-UAV city sets of city-only routes.
pub fn allocation_of(routes: &[Vec<usize>]) -> Vec<Vec<usize>> {
    routes
        .iter()
        .map(|r| {
            let mut s = r.clone();
            s.sort_unstable();
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst_with(points: &[(f64, f64)], depot: (f64, f64), q: usize) -> MissionInstance {
        MissionInstance {
            seed: 0,
            area: Area::new(1000.0, 1000.0),
            depot: Vec2::new(depot.0, depot.1),
            cities: points
                .iter()
                .enumerate()
                .map(|(k, &(x, y))| City::new(k + 1, Vec2::new(x, y)))
                .collect(),
            obstacles: vec![],
            uav_count: q,
            altitude: DEFAULT_ALTITUDE_M,
        }
    }

    #[test]
    fn generate_fifty_cities_in_square() {
        let inst = generate_instance(7, 50, 2, Area::new(1000.0, 1000.0), 0).unwrap();
        assert_eq!(inst.cities.len(), 50);
        assert_eq!(inst.depot, Vec2::new(500.0, 500.0));
        assert!(inst.cities.iter().all(|c| inst.area.contains(c.pos())));
        inst.check().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_instance(7, 50, 2, Area::new(1000.0, 1000.0), 3).unwrap();
        let b = generate_instance(7, 50, 2, Area::new(1000.0, 1000.0), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_instance(8, 50, 2, Area::new(1000.0, 1000.0), 3).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn minimal_instance() {
        let inst = generate_instance(1, 1, 1, Area::new(10.0, 10.0), 0).unwrap();
        assert_eq!(inst.cities.len(), 1);
        assert_eq!(inst.depot, Vec2::new(5.0, 5.0));
    }

    #[test]
    fn cities_avoid_obstacles() {
        let inst = generate_instance(3, 200, 2, Area::new(1000.0, 1000.0), 8).unwrap();
        assert_eq!(inst.obstacles.len(), 8);
        for c in &inst.cities {
            assert!(inst.obstacles.iter().all(|o| !o.contains(c.pos())));
        }
        assert!(inst.obstacles.iter().all(|o| !o.contains(inst.depot)));
    }

    #[test]
    fn rejects_bad_params() {
        assert!(generate_instance(1, 0, 1, Area::new(10.0, 10.0), 0).is_err());
        assert!(generate_instance(1, 3, 0, Area::new(10.0, 10.0), 0).is_err());
        assert!(generate_instance(1, 3, 1, Area::new(0.0, 10.0), 0).is_err());
    }

    #[test]
    fn distance_examples() {
        let inst = inst_with(&[(3.0, 4.0)], (0.0, 0.0), 1);
        let d = distance_matrix(&inst);
        assert_eq!(d.get(0, 1), 5.0);

        let inst = inst_with(&[(0.0, 0.0), (6.0, 0.0), (6.0, 8.0)], (0.0, 0.0), 1);
        let d = distance_matrix(&inst);
        assert_eq!(d.get(2, 3), 8.0);
        assert_eq!(d.get(1, 3), 10.0);
        for i in 0..4 {
            assert_eq!(d.get(i, i), 0.0);
            for j in 0..4 {
                assert_eq!(d.get(i, j), d.get(j, i));
            }
        }
    }

    #[test]
    fn disjoint_routes_are_feasible() {
        let inst = inst_with(&[(1.0, 0.0), (2.0, 0.0), (0.0, 1.0), (0.0, 2.0)], (0.0, 0.0), 2);
        let alloc = vec![vec![1, 2], vec![3, 4]];
        let routes = vec![vec![0, 1, 2, 0], vec![0, 4, 3, 0]];
        let rep = validate_solution(&inst, &alloc, &routes);
        assert!(rep.ok, "{:?}", rep.violations);
    }

    #[test]
    fn duplicated_city_is_a_visit_violation() {
        let inst = inst_with(&[(1.0, 0.0), (2.0, 0.0), (0.0, 1.0)], (0.0, 0.0), 2);
        let routes = vec![vec![0, 1, 3, 0], vec![0, 2, 3, 0]];
        let rep = validate_solution(&inst, &[], &routes);
        assert!(!rep.ok);
        assert!(rep.has(ConstraintId::Visit));
    }

    #[test]
    fn open_route_breaks_depot_balance() {
        let inst = inst_with(&[(1.0, 0.0), (2.0, 0.0)], (0.0, 0.0), 1);
        let rep = validate_solution(&inst, &[vec![1, 2]], &[vec![0, 1, 2]]);
        assert!(rep.has(ConstraintId::DepotBalance));
        assert!(!rep.ok);
    }

    #[test]
    fn detached_loop_is_a_subtour() {
        let inst = inst_with(&[(1.0, 0.0), (2.0, 0.0), (3.0, 0.0)], (0.0, 0.0), 2);
        let routes = vec![vec![0, 1, 0], vec![2, 3, 2]];
        let rep = validate_solution(&inst, &[vec![1], vec![2, 3]], &routes);
        assert!(rep.has(ConstraintId::Subtour));
    }

    #[test]
    fn double_depot_loop_flags_depot_out_and_in() {
        let inst = inst_with(&[(1.0, 0.0), (2.0, 0.0)], (0.0, 0.0), 1);
        let rep = validate_solution(&inst, &[vec![1, 2]], &[vec![0, 1, 0, 2, 0]]);
        assert!(rep.has(ConstraintId::DepotOut));
        assert!(rep.has(ConstraintId::DepotIn));
    }

    #[test]
    fn idle_uav_is_fine() {
        let inst = inst_with(&[(1.0, 0.0)], (0.0, 0.0), 2);
        let rep = validate_solution(&inst, &[vec![1], vec![]], &[vec![0, 1, 0], vec![0, 0]]);
        assert!(rep.ok, "{:?}", rep.violations);
    }

    #[test]
    fn allocation_mismatch_reported() {
        let inst = inst_with(&[(1.0, 0.0), (2.0, 0.0)], (0.0, 0.0), 2);
        let rep = validate_solution(&inst, &[vec![1, 2], vec![]], &[vec![0, 1, 0], vec![0, 2, 0]]);
        assert!(rep.has(ConstraintId::Visit));
    }

    #[test]
    fn instance_json_roundtrip() {
        let inst = generate_instance(11, 5, 2, Area::new(500.0, 400.0), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("inst.json");
        inst.save(&p).unwrap();
        let back = MissionInstance::load(&p).unwrap();
        assert_eq!(inst, back);
        let text = std::fs::read_to_string(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["seed", "area", "depot", "cities", "obstacles", "uav_count"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v["cities"][0].get("id").is_some());
        assert!(v["obstacles"][0].get("r").is_some());
    }
}
