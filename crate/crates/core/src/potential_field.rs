//! Attractive/repulsive potential fields, gradient-descent motion synthesis
//! and the repulsive-energy ratio of trajectory segments.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::Vec2;
use crate::scenario::Obstacle;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid field config: {0}")]
    InvalidConfig(String),
    #[error("route must contain at least the depot")]
    EmptyRoute,
    #[error("no convergence towards waypoint {waypoint} at ({x:.2}, {y:.2}) after {steps} steps (stuck at ({px:.2}, {py:.2}), likely a local minimum)")]
    NonConvergence {
        waypoint: usize,
        x: f64,
        y: f64,
        px: f64,
        py: f64,
        steps: usize,
    },
    #[error("trajectory I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub k_att: f64,
    pub k_rep_obs: f64,
    pub k_rep_uav: f64,
    /// Influence distance beyond which repulsion vanishes (m).
    pub d0: f64,
    /// Control gain mapping the negative gradient to velocity.
    pub gain: f64,
    pub dt: f64,
    pub v_max: f64,
    pub d_min: f64,
    pub d_min_obs: f64,
    /// Distance floor inside the repulsive terms (m).
    pub eps_d: f64,
    /// Waypoint capture radius (m).
    pub r_cap: f64,
    /// Arrival tolerance for the final return to the depot (m).
    pub home_tol: f64,
    pub step_budget: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            k_att: 1.0,
            k_rep_obs: 100.0,
            k_rep_uav: 100.0,
            d0: 50.0,
            gain: 1.0,
            dt: 0.1,
            v_max: 10.0,
            d_min: 10.0,
            d_min_obs: 20.0,
            eps_d: 0.1,
            r_cap: 5.0,
            home_tol: 0.05,
            step_budget: 20_000,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<(), FieldError> {
        let pos = [
            ("k_att", self.k_att),
            ("d0", self.d0),
            ("gain", self.gain),
            ("dt", self.dt),
            ("v_max", self.v_max),
            ("eps_d", self.eps_d),
            ("r_cap", self.r_cap),
            ("home_tol", self.home_tol),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FieldError::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        // Repulsion gains may be zero for ablations.
        for (name, v) in [
            ("k_rep_obs", self.k_rep_obs),
            ("k_rep_uav", self.k_rep_uav),
            ("d_min", self.d_min),
            ("d_min_obs", self.d_min_obs),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(FieldError::InvalidConfig(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.step_budget == 0 {
            return Err(FieldError::InvalidConfig("step_budget must be >= 1".into()));
        }
        Ok(())
    }

    /// Radius around the depot inside which UAVs count as grounded.
    pub fn depot_zone_radius(&self) -> f64 {
        2.0 * self.d_min
    }
}

pub fn attractive_potential(x: Vec2, p: Vec2, k_att: f64) -> f64 {
    0.5 * k_att * (x - p).norm_sq()
}

pub fn attractive_gradient(x: Vec2, p: Vec2, k_att: f64) -> Vec2 {
    k_att * (x - p)
}

/// Half-quadratic inverse-distance barrier for a single distance.
pub fn barrier(d: f64, k: f64, d0: f64, eps_d: f64) -> f64 {
    let d = d.max(eps_d);
    if d >= d0 {
        0.0
    } else {
        let s = 1.0 / d - 1.0 / d0;
        0.5 * k * s * s
    }
}

/// Derivative of [`barrier`] with respect to the distance.
fn barrier_slope(d: f64, k: f64, d0: f64, eps_d: f64) -> f64 {
    let d = d.max(eps_d);
    if d >= d0 {
        0.0
    } else {
        -k * (1.0 / d - 1.0 / d0) / (d * d)
    }
}

fn radial(x: Vec2, c: Vec2) -> Vec2 {
    (x - c).normalized().unwrap_or(Vec2::new(1.0, 0.0))
}

/// Obstacle part of the repulsive potential.
pub fn obstacle_potential(x: Vec2, obstacles: &[Obstacle], cfg: &FieldConfig) -> f64 {
    obstacles
        .iter()
        .map(|o| barrier(o.surface_distance(x), cfg.k_rep_obs, cfg.d0, cfg.eps_d))
        .sum()
}

/// Inter-UAV part of the repulsive potential.
pub fn uav_potential(x: Vec2, others: &[Vec2], cfg: &FieldConfig) -> f64 {
    others
        .iter()
        .map(|&o| barrier(x.distance(o), cfg.k_rep_uav, cfg.d0, cfg.eps_d))
        .sum()
}

pub fn repulsive_potential(x: Vec2, obstacles: &[Obstacle], others: &[Vec2], cfg: &FieldConfig) -> f64 {
    obstacle_potential(x, obstacles, cfg) + uav_potential(x, others, cfg)
}

pub fn obstacle_gradient(x: Vec2, obstacles: &[Obstacle], cfg: &FieldConfig) -> Vec2 {
    obstacles.iter().fold(Vec2::ZERO, |acc, o| {
        let s = barrier_slope(o.surface_distance(x), cfg.k_rep_obs, cfg.d0, cfg.eps_d);
        if s == 0.0 {
            acc
        } else {
            acc + s * radial(x, o.center())
        }
    })
}

pub fn uav_gradient(x: Vec2, others: &[Vec2], cfg: &FieldConfig) -> Vec2 {
    others.iter().fold(Vec2::ZERO, |acc, &o| {
        let s = barrier_slope(x.distance(o), cfg.k_rep_uav, cfg.d0, cfg.eps_d);
        if s == 0.0 {
            acc
        } else {
            acc + s * radial(x, o)
        }
    })
}

pub fn repulsive_gradient(x: Vec2, obstacles: &[Obstacle], others: &[Vec2], cfg: &FieldConfig) -> Vec2 {
    obstacle_gradient(x, obstacles, cfg) + uav_gradient(x, others, cfg)
}

/// One explicit Euler step of `v = -K grad(U_att + U_rep)`, speed capped.
pub fn gradient_step(
    x: Vec2,
    target: Vec2,
    obstacles: &[Obstacle],
    others: &[Vec2],
    cfg: &FieldConfig,
) -> (Vec2, Vec2) {
    let g = attractive_gradient(x, target, cfg.k_att) + repulsive_gradient(x, obstacles, others, cfg);
    let v = (-cfg.gain * g).capped(cfg.v_max);
    (x + v * cfg.dt, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajSample {
    pub t: f64,
    pub pos: Vec2,
    pub vel: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub samples: Vec<TrajSample>,
    /// Waypoint positions in visiting order, depot at both ends.
    pub waypoints: Vec<Vec2>,
    /// `waypoint_marks[i]` is the sample index at which `waypoints[i]` was
    /// reached (index 0 is the start).
    pub waypoint_marks: Vec<usize>,
}

impl Trajectory {
    /// Stationary single-sample trajectory.
    pub fn hold(pos: Vec2) -> Self {
        Self {
            samples: vec![TrajSample { t: 0.0, pos, vel: Vec2::ZERO }],
            waypoints: vec![pos, pos],
            waypoint_marks: vec![0, 0],
        }
    }

    pub fn end_time(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t)
    }

    /// Zero-order hold lookup: the latest sample with `sample.t <= t`.
    pub fn position_at(&self, t: f64) -> Vec2 {
        let k = self.samples.partition_point(|s| s.t <= t + 1e-9);
        self.samples[k.saturating_sub(1)].pos
    }

    /// Position at `t` if the UAV is airborne: not yet finished and outside
    /// the depot zone.
    pub fn airborne_at(&self, t: f64, depot_zone: Option<(Vec2, f64)>) -> Option<Vec2> {
        if t > self.end_time() + 1e-9 {
            return None;
        }
        let p = self.position_at(t);
        match depot_zone {
            Some((c, r)) if p.distance(c) <= r => None,
            _ => Some(p),
        }
    }

    pub fn n_legs(&self) -> usize {
        self.waypoint_marks.len().saturating_sub(1)
    }

    /// Samples of leg `i`, from reaching waypoint `i` to reaching `i + 1`.
    pub fn leg(&self, i: usize) -> &[TrajSample] {
        &self.samples[self.waypoint_marks[i]..=self.waypoint_marks[i + 1]]
    }

    /// Polyline length of the sampled path.
    pub fn path_length(&self) -> f64 {
        self.samples.windows(2).map(|w| w[0].pos.distance(w[1].pos)).sum()
    }
}

/// World a trajectory moves through: static obstacles plus the time-indexed
/// positions of other UAVs.
#[derive(Debug, Clone, Copy)]
pub struct Neighborhood<'a> {
    pub obstacles: &'a [Obstacle],
    pub co_trajectories: &'a [Trajectory],
    /// Grounded zone `(center, radius)`; UAVs inside it are ignored.
    pub depot_zone: Option<(Vec2, f64)>,
}

impl<'a> Neighborhood<'a> {
    pub fn empty() -> Self {
        Self {
            obstacles: &[],
            co_trajectories: &[],
            depot_zone: None,
        }
    }

    pub fn others_at(&self, t: f64, own: Vec2) -> Vec<Vec2> {
        if let Some((c, r)) = self.depot_zone {
            if own.distance(c) <= r {
                return Vec::new();
            }
        }
        self.co_trajectories
            .iter()
            .filter_map(|tr| tr.airborne_at(t, self.depot_zone))
            .collect()
    }
}

/// Flies `route` (depot first and last) by repeated [`gradient_step`] calls.
pub fn synthesize_trajectory(
    route: &[Vec2],
    nb: &Neighborhood<'_>,
    cfg: &FieldConfig,
) -> Result<Trajectory, FieldError> {
    cfg.validate()?;
    let (&start, rest) = route.split_first().ok_or(FieldError::EmptyRoute)?;
    let mut samples = vec![TrajSample { t: 0.0, pos: start, vel: Vec2::ZERO }];
    let mut marks = vec![0];
    let mut x = start;
    let mut steps = 0usize;
    for (i, &target) in rest.iter().enumerate() {
        let tol = if i + 1 == rest.len() { cfg.home_tol } else { cfg.r_cap };
        while x.distance(target) > tol {
            if steps >= cfg.step_budget {
                return Err(FieldError::NonConvergence {
                    waypoint: i + 1,
                    x: target.x,
                    y: target.y,
                    px: x.x,
                    py: x.y,
                    steps,
                });
            }
            let t = steps as f64 * cfg.dt;
            let others = nb.others_at(t, x);
            let (xn, v) = gradient_step(x, target, nb.obstacles, &others, cfg);
            steps += 1;
            samples.push(TrajSample {
                t: steps as f64 * cfg.dt,
                pos: xn,
                vel: v,
            });
            x = xn;
        }
        marks.push(samples.len() - 1);
    }
    Ok(Trajectory {
        samples,
        waypoints: route.to_vec(),
        waypoint_marks: marks,
    })
}

/// Share of potential energy due to repulsion over a segment heading for
/// `target`, with trapezoid time integration.
pub fn repulsive_ratio(segment: &[TrajSample], target: Vec2, nb: &Neighborhood<'_>, cfg: &FieldConfig) -> f64 {
    let energies: Vec<(f64, f64, f64)> = segment
        .iter()
        .map(|s| {
            let others = nb.others_at(s.t, s.pos);
            let rep = repulsive_potential(s.pos, nb.obstacles, &others, cfg);
            let att = attractive_potential(s.pos, target, cfg.k_att);
            (s.t, rep, att)
        })
        .collect();
    let (num, den) = match energies.len() {
        0 => return 0.0,
        1 => (energies[0].1, energies[0].1 + energies[0].2),
        _ => energies.windows(2).fold((0.0, 0.0), |(n, d), w| {
            let h = w[1].0 - w[0].0;
            let r = 0.5 * h * (w[0].1 + w[1].1);
            let a = 0.5 * h * (w[0].2 + w[1].2);
            (n + r, d + r + a)
        }),
    };
    if den > 0.0 && den.is_finite() {
        (num / den).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Writes trajectories as CSV rows `t,x,y,vx,vy,uav_id`.
pub fn write_trajectories_csv(path: &Path, trajectories: &[Trajectory]) -> Result<(), FieldError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "t,x,y,vx,vy,uav_id")?;
    for (q, tr) in trajectories.iter().enumerate() {
        for s in &tr.samples {
            writeln!(out, "{},{},{},{},{},{}", s.t, s.pos.x, s.pos.y, s.vel.x, s.vel.y, q)?;
        }
    }
    out.flush()?;
    Ok(())
}
