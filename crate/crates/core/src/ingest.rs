//! Recorded flight logs to symbolic label sequences: velocity estimation,
//! Growing Neural Gas clustering, a combined label transition matrix and
//! transition-prior label prediction with measurement correction.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world_model::{estimate_transition, Level, ModelError, TransitionMatrix};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("flight log I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("flight log CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("flight log is missing column `{0}` (expected header t,x,y,z,uav_id)")]
    MissingColumn(String),
    #[error("flight log has no samples")]
    Empty,
    #[error("timestamps of UAV {uav} not strictly increasing at row {row}: {prev} then {t}")]
    NonMonotone { uav: usize, row: usize, prev: f64, t: f64 },
    #[error("need at least 2 distinct samples, got {0}")]
    TooFewDistinct(usize),
    #[error("invalid GNG config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogSample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl LogSample {
    fn pos(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavLog {
    pub uav_id: usize,
    pub samples: Vec<LogSample>,
    /// Indices `i` where the step from `i - 1` exceeds three median steps.
    pub gaps: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightLog {
    pub experiment_id: String,
    pub uavs: Vec<UavLog>,
}

#[derive(Debug, Deserialize)]
struct Row {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    uav_id: usize,
}

fn find_gaps(samples: &[LogSample]) -> Vec<usize> {
    let mut dts: Vec<f64> = samples.windows(2).map(|w| w[1].t - w[0].t).collect();
    if dts.is_empty() {
        return Vec::new();
    }
    let steps = dts.clone();
    dts.sort_by(f64::total_cmp);
    let median = dts[dts.len() / 2];
    steps
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > 3.0 * median)
        .map(|(i, _)| i + 1)
        .collect()
}

impl UavLog {
    pub fn new(uav_id: usize, samples: Vec<LogSample>) -> Self {
        let gaps = find_gaps(&samples);
        Self { uav_id, samples, gaps }
    }

    /// Linear interpolation onto a uniform grid starting at the first sample.
    pub fn resampled(&self, dt: f64) -> UavLog {
        if self.samples.len() < 2 || !(dt > 0.0) {
            return self.clone();
        }
        let t0 = self.samples[0].t;
        let t1 = self.samples.last().unwrap().t;
        let n = ((t1 - t0) / dt).floor() as usize + 1;
        let mut out = Vec::with_capacity(n);
        let mut k = 0;
        for i in 0..n {
            let t = t0 + i as f64 * dt;
            while k + 2 < self.samples.len() && self.samples[k + 1].t < t {
                k += 1;
            }
            let (a, b) = (self.samples[k], self.samples[k + 1]);
            let s = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
            out.push(LogSample { t, x: a.x + s * (b.x - a.x), y: a.y + s * (b.y - a.y), z: a.z + s * (b.z - a.z) });
        }
        UavLog::new(self.uav_id, out)
    }

    /// Central finite differences, one-sided at the ends.
    pub fn velocities(&self) -> Vec<[f64; 3]> {
        let s = &self.samples;
        let n = s.len();
        if n < 2 {
            return vec![[0.0; 3]; n];
        }
        (0..n)
            .map(|i| {
                let (a, b) = (s[i.saturating_sub(1)], s[(i + 1).min(n - 1)]);
                let (pa, pb) = (a.pos(), b.pos());
                let dt = b.t - a.t;
                [(pb[0] - pa[0]) / dt, (pb[1] - pa[1]) / dt, (pb[2] - pa[2]) / dt]
            })
            .collect()
    }
}

/// Parses `t,x,y,z,uav_id` rows. Rows may interleave UAVs but each UAV's
/// timestamps must strictly increase.
pub fn parse_flightlog<R: Read>(reader: R, experiment_id: &str) -> Result<FlightLog, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    for col in ["t", "x", "y", "z", "uav_id"] {
        if !headers.iter().any(|h| h == col) {
            return Err(IngestError::MissingColumn(col.to_string()));
        }
    }
    let mut per: BTreeMap<usize, Vec<LogSample>> = BTreeMap::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let r = row?;
        let v = per.entry(r.uav_id).or_default();
        if let Some(last) = v.last() {
            if !(r.t > last.t) {
                return Err(IngestError::NonMonotone { uav: r.uav_id, row: i + 2, prev: last.t, t: r.t });
            }
        }
        v.push(LogSample { t: r.t, x: r.x, y: r.y, z: r.z });
    }
    if per.is_empty() {
        return Err(IngestError::Empty);
    }
    Ok(FlightLog {
        experiment_id: experiment_id.to_string(),
        uavs: per.into_iter().map(|(id, s)| UavLog::new(id, s)).collect(),
    })
}

pub fn load_flightlog(path: &Path) -> Result<FlightLog, IngestError> {
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_flightlog(std::fs::File::open(path)?, &id)
}

pub fn write_flightlog(path: &Path, log: &FlightLog) -> Result<(), IngestError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "x", "y", "z", "uav_id"])?;
    for u in &log.uavs {
        for s in &u.samples {
            w.write_record([s.t.to_string(), s.x.to_string(), s.y.to_string(), s.z.to_string(), u.uav_id.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GngConfig {
    pub max_nodes: usize,
    pub eps_b: f64,
    pub eps_n: f64,
    pub lambda_insert: usize,
    pub a_max: u32,
    pub alpha_split: f64,
    pub d_decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for GngConfig {
    fn default() -> Self {
        Self {
            max_nodes: 10,
            eps_b: 0.05,
            eps_n: 0.006,
            lambda_insert: 100,
            a_max: 50,
            alpha_split: 0.5,
            d_decay: 0.995,
            epochs: 5,
            seed: 0,
        }
    }
}

impl GngConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        let unit = [("eps_b", self.eps_b), ("eps_n", self.eps_n), ("alpha_split", self.alpha_split), ("d_decay", self.d_decay)];
        for (name, v) in unit {
            if !(v > 0.0 && v < 1.0) {
                return Err(IngestError::InvalidConfig(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.max_nodes < 2 {
            return Err(IngestError::InvalidConfig(format!("max_nodes must be >= 2, got {}", self.max_nodes)));
        }
        if self.lambda_insert == 0 || self.epochs == 0 {
            return Err(IngestError::InvalidConfig("lambda_insert and epochs must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub nodes: Vec<[f64; 3]>,
    /// Surviving graph edges `(a, b)` with `a < b` and their ages.
    pub edges: Vec<(usize, usize, u32)>,
}

fn d2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nearest node; ties go to the lowest id.
    pub fn nearest(&self, v: &[f64; 3]) -> usize {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (i, n) in self.nodes.iter().enumerate() {
            let d = d2(n, v);
            if d < bd {
                bd = d;
                best = i;
            }
        }
        best
    }
}

struct Graph {
    nodes: Vec<[f64; 3]>,
    error: Vec<f64>,
    edges: BTreeMap<(usize, usize), u32>,
}

fn ek(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

impl Graph {
    fn neighbors(&self, n: usize) -> Vec<usize> {
        self.edges
            .keys()
            .filter_map(|&(a, b)| if a == n { Some(b) } else if b == n { Some(a) } else { None })
            .collect()
    }

    fn two_nearest(&self, x: &[f64; 3]) -> (usize, usize, f64) {
        let mut s1 = (usize::MAX, f64::INFINITY);
        let mut s2 = (usize::MAX, f64::INFINITY);
        for (i, n) in self.nodes.iter().enumerate() {
            let d = d2(n, x);
            if d < s1.1 {
                s2 = s1;
                s1 = (i, d);
            } else if d < s2.1 {
                s2 = (i, d);
            }
        }
        (s1.0, s2.0, s1.1)
    }

    /// Drops edges older than `a_max` and nodes left without edges, keeping
    /// at least two nodes.
    fn prune(&mut self, a_max: u32) {
        self.edges.retain(|_, age| *age <= a_max);
        let mut i = self.nodes.len();
        while i > 0 {
            i -= 1;
            if self.nodes.len() <= 2 {
                break;
            }
            if self.neighbors(i).is_empty() {
                self.nodes.remove(i);
                self.error.remove(i);
                let shift = |k: usize| if k > i { k - 1 } else { k };
                self.edges = std::mem::take(&mut self.edges)
                    .into_iter()
                    .map(|((a, b), age)| ((shift(a), shift(b)), age))
                    .collect();
            }
        }
    }
}

/// Growing Neural Gas over 3-D velocity samples.
pub fn gng_fit(data: &[[f64; 3]], cfg: &GngConfig) -> Result<Codebook, IngestError> {
    cfg.validate()?;
    let mut distinct: Vec<[f64; 3]> = data.to_vec();
    distinct.sort_by(|a, b| a.iter().zip(b).fold(std::cmp::Ordering::Equal, |o, (x, y)| o.then(x.total_cmp(y))));
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(IngestError::TooFewDistinct(distinct.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let a = rng.random_range(0..data.len());
    let mut b = rng.random_range(0..data.len());
    while data[b] == data[a] {
        b = rng.random_range(0..data.len());
    }
    let mut g = Graph { nodes: vec![data[a], data[b]], error: vec![0.0; 2], edges: BTreeMap::new() };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut t = 0usize;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let x = &data[i];
            t += 1;
            let (s1, s2, dist) = g.two_nearest(x);
            for (_, age) in g.edges.iter_mut().filter(|((p, q), _)| *p == s1 || *q == s1) {
                *age += 1;
            }
            g.error[s1] += dist;
            for k in 0..3 {
                g.nodes[s1][k] += cfg.eps_b * (x[k] - g.nodes[s1][k]);
            }
            for n in g.neighbors(s1) {
                for k in 0..3 {
                    g.nodes[n][k] += cfg.eps_n * (x[k] - g.nodes[n][k]);
                }
            }
            g.edges.insert(ek(s1, s2), 0);
            g.prune(cfg.a_max);
            if t % cfg.lambda_insert == 0 && g.nodes.len() < cfg.max_nodes {
                let q = (0..g.nodes.len()).fold(0, |m, k| if g.error[k] > g.error[m] { k } else { m });
                let nb = g.neighbors(q);
                if let Some(&f) = nb.iter().reduce(|m, k| if g.error[*k] > g.error[*m] { k } else { m }) {
                    let r = g.nodes.len();
                    let w = [0, 1, 2].map(|k| 0.5 * (g.nodes[q][k] + g.nodes[f][k]));
                    g.nodes.push(w);
                    g.edges.remove(&ek(q, f));
                    g.edges.insert(ek(q, r), 0);
                    g.edges.insert(ek(r, f), 0);
                    g.error[q] *= cfg.alpha_split;
                    g.error[f] *= cfg.alpha_split;
                    g.error.push(g.error[q]);
                }
            }
            for e in &mut g.error {
                *e *= cfg.d_decay;
            }
        }
    }
    // Neighbour pulls bias every node towards adjacent clusters; one Lloyd
    // step moves each node onto the mean of the samples it wins.
    let mut sums = vec![[0.0f64; 3]; g.nodes.len()];
    let mut counts = vec![0usize; g.nodes.len()];
    let probe = Codebook { nodes: g.nodes.clone(), edges: Vec::new() };
    for x in data {
        let k = probe.nearest(x);
        counts[k] += 1;
        for j in 0..3 {
            sums[k][j] += x[j];
        }
    }
    for (k, node) in g.nodes.iter_mut().enumerate() {
        if counts[k] > 0 {
            *node = sums[k].map(|s| s / counts[k] as f64);
        }
    }
    Ok(Codebook { nodes: g.nodes, edges: g.edges.into_iter().map(|((a, b), age)| (a, b, age)).collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSequence {
    pub uav_id: usize,
    pub labels: Vec<usize>,
    pub velocities: Vec<[f64; 3]>,
    pub codebook: Codebook,
}

pub fn label_velocities(uav_id: usize, velocities: Vec<[f64; 3]>, codebook: &Codebook) -> ClusterSequence {
    ClusterSequence {
        uav_id,
        labels: velocities.iter().map(|v| codebook.nearest(v)).collect(),
        velocities,
        codebook: codebook.clone(),
    }
}

/// Nearest-node labels of every velocity sample of every UAV in the log.
pub fn label_sequence(log: &FlightLog, codebook: &Codebook) -> Vec<ClusterSequence> {
    log.uavs.iter().map(|u| label_velocities(u.uav_id, u.velocities(), codebook)).collect()
}

pub fn label_symbol(k: usize) -> String {
    format!("c{k:03}")
}

/// Bigram counts pooled over all sequences, smoothed row by row.
pub fn combined_transition(sequences: &[ClusterSequence], n_labels: usize, alpha: f64) -> Result<TransitionMatrix, IngestError> {
    let symbols: Vec<String> = (0..n_labels).map(label_symbol).collect();
    let mut pairs: BTreeMap<(String, String), u64> = BTreeMap::new();
    for s in sequences {
        for w in s.labels.windows(2) {
            *pairs.entry((label_symbol(w[0]), label_symbol(w[1]))).or_default() += 1;
        }
    }
    Ok(estimate_transition(Level::Mot, Level::Mot, &symbols, &symbols, &pairs, alpha)?)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionTrace {
    /// Label observed at each step `t >= 1`.
    pub observed: Vec<usize>,
    pub predicted: Vec<usize>,
    pub corrected: Vec<usize>,
    pub predicted_errors: Vec<bool>,
    pub corrected_errors: Vec<bool>,
    /// Steps whose previous label had no transition row.
    pub unseen: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub n: usize,
    pub predicted_errors: usize,
    pub corrected_errors: usize,
}

impl CorrectionTrace {
    pub fn report(&self) -> CorrectionReport {
        CorrectionReport {
            n: self.observed.len(),
            predicted_errors: self.predicted_errors.iter().filter(|&&e| e).count(),
            corrected_errors: self.corrected_errors.iter().filter(|&&e| e).count(),
        }
    }
}

/// One-step label prediction from the transition row of the previous label,
/// then correction by a softmax likelihood over negative node distances of
/// the measured velocity (sharpness `beta`).
pub fn predict_and_correct(seq: &ClusterSequence, transition: &TransitionMatrix, beta: f64) -> CorrectionTrace {
    let k = transition.to_symbols.len();
    let mut tr = CorrectionTrace {
        observed: Vec::new(),
        predicted: Vec::new(),
        corrected: Vec::new(),
        predicted_errors: Vec::new(),
        corrected_errors: Vec::new(),
        unseen: Vec::new(),
    };
    for t in 1..seq.labels.len() {
        let prev = seq.labels[t - 1];
        let obs = seq.labels[t];
        let prior: Vec<f64> = match transition.row(&label_symbol(prev)) {
            Some(r) => r.to_vec(),
            None => {
                tr.unseen.push(t);
                vec![1.0 / k as f64; k]
            }
        };
        let pred = argmax(&prior);
        let v = &seq.velocities[t];
        let dist: Vec<f64> = (0..k)
            .map(|j| seq.codebook.nodes.get(j).map_or(f64::INFINITY, |n| d2(n, v).sqrt()))
            .collect();
        let m = dist.iter().copied().fold(f64::INFINITY, f64::min);
        let post: Vec<f64> = prior.iter().zip(&dist).map(|(p, d)| p * (-beta * (d - m)).exp()).collect();
        let corr = argmax(&post);
        tr.observed.push(obs);
        tr.predicted.push(pred);
        tr.corrected.push(corr);
        tr.predicted_errors.push(pred != obs);
        tr.corrected_errors.push(corr != obs);
    }
    tr
}

/// Samples a label chain from `matrix` and emits the matching prototype
/// velocity plus Gaussian noise for every step.
pub fn markov_velocity_data(
    matrix: &[Vec<f64>],
    prototypes: &[[f64; 3]],
    steps: usize,
    noise_std: f64,
    seed: u64,
) -> (Vec<usize>, Vec<[f64; 3]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    let mut state = 0usize;
    let mut labels = Vec::with_capacity(steps);
    let mut vels = Vec::with_capacity(steps);
    for _ in 0..steps {
        labels.push(state);
        let p = prototypes[state];
        vels.push([p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng), p[2] + noise.sample(&mut rng)]);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut next = matrix[state].len() - 1;
        for (j, &pj) in matrix[state].iter().enumerate() {
            acc += pj;
            if u < acc {
                next = j;
                break;
            }
        }
        state = next;
    }
    (labels, vels)
}

/// Two UAVs flying three of six cities each from a shared take-off point,
/// sampled at 10 Hz with position noise.
pub fn synthetic_two_uav_log(seed: u64, noise_std: f64) -> FlightLog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("finite std");
    let home = [0.0f64, 0.0];
    let cities: [[f64; 2]; 6] = [[2.0, 1.0], [3.5, 2.5], [1.5, 3.0], [-2.0, 1.0], [-3.5, 2.5], [-1.5, 3.0]];
    let speed = 0.8;
    let dt = 0.1;
    let alt = 1.5;
    let uavs = (0..2)
        .map(|q| {
            let mut pts = vec![home];
            pts.extend_from_slice(&cities[3 * q..3 * q + 3]);
            pts.push(home);
            let mut samples = Vec::new();
            let mut t = 0.0;
            for w in pts.windows(2) {
                let (a, b) = (w[0], w[1]);
                let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                let n = (len / (speed * dt)).ceil().max(1.0) as usize;
                for i in 0..n {
                    let s = i as f64 / n as f64;
                    samples.push(LogSample {
                        t,
                        x: a[0] + s * (b[0] - a[0]) + noise.sample(&mut rng),
                        y: a[1] + s * (b[1] - a[1]) + noise.sample(&mut rng),
                        z: alt + noise.sample(&mut rng),
                    });
                    t += dt;
                }
            }
            UavLog::new(q, samples)
        })
        .collect();
    FlightLog { experiment_id: format!("synthetic-{seed}"), uavs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    const GOOD: &str = "t,x,y,z,uav_id\n0.0,0,0,1,0\n0.1,1,0,1,0\n0.0,5,5,1,1\n0.2,2,0,1,0\n0.1,5,6,1,1\n";

    #[test]
    fn parses_interleaved_log() {
        let log = parse_flightlog(GOOD.as_bytes(), "x").unwrap();
        assert_eq!(log.uavs.len(), 2);
        assert_eq!(log.uavs[0].samples.len(), 3);
        let v = log.uavs[0].velocities();
        assert!((v[1][0] - 10.0).abs() < 1e-9);
        assert!((v[0][0] - 10.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_logs() {
        let shuffled = "t,x,y,z,uav_id\n0.2,0,0,1,0\n0.1,1,0,1,0\n";
        assert!(matches!(parse_flightlog(shuffled.as_bytes(), "x"), Err(IngestError::NonMonotone { .. })));
        assert!(matches!(parse_flightlog("t,x,y,z,uav_id\n".as_bytes(), "x"), Err(IngestError::Empty)));
        assert!(matches!(parse_flightlog("".as_bytes(), "x"), Err(IngestError::MissingColumn(_))));
        assert!(matches!(parse_flightlog("t,x,y,uav_id\n0,0,0,0\n".as_bytes(), "x"), Err(IngestError::MissingColumn(c)) if c == "z"));
    }

    #[test]
    fn flags_gaps_and_resamples() {
        let samples: Vec<LogSample> = [0.0, 0.1, 0.2, 1.0, 1.1].iter().map(|&t| LogSample { t, x: t, y: 0.0, z: 0.0 }).collect();
        let u = UavLog::new(0, samples);
        assert_eq!(u.gaps, vec![3]);
        let r = u.resampled(0.1);
        assert_eq!(r.samples.len(), 12);
        assert!(r.samples.iter().all(|s| (s.x - s.t).abs() < 1e-9));
    }

    #[test]
    fn roundtrips_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        let log = synthetic_two_uav_log(3, 0.01);
        write_flightlog(&p, &log).unwrap();
        let back = load_flightlog(&p).unwrap();
        assert_eq!(back.uavs, log.uavs);
    }

    #[test]
    fn constant_velocity_attracts_all_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<[f64; 3]> = (0..500).map(|_| [1.0 + 1e-4 * rng.random::<f64>(), -2.0, 0.5]).collect();
        let cb = gng_fit(&data, &GngConfig::default()).unwrap();
        for n in &cb.nodes {
            assert!(d2(n, &[1.0, -2.0, 0.5]).sqrt() < 0.01, "{n:?}");
        }
        let same = vec![[1.0, 2.0, 3.0]; 50];
        assert!(matches!(gng_fit(&same, &GngConfig::default()), Err(IngestError::TooFewDistinct(1))));
    }

    #[test]
    fn two_clusters_two_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = Normal::new(0.0, 0.1).unwrap();
        let data: Vec<[f64; 3]> = (0..1000)
            .map(|i| {
                let c = if i % 2 == 0 { [5.0, 0.0, 0.0] } else { [-5.0, 0.0, 1.0] };
                [c[0] + n.sample(&mut rng), c[1] + n.sample(&mut rng), c[2] + n.sample(&mut rng)]
            })
            .collect();
        let cfg = GngConfig { max_nodes: 2, ..Default::default() };
        let cb = gng_fit(&data, &cfg).unwrap();
        assert_eq!(cb.len(), 2);
        let mut hits = [false; 2];
        for node in &cb.nodes {
            if d2(node, &[5.0, 0.0, 0.0]).sqrt() < 0.5 {
                hits[0] = true;
            }
            if d2(node, &[-5.0, 0.0, 1.0]).sqrt() < 0.5 {
                hits[1] = true;
            }
        }
        assert_eq!(hits, [true, true], "{:?}", cb.nodes);
        assert_eq!(gng_fit(&data, &cfg).unwrap(), cb);
    }

    #[test]
    fn labels_break_ties_low() {
        let cb = Codebook { nodes: vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 5.0, 0.0]], edges: Vec::new() };
        assert_eq!(cb.nearest(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(cb.nearest(&[0.0, 5.0, 0.0]), 2);
    }

    fn seq(labels: &[usize], n: usize) -> ClusterSequence {
        let nodes: Vec<[f64; 3]> = (0..n).map(|k| [k as f64, 0.0, 0.0]).collect();
        ClusterSequence {
            uav_id: 0,
            labels: labels.to_vec(),
            velocities: labels.iter().map(|&l| nodes[l]).collect(),
            codebook: Codebook { nodes, edges: Vec::new() },
        }
    }

    #[test]
    fn transition_examples() {
        let t = combined_transition(&[seq(&[0, 0, 0], 3)], 3, 0.0).unwrap();
        assert_eq!(t.rows[0], vec![1.0, 0.0, 0.0]);
        let t = combined_transition(&[seq(&[0, 1, 0, 1], 2)], 2, 0.0).unwrap();
        assert_eq!(t.rows, vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let many = combined_transition(&[seq(&[0, 1, 2, 2, 0], 12)], 12, 1.0).unwrap();
        assert_eq!(many.to_symbols[10], "c010");
    }

    #[test]
    fn identity_matrix_predicts_persistence() {
        let s = seq(&[0, 0, 1, 1, 2, 0], 3);
        let t = combined_transition(&[seq(&[0, 0, 0], 3), seq(&[1, 1], 3), seq(&[2, 2], 3)], 3, 0.0).unwrap();
        assert_eq!(t.rows, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let tr = predict_and_correct(&s, &t, 5.0);
        assert_eq!(tr.predicted, vec![0, 0, 1, 1, 2]);
        assert_eq!(tr.report().predicted_errors, 3);
        // A one-hot prior cannot be overturned by a finite likelihood.
        assert_eq!(tr.corrected, tr.predicted);
        assert!(tr.report().corrected_errors <= tr.report().predicted_errors);
    }

    #[test]
    fn markov_prediction_matches_theory() {
        let m = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.6, 0.3], vec![0.3, 0.3, 0.4]];
        let protos = [[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [-2.0, -2.0, 0.0]];
        let (_, train_v) = markov_velocity_data(&m, &protos, 20000, 0.05, 1);
        let (_, test_v) = markov_velocity_data(&m, &protos, 5000, 0.05, 2);
        let cb = Codebook { nodes: protos.to_vec(), edges: Vec::new() };
        let train = label_velocities(0, train_v, &cb);
        let test = label_velocities(0, test_v, &cb);
        let t = combined_transition(std::slice::from_ref(&train), 3, 1.0).unwrap();
        let tr = predict_and_correct(&test, &t, 2.0);
        let rep = tr.report();
        let acc = 1.0 - rep.predicted_errors as f64 / rep.n as f64;
        // Stationary distribution by power iteration, then sum_i pi_i max_j P_ij.
        let mut pi = vec![1.0 / 3.0; 3];
        for _ in 0..1000 {
            pi = (0..3).map(|j| (0..3).map(|i| pi[i] * m[i][j]).sum()).collect();
        }
        let theory: f64 = (0..3).map(|i| pi[i] * m[i].iter().copied().fold(0.0, f64::max)).sum();
        let sigma = (theory * (1.0 - theory) / rep.n as f64).sqrt();
        assert!((acc - theory).abs() < 3.0 * sigma, "acc {acc} theory {theory} sigma {sigma}");
        assert!(rep.corrected_errors <= rep.predicted_errors);
    }

    #[test]
    fn unseen_labels_fall_back_to_uniform() {
        let t = combined_transition(&[seq(&[0, 1], 2)], 2, 1.0).unwrap();
        let s = seq(&[2, 0], 3);
        let tr = predict_and_correct(&s, &t, 1.0);
        assert_eq!(tr.unseen, vec![1]);
    }

    #[test]
    fn synthetic_log_shape() {
        let log = synthetic_two_uav_log(0, 0.02);
        assert_eq!(log.uavs.len(), 2);
        for u in &log.uavs {
            assert!(u.samples.windows(2).all(|w| w[1].t > w[0].t));
            assert!(u.gaps.is_empty());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn gng_respects_limits(seed in any::<u64>(), max_nodes in 2usize..8, n in 50usize..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<[f64; 3]> = (0..n).map(|_| [rng.random::<f64>() * 4.0, rng.random::<f64>(), rng.random::<f64>() - 0.5]).collect();
            let cfg = GngConfig { max_nodes, lambda_insert: 20, a_max: 10, seed, ..Default::default() };
            let cb = gng_fit(&data, &cfg).unwrap();
            prop_assert!(cb.len() <= max_nodes && cb.len() >= 2);
            prop_assert!(cb.edges.iter().all(|&(a, b, age)| age <= cfg.a_max && a < b && b < cb.len()));
            prop_assert_eq!(&gng_fit(&data, &cfg).unwrap(), &cb);
        }

        #[test]
        fn correction_never_hurts(seed in any::<u64>(), beta in 0.1f64..10.0) {
            let m = vec![vec![0.5, 0.5, 0.0], vec![0.0, 0.5, 0.5], vec![0.5, 0.0, 0.5]];
            let protos = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
            let (_, v) = markov_velocity_data(&m, &protos, 300, 0.3, seed);
            let cb = Codebook { nodes: protos.to_vec(), edges: Vec::new() };
            let s = label_velocities(0, v, &cb);
            let t = combined_transition(std::slice::from_ref(&s), 3, 0.5).unwrap();
            let tr = predict_and_correct(&s, &t, beta);
            for (p, c) in tr.predicted_errors.iter().zip(&tr.corrected_errors) {
                prop_assert!(!(!*p && *c));
            }
        }

        #[test]
        fn transition_ignores_sequence_order(a in prop::collection::vec(0usize..4, 2..30), b in prop::collection::vec(0usize..4, 2..30)) {
            let x = combined_transition(&[seq(&a, 4), seq(&b, 4)], 4, 0.5).unwrap();
            let y = combined_transition(&[seq(&b, 4), seq(&a, 4)], 4, 0.5).unwrap();
            prop_assert_eq!(&x, &y);
            for r in &x.rows {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
