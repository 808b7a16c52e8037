//! Smoothed reference distributions, level-to-level transition matrices and
//! the swarm-size table learned from symbolic demonstrations.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::symbolic::{Dictionaries, LetterCodebook, QuantizerConfig, SymbolicTriplet};

pub const MODEL_VERSION: &str = "swarmwm-model/1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot normalize: all counts are zero and alpha is 0")]
    ZeroMass,
    #[error("empty symbol set for {0}")]
    EmptySupport(Level),
    #[error("alpha must be finite and >= 0, got {0}")]
    BadAlpha(f64),
    #[error("unknown {level} symbol `{symbol}`")]
    UnknownSymbol { level: Level, symbol: String },
    #[error("model version mismatch: file has `{found}`, expected `{MODEL_VERSION}`")]
    Version { found: String },
    #[error("malformed model file: {0}")]
    Format(#[from] serde_json::Error),
    #[error("model file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("swarm-size table is empty")]
    EmptyTable,
    #[error(transparent)]
    Symbolic(#[from] crate::symbolic::SymbolicError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Level {
    Msn,
    Rte,
    Mot,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Msn => "mission",
            Level::Rte => "route",
            Level::Mot => "motion",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDistribution {
    pub level: Level,
    pub symbols: Vec<String>,
    pub probs: Vec<f64>,
    pub alpha: f64,
}

impl ReferenceDistribution {
    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.binary_search_by(|s| s.as_str().cmp(symbol)).ok()
    }

    pub fn prob(&self, symbol: &str) -> Option<f64> {
        self.index_of(symbol).map(|i| self.probs[i])
    }
}

fn check_alpha(alpha: f64) -> Result<(), ModelError> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(ModelError::BadAlpha(alpha))
    }
}

fn smooth(counts: &[f64], alpha: f64) -> Option<Vec<f64>> {
    let k = counts.len() as f64;
    let total: f64 = counts.iter().sum::<f64>() + alpha * k;
    if total > 0.0 {
        Some(counts.iter().map(|n| (n + alpha) / total).collect())
    } else {
        None
    }
}

/// Additively smoothed frequencies `(n_i + alpha) / (sum n + alpha K)`.
pub fn estimate_reference(level: Level, counts: &BTreeMap<String, u64>, alpha: f64) -> Result<ReferenceDistribution, ModelError> {
    check_alpha(alpha)?;
    if counts.is_empty() {
        return Err(ModelError::EmptySupport(level));
    }
    let n: Vec<f64> = counts.values().map(|&c| c as f64).collect();
    let probs = smooth(&n, alpha).ok_or(ModelError::ZeroMass)?;
    Ok(ReferenceDistribution { level, symbols: counts.keys().cloned().collect(), probs, alpha })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    pub from: Level,
    pub to: Level,
    pub from_symbols: Vec<String>,
    pub to_symbols: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub alpha: f64,
    /// Raw pair counts behind `rows`, kept to recover co-occurrence support.
    #[serde(default)]
    pub counts: Vec<Vec<u64>>,
}

impl TransitionMatrix {
    /// Target symbols observed at least once after `from_symbol`.
    pub fn support(&self, from_symbol: &str) -> Vec<usize> {
        self.from_symbols
            .binary_search_by(|s| s.as_str().cmp(from_symbol))
            .ok()
            .and_then(|i| self.counts.get(i))
            .map(|c| c.iter().enumerate().filter(|(_, &n)| n > 0).map(|(j, _)| j).collect())
            .unwrap_or_default()
    }

    pub fn row(&self, from_symbol: &str) -> Option<&[f64]> {
        self.from_symbols
            .binary_search_by(|s| s.as_str().cmp(from_symbol))
            .ok()
            .map(|i| self.rows[i].as_slice())
    }

    pub fn to_index(&self, to_symbol: &str) -> Option<usize> {
        self.to_symbols.binary_search_by(|s| s.as_str().cmp(to_symbol)).ok()
    }

    /// Row as a distribution over the target level.
    pub fn row_distribution(&self, from_symbol: &str) -> Option<ReferenceDistribution> {
        self.row(from_symbol).map(|r| ReferenceDistribution {
            level: self.to,
            symbols: self.to_symbols.clone(),
            probs: r.to_vec(),
            alpha: self.alpha,
        })
    }
}

/// Row-wise smoothed conditional frequencies. Pairs naming symbols outside
/// the given sets are ignored. A row with no mass (possible only with
/// `alpha = 0`) becomes uniform.
pub fn estimate_transition(
    from: Level,
    to: Level,
    from_symbols: &[String],
    to_symbols: &[String],
    pair_counts: &BTreeMap<(String, String), u64>,
    alpha: f64,
) -> Result<TransitionMatrix, ModelError> {
    check_alpha(alpha)?;
    if from_symbols.is_empty() {
        return Err(ModelError::EmptySupport(from));
    }
    if to_symbols.is_empty() {
        return Err(ModelError::EmptySupport(to));
    }
    let mut fs = from_symbols.to_vec();
    fs.sort();
    fs.dedup();
    let mut ts = to_symbols.to_vec();
    ts.sort();
    ts.dedup();
    let k = ts.len();
    let counts: Vec<Vec<u64>> = fs
        .iter()
        .map(|f| ts.iter().map(|t| pair_counts.get(&(f.clone(), t.clone())).copied().unwrap_or(0)).collect())
        .collect();
    let rows = counts
        .iter()
        .map(|c| {
            let c: Vec<f64> = c.iter().map(|&n| n as f64).collect();
            smooth(&c, alpha).unwrap_or_else(|| vec![1.0 / k as f64; k])
        })
        .collect();
    Ok(TransitionMatrix { from, to, from_symbols: fs, to_symbols: ts, rows, alpha, counts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwarmSizeTable {
    pub bin_width: usize,
    /// Swarm sizes indexing each row.
    pub q_values: Vec<usize>,
    /// City-count bin -> distribution over `q_values`.
    pub rows: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwarmSizeInference {
    pub q: usize,
    pub bin: usize,
    /// The city-count bin was never observed; the nearest observed bin was used.
    pub fallback: bool,
}

impl SwarmSizeTable {
    pub fn bin_of(&self, n_cities: usize) -> usize {
        n_cities / self.bin_width.max(1)
    }

    pub fn build(pairs: &[(usize, usize)], bin_width: usize, alpha: f64) -> Result<Self, ModelError> {
        check_alpha(alpha)?;
        let bw = bin_width.max(1);
        let mut qs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        qs.sort_unstable();
        qs.dedup();
        if qs.is_empty() {
            return Err(ModelError::EmptyTable);
        }
        let mut counts: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for &(n, q) in pairs {
            let row = counts.entry(n / bw).or_insert_with(|| vec![0.0; qs.len()]);
            row[qs.binary_search(&q).expect("q collected above")] += 1.0;
        }
        let rows = counts
            .into_iter()
            .map(|(b, c)| (b, smooth(&c, alpha).expect("observed rows carry mass")))
            .collect();
        Ok(Self { bin_width: bw, q_values: qs, rows })
    }

    pub fn infer(&self, n_cities: usize) -> Result<SwarmSizeInference, ModelError> {
        let want = self.bin_of(n_cities);
        let bin = self
            .rows
            .keys()
            .copied()
            .min_by_key(|&b| (b.abs_diff(want), b))
            .ok_or(ModelError::EmptyTable)?;
        let row = &self.rows[&bin];
        let mut best = 0;
        for (i, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = i;
            }
        }
        Ok(SwarmSizeInference { q: self.q_values[best], bin, fallback: bin != want })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub demonstrations: usize,
    pub seeds: Vec<u64>,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldModel {
    pub version: String,
    pub quantizer: QuantizerConfig,
    pub dictionaries: Dictionaries,
    pub mission_ref: ReferenceDistribution,
    pub route_ref: ReferenceDistribution,
    pub motion_ref: ReferenceDistribution,
    pub t_msn_rte: TransitionMatrix,
    pub t_rte_mot: TransitionMatrix,
    pub swarm_size: SwarmSizeTable,
    /// Mission-word distribution conditioned on the city-count bin.
    pub mission_context: BTreeMap<usize, ReferenceDistribution>,
    pub meta: TrainingMeta,
}

/// Estimates every model component from abstracted demonstrations. The
/// result does not depend on the order of `triplets`.
pub fn learn(
    triplets: &[SymbolicTriplet],
    codebook: LetterCodebook,
    quantizer: QuantizerConfig,
    alpha: f64,
    seeds: Vec<u64>,
    swarm_bin_width: usize,
) -> Result<WorldModel, ModelError> {
    let dictionaries = crate::symbolic::build_dictionaries(triplets, codebook)?;
    let msn: BTreeMap<String, u64> = dictionaries.mission.iter().map(|e| (e.signature.key(), e.count)).collect();
    let rte: BTreeMap<String, u64> = dictionaries.route.iter().map(|e| (e.word.key(), e.count)).collect();
    let mot: BTreeMap<String, u64> = dictionaries.motion.iter().map(|e| (e.word().key(), e.count)).collect();
    let mut mr: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut ro: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut ctx_counts: BTreeMap<usize, BTreeMap<String, u64>> = BTreeMap::new();
    let bw = swarm_bin_width.max(1);
    for t in triplets {
        for u in &t.uavs {
            *mr.entry((u.mission.key(), u.route.key())).or_default() += 1;
            *ro.entry((u.route.key(), u.motion.key())).or_default() += 1;
        }
        let row = ctx_counts.entry(t.n_cities / bw).or_default();
        for k in msn.keys() {
            row.entry(k.clone()).or_insert(0);
        }
        for u in &t.uavs {
            *row.entry(u.mission.key()).or_default() += 1;
        }
    }
    let msn_keys: Vec<String> = msn.keys().cloned().collect();
    let rte_keys: Vec<String> = rte.keys().cloned().collect();
    let mot_keys: Vec<String> = mot.keys().cloned().collect();
    let pairs: Vec<(usize, usize)> = triplets.iter().map(|t| (t.n_cities, t.uav_count)).collect();
    let mission_context = ctx_counts
        .into_iter()
        .map(|(b, c)| {
            let r = estimate_reference(Level::Msn, &c, alpha).or_else(|_| estimate_reference(Level::Msn, &c, 1.0))?;
            Ok((b, r))
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(WorldModel {
        version: MODEL_VERSION.to_string(),
        quantizer,
        mission_ref: estimate_reference(Level::Msn, &msn, alpha)?,
        route_ref: estimate_reference(Level::Rte, &rte, alpha)?,
        motion_ref: estimate_reference(Level::Mot, &mot, alpha)?,
        t_msn_rte: estimate_transition(Level::Msn, Level::Rte, &msn_keys, &rte_keys, &mr, alpha)?,
        t_rte_mot: estimate_transition(Level::Rte, Level::Mot, &rte_keys, &mot_keys, &ro, alpha)?,
        swarm_size: SwarmSizeTable::build(&pairs, bw, alpha)?,
        mission_context,
        dictionaries,
        meta: TrainingMeta { demonstrations: triplets.len(), seeds, alpha },
    })
}

impl WorldModel {
    /// `p_ref(msn) * T(msn -> rte) * T(rte -> mot)`.
    pub fn joint_probability(&self, msn: &str, rte: &str, mot: &str) -> Result<f64, ModelError> {
        let unknown = |level: Level, s: &str| ModelError::UnknownSymbol { level, symbol: s.to_string() };
        let p = self.mission_ref.prob(msn).ok_or_else(|| unknown(Level::Msn, msn))?;
        let row_mr = self.t_msn_rte.row(msn).ok_or_else(|| unknown(Level::Msn, msn))?;
        let j = self.t_msn_rte.to_index(rte).ok_or_else(|| unknown(Level::Rte, rte))?;
        let row_ro = self.t_rte_mot.row(rte).ok_or_else(|| unknown(Level::Rte, rte))?;
        let k = self.t_rte_mot.to_index(mot).ok_or_else(|| unknown(Level::Mot, mot))?;
        Ok(p * row_mr[j] * row_ro[k])
    }

    pub fn infer_swarm_size(&self, n_cities: usize) -> Result<SwarmSizeInference, ModelError> {
        self.swarm_size.infer(n_cities)
    }

    pub fn to_json(&self) -> Result<String, ModelError> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let found = v.get("version").and_then(|x| x.as_str()).unwrap_or("<missing>");
        if found != MODEL_VERSION {
            return Err(ModelError::Version { found: found.to_string() });
        }
        Ok(serde_json::from_value(v)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json()?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbolic::{MissionWord, MotionWord, Orientation, RouteWord, UavWords};
    use proptest::prelude::*;

    fn counts(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }

    #[test]
    fn reference_examples() {
        let r = estimate_reference(Level::Msn, &counts(&[("a", 3), ("b", 1)]), 1.0).unwrap();
        assert!((r.probs[0] - 4.0 / 6.0).abs() < 1e-15);
        assert!((r.probs[1] - 2.0 / 6.0).abs() < 1e-15);
        let r = estimate_reference(Level::Msn, &counts(&[("a", 0), ("b", 0)]), 1.0).unwrap();
        assert_eq!(r.probs, vec![0.5, 0.5]);
        let r = estimate_reference(Level::Msn, &counts(&[("a", 2), ("b", 2)]), 0.0).unwrap();
        assert_eq!(r.probs, vec![0.5, 0.5]);
        assert!(matches!(
            estimate_reference(Level::Msn, &counts(&[("a", 0), ("b", 0)]), 0.0),
            Err(ModelError::ZeroMass)
        ));
    }

    #[test]
    fn transition_examples() {
        let syms = vec!["x".to_string(), "y".to_string()];
        let mut pc = BTreeMap::new();
        pc.insert(("x".to_string(), "x".to_string()), 2);
        pc.insert(("y".to_string(), "y".to_string()), 2);
        let t = estimate_transition(Level::Msn, Level::Rte, &syms, &syms, &pc, 1.0).unwrap();
        assert_eq!(t.rows, vec![vec![0.75, 0.25], vec![0.25, 0.75]]);
        let t = estimate_transition(Level::Msn, Level::Rte, &syms, &syms, &BTreeMap::new(), 1.0).unwrap();
        assert_eq!(t.rows[0], vec![0.5, 0.5]);
        let t = estimate_transition(Level::Msn, Level::Rte, &syms, &syms, &BTreeMap::new(), 0.0).unwrap();
        assert_eq!(t.rows[1], vec![0.5, 0.5]);
    }

    fn toy_triplets(k: u8, n: usize) -> Vec<SymbolicTriplet> {
        let mut out = Vec::new();
        for i in 0..n {
            let m = MissionWord { share_bin: (i % k as usize) as u8, sector_bin: 0, ring_bin: 0 };
            let r = RouteWord { parent: m, orientation: if i % 2 == 0 { Orientation::Cw } else { Orientation::Ccw }, nn_bin: (i % 3) as u8 };
            out.push(SymbolicTriplet {
                n_cities: 10 + i,
                uav_count: 1 + i % 2,
                uavs: vec![UavWords { uav: 0, mission: m, route: r, motion: MotionWord::from_letters(&[i % k as usize]) }],
            });
        }
        out
    }

    fn codebook() -> LetterCodebook {
        LetterCodebook { means: [0.0; 6], stds: [1.0; 6], centroids: vec![[0.0; 6]] }
    }

    fn model(ts: &[SymbolicTriplet], alpha: f64) -> WorldModel {
        learn(ts, codebook(), QuantizerConfig::default(), alpha, vec![0], 10).unwrap()
    }

    #[test]
    fn joint_sums_to_one() {
        let m = model(&toy_triplets(3, 12), 1.0);
        let mut total = 0.0;
        let mut brute = 0.0;
        for a in &m.mission_ref.symbols {
            for b in &m.route_ref.symbols {
                for c in &m.motion_ref.symbols {
                    total += m.joint_probability(a, b, c).unwrap();
                    // Oracle: look factors up by position without the helper.
                    let ia = m.mission_ref.symbols.iter().position(|s| s == a).unwrap();
                    let ib = m.t_msn_rte.to_symbols.iter().position(|s| s == b).unwrap();
                    let ic = m.t_rte_mot.to_symbols.iter().position(|s| s == c).unwrap();
                    let ra = m.t_msn_rte.from_symbols.iter().position(|s| s == a).unwrap();
                    let rb = m.t_rte_mot.from_symbols.iter().position(|s| s == b).unwrap();
                    brute += m.mission_ref.probs[ia] * m.t_msn_rte.rows[ra][ib] * m.t_rte_mot.rows[rb][ic];
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-9);
        assert!((total - brute).abs() < 1e-12);
        assert!(matches!(m.joint_probability("nope", "x", "y"), Err(ModelError::UnknownSymbol { level: Level::Msn, .. })));
    }

    #[test]
    fn single_symbol_model() {
        let m = model(&toy_triplets(1, 1), 1.0);
        let p = m.joint_probability(&m.mission_ref.symbols[0], &m.route_ref.symbols[0], &m.motion_ref.symbols[0]).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn swarm_size_examples() {
        let t = SwarmSizeTable::build(&[(50, 2), (50, 2)], 10, 1.0).unwrap();
        assert_eq!(t.infer(50).unwrap().q, 2);
        let mono: Vec<(usize, usize)> = (1..=8).flat_map(|k| vec![(k * 10, k / 2 + 1); 3]).collect();
        let t = SwarmSizeTable::build(&mono, 10, 1.0).unwrap();
        let qs: Vec<usize> = (1..=8).map(|k| t.infer(k * 10).unwrap().q).collect();
        assert!(qs.windows(2).all(|w| w[0] <= w[1]), "{qs:?}");
        let f = t.infer(500).unwrap();
        assert!(f.fallback);
        assert!(!t.infer(40).unwrap().fallback);
        // Tie between two swarm sizes picks the smaller.
        let t = SwarmSizeTable::build(&[(20, 3), (20, 2)], 10, 0.0).unwrap();
        assert_eq!(t.infer(20).unwrap().q, 2);
    }

    #[test]
    fn save_load_roundtrip_and_errors() {
        let m = model(&toy_triplets(3, 6), 1.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(WorldModel::load(&p).unwrap(), m);
        std::fs::write(&p, "{ not json").unwrap();
        assert!(matches!(WorldModel::load(&p), Err(ModelError::Format(_))));
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        v["version"] = "other/9".into();
        assert!(matches!(WorldModel::from_json(&v.to_string()), Err(ModelError::Version { .. })));
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        v.as_object_mut().unwrap().remove("t_rte_mot");
        let err = WorldModel::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("t_rte_mot"), "{err}");
    }

    #[test]
    fn order_invariant_and_deterministic() {
        let ts = toy_triplets(4, 20);
        let a = model(&ts, 1.0);
        let mut rev = ts.clone();
        rev.reverse();
        let b = model(&rev, 1.0);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    }

    #[test]
    fn doubling_counts_with_zero_alpha() {
        let ts = toy_triplets(3, 9);
        let mut doubled = ts.clone();
        doubled.extend(ts.clone());
        let a = model(&ts, 0.0);
        let b = model(&doubled, 0.0);
        for (x, y) in a.mission_ref.probs.iter().zip(&b.mission_ref.probs) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(a.t_msn_rte.rows.len(), b.t_msn_rte.rows.len());
        for (ra, rb) in a.t_msn_rte.rows.iter().zip(&b.t_msn_rte.rows) {
            for (x, y) in ra.iter().zip(rb) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn normalized_and_positive(cs in proptest::collection::vec(0u64..50, 1..12), alpha in 0.01..5.0f64) {
            let c: BTreeMap<String, u64> = cs.iter().enumerate().map(|(i, &n)| (format!("s{i:02}"), n)).collect();
            let r = estimate_reference(Level::Rte, &c, alpha).unwrap();
            prop_assert!((r.probs.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(r.probs.iter().all(|&p| p > 0.0));
            let syms: Vec<String> = c.keys().cloned().collect();
            let pc: BTreeMap<(String, String), u64> = syms
                .iter()
                .zip(cs.iter())
                .map(|(s, &n)| ((s.clone(), syms[(n as usize) % syms.len()].clone()), n))
                .collect();
            let t = estimate_transition(Level::Rte, Level::Mot, &syms, &syms, &pc, alpha).unwrap();
            for row in &t.rows {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|&p| p > 0.0));
            }
        }
    }
}
