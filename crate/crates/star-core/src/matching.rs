//! Cross-domain state matching. Each demo state gets a temporally
//! aggregated skill distribution; the matcher finds the target state
//! whose aggregated distribution is nearest in symmetric KL, and the
//! demos are relabeled onto those matched states to form proxy demos
//! (target-domain states with the source skill labels, no actions).

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, Dataset};
use crate::env::{Domain, EnvPair, EnvSpec};
use crate::skillmodel::SemanticPrior;
use crate::tensor::EPS_P;

pub const PROXY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("target dataset has no states to match against")]
    EmptyTarget,
    #[error("no match recorded for demo state ({traj}, {t})")]
    MissingMatch { traj: usize, t: usize },
    #[error("distribution has {got} classes, expected {want}")]
    ClassMismatch { got: usize, want: usize },
    #[error("distribution shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Temporal window for skill-distribution aggregation. Weights decay
/// geometrically away from the anchored step in both directions and
/// the sums are truncated once a weight drops below `w_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregationParams {
    pub gamma_fwd: f64,
    pub gamma_back: f64,
    pub w_min: f64,
    /// Use the absolute step index as the forward exponent and weight
    /// past state `s_{t-j}` by `gamma_back^(t-j)`, stopping at `j =
    /// t-1`. Weights are then not monotone along the scan, so no
    /// truncation applies. Comparison mode only.
    pub literal_exponents: bool,
}

impl AggregationParams {
    pub fn defaults() -> Self {
        Self { gamma_fwd: 0.99, gamma_back: 0.99, w_min: 1e-3, literal_exponents: false }
    }

    /// Window collapsed to the anchored step alone.
    pub fn single_state() -> Self {
        Self { gamma_fwd: 0.0, gamma_back: 0.0, ..Self::defaults() }
    }
}

fn add_weighted(acc: &mut [f64], row: &[f64], w: f64) {
    for (a, v) in acc.iter_mut().zip(row) {
        *a += w * v;
    }
}

/// Aggregated skill distribution for step `t` given one trajectory's
/// per-step distributions. The current step enters with weight one,
/// step `t+i` with `gamma_fwd^i`, and step `t-j` with `gamma_back^j`;
/// the result is renormalized to sum to one. Zero gammas reduce it to
/// `dists[t]` itself.
pub fn aggregate(dists: &[Vec<f64>], t: usize, params: &AggregationParams) -> Vec<f64> {
    assert!(t < dists.len(), "step {t} out of range ({} dists)", dists.len());
    assert!(
        (0.0..=1.0).contains(&params.gamma_fwd) && (0.0..=1.0).contains(&params.gamma_back),
        "gammas must lie in [0, 1]"
    );
    assert!(params.w_min > 0.0 && params.w_min <= 1.0, "w_min must lie in (0, 1]");
    let mut acc = vec![0.0; dists[t].len()];
    let mut z = 0.0;
    if params.literal_exponents {
        for (i, row) in dists.iter().enumerate().skip(t) {
            let w = params.gamma_fwd.powi(i as i32);
            add_weighted(&mut acc, row, w);
            z += w;
        }
        for j in 1..t {
            let w = params.gamma_back.powi((t - j) as i32);
            add_weighted(&mut acc, &dists[t - j], w);
            z += w;
        }
        if z <= 0.0 {
            // gamma_fwd = 0 with t > 0 zeroes every literal weight;
            // fall back to the bare state distribution.
            return dists[t].clone();
        }
    } else {
        let mut w = 1.0;
        for row in &dists[t..] {
            add_weighted(&mut acc, row, w);
            z += w;
            w *= params.gamma_fwd;
            if w < params.w_min {
                break;
            }
        }
        let mut w = params.gamma_back;
        for j in 1..=t {
            if w < params.w_min {
                break;
            }
            add_weighted(&mut acc, &dists[t - j], w);
            z += w;
            w *= params.gamma_back;
        }
    }
    for v in &mut acc {
        *v /= z;
    }
    acc
}

/// `aggregate` applied at every step of a trajectory.
pub fn aggregate_traj(dists: &[Vec<f64>], params: &AggregationParams) -> Vec<Vec<f64>> {
    (0..dists.len()).map(|t| aggregate(dists, t, params)).collect()
}

/// KL(p||q) + KL(q||p) with probabilities floored at EPS_P inside the
/// logs. Every per-class term (p_k - q_k)(ln p_k - ln q_k) is
/// nonnegative, which the pruned matcher relies on for early exit.
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len(), "class count mismatch: {} vs {}", p.len(), q.len());
    let mut acc = 0.0;
    for (a, b) in p.iter().zip(q) {
        acc += (a - b) * (a.max(EPS_P).ln() - b.max(EPS_P).ln());
    }
    acc
}

/// Per-step skill distributions for every trajectory, evaluated with a
/// trained prior on each non-final observation.
pub fn step_dists_from_prior(ds: &Dataset, prior: &SemanticPrior) -> Vec<Vec<Vec<f64>>> {
    ds.trajectories
        .iter()
        .map(|traj| {
            let probs = prior.probs_rows(&traj.obs[..traj.len()]);
            probs.data.chunks(probs.cols).map(|r| r.to_vec()).collect()
        })
        .collect()
}

/// Per-step skill distributions straight from the labels: the soft
/// distributions when a trajectory carries them, one-hot otherwise.
pub fn step_dists_from_labels(ds: &Dataset) -> Vec<Vec<Vec<f64>>> {
    ds.trajectories
        .iter()
        .map(|traj| match &traj.dists {
            Some(d) => d.clone(),
            None => traj.skills.iter().map(|&k| data::one_hot(k, ds.n_skills)).collect(),
        })
        .collect()
}

/// Flattened target states with their aggregated distributions,
/// precomputed once and searched many times.
pub struct TargetIndex {
    /// Flat position -> (trajectory, step), in scan order.
    pub index: Vec<(usize, usize)>,
    pub phi: Vec<Vec<f64>>,
}

impl TargetIndex {
    pub fn build(
        step_dists: &[Vec<Vec<f64>>],
        params: &AggregationParams,
    ) -> Result<Self, MatchError> {
        let mut index = Vec::new();
        let mut phi = Vec::new();
        for (ti, traj) in step_dists.iter().enumerate() {
            for (t, d) in aggregate_traj(traj, params).into_iter().enumerate() {
                index.push((ti, t));
                phi.push(d);
            }
        }
        if phi.is_empty() {
            return Err(MatchError::EmptyTarget);
        }
        Ok(Self { index, phi })
    }

    pub fn width(&self) -> usize {
        self.phi[0].len()
    }
}

/// One matched demo state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub src_traj: usize,
    pub src_t: usize,
    pub tgt_traj: usize,
    pub tgt_t: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub params: AggregationParams,
    pub records: Vec<MatchRecord>,
}

/// Exact argmin of the symmetric KL over all target states. Candidates
/// are scanned in (trajectory, step) order and one is abandoned as soon
/// as its partial sum exceeds the best complete score, which cannot
/// change the argmin because every per-class term is nonnegative. Ties
/// keep the lowest (trajectory, step) index. Returns the flat index.
pub fn match_state(phi: &[f64], target: &TargetIndex) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_score = f64::INFINITY;
    for (ci, cand) in target.phi.iter().enumerate() {
        let mut acc = 0.0;
        for (a, b) in phi.iter().zip(cand) {
            acc += (a - b) * (a.max(EPS_P).ln() - b.max(EPS_P).ln());
            if acc > best_score {
                break;
            }
        }
        if acc < best_score {
            best = ci;
            best_score = acc;
        }
    }
    (best, best_score)
}

/// Unpruned reference scan; pins the pruned matcher in tests.
pub fn match_state_brute(phi: &[f64], target: &TargetIndex) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_score = f64::INFINITY;
    for (ci, cand) in target.phi.iter().enumerate() {
        let s = symmetric_kl(phi, cand);
        if s < best_score {
            best = ci;
            best_score = s;
        }
    }
    (best, best_score)
}

/// Match every state of every source trajectory against the target
/// index. Source states are independent, so the scan is parallel over
/// them; each inner argmin is sequential and the output order is the
/// flat source order either way, so results are deterministic.
pub fn match_all(
    src_agg: &[Vec<Vec<f64>>],
    target: &TargetIndex,
    params: &AggregationParams,
) -> Result<MatchResult, MatchError> {
    let want = target.width();
    let flat: Vec<(usize, usize, &[f64])> = src_agg
        .iter()
        .enumerate()
        .flat_map(|(ti, traj)| traj.iter().enumerate().map(move |(t, d)| (ti, t, d.as_slice())))
        .collect();
    for &(_, _, d) in &flat {
        if d.len() != want {
            return Err(MatchError::ClassMismatch { got: d.len(), want });
        }
    }
    let records: Vec<MatchRecord> = flat
        .par_iter()
        .map(|&(src_traj, src_t, phi)| {
            let (ci, score) = match_state(phi, target);
            let (tgt_traj, tgt_t) = target.index[ci];
            MatchRecord { src_traj, src_t, tgt_traj, tgt_t, score }
        })
        .collect();
    Ok(MatchResult { params: *params, records })
}

/// Demonstrations carried into the target domain: matched target states
/// with the source skill labels. Actions are dropped because target
/// actions are unknown; `states.len() == skills.len()` per trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyDemos {
    pub domain: Domain,
    pub n_skills: usize,
    pub obs_dim: usize,
    pub trajectories: Vec<ProxyTraj>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyTraj {
    pub states: Vec<Vec<f64>>,
    pub skills: Vec<usize>,
}

impl ProxyDemos {
    /// (state, label) pairs pooled across trajectories, for training a
    /// demo skill classifier.
    pub fn labeled_states(&self) -> Vec<(Vec<f64>, usize)> {
        self.trajectories
            .iter()
            .flat_map(|t| t.states.iter().cloned().zip(t.skills.iter().copied()))
            .collect()
    }

    /// All states pooled, for use as discriminator positives.
    pub fn all_states(&self) -> Vec<Vec<f64>> {
        self.trajectories.iter().flat_map(|t| t.states.iter().cloned()).collect()
    }

    /// (state, relative position) pairs where position is t over the
    /// final index, for training a progress predictor.
    pub fn progress_samples(&self) -> Vec<(Vec<f64>, f64)> {
        self.trajectories
            .iter()
            .flat_map(|t| {
                let denom = (t.states.len().saturating_sub(1)).max(1) as f64;
                t.states
                    .iter()
                    .enumerate()
                    .map(move |(i, s)| (s.clone(), i as f64 / denom))
            })
            .collect()
    }

    /// True target demos viewed as proxies (states plus labels, actions
    /// dropped); the oracle stand-in for matched proxies.
    pub fn from_target_demos(demos: &Dataset) -> ProxyDemos {
        ProxyDemos {
            domain: demos.domain,
            n_skills: demos.n_skills,
            obs_dim: demos.obs_dim,
            trajectories: demos
                .trajectories
                .iter()
                .map(|t| ProxyTraj {
                    states: t.obs[..t.len()].to_vec(),
                    skills: t.skills.clone(),
                })
                .collect(),
        }
    }
}

/// Replace every demo state with its matched target state, carrying the
/// skill labels over. Proxy trajectory lengths equal demo lengths.
pub fn relabel(
    demos: &Dataset,
    target: &Dataset,
    matches: &MatchResult,
) -> Result<ProxyDemos, MatchError> {
    let mut map = BTreeMap::new();
    for r in &matches.records {
        map.insert((r.src_traj, r.src_t), r);
    }
    let mut trajectories = Vec::with_capacity(demos.trajectories.len());
    for (ti, traj) in demos.trajectories.iter().enumerate() {
        let mut states = Vec::with_capacity(traj.len());
        for t in 0..traj.len() {
            let r = map.get(&(ti, t)).ok_or(MatchError::MissingMatch { traj: ti, t })?;
            states.push(target.trajectories[r.tgt_traj].obs[r.tgt_t].clone());
        }
        trajectories.push(ProxyTraj { states, skills: traj.skills.clone() });
    }
    Ok(ProxyDemos {
        domain: target.domain,
        n_skills: demos.n_skills,
        obs_dim: target.obs_dim,
        trajectories,
    })
}

/// Where the demo-side per-step skill distributions come from.
pub enum DemoDists<'a> {
    /// Evaluate a trained prior on every demo state (the default path).
    Prior(&'a SemanticPrior),
    /// Use the labels recorded in the demos: soft distributions when
    /// present, one-hot otherwise.
    Labels,
    /// Distributions supplied out of band, one row per demo step.
    External(&'a [Vec<Vec<f64>>]),
}

fn validate_external(demos: &Dataset, dists: &[Vec<Vec<f64>>]) -> Result<(), MatchError> {
    if dists.len() != demos.trajectories.len() {
        return Err(MatchError::Shape(format!(
            "{} trajectories of distributions for {} demos",
            dists.len(),
            demos.trajectories.len()
        )));
    }
    for (i, (d, traj)) in dists.iter().zip(&demos.trajectories).enumerate() {
        if d.len() != traj.len() {
            return Err(MatchError::Shape(format!(
                "trajectory {i}: {} rows for {} steps",
                d.len(),
                traj.len()
            )));
        }
        for row in d {
            if row.len() != demos.n_skills {
                return Err(MatchError::ClassMismatch { got: row.len(), want: demos.n_skills });
            }
        }
    }
    Ok(())
}

/// Full matching pipeline: demo-side distributions from `src`, target
/// side always from the trained target prior, aggregation on both, the
/// nearest-state search, and relabeling into proxy demos.
pub fn match_demos(
    demos: &Dataset,
    src: DemoDists,
    target: &Dataset,
    target_prior: &SemanticPrior,
    params: &AggregationParams,
) -> Result<(MatchResult, ProxyDemos), MatchError> {
    let src_dists = match src {
        DemoDists::Prior(p) => step_dists_from_prior(demos, p),
        DemoDists::Labels => step_dists_from_labels(demos),
        DemoDists::External(d) => {
            validate_external(demos, d)?;
            d.to_vec()
        }
    };
    let tgt_dists = step_dists_from_prior(target, target_prior);
    let index = TargetIndex::build(&tgt_dists, params)?;
    let src_agg: Vec<Vec<Vec<f64>>> =
        src_dists.iter().map(|d| aggregate_traj(d, params)).collect();
    let result = match_all(&src_agg, &index, params)?;
    let proxy = relabel(demos, target, &result)?;
    Ok((result, proxy))
}

/// `match_demos` with the demo-side distributions loaded from a
/// distribution file instead of prior evaluation.
pub fn match_from_external(
    path: &Path,
    demos: &Dataset,
    target: &Dataset,
    target_prior: &SemanticPrior,
    params: &AggregationParams,
) -> Result<(MatchResult, ProxyDemos), MatchError> {
    let (n_skills, dists) = data::load_dist_file(path)?;
    if n_skills != demos.n_skills {
        return Err(MatchError::ClassMismatch { got: n_skills, want: demos.n_skills });
    }
    match_demos(demos, DemoDists::External(&dists), target, target_prior, params)
}

/// One CSV row per matched demo state, for downstream visualization.
pub fn write_match_csv(result: &MatchResult, path: &Path) -> Result<(), std::io::Error> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "src_traj,src_t,tgt_traj,tgt_t,score")?;
    for r in &result.records {
        writeln!(w, "{},{},{},{},{}", r.src_traj, r.src_t, r.tgt_traj, r.tgt_t, r.score)?;
    }
    w.flush()
}

/// Fraction of proxy states whose semantic room agrees with the demo
/// state they replaced. Proxy shape must mirror the demos; states that
/// resolve to no room (walls, out of bounds) count as misses. Matching
/// oracle for the paired mazes, whose semantic room IDs correspond.
pub fn maze_room_accuracy(pair: &EnvPair, demos: &Dataset, proxy: &ProxyDemos) -> f64 {
    let (EnvSpec::Maze(src), EnvSpec::Maze(tgt)) = (&pair.source, &pair.target) else {
        panic!("room accuracy is a maze-pair oracle");
    };
    let mut hits = 0usize;
    let mut total = 0usize;
    for (dt, pt) in demos.trajectories.iter().zip(&proxy.trajectories) {
        assert_eq!(pt.states.len(), dt.len(), "proxy shape must mirror the demos");
        for (t, state) in pt.states.iter().enumerate() {
            total += 1;
            let (sx, sy) = src.deobserve(&dt.obs[t]);
            let (tx, ty) = tgt.deobserve(state);
            if let (Ok(a), Ok(b)) = (src.room_of(sx, sy), tgt.room_of(tx, ty)) {
                if a == b {
                    hits += 1;
                }
            }
        }
    }
    hits as f64 / total.max(1) as f64
}

#[derive(Serialize, Deserialize)]
struct ProxyHeader {
    format_version: u32,
    kind: String,
    domain: String,
    n_skills: usize,
    obs_dim: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct ProxyRecord {
    states: String,
    skills: Vec<usize>,
    crc32: u32,
}

pub fn save_proxy_demos(proxy: &ProxyDemos, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = ProxyHeader {
        format_version: PROXY_FORMAT_VERSION,
        kind: "proxy-demos".into(),
        domain: proxy.domain.tag().into(),
        n_skills: proxy.n_skills,
        obs_dim: proxy.obs_dim,
        count: proxy.trajectories.len(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header json"))?;
    for t in &proxy.trajectories {
        let sb = data::encode_f64s(&t.states);
        let rec = ProxyRecord {
            states: B64.encode(&sb),
            skills: t.skills.clone(),
            crc32: data::record_crc(&sb, &[], &t.skills, &[]),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record json"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_proxy_demos(path: &Path) -> Result<ProxyDemos, DataError> {
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let first = lines
        .next()
        .ok_or(DataError::Format { line: 1, msg: "empty file".into() })??;
    let header: ProxyHeader = serde_json::from_str(&first)
        .map_err(|e| DataError::Format { line: 1, msg: format!("header: {e}") })?;
    if header.format_version != PROXY_FORMAT_VERSION {
        return Err(DataError::Format {
            line: 1,
            msg: format!("format version {} unsupported", header.format_version),
        });
    }
    if header.kind != "proxy-demos" {
        return Err(DataError::Format {
            line: 1,
            msg: format!("kind {:?} is not a proxy demo file", header.kind),
        });
    }
    let domain = match header.domain.as_str() {
        "source" => Domain::Source,
        "target" => Domain::Target,
        other => {
            return Err(DataError::Format { line: 1, msg: format!("unknown domain {other:?}") })
        }
    };
    let mut trajectories = Vec::with_capacity(header.count);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ProxyRecord = serde_json::from_str(&line)
            .map_err(|e| DataError::Format { line: line_no, msg: format!("record: {e}") })?;
        let sb = B64
            .decode(&rec.states)
            .map_err(|e| DataError::Format { line: line_no, msg: format!("base64: {e}") })?;
        let computed = data::record_crc(&sb, &[], &rec.skills, &[]);
        if computed != rec.crc32 {
            return Err(DataError::Checksum { line: line_no, stored: rec.crc32, computed });
        }
        let states = data::decode_f64s(&rec.states, header.obs_dim, line_no)?;
        if states.len() != rec.skills.len() {
            return Err(DataError::Shape {
                index: i,
                msg: format!("{} states for {} labels", states.len(), rec.skills.len()),
            });
        }
        trajectories.push(ProxyTraj { states, skills: rec.skills });
    }
    if trajectories.len() != header.count {
        return Err(DataError::Format {
            line: 1,
            msg: format!("header count {} but {} records", header.count, trajectories.len()),
        });
    }
    Ok(ProxyDemos {
        domain,
        n_skills: header.n_skills,
        obs_dim: header.obs_dim,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;
    use std::sync::OnceLock;

    use rand::Rng;

    use super::*;
    use crate::data::{
        generate_demos, generate_ta, inject_uncertainty_noise, one_hot, save_dist_file,
    };
    use crate::env::maze::build_maze_pair;
    use crate::rng::stream;
    use crate::skillmodel::PriorConfig;

    fn random_dists(rng: &mut impl Rng, steps: usize, k: usize) -> Vec<Vec<f64>> {
        (0..steps)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / z).collect()
            })
            .collect()
    }

    struct Fixture {
        pair: EnvPair,
        demos: Dataset,
        ta_tgt: Dataset,
        prior_src: SemanticPrior,
        prior_tgt: SemanticPrior,
    }

    fn labeled(ds: &Dataset) -> Vec<(Vec<f64>, usize)> {
        ds.trajectories
            .iter()
            .flat_map(|t| t.obs[..t.len()].iter().cloned().zip(t.skills.iter().copied()))
            .collect()
    }

    fn fixture() -> &'static Fixture {
        static FIX: OnceLock<Fixture> = OnceLock::new();
        FIX.get_or_init(|| {
            let pair = build_maze_pair(41, 2, 4);
            let demos = generate_demos(&pair, Domain::Source, 3, 7);
            let ta_src = generate_ta(&pair, Domain::Source, 12, 9);
            let ta_tgt = generate_ta(&pair, Domain::Target, 12, 11);
            let mut cfg = PriorConfig::defaults(ta_src.obs_dim, ta_src.n_skills);
            cfg.steps = 600;
            let mut prior_src = SemanticPrior::new(cfg.clone(), 21);
            prior_src.train(&labeled(&ta_src), 22).unwrap();
            let mut prior_tgt = SemanticPrior::new(cfg, 23);
            prior_tgt.train(&labeled(&ta_tgt), 24).unwrap();
            Fixture { pair, demos, ta_tgt, prior_src, prior_tgt }
        })
    }

    #[test]
    fn zero_gammas_collapse_to_single_state() {
        let mut rng = stream(11, "collapse");
        let dists = random_dists(&mut rng, 7, 4);
        let params = AggregationParams::single_state();
        for t in 0..7 {
            assert_eq!(aggregate(&dists, t, &params), dists[t]);
        }
    }

    #[test]
    fn unit_forward_gamma_averages_evenly() {
        // Both steps enter with weight 1: phi = (p0 + p1) / 2.
        let dists = vec![vec![0.2, 0.8], vec![0.8, 0.2]];
        let params =
            AggregationParams { gamma_fwd: 1.0, gamma_back: 0.0, ..AggregationParams::defaults() };
        let phi = aggregate(&dists, 0, &params);
        assert!((phi[0] - 0.5).abs() < 1e-12 && (phi[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn aggregation_always_normalizes() {
        // 1000 random windows across both exponent modes and the full
        // gamma range, including the endpoints.
        let mut rng = stream(3, "normalize");
        for case in 0..1000 {
            let steps = rng.gen_range(1..12);
            let k = rng.gen_range(2..6);
            let dists = random_dists(&mut rng, steps, k);
            let params = AggregationParams {
                gamma_fwd: rng.gen_range(0.0..=1.0),
                gamma_back: rng.gen_range(0.0..=1.0),
                w_min: 1e-3,
                literal_exponents: case % 2 == 0,
            };
            let t = rng.gen_range(0..steps);
            let phi = aggregate(&dists, t, &params);
            let sum: f64 = phi.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "case {case}: sum {sum}");
            assert!(phi.iter().all(|v| *v >= 0.0), "case {case}: negative mass");
        }
    }

    #[test]
    fn literal_exponents_reproduce_printed_weights() {
        // Three steps, t = 1, gammas 0.5. Literal weights: 0.5^1 on p1,
        // 0.5^2 on p2, and an empty backward sum (it stops at j = t-1),
        // so phi = (0.5 p1 + 0.25 p2) / 0.75.
        let dists = vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 1.0]];
        let params = AggregationParams {
            gamma_fwd: 0.5,
            gamma_back: 0.5,
            w_min: 1e-3,
            literal_exponents: true,
        };
        let phi = aggregate(&dists, 1, &params);
        assert!((phi[0] - 0.25 / 0.75).abs() < 1e-12, "{phi:?}");
        assert!((phi[1] - 0.5 / 0.75).abs() < 1e-12, "{phi:?}");
        // The default mode anchors weight 1 at p1 and reaches back to
        // p0: phi = (p1 + 0.5 p2 + 0.5 p0) / 2, which must differ.
        let rel = aggregate(&dists, 1, &AggregationParams { literal_exponents: false, ..params });
        assert!((rel[0] - 0.5).abs() < 1e-12, "{rel:?}");
        assert!((phi[0] - rel[0]).abs() > 0.05);
    }

    #[test]
    fn symmetric_kl_matches_hand_value() {
        // (0.7 - 0.3)(ln 0.7 - ln 0.3) summed over both classes
        // = 2 * 0.4 * 0.8472979 = 0.6778383.
        let d = symmetric_kl(&[0.7, 0.3], &[0.3, 0.7]);
        assert!((d - 0.67784).abs() < 1e-4, "{d}");
        assert_eq!(symmetric_kl(&[0.7, 0.3], &[0.7, 0.3]), 0.0);
    }

    #[test]
    fn symmetric_kl_is_symmetric_and_nonnegative() {
        let mut rng = stream(5, "symkl");
        for _ in 0..200 {
            let k = rng.gen_range(2..8);
            let d = random_dists(&mut rng, 2, k);
            let a = symmetric_kl(&d[0], &d[1]);
            assert!(a >= 0.0);
            assert!((a - symmetric_kl(&d[1], &d[0])).abs() < 1e-12);
        }
    }

    fn raw_index(rows: &[Vec<Vec<f64>>]) -> TargetIndex {
        TargetIndex::build(rows, &AggregationParams::single_state()).unwrap()
    }

    #[test]
    fn matcher_picks_nearest_target_state() {
        let index = raw_index(&[vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]]);
        let (ci, score) = match_state(&[0.9, 0.1], &index);
        assert_eq!(index.index[ci], (0, 0));
        assert!(score < symmetric_kl(&[0.9, 0.1], &[0.0, 1.0]));
    }

    #[test]
    fn verbatim_phi_scores_zero_and_ties_break_low() {
        // (0, 1) and (1, 0) hold identical distributions; the scan
        // must keep the earlier flat index.
        let index = raw_index(&[vec![vec![0.8, 0.2], vec![0.3, 0.7]], vec![vec![0.3, 0.7]]]);
        let (ci, score) = match_state(&[0.3, 0.7], &index);
        assert_eq!(index.index[ci], (0, 1));
        assert_eq!(score, 0.0);
    }

    #[test]
    fn empty_target_is_rejected() {
        assert!(matches!(
            TargetIndex::build(&[], &AggregationParams::defaults()),
            Err(MatchError::EmptyTarget)
        ));
    }

    #[test]
    fn pruned_scan_equals_brute_force() {
        // Odd cases collapse the window so planted duplicate rows are
        // exact ties; even cases exercise the aggregated search.
        let mut rng = stream(17, "prune");
        for case in 0..30 {
            let params = if case % 2 == 0 {
                AggregationParams::defaults()
            } else {
                AggregationParams::single_state()
            };
            let k = rng.gen_range(2..6);
            let src: Vec<Vec<Vec<f64>>> = (0..3)
                .map(|_| {
                    let steps = rng.gen_range(1..8);
                    random_dists(&mut rng, steps, k)
                })
                .collect();
            let mut tgt: Vec<Vec<Vec<f64>>> = (0..5)
                .map(|_| {
                    let steps = rng.gen_range(1..60);
                    random_dists(&mut rng, steps, k)
                })
                .collect();
            if case % 2 == 1 {
                tgt[0][0] = src[0][0].clone();
                let last = tgt.len() - 1;
                let end = tgt[last].len() - 1;
                tgt[last][end] = src[0][0].clone();
            }
            let index = TargetIndex::build(&tgt, &params).unwrap();
            let src_agg: Vec<Vec<Vec<f64>>> =
                src.iter().map(|d| aggregate_traj(d, &params)).collect();
            let fast = match_all(&src_agg, &index, &params).unwrap();
            let again = match_all(&src_agg, &index, &params).unwrap();
            assert_eq!(fast, again, "case {case}: rerun diverged");
            let mut slow = Vec::new();
            for (ti, traj) in src_agg.iter().enumerate() {
                for (t, phi) in traj.iter().enumerate() {
                    let (ci, score) = match_state_brute(phi, &index);
                    let (tgt_traj, tgt_t) = index.index[ci];
                    slow.push(MatchRecord { src_traj: ti, src_t: t, tgt_traj, tgt_t, score });
                }
            }
            assert_eq!(fast.records, slow, "case {case}");
        }
    }

    #[test]
    fn self_match_recovers_equal_distributions() {
        let mut rng = stream(23, "selfmatch");
        let params = AggregationParams::defaults();
        let dists: Vec<Vec<Vec<f64>>> = (0..3).map(|_| random_dists(&mut rng, 8, 4)).collect();
        let index = TargetIndex::build(&dists, &params).unwrap();
        let agg: Vec<Vec<Vec<f64>>> = dists.iter().map(|d| aggregate_traj(d, &params)).collect();
        let result = match_all(&agg, &index, &params).unwrap();
        for r in &result.records {
            assert_eq!(r.score, 0.0);
            assert_eq!(agg[r.src_traj][r.src_t], agg[r.tgt_traj][r.tgt_t]);
        }
    }

    #[test]
    fn relabel_mirrors_demo_shape_and_pulls_target_states() {
        let f = fixture();
        let params = AggregationParams::defaults();
        let (result, proxy) =
            match_demos(&f.demos, DemoDists::Labels, &f.ta_tgt, &f.prior_tgt, &params).unwrap();
        assert_eq!(result.records.len(), f.demos.steps());
        for (dt, pt) in f.demos.trajectories.iter().zip(&proxy.trajectories) {
            assert_eq!(pt.states.len(), dt.len());
            assert_eq!(pt.skills, dt.skills);
        }
        let pool: HashSet<Vec<u64>> = f
            .ta_tgt
            .trajectories
            .iter()
            .flat_map(|t| t.obs[..t.len()].iter())
            .map(|o| o.iter().map(|v| v.to_bits()).collect())
            .collect();
        for pt in &proxy.trajectories {
            for s in &pt.states {
                let bits: Vec<u64> = s.iter().map(|v| v.to_bits()).collect();
                assert!(pool.contains(&bits), "proxy state not drawn from the target set");
            }
        }
        for r in &result.records {
            assert!(r.score >= 0.0);
            assert!(r.tgt_t < f.ta_tgt.trajectories[r.tgt_traj].len());
        }
    }

    #[test]
    fn prior_matched_proxies_land_in_matching_rooms() {
        let f = fixture();
        let (_, proxy) = match_demos(
            &f.demos,
            DemoDists::Prior(&f.prior_src),
            &f.ta_tgt,
            &f.prior_tgt,
            &AggregationParams::defaults(),
        )
        .unwrap();
        let acc = maze_room_accuracy(&f.pair, &f.demos, &proxy);
        assert!(acc > 0.6, "room accuracy {acc}");
    }

    #[test]
    fn external_one_hot_labels_reproduce_label_matching() {
        let f = fixture();
        let params = AggregationParams::defaults();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.dists");
        let hard: Vec<Vec<Vec<f64>>> = f
            .demos
            .trajectories
            .iter()
            .map(|t| t.skills.iter().map(|&k| one_hot(k, f.demos.n_skills)).collect())
            .collect();
        save_dist_file(&path, f.demos.n_skills, &hard).unwrap();
        let (ext, ext_proxy) =
            match_from_external(&path, &f.demos, &f.ta_tgt, &f.prior_tgt, &params).unwrap();
        let (lbl, lbl_proxy) =
            match_demos(&f.demos, DemoDists::Labels, &f.ta_tgt, &f.prior_tgt, &params).unwrap();
        assert_eq!(ext.records, lbl.records);
        assert_eq!(ext_proxy, lbl_proxy);
    }

    #[test]
    fn soft_label_noise_rarely_moves_matches_across_rooms() {
        // Softening one label window wobbles every aggregated phi a
        // little (the 0.99 decay spans whole trajectories) and the KL
        // landscape over target candidates is plateau-like, with
        // runner-up gaps around 1e-4. Exact match indices therefore
        // shuffle within a plateau, but the plateaus are rooms: the
        // matched state's semantic room must almost never change.
        let f = fixture();
        let EnvSpec::Maze(tgt) = &f.pair.target else {
            unreachable!("fixture builds a maze pair");
        };
        let params = AggregationParams::defaults();
        let (clean, _) =
            match_demos(&f.demos, DemoDists::Labels, &f.ta_tgt, &f.prior_tgt, &params).unwrap();
        let mut noised = f.demos.clone();
        inject_uncertainty_noise(&mut noised, 1, 99);
        let (noisy, _) =
            match_demos(&noised, DemoDists::Labels, &f.ta_tgt, &f.prior_tgt, &params).unwrap();
        let room = |r: &MatchRecord| {
            let obs = &f.ta_tgt.trajectories[r.tgt_traj].obs[r.tgt_t];
            let (x, y) = tgt.deobserve(obs);
            tgt.room_of(x, y).ok()
        };
        let moved = clean
            .records
            .iter()
            .zip(&noisy.records)
            .filter(|(a, b)| room(a) != room(b))
            .count();
        assert!(
            moved * 10 < clean.records.len(),
            "{moved} of {} matches changed room",
            clean.records.len()
        );
    }

    #[test]
    fn external_distributions_are_validated() {
        let f = fixture();
        let params = AggregationParams::defaults();
        let short = vec![vec![vec![0.5, 0.5]]];
        let err = match_demos(&f.demos, DemoDists::External(&short), &f.ta_tgt, &f.prior_tgt, &params)
            .unwrap_err();
        assert!(matches!(err, MatchError::Shape(_)), "{err}");
        let wide: Vec<Vec<Vec<f64>>> = f
            .demos
            .trajectories
            .iter()
            .map(|t| t.skills.iter().map(|&k| one_hot(k, f.demos.n_skills + 1)).collect())
            .collect();
        let err = match_demos(&f.demos, DemoDists::External(&wide), &f.ta_tgt, &f.prior_tgt, &params)
            .unwrap_err();
        assert!(matches!(err, MatchError::ClassMismatch { .. }), "{err}");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("wide.dists");
        save_dist_file(&path, f.demos.n_skills + 1, &wide).unwrap();
        let err = match_from_external(&path, &f.demos, &f.ta_tgt, &f.prior_tgt, &params)
            .unwrap_err();
        assert!(matches!(err, MatchError::ClassMismatch { .. }), "{err}");
    }

    #[test]
    fn room_accuracy_oracle_scores_anchor_proxies() {
        // A proxy that parks every state at the target anchor of the
        // demo state's semantic room is perfectly aligned; shifting
        // every room by one is perfectly misaligned.
        let f = fixture();
        let (EnvSpec::Maze(src), EnvSpec::Maze(tgt)) = (&f.pair.source, &f.pair.target) else {
            unreachable!("fixture builds a maze pair");
        };
        let n_rooms = src.grid * src.grid;
        let build = |shift: usize| ProxyDemos {
            domain: Domain::Target,
            n_skills: f.demos.n_skills,
            obs_dim: f.demos.obs_dim,
            trajectories: f
                .demos
                .trajectories
                .iter()
                .map(|traj| {
                    let states = (0..traj.len())
                        .map(|t| {
                            let (x, y) = src.deobserve(&traj.obs[t]);
                            let sem = src.room_of(x, y).unwrap();
                            let (ax, ay) = tgt.anchor((sem + shift) % n_rooms);
                            tgt.observe(ax, ay)
                        })
                        .collect();
                    ProxyTraj { states, skills: traj.skills.clone() }
                })
                .collect(),
        };
        assert_eq!(maze_room_accuracy(&f.pair, &f.demos, &build(0)), 1.0);
        assert_eq!(maze_room_accuracy(&f.pair, &f.demos, &build(1)), 0.0);
    }

    #[test]
    fn proxy_demos_roundtrip_and_reject_other_kinds() {
        let proxy = ProxyDemos {
            domain: Domain::Target,
            n_skills: 3,
            obs_dim: 2,
            trajectories: vec![
                ProxyTraj {
                    states: vec![vec![0.25, 0.5], vec![0.75, 0.125]],
                    skills: vec![2, 0],
                },
                ProxyTraj { states: vec![vec![1.0, 0.0]], skills: vec![1] },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("proxy.demos");
        save_proxy_demos(&proxy, &path).unwrap();
        assert_eq!(load_proxy_demos(&path).unwrap(), proxy);

        // A trajectory file is not a proxy file.
        let f = fixture();
        let other = dir.path().join("demos.traj");
        crate::data::save_dataset(&f.demos, &other).unwrap();
        assert!(load_proxy_demos(&other).is_err());

        // Flipping one payload byte must fail the checksum.
        let text = std::fs::read_to_string(&path).unwrap();
        let tampered = text.replacen("\"skills\":[2,0]", "\"skills\":[2,1]", 1);
        assert_ne!(text, tampered);
        std::fs::write(&other, tampered).unwrap();
        assert!(matches!(load_proxy_demos(&other), Err(DataError::Checksum { .. })));
    }

    #[test]
    fn match_csv_is_deterministic_text() {
        let result = MatchResult {
            params: AggregationParams::defaults(),
            records: vec![
                MatchRecord { src_traj: 0, src_t: 1, tgt_traj: 2, tgt_t: 3, score: 0.5 },
                MatchRecord { src_traj: 1, src_t: 0, tgt_traj: 0, tgt_t: 7, score: 0.0 },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("matches.csv");
        write_match_csv(&result, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "src_traj,src_t,tgt_traj,tgt_t,score\n0,1,2,3,0.5\n1,0,0,7,0\n");
    }

    #[test]
    fn target_demos_convert_to_proxies() {
        let f = fixture();
        let proxy = ProxyDemos::from_target_demos(&f.demos);
        assert_eq!(proxy.trajectories.len(), f.demos.trajectories.len());
        for (dt, pt) in f.demos.trajectories.iter().zip(&proxy.trajectories) {
            assert_eq!(pt.states.len(), dt.len());
            assert_eq!(pt.skills, dt.skills);
        }
        assert_eq!(proxy.labeled_states().len(), f.demos.steps());
        assert_eq!(proxy.all_states().len(), f.demos.steps());
        let samples = proxy.progress_samples();
        assert_eq!(samples.len(), f.demos.steps());
        let first_len = proxy.trajectories[0].states.len();
        assert_eq!(samples[0].1, 0.0);
        assert_eq!(samples[first_len - 1].1, 1.0);
    }
}

