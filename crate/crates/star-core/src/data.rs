//! Skill-labeled trajectory datasets: scripted generation, label
//! corruption for robustness studies, and checksummed JSONL files.
//!
//! Trajectories store normalized observations; raw states are
//! recoverable through `EnvSpec::deobserve`. Labels are per step, so
//! segment structure is the runs of equal labels.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::scripted::{available_skills, execute_plan, ScriptedOutcome};
use crate::env::{Domain, EnvPair, EnvSpec};
use crate::rng::stream;

pub const TRAJECTORY_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("line {line}: checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { line: usize, stored: u32, computed: u32 },
    #[error("record {index}: {msg}")]
    Shape { index: usize, msg: String },
    #[error("skill {0} absent from dataset")]
    SkillAbsent(usize),
}

/// One episode: `obs` has one more entry than `actions`; `skills[t]`
/// labels the skill executing at step `t`. `dists`, when present, holds
/// a per-step distribution over skills (soft labels); hard labels stay
/// authoritative for everything except distribution-based matching.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub skills: Vec<usize>,
    pub dists: Option<Vec<Vec<f64>>>,
    pub success: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Maximal runs of equal labels as `(start, len, skill)`.
    pub fn runs(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        let mut i = 0;
        while i < self.skills.len() {
            let k = self.skills[i];
            let mut j = i + 1;
            while j < self.skills.len() && self.skills[j] == k {
                j += 1;
            }
            out.push((i, j - i, k));
            i = j;
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub domain: Domain,
    pub n_skills: usize,
    pub obs_dim: usize,
    pub action_dim: usize,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    /// All `(trajectory, step)` indices, the flat state inventory.
    pub fn step_index(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.steps());
        for (i, t) in self.trajectories.iter().enumerate() {
            for s in 0..t.len() {
                out.push((i, s));
            }
        }
        out
    }
}

pub fn one_hot(k: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

// ── scripted generation ─────────────────────────────────────────────

fn outcome_to_trajectory(
    out: &ScriptedOutcome,
    spec: &EnvSpec,
    final_state: &[f64],
) -> Trajectory {
    let mut obs = Vec::new();
    let mut actions = Vec::new();
    let mut skills = Vec::new();
    for seg in &out.segments {
        for (s, a) in seg.states.iter().zip(&seg.actions) {
            obs.push(raw_to_obs(spec, s));
            actions.push(a.clone());
            skills.push(seg.skill);
        }
    }
    obs.push(raw_to_obs(spec, final_state));
    Trajectory { obs, actions, skills, dists: None, success: out.success }
}

fn raw_to_obs(spec: &EnvSpec, raw: &[f64]) -> Vec<f64> {
    match spec {
        EnvSpec::Maze(m) => m.observe(raw[0], raw[1]),
        EnvSpec::Workbench(w) => w.observe(raw[0], raw[1], &raw[2..]),
    }
}

/// Task demonstrations: scripted executions of the shared task plan.
/// Failed attempts are retried with fresh randomness so every returned
/// trajectory succeeds.
pub fn generate_demos(pair: &EnvPair, domain: Domain, episodes: usize, seed: u64) -> Dataset {
    assert!(episodes > 0, "empty dataset forbidden");
    let spec = pair.spec(domain);
    let plan = pair.task_skills();
    let mut trajectories = Vec::with_capacity(episodes);
    let mut rng = stream(seed, &format!("demos-{}", domain.tag()));
    let mut attempts = 0;
    while trajectories.len() < episodes {
        attempts += 1;
        assert!(
            attempts <= episodes * 10,
            "demo generation keeps failing; scripted task plan is broken"
        );
        let mut env = spec.make();
        env.reset(&mut rng);
        let out = match execute_plan(&mut env, &pair.skills, &plan, &mut rng) {
            Ok(o) => o,
            Err(_) => continue,
        };
        if !out.success {
            continue;
        }
        trajectories.push(outcome_to_trajectory(&out, spec, &env.state_raw()));
    }
    Dataset {
        domain,
        n_skills: pair.skills.count(),
        obs_dim: spec.obs_dim(),
        action_dim: spec.action_dim(),
        trajectories,
    }
}

/// Task-agnostic data: random walks over whatever skills are currently
/// available, run until the episode ends or nothing is available.
pub fn generate_ta(pair: &EnvPair, domain: Domain, episodes: usize, seed: u64) -> Dataset {
    assert!(episodes > 0, "empty dataset forbidden");
    let spec = pair.spec(domain);
    let mut trajectories = Vec::with_capacity(episodes);
    let mut rng = stream(seed, &format!("ta-{}", domain.tag()));
    for _ in 0..episodes {
        let mut env = spec.make();
        env.reset(&mut rng);
        let mut segments = Vec::new();
        while !env.done() {
            let avail = available_skills(&env, &pair.skills);
            if avail.is_empty() {
                break;
            }
            let plan = [avail[rng.gen_range(0..avail.len())]];
            match execute_plan(&mut env, &pair.skills, &plan, &mut rng) {
                Ok(mut o) => segments.append(&mut o.segments),
                Err(_) => break,
            }
        }
        let out = ScriptedOutcome { segments, success: env.success() };
        let traj = outcome_to_trajectory(&out, spec, &env.state_raw());
        if !traj.is_empty() {
            trajectories.push(traj);
        }
    }
    Dataset {
        domain,
        n_skills: pair.skills.count(),
        obs_dim: spec.obs_dim(),
        action_dim: spec.action_dim(),
        trajectories,
    }
}

// ── label corruption ────────────────────────────────────────────────

/// Half-width of the soft-label window around each transition picked by
/// the uncertainty noise.
pub const UNCERTAINTY_WINDOW: usize = 5;
/// Length range of inserted misdetected segments.
pub const MISDETECT_LEN: std::ops::RangeInclusive<usize> = 5..=20;

/// One corruption applied to a dataset's skill labels. The three kinds
/// mimic labeler imprecision about segment ends, classifier uncertainty
/// around transitions, and outright wrong detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    /// Boundaries move by a factor uniform in `[1-l_n, 1+l_n]` of the
    /// run length.
    Length { l_n: f64 },
    /// `segments` transitions get soft labels mixing in a random-walk
    /// wrong skill.
    Uncertainty { segments: usize },
    /// `segments` wrong-label spans overwrite the annotation outright.
    Misdetection { segments: usize },
}

impl NoiseSpec {
    /// The studied levels: 1 = weak, 2 = middle, 3 = strong.
    pub fn at_level(kind: &str, level: usize) -> Option<NoiseSpec> {
        match kind {
            "length" => Some(NoiseSpec::Length { l_n: 0.1 * level as f64 }),
            "uncertainty" => Some(NoiseSpec::Uncertainty { segments: level }),
            "misdetection" => Some(NoiseSpec::Misdetection { segments: level }),
            _ => None,
        }
    }

    pub fn apply(&self, ds: &mut Dataset, seed: u64) {
        match *self {
            NoiseSpec::Length { l_n } => inject_length_noise(ds, l_n, seed),
            NoiseSpec::Uncertainty { segments } => inject_uncertainty_noise(ds, segments, seed),
            NoiseSpec::Misdetection { segments } => inject_misdetection_noise(ds, segments, seed),
        }
    }
}

/// Rescales every label run by a factor uniform in `[1-l_n, 1+l_n]`,
/// moving each internal boundary while preserving total length, run
/// count, and skill order.
pub fn inject_length_noise(ds: &mut Dataset, l_n: f64, seed: u64) {
    assert!((0.0..1.0).contains(&l_n), "length factor {l_n} outside [0,1)");
    let mut rng = stream(seed, "noise-length");
    for traj in &mut ds.trajectories {
        let runs = traj.runs();
        let mut new = traj.skills.clone();
        let mut start = 0usize;
        for w in runs.windows(2) {
            let (_, len, left) = w[0];
            let (_, rlen, right) = w[1];
            let end = w[0].0 + len + rlen; // right run's original end
            let factor = rng.gen_range(1.0 - l_n..=1.0 + l_n);
            let scaled = (len as f64 * factor).round() as i64;
            // both runs must keep at least one step
            let nb = (start as i64 + scaled).clamp(start as i64 + 1, end as i64 - 1) as usize;
            new[start..nb].iter_mut().for_each(|s| *s = left);
            new[nb..end].iter_mut().for_each(|s| *s = right);
            start = nb;
        }
        traj.skills = new;
    }
}

/// Softens labels around up to `segments` transitions per trajectory:
/// inside a window of half-width `UNCERTAINTY_WINDOW`, the one-hot label
/// is mixed with a wrong skill that follows a lazy random walk. Always
/// attaches per-step distributions, one-hot outside the windows.
pub fn inject_uncertainty_noise(ds: &mut Dataset, segments: usize, seed: u64) {
    let n = ds.n_skills;
    let mut rng = stream(seed, "noise-uncertainty");
    for traj in &mut ds.trajectories {
        let mut dists: Vec<Vec<f64>> =
            traj.skills.iter().map(|&k| one_hot(k, n)).collect();
        let runs = traj.runs();
        // internal boundaries, as the index of the later run's start
        let mut bounds: Vec<usize> = runs.iter().skip(1).map(|r| r.0).collect();
        for _ in 0..segments.min(bounds.len()) {
            let b = bounds.swap_remove(rng.gen_range(0..bounds.len()));
            let lo = b.saturating_sub(UNCERTAINTY_WINDOW);
            let hi = (b + UNCERTAINTY_WINDOW).min(traj.skills.len());
            let weight = rng.gen_range(0.25..0.5);
            // walk in n-1 slots so the wrong skill never equals the label
            let mut slot = rng.gen_range(0..n - 1);
            for t in lo..hi {
                if rng.gen_range(0.0..1.0) < 0.5 {
                    slot = rng.gen_range(0..n - 1);
                }
                let k = traj.skills[t];
                let wrong = if slot >= k { slot + 1 } else { slot };
                // rebuilt from scratch so overlapping windows stay normalized
                let mut d = one_hot(k, n);
                d[k] = 1.0 - weight;
                d[wrong] = weight;
                dists[t] = d;
            }
        }
        traj.dists = Some(dists);
    }
}

/// Overwrites `segments` spans per trajectory with a uniformly sampled
/// wrong skill, mimicking confident mis-detections. Spans avoid
/// overlapping where the trajectory leaves room.
pub fn inject_misdetection_noise(ds: &mut Dataset, segments: usize, seed: u64) {
    let n = ds.n_skills;
    let mut rng = stream(seed, "noise-misdetect");
    for traj in &mut ds.trajectories {
        let steps = traj.skills.len();
        if steps == 0 {
            continue;
        }
        let mut placed: Vec<(usize, usize)> = Vec::new();
        for _ in 0..segments {
            let len = rng.gen_range(MISDETECT_LEN).min(steps);
            let mut start = rng.gen_range(0..=steps - len);
            for _ in 0..50 {
                if placed.iter().all(|&(s, l)| start + len <= s || s + l <= start) {
                    break;
                }
                start = rng.gen_range(0..=steps - len);
            }
            placed.push((start, len));
            let true_k = traj.skills[start];
            let mut wrong = rng.gen_range(0..n - 1);
            if wrong >= true_k {
                wrong += 1;
            }
            traj.skills[start..start + len].iter_mut().for_each(|s| *s = wrong);
        }
    }
}

/// Excises every step labeled `skill`: the states and actions vanish and
/// the trajectory is stitched across the hole. Demonstrations lose the
/// ability to show that part of the task.
pub fn drop_skill(ds: &Dataset, skill: usize) -> Result<Dataset, DataError> {
    if !ds.trajectories.iter().any(|t| t.skills.contains(&skill)) {
        return Err(DataError::SkillAbsent(skill));
    }
    let mut out = ds.clone();
    out.trajectories.clear();
    for traj in &ds.trajectories {
        let keep: Vec<usize> =
            (0..traj.len()).filter(|&t| traj.skills[t] != skill).collect();
        if keep.is_empty() {
            continue;
        }
        let mut obs: Vec<Vec<f64>> = keep.iter().map(|&t| traj.obs[t].clone()).collect();
        obs.push(traj.obs[traj.len()].clone());
        out.trajectories.push(Trajectory {
            obs,
            actions: keep.iter().map(|&t| traj.actions[t].clone()).collect(),
            skills: keep.iter().map(|&t| traj.skills[t]).collect(),
            dists: traj
                .dists
                .as_ref()
                .map(|d| keep.iter().map(|&t| d[t].clone()).collect()),
            success: traj.success,
        });
    }
    Ok(out)
}

// ── persistence ─────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    domain: String,
    n_skills: usize,
    obs_dim: usize,
    action_dim: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    obs: String,
    actions: String,
    skills: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dists: Option<String>,
    success: bool,
    crc32: u32,
}

pub(crate) fn encode_f64s(rows: &[Vec<f64>]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(rows.len() * rows.first().map_or(0, |r| r.len()) * 8);
    for row in rows {
        for &v in row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub(crate) fn decode_f64s(b64: &str, dim: usize, line: usize) -> Result<Vec<Vec<f64>>, DataError> {
    let bytes = B64
        .decode(b64)
        .map_err(|e| DataError::Format { line, msg: format!("base64: {e}") })?;
    if dim == 0 || bytes.len() % (8 * dim) != 0 {
        return Err(DataError::Format {
            line,
            msg: format!("payload of {} bytes is not rows of {dim} f64s", bytes.len()),
        });
    }
    let mut rows = Vec::with_capacity(bytes.len() / (8 * dim));
    for chunk in bytes.chunks_exact(8 * dim) {
        let row: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        rows.push(row);
    }
    Ok(rows)
}

pub(crate) fn record_crc(obs_bytes: &[u8], action_bytes: &[u8], skills: &[usize], dist_bytes: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(obs_bytes);
    h.update(action_bytes);
    for &s in skills {
        h.update(&(s as u64).to_le_bytes());
    }
    h.update(dist_bytes);
    h.finalize()
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = Header {
        format_version: TRAJECTORY_FORMAT_VERSION,
        kind: "trajectories".into(),
        domain: ds.domain.tag().into(),
        n_skills: ds.n_skills,
        obs_dim: ds.obs_dim,
        action_dim: ds.action_dim,
        count: ds.trajectories.len(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header json"))?;
    for t in &ds.trajectories {
        let ob = encode_f64s(&t.obs);
        let ab = encode_f64s(&t.actions);
        let db = t.dists.as_ref().map(|d| encode_f64s(d)).unwrap_or_default();
        let rec = Record {
            obs: B64.encode(&ob),
            actions: B64.encode(&ab),
            skills: t.skills.clone(),
            dists: t.dists.as_ref().map(|_| B64.encode(&db)),
            success: t.success,
            crc32: record_crc(&ob, &ab, &t.skills, &db),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record json"))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let first = lines
        .next()
        .ok_or(DataError::Format { line: 1, msg: "empty file".into() })??;
    let header: Header = serde_json::from_str(&first)
        .map_err(|e| DataError::Format { line: 1, msg: format!("header: {e}") })?;
    if header.format_version != TRAJECTORY_FORMAT_VERSION {
        return Err(DataError::Format {
            line: 1,
            msg: format!("format version {} unsupported", header.format_version),
        });
    }
    if header.kind != "trajectories" {
        return Err(DataError::Format {
            line: 1,
            msg: format!("kind {:?} is not a trajectory file", header.kind),
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
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| DataError::Format { line: line_no, msg: format!("record: {e}") })?;
        let ob = B64
            .decode(&rec.obs)
            .map_err(|e| DataError::Format { line: line_no, msg: format!("base64: {e}") })?;
        let ab = B64
            .decode(&rec.actions)
            .map_err(|e| DataError::Format { line: line_no, msg: format!("base64: {e}") })?;
        let db = match &rec.dists {
            Some(d) => B64
                .decode(d)
                .map_err(|e| DataError::Format { line: line_no, msg: format!("base64: {e}") })?,
            None => Vec::new(),
        };
        let computed = record_crc(&ob, &ab, &rec.skills, &db);
        if computed != rec.crc32 {
            return Err(DataError::Checksum { line: line_no, stored: rec.crc32, computed });
        }
        let obs = decode_f64s(&rec.obs, header.obs_dim, line_no)?;
        let actions = decode_f64s(&rec.actions, header.action_dim, line_no)?;
        let dists = match &rec.dists {
            Some(d) => Some(decode_f64s(d, header.n_skills, line_no)?),
            None => None,
        };
        let idx = trajectories.len();
        if obs.len() != actions.len() + 1 {
            return Err(DataError::Shape {
                index: idx,
                msg: format!("{} obs rows vs {} actions", obs.len(), actions.len()),
            });
        }
        if rec.skills.len() != actions.len() {
            return Err(DataError::Shape {
                index: idx,
                msg: format!("{} labels vs {} actions", rec.skills.len(), actions.len()),
            });
        }
        if let Some(&bad) = rec.skills.iter().find(|&&s| s >= header.n_skills) {
            return Err(DataError::Shape {
                index: idx,
                msg: format!("label {bad} out of range ({} skills)", header.n_skills),
            });
        }
        if let Some(d) = &dists {
            if d.len() != actions.len() {
                return Err(DataError::Shape {
                    index: idx,
                    msg: format!("{} label distributions vs {} actions", d.len(), actions.len()),
                });
            }
            validate_dist_rows(d, idx)?;
        }
        trajectories.push(Trajectory {
            obs,
            actions,
            skills: rec.skills,
            dists,
            success: rec.success,
        });
    }
    if trajectories.len() != header.count {
        return Err(DataError::Format {
            line: 1,
            msg: format!("header says {} records, found {}", header.count, trajectories.len()),
        });
    }
    Ok(Dataset {
        domain,
        n_skills: header.n_skills,
        obs_dim: header.obs_dim,
        action_dim: header.action_dim,
        trajectories,
    })
}

fn validate_dist_rows(rows: &[Vec<f64>], index: usize) -> Result<(), DataError> {
    for (t, row) in rows.iter().enumerate() {
        if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(DataError::Shape {
                index,
                msg: format!("step {t}: distribution has a negative or non-finite entry"),
            });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(DataError::Shape {
                index,
                msg: format!("step {t}: distribution sums to {sum}, not 1"),
            });
        }
    }
    Ok(())
}

// ── external skill-distribution files ───────────────────────────────
//
// Per-step skill distributions produced outside this crate (for
// instance by a video skill detector) enter through this format: a
// header line, then one JSON record per timestep.

#[derive(Serialize, Deserialize)]
struct DistHeader {
    format_version: u32,
    kind: String,
    n_skills: usize,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct DistRecord {
    traj: usize,
    t: usize,
    probs: Vec<f64>,
}

pub fn save_dist_file(
    path: &Path,
    n_skills: usize,
    dists: &[Vec<Vec<f64>>],
) -> Result<(), DataError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = DistHeader {
        format_version: TRAJECTORY_FORMAT_VERSION,
        kind: "skill-dists".into(),
        n_skills,
        count: dists.iter().map(|t| t.len()).sum(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header json"))?;
    for (traj, steps) in dists.iter().enumerate() {
        for (t, probs) in steps.iter().enumerate() {
            let rec = DistRecord { traj, t, probs: probs.clone() };
            writeln!(w, "{}", serde_json::to_string(&rec).expect("record json"))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads per-trajectory, per-step skill distributions. Records must
/// cover each trajectory's steps contiguously from zero, in order.
pub fn load_dist_file(path: &Path) -> Result<(usize, Vec<Vec<Vec<f64>>>), DataError> {
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let first = lines
        .next()
        .ok_or(DataError::Format { line: 1, msg: "empty file".into() })??;
    let header: DistHeader = serde_json::from_str(&first)
        .map_err(|e| DataError::Format { line: 1, msg: format!("header: {e}") })?;
    if header.format_version != TRAJECTORY_FORMAT_VERSION {
        return Err(DataError::Format {
            line: 1,
            msg: format!("format version {} unsupported", header.format_version),
        });
    }
    if header.kind != "skill-dists" {
        return Err(DataError::Format {
            line: 1,
            msg: format!("kind {:?} is not a skill-distribution file", header.kind),
        });
    }
    let mut out: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut total = 0usize;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DistRecord = serde_json::from_str(&line)
            .map_err(|e| DataError::Format { line: line_no, msg: format!("record: {e}") })?;
        if rec.probs.len() != header.n_skills {
            return Err(DataError::Format {
                line: line_no,
                msg: format!("{} probabilities, expected {}", rec.probs.len(), header.n_skills),
            });
        }
        if rec.traj == out.len() && rec.t == 0 {
            out.push(Vec::new());
        }
        let ok = rec.traj + 1 == out.len() && rec.t == out[rec.traj].len();
        if !ok {
            return Err(DataError::Format {
                line: line_no,
                msg: format!("record out of order: traj {} t {}", rec.traj, rec.t),
            });
        }
        out[rec.traj].push(rec.probs);
        total += 1;
    }
    if total != header.count {
        return Err(DataError::Format {
            line: 1,
            msg: format!("header says {} records, found {total}", header.count),
        });
    }
    for (i, t) in out.iter().enumerate() {
        validate_dist_rows(t, i)?;
    }
    Ok((header.n_skills, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::maze::build_maze_pair;
    use crate::env::workbench::build_workbench_pair;

    fn small_maze_demos() -> (EnvPair, Dataset) {
        let pair = build_maze_pair(0, 3, 5);
        let ds = generate_demos(&pair, Domain::Source, 3, 7);
        (pair, ds)
    }

    #[test]
    fn demos_succeed_and_follow_plan() {
        let (pair, ds) = small_maze_demos();
        let plan = pair.task_skills();
        assert_eq!(ds.trajectories.len(), 3);
        for t in &ds.trajectories {
            assert!(t.success);
            assert_eq!(t.obs.len(), t.actions.len() + 1);
            assert_eq!(t.skills.len(), t.actions.len());
            let order: Vec<usize> = t.runs().iter().map(|r| r.2).collect();
            assert_eq!(order, plan, "labels must follow the task plan in order");
        }
    }

    #[test]
    fn ta_uses_many_skills_both_domains() {
        let pair = build_maze_pair(1, 3, 5);
        for domain in [Domain::Source, Domain::Target] {
            let ds = generate_ta(&pair, domain, 5, 11);
            assert_eq!(ds.trajectories.len(), 5);
            let mut used: Vec<usize> =
                ds.trajectories.iter().flat_map(|t| t.skills.clone()).collect();
            used.sort_unstable();
            used.dedup();
            assert!(used.len() >= 6, "random walks should touch many skills: {used:?}");
            assert!(*used.iter().max().unwrap() < ds.n_skills);
        }
    }

    #[test]
    fn bench_ta_only_articulates_incomplete() {
        let pair = build_workbench_pair(2, 7, 4);
        let ds = generate_ta(&pair, Domain::Target, 4, 3);
        for t in &ds.trajectories {
            // a skill never restarts after its segment completes
            let order: Vec<usize> = t.runs().iter().map(|r| r.2).collect();
            let mut seen = std::collections::HashSet::new();
            for (i, &k) in order.iter().enumerate() {
                // the final segment may be cut by episode end and retried
                if i + 1 < order.len() {
                    assert!(seen.insert(k), "object {k} articulated twice in {order:?}");
                }
            }
        }
    }

    #[test]
    fn obs_normalized() {
        let (_, ds) = small_maze_demos();
        for t in &ds.trajectories {
            for o in &t.obs {
                assert_eq!(o.len(), 2);
                assert!(o.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let (_, ds) = small_maze_demos();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.jsonl");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back.domain, ds.domain);
        assert_eq!(back.n_skills, ds.n_skills);
        assert_eq!(back.trajectories.len(), ds.trajectories.len());
        for (a, b) in ds.trajectories.iter().zip(&back.trajectories) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn corruption_detected() {
        let (_, ds) = small_maze_demos();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.jsonl");
        save_dataset(&ds, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        // flip one payload character in the second line
        let pos = text.find('\n').unwrap() + 40;
        let original = text.as_bytes()[pos] as char;
        let flipped = if original == 'A' { 'B' } else { 'A' };
        text.replace_range(pos..pos + 1, &flipped.to_string());
        std::fs::write(&path, text).unwrap();
        match load_dataset(&path) {
            Err(DataError::Checksum { line, .. }) => assert_eq!(line, 2),
            Err(DataError::Format { .. }) => {} // flip broke the json/base64 instead
            other => panic!("corruption not caught: {other:?}"),
        }
    }

    #[test]
    fn wrong_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"format_version\":99,\"kind\":\"trajectories\",\"domain\":\"source\",\
             \"n_skills\":3,\"obs_dim\":2,\"action_dim\":2,\"count\":0}\n",
        )
        .unwrap();
        assert!(matches!(load_dataset(&path), Err(DataError::Format { line: 1, .. })));
    }

    #[test]
    fn truncated_file_rejected() {
        let (_, ds) = small_maze_demos();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demos.jsonl");
        save_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let cut: Vec<&str> = text.lines().take(2).collect();
        std::fs::write(&path, cut.join("\n")).unwrap();
        assert!(matches!(load_dataset(&path), Err(DataError::Format { line: 1, .. })));
    }

    #[test]
    fn length_noise_zero_is_noop() {
        let (_, mut ds) = small_maze_demos();
        let before = ds.trajectories.clone();
        inject_length_noise(&mut ds, 0.0, 9);
        assert_eq!(ds.trajectories, before);
    }

    #[test]
    fn length_noise_scales_runs_and_keeps_order() {
        let (_, mut ds) = small_maze_demos();
        let before: Vec<Vec<(usize, usize, usize)>> =
            ds.trajectories.iter().map(|t| t.runs()).collect();
        inject_length_noise(&mut ds, 0.1, 9);
        for (t, old_runs) in ds.trajectories.iter().zip(&before) {
            assert_eq!(t.skills.len(), old_runs.iter().map(|r| r.1).sum::<usize>());
            let new_runs = t.runs();
            assert_eq!(new_runs.len(), old_runs.len(), "runs must survive 10% noise");
            for (n, o) in new_runs.iter().zip(old_runs) {
                assert_eq!(n.2, o.2, "labels keep their order");
                // each boundary moves at most 10% of its run's length
                // (rounded), plus the drift its left neighbor handed it
                let nb = (n.0 + n.1) as f64;
                let ob = (o.0 + o.1) as f64;
                let slack: f64 = old_runs.iter().map(|r| (0.1 * r.1 as f64).round()).sum();
                assert!((nb - ob).abs() <= slack);
            }
        }
    }

    #[test]
    fn length_noise_single_boundary_within_ten_percent() {
        // two runs of 30 and 20: the single boundary may move by at
        // most round(30 * 0.1) = 3
        let traj = Trajectory {
            obs: vec![vec![0.0, 0.0]; 51],
            actions: vec![vec![0.0, 0.0]; 50],
            skills: [vec![0usize; 30], vec![1usize; 20]].concat(),
            dists: None,
            success: true,
        };
        let ds = Dataset {
            domain: Domain::Source,
            n_skills: 2,
            obs_dim: 2,
            action_dim: 2,
            trajectories: vec![traj],
        };
        for seed in 0..20 {
            let mut noisy = ds.clone();
            inject_length_noise(&mut noisy, 0.1, seed);
            let runs = noisy.trajectories[0].runs();
            assert_eq!(runs.len(), 2);
            let b = runs[0].1 as i64;
            assert!((b - 30).abs() <= 3, "boundary at {b}");
        }
    }

    #[test]
    fn uncertainty_noise_zero_segments_is_all_one_hot() {
        let (_, mut ds) = small_maze_demos();
        inject_uncertainty_noise(&mut ds, 0, 11);
        for t in &ds.trajectories {
            let d = t.dists.as_ref().expect("dists attached");
            assert_eq!(d.len(), t.len());
            for (step, row) in d.iter().enumerate() {
                assert_eq!(row, &one_hot(t.skills[step], ds.n_skills));
            }
        }
    }

    #[test]
    fn uncertainty_noise_softens_one_window() {
        let (_, mut ds) = small_maze_demos();
        let hard = ds.trajectories.clone();
        inject_uncertainty_noise(&mut ds, 1, 12);
        for (t, old) in ds.trajectories.iter().zip(&hard) {
            assert_eq!(t.skills, old.skills, "hard labels stay untouched");
            let d = t.dists.as_ref().unwrap();
            let soft: Vec<usize> = (0..t.len())
                .filter(|&i| d[i] != one_hot(t.skills[i], ds.n_skills))
                .collect();
            assert!(!soft.is_empty(), "one window must be perturbed");
            // all perturbed steps sit inside one 2*half-width window
            let span = soft.last().unwrap() - soft.first().unwrap();
            assert!(span < 2 * UNCERTAINTY_WINDOW, "span {span} too wide: {soft:?}");
            for &i in &soft {
                let sum: f64 = d[i].iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!((0.5..=0.75).contains(&d[i][t.skills[i]]));
            }
        }
    }

    #[test]
    fn misdetection_inserts_exact_segments_on_uniform_labels() {
        // a single 200-step run: inserted segments cannot blend into
        // existing boundaries, so the changed-span count is exact
        let traj = Trajectory {
            obs: vec![vec![0.0, 0.0]; 201],
            actions: vec![vec![0.0, 0.0]; 200],
            skills: vec![0usize; 200],
            dists: None,
            success: true,
        };
        let mut ds = Dataset {
            domain: Domain::Source,
            n_skills: 4,
            obs_dim: 2,
            action_dim: 2,
            trajectories: vec![traj],
        };
        inject_misdetection_noise(&mut ds, 3, 13);
        let t = &ds.trajectories[0];
        let mut spans: Vec<(usize, usize)> = Vec::new();
        let mut i = 0;
        while i < 200 {
            if t.skills[i] != 0 {
                let s = i;
                while i < 200 && t.skills[i] != 0 {
                    i += 1;
                }
                spans.push((s, i - s));
            } else {
                i += 1;
            }
        }
        assert_eq!(spans.len(), 3, "spans: {spans:?}");
        for &(_, len) in &spans {
            assert!(MISDETECT_LEN.contains(&len), "segment length {len}");
        }
    }

    #[test]
    fn misdetection_changes_demo_labels_but_not_actions() {
        let (_, mut ds) = small_maze_demos();
        let before = ds.trajectories.clone();
        inject_misdetection_noise(&mut ds, 3, 13);
        for (t, old) in ds.trajectories.iter().zip(&before) {
            let changed = (0..t.len()).filter(|&i| t.skills[i] != old.skills[i]).count();
            assert!(changed >= 1, "3 segments must change something");
            assert!(changed <= 60, "changed {changed} steps, more than 3 segments' worth");
            assert_eq!(t.obs, old.obs);
            assert_eq!(t.actions, old.actions);
        }
    }

    #[test]
    fn misdetection_zero_segments_is_noop() {
        let (_, mut ds) = small_maze_demos();
        let before = ds.trajectories.clone();
        inject_misdetection_noise(&mut ds, 0, 13);
        assert_eq!(ds.trajectories, before);
    }

    #[test]
    fn drop_skill_excises_every_labeled_step() {
        let (pair, ds) = small_maze_demos();
        let plan = pair.task_skills();
        let victim = plan[1];
        let dropped = drop_skill(&ds, victim).unwrap();
        for (t, old) in dropped.trajectories.iter().zip(&ds.trajectories) {
            assert!(!t.skills.contains(&victim));
            assert_eq!(t.obs.len(), t.actions.len() + 1);
            let removed = old.skills.iter().filter(|&&k| k == victim).count();
            assert_eq!(t.len(), old.len() - removed);
            // the remaining order is the plan minus the victim
            let order: Vec<usize> = t.runs().iter().map(|r| r.2).collect();
            let expect: Vec<usize> = plan.iter().copied().filter(|&k| k != victim).collect();
            assert_eq!(order, expect);
        }
    }

    #[test]
    fn drop_skill_requires_presence() {
        let (_, ds) = small_maze_demos();
        let absent = (0..ds.n_skills)
            .find(|k| ds.trajectories.iter().all(|t| !t.skills.contains(k)))
            .expect("demos never use every skill");
        assert!(matches!(drop_skill(&ds, absent), Err(DataError::SkillAbsent(_))));
    }

    #[test]
    fn noise_spec_levels_match_the_study() {
        assert_eq!(NoiseSpec::at_level("length", 2), Some(NoiseSpec::Length { l_n: 0.2 }));
        assert_eq!(
            NoiseSpec::at_level("misdetection", 3),
            Some(NoiseSpec::Misdetection { segments: 3 })
        );
        assert_eq!(NoiseSpec::at_level("bogus", 1), None);
    }

    #[test]
    fn dist_file_roundtrips_and_validates_order() {
        let dists = vec![
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![vec![0.5, 0.5]],
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dists.jsonl");
        save_dist_file(&path, 2, &dists).unwrap();
        let (k, back) = load_dist_file(&path).unwrap();
        assert_eq!(k, 2);
        assert_eq!(back, dists);

        // swapping two records breaks the contiguity contract
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.swap(1, 2);
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(load_dist_file(&path), Err(DataError::Format { .. })));
    }

    #[test]
    fn soft_labels_survive_dataset_roundtrip() {
        let (_, mut ds) = small_maze_demos();
        inject_uncertainty_noise(&mut ds, 2, 21);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("soft.jsonl");
        save_dataset(&ds, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        for (a, b) in ds.trajectories.iter().zip(&back.trajectories) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn step_index_covers_every_step() {
        let (_, ds) = small_maze_demos();
        let idx = ds.step_index();
        assert_eq!(idx.len(), ds.steps());
        assert_eq!(idx[0], (0, 0));
        let last = *idx.last().unwrap();
        assert_eq!(last.0, ds.trajectories.len() - 1);
        assert_eq!(last.1, ds.trajectories.last().unwrap().len() - 1);
    }
}
