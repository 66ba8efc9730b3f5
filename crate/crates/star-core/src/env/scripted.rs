//! Scripted skill executors that generate demonstration and
//! task-agnostic data.
//!
//! Each executor drives the environment until its skill's termination
//! condition holds, recording raw states and actions. Per-execution
//! style (speed, effort), shuffled path tie-breaking, and waypoint
//! jitter keep the data multimodal: the same skill from the same state
//! yields visibly different action sequences.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::maze::MazeSpec;
use super::{EnvError, SimEnv, SkillKind, SkillTable};

/// Sampled per skill execution.
#[derive(Debug, Clone, Copy)]
pub struct ScriptedStyle {
    /// Fraction of the maximum speed used while walking.
    pub speed: f64,
    /// Articulation effort (workbench only).
    pub effort: f64,
}

impl ScriptedStyle {
    pub fn sample(env: &SimEnv, rng: &mut ChaCha8Rng) -> Self {
        let speed = match env {
            SimEnv::Maze(_) => rng.gen_range(0.75..1.0),
            SimEnv::Workbench(_) => rng.gen_range(0.5..1.0),
        };
        ScriptedStyle { speed, effort: rng.gen_range(0.6..1.0) }
    }
}

/// One executed skill: raw state before each action, the actions, and
/// whether the skill's own termination condition was met (false when
/// the episode ended first).
#[derive(Debug, Clone)]
pub struct SkillSegment {
    pub skill: usize,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub complete: bool,
}

impl SkillSegment {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// A full scripted rollout of a skill plan.
#[derive(Debug, Clone)]
pub struct ScriptedOutcome {
    pub segments: Vec<SkillSegment>,
    pub success: bool,
}

/// Skills whose preconditions hold in the current state: traversals out
/// of the current room plus its reach skill (maze), or any incomplete
/// object (workbench).
pub fn available_skills(env: &SimEnv, skills: &SkillTable) -> Vec<usize> {
    match env {
        SimEnv::Maze(e) => {
            let room = e.room();
            let mut out: Vec<usize> = skills
                .traversals
                .iter()
                .enumerate()
                .filter(|(_, &(a, _))| a == room)
                .map(|(i, _)| i)
                .collect();
            out.push(skills.goal_id(room));
            out
        }
        SimEnv::Workbench(e) => {
            (0..e.artic.len()).filter(|&m| e.artic[m] < 1.0).collect()
        }
    }
}

/// Whether the named skill's completion condition holds in the current
/// state, judged the same way the scripted executor judges its own
/// progress: room membership for traversals, anchor proximity for
/// reaches, full articulation for workbench objects. Task success
/// counts as completing whatever skill was underway.
pub fn skill_complete(env: &SimEnv, skills: &SkillTable, skill: usize) -> bool {
    if skill >= skills.count() {
        return false;
    }
    match env {
        SimEnv::Maze(e) => {
            if e.success {
                return true;
            }
            match skills.describe(skill) {
                SkillKind::Traverse(_, b) => e.room() == b,
                SkillKind::Reach(r) => {
                    let (ax, ay) = e.spec.anchor(r);
                    e.room() == r && (e.x - ax).hypot(e.y - ay) <= REACH_RADIUS
                }
            }
        }
        SimEnv::Workbench(e) => e.artic.get(skill).map_or(false, |&a| a >= 1.0),
    }
}

pub fn execute_skill(
    env: &mut SimEnv,
    skills: &SkillTable,
    skill: usize,
    style: &ScriptedStyle,
    rng: &mut ChaCha8Rng,
) -> Result<SkillSegment, EnvError> {
    if skill >= skills.count() {
        return Err(EnvError::UnknownSkill(skill, skills.count()));
    }
    match env {
        SimEnv::Maze(e) => maze_skill(e, skills, skill, style, rng),
        SimEnv::Workbench(e) => bench_skill(e, skill, style, rng),
    }
}

/// Executes skills in order with a fresh style each, stopping early if
/// the episode ends. Precondition failures abort the plan.
pub fn execute_plan(
    env: &mut SimEnv,
    skills: &SkillTable,
    plan: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<ScriptedOutcome, EnvError> {
    let mut segments = Vec::new();
    for &skill in plan {
        if env.done() {
            break;
        }
        let style = ScriptedStyle::sample(env, rng);
        let seg = execute_skill(env, skills, skill, &style, rng)?;
        if !seg.is_empty() {
            segments.push(seg);
        }
        if env.done() {
            break;
        }
    }
    Ok(ScriptedOutcome { segments, success: env.success() })
}

// ── maze ────────────────────────────────────────────────────────────

const MAZE_SKILL_CAP: usize = 300;
const WAYPOINT_RADIUS: f64 = 0.15;
const REACH_RADIUS: f64 = 0.3;

/// Shortest cell path by BFS over `allowed` cells, neighbor order
/// shuffled per call so equal-length routes are picked at random.
fn cell_path(
    spec: &MazeSpec,
    allowed: impl Fn(usize, usize) -> bool,
    from: (usize, usize),
    to: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Option<Vec<(usize, usize)>> {
    let side = spec.side;
    let mut dirs: [(i64, i64); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    dirs.shuffle(rng);
    let idx = |c: (usize, usize)| c.1 * side + c.0;
    let mut prev = vec![usize::MAX; side * side];
    let mut queue = std::collections::VecDeque::new();
    prev[idx(from)] = idx(from);
    queue.push_back(from);
    while let Some(at) = queue.pop_front() {
        if at == to {
            let mut path = vec![to];
            let mut i = idx(to);
            while i != idx(from) {
                i = prev[i];
                path.push((i % side, i / side));
            }
            path.reverse();
            return Some(path);
        }
        for (dx, dy) in dirs {
            let (nx, ny) = (at.0 as i64 + dx, at.1 as i64 + dy);
            if nx < 0 || ny < 0 || nx as usize >= side || ny as usize >= side {
                continue;
            }
            let n = (nx as usize, ny as usize);
            if spec.cell_blocked(nx, ny) || !allowed(n.0, n.1) || prev[idx(n)] != usize::MAX {
                continue;
            }
            prev[idx(n)] = idx(at);
            queue.push_back(n);
        }
    }
    None
}

fn cell_of(x: f64, y: f64) -> (usize, usize) {
    (x.floor() as usize, y.floor() as usize)
}

/// The carved door cell between two semantically adjacent rooms.
fn door_between(spec: &MazeSpec, a: usize, b: usize) -> Option<(usize, usize)> {
    let p = spec.room_size + 1;
    for cy in 0..spec.side {
        for cx in 0..spec.side {
            let on_line = cx % p == 0 || cy % p == 0;
            if !on_line || spec.walls[cy * spec.side + cx] {
                continue;
            }
            let mut sems = Vec::new();
            for (nx, ny) in [
                (cx as i64 - 1, cy as i64),
                (cx as i64 + 1, cy as i64),
                (cx as i64, cy as i64 - 1),
                (cx as i64, cy as i64 + 1),
            ] {
                if nx >= 0 && ny >= 0 && (nx as usize) < spec.side && (ny as usize) < spec.side {
                    let (ux, uy) = (nx as usize, ny as usize);
                    if ux % p != 0 && uy % p != 0 && !spec.walls[uy * spec.side + ux] {
                        if let Ok(s) = spec.room_of(ux as f64 + 0.5, uy as f64 + 0.5) {
                            sems.push(((ux, uy), s));
                        }
                    }
                }
            }
            let has = |r: usize| sems.iter().any(|&(_, s)| s == r);
            if has(a) && has(b) {
                return Some((cx, cy));
            }
        }
    }
    None
}

/// Interior cell of room `b` adjacent to the door.
fn entry_cell(spec: &MazeSpec, door: (usize, usize), b: usize) -> Option<(usize, usize)> {
    let p = spec.room_size + 1;
    for (nx, ny) in [
        (door.0 as i64 - 1, door.1 as i64),
        (door.0 as i64 + 1, door.1 as i64),
        (door.0 as i64, door.1 as i64 - 1),
        (door.0 as i64, door.1 as i64 + 1),
    ] {
        if nx >= 0 && ny >= 0 && (nx as usize) < spec.side && (ny as usize) < spec.side {
            let (ux, uy) = (nx as usize, ny as usize);
            if ux % p != 0
                && uy % p != 0
                && !spec.walls[uy * spec.side + ux]
                && spec.room_of(ux as f64 + 0.5, uy as f64 + 0.5) == Ok(b)
            {
                return Some((ux, uy));
            }
        }
    }
    None
}

fn maze_waypoints(
    cells: &[(usize, usize)],
    final_point: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Vec<(f64, f64)> {
    let mut pts = Vec::with_capacity(cells.len());
    // skip the start cell; jitter keeps every point inside its cell
    for &(cx, cy) in cells.iter().skip(1) {
        let jx = rng.gen_range(-0.25..0.25);
        let jy = rng.gen_range(-0.25..0.25);
        pts.push((cx as f64 + 0.5 + jx, cy as f64 + 0.5 + jy));
    }
    if pts.is_empty() {
        pts.push(final_point);
    } else {
        *pts.last_mut().unwrap() = final_point;
    }
    pts
}

fn maze_skill(
    env: &mut super::MazeEnv,
    skills: &SkillTable,
    skill: usize,
    style: &ScriptedStyle,
    rng: &mut ChaCha8Rng,
) -> Result<SkillSegment, EnvError> {
    let room = env.room();
    let spec = env.spec.clone();
    let (target_rooms, final_point, goal_room): (Vec<usize>, (f64, f64), Option<usize>) =
        match skills.describe(skill) {
            SkillKind::Traverse(a, b) => {
                if room != a {
                    return Err(EnvError::Precondition {
                        skill,
                        reason: format!("requires room {a}, agent in {room}"),
                    });
                }
                let door = door_between(&spec, a, b).ok_or(EnvError::Precondition {
                    skill,
                    reason: format!("no door between rooms {a} and {b}"),
                })?;
                let entry = entry_cell(&spec, door, b).ok_or(EnvError::Precondition {
                    skill,
                    reason: format!("room {b} entry blocked"),
                })?;
                (vec![a, b], (entry.0 as f64 + 0.5, entry.1 as f64 + 0.5), Some(b))
            }
            SkillKind::Reach(r) => {
                if room != r {
                    return Err(EnvError::Precondition {
                        skill,
                        reason: format!("requires room {r}, agent in {room}"),
                    });
                }
                (vec![r], spec.anchor(r), None)
            }
        };

    let start_cell = cell_of(env.x, env.y);
    let in_rooms = |cx: usize, cy: usize| {
        (cx, cy) == start_cell
            || spec
                .room_of(cx as f64 + 0.5, cy as f64 + 0.5)
                .map_or(false, |s| target_rooms.contains(&s))
    };
    let target_cell = cell_of(final_point.0, final_point.1);
    let cells = cell_path(&spec, in_rooms, start_cell, target_cell, rng)
        // an internally split room forces a detour through a neighbor
        .or_else(|| cell_path(&spec, |_, _| true, start_cell, target_cell, rng))
        .ok_or(EnvError::Precondition { skill, reason: "unreachable target".into() })?;
    let waypoints = maze_waypoints(&cells, final_point, rng);

    let mut seg = SkillSegment { skill, states: Vec::new(), actions: Vec::new(), complete: false };
    let mut wp = 0;
    while !env.done {
        if seg.len() >= MAZE_SKILL_CAP {
            return Err(EnvError::SkillTimeout(skill, MAZE_SKILL_CAP));
        }
        let (tx, ty) = waypoints[wp];
        let vmax = spec.vmax * style.speed;
        let ax = ((tx - env.x) / spec.dt).clamp(-vmax, vmax);
        let ay = ((ty - env.y) / spec.dt).clamp(-vmax, vmax);
        seg.states.push(env.state_raw());
        seg.actions.push(vec![ax, ay]);
        env.step(&[ax, ay])?;
        // task success subsumes any skill's own termination check
        if env.success {
            seg.complete = true;
            break;
        }
        // termination: room entered, or anchor reached
        match goal_room {
            Some(b) => {
                if env.room() == b {
                    seg.complete = true;
                    break;
                }
            }
            None => {
                let d = ((env.x - final_point.0).powi(2) + (env.y - final_point.1).powi(2)).sqrt();
                if d <= REACH_RADIUS {
                    seg.complete = true;
                    break;
                }
            }
        }
        let dw = ((env.x - tx).powi(2) + (env.y - ty).powi(2)).sqrt();
        if dw <= WAYPOINT_RADIUS && wp + 1 < waypoints.len() {
            wp += 1;
        }
    }
    Ok(seg)
}

// ── workbench ───────────────────────────────────────────────────────

const BENCH_SKILL_CAP: usize = 250;
const APPROACH_FRAC: f64 = 0.7;

fn bench_skill(
    env: &mut super::WorkbenchEnv,
    skill: usize,
    style: &ScriptedStyle,
    rng: &mut ChaCha8Rng,
) -> Result<SkillSegment, EnvError> {
    let spec = env.spec.clone();
    let m = skill;
    if env.artic[m] >= 1.0 {
        return Err(EnvError::Precondition { skill, reason: format!("object {m} already complete") });
    }
    let (ox, oy) = spec.objects[m];
    let mut waypoints: Vec<(f64, f64)> = Vec::new();
    if !spec.same_side(env.x, ox) {
        // route through a random gap; both exist, so crossings are
        // genuinely two-moded
        let top = rng.gen_bool(0.5);
        let gap_y = if top {
            (spec.divider_y1 + spec.size) / 2.0
        } else {
            spec.divider_y0 / 2.0
        };
        waypoints.push((spec.divider_x, gap_y + rng.gen_range(-0.2..0.2)));
    }
    waypoints.push((ox, oy));

    let mut seg = SkillSegment { skill, states: Vec::new(), actions: Vec::new(), complete: false };
    let mut wp = 0;
    let reach = spec.interact_radius * APPROACH_FRAC;
    while !env.done {
        if seg.len() >= BENCH_SKILL_CAP {
            return Err(EnvError::SkillTimeout(skill, BENCH_SKILL_CAP));
        }
        let d_obj = ((env.x - ox).powi(2) + (env.y - oy).powi(2)).sqrt();
        let action = if d_obj <= reach {
            [0.0, 0.0, style.effort]
        } else {
            let (tx, ty) = waypoints[wp];
            let cap = spec.max_step * style.speed;
            [(tx - env.x).clamp(-cap, cap), (ty - env.y).clamp(-cap, cap), 0.0]
        };
        seg.states.push(env.state_raw());
        seg.actions.push(action.to_vec());
        env.step(&action)?;
        if env.artic[m] >= 1.0 {
            seg.complete = true;
            break;
        }
        let (tx, ty) = waypoints[wp];
        let dw = ((env.x - tx).powi(2) + (env.y - ty).powi(2)).sqrt();
        if dw <= REACH_RADIUS && wp + 1 < waypoints.len() {
            wp += 1;
        }
    }
    Ok(seg)
}
