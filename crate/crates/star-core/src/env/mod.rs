//! Paired simulation domains with a shared semantic skill vocabulary.
//!
//! A pair consists of a source and a target instance that are
//! semantically equivalent (same rooms/objects, same skill IDs, same
//! task) but physically different, so raw actions recorded in one do
//! not work in the other while skill-level plans do.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod maze;
pub mod scripted;
pub mod workbench;

pub use maze::{MazeEnv, MazeSpec, RoomGraph};
pub use scripted::{ScriptedOutcome, SkillSegment};
pub use workbench::{WorkbenchEnv, WorkbenchSpec};

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("position ({0}, {1}) is outside the arena")]
    OutOfBounds(f64, f64),
    #[error("position ({0}, {1}) lies inside a wall")]
    InWall(f64, f64),
    #[error("skill {skill} precondition failed: {reason}")]
    Precondition { skill: usize, reason: String },
    #[error("skill {0} did not terminate within {1} steps")]
    SkillTimeout(usize, usize),
    #[error("unknown skill id {0} (have {1})")]
    UnknownSkill(usize, usize),
    #[error("action has {got} dims, env expects {want}")]
    ActionDim { got: usize, want: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn tag(&self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// One environment transition as seen by the agent.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// Semantic room of the new state (mazes only).
    pub room: Option<usize>,
    /// Ordered subtasks completed so far this episode.
    pub subtasks: usize,
    pub success: bool,
}

/// Shared skill vocabulary of an environment pair: one skill per
/// directed room edge plus one goal-reach skill per room (mazes), or
/// one skill per object (workbench, no traversals).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillTable {
    pub traversals: Vec<(usize, usize)>,
    pub rooms: usize,
}

impl SkillTable {
    pub fn from_graph(graph: &RoomGraph) -> Self {
        let mut traversals = Vec::new();
        for &(a, b) in &graph.edges {
            traversals.push((a, b));
            traversals.push((b, a));
        }
        traversals.sort_unstable();
        SkillTable { traversals, rooms: graph.rooms }
    }

    pub fn objects_only(n: usize) -> Self {
        SkillTable { traversals: Vec::new(), rooms: n }
    }

    pub fn count(&self) -> usize {
        self.traversals.len() + self.rooms
    }

    pub fn traversal_id(&self, from: usize, to: usize) -> Option<usize> {
        self.traversals.binary_search(&(from, to)).ok()
    }

    pub fn goal_id(&self, room: usize) -> usize {
        debug_assert!(room < self.rooms);
        self.traversals.len() + room
    }

    pub fn describe(&self, id: usize) -> SkillKind {
        if id < self.traversals.len() {
            let (a, b) = self.traversals[id];
            SkillKind::Traverse(a, b)
        } else {
            SkillKind::Reach(id - self.traversals.len())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkillKind {
    /// Move from room `.0` into room `.1`.
    Traverse(usize, usize),
    /// Reach a goal inside room `.0`, or articulate object `.0`.
    Reach(usize),
}

// ── unified environment handle ──────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EnvSpec {
    Maze(MazeSpec),
    Workbench(WorkbenchSpec),
}

impl EnvSpec {
    pub fn obs_dim(&self) -> usize {
        match self {
            EnvSpec::Maze(_) => 2,
            EnvSpec::Workbench(w) => 2 + w.objects.len(),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            EnvSpec::Maze(_) => 2,
            EnvSpec::Workbench(_) => 3,
        }
    }

    pub fn episode_len(&self) -> usize {
        match self {
            EnvSpec::Maze(m) => m.episode_len,
            EnvSpec::Workbench(w) => w.episode_len,
        }
    }

    /// Inverts `observe`: raw state from a normalized observation.
    pub fn deobserve(&self, obs: &[f64]) -> Vec<f64> {
        match self {
            EnvSpec::Maze(m) => {
                let (x, y) = m.deobserve(obs);
                vec![x, y]
            }
            EnvSpec::Workbench(w) => {
                let mut s = vec![obs[0] * w.size, obs[1] * w.size];
                s.extend_from_slice(&obs[2..]);
                s
            }
        }
    }

    pub fn task_len(&self) -> usize {
        match self {
            EnvSpec::Maze(m) => m.task_rooms.len(),
            EnvSpec::Workbench(w) => w.task.len(),
        }
    }

    pub fn make(&self) -> SimEnv {
        match self {
            EnvSpec::Maze(m) => SimEnv::Maze(MazeEnv::new(m.clone())),
            EnvSpec::Workbench(w) => SimEnv::Workbench(WorkbenchEnv::new(w.clone())),
        }
    }
}

#[derive(Debug, Clone)]
pub enum SimEnv {
    Maze(MazeEnv),
    Workbench(WorkbenchEnv),
}

impl SimEnv {
    pub fn reset(&mut self, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
        match self {
            SimEnv::Maze(e) => e.reset(rng),
            SimEnv::Workbench(e) => e.reset(rng),
        }
    }

    /// Restores an exact raw state (replay and diagnostics).
    pub fn reset_to(&mut self, state: &[f64]) {
        match self {
            SimEnv::Maze(e) => e.reset_to(state),
            SimEnv::Workbench(e) => e.reset_to(state),
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        match self {
            SimEnv::Maze(e) => e.step(action),
            SimEnv::Workbench(e) => e.step(action),
        }
    }

    pub fn observe(&self) -> Vec<f64> {
        match self {
            SimEnv::Maze(e) => e.observe(),
            SimEnv::Workbench(e) => e.observe(),
        }
    }

    pub fn state_raw(&self) -> Vec<f64> {
        match self {
            SimEnv::Maze(e) => e.state_raw(),
            SimEnv::Workbench(e) => e.state_raw(),
        }
    }

    pub fn done(&self) -> bool {
        match self {
            SimEnv::Maze(e) => e.done,
            SimEnv::Workbench(e) => e.done,
        }
    }

    pub fn success(&self) -> bool {
        match self {
            SimEnv::Maze(e) => e.success,
            SimEnv::Workbench(e) => e.success,
        }
    }

    pub fn subtasks(&self) -> usize {
        match self {
            SimEnv::Maze(e) => e.progress,
            SimEnv::Workbench(e) => e.progress,
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            SimEnv::Maze(e) => e.t,
            SimEnv::Workbench(e) => e.t,
        }
    }
}

/// A semantically matched source/target pair plus the shared skills.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvPair {
    pub source: EnvSpec,
    pub target: EnvSpec,
    pub skills: SkillTable,
}

impl EnvPair {
    pub fn spec(&self, domain: Domain) -> &EnvSpec {
        match domain {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    /// Ordered skill IDs that solve the shared task.
    pub fn task_skills(&self) -> Vec<usize> {
        match &self.source {
            EnvSpec::Maze(m) => {
                let mut out = Vec::new();
                for w in m.task_rooms.windows(2) {
                    out.push(self.skills.traversal_id(w[0], w[1]).expect("task edge"));
                }
                out.push(self.skills.goal_id(*m.task_rooms.last().unwrap()));
                out
            }
            EnvSpec::Workbench(w) => w.task.clone(),
        }
    }
}
