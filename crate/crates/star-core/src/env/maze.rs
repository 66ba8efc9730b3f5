//! Grid-room maze pairs with continuous planar control.
//!
//! Layout: `grid x grid` rooms of `room_size x room_size` cells
//! separated by one-cell walls, doors carved on connected edges. The
//! target instance is the source rotated 180 degrees with intra-room
//! obstacles re-randomized, so both share one semantic room graph
//! while their local geometry differs. Every room keeps a blocked
//! center cell; paths around it are genuinely multimodal.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Domain, EnvError, SkillTable, StepResult};
use crate::rng::stream;

/// Undirected connectivity between semantic room IDs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoomGraph {
    pub rooms: usize,
    /// Sorted edge list, each `(a, b)` with `a < b`.
    pub edges: Vec<(usize, usize)>,
}

impl RoomGraph {
    pub fn neighbors(&self, r: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for &(a, b) in &self.edges {
            if a == r {
                out.push(b);
            } else if b == r {
                out.push(a);
            }
        }
        out.sort_unstable();
        out
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        let e = if a < b { (a, b) } else { (b, a) };
        self.edges.binary_search(&e).is_ok()
    }

    /// BFS shortest path between semantic rooms.
    pub fn path(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        let mut prev = vec![usize::MAX; self.rooms];
        let mut queue = std::collections::VecDeque::new();
        prev[from] = from;
        queue.push_back(from);
        while let Some(r) = queue.pop_front() {
            if r == to {
                let mut path = vec![to];
                let mut at = to;
                while at != from {
                    at = prev[at];
                    path.push(at);
                }
                path.reverse();
                return Some(path);
            }
            for n in self.neighbors(r) {
                if prev[n] == usize::MAX {
                    prev[n] = r;
                    queue.push_back(n);
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MazeSpec {
    pub grid: usize,
    pub room_size: usize,
    /// Cells per side: `grid * (room_size + 1) + 1`.
    pub side: usize,
    /// Row-major blocked-cell mask, `side * side` entries.
    pub walls: Vec<bool>,
    /// Semantic room ID by grid room index (row-major grid position).
    pub room_sem: Vec<usize>,
    pub graph: RoomGraph,
    /// Demonstrated semantic room sequence; first entry is the start room.
    pub task_rooms: Vec<usize>,
    pub goal: (f64, f64),
    pub goal_radius: f64,
    pub start: (f64, f64),
    pub vmax: f64,
    pub dt: f64,
    pub episode_len: usize,
    pub domain: Domain,
}

impl MazeSpec {
    pub fn cell_blocked(&self, cx: i64, cy: i64) -> bool {
        if cx < 0 || cy < 0 || cx >= self.side as i64 || cy >= self.side as i64 {
            return true;
        }
        self.walls[cy as usize * self.side + cx as usize]
    }

    pub fn point_free(&self, x: f64, y: f64) -> bool {
        if x < 0.0 || y < 0.0 || x >= self.side as f64 || y >= self.side as f64 {
            return false;
        }
        !self.cell_blocked(x.floor() as i64, y.floor() as i64)
    }

    /// Grid room (column, row) containing a cell, if it lies in a room
    /// interior block.
    fn grid_room_of_cell(&self, cx: usize, cy: usize) -> Option<(usize, usize)> {
        let p = self.room_size + 1;
        if cx % p == 0 || cy % p == 0 {
            return None;
        }
        Some((cx / p, cy / p))
    }

    fn sem_of_grid(&self, gx: usize, gy: usize) -> usize {
        self.room_sem[gy * self.grid + gx]
    }

    /// Semantic room of a continuous position. Door cells sit on a wall
    /// line between two rooms; they resolve to the adjacent room with
    /// the lower semantic ID.
    pub fn room_of(&self, x: f64, y: f64) -> Result<usize, EnvError> {
        if x < 0.0 || y < 0.0 || x >= self.side as f64 || y >= self.side as f64 {
            return Err(EnvError::OutOfBounds(x, y));
        }
        let (cx, cy) = (x.floor() as usize, y.floor() as usize);
        if self.walls[cy * self.side + cx] {
            return Err(EnvError::InWall(x, y));
        }
        if let Some((gx, gy)) = self.grid_room_of_cell(cx, cy) {
            return Ok(self.sem_of_grid(gx, gy));
        }
        // A free cell on a wall line is a door: take the lower semantic
        // ID of the two rooms it joins.
        let p = self.room_size + 1;
        let candidates: &[(i64, i64)] = if cx % p == 0 {
            &[(cx as i64 - 1, cy as i64), (cx as i64 + 1, cy as i64)]
        } else {
            &[(cx as i64, cy as i64 - 1), (cx as i64, cy as i64 + 1)]
        };
        let mut best: Option<usize> = None;
        for &(nx, ny) in candidates {
            if nx >= 0 && ny >= 0 {
                if let Some((gx, gy)) = self.grid_room_of_cell(nx as usize, ny as usize) {
                    let sem = self.sem_of_grid(gx, gy);
                    best = Some(best.map_or(sem, |b: usize| b.min(sem)));
                }
            }
        }
        best.ok_or(EnvError::InWall(x, y))
    }

    /// Free interior cells of a semantic room, row-major order.
    pub fn room_cells(&self, sem: usize) -> Vec<(usize, usize)> {
        let p = self.room_size + 1;
        let gi = self.room_sem.iter().position(|&s| s == sem).expect("semantic id");
        let (gx, gy) = (gi % self.grid, gi / self.grid);
        let mut out = Vec::new();
        for dy in 1..=self.room_size {
            for dx in 1..=self.room_size {
                let (cx, cy) = (gx * p + dx, gy * p + dy);
                if !self.walls[cy * self.side + cx] {
                    out.push((cx, cy));
                }
            }
        }
        out
    }

    /// Per-room reach point: the task goal in the final task room,
    /// else the free cell nearest the room's center.
    pub fn anchor(&self, room: usize) -> (f64, f64) {
        if room == *self.task_rooms.last().unwrap() {
            return self.goal;
        }
        let p = self.room_size + 1;
        let gi = self.room_sem.iter().position(|&s| s == room).expect("semantic id");
        let (gx, gy) = (gi % self.grid, gi / self.grid);
        let cx0 = (gx * p) as f64 + 1.0 + self.room_size as f64 / 2.0;
        let cy0 = (gy * p) as f64 + 1.0 + self.room_size as f64 / 2.0;
        let mut best: Option<((f64, f64), f64)> = None;
        for (cx, cy) in self.room_cells(room) {
            let d = (cx as f64 + 0.5 - cx0).powi(2) + (cy as f64 + 0.5 - cy0).powi(2);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some(((cx as f64 + 0.5, cy as f64 + 0.5), d));
            }
        }
        best.expect("room has free cells").0
    }

    pub fn observe(&self, x: f64, y: f64) -> Vec<f64> {
        vec![x / self.side as f64, y / self.side as f64]
    }

    pub fn deobserve(&self, obs: &[f64]) -> (f64, f64) {
        (obs[0] * self.side as f64, obs[1] * self.side as f64)
    }

    /// Collision-resolved move: each axis advances independently and a
    /// blocked axis is cancelled, so the tangential component survives
    /// (slide along walls).
    pub fn slide(&self, x: f64, y: f64, dx: f64, dy: f64) -> (f64, f64) {
        let mut nx = x;
        let tx = x + dx;
        if self.point_free(tx, y) {
            nx = tx;
        }
        let mut ny = y;
        let ty = y + dy;
        if self.point_free(nx, ty) {
            ny = ty;
        }
        (nx, ny)
    }
}

// ── generation ──────────────────────────────────────────────────────

fn carve_layout(
    grid: usize,
    room_size: usize,
    graph: &RoomGraph,
    room_sem: &[usize],
    rng: &mut ChaCha8Rng,
) -> Vec<bool> {
    let p = room_size + 1;
    let side = grid * p + 1;
    let mut walls = vec![false; side * side];
    for cy in 0..side {
        for cx in 0..side {
            if cx % p == 0 || cy % p == 0 {
                walls[cy * side + cx] = true;
            }
        }
    }
    // doors: one carved cell per connected grid-adjacent pair
    let sem_at = |gx: usize, gy: usize| room_sem[gy * grid + gx];
    for gy in 0..grid {
        for gx in 0..grid {
            if gx + 1 < grid && graph.has_edge(sem_at(gx, gy), sem_at(gx + 1, gy)) {
                let off = rng.gen_range(1..=room_size);
                let (cx, cy) = ((gx + 1) * p, gy * p + off);
                walls[cy * side + cx] = false;
            }
            if gy + 1 < grid && graph.has_edge(sem_at(gx, gy), sem_at(gx, gy + 1)) {
                let off = rng.gen_range(1..=room_size);
                let (cx, cy) = (gx * p + off, (gy + 1) * p);
                walls[cy * side + cx] = false;
            }
        }
    }
    walls
}

/// Interior cells bordering a carved door; obstacles here would seal
/// the door on one side and break the room graph physically.
fn door_adjacent(walls: &[bool], side: usize, p: usize) -> Vec<bool> {
    let mut forbid = vec![false; walls.len()];
    for cy in 0..side {
        for cx in 0..side {
            let on_line = cx % p == 0 || cy % p == 0;
            if !on_line || walls[cy * side + cx] {
                continue;
            }
            for (nx, ny) in [
                (cx as i64 - 1, cy as i64),
                (cx as i64 + 1, cy as i64),
                (cx as i64, cy as i64 - 1),
                (cx as i64, cy as i64 + 1),
            ] {
                if nx >= 0 && ny >= 0 && (nx as usize) < side && (ny as usize) < side {
                    forbid[ny as usize * side + nx as usize] = true;
                }
            }
        }
    }
    forbid
}

/// Blocks the center cell of every room plus `extra` random interior
/// cells, rejecting cells next to doors and layouts that disconnect
/// any free cell.
fn place_obstacles(
    walls: &mut Vec<bool>,
    grid: usize,
    room_size: usize,
    extra: usize,
    rng: &mut ChaCha8Rng,
) {
    let p = room_size + 1;
    let side = grid * p + 1;
    let forbid = door_adjacent(walls, side, p);
    let mid = (room_size + 1) / 2;
    for gy in 0..grid {
        for gx in 0..grid {
            walls[(gy * p + mid) * side + gx * p + mid] = true;
            let mut placed = 0;
            let mut tries = 0;
            while placed < extra && tries < 60 {
                tries += 1;
                let dx = rng.gen_range(1..=room_size);
                let dy = rng.gen_range(1..=room_size);
                let idx = (gy * p + dy) * side + gx * p + dx;
                if walls[idx] || forbid[idx] {
                    continue;
                }
                walls[idx] = true;
                if free_cells_connected(walls, side) {
                    placed += 1;
                } else {
                    walls[idx] = false;
                }
            }
        }
    }
}

pub(crate) fn free_cells_connected(walls: &[bool], side: usize) -> bool {
    let total_free = walls.iter().filter(|w| !**w).count();
    let start = match walls.iter().position(|w| !*w) {
        Some(s) => s,
        None => return false,
    };
    let mut seen = vec![false; walls.len()];
    let mut stack = vec![start];
    seen[start] = true;
    let mut count = 0;
    while let Some(at) = stack.pop() {
        count += 1;
        let (cx, cy) = (at % side, at / side);
        let push = |nx: i64, ny: i64, stack: &mut Vec<usize>, seen: &mut Vec<bool>| {
            if nx >= 0 && ny >= 0 && (nx as usize) < side && (ny as usize) < side {
                let ni = ny as usize * side + nx as usize;
                if !walls[ni] && !seen[ni] {
                    seen[ni] = true;
                    stack.push(ni);
                }
            }
        };
        push(cx as i64 - 1, cy as i64, &mut stack, &mut seen);
        push(cx as i64 + 1, cy as i64, &mut stack, &mut seen);
        push(cx as i64, cy as i64 - 1, &mut stack, &mut seen);
        push(cx as i64, cy as i64 + 1, &mut stack, &mut seen);
    }
    count == total_free
}

fn build_graph(grid: usize, rng: &mut ChaCha8Rng) -> RoomGraph {
    // spanning tree over the grid by randomized DFS, then extra edges
    let rooms = grid * grid;
    let mut edges = Vec::new();
    let mut seen = vec![false; rooms];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(&at) = stack.last() {
        let (gx, gy) = (at % grid, at / grid);
        let mut nbs = Vec::new();
        if gx > 0 {
            nbs.push(at - 1);
        }
        if gx + 1 < grid {
            nbs.push(at + 1);
        }
        if gy > 0 {
            nbs.push(at - grid);
        }
        if gy + 1 < grid {
            nbs.push(at + grid);
        }
        nbs.retain(|&n| !seen[n]);
        if nbs.is_empty() {
            stack.pop();
            continue;
        }
        let n = *nbs.choose(rng).unwrap();
        seen[n] = true;
        edges.push(if at < n { (at, n) } else { (n, at) });
        stack.push(n);
    }
    // extra edges make multiple routes possible
    let mut candidates = Vec::new();
    for gy in 0..grid {
        for gx in 0..grid {
            let at = gy * grid + gx;
            if gx + 1 < grid {
                candidates.push((at, at + 1));
            }
            if gy + 1 < grid {
                candidates.push((at, at + grid));
            }
        }
    }
    candidates.retain(|e| !edges.contains(e));
    candidates.shuffle(rng);
    let extra = (grid * grid) / 2;
    edges.extend(candidates.into_iter().take(extra));
    edges.sort_unstable();
    RoomGraph { rooms, edges }
}

/// Builds the semantically equivalent maze pair. Source room IDs follow
/// grid order; the target assigns each grid position the ID of the
/// 180-degree-rotated source position and re-randomizes obstacles.
pub fn build_maze_pair(seed: u64, grid: usize, room_size: usize) -> super::EnvPair {
    let mut rng = stream(seed, "maze-pair");
    // Semantic IDs equal source grid indices, so the graph built on
    // grid positions is already in semantic terms.
    let graph = build_graph(grid, &mut rng);
    let p = room_size + 1;
    let side = grid * p + 1;

    let src_sem: Vec<usize> = (0..grid * grid).collect();
    let mut src_walls = carve_layout(grid, room_size, &graph, &src_sem, &mut rng);
    place_obstacles(&mut src_walls, grid, room_size, 2, &mut rng);

    // target: rotate walls 180 degrees, then re-randomize obstacles
    let mut tgt_walls = vec![false; side * side];
    for cy in 0..side {
        for cx in 0..side {
            tgt_walls[(side - 1 - cy) * side + (side - 1 - cx)] = src_walls[cy * side + cx];
        }
    }
    let mut tgt_sem = vec![0usize; grid * grid];
    for gy in 0..grid {
        for gx in 0..grid {
            tgt_sem[gy * grid + gx] = src_sem[(grid - 1 - gy) * grid + (grid - 1 - gx)];
        }
    }
    // strip rotated obstacles back to walls+doors, re-place fresh ones
    let mut tgt_rng = stream(seed, "maze-target-obstacles");
    let mid = (room_size + 1) / 2;
    for gy in 0..grid {
        for gx in 0..grid {
            for dy in 1..=room_size {
                for dx in 1..=room_size {
                    tgt_walls[(gy * p + dy) * side + gx * p + dx] = false;
                }
            }
            tgt_walls[(gy * p + mid) * side + gx * p + mid] = true;
        }
    }
    place_obstacles(&mut tgt_walls, grid, room_size, 2, &mut tgt_rng);

    // task: corner-to-corner shortest semantic path
    let task_rooms = graph.path(0, grid * grid - 1).expect("connected graph");

    let mk_spec = |walls: Vec<bool>, room_sem: Vec<usize>, domain: Domain, rng: &mut ChaCha8Rng| {
        let mut spec = MazeSpec {
            grid,
            room_size,
            side,
            walls,
            room_sem,
            graph: graph.clone(),
            task_rooms: task_rooms.clone(),
            goal: (0.0, 0.0),
            goal_radius: 0.45,
            start: (0.0, 0.0),
            vmax: 1.0,
            dt: 0.1,
            episode_len: 500,
            domain,
        };
        let start_cells = spec.room_cells(task_rooms[0]);
        let (sx, sy) = start_cells[0];
        spec.start = (sx as f64 + 0.5, sy as f64 + 0.5);
        let goal_cells = spec.room_cells(*task_rooms.last().unwrap());
        let (gx, gy) = goal_cells[rng.gen_range(0..goal_cells.len())];
        spec.goal = (gx as f64 + 0.5, gy as f64 + 0.5);
        spec
    };
    let mut src_goal_rng = stream(seed, "maze-source-goal");
    let source = mk_spec(src_walls, src_sem, Domain::Source, &mut src_goal_rng);
    let mut tgt_goal_rng = stream(seed, "maze-target-goal");
    let target = mk_spec(tgt_walls, tgt_sem, Domain::Target, &mut tgt_goal_rng);

    let skills = SkillTable::from_graph(&graph);
    super::EnvPair {
        source: super::EnvSpec::Maze(source),
        target: super::EnvSpec::Maze(target),
        skills,
    }
}

// ── stepping ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct MazeEnv {
    pub spec: MazeSpec,
    pub x: f64,
    pub y: f64,
    pub t: usize,
    /// Task rooms matched so far minus one (index into `task_rooms`).
    pub progress: usize,
    pub done: bool,
    pub success: bool,
}

impl MazeEnv {
    pub fn new(spec: MazeSpec) -> Self {
        let (x, y) = spec.start;
        MazeEnv { spec, x, y, t: 0, progress: 0, done: false, success: false }
    }

    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let (sx, sy) = self.spec.start;
        let mut x = sx + rng.gen_range(-0.3..0.3);
        let mut y = sy + rng.gen_range(-0.3..0.3);
        if !self.spec.point_free(x, y) {
            x = sx;
            y = sy;
        }
        self.x = x;
        self.y = y;
        self.t = 0;
        self.progress = 0;
        self.done = false;
        self.success = false;
        self.observe()
    }

    pub fn reset_to(&mut self, state: &[f64]) {
        self.x = state[0];
        self.y = state[1];
        self.t = 0;
        self.progress = 0;
        self.done = false;
        self.success = false;
    }

    pub fn observe(&self) -> Vec<f64> {
        self.spec.observe(self.x, self.y)
    }

    pub fn state_raw(&self) -> Vec<f64> {
        vec![self.x, self.y]
    }

    pub fn room(&self) -> usize {
        self.spec.room_of(self.x, self.y).expect("agent in free space")
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if action.len() != 2 {
            return Err(EnvError::ActionDim { got: action.len(), want: 2 });
        }
        if !self.done {
            let ax = action[0].clamp(-self.spec.vmax, self.spec.vmax);
            let ay = action[1].clamp(-self.spec.vmax, self.spec.vmax);
            let (nx, ny) = self.spec.slide(self.x, self.y, ax * self.spec.dt, ay * self.spec.dt);
            self.x = nx;
            self.y = ny;
            self.t += 1;
        }
        let room = self.room();
        if self.progress + 1 < self.spec.task_rooms.len()
            && room == self.spec.task_rooms[self.progress + 1]
        {
            self.progress += 1;
        }
        let mut reward = 0.0;
        if !self.done && self.progress + 1 == self.spec.task_rooms.len() {
            let dg = ((self.x - self.spec.goal.0).powi(2) + (self.y - self.spec.goal.1).powi(2)).sqrt();
            if dg <= self.spec.goal_radius {
                reward = 1.0;
                self.success = true;
                self.done = true;
            }
        }
        if self.t >= self.spec.episode_len {
            self.done = true;
        }
        Ok(StepResult {
            obs: self.observe(),
            reward,
            done: self.done,
            room: Some(room),
            subtasks: self.progress,
            success: self.success,
        })
    }
}
