//! Planar workbench with articulable objects and a central divider.
//!
//! The agent moves in a square arena and pushes effort into the
//! nearest object within reach; an object completes once its
//! articulation crosses 1. A vertical divider splits the bench into
//! two halves joined by gaps at the top and bottom, so crossings admit
//! two distinct routes. Source and target share object identities and
//! the task order but place the objects differently.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Domain, EnvError, SkillTable, StepResult};
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkbenchSpec {
    pub size: f64,
    /// Object positions, one per semantic object ID.
    pub objects: Vec<(f64, f64)>,
    /// Vertical barrier at `x = divider_x` spanning `divider_y0..divider_y1`.
    pub divider_x: f64,
    pub divider_y0: f64,
    pub divider_y1: f64,
    pub interact_radius: f64,
    pub max_step: f64,
    /// Articulation gained per step at full effort.
    pub rate: f64,
    /// Ordered object IDs to complete.
    pub task: Vec<usize>,
    pub start: (f64, f64),
    pub episode_len: usize,
    pub domain: Domain,
}

impl WorkbenchSpec {
    pub fn observe(&self, x: f64, y: f64, artic: &[f64]) -> Vec<f64> {
        let mut obs = vec![x / self.size, y / self.size];
        obs.extend_from_slice(artic);
        obs
    }

    /// True when a horizontal move from `x0` to `x1` at height `y`
    /// would pass through the divider.
    pub fn crosses_divider(&self, x0: f64, x1: f64, y: f64) -> bool {
        if y < self.divider_y0 || y > self.divider_y1 {
            return false;
        }
        (x0 - self.divider_x).signum() != (x1 - self.divider_x).signum()
            || x1 == self.divider_x
    }

    pub fn same_side(&self, x0: f64, x1: f64) -> bool {
        (x0 < self.divider_x) == (x1 < self.divider_x)
    }
}

// ── generation ──────────────────────────────────────────────────────

const OBJECT_MARGIN: f64 = 1.0;
const OBJECT_MIN_DIST: f64 = 1.2;
const DIVIDER_CLEAR: f64 = 0.9;

fn place_objects(spec_size: f64, n: usize, divider_x: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut objects: Vec<(f64, f64)> = Vec::with_capacity(n);
    'outer: while objects.len() < n {
        let x = rng.gen_range(OBJECT_MARGIN..spec_size - OBJECT_MARGIN);
        let y = rng.gen_range(OBJECT_MARGIN..spec_size - OBJECT_MARGIN);
        if (x - divider_x).abs() < DIVIDER_CLEAR {
            continue;
        }
        for &(ox, oy) in &objects {
            if ((x - ox).powi(2) + (y - oy).powi(2)).sqrt() < OBJECT_MIN_DIST {
                continue 'outer;
            }
        }
        objects.push((x, y));
    }
    objects
}

/// Builds a semantically equivalent workbench pair: same task and
/// object IDs, independently placed object positions.
pub fn build_workbench_pair(seed: u64, n_objects: usize, task_len: usize) -> super::EnvPair {
    assert!(task_len <= n_objects);
    let size = 10.0;
    let divider_x = 5.0;
    let mut task_rng = stream(seed, "bench-task");
    let mut task: Vec<usize> = (0..n_objects).collect();
    // Fisher-Yates prefix gives distinct ordered object IDs.
    for i in 0..task_len {
        let j = task_rng.gen_range(i..n_objects);
        task.swap(i, j);
    }
    task.truncate(task_len);

    let mk = |domain: Domain, tag: &str| {
        let mut rng = stream(seed, tag);
        WorkbenchSpec {
            size,
            objects: place_objects(size, n_objects, divider_x, &mut rng),
            divider_x,
            divider_y0: 1.5,
            divider_y1: 8.5,
            interact_radius: 0.6,
            max_step: 0.25,
            rate: 0.125,
            task: task.clone(),
            start: (0.8, 5.0),
            episode_len: 320,
            domain,
        }
    };
    super::EnvPair {
        source: super::EnvSpec::Workbench(mk(Domain::Source, "bench-source")),
        target: super::EnvSpec::Workbench(mk(Domain::Target, "bench-target")),
        skills: SkillTable::objects_only(n_objects),
    }
}

// ── stepping ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct WorkbenchEnv {
    pub spec: WorkbenchSpec,
    pub x: f64,
    pub y: f64,
    /// Articulation per object, capped at 1.
    pub artic: Vec<f64>,
    pub t: usize,
    pub progress: usize,
    pub done: bool,
    pub success: bool,
}

impl WorkbenchEnv {
    pub fn new(spec: WorkbenchSpec) -> Self {
        let (x, y) = spec.start;
        let artic = vec![0.0; spec.objects.len()];
        WorkbenchEnv { spec, x, y, artic, t: 0, progress: 0, done: false, success: false }
    }

    pub fn reset(&mut self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.x = self.spec.start.0 + rng.gen_range(-0.2..0.2);
        self.y = self.spec.start.1 + rng.gen_range(-0.2..0.2);
        self.artic.iter_mut().for_each(|a| *a = 0.0);
        self.t = 0;
        self.progress = 0;
        self.done = false;
        self.success = false;
        self.observe()
    }

    pub fn reset_to(&mut self, state: &[f64]) {
        assert_eq!(state.len(), 2 + self.spec.objects.len());
        self.x = state[0];
        self.y = state[1];
        self.artic.copy_from_slice(&state[2..]);
        self.t = 0;
        self.progress = 0;
        self.done = false;
        self.success = false;
    }

    pub fn observe(&self) -> Vec<f64> {
        self.spec.observe(self.x, self.y, &self.artic)
    }

    pub fn state_raw(&self) -> Vec<f64> {
        let mut s = vec![self.x, self.y];
        s.extend_from_slice(&self.artic);
        s
    }

    /// Nearest object within interaction reach.
    pub fn reachable_object(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (m, &(ox, oy)) in self.spec.objects.iter().enumerate() {
            let d = ((self.x - ox).powi(2) + (self.y - oy).powi(2)).sqrt();
            if d <= self.spec.interact_radius && best.map_or(true, |(_, bd)| d < bd) {
                best = Some((m, d));
            }
        }
        best.map(|(m, _)| m)
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult, EnvError> {
        if action.len() != 3 {
            return Err(EnvError::ActionDim { got: action.len(), want: 3 });
        }
        let mut reward = 0.0;
        if !self.done {
            let s = &self.spec;
            let dx = action[0].clamp(-s.max_step, s.max_step);
            let dy = action[1].clamp(-s.max_step, s.max_step);
            // axis-separated move: a blocked axis cancels, the other
            // survives, like wall sliding
            let tx = self.x + dx;
            if tx >= 0.0 && tx <= s.size && !s.crosses_divider(self.x, tx, self.y) {
                self.x = tx;
            }
            let ty = self.y + dy;
            if ty >= 0.0 && ty <= s.size {
                self.y = ty;
            }
            let effort = action[2].clamp(0.0, 1.0);
            if effort > 0.0 {
                if let Some(m) = self.reachable_object() {
                    let before = self.artic[m];
                    self.artic[m] = (before + self.spec.rate * effort).min(1.0);
                    if before < 1.0 && self.artic[m] >= 1.0 {
                        // completion fires once; only the next task
                        // object in order yields reward
                        if self.progress < self.spec.task.len()
                            && self.spec.task[self.progress] == m
                        {
                            self.progress += 1;
                            reward = 1.0;
                        }
                    }
                }
            }
            self.t += 1;
            if self.progress == self.spec.task.len() {
                self.success = true;
                self.done = true;
            }
            if self.t >= self.spec.episode_len {
                self.done = true;
            }
        }
        Ok(StepResult {
            obs: self.observe(),
            reward,
            done: self.done,
            room: None,
            subtasks: self.progress,
            success: self.success,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvSpec;

    fn pair(seed: u64) -> (WorkbenchSpec, WorkbenchSpec, SkillTable) {
        let p = build_workbench_pair(seed, 7, 4);
        let (EnvSpec::Workbench(s), EnvSpec::Workbench(t)) = (p.source, p.target) else {
            unreachable!()
        };
        (s, t, p.skills)
    }

    use crate::env::SkillTable;

    #[test]
    fn skill_per_object() {
        let (s, _, skills) = pair(0);
        assert_eq!(skills.count(), s.objects.len());
        assert_eq!(skills.goal_id(3), 3);
    }

    #[test]
    fn pair_shares_task_not_positions() {
        let (s, t, _) = pair(1);
        assert_eq!(s.task, t.task);
        assert_eq!(s.task.len(), 4);
        let mut sorted = s.task.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 4, "task objects must be distinct");
        assert_ne!(s.objects, t.objects);
    }

    #[test]
    fn objects_spaced_and_off_divider() {
        for seed in 0..30 {
            let (s, t, _) = pair(seed);
            for spec in [&s, &t] {
                for (i, &(x, y)) in spec.objects.iter().enumerate() {
                    assert!((x - spec.divider_x).abs() >= DIVIDER_CLEAR);
                    assert!(x >= OBJECT_MARGIN && x <= spec.size - OBJECT_MARGIN);
                    assert!(y >= OBJECT_MARGIN && y <= spec.size - OBJECT_MARGIN);
                    for &(ox, oy) in &spec.objects[..i] {
                        let d = ((x - ox).powi(2) + (y - oy).powi(2)).sqrt();
                        assert!(d >= OBJECT_MIN_DIST, "seed {seed}: objects {d} apart");
                    }
                }
            }
        }
    }

    #[test]
    fn full_effort_completes_in_eight_steps() {
        // rate 0.125: 8 steps at effort 1 cross articulation 1.0 exactly
        let (s, _, _) = pair(2);
        let m = s.task[0];
        let (ox, oy) = s.objects[m];
        let mut env = WorkbenchEnv::new(s);
        env.reset_to(&{
            let mut st = vec![ox, oy];
            st.extend(vec![0.0; 7]);
            st
        });
        for i in 0..8 {
            let r = env.step(&[0.0, 0.0, 1.0]).unwrap();
            if i < 7 {
                assert_eq!(r.reward, 0.0);
                assert!((env.artic[m] - 0.125 * (i as f64 + 1.0)).abs() < 1e-12);
            } else {
                assert_eq!(r.reward, 1.0);
                assert_eq!(r.subtasks, 1);
            }
        }
        assert_eq!(env.artic[m], 1.0);
        // articulation is capped and the completion is consumed
        let r = env.step(&[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(env.artic[m], 1.0);
        assert_eq!(r.reward, 0.0);
    }

    #[test]
    fn out_of_order_completion_wastes_object() {
        let (s, _, _) = pair(3);
        let first = s.task[0];
        let second = s.task[1];
        let n = s.objects.len();
        let mut env = WorkbenchEnv::new(s.clone());
        let park = |m: usize| {
            let mut st = vec![s.objects[m].0, s.objects[m].1];
            st.extend(vec![0.0; n]);
            st
        };
        // completing the second task object first yields nothing
        env.reset_to(&park(second));
        env.artic = vec![0.0; n];
        let mut got = 0.0;
        for _ in 0..8 {
            got += env.step(&[0.0, 0.0, 1.0]).unwrap().reward;
        }
        assert_eq!(got, 0.0);
        assert_eq!(env.progress, 0);
        // the first still pays out...
        env.x = s.objects[first].0;
        env.y = s.objects[first].1;
        for _ in 0..8 {
            got += env.step(&[0.0, 0.0, 1.0]).unwrap().reward;
        }
        assert_eq!(got, 1.0);
        assert_eq!(env.progress, 1);
        // ...but the wasted second can never fire again
        env.x = s.objects[second].0;
        env.y = s.objects[second].1;
        for _ in 0..20 {
            got += env.step(&[0.0, 0.0, 1.0]).unwrap().reward;
        }
        assert_eq!(got, 1.0);
        assert_eq!(env.progress, 1);
    }

    #[test]
    fn divider_blocks_crossing_inside_band() {
        let (s, _, _) = pair(4);
        let n = s.objects.len();
        let mut env = WorkbenchEnv::new(s.clone());
        let mut st = vec![s.divider_x - 0.1, 5.0];
        st.extend(vec![0.0; n]);
        env.reset_to(&st);
        env.step(&[0.25, 0.2, 0.0]).unwrap();
        // x blocked at the divider, y free (slide)
        assert_eq!(env.x, s.divider_x - 0.1);
        assert!((env.y - 5.2).abs() < 1e-12);
        // below the band the same move crosses
        let mut st = vec![s.divider_x - 0.1, 0.8];
        st.extend(vec![0.0; n]);
        env.reset_to(&st);
        env.step(&[0.25, 0.0, 0.0]).unwrap();
        assert!((env.x - (s.divider_x + 0.15)).abs() < 1e-12);
    }

    #[test]
    fn moves_clamped_and_bounded() {
        let (s, _, _) = pair(5);
        let mut env = WorkbenchEnv::new(s.clone());
        let x0 = env.x;
        env.step(&[10.0, 0.0, 0.0]).unwrap();
        assert!((env.x - x0 - s.max_step).abs() < 1e-12);
        // can't leave the arena
        let n = s.objects.len();
        let mut st = vec![0.1, 0.1];
        st.extend(vec![0.0; n]);
        env.reset_to(&st);
        env.step(&[-0.25, -0.25, 0.0]).unwrap();
        assert_eq!((env.x, env.y), (0.1, 0.1));
    }

    #[test]
    fn negative_effort_does_nothing() {
        let (s, _, _) = pair(6);
        let m = s.task[0];
        let (ox, oy) = s.objects[m];
        let n = s.objects.len();
        let mut env = WorkbenchEnv::new(s);
        let mut st = vec![ox, oy];
        st.extend(vec![0.0; n]);
        env.reset_to(&st);
        env.step(&[0.0, 0.0, -1.0]).unwrap();
        assert_eq!(env.artic[m], 0.0);
    }

    #[test]
    fn effort_outside_reach_does_nothing() {
        let (s, _, _) = pair(7);
        let mut env = WorkbenchEnv::new(s.clone());
        // start is off the divider and at least interact_radius from
        // every object in this seed
        for &(ox, oy) in &s.objects {
            let d = ((env.x - ox).powi(2) + (env.y - oy).powi(2)).sqrt();
            assert!(d > s.interact_radius);
        }
        env.step(&[0.0, 0.0, 1.0]).unwrap();
        assert!(env.artic.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn observation_layout() {
        let (s, _, _) = pair(8);
        let env = WorkbenchEnv::new(s.clone());
        let obs = env.observe();
        assert_eq!(obs.len(), 2 + s.objects.len());
        assert!((obs[0] - env.x / s.size).abs() < 1e-15);
        let spec = EnvSpec::Workbench(s);
        assert_eq!(spec.obs_dim(), obs.len());
        assert_eq!(spec.action_dim(), 3);
    }

    #[test]
    fn truncates_at_episode_len() {
        let (s, _, _) = pair(9);
        let len = s.episode_len;
        let mut env = WorkbenchEnv::new(s);
        for i in 0..len {
            let r = env.step(&[0.0, 0.0, 0.0]).unwrap();
            assert_eq!(r.done, i + 1 == len);
        }
    }
}
