//! Deterministic toy environments and scripted multimodal data generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Dataset, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub state_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    pub max_episode_steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub next: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// A ball of radius `radius` around `center`.
#[derive(Clone, Debug, PartialEq)]
pub struct GoalRegion {
    pub name: &'static str,
    pub center: Vec<f64>,
    pub radius: f64,
}

impl GoalRegion {
    pub fn contains(&self, s: &[f64]) -> bool {
        dist(s, &self.center) < self.radius
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Value-semantic environment: `step` is a pure function of its arguments.
pub trait Env: Send + Sync {
    fn spec(&self) -> &EnvSpec;

    fn reset(&self, seed: u64) -> Vec<f64>;

    /// Applies `action` (clipped to bounds) as the `t`-th action of the
    /// episode, zero-based; `done` is set at the goal or on the last step.
    fn step(&self, state: &[f64], action: &[f64], t: usize) -> Transition;

    fn goal_regions(&self) -> Vec<GoalRegion>;

    /// Number of scripted behaviour modes the generator knows.
    fn num_modes(&self) -> usize;

    /// Waypoints the scripted controller visits in `mode`, the last one held.
    fn waypoints(&self, mode: usize) -> Vec<Vec<f64>>;

    fn clip_action(&self, action: &[f64]) -> Vec<f64> {
        let spec = self.spec();
        action
            .iter()
            .zip(spec.action_low.iter().zip(&spec.action_high))
            .map(|(&a, (&lo, &hi))| a.clamp(lo, hi))
            .collect()
    }

    /// Index of the first goal region containing `state`.
    fn region_of(&self, state: &[f64]) -> Option<usize> {
        self.goal_regions().iter().position(|g| g.contains(state))
    }
}

/// 1D point that should reach `target`.
#[derive(Clone, Debug, PartialEq)]
pub struct LineEnv {
    spec: EnvSpec,
    pub target: f64,
    pub dt: f64,
    pub tolerance: f64,
}

impl Default for LineEnv {
    fn default() -> Self {
        Self::new(1.0)
    }
}

impl LineEnv {
    pub fn new(target: f64) -> Self {
        Self {
            spec: EnvSpec {
                name: "line".into(),
                state_dim: 1,
                action_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                max_episode_steps: 40,
            },
            target,
            dt: 0.1,
            tolerance: 0.05,
        }
    }
}

impl Env for LineEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, _seed: u64) -> Vec<f64> {
        vec![0.0]
    }

    fn step(&self, state: &[f64], action: &[f64], t: usize) -> Transition {
        let a = self.clip_action(action)[0];
        let s = (state[0] + a * self.dt).clamp(-2.0, 2.0);
        let err = (s - self.target).abs();
        Transition {
            next: vec![s],
            reward: -err,
            done: err < self.tolerance || t + 1 >= self.spec.max_episode_steps,
        }
    }

    fn goal_regions(&self) -> Vec<GoalRegion> {
        vec![
            GoalRegion { name: "left", center: vec![-1.0], radius: self.tolerance },
            GoalRegion { name: "right", center: vec![1.0], radius: self.tolerance },
        ]
    }

    fn num_modes(&self) -> usize {
        2
    }

    fn waypoints(&self, mode: usize) -> Vec<Vec<f64>> {
        vec![vec![if mode % 2 == 0 { 1.0 } else { -1.0 }]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MazeLayout {
    Open,
    /// A horizontal bar across the middle of the arena: routes from the
    /// bottom start to the top corners bend around it, as in a U corridor.
    UCorridor,
}

/// Axis-aligned rectangle; its interior is open so the faces are reachable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Wall {
    pub x: (f64, f64),
    pub y: (f64, f64),
}

/// 2D point mass in `[-1, 1]^2` with velocity actions.
#[derive(Clone, Debug, PartialEq)]
pub struct PointMazeEnv {
    spec: EnvSpec,
    pub layout: MazeLayout,
    pub dt: f64,
    pub walls: Vec<Wall>,
    pub start: [f64; 2],
    pub start_jitter: f64,
    pub goal_radius: f64,
    /// Index into [`Env::goal_regions`] of the goal that defines reward and
    /// termination.
    pub task_goal: usize,
}

pub const CORNERS: [(&str, [f64; 2]); 4] = [
    ("bottom-left", [-0.8, -0.8]),
    ("bottom-right", [0.8, -0.8]),
    ("top-left", [-0.8, 0.8]),
    ("top-right", [0.8, 0.8]),
];

/// Loop route of the looping mode; it circles the origin counter-clockwise.
pub const LOOP_ROUTE: [[f64; 2]; 5] = [[0.65, -0.3], [0.65, 0.35], [-0.65, 0.35], [-0.65, -0.3], [0.0, -0.5]];
pub const LOOP_CENTER: [f64; 2] = [0.0, 0.0];

impl PointMazeEnv {
    pub fn new(layout: MazeLayout) -> Self {
        let walls = match layout {
            MazeLayout::Open => vec![],
            MazeLayout::UCorridor => vec![Wall { x: (-0.5, 0.5), y: (-0.05, 0.05) }],
        };
        Self {
            spec: EnvSpec {
                name: match layout {
                    MazeLayout::Open => "pointmaze-open".into(),
                    MazeLayout::UCorridor => "pointmaze".into(),
                },
                state_dim: 2,
                action_dim: 2,
                action_low: vec![-1.0; 2],
                action_high: vec![1.0; 2],
                max_episode_steps: 60,
            },
            layout,
            dt: 0.1,
            walls,
            start: [0.0, -0.5],
            start_jitter: 0.05,
            goal_radius: 0.2,
            task_goal: 2,
        }
    }

    pub fn with_max_steps(mut self, steps: usize) -> Self {
        self.spec.max_episode_steps = steps;
        self
    }

    /// Moves along one axis, stopping at the face of any wall whose span on
    /// the other axis strictly contains `other`.
    fn sweep(&self, p: f64, delta: f64, other: f64, x_axis: bool) -> f64 {
        let mut target = (p + delta).clamp(-1.0, 1.0);
        for w in &self.walls {
            let (along, across) = if x_axis { (w.x, w.y) } else { (w.y, w.x) };
            if other > across.0 && other < across.1 {
                if p <= along.0 && target > along.0 {
                    target = along.0;
                } else if p >= along.1 && target < along.1 {
                    target = along.1;
                }
            }
        }
        target
    }
}

impl Env for PointMazeEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = self.start_jitter;
        vec![
            self.start[0] + rng.gen_range(-j..=j),
            self.start[1] + rng.gen_range(-j..=j),
        ]
    }

    fn step(&self, state: &[f64], action: &[f64], t: usize) -> Transition {
        let a = self.clip_action(action);
        let x = self.sweep(state[0], a[0] * self.dt, state[1], true);
        let y = self.sweep(state[1], a[1] * self.dt, x, false);
        let next = vec![x, y];
        let goal = &self.goal_regions()[self.task_goal];
        Transition {
            reward: -dist(&next, &goal.center),
            done: goal.contains(&next) || t + 1 >= self.spec.max_episode_steps,
            next,
        }
    }

    fn goal_regions(&self) -> Vec<GoalRegion> {
        CORNERS
            .iter()
            .map(|(name, c)| GoalRegion { name, center: c.to_vec(), radius: self.goal_radius })
            .collect()
    }

    fn num_modes(&self) -> usize {
        5
    }

    fn waypoints(&self, mode: usize) -> Vec<Vec<f64>> {
        let side = match self.layout {
            MazeLayout::UCorridor => 0.75,
            MazeLayout::Open => 0.0,
        };
        match mode {
            0 => vec![vec![-0.8, -0.8]],
            1 => vec![vec![0.8, -0.8]],
            2 if side > 0.0 => vec![vec![-side, -0.25], vec![-side, 0.25], vec![-0.8, 0.8]],
            3 if side > 0.0 => vec![vec![side, -0.25], vec![side, 0.25], vec![0.8, 0.8]],
            2 => vec![vec![-0.8, 0.8]],
            3 => vec![vec![0.8, 0.8]],
            _ => LOOP_ROUTE.iter().map(|p| p.to_vec()).collect(),
        }
    }
}

/// Environments by CLI name.
pub fn make_env(name: &str) -> Result<Box<dyn Env>> {
    match name {
        "pointmaze" | "pointmaze-u" => Ok(Box::new(PointMazeEnv::new(MazeLayout::UCorridor))),
        "pointmaze-open" => Ok(Box::new(PointMazeEnv::new(MazeLayout::Open))),
        "line" => Ok(Box::new(LineEnv::default())),
        other => Err(Error::config(format!(
            "unknown environment `{other}` (expected pointmaze, pointmaze-open or line)"
        ))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub modes: usize,
    pub num_trajectories: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Proportional gain of the scripted controller.
    pub gain: f64,
    /// Distance at which the controller moves on to the next waypoint.
    pub switch_radius: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            modes: 4,
            num_trajectories: 100,
            noise_std: 0.05,
            seed: 0,
            gain: 5.0,
            switch_radius: 0.1,
        }
    }
}

/// Rolls out the scripted controller for each trajectory; trajectory `i` uses
/// mode `i % modes`. Like logged benchmark data, every episode runs the full
/// `max_episode_steps` and ignores goal contact (the controller holds its
/// final waypoint); `done` only ends online rollouts. States
/// are rounded to `f32` before every step, so replaying the stored `(s, a)`
/// pairs through [`Env::step`] reproduces the stored next states.
pub fn generate_dataset(env: &dyn Env, cfg: &GeneratorConfig) -> Result<Dataset> {
    if cfg.modes == 0 || cfg.modes > env.num_modes() {
        return Err(Error::argument(format!(
            "modes must be in 1..={} for {}",
            env.num_modes(),
            env.spec().name
        )));
    }
    if cfg.num_trajectories == 0 {
        return Err(Error::argument("num_trajectories must be positive"));
    }
    if !(cfg.noise_std >= 0.0) {
        return Err(Error::argument("noise_std must be non-negative"));
    }
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::argument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spec = env.spec().clone();
    let mut trajectories = Vec::with_capacity(cfg.num_trajectories);
    for i in 0..cfg.num_trajectories {
        let mode = i % cfg.modes;
        let route = env.waypoints(mode);
        let mut wp = 0;
        let mut s: Vec<f64> = env.reset(rng.gen()).iter().map(|&v| v as f32 as f64).collect();
        let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..spec.max_episode_steps {
            while wp + 1 < route.len() && dist(&s, &route[wp]) < cfg.switch_radius {
                wp += 1;
            }
            let raw: Vec<f64> = s
                .iter()
                .zip(&route[wp])
                .map(|(&x, &g)| cfg.gain * (g - x) + noise.sample(&mut rng))
                .collect();
            let a: Vec<f64> = env.clip_action(&raw).iter().map(|&v| v as f32 as f64).collect();
            let tr = env.step(&s, &a, t);
            states.extend(s.iter().map(|&v| v as f32));
            actions.extend(a.iter().map(|&v| v as f32));
            rewards.push(tr.reward as f32);
            s = tr.next.iter().map(|&v| v as f32 as f64).collect();
        }
        trajectories.push(
            Trajectory::new(i as u64, spec.state_dim, spec.action_dim, states, actions, Some(rewards))?
                .with_mode(mode as u32),
        );
    }
    Dataset::new(spec.name.clone(), trajectories)
}

/// Net number of counter-clockwise turns of a planar path around `center`.
pub fn winding_number(path: &[[f64; 2]], center: [f64; 2]) -> i64 {
    let mut total = 0.0;
    for w in path.windows(2) {
        let a = (w[0][1] - center[1]).atan2(w[0][0] - center[0]);
        let b = (w[1][1] - center[1]).atan2(w[1][0] - center[0]);
        let mut d = b - a;
        while d > std::f64::consts::PI {
            d -= 2.0 * std::f64::consts::PI;
        }
        while d < -std::f64::consts::PI {
            d += 2.0 * std::f64::consts::PI;
        }
        total += d;
    }
    (total / (2.0 * std::f64::consts::PI)).round() as i64
}
