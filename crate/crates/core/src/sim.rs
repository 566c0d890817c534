//! Deterministic 3-DoF planar arm: kinematics, the nine-action dynamics,
//! reward, fixed-horizon episodes and the one-step kinematic guide.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Per-step joint increment in radians.
pub const ACTION_DELTA: f64 = 0.04;
/// Number of canonical actions: three per joint.
pub const NUM_ACTIONS: usize = 9;
/// Reward radius around the target, metres.
pub const REWARD_RADIUS: f64 = 0.05;
/// Fixed episode length.
pub const HORIZON: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("task sampling gave up after {0} draws; check workspace and viewport settings")]
    Sampling(usize),
    #[error("policy returned invalid action id {0} (expected 0..9)")]
    InvalidAction(usize),
    #[error("episode length must be at least 1")]
    EmptyEpisode,
    #[error("policy failed: {0}")]
    Policy(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmModel {
    pub links: [f64; 3],
    pub joint_limits: [[f64; 2]; 3],
    /// Sub-box of the joint limits that task start configurations are drawn from.
    pub start_limits: [[f64; 2]; 3],
    /// Inner and outer radius of the target annulus.
    pub target_radius: [f64; 2],
    /// Allowed initial end-effector to target distance for sampled tasks.
    pub initial_distance: [f64; 2],
}

impl Default for ArmModel {
    fn default() -> Self {
        Self {
            links: [0.37, 0.37, 0.23],
            joint_limits: [[-2.8, 2.8]; 3],
            // Frontal workspace with the elbows bent one way.
            start_limits: [[-1.0, 1.0], [0.3, 1.8], [0.3, 1.8]],
            // Near full extension single-joint steps only move tangentially.
            target_radius: [0.3, 0.85],
            initial_distance: [0.1, 0.5],
        }
    }
}

impl ArmModel {
    pub fn reach(&self) -> f64 {
        self.links.iter().sum()
    }

    pub fn action_delta(&self) -> f64 {
        ACTION_DELTA
    }

    pub fn forward_kinematics(&self, q: [f64; 3]) -> [f64; 2] {
        let mut angle = 0.0;
        let mut p = [0.0, 0.0];
        for (len, qi) in self.links.iter().zip(q) {
            angle += qi;
            p[0] += len * angle.cos();
            p[1] += len * angle.sin();
        }
        p
    }

    /// Base, elbow, wrist and end-effector positions.
    pub fn joint_positions(&self, q: [f64; 3]) -> [[f64; 2]; 4] {
        let mut pts = [[0.0; 2]; 4];
        let mut angle = 0.0;
        for i in 0..3 {
            angle += q[i];
            pts[i + 1] = [
                pts[i][0] + self.links[i] * angle.cos(),
                pts[i][1] + self.links[i] * angle.sin(),
            ];
        }
        pts
    }

    pub fn clamp_joint(&self, joint: usize, value: f64) -> f64 {
        let [lo, hi] = self.joint_limits[joint];
        value.clamp(lo, hi)
    }

    pub fn apply_action(&self, state: &SceneState, action: ReachAction) -> SceneState {
        let mut q = state.q;
        let j = action.joint();
        q[j] = self.clamp_joint(j, q[j] + action.delta());
        SceneState { q, target: state.target }
    }

    pub fn distance(&self, state: &SceneState) -> f64 {
        let x = self.forward_kinematics(state.q);
        (x[0] - state.target[0]).hypot(x[1] - state.target[1])
    }

    pub fn reward(&self, state: &SceneState) -> f64 {
        if self.distance(state) < REWARD_RADIUS {
            1.0
        } else {
            0.0
        }
    }

    /// Joints uniform over `start_limits`; target uniform over the annulus
    /// `target_radius` intersected with `viewport`, rejection-sampled until
    /// the initial distance lies within `initial_distance`.
    pub fn sample_task<R: Rng + ?Sized>(&self, rng: &mut R, viewport: &Viewport) -> Result<SceneState, SimError> {
        const MAX_DRAWS: usize = 10_000;
        let [r_in, r_out] = self.target_radius;
        let [d_lo, d_hi] = self.initial_distance;
        let mut q = [0.0; 3];
        let mut ee = [0.0; 2];
        for draw in 0..MAX_DRAWS {
            // fresh start configuration every 100 target draws
            if draw % 100 == 0 {
                q = [0, 1, 2].map(|j| {
                    let [lo, hi] = self.start_limits[j];
                    self.clamp_joint(j, rng.random_range(lo..=hi))
                });
                ee = self.forward_kinematics(q);
            }
            let t = [rng.random_range(-r_out..=r_out), rng.random_range(-r_out..=r_out)];
            let r = t[0].hypot(t[1]);
            if r < r_in || r > r_out || !viewport.contains(t) {
                continue;
            }
            let d = (ee[0] - t[0]).hypot(ee[1] - t[1]);
            if d < d_lo || d > d_hi {
                continue;
            }
            return Ok(SceneState { q, target: t });
        }
        Err(SimError::Sampling(MAX_DRAWS))
    }

    /// One-step lookahead: the action whose successor is closest to the
    /// target; ties go to the lowest id.
    pub fn guided_action(&self, state: &SceneState) -> ReachAction {
        let mut best = ReachAction::ALL[0];
        let mut best_d = f64::INFINITY;
        for a in ReachAction::ALL {
            let d = self.distance(&self.apply_action(state, a));
            if d < best_d {
                best_d = d;
                best = a;
            }
        }
        best
    }

    /// Fixed-horizon rollout; `policy` returns a canonical action id.
    pub fn run_episode<P>(&self, mut policy: P, task: SceneState, max_steps: usize) -> Result<Vec<Transition>, SimError>
    where
        P: FnMut(&SceneState) -> Result<usize, SimError>,
    {
        if max_steps == 0 {
            return Err(SimError::EmptyEpisode);
        }
        let mut state = task;
        let mut out = Vec::with_capacity(max_steps);
        for step in 0..max_steps {
            let action = ReachAction::from_id(policy(&state)?)?;
            let next = self.apply_action(&state, action);
            out.push(Transition {
                before: state,
                action,
                reward: self.reward(&next),
                after: next,
                terminal: step + 1 == max_steps,
            });
            state = next;
        }
        Ok(out)
    }
}

/// Axis-aligned square region of the plane seen by the camera.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Viewport {
    pub center: [f64; 2],
    pub width: f64,
}

impl Default for Viewport {
    fn default() -> Self {
        Self {
            center: [0.0, 0.0],
            width: 2.0,
        }
    }
}

impl Viewport {
    pub fn min(&self) -> [f64; 2] {
        [self.center[0] - self.width / 2.0, self.center[1] - self.width / 2.0]
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let half = self.width / 2.0;
        (p[0] - self.center[0]).abs() <= half && (p[1] - self.center[1]).abs() <= half
    }
}

/// Ground truth of one task instance. The end-effector position is always
/// derived from `q`, never stored.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub q: [f64; 3],
    pub target: [f64; 2],
}

impl SceneState {
    pub fn end_effector(&self, arm: &ArmModel) -> [f64; 2] {
        arm.forward_kinematics(self.q)
    }
}

/// One of the nine canonical actions: `id = 3 * joint + code`, where code 0
/// increases the joint, 1 decreases it and 2 leaves it unchanged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ReachAction(u8);

impl ReachAction {
    pub const ALL: [ReachAction; NUM_ACTIONS] = [
        ReachAction(0),
        ReachAction(1),
        ReachAction(2),
        ReachAction(3),
        ReachAction(4),
        ReachAction(5),
        ReachAction(6),
        ReachAction(7),
        ReachAction(8),
    ];

    pub fn from_id(id: usize) -> Result<Self, SimError> {
        if id < NUM_ACTIONS {
            Ok(Self(id as u8))
        } else {
            Err(SimError::InvalidAction(id))
        }
    }

    pub fn new(joint: usize, delta_sign: i8) -> Self {
        assert!(joint < 3, "joint index out of range");
        let code = match delta_sign.signum() {
            1 => 0,
            -1 => 1,
            _ => 2,
        };
        Self((3 * joint + code) as u8)
    }

    pub fn id(self) -> usize {
        self.0 as usize
    }

    pub fn joint(self) -> usize {
        self.0 as usize / 3
    }

    pub fn delta(self) -> f64 {
        match self.0 % 3 {
            0 => ACTION_DELTA,
            1 => -ACTION_DELTA,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub before: SceneState,
    pub action: ReachAction,
    pub reward: f64,
    pub after: SceneState,
    pub terminal: bool,
}
