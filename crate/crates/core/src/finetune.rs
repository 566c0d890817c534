//! End-to-end fine-tuning of the combined perception + control network.
//!
//! Control is updated with `δ_Lq` alone. Perception is updated with
//! `β·δ_Lp + (1−β)·δ_Lq^BN`, where `δ_Lq^BN` is the task loss gradient that
//! reaches the perception parameters through the bottleneck.

use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{
    bellman_target, greedy_action, q_values, td_loss_with_targets, ControlError, ControlNet, ReplayBuffer,
    ThetaTransition, SNAPSHOT_EVAL_SEED,
};
use crate::eval::{run_campaign, summarize, CampaignSummary, EvalError};
use crate::nn::{Checkpoint, GradSet, NamedNetwork, NnError};
use crate::perception::{frame_input, perception_loss, LinearDecay, PerceptionBatch, PerceptionError, PerceptionNet};
use crate::render::{normalize_theta, render, Camera, Dataset, Domain, ImageFrame, ThetaVec};
use crate::sim::{ArmModel, ReachAction, SceneState, SimError, HORIZON, NUM_ACTIONS};

#[derive(Debug, Error)]
pub enum FinetuneError {
    #[error("invalid fine-tuning config: {0}")]
    Config(String),
    #[error("gradient sets differ in length: {0} vs {1}")]
    GradShape(usize, usize),
    #[error("replay holds {have} transitions, warm-up needs {need}")]
    Underfull { have: usize, need: usize },
    #[error("not enough pseudo-real frames: need {needed}, have {available}")]
    Insufficient { needed: usize, available: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CombinedPolicy {
    pub perception: PerceptionNet,
    pub control: ControlNet,
}

pub const PERCEPTION_NAME: &str = "perception";
pub const CONTROL_NAME: &str = "control";

impl CombinedPolicy {
    pub fn to_checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint {
            seed,
            networks: vec![
                NamedNetwork {
                    name: PERCEPTION_NAME.into(),
                    network: self.perception.net.clone(),
                },
                NamedNetwork {
                    name: CONTROL_NAME.into(),
                    network: self.control.net.clone(),
                },
            ],
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, FinetuneError> {
        let perception = PerceptionNet::from_network(ck.get(PERCEPTION_NAME).map_err(cfg)?.clone())?;
        let control = ControlNet::from_network(ck.get(CONTROL_NAME).map_err(cfg)?.clone())?;
        Ok(Self { perception, control })
    }

    /// Greedy action on the rendered sim frame of `state`.
    pub fn act(&self, state: &SceneState, arm: &ArmModel, camera: &Camera) -> ReachAction {
        greedy_action(&combined_q(self, &render(state, arm, camera)))
    }
}

fn cfg(e: impl std::fmt::Display) -> FinetuneError {
    FinetuneError::Config(e.to_string())
}

/// `q_values(control, perceive(perception, frame))`.
pub fn combined_q(policy: &CombinedPolicy, frame: &ImageFrame) -> [f32; NUM_ACTIONS] {
    q_values(&policy.control, &policy.perception.perceive(frame))
}

/// `β·gp + (1−β)·gq` element-wise; the endpoints return an input unchanged.
pub fn mix_gradients(gp: &GradSet, gq: &GradSet, beta: f64) -> Result<GradSet, FinetuneError> {
    if gp.len() != gq.len() {
        return Err(FinetuneError::GradShape(gp.len(), gq.len()));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(FinetuneError::Config(format!("beta must lie in [0, 1], got {beta}")));
    }
    if beta == 1.0 {
        return Ok(gp.clone());
    }
    if beta == 0.0 {
        return Ok(gq.clone());
    }
    let (b, c) = (beta as f32, (1.0 - beta) as f32);
    Ok(GradSet {
        values: gp.values.iter().zip(&gq.values).map(|(p, q)| b * p + c * q).collect(),
    })
}

/// Transition whose observations are sim frames; `theta` labels `frame`.
#[derive(Clone, Debug)]
pub struct FrameTransition {
    pub id: u64,
    pub frame: Arc<ImageFrame>,
    pub theta: ThetaVec,
    pub action: ReachAction,
    pub reward: f64,
    pub next_frame: Arc<ImageFrame>,
    pub terminal: bool,
}

#[derive(Clone, Debug)]
pub struct TaskGrads {
    pub control: GradSet,
    pub perception: GradSet,
    pub loss: f64,
    pub mean_max_q: f64,
}

/// δ_Lq over control parameters and its bottleneck backprop over perception
/// parameters. Θ_t comes from a live perception pass; the Bellman target uses
/// the current perception and `target` control with gradients blocked.
pub fn backprop_task_to_perception(
    policy: &CombinedPolicy,
    target: &ControlNet,
    batch: &[&FrameTransition],
    gamma: f64,
) -> Result<TaskGrads, FinetuneError> {
    let mut tapes = Vec::with_capacity(batch.len());
    let mut thetas = Vec::with_capacity(batch.len());
    let mut ys = Vec::with_capacity(batch.len());
    for t in batch {
        let (out, tape) = policy.perception.net.forward_slice(&frame_input(&t.frame))?;
        let next = policy.perception.perceive(&t.next_frame);
        ys.push(bellman_target(t.reward, &q_values(target, &next), gamma, t.terminal));
        thetas.push(ThetaTransition {
            theta: ThetaVec::from_f32(&out.data),
            action: t.action,
            reward: t.reward,
            next_theta: next,
            terminal: t.terminal,
        });
        tapes.push(tape);
    }
    let td = td_loss_with_targets(&policy.control, &thetas, &ys)?;
    let mut perception = policy.perception.net.zero_grads();
    for (tape, g) in tapes.iter().zip(&td.bottleneck) {
        policy.perception.net.backward_into(tape, g, &mut perception, false)?;
    }
    Ok(TaskGrads {
        control: td.grads,
        perception,
        loss: td.loss,
        mean_max_q: td.mean_max_q,
    })
}

/// Source of the ε-fraction of behavior actions during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exploration {
    /// Uniform over the nine actions.
    Random,
    /// The kinematic oracle on the true scene.
    Guided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub beta: f64,
    pub task_batch: usize,
    pub perception_batch: usize,
    pub real_fraction: f64,
    pub control_lr: LinearDecay,
    pub perception_lr: LinearDecay,
    pub gamma: f64,
    pub epsilon: f64,
    pub exploration: Exploration,
    pub steps: usize,
    /// Env steps collected before the first update.
    pub warmup: usize,
    /// Env steps collected between consecutive updates.
    pub rollout_per_step: usize,
    pub replay_capacity: usize,
    pub target_sync: usize,
    pub bootstrap_horizon: bool,
    pub eval_every: usize,
    pub eval_trials: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            beta: 0.8,
            task_batch: 64,
            perception_batch: 256,
            real_fraction: 0.75,
            control_lr: LinearDecay { start: 0.01, end: 0.001 },
            perception_lr: LinearDecay { start: 0.01, end: 0.001 },
            gamma: 0.9,
            epsilon: 0.1,
            exploration: Exploration::Random,
            steps: 2000,
            warmup: 2000,
            rollout_per_step: 1,
            replay_capacity: 20_000,
            target_sync: 250,
            bootstrap_horizon: true,
            eval_every: 250,
            eval_trials: 100,
            seed: 1,
        }
    }
}

impl FinetuneConfig {
    pub fn n_real(&self) -> usize {
        (self.perception_batch as f64 * self.real_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<(), FinetuneError> {
        let bad = |m: String| Err(FinetuneError::Config(m));
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.epsilon) {
            return bad("gamma must lie in [0, 1) and epsilon in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.real_fraction) {
            return bad(format!("real_fraction must lie in [0, 1], got {}", self.real_fraction));
        }
        if self.task_batch == 0 || self.perception_batch != self.task_batch + self.n_real() {
            return bad(format!(
                "perception batch {} must be the task batch {} plus {} pseudo-real frames",
                self.perception_batch,
                self.task_batch,
                self.n_real()
            ));
        }
        if self.replay_capacity < self.task_batch || self.warmup < self.task_batch {
            return bad("replay capacity and warm-up must cover one task batch".into());
        }
        if self.target_sync == 0 || self.rollout_per_step == 0 {
            return bad("target_sync and rollout_per_step must be positive".into());
        }
        Ok(())
    }
}

/// What one update consumed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub task_ids: Vec<u64>,
    /// Source transition ids of the sim frames in the perception batch.
    pub perception_sim_ids: Vec<u64>,
    pub n_pseudo_real: usize,
    pub n_perception: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub loss_q: f64,
    pub loss_p: f64,
    pub beta: f64,
}

/// Mutable state of a fine-tuning run.
pub struct Finetuner<'a> {
    pub policy: CombinedPolicy,
    pub target: ControlNet,
    pub replay: ReplayBuffer<FrameTransition>,
    pub config: FinetuneConfig,
    arm: &'a ArmModel,
    camera: &'a Camera,
    dataset: &'a Dataset,
    real_pool: Vec<usize>,
    rng: ChaCha8Rng,
    state: SceneState,
    frame: Arc<ImageFrame>,
    episode_step: usize,
    next_id: u64,
    updates: usize,
}

impl<'a> Finetuner<'a> {
    pub fn new(
        policy: CombinedPolicy,
        arm: &'a ArmModel,
        camera: &'a Camera,
        dataset: &'a Dataset,
        real_pool: Vec<usize>,
        config: FinetuneConfig,
    ) -> Result<Self, FinetuneError> {
        config.validate()?;
        if real_pool.len() < config.n_real() {
            return Err(FinetuneError::Insufficient {
                needed: config.n_real(),
                available: real_pool.len(),
            });
        }
        if let Some(&i) = real_pool.iter().find(|&&i| dataset.items[i].frame.domain != Domain::PseudoReal) {
            return Err(FinetuneError::Config(format!("dataset item {i} in the real pool is not pseudo-real")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(3);
        let state = arm.sample_task(&mut rng, &camera.viewport)?;
        let frame = Arc::new(render(&state, arm, camera));
        Ok(Self {
            target: policy.control.clone(),
            policy,
            replay: ReplayBuffer::new(config.replay_capacity),
            config,
            arm,
            camera,
            dataset,
            real_pool,
            rng,
            state,
            frame,
            episode_step: 0,
            next_id: 0,
            updates: 0,
        })
    }

    /// One env step of the combined policy (ε-exploratory, else greedy on the frame).
    pub fn collect(&mut self) {
        let action = if self.config.epsilon > 0.0 && self.rng.random::<f64>() < self.config.epsilon {
            match self.config.exploration {
                Exploration::Random => ReachAction::ALL[self.rng.random_range(0..NUM_ACTIONS)],
                Exploration::Guided => self.arm.guided_action(&self.state),
            }
        } else {
            greedy_action(&combined_q(&self.policy, &self.frame))
        };
        let next = self.arm.apply_action(&self.state, action);
        let next_frame = Arc::new(render(&next, self.arm, self.camera));
        self.episode_step += 1;
        let terminal = self.episode_step == HORIZON;
        self.replay.push(FrameTransition {
            id: self.next_id,
            frame: Arc::clone(&self.frame),
            theta: normalize_theta(&self.state, self.arm, self.camera),
            action,
            reward: self.arm.reward(&next),
            next_frame: Arc::clone(&next_frame),
            terminal: terminal && !self.config.bootstrap_horizon,
        });
        self.next_id += 1;
        if terminal {
            self.episode_step = 0;
            self.state = self
                .arm
                .sample_task(&mut self.rng, &self.camera.viewport)
                .expect("task distribution sampled once already");
            self.frame = Arc::new(render(&self.state, self.arm, self.camera));
        } else {
            self.state = next;
            self.frame = next_frame;
        }
    }

    pub fn warm_up(&mut self) {
        while self.replay.len() < self.config.warmup.min(self.config.replay_capacity) && (self.next_id as usize) < self.config.warmup {
            self.collect();
        }
    }

    /// One update at schedule position `step` of `steps`.
    pub fn step(&mut self, step: usize) -> Result<(StepLog, StepRecord), FinetuneError> {
        let cfgn = &self.config;
        if self.replay.len() < cfgn.task_batch.max(cfgn.warmup.min(cfgn.replay_capacity)) {
            return Err(FinetuneError::Underfull {
                have: self.replay.len(),
                need: cfgn.warmup.min(cfgn.replay_capacity),
            });
        }
        let idx = self.replay.sample_indices(cfgn.task_batch, &mut self.rng);
        let batch: Vec<&FrameTransition> = idx.iter().map(|&i| self.replay.get(i)).collect();
        let task = backprop_task_to_perception(&self.policy, &self.target, &batch, cfgn.gamma)?;

        let mut items: Vec<(&ImageFrame, ThetaVec)> = Vec::with_capacity(cfgn.perception_batch);
        let mut sources: Vec<Option<u64>> = Vec::with_capacity(cfgn.perception_batch);
        for t in &batch {
            items.push((&t.frame, t.theta));
            sources.push(Some(t.id));
        }
        for i in index::sample(&mut self.rng, self.real_pool.len(), cfgn.n_real()) {
            let s = &self.dataset.items[self.real_pool[i]];
            items.push((&s.frame, s.theta));
            sources.push(None);
        }
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut self.rng);
        let pbatch = PerceptionBatch {
            items: order.iter().map(|&k| items[k]).collect(),
            n_sim: cfgn.task_batch,
            n_pseudo_real: cfgn.n_real(),
        };
        let (loss_p, grads_p) = perception_loss(&self.policy.perception, &pbatch)?;
        let record = StepRecord {
            task_ids: batch.iter().map(|t| t.id).collect(),
            perception_sim_ids: order.iter().filter_map(|&k| sources[k]).collect(),
            n_pseudo_real: pbatch
                .items
                .iter()
                .filter(|(f, _)| f.domain == Domain::PseudoReal)
                .count(),
            n_perception: pbatch.len(),
        };
        let mixed = mix_gradients(&grads_p, &task.perception, cfgn.beta)?;
        if !(task.loss.is_finite() && loss_p.is_finite() && mixed.is_finite() && task.control.is_finite()) {
            return Err(FinetuneError::Nn(NnError::NonFinite("fine-tuning loss")));
        }

        let lr_c = cfgn.control_lr.at(step, cfgn.steps) as f32;
        let lr_p = cfgn.perception_lr.at(step, cfgn.steps) as f32;
        if lr_c > 0.0 {
            self.policy.control.net.sgd_update(&task.control, lr_c)?;
        }
        if lr_p > 0.0 {
            self.policy.perception.net.sgd_update(&mixed, lr_p)?;
        }
        self.updates += 1;
        if self.updates % cfgn.target_sync == 0 {
            self.target = self.policy.control.clone();
        }
        let log = StepLog {
            loss_q: task.loss,
            loss_p,
            beta: cfgn.beta,
        };
        Ok((log, record))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLogRow {
    pub step: usize,
    #[serde(rename = "L_p")]
    pub loss_p: f64,
    #[serde(rename = "L_q")]
    pub loss_q: f64,
    pub eval_rbar: Option<f64>,
    pub eval_d_med_cm: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct FinetuneRun {
    /// Best snapshot by evaluated R̄ (step 0 included).
    pub best: CombinedPolicy,
    pub best_step: usize,
    pub last: CombinedPolicy,
    pub log: Vec<FinetuneLogRow>,
    /// Step at which a non-finite update stopped the run.
    pub diverged_at: Option<usize>,
}

/// Greedy combined policy over rendered sim frames.
pub fn snapshot_summary(
    policy: &CombinedPolicy,
    arm: &ArmModel,
    camera: &Camera,
    trials: usize,
    seed: u64,
) -> Result<CampaignSummary, FinetuneError> {
    let c = run_campaign(arm, camera, |s| Ok(policy.act(s, arm, camera)), trials, seed)?;
    Ok(summarize(&c.reports, camera)?)
}

pub fn finetune(
    initial: CombinedPolicy,
    arm: &ArmModel,
    camera: &Camera,
    dataset: &Dataset,
    real_pool: Vec<usize>,
    config: &FinetuneConfig,
) -> Result<FinetuneRun, FinetuneError> {
    let mut ft = Finetuner::new(initial, arm, camera, dataset, real_pool, config.clone())?;
    let mut log = Vec::new();
    if config.steps == 0 {
        return Ok(FinetuneRun {
            best: ft.policy.clone(),
            best_step: 0,
            last: ft.policy,
            log,
            diverged_at: None,
        });
    }
    let evaluate = |p: &CombinedPolicy| -> Result<Option<CampaignSummary>, FinetuneError> {
        if config.eval_trials == 0 {
            return Ok(None);
        }
        snapshot_summary(p, arm, camera, config.eval_trials, SNAPSHOT_EVAL_SEED).map(Some)
    };
    let first = evaluate(&ft.policy)?;
    log.push(FinetuneLogRow {
        step: 0,
        loss_p: f64::NAN,
        loss_q: f64::NAN,
        eval_rbar: first.as_ref().map(|s| s.rbar),
        eval_d_med_cm: first.as_ref().map(|s| s.d_med_cm),
    });
    let mut best = (ft.policy.clone(), 0usize, first.map_or(f64::NEG_INFINITY, |s| s.rbar));
    let mut diverged_at = None;
    ft.warm_up();
    let (mut acc_p, mut acc_q, mut acc_n) = (0.0, 0.0, 0usize);
    for step in 0..config.steps {
        for _ in 0..config.rollout_per_step {
            ft.collect();
        }
        match ft.step(step) {
            Ok((row, _)) => {
                acc_p += row.loss_p;
                acc_q += row.loss_q;
                acc_n += 1;
            }
            Err(FinetuneError::Nn(NnError::NonFinite(_))) => {
                diverged_at = Some(step);
                log.push(FinetuneLogRow {
                    step,
                    loss_p: f64::NAN,
                    loss_q: f64::NAN,
                    eval_rbar: None,
                    eval_d_med_cm: None,
                });
                break;
            }
            Err(e) => return Err(e),
        }
        let done = step + 1;
        let eval_due = config.eval_every > 0 && (done % config.eval_every == 0 || done == config.steps);
        if eval_due {
            let s = evaluate(&ft.policy)?;
            let n = acc_n.max(1) as f64;
            log.push(FinetuneLogRow {
                step: done,
                loss_p: acc_p / n,
                loss_q: acc_q / n,
                eval_rbar: s.as_ref().map(|s| s.rbar),
                eval_d_med_cm: s.as_ref().map(|s| s.d_med_cm),
            });
            (acc_p, acc_q, acc_n) = (0.0, 0.0, 0);
            if let Some(s) = s {
                if s.rbar > best.2 {
                    best = (ft.policy.clone(), done, s.rbar);
                }
            }
        }
    }
    if config.eval_trials == 0 {
        best = (ft.policy.clone(), config.steps, f64::NAN);
    }
    Ok(FinetuneRun {
        best: best.0,
        best_step: best.1,
        last: ft.policy,
        log,
        diverged_at,
    })
}
