//! Perception network `y(I) → Θ` trained under the half mean squared error
//! with mixed-domain mini-batches.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Activation, GradSet, LayerSpec, Network, NnError, Shape};
use crate::render::{Dataset, Domain, ImageFrame, ThetaVec, RESOLUTION};

#[derive(Debug, Error)]
pub enum PerceptionError {
    #[error("batch needs at least one sample")]
    EmptyBatch,
    #[error("not enough {domain:?} samples: need {needed}, have {available}")]
    Insufficient {
        domain: Domain,
        needed: usize,
        available: usize,
    },
    #[error("real fraction must be in [0, 1], got {0}")]
    Fraction(f64),
    #[error("perception training diverged at step {step}: {reason}")]
    Divergence { step: usize, reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Conv(1→8, k8, s4) → Conv(8→16, k4, s2) → Conv(16→16, k3, s1) → FC(784→5, sigmoid).
pub fn perception_layers() -> Vec<LayerSpec> {
    vec![
        LayerSpec::conv(1, 8, 8, 4, Activation::Relu),
        LayerSpec::conv(8, 16, 4, 2, Activation::Relu),
        LayerSpec::conv(16, 16, 3, 1, Activation::Relu),
        LayerSpec::dense(16 * 7 * 7, 5, Activation::Sigmoid),
    ]
}

pub const INPUT_SHAPE: Shape = Shape::new(1, RESOLUTION, RESOLUTION);

/// Network input for a frame: inverted intensities, so the background is 0.
pub fn frame_input(frame: &ImageFrame) -> Vec<f32> {
    frame.values().map(|v| 1.0 - v).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerceptionNet {
    pub net: Network,
}

impl PerceptionNet {
    pub fn new(seed: u64) -> Self {
        let mut net = Network::new(INPUT_SHAPE, perception_layers()).expect("static architecture is valid");
        net.init_glorot(&mut ChaCha8Rng::seed_from_u64(seed));
        Self { net }
    }

    pub fn from_network(net: Network) -> Result<Self, NnError> {
        if net.input_shape() != INPUT_SHAPE || net.layers() != perception_layers().as_slice() {
            return Err(NnError::Config {
                layer: 0,
                message: "network is not a perception architecture".into(),
            });
        }
        Ok(Self { net })
    }

    pub fn perceive(&self, frame: &ImageFrame) -> ThetaVec {
        let out = self.net.predict(&frame_input(frame)).expect("frame size is fixed");
        ThetaVec::from_f32(&out)
    }
}

#[derive(Clone, Debug)]
pub struct PerceptionBatch<'a> {
    pub items: Vec<(&'a ImageFrame, ThetaVec)>,
    pub n_sim: usize,
    pub n_pseudo_real: usize,
}

impl PerceptionBatch<'_> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// `L_p = 1/(2m) Σ ‖y(I) − Θ‖²` and its parameter gradient.
pub fn perception_loss(net: &PerceptionNet, batch: &PerceptionBatch<'_>) -> Result<(f64, GradSet), PerceptionError> {
    if batch.is_empty() {
        return Err(PerceptionError::EmptyBatch);
    }
    let m = batch.len() as f32;
    let mut grads = net.net.zero_grads();
    let mut loss = 0.0f64;
    for (frame, theta) in &batch.items {
        let (out, tape) = net.net.forward_slice(&frame_input(frame))?;
        let target = theta.to_f32();
        let mut upstream = [0.0f32; 5];
        for k in 0..5 {
            let e = out.data[k] - target[k];
            loss += (e as f64) * (e as f64);
            upstream[k] = e / m;
        }
        net.net.backward_into(&tape, &upstream, &mut grads, false)?;
    }
    Ok((loss / (2.0 * batch.len() as f64), grads))
}

/// Index pools of a dataset split into training and held-out parts.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train_sim: Vec<usize>,
    pub train_real: Vec<usize>,
    pub val_sim: Vec<usize>,
    pub val_real: Vec<usize>,
}

/// Holds out the last `val_fraction` of each domain.
pub fn split_dataset(dataset: &Dataset, val_fraction: f64) -> DatasetSplit {
    let cut = |v: Vec<usize>| {
        let n_val = (v.len() as f64 * val_fraction).round() as usize;
        let n_train = v.len() - n_val;
        (v[..n_train].to_vec(), v[n_train..].to_vec())
    };
    let (train_sim, val_sim) = cut(dataset.indices(Domain::Sim));
    let (train_real, val_real) = cut(dataset.indices(Domain::PseudoReal));
    DatasetSplit {
        train_sim,
        train_real,
        val_sim,
        val_real,
    }
}

/// Exactly `round(m · real_fraction)` pseudo-real items plus the remainder
/// from sim, each drawn without replacement from its pool, then shuffled.
pub fn make_mixed_batch<'a, R: Rng + ?Sized>(
    dataset: &'a Dataset,
    sim_pool: &[usize],
    real_pool: &[usize],
    m: usize,
    real_fraction: f64,
    rng: &mut R,
) -> Result<PerceptionBatch<'a>, PerceptionError> {
    if m == 0 {
        return Err(PerceptionError::EmptyBatch);
    }
    if !(0.0..=1.0).contains(&real_fraction) {
        return Err(PerceptionError::Fraction(real_fraction));
    }
    let n_real = (m as f64 * real_fraction).round() as usize;
    let n_sim = m - n_real;
    let mut items = Vec::with_capacity(m);
    for (pool, n, domain) in [(real_pool, n_real, Domain::PseudoReal), (sim_pool, n_sim, Domain::Sim)] {
        if pool.len() < n {
            return Err(PerceptionError::Insufficient {
                domain,
                needed: n,
                available: pool.len(),
            });
        }
        for i in index::sample(rng, pool.len(), n) {
            let s = &dataset.items[pool[i]];
            items.push((&s.frame, s.theta));
        }
    }
    items.shuffle(rng);
    Ok(PerceptionBatch {
        items,
        n_sim,
        n_pseudo_real: n_real,
    })
}

/// Learning rate decaying linearly from `start` to `end` over `steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearDecay {
    pub start: f64,
    pub end: f64,
}

impl LinearDecay {
    pub fn at(&self, step: usize, steps: usize) -> f64 {
        if steps <= 1 {
            return self.start;
        }
        let t = (step as f64 / (steps - 1) as f64).min(1.0);
        self.start * (1.0 - t) + self.end * t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    pub lr: LinearDecay,
    pub batch_size: usize,
    pub real_fraction: f64,
    pub steps: usize,
    pub seed: u64,
    pub val_fraction: f64,
    pub log_every: usize,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            lr: LinearDecay { start: 2.0, end: 0.2 },
            batch_size: 256,
            real_fraction: 0.75,
            steps: 2000,
            seed: 1,
            val_fraction: 0.1,
            log_every: 50,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionLogRow {
    pub step: usize,
    #[serde(rename = "L_p")]
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct PerceptionRun {
    pub net: PerceptionNet,
    pub log: Vec<PerceptionLogRow>,
    pub split: DatasetSplit,
}

pub fn train_perception(dataset: &Dataset, config: &PerceptionConfig) -> Result<PerceptionRun, PerceptionError> {
    let mut net = PerceptionNet::new(config.seed);
    let split = split_dataset(dataset, config.val_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut log = Vec::new();
    for step in 0..config.steps {
        let batch = make_mixed_batch(
            dataset,
            &split.train_sim,
            &split.train_real,
            config.batch_size,
            config.real_fraction,
            &mut rng,
        )?;
        let (loss, grads) = perception_loss(&net, &batch)?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(PerceptionError::Divergence {
                step,
                reason: format!("loss {loss}"),
            });
        }
        let lr = config.lr.at(step, config.steps);
        net.net
            .sgd_update(&grads, lr as f32)
            .map_err(|e| PerceptionError::Divergence {
                step,
                reason: e.to_string(),
            })?;
        if step % config.log_every.max(1) == 0 || step + 1 == config.steps {
            log.push(PerceptionLogRow { step, loss, lr });
        }
    }
    Ok(PerceptionRun { net, log, split })
}

/// Held-out error summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionEval {
    pub loss: f64,
    pub mean_abs: [f64; 5],
}

pub fn evaluate_perception(net: &PerceptionNet, dataset: &Dataset, indices: &[usize]) -> PerceptionEval {
    let mut sq = 0.0;
    let mut abs = [0.0; 5];
    for &i in indices {
        let s = &dataset.items[i];
        let y = net.perceive(&s.frame);
        for k in 0..5 {
            let e = y.0[k] - s.theta.0[k];
            sq += e * e;
            abs[k] += e.abs();
        }
    }
    let n = indices.len().max(1) as f64;
    PerceptionEval {
        loss: sq / (2.0 * n),
        mean_abs: abs.map(|a| a / n),
    }
}
