//! Multi-trajectory REINFORCE with a shared per-instance baseline and
//! leader weighting.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::policy::{self, DecodeMode, PolicyConfig, PolicyParams, Starts};
use super::tape::{Real, Tape};
use super::{featurize, solve_orders};
use crate::error::{Error, Result};
use crate::heuristic::HeuristicConfig;
use crate::instgen::{generate_instance, GeneratorConfig};
use crate::matrix::Matrix;
use crate::model::ProblemInstance;
use crate::rng::{self, tags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier on the best trajectory's advantage; 1 gives plain
    /// shared-baseline REINFORCE.
    pub leader_weight: f64,
    /// Draw training instances from a fixed pool of this size instead of
    /// generating fresh ones every epoch.
    pub pool_size: Option<usize>,
    pub generator: GeneratorConfig,
    pub heuristic: HeuristicConfig,
    pub policy: PolicyConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: 1e-4,
            leader_weight: 2.0,
            pool_size: None,
            generator: GeneratorConfig::default(),
            heuristic: HeuristicConfig::default(),
            policy: PolicyConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.leader_weight >= 1.0) {
            return Err(Error::Config("leader_weight must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.pool_size == Some(0) {
            return Err(Error::Config("pool_size must be at least 1".into()));
        }
        self.policy.validate()?;
        self.generator.validate()
    }
}

/// Rollouts of one instance: `N` permutations and their rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRollout {
    pub features: Matrix<f64>,
    pub orders: Vec<Vec<usize>>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
}

impl InstanceRollout {
    /// Mean reward, the shared baseline.
    pub fn baseline(&self) -> f64 {
        mean_reward(&self.rewards)
    }
}

/// Mean taken relative to the first entry, so equal rewards give exactly
/// that reward back.
fn mean_reward(rewards: &[f64]) -> f64 {
    let Some(&r0) = rewards.first() else {
        return 0.0;
    };
    r0 + rewards.iter().map(|r| r - r0).sum::<f64>() / rewards.len() as f64
}

/// `reward − mean`, with the first best trajectory's value multiplied by
/// `leader_weight`.
pub fn advantages(rewards: &[f64], leader_weight: f64) -> Vec<f64> {
    let b = mean_reward(rewards);
    let mut adv: Vec<f64> = rewards.iter().map(|r| r - b).collect();
    let mut leader = 0;
    for (j, &r) in rewards.iter().enumerate() {
        if r > rewards[leader] {
            leader = j;
        }
    }
    if let Some(a) = adv.get_mut(leader) {
        *a *= leader_weight;
    }
    adv
}

/// Samples multi-start trajectories for `inst` and solves each order.
pub fn rollout_instance(
    inst: &ProblemInstance,
    params: &PolicyParams<f64>,
    heuristic: HeuristicConfig,
    seed: u64,
) -> Result<InstanceRollout> {
    let features = featurize(inst);
    let r = policy::decode_rollout(params, &features, Starts::MultiStart, DecodeMode::Sample, seed)?;
    let solutions = solve_orders(inst, &r.orders, heuristic)?;
    Ok(InstanceRollout {
        features,
        orders: r.orders,
        log_probs: r.log_probs,
        rewards: solutions.iter().map(|s| -s.breakdown.augmented).collect(),
    })
}

/// Surrogate loss `−(1/BN) Σ A log p` of a frozen batch and its gradient
/// with respect to every tensor. Minimizing it ascends the policy
/// objective.
pub fn surrogate_gradient<T: Real>(
    params: &PolicyParams<T>,
    batch: &[InstanceRollout],
    leader_weight: f64,
) -> Result<(f64, Vec<Matrix<T>>)> {
    params.check()?;
    let per_instance = |ro: &InstanceRollout| -> Result<(f64, Vec<Matrix<T>>)> {
        let n = ro.orders.len();
        let adv = advantages(&ro.rewards, leader_weight);
        let denom = (batch.len() * n) as f64;
        let weights = Matrix::from_vec(n, 1, adv.iter().map(|a| -a / denom).collect()).expect("column");
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let logp = policy::log_probs_of(&mut tape, &bound, &ro.features, &ro.orders, Starts::MultiStart)?;
        let loss = tape.dot(logp, weights);
        let grads = tape.backward(loss);
        let tensors = bound
            .vars
            .iter()
            .zip(&params.tensors)
            .map(|(v, t)| {
                grads
                    .get(v.index())
                    .cloned()
                    .flatten()
                    .unwrap_or_else(|| Matrix::filled(t.rows(), t.cols(), T::zero()))
            })
            .collect();
        Ok((tape.value(loss)[(0, 0)].f64(), tensors))
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<(f64, Vec<Matrix<T>>)> = {
        use rayon::prelude::*;
        batch.par_iter().map(per_instance).collect::<Result<_>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<(f64, Vec<Matrix<T>>)> = batch.iter().map(per_instance).collect::<Result<_>>()?;

    let mut total = 0.0;
    let mut sum: Vec<Matrix<T>> = params
        .tensors
        .iter()
        .map(|t| Matrix::filled(t.rows(), t.cols(), T::zero()))
        .collect();
    for (loss, grads) in parts {
        total += loss;
        for (acc, g) in sum.iter_mut().zip(grads) {
            for (a, b) in acc.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += *b;
            }
        }
    }
    Ok((total, sum))
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &PolicyParams<f32>, learning_rate: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.as_slice().len()]).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One descent step on `grads`.
    pub fn update(&mut self, params: &mut PolicyParams<f32>, grads: &[Matrix<f64>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (tensor, g)) in params.tensors.iter_mut().zip(grads).enumerate() {
            for (j, (w, &gv)) in tensor.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                let step = self.learning_rate * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = (f64::from(*w) - step) as f32;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

/// Computes the surrogate gradient of `batch` and applies one Adam step.
/// Parameters are left untouched when the gradient is not finite.
pub fn policy_gradient_step(
    params: &mut PolicyParams<f32>,
    adam: &mut Adam,
    batch: &[InstanceRollout],
    leader_weight: f64,
) -> Result<StepStats> {
    if !(leader_weight >= 1.0) {
        return Err(Error::Config("leader_weight must be at least 1".into()));
    }
    let (loss, grads) = surrogate_gradient(&params.cast::<f64>(), batch, leader_weight)?;
    let sq: f64 = grads.iter().flat_map(|g| g.as_slice()).map(|v| v * v).sum();
    if !loss.is_finite() || !sq.is_finite() {
        return Err(Error::NonFinitePolicy("gradient".into()));
    }
    adam.update(params, &grads);
    Ok(StepStats {
        loss,
        grad_norm: sq.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_reward: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: PolicyParams<f32>,
    pub curve: Vec<EpochRecord>,
}

/// Seed of training instance `index` (global across epochs).
pub fn training_instance_seed(seed: u64, index: u64) -> u64 {
    rng::derive_seed(rng::derive_seed(seed, tags::TRAIN_INSTANCES), index)
}

/// Trains from `init` (or fresh weights). `on_epoch` sees every record as
/// it is produced.
pub fn train(
    config: &TrainConfig,
    init: Option<PolicyParams<f32>>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut params = match init {
        Some(p) => {
            p.check()?;
            p
        }
        None => PolicyParams::init(config.policy, config.seed)?,
    };
    let mut adam = Adam::new(&params, config.learning_rate);
    let pool: Option<Vec<ProblemInstance>> = match config.pool_size {
        Some(n) => Some(
            (0..n as u64)
                .map(|i| {
                    generate_instance(&config.generator, training_instance_seed(config.seed, i))
                        .map_err(|e| e.context(format!("pool instance {i}")))
                })
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    let rollout_seed = rng::derive_seed(config.seed, tags::ROLLOUT);
    let b = config.batch_size;
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let current = params.cast::<f64>();
        let mut batch = Vec::with_capacity(b);
        for i in 0..b {
            let global = (epoch * b + i) as u64;
            let ctx = |e: Error| e.context(format!("epoch {epoch}, instance {i}"));
            let generated;
            let inst = match &pool {
                Some(pool) => &pool[global as usize % pool.len()],
                None => {
                    generated = generate_instance(&config.generator, training_instance_seed(config.seed, global))
                        .map_err(ctx)?;
                    &generated
                }
            };
            let seed = rng::derive_seed(rollout_seed, global);
            batch.push(rollout_instance(inst, &current, config.heuristic, seed).map_err(ctx)?);
        }
        let total: f64 = batch.iter().flat_map(|r| &r.rewards).sum();
        let count: usize = batch.iter().map(|r| r.rewards.len()).sum();
        let stats = policy_gradient_step(&mut params, &mut adam, &batch, config.leader_weight)
            .map_err(|e| e.context(format!("epoch {epoch}")))?;
        let record = EpochRecord {
            epoch,
            mean_reward: total / count as f64,
            loss: stats.loss,
        };
        on_epoch(&record);
        curve.push(record);
    }
    Ok(TrainOutcome { params, curve })
}

/// Training curve as CSV with columns `epoch,mean_reward,loss`.
pub fn write_curve_csv(w: impl Write, curve: &[EpochRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in curve {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
