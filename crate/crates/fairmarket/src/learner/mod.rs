//! Independent PPO for per-prosumer bidding policies.
//!
//! Each prosumer owns a factored categorical policy with a value baseline and
//! treats all other agents as part of the environment. Training runs one-day
//! episodes with fairness-shaped rewards; evaluation replays frozen policies
//! in deterministic (argmax) mode.

pub mod checkpoint;
pub mod net;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{AgentId, PriceBand, SlotLedger};
use crate::environment::{
    Action, Environment, RawRewards, StorageOp, OBS_LEN, QTY_FRACTIONS, STORAGE_FRACTIONS,
};
use crate::error::{Error, Result};
use crate::fairness::{shape, CriticBackend, ShapingConfig};
use crate::rng::{derive_rng, episode_seed, stream};

pub use net::{clip_grad_norm, Adam, ForwardPass, NetShape, PolicyNet};

const VALUE_LOSS_COEF: f64 = 0.5;

/// PPO hyperparameters and run bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_episodes: u64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_ratio: f64,
    pub learning_rate: f64,
    pub epochs: u32,
    pub minibatch_size: usize,
    pub entropy_coef: f64,
    pub grad_norm_cap: f64,
    pub hidden: usize,
    pub checkpoint_interval: u64,
    /// Master seed; set from the scenario's top-level seed, not from the
    /// `[train]` config section.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_episodes: 10_000,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_ratio: 0.2,
            learning_rate: 3e-4,
            epochs: 4,
            minibatch_size: 256,
            entropy_coef: 0.01,
            grad_norm_cap: 0.5,
            hidden: 64,
            checkpoint_interval: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.clip_ratio > 0.0) {
            return Err(Error::Config("clip_ratio must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("gae_lambda must lie in [0, 1]".into()));
        }
        if self.epochs == 0 || self.minibatch_size == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "epochs, minibatch_size, and hidden must be >= 1".into(),
            ));
        }
        if self.total_episodes == 0 {
            return Err(Error::Config("total_episodes must be >= 1".into()));
        }
        if self.entropy_coef < 0.0 || self.grad_norm_cap < 0.0 {
            return Err(Error::Config(
                "entropy_coef and grad_norm_cap must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Head sizes of the prosumer policy for a given price band.
pub fn prosumer_head_sizes(band: &PriceBand) -> Vec<usize> {
    vec![
        band.levels(),
        QTY_FRACTIONS.len(),
        band.levels(),
        QTY_FRACTIONS.len(),
        3,
        STORAGE_FRACTIONS.len(),
    ]
}

pub fn action_from_indices(indices: &[usize]) -> Result<Action> {
    if indices.len() != 6 {
        return Err(Error::Invariant(format!(
            "expected 6 action indices, got {}",
            indices.len()
        )));
    }
    Ok(Action {
        ask_price_idx: indices[0],
        ask_qty_idx: indices[1],
        bid_price_idx: indices[2],
        bid_qty_idx: indices[3],
        storage_op: StorageOp::from_index(indices[4])
            .ok_or_else(|| Error::Invariant("storage op index out of range".into()))?,
        storage_frac_idx: indices[5],
    })
}

pub fn indices_from_action(action: &Action) -> Vec<usize> {
    vec![
        action.ask_price_idx,
        action.ask_qty_idx,
        action.bid_price_idx,
        action.bid_qty_idx,
        action.storage_op.index(),
        action.storage_frac_idx,
    ]
}

/// Sample (or argmax) an action; returns head indices, joint log-prob, value.
pub fn act(
    net: &PolicyNet,
    obs: &[f64],
    rng: &mut ChaCha8Rng,
    deterministic: bool,
) -> Result<(Vec<usize>, f64, f64)> {
    let fwd = net.forward(obs);
    if !fwd.is_finite() {
        return Err(Error::Invariant("non-finite network output".into()));
    }
    let indices = if deterministic {
        net.argmax_heads(&fwd)
    } else {
        let (indices, _) = net.sample_heads(&fwd, rng);
        indices
    };
    let logp = net.joint_log_prob(&fwd, &indices);
    Ok((indices, logp, fwd.value))
}

/// Generalized advantage estimation; `returns = advantages + values`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap_value: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len(), "gae input lengths must align");
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n {
            values[t + 1]
        } else {
            bootstrap_value
        };
        let delta = rewards[t] + gamma * next_value - values[t];
        acc = delta + gamma * lambda * acc;
        advantages[t] = acc;
    }
    let returns = advantages
        .iter()
        .zip(values)
        .map(|(a, v)| a + v)
        .collect();
    (advantages, returns)
}

/// One rollout's worth of training data for a single policy.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<usize>>,
    pub logp_old: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
}

/// Mean 0, s.d. 1 advantage normalization with an s.d. floor.
pub fn normalize_advantages(advantages: &[f64]) -> Vec<f64> {
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let sd = (advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(1e-8);
    advantages.iter().map(|a| (a - mean) / sd).collect()
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Total PPO loss over the indexed subset: clipped surrogate + value MSE
/// - entropy bonus. Pure in the parameters; used by the gradient probe.
pub fn ppo_loss(
    net: &PolicyNet,
    batch: &Batch,
    norm_adv: &[f64],
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let count = indices.len() as f64;
    let mut policy_loss = 0.0;
    let mut value_loss = 0.0;
    let mut entropy = 0.0;
    for &i in indices {
        let fwd = net.forward(&batch.obs[i]);
        if !fwd.is_finite() {
            return Err(Error::Invariant("non-finite network output in loss".into()));
        }
        let logp = net.joint_log_prob(&fwd, &batch.actions[i]);
        let ratio = (logp - batch.logp_old[i]).exp();
        let adv = norm_adv[i];
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * adv;
        policy_loss -= unclipped.min(clipped);
        value_loss += (fwd.value - batch.returns[i]).powi(2);
        for probs in &fwd.head_probs {
            entropy -= probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>();
        }
    }
    Ok(policy_loss / count + VALUE_LOSS_COEF * value_loss / count
        - cfg.entropy_coef * entropy / count)
}

/// Analytic gradient of `ppo_loss` over the indexed subset.
pub fn ppo_grad(
    net: &PolicyNet,
    batch: &Batch,
    norm_adv: &[f64],
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, UpdateStats)> {
    let count = indices.len() as f64;
    let mut grad = vec![0.0; net.shape.param_count()];
    let mut stats = UpdateStats::default();
    for &i in indices {
        let fwd = net.forward(&batch.obs[i]);
        if !fwd.is_finite() {
            return Err(Error::Invariant("non-finite network output in grad".into()));
        }
        let logp = net.joint_log_prob(&fwd, &batch.actions[i]);
        let ratio = (logp - batch.logp_old[i]).exp();
        let adv = norm_adv[i];
        let unclipped = ratio * adv;
        let clipped = ratio.clamp(1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio) * adv;
        let use_unclipped = unclipped <= clipped;
        if !use_unclipped {
            stats.clip_fraction += 1.0;
        }
        stats.policy_loss -= unclipped.min(clipped);
        stats.value_loss += (fwd.value - batch.returns[i]).powi(2);

        // d(policy)/d logp = -adv * ratio when the unclipped branch is active.
        let dlogp = if use_unclipped { -adv * ratio / count } else { 0.0 };
        let mut dlogits: Vec<Vec<f64>> = Vec::with_capacity(fwd.head_probs.len());
        for (h, probs) in fwd.head_probs.iter().enumerate() {
            let chosen = batch.actions[i][h];
            let head_entropy = -probs
                .iter()
                .filter(|&&p| p > 0.0)
                .map(|&p| p * p.ln())
                .sum::<f64>();
            stats.entropy += head_entropy;
            let mut d = vec![0.0; probs.len()];
            for (j, &p) in probs.iter().enumerate() {
                let onehot = if j == chosen { 1.0 } else { 0.0 };
                let mut dz = dlogp * (onehot - p);
                // Entropy bonus: d(-coef * H)/dz_j = coef * p_j (ln p_j + H).
                if p > 0.0 {
                    dz += cfg.entropy_coef * p * (p.ln() + head_entropy) / count;
                }
                d[j] = dz;
            }
            dlogits.push(d);
        }
        let dvalue = VALUE_LOSS_COEF * 2.0 * (fwd.value - batch.returns[i]) / count;
        net.backward(&fwd, &dlogits, dvalue, &mut grad);
    }
    stats.policy_loss /= count;
    stats.value_loss /= count;
    stats.entropy /= count;
    stats.clip_fraction /= count;
    Ok((grad, stats))
}

/// One PPO update: several epochs of shuffled minibatches with advantage
/// normalization over the whole batch and global gradient-norm clipping.
pub fn ppo_update(
    net: &mut PolicyNet,
    opt: &mut Adam,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    if batch.is_empty() {
        return Err(Error::Invariant("ppo_update on an empty batch".into()));
    }
    let norm_adv = normalize_advantages(&batch.advantages);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut last = UpdateStats::default();
    for _ in 0..cfg.epochs {
        shuffle(&mut order, rng);
        for chunk in order.chunks(cfg.minibatch_size.min(batch.len())) {
            let (mut grad, mut stats) = ppo_grad(net, batch, &norm_adv, chunk, cfg)?;
            stats.grad_norm = clip_grad_norm(&mut grad, cfg.grad_norm_cap);
            if !stats.grad_norm.is_finite() {
                return Err(Error::Invariant(format!(
                    "NaN gradient (policy_loss={}, value_loss={})",
                    stats.policy_loss, stats.value_loss
                )));
            }
            opt.step(&mut net.params, &grad);
            last = stats;
        }
    }
    net.check_finite()?;
    Ok(last)
}

fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// One training-curve record per episode and agent, JSONL-ready.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRecord {
    pub episode: u64,
    pub agent: String,
    pub total_reward: f64,
    pub ftg: f64,
    pub fbs: f64,
    pub fpp: f64,
    pub lambda_grid: f64,
    pub lambda_price: f64,
    pub lambda_peer: f64,
}

/// Per-prosumer PPO trainer with independent policies.
pub struct Trainer {
    /// Agent indices of the trained prosumers, in roster order.
    pub prosumers: Vec<usize>,
    pub nets: Vec<PolicyNet>,
    pub opts: Vec<Adam>,
    /// Next episode index (also the count of completed episodes).
    pub episode: u64,
    pub cfg: TrainConfig,
    pub shaping: ShapingConfig,
    policy_rngs: Vec<ChaCha8Rng>,
}

impl Trainer {
    pub fn new(env: &Environment, shaping: ShapingConfig, cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        shaping.validate()?;
        let prosumers = env.prosumer_indices();
        let head_sizes = prosumer_head_sizes(env.band());
        let mut nets = Vec::with_capacity(prosumers.len());
        let mut opts = Vec::with_capacity(prosumers.len());
        let mut policy_rngs = Vec::with_capacity(prosumers.len());
        for &agent_idx in &prosumers {
            let shape = NetShape::new(OBS_LEN, cfg.hidden, head_sizes.clone());
            let mut init_rng = derive_rng(cfg.seed, &[stream::INIT, agent_idx as u64]);
            let net = PolicyNet::init(shape.clone(), &mut init_rng);
            opts.push(Adam::new(shape.param_count(), cfg.learning_rate));
            nets.push(net);
            policy_rngs.push(derive_rng(cfg.seed, &[stream::POLICY, agent_idx as u64]));
        }
        Ok(Trainer {
            prosumers,
            nets,
            opts,
            episode: 0,
            cfg,
            shaping,
            policy_rngs,
        })
    }

    /// Restore trainer state from checkpointed policies.
    pub fn resume(
        env: &Environment,
        shaping: ShapingConfig,
        cfg: TrainConfig,
        episode: u64,
        restored: Vec<(PolicyNet, Adam)>,
    ) -> Result<Trainer> {
        let mut trainer = Trainer::new(env, shaping, cfg)?;
        if restored.len() != trainer.prosumers.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} policies, got {}",
                trainer.prosumers.len(),
                restored.len()
            )));
        }
        for (slot, (net, opt)) in restored.into_iter().enumerate() {
            if net.shape != trainer.nets[slot].shape {
                return Err(Error::Checkpoint(
                    "checkpoint network shape does not match the environment menus".into(),
                ));
            }
            trainer.nets[slot] = net;
            trainer.opts[slot] = opt;
        }
        trainer.episode = episode;
        // Policy streams resume from the episode boundary.
        for (slot, &agent_idx) in trainer.prosumers.clone().iter().enumerate() {
            trainer.policy_rngs[slot] = derive_rng(
                trainer.cfg.seed,
                &[stream::POLICY, agent_idx as u64, episode],
            );
        }
        Ok(trainer)
    }

    /// Collect one episode, apply the episode's ramped shaping, update every
    /// prosumer policy, and return the curve records.
    pub fn run_episode(
        &mut self,
        env: &Environment,
        critic: &dyn CriticBackend,
    ) -> Result<Vec<CurveRecord>> {
        let episode = self.episode;
        let lambdas = self.shaping.lambdas(episode);
        let horizon = env.horizon_slots() as usize;
        let mut state = env.reset(episode_seed(self.cfg.seed, episode));

        let k = self.prosumers.len();
        let mut batches: Vec<Batch> = (0..k).map(|_| Batch::default()).collect();
        let mut rewards: Vec<Vec<f64>> = vec![Vec::with_capacity(horizon); k];
        let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(horizon); k];
        let mut score_sums = [0.0f64; 3];

        while !state.done {
            let mut actions = vec![Action::idle(); env.num_agents()];
            for (slot_idx, &agent_idx) in self.prosumers.iter().enumerate() {
                let obs = env.observe(&state, agent_idx);
                let (indices, logp, value) = act(
                    &self.nets[slot_idx],
                    &obs.0,
                    &mut self.policy_rngs[slot_idx],
                    false,
                )?;
                actions[agent_idx] = action_from_indices(&indices)?;
                batches[slot_idx].obs.push(obs.0.to_vec());
                batches[slot_idx].actions.push(indices);
                batches[slot_idx].logp_old.push(logp);
                values[slot_idx].push(value);
            }
            let outcome = env.step(&mut state, &actions)?;
            let scores = critic.score(&outcome.ledger);
            score_sums[0] += scores.ftg;
            score_sums[1] += scores.fbs;
            score_sums[2] += scores.fpp;
            let sold_total = outcome.ledger.peer_kwh();
            for (slot_idx, &agent_idx) in self.prosumers.iter().enumerate() {
                let sold = outcome.ledger.peer_sold_by(AgentId(agent_idx as u32));
                let shaped = shape(
                    outcome.rewards.profit_cents[agent_idx],
                    &scores,
                    lambdas,
                    &self.shaping,
                    sold,
                    sold_total,
                );
                rewards[slot_idx].push(shaped);
            }
        }

        let mut records = Vec::with_capacity(k);
        for (slot_idx, &agent_idx) in self.prosumers.clone().iter().enumerate() {
            let (advantages, returns) = gae(
                &rewards[slot_idx],
                &values[slot_idx],
                0.0,
                self.cfg.gamma,
                self.cfg.gae_lambda,
            );
            batches[slot_idx].advantages = advantages;
            batches[slot_idx].returns = returns;
            ppo_update(
                &mut self.nets[slot_idx],
                &mut self.opts[slot_idx],
                &batches[slot_idx],
                &self.cfg,
                &mut self.policy_rngs[slot_idx],
            )?;
            records.push(CurveRecord {
                episode,
                agent: env.specs()[agent_idx].name.clone(),
                total_reward: rewards[slot_idx].iter().sum(),
                ftg: score_sums[0] / horizon as f64,
                fbs: score_sums[1] / horizon as f64,
                fpp: score_sums[2] / horizon as f64,
                lambda_grid: lambdas[0],
                lambda_price: lambdas[1],
                lambda_peer: lambdas[2],
            });
        }
        self.episode += 1;
        // Fresh policy streams per episode boundary keep resume bit-exact.
        for (slot_idx, &agent_idx) in self.prosumers.clone().iter().enumerate() {
            self.policy_rngs[slot_idx] = derive_rng(
                self.cfg.seed,
                &[stream::POLICY, agent_idx as u64, self.episode],
            );
        }
        Ok(records)
    }

    /// Run episodes up to `total_episodes`, streaming curve records to the
    /// sink and checkpointing at the configured interval.
    pub fn train(
        &mut self,
        env: &Environment,
        critic: &dyn CriticBackend,
        mut on_records: impl FnMut(&[CurveRecord]) -> Result<()>,
        mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>,
    ) -> Result<()> {
        while self.episode < self.cfg.total_episodes {
            let records = self.run_episode(env, critic)?;
            on_records(&records)?;
            let interval = self.cfg.checkpoint_interval.max(1);
            if self.episode % interval == 0 || self.episode == self.cfg.total_episodes {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}

/// Frozen-policy evaluation rollout (argmax actions) over the environment's
/// full horizon; returns the per-slot ledgers and raw rewards.
pub struct EvalRun {
    pub ledgers: Vec<SlotLedger>,
    pub rewards: Vec<RawRewards>,
}

pub fn evaluate(
    env: &Environment,
    prosumers: &[usize],
    nets: &[PolicyNet],
    seed: u64,
) -> Result<EvalRun> {
    if prosumers.len() != nets.len() {
        return Err(Error::Invariant(
            "one policy per prosumer is required for evaluation".into(),
        ));
    }
    let mut state = env.reset(seed);
    let mut rng = derive_rng(seed, &[stream::POLICY]);
    let mut ledgers = Vec::with_capacity(env.horizon_slots() as usize);
    let mut rewards = Vec::with_capacity(env.horizon_slots() as usize);
    while !state.done {
        let mut actions = vec![Action::idle(); env.num_agents()];
        for (slot_idx, &agent_idx) in prosumers.iter().enumerate() {
            let obs = env.observe(&state, agent_idx);
            let (indices, _, _) = act(&nets[slot_idx], &obs.0, &mut rng, true)?;
            actions[agent_idx] = action_from_indices(&indices)?;
        }
        let outcome = env.step(&mut state, &actions)?;
        ledgers.push(outcome.ledger);
        rewards.push(outcome.rewards);
    }
    Ok(EvalRun { ledgers, rewards })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::Environment;
    use crate::fairness::DeterministicCritic;
    use crate::profiles::{HouseholdSpec, NoiseConfig};

    fn toy_env() -> Environment {
        Environment::builder(vec![
            HouseholdSpec::prosumer("P1", 0.6, 3.0),
            HouseholdSpec::consumer("C1", 2.0),
        ])
        .days(1)
        .noise(NoiseConfig::OFF)
        .p_sunny(1.0)
        .build()
        .unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            total_episodes: 4,
            hidden: 16,
            minibatch_size: 24,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn gae_matches_hand_computed_suffix_sums() {
        let (adv, ret) = gae(&[1.0, 1.0, 1.0], &[0.0, 0.0, 0.0], 0.0, 1.0, 1.0);
        assert_eq!(adv, vec![3.0, 2.0, 1.0]);
        assert_eq!(ret, vec![3.0, 2.0, 1.0]);

        let (adv, _) = gae(&[0.0, 0.0], &[0.0, 0.0], 0.0, 0.99, 0.95);
        assert_eq!(adv, vec![0.0, 0.0]);

        let (adv, ret) = gae(&[2.0], &[0.5], 0.0, 0.99, 0.95);
        assert!((adv[0] - 1.5).abs() < 1e-12);
        assert!((ret[0] - 2.0).abs() < 1e-12);
    }

    fn probe_batch(net: &PolicyNet, n: usize, seed: u64) -> Batch {
        let mut rng = derive_rng(seed, &[40]);
        let mut batch = Batch::default();
        use rand::Rng;
        for _ in 0..n {
            let obs: Vec<f64> = (0..net.shape.input)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let (indices, logp, value) = act(net, &obs, &mut rng, false).unwrap();
            batch.obs.push(obs);
            batch.actions.push(indices);
            // Perturb the stored log-prob slightly so ratios are not exactly 1.
            batch.logp_old.push(logp + rng.random_range(-0.05..0.05));
            batch.advantages.push(rng.random_range(-1.0..1.0));
            batch.returns.push(value + rng.random_range(-0.5..0.5));
        }
        batch
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let cfg = TrainConfig {
            hidden: 8,
            ..TrainConfig::default()
        };
        let shape = NetShape::new(OBS_LEN, cfg.hidden, vec![5, 3]);
        let net = PolicyNet::init(shape, &mut derive_rng(11, &[1]));
        let batch = probe_batch(&net, 6, 12);
        let norm_adv = normalize_advantages(&batch.advantages);
        let indices: Vec<usize> = (0..batch.len()).collect();
        let (grad, _) = ppo_grad(&net, &batch, &norm_adv, &indices, &cfg).unwrap();

        let mut probe = net.clone();
        let eps = 1e-5;
        for block in net.shape.blocks() {
            let mut max_rel = 0.0f64;
            for idx in block.1.clone() {
                let original = probe.params[idx];
                probe.params[idx] = original + eps;
                let up = ppo_loss(&probe, &batch, &norm_adv, &indices, &cfg).unwrap();
                probe.params[idx] = original - eps;
                let down = ppo_loss(&probe, &batch, &norm_adv, &indices, &cfg).unwrap();
                probe.params[idx] = original;
                let fd = (up - down) / (2.0 * eps);
                let rel = (fd - grad[idx]).abs() / grad[idx].abs().max(fd.abs()).max(1e-6);
                max_rel = max_rel.max(rel);
            }
            assert!(max_rel < 1e-3, "block {} rel err {max_rel}", block.0);
        }
    }

    #[test]
    fn zero_advantages_leave_policy_heads_alone() {
        let cfg = TrainConfig {
            entropy_coef: 0.0,
            ..small_cfg()
        };
        let shape = NetShape::new(OBS_LEN, cfg.hidden, vec![4]);
        let net = PolicyNet::init(shape, &mut derive_rng(2, &[7]));
        let mut batch = probe_batch(&net, 8, 5);
        for (a, r) in batch.advantages.iter_mut().zip(batch.returns.iter_mut()) {
            *a = 0.0;
            // Keep value targets at the current predictions too.
            *r = 0.0;
        }
        // Recompute returns as the current value predictions so value loss is 0.
        for (i, obs) in batch.obs.iter().enumerate() {
            batch.returns[i] = net.forward(obs).value;
        }
        // Use true current log-probs so the ratio is exactly 1.
        for (i, obs) in batch.obs.iter().enumerate() {
            let fwd = net.forward(obs);
            batch.logp_old[i] = net.joint_log_prob(&fwd, &batch.actions[i]);
        }
        let norm_adv = vec![0.0; batch.len()];
        let indices: Vec<usize> = (0..batch.len()).collect();
        let (grad, stats) = ppo_grad(&net, &batch, &norm_adv, &indices, &cfg).unwrap();
        assert!(stats.policy_loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn degenerate_single_action_menu_is_noop_for_policy() {
        // One-action head with zero entropy coefficient: probabilities stay 1.
        let cfg = TrainConfig {
            entropy_coef: 0.0,
            ..small_cfg()
        };
        let shape = NetShape::new(OBS_LEN, cfg.hidden, vec![1]);
        let mut net = PolicyNet::init(shape, &mut derive_rng(6, &[3]));
        let before = net.params.clone();
        let mut batch = probe_batch(&net, 8, 9);
        for a in &mut batch.actions {
            a[0] = 0;
        }
        for (i, obs) in batch.obs.iter().enumerate() {
            let fwd = net.forward(obs);
            batch.logp_old[i] = net.joint_log_prob(&fwd, &batch.actions[i]);
            batch.returns[i] = fwd.value;
        }
        let mut opt = Adam::new(net.shape.param_count(), cfg.learning_rate);
        let mut rng = derive_rng(1, &[4]);
        ppo_update(&mut net, &mut opt, &batch, &cfg, &mut rng).unwrap();
        // Head weights unchanged: log-prob of the only action is always 0.
        let head_range = net
            .shape
            .blocks()
            .iter()
            .find(|(n, _)| n == "head0_w")
            .unwrap()
            .1
            .clone();
        for idx in head_range {
            assert!((net.params[idx] - before[idx]).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_action_wins_after_updates() {
        // Synthetic bandit: head index 2 of 4 always gets advantage +1, others -1.
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            minibatch_size: 64,
            ..small_cfg()
        };
        let shape = NetShape::new(2, 8, vec![4]);
        let mut net = PolicyNet::init(shape, &mut derive_rng(20, &[5]));
        let mut opt = Adam::new(net.shape.param_count(), cfg.learning_rate);
        let mut rng = derive_rng(21, &[6]);
        let obs = vec![0.5, -0.5];
        for _ in 0..50 {
            let mut batch = Batch::default();
            for _ in 0..64 {
                let fwd = net.forward(&obs);
                let (indices, logp) = net.sample_heads(&fwd, &mut rng);
                let reward = if indices[0] == 2 { 1.0 } else { -1.0 };
                batch.obs.push(obs.clone());
                batch.actions.push(indices);
                batch.logp_old.push(logp);
                batch.advantages.push(reward);
                batch.returns.push(reward);
            }
            ppo_update(&mut net, &mut opt, &batch, &cfg, &mut rng).unwrap();
        }
        let fwd = net.forward(&obs);
        assert!(
            fwd.head_probs[0][2] > 0.9,
            "dominant action probability {}",
            fwd.head_probs[0][2]
        );
    }

    #[test]
    fn advantage_normalization_ignores_constant_reward_shifts() {
        let cfg = small_cfg();
        let shape = NetShape::new(OBS_LEN, cfg.hidden, vec![5, 3]);
        let net = PolicyNet::init(shape, &mut derive_rng(31, &[2]));
        let batch = probe_batch(&net, 10, 14);
        let mut shifted = batch.clone();
        for a in &mut shifted.advantages {
            *a += 123.0;
        }
        let a = normalize_advantages(&batch.advantages);
        let b = normalize_advantages(&shifted.advantages);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn trainer_is_deterministic_across_runs() {
        let env = toy_env();
        let critic = DeterministicCritic::new(*env.band());
        let run = || -> Vec<CurveRecord> {
            let mut trainer =
                Trainer::new(&env, ShapingConfig::defaults_for(4), small_cfg()).unwrap();
            let mut records = Vec::new();
            trainer
                .train(
                    &env,
                    &critic,
                    |r| {
                        records.extend_from_slice(r);
                        Ok(())
                    },
                    |_| Ok(()),
                )
                .unwrap();
            records
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.episode, y.episode);
            assert_eq!(x.total_reward, y.total_reward);
            assert_eq!(x.ftg, y.ftg);
        }
    }

    #[test]
    fn single_episode_with_inactive_shaping_reports_raw_profit() {
        let env = toy_env();
        let critic = DeterministicCritic::new(*env.band());
        let mut cfg = small_cfg();
        cfg.total_episodes = 1;
        // Shaping schedules start far beyond episode 0.
        let shaping = ShapingConfig::defaults_for(10_000);
        let mut trainer = Trainer::new(&env, shaping, cfg.clone()).unwrap();

        // Replay the same episode's environment stream to compute raw profit.
        let records = trainer.run_episode(&env, &critic).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].lambda_grid, 0.0);
        assert_eq!(records[0].lambda_peer, 0.0);
        // With all lambdas zero the total reward is exactly the raw profit sum;
        // verify against an independent replay with the same seeds.
        let mut replay_trainer = Trainer::new(&env, shaping, cfg).unwrap();
        let mut state = env.reset(episode_seed(replay_trainer.cfg.seed, 0));
        let mut total_profit = 0.0;
        while !state.done {
            let mut actions = vec![Action::idle(); env.num_agents()];
            for (slot_idx, &agent_idx) in replay_trainer.prosumers.clone().iter().enumerate() {
                let obs = env.observe(&state, agent_idx);
                let (indices, _, _) = act(
                    &replay_trainer.nets[slot_idx],
                    &obs.0,
                    &mut replay_trainer.policy_rngs[slot_idx],
                    false,
                )
                .unwrap();
                actions[agent_idx] = action_from_indices(&indices).unwrap();
            }
            let outcome = env.step(&mut state, &actions).unwrap();
            total_profit += outcome.rewards.profit_cents[0];
        }
        assert!((records[0].total_reward - total_profit).abs() < 1e-9);
    }

    #[test]
    fn evaluation_is_reproducible() {
        let env = toy_env();
        let critic = DeterministicCritic::new(*env.band());
        let mut trainer = Trainer::new(&env, ShapingConfig::defaults_for(4), small_cfg()).unwrap();
        trainer.run_episode(&env, &critic).unwrap();
        let run1 = evaluate(&env, &trainer.prosumers, &trainer.nets, 5).unwrap();
        let run2 = evaluate(&env, &trainer.prosumers, &trainer.nets, 5).unwrap();
        assert_eq!(run1.ledgers, run2.ledgers);
        assert_eq!(run1.ledgers.len(), 24);
    }
}
