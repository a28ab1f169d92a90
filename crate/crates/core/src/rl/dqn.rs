use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{Gradients, QModel, QTarget};
use super::{NavAction, StateVector};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: StateVector,
    pub action: NavAction,
    pub reward: f64,
    pub next_state: StateVector,
    pub terminal: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

fn d_hidden() -> usize {
    32
}
fn d_gamma() -> f64 {
    0.9
}
fn d_lr() -> f64 {
    1e-3
}
fn d_eps_start() -> f64 {
    0.5
}
fn d_eps_end() -> f64 {
    0.05
}
fn d_eps_decay() -> u64 {
    20_000
}
fn d_replay() -> usize {
    4096
}
fn d_batch() -> usize {
    32
}
fn d_sync() -> u64 {
    500
}
fn d_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}
fn d_train_every() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerParams {
    #[serde(default = "d_hidden")]
    pub hidden: usize,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_eps_start")]
    pub epsilon_start: f64,
    #[serde(default = "d_eps_end")]
    pub epsilon_end: f64,
    /// Decisions over which epsilon decays linearly from start to end.
    #[serde(default = "d_eps_decay")]
    pub epsilon_decay: u64,
    #[serde(default = "d_replay")]
    pub replay_capacity: usize,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Updates between target-network synchronisations.
    #[serde(default = "d_sync")]
    pub target_sync: u64,
    #[serde(default = "d_optimizer")]
    pub optimizer: OptimizerKind,
    /// Recorded transitions per gradient update.
    #[serde(default = "d_train_every")]
    pub train_every: u64,
}

impl Default for LearnerParams {
    fn default() -> Self {
        LearnerParams {
            hidden: d_hidden(),
            gamma: d_gamma(),
            learning_rate: d_lr(),
            epsilon_start: d_eps_start(),
            epsilon_end: d_eps_end(),
            epsilon_decay: d_eps_decay(),
            replay_capacity: d_replay(),
            batch_size: d_batch(),
            target_sync: d_sync(),
            optimizer: d_optimizer(),
            train_every: d_train_every(),
        }
    }
}

impl LearnerParams {
    pub fn validate(&self) -> Result<()> {
        let range = |key: &str, value: String, bound: &str| Error::Range {
            key: format!("learner.{key}"),
            value,
            bound: bound.into(),
        };
        if self.hidden == 0 {
            return Err(range("hidden", self.hidden.to_string(), "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(range("gamma", self.gamma.to_string(), "must be in [0, 1)"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(range("learning_rate", self.learning_rate.to_string(), "must be >= 0"));
        }
        for (key, v) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(range(key, v.to_string(), "must be in [0, 1]"));
            }
        }
        if self.batch_size == 0 {
            return Err(range("batch_size", self.batch_size.to_string(), "must be >= 1"));
        }
        if self.replay_capacity < self.batch_size {
            return Err(range(
                "replay_capacity",
                self.replay_capacity.to_string(),
                "must be >= batch_size",
            ));
        }
        if self.target_sync == 0 {
            return Err(range("target_sync", "0".into(), "must be >= 1"));
        }
        if self.train_every == 0 {
            return Err(range("train_every", "0".into(), "must be >= 1"));
        }
        Ok(())
    }

    pub fn epsilon(&self, decisions: u64) -> f64 {
        if self.epsilon_decay == 0 || decisions >= self.epsilon_decay {
            return self.epsilon_end;
        }
        let frac = decisions as f64 / self.epsilon_decay as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Sgd,
    Adam { m: Gradients, v: Gradients, t: u64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, model: &QModel) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                m: Gradients::zeros_like(model),
                v: Gradients::zeros_like(model),
                t: 0,
            },
        }
    }

    fn apply(&mut self, model: &mut QModel, grads: &Gradients, lr: f64) {
        match self {
            Optimizer::Sgd => {
                let params = model.weights.iter_mut().chain(model.biases.iter_mut());
                let gs = grads.weights.iter().chain(&grads.biases);
                for (p, g) in params.zip(gs) {
                    for (x, d) in p.iter_mut().zip(g) {
                        *x -= lr * d;
                    }
                }
            }
            Optimizer::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t as i32);
                let c2 = 1.0 - B2.powi(*t as i32);
                let params = model.weights.iter_mut().chain(model.biases.iter_mut());
                let gs = grads.weights.iter().chain(&grads.biases);
                let ms = m.weights.iter_mut().chain(m.biases.iter_mut());
                let vs = v.weights.iter_mut().chain(v.biases.iter_mut());
                for (((p, g), mm), vv) in params.zip(gs).zip(ms).zip(vs) {
                    for (((x, d), mi), vi) in p.iter_mut().zip(g).zip(mm.iter_mut()).zip(vv.iter_mut()) {
                        *mi = B1 * *mi + (1.0 - B1) * d;
                        *vi = B2 * *vi + (1.0 - B2) * d * d;
                        *x -= lr * (*mi / c1) / ((*vi / c2).sqrt() + EPS);
                    }
                }
            }
        }
    }
}

/// One gradient step of `online` on the temporal-difference targets of
/// `batch`, bootstrapped from `target`. Returns the pre-update loss.
pub fn dqn_update(
    online: &mut QModel,
    target: &QModel,
    optimizer: &mut Optimizer,
    batch: &[Transition],
    params: &LearnerParams,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("dqn_update needs a non-empty batch".into()));
    }
    let mut targets = Vec::with_capacity(batch.len());
    for t in batch {
        let y = if t.terminal {
            t.reward
        } else {
            let next = target.forward(t.next_state.as_slice())?;
            t.reward + params.gamma * next.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        };
        targets.push(y);
    }
    let samples: Vec<QTarget<'_>> = batch
        .iter()
        .zip(&targets)
        .map(|(t, &y)| QTarget {
            state: t.state.as_slice(),
            action: t.action.index(),
            target: y,
        })
        .collect();
    let (loss, grads) = online.loss_and_grad(&samples)?;
    if !loss.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss {loss} after {} updates (batch of {}, max |target| {:.3e})",
            online.step_counter,
            batch.len(),
            targets.iter().fold(0.0f64, |m, y| m.max(y.abs()))
        )));
    }
    optimizer.apply(online, &grads, params.learning_rate);
    online.step_counter += 1;
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            items: Vec::new(),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Transition> {
        (0..n)
            .map(|_| self.items[rng.gen_range(0..self.items.len())].clone())
            .collect()
    }
}

/// Online network, target network, optimiser state and replay memory of one
/// navigation agent.
#[derive(Clone, Debug)]
pub struct Learner {
    pub online: QModel,
    pub target: QModel,
    pub params: LearnerParams,
    optimizer: Optimizer,
    replay: ReplayBuffer,
    pub decisions: u64,
    pub updates: u64,
    recorded: u64,
    trained_at: u64,
}

impl Learner {
    pub fn new(model: QModel, params: LearnerParams) -> Self {
        Learner {
            target: model.clone(),
            optimizer: Optimizer::new(params.optimizer, &model),
            replay: ReplayBuffer::new(params.replay_capacity),
            online: model,
            params,
            decisions: 0,
            updates: 0,
            recorded: 0,
            trained_at: 0,
        }
    }

    /// Learner continuing from a trained model: exploration starts at the
    /// end of the decay schedule instead of its beginning.
    pub fn resume(model: QModel, params: LearnerParams) -> Self {
        let mut l = Learner::new(model, params);
        l.decisions = l.params.epsilon_decay;
        l
    }

    pub fn epsilon(&self) -> f64 {
        self.params.epsilon(self.decisions)
    }

    pub fn record(&mut self, t: Transition) {
        self.replay.push(t);
        self.recorded += 1;
    }

    /// Trains on a replay batch when one is due: at most once per recorded
    /// transition, every `train_every` transitions. Returns the loss if an
    /// update ran.
    pub fn maybe_train<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<Option<f64>> {
        if self.replay.len() < self.params.batch_size
            || self.recorded == self.trained_at
            || !self.recorded.is_multiple_of(self.params.train_every)
        {
            return Ok(None);
        }
        self.trained_at = self.recorded;
        let batch = self.replay.sample(self.params.batch_size, rng);
        let loss = self.update(&batch)?;
        Ok(Some(loss))
    }

    pub fn update(&mut self, batch: &[Transition]) -> Result<f64> {
        let loss = dqn_update(&mut self.online, &self.target, &mut self.optimizer, batch, &self.params)?;
        self.updates += 1;
        if self.updates.is_multiple_of(self.params.target_sync) {
            self.target = self.online.clone();
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(seed: u64) -> StateVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        StateVector::new((0..12).map(|_| rng.gen::<f64>()).collect())
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = QModel::random(&[12, 16, 5], &mut rng);
        let params = LearnerParams {
            learning_rate: 0.0,
            ..LearnerParams::default()
        };
        for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let mut online = model.clone();
            let mut opt = Optimizer::new(kind, &online);
            let batch = vec![Transition {
                state: state(2),
                action: NavAction::Right,
                reward: 0.7,
                next_state: state(3),
                terminal: false,
            }];
            for _ in 0..10 {
                dqn_update(&mut online, &model, &mut opt, &batch, &params).unwrap();
            }
            assert_eq!(online.weights, model.weights);
            assert_eq!(online.biases, model.biases);
        }
    }

    #[test]
    fn empty_batch_is_contract_error() {
        let mut m = QModel::zeros(&[12, 4, 5]);
        let t = m.clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &m);
        assert!(dqn_update(&mut m, &t, &mut opt, &[], &LearnerParams::default()).is_err());
    }

    #[test]
    fn non_finite_loss_is_training_fault() {
        let mut m = QModel::zeros(&[12, 4, 5]);
        let t = m.clone();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &m);
        let batch = [Transition {
            state: state(1),
            action: NavAction::Left,
            reward: f64::INFINITY,
            next_state: state(1),
            terminal: true,
        }];
        assert!(matches!(
            dqn_update(&mut m, &t, &mut opt, &batch, &LearnerParams::default()),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn epsilon_schedule() {
        let p = LearnerParams::default();
        assert_eq!(p.epsilon(0), 0.5);
        assert!((p.epsilon(10_000) - 0.275).abs() < 1e-12);
        assert_eq!(p.epsilon(20_000), 0.05);
        assert_eq!(p.epsilon(1_000_000), 0.05);
    }

    #[test]
    fn replay_wraps_at_capacity() {
        let mut buf = ReplayBuffer::new(3);
        for k in 0..5 {
            buf.push(Transition {
                state: state(k),
                action: NavAction::Left,
                reward: k as f64,
                next_state: state(k),
                terminal: false,
            });
        }
        assert_eq!(buf.len(), 3);
        let mut rewards: Vec<f64> = buf.items.iter().map(|t| t.reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn target_sync_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = LearnerParams {
            target_sync: 3,
            learning_rate: 0.01,
            ..LearnerParams::default()
        };
        let mut learner = Learner::new(QModel::random(&[12, 8, 5], &mut rng), params);
        let batch = [Transition {
            state: state(8),
            action: NavAction::SpeedUp,
            reward: 1.0,
            next_state: state(9),
            terminal: false,
        }];
        learner.update(&batch).unwrap();
        learner.update(&batch).unwrap();
        assert_ne!(learner.online, learner.target);
        learner.update(&batch).unwrap();
        assert_eq!(learner.online, learner.target);
    }
}
