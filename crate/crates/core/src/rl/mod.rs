//! Learned navigation: state encoding, Q-network, DQN training, reward.

mod dqn;
mod network;
mod reward;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use dqn::{dqn_update, Learner, LearnerParams, Optimizer, OptimizerKind, ReplayBuffer, Transition};
pub use network::{deserialize_model, serialize_model, Gradients, QModel, QTarget, MODEL_FORMAT_VERSION};
pub use reward::{
    learner_reward, relative_deviation, reward, reward_raw, RewardInputs, RewardWeights, RunningAverages,
};

use crate::vehicle::SensorFrame;
use crate::world::{Compass, Turn};

/// Actions the navigator can propose.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NavAction {
    Left,
    Right,
    Backward,
    SpeedUp,
    SpeedDown,
}

impl NavAction {
    pub const COUNT: usize = 5;
    pub const ALL: [NavAction; Self::COUNT] = [
        NavAction::Left,
        NavAction::Right,
        NavAction::Backward,
        NavAction::SpeedUp,
        NavAction::SpeedDown,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<NavAction> {
        Self::ALL.get(i).copied()
    }

    pub fn turn(self) -> Option<Turn> {
        match self {
            NavAction::Left => Some(Turn::Left),
            NavAction::Right => Some(Turn::Right),
            NavAction::Backward => Some(Turn::Back),
            _ => None,
        }
    }
}

/// Base encoding width; `+4` when the destination direction is appended.
pub const STATE_DIM: usize = 12;
pub const STATE_DIM_WITH_TD: usize = STATE_DIM + 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn new(values: Vec<f64>) -> Self {
        StateVector(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Scales used to map sensor readings into `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncodeNorms {
    pub diameter: u32,
    pub sensor_range: u32,
    pub qt_cap: u32,
    pub ql_cap: u32,
    pub with_td: bool,
}

impl EncodeNorms {
    pub fn dim(&self) -> usize {
        if self.with_td {
            STATE_DIM_WITH_TD
        } else {
            STATE_DIM
        }
    }
}

fn ratio(x: u32, cap: u32) -> f64 {
    if cap == 0 {
        return if x > 0 { 1.0 } else { 0.0 };
    }
    (x as f64 / cap as f64).clamp(0.0, 1.0)
}

fn one_hot(dir: Option<Compass>) -> [f64; 4] {
    let mut v = [0.0; 4];
    if let Some(d) = dir {
        v[d.index()] = 1.0;
    }
    v
}

/// `[tl, tr, tb, de, df, db, qt, ql, heading one-hot]`, optionally followed
/// by the destination-direction one-hot.
pub fn encode_state(frame: &SensorFrame, norms: &EncodeNorms) -> StateVector {
    let b = |x: bool| if x { 1.0 } else { 0.0 };
    let mut v = Vec::with_capacity(norms.dim());
    v.extend([b(frame.turns.tl), b(frame.turns.tr), b(frame.turns.tb)]);
    v.push(ratio(frame.de, norms.diameter));
    v.push(ratio(frame.df0, norms.sensor_range));
    v.push(ratio(frame.db0, norms.sensor_range));
    v.push(ratio(frame.qt0, norms.qt_cap));
    v.push(ratio(frame.ql, norms.ql_cap));
    v.extend(one_hot(Some(frame.r0)));
    if norms.with_td {
        v.extend(one_hot(frame.td0));
    }
    StateVector(v)
}

/// Epsilon-greedy choice. One uniform draw decides exploration; the greedy
/// branch breaks ties towards the lowest action index.
pub fn select_action<R: Rng + ?Sized>(qvals: &[f64], epsilon: f64, rng: &mut R) -> NavAction {
    if rng.gen::<f64>() < epsilon {
        return NavAction::ALL[rng.gen_range(0..NavAction::COUNT)];
    }
    let mut best = 0;
    for (i, q) in qvals.iter().enumerate().take(NavAction::COUNT) {
        if *q > qvals[best] {
            best = i;
        }
    }
    NavAction::ALL[best]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::TurnOptions;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn norms() -> EncodeNorms {
        EncodeNorms {
            diameter: 100,
            sensor_range: 8,
            qt_cap: 100,
            ql_cap: 8,
            with_td: false,
        }
    }

    #[test]
    fn zero_frame_heading_north() {
        let frame = SensorFrame::zeroed(Compass::N);
        let s = encode_state(&frame, &norms());
        let mut expected = vec![0.0; 12];
        expected[8] = 1.0;
        assert_eq!(s.as_slice(), expected.as_slice());
    }

    #[test]
    fn saturation() {
        let mut frame = SensorFrame::zeroed(Compass::W);
        frame.df0 = 8;
        frame.de = 1000;
        frame.qt0 = 5000;
        frame.turns = TurnOptions {
            tl: true,
            tr: false,
            tb: true,
            ahead: true,
        };
        let s = encode_state(&frame, &norms());
        assert_eq!(s.as_slice()[4], 1.0);
        assert_eq!(s.as_slice()[3], 1.0);
        assert_eq!(s.as_slice()[6], 1.0);
        assert_eq!(&s.as_slice()[..3], &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn td_extension() {
        let mut frame = SensorFrame::zeroed(Compass::E);
        frame.td0 = Some(Compass::S);
        let s = encode_state(
            &frame,
            &EncodeNorms {
                with_td: true,
                ..norms()
            },
        );
        assert_eq!(s.len(), 16);
        assert_eq!(&s.as_slice()[12..], &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn greedy_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            select_action(&[0.1, 0.9, 0.2, 0.0, 0.0], 0.0, &mut rng),
            NavAction::Right
        );
        assert_eq!(select_action(&[0.5; 5], 0.0, &mut rng), NavAction::Left);
    }

    #[test]
    fn full_exploration_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            counts[select_action(&[0.0, 9.0, 0.0, 0.0, 0.0], 1.0, &mut rng).index()] += 1;
        }
        let p = 0.2;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - mean).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn action_arity() {
        assert_eq!(NavAction::ALL.len(), 5);
        for (i, a) in NavAction::ALL.iter().enumerate() {
            assert_eq!(a.index(), i);
            assert_eq!(NavAction::from_index(i), Some(*a));
        }
    }
}
