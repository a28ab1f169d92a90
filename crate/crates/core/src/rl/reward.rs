use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vehicle::SensorFrame;

fn one() -> f64 {
    1.0
}
fn d_alpha() -> f64 {
    0.05
}
fn d_penalty() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    #[serde(default = "one")]
    pub a: f64,
    #[serde(default = "one")]
    pub b: f64,
    #[serde(default = "one")]
    pub c: f64,
    /// Smoothing factor of the running averages.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Subtracted from the normalised reward of a refused proposal.
    #[serde(default = "d_penalty")]
    pub refusal_penalty: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            a: 1.0,
            b: 1.0,
            c: 1.0,
            alpha: d_alpha(),
            refusal_penalty: d_penalty(),
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("a", self.a),
            ("b", self.b),
            ("c", self.c),
            ("refusal_penalty", self.refusal_penalty),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Range {
                    key: format!("reward.{key}"),
                    value: v.to_string(),
                    bound: "must be a finite value >= 0".into(),
                });
            }
        }
        if self.total() <= 0.0 {
            return Err(Error::Range {
                key: "reward.a + reward.b + reward.c".into(),
                value: self.total().to_string(),
                bound: "must be > 0".into(),
            });
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Range {
                key: "reward.alpha".into(),
                value: self.alpha.to_string(),
                bound: "must be in (0, 1]".into(),
            });
        }
        Ok(())
    }

    pub fn total(&self) -> f64 {
        self.a + self.b + self.c
    }
}

/// The three reward observables taken from a sensor frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RewardInputs {
    pub v0: f64,
    pub qt0: f64,
    pub sd: f64,
}

impl RewardInputs {
    pub fn from_frame(frame: &SensorFrame) -> Self {
        RewardInputs {
            v0: frame.v0,
            qt0: frame.qt0 as f64,
            sd: frame.sd,
        }
    }
}

/// Exponentially weighted means of the reward observables.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningAverages {
    pub v0: f64,
    pub qt0: f64,
    pub sd: f64,
    pub initialised: bool,
}

impl RunningAverages {
    pub fn update(&mut self, x: RewardInputs, alpha: f64) {
        if !self.initialised {
            *self = RunningAverages {
                v0: x.v0,
                qt0: x.qt0,
                sd: x.sd,
                initialised: true,
            };
            return;
        }
        self.v0 = (1.0 - alpha) * self.v0 + alpha * x.v0;
        self.qt0 = (1.0 - alpha) * self.qt0 + alpha * x.qt0;
        self.sd = (1.0 - alpha) * self.sd + alpha * x.sd;
    }
}

/// `(x - mean) / max(x, mean)` for non-negative arguments, 0 when both are 0.
pub fn relative_deviation(x: f64, mean: f64) -> f64 {
    let m = x.max(mean);
    if m == 0.0 {
        0.0
    } else {
        (x - mean) / m
    }
}

/// Raw reward in `[-(a+b+c), a+b+c]`: above-average speed and progress are
/// rewarded, above-average queuing time is penalised.
pub fn reward_raw(x: RewardInputs, avg: &RunningAverages, w: &RewardWeights) -> f64 {
    if !avg.initialised {
        return 0.0;
    }
    w.a * relative_deviation(x.v0, avg.v0) - w.b * relative_deviation(x.qt0, avg.qt0)
        + w.c * relative_deviation(x.sd, avg.sd)
}

pub fn reward(frame: &SensorFrame, avg: &RunningAverages, w: &RewardWeights) -> f64 {
    reward_raw(RewardInputs::from_frame(frame), avg, w)
}

/// Reward handed to the learner: scaled into `[-1, 1]`, minus the refusal
/// penalty when the proposal was refused by fusion.
pub fn learner_reward(raw: f64, w: &RewardWeights, refused: bool) -> f64 {
    let r = raw / w.total();
    if refused {
        r - w.refusal_penalty
    } else {
        r
    }
}
