//! Hybrid action pipeline: the learned navigator proposes, the fusion
//! layer checks the proposal against the rule controller and the street
//! constraints, and the per-vehicle agent books rewards and transitions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rl::{
    encode_state, learner_reward, reward, select_action, EncodeNorms, Learner, NavAction, RewardInputs, RewardWeights,
    RunningAverages, StateVector, Transition,
};
use crate::vehicle::{rule_action, sense, trap_escape, BehaviourParams, RuleAction, SensorFrame, Vehicle, WorldView};
use crate::world::Turn;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpeedCommand {
    Keep,
    Up,
    Down,
    Stop,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Rule,
    Learned,
    Escape,
}

/// Action committed to the vehicle in one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAction {
    /// New junction exit relative to the current heading, if any.
    pub steer: Option<Turn>,
    pub speed: SpeedCommand,
    pub provenance: Provenance,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionState {
    /// Steps until another learned turn may be accepted.
    pub cooldown_remaining: u32,
    pub predictions_total: u64,
    pub predictions_refused: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FusionParams {
    pub turn_cooldown: u32,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams { turn_cooldown: 10 }
    }
}

/// Result of one fusion call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Fused {
    pub action: FinalAction,
    /// The navigator's proposal was consulted and refused.
    pub refused: bool,
}

/// Arbitrates between the rule action (possibly a trap escape) and an
/// optional navigator proposal. Must be called once per vehicle per step:
/// the turn cooldown counts calls.
pub fn fuse(
    rule: RuleAction,
    escape: Option<RuleAction>,
    nav: Option<NavAction>,
    frame: &SensorFrame,
    fs: &mut FusionState,
    params: &FusionParams,
) -> Fused {
    fs.cooldown_remaining = fs.cooldown_remaining.saturating_sub(1);

    let rule_speed = match rule {
        RuleAction::Stop => SpeedCommand::Stop,
        RuleAction::SpeedDown => SpeedCommand::Down,
        RuleAction::SpeedUp => SpeedCommand::Up,
        RuleAction::StepAhead | RuleAction::StepLeft | RuleAction::StepRight => SpeedCommand::Keep,
    };
    let safety_critical = matches!(rule_speed, SpeedCommand::Stop | SpeedCommand::Down);
    let escape_turn = match escape {
        Some(RuleAction::StepLeft) => Some(Turn::Left),
        Some(RuleAction::StepRight) => Some(Turn::Right),
        _ => None,
    };

    let mut action = FinalAction {
        steer: escape_turn,
        speed: rule_speed,
        provenance: if escape_turn.is_some() {
            Provenance::Escape
        } else {
            Provenance::Rule
        },
    };
    let Some(nav) = nav else {
        return Fused { action, refused: false };
    };
    fs.predictions_total += 1;

    let refused = match nav.turn() {
        Some(turn) => {
            let ok = escape_turn.is_none() && fs.cooldown_remaining == 0 && frame.turns.allows(turn);
            if ok {
                action.steer = Some(turn);
                action.provenance = Provenance::Learned;
                fs.cooldown_remaining = params.turn_cooldown;
            }
            !ok
        }
        None => {
            if !safety_critical {
                action.speed = if nav == NavAction::SpeedUp {
                    SpeedCommand::Up
                } else {
                    SpeedCommand::Down
                };
                action.provenance = Provenance::Learned;
            }
            false
        }
    };
    if refused {
        fs.predictions_refused += 1;
    }
    Fused { action, refused }
}

pub fn update_averages(avg: &mut RunningAverages, frame: &SensorFrame, alpha: f64) {
    avg.update(RewardInputs::from_frame(frame), alpha);
}

#[derive(Clone, Debug)]
struct Pending {
    state: StateVector,
    action: NavAction,
    refused: bool,
    terminal: bool,
}

/// Private random stream `k` (0..3) of vehicle `id`. Stream 0 is reserved
/// for model initialisation and assignment; the run-wide stream is the
/// generator's default stream.
pub fn vehicle_stream(seed: u64, id: usize, k: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3 * id as u64 + 1 + k);
    rng
}

/// Settings shared by all agents of a run.
#[derive(Clone, Debug)]
pub struct DecisionContext {
    pub behaviour: BehaviourParams,
    pub fusion: FusionParams,
    pub rewards: RewardWeights,
    pub norms: EncodeNorms,
    /// Percentage of decision points at which the navigator is consulted.
    pub superposition: u32,
}

/// Per-vehicle decision maker: fusion state, running averages, optional
/// learner and the vehicle's private random streams.
#[derive(Clone, Debug)]
pub struct Agent {
    pub learner: Option<Learner>,
    pub fusion: FusionState,
    pub averages: RunningAverages,
    pub reward_sum: f64,
    pub reward_count: u64,
    /// Rewards booked at or after `ranking_from` (pretraining selection).
    pub ranked_reward: f64,
    pub ranking_from: u64,
    pending: Option<Pending>,
    nav_rng: ChaCha8Rng,
    drive_rng: ChaCha8Rng,
}

/// Outcome of the decision phase for one vehicle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub action: FinalAction,
    pub rule: RuleAction,
    /// Learner-visible reward booked this step, if a transition closed.
    pub reward: Option<f64>,
}

impl Agent {
    /// `seed` and `id` select two independent random streams: one for the
    /// navigator (exploration, replay sampling), one for driving (trap escape).
    pub fn new(learner: Option<Learner>, seed: u64, id: usize) -> Self {
        Agent {
            learner,
            fusion: FusionState::default(),
            averages: RunningAverages::default(),
            reward_sum: 0.0,
            reward_count: 0,
            ranked_reward: 0.0,
            ranking_from: u64::MAX,
            pending: None,
            nav_rng: vehicle_stream(seed, id, 1),
            drive_rng: vehicle_stream(seed, id, 2),
        }
    }

    fn consults(&mut self, superposition: u32) -> bool {
        match superposition {
            0 => false,
            p if p >= 100 => true,
            p => self.nav_rng.gen_range(0..100) < p,
        }
    }

    /// Senses, runs the rule controller and, at decision points, the
    /// navigator; returns the fused action. Reads only the snapshot.
    pub fn decide(&mut self, view: &WorldView<'_>, v: &Vehicle, ctx: &DecisionContext) -> Result<Decision> {
        let frame = sense(view, v, &ctx.behaviour);
        let rule = rule_action(&frame, v, &ctx.behaviour);
        let escape = trap_escape(&frame, v, &ctx.behaviour, &mut self.drive_rng);

        let mut booked = None;
        let mut proposal = None;
        if v.fresh && self.learner.is_some() && self.consults(ctx.superposition) {
            let state = encode_state(&frame, &ctx.norms);
            if let Some(p) = self.pending.take() {
                let raw = reward(&frame, &self.averages, &ctx.rewards);
                let r = learner_reward(raw, &ctx.rewards, p.refused);
                self.reward_sum += r;
                self.reward_count += 1;
                if view.step >= self.ranking_from {
                    self.ranked_reward += r;
                }
                booked = Some(r);
                let learner = self.learner.as_mut().unwrap();
                learner.record(Transition {
                    state: p.state,
                    action: p.action,
                    reward: r,
                    next_state: state.clone(),
                    terminal: p.terminal,
                });
            }
            update_averages(&mut self.averages, &frame, ctx.rewards.alpha);
            let learner = self.learner.as_mut().unwrap();
            let q = learner.online.forward(state.as_slice())?;
            let a = select_action(&q, learner.epsilon(), &mut self.nav_rng);
            learner.decisions += 1;
            proposal = Some((state, a));
        }

        let fused = fuse(
            rule,
            escape,
            proposal.as_ref().map(|(_, a)| *a),
            &frame,
            &mut self.fusion,
            &ctx.fusion,
        );
        if let Some((state, action)) = proposal {
            self.pending = Some(Pending {
                state,
                action,
                refused: fused.refused,
                terminal: false,
            });
        }
        Ok(Decision {
            action: fused.action,
            rule,
            reward: booked,
        })
    }

    /// Marks the open transition as the last of a trip.
    pub fn trip_completed(&mut self) {
        if let Some(p) = self.pending.as_mut() {
            p.terminal = true;
        }
    }

    /// Runs a training update if one is due.
    pub fn learn(&mut self) -> Result<Option<f64>> {
        match self.learner.as_mut() {
            Some(l) => l.maybe_train(&mut self.nav_rng),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Compass, TurnOptions};

    fn frame(tl: bool, tr: bool) -> SensorFrame {
        let mut f = SensorFrame::zeroed(Compass::N);
        f.turns = TurnOptions {
            tl,
            tr,
            tb: false,
            ahead: true,
        };
        f
    }

    #[test]
    fn refused_turn_falls_back_to_rule() {
        let mut fs = FusionState::default();
        let out = fuse(
            RuleAction::StepAhead,
            None,
            Some(NavAction::Left),
            &frame(false, true),
            &mut fs,
            &FusionParams::default(),
        );
        assert!(out.refused);
        assert_eq!(out.action.steer, None);
        assert_eq!(out.action.provenance, Provenance::Rule);
        assert_eq!((fs.predictions_total, fs.predictions_refused), (1, 1));
    }

    #[test]
    fn safety_dominates_speed_proposals() {
        let mut fs = FusionState::default();
        let out = fuse(
            RuleAction::Stop,
            None,
            Some(NavAction::SpeedUp),
            &frame(true, true),
            &mut fs,
            &FusionParams::default(),
        );
        assert_eq!(out.action.speed, SpeedCommand::Stop);
        assert!(!out.refused);
    }

    #[test]
    fn accepted_turn_starts_cooldown() {
        let mut fs = FusionState::default();
        let p = FusionParams::default();
        let out = fuse(
            RuleAction::StepAhead,
            None,
            Some(NavAction::Right),
            &frame(true, true),
            &mut fs,
            &p,
        );
        assert_eq!(out.action.steer, Some(Turn::Right));
        assert_eq!(out.action.provenance, Provenance::Learned);
        assert_eq!(fs.cooldown_remaining, 10);
        // Turns in the next 10 calls are refused.
        for _ in 0..9 {
            let o = fuse(
                RuleAction::StepAhead,
                None,
                Some(NavAction::Left),
                &frame(true, true),
                &mut fs,
                &p,
            );
            assert!(o.refused);
        }
        let o = fuse(
            RuleAction::StepAhead,
            None,
            Some(NavAction::Left),
            &frame(true, true),
            &mut fs,
            &p,
        );
        assert_eq!(o.action.steer, Some(Turn::Left));
    }

    #[test]
    fn escape_takes_precedence_over_learned_turn() {
        let mut fs = FusionState::default();
        let out = fuse(
            RuleAction::Stop,
            Some(RuleAction::StepLeft),
            Some(NavAction::Right),
            &frame(true, true),
            &mut fs,
            &FusionParams::default(),
        );
        assert_eq!(out.action.steer, Some(Turn::Left));
        assert_eq!(out.action.provenance, Provenance::Escape);
        assert!(out.refused);
    }

    #[test]
    fn learned_speed_passes_when_safe() {
        let mut fs = FusionState::default();
        let out = fuse(
            RuleAction::StepAhead,
            None,
            Some(NavAction::SpeedDown),
            &frame(false, false),
            &mut fs,
            &FusionParams::default(),
        );
        assert_eq!(out.action.speed, SpeedCommand::Down);
        assert!(!out.refused);
    }

    #[test]
    fn averages_contract() {
        let mut f = SensorFrame::zeroed(Compass::N);
        f.v0 = 0.4;
        let mut avg = RunningAverages::default();
        update_averages(&mut avg, &f, 0.05);
        assert_eq!(avg.v0, 0.4);
        f.v0 = 0.9;
        update_averages(&mut avg, &f, 1.0);
        assert_eq!(avg.v0, 0.9);
    }
}
