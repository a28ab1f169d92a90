//! Vehicle state, sensing, the rule-based short-range controller and
//! kinematic action application.
//!
//! Speeds and sub-patch progress are fixed-point in units of
//! `1 / SPEED_SCALE` patches so that movement is exact and reproducible.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::TripRecord;
use crate::navigation::{FinalAction, SpeedCommand};
use crate::world::{
    signal_phase, CityMap, Compass, DistanceField, Junction, Occupancy, Patch, Phase, Turn, TurnOptions,
};

pub const SPEED_SCALE: u32 = 1000;

pub fn to_fixed(v: f64) -> u32 {
    (v * SPEED_SCALE as f64).round().max(0.0) as u32
}

pub fn from_fixed(v: u32) -> f64 {
    v as f64 / SPEED_SCALE as f64
}

fn d_range() -> u32 {
    8
}
fn d_increment() -> f64 {
    0.1
}
fn d_trap() -> u32 {
    100
}
fn d_window() -> u32 {
    50
}
fn d_min_gap() -> u32 {
    1
}
fn d_gap_step() -> f64 {
    0.2
}
fn d_margin() -> u32 {
    2
}
fn d_ring_fill() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviourParams {
    /// Look-ahead/behind distance of the neighbour sensors, patches.
    #[serde(default = "d_range")]
    pub sensor_range: u32,
    #[serde(default = "d_increment")]
    pub speed_increment: f64,
    /// Stopped steps after which trap escape is attempted.
    #[serde(default = "d_trap")]
    pub trap_threshold: u32,
    /// Window of the progress and average-speed sensors, steps.
    #[serde(default = "d_window")]
    pub progress_window: u32,
    /// Free patches required ahead at speeds up to `gap_speed_step`.
    #[serde(default = "d_min_gap")]
    pub min_gap: u32,
    /// Each further `gap_speed_step` of speed adds one patch of gap.
    #[serde(default = "d_gap_step")]
    pub gap_speed_step: f64,
    /// Extra distance beyond the minimum before accelerating.
    #[serde(default = "d_margin")]
    pub free_margin: u32,
    /// Fraction of a junction ring that may be occupied before entering
    /// vehicles have to wait.
    #[serde(default = "d_ring_fill")]
    pub ring_fill: f64,
}

impl Default for BehaviourParams {
    fn default() -> Self {
        BehaviourParams {
            sensor_range: d_range(),
            speed_increment: d_increment(),
            trap_threshold: d_trap(),
            progress_window: d_window(),
            min_gap: d_min_gap(),
            gap_speed_step: d_gap_step(),
            free_margin: d_margin(),
            ring_fill: d_ring_fill(),
        }
    }
}

impl BehaviourParams {
    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, value: String, bound: &str| Error::Range {
            key: format!("behaviour.{key}"),
            value,
            bound: bound.into(),
        };
        if self.sensor_range < 2 {
            return Err(err("sensor_range", self.sensor_range.to_string(), "must be >= 2"));
        }
        if to_fixed(self.speed_increment) == 0 || self.speed_increment > 1.0 {
            return Err(err(
                "speed_increment",
                self.speed_increment.to_string(),
                "must be in [0.001, 1]",
            ));
        }
        if self.progress_window == 0 {
            return Err(err("progress_window", "0".into(), "must be >= 1"));
        }
        if !(self.ring_fill > 0.0 && self.ring_fill < 1.0) {
            return Err(err("ring_fill", self.ring_fill.to_string(), "must be in (0, 1)"));
        }
        if to_fixed(self.gap_speed_step) == 0 {
            return Err(err(
                "gap_speed_step",
                self.gap_speed_step.to_string(),
                "must be >= 0.001",
            ));
        }
        Ok(())
    }

    pub fn increment(&self) -> u32 {
        to_fixed(self.speed_increment)
    }

    /// Minimum distance to the vehicle ahead (adjacent = 1) at `speed`.
    pub fn df_min(&self, speed: u32) -> u32 {
        let step = to_fixed(self.gap_speed_step);
        let extra = speed.saturating_sub(step).div_ceil(step);
        1 + self.min_gap + extra
    }

    /// Distance ahead at which the controller accelerates.
    pub fn df_free(&self, speed: u32) -> u32 {
        self.df_min(speed) + self.free_margin
    }
}

#[derive(Clone, Debug)]
pub struct Vehicle {
    pub id: usize,
    pub pos: Patch,
    /// Sub-patch progress in `[0, SPEED_SCALE]`.
    pub frac: u32,
    pub heading: Compass,
    pub speed: u32,
    pub v_max_local: u32,
    pub origin: Patch,
    pub destination: Patch,
    pub stopped_steps: u32,
    /// Chosen junction exit while inside a junction.
    pub exit: Option<Compass>,
    /// Passed the chosen exit because its lane was occupied; the next free
    /// exit is taken instead.
    pub missed_exit: bool,
    pub odometer: u64,
    /// Set when the vehicle arrived on a new patch in the last step.
    pub fresh: bool,
    pub trips_completed: u32,
    trip_start: u64,
    trip_length: u32,
    trip_oracle: u32,
    default_speed: f64,
    to_destination: Arc<DistanceField>,
    to_origin: Arc<DistanceField>,
    /// `(odometer, de)` for the last `progress_window + 1` steps, oldest first.
    history: VecDeque<(u64, u32)>,
}

impl Vehicle {
    /// Places a vehicle at rest on `origin`, heading along its lane.
    pub fn new(
        id: usize,
        map: &CityMap,
        origin: Patch,
        destination: Patch,
        to_destination: Arc<DistanceField>,
        to_origin: Arc<DistanceField>,
    ) -> Result<Self> {
        let heading = map.lane_dir(origin).ok_or(Error::NotDrivable(origin))?;
        if to_destination.target() != destination || to_origin.target() != origin {
            return Err(Error::Contract("distance fields do not match trip endpoints".into()));
        }
        let oracle = to_destination.get(origin).ok_or(Error::NoPath {
            from: origin,
            to: destination,
        })?;
        let mut v = Vehicle {
            id,
            pos: origin,
            frac: 0,
            heading,
            speed: 0,
            v_max_local: to_fixed(map.params().speed_limit),
            origin,
            destination,
            stopped_steps: 0,
            exit: None,
            missed_exit: false,
            odometer: 0,
            fresh: true,
            trips_completed: 0,
            trip_start: 0,
            trip_length: 0,
            trip_oracle: oracle,
            default_speed: map.params().default_speed,
            to_destination,
            to_origin,
            history: VecDeque::new(),
        };
        v.history.push_back((0, oracle));
        Ok(v)
    }

    pub fn speed_f64(&self) -> f64 {
        from_fixed(self.speed)
    }

    pub fn destination_field(&self) -> &DistanceField {
        &self.to_destination
    }

    pub fn distance_to_destination(&self) -> u32 {
        self.to_destination.get(self.pos).unwrap_or(u32::MAX)
    }

    /// Next patch the vehicle would drive onto.
    pub fn next_patch(&self, map: &CityMap, occupancy: &Occupancy) -> Option<Patch> {
        Lookahead::new(map, self, 1, occupancy).next()
    }

    fn record_history(&mut self, window: u32) {
        self.history.push_back((self.odometer, self.distance_to_destination()));
        while self.history.len() > window as usize + 1 {
            self.history.pop_front();
        }
    }
}

fn direction_between(a: Patch, b: Patch) -> Option<Compass> {
    Compass::ALL.into_iter().find(|&d| a.step(d) == b)
}

/// One move inside junction `j` from `pos` with chosen exit `exit`:
/// returns the next patch and the exit in effect afterwards. A vehicle at
/// its exit corner whose exit lane is occupied stays on the ring; once it
/// has missed its exit it leaves by the first exit with a free lane, so
/// rings drain whenever any neighbouring lane has room.
fn junction_move(j: &Junction, pos: Patch, exit: Compass, missed: bool, occupancy: &Occupancy) -> (Patch, Compass) {
    let around = || pos.step(j.ring_dir(pos).expect("exit corners lie on the ring"));
    if pos == j.exit_corner(exit) {
        let out = j.exit_lane(exit);
        return if occupancy.is_free(out) {
            (out, exit)
        } else {
            (around(), exit)
        };
    }
    if missed {
        if let Some(d) = Compass::ALL
            .into_iter()
            .find(|&d| j.has_arm(d) && j.exit_corner(d) == pos && occupancy.is_free(j.exit_lane(d)))
        {
            return (j.exit_lane(d), d);
        }
    }
    (j.route_next(pos, Compass::N, exit), exit)
}

/// Patches the vehicle will traverse, following its lane and its junction
/// route. Stops after a junction entry patch when no exit is chosen yet.
struct Lookahead<'a> {
    map: &'a CityMap,
    occupancy: &'a Occupancy,
    pos: Patch,
    heading: Compass,
    exit: Option<Compass>,
    missed: bool,
    remaining: u32,
    done: bool,
}

impl<'a> Lookahead<'a> {
    fn new(map: &'a CityMap, v: &Vehicle, range: u32, occupancy: &'a Occupancy) -> Self {
        Lookahead {
            map,
            occupancy,
            pos: v.pos,
            heading: v.heading,
            exit: v.exit,
            missed: v.missed_exit,
            remaining: range,
            done: false,
        }
    }
}

impl Iterator for Lookahead<'_> {
    type Item = Patch;

    fn next(&mut self) -> Option<Patch> {
        if self.done || self.remaining == 0 {
            return None;
        }
        let here = self.map.junction_at(self.pos);
        let next = match here {
            Some(j) => {
                let Some(exit) = self.exit.filter(|&e| j.has_arm(e)) else {
                    self.done = true;
                    return None;
                };
                let (next, exit) = junction_move(j, self.pos, exit, self.missed, self.occupancy);
                self.missed |= self.pos == j.exit_corner(exit) && j.contains(next);
                self.exit = Some(exit);
                next
            }
            None => self.pos.step(self.map.lane_dir(self.pos)?),
        };
        let there = self.map.junction_at(next);
        if here.is_none() && there.is_some() {
            self.done = true;
        }
        if here.is_some() && there.is_none() {
            self.exit = None;
            self.missed = false;
        }
        self.heading = direction_between(self.pos, next).unwrap_or(self.heading);
        self.pos = next;
        self.remaining -= 1;
        Some(next)
    }
}

/// Read-only snapshot seen by every vehicle during the decision phase.
#[derive(Clone, Copy)]
pub struct WorldView<'a> {
    pub map: &'a CityMap,
    pub occupancy: &'a Occupancy,
    pub vehicles: &'a [Vehicle],
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorFrame {
    /// Average speed over the progress window, normalised by the limit.
    pub v0: f64,
    /// Distance to the next vehicle ahead along the planned path.
    pub df0: u32,
    /// Distance to the next vehicle behind.
    pub db0: u32,
    /// Shortest-path distance to the destination.
    pub de: u32,
    /// Decrease of `de` over the progress window, patches.
    pub d_de: f64,
    /// `d_de` per step relative to the default speed, mapped into `[0, 1]`
    /// (0.5 = no progress).
    pub sd: f64,
    /// First neighbour direction that reduces `de`.
    pub td0: Option<Compass>,
    pub qt0: u32,
    /// Contiguous stopped vehicles ahead, starting at the nearest one.
    pub ql: u32,
    pub turns: TurnOptions,
    pub r0: Compass,
    /// At a stop line whose signal shows red.
    pub signal_red: bool,
    /// At a stop line and the junction ahead admits no further vehicles.
    pub entry_blocked: bool,
    /// Inside a junction, the first patch towards the left/right exit is free.
    pub escape_left: bool,
    pub escape_right: bool,
}

impl SensorFrame {
    pub fn zeroed(heading: Compass) -> Self {
        SensorFrame {
            v0: 0.0,
            df0: 0,
            db0: 0,
            de: 0,
            d_de: 0.0,
            sd: 0.0,
            td0: None,
            qt0: 0,
            ql: 0,
            turns: TurnOptions::default(),
            r0: heading,
            signal_red: false,
            entry_blocked: false,
            escape_left: false,
            escape_right: false,
        }
    }
}

pub fn sense(view: &WorldView<'_>, v: &Vehicle, params: &BehaviourParams) -> SensorFrame {
    let map = view.map;
    let range = params.sensor_range;

    let mut df0 = range;
    let mut ql = 0;
    let mut found = false;
    for (i, p) in Lookahead::new(map, v, range, view.occupancy).enumerate() {
        match view.occupancy.get(p) {
            Some(other) => {
                if !found {
                    found = true;
                    df0 = i as u32 + 1;
                }
                if view.vehicles[other].speed == 0 {
                    ql += 1;
                } else {
                    break;
                }
            }
            None if found => break,
            None => {}
        }
    }

    let mut db0 = range;
    let mut q = v.pos;
    for d in 1..=range {
        q = q.step(v.heading.back());
        let same_lane = map.lane_dir(q) == Some(v.heading) || map.junction_at(q).is_some();
        if !same_lane {
            break;
        }
        if view.occupancy.get(q).is_some() {
            db0 = d;
            break;
        }
    }

    let field = v.destination_field();
    let de = v.distance_to_destination();
    let (old_odo, old_de) = v.history.front().copied().unwrap_or((v.odometer, de));
    let elapsed = (v.history.len().max(1) - 1) as f64;
    let d_de = old_de as f64 - de as f64;
    let v_max = from_fixed(v.v_max_local).max(f64::MIN_POSITIVE);
    let (v0, sd) = if elapsed > 0.0 {
        let v0 = ((v.odometer - old_odo) as f64 / (elapsed * v_max)).clamp(0.0, 1.0);
        let progress = (d_de / (elapsed * v.default_speed)).clamp(-1.0, 1.0);
        (v0, (progress + 1.0) / 2.0)
    } else {
        ((v.speed_f64() / v_max).clamp(0.0, 1.0), 0.5)
    };

    let td0 = map
        .successors(v.pos)
        .find(|&(_, p)| field.get(p).is_some_and(|d| d < de))
        .map(|(d, _)| d);

    let turns = map.allowed_turns(v.pos, v.heading).unwrap_or_default();

    let mut signal_red = false;
    let mut entry_blocked = false;
    let mut escape_left = false;
    let mut escape_right = false;
    match map.junction_at(v.pos) {
        None => {
            if let Some(next) = map.lane_dir(v.pos).map(|d| v.pos.step(d)) {
                if map.junction_at(next).is_some() {
                    signal_red = map
                        .signal_at(v.pos)
                        .is_some_and(|s| signal_phase(s, view.step) == Phase::Red);
                    let j = map.junction_at(next).unwrap();
                    entry_blocked = ring_full(j, view.occupancy, params.ring_fill);
                }
            }
        }
        Some(j) => {
            let free_towards = |turn: Turn| {
                let dir = turn.apply(v.heading);
                j.has_arm(dir) && view.occupancy.is_free(j.route_next(v.pos, v.heading, dir))
            };
            escape_left = free_towards(Turn::Left);
            escape_right = free_towards(Turn::Right);
        }
    }

    SensorFrame {
        v0,
        df0,
        db0,
        de,
        d_de,
        sd,
        td0,
        qt0: v.stopped_steps,
        ql,
        turns,
        r0: v.heading,
        signal_red,
        entry_blocked,
        escape_left,
        escape_right,
    }
}

/// A junction ring admits new vehicles only while less than `fill` of its
/// patches are occupied, so circulating traffic keeps moving.
pub fn ring_full(j: &Junction, occupancy: &Occupancy, fill: f64) -> bool {
    let occupied = j.ring().filter(|&p| !occupancy.is_free(p)).count();
    occupied as f64 >= fill * j.ring_len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RuleAction {
    StepLeft,
    StepRight,
    StepAhead,
    SpeedUp,
    SpeedDown,
    Stop,
}

/// Priority decision tree of the driving controller.
pub fn rule_action(frame: &SensorFrame, v: &Vehicle, params: &BehaviourParams) -> RuleAction {
    if frame.df0 <= 1 || frame.signal_red || frame.entry_blocked {
        return RuleAction::Stop;
    }
    if frame.df0 < params.df_min(v.speed) {
        return if v.speed <= params.increment() {
            RuleAction::Stop
        } else {
            RuleAction::SpeedDown
        };
    }
    if v.speed > v.v_max_local {
        return RuleAction::SpeedDown;
    }
    if v.speed < v.v_max_local && (frame.df0 >= params.df_free(v.speed) || v.speed == 0) {
        return RuleAction::SpeedUp;
    }
    RuleAction::StepAhead
}

/// Turn of a long-stopped vehicle onto a free junction exit, left or right
/// in random order.
pub fn trap_escape<R: Rng + ?Sized>(
    frame: &SensorFrame,
    v: &Vehicle,
    params: &BehaviourParams,
    rng: &mut R,
) -> Option<RuleAction> {
    if v.stopped_steps <= params.trap_threshold {
        return None;
    }
    let left = (RuleAction::StepLeft, frame.turns.tl && frame.escape_left);
    let right = (RuleAction::StepRight, frame.turns.tr && frame.escape_right);
    let order = if rng.gen::<bool>() {
        [right, left]
    } else {
        [left, right]
    };
    order.into_iter().find(|(_, ok)| *ok).map(|(a, _)| a)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MoveOutcome {
    pub moved: bool,
    pub blocked: bool,
    pub trip: Option<TripRecord>,
}

/// Applies a fused action during the commit phase of step `step`.
pub fn apply_action(
    map: &CityMap,
    occupancy: &mut Occupancy,
    v: &mut Vehicle,
    action: &FinalAction,
    params: &BehaviourParams,
    step: u64,
) -> Result<MoveOutcome> {
    let mut outcome = MoveOutcome::default();
    v.fresh = false;

    if let Some(turn) = action.steer {
        let Some(j) = map.junction_at(v.pos) else {
            return Err(Error::RuleViolation(format!(
                "vehicle {} turned outside a junction at {}",
                v.id, v.pos
            )));
        };
        let dir = turn.apply(v.heading);
        if !j.has_arm(dir) {
            return Err(Error::RuleViolation(format!(
                "vehicle {} turned towards missing arm {dir:?} of junction {}",
                v.id, j.id
            )));
        }
        v.exit = Some(dir);
    }

    let inc = params.increment();
    v.speed = match action.speed {
        SpeedCommand::Keep => v.speed,
        SpeedCommand::Up => v.speed + inc,
        SpeedCommand::Down => v.speed.saturating_sub(inc),
        SpeedCommand::Stop => 0,
    }
    .min(v.v_max_local);

    if v.speed == 0 {
        v.stopped_steps += 1;
    } else {
        v.stopped_steps = 0;
        v.frac += v.speed;
        if v.frac >= SPEED_SCALE {
            let mut ahead = Lookahead::new(map, v, 1, occupancy);
            let target = ahead
                .next()
                .ok_or_else(|| Error::RuleViolation(format!("vehicle {} has no next patch at {}", v.id, v.pos)))?;
            let (exit_after, missed_after) = (ahead.exit, ahead.missed);
            if !map.is_drivable(target) {
                return Err(Error::RuleViolation(format!(
                    "vehicle {} tried to enter building patch {target}",
                    v.id
                )));
            }
            let was_in_junction = map.junction_at(v.pos).is_some();
            let admitted = was_in_junction
                || map
                    .junction_at(target)
                    .is_none_or(|j| !ring_full(j, occupancy, params.ring_fill));
            if admitted && occupancy.claim(target, v.id) {
                occupancy.release(v.pos);
                v.heading = direction_between(v.pos, target).expect("moves are between neighbours");
                v.pos = target;
                v.frac -= SPEED_SCALE;
                v.odometer += 1;
                v.trip_length += 1;
                v.fresh = true;
                outcome.moved = true;
                match (was_in_junction, map.junction_at(target).is_some()) {
                    (false, true) => v.exit = map.greedy_exit(target, v.heading, &v.to_destination),
                    (true, false) => {
                        v.exit = None;
                        v.missed_exit = false;
                    }
                    (true, true) => {
                        v.exit = exit_after;
                        v.missed_exit = missed_after;
                    }
                    _ => {}
                }
                if v.pos == v.destination {
                    outcome.trip = Some(complete_trip(v, step));
                }
            } else {
                v.frac = SPEED_SCALE;
                outcome.blocked = true;
            }
        }
    }
    v.record_history(params.progress_window);
    Ok(outcome)
}

fn complete_trip(v: &mut Vehicle, step: u64) -> TripRecord {
    let record = TripRecord {
        vehicle: v.id,
        origin: v.origin,
        destination: v.destination,
        actual_length: v.trip_length,
        actual_steps: step + 1 - v.trip_start,
        oracle_length: v.trip_oracle,
        oracle_steps: v.trip_oracle as f64 / v.default_speed,
        completed_at: step + 1,
    };
    std::mem::swap(&mut v.origin, &mut v.destination);
    std::mem::swap(&mut v.to_origin, &mut v.to_destination);
    v.trip_start = step + 1;
    v.trip_length = 0;
    v.trip_oracle = v.distance_to_destination();
    v.frac = 0;
    v.trips_completed += 1;
    v.history.clear();
    record
}
