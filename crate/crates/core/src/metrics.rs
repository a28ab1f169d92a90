//! Trip efficiency, jam detection and the sampled metrics time series.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vehicle::Vehicle;
use crate::world::{signal_phase, CityMap, Compass, Patch, Phase};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripRecord {
    pub vehicle: usize,
    pub origin: Patch,
    pub destination: Patch,
    pub actual_length: u32,
    pub actual_steps: u64,
    pub oracle_length: u32,
    /// Oracle travel time: shortest path at the default speed.
    pub oracle_steps: f64,
    /// Step count at completion (the trip ended during step `completed_at - 1`).
    pub completed_at: u64,
}

/// `(eta, tau)`: oracle over actual path length and travel time, so 1.0 is
/// optimal.
pub fn trip_efficiency(t: &TripRecord) -> Result<(f64, f64)> {
    if t.actual_length == 0 || t.actual_steps == 0 {
        return Err(Error::Contract(format!(
            "trip of vehicle {} has zero length or duration",
            t.vehicle
        )));
    }
    Ok((
        t.oracle_length as f64 / t.actual_length as f64,
        t.oracle_steps / t.actual_steps as f64,
    ))
}

fn d_window() -> u32 {
    200
}
fn d_cluster() -> usize {
    5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JamParams {
    /// Steps a vehicle must have been stationary to count.
    #[serde(default = "d_window")]
    pub window: u32,
    /// Minimum cluster size.
    #[serde(default = "d_cluster")]
    pub min_cluster: usize,
}

impl Default for JamParams {
    fn default() -> Self {
        JamParams {
            window: d_window(),
            min_cluster: d_cluster(),
        }
    }
}

impl JamParams {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.min_cluster == 0 {
            return Err(Error::Range {
                key: if self.window == 0 {
                    "jam.window"
                } else {
                    "jam.min_cluster"
                }
                .into(),
                value: "0".into(),
                bound: "must be >= 1".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JamCluster {
    pub id: usize,
    pub size: usize,
    pub min: Patch,
    pub max: Patch,
}

/// 4-connected clusters of long-stationary vehicles. Vehicles waiting on a
/// stop line in front of a red signal are not counted. Clusters are numbered
/// in row-major order of their first patch.
pub fn detect_jam(map: &CityMap, vehicles: &[Vehicle], step: u64, params: &JamParams) -> Vec<JamCluster> {
    let mut stuck = vec![false; map.width() * map.height()];
    for v in vehicles {
        if v.stopped_steps < params.window {
            continue;
        }
        let waiting_at_red = map
            .signal_at(v.pos)
            .is_some_and(|s| signal_phase(s, step) == Phase::Red);
        if !waiting_at_red {
            if let Some(i) = map.index(v.pos) {
                stuck[i] = true;
            }
        }
    }

    let mut clusters = Vec::new();
    let mut seen = vec![false; stuck.len()];
    let mut queue = VecDeque::new();
    for start in 0..stuck.len() {
        if !stuck[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let first = map.patch_at(start);
        let (mut min, mut max, mut size) = (first, first, 0);
        while let Some(i) = queue.pop_front() {
            let p = map.patch_at(i);
            size += 1;
            min = Patch::new(min.x.min(p.x), min.y.min(p.y));
            max = Patch::new(max.x.max(p.x), max.y.max(p.y));
            for d in Compass::ALL {
                if let Some(j) = map.index(p.step(d)) {
                    if stuck[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        if size >= params.min_cluster {
            clusters.push(JamCluster {
                id: clusters.len(),
                size,
                min,
                max,
            });
        }
    }
    clusters
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub step: u64,
    /// Absent until the first trip completes.
    pub eta: Option<f64>,
    pub tau: Option<f64>,
    pub nav_error_frac: f64,
    pub mean_reward: f64,
    pub jam_count: usize,
    pub vehicles: usize,
}

/// Time-ordered inputs to the aggregator.
#[derive(Clone, Debug, PartialEq)]
pub enum MetricEvent {
    Trip { step: u64, record: TripRecord },
    Prediction { step: u64, refused: bool },
    Reward { step: u64, value: f64 },
    Jams { step: u64, count: usize },
}

impl MetricEvent {
    fn step(&self) -> u64 {
        match self {
            MetricEvent::Trip { step, .. }
            | MetricEvent::Prediction { step, .. }
            | MetricEvent::Reward { step, .. }
            | MetricEvent::Jams { step, .. } => *step,
        }
    }
}

/// Running means over trips and rewards plus cumulative prediction counters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Aggregator {
    pub trips: u64,
    eta_sum: f64,
    tau_sum: f64,
    reward_sum: f64,
    pub rewards: u64,
    pub predictions_total: u64,
    pub predictions_refused: u64,
}

impl Aggregator {
    pub fn record_trip(&mut self, t: &TripRecord) -> Result<()> {
        let (eta, tau) = trip_efficiency(t)?;
        self.trips += 1;
        self.eta_sum += eta;
        self.tau_sum += tau;
        Ok(())
    }

    pub fn record_reward(&mut self, r: f64) {
        self.rewards += 1;
        self.reward_sum += r;
    }

    pub fn record_prediction(&mut self, refused: bool) {
        self.predictions_total += 1;
        self.predictions_refused += refused as u64;
    }

    /// Overwrites the prediction counters with externally summed totals.
    pub fn set_predictions(&mut self, total: u64, refused: u64) {
        self.predictions_total = total;
        self.predictions_refused = refused;
    }

    pub fn point(&self, step: u64, jam_count: usize, vehicles: usize) -> SeriesPoint {
        let mean = |sum: f64, n: u64| (n > 0).then(|| sum / n as f64);
        SeriesPoint {
            step,
            eta: mean(self.eta_sum, self.trips),
            tau: mean(self.tau_sum, self.trips),
            nav_error_frac: if self.predictions_total == 0 {
                0.0
            } else {
                self.predictions_refused as f64 / self.predictions_total as f64
            },
            mean_reward: mean(self.reward_sum, self.rewards).unwrap_or(0.0),
            jam_count,
            vehicles,
        }
    }
}

/// Samples an ordered event stream every `sampling_interval` steps up to
/// `total_steps`. The point at step `s` covers events with step `< s`; its
/// jam count is the latest jam event before `s`.
pub fn aggregate(
    events: &[MetricEvent],
    sampling_interval: u64,
    total_steps: u64,
    vehicles: usize,
) -> Result<Vec<SeriesPoint>> {
    if sampling_interval == 0 {
        return Err(Error::Contract("sampling interval must be >= 1".into()));
    }
    if events.windows(2).any(|w| w[0].step() > w[1].step()) {
        return Err(Error::Contract("metric events are not time-ordered".into()));
    }
    let mut agg = Aggregator::default();
    let mut jams = 0;
    let mut points = Vec::new();
    let mut pending = events.iter().peekable();
    let mut s = sampling_interval;
    while s <= total_steps {
        while let Some(e) = pending.next_if(|e| e.step() < s) {
            match e {
                MetricEvent::Trip { record, .. } => agg.record_trip(record)?,
                MetricEvent::Prediction { refused, .. } => agg.record_prediction(*refused),
                MetricEvent::Reward { value, .. } => agg.record_reward(*value),
                MetricEvent::Jams { count, .. } => jams = *count,
            }
        }
        points.push(agg.point(s, jams, vehicles));
        s += sampling_interval;
    }
    Ok(points)
}

fn opt6(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub const SERIES_HEADER: &str = "step,eta,tau,nav_error_frac,mean_reward,jam_count,vehicles";
pub const JAM_HEADER: &str = "step,cluster_id,size,min_x,min_y,max_x,max_y";

pub fn series_csv(points: &[SeriesPoint]) -> String {
    let mut out = String::from(SERIES_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{},{}",
            p.step,
            opt6(p.eta),
            opt6(p.tau),
            p.nav_error_frac,
            p.mean_reward,
            p.jam_count,
            p.vehicles
        );
    }
    out
}

pub fn jams_csv(reports: &[(u64, JamCluster)]) -> String {
    let mut out = String::from(JAM_HEADER);
    out.push('\n');
    for (step, c) in reports {
        let _ = writeln!(
            out,
            "{step},{},{},{},{},{},{}",
            c.id, c.size, c.min.x, c.min.y, c.max.x, c.max.y
        );
    }
    out
}
