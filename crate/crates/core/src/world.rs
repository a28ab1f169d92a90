//! Parametric grid city: geometry, lanes, junctions, fixed-cycle signals and
//! the lane-respecting street graph used as the shortest-path oracle.
//!
//! Layout of one junction of size `w = 2h + 1` centred on `(cx, cy)`, with
//! `y` growing southwards:
//!
//! ```text
//!          SB   NB
//!          |  ^
//!    WB <- +--+-- <- WB        row cy-h
//!          |  |
//!    EB -> +--+-- -> EB        row cy+h
//!          v  |
//!       cx-h  cx+h
//! ```
//!
//! Traffic keeps right: the northbound lane runs along column `cx+h`, the
//! southbound along `cx-h`, eastbound along row `cy+h` and westbound along
//! row `cy-h`. Interior columns/rows of a street are a median. Inside the
//! junction block every patch is drivable in all four directions.

use std::collections::VecDeque;
use std::fmt;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compass heading. The declaration order N, E, S, W is also the neighbour
/// order used for deterministic tie-breaking everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Compass {
    N,
    E,
    S,
    W,
}

impl Compass {
    pub const ALL: [Compass; 4] = [Compass::N, Compass::E, Compass::S, Compass::W];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn delta(self) -> (i32, i32) {
        match self {
            Compass::N => (0, -1),
            Compass::E => (1, 0),
            Compass::S => (0, 1),
            Compass::W => (-1, 0),
        }
    }

    pub fn left(self) -> Compass {
        match self {
            Compass::N => Compass::W,
            Compass::W => Compass::S,
            Compass::S => Compass::E,
            Compass::E => Compass::N,
        }
    }

    pub fn right(self) -> Compass {
        self.left().back()
    }

    pub fn back(self) -> Compass {
        match self {
            Compass::N => Compass::S,
            Compass::S => Compass::N,
            Compass::E => Compass::W,
            Compass::W => Compass::E,
        }
    }

    pub fn is_north_south(self) -> bool {
        matches!(self, Compass::N | Compass::S)
    }

    fn bit(self) -> u8 {
        1 << self.index()
    }
}

/// Turn relative to a heading.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Turn {
    Ahead,
    Left,
    Right,
    Back,
}

impl Turn {
    pub fn apply(self, heading: Compass) -> Compass {
        match self {
            Turn::Ahead => heading,
            Turn::Left => heading.left(),
            Turn::Right => heading.right(),
            Turn::Back => heading.back(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Patch {
    pub x: i32,
    pub y: i32,
}

impl Patch {
    pub const fn new(x: i32, y: i32) -> Self {
        Patch { x, y }
    }

    pub fn step(self, dir: Compass) -> Patch {
        let (dx, dy) = dir.delta();
        Patch::new(self.x + dx, self.y + dy)
    }

    pub fn manhattan(self, other: Patch) -> u32 {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }
}

impl fmt::Display for Patch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.x, self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatchKind {
    Building,
    /// `dir` is the lane direction; `None` marks a median patch.
    Street {
        dir: Option<Compass>,
        street: u16,
        segment: u16,
    },
    Junction(u16),
}

fn default_streets() -> usize {
    7
}
fn default_segment_len() -> usize {
    12
}
fn default_junction_size() -> usize {
    3
}
fn default_lane_width() -> usize {
    1
}
fn default_speed() -> f64 {
    0.2
}
fn default_cycle_len() -> u32 {
    40
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridMapParams {
    /// Number of streets running north-south.
    #[serde(default = "default_streets")]
    pub streets_ns: usize,
    /// Number of streets running east-west.
    #[serde(default = "default_streets")]
    pub streets_ew: usize,
    /// Lane patches per direction between two junctions.
    #[serde(default = "default_segment_len")]
    pub segment_len: usize,
    #[serde(default = "default_junction_size")]
    pub junction_size: usize,
    #[serde(default = "default_lane_width")]
    pub lane_width: usize,
    /// Speed assumed by the travel-time baseline, patches per step.
    #[serde(default = "default_speed")]
    pub default_speed: f64,
    /// Speed limit on every street, patches per step.
    #[serde(default = "default_speed")]
    pub speed_limit: f64,
    /// Steps per full signal cycle.
    #[serde(default = "default_cycle_len")]
    pub cycle_len: u32,
    /// Phase offset added to every signal, in steps.
    #[serde(default)]
    pub signal_offset: u32,
    /// Also signalise T-junctions on the map boundary.
    #[serde(default)]
    pub signal_boundary: bool,
}

impl Default for GridMapParams {
    fn default() -> Self {
        GridMapParams {
            streets_ns: default_streets(),
            streets_ew: default_streets(),
            segment_len: default_segment_len(),
            junction_size: default_junction_size(),
            lane_width: default_lane_width(),
            default_speed: default_speed(),
            speed_limit: default_speed(),
            cycle_len: default_cycle_len(),
            signal_offset: 0,
            signal_boundary: false,
        }
    }
}

fn range_err(key: &str, value: impl fmt::Display, bound: &str) -> Error {
    Error::Range {
        key: key.to_string(),
        value: value.to_string(),
        bound: bound.to_string(),
    }
}

impl GridMapParams {
    pub fn grid(streets_ns: usize, streets_ew: usize, segment_len: usize, junction_size: usize) -> Self {
        GridMapParams {
            streets_ns,
            streets_ew,
            segment_len,
            junction_size,
            ..GridMapParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.streets_ns < 2 {
            return Err(range_err("map.streets_ns", self.streets_ns, "must be >= 2"));
        }
        if self.streets_ew < 2 {
            return Err(range_err("map.streets_ew", self.streets_ew, "must be >= 2"));
        }
        if self.segment_len < 1 {
            return Err(range_err("map.segment_len", self.segment_len, "must be >= 1"));
        }
        if self.junction_size < 3 || self.junction_size.is_multiple_of(2) {
            return Err(range_err(
                "map.junction_size",
                self.junction_size,
                "must be odd and >= 3 (two one-way lanes per street)",
            ));
        }
        if self.lane_width != 1 {
            return Err(range_err("map.lane_width", self.lane_width, "must be 1"));
        }
        if self.cycle_len < 2 || !self.cycle_len.is_multiple_of(2) {
            return Err(range_err("map.cycle_len", self.cycle_len, "must be even and >= 2"));
        }
        if !(self.default_speed > 0.0 && self.default_speed <= 1.0) {
            return Err(range_err("map.default_speed", self.default_speed, "must be in (0, 1]"));
        }
        if !(self.speed_limit > 0.0 && self.speed_limit <= 1.0) {
            return Err(range_err("map.speed_limit", self.speed_limit, "must be in (0, 1]"));
        }
        let (w, h) = self.dimensions();
        if w.saturating_mul(h) > 16_000_000 {
            return Err(range_err("map", format!("{w}x{h}"), "at most 16M patches"));
        }
        let segments = self.streets_ns * (self.streets_ew - 1) + self.streets_ew * (self.streets_ns - 1);
        if segments > u16::MAX as usize || self.streets_ns * self.streets_ew > u16::MAX as usize {
            return Err(range_err("map", format!("{segments} segments"), "ids must fit in u16"));
        }
        Ok(())
    }

    /// Map width and height in patches.
    pub fn dimensions(&self) -> (usize, usize) {
        let pitch = self.junction_size + self.segment_len;
        let w = self.streets_ns * pitch - self.segment_len;
        let h = self.streets_ew * pitch - self.segment_len;
        (w, h)
    }

    fn half(&self) -> i32 {
        (self.junction_size / 2) as i32
    }

    fn centre(&self, k: usize) -> i32 {
        self.half() + (k * (self.junction_size + self.segment_len)) as i32
    }
}

/// Counts reported for a generated map.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapCounts {
    pub width: usize,
    pub height: usize,
    pub streets: usize,
    /// Undirected street stretches between two adjacent junctions.
    pub segments: usize,
    pub junctions: usize,
    pub internal_junctions: usize,
    pub signals: usize,
    /// Non-building patches: lanes, medians and junction blocks.
    pub street_patches: usize,
    pub lane_patches: usize,
    pub junction_patches: usize,
    /// Vehicles that fit on segment lanes, one per patch.
    pub capacity: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Junction {
    pub id: u16,
    pub center: Patch,
    pub half: i32,
    /// Segment id attached on each compass arm, indexed by `Compass::index`.
    pub arms: [Option<u16>; 4],
}

impl Junction {
    pub fn contains(&self, p: Patch) -> bool {
        (p.x - self.center.x).abs() <= self.half && (p.y - self.center.y).abs() <= self.half
    }

    pub fn has_arm(&self, dir: Compass) -> bool {
        self.arms[dir.index()].is_some()
    }

    pub fn arm_count(&self) -> usize {
        self.arms.iter().filter(|a| a.is_some()).count()
    }

    pub fn extent(&self) -> impl Iterator<Item = Patch> + '_ {
        let c = self.center;
        let h = self.half;
        (c.y - h..=c.y + h).flat_map(move |y| (c.x - h..=c.x + h).map(move |x| Patch::new(x, y)))
    }

    /// Junction patch from which a vehicle leaves towards `dir`.
    pub fn exit_corner(&self, dir: Compass) -> Patch {
        let Patch { x: cx, y: cy } = self.center;
        let h = self.half;
        match dir {
            Compass::N => Patch::new(cx + h, cy - h),
            Compass::S => Patch::new(cx - h, cy + h),
            Compass::E => Patch::new(cx + h, cy + h),
            Compass::W => Patch::new(cx - h, cy - h),
        }
    }

    /// First lane patch after leaving towards `dir`.
    pub fn exit_lane(&self, dir: Compass) -> Patch {
        self.exit_corner(dir).step(dir)
    }

    /// Junction patch first entered by traffic arriving on `arm`.
    pub fn entry_corner(&self, arm: Compass) -> Patch {
        self.exit_corner(arm.left())
    }

    /// Last lane patch before the junction on `arm` (where vehicles wait).
    pub fn stop_line(&self, arm: Compass) -> Patch {
        self.entry_corner(arm).step(arm)
    }

    /// Circulation direction on the block perimeter: a one-way ring
    /// running counter-clockwise on screen (south on the west column, east
    /// on the south row, north on the east column, west on the north row).
    /// `None` for interior patches and patches outside the block.
    pub fn ring_dir(&self, p: Patch) -> Option<Compass> {
        if !self.contains(p) {
            return None;
        }
        let (dx, dy, h) = (p.x - self.center.x, p.y - self.center.y, self.half);
        if dx == -h && dy < h {
            Some(Compass::S)
        } else if dy == h && dx < h {
            Some(Compass::E)
        } else if dx == h && dy > -h {
            Some(Compass::N)
        } else if dy == -h && dx > -h {
            Some(Compass::W)
        } else {
            None
        }
    }

    /// Number of perimeter patches.
    pub fn ring_len(&self) -> usize {
        8 * self.half as usize
    }

    /// Perimeter patches in circulation order, starting at the north-west corner.
    pub fn ring(&self) -> impl Iterator<Item = Patch> + '_ {
        let start = self.exit_corner(Compass::W);
        (0..self.ring_len()).scan(start, move |p, _| {
            let here = *p;
            *p = here.step(self.ring_dir(here).expect("perimeter patch"));
            Some(here)
        })
    }

    /// Next patch on the in-junction route from `pos` towards exit `dir`:
    /// around the ring until the exit corner, then out. `heading` does not
    /// influence the route; it is accepted for symmetry with lane movement.
    pub fn route_next(&self, pos: Patch, _heading: Compass, dir: Compass) -> Patch {
        if pos == self.exit_corner(dir) {
            return pos.step(dir);
        }
        match self.ring_dir(pos) {
            Some(d) => pos.step(d),
            None => pos.step(Compass::N),
        }
    }

    /// Moves from `pos` until the vehicle stands on the exit lane `dir`.
    pub fn route_len(&self, pos: Patch, dir: Compass) -> u32 {
        let target = self.exit_corner(dir);
        let mut p = pos;
        let mut n = 1;
        while p != target {
            match self.ring_dir(p) {
                Some(d) if n <= self.ring_len() as u32 => p = p.step(d),
                _ => return u32::MAX,
            }
            n += 1;
        }
        n
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Green,
    Red,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficSignal {
    pub id: u16,
    pub junction: u16,
    /// Arm whose incoming traffic this signal controls.
    pub arm: Compass,
    pub stop_line: Patch,
    pub offset: u32,
    pub cycle_len: u32,
}

/// North-south arms lead: green iff `(t + offset) mod cycle < cycle / 2`;
/// east-west arms show the complement.
pub fn signal_phase(signal: &TrafficSignal, t: u64) -> Phase {
    let cycle = signal.cycle_len as u64;
    let ns_green = (t + signal.offset as u64) % cycle < cycle / 2;
    if ns_green == signal.arm.is_north_south() {
        Phase::Green
    } else {
        Phase::Red
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnOptions {
    pub tl: bool,
    pub tr: bool,
    pub tb: bool,
    pub ahead: bool,
}

impl TurnOptions {
    pub fn allows(&self, turn: Turn) -> bool {
        match turn {
            Turn::Ahead => self.ahead,
            Turn::Left => self.tl,
            Turn::Right => self.tr,
            Turn::Back => self.tb,
        }
    }
}

/// Graph distances from every patch to one target patch.
#[derive(Clone, Debug)]
pub struct DistanceField {
    target: Patch,
    width: usize,
    dist: Vec<u32>,
}

impl DistanceField {
    pub const UNREACHABLE: u32 = u32::MAX;

    pub fn target(&self) -> Patch {
        self.target
    }

    pub fn get(&self, p: Patch) -> Option<u32> {
        if p.x < 0 || p.y < 0 || p.x as usize >= self.width {
            return None;
        }
        let d = *self.dist.get(p.y as usize * self.width + p.x as usize)?;
        (d != Self::UNREACHABLE).then_some(d)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShortestPath {
    pub path: Vec<Patch>,
    pub length: u32,
}

#[derive(Debug, Clone)]
pub struct CityMap {
    params: GridMapParams,
    width: usize,
    height: usize,
    patches: Vec<PatchKind>,
    /// Allowed one-patch moves out of each patch, one bit per `Compass`.
    moves: Vec<u8>,
    signal_at: Vec<Option<u16>>,
    junctions: Vec<Junction>,
    signals: Vec<TrafficSignal>,
    counts: MapCounts,
    diameter: OnceLock<u32>,
}

impl PartialEq for CityMap {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
            && self.patches == other.patches
            && self.moves == other.moves
            && self.signal_at == other.signal_at
            && self.junctions == other.junctions
            && self.signals == other.signals
            && self.counts == other.counts
    }
}

pub fn generate_map(params: &GridMapParams) -> Result<CityMap> {
    params.validate()?;
    let (width, height) = params.dimensions();
    let ns = params.streets_ns;
    let ew = params.streets_ew;
    let h = params.half();
    let len = params.segment_len as i32;

    let mut patches = vec![PatchKind::Building; width * height];
    let idx = |p: Patch| p.y as usize * width + p.x as usize;

    let ns_segment = |i: usize, k: usize| (i * (ew - 1) + k) as u16;
    let ew_segment = |j: usize, k: usize| (ns * (ew - 1) + j * (ns - 1) + k) as u16;

    for i in 0..ns {
        let cx = params.centre(i);
        for k in 0..ew - 1 {
            let seg = ns_segment(i, k);
            let y0 = params.centre(k) + h + 1;
            for y in y0..y0 + len {
                for x in cx - h..=cx + h {
                    let dir = if x == cx + h {
                        Some(Compass::N)
                    } else if x == cx - h {
                        Some(Compass::S)
                    } else {
                        None
                    };
                    patches[idx(Patch::new(x, y))] = PatchKind::Street {
                        dir,
                        street: i as u16,
                        segment: seg,
                    };
                }
            }
        }
    }
    for j in 0..ew {
        let cy = params.centre(j);
        for k in 0..ns - 1 {
            let seg = ew_segment(j, k);
            let x0 = params.centre(k) + h + 1;
            for x in x0..x0 + len {
                for y in cy - h..=cy + h {
                    let dir = if y == cy + h {
                        Some(Compass::E)
                    } else if y == cy - h {
                        Some(Compass::W)
                    } else {
                        None
                    };
                    patches[idx(Patch::new(x, y))] = PatchKind::Street {
                        dir,
                        street: (ns + j) as u16,
                        segment: seg,
                    };
                }
            }
        }
    }

    let mut junctions = Vec::with_capacity(ns * ew);
    for j in 0..ew {
        for i in 0..ns {
            let id = (j * ns + i) as u16;
            let mut arms = [None; 4];
            if j > 0 {
                arms[Compass::N.index()] = Some(ns_segment(i, j - 1));
            }
            if j + 1 < ew {
                arms[Compass::S.index()] = Some(ns_segment(i, j));
            }
            if i > 0 {
                arms[Compass::W.index()] = Some(ew_segment(j, i - 1));
            }
            if i + 1 < ns {
                arms[Compass::E.index()] = Some(ew_segment(j, i));
            }
            let junction = Junction {
                id,
                center: Patch::new(params.centre(i), params.centre(j)),
                half: h,
                arms,
            };
            for p in junction.extent() {
                patches[idx(p)] = PatchKind::Junction(id);
            }
            junctions.push(junction);
        }
    }

    let mut moves = vec![0u8; width * height];
    for y in 0..height as i32 {
        for x in 0..width as i32 {
            let p = Patch::new(x, y);
            match patches[idx(p)] {
                PatchKind::Street { dir: Some(d), .. } => moves[idx(p)] = d.bit(),
                PatchKind::Junction(jid) => {
                    moves[idx(p)] = junctions[jid as usize].ring_dir(p).map_or(0, Compass::bit);
                }
                _ => {}
            }
        }
    }
    for junction in &junctions {
        for d in Compass::ALL {
            if junction.has_arm(d) {
                moves[idx(junction.exit_corner(d))] |= d.bit();
            }
        }
    }

    let mut signals = Vec::new();
    let mut signal_at = vec![None; width * height];
    for junction in &junctions {
        let arms = junction.arm_count();
        if arms == 4 || (params.signal_boundary && arms == 3) {
            for arm in Compass::ALL.into_iter().filter(|&a| junction.has_arm(a)) {
                let id = signals.len() as u16;
                let stop_line = junction.stop_line(arm);
                signal_at[idx(stop_line)] = Some(id);
                signals.push(TrafficSignal {
                    id,
                    junction: junction.id,
                    arm,
                    stop_line,
                    offset: params.signal_offset,
                    cycle_len: params.cycle_len,
                });
            }
        }
    }

    let lane_patches = patches
        .iter()
        .filter(|k| matches!(k, PatchKind::Street { dir: Some(_), .. }))
        .count();
    let junction_patches = patches.iter().filter(|k| matches!(k, PatchKind::Junction(_))).count();
    let street_patches = patches.iter().filter(|k| !matches!(k, PatchKind::Building)).count();
    let counts = MapCounts {
        width,
        height,
        streets: ns + ew,
        segments: ns * (ew - 1) + ew * (ns - 1),
        junctions: junctions.len(),
        internal_junctions: junctions.iter().filter(|j| j.arm_count() == 4).count(),
        signals: signals.len(),
        street_patches,
        lane_patches,
        junction_patches,
        capacity: lane_patches,
    };

    let map = CityMap {
        params: params.clone(),
        width,
        height,
        patches,
        moves,
        signal_at,
        junctions,
        signals,
        counts,
        diameter: OnceLock::new(),
    };
    map.validate_connectivity()?;
    Ok(map)
}

impl CityMap {
    pub fn params(&self) -> &GridMapParams {
        &self.params
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn counts(&self) -> &MapCounts {
        &self.counts
    }

    pub fn junctions(&self) -> &[Junction] {
        &self.junctions
    }

    pub fn signals(&self) -> &[TrafficSignal] {
        &self.signals
    }

    pub fn index(&self, p: Patch) -> Option<usize> {
        (p.x >= 0 && p.y >= 0 && (p.x as usize) < self.width && (p.y as usize) < self.height)
            .then(|| p.y as usize * self.width + p.x as usize)
    }

    pub fn patch_at(&self, index: usize) -> Patch {
        Patch::new((index % self.width) as i32, (index / self.width) as i32)
    }

    pub fn kind(&self, p: Patch) -> PatchKind {
        self.index(p).map_or(PatchKind::Building, |i| self.patches[i])
    }

    /// Lanes and junction patches. Medians and buildings are not drivable.
    pub fn is_drivable(&self, p: Patch) -> bool {
        self.index(p).is_some_and(|i| self.moves[i] != 0)
    }

    pub fn lane_dir(&self, p: Patch) -> Option<Compass> {
        match self.kind(p) {
            PatchKind::Street { dir, .. } => dir,
            _ => None,
        }
    }

    pub fn can_move(&self, p: Patch, dir: Compass) -> bool {
        self.index(p).is_some_and(|i| self.moves[i] & dir.bit() != 0)
    }

    pub fn junction_at(&self, p: Patch) -> Option<&Junction> {
        match self.kind(p) {
            PatchKind::Junction(id) => Some(&self.junctions[id as usize]),
            _ => None,
        }
    }

    /// Signal controlling the stop line at `p`, if any.
    pub fn signal_at(&self, p: Patch) -> Option<&TrafficSignal> {
        self.index(p)
            .and_then(|i| self.signal_at[i])
            .map(|id| &self.signals[id as usize])
    }

    pub fn lane_patches(&self) -> impl Iterator<Item = Patch> + '_ {
        self.patches
            .iter()
            .enumerate()
            .filter(|(_, k)| matches!(k, PatchKind::Street { dir: Some(_), .. }))
            .map(|(i, _)| self.patch_at(i))
    }

    pub fn drivable_patches(&self) -> impl Iterator<Item = Patch> + '_ {
        self.moves
            .iter()
            .enumerate()
            .filter(|(_, m)| **m != 0)
            .map(|(i, _)| self.patch_at(i))
    }

    /// Out-neighbours of `p` in N, E, S, W order.
    pub fn successors(&self, p: Patch) -> impl Iterator<Item = (Compass, Patch)> + '_ {
        let mask = self.index(p).map_or(0, |i| self.moves[i]);
        Compass::ALL
            .into_iter()
            .filter(move |d| mask & d.bit() != 0)
            .map(move |d| (d, p.step(d)))
    }

    /// Turning options at `pos`. Inside a junction the exit is chosen on
    /// the entry patch only; further ring patches just continue the route.
    pub fn allowed_turns(&self, pos: Patch, heading: Compass) -> Result<TurnOptions> {
        if !self.is_drivable(pos) {
            return Err(Error::NotDrivable(pos));
        }
        Ok(match self.junction_at(pos) {
            Some(j) if pos != j.entry_corner(heading.back()) => TurnOptions {
                ahead: true,
                ..TurnOptions::default()
            },
            Some(j) => TurnOptions {
                ahead: j.has_arm(heading),
                tl: j.has_arm(heading.left()),
                tr: j.has_arm(heading.right()),
                tb: j.has_arm(heading.back()),
            },
            None => TurnOptions {
                ahead: self.can_move(pos, heading),
                ..TurnOptions::default()
            },
        })
    }

    /// Breadth-first shortest path respecting lane directions. Ties are
    /// broken by neighbour order N, E, S, W.
    pub fn shortest_path(&self, a: Patch, b: Patch) -> Result<ShortestPath> {
        for p in [a, b] {
            if !self.is_drivable(p) {
                return Err(Error::NotDrivable(p));
            }
        }
        let n = self.width * self.height;
        let start = self.index(a).unwrap();
        let goal = self.index(b).unwrap();
        let mut parent = vec![usize::MAX; n];
        parent[start] = start;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            if i == goal {
                break;
            }
            for (_, q) in self.successors(self.patch_at(i)) {
                let qi = self.index(q).unwrap();
                if parent[qi] == usize::MAX {
                    parent[qi] = i;
                    queue.push_back(qi);
                }
            }
        }
        if parent[goal] == usize::MAX {
            return Err(Error::NoPath { from: a, to: b });
        }
        let mut path = vec![b];
        let mut i = goal;
        while i != start {
            i = parent[i];
            path.push(self.patch_at(i));
        }
        path.reverse();
        let length = (path.len() - 1) as u32;
        Ok(ShortestPath { path, length })
    }

    /// Distances from every patch to `target` (reverse breadth-first search).
    pub fn distance_field(&self, target: Patch) -> Result<DistanceField> {
        let ti = self
            .index(target)
            .filter(|&i| self.moves[i] != 0)
            .ok_or(Error::NotDrivable(target))?;
        let mut dist = vec![DistanceField::UNREACHABLE; self.width * self.height];
        dist[ti] = 0;
        let mut queue = VecDeque::from([ti]);
        while let Some(i) = queue.pop_front() {
            let q = self.patch_at(i);
            for d in Compass::ALL {
                let p = q.step(d.back());
                if self.can_move(p, d) {
                    let pi = self.index(p).unwrap();
                    if dist[pi] == DistanceField::UNREACHABLE {
                        dist[pi] = dist[i] + 1;
                        queue.push_back(pi);
                    }
                }
            }
        }
        Ok(DistanceField {
            target,
            width: self.width,
            dist,
        })
    }

    /// Exit of the junction containing `pos` that minimises the remaining
    /// distance to the target of `field`. Candidates are tried ahead, right,
    /// left, back; the first minimum wins.
    pub fn greedy_exit(&self, pos: Patch, heading: Compass, field: &DistanceField) -> Option<Compass> {
        let junction = self.junction_at(pos)?;
        let mut best: Option<(u32, Compass)> = None;
        for turn in [Turn::Ahead, Turn::Right, Turn::Left, Turn::Back] {
            let dir = turn.apply(heading);
            if !junction.has_arm(dir) {
                continue;
            }
            let Some(rest) = field.get(junction.exit_lane(dir)) else {
                continue;
            };
            let cost = junction.route_len(pos, dir) + rest;
            if best.is_none_or(|(c, _)| cost < c) {
                best = Some((cost, dir));
            }
        }
        best.map(|(_, d)| d)
    }

    /// Longest shortest-path distance between two drivable patches.
    pub fn diameter(&self) -> u32 {
        *self.diameter.get_or_init(|| {
            let n = self.width * self.height;
            let mut dist = vec![u32::MAX; n];
            let mut queue = VecDeque::new();
            let mut best = 0;
            for start in (0..n).filter(|&i| self.moves[i] != 0) {
                dist.iter_mut().for_each(|d| *d = u32::MAX);
                dist[start] = 0;
                queue.push_back(start);
                while let Some(i) = queue.pop_front() {
                    best = best.max(dist[i]);
                    for (_, q) in self.successors(self.patch_at(i)) {
                        let qi = self.index(q).unwrap();
                        if dist[qi] == u32::MAX {
                            dist[qi] = dist[i] + 1;
                            queue.push_back(qi);
                        }
                    }
                }
            }
            best
        })
    }

    fn validate_connectivity(&self) -> Result<()> {
        let Some(first) = self.drivable_patches().next() else {
            return Err(Error::MapValidation("map has no drivable patches".into()));
        };
        let reach_from = self.distance_field(first)?;
        let fwd = self.shortest_reach(first);
        let total = self.drivable_patches().count();
        let back = self.drivable_patches().filter(|&p| reach_from.get(p).is_some()).count();
        if fwd != total || back != total {
            return Err(Error::MapValidation(format!(
                "street graph not strongly connected: {fwd}/{total} reachable from {first}, {back}/{total} reach it"
            )));
        }
        for p in self.drivable_patches() {
            for (_, q) in self.successors(p) {
                if !self.is_drivable(q) {
                    return Err(Error::MapValidation(format!("edge {p} -> {q} leaves the street graph")));
                }
            }
        }
        Ok(())
    }

    fn shortest_reach(&self, from: Patch) -> usize {
        let mut seen = vec![false; self.width * self.height];
        let s = self.index(from).unwrap();
        seen[s] = true;
        let mut queue = VecDeque::from([s]);
        let mut count = 0;
        while let Some(i) = queue.pop_front() {
            count += 1;
            for (_, q) in self.successors(self.patch_at(i)) {
                let qi = self.index(q).unwrap();
                if !seen[qi] {
                    seen[qi] = true;
                    queue.push_back(qi);
                }
            }
        }
        count
    }

    pub fn export(&self) -> MapExport {
        let rows = (0..self.height as i32)
            .map(|y| {
                let cells = (0..self.width as i32).map(|x| patch_char(self.kind(Patch::new(x, y))));
                run_length_encode(cells)
            })
            .collect();
        MapExport {
            params: self.params.clone(),
            counts: self.counts.clone(),
            legend: "B building, M median, J junction, N/E/S/W lane direction".into(),
            rows,
        }
    }
}

fn patch_char(kind: PatchKind) -> char {
    match kind {
        PatchKind::Building => 'B',
        PatchKind::Junction(_) => 'J',
        PatchKind::Street { dir: None, .. } => 'M',
        PatchKind::Street { dir: Some(d), .. } => match d {
            Compass::N => 'N',
            Compass::E => 'E',
            Compass::S => 'S',
            Compass::W => 'W',
        },
    }
}

fn run_length_encode(cells: impl Iterator<Item = char>) -> String {
    let mut out = String::new();
    let mut current: Option<(char, usize)> = None;
    for c in cells {
        current = match current {
            Some((prev, n)) if prev == c => Some((prev, n + 1)),
            Some((prev, n)) => {
                out.push_str(&format!("{n}{prev}"));
                Some((c, 1))
            }
            None => Some((c, 1)),
        };
    }
    if let Some((prev, n)) = current {
        out.push_str(&format!("{n}{prev}"));
    }
    out
}

/// JSON view of a map for inspection; each row is run-length encoded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapExport {
    pub params: GridMapParams,
    pub counts: MapCounts,
    pub legend: String,
    pub rows: Vec<String>,
}

impl MapExport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map export serialises")
    }
}

/// Vehicle occupancy layer over the patch grid. Stores `vehicle id + 1`,
/// zero for free patches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Occupancy {
    width: usize,
    height: usize,
    cells: Vec<u32>,
}

impl Occupancy {
    pub fn new(map: &CityMap) -> Self {
        Occupancy {
            width: map.width,
            height: map.height,
            cells: vec![0; map.width * map.height],
        }
    }

    fn index(&self, p: Patch) -> Option<usize> {
        (p.x >= 0 && p.y >= 0 && (p.x as usize) < self.width && (p.y as usize) < self.height)
            .then(|| p.y as usize * self.width + p.x as usize)
    }

    pub fn get(&self, p: Patch) -> Option<usize> {
        self.index(p)
            .and_then(|i| self.cells[i].checked_sub(1))
            .map(|v| v as usize)
    }

    pub fn is_free(&self, p: Patch) -> bool {
        self.index(p).is_some_and(|i| self.cells[i] == 0)
    }

    /// Claims `p` for `vehicle`; fails if the patch is taken or off-map.
    pub fn claim(&mut self, p: Patch, vehicle: usize) -> bool {
        match self.index(p) {
            Some(i) if self.cells[i] == 0 => {
                self.cells[i] = vehicle as u32 + 1;
                true
            }
            _ => false,
        }
    }

    pub fn release(&mut self, p: Patch) {
        if let Some(i) = self.index(p) {
            self.cells[i] = 0;
        }
    }

    pub fn occupied_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c != 0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_map() -> CityMap {
        generate_map(&GridMapParams::default()).unwrap()
    }

    #[test]
    fn paper_grid_counts() {
        let map = generate_map(&GridMapParams::grid(7, 7, 12, 3)).unwrap();
        let c = map.counts();
        assert_eq!(c.junctions, 49);
        assert_eq!(c.streets, 14);
        assert_eq!(c.segments, 84);
        assert_eq!(c.capacity, 2016);
        assert_eq!(c.internal_junctions, 25);
        assert_eq!(c.signals, 4 * c.internal_junctions);
    }

    #[test]
    fn smallest_grid() {
        let map = generate_map(&GridMapParams::grid(2, 2, 1, 3)).unwrap();
        assert_eq!(map.counts().junctions, 4);
        assert_eq!(map.counts().streets, 4);
        assert_eq!(map.counts().signals, 0);
    }

    #[test]
    fn boundary_signals_only_on_existing_arms() {
        let params = GridMapParams {
            signal_boundary: true,
            ..GridMapParams::default()
        };
        let map = generate_map(&params).unwrap();
        // 25 four-way junctions and 20 T-junctions; corners stay unsignalised.
        assert_eq!(map.counts().signals, 25 * 4 + 20 * 3);
        for s in map.signals() {
            assert!(map.junctions()[s.junction as usize].has_arm(s.arm));
        }
    }

    #[test]
    fn rejects_invalid_params() {
        let cases = [
            (GridMapParams::grid(1, 7, 12, 3), "streets_ns"),
            (GridMapParams::grid(7, 7, 0, 3), "segment_len"),
            (GridMapParams::grid(7, 7, 12, 4), "junction_size"),
            (
                GridMapParams {
                    cycle_len: 7,
                    ..GridMapParams::default()
                },
                "cycle_len",
            ),
        ];
        for (params, key) in cases {
            let err = generate_map(&params).unwrap_err();
            assert!(err.to_string().contains(key), "{err}");
        }
    }

    #[test]
    fn street_patches_match_enumeration() {
        let map = default_map();
        let mut non_building = 0;
        for y in 0..map.height() as i32 {
            for x in 0..map.width() as i32 {
                if map.kind(Patch::new(x, y)) != PatchKind::Building {
                    non_building += 1;
                }
            }
        }
        assert_eq!(map.counts().street_patches, non_building);
        assert_eq!(non_building, 84 * 12 * 3 + 49 * 9);
    }

    #[test]
    fn lanes_keep_right() {
        let map = default_map();
        for p in map.lane_patches() {
            let dir = map.lane_dir(p).unwrap();
            // The opposite lane of the same street lies to the left.
            let mut q = p;
            let mut found = false;
            for _ in 0..map.params().junction_size {
                q = q.step(dir.left());
                if map.lane_dir(q) == Some(dir.back()) {
                    found = true;
                    break;
                }
            }
            assert!(found, "no opposite lane left of {p}");
        }
    }

    #[test]
    fn mid_segment_turns() {
        let map = default_map();
        let j = &map.junctions()[8];
        let p = j.exit_lane(Compass::N).step(Compass::N).step(Compass::N);
        let t = map.allowed_turns(p, Compass::N).unwrap();
        assert_eq!(
            t,
            TurnOptions {
                ahead: true,
                tl: false,
                tr: false,
                tb: false
            }
        );
    }

    #[test]
    fn internal_entry_turns() {
        let map = default_map();
        let j = map.junctions().iter().find(|j| j.arm_count() == 4).unwrap();
        let entry = j.entry_corner(Compass::S);
        let t = map.allowed_turns(entry, Compass::N).unwrap();
        assert!(t.ahead && t.tl && t.tr && t.tb);
        let further = entry.step(Compass::N);
        let t = map.allowed_turns(further, Compass::N).unwrap();
        assert!(t.ahead && !t.tl && !t.tr && !t.tb);
    }

    #[test]
    fn boundary_arm_facing_edge() {
        let map = default_map();
        // Top row junction: no northern arm.
        let j = &map.junctions()[3];
        assert!(!j.has_arm(Compass::N));
        let t = map.allowed_turns(j.entry_corner(Compass::S), Compass::N).unwrap();
        assert!(!t.ahead);
        assert!(t.tl && t.tr && t.tb);
        // Corner junction entered from the east: only south (left) and east (back).
        let corner = &map.junctions()[0];
        let t = map.allowed_turns(corner.entry_corner(Compass::E), Compass::W).unwrap();
        assert_eq!(
            t,
            TurnOptions {
                ahead: false,
                tl: true,
                tr: false,
                tb: true
            }
        );
    }

    #[test]
    fn building_patch_is_domain_error() {
        let map = default_map();
        let p = Patch::new(5, 5);
        assert_eq!(map.kind(p), PatchKind::Building);
        assert!(matches!(map.allowed_turns(p, Compass::N), Err(Error::NotDrivable(_))));
    }

    #[test]
    fn signal_phase_examples() {
        let s = TrafficSignal {
            id: 0,
            junction: 0,
            arm: Compass::N,
            stop_line: Patch::new(0, 0),
            offset: 0,
            cycle_len: 40,
        };
        let e = TrafficSignal {
            arm: Compass::E,
            ..s.clone()
        };
        assert_eq!(signal_phase(&s, 0), Phase::Green);
        assert_eq!(signal_phase(&e, 0), Phase::Red);
        assert_eq!(signal_phase(&s, 20), Phase::Red);
        assert_eq!(signal_phase(&e, 20), Phase::Green);
    }

    #[test]
    fn signals_exclusive_and_half_duty() {
        let map = default_map();
        let cycle = map.params().cycle_len as u64;
        for j in map.junctions() {
            let sigs: Vec<_> = map.signals().iter().filter(|s| s.junction == j.id).collect();
            let mut green_steps = vec![0; sigs.len()];
            for t in 0..cycle * 3 {
                let ns = sigs
                    .iter()
                    .any(|s| s.arm.is_north_south() && signal_phase(s, t) == Phase::Green);
                let ew = sigs
                    .iter()
                    .any(|s| !s.arm.is_north_south() && signal_phase(s, t) == Phase::Green);
                assert!(!(ns && ew));
                if t < cycle {
                    for (k, s) in sigs.iter().enumerate() {
                        if signal_phase(s, t) == Phase::Green {
                            green_steps[k] += 1;
                        }
                    }
                }
            }
            assert!(green_steps.iter().all(|&g| g == cycle / 2));
        }
    }

    #[test]
    fn shortest_path_trivial() {
        let map = default_map();
        let a = map.lane_patches().next().unwrap();
        let sp = map.shortest_path(a, a).unwrap();
        assert_eq!(sp.length, 0);
        assert_eq!(sp.path, vec![a]);
        let dir = map.lane_dir(a).unwrap();
        let b = a.step(dir);
        assert_eq!(map.shortest_path(a, b).unwrap().length, 1);
    }

    #[test]
    fn distance_field_matches_shortest_path() {
        let map = generate_map(&GridMapParams::grid(3, 3, 4, 3)).unwrap();
        let target = map.lane_patches().nth(17).unwrap();
        let field = map.distance_field(target).unwrap();
        for p in map.drivable_patches() {
            assert_eq!(field.get(p), Some(map.shortest_path(p, target).unwrap().length));
        }
    }

    #[test]
    fn route_reaches_every_exit() {
        let map = default_map();
        let j = map.junctions().iter().find(|j| j.arm_count() == 4).unwrap();
        for arm in Compass::ALL {
            let heading = arm.back();
            for exit in Compass::ALL {
                let mut pos = j.entry_corner(arm);
                let mut h = heading;
                let mut steps = 0;
                while j.contains(pos) {
                    let next = j.route_next(pos, h, exit);
                    assert_eq!(pos.manhattan(next), 1);
                    let dir = Compass::ALL.into_iter().find(|&d| pos.step(d) == next).unwrap();
                    assert!(map.can_move(pos, dir));
                    h = dir;
                    pos = next;
                    steps += 1;
                }
                assert_eq!(pos, j.exit_lane(exit));
                assert_eq!(steps, j.route_len(j.entry_corner(arm), exit));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = default_map();
        let b = default_map();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a.export()).unwrap(),
            serde_json::to_string(&b.export()).unwrap()
        );
    }

    #[test]
    fn export_rows_decode_to_width() {
        let map = generate_map(&GridMapParams::grid(2, 3, 2, 3)).unwrap();
        for row in map.export().rows {
            let mut total = 0;
            let mut num = String::new();
            for c in row.chars() {
                if c.is_ascii_digit() {
                    num.push(c);
                } else {
                    total += num.parse::<usize>().unwrap();
                    num.clear();
                }
            }
            assert_eq!(total, map.width());
        }
    }

    #[test]
    fn occupancy_claims_are_exclusive() {
        let map = generate_map(&GridMapParams::grid(2, 2, 2, 3)).unwrap();
        let mut occ = Occupancy::new(&map);
        let p = map.lane_patches().next().unwrap();
        assert!(occ.claim(p, 4));
        assert!(!occ.claim(p, 5));
        assert_eq!(occ.get(p), Some(4));
        occ.release(p);
        assert!(occ.is_free(p));
    }
}
