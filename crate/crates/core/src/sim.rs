//! Step loop, scenario execution and the pretraining workflow.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Manifest, ScenarioConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    detect_jam, jams_csv, series_csv, trip_efficiency, Aggregator, JamCluster, SeriesPoint, TripRecord,
};
use crate::navigation::{vehicle_stream, Agent, Decision, DecisionContext};
use crate::rl::{deserialize_model, serialize_model, EncodeNorms, Learner, NavAction, QModel};
use crate::vehicle::{apply_action, Vehicle, WorldView};
use crate::world::{generate_map, CityMap, DistanceField, Occupancy, Patch};

/// Reads and validates model files against the state width of `cfg`.
pub fn load_models(cfg: &ScenarioConfig) -> Result<Vec<QModel>> {
    let dim = encode_dim(cfg);
    cfg.pretrained_models
        .iter()
        .map(|path| {
            let bytes = fs::read(path).map_err(|e| Error::ModelLoad(format!("cannot read {}: {e}", path.display())))?;
            let model = deserialize_model(&bytes)?;
            if model.input_dim() != dim || model.output_dim() != NavAction::COUNT {
                return Err(Error::ModelLoad(format!(
                    "{}: layer sizes {:?} do not fit state width {dim} and {} actions",
                    path.display(),
                    model.layer_sizes,
                    NavAction::COUNT
                )));
            }
            Ok(model)
        })
        .collect()
}

fn encode_dim(cfg: &ScenarioConfig) -> usize {
    if cfg.state_with_td {
        crate::rl::STATE_DIM_WITH_TD
    } else {
        crate::rl::STATE_DIM
    }
}

pub struct Simulation {
    cfg: ScenarioConfig,
    map: Arc<CityMap>,
    occupancy: Occupancy,
    vehicles: Vec<Vehicle>,
    agents: Vec<Agent>,
    ctx: DecisionContext,
    rng: ChaCha8Rng,
    pool: Option<rayon::ThreadPool>,
    step: u64,
    aggregator: Aggregator,
    trips: Vec<TripRecord>,
    series: Vec<SeriesPoint>,
    jams: Vec<(u64, JamCluster)>,
    trajectories: String,
    last_actions: Vec<Decision>,
}

impl Simulation {
    /// Generates the map, places the population and initialises every
    /// agent. `models` are assigned uniformly at random per vehicle; when
    /// empty, each vehicle starts from a fresh random network.
    pub fn new(cfg: &ScenarioConfig, models: &[QModel]) -> Result<Self> {
        cfg.validate()?;
        let map = Arc::new(generate_map(&cfg.map)?);
        cfg.check_capacity(map.counts())?;

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let lanes: Vec<Patch> = map.lane_patches().collect();
        let origins = rand::seq::index::sample(&mut rng, lanes.len(), cfg.vehicles);
        let mut fields: HashMap<Patch, Arc<DistanceField>> = HashMap::new();
        let mut field = |p: Patch| -> Result<Arc<DistanceField>> {
            if let Some(f) = fields.get(&p) {
                return Ok(f.clone());
            }
            let f = Arc::new(map.distance_field(p)?);
            fields.insert(p, f.clone());
            Ok(f)
        };

        let norms = EncodeNorms {
            diameter: map.diameter(),
            sensor_range: cfg.behaviour.sensor_range,
            qt_cap: cfg.behaviour.trap_threshold,
            ql_cap: cfg.behaviour.sensor_range,
            with_td: cfg.state_with_td,
        };
        let sizes = [norms.dim(), cfg.learner.hidden, NavAction::COUNT];

        let mut occupancy = Occupancy::new(&map);
        let mut vehicles = Vec::with_capacity(cfg.vehicles);
        let mut agents = Vec::with_capacity(cfg.vehicles);
        for (id, k) in origins.into_iter().enumerate() {
            let origin = lanes[k];
            let destination = loop {
                let d = lanes[rng.gen_range(0..lanes.len())];
                if d != origin {
                    break d;
                }
            };
            let v = Vehicle::new(id, &map, origin, destination, field(destination)?, field(origin)?)?;
            occupancy.claim(origin, id);
            vehicles.push(v);

            let learner = cfg.learner_enabled.then(|| {
                let mut init = vehicle_stream(cfg.seed, id, 0);
                if models.is_empty() {
                    Learner::new(QModel::random(&sizes, &mut init), cfg.learner.clone())
                } else {
                    let mut m = models[init.gen_range(0..models.len())].clone();
                    m.step_counter = 0;
                    Learner::resume(m, cfg.learner.clone())
                }
            });
            agents.push(Agent::new(learner, cfg.seed, id));
        }

        let pool = if cfg.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.workers)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", cfg.workers)))?,
            )
        } else {
            None
        };

        Ok(Simulation {
            ctx: DecisionContext {
                behaviour: cfg.behaviour.clone(),
                fusion: (&cfg.fusion).into(),
                rewards: cfg.reward.clone(),
                norms,
                superposition: cfg.superposition,
            },
            cfg: cfg.clone(),
            map,
            occupancy,
            vehicles,
            agents,
            rng,
            pool,
            step: 0,
            aggregator: Aggregator::default(),
            trips: Vec::new(),
            series: Vec::new(),
            jams: Vec::new(),
            trajectories: String::from("step,id,x,y,heading,speed\n"),
            last_actions: Vec::new(),
        })
    }

    pub fn map(&self) -> &CityMap {
        &self.map
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn occupancy(&self) -> &Occupancy {
        &self.occupancy
    }

    pub fn vehicles(&self) -> &[Vehicle] {
        &self.vehicles
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn agents_mut(&mut self) -> &mut [Agent] {
        &mut self.agents
    }

    /// Steps completed so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn trips(&self) -> &[TripRecord] {
        &self.trips
    }

    pub fn series(&self) -> &[SeriesPoint] {
        &self.series
    }

    pub fn jam_reports(&self) -> &[(u64, JamCluster)] {
        &self.jams
    }

    /// Actions committed in the last step, indexed by vehicle.
    pub fn last_actions(&self) -> &[Decision] {
        &self.last_actions
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.aggregator
    }

    pub fn manifest(&self) -> Manifest {
        Manifest::new(&self.cfg, self.map.counts())
    }

    /// Advances the world by one step: decide (parallel, read-only), commit
    /// in a seeded random order, learn, and sample metrics.
    pub fn step(&mut self) -> Result<()> {
        let t = self.step;
        let decisions: Vec<Result<Decision>> = {
            let view = WorldView {
                map: &self.map,
                occupancy: &self.occupancy,
                vehicles: &self.vehicles,
                step: t,
            };
            let ctx = &self.ctx;
            let vehicles = &self.vehicles;
            let agents = &mut self.agents;
            match &self.pool {
                Some(pool) => pool.install(|| {
                    agents
                        .par_iter_mut()
                        .zip(vehicles.par_iter())
                        .map(|(a, v)| a.decide(&view, v, ctx))
                        .collect()
                }),
                None => agents
                    .iter_mut()
                    .zip(vehicles)
                    .map(|(a, v)| a.decide(&view, v, ctx))
                    .collect(),
            }
        };
        let decisions = decisions.into_iter().collect::<Result<Vec<_>>>()?;

        let mut order: Vec<usize> = (0..self.vehicles.len()).collect();
        order.shuffle(&mut self.rng);
        for i in order {
            let v = &mut self.vehicles[i];
            let action = decisions[i].action;
            if let Some(turn) = action.steer {
                if !self.map.allowed_turns(v.pos, v.heading)?.allows(turn) {
                    return Err(Error::RuleViolation(format!(
                        "vehicle {i}: {turn:?} is not allowed at {} heading {:?}",
                        v.pos, v.heading
                    )));
                }
            }
            let outcome = apply_action(&self.map, &mut self.occupancy, v, &action, &self.ctx.behaviour, t)?;
            if let Some(trip) = outcome.trip {
                self.aggregator.record_trip(&trip)?;
                self.trips.push(trip);
                self.agents[i].trip_completed();
            }
        }
        for d in &decisions {
            if let Some(r) = d.reward {
                self.aggregator.record_reward(r);
            }
        }
        self.last_actions = decisions;

        let learned: Vec<Result<Option<f64>>> = match &self.pool {
            Some(pool) => pool.install(|| self.agents.par_iter_mut().map(Agent::learn).collect()),
            None => self.agents.iter_mut().map(Agent::learn).collect(),
        };
        for r in learned {
            r?;
        }

        self.step += 1;
        if self.step.is_multiple_of(self.cfg.sampling_interval) {
            self.sample();
        }
        Ok(())
    }

    fn sample(&mut self) {
        let s = self.step;
        let (total, refused) = self.agents.iter().fold((0, 0), |(t, r), a| {
            (t + a.fusion.predictions_total, r + a.fusion.predictions_refused)
        });
        self.aggregator.set_predictions(total, refused);
        let clusters = detect_jam(&self.map, &self.vehicles, s, &self.cfg.jam);
        self.series
            .push(self.aggregator.point(s, clusters.len(), self.vehicles.len()));
        self.jams.extend(clusters.into_iter().map(|c| (s, c)));
        if self.cfg.trajectories {
            use std::fmt::Write as _;
            for v in &self.vehicles {
                let _ = writeln!(
                    self.trajectories,
                    "{s},{},{},{},{:?},{:.3}",
                    v.id,
                    v.pos.x,
                    v.pos.y,
                    v.heading,
                    v.speed_f64()
                );
            }
        }
    }

    pub fn run_steps(&mut self, n: u64) -> Result<()> {
        for _ in 0..n {
            self.step()?;
        }
        Ok(())
    }

    /// Runs until the configured step count is reached.
    pub fn run(&mut self) -> Result<()> {
        let remaining = self.cfg.steps.saturating_sub(self.step);
        self.run_steps(remaining)
    }

    /// Collision freedom, speed-limit compliance, drivable positions and
    /// occupancy consistency.
    pub fn check_invariants(&self) -> Result<()> {
        if self.occupancy.occupied_count() != self.vehicles.len() {
            return Err(Error::RuleViolation(format!(
                "{} occupied patches for {} vehicles",
                self.occupancy.occupied_count(),
                self.vehicles.len()
            )));
        }
        for v in &self.vehicles {
            if !self.map.is_drivable(v.pos) {
                return Err(Error::RuleViolation(format!(
                    "vehicle {} on building patch {}",
                    v.id, v.pos
                )));
            }
            if self.occupancy.get(v.pos) != Some(v.id) {
                return Err(Error::RuleViolation(format!(
                    "vehicle {} shares or lost patch {}",
                    v.id, v.pos
                )));
            }
            if v.speed > v.v_max_local {
                return Err(Error::RuleViolation(format!(
                    "vehicle {} exceeds the speed limit",
                    v.id
                )));
            }
        }
        Ok(())
    }

    pub fn series_csv(&self) -> String {
        series_csv(&self.series)
    }

    pub fn jams_csv(&self) -> String {
        jams_csv(&self.jams)
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub metrics_csv: PathBuf,
    pub jams_csv: PathBuf,
    pub manifest: PathBuf,
    pub trajectories: Option<PathBuf>,
    pub models: Vec<PathBuf>,
}

/// Runs a scenario and writes its artifacts into `cfg.out`.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunArtifacts> {
    let models = load_models(cfg)?;
    let mut sim = Simulation::new(cfg, &models)?;
    let out = &cfg.out;
    create_dir(out)?;
    let manifest = out.join("manifest.json");
    write(&manifest, sim.manifest().to_json())?;
    log::info!(
        "running {} vehicles for {} steps on a {}x{} map",
        cfg.vehicles,
        cfg.steps,
        sim.map().width(),
        sim.map().height()
    );
    sim.run()?;

    let artifacts = RunArtifacts {
        metrics_csv: out.join("metrics.csv"),
        jams_csv: out.join("jams.csv"),
        manifest,
        trajectories: cfg.trajectories.then(|| out.join("trajectories.csv")),
        models: Vec::new(),
    };
    write(&artifacts.metrics_csv, sim.series_csv())?;
    write(&artifacts.jams_csv, sim.jams_csv())?;
    if let Some(p) = &artifacts.trajectories {
        write(p, &sim.trajectories)?;
    }
    let mut artifacts = artifacts;
    if cfg.save_models {
        let dir = out.join("models");
        create_dir(&dir)?;
        for (id, agent) in sim.agents().iter().enumerate() {
            if let Some(l) = &agent.learner {
                let p = dir.join(format!("vehicle_{id:04}.json"));
                write(&p, serialize_model(&l.online))?;
                artifacts.models.push(p);
            }
        }
    }
    Ok(artifacts)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub vehicle: usize,
    /// Normalised reward accumulated over the final quarter of the run.
    pub ranked_reward: f64,
    pub trips: u32,
    pub mean_eta: Option<f64>,
    pub model: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub ranking: Vec<RankEntry>,
    pub model_files: Vec<PathBuf>,
    pub ranking_manifest: PathBuf,
}

/// Trains `cfg.pretrain.vehicles` navigators at low density, ranks them by
/// reward over the final 25% of steps (ties: mean path efficiency, then id)
/// and writes the best `top_k` models into `cfg.out`.
pub fn pretrain(cfg: &ScenarioConfig) -> Result<PretrainOutcome> {
    let mut pcfg = cfg.clone();
    pcfg.vehicles = cfg.pretrain.vehicles;
    pcfg.steps = cfg.pretrain.steps;
    pcfg.learner_enabled = true;
    pcfg.superposition = 100;
    let models = load_models(&pcfg)?;
    let mut sim = Simulation::new(&pcfg, &models)?;
    let ranking_from = pcfg.steps - pcfg.steps / 4;
    for a in sim.agents_mut() {
        a.ranking_from = ranking_from;
    }
    log::info!("pretraining {} navigators for {} steps", pcfg.vehicles, pcfg.steps);
    sim.run()?;

    if sim.trips().is_empty() {
        log::warn!("no trip completed during pretraining; ranking by reward only");
    }
    let mut ranking: Vec<RankEntry> = sim
        .agents()
        .iter()
        .enumerate()
        .map(|(id, a)| {
            let etas: Vec<f64> = sim
                .trips()
                .iter()
                .filter(|t| t.vehicle == id)
                .filter_map(|t| trip_efficiency(t).ok().map(|e| e.0))
                .collect();
            RankEntry {
                vehicle: id,
                ranked_reward: a.ranked_reward,
                trips: etas.len() as u32,
                mean_eta: (!etas.is_empty()).then(|| etas.iter().sum::<f64>() / etas.len() as f64),
                model: None,
            }
        })
        .collect();
    ranking.sort_by(|a, b| {
        b.ranked_reward
            .total_cmp(&a.ranked_reward)
            .then(b.mean_eta.unwrap_or(0.0).total_cmp(&a.mean_eta.unwrap_or(0.0)))
            .then(a.vehicle.cmp(&b.vehicle))
    });

    let out = &cfg.out;
    create_dir(out)?;
    let mut model_files = Vec::new();
    for (rank, entry) in ranking.iter_mut().take(cfg.pretrain.top_k).enumerate() {
        let learner = sim.agents()[entry.vehicle]
            .learner
            .as_ref()
            .expect("pretraining enables learners");
        let path = out.join(format!("model_{rank}.json"));
        write(&path, serialize_model(&learner.online))?;
        entry.model = Some(path.clone());
        model_files.push(path);
    }
    let ranking_manifest = out.join("ranking.json");
    let doc = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": pcfg.seed,
        "ranking_from_step": ranking_from,
        "config": pcfg,
        "ranking": ranking,
    });
    write(
        &ranking_manifest,
        serde_json::to_string_pretty(&doc).expect("ranking serialises"),
    )?;
    Ok(PretrainOutcome {
        ranking,
        model_files,
        ranking_manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    fn small(extra: &str) -> ScenarioConfig {
        let mut cfg = parse_config(&format!(
            "steps = 600\n{extra}\n[map]\nstreets_ns = 3\nstreets_ew = 3\nsegment_len = 6\n"
        ))
        .unwrap();
        if !extra.contains("vehicles") {
            cfg.vehicles = 20;
        }
        cfg
    }

    #[test]
    fn population_is_constant_and_collision_free() {
        let cfg = small("");
        let mut sim = Simulation::new(&cfg, &[]).unwrap();
        for _ in 0..cfg.steps {
            sim.step().unwrap();
            sim.check_invariants().unwrap();
        }
        assert_eq!(sim.vehicles().len(), 20);
        assert_eq!(sim.series().len(), 6);
        let per_vehicle: u32 = sim.vehicles().iter().map(|v| v.trips_completed).sum();
        assert_eq!(per_vehicle as usize, sim.trips().len());
    }

    #[test]
    fn same_seed_same_series() {
        let cfg = small("");
        let run = || {
            let mut sim = Simulation::new(&cfg, &[]).unwrap();
            sim.run().unwrap();
            (sim.series_csv(), sim.jams_csv())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn worker_count_does_not_matter() {
        let a = {
            let mut sim = Simulation::new(&small("workers = 1"), &[]).unwrap();
            sim.run().unwrap();
            sim.series_csv()
        };
        let mut sim = Simulation::new(&small("workers = 3"), &[]).unwrap();
        sim.run().unwrap();
        assert_eq!(a, sim.series_csv());
    }

    #[test]
    fn over_capacity_is_rejected() {
        let err = Simulation::new(&small("vehicles = 100000"), &[]).err().unwrap();
        assert!(err.is_config());
    }

    #[test]
    fn nav_error_matches_fusion_counters() {
        let mut sim = Simulation::new(&small(""), &[]).unwrap();
        sim.run().unwrap();
        let (t, r) = sim.agents().iter().fold((0, 0), |(t, r), a| {
            (t + a.fusion.predictions_total, r + a.fusion.predictions_refused)
        });
        let last = sim.series().last().unwrap();
        assert!(t > 0);
        assert!((last.nav_error_frac - r as f64 / t as f64).abs() < 1e-12);
    }
}
