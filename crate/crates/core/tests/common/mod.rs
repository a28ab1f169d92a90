#![allow(dead_code)]

use std::collections::btree_map::Entry;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

use microroute::rl::{NavAction, QModel, QTarget, StateVector, Transition};
use microroute::world::{CityMap, Compass, Patch, PatchKind};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Road graph rebuilt from the patch kinds alone: lanes lead one patch
/// along their direction, junction rings circulate one way and leave
/// through the exit corner of every existing arm.
pub struct OracleGraph {
    pub edges: BTreeMap<Patch, Vec<Patch>>,
}

impl OracleGraph {
    pub fn build(map: &CityMap) -> Self {
        let mut nodes = BTreeSet::new();
        for y in 0..map.height() as i32 {
            for x in 0..map.width() as i32 {
                let p = Patch::new(x, y);
                match map.kind(p) {
                    PatchKind::Street { dir: Some(_), .. } => {
                        nodes.insert(p);
                    }
                    PatchKind::Junction(_) if map.junction_at(p).unwrap().ring_dir(p).is_some() => {
                        nodes.insert(p);
                    }
                    _ => {}
                }
            }
        }
        let mut edges = BTreeMap::new();
        for &p in &nodes {
            let mut out = Vec::new();
            if let Some(dir) = map.lane_dir(p) {
                out.push(p.step(dir));
            }
            if let Some(j) = map.junction_at(p) {
                out.push(p.step(j.ring_dir(p).unwrap()));
                for d in Compass::ALL {
                    if j.has_arm(d) && j.exit_corner(d) == p {
                        out.push(p.step(d));
                    }
                }
            }
            out.retain(|q| nodes.contains(q));
            edges.insert(p, out);
        }
        OracleGraph { edges }
    }

    pub fn nodes(&self) -> impl Iterator<Item = Patch> + '_ {
        self.edges.keys().copied()
    }

    pub fn has_edge(&self, a: Patch, b: Patch) -> bool {
        self.edges.get(&a).is_some_and(|e| e.contains(&b))
    }

    /// Hop distances from `src` to every reachable node.
    pub fn bfs(&self, src: Patch) -> BTreeMap<Patch, u32> {
        let mut dist = BTreeMap::from([(src, 0)]);
        let mut queue = VecDeque::from([src]);
        while let Some(p) = queue.pop_front() {
            let d = dist[&p];
            for &q in &self.edges[&p] {
                if let Entry::Vacant(e) = dist.entry(q) {
                    e.insert(d + 1);
                    queue.push_back(q);
                }
            }
        }
        dist
    }
}

/// Compares `shortest_path` with the oracle for every ordered pair of
/// drivable patches; returns the number of pairs checked or the first
/// mismatch.
pub fn check_all_pairs(map: &CityMap) -> Result<usize, String> {
    let graph = OracleGraph::build(map);
    let drivable: BTreeSet<Patch> = map.drivable_patches().collect();
    let nodes: BTreeSet<Patch> = graph.nodes().collect();
    if drivable != nodes {
        return Err(format!(
            "drivable set differs from oracle node set ({} vs {})",
            drivable.len(),
            nodes.len()
        ));
    }
    let mut pairs = 0;
    for &a in &nodes {
        let dist = graph.bfs(a);
        for &b in &nodes {
            pairs += 1;
            let got = map.shortest_path(a, b);
            match (dist.get(&b), got) {
                (None, Err(_)) => {}
                (None, Ok(p)) => return Err(format!("{a} -> {b}: oracle unreachable, got length {}", p.length)),
                (Some(d), Err(e)) => return Err(format!("{a} -> {b}: oracle {d}, got error {e}")),
                (Some(&d), Ok(p)) => {
                    if p.length != d {
                        return Err(format!("{a} -> {b}: oracle {d}, got {}", p.length));
                    }
                    if p.path.len() != d as usize + 1 || p.path[0] != a || *p.path.last().unwrap() != b {
                        return Err(format!("{a} -> {b}: malformed path"));
                    }
                    if let Some(w) = p.path.windows(2).find(|w| !graph.has_edge(w[0], w[1])) {
                        return Err(format!("{a} -> {b}: illegal move {} -> {}", w[0], w[1]));
                    }
                }
            }
        }
    }
    Ok(pairs)
}

pub fn random_input(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Largest relative deviation between the analytic gradient and central
/// differences over all parameters of `model` for a small batch.
pub fn max_gradient_error(model: &QModel, rng: &mut ChaCha8Rng) -> f64 {
    let inputs: Vec<Vec<f64>> = (0..3).map(|_| random_input(rng, model.input_dim())).collect();
    let samples: Vec<QTarget<'_>> = inputs
        .iter()
        .map(|x| QTarget {
            state: x,
            action: rng.gen_range(0..model.output_dim()),
            target: rng.gen_range(-1.0..1.0),
        })
        .collect();
    let (_, grads) = model.loss_and_grad(&samples).unwrap();
    let analytic = grads.flat();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for (i, g) in analytic.iter().enumerate() {
        let x = model.param(i);
        probe.set_param(i, x + h);
        let up = probe.loss(&samples).unwrap();
        probe.set_param(i, x - h);
        let down = probe.loss(&samples).unwrap();
        probe.set_param(i, x);
        let numeric = (up - down) / (2.0 * h);
        let scale = g.abs().max(numeric.abs()).max(1e-7);
        worst = worst.max((g - numeric).abs() / scale);
    }
    worst
}

pub fn single_transition(rng: &mut ChaCha8Rng, reward: f64) -> Transition {
    Transition {
        state: StateVector::new(random_input(rng, 12)),
        action: NavAction::Left,
        reward,
        next_state: StateVector::new(random_input(rng, 12)),
        terminal: true,
    }
}
