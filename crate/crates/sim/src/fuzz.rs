//! Random scenario generation.
//!
//! A generated scenario interleaves client traffic with splits, merges and
//! membership changes, and layers message faults, partitions, crashes and
//! crashes at reconfiguration phase boundaries on top. In liveness mode
//! every fault is a window that closes by a heal time, and the scenario
//! carries a liveness bound.

use crate::scenario::{
    ClusterSpec, Delay, Fault, FaultKind, LivenessSpec, Network, OpSpec, Scenario, ScriptedOp, Trigger,
};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recraft_core::config::SubCluster;
use recraft_core::ids::{ClusterId, NodeId, NodeSet};
use recraft_core::node::{Mutation, NodeOptions};
use recraft_core::range::{Key, KeyRange};

pub const KEYS: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Faults may last until the end of the run.
    Safety,
    /// Faults heal; the run must make progress afterwards.
    Liveness,
}

#[derive(Clone, Debug)]
pub struct Profile {
    pub mode: Mode,
    pub mutation: Option<Mutation>,
    /// Liveness bound after healing.
    pub bound_ms: u64,
}

impl Profile {
    pub fn safety() -> Self {
        Profile { mode: Mode::Safety, mutation: None, bound_ms: 0 }
    }

    pub fn liveness() -> Self {
        Profile { mode: Mode::Liveness, mutation: None, bound_ms: 10_000 }
    }
}

/// What the generator believes the topology will be once earlier
/// reconfigurations succeed.
#[derive(Clone, Debug)]
struct Model {
    clusters: Vec<(ClusterId, Vec<NodeId>, KeyRange)>,
    spares: Vec<NodeId>,
    next_cluster: u64,
}

impl Model {
    fn fresh_id(&mut self) -> ClusterId {
        self.next_cluster += 1;
        ClusterId(self.next_cluster)
    }
}

fn set(nodes: &[NodeId]) -> NodeSet {
    nodes.iter().copied().collect()
}

/// Splits `range` at one of the fuzz keys so both halves are non-empty.
fn split_range<R: Rng>(rng: &mut R, range: &KeyRange) -> Option<(KeyRange, KeyRange)> {
    let mut points: Vec<&str> = KEYS[1..].to_vec();
    points.shuffle(rng);
    for p in points {
        let lo = range.intersection(&KeyRange::interval("", Some(p)));
        let hi = range.intersection(&KeyRange::interval(p, None));
        if !lo.is_empty() && !hi.is_empty() {
            return Some((lo, hi));
        }
    }
    None
}

fn reconfigure<R: Rng>(rng: &mut R, m: &mut Model) -> Option<OpSpec> {
    for _ in 0..8 {
        match rng.random_range(0..5) {
            0 => {
                let big: Vec<usize> = (0..m.clusters.len()).filter(|&i| m.clusters[i].1.len() >= 4).collect();
                let &i = big.choose(rng)?;
                let (id, mut members, range) = m.clusters.remove(i);
                let Some((lo, hi)) = split_range(rng, &range) else {
                    m.clusters.insert(i, (id, members, range));
                    continue;
                };
                members.shuffle(rng);
                let cut = rng.random_range(2..=members.len() - 2);
                let (a, b) = members.split_at(cut);
                let (ca, cb) = (m.fresh_id(), m.fresh_id());
                let subs = vec![
                    SubCluster { cluster: ca, members: set(a), range: lo.clone() },
                    SubCluster { cluster: cb, members: set(b), range: hi.clone() },
                ];
                m.clusters.push((ca, a.to_vec(), lo));
                m.clusters.push((cb, b.to_vec(), hi));
                return Some(OpSpec::Split { cluster: id, subs });
            }
            1 if m.clusters.len() >= 2 => {
                m.clusters.shuffle(rng);
                let (a, ma, ra) = m.clusters.pop()?;
                let (b, mb, rb) = m.clusters.pop()?;
                let merged = m.fresh_id();
                let mut members = ma;
                members.extend(mb);
                members.sort();
                m.clusters.push((merged, members, ra.union(&rb)));
                return Some(OpSpec::Merge { clusters: vec![a, b], merged, resume_members: None });
            }
            2 if !m.spares.is_empty() => {
                let i = rng.random_range(0..m.clusters.len());
                let s = m.spares.remove(rng.random_range(0..m.spares.len()));
                m.clusters[i].1.push(s);
                return Some(OpSpec::AddNodes { cluster: m.clusters[i].0, nodes: set(&[s]) });
            }
            3 => {
                let big: Vec<usize> = (0..m.clusters.len()).filter(|&i| m.clusters[i].1.len() >= 4).collect();
                let &i = big.choose(rng)?;
                let (cluster, members) = (m.clusters[i].0, &mut m.clusters[i].1);
                let gone = members.remove(rng.random_range(0..members.len()));
                return Some(OpSpec::RemoveNodes { cluster, nodes: set(&[gone]) });
            }
            4 if !m.spares.is_empty() => {
                let i = rng.random_range(0..m.clusters.len());
                let s = m.spares.remove(rng.random_range(0..m.spares.len()));
                let (cluster, members) = (m.clusters[i].0, &mut m.clusters[i].1);
                if members.len() > 3 {
                    members.remove(rng.random_range(0..members.len()));
                }
                members.push(s);
                members.sort();
                return Some(OpSpec::ChangeMembers { cluster, members: set(members) });
            }
            _ => {}
        }
    }
    None
}

const PHASES: [(&str, &str); 8] = [
    ("config_proposed", "split_joint"),
    ("config_committed", "split_joint"),
    ("config_proposed", "split_new"),
    ("config_committed", "split_new"),
    ("config_proposed", "merge_tx"),
    ("config_committed", "merge_tx"),
    ("config_proposed", "merge_new"),
    ("config_committed", "merge_new"),
];

pub fn generate(seed: u64, profile: &Profile) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: u64 = rng.random_range(5..=9);
    let nodes: Vec<NodeId> = (1..=n).map(NodeId).collect();
    let spare_count = rng.random_range(0..=(n as usize - 5).min(2));
    let (members, spares) = nodes.split_at(nodes.len() - spare_count);
    let mut model = Model { clusters: Vec::new(), spares: spares.to_vec(), next_cluster: 0 };
    if members.len() >= 6 && rng.random_bool(0.3) {
        let half = members.len() / 2;
        let (a, b) = (model.fresh_id(), model.fresh_id());
        model.clusters.push((a, members[..half].to_vec(), KeyRange::interval("", Some("d"))));
        model.clusters.push((b, members[half..].to_vec(), KeyRange::interval("d", None)));
    } else {
        let a = model.fresh_id();
        model.clusters.push((a, members.to_vec(), KeyRange::full()));
    }
    let clusters: Vec<ClusterSpec> =
        model.clusters.iter().map(|(id, m, r)| ClusterSpec { id: *id, members: set(m), range: r.clone() }).collect();

    let mut workload = Vec::new();
    let mut t = 800;
    for _ in 0..rng.random_range(2..=4) {
        if let Some(op) = reconfigure(&mut rng, &mut model) {
            workload.push(ScriptedOp { at_ms: t, op });
        }
        t += if rng.random_bool(0.25) { 2 } else { rng.random_range(1000..2500) };
    }
    let traffic_end = t + 1000;
    for client in 1..=3u64 {
        let mut at = rng.random_range(200..400);
        let mut count = 0;
        while at < traffic_end {
            let key = Key::from(*KEYS.choose(&mut rng).expect("keys"));
            let op = match rng.random_range(0..10) {
                0..=4 => {
                    count += 1;
                    OpSpec::Put { client, key, value: Key::from(format!("c{client}-{count}").as_str()) }
                }
                5..=8 => OpSpec::Get { client, key },
                _ => OpSpec::Delete { client, key },
            };
            workload.push(ScriptedOp { at_ms: at, op });
            at += rng.random_range(80..300);
        }
    }
    workload.sort_by_key(|w| w.at_ms);

    let liveness = profile.mode == Mode::Liveness;
    let network = Network {
        delay: match rng.random_range(0..3) {
            0 => Delay::Fixed { ms: rng.random_range(1..4) },
            1 => Delay::Uniform { min_ms: 1, max_ms: rng.random_range(2..10) },
            _ => Delay::Exponential { min_ms: 1, mean_ms: rng.random_range(1.0..5.0), max_ms: 30 },
        },
        drop_rate: if liveness { 0.0 } else { rng.random_range(0.0..0.03) },
        duplicate_rate: rng.random_range(0.0..0.03),
        reorder: rng.random_bool(0.3),
    };

    let mut faults = Vec::new();
    let window = |rng: &mut ChaCha8Rng, lo: u64, hi: u64| Some(rng.random_range(lo..hi));
    for _ in 0..rng.random_range(0..=2) {
        let mut shuffled = nodes.clone();
        shuffled.shuffle(&mut rng);
        let cut = rng.random_range(1..shuffled.len());
        faults.push(Fault {
            at_ms: Some(rng.random_range(400..traffic_end)),
            on: None,
            after_ms: 0,
            for_ms: window(&mut rng, 200, 2000),
            kind: FaultKind::Partition { groups: vec![set(&shuffled[..cut]), set(&shuffled[cut..])] },
        });
    }
    for _ in 0..rng.random_range(0..=2) {
        faults.push(Fault {
            at_ms: Some(rng.random_range(400..traffic_end)),
            on: None,
            after_ms: 0,
            for_ms: window(&mut rng, 300, 2500),
            kind: FaultKind::Crash { node: *nodes.choose(&mut rng).expect("nodes") },
        });
    }
    if rng.random_bool(0.3) {
        let mut shuffled = nodes.clone();
        shuffled.shuffle(&mut rng);
        faults.push(Fault {
            at_ms: Some(rng.random_range(400..traffic_end)),
            on: None,
            after_ms: 0,
            for_ms: window(&mut rng, 200, 1500),
            kind: FaultKind::Cut { from: set(&shuffled[..2]), to: set(&shuffled[2..4]) },
        });
    }
    if liveness && rng.random_bool(0.4) {
        faults.push(Fault {
            at_ms: Some(rng.random_range(400..traffic_end)),
            on: None,
            after_ms: 0,
            for_ms: window(&mut rng, 200, 1500),
            kind: FaultKind::Drop { rate: rng.random_range(0.05..0.3) },
        });
    }
    if rng.random_bool(0.2) {
        faults.push(Fault {
            at_ms: Some(rng.random_range(400..traffic_end)),
            on: None,
            after_ms: 0,
            for_ms: window(&mut rng, 200, 1500),
            kind: FaultKind::RegistryDown,
        });
    }
    for _ in 0..rng.random_range(0..=2) {
        let (observation, kind) = *PHASES.choose(&mut rng).expect("phases");
        faults.push(Fault {
            at_ms: None,
            on: Some(Trigger { observation: observation.into(), kind: Some(kind.into()), cluster: None, nth: 0 }),
            after_ms: rng.random_range(0..3),
            for_ms: window(&mut rng, 500, 2000),
            kind: FaultKind::CrashEmitter,
        });
    }
    if !liveness {
        // Some faults never heal.
        for f in faults.iter_mut() {
            if rng.random_bool(0.15) {
                f.for_ms = None;
            }
        }
    }

    // Windows opened by phase triggers can start as late as the last
    // reconfiguration plus its running time.
    let latest_trigger = t + 4000;
    let heal = faults
        .iter()
        .map(|f| f.at_ms.unwrap_or(latest_trigger) + f.after_ms + f.for_ms.unwrap_or(0))
        .max()
        .unwrap_or(0)
        .max(traffic_end);
    let horizon_ms = if liveness { heal + profile.bound_ms + 1000 } else { traffic_end + 6000 };

    Scenario {
        name: format!("fuzz-{seed}"),
        seed,
        horizon_ms,
        tick_ms: 5,
        network,
        node: NodeOptions::default(),
        clusters,
        spares: spares.to_vec(),
        workload,
        faults,
        client: Default::default(),
        liveness: liveness.then_some(LivenessSpec { heal_ms: heal, bound_ms: profile.bound_ms, convergence: true }),
        mutation: profile.mutation,
    }
}
