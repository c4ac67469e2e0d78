//! The discrete-event simulator.
//!
//! Every node runs the real protocol engine. Events sit in one queue ordered
//! by `(virtual time, insertion sequence)`, and all randomness comes from one
//! generator seeded by the scenario, so a `(seed, scenario)` pair always
//! yields the same trace.

use crate::scenario::{ClusterSpec, Delay, Fault, FaultKind, OpSpec, Scenario, ScenarioError, MS};
use crate::trace::{EntrySummary, EventKind, FinalNode, Trace, TraceEvent, TraceHeader};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recraft_core::config::{ClusterConfig, Participant};
use recraft_core::ids::{ClusterId, NodeId, NodeSet};
use recraft_core::kv::{ClientId, Command, KvOp};
use recraft_core::message::{Message, NamingEntry};
use recraft_core::node::{AdminError, AdminOp, AdminOutcome, ClientReply, Input, Node, NodeOptions, Output, Violation};
use recraft_core::observe::Observation;
use recraft_core::recovery::NamingRegistry;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

/// A run that records this many events is stopped. Only a defective engine
/// floods the network like that.
pub const MAX_EVENTS: usize = 400_000;

enum Event {
    Tick,
    Deliver { from: NodeId, to: NodeId, msg: Message },
    Naming { to: NodeId, entries: Vec<NamingEntry> },
    FaultStart(usize),
    FaultEnd(usize),
    OpStart(usize),
    OpAttempt(usize),
    OpDeliver { op: usize, req: u64, to: NodeId },
    OpTimeout { op: usize, req: u64 },
}

#[derive(Default)]
struct FaultState {
    active: bool,
    fired: bool,
    matches: usize,
    /// Nodes a crash fault took down.
    crashed: Vec<NodeId>,
    emitter: Option<NodeId>,
}

struct OpState {
    spec: OpSpec,
    done: bool,
    /// Current request id; 0 while waiting to retry.
    req: u64,
    tried: usize,
    target: Option<(ClusterId, NodeId)>,
    cmd: Option<Command>,
}

pub struct Sim {
    sc: Scenario,
    rng: ChaCha8Rng,
    now: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Event>,
    nodes: BTreeMap<NodeId, Node>,
    down: BTreeSet<NodeId>,
    registry: NamingRegistry,
    link_last: BTreeMap<(NodeId, NodeId), u64>,
    faults: Vec<FaultState>,
    ops: Vec<OpState>,
    client_queue: BTreeMap<u64, VecDeque<usize>>,
    client_busy: BTreeSet<u64>,
    client_seq: BTreeMap<u64, u64>,
    leader_cache: BTreeMap<ClusterId, NodeId>,
    req_op: BTreeMap<u64, usize>,
    next_req: u64,
    applied_max: BTreeMap<(ClusterId, u32), u64>,
    events: Vec<TraceEvent>,
}

/// Observation tag, configuration kind or decision, and cluster, for trigger matching.
pub fn observation_key(o: &Observation) -> (&'static str, Option<&str>, Option<ClusterId>) {
    match o {
        Observation::BecameLeader { cluster, .. } => ("became_leader", None, Some(*cluster)),
        Observation::ElectionStarted { cluster, config_kind, .. } => {
            ("election_started", Some(config_kind), Some(*cluster))
        }
        Observation::Appended { origin, config, .. } => ("appended", config.as_deref(), Some(*origin)),
        Observation::Truncated { .. } => ("truncated", None, None),
        Observation::Applied { cluster, .. } => ("applied", None, Some(*cluster)),
        Observation::ConfigActive { cluster, kind, .. } => ("config_active", Some(kind), Some(*cluster)),
        Observation::ConfigProposed { cluster, kind, .. } => ("config_proposed", Some(kind), Some(*cluster)),
        Observation::ConfigCommitted { cluster, kind, .. } => ("config_committed", Some(kind), Some(*cluster)),
        Observation::EpochBumped { .. } => ("epoch_bumped", None, None),
        Observation::SplitDone { old_cluster, .. } => ("split_done", None, Some(*old_cluster)),
        Observation::PullServed { .. } => ("pull_served", None, None),
        Observation::TxPrepared { cluster, decision, .. } => {
            ("tx_prepared", Some(decision_name(*decision)), Some(*cluster))
        }
        Observation::TxOutcome { cluster, decision, .. } => {
            ("tx_outcome", Some(decision_name(*decision)), Some(*cluster))
        }
        Observation::SnapshotExchanged { merged, .. } => ("snapshot_exchanged", None, Some(*merged)),
        Observation::MergedResumed { cluster, .. } => ("merged_resumed", None, Some(*cluster)),
        Observation::Retired => ("retired", None, None),
    }
}

fn decision_name(d: recraft_core::config::Decision) -> &'static str {
    match d {
        recraft_core::config::Decision::Commit => "commit",
        recraft_core::config::Decision::Abort => "abort",
    }
}

fn sample_delay(rng: &mut ChaCha8Rng, d: &Delay) -> u64 {
    match d {
        Delay::Fixed { ms } => ms * MS,
        Delay::Uniform { min_ms, max_ms } => rng.random_range(min_ms * MS..=max_ms * MS),
        Delay::Exponential { min_ms, mean_ms, max_ms } => {
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let extra = (-u.ln() * mean_ms * MS as f64) as u64;
            (min_ms * MS + extra).min(max_ms * MS)
        }
    }
}

impl Sim {
    pub fn new(sc: &Scenario) -> Result<Sim, ScenarioError> {
        sc.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(sc.seed);
        let mut opts: NodeOptions = sc.node.clone();
        opts.mutation = sc.mutation;
        let mut nodes = BTreeMap::new();
        let mut registry = NamingRegistry::default();
        for ClusterSpec { id, members, range } in &sc.clusters {
            let config = ClusterConfig::bootstrap(*id, members.clone(), range.clone());
            for m in members {
                nodes.insert(*m, Node::bootstrap(*m, config.clone(), opts.clone(), rng.random()));
            }
            registry.register(NamingEntry { cluster: *id, members: members.clone(), range: range.clone(), epoch: 0 });
        }
        for s in &sc.spares {
            nodes.insert(*s, Node::joining(*s, opts.clone(), rng.random()));
        }
        let mut sim = Sim {
            sc: sc.clone(),
            rng,
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            nodes,
            down: BTreeSet::new(),
            registry,
            link_last: BTreeMap::new(),
            faults: sc.faults.iter().map(|_| FaultState::default()).collect(),
            ops: sc
                .workload
                .iter()
                .map(|w| OpState { spec: w.op.clone(), done: false, req: 0, tried: 0, target: None, cmd: None })
                .collect(),
            client_queue: BTreeMap::new(),
            client_busy: BTreeSet::new(),
            client_seq: BTreeMap::new(),
            leader_cache: BTreeMap::new(),
            req_op: BTreeMap::new(),
            next_req: 1,
            applied_max: BTreeMap::new(),
            events: Vec::new(),
        };
        sim.schedule(sim.sc.tick_ms * MS, Event::Tick);
        for (i, f) in sc.faults.iter().enumerate() {
            if let Some(at) = f.at_ms {
                sim.schedule(at * MS, Event::FaultStart(i));
            }
        }
        for (i, w) in sc.workload.iter().enumerate() {
            sim.schedule(w.at_ms * MS, Event::OpStart(i));
        }
        Ok(sim)
    }

    fn schedule(&mut self, at: u64, ev: Event) {
        self.seq += 1;
        self.queue.insert((at, self.seq), ev);
    }

    fn record(&mut self, node: Option<NodeId>, kind: EventKind) {
        self.events.push(TraceEvent { time: self.now, node, kind });
    }

    /// Runs to the horizon, or until the event budget runs out, and returns the trace.
    pub fn run(mut self) -> Trace {
        let horizon = self.sc.horizon_ms * MS;
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > horizon {
                break;
            }
            if self.events.len() >= MAX_EVENTS {
                self.record(None, EventKind::Halted { pending: self.queue.len() });
                break;
            }
            let ((t, _), ev) = entry.remove_entry();
            self.now = t;
            self.handle(ev);
        }
        self.now = horizon;
        self.finish()
    }

    fn finish(self) -> Trace {
        let finals = self
            .nodes
            .values()
            .map(|n| FinalNode {
                status: n.status(),
                up: !self.down.contains(&n.id()),
                base: n.log().base(),
                entries: n
                    .log()
                    .entries()
                    .iter()
                    .map(|e| EntrySummary {
                        index: e.index,
                        at: e.at,
                        origin: e.cluster,
                        chain: e.chain,
                        config: e.config().map(|c| c.kind.name().to_string()),
                    })
                    .collect(),
                kv: n.kv().data.clone(),
            })
            .collect();
        Trace {
            header: Some(TraceHeader {
                scenario: self.sc.name.clone(),
                seed: self.sc.seed,
                horizon: self.sc.horizon_ms * MS,
            }),
            events: self.events,
            finals,
        }
    }

    fn handle(&mut self, ev: Event) {
        match ev {
            Event::Tick => {
                let ids: Vec<NodeId> = self.nodes.keys().copied().filter(|n| !self.down.contains(n)).collect();
                for id in ids {
                    self.step(id, Input::Tick);
                }
                self.schedule(self.now + self.sc.tick_ms * MS, Event::Tick);
            }
            Event::Deliver { from, to, msg } => {
                if !self.down.contains(&to) && self.reachable(from, to) {
                    self.step(to, Input::Message { from, msg });
                }
            }
            Event::Naming { to, entries } => {
                if !self.down.contains(&to) {
                    self.step(to, Input::NamingResult { entries });
                }
            }
            Event::FaultStart(i) => self.start_fault(i),
            Event::FaultEnd(i) => self.end_fault(i),
            Event::OpStart(i) => {
                if self.ops[i].spec.is_client() {
                    let client = client_of(&self.ops[i].spec);
                    self.client_queue.entry(client).or_default().push_back(i);
                    self.next_client_op(client);
                } else {
                    self.issue(i);
                }
            }
            Event::OpAttempt(i) => self.attempt(i),
            Event::OpDeliver { op, req, to } => {
                if self.ops[op].req != req || self.ops[op].done || self.down.contains(&to) {
                    return;
                }
                let input = match &self.ops[op].cmd {
                    Some(cmd) => Input::Client { id: req, cmd: cmd.clone() },
                    None => match self.admin_op(op) {
                        Ok(a) => Input::Admin { id: req, cluster: self.ops[op].target.map(|(c, _)| c), op: a },
                        Err(why) => {
                            self.complete(op, false, why, None);
                            return;
                        }
                    },
                };
                self.record(Some(to), EventKind::OpSent { op });
                self.step(to, input);
            }
            Event::OpTimeout { op, req } => {
                if self.ops[op].req == req && !self.ops[op].done {
                    if let Some((c, _)) = self.ops[op].target {
                        self.leader_cache.remove(&c);
                    }
                    self.ops[op].tried += 1;
                    self.attempt(op);
                }
            }
        }
    }

    // ---- network ----

    fn active(&self) -> impl Iterator<Item = &Fault> {
        self.sc.faults.iter().zip(&self.faults).filter(|(_, s)| s.active).map(|(f, _)| f)
    }

    fn reachable(&self, from: NodeId, to: NodeId) -> bool {
        for f in self.active() {
            match &f.kind {
                FaultKind::Partition { groups } => {
                    let g = |n: NodeId| groups.iter().position(|g| g.contains(&n));
                    if g(from) != g(to) {
                        return false;
                    }
                }
                FaultKind::Cut { from: a, to: b } if a.contains(&from) && b.contains(&to) => return false,
                _ => {}
            }
        }
        true
    }

    fn send(&mut self, from: NodeId, to: NodeId, msg: Message) {
        if !self.nodes.contains_key(&to) {
            return;
        }
        let mut drop_rate = self.sc.network.drop_rate;
        let mut dup_rate = self.sc.network.duplicate_rate;
        let mut reorder = self.sc.network.reorder;
        let mut delay = self.sc.network.delay.clone();
        for f in self.active() {
            match &f.kind {
                FaultKind::Drop { rate } => drop_rate = drop_rate.max(*rate),
                FaultKind::Duplicate { rate } => dup_rate = dup_rate.max(*rate),
                FaultKind::Reorder => reorder = true,
                FaultKind::Delay { delay: d } => delay = d.clone(),
                _ => {}
            }
        }
        if drop_rate > 0.0 && self.rng.random_bool(drop_rate) {
            return;
        }
        let copies = if dup_rate > 0.0 && self.rng.random_bool(dup_rate) { 2 } else { 1 };
        for _ in 0..copies {
            let mut at = self.now + sample_delay(&mut self.rng, &delay);
            if !reorder {
                let last = self.link_last.entry((from, to)).or_insert(0);
                at = at.max(*last);
                *last = at;
            }
            self.schedule(at, Event::Deliver { from, to, msg: msg.clone() });
        }
    }

    // ---- nodes ----

    fn step(&mut self, id: NodeId, input: Input) {
        let Some(node) = self.nodes.get_mut(&id) else { return };
        let is_tick = input == Input::Tick;
        let outs = node.step(self.now, input.clone());
        if is_tick && outs.is_empty() {
            return;
        }
        let digest = node.state_digest();
        self.record(Some(id), EventKind::Step { input, outputs: outs.clone(), digest });
        for o in outs {
            self.output(id, o);
        }
    }

    fn output(&mut self, id: NodeId, o: Output) {
        match o {
            Output::Send { to, msg } => self.send(id, to, msg),
            Output::ClientReply { id: req, reply } => self.client_reply(id, req, reply),
            Output::AdminReply { id: req, reply } => self.admin_reply(id, req, reply),
            Output::Register { entry } => {
                if !self.registry_down() {
                    self.registry.register(entry);
                }
            }
            Output::NamingLookup { range } => {
                if !self.registry_down() {
                    let entries = self.registry.lookup_range(&range);
                    let at = self.now + 2 * MS;
                    self.schedule(at, Event::Naming { to: id, entries });
                }
            }
            Output::Observe { obs } => self.observe(id, &obs),
        }
    }

    fn registry_down(&self) -> bool {
        self.active().any(|f| f.kind == FaultKind::RegistryDown)
    }

    fn observe(&mut self, id: NodeId, obs: &Observation) {
        match obs {
            Observation::Applied { cluster, epoch, index, .. } => {
                let m = self.applied_max.entry((*cluster, *epoch)).or_insert(0);
                *m = (*m).max(*index);
            }
            Observation::BecameLeader { .. } => {
                let node = &self.nodes[&id];
                if let Some(cfg) = node.config() {
                    let key = (cfg.cluster, cfg.epoch);
                    if let Some(&index) = self.applied_max.get(&key) {
                        let base = node.log().base();
                        let compacted = index <= base.index;
                        let chain = if compacted { None } else { node.log().chain_of(index) };
                        self.record(
                            Some(id),
                            EventKind::LeaderProbe { cluster: key.0, epoch: key.1, index, chain, compacted },
                        );
                    }
                }
            }
            _ => {}
        }
        let (tag, kind, cluster) = observation_key(obs);
        let mut fire = Vec::new();
        for (i, f) in self.sc.faults.iter().enumerate() {
            let Some(t) = &f.on else { continue };
            let st = &mut self.faults[i];
            if st.fired || t.observation != tag {
                continue;
            }
            if t.kind.is_some() && t.kind.as_deref() != kind {
                continue;
            }
            if t.cluster.is_some() && t.cluster != cluster {
                continue;
            }
            st.matches += 1;
            if st.matches > t.nth {
                st.fired = true;
                st.emitter = Some(id);
                fire.push((i, f.after_ms));
            }
        }
        for (i, after) in fire {
            if after == 0 {
                self.start_fault(i);
            } else {
                self.schedule(self.now + after * MS, Event::FaultStart(i));
            }
        }
    }

    fn crash(&mut self, i: usize, n: NodeId) {
        if self.nodes.contains_key(&n) && self.down.insert(n) {
            self.faults[i].crashed.push(n);
            self.record(Some(n), EventKind::Crash);
        }
    }

    fn restart(&mut self, n: NodeId) {
        if self.down.remove(&n) {
            let now = self.now;
            if let Some(node) = self.nodes.get_mut(&n) {
                node.restart(now);
            }
            self.record(Some(n), EventKind::Restart);
        }
    }

    fn start_fault(&mut self, i: usize) {
        let f = self.sc.faults[i].clone();
        self.faults[i].active = true;
        self.faults[i].fired = true;
        self.record(None, EventKind::FaultStart { fault: i, what: fault_label(&f.kind) });
        match &f.kind {
            FaultKind::Crash { node } => self.crash(i, *node),
            FaultKind::CrashMany { nodes } => {
                for n in nodes {
                    self.crash(i, *n);
                }
            }
            FaultKind::CrashEmitter => {
                if let Some(n) = self.faults[i].emitter {
                    self.crash(i, n);
                }
            }
            FaultKind::Restart { node } => self.restart(*node),
            _ => {}
        }
        if let Some(len) = f.for_ms {
            self.schedule(self.now + len * MS, Event::FaultEnd(i));
        }
    }

    fn end_fault(&mut self, i: usize) {
        if !self.faults[i].active {
            return;
        }
        self.faults[i].active = false;
        self.record(None, EventKind::FaultEnd { fault: i });
        for n in std::mem::take(&mut self.faults[i].crashed) {
            self.restart(n);
        }
    }

    // ---- clients and operator ----

    fn next_client_op(&mut self, client: u64) {
        if self.client_busy.contains(&client) {
            return;
        }
        if let Some(i) = self.client_queue.get_mut(&client).and_then(|q| q.pop_front()) {
            self.client_busy.insert(client);
            self.issue(i);
        }
    }

    fn issue(&mut self, i: usize) {
        let spec = self.ops[i].spec.clone();
        self.record(None, EventKind::OpIssued { op: i, spec: spec.clone() });
        if spec.is_client() {
            let client = client_of(&spec);
            let seq = self.client_seq.entry(client).or_insert(0);
            *seq += 1;
            let op = match spec {
                OpSpec::Put { key, value, .. } => KvOp::Put { key, value },
                OpSpec::Get { key, .. } => KvOp::Get { key },
                OpSpec::Delete { key, .. } => KvOp::Delete { key },
                _ => unreachable!(),
            };
            self.ops[i].cmd = Some(Command { client: ClientId(client), seq: *seq, op });
        }
        self.attempt(i);
    }

    /// Picks a node and sends the current attempt of operation `i`.
    fn attempt(&mut self, i: usize) {
        if self.ops[i].done {
            return;
        }
        let target = match self.pick_target(i) {
            Ok(t) => t,
            Err(why) => {
                let ok = why.starts_with("already");
                self.complete(i, ok, why, None);
                return;
            }
        };
        let req = self.next_req;
        self.next_req += 1;
        self.req_op.insert(req, i);
        let op = &mut self.ops[i];
        op.req = req;
        op.target = Some(target);
        self.schedule(self.now + MS, Event::OpDeliver { op: i, req, to: target.1 });
        self.schedule(self.now + self.sc.client.timeout_ms * MS, Event::OpTimeout { op: i, req });
    }

    fn pick_target(&self, i: usize) -> Result<(ClusterId, NodeId), String> {
        let op = &self.ops[i];
        let entry =
            match &op.spec {
                OpSpec::Put { key, .. } | OpSpec::Get { key, .. } | OpSpec::Delete { key, .. } => {
                    self.registry.owner(key).ok_or_else(|| format!("no cluster owns {key}"))?
                }
                OpSpec::Split { cluster, subs } => {
                    if subs.iter().any(|s| self.registry.get(s.cluster).is_some()) {
                        return Err("already split".into());
                    }
                    self.registry.get(*cluster).ok_or_else(|| format!("unknown cluster {cluster}"))?
                }
                OpSpec::Merge { clusters, merged, .. } => {
                    if self.registry.get(*merged).is_some_and(|m| {
                        clusters.iter().all(|c| self.registry.get(*c).is_none_or(|e| e.epoch < m.epoch))
                    }) {
                        return Err("already merged".into());
                    }
                    let c = clusters.first().ok_or("merge lists no clusters")?;
                    self.registry.get(*c).ok_or_else(|| format!("unknown cluster {c}"))?
                }
                OpSpec::AddNodes { cluster, .. }
                | OpSpec::RemoveNodes { cluster, .. }
                | OpSpec::ChangeMembers { cluster, .. }
                | OpSpec::ResizeQuorum { cluster } => {
                    self.registry.get(*cluster).ok_or_else(|| format!("unknown cluster {cluster}"))?
                }
            };
        let members: Vec<NodeId> = entry.members.iter().copied().collect();
        if let Some(l) = self.leader_cache.get(&entry.cluster) {
            return Ok((entry.cluster, *l));
        }
        if members.is_empty() {
            return Err(format!("cluster {} has no members", entry.cluster));
        }
        Ok((entry.cluster, members[op.tried % members.len()]))
    }

    fn admin_op(&self, i: usize) -> Result<AdminOp, String> {
        Ok(match &self.ops[i].spec {
            OpSpec::Split { subs, .. } => AdminOp::Split { subs: subs.clone() },
            OpSpec::Merge { clusters, merged, resume_members } => {
                let mut participants = Vec::new();
                for c in clusters {
                    let e = self.registry.get(*c).ok_or_else(|| format!("unknown cluster {c}"))?;
                    participants.push(Participant { cluster: *c, members: e.members.clone(), range: e.range.clone() });
                }
                AdminOp::Merge { participants, merged_cluster: *merged, resume_members: resume_members.clone() }
            }
            OpSpec::AddNodes { nodes, .. } => AdminOp::AddNodes { nodes: nodes.clone() },
            OpSpec::RemoveNodes { nodes, .. } => AdminOp::RemoveNodes { nodes: nodes.clone() },
            OpSpec::ChangeMembers { members, .. } => AdminOp::ChangeMembers { members: members.clone() },
            OpSpec::ResizeQuorum { .. } => AdminOp::ResizeQuorum,
            _ => unreachable!("client operation"),
        })
    }

    fn retry_later(&mut self, i: usize, factor: u64) {
        self.ops[i].req = 0;
        let at = self.now + self.sc.client.backoff_ms * factor * MS;
        self.schedule(at, Event::OpAttempt(i));
    }

    fn redirect(&mut self, i: usize, from: NodeId, hint: Option<NodeId>) {
        let Some((cluster, _)) = self.ops[i].target else { return };
        match hint.filter(|h| *h != from) {
            Some(h) => {
                self.leader_cache.insert(cluster, h);
            }
            None => {
                self.leader_cache.remove(&cluster);
                self.ops[i].tried += 1;
            }
        }
        self.retry_later(i, 1);
    }

    fn current(&self, req: u64) -> Option<usize> {
        let i = *self.req_op.get(&req)?;
        (!self.ops[i].done).then_some(i)
    }

    fn client_reply(&mut self, from: NodeId, req: u64, reply: ClientReply) {
        let Some(i) = self.current(req) else { return };
        if let ClientReply::Done { result } = reply {
            if let Some((c, _)) = self.ops[i].target {
                self.leader_cache.insert(c, from);
            }
            self.complete(i, true, "done".into(), Some(result));
            return;
        }
        if self.ops[i].req != req {
            return;
        }
        match reply {
            ClientReply::Done { .. } => unreachable!(),
            ClientReply::NotLeader { hint } => self.redirect(i, from, hint),
            ClientReply::WrongShard { .. } => {
                if let Some((c, _)) = self.ops[i].target {
                    self.leader_cache.remove(&c);
                }
                self.retry_later(i, 2);
            }
            ClientReply::Busy => self.retry_later(i, 3),
        }
    }

    fn admin_reply(&mut self, from: NodeId, req: u64, reply: Result<AdminOutcome, AdminError>) {
        let Some(i) = self.current(req) else { return };
        match reply {
            Ok(outcome) => {
                let text = serde_json::to_string(&outcome).expect("serializable");
                self.complete(i, true, text, None);
            }
            Err(e) if self.ops[i].req != req => {
                let _ = e;
            }
            Err(AdminError::NotLeader { hint }) => self.redirect(i, from, hint),
            Err(
                AdminError::Busy(_) | AdminError::Unknown | AdminError::Precondition(Violation::P1 | Violation::P3),
            ) => self.retry_later(i, 5),
            Err(
                e @ (AdminError::Precondition(Violation::P2Prime)
                | AdminError::Invalid(_)
                | AdminError::WrongCluster { .. }),
            ) => self.complete(i, false, e.to_string(), None),
        }
    }

    fn complete(&mut self, i: usize, ok: bool, outcome: String, result: Option<recraft_core::kv::KvResult>) {
        if self.ops[i].done {
            return;
        }
        self.ops[i].done = true;
        self.ops[i].req = 0;
        self.record(None, EventKind::OpDone { op: i, ok, outcome, result });
        if self.ops[i].spec.is_client() {
            let client = client_of(&self.ops[i].spec);
            self.client_busy.remove(&client);
            self.next_client_op(client);
        }
    }
}

fn client_of(spec: &OpSpec) -> u64 {
    match spec {
        OpSpec::Put { client, .. } | OpSpec::Get { client, .. } | OpSpec::Delete { client, .. } => *client,
        _ => 0,
    }
}

fn fault_label(k: &FaultKind) -> String {
    let fmt_set = |s: &NodeSet| s.iter().map(|n| n.0.to_string()).collect::<Vec<_>>().join(",");
    match k {
        FaultKind::Drop { rate } => format!("drop {rate}"),
        FaultKind::Duplicate { rate } => format!("duplicate {rate}"),
        FaultKind::Reorder => "reorder".into(),
        FaultKind::Delay { .. } => "delay".into(),
        FaultKind::Partition { groups } => {
            format!("partition {}", groups.iter().map(|g| format!("{{{}}}", fmt_set(g))).collect::<Vec<_>>().join(" "))
        }
        FaultKind::Cut { from, to } => format!("cut {{{}}} -> {{{}}}", fmt_set(from), fmt_set(to)),
        FaultKind::Crash { node } => format!("crash {node}"),
        FaultKind::CrashMany { nodes } => format!("crash {{{}}}", fmt_set(nodes)),
        FaultKind::Restart { node } => format!("restart {node}"),
        FaultKind::CrashEmitter => "crash emitter".into(),
        FaultKind::RegistryDown => "registry down".into(),
    }
}

/// Runs a scenario to its horizon.
pub fn run(sc: &Scenario) -> Result<Trace, ScenarioError> {
    Ok(Sim::new(sc)?.run())
}
