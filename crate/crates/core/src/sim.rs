//! Discrete-event engine that plays a scenario against the virtualized
//! infrastructure.
//!
//! Simulated time is in milliseconds. Actions due at the same instant run in
//! scheduling order; scenario events are scheduled before reads so a
//! migration at minute 20 is in effect for a read at minute 20. Node queues
//! collect everything enqueued at one instant and drain before the clock
//! moves on.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::codec::{self, SystemId, TagWord, VirtualNetworkAddress};
use crate::elements::{
    Batch, DeliveryMeta, ElementError, Infrastructure, Inventory, ReadDisposition, ReadEvent, ReadTime, ReaderId,
    ReceivedEvent, SystemHandle,
};
use crate::network::{Arrival, DeliveryRecord, NetworkError, NodeId, Scope, ServiceQueue};
use crate::par::{self, Execution};
use crate::pipeline::{self, Mode, PipelineError, Resolution};
use crate::policy::{DiscardReason, PolicyVerdict};
use crate::report::{
    ComparisonReport, LatencyStats, MetricsReport, ModeDelta, NetworkMetrics, SystemMetrics, COMPARISON_SCHEMA,
    REPORT_SCHEMA,
};
use crate::scenario::{At, EventKind, Scenario, ScenarioError, MS_PER_MINUTE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RunError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("invariant violated: {0}")]
    InvariantBreach(String),
    #[error(transparent)]
    Element(#[from] ElementError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

impl RunError {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Scenario(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    pub seed: u64,
    /// Forces every system into one mode; `None` keeps the declared modes.
    pub mode: Option<Mode>,
}

impl RunOptions {
    pub fn mode_label(&self) -> String {
        self.mode.map_or_else(|| "declared".to_string(), |m| m.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeliveryLogEntry {
    pub batch_id: u64,
    pub system_id: SystemId,
    pub mode: Mode,
    pub events: usize,
    pub partial: bool,
    pub priority: bool,
    pub destination: VirtualNetworkAddress,
    pub ready_at_ms: f64,
    pub dispatched_at_ms: f64,
    pub delivered_at_ms: f64,
    /// Ready to delivered: resolution, middleware queueing and transit.
    pub batch_latency_ms: f64,
    pub ons_queries: u32,
    pub resolution_ms: f64,
    pub transit_ms: f64,
    pub queueing_ms: f64,
    pub redirected: bool,
    pub path: Vec<String>,
    pub delivered_to: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueItemKind {
    Event,
    Batch,
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueueSample {
    pub node: String,
    pub epoch_ms: f64,
    pub system: Option<SystemId>,
    pub priority: bool,
    pub kind: QueueItemKind,
    pub packets_ahead: usize,
    pub queueing_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InventorySnapshots {
    pub baseline: Inventory,
    pub after_create: Inventory,
    pub after_run: Inventory,
    pub after_remove: Inventory,
}

impl InventorySnapshots {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("inventory serializes")
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub report: MetricsReport,
    pub deliveries: Vec<DeliveryLogEntry>,
    pub center_logs: BTreeMap<SystemId, Vec<ReceivedEvent>>,
    pub queue_samples: Vec<QueueSample>,
    pub vpn_members: BTreeMap<SystemId, BTreeSet<String>>,
    /// `(at, address, new_host)` as left at the end of the run.
    pub redirects: Vec<(String, VirtualNetworkAddress, String)>,
    pub inventory: InventorySnapshots,
    pub tag_population: BTreeSet<TagWord>,
}

impl RunResult {
    pub fn deliveries_for(&self, system: SystemId) -> impl Iterator<Item = &DeliveryLogEntry> {
        self.deliveries.iter().filter(move |d| d.system_id == system)
    }
}

/// Every read a scenario will perform, explicit and generated, in time order.
pub fn expand_reads(scenario: &Scenario, seed: u64) -> Vec<(At, String, TagWord)> {
    let mut reads: Vec<(At, String, TagWord)> =
        scenario.reads.iter().map(|r| (r.at, r.reader.clone(), r.tag)).collect();
    for (gi, g) in scenario.generators.iter().enumerate() {
        let pool = scenario.generator_pool(g);
        let readers: Vec<&str> = if g.readers.is_empty() {
            scenario.readers.iter().map(|r| r.name.as_str()).collect()
        } else {
            g.readers.iter().map(String::as_str).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(gi as u64));
        for minute in g.start_minute..g.start_minute + g.duration_minutes {
            for reader in &readers {
                for _ in 0..g.per_minute {
                    let tag = pool[rng.random_range(0..pool.len())];
                    let ms = rng.random_range(0..MS_PER_MINUTE);
                    reads.push((At { minute, ms }, reader.to_string(), tag));
                }
            }
        }
    }
    reads.sort_by(|a, b| a.0.as_ms().total_cmp(&b.0.as_ms()));
    reads
}

#[derive(Debug)]
enum Action {
    Scenario(EventKind),
    Read { reader: ReaderId, tag: TagWord },
    MiddlewareArrival { event: ReadEvent, read_ms: f64 },
    EnqueueBatch { batch_id: u64 },
    Depart { batch_id: u64 },
    Arrive { batch_id: u64 },
}

#[derive(Debug)]
struct Scheduled {
    at_ms: f64,
    seq: u64,
    action: Action,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.at_ms.total_cmp(&self.at_ms).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug)]
enum QueueItem {
    Event { event: ReadEvent, read_ms: f64 },
    Batch { batch_id: u64 },
    Background,
}

#[derive(Debug)]
struct InFlight {
    batch: Batch,
    read_ms: Vec<f64>,
    ready_at_ms: f64,
    resolution: Option<Resolution>,
    queueing_ms: f64,
    dispatched_at_ms: f64,
    delivery: Option<DeliveryRecord>,
}

struct Engine<'s> {
    scenario: &'s Scenario,
    infra: Infrastructure,
    node_ids: BTreeMap<String, NodeId>,
    reader_ids: BTreeMap<String, ReaderId>,
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    now_ms: f64,
    queues: BTreeMap<NodeId, ServiceQueue<QueueItem>>,
    pending: BTreeSet<NodeId>,
    arrival_reads: BTreeMap<SystemId, VecDeque<f64>>,
    in_flight: BTreeMap<u64, InFlight>,
    next_batch: u64,
    delivered_batches: BTreeSet<u64>,
    metrics: BTreeMap<SystemId, SystemMetrics>,
    batch_latency: BTreeMap<SystemId, Vec<f64>>,
    e2e_latency: BTreeMap<SystemId, Vec<f64>>,
    deliveries: Vec<DeliveryLogEntry>,
    samples: Vec<QueueSample>,
    net_metrics: NetworkMetrics,
}

impl<'s> Engine<'s> {
    fn schedule(&mut self, at_ms: f64, action: Action) {
        self.seq += 1;
        self.heap.push(Scheduled {
            at_ms,
            seq: self.seq,
            action,
        });
    }

    fn metrics_for(&mut self, system: SystemId) -> &mut SystemMetrics {
        let mode = self.infra.system(system).map(|s| s.mode);
        self.metrics
            .entry(system)
            .or_insert_with(|| SystemMetrics::new(system, mode))
    }

    fn enqueue(&mut self, node: NodeId, item: QueueItem, priority: bool) {
        let rate = self.infra.network().service_rate(node);
        self.queues
            .entry(node)
            .or_insert_with(|| ServiceQueue::new(rate))
            .enqueue(item, priority);
        self.pending.insert(node);
    }

    fn run_loop(&mut self) -> Result<(), RunError> {
        loop {
            let next_at = self.heap.peek().map(|s| s.at_ms);
            if !self.pending.is_empty() && next_at.is_none_or(|t| t > self.now_ms) {
                self.drain_pending()?;
                continue;
            }
            let Some(item) = self.heap.pop() else {
                return Ok(());
            };
            debug_assert!(item.at_ms >= self.now_ms);
            self.now_ms = item.at_ms;
            self.step(item.action)?;
        }
    }

    fn drain_pending(&mut self) -> Result<(), RunError> {
        let nodes = std::mem::take(&mut self.pending);
        for node in nodes {
            let queue = self.queues.get_mut(&node).expect("pending node has a queue");
            let served = queue.drain(self.now_ms);
            let mut priority_left = served.iter().filter(|s| s.priority).count();
            for s in served {
                if s.priority {
                    priority_left -= 1;
                }
                let (system, kind) = match &s.item {
                    QueueItem::Event { event, .. } => (Some(event.system_id), QueueItemKind::Event),
                    QueueItem::Batch { batch_id } => {
                        (Some(self.in_flight[batch_id].batch.system_id), QueueItemKind::Batch)
                    }
                    QueueItem::Background => (None, QueueItemKind::Background),
                };
                // strict priority: a normal item served while priority work waits is an inversion
                if !s.priority && priority_left > 0 {
                    self.net_metrics.priority_inversions += 1;
                    if let Some(sys) = system {
                        self.metrics_for(sys).priority_inversions += 1;
                    }
                }
                self.net_metrics.max_queueing_ms = self.net_metrics.max_queueing_ms.max(s.queueing_ms);
                match kind {
                    QueueItemKind::Background => self.net_metrics.background_packets += 1,
                    _ => self.net_metrics.queued_packets += 1,
                }
                self.samples.push(QueueSample {
                    node: self.infra.network().node_name(node).to_string(),
                    epoch_ms: self.now_ms,
                    system,
                    priority: s.priority,
                    kind,
                    packets_ahead: s.packets_ahead,
                    queueing_ms: s.queueing_ms,
                });
                let depart_ms = self.now_ms + s.queueing_ms;
                match s.item {
                    QueueItem::Event { event, read_ms } => {
                        let sys = self
                            .infra
                            .system(event.system_id)
                            .expect("forwarded events have a system");
                        let route = self.infra.network().vpn_route(sys.vpn, node, sys.middleware.node)?;
                        self.metrics_for(event.system_id).messages.reader_to_middleware += 1;
                        self.schedule(
                            depart_ms + route.latency_ms,
                            Action::MiddlewareArrival { event, read_ms },
                        );
                    }
                    QueueItem::Batch { batch_id } => {
                        self.in_flight.get_mut(&batch_id).expect("queued batch").queueing_ms = s.queueing_ms;
                        self.schedule(depart_ms, Action::Depart { batch_id });
                    }
                    QueueItem::Background => {}
                }
            }
        }
        Ok(())
    }

    fn step(&mut self, action: Action) -> Result<(), RunError> {
        match action {
            Action::Scenario(kind) => self.apply_event(kind),
            Action::Read { reader, tag } => {
                self.on_read(reader, tag);
                Ok(())
            }
            Action::MiddlewareArrival { event, read_ms } => self.on_middleware(event, read_ms),
            Action::EnqueueBatch { batch_id } => {
                let f = &self.in_flight[&batch_id];
                let priority = f.batch.priority();
                let node = self.infra.system(f.batch.system_id).expect("system").middleware.node;
                self.enqueue(node, QueueItem::Batch { batch_id }, priority);
                Ok(())
            }
            Action::Depart { batch_id } => self.on_depart(batch_id),
            Action::Arrive { batch_id } => self.on_arrive(batch_id),
        }
    }

    fn apply_event(&mut self, kind: EventKind) -> Result<(), RunError> {
        let ids = &self.node_ids;
        let net = self.infra.network_mut();
        match kind {
            EventKind::Migrate {
                address,
                from,
                to,
                propagate,
            } => net.migrate_center(address, ids[&from], ids[&to], propagate)?,
            EventKind::Split { partition, propagate } => {
                let map = partition.iter().map(|(a, n)| (*a, ids[n])).collect();
                net.split_center(&map, propagate)?
            }
            EventKind::Maintenance { address, host, scope } => {
                let scope = match scope {
                    None => Scope::AllNodes,
                    Some(names) => Scope::Nodes(names.iter().map(|n| ids[n]).collect()),
                };
                net.maintenance_update(address, ids[&host], &scope)?
            }
            EventKind::Burst {
                node,
                count,
                priority_count,
            } => {
                let node = ids[&node];
                for _ in 0..count {
                    self.enqueue(node, QueueItem::Background, false);
                }
                for _ in 0..priority_count {
                    self.enqueue(node, QueueItem::Background, true);
                }
            }
        }
        Ok(())
    }

    fn on_read(&mut self, reader: ReaderId, tag: TagWord) {
        let read_ms = self.now_ms;
        let minute = (read_ms / f64::from(MS_PER_MINUTE)).floor() as u64;
        let r = self.infra.reader(reader).expect("validated reader");
        let node = r.node;
        let disposition = r.on_read(tag, ReadTime::from_absolute_minutes(minute));
        let system = codec::extract_system_id(tag);
        self.metrics_for(system).reads_total += 1;
        match disposition {
            ReadDisposition::NoVirtualReader { .. } => self.metrics_for(system).drops_no_virtual_reader += 1,
            ReadDisposition::PolicyDiscard { reason, .. } => {
                let d = &mut self.metrics_for(system).drops_policy;
                match reason {
                    DiscardReason::UnknownPolicy => d.unknown_policy += 1,
                    DiscardReason::AreaCondition => d.area_condition += 1,
                    DiscardReason::TimeCondition => d.time_condition += 1,
                }
            }
            ReadDisposition::ForwardedToMiddleware(event) => {
                let m = self.metrics_for(system);
                m.forwarded += 1;
                if let PolicyVerdict::Forward { encryption_scheme, .. } = event.verdict {
                    *m.encryption_schemes.entry(encryption_scheme).or_default() += 1;
                }
                let priority = event.verdict.priority();
                self.enqueue(node, QueueItem::Event { event, read_ms }, priority);
            }
        }
    }

    fn on_middleware(&mut self, event: ReadEvent, read_ms: f64) -> Result<(), RunError> {
        let system = event.system_id;
        self.arrival_reads.entry(system).or_default().push_back(read_ms);
        let sys = self.infra.system_mut(system).expect("forwarded events have a system");
        if let Some(batch) = sys.middleware.ingest(event)? {
            self.batch_ready(batch)?;
        }
        Ok(())
    }

    fn batch_ready(&mut self, batch: Batch) -> Result<(), RunError> {
        let system = batch.system_id;
        let queue = self.arrival_reads.get_mut(&system).expect("arrivals precede batches");
        let read_ms: Vec<f64> = queue.drain(..batch.len()).collect();
        let sys = self.infra.system(system).expect("system");
        let resolution = pipeline::resolve(sys.mode, &batch, &sys.middleware, &sys.ons, self.infra.network())?;
        let delay = resolution.delay_ms();
        let m = self.metrics_for(system);
        m.ons_queries += u64::from(resolution.ons_queries);
        m.messages.middleware_to_ons += u64::from(resolution.ons_queries);
        m.messages.ons_to_middleware += u64::from(resolution.ons_queries);
        self.next_batch += 1;
        let batch_id = self.next_batch;
        self.in_flight.insert(
            batch_id,
            InFlight {
                batch,
                read_ms,
                ready_at_ms: self.now_ms,
                resolution: Some(resolution),
                queueing_ms: 0.0,
                dispatched_at_ms: f64::NAN,
                delivery: None,
            },
        );
        self.schedule(self.now_ms + delay, Action::EnqueueBatch { batch_id });
        Ok(())
    }

    fn on_depart(&mut self, batch_id: u64) -> Result<(), RunError> {
        let f = self.in_flight.get_mut(&batch_id).expect("departing batch");
        let sys = self.infra.system(f.batch.system_id).expect("system");
        let destination = f.resolution.as_ref().expect("resolved").destination;
        let packet = pipeline::build_packet(&f.batch, sys.vpn, destination);
        let mut record = self.infra.network().send(&packet, sys.middleware.node)?;
        record.queueing_ms = f.queueing_ms;
        let arrive_at = self.now_ms + record.latency_ms;
        f.dispatched_at_ms = self.now_ms;
        let system = f.batch.system_id;
        f.delivery = Some(record);
        self.metrics_for(system).messages.middleware_to_center += 1;
        self.schedule(arrive_at, Action::Arrive { batch_id });
        Ok(())
    }

    fn on_arrive(&mut self, batch_id: u64) -> Result<(), RunError> {
        // the center may have moved while the packet was on the wire
        let f = self
            .in_flight
            .get_mut(&batch_id)
            .ok_or_else(|| RunError::InvariantBreach(format!("batch {batch_id} arrived twice")))?;
        let sys = self.infra.system(f.batch.system_id).expect("system");
        let delivery = f.delivery.as_mut().expect("departed");
        let destination = f.resolution.as_ref().expect("resolved").destination;
        if let Arrival::Retransfer(route) = self
            .infra
            .network()
            .arrive(sys.vpn, destination, delivery.delivered_to)?
        {
            delivery.extend(&route, true);
            self.schedule(self.now_ms + route.latency_ms, Action::Arrive { batch_id });
            return Ok(());
        }
        let members = self.infra.network().vpn(sys.vpn).expect("system vpn").members();
        let outside = delivery.path.iter().filter(|n| !members.contains(n)).count() as u64;
        self.net_metrics.vpn_violations += outside;
        let f = self.in_flight.remove(&batch_id).expect("checked above");
        if !self.delivered_batches.insert(batch_id) {
            return Err(RunError::InvariantBreach(format!("batch {batch_id} delivered twice")));
        }
        let delivery = f.delivery.expect("departed");
        let resolution = f.resolution.expect("resolved");
        let meta = DeliveryMeta {
            batch_id,
            dispatched_at_ms: f.dispatched_at_ms,
            delivered_at_ms: self.now_ms,
            redirected: delivery.redirected,
            partial_batch: f.batch.partial,
        };
        let system = f.batch.system_id;
        let sys = self.infra.system_mut(system).expect("system");
        let mode = sys.mode;
        sys.center.receive(&f.batch, &meta).map_err(|e| match e {
            ElementError::IsolationBreach { .. } => RunError::InvariantBreach(e.to_string()),
            other => other.into(),
        })?;
        let batch_latency = self.now_ms - f.ready_at_ms;
        self.batch_latency.entry(system).or_default().push(batch_latency);
        let now = self.now_ms;
        self.e2e_latency
            .entry(system)
            .or_default()
            .extend(f.read_ms.iter().map(|r| now - r));
        let m = self.metrics_for(system);
        m.batches_sent += 1;
        if f.batch.partial {
            m.partial_batches += 1;
            m.flushed_events += f.batch.len() as u64;
        } else {
            m.delivered_events += f.batch.len() as u64;
        }
        if delivery.redirected {
            m.redirected_deliveries += 1;
            m.messages.retransfers += 1;
        }
        let names = |n: &NodeId| self.infra.network().node_name(*n).to_string();
        self.deliveries.push(DeliveryLogEntry {
            batch_id,
            system_id: system,
            mode,
            events: f.batch.len(),
            partial: f.batch.partial,
            priority: f.batch.priority(),
            destination: resolution.destination,
            ready_at_ms: f.ready_at_ms,
            dispatched_at_ms: f.dispatched_at_ms,
            delivered_at_ms: now,
            batch_latency_ms: batch_latency,
            ons_queries: resolution.ons_queries,
            resolution_ms: resolution.delay_ms(),
            transit_ms: delivery.latency_ms,
            queueing_ms: delivery.queueing_ms,
            redirected: delivery.redirected,
            path: delivery.path.iter().map(names).collect(),
            delivered_to: names(&delivery.delivered_to),
        });
        Ok(())
    }

    fn flush_all(&mut self) -> Result<bool, RunError> {
        let ids: Vec<SystemId> = self.infra.systems().map(|s| s.system_id).collect();
        let mut any = false;
        for id in ids {
            if let Some(batch) = self.infra.system_mut(id).expect("system").middleware.flush() {
                any = true;
                self.batch_ready(batch)?;
            }
        }
        Ok(any)
    }
}

/// Plays one scenario to completion and checks the run invariants.
pub fn run(scenario: &Scenario, opts: &RunOptions) -> Result<RunResult, RunError> {
    let mut built = scenario.build(opts.mode)?;
    let baseline = built.infra.inventory();
    built.create_all()?;
    let after_create = built.infra.inventory();

    let mut engine = Engine {
        scenario,
        infra: built.infra,
        node_ids: built.node_ids,
        reader_ids: built.reader_ids,
        heap: BinaryHeap::new(),
        seq: 0,
        now_ms: 0.0,
        queues: BTreeMap::new(),
        pending: BTreeSet::new(),
        arrival_reads: BTreeMap::new(),
        in_flight: BTreeMap::new(),
        next_batch: 0,
        delivered_batches: BTreeSet::new(),
        metrics: BTreeMap::new(),
        batch_latency: BTreeMap::new(),
        e2e_latency: BTreeMap::new(),
        deliveries: Vec::new(),
        samples: Vec::new(),
        net_metrics: NetworkMetrics::default(),
    };
    for s in &scenario.systems {
        engine.metrics_for(s.system_id);
    }
    for e in &scenario.events {
        engine.schedule(e.at.as_ms(), Action::Scenario(e.kind.clone()));
    }
    for (at, reader, tag) in expand_reads(scenario, opts.seed) {
        let reader = engine.reader_ids[&reader];
        engine.schedule(at.as_ms(), Action::Read { reader, tag });
    }

    engine.run_loop()?;
    // remainders below the threshold go out once the schedule is exhausted
    while engine.flush_all()? {
        engine.run_loop()?;
    }
    finish(engine, opts, baseline, after_create)
}

fn finish(
    mut engine: Engine<'_>,
    opts: &RunOptions,
    baseline: Inventory,
    after_create: Inventory,
) -> Result<RunResult, RunError> {
    let scenario = engine.scenario;
    if !engine.in_flight.is_empty() {
        return Err(RunError::InvariantBreach(format!(
            "{} batches never reached their center",
            engine.in_flight.len()
        )));
    }
    if engine.net_metrics.vpn_violations > 0 {
        return Err(RunError::InvariantBreach(format!(
            "{} hops left their VPN",
            engine.net_metrics.vpn_violations
        )));
    }
    let population: BTreeSet<TagWord> = scenario.tags.iter().copied().collect();
    let mut center_logs = BTreeMap::new();
    for sys in engine.infra.systems() {
        let log = sys.center.received_log();
        if let Some(stray) = log.iter().find(|r| !population.contains(&r.event.tag_word)) {
            return Err(RunError::InvariantBreach(format!(
                "center {} received undeclared tag {}",
                sys.system_id, stray.event.tag_word
            )));
        }
        center_logs.insert(sys.system_id, log.to_vec());
    }
    let processing: Vec<(SystemId, f64)> = engine
        .infra
        .systems()
        .map(|s| (s.system_id, s.center.processing_ms()))
        .collect();
    for (id, ms) in processing {
        engine.metrics_for(id).center_processing_ms = ms;
    }
    for (id, m) in engine.metrics.iter_mut() {
        m.batch_latency_ms = LatencyStats::from_samples(engine.batch_latency.get(id).map_or(&[], Vec::as_slice));
        m.end_to_end_latency_ms = LatencyStats::from_samples(engine.e2e_latency.get(id).map_or(&[], Vec::as_slice));
        if !m.conserves_reads() {
            return Err(RunError::InvariantBreach(format!("system {id} lost reads: {m:?}")));
        }
    }

    let net = engine.infra.network();
    let redirects: Vec<(String, VirtualNetworkAddress, String)> = net
        .redirects()
        .into_iter()
        .map(|r| {
            (
                net.node_name(r.at).to_string(),
                r.address,
                net.node_name(r.new_host).to_string(),
            )
        })
        .collect();
    engine.net_metrics.redirect_entries = redirects.len() as u64;
    let vpn_members = engine
        .infra
        .systems()
        .map(|s| {
            let members = net.vpn(s.vpn).expect("system vpn").members();
            (
                s.system_id,
                members.iter().map(|n| net.node_name(*n).to_string()).collect(),
            )
        })
        .collect();
    let after_run = engine.infra.inventory();
    let ids: Vec<SystemId> = engine.infra.systems().map(|s| s.system_id).collect();
    for id in ids.into_iter().rev() {
        engine.infra.remove_virtual_system(SystemHandle(id))?;
    }
    let after_remove = engine.infra.inventory();

    let report = MetricsReport {
        schema: REPORT_SCHEMA,
        scenario: scenario.name.clone(),
        mode: opts.mode_label(),
        seed: opts.seed,
        generators: scenario.generators.iter().map(|g| g.source.clone()).collect(),
        systems: engine.metrics.into_values().collect(),
        network: engine.net_metrics,
    };
    Ok(RunResult {
        report,
        deliveries: engine.deliveries,
        center_logs,
        queue_samples: engine.samples,
        vpn_members,
        redirects,
        inventory: InventorySnapshots {
            baseline,
            after_create,
            after_run,
            after_remove,
        },
        tag_population: population,
    })
}

/// The center-side view of a run, order-independent: what arrived where.
pub fn received_multiset(logs: &BTreeMap<SystemId, Vec<ReceivedEvent>>) -> BTreeMap<SystemId, BTreeMap<String, usize>> {
    logs.iter()
        .map(|(id, log)| {
            let mut counts = BTreeMap::new();
            for r in log {
                let e = &r.event;
                let key = format!(
                    "{}@{}:{}/{}",
                    e.tag_word, e.read_time.day_index, e.read_time.minute, e.reader_area.0
                );
                *counts.entry(key).or_insert(0) += 1;
            }
            (*id, counts)
        })
        .collect()
}

/// Runs the scenario once per mode and reports the differences.
pub fn compare_modes(
    scenario: &Scenario,
    seed: u64,
    exec: Execution,
) -> Result<(ComparisonReport, RunResult, RunResult), RunError> {
    let (two, direct) = par::join(
        exec,
        || {
            run(
                scenario,
                &RunOptions {
                    seed,
                    mode: Some(Mode::TwoStep),
                },
            )
        },
        || {
            run(
                scenario,
                &RunOptions {
                    seed,
                    mode: Some(Mode::Direct),
                },
            )
        },
    );
    let (two, direct) = (two?, direct?);
    let two_set = received_multiset(&two.center_logs);
    let direct_set = received_multiset(&direct.center_logs);
    let deltas = two
        .report
        .systems
        .iter()
        .filter(|s| s.mode.is_some())
        .map(|t| {
            let d = direct.report.system(t.system_id).expect("same systems in both runs");
            ModeDelta {
                system_id: t.system_id,
                mean_batch_latency_two_step_ms: t.batch_latency_ms.mean,
                mean_batch_latency_direct_ms: d.batch_latency_ms.mean,
                mean_batch_latency_saving_ms: t.batch_latency_ms.mean - d.batch_latency_ms.mean,
                ons_queries_saved: t.ons_queries.saturating_sub(d.ons_queries),
                messages_saved: t.messages.total() as i64 - d.messages.total() as i64,
                identical_center_events: two_set.get(&t.system_id) == direct_set.get(&t.system_id),
            }
        })
        .collect();
    let report = ComparisonReport {
        schema: COMPARISON_SCHEMA,
        scenario: scenario.name.clone(),
        seed,
        two_step: two.report.clone(),
        direct: direct.report.clone(),
        deltas,
    };
    Ok((report, two, direct))
}

/// One run per seed; results come back in seed order whatever `exec` is.
pub fn run_sweep(
    scenario: &Scenario,
    seeds: &[u64],
    mode: Option<Mode>,
    exec: Execution,
) -> Vec<Result<MetricsReport, RunError>> {
    par::map(exec, seeds, |&seed| {
        run(scenario, &RunOptions { seed, mode }).map(|r| r.report)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::bundled;

    fn scenario(name: &str) -> Scenario {
        bundled::get(name).expect("bundled").expect("parses")
    }

    #[test]
    fn fig8_latencies_per_mode() {
        let s = scenario("fig8_direct");
        let direct = run(
            &s,
            &RunOptions {
                seed: 0,
                mode: Some(Mode::Direct),
            },
        )
        .unwrap();
        let two = run(
            &s,
            &RunOptions {
                seed: 0,
                mode: Some(Mode::TwoStep),
            },
        )
        .unwrap();
        assert_eq!(direct.deliveries.len(), 2);
        assert!(direct.deliveries.iter().all(|d| d.batch_latency_ms == 5.0));
        assert!(two.deliveries.iter().all(|d| d.batch_latency_ms == 17.0));
        let sid = SystemId::new(1).unwrap();
        assert_eq!(direct.report.system(sid).unwrap().ons_queries, 0);
        assert_eq!(two.report.system(sid).unwrap().ons_queries, 2);
    }

    #[test]
    fn generated_reads_are_seeded() {
        let s = scenario("isolation_mix");
        let a = expand_reads(&s, 7);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, expand_reads(&s, 7));
        assert_ne!(a, expand_reads(&s, 8));
        assert!(a.windows(2).all(|w| w[0].0.as_ms() <= w[1].0.as_ms()));
    }

    #[test]
    fn flush_delivers_remainders() {
        let mut s = scenario("fig8_direct");
        s.reads.pop();
        let r = run(&s, &RunOptions::default()).unwrap();
        let m = r.report.system(SystemId::new(1).unwrap()).unwrap();
        assert_eq!((m.delivered_events, m.flushed_events, m.partial_batches), (3, 2, 1));
        assert!(r.deliveries.last().unwrap().partial);
    }

    #[test]
    fn removal_restores_baseline() {
        let r = run(&scenario("fig8_direct"), &RunOptions::default()).unwrap();
        assert_eq!(r.inventory.baseline, r.inventory.after_remove);
        assert_ne!(r.inventory.baseline, r.inventory.after_create);
    }

    #[test]
    fn sweep_matches_between_executions() {
        let s = scenario("policy_area_time");
        let seeds: Vec<u64> = (0..4).collect();
        let seq = run_sweep(&s, &seeds, None, Execution::Sequential);
        let par = run_sweep(&s, &seeds, None, Execution::Parallel);
        assert_eq!(seq, par);
    }
}
