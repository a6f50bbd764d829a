//! Physical devices, the per-system virtual elements they host, and the
//! management server that provisions and tears down whole virtual systems.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::codec::{self, SystemId, TagWord, VirtualNetworkAddress};
use crate::network::{Network, NetworkError, NodeId, VpnId};
use crate::pipeline::Mode;
use crate::policy::{AreaId, DiscardReason, PolicyDefinition, PolicyError, PolicyTable, PolicyVerdict, ReadContext};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ElementError {
    #[error("service system {0} already exists")]
    DuplicateSystem(SystemId),
    #[error("unknown service system {0}")]
    UnknownSystem(SystemId),
    #[error("area {0} has no physical reader")]
    UncoveredArea(AreaId),
    #[error("address {0} is already allocated")]
    AddressInUse(VirtualNetworkAddress),
    #[error("invalid descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("event of system {got} offered to middleware of system {expected}")]
    SystemMismatch { expected: SystemId, got: SystemId },
    #[error("system {0} is not registered with this ONS")]
    NotFound(SystemId),
    #[error("isolation breach: center of system {center} received an event of system {event}")]
    IsolationBreach { center: SystemId, event: SystemId },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct ReaderId(pub u32);

impl fmt::Display for ReaderId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct ReadTime {
    pub day_index: u32,
    pub minute: u16,
}

impl ReadTime {
    /// Splits an absolute minute count into day and minute-of-day.
    pub fn from_absolute_minutes(minutes: u64) -> Self {
        ReadTime {
            day_index: (minutes / 1440) as u32,
            minute: (minutes % 1440) as u16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ReadEvent {
    pub tag_word: TagWord,
    pub system_id: SystemId,
    pub read_time: ReadTime,
    pub reader_area: AreaId,
    pub verdict: PolicyVerdict,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReadDisposition {
    NoVirtualReader { system_id: SystemId },
    PolicyDiscard { system_id: SystemId, reason: DiscardReason },
    ForwardedToMiddleware(ReadEvent),
}

#[derive(Debug, Clone)]
pub struct VirtualReader {
    pub system_id: SystemId,
    pub host: ReaderId,
    pub middleware_node: NodeId,
    pub vpn: VpnId,
    pub policies: Arc<PolicyTable>,
}

#[derive(Debug, Clone)]
pub struct PhysicalReader {
    pub id: ReaderId,
    pub name: String,
    pub area: AreaId,
    pub node: NodeId,
    virtual_readers: BTreeMap<SystemId, VirtualReader>,
}

impl PhysicalReader {
    pub fn virtual_reader(&self, system: SystemId) -> Option<&VirtualReader> {
        self.virtual_readers.get(&system)
    }

    pub fn hosted_systems(&self) -> impl Iterator<Item = SystemId> + '_ {
        self.virtual_readers.keys().copied()
    }

    /// Association check, then the system's policy, at this reader.
    pub fn on_read(&self, word: TagWord, time: ReadTime) -> ReadDisposition {
        let system_id = codec::extract_system_id(word);
        let Some(vr) = self.virtual_readers.get(&system_id) else {
            return ReadDisposition::NoVirtualReader { system_id };
        };
        let ctx = ReadContext::new(self.area, time.minute, time.day_index).expect("ReadTime minute is always < 1440");
        let pn = codec::decode(word).policy_number;
        match vr.policies.evaluate(pn, &ctx) {
            PolicyVerdict::Discard { reason } => ReadDisposition::PolicyDiscard { system_id, reason },
            verdict => ReadDisposition::ForwardedToMiddleware(ReadEvent {
                tag_word: word,
                system_id,
                read_time: time,
                reader_area: self.area,
                verdict,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub system_id: SystemId,
    pub events: Vec<ReadEvent>,
    /// Set for the sub-threshold remainder flushed at the end of a run.
    pub partial: bool,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn priority(&self) -> bool {
        self.events.iter().any(|e| e.verdict.priority())
    }
}

#[derive(Debug, Clone)]
pub struct VirtualMiddleware {
    pub system_id: SystemId,
    pub node: NodeId,
    pub vpn: VpnId,
    pub mode: Mode,
    threshold: usize,
    buffer: Vec<ReadEvent>,
}

impl VirtualMiddleware {
    pub fn new(system_id: SystemId, node: NodeId, vpn: VpnId, mode: Mode, threshold: usize) -> Self {
        assert!(threshold > 0, "accumulation threshold must be positive");
        VirtualMiddleware {
            system_id,
            node,
            vpn,
            mode,
            threshold,
            buffer: Vec::with_capacity(threshold),
        }
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn ingest(&mut self, ev: ReadEvent) -> Result<Option<Batch>, ElementError> {
        if ev.system_id != self.system_id {
            return Err(ElementError::SystemMismatch {
                expected: self.system_id,
                got: ev.system_id,
            });
        }
        self.buffer.push(ev);
        if self.buffer.len() < self.threshold {
            return Ok(None);
        }
        Ok(Some(Batch {
            system_id: self.system_id,
            events: std::mem::take(&mut self.buffer),
            partial: false,
        }))
    }

    pub fn flush(&mut self) -> Option<Batch> {
        if self.buffer.is_empty() {
            return None;
        }
        Some(Batch {
            system_id: self.system_id,
            events: std::mem::take(&mut self.buffer),
            partial: true,
        })
    }
}

#[derive(Debug, Clone)]
pub struct VirtualOns {
    pub system_id: SystemId,
    pub node: NodeId,
    pub lookup_processing_ms: f64,
    resolution: BTreeMap<SystemId, VirtualNetworkAddress>,
}

impl VirtualOns {
    pub fn new(system_id: SystemId, node: NodeId, lookup_processing_ms: f64) -> Self {
        VirtualOns {
            system_id,
            node,
            lookup_processing_ms,
            resolution: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, system: SystemId, addr: VirtualNetworkAddress) {
        self.resolution.insert(system, addr);
    }

    /// Returns the center's primary address and the processing cost.
    pub fn lookup(&self, system: SystemId) -> Result<(VirtualNetworkAddress, f64), ElementError> {
        self.resolution
            .get(&system)
            .map(|&a| (a, self.lookup_processing_ms))
            .ok_or(ElementError::NotFound(system))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeliveryMeta {
    pub batch_id: u64,
    pub dispatched_at_ms: f64,
    pub delivered_at_ms: f64,
    pub redirected: bool,
    pub partial_batch: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReceivedEvent {
    pub event: ReadEvent,
    pub meta: DeliveryMeta,
}

#[derive(Debug, Clone)]
pub struct VirtualServiceCenter {
    pub system_id: SystemId,
    pub addresses: BTreeSet<VirtualNetworkAddress>,
    pub per_event_processing_ms: f64,
    processing_ms: f64,
    received_log: Vec<ReceivedEvent>,
}

impl VirtualServiceCenter {
    pub fn new(system_id: SystemId, addresses: BTreeSet<VirtualNetworkAddress>, per_event_processing_ms: f64) -> Self {
        assert!(!addresses.is_empty(), "a center needs at least one address");
        VirtualServiceCenter {
            system_id,
            addresses,
            per_event_processing_ms,
            processing_ms: 0.0,
            received_log: Vec::new(),
        }
    }

    /// Lowest-valued address; what the ONS hands out.
    pub fn primary_address(&self) -> VirtualNetworkAddress {
        *self.addresses.first().expect("non-empty")
    }

    /// Appends the batch to the log. Any foreign event rejects the whole
    /// batch and must abort the run.
    pub fn receive(&mut self, batch: &Batch, meta: &DeliveryMeta) -> Result<(), ElementError> {
        if let Some(foreign) = batch.events.iter().find(|e| e.system_id != self.system_id) {
            return Err(ElementError::IsolationBreach {
                center: self.system_id,
                event: foreign.system_id,
            });
        }
        self.processing_ms += batch.len() as f64 * self.per_event_processing_ms;
        self.received_log.extend(batch.events.iter().map(|event| ReceivedEvent {
            event: event.clone(),
            meta: meta.clone(),
        }));
        Ok(())
    }

    pub fn processing_ms(&self) -> f64 {
        self.processing_ms
    }

    pub fn received_log(&self) -> &[ReceivedEvent] {
        &self.received_log
    }
}

#[derive(Debug, Clone)]
pub struct ServiceSystemDescriptor {
    pub system_id: SystemId,
    pub covered_areas: BTreeSet<AreaId>,
    pub policies: Vec<PolicyDefinition>,
    pub accumulation_threshold: usize,
    pub addresses: Vec<(VirtualNetworkAddress, NodeId)>,
    pub mode: Mode,
    pub middleware_node: NodeId,
    pub ons_node: NodeId,
    pub ons_lookup_ms: f64,
    pub per_event_processing_ms: f64,
    /// Explicit VPN membership. When absent the VPN is every involved node
    /// plus the shortest paths between them.
    pub vpn_nodes: Option<BTreeSet<NodeId>>,
    /// Nodes the system may later move to (migration and split targets).
    pub extra_nodes: BTreeSet<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SystemHandle(pub SystemId);

#[derive(Debug, Clone)]
pub struct VirtualSystem {
    pub system_id: SystemId,
    pub mode: Mode,
    pub vpn: VpnId,
    pub covered_areas: BTreeSet<AreaId>,
    pub policies: Arc<PolicyTable>,
    pub middleware: VirtualMiddleware,
    pub ons: VirtualOns,
    pub center: VirtualServiceCenter,
}

/// The system management server together with the shared substrate.
#[derive(Debug, Clone, Default)]
pub struct Infrastructure {
    network: Network,
    readers: BTreeMap<ReaderId, PhysicalReader>,
    systems: BTreeMap<SystemId, VirtualSystem>,
}

impl Infrastructure {
    pub fn new(network: Network) -> Self {
        Infrastructure {
            network,
            readers: BTreeMap::new(),
            systems: BTreeMap::new(),
        }
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    pub fn add_reader(
        &mut self,
        name: impl Into<String>,
        area: AreaId,
        node: NodeId,
    ) -> Result<ReaderId, ElementError> {
        if !self.network.contains_node(node) {
            return Err(NetworkError::UnknownNode(node.to_string()).into());
        }
        let id = ReaderId(self.readers.len() as u32);
        self.readers.insert(
            id,
            PhysicalReader {
                id,
                name: name.into(),
                area,
                node,
                virtual_readers: BTreeMap::new(),
            },
        );
        Ok(id)
    }

    pub fn reader(&self, id: ReaderId) -> Option<&PhysicalReader> {
        self.readers.get(&id)
    }

    pub fn readers(&self) -> impl Iterator<Item = &PhysicalReader> {
        self.readers.values()
    }

    pub fn system(&self, id: SystemId) -> Option<&VirtualSystem> {
        self.systems.get(&id)
    }

    pub fn system_mut(&mut self, id: SystemId) -> Option<&mut VirtualSystem> {
        self.systems.get_mut(&id)
    }

    pub fn systems(&self) -> impl Iterator<Item = &VirtualSystem> {
        self.systems.values()
    }

    pub fn virtual_reader_count(&self) -> usize {
        self.readers.values().map(|r| r.virtual_readers.len()).sum()
    }

    /// Creates one virtual element per device for the new system: a
    /// virtual reader on every physical reader in a covered area, plus
    /// middleware, ONS entry, center and VPN. Nothing changes on error.
    pub fn create_virtual_system(&mut self, desc: &ServiceSystemDescriptor) -> Result<SystemHandle, ElementError> {
        let sid = desc.system_id;
        let invalid = |m: &str| Err(ElementError::InvalidDescriptor(m.to_string()));
        if !sid.is_assigned() {
            return invalid("system id 0 is reserved");
        }
        if self.systems.contains_key(&sid) {
            return Err(ElementError::DuplicateSystem(sid));
        }
        if desc.covered_areas.is_empty() {
            return invalid("no covered areas");
        }
        if desc.addresses.is_empty() {
            return invalid("no address assignments");
        }
        if desc.accumulation_threshold == 0 {
            return invalid("accumulation threshold must be positive");
        }
        if !(desc.ons_lookup_ms >= 0.0 && desc.per_event_processing_ms >= 0.0) {
            return invalid("processing costs must be non-negative");
        }
        for &area in &desc.covered_areas {
            if !self.readers.values().any(|r| r.area == area) {
                return Err(ElementError::UncoveredArea(area));
            }
        }
        let mut seen = BTreeSet::new();
        for &(addr, host) in &desc.addresses {
            if self.network.is_allocated(addr) || !seen.insert(addr) {
                return Err(ElementError::AddressInUse(addr));
            }
            if !self.network.contains_node(host) {
                return Err(NetworkError::UnknownNode(host.to_string()).into());
            }
        }
        let mut policies = PolicyTable::new();
        for def in &desc.policies {
            policies.register(def.clone())?;
        }

        let hosts: Vec<ReaderId> = self
            .readers
            .values()
            .filter(|r| desc.covered_areas.contains(&r.area))
            .map(|r| r.id)
            .collect();
        let mut involved: BTreeSet<NodeId> = hosts.iter().map(|id| self.readers[id].node).collect();
        involved.insert(desc.middleware_node);
        involved.insert(desc.ons_node);
        involved.extend(desc.addresses.iter().map(|&(_, h)| h));
        involved.extend(desc.extra_nodes.iter().copied());
        for &n in &involved {
            if !self.network.contains_node(n) {
                return Err(NetworkError::UnknownNode(n.to_string()).into());
            }
        }
        let members = match &desc.vpn_nodes {
            Some(explicit) => {
                if let Some(missing) = involved.difference(explicit).next() {
                    return Err(ElementError::InvalidDescriptor(format!(
                        "VPN membership omits involved node {}",
                        self.network.node_name(*missing)
                    )));
                }
                explicit.clone()
            }
            None => self.network.path_closure(&involved)?,
        };

        let vpn = VpnId(sid.get());
        // probe connectivity on a scratch copy so failure leaves no trace
        let mut probe = self.network.clone();
        probe.create_vpn(vpn, members.clone())?;
        for &r in &hosts {
            probe.vpn_route(vpn, self.readers[&r].node, desc.middleware_node)?;
        }
        probe.vpn_route(vpn, desc.middleware_node, desc.ons_node)?;
        for &(_, host) in &desc.addresses {
            probe.vpn_route(vpn, desc.middleware_node, host)?;
        }
        for &(addr, host) in &desc.addresses {
            probe.register_address(addr, vpn, host)?;
        }
        self.network = probe;

        let policies = Arc::new(policies);
        for id in &hosts {
            let reader = self.readers.get_mut(id).expect("host exists");
            reader.virtual_readers.insert(
                sid,
                VirtualReader {
                    system_id: sid,
                    host: *id,
                    middleware_node: desc.middleware_node,
                    vpn,
                    policies: Arc::clone(&policies),
                },
            );
        }
        let center = VirtualServiceCenter::new(
            sid,
            desc.addresses.iter().map(|&(a, _)| a).collect(),
            desc.per_event_processing_ms,
        );
        let mut ons = VirtualOns::new(sid, desc.ons_node, desc.ons_lookup_ms);
        ons.register(sid, center.primary_address());
        self.systems.insert(
            sid,
            VirtualSystem {
                system_id: sid,
                mode: desc.mode,
                vpn,
                covered_areas: desc.covered_areas.clone(),
                policies,
                middleware: VirtualMiddleware::new(
                    sid,
                    desc.middleware_node,
                    vpn,
                    desc.mode,
                    desc.accumulation_threshold,
                ),
                ons,
                center,
            },
        );
        log::debug!("created system {sid}: {} virtual readers", hosts.len());
        Ok(SystemHandle(sid))
    }

    /// Releases every virtual element, the VPN and the address allocations.
    /// Returns the removed system so callers can harvest its logs.
    pub fn remove_virtual_system(&mut self, handle: SystemHandle) -> Result<VirtualSystem, ElementError> {
        let sid = handle.0;
        let system = self.systems.remove(&sid).ok_or(ElementError::UnknownSystem(sid))?;
        for reader in self.readers.values_mut() {
            reader.virtual_readers.remove(&sid);
        }
        for &addr in &system.center.addresses {
            self.network.release_address(addr)?;
        }
        self.network.remove_vpn(system.vpn)?;
        Ok(system)
    }

    pub fn inventory(&self) -> Inventory {
        let net = &self.network;
        let name = |n: NodeId| net.node_name(n).to_string();
        let nodes = net
            .node_ids()
            .map(|id| {
                let centers = self
                    .systems
                    .values()
                    .filter_map(|s| {
                        let here: Vec<_> = s
                            .center
                            .addresses
                            .iter()
                            .copied()
                            .filter(|&a| net.host_of(a) == Some(id))
                            .collect();
                        (!here.is_empty()).then_some(CenterPlacement {
                            system: s.system_id,
                            addresses: here,
                        })
                    })
                    .collect();
                NodeInventory {
                    name: name(id),
                    middleware: self
                        .systems
                        .values()
                        .filter(|s| s.middleware.node == id)
                        .map(|s| s.system_id)
                        .collect(),
                    ons: self
                        .systems
                        .values()
                        .filter(|s| s.ons.node == id)
                        .map(|s| s.system_id)
                        .collect(),
                    centers,
                    address_table: net.table(id).iter().map(|(&a, &h)| (a, name(h))).collect(),
                    redirects: net
                        .redirects()
                        .into_iter()
                        .filter(|r| r.at == id)
                        .map(|r| (r.address, name(r.new_host)))
                        .collect(),
                }
            })
            .collect();
        let readers = self
            .readers
            .values()
            .map(|r| ReaderInventory {
                name: r.name.clone(),
                area: r.area,
                node: name(r.node),
                virtual_readers: r
                    .virtual_readers
                    .values()
                    .map(|vr| VirtualReaderInventory {
                        system: vr.system_id,
                        vpn: vr.vpn,
                        policies: vr.policies.len(),
                    })
                    .collect(),
            })
            .collect();
        let vpns = net
            .vpns()
            .map(|v| VpnInventory {
                id: v.id(),
                members: v.members().iter().map(|&m| name(m)).collect(),
            })
            .collect();
        Inventory {
            systems: self.systems.keys().copied().collect(),
            nodes,
            readers,
            vpns,
        }
    }

    pub fn inventory_json(&self) -> String {
        serde_json::to_string_pretty(&self.inventory()).expect("inventory serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Inventory {
    pub systems: Vec<SystemId>,
    pub nodes: Vec<NodeInventory>,
    pub readers: Vec<ReaderInventory>,
    pub vpns: Vec<VpnInventory>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeInventory {
    pub name: String,
    pub middleware: Vec<SystemId>,
    pub ons: Vec<SystemId>,
    pub centers: Vec<CenterPlacement>,
    pub address_table: BTreeMap<VirtualNetworkAddress, String>,
    pub redirects: BTreeMap<VirtualNetworkAddress, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CenterPlacement {
    pub system: SystemId,
    pub addresses: Vec<VirtualNetworkAddress>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReaderInventory {
    pub name: String,
    pub area: AreaId,
    pub node: String,
    pub virtual_readers: Vec<VirtualReaderInventory>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VirtualReaderInventory {
    pub system: SystemId,
    pub vpn: VpnId,
    pub policies: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VpnInventory {
    pub id: VpnId,
    pub members: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{ObjectSerial, PolicyNumber, TagId};
    use crate::policy::{AreaCondition, AreaSense};

    fn sid(v: u32) -> SystemId {
        SystemId::new(v).unwrap()
    }

    /// Three areas with two readers each, all readers on node `edge`.
    fn infra() -> (Infrastructure, NodeId, NodeId) {
        let mut net = Network::new();
        let edge = net.add_node("edge", None);
        let core = net.add_node("core", None);
        net.add_link(edge, core, 5.0).unwrap();
        let mut infra = Infrastructure::new(net);
        for area in 1..=3u16 {
            for k in 0..2 {
                infra.add_reader(format!("r{area}{k}"), AreaId(area), edge).unwrap();
            }
        }
        infra.add_reader("lonely", AreaId(9), edge).unwrap();
        (infra, edge, core)
    }

    fn descriptor(system: u32, areas: &[u16], addr: u32, edge: NodeId, core: NodeId) -> ServiceSystemDescriptor {
        ServiceSystemDescriptor {
            system_id: sid(system),
            covered_areas: areas.iter().map(|&a| AreaId(a)).collect(),
            policies: vec![PolicyDefinition {
                area_condition: Some(AreaCondition {
                    areas: [AreaId(1)].into(),
                    sense: AreaSense::Outside,
                }),
                ..PolicyDefinition::unconditional(PolicyNumber(1))
            }],
            accumulation_threshold: 3,
            addresses: vec![(VirtualNetworkAddress(addr), core)],
            mode: Mode::Direct,
            middleware_node: edge,
            ons_node: core,
            ons_lookup_ms: 2.0,
            per_event_processing_ms: 2.0,
            vpn_nodes: None,
            extra_nodes: BTreeSet::new(),
        }
    }

    fn word(system: u32, policy: u8, addr: u32, serial: u32) -> TagWord {
        TagId {
            system_id: sid(system),
            policy_number: PolicyNumber(policy),
            service_address: VirtualNetworkAddress(addr),
            serial: ObjectSerial(serial),
        }
        .encode()
    }

    fn event(system: u32, serial: u32) -> ReadEvent {
        ReadEvent {
            tag_word: word(system, 0, 1, serial),
            system_id: sid(system),
            read_time: ReadTime::from_absolute_minutes(0),
            reader_area: AreaId(1),
            verdict: PolicyVerdict::UNCONDITIONAL,
        }
    }

    #[test]
    fn one_virtual_reader_per_covered_physical_reader() {
        let (mut infra, edge, core) = infra();
        infra
            .create_virtual_system(&descriptor(1, &[1, 2, 3], 10, edge, core))
            .unwrap();
        assert_eq!(infra.virtual_reader_count(), 6);
        assert!(matches!(
            infra.create_virtual_system(&descriptor(1, &[1], 11, edge, core)),
            Err(ElementError::DuplicateSystem(_))
        ));
    }

    #[test]
    fn creation_errors_leave_no_trace() {
        let (mut infra, edge, core) = infra();
        let baseline = infra.inventory_json();
        assert_eq!(
            infra
                .create_virtual_system(&descriptor(1, &[4], 10, edge, core))
                .unwrap_err(),
            ElementError::UncoveredArea(AreaId(4))
        );
        infra
            .create_virtual_system(&descriptor(1, &[1], 10, edge, core))
            .unwrap();
        assert_eq!(
            infra
                .create_virtual_system(&descriptor(2, &[2], 10, edge, core))
                .unwrap_err(),
            ElementError::AddressInUse(VirtualNetworkAddress(10))
        );
        infra.remove_virtual_system(SystemHandle(sid(1))).unwrap();
        assert_eq!(infra.inventory_json(), baseline);
    }

    #[test]
    fn six_address_center() {
        let (mut infra, edge, core) = infra();
        let mut desc = descriptor(7, &[1], 0, edge, core);
        desc.addresses = (1..=6)
            .map(|i| (VirtualNetworkAddress(0xAC10_0000 + i), core))
            .collect();
        infra.create_virtual_system(&desc).unwrap();
        assert_eq!(infra.system(sid(7)).unwrap().center.addresses.len(), 6);
        assert_eq!(
            infra.system(sid(7)).unwrap().center.primary_address(),
            VirtualNetworkAddress(0xAC10_0001)
        );
    }

    #[test]
    fn remove_is_inverse_and_leaves_others_untouched() {
        let (mut infra, edge, core) = infra();
        let baseline = infra.inventory_json();
        let a = infra
            .create_virtual_system(&descriptor(1, &[1, 2], 10, edge, core))
            .unwrap();
        let only_b_before = {
            let mut alone = infra.clone();
            alone.remove_virtual_system(a).unwrap();
            alone
                .create_virtual_system(&descriptor(2, &[2, 3], 20, edge, core))
                .unwrap();
            alone.inventory_json()
        };
        infra
            .create_virtual_system(&descriptor(2, &[2, 3], 20, edge, core))
            .unwrap();
        infra.remove_virtual_system(a).unwrap();
        assert_eq!(infra.inventory_json(), only_b_before);
        assert_eq!(
            infra.remove_virtual_system(a).unwrap_err(),
            ElementError::UnknownSystem(sid(1))
        );
        infra.remove_virtual_system(SystemHandle(sid(2))).unwrap();
        assert_eq!(infra.inventory_json(), baseline);
    }

    #[test]
    fn reader_dispositions() {
        let (mut infra, edge, core) = infra();
        infra
            .create_virtual_system(&descriptor(3, &[1, 2], 10, edge, core))
            .unwrap();
        let area1 = infra.readers().find(|r| r.area == AreaId(1)).unwrap().clone();
        let area2 = infra.readers().find(|r| r.area == AreaId(2)).unwrap().clone();
        let t = ReadTime::from_absolute_minutes(600);

        assert_eq!(
            area1.on_read(word(5, 0, 10, 1), t),
            ReadDisposition::NoVirtualReader { system_id: sid(5) }
        );
        assert_eq!(
            area1.on_read(word(3, 1, 10, 1), t),
            ReadDisposition::PolicyDiscard {
                system_id: sid(3),
                reason: DiscardReason::AreaCondition
            }
        );
        assert!(matches!(
            area2.on_read(word(3, 1, 10, 1), t),
            ReadDisposition::ForwardedToMiddleware(_)
        ));
        match area1.on_read(word(3, 0, 10, 1), t) {
            ReadDisposition::ForwardedToMiddleware(ev) => {
                assert_eq!(ev.system_id, sid(3));
                assert_eq!(ev.tag_word, word(3, 0, 10, 1));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(
            area1.on_read(word(3, 9, 10, 1), t),
            ReadDisposition::PolicyDiscard {
                system_id: sid(3),
                reason: DiscardReason::UnknownPolicy
            }
        );
    }

    #[test]
    fn middleware_batches_at_threshold() {
        let mut mw = VirtualMiddleware::new(sid(1), NodeId(0), VpnId(1), Mode::Direct, 3);
        assert_eq!(mw.ingest(event(1, 1)).unwrap(), None);
        assert_eq!(mw.ingest(event(1, 2)).unwrap(), None);
        let batch = mw.ingest(event(1, 3)).unwrap().unwrap();
        assert_eq!(batch.events, vec![event(1, 1), event(1, 2), event(1, 3)]);
        assert!(!batch.partial);
        assert_eq!(mw.buffered(), 0);
        assert!(matches!(
            mw.ingest(event(2, 4)),
            Err(ElementError::SystemMismatch { .. })
        ));
        mw.ingest(event(1, 5)).unwrap();
        let rest = mw.flush().unwrap();
        assert!(rest.partial);
        assert_eq!(rest.len(), 1);
        assert_eq!(mw.flush(), None);

        let mut eager = VirtualMiddleware::new(sid(1), NodeId(0), VpnId(1), Mode::Direct, 1);
        assert_eq!(eager.ingest(event(1, 1)).unwrap().unwrap().len(), 1);
    }

    #[test]
    fn ons_lookup() {
        let mut ons = VirtualOns::new(sid(1), NodeId(0), 2.0);
        ons.register(sid(1), VirtualNetworkAddress(7));
        assert_eq!(ons.lookup(sid(1)).unwrap(), (VirtualNetworkAddress(7), 2.0));
        assert_eq!(ons.lookup(sid(2)).unwrap_err(), ElementError::NotFound(sid(2)));
    }

    #[test]
    fn center_accrues_processing_and_rejects_foreign_events() {
        let mut center = VirtualServiceCenter::new(sid(1), [VirtualNetworkAddress(1)].into(), 2.0);
        let meta = DeliveryMeta {
            batch_id: 0,
            dispatched_at_ms: 0.0,
            delivered_at_ms: 5.0,
            redirected: false,
            partial_batch: false,
        };
        let batch = |events| Batch {
            system_id: sid(1),
            events,
            partial: false,
        };
        center
            .receive(&batch(vec![event(1, 1), event(1, 2), event(1, 3)]), &meta)
            .unwrap();
        assert_eq!(center.processing_ms(), 6.0);
        center.receive(&batch(vec![]), &meta).unwrap();
        assert_eq!(center.processing_ms(), 6.0);
        assert!(matches!(
            center.receive(&batch(vec![event(2, 1)]), &meta),
            Err(ElementError::IsolationBreach { .. })
        ));
        assert_eq!(center.received_log().len(), 3);
    }
}
