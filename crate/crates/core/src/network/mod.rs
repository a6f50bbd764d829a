//! Simulated overlay network.
//!
//! Nodes joined by latency-weighted links. Each service system gets a VPN,
//! and routing stays inside that VPN's members. Every node keeps a table
//! mapping a virtual network address to the node it thinks hosts the
//! center. Tables are only changed by [`Network::maintenance_update`], so
//! after a migration they can be stale. A stale packet reaches the old host,
//! and a redirect entry installed there re-transfers it to the new host.

pub mod queue;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{PolicyNumber, SystemId, TagWord, VirtualNetworkAddress};
use crate::policy::AreaId;

pub use queue::{CongestionQueue, Served, ServiceQueue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VpnId(pub u32);

impl fmt::Display for VpnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vpn{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("link latency must be a non-negative finite number, got {0}")]
    InvalidLatency(f64),
    #[error("address {address} is not in the table of node {node}")]
    Unroutable {
        address: VirtualNetworkAddress,
        node: NodeId,
    },
    #[error("{vpn}: {reason}")]
    VpnViolation { vpn: VpnId, reason: String },
    #[error("unknown VPN {0}")]
    UnknownVpn(VpnId),
    #[error("{0} already exists")]
    DuplicateVpn(VpnId),
    #[error("address {0} is already allocated")]
    AddressInUse(VirtualNetworkAddress),
    #[error("address {0} is not allocated")]
    UnknownAddress(VirtualNetworkAddress),
    #[error("address {address} is not hosted at node {node}")]
    NotHostedHere {
        address: VirtualNetworkAddress,
        node: NodeId,
    },
    #[error("partition mismatch: {0}")]
    PartitionMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub a: NodeId,
    pub b: NodeId,
    pub one_way_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Route {
    pub path: Vec<NodeId>,
    pub latency_ms: f64,
}

impl Route {
    fn trivial(at: NodeId) -> Self {
        Route {
            path: vec![at],
            latency_ms: 0.0,
        }
    }

    pub fn hops(&self) -> usize {
        self.path.len().saturating_sub(1)
    }

    pub fn start(&self) -> NodeId {
        self.path[0]
    }

    pub fn end(&self) -> NodeId {
        *self.path.last().expect("route has at least one node")
    }
}

/// Per-event payload. Always carries the whole tag word.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PacketData {
    pub day_index: u32,
    pub read_minute: u16,
    pub read_location: AreaId,
    pub tag_word: TagWord,
    pub system_id: SystemId,
    pub policy_number: PolicyNumber,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Packet {
    pub vpn: VpnId,
    pub destination: VirtualNetworkAddress,
    pub priority: bool,
    pub data: Vec<PacketData>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeliveryRecord {
    pub path: Vec<NodeId>,
    pub latency_ms: f64,
    pub queueing_ms: f64,
    pub hops: usize,
    pub redirected: bool,
    pub redirect_hops: usize,
    pub delivered_to: NodeId,
}

impl DeliveryRecord {
    pub fn starting_at(node: NodeId) -> Self {
        DeliveryRecord {
            path: vec![node],
            latency_ms: 0.0,
            queueing_ms: 0.0,
            hops: 0,
            redirected: false,
            redirect_hops: 0,
            delivered_to: node,
        }
    }

    /// Appends a leg that starts where the record currently ends.
    pub fn extend(&mut self, route: &Route, redirect: bool) {
        debug_assert_eq!(self.path.last(), Some(&route.start()));
        self.path.extend_from_slice(&route.path[1..]);
        self.latency_ms += route.latency_ms;
        self.hops += route.hops();
        if redirect {
            self.redirected = true;
            self.redirect_hops += route.hops();
        }
        self.delivered_to = route.end();
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Scope {
    AllNodes,
    Nodes(BTreeSet<NodeId>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Arrival {
    Delivered,
    Retransfer(Route),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct RedirectEntry {
    pub at: NodeId,
    pub address: VirtualNetworkAddress,
    pub new_host: NodeId,
}

#[derive(Debug, Clone, Default)]
struct ShortestPaths {
    dist: BTreeMap<NodeId, f64>,
    prev: BTreeMap<NodeId, NodeId>,
}

impl ShortestPaths {
    fn route_to(&self, from: NodeId, to: NodeId) -> Option<Route> {
        let latency_ms = *self.dist.get(&to)?;
        let mut path = vec![to];
        let mut cur = to;
        while cur != from {
            cur = self.prev[&cur];
            path.push(cur);
        }
        path.reverse();
        Some(Route { path, latency_ms })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dist(f64);

impl Eq for Dist {}

impl PartialOrd for Dist {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dist {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone)]
pub struct Vpn {
    id: VpnId,
    members: BTreeSet<NodeId>,
    routes: BTreeMap<NodeId, ShortestPaths>,
}

impl Vpn {
    pub fn id(&self) -> VpnId {
        self.id
    }

    pub fn members(&self) -> &BTreeSet<NodeId> {
        &self.members
    }

    pub fn contains(&self, node: NodeId) -> bool {
        self.members.contains(&node)
    }
}

#[derive(Debug, Clone)]
struct NodeState {
    name: String,
    service_rate_per_ms: Option<f64>,
    table: BTreeMap<VirtualNetworkAddress, NodeId>,
    redirects: BTreeMap<VirtualNetworkAddress, NodeId>,
}

#[derive(Debug, Clone, Default)]
pub struct Network {
    nodes: Vec<NodeState>,
    adjacency: Vec<Vec<(NodeId, f64)>>,
    links: Vec<Link>,
    vpns: BTreeMap<VpnId, Vpn>,
    hosting: BTreeMap<VirtualNetworkAddress, NodeId>,
    owners: BTreeMap<VirtualNetworkAddress, VpnId>,
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_node(&mut self, name: impl Into<String>, service_rate_per_ms: Option<f64>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(NodeState {
            name: name.into(),
            service_rate_per_ms,
            table: BTreeMap::new(),
            redirects: BTreeMap::new(),
        });
        self.adjacency.push(Vec::new());
        id
    }

    pub fn add_link(&mut self, a: NodeId, b: NodeId, one_way_latency_ms: f64) -> Result<(), NetworkError> {
        self.check_node(a)?;
        self.check_node(b)?;
        if !one_way_latency_ms.is_finite() || one_way_latency_ms < 0.0 {
            return Err(NetworkError::InvalidLatency(one_way_latency_ms));
        }
        self.adjacency[a.0 as usize].push((b, one_way_latency_ms));
        self.adjacency[b.0 as usize].push((a, one_way_latency_ms));
        self.links.push(Link {
            a,
            b,
            one_way_latency_ms,
        });
        Ok(())
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len() as u32).map(NodeId)
    }

    pub fn contains_node(&self, node: NodeId) -> bool {
        (node.0 as usize) < self.nodes.len()
    }

    fn check_node(&self, node: NodeId) -> Result<(), NetworkError> {
        if self.contains_node(node) {
            Ok(())
        } else {
            Err(NetworkError::UnknownNode(node.to_string()))
        }
    }

    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name).map(|i| NodeId(i as u32))
    }

    pub fn node_name(&self, node: NodeId) -> &str {
        &self.nodes[node.0 as usize].name
    }

    pub fn service_rate(&self, node: NodeId) -> Option<f64> {
        self.nodes[node.0 as usize].service_rate_per_ms
    }

    pub fn links(&self) -> &[Link] {
        &self.links
    }

    fn dijkstra(&self, from: NodeId, allowed: Option<&BTreeSet<NodeId>>) -> ShortestPaths {
        let mut sp = ShortestPaths::default();
        let mut heap = BinaryHeap::new();
        sp.dist.insert(from, 0.0);
        heap.push(Reverse((Dist(0.0), from)));
        while let Some(Reverse((Dist(d), node))) = heap.pop() {
            if d > sp.dist[&node] {
                continue;
            }
            for &(next, w) in &self.adjacency[node.0 as usize] {
                if allowed.is_some_and(|set| !set.contains(&next)) {
                    continue;
                }
                let nd = d + w;
                if sp.dist.get(&next).is_none_or(|&cur| nd < cur) {
                    sp.dist.insert(next, nd);
                    sp.prev.insert(next, node);
                    heap.push(Reverse((Dist(nd), next)));
                }
            }
        }
        sp
    }

    /// Shortest-latency route over the whole topology, ignoring VPNs.
    pub fn shortest_path(&self, from: NodeId, to: NodeId) -> Option<Route> {
        if !self.contains_node(from) || !self.contains_node(to) {
            return None;
        }
        self.dijkstra(from, None).route_to(from, to)
    }

    /// `nodes` plus every node on a shortest path between any two of them.
    pub fn path_closure(&self, nodes: &BTreeSet<NodeId>) -> Result<BTreeSet<NodeId>, NetworkError> {
        let mut out = nodes.clone();
        for &a in nodes {
            self.check_node(a)?;
            let sp = self.dijkstra(a, None);
            for &b in nodes.range(a..) {
                match sp.route_to(a, b) {
                    Some(route) => out.extend(route.path),
                    None => {
                        return Err(NetworkError::UnknownNode(format!(
                            "{} is unreachable from {}",
                            self.node_name(b),
                            self.node_name(a)
                        )))
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn create_vpn(&mut self, id: VpnId, members: BTreeSet<NodeId>) -> Result<(), NetworkError> {
        if self.vpns.contains_key(&id) {
            return Err(NetworkError::DuplicateVpn(id));
        }
        for &m in &members {
            self.check_node(m)?;
        }
        let routes = members.iter().map(|&m| (m, self.dijkstra(m, Some(&members)))).collect();
        self.vpns.insert(id, Vpn { id, members, routes });
        Ok(())
    }

    pub fn remove_vpn(&mut self, id: VpnId) -> Result<Vpn, NetworkError> {
        self.vpns.remove(&id).ok_or(NetworkError::UnknownVpn(id))
    }

    pub fn vpn(&self, id: VpnId) -> Option<&Vpn> {
        self.vpns.get(&id)
    }

    pub fn vpns(&self) -> impl Iterator<Item = &Vpn> {
        self.vpns.values()
    }

    /// Route between two members, never leaving the VPN.
    pub fn vpn_route(&self, vpn: VpnId, from: NodeId, to: NodeId) -> Result<Route, NetworkError> {
        let v = self.vpns.get(&vpn).ok_or(NetworkError::UnknownVpn(vpn))?;
        let violation = |reason: String| NetworkError::VpnViolation { vpn, reason };
        for n in [from, to] {
            if !v.contains(n) {
                return Err(violation(format!("{} is not a member", self.node_name(n))));
            }
        }
        v.routes[&from].route_to(from, to).ok_or_else(|| {
            violation(format!(
                "no path from {} to {} inside the VPN",
                self.node_name(from),
                self.node_name(to)
            ))
        })
    }

    /// Allocates `addr` to `vpn`, hosts it at `host`, and installs the
    /// mapping in every node's table.
    pub fn register_address(
        &mut self,
        addr: VirtualNetworkAddress,
        vpn: VpnId,
        host: NodeId,
    ) -> Result<(), NetworkError> {
        self.check_node(host)?;
        if self.owners.contains_key(&addr) {
            return Err(NetworkError::AddressInUse(addr));
        }
        let v = self.vpns.get(&vpn).ok_or(NetworkError::UnknownVpn(vpn))?;
        if !v.contains(host) {
            return Err(NetworkError::VpnViolation {
                vpn,
                reason: format!("host {} is not a member", self.node_name(host)),
            });
        }
        self.owners.insert(addr, vpn);
        self.hosting.insert(addr, host);
        self.maintenance_update(addr, host, &Scope::AllNodes)
    }

    /// Drops every trace of `addr`: ownership, hosting, tables and redirects.
    pub fn release_address(&mut self, addr: VirtualNetworkAddress) -> Result<(), NetworkError> {
        self.owners.remove(&addr).ok_or(NetworkError::UnknownAddress(addr))?;
        self.hosting.remove(&addr);
        for node in &mut self.nodes {
            node.table.remove(&addr);
            node.redirects.remove(&addr);
        }
        Ok(())
    }

    pub fn is_allocated(&self, addr: VirtualNetworkAddress) -> bool {
        self.owners.contains_key(&addr)
    }

    pub fn owner_of(&self, addr: VirtualNetworkAddress) -> Option<VpnId> {
        self.owners.get(&addr).copied()
    }

    /// The node that actually hosts `addr` right now.
    pub fn host_of(&self, addr: VirtualNetworkAddress) -> Option<NodeId> {
        self.hosting.get(&addr).copied()
    }

    pub fn hosted_at(&self, node: NodeId) -> BTreeSet<VirtualNetworkAddress> {
        self.hosting
            .iter()
            .filter(|(_, &h)| h == node)
            .map(|(&a, _)| a)
            .collect()
    }

    /// What `node`'s table says about `addr` (possibly stale).
    pub fn resolve(&self, node: NodeId, addr: VirtualNetworkAddress) -> Option<NodeId> {
        self.nodes.get(node.0 as usize)?.table.get(&addr).copied()
    }

    pub fn table(&self, node: NodeId) -> &BTreeMap<VirtualNetworkAddress, NodeId> {
        &self.nodes[node.0 as usize].table
    }

    pub fn redirect_at(&self, node: NodeId, addr: VirtualNetworkAddress) -> Option<NodeId> {
        self.nodes.get(node.0 as usize)?.redirects.get(&addr).copied()
    }

    pub fn redirects(&self) -> Vec<RedirectEntry> {
        self.node_ids()
            .flat_map(|at| {
                self.nodes[at.0 as usize]
                    .redirects
                    .iter()
                    .map(move |(&address, &new_host)| RedirectEntry { at, address, new_host })
            })
            .collect()
    }

    /// First leg of a delivery: from `from` toward whatever its table says
    /// hosts `addr`.
    pub fn route_to_address(
        &self,
        vpn: VpnId,
        addr: VirtualNetworkAddress,
        from: NodeId,
    ) -> Result<Route, NetworkError> {
        let v = self.vpns.get(&vpn).ok_or(NetworkError::UnknownVpn(vpn))?;
        if !v.contains(from) {
            return Err(NetworkError::VpnViolation {
                vpn,
                reason: format!("source {} is not a member", self.node_name(from)),
            });
        }
        let target = self.resolve(from, addr).ok_or(NetworkError::Unroutable {
            address: addr,
            node: from,
        })?;
        if target == from {
            return Ok(Route::trivial(from));
        }
        self.vpn_route(vpn, from, target)
    }

    /// Decides what happens when a packet for `addr` reaches `at`.
    pub fn arrive(&self, vpn: VpnId, addr: VirtualNetworkAddress, at: NodeId) -> Result<Arrival, NetworkError> {
        if self.hosting.get(&addr) == Some(&at) {
            return Ok(Arrival::Delivered);
        }
        match self.redirect_at(at, addr) {
            Some(new_host) => Ok(Arrival::Retransfer(self.vpn_route(vpn, at, new_host)?)),
            None => Err(NetworkError::Unroutable {
                address: addr,
                node: at,
            }),
        }
    }

    /// Routes a packet to completion against the current state.
    pub fn send(&self, pkt: &Packet, from: NodeId) -> Result<DeliveryRecord, NetworkError> {
        let first = self.route_to_address(pkt.vpn, pkt.destination, from)?;
        let mut record = DeliveryRecord::starting_at(from);
        record.extend(&first, false);
        // redirects never chain, so this runs at most twice
        for _ in 0..=self.nodes.len() {
            match self.arrive(pkt.vpn, pkt.destination, record.delivered_to)? {
                Arrival::Delivered => return Ok(record),
                Arrival::Retransfer(route) => record.extend(&route, true),
            }
        }
        Err(NetworkError::Unroutable {
            address: pkt.destination,
            node: record.delivered_to,
        })
    }

    pub fn maintenance_update(
        &mut self,
        addr: VirtualNetworkAddress,
        new_host: NodeId,
        scope: &Scope,
    ) -> Result<(), NetworkError> {
        self.check_node(new_host)?;
        match scope {
            Scope::AllNodes => {
                for node in &mut self.nodes {
                    node.table.insert(addr, new_host);
                }
            }
            Scope::Nodes(set) => {
                for &n in set {
                    self.check_node(n)?;
                }
                for &n in set {
                    self.nodes[n.0 as usize].table.insert(addr, new_host);
                }
            }
        }
        Ok(())
    }

    /// Moves `addr` from `old_host` to `new_host` and leaves a redirect at
    /// `old_host`. Existing redirects that pointed at `old_host` are
    /// re-aimed at `new_host`, so chains never form.
    pub fn migrate_center(
        &mut self,
        addr: VirtualNetworkAddress,
        old_host: NodeId,
        new_host: NodeId,
        propagate: bool,
    ) -> Result<(), NetworkError> {
        self.check_node(old_host)?;
        self.check_node(new_host)?;
        if self.hosting.get(&addr) != Some(&old_host) {
            return Err(NetworkError::NotHostedHere {
                address: addr,
                node: old_host,
            });
        }
        if old_host == new_host {
            return Ok(());
        }
        let vpn = self.owners[&addr];
        if !self.vpns[&vpn].contains(new_host) {
            return Err(NetworkError::VpnViolation {
                vpn,
                reason: format!("new host {} is not a member", self.node_name(new_host)),
            });
        }
        for node in &mut self.nodes {
            if let Some(target) = node.redirects.get_mut(&addr) {
                if *target == old_host {
                    *target = new_host;
                }
            }
        }
        self.nodes[new_host.0 as usize].redirects.remove(&addr);
        self.nodes[old_host.0 as usize].redirects.insert(addr, new_host);
        self.hosting.insert(addr, new_host);
        log::debug!(
            "migrated {addr} from {} to {}",
            self.node_name(old_host),
            self.node_name(new_host)
        );
        if propagate {
            self.maintenance_update(addr, new_host, &Scope::AllNodes)?;
        }
        Ok(())
    }

    /// Re-homes every address of one center according to `partition`.
    ///
    /// All keys must currently live on one node, and the keys must be
    /// exactly the addresses that node hosts for the owning VPN.
    pub fn split_center(
        &mut self,
        partition: &BTreeMap<VirtualNetworkAddress, NodeId>,
        propagate: bool,
    ) -> Result<(), NetworkError> {
        let mismatch = NetworkError::PartitionMismatch;
        let Some((&first, _)) = partition.iter().next() else {
            return Err(mismatch("empty partition".into()));
        };
        let old_host = self.host_of(first).ok_or(NetworkError::UnknownAddress(first))?;
        let vpn = self.owners[&first];
        for (&addr, &target) in partition {
            self.check_node(target)?;
            if self.host_of(addr) != Some(old_host) {
                return Err(mismatch(format!(
                    "{addr} is not hosted at {}",
                    self.node_name(old_host)
                )));
            }
            if !self.vpns[&vpn].contains(target) {
                return Err(NetworkError::VpnViolation {
                    vpn,
                    reason: format!("new host {} is not a member", self.node_name(target)),
                });
            }
        }
        let expected: BTreeSet<_> = self
            .hosted_at(old_host)
            .into_iter()
            .filter(|a| self.owners.get(a) == Some(&vpn))
            .collect();
        let given: BTreeSet<_> = partition.keys().copied().collect();
        if expected != given {
            let missing: Vec<String> = expected.difference(&given).map(|a| a.to_string()).collect();
            return Err(mismatch(format!("partition omits {}", missing.join(", "))));
        }
        for (&addr, &target) in partition {
            self.migrate_center(addr, old_host, target, propagate)?;
        }
        Ok(())
    }
}
