//! The two end-to-end dispatch flows from middleware to service center.
//!
//! * Two-step: ask the system's ONS for the center address, then forward.
//! * Direct: slice the address out of the tag word and forward at once.
//!
//! Both flows share [`resolve`] and the overlay's routing. The
//! event-driven engine uses the same pieces with simulated time in between.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{self, SystemId, VirtualNetworkAddress};
use crate::elements::{Batch, ElementError, VirtualMiddleware, VirtualOns};
use crate::network::{DeliveryRecord, Network, NetworkError, Packet, PacketData, VpnId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "two-step")]
    TwoStep,
    #[serde(rename = "direct")]
    Direct,
}

impl Mode {
    pub const ALL: [Mode; 2] = [Mode::TwoStep, Mode::Direct];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::TwoStep => "two-step",
            Mode::Direct => "direct",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two-step" | "two_step" | "twostep" => Ok(Mode::TwoStep),
            "direct" => Ok(Mode::Direct),
            other => Err(format!("unknown mode {other:?} (expected two-step or direct)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PipelineError {
    #[error("cannot dispatch an empty batch")]
    EmptyBatch,
    #[error("batch of system {system} mixes service addresses {first} and {other}")]
    MixedAddressBatch {
        system: SystemId,
        first: VirtualNetworkAddress,
        other: VirtualNetworkAddress,
    },
    #[error("ONS resolution failed for system {0}")]
    ResolutionFailed(SystemId),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Where a batch goes and what it cost to find out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Resolution {
    pub destination: VirtualNetworkAddress,
    pub ons_rtt_ms: f64,
    pub ons_processing_ms: f64,
    pub ons_queries: u32,
}

impl Resolution {
    pub fn delay_ms(&self) -> f64 {
        self.ons_rtt_ms + self.ons_processing_ms
    }
}

pub fn resolve_direct(batch: &Batch) -> Result<Resolution, PipelineError> {
    let first = batch.events.first().ok_or(PipelineError::EmptyBatch)?;
    let destination = codec::extract_service_address(first.tag_word);
    if let Some(other) = batch
        .events
        .iter()
        .map(|e| codec::extract_service_address(e.tag_word))
        .find(|&a| a != destination)
    {
        return Err(PipelineError::MixedAddressBatch {
            system: batch.system_id,
            first: destination,
            other,
        });
    }
    Ok(Resolution {
        destination,
        ons_rtt_ms: 0.0,
        ons_processing_ms: 0.0,
        ons_queries: 0,
    })
}

pub fn resolve_two_step(
    batch: &Batch,
    mw: &VirtualMiddleware,
    ons: &VirtualOns,
    net: &Network,
) -> Result<Resolution, PipelineError> {
    if batch.is_empty() {
        return Err(PipelineError::EmptyBatch);
    }
    let (destination, processing) = ons.lookup(batch.system_id).map_err(|e| match e {
        ElementError::NotFound(s) => PipelineError::ResolutionFailed(s),
        _ => PipelineError::ResolutionFailed(batch.system_id),
    })?;
    let one_way = net.vpn_route(mw.vpn, mw.node, ons.node)?.latency_ms;
    Ok(Resolution {
        destination,
        ons_rtt_ms: 2.0 * one_way,
        ons_processing_ms: processing,
        ons_queries: 1,
    })
}

pub fn resolve(
    mode: Mode,
    batch: &Batch,
    mw: &VirtualMiddleware,
    ons: &VirtualOns,
    net: &Network,
) -> Result<Resolution, PipelineError> {
    match mode {
        Mode::Direct => resolve_direct(batch),
        Mode::TwoStep => resolve_two_step(batch, mw, ons, net),
    }
}

pub fn build_packet(batch: &Batch, vpn: VpnId, destination: VirtualNetworkAddress) -> Packet {
    Packet {
        vpn,
        destination,
        priority: batch.priority(),
        data: batch
            .events
            .iter()
            .map(|e| {
                let tag = codec::decode(e.tag_word);
                PacketData {
                    day_index: e.read_time.day_index,
                    read_minute: e.read_time.minute,
                    read_location: e.reader_area,
                    tag_word: e.tag_word,
                    system_id: e.system_id,
                    policy_number: tag.policy_number,
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DispatchRecord {
    pub mode: Mode,
    pub resolution: Resolution,
    pub delivery: DeliveryRecord,
    pub packet: Packet,
}

impl DispatchRecord {
    /// Resolution delay plus network transit.
    pub fn total_latency_ms(&self) -> f64 {
        self.resolution.delay_ms() + self.delivery.latency_ms + self.delivery.queueing_ms
    }
}

pub fn dispatch_two_step(
    batch: &Batch,
    mw: &VirtualMiddleware,
    ons: &VirtualOns,
    net: &Network,
) -> Result<DispatchRecord, PipelineError> {
    let resolution = resolve_two_step(batch, mw, ons, net)?;
    finish(Mode::TwoStep, batch, mw, net, resolution)
}

pub fn dispatch_direct(batch: &Batch, mw: &VirtualMiddleware, net: &Network) -> Result<DispatchRecord, PipelineError> {
    let resolution = resolve_direct(batch)?;
    finish(Mode::Direct, batch, mw, net, resolution)
}

fn finish(
    mode: Mode,
    batch: &Batch,
    mw: &VirtualMiddleware,
    net: &Network,
    resolution: Resolution,
) -> Result<DispatchRecord, PipelineError> {
    let packet = build_packet(batch, mw.vpn, resolution.destination);
    let delivery = net.send(&packet, mw.node)?;
    Ok(DispatchRecord {
        mode,
        resolution,
        delivery,
        packet,
    })
}
