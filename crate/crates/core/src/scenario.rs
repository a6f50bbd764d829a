//! Scenario files: a line-oriented text format with named sections.
//!
//! ```text
//! rfid-fabric-scenario 1
//! name fig8_direct
//!
//! [topology]
//! node mw
//! node center rate=2
//! link mw center 5
//!
//! [readers]
//! reader gate area=1 node=mw
//!
//! [systems]
//! system 1 areas=1 threshold=3 mode=direct middleware=mw ons=mw ons_ms=2 process_ms=1 addresses=192.168.1.0@center
//! policy night system=1 policy_number=3 window_start=1380 window_end=120
//!
//! [tags]
//! tags system=1 policy=0 address=192.168.1.0 serials=1..6
//!
//! [schedule]
//! read at=600 reader=gate tag=00000100c0a8010000000001 repeat=2
//! generate readers=* start=0 duration=60 per_minute=4 system=1
//!
//! [events]
//! migrate at=700 address=192.168.1.0 from=center to=backup propagate=false
//! ```
//!
//! `#` starts a comment. Times are absolute minutes since day 0 midnight
//! plus an optional `ms=` offset within that minute. The full grammar is
//! in `docs/scenario-format.md`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::codec::{self, ObjectSerial, PolicyNumber, SystemId, TagId, TagWord, VirtualNetworkAddress};
use crate::elements::{ElementError, Infrastructure, ReaderId, ServiceSystemDescriptor};
use crate::network::{Network, NodeId};
use crate::pipeline::Mode;
use crate::policy::{AreaCondition, AreaId, AreaSense, PolicyDefinition, TimeWindow};

pub const FORMAT_HEADER: &str = "rfid-fabric-scenario";
pub const FORMAT_VERSION: u32 = 1;
pub const MS_PER_MINUTE: u32 = 60_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("{reference}: {reason}")]
    ValidationError { reference: String, reason: String },
}

fn validation(reference: impl Into<String>, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::ValidationError {
        reference: reference.into(),
        reason: reason.into(),
    }
}

/// Absolute simulated instant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct At {
    pub minute: u64,
    pub ms: u32,
}

impl At {
    pub fn minute(minute: u64) -> Self {
        At { minute, ms: 0 }
    }

    pub fn as_ms(self) -> f64 {
        self.minute as f64 * f64::from(MS_PER_MINUTE) + f64::from(self.ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSpec {
    pub name: String,
    pub service_rate_per_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReaderSpec {
    pub name: String,
    pub area: AreaId,
    pub node: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedPolicy {
    pub name: String,
    pub definition: PolicyDefinition,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemSpec {
    pub system_id: SystemId,
    pub areas: BTreeSet<AreaId>,
    pub threshold: usize,
    pub mode: Mode,
    pub middleware: String,
    pub ons: String,
    pub ons_ms: f64,
    pub process_ms: f64,
    pub addresses: Vec<(VirtualNetworkAddress, String)>,
    pub vpn: Option<Vec<String>>,
    pub policies: Vec<NamedPolicy>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReadSpec {
    pub at: At,
    pub reader: String,
    pub tag: TagWord,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeneratorSpec {
    /// Empty means every reader.
    pub readers: Vec<String>,
    pub start_minute: u64,
    pub duration_minutes: u64,
    pub per_minute: u32,
    pub system: Option<SystemId>,
    /// The line as written, echoed into reports.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    Migrate {
        address: VirtualNetworkAddress,
        from: String,
        to: String,
        propagate: bool,
    },
    Split {
        partition: Vec<(VirtualNetworkAddress, String)>,
        propagate: bool,
    },
    Maintenance {
        address: VirtualNetworkAddress,
        host: String,
        /// `None` = all nodes.
        scope: Option<Vec<String>>,
    },
    Burst {
        node: String,
        count: u32,
        priority_count: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventSpec {
    pub at: At,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Scenario {
    pub name: String,
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
    pub readers: Vec<ReaderSpec>,
    pub systems: Vec<SystemSpec>,
    pub tags: Vec<TagWord>,
    pub reads: Vec<ReadSpec>,
    pub generators: Vec<GeneratorSpec>,
    pub events: Vec<EventSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Section {
    Preamble,
    Topology,
    Readers,
    Systems,
    Tags,
    Schedule,
    Events,
}

/// One tokenized line: leading positional words and `key=value` pairs.
struct Line<'a> {
    number: usize,
    keyword: &'a str,
    positional: Vec<&'a str>,
    pairs: BTreeMap<&'a str, &'a str>,
    used: BTreeSet<&'a str>,
}

impl<'a> Line<'a> {
    fn tokenize(number: usize, text: &'a str) -> Result<Option<Self>, ScenarioError> {
        let text = text.split('#').next().unwrap_or("").trim();
        if text.is_empty() {
            return Ok(None);
        }
        let mut words = text.split_whitespace();
        let keyword = words.next().expect("non-empty");
        let mut positional = Vec::new();
        let mut pairs = BTreeMap::new();
        for w in words {
            match w.split_once('=') {
                Some((k, v)) => {
                    if k.is_empty() || v.is_empty() {
                        return Err(parse_err(number, format!("malformed pair {w:?}")));
                    }
                    if pairs.insert(k, v).is_some() {
                        return Err(parse_err(number, format!("duplicate key {k:?}")));
                    }
                }
                None if pairs.is_empty() => positional.push(w),
                None => return Err(parse_err(number, format!("positional {w:?} after key=value pairs"))),
            }
        }
        Ok(Some(Line {
            number,
            keyword,
            positional,
            pairs,
            used: BTreeSet::new(),
        }))
    }

    fn err(&self, message: impl Into<String>) -> ScenarioError {
        parse_err(self.number, message)
    }

    fn positional(&self, count: usize) -> Result<&[&'a str], ScenarioError> {
        if self.positional.len() != count {
            return Err(self.err(format!(
                "{} expects {count} positional argument(s), got {}",
                self.keyword,
                self.positional.len()
            )));
        }
        Ok(&self.positional)
    }

    fn opt(&mut self, key: &'a str) -> Option<&'a str> {
        let v = self.pairs.get(key).copied();
        if v.is_some() {
            self.used.insert(key);
        }
        v
    }

    fn req(&mut self, key: &'a str) -> Result<&'a str, ScenarioError> {
        self.opt(key)
            .ok_or_else(|| self.err(format!("{} requires {key}=", self.keyword)))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, raw: &str) -> Result<T, ScenarioError> {
        raw.parse()
            .map_err(|_| self.err(format!("invalid value {raw:?} for {key}")))
    }

    fn req_parse<T: std::str::FromStr>(&mut self, key: &'a str) -> Result<T, ScenarioError> {
        let raw = self.req(key)?;
        self.parse(key, raw)
    }

    fn opt_parse<T: std::str::FromStr>(&mut self, key: &'a str) -> Result<Option<T>, ScenarioError> {
        match self.opt(key) {
            Some(raw) => self.parse(key, raw).map(Some),
            None => Ok(None),
        }
    }

    fn at(&mut self) -> Result<At, ScenarioError> {
        let minute = self.req_parse("at")?;
        let ms: u32 = self.opt_parse("ms")?.unwrap_or(0);
        if ms >= MS_PER_MINUTE {
            return Err(self.err("ms= must be below 60000"));
        }
        Ok(At { minute, ms })
    }

    fn finish(self) -> Result<(), ScenarioError> {
        if let Some(k) = self.pairs.keys().find(|k| !self.used.contains(*k)) {
            return Err(self.err(format!("unknown key {k:?} for {}", self.keyword)));
        }
        Ok(())
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> ScenarioError {
    ScenarioError::ParseError {
        line,
        message: message.into(),
    }
}

fn parse_bool(line: &Line, key: &str, raw: &str) -> Result<bool, ScenarioError> {
    match raw {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(line.err(format!("invalid boolean {raw:?} for {key}"))),
    }
}

fn parse_list<T: std::str::FromStr>(line: &Line, key: &str, raw: &str) -> Result<Vec<T>, ScenarioError> {
    raw.split(',').map(|item| line.parse(key, item)).collect()
}

fn parse_placement(line: &Line, key: &str, raw: &str) -> Result<Vec<(VirtualNetworkAddress, String)>, ScenarioError> {
    raw.split(',')
        .map(|item| {
            let (a, node) = item
                .split_once('@')
                .ok_or_else(|| line.err(format!("{key} entries look like <address>@<node>, got {item:?}")))?;
            Ok((line.parse(key, a)?, node.to_string()))
        })
        .collect()
}

fn parse_system_id(line: &Line, key: &str, raw: &str) -> Result<SystemId, ScenarioError> {
    let v: u32 = line.parse(key, raw)?;
    SystemId::new(v).map_err(|e| line.err(e.to_string()))
}

impl Scenario {
    /// Parses and validates scenario text.
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let scenario = Self::parse_unvalidated(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    fn parse_unvalidated(text: &str) -> Result<Scenario, ScenarioError> {
        let mut sc = Scenario::default();
        let mut section = Section::Preamble;
        let mut header_seen = false;
        let mut pending_policies: Vec<(usize, SystemId, NamedPolicy)> = Vec::new();

        for (idx, source_line) in text.lines().enumerate() {
            let number = idx + 1;
            let Some(mut line) = Line::tokenize(number, source_line)? else {
                continue;
            };
            if !header_seen {
                if line.keyword != FORMAT_HEADER {
                    return Err(line.err(format!("expected header `{FORMAT_HEADER} {FORMAT_VERSION}`")));
                }
                let version = line.positional(1)?[0];
                if version != FORMAT_VERSION.to_string() {
                    return Err(line.err(format!("unsupported format version {version}")));
                }
                header_seen = true;
                continue;
            }
            if line.keyword.starts_with('[') {
                let name = line
                    .keyword
                    .strip_prefix('[')
                    .and_then(|s| s.strip_suffix(']'))
                    .ok_or_else(|| line.err("malformed section header"))?;
                section = match name {
                    "topology" => Section::Topology,
                    "readers" => Section::Readers,
                    "systems" => Section::Systems,
                    "tags" => Section::Tags,
                    "schedule" => Section::Schedule,
                    "events" => Section::Events,
                    other => return Err(line.err(format!("unknown section [{other}]"))),
                };
                line.positional(0)?;
                continue;
            }
            match (section, line.keyword) {
                (Section::Preamble, "name") => {
                    let p = line.positional(1)?;
                    sc.name = p[0].to_string();
                }
                (Section::Topology, "node") => {
                    let name = line.positional(1)?[0].to_string();
                    let rate: Option<f64> = line.opt_parse("rate")?;
                    if rate.is_some_and(|r| !(r.is_finite() && r > 0.0)) {
                        return Err(line.err("rate must be a positive number of packets per ms"));
                    }
                    sc.nodes.push(NodeSpec {
                        name,
                        service_rate_per_ms: rate,
                    });
                }
                (Section::Topology, "link") => {
                    let p = line.positional(3)?;
                    let latency_ms: f64 = line.parse("latency", p[2])?;
                    if !(latency_ms.is_finite() && latency_ms >= 0.0) {
                        return Err(line.err("link latency must be non-negative"));
                    }
                    sc.links.push(LinkSpec {
                        a: p[0].to_string(),
                        b: p[1].to_string(),
                        latency_ms,
                    });
                }
                (Section::Readers, "reader") => {
                    let name = line.positional(1)?[0].to_string();
                    let area = AreaId(line.req_parse("area")?);
                    let node = line.req("node")?.to_string();
                    sc.readers.push(ReaderSpec { name, area, node });
                }
                (Section::Systems, "system") => {
                    let raw_id = line.positional(1)?[0];
                    let system_id = parse_system_id(&line, "system", raw_id)?;
                    let raw = line.req("areas")?;
                    let areas = parse_list::<u16>(&line, "areas", raw)?
                        .into_iter()
                        .map(AreaId)
                        .collect();
                    let threshold = line.req_parse("threshold")?;
                    let raw = line.req("mode")?;
                    let mode = raw.parse::<Mode>().map_err(|e| line.err(e))?;
                    let middleware = line.req("middleware")?.to_string();
                    let ons = line.req("ons")?.to_string();
                    let ons_ms: f64 = line.opt_parse("ons_ms")?.unwrap_or(0.0);
                    let process_ms: f64 = line.opt_parse("process_ms")?.unwrap_or(0.0);
                    if !(ons_ms >= 0.0 && process_ms >= 0.0) {
                        return Err(line.err("processing costs must be non-negative"));
                    }
                    let raw = line.req("addresses")?;
                    let addresses = parse_placement(&line, "addresses", raw)?;
                    let vpn = line.opt("vpn").map(|raw| raw.split(',').map(str::to_string).collect());
                    sc.systems.push(SystemSpec {
                        system_id,
                        areas,
                        threshold,
                        mode,
                        middleware,
                        ons,
                        ons_ms,
                        process_ms,
                        addresses,
                        vpn,
                        policies: Vec::new(),
                    });
                }
                (Section::Systems, "policy") => {
                    let name = line.positional(1)?[0].to_string();
                    let raw = line.req("system")?;
                    let system = parse_system_id(&line, "system", raw)?;
                    let policy_number = PolicyNumber(line.req_parse("policy_number")?);
                    let areas = match line.opt("areas") {
                        Some(raw) => Some(parse_list::<u16>(&line, "areas", raw)?),
                        None => None,
                    };
                    let sense = match line.opt("sense") {
                        Some("inside") => Some(AreaSense::Inside),
                        Some("outside") => Some(AreaSense::Outside),
                        Some(other) => return Err(line.err(format!("sense must be inside or outside, got {other:?}"))),
                        None => None,
                    };
                    let area_condition = match (areas, sense) {
                        (Some(a), s) => Some(AreaCondition {
                            areas: a.into_iter().map(AreaId).collect(),
                            sense: s.unwrap_or(AreaSense::Inside),
                        }),
                        (None, None) => None,
                        (None, Some(_)) => return Err(line.err("sense= requires areas=")),
                    };
                    let start: Option<u16> = line.opt_parse("window_start")?;
                    let end: Option<u16> = line.opt_parse("window_end")?;
                    let time_condition = match (start, end) {
                        (Some(s), Some(e)) => Some(TimeWindow::new(s, e).map_err(|e| line.err(e.to_string()))?),
                        (None, None) => None,
                        _ => return Err(line.err("window_start and window_end go together")),
                    };
                    let priority = match line.opt("priority") {
                        Some(raw) => parse_bool(&line, "priority", raw)?,
                        None => false,
                    };
                    let encryption_scheme = line.opt_parse("encryption_scheme")?.unwrap_or(0);
                    pending_policies.push((
                        number,
                        system,
                        NamedPolicy {
                            name,
                            definition: PolicyDefinition {
                                policy_number,
                                area_condition,
                                time_condition,
                                priority,
                                encryption_scheme,
                            },
                        },
                    ));
                }
                (Section::Tags, "tag") => {
                    let raw = line.positional(1)?[0];
                    let word = TagWord::parse_hex(raw).map_err(|e| line.err(e.to_string()))?;
                    sc.tags.push(word);
                }
                (Section::Tags, "tags") => {
                    line.positional(0)?;
                    let raw = line.req("system")?;
                    let system_id = parse_system_id(&line, "system", raw)?;
                    let policy_number = PolicyNumber(line.opt_parse("policy")?.unwrap_or(0));
                    let service_address: VirtualNetworkAddress = line.req_parse("address")?;
                    let raw = line.req("serials")?;
                    let (lo, hi) = raw
                        .split_once("..")
                        .ok_or_else(|| line.err("serials look like <lo>..<hi>"))?;
                    let (lo, hi): (u32, u32) = (line.parse("serials", lo)?, line.parse("serials", hi)?);
                    if lo > hi {
                        return Err(line.err("empty serial range"));
                    }
                    sc.tags.extend((lo..=hi).map(|serial| {
                        TagId {
                            system_id,
                            policy_number,
                            service_address,
                            serial: ObjectSerial(serial),
                        }
                        .encode()
                    }));
                }
                (Section::Schedule, "read") => {
                    line.positional(0)?;
                    let at = line.at()?;
                    let reader = line.req("reader")?.to_string();
                    let raw = line.req("tag")?;
                    let tag = TagWord::parse_hex(raw).map_err(|e| line.err(e.to_string()))?;
                    let repeat: u32 = line.opt_parse("repeat")?.unwrap_or(1);
                    for _ in 0..repeat {
                        sc.reads.push(ReadSpec {
                            at,
                            reader: reader.clone(),
                            tag,
                        });
                    }
                }
                (Section::Schedule, "generate") => {
                    line.positional(0)?;
                    let readers = match line.req("readers")? {
                        "*" => Vec::new(),
                        raw => raw.split(',').map(str::to_string).collect(),
                    };
                    let start_minute = line.req_parse("start")?;
                    let duration_minutes = line.req_parse("duration")?;
                    let per_minute = line.req_parse("per_minute")?;
                    let system = match line.opt("system") {
                        Some(raw) => Some(parse_system_id(&line, "system", raw)?),
                        None => None,
                    };
                    sc.generators.push(GeneratorSpec {
                        readers,
                        start_minute,
                        duration_minutes,
                        per_minute,
                        system,
                        source: source_line.split('#').next().unwrap_or("").trim().to_string(),
                    });
                }
                (Section::Events, kind) => {
                    line.positional(0)?;
                    let at = line.at()?;
                    let propagate = |line: &mut Line<'_>| match line.opt("propagate") {
                        Some(raw) => parse_bool(line, "propagate", raw),
                        None => Ok(false),
                    };
                    let kind = match kind {
                        "migrate" => EventKind::Migrate {
                            address: line.req_parse("address")?,
                            from: line.req("from")?.to_string(),
                            to: line.req("to")?.to_string(),
                            propagate: propagate(&mut line)?,
                        },
                        "split" => {
                            let raw = line.req("partition")?;
                            EventKind::Split {
                                partition: parse_placement(&line, "partition", raw)?,
                                propagate: propagate(&mut line)?,
                            }
                        }
                        "maintenance" => EventKind::Maintenance {
                            address: line.req_parse("address")?,
                            host: line.req("host")?.to_string(),
                            scope: match line.opt("scope") {
                                None | Some("all") => None,
                                Some(raw) => Some(raw.split(',').map(str::to_string).collect()),
                            },
                        },
                        "burst" => EventKind::Burst {
                            node: line.req("node")?.to_string(),
                            count: line.req_parse("count")?,
                            priority_count: line.opt_parse("priority")?.unwrap_or(0),
                        },
                        other => return Err(line.err(format!("unknown event {other:?}"))),
                    };
                    sc.events.push(EventSpec { at, kind });
                }
                (_, keyword) => {
                    return Err(line.err(format!("unexpected {keyword:?} here")));
                }
            }
            line.finish()?;
        }
        if !header_seen {
            return Err(parse_err(
                1,
                format!("missing header `{FORMAT_HEADER} {FORMAT_VERSION}`"),
            ));
        }
        for (number, system, policy) in pending_policies {
            let spec = sc
                .systems
                .iter_mut()
                .find(|s| s.system_id == system)
                .ok_or_else(|| validation(format!("policy {}", policy.name), format!("unknown system {system}")))?;
            if policy.definition.policy_number.is_unconditional() {
                return Err(parse_err(number, "policy_number 0 is reserved"));
            }
            spec.policies.push(policy);
        }
        Ok(sc)
    }

    pub fn system(&self, id: SystemId) -> Option<&SystemSpec> {
        self.systems.iter().find(|s| s.system_id == id)
    }

    fn owner_of(&self, addr: VirtualNetworkAddress) -> Option<&SystemSpec> {
        self.systems
            .iter()
            .find(|s| s.addresses.iter().any(|(a, _)| *a == addr))
    }

    /// Checks every cross-reference.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut nodes = BTreeSet::new();
        for n in &self.nodes {
            if !nodes.insert(n.name.as_str()) {
                return Err(validation(format!("node {}", n.name), "declared twice"));
            }
        }
        let node = |reference: &str, name: &str| {
            if nodes.contains(name) {
                Ok(())
            } else {
                Err(validation(reference, format!("unknown node {name:?}")))
            }
        };
        for l in &self.links {
            let r = format!("link {} {}", l.a, l.b);
            node(&r, &l.a)?;
            node(&r, &l.b)?;
        }
        let mut readers = BTreeSet::new();
        for r in &self.readers {
            let reference = format!("reader {}", r.name);
            if !readers.insert(r.name.as_str()) {
                return Err(validation(reference, "declared twice"));
            }
            node(&reference, &r.node)?;
        }
        let mut ids = BTreeSet::new();
        let mut addresses = BTreeSet::new();
        for s in &self.systems {
            let reference = format!("system {}", s.system_id);
            if !s.system_id.is_assigned() {
                return Err(validation(reference, "system id 0 is reserved"));
            }
            if !ids.insert(s.system_id) {
                return Err(validation(reference, "declared twice"));
            }
            if s.threshold == 0 {
                return Err(validation(reference, "threshold must be positive"));
            }
            if s.areas.is_empty() {
                return Err(validation(reference, "no covered areas"));
            }
            for area in &s.areas {
                if !self.readers.iter().any(|r| r.area == *area) {
                    return Err(validation(reference, format!("area {area} has no physical reader")));
                }
            }
            node(&reference, &s.middleware)?;
            node(&reference, &s.ons)?;
            if s.addresses.is_empty() {
                return Err(validation(reference, "no addresses"));
            }
            for (a, host) in &s.addresses {
                node(&reference, host)?;
                if !addresses.insert(*a) {
                    return Err(validation(reference, format!("address {a} is already allocated")));
                }
            }
            for n in s.vpn.iter().flatten() {
                node(&reference, n)?;
            }
            let mut pns = BTreeSet::new();
            for p in &s.policies {
                if !pns.insert(p.definition.policy_number) {
                    return Err(validation(
                        format!("policy {}", p.name),
                        format!(
                            "policy number {} defined twice for system {}",
                            p.definition.policy_number, s.system_id
                        ),
                    ));
                }
            }
        }
        let mut serials = BTreeSet::new();
        for &word in &self.tags {
            let tag = codec::decode(word);
            let reference = format!("tag {word}");
            let Some(system) = self.system(tag.system_id) else {
                return Err(validation(reference, format!("unknown system {}", tag.system_id)));
            };
            if !system.addresses.iter().any(|(a, _)| *a == tag.service_address) {
                return Err(validation(
                    reference,
                    format!(
                        "address {} is not assigned to system {}",
                        tag.service_address, tag.system_id
                    ),
                ));
            }
            if !serials.insert((tag.system_id, tag.serial)) {
                return Err(validation(reference, "serial already used within its system"));
            }
        }
        let population: BTreeSet<TagWord> = self.tags.iter().copied().collect();
        for r in &self.reads {
            let reference = format!("read at={} reader={}", r.at.minute, r.reader);
            if !readers.contains(r.reader.as_str()) {
                return Err(validation(reference, format!("unknown reader {:?}", r.reader)));
            }
            if !population.contains(&r.tag) {
                return Err(validation(
                    reference,
                    format!("tag {} is not in the tag population", r.tag),
                ));
            }
        }
        for g in &self.generators {
            let reference = format!("generate {}", g.source);
            for r in &g.readers {
                if !readers.contains(r.as_str()) {
                    return Err(validation(&reference, format!("unknown reader {r:?}")));
                }
            }
            if let Some(s) = g.system {
                if self.system(s).is_none() {
                    return Err(validation(&reference, format!("unknown system {s}")));
                }
            }
            if self.generator_pool(g).is_empty() {
                return Err(validation(&reference, "no tags to draw from"));
            }
        }
        for e in &self.events {
            let reference = format!("event at={}", e.at.minute);
            let owned = |a: &VirtualNetworkAddress| {
                self.owner_of(*a)
                    .ok_or_else(|| validation(&reference, format!("address {a} is not assigned to any system")))
            };
            match &e.kind {
                EventKind::Migrate { address, from, to, .. } => {
                    owned(address)?;
                    node(&reference, from)?;
                    node(&reference, to)?;
                }
                EventKind::Split { partition, .. } => {
                    let mut owners = BTreeSet::new();
                    for (a, n) in partition {
                        owners.insert(owned(a)?.system_id);
                        node(&reference, n)?;
                    }
                    if owners.len() > 1 {
                        return Err(validation(reference, "split partition spans several systems"));
                    }
                }
                EventKind::Maintenance { address, host, scope } => {
                    owned(address)?;
                    node(&reference, host)?;
                    for n in scope.iter().flatten() {
                        node(&reference, n)?;
                    }
                }
                EventKind::Burst { node: n, .. } => node(&reference, n)?,
            }
        }
        Ok(())
    }

    pub fn generator_pool(&self, g: &GeneratorSpec) -> Vec<TagWord> {
        self.tags
            .iter()
            .copied()
            .filter(|&w| g.system.is_none_or(|s| codec::extract_system_id(w) == s))
            .collect()
    }

    pub fn effective_mode(&self, spec: &SystemSpec, mode_override: Option<Mode>) -> Mode {
        mode_override.unwrap_or(spec.mode)
    }

    /// Rejects direct-mode systems whose batches could mix addresses.
    pub fn check_mode(&self, mode_override: Option<Mode>) -> Result<(), ScenarioError> {
        for s in &self.systems {
            if self.effective_mode(s, mode_override) != Mode::Direct || s.threshold == 1 {
                continue;
            }
            let used: BTreeSet<_> = self
                .tags
                .iter()
                .filter(|&&w| codec::extract_system_id(w) == s.system_id)
                .map(|&w| codec::extract_service_address(w))
                .collect();
            if used.len() > 1 {
                return Err(validation(
                    format!("system {}", s.system_id),
                    "direct mode with threshold > 1 needs every tag to carry the same service address",
                ));
            }
        }
        Ok(())
    }

    /// Builds the substrate and the per-system descriptors (not yet created).
    pub fn build(&self, mode_override: Option<Mode>) -> Result<Built, ScenarioError> {
        self.check_mode(mode_override)?;
        let mut net = Network::new();
        for n in &self.nodes {
            net.add_node(&n.name, n.service_rate_per_ms);
        }
        let node_ids: BTreeMap<String, NodeId> = self
            .nodes
            .iter()
            .map(|n| (n.name.clone(), net.node_by_name(&n.name).expect("just added")))
            .collect();
        let nid = |name: &str| node_ids[name];
        for l in &self.links {
            net.add_link(nid(&l.a), nid(&l.b), l.latency_ms)
                .map_err(|e| validation("topology", e.to_string()))?;
        }

        let mut infra = Infrastructure::new(net);
        let mut reader_ids = BTreeMap::new();
        for r in &self.readers {
            let rid = infra
                .add_reader(&r.name, r.area, nid(&r.node))
                .map_err(|e| validation(format!("reader {}", r.name), e.to_string()))?;
            reader_ids.insert(r.name.clone(), rid);
        }

        let mut extra: BTreeMap<SystemId, BTreeSet<NodeId>> = BTreeMap::new();
        for e in &self.events {
            let targets: Vec<(VirtualNetworkAddress, &str)> = match &e.kind {
                EventKind::Migrate { address, to, .. } => vec![(*address, to.as_str())],
                EventKind::Split { partition, .. } => partition.iter().map(|(a, n)| (*a, n.as_str())).collect(),
                EventKind::Maintenance { address, host, .. } => vec![(*address, host.as_str())],
                EventKind::Burst { .. } => Vec::new(),
            };
            for (a, n) in targets {
                let owner = self.owner_of(a).expect("validated address");
                extra.entry(owner.system_id).or_default().insert(nid(n));
            }
        }

        let descriptors = self
            .systems
            .iter()
            .map(|s| ServiceSystemDescriptor {
                system_id: s.system_id,
                covered_areas: s.areas.clone(),
                policies: s.policies.iter().map(|p| p.definition.clone()).collect(),
                accumulation_threshold: s.threshold,
                addresses: s.addresses.iter().map(|(a, n)| (*a, nid(n))).collect(),
                mode: self.effective_mode(s, mode_override),
                middleware_node: nid(&s.middleware),
                ons_node: nid(&s.ons),
                ons_lookup_ms: s.ons_ms,
                per_event_processing_ms: s.process_ms,
                vpn_nodes: s.vpn.as_ref().map(|v| v.iter().map(|n| nid(n)).collect()),
                extra_nodes: extra.remove(&s.system_id).unwrap_or_default(),
            })
            .collect();

        Ok(Built {
            infra,
            descriptors,
            node_ids,
            reader_ids,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Built {
    pub infra: Infrastructure,
    pub descriptors: Vec<ServiceSystemDescriptor>,
    pub node_ids: BTreeMap<String, NodeId>,
    pub reader_ids: BTreeMap<String, ReaderId>,
}

impl Built {
    /// Provisions every system, reporting failures as validation errors.
    pub fn create_all(&mut self) -> Result<(), ScenarioError> {
        for d in &self.descriptors {
            self.infra
                .create_virtual_system(d)
                .map_err(|e: ElementError| validation(format!("system {}", d.system_id), e.to_string()))?;
        }
        Ok(())
    }
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Scenario::parse(&text)
}

/// Scenarios shipped with the crate.
pub mod bundled {
    use super::{Scenario, ScenarioError};

    pub const FIG8_DIRECT: &str = include_str!("../scenarios/fig8_direct.scn");
    pub const FIG10_MIGRATION: &str = include_str!("../scenarios/fig10_migration.scn");
    pub const FIG9_APPAREL_SPLIT: &str = include_str!("../scenarios/fig9_apparel_split.scn");
    pub const POLICY_AREA_TIME: &str = include_str!("../scenarios/policy_area_time.scn");
    pub const PRIORITY_BURST: &str = include_str!("../scenarios/priority_burst.scn");
    pub const ISOLATION_MIX: &str = include_str!("../scenarios/isolation_mix.scn");

    pub const ALL: [(&str, &str); 6] = [
        ("fig8_direct", FIG8_DIRECT),
        ("fig10_migration", FIG10_MIGRATION),
        ("fig9_apparel_split", FIG9_APPAREL_SPLIT),
        ("policy_area_time", POLICY_AREA_TIME),
        ("priority_burst", PRIORITY_BURST),
        ("isolation_mix", ISOLATION_MIX),
    ];

    pub fn get(name: &str) -> Option<Result<Scenario, ScenarioError>> {
        ALL.iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Scenario::parse(text))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
rfid-fabric-scenario 1
name minimal
[topology]
node mw
node center
link mw center 5
[readers]
reader gate area=1 node=mw
[systems]
system 1 areas=1 threshold=1 mode=direct middleware=mw ons=mw addresses=192.168.1.0@center
";

    fn expect_validation(text: &str, needle: &str) {
        match Scenario::parse(text) {
            Err(ScenarioError::ValidationError { reference, reason }) => {
                let all = format!("{reference}: {reason}");
                assert!(all.contains(needle), "{all:?} lacks {needle:?}");
            }
            other => panic!("expected validation error containing {needle:?}, got {other:?}"),
        }
    }

    #[test]
    fn minimal_file_parses() {
        let sc = Scenario::parse(MINIMAL).unwrap();
        assert_eq!(sc.name, "minimal");
        assert_eq!(sc.systems.len(), 1);
        assert_eq!(sc.nodes.len(), 2);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = Scenario::parse("rfid-fabric-scenario 1\n[topology]\nnode\n").unwrap_err();
        assert!(matches!(err, ScenarioError::ParseError { line: 3, .. }), "{err:?}");
        assert!(matches!(
            Scenario::parse("hello\n"),
            Err(ScenarioError::ParseError { line: 1, .. })
        ));
        assert!(matches!(
            Scenario::parse("rfid-fabric-scenario 2\n"),
            Err(ScenarioError::ParseError { line: 1, .. })
        ));
        let bad_key = format!("{MINIMAL}[tags]\ntags system=1 address=192.168.1.0 serials=1..2 colour=red\n");
        assert!(matches!(
            Scenario::parse(&bad_key),
            Err(ScenarioError::ParseError { line: 12, .. })
        ));
        let bad_tag = format!("{MINIMAL}[tags]\ntag xyz\n");
        assert!(matches!(
            Scenario::parse(&bad_tag),
            Err(ScenarioError::ParseError { line: 12, .. })
        ));
    }

    #[test]
    fn every_dangling_reference_is_reported() {
        expect_validation(
            &MINIMAL.replace("link mw center", "link mw nowhere"),
            "unknown node \"nowhere\"",
        );
        expect_validation(
            &MINIMAL.replace("reader gate area=1 node=mw", "reader gate area=1 node=ghost"),
            "reader gate",
        );
        expect_validation(&MINIMAL.replace("middleware=mw", "middleware=ghost"), "system 1");
        expect_validation(&MINIMAL.replace("ons=mw", "ons=ghost"), "system 1");
        expect_validation(&MINIMAL.replace("@center", "@ghost"), "system 1");
        expect_validation(
            &MINIMAL.replace("areas=1", "areas=1,2"),
            "area 2 has no physical reader",
        );
        expect_validation(
            &MINIMAL.replace("threshold=1", "threshold=1 vpn=mw,ghost"),
            "unknown node \"ghost\"",
        );
        expect_validation(
            &format!("{MINIMAL}policy p system=9 policy_number=1\n"),
            "unknown system 9",
        );
        expect_validation(
            &format!("{MINIMAL}[tags]\ntags system=2 address=192.168.1.0 serials=1..1\n"),
            "unknown system 2",
        );
        expect_validation(
            &format!("{MINIMAL}[tags]\ntags system=1 address=10.0.0.1 serials=1..1\n"),
            "not assigned to system 1",
        );
        expect_validation(
            &format!("{MINIMAL}[tags]\ntags system=1 address=192.168.1.0 serials=1..2\ntags system=1 address=192.168.1.0 serials=2..3\n"),
            "serial already used",
        );
        let with_tag = format!("{MINIMAL}[tags]\ntags system=1 address=192.168.1.0 serials=1..1\n");
        let word = TagId {
            system_id: SystemId::new(1).unwrap(),
            policy_number: PolicyNumber(0),
            service_address: "192.168.1.0".parse().unwrap(),
            serial: ObjectSerial(1),
        }
        .encode();
        expect_validation(
            &format!("{with_tag}[schedule]\nread at=1 reader=ghost tag={word}\n"),
            "unknown reader",
        );
        expect_validation(
            &format!("{with_tag}[schedule]\nread at=1 reader=gate tag={}\n", TagWord::ZERO),
            "not in the tag population",
        );
        expect_validation(
            &format!("{with_tag}[schedule]\ngenerate readers=ghost start=0 duration=1 per_minute=1\n"),
            "unknown reader",
        );
        expect_validation(
            &format!("{with_tag}[schedule]\ngenerate readers=* start=0 duration=1 per_minute=1 system=4\n"),
            "unknown system 4",
        );
        expect_validation(
            &format!("{MINIMAL}[schedule]\ngenerate readers=* start=0 duration=1 per_minute=1\n"),
            "no tags",
        );
        expect_validation(
            &format!("{MINIMAL}[events]\nmigrate at=1 address=10.0.0.1 from=center to=mw\n"),
            "not assigned to any system",
        );
        expect_validation(
            &format!("{MINIMAL}[events]\nmigrate at=1 address=192.168.1.0 from=center to=ghost\n"),
            "unknown node",
        );
        expect_validation(
            &format!("{MINIMAL}[events]\nmaintenance at=1 address=192.168.1.0 host=mw scope=ghost\n"),
            "unknown node",
        );
        expect_validation(
            &format!("{MINIMAL}[events]\nsplit at=1 partition=192.168.1.0@ghost\n"),
            "unknown node",
        );
        expect_validation(
            &format!("{MINIMAL}[events]\nburst at=1 node=ghost count=3\n"),
            "unknown node",
        );
        expect_validation(
            &format!(
                "{MINIMAL}system 1 areas=1 threshold=1 mode=direct middleware=mw ons=mw addresses=10.0.0.2@center\n"
            ),
            "declared twice",
        );
        expect_validation(
            &format!(
                "{MINIMAL}system 2 areas=1 threshold=1 mode=direct middleware=mw ons=mw addresses=192.168.1.0@center\n"
            ),
            "already allocated",
        );
    }

    #[test]
    fn mixed_addresses_need_unit_threshold_in_direct_mode() {
        let text = MINIMAL.replace("threshold=1", "threshold=2").replace(
            "addresses=192.168.1.0@center",
            "addresses=192.168.1.0@center,192.168.1.1@center",
        ) + "[tags]\ntags system=1 address=192.168.1.0 serials=1..1\ntags system=1 address=192.168.1.1 serials=2..2\n";
        let sc = Scenario::parse(&text).unwrap();
        assert!(sc.build(Some(Mode::TwoStep)).is_ok());
        assert!(matches!(
            sc.build(Some(Mode::Direct)),
            Err(ScenarioError::ValidationError { .. })
        ));
    }

    #[test]
    fn bundled_scenarios_all_parse() {
        for (name, text) in bundled::ALL {
            let sc = Scenario::parse(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(sc.name, name);
            let mut built = sc.build(None).unwrap();
            built.create_all().unwrap();
        }
    }

    #[test]
    fn event_and_read_times() {
        let sc = bundled::get("fig9_apparel_split").unwrap().unwrap();
        let split = sc
            .events
            .iter()
            .find(|e| matches!(e.kind, EventKind::Split { .. }))
            .unwrap();
        assert_eq!(split.at.as_ms(), 600_002.0);
    }
}
