//! Metrics reports and their JSON / CSV / text renderings.
//!
//! Schema `rfid-fabric-report/1`; field meanings are listed in
//! `docs/report-schema.md`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::codec::SystemId;
use crate::pipeline::Mode;

pub const REPORT_SCHEMA: &str = "rfid-fabric-report/1";
pub const COMPARISON_SCHEMA: &str = "rfid-fabric-comparison/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    Json,
    Csv,
    #[default]
    Text,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "text" => Ok(ReportFormat::Text),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

/// Summary of a latency sample (nearest-rank percentiles).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LatencyStats {
    pub count: u64,
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

impl LatencyStats {
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let rank = |p: f64| sorted[((p * n as f64).ceil() as usize).clamp(1, n) - 1];
        LatencyStats {
            count: n as u64,
            mean: sorted.iter().sum::<f64>() / n as f64,
            p50: rank(0.50),
            p95: rank(0.95),
            max: sorted[n - 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct PolicyDrops {
    pub unknown_policy: u64,
    pub area_condition: u64,
    pub time_condition: u64,
}

impl PolicyDrops {
    pub fn total(&self) -> u64 {
        self.unknown_policy + self.area_condition + self.time_condition
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct MessageCounts {
    pub reader_to_middleware: u64,
    pub middleware_to_ons: u64,
    pub ons_to_middleware: u64,
    pub middleware_to_center: u64,
    pub retransfers: u64,
}

impl MessageCounts {
    pub fn total(&self) -> u64 {
        self.reader_to_middleware
            + self.middleware_to_ons
            + self.ons_to_middleware
            + self.middleware_to_center
            + self.retransfers
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SystemMetrics {
    pub system_id: SystemId,
    /// `None` for tags whose system was never provisioned.
    pub mode: Option<Mode>,
    pub reads_total: u64,
    pub drops_no_virtual_reader: u64,
    pub drops_policy: PolicyDrops,
    pub forwarded: u64,
    /// Events delivered in full-threshold batches.
    pub delivered_events: u64,
    /// Events delivered in the end-of-run partial batches.
    pub flushed_events: u64,
    pub batches_sent: u64,
    pub partial_batches: u64,
    pub ons_queries: u64,
    pub batch_latency_ms: LatencyStats,
    pub end_to_end_latency_ms: LatencyStats,
    pub redirected_deliveries: u64,
    pub messages: MessageCounts,
    pub center_processing_ms: f64,
    pub priority_inversions: u64,
    pub encryption_schemes: BTreeMap<u8, u64>,
}

impl SystemMetrics {
    pub fn new(system_id: SystemId, mode: Option<Mode>) -> Self {
        SystemMetrics {
            system_id,
            mode,
            reads_total: 0,
            drops_no_virtual_reader: 0,
            drops_policy: PolicyDrops::default(),
            forwarded: 0,
            delivered_events: 0,
            flushed_events: 0,
            batches_sent: 0,
            partial_batches: 0,
            ons_queries: 0,
            batch_latency_ms: LatencyStats::default(),
            end_to_end_latency_ms: LatencyStats::default(),
            redirected_deliveries: 0,
            messages: MessageCounts::default(),
            center_processing_ms: 0.0,
            priority_inversions: 0,
            encryption_schemes: BTreeMap::new(),
        }
    }

    /// `reads_total = no-virtual-reader + policy drops + flushed + delivered`.
    pub fn conserves_reads(&self) -> bool {
        self.reads_total
            == self.drops_no_virtual_reader + self.drops_policy.total() + self.flushed_events + self.delivered_events
    }

    pub fn center_received(&self) -> u64 {
        self.delivered_events + self.flushed_events
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct NetworkMetrics {
    pub queued_packets: u64,
    pub background_packets: u64,
    pub priority_inversions: u64,
    pub max_queueing_ms: f64,
    pub vpn_violations: u64,
    pub redirect_entries: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub schema: &'static str,
    pub scenario: String,
    /// `declared`, `direct` or `two-step`.
    pub mode: String,
    pub seed: u64,
    pub generators: Vec<String>,
    pub systems: Vec<SystemMetrics>,
    pub network: NetworkMetrics,
}

impl MetricsReport {
    pub fn system(&self, id: SystemId) -> Option<&SystemMetrics> {
        self.systems.iter().find(|s| s.system_id == id)
    }

    /// Sums every counter across systems. Latency stats are left empty.
    pub fn totals(&self) -> SystemMetrics {
        let mut t = SystemMetrics::new(SystemId::UNASSIGNED, None);
        for s in &self.systems {
            t.reads_total += s.reads_total;
            t.drops_no_virtual_reader += s.drops_no_virtual_reader;
            t.drops_policy.unknown_policy += s.drops_policy.unknown_policy;
            t.drops_policy.area_condition += s.drops_policy.area_condition;
            t.drops_policy.time_condition += s.drops_policy.time_condition;
            t.forwarded += s.forwarded;
            t.delivered_events += s.delivered_events;
            t.flushed_events += s.flushed_events;
            t.batches_sent += s.batches_sent;
            t.partial_batches += s.partial_batches;
            t.ons_queries += s.ons_queries;
            t.redirected_deliveries += s.redirected_deliveries;
            t.messages.reader_to_middleware += s.messages.reader_to_middleware;
            t.messages.middleware_to_ons += s.messages.middleware_to_ons;
            t.messages.ons_to_middleware += s.messages.ons_to_middleware;
            t.messages.middleware_to_center += s.messages.middleware_to_center;
            t.messages.retransfers += s.messages.retransfers;
            t.center_processing_ms += s.center_processing_ms;
            t.priority_inversions += s.priority_inversions;
            for (k, v) in &s.encryption_schemes {
                *t.encryption_schemes.entry(*k).or_default() += v;
            }
        }
        t
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => to_json(self),
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Text => self.to_text(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["scenario", "mode", "seed"];
        header.extend(CSV_COLUMNS.iter().map(|(name, _)| *name));
        w.write_record(&header).expect("in-memory csv");
        let totals = self.totals();
        for (label, s) in self
            .systems
            .iter()
            .map(|s| (s.system_id.to_string(), s))
            .chain(std::iter::once(("total".to_string(), &totals)))
        {
            let mut row = vec![self.scenario.clone(), self.mode.clone(), self.seed.to_string()];
            for (name, get) in CSV_COLUMNS {
                row.push(if *name == "system" { label.clone() } else { get(s) });
            }
            w.write_record(&row).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "scenario {}  mode {}  seed {}",
            self.scenario, self.mode, self.seed
        );
        for g in &self.generators {
            let _ = writeln!(out, "generator: {g}");
        }
        let totals = self.totals();
        let mut columns: Vec<(String, &SystemMetrics)> = self
            .systems
            .iter()
            .map(|s| (format!("system {}", s.system_id), s))
            .collect();
        columns.push(("total".to_string(), &totals));
        let rows: Vec<(&str, Vec<String>)> = CSV_COLUMNS
            .iter()
            .filter(|(name, _)| *name != "system")
            .map(|(name, get)| (*name, columns.iter().map(|(_, s)| get(s)).collect()))
            .collect();
        let label_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0);
        let col_w: Vec<usize> = columns
            .iter()
            .enumerate()
            .map(|(i, (h, _))| rows.iter().map(|(_, v)| v[i].len()).chain([h.len()]).max().unwrap_or(0))
            .collect();
        let _ = write!(out, "{:label_w$}", "");
        for ((h, _), w) in columns.iter().zip(&col_w) {
            let _ = write!(out, "  {h:>w$}");
        }
        out.push('\n');
        for (name, values) in &rows {
            let _ = write!(out, "{name:label_w$}");
            for (v, w) in values.iter().zip(&col_w) {
                let _ = write!(out, "  {v:>w$}");
            }
            out.push('\n');
        }
        let n = &self.network;
        let _ = writeln!(
            out,
            "network: queued {}  background {}  max_queueing_ms {}  priority_inversions {}  vpn_violations {}  redirect_entries {}",
            n.queued_packets,
            n.background_packets,
            fmt_ms(n.max_queueing_ms),
            n.priority_inversions,
            n.vpn_violations,
            n.redirect_entries
        );
        out
    }
}

type Column = (&'static str, fn(&SystemMetrics) -> String);

fn fmt_ms(v: f64) -> String {
    format!("{v:.3}")
}

fn fmt_stat(l: &LatencyStats, v: f64) -> String {
    if l.count == 0 {
        "-".to_string()
    } else {
        fmt_ms(v)
    }
}

const CSV_COLUMNS: &[Column] = &[
    ("system", |s| s.system_id.to_string()),
    ("system_mode", |s| {
        s.mode.map(|m| m.to_string()).unwrap_or_else(|| "-".into())
    }),
    ("reads_total", |s| s.reads_total.to_string()),
    ("drops_no_virtual_reader", |s| s.drops_no_virtual_reader.to_string()),
    ("drops_unknown_policy", |s| s.drops_policy.unknown_policy.to_string()),
    ("drops_area_condition", |s| s.drops_policy.area_condition.to_string()),
    ("drops_time_condition", |s| s.drops_policy.time_condition.to_string()),
    ("forwarded", |s| s.forwarded.to_string()),
    ("delivered_events", |s| s.delivered_events.to_string()),
    ("flushed_events", |s| s.flushed_events.to_string()),
    ("batches_sent", |s| s.batches_sent.to_string()),
    ("partial_batches", |s| s.partial_batches.to_string()),
    ("ons_queries", |s| s.ons_queries.to_string()),
    ("batch_latency_mean_ms", |s| {
        fmt_stat(&s.batch_latency_ms, s.batch_latency_ms.mean)
    }),
    ("batch_latency_p50_ms", |s| {
        fmt_stat(&s.batch_latency_ms, s.batch_latency_ms.p50)
    }),
    ("batch_latency_p95_ms", |s| {
        fmt_stat(&s.batch_latency_ms, s.batch_latency_ms.p95)
    }),
    ("batch_latency_max_ms", |s| {
        fmt_stat(&s.batch_latency_ms, s.batch_latency_ms.max)
    }),
    ("e2e_latency_mean_ms", |s| {
        fmt_stat(&s.end_to_end_latency_ms, s.end_to_end_latency_ms.mean)
    }),
    ("e2e_latency_p95_ms", |s| {
        fmt_stat(&s.end_to_end_latency_ms, s.end_to_end_latency_ms.p95)
    }),
    ("e2e_latency_max_ms", |s| {
        fmt_stat(&s.end_to_end_latency_ms, s.end_to_end_latency_ms.max)
    }),
    ("redirected_deliveries", |s| s.redirected_deliveries.to_string()),
    ("msg_reader_to_middleware", |s| {
        s.messages.reader_to_middleware.to_string()
    }),
    ("msg_middleware_to_ons", |s| s.messages.middleware_to_ons.to_string()),
    ("msg_ons_to_middleware", |s| s.messages.ons_to_middleware.to_string()),
    ("msg_middleware_to_center", |s| {
        s.messages.middleware_to_center.to_string()
    }),
    ("msg_retransfers", |s| s.messages.retransfers.to_string()),
    ("center_processing_ms", |s| fmt_ms(s.center_processing_ms)),
    ("priority_inversions", |s| s.priority_inversions.to_string()),
];

/// Per-system differences between the two modes of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeDelta {
    pub system_id: SystemId,
    pub mean_batch_latency_two_step_ms: f64,
    pub mean_batch_latency_direct_ms: f64,
    pub mean_batch_latency_saving_ms: f64,
    pub ons_queries_saved: u64,
    pub messages_saved: i64,
    pub identical_center_events: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub schema: &'static str,
    pub scenario: String,
    pub seed: u64,
    pub two_step: MetricsReport,
    pub direct: MetricsReport,
    pub deltas: Vec<ModeDelta>,
}

impl ComparisonReport {
    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => to_json(self),
            ReportFormat::Csv => {
                let two = self.two_step.to_csv();
                let direct = self.direct.to_csv();
                // share one header
                let body = direct.split_once('\n').map(|(_, rest)| rest).unwrap_or("");
                format!("{two}{body}")
            }
            ReportFormat::Text => {
                let mut out = String::new();
                out.push_str("== two-step ==\n");
                out.push_str(&self.two_step.to_text());
                out.push_str("\n== direct ==\n");
                out.push_str(&self.direct.to_text());
                out.push_str("\n== deltas (two-step minus direct) ==\n");
                let _ = writeln!(
                    out,
                    "{:>6}  {:>14}  {:>14}  {:>12}  {:>11}  {:>13}  {:>16}",
                    "system", "two_step_ms", "direct_ms", "saving_ms", "ons_saved", "msgs_saved", "same_deliveries"
                );
                for d in &self.deltas {
                    let _ = writeln!(
                        out,
                        "{:>6}  {:>14}  {:>14}  {:>12}  {:>11}  {:>13}  {:>16}",
                        d.system_id.to_string(),
                        fmt_ms(d.mean_batch_latency_two_step_ms),
                        fmt_ms(d.mean_batch_latency_direct_ms),
                        fmt_ms(d.mean_batch_latency_saving_ms),
                        d.ons_queries_saved,
                        d.messages_saved,
                        d.identical_center_events
                    );
                }
                out
            }
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}
