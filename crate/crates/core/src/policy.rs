//! Conditional processing: resolving a tag's policy number against the
//! owning system's policy table and the read context.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::PolicyNumber;

pub const MINUTES_PER_DAY: u16 = 1440;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("policy number 0 is reserved for unconditional forwarding")]
    ReservedPolicyNumber,
    #[error("minute {0} is outside [0, 1440)")]
    MinuteOutOfRange(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AreaId(pub u16);

impl fmt::Display for AreaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Half-open window `[start, end)` in minutes since midnight.
///
/// `start > end` wraps across midnight; `start == end` covers the whole day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    start_min: u16,
    end_min: u16,
}

impl TimeWindow {
    pub const FULL_DAY: TimeWindow = TimeWindow {
        start_min: 0,
        end_min: 0,
    };

    pub fn new(start_min: u16, end_min: u16) -> Result<Self, PolicyError> {
        for m in [start_min, end_min] {
            if m >= MINUTES_PER_DAY {
                return Err(PolicyError::MinuteOutOfRange(m.into()));
            }
        }
        Ok(TimeWindow { start_min, end_min })
    }

    pub fn start_min(self) -> u16 {
        self.start_min
    }

    pub fn end_min(self) -> u16 {
        self.end_min
    }

    pub fn contains(self, minute: u16) -> bool {
        in_window(self, minute)
    }
}

pub fn in_window(w: TimeWindow, t: u16) -> bool {
    use std::cmp::Ordering::*;
    match w.start_min.cmp(&w.end_min) {
        Less => w.start_min <= t && t < w.end_min,
        Greater => t >= w.start_min || t < w.end_min,
        Equal => true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AreaSense {
    /// Forward only reads taken inside the listed areas.
    Inside,
    /// Forward only reads taken outside the listed areas.
    Outside,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AreaCondition {
    pub areas: BTreeSet<AreaId>,
    pub sense: AreaSense,
}

impl AreaCondition {
    pub fn admits(&self, area: AreaId) -> bool {
        let listed = self.areas.contains(&area);
        match self.sense {
            AreaSense::Inside => listed,
            AreaSense::Outside => !listed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDefinition {
    pub policy_number: PolicyNumber,
    pub area_condition: Option<AreaCondition>,
    pub time_condition: Option<TimeWindow>,
    pub priority: bool,
    /// Scheme label only; 0 = none.
    pub encryption_scheme: u8,
}

impl PolicyDefinition {
    pub fn unconditional(policy_number: PolicyNumber) -> Self {
        PolicyDefinition {
            policy_number,
            area_condition: None,
            time_condition: None,
            priority: false,
            encryption_scheme: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReadContext {
    pub reader_area: AreaId,
    read_time_min: u16,
    pub day_index: u32,
}

impl ReadContext {
    pub fn new(reader_area: AreaId, read_time_min: u16, day_index: u32) -> Result<Self, PolicyError> {
        if read_time_min >= MINUTES_PER_DAY {
            return Err(PolicyError::MinuteOutOfRange(read_time_min.into()));
        }
        Ok(ReadContext {
            reader_area,
            read_time_min,
            day_index,
        })
    }

    pub fn read_time_min(&self) -> u16 {
        self.read_time_min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    UnknownPolicy,
    AreaCondition,
    TimeCondition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "outcome")]
pub enum PolicyVerdict {
    Forward { priority: bool, encryption_scheme: u8 },
    Discard { reason: DiscardReason },
}

impl PolicyVerdict {
    pub const UNCONDITIONAL: PolicyVerdict = PolicyVerdict::Forward {
        priority: false,
        encryption_scheme: 0,
    };

    pub fn is_forward(&self) -> bool {
        matches!(self, PolicyVerdict::Forward { .. })
    }

    pub fn priority(&self) -> bool {
        matches!(self, PolicyVerdict::Forward { priority: true, .. })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyTable {
    entries: BTreeMap<PolicyNumber, PolicyDefinition>,
}

impl PolicyTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces the definition for `def.policy_number`.
    pub fn register(&mut self, def: PolicyDefinition) -> Result<(), PolicyError> {
        if def.policy_number.is_unconditional() {
            return Err(PolicyError::ReservedPolicyNumber);
        }
        self.entries.insert(def.policy_number, def);
        Ok(())
    }

    pub fn revoke(&mut self, pn: PolicyNumber) -> Option<PolicyDefinition> {
        self.entries.remove(&pn)
    }

    pub fn get(&self, pn: PolicyNumber) -> Option<&PolicyDefinition> {
        self.entries.get(&pn)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PolicyDefinition> {
        self.entries.values()
    }

    pub fn evaluate(&self, pn: PolicyNumber, ctx: &ReadContext) -> PolicyVerdict {
        evaluate(self, pn, ctx)
    }
}

/// Checks run in a fixed order (lookup, area, time) so the discard reason
/// is always the first failing condition.
pub fn evaluate(table: &PolicyTable, pn: PolicyNumber, ctx: &ReadContext) -> PolicyVerdict {
    if pn.is_unconditional() {
        return PolicyVerdict::UNCONDITIONAL;
    }
    let Some(def) = table.get(pn) else {
        return PolicyVerdict::Discard {
            reason: DiscardReason::UnknownPolicy,
        };
    };
    if let Some(cond) = &def.area_condition {
        if !cond.admits(ctx.reader_area) {
            return PolicyVerdict::Discard {
                reason: DiscardReason::AreaCondition,
            };
        }
    }
    if let Some(window) = def.time_condition {
        if !in_window(window, ctx.read_time_min) {
            return PolicyVerdict::Discard {
                reason: DiscardReason::TimeCondition,
            };
        }
    }
    PolicyVerdict::Forward {
        priority: def.priority,
        encryption_scheme: def.encryption_scheme,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Walks minute by minute from `start` until reaching `end`.
    fn window_oracle(start: u16, end: u16) -> [bool; 1440] {
        let mut member = [false; 1440];
        if start == end {
            return [true; 1440];
        }
        let mut m = start;
        while m != end {
            member[m as usize] = true;
            m = (m + 1) % 1440;
        }
        member
    }

    fn ctx(area: u16, minute: u16) -> ReadContext {
        ReadContext::new(AreaId(area), minute, 0).unwrap()
    }

    fn table_with(def: PolicyDefinition) -> PolicyTable {
        let mut t = PolicyTable::new();
        t.register(def).unwrap();
        t
    }

    #[test]
    fn unconditional_policy_always_forwards() {
        let t = PolicyTable::new();
        for m in [0, 720, 1439] {
            assert_eq!(evaluate(&t, PolicyNumber(0), &ctx(9, m)), PolicyVerdict::UNCONDITIONAL);
        }
    }

    #[test]
    fn outside_area_policy() {
        let t = table_with(PolicyDefinition {
            area_condition: Some(AreaCondition {
                areas: [AreaId(7)].into(),
                sense: AreaSense::Outside,
            }),
            ..PolicyDefinition::unconditional(PolicyNumber(1))
        });
        assert_eq!(
            t.evaluate(PolicyNumber(1), &ctx(7, 0)),
            PolicyVerdict::Discard {
                reason: DiscardReason::AreaCondition
            }
        );
        assert!(t.evaluate(PolicyNumber(1), &ctx(3, 0)).is_forward());
    }

    #[test]
    fn daytime_and_wraparound_windows() {
        let day = table_with(PolicyDefinition {
            time_condition: Some(TimeWindow::new(540, 1020).unwrap()),
            ..PolicyDefinition::unconditional(PolicyNumber(2))
        });
        assert!(day.evaluate(PolicyNumber(2), &ctx(1, 720)).is_forward());
        assert_eq!(
            day.evaluate(PolicyNumber(2), &ctx(1, 1200)),
            PolicyVerdict::Discard {
                reason: DiscardReason::TimeCondition
            }
        );

        let night = table_with(PolicyDefinition {
            time_condition: Some(TimeWindow::new(1380, 120).unwrap()),
            ..PolicyDefinition::unconditional(PolicyNumber(3))
        });
        assert!(night.evaluate(PolicyNumber(3), &ctx(1, 30)).is_forward());
        assert!(!night.evaluate(PolicyNumber(3), &ctx(1, 600)).is_forward());
        let oracle = window_oracle(1380, 120);
        assert!(oracle[30] && !oracle[600]);
    }

    #[test]
    fn window_boundaries() {
        assert!(in_window(TimeWindow::FULL_DAY, 999));
        let w = TimeWindow::new(540, 1020).unwrap();
        assert!(in_window(w, 540));
        assert!(!in_window(w, 1020));
        assert!(TimeWindow::new(1440, 0).is_err());
        assert!(ReadContext::new(AreaId(0), 1440, 0).is_err());
    }

    #[test]
    fn area_is_checked_before_time() {
        let t = table_with(PolicyDefinition {
            area_condition: Some(AreaCondition {
                areas: [AreaId(1)].into(),
                sense: AreaSense::Inside,
            }),
            time_condition: Some(TimeWindow::new(0, 10).unwrap()),
            ..PolicyDefinition::unconditional(PolicyNumber(4))
        });
        assert_eq!(
            t.evaluate(PolicyNumber(4), &ctx(2, 500)),
            PolicyVerdict::Discard {
                reason: DiscardReason::AreaCondition
            }
        );
    }

    #[test]
    fn register_replace_and_revoke() {
        let mut t = PolicyTable::new();
        assert_eq!(
            t.register(PolicyDefinition::unconditional(PolicyNumber(0))),
            Err(PolicyError::ReservedPolicyNumber)
        );
        t.register(PolicyDefinition {
            time_condition: Some(TimeWindow::new(0, 1).unwrap()),
            ..PolicyDefinition::unconditional(PolicyNumber(5))
        })
        .unwrap();
        assert!(!t.evaluate(PolicyNumber(5), &ctx(0, 100)).is_forward());
        t.register(PolicyDefinition::unconditional(PolicyNumber(5))).unwrap();
        assert_eq!(t.len(), 1);
        assert!(t.evaluate(PolicyNumber(5), &ctx(0, 100)).is_forward());
        t.revoke(PolicyNumber(5));
        assert_eq!(
            t.evaluate(PolicyNumber(5), &ctx(0, 100)),
            PolicyVerdict::Discard {
                reason: DiscardReason::UnknownPolicy
            }
        );
    }

    fn arb_policy() -> impl Strategy<Value = PolicyDefinition> {
        (
            1u8..,
            proptest::option::of((proptest::collection::btree_set(0u16..8, 0..4), any::<bool>())),
            proptest::option::of((0u16..1440, 0u16..1440)),
            any::<bool>(),
            any::<u8>(),
        )
            .prop_map(|(pn, area, time, priority, scheme)| PolicyDefinition {
                policy_number: PolicyNumber(pn),
                area_condition: area.map(|(set, inside)| AreaCondition {
                    areas: set.into_iter().map(AreaId).collect(),
                    sense: if inside { AreaSense::Inside } else { AreaSense::Outside },
                }),
                time_condition: time.map(|(s, e)| TimeWindow::new(s, e).unwrap()),
                priority,
                encryption_scheme: scheme,
            })
    }

    proptest! {
        #[test]
        fn in_window_matches_exhaustive_oracle(start in 0u16..1440, end in 0u16..1440) {
            let w = TimeWindow::new(start, end).unwrap();
            let oracle = window_oracle(start, end);
            for t in 0..1440u16 {
                prop_assert_eq!(in_window(w, t), oracle[t as usize], "t={}", t);
            }
        }

        #[test]
        fn removing_a_condition_never_blocks(def in arb_policy(), area in 0u16..8, minute in 0u16..1440, drop_area in any::<bool>()) {
            let c = ReadContext::new(AreaId(area), minute, 0).unwrap();
            let before = table_with(def.clone()).evaluate(def.policy_number, &c);
            let mut relaxed = def.clone();
            if drop_area { relaxed.area_condition = None } else { relaxed.time_condition = None }
            let after = table_with(relaxed).evaluate(def.policy_number, &c);
            if before.is_forward() {
                prop_assert!(after.is_forward());
            }
        }

        #[test]
        fn forward_carries_priority_and_scheme(def in arb_policy(), area in 0u16..8, minute in 0u16..1440) {
            let c = ReadContext::new(AreaId(area), minute, 0).unwrap();
            let verdict = table_with(def.clone()).evaluate(def.policy_number, &c);
            if let PolicyVerdict::Forward { priority, encryption_scheme } = verdict {
                prop_assert_eq!(priority, def.priority);
                prop_assert_eq!(encryption_scheme, def.encryption_scheme);
            }
            // deterministic
            prop_assert_eq!(verdict, table_with(def.clone()).evaluate(def.policy_number, &c));
        }

        #[test]
        fn full_day_window_is_transparent(def in arb_policy(), area in 0u16..8) {
            let mut with_full = def.clone();
            with_full.time_condition = Some(TimeWindow::FULL_DAY);
            let mut without = def.clone();
            without.time_condition = None;
            for minute in 0..1440u16 {
                let c = ReadContext::new(AreaId(area), minute, 0).unwrap();
                prop_assert_eq!(
                    table_with(with_full.clone()).evaluate(def.policy_number, &c),
                    table_with(without.clone()).evaluate(def.policy_number, &c)
                );
            }
        }
    }
}
