//! Two-class strict-priority queue and the per-node service model built on it.

use std::collections::VecDeque;

/// FIFO within each class; the normal class is only served when the
/// priority class is empty.
#[derive(Debug, Clone)]
pub struct CongestionQueue<T> {
    priority: VecDeque<T>,
    normal: VecDeque<T>,
    inversions: u64,
}

impl<T> Default for CongestionQueue<T> {
    fn default() -> Self {
        CongestionQueue {
            priority: VecDeque::new(),
            normal: VecDeque::new(),
            inversions: 0,
        }
    }
}

impl<T> CongestionQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn enqueue(&mut self, item: T, priority: bool) {
        if priority {
            self.priority.push_back(item);
        } else {
            self.normal.push_back(item);
        }
    }

    /// Returns the next item and whether it came from the priority class.
    pub fn dequeue(&mut self) -> Option<(T, bool)> {
        if let Some(item) = self.priority.pop_front() {
            return Some((item, true));
        }
        let item = self.normal.pop_front()?;
        if !self.priority.is_empty() {
            self.inversions += 1;
        }
        Some((item, false))
    }

    pub fn len(&self) -> usize {
        self.priority.len() + self.normal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priority.is_empty() && self.normal.is_empty()
    }

    pub fn priority_len(&self) -> usize {
        self.priority.len()
    }

    /// Count of normal-class dequeues made while priority items waited.
    pub fn priority_inversions(&self) -> u64 {
        self.inversions
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Served<T> {
    pub item: T,
    pub priority: bool,
    pub packets_ahead: usize,
    pub queueing_ms: f64,
}

/// A node's egress queue with a fixed service rate.
///
/// Everything enqueued at one instant is drained together; the k-th packet
/// out waits `(backlog + k) / rate`, where backlog is work left over from
/// earlier instants. A node without a rate serves instantly.
#[derive(Debug, Clone)]
pub struct ServiceQueue<T> {
    queue: CongestionQueue<T>,
    rate_per_ms: Option<f64>,
    busy_until_ms: f64,
}

impl<T> ServiceQueue<T> {
    pub fn new(rate_per_ms: Option<f64>) -> Self {
        ServiceQueue {
            queue: CongestionQueue::new(),
            rate_per_ms,
            busy_until_ms: 0.0,
        }
    }

    pub fn enqueue(&mut self, item: T, priority: bool) {
        self.queue.enqueue(item, priority);
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn priority_inversions(&self) -> u64 {
        self.queue.priority_inversions()
    }

    pub fn drain(&mut self, now_ms: f64) -> Vec<Served<T>> {
        let mut out = Vec::with_capacity(self.queue.len());
        let Some(rate) = self.rate_per_ms else {
            while let Some((item, priority)) = self.queue.dequeue() {
                let packets_ahead = out.len();
                out.push(Served {
                    item,
                    priority,
                    packets_ahead,
                    queueing_ms: 0.0,
                });
            }
            return out;
        };
        let backlog_ms = (self.busy_until_ms - now_ms).max(0.0);
        let backlog_packets = (backlog_ms * rate).round() as usize;
        while let Some((item, priority)) = self.queue.dequeue() {
            let k = out.len();
            out.push(Served {
                item,
                priority,
                packets_ahead: backlog_packets + k,
                queueing_ms: backlog_ms + k as f64 / rate,
            });
        }
        self.busy_until_ms = now_ms + backlog_ms + out.len() as f64 / rate;
        out
    }
}
