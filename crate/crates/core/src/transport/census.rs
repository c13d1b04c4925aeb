//! Per-message-type traffic counters.

use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub frames_sent: u64,
    pub bytes_sent: u64,
    pub frames_received: u64,
    pub bytes_received: u64,
}

/// Bytes are counted as they cross the channel, frame headers included.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Census {
    pub by_type: BTreeMap<u16, Counts>,
    /// Number of times the direction of traffic flipped from receiving to sending.
    pub rounds: u64,
}

impl Census {
    pub fn record_sent(&mut self, kind: u16, bytes: usize) {
        let c = self.by_type.entry(kind).or_default();
        c.frames_sent += 1;
        c.bytes_sent += bytes as u64;
    }

    pub fn record_received(&mut self, kind: u16, bytes: usize) {
        let c = self.by_type.entry(kind).or_default();
        c.frames_received += 1;
        c.bytes_received += bytes as u64;
    }

    pub fn bytes_sent(&self) -> u64 {
        self.by_type.values().map(|c| c.bytes_sent).sum()
    }

    pub fn bytes_received(&self) -> u64 {
        self.by_type.values().map(|c| c.bytes_received).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes_sent() + self.bytes_received()
    }

    /// Bytes sent plus received for message types in `range`.
    pub fn bytes_in(&self, range: std::ops::RangeInclusive<u16>) -> u64 {
        self.by_type
            .range(range)
            .map(|(_, c)| c.bytes_sent + c.bytes_received)
            .sum()
    }

    pub fn frames_sent_of(&self, kind: u16) -> u64 {
        self.by_type.get(&kind).map_or(0, |c| c.frames_sent)
    }

    pub fn frames_received_of(&self, kind: u16) -> u64 {
        self.by_type.get(&kind).map_or(0, |c| c.frames_received)
    }

    /// Difference `self - earlier`, for measuring a single phase.
    pub fn since(&self, earlier: &Census) -> Census {
        let mut out = Census {
            by_type: BTreeMap::new(),
            rounds: self.rounds - earlier.rounds,
        };
        for (&k, c) in &self.by_type {
            let e = earlier.by_type.get(&k).copied().unwrap_or_default();
            let d = Counts {
                frames_sent: c.frames_sent - e.frames_sent,
                bytes_sent: c.bytes_sent - e.bytes_sent,
                frames_received: c.frames_received - e.frames_received,
                bytes_received: c.bytes_received - e.bytes_received,
            };
            if d != Counts::default() {
                out.by_type.insert(k, d);
            }
        }
        out
    }

    pub fn merge(&mut self, other: &Census) {
        self.rounds += other.rounds;
        for (&k, c) in &other.by_type {
            let e = self.by_type.entry(k).or_default();
            e.frames_sent += c.frames_sent;
            e.bytes_sent += c.bytes_sent;
            e.frames_received += c.frames_received;
            e.bytes_received += c.bytes_received;
        }
    }
}
