//! Measured output of one simulation plus the rolling event log.
//!
//! RTT-equivalents are computed from link delays, never wall clock. The log
//! keeps a rolling digest always (for determinism checks) and full lines only
//! when verbose.

use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Ready,
    Aborted,
    Terminated,
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionMetrics {
    pub id: u64,
    pub outcome: Outcome,
    /// Pre-data overhead in RTT-equivalents ((t_ready - t_start) / path RTT).
    pub handshake_rtt: f64,
    /// TCP connects performed during the handshake.
    pub connects: u32,
    /// Protocol rounds completed during the handshake.
    pub rounds: u32,
    /// The session fell back via timeout (no response).
    pub fallback: bool,
    pub assignments: u32,
    pub alerts: u64,
    pub spoofed_alerts: u64,
    pub bytes_sent: u64,
    pub bytes_delivered: u64,
    pub bytes_dropped: u64,
    /// Per-packet added box delay samples, nanoseconds.
    pub box_delays_ns: Vec<u64>,
}

impl SessionMetrics {
    pub fn mean_added_delay_ns(&self) -> f64 {
        if self.box_delays_ns.is_empty() {
            return 0.0;
        }
        self.box_delays_ns.iter().sum::<u64>() as f64 / self.box_delays_ns.len() as f64
    }

    /// The analytic handshake identity: overhead equals 1.5 RTT per connect
    /// plus 1 RTT per protocol round, for sessions that did not time out.
    pub fn handshake_identity_holds(&self) -> bool {
        if self.fallback {
            return true;
        }
        let expected = 1.5 * self.connects as f64 + self.rounds as f64;
        (self.handshake_rtt - expected).abs() < 1e-9
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IspMetrics {
    pub isp_id: u32,
    pub instances: usize,
    pub per_instance_flows: Vec<u32>,
    /// (time ns, instance count) growth samples.
    pub growth: Vec<(u64, usize)>,
    pub passthrough: u64,
    pub drops: u64,
    pub grant_open_fail: u64,
    pub seal_open_fail: u64,
    pub alerts_emitted: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LegacyMetrics {
    pub flows: u32,
    pub completed: u32,
    /// End-to-end mutations observed on legacy flows (must stay 0).
    pub violations: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct GlobalMetrics {
    pub events: u64,
    pub sim_end_ms: f64,
    pub origin_refused: u64,
    pub nat_drops: u64,
    /// Rolling digest of the full event stream.
    pub event_digest: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub sessions: Vec<SessionMetrics>,
    pub isps: Vec<IspMetrics>,
    pub legacy: LegacyMetrics,
    pub global: GlobalMetrics,
}

impl Metrics {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metrics serialize")
    }

    pub fn outcome_counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for s in &self.sessions {
            match s.outcome {
                Outcome::Ready => c.0 += 1,
                Outcome::Aborted => c.1 += 1,
                Outcome::Terminated => c.2 += 1,
            }
        }
        c
    }
}

/// Event stream recorder: always digests, optionally retains lines.
pub struct EventLog {
    hasher: Sha256,
    lines: Option<Vec<String>>,
    pub count: u64,
}

impl EventLog {
    pub fn new(verbose: bool) -> Self {
        Self { hasher: Sha256::new(), lines: verbose.then(Vec::new), count: 0 }
    }

    pub fn record(&mut self, t_ns: u64, seq: u64, line: &str) {
        self.count += 1;
        self.hasher.update(t_ns.to_be_bytes());
        self.hasher.update(seq.to_be_bytes());
        self.hasher.update(line.as_bytes());
        self.hasher.update([b'\n']);
        if let Some(lines) = &mut self.lines {
            lines.push(format!("t={:.3}ms seq={} {}", t_ns as f64 / 1e6, seq, line));
        }
    }

    pub fn digest(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    pub fn lines(&self) -> Option<&[String]> {
        self.lines.as_deref()
    }
}
