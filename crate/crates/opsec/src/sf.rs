//! Security-function identities, the per-direction chain model, and the
//! in-repo pluggable functions an Opsec-box can host.

use std::fmt;
use std::sync::Arc;

use aho_corasick::AhoCorasick;
use sha2::{Digest, Sha256};

/// 32-octet digest uniquely identifying a security function in the public
/// directory. Equality is byte equality.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SfId(pub [u8; 32]);

impl SfId {
    /// Directory ids are derived from the function's registered name.
    pub fn from_name(name: &str) -> Self {
        let mut h = Sha256::new();
        h.update(b"opsec sf id");
        h.update(name.as_bytes());
        Self(h.finalize().into())
    }

    /// The hash announced in ServAnn: a re-digest of the id itself.
    pub fn announce_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"opsec sf announce");
        h.update(self.0);
        h.finalize().into()
    }
}

impl fmt::Debug for SfId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SfId({})", hex::encode(&self.0[..6]))
    }
}

/// Traffic direction a function (or chain, or box) applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn tag(self) -> u8 {
        match self {
            Direction::Up => 0,
            Direction::Down => 1,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Direction::Up),
            1 => Some(Direction::Down),
            _ => None,
        }
    }
}

/// Which directions of a path an entity sits on / serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coverage {
    Up,
    Down,
    Both,
}

impl Coverage {
    pub fn covers(self, d: Direction) -> bool {
        matches!(
            (self, d),
            (Coverage::Both, _) | (Coverage::Up, Direction::Up) | (Coverage::Down, Direction::Down)
        )
    }

    pub fn tag(self) -> u8 {
        match self {
            Coverage::Up => 0,
            Coverage::Down => 1,
            Coverage::Both => 2,
        }
    }

    pub fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(Coverage::Up),
            1 => Some(Coverage::Down),
            2 => Some(Coverage::Both),
            _ => None,
        }
    }
}

/// The two security function chains of one session.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SfcSpec {
    pub sfc_up: Vec<SfId>,
    pub sfc_down: Vec<SfId>,
}

impl SfcSpec {
    pub fn is_empty(&self) -> bool {
        self.sfc_up.is_empty() && self.sfc_down.is_empty()
    }

    pub fn chain(&self, d: Direction) -> &[SfId] {
        match d {
            Direction::Up => &self.sfc_up,
            Direction::Down => &self.sfc_down,
        }
    }
}

/// Outcome of one inspection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Alert(String),
    /// The box stops forwarding this flow after emitting the alert record.
    Terminate(String),
}

/// Flow context handed to an inspection alongside the payload.
#[derive(Debug, Clone, Copy)]
pub struct FlowContext {
    pub direction: Direction,
    pub packet_index: u64,
}

/// A standalone security function. Inspection observes the payload only; the
/// box, not the function, enforces the verdict.
#[derive(Clone)]
pub struct SecurityFunction {
    pub id: SfId,
    pub name: String,
    pub direction: Coverage,
    inspect: Arc<dyn Fn(&[u8], &FlowContext) -> Verdict + Send + Sync>,
}

impl fmt::Debug for SecurityFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecurityFunction")
            .field("id", &self.id)
            .field("name", &self.name)
            .field("direction", &self.direction)
            .finish()
    }
}

impl SecurityFunction {
    pub fn inspect(&self, payload: &[u8], ctx: &FlowContext) -> Verdict {
        (self.inspect)(payload, ctx)
    }
}

/// Per-signature verdict severity for the keyword IDS.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignatureAction {
    Alert,
    Terminate,
}

/// Keyword-match IDS: flags payloads containing any configured signature.
pub fn keyword_ids(name: &str, signatures: Vec<(String, SignatureAction)>) -> SecurityFunction {
    let patterns: Vec<String> = signatures.iter().map(|(p, _)| p.clone()).collect();
    let actions: Vec<SignatureAction> = signatures.iter().map(|(_, a)| *a).collect();
    let names = patterns.clone();
    let ac = AhoCorasick::new(&patterns).expect("signature set builds");
    SecurityFunction {
        id: SfId::from_name(name),
        name: name.to_string(),
        direction: Coverage::Both,
        inspect: Arc::new(move |payload, _ctx| {
            match ac.find(payload) {
                Some(m) => {
                    let i = m.pattern().as_usize();
                    let reason = format!("signature match: {}", names[i]);
                    match actions[i] {
                        SignatureAction::Alert => Verdict::Alert(reason),
                        SignatureAction::Terminate => Verdict::Terminate(reason),
                    }
                }
                None => Verdict::Pass,
            }
        }),
    }
}

/// URL blocklist: inspects request lines for blocked path substrings.
pub fn url_blocklist(name: &str, blocked: Vec<String>) -> SecurityFunction {
    SecurityFunction {
        id: SfId::from_name(name),
        name: name.to_string(),
        direction: Coverage::Up,
        inspect: Arc::new(move |payload, _ctx| {
            let text = String::from_utf8_lossy(payload);
            if !text.starts_with("GET ") {
                return Verdict::Pass;
            }
            for b in &blocked {
                if text.contains(b.as_str()) {
                    return Verdict::Terminate(format!("blocked url: {b}"));
                }
            }
            Verdict::Pass
        }),
    }
}

/// No-op byte counter, for load tests.
pub fn byte_counter(name: &str) -> SecurityFunction {
    SecurityFunction {
        id: SfId::from_name(name),
        name: name.to_string(),
        direction: Coverage::Both,
        inspect: Arc::new(|_payload, _ctx| Verdict::Pass),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sf_id_is_stable_and_name_bound() {
        assert_eq!(SfId::from_name("ids"), SfId::from_name("ids"));
        assert_ne!(SfId::from_name("ids"), SfId::from_name("ids2"));
        assert_ne!(SfId::from_name("ids").0, SfId::from_name("ids").announce_hash());
    }

    #[test]
    fn keyword_ids_matches_and_maps_actions() {
        let sf = keyword_ids(
            "kw",
            vec![
                ("malware-sig-01".into(), SignatureAction::Alert),
                ("killswitch".into(), SignatureAction::Terminate),
            ],
        );
        let ctx = FlowContext { direction: Direction::Up, packet_index: 0 };
        assert_eq!(sf.inspect(b"GET /clean HTTP/1.1", &ctx), Verdict::Pass);
        assert!(matches!(
            sf.inspect(b"payload malware-sig-01 here", &ctx),
            Verdict::Alert(_)
        ));
        assert!(matches!(sf.inspect(b"a killswitch b", &ctx), Verdict::Terminate(_)));
    }

    #[test]
    fn blocklist_only_considers_request_lines() {
        let sf = url_blocklist("bl", vec!["/forbidden".into()]);
        let ctx = FlowContext { direction: Direction::Up, packet_index: 0 };
        assert!(matches!(
            sf.inspect(b"GET /forbidden/x HTTP/1.1", &ctx),
            Verdict::Terminate(_)
        ));
        assert_eq!(sf.inspect(b"raw bytes /forbidden", &ctx), Verdict::Pass);
    }
}
