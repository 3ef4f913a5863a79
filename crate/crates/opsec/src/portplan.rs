//! The Opsec port set 𝒫, per-flow port identities, packet classification at
//! legacy edge routers, the upstream/downstream re-arrangement rules, and the
//! TCP-timestamp packing of (p*, p_c).
//!
//! Four ports govern one flow:
//!
//! * `p_c`  — client source port as seen on the wire after any NAT
//! * `p*`   — client-chosen Opsec destination port, a member of 𝒫
//! * `p#`   — rewritten source port assigned by the first Opsec ISP, in 𝒫
//! * `p_s`  — the server's true listening port, from the registry
//!
//! Upstream the first box rewrites (p_c, p*) to (p#, p_s); every later hop
//! sees src ∈ 𝒫 and leaves ports alone. Downstream every box restores
//! (p*, p_c), learning them from flow state or from the echoed timestamp.

use std::collections::{BTreeMap, BTreeSet};

use crate::sf::Direction;

pub type Port = u16;

/// Simulator endpoint address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct Addr(pub u32);

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum PortPlanError {
    /// Every member of 𝒫 is already in use for this (src, dst) address pair;
    /// the box must abstain from rewriting and pass the flow through.
    #[error("opsec port set exhausted for this address pair")]
    PortSetExhausted,

    /// Header ports do not match the flow's recorded identities.
    #[error("header inconsistent with flow state: {0}")]
    InconsistentState(String),

    /// No flow state and no decodable timestamp; forward unmodified.
    #[error("unknown flow")]
    UnknownFlow,

    /// Registry construction rejected a port assignment.
    #[error("invalid port registry: {0}")]
    InvalidRegistry(String),
}

/// Mapping from each Opsec port p ∈ 𝒫 to the bound listening port p_s.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PortRegistry {
    map: BTreeMap<Port, Port>,
}

impl PortRegistry {
    /// Builds the registry, checking 𝒫 stays clear of port 0, of the bound
    /// listening ports themselves, and of the given ephemeral source range.
    pub fn new(
        pairs: &[(Port, Port)],
        ephemeral_range: std::ops::RangeInclusive<Port>,
    ) -> Result<Self, PortPlanError> {
        let mut map = BTreeMap::new();
        for &(opsec, listen) in pairs {
            if opsec == 0 || listen == 0 {
                return Err(PortPlanError::InvalidRegistry("port 0 is not valid".into()));
            }
            if ephemeral_range.contains(&opsec) {
                return Err(PortPlanError::InvalidRegistry(format!(
                    "opsec port {opsec} lies in the ephemeral source range"
                )));
            }
            if map.insert(opsec, listen).is_some() {
                return Err(PortPlanError::InvalidRegistry(format!(
                    "opsec port {opsec} bound twice"
                )));
            }
        }
        let listens: BTreeSet<Port> = map.values().copied().collect();
        if map.keys().any(|p| listens.contains(p)) {
            return Err(PortPlanError::InvalidRegistry(
                "opsec ports overlap bound listening ports".into(),
            ));
        }
        Ok(Self { map })
    }

    /// Default set from the protocol's worked example: {7443, 8443} → 443 and
    /// an HTTP analogue {7080, 8080} → 80.
    pub fn default_registry() -> Self {
        Self::new(&[(7443, 443), (8443, 443), (7080, 80), (8080, 80)], 49152..=65535)
            .expect("default registry is valid")
    }

    pub fn contains(&self, p: Port) -> bool {
        self.map.contains_key(&p)
    }

    /// p* → p_s.
    pub fn listen_port(&self, opsec_port: Port) -> Option<Port> {
        self.map.get(&opsec_port).copied()
    }

    /// All members of 𝒫 bound to the given listening port, ascending.
    pub fn ports_for(&self, listen: Port) -> Vec<Port> {
        self.map.iter().filter(|(_, &l)| l == listen).map(|(&p, _)| p).collect()
    }

    /// 𝒫 in ascending order.
    pub fn opsec_ports(&self) -> impl Iterator<Item = Port> + '_ {
        self.map.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// The four port identities of one flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowPortState {
    pub p_c: Port,
    pub p_star: Port,
    pub p_hash: Option<Port>,
    pub p_s: Port,
}

/// Minimal TCP-ish header the simulator moves around.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketHeader {
    pub src_addr: Addr,
    pub dst_addr: Addr,
    pub src_port: Port,
    pub dst_port: Port,
    pub ts_val: u32,
    pub ts_ecr: u32,
    pub direction: Direction,
}

/// Edge-router classification: destination port match takes priority.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    OpsecByDst,
    OpsecBySrc,
    Legacy,
}

pub fn classify(hdr: &PacketHeader, reg: &PortRegistry) -> Classification {
    if reg.contains(hdr.dst_port) {
        Classification::OpsecByDst
    } else if reg.contains(hdr.src_port) {
        Classification::OpsecBySrc
    } else {
        Classification::Legacy
    }
}

/// Packs (p*, p_c) into a 32-bit timestamp value: p*·2^16 + p_c.
pub fn pack_ts(p_star: Port, p_c: Port) -> u32 {
    assert!(p_star >= 1 && p_c >= 1, "ports must be in 1..=65535");
    ((p_star as u32) << 16) | p_c as u32
}

/// Exact inverse of [`pack_ts`].
pub fn unpack_ts(value: u32) -> (Port, Port) {
    ((value >> 16) as Port, (value & 0xFFFF) as Port)
}

/// Interprets a timestamp as (p*, p_c) only when it is plausible: p* must be
/// a member of 𝒫 and p_c nonzero. Anything else is an ordinary timestamp.
pub fn decode_ts(value: u32, reg: &PortRegistry) -> Option<(Port, Port)> {
    let (p_star, p_c) = unpack_ts(value);
    (reg.contains(p_star) && p_c >= 1).then_some((p_star, p_c))
}

/// Allocator for p# values, unique among concurrently active flows that share
/// the same (source address, destination address) pair.
#[derive(Debug, Clone, Default)]
pub struct HashPortAllocator {
    in_use: BTreeSet<(Addr, Addr, Port)>,
}

impl HashPortAllocator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Picks the smallest free member of 𝒫 for this address pair.
    pub fn allocate(
        &mut self,
        src: Addr,
        dst: Addr,
        reg: &PortRegistry,
    ) -> Result<Port, PortPlanError> {
        for p in reg.opsec_ports() {
            if !self.in_use.contains(&(src, dst, p)) {
                self.in_use.insert((src, dst, p));
                return Ok(p);
            }
        }
        Err(PortPlanError::PortSetExhausted)
    }

    pub fn release(&mut self, src: Addr, dst: Addr, p: Port) {
        self.in_use.remove(&(src, dst, p));
    }

    pub fn in_use_count(&self) -> usize {
        self.in_use.len()
    }
}

/// Upstream re-arrangement at a box. At the first Opsec ISP the source port
/// becomes the pre-allocated p# and ts_val is overwritten with pack(p*, p_c)
/// so downstream-only ISPs can restore ports from the server's echo (the
/// client cannot know its post-NAT source port; the first box sees it).
/// At later ISPs the ports are already canonical and stay untouched.
pub fn rewrite_upstream(
    hdr: &PacketHeader,
    state: &FlowPortState,
    reg: &PortRegistry,
    is_first_opsec_isp: bool,
) -> Result<PacketHeader, PortPlanError> {
    let mut out = hdr.clone();
    if is_first_opsec_isp {
        if !reg.contains(hdr.dst_port) {
            return Err(PortPlanError::InconsistentState(format!(
                "dst port {} not in the opsec set",
                hdr.dst_port
            )));
        }
        if hdr.dst_port != state.p_star || hdr.src_port != state.p_c {
            return Err(PortPlanError::InconsistentState(format!(
                "header ({}, {}) does not match flow ({}, {})",
                hdr.src_port, hdr.dst_port, state.p_c, state.p_star
            )));
        }
        let p_hash = state
            .p_hash
            .ok_or_else(|| PortPlanError::InconsistentState("p# not allocated".into()))?;
        out.dst_port = state.p_s;
        out.src_port = p_hash;
        out.ts_val = pack_ts(state.p_star, state.p_c);
    } else {
        if hdr.dst_port != state.p_s || state.p_hash.map_or(true, |h| h != hdr.src_port) {
            return Err(PortPlanError::InconsistentState(format!(
                "expected canonical ports ({:?}, {}), saw ({}, {})",
                state.p_hash, state.p_s, hdr.src_port, hdr.dst_port
            )));
        }
        // Already canonical.
    }
    Ok(out)
}

/// Downstream restoration toward the client: src := p*, dst := p_c. Boxes
/// without flow state may derive both from the echoed timestamp.
pub fn rewrite_downstream(
    hdr: &PacketHeader,
    state: &FlowPortState,
) -> PacketHeader {
    let mut out = hdr.clone();
    out.src_port = state.p_star;
    out.dst_port = state.p_c;
    out
}

/// State-free downstream restoration for one-direction ISPs: everything they
/// need rides in ts_ecr.
pub fn rewrite_downstream_from_ts(
    hdr: &PacketHeader,
    reg: &PortRegistry,
) -> Result<PacketHeader, PortPlanError> {
    let (p_star, p_c) = decode_ts(hdr.ts_ecr, reg).ok_or(PortPlanError::UnknownFlow)?;
    let mut out = hdr.clone();
    out.src_port = p_star;
    out.dst_port = p_c;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hdr(src_port: Port, dst_port: Port, direction: Direction) -> PacketHeader {
        PacketHeader {
            src_addr: Addr(1),
            dst_addr: Addr(2),
            src_port,
            dst_port,
            ts_val: 0,
            ts_ecr: 0,
            direction,
        }
    }

    #[test]
    fn classification_priority() {
        let reg = PortRegistry::default_registry();
        assert_eq!(classify(&hdr(51000, 7443, Direction::Up), &reg), Classification::OpsecByDst);
        assert_eq!(classify(&hdr(8443, 443, Direction::Up), &reg), Classification::OpsecBySrc);
        assert_eq!(classify(&hdr(51000, 443, Direction::Up), &reg), Classification::Legacy);
    }

    #[test]
    fn registry_rejects_overlaps() {
        assert!(PortRegistry::new(&[(50000, 443)], 49152..=65535).is_err());
        assert!(PortRegistry::new(&[(7443, 443), (7443, 80)], 49152..=65535).is_err());
        assert!(PortRegistry::new(&[(443, 443)], 49152..=65535).is_err());
        assert!(PortRegistry::new(&[(0, 443)], 49152..=65535).is_err());
    }

    #[test]
    fn hash_port_allocation_is_unique_per_address_pair() {
        let reg = PortRegistry::new(&[(7443, 443), (8443, 443)], 49152..=65535).unwrap();
        let mut alloc = HashPortAllocator::new();
        // Two NATed clients share (src, dst) addresses and both chose 7443.
        let a = alloc.allocate(Addr(10), Addr(20), &reg).unwrap();
        let b = alloc.allocate(Addr(10), Addr(20), &reg).unwrap();
        assert_eq!((a, b), (7443, 8443));
        assert_eq!(
            alloc.allocate(Addr(10), Addr(20), &reg),
            Err(PortPlanError::PortSetExhausted)
        );
        // A different pair has the whole set available again.
        assert_eq!(alloc.allocate(Addr(10), Addr(21), &reg).unwrap(), 7443);
        alloc.release(Addr(10), Addr(20), 7443);
        assert_eq!(alloc.allocate(Addr(10), Addr(20), &reg).unwrap(), 7443);
    }

    #[test]
    fn upstream_rewrite_first_isp() {
        let reg = PortRegistry::default_registry();
        let state = FlowPortState { p_c: 51000, p_star: 7443, p_hash: Some(7443), p_s: 443 };
        let out = rewrite_upstream(&hdr(51000, 7443, Direction::Up), &state, &reg, true).unwrap();
        assert_eq!((out.src_port, out.dst_port), (7443, 443));
        assert_eq!(out.ts_val, pack_ts(7443, 51000));
    }

    #[test]
    fn upstream_second_isp_leaves_canonical_ports() {
        let reg = PortRegistry::default_registry();
        let state = FlowPortState { p_c: 51000, p_star: 7443, p_hash: Some(7443), p_s: 443 };
        let h = hdr(7443, 443, Direction::Up);
        let out = rewrite_upstream(&h, &state, &reg, false).unwrap();
        assert_eq!(out, h);
    }

    #[test]
    fn upstream_rejects_inconsistent_headers() {
        let reg = PortRegistry::default_registry();
        let state = FlowPortState { p_c: 51000, p_star: 7443, p_hash: Some(7443), p_s: 443 };
        assert!(matches!(
            rewrite_upstream(&hdr(51000, 9999, Direction::Up), &state, &reg, true),
            Err(PortPlanError::InconsistentState(_))
        ));
    }

    #[test]
    fn downstream_restores_ports() {
        let state = FlowPortState { p_c: 51000, p_star: 7443, p_hash: Some(7443), p_s: 443 };
        let out = rewrite_downstream(&hdr(443, 7443, Direction::Down), &state);
        assert_eq!((out.src_port, out.dst_port), (7443, 51000));
    }

    #[test]
    fn downstream_from_timestamp_only() {
        let reg = PortRegistry::default_registry();
        let mut h = hdr(443, 8443, Direction::Down);
        h.ts_ecr = pack_ts(7443, 51000);
        let out = rewrite_downstream_from_ts(&h, &reg).unwrap();
        assert_eq!((out.src_port, out.dst_port), (7443, 51000));

        let mut blank = hdr(443, 8443, Direction::Down);
        blank.ts_ecr = 0;
        assert_eq!(rewrite_downstream_from_ts(&blank, &reg), Err(PortPlanError::UnknownFlow));
    }

    #[test]
    fn pack_ts_reference_value() {
        // 7443 * 65536 + 51000
        assert_eq!(pack_ts(7443, 51000), 487_835_448);
    }

    #[test]
    #[should_panic(expected = "ports must be in 1..=65535")]
    fn pack_ts_rejects_port_zero() {
        pack_ts(0, 51000);
    }

    #[test]
    fn pack_unpack_bijection_corners_and_sample() {
        for &a in &[1u16, 2, 7443, 32767, 65535] {
            for &b in &[1u16, 80, 51000, 65535] {
                assert_eq!(unpack_ts(pack_ts(a, b)), (a, b));
            }
        }
        let mut x: u32 = 0x9E3779B9;
        for _ in 0..10_000 {
            x = x.wrapping_mul(747796405).wrapping_add(2891336453);
            let a = ((x >> 16) as u16).max(1);
            let b = ((x & 0xFFFF) as u16).max(1);
            assert_eq!(unpack_ts(pack_ts(a, b)), (a, b));
        }
    }

    #[test]
    fn decode_ts_requires_opsec_member() {
        let reg = PortRegistry::default_registry();
        assert_eq!(decode_ts(pack_ts(7443, 51000), &reg), Some((7443, 51000)));
        assert_eq!(decode_ts(pack_ts(9999, 51000), &reg), None);
        assert_eq!(decode_ts(0, &reg), None);
        assert_eq!(decode_ts((7443u32) << 16, &reg), None); // p_c == 0
    }
}
