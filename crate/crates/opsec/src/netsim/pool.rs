//! Per-ISP Opsec-box instance pool: threshold-based scaling, deterministic
//! flow-to-instance assignment, and a FIFO service queue per instance.
//!
//! Instances are added when the average number of flows per instance would
//! exceed the threshold θ (count = max(1, ceil(active/θ))); new flows go to
//! the least-loaded instance with ties to the lowest id, and existing flows
//! never migrate. Pools never shrink: removing instances would force flow
//! migration, which is forbidden.
//!
//! Every instance of one ISP shares the same box identity and attestation
//! quote (they are replicas of one logical service); each holds its own flow
//! table and per-flow key material. The p# allocation table is ISP-wide so
//! source-port uniqueness holds across instances.

use crate::keys::SealedRecord;
use crate::obox::{BoxConfig, FlowKey, Forwarded, OpsecBox};
use crate::pkt::{Packet, PacketPayload};
use crate::portplan::{HashPortAllocator, PortRegistry};
use crate::sf::Direction;
use crate::wire;

pub struct BoxPool {
    theta: Option<u32>,
    make_instance: Box<dyn Fn(usize) -> OpsecBox>,
    instances: Vec<OpsecBox>,
    instance_flows: Vec<u32>,
    flow_to_instance: std::collections::BTreeMap<FlowKey, usize>,
    busy_until: Vec<u64>,
    service_cost_ns: u64,
    alloc: HashPortAllocator,
    /// (time, instance count) samples taken at each growth step.
    pub growth: Vec<(u64, usize)>,
}

/// What the pool did with one packet.
pub struct PoolOutcome {
    pub result: Forwarded,
    /// Queueing + service delay added at the instance.
    pub added_delay_ns: u64,
    /// Alerts to synthesize into a client-bound packet (terminate verdicts).
    pub orphan_alerts: Vec<(u32, SealedRecord)>,
    pub instance: usize,
    /// Canonical flow identity, when classifiable.
    pub flow_key: Option<FlowKey>,
}

impl BoxPool {
    pub fn new(
        theta: Option<u32>,
        service_cost_ns: u64,
        make_instance: Box<dyn Fn(usize) -> OpsecBox>,
    ) -> Self {
        let first = make_instance(0);
        Self {
            theta,
            make_instance,
            instances: vec![first],
            instance_flows: vec![0],
            flow_to_instance: std::collections::BTreeMap::new(),
            busy_until: vec![0],
            service_cost_ns,
            alloc: HashPortAllocator::new(),
            growth: vec![(0, 1)],
        }
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    pub fn active_flows(&self) -> u32 {
        self.flow_to_instance.len() as u32
    }

    pub fn per_instance_flows(&self) -> &[u32] {
        &self.instance_flows
    }

    pub fn instances(&self) -> &[OpsecBox] {
        &self.instances
    }

    fn grow_to_demand(&mut self, now: u64) {
        let Some(theta) = self.theta else { return };
        let active = self.flow_to_instance.len() as u32;
        let needed = active.div_ceil(theta).max(1) as usize;
        while self.instances.len() < needed {
            let idx = self.instances.len();
            self.instances.push((self.make_instance)(idx));
            self.instance_flows.push(0);
            self.busy_until.push(0);
            self.growth.push((now, self.instances.len()));
        }
    }

    fn instance_for(&mut self, key: FlowKey, now: u64) -> usize {
        if let Some(i) = self.flow_to_instance.get(&key) {
            return *i;
        }
        self.flow_to_instance.insert(key, 0);
        self.grow_to_demand(now);
        // Least-loaded, ties to the lowest instance id.
        let (idx, _) = self
            .instance_flows
            .iter()
            .enumerate()
            .min_by_key(|(i, n)| (**n, *i))
            .expect("at least one instance");
        self.flow_to_instance.insert(key, idx);
        self.instance_flows[idx] += 1;
        idx
    }

    /// A packet counts as data when it carries application records rather
    /// than handshake traffic; only data packets pay the service cost (the
    /// handshake's computational overhead is negligible next to propagation).
    fn is_data(pkt: &Packet) -> bool {
        match &pkt.payload {
            PacketPayload::Sealed(_) | PacketPayload::Plain(_) => true,
            PacketPayload::HttpGet { path } => wire::extract_from_path(path).is_empty(),
            PacketPayload::HttpResponse(r) => {
                wire::extract_from_path(&r.reflected_text()).is_empty()
            }
            _ => false,
        }
    }

    /// Runs one Opsec-classified packet through the owning instance.
    pub fn process(
        &mut self,
        pkt: Packet,
        dir: Direction,
        reg: &PortRegistry,
        now: u64,
    ) -> PoolOutcome {
        let key = OpsecBox::flow_key_of(&pkt.hdr, reg, dir);
        let Some(key) = key else {
            // Unclassifiable at the box layer: pure wire.
            return PoolOutcome {
                result: Forwarded::Forward(pkt),
                added_delay_ns: 0,
                orphan_alerts: Vec::new(),
                instance: 0,
                flow_key: None,
            };
        };
        let idx = self.instance_for(key, now);
        let added_delay_ns = if Self::is_data(&pkt) && self.service_cost_ns > 0 {
            let start = self.busy_until[idx].max(now);
            let done = start + self.service_cost_ns;
            self.busy_until[idx] = done;
            done - now
        } else {
            0
        };
        let inst = &mut self.instances[idx];
        let result = match dir {
            Direction::Up => inst.process_up(pkt, reg, &mut self.alloc),
            Direction::Down => inst.process_down(pkt, reg),
        };
        let orphan_alerts = match &result {
            Forwarded::Drop(_) => inst.drain_alerts_down(&key),
            Forwarded::Forward(_) => Vec::new(),
        };
        PoolOutcome { result, added_delay_ns, orphan_alerts, instance: idx, flow_key: Some(key) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::AttestationAuthority;
    use crate::portplan::{Addr, PacketHeader, PortRegistry};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn pool(theta: Option<u32>) -> BoxPool {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut authority = AttestationAuthority::new(&mut rng);
        authority.register(1, [7; 32]);
        let authority = std::sync::Arc::new(authority);
        BoxPool::new(
            theta,
            0,
            Box::new(move |idx| {
                let cfg = BoxConfig {
                    box_id: 1,
                    coverage: crate::sf::Coverage::Both,
                    willing: true,
                    catalog: vec![],
                    path_budget: 4096,
                };
                let mut seed = [0u8; 32];
                seed[0] = idx as u8;
                OpsecBox::new(cfg, [7; 32], &authority, seed).unwrap()
            }),
        )
    }

    fn syn(src_port: u16, ts_val: u32) -> Packet {
        Packet::new(
            PacketHeader {
                src_addr: Addr(1),
                dst_addr: Addr(9),
                src_port,
                dst_port: 7443,
                ts_val,
                ts_ecr: 0,
                direction: Direction::Up,
            },
            PacketPayload::TcpSyn,
            0,
        )
    }

    #[test]
    fn theta_scaling_matches_ceiling() {
        let reg = PortRegistry::default_registry();
        let mut p = pool(Some(30));
        for i in 0..90u16 {
            let port = 50000 + i;
            let pkt = syn(port, crate::portplan::pack_ts(7443, port));
            let _ = p.process(pkt, Direction::Up, &reg, 0);
        }
        assert_eq!(p.active_flows(), 90);
        assert_eq!(p.instance_count(), 3);
        // One flow stays one instance.
        let mut single = pool(Some(30));
        let pkt = syn(50000, crate::portplan::pack_ts(7443, 50000));
        let _ = single.process(pkt, Direction::Up, &reg, 0);
        assert_eq!(single.instance_count(), 1);
    }

    #[test]
    fn static_pool_never_grows() {
        let reg = PortRegistry::default_registry();
        let mut p = pool(None);
        for i in 0..200u16 {
            let port = 50000 + i;
            let pkt = syn(port, crate::portplan::pack_ts(7443, port));
            let _ = p.process(pkt, Direction::Up, &reg, 0);
        }
        assert_eq!(p.instance_count(), 1);
    }

    #[test]
    fn flows_balance_and_never_migrate() {
        let reg = PortRegistry::default_registry();
        let mut p = pool(Some(2));
        for i in 0..6u16 {
            let port = 50000 + i;
            let pkt = syn(port, crate::portplan::pack_ts(7443, port));
            let _ = p.process(pkt, Direction::Up, &reg, 0);
        }
        assert_eq!(p.instance_count(), 3);
        assert_eq!(p.per_instance_flows(), &[2, 2, 2]);
        // Existing flow keeps its instance on later packets.
        let before = p.flow_to_instance.clone();
        for i in 0..6u16 {
            let port = 50000 + i;
            let pkt = syn(port, crate::portplan::pack_ts(7443, port));
            let _ = p.process(pkt, Direction::Up, &reg, 1000);
        }
        assert_eq!(before, p.flow_to_instance);
    }

    #[test]
    fn fifo_queue_accumulates_delay() {
        let reg = PortRegistry::default_registry();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut authority = AttestationAuthority::new(&mut rng);
        authority.register(1, [7; 32]);
        let authority = std::sync::Arc::new(authority);
        let mut p = BoxPool::new(
            None,
            1000,
            Box::new(move |_| {
                OpsecBox::new(
                    BoxConfig {
                        box_id: 1,
                        coverage: crate::sf::Coverage::Both,
                        willing: true,
                        catalog: vec![],
                        path_budget: 4096,
                    },
                    [7; 32],
                    &authority,
                    [9; 32],
                )
                .unwrap()
            }),
        );
        // Data packets (no envelope) arriving simultaneously queue up.
        for k in 0..3 {
            let mut pkt = syn(51000, crate::portplan::pack_ts(7443, 51000));
            pkt.payload = PacketPayload::Plain(vec![k]);
            let out = p.process(pkt, Direction::Up, &reg, 0);
            assert_eq!(out.added_delay_ns, (k as u64 + 1) * 1000);
        }
        // Handshake packets are free.
        let out = p.process(syn(51000, crate::portplan::pack_ts(7443, 51000)), Direction::Up, &reg, 0);
        assert_eq!(out.added_delay_ns, 0);
    }
}
