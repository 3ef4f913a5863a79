//! Source NAT at the client edge: rewrites source (addr, port) of outbound
//! packets to the NAT's external address and an ephemeral port, and inverts
//! the mapping on the way back. Timestamps pass through untouched.

use std::collections::BTreeMap;

use crate::portplan::{Addr, PacketHeader, Port};

pub struct Nat {
    external_addr: Addr,
    range: (Port, Port),
    next: Port,
    /// (inner addr, inner port, remote addr, remote port) → external port.
    map: BTreeMap<(Addr, Port, Addr, Port), Port>,
    /// (external port, remote addr, remote port) → (inner addr, inner port).
    rmap: BTreeMap<(Port, Addr, Port), (Addr, Port)>,
    pub drops: u64,
}

impl Nat {
    pub fn new(external_addr: Addr, range: (Port, Port)) -> Self {
        Self { external_addr, range, next: range.0, map: BTreeMap::new(), rmap: BTreeMap::new(), drops: 0 }
    }

    pub fn external_addr(&self) -> Addr {
        self.external_addr
    }

    /// Rewrites an inside→outside packet. `None` means the table is full and
    /// the packet is dropped (counted).
    pub fn outbound(&mut self, hdr: &PacketHeader) -> Option<PacketHeader> {
        let key = (hdr.src_addr, hdr.src_port, hdr.dst_addr, hdr.dst_port);
        let ext = match self.map.get(&key) {
            Some(p) => *p,
            None => {
                let span = (self.range.1 - self.range.0) as usize + 1;
                let mut probe = self.next;
                let mut found = None;
                for _ in 0..span {
                    if !self.rmap.contains_key(&(probe, hdr.dst_addr, hdr.dst_port)) {
                        found = Some(probe);
                        break;
                    }
                    probe = if probe == self.range.1 { self.range.0 } else { probe + 1 };
                }
                let Some(p) = found else {
                    self.drops += 1;
                    return None;
                };
                self.next = if p == self.range.1 { self.range.0 } else { p + 1 };
                self.map.insert(key, p);
                self.rmap.insert((p, hdr.dst_addr, hdr.dst_port), (hdr.src_addr, hdr.src_port));
                p
            }
        };
        let mut out = hdr.clone();
        out.src_addr = self.external_addr;
        out.src_port = ext;
        Some(out)
    }

    /// Rewrites an outside→inside packet; `None` drops unmapped arrivals.
    pub fn inbound(&mut self, hdr: &PacketHeader) -> Option<PacketHeader> {
        match self.rmap.get(&(hdr.dst_port, hdr.src_addr, hdr.src_port)) {
            Some((addr, port)) => {
                let mut out = hdr.clone();
                out.dst_addr = *addr;
                out.dst_port = *port;
                Some(out)
            }
            None => {
                self.drops += 1;
                None
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sf::Direction;

    fn hdr(src_addr: u32, src_port: Port, dst_port: Port, dir: Direction) -> PacketHeader {
        PacketHeader {
            src_addr: Addr(src_addr),
            dst_addr: Addr(9000),
            src_port,
            dst_port,
            ts_val: 7,
            ts_ecr: 0,
            direction: dir,
        }
    }

    #[test]
    fn two_clients_same_port_get_distinct_external_ports() {
        let mut nat = Nat::new(Addr(2000), (40000, 40010));
        let a = nat.outbound(&hdr(1, 51000, 443, Direction::Up)).unwrap();
        let b = nat.outbound(&hdr(2, 51000, 443, Direction::Up)).unwrap();
        assert_eq!(a.src_addr, Addr(2000));
        assert_ne!(a.src_port, b.src_port);
        assert_eq!(a.ts_val, 7);

        // Downstream inverse.
        let reply = PacketHeader {
            src_addr: Addr(9000),
            dst_addr: Addr(2000),
            src_port: 443,
            dst_port: a.src_port,
            ts_val: 0,
            ts_ecr: 7,
            direction: Direction::Down,
        };
        let back = nat.inbound(&reply).unwrap();
        assert_eq!((back.dst_addr, back.dst_port), (Addr(1), 51000));
    }

    #[test]
    fn unmapped_reply_is_dropped() {
        let mut nat = Nat::new(Addr(2000), (40000, 40010));
        let reply = PacketHeader {
            src_addr: Addr(9000),
            dst_addr: Addr(2000),
            src_port: 443,
            dst_port: 40005,
            ts_val: 0,
            ts_ecr: 0,
            direction: Direction::Down,
        };
        assert!(nat.inbound(&reply).is_none());
        assert_eq!(nat.drops, 1);
    }

    #[test]
    fn table_full_drops() {
        let mut nat = Nat::new(Addr(2000), (40000, 40001));
        assert!(nat.outbound(&hdr(1, 1000, 443, Direction::Up)).is_some());
        assert!(nat.outbound(&hdr(1, 1001, 443, Direction::Up)).is_some());
        assert!(nat.outbound(&hdr(1, 1002, 443, Direction::Up)).is_none());
        // Same flow reuses its mapping.
        assert!(nat.outbound(&hdr(1, 1000, 443, Direction::Up)).is_some());
    }
}
