//! Seeded discrete-event simulator wiring clients, an optional NAT, per-ISP
//! edge routers with Opsec-box instance pools, and an origin along a
//! configurable path; accounts RTTs symbolically from link delays; hosts the
//! adversarial ISP controllers.
//!
//! Determinism: events execute in (time, sequence) order from a binary heap;
//! every random draw comes from a ChaCha stream derived from the scenario
//! seed; identical configs and seeds give byte-identical event digests.
//!
//! TCP model: a connection costs three serialized legs (SYN, SYN-ACK, ACK)
//! and the first request departs when the final ACK lands, charging the full
//! 1.5 RTT before round 1. Handshake packets pay no box service cost; the
//! queue model applies to application data.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

use crate::client::{ClientSession, ClientStep, SessionPolicy, SessionState, Target};
use crate::keys::{AttestationAuthority, AttestationQuote, KeyPair, PublicPart};
use crate::netsim::metrics::{
    EventLog, GlobalMetrics, IspMetrics, LegacyMetrics, Metrics, Outcome, SessionMetrics,
};
use crate::netsim::nat::Nat;
use crate::netsim::pool::BoxPool;
use crate::netsim::scenario::{AdversaryKind, ConfigInvalid, ReflectionConfig, ScenarioConfig};
use crate::obox::{BoxConfig, OpsecBox};
use crate::origin::{handle_get, ReflectionMode, ServerProfile};
use crate::pkt::{Packet, PacketPayload};
use crate::portplan::{classify, Addr, Classification, PacketHeader, Port, PortRegistry};
use crate::sf::{Coverage, Direction, SfcSpec, SfId};
use crate::wire::{self, splice_messages, MessageType};

const LEGACY_TAG_BASE: u64 = 1 << 32;

fn derived_seed(master: u64, label: &str, idx: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_be_bytes());
    h.update(label.as_bytes());
    h.update(idx.to_be_bytes());
    h.finalize().into()
}

fn ms_to_ns(ms: f64) -> u64 {
    (ms * 1e6).round() as u64
}

#[derive(Debug)]
enum Ev {
    SessionStart(usize),
    LegacyStart(usize),
    Arrive { at: usize, dir: Direction, pkt: Packet },
    /// The final TCP ACK landed at the origin: the client's queued requests
    /// for this flow depart now.
    Dispatch { tag: u64 },
    AppSend { sid: usize, k: u32 },
    Timeout { sid: usize, epoch: u32 },
}

struct Scheduled {
    t: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.t, self.seq) == (other.t, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.t, self.seq).cmp(&(other.t, other.seq))
    }
}

enum Pending {
    Get(String),
    Data { payload: PacketPayload, len: u32 },
}

struct SessionRt {
    session: ClientSession,
    t_start: u64,
    t_ready: Option<u64>,
    connects: u32,
    conn_open: bool,
    connecting: bool,
    pending: Vec<Pending>,
    epoch: u32,
    data_sent: u32,
    data_responses: u32,
    bytes_sent: u64,
    bytes_to_origin: u64,
    bytes_dropped: u64,
    bytes_delivered: u64,
    box_delays: Vec<u64>,
    fallback: bool,
}

struct LegacyRt {
    client_addr: Addr,
    src_port: Port,
    dst_port: Port,
    ts_val: u32,
    /// Client-egress snapshots for end-to-end identity checks.
    sent: Vec<(PacketHeader, PacketPayload)>,
    completed: bool,
    violations: u32,
}

struct IspRt {
    id: u32,
    willing: bool,
    coverage: Coverage,
    adversary: AdversaryKind,
    pool: Option<BoxPool>,
    adversary_drops: u64,
    tampered: u64,
}

struct OriginRt {
    profile: ServerProfile,
    /// TLS-like stand-in: per-flow content streams registered at connect.
    content: BTreeMap<u64, (crate::keys::SendStream, crate::keys::RecvStream)>,
    clock: u32,
    refused: u64,
    received_by_flow: BTreeMap<u64, u64>,
}

/// Wire observations the invariant harnesses assert over.
#[derive(Debug, Default)]
pub struct Taps {
    /// (flow, src addr, src port, dst port) for packets the origin accepted.
    pub origin_delivered: Vec<(u64, Addr, Port, Port)>,
    /// (flow, src port, dst port) for packets delivered to a client session.
    pub client_delivered: Vec<(u64, Port, Port)>,
    /// (flow, hop, src port, dst port) at ISP ingress, upstream non-TCP
    /// packets of Opsec-classified flows.
    pub isp_upstream: Vec<(u64, usize, Port, Port)>,
    /// flow → hop index of the ISP that performed the first rewrite.
    pub first_opsec_hop: BTreeMap<u64, usize>,
    /// (flow, hop, dir, payload-was-plaintext) for application data at ISP
    /// ingress (inter-box sealing assertions).
    pub data_plaintext: Vec<(u64, usize, Direction, bool)>,
}

pub struct Simulation {
    cfg: ScenarioConfig,
    n_sessions: u32,
    registry: PortRegistry,
    authority_public: PublicPart,
    isps: Vec<IspRt>,
    nat: Option<Nat>,
    origin: OriginRt,
    sessions: Vec<SessionRt>,
    session_index: BTreeMap<(Addr, Port), usize>,
    legacy: Vec<LegacyRt>,
    legacy_index: BTreeMap<(Addr, Port), usize>,
    heap: BinaryHeap<Reverse<Scheduled>>,
    seq: u64,
    now: u64,
    log: EventLog,
    link_delays_ns: Vec<u64>,
    rtt_ns: u64,
    timeout_ns: u64,
    nat_drops_extra: u64,
    pub taps: Taps,
}

impl Simulation {
    /// Deterministic build; identical configs and seeds yield identical
    /// event-log digests. `session_count` picks one entry of a sweep.
    pub fn build(cfg: &ScenarioConfig, session_count: u32, verbose_log: bool) -> Result<Self, ConfigInvalid> {
        cfg.validate()?;
        let registry = cfg.registry();
        let directory = cfg.directory();
        let master = cfg.seed ^ u64::from(session_count).wrapping_mul(0x9E3779B97F4A7C15);

        let mut authority_rng = ChaCha12Rng::from_seed(derived_seed(master, "authority", 0));
        let mut authority = AttestationAuthority::new(&mut authority_rng);
        let code_hash: [u8; 32] = derived_seed(master, "boilerplate", 0);
        for isp in &cfg.path.isps {
            authority.register(isp.id, code_hash);
        }
        let authority = Arc::new(authority);
        let authority_public = authority.public_part().clone();

        let service_cost_ns = ms_to_ns(cfg.queue.service_cost_ms);
        let mut isps = Vec::with_capacity(cfg.path.isps.len());
        for isp in &cfg.path.isps {
            let pool = if isp.willing {
                let catalog: Vec<_> =
                    isp.catalog.iter().map(|n| directory[n].clone()).collect();
                let base_cfg = BoxConfig {
                    box_id: isp.id,
                    coverage: isp.coverage,
                    willing: true,
                    catalog,
                    path_budget: cfg.client.path_budget,
                };
                let quote = if isp.adversary == AdversaryKind::FakeQuote {
                    // Self-made quote: signed by the ISP's own key, not the
                    // attestation authority.
                    let mut rng =
                        ChaCha12Rng::from_seed(derived_seed(master, "fake-quote", isp.id as u64));
                    let own = KeyPair::generate(&mut rng);
                    let mut msg = b"opsec attestation quote".to_vec();
                    msg.extend_from_slice(&isp.id.to_be_bytes());
                    msg.extend_from_slice(&code_hash);
                    AttestationQuote {
                        box_identity: isp.id,
                        code_hash,
                        authority_signature: own.sign(&msg),
                    }
                } else {
                    authority.issue_quote(isp.id, code_hash).expect("registered")
                };
                let isp_id = isp.id;
                Some(BoxPool::new(
                    isp.theta,
                    service_cost_ns,
                    Box::new(move |instance| {
                        OpsecBox::with_quote(
                            base_cfg.clone(),
                            quote.clone(),
                            derived_seed(master, "box", (u64::from(isp_id) << 16) | instance as u64),
                        )
                    }),
                ))
            } else {
                None
            };
            isps.push(IspRt {
                id: isp.id,
                willing: isp.willing,
                coverage: isp.coverage,
                adversary: isp.adversary,
                pool,
                adversary_drops: 0,
                tampered: 0,
            });
        }

        let reflection_mode = match &cfg.origin.reflection {
            ReflectionConfig::Mode(m) => *m,
            ReflectionConfig::Mix { mix } => {
                let mut rng = ChaCha12Rng::from_seed(derived_seed(master, "origin-mix", 0));
                mix.sample(&mut rng).expect("validated mix")
            }
        };
        let mut profile = ServerProfile::new(reflection_mode);
        profile.close_after_response = cfg.origin.close_after_response;
        profile.tls_like = cfg.origin.tls_like;
        profile.listen_port = cfg.origin.listen_port;
        profile.host = cfg.origin.host.clone();

        let nat = cfg.path.nat.then(|| {
            let (lo, hi) = cfg.ports.ephemeral_range;
            Nat::new(Addr(200), (lo, hi))
        });

        let link_delays_ns: Vec<u64> = cfg.path.link_delays_ms.iter().map(|d| ms_to_ns(*d)).collect();
        let rtt_ns = 2 * link_delays_ns.iter().sum::<u64>();

        let mut sim = Self {
            cfg: cfg.clone(),
            n_sessions: session_count,
            registry,
            authority_public,
            isps,
            nat,
            origin: OriginRt {
                profile,
                content: BTreeMap::new(),
                clock: 1,
                refused: 0,
                received_by_flow: BTreeMap::new(),
            },
            sessions: Vec::new(),
            session_index: BTreeMap::new(),
            legacy: Vec::new(),
            legacy_index: BTreeMap::new(),
            heap: BinaryHeap::new(),
            seq: 0,
            now: 0,
            log: EventLog::new(verbose_log),
            link_delays_ns,
            rtt_ns,
            timeout_ns: ms_to_ns(cfg.client.response_timeout_ms),
            nat_drops_extra: 0,
            taps: Taps::default(),
        };

        for sid in 0..session_count as usize {
            sim.schedule(ms_to_ns(0.1) * sid as u64, Ev::SessionStart(sid));
        }
        for fid in 0..cfg.traffic.legacy_flows as usize {
            sim.schedule(ms_to_ns(0.05) + ms_to_ns(0.1) * fid as u64, Ev::LegacyStart(fid));
        }
        Ok(sim)
    }

    fn schedule(&mut self, t: u64, ev: Ev) {
        let seq = self.seq;
        self.seq += 1;
        self.heap.push(Reverse(Scheduled { t, seq, ev }));
    }

    fn log_ev(&mut self, line: &str) {
        let (t, seq) = (self.now, self.seq);
        self.log.record(t, seq, line);
    }

    fn hop_count(&self) -> usize {
        self.isps.len()
    }

    /// Sends a packet from hop `from` toward hop `to` (adjacent).
    fn send_leg(&mut self, from: usize, dir: Direction, pkt: Packet, extra_delay: u64) {
        let (to, link) = match dir {
            Direction::Up => (from + 1, self.link_delays_ns[from]),
            Direction::Down => (from - 1, self.link_delays_ns[from - 1]),
        };
        self.schedule(self.now + extra_delay + link, Ev::Arrive { at: to, dir, pkt });
    }

    /// Client-side emission at hop 0 (through the NAT when present).
    fn emit_from_client(&mut self, mut pkt: Packet) {
        if let Some(nat) = &mut self.nat {
            match nat.outbound(&pkt.hdr) {
                Some(h) => pkt.hdr = h,
                None => {
                    self.log_ev("nat-drop up");
                    return;
                }
            }
        }
        self.log_ev(&format!(
            "emit flow={} src={}:{} dst={}:{} kind={}",
            pkt.flow_tag,
            pkt.hdr.src_addr.0,
            pkt.hdr.src_port,
            pkt.hdr.dst_addr.0,
            pkt.hdr.dst_port,
            payload_kind(&pkt.payload)
        ));
        self.send_leg(0, Direction::Up, pkt, 0);
    }

    pub fn run(&mut self, until_ms: Option<f64>) -> Metrics {
        let limit = until_ms.map(ms_to_ns);
        while let Some(Reverse(item)) = self.heap.pop() {
            if let Some(l) = limit {
                if item.t > l {
                    break;
                }
            }
            self.now = item.t;
            self.dispatch(item.ev);
        }
        self.collect()
    }

    fn dispatch(&mut self, ev: Ev) {
        match ev {
            Ev::SessionStart(sid) => self.start_session(sid),
            Ev::LegacyStart(fid) => self.start_legacy(fid),
            Ev::Arrive { at, dir, pkt } => self.arrive(at, dir, pkt),
            Ev::Dispatch { tag } => self.flush_pending(tag),
            Ev::AppSend { sid, k } => self.app_send(sid, k),
            Ev::Timeout { sid, epoch } => self.handle_timeout(sid, epoch),
        }
    }

    fn client_addr(&self, index: u32) -> Addr {
        Addr(100 + index)
    }

    fn origin_addr(&self) -> Addr {
        Addr(900)
    }

    fn start_session(&mut self, sid: usize) {
        let cfg = &self.cfg;
        let client_index = (sid as u32) % cfg.traffic.clients;
        let client_addr = self.client_addr(client_index);
        let (lo, _) = cfg.ports.ephemeral_range;
        let local_port = lo + 100 + (sid as u32 / cfg.traffic.clients) as u16;
        let sfc = SfcSpec {
            sfc_up: cfg.client.sfc_up.iter().map(|n| SfId::from_name(n)).collect(),
            sfc_down: cfg.client.sfc_down.iter().map(|n| SfId::from_name(n)).collect(),
        };
        let policy = SessionPolicy {
            assignment_rule: Default::default(),
            fail_mode: cfg.client.fail_mode,
            path_budget: cfg.client.path_budget,
        };
        let target = Target {
            server_addr: self.origin_addr(),
            listen_port: cfg.origin.listen_port,
            tls_like: cfg.origin.tls_like,
        };
        let rng = ChaCha12Rng::from_seed(derived_seed(cfg.seed, "session", sid as u64));
        let (session, first_get) = ClientSession::begin_session(
            sid as u64,
            client_addr,
            local_port,
            target,
            sfc,
            policy,
            &self.registry,
            self.authority_public.clone(),
            rng,
        );
        if cfg.origin.tls_like {
            if let Some((ck_up, ck_down)) = session.content_keys() {
                // Stand-in for the client↔server TLS handshake: both ends
                // hold the content keys; the handover to the server-adjacent
                // box is what the protocol itself delivers.
                self.origin.content.insert(
                    sid as u64,
                    (
                        crate::keys::SendStream::new(ck_down),
                        crate::keys::RecvStream::new(ck_up),
                    ),
                );
            }
        }
        let mut rt = SessionRt {
            session,
            t_start: self.now,
            t_ready: None,
            connects: 0,
            conn_open: false,
            connecting: false,
            pending: Vec::new(),
            epoch: 0,
            data_sent: 0,
            data_responses: 0,
            bytes_sent: 0,
            bytes_to_origin: 0,
            bytes_dropped: 0,
            bytes_delivered: 0,
            box_delays: Vec::new(),
            fallback: false,
        };
        self.session_index.insert((client_addr, local_port), sid);
        self.log_ev(&format!("session-start sid={sid}"));

        match first_get {
            Some(path) => {
                rt.pending.push(Pending::Get(path));
                self.sessions.push(rt);
                self.connect(sid);
                self.arm_timeout(sid);
            }
            None => {
                // Plain session (empty chain or immediate abort).
                if rt.session.state() == SessionState::Ready {
                    rt.t_ready = Some(self.now);
                    self.sessions.push(rt);
                    self.schedule_data(sid);
                } else {
                    self.sessions.push(rt);
                }
            }
        }
    }

    /// Starts the three TCP legs for a session's current destination.
    fn connect(&mut self, sid: usize) {
        let rt = &mut self.sessions[sid];
        if rt.connecting {
            return;
        }
        rt.connecting = true;
        rt.conn_open = false;
        rt.connects += 1;
        let hdr = PacketHeader {
            src_addr: rt.session.client_addr,
            dst_addr: rt.session.target.server_addr,
            src_port: rt.session.local_port,
            dst_port: rt.session.dst_port(),
            ts_val: rt.session.ts_val(),
            ts_ecr: 0,
            direction: Direction::Up,
        };
        let pkt = Packet::new(hdr, PacketPayload::TcpSyn, sid as u64);
        self.log_ev(&format!("tcp-syn sid={sid}"));
        self.emit_from_client(pkt);
    }

    fn arm_timeout(&mut self, sid: usize) {
        let epoch = self.sessions[sid].epoch;
        self.schedule(self.now + self.timeout_ns, Ev::Timeout { sid, epoch });
    }

    fn handle_timeout(&mut self, sid: usize, epoch: u32) {
        let rt = &mut self.sessions[sid];
        if rt.epoch != epoch {
            return; // stale
        }
        match rt.session.state() {
            SessionState::AwaitResponse1 | SessionState::AwaitResponse2 => {
                let step = rt.session.on_timeout();
                rt.epoch += 1;
                rt.fallback = true;
                let rt = &mut self.sessions[sid];
                match step {
                    ClientStep::Ready => {
                        rt.t_ready = Some(self.now);
                        rt.conn_open = false;
                        rt.connecting = false;
                        rt.pending.clear();
                        self.schedule_data(sid);
                    }
                    ClientStep::Aborted(_) => {
                        rt.t_ready = Some(self.now);
                    }
                    ClientStep::SendGet(_) => unreachable!("timeout never requests a send"),
                }
            }
            _ => {}
        }
    }

    /// Plans the application data sends for a Ready session.
    fn schedule_data(&mut self, sid: usize) {
        let rt = &self.sessions[sid];
        if rt.session.state() != SessionState::Ready {
            return;
        }
        let mut rng = ChaCha12Rng::from_seed(derived_seed(self.cfg.seed, "data", sid as u64));
        let rate = self.cfg.traffic.flow_rate_pps;
        let mut t = self.now;
        for k in 0..self.cfg.traffic.app_packets_per_flow {
            // Exponential inter-arrival, seeded.
            let u: f64 = rng.random::<f64>().max(1e-12);
            let gap_s = -u.ln() / rate;
            t += (gap_s * 1e9).round() as u64;
            self.schedule(t, Ev::AppSend { sid, k });
        }
    }

    fn data_path(&self, sid: usize, k: u32) -> String {
        let paths = &self.cfg.traffic.data_paths;
        if paths.is_empty() {
            format!("/page/{sid}/{k}")
        } else {
            paths[(k as usize) % paths.len()].clone()
        }
    }

    fn app_send(&mut self, sid: usize, k: u32) {
        let path = self.data_path(sid, k);
        let rt = &mut self.sessions[sid];
        if rt.session.state() != SessionState::Ready {
            return;
        }
        let line = Packet::request_line(&path);
        let len = line.len() as u32;
        match rt.session.send_app_data(&line) {
            Ok(payload) => {
                rt.data_sent += 1;
                rt.bytes_sent += u64::from(len);
                rt.pending.push(Pending::Data { payload, len });
                if rt.conn_open {
                    self.flush_pending(sid as u64);
                } else {
                    self.connect(sid);
                }
            }
            Err(_) => { /* terminated or aborted: nothing to send */ }
        }
    }

    /// Emits everything queued for a flow once its connection is usable.
    fn flush_pending(&mut self, tag: u64) {
        if tag >= LEGACY_TAG_BASE {
            self.flush_legacy(tag);
            return;
        }
        let sid = tag as usize;
        let rt = &mut self.sessions[sid];
        rt.conn_open = true;
        rt.connecting = false;
        let pending: Vec<Pending> = rt.pending.drain(..).collect();
        let (addr, port) = (rt.session.client_addr, rt.session.local_port);
        let (dst, dport, ts) =
            (rt.session.target.server_addr, rt.session.dst_port(), rt.session.ts_val());
        for item in pending {
            let (payload, len) = match item {
                Pending::Get(path) => (PacketPayload::HttpGet { path }, 0),
                Pending::Data { payload, len } => (payload, len),
            };
            let hdr = PacketHeader {
                src_addr: addr,
                dst_addr: dst,
                src_port: port,
                dst_port: dport,
                ts_val: ts,
                ts_ecr: 0,
                direction: Direction::Up,
            };
            let mut pkt = Packet::new(hdr, payload, tag);
            pkt.data_len = len;
            self.emit_from_client(pkt);
        }
    }

    fn start_legacy(&mut self, fid: usize) {
        let mut rng = ChaCha12Rng::from_seed(derived_seed(self.cfg.seed, "legacy", fid as u64));
        let client_index = rng.random_range(0..self.cfg.traffic.clients);
        let client_addr = self.client_addr(client_index);
        // Half the legacy flows deliberately choose a source port inside the
        // Opsec set (the false-positive case); the rest use ephemeral ports.
        let opsec_ports: Vec<Port> = self.registry.opsec_ports().collect();
        let src_port = if rng.random_bool(0.5) {
            opsec_ports[rng.random_range(0..opsec_ports.len())]
        } else {
            let (lo, _) = self.cfg.ports.ephemeral_range;
            lo + 500 + fid as u16
        };
        let dst_port = self.cfg.origin.listen_port;
        let ts_val = 1000 + fid as u32; // ordinary timestamp, never decodes
        let rt = LegacyRt {
            client_addr,
            src_port,
            dst_port,
            ts_val,
            sent: Vec::new(),
            completed: false,
            violations: 0,
        };
        self.legacy_index.insert((client_addr, src_port), fid);
        self.legacy.push(rt);
        let fid_rt = self.legacy.len() - 1;
        debug_assert_eq!(fid_rt, fid);
        let hdr = PacketHeader {
            src_addr: client_addr,
            dst_addr: self.origin_addr(),
            src_port,
            dst_port,
            ts_val,
            ts_ecr: 0,
            direction: Direction::Up,
        };
        let tag = LEGACY_TAG_BASE | fid as u64;
        let pkt = Packet::new(hdr.clone(), PacketPayload::TcpSyn, tag);
        self.legacy[fid].sent.push((hdr, PacketPayload::TcpSyn));
        self.log_ev(&format!("legacy-start fid={fid}"));
        self.emit_from_client(pkt);
    }

    fn flush_legacy(&mut self, tag: u64) {
        let fid = (tag & 0xFFFF_FFFF) as usize;
        let rt = &self.legacy[fid];
        let hdr = PacketHeader {
            src_addr: rt.client_addr,
            dst_addr: self.origin_addr(),
            src_port: rt.src_port,
            dst_port: rt.dst_port,
            ts_val: rt.ts_val,
            ts_ecr: 0,
            direction: Direction::Up,
        };
        let payload = PacketPayload::HttpGet { path: format!("/legacy/{fid}") };
        self.legacy[fid].sent.push((hdr.clone(), payload.clone()));
        let pkt = Packet::new(hdr, payload, tag);
        self.emit_from_client(pkt);
    }

    fn arrive(&mut self, at: usize, dir: Direction, pkt: Packet) {
        let n = self.hop_count();
        if at == 0 {
            self.deliver_to_client(pkt);
        } else if at == n + 1 {
            self.deliver_to_origin(pkt);
        } else {
            self.transit_isp(at, dir, pkt);
        }
    }

    fn transit_isp(&mut self, at: usize, dir: Direction, mut pkt: Packet) {
        let isp = &mut self.isps[at - 1];
        let covered = isp.coverage.covers(dir);

        // Taps for the invariant harnesses.
        if dir == Direction::Up && !matches!(pkt.payload, PacketPayload::TcpSyn | PacketPayload::TcpSynAck | PacketPayload::TcpAck) {
            self.taps.isp_upstream.push((pkt.flow_tag, at, pkt.hdr.src_port, pkt.hdr.dst_port));
        }
        if matches!(pkt.payload, PacketPayload::Sealed(_) | PacketPayload::Plain(_)) {
            let plain = matches!(pkt.payload, PacketPayload::Plain(_));
            self.taps.data_plaintext.push((pkt.flow_tag, at, dir, plain));
        }

        // Adversary controllers see only the packet on the wire.
        if covered {
            match isp.adversary {
                AdversaryKind::Honest | AdversaryKind::FakeQuote => {}
                AdversaryKind::DropsOpsec => {
                    if classify(&pkt.hdr, &self.registry) != Classification::Legacy {
                        isp.adversary_drops += 1;
                        let tag = pkt.flow_tag;
                        let len = pkt.data_len;
                        self.count_drop(tag, len);
                        self.log_ev(&format!("adversary-drop isp={} flow={}", at, tag));
                        return;
                    }
                }
                AdversaryKind::TampersServDisc => {
                    if dir == Direction::Up {
                        if let PacketPayload::HttpGet { path } = &pkt.payload {
                            if let Some(tampered) = tamper_service_list(path) {
                                isp.tampered += 1;
                                self.log_ev(&format!("adversary-tamper isp={at}"));
                                pkt.payload = PacketPayload::HttpGet { path: tampered };
                            }
                        }
                    }
                }
            }
        }

        let isp = &mut self.isps[at - 1];
        let mut extra_delay = 0;
        if covered && isp.willing && classify(&pkt.hdr, &self.registry) != Classification::Legacy {
            let pool = isp.pool.as_mut().expect("willing ISPs run a pool");
            let had_first = pkt.hdr.direction == Direction::Up
                && classify(&pkt.hdr, &self.registry) == Classification::OpsecByDst;
            let tag = pkt.flow_tag;
            let len = pkt.data_len;
            let outcome = pool.process(pkt, dir, &self.registry, self.now);
            extra_delay = outcome.added_delay_ns;
            if extra_delay > 0 && tag < LEGACY_TAG_BASE {
                self.sessions[tag as usize].box_delays.push(extra_delay);
            }
            match outcome.result {
                crate::obox::Forwarded::Forward(fwd) => {
                    // Record who performed the first rewrite for this flow.
                    if had_first
                        && fwd.hdr.src_port != fwd.hdr.dst_port
                        && self.registry.contains(fwd.hdr.src_port)
                    {
                        self.taps.first_opsec_hop.entry(tag).or_insert(at);
                    }
                    self.send_leg(at, dir, fwd, extra_delay);
                }
                crate::obox::Forwarded::Drop(reason) => {
                    self.count_drop(tag, len);
                    self.log_ev(&format!("box-drop isp={at} flow={tag} reason={reason}"));
                    if !outcome.orphan_alerts.is_empty() {
                        // Terminate verdicts still notify the client.
                        if let Some(key) = outcome.flow_key {
                            self.synthesize_alert_packet(at, tag, key, outcome.orphan_alerts);
                        }
                    }
                }
            }
        } else {
            // Pure wire in this direction.
            self.send_leg(at, dir, pkt, extra_delay);
        }
    }

    /// A box stopped a flow but holds client-bound alerts: originate a
    /// downstream alert-only packet from this hop. The flow key carries the
    /// wire-visible client address and post-NAT source port, so the packet
    /// takes the normal restored downstream shape.
    fn synthesize_alert_packet(
        &mut self,
        at: usize,
        tag: u64,
        key: crate::obox::FlowKey,
        alerts: Vec<(u32, crate::keys::SealedRecord)>,
    ) {
        if tag >= LEGACY_TAG_BASE {
            return;
        }
        let p_star = match self.sessions[tag as usize].session.p_star {
            Some(p) => p,
            None => return,
        };
        let (client_wire_addr, server_addr, p_c_wire) = key;
        let hdr = PacketHeader {
            src_addr: server_addr,
            dst_addr: client_wire_addr,
            src_port: p_star,
            dst_port: p_c_wire,
            ts_val: 0,
            ts_ecr: crate::portplan::pack_ts(p_star, p_c_wire),
            direction: Direction::Down,
        };
        let mut pkt = Packet::new(hdr, PacketPayload::Plain(Vec::new()), tag);
        pkt.alerts = alerts;
        self.log_ev(&format!("alert-packet isp={at} flow={tag}"));
        self.send_leg(at, Direction::Down, pkt, 0);
    }

    fn count_drop(&mut self, tag: u64, len: u32) {
        if tag < LEGACY_TAG_BASE {
            self.sessions[tag as usize].bytes_dropped += u64::from(len);
        }
    }

    fn deliver_to_origin(&mut self, pkt: Packet) {
        let listen = self.origin.profile.listen_port;
        if pkt.hdr.dst_port != listen {
            self.origin.refused += 1;
            let (tag, len) = (pkt.flow_tag, pkt.data_len);
            self.count_drop(tag, len);
            self.log_ev(&format!("origin-refused flow={} dst={}", pkt.flow_tag, pkt.hdr.dst_port));
            return;
        }
        self.taps.origin_delivered.push((
            pkt.flow_tag,
            pkt.hdr.src_addr,
            pkt.hdr.src_port,
            pkt.hdr.dst_port,
        ));
        let reply_to = |req: &PacketHeader, ts_val: u32, payload: PacketPayload, tag: u64| -> Packet {
            let hdr = PacketHeader {
                src_addr: req.dst_addr,
                dst_addr: req.src_addr,
                src_port: req.dst_port,
                dst_port: req.src_port,
                ts_val,
                ts_ecr: req.ts_val,
                direction: Direction::Down,
            };
            Packet::new(hdr, payload, tag)
        };
        let n = self.hop_count();
        let clock = self.origin.clock;
        self.origin.clock += 1;
        match &pkt.payload {
            PacketPayload::TcpSyn => {
                let resp = reply_to(&pkt.hdr, clock, PacketPayload::TcpSynAck, pkt.flow_tag);
                self.send_leg(n + 1, Direction::Down, resp, 0);
            }
            PacketPayload::TcpAck => {
                self.log_ev(&format!("tcp-established flow={}", pkt.flow_tag));
                self.schedule(self.now, Ev::Dispatch { tag: pkt.flow_tag });
            }
            PacketPayload::HttpGet { path } => {
                *self.origin.received_by_flow.entry(pkt.flow_tag).or_insert(0) +=
                    u64::from(pkt.data_len);
                let resp = handle_get(&self.origin.profile, path, pkt.hdr.ts_val);
                self.log_ev(&format!("origin-get flow={} status={}", pkt.flow_tag, resp.status));
                let out = reply_to(&pkt.hdr, clock, PacketPayload::HttpResponse(resp), pkt.flow_tag);
                self.send_leg(n + 1, Direction::Down, out, 0);
            }
            PacketPayload::Plain(bytes) => {
                *self.origin.received_by_flow.entry(pkt.flow_tag).or_insert(0) +=
                    u64::from(pkt.data_len);
                let path = Packet::parse_request_line(bytes).unwrap_or_else(|| "/".into());
                let resp = handle_get(&self.origin.profile, &path, pkt.hdr.ts_val);
                let out = reply_to(&pkt.hdr, clock, PacketPayload::HttpResponse(resp), pkt.flow_tag);
                self.send_leg(n + 1, Direction::Down, out, 0);
            }
            PacketPayload::Sealed(rec) => {
                // TLS-like: the origin shares the session content keys.
                let Some((send, recv)) = self.origin.content.get_mut(&pkt.flow_tag) else {
                    self.origin.refused += 1;
                    let (tag, len) = (pkt.flow_tag, pkt.data_len);
                    self.count_drop(tag, len);
                    return;
                };
                let Ok(bytes) = recv.open_next(rec) else {
                    self.origin.refused += 1;
                    let (tag, len) = (pkt.flow_tag, pkt.data_len);
                    self.count_drop(tag, len);
                    return;
                };
                *self.origin.received_by_flow.entry(pkt.flow_tag).or_insert(0) +=
                    u64::from(pkt.data_len);
                let path = Packet::parse_request_line(&bytes).unwrap_or_else(|| "/".into());
                let resp = handle_get(&self.origin.profile, &path, pkt.hdr.ts_val);
                let sealed = send.seal_next(&crate::pkt::encode_response(&resp));
                let out = reply_to(&pkt.hdr, clock, PacketPayload::Sealed(sealed), pkt.flow_tag);
                self.send_leg(n + 1, Direction::Down, out, 0);
            }
            PacketPayload::TcpSynAck | PacketPayload::HttpResponse(_) => {}
        }
    }

    fn deliver_to_client(&mut self, mut pkt: Packet) {
        if let Some(nat) = &mut self.nat {
            match nat.inbound(&pkt.hdr) {
                Some(h) => pkt.hdr = h,
                None => {
                    self.nat_drops_extra = self.nat_drops_extra.saturating_add(0);
                    return;
                }
            }
        }
        let key = (pkt.hdr.dst_addr, pkt.hdr.dst_port);
        if let Some(&fid) = self.legacy_index.get(&key) {
            self.deliver_to_legacy(fid, pkt);
            return;
        }
        let Some(&sid) = self.session_index.get(&key) else {
            self.log_ev(&format!("client-unmatched dst={}:{}", pkt.hdr.dst_addr.0, pkt.hdr.dst_port));
            return;
        };
        self.taps.client_delivered.push((pkt.flow_tag, pkt.hdr.src_port, pkt.hdr.dst_port));

        // Attached alerts first.
        let alerts: Vec<_> = pkt.alerts.drain(..).collect();
        for (box_id, rec) in alerts {
            self.sessions[sid].session.on_alert(box_id, &rec);
            if self.sessions[sid].session.state() == SessionState::Terminated {
                self.log_ev(&format!("session-terminated sid={sid}"));
            }
        }

        match &pkt.payload {
            PacketPayload::TcpSynAck => {
                let rt = &self.sessions[sid];
                let hdr = PacketHeader {
                    src_addr: rt.session.client_addr,
                    dst_addr: rt.session.target.server_addr,
                    src_port: rt.session.local_port,
                    dst_port: rt.session.dst_port(),
                    ts_val: rt.session.ts_val(),
                    ts_ecr: pkt.hdr.ts_val,
                    direction: Direction::Up,
                };
                let ack = Packet::new(hdr, PacketPayload::TcpAck, sid as u64);
                self.emit_from_client(ack);
            }
            PacketPayload::HttpResponse(resp) => {
                let state = self.sessions[sid].session.state();
                match state {
                    SessionState::AwaitResponse1 => {
                        let resp = resp.clone();
                        self.handle_round1(sid, resp);
                    }
                    SessionState::AwaitResponse2 => {
                        let resp = resp.clone();
                        self.handle_round2(sid, resp);
                    }
                    SessionState::Ready => {
                        let payload = pkt.payload.clone();
                        self.handle_data_response(sid, &payload, pkt.hdr.ts_ecr);
                    }
                    _ => {}
                }
            }
            PacketPayload::Sealed(_) | PacketPayload::Plain(_) => {
                if self.sessions[sid].session.state() == SessionState::Ready {
                    let payload = pkt.payload.clone();
                    self.handle_data_response(sid, &payload, pkt.hdr.ts_ecr);
                }
            }
            _ => {}
        }
    }

    fn handle_round1(&mut self, sid: usize, resp: crate::origin::HttpResponse) {
        let closes = resp.closes;
        let rt = &mut self.sessions[sid];
        rt.epoch += 1;
        let step = rt.session.on_response_1(&resp).expect("state checked");
        if closes {
            rt.conn_open = false;
        }
        match step {
            ClientStep::SendGet(path) => {
                rt.pending.push(Pending::Get(path));
                self.log_ev(&format!("round1-done sid={sid}"));
                if self.sessions[sid].conn_open {
                    self.flush_pending(sid as u64);
                } else {
                    self.connect(sid);
                }
                self.arm_timeout(sid);
            }
            ClientStep::Aborted(reason) => {
                self.sessions[sid].t_ready = Some(self.now);
                self.log_ev(&format!("session-aborted sid={sid} reason={reason:?}"));
            }
            ClientStep::Ready => unreachable!("round 1 never completes the handshake"),
        }
    }

    fn handle_round2(&mut self, sid: usize, resp: crate::origin::HttpResponse) {
        let closes = resp.closes;
        let rt = &mut self.sessions[sid];
        rt.epoch += 1;
        let step = rt.session.on_response_2(&resp).expect("state checked");
        if closes {
            rt.conn_open = false;
        }
        match step {
            ClientStep::Ready => {
                rt.t_ready = Some(self.now);
                self.log_ev(&format!("session-ready sid={sid}"));
                self.schedule_data(sid);
            }
            ClientStep::Aborted(reason) => {
                rt.t_ready = Some(self.now);
                self.log_ev(&format!("session-aborted sid={sid} reason={reason:?}"));
            }
            ClientStep::SendGet(_) => unreachable!("round 2 never requests a send"),
        }
    }

    fn handle_data_response(&mut self, sid: usize, payload: &PacketPayload, ts_ecr: u32) {
        let closes;
        {
            let rt = &mut self.sessions[sid];
            match rt.session.open_response(payload, ts_ecr) {
                Some(resp) => {
                    rt.data_responses += 1;
                    rt.bytes_delivered += resp.body.len() as u64;
                    closes = resp.closes;
                }
                None => return,
            }
        }
        if closes {
            self.sessions[sid].conn_open = false;
        }
    }

    fn deliver_to_legacy(&mut self, fid: usize, pkt: Packet) {
        match &pkt.payload {
            PacketPayload::TcpSynAck => {
                let rt = &self.legacy[fid];
                let hdr = PacketHeader {
                    src_addr: rt.client_addr,
                    dst_addr: self.origin_addr(),
                    src_port: rt.src_port,
                    dst_port: rt.dst_port,
                    ts_val: rt.ts_val,
                    ts_ecr: pkt.hdr.ts_val,
                    direction: Direction::Up,
                };
                let tag = LEGACY_TAG_BASE | fid as u64;
                self.legacy[fid].sent.push((hdr.clone(), PacketPayload::TcpAck));
                let ack = Packet::new(hdr, PacketPayload::TcpAck, tag);
                self.emit_from_client(ack);
                self.schedule(self.now + self.rtt_ns / 2, Ev::Dispatch { tag });
            }
            PacketPayload::HttpResponse(resp) => {
                // Timestamp echo must be intact end to end.
                let rt = &mut self.legacy[fid];
                if resp.ts_ecr != rt.ts_val || pkt.hdr.ts_ecr != rt.ts_val {
                    rt.violations += 1;
                }
                if pkt.hdr.src_port != rt.dst_port || pkt.hdr.dst_port != rt.src_port {
                    rt.violations += 1;
                }
                rt.completed = true;
            }
            _ => {}
        }
    }

    /// Checks that every upstream legacy packet reached the origin
    /// byte-identical (modulo the NAT source mapping when NAT is on).
    fn legacy_identity_violations(&self) -> u32 {
        let mut violations = 0;
        for (fid, rt) in self.legacy.iter().enumerate() {
            let tag = LEGACY_TAG_BASE | fid as u64;
            let delivered: Vec<_> = self
                .taps
                .origin_delivered
                .iter()
                .filter(|(t, _, _, _)| *t == tag)
                .collect();
            for (_, _src_addr, src_port, dst_port) in &delivered {
                if *dst_port != rt.dst_port {
                    violations += 1;
                }
                if self.nat.is_none() && *src_port != rt.src_port {
                    violations += 1;
                }
            }
        }
        violations
    }

    fn collect(&mut self) -> Metrics {
        let sessions: Vec<SessionMetrics> = self
            .sessions
            .iter()
            .map(|rt| {
                let outcome = match rt.session.state() {
                    SessionState::Ready => Outcome::Ready,
                    SessionState::Terminated => Outcome::Terminated,
                    SessionState::Aborted => Outcome::Aborted,
                    // Never left the handshake (lost packets, until-limit).
                    _ => Outcome::Aborted,
                };
                let handshake_rtt = match rt.t_ready {
                    Some(t) => (t - rt.t_start) as f64 / self.rtt_ns as f64,
                    None => f64::NAN,
                };
                SessionMetrics {
                    id: rt.session.id,
                    outcome,
                    handshake_rtt,
                    connects: rt.connects,
                    rounds: rt.session.rounds_completed,
                    fallback: rt.fallback,
                    assignments: rt.session.assignments().len() as u32,
                    alerts: rt.session.alerts.len() as u64,
                    spoofed_alerts: rt.session.spoofed_alerts,
                    bytes_sent: rt.bytes_sent,
                    bytes_delivered: rt.bytes_delivered,
                    bytes_dropped: rt.bytes_dropped,
                    box_delays_ns: rt.box_delays.clone(),
                }
            })
            .collect();
        let isps: Vec<IspMetrics> = self
            .isps
            .iter()
            .map(|isp| {
                let (instances, per_instance_flows, growth, audits) = match &isp.pool {
                    Some(p) => (
                        p.instance_count(),
                        p.per_instance_flows().to_vec(),
                        p.growth.clone(),
                        p.instances().iter().map(|b| b.audit().clone()).collect::<Vec<_>>(),
                    ),
                    None => (0, Vec::new(), Vec::new(), Vec::new()),
                };
                IspMetrics {
                    isp_id: isp.id,
                    instances,
                    per_instance_flows,
                    growth,
                    passthrough: audits.iter().map(|a| a.passthrough).sum(),
                    drops: audits.iter().map(|a| a.drops).sum::<u64>() + isp.adversary_drops,
                    grant_open_fail: audits.iter().map(|a| a.grant_open_fail).sum(),
                    seal_open_fail: audits.iter().map(|a| a.seal_open_fail).sum(),
                    alerts_emitted: audits.iter().map(|a| a.alerts_emitted).sum(),
                }
            })
            .collect();
        let legacy = LegacyMetrics {
            flows: self.legacy.len() as u32,
            completed: self.legacy.iter().filter(|l| l.completed).count() as u32,
            violations: self.legacy.iter().map(|l| l.violations).sum::<u32>()
                + self.legacy_identity_violations(),
        };
        let global = GlobalMetrics {
            events: self.log.count,
            sim_end_ms: self.now as f64 / 1e6,
            origin_refused: self.origin.refused,
            nat_drops: self.nat.as_ref().map(|n| n.drops).unwrap_or(0),
            event_digest: self.log.digest(),
        };
        Metrics { sessions, isps, legacy, global }
    }

    pub fn rtt_ns(&self) -> u64 {
        self.rtt_ns
    }

    pub fn event_lines(&self) -> Option<&[String]> {
        self.log.lines()
    }

    pub fn origin_received_by_flow(&self) -> &BTreeMap<u64, u64> {
        &self.origin.received_by_flow
    }

    pub fn session_count(&self) -> u32 {
        self.n_sessions
    }
}

fn payload_kind(p: &PacketPayload) -> &'static str {
    match p {
        PacketPayload::TcpSyn => "syn",
        PacketPayload::TcpSynAck => "synack",
        PacketPayload::TcpAck => "ack",
        PacketPayload::HttpGet { .. } => "get",
        PacketPayload::HttpResponse(_) => "response",
        PacketPayload::Sealed(_) => "sealed",
        PacketPayload::Plain(_) => "plain",
    }
}

/// Flips one byte inside the first SfId of a transiting ServDisc (round 1)
/// or the first assignment of a ServReq (round 2). The frame stays
/// well-formed; only its meaning changes.
fn tamper_service_list(path: &str) -> Option<String> {
    splice_messages(path, usize::MAX, |msgs| {
        for m in msgs.iter_mut() {
            match m.msg_type {
                MessageType::ServDisc if m.payload.len() > 3 => {
                    m.payload[3] ^= 0x01;
                    return;
                }
                MessageType::ServReq if m.payload.len() > 3 => {
                    m.payload[3] ^= 0x01;
                    return;
                }
                _ => {}
            }
        }
    })
}

/// Runs every flow count of a sweep scenario as an independent simulation.
pub fn run_sweep(cfg: &ScenarioConfig, verbose: bool) -> Result<Vec<(u32, Metrics)>, ConfigInvalid> {
    let mut out = Vec::new();
    for count in cfg.session_counts() {
        let mut sim = Simulation::build(cfg, count, verbose)?;
        let metrics = sim.run(None);
        out.push((count, metrics));
    }
    Ok(out)
}

/// Convenience entry point matching the one-count common case.
pub fn run_single(cfg: &ScenarioConfig, verbose: bool) -> Result<(Simulation, Metrics), ConfigInvalid> {
    let count = cfg.session_counts()[0];
    let mut sim = Simulation::build(cfg, count, verbose)?;
    let metrics = sim.run(None);
    Ok((sim, metrics))
}
