//! The Opsec-box state machine: envelope detection in transit GETs, appending
//! ObHello/ServAnn, ServReq processing, per-hop re-encryption, running the
//! assigned security functions, verdict handling, and port re-arrangement at
//! its ISP's vantage.
//!
//! All key material and plaintext live inside the box's private flow entries
//! (the enclave boundary); adversarial controllers in the simulator only ever
//! see packets on the wire.
//!
//! Flow identity is canonical across every hop: (client addr, server addr,
//! p_c), where p_c is the post-NAT client source port. Upstream packets carry
//! (p*, p_c) in ts_val, downstream packets in ts_ecr via the server echo, so
//! any box on either path can key its state without out-of-band help. A flow
//! entry is created only when the timestamp corroborates the destination port
//! choice; legacy flows that merely touch a port in the Opsec set stay
//! byte-identical.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::keys::{
    self, asym_open, sign_transcript, AttestationAuthority, AttestationQuote, KeyPair, Nonce,
    RecvStream, SealedRecord, SendStream, ALERT_COUNTER_BASE,
};
use crate::origin::HttpResponse;
use crate::payload::{
    AlertRecord, AppendLeg, BoxGrant, ObHelloPayload, ObReadyPayload, OpsecHelloPayload,
    ServAnnPayload, ServDiscPayload, ServReqPayload,
};
use crate::pkt::{encode_response, Packet, PacketPayload};
use crate::portplan::{
    classify, decode_ts, rewrite_downstream, rewrite_downstream_from_ts, rewrite_upstream, Addr,
    Classification, FlowPortState, HashPortAllocator, PacketHeader, Port, PortRegistry,
};
use crate::sf::{Coverage, Direction, FlowContext, SecurityFunction, SfId, Verdict};
use crate::wire::{self, splice_messages, MessageType, OpsecMessage};

/// (client address, server address, post-NAT client source port).
pub type FlowKey = (Addr, Addr, Port);

#[derive(Debug, Clone)]
pub struct BoxConfig {
    pub box_id: u32,
    pub coverage: Coverage,
    pub willing: bool,
    pub catalog: Vec<SecurityFunction>,
    pub path_budget: usize,
}

/// Observable counters for tests and metrics.
#[derive(Debug, Clone, Default)]
pub struct BoxAudit {
    /// Packets forwarded untouched (no Opsec record / unknown flow).
    pub passthrough: u64,
    /// Packets dropped (seal failures, terminated flows).
    pub drops: u64,
    pub grant_open_ok: u64,
    pub grant_open_fail: u64,
    pub seal_open_fail: u64,
    pub alerts_emitted: u64,
    /// (function, invocation sequence) pairs, for chain-order assertions.
    pub sf_invocations: Vec<(SfId, u64)>,
    sf_seq: u64,
}

enum UpOut {
    /// Seal toward the next box, or toward a TLS-like origin on the last hop.
    Key(SendStream),
    /// Last hop of a plaintext session: emit in the clear.
    Plain,
}

enum DownIn {
    /// Open records from the previous box / a TLS-like origin.
    Key(RecvStream),
    /// Server-adjacent on a plaintext session: the origin's output is clear.
    Plain,
}

struct UpPlane {
    recv: RecvStream,
    out: UpOut,
    chain: Vec<SecurityFunction>,
}

struct DownPlane {
    inp: DownIn,
    send: SendStream,
    chain: Vec<SecurityFunction>,
}

struct ReadyState {
    up: Option<UpPlane>,
    down: Option<DownPlane>,
    alert_send: SendStream,
    terminated: bool,
    packet_seq: u64,
}

enum Phase {
    /// Ports arranged (TCP seen), no protocol participation yet.
    Tcp,
    /// ObHello/ServAnn appended, waiting for ServReq.
    Pending,
    /// Not selected, or unable to append: port duties only.
    Declined,
    Ready(ReadyState),
}

struct FlowEntry {
    ports: FlowPortState,
    /// This box performed the first-ISP rewrite and owns the p# allocation.
    first_isp: bool,
    keypair: KeyPair,
    box_nonce: Nonce,
    cached_hello: Vec<u8>,
    servdisc_bytes: Vec<u8>,
    servreq_bytes: Vec<u8>,
    /// Alerts awaiting a downstream packet to ride on.
    alerts_down: Vec<SealedRecord>,
    /// Alerts awaiting an upstream GET path to ride on (reflection delivery).
    alerts_up: Vec<SealedRecord>,
    phase: Phase,
}

impl FlowEntry {
    fn new(ports: FlowPortState, first_isp: bool, keypair: KeyPair, box_nonce: Nonce) -> Self {
        Self {
            ports,
            first_isp,
            keypair,
            box_nonce,
            cached_hello: Vec::new(),
            servdisc_bytes: Vec::new(),
            servreq_bytes: Vec::new(),
            alerts_down: Vec::new(),
            alerts_up: Vec::new(),
            phase: Phase::Tcp,
        }
    }
}

#[derive(Debug)]
pub enum Forwarded {
    Forward(Packet),
    Drop(&'static str),
}

pub struct OpsecBox {
    cfg: BoxConfig,
    quote: AttestationQuote,
    flows: BTreeMap<FlowKey, FlowEntry>,
    audit: BoxAudit,
    rng: ChaCha12Rng,
}

impl OpsecBox {
    /// Builds a box whose (id, code hash) pair must be registered with the
    /// authority.
    pub fn new(
        cfg: BoxConfig,
        code_hash: [u8; 32],
        authority: &AttestationAuthority,
        rng_seed: [u8; 32],
    ) -> Result<Self, keys::KeyError> {
        let quote = authority.issue_quote(cfg.box_id, code_hash)?;
        Ok(Self::with_quote(cfg, quote, rng_seed))
    }

    /// Builds a box with an arbitrary quote (how a fake box presents itself).
    pub fn with_quote(cfg: BoxConfig, quote: AttestationQuote, rng_seed: [u8; 32]) -> Self {
        Self {
            cfg,
            quote,
            flows: BTreeMap::new(),
            audit: BoxAudit::default(),
            rng: ChaCha12Rng::from_seed(rng_seed),
        }
    }

    pub fn box_id(&self) -> u32 {
        self.cfg.box_id
    }

    pub fn coverage(&self) -> Coverage {
        self.cfg.coverage
    }

    pub fn audit(&self) -> &BoxAudit {
        &self.audit
    }

    pub fn active_flows(&self) -> usize {
        self.flows.len()
    }

    /// Hashes announced for the requested ids: present-in-catalog only,
    /// request order, duplicates preserved.
    pub fn catalog_lookup(&self, requested: &[SfId]) -> Vec<[u8; 32]> {
        requested
            .iter()
            .filter(|id| self.cfg.catalog.iter().any(|sf| sf.id == **id))
            .map(|id| id.announce_hash())
            .collect()
    }

    /// Canonical flow key as visible on the wire at this vantage.
    pub fn flow_key_of(hdr: &PacketHeader, reg: &PortRegistry, direction: Direction) -> Option<FlowKey> {
        match direction {
            Direction::Up => match classify(hdr, reg) {
                Classification::OpsecByDst => Some((hdr.src_addr, hdr.dst_addr, hdr.src_port)),
                Classification::OpsecBySrc => {
                    decode_ts(hdr.ts_val, reg).map(|(_, p_c)| (hdr.src_addr, hdr.dst_addr, p_c))
                }
                Classification::Legacy => None,
            },
            Direction::Down => {
                decode_ts(hdr.ts_ecr, reg).map(|(_, p_c)| (hdr.dst_addr, hdr.src_addr, p_c))
            }
        }
    }

    /// Flow creation on upstream packets. Pre-rewrite packets must signal
    /// intent by carrying pack(p*, ·) with p* equal to their own destination
    /// port; already-canonical packets identify themselves via ts_val.
    fn ensure_flow_up(
        &mut self,
        hdr: &PacketHeader,
        reg: &PortRegistry,
        alloc: &mut HashPortAllocator,
    ) -> Option<FlowKey> {
        let key = Self::flow_key_of(hdr, reg, Direction::Up)?;
        if self.flows.contains_key(&key) {
            return Some(key);
        }
        let (ports, first_isp) = match classify(hdr, reg) {
            Classification::OpsecByDst => {
                let (ts_star, _) = decode_ts(hdr.ts_val, reg)?;
                if ts_star != hdr.dst_port {
                    return None;
                }
                let p_s = reg.listen_port(hdr.dst_port)?;
                let p_hash = alloc.allocate(hdr.src_addr, hdr.dst_addr, reg).ok()?;
                (
                    FlowPortState { p_c: hdr.src_port, p_star: hdr.dst_port, p_hash: Some(p_hash), p_s },
                    true,
                )
            }
            Classification::OpsecBySrc => {
                let (p_star, p_c) = decode_ts(hdr.ts_val, reg)?;
                let p_s = reg.listen_port(p_star)?;
                (FlowPortState { p_c, p_star, p_hash: Some(hdr.src_port), p_s }, false)
            }
            Classification::Legacy => return None,
        };
        let keypair = KeyPair::generate(&mut self.rng);
        let box_nonce = Nonce::generate(&mut self.rng);
        self.flows.insert(key, FlowEntry::new(ports, first_isp, keypair, box_nonce));
        Some(key)
    }

    /// Flow creation on downstream packets (one-direction downstream ISPs
    /// learn everything from the echoed timestamp).
    fn ensure_flow_down(&mut self, hdr: &PacketHeader, reg: &PortRegistry) -> Option<FlowKey> {
        let key = Self::flow_key_of(hdr, reg, Direction::Down)?;
        if self.flows.contains_key(&key) {
            return Some(key);
        }
        let (p_star, p_c) = decode_ts(hdr.ts_ecr, reg)?;
        let p_s = reg.listen_port(p_star)?;
        let keypair = KeyPair::generate(&mut self.rng);
        let box_nonce = Nonce::generate(&mut self.rng);
        self.flows.insert(
            key,
            FlowEntry::new(
                FlowPortState { p_c, p_star, p_hash: Some(hdr.dst_port), p_s },
                false,
                keypair,
                box_nonce,
            ),
        );
        Some(key)
    }

    /// Round-1 handling shared by both legs: cache the client hello and the
    /// exact ServDisc bytes, move to Pending, and return the two messages to
    /// append.
    fn join_discovery(
        &mut self,
        key: FlowKey,
        msgs: &[OpsecMessage],
        leg: AppendLeg,
    ) -> Option<[OpsecMessage; 2]> {
        if !self.cfg.willing {
            return None;
        }
        let already_joined = msgs
            .iter()
            .any(|m| m.msg_type == MessageType::ObHello && m.box_id == self.cfg.box_id);
        if already_joined {
            return None;
        }
        let hello = msgs.iter().find(|m| m.msg_type == MessageType::OpsecHello)?;
        let servdisc = msgs.iter().find(|m| m.msg_type == MessageType::ServDisc)?;
        if !matches!(self.flows.get(&key)?.phase, Phase::Tcp) {
            return None;
        }
        let sd_payload = ServDiscPayload::decode(&servdisc.payload).ok()?;
        let sd_bytes = wire::encode_message(servdisc).expect("payload fits");
        let requested: Vec<SfId> = sd_payload.entries.iter().map(|(_, id)| *id).collect();
        let ann = ServAnnPayload { hashes: self.catalog_lookup(&requested) };

        let entry = self.flows.get_mut(&key).expect("entry exists");
        entry.cached_hello = hello.payload.clone();
        entry.servdisc_bytes = sd_bytes;
        entry.phase = Phase::Pending;
        let ob_hello = ObHelloPayload {
            box_public: entry.keypair.public_part().clone(),
            box_nonce: entry.box_nonce,
            coverage: self.cfg.coverage,
            leg,
            quote: self.quote.clone(),
        };
        Some([
            OpsecMessage::new(MessageType::ObHello, self.cfg.box_id, ob_hello.encode()),
            OpsecMessage::new(MessageType::ServAnn, self.cfg.box_id, ann.encode()),
        ])
    }

    /// Round-2 handling shared by both legs: open the grant addressed to this
    /// box, build the data planes, and return the ObReady to append.
    fn handle_servreq(&mut self, key: FlowKey, servreq: &OpsecMessage) -> Option<OpsecMessage> {
        if !matches!(self.flows.get(&key)?.phase, Phase::Pending) {
            return None;
        }
        let servreq_bytes = wire::encode_message(servreq).expect("payload fits");
        let payload = ServReqPayload::decode(&servreq.payload).ok()?;
        let my_id = self.cfg.box_id;

        let entry = self.flows.get_mut(&key).expect("entry exists");
        entry.servreq_bytes = servreq_bytes;

        let Some((_, blob)) = payload.sealed_grants.iter().find(|(b, _)| *b == my_id) else {
            // Sealed to other boxes only: forward untouched, keep port duties.
            entry.phase = Phase::Declined;
            return None;
        };
        let opened = asym_open(&entry.keypair, blob).ok().and_then(|pt| BoxGrant::decode(&pt).ok());
        let Some(grant) = opened else {
            self.audit.grant_open_fail += 1;
            // Abstain entirely: the box never signs what it could not read.
            self.flows.remove(&key);
            return None;
        };
        self.audit.grant_open_ok += 1;

        let client_nonce = OpsecHelloPayload::decode(&entry.cached_hello).ok()?.client_nonce;
        let (key_up, key_down) =
            keys::derive_session_keys(&grant.master_secret, &client_nonce, &entry.box_nonce);

        let pick_chain = |dir: Direction| -> Vec<SecurityFunction> {
            payload
                .assignments
                .iter()
                .filter(|a| a.box_id == my_id && a.direction == dir)
                .filter_map(|a| self.cfg.catalog.iter().find(|sf| sf.id == a.sf_id).cloned())
                .collect()
        };
        let up_chain = pick_chain(Direction::Up);
        let down_chain = pick_chain(Direction::Down);

        let entry = self.flows.get_mut(&key).expect("entry exists");
        let up = grant.up.as_ref().map(|duty| UpPlane {
            recv: RecvStream::new(key_up),
            out: match (duty.next_key, duty.content_key) {
                (Some(k), _) => UpOut::Key(SendStream::new(k)),
                (None, Some(ck)) => UpOut::Key(SendStream::new(ck)),
                (None, None) => UpOut::Plain,
            },
            chain: up_chain,
        });
        let down = grant.down.as_ref().map(|duty| DownPlane {
            inp: match (duty.prev_key, duty.content_key) {
                (Some(k), _) => DownIn::Key(RecvStream::new(k)),
                (None, Some(ck)) => DownIn::Key(RecvStream::new(ck)),
                (None, None) => DownIn::Plain,
            },
            send: SendStream::new(key_down),
            chain: down_chain,
        });
        let signature =
            sign_transcript(&entry.keypair, &entry.servdisc_bytes, &entry.servreq_bytes);
        entry.phase = Phase::Ready(ReadyState {
            up,
            down,
            alert_send: SendStream::with_base(key_down, ALERT_COUNTER_BASE),
            terminated: false,
            packet_seq: 0,
        });
        Some(OpsecMessage::new(
            MessageType::ObReady,
            my_id,
            ObReadyPayload::Ready { transcript_signature: signature }.encode(),
        ))
    }

    fn alert_message(box_id: u32, record: SealedRecord) -> OpsecMessage {
        OpsecMessage::new(MessageType::ObReady, box_id, ObReadyPayload::Alert { record }.encode())
    }

    /// Runs a chain; returns the alert records and whether to terminate.
    fn run_chain(
        audit: &mut BoxAudit,
        box_id: u32,
        chain: &[SecurityFunction],
        payload: &[u8],
        ctx: &FlowContext,
    ) -> (Vec<AlertRecord>, bool) {
        let mut alerts = Vec::new();
        let mut terminate = false;
        for sf in chain {
            audit.sf_seq += 1;
            let seq = audit.sf_seq;
            audit.sf_invocations.push((sf.id, seq));
            match sf.inspect(payload, ctx) {
                Verdict::Pass => {}
                Verdict::Alert(reason) => {
                    alerts.push(AlertRecord { box_id, sf_id: sf.id, reason, terminate: false })
                }
                Verdict::Terminate(reason) => {
                    alerts.push(AlertRecord { box_id, sf_id: sf.id, reason, terminate: true });
                    terminate = true;
                }
            }
        }
        (alerts, terminate)
    }

    /// Upstream packets at this box's vantage. The caller (the ISP's edge)
    /// has already classified the packet as Opsec-bound.
    pub fn process_up(
        &mut self,
        mut pkt: Packet,
        reg: &PortRegistry,
        alloc: &mut HashPortAllocator,
    ) -> Forwarded {
        let Some(key) = self.ensure_flow_up(&pkt.hdr, reg, alloc) else {
            self.audit.passthrough += 1;
            return Forwarded::Forward(pkt);
        };
        match std::mem::replace(&mut pkt.payload, PacketPayload::TcpAck) {
            PacketPayload::HttpGet { path } => {
                let path = self.process_up_path(key, path);
                pkt.payload = PacketPayload::HttpGet { path };
                self.finish_up(key, pkt, reg)
            }
            PacketPayload::Sealed(rec) => self.process_up_sealed(key, pkt, rec, reg),
            other => {
                pkt.payload = other;
                self.finish_up(key, pkt, reg)
            }
        }
    }

    /// Envelope work on an upstream GET path.
    fn process_up_path(&mut self, key: FlowKey, path: String) -> String {
        let msgs = wire::extract_from_path(&path);
        if msgs.is_empty() {
            return path;
        }
        let mut appends: Vec<OpsecMessage> = Vec::new();
        if let Some(pair) = self.join_discovery(key, &msgs, AppendLeg::Request) {
            appends.extend(pair);
        }
        if let Some(sr) = msgs.iter().find(|m| m.msg_type == MessageType::ServReq) {
            let sr = sr.clone();
            if let Some(ready) = self.handle_servreq(key, &sr) {
                appends.push(ready);
            }
        }
        let my_id = self.cfg.box_id;
        if let Some(e) = self.flows.get_mut(&key) {
            let pending: Vec<SealedRecord> = e.alerts_up.drain(..).collect();
            appends.extend(pending.into_iter().map(|r| Self::alert_message(my_id, r)));
        }
        if appends.is_empty() {
            return path;
        }
        match splice_messages(&path, self.cfg.path_budget, |m| m.extend(appends.iter().cloned())) {
            Some(p) => p,
            None => {
                // Budget overrun: abstain from the session, keep port duties.
                if let Some(e) = self.flows.get_mut(&key) {
                    if matches!(e.phase, Phase::Pending) {
                        e.phase = Phase::Declined;
                    }
                }
                path
            }
        }
    }

    fn process_up_sealed(
        &mut self,
        key: FlowKey,
        mut pkt: Packet,
        rec: SealedRecord,
        reg: &PortRegistry,
    ) -> Forwarded {
        let my_id = self.cfg.box_id;
        let covers_down = self.cfg.coverage.covers(Direction::Down);
        let budget = self.cfg.path_budget;

        let entry = self.flows.get_mut(&key).expect("flow ensured");
        let Phase::Ready(state) = &mut entry.phase else {
            self.audit.passthrough += 1;
            pkt.payload = PacketPayload::Sealed(rec);
            return self.finish_up(key, pkt, reg);
        };
        if state.terminated {
            self.audit.drops += 1;
            return Forwarded::Drop("flow terminated");
        }
        if state.up.is_none() {
            self.audit.passthrough += 1;
            pkt.payload = PacketPayload::Sealed(rec);
            return self.finish_up(key, pkt, reg);
        }
        state.packet_seq += 1;
        let seq = state.packet_seq;
        let up = state.up.as_mut().expect("checked above");
        let mut plaintext = match up.recv.open_next(&rec) {
            Ok(pt) => pt,
            Err(_) => {
                self.audit.seal_open_fail += 1;
                self.audit.drops += 1;
                return Forwarded::Drop("authentication failure");
            }
        };
        let ctx = FlowContext { direction: Direction::Up, packet_index: seq };
        let (alerts, terminate) =
            Self::run_chain(&mut self.audit, my_id, &up.chain, &plaintext, &ctx);

        if !alerts.is_empty() {
            self.audit.alerts_emitted += alerts.len() as u64;
            for a in &alerts {
                let sealed = state.alert_send.seal_next(&a.encode());
                if covers_down {
                    entry.alerts_down.push(sealed);
                } else {
                    entry.alerts_up.push(sealed);
                }
            }
        }

        if terminate {
            state.terminated = true;
            self.audit.drops += 1;
            if !covers_down && !entry.alerts_up.is_empty() {
                // Upstream-only box: the alert can only reach the client via
                // the reflection path, so emit one final alert-only GET in
                // place of the dropped application data.
                let pending: Vec<SealedRecord> = entry.alerts_up.drain(..).collect();
                let msgs: Vec<OpsecMessage> =
                    pending.into_iter().map(|r| Self::alert_message(my_id, r)).collect();
                if let Ok(alert_path) = wire::embed_in_path(&msgs) {
                    if alert_path.len() <= budget {
                        let line = Packet::request_line(&alert_path);
                        let up = state.up.as_mut().expect("checked above");
                        pkt.payload = match &mut up.out {
                            UpOut::Key(stream) => PacketPayload::Sealed(stream.seal_next(&line)),
                            UpOut::Plain => PacketPayload::HttpGet { path: alert_path },
                        };
                        return self.finish_up(key, pkt, reg);
                    }
                }
            }
            return Forwarded::Drop("terminate verdict");
        }

        // Reflection-path alert delivery: graft queued alerts onto the GET
        // path inside the record before resealing.
        if !covers_down && !entry.alerts_up.is_empty() {
            if let Some(path) = Packet::parse_request_line(&plaintext) {
                let pending: Vec<SealedRecord> = entry.alerts_up.drain(..).collect();
                let msgs: Vec<OpsecMessage> =
                    pending.into_iter().map(|r| Self::alert_message(my_id, r)).collect();
                let extended = if path.contains("/.opsec/") {
                    splice_messages(&path, budget, |m| m.extend(msgs.iter().cloned()))
                } else {
                    wire::embed_in_path(&msgs)
                        .ok()
                        .map(|suffix| format!("{path}{suffix}"))
                        .filter(|p| p.len() <= budget)
                };
                if let Some(p) = extended {
                    plaintext = Packet::request_line(&p);
                }
            }
        }

        let up = state.up.as_mut().expect("checked above");
        pkt.payload = match &mut up.out {
            UpOut::Key(stream) => PacketPayload::Sealed(stream.seal_next(&plaintext)),
            UpOut::Plain => match Packet::parse_request_line(&plaintext) {
                Some(path) => PacketPayload::HttpGet { path },
                None => PacketPayload::Plain(plaintext),
            },
        };
        self.finish_up(key, pkt, reg)
    }

    /// Port re-arrangement before upstream egress.
    fn finish_up(&mut self, key: FlowKey, mut pkt: Packet, reg: &PortRegistry) -> Forwarded {
        if let Some(entry) = self.flows.get(&key) {
            let is_first =
                entry.first_isp && matches!(classify(&pkt.hdr, reg), Classification::OpsecByDst);
            if let Ok(hdr) = rewrite_upstream(&pkt.hdr, &entry.ports, reg, is_first) {
                pkt.hdr = hdr;
            }
        }
        Forwarded::Forward(pkt)
    }

    /// Downstream packets at this box's vantage.
    pub fn process_down(&mut self, mut pkt: Packet, reg: &PortRegistry) -> Forwarded {
        let Some(key) = self.ensure_flow_down(&pkt.hdr, reg) else {
            self.audit.passthrough += 1;
            return Forwarded::Forward(pkt);
        };
        match std::mem::replace(&mut pkt.payload, PacketPayload::TcpAck) {
            PacketPayload::HttpResponse(resp) => {
                let text = resp.reflected_text();
                if !wire::extract_from_path(&text).is_empty() {
                    // Handshake or alert reflection: stays clear for everyone
                    // downstream to read.
                    let resp = self.process_down_reflection(key, resp);
                    pkt.payload = PacketPayload::HttpResponse(resp);
                    self.finish_down(key, pkt, reg)
                } else if self.ready_with_down_plane(&key) {
                    // Data response from a plaintext origin.
                    let bytes = encode_response(&resp);
                    self.process_down_record(key, pkt, DownRecord::Plain(bytes), reg)
                } else {
                    pkt.payload = PacketPayload::HttpResponse(resp);
                    self.finish_down(key, pkt, reg)
                }
            }
            PacketPayload::Sealed(rec) => {
                self.process_down_record(key, pkt, DownRecord::Sealed(rec), reg)
            }
            PacketPayload::Plain(bytes) => {
                self.process_down_record(key, pkt, DownRecord::Plain(bytes), reg)
            }
            other => {
                pkt.payload = other;
                self.finish_down(key, pkt, reg)
            }
        }
    }

    fn ready_with_down_plane(&self, key: &FlowKey) -> bool {
        matches!(
            self.flows.get(key).map(|e| &e.phase),
            Some(Phase::Ready(ReadyState { down: Some(_), terminated: false, .. }))
        )
    }

    /// Reflected handshake text: one-direction downstream boxes discover the
    /// session here and append their replies into the reflected blob.
    fn process_down_reflection(&mut self, key: FlowKey, mut resp: HttpResponse) -> HttpResponse {
        let text = resp.reflected_text();
        let msgs = wire::extract_from_path(&text);
        let mut appends: Vec<OpsecMessage> = Vec::new();
        if let Some(pair) = self.join_discovery(key, &msgs, AppendLeg::Response) {
            appends.extend(pair);
        }
        if let Some(sr) = msgs.iter().find(|m| m.msg_type == MessageType::ServReq) {
            let sr = sr.clone();
            if let Some(ready) = self.handle_servreq(key, &sr) {
                appends.push(ready);
            }
        }
        if appends.is_empty() {
            return resp;
        }
        let budget = self.cfg.path_budget;
        if let Some(l) = &resp.location {
            if let Some(nl) = splice_messages(l, budget, |m| m.extend(appends.iter().cloned())) {
                resp.location = Some(nl);
                return resp;
            }
        }
        if let Some(nb) = splice_messages(&resp.body, budget, |m| m.extend(appends.iter().cloned()))
        {
            resp.body = nb;
            return resp;
        }
        // Could not append: abstain from the session.
        if let Some(e) = self.flows.get_mut(&key) {
            if matches!(e.phase, Phase::Pending) {
                e.phase = Phase::Declined;
            }
        }
        resp
    }

    fn process_down_record(
        &mut self,
        key: FlowKey,
        mut pkt: Packet,
        rec: DownRecord,
        reg: &PortRegistry,
    ) -> Forwarded {
        let my_id = self.cfg.box_id;
        let entry = self.flows.get_mut(&key).expect("flow ensured");
        let Phase::Ready(state) = &mut entry.phase else {
            self.audit.passthrough += 1;
            pkt.payload = rec.into_payload();
            return self.finish_down(key, pkt, reg);
        };
        if state.terminated {
            self.audit.drops += 1;
            return Forwarded::Drop("flow terminated");
        }
        if state.down.is_none() {
            self.audit.passthrough += 1;
            pkt.payload = rec.into_payload();
            return self.finish_down(key, pkt, reg);
        }
        state.packet_seq += 1;
        let seq = state.packet_seq;
        let down = state.down.as_mut().expect("checked above");
        let plaintext = match (&mut down.inp, rec) {
            (DownIn::Key(recv), DownRecord::Sealed(r)) => match recv.open_next(&r) {
                Ok(pt) => pt,
                Err(_) => {
                    self.audit.seal_open_fail += 1;
                    self.audit.drops += 1;
                    return Forwarded::Drop("authentication failure");
                }
            },
            (DownIn::Plain, DownRecord::Plain(b)) => b,
            // Shape mismatch (degraded direction): pass through untouched.
            (_, other) => {
                self.audit.passthrough += 1;
                pkt.payload = other.into_payload();
                return self.finish_down(key, pkt, reg);
            }
        };
        let ctx = FlowContext { direction: Direction::Down, packet_index: seq };
        let (alerts, terminate) =
            Self::run_chain(&mut self.audit, my_id, &down.chain, &plaintext, &ctx);
        if !alerts.is_empty() {
            self.audit.alerts_emitted += alerts.len() as u64;
            for a in &alerts {
                let sealed = state.alert_send.seal_next(&a.encode());
                entry.alerts_down.push(sealed);
            }
        }
        if terminate {
            state.terminated = true;
            self.audit.drops += 1;
            return Forwarded::Drop("terminate verdict");
        }
        let down = state.down.as_mut().expect("checked above");
        pkt.payload = PacketPayload::Sealed(down.send.seal_next(&plaintext));
        self.finish_down(key, pkt, reg)
    }

    /// Port restoration and alert attachment before downstream egress.
    fn finish_down(&mut self, key: FlowKey, mut pkt: Packet, reg: &PortRegistry) -> Forwarded {
        let my_id = self.cfg.box_id;
        if let Some(entry) = self.flows.get_mut(&key) {
            pkt.hdr = rewrite_downstream(&pkt.hdr, &entry.ports);
            for rec in entry.alerts_down.drain(..) {
                pkt.alerts.push((my_id, rec));
            }
        } else if let Ok(hdr) = rewrite_downstream_from_ts(&pkt.hdr, reg) {
            pkt.hdr = hdr;
        }
        Forwarded::Forward(pkt)
    }

    /// Queued client-bound alerts, for synthesizing an alert-only packet when
    /// a terminate verdict stopped the flow.
    pub fn drain_alerts_down(&mut self, key: &FlowKey) -> Vec<(u32, SealedRecord)> {
        let my_id = self.cfg.box_id;
        match self.flows.get_mut(key) {
            Some(e) => e.alerts_down.drain(..).map(|r| (my_id, r)).collect(),
            None => Vec::new(),
        }
    }

    /// Restored port state for a known flow.
    pub fn flow_ports(&self, key: &FlowKey) -> Option<FlowPortState> {
        self.flows.get(key).map(|e| e.ports)
    }

    pub fn flow_is_ready(&self, key: &FlowKey) -> bool {
        matches!(self.flows.get(key).map(|e| &e.phase), Some(Phase::Ready(_)))
    }

    /// Ports restored for downstream packets of a known flow, as the client
    /// side must observe them.
    pub fn addr_of(key: &FlowKey) -> (Addr, Addr, Port) {
        *key
    }
}

enum DownRecord {
    Sealed(SealedRecord),
    Plain(Vec<u8>),
}

impl DownRecord {
    fn into_payload(self) -> PacketPayload {
        match self {
            DownRecord::Sealed(r) => PacketPayload::Sealed(r),
            DownRecord::Plain(b) => PacketPayload::Plain(b),
        }
    }
}
