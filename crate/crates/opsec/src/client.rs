//! The client session state machine: chain specification, the two-round
//! handshake, function-to-box assignment, master-secret distribution,
//! application data exchange, and alert handling.
//!
//! One session is one flow. The client embeds OpsecHello+ServDisc in the
//! round-1 GET path, reads box replies out of the server's reflected
//! response, assigns each requested function to the first willing verified
//! box in path order, seals one master secret (plus relay duties) per
//! selected box into ServReq, and checks every box's ObReady signature over
//! the exact ServDisc/ServReq bytes it retained. Tampering anywhere in the
//! middle shows up as a signature mismatch and aborts the session under
//! every policy.

use std::collections::BTreeMap;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha12Rng;

use crate::keys::{
    asym_seal, derive_master_secret, derive_session_keys, verify_quote, verify_transcript,
    HopChannel, KeyPair, Nonce, PublicPart, RecvStream, SealedRecord, SendStream,
    ALERT_COUNTER_BASE, MASTER_SECRET_LEN,
};
use crate::origin::HttpResponse;
use crate::payload::{
    AlertRecord, AppendLeg, Assignment, BoxGrant, DownDuty, ObHelloPayload, ObReadyPayload,
    OpsecHelloPayload, ServAnnPayload, ServDiscPayload, ServReqPayload, UpDuty,
};
use crate::pkt::{decode_response, Packet, PacketPayload};
use crate::portplan::{pack_ts, Addr, Port, PortRegistry};
use crate::sf::{Coverage, Direction, SfcSpec, SfId};
use crate::wire::{self, MessageType, OpsecMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailMode {
    /// Proceed unprotected when protection cannot be arranged (loudly).
    FailOpen,
    /// Abort instead.
    FailClosed,
}

/// The one assignment rule: first willing verified box in path order
/// (client-nearest first upstream, server-nearest first downstream).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentRule {
    #[default]
    FirstWillingInPathOrder,
}

#[derive(Debug, Clone)]
pub struct SessionPolicy {
    pub assignment_rule: AssignmentRule,
    pub fail_mode: FailMode,
    pub path_budget: usize,
}

impl Default for SessionPolicy {
    fn default() -> Self {
        Self {
            assignment_rule: AssignmentRule::FirstWillingInPathOrder,
            fail_mode: FailMode::FailOpen,
            path_budget: wire::DEFAULT_PATH_BUDGET,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    Idle,
    AwaitResponse1,
    AwaitResponse2,
    Ready,
    Aborted,
    Terminated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortReason {
    PathBudgetExceeded,
    NoWillingBox,
    TranscriptTampered,
    Timeout,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ClientError {
    #[error("session not ready")]
    SessionNotReady,
    #[error("response received in state {0:?}")]
    WrongState(SessionState),
}

#[derive(Debug, Clone)]
pub struct Target {
    pub server_addr: Addr,
    pub listen_port: Port,
    pub tls_like: bool,
}

/// What the state machine asks the driver to do next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientStep {
    /// Emit a GET for this path on the session's Opsec connection.
    SendGet(String),
    /// Handshake complete.
    Ready,
    Aborted(AbortReasonTag),
}

pub type AbortReasonTag = AbortReason;

#[derive(Debug, Clone)]
struct DiscoveredBox {
    box_id: u32,
    public: PublicPart,
    nonce: Nonce,
    coverage: Coverage,
    leg: AppendLeg,
    announced: Vec<[u8; 32]>,
}

/// One Opsec client session.
pub struct ClientSession {
    pub id: u64,
    state: SessionState,
    abort_reason: Option<AbortReason>,
    pub client_addr: Addr,
    /// The client's own source port (pre-NAT p_c).
    pub local_port: Port,
    pub target: Target,
    /// Client-chosen Opsec destination port, when the session uses Opsec.
    pub p_star: Option<Port>,
    sfc: SfcSpec,
    policy: SessionPolicy,
    keypair: KeyPair,
    client_nonce: Nonce,
    authority_public: PublicPart,
    discovered: Vec<DiscoveredBox>,
    assignments: Vec<Assignment>,
    /// Relay order client→server.
    up_chain: Vec<u32>,
    /// Relay order server→client (server-nearest first).
    down_chain: Vec<u32>,
    channels: BTreeMap<u32, HopChannel>,
    alert_recv: BTreeMap<u32, RecvStream>,
    servdisc_bytes: Vec<u8>,
    servreq_bytes: Vec<u8>,
    content_master: Option<[u8; MASTER_SECRET_LEN]>,
    content_send: Option<SendStream>,
    content_recv: Option<RecvStream>,
    /// Alerts surfaced to the user.
    pub alerts: Vec<AlertRecord>,
    pub spoofed_alerts: u64,
    pub recv_failures: u64,
    pub rounds_completed: u32,
    rng: ChaCha12Rng,
}

impl ClientSession {
    /// Starts a session. Returns the round-1 GET path, or `None` when the
    /// chain is empty and the session proceeds as a plain web session.
    #[allow(clippy::too_many_arguments)]
    pub fn begin_session(
        id: u64,
        client_addr: Addr,
        local_port: Port,
        target: Target,
        sfc: SfcSpec,
        policy: SessionPolicy,
        registry: &PortRegistry,
        authority_public: PublicPart,
        mut rng: ChaCha12Rng,
    ) -> (Self, Option<String>) {
        let keypair = KeyPair::generate(&mut rng);
        let client_nonce = Nonce::generate(&mut rng);
        let content_master = target.tls_like.then(|| {
            let mut m = [0u8; MASTER_SECRET_LEN];
            rng.fill_bytes(&mut m);
            m
        });
        let mut session = Self {
            id,
            state: SessionState::Idle,
            abort_reason: None,
            client_addr,
            local_port,
            target,
            p_star: None,
            sfc,
            policy,
            keypair,
            client_nonce,
            authority_public,
            discovered: Vec::new(),
            assignments: Vec::new(),
            up_chain: Vec::new(),
            down_chain: Vec::new(),
            channels: BTreeMap::new(),
            alert_recv: BTreeMap::new(),
            servdisc_bytes: Vec::new(),
            servreq_bytes: Vec::new(),
            content_master,
            content_send: None,
            content_recv: None,
            alerts: Vec::new(),
            spoofed_alerts: 0,
            recv_failures: 0,
            rounds_completed: 0,
            rng,
        };
        if session.sfc.is_empty() {
            // Nothing requested: plain session, no Opsec GET.
            session.finish_handshake();
            return (session, None);
        }
        // Choose p* uniformly among the set's ports bound to the target.
        let eligible = registry.ports_for(session.target.listen_port);
        if eligible.is_empty() {
            // The registry cannot signal this service; plain session.
            session.finish_handshake();
            return (session, None);
        }
        let p_star = eligible[session.rng.random_range(0..eligible.len())];
        session.p_star = Some(p_star);

        let hello = OpsecMessage::new(
            MessageType::OpsecHello,
            wire::CLIENT_BOX_ID,
            OpsecHelloPayload {
                client_public: session.keypair.public_part().clone(),
                client_nonce: session.client_nonce,
            }
            .encode(),
        );
        let mut entries: Vec<(Direction, SfId)> = Vec::new();
        entries.extend(session.sfc.sfc_up.iter().map(|id| (Direction::Up, *id)));
        entries.extend(session.sfc.sfc_down.iter().map(|id| (Direction::Down, *id)));
        let servdisc = OpsecMessage::new(
            MessageType::ServDisc,
            wire::CLIENT_BOX_ID,
            ServDiscPayload { entries }.encode(),
        );
        session.servdisc_bytes = wire::encode_message(&servdisc).expect("payload fits");

        match wire::embed_in_path(&[hello, servdisc]) {
            Ok(path) if path.len() <= session.policy.path_budget => {
                session.state = SessionState::AwaitResponse1;
                (session, Some(path))
            }
            _ => {
                session.abort(AbortReason::PathBudgetExceeded);
                (session, None)
            }
        }
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn abort_reason(&self) -> Option<AbortReason> {
        self.abort_reason
    }

    pub fn assignments(&self) -> &[Assignment] {
        &self.assignments
    }

    pub fn uses_opsec_ports(&self) -> bool {
        self.p_star.is_some()
    }

    /// Destination port for the session's packets.
    pub fn dst_port(&self) -> Port {
        self.p_star.unwrap_or(self.target.listen_port)
    }

    /// Timestamp value the client stamps on every packet of an Opsec flow.
    pub fn ts_val(&self) -> u32 {
        match self.p_star {
            Some(p) => pack_ts(p, self.local_port),
            None => 1,
        }
    }

    /// Content-key directional material for a TLS-like origin (the simulator
    /// hands this to the origin as the stand-in for the TLS handshake).
    pub fn content_keys(&self) -> Option<([u8; 32], [u8; 32])> {
        self.content_master
            .as_ref()
            .map(|m| derive_session_keys(m, &self.client_nonce, &Nonce([0u8; 32])))
    }

    fn abort(&mut self, reason: AbortReason) {
        self.state = SessionState::Aborted;
        self.abort_reason = Some(reason);
    }

    fn finish_handshake(&mut self) {
        if self.target.tls_like && self.up_chain.is_empty() {
            let (ck_up, _) = self.content_keys().expect("tls target has content keys");
            self.content_send = Some(SendStream::new(ck_up));
        }
        if self.target.tls_like && self.down_chain.is_empty() {
            let (_, ck_down) = self.content_keys().expect("tls target has content keys");
            self.content_recv = Some(RecvStream::new(ck_down));
        }
        self.state = SessionState::Ready;
    }

    /// Handles the reflected round-1 response: discovery, verification,
    /// assignment, and ServReq construction.
    pub fn on_response_1(&mut self, resp: &HttpResponse) -> Result<ClientStep, ClientError> {
        if self.state != SessionState::AwaitResponse1 {
            return Err(ClientError::WrongState(self.state));
        }
        self.rounds_completed += 1;
        let text = resp.reflected_text();
        let msgs = wire::extract_from_path(&text);

        // Pair each verified ObHello with the ServAnn hashes its box sent.
        for (i, m) in msgs.iter().enumerate() {
            if m.msg_type != MessageType::ObHello {
                continue;
            }
            let Ok(hello) = ObHelloPayload::decode(&m.payload) else { continue };
            if hello.quote.box_identity != m.box_id
                || !verify_quote(&self.authority_public, &hello.quote)
            {
                // Quote does not verify: the box simply is not a candidate.
                continue;
            }
            let announced: Vec<[u8; 32]> = msgs[i..]
                .iter()
                .filter(|a| a.msg_type == MessageType::ServAnn && a.box_id == m.box_id)
                .filter_map(|a| ServAnnPayload::decode(&a.payload).ok())
                .flat_map(|p| p.hashes)
                .collect();
            self.discovered.push(DiscoveredBox {
                box_id: m.box_id,
                public: hello.box_public,
                nonce: hello.box_nonce,
                coverage: hello.coverage,
                leg: hello.leg,
                announced,
            });
        }

        // Candidate orders. Upstream: request-leg arrival order is path order
        // (client-nearest first). Downstream: response-leg appenders arrive
        // server-nearest first and come first; request-leg (both-coverage)
        // appenders follow in reverse arrival order.
        let up_candidates: Vec<&DiscoveredBox> = self
            .discovered
            .iter()
            .filter(|b| b.leg == AppendLeg::Request && b.coverage.covers(Direction::Up))
            .collect();
        let mut down_candidates: Vec<&DiscoveredBox> = self
            .discovered
            .iter()
            .filter(|b| b.leg == AppendLeg::Response && b.coverage.covers(Direction::Down))
            .collect();
        down_candidates.extend(
            self.discovered
                .iter()
                .rev()
                .filter(|b| b.leg == AppendLeg::Request && b.coverage.covers(Direction::Down)),
        );

        let mut assignments = Vec::new();
        let mut unassigned = 0usize;
        let AssignmentRule::FirstWillingInPathOrder = self.policy.assignment_rule;
        for (dir, chain, candidates) in [
            (Direction::Up, &self.sfc.sfc_up, &up_candidates),
            (Direction::Down, &self.sfc.sfc_down, &down_candidates),
        ] {
            for sf_id in chain {
                let want = sf_id.announce_hash();
                match candidates.iter().find(|b| b.announced.contains(&want)) {
                    Some(b) => assignments.push(Assignment {
                        direction: dir,
                        sf_id: *sf_id,
                        box_id: b.box_id,
                    }),
                    None => unassigned += 1,
                }
            }
        }
        if unassigned > 0 && self.policy.fail_mode == FailMode::FailClosed {
            self.abort(AbortReason::NoWillingBox);
            return Ok(ClientStep::Aborted(AbortReason::NoWillingBox));
        }

        // Relay chains in traversal order.
        self.up_chain = up_candidates
            .iter()
            .filter(|b| {
                assignments
                    .iter()
                    .any(|a| a.box_id == b.box_id && a.direction == Direction::Up)
            })
            .map(|b| b.box_id)
            .collect();
        self.down_chain = down_candidates
            .iter()
            .filter(|b| {
                assignments
                    .iter()
                    .any(|a| a.box_id == b.box_id && a.direction == Direction::Down)
            })
            .map(|b| b.box_id)
            .collect();
        self.assignments = assignments;

        // One master secret per selected box, derived from the agreed
        // entropy and both nonces, then sealed to that box alone.
        let selected: Vec<u32> = {
            let mut v: Vec<u32> = self.assignments.iter().map(|a| a.box_id).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        for box_id in &selected {
            let b = self.discovered.iter().find(|d| d.box_id == *box_id).expect("assigned box");
            let entropy = self.keypair.agree(&b.public).expect("well-formed public part");
            let master = derive_master_secret(&self.client_nonce, &b.nonce, &entropy)
                .expect("nonempty entropy");
            self.channels.insert(*box_id, HopChannel::new(master, self.client_nonce, b.nonce));
        }

        let (ck_up, ck_down) = match self.content_keys() {
            Some(pair) => (Some(pair.0), Some(pair.1)),
            None => (None, None),
        };
        let mut sealed_grants = Vec::with_capacity(selected.len());
        for box_id in &selected {
            let on_up = self.up_chain.iter().position(|b| b == box_id);
            let on_down = self.down_chain.iter().position(|b| b == box_id);
            let up = on_up.map(|i| UpDuty {
                next_key: self.up_chain.get(i + 1).map(|n| self.channels[n].key_up),
                content_key: if i + 1 == self.up_chain.len() { ck_up } else { None },
            });
            let down = on_down.map(|j| DownDuty {
                prev_key: (j > 0).then(|| self.channels[&self.down_chain[j - 1]].key_down),
                content_key: if j == 0 { ck_down } else { None },
            });
            let grant = BoxGrant {
                master_secret: self.channels[box_id].master_secret,
                up,
                down,
            };
            let b = self.discovered.iter().find(|d| d.box_id == *box_id).expect("assigned box");
            sealed_grants.push((*box_id, asym_seal(&b.public, &grant.encode(), &mut self.rng)));
        }

        let servreq = OpsecMessage::new(
            MessageType::ServReq,
            wire::CLIENT_BOX_ID,
            ServReqPayload { assignments: self.assignments.clone(), sealed_grants }.encode(),
        );
        self.servreq_bytes = wire::encode_message(&servreq).expect("payload fits");
        match wire::embed_in_path(std::slice::from_ref(&servreq)) {
            Ok(path) if path.len() <= self.policy.path_budget => {
                self.state = SessionState::AwaitResponse2;
                Ok(ClientStep::SendGet(path))
            }
            _ => {
                self.abort(AbortReason::PathBudgetExceeded);
                Ok(ClientStep::Aborted(AbortReason::PathBudgetExceeded))
            }
        }
    }

    /// Handles the reflected round-2 response: ObReady verification and
    /// session-key activation.
    pub fn on_response_2(&mut self, resp: &HttpResponse) -> Result<ClientStep, ClientError> {
        if self.state != SessionState::AwaitResponse2 {
            return Err(ClientError::WrongState(self.state));
        }
        self.rounds_completed += 1;
        let text = resp.reflected_text();
        let msgs = wire::extract_from_path(&text);

        let mut ready_boxes: Vec<u32> = Vec::new();
        for m in &msgs {
            if m.msg_type != MessageType::ObReady {
                continue;
            }
            let Ok(payload) = ObReadyPayload::decode(&m.payload) else { continue };
            match payload {
                ObReadyPayload::Ready { transcript_signature } => {
                    let Some(b) = self.discovered.iter().find(|d| d.box_id == m.box_id) else {
                        continue;
                    };
                    if !self.channels.contains_key(&m.box_id) {
                        continue; // not one of ours
                    }
                    if verify_transcript(
                        &b.public,
                        &self.servdisc_bytes,
                        &self.servreq_bytes,
                        &transcript_signature,
                    ) {
                        ready_boxes.push(m.box_id);
                    } else {
                        // Integrity violation is never fail-open.
                        self.abort(AbortReason::TranscriptTampered);
                        return Ok(ClientStep::Aborted(AbortReason::TranscriptTampered));
                    }
                }
                ObReadyPayload::Alert { record } => self.on_alert(m.box_id, &record),
            }
        }

        let silent: Vec<u32> = self
            .channels
            .keys()
            .copied()
            .filter(|b| !ready_boxes.contains(b))
            .collect();
        if !silent.is_empty() {
            if self.policy.fail_mode == FailMode::FailClosed {
                self.abort(AbortReason::NoWillingBox);
                return Ok(ClientStep::Aborted(AbortReason::NoWillingBox));
            }
            // A silent box voids its assignments; the relay chain it sat on
            // cannot operate without it, so that direction degrades to the
            // unprotected form.
            if silent.iter().any(|b| self.up_chain.contains(b)) {
                let voided = self.up_chain.clone();
                self.assignments
                    .retain(|a| !(a.direction == Direction::Up && voided.contains(&a.box_id)));
                self.up_chain.clear();
            }
            if silent.iter().any(|b| self.down_chain.contains(b)) {
                let voided = self.down_chain.clone();
                self.assignments
                    .retain(|a| !(a.direction == Direction::Down && voided.contains(&a.box_id)));
                self.down_chain.clear();
            }
        }

        for (box_id, ch) in &self.channels {
            self.alert_recv
                .insert(*box_id, RecvStream::with_base(ch.key_down, ALERT_COUNTER_BASE));
        }
        self.finish_handshake();
        Ok(ClientStep::Ready)
    }

    /// No response arrived in time (dropped Opsec packets, refused port,
    /// no-reflection origin with nothing coming back).
    pub fn on_timeout(&mut self) -> ClientStep {
        match (self.state, self.policy.fail_mode) {
            (SessionState::AwaitResponse1 | SessionState::AwaitResponse2, FailMode::FailOpen) => {
                // Proceed unprotected on legacy ports.
                self.p_star = None;
                self.assignments.clear();
                self.up_chain.clear();
                self.down_chain.clear();
                self.channels.clear();
                self.finish_handshake();
                ClientStep::Ready
            }
            (SessionState::AwaitResponse1 | SessionState::AwaitResponse2, FailMode::FailClosed) => {
                self.abort(AbortReason::Timeout);
                ClientStep::Aborted(AbortReason::Timeout)
            }
            _ => ClientStep::Ready,
        }
    }

    /// Seals (or passes through) one application record toward the server.
    pub fn send_app_data(&mut self, plaintext: &[u8]) -> Result<PacketPayload, ClientError> {
        if self.state != SessionState::Ready {
            return Err(ClientError::SessionNotReady);
        }
        if let Some(first) = self.up_chain.first().copied() {
            let rec = self.channels.get_mut(&first).expect("channel exists").seal_up(plaintext);
            return Ok(PacketPayload::Sealed(rec));
        }
        if let Some(stream) = self.content_send.as_mut() {
            return Ok(PacketPayload::Sealed(stream.seal_next(plaintext)));
        }
        match Packet::parse_request_line(plaintext) {
            Some(path) => Ok(PacketPayload::HttpGet { path }),
            None => Ok(PacketPayload::Plain(plaintext.to_vec())),
        }
    }

    /// Opens one arriving application response and surfaces embedded alerts.
    /// Returns `None` when the record fails authentication (counted).
    pub fn open_response(&mut self, payload: &PacketPayload, ts_ecr: u32) -> Option<HttpResponse> {
        let resp = match payload {
            PacketPayload::HttpResponse(r) => Some(r.clone()),
            PacketPayload::Plain(bytes) => decode_response(bytes, ts_ecr),
            PacketPayload::Sealed(rec) => {
                let opened = if let Some(last) = self.down_chain.last().copied() {
                    self.channels.get_mut(&last).expect("channel exists").open_down(rec).ok()
                } else if let Some(stream) = self.content_recv.as_mut() {
                    stream.open_next(rec).ok()
                } else {
                    None
                };
                match opened {
                    Some(pt) => decode_response(&pt, ts_ecr),
                    None => {
                        self.recv_failures += 1;
                        return None;
                    }
                }
            }
            _ => None,
        }?;
        // Alerts delivered over the reflection path ride in the response text.
        for m in wire::extract_from_path(&resp.reflected_text()) {
            if m.msg_type == MessageType::ObReady {
                if let Ok(ObReadyPayload::Alert { record }) = ObReadyPayload::decode(&m.payload) {
                    self.on_alert(m.box_id, &record);
                }
            }
        }
        Some(resp)
    }

    /// Handles one sealed alert record from a box.
    pub fn on_alert(&mut self, from_box: u32, record: &SealedRecord) {
        let Some(stream) = self.alert_recv.get_mut(&from_box) else {
            self.spoofed_alerts += 1;
            return;
        };
        let Ok(bytes) = stream.open_next(record) else {
            self.spoofed_alerts += 1;
            return;
        };
        let Ok(alert) = AlertRecord::decode(&bytes) else {
            self.spoofed_alerts += 1;
            return;
        };
        let terminate = alert.terminate;
        self.alerts.push(alert);
        if terminate && self.state == SessionState::Ready {
            self.state = SessionState::Terminated;
        }
    }
}
