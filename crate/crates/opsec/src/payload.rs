//! Typed payload schemas for the six message types. All variable-width fields
//! are length-prefixed; multi-octet integers are big-endian.
//!
//! * OpsecHello — client public part + client nonce
//! * ServDisc   — direction-tagged list of requested function ids
//! * ObHello    — box public part, box nonce, coverage, leg tag, quote
//! * ServAnn    — announce hashes for the requested functions the box hosts
//! * ServReq    — (direction, function, box) assignments + per-box sealed grants
//! * ObReady    — kind tag 0: transcript signature; kind tag 1: sealed alert
//!   record (the only box-to-client message type, so alert records delivered
//!   via the URL-reflection path ride in it too)

use crate::keys::{AttestationQuote, Nonce, PublicPart, SealedRecord, MASTER_SECRET_LEN, NONCE_LEN, SESSION_KEY_LEN};
use crate::sf::{Coverage, Direction, SfId};
use crate::wire::WireError;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(e) => {
                let s = &self.buf[self.pos..e];
                self.pos = e;
                Ok(s)
            }
            None => Err(WireError::MalformedPayload(self.what)),
        }
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn bytes16(&mut self) -> Result<Vec<u8>, WireError> {
        let n = self.u16()? as usize;
        Ok(self.take(n)?.to_vec())
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn done(&self) -> Result<(), WireError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(WireError::MalformedPayload(self.what))
        }
    }
}

fn put16(out: &mut Vec<u8>, bytes: &[u8]) {
    debug_assert!(bytes.len() <= u16::MAX as usize);
    out.extend_from_slice(&(bytes.len() as u16).to_be_bytes());
    out.extend_from_slice(bytes);
}

/// Beacon: client public part + nonce for key generation and return-message
/// encryption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpsecHelloPayload {
    pub client_public: PublicPart,
    pub client_nonce: Nonce,
}

impl OpsecHelloPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put16(&mut out, &self.client_public.0);
        out.extend_from_slice(&self.client_nonce.0);
        out
    }

    pub fn decode(raw: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(raw, "OpsecHello");
        let public = r.bytes16()?;
        let nonce = r.array::<NONCE_LEN>()?;
        r.done()?;
        Ok(Self { client_public: PublicPart(public), client_nonce: Nonce(nonce) })
    }
}

/// Requested security functions, direction-tagged, in chain order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServDiscPayload {
    pub entries: Vec<(Direction, SfId)>,
}

impl ServDiscPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = (self.entries.len() as u16).to_be_bytes().to_vec();
        for (d, id) in &self.entries {
            out.push(d.tag());
            out.extend_from_slice(&id.0);
        }
        out
    }

    pub fn decode(raw: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(raw, "ServDisc");
        let n = r.u16()? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let d = Direction::from_tag(r.u8()?).ok_or(WireError::MalformedPayload("ServDisc"))?;
            entries.push((d, SfId(r.array::<32>()?)));
        }
        r.done()?;
        Ok(Self { entries })
    }
}

/// Which leg of the round trip a box appended its hello on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppendLeg {
    Request,
    Response,
}

impl AppendLeg {
    fn tag(self) -> u8 {
        match self {
            AppendLeg::Request => 0,
            AppendLeg::Response => 1,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(AppendLeg::Request),
            1 => Some(AppendLeg::Response),
            _ => None,
        }
    }
}

/// Box hello: fresh public part, nonce, its path coverage, the leg it
/// appended on, and the attestation quote for its boilerplate code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObHelloPayload {
    pub box_public: PublicPart,
    pub box_nonce: Nonce,
    pub coverage: Coverage,
    pub leg: AppendLeg,
    pub quote: AttestationQuote,
}

impl ObHelloPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        put16(&mut out, &self.box_public.0);
        out.extend_from_slice(&self.box_nonce.0);
        out.push(self.coverage.tag());
        out.push(self.leg.tag());
        out.extend_from_slice(&self.quote.encode());
        out
    }

    pub fn decode(raw: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(raw, "ObHello");
        let public = r.bytes16()?;
        let nonce = r.array::<NONCE_LEN>()?;
        let coverage = Coverage::from_tag(r.u8()?).ok_or(WireError::MalformedPayload("ObHello"))?;
        let leg = AppendLeg::from_tag(r.u8()?).ok_or(WireError::MalformedPayload("ObHello"))?;
        let rest = r.take(raw.len() - r.pos)?;
        let (quote, used) =
            AttestationQuote::decode(rest).ok_or(WireError::MalformedPayload("ObHello"))?;
        if used != rest.len() {
            return Err(WireError::MalformedPayload("ObHello"));
        }
        Ok(Self { box_public: PublicPart(public), box_nonce: Nonce(nonce), coverage, leg, quote })
    }
}

/// Announce hashes for requested functions the box can host, request order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServAnnPayload {
    pub hashes: Vec<[u8; 32]>,
}

impl ServAnnPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = (self.hashes.len() as u16).to_be_bytes().to_vec();
        for h in &self.hashes {
            out.extend_from_slice(h);
        }
        out
    }

    pub fn decode(raw: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(raw, "ServAnn");
        let n = r.u16()? as usize;
        let mut hashes = Vec::with_capacity(n);
        for _ in 0..n {
            hashes.push(r.array::<32>()?);
        }
        r.done()?;
        Ok(Self { hashes })
    }
}

/// One confirmed (function → box) allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Assignment {
    pub direction: Direction,
    pub sf_id: SfId,
    pub box_id: u32,
}

/// Data-plane duties granted to one box, sealed to its public part inside
/// ServReq. Master secrets are per box; the single neighbor directional key a
/// box needs for its server-side segment comes along with them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoxGrant {
    pub master_secret: [u8; MASTER_SECRET_LEN],
    /// Present iff the box is on the upstream chain.
    pub up: Option<UpDuty>,
    /// Present iff the box is on the downstream chain.
    pub down: Option<DownDuty>,
}

/// Upstream duty: open records arriving on the client side with the box's own
/// up key, then seal toward the server side.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UpDuty {
    /// Up key of the next box toward the server; `None` on the last hop.
    pub next_key: Option<[u8; SESSION_KEY_LEN]>,
    /// On the last hop of a TLS-like session: seal toward the origin under
    /// this client-provided content key. `None` on the last hop means the
    /// origin speaks plaintext.
    pub content_key: Option<[u8; SESSION_KEY_LEN]>,
}

/// Downstream duty: open records arriving on the server side, then seal
/// toward the client with the box's own down key.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DownDuty {
    /// Down key of the previous box toward the server; `None` when this box
    /// is server-adjacent and reads the origin's output directly.
    pub prev_key: Option<[u8; SESSION_KEY_LEN]>,
    /// Server-adjacent + TLS-like: origin records are sealed under this key.
    pub content_key: Option<[u8; SESSION_KEY_LEN]>,
}

impl BoxGrant {
    pub fn encode(&self) -> Vec<u8> {
        let mut flags = 0u8;
        if self.up.is_some() {
            flags |= 1;
        }
        if self.up.as_ref().is_some_and(|u| u.next_key.is_some()) {
            flags |= 2;
        }
        if self.up.as_ref().is_some_and(|u| u.content_key.is_some()) {
            flags |= 4;
        }
        if self.down.is_some() {
            flags |= 8;
        }
        if self.down.as_ref().is_some_and(|d| d.prev_key.is_some()) {
            flags |= 16;
        }
        if self.down.as_ref().is_some_and(|d| d.content_key.is_some()) {
            flags |= 32;
        }
        let mut out = self.master_secret.to_vec();
        out.push(flags);
        if let Some(u) = &self.up {
            if let Some(k) = u.next_key {
                out.extend_from_slice(&k);
            }
            if let Some(k) = u.content_key {
                out.extend_from_slice(&k);
            }
        }
        if let Some(d) = &self.down {
            if let Some(k) = d.prev_key {
                out.extend_from_slice(&k);
            }
            if let Some(k) = d.content_key {
                out.extend_from_slice(&k);
            }
        }
        out
    }

    pub fn decode(raw: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(raw, "BoxGrant");
        let master_secret = r.array::<MASTER_SECRET_LEN>()?;
        let flags = r.u8()?;
        let mut key = |present: bool| -> Result<Option<[u8; SESSION_KEY_LEN]>, WireError> {
            if present {
                Ok(Some(r.array::<SESSION_KEY_LEN>()?))
            } else {
                Ok(None)
            }
        };
        let up = if flags & 1 != 0 {
            Some(UpDuty { next_key: key(flags & 2 != 0)?, content_key: key(flags & 4 != 0)? })
        } else {
            None
        };
        let down = if flags & 8 != 0 {
            Some(DownDuty { prev_key: key(flags & 16 != 0)?, content_key: key(flags & 32 != 0)? })
        } else {
            None
        };
        r.done()?;
        Ok(Self { master_secret, up, down })
    }
}

/// Final client message: assignments in the clear (integrity comes from the
/// ObReady transcript signature), sealed grants per selected box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServReqPayload {
    pub assignments: Vec<Assignment>,
    /// (box id, asym-sealed [`BoxGrant`]) — openable only by that box.
    pub sealed_grants: Vec<(u32, Vec<u8>)>,
}

impl ServReqPayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = (self.assignments.len() as u16).to_be_bytes().to_vec();
        for a in &self.assignments {
            out.push(a.direction.tag());
            out.extend_from_slice(&a.sf_id.0);
            out.extend_from_slice(&a.box_id.to_be_bytes());
        }
        out.extend_from_slice(&(self.sealed_grants.len() as u16).to_be_bytes());
        for (box_id, blob) in &self.sealed_grants {
            out.extend_from_slice(&box_id.to_be_bytes());
            put16(&mut out, blob);
        }
        out
    }

    pub fn decode(raw: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(raw, "ServReq");
        let n = r.u16()? as usize;
        let mut assignments = Vec::with_capacity(n);
        for _ in 0..n {
            let direction =
                Direction::from_tag(r.u8()?).ok_or(WireError::MalformedPayload("ServReq"))?;
            let sf_id = SfId(r.array::<32>()?);
            let box_id = r.u32()?;
            assignments.push(Assignment { direction, sf_id, box_id });
        }
        let m = r.u16()? as usize;
        let mut sealed_grants = Vec::with_capacity(m);
        for _ in 0..m {
            let box_id = r.u32()?;
            sealed_grants.push((box_id, r.bytes16()?));
        }
        r.done()?;
        Ok(Self { assignments, sealed_grants })
    }
}

/// An alert emitted by a security function, sealed box→client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlertRecord {
    pub box_id: u32,
    pub sf_id: SfId,
    pub reason: String,
    pub terminate: bool,
}

impl AlertRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.box_id.to_be_bytes().to_vec();
        out.extend_from_slice(&self.sf_id.0);
        out.push(self.terminate as u8);
        put16(&mut out, self.reason.as_bytes());
        out
    }

    pub fn decode(raw: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(raw, "AlertRecord");
        let box_id = r.u32()?;
        let sf_id = SfId(r.array::<32>()?);
        let terminate = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(WireError::MalformedPayload("AlertRecord")),
        };
        let reason = String::from_utf8(r.bytes16()?)
            .map_err(|_| WireError::MalformedPayload("AlertRecord"))?;
        r.done()?;
        Ok(Self { box_id, sf_id, reason, terminate })
    }
}

/// ObReady payload: readiness confirmation or an alert in transit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ObReadyPayload {
    /// Signed hash of the exact ServDisc and ServReq bytes the box saw.
    Ready { transcript_signature: Vec<u8> },
    /// A sealed [`AlertRecord`] delivered via the reflection path.
    Alert { record: SealedRecord },
}

impl ObReadyPayload {
    pub fn encode(&self) -> Vec<u8> {
        match self {
            ObReadyPayload::Ready { transcript_signature } => {
                let mut out = vec![0u8];
                put16(&mut out, transcript_signature);
                out
            }
            ObReadyPayload::Alert { record } => {
                let mut out = vec![1u8];
                put16(&mut out, &record.encode());
                out
            }
        }
    }

    pub fn decode(raw: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(raw, "ObReady");
        let kind = r.u8()?;
        let body = r.bytes16()?;
        r.done()?;
        match kind {
            0 => Ok(ObReadyPayload::Ready { transcript_signature: body }),
            1 => {
                let record =
                    SealedRecord::decode(&body).ok_or(WireError::MalformedPayload("ObReady"))?;
                Ok(ObReadyPayload::Alert { record })
            }
            _ => Err(WireError::MalformedPayload("ObReady")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::KeyPair;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn payload_round_trips() {
        let mut r = ChaCha12Rng::seed_from_u64(5);
        let kp = KeyPair::generate(&mut r);

        let hello = OpsecHelloPayload {
            client_public: kp.public_part().clone(),
            client_nonce: Nonce([3; 32]),
        };
        assert_eq!(OpsecHelloPayload::decode(&hello.encode()).unwrap(), hello);

        let disc = ServDiscPayload {
            entries: vec![
                (Direction::Up, SfId::from_name("a")),
                (Direction::Down, SfId::from_name("b")),
                (Direction::Up, SfId::from_name("a")), // duplicates are legal
            ],
        };
        assert_eq!(ServDiscPayload::decode(&disc.encode()).unwrap(), disc);

        let ann = ServAnnPayload {
            hashes: vec![SfId::from_name("a").announce_hash()],
        };
        assert_eq!(ServAnnPayload::decode(&ann.encode()).unwrap(), ann);

        let req = ServReqPayload {
            assignments: vec![Assignment {
                direction: Direction::Up,
                sf_id: SfId::from_name("a"),
                box_id: 7,
            }],
            sealed_grants: vec![(7, vec![1, 2, 3, 4])],
        };
        assert_eq!(ServReqPayload::decode(&req.encode()).unwrap(), req);

        let ready = ObReadyPayload::Ready { transcript_signature: vec![9; 64] };
        assert_eq!(ObReadyPayload::decode(&ready.encode()).unwrap(), ready);

        let alert = ObReadyPayload::Alert {
            record: SealedRecord { counter: 3, bytes: vec![0xEE; 20] },
        };
        assert_eq!(ObReadyPayload::decode(&alert.encode()).unwrap(), alert);
    }

    #[test]
    fn grant_flag_combinations_round_trip() {
        let grants = [
            BoxGrant { master_secret: [1; 48], up: None, down: None },
            BoxGrant {
                master_secret: [2; 48],
                up: Some(UpDuty { next_key: Some([5; 32]), content_key: None }),
                down: None,
            },
            BoxGrant {
                master_secret: [3; 48],
                up: Some(UpDuty { next_key: None, content_key: Some([6; 32]) }),
                down: Some(DownDuty { prev_key: None, content_key: Some([7; 32]) }),
            },
            BoxGrant {
                master_secret: [4; 48],
                up: None,
                down: Some(DownDuty { prev_key: Some([8; 32]), content_key: None }),
            },
        ];
        for g in grants {
            assert_eq!(BoxGrant::decode(&g.encode()).unwrap(), g);
        }
    }

    #[test]
    fn truncated_payloads_are_rejected() {
        let disc = ServDiscPayload {
            entries: vec![(Direction::Up, SfId::from_name("x"))],
        };
        let enc = disc.encode();
        for cut in 0..enc.len() {
            assert!(ServDiscPayload::decode(&enc[..cut]).is_err());
        }
        // Trailing junk is also rejected.
        let mut extended = enc.clone();
        extended.push(0);
        assert!(ServDiscPayload::decode(&extended).is_err());
    }

    #[test]
    fn alert_record_round_trip() {
        let a = AlertRecord {
            box_id: 12,
            sf_id: SfId::from_name("ids"),
            reason: "signature match: malware-sig-01".into(),
            terminate: false,
        };
        assert_eq!(AlertRecord::decode(&a.encode()).unwrap(), a);
    }
}
