//! The wire-observable unit the simulator moves between hops.
//!
//! Protocol components (boxes, the origin) act only on the header and
//! payload. `flow_tag` exists for metrics and invariant assertions in the
//! harness; protocol logic never branches on it.

use crate::keys::SealedRecord;
use crate::origin::HttpResponse;
use crate::portplan::PacketHeader;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PacketPayload {
    TcpSyn,
    TcpSynAck,
    TcpAck,
    /// Plaintext GET request line (handshake rounds and last-hop emission).
    HttpGet { path: String },
    /// Plaintext response (handshake reflections and last-hop emission).
    HttpResponse(HttpResponse),
    /// Hop-sealed application record.
    Sealed(SealedRecord),
    /// Plaintext application record.
    Plain(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub hdr: PacketHeader,
    pub payload: PacketPayload,
    /// Sealed alert records riding toward the client, tagged by box id.
    pub alerts: Vec<(u32, SealedRecord)>,
    /// Simulator bookkeeping only.
    pub flow_tag: u64,
    /// Simulator bookkeeping only: plaintext size of the application record
    /// inside, for conservation accounting at drop sites.
    pub data_len: u32,
}

impl Packet {
    pub fn new(hdr: PacketHeader, payload: PacketPayload, flow_tag: u64) -> Self {
        Self { hdr, payload, alerts: Vec::new(), flow_tag, data_len: 0 }
    }

    /// Application request line for a GET toward `path`.
    pub fn request_line(path: &str) -> Vec<u8> {
        format!("GET {path} HTTP/1.1").into_bytes()
    }

    /// Parses a request line back into its path.
    pub fn parse_request_line(bytes: &[u8]) -> Option<String> {
        let text = std::str::from_utf8(bytes).ok()?;
        let rest = text.strip_prefix("GET ")?;
        let path = rest.split(' ').next()?;
        Some(path.to_string())
    }
}

/// Canonical byte form of a response, used as the sealed plaintext on the
/// downstream chain. Timestamps ride in the packet header, not here.
pub fn encode_response(r: &HttpResponse) -> Vec<u8> {
    let mut out = r.status.to_be_bytes().to_vec();
    match &r.location {
        Some(l) => {
            out.push(1);
            out.extend_from_slice(&(l.len() as u32).to_be_bytes());
            out.extend_from_slice(l.as_bytes());
        }
        None => out.push(0),
    }
    out.push(r.closes as u8);
    out.extend_from_slice(&(r.body.len() as u32).to_be_bytes());
    out.extend_from_slice(r.body.as_bytes());
    out
}

pub fn decode_response(raw: &[u8], ts_ecr: u32) -> Option<HttpResponse> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Option<&[u8]> {
        let end = pos.checked_add(n)?;
        if end > raw.len() {
            return None;
        }
        let s = &raw[*pos..end];
        *pos = end;
        Some(s)
    };
    let status = u16::from_be_bytes(take(&mut pos, 2)?.try_into().unwrap());
    let has_loc = take(&mut pos, 1)?[0];
    let location = if has_loc == 1 {
        let n = u32::from_be_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        Some(String::from_utf8(take(&mut pos, n)?.to_vec()).ok()?)
    } else if has_loc == 0 {
        None
    } else {
        return None;
    };
    let closes = match take(&mut pos, 1)?[0] {
        0 => false,
        1 => true,
        _ => return None,
    };
    let n = u32::from_be_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let body = String::from_utf8(take(&mut pos, n)?.to_vec()).ok()?;
    if pos != raw.len() {
        return None;
    }
    Some(HttpResponse { status, location, body, ts_ecr, closes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_line_round_trip() {
        let line = Packet::request_line("/.opsec/AbC");
        assert_eq!(Packet::parse_request_line(&line).as_deref(), Some("/.opsec/AbC"));
        assert_eq!(Packet::parse_request_line(b"POST /x HTTP/1.1"), None);
        assert_eq!(Packet::parse_request_line(&[0xFF, 0xFE]), None);
    }

    #[test]
    fn response_round_trip() {
        let r = HttpResponse {
            status: 301,
            location: Some("https://h/.opsec/Zm9v".into()),
            body: "".into(),
            ts_ecr: 99,
            closes: true,
        };
        assert_eq!(decode_response(&encode_response(&r), 99).unwrap(), r);

        let r2 = HttpResponse {
            status: 404,
            location: None,
            body: "not found".into(),
            ts_ecr: 0,
            closes: false,
        };
        assert_eq!(decode_response(&encode_response(&r2), 0).unwrap(), r2);
        assert_eq!(decode_response(b"zz", 0), None);
    }
}
