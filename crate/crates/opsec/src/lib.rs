//! On-path security function outsourcing for web sessions.
//!
//! A client opens an ordinary HTTP GET toward a server and embeds tagged
//! protocol messages in the URL path. Willing ISPs on the path run boxes that
//! recognize the messages, announce the security functions they can host, and
//! get selected by the client — all in two end-to-end rounds, with no change
//! to the server and no new routing primitives: legacy edge routers redirect
//! the traffic purely by TCP port numbers, and servers ferry messages to
//! downstream parties by reflecting requested URLs and TCP timestamps.
//!
//! Module map:
//!
//! * [`wire`] — message framing and URL-path embedding
//! * [`payload`] — typed payload schemas for the six message types
//! * [`keys`] — key material, per-hop channels, transcript signatures, the
//!   mock attestation authority
//! * [`portplan`] — the Opsec port set, packet classification, port
//!   re-arrangement, timestamp packing
//! * [`sf`] — security-function identities and the pluggable functions
//! * [`client`] — the client session state machine
//! * [`obox`] — the Opsec-box state machine
//! * [`origin`] — the oblivious legacy web server emulator
//! * [`netsim`] — the seeded discrete-event simulator tying it all together

pub mod client;
pub mod keys;
pub mod netsim;
pub mod obox;
pub mod origin;
pub mod payload;
pub mod pkt;
pub mod portplan;
pub mod sf;
pub mod wire;
