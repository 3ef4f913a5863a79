//! Key material, per-hop secret derivation, transcript signatures, sealed
//! records, and the mock attestation authority.
//!
//! One fixed suite, no negotiation: Ed25519 signatures, ChaCha20-Poly1305
//! sealing, HKDF-SHA256 expansion, and a hybrid KEM over the RFC 2409 Oakley
//! group (768-bit MODP, g=2) for sealing master secrets to a box's public
//! part. The group size is simulation-grade; everything is a pure function of
//! its inputs plus an explicit RNG stream, so equal seeds give byte-identical
//! key material.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use rand::RngCore;
use ring::aead::{self, Aad, LessSafeKey, Nonce as AeadNonce, UnboundKey};
use ring::hkdf;
use ring::signature::{self, Ed25519KeyPair, KeyPair as _};

use crate::sf::Direction;

/// Master secret length (the TLS 1.2 lineage the handshake mirrors).
pub const MASTER_SECRET_LEN: usize = 48;
/// Directional session key length.
pub const SESSION_KEY_LEN: usize = 32;
/// Nonce length.
pub const NONCE_LEN: usize = 32;
/// Fixed suite identifier carried by every key pair.
pub const ALGORITHM_TAG: &str = "ed25519+ffdh768+chacha20poly1305+hkdf-sha256";

/// Alert records share the down key with data but live in the upper half of
/// the counter space so the two streams never collide on an AEAD nonce.
pub const ALERT_COUNTER_BASE: u64 = 1 << 63;

// RFC 2409 section 6.1, Oakley group 1 (768-bit MODP), generator 2.
const FFDH_PRIME_HEX: &str = concat!(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74",
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437",
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A63A3620FFFFFFFFFFFFFFFF",
);
const FFDH_PUBLIC_LEN: usize = 96;
const FFDH_EXPONENT_LEN: usize = 32;

fn ffdh_prime() -> &'static BigUint {
    use std::sync::OnceLock;
    static P: OnceLock<BigUint> = OnceLock::new();
    P.get_or_init(|| BigUint::parse_bytes(FFDH_PRIME_HEX.as_bytes(), 16).unwrap())
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum KeyError {
    /// Tampered record, wrong key, wrong counter, or undecodable blob.
    #[error("authentication failure")]
    AuthenticationFailure,

    /// A sealed-record counter was reused in one direction of a channel.
    #[error("replay detected: counter {0} already consumed")]
    ReplayDetected(u64),

    /// Master-secret derivation requires nonempty shared entropy.
    #[error("empty shared entropy")]
    EmptyEntropy,

    /// The attestation authority has no registration for this box.
    #[error("unknown identity: box {0}")]
    UnknownIdentity(u32),
}

/// 32-octet random value drawn from the simulation's seeded RNG.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Nonce(pub [u8; NONCE_LEN]);

impl Nonce {
    pub fn generate(rng: &mut impl RngCore) -> Self {
        let mut n = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut n);
        Self(n)
    }
}

/// Public half of a key pair: Ed25519 verify key followed by the FFDH public
/// value, fixed widths.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PublicPart(pub Vec<u8>);

impl PublicPart {
    fn ed(&self) -> Option<&[u8]> {
        self.0.get(..32)
    }

    fn kem(&self) -> Option<BigUint> {
        let raw = self.0.get(32..32 + FFDH_PUBLIC_LEN)?;
        Some(BigUint::from_bytes_be(raw))
    }

    pub fn fingerprint(&self) -> [u8; 8] {
        let d = sha256(&[b"opsec pub fp", &self.0]);
        d[..8].try_into().unwrap()
    }
}

/// A signing + sealing key pair under the repository's single suite.
#[derive(Clone)]
pub struct KeyPair {
    sign_seed: [u8; 32],
    kem_secret: BigUint,
    public: PublicPart,
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "KeyPair({}, {})", ALGORITHM_TAG, hex::encode(self.public.fingerprint()))
    }
}

fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

struct OkmLen(usize);

impl hkdf::KeyType for OkmLen {
    fn len(&self) -> usize {
        self.0
    }
}

fn hkdf_expand(salt: &[u8], ikm: &[u8], info: &[u8], out: &mut [u8]) {
    let prk = hkdf::Salt::new(hkdf::HKDF_SHA256, salt).extract(ikm);
    prk.expand(&[info], OkmLen(out.len()))
        .expect("output length within HKDF bounds")
        .fill(out)
        .expect("fill matches requested length");
}

fn be_fixed(v: &BigUint, width: usize) -> Vec<u8> {
    let raw = v.to_bytes_be();
    let mut out = vec![0u8; width - raw.len()];
    out.extend_from_slice(&raw);
    out
}

impl KeyPair {
    /// Deterministic given the RNG stream.
    pub fn generate(rng: &mut impl RngCore) -> Self {
        let mut sign_seed = [0u8; 32];
        rng.fill_bytes(&mut sign_seed);
        let mut exp = [0u8; FFDH_EXPONENT_LEN];
        rng.fill_bytes(&mut exp);
        let kem_secret = BigUint::from_bytes_be(&exp) | BigUint::from(1u32);
        let p = ffdh_prime();
        let kem_public = BigUint::from(2u32).modpow(&kem_secret, p);

        let ed = Ed25519KeyPair::from_seed_unchecked(&sign_seed).expect("32-byte seed");
        let mut public = ed.public_key().as_ref().to_vec();
        public.extend_from_slice(&be_fixed(&kem_public, FFDH_PUBLIC_LEN));
        Self { sign_seed, kem_secret, public: PublicPart(public) }
    }

    pub fn public_part(&self) -> &PublicPart {
        &self.public
    }

    pub fn algorithm_tag(&self) -> &'static str {
        ALGORITHM_TAG
    }

    fn signer(&self) -> Ed25519KeyPair {
        Ed25519KeyPair::from_seed_unchecked(&self.sign_seed).expect("32-byte seed")
    }

    pub fn sign(&self, msg: &[u8]) -> Vec<u8> {
        self.signer().sign(msg).as_ref().to_vec()
    }

    /// FFDH shared secret with a peer public part, as key-derivation entropy.
    pub fn agree(&self, peer: &PublicPart) -> Option<Vec<u8>> {
        let peer_kem = peer.kem()?;
        let p = ffdh_prime();
        Some(be_fixed(&peer_kem.modpow(&self.kem_secret, p), FFDH_PUBLIC_LEN))
    }
}

pub fn verify(public: &PublicPart, msg: &[u8], sig: &[u8]) -> bool {
    let Some(ed) = public.ed() else { return false };
    signature::UnparsedPublicKey::new(&signature::ED25519, ed)
        .verify(msg, sig)
        .is_ok()
}

/// Derives the 48-octet master secret from both nonces and shared entropy.
pub fn derive_master_secret(
    client_nonce: &Nonce,
    box_nonce: &Nonce,
    shared_entropy: &[u8],
) -> Result<[u8; MASTER_SECRET_LEN], KeyError> {
    if shared_entropy.is_empty() {
        return Err(KeyError::EmptyEntropy);
    }
    let mut salt = Vec::with_capacity(2 * NONCE_LEN);
    salt.extend_from_slice(&client_nonce.0);
    salt.extend_from_slice(&box_nonce.0);
    let mut out = [0u8; MASTER_SECRET_LEN];
    hkdf_expand(&salt, shared_entropy, b"opsec master secret", &mut out);
    Ok(out)
}

/// Expands one master secret into the directional session keys. The labels
/// "opsec up" / "opsec down" keep the directions disjoint.
pub fn derive_session_keys(
    master: &[u8; MASTER_SECRET_LEN],
    client_nonce: &Nonce,
    box_nonce: &Nonce,
) -> ([u8; SESSION_KEY_LEN], [u8; SESSION_KEY_LEN]) {
    let mut salt = Vec::with_capacity(2 * NONCE_LEN);
    salt.extend_from_slice(&client_nonce.0);
    salt.extend_from_slice(&box_nonce.0);
    let mut up = [0u8; SESSION_KEY_LEN];
    let mut down = [0u8; SESSION_KEY_LEN];
    hkdf_expand(&salt, master, b"opsec up", &mut up);
    hkdf_expand(&salt, master, b"opsec down", &mut down);
    (up, down)
}

/// A sealed record: the counter it is bound to plus ciphertext and tag.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedRecord {
    pub counter: u64,
    pub bytes: Vec<u8>,
}

impl SealedRecord {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.counter.to_be_bytes().to_vec();
        out.extend_from_slice(&self.bytes);
        out
    }

    pub fn decode(raw: &[u8]) -> Option<Self> {
        if raw.len() < 8 {
            return None;
        }
        Some(Self {
            counter: u64::from_be_bytes(raw[..8].try_into().unwrap()),
            bytes: raw[8..].to_vec(),
        })
    }
}

fn aead_key(key: &[u8; SESSION_KEY_LEN]) -> LessSafeKey {
    LessSafeKey::new(UnboundKey::new(&aead::CHACHA20_POLY1305, key).expect("32-byte key"))
}

fn counter_nonce(counter: u64) -> AeadNonce {
    let mut n = [0u8; 12];
    n[4..].copy_from_slice(&counter.to_be_bytes());
    AeadNonce::assume_unique_for_key(n)
}

/// Seals `plaintext` under `key`, bound to `counter`. The counter must not be
/// reused under this key in this direction; [`SendStream`] enforces that.
pub fn seal(key: &[u8; SESSION_KEY_LEN], counter: u64, plaintext: &[u8]) -> SealedRecord {
    let mut buf = plaintext.to_vec();
    aead_key(key)
        .seal_in_place_append_tag(counter_nonce(counter), Aad::from(counter.to_be_bytes()), &mut buf)
        .expect("sealing in place");
    SealedRecord { counter, bytes: buf }
}

/// Opens a sealed record. Fails on any modification, wrong key, or a counter
/// that differs from the one the record was sealed under.
pub fn open(key: &[u8; SESSION_KEY_LEN], counter: u64, record: &SealedRecord) -> Result<Vec<u8>, KeyError> {
    if counter != record.counter {
        return Err(KeyError::AuthenticationFailure);
    }
    let mut buf = record.bytes.clone();
    let pt = aead_key(key)
        .open_in_place(counter_nonce(counter), Aad::from(counter.to_be_bytes()), &mut buf)
        .map_err(|_| KeyError::AuthenticationFailure)?;
    Ok(pt.to_vec())
}

/// Sealing half of one directional stream: strictly increasing counters.
#[derive(Debug, Clone)]
pub struct SendStream {
    key: [u8; SESSION_KEY_LEN],
    counter: u64,
}

impl SendStream {
    pub fn new(key: [u8; SESSION_KEY_LEN]) -> Self {
        Self { key, counter: 0 }
    }

    pub fn with_base(key: [u8; SESSION_KEY_LEN], base: u64) -> Self {
        Self { key, counter: base }
    }

    pub fn seal_next(&mut self, plaintext: &[u8]) -> SealedRecord {
        let rec = seal(&self.key, self.counter, plaintext);
        self.counter += 1;
        rec
    }
}

/// Opening half of one directional stream: rejects replayed counters.
#[derive(Debug, Clone)]
pub struct RecvStream {
    key: [u8; SESSION_KEY_LEN],
    next: u64,
}

impl RecvStream {
    pub fn new(key: [u8; SESSION_KEY_LEN]) -> Self {
        Self { key, next: 0 }
    }

    pub fn with_base(key: [u8; SESSION_KEY_LEN], base: u64) -> Self {
        Self { key, next: base }
    }

    pub fn open_next(&mut self, record: &SealedRecord) -> Result<Vec<u8>, KeyError> {
        if record.counter < self.next {
            return Err(KeyError::ReplayDetected(record.counter));
        }
        let pt = open(&self.key, record.counter, record)?;
        self.next = record.counter + 1;
        Ok(pt)
    }
}

/// Per-hop key material between the client and one box.
#[derive(Debug, Clone)]
pub struct HopChannel {
    pub master_secret: [u8; MASTER_SECRET_LEN],
    pub client_nonce: Nonce,
    pub box_nonce: Nonce,
    pub key_up: [u8; SESSION_KEY_LEN],
    pub key_down: [u8; SESSION_KEY_LEN],
    send: SendStream,
    recv: RecvStream,
}

impl HopChannel {
    pub fn new(master_secret: [u8; MASTER_SECRET_LEN], client_nonce: Nonce, box_nonce: Nonce) -> Self {
        let (key_up, key_down) = derive_session_keys(&master_secret, &client_nonce, &box_nonce);
        Self {
            master_secret,
            client_nonce,
            box_nonce,
            key_up,
            key_down,
            send: SendStream::new(key_up),
            recv: RecvStream::new(key_down),
        }
    }

    /// Client-side: seal toward the box.
    pub fn seal_up(&mut self, plaintext: &[u8]) -> SealedRecord {
        self.send.seal_next(plaintext)
    }

    /// Client-side: open a record the box sealed toward the client.
    pub fn open_down(&mut self, record: &SealedRecord) -> Result<Vec<u8>, KeyError> {
        self.recv.open_next(record)
    }

    pub fn key(&self, d: Direction) -> [u8; SESSION_KEY_LEN] {
        match d {
            Direction::Up => self.key_up,
            Direction::Down => self.key_down,
        }
    }
}

/// Seals `plaintext` to a public part: fresh FFDH ephemeral, HKDF key, AEAD.
/// Only the matching private part opens the blob.
pub fn asym_seal(public: &PublicPart, plaintext: &[u8], rng: &mut impl RngCore) -> Vec<u8> {
    let peer = public.kem().expect("well-formed public part");
    let p = ffdh_prime();
    let mut exp = [0u8; FFDH_EXPONENT_LEN];
    rng.fill_bytes(&mut exp);
    let eph = BigUint::from_bytes_be(&exp) | BigUint::from(1u32);
    let eph_public = BigUint::from(2u32).modpow(&eph, p);
    let shared = peer.modpow(&eph, p);

    let mut key = [0u8; SESSION_KEY_LEN];
    let eph_bytes = be_fixed(&eph_public, FFDH_PUBLIC_LEN);
    hkdf_expand(&eph_bytes, &be_fixed(&shared, FFDH_PUBLIC_LEN), b"opsec asym seal", &mut key);

    let mut blob = eph_bytes;
    blob.extend_from_slice(&seal(&key, 0, plaintext).bytes);
    blob
}

/// Opens an [`asym_seal`] blob with the private part.
pub fn asym_open(keypair: &KeyPair, blob: &[u8]) -> Result<Vec<u8>, KeyError> {
    if blob.len() < FFDH_PUBLIC_LEN {
        return Err(KeyError::AuthenticationFailure);
    }
    let (eph_bytes, ct) = blob.split_at(FFDH_PUBLIC_LEN);
    let eph_public = BigUint::from_bytes_be(eph_bytes);
    let p = ffdh_prime();
    let shared = eph_public.modpow(&keypair.kem_secret, p);
    let mut key = [0u8; SESSION_KEY_LEN];
    hkdf_expand(eph_bytes, &be_fixed(&shared, FFDH_PUBLIC_LEN), b"opsec asym seal", &mut key);
    open(&key, 0, &SealedRecord { counter: 0, bytes: ct.to_vec() })
}

fn transcript_digest(servdisc: &[u8], servreq: &[u8]) -> Vec<u8> {
    let mut msg = b"opsec transcript".to_vec();
    msg.extend_from_slice(&(servdisc.len() as u64).to_be_bytes());
    msg.extend_from_slice(servdisc);
    msg.extend_from_slice(&(servreq.len() as u64).to_be_bytes());
    msg.extend_from_slice(servreq);
    sha256(&[&msg]).to_vec()
}

/// Signs the hash of the exact ServDisc and ServReq bytes the signer saw.
pub fn sign_transcript(keypair: &KeyPair, servdisc: &[u8], servreq: &[u8]) -> Vec<u8> {
    keypair.sign(&transcript_digest(servdisc, servreq))
}

/// True iff both segments are unmodified and the signer matches.
pub fn verify_transcript(public: &PublicPart, servdisc: &[u8], servreq: &[u8], sig: &[u8]) -> bool {
    verify(public, &transcript_digest(servdisc, servreq), sig)
}

/// Authority-signed statement binding a box identity to its boilerplate code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationQuote {
    pub box_identity: u32,
    pub code_hash: [u8; 32],
    pub authority_signature: Vec<u8>,
}

impl AttestationQuote {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.box_identity.to_be_bytes().to_vec();
        out.extend_from_slice(&self.code_hash);
        out.extend_from_slice(&(self.authority_signature.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.authority_signature);
        out
    }

    pub fn decode(raw: &[u8]) -> Option<(Self, usize)> {
        if raw.len() < 4 + 32 + 2 {
            return None;
        }
        let box_identity = u32::from_be_bytes(raw[..4].try_into().unwrap());
        let code_hash: [u8; 32] = raw[4..36].try_into().unwrap();
        let sig_len = u16::from_be_bytes(raw[36..38].try_into().unwrap()) as usize;
        let end = 38 + sig_len;
        if raw.len() < end {
            return None;
        }
        Some((
            Self { box_identity, code_hash, authority_signature: raw[38..end].to_vec() },
            end,
        ))
    }
}

fn quote_statement(box_identity: u32, code_hash: &[u8; 32]) -> Vec<u8> {
    let mut msg = b"opsec attestation quote".to_vec();
    msg.extend_from_slice(&box_identity.to_be_bytes());
    msg.extend_from_slice(code_hash);
    msg
}

/// Mock attestation authority: a registry of (identity, code hash) pairs and
/// a signing key. Stands in for the TEE attestation infrastructure.
#[derive(Debug, Clone)]
pub struct AttestationAuthority {
    keypair: KeyPair,
    registry: BTreeMap<u32, [u8; 32]>,
}

impl AttestationAuthority {
    pub fn new(rng: &mut impl RngCore) -> Self {
        Self { keypair: KeyPair::generate(rng), registry: BTreeMap::new() }
    }

    pub fn register(&mut self, box_identity: u32, code_hash: [u8; 32]) {
        self.registry.insert(box_identity, code_hash);
    }

    pub fn public_part(&self) -> &PublicPart {
        self.keypair.public_part()
    }

    /// Issues a quote iff the pair is registered. The authority never signs
    /// unregistered pairs, so verification implies registration.
    pub fn issue_quote(
        &self,
        box_identity: u32,
        code_hash: [u8; 32],
    ) -> Result<AttestationQuote, KeyError> {
        match self.registry.get(&box_identity) {
            Some(h) if *h == code_hash => Ok(AttestationQuote {
                box_identity,
                code_hash,
                authority_signature: self.keypair.sign(&quote_statement(box_identity, &code_hash)),
            }),
            _ => Err(KeyError::UnknownIdentity(box_identity)),
        }
    }
}

/// Verifies a quote against the authority's public part.
pub fn verify_quote(authority_public: &PublicPart, quote: &AttestationQuote) -> bool {
    verify(
        authority_public,
        &quote_statement(quote.box_identity, &quote.code_hash),
        &quote.authority_signature,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn keygen_is_deterministic_per_seed() {
        let a = KeyPair::generate(&mut rng(7));
        let b = KeyPair::generate(&mut rng(7));
        let c = KeyPair::generate(&mut rng(8));
        assert_eq!(a.public_part(), b.public_part());
        assert_ne!(a.public_part(), c.public_part());
    }

    #[test]
    fn sign_verify_and_cross_key_rejection() {
        let a = KeyPair::generate(&mut rng(1));
        let b = KeyPair::generate(&mut rng(2));
        let sig = a.sign(b"arbitrary message");
        assert!(verify(a.public_part(), b"arbitrary message", &sig));
        assert!(!verify(b.public_part(), b"arbitrary message", &sig));
        assert!(!verify(a.public_part(), b"arbitrary message!", &sig));
    }

    #[test]
    fn master_secret_deterministic_and_entropy_checked() {
        let cn = Nonce([1; 32]);
        let bn = Nonce([2; 32]);
        let m1 = derive_master_secret(&cn, &bn, b"shared").unwrap();
        let m2 = derive_master_secret(&cn, &bn, b"shared").unwrap();
        assert_eq!(m1, m2);
        assert_eq!(derive_master_secret(&cn, &bn, b""), Err(KeyError::EmptyEntropy));
    }

    #[test]
    fn master_secret_avalanche() {
        // Flipping one bit of the client nonce changes >= 30% of output bits,
        // averaged over many trials.
        let bn = Nonce([9; 32]);
        let mut total_bits = 0u32;
        let trials = 1000;
        for t in 0..trials {
            let mut base = [0u8; 32];
            base[..8].copy_from_slice(&(t as u64).to_be_bytes());
            let mut flipped = base;
            flipped[31] ^= 1;
            let a = derive_master_secret(&Nonce(base), &bn, b"entropy").unwrap();
            let b = derive_master_secret(&Nonce(flipped), &bn, b"entropy").unwrap();
            total_bits += a.iter().zip(b.iter()).map(|(x, y)| (x ^ y).count_ones()).sum::<u32>();
        }
        let avg_frac = total_bits as f64 / (trials as f64 * 48.0 * 8.0);
        assert!(avg_frac >= 0.30, "avalanche fraction {avg_frac}");
    }

    #[test]
    fn session_keys_distinct_and_nonce_bound() {
        let mut r = rng(3);
        for _ in 0..200 {
            let cn = Nonce::generate(&mut r);
            let bn = Nonce::generate(&mut r);
            let master = derive_master_secret(&cn, &bn, b"e").unwrap();
            let (up, down) = derive_session_keys(&master, &cn, &bn);
            assert_ne!(up, down);
            let bn2 = Nonce::generate(&mut r);
            let master2 = derive_master_secret(&cn, &bn2, b"e").unwrap();
            let (up2, down2) = derive_session_keys(&master2, &cn, &bn2);
            assert_ne!(up, up2);
            assert_ne!(down, down2);
        }
    }

    #[test]
    fn seal_open_round_trip_and_replay() {
        let key = [4u8; 32];
        let mut send = SendStream::new(key);
        let mut recv = RecvStream::new(key);
        for i in 0..6u64 {
            let rec = send.seal_next(format!("pkt {i}").as_bytes());
            assert_eq!(recv.open_next(&rec).unwrap(), format!("pkt {i}").as_bytes());
        }
        // Replaying counter 5 is rejected.
        let rec5 = seal(&key, 5, b"again");
        assert_eq!(recv.open_next(&rec5), Err(KeyError::ReplayDetected(5)));
    }

    #[test]
    fn tamper_is_always_detected() {
        let key = [7u8; 32];
        let mut r = rng(11);
        for i in 0..1000u64 {
            let rec = seal(&key, i, b"some payload bytes of moderate length");
            let mut mutated = rec.clone();
            let pos = (r.next_u64() as usize) % mutated.bytes.len();
            let bit = 1u8 << (r.next_u64() % 8);
            mutated.bytes[pos] ^= bit;
            assert_eq!(open(&key, i, &mutated), Err(KeyError::AuthenticationFailure));
        }
        // Wrong counter fails even with intact bytes.
        let rec = seal(&key, 1, b"x");
        assert!(open(&key, 2, &rec).is_err());
        assert!(open(&key, 2, &SealedRecord { counter: 2, bytes: rec.bytes.clone() }).is_err());
    }

    #[test]
    fn asym_seal_only_opens_under_matching_private_part() {
        let mut r = rng(21);
        let a = KeyPair::generate(&mut r);
        let b = KeyPair::generate(&mut r);
        let blob = asym_seal(a.public_part(), b"master secret bytes", &mut r);
        assert_eq!(asym_open(&a, &blob).unwrap(), b"master secret bytes");
        assert_eq!(asym_open(&b, &blob), Err(KeyError::AuthenticationFailure));
    }

    #[test]
    fn agreement_is_symmetric() {
        let mut r = rng(31);
        let a = KeyPair::generate(&mut r);
        let b = KeyPair::generate(&mut r);
        assert_eq!(a.agree(b.public_part()), b.agree(a.public_part()));
    }

    #[test]
    fn transcript_signature_binds_both_segments() {
        let mut r = rng(41);
        let kp = KeyPair::generate(&mut r);
        let other = KeyPair::generate(&mut r);
        let sd = b"servdisc bytes".to_vec();
        let sr = b"servreq bytes".to_vec();
        let sig = sign_transcript(&kp, &sd, &sr);
        assert!(verify_transcript(kp.public_part(), &sd, &sr, &sig));
        assert!(!verify_transcript(other.public_part(), &sd, &sr, &sig));
        // Any nonempty byte edit of either segment invalidates.
        for i in 0..sd.len() {
            let mut m = sd.clone();
            m[i] ^= 0x20;
            assert!(!verify_transcript(kp.public_part(), &m, &sr, &sig));
        }
        for i in 0..sr.len() {
            let mut m = sr.clone();
            m[i] ^= 0x01;
            assert!(!verify_transcript(kp.public_part(), &sd, &m, &sig));
        }
    }

    #[test]
    fn quotes_verify_iff_registered_and_untampered() {
        let mut r = rng(51);
        let mut authority = AttestationAuthority::new(&mut r);
        authority.register(3, [0xAA; 32]);
        assert_eq!(
            authority.issue_quote(4, [0xAA; 32]),
            Err(KeyError::UnknownIdentity(4))
        );
        assert!(authority.issue_quote(3, [0xBB; 32]).is_err());
        let q = authority.issue_quote(3, [0xAA; 32]).unwrap();
        assert!(verify_quote(authority.public_part(), &q));

        let mut altered = q.clone();
        altered.code_hash[0] ^= 1;
        assert!(!verify_quote(authority.public_part(), &altered));

        // Self-made quote from a fake box: signed by its own key, not the authority.
        let fake = KeyPair::generate(&mut r);
        let self_made = AttestationQuote {
            box_identity: 9,
            code_hash: [0xCC; 32],
            authority_signature: fake.sign(&quote_statement(9, &[0xCC; 32])),
        };
        assert!(!verify_quote(authority.public_part(), &self_made));

        let (decoded, used) = AttestationQuote::decode(&q.encode()).unwrap();
        assert_eq!(decoded, q);
        assert_eq!(used, q.encode().len());
    }

    #[test]
    fn nonce_collision_free_at_scale() {
        use std::collections::HashSet;
        let mut r = rng(61);
        let mut seen = HashSet::new();
        for _ in 0..1_000_000 {
            assert!(seen.insert(Nonce::generate(&mut r).0));
        }
    }
}
