//! Events, transactions, digests and their canonical encoding.
//!
//! Canonical encoding of an event (the bytes that are hashed):
//!
//! ```text
//! vid            u32 big-endian
//! seq            u64 big-endian
//! parent count   u32 big-endian, then each 32-byte digest in stored order
//! tx count       u32 big-endian, then each 32-byte digest in ascending order
//! ```
//!
//! Parent slot 0 is always the self-parent; the all-zero digest fills it when
//! the creator has no previous event.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::crypto::CryptoProvider;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ValidatorId(pub u32);

impl fmt::Display for ValidatorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// 32-byte SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    /// Reserved value meaning "no self-parent".
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn of(bytes: &[u8]) -> Digest {
        Digest(Sha256::digest(bytes).into())
    }

    pub fn is_zero(&self) -> bool {
        self.0 == [0u8; 32]
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Digest, DecodeError> {
        let bytes = hex::decode(s).map_err(|_| DecodeError::BadHex)?;
        let arr: [u8; 32] = bytes.try_into().map_err(|_| DecodeError::BadHex)?;
        Ok(Digest(arr))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..12])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Digest {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Digest::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transaction {
    payload: Vec<u8>,
    txid: Digest,
}

impl Transaction {
    pub fn new(payload: Vec<u8>) -> Self {
        let txid = Digest::of(&payload);
        Self { payload, txid }
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn txid(&self) -> Digest {
        self.txid
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EventError {
    #[error("other-parent was created by the event's own creator {0}")]
    OtherParentBySelf(ValidatorId),
    #[error("self-parent was created by {found}, not {expected}")]
    SelfParentCreator { expected: ValidatorId, found: ValidatorId },
    #[error("parent {0:?} listed twice")]
    DuplicateParent(Digest),
    #[error("seq {event} is not past self-parent seq {self_parent} + 1")]
    NotAGap { event: u64, self_parent: u64 },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("truncated input")]
    Truncated,
    #[error("trailing bytes after event")]
    Trailing,
    #[error("invalid hex digest")]
    BadHex,
}

/// Why an event failed verification.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    #[error("signature does not verify")]
    BadSignature,
    #[error("claimed digest does not match the canonical encoding")]
    BadDigest,
    #[error("parent digest repeated")]
    DuplicateParent,
    #[error("self-parent slot missing, or zero digest outside slot 0")]
    SelfParentSlotMisuse,
}

/// The content fields of an event, before a digest and signature exist.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventDraft {
    pub vid: ValidatorId,
    pub seq: u64,
    pub parent_hashes: Vec<Digest>,
    pub tx_hashes: BTreeSet<Digest>,
}

impl EventDraft {
    pub fn encode(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(20 + 32 * (self.parent_hashes.len() + self.tx_hashes.len()));
        out.extend_from_slice(&self.vid.0.to_be_bytes());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&(self.parent_hashes.len() as u32).to_be_bytes());
        for p in &self.parent_hashes {
            out.extend_from_slice(p.as_bytes());
        }
        out.extend_from_slice(&(self.tx_hashes.len() as u32).to_be_bytes());
        for t in &self.tx_hashes {
            out.extend_from_slice(t.as_bytes());
        }
        out
    }

    pub fn digest(&self) -> Digest {
        Digest::of(&self.encode())
    }

    pub fn sign(self, crypto: &dyn CryptoProvider) -> Event {
        let digest = self.digest();
        let signature = crypto.sign(self.vid, &digest);
        Event { draft: self, signature, digest, placeholder: false }
    }
}

/// A signed event. The digest is carried alongside the content so that a
/// decoded event whose claimed digest is wrong can be detected by
/// [`verify_event`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    draft: EventDraft,
    signature: Vec<u8>,
    digest: Digest,
    placeholder: bool,
}

impl Event {
    pub fn vid(&self) -> ValidatorId {
        self.draft.vid
    }

    pub fn seq(&self) -> u64 {
        self.draft.seq
    }

    pub fn parent_hashes(&self) -> &[Digest] {
        &self.draft.parent_hashes
    }

    /// `None` when slot 0 holds the zero digest.
    pub fn self_parent(&self) -> Option<Digest> {
        self.draft.parent_hashes.first().copied().filter(|d| !d.is_zero())
    }

    pub fn other_parents(&self) -> &[Digest] {
        self.draft.parent_hashes.get(1..).unwrap_or(&[])
    }

    pub fn tx_hashes(&self) -> &BTreeSet<Digest> {
        &self.draft.tx_hashes
    }

    pub fn signature(&self) -> &[u8] {
        &self.signature
    }

    pub fn digest(&self) -> Digest {
        self.digest
    }

    /// Locally derived gap filler; never signed or transmitted.
    pub fn is_placeholder(&self) -> bool {
        self.placeholder
    }

    pub fn draft(&self) -> &EventDraft {
        &self.draft
    }

    pub fn with_signature(mut self, signature: Vec<u8>) -> Event {
        self.signature = signature;
        self
    }

    /// Wire form: canonical encoding, claimed digest, u32 signature length,
    /// signature bytes.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut out = self.draft.encode();
        out.extend_from_slice(self.digest.as_bytes());
        out.extend_from_slice(&(self.signature.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Event, DecodeError> {
        let mut r = Reader { bytes, pos: 0 };
        let vid = ValidatorId(r.u32()?);
        let seq = r.u64()?;
        let np = r.u32()? as usize;
        let mut parent_hashes = Vec::with_capacity(np.min(1024));
        for _ in 0..np {
            parent_hashes.push(r.digest()?);
        }
        let nt = r.u32()? as usize;
        let mut tx_hashes = BTreeSet::new();
        for _ in 0..nt {
            tx_hashes.insert(r.digest()?);
        }
        let digest = r.digest()?;
        let sl = r.u32()? as usize;
        let signature = r.take(sl)?.to_vec();
        if r.pos != bytes.len() {
            return Err(DecodeError::Trailing);
        }
        Ok(Event {
            draft: EventDraft { vid, seq, parent_hashes, tx_hashes },
            signature,
            digest,
            placeholder: false,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(DecodeError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn digest(&mut self) -> Result<Digest, DecodeError> {
        Ok(Digest(self.take(32)?.try_into().unwrap()))
    }
}

pub fn canonical_encode(e: &Event) -> Vec<u8> {
    e.draft.encode()
}

pub fn hash_event(e: &Event) -> Digest {
    e.draft.digest()
}

/// Builds and signs a new event. The sequence number is one past the largest
/// parent sequence number, or 0 for an event with no parents.
pub fn create_event(
    vid: ValidatorId,
    self_parent: Option<&Event>,
    other_parents: &[&Event],
    txs: impl IntoIterator<Item = Digest>,
    crypto: &dyn CryptoProvider,
) -> Result<Event, EventError> {
    if let Some(sp) = self_parent {
        if sp.vid() != vid {
            return Err(EventError::SelfParentCreator { expected: vid, found: sp.vid() });
        }
    }
    let mut parent_hashes = Vec::with_capacity(other_parents.len() + 1);
    parent_hashes.push(self_parent.map_or(Digest::ZERO, Event::digest));
    let mut seen = BTreeSet::new();
    for p in other_parents {
        if p.vid() == vid {
            return Err(EventError::OtherParentBySelf(vid));
        }
        if !seen.insert(p.digest()) {
            return Err(EventError::DuplicateParent(p.digest()));
        }
        parent_hashes.push(p.digest());
    }
    let seq = self_parent
        .into_iter()
        .chain(other_parents.iter().copied())
        .map(|p| p.seq() + 1)
        .max()
        .unwrap_or(0);
    Ok(EventDraft { vid, seq, parent_hashes, tx_hashes: txs.into_iter().collect() }.sign(crypto))
}

/// Derives the empty events filling the sequence gap between `self_parent`
/// and `e`. Every validator derives byte-identical placeholders from the same
/// pair, so they never need to be sent.
pub fn materialize_placeholders(e: &Event, self_parent: &Event) -> Result<Vec<Event>, EventError> {
    if self_parent.vid() != e.vid() {
        return Err(EventError::SelfParentCreator { expected: e.vid(), found: self_parent.vid() });
    }
    if e.seq() <= self_parent.seq() + 1 {
        return Err(EventError::NotAGap { event: e.seq(), self_parent: self_parent.seq() });
    }
    let mut out = Vec::with_capacity((e.seq() - self_parent.seq() - 1) as usize);
    let mut prev = self_parent.digest();
    for seq in self_parent.seq() + 1..e.seq() {
        let draft = EventDraft {
            vid: e.vid(),
            seq,
            parent_hashes: vec![prev],
            tx_hashes: BTreeSet::new(),
        };
        let digest = draft.digest();
        prev = digest;
        out.push(Event { draft, signature: Vec::new(), digest, placeholder: true });
    }
    Ok(out)
}

pub fn verify_event(e: &Event, crypto: &dyn CryptoProvider) -> Result<(), Violation> {
    let parents = e.parent_hashes();
    if parents.is_empty() || parents[1..].iter().any(Digest::is_zero) {
        return Err(Violation::SelfParentSlotMisuse);
    }
    let mut seen = BTreeSet::new();
    for p in parents.iter().filter(|p| !p.is_zero()) {
        if !seen.insert(*p) {
            return Err(Violation::DuplicateParent);
        }
    }
    if hash_event(e) != e.digest() {
        return Err(Violation::BadDigest);
    }
    if !e.is_placeholder() && !crypto.verify(e.vid(), &e.digest(), e.signature()) {
        return Err(Violation::BadSignature);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::KeyedHashSigner;

    fn tx(i: u32) -> Digest {
        Digest::of(&i.to_be_bytes())
    }

    fn genesis(vid: u32, c: &KeyedHashSigner) -> Event {
        create_event(ValidatorId(vid), None, &[], [], c).unwrap()
    }

    #[test]
    fn encoding_layout_is_fixed() {
        let d = EventDraft {
            vid: ValidatorId(0x01020304),
            seq: 5,
            parent_hashes: vec![Digest::ZERO],
            tx_hashes: BTreeSet::new(),
        };
        let enc = d.encode();
        assert_eq!(&enc[..4], &[1, 2, 3, 4]);
        assert_eq!(&enc[4..12], &[0, 0, 0, 0, 0, 0, 0, 5]);
        assert_eq!(&enc[12..16], &[0, 0, 0, 1]);
        assert_eq!(&enc[16..48], &[0u8; 32]);
        assert_eq!(&enc[48..], &[0, 0, 0, 0]);
    }

    #[test]
    fn encoding_is_deterministic_and_field_sensitive() {
        let c = KeyedHashSigner::default();
        let a = create_event(ValidatorId(1), None, &[], [tx(1), tx(2)], &c).unwrap();
        let b = create_event(ValidatorId(1), None, &[], [tx(1), tx(2)], &c).unwrap();
        assert_eq!(canonical_encode(&a), canonical_encode(&b));
        let other = create_event(ValidatorId(1), None, &[], [tx(1), tx(3)], &c).unwrap();
        assert_ne!(canonical_encode(&a), canonical_encode(&other));
    }

    #[test]
    fn tx_insertion_order_does_not_change_encoding() {
        let c = KeyedHashSigner::default();
        let fwd: Vec<_> = (0..20).map(tx).collect();
        let mut rev = fwd.clone();
        rev.reverse();
        let a = create_event(ValidatorId(2), None, &[], fwd, &c).unwrap();
        let b = create_event(ValidatorId(2), None, &[], rev, &c).unwrap();
        assert_eq!(canonical_encode(&a), canonical_encode(&b));
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn event_digest_ignores_tx_payload_bytes() {
        let c = KeyedHashSigner::default();
        let t = Transaction::new(b"payload".to_vec());
        let e1 = create_event(ValidatorId(0), None, &[], [t.txid()], &c).unwrap();
        let mut flipped = t.payload().to_vec();
        flipped[0] ^= 1;
        // the event still references the original txid; its digest cannot move
        let _changed = Transaction::new(flipped);
        let e2 = create_event(ValidatorId(0), None, &[], [t.txid()], &c).unwrap();
        assert_eq!(hash_event(&e1), hash_event(&e2));
    }

    #[test]
    fn no_parents_gives_seq_zero_and_zero_slot() {
        let c = KeyedHashSigner::default();
        let e = genesis(0, &c);
        assert_eq!(e.seq(), 0);
        assert_eq!(e.parent_hashes(), &[Digest::ZERO]);
        assert_eq!(e.self_parent(), None);
    }

    fn chain_to(vid: u32, seq: u64, c: &KeyedHashSigner) -> Event {
        let mut e = genesis(vid, c);
        while e.seq() < seq {
            e = create_event(ValidatorId(vid), Some(&e), &[], [], c).unwrap();
        }
        e
    }

    #[test]
    fn seq_is_one_past_max_parent() {
        let c = KeyedHashSigner::default();
        let sp = chain_to(0, 3, &c);
        let o5 = chain_to(1, 5, &c);
        let o2 = chain_to(2, 2, &c);
        let e = create_event(ValidatorId(0), Some(&sp), &[&o5, &o2], [], &c).unwrap();
        assert_eq!(e.seq(), 6);
        assert_eq!(e.parent_hashes(), &[sp.digest(), o5.digest(), o2.digest()]);

        let sp4 = chain_to(0, 4, &c);
        let e = create_event(ValidatorId(0), Some(&sp4), &[], [], &c).unwrap();
        assert_eq!(e.seq(), 5);
    }

    #[test]
    fn other_parent_by_self_is_rejected() {
        let c = KeyedHashSigner::default();
        let mine = genesis(0, &c);
        let err = create_event(ValidatorId(0), None, &[&mine], [], &c).unwrap_err();
        assert_eq!(err, EventError::OtherParentBySelf(ValidatorId(0)));
    }

    #[test]
    fn placeholders_fill_gap() {
        let c = KeyedHashSigner::default();
        let sp = chain_to(0, 3, &c);
        let o5 = chain_to(1, 5, &c);
        let e = create_event(ValidatorId(0), Some(&sp), &[&o5], [], &c).unwrap();
        assert_eq!(e.seq(), 6);
        let ph = materialize_placeholders(&e, &sp).unwrap();
        assert_eq!(ph.iter().map(Event::seq).collect::<Vec<_>>(), vec![4, 5]);
        assert!(ph.iter().all(|p| p.is_placeholder() && p.tx_hashes().is_empty()));
        assert_eq!(ph[0].parent_hashes(), &[sp.digest()]);
        assert_eq!(ph[1].parent_hashes(), &[ph[0].digest()]);
        assert!(ph.iter().all(|p| verify_event(p, &c).is_ok()));

        // another validator deriving from the same pair gets identical bytes
        let again = materialize_placeholders(&e.clone(), &sp.clone()).unwrap();
        for (a, b) in ph.iter().zip(&again) {
            assert_eq!(canonical_encode(a), canonical_encode(b));
            assert_eq!(a.digest(), b.digest());
        }
    }

    #[test]
    fn adjacent_seq_is_not_a_gap() {
        let c = KeyedHashSigner::default();
        let sp = chain_to(0, 3, &c);
        let e = create_event(ValidatorId(0), Some(&sp), &[], [], &c).unwrap();
        assert!(matches!(materialize_placeholders(&e, &sp), Err(EventError::NotAGap { .. })));
    }

    #[test]
    fn verify_detects_each_violation() {
        let c = KeyedHashSigner::default();
        let g1 = genesis(1, &c);
        let e = create_event(ValidatorId(0), None, &[&g1], [tx(9)], &c).unwrap();
        assert_eq!(verify_event(&e, &c), Ok(()));

        let mut sig = e.signature().to_vec();
        sig[3] ^= 0x40;
        assert_eq!(verify_event(&e.clone().with_signature(sig), &c), Err(Violation::BadSignature));

        let dup = EventDraft {
            vid: ValidatorId(0),
            seq: 1,
            parent_hashes: vec![Digest::ZERO, g1.digest(), g1.digest()],
            tx_hashes: BTreeSet::new(),
        }
        .sign(&c);
        assert_eq!(verify_event(&dup, &c), Err(Violation::DuplicateParent));

        let misuse = EventDraft {
            vid: ValidatorId(0),
            seq: 1,
            parent_hashes: vec![g1.digest(), Digest::ZERO],
            tx_hashes: BTreeSet::new(),
        }
        .sign(&c);
        assert_eq!(verify_event(&misuse, &c), Err(Violation::SelfParentSlotMisuse));

        // tamper with the claimed digest on the wire
        let mut wire = e.to_wire();
        let enc_len = canonical_encode(&e).len();
        wire[enc_len] ^= 1;
        let forged = Event::from_wire(&wire).unwrap();
        assert_eq!(verify_event(&forged, &c), Err(Violation::BadDigest));
    }

    #[test]
    fn wire_roundtrip() {
        let c = KeyedHashSigner::default();
        let g = genesis(3, &c);
        let e = create_event(ValidatorId(1), None, &[&g], [tx(1), tx(4)], &c).unwrap();
        let back = Event::from_wire(&e.to_wire()).unwrap();
        assert_eq!(back, e);
        assert_eq!(Event::from_wire(&e.to_wire()[..10]), Err(DecodeError::Truncated));
    }
}
