//! Signature provider abstraction and the deterministic keyed-hash signer
//! used by the simulator.

use sha2::{Digest as _, Sha256};

use crate::event::{Digest, ValidatorId};

/// Signs and verifies digests on behalf of validators.
///
/// `coin_bit` is what coin rounds use as a validator's pseudorandom vote, so
/// it must be a pure function of the signature bytes.
pub trait CryptoProvider: Send + Sync {
    fn sign(&self, vid: ValidatorId, digest: &Digest) -> Vec<u8>;

    fn verify(&self, vid: ValidatorId, digest: &Digest, signature: &[u8]) -> bool;

    /// Bit 4 (counting from the least significant bit) of the middle byte,
    /// index `len / 2`. Empty signatures yield 0.
    fn coin_bit(&self, signature: &[u8]) -> u8 {
        coin_bit(signature)
    }
}

pub fn coin_bit(signature: &[u8]) -> u8 {
    if signature.is_empty() {
        return 0;
    }
    (signature[signature.len() / 2] >> 4) & 1
}

/// "Signatures" are `SHA-256(secret(vid) || digest)` where each validator's
/// secret is derived from a provider-wide seed. Verification recomputes the
/// tag, so only a holder of the seed can produce a valid one.
#[derive(Clone, Debug)]
pub struct KeyedHashSigner {
    seed: u64,
}

impl KeyedHashSigner {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    fn secret(&self, vid: ValidatorId) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"tetris/keyed-signer/v1");
        h.update(self.seed.to_be_bytes());
        h.update(vid.0.to_be_bytes());
        h.finalize().into()
    }

    fn tag(&self, vid: ValidatorId, digest: &Digest) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.secret(vid));
        h.update(digest.as_bytes());
        h.finalize().into()
    }
}

impl Default for KeyedHashSigner {
    fn default() -> Self {
        Self::new(0)
    }
}

impl CryptoProvider for KeyedHashSigner {
    fn sign(&self, vid: ValidatorId, digest: &Digest) -> Vec<u8> {
        self.tag(vid, digest).to_vec()
    }

    fn verify(&self, vid: ValidatorId, digest: &Digest, signature: &[u8]) -> bool {
        signature == self.tag(vid, digest)
    }
}
