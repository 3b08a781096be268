//! Content-addressed temporary store for event and transaction bodies.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::event::{hash_event, Digest, Event, Transaction};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DhtError {
    #[error("key {key} does not match the content hash {actual}")]
    KeyMismatch { key: Digest, actual: Digest },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DhtItem {
    Event(Event),
    Tx(Transaction),
}

impl DhtItem {
    /// The only key this item may be stored under.
    pub fn content_key(&self) -> Digest {
        match self {
            DhtItem::Event(e) => hash_event(e),
            DhtItem::Tx(tx) => tx.txid(),
        }
    }

    pub fn byte_len(&self) -> usize {
        match self {
            DhtItem::Event(e) => e.to_wire().len(),
            DhtItem::Tx(tx) => tx.payload().len(),
        }
    }
}

#[derive(Debug, Default)]
pub struct TempDht {
    store: BTreeMap<Digest, (DhtItem, u64)>,
    now: u64,
}

impl TempDht {
    pub fn new() -> Self {
        Self::default()
    }

    /// Advances the clock and drops expired entries.
    pub fn set_now(&mut self, now: u64) {
        self.now = now;
        self.store.retain(|_, (_, expires)| *expires > now);
    }

    pub fn put(&mut self, key: Digest, item: DhtItem, ttl: u64) -> Result<(), DhtError> {
        let actual = item.content_key();
        if actual != key {
            return Err(DhtError::KeyMismatch { key, actual });
        }
        self.store.insert(key, (item, self.now.saturating_add(ttl)));
        Ok(())
    }

    pub fn get(&self, key: &Digest) -> Option<&DhtItem> {
        self.store.get(key).filter(|(_, exp)| *exp > self.now).map(|(item, _)| item)
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }
}
