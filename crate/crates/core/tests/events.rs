use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;
use tetris_core::{
    canonical_encode, create_event, hash_event, verify_event, Digest, Event, EventDraft,
    KeyedHashSigner, ValidatorId,
};

fn draft(vid: u32, seq: u64, parents: Vec<Digest>, txs: Vec<Digest>) -> EventDraft {
    EventDraft { vid: ValidatorId(vid), seq, parent_hashes: parents, tx_hashes: txs.into_iter().collect() }
}

#[test]
fn distinct_events_hash_distinctly() {
    let mut seen = HashSet::new();
    let mut encodings = HashSet::new();
    for i in 0..10_000u32 {
        let vid = i % 7;
        let seq = (i / 7) as u64;
        let parent = Digest::of(&(i / 3).to_be_bytes());
        let txs = if i % 2 == 0 { vec![Digest::of(&i.to_le_bytes())] } else { vec![] };
        let d = draft(vid, seq, vec![parent], txs);
        assert!(encodings.insert(d.encode()));
        assert!(seen.insert(d.digest()), "collision at {i}");
    }
}

#[test]
fn created_events_verify_and_chain() {
    let c = KeyedHashSigner::new(5);
    let a0 = create_event(ValidatorId(0), None, &[], [], &c).unwrap();
    let b0 = create_event(ValidatorId(1), None, &[], [], &c).unwrap();
    let b1 = create_event(ValidatorId(1), Some(&b0), &[&a0], [], &c).unwrap();
    let a1 = create_event(ValidatorId(0), Some(&a0), &[&b1], [Digest::of(b"t")], &c).unwrap();
    assert_eq!((a0.seq(), b1.seq(), a1.seq()), (0, 1, 2));
    assert_eq!(a1.self_parent(), Some(a0.digest()));
    assert_eq!(a1.other_parents(), &[b1.digest()]);
    for e in [&a0, &b0, &b1, &a1] {
        assert_eq!(verify_event(e, &c), Ok(()));
        assert_eq!(hash_event(e), e.digest());
        assert_eq!(Event::from_wire(&e.to_wire()).as_ref(), Ok(e));
    }
    assert!(verify_event(&a1, &KeyedHashSigner::new(6)).is_err());
}

proptest! {
    #[test]
    fn tx_order_and_duplicates_do_not_matter(
        vid in 0u32..64,
        seq in any::<u64>(),
        txs in prop::collection::vec(any::<[u8; 4]>(), 0..20),
        seed in any::<u64>(),
    ) {
        let ds: Vec<Digest> = txs.iter().map(|t| Digest::of(t)).collect();
        let mut rev = ds.clone();
        rev.reverse();
        rev.extend(ds.iter().take(3).copied());
        let parents = vec![Digest::of(&seed.to_be_bytes())];
        let a = draft(vid, seq, parents.clone(), ds);
        let b = draft(vid, seq, parents, rev);
        prop_assert_eq!(a.encode(), b.encode());
        prop_assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn encoding_changes_with_every_field(vid in 0u32..63, seq in 0u64..u64::MAX, p in any::<[u8; 8]>()) {
        let parent = Digest::of(&p);
        let base = draft(vid, seq, vec![parent], vec![]);
        let variants = [
            draft(vid + 1, seq, vec![parent], vec![]),
            draft(vid, seq + 1, vec![parent], vec![]),
            draft(vid, seq, vec![Digest::ZERO], vec![]),
            draft(vid, seq, vec![parent, Digest::of(b"x")], vec![]),
            draft(vid, seq, vec![parent], vec![Digest::of(b"x")]),
        ];
        let digests: BTreeSet<Digest> = variants.iter().map(EventDraft::digest).collect();
        prop_assert_eq!(digests.len(), variants.len());
        prop_assert!(!digests.contains(&base.digest()));
    }

    #[test]
    fn wire_format_roundtrips(vid in 0u32..64, n in 0usize..6, k in 0usize..6) {
        let c = KeyedHashSigner::new(9);
        let parents: Vec<Digest> = std::iter::once(Digest::ZERO)
            .chain((0..n).map(|i| Digest::of(&[i as u8])))
            .collect();
        let e = draft(vid, 3, parents, (0..k).map(|i| Digest::of(&[0, i as u8])).collect()).sign(&c);
        let wire = e.to_wire();
        let canon = canonical_encode(&e);
        prop_assert_eq!(&wire[..wire.len() - 36 - e.signature().len()], canon.as_slice());
        prop_assert_eq!(Event::from_wire(&wire).unwrap(), e);
        prop_assert!(Event::from_wire(&wire[..wire.len() - 1]).is_err());
    }
}
