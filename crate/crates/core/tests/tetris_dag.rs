mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::oracle::Oracle;
use common::{gossip, tetris_of, v, Dag};
use tetris_core::{Event, Insert, KeyedHashSigner, Membership, Tetris};

fn sparse_gossip_dag() -> Dag {
    let mut g = Dag::new(4);
    g.genesis(&[0, 1, 2, 3]);
    g.ev("a1", 0, Some("g0"), &["g2"]);
    g.ev("c1", 2, Some("g2"), &["g0"]);
    g.ev("b1", 1, Some("g1"), &["g0"]);
    g.ev("b2", 1, Some("b1"), &["g2"]);
    g.ev("b3", 1, Some("b2"), &["a1"]);
    g.ev("a2", 0, Some("a1"), &["b1"]);
    g.ev("c2", 2, Some("c1"), &["b2"]);
    g.ev("b4", 1, Some("b3"), &["a2", "c2"]);
    g
}

#[test]
fn bob_at_base_plus_four_knows_well_three_bases() {
    let g = sparse_gossip_dag();
    let t = &g.tetris;
    assert_eq!(g.get("b4").seq(), 4);
    assert_eq!(g.get("c2").seq(), 3);
    for base in ["g0", "g1", "g2"] {
        assert!(t.know_well(&g.d("b4"), &g.d(base)).unwrap(), "{base}");
        assert!(t.know(&g.d("b3"), &g.d("g1")).unwrap());
    }
    assert!(!t.know_well(&g.d("b3"), &g.d("g0")).unwrap());
    assert!(!t.know_well(&g.d("b4"), &g.d("g3")).unwrap());
    assert!(!t.know(&g.d("b4"), &g.d("g3")).unwrap());
}

#[test]
fn pending_then_cascade() {
    let mut g = Dag::new(4);
    g.genesis(&[0, 1]);
    let p = g.make(2, None, &["g0"], &[]);
    let child = {
        let mut h = Dag::new(4);
        h.genesis(&[0, 1]);
        h.add("p", p.clone());
        h.make(3, None, &["p", "g1"], &[])
    };
    let mut t = Tetris::new(Membership::first(4).unwrap());
    for name in ["g0", "g1"] {
        t.insert(g.get(name).clone());
    }
    assert_eq!(t.insert(child.clone()), Insert::Pending(BTreeSet::from([p.digest()])));
    assert_eq!(t.missing_parents(), BTreeSet::from([p.digest()]));
    let req = t.pull_requests(v(1));
    assert_eq!(req.len(), 1);
    assert_eq!(req[0].wanted, p.digest());
    assert_eq!(t.insert(p.clone()), Insert::Accepted(vec![p.digest(), child.digest()]));
    assert_eq!(t.insert(p.clone()), Insert::Accepted(vec![]));
    assert!(t.missing_parents().is_empty());
}

#[test]
fn forks_are_kept_and_hide_the_forker() {
    let mut g = Dag::new(4);
    g.genesis(&[0, 1, 2, 3]);
    g.ev_tx("x", 3, Some("g3"), &["g0"], &[tetris_core::Digest::of(b"a")]);
    g.ev_tx("y", 3, Some("g3"), &["g0"], &[tetris_core::Digest::of(b"b")]);
    assert!(g.tetris.fork_records().contains(&(v(3), 1)));
    g.ev("p", 1, Some("g1"), &["x"]);
    g.ev("q", 2, Some("g2"), &["y"]);
    g.ev("r", 0, Some("g0"), &["p", "q"]);
    let t = &g.tetris;
    assert!(t.know(&g.d("p"), &g.d("x")).unwrap());
    assert!(t.know(&g.d("p"), &g.d("g3")).unwrap());
    assert!(!t.know(&g.d("r"), &g.d("x")).unwrap());
    assert!(!t.know(&g.d("r"), &g.d("g3")).unwrap());
    assert!(t.know(&g.d("r"), &g.d("g1")).unwrap());
    assert!(t.ancestors(&g.d("r")).unwrap().contains(&g.d("y")));
    assert!(Tetris::fork_exclusivity_violations(&[t]).is_empty());
}

#[test]
fn ancestors_basics() {
    let mut g = Dag::new(4);
    g.genesis(&[0]);
    g.ev("a1", 0, Some("g0"), &[]);
    g.ev("a2", 0, Some("a1"), &[]);
    let t = &g.tetris;
    assert_eq!(t.ancestors(&g.d("g0")).unwrap(), BTreeSet::from([g.d("g0")]));
    assert_eq!(
        t.ancestors(&g.d("a2")).unwrap(),
        BTreeSet::from([g.d("g0"), g.d("a1"), g.d("a2")])
    );
    assert!(t.ancestors(&tetris_core::Digest::of(b"nope")).is_err());
}

#[test]
fn sub_tetris_view() {
    let g = sparse_gossip_dag();
    let sub = g.tetris.sub_tetris(&g.d("b3")).unwrap();
    assert_eq!(sub.root().digest(), g.d("b3"));
    assert!(sub.contains(&g.d("a1")) && !sub.contains(&g.d("a2")));
    assert_eq!(sub.len(), g.tetris.ancestors(&g.d("b3")).unwrap().len());
}

#[test]
fn consistency_checker_detects_substituted_ancestor() {
    let g = sparse_gossip_dag();
    let a = &g.tetris;
    assert!(a.consistent_with(a));

    // Same claimed digest for b1, different parents: only possible for a
    // forged store, which is what the checker must catch.
    let mut b = Tetris::new(Membership::first(4).unwrap());
    for name in ["g0", "g1", "g2", "g3"] {
        b.insert(g.get(name).clone());
    }
    let honest = g.get("b1");
    let forged = g.make(1, Some("g1"), &["g2"], &[]);
    let mut wire = forged.to_wire();
    let at = wire.len() - 32 - 4 - forged.signature().len();
    wire[at..at + 32].copy_from_slice(honest.digest().as_bytes());
    let forged = Event::from_wire(&wire).unwrap();
    assert_eq!(forged.digest(), honest.digest());
    assert!(matches!(b.insert(forged), Insert::Accepted(_)));
    assert!(!a.consistent_with(&b));
}

#[test]
fn dot_export_marks_forks_and_witnesses() {
    let mut g = Dag::new(4);
    g.genesis(&[0, 1, 2, 3]);
    g.ev_tx("x", 3, Some("g3"), &["g0"], &[tetris_core::Digest::of(b"a")]);
    g.ev_tx("y", 3, Some("g3"), &["g0"], &[tetris_core::Digest::of(b"b")]);
    let dot = g.tetris.to_dot(&BTreeSet::from([g.d("g0")]));
    assert!(dot.starts_with("digraph"));
    assert!(dot.contains("label=\"3:1\""));
    assert!(dot.contains("peripheries=2"));
    assert!(dot.contains("style=filled"));
}

fn gossip_steps(max_n: usize) -> impl Strategy<Value = (usize, Vec<(usize, u64)>)> {
    prop_oneof![Just(4usize), Just(7usize)].prop_flat_map(move |n| {
        let n = n.min(max_n);
        (Just(n), prop::collection::vec((0..n, 0u64..(1 << n)), 8..48))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn predicates_match_reference((n, steps) in gossip_steps(7)) {
        let crypto = KeyedHashSigner::new(1);
        let m = Membership::first(n).unwrap();
        let events = gossip(n, &steps, &crypto);
        let t = tetris_of(m.clone(), &events);
        let o = Oracle::new(m, &events);
        prop_assert_eq!(t.len(), o.order.len());
        for x in &o.order {
            prop_assert_eq!(&t.ancestors(x).unwrap(), o.ancestors(x));
            for y in o.order.iter().step_by(3) {
                let know = t.know(x, y).unwrap();
                let well = t.know_well(x, y).unwrap();
                prop_assert_eq!(know, o.know(x, y));
                prop_assert_eq!(well, o.know_well(x, y));
                prop_assert!(!know || o.ancestors(x).contains(y));
                prop_assert!(!well || know);
            }
        }
    }

    #[test]
    fn arrival_order_does_not_change_the_result((n, steps) in gossip_steps(7), seed in any::<u64>()) {
        let crypto = KeyedHashSigner::new(2);
        let m = Membership::first(n).unwrap();
        let events = gossip(n, &steps, &crypto);
        let reference = tetris_of(m.clone(), &events);
        let mut shuffled = events.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut t = Tetris::new(m);
        for e in shuffled {
            t.insert(e);
            // closure: every accepted event has all parents accepted
            for a in t.events() {
                for p in a.parent_hashes().iter().filter(|p| !p.is_zero()) {
                    prop_assert!(t.contains(p));
                }
            }
        }
        prop_assert_eq!(t.pending_len(), 0);
        let mine: BTreeSet<_> = t.events().map(|e| e.digest()).collect();
        let theirs: BTreeSet<_> = reference.events().map(|e| e.digest()).collect();
        prop_assert_eq!(mine, theirs);
        prop_assert!(t.consistent_with(&reference) && reference.consistent_with(&t));
    }

    #[test]
    fn answers_never_change_as_the_dag_grows((n, steps) in gossip_steps(4), cut in 0.2f64..0.8) {
        let crypto = KeyedHashSigner::new(3);
        let m = Membership::first(n).unwrap();
        let events = gossip(n, &steps, &crypto);
        let k = ((events.len() as f64) * cut) as usize;
        let early = tetris_of(m.clone(), &events[..k]);
        let full = tetris_of(m, &events);
        let old: Vec<_> = early.events().map(|e| e.digest()).collect();
        for x in &old {
            for y in &old {
                prop_assert_eq!(early.know(x, y).unwrap(), full.know(x, y).unwrap());
                prop_assert_eq!(early.know_well(x, y).unwrap(), full.know_well(x, y).unwrap());
            }
        }
    }
}
