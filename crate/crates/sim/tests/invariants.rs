//! Trace invariants on seeds outside the fixed fuzz range.

use proptest::prelude::*;
use recraft_core::epoch::EpochTerm;
use recraft_core::ids::NodeId;
use recraft_core::observe::Observation;
use recraft_sim::fuzz::{generate, Profile};
use recraft_sim::oracle::check;
use recraft_sim::{run, Trace};
use std::collections::BTreeMap;

/// Every EpochTerm a node reports, in order, must never go down.
fn epoch_terms_regress(trace: &Trace) -> Option<(NodeId, EpochTerm, EpochTerm)> {
    let mut last: BTreeMap<NodeId, EpochTerm> = BTreeMap::new();
    for (_, e, o) in trace.observations() {
        let at = match o {
            Observation::BecameLeader { at, .. } | Observation::ElectionStarted { at, .. } => *at,
            Observation::EpochBumped { to, .. } => *to,
            _ => continue,
        };
        let node = e.node?;
        let prev = last.entry(node).or_insert(at);
        if at < *prev {
            return Some((node, *prev, at));
        }
        *prev = at;
    }
    None
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_seeds_stay_safe(seed in 10_000u64..1_000_000, liveness: bool) {
        let profile = if liveness { Profile::liveness() } else { Profile::safety() };
        let sc = generate(seed, &profile);
        let trace = run(&sc).unwrap();
        let report = check(&sc, &trace);
        prop_assert!(report.is_clean(), "seed {} {:?}:\n{}", seed, profile.mode, report);
        prop_assert_eq!(epoch_terms_regress(&trace), None);
        prop_assert_eq!(run(&sc).unwrap().digest(), trace.digest());
    }
}
