//! Runs fuzz seeds against engines with planted defects.
//!
//! Each [`Mutation`] must trip at least one oracle. The runner reports the
//! first seed that exposes it and the properties that fired.

use crate::fuzz::{generate, Mode, Profile};
use crate::oracle::{check, Report};
use recraft_core::node::Mutation;
use std::collections::BTreeSet;
use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Detection {
    pub mutation: Mutation,
    /// First exposing seed and the profile it ran under.
    pub found: Option<(u64, Mode)>,
    /// Oracle properties that fired on that seed.
    pub properties: BTreeSet<String>,
    pub runs: usize,
}

impl fmt::Display for Detection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.found {
            Some((seed, mode)) => write!(
                f,
                "{:?}: seed {seed} ({mode:?}) after {} runs: {}",
                self.mutation,
                self.runs,
                self.properties.iter().cloned().collect::<Vec<_>>().join(", ")
            ),
            None => write!(f, "{:?}: undetected after {} runs", self.mutation, self.runs),
        }
    }
}

fn properties(r: &Report) -> BTreeSet<String> {
    let mut out: BTreeSet<String> = r.safety.iter().map(|v| format!("{:?}", v.property)).collect();
    if !r.linearizability.is_empty() {
        out.insert("Linearizability".into());
    }
    if !r.liveness.is_empty() {
        out.insert("Liveness".into());
    }
    if r.halted {
        out.insert("Runaway".into());
    }
    out
}

/// Tries seeds `0..seeds`, each under the safety and then the liveness profile.
pub fn detect(mutation: Mutation, seeds: u64) -> Detection {
    let mut runs = 0;
    for seed in 0..seeds {
        for mut profile in [Profile::safety(), Profile::liveness()] {
            profile.mutation = Some(mutation);
            let sc = generate(seed, &profile);
            let trace = crate::run(&sc).expect("generated scenarios are valid");
            runs += 1;
            let report = check(&sc, &trace);
            if !report.is_clean() {
                return Detection {
                    mutation,
                    found: Some((seed, profile.mode)),
                    properties: properties(&report),
                    runs,
                };
            }
        }
    }
    Detection { mutation, found: None, properties: BTreeSet::new(), runs }
}

pub fn suite(seeds: u64) -> Vec<Detection> {
    Mutation::ALL.iter().map(|m| detect(*m, seeds)).collect()
}
