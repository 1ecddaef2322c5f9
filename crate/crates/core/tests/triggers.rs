//! Trigger prefilter against a brute-force evaluation of simple rules.

use chrono::{TimeZone, Utc};
use proptest::prelude::*;

use careloop_core::bundler::{build_bundles, BundlerConfig};
use careloop_core::ingest::{ClinicalEvent, StayId};
use careloop_core::memory::{match_triggers, GlobalProtocol, GlobalRule, IndividualProtocol};

const ANALYTES: &[&str] = &["Lactate", "Glucose", "Creatinine", "Potassium", "Sodium"];
const OPS: &[&str] = &["<", ">", "<=", ">="];

fn holds(op: &str, v: f64, t: f64) -> bool {
    match op {
        "<" => v < t,
        ">" => v > t,
        "<=" => v <= t,
        _ => v >= t,
    }
}

type Atom = (usize, usize, i32);

fn atom() -> impl Strategy<Value = Atom> {
    (0..ANALYTES.len(), 0..OPS.len(), 0i32..20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn prefilter_matches_brute_force(
        rules in proptest::collection::vec(proptest::collection::vec(atom(), 1..3), 1..6),
        labs in proptest::collection::vec((0..ANALYTES.len(), 0i32..20), 1..6),
    ) {
        let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        let stay = StayId::from("p");
        let events: Vec<ClinicalEvent> = labs
            .iter()
            .map(|&(a, v)| ClinicalEvent::lab(stay.clone(), t0, ANALYTES[a], v as f64, Some(5.0), Some(10.0)).unwrap())
            .collect();
        let bundle = build_bundles(&events, &BundlerConfig::default()).unwrap().remove(0);

        let mut protocol = GlobalProtocol::new();
        let mut expected = Vec::new();
        for (i, atoms) in rules.iter().enumerate() {
            let cond = atoms
                .iter()
                .map(|&(a, o, t)| format!("{} {} {}", ANALYTES[a], OPS[o], t))
                .collect::<Vec<_>>()
                .join(" OR ");
            let id = format!("R_{i:03}");
            protocol
                .append_rule(GlobalRule::new(&id, "TEST", &cond, "act", format!("IF {cond} THEN act")).unwrap())
                .unwrap();
            let fires = atoms.iter().any(|&(a, o, t)| {
                labs.iter().any(|&(la, v)| la == a && holds(OPS[o], v as f64, t as f64))
            });
            if fires {
                expected.push(id);
            }
        }
        let got = match_triggers(&bundle, &IndividualProtocol::default(), &protocol);
        prop_assert_eq!(got, expected);
    }
}
