use std::collections::HashSet;

use mpe_core::synth::{generate, token_name};
use mpe_core::SynthSpec;

fn spec() -> SynthSpec {
    SynthSpec {
        num_fields: 4,
        features_per_field: 1000,
        zipf_exponent: 1.1,
        informative_fraction: 0.1,
        logit_scale: 1.0,
        noise_std: 0.0,
        num_samples: 100_000,
        seed: 7,
        importance_correlation: 1.0,
        target_positive_rate: Some(0.25),
    }
}

#[test]
fn head_token_frequency_matches_zipf_mass() {
    let s = spec();
    let data = generate(&s).unwrap();
    let h: f64 = (1..=s.features_per_field).map(|k| (k as f64).powf(-s.zipf_exponent)).sum();
    let expected = s.num_samples as f64 / h;
    for f in 0..s.num_fields {
        let top = (0..data.len()).filter(|&i| data.ranks[i * s.num_fields + f] == 0).count() as f64;
        assert!((top - expected).abs() <= 0.2 * expected, "field {f}: {top} vs {expected}");
    }
}

#[test]
fn positive_rate_hits_target() {
    let data = generate(&spec()).unwrap();
    assert!((data.positive_rate() - 0.25).abs() <= 0.02, "{}", data.positive_rate());
}

#[test]
fn informative_count_per_field() {
    let s = spec();
    let data = generate(&s).unwrap();
    for f in 0..s.num_fields {
        let nonzero = (0..s.features_per_field as u32).filter(|&r| data.weight(f, r) != 0.0).count();
        assert_eq!(nonzero, 100);
        // full correlation puts the weight on the head tokens
        assert!((0..100).all(|r| data.weight(f, r) != 0.0));
    }
    let null = generate(&SynthSpec { informative_fraction: 0.0, ..s }).unwrap();
    assert!(null.weights.iter().all(|&w| w == 0.0));
}

#[test]
fn same_seed_same_bytes() {
    let s = SynthSpec { num_samples: 5000, ..spec() };
    let (mut a, mut b) = (Vec::new(), Vec::new());
    generate(&s).unwrap().write_tsv(&mut a).unwrap();
    generate(&s).unwrap().write_tsv(&mut b).unwrap();
    assert_eq!(a, b);
    let mut c = Vec::new();
    generate(&SynthSpec { seed: 8, ..s }).unwrap().write_tsv(&mut c).unwrap();
    assert_ne!(a, c);
}

#[test]
fn every_logged_token_has_a_weight() {
    let s = SynthSpec { num_samples: 3000, ..spec() };
    let data = generate(&s).unwrap();
    let (mut log, mut side) = (Vec::new(), Vec::new());
    data.write_tsv(&mut log).unwrap();
    data.write_weights(&mut side).unwrap();
    let side = String::from_utf8(side).unwrap();
    let known: HashSet<&str> = side.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(known.len(), s.num_fields * s.features_per_field);
    let log = String::from_utf8(log).unwrap();
    let mut rows = 0;
    for line in log.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), s.num_fields + 1);
        assert!(cols[0] == "0" || cols[0] == "1");
        for tok in &cols[1..] {
            assert!(known.contains(tok), "{tok}");
        }
        rows += 1;
    }
    assert_eq!(rows, s.num_samples);
    assert!(known.contains(token_name(0, 0).as_str()));
}

#[test]
fn invalid_specs_are_rejected() {
    for bad in [
        SynthSpec { num_fields: 0, ..spec() },
        SynthSpec { zipf_exponent: -1.0, ..spec() },
        SynthSpec { informative_fraction: 1.5, ..spec() },
        SynthSpec { target_positive_rate: Some(1.0), ..spec() },
    ] {
        assert!(generate(&bad).is_err());
    }
}
