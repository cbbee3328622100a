use std::collections::{BTreeSet, HashSet};

use episodic_metric::episodes::{build_episode, episode_at, episode_stream, ClassPool, Episode, EpisodeSpec};
use episodic_metric::rng::component_rng;
use proptest::prelude::*;

fn pool(classes: usize, per_class: usize) -> ClassPool {
    ClassPool::new(
        (0..classes)
            .map(|c| (c * 3 + 1, (0..per_class).map(|i| 1000 * c + i).collect()))
            .collect(),
    )
}

/// Every structural invariant of one episode, checked from the raw lists.
fn check(ep: &Episode, spec: &EpisodeSpec, pool: &ClassPool) {
    assert_eq!(ep.support.len(), spec.ways * spec.shots);
    assert_eq!(ep.query.len(), spec.query_ways * spec.queries);
    assert_eq!(ep.class_map.len(), spec.ways);
    let distinct: HashSet<usize> = ep.class_map.iter().copied().collect();
    assert_eq!(distinct.len(), spec.ways, "class_map not injective");

    let support: HashSet<usize> = ep.support.iter().map(|l| l.sample).collect();
    let query: HashSet<usize> = ep.query.iter().map(|l| l.sample).collect();
    assert_eq!(support.len(), ep.support.len(), "duplicate support sample");
    assert_eq!(query.len(), ep.query.len(), "duplicate query sample");
    assert!(support.is_disjoint(&query));

    let mut support_counts = vec![0; spec.ways];
    for l in &ep.support {
        support_counts[l.label] += 1;
        assert!(pool.samples_of(ep.class_map[l.label]).unwrap().contains(&l.sample));
    }
    assert!(support_counts.iter().all(|&n| n == spec.shots));
    let mut query_counts = vec![0; spec.ways];
    for l in &ep.query {
        query_counts[l.label] += 1;
        assert!(pool.samples_of(ep.class_map[l.label]).unwrap().contains(&l.sample));
    }
    assert_eq!(query_counts.iter().filter(|&&n| n == spec.queries).count(), spec.query_ways);
    assert!(query_counts.iter().all(|&n| n == 0 || n == spec.queries));
}

#[test]
fn ten_thousand_episodes_hold_every_invariant() {
    let p = pool(7, 20);
    let spec = EpisodeSpec::balanced(5, 1, 15).unwrap();
    let mut n = 0;
    for ep in episode_stream(&p, spec, 10_000, 42) {
        check(&ep.unwrap(), &spec, &p);
        n += 1;
    }
    assert_eq!(n, 10_000);
}

#[test]
fn streams_are_seeded() {
    let p = pool(7, 20);
    let spec = EpisodeSpec::balanced(5, 2, 3).unwrap();
    let a: Vec<Episode> = episode_stream(&p, spec, 50, 42).map(Result::unwrap).collect();
    let b: Vec<Episode> = episode_stream(&p, spec, 50, 42).map(Result::unwrap).collect();
    let c: Vec<Episode> = episode_stream(&p, spec, 50, 43).map(Result::unwrap).collect();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a[17], episode_at(&p, &spec, 42, 17).unwrap());
}

#[test]
fn every_class_is_drawn_eventually() {
    let p = pool(7, 20);
    let spec = EpisodeSpec::balanced(5, 1, 1).unwrap();
    let seen: BTreeSet<usize> = episode_stream(&p, spec, 10_000, 5)
        .flat_map(|e| e.unwrap().class_map)
        .collect();
    assert_eq!(seen, p.class_ids().collect());
}

#[test]
fn class_frequencies_are_uniform_within_five_sigma() {
    let (n_classes, ways, draws) = (7, 5, 10_000);
    let p = pool(n_classes, 20);
    let spec = EpisodeSpec::balanced(ways, 1, 1).unwrap();
    let mut counts = std::collections::BTreeMap::new();
    for ep in episode_stream(&p, spec, draws, 9) {
        for c in ep.unwrap().class_map {
            *counts.entry(c).or_insert(0usize) += 1;
        }
    }
    // each class is in a given episode with probability C/N
    let q = ways as f64 / n_classes as f64;
    let mean = draws as f64 * q;
    let sigma = (draws as f64 * q * (1.0 - q)).sqrt();
    for (c, n) in counts {
        let z = (n as f64 - mean) / sigma;
        assert!(z.abs() < 5.0, "class {c}: {n} draws, z = {z:.2}");
    }
}

#[test]
fn two_samples_per_class_force_the_partition() {
    let p = pool(2, 2);
    let spec = EpisodeSpec::balanced(2, 1, 1).unwrap();
    for t in 0..20 {
        let ep = episode_at(&p, &spec, 0, t).unwrap();
        check(&ep, &spec, &p);
        let all: BTreeSet<usize> = ep.support.iter().chain(&ep.query).map(|l| l.sample).collect();
        assert_eq!(all, [0, 1, 1000, 1001].into_iter().collect());
    }
}

#[test]
fn short_classes_are_rejected() {
    let p = pool(5, 3);
    let spec = EpisodeSpec::balanced(5, 2, 2).unwrap();
    assert!(build_episode(&p, &spec, &mut component_rng(0, "test")).is_err());
    let wide = EpisodeSpec::balanced(6, 1, 1).unwrap();
    assert!(build_episode(&p, &wide, &mut component_rng(0, "test")).is_err());
}

proptest! {
    #[test]
    fn sampled_episodes_are_well_formed(
        classes in 2usize..9,
        per_class in 2usize..12,
        ways in 2usize..9,
        shots in 1usize..5,
        queries in 1usize..5,
        query_ways in 1usize..9,
        seed in any::<u64>(),
        t in 0usize..1000,
    ) {
        let query_ways = query_ways.min(ways);
        prop_assume!(ways <= classes && shots + queries <= per_class);
        let p = pool(classes, per_class);
        let spec = EpisodeSpec::new(ways, shots, query_ways, queries).unwrap();
        let ep = episode_at(&p, &spec, seed, t).unwrap();
        check(&ep, &spec, &p);
        prop_assert_eq!(ep, episode_at(&p, &spec, seed, t).unwrap());
    }
}
