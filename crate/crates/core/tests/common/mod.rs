#![allow(dead_code)]

use std::collections::BTreeMap;

use chrono::{TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vizpref_core::{Choice, FeatureVector, MeasureId, PreferenceRecord, Visualization};

/// Random labeled cloud with `n` points, every class at least two points, plus a random highdim source.
pub fn random_vis(seed: u64, n: usize, classes: u32, dim: usize) -> Visualization {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<u32> = (0..n).map(|i| (i as u32) % classes).collect();
    let points = (0..n)
        .map(|i| {
            let c = labels[i] as f64;
            [c + rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]
        })
        .collect();
    let highdim = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    Visualization::new(format!("v{seed}"), points, labels, Some(highdim)).unwrap()
}

pub fn with_points(vis: &Visualization, points: Vec<[f64; 2]>) -> Visualization {
    Visualization::new(vis.id(), points, vis.labels().to_vec(), vis.highdim().map(<[_]>::to_vec)).unwrap()
}

pub fn record(user: &str, left: &str, right: &str, choice: Choice) -> PreferenceRecord {
    PreferenceRecord {
        user: user.into(),
        left: left.into(),
        right: right.into(),
        choice,
        timestamp: Utc.with_ymd_and_hms(2021, 3, 4, 5, 6, 7).unwrap(),
    }
}

/// Feature vectors from raw values of the given measures.
pub fn features(rows: &[(&str, Vec<(MeasureId, f64)>)]) -> BTreeMap<String, FeatureVector> {
    rows.iter()
        .map(|(id, vals)| (id.to_string(), FeatureVector::from_raw(*id, vals.iter().copied().collect())))
        .collect()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}
