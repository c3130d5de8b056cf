//! Straight-line reference implementations shared by the integration tests.
//! They avoid the library's search and curation code paths entirely.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use galleryrank::protocol::{CurationConfig, Label, RankSample};
use galleryrank::rng::SeededRng;
use galleryrank::store::{EmbeddingRecord, EmbeddingStore};

/// `(identity_id, image_id, similarity)` for every gallery image, best first;
/// ties by ascending `(identity_id, image_id)`.
pub fn oracle_search(gallery: &[&EmbeddingRecord], probe: &[f32]) -> Vec<(String, String, f64)> {
    let mut scored: Vec<(String, String, f64)> = gallery
        .iter()
        .map(|r| {
            let mut s = 0.0f64;
            for i in 0..probe.len() {
                s += probe[i] as f64 * r.vector[i] as f64;
            }
            (r.identity_id.clone(), r.image_id.clone(), s)
        })
        .collect();
    scored.sort_by(|a, b| match b.2.partial_cmp(&a.2).unwrap() {
        Ordering::Equal => (&a.0, &a.1).cmp(&(&b.0, &b.1)),
        o => o,
    });
    scored
}

/// Rank-one identity and the `d_in` smallest ranks of its other images.
pub fn oracle_ranks(ranking: &[(String, String, f64)], d_in: usize) -> Option<(String, Vec<u32>)> {
    let top = ranking[0].0.clone();
    let ranks: Vec<u32> = (1..ranking.len())
        .filter(|&i| ranking[i].0 == top)
        .map(|i| i as u32 + 1)
        .take(d_in)
        .collect();
    (ranks.len() == d_in).then_some((top, ranks))
}

/// Partial Fisher–Yates written against `SeededRng::below` only.
fn draw(rng: &mut SeededRng, n: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + rng.below((n - i) as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

/// Best-rank curation without probe degradation, by explicit gallery set
/// arithmetic. Returns the samples and the Out-of-gallery skip count.
pub fn oracle_curate(store: &EmbeddingStore, config: &CurationConfig) -> (Vec<RankSample>, usize) {
    let mut by_identity: BTreeMap<&str, Vec<&EmbeddingRecord>> = BTreeMap::new();
    for r in store.records() {
        if config.group.is_empty() || r.group == config.group {
            by_identity.entry(&r.identity_id).or_default().push(r);
        }
    }
    let mut rng = SeededRng::with_stream(config.rng_seed, 0);
    let mut probes: Vec<&EmbeddingRecord> = Vec::new();
    let mut enrolled: BTreeSet<(String, String)> = BTreeSet::new();
    for images in by_identity.values_mut() {
        if images.len() < config.min_images_per_identity {
            continue;
        }
        images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let mut best = 0;
        for i in 1..images.len() {
            if (images[i].capture_index, &images[i].image_id) >= (images[best].capture_index, &images[best].image_id) {
                best = i;
            }
        }
        probes.push(images[best]);
        let rest: Vec<&EmbeddingRecord> = images
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != best)
            .map(|(_, r)| *r)
            .collect();
        for i in draw(&mut rng, rest.len(), config.enrolled_per_identity) {
            enrolled.insert((rest[i].identity_id.clone(), rest[i].image_id.clone()));
        }
    }
    let lookup: BTreeMap<(String, String), &EmbeddingRecord> = store
        .records()
        .iter()
        .map(|r| ((r.identity_id.clone(), r.image_id.clone()), r))
        .collect();

    let mut samples = Vec::new();
    let mut skipped = 0;
    for p in probes {
        let inside: Vec<&EmbeddingRecord> = enrolled.iter().map(|k| lookup[k]).collect();
        let outside: Vec<&EmbeddingRecord> = enrolled
            .iter()
            .filter(|(id, _)| *id != p.identity_id)
            .map(|k| lookup[k])
            .collect();
        for (gallery, label) in [(inside, Label::InGallery), (outside, Label::OutOfGallery)] {
            let ranking = oracle_search(&gallery, &p.vector);
            match oracle_ranks(&ranking, config.d_in) {
                Some((_, ranks)) => samples.push(RankSample {
                    ranks,
                    label,
                    probe_identity: p.identity_id.clone(),
                    group: p.group.clone(),
                    condition: config.condition.clone(),
                    gallery_size: gallery.len() as u32,
                }),
                None if label == Label::OutOfGallery => skipped += 1,
                None => panic!("in-gallery search without enough images"),
            }
        }
    }
    (samples, skipped)
}

/// Unit vector with coordinates drawn from a coarse grid, so that distinct
/// records often have exactly equal similarities.
pub fn coarse_unit(rng: &mut SeededRng, dim: usize, levels: u64) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.below(levels) as f32 - (levels / 2) as f32).collect();
        if v.iter().any(|&x| x != 0.0) {
            return galleryrank::store::l2_normalize(&v).unwrap();
        }
    }
}

pub fn gaussian_unit(rng: &mut SeededRng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f32> = (0..dim).map(|_| rng.normal() as f32).collect();
        if let Some(u) = galleryrank::store::l2_normalize(&v) {
            return u;
        }
    }
}

/// Labelled samples with arbitrary ranks, for split/augment/fold properties.
pub fn random_samples(rng: &mut SeededRng, n: usize, d_in: usize, gallery_size: u32) -> Vec<RankSample> {
    (0..n)
        .map(|i| {
            let mut ranks: Vec<u32> = (0..d_in).map(|_| 2 + rng.below(gallery_size as u64 - 1) as u32).collect();
            ranks.sort_unstable();
            RankSample {
                ranks,
                label: if rng.below(2) == 1 { Label::InGallery } else { Label::OutOfGallery },
                probe_identity: format!("p{i:05}"),
                group: "G".into(),
                condition: "c".into(),
                gallery_size,
            }
        })
        .collect()
}
