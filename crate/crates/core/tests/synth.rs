use galleryrank::rng::SeededRng;
use galleryrank::search::GalleryIndex;
use galleryrank::synth::{degrade_probe, generate, SynthConfig};

fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

fn norm(a: &[f32]) -> f64 {
    dot(a, a).sqrt()
}

#[test]
fn distinct_identities_are_nearly_orthogonal() {
    let mut close = 0;
    for seed in 0..1000u64 {
        let mut c = SynthConfig::single_group(2, 1, 0.0, seed);
        c.dimension = 64;
        let s = generate(&c).unwrap();
        let r = s.records();
        if dot(&r[0].vector, &r[1].vector).abs() < 0.5 {
            close += 1;
        }
    }
    assert!(close >= 990, "{close} of 1000 pairs under 0.5");
}

#[test]
fn heavy_degradation_decorrelates() {
    let mut rng = SeededRng::new(12);
    let mut c = SynthConfig::single_group(1, 1, 0.0, 3);
    c.dimension = 64;
    let v = generate(&c).unwrap().records()[0].vector.clone();
    let mean = (0..1000)
        .map(|_| dot(&v, &degrade_probe(&v, 100.0, &mut rng).unwrap()))
        .sum::<f64>()
        / 1000.0;
    assert!(mean.abs() <= 0.1, "mean similarity {mean}");
}

#[test]
fn degraded_probes_stay_unit() {
    let mut rng = SeededRng::new(4);
    let store = generate(&SynthConfig::single_group(20, 5, 0.1, 1)).unwrap();
    for r in store.records() {
        for sigma in [0.0, 0.01, 0.3, 5.0] {
            let out = degrade_probe(&r.vector, sigma, &mut rng).unwrap();
            assert!((norm(&out) - 1.0).abs() <= 1e-6);
            if sigma == 0.0 {
                assert_eq!(out, r.vector);
            }
        }
    }
}

#[test]
fn within_identity_similarity_falls_with_sigma() {
    let sigmas = [0.02, 0.05, 0.1, 0.2, 0.4];
    let mut means = Vec::new();
    for &sigma in &sigmas {
        let mut total = 0.0;
        let mut pairs = 0;
        for seed in 0..5 {
            let store = generate(&SynthConfig::single_group(100, 4, sigma, seed)).unwrap();
            for (_, imgs) in store.identities() {
                for a in 0..imgs.len() {
                    for b in a + 1..imgs.len() {
                        total += dot(&imgs[a].vector, &imgs[b].vector);
                        pairs += 1;
                    }
                }
            }
        }
        means.push(total / pairs as f64);
    }
    for w in means.windows(2) {
        assert!(w[1] < w[0] - 0.005, "{means:?}");
    }
}

#[test]
fn generated_store_is_valid_and_deterministic() {
    let c = SynthConfig::single_group(50, 5, 0.12, 7);
    let a = generate(&c).unwrap();
    let b = generate(&c).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 250);
    for (id, imgs) in a.identities() {
        assert!(id.starts_with("G0-"));
        let caps: Vec<u32> = imgs.iter().map(|r| r.capture_index).collect();
        assert_eq!(caps, vec![1, 2, 3, 4, 5]);
        assert!(imgs.iter().all(|r| (norm(&r.vector) - 1.0).abs() <= 1e-5));
    }
    // Low noise: every image's nearest other image belongs to its own identity.
    let index = GalleryIndex::build(a.records().to_vec()).unwrap();
    for r in a.records() {
        let res = index.search(&r.vector).unwrap();
        assert_eq!(*res.matches[1].identity_id, r.identity_id);
    }
}
