use cones_core::denoiser::{ArchConfig, DenoiserParams, KvEntry};
use cones_core::mask::{apply, concat, concat_all, intersection_count, intersection_fraction, stats, ConceptMask};
use proptest::prelude::*;

/// A small registry with layers of uneven size.
fn registry() -> Vec<KvEntry> {
    let sizes = [40usize, 7, 129, 1, 64];
    let mut off = 3;
    sizes
        .iter()
        .enumerate()
        .map(|(i, &len)| {
            let e = KvEntry {
                name: format!("layer{i}.to_{}", if i % 2 == 0 { "k" } else { "v" }),
                offset: off,
                len,
            };
            off += len + 5;
            e
        })
        .collect()
}

fn total(kv: &[KvEntry]) -> usize {
    kv.iter().map(|e| e.len).sum()
}

fn flags_strategy() -> impl Strategy<Value = Vec<bool>> {
    let n = total(&registry());
    (0.0f64..0.5).prop_flat_map(move |p| proptest::collection::vec(proptest::bool::weighted(p.max(1e-3)), n))
}

fn mask_of(flags: &[bool]) -> ConceptMask {
    ConceptMask::from_flags([7; 32], &registry(), flags).unwrap()
}

proptest! {
    #[test]
    fn roundtrip_and_canonical(f in flags_strategy()) {
        let m = mask_of(&f);
        let bytes = m.encode().unwrap();
        prop_assert_eq!(bytes.len(), m.encoded_len());
        let back = ConceptMask::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.encode().unwrap(), bytes);
        prop_assert_eq!(m.flags(), f);
    }

    #[test]
    fn concat_is_union(a in flags_strategy(), b in flags_strategy(), c in flags_strategy()) {
        let (ma, mb, mc) = (mask_of(&a), mask_of(&b), mask_of(&c));
        let ab = concat(&ma, &mb).unwrap();
        prop_assert_eq!(&ab, &concat(&mb, &ma).unwrap());
        prop_assert_eq!(
            concat(&ab, &mc).unwrap(),
            concat(&ma, &concat(&mb, &mc).unwrap()).unwrap()
        );
        prop_assert_eq!(concat(&ma, &ma).unwrap(), ma.clone());
        prop_assert_eq!(
            ab.concept_count() + intersection_count(&ma, &mb).unwrap(),
            ma.concept_count() + mb.concept_count()
        );
        prop_assert!(ma.is_subset_of(&ab).unwrap());
        prop_assert_eq!(concat_all(&[ma.clone(), mb.clone(), mc.clone()]).unwrap(), concat(&ab, &mc).unwrap());
        let frac = intersection_fraction(&ma, &mb).unwrap();
        prop_assert!((0.0..=1.0).contains(&frac));
    }

    #[test]
    fn sparse_masks_save_storage(seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let kv = registry();
        let n = total(&kv);
        let f: Vec<bool> = (0..n).map(|_| r.gen::<f64>() < 0.015).collect();
        let s = stats(&mask_of(&f));
        let dense = 4 * n;
        prop_assert!(s.encoded_bytes as f64 <= 0.1 * dense as f64 + 64.0 + 30.0 * kv.len() as f64);
    }
}

#[test]
fn apply_then_apply_equals_apply_of_union() {
    let p = DenoiserParams::init(ArchConfig::preset("micro", 12).unwrap(), 5).unwrap();
    let kv = p.kv_registry().to_vec();
    let n = total(&kv);
    let a: Vec<bool> = (0..n).map(|i| i % 7 == 0).collect();
    let b: Vec<bool> = (0..n).map(|i| i % 11 == 3).collect();
    let ma = ConceptMask::from_flags(p.fingerprint(), &kv, &a).unwrap();
    let mb = ConceptMask::from_flags(p.fingerprint(), &kv, &b).unwrap();
    let seq = apply(&apply(&p, &ma).unwrap(), &mb).unwrap();
    let union = apply(&p, &concat(&ma, &mb).unwrap()).unwrap();
    assert_eq!(seq, union);
    let mut wrong = ma.clone();
    wrong.fingerprint[3] ^= 0x40;
    assert!(apply(&p, &wrong).is_err());
    assert!(concat(&ma, &wrong).is_err());
}

#[test]
fn file_roundtrip_at_the_storage_sparsity() {
    let p = DenoiserParams::init(ArchConfig::preset("tiny", 40).unwrap(), 0).unwrap();
    let kv = p.kv_registry().to_vec();
    let n = total(&kv);
    let f: Vec<bool> = (0..n).map(|i| (i * 2654435761) % 1000 < 15).collect();
    let m = ConceptMask::from_flags(p.fingerprint(), &kv, &f).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.cone");
    m.save(&path).unwrap();
    assert_eq!(ConceptMask::load(&path).unwrap(), m);
    let s = stats(&m);
    assert!(s.encoded_bytes as f64 <= 0.1 * (4 * n) as f64, "{s:?}");
}
