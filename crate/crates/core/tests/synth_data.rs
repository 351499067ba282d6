//! Dataset generation, storage and featurization.

use geoslot::synth::{generate_dataset, load_dataset, Dataset, Featurizer, RawGrid, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN_CLEAN_16_SEED_7: &str = "27628525e07b5128c9306c625595caadd80a0036c8a59a91d1e8a8d22e2f7976";

#[test]
fn golden_manifest_checksum() {
    let ds = Dataset::generate(&SceneSpec::default(), 16, 7).unwrap();
    assert_eq!(ds.manifest.checksum().unwrap(), GOLDEN_CLEAN_16_SEED_7);
}

#[test]
fn written_dataset_round_trips_and_detects_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&SceneSpec::corrupted(), 6, 3, dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, m);
    let mem = Dataset::generate(&SceneSpec::corrupted(), 6, 3).unwrap();
    for (a, b) in back.pairs.iter().zip(&mem.pairs) {
        assert_eq!(a.raw_q, b.raw_q);
        assert_eq!(a.raw_g, b.raw_g);
    }
    let victim = dir.path().join(&m.files[2].path_g);
    let mut bytes = std::fs::read(&victim).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&victim, bytes).unwrap();
    assert!(load_dataset(dir.path()).is_err());
}

#[test]
fn seeds_change_scenes_but_not_shapes() {
    let a = Dataset::generate(&SceneSpec::default(), 8, 1).unwrap();
    let b = Dataset::generate(&SceneSpec::default(), 8, 2).unwrap();
    assert_ne!(a.manifest.checksum().unwrap(), b.manifest.checksum().unwrap());
    assert_eq!(a.manifest.splits.train.len() + a.manifest.splits.test.len(), 8);
    for p in a.pairs.iter().chain(&b.pairs) {
        assert_eq!(p.raw_q.size, 32);
    }
}

fn random_grid(rng: &mut ChaCha8Rng, n: usize) -> RawGrid {
    let mut g = RawGrid::filled(n, 0.0);
    for x in g.data.iter_mut() {
        *x = rng.random_range(0.0..1.0);
    }
    g
}

#[test]
fn featurizer_separates_distinct_grids() {
    let f = Featurizer::new(32, 4, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grids: Vec<RawGrid> = (0..24).map(|_| random_grid(&mut rng, 32)).collect();
    let feats: Vec<Vec<f64>> = grids.iter().map(|g| f.featurize(g).unwrap().as_tensor().data().to_vec()).collect();
    for i in 0..feats.len() {
        for j in 0..i {
            let d: f64 = feats[i].iter().zip(&feats[j]).map(|(a, b)| (a - b).abs()).sum();
            assert!(d > 1e-6, "grids {i} and {j} collide");
        }
    }
    // Single-pixel edits move the features too.
    let mut edited = grids[0].clone();
    let [r, g, b] = edited.px(17, 9);
    edited.set_px(17, 9, [1.0 - r, g, b]);
    assert_ne!(f.featurize(&edited).unwrap().as_tensor(), f.featurize(&grids[0]).unwrap().as_tensor());
}
