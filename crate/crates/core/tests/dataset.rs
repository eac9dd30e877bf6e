use proptest::prelude::*;
use srl_core::dataset::{collect, collect_with_workers, Dataset, DatasetError, NormStats};
use srl_core::envs::NavConfig;

fn small(n: usize, seed: u64) -> Dataset {
    collect(&NavConfig::default(), n, seed).unwrap()
}

#[test]
fn records_chain_within_episodes() {
    let ds = small(600, 4);
    assert_eq!(ds.len(), 600);
    assert_eq!(ds.header.sample_count, 600);
    for w in ds.records.windows(2) {
        if w[0].episode_id == w[1].episode_id {
            assert_eq!(w[0].next_obs, w[1].obs);
            assert_eq!(w[0].next_gt_state, w[1].gt_state);
            assert_eq!(w[0].step_index + 1, w[1].step_index);
        } else {
            assert_eq!(w[1].step_index, 0);
        }
    }
    assert!(ds
        .records
        .iter()
        .all(|r| r.action < 4 && (-1..=1).contains(&r.reward)));
}

#[test]
fn worker_count_does_not_change_the_data() {
    let cfg = NavConfig::default();
    let one = collect_with_workers(&cfg, 700, 9, 1).unwrap();
    let three = collect_with_workers(&cfg, 700, 9, 3).unwrap();
    assert_eq!(one, three);
}

#[test]
fn save_load_round_trip_and_corruption_checks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    let mut ds = small(300, 2);
    ds.mark_split(0.1).unwrap();
    ds.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), ds);

    let bytes = std::fs::read(&path).unwrap();
    let write = |b: &[u8]| {
        std::fs::write(&path, b).unwrap();
        Dataset::load(&path)
    };
    let mut bad = bytes.clone();
    bad[0] ^= 1;
    assert!(matches!(write(&bad), Err(DatasetError::BadMagic)));
    let mut bad = bytes.clone();
    bad[8] = 99;
    assert!(matches!(
        write(&bad),
        Err(DatasetError::Version { found: 99, .. })
    ));
    let mut bad = bytes.clone();
    let mid = bad.len() / 2;
    bad[mid] ^= 0x10;
    assert!(write(&bad).is_err());
    assert!(write(&bytes[..bytes.len() - 3]).is_err());
    let mut longer = bytes.clone();
    longer.push(0);
    assert!(write(&longer).is_err());
}

#[test]
fn validation_split_keeps_whole_episodes() {
    let ds = small(1000, 5);
    let (train, val) = ds.split(0.1).unwrap();
    assert_eq!(train.len() + val.len(), 1000);
    assert!(!val.is_empty());
    let train_eps = train.episode_ids();
    assert!(val.episode_ids().iter().all(|e| !train_eps.contains(e)));
    // one episode cannot be split
    assert!(small(100, 5).split(0.1).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn running_norm_matches_batch_statistics(
        rows in prop::collection::vec(prop::collection::vec(-50.0f64..50.0, 3), 2..40),
        chunk in 1usize..7,
    ) {
        let mut norm = NormStats::running(3);
        let flat: Vec<f64> = rows.concat();
        for c in flat.chunks(3 * chunk) {
            norm.update(c).unwrap();
        }
        let n = rows.len() as f64;
        for j in 0..3 {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
            prop_assert!((norm.mean[j] - mean).abs() < 1e-9);
            prop_assert!((norm.variance()[j] - var).abs() < 1e-7 * (1.0 + var));
        }
        prop_assert!(norm.update(&[1.0, 2.0]).is_err());
    }
}
