//! Profile matrix statistics and the manifest + f32 matrix format.

use std::fs;

use potsal::profiles::{column_stats, load_profiles, save_profiles, FilterMeta, SaliencyMatrix};
use potsal::tail::{fit_tail_model, load_tail_model, save_tail_model};
use proptest::prelude::*;

fn metas(l: usize) -> Vec<FilterMeta> {
    (0..l)
        .map(|j| FilterMeta {
            filter_id: j,
            layer_name: format!("block{}.conv", j / 3),
            layer_group: format!("conv{}", j / 3 + 1),
            num_params: 9 * (j + 1) + 1,
        })
        .collect()
}

fn matrix_strategy() -> impl Strategy<Value = SaliencyMatrix> {
    (2usize..40, 1usize..8).prop_flat_map(|(n, l)| {
        prop::collection::vec(0.0f32..100.0, n * l)
            .prop_map(move |values| SaliencyMatrix::new(n, values, metas(l)).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn thresholds_are_monotone_in_quantile(col in prop::collection::vec(0.0f64..10.0, 2..200), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(column_stats(&col, lo).unwrap().threshold <= column_stats(&col, hi).unwrap().threshold);
    }

    #[test]
    fn exceedance_rate_respects_quantile(col in prop::collection::vec(0.0f64..10.0, 2..200), q in 0.01f64..0.99) {
        let s = column_stats(&col, q).unwrap();
        let n = col.len() as f64;
        prop_assert!(s.n_exceed as f64 / n <= 1.0 - q + 2.0 / n);
        prop_assert_eq!(s.n_exceed, col.iter().filter(|&&v| v > s.threshold).count());
    }

    #[test]
    fn save_load_save_is_byte_identical(m in matrix_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let first = save_profiles(&m, &dir.path().join("a")).unwrap();
        let loaded = load_profiles(&first).unwrap();
        prop_assert_eq!(&loaded, &m);
        let second = save_profiles(&loaded, &dir.path().join("b")).unwrap();
        prop_assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
        prop_assert_eq!(
            fs::read(dir.path().join("a/profiles.f32")).unwrap(),
            fs::read(dir.path().join("b/profiles.f32")).unwrap()
        );
    }

    #[test]
    fn tail_model_save_load_save_is_byte_identical(m in matrix_strategy(), q in 0.5f64..0.95) {
        let dir = tempfile::tempdir().unwrap();
        let model = fit_tail_model(&m, q).unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        save_tail_model(&model, &a).unwrap();
        let loaded = load_tail_model(&a).unwrap();
        prop_assert_eq!(&loaded, &model);
        save_tail_model(&loaded, &b).unwrap();
        prop_assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }
}

/// A manifest written by hand, the way an external exporter would, loads and
/// matches its declared contents.
#[test]
fn foreign_manifest_loads() {
    let dir = tempfile::tempdir().unwrap();
    let values: [f32; 6] = [0.5, 1.0, 0.25, 2.0, 0.0, 3.5];
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.path().join("grads.bin"), bytes).unwrap();
    let manifest = r#"{"version": 1, "num_samples": 3, "num_filters": 2, "dtype": "f32le",
        "matrix_file": "grads.bin",
        "filters": [
          {"filter_id": 0, "layer_name": "layer1.0.conv1", "layer_group": "conv2_x", "num_params": 577},
          {"filter_id": 1, "layer_name": "layer1.0.conv1", "layer_group": "conv2_x", "num_params": 577}
        ]}"#;
    let path = dir.path().join("manifest.json");
    fs::write(&path, manifest).unwrap();
    let m = load_profiles(&path).unwrap();
    assert_eq!((m.num_samples(), m.num_filters()), (3, 2));
    assert_eq!(m.column(1).unwrap(), vec![1.0, 2.0, 3.5]);
    assert_eq!(m.filters()[0].num_params, 577);

    // negative and non-finite entries are rejected
    for bad in [-1.0f32, f32::NAN, f32::INFINITY] {
        let mut v = values;
        v[3] = bad;
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        fs::write(dir.path().join("grads.bin"), bytes).unwrap();
        assert!(load_profiles(&path).is_err(), "{bad} accepted");
    }
}

#[test]
fn missing_matrix_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let m = SaliencyMatrix::new(2, vec![1.0, 2.0], metas(1)).unwrap();
    let path = save_profiles(&m, dir.path()).unwrap();
    fs::remove_file(dir.path().join("profiles.f32")).unwrap();
    let err = load_profiles(&path).unwrap_err().to_string();
    assert!(err.contains("profiles.f32"), "{err}");
}
