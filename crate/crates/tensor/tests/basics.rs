use rand::SeedableRng;
use radformer_tensor::checkpoint::{encode, import, load, save};
use radformer_tensor::kernels::{gemm, gemm_nt, gemm_seq, gemm_tn, transpose, ConvGeom};
use radformer_tensor::{Init, ParamStore, Tensor, TensorError};

#[test]
fn rejects_inconsistent_shape() {
    assert!(Tensor::<f32>::new([2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::<f32>::new([2, 0], vec![]).is_err());
    assert!(Tensor::<f32>::new([2, 3], vec![0.0; 6]).is_ok());
}

#[test]
fn offsets_are_row_major() {
    let t = Tensor::<f64>::from_f64([2, 3], &[0., 1., 2., 3., 4., 5.]).unwrap();
    assert_eq!(t.at(&[1, 2]), 5.0);
    assert_eq!(t.offset(&[1, 0]), 3);
}

#[test]
fn scalar_has_one_element() {
    let s = Tensor::scalar(2.5f32);
    assert_eq!(s.rank(), 0);
    assert_eq!(s.item(), 2.5);
}

#[test]
fn checkpoint_roundtrip_and_dtype_conversion() {
    let dir = tempfile::tempdir().unwrap();
    let mut s = ParamStore::<f32>::new();
    s.add_param("a.w", Tensor::from_f64([2, 2], &[1.0, -2.5, 3.25, 0.0]).unwrap()).unwrap();
    s.add_buffer("a.rm", Tensor::from_f64([3], &[0.5, 0.25, 1.0]).unwrap()).unwrap();
    let base = dir.path().join("m");
    save(&s, &base, serde_json::json!({"preset": "toy"})).unwrap();
    let (entries, index) = load::<f64>(&base).unwrap();
    assert_eq!(index.meta["preset"], "toy");
    assert_eq!(entries[0].1.data(), &[1.0, -2.5, 3.25, 0.0]);
    assert_eq!(entries[1].0, "a.rm");

    let mut fresh = ParamStore::<f64>::new();
    fresh.add_param("a.w", Tensor::zeros([2, 2])).unwrap();
    fresh.add_param("b.w", Tensor::zeros([1])).unwrap();
    let rep = import(&mut fresh, entries);
    assert_eq!(rep.loaded, vec!["a.w"]);
    assert_eq!(rep.unexpected, vec!["a.rm"]);
    assert_eq!(rep.missing, vec!["b.w"]);
}

#[test]
fn archive_entries_are_self_describing() {
    let mut s = ParamStore::<f64>::new();
    s.add_param("x", Tensor::from_f64([1], &[2.0]).unwrap()).unwrap();
    let (bytes, index) = encode(&s, serde_json::Value::Null);
    assert_eq!(&bytes[0..4], &1u32.to_le_bytes());
    assert_eq!(bytes[4], b'x');
    assert_eq!(&bytes[5..9], b"\x03f64");
    let off = index.entries[0].offset as usize;
    assert_eq!(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()), 2.0);
}

fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                c[i * n + j] += a[i * k + l] * b[l * n + j];
            }
        }
    }
    c
}

#[test]
fn gemm_variants_agree_with_naive() {
    let (m, k, n) = (7, 5, 300);
    let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
    let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
    let want = naive(&a, &b, m, k, n);
    let mut c = vec![0.0; m * n];
    gemm(&a, &b, &mut c, m, k, n);
    let mut s = vec![0.0; m * n];
    gemm_seq(&a, &b, &mut s, m, k, n);
    assert_eq!(c, s);
    for (x, y) in c.iter().zip(&want) {
        assert!((x - y).abs() < 1e-12);
    }
    let bt = transpose(&b, k, n);
    let mut c2 = vec![0.0; m * n];
    gemm_nt(&a, &bt, &mut c2, m, k, n);
    assert_eq!(c, c2);
    let at = transpose(&a, m, k);
    let mut c3 = vec![0.0; m * n];
    gemm_tn(&at, &b, &mut c3, m, k, n);
    assert_eq!(c, c3);
}

#[test]
fn out_extent_rejects_oversized_kernel() {
    assert_eq!(ConvGeom::out_extent(2, 3, 1, 0), None);
    assert_eq!(ConvGeom::out_extent(224, 7, 2, 3), Some(112));
    assert_eq!(ConvGeom::out_extent(222, 3, 2, 0), Some(110));
}

#[test]
fn names_are_unique_across_params_and_buffers() {
    let mut s = ParamStore::<f32>::new();
    s.add_param("a", Tensor::zeros([2])).unwrap();
    assert!(matches!(s.add_buffer("a", Tensor::zeros([2])), Err(TensorError::DuplicateParameter(_))));
}

#[test]
fn he_init_has_expected_scale() {
    let mut rng = rand::rngs::StdRng::seed_from_u64(3);
    let t: Tensor<f64> = Init::HeNormal { fan_in: 50 }.sample(&[200, 50], &mut rng);
    let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.numel() as f64;
    assert!((var - 2.0 / 50.0).abs() < 0.004, "{var}");
}

#[test]
fn freezing_by_prefix() {
    let mut s = ParamStore::<f32>::new();
    s.add_param("global.w", Tensor::zeros([1])).unwrap();
    s.add_param("local.w", Tensor::zeros([1])).unwrap();
    assert_eq!(s.set_frozen_prefix("global.", true), 1);
    assert!(s.params()[0].frozen && !s.params()[1].frozen);
}
