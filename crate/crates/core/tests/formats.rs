mod common;

use proptest::prelude::*;
use sha2::{Digest, Sha256};

use strmatch::corpus::{gen_corpus, to_latent, write_corpus, CorpusSpec, EditKind, Motion};
use strmatch::error::Error;
use strmatch::formats::{self, decode, encode, encode_bytes, Bundle, ByteTensor, DType, Manifest};
use strmatch::mask::{dilate_mask, load_pixel_mask, mask_mix, LatentMask};
use strmatch::metrics::{block_match_flow, Displacement};
use strmatch::tensor::Tensor;

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn golden_encodings() {
    let f64_golden: Vec<u8> = [b"STRM".as_slice(), &[1, 0, 0, 0, 1, 2, 1, 0, 0, 0, 1, 0, 0, 0], &0.5f64.to_le_bytes()].concat();
    assert_eq!(f64_golden[18..], [0, 0, 0, 0, 0, 0, 0xe0, 0x3f]);
    let t = Tensor::<f64>::from_f64(&[1, 1], &[0.5]).unwrap();
    assert_eq!(encode(&t).unwrap(), f64_golden);
    let bytes = ByteTensor::new(vec![3], vec![0, 1, 255]).unwrap();
    assert_eq!(encode_bytes(&bytes).unwrap(), b"STRM\x01\x00\x00\x00\x02\x01\x03\x00\x00\x00\x00\x01\xff");
    let scalar = Tensor::<f32>::scalar(-0.0);
    assert_eq!(encode(&scalar).unwrap(), b"STRM\x01\x00\x00\x00\x00\x00\x00\x00\x00\x80");
}

#[test]
fn large_round_trip_checksums_match() {
    let t = Tensor::<f32>::randn(&[16, 2, 16, 16, 3], &mut common::rng(10));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.strm");
    formats::write_tensor(&path, &t).unwrap();
    let on_disk = std::fs::read(&path).unwrap();
    let back: Tensor<f32> = formats::read_tensor(&path).unwrap();
    assert_eq!(sha256_hex(&encode(&back).unwrap()), sha256_hex(&on_disk));
    assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn corrupt_files_report_offsets() {
    let good = encode(&Tensor::<f32>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
    let offset = |b: &[u8]| match decode(b) {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {other:?}"),
    };
    let mut bad = good.clone();
    bad[1] = b'X';
    assert_eq!(offset(&bad), 0);
    let mut bad = good.clone();
    bad[4] = 2;
    assert_eq!(offset(&bad), 4);
    let mut bad = good.clone();
    bad[8] = 3;
    assert_eq!(offset(&bad), 8);
    let mut bad = good.clone();
    bad[14] = 0;
    assert_eq!(offset(&bad), 14);
    assert_eq!(offset(&good[..good.len() - 1]), (good.len() - 1) as u64);
    assert_eq!(offset(&good[..12]), 12);
    let mut long = good.clone();
    long.extend([0, 0]);
    assert_eq!(offset(&long), good.len() as u64);
    let bytes = encode_bytes(&ByteTensor::new(vec![2], vec![1, 0]).unwrap()).unwrap();
    assert!(matches!(decode(&bytes).unwrap().to_tensor::<f32>(), Err(Error::Input(_))));
    assert_eq!(decode(&bytes).unwrap().dtype, DType::U8);
    let missing = formats::read_raw("/nonexistent/x.strm").unwrap_err();
    assert!(matches!(missing, Error::Io { .. }));
    assert_eq!(missing.category().exit_code(), 3);
}

#[test]
fn bundles_validate_their_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = Bundle::<f64>::default();
    b.meta.insert("kind".into(), "test".into());
    b.tensors.insert("a".into(), Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
    b.write(dir.path()).unwrap();
    assert_eq!(Bundle::<f64>::read(dir.path()).unwrap(), b);
    formats::write_tensor(dir.path().join("a.strm"), &Tensor::<f64>::zeros(&[3])).unwrap();
    assert!(matches!(Bundle::<f64>::read(dir.path()), Err(Error::Shape { .. } | Error::Input(_))));
    assert!(Manifest::parse("a=1\na=2").is_err());
    let e = Manifest::parse("a=1\n\nnot a pair").unwrap_err();
    assert!(e.to_string().contains("line 3"), "{e}");
}

#[test]
fn corpus_is_deterministic_and_moves_as_specified() {
    let spec = CorpusSpec {
        clips: 12,
        seed: 3,
        ..CorpusSpec::default()
    };
    let a = gen_corpus::<f64>(&spec).unwrap();
    assert_eq!(a, gen_corpus::<f64>(&spec).unwrap());
    assert_ne!(a, gen_corpus::<f64>(&CorpusSpec { seed: 4, ..spec.clone() }).unwrap());
    let right = a.iter().find(|c| c.spec.motion == Motion::Right).expect("a rightward clip");
    let (n, frames) = (spec.size, spec.frames);
    let at = |i: usize, y: usize, x: usize| right.mask.data[(i * n + y) * n + x] != 0;
    for i in 0..frames - 1 {
        for y in 0..n {
            for x in 0..n - 2 {
                // each object pixel reappears two columns to the right
                if at(i, y, x) {
                    assert!(at(i + 1, y, x + 2), "frame {i} ({y}, {x})");
                }
            }
        }
    }
    let moved = block_match_flow(&right.video, 4, 3).unwrap();
    let still = block_match_flow(&Tensor::from_fn(right.video.shape(), |k| right.video.data()[k % (n * n * 3)]), 4, 3).unwrap();
    assert!((0..frames - 1).all(|p| (0..n / 4).all(|r| (0..n / 4).all(|c| still.at(p, r, c) == Displacement { dy: 0, dx: 0 }))));
    assert!((0..frames - 1).any(|p| (0..n / 4).any(|r| (0..n / 4).any(|c| moved.at(p, r, c).dx > 0))));
    for c in &a {
        assert!(c.video.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(c.mask.shape, vec![8, 32, 32]);
        assert!(c.source_prompt != c.target_prompt);
    }
    let bad = CorpusSpec { size: 33, ..CorpusSpec::default() };
    assert!(matches!(gen_corpus::<f64>(&bad), Err(Error::Config(_))));
    let still = CorpusSpec { edit: EditKind::Shape, ..spec };
    assert!(gen_corpus::<f64>(&still).unwrap().iter().all(|c| c.spec.color == c.spec.target_color));
}

#[test]
fn corpus_directory_round_trips() {
    let spec = CorpusSpec { clips: 2, ..CorpusSpec::default() };
    let clips = gen_corpus::<f32>(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), &spec, &clips).unwrap();
    let b = Bundle::<f32>::read(dir.path().join("clip_001")).unwrap();
    assert_eq!(b.tensor("latent").unwrap(), &to_latent(&clips[1].video, 2).unwrap());
    assert_eq!(b.meta("target_prompt").unwrap(), clips[1].target_prompt);
    let m = load_pixel_mask(dir.path().join("clip_001").join("mask.strm"), 8, 16, 16).unwrap();
    assert_eq!(m, LatentMask::from_pixels(&clips[1].mask, 8, 16, 16).unwrap());
}

#[test]
fn mask_examples() {
    let mut centre = LatentMask::filled(1, 3, 3, false);
    centre.data[4] = true;
    assert_eq!(dilate_mask(&centre, 1), LatentMask::filled(1, 3, 3, true));
    assert_eq!(dilate_mask(&centre, 0), centre);
    let empty = LatentMask::filled(2, 4, 4, false);
    assert_eq!(dilate_mask(&empty, 3), empty);
    let tgt = Tensor::<f64>::full(&[1, 2, 2, 2], 1.0);
    let src = Tensor::<f64>::full(&[1, 2, 2, 2], -1.0);
    let checker = LatentMask::new(1, 2, 2, vec![true, false, false, true]).unwrap();
    let mixed = mask_mix(&tgt, &src, &checker).unwrap();
    assert_eq!(mixed.data(), &[1.0, 1.0, -1.0, -1.0, -1.0, -1.0, 1.0, 1.0]);
    assert_eq!(mask_mix(&tgt, &src, &LatentMask::filled(1, 2, 2, true)).unwrap(), tgt);
    assert_eq!(mask_mix(&tgt, &src, &LatentMask::filled(1, 2, 2, false)).unwrap(), src);
    let bad = ByteTensor::new(vec![2, 2], vec![0, 1, 7, 0]).unwrap();
    assert!(LatentMask::from_pixels(&bad, 1, 2, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn any_tensor_round_trips(shape in prop::collection::vec(1usize..5, 0..5), seed in 0u64..1000) {
        let t = Tensor::<f64>::randn(&shape, &mut common::rng(seed));
        let bytes = encode(&t).unwrap();
        let back: Tensor<f64> = decode(&bytes).unwrap().to_tensor().unwrap();
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back.shape(), t.shape());
    }

    #[test]
    fn truncation_never_panics(cut in 0usize..60, seed in 0u64..100) {
        let t = Tensor::<f32>::randn(&[2, 3, 2], &mut common::rng(seed));
        let bytes = encode(&t).unwrap();
        let cut = cut.min(bytes.len() - 1);
        let is_format_error = matches!(decode(&bytes[..cut]), Err(Error::Format { .. }));
        prop_assert!(is_format_error);
    }

    #[test]
    fn dilation_is_monotone_and_extensive(bits in prop::collection::vec(any::<bool>(), 2 * 5 * 6), r in 0usize..3) {
        let m = LatentMask::new(2, 5, 6, bits).unwrap();
        let d = dilate_mask(&m, r);
        let dd = dilate_mask(&m, r + 1);
        for k in 0..m.data.len() {
            prop_assert!(!m.data[k] || d.data[k]);
            prop_assert!(!d.data[k] || dd.data[k]);
        }
    }
}
