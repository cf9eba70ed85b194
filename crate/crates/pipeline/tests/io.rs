//! Image file formats: PFM, Radiance RGBE and PNG.

use std::path::{Path, PathBuf};

use proptest::prelude::*;
use svhdr_core::numerics::Tensor;
use svhdr_pipeline::image_io::*;
use svhdr_pipeline::PipelineError;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pfm_round_trips_bit_exactly(h in 1usize..9, w in 1usize..9, gray in any::<bool>(), bits in prop::collection::vec(any::<u32>(), 64 * 3)) {
        let c = if gray { 1 } else { 3 };
        // Arbitrary finite f32 values, including subnormals and negatives.
        let data: Vec<f32> = bits.iter().take(h * w * c).map(|&b| {
            let v = f32::from_bits(b);
            if v.is_finite() { v } else { 1.5 }
        }).collect();
        let img = Tensor::new(&[h, w, c], data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pfm");
        write_pfm(&p, &img).unwrap();
        let back = read_pfm(&p).unwrap();
        prop_assert_eq!(back.shape(), img.shape());
        for (a, b) in back.data().iter().zip(img.data()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn png16_round_trips_integers_exactly(h in 1usize..7, w in 1usize..7, seed in any::<u64>()) {
        let samples: Vec<u16> = (0..h * w * 3).map(|i| (seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407)) >> 48) as u16).collect();
        let r = PngRaster { width: w, height: h, bits: 16, samples };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        write_png_raster(&p, &r).unwrap();
        prop_assert_eq!(read_png_raster(&p).unwrap(), r);
    }
}

#[test]
fn pfm_layout_is_bottom_to_top_and_scale_sign_selects_endianness() {
    let dir = tempfile::tempdir().unwrap();
    let img = Tensor::new(&[2, 1, 1], vec![1.0f32, 2.0]).unwrap();
    let p = dir.path().join("a.pfm");
    write_pfm(&p, &img).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    assert!(bytes.starts_with(b"Pf\n1 2\n-1"));
    // Last stored row is the top image row.
    assert_eq!(&bytes[bytes.len() - 8..], &[0, 0, 0, 0x40, 0, 0, 0x80, 0x3f]);

    // Big-endian file written by hand.
    let mut be = b"PF\n1 1\n1.0\n".to_vec();
    for v in [0.5f32, -2.0, 8.0] {
        be.extend_from_slice(&v.to_be_bytes());
    }
    let q = dir.path().join("b.pfm");
    std::fs::write(&q, be).unwrap();
    assert_eq!(read_pfm(&q).unwrap().data(), &[0.5, -2.0, 8.0]);
}

#[test]
fn malformed_headers_report_byte_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.pfm");
    std::fs::write(&p, b"PF\n3 x\n-1\n").unwrap();
    match read_pfm(&p) {
        Err(PipelineError::Parse { offset, .. }) => assert_eq!(offset, 5),
        other => panic!("expected parse error, got {other:?}"),
    }
    std::fs::write(&p, b"P6\n1 1\n-1\n").unwrap();
    assert!(matches!(read_pfm(&p), Err(PipelineError::Parse { offset: 0, .. })));
    std::fs::write(&p, b"PF\n2 2\n-1\n\0\0\0\0").unwrap();
    let e = read_pfm(&p).unwrap_err();
    assert!(matches!(e, PipelineError::Parse { .. }), "{e}");
    assert_eq!(e.exit_code(), 2);

    let q = dir.path().join("bad.hdr");
    std::fs::write(&q, b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n+Y 1 +X 1\n\0\0\0\0").unwrap();
    assert!(matches!(read_rgbe(&q), Err(PipelineError::Parse { offset: 35, .. })));
}

#[test]
fn rgbe_shared_exponent_formula() {
    // (m + 0.5) * 2^(e - 136)
    assert_eq!(rgbe_to_rgb([128, 128, 128, 129]), [1.00390625; 3]);
    assert_eq!(rgbe_to_rgb([128, 128, 128, 136]), [128.5; 3]);
    assert_eq!(rgbe_to_rgb([128, 64, 0, 128]), [0.50195312, 0.25195312, 0.001953125]);
    assert_eq!(rgbe_to_rgb([200, 10, 3, 0]), [0.0; 3]);
    assert_eq!(rgb_to_rgbe([1.0, 0.5, 0.25]), [128, 64, 32, 129]);
    assert_eq!(rgb_to_rgbe([0.0; 3]), [0; 4]);
}

/// `reference.hdr` was written by OpenCV (run-length encoded scanlines) and
/// `reference_rgb.f32` holds OpenCV's own decoding of it, row-major RGB.
/// OpenCV decodes mantissas without the half-bin offset, so the two decoders
/// differ by at most half a mantissa step relative to the pixel's largest
/// component (0.39%).
#[test]
fn rgbe_decode_matches_independent_reference() {
    let img = read_rgbe(&fixture("reference.hdr")).unwrap();
    assert_eq!(img.shape(), &[12, 40, 3]);
    let raw = std::fs::read(fixture("reference_rgb.f32")).unwrap();
    let reference: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    assert_eq!(reference.len(), img.data().len());
    let mut worst = 0.0f64;
    for (ours, theirs) in img.data().chunks_exact(3).zip(reference.chunks_exact(3)) {
        let peak = theirs.iter().cloned().fold(0.0f32, f32::max) as f64;
        if peak == 0.0 {
            assert_eq!(ours, [0.0; 3]);
            continue;
        }
        for (a, b) in ours.iter().zip(theirs) {
            worst = worst.max((*a as f64 - *b as f64).abs() / peak);
        }
    }
    assert!(worst < 0.005, "max relative difference {worst}");
}

#[test]
fn rgbe_write_read_is_within_one_mantissa_step() {
    let img = Tensor::from_fn(&[5, 9, 3], |i| ((i as f32 * 0.37).sin().abs() + 0.01) * 10f32.powi(i as i32 % 7 - 3));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.hdr");
    write_rgbe(&p, &img).unwrap();
    let back = read_rgbe(&p).unwrap();
    for (a, b) in back.data().chunks_exact(3).zip(img.data().chunks_exact(3)) {
        let peak = b.iter().cloned().fold(0.0f32, f32::max);
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= peak / 256.0, "{x} vs {y}");
        }
    }
    // Negative values are clamped on write.
    let neg = Tensor::new(&[1, 1, 3], vec![-1.0f32, 2.0, 0.0]).unwrap();
    write_rgbe(&p, &neg).unwrap();
    let back = read_rgbe(&p).unwrap();
    // A zero mantissa decodes to half a step, like the reference decoder.
    assert!(back.data()[0] <= 2.0 / 256.0);
    assert!((back.data()[1] - 2.0).abs() < 2.0 / 128.0);
}

#[test]
fn png_values_scale_to_unit_range_and_clamp() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.png");
    let img = Tensor::new(&[1, 2, 3], vec![0.0f32, 1.0, 0.5, 1.5, -0.2, 0.25]).unwrap();
    write_png16(&p, &img).unwrap();
    let r = read_png_raster(&p).unwrap();
    assert_eq!(r.bits, 16);
    assert_eq!(r.samples, vec![0, 65535, 32768, 65535, 0, 16384]);
    let back = read_png(&p).unwrap();
    assert_eq!(back.data()[1], 1.0);
    assert!((back.data()[2] - 0.5).abs() < 1e-4);

    write_png8(&p, &img).unwrap();
    let r = read_png_raster(&p).unwrap();
    assert_eq!(r.bits, 8);
    assert_eq!(r.samples, vec![0, 255, 128, 255, 0, 64]);
}

#[test]
fn extension_dispatch_and_gray_expansion() {
    let dir = tempfile::tempdir().unwrap();
    let gray = Tensor::new(&[1, 2, 1], vec![0.25f32, 4.0]).unwrap();
    let p = dir.path().join("g.pfm");
    write_hdr(&p, &gray).unwrap();
    assert_eq!(read_hdr(&p).unwrap().data(), &[0.25, 0.25, 0.25, 4.0, 4.0, 4.0]);
    let q = dir.path().join("x.exr");
    assert!(write_hdr(&q, &gray).is_err());
}
