mod common;

use opchain::codec::{decode_image, encode_image, read_image, write_image, ImageFormat};
use opchain::Error;
use opchain_core::ImageBuffer;
use proptest::prelude::*;

fn image(h: usize, w: usize, c: usize, bytes: Vec<u8>) -> ImageBuffer {
    ImageBuffer::new(h, w, c, bytes).unwrap()
}

fn arb_image() -> impl Strategy<Value = ImageBuffer> {
    (1usize..12, 1usize..12, prop_oneof![Just(1usize), Just(3usize)])
        .prop_flat_map(|(h, w, c)| proptest::collection::vec(any::<u8>(), h * w * c).prop_map(move |d| image(h, w, c, d)))
}

proptest! {
    #[test]
    fn ppm_round_trip(img in arb_image()) {
        prop_assert_eq!(decode_image(&encode_image(&img, ImageFormat::Ppm)).unwrap(), img);
    }

    #[test]
    fn png_round_trip(img in arb_image()) {
        prop_assert_eq!(decode_image(&encode_image(&img, ImageFormat::Png)).unwrap(), img);
    }

    #[test]
    fn ppm_and_png_twins_decode_identically(img in arb_image()) {
        let a = decode_image(&encode_image(&img, ImageFormat::Ppm)).unwrap();
        let b = decode_image(&encode_image(&img, ImageFormat::Png)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn truncated_ppm_is_a_decode_error(img in arb_image(), cut in 1usize..8) {
        let bytes = encode_image(&img, ImageFormat::Ppm);
        let n = bytes.len().saturating_sub(cut);
        let truncated = matches!(decode_image(&bytes[..n]), Err(Error::Decode { .. }));
        prop_assert!(truncated);
    }
}

#[test]
fn ppm_with_comments() {
    let mut bytes = b"P6\n# made by hand\n2 1\n# max\n255\n".to_vec();
    bytes.extend([1, 2, 3, 4, 5, 6]);
    let img = decode_image(&bytes).unwrap();
    assert_eq!((img.height(), img.width(), img.channels()), (1, 2, 3));
    assert_eq!(img.data(), &[1, 2, 3, 4, 5, 6]);
}

#[test]
fn sixteen_bit_ppm_is_rejected() {
    let bytes = b"P5\n1 1\n65535\n\0\0";
    assert!(matches!(decode_image(bytes), Err(Error::Decode { .. })));
}

#[test]
fn unknown_magic_reports_offset_zero() {
    assert!(matches!(decode_image(b"GIF89a"), Err(Error::Decode { offset: 0, .. })));
}

#[test]
fn file_round_trip_by_extension() {
    let dir = tempfile::tempdir().unwrap();
    let img = image(3, 4, 3, (0..36).collect());
    for name in ["a.ppm", "a.png"] {
        let p = dir.path().join(name);
        write_image(&p, &img).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);
    }
    assert_eq!(&std::fs::read(dir.path().join("a.png")).unwrap()[1..4], b"PNG");
}

#[test]
fn missing_file_is_io_error() {
    assert!(matches!(read_image(std::path::Path::new("/nonexistent/x.ppm")), Err(Error::Io { .. })));
}

#[test]
fn fixture_photos_decode() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/photos");
    let files = opchain::dataset::list_sources(&dir).unwrap();
    assert_eq!(files.len(), 5);
    for f in files {
        let img = read_image(&f).unwrap();
        assert_eq!(img.channels(), 3);
        assert!(img.height() >= 256 && img.width() >= 256, "{}", f.display());
    }
}
