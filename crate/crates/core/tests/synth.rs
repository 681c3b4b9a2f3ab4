use std::collections::HashSet;

use nestnet_core::data::Sample;
use nestnet_core::image::*;
use nestnet_core::synth::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn params(id: &SynthIdentity) -> Vec<u64> {
    let mut v = vec![id.ridge_frequency.to_bits(), id.base_angle.to_bits(), id.core.0.to_bits(), id.core.1.to_bits()];
    v.extend(id.orientation_coeffs.iter().map(|c| c.to_bits()));
    v.push(id.code as u64);
    v
}

#[test]
fn identities_are_deterministic_distinct_and_in_range() {
    assert_eq!(generate_identity(0, 7), generate_identity(0, 7));
    let all: Vec<SynthIdentity> = (1..=100).map(|s| generate_identity(0, s)).collect();
    let distinct: HashSet<Vec<u64>> = all.iter().map(params).collect();
    assert_eq!(distinct.len(), 100);
    for id in &all {
        assert!((FREQUENCY_RANGE.0..=FREQUENCY_RANGE.1).contains(&id.ridge_frequency));
        let (x, y) = id.core_pixel(128);
        for c in [x, y] {
            assert!((128.0 / 3.0..=256.0 / 3.0).contains(&c), "core {c}");
        }
        assert!(id.code < 1 << (CODE_CELLS * CODE_CELLS));
    }
}

#[test]
fn dataset_identities_have_well_separated_codes() {
    let ids = generate_identities(20, 42);
    for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            assert!((a.code ^ b.code).count_ones() >= 5);
        }
    }
}

#[test]
fn planted_patch_is_under_five_percent_of_the_image() {
    for size in [64, 128, 256] {
        let b = generate_identity(0, 1).patch_box(size);
        assert!(b.area() < 0.05 * (size * size) as f64, "{size}: {}", b.area());
    }
}

#[test]
fn clean_render_is_reproducible_and_unclamped() {
    let id = generate_identity(3, 11);
    let clean = CaptureParams::clean(1);
    let a = render_sample(&id, &clean, 96, 1).unwrap();
    let b = render_sample(&id, &clean, 96, 999).unwrap();
    assert_eq!(a, b);
    assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(matches!(render_sample(&id, &clean, 63, 0), Err(SynthError::Size(63))));
}

/// Value at the pixel containing each rotated code-cell centre.
fn code_readout(id: &SynthIdentity, pixels: &[f32], size: usize, rotation_deg: f64) -> Vec<f32> {
    let b = id.patch_box(size);
    let cell = cell_size(size);
    let c = size as f64 / 2.0;
    let (sin, cos) = rotation_deg.to_radians().sin_cos();
    let mut out = Vec::new();
    for row in 0..CODE_CELLS {
        for col in 0..CODE_CELLS {
            let (x, y) = (b.x0 + (col as f64 + 0.5) * cell - c, b.y0 + (row as f64 + 0.5) * cell - c);
            let (px, py) = (c + cos * x - sin * y, c + sin * x + cos * y);
            out.push(pixels[py as usize * size + px as usize]);
        }
    }
    out
}

#[test]
fn code_content_survives_rotation_before_noise() {
    let id = generate_identity(5, 21);
    let size = 128;
    let expected: Vec<f32> =
        (0..CODE_CELLS * CODE_CELLS).map(|i| if id.code_bit(i / CODE_CELLS, i % CODE_CELLS) { 1.0 } else { 0.0 }).collect();
    let mut renders = Vec::new();
    for rotation in [-9.0, 0.0, 7.5] {
        let cap = CaptureParams { rotation_deg: rotation, ..CaptureParams::clean(2) };
        let r = render_sample(&id, &cap, size, 0).unwrap();
        assert_eq!(code_readout(&id, &r.pixels, size, rotation), expected, "rotation {rotation}");
        renders.push(r.pixels);
    }
    assert_ne!(renders[0], renders[1]);
    assert_ne!(renders[1], renders[2]);
}

#[test]
fn core_box_follows_the_rotation() {
    let id = generate_identity(1, 2);
    let cap = CaptureParams { rotation_deg: 10.0, ..CaptureParams::clean(1) };
    let r = render_sample(&id, &cap, 128, 0).unwrap();
    let plain = id.patch_box(128);
    assert!(r.core_box.area() > plain.area());
    let (cx, cy) = id.core_pixel(128);
    let (sin, cos) = 10f64.to_radians().sin_cos();
    let (x, y) = (64.0 + cos * (cx - 64.0) - sin * (cy - 64.0), 64.0 + sin * (cx - 64.0) + cos * (cy - 64.0));
    assert!(r.core_box.contains(x, y));
}

#[test]
fn brightness_raises_the_mean() {
    let id = generate_identity(2, 5);
    let mean = |b: f64| {
        let cap = CaptureParams { brightness: b, ..CaptureParams::clean(1) };
        let p = render_sample(&id, &cap, 64, 0).unwrap().pixels;
        p.iter().map(|&v| v as f64).sum::<f64>() / p.len() as f64
    };
    assert!(mean(0.2) > mean(0.0));
    assert!(mean(0.0) > mean(-0.2));
}

#[test]
fn out_of_range_captures_are_rejected() {
    let id = generate_identity(0, 0);
    for cap in [
        CaptureParams { brightness: 0.3, ..CaptureParams::clean(1) },
        CaptureParams { blur_sigma: 2.0, ..CaptureParams::clean(1) },
        CaptureParams { rotation_deg: -11.0, ..CaptureParams::clean(1) },
        CaptureParams { noise_std: 0.06, ..CaptureParams::clean(1) },
    ] {
        assert!(matches!(render_sample(&id, &cap, 64, 0), Err(SynthError::Capture { .. })));
    }
}

#[test]
fn sessions_draw_from_shifted_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = |s: u8, rng: &mut ChaCha8Rng| (0..2000).map(|_| CaptureParams::draw(s, rng)).collect::<Vec<_>>();
    let (one, two) = (draws(1, &mut rng), draws(2, &mut rng));
    let mean = |v: &[CaptureParams], f: fn(&CaptureParams) -> f64| v.iter().map(f).sum::<f64>() / v.len() as f64;
    assert!(mean(&two, |c| c.brightness) > mean(&one, |c| c.brightness) + 0.05);
    assert!(mean(&two, |c| c.blur_sigma) > mean(&one, |c| c.blur_sigma) + 0.3);
    for c in one.iter().chain(&two) {
        c.validate().unwrap();
    }
}

fn default_dataset() -> Vec<Sample> {
    generate_dataset(&SynthConfig::default()).unwrap()
}

#[test]
fn default_dataset_is_balanced_and_reproducible() {
    let data = default_dataset();
    assert_eq!(data.len(), 400);
    for session in [1, 2] {
        assert_eq!(data.iter().filter(|s| s.session == Some(session)).count(), 200);
        for id in 0..20 {
            assert_eq!(data.iter().filter(|s| s.session == Some(session) && s.identity == id).count(), 10);
        }
    }
    assert_eq!(data, default_dataset());
    let other = generate_dataset(&SynthConfig { seed: 43, ..SynthConfig::default() }).unwrap();
    assert_ne!(data[0].pixels, other[0].pixels);
}

#[test]
fn no_image_repeats_across_sessions() {
    let data = default_dataset();
    let bits = |s: &Sample| s.pixels.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let first: HashSet<Vec<u32>> = data.iter().filter(|s| s.session == Some(1)).map(bits).collect();
    assert!(data.iter().filter(|s| s.session == Some(2)).all(|s| !first.contains(&bits(s))));
}

#[test]
fn nearest_mean_on_raw_pixels_beats_half() {
    let data = default_dataset();
    let n = 128 * 128;
    let mut means = vec![vec![0.0f64; n]; 20];
    for s in data.iter().filter(|s| s.session == Some(1)) {
        for (m, &v) in means[s.identity].iter_mut().zip(&s.pixels) {
            *m += v as f64 / 10.0;
        }
    }
    let probes: Vec<&Sample> = data.iter().filter(|s| s.session == Some(2)).collect();
    let correct = probes
        .iter()
        .filter(|s| {
            let dist = |m: &Vec<f64>| m.iter().zip(&s.pixels).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
            let best = (0..20).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
            best == s.identity
        })
        .count();
    assert!(correct * 2 > probes.len(), "{correct}/{}", probes.len());
}

#[test]
fn degenerate_configs_are_errors() {
    let bad = |c: SynthConfig| generate_dataset(&c).is_err();
    assert!(bad(SynthConfig { identities: 1, ..SynthConfig::default() }));
    assert!(bad(SynthConfig { per_session: 0, ..SynthConfig::default() }));
    assert!(bad(SynthConfig { size: 32, ..SynthConfig::default() }));
}

#[test]
fn dataset_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_dataset(&SynthConfig { identities: 3, per_session: 2, size: 64, seed: 9 }).unwrap();
    save_dataset(&data, dir.path()).unwrap();
    assert!(dir.path().join("002_2_001.pgm").exists());
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back, data);
}

#[test]
fn pgm_bytes_map_to_unit_values() {
    let img = parse_pgm(b"P5\n2 2\n255\n\x00\xff\x80\x40").unwrap();
    assert_eq!((img.width, img.height), (2, 2));
    let expected = [0.0, 1.0, 0.50196, 0.25098];
    for (a, b) in img.pixels.iter().zip(expected) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn pgm_round_trip_is_lossless_after_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<f32> = (0..35).map(|i| dequantize((i * 7) as u8)).collect();
    let img = GrayImage::new(7, 5, pixels).unwrap();
    let path = dir.path().join("x.pgm");
    save_pgm(&img, &path).unwrap();
    assert_eq!(load_pgm(&path).unwrap(), img);
}

#[test]
fn pgm_header_comments_are_skipped() {
    let img = parse_pgm(b"P5 # made by hand\n# another\n1 1\n255\n\x10").unwrap();
    assert_eq!(img.pixels, [16.0 / 255.0]);
}

fn parse_error(bytes: &[u8]) -> (usize, String) {
    match parse_pgm(bytes) {
        Err(ImageError::Parse { offset, message }) => (offset, message),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn malformed_pgms_name_the_offending_byte() {
    let (offset, message) = parse_error(b"P2\n2 2\n255\n0 0 0 0\n");
    assert_eq!(offset, 0);
    assert!(message.contains("P2"));
    assert_eq!(parse_error(b"P6\n1 1\n255\n\0\0\0").0, 0);
    let (offset, message) = parse_error(b"P5\n2 2\n255\n\x01\x02\x03");
    assert_eq!(offset, 14);
    assert!(message.contains("truncated"));
    assert_eq!(parse_error(b"P5\n2 x\n255\n").0, 5);
    let (offset, message) = parse_error(b"P5\n1 1\n65535\n\0\0");
    assert_eq!(offset, 7);
    assert!(message.contains("maxval"));
    assert_eq!(parse_error(b"P5\n1 1\n255").0, 10);
}

#[test]
fn trailing_bytes_are_ignored() {
    let img = parse_pgm(b"P5\n1 1\n255\n\x05extra").unwrap();
    assert_eq!(img.pixels.len(), 1);
}
