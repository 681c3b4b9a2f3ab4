use nestnet_cli::checkpoint::*;
use nestnet_core::model::{NestNet, NestNetConfig};

fn small() -> Checkpoint {
    let config = NestNetConfig { input_size: 32, num_classes: 4, ..NestNetConfig::default() };
    Checkpoint { model: NestNet::build(config, 3).unwrap(), mean_pixel: 0.4375, training: None }
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = small();
    save(&ckpt, dir.path()).unwrap();
    let back = load(dir.path()).unwrap();
    assert_eq!(back.model.config(), ckpt.model.config());
    assert_eq!(back.mean_pixel, ckpt.mean_pixel);
    for ((na, a), (nb, b)) in ckpt.model.parameters().iter().zip(back.model.parameters()) {
        assert_eq!(na, nb);
        assert_eq!(a.shape(), b.shape());
        let bits = |t: &[f32]| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.values()), bits(b.values()), "{na}");
    }
    let again = tempfile::tempdir().unwrap();
    save(&back, again.path()).unwrap();
    for f in [MANIFEST_FILE, WEIGHTS_FILE] {
        assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(again.path().join(f)).unwrap());
    }
}

#[test]
fn entries_tile_the_blob() {
    let (manifest, blob) = encode(&small());
    let mut next = 0;
    for e in &manifest.tensors {
        assert_eq!(e.offset, next);
        assert_eq!(e.length, 4 * e.shape.iter().product::<usize>() as u64);
        next += e.length;
    }
    assert_eq!(next, blob.len() as u64);
    assert_eq!(manifest.weights_sha256.len(), 64);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let (manifest, blob) = encode(&small());
    let mut flipped = blob.clone();
    flipped[100] ^= 1;
    assert!(matches!(decode(&manifest, &flipped), Err(CheckpointError::Checksum { .. })));

    let old = Manifest { format_version: 0, ..manifest.clone() };
    assert!(matches!(decode(&old, &blob), Err(CheckpointError::Version { found: 0 })));

    let mut gap = manifest.clone();
    gap.tensors[1].offset += 4;
    assert!(matches!(decode(&gap, &blob), Err(CheckpointError::Layout { .. })));

    let mut short = blob.clone();
    short.truncate(blob.len() - 4);
    let trimmed = Manifest { weights_sha256: sha_of(&short), ..manifest.clone() };
    assert!(matches!(decode(&trimmed, &short), Err(CheckpointError::BlobSize { .. })));

    let mut long = blob;
    long.extend_from_slice(&[0; 4]);
    let padded = Manifest { weights_sha256: sha_of(&long), ..manifest };
    assert!(matches!(decode(&padded, &long), Err(CheckpointError::BlobSize { .. })));
}

fn sha_of(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
