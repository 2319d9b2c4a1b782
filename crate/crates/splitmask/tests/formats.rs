use std::fs;

use proptest::prelude::*;
use splitmask::dataset::{export_dataset, load_image_folder};
use splitmask::formats::*;
use splitmask::Error;
use splitmask_core::data::{synth_generate, Split};
use splitmask_core::model::{ModelConfig, Mode, ModelParams};
use splitmask_core::tokenizer::{build_kmeans, build_random_patches, build_random_projection, KMeansSettings, PatchNorm};

fn bits(params: &ModelParams<f32>) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    params
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

fn small() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 16,
        encoder_depth: 2,
        decoder_depth: 1,
        num_heads: 2,
        mlp_ratio: 2,
        vocab_size: 32,
        ..ModelConfig::default()
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for (cfg, classes) in [
        (ModelConfig::default(), None),
        (small(), Some(5)),
        (ModelConfig { mode: Mode::Beit, ..small() }, None),
    ] {
        let params = ModelParams::init(&cfg, classes, 7).unwrap();
        let meta = CheckpointMeta::new(&params, 42, 7);
        let path = dir.path().join("c.smck");
        save_checkpoint(&path, &meta, &params).unwrap();
        let (meta2, params2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(bits(&params), bits(&params2));
        assert_eq!(encode_checkpoint(&meta2, &params2).unwrap(), fs::read(&path).unwrap());
    }
}

#[test]
fn checkpoint_with_other_architecture_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let params = ModelParams::init(&small(), None, 0).unwrap();
    let path = dir.path().join("c.smck");
    save_checkpoint(&path, &CheckpointMeta::new(&params, 0, 0), &params).unwrap();
    let err = load_checkpoint_for(&path, &ModelConfig::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{}", err);
}

#[test]
fn corrupt_checkpoints_are_data_errors() {
    let params = ModelParams::init(&small(), None, 0).unwrap();
    let bytes = encode_checkpoint(&CheckpointMeta::new(&params, 0, 0), &params).unwrap();
    for cut in [0, 3, 8, 20, bytes.len() / 2, bytes.len() - 1] {
        let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "cut {}: {}", cut, err);
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode_checkpoint(&extra), Err(Error::Data(_))));
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(decode_checkpoint(&magic), Err(Error::Data(_))));
}

#[test]
fn vocabulary_files_round_trip_bit_exact() {
    let images = synth_generate(3, 8, 0, 4, 32).unwrap().train;
    let vocabs = [
        build_random_projection(64, 192, 1).unwrap(),
        build_random_patches(images.images(), 16, 8, 2, PatchNorm::PatchMean).unwrap(),
        build_kmeans(images.images(), 8, 8, &KMeansSettings::default(), 3, PatchNorm::None).unwrap(),
    ];
    let dir = tempfile::tempdir().unwrap();
    for v in &vocabs {
        let path = dir.path().join("v.pvoc");
        save_vocabulary(&path, v).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 28 + 4 * v.size() * v.dim());
        assert_eq!(&bytes[..4], b"PVOC");
        let back = load_vocabulary(&path).unwrap();
        assert_eq!(back.kind(), v.kind());
        assert_eq!(back.norm(), v.norm());
        assert_eq!(back.seed(), v.seed());
        let raw = |x: &splitmask_core::tokenizer::Vocabulary| x.vectors().data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(raw(&back), raw(v));
        assert_eq!(encode_vocabulary(&back), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vocabulary_decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..96)) {
        let _ = decode_vocabulary(&bytes);
    }

    #[test]
    fn checkpoint_decoder_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..96)) {
        let _ = decode_checkpoint(&bytes);
    }

    #[test]
    fn projection_vocabularies_round_trip(size in 2usize..20, dim in 2usize..40, seed in any::<u64>()) {
        let v = build_random_projection(size, dim, seed).unwrap();
        let back = decode_vocabulary(&encode_vocabulary(&v)).unwrap();
        prop_assert_eq!(back.seed(), seed);
        prop_assert_eq!(back.vectors().data(), v.vectors().data());
    }
}

#[test]
fn empty_manifest_gives_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.tsv");
    fs::write(&m, "").unwrap();
    let ds = load_image_folder(&m, 4, Split::Train).unwrap();
    assert_eq!(ds.len(), 0);
}

#[test]
fn one_ppm_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut ppm = b"P6\n32 32\n255\n".to_vec();
    ppm.extend((0..32 * 32 * 3).map(|i| (i * 7 % 256) as u8));
    fs::create_dir(dir.path().join("img")).unwrap();
    fs::write(dir.path().join("img/a.ppm"), &ppm).unwrap();
    let m = dir.path().join("m.tsv");
    fs::write(&m, "img/a.ppm\t2\n\n").unwrap();
    let ds = load_image_folder(&m, 4, Split::Test).unwrap();
    assert_eq!(ds.len(), 1);
    assert_eq!(ds.label(0), 2);
    let im = ds.image(0);
    assert_eq!((im.height(), im.width()), (32, 32));
    assert!(im.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(im.to_rgb8(), ppm[13..].to_vec());
}

#[test]
fn missing_file_error_cites_path() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.tsv");
    fs::write(&m, "nowhere/b.png\t0\n").unwrap();
    let err = load_image_folder(&m, 4, Split::Train).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("nowhere/b.png"), "{}", err);
    assert!(err.to_string().contains("m.tsv:1"), "{}", err);
}

#[test]
fn bad_labels_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.tsv");
    for body in ["a.png\t9\n", "a.png\tcat\n", "a.png\n"] {
        fs::write(&m, body).unwrap();
        assert_eq!(load_image_folder(&m, 4, Split::Train).unwrap_err().exit_code(), 3, "{:?}", body);
    }
}

#[test]
fn exported_synthetic_data_reloads_exactly() {
    let data = synth_generate(5, 6, 0, 3, 32).unwrap().train;
    let dir = tempfile::tempdir().unwrap();
    let manifest = export_dataset(dir.path(), "train", &data).unwrap();
    let back = load_image_folder(&manifest, 3, Split::Train).unwrap();
    assert_eq!(back.labels(), data.labels());
    for i in 0..data.len() {
        assert_eq!(back.image(i).to_rgb8(), data.image(i).to_rgb8());
    }
}
