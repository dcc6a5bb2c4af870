//! Dataset directories and checkpoint files on disk.

use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use neurodx::data::{encode_raw, load_dataset, split, Subset};
use neurodx::model::{
    build_hybrid, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta,
    ModelConfig, CHECKPOINT_MAGIC,
};
use neurodx::optim::AdamState;
use neurodx::{Error, Rng};

fn raw(dir: &Path, name: &str, value: u8) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join(name), encode_raw(4, 3, 3, &[value; 36])).unwrap();
}

#[test]
fn four_dirs_of_three() {
    let root = tempfile::tempdir().unwrap();
    for (c, name) in ["b_mild", "a_moderate", "d_very", "c_non"].iter().enumerate() {
        for j in 0..3 {
            raw(&root.path().join(name), &format!("{j}.raw"), (c * 60) as u8);
        }
    }
    let ds = load_dataset(root.path(), 4).unwrap();
    assert_eq!(ds.len(), 12);
    assert_eq!(ds.class_names(), ["a_moderate", "b_mild", "c_non", "d_very"]);
    assert_eq!(ds.class_counts(), vec![3, 3, 3, 3]);
    for item in ds.items() {
        let dir = item.source_path.parent().unwrap().file_name().unwrap().to_str().unwrap();
        assert_eq!(ds.class_names()[item.label], dir);
        assert_eq!(item.pixels.shape(), &[3, 3, 4]);
    }
}

#[test]
fn wrong_class_count_is_structure_error() {
    let root = tempfile::tempdir().unwrap();
    raw(&root.path().join("x"), "0.raw", 1);
    raw(&root.path().join("y"), "0.raw", 2);
    assert!(matches!(load_dataset(root.path(), 4), Err(Error::Structure(_))));
    assert!(matches!(load_dataset(&root.path().join("missing"), 4), Err(Error::Structure(_))));
}

#[test]
fn undecodable_files_skipped_until_a_class_is_empty() {
    let root = tempfile::tempdir().unwrap();
    for name in ["a", "b", "c", "d"] {
        raw(&root.path().join(name), "ok.raw", 9);
    }
    fs::write(root.path().join("a/broken.png"), b"not a png").unwrap();
    fs::write(root.path().join("b/notes.txt"), b"hello").unwrap();
    let ds = load_dataset(root.path(), 4).unwrap();
    assert_eq!(ds.len(), 4);

    fs::remove_file(root.path().join("d/ok.raw")).unwrap();
    fs::write(root.path().join("d/bad.raw"), [1, 2, 3]).unwrap();
    assert!(matches!(load_dataset(root.path(), 4), Err(Error::Structure(_))));
}

#[test]
fn png_and_jpeg_decode_to_unit_range() {
    let root = tempfile::tempdir().unwrap();
    let dir = root.path().join("cls");
    fs::create_dir_all(&dir).unwrap();

    let gray = GrayImage::from_fn(5, 4, |x, y| Luma([(x * 50 + y) as u8]));
    gray.save(dir.join("g.png")).unwrap();
    let t = neurodx::data::decode_image(&dir.join("g.png")).unwrap();
    assert_eq!(t.shape(), &[3, 4, 5]);
    for c in 0..3 {
        assert_eq!(t.at(&[c, 2, 3]), 152.0 / 255.0);
    }

    let rgb = RgbImage::from_fn(6, 6, |_, _| Rgb([255, 0, 128]));
    rgb.save(dir.join("c.jpg")).unwrap();
    let t = neurodx::data::decode_image(&dir.join("c.jpg")).unwrap();
    assert_eq!(t.shape(), &[3, 6, 6]);
    assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    // Lossy, but a flat block keeps its hue.
    assert!(t.at(&[0, 3, 3]) > 0.9 && t.at(&[1, 3, 3]) < 0.1);
}

#[test]
fn moderate_sized_class_splits_52_12() {
    let root = tempfile::tempdir().unwrap();
    for (name, n) in [("a", 10usize), ("b", 64), ("c", 10), ("d", 10)] {
        for j in 0..n {
            raw(&root.path().join(name), &format!("{j:03}.raw"), j as u8);
        }
    }
    let ds = split(load_dataset(root.path(), 4).unwrap(), 0.8, 3).unwrap();
    let train_b = ds
        .subset_indices(Subset::Train)
        .iter()
        .filter(|&&i| ds.items()[i].label == 1)
        .count();
    assert_eq!(train_b, 52);
    let again = split(load_dataset(root.path(), 4).unwrap(), 0.8, 3).unwrap();
    assert_eq!(again.subset_indices(Subset::Test), ds.subset_indices(Subset::Test));
}

fn toy_checkpoint() -> Vec<u8> {
    let model = build_hybrid::<f32>(&ModelConfig::toy(), &mut Rng::new(8)).unwrap();
    let mut adam = AdamState::for_model(&model);
    adam.t = 17;
    for (m, v) in adam.m.iter_mut().zip(adam.v.iter_mut()) {
        m.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = i as f32 * 1e-3);
        v.data_mut().iter_mut().enumerate().for_each(|(i, x)| *x = i as f32 * 1e-6);
    }
    let meta = CheckpointMeta {
        epoch: 4,
        seed: 8,
        class_names: vec!["a".into(), "b".into(), "c".into(), "d".into()],
        ..CheckpointMeta::default()
    };
    encode_checkpoint(&model, &adam, &meta).unwrap()
}

#[test]
fn save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = toy_checkpoint();
    let (model, adam, meta) = decode_checkpoint::<f32>(&bytes).unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &model, &adam, &meta).unwrap();
    assert_eq!(fs::read(&path).unwrap(), bytes);
    let (m2, a2, meta2) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!((m2, a2, meta2), (model, adam, meta));
}

#[test]
fn file_size_is_header_plus_records() {
    let bytes = toy_checkpoint();
    let (model, _, _) = decode_checkpoint::<f32>(&bytes).unwrap();
    let meta_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let record = |name_len: usize, dims: &[usize]| 4 + name_len + 4 + 8 * dims.len() + 4 * dims.iter().product::<usize>();
    let mut want = 8 + 4 + 8 + meta_len + 4;
    for (name, t) in model.parameters() {
        want += record(name.len(), t.shape());
        want += record(name.len() + "adam.m.".len(), t.shape());
        want += record(name.len() + "adam.v.".len(), t.shape());
    }
    assert_eq!(bytes.len(), want);
    let payload: usize = model.parameters().iter().map(|(_, t)| t.len() * 4).sum();
    assert!(bytes.len() > 3 * payload);
}

#[test]
fn corrupted_magic_rejected() {
    let mut bytes = toy_checkpoint();
    assert_eq!(&bytes[..8], &CHECKPOINT_MAGIC);
    bytes[0] ^= 0xff;
    assert!(matches!(decode_checkpoint::<f32>(&bytes), Err(Error::Format(_))));
}
