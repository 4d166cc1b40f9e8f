use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use fundus::data::{
    load_image_folder, load_mask, scan_image_folder, synthetic_clean, write_degraded_dataset, DatasetDir,
    DegradeKind, ImageSample, Quality, Split, SplitFractions, MANIFEST,
};
use fundus::parallel::set_parallel;
use fundus::ErrorKind;
use image::{Rgb, RgbImage};

fn write_rgb(path: &Path, w: u32, h: u32, seed: u32) {
    RgbImage::from_fn(w, h, |x, y| {
        Rgb([(x * 7 + seed) as u8, (y * 3) as u8, ((x ^ y) + seed) as u8])
    })
    .save(path)
    .unwrap();
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["high", "low", "masks"] {
        for e in std::fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            out.insert(
                format!("{sub}/{}", p.file_name().unwrap().to_string_lossy()),
                std::fs::read(&p).unwrap(),
            );
        }
    }
    out.insert(MANIFEST.into(), std::fs::read(dir.join(MANIFEST)).unwrap());
    out
}

#[test]
fn folder_loading_resizes_sorts_and_skips_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    write_rgb(&dir.path().join("b.png"), 350, 346, 1);
    write_rgb(&dir.path().join("a.jpg"), 800, 800, 2);
    write_rgb(&dir.path().join("c.png"), 64, 64, 3);
    std::fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
    std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();

    let load = scan_image_folder(dir.path(), Quality::High, (64, 64)).unwrap();
    let ids: Vec<&str> = load.samples.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(ids, ["a", "b", "c"]);
    assert_eq!(load.skipped.len(), 1);
    assert!(load.skipped[0].0.ends_with("broken.png"));
    for s in &load.samples {
        assert_eq!((s.height, s.width, s.pixels.len()), (64, 64, 3 * 64 * 64));
        assert_eq!(s.quality, Quality::High);
    }
    // A same-size image is decoded without resampling.
    let c = &load.samples[2];
    assert_eq!(c.pixels[0], 3);
    assert_eq!(c.pixels[64 * 64], 0);

    let empty = tempfile::tempdir().unwrap();
    let err = load_image_folder(empty.path(), Quality::Low, (8, 8)).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
}

#[test]
fn masks_threshold_and_resize() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.png");
    image::GrayImage::from_fn(4, 2, |x, _| image::Luma([if x < 2 { 127 } else { 128 }]))
        .save(&p)
        .unwrap();
    let (m, dims) = load_mask(&p, None).unwrap();
    assert_eq!(dims, (2, 4));
    assert_eq!(m, [0, 0, 1, 1, 0, 0, 1, 1]);
    let (m, dims) = load_mask(&p, Some((4, 8))).unwrap();
    assert_eq!(dims, (4, 8));
    assert_eq!(m.iter().filter(|&&v| v == 1).count(), 16);
}

#[test]
fn degraded_dataset_round_trips_through_disk() {
    let clean = synthetic_clean(10, (32, 32), 4);
    let dir = tempfile::tempdir().unwrap();
    let kinds = DegradeKind::ALL.to_vec();
    let splits = SplitFractions { val: 0.2, test: 0.1 };
    let m = write_degraded_dataset(dir.path(), &clean, &kinds, 7, splits).unwrap();
    assert_eq!(m.entries.len(), 10 + 10 * kinds.len());
    assert_eq!(m.counts[&Split::Test], 1);
    assert_eq!(m.counts[&Split::Val], 2);
    assert_eq!(m.counts[&Split::Train], 7);

    let ds = DatasetDir::open(dir.path(), None).unwrap();
    assert_eq!(ds.resolution, (32, 32));
    let mut seen = HashSet::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let high = ds.high(split).unwrap();
        assert!(high.iter().all(|s| s.mask.is_some()));
        for s in &high {
            assert!(seen.insert(s.id.clone()), "{} in two splits", s.id);
            let orig = clean.iter().find(|c| c.id == s.id).unwrap();
            assert_eq!(s.pixels, orig.pixels);
            assert_eq!(s.mask, orig.mask);
        }
        let pairs = ds.pairs(split).unwrap();
        assert_eq!(pairs.len(), high.len() * kinds.len());
        for (low, src) in &pairs {
            assert!(low.id.starts_with(&format!("{}_", src.id)));
        }
        let u = ds.unpaired(split).unwrap();
        assert_eq!(u.low.len(), pairs.len());
    }
    assert_eq!(seen.len(), 10);
}

#[test]
fn dataset_writing_is_deterministic_across_runs_and_worker_modes() {
    let clean = synthetic_clean(4, (32, 32), 1);
    let splits = SplitFractions {
        val: 0.25,
        test: 0.25,
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    set_parallel(false);
    let seq = write_degraded_dataset(a.path(), &clean, &DegradeKind::ALL, 7, splits);
    set_parallel(true);
    write_degraded_dataset(b.path(), &clean, &DegradeKind::ALL, 7, splits).unwrap();
    seq.unwrap();
    assert_eq!(tree(a.path()), tree(b.path()));
    // Rewriting into the same directory replaces rather than accumulates.
    write_degraded_dataset(a.path(), &clean[..2], &[DegradeKind::Blur], 7, splits).unwrap();
    assert_eq!(std::fs::read_dir(a.path().join("low")).unwrap().count(), 2);
}

#[test]
fn disjoint_pools_are_enforced() {
    let s = ImageSample::new("same", 1, 1, vec![0; 3], Quality::Low).unwrap();
    let err = fundus::data::UnpairedDataset::new(vec![s.clone()], vec![s], (1, 1)).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Data);
}
