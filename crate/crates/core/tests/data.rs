use std::path::Path;

use proptest::prelude::*;

use csen_core::data::{
    decode_image, load_manifest, parse_ppm, read_ppm, split_query_gallery, synth_generate, write_manifest, Dataset,
    Rgb8, Sample, Split, SynthConfig,
};
use csen_core::Error;

fn sample(i: usize, split: Split) -> Sample {
    Sample {
        key: format!("s{i:04}"),
        image_path: format!("images/s{i:04}.ppm"),
        id: i / 5,
        camera: i % 3,
        viewpoint: i % 2,
        split,
    }
}

fn small_synth(noise: f64) -> SynthConfig {
    SynthConfig {
        num_ids: 8,
        images_per_id: 6,
        image_size: 32,
        noise_level: noise,
        ..Default::default()
    }
}

#[test]
fn manifest_round_trips_a_thousand_lines() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let splits = [Split::Train, Split::Query, Split::Gallery];
    let samples: Vec<Sample> = (0..1000).map(|i| sample(i, splits[i % 3])).collect();
    write_manifest(&samples, &path).unwrap();
    let ds = load_manifest(&path).unwrap();
    assert_eq!(ds.samples, samples);
    assert_eq!(ds.root, dir.path());
    assert_eq!(ds.image_path(&ds.samples[0]), dir.path().join("images/s0000.ppm"));
    assert_eq!(ds.subset(Split::Query).len(), 333);
}

#[test]
fn empty_manifest_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    std::fs::write(&path, "\n\n").unwrap();
    assert!(load_manifest(&path).unwrap().is_empty());
}

#[test]
fn manifest_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.jsonl");
    let line = |s: &Sample| serde_json::to_string(s).unwrap();
    let a = sample(1, Split::Train);

    std::fs::write(&path, format!("{}\n\n{}\n", line(&a), line(&a))).unwrap();
    let err = load_manifest(&path).unwrap_err().to_string();
    assert!(err.contains("duplicate key `s0001` on lines 1 and 3"), "{err}");

    let bad_split = line(&a).replace("\"train\"", "\"validation\"");
    std::fs::write(&path, format!("{}\n{bad_split}\n", line(&sample(2, Split::Query)))).unwrap();
    let err = load_manifest(&path).unwrap_err();
    assert!(matches!(err, Error::Format { .. }));
    assert!(err.to_string().contains("line 2"), "{err}");

    let extra = line(&a).replace('}', ",\"colour\":3}");
    std::fs::write(&path, extra).unwrap();
    assert!(load_manifest(&path).unwrap_err().to_string().contains("colour"));

    assert!(load_manifest(&dir.path().join("absent.jsonl")).is_err());
}

#[test]
fn black_image_decodes_to_zeros_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let img = Rgb8 {
        width: 5,
        height: 3,
        pixels: vec![0; 45],
    };
    let path = dir.path().join("z.ppm");
    std::fs::write(&path, img.to_ppm()).unwrap();
    let t = decode_image(&path).unwrap();
    assert_eq!(t.shape(), &[3, 3, 5]);
    assert!(t.data().iter().all(|&v| v == 0.0));
    assert_eq!(read_ppm(&path).unwrap(), img);
    let err = decode_image(&dir.path().join("missing.ppm")).unwrap_err().to_string();
    assert!(err.contains("missing.ppm"), "{err}");
}

proptest! {
    #[test]
    fn decoded_pixels_lie_in_unit_interval(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
        let pixels: Vec<u8> = (0..w * h * 3).map(|i| (seed.rotate_left(i as u32 % 64) as u8) ^ (i as u8)).collect();
        let img = Rgb8 { width: w, height: h, pixels };
        let back = parse_ppm(&img.to_ppm(), Path::new("p.ppm")).unwrap();
        prop_assert_eq!(&back, &img);
        let t = back.to_tensor();
        prop_assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Channel-planar layout: pixel (0, 0) red is the first value.
        prop_assert_eq!(t.data()[0], f64::from(img.pixels[0]) / 255.0);
        prop_assert_eq!(t.data()[w * h], f64::from(img.pixels[1]) / 255.0);
    }
}

#[test]
fn synth_is_deterministic_to_the_byte() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small_synth(0.5);
    let da = synth_generate(&cfg, a.path()).unwrap();
    let db = synth_generate(&cfg, b.path()).unwrap();
    assert_eq!(da.samples, db.samples);
    let read = |d: &Path, p: &str| std::fs::read(d.join(p)).unwrap();
    assert_eq!(read(a.path(), "manifest.jsonl"), read(b.path(), "manifest.jsonl"));
    for s in &da.samples {
        assert_eq!(read(a.path(), &s.image_path), read(b.path(), &s.image_path), "{}", s.key);
    }
    let other = synth_generate(&SynthConfig { seed: 1, ..cfg }, b.path()).unwrap();
    assert_ne!(read(a.path(), &da.samples[0].image_path), read(b.path(), &other.samples[0].image_path));
}

#[test]
fn synth_split_counts_and_cross_camera_queries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_synth(0.5);
    let ds = synth_generate(&cfg, dir.path()).unwrap();
    assert_eq!(ds.len(), 8 * 6);
    assert_eq!(ds.subset(Split::Query).len(), 8 * cfg.query_per_id);
    assert_eq!(ds.subset(Split::Gallery).len(), 8 * cfg.gallery_per_id);
    assert_eq!(ds.subset(Split::Train).len(), 8 * (6 - cfg.query_per_id - cfg.gallery_per_id));
    let (q, g) = split_query_gallery(&ds).unwrap();
    for s in &q {
        assert!(g.iter().any(|x| x.id == s.id && x.camera != s.camera), "{}", s.key);
    }
    assert_eq!(load_manifest(&dir.path().join("manifest.jsonl")).unwrap().samples, ds.samples);
    let img = read_ppm(&ds.image_path(&ds.samples[0])).unwrap();
    assert_eq!((img.width, img.height), (32, 32));
}

fn pixel(img: &Rgb8, x: usize, y: usize) -> &[u8] {
    let i = (y * img.width + x) * 3;
    &img.pixels[i..i + 3]
}

#[test]
fn noise_free_vehicles_ignore_the_camera() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        images_per_id: 8,
        ..small_synth(0.0)
    };
    let ds = synth_generate(&cfg, dir.path()).unwrap();
    let size = cfg.image_size;
    let mut compared = 0;
    for id in 0..cfg.num_ids {
        let mine: Vec<&Sample> = ds.samples.iter().filter(|s| s.id == id).collect();
        for a in &mine {
            for b in &mine {
                if a.viewpoint != b.viewpoint || a.camera == b.camera {
                    continue;
                }
                let (ia, ib) = (read_ppm(&ds.image_path(a)).unwrap(), read_ppm(&ds.image_path(b)).unwrap());
                // Interior of the body box, clear of the wheels.
                for y in (size * 45 / 100)..(size * 64 / 100) {
                    for x in (size * 16 / 100)..(size * 84 / 100) {
                        assert_eq!(pixel(&ia, x, y), pixel(&ib, x, y), "{} vs {} at ({x},{y})", a.key, b.key);
                    }
                }
                // The background corner carries the camera tint.
                assert_ne!(pixel(&ia, 0, 0), pixel(&ib, 0, 0));
                compared += 1;
            }
        }
    }
    assert!(compared > 0);
}

#[test]
fn noise_free_identities_render_differently() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        num_ids: 30,
        num_viewpoints: 1,
        num_cameras: 2,
        ..small_synth(0.0)
    };
    let ds = synth_generate(&cfg, dir.path()).unwrap();
    // One camera-0 rendering per id at the single viewpoint.
    let mut seen: Vec<Vec<u8>> = Vec::new();
    for id in 0..cfg.num_ids {
        let s = ds.samples.iter().find(|s| s.id == id && s.camera == 0).unwrap();
        let img = read_ppm(&ds.image_path(s)).unwrap();
        assert!(!seen.contains(&img.pixels), "id {id} duplicates an earlier id");
        seen.push(img.pixels);
    }
}

#[test]
fn synth_validation_names_fields() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        (SynthConfig { num_ids: 1, ..small_synth(0.5) }, "synth.num_ids"),
        (SynthConfig { noise_level: 1.5, ..small_synth(0.5) }, "synth.noise_level"),
        (SynthConfig { image_size: 8, ..small_synth(0.5) }, "synth.image_size"),
        (SynthConfig { num_cameras: 1, ..small_synth(0.5) }, "impossible split"),
        (SynthConfig { query_per_id: 4, gallery_per_id: 4, ..small_synth(0.5) }, "synth.images_per_id"),
    ];
    for (cfg, needle) in cases {
        let err = synth_generate(&cfg, dir.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains(needle), "{err}");
    }
}

#[test]
fn query_without_gallery_is_named() {
    let ds = Dataset {
        root: ".".into(),
        samples: vec![sample(0, Split::Query), sample(5, Split::Gallery), sample(6, Split::Query)],
    };
    // Ids: 0 (query only), 1 (gallery and query).
    let err = split_query_gallery(&ds).unwrap_err().to_string();
    assert!(err.contains("query id 0") && err.contains("s0000"), "{err}");

    let gallery_only = Dataset {
        root: ".".into(),
        samples: (0..4).map(|i| sample(i, Split::Gallery)).collect(),
    };
    let (q, g) = split_query_gallery(&gallery_only).unwrap();
    assert!(q.is_empty());
    assert_eq!(g.len(), 4);
}
