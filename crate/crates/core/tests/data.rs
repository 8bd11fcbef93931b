mod common;

use radformer_core::data::augment::GrayImage;
use radformer_core::data::synth::{glyph_mask, render_scene, GLYPHS, GLYPH_LEVEL, GLYPH_SIZE};
use radformer_core::data::*;
use radformer_core::Error;

const ONE: &str = r#"{"samples":[{"path":"a.pgm","patient_id":"p1","label":2,"roi":[1,2,10,12],"lexicons":[0,3]}],"vocabulary":["a","b","c","d"]}"#;

#[test]
fn empty_manifest() {
    let m = Manifest::parse(r#"{"samples":[],"vocabulary":[]}"#).unwrap();
    assert!(m.samples.is_empty());
}

#[test]
fn one_record() {
    let m = Manifest::parse(ONE).unwrap();
    assert_eq!(m.samples.len(), 1);
    let s = &m.samples[0];
    assert_eq!((s.label, s.patient_id.as_str()), (Class::Malignant, "p1"));
    assert_eq!(s.roi.unwrap().as_array(), [1, 2, 10, 12]);
    assert_eq!(s.lexicons.as_deref(), Some(&[0, 3][..]));
}

#[test]
fn class_names_accepted() {
    let m = Manifest::parse(r#"{"samples":[{"path":"a.png","patient_id":"p","label":"benign"}],"vocabulary":[]}"#).unwrap();
    assert_eq!(m.samples[0].label, Class::Benign);
}

#[test]
fn inverted_box_names_field_and_record() {
    let text = r#"{"samples":[
        {"path":"a.png","patient_id":"p","label":0},
        {"path":"b.png","patient_id":"p","label":0,"roi":[9,0,3,4]}],"vocabulary":[]}"#;
    match Manifest::parse(text).unwrap_err() {
        Error::Record { index, msg } => {
            assert_eq!(index, 1);
            assert!(msg.contains("x_max"), "{msg}");
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn malformed_records_rejected_with_index() {
    for (bad, idx) in [
        (r#"{"samples":[{"path":"a","patient_id":"p","label":5}],"vocabulary":[]}"#, 0),
        (r#"{"samples":[{"path":"a","patient_id":"p","label":0},{"path":"b","label":0}],"vocabulary":[]}"#, 1),
        (r#"{"samples":[{"path":"a","patient_id":"","label":0}],"vocabulary":[]}"#, 0),
        (r#"{"samples":[{"path":"a","patient_id":"p","label":1,"lexicons":[4]}],"vocabulary":["x"]}"#, 0),
    ] {
        match Manifest::parse(bad) {
            Err(Error::Record { index, .. }) => assert_eq!(index, idx, "{bad}"),
            other => panic!("{bad}: {other:?}"),
        }
    }
}

#[test]
fn missing_file_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    std::fs::write(&path, ONE).unwrap();
    let err = Manifest::load(&path).unwrap_err();
    assert!(matches!(err, Error::Record { index: 0, .. }), "{err}");
    assert!(Manifest::load(&dir.path().join("nope.json")).is_err());
}

#[test]
fn canonical_round_trip_is_byte_identical() {
    let m = Manifest::parse(ONE).unwrap();
    let text = m.to_json();
    let again = Manifest::parse(&text).unwrap();
    assert_eq!(again, m);
    assert_eq!(again.to_json(), text);
}

#[test]
fn lexicon_subset_filters_disagreement() {
    let text = r#"{"samples":[
        {"path":"a","patient_id":"p","label":2,"lexicons":[0]},
        {"path":"b","patient_id":"p","label":2,"lexicons":[0],"radiologist_label":1},
        {"path":"c","patient_id":"q","label":0,"lexicons":[]},
        {"path":"d","patient_id":"q","label":1,"lexicons":[1],"radiologist_label":"benign"}],"vocabulary":["x","y"]}"#;
    let m = Manifest::parse(text).unwrap();
    assert_eq!(m.lexicon_subset(), vec![0, 3]);
    assert_eq!(m.patients(), vec!["p".to_string(), "q".to_string()]);
}

#[test]
fn augment_output_is_224() {
    for (w, h) in [(300, 260), (224, 224), (640, 480), (250, 700)] {
        let img = GrayImage::filled(w, h, 90);
        let t = augment(&img, &AugmentConfig::paper(), true).unwrap();
        assert_eq!(t.shape(), &[3, 224, 224]);
    }
}

#[test]
fn constant_image_standardizes_to_constant() {
    let cfg = AugmentConfig { mean: [0.5; 3], std: [0.25; 3], ..AugmentConfig::paper() };
    let img = GrayImage::filled(300, 300, 255);
    let t = augment(&img, &cfg, false).unwrap();
    assert!(t.data().iter().all(|&v| (v - 2.0).abs() < 1e-6));
    let mid = GrayImage::filled(300, 300, 51);
    let cfg = AugmentConfig { mean: [0.2; 3], ..cfg };
    assert!(augment(&mid, &cfg, false).unwrap().data().iter().all(|&v| v.abs() < 1e-6));
}

#[test]
fn crop_after_halving_is_an_index_slice() {
    let (n, half, crop) = (512, 256, 224);
    let px: Vec<u8> = (0..n * n).map(|i| ((i * 7 + i / n * 13) % 251) as u8).collect();
    let img = GrayImage::new(n, n, px).unwrap();
    let t = augment(&img, &AugmentConfig::paper(), false).unwrap();
    let off = (half - crop) / 2;
    let cfg = AugmentConfig::paper();
    for y in (0..crop).step_by(7) {
        for x in (0..crop).step_by(5) {
            let (sy, sx) = (2 * (y + off), 2 * (x + off));
            let avg = (img.at(sx, sy) as f64 + img.at(sx + 1, sy) as f64 + img.at(sx, sy + 1) as f64 + img.at(sx + 1, sy + 1) as f64) / 4.0;
            for ch in 0..3 {
                let expect = ((avg / 255.0) as f32 - cfg.mean[ch]) / cfg.std[ch];
                assert!((t.at(&[ch, y, x]) - expect).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn augment_box_follows_the_crop() {
    let b = radformer_core::roi::BoundingBox::new(100, 100, 299, 399).unwrap();
    let out = augment_box(&b, 512, 512, &AugmentConfig::paper());
    assert_eq!(out.as_array(), [34, 34, 133, 183]);
}

#[test]
fn unreadable_image_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.png");
    std::fs::write(&p, b"not an image").unwrap();
    assert!(GrayImage::open(&p).is_err());
}

#[test]
fn pgm_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.pgm");
    let img = GrayImage::new(3, 2, vec![0, 10, 20, 30, 40, 255]).unwrap();
    img.save(&p).unwrap();
    assert_eq!(GrayImage::open(&p).unwrap(), img);
}

#[test]
fn synth_is_deterministic() {
    let cfg = SynthConfig { patients: 8, seed: 42, ..Default::default() };
    let (a, b) = (synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
    assert_eq!(a.images, b.images);
    assert_eq!(a.manifest.to_json(), b.manifest.to_json());
    let c = synth_generate(&SynthConfig { seed: 43, ..cfg }).unwrap();
    assert_ne!(a.images, c.images);
}

#[test]
fn normal_images_have_no_glyphs() {
    let c = synth_generate(&SynthConfig { patients: 20, ..Default::default() }).unwrap();
    let mut normals = 0;
    for ((s, img), scene) in c.manifest.samples.iter().zip(&c.images).zip(&c.scenes) {
        if s.label == Class::Normal {
            normals += 1;
            assert_eq!(s.lexicons.as_deref(), Some(&[][..]));
            assert!(scene.glyphs.is_empty());
            assert!(img.pixels.iter().all(|&p| p < GLYPH_LEVEL));
        } else {
            let n = s.lexicons.as_ref().unwrap().len();
            assert!((1..=2).contains(&n));
        }
    }
    assert!(normals > 0);
}

#[test]
fn glyphs_match_the_stamp_exactly() {
    let cfg = SynthConfig { patients: 20, seed: 5, ..Default::default() };
    let c = synth_generate(&cfg).unwrap();
    for ((img, scene), s) in c.images.iter().zip(&c.scenes).zip(&c.manifest.samples) {
        let bare = render_scene(scene, cfg.size, false);
        let mut expect = vec![false; cfg.size * cfg.size];
        for g in &scene.glyphs {
            let m = glyph_mask(g.lexicon);
            for (r, row) in m.iter().enumerate() {
                for (col, &on) in row.iter().enumerate() {
                    if on {
                        expect[(g.y + r) * cfg.size + g.x + col] = true;
                    }
                }
            }
            for dy in 0..GLYPH_SIZE + 2 {
                for dx in 0..GLYPH_SIZE + 2 {
                    assert!(scene.organ.radius(g.x + dx - 1, g.y + dy - 1) <= 1.0, "glyph window leaves the lumen");
                }
            }
        }
        for i in 0..img.pixels.len() {
            if expect[i] {
                assert_eq!(img.pixels[i], GLYPH_LEVEL);
            } else {
                assert_eq!(img.pixels[i], bare.pixels[i]);
            }
        }
        let planted: Vec<usize> = scene.glyphs.iter().map(|g| g.lexicon).collect();
        assert_eq!(&planted, s.lexicons.as_ref().unwrap());
        let roi = s.roi.unwrap();
        for g in &scene.glyphs {
            assert!(roi.x_min <= g.x && g.x + GLYPH_SIZE - 1 <= roi.x_max);
            assert!(roi.y_min <= g.y && g.y + GLYPH_SIZE - 1 <= roi.y_max);
        }
    }
}

#[test]
fn glyph_positions_spread_over_the_lumen() {
    let c = synth_generate(&SynthConfig { patients: 60, seed: 8, ..Default::default() }).unwrap();
    let xs: Vec<usize> = c.scenes.iter().flat_map(|s| s.glyphs.iter().map(|g| g.x)).collect();
    let distinct: std::collections::BTreeSet<_> = xs.iter().collect();
    assert!(distinct.len() >= 6, "{distinct:?}");
}

#[test]
fn class_proportions_within_three_sigma() {
    let cfg = SynthConfig { patients: 600, images_per_patient: (1, 1), seed: 3, class_weights: [0.5, 0.3, 0.2], ..Default::default() };
    let c = synth_generate(&cfg).unwrap();
    let n = c.manifest.samples.len() as f64;
    for class in Class::ALL {
        let p = cfg.class_weights[class.index()];
        let k = c.manifest.samples.iter().filter(|s| s.label == class).count() as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((k - n * p).abs() <= 3.0 * sigma, "{class:?}: {k} vs {}", n * p);
    }
}

#[test]
fn lexicons_follow_the_class_pools() {
    let cfg = SynthConfig { patients: 40, seed: 11, ..Default::default() };
    let c = synth_generate(&cfg).unwrap();
    let mut single = 0;
    let mut total = 0;
    for s in &c.manifest.samples {
        let lex = s.lexicons.as_ref().unwrap();
        let pool = match s.label {
            Class::Normal => continue,
            Class::Benign => &cfg.benign_lexicons,
            Class::Malignant => &cfg.malignant_lexicons,
        };
        assert!(lex.iter().all(|l| pool.contains(l)));
        total += 1;
        single += (lex.len() == 1) as usize;
    }
    let p = single as f64 / total as f64;
    assert!((p - cfg.single_lexicon_prob).abs() < 0.2, "{p}");
}

#[test]
fn too_few_patients_for_folds_warns() {
    let c = synth_generate(&SynthConfig { patients: 3, folds: Some(10), ..Default::default() }).unwrap();
    assert_eq!(c.warnings.len(), 1);
    let ok = synth_generate(&SynthConfig { patients: 12, folds: Some(10), ..Default::default() }).unwrap();
    assert!(ok.warnings.is_empty());
}

#[test]
fn synth_corpus_writes_loadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth_generate(&SynthConfig { patients: 4, ..Default::default() }).unwrap();
    let path = c.write(dir.path()).unwrap();
    let m = Manifest::load(&path).unwrap();
    assert_eq!(m.samples.len(), c.images.len());
    let first = GrayImage::open(&m.resolve(&m.samples[0].path)).unwrap();
    assert_eq!(first, c.images[0]);
}

#[test]
fn glyph_table_is_well_formed() {
    let mut seen = std::collections::BTreeSet::new();
    for (l, g) in GLYPHS.iter().enumerate() {
        assert!(g.iter().all(|row| row.len() == GLYPH_SIZE));
        assert!(seen.insert(glyph_mask(l)), "glyph {l} repeats");
        assert_eq!(VOCABULARY.len(), GLYPHS.len());
    }
}
