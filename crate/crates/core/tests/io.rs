use std::fs;
use std::path::Path;

use gapnet::dataio::{
    encode_checkpoint, load_image, load_mask, parse_config, parse_config_str, read_checkpoint, read_flo, read_gray,
    read_rgb, scan_dataset, write_checkpoint, write_flo, write_gray, FlowField, Normalization, Preset,
};
use gapnet::error::Error;
use gapnet::model::Mode;
use gapnet_tensor::Tensor;
use tempfile::tempdir;

fn gray(path: &Path, w: usize, h: usize, f: impl Fn(usize, usize) -> u8) {
    let data: Vec<u8> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect();
    write_gray(path, w, h, &data).unwrap();
}

fn flow(path: &Path, w: usize, h: usize) {
    let uv = (0..w * h * 2).map(|i| i as f32 * 0.25 - 1.0).collect();
    write_flo(path, &FlowField { width: w, height: h, uv }).unwrap();
}

#[test]
fn checkpoint_file_round_trip() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("nested/run.ckpt");
    let tensors = vec![
        ("a.weight".to_string(), Tensor::new(&[2, 3], vec![1.0f32, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap()),
        ("b".to_string(), Tensor::new(&[], vec![0.125f32]).unwrap()),
    ];
    write_checkpoint(&path, &tensors).unwrap();
    assert_eq!(read_checkpoint::<f32>(&path).unwrap(), tensors);
    assert!(matches!(read_checkpoint::<f64>(&path), Err(Error::Checkpoint(m)) if m.contains("dtype")));
}

#[test]
fn checkpoint_corruption_is_reported() {
    let dir = tempdir().unwrap();
    let tensors = vec![("w".to_string(), Tensor::new(&[4], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap())];
    let bytes = encode_checkpoint(&tensors).unwrap();
    let cases: [(&str, Vec<u8>, &str); 4] = [
        ("short", bytes[..bytes.len() - 3].to_vec(), "length mismatch"),
        ("long", [bytes.clone(), vec![0]].concat(), "trailing"),
        ("magic", [b"XXXX".to_vec(), bytes[4..].to_vec()].concat(), "magic"),
        ("version", [bytes[..4].to_vec(), 9u32.to_le_bytes().to_vec(), bytes[8..].to_vec()].concat(), "version 9"),
    ];
    for (name, data, needle) in cases {
        let p = dir.path().join(name);
        fs::write(&p, data).unwrap();
        match read_checkpoint::<f64>(&p) {
            Err(Error::Checkpoint(m)) => assert!(m.contains(needle), "{name}: {m}"),
            other => panic!("{name}: {other:?}"),
        }
    }
    assert!(matches!(read_checkpoint::<f64>(&dir.path().join("absent")), Err(Error::Io { .. })));
}

#[test]
fn flo_file_round_trip_and_errors() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("f.flo");
    flow(&p, 3, 2);
    let f = read_flo(&p).unwrap();
    assert_eq!((f.width, f.height), (3, 2));
    assert_eq!(f.uv[0], -1.0);
    assert_eq!(f.uv[11], 1.75);

    let mut bytes = fs::read(&p).unwrap();
    bytes.push(0);
    fs::write(&p, &bytes).unwrap();
    assert!(matches!(read_flo(&p), Err(Error::Invalid(m)) if m.contains("trailing")));
    fs::write(&p, &bytes[..20]).unwrap();
    assert!(matches!(read_flo(&p), Err(Error::Truncated { expected: 60, actual: 20, .. })));
    fs::write(&p, [0u8; 16]).unwrap();
    assert!(matches!(read_flo(&p), Err(Error::FlowMagic { .. })));
}

#[test]
fn images_and_masks() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("m.png");
    gray(&p, 5, 4, |r, c| if r == 1 && c >= 2 { 200 } else { 10 * c as u8 });
    let (w, h, v) = read_gray(&p).unwrap();
    assert_eq!((w, h), (5, 4));
    assert_eq!(v[7], 200.0 / 255.0);

    let m = load_mask(&p, 128).unwrap();
    assert_eq!(m.count(), 3);
    assert!(m.get(1, 4) && !m.get(0, 4));
    assert_eq!(load_mask(&p, 0).unwrap().count(), 20);

    let rgb = read_rgb(&p).unwrap();
    assert_eq!(rgb.planes.len(), 60);
    assert_eq!(rgb.planes[7], rgb.planes[20 + 7]);

    let norm = Normalization::default();
    let (t, orig) = load_image(&p, Some((8, 16)), &norm).unwrap();
    assert_eq!(orig, (4, 5));
    assert_eq!(t.shape(), &[1, 3, 8, 16]);

    let color = dir.path().join("c.png");
    image::RgbImage::from_pixel(2, 2, image::Rgb([255, 0, 0])).save(&color).unwrap();
    assert!(matches!(load_mask(&color, 128), Err(Error::Image { .. })));
    assert!(write_gray(&dir.path().join("bad.png"), 3, 3, &[0; 4]).is_err());
}

#[test]
fn image_layout_pairs_by_stem() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    for stem in ["a", "b", "c"] {
        gray(&root.join(format!("images/{stem}.png")), 4, 4, |_, _| 100);
    }
    for stem in ["a", "c", "d"] {
        gray(&root.join(format!("masks/{stem}.png")), 4, 4, |_, _| 255);
    }
    fs::write(root.join("images/notes.txt"), "ignored").unwrap();
    let scan = scan_dataset(root, Mode::Image).unwrap();
    let stems: Vec<_> = scan
        .records
        .iter()
        .map(|r| r.image_path.file_stem().unwrap().to_str().unwrap().to_string())
        .collect();
    assert_eq!(stems, ["a", "c"]);
    assert!(scan.records.iter().all(|r| r.flow_path.is_none() && r.clip_id.is_none()));
    assert_eq!(scan.warnings.len(), 2);
    assert!(scan.warnings.iter().any(|w| w.starts_with("mask without image") && w.contains("d.png")));
    assert!(scan.warnings.iter().any(|w| w.starts_with("image without mask") && w.contains("b.png")));
}

#[test]
fn video_layout_drops_frames_without_flow() {
    let dir = tempdir().unwrap();
    let clip = dir.path().join("clips/walk");
    for i in 0..10 {
        let stem = format!("{i:05}");
        gray(&clip.join(format!("frames/{stem}.png")), 4, 4, |_, _| 50);
        gray(&clip.join(format!("masks/{stem}.png")), 4, 4, |r, _| if r < 2 { 255 } else { 0 });
        if i < 9 {
            flow(&clip.join(format!("flow/{stem}.flo")), 4, 4);
        }
    }
    let scan = scan_dataset(dir.path(), Mode::Video).unwrap();
    assert_eq!(scan.records.len(), 9);
    assert_eq!(scan.warnings, vec![format!("frame without flow: {}", clip.join("frames/00009.png").display())]);
    for (i, r) in scan.records.iter().enumerate() {
        assert_eq!(r.clip_id.as_deref(), Some("walk"));
        assert_eq!(r.frame_index, Some(i));
        assert!(r.flow_path.is_some());
    }
}

#[test]
fn empty_dataset_is_an_error() {
    let dir = tempdir().unwrap();
    fs::create_dir_all(dir.path().join("images")).unwrap();
    fs::create_dir_all(dir.path().join("masks")).unwrap();
    assert!(matches!(scan_dataset(dir.path(), Mode::Image), Err(Error::Dataset(_))));
    assert!(scan_dataset(&dir.path().join("missing"), Mode::Image).is_err());
}

#[test]
fn config_files() {
    let dir = tempdir().unwrap();
    let p = dir.path().join("run.cfg");
    fs::write(
        &p,
        "# toy run\npreset = toy\nsupervision_setting = b\ntrain_sizes = 64, 96\ngpc_atrous_rates = 4,3,2,1\nlr = 1e-3 # faster\n",
    )
    .unwrap();
    let cfg = parse_config(&p).unwrap();
    assert_eq!(cfg.preset, Preset::Toy);
    assert_eq!(cfg.train_sizes, vec![64, 96]);
    assert_eq!(cfg.lr, 1e-3);
    let model = cfg.model_config().unwrap();
    assert_eq!(model.gpc.atrous_rates, [4, 3, 2, 1]);

    for bad in ["colour = red", "train_sizes = 100", "gpc_atrous_rates = 1,2", "lr = fast", "preset"] {
        assert!(matches!(parse_config_str(bad), Err(Error::Config(_))), "{bad}");
    }
    assert!(matches!(parse_config(&dir.path().join("none.cfg")), Err(Error::Io { .. })));
}
