use std::path::Path;
use std::process::Command;

use sgscn::io::read_label_png;
use sgscn::synthetic::{default_square, save_dataset, shape_suite};

fn sgscn(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sgscn")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn kmeans_segment_writes_at_most_k_labels() {
    let dir = tempfile::tempdir().unwrap();
    let (images, masks, out) = (dir.path().join("i"), dir.path().join("m"), dir.path().join("o"));
    save_dataset(&[default_square(0)], &images, &masks).unwrap();
    let o = sgscn(&["segment", "--method", "kmeans", "--k", "3", "--images", s(&images), "--masks", s(&masks), "--out", s(&out), "--no-resize"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let labels = read_label_png(out.join("labels/square_000.png")).unwrap();
    assert!(labels.num_distinct() <= 3);
    assert_eq!((labels.height(), labels.width()), (32, 32));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("image,cluster_id,dsc,hm,xor\n"));
    assert!(out.join("manifest.json").exists());
}

#[test]
fn sgscn_segment_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let (images, masks, out) = (dir.path().join("i"), dir.path().join("m"), dir.path().join("o"));
    save_dataset(&shape_suite(2, 24, 3), &images, &masks).unwrap();
    let o = sgscn(&["segment", "--images", s(&images), "--masks", s(&masks), "--out", s(&out), "--resize", "20x20", "--max-iters", "30"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "image,cluster_id,dsc,hm,xor");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("shape_000.png,"));
    // %.6f floats
    assert!(rows[1].split(',').skip(2).all(|v| v.split('.').nth(1).map(str::len) == Some(6)));
    for stem in ["shape_000", "shape_001"] {
        let labels = read_label_png(out.join(format!("labels/{stem}.png"))).unwrap();
        assert_eq!((labels.height(), labels.width()), (20, 20));
        let trace = std::fs::read_to_string(out.join(format!("trace/{stem}.csv"))).unwrap();
        assert!(trace.starts_with("iteration,ce,ss,cc,total,num_labels,changed_fraction"));
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["options"]["layout"]["resize"]["width"], 20);
    assert_eq!(manifest["images"].as_array().unwrap().len(), 2);
    let seed = manifest["images"][0]["seed"].as_u64().unwrap();
    assert_eq!(seed, sgscn::io::image_seed(0, "shape_000.png"));
}

#[test]
fn ablate_table_has_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (images, masks, out) = (dir.path().join("i"), dir.path().join("m"), dir.path().join("o"));
    save_dataset(&shape_suite(1, 16, 5), &images, &masks).unwrap();
    let o = sgscn(&["ablate", "--images", s(&images), "--masks", s(&masks), "--out", s(&out), "--no-resize", "--max-iters", "20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.iter().map(|r| r[0]).collect::<Vec<_>>(), ["CE", "CE+SS", "CE+SS+CC"]);
    let header: Vec<&str> = table.lines().next().unwrap().split(',').collect();
    let means: Vec<&&str> = header.iter().filter(|h| h.ends_with("_mean")).collect();
    assert_eq!(means, [&"dsc_mean", &"hm_mean", &"xor_mean"]);
}

#[test]
fn ablate_without_masks_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (images, masks) = (dir.path().join("i"), dir.path().join("m"));
    save_dataset(&[default_square(1)], &images, &masks).unwrap();
    let o = sgscn(&["ablate", "--images", s(&images), "--out", s(&dir.path().join("o"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("masks"));
}

#[test]
fn bad_inputs_fail_with_a_message() {
    let o = sgscn(&["segment", "--images", "/no/such/dir"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/dir"));
    let o = sgscn(&["segment", "--images", ".", "--weights", "1,2"]);
    assert!(!o.status.success());
    let o = sgscn(&["segment", "--images", ".", "--resize", "12"]);
    assert!(!o.status.success());
}

#[test]
fn gradcheck_subcommand() {
    let o = sgscn(&["gradcheck", "--seeds", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let out = String::from_utf8_lossy(&o.stdout);
    for name in ["conv2d/weight", "channel_norm", "softmax", "cross_entropy", "sparse_spatial", "context_consistency", "total_loss/image"] {
        assert!(out.contains(name), "{name} missing");
    }
}
