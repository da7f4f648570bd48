use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pointcount::annot::{load_annotations, SigmaPolicy};
use pointcount::density::render_density;
use pointcount::raster::{read_pfm, read_pgm};

fn pc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pointcount"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn densify_mass_matches_point_count() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("a.json");
    fs::write(&ann, r#"{"width":20,"height":16,"points":[[3,4],[10.5,8],[11,9],[18,2]]}"#).unwrap();
    let out = dir.path().join("d.pfm");
    let o = pc(&[
        "densify", "--annotations", p(&ann), "--out", p(&out), "--sigma", "adaptive", "--k", "3", "--scale", "0.3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let map = read_pfm(&out).unwrap();
    assert_eq!((map.width(), map.height()), (20, 16));
    assert!((map.sum() - 4.0).abs() < 1e-4);

    // The file holds the library's map rounded to f32.
    let ps = load_annotations(&ann).unwrap();
    let lib = render_density(&SigmaPolicy::default().discs(&ps).unwrap(), 20, 16).unwrap();
    let expect: Vec<f32> = lib.data().iter().map(|&v| v as f32).collect();
    assert_eq!(map.values(), &expect[..]);
}

#[test]
fn eval_prints_mae_and_rmse() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    fs::write(
        &csv,
        "id,pred_count,gt_count,occlusion_level,crowding_level\na,3,4,1.0,0.1\nb,5,4,2.0,0.2\n",
    )
    .unwrap();
    let o = pc(&["eval", "--records", p(&csv)]);
    assert!(o.status.success());
    let text = stdout(&o);
    let row = text.lines().find(|l| l.starts_with("all")).unwrap();
    let cols: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(cols, ["all", "2", "1.0000", "1.0000"]);

    let o = pc(&["eval", "--records", p(&csv), "--split", "occlusion", "--threshold", "1.5"]);
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["low", "1", "1.0000", "1.0000"]));
    assert!(text.lines().any(|l| l.starts_with("high")));
}

#[test]
fn exit_codes() {
    let o = pc(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(pc(&[]).status.code(), Some(1));
    assert_eq!(pc(&["densify", "--annotations", "x.json"]).status.code(), Some(1));
    assert_eq!(pc(&["gradcheck", "--kind", "l3"]).status.code(), Some(1));
    assert_eq!(pc(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.json");
    let o = pc(&["densify", "--annotations", p(&missing), "--out", p(&dir.path().join("d.pfm"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(o.stdout.is_empty());

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"width":4,"height":4,"points":[[9,1]]}"#).unwrap();
    assert_eq!(pc(&["occlevel", "--annotations", p(&bad)]).status.code(), Some(2));
}

#[test]
fn masks_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("a.json");
    fs::write(&ann, r#"{"width":9,"height":9,"points":[[4,4]]}"#).unwrap();
    let mask = dir.path().join("m.pgm");
    let o = pc(&["segmask", "--annotations", p(&ann), "--out", p(&mask), "--sigma", "1"]);
    assert!(o.status.success());
    let img = read_pgm(&mask).unwrap();
    // Radius-1 disc around a pixel center: the pixel and its 4 neighbors.
    assert_eq!(img.pixels().iter().filter(|&&v| v == 255).count(), 5);
    assert!(img.pixels().iter().all(|&v| v == 0 || v == 255));

    let o = pc(&["occlevel", "--annotations", p(&ann), "--sigma", "1"]);
    assert_eq!(stdout(&o).trim(), "1");

    let o = pc(&["gdlabel", "--count", "7", "--step", "3", "--levels", "8"]);
    assert_eq!(stdout(&o).trim(), "2");
    let o = pc(&["gdstep", "--annotations", p(&ann), p(&ann), "--levels", "8"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "1");
}

#[test]
fn loss_values() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("a.json");
    fs::write(&ann, r#"{"width":8,"height":8,"points":[[2,2],[5,5]]}"#).unwrap();
    let d = dir.path().join("d.pfm");
    assert!(pc(&["densify", "--annotations", p(&ann), "--out", p(&d), "--sigma", "1.5"]).status.success());
    let o = pc(&["loss", "--kind", "l2", "--pred", p(&d), "--target", p(&d)]);
    assert_eq!(stdout(&o).trim(), "0");
    let o = pc(&["loss", "--kind", "dm", "--pred", p(&d), "--target", p(&d)]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().any(|l| l == "count 0"));
    let o = pc(&["loss", "--kind", "gd", "--probs", "0.5,0.5", "--level", "0", "--gamma", "0"]);
    let v: f64 = stdout(&o).trim().parse().unwrap();
    assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    // A density map is not a binary mask.
    assert_eq!(
        pc(&["loss", "--kind", "focal-seg", "--pred", p(&d), "--target", p(&d)]).status.code(),
        Some(2)
    );
}

#[test]
fn gradcheck_reports_pass() {
    for kind in ["l1", "l2", "focal-seg", "gd", "dm", "toynet"] {
        let o = pc(&["gradcheck", "--kind", kind, "--seed", "3"]);
        assert!(o.status.success(), "{kind}");
        assert!(stdout(&o).contains("PASS"), "{kind}: {}", stdout(&o));
    }
}

#[test]
fn config_file_and_verbose() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("a.json");
    fs::write(&ann, r#"{"width":8,"height":8,"points":[[2,2],[5,5]]}"#).unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("annotations = {}\nsigma = 2\n", p(&ann))).unwrap();
    let out = dir.path().join("d.pfm");
    let o = pc(&["densify", "--config", p(&cfg), "--out", p(&out), "--verbose"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Fixed(\n"));

    fs::write(&cfg, "no_such_flag = 1\n").unwrap();
    assert_eq!(pc(&["densify", "--config", p(&cfg)]).status.code(), Some(1));
}

#[test]
fn train_infer_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = pc(&["synth", "--out-dir", p(&data), "--count", "6", "--seed", "4", "--size", "16"]);
    assert!(o.status.success());
    let aux = dir.path().join("aux.bin");
    let o = pc(&[
        "train-toy", "--train", p(&data), "--val", p(&data), "--stage", "aux", "--epochs", "2", "--lr", "0.5", "--out",
        p(&aux), "--sigma", "2", "--verbose",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        String::from_utf8_lossy(&o.stderr).lines().filter(|l| l.starts_with("epoch ")).count(),
        2
    );
    let student = dir.path().join("student.bin");
    let hist = dir.path().join("h.csv");
    let o = pc(&[
        "train-toy", "--train", p(&data), "--stage", "distill", "--aux", p(&aux), "--epochs", "1", "--out", p(&student),
        "--history", p(&hist), "--sigma", "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(&hist).unwrap().starts_with("epoch,train_loss,val_mae\n1,"));
    assert_eq!(
        pc(&["train-toy", "--train", p(&data), "--stage", "distill", "--out", p(&student)]).status.code(),
        Some(2)
    );

    let density = dir.path().join("pred.pfm");
    let o = pc(&[
        "infer", "--model", p(&student), "--stage", "distill", "--image", p(&data.join("00000.pgm")), "--out-density",
        p(&density),
    ]);
    assert!(o.status.success());
    let count: f64 = stdout(&o).trim().parse().unwrap();
    assert!((read_pfm(&density).unwrap().sum() - count).abs() < 1e-3);

    let records = dir.path().join("r.csv");
    let o = pc(&["infer", "--model", p(&aux), "--stage", "aux", "--data", p(&data), "--records", p(&records), "--sigma", "2"]);
    assert!(o.status.success());
    let o = pc(&["eval", "--records", p(&records), "--split", "crowding"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 5);
}

#[test]
fn occlude_outputs_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert!(pc(&["synth", "--out-dir", p(&data), "--count", "1", "--seed", "8", "--min-objects", "12"]).status.success());
    let (img, ann) = (data.join("00000.pgm"), data.join("00000.json"));
    let (oi, oa, od) = (dir.path().join("o.pgm"), dir.path().join("o.json"), dir.path().join("o.pfm"));
    let o = pc(&[
        "occlude", "--image", p(&img), "--annotations", p(&ann), "--seed", "5", "--out-image", p(&oi),
        "--out-annotations", p(&oa), "--out-density", p(&od),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let pastes: usize = stdout(&o).split_whitespace().nth(1).unwrap().parse().unwrap();
    let before = load_annotations(&ann).unwrap().len();
    let after = load_annotations(&oa).unwrap().len();
    assert_eq!(after, before + pastes);
    assert!((read_pfm(&od).unwrap().sum() - after as f64).abs() < 1e-3);
}
