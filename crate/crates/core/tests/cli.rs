use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use wavenhance::checkpoint::Checkpoint;
use wavenhance::dataio::{load_image, save_image};
use wavenhance::network::{ModelParams, NetworkConfig};
use wavenhance::tensor::{Shape, Tensor};
use wavenhance::training::{AdamState, PlateauSchedule};

fn bin(args: &[&str], extra: &[&Path]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wavenhance"))
        .args(args)
        .args(extra)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::random_uniform(Shape::new(1, h, w, 3), 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn write_checkpoint(path: &Path, levels: usize) {
    let network = NetworkConfig {
        levels,
        base_channels: 4,
        msc_depth: 1,
        ..NetworkConfig::default()
    };
    Checkpoint {
        network,
        params: ModelParams::uniform(&network, 1, 0.2).unwrap(),
        adam: AdamState::new(2e-4),
        schedule: PlateauSchedule::default(),
        epoch: 0,
        seed: 1,
    }
    .save(path)
    .unwrap();
}

#[test]
fn help_lists_every_key_with_its_default() {
    let out = bin(&["train", "--help"], &[]);
    assert!(out.status.success());
    let text = stdout(&out);
    for key in wavenhance::cli::RunConfig::keys() {
        assert!(text.contains(&format!("  {key} = ")), "{key} missing");
    }
    assert!(text.contains("lr = 0.0002") && text.contains("batch = 2"));
}

#[test]
fn train_writes_checkpoints_and_loss_history() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("lol");
    for sub in ["low", "high"] {
        fs::create_dir_all(data.join(sub)).unwrap();
    }
    for (i, name) in ["a.png", "b.png"].iter().enumerate() {
        let r = random_image(12, 12, i as u64);
        save_image(&r, &data.join("high").join(name)).unwrap();
        save_image(&r.map(|v| v * 0.2), &data.join("low").join(name)).unwrap();
    }
    let run = dir.path().join("run1");
    let out = bin(
        &["train", "--epochs", "2", "--seed", "7", "--levels", "1", "--base-channels", "4", "--patch", "8", "--data"],
        &[&data, Path::new("--out"), &run],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(run.join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,step,total,pixel,global,edge,channel,lr"));
    assert_eq!(lines.count(), 2);
    let ck = Checkpoint::load(&run.join("last.ckpt")).unwrap();
    assert_eq!(ck.epoch, 2);
    assert!(run.join("best.ckpt").exists());

    // Resuming continues the epoch counter.
    let out = bin(
        &["train", "--epochs", "3", "--levels", "1", "--base-channels", "4", "--patch", "8", "--seed", "7", "--data"],
        &[&data, Path::new("--out"), &run, Path::new("--checkpoint"), &run.join("last.ckpt")],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(Checkpoint::load(&run.join("last.ckpt")).unwrap().epoch, 3);
    assert_eq!(fs::read_to_string(run.join("loss.csv")).unwrap().lines().count(), 4);
}

#[test]
fn config_errors_exit_with_usage_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "lr = 1e-3\nmystery = 4\n").unwrap();
    let out = bin(&["train", "--data", "x", "--out", "y", "--config"], &[&cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("run.cfg:2: unknown key `mystery`"), "{}", stderr(&out));
    let out = bin(&["train", "--bogus-flag"], &[]);
    assert_eq!(out.status.code(), Some(2));
    let out = bin(&["train", "--set", "levels=abc"], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn enhance_pads_crops_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    write_checkpoint(&ck, 3);
    let input = dir.path().join("in.png");
    save_image(&random_image(100, 100, 3), &input).unwrap();
    let (o1, o2) = (dir.path().join("o1.png"), dir.path().join("o2.png"));
    for o in [&o1, &o2] {
        let out = bin(&["enhance", "--deterministic", "--checkpoint"], &[&ck, Path::new("--input"), &input, Path::new("--out"), o]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(load_image(&o1).unwrap().shape(), Shape::new(1, 100, 100, 3));
    assert_eq!(fs::read(&o1).unwrap(), fs::read(&o2).unwrap());

    let out = bin(&["enhance", "--levels", "2", "--checkpoint"], &[&ck, Path::new("--input"), &input]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("network config mismatch"), "{}", stderr(&out));
}

#[test]
fn enhance_directory_preserves_names() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    write_checkpoint(&ck, 1);
    let src = dir.path().join("src");
    fs::create_dir_all(&src).unwrap();
    for (i, n) in ["x.png", "y.png"].iter().enumerate() {
        save_image(&random_image(9, 7, i as u64), &src.join(n)).unwrap();
    }
    let dst = dir.path().join("dst");
    let out = bin(&["enhance", "--checkpoint"], &[&ck, Path::new("--input"), &src, Path::new("--out"), &dst]);
    assert!(out.status.success(), "{}", stderr(&out));
    let mut names: Vec<String> = fs::read_dir(&dst).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["x.png", "y.png"]);
    assert_eq!(load_image(&dst.join("x.png")).unwrap().shape(), Shape::new(1, 9, 7, 3));
}

#[test]
fn eval_reports_rows_and_mean() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    for (i, n) in ["p.png", "q.png"].iter().enumerate() {
        let img = random_image(16, 16, i as u64);
        save_image(&img, &a.join(n)).unwrap();
        save_image(&img, &b.join(n)).unwrap();
    }
    let csv = dir.path().join("m.csv");
    let out = bin(&["eval", "--enhanced"], &[&a, Path::new("--reference"), &b, Path::new("--out"), &csv]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text, "name,psnr_db,ssim\np.png,inf,1.000000\nq.png,inf,1.000000\nMEAN,inf,1.000000\n");

    // A missing reference fails only its row.
    save_image(&random_image(16, 16, 9), &a.join("r.png")).unwrap();
    let out = bin(&["eval", "--enhanced"], &[&a, Path::new("--reference"), &b]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("r.png,nan,nan"));
    assert!(text.trim_end().ends_with("MEAN,inf,1.000000"));

    // Every row failing is a runtime failure; no images at all is a usage error.
    let empty_ref = dir.path().join("none");
    fs::create_dir_all(&empty_ref).unwrap();
    assert_eq!(bin(&["eval", "--enhanced"], &[&a, Path::new("--reference"), &empty_ref]).status.code(), Some(1));
    assert_eq!(bin(&["eval", "--enhanced"], &[&empty_ref, Path::new("--reference"), &b]).status.code(), Some(2));
}

#[test]
fn inspect_writes_four_bands_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("flat.png");
    save_image(&Tensor::full(Shape::new(1, 6, 8, 3), 0.4), &input).unwrap();
    let out_dir = dir.path().join("bands");
    let out = bin(&["inspect", "--roundtrip", "--input"], &[&input, Path::new("--out"), &out_dir]);
    assert!(out.status.success(), "{}", stderr(&out));
    for band in ["lh", "hl", "hh"] {
        let t = load_image(&out_dir.join(format!("flat.{band}.png"))).unwrap();
        assert!(t.data().iter().all(|&v| v == 128.0 / 255.0), "{band}");
    }
    let ll = load_image(&out_dir.join("flat.ll.png")).unwrap();
    assert_eq!(ll.shape(), Shape::new(1, 3, 4, 3));
    assert!(stdout(&out).contains("roundtrip max abs error"));
    assert!(out_dir.join("flat.bands.r2mw").exists());
}
