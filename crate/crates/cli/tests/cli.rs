use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use image::{Rgb, RgbImage};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_faceanon"));
    c.env_remove("FACEANON_ADAPTER");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write_png(path: &Path, seed: u32) {
    let img = RgbImage::from_fn(8, 8, |x, y| {
        let v = (x * 31 + y * 17 + seed * 53) % 256;
        Rgb([v as u8, (v * 3 % 256) as u8, (255 - v) as u8])
    });
    img.save(path).unwrap();
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("in")).unwrap();
        for (i, n) in ["a", "b"].iter().enumerate() {
            write_png(&dir.path().join(format!("in/{n}.png")), i as u32);
        }
        write_png(&dir.path().join("target.png"), 9);
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn s(&self, rel: &str) -> String {
        self.path(rel).to_string_lossy().into_owned()
    }
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn anonymize_writes_outputs_and_manifest() {
    let f = Fixture::new();
    let out = run(&[
        "anonymize",
        "-i",
        &f.s("in"),
        "-t",
        &f.s("target.png"),
        "-o",
        &f.s("out"),
        "--seed",
        "3",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(f.path("out/a.png").is_file() && f.path("out/b.png").is_file());
    let m = manifest(&f.path("out/manifest.json"));
    let records = m["records"].as_array().unwrap();
    assert_eq!(records.len(), 2);
    assert_eq!(records[0]["input_id"], "a");
    assert_eq!(records[0]["status"], "ok");
    assert_eq!(m["config"]["sampling_steps"], 45);
    assert_eq!(m["config"]["lambda"], 0.8);

    let again = run(&[
        "anonymize",
        "-i",
        &f.s("in"),
        "-t",
        &f.s("target.png"),
        "-o",
        &f.s("again"),
        "--seed",
        "3",
        "--workers",
        "2",
    ]);
    assert!(again.status.success());
    assert_eq!(
        manifest(&f.path("again/manifest.json"))["config_hash"],
        m["config_hash"]
    );
    for n in ["a.png", "b.png"] {
        assert_eq!(
            std::fs::read(f.path("out").join(n)).unwrap(),
            std::fs::read(f.path("again").join(n)).unwrap()
        );
    }
}

#[test]
fn per_image_failure_sets_exit_code() {
    let f = Fixture::new();
    std::fs::write(f.path("in/broken.png"), b"junk").unwrap();
    let out = run(&[
        "anonymize",
        "-i",
        &f.s("in"),
        "-t",
        &f.s("target.png"),
        "-o",
        &f.s("out"),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(f.path("out/a.png").is_file());
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken"));
}

#[test]
fn invalid_configuration_is_rejected() {
    let f = Fixture::new();
    let steps = run(&[
        "anonymize",
        "-i",
        &f.s("in"),
        "-t",
        &f.s("target.png"),
        "--steps",
        "0",
    ]);
    assert_eq!(steps.status.code(), Some(2));
    let region = run(&[
        "anonymize",
        "-i",
        &f.s("in"),
        "-t",
        &f.s("target.png"),
        "--keep-regions",
        "ears",
        "-o",
        &f.s("o"),
    ]);
    assert_eq!(region.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&region.stderr).contains("ears"));
    let adapter = run(&[
        "anonymize",
        "-i",
        &f.s("in"),
        "-t",
        &f.s("target.png"),
        "--backend",
        "adapter",
    ]);
    assert_eq!(adapter.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&adapter.stderr).contains("FACEANON_ADAPTER"));
}

#[test]
fn mask_and_evaluate_commands() {
    let f = Fixture::new();
    let out = run(&[
        "mask",
        "-i",
        &f.s("in/a.png"),
        "--keep-regions",
        "eyes,nose",
        "-o",
        &f.s("masks"),
    ]);
    assert!(out.status.success());
    let mask = image::open(f.path("masks/a_mask.png")).unwrap().to_luma8();
    assert!(mask.pixels().all(|p| p[0] == 0 || p[0] == 255));
    assert!(f.path("masks/a_parse.png").is_file());

    let out = run(&[
        "evaluate",
        "--originals",
        &f.s("in"),
        "--anonymized",
        &f.s("in"),
        "--manifest",
        &f.s("eval.json"),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("Re-ID") && table.contains("V-DNA"));
    let m = manifest(&f.path("eval.json"));
    assert_eq!(m["evaluation"]["reid_rate"], 1.0);
    assert!((m["evaluation"]["mean_ssim"].as_f64().unwrap() - 1.0).abs() < 1e-9);
}

#[test]
fn adapter_backend_over_served_toy() {
    let f = Fixture::new();
    let mut server = bin()
        .args(["serve-toy", "--listen", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .unwrap()
        .to_string();

    let out = bin()
        .env("FACEANON_ADAPTER", &addr)
        .args([
            "anonymize",
            "-i",
            &f.s("in/a.png"),
            "-t",
            &f.s("target.png"),
            "--backend",
            "adapter",
            "-o",
            &f.s("remote"),
            "--steps",
            "10",
        ])
        .output()
        .unwrap();
    server.kill().unwrap();
    let _ = server.wait();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(f.path("remote/a.png").is_file());
    let m = manifest(&f.path("remote/manifest.json"));
    assert_eq!(m["config"]["backend"]["adapter"]["address"], addr.as_str());
}
