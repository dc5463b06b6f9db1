//! A stage-3 checkpoint trained through the CLI on the tiny preset, plus a
//! 16x16 degraded input, built once per test binary.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use gramsr_core::image::{encode_png, ImageTensor};

pub struct Fixture {
    _dir: tempfile::TempDir,
    pub root: PathBuf,
    pub stage0: PathBuf,
    pub stage3: PathBuf,
    pub lq: PathBuf,
}

pub fn tiny_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.json")
}

pub fn gramsr<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_gramsr"))
        .args(args)
        .env_remove("GRAMSR_CONFIG")
        .output()
        .expect("spawn gramsr")
}

pub fn check(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn fixture() -> &'static Fixture {
    static FIXTURE: OnceLock<Fixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = tiny_config();
        let stage0 = root.join("s0.ckpt");
        check(&gramsr([
            "pretrain".as_ref(),
            "--config".as_ref(),
            cfg.as_os_str(),
            "--out".as_ref(),
            stage0.as_os_str(),
        ]));
        let mut prev = stage0.clone();
        for stage in 1..=3 {
            let next = root.join(format!("s{stage}.ckpt"));
            check(&gramsr([
                "train".as_ref(),
                "--stage".as_ref(),
                stage.to_string().as_ref(),
                "--ckpt".as_ref(),
                prev.as_os_str(),
                "--config".as_ref(),
                cfg.as_os_str(),
                "--out".as_ref(),
                next.as_os_str(),
            ]));
            prev = next;
        }

        let hq = ImageTensor::from_fn(64, 64, 3, |y, x, c| {
            let (fy, fx) = (y as f64, x as f64);
            0.5 + 0.4 * ((fy * 0.7 + c as f64).sin() * (fx * 0.45).cos())
        })
        .unwrap();
        let hq_path = root.join("sample.png");
        std::fs::write(&hq_path, encode_png(&hq).unwrap()).unwrap();
        let pairs = root.join("pairs");
        check(&gramsr([
            "degrade".as_ref(),
            "--in".as_ref(),
            hq_path.as_os_str(),
            "--out".as_ref(),
            pairs.as_os_str(),
            "--seed".as_ref(),
            "5".as_ref(),
        ]));
        Fixture {
            _dir: dir,
            stage0,
            stage3: prev,
            lq: pairs.join("sample_lq.png"),
            root,
        }
    })
}

/// Runs `gramsr infer` and returns the written PNG bytes.
pub fn cli_infer(scales: [f64; 3], mode: &str) -> Vec<u8> {
    let f = fixture();
    let out = f.root.join(format!(
        "cli_{}_{}_{}_{mode}.png",
        scales[0], scales[1], scales[2]
    ));
    check(&gramsr([
        "infer".as_ref(),
        "--ckpt".as_ref(),
        f.stage3.as_os_str(),
        "--in".as_ref(),
        f.lq.as_os_str(),
        "--out".as_ref(),
        out.as_os_str(),
        "--lpix".as_ref(),
        scales[0].to_string().as_ref(),
        "--lsem".as_ref(),
        scales[1].to_string().as_ref(),
        "--lgram".as_ref(),
        scales[2].to_string().as_ref(),
        "--mode".as_ref(),
        mode.as_ref(),
    ]));
    std::fs::read(out).unwrap()
}
