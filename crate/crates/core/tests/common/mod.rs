#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use facerep::dataio::encode_image;
use facerep::train::{synthetic_task, tiny_descriptor, CONTRAST, NOISE};

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_facerep"))
}

pub fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn facerep")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes `per_class` 8×8 PGMs per class, `train.csv` and the tiny descriptor
/// (with normalisation) into `dir`.
pub fn synthetic_dir(dir: &Path, per_class: usize) -> (PathBuf, PathBuf) {
    let data = synthetic_task(9, per_class, CONTRAST, NOISE);
    let mut manifest = String::new();
    for (i, (img, l)) in data.images.iter().zip(&data.labels).enumerate() {
        let name = format!("s{i:04}.pgm");
        let px = img.map(|v| (v * 255.0).round().clamp(0.0, 255.0));
        std::fs::write(dir.join(&name), encode_image(&px).unwrap()).unwrap();
        manifest.push_str(&format!("{name},{l}\n"));
    }
    let m = dir.join("train.csv");
    std::fs::write(&m, manifest).unwrap();
    let d = dir.join("tiny.txt");
    std::fs::write(&d, tiny_descriptor(true).to_text()).unwrap();
    (m, d)
}
