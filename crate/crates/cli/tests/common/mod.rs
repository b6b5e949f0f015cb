#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use lucent_core::imaging::{save_image, ImageBuffer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn lucent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lucent"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lucent")
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn random_image(w: usize, h: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..w * h * 3).map(|_| rng.random::<u8>()).collect();
    ImageBuffer::new(w, h, data).unwrap()
}

/// Writes `n` random images named `img0.<ext>`, `img1.<ext>`, ...
pub fn write_corpus(dir: &Path, n: usize, w: usize, h: usize, ext: &str) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        save_image(&random_image(w, h, i as u64), dir.join(format!("img{i}.{ext}"))).unwrap();
    }
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}
