#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Output;

use apsense_cli::commands::plan_fetch;
use apsense_cli::config::RunConfig;
use apsense_cli::record::Layout;
use apsense_core::imagery::ImageRequest;
use apsense_core::model::Label;
use apsense_core::raster::{save_png_rgb, ColorRaster};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub const HOTSPOT_CENTRES: [(f64, f64); 6] = [
    (40.7000, -73.9000),
    (40.7100, -73.9100),
    (40.7200, -73.8900),
    (40.6900, -73.9200),
    (40.7300, -73.9300),
    (40.6800, -73.8800),
];

/// Collision CSV: 60 records tightly around each hotspot centre plus 300
/// scattered records that end up as noise.
pub fn write_collisions(path: &Path, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("CRASH DATE,LATITUDE,LONGITUDE\n");
    for &(lat, lon) in &HOTSPOT_CENTRES {
        for _ in 0..60 {
            let (a, b) = (rng.random_range(-0.0001..0.0001), rng.random_range(-0.0001..0.0001));
            out.push_str(&format!("2020-01-01,{},{}\n", lat + a, lon + b));
        }
    }
    for _ in 0..300 {
        let (a, b) = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        out.push_str(&format!("2020-01-02,{},{}\n", 40.7 + a, -73.9 + b));
    }
    out.push_str("2020-01-03,,\n");
    std::fs::write(path, out).unwrap();
}

/// 640×640 street scene stand-in: noisy gray with a coloured square whose
/// colour depends on the class.
pub fn scene(req: &ImageRequest) -> ColorRaster {
    let seed = u64::from_le_bytes(Sha256::digest(req.key().as_bytes())[..8].try_into().unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = req.width as usize;
    let mut img = ColorRaster::new(size, size, [0.0; 3]);
    for v in img.data.iter_mut() {
        *v = rng.random_range(90.0..160.0f64).round();
    }
    let side = size / 3;
    let (x0, y0) = (rng.random_range(0..=size - side), rng.random_range(size / 2..=size - side));
    let colour = match req.label {
        Label::Hotspot => [230.0, 60.0, 40.0],
        Label::NonHotspot => [40.0, 80.0, 230.0],
    };
    for y in y0..y0 + side {
        for x in x0..x0 + side {
            img.set_pixel(x, y, colour);
        }
    }
    img
}

/// Mock-fetch fixtures for every request `fetch` will plan, except those for
/// which `skip` returns true.
pub fn write_fixtures(cfg: &RunConfig, skip: impl Fn(usize) -> bool) -> usize {
    let layout = Layout::new(&cfg.workdir);
    let requests = plan_fetch(cfg, &layout).unwrap();
    std::fs::create_dir_all(&cfg.fetch.fixtures).unwrap();
    let mut written = 0;
    for (i, req) in requests.iter().enumerate() {
        if skip(i) {
            continue;
        }
        let path = cfg.fetch.fixtures.join(format!("{}.png", req.key()));
        save_png_rgb(&path, &scene(req).to_rgb8()).unwrap();
        written += 1;
    }
    written
}

/// Small, fast configuration for the fixture pipeline rooted at `dir`.
pub fn fixture_config(dir: &Path) -> String {
    let q = |p: PathBuf| toml::Value::String(p.to_string_lossy().into_owned()).to_string();
    format!(
        r#"seed = 7
workdir = {workdir}

[cluster]
input = {input}
epsilon = 0.0003
min_points = 50
k_distance = 10

[fetch]
source = "mock"
fixtures = {fixtures}
rate_limit = 0.0
parallelism = 2

[train]
input_size = 32
epochs = 2
batch_size = 4

[explain]
methods = ["gradcam", "gradcampp", "scorecam"]
threshold = "0.5"
split = "test"
labels = ["hotspot", "non_hotspot"]

[evaluate]
strategies = ["black_patch", "explain_only", "inverse_cam@25", "road_imputation@10", "road_imputation@20"]
"#,
        workdir = q(dir.join("run")),
        input = q(dir.join("collisions.csv")),
        fixtures = q(dir.join("fixtures")),
    )
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_apsense")
}

pub fn apsense(config: &Path, args: &[&str]) -> Output {
    std::process::Command::new(bin())
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .unwrap()
}

/// Prepare `dir` (collisions, config, cluster, fixtures) and return the
/// config path.
pub fn prepare(dir: &Path) -> PathBuf {
    write_collisions(&dir.join("collisions.csv"), 5);
    let config = dir.join("apsense.toml");
    std::fs::write(&config, fixture_config(dir)).unwrap();
    let out = apsense(&config, &["cluster"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = RunConfig::load(Some(&config), &[]).unwrap();
    write_fixtures(&cfg, |_| false);
    config
}

/// Run the remaining pipeline stages; returns the first failing stage's
/// stderr on error.
pub fn run_stages(config: &Path, stages: &[&str]) -> Result<(), String> {
    for s in stages {
        let out = apsense(config, &[s]);
        if !out.status.success() {
            return Err(format!("`{s}` failed: {}", String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}
