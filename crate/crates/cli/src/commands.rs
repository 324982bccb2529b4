//! One function per subcommand. Each writes its artifacts under the work
//! directory and returns the written paths plus a JSON summary.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::BufReader;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use apsense_core::cam::{explain as explain_cam, CamMethod, CamOptions};
use apsense_core::geo::{
    dbscan, hotspots_from_labeling, hotspots_geojson, k_distance_curve, read_accident_csv, read_hotspots_csv,
    write_hotspots_csv, DbscanParams, NOISE,
};
use apsense_core::hud::{simulate as simulate_hud, write_plot_csv, write_trajectory_csv, SimulationConfig};
use apsense_core::imagery::{
    build_manifest, load_color_raster, plan_requests, preprocess, sample_non_hotspot_locations, DatasetManifest,
    FetchOutcome, Fetcher, ImageRequest, LiveClient, MockClient, Split, StreetViewClient,
};
use apsense_core::metrics::{
    area_fraction, average, cam_conf_change, conf_change, conf_change_percent, increase_in_conf, masked_image,
    saliency_mask, visual_saliency, write_report_csv, ConfidenceRecord, MaskKind, MaskStrategy, MetricRow,
};
use apsense_core::model::{Backbone, Classifier, Label, TinyBackbone, TinyBackboneConfig};
use apsense_core::pipeline::{run_pipeline, BandRule, Threshold};
use apsense_core::raster::{load_gray, write_atomic, BinaryMask, ColorRaster, Grid};
use apsense_core::train::{
    evaluate as evaluate_split, load_checkpoint, load_split, save_checkpoint, train as train_model,
    write_training_log, CheckpointMeta, TrainConfig,
};
use apsense_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{FetchSource, RunConfig};
use crate::monitor::{read_trace, run_monitor, write_events_csv};
use crate::record::{append_record, require, Layout, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Cluster,
    Fetch,
    Train,
    Explain,
    Evaluate,
    Simulate,
    Monitor,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Cluster => "cluster",
            Command::Fetch => "fetch",
            Command::Train => "train",
            Command::Explain => "explain",
            Command::Evaluate => "evaluate",
            Command::Simulate => "simulate",
            Command::Monitor => "monitor",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub outputs: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

/// Run `command`, then store the effective config next to its outputs and
/// append a run record.
pub fn run(command: Command, cfg: &RunConfig) -> Result<Outcome> {
    let layout = Layout::new(&cfg.workdir);
    let started_at = chrono::Utc::now().to_rfc3339();
    let t0 = Instant::now();
    let mut out = match command {
        Command::Cluster => cluster(cfg, &layout),
        Command::Fetch => fetch(cfg, &layout),
        Command::Train => train(cfg, &layout),
        Command::Explain => explain(cfg, &layout),
        Command::Evaluate => evaluate(cfg, &layout),
        Command::Simulate => simulate(cfg, &layout),
        Command::Monitor => monitor(cfg, &layout),
    }?;
    let cfg_path = layout.stage(command.as_str()).join("config.toml");
    write_atomic(&cfg_path, cfg.to_toml()?.as_bytes())?;
    out.outputs.push(cfg_path);
    let record = RunRecord {
        command: command.as_str().into(),
        started_at,
        duration_ms: t0.elapsed().as_millis(),
        seed: cfg.seed,
        config_sha256: cfg.hash()?,
        outputs: out.outputs.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    append_record(&layout.records(), &record)?;
    Ok(out)
}

fn open(path: &Path, producer: &str) -> Result<BufReader<File>> {
    require(path, producer)?;
    Ok(BufReader::new(File::open(path)?))
}

fn write_csv(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> apsense_core::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)?;
    Ok(())
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    write_csv(path, |buf| {
        let mut w = csv::Writer::from_writer(buf);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
    Ok(())
}

pub fn cluster(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let c = &cfg.cluster;
    if !c.input.is_file() {
        return Err(Error::MissingArtifact {
            path: c.input.clone(),
            hint: "point `cluster.input` at a collision CSV with latitude/longitude columns".into(),
        }
        .into());
    }
    let (records, skipped) = read_accident_csv(BufReader::new(File::open(&c.input)?))?;
    let params = DbscanParams {
        epsilon: c.epsilon,
        min_points: c.min_points,
    };
    let labeling = dbscan(&records, &params)?;
    let hotspots = hotspots_from_labeling(&records, &labeling)?;
    let dir = layout.stage("cluster");
    write_csv(&layout.hotspots_csv(), |buf| write_hotspots_csv(buf, &hotspots))?;
    write_json(&layout.hotspots_geojson(), &hotspots_geojson(&hotspots))?;

    #[derive(Serialize)]
    struct NoiseRow {
        latitude: f64,
        longitude: f64,
    }
    let noise: Vec<NoiseRow> = records
        .iter()
        .zip(&labeling.labels)
        .filter(|(_, &l)| l == NOISE)
        .map(|(r, _)| NoiseRow {
            latitude: r.lat,
            longitude: r.lon,
        })
        .collect();
    write_rows(&layout.noise_csv(), &noise)?;
    let mut outputs = vec![layout.hotspots_csv(), layout.hotspots_geojson(), layout.noise_csv()];

    let mut knee = json!(null);
    if c.k_distance > 0 && c.k_distance < records.len() {
        let curve = k_distance_curve(&records, c.k_distance)?;
        #[derive(Serialize)]
        struct KRow {
            rank: usize,
            distance: f64,
        }
        let rows: Vec<KRow> = curve
            .distances
            .iter()
            .enumerate()
            .map(|(rank, &distance)| KRow { rank, distance })
            .collect();
        let path = dir.join("k_distance.csv");
        write_rows(&path, &rows)?;
        outputs.push(path);
        knee = json!({ "k": c.k_distance, "index": curve.knee_index(), "suggested_epsilon": curve.suggested_epsilon() });
    }
    let summary = json!({
        "records": records.len(),
        "skipped_rows": skipped,
        "hotspots": hotspots.len(),
        "noise": noise.len(),
        "epsilon": c.epsilon,
        "min_points": c.min_points,
        "k_distance": knee,
    });
    let path = dir.join("summary.json");
    write_json(&path, &summary)?;
    outputs.push(path);
    Ok(Outcome { outputs, summary })
}

/// Requests `fetch` will issue: two headings per hotspot, then two per
/// sampled non-hotspot location.
pub fn plan_fetch(cfg: &RunConfig, layout: &Layout) -> Result<Vec<ImageRequest>> {
    let mut hotspots = read_hotspots_csv(open(&layout.hotspots_csv(), "cluster")?)?;
    if let Some(m) = cfg.fetch.max_hotspots {
        hotspots.truncate(m);
    }
    let (noise, _) = read_accident_csv(open(&layout.noise_csv(), "cluster")?)?;
    let count = cfg.fetch.non_hotspot_count.unwrap_or(hotspots.len());
    let others = sample_non_hotspot_locations(&noise, count, cfg.seed);
    let mut locations: Vec<(f64, f64, Label)> = hotspots.iter().map(|h| (h.lat, h.lon, Label::Hotspot)).collect();
    locations.extend(others.iter().map(|r| (r.lat, r.lon, Label::NonHotspot)));
    Ok(plan_requests(&locations, cfg.fetch.base_heading, cfg.fetch.fov))
}

fn fetch_with<C: StreetViewClient>(
    client: C,
    cfg: &RunConfig,
    layout: &Layout,
    requests: &[ImageRequest],
) -> (Vec<apsense_core::Result<FetchOutcome>>, usize) {
    let fetcher = Fetcher::new(client, layout.fetch_dir().join("cache")).with_rate_limit(cfg.fetch.rate_limit);
    let results = fetcher.fetch_all(requests, cfg.fetch.parallelism);
    (results, fetcher.client.calls())
}

fn image_extension(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(&[0xFF, 0xD8]) {
        "jpg"
    } else {
        "png"
    }
}

pub fn fetch(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let f = &cfg.fetch;
    let requests = plan_fetch(cfg, layout)?;
    let (results, calls) = match f.source {
        FetchSource::Mock => {
            if !f.fixtures.is_dir() {
                return Err(Error::MissingArtifact {
                    path: f.fixtures.clone(),
                    hint: "point `fetch.fixtures` at a directory of `<lat>_<lon>_<heading>.png` images".into(),
                }
                .into());
            }
            fetch_with(MockClient::new(&f.fixtures), cfg, layout, &requests)
        }
        FetchSource::Live => {
            let key = std::env::var(&f.api_key_env)
                .map_err(|_| Error::Config(format!("set the `{}` environment variable to an API key", f.api_key_env)))?;
            let client = LiveClient::new(&f.endpoint, key, Duration::from_secs_f64(f.timeout_s));
            fetch_with(client, cfg, layout, &requests)
        }
    };
    let dir = layout.fetch_dir();
    let mut images: Vec<(PathBuf, Label)> = Vec::new();
    let mut seen = HashSet::new();

    #[derive(Serialize)]
    struct SkipRow {
        lat: f64,
        lon: f64,
        heading: f64,
        label: Label,
    }
    let mut skipped = Vec::new();
    let mut failures = Vec::new();
    for (req, res) in requests.iter().zip(results) {
        match res {
            Ok(FetchOutcome::Image(img)) => {
                let rel = PathBuf::from("images")
                    .join(img.label.as_str())
                    .join(format!("{}.{}", req.key(), image_extension(&img.bytes)));
                if !seen.insert(rel.clone()) {
                    log::warn!("duplicate request {}, keeping the first image", req.describe());
                    continue;
                }
                write_atomic(&dir.join(&rel), &img.bytes)?;
                images.push((rel, img.label));
            }
            Ok(FetchOutcome::Skipped(r)) => skipped.push(SkipRow {
                lat: r.lat,
                lon: r.lon,
                heading: r.heading,
                label: r.label,
            }),
            Err(e) => failures.push(format!("{}: {e}", req.describe())),
        }
    }
    if !failures.is_empty() {
        bail!(
            "{} of {} requests failed; rerun `fetch` to resume from the cache. First failure: {}",
            failures.len(),
            requests.len(),
            failures[0]
        );
    }
    let manifest = build_manifest(&images, f.split, cfg.seed)?;
    write_atomic(&layout.manifest(), manifest.to_json()?.as_bytes())?;
    let skipped_path = dir.join("skipped.csv");
    write_rows(&skipped_path, &skipped)?;
    let summary = json!({
        "requests": requests.len(),
        "images": images.len(),
        "skipped": skipped.len(),
        "provider_calls": calls,
        "train": manifest.split(Split::Train).len(),
        "test": manifest.split(Split::Test).len(),
        "val": manifest.split(Split::Val).len(),
    });
    let summary_path = dir.join("summary.json");
    write_json(&summary_path, &summary)?;
    Ok(Outcome {
        outputs: vec![layout.manifest(), skipped_path, summary_path],
        summary,
    })
}

fn read_manifest(layout: &Layout) -> Result<DatasetManifest> {
    require(&layout.manifest(), "fetch")?;
    let manifest = DatasetManifest::from_json(&std::fs::read_to_string(layout.manifest())?)?;
    manifest.verify_paths(&layout.fetch_dir())?;
    Ok(manifest)
}

pub fn train(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let t = &cfg.train;
    let manifest = read_manifest(layout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let backbone = TinyBackbone::new(TinyBackboneConfig { widths: t.widths.clone() }, &mut rng)?;
    let norm = backbone.normalization();
    let mut model = Classifier::new(backbone, t.abm, t.input_size, &mut rng)?;
    let root = layout.fetch_dir();
    let train_set = load_split(&manifest, Split::Train, &root, &norm, t.input_size)?;
    let val_set = load_split(&manifest, Split::Val, &root, &norm, t.input_size)?;
    let tc = TrainConfig {
        epochs: t.epochs,
        batch_size: t.batch_size,
        learning_rate: t.learning_rate,
        momentum: t.momentum,
        mode: t.mode,
        seed: cfg.seed,
    };
    let logs = train_model(&mut model, &train_set, &val_set, &tc, |l| {
        log::info!("epoch {} train_loss {:.6} val_acc {:?}", l.epoch, l.train_loss, l.val_acc);
        ControlFlow::Continue(())
    })?;
    let dir = layout.stage("train");
    save_checkpoint(&model, cfg.seed, &layout.checkpoint())?;
    let log_path = dir.join("training_log.csv");
    write_csv(&log_path, |buf| write_training_log(buf, &logs))?;
    let test_set = load_split(&manifest, Split::Test, &root, &norm, t.input_size)?;
    let test = if test_set.is_empty() {
        None
    } else {
        Some(evaluate_split(&model, &test_set)?)
    };
    let summary = json!({
        "epochs": logs.len(),
        "train_images": train_set.len(),
        "val_images": val_set.len(),
        "test_images": test_set.len(),
        "final_train_loss": logs.last().map(|l| l.train_loss),
        "test": test,
    });
    let eval_path = dir.join("evaluation.json");
    write_json(&eval_path, &summary)?;
    Ok(Outcome {
        outputs: vec![layout.checkpoint(), log_path, eval_path],
        summary,
    })
}

/// One explained image under one CAM method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainRow {
    /// Image path relative to the fetch directory.
    pub image: PathBuf,
    pub label: Label,
    pub cam_method: String,
    pub heatmap: PathBuf,
    pub mask: PathBuf,
    pub contours: PathBuf,
    pub overlay: PathBuf,
    pub target_confidence: f64,
    pub predicted: Label,
    pub threshold: f64,
    pub area_fraction: f64,
    pub segments: usize,
}

fn load_model(layout: &Layout) -> Result<(Classifier<TinyBackbone>, CheckpointMeta)> {
    require(&layout.checkpoint(), "train")?;
    Ok(load_checkpoint(&layout.checkpoint())?)
}

fn image_stem(entry_path: &Path, label: Label) -> String {
    let stem = entry_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    format!("{}_{stem}", label.as_str())
}

fn square(img: &ColorRaster, path: &Path) -> Result<usize> {
    if img.width != img.height {
        bail!("{} is {}x{}; explanations need square images", path.display(), img.width, img.height);
    }
    Ok(img.width)
}

pub fn explain(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let e = &cfg.explain;
    let (model, meta) = load_model(layout)?;
    let manifest = read_manifest(layout)?;
    let methods = e
        .methods
        .iter()
        .map(|m| CamMethod::parse(m))
        .collect::<apsense_core::Result<Vec<_>>>()?;
    if methods.is_empty() {
        bail!(Error::Config("`explain.methods` is empty".into()));
    }
    let threshold = Threshold::parse(&e.threshold)?;
    let entries: Vec<_> = manifest
        .split(e.split)
        .into_iter()
        .filter(|m| e.labels.contains(&m.label))
        .collect();
    let dir = layout.stage("explain");
    let mut rows = Vec::new();
    for entry in &entries {
        let src = layout.fetch_dir().join(&entry.path);
        let img = load_color_raster(&src)?;
        let size = square(&img, &src)?;
        let input = preprocess(&img, &meta.normalization, model.input_size);
        let scores = model.classify(&input)?;
        let rgb = img.to_rgb8();
        let stem = image_stem(&entry.path, entry.label);
        for &method in &methods {
            let opts = CamOptions {
                layer: e.layer,
                target: e.target,
                output_size: size,
            };
            let heatmap = explain_cam(method, &model, &input, &opts)?;
            let rel = PathBuf::from(method.as_str());
            let file = |suffix: &str| rel.join(format!("{stem}_{suffix}"));
            let row = ExplainRow {
                image: entry.path.clone(),
                label: entry.label,
                cam_method: method.as_str().into(),
                heatmap: file("heatmap.png"),
                mask: file("mask.png"),
                contours: file("contours.json"),
                overlay: file("overlay.png"),
                target_confidence: scores.confidence(e.target),
                predicted: scores.predicted(),
                threshold: 0.0,
                area_fraction: 0.0,
                segments: 0,
            };
            heatmap.save(&dir.join(&row.heatmap))?;
            let ap = run_pipeline(&heatmap.values, threshold, &BandRule::for_height(size))?;
            ap.save_mask_png(&dir.join(&row.mask))?;
            ap.save_contours_json(&dir.join(&row.contours))?;
            ap.save_overlay_png(&rgb, &dir.join(&row.overlay))?;
            rows.push(ExplainRow {
                threshold: ap.threshold,
                area_fraction: ap.area_fraction,
                segments: ap.contours.len(),
                ..row
            });
        }
    }
    write_rows(&layout.explain_index(), &rows)?;
    let summary = json!({
        "images": entries.len(),
        "methods": methods.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
        "explanations": rows.len(),
    });
    Ok(Outcome {
        outputs: vec![layout.explain_index()],
        summary,
    })
}

#[derive(Serialize)]
struct ConfidenceRow<'a> {
    image: &'a Path,
    cam_method: &'a str,
    strategy: String,
    confidence: f64,
}

pub fn evaluate(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let (model, meta) = load_model(layout)?;
    let manifest_root = layout.fetch_dir();
    read_manifest(layout)?;
    let rows: Vec<ExplainRow> = csv::Reader::from_reader(open(&layout.explain_index(), "explain")?)
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    if rows.is_empty() {
        bail!(Error::InvalidInput(
            "no explanations to evaluate; check `explain.split` and `explain.labels`".into()
        ));
    }
    let strategies = cfg
        .evaluate
        .strategies
        .iter()
        .map(|s| MaskStrategy::parse(s))
        .collect::<apsense_core::Result<Vec<_>>>()?;
    let target = cfg.explain.target;
    let confidence = |img: &ColorRaster| -> Result<f64> {
        Ok(model
            .classify(&preprocess(img, &meta.normalization, model.input_size))?
            .confidence(target))
    };
    let black = MaskStrategy::new(MaskKind::BlackPatch, None)?;
    let only = MaskStrategy::new(MaskKind::ExplainOnly, None)?;
    let model_name = format!("{}-abm-{:?}", meta.backbone, meta.abm.variant).to_lowercase();
    let explain_dir = layout.stage("explain");

    let mut methods: Vec<&str> = Vec::new();
    for r in &rows {
        if !methods.contains(&r.cam_method.as_str()) {
            methods.push(&r.cam_method);
        }
    }
    let mut report = Vec::new();
    let mut conf_rows = Vec::new();
    for method in methods {
        let group: Vec<&ExplainRow> = rows.iter().filter(|r| r.cam_method == method).collect();
        let n = group.len();
        let mut records = Vec::with_capacity(n);
        let mut areas = Vec::with_capacity(n);
        let mut per_strategy: Vec<Vec<f64>> = vec![Vec::with_capacity(n); strategies.len()];
        let mut saliency_pairs = Vec::new();
        for r in &group {
            let img = load_color_raster(&manifest_root.join(&r.image))?;
            let heat_path = explain_dir.join(&r.heatmap);
            let mask_path = explain_dir.join(&r.mask);
            require(&heat_path, "explain")?;
            require(&mask_path, "explain")?;
            let heatmap = Grid::from_gray8(&load_gray(&heat_path)?);
            let mask = BinaryMask::from_gray8(&load_gray(&mask_path)?);
            let y = confidence(&img)?;
            let o = confidence(&masked_image(&img, &heatmap, &mask, &black)?)?;
            let e = confidence(&masked_image(&img, &heatmap, &mask, &only)?)?;
            records.push(ConfidenceRecord { y, o, e });
            areas.push(area_fraction(&mask));
            conf_rows.push(ConfidenceRow {
                image: &r.image,
                cam_method: method,
                strategy: "original".into(),
                confidence: y,
            });
            for (s, out) in strategies.iter().zip(per_strategy.iter_mut()) {
                let c = confidence(&masked_image(&img, &heatmap, &mask, s)?)?;
                out.push(c);
                conf_rows.push(ConfidenceRow {
                    image: &r.image,
                    cam_method: method,
                    strategy: s.label(),
                    confidence: c,
                });
            }
            if let Some(sal_dir) = &cfg.evaluate.saliency_dir {
                let stem = r.image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let path = sal_dir.join(format!("{stem}.png"));
                if !path.is_file() {
                    return Err(Error::MissingArtifact {
                        path,
                        hint: "add the gaze saliency map or unset `evaluate.saliency_dir`".into(),
                    }
                    .into());
                }
                saliency_pairs.push((saliency_mask(&load_gray(&path)?), mask));
            }
        }
        let row = |strategy: &str, t: Option<f64>, metric: &str, value: f64| MetricRow {
            model: model_name.clone(),
            cam_method: method.to_string(),
            strategy: strategy.to_string(),
            t,
            metric: metric.to_string(),
            value,
            n_images: n,
        };
        report.push(row("ap_mask", None, "area_fraction", average(&areas)?));
        report.push(row("black_patch", None, "conf_change_percent", conf_change_percent(&records)?));
        report.push(row("explain_only", None, "cam_conf_change", cam_conf_change(&records)?));
        report.push(row("explain_only", None, "increase_in_conf", increase_in_conf(&records) as f64));
        let ys: Vec<f64> = records.iter().map(|r| r.y).collect();
        let mut by_kind: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (s, masked) in strategies.iter().zip(&per_strategy) {
            let v = conf_change(&ys, masked)?;
            report.push(row(s.kind.as_str(), s.threshold_percent, "conf_change", v));
            if s.threshold_percent.is_some() {
                by_kind.entry(s.kind.as_str()).or_default().push(v);
            }
        }
        for (kind, vals) in by_kind.into_iter().filter(|(_, v)| v.len() > 1) {
            report.push(row(kind, None, "conf_change_mean_over_t", average(&vals)?));
        }
        if !saliency_pairs.is_empty() {
            report.push(row("ap_mask", None, "visual_saliency", visual_saliency(&saliency_pairs)?));
        }
    }
    let dir = layout.stage("evaluate");
    write_csv(&layout.metrics_csv(), |buf| write_report_csv(buf, &report))?;
    let conf_path = dir.join("confidences.csv");
    write_rows(&conf_path, &conf_rows)?;
    let summary = json!({ "rows": report.len(), "explanations": rows.len(), "model": model_name });
    Ok(Outcome {
        outputs: vec![layout.metrics_csv(), conf_path],
        summary,
    })
}

pub fn simulate(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let s = &cfg.simulate;
    let scenario: SimulationConfig = match (&s.scenario_file, &s.scenario) {
        (Some(path), _) => {
            if !path.is_file() {
                return Err(Error::MissingArtifact {
                    path: path.clone(),
                    hint: "point `simulate.scenario_file` at a scenario TOML file".into(),
                }
                .into());
            }
            toml::from_str(&std::fs::read_to_string(path)?)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        (None, Some(inline)) => inline.clone(),
        (None, None) => bail!(Error::Config(
            "set `simulate.scenario_file` or an inline `[simulate.scenario]` table".into()
        )),
    };
    let steps = simulate_hud(&scenario)?;
    let dir = layout.stage("simulate");
    let traj = dir.join("trajectory.csv");
    let plot = dir.join("plot.csv");
    write_csv(&traj, |buf| write_trajectory_csv(buf, &steps))?;
    write_csv(&plot, |buf| write_plot_csv(buf, &steps))?;
    let inside = steps.iter().filter(|s| s.point.inside_bounds).count();
    let summary = json!({ "steps": steps.len(), "inside_bounds": inside });
    Ok(Outcome {
        outputs: vec![traj, plot],
        summary,
    })
}

pub fn monitor(cfg: &RunConfig, layout: &Layout) -> Result<Outcome> {
    let m = &cfg.monitor;
    let hotspot_path = m.hotspots.clone().unwrap_or_else(|| layout.hotspots_csv());
    let hotspots = read_hotspots_csv(open(&hotspot_path, "cluster")?)?;
    if !m.trace.is_file() {
        return Err(Error::MissingArtifact {
            path: m.trace.clone(),
            hint: "point `monitor.trace` at a GPS trace CSV `timestamp,lat,lon`".into(),
        }
        .into());
    }
    let trace = read_trace(BufReader::new(File::open(&m.trace)?)).with_context(|| format!("reading {}", m.trace.display()))?;
    let events = run_monitor(&trace, &hotspots, m.radius_m, m.hysteresis_m)?;
    let path = layout.stage("monitor").join("events.csv");
    write_csv(&path, |buf| write_events_csv(buf, &events))?;
    let summary = json!({
        "samples": trace.len(),
        "hotspots": hotspots.len(),
        "events": events.len(),
        "radius_m": m.radius_m,
    });
    Ok(Outcome {
        outputs: vec![path],
        summary,
    })
}

/// Category and message of an error for the JSON report on stderr.
pub fn error_report(err: &anyhow::Error) -> serde_json::Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map(|e| e.kind())
        .unwrap_or("error");
    let mut report = json!({ "error": kind, "message": format!("{err:#}") });
    if let Some(Error::MissingArtifact { path, hint }) = err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        report["path"] = json!(path);
        report["hint"] = json!(hint);
    }
    report
}
