//! Street-view acquisition and dataset bookkeeping.
//!
//! Every location yields two requests, at +60° and −60° from a configurable
//! base heading. Fetched bytes are cached under a content-addressed layout so
//! a request (or a panorama/heading pair) is downloaded at most once.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geo::AccidentRecord;
use crate::model::{Label, Normalization};
use crate::nn::FeatureTensor;
use crate::raster::{write_atomic, ColorRaster};

pub const RAW_SIZE: u32 = 640;
pub const MODEL_INPUT_SIZE: usize = 224;
pub const HEADING_OFFSETS: [f64; 2] = [60.0, -60.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRequest {
    pub lat: f64,
    pub lon: f64,
    /// Offset from the base heading, +60 or −60 degrees.
    pub heading_offset: f64,
    /// Absolute compass heading sent to the provider, in [0, 360).
    pub heading: f64,
    pub width: u32,
    pub height: u32,
    /// Field of view; `None` leaves the provider default.
    pub fov: Option<f64>,
    pub label: Label,
}

impl ImageRequest {
    /// Stable fixture / file stem for this request.
    pub fn key(&self) -> String {
        format!("{:.6}_{:.6}_{:.0}", self.lat, self.lon, self.heading)
    }

    fn cache_key(&self) -> String {
        format!(
            "req|{:.7}|{:.7}|{:.3}|{}x{}|{:?}",
            self.lat, self.lon, self.heading, self.width, self.height, self.fov
        )
    }

    fn pano_cache_key(&self, pano: &str) -> String {
        format!(
            "pano|{pano}|{:.3}|{}x{}|{:?}",
            self.heading, self.width, self.height, self.fov
        )
    }

    pub fn describe(&self) -> String {
        format!(
            "location={},{} heading={} size={}x{}",
            self.lat, self.lon, self.heading, self.width, self.height
        )
    }
}

/// Two requests per location (+60°, −60°), in input order.
pub fn plan_requests(
    locations: &[(f64, f64, Label)],
    base_heading: f64,
    fov: Option<f64>,
) -> Vec<ImageRequest> {
    locations
        .iter()
        .flat_map(|&(lat, lon, label)| {
            HEADING_OFFSETS.map(|offset| ImageRequest {
                lat,
                lon,
                heading_offset: offset,
                heading: (base_heading + offset).rem_euclid(360.0),
                width: RAW_SIZE,
                height: RAW_SIZE,
                fov,
                label,
            })
        })
        .collect()
}

/// Pick up to `count` distinct noise locations for the non-hotspot class.
pub fn sample_non_hotspot_locations(
    noise: &[AccidentRecord],
    count: usize,
    seed: u64,
) -> Vec<AccidentRecord> {
    let mut seen = HashSet::new();
    let mut unique: Vec<AccidentRecord> = noise
        .iter()
        .filter(|r| seen.insert((r.lat.to_bits(), r.lon.to_bits())))
        .copied()
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    unique.truncate(count);
    unique
}

/// Source of street-view imagery.
pub trait StreetViewClient: Send + Sync {
    /// Panorama id serving `req`, `None` when no imagery exists there.
    fn panorama(&self, req: &ImageRequest) -> Result<Option<String>>;
    /// Encoded image bytes for `req`.
    fn image(&self, req: &ImageRequest) -> Result<Vec<u8>>;
    /// Number of provider calls made so far.
    fn calls(&self) -> usize;
}

/// Serves fixtures named `<lat>_<lon>_<heading>.png` from a directory. An
/// optional `<stem>.pano` text file overrides the panorama id (the stem).
pub struct MockClient {
    dir: PathBuf,
    calls: AtomicUsize,
}

impl MockClient {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            calls: AtomicUsize::new(0),
        }
    }

    fn fixture(&self, req: &ImageRequest) -> Option<PathBuf> {
        ["png", "jpg", "jpeg"]
            .iter()
            .map(|ext| self.dir.join(format!("{}.{ext}", req.key())))
            .find(|p| p.is_file())
    }
}

impl StreetViewClient for MockClient {
    fn panorama(&self, req: &ImageRequest) -> Result<Option<String>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let Some(_) = self.fixture(req) else {
            return Ok(None);
        };
        let pano_file = self.dir.join(format!("{}.pano", req.key()));
        if pano_file.is_file() {
            Ok(Some(std::fs::read_to_string(pano_file)?.trim().to_string()))
        } else {
            Ok(Some(req.key()))
        }
    }

    fn image(&self, req: &ImageRequest) -> Result<Vec<u8>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let path = self.fixture(req).ok_or_else(|| Error::Fetch {
            request: req.describe(),
            message: "fixture missing".into(),
        })?;
        Ok(std::fs::read(path)?)
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Street View Static API client (`<endpoint>` and `<endpoint>/metadata`).
pub struct LiveClient {
    pub endpoint: String,
    api_key: String,
    agent: ureq::Agent,
    calls: AtomicUsize,
}

impl LiveClient {
    pub const DEFAULT_ENDPOINT: &'static str = "https://maps.googleapis.com/maps/api/streetview";

    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            agent,
            calls: AtomicUsize::new(0),
        }
    }

    /// Query parameters shared by image and metadata calls.
    pub fn query(&self, req: &ImageRequest) -> Vec<(&'static str, String)> {
        let mut q = vec![
            ("location", format!("{},{}", req.lat, req.lon)),
            ("heading", format!("{}", req.heading)),
            ("size", format!("{}x{}", req.width, req.height)),
        ];
        if let Some(fov) = req.fov {
            q.push(("fov", format!("{fov}")));
        }
        q.push(("key", self.api_key.clone()));
        q
    }

    fn get(&self, url: &str, req: &ImageRequest) -> Result<Vec<u8>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let fail = |message: String| Error::Fetch {
            request: req.describe(),
            message,
        };
        let mut builder = self.agent.get(url);
        for (k, v) in self.query(req) {
            builder = builder.query(k, v);
        }
        let mut resp = builder.call().map_err(|e| fail(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(fail(format!("HTTP {status}")));
        }
        resp.body_mut()
            .with_config()
            .limit(32 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| fail(e.to_string()))
    }
}

impl StreetViewClient for LiveClient {
    fn panorama(&self, req: &ImageRequest) -> Result<Option<String>> {
        #[derive(Deserialize)]
        struct Meta {
            status: String,
            pano_id: Option<String>,
        }
        let body = self.get(&format!("{}/metadata", self.endpoint), req)?;
        let meta: Meta = serde_json::from_slice(&body)?;
        match meta.status.as_str() {
            "OK" => Ok(meta.pano_id.or_else(|| Some(req.key()))),
            "ZERO_RESULTS" | "NOT_FOUND" => Ok(None),
            other => Err(Error::Fetch {
                request: req.describe(),
                message: format!("metadata status {other}"),
            }),
        }
    }

    fn image(&self, req: &ImageRequest) -> Result<Vec<u8>> {
        self.get(&self.endpoint, req)
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone)]
pub struct SceneImage {
    pub pixels: RgbImage,
    /// Encoded bytes exactly as fetched.
    pub bytes: Vec<u8>,
    pub request: ImageRequest,
    pub pano_id: Option<String>,
    pub label: Label,
}

#[derive(Debug, Clone)]
pub enum FetchOutcome {
    Image(Box<SceneImage>),
    /// No panorama at the requested location.
    Skipped(ImageRequest),
}

/// Simple token bucket; `acquire` blocks until a token is available.
pub struct TokenBucket {
    capacity: f64,
    per_second: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(per_second: f64, capacity: f64) -> Self {
        Self {
            capacity,
            per_second,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap();
                let now = Instant::now();
                s.0 = (s.0 + now.duration_since(s.1).as_secs_f64() * self.per_second)
                    .min(self.capacity);
                s.1 = now;
                if s.0 >= 1.0 {
                    s.0 -= 1.0;
                    return;
                }
                (1.0 - s.0) / self.per_second
            };
            std::thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

pub struct Fetcher<C: StreetViewClient> {
    pub client: C,
    cache_root: PathBuf,
    limiter: Option<TokenBucket>,
}

fn digest(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

impl<C: StreetViewClient> Fetcher<C> {
    pub fn new(client: C, cache_root: impl Into<PathBuf>) -> Self {
        Self {
            client,
            cache_root: cache_root.into(),
            limiter: None,
        }
    }

    pub fn with_rate_limit(mut self, per_second: f64) -> Self {
        if per_second > 0.0 {
            self.limiter = Some(TokenBucket::new(per_second, per_second.max(1.0)));
        }
        self
    }

    fn entry(&self, key: &str, ext: &str) -> PathBuf {
        let h = digest(key);
        self.cache_root.join(&h[..2]).join(format!("{h}.{ext}"))
    }

    fn throttle(&self) {
        if let Some(l) = &self.limiter {
            l.acquire();
        }
    }

    fn decode(&self, req: &ImageRequest, bytes: Vec<u8>, pano_id: Option<String>) -> Result<FetchOutcome> {
        let pixels = image::load_from_memory(&bytes)?.to_rgb8();
        if pixels.width() != req.width || pixels.height() != req.height {
            return Err(Error::invalid(format!(
                "image for {} is {}x{}, expected {}x{}",
                req.describe(),
                pixels.width(),
                pixels.height(),
                req.width,
                req.height
            )));
        }
        Ok(FetchOutcome::Image(Box::new(SceneImage {
            pixels,
            bytes,
            request: req.clone(),
            pano_id,
            label: req.label,
        })))
    }

    pub fn fetch(&self, req: &ImageRequest) -> Result<FetchOutcome> {
        let req_entry = self.entry(&req.cache_key(), "img");
        let req_pano = self.entry(&req.cache_key(), "pano");
        let req_none = self.entry(&req.cache_key(), "none");
        if req_none.is_file() {
            return Ok(FetchOutcome::Skipped(req.clone()));
        }
        if req_entry.is_file() {
            let pano = std::fs::read_to_string(&req_pano).ok();
            return self.decode(req, std::fs::read(&req_entry)?, pano);
        }
        self.throttle();
        let Some(pano) = self.client.panorama(req)? else {
            write_atomic(&req_none, b"")?;
            return Ok(FetchOutcome::Skipped(req.clone()));
        };
        let pano_entry = self.entry(&req.pano_cache_key(&pano), "img");
        let bytes = if pano_entry.is_file() {
            std::fs::read(&pano_entry)?
        } else {
            self.throttle();
            let bytes = self.client.image(req)?;
            write_atomic(&pano_entry, &bytes)?;
            bytes
        };
        write_atomic(&req_entry, &bytes)?;
        write_atomic(&req_pano, pano.as_bytes())?;
        self.decode(req, bytes, Some(pano))
    }

    /// Retry retryable failures up to `attempts` times with linear backoff.
    pub fn fetch_with_retry(&self, req: &ImageRequest, attempts: usize, backoff: Duration) -> Result<FetchOutcome> {
        let mut last = None;
        for attempt in 0..attempts.max(1) {
            match self.fetch(req) {
                Err(e @ Error::Fetch { .. }) => {
                    log::warn!("attempt {} failed: {e}", attempt + 1);
                    last = Some(e);
                    std::thread::sleep(backoff * (attempt as u32 + 1));
                }
                other => return other,
            }
        }
        Err(last.unwrap())
    }

    /// Fetch every request with at most `parallelism` in flight; results are
    /// returned in request order.
    pub fn fetch_all(&self, requests: &[ImageRequest], parallelism: usize) -> Vec<Result<FetchOutcome>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<FetchOutcome>>>> =
            requests.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..parallelism.clamp(1, requests.len().max(1)) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= requests.len() {
                        break;
                    }
                    let r = self.fetch_with_retry(&requests[i], 3, Duration::from_millis(200));
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().unwrap())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Label,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub test: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            test: 0.2,
            val: 0.1,
        }
    }
}

impl SplitFractions {
    /// Largest-remainder apportionment of `n` items (ties go to the earlier
    /// split in train, test, val order).
    pub fn sizes(&self, n: usize) -> [usize; 3] {
        let fr = [self.train, self.test, self.val];
        let raw: Vec<f64> = fr.iter().map(|f| f * n as f64).collect();
        let mut sizes: [usize; 3] = [0; 3];
        for i in 0..3 {
            sizes[i] = (raw[i] + 1e-9).floor() as usize;
        }
        let mut left = n.saturating_sub(sizes.iter().sum());
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = raw[a] - sizes[a] as f64;
            let rb = raw[b] - sizes[b] as f64;
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[i] += 1;
            left -= 1;
        }
        sizes
    }
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    /// Every entry path exists, resolving relative paths against `root`.
    pub fn verify_paths(&self, root: &Path) -> Result<()> {
        for e in &self.entries {
            let p = root.join(&e.path);
            if !p.is_file() {
                return Err(Error::MissingArtifact {
                    path: p,
                    hint: "manifest entry does not exist; re-run `fetch`".into(),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Seeded, class-stratified split. Each class is shuffled independently,
/// classes are interleaved in proportion to their sizes, and the interleaved
/// sequence is cut into consecutive train/test/val runs.
pub fn build_manifest(
    images: &[(PathBuf, Label)],
    fractions: SplitFractions,
    seed: u64,
) -> Result<DatasetManifest> {
    if images.is_empty() {
        return Err(Error::invalid("no images to split"));
    }
    let sum = fractions.train + fractions.test + fractions.val;
    if (sum - 1.0).abs() > 1e-9 || [fractions.train, fractions.test, fractions.val].iter().any(|f| *f < 0.0) {
        return Err(Error::invalid(format!("split fractions must sum to 1, got {sum}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(images.len());
    for (class_rank, label) in [Label::Hotspot, Label::NonHotspot].into_iter().enumerate() {
        let mut members: Vec<usize> = (0..images.len()).filter(|&i| images[i].1 == label).collect();
        members.shuffle(&mut rng);
        let n = members.len() as f64;
        for (k, idx) in members.into_iter().enumerate() {
            keyed.push(((k as f64 + 0.5) / n, class_rank, idx));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let [n_train, n_test, _] = fractions.sizes(images.len());
    let entries = keyed
        .into_iter()
        .enumerate()
        .map(|(pos, (_, _, idx))| {
            let split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_test {
                Split::Test
            } else {
                Split::Val
            };
            ManifestEntry {
                path: images[idx].0.clone(),
                label: images[idx].1,
                split,
            }
        })
        .collect();
    Ok(DatasetManifest { entries })
}

/// Bilinear resize to `size`×`size` (intensities stay on the 0..=255 scale).
pub fn resize_for_model(image: &ColorRaster, size: usize) -> ColorRaster {
    image.resize_bilinear(size, size)
}

/// Scale to [0, 1], normalise per channel and lay out as a C×H×W tensor.
pub fn normalize_to_tensor(image: &ColorRaster, norm: &Normalization) -> FeatureTensor {
    let (w, h) = (image.width, image.height);
    let mut t = FeatureTensor::zeros(3, h, w);
    for c in 0..3 {
        let (m, s) = (norm.mean[c], norm.std[c]);
        let plane = t.plane_mut(c);
        for (i, v) in plane.iter_mut().enumerate() {
            *v = (image.data[i * 3 + c] / 255.0 - m) / s;
        }
    }
    t
}

/// Model-ready tensor: bilinear resize to `size` then per-channel normalise.
pub fn preprocess(image: &ColorRaster, norm: &Normalization, size: usize) -> FeatureTensor {
    normalize_to_tensor(&resize_for_model(image, size), norm)
}

pub fn load_color_raster(path: &Path) -> Result<ColorRaster> {
    Ok(ColorRaster::from_rgb8(&image::open(path)?.to_rgb8()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_two_per_location() {
        assert!(plan_requests(&[], 0.0, None).is_empty());
        let reqs = plan_requests(&[(1.0, 2.0, Label::Hotspot), (3.0, 4.0, Label::NonHotspot)], 0.0, None);
        assert_eq!(reqs.len(), 4);
        let offsets: Vec<_> = reqs.iter().map(|r| r.heading_offset).collect();
        assert_eq!(offsets, vec![60.0, -60.0, 60.0, -60.0]);
        assert_eq!(reqs[1].heading, 300.0);
        assert!(reqs.iter().all(|r| r.width == 640 && r.height == 640));
    }

    #[test]
    fn split_sizes_exact() {
        assert_eq!(SplitFractions::default().sizes(10), [7, 2, 1]);
        assert_eq!(SplitFractions::default().sizes(100), [70, 20, 10]);
        let s = SplitFractions::default().sizes(7);
        assert_eq!(s.iter().sum::<usize>(), 7);
    }

    fn fake_images(n_hot: usize, n_non: usize) -> Vec<(PathBuf, Label)> {
        (0..n_hot)
            .map(|i| (PathBuf::from(format!("h{i}.png")), Label::Hotspot))
            .chain((0..n_non).map(|i| (PathBuf::from(format!("n{i}.png")), Label::NonHotspot)))
            .collect()
    }

    #[test]
    fn manifest_ten_images() {
        let m = build_manifest(&fake_images(5, 5), SplitFractions::default(), 1).unwrap();
        let count = |s| m.entries.iter().filter(|e| e.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Test), count(Split::Val)), (7, 2, 1));
        assert_eq!(m, build_manifest(&fake_images(5, 5), SplitFractions::default(), 1).unwrap());
    }

    #[test]
    fn manifest_is_stratified() {
        let m = build_manifest(&fake_images(50, 50), SplitFractions::default(), 42).unwrap();
        for (split, size) in [(Split::Train, 70), (Split::Test, 20), (Split::Val, 10)] {
            let e = m.split(split);
            assert_eq!(e.len(), size);
            let hot = e.iter().filter(|x| x.label == Label::Hotspot).count() as i64;
            let non = e.len() as i64 - hot;
            assert!((hot - size as i64 / 2).abs() <= 1 && (non - size as i64 / 2).abs() <= 1);
        }
    }

    #[test]
    fn manifest_errors() {
        assert!(build_manifest(&[], SplitFractions::default(), 0).is_err());
        let bad = SplitFractions {
            train: 0.5,
            test: 0.2,
            val: 0.1,
        };
        assert!(build_manifest(&fake_images(2, 2), bad, 0).is_err());
    }

    #[test]
    fn manifest_json_is_array_of_objects() {
        let m = build_manifest(&fake_images(1, 1), SplitFractions::default(), 0).unwrap();
        let v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        let first = &v.as_array().unwrap()[0];
        assert!(first.get("path").is_some() && first.get("label").is_some() && first.get("split").is_some());
        assert_eq!(DatasetManifest::from_json(&m.to_json().unwrap()).unwrap(), m);
    }

    #[test]
    fn preprocess_constant_image() {
        let img = ColorRaster::new(640, 640, [51.0, 102.0, 204.0]);
        let t = preprocess(&img, &Normalization::IMAGENET, MODEL_INPUT_SIZE);
        assert_eq!((t.channels, t.height, t.width), (3, 224, 224));
        for c in 0..3 {
            let v = [51.0, 102.0, 204.0][c] / 255.0;
            let expect = (v - Normalization::IMAGENET.mean[c]) / Normalization::IMAGENET.std[c];
            assert!(t.plane(c).iter().all(|x| (x - expect).abs() < 1e-12));
        }
    }

    #[test]
    fn noise_sampling_is_seeded_and_distinct() {
        let noise = vec![
            AccidentRecord::new(1.0, 1.0),
            AccidentRecord::new(1.0, 1.0),
            AccidentRecord::new(2.0, 2.0),
            AccidentRecord::new(3.0, 3.0),
        ];
        let a = sample_non_hotspot_locations(&noise, 5, 9);
        assert_eq!(a.len(), 3);
        assert_eq!(a, sample_non_hotspot_locations(&noise, 5, 9));
        assert_eq!(sample_non_hotspot_locations(&noise, 2, 9).len(), 2);
    }
}
