//! Heatmap → driver-facing contour pipeline: threshold, band filter, distance
//! transform, watershed and contour tracing.

use std::cmp::Ordering as CmpOrdering;
use std::collections::BinaryHeap;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{save_png_gray, save_png_rgb, write_atomic, BinaryMask, Grid};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const SEED_FRACTION: f64 = 0.3;
pub const SEED_MERGE_PX: f64 = 5.0;
pub const SIMPLIFY_TOLERANCE_PX: f64 = 2.0;

/// Fixed threshold on the normalised heatmap, or Otsu's method.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Fixed(f64),
    Otsu,
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Fixed(DEFAULT_THRESHOLD)
    }
}

impl Threshold {
    pub fn parse(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("otsu") {
            return Ok(Threshold::Otsu);
        }
        let t: f64 = s
            .parse()
            .map_err(|_| Error::Config(format!("threshold must be a number in [0,1] or `otsu`, got `{s}`")))?;
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Config(format!("threshold {t} outside [0,1]")));
        }
        Ok(Threshold::Fixed(t))
    }

    pub fn resolve(self, heatmap: &Grid) -> f64 {
        match self {
            Threshold::Fixed(t) => t,
            Threshold::Otsu => otsu_threshold(heatmap),
        }
    }
}

impl std::fmt::Display for Threshold {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Threshold::Fixed(t) => write!(f, "{t}"),
            Threshold::Otsu => f.write_str("otsu"),
        }
    }
}

pub fn binarize(heatmap: &Grid, tau: f64) -> BinaryMask {
    BinaryMask {
        width: heatmap.width,
        height: heatmap.height,
        data: heatmap.data.iter().map(|&v| v >= tau).collect(),
    }
}

/// Otsu's threshold over a 256-bin histogram of [0,1] values, returned on the
/// same [0,1] scale (pixels `>=` it are foreground).
pub fn otsu_threshold(heatmap: &Grid) -> f64 {
    let mut hist = [0u64; 256];
    for &v in &heatmap.data {
        hist[(v.clamp(0.0, 1.0) * 255.0).round() as usize] += 1;
    }
    let total = heatmap.data.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, 0usize);
    for (k, &h) in hist.iter().enumerate().take(255) {
        w0 += h as f64;
        sum0 += k as f64 * h as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let between = w0 * w1 * (sum0 / w0 - (sum_all - sum0) / w1).powi(2);
        if between > best {
            best = between;
            best_k = k;
        }
    }
    (best_k as f64 + 0.5) / 255.0
}

/// Row bands of the scene. A component survives filtering only if it has a
/// pixel in the lower band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandRule {
    /// First row after the upper band.
    pub upper_end: usize,
    /// First row of the lower band.
    pub lower_start: usize,
    pub height: usize,
}

impl Default for BandRule {
    fn default() -> Self {
        Self {
            upper_end: 300,
            lower_start: 360,
            height: 640,
        }
    }
}

impl BandRule {
    /// Default bands scaled proportionally to `height` rows.
    pub fn for_height(height: usize) -> Self {
        let scale = |r: usize| ((r * height) as f64 / 640.0).round() as usize;
        Self {
            upper_end: scale(300),
            lower_start: scale(360),
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.upper_end > self.lower_start || self.lower_start > self.height {
            return Err(Error::Config(format!(
                "band rows must satisfy upper_end <= lower_start <= height, got {} / {} / {}",
                self.upper_end, self.lower_start, self.height
            )));
        }
        Ok(())
    }
}

const NEIGHBOURS8: [(i64, i64); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// 8-connected component labels (0 = background, 1.. in raster order of
/// each component's first pixel) and the component count.
pub fn label_components(mask: &BinaryMask) -> (Vec<u32>, usize) {
    let (w, h) = (mask.width, mask.height);
    let mut labels = vec![0u32; w * h];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.data[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for (dx, dy) in NEIGHBOURS8 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask.data[j] && labels[j] == 0 {
                    labels[j] = count;
                    stack.push(j);
                }
            }
        }
    }
    (labels, count as usize)
}

/// Keep whole components that touch the lower band; drop the rest.
pub fn band_filter(mask: &BinaryMask, rule: &BandRule) -> BinaryMask {
    let (labels, count) = label_components(mask);
    let mut keep = vec![false; count + 1];
    let start = rule.lower_start.min(mask.height) * mask.width;
    for &l in &labels[start..] {
        keep[l as usize] = true;
    }
    keep[0] = false;
    BinaryMask {
        width: mask.width,
        height: mask.height,
        data: labels.iter().map(|&l| keep[l as usize]).collect(),
    }
}

fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        // z[0] is -inf, so k never underflows.
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        *o = (q as f64 - p as f64).powi(2) + f[p];
    }
}

/// Exact Euclidean distance from each foreground pixel to the nearest
/// background pixel; everything outside the image counts as background.
pub fn distance_transform(mask: &BinaryMask) -> Grid {
    let (w, h) = (mask.width + 2, mask.height + 2);
    const BIG: f64 = 1e20;
    let mut sq = vec![0.0; w * h];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                sq[(y + 1) * w + x + 1] = BIG;
            }
        }
    }
    let n = w.max(h);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..w {
        for y in 0..h {
            f[y] = sq[y * w + x];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            sq[y * w + x] = out[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&sq[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        sq[y * w..(y + 1) * w].copy_from_slice(&out[..w]);
    }
    let mut g = Grid::new(mask.width, mask.height, 0.0);
    for y in 0..mask.height {
        for x in 0..mask.width {
            g.data[y * mask.width + x] = sq[(y + 1) * w + x + 1].sqrt();
        }
    }
    g
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Watershed markers: local maxima of the distance map above `SEED_FRACTION`
/// of its maximum, grouped by single linkage within `SEED_MERGE_PX` inside
/// the same component. A component left without a marker gets one at its
/// distance maximum. Returns per-pixel marker ids (0 = none) and the count.
pub fn watershed_markers(dist: &Grid, components: &[u32], n_components: usize) -> (Vec<u32>, usize) {
    let (w, h) = (dist.width, dist.height);
    let max = dist.max();
    let mut candidates = Vec::new();
    if max > 0.0 {
        for y in 0..h {
            for x in 0..w {
                let d = dist.get(x, y);
                if d <= 0.0 || d < SEED_FRACTION * max {
                    continue;
                }
                let is_peak = NEIGHBOURS8.iter().all(|&(dx, dy)| {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 || dist.get(nx as usize, ny as usize) <= d
                });
                if is_peak {
                    candidates.push(y * w + x);
                }
            }
        }
    }
    // Single-linkage grouping via a bucket grid of cell size SEED_MERGE_PX.
    let cell = SEED_MERGE_PX.ceil() as i64;
    let mut buckets: std::collections::HashMap<(i64, i64), Vec<usize>> = Default::default();
    for (ci, &p) in candidates.iter().enumerate() {
        let (x, y) = ((p % w) as i64, (p / w) as i64);
        buckets.entry((x / cell, y / cell)).or_default().push(ci);
    }
    let mut parent: Vec<usize> = (0..candidates.len()).collect();
    let r2 = SEED_MERGE_PX * SEED_MERGE_PX;
    for (ci, &p) in candidates.iter().enumerate() {
        let (x, y) = ((p % w) as i64, (p / w) as i64);
        for by in -1..=1 {
            for bx in -1..=1 {
                let Some(b) = buckets.get(&(x / cell + bx, y / cell + by)) else {
                    continue;
                };
                for &cj in b {
                    if cj <= ci {
                        continue;
                    }
                    let q = candidates[cj];
                    let (qx, qy) = ((q % w) as i64, (q / w) as i64);
                    if components[p] == components[q] && (((qx - x).pow(2) + (qy - y).pow(2)) as f64) <= r2 {
                        let (a, b) = (find(&mut parent, ci), find(&mut parent, cj));
                        if a != b {
                            parent[a.max(b)] = a.min(b);
                        }
                    }
                }
            }
        }
    }
    let mut markers = vec![0u32; w * h];
    let mut root_id = vec![0u32; candidates.len()];
    let mut count = 0u32;
    let mut has_seed = vec![false; n_components + 1];
    for ci in 0..candidates.len() {
        let r = find(&mut parent, ci);
        if root_id[r] == 0 {
            count += 1;
            root_id[r] = count;
        }
        markers[candidates[ci]] = root_id[r];
        has_seed[components[candidates[ci]] as usize] = true;
    }
    // Fallback seeds, in component order.
    let mut best: Vec<Option<usize>> = vec![None; n_components + 1];
    for (i, &c) in components.iter().enumerate() {
        if c == 0 || has_seed[c as usize] {
            continue;
        }
        let slot = &mut best[c as usize];
        if slot.is_none_or(|b| dist.data[i] > dist.data[b]) {
            *slot = Some(i);
        }
    }
    for i in best.into_iter().flatten() {
        count += 1;
        markers[i] = count;
    }
    (markers, count as usize)
}

#[derive(PartialEq)]
struct FloodItem {
    height: f64,
    order: u64,
    index: usize,
}

impl Eq for FloodItem {}

impl PartialOrd for FloodItem {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for FloodItem {
    // Max-heap: highest distance first, then earliest insertion.
    fn cmp(&self, other: &Self) -> CmpOrdering {
        self.height
            .total_cmp(&other.height)
            .then_with(|| other.order.cmp(&self.order))
    }
}

/// Priority-flood watershed on the distance map (basins are its peaks),
/// restricted to `mask`. Returns segment ids per pixel (0 = background).
pub fn watershed(dist: &Grid, mask: &BinaryMask, markers: &[u32]) -> Vec<u32> {
    let (w, h) = (mask.width, mask.height);
    let mut seg = markers.to_vec();
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    let mut queued = vec![false; w * h];
    for (i, &m) in markers.iter().enumerate() {
        if m != 0 {
            queued[i] = true;
            heap.push(FloodItem {
                height: dist.data[i],
                order,
                index: i,
            });
            order += 1;
        }
    }
    while let Some(FloodItem { index, .. }) = heap.pop() {
        let (x, y) = ((index % w) as i64, (index / w) as i64);
        let label = seg[index];
        for (dx, dy) in NEIGHBOURS8 {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if mask.data[j] && !queued[j] {
                queued[j] = true;
                seg[j] = label;
                heap.push(FloodItem {
                    height: dist.data[j],
                    order,
                    index: j,
                });
                order += 1;
            }
        }
    }
    seg
}

// Clockwise in image coordinates (y down), starting west.
const MOORE: [(i64, i64); 8] = [(-1, 0), (-1, -1), (0, -1), (1, -1), (1, 0), (1, 1), (0, 1), (-1, 1)];

/// Outer boundary of the 8-connected region containing `start` (which must
/// be its first pixel in raster order), as pixel centres, clockwise.
pub fn trace_boundary(inside: &dyn Fn(i64, i64) -> bool, start: (i64, i64)) -> Vec<[i64; 2]> {
    let dir_of = |from: (i64, i64), to: (i64, i64)| {
        MOORE
            .iter()
            .position(|&(dx, dy)| (from.0 + dx, from.1 + dy) == to)
            .expect("backtrack pixel is a neighbour")
    };
    let mut contour = vec![[start.0, start.1]];
    let mut p = start;
    let mut back = (start.0 - 1, start.1);
    let mut first_move: Option<(i64, i64)> = None;
    loop {
        let d0 = dir_of(p, back);
        let mut next = None;
        for i in 1..=8 {
            let (dx, dy) = MOORE[(d0 + i) % 8];
            let c = (p.0 + dx, p.1 + dy);
            if inside(c.0, c.1) {
                let (bx, by) = MOORE[(d0 + i - 1) % 8];
                next = Some((c, (p.0 + bx, p.1 + by)));
                break;
            }
        }
        let Some((c, b)) = next else {
            return contour;
        };
        if p == start {
            match first_move {
                None => first_move = Some(c),
                Some(f) if f == c => break,
                _ => {}
            }
        }
        p = c;
        back = b;
        contour.push([p.0, p.1]);
    }
    // The walk ends having re-entered `start`; drop the duplicate.
    contour.pop();
    contour
}

fn perpendicular_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len = dx.hypot(dy);
    if len == 0.0 {
        return (p[0] - a[0]).hypot(p[1] - a[1]);
    }
    ((p[0] - a[0]) * dy - (p[1] - a[1]) * dx).abs() / len
}

fn dp_open(points: &[[f64; 2]], tol: f64, keep: &mut [bool]) {
    let mut stack = vec![(0usize, points.len() - 1)];
    while let Some((s, e)) = stack.pop() {
        if e <= s + 1 {
            continue;
        }
        let (mut best, mut idx) = (0.0, s);
        for i in s + 1..e {
            let d = perpendicular_distance(points[i], points[s], points[e]);
            if d > best {
                best = d;
                idx = i;
            }
        }
        if best > tol {
            keep[idx] = true;
            stack.push((s, idx));
            stack.push((idx, e));
        }
    }
}

/// Douglas-Peucker reduction of a closed ring.
pub fn simplify_ring(ring: &[[i64; 2]], tol: f64) -> Vec<[i64; 2]> {
    if ring.len() <= 3 {
        return ring.to_vec();
    }
    let pts: Vec<[f64; 2]> = ring.iter().map(|p| [p[0] as f64, p[1] as f64]).collect();
    let far = (1..pts.len())
        .max_by(|&a, &b| {
            let da = (pts[a][0] - pts[0][0]).hypot(pts[a][1] - pts[0][1]);
            let db = (pts[b][0] - pts[0][0]).hypot(pts[b][1] - pts[0][1]);
            da.total_cmp(&db).then(b.cmp(&a))
        })
        .unwrap();
    let mut closed = pts.clone();
    closed.push(pts[0]);
    let mut keep = vec![false; closed.len()];
    keep[0] = true;
    keep[far] = true;
    dp_open(&closed[..=far], tol, &mut keep[..=far]);
    let mut tail_keep = vec![false; closed.len() - far];
    dp_open(&closed[far..], tol, &mut tail_keep);
    for (i, k) in tail_keep.into_iter().enumerate() {
        keep[far + i] |= k;
    }
    ring.iter()
        .enumerate()
        .filter(|(i, _)| keep[*i])
        .map(|(_, p)| *p)
        .collect()
}

/// Shoelace area of a closed ring.
pub fn ring_area(ring: &[[i64; 2]]) -> f64 {
    let n = ring.len();
    let twice: i64 = (0..n)
        .map(|i| {
            let (a, b) = (ring[i], ring[(i + 1) % n]);
            a[0] * b[1] - b[0] * a[1]
        })
        .sum();
    twice.abs() as f64 / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct APFeatureMask {
    #[serde(skip)]
    pub mask: BinaryMask,
    /// Segment id per pixel (0 = background).
    #[serde(skip)]
    pub segments: Vec<u32>,
    /// Traced boundary of each segment, in pixel-centre coordinates.
    pub contours: Vec<Vec<[i64; 2]>>,
    /// The same rings after polyline reduction, for display.
    pub simplified: Vec<Vec<[i64; 2]>>,
    /// Percent of image area covered by the mask.
    pub area_fraction: f64,
    pub threshold: f64,
}

impl APFeatureMask {
    pub fn save_mask_png(&self, path: &Path) -> Result<()> {
        save_png_gray(path, &self.mask.to_gray8())
    }

    pub fn save_contours_json(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(&self.simplified)?.as_bytes())
    }

    /// `image` with the simplified contours drawn in green, scaled when the
    /// image size differs from the mask size.
    pub fn overlay(&self, image: &RgbImage) -> RgbImage {
        let mut out = image.clone();
        let sx = image.width() as f64 / self.mask.width as f64;
        let sy = image.height() as f64 / self.mask.height as f64;
        let scale = |p: [i64; 2]| (((p[0] as f64 + 0.5) * sx - 0.5).round() as i64, ((p[1] as f64 + 0.5) * sy - 0.5).round() as i64);
        for ring in &self.simplified {
            for i in 0..ring.len() {
                draw_line(&mut out, scale(ring[i]), scale(ring[(i + 1) % ring.len()]), Rgb([0, 255, 0]));
            }
        }
        out
    }

    pub fn save_overlay_png(&self, image: &RgbImage, path: &Path) -> Result<()> {
        save_png_rgb(path, &self.overlay(image))
    }
}

fn draw_line(img: &mut RgbImage, a: (i64, i64), b: (i64, i64), color: Rgb<u8>) {
    let (mut x, mut y) = a;
    let (dx, dy) = ((b.0 - a.0).abs(), -(b.1 - a.1).abs());
    let (sx, sy) = (if a.0 < b.0 { 1 } else { -1 }, if a.1 < b.1 { 1 } else { -1 });
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if (x, y) == b {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Distance transform, watershed and one traced contour per segment piece.
pub fn segment_contours(mask: &BinaryMask) -> APFeatureMask {
    let (w, h) = (mask.width, mask.height);
    let (components, n) = label_components(mask);
    let dist = distance_transform(mask);
    let (markers, _) = watershed_markers(&dist, &components, n);
    let segments = watershed(&dist, mask, &markers);
    let mut contours = Vec::new();
    let mut visited = vec![false; w * h];
    for start in 0..w * h {
        let s = segments[start];
        if s == 0 || visited[start] {
            continue;
        }
        // Mark this 8-connected piece of segment `s`.
        let mut stack = vec![start];
        visited[start] = true;
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as i64, (i / w) as i64);
            for (dx, dy) in NEIGHBOURS8 {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if segments[j] == s && !visited[j] {
                    visited[j] = true;
                    stack.push(j);
                }
            }
        }
        let inside = |x: i64, y: i64| {
            x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && segments[y as usize * w + x as usize] == s
        };
        contours.push(trace_boundary(&inside, ((start % w) as i64, (start / w) as i64)));
    }
    let simplified = contours.iter().map(|c| simplify_ring(c, SIMPLIFY_TOLERANCE_PX)).collect();
    APFeatureMask {
        area_fraction: 100.0 * mask.count() as f64 / (w * h) as f64,
        mask: mask.clone(),
        segments,
        contours,
        simplified,
        threshold: f64::NAN,
    }
}

/// Threshold → band filter → segmentation.
pub fn run_pipeline(heatmap: &Grid, threshold: Threshold, rule: &BandRule) -> Result<APFeatureMask> {
    rule.validate()?;
    if rule.height != heatmap.height {
        return Err(Error::shape(format!(
            "band rule is for {} rows but heatmap has {}",
            rule.height, heatmap.height
        )));
    }
    let tau = threshold.resolve(heatmap);
    let filtered = band_filter(&binarize(heatmap, tau), rule);
    let mut out = segment_contours(&filtered);
    out.threshold = tau;
    Ok(out)
}
