//! Explanation quality metrics and the masked-image strategies they use.

use std::io::Write;

use image::GrayImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, ColorRaster, Grid};

/// Saliency values at or above this (0–255 scale) count as salient.
pub const SALIENCY_THRESHOLD: u8 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    /// Selected pixels set to black.
    BlackPatch,
    /// Everything except the selected pixels set to black.
    ExplainOnly,
    /// The lowest-activation pixels, of equal count, set to black.
    InverseCam,
    /// Selected pixels replaced by neighbour-mean imputation.
    RoadImputation,
}

impl MaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskKind::BlackPatch => "black_patch",
            MaskKind::ExplainOnly => "explain_only",
            MaskKind::InverseCam => "inverse_cam",
            MaskKind::RoadImputation => "road_imputation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "black_patch" => Ok(MaskKind::BlackPatch),
            "explain_only" => Ok(MaskKind::ExplainOnly),
            "inverse_cam" => Ok(MaskKind::InverseCam),
            "road_imputation" | "road" => Ok(MaskKind::RoadImputation),
            _ => Err(Error::Config(format!("unknown mask strategy `{s}`"))),
        }
    }
}

/// A masking rule. Without a threshold the AP-feature mask selects pixels;
/// with one, the top `T` percent of heatmap pixels do.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskStrategy {
    pub kind: MaskKind,
    pub threshold_percent: Option<f64>,
}

impl MaskStrategy {
    pub fn new(kind: MaskKind, threshold_percent: Option<f64>) -> Result<Self> {
        if let Some(t) = threshold_percent {
            if !(t > 0.0 && t <= 100.0) {
                return Err(Error::Config(format!("threshold percent {t} outside (0, 100]")));
            }
        }
        Ok(Self { kind, threshold_percent })
    }

    /// `black_patch`, `road_imputation@25`, ...
    pub fn parse(s: &str) -> Result<Self> {
        match s.split_once('@') {
            Some((k, t)) => {
                let t: f64 = t
                    .trim_end_matches('%')
                    .parse()
                    .map_err(|_| Error::Config(format!("bad threshold in strategy `{s}`")))?;
                Self::new(MaskKind::parse(k)?, Some(t))
            }
            None => Self::new(MaskKind::parse(s)?, None),
        }
    }

    pub fn label(&self) -> String {
        match self.threshold_percent {
            Some(t) => format!("{}@{t}", self.kind.as_str()),
            None => self.kind.as_str().to_string(),
        }
    }

    /// Pixels this strategy acts on, given a heatmap and the AP-feature mask
    /// (both at the image's resolution).
    pub fn selection(&self, heatmap: &Grid, ap_mask: &BinaryMask) -> Result<BinaryMask> {
        if (heatmap.width, heatmap.height) != (ap_mask.width, ap_mask.height) {
            return Err(Error::shape("heatmap and mask sizes differ"));
        }
        let count = match self.threshold_percent {
            Some(t) => percent_count(heatmap.data.len(), t),
            None => ap_mask.count(),
        };
        Ok(match (self.kind, self.threshold_percent) {
            (MaskKind::InverseCam, _) => bottom_count_mask(heatmap, count),
            (_, Some(_)) => top_count_mask(heatmap, count),
            (_, None) => ap_mask.clone(),
        })
    }
}

fn percent_count(n: usize, t: f64) -> usize {
    ((t / 100.0 * n as f64).round() as usize).min(n)
}

fn ranked_mask(heatmap: &Grid, count: usize, highest: bool) -> BinaryMask {
    let mut order: Vec<usize> = (0..heatmap.data.len()).collect();
    // Stable sort keeps raster order among ties.
    order.sort_by(|&a, &b| {
        let c = heatmap.data[a].total_cmp(&heatmap.data[b]);
        if highest {
            c.reverse()
        } else {
            c
        }
    });
    let mut m = BinaryMask::new(heatmap.width, heatmap.height);
    for &i in &order[..count.min(order.len())] {
        m.data[i] = true;
    }
    m
}

/// The `count` highest-valued pixels; ties resolved in raster order.
pub fn top_count_mask(heatmap: &Grid, count: usize) -> BinaryMask {
    ranked_mask(heatmap, count, true)
}

/// The `count` lowest-valued pixels; ties resolved in raster order.
pub fn bottom_count_mask(heatmap: &Grid, count: usize) -> BinaryMask {
    ranked_mask(heatmap, count, false)
}

/// Top `t` percent of heatmap pixels.
pub fn top_percent_mask(heatmap: &Grid, t: f64) -> BinaryMask {
    top_count_mask(heatmap, percent_count(heatmap.data.len(), t))
}

fn check_aligned(image: &ColorRaster, mask: &BinaryMask) -> Result<()> {
    if (image.width, image.height) != (mask.width, mask.height) {
        return Err(Error::shape(format!(
            "image is {}x{} but mask is {}x{}",
            image.width, image.height, mask.width, mask.height
        )));
    }
    Ok(())
}

/// Set pixels where `mask` is set to black.
pub fn black_out(image: &ColorRaster, mask: &BinaryMask) -> Result<ColorRaster> {
    check_aligned(image, mask)?;
    let mut out = image.clone();
    for (i, _) in mask.data.iter().enumerate().filter(|(_, m)| **m) {
        out.data[i * 3..i * 3 + 3].fill(0.0);
    }
    Ok(out)
}

const NO_CELL: u32 = u32::MAX;

/// In-image 4-neighbours of pixel `i`; unused slots hold `usize::MAX`.
fn neighbours4(i: usize, w: usize, h: usize) -> [usize; 4] {
    let (x, y) = (i % w, i / w);
    [
        if x > 0 { i - 1 } else { usize::MAX },
        if x + 1 < w { i + 1 } else { usize::MAX },
        if y > 0 { i - w } else { usize::MAX },
        if y + 1 < h { i + w } else { usize::MAX },
    ]
}

/// Replace every masked pixel by the mean of its in-image 4-neighbours
/// (masked or not), solved jointly as a symmetric positive definite system.
/// Each 4-connected masked region is an independent system.
pub fn road_impute(image: &ColorRaster, mask: &BinaryMask) -> Result<ColorRaster> {
    check_aligned(image, mask)?;
    let n_masked = mask.count();
    if n_masked == 0 {
        return Ok(image.clone());
    }
    if n_masked == mask.data.len() {
        return Err(Error::invalid("imputation needs at least one unmasked pixel"));
    }
    let (w, h) = (image.width, image.height);
    let mut out = image.clone();
    let mut local = vec![NO_CELL; w * h];
    let mut seen = vec![false; w * h];
    let mut cells = Vec::new();
    for start in 0..w * h {
        if !mask.data[start] || seen[start] {
            continue;
        }
        cells.clear();
        seen[start] = true;
        cells.push(start);
        let mut head = 0;
        while head < cells.len() {
            let i = cells[head];
            head += 1;
            for j in neighbours4(i, w, h) {
                if j != usize::MAX && mask.data[j] && !seen[j] {
                    seen[j] = true;
                    cells.push(j);
                }
            }
        }
        cells.sort_unstable();
        for (k, &i) in cells.iter().enumerate() {
            local[i] = k as u32;
        }
        let mut system = RegionSystem {
            links: Vec::with_capacity(cells.len()),
            diag: Vec::with_capacity(cells.len()),
        };
        let mut b = vec![[0.0; 3]; cells.len()];
        for (k, &i) in cells.iter().enumerate() {
            let mut links = [NO_CELL; 4];
            let mut d = 0.0;
            for (slot, j) in neighbours4(i, w, h).into_iter().enumerate() {
                if j == usize::MAX {
                    continue;
                }
                d += 1.0;
                if mask.data[j] {
                    links[slot] = local[j];
                } else {
                    for c in 0..3 {
                        b[k][c] += image.data[j * 3 + c];
                    }
                }
            }
            system.links.push(links);
            system.diag.push(d);
        }
        let x = system.solve(&b, 1e-12)?;
        for (k, &i) in cells.iter().enumerate() {
            out.data[i * 3..i * 3 + 3].copy_from_slice(&x[k]);
        }
    }
    Ok(out)
}

/// Linear system of one masked region: `diag·x_k − Σ x_neighbour = b_k`,
/// with cells in raster order and neighbour slots left, right, up, down.
struct RegionSystem {
    links: Vec<[u32; 4]>,
    diag: Vec<f64>,
}

const LEFT: usize = 0;
const RIGHT: usize = 1;
const UP: usize = 2;
const DOWN: usize = 3;
const MIC_TAU: f64 = 0.97;
const MIC_SIGMA: f64 = 0.25;

fn dot3(a: &[[f64; 3]], b: &[[f64; 3]]) -> [f64; 3] {
    let mut s = [0.0; 3];
    for (u, v) in a.iter().zip(b) {
        for c in 0..3 {
            s[c] += u[c] * v[c];
        }
    }
    s
}

impl RegionSystem {
    fn apply(&self, x: &[[f64; 3]], out: &mut [[f64; 3]]) {
        for (k, (l, &d)) in self.links.iter().zip(&self.diag).enumerate() {
            let mut s = x[k].map(|v| d * v);
            for &j in l {
                if j != NO_CELL {
                    let xj = x[j as usize];
                    for c in 0..3 {
                        s[c] -= xj[c];
                    }
                }
            }
            out[k] = s;
        }
    }

    /// Inverse square roots of the modified incomplete Cholesky pivots.
    fn mic_factor(&self) -> Vec<f64> {
        let mut pre = vec![0.0; self.diag.len()];
        for k in 0..self.diag.len() {
            let l = self.links[k];
            let mut e = self.diag[k];
            if l[LEFT] != NO_CELL {
                let j = l[LEFT] as usize;
                let p2 = pre[j] * pre[j];
                e -= p2;
                if self.links[j][DOWN] != NO_CELL {
                    e -= MIC_TAU * p2;
                }
            }
            if l[UP] != NO_CELL {
                let j = l[UP] as usize;
                let p2 = pre[j] * pre[j];
                e -= p2;
                if self.links[j][RIGHT] != NO_CELL {
                    e -= MIC_TAU * p2;
                }
            }
            if e < MIC_SIGMA * self.diag[k] {
                e = self.diag[k];
            }
            pre[k] = 1.0 / e.sqrt();
        }
        pre
    }

    /// `z = M⁻¹ r` by forward then backward substitution.
    fn precondition(&self, pre: &[f64], r: &[[f64; 3]], q: &mut [[f64; 3]], z: &mut [[f64; 3]]) {
        let n = r.len();
        for k in 0..n {
            let mut t = r[k];
            for slot in [LEFT, UP] {
                let j = self.links[k][slot];
                if j != NO_CELL {
                    let j = j as usize;
                    for c in 0..3 {
                        t[c] += pre[j] * q[j][c];
                    }
                }
            }
            q[k] = t.map(|v| v * pre[k]);
        }
        for k in (0..n).rev() {
            let mut t = q[k];
            for slot in [RIGHT, DOWN] {
                let j = self.links[k][slot];
                if j != NO_CELL {
                    for c in 0..3 {
                        t[c] += pre[k] * z[j as usize][c];
                    }
                }
            }
            z[k] = t.map(|v| v * pre[k]);
        }
    }

    /// Preconditioned conjugate gradient, one independent run per channel.
    fn solve(&self, b: &[[f64; 3]], rel_tol: f64) -> Result<Vec<[f64; 3]>> {
        let n = b.len();
        let pre = self.mic_factor();
        let b_norm = dot3(b, b).map(|v| v.sqrt().max(1e-300));
        let done = |r: &[[f64; 3]], tol: f64| {
            let rr = dot3(r, r);
            (0..3).all(|c| rr[c].sqrt() <= tol * b_norm[c])
        };
        let mut x = vec![[0.0; 3]; n];
        let mut r = b.to_vec();
        let mut q = vec![[0.0; 3]; n];
        let mut z = vec![[0.0; 3]; n];
        self.precondition(&pre, &r, &mut q, &mut z);
        let mut p = z.clone();
        let mut rz = dot3(&r, &z);
        let mut ap = vec![[0.0; 3]; n];
        for _ in 0..(10 * n).max(100) {
            if done(&r, rel_tol) {
                return Ok(x);
            }
            self.apply(&p, &mut ap);
            let pap = dot3(&p, &ap);
            let alpha: [f64; 3] = std::array::from_fn(|c| if pap[c] > 0.0 { rz[c] / pap[c] } else { 0.0 });
            for k in 0..n {
                for c in 0..3 {
                    x[k][c] += alpha[c] * p[k][c];
                    r[k][c] -= alpha[c] * ap[k][c];
                }
            }
            self.precondition(&pre, &r, &mut q, &mut z);
            let rz_new = dot3(&r, &z);
            let beta: [f64; 3] = std::array::from_fn(|c| if rz[c] > 0.0 { rz_new[c] / rz[c] } else { 0.0 });
            rz = rz_new;
            for k in 0..n {
                for c in 0..3 {
                    p[k][c] = z[k][c] + beta[c] * p[k][c];
                }
            }
        }
        if done(&r, 1e-8) {
            Ok(x)
        } else {
            Err(Error::invalid("imputation solve did not converge"))
        }
    }
}

/// Apply `strategy` to `image`, selecting pixels from `heatmap` / `ap_mask`.
pub fn masked_image(
    image: &ColorRaster,
    heatmap: &Grid,
    ap_mask: &BinaryMask,
    strategy: &MaskStrategy,
) -> Result<ColorRaster> {
    let sel = strategy.selection(heatmap, ap_mask)?;
    match strategy.kind {
        MaskKind::BlackPatch | MaskKind::InverseCam => black_out(image, &sel),
        MaskKind::ExplainOnly => black_out(image, &sel.complement()),
        MaskKind::RoadImputation => road_impute(image, &sel),
    }
}

/// Target-class confidence on the original (`y`), explanation-removed (`o`)
/// and explanation-only (`e`) images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub y: f64,
    pub o: f64,
    pub e: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Mean over images of the relative confidence drop, in percent. Images with
/// zero original confidence are skipped.
pub fn conf_change_percent(records: &[ConfidenceRecord]) -> Result<f64> {
    let skipped = records.iter().filter(|r| r.y == 0.0).count();
    if skipped > 0 {
        log::warn!("skipping {skipped} image(s) with zero original confidence");
    }
    mean(records.iter().filter(|r| r.y != 0.0).map(|r| (r.y - r.o) / r.y))
        .map(|m| m * 100.0)
        .ok_or_else(|| Error::invalid("no images with nonzero confidence"))
}

/// Mean of (explanation-only − original) confidence, in percent.
pub fn cam_conf_change(records: &[ConfidenceRecord]) -> Result<f64> {
    mean(records.iter().map(|r| r.e - r.y))
        .map(|m| m * 100.0)
        .ok_or_else(|| Error::invalid("no records"))
}

/// Number of images whose explanation-only confidence exceeds the original.
pub fn increase_in_conf(records: &[ConfidenceRecord]) -> usize {
    records.iter().filter(|r| r.e > r.y).count()
}

/// Mean of (masked − original) confidence, raw scale.
pub fn conf_change(original: &[f64], masked: &[f64]) -> Result<f64> {
    if original.len() != masked.len() {
        return Err(Error::invalid("confidence lists differ in length"));
    }
    mean(original.iter().zip(masked).map(|(y, o)| o - y)).ok_or_else(|| Error::invalid("no records"))
}

pub fn average(values: &[f64]) -> Result<f64> {
    mean(values.iter().copied()).ok_or_else(|| Error::invalid("nothing to average"))
}

/// Percent of pixels set.
pub fn area_fraction(mask: &BinaryMask) -> f64 {
    if mask.data.is_empty() {
        return 0.0;
    }
    100.0 * mask.count() as f64 / mask.data.len() as f64
}

pub fn saliency_mask(saliency: &GrayImage) -> BinaryMask {
    BinaryMask {
        width: saliency.width() as usize,
        height: saliency.height() as usize,
        data: saliency.pixels().map(|p| p.0[0] >= SALIENCY_THRESHOLD).collect(),
    }
}

/// Percent of the salient region covered by the AP-feature mask; `None`
/// when nothing is salient.
pub fn saliency_overlap(salient: &BinaryMask, ap_mask: &BinaryMask) -> Result<Option<f64>> {
    if (salient.width, salient.height) != (ap_mask.width, ap_mask.height) {
        return Err(Error::shape("saliency and AP-feature masks differ in size"));
    }
    let s = salient.count();
    Ok((s > 0).then(|| 100.0 * salient.intersection_count(ap_mask) as f64 / s as f64))
}

/// Average overlap across images, skipping images with no salient pixels.
pub fn visual_saliency(pairs: &[(BinaryMask, BinaryMask)]) -> Result<f64> {
    let mut vals = Vec::new();
    for (i, (s, c)) in pairs.iter().enumerate() {
        match saliency_overlap(s, c)? {
            Some(v) => vals.push(v),
            None => log::warn!("image {i}: empty saliency mask, skipped"),
        }
    }
    mean(vals.into_iter()).ok_or_else(|| Error::invalid("no image has a nonempty saliency mask"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub cam_method: String,
    pub strategy: String,
    #[serde(rename = "T")]
    pub t: Option<f64>,
    pub metric: String,
    pub value: f64,
    pub n_images: usize,
}

pub fn write_report_csv<W: Write>(writer: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
