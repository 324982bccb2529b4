//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use apsense_core::geo::{AccidentRecord, NOISE};
use apsense_core::hud::{PoiBearing, Vec3, WindshieldGeometry};
use apsense_core::nn::{Conv2d, FeatureTensor};
use apsense_core::raster::BinaryMask;

/// DBSCAN from the definition: O(n²) neighbourhoods, cores joined by
/// ε-adjacency, each border point given to the lowest-numbered adjacent
/// cluster. Clusters are numbered by their lowest-index core.
pub fn dbscan_oracle(points: &[AccidentRecord], eps: f64, min_points: usize) -> Vec<i64> {
    let n = points.len();
    let near = |i: usize, j: usize| {
        let (a, b) = (points[i], points[j]);
        ((a.lat - b.lat).powi(2) + (a.lon - b.lon).powi(2)).sqrt() <= eps
    };
    let nbrs: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).collect()).collect();
    let core: Vec<bool> = nbrs.iter().map(|v| v.len() >= min_points).collect();
    let mut comp = vec![usize::MAX; n];
    for i in 0..n {
        if !core[i] || comp[i] != usize::MAX {
            continue;
        }
        let mut stack = vec![i];
        comp[i] = i;
        while let Some(p) = stack.pop() {
            for &q in &nbrs[p] {
                if core[q] && comp[q] == usize::MAX {
                    comp[q] = i;
                    stack.push(q);
                }
            }
        }
    }
    let mut roots: Vec<usize> = comp.iter().copied().filter(|&c| c != usize::MAX).collect();
    roots.sort_unstable();
    roots.dedup();
    let id = |root: usize| roots.iter().position(|&r| r == root).unwrap() as i64;
    (0..n)
        .map(|i| {
            if core[i] {
                id(comp[i])
            } else {
                nbrs[i]
                    .iter()
                    .filter(|&&j| core[j])
                    .map(|&j| id(comp[j]))
                    .min()
                    .unwrap_or(NOISE)
            }
        })
        .collect()
}

/// Relabel clusters by first appearance so partitions compare directly.
pub fn canonical(labels: &[i64]) -> Vec<i64> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|&l| {
            if l == NOISE {
                NOISE
            } else {
                let next = map.len() as i64;
                *map.entry(l).or_insert(next)
            }
        })
        .collect()
}

/// Direct zero-padded convolution.
pub fn naive_conv(x: &FeatureTensor, conv: &Conv2d) -> FeatureTensor {
    let k = conv.kernel as i64;
    let r = k / 2;
    let mut out = FeatureTensor::zeros(conv.out_channels, x.height, x.width);
    for o in 0..conv.out_channels {
        for y in 0..x.height as i64 {
            for xx in 0..x.width as i64 {
                let mut s = conv.bias[o];
                for i in 0..conv.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (sy, sx) = (y + ky - r, xx + kx - r);
                            if sy < 0 || sx < 0 || sy >= x.height as i64 || sx >= x.width as i64 {
                                continue;
                            }
                            let w = conv.weight[((o * conv.in_channels + i) * conv.kernel + ky as usize) * conv.kernel + kx as usize];
                            s += w * x.at(i, sy as usize, sx as usize);
                        }
                    }
                }
                let idx = out.idx(o, y as usize, xx as usize);
                out.data[idx] = s;
            }
        }
    }
    out
}

/// Fourth-order central difference of `f` at `x[i]`.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &mut [f64], i: usize, h: f64) -> f64 {
    let orig = x[i];
    let mut at = |d: f64| {
        x[i] = orig + d;
        f(x)
    };
    let v = [at(2.0 * h), at(h), at(-h), at(-2.0 * h)];
    x[i] = orig;
    stencil(v, h)
}

/// Five-point stencil from samples at +2h, +h, -h, -2h.
pub fn stencil(v: [f64; 4], h: f64) -> f64 {
    (-v[0] + 8.0 * v[1] - 8.0 * v[2] + v[3]) / (12.0 * h)
}

/// Relative error with a small floor so exact zeros compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Brute-force ray/plane intersection: march along the ray until the signed
/// plane distance changes sign, then bisect.
pub fn ray_march(geometry: &WindshieldGeometry, head: Vec3, bearing: &PoiBearing) -> Option<Vec3> {
    // Plane through the mount corner spanned by the two glass edges.
    let (s, c) = geometry.tilt_rad.sin_cos();
    let e1 = [1.0, 0.0, 0.0];
    let e2 = [0.0, -s, -c];
    let n = [
        e1[1] * e2[2] - e1[2] * e2[1],
        e1[2] * e2[0] - e1[0] * e2[2],
        e1[0] * e2[1] - e1[1] * e2[0],
    ];
    let m = geometry.mount;
    let dir = [bearing.alpha_x.tan(), bearing.alpha_y.tan(), 1.0];
    let at = |t: f64| [head[0] + t * dir[0], head[1] + t * dir[1], head[2] + t * dir[2]];
    let signed = |p: Vec3| n[0] * (p[0] - m[0]) + n[1] * (p[1] - m[1]) + n[2] * (p[2] - m[2]);
    let f0 = signed(head);
    if f0 == 0.0 {
        return Some(head);
    }
    let step = 1e-3;
    let mut t0 = 0.0;
    let mut t1 = step;
    while t1 < 1e3 {
        if signed(at(t1)).signum() != f0.signum() {
            for _ in 0..200 {
                let mid = 0.5 * (t0 + t1);
                if signed(at(mid)).signum() == f0.signum() {
                    t0 = mid;
                } else {
                    t1 = mid;
                }
            }
            return Some(at(0.5 * (t0 + t1)));
        }
        t0 = t1;
        t1 += step * (1.0 + t1);
    }
    None
}

/// Exhaustive Euclidean distance to the nearest background pixel, with
/// everything outside the image counting as background.
pub fn brute_distance(mask: &BinaryMask) -> Vec<f64> {
    let (w, h) = (mask.width as i64, mask.height as i64);
    let mut out = vec![0.0; mask.data.len()];
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x as usize, y as usize) {
                continue;
            }
            let mut best = f64::INFINITY;
            for by in -1..=h {
                for bx in -1..=w {
                    let outside = bx < 0 || by < 0 || bx >= w || by >= h;
                    if outside || !mask.get(bx as usize, by as usize) {
                        best = best.min((((bx - x).pow(2) + (by - y).pow(2)) as f64).sqrt());
                    }
                }
            }
            out[(y * w + x) as usize] = best;
        }
    }
    out
}

/// 8-connected components by repeated label propagation until stable.
pub fn components_oracle(mask: &BinaryMask) -> Vec<usize> {
    let (w, h) = (mask.width, mask.height);
    let mut label: Vec<usize> = (0..w * h).map(|i| if mask.data[i] { i + 1 } else { 0 }).collect();
    loop {
        let mut changed = false;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if label[i] == 0 {
                    continue;
                }
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let j = ny as usize * w + nx as usize;
                        if label[j] != 0 && label[j] < label[i] {
                            label[i] = label[j];
                            changed = true;
                        }
                    }
                }
            }
        }
        if !changed {
            return label;
        }
    }
}

/// Band rule from its definition: a pixel survives iff its component has a
/// pixel at or below `lower_start`.
pub fn band_oracle(mask: &BinaryMask, lower_start: usize) -> BinaryMask {
    let comp = components_oracle(mask);
    let keep: std::collections::HashSet<usize> = comp
        .iter()
        .enumerate()
        .filter(|(i, &c)| c != 0 && i / mask.width >= lower_start)
        .map(|(_, &c)| c)
        .collect();
    BinaryMask {
        width: mask.width,
        height: mask.height,
        data: comp.iter().map(|c| *c != 0 && keep.contains(c)).collect(),
    }
}

/// Bilinear sample with half-pixel centres and edge clamping, one channel.
pub fn bilinear_oracle(src: &[f64], sw: usize, sh: usize, dw: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dw * dh);
    for y in 0..dh {
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sw as f64 / dw as f64 - 0.5).clamp(0.0, (sw - 1) as f64);
            let fy = ((y as f64 + 0.5) * sh as f64 / dh as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(sw - 1), (y0 + 1).min(sh - 1));
            let (ax, ay) = (fx - x0 as f64, fy - y0 as f64);
            let p = |xx: usize, yy: usize| src[yy * sw + xx];
            let top = p(x0, y0) * (1.0 - ax) + p(x1, y0) * ax;
            let bottom = p(x0, y1) * (1.0 - ax) + p(x1, y1) * ax;
            out.push(top * (1.0 - ay) + bottom * ay);
        }
    }
    out
}

use apsense_core::abm::{abm_backward, abm_forward_cached, AbmConfig, AbmVariant, AbmWeights};
use apsense_core::nn::Parameterized;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn buffers(p: &impl Parameterized) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    p.visit("", &mut |_, b| out.push(b.to_vec()));
    out
}

/// Overwrite parameter `j` of buffer `b` (in visit order).
pub fn set_param(p: &mut impl Parameterized, b: usize, j: usize, v: f64) {
    let mut k = 0;
    p.visit_mut("", &mut |_, buf| {
        if k == b {
            buf[j] = v;
        }
        k += 1;
    });
}

/// Largest relative error between analytic and central-difference gradients
/// of `<r, ABM(x)>` over every input element and every trainable parameter,
/// on a random C=8, 4×4 input.
pub fn abm_gradient_max_error(variant: AbmVariant, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AbmConfig {
        variant,
        compression_ratio: 4,
    };
    let mut w = AbmWeights::init(8, &cfg, &mut rng).unwrap();
    // Move batch-norm affine terms off identity so they are exercised too.
    let mut jitter = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    w.visit_mut("", &mut |name, p| {
        if name.contains("bn") {
            p.iter_mut().for_each(|v| *v += jitter.random_range(-0.3..0.3));
        }
    });
    let x = FeatureTensor::random(8, 4, 4, &mut rng);
    let r = FeatureTensor::random(8, 4, 4, &mut rng);
    let objective = |w: &AbmWeights, x: &FeatureTensor| -> f64 {
        let out = abm_forward_cached(x, variant, w).unwrap().0;
        out.data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = abm_forward_cached(&x, variant, &w).unwrap();
    let mut grad = w.clone();
    grad.zero_params();
    let g_in = abm_backward(&w, &cache, &r, &mut grad);
    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut xs = x.data.clone();
    for i in 0..xs.len() {
        let fd = central_difference(
            &mut |v| objective(&w, &FeatureTensor::from_vec(8, 4, 4, v.to_vec()).unwrap()),
            &mut xs,
            i,
            h,
        );
        worst = worst.max(rel_err(g_in.data[i], fd));
    }
    let analytic = buffers(&grad);
    let values = buffers(&w);
    for (b, buf) in values.iter().enumerate() {
        for j in 0..buf.len() {
            let mut probe = w.clone();
            let mut eval = |delta: f64| {
                set_param(&mut probe, b, j, buf[j] + delta);
                objective(&probe, &x)
            };
            let fd = stencil([eval(2.0 * h), eval(h), eval(-h), eval(-2.0 * h)], h);
            worst = worst.max(rel_err(analytic[b][j], fd));
        }
    }
    worst
}

use apsense_core::model::{CamLayer, Classifier, Label, TinyBackbone, TinyBackboneConfig};
use apsense_core::nn::softmax;

/// Two-conv backbone with ABM(c) on an 8×8 input, plus a random input.
pub fn tiny_cam_model(seed: u64) -> (Classifier<TinyBackbone>, FeatureTensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = TinyBackbone::new(TinyBackboneConfig { widths: vec![4, 8] }, &mut rng).unwrap();
    let cfg = AbmConfig {
        variant: AbmVariant::C,
        compression_ratio: 2,
    };
    let mut model = Classifier::new(bb, cfg, 8, &mut rng).unwrap();
    let input = FeatureTensor::random(3, 8, 8, &mut rng);
    // A channel that ReLU zeroes everywhere puts channel-attention max
    // pooling on a tie, where the score is not differentiable. Lift such
    // channels so finite differences are meaningful.
    loop {
        let f = model.features(&input).unwrap();
        let dead: Vec<usize> = (0..f.channels)
            .filter(|&c| f.plane(c).iter().all(|v| *v <= 0.0))
            .collect();
        if dead.is_empty() {
            break;
        }
        let last = model.backbone.convs.last_mut().unwrap();
        for c in dead {
            last.bias[c] += 0.25;
        }
    }
    (model, input)
}

/// Per-channel spatial mean of finite-difference gradients of the target
/// logit with respect to the layer activations.
pub fn fd_gradcam_weights(
    model: &Classifier<TinyBackbone>,
    input: &FeatureTensor,
    layer: CamLayer,
    target: Label,
) -> Vec<f64> {
    let act = model.layer_activations(input, layer).unwrap();
    let (c, h, w) = (act.channels, act.height, act.width);
    let mut values = act.data.clone();
    let mut f = |v: &[f64]| {
        let a = FeatureTensor::from_vec(c, h, w, v.to_vec()).unwrap();
        model.logits_from_layer(layer, &a).unwrap()[target.index()]
    };
    let grads: Vec<f64> = (0..values.len())
        .map(|i| central_difference(&mut f, &mut values, i, 1e-4))
        .collect();
    (0..c)
        .map(|k| grads[k * h * w..(k + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect()
}

/// ScoreCAM weights by explicit recomputation: mask the input with each
/// upsampled, min-max normalised channel, run the model, subtract the
/// zero-input score and softmax the results.
pub fn scorecam_weights_oracle(
    model: &Classifier<TinyBackbone>,
    input: &FeatureTensor,
    layer: CamLayer,
    target: Label,
) -> Vec<f64> {
    let act = model.layer_activations(input, layer).unwrap();
    let prob = |x: &FeatureTensor| softmax(&model.logits(x).unwrap())[target.index()];
    let base = prob(&FeatureTensor::zeros(3, input.height, input.width));
    let increases: Vec<f64> = (0..act.channels)
        .map(|k| {
            let up = bilinear_oracle(act.plane(k), act.width, act.height, input.width, input.height);
            let lo = up.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = up.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mask: Vec<f64> = up
                .iter()
                .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
                .collect();
            let mut masked = input.clone();
            for ch in 0..3 {
                for (v, m) in masked.plane_mut(ch).iter_mut().zip(&mask) {
                    *v *= m;
                }
            }
            prob(&masked) - base
        })
        .collect();
    let m = increases.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = increases.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// GradCAM++ weights element by element:
/// α = g² / (2g² + Σ_ab A_ab · g³), weight = Σ α · ReLU(g).
pub fn gradcam_pp_oracle(act: &FeatureTensor, grad: &FeatureTensor) -> Vec<f64> {
    let mut out = vec![0.0; act.channels];
    for k in 0..act.channels {
        let mut total_act = 0.0;
        for y in 0..act.height {
            for x in 0..act.width {
                total_act += act.at(k, y, x);
            }
        }
        for y in 0..act.height {
            for x in 0..act.width {
                let g = grad.at(k, y, x);
                if g == 0.0 {
                    continue;
                }
                let alpha = g.powi(2) / (2.0 * g.powi(2) + total_act * g.powi(3));
                out[k] += alpha * g.max(0.0);
            }
        }
    }
    out
}

/// Neighbour-mean imputation by dense Gaussian elimination, one channel.
pub fn road_dense_oracle(values: &[f64], mask: &BinaryMask) -> Vec<f64> {
    let (w, h) = (mask.width, mask.height);
    let unknown: Vec<usize> = (0..w * h).filter(|&i| mask.data[i]).collect();
    let pos: std::collections::HashMap<usize, usize> = unknown.iter().enumerate().map(|(k, &i)| (i, k)).collect();
    let n = unknown.len();
    let mut a = vec![vec![0.0; n + 1]; n];
    for (k, &i) in unknown.iter().enumerate() {
        let (x, y) = ((i % w) as i64, (i / w) as i64);
        for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            a[k][k] += 1.0;
            match pos.get(&j) {
                Some(&m) => a[k][m] -= 1.0,
                None => a[k][n] += values[j],
            }
        }
    }
    for col in 0..n {
        let piv = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..=n {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let mut out = values.to_vec();
    for (k, &i) in unknown.iter().enumerate() {
        out[i] = a[k][n] / a[k][k];
    }
    out
}

use apsense_core::hud::{patch_point, ForeheadPose, SensorTransform};

/// A random windshield, forehead and bearing whose ray meets the glass
/// plane in front of the driver.
pub fn random_hud_case(rng: &mut ChaCha8Rng) -> (WindshieldGeometry, Vec3, PoiBearing) {
    let geometry = WindshieldGeometry {
        width_m: rng.random_range(0.8..1.8),
        height_m: rng.random_range(0.4..1.0),
        tilt_rad: rng.random_range(0.3..1.3),
        mount: [rng.random_range(-1.0..-0.4), rng.random_range(0.1..0.4), rng.random_range(0.5..1.0)],
    };
    let head = [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)];
    let bearing = PoiBearing {
        alpha_x: rng.random_range(-0.6..0.6),
        alpha_y: rng.random_range(-0.6..0.6),
    };
    (geometry, head, bearing)
}

/// (plane residual, collinearity residual, distance to ray-march oracle)
/// for one case; `None` when either side finds no forward intersection.
pub fn hud_case_errors(geometry: &WindshieldGeometry, head: Vec3, bearing: &PoiBearing) -> Option<(f64, f64, f64)> {
    let got = patch_point(geometry, &ForeheadPose { position: head }, bearing, &SensorTransform::default());
    let oracle = ray_march(geometry, head, bearing);
    let (p, o) = match (got, oracle) {
        (Ok(p), Some(o)) => (p, o),
        (Err(_), None) => return None,
        (got, oracle) => panic!("solver and oracle disagree: {got:?} vs {oracle:?}"),
    };
    let (s, c) = geometry.tilt_rad.sin_cos();
    let n = [0.0, c, -s];
    let m = geometry.mount;
    let x = p.position;
    let residual = (n[0] * (x[0] - m[0]) + n[1] * (x[1] - m[1]) + n[2] * (x[2] - m[2])).abs();
    let d = [bearing.alpha_x.tan(), bearing.alpha_y.tan(), 1.0];
    let r = [x[0] - head[0], x[1] - head[1], x[2] - head[2]];
    let cr = [r[1] * d[2] - r[2] * d[1], r[2] * d[0] - r[0] * d[2], r[0] * d[1] - r[1] * d[0]];
    let dn = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    let collinear = (cr[0] * cr[0] + cr[1] * cr[1] + cr[2] * cr[2]).sqrt() / dn;
    let dist = ((x[0] - o[0]).powi(2) + (x[1] - o[1]).powi(2) + (x[2] - o[2]).powi(2)).sqrt();
    Some((residual, collinear, dist))
}

use apsense_core::hud::Homography;

/// A well-conditioned random homography: a scaled rotation with translation
/// and a mild perspective term.
pub fn random_homography(rng: &mut ChaCha8Rng) -> Homography {
    let th: f64 = rng.random_range(-0.5..0.5);
    let s = rng.random_range(200.0..800.0);
    let (sn, cs) = th.sin_cos();
    Homography::from_rows([
        [s * cs + rng.random_range(-20.0..20.0), -s * sn, rng.random_range(-50.0..50.0)],
        [s * sn, s * cs + rng.random_range(-20.0..20.0), rng.random_range(-50.0..50.0)],
        [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1), 1.0],
    ])
    .unwrap()
}

/// Largest entry-wise difference between two homographies normalised to
/// unit bottom-right entry.
pub fn homography_distance(a: &Homography, b: &Homography) -> f64 {
    let (ra, rb) = (a.rows(), b.rows());
    (0..9)
        .map(|k| (ra[k / 3][k % 3] / ra[2][2] - rb[k / 3][k % 3] / rb[2][2]).abs())
        .fold(0.0, f64::max)
}

use apsense_core::imagery::preprocess;
use apsense_core::model::Normalization;
use apsense_core::raster::ColorRaster;
use apsense_core::train::Sample;

/// Noisy gray scenes with a coloured square: warm for hotspots, cool
/// otherwise. Classes alternate.
pub fn toy_images(n: usize, size: usize, seed: u64) -> Vec<(ColorRaster, Label)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = if i % 2 == 0 { Label::Hotspot } else { Label::NonHotspot };
            let mut img = ColorRaster::new(size, size, [0.0; 3]);
            for v in img.data.iter_mut() {
                *v = rng.random_range(90.0..160.0);
            }
            let side = size / 3;
            let (x0, y0) = (rng.random_range(0..=size - side), rng.random_range(0..=size - side));
            let colour = match label {
                Label::Hotspot => [230.0, 60.0, 40.0],
                Label::NonHotspot => [40.0, 80.0, 230.0],
            };
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    img.set_pixel(x, y, colour);
                }
            }
            (img, label)
        })
        .collect()
}

pub fn toy_samples(n: usize, size: usize, seed: u64) -> Vec<Sample> {
    toy_images(n, size, seed)
        .into_iter()
        .map(|(img, label)| Sample {
            input: preprocess(&img, &Normalization::IMAGENET, size),
            label,
        })
        .collect()
}

use apsense_core::model::TrainMode;
use apsense_core::train::{train, EpochLog, TrainConfig};
use std::ops::ControlFlow;

pub fn toy_model(seed: u64, size: usize) -> Classifier<TinyBackbone> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = TinyBackbone::new(TinyBackboneConfig::default(), &mut rng).unwrap();
    let abm = AbmConfig {
        variant: AbmVariant::C,
        compression_ratio: 16,
    };
    Classifier::new(bb, abm, size, &mut rng).unwrap()
}

/// Train on 200 toy images, evaluating on the training set each epoch; stops
/// after epoch 10 once accuracy reaches `target`, or at 50 epochs.
pub fn toy_fit(target: f64) -> Vec<EpochLog> {
    let data = toy_samples(200, 32, 1);
    let mut model = toy_model(7, 32);
    let cfg = TrainConfig {
        epochs: 50,
        mode: TrainMode::Full,
        seed: 3,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &data, &cfg, |log| {
        if log.epoch >= 10 && log.val_acc.unwrap_or(0.0) >= target {
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })
    .unwrap()
}

/// Whether fc_only training leaves every non-head parameter bit-identical.
pub fn fc_only_freezes_backbone() -> bool {
    let data = toy_samples(24, 32, 2);
    let mut model = toy_model(8, 32);
    let before = model.named_params();
    let cfg = TrainConfig {
        epochs: 2,
        mode: TrainMode::FcOnly,
        learning_rate: 0.01,
        ..TrainConfig::default()
    };
    train(&mut model, &data, &[], &cfg, |_| ControlFlow::Continue(())).unwrap();
    let after = model.named_params();
    let mut head_moved = false;
    for ((name, a), (_, b)) in before.iter().zip(&after) {
        if name.starts_with("fc.") {
            head_moved |= a != b;
        } else if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return false;
        }
    }
    head_moved
}
