//! Attention-based module (ABM) placed on top of a CNN backbone.
//!
//! Three attention paths operate on the backbone feature map `F_in`:
//!
//! * channel attention: `Ca = σ(MLP(maxpool(F_in) + avgpool(F_in)))`,
//!   `CA = Ca ⊗ F_in`;
//! * spatial attention: two independent V-RecField blocks read `CA`, their
//!   outputs are concatenated and reduced to `Sa = σ(conv3×3([V1; V2]))`,
//!   `SA = Sa ⊗ F_in`;
//! * point attention: `Pa = σ(conv1×1(ReLU(conv1×1(F_in))))`, `PA = Pa ⊙ F_in`.
//!
//! A V-RecField block computes
//! `F' = BN(conv1×1(CA)) + BN(conv3×3(CA)) + BN(conv5×5(CA))` and
//! `V = σ(conv7×7(ReLU(conv3×3(F'))))`, each branch mapping C → C/4 channels.
//!
//! Which terms are summed into `F_out` depends on [`AbmVariant`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{relu, sigmoid, BatchNorm, Conv2d, FeatureTensor, Linear, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AbmVariant {
    /// Backbone only: `F_out = F_in`.
    A,
    /// `F_out = SA + PA`.
    B,
    /// `F_out = F_in + SA + PA`.
    #[default]
    C,
    /// `F_out = F_in + PA + CA + SA`.
    D,
}

impl AbmVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "c" => Ok(Self::C),
            "d" => Ok(Self::D),
            other => Err(Error::Config(format!("unknown ABM variant `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
            Self::D => "d",
        }
    }

    fn has_skip(self) -> bool {
        matches!(self, Self::C | Self::D)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbmConfig {
    pub variant: AbmVariant,
    /// Channel-attention MLP compression ratio `n` (hidden width C/n).
    pub compression_ratio: usize,
}

impl Default for AbmConfig {
    fn default() -> Self {
        Self {
            variant: AbmVariant::C,
            compression_ratio: 16,
        }
    }
}

impl AbmConfig {
    pub fn check_channels(&self, channels: usize) -> Result<()> {
        if self.compression_ratio == 0 || channels % self.compression_ratio != 0 {
            return Err(Error::Config(format!(
                "channel count {channels} is not divisible by compression ratio {}",
                self.compression_ratio
            )));
        }
        if channels % 4 != 0 {
            return Err(Error::Config(format!(
                "channel count {channels} is not divisible by 4"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelAttentionWeights {
    /// C → C/n.
    pub fc1: Linear,
    /// C/n → C.
    pub fc2: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VRecFieldWeights {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv3: Conv2d,
    pub bn3: BatchNorm,
    pub conv5: Conv2d,
    pub bn5: BatchNorm,
    pub tail3: Conv2d,
    pub tail7: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialAttentionWeights {
    pub branches: [VRecFieldWeights; 2],
    /// C/2 → 1, 3×3.
    pub fuse: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointAttentionWeights {
    pub conv_a: Conv2d,
    pub conv_b: Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbmWeights {
    pub channels: usize,
    pub channel: ChannelAttentionWeights,
    pub spatial: SpatialAttentionWeights,
    pub point: PointAttentionWeights,
}

impl VRecFieldWeights {
    fn zeros(c: usize) -> Self {
        let q = c / 4;
        Self {
            conv1: Conv2d::zeros(c, q, 1),
            bn1: BatchNorm::identity(q),
            conv3: Conv2d::zeros(c, q, 3),
            bn3: BatchNorm::identity(q),
            conv5: Conv2d::zeros(c, q, 5),
            bn5: BatchNorm::identity(q),
            tail3: Conv2d::zeros(q, q, 3),
            tail7: Conv2d::zeros(q, q, 7),
        }
    }

    fn init<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        let q = c / 4;
        Self {
            conv1: Conv2d::init(c, q, 1, rng),
            bn1: BatchNorm::identity(q),
            conv3: Conv2d::init(c, q, 3, rng),
            bn3: BatchNorm::identity(q),
            conv5: Conv2d::init(c, q, 5, rng),
            bn5: BatchNorm::identity(q),
            tail3: Conv2d::init(q, q, 3, rng),
            tail7: Conv2d::init(q, q, 7, rng),
        }
    }
}

impl AbmWeights {
    /// All convolution / MLP weights and biases zero, batch norms identity.
    pub fn zeros(channels: usize, config: &AbmConfig) -> Result<Self> {
        config.check_channels(channels)?;
        let hidden = channels / config.compression_ratio;
        Ok(Self {
            channels,
            channel: ChannelAttentionWeights {
                fc1: Linear::zeros(channels, hidden),
                fc2: Linear::zeros(hidden, channels),
            },
            spatial: SpatialAttentionWeights {
                branches: [VRecFieldWeights::zeros(channels), VRecFieldWeights::zeros(channels)],
                fuse: Conv2d::zeros(channels / 2, 1, 3),
            },
            point: PointAttentionWeights {
                conv_a: Conv2d::zeros(channels, channels, 1),
                conv_b: Conv2d::zeros(channels, channels, 1),
            },
        })
    }

    pub fn init<R: Rng + ?Sized>(channels: usize, config: &AbmConfig, rng: &mut R) -> Result<Self> {
        config.check_channels(channels)?;
        let hidden = channels / config.compression_ratio;
        Ok(Self {
            channels,
            channel: ChannelAttentionWeights {
                fc1: Linear::init(channels, hidden, rng),
                fc2: Linear::init(hidden, channels, rng),
            },
            spatial: SpatialAttentionWeights {
                branches: [
                    VRecFieldWeights::init(channels, rng),
                    VRecFieldWeights::init(channels, rng),
                ],
                fuse: Conv2d::init(channels / 2, 1, 3, rng),
            },
            point: PointAttentionWeights {
                conv_a: Conv2d::init(channels, channels, 1, rng),
                conv_b: Conv2d::init(channels, channels, 1, rng),
            },
        })
    }

    fn check_input(&self, f_in: &FeatureTensor) -> Result<()> {
        if f_in.channels != self.channels {
            return Err(Error::shape(format!(
                "ABM built for {} channels, input has {}",
                self.channels, f_in.channels
            )));
        }
        if !f_in.is_finite() {
            return Err(Error::invalid("feature tensor contains non-finite values"));
        }
        Ok(())
    }
}

impl Parameterized for VRecFieldWeights {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.conv1.visit(&format!("{p}.conv1"), f);
        self.bn1.visit(&format!("{p}.bn1"), f);
        self.conv3.visit(&format!("{p}.conv3"), f);
        self.bn3.visit(&format!("{p}.bn3"), f);
        self.conv5.visit(&format!("{p}.conv5"), f);
        self.bn5.visit(&format!("{p}.bn5"), f);
        self.tail3.visit(&format!("{p}.tail3"), f);
        self.tail7.visit(&format!("{p}.tail7"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.conv1.visit_mut(&format!("{p}.conv1"), f);
        self.bn1.visit_mut(&format!("{p}.bn1"), f);
        self.conv3.visit_mut(&format!("{p}.conv3"), f);
        self.bn3.visit_mut(&format!("{p}.bn3"), f);
        self.conv5.visit_mut(&format!("{p}.conv5"), f);
        self.bn5.visit_mut(&format!("{p}.bn5"), f);
        self.tail3.visit_mut(&format!("{p}.tail3"), f);
        self.tail7.visit_mut(&format!("{p}.tail7"), f);
    }
}

impl Parameterized for AbmWeights {
    fn visit(&self, p: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.channel.fc1.visit(&format!("{p}.channel.fc1"), f);
        self.channel.fc2.visit(&format!("{p}.channel.fc2"), f);
        for (i, b) in self.spatial.branches.iter().enumerate() {
            b.visit(&format!("{p}.spatial.branch{i}"), f);
        }
        self.spatial.fuse.visit(&format!("{p}.spatial.fuse"), f);
        self.point.conv_a.visit(&format!("{p}.point.conv_a"), f);
        self.point.conv_b.visit(&format!("{p}.point.conv_b"), f);
    }

    fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.channel.fc1.visit_mut(&format!("{p}.channel.fc1"), f);
        self.channel.fc2.visit_mut(&format!("{p}.channel.fc2"), f);
        for (i, b) in self.spatial.branches.iter_mut().enumerate() {
            b.visit_mut(&format!("{p}.spatial.branch{i}"), f);
        }
        self.spatial.fuse.visit_mut(&format!("{p}.spatial.fuse"), f);
        self.point.conv_a.visit_mut(&format!("{p}.point.conv_a"), f);
        self.point.conv_b.visit_mut(&format!("{p}.point.conv_b"), f);
    }
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct ChannelCache {
    pooled: Vec<f64>,
    max_index: Vec<usize>,
    hidden: Vec<f64>,
    map: Vec<f64>,
}

fn channel_forward(
    f_in: &FeatureTensor,
    w: &ChannelAttentionWeights,
) -> (Vec<f64>, FeatureTensor, ChannelCache) {
    let n = f_in.plane_len() as f64;
    let mut pooled = Vec::with_capacity(f_in.channels);
    let mut max_index = Vec::with_capacity(f_in.channels);
    for c in 0..f_in.channels {
        let plane = f_in.plane(c);
        let avg = plane.iter().sum::<f64>() / n;
        let (mi, mv) = plane
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        pooled.push(avg + mv);
        max_index.push(mi);
    }
    let hidden: Vec<f64> = w.fc1.forward(&pooled).into_iter().map(relu).collect();
    let map: Vec<f64> = w.fc2.forward(&hidden).into_iter().map(sigmoid).collect();
    let mut ca = f_in.clone();
    for (c, &m) in map.iter().enumerate() {
        ca.plane_mut(c).iter_mut().for_each(|v| *v *= m);
    }
    (
        map.clone(),
        ca,
        ChannelCache {
            pooled,
            max_index,
            hidden,
            map,
        },
    )
}

/// Channel attention map `Ca` (length C) and attended tensor `CA`.
pub fn channel_attention(
    f_in: &FeatureTensor,
    weights: &ChannelAttentionWeights,
) -> Result<(Vec<f64>, FeatureTensor)> {
    if weights.fc1.in_features != f_in.channels || weights.fc2.out_features != f_in.channels {
        return Err(Error::Config(format!(
            "channel attention MLP expects {} channels, input has {}",
            weights.fc1.in_features, f_in.channels
        )));
    }
    let (map, ca, _) = channel_forward(f_in, weights);
    Ok((map, ca))
}

#[derive(Debug, Clone)]
struct BranchCache {
    pre1: FeatureTensor,
    pre3: FeatureTensor,
    pre5: FeatureTensor,
    fprime: FeatureTensor,
    t: FeatureTensor,
    r: FeatureTensor,
    v: FeatureTensor,
}

fn branch_forward(ca: &FeatureTensor, w: &VRecFieldWeights) -> Result<BranchCache> {
    let pre1 = w.conv1.forward(ca)?;
    let pre3 = w.conv3.forward(ca)?;
    let pre5 = w.conv5.forward(ca)?;
    let mut fprime = w.bn1.forward(&pre1);
    fprime.add_assign(&w.bn3.forward(&pre3));
    fprime.add_assign(&w.bn5.forward(&pre5));
    let t = w.tail3.forward(&fprime)?;
    let r = t.map(relu);
    let v = w.tail7.forward(&r)?.map(sigmoid);
    Ok(BranchCache {
        pre1,
        pre3,
        pre5,
        fprime,
        t,
        r,
        v,
    })
}

/// One V-RecField block applied to the channel-attended tensor; returns `V`
/// with C/4 channels and the input's spatial size.
pub fn v_recfield(ca: &FeatureTensor, weights: &VRecFieldWeights) -> Result<FeatureTensor> {
    Ok(branch_forward(ca, weights)?.v)
}

#[derive(Debug, Clone)]
struct SpatialCache {
    branches: [BranchCache; 2],
    cat: FeatureTensor,
    map: FeatureTensor,
}

fn spatial_forward(
    ca: &FeatureTensor,
    f_in: &FeatureTensor,
    w: &SpatialAttentionWeights,
) -> Result<(FeatureTensor, SpatialCache)> {
    let b0 = branch_forward(ca, &w.branches[0])?;
    let b1 = branch_forward(ca, &w.branches[1])?;
    if !b0.v.same_shape(&b1.v) {
        return Err(Error::shape("V-RecField branches disagree in shape"));
    }
    let cat = b0.v.concat_channels(&b1.v);
    let map = w.fuse.forward(&cat)?.map(sigmoid);
    if map.channels != 1 {
        return Err(Error::shape("spatial attention map must have one channel"));
    }
    let mut sa = f_in.clone();
    let m = map.plane(0);
    for c in 0..sa.channels {
        sa.plane_mut(c).iter_mut().zip(m).for_each(|(v, s)| *v *= s);
    }
    Ok((
        sa,
        SpatialCache {
            branches: [b0, b1],
            cat,
            map,
        },
    ))
}

/// Spatial attention map `Sa` (H×W×1) and attended tensor `SA = Sa ⊗ F_in`.
pub fn spatial_attention(
    ca: &FeatureTensor,
    f_in: &FeatureTensor,
    weights: &SpatialAttentionWeights,
) -> Result<(FeatureTensor, FeatureTensor)> {
    if !ca.same_shape(f_in) {
        return Err(Error::shape("CA and F_in must share a shape"));
    }
    let (sa, cache) = spatial_forward(ca, f_in, weights)?;
    Ok((cache.map, sa))
}

#[derive(Debug, Clone)]
struct PointCache {
    a: FeatureTensor,
    map: FeatureTensor,
}

fn point_forward(
    f_in: &FeatureTensor,
    w: &PointAttentionWeights,
) -> Result<(FeatureTensor, PointCache)> {
    let a = w.conv_a.forward(f_in)?;
    let map = w.conv_b.forward(&a.map(relu))?.map(sigmoid);
    if !map.same_shape(f_in) {
        return Err(Error::shape("point attention map must match F_in"));
    }
    let mut pa = f_in.clone();
    pa.data.iter_mut().zip(&map.data).for_each(|(v, m)| *v *= m);
    Ok((pa, PointCache { a, map }))
}

/// Point attention map `Pa` (H×W×C) and attended tensor `PA = Pa ⊙ F_in`.
pub fn point_attention(
    f_in: &FeatureTensor,
    weights: &PointAttentionWeights,
) -> Result<(FeatureTensor, FeatureTensor)> {
    let (pa, cache) = point_forward(f_in, weights)?;
    Ok((cache.map, pa))
}

/// Every intermediate attention quantity for one input.
#[derive(Debug, Clone)]
pub struct AttentionOutputs {
    pub ca_map: Vec<f64>,
    pub sa_map: FeatureTensor,
    pub pa_map: FeatureTensor,
    pub ca: FeatureTensor,
    pub sa: FeatureTensor,
    pub pa: FeatureTensor,
    pub v1: FeatureTensor,
    pub v2: FeatureTensor,
}

pub fn attention_outputs(f_in: &FeatureTensor, weights: &AbmWeights) -> Result<AttentionOutputs> {
    weights.check_input(f_in)?;
    let (ca_map, ca, _) = channel_forward(f_in, &weights.channel);
    let (sa, scache) = spatial_forward(&ca, f_in, &weights.spatial)?;
    let (pa, pcache) = point_forward(f_in, &weights.point)?;
    let [b0, b1] = scache.branches;
    Ok(AttentionOutputs {
        ca_map,
        sa_map: scache.map,
        pa_map: pcache.map,
        ca,
        sa,
        pa,
        v1: b0.v,
        v2: b1.v,
    })
}

/// Intermediates retained for the backward pass.
#[derive(Debug, Clone)]
pub struct AbmCache {
    variant: AbmVariant,
    input: FeatureTensor,
    attention: Option<(ChannelCache, FeatureTensor, SpatialCache, PointCache)>,
}

pub fn abm_forward_cached(
    f_in: &FeatureTensor,
    variant: AbmVariant,
    weights: &AbmWeights,
) -> Result<(FeatureTensor, AbmCache)> {
    weights.check_input(f_in)?;
    if variant == AbmVariant::A {
        return Ok((
            f_in.clone(),
            AbmCache {
                variant,
                input: f_in.clone(),
                attention: None,
            },
        ));
    }
    let (_, ca, ccache) = channel_forward(f_in, &weights.channel);
    let (sa, scache) = spatial_forward(&ca, f_in, &weights.spatial)?;
    let (pa, pcache) = point_forward(f_in, &weights.point)?;
    let mut out = sa;
    out.add_assign(&pa);
    if variant.has_skip() {
        out.add_assign(f_in);
    }
    if variant == AbmVariant::D {
        out.add_assign(&ca);
    }
    Ok((
        out,
        AbmCache {
            variant,
            input: f_in.clone(),
            attention: Some((ccache, ca, scache, pcache)),
        },
    ))
}

/// `F_out` for the configured variant; output shape equals input shape.
pub fn abm_forward(
    f_in: &FeatureTensor,
    config: &AbmConfig,
    weights: &AbmWeights,
) -> Result<FeatureTensor> {
    config.check_channels(f_in.channels)?;
    Ok(abm_forward_cached(f_in, config.variant, weights)?.0)
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

fn sigmoid_backward(out: &FeatureTensor, grad: &FeatureTensor) -> FeatureTensor {
    let mut g = grad.clone();
    g.data
        .iter_mut()
        .zip(&out.data)
        .for_each(|(gv, s)| *gv *= s * (1.0 - s));
    g
}

fn relu_backward(pre: &FeatureTensor, grad: &FeatureTensor) -> FeatureTensor {
    let mut g = grad.clone();
    g.data
        .iter_mut()
        .zip(&pre.data)
        .for_each(|(gv, p)| {
            if *p <= 0.0 {
                *gv = 0.0
            }
        });
    g
}

fn branch_backward(
    ca: &FeatureTensor,
    w: &VRecFieldWeights,
    cache: &BranchCache,
    grad_v: &FeatureTensor,
    grad: &mut VRecFieldWeights,
    grad_ca: &mut FeatureTensor,
) {
    let gu = sigmoid_backward(&cache.v, grad_v);
    let gr = w.tail7.backward(&cache.r, &gu, &mut grad.tail7, true).unwrap();
    let gt = relu_backward(&cache.t, &gr);
    let gf = w
        .tail3
        .backward(&cache.fprime, &gt, &mut grad.tail3, true)
        .unwrap();
    let g1 = w.bn1.backward(&cache.pre1, &gf, &mut grad.bn1);
    let g3 = w.bn3.backward(&cache.pre3, &gf, &mut grad.bn3);
    let g5 = w.bn5.backward(&cache.pre5, &gf, &mut grad.bn5);
    grad_ca.add_assign(&w.conv1.backward(ca, &g1, &mut grad.conv1, true).unwrap());
    grad_ca.add_assign(&w.conv3.backward(ca, &g3, &mut grad.conv3, true).unwrap());
    grad_ca.add_assign(&w.conv5.backward(ca, &g5, &mut grad.conv5, true).unwrap());
}

/// Gradient of a scalar loss with respect to `F_in`, accumulating parameter
/// gradients into `grad` (same architecture as `weights`).
pub fn abm_backward(
    weights: &AbmWeights,
    cache: &AbmCache,
    grad_out: &FeatureTensor,
    grad: &mut AbmWeights,
) -> FeatureTensor {
    let f = &cache.input;
    let Some((cc, ca, sc, pc)) = &cache.attention else {
        return grad_out.clone();
    };
    let mut grad_in = if cache.variant.has_skip() {
        grad_out.clone()
    } else {
        FeatureTensor::zeros(f.channels, f.height, f.width)
    };

    // Point attention: PA = Pa ⊙ F.
    let mut g_pmap = grad_out.clone();
    for i in 0..f.data.len() {
        grad_in.data[i] += pc.map.data[i] * grad_out.data[i];
        g_pmap.data[i] *= f.data[i];
    }
    let g_b = sigmoid_backward(&pc.map, &g_pmap);
    let g_a_act = weights
        .point
        .conv_b
        .backward(&pc.a.map(relu), &g_b, &mut grad.point.conv_b, true)
        .unwrap();
    let g_a = relu_backward(&pc.a, &g_a_act);
    grad_in.add_assign(
        &weights
            .point
            .conv_a
            .backward(f, &g_a, &mut grad.point.conv_a, true)
            .unwrap(),
    );

    // Spatial attention: SA = Sa ⊗ F, Sa = σ(fuse([V1; V2])), V_i from CA.
    let smap = sc.map.plane(0);
    let mut g_smap = FeatureTensor::zeros(1, f.height, f.width);
    for c in 0..f.channels {
        let go = grad_out.plane(c);
        let fp = f.plane(c);
        let gs = g_smap.plane_mut(0);
        for i in 0..go.len() {
            gs[i] += fp[i] * go[i];
        }
        let gi = grad_in.plane_mut(c);
        for i in 0..go.len() {
            gi[i] += smap[i] * go[i];
        }
    }
    let g_z = sigmoid_backward(&sc.map, &g_smap);
    let g_cat = weights
        .spatial
        .fuse
        .backward(&sc.cat, &g_z, &mut grad.spatial.fuse, true)
        .unwrap();
    let (g_v0, g_v1) = g_cat.split_channels(sc.branches[0].v.channels);
    let mut grad_ca = if cache.variant == AbmVariant::D {
        grad_out.clone()
    } else {
        FeatureTensor::zeros(f.channels, f.height, f.width)
    };
    {
        let [gb0, gb1] = &mut grad.spatial.branches;
        branch_backward(
            ca,
            &weights.spatial.branches[0],
            &sc.branches[0],
            &g_v0,
            gb0,
            &mut grad_ca,
        );
        branch_backward(
            ca,
            &weights.spatial.branches[1],
            &sc.branches[1],
            &g_v1,
            gb1,
            &mut grad_ca,
        );
    }

    // Channel attention: CA = Ca ⊗ F.
    let n = f.plane_len() as f64;
    let mut g_cmap = vec![0.0; f.channels];
    for c in 0..f.channels {
        let gc = grad_ca.plane(c);
        g_cmap[c] = gc.iter().zip(f.plane(c)).map(|(a, b)| a * b).sum();
        let m = cc.map[c];
        grad_in
            .plane_mut(c)
            .iter_mut()
            .zip(gc)
            .for_each(|(gi, g)| *gi += m * g);
    }
    let g_o: Vec<f64> = g_cmap
        .iter()
        .zip(&cc.map)
        .map(|(g, s)| g * s * (1.0 - s))
        .collect();
    let g_hidden = weights
        .channel
        .fc2
        .backward(&cc.hidden, &g_o, &mut grad.channel.fc2);
    let g_hpre: Vec<f64> = g_hidden
        .iter()
        .zip(&cc.hidden)
        .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
        .collect();
    let g_pooled = weights
        .channel
        .fc1
        .backward(&cc.pooled, &g_hpre, &mut grad.channel.fc1);
    for c in 0..f.channels {
        let gp = g_pooled[c];
        let plane = grad_in.plane_mut(c);
        plane.iter_mut().for_each(|v| *v += gp / n);
        plane[cc.max_index[c]] += gp;
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(variant: AbmVariant, n: usize) -> AbmConfig {
        AbmConfig {
            variant,
            compression_ratio: n,
        }
    }

    #[test]
    fn constant_input_pools_to_value() {
        let f = FeatureTensor::filled(4, 3, 3, 2.5);
        let w = AbmWeights::zeros(4, &cfg(AbmVariant::C, 2)).unwrap();
        let (_, _, cache) = channel_forward(&f, &w.channel);
        // avg + max of a constant plane.
        assert!(cache.pooled.iter().all(|&p| p == 5.0));
    }

    #[test]
    fn zero_mlp_gives_half_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = FeatureTensor::random(8, 3, 4, &mut rng);
        let w = AbmWeights::zeros(8, &cfg(AbmVariant::C, 4)).unwrap();
        let (map, ca) = channel_attention(&f, &w.channel).unwrap();
        assert!(map.iter().all(|&m| m == 0.5));
        assert_eq!(ca, f.scaled(0.5));
    }

    #[test]
    fn hand_evaluated_channel_attention() {
        // 1×1×2 input [1, 2], n = 2 → hidden width 1.
        let f = FeatureTensor::from_vec(2, 1, 1, vec![1.0, 2.0]).unwrap();
        let fc1 = Linear {
            in_features: 2,
            out_features: 1,
            weight: vec![0.5, -0.25],
            bias: vec![0.1],
        };
        let fc2 = Linear {
            in_features: 1,
            out_features: 2,
            weight: vec![2.0, -1.0],
            bias: vec![0.0, 0.3],
        };
        let w = ChannelAttentionWeights { fc1, fc2 };
        let (map, ca) = channel_attention(&f, &w).unwrap();
        // pooled = avg + max = [2, 4]; hidden = relu(0.5*2 - 0.25*4 + 0.1) = 0.1
        let h: f64 = 0.1;
        let o = [2.0 * h, -h + 0.3];
        let s = o.map(|v: f64| 1.0 / (1.0 + (-v).exp()));
        assert!((map[0] - s[0]).abs() < 1e-10 && (map[1] - s[1]).abs() < 1e-10);
        assert!((ca.data[0] - s[0]).abs() < 1e-10);
        assert!((ca.data[1] - 2.0 * s[1]).abs() < 1e-10);
    }

    #[test]
    fn zero_weights_vrecfield_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = FeatureTensor::random(8, 5, 3, &mut rng);
        let w = VRecFieldWeights::zeros(8);
        let v = v_recfield(&f, &w).unwrap();
        assert_eq!((v.channels, v.height, v.width), (2, 5, 3));
        assert!(v.data.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn zero_weights_spatial_and_point_are_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = FeatureTensor::random(8, 4, 6, &mut rng);
        let w = AbmWeights::zeros(8, &cfg(AbmVariant::C, 2)).unwrap();
        let (sa_map, sa) = spatial_attention(&f, &f, &w.spatial).unwrap();
        assert_eq!((sa_map.channels, sa_map.height, sa_map.width), (1, 4, 6));
        assert!(sa_map.data.iter().all(|&x| x == 0.5));
        assert_eq!(sa, f.scaled(0.5));
        let (pa_map, pa) = point_attention(&f, &w.point).unwrap();
        assert!(pa_map.data.iter().all(|&x| x == 0.5));
        assert_eq!(pa, f.scaled(0.5));
    }

    #[test]
    fn identity_point_kernels_give_sigmoid_of_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = FeatureTensor::random(4, 3, 3, &mut rng).map(f64::abs);
        let w = PointAttentionWeights {
            conv_a: Conv2d::identity(4),
            conv_b: Conv2d::identity(4),
        };
        let (map, _) = point_attention(&f, &w).unwrap();
        for (m, x) in map.data.iter().zip(&f.data) {
            assert!((m - sigmoid(*x)).abs() < 1e-15);
        }
    }

    #[test]
    fn variant_a_is_bit_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = FeatureTensor::random(8, 4, 4, &mut rng);
        let c = cfg(AbmVariant::A, 2);
        let w = AbmWeights::init(8, &c, &mut rng).unwrap();
        assert_eq!(abm_forward(&f, &c, &w).unwrap(), f);
    }

    #[test]
    fn variant_c_zero_weights_doubles_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = FeatureTensor::random(8, 4, 4, &mut rng);
        let c = cfg(AbmVariant::C, 2);
        let w = AbmWeights::zeros(8, &c).unwrap();
        let out = abm_forward(&f, &c, &w).unwrap();
        for (o, x) in out.data.iter().zip(&f.data) {
            assert!((o - 2.0 * x).abs() < 1e-10);
        }
    }

    #[test]
    fn variants_recompose_from_components() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = FeatureTensor::random(8, 5, 4, &mut rng);
        let w = AbmWeights::init(8, &cfg(AbmVariant::D, 2), &mut rng).unwrap();
        let parts = attention_outputs(&f, &w).unwrap();
        let b = abm_forward(&f, &cfg(AbmVariant::B, 2), &w).unwrap();
        let c = abm_forward(&f, &cfg(AbmVariant::C, 2), &w).unwrap();
        let d = abm_forward(&f, &cfg(AbmVariant::D, 2), &w).unwrap();
        for i in 0..f.data.len() {
            let (sa, pa, ca, x) = (parts.sa.data[i], parts.pa.data[i], parts.ca.data[i], f.data[i]);
            assert!((b.data[i] - (sa + pa)).abs() < 1e-12);
            assert!((c.data[i] - (x + sa + pa)).abs() < 1e-12);
            assert!((d.data[i] - (x + pa + ca + sa)).abs() < 1e-12);
            assert!((d.data[i] - ca - c.data[i]).abs() < 1e-12);
        }
        for m in parts
            .sa_map
            .data
            .iter()
            .chain(&parts.pa_map.data)
            .chain(&parts.ca_map)
            .chain(&parts.v1.data)
        {
            assert!(*m > 0.0 && *m < 1.0);
        }
    }

    #[test]
    fn indivisible_channels_rejected() {
        assert!(matches!(
            AbmWeights::zeros(8, &cfg(AbmVariant::C, 16)),
            Err(Error::Config(_))
        ));
        assert!(AbmWeights::zeros(6, &cfg(AbmVariant::C, 2)).is_err());
        assert!(AbmWeights::zeros(32, &AbmConfig::default()).is_ok());
    }
}
