//! Restore-before-retrieve: undo channel permutations, per-kernel rescaling
//! and channel cutoff/supplement on a suspect model, using the owner's
//! watermarked model as the reference, so that the embedding positions line
//! up again.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::KernelAddress;
use crate::linalg::{max_weight_assignment, singular_values_3x3};
use crate::nn::{ConvKernel, ConvLayer, Model};

/// Best-match similarity below which a reference channel counts as cut off.
pub const CUTOFF_THRESHOLD: f64 = 0.85;

/// Kernel similarity at or above which a kernel counts as restored.
pub const RESTORED_SIMILARITY: f64 = 0.9473;

/// Reference kernels whose singular values all fall below this are not rescaled.
const SINGULAR_FLOOR: f64 = 1e-12;

/// Flattened kernels of one output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelVector(Vec<f32>);

impl ChannelVector {
    pub fn new(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn from_kernels(kernels: &[ConvKernel]) -> Self {
        Self(kernels.iter().flat_map(|k| k.0).collect())
    }

    /// Like [`ChannelVector::from_kernels`], with every nonzero kernel scaled
    /// to unit norm first, so per-kernel rescaling leaves the direction intact.
    pub fn from_kernels_normalized(kernels: &[ConvKernel]) -> Self {
        Self(
            kernels
                .iter()
                .flat_map(|k| {
                    let norm = k.0.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    k.0.map(|v| if norm > 0.0 { (v as f64 / norm) as f32 } else { 0.0 })
                })
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

fn cosine_raw(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// `a·b / (‖a‖‖b‖)`, clamped to [-1, 1]; zero when either vector is zero.
pub fn cosine_similarity(a: &ChannelVector, b: &ChannelVector) -> Result<f64> {
    if a.0.len() != b.0.len() {
        return Err(Error::InvalidArgument(format!(
            "channel vectors differ in length: {} vs {}",
            a.0.len(),
            b.0.len()
        )));
    }
    Ok(cosine_raw(&a.0, &b.0))
}

pub fn kernel_similarity(a: &ConvKernel, b: &ConvKernel) -> f64 {
    cosine_raw(&a.0, &b.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelAddress {
    pub layer: usize,
    pub channel: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RestoreReport {
    /// Per layer: for each reference output channel, the suspect channel it
    /// was taken from (`None` when zero-filled).
    pub channel_maps: Vec<Vec<Option<usize>>>,
    /// Per layer, per kernel (canonical order): recovered scale factor.
    pub kernel_factors: Vec<Vec<f64>>,
    /// Per layer consensus (lower median) of the kernel factors.
    pub layer_factors: Vec<f64>,
    pub scale_skipped: Vec<KernelAddress>,
    pub zero_filled: Vec<ChannelAddress>,
    /// Suspect channels dropped because nothing in the reference matched.
    pub removed: Vec<ChannelAddress>,
    pub restored_rate: f64,
}

impl RestoreReport {
    /// True when every layer map is a bijection onto the suspect's channels.
    pub fn is_permutation(&self) -> bool {
        self.channel_maps.iter().all(|m| {
            let mut seen = vec![false; m.len()];
            m.iter().all(|c| match c {
                Some(c) if *c < seen.len() && !seen[*c] => {
                    seen[*c] = true;
                    true
                }
                _ => false,
            })
        })
    }
}

/// Fraction of reference kernels whose counterpart in `restored` has cosine
/// similarity of at least [`RESTORED_SIMILARITY`].
pub fn restored_rate(restored: &Model, reference: &Model) -> f64 {
    let total = reference.kernel_count();
    if total == 0 || restored.architecture() != reference.architecture() {
        return 0.0;
    }
    let matched = restored
        .conv_layers
        .iter()
        .zip(&reference.conv_layers)
        .flat_map(|(a, b)| a.kernels.iter().zip(&b.kernels))
        .filter(|(a, b)| kernel_similarity(a, b) >= RESTORED_SIMILARITY)
        .count();
    matched as f64 / total as f64
}

fn check_common(suspect: &Model, reference: &Model) -> Result<()> {
    if suspect.conv_layers.len() != reference.conv_layers.len() {
        return Err(Error::Structure(format!(
            "suspect has {} conv layers, reference has {}",
            suspect.conv_layers.len(),
            reference.conv_layers.len()
        )));
    }
    if suspect.input_shape != reference.input_shape || suspect.class_count() != reference.class_count() {
        return Err(Error::Structure("input shape or class count differs from the reference".into()));
    }
    suspect.validate()?;
    reference.validate()
}

/// Matches suspect output channels to reference output channels layer by
/// layer, carrying each layer's mapping into the next layer's inputs.
/// With a threshold, weak matches become zero-filled channels and unmatched
/// suspect channels are dropped; the result always has the reference shape.
fn align(suspect: &Model, reference: &Model, threshold: Option<f64>) -> Result<(Model, RestoreReport)> {
    check_common(suspect, reference)?;
    let mut report = RestoreReport::default();
    let mut prev_map: Vec<Option<usize>> = (0..reference.input_shape.channels).map(Some).collect();
    let mut out = reference.clone();
    for (l, (s, r)) in suspect.conv_layers.iter().zip(&reference.conv_layers).enumerate() {
        // Suspect kernels re-indexed onto the reference's input channels.
        let aligned: Vec<Vec<ConvKernel>> = (0..s.out_channels)
            .map(|o| prev_map.iter().map(|src| src.map_or(ConvKernel::ZERO, |i| *s.kernel(o, i))).collect())
            .collect();
        let suspect_vecs: Vec<ChannelVector> =
            aligned.iter().map(|k| ChannelVector::from_kernels_normalized(k)).collect();
        let reference_vecs: Vec<ChannelVector> =
            (0..r.out_channels).map(|c| ChannelVector::from_kernels_normalized(r.output_channel(c))).collect();
        let sims: Vec<Vec<f64>> =
            suspect_vecs.iter().map(|sv| reference_vecs.iter().map(|rv| cosine_raw(&sv.0, &rv.0)).collect()).collect();
        let assignment = max_weight_assignment(&sims);
        let mut map: Vec<Option<usize>> = vec![None; r.out_channels];
        for (o, target) in assignment.iter().enumerate() {
            if let Some(c) = *target {
                if threshold.is_none_or(|t| sims[o][c] >= t) {
                    map[c] = Some(o);
                }
            }
        }
        let mut layer = ConvLayer::zeros(r.out_channels, r.in_channels, s.activation);
        for (c, src) in map.iter().enumerate() {
            match *src {
                Some(o) => {
                    layer.kernels[c * r.in_channels..(c + 1) * r.in_channels].copy_from_slice(&aligned[o]);
                    layer.bias[c] = s.bias[o];
                }
                None => report.zero_filled.push(ChannelAddress { layer: l, channel: c }),
            }
        }
        let used: Vec<bool> = (0..s.out_channels).map(|o| map.contains(&Some(o))).collect();
        report.removed.extend(
            used.iter().enumerate().filter(|(_, u)| !**u).map(|(o, _)| ChannelAddress { layer: l, channel: o }),
        );
        out.conv_layers[l] = layer;
        report.channel_maps.push(map.clone());
        prev_map = map;
    }
    let head = &mut out.head;
    let sh = &suspect.head;
    head.activation = sh.activation;
    head.bias.clone_from(&sh.bias);
    for k in 0..head.out_features {
        for (c, src) in prev_map.iter().enumerate() {
            head.weights[k * head.in_features + c] = src.map_or(0.0, |i| sh.weights[k * sh.in_features + i]);
        }
    }
    report.restored_rate = restored_rate(&out, reference);
    Ok((out, report))
}

/// Undoes a channel permutation. Channel counts must match the reference.
pub fn reorder_restore(suspect: &Model, reference_fwm: &Model) -> Result<(Model, RestoreReport)> {
    check_common(suspect, reference_fwm)?;
    for (l, (s, r)) in suspect.conv_layers.iter().zip(&reference_fwm.conv_layers).enumerate() {
        if s.out_channels != r.out_channels {
            return Err(Error::Structure(format!(
                "layer {l} has {} channels, reference has {}; use cutoff_restore",
                s.out_channels, r.out_channels
            )));
        }
    }
    align(suspect, reference_fwm, None)
}

/// Reinstates cut-off channels as zeros and drops supplemented ones.
pub fn cutoff_restore(suspect: &Model, reference_fwm: &Model) -> Result<(Model, RestoreReport)> {
    align(suspect, reference_fwm, Some(CUTOFF_THRESHOLD))
}

/// Ratio of singular values, averaged; `None` when the pair is degenerate.
fn kernel_scale(suspect: &ConvKernel, reference: &ConvKernel) -> Option<f64> {
    let rs = singular_values_3x3(&reference.0);
    if rs[0] < SINGULAR_FLOOR {
        return None;
    }
    let ss = singular_values_3x3(&suspect.0);
    // Skip directions the reference does not span; thresholding on the
    // reference alone keeps the ratio exact under power-of-two scaling.
    let floor = (rs[0] * 1e-6).max(SINGULAR_FLOOR);
    let ratios: Vec<f64> = ss.iter().zip(&rs).filter(|(_, r)| **r > floor).map(|(s, r)| s / r).collect();
    let c = ratios.iter().sum::<f64>() / ratios.len() as f64;
    (c.is_finite() && c > SINGULAR_FLOOR).then_some(c)
}

fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    Some(v[(v.len() - 1) / 2])
}

/// Recovers per-kernel scale factors from singular-value ratios and divides
/// them out. Biases are divided by the running product of the per-layer
/// median factors (the scale of that layer's output), and the head weights
/// are multiplied by the final product so the head sees unscaled inputs.
pub fn scale_restore(suspect: &Model, reference_fwm: &Model) -> Result<(Model, RestoreReport)> {
    check_common(suspect, reference_fwm)?;
    if suspect.architecture() != reference_fwm.architecture() {
        return Err(Error::Structure("scale restore needs channel-aligned models; run reorder_restore first".into()));
    }
    let mut out = suspect.clone();
    let mut report = RestoreReport {
        channel_maps: suspect.conv_layers.iter().map(|l| (0..l.out_channels).map(Some).collect()).collect(),
        ..Default::default()
    };
    let mut output_scale = 1.0f64;
    for (l, (layer, r)) in out.conv_layers.iter_mut().zip(&reference_fwm.conv_layers).enumerate() {
        let mut factors = Vec::with_capacity(layer.kernels.len());
        let mut accepted = Vec::new();
        for (idx, (k, rk)) in layer.kernels.iter_mut().zip(&r.kernels).enumerate() {
            match kernel_scale(k, rk) {
                Some(c) => {
                    k.0.iter_mut().for_each(|v| *v = (*v as f64 / c) as f32);
                    factors.push(c);
                    accepted.push(c);
                }
                None => {
                    factors.push(1.0);
                    report.scale_skipped.push(KernelAddress {
                        layer: l,
                        out_channel: idx / layer.in_channels,
                        in_channel: idx % layer.in_channels,
                    });
                }
            }
        }
        let consensus = lower_median(&accepted).unwrap_or(1.0);
        output_scale *= consensus;
        layer.bias.iter_mut().for_each(|b| *b = (*b as f64 / output_scale) as f32);
        report.kernel_factors.push(factors);
        report.layer_factors.push(consensus);
    }
    out.head.weights.iter_mut().for_each(|w| *w = (*w as f64 * output_scale) as f32);
    report.restored_rate = restored_rate(&out, reference_fwm);
    Ok((out, report))
}

/// Shape, then order, then magnitude.
pub fn full_restore(suspect: &Model, reference_fwm: &Model) -> Result<(Model, RestoreReport)> {
    let (shaped, cut) = cutoff_restore(suspect, reference_fwm)?;
    let (ordered, reorder) = reorder_restore(&shaped, reference_fwm)?;
    let (scaled, scale) = scale_restore(&ordered, reference_fwm)?;
    let channel_maps: Vec<Vec<Option<usize>>> = reorder
        .channel_maps
        .iter()
        .zip(&cut.channel_maps)
        .map(|(re, cm)| re.iter().map(|c| c.and_then(|c| cm[c])).collect())
        .collect();
    let zero_filled = channel_maps
        .iter()
        .enumerate()
        .flat_map(|(l, m)| {
            m.iter().enumerate().filter(|(_, s)| s.is_none()).map(move |(c, _)| ChannelAddress { layer: l, channel: c })
        })
        .collect();
    let report = RestoreReport {
        channel_maps,
        kernel_factors: scale.kernel_factors,
        layer_factors: scale.layer_factors,
        scale_skipped: scale.scale_skipped,
        zero_filled,
        removed: cut.removed,
        restored_rate: restored_rate(&scaled, reference_fwm),
    };
    Ok((scaled, report))
}
