//! Adversary simulations. Every attack returns the transformed model plus an
//! [`AttackRecord`] holding enough ground truth to replay or invert it.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, Activation, ConvKernel, ConvLayer, FreezeMask, Model, TrainConfig, KERNEL_LEN};

/// Share of the attacker's data used for fine-tuning; the rest is held out.
pub const FINETUNE_SPLIT: f32 = 0.8;

/// Default bound on the power-of-two exponents of parameter adjustment.
pub const DEFAULT_EXPONENT_RANGE: i32 = 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpandStrategy {
    /// Random new kernels whose outputs the next layer ignores.
    ZeroB,
    /// Each new channel copies an existing one and takes a share of its
    /// outgoing weights.
    DuplicateSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackRecord {
    FineTune {
        config: TrainConfig,
        split_fraction: f32,
        train_samples: usize,
    },
    Prune {
        fraction: f64,
        /// Flat parameter indices in serialization order, ascending.
        zeroed: Vec<usize>,
    },
    Structure {
        /// Per conv layer: new channel `c` is old channel `permutations[l][c]`.
        permutations: Vec<Vec<usize>>,
    },
    Parameter {
        /// Per conv layer: the output of layer `l` is scaled by `2^exponents[l]`.
        exponents: Vec<i32>,
    },
    Expand {
        layer: usize,
        k: usize,
        strategy: ExpandStrategy,
        alpha: f32,
        /// Duplicated channel per new channel (empty for zero_b).
        sources: Vec<usize>,
        /// New kernels (k × in × 9) followed by the k new biases.
        a_inc: Vec<f32>,
        /// New next-layer weights for the k added inputs, in next-layer
        /// output order (kernels when the next layer is conv).
        b_inc: Vec<f32>,
    },
    Cutoff {
        layer: usize,
        channels: Vec<usize>,
    },
    Supplement {
        layer: usize,
        k: usize,
        seed: u64,
        appended: Vec<usize>,
    },
    Composite {
        stages: Vec<AttackRecord>,
    },
}

/// Plain SGD over all parameters on the first 80% of a seeded split.
pub fn finetune(model: &Model, data: &Dataset, config: &TrainConfig) -> Result<(Model, AttackRecord)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (train_set, _) = data.split(FINETUNE_SPLIT as f64, config.seed)?;
    let (tuned, _) = nn::train(model, &train_set, config, &FreezeMask::none(model))?;
    Ok((
        tuned,
        AttackRecord::FineTune {
            config: config.clone(),
            split_fraction: FINETUNE_SPLIT,
            train_samples: train_set.len(),
        },
    ))
}

/// Zeroes the `⌊fraction·P⌋` parameters of smallest magnitude across the
/// whole model; ties go to the earlier parameter.
pub fn prune_magnitude(model: &Model, fraction: f64) -> Result<(Model, AttackRecord)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("prune fraction {fraction} outside [0, 1]")));
    }
    let params = model.params();
    let k = (fraction * params.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..params.len()).collect();
    order.sort_by(|&a, &b| params[a].abs().total_cmp(&params[b].abs()).then(a.cmp(&b)));
    let mut zeroed = order[..k].to_vec();
    zeroed.sort_unstable();
    Ok((apply_prune(model, &zeroed), AttackRecord::Prune { fraction, zeroed }))
}

fn apply_prune(model: &Model, zeroed: &[usize]) -> Model {
    let mut out = model.clone();
    let mut next = zeroed.iter().peekable();
    let mut i = 0usize;
    out.for_each_param_mut(|v| {
        if next.peek() == Some(&&i) {
            *v = 0.0;
            next.next();
        }
        i += 1;
    });
    out
}

/// Reorders the kernels feeding each output channel so that input `c` is
/// taken from old input `map[c]`.
fn remap_inputs(layer: &mut ConvLayer, map: &[usize]) {
    let old = layer.clone();
    layer.in_channels = map.len();
    layer.kernels =
        (0..old.out_channels).flat_map(|o| map.iter().map(move |&i| (o, i))).map(|(o, i)| *old.kernel(o, i)).collect();
}

fn remap_outputs(layer: &mut ConvLayer, map: &[usize]) {
    let old = layer.clone();
    layer.out_channels = map.len();
    layer.kernels = map.iter().flat_map(|&o| old.output_channel(o).iter().copied()).collect();
    layer.bias = map.iter().map(|&o| old.bias[o]).collect();
}

/// Remaps the inputs of whatever consumes conv layer `layer`'s output.
fn remap_consumer(model: &mut Model, layer: usize, map: &[usize]) {
    if let Some(next) = model.conv_layers.get_mut(layer + 1) {
        remap_inputs(next, map);
    } else {
        let h = &mut model.head;
        let old = h.weights.clone();
        let old_in = h.in_features;
        h.in_features = map.len();
        let old = &old;
        h.weights = (0..h.out_features).flat_map(|r| map.iter().map(move |&c| old[r * old_in + c])).collect();
    }
}

fn is_permutation(p: &[usize], n: usize) -> bool {
    let mut seen = vec![false; n];
    p.len() == n && p.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true))
}

/// Applies the given per-layer output-channel permutations, compensating in
/// the consumer of each layer.
pub fn structure_adjust_with(model: &Model, permutations: &[Vec<usize>]) -> Result<(Model, AttackRecord)> {
    if permutations.len() != model.conv_layers.len() {
        return Err(Error::InvalidArgument("one permutation per conv layer required".into()));
    }
    let mut out = model.clone();
    for (l, perm) in permutations.iter().enumerate() {
        if !is_permutation(perm, out.conv_layers[l].out_channels) {
            return Err(Error::InvalidArgument(format!("layer {l}: not a permutation of its channels")));
        }
        remap_outputs(&mut out.conv_layers[l], perm);
        remap_consumer(&mut out, l, perm);
    }
    Ok((out, AttackRecord::Structure { permutations: permutations.to_vec() }))
}

/// Shuffles the output channels of every conv layer.
pub fn structure_adjust(model: &Model, seed: u64) -> Result<(Model, AttackRecord)> {
    if model.conv_layers.is_empty() {
        return Err(Error::Structure("model has no conv layers".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let perms: Vec<Vec<usize>> = model
        .conv_layers
        .iter()
        .map(|l| {
            let mut p: Vec<usize> = (0..l.out_channels).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    structure_adjust_with(model, &perms)
}

fn scale_checked(v: f32, factor: f32) -> Option<f32> {
    let s = v * factor;
    (v == 0.0 || s.is_normal()).then_some(s)
}

/// Scales each layer's output by `2^exponents[l]`: kernels of layer `l` by
/// `2^(n_l − n_(l−1))`, its bias by `2^n_l`, and the head weights by
/// `2^(−n_last)`. Logits are unchanged bit for bit.
pub fn parameter_adjust_with(model: &Model, exponents: &[i32]) -> Result<(Model, AttackRecord)> {
    if exponents.len() != model.conv_layers.len() {
        return Err(Error::InvalidArgument("one exponent per conv layer required".into()));
    }
    for (l, layer) in model.conv_layers.iter().enumerate() {
        if layer.activation != Activation::Relu {
            return Err(Error::NonRelu { layer: l });
        }
    }
    let overflow = || Error::OutOfRange("scaled parameter leaves the normal f32 range".into());
    let mut out = model.clone();
    let mut prev = 0i32;
    for (layer, &n) in out.conv_layers.iter_mut().zip(exponents) {
        let kf = 2f32.powi(n - prev);
        let bf = 2f32.powi(n);
        for v in layer.kernels.iter_mut().flat_map(|k| k.0.iter_mut()) {
            *v = scale_checked(*v, kf).ok_or_else(overflow)?;
        }
        for b in layer.bias.iter_mut() {
            *b = scale_checked(*b, bf).ok_or_else(overflow)?;
        }
        prev = n;
    }
    let hf = 2f32.powi(-prev);
    for w in out.head.weights.iter_mut() {
        *w = scale_checked(*w, hf).ok_or_else(overflow)?;
    }
    Ok((out, AttackRecord::Parameter { exponents: exponents.to_vec() }))
}

/// Draws exponents uniformly from `−range..=range` for the selected layers
/// (all layers when `layers` is `None`), redrawing if a value would leave the
/// normal float range.
pub fn parameter_adjust(
    model: &Model,
    seed: u64,
    range: i32,
    layers: Option<&[usize]>,
) -> Result<(Model, AttackRecord)> {
    if let Some(l) = (0..model.conv_layers.len()).find(|&l| model.conv_layers[l].activation != Activation::Relu) {
        return Err(Error::NonRelu { layer: l });
    }
    if !(0..=60).contains(&range) {
        return Err(Error::InvalidArgument(format!("exponent range {range} outside 0..=60")));
    }
    if let Some(sel) = layers {
        if let Some(&bad) = sel.iter().find(|&&l| l >= model.conv_layers.len()) {
            return Err(Error::OutOfRange(format!("layer {bad}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..1000 {
        let exps: Vec<i32> = (0..model.conv_layers.len())
            .map(|l| {
                let chosen = layers.is_none_or(|sel| sel.contains(&l));
                if chosen {
                    rng.random_range(-range..=range)
                } else {
                    0
                }
            })
            .collect();
        match parameter_adjust_with(model, &exps) {
            Err(Error::OutOfRange(_)) => continue,
            other => return other,
        }
    }
    Err(Error::OutOfRange("no admissible exponents found".into()))
}

fn check_expand_target(model: &Model, layer: usize) -> Result<()> {
    if layer >= model.conv_layers.len() {
        return Err(Error::OutOfRange(format!("layer {layer} of {}", model.conv_layers.len())));
    }
    Ok(())
}

/// Appends one input channel to the consumer of `layer`, with `column[r]`
/// as the weights (kernel or scalar) for consumer output `r`.
enum Column {
    Kernels(Vec<ConvKernel>),
    Scalars(Vec<f32>),
}

fn consumer_column(model: &Model, layer: usize, channel: usize) -> Column {
    match model.conv_layers.get(layer + 1) {
        Some(next) => Column::Kernels((0..next.out_channels).map(|o| *next.kernel(o, channel)).collect()),
        None => {
            let h = &model.head;
            Column::Scalars((0..h.out_features).map(|r| h.weights[r * h.in_features + channel]).collect())
        }
    }
}

fn set_consumer_column(model: &mut Model, layer: usize, channel: usize, col: &Column) {
    match (model.conv_layers.get_mut(layer + 1), col) {
        (Some(next), Column::Kernels(ks)) => {
            for (o, k) in ks.iter().enumerate() {
                *next.kernel_mut(o, channel) = *k;
            }
        }
        (None, Column::Scalars(ws)) => {
            let h = &mut model.head;
            for (r, w) in ws.iter().enumerate() {
                h.weights[r * h.in_features + channel] = *w;
            }
        }
        _ => unreachable!("column kind follows the consumer"),
    }
}

fn column_values(col: &Column) -> Vec<f32> {
    match col {
        Column::Kernels(ks) => ks.iter().flat_map(|k| k.0).collect(),
        Column::Scalars(ws) => ws.clone(),
    }
}

/// Grows conv layer `layer` and its consumer by `k` channels filled with zeros.
fn grow(model: &mut Model, layer: usize, k: usize) {
    let old_out = model.conv_layers[layer].out_channels;
    let map_src: Vec<Option<usize>> = (0..old_out + k).map(|c| (c < old_out).then_some(c)).collect();
    let l = &mut model.conv_layers[layer];
    let mut kernels = l.kernels.clone();
    kernels.resize((old_out + k) * l.in_channels, ConvKernel::ZERO);
    l.kernels = kernels;
    l.bias.resize(old_out + k, 0.0);
    l.out_channels = old_out + k;
    match model.conv_layers.get_mut(layer + 1) {
        Some(next) => {
            let old = &next.clone();
            next.in_channels = old_out + k;
            next.kernels = (0..old.out_channels)
                .flat_map(|o| map_src.iter().map(move |s| (o, *s)))
                .map(|(o, s)| s.map_or(ConvKernel::ZERO, |i| *old.kernel(o, i)))
                .collect();
        }
        None => {
            let h = &mut model.head;
            let old = &h.weights.clone();
            h.in_features = old_out + k;
            h.weights = (0..h.out_features)
                .flat_map(|r| map_src.iter().map(move |s| (r, *s)))
                .map(|(r, s)| s.map_or(0.0, |c| old[r * old_out + c]))
                .collect();
        }
    }
}

/// Adds `k` output channels to conv layer `layer` and matching inputs to its
/// consumer, preserving the function under ReLU.
pub fn channel_expand(
    model: &Model,
    layer: usize,
    k: usize,
    strategy: ExpandStrategy,
    alpha: f32,
    seed: u64,
) -> Result<(Model, AttackRecord)> {
    check_expand_target(model, layer)?;
    if k == 0 {
        return Err(Error::InvalidArgument("expansion needs k ≥ 1".into()));
    }
    if strategy == ExpandStrategy::DuplicateSplit && !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!("split factor {alpha} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let old_out = model.conv_layers[layer].out_channels;
    let in_ch = model.conv_layers[layer].in_channels;
    let mut out = model.clone();
    grow(&mut out, layer, k);
    let mut sources = Vec::new();
    match strategy {
        ExpandStrategy::ZeroB => {
            let normal = Normal::new(0.0f32, (2.0 / (in_ch * KERNEL_LEN) as f32).sqrt()).expect("valid std");
            let l = &mut out.conv_layers[layer];
            for c in old_out..old_out + k {
                for i in 0..in_ch {
                    l.kernel_mut(c, i).0.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                }
            }
        }
        ExpandStrategy::DuplicateSplit => {
            for c in old_out..old_out + k {
                let r = rng.random_range(0..old_out);
                sources.push(r);
                let l = &mut out.conv_layers[layer];
                for i in 0..in_ch {
                    *l.kernel_mut(c, i) = *l.kernel(r, i);
                }
                l.bias[c] = l.bias[r];
                let col = consumer_column(&out, layer, r);
                let (keep, give) = match col {
                    Column::Kernels(ks) => (
                        Column::Kernels(ks.iter().map(|k| k.scaled(1.0 - alpha)).collect()),
                        Column::Kernels(ks.iter().map(|k| k.scaled(alpha)).collect()),
                    ),
                    Column::Scalars(ws) => (
                        Column::Scalars(ws.iter().map(|w| w * (1.0 - alpha)).collect()),
                        Column::Scalars(ws.iter().map(|w| w * alpha).collect()),
                    ),
                };
                set_consumer_column(&mut out, layer, r, &keep);
                set_consumer_column(&mut out, layer, c, &give);
            }
        }
    }
    let l = &out.conv_layers[layer];
    let mut a_inc: Vec<f32> =
        (old_out..old_out + k).flat_map(|c| l.output_channel(c).iter().flat_map(|k| k.0)).collect();
    a_inc.extend_from_slice(&l.bias[old_out..]);
    let b_inc = (old_out..old_out + k).flat_map(|c| column_values(&consumer_column(&out, layer, c))).collect();
    Ok((out, AttackRecord::Expand { layer, k, strategy, alpha, sources, a_inc, b_inc }))
}

/// Removes output channels of conv layer `layer` and the matching consumer inputs.
pub fn kernels_cutoff(model: &Model, layer: usize, channels: &[usize]) -> Result<(Model, AttackRecord)> {
    check_expand_target(model, layer)?;
    let out_ch = model.conv_layers[layer].out_channels;
    let mut drop = vec![false; out_ch];
    for &c in channels {
        if c >= out_ch || std::mem::replace(&mut drop[c], true) {
            return Err(Error::InvalidArgument(format!("channel {c} out of range or repeated")));
        }
    }
    let keep: Vec<usize> = (0..out_ch).filter(|&c| !drop[c]).collect();
    if keep.is_empty() {
        return Err(Error::InvalidArgument("cannot remove every channel of a layer".into()));
    }
    let mut out = model.clone();
    remap_outputs(&mut out.conv_layers[layer], &keep);
    remap_consumer(&mut out, layer, &keep);
    let mut sorted = channels.to_vec();
    sorted.sort_unstable();
    Ok((out, AttackRecord::Cutoff { layer, channels: sorted }))
}

/// Appends `k` random channels with small random consumer weights.
pub fn kernels_supplement(model: &Model, layer: usize, k: usize, seed: u64) -> Result<(Model, AttackRecord)> {
    check_expand_target(model, layer)?;
    if k == 0 {
        return Err(Error::InvalidArgument("supplement needs k ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let old_out = model.conv_layers[layer].out_channels;
    let in_ch = model.conv_layers[layer].in_channels;
    let mut out = model.clone();
    grow(&mut out, layer, k);
    let std = (2.0 / (in_ch * KERNEL_LEN) as f32).sqrt();
    let normal = Normal::new(0.0f32, std).expect("valid std");
    let small = Normal::new(0.0f32, 0.1 * std).expect("valid std");
    for c in old_out..old_out + k {
        let l = &mut out.conv_layers[layer];
        for i in 0..in_ch {
            l.kernel_mut(c, i).0.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        }
        let col = match consumer_column(&out, layer, c) {
            Column::Kernels(ks) => Column::Kernels(
                ks.iter().map(|_| ConvKernel(std::array::from_fn(|_| small.sample(&mut rng)))).collect(),
            ),
            Column::Scalars(ws) => Column::Scalars(ws.iter().map(|_| small.sample(&mut rng)).collect()),
        };
        set_consumer_column(&mut out, layer, c, &col);
    }
    Ok((out, AttackRecord::Supplement { layer, k, seed, appended: (old_out..old_out + k).collect() }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpandStage {
    pub layer: usize,
    pub k: usize,
    pub strategy: ExpandStrategy,
    pub alpha: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum AdjustStage {
    /// Random exponents in `−range..=range` on the chosen layers (all when `None`).
    Random { range: i32, layers: Option<Vec<usize>> },
    /// Output exponent `first` on the first conv layer and `rest` on the others.
    Split { first: i32, rest: i32 },
}

/// Staged plan: expand, fine-tune, shuffle and/or rescale, prune.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub expand: Option<ExpandStage>,
    pub finetune: Option<TrainConfig>,
    pub shuffle: bool,
    pub adjust: Option<AdjustStage>,
    pub prune_fraction: Option<f64>,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Every stage off.
    pub fn disabled(seed: u64) -> Self {
        Self { expand: None, finetune: None, shuffle: false, adjust: None, prune_fraction: None, seed }
    }

    /// Default plan for a host with at least two conv layers: double the
    /// second layer, fine-tune, shuffle every layer, shrink the first layer
    /// by 2^-4 (growing the rest by 2), then prune.
    pub fn standard(prune_fraction: f64, seed: u64) -> Self {
        Self {
            expand: Some(ExpandStage { layer: 1, k: 0, strategy: ExpandStrategy::ZeroB, alpha: 0.5 }),
            finetune: Some(TrainConfig::finetune_preset(seed)),
            shuffle: true,
            adjust: Some(AdjustStage::Split { first: -4, rest: 1 }),
            prune_fraction: Some(prune_fraction),
            seed,
        }
    }
}

/// Runs the enabled stages in order. An expansion with `k == 0` doubles the
/// target layer.
pub fn synthetic_attack(
    model: &Model,
    data: Option<&Dataset>,
    config: &SyntheticConfig,
) -> Result<(Model, AttackRecord)> {
    let mut current = model.clone();
    let mut stages = Vec::new();
    let seed = config.seed;
    if let Some(e) = &config.expand {
        check_expand_target(&current, e.layer)?;
        let k = if e.k == 0 { current.conv_layers[e.layer].out_channels } else { e.k };
        let (m, r) = channel_expand(&current, e.layer, k, e.strategy, e.alpha, seed ^ 0x1)?;
        current = m;
        stages.push(r);
    }
    if let Some(cfg) = &config.finetune {
        let data = data.ok_or_else(|| Error::InvalidArgument("fine-tune stage needs attacker data".into()))?;
        let (m, r) = finetune(&current, data, cfg)?;
        current = m;
        stages.push(r);
    }
    if config.shuffle {
        let (m, r) = structure_adjust(&current, seed ^ 0x2)?;
        current = m;
        stages.push(r);
    }
    if let Some(a) = &config.adjust {
        let (m, r) = match a {
            AdjustStage::Random { range, layers } => parameter_adjust(&current, seed ^ 0x3, *range, layers.as_deref())?,
            AdjustStage::Split { first, rest } => {
                let exps: Vec<i32> =
                    (0..current.conv_layers.len()).map(|l| if l == 0 { *first } else { *rest }).collect();
                parameter_adjust_with(&current, &exps)?
            }
        };
        current = m;
        stages.push(r);
    }
    if let Some(p) = config.prune_fraction {
        let (m, r) = prune_magnitude(&current, p)?;
        current = m;
        stages.push(r);
    }
    Ok((current, AttackRecord::Composite { stages }))
}
