//! Forgery and stealth experiments: matching a forged carrier against a
//! host, searching for keys that explain host kernels, and comparing
//! parameter distributions.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, ConvKernel, Model};
use crate::watermark::{self, compute_position, hex_string, Bitmap, EmbeddingKey, HufuNet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub range_pct: f64,
    pub small_value_cutoff: f32,
    pub found_fraction: f64,
    pub forged_combined_accuracy: f32,
}

/// Magnitude below which a fraction `q` of the host's kernel values lie.
pub fn magnitude_quantile(host: &Model, q: f64) -> f32 {
    let mut mags: Vec<f32> =
        host.conv_layers.iter().flat_map(|l| l.kernels.iter().flat_map(|k| k.0)).map(f32::abs).collect();
    if mags.is_empty() {
        return 0.0;
    }
    mags.sort_by(f32::total_cmp);
    let idx = ((q.clamp(0.0, 1.0) * mags.len() as f64).floor() as usize).min(mags.len() - 1);
    mags[idx]
}

/// Every forged value above the cutoff has its host counterpart within
/// `±range·|value|`.
pub fn kernel_matches(forged: &ConvKernel, candidate: &ConvKernel, range: f64, cutoff: f32) -> bool {
    forged
        .0
        .iter()
        .zip(&candidate.0)
        .all(|(&f, &h)| f.abs() <= cutoff || ((h as f64) - (f as f64)).abs() <= range * (f as f64).abs())
}

fn l2(a: &ConvKernel, b: &ConvKernel) -> f64 {
    a.0.iter().zip(&b.0).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

/// For each kernel of the forged carrier, looks for a host kernel that
/// matches it value by value, rebuilds the forged carrier from the best
/// candidates and evaluates it. `cutoff` defaults to the host's 10% magnitude
/// quantile.
pub fn match_search(
    host: &Model,
    forged: &HufuNet,
    range_pct: f64,
    cutoff: Option<f32>,
    ds_test: &Dataset,
) -> Result<MatchReport> {
    if range_pct.is_nan() || range_pct <= 0.0 {
        return Err(Error::InvalidArgument("range must be positive".into()));
    }
    let cutoff = cutoff.unwrap_or_else(|| magnitude_quantile(host, 0.1));
    let host_kernels: Vec<&ConvKernel> = host.conv_layers.iter().flat_map(|l| l.kernels.iter()).collect();
    if host_kernels.is_empty() {
        return Err(Error::Structure("host has no conv kernels".into()));
    }
    let (mut eph, sph) = watermark::split(forged);
    let mut found = 0usize;
    for k in eph.kernels.iter_mut() {
        let best_matching = host_kernels
            .iter()
            .filter(|h| kernel_matches(k, h, range_pct, cutoff))
            .min_by(|a, b| l2(k, a).total_cmp(&l2(k, b)));
        let pick = match best_matching {
            Some(h) => {
                found += 1;
                **h
            }
            None => **host_kernels.iter().min_by(|a, b| l2(k, a).total_cmp(&l2(k, b))).expect("non-empty"),
        };
        *k = pick;
    }
    let combined = watermark::combine(&eph, &sph)?;
    Ok(MatchReport {
        range_pct,
        small_value_cutoff: cutoff,
        found_fraction: found as f64 / eph.len().max(1) as f64,
        forged_combined_accuracy: nn::evaluate(&combined, ds_test)?,
    })
}

/// Which carrier index an adversary pairs with each host kernel when
/// testing a key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IndexHypothesis {
    /// Host kernels are walked in canonical order and claimed one after
    /// another; each is tested against the next unclaimed index.
    Scan,
    /// A kernel counts if any index in `1..=max_index` maps it to its own
    /// position.
    AnyIndex { max_index: usize },
    /// Claimed positions in index order, replayed with collision probing.
    Claimed { positions: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeySearchReport {
    pub keys_tried: usize,
    pub hypothesis: IndexHypothesis,
    /// SHA-256 of the best key, hex.
    pub best_key_hash: String,
    pub max_satisfying_kernels: usize,
}

/// Number of host kernels consistent with the position rule under `key`.
pub fn correlation_count(host: &Model, key: &EmbeddingKey, hypothesis: &IndexHypothesis) -> Result<usize> {
    let kernels: Vec<&ConvKernel> = host.conv_layers.iter().flat_map(|l| l.kernels.iter()).collect();
    let n = kernels.len();
    if n == 0 {
        return Ok(0);
    }
    Ok(match hypothesis {
        IndexHypothesis::Scan => {
            let mut claimed = 0usize;
            for (p, k) in kernels.iter().enumerate() {
                if compute_position(k, claimed + 1, key, n) == p {
                    claimed += 1;
                }
            }
            claimed
        }
        IndexHypothesis::AnyIndex { max_index } => kernels
            .iter()
            .enumerate()
            .filter(|(p, k)| (1..=*max_index).any(|i| compute_position(k, i, key, n) == *p))
            .count(),
        IndexHypothesis::Claimed { positions } => {
            let mut occupied = Bitmap::new(n);
            let mut count = 0;
            for (i, &target) in positions.iter().enumerate() {
                if target >= n {
                    return Err(Error::OutOfRange(format!("claimed position {target} with {n} kernels")));
                }
                let mut pos = compute_position(kernels[target], i + 1, key, n);
                // Probing can only cycle back if every slot is taken.
                for _ in 0..n {
                    if !occupied.get(pos) {
                        break;
                    }
                    pos = (pos + 1) % n;
                }
                if pos == target {
                    count += 1;
                }
                occupied.set(target);
            }
            count
        }
    })
}

/// Best count over the given keys.
pub fn key_search_with(host: &Model, keys: &[EmbeddingKey], hypothesis: &IndexHypothesis) -> Result<KeySearchReport> {
    if keys.is_empty() {
        return Err(Error::InvalidArgument("at least one trial key is required".into()));
    }
    let mut best = (0usize, &keys[0]);
    for key in keys {
        let c = correlation_count(host, key, hypothesis)?;
        if c > best.0 {
            best = (c, key);
        }
    }
    Ok(KeySearchReport {
        keys_tried: keys.len(),
        hypothesis: hypothesis.clone(),
        best_key_hash: hex_string(&best.1.id()),
        max_satisfying_kernels: best.0,
    })
}

/// Draws `trial_keys` random keys from `seed` and reports the best count.
pub fn correlation_key_search(
    host: &Model,
    trial_keys: usize,
    seed: u64,
    hypothesis: &IndexHypothesis,
) -> Result<KeySearchReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<EmbeddingKey> = (0..trial_keys)
        .map(|_| {
            let mut bytes = [0u8; watermark::KEY_LEN];
            rng.fill_bytes(&mut bytes);
            EmbeddingKey::from_bytes(&bytes).expect("key length")
        })
        .collect();
    key_search_with(host, &keys, hypothesis)
}

/// L1 distance between normalized histograms of two value sets over their
/// joint range. Lies in [0, 2].
pub fn histogram_distance(a: &[f32], b: &[f32], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::InvalidArgument("need at least two bins".into()));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("cannot histogram an empty value set".into()));
    }
    let (lo, hi) = a.iter().chain(b).fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let width = (hi as f64 - lo as f64) / bins as f64;
    let hist = |vals: &[f32]| {
        let mut h = vec![0f64; bins];
        for &v in vals {
            let i = if width > 0.0 { (((v as f64 - lo as f64) / width) as usize).min(bins - 1) } else { 0 };
            h[i] += 1.0;
        }
        h.iter_mut().for_each(|x| *x /= vals.len() as f64);
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    Ok(ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum())
}

pub fn param_histogram_distance(a: &Model, b: &Model, bins: usize) -> Result<f64> {
    histogram_distance(&a.params(), &b.params(), bins)
}

/// Mean loss gradient over `data` with respect to every parameter.
pub fn mean_gradient(model: &Model, data: &Dataset) -> Result<Vec<f32>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sum = vec![0f64; model.parameter_count()];
    for i in 0..data.len() {
        let g = model.backward(data.image(i), data.label(i))?;
        sum.iter_mut().zip(g.values()).for_each(|(s, v)| *s += v as f64);
    }
    Ok(sum.into_iter().map(|s| (s / data.len() as f64) as f32).collect())
}

pub fn gradient_histogram_distance(a: &Model, b: &Model, data: &Dataset, bins: usize) -> Result<f64> {
    histogram_distance(&mean_gradient(a, data)?, &mean_gradient(b, data)?, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, Shape3};
    use proptest::prelude::*;

    #[test]
    fn histogram_examples() {
        assert_eq!(histogram_distance(&[0.0; 10], &[1.0; 10], 8).unwrap(), 2.0);
        assert_eq!(histogram_distance(&[0.5, 1.0], &[0.5, 1.0], 8).unwrap(), 0.0);
        assert_eq!(histogram_distance(&[3.0], &[3.0, 3.0], 4).unwrap(), 0.0);
        assert!(histogram_distance(&[1.0], &[1.0], 1).is_err());
        let a = Model::init(&Architecture::carrier_default(), 1);
        assert_eq!(param_histogram_distance(&a, &a, 50).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn histogram_distance_is_a_pseudometric(
            a in prop::collection::vec(-1.0f32..1.0, 1..40),
            b in prop::collection::vec(-1.0f32..1.0, 1..40),
            c in prop::collection::vec(-1.0f32..1.0, 1..40),
        ) {
            // Pin the joint range so all three pairs share one binning.
            let pin = |v: &[f32]| { let mut v = v.to_vec(); v.extend([-1.0, 1.0]); v };
            let (a, b, c) = (pin(&a), pin(&b), pin(&c));
            let d = |x: &[f32], y: &[f32]| histogram_distance(x, y, 16).unwrap();
            prop_assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-12);
            prop_assert_eq!(d(&a, &a), 0.0);
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-12);
            prop_assert!(d(&a, &b) <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn single_kernel_host_always_correlates() {
        let host = Model::init(&Architecture::relu(Shape3::new(1, 4, 4), &[1], 2), 0);
        let rep = correlation_key_search(&host, 1, 0, &IndexHypothesis::Scan).unwrap();
        assert_eq!(rep.max_satisfying_kernels, 1);
        assert!(correlation_key_search(&host, 0, 0, &IndexHypothesis::Scan).is_err());
    }

    #[test]
    fn owner_claim_is_fully_consistent() {
        let host = Model::init(&Architecture::host_default(), 2);
        let carrier = HufuNet { model: Model::init(&Architecture::carrier_default(), 3), acc_ori: 1.0 };
        let (eph, _) = watermark::split(&carrier);
        let key = EmbeddingKey::from_seed(8);
        let (wm, rec, _) = watermark::embed(&host, &eph, &key).unwrap();
        let claim = IndexHypothesis::Claimed { positions: rec.positions.clone() };
        assert_eq!(correlation_count(&wm, &key, &claim).unwrap(), eph.len());
        assert!(correlation_count(&wm, &EmbeddingKey::from_seed(9), &claim).unwrap() < eph.len());
    }

    #[test]
    fn match_rule_respects_cutoff_and_range() {
        let f = ConvKernel([1.0, -2.0, 0.01, 0.0, 0.0, 0.0, 0.0, 0.0, 4.0]);
        let mut h = f;
        h.0[0] = 1.2;
        h.0[2] = 5.0;
        assert!(kernel_matches(&f, &h, 0.25, 0.05));
        assert!(!kernel_matches(&f, &h, 0.1, 0.05));
        assert!(!kernel_matches(&f, &h, 0.25, 0.0));
    }
}
