//! Carrier generation, keyed embedding of the carrier's conv kernels into a
//! host, extraction and ownership verification.
//!
//! Embedding positions come from `HMAC-SHA256(key, xorpmv(kernel) ⊕ i) mod N`
//! with linear probing on collision. Extraction replays the same loop from
//! the owner's copy of the kernels, so the suspect's values never influence
//! where we look.

use hmac::{Hmac, KeyInit, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::io::{kernel_at, KernelAddress};
use crate::nn::{self, Architecture, ConvKernel, DenseLayer, FreezeMask, Model, TrainConfig, TrainReport};
use crate::restore::{self, RestoreReport};

/// Default ownership threshold on the relative accuracy difference.
pub const DEFAULT_TAU: f32 = 0.15;

pub const KEY_LEN: usize = 64;

#[derive(Clone, PartialEq, Eq)]
pub struct EmbeddingKey([u8; KEY_LEN]);

impl std::fmt::Debug for EmbeddingKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EmbeddingKey({})", hex_string(&self.id()[..8]))
    }
}

impl EmbeddingKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let arr: [u8; KEY_LEN] = bytes
            .try_into()
            .map_err(|_| Error::InvalidArgument(format!("key must be {KEY_LEN} bytes, got {}", bytes.len())))?;
        Ok(Self(arr))
    }

    /// Deterministic key for tests and simulations.
    pub fn from_seed(seed: u64) -> Self {
        let mut bytes = [0u8; KEY_LEN];
        ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; KEY_LEN] {
        &self.0
    }

    /// SHA-256 of the key; safe to publish.
    pub fn id(&self) -> [u8; 32] {
        Sha256::digest(self.0).into()
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// A trained carrier network plus the accuracy it had on the public test set
/// when it was created.
#[derive(Clone, Debug, PartialEq)]
pub struct HufuNet {
    pub model: Model,
    pub acc_ori: f32,
}

/// Embedded piece: every conv kernel of the carrier in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Eph {
    pub kernels: Vec<ConvKernel>,
    pub carrier_arch: Architecture,
}

impl Eph {
    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn bits_eq(&self, other: &Eph) -> bool {
        self.len() == other.len() && self.kernels.iter().zip(&other.kernels).all(|(a, b)| a.bits_eq(b))
    }
}

/// Secret piece: the dense head and the conv biases. Has no forward pass of
/// its own; it must be combined with an [`Eph`].
#[derive(Clone, Debug, PartialEq)]
pub struct Sph {
    pub(crate) head: DenseLayer,
    pub(crate) conv_biases: Vec<Vec<f32>>,
}

pub fn generate_hufunet(
    arch: &Architecture,
    init_seed: u64,
    config: &TrainConfig,
    ds: &Dataset,
    ds_test: &Dataset,
) -> Result<HufuNet> {
    if ds.sample_shape() != ds_test.sample_shape() || ds.class_count() != ds_test.class_count() {
        return Err(Error::InvalidArgument("carrier train and test sets disagree on shape or classes".into()));
    }
    let init = Model::init(arch, init_seed);
    let (model, _) = nn::train(&init, ds, config, &FreezeMask::none(&init))?;
    let acc_ori = nn::evaluate(&model, ds_test)?;
    Ok(HufuNet { model, acc_ori })
}

pub fn split(hufu: &HufuNet) -> (Eph, Sph) {
    let m = &hufu.model;
    let eph = Eph {
        kernels: m.conv_layers.iter().flat_map(|l| l.kernels.iter().copied()).collect(),
        carrier_arch: m.architecture(),
    };
    let sph = Sph { head: m.head.clone(), conv_biases: m.conv_layers.iter().map(|l| l.bias.clone()).collect() };
    (eph, sph)
}

/// Reassembles a forward-capable carrier from its two pieces.
pub fn combine(eph: &Eph, sph: &Sph) -> Result<Model> {
    let arch = &eph.carrier_arch;
    if eph.kernels.len() != arch.kernel_count() {
        return Err(Error::Structure(format!(
            "EPH holds {} kernels, carrier needs {}",
            eph.kernels.len(),
            arch.kernel_count()
        )));
    }
    if sph.conv_biases.len() != arch.conv.len() {
        return Err(Error::Structure("SPH does not belong to this carrier".into()));
    }
    let mut model = Model::init(arch, 0);
    let mut next = 0;
    for (layer, bias) in model.conv_layers.iter_mut().zip(&sph.conv_biases) {
        let count = layer.kernels.len();
        layer.kernels.copy_from_slice(&eph.kernels[next..next + count]);
        next += count;
        if bias.len() != layer.bias.len() {
            return Err(Error::Structure("SPH bias length mismatch".into()));
        }
        layer.bias.clone_from(bias);
    }
    model.head = sph.head.clone();
    model.validate()?;
    Ok(model)
}

/// XOR of the nine IEEE-754 bit patterns, row-major.
pub fn xorpmv(kernel: &ConvKernel) -> u32 {
    kernel.0.iter().fold(0u32, |acc, v| acc ^ v.to_bits())
}

pub fn hmac_sha256(key: &[u8], message: &[u8]) -> [u8; 32] {
    let mut mac = <Hmac<Sha256> as KeyInit>::new_from_slice(key).expect("HMAC accepts keys of any length");
    mac.update(message);
    mac.finalize().into_bytes().into()
}

/// The 8-byte big-endian message hashed for kernel `index` (1-based).
pub fn position_message(kernel: &ConvKernel, index: usize) -> [u8; 8] {
    (u64::from(xorpmv(kernel)) ^ index as u64).to_be_bytes()
}

/// First eight digest bytes, big-endian.
pub fn position_digest(kernel: &ConvKernel, index: usize, key: &EmbeddingKey) -> u64 {
    let digest = hmac_sha256(key.as_bytes(), &position_message(kernel, index));
    u64::from_be_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// Raw embedding position before probing.
pub fn compute_position(kernel: &ConvKernel, index: usize, key: &EmbeddingKey, n: usize) -> usize {
    assert!(n >= 1, "host must hold at least one kernel");
    (position_digest(kernel, index, key) % n as u64) as usize
}

/// Bit-packed occupancy map over the host's flat kernel positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Bitmap {
    len: usize,
    words: Vec<u8>,
}

impl Bitmap {
    pub fn new(len: usize) -> Self {
        Self { len, words: vec![0; len.div_ceil(8)] }
    }

    pub fn from_bytes(len: usize, words: Vec<u8>) -> Result<Self> {
        if words.len() != len.div_ceil(8) {
            return Err(Error::InvalidArgument("bitmap byte length does not match bit count".into()));
        }
        Ok(Self { len, words })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 8] & (1 << (i % 8)) != 0
    }

    pub fn set(&mut self, i: usize) {
        self.words[i / 8] |= 1 << (i % 8);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.words
    }
}

/// The owner's proof material. Holds a hash of the key, never the key.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EmbeddingRecord {
    pub key_id: [u8; 32],
    pub host_kernels: usize,
    /// Flat host position of each EPH kernel, in EPH order.
    pub positions: Vec<usize>,
    pub bitmap: Bitmap,
}

impl EmbeddingRecord {
    pub fn validate(&self) -> Result<()> {
        if self.bitmap.len() != self.host_kernels {
            return Err(Error::InvalidArgument("bitmap length differs from host kernel count".into()));
        }
        let mut seen = Bitmap::new(self.host_kernels);
        for &p in &self.positions {
            if p >= self.host_kernels || seen.get(p) || !self.bitmap.get(p) {
                return Err(Error::InvalidArgument(format!("invalid or duplicate position {p}")));
            }
            seen.set(p);
        }
        if self.bitmap.count_ones() != self.positions.len() {
            return Err(Error::InvalidArgument("bitmap has bits set outside the position list".into()));
        }
        Ok(())
    }
}

/// Runs the position loop: hash each kernel with its 1-based index, then
/// probe forward until a free slot turns up.
pub fn locate(kernels: &[ConvKernel], key: &EmbeddingKey, n: usize) -> Result<(Vec<usize>, Bitmap)> {
    if kernels.len() > n {
        return Err(Error::Capacity { needed: kernels.len(), available: n });
    }
    let mut bitmap = Bitmap::new(n);
    let mut positions = Vec::with_capacity(kernels.len());
    for (i, kernel) in kernels.iter().enumerate() {
        let mut pos = compute_position(kernel, i + 1, key, n);
        while bitmap.get(pos) {
            pos = (pos + 1) % n;
        }
        bitmap.set(pos);
        positions.push(pos);
    }
    Ok((positions, bitmap))
}

fn address(model: &Model, flat: usize) -> Result<KernelAddress> {
    kernel_at(&model.architecture(), flat)
}

/// Writes the EPH kernels into the host and returns the watermarked model,
/// the proof record and a mask freezing exactly the embedded kernels.
pub fn embed(host: &Model, eph: &Eph, key: &EmbeddingKey) -> Result<(Model, EmbeddingRecord, FreezeMask)> {
    let n = host.kernel_count();
    let (positions, bitmap) = locate(&eph.kernels, key, n)?;
    let mut wm = host.clone();
    let mut mask = FreezeMask::none(host);
    for (kernel, &pos) in eph.kernels.iter().zip(&positions) {
        let a = address(host, pos)?;
        *wm.conv_layers[a.layer].kernel_mut(a.out_channel, a.in_channel) = *kernel;
        mask.set(a.layer, a.out_channel, a.in_channel, host, true)?;
    }
    let record = EmbeddingRecord { key_id: key.id(), host_kernels: n, positions, bitmap };
    Ok((wm, record, mask))
}

/// Trains the watermarked host with the embedded kernels frozen.
pub fn train_watermarked(
    host_wm: &Model,
    mask: &FreezeMask,
    data: &Dataset,
    config: &TrainConfig,
) -> Result<(Model, TrainReport)> {
    nn::train(host_wm, data, config, mask)
}

/// Reads the kernels at the positions the owner's EPH maps to.
pub fn extract(suspect: &Model, eph_local: &Eph, key: &EmbeddingKey) -> Result<Eph> {
    let n = suspect.kernel_count();
    let expected = eph_local.carrier_arch.kernel_count().max(eph_local.len());
    if n < expected {
        return Err(Error::KernelCountMismatch { expected, found: n });
    }
    let (positions, _) = locate(&eph_local.kernels, key, n)?;
    let kernels = positions
        .iter()
        .map(|&p| {
            let a = address(suspect, p)?;
            Ok(*suspect.conv_layers[a.layer].kernel(a.out_channel, a.in_channel))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Eph { kernels, carrier_arch: eph_local.carrier_arch.clone() })
}

/// Like [`extract`], but also checks the suspect's kernel count against the
/// one recorded at embedding time.
pub fn extract_with_record(
    suspect: &Model,
    eph_local: &Eph,
    key: &EmbeddingKey,
    record: &EmbeddingRecord,
) -> Result<Eph> {
    if suspect.kernel_count() != record.host_kernels {
        return Err(Error::KernelCountMismatch { expected: record.host_kernels, found: suspect.kernel_count() });
    }
    extract(suspect, eph_local, key)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RestoreApplied {
    None,
    Reorder,
    Scale,
    Cutoff,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub acc_ori: f32,
    pub acc_combined: f32,
    pub diff_acc: f32,
    pub tau: f32,
    pub verdict: bool,
    pub restore_applied: RestoreApplied,
}

impl VerificationReport {
    fn new(acc_ori: f32, acc_combined: f32, tau: f32, restore_applied: RestoreApplied) -> Self {
        let diff_acc = (acc_ori - acc_combined).abs() / acc_ori;
        Self { acc_ori, acc_combined, diff_acc, tau, verdict: diff_acc < tau, restore_applied }
    }
}

/// Extracts, recombines with the local SPH and compares accuracies.
pub fn verify(
    suspect: &Model,
    hufu_local: &HufuNet,
    key: &EmbeddingKey,
    ds_test: &Dataset,
    tau: f32,
) -> Result<VerificationReport> {
    verify_inner(suspect, hufu_local, key, ds_test, tau, RestoreApplied::None)
}

fn verify_inner(
    suspect: &Model,
    hufu_local: &HufuNet,
    key: &EmbeddingKey,
    ds_test: &Dataset,
    tau: f32,
    restore_applied: RestoreApplied,
) -> Result<VerificationReport> {
    if ds_test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if hufu_local.acc_ori.is_nan() || hufu_local.acc_ori <= 0.0 {
        return Err(Error::InvalidArgument("carrier accuracy must be positive".into()));
    }
    let (eph, sph) = split(hufu_local);
    let retrieved = extract(suspect, &eph, key)?;
    let combined = combine(&retrieved, &sph)?;
    let acc_combined = nn::evaluate(&combined, ds_test)?;
    Ok(VerificationReport::new(hufu_local.acc_ori, acc_combined, tau, restore_applied))
}

/// Restores the suspect against the owner's watermarked reference, then
/// verifies the restored model.
pub fn verify_restored(
    suspect: &Model,
    reference_fwm: &Model,
    mode: RestoreApplied,
    hufu_local: &HufuNet,
    key: &EmbeddingKey,
    ds_test: &Dataset,
    tau: f32,
) -> Result<(VerificationReport, Option<RestoreReport>)> {
    let (restored, report) = match mode {
        RestoreApplied::None => (suspect.clone(), None),
        RestoreApplied::Reorder => {
            let (m, r) = restore::reorder_restore(suspect, reference_fwm)?;
            (m, Some(r))
        }
        RestoreApplied::Scale => {
            let (m, r) = restore::scale_restore(suspect, reference_fwm)?;
            (m, Some(r))
        }
        RestoreApplied::Cutoff => {
            let (m, r) = restore::cutoff_restore(suspect, reference_fwm)?;
            (m, Some(r))
        }
        RestoreApplied::Full => {
            let (m, r) = restore::full_restore(suspect, reference_fwm)?;
            (m, Some(r))
        }
    };
    Ok((verify_inner(&restored, hufu_local, key, ds_test, tau, mode)?, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Shape3;

    fn kernel(vals: &[f32]) -> ConvKernel {
        let mut k = ConvKernel::ZERO;
        k.0[..vals.len()].copy_from_slice(vals);
        k
    }

    #[test]
    fn xorpmv_examples() {
        assert_eq!(xorpmv(&ConvKernel::ZERO), 0);
        assert_eq!(xorpmv(&kernel(&[0.37, 0.0, 0.0, 0.37])), 0);
        assert_eq!(xorpmv(&kernel(&[1.0])), 0x3F80_0000);
    }

    #[test]
    fn position_message_layout() {
        assert_eq!(position_message(&kernel(&[1.0]), 1), [0, 0, 0, 0, 0x3F, 0x80, 0, 1]);
        assert_eq!(position_message(&kernel(&[1.0]), 0x3F80_0000), [0; 8]);
    }

    #[test]
    fn single_slot_host_maps_everything_to_zero() {
        let key = EmbeddingKey::from_seed(1);
        for i in 1..20 {
            assert_eq!(compute_position(&kernel(&[i as f32]), i, &key, 1), 0);
        }
        let k = kernel(&[0.5, -2.0]);
        assert_eq!(compute_position(&k, 3, &key, 97), compute_position(&k, 3, &key, 97));
    }

    #[test]
    fn key_validation() {
        assert!(EmbeddingKey::from_bytes(&[0u8; 63]).is_err());
        let k = EmbeddingKey::from_bytes(&[7u8; 64]).unwrap();
        assert_eq!(k.id(), EmbeddingKey::from_bytes(&[7u8; 64]).unwrap().id());
        assert!(!format!("{k:?}").contains("0707"));
    }

    #[test]
    fn collision_probes_to_next_free_slot() {
        // Kernel values chosen so that xorpmv(k1) ⊕ 1 == xorpmv(k2) ⊕ 2:
        // identical messages, hence identical raw positions.
        let k1 = kernel(&[f32::from_bits(0x3F80_0000)]);
        let k2 = kernel(&[f32::from_bits(0x3F80_0003)]);
        assert_eq!(position_message(&k1, 1), position_message(&k2, 2));
        let key = EmbeddingKey::from_seed(9);
        let n = 50;
        let raw = compute_position(&k1, 1, &key, n);
        assert_eq!(raw, compute_position(&k2, 2, &key, n));
        let (positions, bitmap) = locate(&[k1, k2], &key, n).unwrap();
        assert_eq!(positions, vec![raw, (raw + 1) % n]);
        assert_eq!(bitmap.count_ones(), 2);
    }

    #[test]
    fn full_capacity_is_a_permutation() {
        let arch = Architecture::relu(Shape3::new(1, 4, 4), &[2, 3], 2);
        let host = Model::init(&arch, 1);
        let n = host.kernel_count();
        let eph = Eph {
            kernels: (0..n).map(|i| kernel(&[i as f32 + 0.5, -(i as f32)])).collect(),
            carrier_arch: Architecture::relu(Shape3::new(1, 4, 4), &[2, 3], 2),
        };
        let key = EmbeddingKey::from_seed(2);
        let (wm, record, mask) = embed(&host, &eph, &key).unwrap();
        let mut sorted = record.positions.clone();
        sorted.sort();
        assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        assert_eq!(mask.frozen_count(), n);
        record.validate().unwrap();
        assert!(extract(&wm, &eph, &key).unwrap().bits_eq(&eph));
    }

    #[test]
    fn over_capacity_is_rejected() {
        let arch = Architecture::relu(Shape3::new(1, 4, 4), &[2], 2);
        let host = Model::init(&arch, 1);
        let eph = Eph { kernels: vec![ConvKernel::ZERO; 3], carrier_arch: arch.clone() };
        assert!(matches!(
            embed(&host, &eph, &EmbeddingKey::from_seed(0)),
            Err(Error::Capacity { needed: 3, available: 2 })
        ));
    }

    #[test]
    fn split_combine_round_trip() {
        let m = Model::init(&Architecture::carrier_default(), 4);
        let h = HufuNet { model: m.clone(), acc_ori: 0.5 };
        let (eph, sph) = split(&h);
        assert_eq!(eph.len(), m.kernel_count());
        assert!(combine(&eph, &sph).unwrap().bits_eq(&m));
    }

    #[test]
    fn extract_rejects_too_small_suspect() {
        let carrier = Model::init(&Architecture::carrier_default(), 4);
        let (eph, _) = split(&HufuNet { model: carrier, acc_ori: 1.0 });
        let small = Model::init(&Architecture::relu(Shape3::new(1, 12, 12), &[2, 2], 4), 0);
        assert!(matches!(extract(&small, &eph, &EmbeddingKey::from_seed(0)), Err(Error::KernelCountMismatch { .. })));
    }
}
