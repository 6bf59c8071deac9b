//! End-to-end acceptance checks on the default toy carrier and host. Each
//! test prints one `criterion NN [PASS|FAIL]` line before asserting.

use std::io::Write;
use std::sync::OnceLock;

use hufu::attacks::{self, AttackRecord, ExpandStrategy, SyntheticConfig};
use hufu::audit::{self, IndexHypothesis};
use hufu::datasets::{synth_generate, Dataset, PatternFamily, SynthConfig};
use hufu::linalg::max_weight_assignment;
use hufu::nn::{self, Activation, Architecture, FreezeMask, Model, Shape3, Tensor, TrainConfig};
use hufu::restore::{self, ChannelVector};
use hufu::watermark::{self, EmbeddingKey, EmbeddingRecord, Eph, HufuNet, RestoreApplied, DEFAULT_TAU};

const CHANCE: f32 = 0.25;

struct Fixture {
    ds_test: Dataset,
    dt: Dataset,
    dt_test: Dataset,
    attacker: Dataset,
    hufu: HufuNet,
    eph: Eph,
    key: EmbeddingKey,
    host_schedule: TrainConfig,
    plain: Model,
    wm: Model,
    record: EmbeddingRecord,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let ds = synth_generate(&SynthConfig::new(PatternFamily::Bars, 4, 100, 1)).unwrap();
        let ds_test = synth_generate(&SynthConfig::new(PatternFamily::Bars, 4, 50, 2)).unwrap();
        let dt = synth_generate(&SynthConfig::new(PatternFamily::Shapes, 4, 100, 3)).unwrap();
        let dt_test = synth_generate(&SynthConfig::new(PatternFamily::Shapes, 4, 50, 4)).unwrap();
        let attacker = synth_generate(&SynthConfig::new(PatternFamily::Shapes, 4, 100, 5)).unwrap();
        let carrier_schedule =
            TrainConfig { learning_rate: 0.2, epochs: 30, batch_size: 16, weight_decay: 0.0, seed: 0 };
        let hufu =
            watermark::generate_hufunet(&Architecture::carrier_default(), 0, &carrier_schedule, &ds, &ds_test).unwrap();
        let (eph, _) = watermark::split(&hufu);
        let key = EmbeddingKey::from_seed(42);
        let host_schedule = TrainConfig::default();
        let host0 = Model::init(&Architecture::host_default(), 0);
        let (wm0, record, mask) = watermark::embed(&host0, &eph, &key).unwrap();
        let (wm, _) = watermark::train_watermarked(&wm0, &mask, &dt, &host_schedule).unwrap();
        let (plain, _) = nn::train(&host0, &dt, &host_schedule, &FreezeMask::none(&host0)).unwrap();
        Fixture { ds_test, dt, dt_test, attacker, hufu, eph, key, host_schedule, plain, wm, record }
    })
}

/// Prints the verdict line and fails the test when any check failed.
fn report(number: u32, name: &str, checks: &[(bool, String)]) {
    let ok = checks.iter().all(|(pass, _)| *pass);
    let detail: Vec<String> =
        checks.iter().map(|(pass, what)| format!("{}{what}", if *pass { "" } else { "NOT " })).collect();
    // Written to the raw handle so the line shows up even when libtest
    // captures the output of passing tests.
    let line = format!("criterion {number:02} [{}] {name}: {}\n", if ok { "PASS" } else { "FAIL" }, detail.join("; "));
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(ok, "criterion {number} failed");
}

fn check(pass: bool, what: impl Into<String>) -> (bool, String) {
    (pass, what.into())
}

fn host_accuracy(m: &Model) -> f32 {
    nn::evaluate(m, &fixture().dt_test).unwrap()
}

fn verify_plain(m: &Model) -> watermark::VerificationReport {
    let f = fixture();
    watermark::verify(m, &f.hufu, &f.key, &f.ds_test, DEFAULT_TAU).unwrap()
}

fn verify_with(m: &Model, mode: RestoreApplied) -> (watermark::VerificationReport, restore::RestoreReport) {
    let f = fixture();
    let (v, r) = watermark::verify_restored(m, &f.wm, mode, &f.hufu, &f.key, &f.ds_test, DEFAULT_TAU).unwrap();
    (v, r.expect("restore report"))
}

#[test]
fn criterion_01_baseline_identity() {
    let f = fixture();
    let v = verify_plain(&f.wm);
    let extracted = watermark::extract(&f.wm, &f.eph, &f.key).unwrap();
    report(
        1,
        "baseline identity",
        &[
            check(v.diff_acc == 0.0 && v.verdict, format!("diff_acc {} == 0", v.diff_acc)),
            check(extracted.bits_eq(&f.eph), "extracted EPH bit-identical"),
        ],
    );
}

#[test]
fn criterion_02_fidelity() {
    let f = fixture();
    let (a, b) = (host_accuracy(&f.wm), host_accuracy(&f.plain));
    report(
        2,
        "fidelity",
        &[check((a - b).abs() <= 0.03, format!("watermarked {a:.3} vs plain {b:.3}, |delta| <= 0.03"))],
    );
}

#[test]
fn criterion_03_freeze_invariant() {
    let f = fixture();
    let kernels: Vec<_> = f.wm.conv_layers.iter().flat_map(|l| l.kernels.iter()).collect();
    let frozen_ok = f.record.positions.iter().zip(&f.eph.kernels).all(|(&p, k)| kernels[p].bits_eq(k));
    let host0 = Model::init(&Architecture::host_default(), 0);
    let init: Vec<_> = host0.conv_layers.iter().flat_map(|l| l.kernels.iter()).collect();
    let moved = (0..kernels.len()).filter(|p| !f.record.bitmap.get(*p) && !kernels[*p].bits_eq(init[*p])).count();
    report(
        3,
        "freeze invariant",
        &[
            check(
                frozen_ok,
                format!("{} embedded kernels bit-identical after {} epochs", f.eph.len(), f.host_schedule.epochs),
            ),
            check(moved == kernels.len() - f.eph.len(), format!("{moved} free kernels trained")),
        ],
    );
}

/// Logit agreement relative to the largest logit magnitude of each sample.
fn logits_close(a: &Model, b: &Model, rel: f32) -> bool {
    let d = &fixture().dt_test;
    (0..d.len()).all(|i| {
        let (x, y) = (a.forward(d.image(i)).unwrap(), b.forward(d.image(i)).unwrap());
        let scale = x.iter().chain(&y).fold(1e-6f32, |m, v| m.max(v.abs()));
        x.iter().zip(&y).all(|(p, q)| (p - q).abs() <= rel * scale)
    })
}

fn logits_bit_equal(a: &Model, b: &Model) -> bool {
    let d = &fixture().dt_test;
    (0..d.len()).all(|i| {
        let (x, y) = (a.forward(d.image(i)).unwrap(), b.forward(d.image(i)).unwrap());
        x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits())
    })
}

#[test]
fn criterion_04_structure_adjustment() {
    let f = fixture();
    let (shuffled, _) = attacks::structure_adjust(&f.wm, 7).unwrap();
    let direct = verify_plain(&shuffled);
    let (restored, _) = restore::reorder_restore(&shuffled, &f.wm).unwrap();
    let extracted = watermark::extract(&restored, &f.eph, &f.key).unwrap();
    let (v, _) = verify_with(&shuffled, RestoreApplied::Reorder);
    report(
        4,
        "structure adjustment",
        &[
            check(logits_close(&shuffled, &f.wm, 1e-5), "shuffle preserves logits within 1e-5"),
            check(
                direct.acc_combined <= CHANCE + 0.15,
                format!("unrestored combined {:.3} <= chance+0.15", direct.acc_combined),
            ),
            check(extracted.bits_eq(&f.eph), "restored EPH bit-exact"),
            check(v.diff_acc <= 1e-5 && v.verdict, format!("restored diff_acc {}", v.diff_acc)),
        ],
    );
}

#[test]
fn criterion_05_parameter_adjustment() {
    let f = fixture();
    let (scaled, rec) = attacks::parameter_adjust(&f.wm, 7, attacks::DEFAULT_EXPONENT_RANGE, None).unwrap();
    let AttackRecord::Parameter { exponents } = rec else { unreachable!() };
    let (restored, rep) = restore::scale_restore(&scaled, &f.wm).unwrap();
    let mut worst = 0.0f64;
    let mut prev = 0;
    for (l, &n) in exponents.iter().enumerate() {
        let truth = 2f64.powi(n - prev);
        for (i, &c) in rep.kernel_factors[l].iter().enumerate() {
            let skipped = rep
                .scale_skipped
                .iter()
                .any(|a| a.layer == l && a.out_channel * f.wm.conv_layers[l].in_channels + a.in_channel == i);
            if !skipped {
                worst = worst.max((c - truth).abs() / truth);
            }
        }
        prev = n;
    }
    let extracted = watermark::extract(&restored, &f.eph, &f.key).unwrap();
    let v = verify_plain(&restored);
    report(
        5,
        "parameter adjustment",
        &[
            check(logits_bit_equal(&scaled, &f.wm), format!("exponents {exponents:?} keep logits bit-identical")),
            check(worst <= 1e-6, format!("worst factor error {worst:e} <= 1e-6")),
            check(extracted.bits_eq(&f.eph), "restored EPH bit-exact"),
            check(v.verdict && v.diff_acc == 0.0, format!("restored diff_acc {}", v.diff_acc)),
        ],
    );
}

#[test]
fn criterion_06_channel_expansion() {
    let f = fixture();
    let mut checks = Vec::new();
    for (layer, strategy) in [(1, ExpandStrategy::ZeroB), (0, ExpandStrategy::DuplicateSplit)] {
        let k = f.wm.conv_layers[layer].out_channels;
        let (expanded, _) = attacks::channel_expand(&f.wm, layer, k, strategy, 0.5, 3).unwrap();
        let (attacked, _) = attacks::structure_adjust(&expanded, 9).unwrap();
        let (v, r) = verify_with(&attacked, RestoreApplied::Full);
        checks.push(check(
            v.verdict && r.restored_rate == 1.0,
            format!("{strategy:?} x{k} on layer {layer}: verdict {} rate {}", v.verdict, r.restored_rate),
        ));
    }
    report(6, "channel expansion", &checks);
}

#[test]
fn criterion_07_pruning() {
    let f = fixture();
    let (p10, _) = attacks::prune_magnitude(&f.wm, 0.1).unwrap();
    let (p90, _) = attacks::prune_magnitude(&f.wm, 0.9).unwrap();
    let (v10, v90) = (verify_plain(&p10), verify_plain(&p90));
    let host90 = host_accuracy(&p90);
    report(
        7,
        "pruning robustness and limit",
        &[
            check(v10.verdict, format!("10%: verdict positive, combined {:.3}", v10.acc_combined)),
            check(
                host90 <= CHANCE + 0.15,
                format!(
                    "90%: host {host90:.3} <= chance+0.15 (watermark verdict {}, combined {:.3})",
                    v90.verdict, v90.acc_combined
                ),
            ),
        ],
    );
}

#[test]
fn criterion_08_kernels_cutoff() {
    let f = fixture();
    let (cut, _) = attacks::kernels_cutoff(&f.wm, 0, &[1]).unwrap();
    let drop = host_accuracy(&f.wm) - host_accuracy(&cut);
    let (v, r) = verify_with(&cut, RestoreApplied::Cutoff);
    report(
        8,
        "kernels cutoff",
        &[
            check(drop <= 0.10, format!("1 of 8 channels cut, host drop {drop:.3} <= 0.10")),
            check(
                v.verdict,
                format!("restored verdict positive, combined {:.3}, zero-filled {:?}", v.acc_combined, r.zero_filled),
            ),
        ],
    );
}

#[test]
fn criterion_09_synthetic_attack() {
    let f = fixture();
    let (a10, _) = attacks::synthetic_attack(&f.wm, Some(&f.attacker), &SyntheticConfig::standard(0.1, 11)).unwrap();
    let (v10, r10) = verify_with(&a10, RestoreApplied::Full);
    let (a50, _) = attacks::synthetic_attack(&f.wm, Some(&f.attacker), &SyntheticConfig::standard(0.5, 11)).unwrap();
    let (v50, _) = verify_with(&a50, RestoreApplied::Full);
    let host50 = host_accuracy(&a50);
    report(
        9,
        "synthetic attack",
        &[
            check(
                v10.verdict && r10.restored_rate >= 0.95,
                format!("10%: verdict {} rate {:.4} (host {:.3})", v10.verdict, r10.restored_rate, host_accuracy(&a10)),
            ),
            check(host50 <= CHANCE + 0.10, format!("50%: host {host50:.3} <= chance+0.10 (verdict {})", v50.verdict)),
        ],
    );
}

#[test]
fn criterion_10_integrity() {
    let f = fixture();
    let mut positives = 0;
    let mut accs = Vec::new();
    for seed in 100..110 {
        let init = Model::init(&Architecture::host_default(), seed);
        let cfg = TrainConfig { seed, ..f.host_schedule.clone() };
        let (innocent, _) = nn::train(&init, &f.dt, &cfg, &FreezeMask::none(&init)).unwrap();
        let v = verify_plain(&innocent);
        positives += usize::from(v.verdict);
        accs.push(v.acc_combined);
    }
    let in_band = accs.iter().all(|&a| (a - CHANCE).abs() <= 0.15);
    report(
        10,
        "integrity",
        &[
            check(positives == 0, format!("{positives}/10 innocent models claimed")),
            check(in_band, format!("combined accuracies {accs:?} within chance +/- 0.15")),
        ],
    );
}

#[test]
fn criterion_11_key_search() {
    let f = fixture();
    let random = audit::correlation_key_search(&f.wm, 100, 1, &IndexHypothesis::Scan).unwrap();
    let owner =
        audit::correlation_count(&f.wm, &f.key, &IndexHypothesis::Claimed { positions: f.record.positions.clone() })
            .unwrap();
    report(
        11,
        "key search statistics",
        &[
            check(
                random.max_satisfying_kernels <= 5,
                format!("100 random keys: max {} <= 5", random.max_satisfying_kernels),
            ),
            check(owner >= f.eph.len(), format!("owner key: {owner} >= n = {}", f.eph.len())),
        ],
    );
}

fn unhex(s: &str) -> Vec<u8> {
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap()).collect()
}

#[test]
fn criterion_12_hmac_known_answers() {
    // RFC 4231 test cases 1, 2, 3, 4, 6 and 7 (full-length outputs).
    let vectors: [(Vec<u8>, Vec<u8>, &str); 6] = [
        (vec![0x0b; 20], b"Hi There".to_vec(), "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"),
        (b"Jefe".to_vec(), b"what do ya want for nothing?".to_vec(), "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"),
        (vec![0xaa; 20], vec![0xdd; 50], "773ea91e36800e46854db8ebd09181a72959098b3ef8c122d9635514ced565fe"),
        (
            unhex("0102030405060708090a0b0c0d0e0f10111213141516171819"),
            vec![0xcd; 50],
            "82558a389a443c0ea4cc819899f2083a85f0faa3e578f8077a2e3ff46729665b",
        ),
        (
            vec![0xaa; 131],
            b"Test Using Larger Than Block-Size Key - Hash Key First".to_vec(),
            "60e431591ee0b67f0d8a26aacbf5b77f8e0bc6213728c5140546040f0ee37f54",
        ),
        (
            vec![0xaa; 131],
            b"This is a test using a larger than block-size key and a larger than block-size data. The key needs to be hashed before being used by the HMAC algorithm.".to_vec(),
            "9b09ffa71b942fcb27635fbcd5b0e944bfdc63644f0713938a7f51535c3a35e2",
        ),
    ];
    let mut checks: Vec<(bool, String)> = vectors
        .iter()
        .enumerate()
        .map(|(i, (k, m, d))| check(watermark::hmac_sha256(k, m).to_vec() == unhex(d), format!("vector {}", i + 1)))
        .collect();
    // Position digests computed independently with Python's hmac module.
    let key = EmbeddingKey::from_bytes(&(0u8..64).collect::<Vec<_>>()).unwrap();
    let mut k1 = hufu::nn::ConvKernel::ZERO;
    k1.0[0] = 1.0;
    let mut k2 = hufu::nn::ConvKernel::ZERO;
    k2.0[0] = 0.5;
    k2.0[1] = -2.0;
    checks.push(check(
        watermark::position_digest(&k1, 1, &key) == 12688067601207026805
            && watermark::compute_position(&k1, 1, &key, 392) == 21
            && watermark::compute_position(&k1, 1, &key, 97) == 33,
        "position digest (kernel e0, index 1)",
    ));
    checks.push(check(
        watermark::position_digest(&k2, 3, &key) == 18288989353704200686
            && watermark::compute_position(&k2, 3, &key, 392) == 310,
        "position digest (kernel 0.5,-2, index 3)",
    ));
    report(12, "HMAC known answers", &checks);
}

fn loss(model: &Model, x: &Tensor, y: usize) -> f64 {
    let logits: Vec<f64> = model.forward(x).unwrap().iter().map(|&v| v as f64).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - logits[y]
}

/// Worst per-component relative error of backprop against central
/// differences, plus the number of components skipped because a ReLU kink
/// lies inside the probe interval (one-sided slopes disagree). Smooth
/// models are never skipped.
fn finite_difference_check(model: &Model, seed: u64, h: f32, piecewise: bool) -> (f64, usize, usize) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let shape = model.input_shape;
    let x = Tensor::new(shape.dims(), (0..shape.len()).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let y = 1;
    let grad = model.backward(&x, y).unwrap().values();
    let base = loss(model, &x, y);
    let shifted = |index: usize, delta: f32| {
        let mut m = model.clone();
        let mut i = 0;
        m.for_each_param_mut(|v| {
            if i == index {
                *v += delta;
            }
            i += 1;
        });
        loss(&m, &x, y)
    };
    let (mut worst, mut kinks) = (0.0f64, 0);
    for (i, &g) in grad.iter().enumerate() {
        let (plus, minus) = (shifted(i, h), shifted(i, -h));
        let (right, left) = ((plus - base) / h as f64, (base - minus) / h as f64);
        if piecewise && (right - left).abs() > 1e-2 * right.abs().max(left.abs()).max(1e-2) {
            kinks += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * h as f64);
        worst = worst.max((numeric - g as f64).abs() / numeric.abs().max(g.abs() as f64).max(1e-2));
    }
    (worst, kinks, grad.len())
}

#[test]
fn criterion_13_numerical_soundness() {
    let mut checks = Vec::new();
    let mut arch = Architecture::relu(Shape3::new(1, 5, 5), &[3, 4], 3);
    for activation in [Activation::Relu, Activation::Sigmoid] {
        arch.conv.iter_mut().for_each(|c| c.activation = activation);
        for seed in [7, 8, 9] {
            let m = Model::init(&arch, seed);
            let (worst, kinks, total) = finite_difference_check(&m, seed, 1e-3, activation == Activation::Relu);
            checks.push(check(
                total <= 500 && worst < 1e-2 && kinks * 20 <= total,
                format!("{activation:?} seed {seed}: {total} components, worst rel err {worst:.2e}, {kinks} at a kink"),
            ));
        }
    }

    let mut exact = 0;
    for seed in 0..50u64 {
        let m = Model::init(&Architecture::host_default(), 1000 + seed);
        let (shuffled, rec) = attacks::structure_adjust(&m, seed).unwrap();
        let AttackRecord::Structure { permutations } = rec else { unreachable!() };
        let (restored, rep) = restore::reorder_restore(&shuffled, &m).unwrap();
        let maps_ok = permutations
            .iter()
            .zip(&rep.channel_maps)
            .all(|(perm, map)| perm.iter().enumerate().all(|(new, &old)| map[old] == Some(new)));
        exact += usize::from(restored.bits_eq(&m) && maps_ok);
    }
    checks.push(check(exact == 50, format!("{exact}/50 permuted models restored exactly")));
    let v = ChannelVector::new(vec![0.3, -1.0, 2.0]);
    let cos_ok = (restore::cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12;
    let planted = max_weight_assignment(&[vec![0.1, 0.9], vec![0.8, 0.2]]) == vec![Some(1), Some(0)];
    checks.push(check(cos_ok && planted, "cosine self-similarity and planted assignment"));
    report(13, "numerical soundness", &checks);
}

#[test]
fn criterion_14_match_search_monotone() {
    let f = fixture();
    let ds = synth_generate(&SynthConfig::new(PatternFamily::Bars, 4, 100, 1)).unwrap();
    let schedule = TrainConfig { learning_rate: 0.2, epochs: 30, batch_size: 16, weight_decay: 0.0, seed: 77 };
    let forged = watermark::generate_hufunet(&Architecture::carrier_default(), 77, &schedule, &ds, &f.ds_test).unwrap();
    let (forged_eph, _) = watermark::split(&forged);
    let cutoff = audit::magnitude_quantile(&f.wm, 0.1);
    let host_kernels: Vec<_> = f.wm.conv_layers.iter().flat_map(|l| l.kernels.iter()).collect();
    let mut fractions = Vec::new();
    let mut brute_ok = true;
    for range in [0.25, 0.5, 0.75, 0.9] {
        let rep = audit::match_search(&f.wm, &forged, range, None, &f.ds_test).unwrap();
        let brute = forged_eph
            .kernels
            .iter()
            .filter(|k| {
                host_kernels.iter().any(|h| {
                    (0..9).all(|j| {
                        k.0[j].abs() <= cutoff || ((h.0[j] - k.0[j]) as f64).abs() <= range * k.0[j].abs() as f64
                    })
                })
            })
            .count() as f64
            / forged_eph.len() as f64;
        brute_ok &= brute == rep.found_fraction;
        fractions.push(rep.found_fraction);
    }
    let own = audit::match_search(&f.wm, &f.hufu, 0.25, None, &f.ds_test).unwrap();
    report(
        14,
        "match-search monotonicity",
        &[
            check(fractions.windows(2).all(|w| w[0] <= w[1]), format!("found fractions {fractions:?} nondecreasing")),
            check(brute_ok, "brute-force recount agrees"),
            check(own.found_fraction == 1.0, "genuine EPH fully found"),
        ],
    );
}
