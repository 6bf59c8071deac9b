//! `hufu` command-line front end. Every command prints a JSON run manifest
//! on stdout; `verify` exits 0 on a positive verdict, 1 on a negative one and
//! 2 on any error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hufu::attacks::{self, AdjustStage, ExpandStage, ExpandStrategy, SyntheticConfig};
use hufu::audit::{self, IndexHypothesis};
use hufu::datasets::{load_idx, save_idx, synth_generate, Dataset, PatternFamily, SynthConfig};
use hufu::io::{self, ModelFile, Section};
use hufu::nn::{self, Architecture, FreezeMask, Model, Shape3, TrainConfig};
use hufu::restore;
use hufu::watermark::{self, EmbeddingKey, RestoreApplied, DEFAULT_TAU, KEY_LEN};
use rand::RngCore;
use serde::Serialize;
use serde_json::{json, Value};

const SCHEMA_VERSION: u32 = 1;
const KEY_ENV: &str = "HUFU_KEY_HEX";

#[derive(Parser, Serialize)]
#[command(name = "hufu", version, about = "Embed, attack, restore and verify HufuNet watermarks")]
struct Cli {
    /// Also write the run manifest to this file.
    #[arg(long, global = true)]
    #[serde(skip)]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Write a fresh 64-byte embedding key as hex.
    Keygen(KeygenArgs),
    /// Write a randomly initialized model.
    Init(InitArgs),
    /// Generate a procedural dataset as an IDX pair.
    GenData(GenDataArgs),
    /// Train a carrier and record its test accuracy.
    GenHufu(GenHufuArgs),
    /// Embed a carrier's conv kernels into a host.
    Embed(EmbedArgs),
    /// Train a model, keeping masked kernels frozen.
    Train(TrainArgs),
    /// Apply a model modification attack.
    Attack(AttackArgs),
    /// Undo channel reordering, scaling and cutoff against a reference.
    Restore(RestoreArgs),
    /// Check a suspect model for the watermark.
    Verify(VerifyArgs),
    /// Forgery and distribution audits.
    #[command(subcommand)]
    Audit(AuditCommand),
}

#[derive(Args, Serialize)]
struct KeygenArgs {
    /// Derive the key from a seed instead of the OS generator (tests only).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ArchArgs {
    /// Conv widths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 16])]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    /// Input height and width.
    #[arg(long, default_value_t = 12)]
    size: usize,
}

impl ArchArgs {
    fn architecture(&self) -> Architecture {
        Architecture::relu(Shape3::new(self.channels, self.size, self.size), &self.widths, self.classes)
    }
}

#[derive(Args, Serialize)]
struct InitArgs {
    #[command(flatten)]
    arch: ArchArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Family {
    Bars,
    Shapes,
}

#[derive(Args, Serialize)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "bars")]
    family: Family,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 12)]
    size: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f32,
    #[arg(long, default_value_t = 1)]
    jitter: i32,
    #[arg(long)]
    seed: u64,
    /// Output directory; receives images.idx and labels.idx.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Clone)]
struct ScheduleArgs {
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f32>,
    /// Shuffling seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ScheduleArgs {
    fn resolve(&self, base: TrainConfig) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr.unwrap_or(base.learning_rate),
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            seed: self.seed,
        }
    }
}

fn carrier_schedule() -> TrainConfig {
    TrainConfig { learning_rate: 0.2, epochs: 30, ..TrainConfig::default() }
}

#[derive(Args, Serialize)]
struct GenHufuArgs {
    /// Carrier training set directory.
    #[arg(long)]
    ds: PathBuf,
    #[arg(long)]
    ds_test: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [4, 8])]
    widths: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    init_seed: u64,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct KeyArgs {
    /// File holding the key as 128 hex digits or 64 raw bytes.
    #[arg(long)]
    key_file: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct EmbedArgs {
    #[arg(long)]
    host: PathBuf,
    #[arg(long)]
    hufu: PathBuf,
    #[command(flatten)]
    key: KeyArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    /// Section file holding a freeze mask; defaults to the model's own.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct AttackArgs {
    #[command(subcommand)]
    kind: AttackKind,
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Strategy {
    ZeroB,
    DuplicateSplit,
}

impl From<Strategy> for ExpandStrategy {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::ZeroB => ExpandStrategy::ZeroB,
            Strategy::DuplicateSplit => ExpandStrategy::DuplicateSplit,
        }
    }
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum AttackKind {
    /// Plain SGD on attacker data (80% of it), no frozen kernels.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
    /// Zero the smallest-magnitude fraction of all parameters.
    Prune {
        #[arg(long)]
        fraction: f64,
    },
    /// Permute the output channels of every conv layer.
    Shuffle {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rescale conv layers by powers of two, compensated downstream.
    Scale {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = attacks::DEFAULT_EXPONENT_RANGE)]
        range: i32,
        /// Layers to rescale; all when omitted.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
    },
    /// Add channels to a layer without changing the function.
    Expand {
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, value_enum, default_value = "zero-b")]
        strategy: Strategy,
        #[arg(long, default_value_t = 0.5)]
        alpha: f32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Remove output channels from a layer.
    Cutoff {
        #[arg(long)]
        layer: usize,
        #[arg(long, value_delimiter = ',', required = true)]
        channels: Vec<usize>,
    },
    /// Append random channels to a layer.
    Supplement {
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Expand, fine-tune, shuffle, rescale and prune in one go.
    Synthetic {
        #[arg(long, default_value_t = 0.1)]
        prune: f64,
        /// Attacker data for the fine-tune stage; skipped when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Mode {
    Reorder,
    Scale,
    Cutoff,
    Full,
}

impl From<Mode> for RestoreApplied {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Reorder => RestoreApplied::Reorder,
            Mode::Scale => RestoreApplied::Scale,
            Mode::Cutoff => RestoreApplied::Cutoff,
            Mode::Full => RestoreApplied::Full,
        }
    }
}

#[derive(Args, Serialize)]
struct RestoreArgs {
    #[arg(long)]
    suspect: PathBuf,
    /// The owner's watermarked model.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long, value_enum, default_value = "full")]
    mode: Mode,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct VerifyArgs {
    #[arg(long)]
    suspect: PathBuf,
    #[arg(long)]
    hufu: PathBuf,
    #[command(flatten)]
    key: KeyArgs,
    #[arg(long)]
    ds_test: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f32,
    /// Restore against `--reference` before extracting (full when no mode given).
    #[arg(long, value_enum, num_args = 0..=1, default_missing_value = "full")]
    restore: Option<Mode>,
    #[arg(long, required_if_eq_any = [("restore", "reorder"), ("restore", "scale"), ("restore", "cutoff"), ("restore", "full")])]
    reference: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Hypothesis {
    Scan,
    AnyIndex,
    Claimed,
}

#[derive(Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum AuditCommand {
    /// Look for a forged carrier's kernels inside a host.
    Match {
        #[arg(long)]
        host: PathBuf,
        #[arg(long)]
        forged: PathBuf,
        #[arg(long)]
        ds_test: PathBuf,
        /// Relative tolerance, 0.25 means 25% either side.
        #[arg(long, default_value_t = 0.25)]
        range: f64,
        /// Values at or below this magnitude always match; defaults to the
        /// host's 10% magnitude quantile.
        #[arg(long)]
        cutoff: Option<f32>,
    },
    /// Count host kernels consistent with the position rule under random keys.
    Keysearch {
        #[arg(long)]
        host: PathBuf,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "scan")]
        hypothesis: Hypothesis,
        /// Highest index tried by the any-index hypothesis; defaults to the
        /// host kernel count.
        #[arg(long)]
        max_index: Option<usize>,
        /// File whose embedding record supplies the claimed positions.
        #[arg(long, required_if_eq("hypothesis", "claimed"))]
        record: Option<PathBuf>,
        /// Also score this key (claimed hypothesis only).
        #[command(flatten)]
        key: KeyArgs,
    },
    /// Distance between parameter (or mean gradient) histograms.
    Histogram {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 64)]
        bins: usize,
        /// Compare mean loss gradients over this dataset instead.
        #[arg(long)]
        gradients: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct RunManifest<'a> {
    schema_version: u32,
    tool_version: &'static str,
    command: &'a Command,
    outputs: Vec<PathBuf>,
    report: Value,
}

struct Outcome {
    outputs: Vec<PathBuf>,
    report: Value,
    exit: u8,
}

impl Outcome {
    fn new(outputs: Vec<PathBuf>, report: impl Serialize) -> Result<Self> {
        Ok(Self { outputs, report: serde_json::to_value(report)?, exit: 0 })
    }
}

fn load_data(dir: &Path) -> Result<Dataset> {
    load_idx(&dir.join("images.idx"), &dir.join("labels.idx"))
        .with_context(|| format!("reading dataset in {}", dir.display()))
}

fn load_file(path: &Path) -> Result<ModelFile> {
    io::load_model_file(path).with_context(|| format!("reading model {}", path.display()))
}

fn save_file(file: &ModelFile, path: &Path) -> Result<()> {
    io::save_model_file(file, path).with_context(|| format!("writing {}", path.display()))
}

fn parse_key(bytes: &[u8]) -> Result<EmbeddingKey> {
    if bytes.len() == KEY_LEN {
        return Ok(EmbeddingKey::from_bytes(bytes)?);
    }
    let text = std::str::from_utf8(bytes).context("key is neither 64 raw bytes nor hex text")?;
    let raw = hex::decode(text.trim()).context("key is not valid hex")?;
    Ok(EmbeddingKey::from_bytes(&raw)?)
}

fn load_key(args: &KeyArgs) -> Result<EmbeddingKey> {
    match &args.key_file {
        Some(path) => parse_key(&fs::read(path).with_context(|| format!("reading key {}", path.display()))?),
        None => match std::env::var(KEY_ENV) {
            Ok(hex) => parse_key(hex.as_bytes()),
            Err(_) => bail!("no key given: pass --key-file or set {KEY_ENV}"),
        },
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf> {
    value.as_ref().with_context(|| format!("--{flag} is required"))
}

fn run(command: &Command) -> Result<Outcome> {
    match command {
        Command::Keygen(a) => {
            let mut bytes = [0u8; KEY_LEN];
            let key = match a.seed {
                Some(seed) => EmbeddingKey::from_seed(seed),
                None => {
                    rand::rng().fill_bytes(&mut bytes);
                    EmbeddingKey::from_bytes(&bytes)?
                }
            };
            fs::write(&a.out, hex::encode(key.as_bytes()) + "\n")?;
            Outcome::new(vec![a.out.clone()], json!({ "key_id": hex::encode(key.id()) }))
        }
        Command::Init(a) => {
            let model = Model::init(&a.arch.architecture(), a.seed);
            save_file(&ModelFile::new(model.clone()), &a.out)?;
            Outcome::new(
                vec![a.out.clone()],
                json!({ "parameters": model.parameter_count(), "kernels": model.kernel_count() }),
            )
        }
        Command::GenData(a) => {
            let family = match a.family {
                Family::Bars => PatternFamily::Bars,
                Family::Shapes => PatternFamily::Shapes,
            };
            let mut cfg = SynthConfig::new(family, a.classes, a.per_class, a.seed);
            cfg.height = a.size;
            cfg.width = a.size;
            cfg.noise_std = a.noise;
            cfg.jitter = a.jitter;
            let data = synth_generate(&cfg)?;
            fs::create_dir_all(&a.out)?;
            save_idx(&data, &a.out.join("images.idx"), &a.out.join("labels.idx"))?;
            Outcome::new(vec![a.out.clone()], json!({ "samples": data.len(), "config": cfg }))
        }
        Command::GenHufu(a) => {
            let (ds, ds_test) = (load_data(&a.ds)?, load_data(&a.ds_test)?);
            let shape = ds.sample_shape();
            let arch = Architecture::relu(Shape3::new(shape[0], shape[1], shape[2]), &a.widths, ds.class_count());
            let schedule = a.schedule.resolve(carrier_schedule());
            let hufu = watermark::generate_hufunet(&arch, a.init_seed, &schedule, &ds, &ds_test)?;
            save_file(&ModelFile::from_hufunet(&hufu), &a.out)?;
            Outcome::new(vec![a.out.clone()], json!({ "acc_ori": hufu.acc_ori, "schedule": schedule }))
        }
        Command::Embed(a) => {
            let host = load_file(&a.host)?.model;
            let hufu = load_file(&a.hufu)?.into_hufunet()?;
            let key = load_key(&a.key)?;
            let (eph, _) = watermark::split(&hufu);
            let (wm, record, mask) = watermark::embed(&host, &eph, &key)?;
            let report = json!({ "record": record, "frozen_kernels": mask.frozen_count() });
            let file = ModelFile { model: wm, sections: vec![Section::Embedding(record), Section::Mask(mask)] };
            save_file(&file, &a.out)?;
            Outcome::new(vec![a.out.clone()], report)
        }
        Command::Train(a) => {
            let mut file = load_file(&a.model)?;
            let mask = match &a.mask {
                Some(path) => io::load_sections(path)?
                    .into_iter()
                    .find_map(|s| match s {
                        Section::Mask(m) => Some(m),
                        _ => None,
                    })
                    .context("mask file holds no freeze mask section")?,
                None => file.freeze_mask().cloned().unwrap_or_else(|| FreezeMask::none(&file.model)),
            };
            let data = load_data(&a.data)?;
            let schedule = a.schedule.resolve(TrainConfig::default());
            let (trained, report) = nn::train(&file.model, &data, &schedule, &mask)?;
            file.model = trained;
            save_file(&file, &a.out)?;
            Outcome::new(
                vec![a.out.clone()],
                json!({ "final_loss": report.final_loss, "frozen_kernels": mask.frozen_count(), "schedule": schedule }),
            )
        }
        Command::Attack(a) => attack(a),
        Command::Restore(a) => {
            let suspect = load_file(&a.suspect)?.model;
            let reference = load_file(&a.reference)?.model;
            let (restored, report) = match a.mode {
                Mode::Reorder => restore::reorder_restore(&suspect, &reference)?,
                Mode::Scale => restore::scale_restore(&suspect, &reference)?,
                Mode::Cutoff => restore::cutoff_restore(&suspect, &reference)?,
                Mode::Full => restore::full_restore(&suspect, &reference)?,
            };
            let file = ModelFile { model: restored, sections: vec![Section::Restore(report.clone())] };
            save_file(&file, &a.out)?;
            Outcome::new(vec![a.out.clone()], report)
        }
        Command::Verify(a) => {
            let suspect = load_file(&a.suspect)?.model;
            let hufu = load_file(&a.hufu)?.into_hufunet()?;
            let key = load_key(&a.key)?;
            let ds_test = load_data(&a.ds_test)?;
            let (report, restore_report) = match a.restore {
                None => (watermark::verify(&suspect, &hufu, &key, &ds_test, a.tau)?, None),
                Some(mode) => {
                    let reference = load_file(required(&a.reference, "reference")?)?.model;
                    watermark::verify_restored(&suspect, &reference, mode.into(), &hufu, &key, &ds_test, a.tau)?
                }
            };
            let exit = if report.verdict { 0 } else { 1 };
            let mut outcome = Outcome::new(vec![], json!({ "verification": report, "restore": restore_report }))?;
            outcome.exit = exit;
            Ok(outcome)
        }
        Command::Audit(a) => audit_cmd(a),
    }
}

fn attack(a: &AttackArgs) -> Result<Outcome> {
    let model = load_file(required(&a.model, "model")?)?.model;
    let out = required(&a.out, "out")?;
    let (attacked, record) = match &a.kind {
        AttackKind::Finetune { data, schedule } => {
            let cfg = schedule.resolve(TrainConfig::finetune_preset(schedule.seed));
            attacks::finetune(&model, &load_data(data)?, &cfg)?
        }
        AttackKind::Prune { fraction } => attacks::prune_magnitude(&model, *fraction)?,
        AttackKind::Shuffle { seed } => attacks::structure_adjust(&model, *seed)?,
        AttackKind::Scale { seed, range, layers } => {
            attacks::parameter_adjust(&model, *seed, *range, layers.as_deref())?
        }
        AttackKind::Expand { layer, k, strategy, alpha, seed } => {
            attacks::channel_expand(&model, *layer, *k, (*strategy).into(), *alpha, *seed)?
        }
        AttackKind::Cutoff { layer, channels } => attacks::kernels_cutoff(&model, *layer, channels)?,
        AttackKind::Supplement { layer, k, seed } => attacks::kernels_supplement(&model, *layer, *k, *seed)?,
        AttackKind::Synthetic { prune, data, seed } => {
            let mut cfg = SyntheticConfig::standard(*prune, *seed);
            let data = data.as_deref().map(load_data).transpose()?;
            if data.is_none() {
                cfg.finetune = None;
            }
            if model.conv_layers.len() < 2 {
                cfg.expand = Some(ExpandStage { layer: 0, k: 0, strategy: ExpandStrategy::ZeroB, alpha: 0.5 });
                cfg.adjust = Some(AdjustStage::Split { first: -4, rest: 1 });
            }
            attacks::synthetic_attack(&model, data.as_ref(), &cfg)?
        }
    };
    save_file(&ModelFile { model: attacked, sections: vec![Section::Attack(record.clone())] }, out)?;
    Outcome::new(vec![out.clone()], record)
}

fn audit_cmd(a: &AuditCommand) -> Result<Outcome> {
    match a {
        AuditCommand::Match { host, forged, ds_test, range, cutoff } => {
            let host = load_file(host)?.model;
            let forged = load_file(forged)?.into_hufunet()?;
            let report = audit::match_search(&host, &forged, *range, *cutoff, &load_data(ds_test)?)?;
            Outcome::new(vec![], report)
        }
        AuditCommand::Keysearch { host, trials, seed, hypothesis, max_index, record, key } => {
            let host = load_file(host)?.model;
            let hyp = match hypothesis {
                Hypothesis::Scan => IndexHypothesis::Scan,
                Hypothesis::AnyIndex => {
                    IndexHypothesis::AnyIndex { max_index: max_index.unwrap_or(host.kernel_count()) }
                }
                Hypothesis::Claimed => {
                    let file = load_file(required(record, "record")?)?;
                    let rec = file.embedding_record().context("record file holds no embedding record")?;
                    IndexHypothesis::Claimed { positions: rec.positions.clone() }
                }
            };
            let report = audit::correlation_key_search(&host, *trials, *seed, &hyp)?;
            let owner = if key.key_file.is_some() || std::env::var(KEY_ENV).is_ok() {
                Some(audit::correlation_count(&host, &load_key(key)?, &hyp)?)
            } else {
                None
            };
            Outcome::new(vec![], json!({ "search": report, "given_key_count": owner }))
        }
        AuditCommand::Histogram { a, b, bins, gradients } => {
            let (ma, mb) = (load_file(a)?.model, load_file(b)?.model);
            let (kind, distance) = match gradients {
                Some(dir) => ("gradient", audit::gradient_histogram_distance(&ma, &mb, &load_data(dir)?, *bins)?),
                None => ("parameter", audit::param_histogram_distance(&ma, &mb, *bins)?),
            };
            Outcome::new(vec![], json!({ "kind": kind, "bins": bins, "distance": distance }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(outcome) => {
            let manifest = RunManifest {
                schema_version: SCHEMA_VERSION,
                tool_version: env!("CARGO_PKG_VERSION"),
                command: &cli.command,
                outputs: outcome.outputs,
                report: outcome.report,
            };
            let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            println!("{text}");
            if let Some(path) = &cli.manifest {
                if let Err(e) = fs::write(path, &text) {
                    eprintln!("error: writing manifest {}: {e}", path.display());
                    return ExitCode::from(2);
                }
            }
            ExitCode::from(outcome.exit)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
