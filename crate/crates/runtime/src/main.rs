use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use arp_core::autorep::{accuracy, train_replace, train_supervised, ReplacementConfig, TrainConfig};
use arp_core::dapa::{empirical_loss, fit_closed_form, fit_monte_carlo, min_approx_loss, GaussianStats, PolyCoeffs};
use arp_core::data::{glyph_digits, read_images, two_spirals, write_images, DataError, Dataset};
use arp_core::nn::Model;
use arp_core::{FixedConfig, Tensor};
use arp_mpc::PartyId;
use arp_runtime::model_file::{ModelFile, ModelFileError, Provenance};
use arp_runtime::orchestrator::{self, bench, bench_csv, Endpoint, Mode, RunError, Seeds};
use arp_runtime::PublicModel;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "arp", version, about = "Private inference with learned ReLU replacement")]
struct Cli {
    /// Base seed; ARP_SEED overrides it.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Ring width L.
    #[arg(long, global = true, default_value_t = 64)]
    fixed_bits: u32,
    /// Fractional bits f.
    #[arg(long, global = true, default_value_t = 16)]
    frac_bits: u32,
    /// Listen for the peer on this address.
    #[arg(long, global = true, conflicts_with = "connect")]
    listen: Option<String>,
    /// Connect to the peer at this address.
    #[arg(long, global = true)]
    connect: Option<String>,
    /// Party index for TCP runs.
    #[arg(long, global = true, value_parser = clap::value_parser!(u8).range(0..=1))]
    party: Option<u8>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic dataset.
    GenData(GenData),
    /// Train a baseline, then learn which activations stay ReLU.
    TrainReplace(TrainReplace),
    /// Fit second-order polynomials to ReLU.
    DapaFit(DapaFit),
    /// Re-encode a model file for private inference.
    Export(Export),
    /// Run two-party inference on a batch.
    InferPrivate(InferPrivate),
    /// Per-phase cost over several batch sizes.
    Bench(Bench),
    /// Write both parties' preprocessing tapes for one batch size.
    Deal(Deal),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum DataKind {
    Spirals,
    Digits,
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long, value_enum, default_value_t = DataKind::Spirals)]
    kind: DataKind,
    /// Points per class for spirals, images for digits.
    #[arg(long, default_value_t = 500)]
    count: usize,
    #[arg(long, default_value_t = 2.0)]
    turns: f64,
    #[arg(long, default_value_t = 0.08)]
    noise: f64,
    #[arg(long, default_value_t = 12)]
    side: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Arch {
    Mlp,
    Smallcnn,
}

#[derive(Args, Debug)]
struct TrainReplace {
    /// Training data: CSV (features then label) or an image file.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Arch::Mlp)]
    arch: Arch,
    /// Hidden width of the MLP.
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    /// Surviving ReLU elements per example, or a percentage such as `50%`.
    #[arg(long)]
    budget: String,
    /// Penalty weight, normalized by the activation element count.
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    /// Hysteresis threshold.
    #[arg(long, default_value_t = 0.003)]
    th: f64,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 200)]
    baseline_epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    baseline_lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr_weights: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr_indicator: f64,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the per-epoch history CSV.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DapaFit {
    /// CSV of `mean,var` rows.
    #[arg(long, conflicts_with = "samples")]
    stats: Option<PathBuf>,
    /// Raw samples, one per line, fit by least squares.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    degree: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum MaskOverride {
    Keep,
    Relu,
    Poly,
}

#[derive(Args, Debug)]
struct Export {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Replace the learned mask by all ReLU or all polynomial.
    #[arg(long, value_enum, default_value_t = MaskOverride::Keep)]
    mask: MaskOverride,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum LocalMode {
    Memory,
    Tcp,
}

#[derive(Args, Debug)]
struct InferPrivate {
    #[arg(long)]
    model: PathBuf,
    /// Inputs in the training data format.
    #[arg(long)]
    inputs: PathBuf,
    /// Use only the first N inputs.
    #[arg(long)]
    count: Option<usize>,
    /// Transport when no --listen/--connect is given.
    #[arg(long, value_enum, default_value_t = LocalMode::Memory)]
    mode: LocalMode,
    /// Read preprocessing from a directory written by `deal`.
    #[arg(long)]
    tapes: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    logits: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Bench {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,8,32")]
    batches: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Deal {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    batch: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(r) = e.downcast_ref::<RunError>() {
        return r.exit_code() as u8;
    }
    if e.is::<ModelFileError>() || e.is::<DataError>() || e.is::<std::io::Error>() || e.is::<arp_mpc::dealer::DealerError>() || e.is::<csv::Error>() {
        return 4;
    }
    1
}

fn base_seed(flag: u64) -> Result<u64> {
    match std::env::var("ARP_SEED") {
        Ok(v) => v.trim().parse().with_context(|| format!("ARP_SEED={v:?} is not an integer")),
        Err(_) => Ok(flag),
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = base_seed(cli.seed)?;
    let cfg = FixedConfig::new(cli.fixed_bits, cli.frac_bits)?;
    match &cli.cmd {
        Cmd::GenData(a) => gen_data(a, seed),
        Cmd::TrainReplace(a) => train(a, seed, cfg),
        Cmd::DapaFit(a) => dapa_fit(a),
        Cmd::Export(a) => export(a, cfg),
        Cmd::InferPrivate(a) => infer(a, &cli, seed),
        Cmd::Bench(a) => {
            let file = ModelFile::load(&a.model)?;
            let rows = bench(&file, &a.batches, Seeds::from_base(seed))?;
            emit(a.out.as_deref(), &bench_csv(&rows))
        }
        Cmd::Deal(a) => {
            let file = ModelFile::load(&a.model)?;
            let model = PublicModel::new(&file.model, file.cfg)?;
            let (t0, t1, dt) = orchestrator::deal(&model, a.batch, Seeds::from_base(seed).dealer)?;
            std::fs::create_dir_all(&a.out_dir)?;
            for t in [&t0, &t1] {
                t.save(&a.out_dir.join(orchestrator::tape_file(t.party())))?;
            }
            println!("{} records per party, dealt in {:.3}s", t0.remaining(), dt.as_secs_f64());
            Ok(())
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn is_image_file(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "arim")
}

fn load_dataset(p: &Path) -> Result<Dataset<f64>> {
    let d = if is_image_file(p) {
        read_images(p, 10)?
    } else {
        Dataset::read_csv(p, None)?
    };
    Ok(d)
}

fn gen_data(a: &GenData, seed: u64) -> Result<()> {
    match a.kind {
        DataKind::Spirals => two_spirals::<f64>(a.count, a.turns, a.noise, seed).write_csv(&a.out)?,
        DataKind::Digits => {
            let (pixels, labels) = glyph_digits(a.count, a.side, seed);
            write_images(&a.out, a.side, a.side, &pixels, &labels)?;
        }
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn parse_budget(s: &str, elements: usize) -> Result<usize> {
    if let Some(p) = s.strip_suffix('%') {
        let p: f64 = p.trim().parse().with_context(|| format!("bad budget {s:?}"))?;
        if !(0.0..=100.0).contains(&p) {
            bail!("budget {s} out of range");
        }
        Ok((elements as f64 * p / 100.0).round() as usize)
    } else {
        Ok(s.trim().parse().with_context(|| format!("bad budget {s:?}"))?)
    }
}

fn train(a: &TrainReplace, seed: u64, cfg: FixedConfig) -> Result<()> {
    let train = load_dataset(&a.dataset)?;
    let test = a.test.as_deref().map(load_dataset).transpose()?;
    let mut model = match a.arch {
        Arch::Mlp => {
            let width = train.example_shape().iter().product();
            Model::mlp(&[width, a.hidden, a.hidden, train.classes()], seed)
        }
        Arch::Smallcnn => {
            let shape = train.example_shape();
            if shape.len() != 3 || shape[0] != 1 || shape[1] != shape[2] {
                bail!("smallcnn needs square single-channel images, got {shape:?}");
            }
            Model::small_cnn(shape[1], train.classes(), seed)?
        }
    };
    let budget = parse_budget(&a.budget, model.activation_elements())?;
    let tc = TrainConfig {
        epochs: a.baseline_epochs,
        lr: a.baseline_lr,
        seed,
        ..TrainConfig::default()
    };
    train_supervised(&mut model, &train, &tc)?;
    let base_train = accuracy(&model, &train)?;
    let base_test = test.as_ref().map(|t| accuracy(&model, t)).transpose()?;
    let rc = ReplacementConfig {
        budget,
        mu: a.mu,
        threshold: a.th,
        epochs: a.epochs,
        lr_weights: a.lr_weights,
        lr_indicator: a.lr_indicator,
        seed,
        ..ReplacementConfig::default()
    };
    let (plan, history) = train_replace(&mut model, &train, test.as_ref(), &rc)?;
    if let Some(h) = &a.history {
        std::fs::write(h, history.to_csv())?;
    }
    let config_text = format!("{a:?} L={} f={}", cfg.total_bits(), cfg.frac_bits());
    ModelFile::new(cfg, model.clone(), Provenance::new(seed, &config_text)).save(&a.out)?;
    println!(
        "baseline train {:.4}{} | relu {} of {} (budget {}) | train {:.4}{}",
        base_train,
        base_test.map(|t| format!(" test {t:.4}")).unwrap_or_default(),
        plan.relu_count(),
        model.activation_elements(),
        budget,
        accuracy(&model, &train)?,
        test.as_ref()
            .map(|t| accuracy(&model, t).map(|v| format!(" test {v:.4}")))
            .transpose()?
            .unwrap_or_default(),
    );
    Ok(())
}

fn dapa_fit(a: &DapaFit) -> Result<()> {
    let mut out = String::new();
    if let Some(p) = &a.stats {
        out.push_str("mean,var,c0,c1,c2,loss\n");
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(p)?;
        for row in rdr.deserialize::<(f64, f64)>() {
            let (mean, var) = row?;
            let g = GaussianStats::new(mean, var)?;
            let c = fit_closed_form(&g);
            out.push_str(&format!("{mean},{var},{},{},{},{}\n", c.get(0), c.get(1), c.get(2), min_approx_loss(&g)));
        }
    } else if let Some(p) = &a.samples {
        let text = std::fs::read_to_string(p)?;
        let samples = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.parse::<f64>().with_context(|| format!("bad sample {l:?}")))
            .collect::<Result<Vec<_>>>()?;
        let c: PolyCoeffs<f64> = fit_monte_carlo(&samples, a.degree)?;
        let cols = (0..=a.degree).map(|i| format!("c{i}")).collect::<Vec<_>>().join(",");
        out.push_str(&format!("{cols},loss\n"));
        let vals = c.coeffs().iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        out.push_str(&format!("{vals},{}\n", empirical_loss(&samples, &c)));
    } else {
        bail!("give --stats or --samples");
    }
    emit(a.out.as_deref(), &out)
}

fn export(a: &Export, cfg: FixedConfig) -> Result<()> {
    let mut file = ModelFile::load(&a.model)?;
    file.cfg = cfg;
    if a.mask != MaskOverride::Keep {
        let v = u8::from(a.mask == MaskOverride::Relu);
        for act in file.model.activations_mut() {
            let shape = act.indicator.shape().to_vec();
            act.indicator.set_mask(Tensor::full(&shape, v));
        }
    }
    let public = PublicModel::new(&file.model, cfg)?;
    file.save(&a.out)?;
    println!("{} relu elements per example | digest {}", public.relu_count(), file.digest());
    Ok(())
}

fn infer(a: &InferPrivate, cli: &Cli, seed: u64) -> Result<()> {
    let file = ModelFile::load(&a.model)?;
    let mut data = load_dataset(&a.inputs)?;
    if let Some(n) = a.count {
        data = data.take(n);
    }
    let mode = match (&cli.listen, &cli.connect) {
        (None, None) => match a.mode {
            LocalMode::Memory => Mode::Memory,
            LocalMode::Tcp => Mode::TcpLoopback,
        },
        (listen, connect) => {
            let party = match cli.party {
                Some(p) => PartyId::from_index(p as usize).expect("checked by clap"),
                None => bail!("--party is required with --listen/--connect"),
            };
            let endpoint = match (listen, connect) {
                (Some(l), _) => Endpoint::Listen(l.clone()),
                (_, Some(c)) => Endpoint::Connect(c.clone()),
                _ => unreachable!(),
            };
            Mode::TcpParty { party, endpoint }
        }
    };
    let report = orchestrator::run_with_tapes(&file, data.features(), &mode, Seeds::from_base(seed), a.tapes.as_deref())?;
    if let Some(p) = &a.report {
        std::fs::write(p, report.to_csv())?;
    }
    if let Some(p) = &a.logits {
        std::fs::write(p, report.logits_csv())?;
    }
    println!("{}", report.summary());
    Ok(())
}
