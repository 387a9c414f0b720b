use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bayeshead::bench::{run_bench, BenchMode, BenchReport};
use bayeshead::epsoftmax::ep_softmax_with;
use bayeshead::fit::{load_features, load_split_dataset, pixel_accuracy, save_dataset, sgd_fit, FitConfig};
use bayeshead::head::predict_moments_with;
use bayeshead::io::{read_container, write_container, write_pgm, Container, Entry, LabelMap, Tensor};
use bayeshead::oracle::{report_csv, validation_report};
use bayeshead::swag::{SnapshotStream, SwagAccumulator, SwagConfig, VarianceCenter};
use bayeshead::synthetic::{blobs, random_problem, BlobSpec};
use bayeshead::uncertainty::make_bundle_into;
use bayeshead::{EntropySpace, Exec, GaussianHead, RatioVariant, UncertaintyBundle};

#[derive(Parser)]
#[command(name = "bayeshead", version, about = "Bayesian last-layer uncertainty maps for dense classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-class blob dataset.
    Synth(SynthArgs),
    /// Fit the head with SGD and record parameter snapshots.
    Fit(FitArgs),
    /// Turn a snapshot stream into a Gaussian head.
    SwagFinalize(SwagArgs),
    /// Predict uncertainty maps for one feature map.
    Infer(InferArgs),
    /// Compare closed-form moments against Monte-Carlo estimates.
    Validate(ValidateArgs),
    /// Time repeated forward passes.
    Bench(BenchArgs),
    /// Render one entry of a container as a PGM image.
    Render(RenderArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    images: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Offset added to every feature vector, e.g. `4,-4`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    shift: Option<Vec<f32>>,
}

#[derive(Args)]
struct FitArgs {
    /// Directory of features_XXXX.eusg files.
    #[arg(long, required_unless_present = "print_config")]
    features: Option<PathBuf>,
    /// Directory of labels_XXXX.eusg files; defaults to --features.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Initial (pretrained) head; zeros when absent.
    #[arg(long)]
    head: Option<PathBuf>,
    /// Class count for a zero-initialised head; inferred from labels when absent.
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long, required_unless_present = "print_config")]
    out: Option<PathBuf>,
    /// Print the effective fit configuration and exit.
    #[arg(long)]
    print_config: bool,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    snapshot_every: Option<usize>,
    #[arg(long)]
    ohem_threshold: Option<f64>,
    #[arg(long)]
    ohem_min_kept: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ignore_value: Option<u16>,
}

#[derive(Args)]
struct SwagArgs {
    #[arg(long)]
    snapshots: PathBuf,
    /// Pretrained head; its means become the posterior means.
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    noise: f32,
    #[arg(long, default_value_t = 0.0)]
    variance_floor: f64,
    #[arg(long, default_value = "swa")]
    variance_center: VarianceCenter,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    head: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "delta")]
    ratio_variant: RatioVariant,
    #[arg(long, default_value = "logit")]
    entropy_space: EntropySpace,
    /// Classes that get a standard-deviation map, e.g. `2,7`.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<usize>,
    /// Replaces the head's observation noise.
    #[arg(long)]
    noise: Option<f32>,
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100_000)]
    samples: usize,
    /// Also write validate.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value = "bayes")]
    mode: BenchMode,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 20)]
    warmup: usize,
    /// Stored design matrix; a random one is generated when absent.
    #[arg(long, requires = "head")]
    features: Option<PathBuf>,
    #[arg(long, requires = "features")]
    head: Option<PathBuf>,
    #[arg(long, default_value_t = 512)]
    height: usize,
    #[arg(long, default_value_t = 512)]
    width: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 19)]
    num_classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    parallel: bool,
    /// Print a CSV row instead of the human-readable summary.
    #[arg(long)]
    csv: bool,
    /// Also write bench.csv and per-pass bench_samples.csv here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    entry: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    lo: Option<f32>,
    #[arg(long, allow_hyphen_values = true)]
    hi: Option<f32>,
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} not found: {}", path.display());
    }
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        bail!("{what} directory not found: {}", path.display());
    }
    Ok(())
}

fn create_out(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating output directory {}", path.display()))
}

fn exec_of(parallel: bool) -> Exec {
    if parallel {
        Exec::Parallel
    } else {
        Exec::Serial
    }
}

fn load_head(path: &Path) -> Result<GaussianHead> {
    let c = read_container(path)?;
    Ok(GaussianHead::from_container(&c)?)
}

fn save_head(path: &Path, head: &GaussianHead) -> Result<()> {
    write_container(path, &head.to_container()?)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let shift = match a.shift.as_deref() {
        None => [0.0, 0.0],
        Some(&[x, y]) => [x, y],
        Some(_) => bail!("synth: --shift takes two comma-separated values"),
    };
    create_out(&a.out)?;
    let data = blobs(&BlobSpec::default().shifted(shift), a.images, a.seed);
    save_dataset(&a.out, &data).context("synth: writing dataset")?;
    println!("wrote {} images to {}", a.images, a.out.display());
    Ok(())
}

fn fit_config(a: &FitArgs) -> Result<FitConfig> {
    let mut cfg = FitConfig::default();
    macro_rules! take {
        ($($field:ident => $target:ident),*) => {$(
            if let Some(v) = a.$field {
                cfg.$target = v;
            }
        )*};
    }
    take!(iters => total_iters, warmup => warmup_iters, lr => base_lr, weight_decay => weight_decay,
          momentum => momentum, snapshot_every => snapshot_every, ohem_threshold => ohem_threshold,
          batch_size => batch_size, seed => seed, ignore_value => ignore_value);
    if a.ohem_min_kept.is_some() {
        cfg.ohem_min_kept = a.ohem_min_kept;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn fit(a: FitArgs) -> Result<()> {
    let cfg = fit_config(&a).context("fit: configuration")?;
    if a.print_config {
        print!("{}", cfg.to_kv());
        return Ok(());
    }
    let (features, out) = (a.features.clone().expect("required"), a.out.clone().expect("required"));
    let labels = a.labels.clone().unwrap_or_else(|| features.clone());
    require_dir(&features, "features")?;
    require_dir(&labels, "labels")?;
    if let Some(h) = &a.head {
        require_file(h, "head")?;
    }
    create_out(&out)?;

    let data = load_split_dataset(&features, &labels, cfg.ignore_value).context("fit: loading dataset")?;
    let init = match &a.head {
        Some(h) => load_head(h).with_context(|| format!("fit: loading head {}", h.display()))?,
        None => {
            let k = match a.num_classes {
                Some(k) => k,
                None => {
                    let top = data
                        .iter()
                        .flat_map(|(_, y)| y.data().iter().copied().filter(|&l| !y.is_ignored(l)))
                        .max()
                        .context("fit: no labelled pixels")?;
                    usize::from(top) + 1
                }
            };
            GaussianHead::zeros(k, data[0].0.channels())?
        }
    };
    let outcome = sgd_fit(&data, &init, &cfg).context("fit: sgd")?;
    let acc = pixel_accuracy(&data, &outcome.head).context("fit: accuracy")?;

    save_head(&out.join("head.eusg"), &outcome.head)?;
    write_container(out.join("snapshots.eusg"), &outcome.snapshots.to_container()?)?;
    let mut loss = String::from("iter,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        loss.push_str(&format!("{i},{l:.9}\n"));
    }
    fs::write(out.join("loss.csv"), loss).context("fit: writing loss.csv")?;
    fs::write(out.join("fit_config.txt"), cfg.to_kv()).context("fit: writing fit_config.txt")?;
    println!(
        "fit: {} iterations, {} snapshots, train pixel accuracy {:.4}",
        cfg.total_iters,
        outcome.snapshots.len(),
        acc
    );
    Ok(())
}

fn swag_finalize(a: SwagArgs) -> Result<()> {
    require_file(&a.snapshots, "snapshots")?;
    require_file(&a.head, "head")?;
    create_out(&a.out)?;
    let stream = SnapshotStream::from_container(&read_container(&a.snapshots)?)
        .with_context(|| format!("swag-finalize: reading {}", a.snapshots.display()))?;
    let pretrained = load_head(&a.head).with_context(|| format!("swag-finalize: loading head {}", a.head.display()))?;
    let mut acc = SwagAccumulator::new(stream.layout);
    acc.observe_stream(&stream).context("swag-finalize: accumulating")?;
    let cfg = SwagConfig {
        noise: a.noise,
        variance_floor: a.variance_floor,
        center: a.variance_center,
    };
    let head = acc.finalize(&pretrained.flat_mean(), &cfg).context("swag-finalize")?;
    save_head(&a.out.join("posterior.eusg"), &head)?;
    println!("swag-finalize: {} snapshots -> {}", acc.count(), a.out.join("posterior.eusg").display());
    Ok(())
}

fn value_range(data: &[f32]) -> (f32, f32) {
    let lo = data.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = data.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

fn render_bundle(out: &Path, b: &UncertaintyBundle) -> Result<()> {
    let k = b.classes.max(2);
    let label = Tensor::new("label", vec![b.height, b.width], b.label.iter().map(|&l| f32::from(l)).collect())?;
    write_pgm(out.join("label.pgm"), &label, 0.0, (k - 1) as f32)?;
    let (lo, hi) = value_range(&b.epistemic);
    write_pgm(out.join("epistemic.pgm"), &b.epistemic_map()?, lo, hi)?;
    write_pgm(out.join("aleatoric.pgm"), &b.aleatoric_map()?, 0.0, (k as f32).ln())?;
    for (c, _) in &b.class_std {
        let map = b.class_std_map(*c).expect("class present")?;
        write_pgm(out.join(format!("class_std_{c}.pgm")), &map, 0.0, 0.5)?;
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    require_file(&a.features, "features")?;
    require_file(&a.head, "head")?;
    create_out(&a.out)?;
    let design = load_features(&a.features).with_context(|| format!("infer: loading features {}", a.features.display()))?;
    let mut head = load_head(&a.head).with_context(|| format!("infer: loading head {}", a.head.display()))?;
    if let Some(n) = a.noise {
        head = head.with_noise(n).context("infer: noise")?;
    }
    let exec = exec_of(a.parallel);
    let logits = predict_moments_with(&design, &head, exec).context("infer: predict_moments")?;
    let probs = ep_softmax_with(&logits, a.ratio_variant, exec).context("infer: ep_softmax")?;
    let mut bundle = bayeshead::make_bundle(&probs, &logits, a.entropy_space, &[]).context("infer: make_bundle")?;
    make_bundle_into(&probs, &logits, a.entropy_space, &a.classes, exec, &mut bundle).context("infer: make_bundle")?;
    write_container(a.out.join("bundle.eusg"), &bundle.to_container()?).context("infer: writing bundle")?;
    render_bundle(&a.out, &bundle).context("infer: rendering")?;
    let mean_epi = bundle.epistemic.iter().map(|&v| f64::from(v)).sum::<f64>() / bundle.epistemic.len() as f64;
    println!(
        "infer: {}x{} pixels, {} classes, mean epistemic {:.6}",
        bundle.height, bundle.width, bundle.classes, mean_epi
    );
    Ok(())
}

fn validate(a: ValidateArgs) -> Result<()> {
    if let Some(out) = &a.out {
        create_out(out)?;
    }
    let rows = validation_report(a.seed, a.samples).context("validate")?;
    let csv = report_csv(&rows);
    print!("{csv}");
    if let Some(out) = &a.out {
        fs::write(out.join("validate.csv"), &csv).context("validate: writing report")?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    if let (Some(f), Some(h)) = (&a.features, &a.head) {
        require_file(f, "features")?;
        require_file(h, "head")?;
    }
    if let Some(out) = &a.out {
        create_out(out)?;
    }
    let (design, head) = match (&a.features, &a.head) {
        (Some(f), Some(h)) => (
            load_features(f).with_context(|| format!("bench: loading features {}", f.display()))?,
            load_head(h).with_context(|| format!("bench: loading head {}", h.display()))?,
        ),
        _ => random_problem(a.height, a.width, a.dim, a.num_classes, a.seed),
    };
    let report = run_bench(&design, &head, a.mode, a.iters, a.warmup, exec_of(a.parallel)).context("bench")?;
    let table = format!("{}\n{}\n", BenchReport::csv_header(), report.csv_row());
    if a.csv {
        print!("{table}");
    } else {
        println!("{}", report.human());
    }
    if let Some(out) = &a.out {
        fs::write(out.join("bench.csv"), &table).context("bench: writing bench.csv")?;
        let mut samples = String::from("pass,seconds\n");
        for (i, s) in report.samples.iter().enumerate() {
            samples.push_str(&format!("{i},{s:.9}\n"));
        }
        fs::write(out.join("bench_samples.csv"), samples).context("bench: writing bench_samples.csv")?;
    }
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    require_file(&a.input, "input")?;
    create_out(&a.out)?;
    let c: Container = read_container(&a.input).with_context(|| format!("render: reading {}", a.input.display()))?;
    let map = match c.get(&a.entry) {
        Some(Entry::F32(t)) => t.clone(),
        Some(Entry::U16(t)) => {
            let l = LabelMap::from_entry(t)?;
            Tensor::new(a.entry.clone(), vec![l.height(), l.width()], l.data().iter().map(|&v| f32::from(v)).collect())?
        }
        None => bail!("render: no entry `{}` in {}", a.entry, a.input.display()),
    };
    let (lo, hi) = value_range(map.data());
    let path = a.out.join(format!("{}.pgm", a.entry));
    write_pgm(&path, &map, a.lo.unwrap_or(lo), a.hi.unwrap_or(hi)).context("render")?;
    println!("render: wrote {}", path.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err
        .chain()
        .filter_map(|e| e.downcast_ref::<bayeshead::Error>())
        .any(bayeshead::Error::is_numeric);
    if numeric {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Fit(a) => fit(a),
        Command::SwagFinalize(a) => swag_finalize(a),
        Command::Infer(a) => infer(a),
        Command::Validate(a) => validate(a),
        Command::Bench(a) => bench(a),
        Command::Render(a) => render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
