use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ecrf_core::bench::run_benchmark;
use ecrf_core::config::{load_net, parse_kv, save_net, RunConfig};
use ecrf_core::densecrf::{GaussianKernelParams, Neighborhood};
use ecrf_core::error::Error;
use ecrf_core::gridcore::read_rgb_png;
use ecrf_core::superpixel::{save_superpixel_map, slic_segment, SlicParams, SuperpixelMap};
use ecrf_core::toynet::{
    bcwc_for, evaluate, evaluate_with, gen_synthetic_dataset, load_dataset, save_dataset, train, vanilla_crf_predict,
    EvalReport, Mode, Net, NetConfig, Prepared, Sample, SynthConfig,
};
use ecrf_core::verify;

#[derive(Parser)]
#[command(name = "ecrf", version, about = "E-CRF segmentation lab")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; 0 lets rayon decide.
    #[arg(long, global = true, env = "ECRF_THREADS", default_value_t = 0)]
    threads: usize,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset as PNGs.
    GenData(GenData),
    /// SLIC superpixels for one image.
    Superpixel(SuperpixelCmd),
    /// Train a network and write a checkpoint.
    Train(TrainCmd),
    /// Score a checkpoint on a dataset.
    Eval(EvalCmd),
    /// Score a checkpoint with CRF post-processing.
    Crf(CrfCmd),
    /// Class-weight similarity over adjacent class pairs.
    Bcwc(BcwcCmd),
    /// Finite-difference checks of every analytic gradient.
    Gradcheck(GradcheckCmd),
    /// Class-weight update angles for the three training methods.
    Angles(AnglesCmd),
    /// Time the main kernels.
    Bench(BenchCmd),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, visible_alias = "num", default_value_t = 16)]
    num_images: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 0.08)]
    noise: f64,
    #[arg(long, default_value_t = 3)]
    shapes_min: usize,
    #[arg(long, default_value_t = 6)]
    shapes_max: usize,
}

#[derive(Args)]
struct SuperpixelCmd {
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 200)]
    blocks: usize,
    #[arg(long, default_value_t = 10.0)]
    compactness: f64,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 0.25)]
    min_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainCmd {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// key=value file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// key=value override, applied after --config; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Per-iteration loss and learning rate as CSV.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long, visible_alias = "ckpt")]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Per-class IoU as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CrfMode {
    Vanilla,
    Joint,
}

#[derive(Args)]
struct CrfCmd {
    #[arg(long, visible_alias = "ckpt")]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = CrfMode::Vanilla)]
    mode: CrfMode,
    /// Mean-field steps (vanilla only).
    #[arg(long, default_value_t = 5)]
    steps: usize,
    #[arg(long)]
    w1: Option<f64>,
    #[arg(long)]
    w2: Option<f64>,
    #[arg(long)]
    ta: Option<f64>,
    #[arg(long)]
    tb: Option<f64>,
    #[arg(long)]
    tg: Option<f64>,
    /// Neighborhood radius in cells; 0 means all pairs (vanilla only).
    #[arg(long, default_value_t = 4)]
    window: usize,
}

#[derive(Args)]
struct BcwcCmd {
    #[arg(long, visible_alias = "ckpt")]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    top: usize,
}

#[derive(Args)]
struct GradcheckCmd {
    /// Random cases per suite.
    #[arg(long, default_value_t = 100)]
    seeds: usize,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
}

#[derive(Args)]
struct AnglesCmd {
    #[arg(long, default_value_t = 100)]
    sweep: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchCmd {
    /// Comma-separated grid side lengths.
    #[arg(long, value_delimiter = ',', default_value = "8,16,32,48")]
    sizes: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: e.exit_code() as u8, message: e.to_string() }
    }
}

type Outcome = Result<(), Failure>;

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn numeric_failure(message: String) -> Failure {
    Failure { code: 4, message }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::GenData(a) => gen_data(&cli, a),
        Command::Superpixel(a) => superpixel(a),
        Command::Train(a) => train_cmd(&cli, a),
        Command::Eval(a) => eval_cmd(a),
        Command::Crf(a) => crf_cmd(a),
        Command::Bcwc(a) => bcwc_cmd(a),
        Command::Gradcheck(a) => gradcheck(&cli, a),
        Command::Angles(a) => angles(&cli, a),
        Command::Bench(a) => bench(&cli, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn gen_data(cli: &Cli, a: &GenData) -> Outcome {
    let cfg = SynthConfig {
        num_images: a.num_images,
        size: a.size,
        num_classes: a.classes,
        shapes_per_image: (a.shapes_min, a.shapes_max),
        texture_noise: a.noise,
        seed: cli.seed,
    };
    let data = gen_synthetic_dataset(&cfg)?;
    save_dataset(&a.out, &cfg, &data)?;
    println!("wrote {} samples to {}", data.len(), a.out.display());
    Ok(())
}

fn superpixel(a: &SuperpixelCmd) -> Outcome {
    let image = read_rgb_png(&a.image)?;
    let params = SlicParams {
        target_blocks: a.blocks,
        compactness: a.compactness,
        iterations: a.iters,
        min_block_fraction: a.min_fraction,
    };
    let map = slic_segment(&image, &params)?;
    save_superpixel_map(&a.out, &map, &params)?;
    println!("block_count={}", map.block_count());
    Ok(())
}

/// Superpixels only when the pairwise layer will read them.
fn prepare(net: &NetConfig, slic: &SlicParams, mode: Mode, data: &[Sample]) -> Result<Vec<Prepared>, Error> {
    let needs_sp = mode == Mode::Ecrf && net.use_superpixel;
    data.iter()
        .map(|s| {
            let sp: Option<SuperpixelMap> = if needs_sp { Some(slic_segment(&s.image, slic)?) } else { None };
            Prepared::new(net, &s.image, &s.labels, sp.as_ref())
        })
        .collect()
}

fn print_config(cfg: &RunConfig) {
    for (k, v) in cfg.to_kv() {
        println!("# {k}={v}");
    }
}

fn train_cmd(cli: &Cli, a: &TrainCmd) -> Outcome {
    let data = load_dataset(&a.data)?;
    let classes = data.first().map(|s| s.labels.num_classes()).ok_or_else(|| Failure {
        code: 3,
        message: format!("{} holds no samples", a.data.display()),
    })?;
    let mut kv = match &a.config {
        Some(path) => parse_kv(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)?,
        None => Vec::new(),
    };
    for o in &a.overrides {
        kv.extend(parse_kv(o)?);
    }
    if !kv.iter().any(|(k, _)| k == "num_classes") {
        kv.insert(0, ("num_classes".into(), classes.to_string()));
    }
    if let Some(m) = a.mode {
        kv.push(("mode".into(), m.to_string()));
    }
    if let Some(v) = a.iters {
        kv.push(("total_iters".into(), v.to_string()));
    }
    if let Some(v) = a.lr {
        kv.push(("lr0".into(), v.to_string()));
    }
    if let Some(v) = a.batch {
        kv.push(("batch".into(), v.to_string()));
    }
    kv.push(("seed".into(), cli.seed.to_string()));
    let mut cfg = RunConfig::default();
    cfg.apply(&kv)?;
    if cfg.net.num_classes != classes {
        return Err(Failure { code: 2, message: format!("dataset has {classes} classes, config asks for {}", cfg.net.num_classes) });
    }
    print_config(&cfg);
    let set = prepare(&cfg.net, &cfg.slic, cfg.train.mode, &data)?;
    let net = Net::<f32>::init(cfg.net.clone(), cli.seed)?;
    let result = train(&cfg.train, net, &set, None)?;
    if let Some(path) = &a.log {
        let mut csv = String::from("iter,loss,lr\n");
        for e in &result.log {
            csv.push_str(&format!("{},{:.6},{:.6e}\n", e.iter, e.loss, e.lr));
        }
        write_text(path, &csv)?;
    }
    if cli.verbose > 0 {
        for e in result.log.iter().step_by(10) {
            eprintln!("iter {:5} loss {:.4} lr {:.3e}", e.iter, e.loss, e.lr);
        }
    }
    save_net(&a.out, &result.net, &cfg, Some(&result.optimizer), cfg.train.total_iters)?;
    let last = result.log.last().map_or(f64::NAN, |e| e.loss);
    println!("final_loss={last:.6}");
    println!("checkpoint={}", a.out.display());
    Ok(())
}

fn print_report(label: &str, r: &EvalReport) {
    println!("{label}miou={:.6}", r.miou);
    println!("{label}boundary_f={:.6}", r.boundary_f);
    println!("{label}pixel_accuracy={:.6}", r.pixel_accuracy);
}

fn load_eval(checkpoint: &Path, data: &Path) -> Result<(ecrf_core::config::LoadedNet, Vec<Prepared>), Failure> {
    let loaded = load_net(checkpoint)?;
    let samples = load_dataset(data)?;
    let cfg = &loaded.config;
    let set = prepare(&cfg.net, &cfg.slic, cfg.train.mode, &samples)?;
    Ok((loaded, set))
}

fn eval_cmd(a: &EvalCmd) -> Outcome {
    let (loaded, set) = load_eval(&a.checkpoint, &a.data)?;
    let report = evaluate(&loaded.net, &set, loaded.config.train.mode)?;
    print_report("", &report);
    if let Some(path) = &a.out {
        let mut csv = String::from("class,iou\n");
        for (c, v) in report.per_class.iter().enumerate() {
            csv.push_str(&format!("{c},{}\n", v.map_or(String::new(), |v| format!("{v:.6}"))));
        }
        write_text(path, &csv)?;
    }
    Ok(())
}

fn crf_cmd(a: &CrfCmd) -> Outcome {
    let loaded = load_net(&a.checkpoint)?;
    let samples = load_dataset(&a.data)?;
    let cfg = &loaded.config;
    let base = GaussianKernelParams::default();
    let params = GaussianKernelParams {
        w1: a.w1.unwrap_or(base.w1),
        w2: a.w2.unwrap_or(base.w2),
        theta_alpha: a.ta.unwrap_or(base.theta_alpha),
        theta_beta: a.tb.unwrap_or(base.theta_beta),
        theta_gamma: a.tg.unwrap_or(base.theta_gamma),
    };
    params.validate()?;
    let mode = cfg.train.mode;
    let set = prepare(&cfg.net, &cfg.slic, mode, &samples)?;
    let classes = loaded.net.classifier.classes();
    print_report("raw_", &evaluate(&loaded.net, &set, mode)?);
    let refined = match a.mode {
        CrfMode::Vanilla => {
            let nb = if a.window == 0 { Neighborhood::AllPairs } else { Neighborhood::Window(a.window) };
            evaluate_with(&set, classes, |s| vanilla_crf_predict(&loaded.net, s, mode, &params, a.steps, nb))?
        }
        CrfMode::Joint => {
            if mode == Mode::Ecrf {
                return Err(Failure { code: 2, message: "joint refinement applies to baseline or joint checkpoints".into() });
            }
            let net_cfg = NetConfig { joint_kernel: params, joint_radius: a.window.max(1), ..cfg.net.clone() };
            let set = prepare(&net_cfg, &cfg.slic, Mode::Joint, &samples)?;
            evaluate(&loaded.net, &set, Mode::Joint)?
        }
    };
    print_report("crf_", &refined);
    Ok(())
}

fn bcwc_cmd(a: &BcwcCmd) -> Outcome {
    let (loaded, set) = load_eval(&a.checkpoint, &a.data)?;
    let curve = bcwc_for(&loaded.net, &set)?;
    write_text(&a.out, &curve.to_csv())?;
    if let Some(svg) = &a.svg {
        write_text(svg, &curve.to_svg())?;
    }
    match curve.mean_top_similarity(a.top) {
        Some(v) => println!("mean_top{}_similarity={v:.6}", a.top),
        None => println!("no adjacent class pairs"),
    }
    Ok(())
}

fn report_rows(rows: &[verify::CheckRow]) -> Outcome {
    for r in rows {
        println!("{r}");
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(numeric_failure(format!("failed checks: {}", failed.join(", "))))
    }
}

fn gradcheck(cli: &Cli, a: &GradcheckCmd) -> Outcome {
    if a.seeds == 0 || !(a.eps > 0.0) {
        return Err(Failure { code: 2, message: "--seeds must be >= 1 and --eps > 0".into() });
    }
    let mut rows = verify::gradtheory_suite(a.seeds, cli.seed, a.eps)?;
    rows.extend(verify::ecrf_layer_suite(a.seeds, cli.seed, a.eps)?);
    rows.extend(verify::mean_field_suite(a.seeds, cli.seed)?);
    rows.extend(verify::tiny_net_suite(cli.seed, 3)?);
    report_rows(&rows)
}

fn angles(cli: &Cli, a: &AnglesCmd) -> Outcome {
    let rows = verify::angle_sweep(a.sweep, cli.seed)?;
    let mut csv = String::from("seed,theta_baseline_deg,theta_joint_deg,theta_ecrf_deg\n");
    for (s, t) in &rows {
        csv.push_str(&format!("{s},{:.6},{:.6},{:.6}\n", t[0].to_degrees(), t[1].to_degrees(), t[2].to_degrees()));
    }
    match &a.out {
        Some(path) => write_text(path, &csv)?,
        None => print!("{csv}"),
    }
    let checks = verify::angle_suite(a.sweep, cli.seed)?;
    if a.out.is_some() {
        report_rows(&checks)
    } else {
        for r in &checks {
            eprintln!("{r}");
        }
        if checks.iter().all(|r| r.passed) {
            Ok(())
        } else {
            Err(numeric_failure("angle ordering violated".into()))
        }
    }
}

fn bench(cli: &Cli, a: &BenchCmd) -> Outcome {
    let table = run_benchmark(&a.sizes, cli.seed)?;
    match &a.out {
        Some(path) => write_text(path, &table.to_csv()),
        None => {
            print!("{}", table.to_csv());
            Ok(())
        }
    }
}
