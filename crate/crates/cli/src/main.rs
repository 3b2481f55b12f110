use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use mltr::data::{decode_image, resize_bilinear, save_dataset};
use mltr::gradcheck::GradCheckOptions;
use mltr::harness::{
    evaluate_model, export_heatmaps, model_gradcheck, tiny_batch, train, Checkpoint, Settings,
};
use mltr::losses::LossConfig;
use mltr::model::{
    flops_analytical, flops_measured, polynomial_degree, AttentionMode, MlTr, VariantSpec,
};
use mltr::{Error, Result};

const EXIT_INTERNAL: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;
const EXIT_VERIFICATION: u8 = 5;

#[derive(Parser)]
#[command(
    name = "mltr",
    version,
    about = "Multi-label windowed transformer toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints and a metric log.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Print the report as JSON instead of key=value lines.
        #[arg(long)]
        json: bool,
    },
    /// Compare analytic gradients of the full loss with finite differences.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        variant: String,
        /// Seeds to check, one model per seed.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        /// Sampled coordinates per parameter tensor; 0 checks every coordinate.
        #[arg(long, default_value_t = 16)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Print analytical attention cost and optionally verify it by counting.
    Flops {
        /// ga, pa or cwa; all three when omitted.
        #[arg(long)]
        mode: Option<AttentionMode>,
        #[arg(long, default_value_t = 56)]
        h: usize,
        #[arg(long, default_value_t = 56)]
        w: usize,
        #[arg(long, default_value_t = 96)]
        channels: usize,
        #[arg(long, default_value_t = 7)]
        window: usize,
        /// Run the attention core and compare the counted multiply-adds.
        #[arg(long)]
        verify: bool,
        /// Channel counts for a growth-order fit, e.g. 8,16,32,64.
        #[arg(long, value_delimiter = ',')]
        sweep: Vec<usize>,
    },
    /// Export last-layer channel heatmaps for one image.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Image file; resized to the model resolution.
        #[arg(long, conflicts_with = "sample")]
        image: Option<PathBuf>,
        /// Index into the dataset described by --config/--set.
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        channels: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate a synthetic dataset on disk.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        canvas: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// demo or plain
        #[arg(long, default_value = "demo")]
        preset: String,
    },
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set lr=1e-3. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn settings(&self) -> Result<Settings> {
        let mut s = match &self.config {
            Some(p) => Settings::from_file(p)?,
            None => Settings::default(),
        };
        for pair in &self.overrides {
            s.set_pair(pair)?;
        }
        Ok(s)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => EXIT_DATA,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Verification(_) => EXIT_VERIFICATION,
        _ => EXIT_INTERNAL,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MLTR_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(args) => cmd_train(&args),
        Command::Eval {
            checkpoint,
            config,
            json,
        } => cmd_eval(&checkpoint, &config, json),
        Command::Gradcheck {
            variant,
            seeds,
            classes,
            batch,
            coords,
            tolerance,
        } => cmd_gradcheck(&variant, &seeds, classes, batch, coords, tolerance),
        Command::Flops {
            mode,
            h,
            w,
            channels,
            window,
            verify,
            sweep,
        } => cmd_flops(mode, h, w, channels, window, verify, &sweep),
        Command::Heatmap {
            checkpoint,
            image,
            sample,
            channels,
            out,
            config,
        } => cmd_heatmap(&checkpoint, image, sample, &channels, &out, &config),
        Command::SynthGen {
            out,
            count,
            classes,
            canvas,
            seed,
            preset,
        } => {
            let mut s = Settings::default();
            s.set("data.classes", &classes.to_string())?;
            s.set("data.seed", &seed.to_string())?;
            s.set("data.preset", &preset)?;
            let spec = s.synth_spec(canvas)?;
            let ds = mltr::data::generate(&spec, count)?;
            save_dataset(&out, &ds, Some(&spec))?;
            println!("wrote {} samples to {}", ds.len(), out.display());
            Ok(())
        }
    }
}

fn cmd_train(args: &ConfigArgs) -> Result<()> {
    let s = args.settings()?;
    let cfg = s.train_config()?;
    let data = s.dataset(cfg.variant.resolution)?;
    info!("training {} on {} samples", cfg.variant, data.len());
    let out = train(&cfg, &data)?;
    println!("epochs={}", out.epochs_done);
    println!("stopped_early={}", out.stopped_early);
    if let Some(ev) = out.last_eval() {
        print!("{}", ev.report.to_kv());
        println!("loss={:.6}", ev.loss);
        println!("count_accuracy={:.6}", ev.count_accuracy);
    }
    Ok(())
}

fn cmd_eval(checkpoint: &PathBuf, args: &ConfigArgs, json: bool) -> Result<()> {
    let s = args.settings()?;
    let cfg = s.train_config()?;
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let data = s.dataset(model.spec.resolution)?;
    let ev = evaluate_model(&model, &data, &cfg.loss, cfg.batch_size, cfg.threshold)?;
    if json {
        println!("{}", ev.report.to_json());
    } else {
        print!("{}", ev.report.to_kv());
        println!("loss={:.6}", ev.loss);
        println!("count_accuracy={:.6}", ev.count_accuracy);
    }
    Ok(())
}

fn cmd_gradcheck(
    variant: &str,
    seeds: &[u64],
    classes: usize,
    batch: usize,
    coords: usize,
    tolerance: f64,
) -> Result<()> {
    let spec = VariantSpec::builtin(variant)?;
    let loss = LossConfig::default();
    let mut failed = Vec::new();
    for &seed in seeds {
        let mut model = MlTr::new(spec.clone(), classes, seed)?;
        let (x, y) = tiny_batch(&model, batch, seed);
        let opts = GradCheckOptions {
            tolerance: tolerance as _,
            coords_per_param: (coords > 0).then_some(coords),
            seed,
            ..Default::default()
        };
        let report = model_gradcheck(&mut model, &x, &y, &loss, &opts)?;
        println!("seed {seed}: {report}");
        if !report.passed {
            failed.push(seed);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "gradient check failed for seeds {failed:?}"
        )))
    }
}

fn cmd_flops(
    mode: Option<AttentionMode>,
    h: usize,
    w: usize,
    channels: usize,
    window: usize,
    verify: bool,
    sweep: &[usize],
) -> Result<()> {
    let modes: Vec<AttentionMode> = match mode {
        Some(m) => vec![m],
        None => AttentionMode::ALL.to_vec(),
    };
    let mut mismatches = 0;
    println!("mode  h    w    C     ws  flops           params     note");
    for &m in &modes {
        let r = flops_analytical(m, h, w, channels, window)?;
        print!(
            "{:<5} {:<4} {:<4} {:<5} {:<3} {:<15} {:<10} {}",
            m.label(),
            h,
            w,
            channels,
            window,
            r.flops,
            r.params,
            r.params_note
        );
        if verify {
            let measured = flops_measured(m, h, w, channels, window)?;
            let ok = measured == r.flops;
            mismatches += usize::from(!ok);
            print!(
                "  measured={measured} {}",
                if ok { "OK" } else { "MISMATCH" }
            );
        }
        println!();
    }
    if !sweep.is_empty() {
        println!("growth in C at h={h} w={w} ws={window}:");
        let xs: Vec<f64> = sweep.iter().map(|&c| c as f64).collect();
        for &m in &modes {
            let ys = sweep
                .iter()
                .map(|&c| flops_analytical(m, h, w, c, window).map(|r| r.flops as f64))
                .collect::<Result<Vec<_>>>()?;
            let order = match polynomial_degree(&xs, &ys) {
                0 => "constant",
                1 => "linear",
                2 => "quadratic",
                _ => "higher",
            };
            println!("{:<5} {order}", m.label());
        }
    }
    if mismatches > 0 {
        return Err(Error::Verification(format!(
            "{mismatches} measured count(s) differ from the analytical value"
        )));
    }
    Ok(())
}

fn cmd_heatmap(
    checkpoint: &PathBuf,
    image: Option<PathBuf>,
    sample: Option<usize>,
    channels: &[usize],
    out: &PathBuf,
    args: &ConfigArgs,
) -> Result<()> {
    let model = Checkpoint::load(checkpoint)?.to_model()?;
    let r = model.spec.resolution;
    let img = match (image, sample) {
        (Some(p), _) => {
            let t = decode_image(&p)?;
            if t.shape()[1..] == [r, r] {
                t
            } else {
                resize_bilinear(&t, r, r)?
            }
        }
        (None, Some(i)) => {
            let data = args.settings()?.dataset(r)?;
            data.images.get(i).cloned().ok_or_else(|| {
                Error::Data(format!("sample {i} out of range ({} samples)", data.len()))
            })?
        }
        (None, None) => return Err(Error::Config("heatmap needs --image or --sample".into())),
    };
    for p in export_heatmaps(&model, &img, channels, out)? {
        println!("{}", p.display());
    }
    Ok(())
}
