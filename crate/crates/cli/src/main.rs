use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use promptsr::analyzer::{self, CsaPairs, Mechanism, ProbeSettings};
use promptsr::data::{downscale, load_pair, synth_image, ImageBuffer, Manifest, Record};
use promptsr::metrics::EvalReport;
use promptsr::model::{parse_kv, ModelConfig, PromptSr};
use promptsr::nn::load_params;
use promptsr::train::{parse_run_config, TrainConfig, Trainer, CONFIG_FILE, LOSS_FILE, MODEL_FILE};

#[derive(Parser)]
#[command(name = "promptsr", version, about = "Lightweight prompt-driven image super-resolution")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write bicubic-downscaled LR images and a paired manifest.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write procedural HR images and a manifest listing them.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a manifest, or resume with `--checkpoint`.
    Train {
        /// `key=value` model and schedule settings, plus `manifest=`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training manifest; overrides the config file.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scale: Option<usize>,
        /// Stop after this many steps in total (default: the schedule length).
        #[arg(long)]
        steps: Option<usize>,
        /// Checkpoint directory to resume from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Print a progress line every this many steps.
        #[arg(long, default_value_t = 10)]
        log_every: usize,
    },
    /// Upscale one image.
    Infer {
        /// Checkpoint directory, or a weights file next to a config.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR/SSIM over a manifest. With a checkpoint, LR images are upscaled
    /// and compared with HR; without one, the two manifest columns are
    /// compared directly.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Border shaved before scoring (default: the scale).
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long)]
        scale: Option<usize>,
        /// CSV report path (default: stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Parameter and multiply-add report.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        scale: Option<usize>,
        #[arg(long, default_value_t = 1280)]
        hr_width: usize,
        #[arg(long, default_value_t = 720)]
        hr_height: usize,
        /// List every layer.
        #[arg(long)]
        per_layer: bool,
        /// Add the attention scaling probe and the downscale ablation.
        #[arg(long)]
        extended: bool,
        /// Directory for CSV copies of the report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.common.threads {
        promptsr::par::set_threads(t);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            eprintln!("error: {}", chain.join(": "));
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Prepare { manifest, scale, out } => prepare(&manifest, scale, &out),
        Command::Synth { out, count, size, seed } => synth(&out, count, size, seed),
        Command::Train {
            config,
            manifest,
            seed,
            scale,
            steps,
            checkpoint,
            out,
            log_every,
        } => train(TrainArgs {
            config,
            manifest,
            seed,
            scale,
            steps,
            checkpoint,
            out,
            log_every,
        }),
        Command::Infer {
            checkpoint,
            config,
            input,
            out,
        } => infer(&checkpoint, config.as_deref(), &input, &out),
        Command::Eval {
            manifest,
            checkpoint,
            config,
            crop,
            scale,
            out,
        } => eval(&manifest, checkpoint.as_deref(), config.as_deref(), crop, scale, out.as_deref()),
        Command::Analyze {
            config,
            scale,
            hr_width,
            hr_height,
            per_layer,
            extended,
            out,
        } => analyze(config.as_deref(), scale, (hr_width, hr_height), per_layer, extended, out.as_deref()),
    }
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

fn prepare(manifest: &Path, scale: usize, out: &Path) -> Result<()> {
    let m = Manifest::load(manifest, scale)?;
    let (hr_dir, lr_dir) = (out.join("hr"), out.join(format!("lr_x{scale}")));
    fs::create_dir_all(&hr_dir)?;
    fs::create_dir_all(&lr_dir)?;
    let mut lines = Vec::new();
    let mut failed = 0;
    for r in &m.records {
        let name = format!("{}.ppm", file_stem(&r.hr));
        let done = (|| -> Result<()> {
            let hr = ImageBuffer::read(&r.hr)?.crop_to_multiple(scale)?;
            let lr = downscale(&hr, scale)?;
            hr.write(hr_dir.join(&name))?;
            lr.write(lr_dir.join(&name))?;
            Ok(())
        })();
        match done {
            Ok(()) => lines.push(Record {
                hr: Path::new("hr").join(&name),
                lr: Some(Path::new(&format!("lr_x{scale}")).join(&name)),
            }),
            Err(e) => {
                failed += 1;
                eprintln!("error: {}: {e:#}", r.hr.display());
            }
        }
    }
    let paired = Manifest { records: lines, scale };
    fs::write(out.join("manifest.txt"), paired.to_text())?;
    println!("prepared {} pairs at x{scale} in {}", paired.records.len(), out.display());
    if failed > 0 {
        bail!("{failed} image(s) failed");
    }
    Ok(())
}

fn synth(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    if size == 0 {
        bail!("size must be positive");
    }
    fs::create_dir_all(out)?;
    let mut m = Manifest { records: Vec::new(), scale: 1 };
    for i in 0..count {
        let name = format!("synth_{i:03}.ppm");
        synth_image(size, size, seed.wrapping_add(i as u64)).write(out.join(&name))?;
        m.records.push(Record { hr: name.into(), lr: None });
    }
    fs::write(out.join("manifest.txt"), m.to_text())?;
    println!("wrote {count} images to {}", out.display());
    Ok(())
}

struct TrainArgs {
    config: Option<PathBuf>,
    manifest: Option<PathBuf>,
    seed: Option<u64>,
    scale: Option<usize>,
    steps: Option<usize>,
    checkpoint: Option<PathBuf>,
    out: PathBuf,
    log_every: usize,
}

/// Reads a run config, splitting off the `manifest` key.
fn read_run_config(path: Option<&Path>) -> Result<(ModelConfig, TrainConfig, Option<PathBuf>)> {
    let Some(path) = path else {
        return Ok((ModelConfig::default(), TrainConfig::default(), None));
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut manifest = None;
    let mut rest = String::new();
    for (k, v) in parse_kv(&text)? {
        if k == "manifest" {
            let base = path.parent().unwrap_or(Path::new(""));
            manifest = Some(base.join(v));
        } else {
            rest.push_str(&format!("{k}={v}\n"));
        }
    }
    let (m, t) = parse_run_config(&rest, ModelConfig::default(), TrainConfig::default())?;
    Ok((m, t, manifest))
}

fn train(a: TrainArgs) -> Result<()> {
    let (mut trainer, manifest) = match &a.checkpoint {
        Some(dir) => {
            let t = Trainer::resume(dir).with_context(|| format!("resuming from {}", dir.display()))?;
            (t, a.manifest.clone())
        }
        None => {
            let (mut model, mut schedule, from_file) = read_run_config(a.config.as_deref())?;
            if let Some(s) = a.scale {
                model.scale = s;
            }
            if let Some(s) = a.seed {
                schedule.seed = s;
            }
            model.validate()?;
            (Trainer::new(model, schedule)?, a.manifest.clone().or(from_file))
        }
    };
    if a.checkpoint.is_some() && (a.seed.is_some() || a.scale.is_some()) {
        bail!("--seed and --scale cannot change a resumed run");
    }
    let manifest = manifest.context("no training manifest (use --manifest or manifest= in the config)")?;
    let scale = trainer.model.config().scale;
    let m = Manifest::load(&manifest, scale)?;
    let pairs = m
        .records
        .iter()
        .map(|r| load_pair(r, scale).with_context(|| format!("loading {}", r.hr.display())))
        .collect::<Result<Vec<_>>>()?;
    let until = a.steps.unwrap_or(trainer.config.steps);
    let start = Instant::now();
    let every = a.log_every.max(1);
    trainer.run(&pairs, until, Some(&a.out), |r| {
        if r.step % every == 0 || r.step == until {
            eprintln!("step {:>7}  lr {:.3e}  loss {:.6}  {:.1}s", r.step, r.lr, r.loss, start.elapsed().as_secs_f64());
        }
    })?;
    println!(
        "trained to step {} ({} params); checkpoint and {LOSS_FILE} in {}",
        trainer.step,
        trainer.model.param_count(),
        a.out.display()
    );
    Ok(())
}

/// Builds a model from a checkpoint directory (weights + sidecar) or a
/// weights file with an explicit or sibling config.
fn load_model(checkpoint: &Path, config: Option<&Path>) -> Result<PromptSr<f32>> {
    let (weights, sidecar) = if checkpoint.is_dir() {
        (checkpoint.join(MODEL_FILE), checkpoint.join(CONFIG_FILE))
    } else {
        let dir = checkpoint.parent().unwrap_or(Path::new(""));
        (checkpoint.to_path_buf(), dir.join(CONFIG_FILE))
    };
    let cfg_path = config.map(Path::to_path_buf).unwrap_or(sidecar);
    let (model_cfg, _, _) = read_run_config(Some(&cfg_path))?;
    let mut model = PromptSr::<f32>::new(model_cfg, 0)?;
    let mut r = std::io::BufReader::new(fs::File::open(&weights).with_context(|| format!("opening {}", weights.display()))?);
    load_params(model.params_mut(), &mut r).with_context(|| format!("loading {}", weights.display()))?;
    Ok(model)
}

fn infer(checkpoint: &Path, config: Option<&Path>, input: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint, config)?;
    let img = ImageBuffer::read(input)?;
    let sr = ImageBuffer::from_tensor(&model.upscale(&img.to_tensor())?)?;
    sr.write(out)?;
    println!("{}x{} -> {}x{} written to {}", img.width(), img.height(), sr.width(), sr.height(), out.display());
    Ok(())
}

fn eval(
    manifest: &Path,
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    crop: Option<usize>,
    scale: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let model = checkpoint.map(|c| load_model(c, config)).transpose()?;
    let s = match (&model, scale) {
        (Some(m), Some(s)) if s != m.config().scale => bail!("--scale {s} disagrees with the x{} checkpoint", m.config().scale),
        (Some(m), _) => m.config().scale,
        (None, s) => s.unwrap_or(1),
    };
    let m = Manifest::load(manifest, s)?;
    let mut report = EvalReport::new(crop.unwrap_or(s));
    for r in &m.records {
        let (sr, hr) = match &model {
            Some(model) => {
                let (hr, lr) = load_pair(r, s)?;
                (ImageBuffer::from_tensor(&model.upscale(&lr.to_tensor())?)?, hr)
            }
            None => {
                let other = r.lr.as_ref().with_context(|| format!("{}: no second column to compare", r.hr.display()))?;
                (ImageBuffer::read(other)?, ImageBuffer::read(&r.hr)?)
            }
        };
        report.push(r.name(), &sr, &hr).with_context(|| r.hr.display().to_string())?;
    }
    let csv = report.to_csv();
    print!("{csv}");
    if let Some(p) = out {
        fs::write(p, &csv)?;
    }
    Ok(())
}

fn analyze(
    config: Option<&Path>,
    scale: Option<usize>,
    (hr_w, hr_h): (usize, usize),
    per_layer: bool,
    extended: bool,
    out: Option<&Path>,
) -> Result<()> {
    let (mut cfg, _, _) = read_run_config(config)?;
    if let Some(s) = scale {
        cfg.scale = s;
        cfg.validate()?;
    }
    let s = cfg.scale;
    if hr_w % s != 0 || hr_h % s != 0 {
        bail!("{hr_w}x{hr_h} output is not divisible by scale {s}");
    }
    let ledger = analyzer::ledger(&cfg, hr_h / s, hr_w / s, CsaPairs::UpperBound)?;
    println!("# model: x{s}, {hr_w}x{hr_h} HR output");
    print!("{}", ledger.to_text(per_layer));
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ledger.csv"), ledger.to_csv())?;
    }
    if extended {
        let sides = [16, 32, 64, 128];
        let mut probe_csv = String::new();
        for mech in [Mechanism::Sa, Mechanism::Wsa, Mechanism::Gapl, Mechanism::GaplFixedD] {
            let t = analyzer::asymptotic_probe(mech, &sides, &ProbeSettings::default())?;
            println!();
            print!("{}", t.to_text());
            let csv = t.to_csv();
            probe_csv.push_str(if probe_csv.is_empty() { &csv } else { csv.split_once('\n').map_or("", |x| x.1) });
        }
        let ab = analyzer::downscale_ablation(&cfg, &[2, 4, 8], hr_w, hr_h)?;
        println!("\n{:>4}  {:>10}  {:>16}", "d", "params", "multi_adds");
        let mut ab_csv = String::from("d,params,multi_adds\n");
        for (d, p, m) in &ab {
            println!("{d:>4}  {p:>10}  {m:>16}");
            ab_csv.push_str(&format!("{d},{p},{m}\n"));
        }
        if let Some(dir) = out {
            fs::write(dir.join("probe.csv"), probe_csv)?;
            fs::write(dir.join("ablation.csv"), ab_csv)?;
        }
    }
    Ok(())
}
