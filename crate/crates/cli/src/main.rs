use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use patchdiff::harness::{generate_eval_set, run_rf_sweep, sub_seed, sweep_preset, SweepSpec};
use patchdiff::io::config::GuidanceMode;
use patchdiff::io::{
    file_sha256, load_checkpoint, load_image, load_mask, save_checkpoint, save_image, write_loss_csv, write_manifest,
    CoefficientMode, RunConfig,
};
use patchdiff::metrics::{diversity, sifid_report, ExtractorSpec, FeatureExtractor};
use patchdiff::nn::{impulse_probe, probe_size_for, receptive_field};
use patchdiff::sample::{
    sample_outpaint, sample_reference_guided, sample_score_guided, GuidanceSpec, MeanColor, OutpaintTask, PatchTemplate, ReferenceTask,
    ScoreFunction,
};
use patchdiff::train::Trainer;
use patchdiff::{Checkpoint32, Denoiser32, DenoiserConfig, Error, Result, Tensor32};

#[derive(Parser)]
#[command(name = "patchdiff", version, about = "Single-image diffusion with a patch-sized receptive field")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration (TOML). Missing sections take their defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory, overriding `paths.output_dir`.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone, Default)]
struct SampleArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,

    #[arg(long)]
    count: Option<usize>,

    #[arg(long)]
    height: Option<usize>,

    #[arg(long)]
    width: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on one image; writes checkpoint.bin, losses.csv and a manifest.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PNG")]
        image: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Unconditional samples at any divisible size.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sample: SampleArgs,
    },
    /// Regenerate the masked region (white = generate) around a kept source.
    Outpaint {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long, value_name = "PNG")]
        source: Option<PathBuf>,
        #[arg(long, value_name = "PNG")]
        mask: Option<PathBuf>,
    },
    /// Samples steered by an analytic score.
    Guide {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sample: SampleArgs,
        /// `mean-color` or `patch-template`.
        #[arg(long)]
        score: Option<String>,
        /// Comma separated target colour in [-1, 1].
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        target: Option<Vec<f64>>,
        #[arg(long, value_name = "PNG")]
        template: Option<PathBuf>,
        #[arg(long, allow_hyphen_values = true)]
        scale: Option<f64>,
    },
    /// Samples whose low frequencies follow a reference image.
    Edit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sample: SampleArgs,
        #[arg(long, value_name = "PNG")]
        reference: Option<PathBuf>,
        /// Block size of the low-pass filter.
        #[arg(long)]
        factor: Option<usize>,
    },
    /// Fidelity against a real image and diversity of a sample set.
    Eval {
        #[command(flatten)]
        common: Common,
        /// The real image.
        #[arg(long, value_name = "PNG")]
        image: Option<PathBuf>,
        /// Generated images.
        #[arg(required = true, value_name = "PNG")]
        samples: Vec<PathBuf>,
        #[arg(long, value_name = "FILE")]
        extractor_weights: Option<PathBuf>,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<CoefficientMode>,
    },
    /// Analytic and probed receptive field of a denoiser.
    Rf {
        /// Preset name (default, small, enhanced, rf13, rf22, rf46) or run configuration file.
        #[arg(long, default_value = "default")]
        config: String,
        #[arg(long)]
        probe_size: Option<usize>,
    },
    /// Receptive-field ablation: train, sample and score several configs.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PNG")]
        image: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
    },
}

/// `println!` that stops quietly when stdout is closed, e.g. piped into `head`.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn parse_mode(s: &str) -> std::result::Result<CoefficientMode, String> {
    match s {
        "pair-mean" => Ok(CoefficientMode::PairMean),
        "paper-literal" => Ok(CoefficientMode::PaperLiteral),
        _ => Err(format!("unknown mode {s:?}, expected pair-mean or paper-literal")),
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(o) = &common.out {
        c.paths.output_dir = o.clone();
    }
    if let Some(s) = common.seed {
        c.sampling.seed = s;
        c.training.seed = s;
        c.sweep.seed = s;
    }
    Ok(c)
}

fn apply_sample_args(c: &mut RunConfig, a: &SampleArgs) {
    if let Some(p) = &a.checkpoint {
        c.paths.checkpoint = Some(p.clone());
    }
    if let Some(n) = a.count {
        c.sampling.count = n;
    }
    if let Some(h) = a.height {
        c.sampling.height = h;
    }
    if let Some(w) = a.width {
        c.sampling.width = w;
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("{what} is required")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn open_checkpoint(c: &RunConfig) -> Result<(Checkpoint32, Denoiser32, String)> {
    let path = required(&c.paths.checkpoint, "a checkpoint (--checkpoint or paths.checkpoint)")?;
    let ckpt: Checkpoint32 = load_checkpoint(path)?;
    let net = ckpt.ema_denoiser()?;
    Ok((ckpt, net, file_sha256(path)?))
}

/// Writes `sample_XXX.png` files and a manifest.
fn write_samples(c: &RunConfig, command: &str, images: &[(u64, Tensor32)], extra: &[(&str, String)]) -> Result<()> {
    let dir = &c.paths.output_dir;
    create_dir(dir)?;
    let mut fields: Vec<(&str, String)> = extra.to_vec();
    let mut files = String::new();
    for (i, (seed, x)) in images.iter().enumerate() {
        let name = format!("sample_{i:03}.png");
        let path = dir.join(&name);
        save_image(x, &path)?;
        write!(files, "{name}:{seed}:{} ", file_sha256(&path)?).expect("write to string");
        out!("{}", path.display());
    }
    fields.push(("images", files.trim_end().to_string()));
    write_manifest(dir.join("manifest.json"), command, c, &fields)
}

fn cmd_train(mut c: RunConfig, image: Option<PathBuf>, steps: Option<usize>) -> Result<()> {
    if let Some(p) = image {
        c.paths.image = Some(p);
    }
    if let Some(s) = steps {
        c.training.total_steps = s;
    }
    c.validate()?;
    let path = required(&c.paths.image, "a training image (--image or paths.image)")?;
    let loaded = load_image::<f32>(path, c.denoiser.size_multiple())?;
    let schedule = c.schedule.build()?;
    let dir = c.paths.output_dir.clone();
    create_dir(&dir)?;
    let mut trainer = Trainer::new(loaded.tensor, &c.denoiser, &c.training, &schedule)?;
    let total = c.training.total_steps;
    let ckpt = trainer.run(|ck| {
        let name = if ck.step == total { "checkpoint.bin".to_string() } else { format!("checkpoint_{:07}.bin", ck.step) };
        eprintln!("step {}: saving {name}", ck.step);
        save_checkpoint(ck, dir.join(name))
    })?;
    write_loss_csv(dir.join("losses.csv"), trainer.losses())?;
    let crop = loaded.crop;
    write_manifest(
        dir.join("manifest.json"),
        "train",
        &c,
        &[
            ("image", path.display().to_string()),
            ("crop", format!("top={} left={} height={} width={} source={}x{}", crop.top, crop.left, crop.height, crop.width, crop.source_height, crop.source_width)),
            ("steps", ckpt.step.to_string()),
            ("checkpoint_sha256", file_sha256(dir.join("checkpoint.bin"))?),
        ],
    )?;
    out!("{}", dir.join("checkpoint.bin").display());
    Ok(())
}

fn cmd_sample(mut c: RunConfig, a: SampleArgs) -> Result<()> {
    apply_sample_args(&mut c, &a);
    c.validate()?;
    let path = required(&c.paths.checkpoint, "a checkpoint (--checkpoint or paths.checkpoint)")?;
    let ckpt: Checkpoint32 = load_checkpoint(path)?;
    let s = &c.sampling;
    let (manifest, _) = generate_eval_set(&ckpt, &file_sha256(path)?, s.count, s.height, s.width, s.seed, &c.paths.output_dir, c.to_json())?;
    for im in manifest.images {
        out!("{}", c.paths.output_dir.join(im.file).display());
    }
    Ok(())
}

fn seeds(c: &RunConfig) -> Vec<u64> {
    (0..c.sampling.count as u64).map(|i| sub_seed(c.sampling.seed, i)).collect()
}

fn cmd_outpaint(mut c: RunConfig, a: SampleArgs, source: Option<PathBuf>, mask: Option<PathBuf>) -> Result<()> {
    apply_sample_args(&mut c, &a);
    c.guidance.mode = GuidanceMode::Outpaint;
    if source.is_some() {
        c.guidance.source = source;
    }
    if mask.is_some() {
        c.guidance.mask = mask;
    }
    c.validate()?;
    let (_, net, hash) = open_checkpoint(&c)?;
    let src_path = c.guidance.source.as_ref().or(c.paths.image.as_ref()).ok_or_else(|| usage("a source image (--source) is required"))?;
    let src = load_image::<f32>(src_path, net.config().size_multiple())?;
    let mask_path = required(&c.guidance.mask, "a mask image (--mask)")?;
    let full = load_mask::<f32>(mask_path)?;
    let cr = src.crop;
    if full.shape() != (1, cr.source_height, cr.source_width) {
        return Err(Error::shape("outpaint mask", format!("{}x{}", cr.source_height, cr.source_width), format!("{}x{}", full.height(), full.width())));
    }
    let task = OutpaintTask {
        source: src.tensor,
        mask: full.crop(cr.top, cr.left, cr.height, cr.width),
    };
    let schedule = c.schedule.build()?;
    let images = seeds(&c)
        .into_iter()
        .map(|s| sample_outpaint(&net, &schedule, &task, s).map(|x| (s, x)))
        .collect::<Result<Vec<_>>>()?;
    write_samples(&c, "outpaint", &images, &[("checkpoint_sha256", hash)])
}

fn cmd_guide(mut c: RunConfig, a: SampleArgs, score: Option<String>, target: Option<Vec<f64>>, template: Option<PathBuf>, scale: Option<f64>) -> Result<()> {
    apply_sample_args(&mut c, &a);
    c.guidance.mode = GuidanceMode::Score;
    if let Some(s) = score {
        c.guidance.score = s;
    }
    if let Some(t) = target {
        c.guidance.target_color = t;
    }
    if template.is_some() {
        c.guidance.template = template;
    }
    if let Some(s) = scale {
        c.guidance.scale = s;
    }
    c.validate()?;
    let (_, net, hash) = open_checkpoint(&c)?;
    let f: Box<dyn ScoreFunction<f32>> = match c.guidance.score.as_str() {
        "mean-color" => Box::new(MeanColor {
            target: c.guidance.target_color.clone(),
        }),
        "patch-template" => {
            let p = required(&c.guidance.template, "a template image (--template)")?;
            Box::new(PatchTemplate::centered(load_image::<f32>(p, 1)?.tensor))
        }
        other => return Err(usage(format!("unknown score {other:?}, expected mean-color or patch-template"))),
    };
    let spec = GuidanceSpec {
        score: f.as_ref(),
        scale: c.guidance.scale,
    };
    spec.validate()?;
    let schedule = c.schedule.build()?;
    let (h, w) = (c.sampling.height, c.sampling.width);
    let images = seeds(&c)
        .into_iter()
        .map(|s| {
            let g = GuidanceSpec {
                score: f.as_ref(),
                scale: c.guidance.scale,
            };
            sample_score_guided(&net, &schedule, h, w, s, g).map(|x| (s, x))
        })
        .collect::<Result<Vec<_>>>()?;
    write_samples(&c, "guide", &images, &[("checkpoint_sha256", hash), ("score", f.name())])
}

fn cmd_edit(mut c: RunConfig, a: SampleArgs, reference: Option<PathBuf>, factor: Option<usize>) -> Result<()> {
    apply_sample_args(&mut c, &a);
    c.guidance.mode = GuidanceMode::Reference;
    if reference.is_some() {
        c.guidance.reference = reference;
    }
    if let Some(f) = factor {
        c.guidance.downsample_factor = f;
    }
    c.validate()?;
    let (_, net, hash) = open_checkpoint(&c)?;
    let p = required(&c.guidance.reference, "a reference image (--reference)")?;
    let multiple = net.config().size_multiple().max(c.guidance.downsample_factor);
    let task = ReferenceTask::new(load_image::<f32>(p, multiple)?.tensor, c.guidance.downsample_factor);
    task.validate()?;
    let schedule = c.schedule.build()?;
    let images = seeds(&c)
        .into_iter()
        .map(|s| sample_reference_guided(&net, &schedule, &task, s).map(|x| (s, x)))
        .collect::<Result<Vec<_>>>()?;
    write_samples(&c, "edit", &images, &[("checkpoint_sha256", hash)])
}

fn extractor(c: &RunConfig) -> Result<FeatureExtractor> {
    match &c.metrics.extractor_weights {
        Some(p) => FeatureExtractor::load(p, &ExtractorSpec::default()),
        None => FeatureExtractor::seeded(&ExtractorSpec::default(), c.metrics.extractor_seed),
    }
}

fn cmd_eval(mut c: RunConfig, out: Option<PathBuf>, image: Option<PathBuf>, samples: Vec<PathBuf>, weights: Option<PathBuf>, mode: Option<CoefficientMode>) -> Result<()> {
    if image.is_some() {
        c.paths.image = image;
    }
    if weights.is_some() {
        c.metrics.extractor_weights = weights;
    }
    if let Some(m) = mode {
        c.metrics.coefficient_mode = m;
    }
    let ext = extractor(&c)?;
    let images = samples.iter().map(|p| load_image::<f32>(p, 1).map(|l| l.tensor)).collect::<Result<Vec<_>>>()?;
    let mut report = String::new();
    let mut kv = |k: &str, v: String| writeln!(report, "{k} = {v}").expect("write to string");
    kv("extractor", ext.provenance().to_string());
    kv("coefficient_mode", format!("{:?}", c.metrics.coefficient_mode).to_lowercase());
    kv("n", images.len().to_string());
    if let Some(p) = &c.paths.image {
        let real = load_image::<f32>(p, 1)?.tensor;
        let mut total = 0.0;
        for (path, x) in samples.iter().zip(&images) {
            let r = sifid_report(x, &real, &ext)?;
            for w in &r.warnings {
                eprintln!("warning: {}: {w}", path.display());
            }
            kv(&format!("sifid[{}]", path.display()), format!("{:.6e}", r.value));
            total += r.value;
        }
        kv("sifid_mean", format!("{:.6e}", total / images.len() as f64));
    }
    if images.len() >= 2 {
        let d = diversity(&images, &ext, c.metrics.coefficient_mode)?;
        kv("pair_sum", format!("{:.6e}", d.pair_sum));
        kv("diversity", format!("{:.6e}", d.mean_diversity));
    }
    out!("{}", report.trim_end());
    if let Some(dir) = out {
        create_dir(&dir)?;
        let p = dir.join("report.txt");
        fs::write(&p, &report).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

fn cmd_rf(config: &str, probe_size: Option<usize>) -> Result<()> {
    let preset = DenoiserConfig::preset(config).or_else(|| sweep_preset().into_iter().find(|(id, _)| id == config).map(|(_, c)| c));
    let cfg = match preset {
        Some(c) if !Path::new(config).exists() => c,
        _ => RunConfig::load(config)?.denoiser,
    };
    let analytic = receptive_field(&cfg)?;
    let m = cfg.size_multiple();
    let size = probe_size.unwrap_or_else(|| probe_size_for(analytic.width_px.max(analytic.height_px), m));
    let probe_cfg = DenoiserConfig {
        zero_init_output: false,
        ..cfg.clone()
    };
    let net = Denoiser32::new(&probe_cfg, 0)?;
    let probed = impulse_probe(&net, cfg.image_channels, size)?;
    out!("analytic {}x{} px", analytic.height_px, analytic.width_px);
    out!("probed   {}x{} px (probe {size}x{size})", probed.height_px, probed.width_px);
    out!("ratio    {:.4} of {}x{}", analytic.ratio, analytic.reference.0, analytic.reference.1);
    out!("{}", if analytic.width_px == probed.width_px && analytic.height_px == probed.height_px { "match" } else { "MISMATCH" });
    if analytic.width_px != probed.width_px || analytic.height_px != probed.height_px {
        return Err(Error::InvalidRange("analytic and probed receptive fields differ".into()));
    }
    Ok(())
}

fn cmd_sweep(mut c: RunConfig, image: Option<PathBuf>, steps: Option<usize>, samples: Option<usize>) -> Result<()> {
    if image.is_some() {
        c.paths.image = image;
    }
    if let Some(s) = steps {
        c.sweep.train_steps = s;
    }
    if let Some(s) = samples {
        c.sweep.samples_per_config = s;
    }
    let path = required(&c.paths.image, "a training image (--image or paths.image)")?;
    let configs: Vec<(String, DenoiserConfig)> = if c.sweep.configs.is_empty() {
        sweep_preset()
    } else {
        c.sweep.configs.iter().enumerate().map(|(i, d)| (format!("config{i}"), d.clone())).collect()
    };
    let multiple = configs.iter().map(|(_, d)| d.size_multiple()).max().unwrap_or(1);
    let mut training = c.training.clone();
    training.total_steps = c.sweep.train_steps;
    let spec = SweepSpec {
        image_label: path.display().to_string(),
        image: load_image::<f32>(path, multiple)?.tensor,
        configs,
        schedule: c.schedule,
        training,
        samples_per_config: c.sweep.samples_per_config,
        extractor: extractor(&c)?,
        coefficient_mode: c.metrics.coefficient_mode,
        seed: c.sweep.seed,
    };
    let report = run_rf_sweep(&spec, &mut |m| eprintln!("{m}"))?;
    let dir = &c.paths.output_dir;
    create_dir(dir)?;
    let table = report.to_table();
    out!("{}", table.trim_end());
    for (name, text) in [("sweep.txt", table), ("sweep.json", report.to_json())] {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    write_manifest(dir.join("manifest.json"), "sweep", &c, &[])
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, image, steps } => cmd_train(load_config(&common)?, image, steps),
        Command::Sample { common, sample } => cmd_sample(load_config(&common)?, sample),
        Command::Outpaint { common, sample, source, mask } => cmd_outpaint(load_config(&common)?, sample, source, mask),
        Command::Guide {
            common,
            sample,
            score,
            target,
            template,
            scale,
        } => cmd_guide(load_config(&common)?, sample, score, target, template, scale),
        Command::Edit {
            common,
            sample,
            reference,
            factor,
        } => cmd_edit(load_config(&common)?, sample, reference, factor),
        Command::Eval {
            common,
            image,
            samples,
            extractor_weights,
            mode,
        } => cmd_eval(load_config(&common)?, common.out.clone(), image, samples, extractor_weights, mode),
        Command::Rf { config, probe_size } => cmd_rf(&config, probe_size),
        Command::Sweep { common, image, steps, samples } => cmd_sweep(load_config(&common)?, image, steps, samples),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
