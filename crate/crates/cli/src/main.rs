use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use code_core::corpus::{
    export_synthetic, generate_synthetic_corpus, load_image_native, load_manifest, write_rgb_png,
    ShapeKind,
};
use code_core::eval::{
    miou, run_ablation_suite, AblationObserver, AblationPlan, ClassVocabulary, LabelMap, ZeroShotSegmenter,
    DEFAULT_BACKGROUND_THRESHOLD,
};
use code_core::highlight::render_region_prompt;
use code_core::trainer::{
    load_checkpoint, save_checkpoint, synth_config, MetricsSink, NdjsonSink, Profile, StepReport, TrainConfig,
    TrainCorpus, TrainState, Trainer,
};

#[derive(Parser)]
#[command(name = "code", version, about = "Region-word co-decomposition for open-vocabulary segmentation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write metrics and checkpoints.
    Train(TrainArgs),
    /// Score a checkpoint on a labelled manifest.
    Eval(EvalArgs),
    /// Segment one image into a paletted mask PNG.
    Segment(SegmentArgs),
    /// Write a synthetic shapes corpus.
    Synth(SynthArgs),
    /// Train and score the component ablation and the lambda_hcl sweep.
    Ablate(AblateArgs),
    /// Render the learned region prompt as a PNG.
    ExportPrompt(ExportPromptArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file of flat key = value pairs.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile when no config file is given.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// key=value override, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_file(p).with_context(|| format!("reading config {}", p.display()))?,
            None => TrainConfig::for_profile(Profile::parse(&self.profile)?),
        };
        apply_overrides(&mut cfg, &self.set)?;
        Ok(cfg)
    }
}

fn apply_overrides(cfg: &mut TrainConfig, set: &[String]) -> Result<()> {
    for kv in set {
        cfg.apply_override(kv).with_context(|| format!("override {kv}"))?;
    }
    cfg.validate()?;
    Ok(())
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory for metrics.ndjson, checkpoints/ and final.ckpt.
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Continue from a checkpoint; its config is used, then --set applies.
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    /// Progress line to stderr every N steps (0 = quiet).
    #[arg(long, default_value_t = 100)]
    log_every: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Manifest whose entries carry a `labels` PNG.
    #[arg(long)]
    manifest: PathBuf,
    /// Class file, one name per line; a leading "background" line enables
    /// the background label 0.
    #[arg(long)]
    classes: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BACKGROUND_THRESHOLD)]
    background_threshold: f64,
    /// Embed class names with the fixed template instead of the learned
    /// context.
    #[arg(long)]
    template: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Comma-separated class names; label k + 1 is the k-th name and 0 is
    /// background.
    #[arg(long)]
    classes: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BACKGROUND_THRESHOLD)]
    background_threshold: f64,
    /// Every pixel gets a class; label k is the k-th name.
    #[arg(long)]
    no_background: bool,
    #[arg(long)]
    template: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Output directory for per-run metrics, checkpoints and ablation.json.
    #[arg(long, default_value = "runs/ablate")]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    eval_n: usize,
    #[arg(long, default_value_t = 1000)]
    eval_seed: u64,
    /// Skip the lambda_hcl sweep.
    #[arg(long)]
    no_sweep: bool,
    /// Skip writing a checkpoint per run.
    #[arg(long)]
    no_checkpoints: bool,
}

#[derive(Args)]
struct ExportPromptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train(a) => train(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Segment(a) => segment(a),
        Cmd::Synth(a) => synth(a),
        Cmd::Ablate(a) => ablate(a),
        Cmd::ExportPrompt(a) => export_prompt(a),
    }
}

/// Writes NDJSON and echoes a progress line every `every` steps.
struct Progress<W: Write> {
    inner: NdjsonSink<W>,
    every: u64,
    label: String,
}

impl<W: Write> MetricsSink for Progress<W> {
    fn record(&mut self, r: &StepReport) -> std::io::Result<()> {
        self.inner.record(r)?;
        if self.every > 0 && r.step % self.every == 0 {
            let fmt = |v: Option<f64>| v.map_or_else(|| "-".into(), |v| format!("{v:.4}"));
            eprintln!(
                "{}step {} lr {:.2e} loss {:.4} kg {} seg_v {} seg_t {} hcl {}",
                self.label,
                r.step,
                r.lr,
                r.total,
                fmt(r.parts.kg),
                fmt(r.parts.seg_v),
                fmt(r.parts.seg_t),
                fmt(r.parts.hcl)
            );
        }
        Ok(())
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn train(a: TrainArgs) -> Result<()> {
    create_dir(&a.out)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let (mut cfg, state) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
            apply_overrides(&mut cfg, &a.cfg.set)?;
            let corpus = TrainCorpus::load(&cfg)?;
            Trainer::resume(cfg, corpus, state)?
        }
        None => {
            let cfg = a.cfg.load()?;
            let corpus = TrainCorpus::load(&cfg)?;
            Trainer::new(cfg, corpus)?
        }
    };
    let metrics = a.out.join("metrics.ndjson");
    let file = fs::OpenOptions::new()
        .create(true)
        .append(a.resume.is_some())
        .write(true)
        .truncate(a.resume.is_none())
        .open(&metrics)
        .with_context(|| format!("opening {}", metrics.display()))?;
    let mut sink = Progress {
        inner: NdjsonSink::new(BufWriter::new(file)),
        every: a.log_every,
        label: String::new(),
    };
    trainer.run(&mut sink, Some(&a.out.join("checkpoints")))?;
    let last = a.out.join("final.ckpt");
    save_checkpoint(&trainer.cfg, &trainer.state, &last)?;
    eprintln!("wrote {} and {}", metrics.display(), last.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<TrainState> {
    let (_, state) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(state)
}

fn eval(a: EvalArgs) -> Result<()> {
    let state = load_model(&a.checkpoint)?;
    let vocab = ClassVocabulary::from_file(&a.classes, a.background_threshold)?;
    let manifest = load_manifest(&a.manifest)?;
    let seg = ZeroShotSegmenter::new(&state.model, vocab.clone(), a.template)?;
    let mut preds = Vec::with_capacity(manifest.len());
    let mut gts = Vec::with_capacity(manifest.len());
    for (i, e) in manifest.entries.iter().enumerate() {
        let Some(labels) = &e.labels else {
            bail!("manifest entry {} ({}) has no labels", i + 1, e.image);
        };
        let gt = LabelMap::read_png(&manifest.resolve(labels))?;
        let image = load_image_native(manifest.resolve(&e.image))?;
        if (image.height, image.width) != (gt.height, gt.width) {
            bail!("{}: image is {}x{}, labels {}x{}", e.image, image.height, image.width, gt.height, gt.width);
        }
        preds.push(seg.segment(&image)?.labels);
        gts.push(gt);
    }
    let report = miou(&preds, &gts, &vocab)?;
    let json = report.to_json();
    if let Some(out) = &a.out {
        fs::write(out, &json).with_context(|| format!("writing {}", out.display()))?;
    }
    println!("{json}");
    Ok(())
}

fn segment(a: SegmentArgs) -> Result<()> {
    let state = load_model(&a.checkpoint)?;
    let vocab = ClassVocabulary::parse_list(&a.classes, !a.no_background, a.background_threshold)?;
    let image = load_image_native(&a.image)?;
    let seg = ZeroShotSegmenter::new(&state.model, vocab, a.template)?.segment(&image)?;
    seg.labels.write_png(&a.out)?;
    eprintln!("wrote {} ({}x{})", a.out.display(), seg.labels.width, seg.labels.height);
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    let samples = generate_synthetic_corpus(&synth_config(&cfg, a.n, a.seed))?;
    let manifest = export_synthetic(&samples, &ShapeKind::ALL, &a.out)?;
    eprintln!("wrote {} samples to {}", samples.len(), manifest.display());
    Ok(())
}

struct AblateFiles {
    dir: PathBuf,
    checkpoints: bool,
}

fn run_slug(run: &str) -> String {
    run.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' })
        .collect()
}

impl AblationObserver for AblateFiles {
    fn sink(&mut self, run: &str) -> code_core::error::Result<Box<dyn MetricsSink>> {
        let path = self.dir.join(format!("{}.ndjson", run_slug(run)));
        let f = File::create(&path).map_err(|e| code_core::error::Error::io(&path, e))?;
        eprintln!("training {run}");
        Ok(Box::new(Progress {
            inner: NdjsonSink::new(BufWriter::new(f)),
            every: 500,
            label: format!("[{run}] "),
        }))
    }

    fn finished(&mut self, run: &str, cfg: &TrainConfig, state: &TrainState) -> code_core::error::Result<()> {
        if self.checkpoints {
            save_checkpoint(cfg, state, &self.dir.join(format!("{}.ckpt", run_slug(run))))?;
        }
        Ok(())
    }
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = a.cfg.load()?;
    create_dir(&a.out)?;
    let mut plan = AblationPlan::new(cfg);
    plan.eval_n = a.eval_n;
    plan.eval_seed = a.eval_seed;
    if a.no_sweep {
        plan.hcl_sweep.clear();
    }
    let mut files = AblateFiles {
        dir: a.out.clone(),
        checkpoints: !a.no_checkpoints,
    };
    let report = run_ablation_suite(&plan, &mut files)?;
    let path = a.out.join("ablation.json");
    fs::write(&path, report.to_json()).with_context(|| format!("writing {}", path.display()))?;
    print!("{}", report.to_table());
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn export_prompt(a: ExportPromptArgs) -> Result<()> {
    let state = load_model(&a.checkpoint)?;
    let m = &state.model;
    let size = m.cfg.encoder.image_size;
    let pixels = render_region_prompt(m.store.get(m.prompts.region));
    write_rgb_png(&a.out, size, size, &pixels)?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}
