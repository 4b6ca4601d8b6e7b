//! Command-line front end.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    psnr, read_dataset, read_pfm, ssim, write_dataset, write_pfm, write_png, FloatImage, IdentityViews,
    MultiViewDataset, Rig, Split, PSNR_CAP,
};
use crate::error::{Error, Result};
use crate::experiments::{
    evaluate, format_table, init_sweep, mean_psnr, mean_ssim, regularization_sweep, scratch_comparison,
    train_desk_prior, DeskProfile, Regularization,
};
use crate::field::{read_checkpoint, write_checkpoint, Checkpoint, FieldParams, LatentTable};
use crate::renderer::{render_image, RenderConfig};
use crate::training::{
    finetune_with, invert_latent, train_prior_with, write_log, FitConfig, InitStrategy, PriorModel,
    StepRecord, TrainConfig,
};

#[derive(Parser, Debug)]
#[command(name = "face-prior", version, about = "Latent-conditioned radiance field prior: data, training, fitting, evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// TOML file with the command's settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    /// Setting override as `dotted.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-view dataset.
    GenData,
    /// Train the prior on a dataset's training identities.
    TrainPrior(DataArgs),
    /// Recover a latent code for one identity with the prior frozen.
    Invert(TargetArgs),
    /// Finetune the prior and a code on one identity.
    Finetune(FinetuneArgs),
    /// Render color, depth and normals along an orbit.
    Render(RenderArgs),
    /// Score images (or a model on a dataset identity) with PSNR and SSIM.
    Eval(EvalArgs),
    /// Initialization and regularization sweeps on the desk profile.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset root written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args, Debug)]
pub struct TargetArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Prior checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Identity id within the dataset.
    #[arg(long)]
    pub identity: String,
    /// Views used for fitting (all when omitted).
    #[arg(long, value_delimiter = ',')]
    pub views: Vec<usize>,
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub target: TargetArgs,
    /// Starting code from `invert`; inversion runs first when omitted.
    #[arg(long)]
    pub latent: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Code file; otherwise row `code` of the checkpoint's table.
    #[arg(long)]
    pub latent: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub code: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted `.pfm` images.
    #[arg(long, requires = "reference")]
    pub predicted: Option<PathBuf>,
    /// Directory of reference `.pfm` images with matching names.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Model checkpoint to render instead of reading predictions.
    #[arg(long, conflicts_with = "predicted", requires_all = ["data", "identity"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub latent: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub identity: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub views: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    Init,
    Regularization,
    Scratch,
    All,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long, value_enum, default_value_t = Sweep::All)]
    pub sweep: Sweep,
    /// Trained desk prior to reuse; trained from scratch when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenDataConfig {
    pub identities: usize,
    pub views: usize,
    pub resolution: u32,
    /// Identity indices tagged as held out.
    pub holdout: Vec<usize>,
    pub seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            identities: 8,
            views: 8,
            resolution: 64,
            holdout: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderJob {
    pub render: RenderConfig,
    pub frames: usize,
    pub resolution: u32,
    /// Orbit angle from the frontal axis, radians.
    pub polar: f64,
    pub threads: usize,
    pub seed: u64,
}

impl Default for RenderJob {
    fn default() -> Self {
        RenderJob {
            render: RenderConfig::default(),
            frames: 8,
            resolution: 64,
            polar: 0.5,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalJob {
    pub render: RenderConfig,
    /// Score over the reference foreground only.
    pub masked: bool,
    pub threads: usize,
    pub seed: u64,
}

impl Default for EvalJob {
    fn default() -> Self {
        EvalJob {
            render: RenderConfig::default(),
            masked: true,
            threads: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateJob {
    pub profile: DeskProfile,
    pub seed: u64,
    pub threads: usize,
}

impl Default for AblateJob {
    fn default() -> Self {
        AblateJob {
            profile: DeskProfile::default(),
            seed: 0,
            threads: 1,
        }
    }
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_literal(value: &str) -> toml::Value {
    format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()))
}

/// Applies `key.path=value` overrides to a settings table.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("bad override key {key:?}")));
        }
        let mut node = &mut *table;
        for part in &path[..path.len() - 1] {
            let entry = node
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override {key:?}: {part} is not a table")))?;
        }
        node.insert(path[path.len() - 1].to_string(), parse_literal(value.trim()));
    }
    Ok(())
}

fn merge(base: &mut toml::Table, layer: toml::Table) {
    for (key, value) in layer {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(l)) => merge(b, l),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

/// Layers the optional config file and the overrides over the defaults of
/// `C` and deserializes, rejecting unknown keys.
pub fn load_config<C: DeserializeOwned + Serialize + Default>(
    path: Option<&Path>,
    overrides: &[String],
) -> Result<C> {
    let mut table = toml::Table::try_from(C::default()).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let file = text
            .parse::<toml::Table>()
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        merge(&mut table, file);
    }
    apply_overrides(&mut table, overrides)?;
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}

/// Canonical TOML text of a resolved config and its SHA-256.
pub fn config_fingerprint<C: Serialize>(config: &C) -> Result<(String, String)> {
    let text = toml::to_string(config).map_err(|e| Error::Config(e.to_string()))?;
    let digest = Sha256::digest(text.as_bytes());
    let hex = digest.iter().fold(String::new(), |mut s, b| {
        write!(s, "{b:02x}").unwrap();
        s
    });
    Ok((text, hex))
}

/// Header lines written at the top of every run log.
pub fn reproducibility_header<C: Serialize>(command: &str, seed: u64, config: &C) -> Result<Vec<String>> {
    let (text, hash) = config_fingerprint(config)?;
    let mut lines = vec![
        format!("face-prior {}", env!("CARGO_PKG_VERSION")),
        format!("command {command}"),
        format!("seed {seed}"),
        format!("config_hash {hash}"),
        "config:".to_string(),
    ];
    lines.extend(text.lines().filter(|l| !l.is_empty()).map(|l| format!("  {l}")));
    Ok(lines)
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_header(path: &Path, header: &[String]) -> Result<()> {
    let text: String = header.iter().map(|l| format!("# {l}\n")).collect();
    write_text(path, &text)
}

pub fn write_latent(path: &Path, code: &[f32]) -> Result<()> {
    let mut s = format!("# latent code, {} values\n", code.len());
    for v in code {
        writeln!(s, "{v:?}").unwrap();
    }
    write_text(path, &s)
}

pub fn read_latent(path: &Path) -> Result<Vec<f32>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| l.split('#').next().unwrap().trim())
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<f32>()
                .map_err(|_| Error::malformed(path, format!("bad value {l:?}")))
        })
        .collect()
}

fn find_identity<'a>(ds: &'a MultiViewDataset, id: &str) -> Result<&'a IdentityViews> {
    ds.identities
        .iter()
        .find(|v| v.id == id)
        .ok_or_else(|| Error::Config(format!("identity {id:?} not in dataset")))
}

fn pick_views(identity: &IdentityViews, views: &[usize]) -> Result<IdentityViews> {
    if views.is_empty() {
        return Ok(identity.clone());
    }
    if let Some(v) = views.iter().find(|&&v| v >= identity.images.len()) {
        return Err(Error::Config(format!("view {v} out of range for {}", identity.id)));
    }
    Ok(identity.select_views(views))
}

/// Runs a parsed command line, returning the process exit code.
pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads.unwrap_or_else(default_threads).max(1);
    let config = cli.config.as_deref();
    let out = cli.out.as_path();
    macro_rules! settings {
        ($ty:ty) => {{
            let mut c: $ty = load_config(config, &cli.overrides)?;
            if let Some(s) = cli.seed {
                c.seed = s;
            }
            c
        }};
    }
    match &cli.command {
        Command::GenData => {
            let c = settings!(GenDataConfig);
            if c.identities == 0 || c.views == 0 || c.resolution == 0 {
                return Err(Error::Config("identities, views and resolution must be positive".into()));
            }
            if let Some(i) = c.holdout.iter().find(|&&i| i >= c.identities) {
                return Err(Error::Config(format!("holdout index {i} out of range")));
            }
            let mut ds = crate::data::generate_dataset(c.identities, c.views, c.resolution, c.seed);
            ds.mark_holdout(&c.holdout);
            write_dataset(out, &ds)?;
            write_header(&out.join("run.log"), &reproducibility_header("gen-data", c.seed, &c)?)
        }
        Command::TrainPrior(args) => {
            let mut c = settings!(TrainConfig);
            c.threads = threads;
            let ds = read_dataset(&args.data)?;
            create_dir(out)?;
            let header = reproducibility_header("train-prior", c.seed, &c)?;
            let model = train_prior_with(&ds, &c, progress(c.total_steps()))?;
            write_checkpoint(
                &out.join("prior.ckpt"),
                &Checkpoint {
                    params: model.params.clone(),
                    latents: model.latents.clone(),
                },
            )?;
            let ids: String = ds.split(Split::Train).map(|(_, v)| format!("{}\n", v.id)).collect();
            write_text(&out.join("codes.txt"), &ids)?;
            write_log(&out.join("train_log.tsv"), &header, &model.log)
        }
        Command::Invert(args) => {
            let mut c = settings!(FitConfig);
            c.threads = threads;
            let (params, views) = load_target(args)?;
            create_dir(out)?;
            let header = reproducibility_header("invert", c.seed, &c)?;
            let (code, log) = invert_latent(&params, &views, &c, None)?;
            write_latent(&out.join("latent.txt"), &code)?;
            write_log(&out.join("invert_log.tsv"), &header, &log)
        }
        Command::Finetune(args) => {
            let mut c = settings!(FitConfig);
            c.threads = threads;
            let (params, views) = load_target(&args.target)?;
            create_dir(out)?;
            let header = reproducibility_header("finetune", c.seed, &c)?;
            let code = match &args.latent {
                Some(p) => read_latent(p)?,
                None => invert_latent(&params, &views, &c, None)?.0,
            };
            let steps = c.schedule(views.images[0].width.max(views.images[0].height) as u32).total_steps;
            let fitted = finetune_with(&params, &code, &views, &c, progress(steps))?;
            write_checkpoint(
                &out.join("fitted.ckpt"),
                &Checkpoint {
                    params: fitted.params,
                    latents: LatentTable::from_rows(code.len(), &[fitted.latent.clone()])?,
                },
            )?;
            write_latent(&out.join("latent.txt"), &fitted.latent)?;
            write_log(&out.join("finetune_log.tsv"), &header, &fitted.log)
        }
        Command::Render(args) => {
            let mut c = settings!(RenderJob);
            c.threads = threads;
            c.render.validate()?;
            let (params, code) = load_model(&args.checkpoint, args.latent.as_deref(), args.code)?;
            create_dir(out)?;
            write_header(&out.join("run.log"), &reproducibility_header("render", c.seed, &c)?)?;
            let rig = Rig::default();
            let (near, far) = rig.near_far();
            for (k, cam) in rig.orbit(c.frames, c.polar, c.resolution).iter().enumerate() {
                let img = render_image(&params, &code, cam, &c.render, c.threads)?;
                let mut depth = img.depth.clone();
                for v in &mut depth.data {
                    *v = ((*v as f64 - near) / (far - near)).clamp(0.0, 1.0) as f32;
                }
                write_pfm(&out.join(format!("frame_{k:03}_color.pfm")), &img.color)?;
                write_pfm(&out.join(format!("frame_{k:03}_depth.pfm")), &img.depth)?;
                write_png(&out.join(format!("frame_{k:03}_color.png")), &img.color)?;
                write_png(&out.join(format!("frame_{k:03}_depth.png")), &depth)?;
                write_png(&out.join(format!("frame_{k:03}_normal.png")), &img.normal)?;
            }
            Ok(())
        }
        Command::Eval(args) => {
            let mut c = settings!(EvalJob);
            c.threads = threads;
            create_dir(out)?;
            let header = reproducibility_header("eval", c.seed, &c)?;
            let rows = match (&args.predicted, &args.checkpoint) {
                (Some(pred), _) => {
                    let reference = args.reference.as_ref().expect("clap enforces --reference");
                    eval_directories(pred, reference, c.masked)?
                }
                (None, Some(ckpt)) => {
                    let ds = read_dataset(args.data.as_ref().expect("clap enforces --data"))?;
                    let identity = find_identity(&ds, args.identity.as_ref().expect("clap enforces --identity"))?;
                    let views = pick_views(identity, &args.views)?;
                    let (params, code) = load_model(ckpt, args.latent.as_deref(), 0)?;
                    eval_model(&params, &code, &views, &c)?
                }
                (None, None) => {
                    return Err(Error::Config("eval needs --predicted/--reference or --checkpoint".into()))
                }
            };
            let table = metrics_table(&rows);
            write_header(&out.join("run.log"), &header)?;
            write_text(&out.join("metrics.tsv"), &table)?;
            print!("{table}");
            Ok(())
        }
        Command::Ablate(args) => {
            let mut c = settings!(AblateJob);
            c.threads = threads;
            c.profile.prior.seed = c.seed;
            c.profile.fit.seed = c.seed;
            c.profile.scratch.seed = c.seed;
            c.profile.prior.threads = threads;
            c.profile.fit.threads = threads;
            c.profile.scratch.threads = threads;
            c.profile.validate()?;
            create_dir(out)?;
            let header = reproducibility_header("ablate", c.seed, &c)?;
            write_header(&out.join("run.log"), &header)?;
            let ds = c.profile.dataset();
            let model = match &args.checkpoint {
                Some(p) => {
                    let ck = read_checkpoint(p)?;
                    PriorModel {
                        params: ck.params,
                        latents: ck.latents,
                        log: Vec::new(),
                    }
                }
                None => {
                    let m = train_desk_prior(&c.profile, &ds)?;
                    write_checkpoint(
                        &out.join("prior.ckpt"),
                        &Checkpoint {
                            params: m.params.clone(),
                            latents: m.latents.clone(),
                        },
                    )?;
                    write_log(&out.join("train_log.tsv"), &header, &m.log)?;
                    m
                }
            };
            let sweeps: &[Sweep] = match args.sweep {
                Sweep::All => &[Sweep::Init, Sweep::Regularization, Sweep::Scratch],
                ref s => std::slice::from_ref(s),
            };
            for sweep in sweeps {
                let (name, rows) = match sweep {
                    Sweep::Init => ("init", init_sweep(&c.profile, &model, &ds, &InitStrategy::ALL)?),
                    Sweep::Regularization => (
                        "regularization",
                        regularization_sweep(&c.profile, &model, &ds, &Regularization::ALL)?,
                    ),
                    Sweep::Scratch => ("scratch", scratch_comparison(&c.profile, &model, &ds)?),
                    Sweep::All => unreachable!(),
                };
                let table = format_table(&rows);
                write_text(&out.join(format!("ablate_{name}.tsv")), &table)?;
                println!("# {name}\n{table}");
            }
            Ok(())
        }
    }
}

fn progress(total: usize) -> impl FnMut(&StepRecord) {
    let every = (total / 20).max(1);
    move |r: &StepRecord| {
        if r.step % every == 0 || r.step + 1 == total {
            eprintln!("step {}/{} loss {:.5} lr {:.2e}", r.step + 1, total, r.loss.total, r.lr);
        }
    }
}

fn load_target(args: &TargetArgs) -> Result<(FieldParams<f32>, IdentityViews)> {
    let ck = read_checkpoint(&args.checkpoint)?;
    let ds = read_dataset(&args.data)?;
    let views = pick_views(find_identity(&ds, &args.identity)?, &args.views)?;
    Ok((ck.params, views))
}

fn load_model(checkpoint: &Path, latent: Option<&Path>, row: usize) -> Result<(FieldParams<f32>, Vec<f32>)> {
    let ck = read_checkpoint(checkpoint)?;
    let code = match latent {
        Some(p) => read_latent(p)?,
        None => {
            if row >= ck.latents.len() {
                return Err(Error::Config(format!("checkpoint has {} codes", ck.latents.len())));
            }
            ck.latents.row(row).to_vec()
        }
    };
    if code.len() != ck.params.config.latent_dim {
        return Err(Error::shape(format!(
            "code has {} values, model expects {}",
            code.len(),
            ck.params.config.latent_dim
        )));
    }
    Ok((ck.params, code))
}

/// One scored image.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub view: String,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn metrics_table(rows: &[MetricRow]) -> String {
    let mut s = String::from("view\tpsnr\tssim\n");
    for r in rows {
        writeln!(s, "{}\t{:.4}\t{:.6}", r.view, r.psnr, r.ssim).unwrap();
    }
    let n = rows.len().max(1) as f64;
    let mp = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
    let ms = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
    writeln!(s, "mean\t{mp:.4}\t{ms:.6}").unwrap();
    s
}

fn score(pred: &FloatImage, reference: &FloatImage, masked: bool) -> Result<(f64, f64)> {
    let mask = masked.then(|| reference.nonzero_mask());
    // An all-background reference has no foreground to score.
    let p = match mask.as_deref() {
        Some(m) if !m.contains(&true) => psnr(pred, reference, None)?,
        m => psnr(pred, reference, m)?,
    };
    Ok((p, ssim(pred, reference)?))
}

/// Pairs `.pfm` files by name across two directories.
pub fn eval_directories(predicted: &Path, reference: &Path, masked: bool) -> Result<Vec<MetricRow>> {
    let mut names: Vec<String> = std::fs::read_dir(reference)
        .map_err(|e| Error::io(reference, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pfm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::EmptyList("reference images"));
    }
    names
        .into_iter()
        .map(|name| {
            let r = read_pfm(&reference.join(&name))?;
            let p = read_pfm(&predicted.join(&name))?;
            let (psnr, ssim) = score(&p, &r, masked)?;
            Ok(MetricRow {
                view: name.trim_end_matches(".pfm").to_string(),
                psnr,
                ssim,
            })
        })
        .collect()
}

fn eval_model(params: &FieldParams<f32>, code: &[f32], views: &IdentityViews, job: &EvalJob) -> Result<Vec<MetricRow>> {
    if job.masked {
        let scores = evaluate(params, code, views, &job.render, job.threads)?;
        debug_assert!(mean_psnr(&scores) <= PSNR_CAP && mean_ssim(&scores) <= 1.0);
        return Ok(scores
            .iter()
            .enumerate()
            .map(|(k, s)| MetricRow {
                view: format!("cam_{k}"),
                psnr: s.psnr,
                ssim: s.ssim,
            })
            .collect());
    }
    views
        .cameras
        .iter()
        .zip(&views.images)
        .enumerate()
        .map(|(k, (cam, reference))| {
            let img = render_image(params, code, cam, &job.render, job.threads)?;
            let (psnr, ssim) = score(&img.color, reference, false)?;
            Ok(MetricRow {
                view: format!("cam_{k}"),
                psnr,
                ssim,
            })
        })
        .collect()
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
