use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fpt_core::infer::{
    calibrate_threshold, calibration_report, eval_items, metrics, mode_report, oracle_heat,
    predict_items, segmentation_cases, segmentation_eval, segmentation_heats, EvalItem, Scene,
    DEFAULT_ALPHA, DEFAULT_GRID, DEFAULT_THRESHOLD,
};
use fpt_core::infer::{inner_cells, merged_modes, miou};
use fpt_core::layout::Poke;
use fpt_core::model::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelParams};
use fpt_core::synth::{Dataset, GenOptions, SceneSpec, Template, DEFAULT_SIGMA_OBS};
use fpt_core::train::{EvalSet, OptimState, RunConfig, Trainer};
use serde::Serialize;
use serde_json::json;

use crate::render::flow_png;
use crate::server::{serve, AppState};
use crate::wire::{check_pokes, WirePoke};

#[derive(Parser, Debug)]
#[command(
    name = "fpt",
    version,
    about = "Flow poke transformer: data, training, evaluation and serving"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write a JSON report.
    Eval(EvalArgs),
    /// Predict a dense flow field for one scene.
    Sample(SampleArgs),
    /// Run the HTTP inference service.
    Serve(ServeArgs),
}

fn parse_template(s: &str) -> Result<Template, String> {
    Template::parse(s)
        .ok_or_else(|| format!("unknown template {s:?} (hinge, drawer, stack, multi)"))
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Comma-separated templates, cycled over scenes.
    #[arg(long, value_delimiter = ',', value_parser = parse_template, required = true)]
    pub templates: Vec<Template>,
    #[arg(long)]
    pub n_scenes: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub episodes: usize,
    #[arg(long, default_value_t = 64)]
    pub n_tracks: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = DEFAULT_SIGMA_OBS)]
    pub sigma_obs: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for the checkpoint, optimizer state and metrics log.
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out scenes for the eval NLL column of the metrics log.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// Held-out scenes for calibrating the segmentation threshold after training.
    #[arg(long)]
    pub calib_data: Option<PathBuf>,
    /// Continue from the checkpoint and optimizer state in `--out`.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub report_out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_GRID)]
    pub grid: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Pokes per nested chain in the NLL evaluation.
    #[arg(long, default_value_t = 16)]
    pub np_max: usize,
    #[arg(long, default_value_t = 8)]
    pub nq: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SampleMethod {
    Mean,
    Ar,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Scene spec JSON file, or a scene index when `--data` is given.
    #[arg(long)]
    pub scene: String,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// JSON array of `{x, y, dx, dy}`; no pokes when omitted.
    #[arg(long)]
    pub pokes_json: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SampleMethod::Mean)]
    pub method: SampleMethod,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_GRID)]
    pub grid: usize,
    /// `.json` for the field document, `.f32` for raw little-endian pairs, `.png` for a colour wheel.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Without a checkpoint the service answers model requests with 503.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Falls back to `FPT_PORT`, then 8080.
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: std::net::IpAddr,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
        Command::Serve(a) => serve_cmd(a),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

fn read_data(path: &Path) -> Result<Dataset> {
    Dataset::read(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn check_compatible(params: &ModelParams, data: &Dataset, what: &Path) -> Result<()> {
    let cfg = &params.config;
    if data.header.image_size != cfg.image_size || data.header.channels != cfg.channels {
        bail!(
            "{}: rasters are {}x{} with {} channels, model expects {}x{} with {}",
            what.display(),
            data.header.image_size,
            data.header.image_size,
            data.header.channels,
            cfg.image_size,
            cfg.image_size,
            cfg.channels
        );
    }
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let opts = GenOptions {
        sigma_obs: a.sigma_obs,
        image_size: a.image_size,
    };
    let d = Dataset::generate(
        &a.templates,
        a.n_scenes,
        a.episodes,
        a.n_tracks,
        a.seed,
        &opts,
    )?;
    write_atomic(&a.out, &d.to_bytes()?)?;
    eprintln!("wrote {} scenes to {}", a.n_scenes, a.out.display());
    Ok(())
}

pub const CHECKPOINT_FILE: &str = "model.fptc";
pub const STATE_FILE: &str = "train_state.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

fn train(a: TrainArgs) -> Result<()> {
    let rc: RunConfig = match &a.config {
        Some(p) => serde_json::from_slice(
            &fs::read(p).with_context(|| format!("reading {}", p.display()))?,
        )
        .with_context(|| format!("parsing {}", p.display()))?,
        None => RunConfig::default(),
    };
    let data = read_data(&a.data)?;
    let eval_data = a.eval_data.as_deref().map(read_data).transpose()?;
    let calib_data = a.calib_data.as_deref().map(read_data).transpose()?;
    fs::create_dir_all(&a.out)?;
    let (ck_path, state_path, log_path) = (
        a.out.join(CHECKPOINT_FILE),
        a.out.join(STATE_FILE),
        a.out.join(METRICS_FILE),
    );

    let mut trainer = if a.resume {
        let ck =
            load_checkpoint(&ck_path).with_context(|| format!("loading {}", ck_path.display()))?;
        if ck.params.config != rc.model {
            bail!("checkpoint model config differs from --config");
        }
        let state = OptimState::from_bytes(&fs::read(&state_path)?)?;
        Trainer::resume(ck.params, state, &rc.train)?
    } else {
        Trainer::new(&rc.model, &rc.train)?
    };
    check_compatible(&trainer.params, &data, &a.data)?;
    let eval = match (&eval_data, &a.eval_data) {
        (Some(d), Some(p)) => {
            check_compatible(&trainer.params, d, p)?;
            Some(EvalSet::new(
                d,
                rc.train.np_max,
                rc.train.nq,
                rc.train.seed,
            )?)
        }
        _ => None,
    };
    let mut log = OpenOptions::new()
        .create(true)
        .append(a.resume)
        .write(true)
        .truncate(!a.resume)
        .open(&log_path)?;
    trainer.run(&data, eval.as_ref(), &mut log, |t, line| {
        save_checkpoint(&ck_path, &t.checkpoint(CheckpointMeta::default()))?;
        t.save_state(&state_path)?;
        eprintln!(
            "step {:>6}  loss {:>8}  eval {:>8}  oracle {:>8}  lr {:.2e}",
            line.step,
            fmt_opt(line.loss),
            fmt_opt(line.eval_nll),
            fmt_opt(line.oracle_nll),
            line.lr
        );
        Ok(())
    })?;
    if trainer.opt.state.skipped > 0 {
        eprintln!("skipped {} non-finite steps", trainer.opt.state.skipped);
    }
    let mut meta = CheckpointMeta::default();
    if let (Some(d), Some(p)) = (&calib_data, &a.calib_data) {
        check_compatible(&trainer.params, d, p)?;
        let cases = segmentation_cases(d, &[Template::Hinge], DEFAULT_GRID);
        if cases.is_empty() {
            bail!("{} has no hinge scenes to calibrate on", p.display());
        }
        let heats = segmentation_heats(&trainer.params, d, &cases, DEFAULT_GRID)?;
        let t = calibrate_threshold(&heats, &cases)?;
        eprintln!("segmentation threshold {t:.4}");
        meta.segmentation_threshold = Some(t);
    }
    save_checkpoint(&ck_path, &trainer.checkpoint(meta))?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

/// Hinge checks on one scene: the box's unconditional mode weights, and the
/// top merged weight on the box after a poke that pins its lift.
#[derive(Serialize)]
pub struct HingeModes {
    pub scene: usize,
    pub box_weights: Vec<f64>,
    pub pinned_top_weight: f64,
}

pub fn hinge_modes(params: &ModelParams, data: &Dataset) -> Result<Vec<HingeModes>> {
    let mut out = Vec::new();
    for (i, s) in data.scenes.iter().enumerate() {
        if s.spec.template != Template::Hinge {
            continue;
        }
        let cells = inner_cells(&s.spec, 1, 16);
        let (Some(&q), Some(&p)) = (cells.get(cells.len() / 2), cells.first()) else {
            continue;
        };
        let scene = Scene::new(params, &s.raster)?;
        let free = &scene.predict(&[], &[q])?[0];
        let mut box_weights: Vec<f64> = merged_modes(free).iter().map(|m| m.weight).collect();
        box_weights.truncate(2);
        // Mode 2 lifts the box and leaves the door.
        let poke = Poke {
            pos: p,
            flow: s.spec.mode_flow(2, p),
        };
        let pinned = &scene.predict(&[poke], &[q])?[0];
        let pinned_top_weight = merged_modes(pinned)[0].weight;
        out.push(HingeModes {
            scene: i,
            box_weights,
            pinned_top_weight,
        });
    }
    Ok(out)
}

pub const EVAL_POKE_COUNTS: [usize; 9] = [0, 1, 2, 3, 4, 5, 6, 7, 8];

pub fn eval_report(
    params: &ModelParams,
    threshold: f64,
    data: &Dataset,
    a: &EvalArgs,
) -> Result<serde_json::Value> {
    let items = eval_items(data, None, &EVAL_POKE_COUNTS, a.nq);
    if items.is_empty() {
        bail!("dataset has no episodes with {} tracks", 8 + a.nq);
    }
    let preds = predict_items(params, data, &items)?;
    let (mut pm, mut pt) = (Vec::new(), Vec::new());
    for (it, ps) in items.iter().zip(&preds) {
        for (q, g) in it.queries.iter().zip(ps) {
            pm.push(g.mean());
            pt.push(q.flow);
        }
    }
    let flow = metrics(&pm, &pt, a.alpha)?;
    let hinge: Vec<(EvalItem, Vec<_>)> = items
        .iter()
        .zip(&preds)
        .filter(|(it, _)| data.scenes[it.scene].spec.template == Template::Hinge)
        .map(|(it, p)| (it.clone(), p.clone()))
        .collect();
    let (hi, hp): (Vec<_>, Vec<_>) = hinge.into_iter().unzip();
    let modes = if hi.is_empty() {
        None
    } else {
        Some(mode_report(data, &hi, &hp, a.alpha)?)
    };
    let calib = calibration_report(&items, &preds)?;
    // The exact posterior on the same pairs, as a ceiling for the model numbers.
    let oracle_preds: Vec<Vec<_>> = items
        .iter()
        .map(|it| {
            it.queries
                .iter()
                .map(|q| data.scenes[it.scene].spec.gt_conditional(&it.pokes, q.pos))
                .collect()
        })
        .collect::<Result<_, _>>()?;
    let oracle_calib = calibration_report(&items, &oracle_preds)?;
    let oracle_modes = if hi.is_empty() {
        None
    } else {
        let hp: Vec<_> = items
            .iter()
            .zip(&oracle_preds)
            .filter(|(it, _)| data.scenes[it.scene].spec.template == Template::Hinge)
            .map(|(_, p)| p.clone())
            .collect();
        Some(mode_report(data, &hi, &hp, a.alpha)?)
    };

    let cases = segmentation_cases(data, &[Template::Hinge], a.grid);
    let segmentation = if cases.is_empty() {
        None
    } else {
        let heats = segmentation_heats(params, data, &cases, a.grid)?;
        let e = segmentation_eval(&heats, &cases, threshold)?;
        let oracle: Vec<Vec<bool>> = cases
            .iter()
            .map(|c| {
                Ok(oracle_heat(&data.scenes[c.scene].spec, c.poke, a.grid)?
                    .iter()
                    .map(|&h| h > threshold)
                    .collect())
            })
            .collect::<Result<_>>()?;
        let truth: Vec<Vec<bool>> = cases.iter().map(|c| c.truth.clone()).collect();
        Some(json!({ "model": e, "oracle_miou": miou(&oracle, &truth)? }))
    };
    let nll = EvalSet::new(data, a.np_max, a.nq, 0)?;
    let model_nll = nll.model_nll(params, 8)?;
    let hinge_checks = hinge_modes(params, data)?;
    Ok(json!({
        "epe": flow.epe,
        "pck": flow.pck,
        "alpha": a.alpha,
        "miou": segmentation.as_ref().map(|s| s["model"]["miou"].clone()),
        "pearson_rho": calib.all.pearson_rho,
        "nll": { "model": model_nll, "oracle": nll.oracle_nll, "gap": model_nll - nll.oracle_nll },
        "mode_report": modes,
        "oracle_mode_report": oracle_modes,
        "calibration_report": calib,
        "oracle_calibration_report": oracle_calib,
        "segmentation": segmentation,
        "hinge_modes": hinge_checks,
        "n_items": items.len(),
    }))
}

fn eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let data = read_data(&a.data)?;
    check_compatible(&ck.params, &data, &a.data)?;
    let threshold = ck.meta.segmentation_threshold.unwrap_or(DEFAULT_THRESHOLD);
    let report = eval_report(&ck.params, threshold, &data, &a)?;
    write_atomic(&a.report_out, &serde_json::to_vec_pretty(&report)?)?;
    eprintln!(
        "epe {:.4}  pck {:.3}  miou {}  rho {:.3}",
        report["epe"].as_f64().unwrap_or(f64::NAN),
        report["pck"].as_f64().unwrap_or(f64::NAN),
        report["miou"],
        report["pearson_rho"].as_f64().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn sample(a: SampleArgs) -> Result<()> {
    let ck = load_checkpoint(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let size = ck.params.config.image_size;
    let raster = match &a.data {
        Some(p) => {
            let data = read_data(p)?;
            check_compatible(&ck.params, &data, p)?;
            let idx: usize = a
                .scene
                .parse()
                .map_err(|_| anyhow!("--scene must be an index when --data is given"))?;
            data.scenes
                .into_iter()
                .nth(idx)
                .ok_or_else(|| anyhow!("scene {idx} out of range"))?
                .raster
        }
        None => {
            let spec: SceneSpec = serde_json::from_slice(
                &fs::read(&a.scene).with_context(|| format!("reading {}", a.scene))?,
            )?;
            spec.validate()?;
            spec.render(size)
        }
    };
    let pokes = match &a.pokes_json {
        Some(p) => {
            let wire: Vec<WirePoke> = serde_json::from_slice(&fs::read(p)?)
                .with_context(|| format!("parsing {}", p.display()))?;
            check_pokes(&wire, "pokes").map_err(|e| anyhow!("{}: {}", e.field, e.error))?
        }
        None => Vec::new(),
    };
    let scene = Scene::new(&ck.params, &raster)?;
    let field = match a.method {
        SampleMethod::Mean => scene.dense_mean(&pokes, a.grid)?,
        SampleMethod::Ar => scene.ar_sample(&pokes, a.grid, a.seed)?,
    };
    let bytes = match a.out.extension().and_then(|e| e.to_str()) {
        Some("f32") => field.to_f32_bytes(),
        Some("png") => flow_png(&field),
        _ => serde_json::to_vec(&field)?,
    };
    write_atomic(&a.out, &bytes)?;
    Ok(())
}

fn serve_cmd(a: ServeArgs) -> Result<()> {
    let data = read_data(&a.data)?;
    let bytes = a
        .ckpt
        .as_ref()
        .map(|p| fs::read(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let state = AppState::new(bytes.as_deref(), data)?;
    let port = match a.port {
        Some(p) => p,
        None => match std::env::var("FPT_PORT") {
            Ok(v) => v
                .parse()
                .with_context(|| format!("FPT_PORT={v:?} is not a port"))?,
            Err(_) => 8080,
        },
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(serve(state, std::net::SocketAddr::new(a.host, port)))?;
    let _ = std::io::stderr().flush();
    Ok(())
}
