use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use usplane::diffnet::{write_checkpoint, ModelParams, NetConfig};
use usplane::geom3d::{random_unit_vector, seeded_rng, subseed, PoseSampling};
use usplane::implicit::{
    fit, refine_poses, render_plane, Domain, Field, ImplicitField, VolumeField,
};
use usplane::metrics::{evaluate_predictions, SweepPrediction};
use usplane::par::Exec;
use usplane::pipeline::{finetune, generate_dataset, infer, train, DatasetSpec, TrainConfig};
use usplane::volume::{
    apply_domain_shift, extract_slice, gen_phantom, read_bundle, read_volume, simulate_sweep,
    write_bundle, write_volume, Dims, DomainShiftSpec, PhantomSpec, SweepSpec,
};
use usplane::{PlaneLocation, SliceImage, Volume};

use crate::config;
use crate::pgm::write_pgm;
use crate::CliError;

pub const PREDICTIONS_FORMAT: &str = "usplane-predictions/1";

/// Everything a subcommand needs besides its own config.
pub struct Ctx {
    pub run_dir: PathBuf,
    pub seed: u64,
    pub exec: Exec,
}

impl Ctx {
    pub fn path(&self, name: &str) -> PathBuf {
        self.run_dir.join(name)
    }

    fn or_default(&self, p: &Option<PathBuf>, name: &str) -> PathBuf {
        p.clone().unwrap_or_else(|| self.path(name))
    }

    /// Finetuned weights when present, else the supervised ones.
    fn default_model(&self) -> PathBuf {
        let ft = self.path("finetuned.ckpt.json");
        if ft.exists() {
            ft
        } else {
            self.path("model.ckpt.json")
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Predictions {
    pub format: String,
    pub anchors: Vec<PlaneLocation>,
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(usplane::Error::from)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(usplane::Error::from)?;
    Ok(())
}

fn jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut f = fs::File::create(path).map_err(usplane::Error::from)?;
    for r in rows {
        let line = serde_json::to_string(r).map_err(usplane::Error::from)?;
        writeln!(f, "{line}").map_err(usplane::Error::from)?;
    }
    Ok(())
}

fn sampling(
    volume: &Volume,
    extent: usplane::SliceExtent,
    center: Option<[f64; 3]>,
    offset_radius: f64,
) -> PoseSampling {
    PoseSampling {
        extent,
        center: center.unwrap_or_else(|| volume.dims().center().into()),
        offset_radius,
    }
}

fn shifted(
    slices: Vec<SliceImage>,
    shift: &Option<DomainShiftSpec>,
    seed: u64,
) -> Result<Vec<SliceImage>, CliError> {
    match shift {
        None => Ok(slices),
        Some(s) => Ok(slices
            .iter()
            .enumerate()
            .map(|(i, x)| apply_domain_shift(x, &s.with_seed(subseed(seed, i as u64))))
            .collect::<usplane::Result<_>>()?),
    }
}

fn preview(path: &Path, slices: &[SliceImage]) -> Result<(), CliError> {
    if let Some(s) = slices.first() {
        write_pgm(path, s)?;
    }
    Ok(())
}

/// Holds out the tail of `slices` when no separate validation set is given.
fn split_val(
    mut slices: Vec<SliceImage>,
    val: &Option<PathBuf>,
    val_count: Option<usize>,
) -> Result<(Vec<SliceImage>, Vec<SliceImage>), CliError> {
    if let Some(p) = val {
        return Ok((slices, read_bundle(p)?));
    }
    let n = val_count.unwrap_or((slices.len() / 10).max(2));
    if n + 2 > slices.len() {
        return Err(CliError::Config(format!(
            "cannot hold out {n} of {} slices for validation",
            slices.len()
        )));
    }
    let val = slices.split_off(slices.len() - n);
    Ok((slices, val))
}

/// Stock network with input from the slice raster and the anchor output
/// map centered on the label mean, scaled to the label spread.
fn net_for(slices: &[SliceImage]) -> Result<NetConfig, CliError> {
    let labels: Vec<[f64; 9]> = slices
        .iter()
        .map(|s| Ok(s.require_location()?.to_flat()))
        .collect::<usplane::Result<_>>()?;
    let first = slices
        .first()
        .ok_or(usplane::Error::Empty("training slices".into()))?;
    let n = labels.len() as f64;
    let mut center = [0.0; 3];
    for l in &labels {
        for k in 0..9 {
            center[k % 3] += l[k] / (3.0 * n);
        }
    }
    let mut ms = 0.0;
    for l in &labels {
        for k in 0..9 {
            ms += (l[k] - center[k % 3]).powi(2) / (9.0 * n);
        }
    }
    Ok(NetConfig {
        input: (first.height, first.width),
        anchor_center: center,
        anchor_scale: ms.sqrt().max(1.0),
        ..NetConfig::default()
    })
}

fn train_config(mut cfg: TrainConfig, ctx: &Ctx, seed_overridden: bool) -> TrainConfig {
    cfg.exec = ctx.exec;
    if seed_overridden {
        cfg.seed = ctx.seed;
        cfg.augment.seed = subseed(ctx.seed, 1);
    }
    cfg
}

fn load_field(
    field: &Option<PathBuf>,
    volume: &Option<PathBuf>,
    ctx: &Ctx,
) -> Result<Field, CliError> {
    Ok(match volume {
        Some(v) => VolumeField::new(read_volume(v)?).into(),
        None => ImplicitField::load(ctx.or_default(field, "field.ckpt.json"))?.into(),
    })
}

pub fn gen_phantom_cmd(c: &config::GenPhantom, ctx: &Ctx) -> Result<Value, CliError> {
    let spec = c
        .phantom
        .clone()
        .unwrap_or_else(|| PhantomSpec::asymmetric(ctx.seed));
    let v = gen_phantom(&spec, Dims::cube(c.size))?;
    let out = ctx.path("phantom.uvol");
    write_volume(&out, &v)?;
    let d = v.dims();
    let mid = PlaneLocation::new([
        [0.0, 0.0, d.depth as f64 / 2.0 - 0.5],
        [d.width as f64 - 1.0, 0.0, d.depth as f64 / 2.0 - 0.5],
        [
            d.width as f64 - 1.0,
            d.height as f64 - 1.0,
            d.depth as f64 / 2.0 - 0.5,
        ],
    ])?;
    write_pgm(
        &ctx.path("phantom.pgm"),
        &extract_slice(&v, &mid, d.height, d.width)?,
    )?;
    Ok(json!({ "volume": out, "size": c.size }))
}

pub fn sample_slices_cmd(c: &config::SampleSlices, ctx: &Ctx) -> Result<Value, CliError> {
    let v = read_volume(ctx.or_default(&c.volume, "phantom.uvol"))?;
    let spec = DatasetSpec {
        count: c.count,
        sampling: sampling(&v, c.extent, c.center, c.offset_radius),
        directions: c.directions,
        seed: ctx.seed,
    };
    let mut slices = shifted(
        generate_dataset(&v, &spec, ctx.exec)?,
        &c.shift,
        subseed(ctx.seed, 2),
    )?;
    if c.unlabeled {
        slices = usplane::pipeline::unlabeled(&slices);
    }
    let out = ctx.path(&format!("{}.json", c.name));
    write_bundle(&out, &slices)?;
    preview(&ctx.path(&format!("{}.pgm", c.name)), &slices)?;
    Ok(json!({ "bundle": out, "count": slices.len() }))
}

pub fn train_cmd(c: &config::Train, ctx: &Ctx, seed_overridden: bool) -> Result<Value, CliError> {
    let all = read_bundle(ctx.or_default(&c.slices, "slices.json"))?;
    let (source, val) = split_val(all, &c.val, c.val_count)?;
    let params = match &c.init {
        Some(p) => ModelParams::load(p)?,
        None => {
            let net = match &c.net {
                Some(n) => n.clone(),
                None => net_for(&source)?,
            };
            ModelParams::init(net, ctx.seed)?
        }
    };
    let cfg = train_config(c.train, ctx, seed_overridden);
    let out = train(params, &source, &val, &cfg, &mut |_, _| Ok(()))?;
    jsonl(&ctx.path("train.jsonl"), &out.log)?;
    let ckpt = ctx.path("model.ckpt.json");
    write_checkpoint(
        &ckpt,
        &out.params
            .to_checkpoint(json!({ "train": cfg }), out.steps as u64, ctx.seed)?,
    )?;
    Ok(
        json!({ "checkpoint": ckpt, "steps": out.steps, "stopped_early": out.stopped_early, "best_val": out.best_val }),
    )
}

pub fn finetune_cmd(
    c: &config::Finetune,
    ctx: &Ctx,
    seed_overridden: bool,
) -> Result<Value, CliError> {
    let params = ModelParams::load(ctx.or_default(&c.model, "model.ckpt.json"))?;
    let all = read_bundle(ctx.or_default(&c.source, "slices.json"))?;
    let targets = read_bundle(ctx.or_default(&c.targets, "targets.json"))?;
    let (source, val) = split_val(all, &c.val, c.val_count)?;
    let cfg = train_config(c.train, ctx, seed_overridden);
    let out = finetune(
        params,
        &source,
        &targets,
        &val,
        &cfg,
        &c.cycle,
        &mut |_, _| Ok(()),
    )?;
    jsonl(&ctx.path("finetune.jsonl"), &out.log)?;
    let ckpt = ctx.path("finetuned.ckpt.json");
    let hp = json!({ "train": cfg, "cycle": c.cycle });
    write_checkpoint(
        &ckpt,
        &out.params.to_checkpoint(hp, out.steps as u64, ctx.seed)?,
    )?;
    Ok(
        json!({ "checkpoint": ckpt, "steps": out.steps, "stopped_early": out.stopped_early, "best_val": out.best_val }),
    )
}

pub fn infer_cmd(c: &config::Infer, ctx: &Ctx) -> Result<Value, CliError> {
    let model_path = c.model.clone().unwrap_or_else(|| ctx.default_model());
    let model = ModelParams::load(&model_path)?;
    let slices = read_bundle(ctx.or_default(&c.slices, "slices.json"))?;
    let anchors = infer(&model, &slices, ctx.exec)?;
    let out = ctx.path("predictions.json");
    write_json(
        &out,
        &Predictions {
            format: PREDICTIONS_FORMAT.into(),
            anchors,
        },
    )?;
    Ok(json!({ "predictions": out, "model": model_path, "count": slices.len() }))
}

/// Anchors of a predictions file, or of a slice bundle's labels.
fn read_predictions(path: &Path) -> Result<Vec<PlaneLocation>, CliError> {
    let text = fs::read_to_string(path).map_err(usplane::Error::from)?;
    let v: Value = serde_json::from_str(&text).map_err(usplane::Error::from)?;
    if v.get("format").and_then(Value::as_str) == Some(PREDICTIONS_FORMAT) {
        let p: Predictions = serde_json::from_value(v).map_err(usplane::Error::from)?;
        return Ok(p.anchors);
    }
    Ok(read_bundle(path)?
        .iter()
        .map(|s| s.require_location().copied())
        .collect::<usplane::Result<_>>()?)
}

pub fn eval_cmd(c: &config::Eval, ctx: &Ctx, resolved: &Value) -> Result<Value, CliError> {
    let labeled = read_bundle(ctx.or_default(&c.slices, "slices.json"))?;
    let truth: Vec<PlaneLocation> = labeled
        .iter()
        .map(|s| s.require_location().copied())
        .collect::<usplane::Result<_>>()?;
    let default_preds = ctx.path("predictions.json");
    let pred_path = c
        .predictions
        .clone()
        .or_else(|| (c.model.is_none() && default_preds.exists()).then_some(default_preds));
    let needs_model = pred_path.is_none() || !c.sweeps.is_empty();
    let model = if needs_model {
        Some(ModelParams::load(
            c.model.clone().unwrap_or_else(|| ctx.default_model()),
        )?)
    } else {
        None
    };
    let preds = match (&pred_path, &model) {
        (Some(p), _) => read_predictions(p)?,
        (None, Some(m)) => infer(m, &labeled, ctx.exec)?,
        (None, None) => unreachable!(),
    };
    let sweeps = c
        .sweeps
        .iter()
        .map(read_bundle)
        .collect::<usplane::Result<Vec<_>>>()?;
    let sweep_preds = match &model {
        Some(m) => sweeps
            .iter()
            .map(|s| infer(m, s, ctx.exec))
            .collect::<usplane::Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let sp: Vec<SweepPrediction> = sweep_preds
        .iter()
        .zip(&sweeps)
        .map(|(p, f)| SweepPrediction {
            predictions: p,
            frames: f,
        })
        .collect();
    let report = evaluate_predictions(&preds, &truth, &sp)?.with_config(resolved.clone(), ctx.seed);
    write_json(&ctx.path("report.json"), &report)?;
    fs::write(ctx.path("report.csv"), report.to_csv()).map_err(usplane::Error::from)?;
    Ok(
        json!({ "report": ctx.path("report.json"), "ed": report.ed, "da": report.da, "nstd": report.nstd }),
    )
}

pub fn sweep_cmd(c: &config::Sweep, ctx: &Ctx) -> Result<Value, CliError> {
    let v = read_volume(ctx.or_default(&c.volume, "phantom.uvol"))?;
    let spec = SweepSpec {
        frames: c.frames,
        smoothness: c.smoothness,
        seed: ctx.seed,
        sampling: sampling(&v, c.extent, c.center, c.offset_radius),
    };
    let frames = shifted(simulate_sweep(&v, &spec)?, &c.shift, subseed(ctx.seed, 3))?;
    let out = ctx.path(&format!("{}.json", c.name));
    write_bundle(&out, &frames)?;
    preview(&ctx.path(&format!("{}.pgm", c.name)), &frames)?;
    Ok(json!({ "bundle": out, "frames": frames.len() }))
}

#[derive(Serialize)]
struct LossRow {
    step: usize,
    loss: f64,
}

fn loss_rows(losses: &[f64]) -> Vec<LossRow> {
    losses
        .iter()
        .enumerate()
        .map(|(step, &loss)| LossRow { step, loss })
        .collect()
}

pub fn fit_implicit_cmd(
    c: &config::FitImplicit,
    ctx: &Ctx,
    seed_overridden: bool,
) -> Result<Value, CliError> {
    let slices = read_bundle(ctx.or_default(&c.slices, "slices.json"))?;
    let field = match &c.init {
        Some(p) => ImplicitField::load(p)?,
        None => ImplicitField::init(c.field, Domain::covering(&slices, c.margin)?, ctx.seed)?,
    };
    let mut cfg = c.fit;
    if seed_overridden {
        cfg.seed = ctx.seed;
    }
    let out = fit(field, &slices, &cfg, ctx.exec)?;
    jsonl(&ctx.path("fit.jsonl"), &loss_rows(&out.losses))?;
    let ckpt = ctx.path("field.ckpt.json");
    out.field.save(&ckpt, cfg.iters as u64, ctx.seed)?;
    Ok(json!({ "checkpoint": ckpt, "initial_mse": out.initial_mse, "final_mse": out.final_mse }))
}

pub fn refine_poses_cmd(
    c: &config::RefinePoses,
    ctx: &Ctx,
    seed_overridden: bool,
) -> Result<Value, CliError> {
    let field = load_field(&c.field, &c.volume, ctx)?;
    let mut slices = read_bundle(ctx.or_default(&c.slices, "slices.json"))?;
    if c.perturb > 0.0 {
        let mut rng = seeded_rng(subseed(ctx.seed, 4));
        for s in &mut slices {
            let mut a = s.require_location()?.to_flat();
            for r in 0..3 {
                let d = random_unit_vector(&mut rng) * c.perturb;
                for k in 0..3 {
                    a[3 * r + k] += d[k];
                }
            }
            s.location = Some(PlaneLocation::from_flat(&a)?);
        }
    }
    let mut cfg = c.refine;
    if seed_overridden {
        cfg.seed = ctx.seed;
    }
    let out = refine_poses(field, &slices, &cfg)?;
    jsonl(&ctx.path("refine.jsonl"), &loss_rows(&out.losses))?;
    let refined: Vec<SliceImage> = slices
        .into_iter()
        .zip(&out.poses)
        .map(|(s, p)| s.with_location(*p))
        .collect();
    let bundle = ctx.path("refined.json");
    write_bundle(&bundle, &refined)?;
    let mut summary = json!({ "bundle": bundle, "initial_loss": out.losses.first(), "final_loss": out.losses.last() });
    if let (Field::Neural(f), true) = (&out.field, cfg.lr_field > 0.0) {
        let p = ctx.path("refined_field.ckpt.json");
        f.save(&p, cfg.iters as u64, ctx.seed)?;
        summary["field"] = json!(p);
    }
    Ok(summary)
}

pub fn render_cmd(c: &config::Render, ctx: &Ctx) -> Result<Value, CliError> {
    let field = load_field(&c.field, &c.volume, ctx)?;
    let (plane, h, w) = match c.plane {
        Some(p) => (p, c.height.unwrap_or(64), c.width.unwrap_or(64)),
        None => {
            let slices = read_bundle(ctx.or_default(&c.slices, "slices.json"))?;
            let s = slices.get(c.index).ok_or_else(|| {
                CliError::Config(format!(
                    "slice index {} out of range ({} slices)",
                    c.index,
                    slices.len()
                ))
            })?;
            (
                *s.require_location()?,
                c.height.unwrap_or(s.height),
                c.width.unwrap_or(s.width),
            )
        }
    };
    let img = render_plane(&field, &plane, h, w, ctx.exec)?;
    let name = c.name.clone().unwrap_or_else(|| "render".into());
    let out = ctx.path(&format!("{name}.json"));
    write_bundle(&out, std::slice::from_ref(&img))?;
    write_pgm(&ctx.path(&format!("{name}.pgm")), &img)?;
    Ok(json!({ "bundle": out, "height": h, "width": w }))
}
