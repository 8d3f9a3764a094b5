use std::time::Instant;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::loss::{
    build_cycle, cycle_loss, finetune_loss, training_loss, CycleConfig, LossWeights,
};
use crate::diffnet::{augment, AdamConfig, AdamState, AugmentSpec, ModelParams, Tape, Trainable};
use crate::error::{Error, Result};
use crate::geom3d::{seeded_rng, subseed};
use crate::par::{self, Exec};
use crate::volume::SliceImage;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub max_steps: usize,
    /// Validation cadence, in steps. Plateau and early-stop patience count
    /// validations, not steps.
    pub eval_every: usize,
    /// Relative validation improvement below which a validation counts as
    /// a plateau.
    pub min_improvement: f64,
    pub plateau_patience: usize,
    pub lr_decay: f64,
    pub early_stop_patience: usize,
    /// Validation uses at most this many held-out slices.
    pub val_limit: usize,
    pub augment: AugmentSpec,
    pub freeze_encoder: bool,
    /// Return the parameters of the best validation instead of the last.
    pub restore_best: bool,
    pub seed: u64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            max_steps: 500,
            eval_every: 25,
            min_improvement: 0.01,
            plateau_patience: 4,
            lr_decay: 0.5,
            early_stop_patience: 10,
            val_limit: 64,
            augment: AugmentSpec {
                scale: (0.95, 1.05),
                translate_px: 1.0,
                contrast: (0.8, 1.25),
                gamma: (1.0, 1.0),
                noise_sigma: 0.02,
                seed: 0,
            },
            freeze_encoder: false,
            restore_best: true,
            seed: 0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be >= 2"));
        }
        if !(self.weights.w_l >= 0.0 && self.weights.w_d >= 0.0) {
            return Err(Error::invalid("loss weights must be >= 0"));
        }
        if !(self.adam.lr >= 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::invalid("lr must be >= 0"));
        }
        if self.eval_every == 0 || self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::invalid("eval cadence and patiences must be >= 1"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid("lr_decay must be in (0, 1]"));
        }
        self.augment.validate()
    }

    fn trainable(&self) -> Trainable {
        if self.freeze_encoder {
            Trainable::Heads
        } else {
            Trainable::All
        }
    }
}

/// One JSON-lines record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub l_t: f64,
    pub l_c: Option<f64>,
    pub l_f: Option<f64>,
    pub lr: f64,
    /// Seconds since the run started.
    pub wall_time: f64,
    pub val_l_t: Option<f64>,
    pub event: Option<String>,
}

/// Called after every logged step with the current parameters.
pub type Observer<'a> = &'a mut dyn FnMut(&LogEntry, &ModelParams) -> Result<()>;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<LogEntry>,
    pub steps: usize,
    pub stopped_early: bool,
    pub best_val: Option<f64>,
}

/// Mean supervised loss over consecutive chunks of `val` (frozen params,
/// no augmentation).
pub fn validation_loss(model: &ModelParams, val: &[SliceImage], cfg: &TrainConfig) -> Result<f64> {
    let val = &val[..val.len().min(cfg.val_limit.max(2))];
    if val.len() < 2 {
        return Err(Error::Empty(
            "validation set needs at least 2 slices".into(),
        ));
    }
    let chunks: Vec<&[SliceImage]> = val
        .chunks(cfg.batch_size)
        .filter(|c| c.len() >= 2)
        .collect();
    let parts = par::try_map(cfg.exec, &chunks, |c| {
        let mut tape = Tape::<f32>::new();
        let b = model.bind(&mut tape, Trainable::Nothing);
        let refs: Vec<&SliceImage> = c.iter().collect();
        let l = training_loss(model, &mut tape, &b, &refs, &cfg.weights)?;
        Ok::<_, Error>((tape.scalar(l.total) as f64, c.len()))
    })?;
    let n: usize = parts.iter().map(|p| p.1).sum();
    Ok(parts.iter().map(|(l, k)| l * *k as f64).sum::<f64>() / n as f64)
}

fn draw_batch(source: &[SliceImage], cfg: &TrainConfig, step: usize) -> Result<Vec<SliceImage>> {
    let mut rng = seeded_rng(subseed(cfg.seed, step as u64));
    let b = cfg.batch_size.min(source.len());
    let idx = sample(&mut rng, source.len(), b).into_vec();
    let aug = AugmentSpec {
        seed: subseed(cfg.augment.seed ^ cfg.seed, 0xA06),
        ..cfg.augment
    };
    let jobs: Vec<(usize, usize)> = idx.into_iter().enumerate().collect();
    par::try_map(cfg.exec, &jobs, |(j, i)| {
        augment(&source[*i], &aug, ((step as u64) << 20) | *j as u64)
    })
}

fn apply_update(
    model: &mut ModelParams,
    adam: &mut AdamState<f32>,
    tape: &Tape<f32>,
    root: crate::diffnet::Var,
    bound: &crate::diffnet::Bound,
) -> Result<()> {
    let grads = tape.backward(root);
    let g: Vec<Option<&[f32]>> = bound.vars.iter().map(|v| grads.get(*v)).collect();
    let mut slots: Vec<&mut [f32]> = model
        .layers_mut()
        .iter_mut()
        .map(|l| l.tensor.data_mut())
        .collect();
    adam.update(&mut slots, &g)
}

/// Plateau bookkeeping shared by training and fine-tuning.
struct Schedule {
    best: f64,
    best_params: Option<ModelParams>,
    since_best: usize,
    since_decay: usize,
}

impl Schedule {
    fn new() -> Self {
        Self {
            best: f64::INFINITY,
            best_params: None,
            since_best: 0,
            since_decay: 0,
        }
    }

    /// Returns `(event, stop)`.
    fn observe(
        &mut self,
        val: f64,
        model: &ModelParams,
        adam: &mut AdamState<f32>,
        cfg: &TrainConfig,
    ) -> (Option<String>, bool) {
        if val < self.best * (1.0 - cfg.min_improvement) || self.best_params.is_none() {
            self.best = self.best.min(val);
            self.best_params = Some(model.clone());
            self.since_best = 0;
            self.since_decay = 0;
            return (None, false);
        }
        if val < self.best {
            self.best = val;
            self.best_params = Some(model.clone());
        }
        self.since_best += 1;
        self.since_decay += 1;
        if self.since_best >= cfg.early_stop_patience {
            return (Some("early_stop".into()), true);
        }
        if self.since_decay >= cfg.plateau_patience {
            self.since_decay = 0;
            adam.set_lr(adam.lr() * cfg.lr_decay);
            return (Some(format!("lr_decay to {:e}", adam.lr())), false);
        }
        (None, false)
    }
}

fn check_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            detail: format!("{what} = {v}"),
        })
    }
}

/// Supervised training on labeled slices with plateau-driven lr decay and
/// early stopping on `val`.
pub fn train(
    params: ModelParams,
    source: &[SliceImage],
    val: &[SliceImage],
    cfg: &TrainConfig,
    observer: Observer,
) -> Result<TrainOutcome> {
    run(params, source, None, val, cfg, None, observer)
}

/// Fine-tuning with `l_f = w_c * l_c + l_t`: every
/// `source_batches_per_cycle_batch`-th step also carries a batch of cycles
/// through unlabeled `targets`; the other steps use `l_t` alone.
pub fn finetune(
    params: ModelParams,
    source: &[SliceImage],
    targets: &[SliceImage],
    val: &[SliceImage],
    cfg: &TrainConfig,
    cycle: &CycleConfig,
    observer: Observer,
) -> Result<TrainOutcome> {
    cycle.validate()?;
    if targets.is_empty() {
        return Err(Error::Empty("target images".into()));
    }
    run(
        params,
        source,
        Some(targets),
        val,
        cfg,
        Some(cycle),
        observer,
    )
}

fn run(
    mut model: ModelParams,
    source: &[SliceImage],
    targets: Option<&[SliceImage]>,
    val: &[SliceImage],
    cfg: &TrainConfig,
    cycle: Option<&CycleConfig>,
    observer: Observer,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if source.len() < 2 {
        return Err(Error::Empty(
            "training set needs at least 2 labeled slices".into(),
        ));
    }
    for s in source {
        s.require_location()?;
    }
    let start = Instant::now();
    let mut adam = AdamState::<f32>::new(cfg.adam);
    let mut schedule = Schedule::new();
    let mut log = Vec::new();
    let mut stopped_early = false;
    let mut steps = 0;
    if cfg.max_steps > 0 && val.len() >= 2 {
        let v0 = validation_loss(&model, val, cfg)?;
        check_finite(0, "validation l_t", v0)?;
        schedule.observe(v0, &model, &mut adam, cfg);
        let e = LogEntry {
            step: 0,
            l_t: v0,
            l_c: None,
            l_f: None,
            lr: adam.lr(),
            wall_time: start.elapsed().as_secs_f64(),
            val_l_t: Some(v0),
            event: Some("init".into()),
        };
        observer(&e, &model)?;
        log.push(e);
    }
    for step in 1..=cfg.max_steps {
        let batch = draw_batch(source, cfg, step)?;
        let refs: Vec<&SliceImage> = batch.iter().collect();
        let mut tape = Tape::<f32>::new();
        let bound = model.bind(&mut tape, cfg.trainable());
        let lt = training_loss(&model, &mut tape, &bound, &refs, &cfg.weights)?;
        let mut root = lt.total;
        let mut l_c = None;
        if let (Some(ccfg), Some(targets)) = (cycle, targets) {
            if (step - 1) % ccfg.source_batches_per_cycle_batch == 0 {
                let mut rng = seeded_rng(subseed(cfg.seed ^ 0xC1C1E, step as u64));
                let cycles = (0..ccfg.cycles_per_step)
                    .map(|_| build_cycle(source, targets, ccfg, &mut rng))
                    .collect::<Result<Vec<_>>>()?;
                let prepared = par::try_map(cfg.exec, &cycles, |c| {
                    Ok::<_, Error>((c.link_views(&ccfg.augment)?, c.target_displacement()?))
                })?;
                let lc = cycle_loss(&model, &mut tape, &bound, &prepared)?;
                l_c = Some(tape.scalar(lc) as f64);
                root = finetune_loss(&mut tape, lc, lt.total, ccfg.w_c);
            }
        }
        let l_t = tape.scalar(lt.total) as f64;
        let l_f = l_c.map(|_| tape.scalar(root) as f64);
        check_finite(step, "l_t", l_t)?;
        if let Some(c) = l_c {
            check_finite(step, "l_c", c)?;
        }
        apply_update(&mut model, &mut adam, &tape, root, &bound).map_err(|e| match e {
            Error::NonFinite(d) => Error::Diverged { step, detail: d },
            e => e,
        })?;
        steps = step;

        let mut entry = LogEntry {
            step,
            l_t,
            l_c,
            l_f,
            lr: adam.lr(),
            wall_time: start.elapsed().as_secs_f64(),
            val_l_t: None,
            event: None,
        };
        let mut stop = false;
        if step % cfg.eval_every == 0 && val.len() >= 2 {
            let v = validation_loss(&model, val, cfg)?;
            check_finite(step, "validation l_t", v)?;
            entry.val_l_t = Some(v);
            let (event, s) = schedule.observe(v, &model, &mut adam, cfg);
            entry.event = event;
            entry.lr = adam.lr();
            stop = s;
        }
        observer(&entry, &model)?;
        log.push(entry);
        if stop {
            stopped_early = true;
            break;
        }
    }
    let best_val = schedule.best.is_finite().then_some(schedule.best);
    if cfg.restore_best {
        if let Some(best) = schedule.best_params {
            model = best;
        }
    }
    Ok(TrainOutcome {
        params: model,
        log,
        steps,
        stopped_early,
        best_val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::NetConfig;
    use crate::geom3d::{PoseSampling, SliceExtent};
    use crate::pipeline::{generate_dataset, unlabeled, DatasetSpec};
    use crate::volume::{apply_domain_shift, gen_phantom, Dims, DomainShiftSpec, PhantomSpec};

    fn setup() -> (ModelParams, Vec<SliceImage>, Vec<SliceImage>) {
        let v = gen_phantom(&PhantomSpec::asymmetric(0), Dims::cube(16)).unwrap();
        let spec = |count, seed| DatasetSpec {
            count,
            sampling: PoseSampling {
                extent: SliceExtent::new(16, 16, 0.6).unwrap(),
                center: [7.5; 3],
                offset_radius: 1.0,
            },
            directions: 64,
            seed,
        };
        let train = generate_dataset(&v, &spec(24, 1), Exec::Sequential).unwrap();
        let val = generate_dataset(&v, &spec(8, 2), Exec::Sequential).unwrap();
        let cfg = NetConfig {
            input: (16, 16),
            channels: vec![4, 8],
            hidden: 8,
            anchor_center: [7.5; 3],
            anchor_scale: 6.0,
            ..NetConfig::default()
        };
        (ModelParams::init(cfg, 3).unwrap(), train, val)
    }

    fn quick(lr: f64, steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            adam: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            max_steps: steps,
            eval_every: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_keeps_params() {
        let (m, tr, va) = setup();
        let out = train(m.clone(), &tr, &va, &quick(0.0, 6), &mut |_, _| Ok(())).unwrap();
        assert_eq!(out.params, m);
        assert_eq!(out.log.len(), 7);
    }

    #[test]
    fn replay_is_identical_across_exec_modes() {
        let (m, tr, va) = setup();
        let mut a_cfg = quick(1e-3, 8);
        a_cfg.exec = Exec::Parallel;
        let mut b_cfg = a_cfg;
        b_cfg.exec = Exec::Sequential;
        let a = train(m.clone(), &tr, &va, &a_cfg, &mut |_, _| Ok(())).unwrap();
        let b = train(m, &tr, &va, &b_cfg, &mut |_, _| Ok(())).unwrap();
        assert_eq!(a.params, b.params);
        let strip = |l: &[LogEntry]| {
            l.iter()
                .map(|e| (e.step, e.l_t.to_bits(), e.lr.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.log), strip(&b.log));
    }

    #[test]
    fn zero_step_finetune_is_identity() {
        let (m, tr, va) = setup();
        let tgt = unlabeled(&va);
        let out = finetune(
            m.clone(),
            &tr,
            &tgt,
            &va,
            &quick(1e-3, 0),
            &CycleConfig::default(),
            &mut |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(out.params, m);
        assert!(out.log.is_empty());
    }

    #[test]
    fn finetune_logs_cycle_terms_per_mix_ratio() {
        let (m, tr, va) = setup();
        let shift = DomainShiftSpec {
            gamma: 1.5,
            speckle_sigma: 0.15,
            ..DomainShiftSpec::identity()
        };
        let tgt: Vec<_> = unlabeled(&va)
            .iter()
            .map(|s| apply_domain_shift(s, &shift).unwrap())
            .collect();
        let cyc = CycleConfig {
            source_batches_per_cycle_batch: 2,
            cycles_per_step: 2,
            ..CycleConfig::default()
        };
        let mut seen = Vec::new();
        finetune(m, &tr, &tgt, &va, &quick(1e-3, 4), &cyc, &mut |e, _| {
            seen.push((e.step, e.l_c.is_some(), e.l_f.is_some()));
            Ok(())
        })
        .unwrap();
        assert_eq!(
            seen,
            vec![
                (0, false, false),
                (1, true, true),
                (2, false, false),
                (3, true, true),
                (4, false, false)
            ]
        );
    }

    #[test]
    fn schedule_decays_then_stops() {
        let (m, tr, va) = setup();
        let mut cfg = quick(0.0, 60);
        cfg.plateau_patience = 2;
        cfg.early_stop_patience = 5;
        let out = train(m, &tr, &va, &cfg, &mut |_, _| Ok(())).unwrap();
        assert!(out.stopped_early);
        let decays = out
            .log
            .iter()
            .filter(|e| {
                e.event
                    .as_deref()
                    .is_some_and(|s| s.starts_with("lr_decay"))
            })
            .count();
        assert_eq!(decays, 2);
        assert_eq!(out.steps, 25);
    }

    #[test]
    fn learns_on_tiny_problem() {
        let (m, tr, va) = setup();
        let cfg = quick(3e-3, 60);
        let out = train(m, &tr, &tr, &cfg, &mut |_, _| Ok(())).unwrap();
        let first = out.log.first().unwrap().val_l_t.unwrap();
        let best = out.best_val.unwrap();
        assert!(best < first, "{first} -> {best}");
        let _ = va;
    }
}
