//! The optimisation loop.
//!
//! One step of the full method:
//!
//! 1. EMA update of the teacher (every `ema_interval` steps);
//! 2. forward pass of both domains through both paths;
//! 3. pseudo-labels for the target batch from the teacher;
//! 4. one discriminator update on detached backbone features, where `D_S`
//!    separates `F_{S-s}` (real) from `F_{S-t}` (fake) and `D_T` separates
//!    `F_{T-t}` (real) from `F_{T-s}` (fake);
//! 5. one student update on `L_seg + lambda * L_st + beta * L_adv`, with
//!    the non-saturating generator loss on the fake-side features.
//!
//! Batches are drawn by [`BatchSampler`], which is a pure function of the
//! step, so a resumed run replays exactly the batches of an unbroken one.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod optim;
pub mod sampler;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Normalization, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::losses::{
    combine, combined_objective, discriminator_loss, generator_loss, scalar, seg_loss, st_loss,
    LossBundle, LossParts, StudentTerms,
};
use crate::network::{Registry, StudentEnsemble};
use crate::nn::NamedParams;
use crate::selftrain::{
    ema_update, pseudo_label_decoder_only, teacher_logits_single_target_with, Paradigm, PseudoLabel,
    TeacherState,
};

pub use checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, FORMAT_VERSION, MAGIC};
pub use config::{LrSchedule, Method, OptimizerKind, Precision, TrainConfig, CONFIG_VERSION};
pub use eval::{evaluate, evaluate_checkpoint, ConstantSegmenter, LabelEcho, ModelSegmenter, Segmenter};
pub use optim::{Optimizer, OptimizerSettings, ParamState};
pub use sampler::BatchSampler;

pub const LOG_FILE: &str = "train_log.ndjson";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Number of completed steps, starting at 1.
    pub step: u64,
    #[serde(flatten)]
    pub parts: LossParts,
    pub combined: f64,
}

impl LogRecord {
    pub fn new(step: u64, bundle: &LossBundle) -> Self {
        Self {
            step,
            parts: bundle.parts,
            combined: bundle.combined,
        }
    }
}

/// Everything that evolves during training.
#[derive(Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub ensemble: StudentEnsemble,
    /// Absent for the source-only method.
    pub teacher: Option<TeacherState>,
    pub main_opt: Optimizer,
    pub disc_opt: Optimizer,
    pub step: u64,
}

const MODEL_PREFIX: &str = "model.";
const MAIN_OPT_PREFIX: &str = "opt_main.";
const DISC_OPT_PREFIX: &str = "opt_disc.";

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        Self::with_registry(config, &Registry::default())
    }

    pub fn with_registry(config: TrainConfig, registry: &Registry) -> Result<Self> {
        config.validate()?;
        let ensemble = StudentEnsemble::new(&config.network(), registry, config.seed, config.dtype())?;
        let teacher = match config.method {
            Method::Full => {
                let mut t = TeacherState::from_students(config.paradigm, &ensemble, config.alpha)?;
                t.vote = config.vote;
                Some(t)
            }
            Method::SourceOnly => None,
        };
        let main_opt = Optimizer::new(OptimizerSettings {
            kind: config.optimizer,
            lr: config.lr,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
        });
        let disc_opt = Optimizer::new(OptimizerSettings {
            kind: config.disc_optimizer,
            lr: config.disc_lr,
            momentum: config.momentum,
            weight_decay: 0.0,
            beta1: config.disc_beta1,
            beta2: config.disc_beta2,
            eps: config.adam_eps,
        });
        Ok(Self {
            config,
            ensemble,
            teacher,
            main_opt,
            disc_opt,
            step: 0,
        })
    }

    /// Parameters the main optimizer updates.
    pub fn trainable_params(&self) -> NamedParams {
        match self.config.method {
            Method::Full => self.ensemble.student_params(),
            Method::SourceOnly => {
                let mut p = self.ensemble.backbone_source.params("backbone_source");
                p.extend(self.ensemble.decoder_source.params("decoder_source"));
                p
            }
        }
    }

    /// One optimisation step on a labelled source batch and an unlabelled
    /// target batch of the same size.
    pub fn train_step(&mut self, x_source: &Tensor, y_source: &Tensor, x_target: &Tensor) -> Result<LossBundle> {
        let (bs, _, _, _) = x_source.dims4()?;
        let (bt, _, _, _) = x_target.dims4()?;
        if bs == 0 || bs != bt || x_source.dims() != x_target.dims() {
            return Err(Error::Shape(format!(
                "source batch {:?} and target batch {:?} must be non-empty and equal in shape",
                x_source.dims(),
                x_target.dims()
            )));
        }
        let bundle = match self.config.method {
            Method::Full => self.full_step(x_source, y_source, x_target)?,
            Method::SourceOnly => self.source_only_step(x_source, y_source)?,
        };
        self.step += 1;
        Ok(bundle)
    }

    fn source_only_step(&mut self, x_source: &Tensor, y_source: &Tensor) -> Result<LossBundle> {
        let logits = self.ensemble.forward_single_path(x_source)?;
        let seg = seg_loss(&logits, y_source, IGNORE_INDEX)?;
        let parts = LossParts {
            seg_s: scalar(&seg)?,
            ..Default::default()
        };
        let bundle = combine(parts, 0.0, 0.0).map_err(|e| e.at_step(self.step + 1))?;
        let grads = seg.backward()?;
        let params = self.trainable_params();
        self.main_opt.step(&params, &grads, self.config.lr_factor(self.step))?;
        Ok(bundle)
    }

    fn full_step(&mut self, x_source: &Tensor, y_source: &Tensor, x_target: &Tensor) -> Result<LossBundle> {
        let cfg = self.config.clone();
        let step = self.step;
        let lr_factor = cfg.lr_factor(step);
        let teacher = self
            .teacher
            .as_mut()
            .ok_or_else(|| Error::Config("the full method needs a teacher".into()))?;

        // (1) teacher refresh
        if step % cfg.ema_interval == 0 {
            ema_update(teacher, &self.ensemble, cfg.alpha)?;
        }

        // (2) forward pass
        let out = self.ensemble.forward_full(x_source, x_target)?;
        let (_, _, h, w) = x_target.dims4()?;

        // (3) pseudo-labels from the refreshed teacher
        let pseudo: Option<PseudoLabel> = if step >= cfg.st_burn_in {
            Some(match teacher.paradigm() {
                Paradigm::DecoderOnly => pseudo_label_decoder_only(
                    teacher,
                    &out.target.disentangled.source_style,
                    &out.target.disentangled.target_style,
                    (h, w),
                )?,
                Paradigm::SingleTarget => PseudoLabel {
                    labels: teacher_logits_single_target_with(
                        teacher,
                        x_target,
                        &out.target.features.source_style,
                        &self.ensemble.ddm,
                    )?
                    .argmax(1)?,
                    source_step: teacher.step,
                },
            })
        } else {
            None
        };

        // (4) discriminator update on detached features
        let f_ss = &out.source.features.source_style;
        let f_ts = &out.source.features.target_style;
        let f_st = &out.target.features.source_style;
        let f_tt = &out.target.features.target_style;
        let (d_s, d_t) = (&self.ensemble.disc_source, &self.ensemble.disc_target);
        let disc_s = discriminator_loss(&d_s.forward(&f_ss.detach())?, &d_s.forward(&f_st.detach())?)?;
        let disc_t = discriminator_loss(&d_t.forward(&f_tt.detach())?, &d_t.forward(&f_ts.detach())?)?;
        let (disc_s_v, disc_t_v) = (scalar(&disc_s)?, scalar(&disc_t)?);
        if !disc_s_v.is_finite() || !disc_t_v.is_finite() {
            return Err(Error::NonFinite {
                step: step + 1,
                detail: format!("disc_S={disc_s_v}, disc_T={disc_t_v}"),
            });
        }
        let disc_grads = (disc_s + disc_t)?.backward()?;
        self.disc_opt.step(&self.ensemble.disc_params(), &disc_grads, lr_factor)?;

        // (5) student update
        let seg_s = seg_loss(&out.source.logits.source_style, y_source, IGNORE_INDEX)?;
        let seg_t = seg_loss(&out.source.logits.target_style, y_source, IGNORE_INDEX)?;
        let (st_s, st_t) = match (&pseudo, cfg.paradigm) {
            (Some(pl), Paradigm::DecoderOnly) => (
                Some(st_loss(&out.target.logits.source_style, pl)?),
                Some(st_loss(&out.target.logits.target_style, pl)?),
            ),
            (Some(pl), Paradigm::SingleTarget) => (None, Some(st_loss(&out.target.logits.target_style, pl)?)),
            (None, _) => (None, None),
        };
        let adversarial_on = cfg.beta != 0.0;
        let gen_input = |f: &Tensor| if adversarial_on { f.clone() } else { f.detach() };
        let adv_s = generator_loss(&d_s.forward(&gen_input(f_st))?)?;
        let adv_t = generator_loss(&d_t.forward(&gen_input(f_ts))?)?;

        let opt_value = |t: &Option<Tensor>| t.as_ref().map_or(Ok(0.0), scalar);
        let parts = LossParts {
            seg_s: scalar(&seg_s)?,
            seg_t: scalar(&seg_t)?,
            st_s: opt_value(&st_s)?,
            st_t: opt_value(&st_t)?,
            adv_s: scalar(&adv_s)?,
            adv_t: scalar(&adv_t)?,
            disc_s: disc_s_v,
            disc_t: disc_t_v,
        };
        let bundle = combine(parts, cfg.lambda, cfg.beta).map_err(|e| e.at_step(step + 1))?;
        let terms = StudentTerms {
            seg_s,
            seg_t,
            st_s,
            st_t,
            adv_s: adversarial_on.then_some(adv_s),
            adv_t: adversarial_on.then_some(adv_t),
        };
        let grads = combined_objective(&terms, cfg.lambda, cfg.beta)?.backward()?;
        let params = self.trainable_params();
        self.main_opt.step(&params, &grads, lr_factor)?;
        Ok(bundle)
    }

    pub fn to_checkpoint(&self, class_names: Vec<String>, normalization: Normalization) -> Result<Checkpoint> {
        let mut tensors = BTreeMap::new();
        let mut optimizer_steps = BTreeMap::new();
        for (name, var) in self.ensemble.all_params() {
            tensors.insert(format!("{MODEL_PREFIX}{name}"), var.as_tensor().detach());
        }
        if let Some(t) = &self.teacher {
            for (name, var) in t.params() {
                tensors.insert(name, var.as_tensor().detach());
            }
        }
        for (prefix, opt) in [(MAIN_OPT_PREFIX, &self.main_opt), (DISC_OPT_PREFIX, &self.disc_opt)] {
            for (name, st) in &opt.state {
                let key = format!("{prefix}{name}");
                tensors.insert(format!("{key}.first"), st.first.clone());
                if let Some(second) = &st.second {
                    tensors.insert(format!("{key}.second"), second.clone());
                }
                optimizer_steps.insert(key, st.steps);
            }
        }
        Ok(Checkpoint {
            meta: CheckpointMeta {
                kind: CheckpointKind::Model,
                step: self.step,
                config: Some(self.config.clone()),
                network: Some(self.config.network()),
                class_names,
                normalization,
                optimizer_steps,
            },
            dtype: self.config.dtype(),
            tensors,
        })
    }

    /// Rebuild a state from a model checkpoint using its stored config.
    pub fn from_checkpoint(ckpt: &Checkpoint, registry: &Registry) -> Result<Self> {
        let config = ckpt
            .meta
            .config
            .clone()
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training config".into()))?;
        Self::from_checkpoint_with(ckpt, config, registry)
    }

    /// Rebuild a state from a checkpoint under `config`, which must describe
    /// the same networks, method and precision (schedule lengths may differ).
    pub fn from_checkpoint_with(ckpt: &Checkpoint, config: TrainConfig, registry: &Registry) -> Result<Self> {
        if ckpt.meta.kind != CheckpointKind::Model {
            return Err(Error::Checkpoint("not a model checkpoint".into()));
        }
        if let Some(stored) = &ckpt.meta.config {
            if stored.network() != config.network()
                || stored.method != config.method
                || stored.precision != config.precision
                || stored.paradigm != config.paradigm
            {
                return Err(Error::Checkpoint(
                    "checkpoint networks, method, precision or paradigm differ from the config".into(),
                ));
            }
        }
        let mut state = Self::with_registry(config, registry)?;
        let dtype = state.config.dtype();
        let assign = |name: &str, var: &candle_core::Var| -> Result<()> {
            let t = ckpt.tensor(name)?;
            if t.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, network expects {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(dtype)?)?;
            Ok(())
        };
        for (name, var) in state.ensemble.all_params() {
            assign(&format!("{MODEL_PREFIX}{name}"), &var)?;
        }
        if let Some(t) = &state.teacher {
            for (name, var) in t.params() {
                assign(&name, &var)?;
            }
        }
        for (prefix, opt) in [(MAIN_OPT_PREFIX, &mut state.main_opt), (DISC_OPT_PREFIX, &mut state.disc_opt)] {
            for (key, &steps) in ckpt.meta.optimizer_steps.range(prefix.to_string()..) {
                let Some(name) = key.strip_prefix(prefix) else {
                    break;
                };
                let first = ckpt.tensor(&format!("{key}.first"))?.to_dtype(dtype)?;
                let second = ckpt
                    .tensors
                    .get(&format!("{key}.second"))
                    .map(|t| t.to_dtype(dtype))
                    .transpose()?;
                opt.state.insert(name.to_string(), ParamState { first, second, steps });
            }
        }
        if let Some(t) = state.teacher.as_mut() {
            t.step = ckpt.meta.step.div_ceil(state.config.ema_interval);
        }
        state.step = ckpt.meta.step;
        Ok(state)
    }
}

/// Where and how [`fit`] writes its outputs.
#[derive(Debug, Default)]
pub struct FitOptions {
    /// Log, checkpoints and config snapshot go here when set.
    pub out_dir: Option<PathBuf>,
    /// Continue from this checkpoint instead of initialising.
    pub resume: Option<PathBuf>,
    /// Report progress through `log::info!` every this many steps (0: never).
    pub progress_every: u64,
}

#[derive(Debug)]
pub struct FitResult {
    pub state: TrainState,
    /// Records of the steps run by this call.
    pub log: Vec<LogRecord>,
}

fn check_inputs(config: &TrainConfig, source: &Dataset, target: &Dataset) -> Result<()> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Data("source and target datasets must both contain patches".into()));
    }
    if !source.has_labels() {
        return Err(Error::Data("every source patch needs a label".into()));
    }
    for (name, d) in [("source", source), ("target", target)] {
        if d.manifest.patch_size != config.patch_size {
            return Err(Error::Data(format!(
                "{name} patches are {}px, config patch_size is {}",
                d.manifest.patch_size, config.patch_size
            )));
        }
        if d.manifest.num_classes() != config.num_classes {
            return Err(Error::Data(format!(
                "{name} dataset has {} classes, config num_classes is {}",
                d.manifest.num_classes(),
                config.num_classes
            )));
        }
    }
    Ok(())
}

fn open_log(dir: &Path, append: bool) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LOG_FILE);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    Ok(BufWriter::new(file))
}

/// Run `config.max_iters` steps (or the remainder after a resume).
pub fn fit(config: &TrainConfig, source: &Dataset, target: &Dataset, options: &FitOptions) -> Result<FitResult> {
    fit_with_registry(config, source, target, options, &Registry::default())
}

pub fn fit_with_registry(
    config: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    options: &FitOptions,
    registry: &Registry,
) -> Result<FitResult> {
    config.validate()?;
    check_inputs(config, source, target)?;
    let mut state = match &options.resume {
        Some(path) => TrainState::from_checkpoint_with(&Checkpoint::load(path)?, config.clone(), registry)?,
        None => TrainState::with_registry(config.clone(), registry)?,
    };
    let class_names = source.manifest.class_names.clone();
    let normalization = source.manifest.normalization;
    let mut writer = match &options.out_dir {
        Some(dir) => {
            let w = open_log(dir, options.resume.is_some())?;
            let snap = dir.join(CONFIG_SNAPSHOT);
            std::fs::write(&snap, config.to_toml()?).map_err(|e| Error::io(&snap, e))?;
            Some(w)
        }
        None => None,
    };
    let source_sampler = BatchSampler::new(source.len(), config.batch_size, config.seed, 0);
    let target_sampler = BatchSampler::new(target.len(), config.batch_size, config.seed, 1);
    let dtype = config.dtype();
    let mut log = Vec::new();
    while state.step < config.max_iters {
        let si = source_sampler.batch(state.step);
        let ti = target_sampler.batch(state.step);
        let x_s = source.images(&si, dtype)?;
        let y_s = source.labels(&si)?;
        let x_t = target.images(&ti, dtype)?;
        let bundle = state.train_step(&x_s, &y_s, &x_t)?;
        let record = LogRecord::new(state.step, &bundle);
        if let Some(w) = writer.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}").map_err(|e| Error::io(LOG_FILE, e))?;
        }
        if options.progress_every > 0 && state.step % options.progress_every == 0 {
            log::info!(
                "step {}/{}: combined {:.4} (seg {:.4}/{:.4}, st {:.4}/{:.4}, disc {:.4}/{:.4})",
                state.step,
                config.max_iters,
                record.combined,
                record.parts.seg_s,
                record.parts.seg_t,
                record.parts.st_s,
                record.parts.st_t,
                record.parts.disc_s,
                record.parts.disc_t
            );
        }
        log.push(record);
        if let Some(dir) = &options.out_dir {
            if config.checkpoint_interval > 0 && state.step % config.checkpoint_interval == 0 {
                state
                    .to_checkpoint(class_names.clone(), normalization)?
                    .save(&dir.join("checkpoints").join(format!("step_{:06}.ckpt", state.step)))?;
            }
        }
    }
    if let Some(w) = writer.as_mut() {
        w.flush().map_err(|e| Error::io(LOG_FILE, e))?;
    }
    if let Some(dir) = &options.out_dir {
        state
            .to_checkpoint(class_names, normalization)?
            .save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok(FitResult { state, log })
}

/// Parse an NDJSON training log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
