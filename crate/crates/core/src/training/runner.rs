use std::collections::BTreeMap;

use candle_core::Tensor;

use super::checkpoint::{Checkpoint, Role};
use super::config::DistillConfig;
use super::history::{EpochRecord, RunDir, ValMetrics, BEST, HISTORY, LAST};
use super::optim::Sgd;
use super::schedule::{schedule_step, Action, TrainState};
use crate::data::{batch_iterator, class_weights, AugmentDraw, SplitData};
use crate::error::{Error, Result};
use crate::losses::{composite_loss, contrastive_loss, weighted_cross_entropy, ClassWeights, LossBreakdown, LossInputs, SelfSupervisionBatch, Terms};
use crate::metrics::{probabilities, MetricsReport};
use crate::models::{build_backbone, BackboneSpec, Mode, Model};
use crate::ops;
use crate::seeding::derive_seed;

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint of the epoch with the lowest validation loss.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn stopped_early(&self) -> bool {
        self.history.last().is_some_and(|r| r.action == Action::Stop)
    }
}

enum Objective<'a> {
    Teacher { contrastive: bool },
    Student { teacher: Option<&'a Model>, terms: Terms },
}

struct Run<'a> {
    cfg: &'a DistillConfig,
    role: Role,
    model: Model,
    objective: Objective<'a>,
    weights: ClassWeights,
    train: &'a SplitData,
    val: &'a SplitData,
    run_dir: Option<&'a RunDir>,
}

fn non_finite(b: &LossBreakdown) -> Option<&'static str> {
    b.components.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
}

impl Run<'_> {
    fn ss_batch(&self, model: &Model, views: &Tensor, mode: Mode) -> Result<SelfSupervisionBatch> {
        let taps = model.forward_with_taps(views, mode)?;
        Ok(SelfSupervisionBatch {
            projections: model.projection_head_forward(&taps.embedding)?,
            views: self.cfg.self_supervision.views,
            temperature: self.cfg.self_supervision.temperature,
        })
    }

    fn batch_loss(&self, data: &SplitData, indices: &[usize], images: &Tensor, labels: &[usize], mode: Mode, views: AugmentDraw<'_>) -> Result<(LossBreakdown, Tensor)> {
        let student = self.model.forward_with_taps(images, mode)?;
        let v = self.cfg.self_supervision.views;
        match &self.objective {
            Objective::Teacher { contrastive } => {
                let wce = weighted_cross_entropy(&student.logits, labels, &self.weights)?;
                let mut components = vec![("wce", ops::scalar(&wce)?)];
                let mut total = wce;
                if *contrastive {
                    let imgs = data.assemble_views(indices, v, views)?;
                    let c = contrastive_loss(&self.ss_batch(&self.model, &imgs, mode)?)?;
                    components.push(("contrastive", ops::scalar(&c)?));
                    total = (total + c.affine(self.cfg.self_supervision.contrastive_weight, 0.0)?)?;
                }
                components.push(("total", ops::scalar(&total)?));
                Ok((LossBreakdown { total, components }, student.logits))
            }
            Objective::Student { teacher, terms } => {
                let teacher_taps = match teacher {
                    Some(t) if terms.needs_teacher() => Some(t.forward_with_taps(images, Mode::Eval)?.detach()),
                    _ => None,
                };
                let adapted = match (&teacher_taps, terms.crkd) {
                    (Some(t), true) => {
                        let (_, _, h, w) = t.features.dims4()?;
                        Some(self.model.adapt(&student.features, (h, w))?)
                    }
                    _ => None,
                };
                let (teacher_ss, student_ss) = match teacher {
                    Some(t) if terms.sskd => {
                        let imgs = data.assemble_views(indices, v, views)?;
                        let mut ts = self.ss_batch(t, &imgs, Mode::Eval)?;
                        ts.projections = ts.projections.detach();
                        (Some(ts), Some(self.ss_batch(&self.model, &imgs, mode)?))
                    }
                    _ => (None, None),
                };
                let inputs = LossInputs {
                    teacher: teacher_taps.as_ref(),
                    student: &student,
                    adapted_student_features: adapted.as_ref(),
                    labels,
                    weights: &self.weights,
                    teacher_ss: teacher_ss.as_ref(),
                    student_ss: student_ss.as_ref(),
                };
                Ok((composite_loss(&inputs, &self.cfg.loss_weights, *terms)?, student.logits))
            }
        }
    }

    fn train_epoch(&self, epoch: usize, lr: f64, opt: &mut Sgd) -> Result<BTreeMap<String, f64>> {
        let cfg = self.cfg;
        let batches = batch_iterator(self.train.len(), cfg.batch_size, cfg.seed, epoch, cfg.drop_last)?;
        let draw = AugmentDraw { policy: &cfg.augment, seed: cfg.seed, epoch };
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        for idx in &batches {
            let batch = self.train.assemble(idx, Some(draw))?;
            let (loss, _) = self.batch_loss(self.train, idx, &batch.images, &batch.labels, Mode::Train, draw)?;
            if let Some(component) = non_finite(&loss) {
                return Err(Error::Diverged { component: component.into(), epoch });
            }
            let grads = loss.total.backward()?;
            for p in self.model.parameters().trainable() {
                if let Some(g) = grads.get(p.var.as_tensor()) {
                    if !ops::all_finite(g)? {
                        return Err(Error::Diverged { component: format!("gradient of {}", p.name), epoch });
                    }
                }
            }
            opt.step(self.model.parameters(), &grads, lr)?;
            for (name, v) in &loss.components {
                *sums.entry((*name).to_string()).or_default() += v;
            }
        }
        let n = batches.len() as f64;
        sums.values_mut().for_each(|v| *v /= n);
        Ok(sums)
    }

    /// Sample-weighted mean validation objective and validation metrics.
    fn validate(&self, epoch: usize) -> Result<(f64, ValMetrics)> {
        let cfg = self.cfg;
        let n = self.val.len();
        if n == 0 {
            return Err(Error::invalid("validation split is empty"));
        }
        let views = AugmentDraw { policy: &cfg.augment, seed: derive_seed(cfg.seed, "val-views", &[]), epoch: 0 };
        let mut total = 0.0;
        let mut scores = Vec::with_capacity(n);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(cfg.batch_size) {
            let batch = self.val.assemble(chunk, None)?;
            let (loss, logits) = self.batch_loss(self.val, chunk, &batch.images, &batch.labels, Mode::Eval, views)?;
            if let Some(component) = non_finite(&loss) {
                return Err(Error::Diverged { component: format!("val {component}"), epoch });
            }
            total += ops::scalar(&loss.total)? * chunk.len() as f64;
            scores.extend(probabilities(&logits)?);
        }
        let report = MetricsReport::from_scores(&scores, &self.val.set.labels(), &self.val.set.class_names)?;
        let metrics = ValMetrics { acc: report.acc, bacc: report.bacc, auc_macro: report.auc_macro, map_macro: report.map_macro };
        Ok((total / n as f64, metrics))
    }

    fn capture(&self, opt: &Sgd, state: &TrainState, history: &[EpochRecord]) -> Result<Checkpoint> {
        Checkpoint::capture(self.role, &self.model, &opt.velocity, state, history, Some(serde_json::to_value(self.cfg)?))
    }

    fn execute(self, resume: Option<(&Checkpoint, &Checkpoint)>) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        let schedule = cfg.schedule();
        let mut opt = Sgd::new(&cfg.optimizer);
        let (mut state, mut history, mut best) = match resume {
            Some((last, best)) => {
                opt.velocity = last.velocity.clone();
                (last.state.clone(), last.history.clone(), best.clone())
            }
            None => {
                let (val_loss, val) = self.validate(0)?;
                let state = TrainState::with_initial_loss(cfg.optimizer.learning_rate, val_loss);
                let record = EpochRecord {
                    epoch: 0,
                    lr: state.lr_current,
                    train: BTreeMap::new(),
                    val_loss,
                    val,
                    action: Action::Continue,
                    best_val_loss: val_loss,
                };
                let history = vec![record];
                let best = self.capture(&opt, &state, &history)?;
                if let Some(rd) = self.run_dir {
                    rd.write_history(&history)?;
                    rd.save(BEST, &best)?;
                }
                (state, history, best)
            }
        };
        if let Some(rd) = self.run_dir {
            if resume.is_some() {
                rd.write_history(&history)?;
            }
        }
        let stopped = history.last().is_some_and(|r| r.action == Action::Stop);
        if !stopped {
            while state.epoch < cfg.max_epochs {
                let epoch = state.epoch + 1;
                let lr = state.lr_current;
                let train = self.train_epoch(epoch, lr, &mut opt)?;
                let (val_loss, val) = self.validate(epoch)?;
                let (next, action) = schedule_step(&state, val_loss, &schedule)?;
                let record = EpochRecord {
                    epoch,
                    lr,
                    train,
                    val_loss,
                    val,
                    action,
                    best_val_loss: next.best_val_loss.unwrap_or(val_loss),
                };
                log::info!(
                    "{:?} epoch {epoch}: train {:.4} val {:.4} bacc {:.3} {:?}",
                    self.role,
                    record.train.get("total").copied().unwrap_or(f64::NAN),
                    val_loss,
                    val.bacc,
                    action
                );
                if let Some(rd) = self.run_dir {
                    rd.append_history(&record)?;
                }
                history.push(record);
                state = next;
                if state.best_epoch == epoch {
                    best = self.capture(&opt, &state, &history)?;
                    if let Some(rd) = self.run_dir {
                        rd.save(BEST, &best)?;
                    }
                }
                if let Some(rd) = self.run_dir {
                    rd.save(LAST, &self.capture(&opt, &state, &history)?)?;
                }
                if action == Action::Stop {
                    break;
                }
            }
        }
        let last = self.capture(&opt, &state, &history)?;
        if let Some(rd) = self.run_dir {
            rd.save(LAST, &last)?;
            debug_assert!(rd.join(HISTORY).is_file());
        }
        Ok(TrainOutcome { best, last, history })
    }
}

fn check_inputs(cfg: &DistillConfig, train: &SplitData, val: &SplitData, classes: usize) -> Result<()> {
    cfg.validate()?;
    for (name, split) in [("train", train), ("validation", val)] {
        if split.set.class_count() != classes {
            return Err(Error::Config(format!(
                "{name} split has {} classes, model outputs {classes}",
                split.set.class_count()
            )));
        }
    }
    if cfg.batch_size > train.len() {
        return Err(Error::Config(format!("batch_size {} exceeds the {} training items", cfg.batch_size, train.len())));
    }
    Ok(())
}

/// Train a teacher with weighted cross-entropy, adding the multi-view
/// contrastive term when the configured method is self-supervised.
pub fn pretrain_teacher(cfg: &DistillConfig, spec: &BackboneSpec, train: &SplitData, val: &SplitData, run_dir: Option<&RunDir>) -> Result<TrainOutcome> {
    let model = build_backbone(spec, derive_seed(cfg.seed, "teacher", &[]))?;
    pretrain_teacher_from(cfg, model, train, val, run_dir)
}

pub fn pretrain_teacher_from(cfg: &DistillConfig, model: Model, train: &SplitData, val: &SplitData, run_dir: Option<&RunDir>) -> Result<TrainOutcome> {
    check_inputs(cfg, train, val, model.spec().class_count)?;
    Run {
        cfg,
        role: Role::Teacher,
        model,
        objective: Objective::Teacher { contrastive: cfg.method.self_supervised() },
        weights: class_weights(&train.set)?,
        train,
        val,
        run_dir,
    }
    .execute(None)
}

fn student_run<'a>(cfg: &'a DistillConfig, mut student: Model, teacher: Option<&'a Model>, train: &'a SplitData, val: &'a SplitData, run_dir: Option<&'a RunDir>) -> Result<Run<'a>> {
    check_inputs(cfg, train, val, student.spec().class_count)?;
    let terms = cfg.method.terms();
    let teacher = if terms.needs_teacher() {
        let t = teacher.ok_or_else(|| Error::Config(format!("method {} needs a teacher checkpoint", cfg.method)))?;
        if t.spec().class_count != student.spec().class_count {
            return Err(Error::Config(format!(
                "teacher predicts {} classes, student {}",
                t.spec().class_count,
                student.spec().class_count
            )));
        }
        if terms.sskd && t.spec().projection_dim != student.spec().projection_dim {
            return Err(Error::Config("teacher and student projection widths differ".into()));
        }
        if terms.crkd {
            student.attach_adapter(t.spec().last_conv_channels, derive_seed(cfg.seed, "adapter", &[]))?;
        }
        Some(t)
    } else {
        None
    };
    Ok(Run {
        cfg,
        role: Role::Student,
        model: student,
        objective: Objective::Student { teacher, terms },
        weights: class_weights(&train.set)?,
        train,
        val,
        run_dir,
    })
}

/// Distill into a freshly initialised student built from `spec`.
pub fn distill_student(cfg: &DistillConfig, spec: &BackboneSpec, teacher: Option<&Checkpoint>, train: &SplitData, val: &SplitData, run_dir: Option<&RunDir>) -> Result<TrainOutcome> {
    let student = build_backbone(spec, derive_seed(cfg.seed, "student", &[]))?;
    let teacher = teacher.map(Checkpoint::model).transpose()?;
    distill_student_from(cfg, student, teacher.as_ref(), train, val, run_dir)
}

/// Distill into a given student model. The teacher is only read.
pub fn distill_student_from(cfg: &DistillConfig, student: Model, teacher: Option<&Model>, train: &SplitData, val: &SplitData, run_dir: Option<&RunDir>) -> Result<TrainOutcome> {
    student_run(cfg, student, teacher, train, val, run_dir)?.execute(None)
}

/// Continue a run from its last and best checkpoints.
pub fn resume_run(cfg: &DistillConfig, last: &Checkpoint, best: &Checkpoint, teacher: Option<&Checkpoint>, train: &SplitData, val: &SplitData, run_dir: Option<&RunDir>) -> Result<TrainOutcome> {
    let model = last.model()?;
    let run = match last.role {
        Role::Teacher => {
            check_inputs(cfg, train, val, model.spec().class_count)?;
            Run {
                cfg,
                role: Role::Teacher,
                model,
                objective: Objective::Teacher { contrastive: cfg.method.self_supervised() },
                weights: class_weights(&train.set)?,
                train,
                val,
                run_dir,
            }
        }
        Role::Student => {
            let teacher = teacher.map(Checkpoint::model).transpose()?;
            return student_run(cfg, model, teacher.as_ref(), train, val, run_dir)?.execute(Some((last, best)));
        }
    };
    run.execute(Some((last, best)))
}
