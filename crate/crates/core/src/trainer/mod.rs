//! Teacher pretraining and student distillation loops.

mod optim;

pub use optim::{adam_step, adam_step_encoder, lr_at, AdamState};

use serde::{Deserialize, Serialize};

use crate::encoder::{momentum_update, Activation, Architecture, EncoderGrads, EncoderParams, Head};
use crate::error::{Error, Result};
use crate::losses::{
    fkd_loss, hn_loss_cross_view, infonce_loss, koleo_loss, rdcd_loss, rsd_loss, HnMode, LossValue,
    LossWeights, RdcdComponents, Temperatures,
};
use crate::memory::InstanceQueue;
use crate::numerics::{normalize_rows, normalize_rows_backward, Mat, Rng};
use crate::synthdata::{augment_rows, CopyCorpus};

/// What fills the relational slot of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelMode {
    #[default]
    Rsd,
    /// MSE between L2-normalized matcher and teacher outputs.
    Fkd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub teacher_trunk: Vec<usize>,
    /// Teacher descriptor dimension; also the student matcher width.
    pub teacher_dim: usize,
    pub student_trunk: Vec<usize>,
    pub student_projector_hidden: Vec<usize>,
    pub descriptor_dim: usize,
    pub projector_hidden_activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            teacher_trunk: vec![128, 128],
            teacher_dim: 64,
            student_trunk: vec![64, 64],
            student_projector_hidden: vec![32],
            descriptor_dim: 16,
            projector_hidden_activation: Activation::Relu,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = self.teacher_trunk.iter().chain(&self.student_trunk).chain(&self.student_projector_hidden);
        if self.teacher_trunk.is_empty() || self.student_trunk.is_empty() {
            return Err(Error::Config("trunks need at least one layer".into()));
        }
        if self.teacher_dim == 0 || self.descriptor_dim == 0 || widths.into_iter().any(|&w| w == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn teacher_arch(&self, input_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            trunk: self.teacher_trunk.clone(),
            trunk_activation: Activation::Relu,
            matcher_dim: None,
            projector: vec![self.teacher_dim],
            projector_hidden_activation: Activation::Relu,
        }
    }

    pub fn student_arch(&self, input_dim: usize) -> Architecture {
        let mut projector = self.student_projector_hidden.clone();
        projector.push(self.descriptor_dim);
        Architecture {
            input_dim,
            trunk: self.student_trunk.clone(),
            trunk_activation: Activation::Relu,
            matcher_dim: Some(self.teacher_dim),
            projector,
            projector_hidden_activation: self.projector_hidden_activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub temps: Temperatures,
    pub weights: LossWeights,
    pub queue_teacher: usize,
    pub queue_student: usize,
    pub seed: u64,
    pub hn_mode: HnMode,
    pub rel_mode: RelMode,
    /// Drop the positive from the InfoNCE denominator.
    pub exclude_positive: bool,
    /// KoLeo weight during teacher pretraining.
    pub koleo_weight: f64,
    /// Train on only the first `n` training items.
    pub train_samples: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            lr: 3e-3,
            weight_decay: 1e-6,
            warmup_epochs: 5,
            momentum: 0.99,
            temps: Temperatures::default(),
            weights: LossWeights::default(),
            queue_teacher: 1024,
            queue_student: 1024,
            seed: 7,
            hn_mode: HnMode::Hardest,
            rel_mode: RelMode::Rsd,
            exclude_positive: false,
            koleo_weight: 1.0,
            train_samples: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} < 2", self.batch_size));
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1]", self.momentum));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(self.koleo_weight >= 0.0) {
            return bad("lr must be positive, weight_decay and koleo_weight non-negative".into());
        }
        if self.queue_teacher < 2 || self.queue_student < 1 {
            return bad("queues too small".into());
        }
        self.temps.validate()?;
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss_rel: f64,
    pub loss_con: f64,
    pub loss_hn: f64,
    pub loss_total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_rel: f64,
    pub loss_con: f64,
    pub loss_hn: f64,
    pub loss_total: f64,
    /// Learning rate at the epoch's last step.
    pub lr: f64,
    pub q_t_fill: usize,
    pub q_s_fill: usize,
}

/// Training trace. Skipped (warming-up) components count as zero in the means.
///
/// For teacher pretraining `loss_con` is InfoNCE, `loss_hn` holds KoLeo and
/// `loss_rel` is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub role: String,
    pub epochs: Vec<EpochStats>,
    pub steps: Vec<StepStats>,
    pub steps_per_epoch: usize,
    /// Set when a non-finite loss, gradient or parameter stopped training early.
    pub diverged: Option<String>,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl TrainReport {
    fn new(role: &str, steps_per_epoch: usize) -> Self {
        Self {
            role: role.into(),
            epochs: Vec::new(),
            steps: Vec::new(),
            steps_per_epoch,
            diverged: None,
            wall_time_secs: 0.0,
        }
    }

    pub fn lr_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.lr).collect()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss_total)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss_rel,loss_con,loss_hn,loss_total,lr,qT_fill,qS_fill\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.epoch, e.loss_rel, e.loss_con, e.loss_hn, e.loss_total, e.lr, e.q_t_fill, e.q_s_fill
            ));
        }
        out
    }

    fn close_epoch(&mut self, epoch: usize, first_step: usize, q_t: usize, q_s: usize) {
        let steps = &self.steps[first_step..];
        if steps.is_empty() {
            return;
        }
        let n = steps.len() as f64;
        let mean = |f: fn(&StepStats) -> f64| steps.iter().map(f).sum::<f64>() / n;
        self.epochs.push(EpochStats {
            epoch,
            loss_rel: mean(|s| s.loss_rel),
            loss_con: mean(|s| s.loss_con),
            loss_hn: mean(|s| s.loss_hn),
            loss_total: mean(|s| s.loss_total),
            lr: steps.last().map_or(0.0, |s| s.lr),
            q_t_fill: q_t,
            q_s_fill: q_s,
        });
    }
}

/// Batch schedule shared by both loops.
struct Schedule {
    n: usize,
    batch: usize,
    steps_per_epoch: usize,
    total: usize,
    warmup: usize,
}

impl Schedule {
    fn new(corpus: &CopyCorpus, cfg: &TrainConfig) -> Result<Self> {
        let n = cfg.train_samples.map_or(corpus.train.len(), |k| k.min(corpus.train.len()));
        if n < 2 {
            return Err(Error::InvalidSizes(format!("{n} training items")));
        }
        let batch = cfg.batch_size.min(n);
        let steps_per_epoch = n / batch;
        Ok(Self {
            n,
            batch,
            steps_per_epoch,
            total: steps_per_epoch * cfg.epochs,
            warmup: steps_per_epoch * cfg.warmup_epochs,
        })
    }

    fn epoch_order(&self, rng: &Rng, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n).collect();
        rng.split_index("epoch", epoch as u64).shuffle(&mut order);
        order
    }
}

/// Adam step that leaves `params` untouched if the update would make them non-finite.
fn guarded_step(
    params: &mut EncoderParams,
    grads: &EncoderGrads,
    adam: &mut AdamState,
    lr: f64,
    wd: f64,
) -> Result<()> {
    let prev = params.clone();
    adam_step_encoder(params, grads, adam, lr, wd)?;
    if !params.is_finite() {
        *params = prev;
        return Err(Error::NonFinite("parameters".into()));
    }
    Ok(())
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::NonFinite(_) | Error::NonFiniteGrad | Error::ZeroVector(_))
}

fn accumulate(
    params: &EncoderParams,
    acc: &mut EncoderGrads,
    trace: &crate::encoder::ForwardTrace,
    upstream: &Mat,
) -> Result<()> {
    let (g, _) = params.backward(trace, upstream)?;
    acc.add_assign(&g)
}

/// Contrastive pretraining with a KoLeo regularizer:
/// `L = InfoNCE + koleo_weight · KoLeo` on the projector output.
pub fn pretrain_teacher(
    corpus: &CopyCorpus,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(EncoderParams, TrainReport)> {
    cfg.validate()?;
    model.validate()?;
    let start = std::time::Instant::now();
    let sched = Schedule::new(corpus, cfg)?;
    let root = Rng::new(cfg.seed).split("teacher");
    let arch = model.teacher_arch(corpus.config.latent_dim);
    let mut params = EncoderParams::init(&arch, &root.split("init"))?;
    let mut key = params.clone();
    let mut adam = AdamState::for_params(&params);
    let mut queue = InstanceQueue::new(cfg.queue_teacher, model.teacher_dim)?;
    let train = corpus.train_matrix();
    let aug = &corpus.config.train_augment;
    let mut report = TrainReport::new("teacher", sched.steps_per_epoch);

    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let first = report.steps.len();
        let order = sched.epoch_order(&root, epoch);
        for b in 0..sched.steps_per_epoch {
            let lr = lr_at(step, sched.total, sched.warmup, cfg.lr);
            let x = train.select_rows(&order[b * sched.batch..(b + 1) * sched.batch]);
            let mut rng = root.split_index("step", step as u64);
            let v1 = augment_rows(&x, aug, &mut rng);
            let v2 = augment_rows(&x, aug, &mut rng);
            let result = (|| -> Result<(StepStats, Mat)> {
                let (z_q, trace) = params.forward(&v1, Head::Projector)?;
                let (z_k, _) = key.forward(&v2, Head::Projector)?;
                let con = if queue.is_warm() {
                    let q = queue.as_matrix()?;
                    infonce_loss(&z_q, &z_k, &q, cfg.temps.tau_contrastive, cfg.exclude_positive)?
                } else {
                    LossValue::skipped(&[z_q.shape(), z_k.shape()])
                };
                let kol = koleo_loss(&z_q)?;
                let mut g = con.grads[0].clone();
                g.add_scaled(&kol.grads[0], cfg.koleo_weight)?;
                let mut grads = EncoderGrads::zeros_like(&params);
                accumulate(&params, &mut grads, &trace, &g)?;
                guarded_step(&mut params, &grads, &mut adam, lr, cfg.weight_decay)?;
                momentum_update(&mut key, &params, cfg.momentum)?;
                let stats = StepStats {
                    loss_rel: 0.0,
                    loss_con: con.value,
                    loss_hn: kol.value,
                    loss_total: con.value + cfg.koleo_weight * kol.value,
                    lr,
                };
                Ok((stats, normalize_rows(&z_k)?.0))
            })();
            match result {
                Ok((stats, keys)) => {
                    report.steps.push(stats);
                    queue.enqueue_batch(&keys)?;
                }
                Err(e) if is_numeric(&e) => {
                    report.diverged = Some(format!("epoch {epoch}, step {step}: {e}"));
                    report.close_epoch(epoch, first, queue.fill(), 0);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
        report.close_epoch(epoch, first, queue.fill(), 0);
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((params, report))
}

/// Distills a student from a frozen teacher with
/// `λ_rel·L_rel + λ_con·L_con + λ_hn·L_hn`.
pub fn distill_student(
    corpus: &CopyCorpus,
    teacher: &EncoderParams,
    model: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(EncoderParams, TrainReport)> {
    cfg.validate()?;
    model.validate()?;
    if teacher.projector_out_dim() != model.teacher_dim {
        return Err(Error::DimMismatch {
            expected: model.teacher_dim,
            got: teacher.projector_out_dim(),
        });
    }
    let start = std::time::Instant::now();
    let sched = Schedule::new(corpus, cfg)?;
    let root = Rng::new(cfg.seed).split("student");
    let arch = model.student_arch(corpus.config.latent_dim);
    let mut params = EncoderParams::init(&arch, &root.split("init"))?;
    let mut key = params.without_matcher();
    let mut adam = AdamState::for_params(&params);
    let mut q_t = InstanceQueue::new(cfg.queue_teacher, model.teacher_dim)?;
    let mut q_s = InstanceQueue::new(cfg.queue_student, model.descriptor_dim)?;
    let train = corpus.train_matrix();
    let aug = &corpus.config.train_augment;
    let w = cfg.weights;
    let mut report = TrainReport::new("student", sched.steps_per_epoch);

    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let first = report.steps.len();
        let order = sched.epoch_order(&root, epoch);
        for b in 0..sched.steps_per_epoch {
            let lr = lr_at(step, sched.total, sched.warmup, cfg.lr);
            let x = train.select_rows(&order[b * sched.batch..(b + 1) * sched.batch]);
            let mut rng = root.split_index("step", step as u64);
            let v1 = augment_rows(&x, aug, &mut rng);
            let v2 = augment_rows(&x, aug, &mut rng);
            let result = (|| -> Result<(StepStats, Mat, Mat)> {
                let (h_t, _) = teacher.forward(&v1, Head::Projector)?;
                let (h_s, tr_m) = params.forward(&v1, Head::Matcher)?;
                let (z_s, tr_1) = params.forward(&v1, Head::Projector)?;
                let (z_s2, tr_2) = params.forward(&v2, Head::Projector)?;
                let (z_k, _) = key.forward(&v2, Head::Projector)?;

                let rel = match cfg.rel_mode {
                    _ if w.lambda_rel == 0.0 => LossValue::skipped(&[h_s.shape()]),
                    RelMode::Rsd if q_t.is_warm() => rsd_loss(&h_t, &h_s, &q_t.as_matrix()?, &cfg.temps)?,
                    RelMode::Rsd => LossValue::skipped(&[h_s.shape()]),
                    RelMode::Fkd => {
                        let (u_s, n_s) = normalize_rows(&h_s)?;
                        let (u_t, _) = normalize_rows(&h_t)?;
                        let mut lv = fkd_loss(&u_s, &u_t)?;
                        lv.grads[0] = normalize_rows_backward(&u_s, &n_s, &lv.grads[0]);
                        lv
                    }
                };
                let con = if w.lambda_con > 0.0 && q_s.is_warm() {
                    infonce_loss(
                        &z_s,
                        &z_k,
                        &q_s.as_matrix()?,
                        cfg.temps.tau_contrastive,
                        cfg.exclude_positive,
                    )?
                } else {
                    LossValue::skipped(&[z_s.shape(), z_k.shape()])
                };
                let hn = if w.lambda_hn > 0.0 {
                    hn_loss_cross_view(&z_s, &z_s2, cfg.hn_mode)?
                } else {
                    LossValue::skipped(&[z_s.shape(), z_s2.shape()])
                };
                let stats = StepStats {
                    loss_rel: rel.value,
                    loss_con: con.value,
                    loss_hn: hn.value,
                    loss_total: 0.0,
                    lr,
                };
                let total = rdcd_loss(&RdcdComponents { rel, con, hn }, &w)?;
                let stats = StepStats {
                    loss_total: total.value,
                    ..stats
                };
                if !total.value.is_finite() {
                    return Err(Error::NonFinite("total loss".into()));
                }
                let mut grads = EncoderGrads::zeros_like(&params);
                accumulate(&params, &mut grads, &tr_m, &total.grads[0])?;
                accumulate(&params, &mut grads, &tr_1, &total.grads[1])?;
                accumulate(&params, &mut grads, &tr_2, &total.grads[2])?;
                guarded_step(&mut params, &grads, &mut adam, lr, cfg.weight_decay)?;
                momentum_update(&mut key, &params, cfg.momentum)?;
                Ok((stats, normalize_rows(&h_t)?.0, normalize_rows(&z_k)?.0))
            })();
            match result {
                Ok((stats, t_keys, s_keys)) => {
                    report.steps.push(stats);
                    q_t.enqueue_batch(&t_keys)?;
                    q_s.enqueue_batch(&s_keys)?;
                }
                Err(e) if is_numeric(&e) => {
                    report.diverged = Some(format!("epoch {epoch}, step {step}: {e}"));
                    report.close_epoch(epoch, first, q_t.fill(), q_s.fill());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            step += 1;
        }
        report.close_epoch(epoch, first, q_t.fill(), q_s.fill());
    }
    report.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((params, report))
}
