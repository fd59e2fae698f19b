//! Training loops for the four modes, evaluation, and run persistence.

mod checkpoint;
mod config;
mod eval;
mod metrics;

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

pub use checkpoint::{BranchSnapshot, Checkpoint, MAGIC, VERSION};
pub use config::{parse_pairs, BranchConfig, DistillConfig, EmaConfig, Mode, Role, RunConfig};
pub use eval::{label_rank, topk_hits, AccuracyMeter};
pub use metrics::{Accuracy, LossMeter, MetricsRow, MetricsTable, MetricsWriter, COLUMNS, TIMING_COLUMNS};

use indexmap::IndexMap;

use crate::backbones::{build_pair, Branch, BranchOutput};
use crate::data::{Batch, Batches, Dataset, Prefetch, Split};
use crate::error::{Error, Result};
use crate::nn::{apply_updates, BufferUpdate, Forward, ParamStore};
use crate::optim::{EmaState, OptimState};
use crate::plm::{contrastive_loss, cross_entropy, kl_loss, vpl_objective, LossReport};
use crate::rng::stream;
use crate::schedule::{cosine_lr, StageLosses};
use crate::tensor::{Tape, Tensor, Var};

const INIT_TAG: u64 = 0x696e_6974;

/// One branch with everything that evolves during training.
#[derive(Clone, Debug)]
pub struct BranchState {
    pub role: Role,
    pub branch: Branch,
    pub store: ParamStore,
    pub optim: OptimState,
    pub ema: Option<EmaState>,
    /// A frozen branch (distillation teacher) is never updated and always
    /// runs in inference mode.
    pub frozen: bool,
}

impl BranchState {
    pub fn eval_store(&self) -> Result<ParamStore> {
        match &self.ema {
            Some(e) => e.apply_to(&self.store),
            None => Ok(self.store.clone()),
        }
    }

    fn snapshot(&self) -> BranchSnapshot {
        BranchSnapshot {
            role: self.role,
            frozen: self.frozen,
            store: self.store.clone(),
            optim: self.optim.clone(),
            ema: self.ema.clone(),
        }
    }
}

/// Top-1/top-5 of `branch` with parameters `store` over `data`, in
/// inference mode.
pub fn evaluate_store(branch: &Branch, store: &ParamStore, data: &Dataset, batch_size: usize) -> Result<Accuracy> {
    let mut meter = AccuracyMeter::default();
    for batch in Batches::eval(data, batch_size) {
        let batch = batch?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.images);
        let binding = store.bind(&mut tape, false);
        let mut f = Forward::new(&mut tape, &binding, store, false);
        let out = branch.forward(&mut f, x)?;
        meter.add(tape.value(out.logits), &batch.labels)?;
    }
    Ok(meter.accuracy())
}

/// Per-branch accuracy of a saved run, using EMA weights when present.
pub fn evaluate_checkpoint(ckpt: &Checkpoint, data: &Dataset, batch_size: usize) -> Result<Vec<(Role, Accuracy)>> {
    let config = ckpt.config()?;
    let (cnn, trans) = build_pair(&config.cnn.backbone, &config.trans.backbone, data.shape)?;
    ckpt.branches
        .iter()
        .map(|b| {
            let branch = if b.role == Role::Cnn { &cnn } else { &trans };
            let store = b.eval_store()?;
            let fresh = branch.build_store(&mut stream(0, &[]))?;
            if !fresh.same_layout(&store) {
                return Err(Error::Checkpoint(format!(
                    "{} parameters do not match the configured backbone",
                    b.role
                )));
            }
            Ok((b.role, evaluate_store(branch, &store, data, batch_size)?))
        })
        .collect()
}

struct Pass {
    role: Role,
    out: BranchOutput,
    binding: crate::nn::Binding,
    updates: Vec<BufferUpdate>,
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0] as f64
}

pub struct Trainer {
    config: RunConfig,
    config_text: String,
    train: Arc<Dataset>,
    eval: Arc<Dataset>,
    branches: Vec<BranchState>,
    next_epoch: usize,
    optimizer_steps: u64,
}

impl Trainer {
    /// Load both splits and initialize from the configured seed.
    pub fn new(config: RunConfig) -> Result<Self> {
        let train = Arc::new(config.data.load(Split::Train)?);
        let eval = Arc::new(config.data.load(Split::Test)?);
        Self::with_data(config, train, eval)
    }

    /// Initialize with already loaded datasets.
    pub fn with_data(config: RunConfig, train: Arc<Dataset>, eval: Arc<Dataset>) -> Result<Self> {
        config.validate()?;
        check_data(&config, &train, &eval)?;
        let (cnn, trans) = build_pair(&config.cnn.backbone, &config.trans.backbone, train.shape)?;
        let teacher = match &config.distill {
            Some(d) => Some((d.teacher_role, load_teacher(&d.teacher, d.teacher_role, if d.teacher_role == Role::Cnn { &cnn } else { &trans })?)),
            None => None,
        };
        let mut branches = Vec::new();
        for (role, branch) in [(Role::Cnn, cnn), (Role::Trans, trans)] {
            let bc = config.branch(role);
            if !bc.enabled {
                continue;
            }
            let (store, frozen) = match &teacher {
                Some((r, store)) if *r == role => (store.clone(), true),
                _ => (branch.build_store(&mut stream(config.seed, &[INIT_TAG, role as u64]))?, false),
            };
            let optim = OptimState::new(&store, bc.adamw);
            let ema = match config.ema {
                Some(e) if !frozen => {
                    let mut s = EmaState::new(&store, e.decay_max);
                    s.warmup = e.warmup;
                    Some(s)
                }
                _ => None,
            };
            branches.push(BranchState {
                role,
                branch,
                store,
                optim,
                ema,
                frozen,
            });
        }
        Ok(Trainer {
            config_text: config.to_text(),
            config,
            train,
            eval,
            branches,
            next_epoch: 0,
            optimizer_steps: 0,
        })
    }

    /// Continue a saved run. The stored state replaces initialization.
    pub fn from_checkpoint(ckpt: &Checkpoint, train: Arc<Dataset>, eval: Arc<Dataset>) -> Result<Self> {
        let config = ckpt.config()?;
        check_data(&config, &train, &eval)?;
        let (cnn, trans) = build_pair(&config.cnn.backbone, &config.trans.backbone, train.shape)?;
        let mut branches = Vec::new();
        for snap in &ckpt.branches {
            let branch = if snap.role == Role::Cnn { cnn.clone() } else { trans.clone() };
            let fresh = branch.build_store(&mut stream(0, &[]))?;
            if !fresh.same_layout(&snap.store) {
                return Err(Error::Checkpoint(format!(
                    "{} parameters do not match the configured backbone",
                    snap.role
                )));
            }
            branches.push(BranchState {
                role: snap.role,
                branch,
                store: snap.store.clone(),
                optim: snap.optim.clone(),
                ema: snap.ema.clone(),
                frozen: snap.frozen,
            });
        }
        if ckpt.next_epoch > config.epochs {
            return Err(Error::Checkpoint(format!(
                "checkpoint is at epoch {} of a {}-epoch run",
                ckpt.next_epoch, config.epochs
            )));
        }
        Ok(Trainer {
            config_text: ckpt.config_text.clone(),
            config,
            train,
            eval,
            branches,
            next_epoch: ckpt.next_epoch,
            optimizer_steps: ckpt.optimizer_steps,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    /// The exact resolved configuration, as embedded in every artifact.
    pub fn config_text(&self) -> &str {
        &self.config_text
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.next_epoch >= self.config.epochs
    }

    /// Optimizer updates performed so far, summed over branches: one per
    /// batch in the joint modes, two per batch in dml.
    pub fn optimizer_steps(&self) -> u64 {
        self.optimizer_steps
    }

    pub fn branch(&self, role: Role) -> Option<&BranchState> {
        self.branches.iter().find(|b| b.role == role)
    }

    pub fn branch_mut(&mut self, role: Role) -> Option<&mut BranchState> {
        self.branches.iter_mut().find(|b| b.role == role)
    }

    pub fn train_data(&self) -> &Arc<Dataset> {
        &self.train
    }

    pub fn eval_data(&self) -> &Arc<Dataset> {
        &self.eval
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.config_text.clone(),
            next_epoch: self.next_epoch,
            optimizer_steps: self.optimizer_steps,
            branches: self.branches.iter().map(BranchState::snapshot).collect(),
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        (self.train.len() / self.config.batch_size).max(1)
    }

    fn total_steps(&self) -> usize {
        self.batches_per_epoch() * self.config.epochs
    }

    /// Pair losses active in `epoch`; only vpl mode follows the stage
    /// schedule.
    pub fn active_losses(&self, epoch: usize) -> Result<StageLosses> {
        match self.config.mode {
            Mode::Vpl => self
                .config
                .schedule()?
                .ok_or_else(|| Error::config("stage.x_percent", "required in vpl mode"))?
                .stage_of(epoch),
            Mode::Independent => Ok(StageLosses::NONE),
            Mode::Dml => Ok(StageLosses::KL_ONLY),
            Mode::Distill => {
                let d = self.config.distill.as_ref().expect("validated");
                Ok(match d.teacher_role {
                    Role::Trans => StageLosses::KL_ONLY,
                    Role::Cnn => StageLosses::CL_ONLY,
                })
            }
        }
    }

    fn lr(&self, b: &BranchState) -> f64 {
        let c = self.config.branch(b.role);
        cosine_lr(b.optim.step as usize, self.total_steps(), c.lr, c.min_lr)
    }

    /// Train one epoch, then evaluate every branch.
    pub fn run_epoch(&mut self) -> Result<MetricsRow> {
        let epoch = self.next_epoch;
        if epoch >= self.config.epochs {
            return Err(Error::contract(format!(
                "run already finished its {} epochs",
                self.config.epochs
            )));
        }
        let active = self.active_losses(epoch)?;
        let (bs, flags, seed) = (self.config.batch_size, self.config.data.augment, self.config.seed);
        let batches: Box<dyn Iterator<Item = Result<Batch>>> = if self.config.prefetch > 0 {
            Box::new(Prefetch::spawn(self.train.clone(), bs, flags, seed, epoch, self.config.prefetch))
        } else {
            Box::new(Batches::train(self.train.clone(), bs, flags, seed, epoch))
        };
        let start = Instant::now();
        let mut meter = LossMeter::default();
        for (step, batch) in batches.enumerate() {
            let batch = batch?;
            let report = match self.config.mode {
                Mode::Vpl | Mode::Independent => self.joint_step(&batch, active),
                Mode::Distill => self.distill_step(&batch),
                Mode::Dml => self.dml_step(&batch),
            };
            let report = report.map_err(|e| match e {
                Error::NumericOverflow { op } => Error::Diverged {
                    epoch,
                    step,
                    report: format!("{op} produced a non-finite value; epoch means so far: {}", meter.mean()),
                },
                other => other,
            })?;
            if !report.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step,
                    report: report.to_string(),
                });
            }
            meter.add(&report);
        }
        let train_seconds = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let mut evals: IndexMap<Role, Accuracy> = IndexMap::new();
        for b in &self.branches {
            let store = b.eval_store()?;
            evals.insert(b.role, evaluate_store(&b.branch, &store, &self.eval, self.config.eval_batch_size)?);
        }
        let eval_seconds = start.elapsed().as_secs_f64();
        let lr_of = |role: Role| {
            self.branch(role)
                .filter(|b| !b.frozen && b.optim.step > 0)
                .map(|b| {
                    let c = self.config.branch(role);
                    cosine_lr(b.optim.step as usize - 1, self.total_steps(), c.lr, c.min_lr)
                })
        };
        let row = MetricsRow {
            epoch,
            stage: if self.config.mode == Mode::Vpl { active.stage_number() } else { 0 },
            lr_cnn: lr_of(Role::Cnn),
            lr_trans: lr_of(Role::Trans),
            losses: meter.mean(),
            eval_cnn: evals.get(&Role::Cnn).copied(),
            eval_trans: evals.get(&Role::Trans).copied(),
            eval_weights: if self.config.ema.is_some() { "ema" } else { "raw" },
            optimizer_steps: self.optimizer_steps,
            train_seconds,
            eval_seconds,
        };
        self.next_epoch += 1;
        Ok(row)
    }

    /// Forward `roles` on one shared batch. Branches listed in `grad` are
    /// recorded for differentiation; frozen ones run in inference mode.
    fn forward(&self, tape: &mut Tape, images: &Tensor, grad: &[Role]) -> Result<Vec<Pass>> {
        let x = tape.constant(images.clone());
        let mut passes = Vec::new();
        for b in &self.branches {
            let train = !b.frozen;
            let binding = b.store.bind(tape, grad.contains(&b.role) && !b.frozen);
            let mut f = Forward::new(tape, &binding, &b.store, train);
            let out = b.branch.forward(&mut f, x)?;
            let updates = std::mem::take(&mut f.updates);
            passes.push(Pass {
                role: b.role,
                out,
                binding,
                updates,
            });
        }
        Ok(passes)
    }

    /// Backward from `loss` and update each branch in `roles`, applying its
    /// buffer writes from `passes`. Every gradient is checked before any
    /// branch is touched.
    fn update(&mut self, tape: &Tape, loss: Var, passes: Vec<Pass>, roles: &[Role]) -> Result<()> {
        let grads = tape.backward(loss)?;
        let mut plans = Vec::new();
        for p in passes.into_iter().filter(|p| roles.contains(&p.role)) {
            let g = p.binding.gradients(tape, &grads);
            if g.values().any(|t| !t.is_finite()) {
                return Err(Error::NumericOverflow { op: "gradient" });
            }
            plans.push((p.role, g, p.updates));
        }
        for (role, g, updates) in plans {
            let i = self.branches.iter().position(|b| b.role == role).expect("bound branch");
            let lr = self.lr(&self.branches[i]);
            let b = &mut self.branches[i];
            b.optim.step(&mut b.store, &g, lr)?;
            apply_updates(&mut b.store, updates)?;
            if let Some(ema) = &mut b.ema {
                ema.update(&b.store, b.optim.step)?;
            }
        }
        Ok(())
    }

    /// vpl and independent modes: one backward over the summed objective,
    /// then one update per branch.
    fn joint_step(&mut self, batch: &Batch, active: StageLosses) -> Result<LossReport> {
        let mut tape = Tape::new();
        let roles: Vec<Role> = self.branches.iter().map(|b| b.role).collect();
        let passes = self.forward(&mut tape, &batch.images, &roles)?;
        let out = |r: Role| passes.iter().find(|p| p.role == r).map(|p| p.out.clone());
        let (loss, report) = match (out(Role::Cnn), out(Role::Trans)) {
            (Some(c), Some(t)) => vpl_objective(&mut tape, &c, &t, &batch.one_hot, &self.config.plm, active)?,
            (Some(c), None) => {
                let ce = cross_entropy(&mut tape, c.logits, &batch.one_hot)?;
                let v = scalar(&tape, ce);
                (ce, LossReport { ce_cnn: Some(v), total: v, ..Default::default() })
            }
            (None, Some(t)) => {
                let ce = cross_entropy(&mut tape, t.logits, &batch.one_hot)?;
                let v = scalar(&tape, ce);
                (ce, LossReport { ce_trans: Some(v), total: v, ..Default::default() })
            }
            (None, None) => return Err(Error::contract("no enabled branch")),
        };
        if !report.total.is_finite() {
            return Ok(report);
        }
        self.update(&tape, loss, passes, &roles)?;
        self.optimizer_steps += 1;
        Ok(report)
    }

    /// The student minimizes its cross-entropy plus the weighted pair loss
    /// that routes into its role; the teacher is a constant.
    fn distill_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let d = self.config.distill.clone().expect("validated");
        let student = d.teacher_role.other();
        let mut tape = Tape::new();
        let passes = self.forward(&mut tape, &batch.images, &[student])?;
        let out = |r: Role| passes.iter().find(|p| p.role == r).map(|p| p.out.clone()).expect("both branches");
        let (s, t) = (out(student), out(d.teacher_role));
        let ce = cross_entropy(&mut tape, s.logits, &batch.one_hot)?;
        let term = match student {
            Role::Cnn => kl_loss(&mut tape, t.logits, s.logits, self.config.plm.rho)?,
            Role::Trans => contrastive_loss(&mut tape, t.embedding, s.embedding, self.config.plm.tau)?,
        };
        let weighted = tape.scale(term, d.weight)?;
        let total = tape.add(ce, weighted)?;
        let (ce_v, term_v) = (scalar(&tape, ce), scalar(&tape, term));
        let mut report = LossReport {
            total: scalar(&tape, total),
            ..Default::default()
        };
        match student {
            Role::Cnn => {
                report.ce_cnn = Some(ce_v);
                report.kl = Some(term_v);
            }
            Role::Trans => {
                report.ce_trans = Some(ce_v);
                report.cl = Some(term_v);
            }
        }
        self.update(&tape, total, passes, &[student])?;
        self.optimizer_steps += 1;
        Ok(report)
    }

    /// Two sub-steps: the first branch learns from the second's detached
    /// distribution, then both are re-run and the second learns from the
    /// updated first. The reported KL and total are sums over sub-steps.
    fn dml_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let mut report = LossReport::default();
        let mut kl_sum = 0.0;
        for role in Role::BOTH {
            let mut tape = Tape::new();
            let passes = self.forward(&mut tape, &batch.images, &[role])?;
            let out = |r: Role| passes.iter().find(|p| p.role == r).map(|p| p.out.clone()).expect("both branches");
            let (me, peer) = (out(role), out(role.other()));
            let ce = cross_entropy(&mut tape, me.logits, &batch.one_hot)?;
            let target = tape.detach(peer.logits);
            let kl = kl_loss(&mut tape, target, me.logits, self.config.plm.rho)?;
            let total = tape.add(ce, kl)?;
            match role {
                Role::Cnn => report.ce_cnn = Some(scalar(&tape, ce)),
                Role::Trans => report.ce_trans = Some(scalar(&tape, ce)),
            }
            kl_sum += scalar(&tape, kl);
            report.total += scalar(&tape, total);
            self.update(&tape, total, passes, &[role])?;
            self.optimizer_steps += 1;
        }
        report.kl = Some(kl_sum);
        Ok(report)
    }

    /// Run the remaining epochs, appending each row to `out/metrics.csv`
    /// and `out/timing.csv` and saving `out/checkpoint.bin` after every
    /// epoch. With `resume`, existing CSV files in `out` are appended to.
    pub fn run_to_dir(&mut self, out: &Path, resume: bool) -> Result<Vec<MetricsRow>> {
        let mut writer = MetricsWriter::open(out, &self.config_text, resume)?;
        let mut rows = Vec::new();
        while !self.is_finished() {
            let row = self.run_epoch()?;
            writer.write(&row)?;
            self.checkpoint().save(&out.join("checkpoint.bin"))?;
            log::info!(
                "epoch {} stage {} {} top1 cnn {} trans {}",
                row.epoch,
                row.stage,
                row.losses,
                top1(row.eval_cnn),
                top1(row.eval_trans)
            );
            rows.push(row);
        }
        Ok(rows)
    }

    /// Run the remaining epochs in memory.
    pub fn run(&mut self) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::new();
        while !self.is_finished() {
            rows.push(self.run_epoch()?);
        }
        Ok(rows)
    }
}

fn check_data(config: &RunConfig, train: &Dataset, eval: &Dataset) -> Result<()> {
    let want = config.data.input_shape();
    for (name, d) in [("train", train), ("eval", eval)] {
        if d.shape != want || d.classes != config.data.classes || d.is_empty() {
            return Err(Error::contract(format!(
                "{name} data ({} examples of {:?}, {} classes) does not match the configuration",
                d.len(),
                d.shape,
                d.classes
            )));
        }
    }
    Ok(())
}

/// Evaluation weights of the `role` branch of a saved run, checked against
/// the branch this run will build in that role.
fn load_teacher(path: &Path, role: Role, branch: &Branch) -> Result<ParamStore> {
    let ckpt = Checkpoint::load(path)?;
    let snap = ckpt.branch(role).ok_or_else(|| {
        Error::Checkpoint(format!("{}: no `{role}` branch to use as teacher", path.display()))
    })?;
    let store = snap.eval_store()?;
    let fresh = branch.build_store(&mut stream(0, &[]))?;
    if !fresh.same_layout(&store) {
        return Err(Error::Checkpoint(format!(
            "{}: `{role}` parameters are incompatible with the configured {} backbone",
            path.display(),
            branch.spec.kind
        )));
    }
    Ok(store)
}
fn top1(acc: Option<Accuracy>) -> String {
    acc.map_or_else(|| "-".into(), |a| format!("{:.4}", a.top1))
}

