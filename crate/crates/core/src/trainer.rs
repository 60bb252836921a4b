//! Mean-teacher training loop.
//!
//! Each iteration draws a labeled batch (Dice + CE against the mask) and an
//! unlabeled batch. The unlabeled volumes are cropped once and seen through
//! two independent orientations; the teacher view also gets Gaussian noise.
//! Teacher outputs are mapped back into the student frame before the
//! consistency and contrastive terms are evaluated. Only the student is
//! optimized; the teacher follows it by EMA.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fecl::{
    normalize_rows, normalize_rows_backward, patch_gambling_entropy, patch_labels, FeclParams, FeclPlan,
    PatchLayout,
};
use crate::fields::{EmbeddingSource, LabelField, PatchEmbeddings, ProbabilityField, VolumeBatch};
use crate::metrics::{score, Scores};
use crate::segnet::{
    backward, ema_update, forward, forward_f64, save_checkpoint, sgd_step, NetConfig, OptimState, ParamSet,
};
use crate::supervised::supervised_loss;
use crate::synthvol::{sample_crop_origin, Dataset, Orientation, Role, Transform};
use crate::uncl::{uncl, BetaMode, BetaSchedule, EntropyMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    /// Epochs `T`; β is scheduled over them.
    pub epochs: usize,
    /// Defaults to `ceil(training volumes / batch_size)`.
    pub iters_per_epoch: Option<usize>,
    pub batch_size: usize,
    /// Defaults to half the batch.
    pub labeled_per_batch: Option<usize>,
    /// Cubic training crop side.
    pub crop: usize,
    /// Re-draw the labeled subset at this ratio instead of using the
    /// manifest's flags.
    pub labeled_ratio: Option<f64>,
    pub eta: f64,
    pub beta_mode: BetaMode,
    pub beta_max: f64,
    pub beta_min: f64,
    pub beta_decay: f64,
    pub entropy_mode: EntropyMode,
    pub tau: f64,
    pub gamma: f64,
    /// Hard negatives per anchor, `K`.
    pub top_k: usize,
    /// Patches per axis, `k`.
    pub patch_k: usize,
    pub patch_threshold: f64,
    pub features: usize,
    pub embed_dim: usize,
    pub gambling_temperature: f64,
    /// Divide patch entropies by `ln C` before they enter the focal weight.
    pub normalized_entropy: bool,
    pub use_uncl: bool,
    pub use_fecl: bool,
    pub ema_alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub teacher_noise: f64,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("data/manifest.json"),
            output_dir: PathBuf::from("runs/default"),
            epochs: 20,
            iters_per_epoch: None,
            batch_size: 4,
            labeled_per_batch: None,
            crop: 16,
            labeled_ratio: None,
            eta: 1.0,
            beta_mode: BetaMode::Adaptive,
            beta_max: 1.0,
            beta_min: 0.1,
            beta_decay: 0.1,
            entropy_mode: EntropyMode::Dual,
            tau: 0.6,
            gamma: 0.5,
            top_k: 16,
            patch_k: 4,
            patch_threshold: 0.5,
            features: 8,
            embed_dim: 16,
            gambling_temperature: 1.0,
            normalized_entropy: true,
            use_uncl: true,
            use_fecl: false,
            ema_alpha: 0.99,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            teacher_noise: 0.1,
            seed: 0,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn schedule(&self) -> BetaSchedule {
        BetaSchedule {
            beta_max: self.beta_max,
            beta_min: self.beta_min,
            decay: self.beta_decay,
            total_epochs: self.epochs,
            mode: self.beta_mode,
        }
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            features: self.features,
            embed_dim: self.embed_dim,
            classes: 2,
        }
    }

    pub fn fecl_params(&self) -> FeclParams {
        FeclParams {
            tau: self.tau,
            gamma: self.gamma,
            top_k: self.top_k,
        }
    }

    pub fn labeled_batch(&self) -> usize {
        self.labeled_per_batch.unwrap_or(self.batch_size.div_ceil(2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(cfg_err("epochs must be at least 1"));
        }
        if self.iters_per_epoch == Some(0) {
            return Err(cfg_err("iters_per_epoch must be at least 1"));
        }
        if self.batch_size == 0 || self.labeled_batch() == 0 || self.labeled_batch() > self.batch_size {
            return Err(cfg_err("need 1 <= labeled_per_batch <= batch_size"));
        }
        if self.crop < 3 {
            return Err(cfg_err("crop must be at least 3"));
        }
        if let Some(r) = self.labeled_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(cfg_err("labeled_ratio must lie in (0, 1)"));
            }
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.eta) {
            return Err(cfg_err("eta must be finite and >= 0"));
        }
        self.schedule().validate()?;
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(cfg_err("tau must be positive"));
        }
        if !finite_nonneg(self.gamma) {
            return Err(cfg_err("gamma must be >= 0"));
        }
        if self.patch_k == 0 || self.patch_k > self.crop {
            return Err(cfg_err("patch_k must lie in 1..=crop"));
        }
        if !(0.0..=1.0).contains(&self.patch_threshold) {
            return Err(cfg_err("patch_threshold must lie in [0, 1]"));
        }
        if self.features == 0 || self.embed_dim == 0 {
            return Err(cfg_err("features and embed_dim must be positive"));
        }
        if !(self.gambling_temperature > 0.0 && self.gambling_temperature.is_finite()) {
            return Err(cfg_err("gambling_temperature must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(cfg_err("ema_alpha must lie in [0, 1]"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(cfg_err("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(cfg_err("momentum must lie in [0, 1)"));
        }
        if !finite_nonneg(self.weight_decay) || !finite_nonneg(self.teacher_noise) {
            return Err(cfg_err("weight_decay and teacher_noise must be >= 0"));
        }
        Ok(())
    }

    fn unlabeled_active(&self) -> bool {
        self.eta > 0.0 && (self.use_uncl || self.use_fecl)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub sup: f64,
    pub uncl: f64,
    pub fecl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub beta: f64,
    pub l_sup: f64,
    pub l_uncl: f64,
    pub l_fecl: f64,
    pub l_total: f64,
    pub val_dice: f64,
    pub val_iou: f64,
    pub val_hd95: f64,
    pub val_asd: f64,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,beta,l_sup,l_uncl,l_fecl,l_total,val_dice,val_iou,val_hd95,val_asd";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.beta,
            self.l_sup,
            self.l_uncl,
            self.l_fecl,
            self.l_total,
            self.val_dice,
            self.val_iou,
            self.val_hd95,
            self.val_asd
        )
    }
}

pub fn epoch_log_csv(rows: &[EpochLog]) -> String {
    let mut s = String::from(EPOCH_LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub final_scores: Scores,
    pub student: ParamSet,
    pub teacher: ParamSet,
}

pub const EPOCH_LOG_FILE: &str = "epoch_log.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

fn mean_scores(rows: &[Scores]) -> Scores {
    Scores::mean(rows).unwrap_or(Scores {
        dice: f64::NAN,
        iou: f64::NAN,
        hd95: f64::NAN,
        asd: f64::NAN,
        collapsed: false,
    })
}

/// Training state with step-level access.
pub struct Trainer {
    pub config: RunConfig,
    pub data: Dataset,
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub val: Vec<usize>,
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub opt: OptimState,
    labeled_rng: ChaCha8Rng,
    unlabeled_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let data = Dataset::load(&config.manifest)?;
        Self::with_dataset(config, data)
    }

    pub fn with_dataset(config: RunConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        let crop = [config.crop; 3];
        if let Some(i) = data.images.iter().position(|x| (0..3).any(|a| x.spatial()[a] < crop[a])) {
            return Err(cfg_err(format!(
                "crop {} exceeds volume {} of shape {:?}",
                config.crop,
                data.manifest.volumes[i].id,
                data.images[i].spatial()
            )));
        }
        let val = data.indices(Role::Val);
        let (labeled, unlabeled) = match config.labeled_ratio {
            None => (data.indices(Role::Labeled), data.indices(Role::Unlabeled)),
            Some(r) => {
                let mut train: Vec<usize> = (0..data.images.len()).filter(|i| !val.contains(i)).collect();
                let n = ((r * data.images.len() as f64).round() as usize).clamp(1, train.len());
                train.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
                let mut l = train[..n].to_vec();
                let mut u = train[n..].to_vec();
                l.sort_unstable();
                u.sort_unstable();
                (l, u)
            }
        };
        if labeled.is_empty() {
            return Err(cfg_err("dataset has no labeled volumes"));
        }
        let net = config.net();
        let student = ParamSet::init(net, config.seed);
        let teacher = student.clone();
        let opt = OptimState::new(net, config.lr, config.momentum, config.weight_decay);
        let mut labeled_rng = ChaCha8Rng::seed_from_u64(config.seed);
        labeled_rng.set_stream(1);
        let mut unlabeled_rng = ChaCha8Rng::seed_from_u64(config.seed);
        unlabeled_rng.set_stream(2);
        Ok(Self {
            config,
            data,
            labeled,
            unlabeled,
            val,
            student,
            teacher,
            opt,
            labeled_rng,
            unlabeled_rng,
        })
    }

    pub fn iters_per_epoch(&self) -> usize {
        self.config.iters_per_epoch.unwrap_or_else(|| {
            let n = self.labeled.len() + self.unlabeled.len();
            n.div_ceil(self.config.batch_size).max(1)
        })
    }

    fn labeled_batch(&mut self) -> Result<(VolumeBatch, LabelField)> {
        let crop = [self.config.crop; 3];
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..self.config.labeled_batch() {
            let i = self.labeled[self.labeled_rng.gen_range(0..self.labeled.len())];
            let t = Transform::sample(&mut self.labeled_rng, self.data.images[i].spatial(), crop)?;
            xs.push(t.apply_volume(&self.data.images[i])?);
            ys.push(t.apply_labels(&self.data.masks[i])?);
        }
        Ok((VolumeBatch::stack(&xs)?, LabelField::stack(&ys)?))
    }

    /// Loss terms and student gradients for one iteration at the given β.
    pub fn gradients(&mut self, beta: f64) -> Result<(StepLosses, ParamSet)> {
        let (x, y) = self.labeled_batch()?;
        let fwd = forward(&self.student, &x, false)?;
        let sup = supervised_loss(&fwd.probs, &y)?;
        let mut grads = backward(&self.student, &fwd, &sup.grad_ps, None)?;
        let mut losses = StepLosses {
            sup: sup.dice_loss + sup.ce_loss,
            ..Default::default()
        };
        let n_unlabeled = self.config.batch_size - self.config.labeled_batch();
        if self.config.unlabeled_active() && !self.unlabeled.is_empty() && n_unlabeled > 0 {
            let (u, g) = self.unlabeled_gradients(beta, n_unlabeled)?;
            losses.uncl = u.uncl;
            losses.fecl = u.fecl;
            for (a, b) in grads.tensors_mut().into_iter().zip(g.tensors()) {
                for (ai, bi) in a.iter_mut().zip(b.iter()) {
                    *ai += bi;
                }
            }
        }
        losses.total = losses.sup + self.config.eta * (losses.uncl + losses.fecl);
        if !losses.total.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {}", losses.total)));
        }
        Ok((losses, grads))
    }

    fn unlabeled_gradients(&mut self, beta: f64, n: usize) -> Result<(StepLosses, ParamSet)> {
        let cfg = &self.config;
        let c = [cfg.crop; 3];
        let s = c.iter().product::<usize>();
        let classes = 2;
        let e = cfg.embed_dim;
        let mut xs = Vec::with_capacity(n * s);
        let mut xt = Vec::with_capacity(n * s);
        let mut views = Vec::with_capacity(n);
        for _ in 0..n {
            let i = self.unlabeled[self.unlabeled_rng.gen_range(0..self.unlabeled.len())];
            let img = &self.data.images[i];
            let origin = sample_crop_origin(&mut self.unlabeled_rng, img.spatial(), c)?;
            let os = Orientation::sample(&mut self.unlabeled_rng, c);
            let ot = Orientation::sample(&mut self.unlabeled_rng, c);
            let base = Transform {
                origin,
                crop: c,
                orientation: Orientation::IDENTITY,
            }
            .crop_grid(img.data(), 1, img.spatial());
            let base: Vec<f64> = base.iter().map(|&v| v as f64).collect();
            xs.extend(os.apply(&base, 1, c));
            for v in ot.apply(&base, 1, c) {
                let noise: f64 = self.unlabeled_rng.sample(StandardNormal);
                xt.push(v + cfg.teacher_noise * noise);
            }
            views.push((os, ot));
        }
        let shape = [n, 1, c[0], c[1], c[2]];
        let fs = forward_f64(&self.student, shape, &xs, cfg.use_fecl)?;
        let ft = forward_f64(&self.teacher, shape, &xt, cfg.use_fecl)?;

        // teacher outputs mapped into the student frame
        let mut pt = Vec::with_capacity(n * classes * s);
        let mut zt = Vec::with_capacity(if cfg.use_fecl { n * e * s } else { 0 });
        for (b, (os, ot)) in views.iter().enumerate() {
            let p = &ft.probs.data()[b * classes * s..(b + 1) * classes * s];
            pt.extend(os.apply(&ot.invert(p, classes, c), classes, c));
            if let Some(z) = &ft.z_grid {
                let z = &z[b * e * s..(b + 1) * e * s];
                zt.extend(os.apply(&ot.invert(z, e, c), e, c));
            }
        }
        let pt = ProbabilityField::from_raw([n, classes, c[0], c[1], c[2]], pt);

        let mut losses = StepLosses::default();
        let mut grad_p = vec![0.0; n * classes * s];
        if cfg.use_uncl {
            let r = uncl(&fs.probs, &pt, beta, cfg.entropy_mode)?;
            losses.uncl = r.loss;
            for (g, v) in grad_p.iter_mut().zip(&r.grad_ps) {
                *g = cfg.eta * v;
            }
        }
        let mut grad_z = None;
        if cfg.use_fecl {
            let layout = PatchLayout::new(c, cfg.patch_k)?;
            let zs = fs.z_grid.as_ref().expect("projection requested");
            let mut gz = vec![0.0; n * e * s];
            let pseudo = pt.argmax();
            for b in 0..n {
                let labels = patch_labels(pseudo.item(b).data(), c, cfg.patch_k, cfg.patch_threshold, classes)?;
                let means = layout.patch_means(&zs[b * e * s..(b + 1) * e * s], e)?;
                let (unit, norms) = normalize_rows(&means, e);
                let student = PatchEmbeddings::new(unit.clone(), e, labels.clone(), EmbeddingSource::Student, false)?;
                let t_means = layout.patch_means(&zt[b * e * s..(b + 1) * e * s], e)?;
                let teacher = PatchEmbeddings::new(normalize_rows(&t_means, e).0, e, labels, EmbeddingSource::Teacher, false)?;
                let h = patch_gambling_entropy(&fs.probs.item(b), &layout, cfg.gambling_temperature, cfg.normalized_entropy)?;
                let plan = FeclPlan::new(&student, &teacher, &h, &cfg.fecl_params())?;
                let (out, g_unit) = plan.loss_and_grad(&unit);
                losses.fecl += out.loss / n as f64;
                let g_means = normalize_rows_backward(&g_unit, &unit, &norms, e);
                let g_grid = layout.patch_means_backward(&g_means, e);
                for (dst, v) in gz[b * e * s..(b + 1) * e * s].iter_mut().zip(&g_grid) {
                    *dst = cfg.eta * v / n as f64;
                }
            }
            grad_z = Some(gz);
        }
        let grads = backward(&self.student, &fs, &grad_p, grad_z.as_deref())?;
        Ok((losses, grads))
    }

    /// SGD on the student only.
    pub fn optimizer_step(&mut self, grads: &ParamSet) -> Result<()> {
        sgd_step(&mut self.student, grads, &mut self.opt)
    }

    pub fn teacher_update(&mut self) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, self.config.ema_alpha)
    }

    pub fn step(&mut self, beta: f64) -> Result<StepLosses> {
        let (losses, grads) = self.gradients(beta)?;
        self.optimizer_step(&grads)?;
        self.teacher_update()?;
        Ok(losses)
    }

    /// Student scores on every validation volume, in manifest order.
    pub fn validate(&self) -> Result<Vec<Scores>> {
        self.val
            .iter()
            .map(|&i| {
                let pred = forward(&self.student, &self.data.images[i], false)?.probs.argmax();
                score(&pred, &self.data.masks[i])
            })
            .collect()
    }

    /// Full run; writes the epoch log, timings, checkpoints and the resolved
    /// config into `output_dir`.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let out = self.config.output_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        self.config.save(&out.join(RESOLVED_CONFIG_FILE))?;
        let schedule = self.config.schedule();
        let iters = self.iters_per_epoch();
        let seed = self.config.seed;
        let mut rows = Vec::with_capacity(self.config.epochs);
        let mut timing = String::from("epoch,wall_seconds\n");
        let mut best = (0usize, f64::NEG_INFINITY);
        let mut last = mean_scores(&[]);
        for epoch in 0..self.config.epochs {
            let started = Instant::now();
            let beta = schedule.beta_at(epoch)?;
            let mut acc = StepLosses::default();
            for _ in 0..iters {
                let l = match self.step(beta) {
                    Ok(l) => l,
                    Err(e @ Error::Diverged(_)) => {
                        fs::write(out.join(EPOCH_LOG_FILE), epoch_log_csv(&rows)).map_err(|err| Error::io(&out, err))?;
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                acc.sup += l.sup;
                acc.uncl += l.uncl;
                acc.fecl += l.fecl;
                acc.total += l.total;
            }
            let k = iters as f64;
            let val = self.validate()?;
            last = mean_scores(&val);
            let row = EpochLog {
                epoch,
                beta,
                l_sup: acc.sup / k,
                l_uncl: acc.uncl / k,
                l_fecl: acc.fecl / k,
                l_total: acc.total / k,
                val_dice: last.dice,
                val_iou: last.iou,
                val_hd95: last.hd95,
                val_asd: last.asd,
            };
            rows.push(row);
            save_checkpoint(&self.student, &out.join("student_last"), epoch, seed)?;
            save_checkpoint(&self.teacher, &out.join("teacher_last"), epoch, seed)?;
            if last.dice > best.1 || rows.len() == 1 {
                best = (epoch, last.dice);
                save_checkpoint(&self.student, &out.join("student_best"), epoch, seed)?;
            }
            timing.push_str(&format!("{epoch},{}\n", started.elapsed().as_secs_f64()));
        }
        let log_path = out.join(EPOCH_LOG_FILE);
        fs::write(&log_path, epoch_log_csv(&rows)).map_err(|e| Error::io(&log_path, e))?;
        let timing_path = out.join(TIMING_FILE);
        fs::write(&timing_path, timing).map_err(|e| Error::io(&timing_path, e))?;
        Ok(TrainOutcome {
            epochs: rows,
            best_epoch: best.0,
            best_val_dice: best.1,
            final_scores: last,
            student: self.student,
            teacher: self.teacher,
        })
    }
}

pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    Trainer::new(config.clone())?.run()
}
