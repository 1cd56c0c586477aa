//! Training loop: seeded batch planning with pseudo-anomalies, AdamW with a
//! step schedule, JSON-lines logging, checkpoint resume and the ablation harness.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::config::{lr_at_epoch, Config, PatchSourcing, Toggles};
use crate::dataio::{synthesize_pseudo_anomaly, CorpusIndex, ImageSample, PseudoAnomalySpec};
use crate::decoder::DropoutCtx;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::losses::LossBreakdown;
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{DiffusionDraw, PromptMad, TrainBatch};
use crate::rng::{SeedTree, DATA_ORDER, DIFFUSION, DROPOUT, PSEUDO_ANOMALY};
use crate::segmentor::COARSE;

/// AdamW with decoupled weight decay: `p ← p − lr·wd·p − lr·m̂/(√v̂ + ε)`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &BTreeMap<String, Var>, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, var) in params {
            let p = var.as_tensor();
            let g = match grads.get(p) {
                // gradients keep the forward graph alive unless detached
                Some(g) => g.detach(),
                None => p.zeros_like()?,
            };
            let m_prev = match self.m.get(name) {
                Some(m) => m.clone(),
                None => p.zeros_like()?,
            };
            let v_prev = match self.v.get(name) {
                Some(v) => v.clone(),
                None => p.zeros_like()?,
            };
            let m = ((m_prev * b1)? + (&g * (1.0 - b1))?)?;
            let v = ((v_prev * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            let decayed = (p.detach() * (1.0 - lr * self.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }
}

/// Pseudo-anomaly decision for one item.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoPlan {
    pub seed: u64,
    /// Train index of the patch donor, when pasting from another sample.
    pub donor: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ItemPlan {
    pub index: usize,
    pub pseudo: Option<PseudoPlan>,
}

/// Everything random about one batch, fixed before the model sees it.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPlan {
    pub items: Vec<ItemPlan>,
    pub t: Vec<usize>,
    /// `B · 28 · 28` standard normals.
    pub eps: Vec<f32>,
}

/// Running digests of the draws taken from each named stream.
#[derive(Debug, Clone, Default)]
pub struct StreamAudit {
    hashers: BTreeMap<&'static str, Sha256>,
}

impl StreamAudit {
    fn feed(&mut self, stream: &'static str, bytes: &[u8]) {
        self.hashers.entry(stream).or_default().update(bytes);
    }

    pub fn digests(&self) -> BTreeMap<String, String> {
        self.hashers
            .iter()
            .map(|(k, h)| (k.to_string(), h.clone().finalize().iter().map(|b| format!("{b:02x}")).collect()))
            .collect()
    }
}

/// Plans one epoch over `n_train` samples. Each stream is keyed by epoch and
/// position, and every draw is taken whether or not it ends up used, so a
/// toggle never shifts another stream.
pub fn plan_epoch(cfg: &Config, n_train: usize, epoch: usize, audit: &mut StreamAudit) -> Vec<BatchPlan> {
    let seeds = SeedTree::new(cfg.train.seed);
    let e = epoch as u64;
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut seeds.stream(DATA_ORDER, &[e]));
    for &i in &order {
        audit.feed(DATA_ORDER, &(i as u64).to_le_bytes());
    }
    let pa = &cfg.train.pseudo_anomaly;
    let steps = cfg.segmentor.diffusion_steps;
    order
        .chunks(cfg.train.batch_size)
        .enumerate()
        .map(|(bi, chunk)| {
            let items = chunk
                .iter()
                .map(|&index| {
                    let mut rng = seeds.stream(PSEUDO_ANOMALY, &[e, index as u64]);
                    let pick = rng.random::<f64>() < cfg.train.pseudo_anomaly_ratio;
                    let seed: u64 = rng.random();
                    let coin = rng.random_bool(0.5);
                    let donor_draw = rng.random_range(0..n_train.max(2) - 1);
                    let other = match pa.patch_source {
                        PatchSourcing::SelfImage => false,
                        PatchSourcing::OtherSample => true,
                        PatchSourcing::Mixed => coin,
                    };
                    let donor = (other && n_train > 1).then(|| if donor_draw >= index { donor_draw + 1 } else { donor_draw });
                    let pseudo = pick.then_some(PseudoPlan { seed, donor });
                    audit.feed(PSEUDO_ANOMALY, &[pick as u8]);
                    audit.feed(PSEUDO_ANOMALY, &seed.to_le_bytes());
                    audit.feed(PSEUDO_ANOMALY, &(donor.map_or(u64::MAX, |d| d as u64)).to_le_bytes());
                    ItemPlan { index, pseudo }
                })
                .collect::<Vec<_>>();
            let mut rng = seeds.stream(DIFFUSION, &[e, bi as u64, 0]);
            let t: Vec<usize> = items.iter().map(|_| rng.random_range(0..steps)).collect();
            let eps: Vec<f32> = (0..items.len() * COARSE * COARSE).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            for &x in &t {
                audit.feed(DIFFUSION, &(x as u64).to_le_bytes());
            }
            for x in &eps {
                audit.feed(DIFFUSION, &x.to_le_bytes());
            }
            BatchPlan { items, t, eps }
        })
        .collect()
}

/// Builds the batch a plan describes; pseudo-anomalies are synthesized in parallel.
pub fn materialize(plan: &BatchPlan, train: &[Arc<ImageSample>], cfg: &Config, exec: Execution) -> Result<TrainBatch> {
    let pa = &cfg.train.pseudo_anomaly;
    let inputs = exec.try_map(&plan.items, |it| -> Result<ImageSample> {
        let clean = &train[it.index];
        match it.pseudo {
            None => Ok((**clean).clone()),
            Some(p) => {
                let mut spec = PseudoAnomalySpec::new(pa.min_area_fraction, pa.max_area_fraction, pa.source(p.donor.is_some()), p.seed);
                spec.rotate = pa.rotate;
                let donor = p.donor.map(|d| train[d].as_ref());
                Ok(synthesize_pseudo_anomaly(clean, &spec, donor)?.0)
            }
        }
    })?;
    let clean = plan.items.iter().map(|it| (*train[it.index]).clone()).collect();
    let eps = Tensor::from_vec(plan.eps.clone(), (plan.items.len(), 1, COARSE, COARSE), &Device::Cpu)?;
    Ok(TrainBatch { inputs, clean, diffusion: Some(DiffusionDraw { t: plan.t.clone(), eps }) })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub mse: f64,
    pub dice: f64,
    pub focal: f64,
    pub diffusion: f64,
}

pub struct Trainer {
    model: PromptMad,
    opt: AdamW,
    epoch: usize,
    fingerprint: String,
    train: Vec<Arc<ImageSample>>,
    exec: Execution,
    audit: StreamAudit,
}

impl Trainer {
    pub fn new(cfg: &Config, corpus: &CorpusIndex, exec: Execution) -> Result<Self> {
        let train = corpus.train();
        if train.is_empty() {
            return Err(Error::EmptyTrainSplit);
        }
        Ok(Self {
            model: PromptMad::for_corpus(cfg, corpus, DType::F32)?,
            opt: AdamW::new(cfg.train.weight_decay),
            epoch: 0,
            fingerprint: corpus.fingerprint(),
            train,
            exec,
            audit: StreamAudit::default(),
        })
    }

    /// Continues from a checkpoint; `epochs` replaces the stored target epoch count.
    pub fn resume(ck: &Checkpoint, corpus: &CorpusIndex, epochs: Option<usize>, exec: Execution) -> Result<Self> {
        let fp = corpus.fingerprint();
        if fp != ck.fingerprint {
            return Err(Error::FingerprintMismatch { expected: ck.fingerprint.clone(), found: fp });
        }
        let mut ck = ck.clone();
        if let Some(e) = epochs {
            ck.config.train.epochs = e;
        }
        let model = ck.to_model()?;
        let mut opt = AdamW::new(ck.config.train.weight_decay);
        opt.t = ck.step;
        opt.m = ck.adam_m.clone();
        opt.v = ck.adam_v.clone();
        Ok(Self { model, opt, epoch: ck.epoch, fingerprint: fp, train: corpus.train(), exec, audit: StreamAudit::default() })
    }

    pub fn model(&self) -> &PromptMad {
        &self.model
    }

    pub fn into_model(self) -> PromptMad {
        self.model
    }

    pub fn config(&self) -> &Config {
        self.model.config()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn audit(&self) -> &StreamAudit {
        &self.audit
    }

    /// One optimizer step on a prepared batch.
    pub fn step_on(&mut self, batch: &TrainBatch, lr: f64, dropout: Option<DropoutCtx>) -> Result<LossBreakdown> {
        let loss = self.model.training_loss(batch, dropout)?;
        let value = loss.total_value()?;
        if !value.is_finite() {
            let ids: Vec<&str> = batch.inputs.iter().map(|s| s.id.as_str()).collect();
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                batch: self.opt.steps() as usize,
                detail: format!("total {value}, samples [{}]", ids.join(", ")),
            });
        }
        let grads = loss.total.backward()?;
        self.opt.step(self.model.store().params(), &grads, lr)?;
        Ok(loss)
    }

    /// Runs the next epoch, calling `on_step` after every optimizer step.
    pub fn run_epoch(&mut self, on_step: &mut dyn FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        let cfg = self.model.config().clone();
        let lr = lr_at_epoch(&cfg.train, self.epoch);
        let plans = plan_epoch(&cfg, self.train.len(), self.epoch, &mut self.audit);
        let seeds = SeedTree::new(cfg.train.seed);
        for (bi, plan) in plans.iter().enumerate() {
            let batch = materialize(plan, &self.train, &cfg, self.exec)?;
            let dropout = (cfg.decoder.dropout > 0.0).then(|| DropoutCtx {
                p: cfg.decoder.dropout,
                seeds: SeedTree::new(seeds.seed_u64(DROPOUT, &[self.epoch as u64, bi as u64])),
            });
            let loss = self.step_on(&batch, lr, dropout).map_err(|e| match e {
                Error::NonFiniteLoss { epoch, detail, .. } => Error::NonFiniteLoss { epoch, batch: bi, detail },
                other => other,
            })?;
            on_step(&StepRecord {
                epoch: self.epoch,
                batch: bi,
                step: self.opt.steps(),
                lr,
                total: loss.total_value()?,
                mse: loss.mse,
                dice: loss.dice,
                focal: loss.focal,
                diffusion: loss.diffusion,
            })?;
        }
        self.epoch += 1;
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let snap = |m: &BTreeMap<String, Var>| -> Result<BTreeMap<String, Tensor>> {
            m.iter().map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?))).collect()
        };
        Ok(Checkpoint {
            config: self.model.config().clone(),
            fingerprint: self.fingerprint.clone(),
            backbone_digest: self.model.backbone().digest()?,
            epoch: self.epoch,
            step: self.opt.steps(),
            prompts: self.model.prompts().clone(),
            params: snap(self.model.store().params())?,
            buffers: snap(self.model.store().buffers())?,
            adam_m: self.opt.m.clone(),
            adam_v: self.opt.v.clone(),
        })
    }
}

/// Result of a training run.
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
    pub streams: BTreeMap<String, String>,
    pub frozen_before: String,
    pub frozen_after: String,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.pmad";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Trains until the configured epoch count. With `out_dir`, the log is
/// streamed to `train_log.jsonl` and the checkpoint written at the end.
pub fn run_training(mut trainer: Trainer, out_dir: Option<&Path>) -> Result<TrainRun> {
    let frozen_before = trainer.model().frozen_digest()?;
    let mut log_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let p = d.join(LOG_FILE);
            let f = std::fs::OpenOptions::new().create(true).append(true).open(&p).map_err(|e| Error::io(&p, e))?;
            Some((p, std::io::BufWriter::new(f)))
        }
        None => None,
    };
    let mut log = Vec::new();
    let epochs = trainer.config().train.epochs;
    while trainer.epoch() < epochs {
        let mut sink = |r: &StepRecord| -> Result<()> {
            if let Some((p, f)) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(p.as_path(), e))?;
            }
            log.push(r.clone());
            Ok(())
        };
        trainer.run_epoch(&mut sink)?;
        let last = log.last().map(|r| r.total).unwrap_or(f64::NAN);
        log::info!("epoch {}/{epochs}: loss {last:.5}", trainer.epoch());
    }
    if let Some((p, f)) = log_file.as_mut() {
        f.flush().map_err(|e| Error::io(p.as_path(), e))?;
    }
    let checkpoint = trainer.checkpoint()?;
    if let Some(d) = out_dir {
        checkpoint.save(&d.join(CHECKPOINT_FILE))?;
    }
    Ok(TrainRun {
        frozen_after: trainer.model().frozen_digest()?,
        frozen_before,
        streams: trainer.audit().digests(),
        log,
        checkpoint,
    })
}

pub fn train(cfg: &Config, corpus: &CorpusIndex, exec: Execution, out_dir: Option<&Path>) -> Result<TrainRun> {
    run_training(Trainer::new(cfg, corpus, exec)?, out_dir)
}

/// The six configurations of the ablation table, in column order.
pub const ABLATIONS: [(&str, Toggles); 6] = [
    ("Baseline", Toggles { use_vlm: false, use_focal: false, use_segmentor: false }),
    ("Only segmentor", Toggles { use_vlm: false, use_focal: false, use_segmentor: true }),
    ("Only VLM", Toggles { use_vlm: true, use_focal: false, use_segmentor: false }),
    ("VLM + segmentor (no Focal)", Toggles { use_vlm: true, use_focal: false, use_segmentor: true }),
    ("Only Focal", Toggles { use_vlm: false, use_focal: true, use_segmentor: false }),
    ("PromptMAD", Toggles { use_vlm: true, use_focal: true, use_segmentor: true }),
];

pub fn ablation_configs(base: &Config) -> Vec<(String, Config)> {
    ABLATIONS
        .iter()
        .map(|(name, t)| {
            let mut c = base.clone();
            c.train.toggles = *t;
            (name.to_string(), c)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub toggles: Toggles,
    pub config_hash: String,
    pub report: MetricsReport,
    pub steps: usize,
    /// True when the logged focal term was exactly 0 on every step.
    pub focal_always_zero: bool,
    pub streams: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Pixel AP per class with one column per configuration, then the mean of every metric.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Class |");
        for r in &self.rows {
            s.push_str(&format!(" {} |", r.name));
        }
        s.push_str(&format!("\n|---|{}\n", "---|".repeat(self.rows.len())));
        let classes: Vec<String> = self.rows.first().map(|r| r.report.per_class.keys().cloned().collect()).unwrap_or_default();
        for c in &classes {
            s.push_str(&format!("| {c} |"));
            for r in &self.rows {
                match r.report.per_class.get(c) {
                    Some(m) => s.push_str(&format!(" {:.2} |", 100.0 * m.p_ap)),
                    None => s.push_str(" n/a |"),
                }
            }
            s.push('\n');
        }
        s.push_str("| Mean |");
        for r in &self.rows {
            s.push_str(&format!(" {:.2} |", 100.0 * r.report.mean.p_ap));
        }
        s.push_str("\n\n| Configuration | use_vlm | use_segmentor | use_focal | AUC | AP | P-AUC | P-AP |\n|---|---|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let m = &r.report.mean;
            s.push_str(&format!(
                "| {} | {} | {} | {} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
                r.name,
                r.toggles.use_vlm,
                r.toggles.use_segmentor,
                r.toggles.use_focal,
                100.0 * m.i_auc,
                100.0 * m.i_ap,
                100.0 * m.p_auc,
                100.0 * m.p_ap
            ));
        }
        s
    }
}

/// Trains and evaluates every ablation configuration. With `out_dir`, each run
/// gets its own subdirectory.
pub fn run_ablation(base: &Config, corpus: &CorpusIndex, exec: Execution, out_dir: Option<&Path>) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for (name, cfg) in ablation_configs(base) {
        log::info!("ablation: {name}");
        let dir = out_dir.map(|d| d.join(slug(&name)));
        let run = train(&cfg, corpus, exec, dir.as_deref())?;
        let model = run.checkpoint.to_model()?;
        let report = evaluate(&model, corpus, &cfg.eval, exec)?;
        rows.push(AblationRow {
            toggles: cfg.train.toggles,
            config_hash: cfg.hash(),
            report,
            steps: run.log.len(),
            focal_always_zero: run.log.iter().all(|r| r.focal == 0.0),
            streams: run.streams,
            name,
        });
    }
    Ok(AblationReport { rows })
}

/// File-system friendly configuration name.
pub fn slug(name: &str) -> String {
    let s: String = name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect();
    s.split('_').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("_")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_config, tiny_corpus};
    use crate::nn::{to_f64_vec, ParamStore};

    fn quick_config(epochs: usize) -> Config {
        let mut c = tiny_config();
        c.train.epochs = epochs;
        c.train.lr = 1e-3;
        c
    }

    #[test]
    fn decoupled_decay_shrinks_disconnected_parameters() -> Result<()> {
        let mut store = ParamStore::new(0, DType::F64);
        let used = store.constant("used", &[3], 1.0)?;
        let _free = store.constant("free", &[3], 2.0)?;
        let mut opt = AdamW::new(0.5);
        let grads = used.as_tensor().sqr()?.sum_all()?.backward()?;
        opt.step(store.params(), &grads, 0.1)?;
        assert_eq!(to_f64_vec(store.params()["free"].as_tensor())?, vec![2.0 * (1.0 - 0.1 * 0.5); 3]);
        // first Adam step moves by lr·sign(g) before decay
        let u = to_f64_vec(used.as_tensor())?;
        assert!(u.iter().all(|&v| (v - (0.95 - 0.1)).abs() < 1e-6));
        Ok(())
    }

    #[test]
    fn plans_are_seeded_and_toggle_independent() {
        let cfg = quick_config(1);
        let (mut a, mut b) = (StreamAudit::default(), StreamAudit::default());
        let p1 = plan_epoch(&cfg, 10, 3, &mut a);
        let mut other = cfg.clone();
        other.train.toggles = Toggles { use_vlm: false, use_focal: false, use_segmentor: false };
        let p2 = plan_epoch(&other, 10, 3, &mut b);
        assert_eq!(p1, p2);
        assert_eq!(a.digests(), b.digests());
        let mut all: Vec<usize> = p1.iter().flat_map(|b| b.items.iter().map(|i| i.index)).collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let p3 = plan_epoch(&cfg, 10, 4, &mut StreamAudit::default());
        assert_ne!(p1, p3);
    }

    #[test]
    fn training_writes_loadable_deterministic_checkpoints() -> Result<()> {
        let corpus = tiny_corpus();
        let cfg = quick_config(1);
        let dir = tempfile::tempdir().unwrap();
        let run = train(&cfg, &corpus, Execution::default(), Some(dir.path()))?;
        assert_eq!(run.frozen_before, run.frozen_after);
        let bytes = std::fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap();
        let again = train(&cfg, &corpus, Execution::Sequential, None)?;
        assert_eq!(bytes, again.checkpoint.to_bytes()?);
        let ck = crate::checkpoint::load_checkpoint(&dir.path().join(CHECKPOINT_FILE), Some(&corpus.fingerprint()))?;
        assert_eq!(ck.to_bytes()?, bytes);
        let lines = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        assert_eq!(lines.lines().count(), run.log.len());
        let rec: StepRecord = serde_json::from_str(lines.lines().next().unwrap())?;
        assert_eq!(rec, run.log[0]);
        Ok(())
    }

    #[test]
    fn resume_matches_uninterrupted_run() -> Result<()> {
        let corpus = tiny_corpus();
        let one = train(&quick_config(1), &corpus, Execution::default(), None)?;
        let resumed = run_training(Trainer::resume(&one.checkpoint, &corpus, Some(2), Execution::default())?, None)?;
        let two = train(&quick_config(2), &corpus, Execution::default(), None)?;
        assert_eq!(resumed.checkpoint.to_bytes()?, two.checkpoint.to_bytes()?);
        Ok(())
    }

    #[test]
    fn checkpoint_errors() -> Result<()> {
        let corpus = tiny_corpus();
        let run = train(&quick_config(1), &corpus, Execution::default(), None)?;
        let bytes = run.checkpoint.to_bytes()?;
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 10]), Err(Error::CorruptCheckpoint(_))));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        let body = v2.len() - 32;
        let d = Sha256::digest(&v2[..body]);
        v2[body..].copy_from_slice(&d);
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::VersionMismatch { found: 2, expected: 1 })));
        let other = crate::dataio::generate_synthetic_corpus(2, 2, 2, 99, Execution::default())?;
        assert!(matches!(Trainer::resume(&run.checkpoint, &other, None, Execution::default()), Err(Error::FingerprintMismatch { .. })));
        Ok(())
    }

    #[test]
    fn empty_train_split_is_rejected() -> Result<()> {
        let c = tiny_corpus();
        let tests: Vec<ImageSample> = c.test().iter().map(|s| (**s).clone()).collect();
        let only_test = CorpusIndex::new(tests)?;
        assert!(matches!(Trainer::new(&tiny_config(), &only_test, Execution::default()), Err(Error::EmptyTrainSplit)));
        Ok(())
    }

    #[test]
    fn ablation_table_has_six_columns() {
        let names: Vec<String> = ablation_configs(&Config::default()).into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), 6);
        assert_eq!(names[0], "Baseline");
        assert_eq!(ABLATIONS[0].1, Toggles { use_vlm: false, use_focal: false, use_segmentor: false });
        assert_eq!(slug("VLM + segmentor (no Focal)"), "vlm_segmentor_no_focal");
    }
}
