//! AdamW, the step schedule, stratified folds, metrics and the ablation runner.

use std::fmt::Write as _;

use mmgpl_diffcore::{ParamStore, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::concepts::ConceptEmbeddings;
use crate::error::{Error, Result};
use crate::model::{Arm, ModalityShape, Model, ModelConfig, SubjectInput};
use crate::relevance::Mode;

pub const ALLOWED_BATCH: [usize; 3] = [4, 8, 16];

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub decay_epochs: Vec<usize>,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub folds: usize,
    pub repeats: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            base_lr: 1e-4,
            lr_decay: 0.2,
            decay_epochs: vec![30, 60],
            batch_size: 8,
            weight_decay: 0.01,
            folds: 5,
            repeats: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if let Some(&e) = self.decay_epochs.iter().find(|&&e| e >= self.epochs) {
            return Err(Error::Config(format!(
                "decay epoch {e} is not below train.epochs {}",
                self.epochs
            )));
        }
        if !ALLOWED_BATCH.contains(&self.batch_size) {
            return Err(Error::Config(format!(
                "train.batch_size {} not in {ALLOWED_BATCH:?}",
                self.batch_size
            )));
        }
        if !(self.base_lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("learning rate, decay and weight decay out of range".into()));
        }
        if self.folds < 2 || self.repeats == 0 {
            return Err(Error::Config("need at least 2 folds and 1 repeat".into()));
        }
        Ok(())
    }
}

/// Step schedule: the base rate divided by `1/decay` once per passed decay epoch.
///
/// Dividing by the exact reciprocal (5 for a 0.2 decay) keeps 1e-4 → 2e-5 → 4e-6
/// exact in binary floating point, where repeated multiplication by 0.2 drifts.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.decay_epochs.iter().filter(|&&e| epoch >= e).count() as i32;
    cfg.base_lr / (1.0 / cfg.lr_decay).powi(passed)
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every trainable parameter from its accumulated gradient.
    ///
    /// Decoupled decay `p ← p − lr·λ·p` is applied before the adaptive step.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let shrink = (1.0 - lr * self.weight_decay) as f32;
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let grad = p.tensor.grad().map(<[f32]>::to_vec);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.tensor.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mhat = f64::from(m[j]) / bc1;
                let vhat = f64::from(v[j]) / bc2;
                data[j] *= shrink;
                data[j] -= (lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
    }
}

/// Stratified folds: each label's indices are shuffled, then dealt round-robin.
pub fn kfold_split(labels: &[usize], folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    let n = labels.len();
    if folds < 2 || folds > n {
        return Err(Error::Config(format!("cannot split {n} subjects into {folds} folds")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = Pcg64::seed_from_u64(seed);
    let mut tests = vec![Vec::new(); folds];
    let mut next = 0;
    for c in 0..classes {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        for i in members {
            tests[next % folds].push(i);
            next += 1;
        }
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let train = (0..n).filter(|i| test.binary_search(i).is_err()).collect();
            (train, test)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub auc: f64,
    pub spe: f64,
    pub sen: f64,
    pub f1: f64,
}

impl Metrics {
    pub fn values(&self) -> [f64; 5] {
        [self.acc, self.auc, self.spe, self.sen, self.f1]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Metrics {
            acc: v[0],
            auc: v[1],
            spe: v[2],
            sen: v[3],
            f1: v[4],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub metrics: Metrics,
    /// Classes left out of a macro average, with the reason.
    pub warnings: Vec<String>,
}

/// Mann–Whitney AUC of `scores` for positives vs negatives; ties count one half.
pub fn rank_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let pos = positive.iter().filter(|&&p| p).count();
    let neg = positive.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average 1-based rank of the tie block i..=j
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| positive[order[k]]).count() as f64 * avg;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// Accuracy plus macro-averaged AUC (one-vs-rest), specificity, sensitivity and F1.
///
/// `scores` is row-major `n×classes`.
pub fn evaluate(predictions: &[usize], scores: &[f64], labels: &[usize], classes: usize) -> Result<MetricsReport> {
    let n = labels.len();
    if predictions.len() != n || scores.len() != n * classes || n == 0 {
        return Err(Error::Data(format!(
            "evaluate: {} predictions, {} scores, {n} labels, {classes} classes",
            predictions.len(),
            scores.len()
        )));
    }
    let acc = predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / n as f64;
    let mut warnings = Vec::new();
    let (mut sen, mut spe, mut f1, mut auc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for c in 0..classes {
        let positives = labels.iter().filter(|&&l| l == c).count();
        if positives == 0 {
            warnings.push(format!("class {c} absent from labels; excluded from macro averages"));
            continue;
        }
        let tp = (0..n).filter(|&i| labels[i] == c && predictions[i] == c).count() as f64;
        let fp = (0..n).filter(|&i| labels[i] != c && predictions[i] == c).count() as f64;
        let fn_ = positives as f64 - tp;
        let tn = (n - positives) as f64 - fp;
        let recall = tp / (tp + fn_);
        sen.push(recall);
        if tn + fp > 0.0 {
            spe.push(tn / (tn + fp));
        } else {
            warnings.push(format!("class {c} has no negatives; excluded from SPE"));
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        f1.push(if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        });
        let col: Vec<f64> = (0..n).map(|i| scores[i * classes + c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        match rank_auc(&col, &positive) {
            Some(a) => auc.push(a),
            None => warnings.push(format!("class {c} has no negatives; excluded from AUC")),
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(MetricsReport {
        metrics: Metrics {
            acc,
            auc: mean(&auc),
            spe: mean(&spe),
            sen: mean(&sen),
            f1: mean(&f1),
        },
        warnings,
    })
}

/// Mean and population standard deviation of each metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Metrics,
    pub std: Metrics,
}

pub fn summarize(runs: &[Metrics]) -> Summary {
    let n = runs.len().max(1) as f64;
    let mut mean = [0.0; 5];
    for r in runs {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v / n;
        }
    }
    let mut var = [0.0; 5];
    for r in runs {
        for ((s, v), m) in var.iter_mut().zip(r.values()).zip(mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    Summary {
        mean: Metrics::from_values(mean),
        std: Metrics::from_values(var.map(f64::sqrt)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
}

/// Trains `model` on `train` subjects; returns the per-epoch log.
pub fn train(
    model: &mut Model,
    data: &[SubjectInput],
    train: &[usize],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    for &i in train {
        model.check_input(&data[i])?;
        if data[i].label >= model.classes() {
            return Err(Error::Data(format!(
                "subject {} has label {} but the bank has {} classes",
                data[i].id,
                data[i].label,
                model.classes()
            )));
        }
    }
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut rng = Pcg64::seed_from_u64(seed ^ 0x7472_6169_6e5f_6f72);
    let mut order = train.to_vec();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            model.params.zero_grad();
            let scale = 1.0 / batch.len() as f32;
            for &i in batch {
                let input = &data[i];
                let grads = {
                    let mut tape = Tape::new();
                    let bound = model.params.bind(&mut tape);
                    let f = model.forward(&mut tape, &bound, input, Mode::Train { label: input.label })?;
                    let ce = tape.cross_entropy(f.logits, &[input.label])?;
                    let value = tape.scalar_value(ce)?;
                    if !value.is_finite() {
                        return Err(Error::Numeric(format!(
                            "loss is {value} at epoch {epoch} (subject {})",
                            input.id
                        )));
                    }
                    total += f64::from(value);
                    let loss = tape.scale(ce, scale);
                    tape.backward(loss)?;
                    bound.take_grads(&mut tape)
                };
                model.params.accumulate(grads)?;
            }
            opt.step(&mut model.params, lr);
        }
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: total / order.len() as f64,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(log)
}

/// Predictions of `model` on the given subjects: `(classes, row-major scores)`.
pub fn predict_all(model: &Model, data: &[SubjectInput], idx: &[usize]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut preds = Vec::with_capacity(idx.len());
    let mut scores = Vec::with_capacity(idx.len() * model.classes());
    for &i in idx {
        let p = model.predict(&data[i])?;
        preds.push(p.class);
        scores.extend(p.probs.iter().map(|&v| f64::from(v)));
    }
    Ok((preds, scores))
}

pub fn evaluate_model(model: &Model, data: &[SubjectInput], idx: &[usize]) -> Result<MetricsReport> {
    let (preds, scores) = predict_all(model, data, idx)?;
    let labels: Vec<usize> = idx.iter().map(|&i| data[i].label).collect();
    evaluate(&preds, &scores, &labels, model.classes())
}

/// Seeds of one cross-validation run: fold split, then weights/shuffling.
pub fn run_seeds(seed: u64, repeat: usize, fold: usize) -> (u64, u64) {
    let split = seed.wrapping_add(repeat as u64);
    let init = split.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(fold as u64 + 1);
    (split, init)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arm: Arm,
    pub fold: usize,
    pub repeat: usize,
    pub metrics: Metrics,
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub runs: Vec<RunRecord>,
    pub summaries: Vec<(Arm, Summary)>,
}

impl AblationResult {
    pub fn summary(&self, arm: Arm) -> Option<&Summary> {
        self.summaries.iter().find(|(a, _)| *a == arm).map(|(_, s)| s)
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("arm,fold,repeat,acc,auc,spe,sen,f1\n");
        for r in &self.runs {
            let m = r.metrics;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.arm.name(),
                r.fold,
                r.repeat,
                m.acc,
                m.auc,
                m.spe,
                m.sen,
                m.f1
            );
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("arm,stat,acc,auc,spe,sen,f1\n");
        for (arm, s) in &self.summaries {
            for (stat, m) in [("mean", s.mean), ("std", s.std)] {
                let _ = writeln!(
                    out,
                    "{},{stat},{},{},{},{},{}",
                    arm.name(),
                    m.acc,
                    m.auc,
                    m.spe,
                    m.sen,
                    m.f1
                );
            }
        }
        out
    }
}

/// A trained cross-validation cell.
#[derive(Debug)]
pub struct TrainedCell {
    pub model: Model,
    pub test: Vec<usize>,
    pub log: Vec<EpochLog>,
    pub record: RunRecord,
}

/// Everything a cross-validated run needs besides the arm.
#[derive(Clone, Debug)]
pub struct Experiment<'a> {
    pub data: &'a [SubjectInput],
    pub shapes: &'a [ModalityShape],
    pub concepts: &'a ConceptEmbeddings,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl Experiment<'_> {
    /// Trains and tests one `(arm, repeat, fold)` cell.
    pub fn run_one(&self, arm: Arm, repeat: usize, fold: usize) -> Result<RunRecord> {
        Ok(self.train_cell(arm, repeat, fold)?.record)
    }

    /// Like [`Experiment::run_one`], but keeps the trained model and the test split.
    pub fn train_cell(&self, arm: Arm, repeat: usize, fold: usize) -> Result<TrainedCell> {
        let labels: Vec<usize> = self.data.iter().map(|s| s.label).collect();
        let (split_seed, init_seed) = run_seeds(self.seed, repeat, fold);
        let mut splits = kfold_split(&labels, self.train.folds, split_seed)?;
        let (train_idx, test_idx) = splits.swap_remove(fold);
        let cfg = ModelConfig {
            arm,
            ..self.model.clone()
        };
        let mut model = Model::new(cfg, self.shapes.to_vec(), self.concepts.clone(), init_seed)?;
        let log = train(&mut model, self.data, &train_idx, &self.train, init_seed, |_| {})?;
        let report = evaluate_model(&model, self.data, &test_idx)?;
        let record = RunRecord {
            arm,
            fold,
            repeat,
            metrics: report.metrics,
            final_loss: log.last().map_or(f64::NAN, |l| l.train_loss),
        };
        Ok(TrainedCell {
            model,
            test: test_idx,
            log,
            record,
        })
    }

    /// Every arm × repeat × fold; cells run in parallel and are reported in a fixed order.
    pub fn run_ablation(&self, arms: &[Arm]) -> Result<AblationResult> {
        self.train.validate()?;
        let cells: Vec<(Arm, usize, usize)> = arms
            .iter()
            .flat_map(|&a| (0..self.train.repeats).flat_map(move |r| (0..self.train.folds).map(move |f| (a, r, f))))
            .collect();
        let runs = cells
            .par_iter()
            .map(|&(a, r, f)| self.run_one(a, r, f))
            .collect::<Result<Vec<_>>>()?;
        let summaries = arms
            .iter()
            .map(|&a| {
                let m: Vec<Metrics> = runs.iter().filter(|r| r.arm == a).map(|r| r.metrics).collect();
                (a, summarize(&m))
            })
            .collect();
        Ok(AblationResult { runs, summaries })
    }
}
