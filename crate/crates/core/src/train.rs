//! Training and evaluation loops.
//!
//! Each step draws a mini-batch, runs the backbone once, and combines
//! `L = θ₁·L_action + θ₂·L_self` before a single backward pass, so both
//! losses reach the shared backbone. Evaluation uses the action path only.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{partner, stack_clips, ClipRecord};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{self, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::tss::{BatchSelection, TssAlgorithm, TssRng};

/// Allowed range of θ₁/θ₂ when θ₂ > 0.
pub const THETA_RATIO_RANGE: (f64, f64) = (10.0, 100.0);

const STREAM_DATA: u64 = 20;
const EVAL_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub theta1: f64,
    pub theta2: f64,
    pub lr: f64,
    /// Epoch indices (0-based) at which the learning rate is divided by 10.
    pub lr_steps: Vec<usize>,
    pub epochs: usize,
    pub hidden: usize,
    pub embed_channels: usize,
    pub backbone_channels: usize,
    pub use_ett: bool,
    pub tss: Option<TssAlgorithm>,
    pub seed: u64,
    /// Skip the θ₁/θ₂ range check.
    pub allow_theta_override: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            frames: 8,
            channels: 3,
            height: 32,
            width: 32,
            classes: 4,
            theta1: 1.0,
            theta2: 0.1,
            lr: 0.05,
            lr_steps: vec![25],
            epochs: 30,
            hidden: 64,
            embed_channels: 4,
            backbone_channels: 8,
            use_ett: true,
            tss: Some(TssAlgorithm::RR),
            seed: 7,
            allow_theta_override: false,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            frames: self.frames,
            in_channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
            backbone_channels: self.backbone_channels,
            hidden: self.hidden,
            embed_channels: self.embed_channels,
            use_ett: self.use_ett,
            tss: self.tss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta1 > 0.0 && self.theta1.is_finite()) {
            return Err(Error::Config(format!("theta1 must be > 0, got {}", self.theta1)));
        }
        if !(self.theta2 >= 0.0 && self.theta2.is_finite()) {
            return Err(Error::Config(format!("theta2 must be >= 0, got {}", self.theta2)));
        }
        if self.theta2 > 0.0 && !self.allow_theta_override {
            let ratio = self.theta1 / self.theta2;
            let (lo, hi) = THETA_RATIO_RANGE;
            // Relative slack so that e.g. 1.0/0.01 counts as exactly 100.
            let eps = 1e-12 * ratio;
            if ratio < lo - eps || ratio > hi + eps {
                return Err(Error::Config(format!(
                    "theta1/theta2 = {ratio} is outside [{lo}, {hi}]"
                )));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if self.lr_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "lr_steps must be strictly increasing: {:?}",
                self.lr_steps
            )));
        }
        if let Some(&last) = self.lr_steps.last() {
            if last >= self.epochs {
                return Err(Error::Config(format!(
                    "lr step {last} is not below the epoch count {}",
                    self.epochs
                )));
            }
        }
        self.model_config().validate()
    }

    /// Learning rate during 0-based `epoch`: divided by 10 for every step already reached.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_steps.iter().filter(|&&s| epoch >= s).count();
        self.lr / 10f64.powi(drops as i32)
    }

    fn check_clips(&self, clips: &[ClipRecord], what: &str) -> Result<()> {
        let expected = [self.frames, self.channels, self.height, self.width];
        for clip in clips {
            if clip.frames.shape() != expected {
                return Err(Error::Config(format!(
                    "{what} clip {} has shape {:?}, expected {expected:?}",
                    clip.clip_id,
                    clip.frames.shape()
                )));
            }
            if clip.label >= self.classes {
                return Err(Error::Config(format!(
                    "{what} clip {} has label {} but there are {} classes",
                    clip.clip_id, clip.label, self.classes
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Step,
    Epoch,
}

/// One line of the metrics stream.
///
/// For step records the losses and accuracy are those of the mini-batch; for
/// epoch records they are means over the epoch's steps. `total` is always
/// `θ₁·l_action + θ₂·l_self`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: RecordKind,
    pub epoch: usize,
    pub step: usize,
    pub l_action: f64,
    pub l_self: Option<f64>,
    pub total: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub lambda: Option<f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub tss: Option<Vec<BatchSelection>>,
    /// Seconds since training started. Not serialised, so streams stay reproducible.
    #[serde(skip)]
    pub wall_clock_s: f64,
}

/// Trains a fresh model, reporting every record to `on_record` as it is produced.
pub fn train_with<F>(
    config: &TrainConfig,
    train_set: &[ClipRecord],
    test_set: Option<&[ClipRecord]>,
    mut on_record: F,
) -> Result<(Model, Vec<MetricsRecord>)>
where
    F: FnMut(&MetricsRecord),
{
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    config.check_clips(train_set, "training")?;
    if let Some(test) = test_set {
        config.check_clips(test, "test")?;
    }

    let mut model = Model::new(config.model_config(), config.seed)?;
    let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
    data_rng.set_stream(STREAM_DATA);
    let mut tss_rng = TssRng::new(config.seed);
    let theta1 = Tensor::scalar(config.theta1);
    let theta2 = Tensor::scalar(config.theta2);

    let started = Instant::now();
    let mut records = Vec::new();
    let mut step = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut data_rng);
        let (mut sum_action, mut sum_self, mut correct, mut seen, mut steps) = (0.0, 0.0, 0, 0, 0);

        for chunk in order.chunks(config.batch_size) {
            let clips: Vec<&ClipRecord> = chunk.iter().map(|&i| &train_set[i]).collect();
            let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();

            let mut g = Graph::new();
            let (bindings, vars) = model.bind(&mut g)?;
            let x = g.constant(stack_clips(&clips)?);
            let features = model::backbone_forward(&mut g, x, &vars.backbone)?;
            let action = model::action_loss(&mut g, features, &vars, &labels)?;
            let t1 = g.constant(theta1.clone());
            let mut total = g.scale(action.loss, t1)?;

            let mut self_out = None;
            if config.tss.is_some() {
                let s = model::self_loss(&mut g, &model, features, &vars, &mut tss_rng)?;
                let t2 = g.constant(theta2.clone());
                let weighted = g.scale(s.loss, t2)?;
                total = g.add(total, weighted)?;
                self_out = Some(s);
            }

            let l_action = g.value(action.loss).item();
            let l_self = self_out.as_ref().map(|s| g.value(s.loss).item());
            let total_value = g.value(total).item();
            if !total_value.is_finite() {
                return Err(Error::DegenerateInput(format!(
                    "non-finite loss at epoch {epoch}, step {step}"
                )));
            }

            g.backward(total)?;
            model.params.absorb_grads(&g, &bindings);
            model.params.sgd_step(lr);

            sum_action += l_action;
            sum_self += l_self.unwrap_or(0.0);
            correct += action.correct;
            seen += clips.len();
            steps += 1;

            let rec = MetricsRecord {
                kind: RecordKind::Step,
                epoch,
                step,
                l_action,
                l_self,
                total: total_value,
                train_acc: action.correct as f64 / clips.len() as f64,
                test_acc: None,
                lambda: model.lambda(),
                lr,
                tss: self_out.map(|s| s.pseudo.selections),
                wall_clock_s: started.elapsed().as_secs_f64(),
            };
            on_record(&rec);
            records.push(rec);
            step += 1;
        }

        let test_acc = match test_set {
            Some(test) => Some(evaluate(&model, test)?.accuracy),
            None => None,
        };
        let mean_action = sum_action / steps as f64;
        let mean_self = config.tss.map(|_| sum_self / steps as f64);
        let rec = MetricsRecord {
            kind: RecordKind::Epoch,
            epoch,
            step,
            l_action: mean_action,
            l_self: mean_self,
            total: config.theta1 * mean_action + mean_self.map_or(0.0, |s| config.theta2 * s),
            train_acc: correct as f64 / seen as f64,
            test_acc,
            lambda: model.lambda(),
            lr,
            tss: None,
            wall_clock_s: started.elapsed().as_secs_f64(),
        };
        on_record(&rec);
        records.push(rec);
    }
    Ok((model, records))
}

pub fn train(
    config: &TrainConfig,
    train_set: &[ClipRecord],
    test_set: Option<&[ClipRecord]>,
) -> Result<(Model, Vec<MetricsRecord>)> {
    train_with(config, train_set, test_set, |_| {})
}

/// Test-time report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<usize>,
    /// Self-supervision calls made during this evaluation (always 0).
    pub tss_invocations: u64,
}

impl EvalReport {
    pub fn per_class_accuracy(&self) -> Vec<f64> {
        self.confusion
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: usize = row.iter().sum();
                if n == 0 {
                    0.0
                } else {
                    row[k] as f64 / n as f64
                }
            })
            .collect()
    }

    /// Clips of each class predicted as its reversal partner, summed over classes.
    pub fn partner_confusions(&self) -> usize {
        let c = self.confusion.len();
        (0..c)
            .filter(|&k| partner(k) < c)
            .map(|k| self.confusion[k][partner(k)])
            .sum()
    }

    /// Within-pair accuracy for the pair containing `class`: among clips of the
    /// pair predicted as either member, the fraction predicted correctly.
    pub fn pair_accuracy(&self, class: usize) -> Option<f64> {
        let (a, b) = (class.min(partner(class)), class.max(partner(class)));
        if b >= self.confusion.len() {
            return None;
        }
        let right = self.confusion[a][a] + self.confusion[b][b];
        let wrong = self.confusion[a][b] + self.confusion[b][a];
        (right + wrong > 0).then(|| right as f64 / (right + wrong) as f64)
    }
}

/// Action-path predictions for `clips`.
pub fn predict(model: &Model, clips: &[ClipRecord]) -> Result<Vec<usize>> {
    let mut predictions = Vec::with_capacity(clips.len());
    for chunk in clips.chunks(EVAL_BATCH) {
        let refs: Vec<&ClipRecord> = chunk.iter().collect();
        let mut g = Graph::new();
        let (_, vars) = model.bind(&mut g)?;
        let x = g.constant(stack_clips(&refs)?);
        let features = model::backbone_forward(&mut g, x, &vars.backbone)?;
        let out = model::action_logits(&mut g, features, &vars)?;
        predictions.extend(model::argmax_rows(g.value(out.logits)));
    }
    Ok(predictions)
}

/// Top-1 accuracy and confusion matrix using backbone, ETT and action head only.
pub fn evaluate(model: &Model, clips: &[ClipRecord]) -> Result<EvalReport> {
    let before = model.tss_invocations();
    let classes = model.config.classes;
    let predictions = predict(model, clips)?;
    let mut confusion = vec![vec![0; classes]; classes];
    for (clip, &p) in clips.iter().zip(&predictions) {
        if clip.label >= classes {
            return Err(Error::Index {
                op: "evaluate",
                index: clip.label,
                bound: classes,
            });
        }
        confusion[clip.label][p] += 1;
    }
    let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
    Ok(EvalReport {
        accuracy: if clips.is_empty() {
            0.0
        } else {
            correct as f64 / clips.len() as f64
        },
        confusion,
        predictions,
        tss_invocations: model.tss_invocations() - before,
    })
}

/// Attention map `A*` [N,C_f,H/4,W/4] for one clip, or `None` without ETT.
pub fn attention_for_clip(model: &Model, clip: &ClipRecord) -> Result<Option<Tensor>> {
    if !model.config.use_ett {
        return Ok(None);
    }
    let mut g = Graph::new();
    let (_, vars) = model.bind(&mut g)?;
    let x = g.constant(stack_clips(&[clip])?);
    let features = model::backbone_forward(&mut g, x, &vars.backbone)?;
    let out = model::action_logits(&mut g, features, &vars)?;
    let attention = out.ett.expect("ETT enabled").attention;
    let s = g.shape(attention)[1..].to_vec();
    Ok(Some(g.value(attention).reshape(&s)?))
}
