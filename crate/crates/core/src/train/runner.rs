use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optimizer::{clip_grad_norm, AdamWConfig, OptimizerState};
use super::schedule::{CyclicalSchedule, LrBounds};
use crate::error::{Error, Result};
use crate::model::Mode;
use crate::numerics::{Parameter, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dropout: f64,
    pub lr: LrBounds,
    /// Cycle length of the learning-rate schedule, in epochs.
    pub cycle_epochs: usize,
    pub optimizer: AdamWConfig,
    pub grad_clip: Option<f64>,
    /// Weight each example's task cross-entropy by inverse class frequency.
    pub class_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            seed: 0,
            dropout: 0.1,
            lr: LrBounds::DESK_FINETUNE,
            cycle_epochs: 4,
            optimizer: AdamWConfig::default(),
            grad_clip: None,
            class_weights: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.cycle_epochs == 0 {
            return Err(Error::Config("cycle_epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        self.lr.validate()
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Output of one batch: the loss to minimise plus values to log.
pub struct BatchLoss {
    pub loss: Var,
    /// One entry per [`Objective::loss_columns`] column, already batch means.
    pub components: Vec<f64>,
    pub correct: usize,
    pub counted: usize,
}

/// A model plus loss that [`run_training`] can optimise.
pub trait Objective {
    fn loss_columns(&self) -> Vec<String>;
    fn num_examples(&self) -> usize;
    fn example_id(&self, index: usize) -> String;
    fn batch_loss(&self, tape: &mut Tape, batch: &[usize], mode: &mut Mode) -> Result<BatchLoss>;
    fn trainable(&mut self) -> Vec<&mut Parameter>;
    /// Higher is better. `None` disables best-checkpoint tracking.
    fn validation_score(&self) -> Result<Option<f64>> {
        Ok(None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub losses: Vec<f64>,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub columns: Vec<String>,
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,lr");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push_str(",accuracy\n");
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", r.epoch, r.step, r.lr);
            for v in &r.losses {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{}", r.accuracy);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Values of the named loss column, one per epoch.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r.losses[i]).collect())
    }
}

/// Trainable values at the epoch with the best validation score.
#[derive(Debug, Clone, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub score: f64,
    pub values: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: History,
    pub best: Option<BestSnapshot>,
}

/// Restores a snapshot taken from the same objective.
pub fn restore(objective: &mut impl Objective, snapshot: &BestSnapshot) {
    for (p, v) in objective.trainable().into_iter().zip(&snapshot.values) {
        p.value = v.clone();
    }
}

/// Seeded minibatch loop with AdamW and a triangular cyclical schedule.
///
/// Example order and dropout masks come from separate ChaCha streams derived
/// from `config.seed`, so a run is fully reproducible.
pub fn run_training(objective: &mut impl Objective, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let columns = objective.loss_columns();
    let mut history = History {
        columns: columns.clone(),
        rows: Vec::new(),
    };
    if config.epochs == 0 {
        return Ok(TrainOutcome { history, best: None });
    }
    let n = objective.num_examples();
    if n == 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    let steps_per_epoch = config.steps_per_epoch(n);
    let schedule = CyclicalSchedule::new(config.lr, config.cycle_epochs * steps_per_epoch)?;
    let mut optimizer = OptimizerState::new(config.optimizer);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    let mut best: Option<BestSnapshot> = None;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut order_rng);
        let mut sums = vec![0.0; columns.len()];
        let (mut correct, mut counted) = (0usize, 0usize);
        let mut lr = schedule.lr_at(step);
        for batch in order.chunks(config.batch_size) {
            lr = schedule.lr_at(step);
            let mut tape = Tape::new();
            let out = objective.batch_loss(&mut tape, batch, &mut Mode::Train(&mut dropout_rng))?;
            let loss = tape.scalar(out.loss);
            if !loss.is_finite() || out.components.iter().any(|c| !c.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch_ids: batch.iter().map(|&i| objective.example_id(i)).collect(),
                });
            }
            tape.backward(out.loss)?;
            let mut params = objective.trainable();
            tape.write_grads(params.iter_mut().map(|p| &mut **p));
            if let Some(c) = config.grad_clip {
                clip_grad_norm(&mut params, c);
            }
            optimizer.step(&mut params, lr)?;
            for (s, c) in sums.iter_mut().zip(&out.components) {
                *s += c * batch.len() as f64;
            }
            correct += out.correct;
            counted += out.counted;
            step += 1;
        }
        history.rows.push(HistoryRow {
            epoch,
            step,
            lr,
            losses: sums.iter().map(|s| s / n as f64).collect(),
            accuracy: if counted == 0 {
                0.0
            } else {
                correct as f64 / counted as f64
            },
        });
        log::info!("epoch {epoch}: {:?}", history.rows.last().map(|r| &r.losses));
        if let Some(score) = objective.validation_score()? {
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(BestSnapshot {
                    epoch,
                    score,
                    values: objective.trainable().iter().map(|p| p.value.clone()).collect(),
                });
            }
        }
    }
    Ok(TrainOutcome { history, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Least-squares fit of y = 2x - 1 with a 1×1 weight and a bias.
    struct Line {
        xs: Vec<f64>,
        w: Parameter,
        b: Parameter,
    }

    impl Line {
        fn new() -> Self {
            Self {
                xs: (0..12).map(|i| i as f64 / 6.0 - 1.0).collect(),
                w: Parameter::new("w", Tensor::full(&[1, 1], 0.0)),
                b: Parameter::new("b", Tensor::zeros(&[1])),
            }
        }
    }

    impl Objective for Line {
        fn loss_columns(&self) -> Vec<String> {
            vec!["mse".into()]
        }
        fn num_examples(&self) -> usize {
            self.xs.len()
        }
        fn example_id(&self, i: usize) -> String {
            format!("x{i}")
        }
        fn batch_loss(&self, tape: &mut Tape, batch: &[usize], _: &mut Mode) -> Result<BatchLoss> {
            let x = Tensor::new(vec![batch.len(), 1], batch.iter().map(|&i| self.xs[i]).collect())?;
            let y = Tensor::new(
                vec![batch.len(), 1],
                batch.iter().map(|&i| 2.0 * self.xs[i] - 1.0).collect(),
            )?;
            let (x, y) = (tape.constant(x), tape.constant(y));
            let (w, b) = (tape.param(&self.w), tape.param(&self.b));
            let h = tape.matmul(x, w)?;
            let h = tape.add_row(h, b)?;
            let loss = tape.mse(h, y)?;
            Ok(BatchLoss {
                loss,
                components: vec![tape.scalar(loss)],
                correct: 0,
                counted: 0,
            })
        }
        fn trainable(&mut self) -> Vec<&mut Parameter> {
            vec![&mut self.w, &mut self.b]
        }
        fn validation_score(&self) -> Result<Option<f64>> {
            Ok(Some(-(self.w.value.item() - 2.0).abs()))
        }
    }

    fn config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            seed: 3,
            lr: LrBounds { low: 1e-3, high: 5e-2 },
            optimizer: AdamWConfig {
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leaves_parameters() {
        let mut obj = Line::new();
        let out = run_training(&mut obj, &config(0)).unwrap();
        assert!(out.history.rows.is_empty());
        assert_eq!(obj.w.value.item(), 0.0);
    }

    #[test]
    fn fits_and_is_deterministic() {
        let mut a = Line::new();
        let mut b = Line::new();
        let ha = run_training(&mut a, &config(80)).unwrap();
        let hb = run_training(&mut b, &config(80)).unwrap();
        assert_eq!(ha.history.to_csv(), hb.history.to_csv());
        let mse = ha.history.column("mse").unwrap();
        assert!(mse.last().unwrap() < &1e-3, "{mse:?}");
        assert_eq!(ha.history.rows.last().unwrap().step, 80 * 3);
        let best = ha.best.unwrap();
        assert!(best.score <= 0.0 && best.epoch >= 1);
        restore(&mut a, &best);
        assert_eq!(-(a.w.value.item() - 2.0).abs(), best.score);
    }

    #[test]
    fn csv_header() {
        let h = History {
            columns: vec!["l".into()],
            rows: vec![HistoryRow {
                epoch: 1,
                step: 2,
                lr: 0.5,
                losses: vec![1.25],
                accuracy: 0.0,
            }],
        };
        assert_eq!(h.to_csv(), "epoch,step,lr,l,accuracy\n1,2,0.5,1.25,0\n");
    }

    #[test]
    fn non_finite_loss_reports_batch() {
        let mut obj = Line::new();
        obj.xs[5] = f64::NAN;
        match run_training(&mut obj, &config(1)) {
            Err(Error::NonFiniteLoss { epoch, batch_ids }) => {
                assert_eq!(epoch, 1);
                assert!(batch_ids.contains(&"x5".to_string()));
            }
            other => panic!("{other:?}"),
        }
    }
}
