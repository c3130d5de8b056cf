//! Stratified k-fold training with Adam.
//!
//! Each fold trains a freshly initialized model on the other `k - 1` folds for
//! the configured number of epochs, keeping the parameters from the epoch
//! with the best validation accuracy (earliest on ties). The fold with the
//! best validation accuracy (lowest index on ties) supplies the returned
//! model. Folds use independent RNG streams, so they run in parallel and
//! still match a sequential run exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mlp::{InputScaling, MlpConfig, MlpError, MlpModel, MlpParams};
use crate::protocol::{Label, RankSample};
use crate::rng::{derive_seed, SeededRng};
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] MlpError),
    #[error("class {label} has {count} samples, need at least {needed} (one per fold)")]
    InsufficientSamples { label: Label, count: usize, needed: usize },
    #[error("sample has {found} ranks, classifier expects {expected}")]
    RankLength { expected: usize, found: usize },
    #[error("non-finite loss in fold {fold}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss { fold: usize, epoch: usize, batch: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub fold_accuracies: Vec<f64>,
    /// Epoch (0-based) whose parameters each fold kept.
    pub best_epochs: Vec<usize>,
    pub selected_fold: usize,
    pub final_test_accuracy: Option<f64>,
    pub input_scaling: InputScaling,
    pub train_samples: usize,
}

impl TrainReport {
    pub fn mean_fold_accuracy(&self) -> f64 {
        self.fold_accuracies.iter().sum::<f64>() / self.fold_accuracies.len() as f64
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    learning_rate: f64,
    m: MlpParams<T>,
    v: MlpParams<T>,
    step: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &MlpParams<T>, learning_rate: f64) -> Self {
        Self {
            learning_rate,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut MlpParams<T>, grads: &MlpParams<T>) {
        self.step += 1;
        let b1 = T::of(ADAM_BETA1);
        let b2 = T::of(ADAM_BETA2);
        let one = T::one();
        let c1 = one - b1.powi(self.step);
        let c2 = one - b2.powi(self.step);
        let lr = T::of(self.learning_rate);
        let eps = T::of(ADAM_EPS);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] = p[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Assigns each index to one of `k` folds, class by class: each class's
/// indices are shuffled, then dealt round-robin. Per-class fold sizes differ
/// by at most one.
pub fn stratified_folds(labels: &[Label], k: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut folds = vec![Vec::new(); k];
    let mut offset = 0;
    for label in [Label::OutOfGallery, Label::InGallery] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        rng.shuffle(&mut idx);
        // Rotate the deal so the larger folds are spread across classes.
        for (j, i) in idx.iter().enumerate() {
            folds[(j + offset) % k].push(*i);
        }
        offset = (offset + idx.len()) % k;
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

/// Correct-prediction counts of a model over labelled features.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::InGallery, Label::InGallery) => self.tp += 1,
            (Label::OutOfGallery, Label::OutOfGallery) => self.tn += 1,
            (Label::OutOfGallery, Label::InGallery) => self.fp += 1,
            (Label::InGallery, Label::OutOfGallery) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            return 0.0;
        }
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

/// Evaluates a model on rank samples.
pub fn evaluate<T: Scalar>(model: &MlpModel<T>, samples: &[RankSample]) -> Result<Confusion, TrainError> {
    let mut c = Confusion::default();
    for s in samples {
        check_len(model.config.d_in, s)?;
        c.record(s.label, model.predict(&s.ranks, s.gallery_size)?.label);
    }
    Ok(c)
}

fn check_len(d_in: usize, s: &RankSample) -> Result<(), TrainError> {
    if s.ranks.len() != d_in {
        return Err(TrainError::RankLength {
            expected: d_in,
            found: s.ranks.len(),
        });
    }
    Ok(())
}

fn accuracy<T: Scalar>(model: &MlpModel<T>, data: &[(Vec<T>, Label)]) -> Result<f64, MlpError> {
    let mut correct = 0usize;
    for (x, y) in data {
        if model.predict_features(x)?.label == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

struct FoldOutcome<T> {
    accuracy: f64,
    best_epoch: usize,
    params: MlpParams<T>,
}

fn train_fold<T: Scalar>(
    config: &MlpConfig,
    fold: usize,
    train: &[(Vec<T>, Label)],
    val: &[(Vec<T>, Label)],
) -> Result<FoldOutcome<T>, TrainError> {
    let mut rng = SeededRng::new(derive_seed(config.rng_seed, fold as u64 + 1));
    let mut model = MlpModel::<T>::init(config.clone(), &mut rng)?;
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, MlpParams<T>)> = None;
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<(Vec<T>, Label)> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (loss, grads) = model.loss_and_grad(&batch, Some(&mut rng))?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(TrainError::NonFiniteLoss { fold, epoch, batch: b });
            }
            adam.step(&mut model.params, &grads);
        }
        let acc = accuracy(&model, val)?;
        if best.as_ref().is_none_or(|(a, _, _)| acc > *a) {
            best = Some((acc, epoch, model.params.clone()));
        }
    }
    let (accuracy, best_epoch, params) = best.expect("at least one epoch");
    Ok(FoldOutcome {
        accuracy,
        best_epoch,
        params,
    })
}

/// Trains with stratified k-fold cross-validation and returns the best fold's
/// model. With `folds == 1` the single model is validated on its own training
/// data.
pub fn train<T: Scalar>(samples: &[RankSample], config: &MlpConfig) -> Result<(MlpModel<T>, TrainReport), TrainError> {
    config.validate()?;
    for s in samples {
        check_len(config.d_in, s)?;
    }
    for label in [Label::OutOfGallery, Label::InGallery] {
        let count = samples.iter().filter(|s| s.label == label).count();
        if count < config.folds {
            return Err(TrainError::InsufficientSamples {
                label,
                count,
                needed: config.folds,
            });
        }
    }
    let data: Vec<(Vec<T>, Label)> = samples
        .iter()
        .map(|s| (config.features::<T>(&s.ranks, s.gallery_size), s.label))
        .collect();
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();
    let folds = stratified_folds(&labels, config.folds, &mut SeededRng::new(config.rng_seed));

    let outcomes: Vec<FoldOutcome<T>> = (0..config.folds)
        .into_par_iter()
        .map(|f| {
            let (train, val): (Vec<_>, Vec<_>) = if config.folds == 1 {
                (data.clone(), data.clone())
            } else {
                let mut in_val = vec![false; data.len()];
                for &i in &folds[f] {
                    in_val[i] = true;
                }
                let train = (0..data.len()).filter(|&i| !in_val[i]).map(|i| data[i].clone()).collect();
                let val = folds[f].iter().map(|&i| data[i].clone()).collect();
                (train, val)
            };
            train_fold(config, f, &train, &val)
        })
        .collect::<Result<_, _>>()?;

    let mut selected = 0;
    for (f, o) in outcomes.iter().enumerate() {
        if o.accuracy > outcomes[selected].accuracy {
            selected = f;
        }
    }
    let report = TrainReport {
        fold_accuracies: outcomes.iter().map(|o| o.accuracy).collect(),
        best_epochs: outcomes.iter().map(|o| o.best_epoch).collect(),
        selected_fold: selected,
        final_test_accuracy: None,
        input_scaling: config.input_scaling,
        train_samples: samples.len(),
    };
    let params = outcomes.into_iter().nth(selected).expect("selected fold").params;
    Ok((
        MlpModel {
            config: config.clone(),
            params,
        },
        report,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(ranks: Vec<u32>, label: Label) -> RankSample {
        RankSample {
            ranks,
            label,
            probe_identity: String::new(),
            group: "G".into(),
            condition: "c".into(),
            gallery_size: 1000,
        }
    }

    #[test]
    fn folds_are_stratified_partition() {
        let mut rng = SeededRng::new(1);
        let labels: Vec<Label> = (0..53)
            .map(|i| if i % 3 == 0 { Label::InGallery } else { Label::OutOfGallery })
            .collect();
        let folds = stratified_folds(&labels, 10, &mut rng);
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..53).collect::<Vec<_>>());
        for label in [Label::InGallery, Label::OutOfGallery] {
            let sizes: Vec<usize> = folds.iter().map(|f| f.iter().filter(|&&i| labels[i] == label).count()).collect();
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1, "{sizes:?}");
        }
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let cfg = MlpConfig {
            d_in: 1,
            hidden_sizes: vec![],
            ..MlpConfig::default()
        };
        let mut params = MlpParams::<f64>::zeros(&cfg);
        let mut grads = params.zeros_like();
        grads.layers[0].weight = vec![0.5, -2.0];
        let mut adam = Adam::new(&params, 1e-3);
        adam.step(&mut params, &grads);
        assert!((params.layers[0].weight[0] + 1e-3).abs() < 1e-9);
        assert!((params.layers[0].weight[1] - 1e-3).abs() < 1e-9);
        assert_eq!(params.layers[0].bias, vec![0.0, 0.0]);
    }

    #[test]
    fn insufficient_samples() {
        let samples: Vec<_> = (0..5).map(|_| sample(vec![2, 3, 4], Label::InGallery)).collect();
        assert!(matches!(
            train::<f64>(&samples, &MlpConfig::default()),
            Err(TrainError::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn confusion_accuracy() {
        let mut c = Confusion::default();
        c.record(Label::InGallery, Label::InGallery);
        c.record(Label::OutOfGallery, Label::InGallery);
        c.record(Label::OutOfGallery, Label::OutOfGallery);
        c.record(Label::InGallery, Label::OutOfGallery);
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (1, 1, 1, 1));
        assert_eq!(c.accuracy(), 0.5);
    }
}
