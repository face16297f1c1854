use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::model::{feature_stats_on_tape, vat_total_loss, VatModel};
use super::sampling::{sample_auxiliary, AuxSample};
use super::VatConfig;
use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::bvtd::{symmetric_kl_gaussian, GaussianStats};
use crate::data::{augment, DatasetSplit, Sample, TaskKind, ORDINAL_GRADES};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalResult};
use crate::nn::{self, AdamState};
use crate::rng::{self, Stream};

/// Mutable state of one training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ParamStore,
    pub adam: AdamState,
    /// Epochs completed so far.
    pub epoch: usize,
    pub best_metric: f64,
    pub best_epoch: usize,
    pub best_params: ParamStore,
    pub epochs_since_improvement: usize,
}

impl TrainState {
    pub fn new(params: ParamStore, config: &VatConfig) -> Self {
        Self {
            adam: AdamState::new(&params, config.adam),
            best_params: params.clone(),
            params,
            epoch: 0,
            best_metric: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_improvement: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub main: f64,
    /// `None` when the adversarial branch is disabled.
    pub aux_bce: Option<f64>,
    pub total: f64,
}

/// One row of the per-epoch training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub aux_bce: Option<f64>,
    pub total_loss: f64,
    pub val_metric: f64,
    /// Symmetrized KL between training and validation feature statistics.
    pub feature_gap: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: VatModel,
    pub state: TrainState,
    pub records: Vec<EpochRecord>,
}

fn targets(labels: impl Iterator<Item = usize>) -> Tensor {
    let t: Vec<f64> = labels.map(|l| l as f64).collect();
    Tensor::from_parts(vec![t.len(), 1], t)
}

fn finite(v: f64, what: &str, epoch: usize, step: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss {
            epoch,
            step,
            detail: format!("{what} = {v}"),
        })
    }
}

/// One optimizer step on a batch and, for VAT methods, its aligned
/// auxiliary partners.
///
/// Both images of every pair go through the same encoder parameters. The
/// task loss sees only the training branch; the discriminator sees both.
/// A single backward pass on the total loss feeds a single Adam step.
pub fn train_step(
    model: &VatModel,
    state: &mut TrainState,
    batch: &[Sample],
    aux: &[AuxSample],
    config: &VatConfig,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::Contract("empty training batch".into()));
    }
    let vat = config.method.is_vat();
    if vat && aux.len() != batch.len() {
        return Err(Error::Contract(format!(
            "{} auxiliary samples for a batch of {}",
            aux.len(),
            batch.len()
        )));
    }
    let (epoch, step) = (state.epoch + 1, state.adam.t as usize);
    let mut tape = Tape::new();
    let images: Vec<&Tensor> = batch.iter().map(|s| &s.image).collect();
    let x_tr = model.input(&mut tape, &images)?;
    let enc_tr = model.encode(&mut tape, &state.params, x_tr)?;
    let target = targets(batch.iter().map(|s| s.label));
    let main = match config.task {
        TaskKind::Binary => nn::bce(&mut tape, enc_tr.prediction, &target)?,
        TaskKind::Ordinal => nn::mae(&mut tape, enc_tr.prediction, &target)?,
    };
    let (total, aux_var) = if vat {
        let aux_images: Vec<&Tensor> = aux.iter().map(|a| &a.image).collect();
        let x_a = model.input(&mut tape, &aux_images)?;
        let enc_a = model.encode(&mut tape, &state.params, x_a)?;
        let s_tr = feature_stats_on_tape(&mut tape, &enc_tr.blocks, model.aggregation)?;
        let s_a = feature_stats_on_tape(&mut tape, &enc_a.blocks, model.aggregation)?;
        let t_hat = model.discriminate(&mut tape, &state.params, s_tr, s_a)?;
        let t_a = Tensor::from_parts(
            vec![aux.len(), 1],
            aux.iter().map(|a| f64::from(a.t_a)).collect(),
        );
        let bce = nn::bce(&mut tape, t_hat, &t_a)?;
        (
            vat_total_loss(&mut tape, main, bce, config.lambda)?,
            Some(bce),
        )
    } else {
        (main, None)
    };
    let losses = StepLosses {
        main: finite(tape.value(main).item(), "task loss", epoch, step)?,
        aux_bce: aux_var
            .map(|v| finite(tape.value(v).item(), "auxiliary BCE", epoch, step))
            .transpose()?,
        total: finite(tape.value(total).item(), "total loss", epoch, step)?,
    };
    let grads = tape.backward(total)?;
    state.params.zero_grad();
    state.params.accumulate(&tape, &grads);
    state.adam.step(&mut state.params)?;
    Ok(losses)
}

/// Validation or test metric of raw task outputs: AUC for binary tasks,
/// quadratic weighted kappa of rounded grades for ordinal tasks.
pub fn task_metric(task: TaskKind, predictions: &[f64], samples: &[Sample]) -> Result<EvalResult> {
    let (metric, value) = match task {
        TaskKind::Binary => {
            let labels: Vec<bool> = samples.iter().map(|s| s.label == 1).collect();
            ("auc", metrics::auc(predictions, &labels)?)
        }
        TaskKind::Ordinal => {
            let top = (ORDINAL_GRADES - 1) as f64;
            let pred: Vec<usize> = predictions
                .iter()
                .map(|p| p.clamp(0.0, top).round() as usize)
                .collect();
            let truth: Vec<usize> = samples.iter().map(|s| s.label).collect();
            (
                "kappa",
                metrics::kappa_quadratic(&pred, &truth, ORDINAL_GRADES)?,
            )
        }
    };
    Ok(EvalResult {
        metric: metric.into(),
        value,
        samples: samples.len(),
    })
}

/// Trains on `split.train`, early-stopping on `split.val`.
///
/// Each epoch shuffles the training subset, draws one auxiliary partner per
/// item for VAT methods, and then scores the validation subset. The best
/// validation parameters are kept in [`TrainState::best_params`].
pub fn fit(split: &DatasetSplit, config: &VatConfig) -> Result<FitResult> {
    config.validate()?;
    if split.train.is_empty() || split.val.len() < 2 {
        return Err(Error::Config(format!(
            "fit needs a non-empty training subset and at least 2 validation images, got {} and {}",
            split.train.len(),
            split.val.len()
        )));
    }
    let vat = config.method.is_vat();
    if vat && split.pre.is_empty() {
        return Err(Error::Config(
            "VAT needs a non-empty pre-training pool".into(),
        ));
    }
    let model = VatModel::new(config.model.clone(), config.task, config.method)?;
    let mut state = TrainState::new(model.init_params(config.seed)?, config);
    let mut shuffle_rng = rng::stream(config.seed, Stream::Shuffle);
    let mut aux_rng = rng::stream(config.seed, Stream::AuxSampling);
    let mut aug_rng = rng::substream(config.seed, Stream::Augment, 0);
    let mut aux_aug_rng = rng::substream(config.seed, Stream::Augment, 1);
    let augmenting = !config.augment.is_identity();
    let train = &split.train;
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();

    while state.epoch < config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let (mut main_sum, mut aux_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            let mut aux = Vec::with_capacity(if vat { chunk.len() } else { 0 });
            for &i in chunk {
                let mut s = train[i].clone();
                if augmenting {
                    s.image = augment(&s.image, &config.augment, &mut aug_rng)?;
                }
                batch.push(s);
                if vat {
                    let mut a = sample_auxiliary(i, train, &split.pre, &mut aux_rng)?;
                    if augmenting {
                        a.image = augment(&a.image, &config.augment, &mut aux_aug_rng)?;
                    }
                    aux.push(a);
                }
            }
            let losses = train_step(&model, &mut state, &batch, &aux, config)?;
            let w = chunk.len() as f64;
            main_sum += w * losses.main;
            aux_sum += w * losses.aux_bce.unwrap_or(0.0);
            total_sum += w * losses.total;
        }
        state.epoch += 1;

        let (val_pred, val_stats) = model.evaluate(&state.params, &split.val)?;
        let val_metric = task_metric(config.task, &val_pred, &split.val)?.value;
        let feature_gap = if train.len() >= 2 {
            let train_stats = model.stats_population(&state.params, train)?;
            symmetric_kl_gaussian(
                &GaussianStats::fit(&train_stats)?,
                &GaussianStats::fit(&val_stats)?,
            )?
        } else {
            f64::NAN
        };
        let n = train.len() as f64;
        records.push(EpochRecord {
            epoch: state.epoch,
            train_loss: main_sum / n,
            aux_bce: vat.then_some(aux_sum / n),
            total_loss: total_sum / n,
            val_metric,
            feature_gap,
        });

        if val_metric > state.best_metric {
            state.best_metric = val_metric;
            state.best_epoch = state.epoch;
            state.best_params = state.params.clone();
            state.epochs_since_improvement = 0;
        } else {
            state.epochs_since_improvement += 1;
            if state.epochs_since_improvement >= config.patience {
                break;
            }
        }
    }
    Ok(FitResult {
        model,
        state,
        records,
    })
}

/// Mean discriminator BCE on pairs drawn from subsets the model never
/// trained on.
///
/// Every image of `same` is paired as in auxiliary sampling, with `same`
/// standing in for the training subset and `other` for the pre-training
/// pool.
pub fn discriminator_heldout_bce(
    model: &VatModel,
    params: &ParamStore,
    same: &[Sample],
    other: &[Sample],
    seed: u64,
) -> Result<f64> {
    let mut rng = rng::stream(seed, Stream::Eval);
    let aux = (0..same.len())
        .map(|i| sample_auxiliary(i, same, other, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    const CHUNK: usize = 64;
    for (anchors, partners) in same.chunks(CHUNK).zip(aux.chunks(CHUNK)) {
        let mut tape = Tape::new();
        let a_img: Vec<&Tensor> = anchors.iter().map(|s| &s.image).collect();
        let p_img: Vec<&Tensor> = partners.iter().map(|s| &s.image).collect();
        let xa = model.input(&mut tape, &a_img)?;
        let xp = model.input(&mut tape, &p_img)?;
        let ea = model.encode(&mut tape, params, xa)?;
        let ep = model.encode(&mut tape, params, xp)?;
        let sa = feature_stats_on_tape(&mut tape, &ea.blocks, model.aggregation)?;
        let sp = feature_stats_on_tape(&mut tape, &ep.blocks, model.aggregation)?;
        let t_hat = model.discriminate(&mut tape, params, sa, sp)?;
        let t = Tensor::from_parts(
            vec![partners.len(), 1],
            partners.iter().map(|a| f64::from(a.t_a)).collect(),
        );
        let bce = nn::bce(&mut tape, t_hat, &t)?;
        total += tape.value(bce).item() * anchors.len() as f64;
    }
    Ok(total / same.len() as f64)
}
