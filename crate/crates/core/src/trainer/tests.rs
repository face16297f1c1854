use super::*;
use crate::autodiff::{grad_check, grad_check_params, ParamStore, Tape, Tensor};
use crate::data::{gen_shapes_task, DatasetSplit, SubsetCounts, SyntheticTaskSpec, TaskKind};
use crate::nn;
use crate::Error;

fn tiny_spec() -> ModelSpec {
    ModelSpec {
        image_size: 8,
        channels: vec![2, 3],
        disc_hidden: 4,
    }
}

fn tiny_split(seed: u64) -> DatasetSplit {
    gen_shapes_task(&SyntheticTaskSpec {
        image_size: 8,
        size_range: (1.5, 2.5),
        center_jitter: 0.5,
        counts: SubsetCounts {
            train: 8,
            val: 8,
            pre: 16,
            test: 8,
        },
        seed,
        ..SyntheticTaskSpec::default()
    })
    .unwrap()
}

fn tiny_config(method: Method, lambda: f64) -> VatConfig {
    VatConfig {
        method,
        lambda,
        batch_size: 4,
        max_epochs: 3,
        patience: 10,
        model: tiny_spec(),
        ..VatConfig::default()
    }
}

#[test]
fn stats_lengths_of_default_model() {
    let spec = ModelSpec::default();
    let early = VatModel::new(spec.clone(), TaskKind::Binary, Method::VatEarly).unwrap();
    let late = VatModel::new(spec, TaskKind::Binary, Method::VatLate).unwrap();
    assert_eq!(early.stats_len(), 112);
    assert_eq!(late.stats_len(), 64);
}

#[test]
fn constant_activations_have_zero_std() {
    let block = Tensor::full(&[2, 3, 4, 4], 1.5);
    let stats = feature_stats(&[block], Aggregation::Early).unwrap();
    assert_eq!(stats.len(), 2);
    for s in &stats {
        assert_eq!(s.to_vec(), vec![1.5, 1.5, 1.5, 0.0, 0.0, 0.0]);
    }
}

#[test]
fn late_stats_use_only_the_last_block() {
    let a = Tensor::full(&[1, 2, 4, 4], 7.0);
    let b = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let s = feature_stats(&[a, b], Aggregation::Late).unwrap();
    let v = s[0].to_vec();
    assert_eq!(v.len(), 2);
    assert!((v[0] - 2.5).abs() < 1e-15);
    assert!((v[1] - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
}

#[test]
fn feature_stats_are_differentiable() {
    let x = Tensor::new(
        vec![2, 2, 4, 4],
        (0..64)
            .map(|i| ((i * 7) % 64) as f64 * 0.05 - 1.0)
            .collect(),
    )
    .unwrap();
    let err = grad_check(
        |t, x| {
            let pooled = t.max_pool2(x)?;
            let s = feature_stats_on_tape(t, &[x, pooled], Aggregation::Early)?;
            let w = t.constant(Tensor::new(
                vec![2, 8],
                (0..16).map(|i| (i as f64 * 0.37).sin()).collect(),
            )?);
            let p = t.mul(s, w)?;
            Ok(t.sum(p))
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn bce_of_discriminator_gradcheck_wrt_encoder_activations() {
    let model = VatModel::new(tiny_spec(), TaskKind::Binary, Method::VatLate).unwrap();
    let params = model.init_params(3).unwrap();
    let acts = Tensor::new(
        vec![2, 3, 2, 2],
        (0..24).map(|i| 0.2 + ((i * 5) % 7) as f64 * 0.15).collect(),
    )
    .unwrap();
    let t_a = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    // The reversed-gradient layers flip the sign; a second reversal per
    // branch restores the plain derivative for the finite-difference oracle.
    let err = grad_check(
        |t, x| {
            let x = t.grl(x);
            let a = t.narrow(x, 0, 0, 1)?;
            let b = t.narrow(x, 0, 1, 1)?;
            let sa = feature_stats_on_tape(t, &[a], Aggregation::Late)?;
            let sb = feature_stats_on_tape(t, &[b], Aggregation::Late)?;
            let p = model.discriminate(t, &params, sa, sb)?;
            nn::bce(t, p, &t_a)
        },
        &acts,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn zeroed_output_layer_gives_one_half() {
    let model = VatModel::new(tiny_spec(), TaskKind::Binary, Method::VatEarly).unwrap();
    let mut params = model.init_params(0).unwrap();
    for id in ["disc.out.weight", "disc.out.bias"] {
        let p = params.get_mut(id).unwrap();
        p.value = Tensor::zeros(p.value.shape());
    }
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::full(&[3, model.stats_len()], 0.3));
    let p = model.discriminate(&mut tape, &params, s, s).unwrap();
    assert_eq!(tape.value(p).data(), &[0.5, 0.5, 0.5]);
}

#[test]
fn discriminate_rejects_wrong_stats_length() {
    let model = VatModel::new(tiny_spec(), TaskKind::Binary, Method::VatEarly).unwrap();
    let params = model.init_params(0).unwrap();
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::zeros(&[2, model.stats_len() + 1]));
    assert!(matches!(
        model.discriminate(&mut tape, &params, s, s),
        Err(Error::Dimension { .. })
    ));
}

fn pair_grads(model: &VatModel, params: &ParamStore, reversed: bool) -> Vec<(String, Vec<f64>)> {
    let mut store = params.clone();
    let mut tape = Tape::new();
    let img = Tensor::new(
        vec![1, 8, 8],
        (0..64).map(|i| ((i * 13) % 17) as f64 / 17.0).collect(),
    )
    .unwrap();
    let x = model.input(&mut tape, &[&img, &img]).unwrap();
    let enc = model.encode(&mut tape, &store, x).unwrap();
    let s = feature_stats_on_tape(&mut tape, &enc.blocks, model.aggregation).unwrap();
    let out = if reversed {
        model.discriminate(&mut tape, &store, s, s).unwrap()
    } else {
        let mut h = tape.concat(&[s, s], 1).unwrap();
        for layer in &model.discriminator {
            h = layer.forward(&mut tape, &store, h).unwrap();
        }
        h
    };
    let loss = nn::bce(&mut tape, out, &Tensor::full(&[2, 1], 1.0)).unwrap();
    let g = tape.backward(loss).unwrap();
    store.zero_grad();
    store.accumulate(&tape, &g);
    store
        .iter()
        .filter(|p| p.id.starts_with("encoder.") || p.id.starts_with("disc."))
        .map(|p| (p.id.clone(), p.grad.data().to_vec()))
        .collect()
}

#[test]
fn reversal_flips_encoder_gradients_only() {
    let model = VatModel::new(tiny_spec(), TaskKind::Binary, Method::VatEarly).unwrap();
    let params = model.init_params(5).unwrap();
    let with = pair_grads(&model, &params, true);
    let without = pair_grads(&model, &params, false);
    assert_eq!(with.len(), without.len());
    for ((id, a), (_, b)) in with.iter().zip(&without) {
        let sign = if id.starts_with("encoder.") {
            -1.0
        } else {
            1.0
        };
        assert!(a.iter().any(|g| *g != 0.0), "{id}");
        for (ga, gb) in a.iter().zip(b) {
            assert_eq!(*ga, sign * gb, "{id}");
        }
    }
}

#[test]
fn total_loss_examples() {
    let mut tape = Tape::new();
    let main = tape.constant(Tensor::scalar(0.5));
    let aux = tape.constant(Tensor::scalar(std::f64::consts::LN_2));
    let total = vat_total_loss(&mut tape, main, aux, 0.1).unwrap();
    assert!((tape.value(total).item() - (0.5 + 0.1 * std::f64::consts::LN_2)).abs() < 1e-15);
    let zero = vat_total_loss(&mut tape, main, aux, 0.0).unwrap();
    assert_eq!(tape.value(zero).item(), 0.5);
    assert!(matches!(
        vat_total_loss(&mut tape, main, aux, -0.1),
        Err(Error::Contract(_))
    ));
}

#[test]
fn config_validation() {
    assert!(VatConfig::default().validate().is_ok());
    let bad = [
        VatConfig {
            lambda: -1.0,
            ..VatConfig::default()
        },
        VatConfig {
            lambda: f64::NAN,
            ..VatConfig::default()
        },
        VatConfig {
            method: Method::Baseline,
            lambda: 0.1,
            ..VatConfig::default()
        },
        VatConfig {
            patience: 0,
            ..VatConfig::default()
        },
        VatConfig {
            batch_size: 0,
            ..VatConfig::default()
        },
        VatConfig {
            max_epochs: 0,
            ..VatConfig::default()
        },
    ];
    for c in bad {
        assert!(c.validate().is_err(), "{c:?}");
    }
}

#[test]
fn method_names_round_trip() {
    for m in [Method::Baseline, Method::VatEarly, Method::VatLate] {
        assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
    }
    assert!("vat".parse::<Method>().is_err());
}

#[test]
fn one_epoch_gives_one_record() {
    let split = tiny_split(1);
    let config = VatConfig {
        max_epochs: 1,
        ..tiny_config(Method::VatEarly, 0.1)
    };
    let result = fit(&split, &config).unwrap();
    assert_eq!(result.records.len(), 1);
    let r = &result.records[0];
    assert_eq!(r.epoch, 1);
    let aux = r.aux_bce.unwrap();
    assert!((r.total_loss - (r.train_loss + 0.1 * aux)).abs() < 1e-12);
}

#[test]
fn zero_lambda_matches_baseline_trajectory() {
    let split = tiny_split(2);
    let base = fit(&split, &tiny_config(Method::Baseline, 0.0)).unwrap();
    let vat = fit(&split, &tiny_config(Method::VatEarly, 0.0)).unwrap();
    assert_eq!(base.records.len(), vat.records.len());
    for (b, v) in base.records.iter().zip(&vat.records) {
        assert_eq!(b.train_loss, v.train_loss);
        assert_eq!(b.val_metric, v.val_metric);
        assert_eq!(b.feature_gap, v.feature_gap);
    }
    for p in base.state.params.iter() {
        assert_eq!(
            p.value,
            vat.state.params.get(&p.id).unwrap().value,
            "{}",
            p.id
        );
    }
}

#[test]
fn siamese_branches_share_one_parameter_set() {
    let split = tiny_split(3);
    let config = tiny_config(Method::VatEarly, 0.5);
    let model = VatModel::new(config.model.clone(), config.task, config.method).unwrap();
    let mut state = TrainState::new(model.init_params(0).unwrap(), &config);
    let before = state.params.len();
    let mut rng = crate::rng::stream(0, crate::rng::Stream::AuxSampling);
    let batch = &split.train[..4];
    let aux: Vec<AuxSample> = (0..4)
        .map(|i| sample_auxiliary(i, &split.train, &split.pre, &mut rng).unwrap())
        .collect();
    train_step(&model, &mut state, batch, &aux, &config).unwrap();
    assert_eq!(state.params.len(), before);
    assert!(state.params.iter().all(|p| !p.id.contains("aux")));
}

#[test]
fn train_step_descends_on_a_fixed_batch() {
    let split = tiny_split(4);
    let config = VatConfig {
        adam: nn::AdamConfig {
            lr: 1e-3,
            ..nn::AdamConfig::default()
        },
        ..tiny_config(Method::Baseline, 0.0)
    };
    let model = VatModel::new(config.model.clone(), config.task, config.method).unwrap();
    let batch = &split.train[..4];
    let mut decreased = 0;
    for seed in 0..20 {
        let mut state = TrainState::new(model.init_params(seed).unwrap(), &config);
        let first = train_step(&model, &mut state, batch, &[], &config)
            .unwrap()
            .main;
        let second = train_step(&model, &mut state, batch, &[], &config)
            .unwrap()
            .main;
        decreased += usize::from(second < first);
    }
    assert!(decreased >= 18, "{decreased}/20");
}

#[test]
fn whole_model_gradcheck() {
    let split = tiny_split(5);
    let model = VatModel::new(tiny_spec(), TaskKind::Binary, Method::Baseline).unwrap();
    let params = model.init_params(9).unwrap();
    let images: Vec<&Tensor> = split.train[..2].iter().map(|s| &s.image).collect();
    let y = Tensor::new(
        vec![2, 1],
        split.train[..2].iter().map(|s| s.label as f64).collect(),
    )
    .unwrap();
    let err = grad_check_params(
        &params,
        |t, p| {
            let x = model.input(t, &images)?;
            let enc = model.encode(t, p, x)?;
            nn::bce(t, enc.prediction, &y)
        },
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn fit_requires_a_pool_for_vat() {
    let mut split = tiny_split(6);
    split.pre.clear();
    assert!(matches!(
        fit(&split, &tiny_config(Method::VatEarly, 0.1)),
        Err(Error::Config(_))
    ));
    assert!(fit(&split, &tiny_config(Method::Baseline, 0.0)).is_ok());
}
