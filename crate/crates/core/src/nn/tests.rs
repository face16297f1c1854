use super::*;
use crate::autodiff::{grad_check_params, ParamStore, Tape, Tensor};
use crate::Error;

fn dense(name: &str, fan_in: usize, fan_out: usize, act: Activation) -> Layer {
    Layer::new(name, LayerSpec::dense(fan_in, fan_out, act).unwrap())
}

#[test]
fn dense_zero_and_identity() {
    let layer = dense("d", 3, 3, Activation::Relu);
    let mut store = ParamStore::new();
    store.insert("d.weight", Tensor::zeros(&[3, 3])).unwrap();
    store.insert("d.bias", Tensor::zeros(&[3])).unwrap();
    let x = Tensor::matrix(&[&[1.0, -2.0, 3.0], &[0.5, 0.25, -4.0]]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = layer.forward(&mut tape, &store, xv).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let id = dense("i", 3, 3, Activation::Identity);
    let mut store = ParamStore::new();
    let eye = Tensor::matrix(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]).unwrap();
    store.insert("i.weight", eye).unwrap();
    store.insert("i.bias", Tensor::zeros(&[3])).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = id.forward(&mut tape, &store, xv).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn dense_fan_mismatch() {
    let layer = dense("d", 4, 2, Activation::Relu);
    let store = init_params([&layer], 0).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        layer.forward(&mut tape, &store, x),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn layer_spec_rejects_zero_fans() {
    assert!(LayerSpec::dense(0, 3, Activation::Relu).is_err());
    assert!(LayerSpec::conv_block(1, 0).is_err());
}

#[test]
fn two_layer_mlp_gradcheck() {
    let layers = [
        dense("h", 3, 5, Activation::Sigmoid),
        dense("o", 5, 1, Activation::Sigmoid),
    ];
    let store = init_params(&layers, 11).unwrap();
    let x = Tensor::matrix(&[&[0.2, -1.0, 0.7], &[1.1, 0.3, -0.4]]).unwrap();
    let target = Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap();
    let err = grad_check_params(
        &store,
        |tape, store| {
            let mut h = tape.constant(x.clone());
            for l in &layers {
                h = l.forward(tape, store, h)?;
            }
            bce(tape, h, &target)
        },
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn grl_forward_is_bit_exact_identity() {
    let x = Tensor::vector(vec![0.1, -3.5e-300, f64::MAX, -0.0, 7.25]);
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = grl(&mut tape, v);
    for (a, b) in tape.value(y).data().iter().zip(x.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn grl_negates_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = grl(&mut tape, x);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &Tensor::full(&[3], -1.0));

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = grl(&mut tape, x);
    let y = tape.scale(y, 3.0);
    let s = tape.sum(y);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &Tensor::full(&[3], -3.0));
}

/// Loss = bce(sigmoid(late(early(x)))) with an optional GRL between the
/// two subgraphs; returns (early grads, late grads).
fn split_graph_grads(grl_count: usize) -> (Vec<f64>, Vec<f64>) {
    let early = dense("early", 3, 4, Activation::Sigmoid);
    let late = dense("late", 4, 1, Activation::Sigmoid);
    let mut store = init_params([&early, &late], 5).unwrap();
    let x = Tensor::matrix(&[&[0.3, -0.6, 1.2], &[-1.0, 0.4, 0.9]]).unwrap();
    let target = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let mut h = early.forward(&mut tape, &store, xv).unwrap();
    for _ in 0..grl_count {
        h = grl(&mut tape, h);
    }
    let p = late.forward(&mut tape, &store, h).unwrap();
    let l = bce(&mut tape, p, &target).unwrap();
    let g = tape.backward(l).unwrap();
    store.accumulate(&tape, &g);
    let collect = |prefix: &str| {
        store
            .iter()
            .filter(|p| p.id.starts_with(prefix))
            .flat_map(|p| p.grad.data().to_vec())
            .collect::<Vec<_>>()
    };
    (collect("early"), collect("late"))
}

#[test]
fn grl_insertion_negates_only_upstream() {
    let (e0, l0) = split_graph_grads(0);
    let (e1, l1) = split_graph_grads(1);
    let (e2, l2) = split_graph_grads(2);
    assert_eq!(l0, l1);
    assert!(e0.iter().zip(&e1).all(|(a, b)| *a == -*b));
    for (a, b) in e0.iter().zip(&e2).chain(l0.iter().zip(&l2)) {
        assert!((a - b).abs() <= 1e-12);
    }
}
