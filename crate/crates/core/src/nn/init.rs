use rand::Rng as _;

use super::layers::{Activation, Layer};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::Result;
use crate::rng::{self, Rng, Stream};

/// Registers `layer`'s weight and bias in `store`.
///
/// Weights are drawn uniformly with a fan-scaled bound: He (`√(6/fan_in)`)
/// for relu layers, Glorot (`√(6/(fan_in+fan_out))`) otherwise. Biases start
/// at zero.
pub fn init_layer(layer: &Layer, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
    let (fan_in, fan_out) = layer.spec.init_fans();
    let bound = match layer.spec.activation {
        Activation::Relu => (6.0 / fan_in as f64).sqrt(),
        _ => (6.0 / (fan_in + fan_out) as f64).sqrt(),
    };
    let shape = layer.spec.weight_shape();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    store.insert(layer.weight_id(), Tensor::new(shape, data)?)?;
    store.insert(layer.bias_id(), Tensor::zeros(&[layer.spec.fan_out]))?;
    Ok(())
}

/// Initializes every layer in order from the run's init stream.
pub fn init_params<'a>(
    layers: impl IntoIterator<Item = &'a Layer>,
    seed: u64,
) -> Result<ParamStore> {
    let mut rng = rng::stream(seed, Stream::Init);
    let mut store = ParamStore::new();
    for layer in layers {
        init_layer(layer, &mut store, &mut rng)?;
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerSpec;

    fn dense(fan_in: usize, fan_out: usize) -> Layer {
        Layer::new(
            "d",
            LayerSpec::dense(fan_in, fan_out, Activation::Relu).unwrap(),
        )
    }

    #[test]
    fn seeded_and_distinct() {
        let l = [dense(4, 3)];
        assert_eq!(init_params(&l, 7).unwrap(), init_params(&l, 7).unwrap());
        assert_ne!(
            init_params(&l, 7).unwrap().flat_values(),
            init_params(&l, 8).unwrap().flat_values()
        );
    }

    #[test]
    fn he_std_for_relu_layer() {
        let store = init_params(&[dense(100, 100)], 3).unwrap();
        let w = store.get("d.weight").unwrap().value.data();
        assert_eq!(w.len(), 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64).sqrt();
        let target = (2.0f64 / 100.0).sqrt();
        assert!(
            (std - target).abs() <= 0.2 * target,
            "std {std} vs {target}"
        );
        assert!(store
            .get("d.bias")
            .unwrap()
            .value
            .data()
            .iter()
            .all(|&b| b == 0.0));
    }
}
