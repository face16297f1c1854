use serde::{Deserialize, Serialize};

use super::{Aggregation, Method};
use crate::autodiff::{ParamStore, Tape, Tensor, Var};
use crate::data::{Sample, TaskKind};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Layer, LayerKind, LayerSpec};

/// Encoder and discriminator sizes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub image_size: usize,
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub disc_hidden: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: vec![8, 16, 32],
            disc_hidden: 64,
        }
    }
}

/// Per-sample channel means and standard deviations of encoder blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStatsVector {
    /// One entry per included block, each with one value per channel.
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
}

impl FeatureStatsVector {
    /// Block by block, means then standard deviations.
    pub fn to_vec(&self) -> Vec<f64> {
        self.means
            .iter()
            .zip(&self.stds)
            .flat_map(|(m, s)| m.iter().chain(s).copied())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.means.iter().chain(&self.stds).map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Statistics of `blocks` (each `B×C×H×W`) on the tape, as a `B×L` matrix.
///
/// Early aggregation uses every block, late aggregation only the last.
pub fn feature_stats_on_tape(tape: &mut Tape, blocks: &[Var], mode: Aggregation) -> Result<Var> {
    let used = match mode {
        Aggregation::Early => blocks,
        Aggregation::Late => blocks
            .last()
            .map(std::slice::from_ref)
            .ok_or_else(|| Error::Contract("feature statistics need at least one block".into()))?,
    };
    if used.is_empty() {
        return Err(Error::Contract(
            "feature statistics need at least one block".into(),
        ));
    }
    let mut parts = Vec::with_capacity(2 * used.len());
    for &b in used {
        let mean = tape.spatial_mean(b)?;
        let var = tape.spatial_var(b)?;
        parts.push(mean);
        parts.push(tape.sqrt(var));
    }
    tape.concat(&parts, 1)
}

/// Statistics of concrete block activations, one vector per sample.
pub fn feature_stats(blocks: &[Tensor], mode: Aggregation) -> Result<Vec<FeatureStatsVector>> {
    let batch = blocks
        .first()
        .map(|b| b.shape()[0])
        .ok_or_else(|| Error::Contract("feature statistics need at least one block".into()))?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = blocks.iter().map(|b| tape.constant(b.clone())).collect();
    for (k, b) in blocks.iter().enumerate() {
        if b.rank() != 4 || b.shape()[0] != batch {
            return Err(Error::dim(
                "feature_stats",
                format!("block {k} has shape {:?}, batch {batch}", b.shape()),
            ));
        }
    }
    let stats = feature_stats_on_tape(&mut tape, &vars, mode)?;
    let widths: Vec<usize> = match mode {
        Aggregation::Early => blocks.iter().map(|b| b.shape()[1]).collect(),
        Aggregation::Late => vec![blocks[blocks.len() - 1].shape()[1]],
    };
    let values = tape.value(stats);
    let row_len = values.shape()[1];
    Ok(values
        .data()
        .chunks(row_len)
        .map(|row| {
            let mut out = FeatureStatsVector {
                means: Vec::new(),
                stds: Vec::new(),
            };
            let mut at = 0;
            for &c in &widths {
                out.means.push(row[at..at + c].to_vec());
                out.stds.push(row[at + c..at + 2 * c].to_vec());
                at += 2 * c;
            }
            out
        })
        .collect())
}

/// Encoder outputs for one batch.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Output of every conv block, in order.
    pub blocks: Vec<Var>,
    /// Task-head output, `B×1`.
    pub prediction: Var,
}

/// The Siamese network: conv encoder, task head and pair discriminator.
///
/// All parameters live in one [`ParamStore`]; both branches of a pair bind
/// the same encoder parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VatModel {
    pub spec: ModelSpec,
    pub task: TaskKind,
    pub aggregation: Aggregation,
    pub encoder: Vec<Layer>,
    pub head: Layer,
    pub discriminator: Vec<Layer>,
}

impl VatModel {
    pub fn new(spec: ModelSpec, task: TaskKind, method: Method) -> Result<Self> {
        if spec.channels.is_empty() {
            return Err(Error::Config("the encoder needs at least one block".into()));
        }
        let mut side = spec.image_size;
        for _ in &spec.channels {
            side /= 2;
        }
        // Late statistics need a spatial variance over the final embedding.
        if side == 0 || side * side < 2 {
            return Err(Error::Config(format!(
                "{} pooling stages leave no 2-pixel map from a {} image",
                spec.channels.len(),
                spec.image_size
            )));
        }
        let mut encoder = Vec::with_capacity(spec.channels.len());
        let mut c_in = 1;
        for (k, &c) in spec.channels.iter().enumerate() {
            encoder.push(Layer::new(
                format!("encoder.block{k}"),
                LayerSpec::conv_block(c_in, c)?,
            ));
            c_in = c;
        }
        let head_act = match task {
            TaskKind::Binary => Activation::Sigmoid,
            TaskKind::Ordinal => Activation::Identity,
        };
        let head = Layer::new(
            "head",
            LayerSpec::new(LayerKind::TaskHead, c_in * side * side, 1, head_act)?,
        );
        let aggregation = method.aggregation().unwrap_or(Aggregation::Early);
        let stats_len = 2 * match aggregation {
            Aggregation::Early => spec.channels.iter().sum::<usize>(),
            Aggregation::Late => c_in,
        };
        let h = spec.disc_hidden;
        let discriminator = vec![
            Layer::new(
                "disc.fc0",
                LayerSpec::new(LayerKind::MlpHead, 2 * stats_len, h, Activation::Relu)?,
            ),
            Layer::new(
                "disc.fc1",
                LayerSpec::new(LayerKind::MlpHead, h, h, Activation::Relu)?,
            ),
            Layer::new(
                "disc.out",
                LayerSpec::new(LayerKind::MlpHead, h, 1, Activation::Sigmoid)?,
            ),
        ];
        Ok(Self {
            spec,
            task,
            aggregation,
            encoder,
            head,
            discriminator,
        })
    }

    /// Every layer in initialization order: encoder, head, discriminator.
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.head))
            .chain(&self.discriminator)
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        nn::init_params(self.layers(), seed)
    }

    /// Length of one sample's statistics under the model's aggregation.
    pub fn stats_len(&self) -> usize {
        self.discriminator[0].spec.fan_in / 2
    }

    /// Stacks images into a `B×1×H×W` constant.
    pub fn input(&self, tape: &mut Tape, images: &[&Tensor]) -> Result<Var> {
        let want = [1, self.spec.image_size, self.spec.image_size];
        if let Some(bad) = images.iter().find(|t| t.shape() != want) {
            return Err(Error::dim(
                "model input",
                format!("expected {want:?} images, got {:?}", bad.shape()),
            ));
        }
        Ok(tape.constant(Tensor::stack(images)?))
    }

    pub fn encode(&self, tape: &mut Tape, params: &ParamStore, x: Var) -> Result<Encoded> {
        let mut blocks = Vec::with_capacity(self.encoder.len());
        let mut h = x;
        for layer in &self.encoder {
            h = layer.forward(tape, params, h)?;
            blocks.push(h);
        }
        let flat = tape.flatten_batch(h)?;
        let prediction = self.head.forward(tape, params, flat)?;
        Ok(Encoded { blocks, prediction })
    }

    /// Probability that the two images behind `stats_tr` and `stats_a`
    /// (both `B×L`) come from the same subset. Both inputs pass through a
    /// reversed-gradient layer before being concatenated.
    pub fn discriminate(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        stats_tr: Var,
        stats_a: Var,
    ) -> Result<Var> {
        let (s1, s2) = (tape.shape(stats_tr).to_vec(), tape.shape(stats_a).to_vec());
        if s1 != s2 || s1.len() != 2 || s1[1] != self.stats_len() {
            return Err(Error::dim(
                "discriminate",
                format!("stats {s1:?} and {s2:?}, expected B×{}", self.stats_len()),
            ));
        }
        let r1 = nn::grl(tape, stats_tr);
        let r2 = nn::grl(tape, stats_a);
        let mut h = tape.concat(&[r1, r2], 1)?;
        for layer in &self.discriminator {
            h = layer.forward(tape, params, h)?;
        }
        Ok(h)
    }

    /// Task predictions and early-aggregation statistics of `samples`,
    /// evaluated in chunks without gradient tracking.
    pub fn evaluate(
        &self,
        params: &ParamStore,
        samples: &[Sample],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        const CHUNK: usize = 64;
        let mut preds = Vec::with_capacity(samples.len());
        let mut stats = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(CHUNK) {
            let mut tape = Tape::new();
            let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
            let x = self.input(&mut tape, &images)?;
            let enc = self.encode(&mut tape, params, x)?;
            let st = feature_stats_on_tape(&mut tape, &enc.blocks, Aggregation::Early)?;
            preds.extend_from_slice(tape.value(enc.prediction).data());
            let row = tape.shape(st)[1];
            stats.extend(tape.value(st).data().chunks(row).map(<[f64]>::to_vec));
        }
        Ok((preds, stats))
    }

    pub fn predict(&self, params: &ParamStore, samples: &[Sample]) -> Result<Vec<f64>> {
        Ok(self.evaluate(params, samples)?.0)
    }

    /// Early-aggregation statistics of every sample, as plain vectors.
    pub fn stats_population(
        &self,
        params: &ParamStore,
        samples: &[Sample],
    ) -> Result<Vec<Vec<f64>>> {
        Ok(self.evaluate(params, samples)?.1)
    }
}

/// `L_main + λ·BCE`.
pub fn vat_total_loss(tape: &mut Tape, main_loss: Var, aux_bce: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Contract(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let weighted = tape.scale(aux_bce, lambda);
    tape.add(main_loss, weighted)
}
