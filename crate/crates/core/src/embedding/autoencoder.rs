use super::{EmbeddingMatrix, EmbeddingSource};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, ArchSpec};
use crate::optim::Adam;
use crate::rng::derive;
use crate::{parallel, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

/// Autoencoder family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoencoderKind {
    /// The mnist2 conv stack plus a dense bottleneck; transposed-conv
    /// decoder. Needs 28×28 inputs.
    #[default]
    Conv,
    /// One linear layer each way.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub latent_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam step size.
    pub learning_rate: f64,
    pub seed: u64,
    pub kind: AutoencoderKind,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            latent_dim: 32,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            kind: AutoencoderKind::Conv,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(Error::Parameter(format!("latent dimension {} < 2", self.latent_dim)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Parameter(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Encoder and decoder weights of a trained autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub kind: AutoencoderKind,
    pub input_shape: [usize; 3],
    pub latent_dim: usize,
    pub encoder: Vec<Tensor>,
    pub decoder: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct TrainedAutoencoder {
    pub model: Autoencoder,
    /// Mean reconstruction error of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Hidden width between the bottleneck and the first transposed conv.
const CONV_HIDDEN: [usize; 3] = [64, 4, 4];

fn conv_arch(input_shape: [usize; 3]) -> ArchSpec {
    ArchSpec {
        input_shape,
        ..ArchSpec::mnist2()
    }
}

impl Autoencoder {
    fn init(kind: AutoencoderKind, input_shape: [usize; 3], d: usize, seed: u64) -> Result<Self> {
        let m: usize = input_shape.iter().product();
        let c = input_shape[0];
        let (enc, dec) = match kind {
            AutoencoderKind::Linear => (vec![vec![m, d], vec![d]], vec![vec![d, m], vec![m]]),
            AutoencoderKind::Conv => {
                if input_shape[1..] != [28, 28] {
                    return Err(Error::Shape(format!(
                        "conv autoencoder needs 28×28 inputs, got {input_shape:?}"
                    )));
                }
                let mut enc = nn::shared_shapes(&conv_arch(input_shape))?;
                let hidden: usize = CONV_HIDDEN.iter().product();
                enc.extend([vec![hidden, d], vec![d]]);
                let dec = vec![
                    vec![d, hidden],
                    vec![hidden],
                    vec![CONV_HIDDEN[0], 32, 5, 5],
                    vec![32],
                    vec![32, c, 8, 8],
                    vec![c],
                ];
                (enc, dec)
            }
        };
        Ok(Autoencoder {
            kind,
            input_shape,
            latent_dim: d,
            encoder: nn::init(&enc, derive(seed, 0)),
            decoder: nn::init(&dec, derive(seed, 1)),
        })
    }

    fn encode(&self, g: &mut Graph, enc: &[Var], x: Var) -> Result<Var> {
        match self.kind {
            AutoencoderKind::Linear => {
                let flat = g.flatten(x)?;
                g.dense(flat, enc[0], enc[1])
            }
            AutoencoderKind::Conv => {
                let h = nn::encode(g, &conv_arch(self.input_shape), &enc[..4], x, false, 0)?;
                g.dense(h, enc[4], enc[5])
            }
        }
    }

    fn decode(&self, g: &mut Graph, dec: &[Var], z: Var) -> Result<Var> {
        let n = g.shape(z)[0];
        let [c, h, w] = self.input_shape;
        match self.kind {
            AutoencoderKind::Linear => {
                let y = g.dense(z, dec[0], dec[1])?;
                g.reshape(y, &[n, c, h, w])
            }
            AutoencoderKind::Conv => {
                let y = g.dense(z, dec[0], dec[1])?;
                let y = g.relu(y);
                let [hc, hh, hw] = CONV_HIDDEN;
                let y = g.reshape(y, &[n, hc, hh, hw])?;
                let y = g.conv2d_transpose(y, dec[2], 2, 0, (11, 11))?;
                let y = g.add_bias(y, dec[3])?;
                let y = g.relu(y);
                let y = g.conv2d_transpose(y, dec[4], 2, 0, (h, w))?;
                g.add_bias(y, dec[5])
            }
        }
    }

    /// Latent codes `[N, d]` for a `[N, C, H, W]` batch.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let enc: Vec<Var> = self.encoder.iter().map(|p| g.constant(p.clone())).collect();
        let xv = g.constant(x.clone());
        let z = self.encode(&mut g, &enc, xv)?;
        Ok(g.value(z).clone())
    }

    /// Mean squared reconstruction error on a batch.
    pub fn reconstruction_loss(&self, x: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let enc: Vec<Var> = self.encoder.iter().map(|p| g.constant(p.clone())).collect();
        let dec: Vec<Var> = self.decoder.iter().map(|p| g.constant(p.clone())).collect();
        let xv = g.constant(x.clone());
        let z = self.encode(&mut g, &enc, xv)?;
        let y = self.decode(&mut g, &dec, z)?;
        let loss = g.mse(y, x)?;
        g.value(loss).item()
    }
}

/// Fits an autoencoder to `data` (labels ignored) by minimizing mean squared
/// reconstruction error with Adam. Examples are reshuffled every epoch.
pub fn train_autoencoder(data: &LabeledDataset, cfg: &AutoencoderConfig) -> Result<TrainedAutoencoder> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("cannot train an autoencoder on an empty dataset".into()));
    }
    let mut model = Autoencoder::init(cfg.kind, data.shape, cfg.latent_dim, cfg.seed)?;
    let n_enc = model.encoder.len();
    let mut params: Vec<Tensor> = model.encoder.iter().chain(&model.decoder).cloned().collect();
    let mut opt = Adam::new(cfg.learning_rate, &params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut crate::rng::rng(derive(cfg.seed, 2 + epoch as u64)));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = data.batch(batch)?;
            let mut g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let xv = g.constant(x.clone());
            let z = model.encode(&mut g, &vars[..n_enc], xv)?;
            let y = model.decode(&mut g, &vars[n_enc..], z)?;
            let loss = g.mse(y, &x)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    episode: epoch,
                    msg: "autoencoder reconstruction loss is not finite".into(),
                });
            }
            total += value * batch.len() as f64;
            let grads: Vec<Tensor> = g
                .grad(loss, &vars, false)?
                .into_iter()
                .zip(&params)
                .map(|(gv, p)| gv.map_or_else(|| Tensor::zeros(p.shape()), |v| g.value(v).clone()))
                .collect();
            opt.step(&mut params, &grads);
        }
        epoch_losses.push(total / data.len() as f64);
    }
    model.decoder = params.split_off(n_enc);
    model.encoder = params;
    Ok(TrainedAutoencoder { model, epoch_losses })
}

/// Rows per encoding batch in [`embed`].
const EMBED_CHUNK: usize = 256;

/// Encodes every example of `data`; row `i` is example `i`.
pub fn embed(data: &LabeledDataset, model: &Autoencoder) -> Result<EmbeddingMatrix> {
    if data.shape != model.input_shape {
        return Err(Error::Shape(format!(
            "data examples are {:?}, encoder expects {:?}",
            data.shape, model.input_shape
        )));
    }
    let parts = parallel::map_chunks(data.len(), EMBED_CHUNK, |range| {
        let idx: Vec<usize> = range.collect();
        model.encode_batch(&data.batch(&idx)?).map(Tensor::into_data)
    });
    let mut rows = Vec::with_capacity(data.len() * model.latent_dim);
    for p in parts {
        rows.extend(p?);
    }
    EmbeddingMatrix::new(data.len(), model.latent_dim, rows, EmbeddingSource::Autoencoder)
}
