//! Fully connected network from normalized action units to muscle and jaw
//! activations: 17 inputs, four hidden ReLU layers of 100, 56 linear
//! outputs. Trained with ADAM on mean squared error; outputs are clamped to
//! [0, 1] only at inference.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aubridge::{NormalizationTable, NUM_AUS};
use crate::error::{Error, Result};

pub const LAYER_DIMS: [usize; 6] = [NUM_AUS, 100, 100, 100, 100, NUM_OUTPUTS];

/// Weight parameters of the standard network, biases excluded.
pub const NUM_WEIGHTS: usize = 37_300;
pub const NUM_BIASES: usize = 456;

/// 52 muscles, jaw rotation, slide, twist and one auxiliary output.
pub const NUM_OUTPUTS: usize = 56;

const MAGIC: &[u8; 8] = b"NFACEMLP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 32,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.epochs > 0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }
}

/// One training example: normalized AUs and the activations that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPair {
    pub aus: Vec<f64>,
    pub activations: Vec<f64>,
}

impl DatasetPair {
    pub fn validate(&self, inputs: usize, outputs: usize) -> Result<()> {
        if self.aus.len() != inputs {
            return Err(Error::Dimension {
                expected: inputs,
                got: self.aus.len(),
            });
        }
        if self.activations.len() != outputs {
            return Err(Error::Dimension {
                expected: outputs,
                got: self.activations.len(),
            });
        }
        if self.aus.iter().chain(&self.activations).any(|x| !x.is_finite()) {
            return Err(Error::Data("dataset pair has non-finite values".into()));
        }
        Ok(())
    }
}

/// Addresses one parameter: a weight `(row, col)` or a bias `row` of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamRef {
    pub layer: usize,
    pub bias: bool,
    pub row: usize,
    pub col: usize,
}

/// Loss gradient with the same shapes as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

impl Gradient {
    pub fn get(&self, p: ParamRef) -> f64 {
        if p.bias {
            self.biases[p.layer][p.row]
        } else {
            self.weights[p.layer][(p.row, p.col)]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean squared error over the whole dataset after each epoch.
    pub loss_history: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.loss_history.last().copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    seed: u64,
    /// Input normalization used in training, carried with the model.
    pub normalization: Option<NormalizationTable>,
}

/// The standard network, He-uniform initialized from `seed`.
pub fn init_mlp(seed: u64) -> Mlp {
    let m = Mlp::new(&LAYER_DIMS, seed).expect("standard dims are valid");
    assert_eq!(m.weight_count(), NUM_WEIGHTS);
    m
}

impl Mlp {
    /// Network with arbitrary layer sizes. Weights are uniform in
    /// ±√(6 / fan_in), biases zero.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let lim = (6.0 / w[0] as f64).sqrt();
            // Row-major fill so the draw order matches the file layout.
            let mut m = DMatrix::zeros(w[1], w[0]);
            for r in 0..w[1] {
                for c in 0..w[0] {
                    m[(r, c)] = rng.gen_range(-lim..lim);
                }
            }
            weights.push(m);
            biases.push(DVector::zeros(w[1]));
        }
        Ok(Mlp {
            dims: dims.to_vec(),
            weights,
            biases,
            seed,
            normalization: None,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn weight_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    pub fn bias_count(&self) -> usize {
        self.biases.iter().map(|b| b.len()).sum()
    }

    pub fn inputs(&self) -> usize {
        self.dims[0]
    }

    pub fn outputs(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn param(&self, p: ParamRef) -> f64 {
        if p.bias {
            self.biases[p.layer][p.row]
        } else {
            self.weights[p.layer][(p.row, p.col)]
        }
    }

    pub fn set_param(&mut self, p: ParamRef, v: f64) {
        if p.bias {
            self.biases[p.layer][p.row] = v;
        } else {
            self.weights[p.layer][(p.row, p.col)] = v;
        }
    }

    /// Sets every weight and bias to zero.
    pub fn zeroed(mut self) -> Self {
        self.weights.iter_mut().for_each(|w| w.fill(0.0));
        self.biases.iter_mut().for_each(|b| b.fill(0.0));
        self
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.inputs() {
            return Err(Error::Dimension {
                expected: self.inputs(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("network input is not finite".into()));
        }
        Ok(())
    }

    /// Pre-activations of every layer for a batch stored column-wise.
    fn preactivations(&self, x: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let mut zs: Vec<DMatrix<f64>> = Vec::with_capacity(self.weights.len());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = if l == 0 { w * x } else { w * zs[l - 1].map(relu) };
            for mut col in z.column_iter_mut() {
                col += b;
            }
            zs.push(z);
        }
        zs
    }

    /// Raw (training-mode) outputs for a batch stored column-wise.
    pub fn forward_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.inputs() {
            return Err(Error::Dimension {
                expected: self.inputs(),
                got: x.nrows(),
            });
        }
        Ok(self.preactivations(x).pop().expect("at least one layer"))
    }

    /// Raw (training-mode) output, unclamped.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let out = self.forward_batch(&DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok(out.as_slice().to_vec())
    }

    /// Inference output, clamped to [0, 1].
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    /// Smallest |pre-activation| over the hidden units, used to keep
    /// finite-difference probes away from ReLU kinks.
    pub fn min_hidden_margin(&self, x: &DMatrix<f64>) -> f64 {
        let zs = self.preactivations(x);
        zs[..zs.len() - 1]
            .iter()
            .flat_map(|z| z.iter())
            .fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }

    /// Mean squared error over all outputs of a column-wise batch.
    pub fn loss(&self, x: &DMatrix<f64>, t: &DMatrix<f64>) -> Result<f64> {
        let y = self.forward_batch(x)?;
        check_targets(&y, t)?;
        Ok((y - t).norm_squared() / t.len() as f64)
    }

    /// Loss and its gradient by backpropagation.
    pub fn loss_and_gradient(&self, x: &DMatrix<f64>, t: &DMatrix<f64>) -> Result<(f64, Gradient)> {
        if x.nrows() != self.inputs() {
            return Err(Error::Dimension {
                expected: self.inputs(),
                got: x.nrows(),
            });
        }
        let zs = self.preactivations(x);
        let y = zs.last().unwrap();
        check_targets(y, t)?;
        let n = t.len() as f64;
        let diff = y - t;
        let loss = diff.norm_squared() / n;
        let mut dz = diff * (2.0 / n);
        let layers = self.weights.len();
        let mut gw = vec![DMatrix::zeros(0, 0); layers];
        let mut gb = vec![DVector::zeros(0); layers];
        for l in (0..layers).rev() {
            let a_prev = if l == 0 { x.clone() } else { zs[l - 1].map(relu) };
            gw[l] = &dz * a_prev.transpose();
            gb[l] = DVector::from_iterator(dz.nrows(), dz.row_iter().map(|r| r.sum()));
            if l > 0 {
                let mut da = self.weights[l].transpose() * &dz;
                da.zip_apply(&zs[l - 1], |d, z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
                dz = da;
            }
        }
        Ok((
            loss,
            Gradient {
                weights: gw,
                biases: gb,
            },
        ))
    }

    /// Central-difference derivative of the loss along one parameter.
    pub fn numeric_derivative(&self, x: &DMatrix<f64>, t: &DMatrix<f64>, p: ParamRef, h: f64) -> Result<f64> {
        let mut m = self.clone();
        let v = self.param(p);
        m.set_param(p, v + h);
        let up = m.loss(x, t)?;
        m.set_param(p, v - h);
        let down = m.loss(x, t)?;
        Ok((up - down) / (2.0 * h))
    }

    /// ADAM training on shuffled mini-batches. Shuffling is seeded by
    /// `config.seed`, so the loss history is reproducible.
    pub fn train(&mut self, data: &[DatasetPair], config: &TrainConfig) -> Result<TrainReport> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        for d in data {
            d.validate(self.inputs(), self.outputs())?;
        }
        let all_x = DMatrix::from_fn(self.inputs(), data.len(), |r, c| data[c].aus[r]);
        let all_t = DMatrix::from_fn(self.outputs(), data.len(), |r, c| data[c].activations[r]);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut adam = Adam::new(self, config);
        let mut history = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            order.shuffle(&mut rng);
            for (batch, idx) in order.chunks(config.batch_size).enumerate() {
                let x = all_x.select_columns(idx);
                let t = all_t.select_columns(idx);
                let (loss, grad) = self.loss_and_gradient(&x, &t)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch, loss });
                }
                adam.step(self, &grad);
            }
            let mse = self.loss(&all_x, &all_t)?;
            if !mse.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: usize::MAX,
                    loss: mse,
                });
            }
            log::info!("epoch {:>3}: training MSE {mse:.6}", epoch + 1);
            history.push(mse);
        }
        Ok(TrainReport { loss_history: history })
    }

    /// Serialized form: magic, version, seed, layer sizes, row-major weights
    /// and biases as little-endian f64, optional normalization table, then a
    /// SHA-256 of everything before it.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    out.extend_from_slice(&w[(r, c)].to_le_bytes());
                }
            }
            for v in b.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &self.normalization {
            Some(t) => {
                out.push(1);
                for v in t.min.iter().chain(&t.max) {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => out.push(0),
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |what: &str| Error::Data(format!("model file: {what}"));
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a network file"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader {
            buf: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        if !(2..=64).contains(&n) {
            return Err(bad("implausible layer count"));
        }
        let dims = (0..n)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut m = Mlp::new(&dims, seed)?;
        for (w, b) in m.weights.iter_mut().zip(m.biases.iter_mut()) {
            for row in 0..w.nrows() {
                for col in 0..w.ncols() {
                    w[(row, col)] = r.f64()?;
                }
            }
            for v in b.iter_mut() {
                *v = r.f64()?;
            }
        }
        m.normalization = match r.u8()? {
            0 => None,
            1 => {
                let mut t = NormalizationTable::raw_scale();
                for v in t.min.iter_mut().chain(t.max.iter_mut()) {
                    *v = r.f64()?;
                }
                t.validate()?;
                Some(t)
            }
            _ => return Err(bad("bad normalization flag")),
        };
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(m)
    }
}

/// Writes a model file.
pub fn save_model(model: &Mlp, path: &Path) -> Result<()> {
    std::fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a model file and checks it has the standard layer sizes.
pub fn load_model(path: &Path) -> Result<Mlp> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let m = Mlp::from_bytes(&bytes)?;
    if m.dims != LAYER_DIMS {
        return Err(Error::Data(format!(
            "model layer sizes {:?} differ from {:?}",
            m.dims, LAYER_DIMS
        )));
    }
    Ok(m)
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn check_targets(y: &DMatrix<f64>, t: &DMatrix<f64>) -> Result<()> {
    if y.shape() != t.shape() {
        return Err(Error::Dimension {
            expected: y.len(),
            got: t.len(),
        });
    }
    Ok(())
}

struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Gradient,
    v: Gradient,
}

impl Adam {
    fn new(model: &Mlp, c: &TrainConfig) -> Self {
        let zeros = Gradient {
            weights: model
                .weights
                .iter()
                .map(|w| DMatrix::zeros(w.nrows(), w.ncols()))
                .collect(),
            biases: model.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        };
        Adam {
            lr: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.epsilon,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, model: &mut Mlp, g: &Gradient) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        };
        for l in 0..model.weights.len() {
            update(
                model.weights[l].as_mut_slice(),
                g.weights[l].as_slice(),
                self.m.weights[l].as_mut_slice(),
                self.v.weights[l].as_mut_slice(),
            );
            update(
                model.biases[l].as_mut_slice(),
                g.biases[l].as_slice(),
                self.m.biases[l].as_mut_slice(),
                self.v.biases[l].as_mut_slice(),
            );
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let s = self
            .buf
            .get(self.pos..self.pos + N)
            .ok_or_else(|| Error::Data("model file: truncated".into()))?;
        self.pos += N;
        Ok(s.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

#[cfg(test)]
mod tests;
