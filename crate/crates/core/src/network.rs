//! The model: a fully-connected feature extractor followed by a cosine
//! prototype head.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batch::LabeledBatch;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var, NORM_EPS};

pub const DEFAULT_HIDDEN: [usize; 2] = [128, 128];
pub const DEFAULT_FEATURE_DIM: usize = 64;
pub const DEFAULT_TAU: f64 = 0.1;

const CHECKPOINT_MAGIC: &[u8; 8] = b"ASRPCKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `in × out`
    pub weight: Tensor,
    pub bias: Tensor,
}

/// `input_dim → hidden… → feature_dim` with relu between layers and none
/// after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    sizes: Vec<usize>,
    pub layers: Vec<Linear>,
}

impl FeatureExtractor {
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.sizes)
    }
}

/// Weights plus biases of a size list.
pub fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// One prototype row per class of the fixed universe.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeHead {
    /// `num_classes × feature_dim`
    pub prototypes: Tensor,
    pub tau: f64,
}

impl PrototypeHead {
    pub fn num_classes(&self) -> usize {
        self.prototypes.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub extractor: FeatureExtractor,
    pub head: PrototypeHead,
}

/// Parameters registered on a tape for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct BoundModel {
    layers: Vec<(Var, Var)>,
    pub prototypes: Var,
    tau: f64,
    input_dim: usize,
}

/// Gradients laid out like [`ModelParams`], in layer order then prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
    pub prototypes: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(model: &ModelParams) -> Self {
        ParamGrads {
            layers: model
                .extractor
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weight.numel()], vec![0.0; l.bias.numel()]))
                .collect(),
            prototypes: vec![0.0; model.head.prototypes.numel()],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .chain(std::iter::once(self.prototypes.as_slice()))
    }

    pub fn global_norm(&self) -> f64 {
        self.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect()
}

/// Xavier-uniform weights and prototypes, zero biases.
pub fn init_params(sizes: &[usize], num_classes: usize, tau: f64, seed: u64) -> Result<ModelParams> {
    if sizes.len() < 2 || sizes.contains(&0) || num_classes == 0 {
        return Err(Error::Config(format!(
            "layer sizes must have at least two entries, all ≥ 1 (got {sizes:?}, {num_classes} classes)"
        )));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = sizes
        .windows(2)
        .map(|w| Linear {
            weight: Tensor::new(vec![w[0], w[1]], xavier(&mut rng, w[0], w[1])).unwrap(),
            bias: Tensor::zeros(vec![w[1]]),
        })
        .collect();
    let d = *sizes.last().unwrap();
    let prototypes = Tensor::new(vec![num_classes, d], xavier(&mut rng, d, num_classes)).unwrap();
    Ok(ModelParams {
        extractor: FeatureExtractor {
            sizes: sizes.to_vec(),
            layers,
        },
        head: PrototypeHead { prototypes, tau },
    })
}

/// `[input_dim, hidden…, feature_dim]` for the default backbone.
pub fn default_sizes(input_dim: usize) -> Vec<usize> {
    let mut s = vec![input_dim];
    s.extend(DEFAULT_HIDDEN);
    s.push(DEFAULT_FEATURE_DIM);
    s
}

impl ModelParams {
    pub fn from_parts(sizes: Vec<usize>, layers: Vec<Linear>, prototypes: Tensor, tau: f64) -> Result<Self> {
        if layers.len() + 1 != sizes.len() {
            return Err(Error::Config("layer count does not match size list".into()));
        }
        for (l, w) in layers.iter().zip(sizes.windows(2)) {
            if l.weight.shape() != [w[0], w[1]] || l.bias.numel() != w[1] {
                return Err(Error::Config(format!("layer shape mismatch for sizes {w:?}")));
            }
        }
        if prototypes.shape().len() != 2 || prototypes.shape()[1] != *sizes.last().unwrap() {
            return Err(Error::Config("prototype width must equal feature_dim".into()));
        }
        Ok(ModelParams {
            extractor: FeatureExtractor { sizes, layers },
            head: PrototypeHead { prototypes, tau },
        })
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    /// |θ|: number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.extractor.param_count() + self.head.prototypes.numel()
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let layers = self
            .extractor
            .layers
            .iter()
            .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
            .collect();
        BoundModel {
            layers,
            prototypes: tape.param(self.head.prototypes.clone()),
            tau: self.head.tau,
            input_dim: self.input_dim(),
        }
    }

    /// Parameters in the same order as [`ParamGrads::iter`].
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.extractor
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .chain(std::iter::once(&mut self.head.prototypes))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.extractor
            .layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .chain(std::iter::once(&self.head.prototypes))
    }

    /// Forward of `batch` through the extractor, no gradient tracking.
    pub fn features(&self, batch: &LabeledBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = bound.input(&mut tape, batch)?;
        let f = bound.features(&mut tape, x)?;
        Ok(tape.value(f).clone())
    }

    /// Cosine logits of `batch` over the whole class universe.
    pub fn logits(&self, batch: &LabeledBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let x = bound.input(&mut tape, batch)?;
        let f = bound.features(&mut tape, x)?;
        let z = bound.cosine_logits(&mut tape, f)?;
        Ok(tape.value(z).clone())
    }

    /// Argmax class over all logits; ties go to the lowest class index.
    pub fn predict(&self, batch: &LabeledBatch) -> Result<Vec<usize>> {
        let z = self.logits(batch)?;
        Ok((0..z.rows()).map(|i| argmax(z.row(i))).collect())
    }

    fn bind_frozen(&self, tape: &mut Tape) -> BoundModel {
        let layers = self
            .extractor
            .layers
            .iter()
            .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
            .collect();
        BoundModel {
            layers,
            prototypes: tape.constant(self.head.prototypes.clone()),
            tau: self.head.tau,
            input_dim: self.input_dim(),
        }
    }

    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let sizes = self.extractor.sizes();
        w.write_all(&(sizes.len() as u32).to_le_bytes())?;
        for &s in sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        w.write_all(&(self.num_classes() as u32).to_le_bytes())?;
        w.write_all(&self.head.tau.to_le_bytes())?;
        for t in self.tensors() {
            for &v in t.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut reader = crate::io::ByteReader::new(&mut r);
        let magic = reader.bytes(8)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(reader.error("bad checkpoint magic"));
        }
        let version = reader.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(reader.error(&format!("unsupported checkpoint version {version}")));
        }
        let n = reader.u32()? as usize;
        let sizes = (0..n)
            .map(|_| reader.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let classes = reader.u32()? as usize;
        let tau = reader.f64()?;
        let mut model = init_params(&sizes, classes, tau, 0)?;
        for t in model.tensors_mut() {
            for v in t.data_mut() {
                *v = reader.f32()? as f64;
            }
        }
        Ok(model)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

impl BoundModel {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// Records a batch's inputs as a constant `n × input_dim` matrix.
    pub fn input(&self, tape: &mut Tape, batch: &LabeledBatch) -> Result<Var> {
        if batch.dim != self.input_dim {
            return Err(Error::Dimension(format!(
                "input width {} does not match model input_dim {}",
                batch.dim, self.input_dim
            )));
        }
        Ok(tape.constant(Tensor::new(vec![batch.len(), batch.dim], batch.inputs.clone())?))
    }

    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, w)?;
            h = tape.add_row_bias(z, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// `logit[i][c] = cos(f_i, w_c) / τ`.
    pub fn cosine_logits(&self, tape: &mut Tape, f: Var) -> Result<Var> {
        let fnorm = tape.l2_normalize(f, NORM_EPS)?;
        let wnorm = tape.l2_normalize(self.prototypes, NORM_EPS)?;
        let wt = tape.transpose(wnorm)?;
        let cos = tape.matmul(fnorm, wt)?;
        Ok(tape.scale(cos, 1.0 / self.tau))
    }

    pub fn grads(&self, tape: &Tape) -> ParamGrads {
        let get = |v: Var| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
        };
        ParamGrads {
            layers: self.layers.iter().map(|&(w, b)| (get(w), get(b))).collect(),
            prototypes: get(self.prototypes),
        }
    }
}
