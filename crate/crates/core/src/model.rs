//! Teacher and student embedding models.
//!
//! A model is an MLP feature extractor followed by one or two linear
//! classifier heads. The optional auxiliary head has the teacher's class
//! width and is only used as a training-time target for unlabeled data;
//! retrieval uses the extractor output.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub seed: u64,
}

impl ExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("hidden_dims must be non-empty".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.embed_dim < 2 {
            return Err(Error::Config(format!(
                "embed_dim must be at least 2, got {}",
                self.embed_dim
            )));
        }
        Ok(())
    }
}

/// Affine layer `y = x·W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let bound = (gain / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, w).expect("positive dims"),
            bias: Tensor::zeros(vec![fan_out]).expect("positive dims"),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundLinear {
        BoundLinear {
            weight: tape.leaf(self.weight.clone().with_requires_grad(trainable)),
            bias: tape.leaf(self.bias.clone().with_requires_grad(trainable)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add(y, self.bias)
    }
}

/// Parameters of a model registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub extractor: Vec<BoundLinear>,
    pub main: BoundLinear,
    pub aux: Option<BoundLinear>,
}

impl BoundModel {
    /// Tape handles in the same order as [`Model::params`].
    pub fn vars(&self) -> Vec<Var> {
        self.extractor
            .iter()
            .chain(std::iter::once(&self.main))
            .chain(self.aux.iter())
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }

    /// Gradients aligned with [`Model::params`]; missing entries are zero.
    pub fn grads(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars()
            .into_iter()
            .map(|v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
            })
            .collect()
    }
}

/// Tape outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub embedding: Var,
    pub logits_main: Var,
    pub logits_aux: Option<Var>,
}

/// Plain tensors from an inference pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub embedding: Tensor,
    pub logits_main: Tensor,
    pub logits_aux: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    config: ExtractorConfig,
    extractor: Vec<Linear>,
    main: Linear,
    aux: Option<Linear>,
    frozen: bool,
}

/// Builds a model with deterministic fan-in scaled uniform weights and
/// zero biases. The aux head exists iff `k_aux` is given.
pub fn build_model(cfg: &ExtractorConfig, k_main: usize, k_aux: Option<usize>) -> Result<Model> {
    cfg.validate()?;
    if k_main < 2 {
        return Err(Error::Config(format!("k_main must be at least 2, got {k_main}")));
    }
    if let Some(k) = k_aux {
        if k < 2 {
            return Err(Error::Config(format!("k_aux must be at least 2, got {k}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut extractor = Vec::with_capacity(cfg.hidden_dims.len() + 1);
    let mut fan_in = cfg.input_dim;
    for &h in &cfg.hidden_dims {
        extractor.push(Linear::init(fan_in, h, 6.0, &mut rng));
        fan_in = h;
    }
    extractor.push(Linear::init(fan_in, cfg.embed_dim, 3.0, &mut rng));
    let main = Linear::init(cfg.embed_dim, k_main, 3.0, &mut rng);
    let aux = k_aux.map(|k| Linear::init(cfg.embed_dim, k, 3.0, &mut rng));
    Ok(Model {
        config: cfg.clone(),
        extractor,
        main,
        aux,
        frozen: false,
    })
}

impl Model {
    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn k_main(&self) -> usize {
        self.main.out_dim()
    }

    pub fn k_aux(&self) -> Option<usize> {
        self.aux.as_ref().map(Linear::out_dim)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks the model frozen: optimizers leave it untouched and binding
    /// never requests gradients. Forward outputs are unaffected.
    pub fn freeze(mut self) -> Model {
        self.frozen = true;
        self
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.extractor
            .iter_mut()
            .chain(std::iter::once(&mut self.main))
            .chain(self.aux.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    fn layers(&self) -> impl Iterator<Item = &Linear> {
        self.extractor
            .iter()
            .chain(std::iter::once(&self.main))
            .chain(self.aux.iter())
    }

    /// Registers parameters on `tape`; they require gradients only when
    /// `trainable` is set and the model is not frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let t = trainable && !self.frozen;
        BoundModel {
            extractor: self.extractor.iter().map(|l| l.bind(tape, t)).collect(),
            main: self.main.bind(tape, t),
            aux: self.aux.as_ref().map(|l| l.bind(tape, t)),
        }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        match tape.value(x).shape() {
            [_, d] if *d == self.config.input_dim => Ok(()),
            s => Err(Error::shape(
                "forward",
                format!("expected [B, {}], got {s:?}", self.config.input_dim),
            )),
        }
    }

    /// Extractor output for `x: [B, input_dim]`.
    pub fn extract(&self, tape: &mut Tape, bound: &BoundModel, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        let n = bound.extractor.len();
        let mut h = x;
        for (i, layer) in bound.extractor.iter().enumerate() {
            h = layer.apply(tape, h)?;
            if i + 1 < n {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn main_logits(&self, tape: &mut Tape, bound: &BoundModel, emb: Var) -> Result<Var> {
        bound.main.apply(tape, emb)
    }

    pub fn aux_logits(&self, tape: &mut Tape, bound: &BoundModel, emb: Var) -> Result<Var> {
        bound
            .aux
            .as_ref()
            .ok_or_else(|| Error::Usage("model has no auxiliary classifier".into()))?
            .apply(tape, emb)
    }

    pub fn forward_on(&self, tape: &mut Tape, bound: &BoundModel, x: Var) -> Result<ForwardVars> {
        let embedding = self.extract(tape, bound, x)?;
        let logits_main = self.main_logits(tape, bound, embedding)?;
        let logits_aux = match bound.aux {
            Some(_) => Some(self.aux_logits(tape, bound, embedding)?),
            None => None,
        };
        Ok(ForwardVars {
            embedding,
            logits_main,
            logits_aux,
        })
    }

    /// Inference pass on a `[B, input_dim]` batch.
    pub fn forward(&self, x: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward_on(&mut tape, &bound, xv)?;
        Ok(ForwardOutput {
            embedding: tape.value(out.embedding).clone(),
            logits_main: tape.value(out.logits_main).clone(),
            logits_aux: out.logits_aux.map(|v| tape.value(v).clone()),
        })
    }

    /// Extractor output only, row per sample.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let e = self.extract(&mut tape, &bound, xv)?;
        Ok(tape.value(e).clone())
    }

    /// Applies `update(param, grad)` to every parameter unless frozen.
    pub(crate) fn update_params(&mut self, grads: &[Vec<f64>], mut update: impl FnMut(usize, &mut [f64], &[f64])) {
        if self.frozen {
            return;
        }
        for (i, (p, g)) in self.params_mut().into_iter().zip(grads).enumerate() {
            update(i, p.data_mut(), g);
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        let json = serde_json::to_string(&ckpt)?;
        crate::io::write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Usage(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        ckpt.model.config.validate()?;
        Ok(ckpt.model)
    }
}

const CHECKPOINT_FORMAT: &str = "sskd-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: Model,
}

/// L2-normalized copy of `v`; the zero vector is rejected.
pub fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Numeric(format!("cannot normalize vector of norm {norm}")));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Retrieval feature with its normalized copy.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl Embedding {
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        let normalized = normalize(&vector)?;
        Ok(Self { vector, normalized })
    }
}
