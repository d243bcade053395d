// SPDX-License-Identifier: Apache-2.0

//! Per-point MLP classifier.
//!
//! Input rows are the neighborhood features from [`crate::geom`], standardized with
//! statistics frozen when the base model is trained. Hidden layers use ReLU; the last
//! layer emits one logit per class.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{compute_features, FEATURE_DIM};
use crate::linalg::Matrix;
use crate::losses::argmax;
use crate::pcio::{LabelVec, PointCloud};
use crate::schema::ClassSchema;
use crate::seed;
use crate::{Error, Result};

/// Neighborhood parameters used to turn a cloud into model input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub radius: f64,
    pub k: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec { radius: 1.0, k: 4 }
    }
}

impl FeatureSpec {
    pub fn compute(&self, cloud: &PointCloud) -> Result<Matrix> {
        compute_features(cloud, self.radius, self.k)
    }
}

/// Per-dimension standardization `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        FeatureNorm {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Statistics over all rows of all matrices. Constant columns get std 1.
    pub fn fit<'a>(feats: impl IntoIterator<Item = &'a Matrix>) -> Result<Self> {
        let feats: Vec<&Matrix> = feats.into_iter().collect();
        let dim = feats.first().map_or(0, |m| m.cols());
        if dim == 0 {
            return Err(Error::arg("cannot fit normalization on empty features"));
        }
        let mut sum = vec![0.0; dim];
        let mut count = 0usize;
        for m in &feats {
            for r in m.iter_rows() {
                for (s, v) in sum.iter_mut().zip(r) {
                    *s += v;
                }
            }
            count += m.rows();
        }
        if count == 0 {
            return Err(Error::arg("cannot fit normalization on zero rows"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; dim];
        for m in &feats {
            for r in m.iter_rows() {
                for ((v, x), mu) in var.iter_mut().zip(r).zip(&mean) {
                    *v += (x - mu) * (x - mu);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / count as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(FeatureNorm { mean, std })
    }

    fn apply(&self, feats: &Matrix) -> Matrix {
        let mut out = feats.clone();
        for r in 0..out.rows() {
            for ((v, mu), sd) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - mu) / sd;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn forward_into(&self, x: &Matrix, out: &mut Matrix, relu: bool) {
        for n in 0..x.rows() {
            let xr = x.row(n);
            let orow = out.row_mut(n);
            for (o, dst) in orow.iter_mut().enumerate() {
                let w = self.weight.row(o);
                let mut acc = self.bias[o];
                for (a, b) in w.iter().zip(xr) {
                    acc += a * b;
                }
                *dst = if relu && acc < 0.0 { 0.0 } else { acc };
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub feature: FeatureSpec,
    pub norm: FeatureNorm,
    pub layers: Vec<Layer>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `acts[0]` is the normalized input; `acts[l + 1]` is the output of layer `l`.
    acts: Vec<Matrix>,
    fingerprint: u64,
}

impl ForwardCache {
    /// Output of the last hidden layer (the normalized input if there is none).
    pub fn embedding(&self) -> &Matrix {
        &self.acts[self.acts.len() - 2]
    }

    pub fn logits(&self) -> &Matrix {
        self.acts.last().expect("cache holds logits")
    }
}

/// Gradients (or momentum buffers) with the model's parameter shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_scaled(&b.weight, s);
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += s * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.scale(s);
            l.bias.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.iter()).copied())
    }
}

fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| bound * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

/// He-uniform hidden layers, `1/sqrt(fan_in)` output layer, zero biases.
pub fn init_model(
    input_dim: usize,
    hidden: &[usize],
    out_classes: usize,
    feature: FeatureSpec,
    seed: u64,
) -> Result<Model> {
    if input_dim == 0 || out_classes == 0 || hidden.contains(&0) {
        return Err(Error::arg("layer widths must be positive"));
    }
    let mut rng = seed::stream(seed, "init-model", 0);
    let mut dims = vec![input_dim];
    dims.extend_from_slice(hidden);
    dims.push(out_classes);
    let n_layers = dims.len() - 1;
    let layers = (0..n_layers)
        .map(|l| {
            let fan_in = dims[l] as f64;
            let bound = if l + 1 == n_layers {
                1.0 / fan_in.sqrt()
            } else {
                (6.0 / fan_in).sqrt()
            };
            Layer {
                weight: uniform_matrix(dims[l + 1], dims[l], bound, &mut rng),
                bias: vec![0.0; dims[l + 1]],
            }
        })
        .collect();
    Ok(Model {
        feature,
        norm: FeatureNorm::identity(input_dim),
        layers,
    })
}

/// Scale of the rows added by [`Model::extend_classifier`].
pub const NEW_ROW_SCALE: f64 = 1e-2;

impl Model {
    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().expect("model has layers").out_dim()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.as_slice().len() + l.bias.len())
            .sum()
    }

    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weight.as_slice().iter().chain(l.bias.iter()).copied())
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(f64::is_finite)
    }

    fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325_u64;
        for v in self.params() {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^ (self.num_params() as u64)
    }

    pub fn forward(&self, feats: &Matrix) -> Result<(Matrix, ForwardCache)> {
        if feats.cols() != self.input_dim() {
            return Err(Error::arg(format!(
                "features have {} columns, model expects {}",
                feats.cols(),
                self.input_dim()
            )));
        }
        if !feats.is_finite() {
            return Err(Error::arg("non-finite features"));
        }
        let n = feats.rows();
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(self.norm.apply(feats));
        for (l, layer) in self.layers.iter().enumerate() {
            let relu = l + 1 < self.layers.len();
            let mut out = Matrix::zeros(n, layer.out_dim());
            layer.forward_into(&acts[l], &mut out, relu);
            acts.push(out);
        }
        let logits = acts.last().expect("at least one layer").clone();
        Ok((
            logits,
            ForwardCache {
                acts,
                fingerprint: self.fingerprint(),
            },
        ))
    }

    pub fn logits(&self, feats: &Matrix) -> Result<Matrix> {
        Ok(self.forward(feats)?.0)
    }

    /// Reverse-mode gradients of `Σ grad_logits ⊙ logits` (plus
    /// `Σ grad_embedding ⊙ embedding` when given) with respect to every parameter.
    pub fn backward_with_embedding(
        &self,
        cache: &ForwardCache,
        grad_logits: &Matrix,
        grad_embedding: Option<&Matrix>,
    ) -> Result<Gradients> {
        if cache.fingerprint != self.fingerprint() || cache.acts.len() != self.layers.len() + 1 {
            return Err(Error::arg("forward cache does not belong to this model state"));
        }
        let n = cache.acts[0].rows();
        if grad_logits.shape() != (n, self.num_classes()) {
            return Err(Error::arg("grad_logits shape does not match the logits"));
        }
        if let Some(g) = grad_embedding {
            if g.shape() != cache.embedding().shape() {
                return Err(Error::arg("grad_embedding shape does not match the embedding"));
            }
        }
        let mut grads = Gradients::zeros_like(self);
        let mut g = grad_logits.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &cache.acts[l];
            let gl = &mut grads.layers[l];
            for r in 0..n {
                let gr = g.row(r);
                let xr = input.row(r);
                for (o, &go) in gr.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    gl.bias[o] += go;
                    for (w, x) in gl.weight.row_mut(o).iter_mut().zip(xr) {
                        *w += go * x;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let mut prev = Matrix::zeros(n, layer.in_dim());
            for r in 0..n {
                let gr = g.row(r);
                let pr = prev.row_mut(r);
                for (o, &go) in gr.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    for (p, w) in pr.iter_mut().zip(layer.weight.row(o)) {
                        *p += go * w;
                    }
                }
            }
            if l + 1 == self.layers.len() {
                if let Some(ge) = grad_embedding {
                    prev.add_scaled(ge, 1.0);
                }
            }
            // ReLU of layer l - 1
            for (p, a) in prev.as_mut_slice().iter_mut().zip(input.as_slice()) {
                if *a <= 0.0 {
                    *p = 0.0;
                }
            }
            g = prev;
        }
        Ok(grads)
    }

    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Matrix) -> Result<Gradients> {
        self.backward_with_embedding(cache, grad_logits, None)
    }

    /// A copy with `extra` output classes appended. Existing rows are copied verbatim,
    /// new weights are uniform in `±NEW_ROW_SCALE` and new biases are zero.
    pub fn extend_classifier(&self, extra: usize, seed: u64) -> Result<Model> {
        if extra == 0 {
            return Err(Error::arg("extend_classifier needs extra >= 1"));
        }
        let mut out = self.clone();
        let last = out.layers.last_mut().expect("model has layers");
        let (rows, cols) = last.weight.shape();
        let mut rng = seed::stream(seed, "extend-classifier", 0);
        let fresh = uniform_matrix(extra, cols, NEW_ROW_SCALE, &mut rng);
        last.weight = Matrix::from_vec(rows + extra, cols, {
            let mut d = last.weight.as_slice().to_vec();
            d.extend_from_slice(fresh.as_slice());
            d
        });
        last.bias.extend(std::iter::repeat_n(0.0, extra));
        Ok(out)
    }

    pub fn features(&self, cloud: &PointCloud) -> Result<Matrix> {
        self.feature.compute(cloud)
    }

    /// Per-point argmax over the logits, lower class id on ties.
    pub fn predict_features(&self, feats: &Matrix) -> Result<LabelVec> {
        let logits = self.logits(feats)?;
        Ok(argmax_rows(&logits))
    }

    pub fn predict(&self, cloud: &PointCloud) -> Result<LabelVec> {
        self.predict_features(&self.features(cloud)?)
    }
}

pub fn argmax_rows(logits: &Matrix) -> LabelVec {
    logits.iter_rows().map(|r| argmax(r) as u32).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: SgdConfig,
    pub velocity: Gradients,
}

impl OptimizerState {
    pub fn new(model: &Model, config: SgdConfig) -> Self {
        OptimizerState {
            config,
            velocity: Gradients::zeros_like(model),
        }
    }
}

/// `v <- momentum * v + (grad + wd * w); w <- w - lr * v`
pub fn sgd_step(model: &mut Model, grads: &Gradients, opt: &mut OptimizerState) -> Result<()> {
    if grads.layers.len() != model.layers.len() || opt.velocity.layers.len() != model.layers.len() {
        return Err(Error::arg("gradient / optimizer layout does not match the model"));
    }
    let SgdConfig {
        lr,
        momentum,
        weight_decay,
    } = opt.config;
    let update = |w: &mut [f64], g: &[f64], v: &mut [f64]| {
        for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
            *v = momentum * *v + (g + weight_decay * *w);
            *w -= lr * *v;
        }
    };
    for ((layer, g), v) in model
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(opt.velocity.layers.iter_mut())
    {
        if layer.weight.shape() != g.weight.shape() || layer.weight.shape() != v.weight.shape() {
            return Err(Error::arg("gradient shape does not match the model"));
        }
        update(layer.weight.as_mut_slice(), g.weight.as_slice(), v.weight.as_mut_slice());
        update(&mut layer.bias, &g.bias, &mut v.bias);
    }
    Ok(())
}

// --- checkpoints -----------------------------------------------------------------
//
// magic "ADVSEGCK" | version u32 | schema_len u32 | schema TOML (utf-8)
// | epoch u64 | config_hash u64 | radius f64 | k u32
// | in_dim u32 | mean f64 * in_dim | std f64 * in_dim
// | n_layers u32 | per layer: out u32, in u32, weight f64 * out*in (row-major), bias f64 * out
//
// All integers and floats little-endian.

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ADVSEGCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub schema: ClassSchema,
    pub epoch: u64,
    pub config_hash: u64,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let schema = toml::to_string(&self.schema).expect("schema serializes");
        out.extend_from_slice(&(schema.len() as u32).to_le_bytes());
        out.extend_from_slice(schema.as_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        let m = &self.model;
        out.extend_from_slice(&m.feature.radius.to_le_bytes());
        out.extend_from_slice(&(m.feature.k as u32).to_le_bytes());
        out.extend_from_slice(&(m.norm.mean.len() as u32).to_le_bytes());
        for v in m.norm.mean.iter().chain(&m.norm.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(m.layers.len() as u32).to_le_bytes());
        for l in &m.layers {
            out.extend_from_slice(&(l.out_dim() as u32).to_le_bytes());
            out.extend_from_slice(&(l.in_dim() as u32).to_le_bytes());
            for v in l.weight.as_slice().iter().chain(&l.bias) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, 0, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(
                path,
                8,
                format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
            ));
        }
        let schema_len = r.u32()? as usize;
        let at = r.pos;
        let schema_text = std::str::from_utf8(r.take(schema_len)?)
            .map_err(|_| Error::format(path, at as u64, "schema block is not utf-8"))?;
        let schema: ClassSchema = toml::from_str(schema_text)
            .map_err(|e| Error::format(path, at as u64, format!("schema block: {e}")))?;
        let epoch = r.u64()?;
        let config_hash = r.u64()?;
        let radius = r.f64()?;
        let k = r.u32()? as usize;
        let in_dim = r.u32()? as usize;
        let mean = r.f64s(in_dim)?;
        let std = r.f64s(in_dim)?;
        let n_layers = r.u32()? as usize;
        if n_layers == 0 {
            return Err(Error::format(path, r.pos as u64 - 4, "model has no layers"));
        }
        let mut layers = Vec::with_capacity(n_layers);
        let mut expect_in = in_dim;
        for _ in 0..n_layers {
            let at = r.pos;
            let out = r.u32()? as usize;
            let inp = r.u32()? as usize;
            if inp != expect_in || out == 0 {
                return Err(Error::format(path, at as u64, "layer shapes do not compose"));
            }
            let weight = Matrix::from_vec(out, inp, r.f64s(out * inp)?);
            let bias = r.f64s(out)?;
            layers.push(Layer { weight, bias });
            expect_in = out;
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, r.pos as u64, "trailing bytes after checkpoint"));
        }
        let model = Model {
            feature: FeatureSpec { radius, k },
            norm: FeatureNorm { mean, std },
            layers,
        };
        if !model.is_finite() {
            return Err(Error::format(path, 0, "non-finite parameters"));
        }
        if model.num_classes() != schema.num_classes() && model.num_classes() != schema.num_base() {
            return Err(Error::format(path, 0, "model head does not match the schema"));
        }
        Ok(Checkpoint {
            model,
            schema,
            epoch,
            config_hash,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("truncated: need {n} more bytes"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| {
            Error::format(self.path, self.pos as u64, "length overflow")
        })?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.encode()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::decode(&bytes, path)
}

/// Loads a checkpoint and compares its config hash; a mismatch is reported as a
/// warning string (and logged), not an error.
pub fn load_checkpoint_checked(
    path: impl AsRef<Path>,
    expected_config_hash: u64,
) -> Result<(Checkpoint, Option<String>)> {
    let path = path.as_ref();
    let ckpt = load_checkpoint(path)?;
    let warning = (ckpt.config_hash != expected_config_hash).then(|| {
        let msg = format!(
            "{}: config hash {:016x} differs from the current config {:016x}",
            path.display(),
            ckpt.config_hash,
            expected_config_hash
        );
        log::warn!("{msg}");
        msg
    });
    Ok((ckpt, warning))
}

/// Default input width of models built on [`crate::geom::neighbor_features`].
pub const INPUT_DIM: usize = FEATURE_DIM;
