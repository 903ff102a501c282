//! The prototype extractor: a small pre-norm transformer encoder, without positional
//! encoding, that reads a class's support embeddings behind a mean token and returns
//! the transformed token as the class prototype.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::gradcheck::ParamSet;
use crate::numerics::{mean_rows, Graph, Real, Tensor, Var};

pub const LAYERNORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
pub const FFN_MULT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl ExtractorConfig {
    pub fn new(dim: usize, layers: usize, heads: usize) -> Result<Self> {
        if dim == 0 || layers == 0 || heads == 0 {
            return Err(Error::Config(format!(
                "dim ({dim}), layers ({layers}) and heads ({heads}) must be positive"
            )));
        }
        if !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self { dim, layers, heads })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Scalar parameter count: per layer 4d²+4d (attention), 8d²+5d (FFN), 4d (norms).
    pub fn param_count(&self) -> usize {
        let d = self.dim;
        self.layers * (12 * d * d + 13 * d)
    }
}

/// One encoder block. Weight matrices are stored `in × out` and applied as `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w_ff1: Tensor<T>,
    pub b_ff1: Tensor<T>,
    pub w_ff2: Tensor<T>,
    pub b_ff2: Tensor<T>,
}

pub const LAYER_FIELDS: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.w_q", "attn.b_q", "attn.w_k", "attn.b_k", "attn.w_v",
    "attn.b_v", "attn.w_o", "attn.b_o", "ln2.gain", "ln2.bias", "ffn.w_1", "ffn.b_1",
    "ffn.w_2", "ffn.b_2",
];

impl<T: Real> LayerParams<T> {
    fn fields(&self) -> [&Tensor<T>; 16] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.w_q, &self.b_q, &self.w_k, &self.b_k,
            &self.w_v, &self.b_v, &self.w_o, &self.b_o, &self.ln2_gain, &self.ln2_bias,
            &self.w_ff1, &self.b_ff1, &self.w_ff2, &self.b_ff2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.w_q, &mut self.b_q,
            &mut self.w_k, &mut self.b_k, &mut self.w_v, &mut self.b_v, &mut self.w_o,
            &mut self.b_o, &mut self.ln2_gain, &mut self.ln2_bias, &mut self.w_ff1,
            &mut self.b_ff1, &mut self.w_ff2, &mut self.b_ff2,
        ]
    }

    fn shapes(d: usize) -> [Vec<usize>; 16] {
        let h = FFN_MULT * d;
        [
            vec![d], vec![d], vec![d, d], vec![d], vec![d, d], vec![d], vec![d, d], vec![d],
            vec![d, d], vec![d], vec![d], vec![d], vec![d, h], vec![h], vec![h, d], vec![d],
        ]
    }

    fn from_fields(mut f: Vec<Tensor<T>>) -> Self {
        assert_eq!(f.len(), 16);
        let mut next = || f.remove(0);
        Self {
            ln1_gain: next(),
            ln1_bias: next(),
            w_q: next(),
            b_q: next(),
            w_k: next(),
            b_k: next(),
            w_v: next(),
            b_v: next(),
            w_o: next(),
            b_o: next(),
            ln2_gain: next(),
            ln2_bias: next(),
            w_ff1: next(),
            b_ff1: next(),
            w_ff2: next(),
            b_ff2: next(),
        }
    }
}

/// All learnable parameters of the extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorParams<T> {
    config: ExtractorConfig,
    layers: Vec<LayerParams<T>>,
}

/// Field indices whose initial value is 1 (layernorm gains) or a weight matrix.
fn is_gain(field: usize) -> bool {
    field == 0 || field == 10
}

fn is_weight(field: usize) -> bool {
    matches!(field, 2 | 4 | 6 | 8 | 12 | 14)
}

/// Draws weights from N(0, 0.02²), zero biases and unit layernorm gains.
/// The same `(config, seed)` always yields the same parameters.
pub fn init_params<T: Real>(config: ExtractorConfig, seed: u64) -> ExtractorParams<T> {
    init_params_with_std(config, seed, INIT_STD)
}

pub fn init_params_with_std<T: Real>(
    config: ExtractorConfig,
    seed: u64,
    std: f64,
) -> ExtractorParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("finite std");
    let layers = (0..config.layers)
        .map(|_| {
            let fields = LayerParams::<T>::shapes(config.dim)
                .into_iter()
                .enumerate()
                .map(|(f, shape)| {
                    if is_weight(f) {
                        let n = shape.iter().product();
                        let data = (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect();
                        Tensor::new(shape, data).expect("shape")
                    } else if is_gain(f) {
                        Tensor::filled(&shape, T::one())
                    } else {
                        Tensor::zeros(&shape)
                    }
                })
                .collect();
            LayerParams::from_fields(fields)
        })
        .collect();
    ExtractorParams { config, layers }
}

impl<T: Real> ExtractorParams<T> {
    /// Assembles parameters from tensors in [`ParamSet::tensors`] order, checking shapes.
    pub fn from_tensors(config: ExtractorConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let expected = config.layers * LAYER_FIELDS.len();
        if tensors.len() != expected {
            return Err(Error::Dimension(format!(
                "{} tensors given, {expected} expected for {} layers",
                tensors.len(),
                config.layers
            )));
        }
        let shapes = LayerParams::<T>::shapes(config.dim);
        let mut it = tensors.into_iter();
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let fields: Vec<Tensor<T>> = it.by_ref().take(LAYER_FIELDS.len()).collect();
            for ((t, shape), name) in fields.iter().zip(&shapes).zip(LAYER_FIELDS) {
                if t.shape() != shape.as_slice() {
                    return Err(Error::Dimension(format!(
                        "layers.{l}.{name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
            }
            layers.push(LayerParams::from_fields(fields));
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> ExtractorConfig {
        self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn layers(&self) -> &[LayerParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LayerParams<T>] {
        &mut self.layers
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    pub fn map(&self, f: impl Fn(&Tensor<T>) -> Tensor<T>) -> Self {
        Self {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams::from_fields(l.fields().into_iter().map(&f).collect()))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ExtractorParams<U> {
        ExtractorParams {
            config: self.config,
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams::from_fields(l.fields().into_iter().map(Tensor::cast).collect()))
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// `self += other` elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.1.data()) {
                *x = *x + y;
            }
        }
    }

    pub fn scale_assign(&mut self, s: T) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }

    /// FNV-1a over the bit patterns of every value, in tensor order.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        for (_, t) in self.tensors() {
            for &x in t.data() {
                h.write(&x.to_f64_lossless().to_bits().to_le_bytes());
            }
        }
        h.finish()
    }

    pub fn register(&self, graph: &mut Graph<T>) -> ParamVars {
        ParamVars {
            heads: self.config.heads,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let v: Vec<Var> = l.fields().into_iter().map(|t| graph.param(t.clone())).collect();
                    LayerVars(v.try_into().expect("16 fields"))
                })
                .collect(),
        }
    }
}

impl<T: Real> ParamSet<T> for ExtractorParams<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, p)| {
                p.fields()
                    .into_iter()
                    .zip(LAYER_FIELDS)
                    .map(move |(t, name)| (format!("layers.{l}.{name}"), t))
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|p| p.fields_mut()).collect()
    }
}

#[derive(Debug, Clone)]
struct LayerVars([Var; 16]);

/// Graph handles for a registered [`ExtractorParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    heads: usize,
    layers: Vec<LayerVars>,
}

impl ParamVars {
    /// Reads accumulated gradients back into parameter-shaped storage.
    /// Parameters that no backward pass reached get zeros.
    pub fn gradients<T: Real>(&self, graph: &Graph<T>, like: &ExtractorParams<T>) -> ExtractorParams<T> {
        let tensors = self
            .layers
            .iter()
            .flat_map(|l| l.0.iter())
            .map(|&v| graph.grad(v).unwrap_or_else(|| Tensor::zeros(graph.shape(v))))
            .collect();
        ExtractorParams::from_tensors(like.config(), tensors).expect("registered from params")
    }
}

/// One class's support rows plus their mean token.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportSlice<T> {
    class: usize,
    embeddings: Tensor<T>,
    token: Vec<T>,
}

impl<T: Real> SupportSlice<T> {
    pub fn new(class: usize, embeddings: Tensor<T>) -> Result<Self> {
        if embeddings.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "support slice expects a K×d matrix, got {:?}",
                embeddings.shape()
            )));
        }
        let token = make_token(&embeddings)?;
        Ok(Self {
            class,
            embeddings,
            token,
        })
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn embeddings(&self) -> &Tensor<T> {
        &self.embeddings
    }

    pub fn token(&self) -> &[T] {
        &self.token
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

/// Mean of the embedding rows.
pub fn make_token<T: Real>(embeddings: &Tensor<T>) -> Result<Vec<T>> {
    if embeddings.numel() == 0 {
        return Err(Error::Usage("cannot build a token from zero embeddings".into()));
    }
    Ok(mean_rows(embeddings.data(), embeddings.rows(), embeddings.cols()))
}

/// Records the extractor on `graph` for one slice and returns the prototype as a `1 × d` row.
pub fn extract_prototype_var<T: Real>(
    graph: &mut Graph<T>,
    vars: &ParamVars,
    slice: &SupportSlice<T>,
) -> Result<Var> {
    let d = slice.dim();
    let expected = graph.shape(vars.layers[0].0[0])[0];
    if d != expected {
        return Err(Error::Dimension(format!(
            "support embeddings have dim {d}, extractor expects {expected}"
        )));
    }
    let mut rows = Vec::with_capacity((slice.len() + 1) * d);
    rows.extend_from_slice(slice.token());
    rows.extend_from_slice(slice.embeddings().data());
    let mut x = graph.constant(Tensor::matrix(slice.len() + 1, d, rows)?);
    for layer in &vars.layers {
        x = encoder_block(graph, layer, vars.heads, x)?;
    }
    graph.slice_rows(x, 0, 1)
}

fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn encoder_block<T: Real>(g: &mut Graph<T>, p: &LayerVars, heads: usize, x: Var) -> Result<Var> {
    let [ln1_g, ln1_b, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2] = p.0;
    let eps = T::lit(LAYERNORM_EPS);
    let d = g.shape(x)[1];
    let hd = d / heads;
    let scale = T::one() / T::lit(hd as f64).sqrt();

    let h = g.layernorm(x, ln1_g, ln1_b, eps)?;
    let q = linear(g, h, w_q, b_q)?;
    let k = linear(g, h, w_k, b_k)?;
    let v = linear(g, h, w_v, b_v)?;
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = g.slice_cols(q, head * hd, hd)?;
        let kh = g.slice_cols(k, head * hd, hd)?;
        let vh = g.slice_cols(v, head * hd, hd)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale);
        let attn = g.softmax_lastdim(scores);
        outs.push(g.matmul(attn, vh)?);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat_cols(&outs)? };
    let attn_out = linear(g, merged, w_o, b_o)?;
    let x = g.add(x, attn_out)?;

    let h = g.layernorm(x, ln2_g, ln2_b, eps)?;
    let hidden = linear(g, h, w_1, b_1)?;
    let hidden = g.gelu(hidden);
    let ffn_out = linear(g, hidden, w_2, b_2)?;
    g.add(x, ffn_out)
}

/// Runs the extractor without recording gradients and returns the prototype.
pub fn extract_prototype<T: Real>(params: &ExtractorParams<T>, slice: &SupportSlice<T>) -> Result<Vec<T>> {
    if slice.dim() != params.dim() {
        return Err(Error::Dimension(format!(
            "support embeddings have dim {}, extractor expects {}",
            slice.dim(),
            params.dim()
        )));
    }
    let mut g = Graph::new();
    let vars = params.register(&mut g);
    let p = extract_prototype_var(&mut g, &vars, slice)?;
    Ok(g.value(p).data().to_vec())
}
