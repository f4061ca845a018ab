//! Shared encoder `f` with one linear softmax head per camera.
//!
//! The encoder is a perceptron: affine layers with rectifiers between them
//! and a plain affine output layer of width `d`. Head `p` is an `N_p x d`
//! matrix without bias. Gradients are derived by hand; there is no autodiff.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{self, MiniBatch, MultiLabelMap};

/// Smallest probability fed to `-ln`; below it the loss term is constant
/// and contributes no gradient.
pub const PROB_FLOOR: f64 = 1e-30;

pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Widths of the hidden (rectified) layers.
    pub hidden: Vec<usize>,
    /// Output feature dimension `d`.
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { hidden: vec![64], feature_dim: 32 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRecord", into = "ParamsRecord")]
pub struct ModelParams {
    pub encoder: Vec<Layer>,
    pub heads: Vec<Array2<f64>>,
}

/// Same shapes as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: Vec<Layer>,
    pub heads: Vec<Array2<f64>>,
}

fn glorot(rng: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..=limit))
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(input_dim: usize, cfg: &EncoderConfig, head_sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 || cfg.feature_dim == 0 || cfg.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let widths: Vec<usize> = std::iter::once(input_dim)
            .chain(cfg.hidden.iter().copied())
            .chain(std::iter::once(cfg.feature_dim))
            .collect();
        let encoder =
            widths.windows(2).map(|w| Layer { weight: glorot(rng, w[1], w[0]), bias: Array1::zeros(w[1]) }).collect();
        let heads = head_sizes.iter().map(|&n| glorot(rng, n, cfg.feature_dim)).collect();
        Self::from_parts(encoder, heads)
    }

    pub fn from_parts(encoder: Vec<Layer>, heads: Vec<Array2<f64>>) -> Result<Self> {
        if encoder.is_empty() {
            return Err(Error::Config("encoder needs at least one layer".into()));
        }
        for (i, l) in encoder.iter().enumerate() {
            if l.weight.nrows() != l.bias.len() {
                return Err(Error::Dimension { expected: l.weight.nrows(), found: l.bias.len() });
            }
            if i > 0 {
                let prev = encoder[i - 1].weight.nrows();
                if l.weight.ncols() != prev {
                    return Err(Error::Dimension { expected: prev, found: l.weight.ncols() });
                }
            }
            if l.weight.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: i });
            }
        }
        let d = encoder.last().expect("nonempty").weight.nrows();
        for h in &heads {
            if h.ncols() != d {
                return Err(Error::Dimension { expected: d, found: h.ncols() });
            }
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: encoder.len() });
            }
        }
        Ok(Self { encoder, heads })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder[0].weight.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.last().expect("nonempty").weight.nrows()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    /// Head for a 1-based camera index.
    pub fn head(&self, camera: usize) -> Result<&Array2<f64>> {
        if camera == 0 || camera > self.heads.len() {
            return Err(Error::InvalidCamera { camera, cameras: self.heads.len() });
        }
        Ok(&self.heads[camera - 1])
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        Ok(self.encode_batch(x)?.row(0).to_vec())
    }

    /// Encodes each row of `x`.
    pub fn encode_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward(x)?.features().clone())
    }

    /// Softmax class distribution of camera `camera`'s head on feature `f`.
    pub fn head_probs(&self, camera: usize, f: &[f64]) -> Result<Vec<f64>> {
        let head = self.head(camera)?;
        if f.len() != head.ncols() {
            return Err(Error::Dimension { expected: head.ncols(), found: f.len() });
        }
        Ok(softmax(head.dot(&ArrayView1::from(f)).view()).to_vec())
    }

    /// Row-wise head distributions for a feature matrix.
    pub fn head_probs_batch(&self, camera: usize, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        let head = self.head(camera)?;
        if features.ncols() != head.ncols() {
            return Err(Error::Dimension { expected: head.ncols(), found: features.ncols() });
        }
        let mut logits = features.dot(&head.t());
        softmax_rows(&mut logits);
        Ok(logits)
    }

    fn forward(&self, x: ArrayView2<f64>) -> Result<Forward> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Dimension { expected: self.input_dim(), found: x.ncols() });
        }
        let last = self.encoder.len() - 1;
        let mut pre = Vec::with_capacity(self.encoder.len());
        let mut act = Vec::with_capacity(self.encoder.len() + 1);
        act.push(x.to_owned());
        for (i, layer) in self.encoder.iter().enumerate() {
            let z = act[i].dot(&layer.weight.t()) + &layer.bias;
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { layer: i });
            }
            let a = if i < last { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            pre.push(z);
            act.push(a);
        }
        Ok(Forward { pre, act })
    }
}

/// Cached activations: `act[0]` is the input, `act[i + 1]` the output of
/// layer `i`; `pre[i]` is layer `i` before its rectifier.
struct Forward {
    pre: Vec<Array2<f64>>,
    act: Vec<Array2<f64>>,
}

impl Forward {
    fn features(&self) -> &Array2<f64> {
        self.act.last().expect("input always cached")
    }
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
}

/// One weighted cross-entropy term: `weight * -ln g^head(f(x_row))[class]`.
/// `head` and `class` are 0-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct CeTerm {
    pub row: usize,
    pub head: usize,
    pub class: usize,
    pub weight: f64,
}

/// Evaluates the unweighted cross-entropy of every term and, when asked,
/// the gradient of their weighted sum.
pub(crate) fn cross_entropy_terms(
    params: &ModelParams,
    inputs: ArrayView2<f64>,
    terms: &[CeTerm],
    with_grad: bool,
) -> Result<(Vec<f64>, Option<Gradients>)> {
    let fwd = params.forward(inputs)?;
    let features = fwd.features();
    let head_layer = params.encoder.len();

    let mut used = vec![false; params.heads.len()];
    for t in terms {
        if t.head >= params.heads.len() {
            return Err(Error::InvalidCamera { camera: t.head + 1, cameras: params.heads.len() });
        }
        if t.class >= params.heads[t.head].nrows() {
            return Err(Error::Data(format!(
                "class {} outside head {} of size {}",
                t.class + 1,
                t.head + 1,
                params.heads[t.head].nrows()
            )));
        }
        used[t.head] = true;
    }
    let mut probs: Vec<Option<Array2<f64>>> = Vec::with_capacity(used.len());
    for (h, &u) in used.iter().enumerate() {
        if !u {
            probs.push(None);
            continue;
        }
        let mut logits = features.dot(&params.heads[h].t());
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: head_layer });
        }
        softmax_rows(&mut logits);
        probs.push(Some(logits));
    }

    let losses: Vec<f64> = terms
        .iter()
        .map(|t| {
            let p = probs[t.head].as_ref().expect("marked used")[[t.row, t.class]];
            -p.max(PROB_FLOOR).ln()
        })
        .collect();
    if !with_grad {
        return Ok((losses, None));
    }

    let mut dlogits: Vec<Option<Array2<f64>>> =
        probs.iter().map(|p| p.as_ref().map(|p| Array2::zeros(p.raw_dim()))).collect();
    for t in terms {
        let p = probs[t.head].as_ref().expect("marked used");
        if p[[t.row, t.class]] < PROB_FLOOR || t.weight == 0.0 {
            continue;
        }
        let d = dlogits[t.head].as_mut().expect("marked used");
        let mut row = d.row_mut(t.row);
        row.scaled_add(t.weight, &p.row(t.row));
        row[t.class] -= t.weight;
    }

    let mut grads = Gradients::zeros_like(params);
    let mut dfeat = Array2::<f64>::zeros(features.raw_dim());
    for (h, d) in dlogits.iter().enumerate() {
        if let Some(d) = d {
            grads.heads[h] = d.t().dot(features);
            dfeat += &d.dot(&params.heads[h]);
        }
    }
    let mut dz = dfeat;
    for i in (0..params.encoder.len()).rev() {
        grads.encoder[i].weight = dz.t().dot(&fwd.act[i]);
        grads.encoder[i].bias = dz.sum_axis(Axis(0));
        if i > 0 {
            let mut dh = dz.dot(&params.encoder[i].weight);
            Zip::from(&mut dh).and(&fwd.pre[i - 1]).for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            dz = dh;
        }
    }
    Ok((losses, Some(grads)))
}

/// Loss value and exact gradient of the combined multi-task plus
/// multi-label objective on a mini-batch.
pub fn forward_backward(
    params: &ModelParams,
    batch: &MiniBatch,
    multilabels: &MultiLabelMap,
    lambda: f64,
) -> Result<(f64, Gradients)> {
    let (breakdown, grads) = objective::evaluate(params, batch, multilabels, lambda, true)?;
    Ok((breakdown.total, grads.expect("requested")))
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            encoder: params
                .encoder
                .iter()
                .map(|l| Layer { weight: Array2::zeros(l.weight.raw_dim()), bias: Array1::zeros(l.bias.raw_dim()) })
                .collect(),
            heads: params.heads.iter().map(|h| Array2::zeros(h.raw_dim())).collect(),
        }
    }

    /// All components, encoder layers first (weight then bias), then heads.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_parts(&self.encoder, &self.heads)
    }
}

impl ModelParams {
    /// Same ordering as [`Gradients::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        flatten_parts(&self.encoder, &self.heads)
    }

    /// Mutable references to every parameter, same order as [`Self::flatten`].
    pub fn components_mut(&mut self) -> Vec<&mut f64> {
        let mut out = Vec::new();
        for l in &mut self.encoder {
            out.extend(l.weight.iter_mut());
            out.extend(l.bias.iter_mut());
        }
        for h in &mut self.heads {
            out.extend(h.iter_mut());
        }
        out
    }
}

fn flatten_parts(encoder: &[Layer], heads: &[Array2<f64>]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in encoder {
        out.extend(l.weight.iter());
        out.extend(l.bias.iter());
    }
    for h in heads {
        out.extend(h.iter());
    }
    out
}

/// Plain SGD with separate learning rates for encoder and heads, and
/// optional classical momentum (`v <- mu v + g; w <- w - lr v`).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub momentum: Option<f64>,
    velocity: Option<Gradients>,
}

impl OptimState {
    pub fn new(lr_backbone: f64, lr_heads: f64, momentum: Option<f64>) -> Result<Self> {
        if !(lr_backbone > 0.0 && lr_heads > 0.0 && lr_backbone.is_finite() && lr_heads.is_finite()) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if let Some(mu) = momentum {
            if !(0.0..1.0).contains(&mu) {
                return Err(Error::Config("momentum must lie in [0, 1)".into()));
            }
        }
        Ok(Self { lr_backbone, lr_heads, momentum, velocity: None })
    }
}

pub fn sgd_step(params: &mut ModelParams, grads: &Gradients, opt: &mut OptimState) {
    let step: &Gradients = match opt.momentum {
        None => grads,
        Some(mu) => {
            let v = opt.velocity.get_or_insert_with(|| Gradients::zeros_like(params));
            for (vl, gl) in v.encoder.iter_mut().zip(&grads.encoder) {
                vl.weight.zip_mut_with(&gl.weight, |v, &g| *v = mu * *v + g);
                vl.bias.zip_mut_with(&gl.bias, |v, &g| *v = mu * *v + g);
            }
            for (vh, gh) in v.heads.iter_mut().zip(&grads.heads) {
                vh.zip_mut_with(gh, |v, &g| *v = mu * *v + g);
            }
            v
        }
    };
    for (l, g) in params.encoder.iter_mut().zip(&step.encoder) {
        l.weight.scaled_add(-opt.lr_backbone, &g.weight);
        l.bias.scaled_add(-opt.lr_backbone, &g.bias);
    }
    for (h, g) in params.heads.iter_mut().zip(&step.heads) {
        h.scaled_add(-opt.lr_heads, g);
    }
}

#[derive(Serialize, Deserialize)]
struct MatrixRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    weight: MatrixRecord,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRecord {
    encoder: Vec<LayerRecord>,
    heads: Vec<MatrixRecord>,
}

impl From<&Array2<f64>> for MatrixRecord {
    fn from(m: &Array2<f64>) -> Self {
        Self { rows: m.nrows(), cols: m.ncols(), data: m.iter().copied().collect() }
    }
}

impl TryFrom<MatrixRecord> for Array2<f64> {
    type Error = Error;
    fn try_from(r: MatrixRecord) -> Result<Self> {
        let found = r.data.len();
        Array2::from_shape_vec((r.rows, r.cols), r.data)
            .map_err(|_| Error::Dimension { expected: r.rows * r.cols, found })
    }
}

impl From<ModelParams> for ParamsRecord {
    fn from(p: ModelParams) -> Self {
        Self {
            encoder: p
                .encoder
                .iter()
                .map(|l| LayerRecord { weight: (&l.weight).into(), bias: l.bias.to_vec() })
                .collect(),
            heads: p.heads.iter().map(MatrixRecord::from).collect(),
        }
    }
}

impl TryFrom<ParamsRecord> for ModelParams {
    type Error = Error;
    fn try_from(r: ParamsRecord) -> Result<Self> {
        let encoder = r
            .encoder
            .into_iter()
            .map(|l| Ok(Layer { weight: l.weight.try_into()?, bias: Array1::from(l.bias) }))
            .collect::<Result<Vec<_>>>()?;
        let heads = r.heads.into_iter().map(Array2::try_from).collect::<Result<Vec<_>>>()?;
        ModelParams::from_parts(encoder, heads)
    }
}
