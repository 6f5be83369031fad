use ndarray::{Array1, Array2, Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    col2im, column_sums, conv_pre_activation, dense_pre_activation, dropout_mask, maxpool_backward,
    maxpool_batch, ConvLayer, DenseLayer, Mode,
};
use super::{ActivationKind, FeatureMap, ModelError};

/// Flat access to every parameter (or gradient) tensor, in a fixed order:
/// each conv layer's weights then bias, then each dense layer's.
pub trait Params {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn shapes(&self) -> Vec<usize> {
        self.tensors().iter().map(|t| t.len()).collect()
    }
}

impl Params for Vec<f64> {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel_size: usize,
    pub activation: ActivationKind,
    pub pool: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseSpec {
    pub units: usize,
    pub activation: ActivationKind,
    pub dropout: f64,
}

/// Topology of a conv stack followed by hidden dense layers. A single
/// sigmoid output unit is always appended after the last hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub window_len: usize,
    pub conv: Vec<ConvSpec>,
    pub dense: Vec<DenseSpec>,
}

impl ModelConfig {
    /// conv 32 (ReLU) -> conv 64 (LeakyReLU) + pool 2 -> conv 128
    /// (LeakyReLU) + pool 2 -> dense 128 -> dense 256 -> sigmoid unit, all
    /// kernels of size 3, dropout after the first dense layer.
    pub fn standard(window_len: usize, dropout: f64) -> Self {
        Self::stack(crate::data::NUM_FEATURES, window_len, [32, 64, 128], [128, 256], dropout)
    }

    /// The same layer pattern with arbitrary widths.
    pub fn stack(
        in_channels: usize,
        window_len: usize,
        filters: [usize; 3],
        dense: [usize; 2],
        dropout: f64,
    ) -> Self {
        let leaky = ActivationKind::leaky();
        let conv = |filters, activation, pool| ConvSpec {
            filters,
            kernel_size: 3,
            activation,
            pool,
        };
        Self {
            in_channels,
            window_len,
            conv: vec![
                conv(filters[0], ActivationKind::Relu, None),
                conv(filters[1], leaky, Some(2)),
                conv(filters[2], leaky, Some(2)),
            ],
            dense: vec![
                DenseSpec {
                    units: dense[0],
                    activation: leaky,
                    dropout,
                },
                DenseSpec {
                    units: dense[1],
                    activation: leaky,
                    dropout: 0.0,
                },
            ],
        }
    }

    /// Small model used for gradient checks: 2 channels, length 8,
    /// filters 2/2/2, dense 4/4, no dropout.
    pub fn reduced() -> Self {
        Self::stack(2, 8, [2, 2, 2], [4, 4], 0.0)
    }

    /// Sequence length entering each conv layer, then the final length.
    pub fn lengths(&self) -> Vec<usize> {
        let mut lens = vec![self.window_len];
        let mut len = self.window_len;
        for spec in &self.conv {
            if let Some(p) = spec.pool {
                len /= p.max(1);
            }
            lens.push(len);
        }
        lens
    }

    /// Input width of the first dense layer.
    pub fn flatten_len(&self) -> usize {
        let channels = self.conv.last().map_or(self.in_channels, |c| c.filters);
        channels * self.lengths().last().copied().unwrap_or(self.window_len)
    }

    pub fn with_dropout(mut self, rate: f64) -> Self {
        if let Some(first) = self.dense.first_mut() {
            first.dropout = rate;
        }
        self
    }

    pub fn without_dropout(mut self) -> Self {
        for d in &mut self.dense {
            d.dropout = 0.0;
        }
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.in_channels == 0 || self.window_len == 0 {
            return bad("input channels and window length must be positive".into());
        }
        let mut len = self.window_len;
        for (i, spec) in self.conv.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            if spec.filters == 0 {
                return bad(format!("{name} has zero filters"));
            }
            if spec.kernel_size == 0 || spec.kernel_size % 2 == 0 {
                return bad(format!("{name} kernel size {} must be odd", spec.kernel_size));
            }
            if !spec.activation.is_valid() {
                return bad(format!("{name} has invalid activation {:?}", spec.activation));
            }
            if let Some(p) = spec.pool {
                if p == 0 || len < p {
                    return Err(ModelError::PoolTooLarge {
                        layer: name,
                        length: len,
                        pool: p,
                    });
                }
                len /= p;
            }
        }
        for (i, spec) in self.dense.iter().enumerate() {
            let name = format!("dense{}", i + 1);
            if spec.units == 0 {
                return bad(format!("{name} has zero units"));
            }
            if !spec.activation.is_valid() {
                return bad(format!("{name} has invalid activation {:?}", spec.activation));
            }
            if !(0.0..1.0).contains(&spec.dropout) {
                return Err(ModelError::BadDropout(spec.dropout));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    pub(crate) convs: Vec<ConvLayer>,
    /// Hidden dense layers followed by the sigmoid output unit.
    pub(crate) denses: Vec<DenseLayer>,
}

impl Model {
    /// A model with every weight and bias set to zero.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut convs = Vec::with_capacity(config.conv.len());
        let mut channels = config.in_channels;
        for spec in &config.conv {
            convs.push(ConvLayer {
                weights: Array3::zeros((spec.filters, channels, spec.kernel_size)),
                bias: Array1::zeros(spec.filters),
                activation: spec.activation,
                pool: spec.pool,
            });
            channels = spec.filters;
        }
        let mut width = config.flatten_len();
        let mut denses = Vec::with_capacity(config.dense.len() + 1);
        for spec in &config.dense {
            denses.push(DenseLayer {
                weights: Array2::zeros((spec.units, width)),
                bias: Array1::zeros(spec.units),
                activation: spec.activation,
                dropout: spec.dropout,
            });
            width = spec.units;
        }
        denses.push(DenseLayer {
            weights: Array2::zeros((1, width)),
            bias: Array1::zeros(1),
            activation: ActivationKind::Sigmoid,
            dropout: 0.0,
        });
        Ok(Self {
            config,
            convs,
            denses,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn conv_layers(&self) -> &[ConvLayer] {
        &self.convs
    }

    /// Hidden dense layers followed by the output unit.
    pub fn dense_layers(&self) -> &[DenseLayer] {
        &self.denses
    }

    pub fn conv_layer_mut(&mut self, i: usize) -> &mut ConvLayer {
        &mut self.convs[i]
    }

    pub fn dense_layer_mut(&mut self, i: usize) -> &mut DenseLayer {
        &mut self.denses[i]
    }

    /// Names of the parameter tensors in [`Params`] order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.convs.len() {
            names.push(format!("conv{}.weight", i + 1));
            names.push(format!("conv{}.bias", i + 1));
        }
        let hidden = self.denses.len() - 1;
        for i in 0..self.denses.len() {
            let layer = if i == hidden {
                "output".to_string()
            } else {
                format!("dense{}", i + 1)
            };
            names.push(format!("{layer}.weight"));
            names.push(format!("{layer}.bias"));
        }
        names
    }

    /// Full array shapes of the parameter tensors in [`Params`] order.
    pub fn param_dims(&self) -> Vec<Vec<usize>> {
        let mut dims = Vec::new();
        for c in &self.convs {
            dims.push(c.weights.shape().to_vec());
            dims.push(vec![c.bias.len()]);
        }
        for d in &self.denses {
            dims.push(d.weights.shape().to_vec());
            dims.push(vec![d.bias.len()]);
        }
        dims
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Copy with every dropout rate set to zero.
    pub fn without_dropout(&self) -> Model {
        let mut model = self.clone();
        model.config = model.config.without_dropout();
        for d in &mut model.denses {
            d.dropout = 0.0;
        }
        model
    }

    pub fn has_dropout(&self) -> bool {
        self.denses.iter().any(|d| d.dropout > 0.0)
    }
}

impl Params for Model {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(c.weights.as_slice().expect("standard layout"));
            out.push(c.bias.as_slice().expect("standard layout"));
        }
        for d in &self.denses {
            out.push(d.weights.as_slice().expect("standard layout"));
            out.push(d.bias.as_slice().expect("standard layout"));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(c.weights.as_slice_mut().expect("standard layout"));
            out.push(c.bias.as_slice_mut().expect("standard layout"));
        }
        for d in &mut self.denses {
            out.push(d.weights.as_slice_mut().expect("standard layout"));
            out.push(d.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

/// Weights uniform in `±sqrt(6 / fan_in)` per layer, biases zero.
pub fn init_model(config: ModelConfig, seed: u64) -> Result<Model, ModelError> {
    let mut model = Model::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for conv in &mut model.convs {
        let (_, c, k) = conv.weights.dim();
        fill_uniform(conv.weights.as_slice_mut().unwrap(), c * k, &mut rng);
    }
    for dense in &mut model.denses {
        let fan_in = dense.weights.ncols();
        fill_uniform(dense.weights.as_slice_mut().unwrap(), fan_in, &mut rng);
    }
    Ok(model)
}

fn fill_uniform<R: Rng>(values: &mut [f64], fan_in: usize, rng: &mut R) {
    let limit = (6.0 / fan_in as f64).sqrt();
    for v in values {
        *v = rng.random_range(-limit..=limit);
    }
}

/// Gradient tensors shaped like a [`Model`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub conv: Vec<(Array3<f64>, Array1<f64>)>,
    pub dense: Vec<(Array2<f64>, Array1<f64>)>,
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            conv: model
                .convs
                .iter()
                .map(|c| (Array3::zeros(c.weights.raw_dim()), Array1::zeros(c.bias.len())))
                .collect(),
            dense: model
                .denses
                .iter()
                .map(|d| (Array2::zeros(d.weights.raw_dim()), Array1::zeros(d.bias.len())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl Params for GradientSet {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (w, b) in &self.conv {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        for (w, b) in &self.dense {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for (w, b) in &mut self.conv {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        for (w, b) in &mut self.dense {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }
}

#[derive(Debug, Clone)]
struct ConvCache {
    len: usize,
    cols: Array2<f64>,
    pre: Array2<f64>,
    pool_idx: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
struct DenseCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    mask: Option<Array2<f64>>,
}

/// Intermediate values of a forward pass needed by [`model_backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    batch: usize,
    flat_channels: usize,
    flat_len: usize,
    conv: Vec<ConvCache>,
    dense: Vec<DenseCache>,
    probs: Vec<f64>,
}

impl ForwardCache {
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    pub fn batch_size(&self) -> usize {
        self.batch
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Dropout masks per dense layer (`None` where no dropout was applied).
    pub fn dropout_masks(&self) -> Vec<Option<&Array2<f64>>> {
        self.dense.iter().map(|d| d.mask.as_ref()).collect()
    }

    /// Which side of every non-differentiable point the pass went through:
    /// the branch taken by each ReLU-type unit and the winner of each pool
    /// window. Two passes with equal patterns lie on the same linear piece.
    pub fn kink_pattern(&self, model: &Model) -> Vec<usize> {
        let mut out = Vec::new();
        for (c, layer) in self.conv.iter().zip(&model.convs) {
            if layer.activation.is_piecewise() {
                out.extend(c.pre.iter().map(|&v| usize::from(v > 0.0)));
            }
            if let Some(idx) = &c.pool_idx {
                out.extend(idx.iter().copied());
            }
        }
        for (d, layer) in self.dense.iter().zip(&model.denses) {
            if layer.activation.is_piecewise() {
                out.extend(d.pre.iter().map(|&v| usize::from(v > 0.0)));
            }
        }
        out
    }
}

fn check_input(model: &Model, sample: &FeatureMap) -> Result<(), ModelError> {
    let cfg = &model.config;
    if sample.channels() != cfg.in_channels {
        return Err(ModelError::ChannelMismatch {
            layer: "input".into(),
            expected: cfg.in_channels,
            got: sample.channels(),
        });
    }
    if sample.length() != cfg.window_len {
        return Err(ModelError::LengthMismatch {
            layer: "input".into(),
            expected: cfg.window_len,
            got: sample.length(),
        });
    }
    Ok(())
}

/// Stacks samples into the `(channels, batch * length)` layout.
fn stack_samples(samples: &[&FeatureMap], channels: usize, len: usize) -> Array2<f64> {
    let mut x = Array2::<f64>::zeros((channels, samples.len() * len));
    for (b, s) in samples.iter().enumerate() {
        let src = s.as_slice();
        for c in 0..channels {
            let mut row = x.row_mut(c);
            let dst = row.as_slice_mut().expect("standard layout");
            dst[b * len..(b + 1) * len].copy_from_slice(&src[c * len..(c + 1) * len]);
        }
    }
    x
}

fn forward_impl<R: Rng + ?Sized>(
    samples: &[&FeatureMap],
    model: &Model,
    mode: Mode,
    rng: &mut R,
    keep_cache: bool,
) -> Result<ForwardCache, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for s in samples {
        check_input(model, s)?;
    }
    let batch = samples.len();
    let mut len = model.config.window_len;
    let mut x = stack_samples(samples, model.config.in_channels, len);
    let mut conv_caches = Vec::new();

    for layer in &model.convs {
        let (cols, pre) = conv_pre_activation(layer, x.view(), len);
        let act = layer.activation;
        let a = pre.mapv(|v| act.apply(v));
        let (a, pool_idx, out_len) = match layer.pool {
            Some(p) => {
                let (pooled, idx) = maxpool_batch(&a, len, p);
                (pooled, Some(idx), len / p)
            }
            None => (a, None, len),
        };
        if keep_cache {
            conv_caches.push(ConvCache {
                len,
                cols,
                pre,
                pool_idx,
            });
        }
        x = a;
        len = out_len;
    }

    // (channels, batch * len) -> (batch, channels * len), channel-major per sample
    let channels = x.nrows();
    let mut h = Array2::<f64>::zeros((batch, channels * len));
    for c in 0..channels {
        let src = x.row(c);
        let src = src.as_slice().expect("standard layout");
        for b in 0..batch {
            let mut row = h.row_mut(b);
            let dst = row.as_slice_mut().expect("standard layout");
            dst[c * len..(c + 1) * len].copy_from_slice(&src[b * len..(b + 1) * len]);
        }
    }

    let mut dense_caches = Vec::new();
    for layer in &model.denses {
        let pre = dense_pre_activation(layer, &h);
        let act = layer.activation;
        let mut a = pre.mapv(|v| act.apply(v));
        let mask = if mode == Mode::Train && layer.dropout > 0.0 {
            let m = dropout_mask(a.dim(), layer.dropout, rng);
            a *= &m;
            Some(m)
        } else {
            None
        };
        let input = std::mem::replace(&mut h, a);
        if keep_cache {
            dense_caches.push(DenseCache { input, pre, mask });
        }
    }

    Ok(ForwardCache {
        mode,
        batch,
        flat_channels: channels,
        flat_len: len,
        conv: conv_caches,
        dense: dense_caches,
        probs: h.column(0).to_vec(),
    })
}

/// Forward pass of one sample: the probability of label 1 and the cache.
pub fn model_forward<R: Rng + ?Sized>(
    sample: &FeatureMap,
    model: &Model,
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, ForwardCache), ModelError> {
    let cache = forward_impl(&[sample], model, mode, rng, true)?;
    Ok((cache.probs[0], cache))
}

/// Forward pass of a batch of samples, keeping what backward needs.
pub fn model_forward_batch<R: Rng + ?Sized>(
    samples: &[&FeatureMap],
    model: &Model,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardCache, ModelError> {
    forward_impl(samples, model, mode, rng, true)
}

/// Inference-mode probabilities without retaining a cache.
pub fn predict_batch(samples: &[&FeatureMap], model: &Model) -> Result<Vec<f64>, ModelError> {
    // inference draws nothing from the generator
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    Ok(forward_impl(samples, model, Mode::Infer, &mut rng, false)?.probs)
}

/// Gradients of the summed cross-entropy loss over the cached batch.
/// With a sigmoid output the gradient at the output pre-activation is
/// `prob - label`.
pub fn model_backward(
    cache: &ForwardCache,
    labels: &[u8],
    model: &Model,
) -> Result<GradientSet, ModelError> {
    if labels.len() != cache.batch {
        return Err(ModelError::ShapeMismatch {
            layer: "labels".into(),
            expected: cache.batch,
            got: labels.len(),
        });
    }
    let dlogits: Vec<f64> = cache
        .probs
        .iter()
        .zip(labels)
        .map(|(p, &y)| p - f64::from(y))
        .collect();
    backward_from_logit_grad(cache, &dlogits, model)
}

/// Backpropagates an arbitrary gradient at the output pre-activation.
pub fn backward_from_logit_grad(
    cache: &ForwardCache,
    dlogits: &[f64],
    model: &Model,
) -> Result<GradientSet, ModelError> {
    if cache.mode != Mode::Train {
        return Err(ModelError::StaleCache("cache was produced in inference mode".into()));
    }
    if cache.conv.len() != model.convs.len() || cache.dense.len() != model.denses.len() {
        return Err(ModelError::StaleCache("cache does not match the model's layers".into()));
    }
    if dlogits.len() != cache.batch {
        return Err(ModelError::ShapeMismatch {
            layer: "output".into(),
            expected: cache.batch,
            got: dlogits.len(),
        });
    }
    let batch = cache.batch;
    let mut grads = GradientSet::zeros_like(model);

    let last = model.denses.len() - 1;
    let mut dh = Array2::<f64>::zeros((batch, 1));
    for i in (0..model.denses.len()).rev() {
        let layer = &model.denses[i];
        let c = &cache.dense[i];
        if c.input.ncols() != layer.in_units() {
            return Err(ModelError::StaleCache(format!("dense layer {} shape changed", i + 1)));
        }
        let dz = if i == last {
            Array2::from_shape_vec((batch, 1), dlogits.to_vec()).expect("one logit per sample")
        } else {
            let mut da = dh;
            if let Some(mask) = &c.mask {
                da *= mask;
            }
            let act = layer.activation;
            Zip::from(&mut da).and(&c.pre).for_each(|g, &z| *g *= act.derivative(z));
            da
        };
        grads.dense[i].0 = dz.t().dot(&c.input);
        grads.dense[i].1 = column_sums(&dz);
        dh = dz.dot(&layer.weights);
    }

    if model.convs.is_empty() {
        return Ok(grads);
    }

    // (batch, channels * len) -> (channels, batch * len)
    let (channels, len) = (cache.flat_channels, cache.flat_len);
    let mut dx = Array2::<f64>::zeros((channels, batch * len));
    for c in 0..channels {
        let mut row = dx.row_mut(c);
        let dst = row.as_slice_mut().expect("standard layout");
        for b in 0..batch {
            let src = dh.row(b);
            let src = src.as_slice().expect("standard layout");
            dst[b * len..(b + 1) * len].copy_from_slice(&src[c * len..(c + 1) * len]);
        }
    }

    for i in (0..model.convs.len()).rev() {
        let layer = &model.convs[i];
        let c = &cache.conv[i];
        let mut da = match &c.pool_idx {
            Some(idx) => maxpool_backward(&dx, idx, batch * c.len),
            None => dx,
        };
        let act = layer.activation;
        Zip::from(&mut da).and(&c.pre).for_each(|g, &z| *g *= act.derivative(z));
        let dz = da;
        let gw = dz.dot(&c.cols.t());
        grads.conv[i].0 = gw
            .into_shape_with_order(layer.weights.raw_dim())
            .map_err(|e| ModelError::StaleCache(e.to_string()))?;
        grads.conv[i].1 = dz.sum_axis(ndarray::Axis(1));
        if i == 0 {
            break;
        }
        let dcols = layer.weight_matrix().t().dot(&dz);
        dx = col2im(&dcols, layer.in_channels(), c.len, layer.kernel_size());
    }
    Ok(grads)
}
