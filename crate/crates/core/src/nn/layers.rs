//! Layer types and the batched kernels behind them.
//!
//! Batched conv activations are laid out as `(channels, batch * length)`:
//! sample `b` owns columns `b * length .. (b + 1) * length`. A single
//! [`FeatureMap`] is the `batch = 1` case of that layout.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ActivationKind, FeatureMap, ModelError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `(out_channels, in_channels, kernel_size)`
    pub weights: Array3<f64>,
    pub bias: Array1<f64>,
    pub activation: ActivationKind,
    /// Max-pool size applied after the activation, if any.
    pub pool: Option<usize>,
}

impl ConvLayer {
    pub fn new(
        weights: Array3<f64>,
        bias: Array1<f64>,
        activation: ActivationKind,
    ) -> Result<Self, ModelError> {
        let (out, _, k) = weights.dim();
        if bias.len() != out {
            return Err(ModelError::ShapeMismatch {
                layer: "conv bias".into(),
                expected: out,
                got: bias.len(),
            });
        }
        if k == 0 || k % 2 == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "kernel size {k} must be odd for same padding"
            )));
        }
        if !activation.is_valid() {
            return Err(ModelError::InvalidConfig(format!("bad activation {activation:?}")));
        }
        Ok(Self {
            weights: weights.as_standard_layout().into_owned(),
            bias,
            activation,
            pool: None,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dim().1
    }

    pub fn kernel_size(&self) -> usize {
        self.weights.dim().2
    }

    /// Weights viewed as `(out, in * kernel)`.
    pub(crate) fn weight_matrix(&self) -> ArrayView2<'_, f64> {
        let (o, c, k) = self.weights.dim();
        self.weights
            .view()
            .into_shape_with_order((o, c * k))
            .expect("conv weights are contiguous")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `(out_units, in_units)`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: ActivationKind,
    /// Dropout rate applied to this layer's output in training.
    pub dropout: f64,
}

impl DenseLayer {
    pub fn new(
        weights: Array2<f64>,
        bias: Array1<f64>,
        activation: ActivationKind,
    ) -> Result<Self, ModelError> {
        if bias.len() != weights.nrows() {
            return Err(ModelError::ShapeMismatch {
                layer: "dense bias".into(),
                expected: weights.nrows(),
                got: bias.len(),
            });
        }
        if !activation.is_valid() {
            return Err(ModelError::InvalidConfig(format!("bad activation {activation:?}")));
        }
        Ok(Self {
            weights: weights.as_standard_layout().into_owned(),
            bias,
            activation,
            dropout: 0.0,
        })
    }

    pub fn in_units(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_units(&self) -> usize {
        self.weights.nrows()
    }
}

/// Unfolds zero-padded kernel patches: row `c * k + j`, column `b * len + t`
/// holds `x[c, b * len + t + j - k / 2]`, or 0 outside the sample.
pub(crate) fn im2col(x: ArrayView2<'_, f64>, len: usize, k: usize) -> Array2<f64> {
    let (channels, cols) = x.dim();
    let batch = cols / len;
    let pad = (k / 2) as isize;
    let mut out = Array2::<f64>::zeros((channels * k, cols));
    let x = x.as_standard_layout();
    for c in 0..channels {
        let src = x.row(c);
        let src = src.as_slice().expect("standard layout");
        for j in 0..k {
            let off = j as isize - pad;
            let lo = (-off).max(0) as usize;
            let hi = (len as isize - off).min(len as isize).max(0) as usize;
            if lo >= hi {
                continue;
            }
            let mut row = out.row_mut(c * k + j);
            let dst = row.as_slice_mut().expect("standard layout");
            for b in 0..batch {
                let base = b * len;
                let s0 = (base as isize + lo as isize + off) as usize;
                dst[base + lo..base + hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: folds patch gradients back onto the input,
/// discarding the padding positions.
pub(crate) fn col2im(dcols: &Array2<f64>, channels: usize, len: usize, k: usize) -> Array2<f64> {
    let cols = dcols.ncols();
    let batch = cols / len;
    let pad = (k / 2) as isize;
    let mut dx = Array2::<f64>::zeros((channels, cols));
    for c in 0..channels {
        let mut row = dx.row_mut(c);
        let dst = row.as_slice_mut().expect("standard layout");
        for j in 0..k {
            let off = j as isize - pad;
            let lo = (-off).max(0) as usize;
            let hi = (len as isize - off).min(len as isize).max(0) as usize;
            if lo >= hi {
                continue;
            }
            let src = dcols.row(c * k + j);
            let src = src.as_slice().expect("standard layout");
            for b in 0..batch {
                let base = b * len;
                let d0 = (base as isize + lo as isize + off) as usize;
                for (d, s) in dst[d0..d0 + (hi - lo)]
                    .iter_mut()
                    .zip(&src[base + lo..base + hi])
                {
                    *d += s;
                }
            }
        }
    }
    dx
}

/// Pre-activation of a conv layer on a batched input: `(cols, z)`.
pub(crate) fn conv_pre_activation(
    layer: &ConvLayer,
    x: ArrayView2<'_, f64>,
    len: usize,
) -> (Array2<f64>, Array2<f64>) {
    let cols = im2col(x, len, layer.kernel_size());
    let mut z = layer.weight_matrix().dot(&cols);
    for (mut row, &b) in z.outer_iter_mut().zip(layer.bias.iter()) {
        row.mapv_inplace(|v| v + b);
    }
    (cols, z)
}

/// Non-overlapping max-pool over each sample's length axis. Returns the
/// pooled map and, per output cell, the source column of its maximum (first
/// maximum on ties). A trailing remainder shorter than `pool` is dropped.
pub(crate) fn maxpool_batch(
    x: &Array2<f64>,
    len: usize,
    pool: usize,
) -> (Array2<f64>, Vec<usize>) {
    let (channels, cols) = x.dim();
    let batch = cols / len;
    let out_len = len / pool;
    let mut out = Array2::<f64>::zeros((channels, batch * out_len));
    let mut idx = vec![0usize; channels * batch * out_len];
    for c in 0..channels {
        let src = x.row(c);
        let src = src.as_slice().expect("standard layout");
        let mut row = out.row_mut(c);
        let dst = row.as_slice_mut().expect("standard layout");
        let idx_row = &mut idx[c * batch * out_len..(c + 1) * batch * out_len];
        for b in 0..batch {
            for t in 0..out_len {
                let start = b * len + t * pool;
                let mut best = start;
                for s in start + 1..start + pool {
                    if src[s] > src[best] {
                        best = s;
                    }
                }
                dst[b * out_len + t] = src[best];
                idx_row[b * out_len + t] = best;
            }
        }
    }
    (out, idx)
}

/// Routes pooled gradients back to their argmax positions.
pub(crate) fn maxpool_backward(
    dpooled: &Array2<f64>,
    idx: &[usize],
    pre_pool_cols: usize,
) -> Array2<f64> {
    let (channels, cols) = dpooled.dim();
    let mut dx = Array2::<f64>::zeros((channels, pre_pool_cols));
    for c in 0..channels {
        let src = dpooled.row(c);
        let mut row = dx.row_mut(c);
        let dst = row.as_slice_mut().expect("standard layout");
        for (g, &i) in src.iter().zip(&idx[c * cols..(c + 1) * cols]) {
            dst[i] += g;
        }
    }
    dx
}

/// `(batch, in) -> (batch, out)` pre-activation.
pub(crate) fn dense_pre_activation(layer: &DenseLayer, h: &Array2<f64>) -> Array2<f64> {
    let mut z = h.dot(&layer.weights.t());
    for mut row in z.outer_iter_mut() {
        row += &layer.bias;
    }
    z
}

/// Inverted-dropout mask: 0 with probability `rate`, else `1 / (1 - rate)`.
pub(crate) fn dropout_mask<R: Rng + ?Sized>(shape: (usize, usize), rate: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { keep })
}

fn check_rate(rate: f64) -> Result<(), ModelError> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(ModelError::BadDropout(rate))
    }
}

/// "Same"-padded stride-1 convolution of one feature map.
pub fn conv1d_forward(input: &FeatureMap, layer: &ConvLayer) -> Result<FeatureMap, ModelError> {
    if input.channels() != layer.in_channels() {
        return Err(ModelError::ChannelMismatch {
            layer: "conv".into(),
            expected: layer.in_channels(),
            got: input.channels(),
        });
    }
    let (_, z) = conv_pre_activation(layer, input.view(), input.length());
    let act = layer.activation;
    Ok(FeatureMap::from_array_unchecked(z.mapv(|v| act.apply(v))))
}

/// Max-pool of one feature map; indices are positions along the length axis.
pub fn maxpool1d_forward(
    input: &FeatureMap,
    pool_size: usize,
) -> Result<(FeatureMap, Array2<usize>), ModelError> {
    if pool_size == 0 || input.length() < pool_size {
        return Err(ModelError::PoolTooLarge {
            layer: "pool".into(),
            length: input.length(),
            pool: pool_size,
        });
    }
    let x = input.view().to_owned();
    let (out, idx) = maxpool_batch(&x, input.length(), pool_size);
    let idx = Array2::from_shape_vec(out.dim(), idx).expect("one index per output cell");
    Ok((FeatureMap::from_array_unchecked(out), idx))
}

/// `activation(W x + b)` for one input vector.
pub fn dense_forward(input: &[f64], layer: &DenseLayer) -> Result<Vec<f64>, ModelError> {
    if input.len() != layer.in_units() {
        return Err(ModelError::ShapeMismatch {
            layer: "dense".into(),
            expected: layer.in_units(),
            got: input.len(),
        });
    }
    let h = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("row vector");
    let z = dense_pre_activation(layer, &h);
    Ok(z.iter().map(|&v| layer.activation.apply(v)).collect())
}

/// Inverted dropout on one vector. Returns the output and the applied mask
/// (0 or `1 / (1 - rate)` per unit); inference is the identity.
pub fn dropout_forward<R: Rng + ?Sized>(
    input: &[f64],
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    check_rate(rate)?;
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.to_vec(), vec![1.0; input.len()]));
    }
    let mask = dropout_mask((1, input.len()), rate, rng).into_raw_vec_and_offset().0;
    let out = input.iter().zip(&mask).map(|(x, m)| x * m).collect();
    Ok((out, mask))
}

/// Sum of `z` along the batch axis of a `(batch, units)` matrix.
pub(crate) fn column_sums(z: &Array2<f64>) -> Array1<f64> {
    z.sum_axis(Axis(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_conv(w: [f64; 3], activation: ActivationKind) -> ConvLayer {
        ConvLayer::new(
            Array::from_shape_vec((1, 1, 3), w.to_vec()).unwrap(),
            array![0.0],
            activation,
        )
        .unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = FeatureMap::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let y = conv1d_forward(&x, &identity_conv([0.0, 1.0, 0.0], ActivationKind::Identity)).unwrap();
        assert_eq!(y.to_rows(), vec![vec![1.0, 2.0, 3.0, 4.0]]);
    }

    #[test]
    fn conv_box_kernel_zero_pads_edges() {
        let x = FeatureMap::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        let y = conv1d_forward(&x, &identity_conv([1.0, 1.0, 1.0], ActivationKind::Identity)).unwrap();
        assert_eq!(y.to_rows(), vec![vec![2.0, 3.0, 2.0]]);
    }

    #[test]
    fn conv_relu_clamps() {
        let x = FeatureMap::from_rows(&[vec![-1.0, -2.0]]).unwrap();
        let y = conv1d_forward(&x, &identity_conv([0.0, 1.0, 0.0], ActivationKind::Relu)).unwrap();
        assert_eq!(y.to_rows(), vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = FeatureMap::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let err = conv1d_forward(&x, &identity_conv([0.0, 1.0, 0.0], ActivationKind::Identity)).unwrap_err();
        assert!(matches!(err, ModelError::ChannelMismatch { expected: 1, got: 2, .. }));
    }

    #[test]
    fn conv_rejects_even_kernel() {
        let err = ConvLayer::new(Array3::zeros((1, 1, 2)), array![0.0], ActivationKind::Relu).unwrap_err();
        assert!(matches!(err, ModelError::InvalidConfig(_)));
    }

    #[test]
    fn pool_direct_maxima() {
        let x = FeatureMap::from_rows(&[vec![1.0, 3.0, 2.0, 2.0]]).unwrap();
        let (y, idx) = maxpool1d_forward(&x, 2).unwrap();
        assert_eq!(y.to_rows(), vec![vec![3.0, 2.0]]);
        assert_eq!(idx[[0, 0]], 1);
        assert!(idx[[0, 1]] == 2 || idx[[0, 1]] == 3);
    }

    #[test]
    fn pool_drops_odd_tail() {
        let x = FeatureMap::from_rows(&[vec![5.0, 1.0, 4.0]]).unwrap();
        let (y, idx) = maxpool1d_forward(&x, 2).unwrap();
        assert_eq!(y.to_rows(), vec![vec![5.0]]);
        assert_eq!(idx[[0, 0]], 0);
    }

    #[test]
    fn pool_constant_map_halves() {
        let x = FeatureMap::from_rows(&[vec![7.0; 6], vec![-1.0; 6]]).unwrap();
        let (y, _) = maxpool1d_forward(&x, 2).unwrap();
        assert_eq!(y.to_rows(), vec![vec![7.0; 3], vec![-1.0; 3]]);
        let short = FeatureMap::from_rows(&[vec![1.0]]).unwrap();
        assert!(matches!(
            maxpool1d_forward(&short, 2),
            Err(ModelError::PoolTooLarge { .. })
        ));
    }

    #[test]
    fn dense_examples() {
        let id = DenseLayer::new(Array2::eye(3), Array1::zeros(3), ActivationKind::Identity).unwrap();
        assert_eq!(dense_forward(&[1.0, -2.0, 3.0], &id).unwrap(), vec![1.0, -2.0, 3.0]);
        let sum = DenseLayer::new(array![[1.0, 1.0]], array![1.0], ActivationKind::Identity).unwrap();
        assert_eq!(dense_forward(&[2.0, 3.0], &sum).unwrap(), vec![6.0]);
        let out = DenseLayer::new(Array2::zeros((1, 4)), array![0.0], ActivationKind::Sigmoid).unwrap();
        assert_eq!(dense_forward(&[1.0, 2.0, 3.0, 4.0], &out).unwrap(), vec![0.5]);
        assert!(matches!(
            dense_forward(&[1.0], &sum),
            Err(ModelError::ShapeMismatch { expected: 2, got: 1, .. })
        ));
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..50).map(f64::from).collect();
        let (y, mask) = dropout_forward(&x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(mask.iter().all(|&m| m == 1.0));
        let (y, _) = dropout_forward(&x, 0.7, Mode::Infer, &mut rng).unwrap();
        assert_eq!(y, x);
        assert!(matches!(
            dropout_forward(&x, 1.0, Mode::Train, &mut rng),
            Err(ModelError::BadDropout(_))
        ));
    }

    #[test]
    fn dropout_rate_is_respected_statistically() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = vec![1.0; 10_000];
        let (y, mask) = dropout_forward(&x, 0.5, Mode::Train, &mut rng).unwrap();
        let zeros = y.iter().filter(|&&v| v == 0.0).count() as f64 / 1e4;
        assert!((zeros - 0.5).abs() < 0.05, "zero fraction {zeros}");
        assert!(y.iter().all(|&v| v == 0.0 || v == 2.0));
        assert_eq!(y, mask);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), g> == <x, col2im(g)>
        let (c, len, batch, k) = (3, 5, 2, 3);
        let x = Array2::from_shape_fn((c, batch * len), |(i, j)| (i * 7 + j * 3) as f64 % 5.0 - 2.0);
        let g = Array2::from_shape_fn((c * k, batch * len), |(i, j)| ((i + 2 * j) % 4) as f64 - 1.5);
        let lhs: f64 = (&im2col(x.view(), len, k) * &g).sum();
        let rhs: f64 = (&x * &col2im(&g, c, len, k)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
