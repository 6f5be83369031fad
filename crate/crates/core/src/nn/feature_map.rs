use ndarray::{Array2, ArrayView2};

use super::ModelError;

/// A `channels x length` activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(Array2<f64>);

impl FeatureMap {
    pub fn new(data: Array2<f64>) -> Result<Self, ModelError> {
        let (channels, length) = data.dim();
        if channels == 0 || length == 0 {
            return Err(ModelError::EmptyFeatureMap { channels, length });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("feature map".into()));
        }
        Ok(Self(data.as_standard_layout().into_owned()))
    }

    /// Builds a map from channel-major values.
    pub fn from_vec(channels: usize, length: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != channels * length {
            return Err(ModelError::ShapeMismatch {
                layer: "feature map".into(),
                expected: channels * length,
                got: data.len(),
            });
        }
        let array = Array2::from_shape_vec((channels, length), data)
            .map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        Self::new(array)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ModelError> {
        let length = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != length) {
            return Err(ModelError::InvalidConfig("ragged feature map rows".into()));
        }
        Self::from_vec(rows.len(), length, rows.concat())
    }

    pub(crate) fn from_array_unchecked(data: Array2<f64>) -> Self {
        Self(data)
    }

    pub fn channels(&self) -> usize {
        self.0.nrows()
    }

    pub fn length(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn get(&self, channel: usize, t: usize) -> f64 {
        self.0[[channel, t]]
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("feature maps are kept in standard layout")
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.outer_iter().map(|r| r.to_vec()).collect()
    }
}
