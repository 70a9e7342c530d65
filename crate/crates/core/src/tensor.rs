//! Array newtypes shared by the model, loss and prompt code.

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

/// RGB image, `[3, H, W]`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    data: Array3<f64>,
}

impl ImageTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::invalid(format!("image must have 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::invalid("image must be at least 1x1"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image contains non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((3, height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }
}

/// Encoder output, `[D, H', W']`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
}

impl FeatureMap {
    pub fn dim(&self) -> usize {
        self.data.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        let (_, h, w) = self.data.dim();
        (h, w)
    }
}

/// One logit map per prompt, `[N_p, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskLogits(pub Array3<f64>);

/// Sigmoid probabilities, `[N_p, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMask(pub Array3<f64>);

/// Binarized stack of masks, `[N_p, H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskStack(pub Array3<bool>);

impl MaskStack {
    pub fn len(&self) -> usize {
        self.0.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn instance(&self, j: usize) -> BinaryMask {
        BinaryMask(self.0.index_axis(Axis(0), j).to_owned())
    }

    pub fn from_instances(masks: &[BinaryMask]) -> Result<Self> {
        let first = masks
            .first()
            .ok_or_else(|| Error::invalid("cannot stack zero masks"))?;
        let (h, w) = first.dim();
        let mut out = Array3::from_elem((masks.len(), h, w), false);
        for (j, m) in masks.iter().enumerate() {
            if m.dim() != (h, w) {
                return Err(Error::invalid("stacked masks differ in shape"));
            }
            out.index_axis_mut(Axis(0), j).assign(&m.0);
        }
        Ok(MaskStack(out))
    }

    /// Converts to 0/1 reals for loss code.
    pub fn to_f64(&self) -> Array3<f64> {
        self.0.mapv(|b| if b { 1.0 } else { 0.0 })
    }
}

/// Single-instance binary mask, `[H, W]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask(pub Array2<bool>);

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        BinaryMask(Array2::from_elem((height, width), false))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        BinaryMask(Array2::from_shape_fn((height, width), |(y, x)| f(x, y)))
    }

    /// `(height, width)`.
    pub fn dim(&self) -> (usize, usize) {
        self.0.dim()
    }

    pub fn height(&self) -> usize {
        self.0.dim().0
    }

    pub fn width(&self) -> usize {
        self.0.dim().1
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.0[[y, x]]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.0[[y, x]] = v;
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn view(&self) -> ArrayView2<'_, bool> {
        self.0.view()
    }

    /// Foreground pixel coordinates `(x, y)` in row-major order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        self.0
            .indexed_iter()
            .filter(|(_, &b)| b)
            .map(|((y, x), _)| (x, y))
            .collect()
    }

    pub fn background(&self) -> Vec<(usize, usize)> {
        self.0
            .indexed_iter()
            .filter(|(_, &b)| !b)
            .map(|((y, x), _)| (x, y))
            .collect()
    }
}

pub fn sigmoid(y: f64) -> f64 {
    if y >= 0.0 {
        1.0 / (1.0 + (-y).exp())
    } else {
        let e = y.exp();
        e / (1.0 + e)
    }
}

/// Elementwise logistic function.
pub fn sigmoid_normalize(logits: &MaskLogits) -> ProbMask {
    ProbMask(logits.0.mapv(sigmoid))
}

/// Strict-threshold binarization: `1` where `prob > threshold`.
pub fn binarize(prob: &ProbMask, threshold: f64) -> Result<MaskStack> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    Ok(MaskStack(prob.0.mapv(|p| p > threshold)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn logits(v: &[f64]) -> MaskLogits {
        MaskLogits(Array3::from_shape_vec((1, 1, v.len()), v.to_vec()).unwrap())
    }

    #[test]
    fn sigmoid_spot_values() {
        let p = sigmoid_normalize(&logits(&[0.0, 50.0, -1.0]));
        assert_eq!(p.0[[0, 0, 0]], 0.5);
        assert!((p.0[[0, 0, 1]] - 1.0).abs() < 1e-9);
        assert!((p.0[[0, 0, 2]] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn binarize_is_strict() {
        let p = ProbMask(Array3::from_shape_vec((1, 1, 3), vec![0.4, 0.6, 0.5]).unwrap());
        let b = binarize(&p, 0.5).unwrap();
        assert_eq!(b.0.iter().copied().collect::<Vec<_>>(), vec![false, true, false]);
        let all = ProbMask(Array3::from_elem((2, 3, 3), 0.9));
        assert!(binarize(&all, 0.5).unwrap().0.iter().all(|&b| b));
    }

    #[test]
    fn binarize_rejects_bad_threshold() {
        let p = ProbMask(Array3::zeros((1, 1, 1)));
        assert!(binarize(&p, 0.0).is_err());
        assert!(binarize(&p, 1.0).is_err());
    }

    #[test]
    fn image_validation() {
        assert!(ImageTensor::new(Array3::zeros((1, 4, 4))).is_err());
        assert!(ImageTensor::new(Array3::from_elem((3, 2, 2), f64::NAN)).is_err());
        assert!(ImageTensor::new(Array3::zeros((3, 2, 2))).is_ok());
    }

    #[test]
    fn mask_coordinates_are_xy() {
        let m = BinaryMask(array![[false, true], [false, false]]);
        assert_eq!(m.foreground(), vec![(1, 0)]);
        assert!(m.get(1, 0));
    }

    proptest! {
        #[test]
        fn threshold_half_matches_positive_logit(v in proptest::collection::vec(-30.0f64..30.0, 1..64)) {
            let l = logits(&v);
            let b = binarize(&sigmoid_normalize(&l), 0.5).unwrap();
            for (bit, y) in b.0.iter().zip(v.iter()) {
                prop_assert_eq!(*bit, *y > 0.0);
            }
        }
    }
}
