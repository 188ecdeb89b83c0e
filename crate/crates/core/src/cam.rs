//! Class activation maps over abstract `H×W×L` feature maps, and
//! action-aware masking of a later feature map by a class map.

use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Non-negative activations `f_l(x, y)`, indexed `[y, x, l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array3<f64>,
}

impl FeatureMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map".into()));
        }
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidParameter(
                "feature map activations must be non-negative".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    /// `(H, W, L)`.
    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    pub fn scaled(&self, a: f64) -> Result<Self> {
        Self::new(self.values.mapv(|v| a * v))
    }
}

/// Linear classifier weights `w_l^k`, shape `L×N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub w: Array2<f64>,
}

impl ClassWeights {
    pub fn new(w: Array2<f64>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("class weights".into()));
        }
        Ok(Self { w })
    }

    pub fn classes(&self) -> usize {
        self.w.ncols()
    }
}

/// Spatial reduction used by [`gap_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Pooling {
    #[default]
    Sum,
    Mean,
}

/// `F_l = Σ_{x,y} f_l(x, y)`.
pub fn gap(fm: &FeatureMap) -> Vec<f64> {
    gap_with(fm, Pooling::Sum)
}

pub fn gap_with(fm: &FeatureMap, pooling: Pooling) -> Vec<f64> {
    let (h, w, l) = fm.dim();
    let mut f = vec![0.0; l];
    for y in 0..h {
        for x in 0..w {
            for (c, acc) in f.iter_mut().enumerate() {
                *acc += fm.values[[y, x, c]];
            }
        }
    }
    if pooling == Pooling::Mean && h * w > 0 {
        let n = (h * w) as f64;
        f.iter_mut().for_each(|v| *v /= n);
    }
    f
}

/// `S_k = Σ_l w_l^k F_l`.
pub fn class_scores(f: &[f64], w: &ClassWeights) -> Result<Vec<f64>> {
    if f.len() != w.w.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} channels vs {} weight rows",
            f.len(),
            w.w.nrows()
        )));
    }
    Ok((0..w.classes())
        .map(|k| {
            f.iter()
                .enumerate()
                .fold(0.0, |acc, (l, &fl)| acc + w.w[[l, k]] * fl)
        })
        .collect())
}

/// `M_k(x, y) = Σ_l w_l^k f_l(x, y)`, shape `H×W`.
pub fn cam_map(fm: &FeatureMap, w: &ClassWeights, k: usize) -> Result<Array2<f64>> {
    let (h, wd, l) = fm.dim();
    if l != w.w.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{l} channels vs {} weight rows",
            w.w.nrows()
        )));
    }
    if k >= w.classes() {
        return Err(Error::LabelOutOfRange {
            label: k,
            classes: w.classes(),
        });
    }
    Ok(Array2::from_shape_fn((h, wd), |(y, x)| {
        (0..l).fold(0.0, |acc, c| acc + w.w[[c, k]] * fm.values[[y, x, c]])
    }))
}

/// `A(x, y, l) = f_l(x, y) · max(0, M_k(x, y))`.
pub fn action_aware_mask(fm_late: &FeatureMap, m_k: &Array2<f64>) -> Result<FeatureMap> {
    let (h, w, _) = fm_late.dim();
    if m_k.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "map {:?} vs features {h}x{w}",
            m_k.dim()
        )));
    }
    let mut out = fm_late.values.clone();
    for ((y, x, _), v) in out.indexed_iter_mut() {
        *v *= m_k[[y, x]].max(0.0);
    }
    FeatureMap::new(out)
}

/// Binary PGM (`P5`) of `map`, min-max scaled to 0..=255.
pub fn to_pgm(map: &Array2<f64>) -> Vec<u8> {
    let (h, w) = map.dim();
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| {
        if span > 0.0 {
            (255.0 * (v - lo) / span).round() as u8
        } else {
            0
        }
    }));
    out
}

pub fn write_pgm(path: &Path, map: &Array2<f64>) -> Result<()> {
    std::fs::write(path, to_pgm(map)).map_err(|e| Error::io(path, e))
}
