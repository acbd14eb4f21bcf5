//! Grad-CAM attention maps and the binary masks they are compared against.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::InstanceId;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{grad_wrt_features, FeatureMaps, ForwardTrace, Parameters};

/// A Grad-CAM map over the feature grid, optionally min-max normalized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub grid: Grid,
    pub normalized: bool,
    pub class_index: usize,
    pub instance_id: Option<InstanceId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskProvenance {
    Human,
    Oracle,
    BinarizedAttention,
}

/// `height × width` booleans, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    pub provenance: MaskProvenance,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize, provenance: MaskProvenance) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
            provenance,
        }
    }

    pub fn from_bits(
        height: usize,
        width: usize,
        bits: Vec<bool>,
        provenance: MaskProvenance,
    ) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Input(format!(
                "mask of {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
            provenance,
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.bits[y * self.width + x] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Number of pixels set in both masks.
    pub fn overlap(&self, other: &BinaryMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    /// The mask as a `{0, 1}` grid.
    pub fn to_grid(&self) -> Grid {
        let data = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Grid::from_vec(self.height, self.width, data).expect("consistent dims")
    }

    /// Run-length wire form: `[width, height, c0, c1, …]`, row-major,
    /// alternating runs beginning with a (possibly empty) false-run.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut out = vec![self.width as u32, self.height as u32];
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.bits {
            if b == current {
                run += 1;
            } else {
                out.push(run);
                current = b;
                run = 1;
            }
        }
        out.push(run);
        out
    }

    /// Inverse of [`BinaryMask::to_rle`]. Only the canonical encoding is
    /// accepted: runs after the first are non-zero and the counts cover the
    /// mask exactly, so decode followed by encode reproduces the input.
    pub fn from_rle(rle: &[u32], provenance: MaskProvenance) -> Result<Self> {
        let [width, height, counts @ ..] = rle else {
            return Err(Error::Input("RLE needs width and height".into()));
        };
        let (width, height) = (*width as usize, *height as usize);
        if width == 0 || height == 0 {
            return Err(Error::Input("RLE mask has a zero dimension".into()));
        }
        if counts.is_empty() {
            return Err(Error::Input("RLE has no runs".into()));
        }
        if counts.iter().skip(1).any(|&c| c == 0) {
            return Err(Error::Input("RLE has an empty interior run".into()));
        }
        let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
        if total != (width * height) as u64 {
            return Err(Error::Input(format!(
                "RLE covers {total} pixels, mask is {width}x{height}"
            )));
        }
        let mut bits = Vec::with_capacity(width * height);
        let mut value = false;
        for &c in counts {
            bits.extend(core::iter::repeat_n(value, c as usize));
            value = !value;
        }
        Ok(Self {
            height,
            width,
            bits,
            provenance,
        })
    }
}

/// Attention label on the feature grid: per-cell area fraction of a mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetAttentionGrid {
    pub grid: Grid,
    pub source_dims: (usize, usize),
    pub provenance: MaskProvenance,
}

/// Per-map Grad-CAM weights: the mean over the grid of `∂Y^c/∂A^k`.
pub fn grad_cam_weights(params: &Parameters, trace: &ForwardTrace, class_index: usize) -> Result<Vec<f64>> {
    let grads = grad_wrt_features(params, trace, class_index)?;
    Ok(map_means(&grads))
}

fn map_means(maps: &FeatureMaps) -> Vec<f64> {
    let (h, w) = maps.dims();
    let area = (h * w) as f64;
    (0..maps.count())
        .map(|k| maps.map(k).iter().sum::<f64>() / area)
        .collect()
}

fn weighted_sum(maps: &FeatureMaps, weights: &[f64]) -> Vec<f64> {
    let (h, w) = maps.dims();
    let mut out = vec![0.0; h * w];
    for (k, &wk) in weights.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(maps.map(k)) {
            *o += wk * a;
        }
    }
    out
}

/// Raw (unnormalized) Grad-CAM map: `ReLU(Σ_k w_k A^k)`.
pub fn grad_cam(params: &Parameters, trace: &ForwardTrace, class_index: usize) -> Result<Grid> {
    let weights = grad_cam_weights(params, trace, class_index)?;
    Ok(grad_cam_from_parts(&trace.feature_maps, &weights))
}

/// Grad-CAM from explicit feature maps and per-map weights.
pub fn grad_cam_from_parts(maps: &FeatureMaps, weights: &[f64]) -> Grid {
    let (h, w) = maps.dims();
    let mut data = weighted_sum(maps, weights);
    data.iter_mut().for_each(|v| *v = v.max(0.0));
    Grid::from_vec(h, w, data).expect("consistent dims")
}

/// Min-max normalization onto `[0, 1]`; a constant map becomes all zeros.
pub fn normalize(raw: &Grid, class_index: usize) -> AttentionMap {
    let (min, max) = (raw.min(), raw.max());
    let range = max - min;
    let data = if range > 0.0 {
        raw.as_slice().iter().map(|v| (v - min) / range).collect()
    } else {
        vec![0.0; raw.as_slice().len()]
    };
    AttentionMap {
        grid: Grid::from_vec(raw.rows(), raw.cols(), data).expect("consistent dims"),
        normalized: true,
        class_index,
        instance_id: None,
    }
}

/// Grad-CAM followed by normalization, tagged with the trace's instance.
pub fn attention_map(params: &Parameters, trace: &ForwardTrace, class_index: usize) -> Result<AttentionMap> {
    let raw = grad_cam(params, trace, class_index)?;
    let mut map = normalize(&raw, class_index);
    map.instance_id = trace.input_ref;
    Ok(map)
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn upsample(map: &Grid, height: usize, width: usize) -> Result<Grid> {
    if height == 0 || width == 0 {
        return Err(Error::Input("zero target dimension".into()));
    }
    let (rows, cols) = map.dims();
    if rows == 0 || cols == 0 {
        return Err(Error::Input("empty source map".into()));
    }
    let source_coord = |i: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = s as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, s - lo as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| source_coord(x, width, cols)).collect();
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        let (y0, y1, fy) = source_coord(y, height, rows);
        for &(x0, x1, fx) in &xs {
            let top = map.get(y0, x0) * (1.0 - fx) + map.get(y0, x1) * fx;
            let bottom = map.get(y1, x0) * (1.0 - fx) + map.get(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Grid::from_vec(height, width, out)
}

/// `value ≥ tau` per cell.
pub fn binarize(map: &Grid, tau: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Input(format!("threshold {tau} outside [0, 1]")));
    }
    let bits = map.as_slice().iter().map(|&v| v >= tau).collect();
    BinaryMask::from_bits(map.rows(), map.cols(), bits, MaskProvenance::BinarizedAttention)
}

/// Area-weighted reduction of an image-resolution mask onto a `u × v` grid.
///
/// Each cell holds the fraction of its (possibly fractional-pixel) area
/// covered by set pixels. Overlaps are counted in integer units of
/// `1/u` rows by `1/v` columns, so the fractions are exact rationals.
pub fn mask_to_target_grid(mask: &BinaryMask, u: usize, v: usize) -> Result<TargetAttentionGrid> {
    if u == 0 || v == 0 {
        return Err(Error::Input("zero target grid dimension".into()));
    }
    let (h, w) = mask.dims();
    let mut numer = vec![0u64; u * v];
    for y in 0..h {
        for (i, oy) in overlaps(y, h, u) {
            for x in 0..w {
                if !mask.get(y, x) {
                    continue;
                }
                for (j, ox) in overlaps(x, w, v) {
                    numer[i * v + j] += oy * ox;
                }
            }
        }
    }
    let cell_area = (h * w) as f64;
    let data = numer.into_iter().map(|n| n as f64 / cell_area).collect();
    Ok(TargetAttentionGrid {
        grid: Grid::from_vec(u, v, data)?,
        source_dims: (h, w),
        provenance: mask.provenance,
    })
}

/// Cells overlapped by pixel `p` (of `len`) on an axis split into `cells`,
/// with the overlap measured in units of `1/cells` pixel.
fn overlaps(p: usize, len: usize, cells: usize) -> impl Iterator<Item = (usize, u64)> {
    // pixel spans [p·cells, (p+1)·cells); cell i spans [i·len, (i+1)·len)
    let start = p * cells;
    let end = start + cells;
    let first = start / len;
    let last = (end - 1) / len;
    (first..=last.min(cells - 1)).map(move |i| {
        let lo = start.max(i * len);
        let hi = end.min((i + 1) * len);
        (i, (hi - lo) as u64)
    })
}

/// Backward pass of `normalize ∘ grad_cam` for an upstream gradient on the
/// normalized map.
///
/// Returns the adjoint on the feature maps and, when `higher_order` is set,
/// the adjoint on the head weights that flows through the Grad-CAM weights
/// (those weights are themselves gradients of the head). With
/// `higher_order` off the weights are treated as constants.
pub(crate) fn attention_backward(
    params: &Parameters,
    trace: &ForwardTrace,
    class_index: usize,
    upstream: &Grid,
    higher_order: bool,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let maps = &trace.feature_maps;
    let (h, w) = maps.dims();
    if upstream.dims() != (h, w) {
        return Err(Error::Input("upstream gradient has wrong dims".into()));
    }
    let weights = grad_cam_weights(params, trace, class_index)?;
    let pre = weighted_sum(maps, &weights);
    let raw: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();

    let mut draw = vec![0.0; h * w];
    let (mut imin, mut imax) = (0, 0);
    for (i, &r) in raw.iter().enumerate() {
        if r < raw[imin] {
            imin = i;
        }
        if r > raw[imax] {
            imax = i;
        }
    }
    let (min, max) = (raw[imin], raw[imax]);
    let range = max - min;
    if range > 0.0 {
        let g = upstream.as_slice();
        let mut dmin = 0.0;
        let mut dmax = 0.0;
        for i in 0..h * w {
            let m = (raw[i] - min) / range;
            draw[i] += g[i] / range;
            dmin += g[i] * (m - 1.0) / range;
            dmax -= g[i] * m / range;
        }
        draw[imin] += dmin;
        draw[imax] += dmax;
    }
    let dpre: Vec<f64> = draw
        .iter()
        .zip(&pre)
        .map(|(&d, &p)| if p > 0.0 { d } else { 0.0 })
        .collect();

    let k = maps.count();
    let mut dfeatures = vec![0.0; k * h * w];
    for (kk, &wk) in weights.iter().enumerate() {
        for (d, &g) in dfeatures[kk * h * w..(kk + 1) * h * w].iter_mut().zip(&dpre) {
            *d = g * wk;
        }
    }
    let dhead = if higher_order {
        // w_k = W[c,k] / (u·v), so ∂w_k/∂W[c,k] = 1 / (u·v)
        let area = (h * w) as f64;
        let mut dhead = vec![0.0; params.config().num_classes * k];
        for kk in 0..k {
            let dw: f64 = maps.map(kk).iter().zip(&dpre).map(|(a, g)| a * g).sum();
            dhead[class_index * k + kk] = dw / area;
        }
        Some(dhead)
    } else {
        None
    };
    Ok((dfeatures, dhead))
}
