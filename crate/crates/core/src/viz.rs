//! Transform-consistency matrices and activation heatmaps.

use std::fs;
use std::path::Path;

use crate::clip::VideoClip;
use crate::error::{Result, StcrError};
use crate::model::{psi_pool_value, ModelParams};
use crate::tensor::Tensor;
use crate::transform::{stt_apply_clip, stt_apply_feature_inverse, TransformId};

/// One row per transform in enumeration order; each row is the channel-averaged
/// descriptor of the re-aligned feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyMatrix {
    pub rows: Vec<(TransformId, Vec<f64>)>,
}

impl ConsistencyMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i].1
    }

    /// Mean absolute difference between row `i` and its temporally flipped partner `i + 8`.
    pub fn flip_gap(&self, i: usize) -> f64 {
        let (a, b) = (self.row(i), self.row(i + 8));
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    /// `flip_gap` averaged over the eight temporal-flip-free rows.
    pub fn mean_flip_gap(&self) -> f64 {
        (0..8).map(|i| self.flip_gap(i)).sum::<f64>() / 8.0
    }

    pub fn to_csv(&self) -> String {
        let width = self.rows.first().map_or(0, |r| r.1.len());
        let mut out = String::from("index,transform,flip,rotation");
        for t in 0..width {
            out.push_str(&format!(",t{t}"));
        }
        out.push('\n');
        for (t, row) in &self.rows {
            let (f, r) = t.as_pair();
            out.push_str(&format!("{},{t},{f},{r}", t.index()));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Channel-averaged descriptor: max over H′×W′, then mean over C′.
pub fn channel_mean_descriptor(feature: &Tensor) -> Result<Vec<f64>> {
    let d = psi_pool_value(feature)?;
    let (c, t) = (d.shape()[0], d.shape()[1]);
    Ok((0..t)
        .map(|j| (0..c).map(|i| d.data()[i * t + j]).sum::<f64>() / c as f64)
        .collect())
}

pub fn consistency_matrix(params: &ModelParams, clip: &VideoClip) -> Result<ConsistencyMatrix> {
    let rows = TransformId::all()
        .into_iter()
        .map(|t| {
            let feature = params.features(&stt_apply_clip(clip, t)?)?;
            let aligned = stt_apply_feature_inverse(&feature, t)?;
            Ok((t, channel_mean_descriptor(&aligned)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConsistencyMatrix { rows })
}

/// Computes the matrix and writes it as CSV.
pub fn viz_consistency_matrix(params: &ModelParams, clip: &VideoClip, out_csv: &Path) -> Result<ConsistencyMatrix> {
    let m = consistency_matrix(params, clip)?;
    fs::write(out_csv, m.to_csv()).map_err(|e| StcrError::io(out_csv, e))?;
    Ok(m)
}

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Heatmap {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Max over T′, nearest-neighbour upscaling to `height`×`width`, mean over
/// channels, then min-max scaling to 0..=255. A constant map becomes 128.
pub fn heatmap_from_feature(feature: &Tensor, height: usize, width: usize) -> Result<Heatmap> {
    if feature.rank() != 4 {
        return Err(StcrError::dim("rank", "feature map must be C′×T′×H′×W′"));
    }
    if height == 0 || width == 0 {
        return Err(StcrError::Argument("heatmap size must be positive".into()));
    }
    let [c, t, fh, fw] = [feature.shape()[0], feature.shape()[1], feature.shape()[2], feature.shape()[3]];
    let mut pooled = vec![f64::NEG_INFINITY; c * fh * fw];
    for ci in 0..c {
        for ti in 0..t {
            for cell in 0..fh * fw {
                let v = feature.data()[(ci * t + ti) * fh * fw + cell];
                let p = &mut pooled[ci * fh * fw + cell];
                *p = p.max(v);
            }
        }
    }
    let mut values = vec![0.0; height * width];
    for y in 0..height {
        let cy = y * fh / height;
        for x in 0..width {
            let cx = x * fw / width;
            let sum: f64 = (0..c).map(|ci| pooled[(ci * fh + cy) * fw + cx]).sum();
            values[y * width + x] = sum / c as f64;
        }
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi > lo {
        values
            .iter()
            .map(|v| (255.0 * (v - lo) / (hi - lo)).round() as u8)
            .collect()
    } else {
        vec![128; height * width]
    };
    Ok(Heatmap {
        height,
        width,
        pixels,
    })
}

pub fn heatmap(params: &ModelParams, clip: &VideoClip) -> Result<Heatmap> {
    let [_, _, h, w] = clip.dims();
    heatmap_from_feature(&params.features(clip)?, h, w)
}

/// Computes the heatmap and writes it as a binary PGM.
pub fn viz_heatmap(params: &ModelParams, clip: &VideoClip, out_pgm: &Path) -> Result<Heatmap> {
    let map = heatmap(params, clip)?;
    fs::write(out_pgm, map.to_pgm()).map_err(|e| StcrError::io(out_pgm, e))?;
    Ok(map)
}
