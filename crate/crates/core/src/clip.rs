use crate::error::{Result, StcrError};
use crate::tensor::Tensor;

/// A C×T×H×W video clip with finite values.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip(Tensor);

impl VideoClip {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 {
            return Err(StcrError::dim(
                "rank",
                format!("clip must be C×T×H×W, got shape {:?}", values.shape()),
            ));
        }
        if !values.is_finite() {
            return Err(StcrError::Numeric("clip contains non-finite values".into()));
        }
        Ok(VideoClip(values))
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        Self::new(Tensor::new(dims.to_vec(), data)?)
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        VideoClip(Tensor::zeros(&dims))
    }

    pub fn from_fn(dims: [usize; 4], f: impl FnMut(usize) -> f64) -> Self {
        VideoClip(Tensor::from_fn(&dims, f))
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.0.shape();
        [s[0], s[1], s[2], s[3]]
    }

    pub fn channels(&self) -> usize {
        self.dims()[0]
    }

    pub fn frames(&self) -> usize {
        self.dims()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn data(&self) -> &[f64] {
        self.0.data()
    }

    pub fn at(&self, c: usize, t: usize, h: usize, w: usize) -> f64 {
        self.0.at(&[c, t, h, w])
    }

    /// Values of frame `t` for every channel, ordered (c, h, w).
    pub fn frame(&self, t: usize) -> Vec<f64> {
        let [c, tt, h, w] = self.dims();
        let plane = h * w;
        let mut out = Vec::with_capacity(c * plane);
        for ch in 0..c {
            let start = (ch * tt + t) * plane;
            out.extend_from_slice(&self.0.data()[start..start + plane]);
        }
        out
    }

    /// Sub-clip starting at (t0, h0, w0) with extent (t, h, w), all channels.
    pub fn crop(&self, start: [usize; 3], extent: [usize; 3]) -> Result<VideoClip> {
        let [c, tt, hh, ww] = self.dims();
        for (a, name) in ["T", "H", "W"].iter().enumerate() {
            let full = [tt, hh, ww][a];
            if extent[a] == 0 || start[a] + extent[a] > full {
                return Err(StcrError::dim(
                    *name,
                    format!("crop {}+{} exceeds extent {full}", start[a], extent[a]),
                ));
            }
        }
        let [et, eh, ew] = extent;
        let [st, sh, sw] = start;
        let mut out = Vec::with_capacity(c * et * eh * ew);
        for ch in 0..c {
            for t in 0..et {
                for h in 0..eh {
                    let base = ((ch * tt + st + t) * hh + sh + h) * ww + sw;
                    out.extend_from_slice(&self.0.data()[base..base + ew]);
                }
            }
        }
        VideoClip::from_vec([c, et, eh, ew], out)
    }
}

impl TryFrom<Tensor> for VideoClip {
    type Error = StcrError;

    fn try_from(t: Tensor) -> Result<Self> {
        VideoClip::new(t)
    }
}
