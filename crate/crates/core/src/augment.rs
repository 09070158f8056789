//! Clip-to-clip augmentations: intra-video mixup and its comparison variants.
//!
//! Each sampling function has a `*_with` twin taking the random draws
//! explicitly, which is what the training loop and the tests call.

use std::fmt;

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clip::VideoClip;
use crate::error::{Result, StcrError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AugmentVariant {
    #[default]
    Intra,
    Inter,
    VideoMixup,
    CutMix,
    GaussianNoise,
}

impl AugmentVariant {
    pub const ALL: [AugmentVariant; 5] = [
        AugmentVariant::Intra,
        AugmentVariant::Inter,
        AugmentVariant::VideoMixup,
        AugmentVariant::CutMix,
        AugmentVariant::GaussianNoise,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AugmentVariant::Intra => "intra",
            AugmentVariant::Inter => "inter",
            AugmentVariant::VideoMixup => "video_mixup",
            AugmentVariant::CutMix => "cut_mix",
            AugmentVariant::GaussianNoise => "gaussian_noise",
        }
    }

    /// Whether the variant draws content from a second clip.
    pub fn needs_partner(self) -> bool {
        matches!(
            self,
            AugmentVariant::Inter | AugmentVariant::VideoMixup | AugmentVariant::CutMix
        )
    }
}

impl fmt::Display for AugmentVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// What a mixing augmentation drew.
///
/// For variants without a single interpolation weight the fields are
/// reinterpreted: CutMix stores the mean replaced area fraction and the source
/// frame used for frame 0; Gaussian noise stores zeros.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixupRecord {
    pub lambda: f64,
    pub source_frame_index: usize,
    pub variant: AugmentVariant,
}

pub fn sample_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| StcrError::Argument(format!("invalid mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng))
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(StcrError::Argument(format!("lambda {lambda} outside [0, 1]")));
    }
    Ok(())
}

fn check_same_dims(a: &VideoClip, b: &VideoClip) -> Result<()> {
    if let Some(axis) = (0..4).find(|&i| a.dims()[i] != b.dims()[i]) {
        return Err(StcrError::dim(
            ["C", "T", "H", "W"][axis],
            format!("clip shapes {:?} and {:?} differ", a.dims(), b.dims()),
        ));
    }
    Ok(())
}

/// Every frame j of `clip` becomes `(1 - lambda) * clip_j + lambda * other_k`.
fn mix_with_frame(clip: &VideoClip, other: &VideoClip, lambda: f64, k: usize) -> Result<VideoClip> {
    check_lambda(lambda)?;
    let [c, t, h, w] = clip.dims();
    if k >= other.frames() {
        return Err(StcrError::Argument(format!("frame index {k} out of range 0..{}", other.frames())));
    }
    let plane = h * w;
    let (x, y) = (clip.data(), other.data());
    let mut out = Vec::with_capacity(x.len());
    for ch in 0..c {
        let src = &y[(ch * t + k) * plane..(ch * t + k + 1) * plane];
        for j in 0..t {
            let frame = &x[(ch * t + j) * plane..(ch * t + j + 1) * plane];
            out.extend(frame.iter().zip(src).map(|(a, b)| (1.0 - lambda) * a + lambda * b));
        }
    }
    VideoClip::from_vec([c, t, h, w], out)
}

pub fn intra_video_mixup_with(clip: &VideoClip, lambda: f64, k: usize) -> Result<VideoClip> {
    mix_with_frame(clip, clip, lambda, k)
}

/// Mixes every frame with one frame drawn from the same clip; `lambda ~ Beta(alpha, alpha)`.
pub fn intra_video_mixup<R: Rng + ?Sized>(
    clip: &VideoClip,
    alpha: f64,
    rng: &mut R,
) -> Result<(VideoClip, MixupRecord)> {
    if clip.frames() < 2 {
        return Err(StcrError::DegenerateInput(
            "intra-video mixup needs at least two frames".into(),
        ));
    }
    let lambda = sample_lambda(alpha, rng)?;
    let k = rng.random_range(0..clip.frames());
    let out = intra_video_mixup_with(clip, lambda, k)?;
    Ok((
        out,
        MixupRecord {
            lambda,
            source_frame_index: k,
            variant: AugmentVariant::Intra,
        },
    ))
}

pub fn inter_video_mixup_with(
    clip: &VideoClip,
    other: &VideoClip,
    lambda: f64,
    k: usize,
) -> Result<VideoClip> {
    check_same_dims(clip, other)?;
    mix_with_frame(clip, other, lambda, k)
}

/// As [`intra_video_mixup`], but frame `k` comes from `other`.
pub fn inter_video_mixup<R: Rng + ?Sized>(
    clip: &VideoClip,
    other: &VideoClip,
    alpha: f64,
    rng: &mut R,
) -> Result<(VideoClip, MixupRecord)> {
    check_same_dims(clip, other)?;
    let lambda = sample_lambda(alpha, rng)?;
    let k = rng.random_range(0..clip.frames());
    let out = inter_video_mixup_with(clip, other, lambda, k)?;
    Ok((
        out,
        MixupRecord {
            lambda,
            source_frame_index: k,
            variant: AugmentVariant::Inter,
        },
    ))
}

pub fn video_mixup_with(a: &VideoClip, b: &VideoClip, lambda: f64) -> Result<VideoClip> {
    check_same_dims(a, b)?;
    check_lambda(lambda)?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (1.0 - lambda) * x + lambda * y)
        .collect();
    VideoClip::from_vec(a.dims(), data)
}

/// Frame-wise interpolation of two clips with a single `lambda ~ Beta(alpha, alpha)`.
pub fn video_mixup<R: Rng + ?Sized>(
    a: &VideoClip,
    b: &VideoClip,
    alpha: f64,
    rng: &mut R,
) -> Result<VideoClip> {
    check_same_dims(a, b)?;
    let lambda = sample_lambda(alpha, rng)?;
    video_mixup_with(a, b, lambda)
}

/// One rectangular patch pasted into a single frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutRegion {
    pub source_frame: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl CutRegion {
    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

/// Draws a rectangle covering roughly a Uniform(0.1, 0.5) fraction of an H×W frame.
pub fn sample_cut_region<R: Rng + ?Sized>(dims: [usize; 4], rng: &mut R) -> CutRegion {
    let [_, t, h, w] = dims;
    let fraction: f64 = rng.random_range(0.1..0.5);
    let area = fraction * (h * w) as f64;
    let aspect: f64 = rng.random_range(0.5f64.ln()..2.0f64.ln()).exp();
    let height = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let width = ((area / height as f64).round() as usize).clamp(1, w);
    CutRegion {
        source_frame: rng.random_range(0..t),
        top: rng.random_range(0..=h - height),
        left: rng.random_range(0..=w - width),
        height,
        width,
    }
}

/// Pastes `regions[j]` of `b` into frame `j` of `a`; `None` leaves the frame untouched.
pub fn video_cutmix_with(a: &VideoClip, b: &VideoClip, regions: &[Option<CutRegion>]) -> Result<VideoClip> {
    check_same_dims(a, b)?;
    let [c, t, h, w] = a.dims();
    if regions.len() != t {
        return Err(StcrError::Argument(format!(
            "expected one region per frame ({t}), got {}",
            regions.len()
        )));
    }
    let mut out = a.data().to_vec();
    let src = b.data();
    for (j, region) in regions.iter().enumerate() {
        let Some(r) = region else { continue };
        if r.top + r.height > h || r.left + r.width > w || r.source_frame >= t {
            return Err(StcrError::Argument(format!("cut region {r:?} outside the frame")));
        }
        for ch in 0..c {
            for y in r.top..r.top + r.height {
                let dst = ((ch * t + j) * h + y) * w;
                let from = ((ch * t + r.source_frame) * h + y) * w;
                out[dst + r.left..dst + r.left + r.width]
                    .copy_from_slice(&src[from + r.left..from + r.left + r.width]);
            }
        }
    }
    VideoClip::from_vec(a.dims(), out)
}

/// Replaces one random region per frame of `a` with the same region of a random frame of `b`.
pub fn video_cutmix<R: Rng + ?Sized>(a: &VideoClip, b: &VideoClip, rng: &mut R) -> Result<VideoClip> {
    Ok(video_cutmix_sampled(a, b, rng)?.0)
}

pub(crate) fn video_cutmix_sampled<R: Rng + ?Sized>(
    a: &VideoClip,
    b: &VideoClip,
    rng: &mut R,
) -> Result<(VideoClip, Vec<CutRegion>)> {
    check_same_dims(a, b)?;
    let [_, t, h, w] = a.dims();
    if h < 2 || w < 2 {
        return Err(StcrError::dim("H/W", "cutmix needs frames of at least 2×2"));
    }
    let regions: Vec<CutRegion> = (0..t).map(|_| sample_cut_region(a.dims(), rng)).collect();
    let wrapped: Vec<Option<CutRegion>> = regions.iter().copied().map(Some).collect();
    Ok((video_cutmix_with(a, b, &wrapped)?, regions))
}

/// Adds the same C×H×W field to every frame. `field` is ordered (c, h, w).
pub fn gaussian_noise_with(clip: &VideoClip, field: &[f64]) -> Result<VideoClip> {
    let [c, t, h, w] = clip.dims();
    let plane = h * w;
    if field.len() != c * plane {
        return Err(StcrError::dim(
            "noise field",
            format!("expected {} values, got {}", c * plane, field.len()),
        ));
    }
    let mut out = clip.data().to_vec();
    for ch in 0..c {
        let f = &field[ch * plane..(ch + 1) * plane];
        for j in 0..t {
            let start = (ch * t + j) * plane;
            out[start..start + plane].iter_mut().zip(f).for_each(|(v, n)| *v += n);
        }
    }
    VideoClip::from_vec(clip.dims(), out)
}

pub fn sample_noise_field<R: Rng + ?Sized>(dims: [usize; 4], sigma: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(StcrError::Argument(format!("noise sigma {sigma} must be finite and >= 0")));
    }
    let [c, _, h, w] = dims;
    if sigma == 0.0 {
        return Ok(vec![0.0; c * h * w]);
    }
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    Ok((0..c * h * w).map(|_| normal.sample(rng)).collect())
}

/// One white-noise field ~ N(0, sigma^2), identical for every frame.
pub fn gaussian_noise<R: Rng + ?Sized>(clip: &VideoClip, sigma: f64, rng: &mut R) -> Result<VideoClip> {
    let field = sample_noise_field(clip.dims(), sigma, rng)?;
    gaussian_noise_with(clip, &field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_clip(dims: [usize; 4], seed: u64) -> VideoClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoClip::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn intra_mixup_endpoints() {
        let clip = random_clip([2, 4, 3, 3], 1);
        assert_eq!(intra_video_mixup_with(&clip, 0.0, 2).unwrap(), clip);
        let all_k = intra_video_mixup_with(&clip, 1.0, 2).unwrap();
        for j in 0..4 {
            assert_eq!(all_k.frame(j), clip.frame(2));
        }
    }

    #[test]
    fn intra_mixup_source_frame_is_fixed_point() {
        let clip = random_clip([2, 5, 3, 3], 2);
        let out = intra_video_mixup_with(&clip, 0.37, 3).unwrap();
        for (a, b) in out.frame(3).iter().zip(clip.frame(3)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn intra_mixup_rejects_single_frame() {
        let clip = random_clip([1, 1, 2, 2], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            intra_video_mixup(&clip, 1.0, &mut rng),
            Err(StcrError::DegenerateInput(_))
        ));
    }

    #[test]
    fn intra_mixup_records_draws() {
        let clip = random_clip([1, 6, 2, 2], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (out, rec) = intra_video_mixup(&clip, 1.0, &mut rng).unwrap();
        assert_eq!(rec.variant, AugmentVariant::Intra);
        assert!((0.0..=1.0).contains(&rec.lambda));
        assert!(rec.source_frame_index < 6);
        assert_eq!(out, intra_video_mixup_with(&clip, rec.lambda, rec.source_frame_index).unwrap());
    }

    #[test]
    fn inter_mixup_of_constants_averages() {
        let a = VideoClip::from_fn([1, 3, 2, 2], |_| 2.0);
        let b = VideoClip::from_fn([1, 3, 2, 2], |_| 6.0);
        let out = inter_video_mixup_with(&a, &b, 0.5, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 4.0));
        assert_eq!(inter_video_mixup_with(&a, &b, 0.0, 1).unwrap(), a);
        let c = VideoClip::zeros([1, 3, 2, 3]);
        assert!(matches!(
            inter_video_mixup_with(&a, &c, 0.5, 0),
            Err(StcrError::Dimension { .. })
        ));
    }

    #[test]
    fn inter_with_self_equals_intra_under_same_seed() {
        let clip = random_clip([2, 4, 2, 2], 5);
        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        let (a, ra) = intra_video_mixup(&clip, 1.0, &mut r1).unwrap();
        let (b, rb) = inter_video_mixup(&clip, &clip, 1.0, &mut r2).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.lambda, rb.lambda);
    }

    #[test]
    fn video_mixup_endpoints() {
        let a = random_clip([2, 3, 2, 2], 6);
        let b = random_clip([2, 3, 2, 2], 7);
        assert_eq!(video_mixup_with(&a, &b, 0.0).unwrap(), a);
        assert_eq!(video_mixup_with(&a, &b, 1.0).unwrap(), b);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(video_mixup(&a, &a, 1.0, &mut rng).unwrap(), a);
    }

    #[test]
    fn cutmix_degenerate_regions() {
        let a = random_clip([2, 2, 4, 4], 8);
        let b = random_clip([2, 2, 4, 4], 9);
        assert_eq!(video_cutmix_with(&a, &b, &[None, None]).unwrap(), a);
        let full = CutRegion {
            source_frame: 1,
            top: 0,
            left: 0,
            height: 4,
            width: 4,
        };
        let out = video_cutmix_with(&a, &b, &[Some(full), None]).unwrap();
        assert_eq!(out.frame(0), b.frame(1));
        assert_eq!(out.frame(1), a.frame(1));
    }

    #[test]
    fn cutmix_cells_come_from_either_clip() {
        let a = VideoClip::from_fn([2, 3, 6, 6], |i| i as f64);
        let b = VideoClip::from_fn([2, 3, 6, 6], |i| -(i as f64) - 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (out, regions) = video_cutmix_sampled(&a, &b, &mut rng).unwrap();
        // mask oracle: a cell is inside its frame's rectangle iff it took b's value
        for (j, r) in regions.iter().enumerate() {
            for ch in 0..2 {
                for y in 0..6 {
                    for x in 0..6 {
                        let inside = y >= r.top && y < r.top + r.height && x >= r.left && x < r.left + r.width;
                        let expect = if inside { b.at(ch, r.source_frame, y, x) } else { a.at(ch, j, y, x) };
                        assert_eq!(out.at(ch, j, y, x), expect);
                    }
                }
            }
            let frac = r.area() as f64 / 36.0;
            assert!((0.02..=0.75).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn noise_is_identical_across_frames() {
        let clip = random_clip([2, 4, 3, 3], 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let out = gaussian_noise(&clip, 0.3, &mut rng).unwrap();
        let d0: Vec<f64> = out.frame(0).iter().zip(clip.frame(0)).map(|(a, b)| a - b).collect();
        for j in 1..4 {
            let dj: Vec<f64> = out.frame(j).iter().zip(clip.frame(j)).map(|(a, b)| a - b).collect();
            for (x, y) in d0.iter().zip(&dj) {
                assert!((x - y).abs() < 1e-14);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        assert_eq!(gaussian_noise(&clip, 0.0, &mut rng).unwrap(), clip);
        assert!(gaussian_noise(&clip, -1.0, &mut rng).is_err());
    }

    #[test]
    fn noise_field_std_matches_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let sigma = 0.7;
        let field = sample_noise_field([1, 1, 1, 100_000], sigma, &mut rng).unwrap();
        let n = field.len() as f64;
        let mean = field.iter().sum::<f64>() / n;
        let std = (field.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std / sigma - 1.0).abs() < 0.02, "{std}");
    }

    #[test]
    fn invalid_alpha_is_an_argument_error() {
        let clip = random_clip([1, 3, 2, 2], 14);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(intra_video_mixup(&clip, 0.0, &mut rng), Err(StcrError::Argument(_))));
    }
}
