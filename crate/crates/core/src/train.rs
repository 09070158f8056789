//! Siamese pretraining: double crops, the noise-path augmentation pipeline,
//! SGD with momentum and weight decay, and collapse monitoring.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    intra_video_mixup_with, inter_video_mixup_with, sample_lambda, sample_noise_field,
    video_cutmix_sampled, video_mixup_with, gaussian_noise_with, AugmentVariant, MixupRecord,
};
use crate::autodiff::{Graph, NodeId};
use crate::clip::VideoClip;
use crate::error::{Result, StcrError};
use crate::loss::{siamese_loss, LossReport, DEFAULT_GAMMA};
use crate::model::{init_params, BackboneConfig, ModelParams};
use crate::tensor::Tensor;
use crate::transform::{stt_apply_clip, stt_sample, TransformId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub batch_size: usize,
    pub gamma: f64,
    pub alpha: f64,
    /// (T_clip, H_crop, W_crop)
    pub crop: [usize; 3],
    pub seed: u64,
    pub augment: AugmentVariant,
    pub use_stt: bool,
    /// Standard deviation for the Gaussian-noise variant.
    pub noise_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            weight_decay: 5e-4,
            momentum: 0.9,
            epochs: 10,
            lr_decay_every: 10,
            lr_decay_factor: 0.1,
            batch_size: 8,
            gamma: DEFAULT_GAMMA,
            alpha: 1.0,
            crop: [8, 16, 16],
            seed: 0,
            augment: AugmentVariant::Intra,
            use_stt: true,
            noise_sigma: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(StcrError::Config(what.to_string()));
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate must be >= 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.lr_decay_every == 0 {
            return bad("lr_decay_every must be positive");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return bad("lr_decay_factor must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma must be >= 0");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if self.crop.contains(&0) || self.crop[1] != self.crop[2] {
            return bad("crop must be positive with H_crop == W_crop");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        Ok(())
    }

    /// Step-decayed learning rate: `lr0 * factor^floor(epoch / every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    /// One buffer per tensor of [`ModelParams::named_tensors`].
    pub momentum: Vec<Tensor>,
    pub step: usize,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let momentum = params
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        TrainState {
            params,
            momentum,
            step: 0,
            epoch: 0,
        }
    }

    /// Fresh parameters drawn from the run seed.
    pub fn initial(backbone: &BackboneConfig, config: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0]));
        Ok(TrainState::new(init_params(backbone, &mut rng)?))
    }

    /// `buf = momentum * buf + grad + wd * param; param -= lr * buf`.
    pub fn sgd_update(&mut self, grads: &[Tensor], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        let tied = self.params.config.tie_heads;
        let params = self.params.tensors_mut();
        if grads.len() != params.len() {
            return Err(StcrError::Argument(format!(
                "expected {} gradients, got {}",
                params.len(),
                grads.len()
            )));
        }
        for ((p, buf), g) in params.into_iter().zip(&mut self.momentum).zip(grads) {
            if g.shape() != p.shape() {
                return Err(StcrError::dim("gradient", "gradient shape does not match parameter"));
            }
            for ((pv, bv), gv) in p.data_mut().iter_mut().zip(buf.data_mut()).zip(g.data()) {
                *bv = momentum * *bv + gv + weight_decay * *pv;
                *pv -= lr * *bv;
            }
        }
        if tied {
            self.params.tie_heads();
        }
        Ok(())
    }
}

/// Extra self-supervised objective evaluated on the clean-path feature map and
/// added to the consistency loss.
pub trait PretextHead {
    fn name(&self) -> &str;
    fn loss(&self, g: &mut Graph, clean_feature: NodeId) -> Result<NodeId>;
}

/// Two crops sharing one temporal window at (when possible) different spatial offsets.
pub fn double_crop<R: Rng + ?Sized>(
    video: &VideoClip,
    crop: [usize; 3],
    rng: &mut R,
) -> Result<(VideoClip, VideoClip)> {
    let [_, t, h, w] = video.dims();
    let [ct, ch, cw] = crop;
    if ch != cw {
        return Err(StcrError::dim("H/W", "crop must be square"));
    }
    for (name, full, c) in [("T", t, ct), ("H", h, ch), ("W", w, cw)] {
        if c == 0 || c > full {
            return Err(StcrError::dim(name, format!("crop {c} larger than video extent {full}")));
        }
    }
    let t0 = rng.random_range(0..=t - ct);
    let offset = |rng: &mut R| (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw));
    let clean = offset(rng);
    let mut noise = offset(rng);
    if noise == clean {
        noise = offset(rng);
    }
    Ok((
        video.crop([t0, clean.0, clean.1], crop)?,
        video.crop([t0, noise.0, noise.1], crop)?,
    ))
}

pub fn center_crop(video: &VideoClip, crop: [usize; 3]) -> Result<VideoClip> {
    let [_, t, h, w] = video.dims();
    let start = [
        t.saturating_sub(crop[0]) / 2,
        h.saturating_sub(crop[1]) / 2,
        w.saturating_sub(crop[2]) / 2,
    ];
    video.crop(start, crop)
}

/// Mean over descriptor coordinates of the across-batch population standard deviation.
pub fn collapse_metric(descriptors: &[Tensor]) -> Result<f64> {
    if descriptors.len() < 2 {
        return Err(StcrError::Argument("collapse metric needs a batch of at least 2".into()));
    }
    let n = descriptors[0].numel();
    if descriptors.iter().any(|d| d.numel() != n) {
        return Err(StcrError::dim("descriptor", "descriptors differ in size"));
    }
    let b = descriptors.len() as f64;
    let mut total = 0.0;
    for i in 0..n {
        let mean = descriptors.iter().map(|d| d.data()[i]).sum::<f64>() / b;
        let var = descriptors.iter().map(|d| (d.data()[i] - mean).powi(2)).sum::<f64>() / b;
        total += var.sqrt();
    }
    Ok(total / n as f64)
}

/// Deterministic child seed for stream `parts` of a master seed.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    // splitmix64 finalizer over the folded parts
    let mut z = master;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p.wrapping_mul(0xD1B5_4A32_D192_ED03));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// The noise-path input for one clip and what was drawn to make it.
#[derive(Clone, Debug)]
pub struct NoisePath {
    pub clean: VideoClip,
    pub noise: VideoClip,
    pub transform: TransformId,
    pub record: MixupRecord,
}

/// Crop, transform, then mix. `partner` supplies content for the cross-clip variants.
pub fn prepare_pair<R: Rng + ?Sized>(
    video: &VideoClip,
    partner: &VideoClip,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<NoisePath> {
    let (clean, noise) = double_crop(video, config.crop, rng)?;
    let transform = if config.use_stt {
        stt_sample(rng)
    } else {
        TransformId::IDENTITY
    };
    let noise = stt_apply_clip(&noise, transform)?;
    let variant = config.augment;
    let partner_crop = if variant.needs_partner() {
        let (p, _) = double_crop(partner, config.crop, rng)?;
        Some(p)
    } else {
        None
    };
    let frames = noise.frames();
    let (noise, record) = match variant {
        AugmentVariant::Intra | AugmentVariant::Inter => {
            if frames < 2 && variant == AugmentVariant::Intra {
                return Err(StcrError::DegenerateInput(
                    "intra-video mixup needs at least two frames".into(),
                ));
            }
            let lambda = sample_lambda(config.alpha, rng)?;
            let k = rng.random_range(0..frames);
            let mixed = match &partner_crop {
                Some(p) => inter_video_mixup_with(&noise, p, lambda, k)?,
                None => intra_video_mixup_with(&noise, lambda, k)?,
            };
            (mixed, MixupRecord { lambda, source_frame_index: k, variant })
        }
        AugmentVariant::VideoMixup => {
            let lambda = sample_lambda(config.alpha, rng)?;
            let p = partner_crop.as_ref().expect("partner crop");
            let mixed = video_mixup_with(&noise, p, lambda)?;
            (mixed, MixupRecord { lambda, source_frame_index: 0, variant })
        }
        AugmentVariant::CutMix => {
            let p = partner_crop.as_ref().expect("partner crop");
            let (mixed, regions) = video_cutmix_sampled(&noise, p, rng)?;
            let [_, _, h, w] = noise.dims();
            let frac = regions.iter().map(|r| r.area() as f64).sum::<f64>() / (regions.len() * h * w) as f64;
            (
                mixed,
                MixupRecord {
                    lambda: frac,
                    source_frame_index: regions[0].source_frame,
                    variant,
                },
            )
        }
        AugmentVariant::GaussianNoise => {
            let field = sample_noise_field(noise.dims(), config.noise_sigma, rng)?;
            (
                gaussian_noise_with(&noise, &field)?,
                MixupRecord { lambda: 0.0, source_frame_index: 0, variant },
            )
        }
    };
    Ok(NoisePath {
        clean,
        noise,
        transform,
        record,
    })
}

/// Everything one optimizer step produced.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub report: LossReport,
    pub lr: f64,
    /// `None` for a batch of one.
    pub collapse: Option<f64>,
    pub draws: Vec<(TransformId, MixupRecord)>,
}

pub fn pretrain_step<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &[VideoClip],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<StepOutcome> {
    pretrain_step_with(state, batch, config, rng, &[])
}

/// One SGD step over `batch`; losses are per clip and averaged over the batch.
pub fn pretrain_step_with<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &[VideoClip],
    config: &TrainConfig,
    rng: &mut R,
    pretext: &[Box<dyn PretextHead>],
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(StcrError::Argument("empty batch".into()));
    }
    let pairs = batch
        .iter()
        .enumerate()
        .map(|(i, v)| prepare_pair(v, &batch[(i + 1) % batch.len()], config, rng))
        .collect::<Result<Vec<_>>>()?;

    let inv_b = 1.0 / batch.len() as f64;
    let mut acc: Vec<Tensor> = state
        .params
        .named_tensors()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    let mut reports = Vec::with_capacity(pairs.len());
    let mut descriptors = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let mut g = Graph::new();
        let nodes = state.params.register(&mut g, true);
        let out = siamese_loss(
            &mut g,
            &nodes,
            &state.params.config,
            &pair.clean,
            &pair.noise,
            pair.transform,
            config.gamma,
        )?;
        let mut total = out.total;
        let mut report = out.report;
        for head in pretext {
            let extra = head.loss(&mut g, out.clean_feature)?;
            total = g.add(total, extra)?;
            report.total = g.value(total).data()[0];
        }
        if !report.total.is_finite() {
            return Err(StcrError::Numeric(format!(
                "non-finite loss at step {} (l_tw {}, l_cw {})",
                state.step, report.l_tw, report.l_cw
            )));
        }
        let grads = g.backward(total)?;
        for (a, gt) in acc.iter_mut().zip(nodes.collect(&grads, &state.params)) {
            a.data_mut().iter_mut().zip(gt.data()).for_each(|(x, y)| *x += y * inv_b);
        }
        reports.push(report);
        descriptors.push(g.value(out.clean_descriptor).clone());
    }

    let lr = config.lr_at(state.epoch);
    state.sgd_update(&acc, lr, config.momentum, config.weight_decay)?;
    state.step += 1;

    Ok(StepOutcome {
        report: LossReport::mean(&reports).expect("non-empty batch"),
        lr,
        collapse: collapse_metric(&descriptors).ok(),
        draws: pairs.iter().map(|p| (p.transform, p.record)).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_tw: f64,
    pub l_cw: f64,
    pub total: f64,
    pub gamma: f64,
    pub collapse_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AugmentLogRow {
    pub step: usize,
    pub clip: usize,
    pub variant: AugmentVariant,
    pub lambda: f64,
    pub k: usize,
    pub flip: u8,
    pub rotation: u8,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub steps: Vec<TrainLogRow>,
    pub augments: Vec<AugmentLogRow>,
}

impl TrainLog {
    pub const STEP_HEADER: &'static str = "step,epoch,lr,l_tw,l_cw,total,gamma,collapse_metric";
    pub const AUGMENT_HEADER: &'static str = "step,clip,variant,lambda,k,flip,rotation";

    /// Per-step losses as CSV; an undefined collapse metric is an empty field.
    pub fn steps_csv(&self) -> String {
        let mut out = format!("{}\n", Self::STEP_HEADER);
        for r in &self.steps {
            let collapse = r.collapse_metric.map(|c| c.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.step, r.epoch, r.lr, r.l_tw, r.l_cw, r.total, r.gamma, collapse
            ));
        }
        out
    }

    pub fn augments_csv(&self) -> String {
        let mut out = format!("{}\n", Self::AUGMENT_HEADER);
        for r in &self.augments {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.step, r.clip, r.variant, r.lambda, r.k, r.flip, r.rotation
            ));
        }
        out
    }
}

/// Full pretraining run over `videos`. Each epoch visits every video once in a
/// seeded shuffled order.
pub fn pretrain(state: &mut TrainState, videos: &[VideoClip], config: &TrainConfig) -> Result<TrainLog> {
    pretrain_with(state, videos, config, &[])
}

pub fn pretrain_with(
    state: &mut TrainState,
    videos: &[VideoClip],
    config: &TrainConfig,
    pretext: &[Box<dyn PretextHead>],
) -> Result<TrainLog> {
    config.validate()?;
    let mut log = TrainLog::default();
    if config.epochs == 0 {
        return Ok(log);
    }
    if videos.is_empty() {
        return Err(StcrError::Argument("no training videos".into()));
    }
    let start_epoch = state.epoch;
    for epoch in start_epoch..start_epoch + config.epochs {
        state.epoch = epoch;
        let mut order: Vec<usize> = (0..videos.len()).collect();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[1, epoch as u64]));
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<VideoClip> = chunk.iter().map(|&i| videos[i].clone()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[2, state.step as u64]));
            let step = state.step;
            let out = pretrain_step_with(state, &batch, config, &mut rng, pretext)?;
            log.steps.push(TrainLogRow {
                step,
                epoch,
                lr: out.lr,
                l_tw: out.report.l_tw,
                l_cw: out.report.l_cw,
                total: out.report.total,
                gamma: out.report.gamma,
                collapse_metric: out.collapse,
            });
            for (&clip, (t, rec)) in chunk.iter().zip(&out.draws) {
                let (flip, rotation) = t.as_pair();
                log.augments.push(AugmentLogRow {
                    step,
                    clip,
                    variant: rec.variant,
                    lambda: rec.lambda,
                    k: rec.source_frame_index,
                    flip,
                    rotation,
                });
            }
        }
    }
    state.epoch = start_epoch + config.epochs;
    Ok(log)
}
