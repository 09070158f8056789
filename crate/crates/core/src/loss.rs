//! Temporal-wise and channel-wise consistency losses.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::clip::VideoClip;
use crate::error::{Result, StcrError};
use crate::model::{backbone_forward, channel_head, psi_pool, BackboneConfig, ParamNodes};
use crate::transform::{feature_inverse_node, TransformId};

pub const DEFAULT_GAMMA: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_tw: f64,
    pub l_cw: f64,
    pub total: f64,
    pub gamma: f64,
}

impl LossReport {
    pub fn mean(reports: &[LossReport]) -> Option<LossReport> {
        let n = reports.len() as f64;
        let first = reports.first()?;
        Some(LossReport {
            l_tw: reports.iter().map(|r| r.l_tw).sum::<f64>() / n,
            l_cw: reports.iter().map(|r| r.l_cw).sum::<f64>() / n,
            total: reports.iter().map(|r| r.total).sum::<f64>() / n,
            gamma: first.gamma,
        })
    }
}

/// Mean squared error between the clean descriptor and the re-aligned noise descriptor.
pub fn loss_tw(g: &mut Graph, d_clean: NodeId, d_noise_aligned: NodeId) -> Result<NodeId> {
    let diff = g.sub(d_clean, d_noise_aligned)?;
    let sq = g.mul(diff, diff)?;
    g.mean_all(sq)
}

/// `KL(softmax(clean) || softmax(noise))`; gradients reach both arguments.
pub fn loss_cw(g: &mut Graph, logits_clean: NodeId, logits_noise: NodeId) -> Result<NodeId> {
    g.softmax_kl(logits_clean, logits_noise)
}

pub fn loss_total(g: &mut Graph, l_tw: NodeId, l_cw: NodeId, gamma: f64) -> Result<(NodeId, LossReport)> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(StcrError::Argument(format!("gamma {gamma} must be finite and >= 0")));
    }
    let scaled = g.scale(l_cw, gamma);
    let total = g.add(l_tw, scaled)?;
    let report = LossReport {
        l_tw: g.value(l_tw).data()[0],
        l_cw: g.value(l_cw).data()[0],
        total: g.value(total).data()[0],
        gamma,
    };
    Ok((total, report))
}

/// Graph handles produced by one siamese pass.
#[derive(Clone, Copy, Debug)]
pub struct SiameseOutputs {
    pub total: NodeId,
    pub clean_feature: NodeId,
    pub noise_feature: NodeId,
    pub clean_descriptor: NodeId,
    pub noise_descriptor: NodeId,
    pub report: LossReport,
}

/// Both siamese paths for one clip pair. `noise` must already carry the
/// transform `t` (and any mixing); its feature map is re-aligned with `t`'s
/// inverse before pooling.
pub fn siamese_loss(
    g: &mut Graph,
    params: &ParamNodes,
    config: &BackboneConfig,
    clean: &VideoClip,
    noise: &VideoClip,
    t: TransformId,
    gamma: f64,
) -> Result<SiameseOutputs> {
    let xc = g.constant(clean.tensor().clone());
    let xn = g.constant(noise.tensor().clone());
    let fc = backbone_forward(g, params, config, xc)?;
    let fn_raw = backbone_forward(g, params, config, xn)?;
    let fn_aligned = feature_inverse_node(g, fn_raw, t)?;
    let dc = psi_pool(g, fc)?;
    let dn = psi_pool(g, fn_aligned)?;
    let tw = loss_tw(g, dc, dn)?;
    let lc = channel_head(g, &params.w_c_1, dc)?;
    let ln = channel_head(g, &params.w_c_2, dn)?;
    let cw = loss_cw(g, lc, ln)?;
    let (total, report) = loss_total(g, tw, cw, gamma)?;
    Ok(SiameseOutputs {
        total,
        clean_feature: fc,
        noise_feature: fn_aligned,
        clean_descriptor: dc,
        noise_descriptor: dn,
        report,
    })
}
