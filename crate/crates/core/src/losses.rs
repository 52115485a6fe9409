//! Structural (criterion-gated distillation + view consistency) and logical
//! (feature-encoder reconstruction + hard-mined converter) losses.
//!
//! Each loss has a graph form used by the trainer and a value form on plain
//! feature maps. The value forms build a throwaway graph, so both share one
//! implementation.

use crate::error::{Result, SpaceError};
use crate::graph::{Graph, NodeId};
use crate::networks::{converter_forward, FeatureMap, NetworkConfig, ParamSet};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 0.999;

/// Element-wise running threshold on squared teacher–student differences.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionState {
    pub shape: Vec<usize>,
    pub upsilon: Vec<f64>,
    pub alpha: f64,
    pub initialized: bool,
}

impl CriterionState {
    pub fn new(alpha: f64) -> Self {
        CriterionState {
            shape: Vec::new(),
            upsilon: Vec::new(),
            alpha,
            initialized: false,
        }
    }

    /// An initialized state holding `value` everywhere.
    pub fn constant(shape: &[usize], value: f64, alpha: f64) -> Self {
        CriterionState {
            shape: shape.to_vec(),
            upsilon: vec![value; shape.iter().product()],
            alpha,
            initialized: true,
        }
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if self.initialized && self.upsilon.len() != t.numel() {
            return Err(SpaceError::contract(format!(
                "criterion holds {} elements, features have {}",
                self.upsilon.len(),
                t.numel()
            )));
        }
        Ok(())
    }

    /// First call copies `f_ts_o`; later calls blend with factor `alpha`.
    pub fn update(&mut self, f_ts_o: &Tensor) -> Result<()> {
        if f_ts_o.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(SpaceError::contract("criterion update needs finite non-negative values"));
        }
        self.check(f_ts_o)?;
        if !self.initialized {
            self.shape = f_ts_o.shape().to_vec();
            self.upsilon = f_ts_o.data().iter().map(|&v| v as f64).collect();
            self.initialized = true;
        } else {
            let a = self.alpha;
            for (u, &f) in self.upsilon.iter_mut().zip(f_ts_o.data()) {
                *u = a * *u + (1.0 - a) * f as f64;
            }
        }
        Ok(())
    }
}

pub fn update_criterion(crit: &mut CriterionState, f_ts_o: &FeatureMap) -> Result<()> {
    crit.update(&f_ts_o.values)
}

/// The tensors behind one structural-loss evaluation. Masks hold 0.0 / 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct SclIntermediates {
    pub f_ts_o: Tensor,
    pub f_ts_w: Tensor,
    pub f_ts_s: Tensor,
    pub d_ow: Tensor,
    pub d_os: Tensor,
    pub d_ws: Tensor,
    pub m_o: Tensor,
    pub m_w: Tensor,
    pub m_s: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBundle {
    pub l_ts: f32,
    pub l_ow: f32,
    pub l_os: f32,
    pub l_ws: f32,
    pub l_structural: f32,
    pub l_fae: f32,
    pub l_fm: f32,
    pub l_logical: f32,
    pub l_total: f32,
    pub selected_fraction_o: f32,
    pub selected_fraction_w: f32,
    pub selected_fraction_s: f32,
}

impl LossBundle {
    /// Structural fields from `self`, logical fields from `logical`, total recomputed.
    pub fn merge(self, logical: LossBundle) -> LossBundle {
        LossBundle {
            l_fae: logical.l_fae,
            l_fm: logical.l_fm,
            l_logical: logical.l_logical,
            l_total: total_loss(self.l_structural, logical.l_logical),
            ..self
        }
    }

    pub fn values(&self) -> [f32; 12] {
        [
            self.l_ts,
            self.l_ow,
            self.l_os,
            self.l_ws,
            self.l_structural,
            self.l_fae,
            self.l_fm,
            self.l_logical,
            self.l_total,
            self.selected_fraction_o,
            self.selected_fraction_w,
            self.selected_fraction_s,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

pub fn total_loss(structural: f32, logical: f32) -> f32 {
    structural + logical
}

pub fn sq_diff(a: &FeatureMap, b: &FeatureMap) -> Result<FeatureMap> {
    Ok(FeatureMap {
        values: a.values.zip_map(&b.values, |x, y| (x - y) * (x - y))?,
    })
}

/// `Σ(loss ⊙ mask) / Σ mask`, or 0 for an empty mask.
pub fn masked_mean(loss: &Tensor, mask: &Tensor) -> Result<f32> {
    let mut g = Graph::new();
    let l = g.constant(loss.clone());
    let m = masked_mean_node(&mut g, l, mask)?;
    Ok(g.value(m).item())
}

pub fn masked_mean_node(g: &mut Graph, loss: NodeId, mask: &Tensor) -> Result<NodeId> {
    g.masked_mean(loss, mask.clone())
}

pub fn sq_diff_node(g: &mut Graph, a: NodeId, b: NodeId) -> Result<NodeId> {
    let d = g.sub(a, b)?;
    Ok(g.square(d))
}

fn indicator(t: &Tensor, crit: &CriterionState, pick: impl Fn(f64, f64) -> bool) -> Result<Tensor> {
    crit.check(t)?;
    if !crit.initialized {
        return Err(SpaceError::contract("masks need an initialized criterion"));
    }
    let d = t
        .data()
        .iter()
        .zip(&crit.upsilon)
        .map(|(&v, &u)| if pick(v as f64, u) { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(t.shape().to_vec(), d)
}

/// `m_o = [f_ts_o > Υ]`, `m_w = [f_ts_w < Υ]`, `m_s = [f_ts_s < Υ]`.
pub fn build_masks(inter: &SclIntermediates, crit: &CriterionState) -> Result<SclIntermediates> {
    Ok(SclIntermediates {
        m_o: indicator(&inter.f_ts_o, crit, |v, u| v > u)?,
        m_w: indicator(&inter.f_ts_w, crit, |v, u| v < u)?,
        m_s: indicator(&inter.f_ts_s, crit, |v, u| v < u)?,
        ..inter.clone()
    })
}

/// Graph handles of the structural loss terms.
#[derive(Debug, Clone, Copy)]
pub struct SclNodes {
    pub l_ts: NodeId,
    pub l_ow: NodeId,
    pub l_os: NodeId,
    pub l_ws: NodeId,
    pub l_structural: NodeId,
}

/// Builds the structural loss on `g` and then advances `crit`.
///
/// `t_o` is the standardized teacher output on the original view and
/// `s_o`, `s_w`, `s_s` the student outputs on the original, weak and strong
/// views. The teacher branch and `s_o` inside the consistency terms are cut
/// from the gradient. An uninitialized criterion is seeded from this step's
/// `f_ts_o` before the masks are built.
pub fn scl_graph(
    g: &mut Graph,
    t_o: NodeId,
    s_o: NodeId,
    s_w: NodeId,
    s_s: NodeId,
    crit: &mut CriterionState,
    lambda1: f32,
) -> Result<(SclNodes, SclIntermediates, LossBundle)> {
    let shape = g.value(t_o).shape().to_vec();
    for id in [s_o, s_w, s_s] {
        if g.value(id).shape() != shape.as_slice() {
            return Err(SpaceError::contract(format!(
                "structural loss inputs differ in shape: {:?} vs {:?}",
                g.value(id).shape(),
                shape
            )));
        }
    }
    let t = g.stop_gradient(t_o);
    let s_o_const = g.stop_gradient(s_o);

    let f_ts_o = sq_diff_node(g, t, s_o)?;
    let f_ts_w = sq_diff_node(g, t, s_w)?;
    let f_ts_s = sq_diff_node(g, t, s_s)?;
    let d_ow = sq_diff_node(g, s_o_const, s_w)?;
    let d_os = sq_diff_node(g, s_o_const, s_s)?;
    let d_ws = sq_diff_node(g, s_w, s_s)?;

    let seeded = !crit.initialized;
    if seeded {
        crit.update(g.value(f_ts_o))?;
    }
    let inter = build_masks(
        &SclIntermediates {
            f_ts_o: g.value(f_ts_o).clone(),
            f_ts_w: g.value(f_ts_w).clone(),
            f_ts_s: g.value(f_ts_s).clone(),
            d_ow: g.value(d_ow).clone(),
            d_os: g.value(d_os).clone(),
            d_ws: g.value(d_ws).clone(),
            m_o: Tensor::zeros(&shape),
            m_w: Tensor::zeros(&shape),
            m_s: Tensor::zeros(&shape),
        },
        crit,
    )?;
    let m_ws = inter.m_w.zip_map(&inter.m_s, |a, b| a * b)?;

    let l_ts = masked_mean_node(g, f_ts_o, &inter.m_o)?;
    let l_ow = masked_mean_node(g, d_ow, &inter.m_w)?;
    let l_os = masked_mean_node(g, d_os, &inter.m_s)?;
    let l_ws = masked_mean_node(g, d_ws, &m_ws)?;
    let c1 = g.add(l_ow, l_os)?;
    let consistency = g.add(c1, l_ws)?;
    let weighted = g.scale(consistency, lambda1);
    let l_structural = g.add(l_ts, weighted)?;

    if !seeded {
        crit.update(&inter.f_ts_o)?;
    }

    let bundle = LossBundle {
        l_ts: g.value(l_ts).item(),
        l_ow: g.value(l_ow).item(),
        l_os: g.value(l_os).item(),
        l_ws: g.value(l_ws).item(),
        l_structural: g.value(l_structural).item(),
        selected_fraction_o: inter.m_o.mean() as f32,
        selected_fraction_w: inter.m_w.mean() as f32,
        selected_fraction_s: inter.m_s.mean() as f32,
        ..Default::default()
    };
    let nodes = SclNodes {
        l_ts,
        l_ow,
        l_os,
        l_ws,
        l_structural,
    };
    Ok((nodes, inter, bundle))
}

/// Value form of [`scl_graph`].
pub fn scl_losses(
    t_o: &FeatureMap,
    s_o: &FeatureMap,
    s_w: &FeatureMap,
    s_s: &FeatureMap,
    crit: &mut CriterionState,
    lambda1: f32,
) -> Result<(LossBundle, SclIntermediates)> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = [t_o, s_o, s_w, s_s]
        .iter()
        .map(|f| g.constant(f.values.clone()))
        .collect();
    let (_, inter, bundle) = scl_graph(&mut g, ids[0], ids[1], ids[2], ids[3], crit, lambda1)?;
    Ok((bundle, inter))
}

/// Linear interpolation between order statistics at position `q·(N−1)`.
pub fn quantile(values: &[f32], q: f64) -> Result<f32> {
    if values.is_empty() {
        return Err(SpaceError::contract("quantile of an empty tensor"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(SpaceError::contract(format!("quantile level {q} outside [0, 1]")));
    }
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    Ok(quantile_sorted(&v, q))
}

pub(crate) fn quantile_sorted(sorted: &[f32], q: f64) -> f32 {
    let p = q * (sorted.len() - 1) as f64;
    let lo = p.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = p - lo as f64;
    let a = sorted[lo] as f64;
    let b = sorted[hi] as f64;
    (a + frac * (b - a)) as f32
}

/// Graph handles of the logical loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LogicalNodes {
    pub l_fae: NodeId,
    pub l_fm: NodeId,
    pub l_logical: NodeId,
}

/// Builds the logical loss on `g`.
///
/// `t`, `ae` and `s` are teacher (standardized), encoder and student outputs
/// on the encoder-branch view; `converter` maps the gradient-cut student
/// features through the feature converter.
pub fn logical_graph(
    g: &mut Graph,
    t: NodeId,
    ae: NodeId,
    s: NodeId,
    converter: impl FnOnce(&mut Graph, NodeId) -> Result<NodeId>,
    q: f64,
    lambda2: f32,
) -> Result<(LogicalNodes, LossBundle)> {
    let shape = g.value(ae).shape();
    if g.value(t).shape() != shape || g.value(s).shape() != shape {
        return Err(SpaceError::contract("logical loss inputs differ in shape"));
    }
    let t_const = g.stop_gradient(t);
    let fae = sq_diff_node(g, ae, t_const)?;
    let l_fae = g.mean_all(fae);

    let s_const = g.stop_gradient(s);
    let converted = converter(g, s_const)?;
    let z = sq_diff_node(g, ae, converted)?;
    let d_hard = quantile(g.value(z).data(), q)?;
    let hard = g.value(z).map(|v| if v >= d_hard { 1.0 } else { 0.0 });
    let l_fm = masked_mean_node(g, z, &hard)?;
    let weighted = g.scale(l_fm, lambda2);
    let l_logical = g.add(l_fae, weighted)?;

    let bundle = LossBundle {
        l_fae: g.value(l_fae).item(),
        l_fm: g.value(l_fm).item(),
        l_logical: g.value(l_logical).item(),
        ..Default::default()
    };
    Ok((
        LogicalNodes {
            l_fae,
            l_fm,
            l_logical,
        },
        bundle,
    ))
}

/// Value form of [`logical_graph`] with the converter given by `cfg`/`fm`.
pub fn logical_losses(
    t: &FeatureMap,
    ae: &FeatureMap,
    s: &FeatureMap,
    cfg: &NetworkConfig,
    fm: &ParamSet,
    q: f64,
    lambda2: f32,
) -> Result<LossBundle> {
    let mut g = Graph::new();
    let fm_bound = fm.bind(&mut g, false);
    let t = g.constant(t.batched());
    let ae = g.constant(ae.batched());
    let s = g.constant(s.batched());
    let (_, bundle) = logical_graph(
        &mut g,
        t,
        ae,
        s,
        |g, x| converter_forward(cfg, g, &fm_bound, x),
        q,
        lambda2,
    )?;
    Ok(bundle)
}
