//! Loss terms for joint training of the two fields: RGB reconstruction,
//! Eikonal regularization, foreground-presence regularization, per-pixel
//! binary mask supervision, and per-cluster mask supervision.
//!
//! Every loss has a taped form (used in training) and a value-only
//! wrapper with the same math.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcore::tape::{sigmoid, NodeId, Tape};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Clamp used inside every logarithm.
pub const LOG_EPS: f64 = 1e-6;

/// Label value marking pixels without a cluster assignment.
pub const CLUSTER_SENTINEL: u8 = 255;

/// One view's supervision masks: a coarse binary foreground mask and a
/// median-grained cluster label map over the same pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub width: u32,
    pub height: u32,
    /// row-major H*W foreground flags
    pub coarse: Vec<bool>,
    /// row-major H*W labels in 0..K, or `CLUSTER_SENTINEL`
    pub clusters: Vec<u8>,
}

impl MaskSet {
    pub fn validate(&self, max_clusters: usize) -> Result<()> {
        let n = (self.width * self.height) as usize;
        if self.coarse.len() != n || self.clusters.len() != n {
            return Err(Error::Shape(format!(
                "mask set arrays ({}, {}) do not match {}x{}",
                self.coarse.len(),
                self.clusters.len(),
                self.width,
                self.height
            )));
        }
        if let Some(&bad) = self
            .clusters
            .iter()
            .find(|&&l| l != CLUSTER_SENTINEL && l as usize >= max_clusters)
        {
            return Err(Error::Config(format!(
                "cluster label {bad} exceeds K={max_clusters}"
            )));
        }
        Ok(())
    }
}

/// Weights gamma_1..gamma_5 of the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub color: f64,
    pub eikonal: f64,
    pub fg_reg: f64,
    pub binary_mask: f64,
    pub cluster_mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            color: 1.0,
            eikonal: 0.1,
            fg_reg: 0.01,
            binary_mask: 0.1,
            cluster_mask: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("color", self.color),
            ("eikonal", self.eikonal),
            ("fg_reg", self.fg_reg),
            ("binary_mask", self.binary_mask),
            ("cluster_mask", self.cluster_mask),
        ] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {v} is negative")));
            }
        }
        Ok(())
    }
}

/// Foreground-presence regularizer parameters. The indicator in the
/// reference formulation has zero gradient almost everywhere; training
/// uses a sigmoid surrogate with temperature `tau`, while reporting can
/// use the hard count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FgRegParams {
    pub beta_r: f64,
    pub w_th: f64,
    pub tau: f64,
}

impl Default for FgRegParams {
    fn default() -> Self {
        FgRegParams {
            beta_r: 1.0,
            w_th: 0.5,
            tau: 0.01,
        }
    }
}

/// Training stage: the cluster-mask term only participates in stage two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

/// Mean over the batch of squared L2 color error.
pub fn color_loss_tape(tape: &mut Tape, pred: NodeId, gt: NodeId) -> NodeId {
    let diff = tape.sub(pred, gt);
    let sq = tape.square(diff);
    let per_ray = tape.row_sum(sq);
    tape.mean_all(per_ray)
}

/// mean((|n| - 1)^2) over a batch of spatial gradients.
pub fn eikonal_loss_tape(tape: &mut Tape, normals: NodeId) -> NodeId {
    let sq = tape.square(normals);
    let norm2 = tape.row_sum(sq);
    let norm = tape.sqrt(norm2);
    let centered = tape.add_scalar(norm, -1.0);
    let dev = tape.square(centered);
    tape.mean_all(dev)
}

/// -log(beta_r * mean_i s((W_f_i - W_th)/tau)), the smooth surrogate of
/// the foreground-presence count.
pub fn fg_reg_loss_tape(tape: &mut Tape, weight_fg: NodeId, p: &FgRegParams) -> NodeId {
    let shifted = tape.add_scalar(weight_fg, -p.w_th);
    let scaled = tape.scale(shifted, 1.0 / p.tau);
    let soft = tape.sigmoid(scaled);
    let mean = tape.mean_all(soft);
    let arg = tape.scale(mean, p.beta_r);
    let clamped = tape.clamp(arg, LOG_EPS, f64::INFINITY);
    let ln = tape.ln(clamped);
    tape.scale(ln, -1.0)
}

/// Hard-indicator evaluation of the foreground regularizer, for
/// reporting: -log(clamp(beta_r/B * sum 1[W_f > W_th])).
pub fn fg_reg_loss_hard(weight_fg: &[f64], p: &FgRegParams) -> f64 {
    assert!(!weight_fg.is_empty());
    let count = weight_fg.iter().filter(|&&w| w > p.w_th).count() as f64;
    let arg = (p.beta_r * count / weight_fg.len() as f64).max(LOG_EPS);
    -arg.ln()
}

/// Per-pixel binary cross entropy of the rendered foreground weight
/// against the coarse mask.
pub fn binary_mask_loss_tape(tape: &mut Tape, weight_fg: NodeId, mask: &[bool]) -> NodeId {
    let rows = tape.value(weight_fg).rows();
    assert_eq!(rows, mask.len(), "mask length vs batch");
    let y = Tensor::from_vec(
        rows,
        1,
        mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    );
    let y_id = tape.leaf(y.clone());
    let one_minus_y = tape.leaf(y.map(|v| 1.0 - v));

    let w = tape.clamp(weight_fg, LOG_EPS, 1.0 - LOG_EPS);
    let ln_w = tape.ln(w);
    let neg_w = tape.scale(weight_fg, -1.0);
    let om_w = tape.add_scalar(neg_w, 1.0);
    let om_w = tape.clamp(om_w, LOG_EPS, 1.0 - LOG_EPS);
    let ln_om = tape.ln(om_w);

    let a = tape.mul(y_id, ln_w);
    let b = tape.mul(one_minus_y, ln_om);
    let s = tape.add(a, b);
    let m = tape.mean_all(s);
    tape.scale(m, -1.0)
}

/// Sum over clusters present in the batch of the binary entropy of the
/// cluster-mean foreground weight. Sentinel rays are excluded; clusters
/// with no rays contribute nothing. With `average` the sum is divided by
/// the number of present clusters.
pub fn cluster_mask_loss_tape(
    tape: &mut Tape,
    weight_fg: NodeId,
    labels: &[u8],
    average: bool,
) -> NodeId {
    let rows = tape.value(weight_fg).rows();
    assert_eq!(rows, labels.len(), "labels length vs batch");

    // dense re-indexing of the labels present in this batch
    let mut present: Vec<u8> = labels
        .iter()
        .copied()
        .filter(|&l| l != CLUSTER_SENTINEL)
        .collect();
    present.sort_unstable();
    present.dedup();
    if present.is_empty() {
        return tape.scalar(0.0);
    }
    let dense: Vec<u32> = labels
        .iter()
        .map(|&l| {
            if l == CLUSTER_SENTINEL {
                u32::MAX
            } else {
                present.binary_search(&l).unwrap() as u32
            }
        })
        .collect();

    let g = tape.cluster_mean(weight_fg, dense, present.len());
    let gc = tape.clamp(g, LOG_EPS, 1.0 - LOG_EPS);
    let ln_g = tape.ln(gc);
    let neg = tape.scale(gc, -1.0);
    let om = tape.add_scalar(neg, 1.0);
    let ln_om = tape.ln(om);
    let a = tape.mul(gc, ln_g);
    let b_left = tape.add_scalar(neg, 1.0);
    let b = tape.mul(b_left, ln_om);
    let s = tape.add(a, b);
    let total = tape.sum_all(s);
    let loss = tape.scale(total, -1.0);
    if average {
        tape.scale(loss, 1.0 / present.len() as f64)
    } else {
        loss
    }
}

/// Weighted total of the five parts; the cluster term is gated off in
/// stage one. Errors if any participating part is non-finite.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_tape(
    tape: &mut Tape,
    color: NodeId,
    eikonal: NodeId,
    fg_reg: NodeId,
    binary_mask: NodeId,
    cluster_mask: NodeId,
    weights: &LossWeights,
    stage: Stage,
) -> Result<NodeId> {
    let parts = [
        ("color", color, weights.color),
        ("eikonal", eikonal, weights.eikonal),
        ("fg_reg", fg_reg, weights.fg_reg),
        ("binary_mask", binary_mask, weights.binary_mask),
        (
            "cluster_mask",
            cluster_mask,
            if stage == Stage::One {
                0.0
            } else {
                weights.cluster_mask
            },
        ),
    ];
    let mut total: Option<NodeId> = None;
    for (name, id, w) in parts {
        let v = tape.value(id).item();
        if !v.is_finite() {
            return Err(Error::numeric(name, format!("non-finite loss part {v}")));
        }
        if w == 0.0 {
            continue;
        }
        let scaled = tape.scale(id, w);
        total = Some(match total {
            Some(t) => tape.add(t, scaled),
            None => scaled,
        });
    }
    Ok(total.unwrap_or_else(|| tape.scalar(0.0)))
}

// Value-only wrappers.

pub fn color_loss(pred: &Tensor, gt: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let p = tape.leaf(pred.clone());
    let g = tape.leaf(gt.clone());
    let l = color_loss_tape(&mut tape, p, g);
    tape.value(l).item()
}

pub fn eikonal_loss(normals: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let n = tape.leaf(normals.clone());
    let l = eikonal_loss_tape(&mut tape, n);
    tape.value(l).item()
}

pub fn fg_reg_loss(weight_fg: &[f64], p: &FgRegParams) -> f64 {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::from_vec(weight_fg.len(), 1, weight_fg.to_vec()));
    let l = fg_reg_loss_tape(&mut tape, w, p);
    tape.value(l).item()
}

pub fn binary_mask_loss(weight_fg: &[f64], mask: &[bool]) -> f64 {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::from_vec(weight_fg.len(), 1, weight_fg.to_vec()));
    let l = binary_mask_loss_tape(&mut tape, w, mask);
    tape.value(l).item()
}

pub fn cluster_mask_loss(weight_fg: &[f64], labels: &[u8]) -> f64 {
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::from_vec(weight_fg.len(), 1, weight_fg.to_vec()));
    let l = cluster_mask_loss_tape(&mut tape, w, labels, false);
    tape.value(l).item()
}

// Mask file formats: binary masks as 8-bit PNG with 0/255, cluster
// label maps as 8-bit PNG whose pixel values are the palette indices
// 0..K-1 with 255 for unlabeled.

pub fn save_binary_mask(path: &Path, width: u32, height: u32, mask: &[bool]) -> Result<()> {
    let data: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(width, height, data)
        .ok_or_else(|| Error::Shape("mask dimensions mismatch".into()))?;
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn load_binary_mask(path: &Path) -> Result<(u32, u32, Vec<bool>)> {
    let img = image::open(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let mask = img.into_raw().iter().map(|&v| v >= 128).collect();
    Ok((w, h, mask))
}

pub fn save_cluster_map(path: &Path, width: u32, height: u32, labels: &[u8]) -> Result<()> {
    let img = image::GrayImage::from_raw(width, height, labels.to_vec())
        .ok_or_else(|| Error::Shape("cluster map dimensions mismatch".into()))?;
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

pub fn load_cluster_map(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let img = image::open(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?
        .into_luma8();
    let (w, h) = img.dimensions();
    Ok((w, h, img.into_raw()))
}

pub fn save_mask_set(dir: &Path, index: usize, masks: &MaskSet) -> Result<()> {
    save_binary_mask(
        &dir.join(format!("coarse_{index:04}.png")),
        masks.width,
        masks.height,
        &masks.coarse,
    )?;
    save_cluster_map(
        &dir.join(format!("cluster_{index:04}.png")),
        masks.width,
        masks.height,
        &masks.clusters,
    )
}
