//! Stage 2: real/pseudo hybrid attention, memory repositories and the
//! MDM / OCSVM decision layer.

mod decision;
mod repository;

use std::collections::BTreeMap;
use std::rc::Rc;

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ModalityMask;
use crate::error::{Error, Result};
use crate::fusion::select_instruction;
use crate::graph::{softmax_rows, Graph, Var};
use crate::nn::{multi_head_attention, Linear};
use crate::params::{AdamW, AdamWConfig, Binder, ParamGroup, ParamStore};
use crate::seed;
use crate::tensor::Mat;

pub use decision::{
    decide, fit_decision, upsample_nearest, AnomalyResult, DecisionConfig, DecisionModels, Mdm, Ocsvm,
    OcsvmConfig, OcsvmSolver,
};
pub use repository::{
    build_repositories, greedy_coreset, score_phi, score_psi, score_vector, Eta, MemoryRepository,
    NeighborQuery, Provenance, RepoKind, ScoreVector, TrainTokens,
};

/// Number of modality-presence classes predicted by the hybrid classifier.
pub const PATTERNS: usize = 3;

/// Softmax attention restricted to permitted pairs: `mask[i·L + j]` allows
/// token `i` to attend to token `j`.
pub fn attention_weights(q: &Mat, k: &Mat, mask: &[bool]) -> Result<Mat> {
    let l = q.rows();
    if k.rows() != l || mask.len() != l * l || q.cols() != k.cols() {
        return Err(Error::shape("attention inputs must be L×D with an L×L mask"));
    }
    if let Some(i) = (0..l).find(|&i| !mask[i * l..(i + 1) * l].iter().any(|&m| m)) {
        return Err(Error::invalid(format!("attention row {i} has no permitted entry")));
    }
    let logits = q.matmul_nt(k).scale(1.0 / (q.cols() as f64).sqrt());
    Ok(softmax_rows(&logits, Some(mask)))
}

pub fn masked_attention(q: &Mat, k: &Mat, v: &Mat, mask: &[bool]) -> Result<Mat> {
    if v.rows() != q.rows() {
        return Err(Error::shape("values must have one row per token"));
    }
    Ok(attention_weights(q, k, mask)?.matmul(v))
}

/// Real/pseudo flag per token of `Ĝ = [g_pc; g_rgb]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupAssignment {
    pub pseudo: Vec<bool>,
}

impl GroupAssignment {
    /// `I_ij = 1` iff tokens `i` and `j` are in the same group.
    pub fn mask(&self) -> Vec<bool> {
        let l = self.pseudo.len();
        let mut m = Vec::with_capacity(l * l);
        for i in 0..l {
            for j in 0..l {
                m.push(self.pseudo[i] == self.pseudo[j]);
            }
        }
        m
    }

    pub fn real_range(&self) -> Option<(usize, usize)> {
        contiguous(&self.pseudo, false)
    }

    pub fn pseudo_range(&self) -> Option<(usize, usize)> {
        contiguous(&self.pseudo, true)
    }
}

fn contiguous(flags: &[bool], want: bool) -> Option<(usize, usize)> {
    let start = flags.iter().position(|&f| f == want)?;
    let end = flags.iter().rposition(|&f| f == want)? + 1;
    Some((start, end))
}

/// Tokens of a missing (pseudo-filled) modality form the pseudo group.
pub fn assign_groups(mask: ModalityMask, n_pc: usize, n_rgb: usize) -> GroupAssignment {
    let mut pseudo = vec![!mask.has_pc; n_pc];
    pseudo.extend(std::iter::repeat_n(!mask.has_rgb, n_rgb));
    GroupAssignment { pseudo }
}

/// Running mean of per-sample unimodal predictions across epochs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelStore {
    pub entries: BTreeMap<u64, PseudoLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub probs: Vec<f64>,
    pub regression: Vec<f64>,
    pub epochs: usize,
}

impl PseudoLabelStore {
    pub fn update(&mut self, id: u64, probs: &[f64], regression: &[f64]) {
        let e = self.entries.entry(id).or_insert_with(|| PseudoLabel {
            probs: vec![0.0; probs.len()],
            regression: vec![0.0; regression.len()],
            epochs: 0,
        });
        e.epochs += 1;
        let n = e.epochs as f64;
        for (m, x) in e.probs.iter_mut().zip(probs) {
            *m += (x - *m) / n;
        }
        for (m, x) in e.regression.iter_mut().zip(regression) {
            *m += (x - *m) / n;
        }
        let s: f64 = e.probs.iter().sum();
        if s > 0.0 {
            e.probs.iter_mut().for_each(|p| *p /= s);
        }
    }

    pub fn get(&self, id: u64) -> Option<&PseudoLabel> {
        self.entries.get(&id)
    }
}

/// Classifier logits and regression output for one pooled token group.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub logits: Var,
    pub regression: Var,
}

/// `(L_real, L_pseudo)`. `L_real` is cross-entropy against the pattern class
/// plus MSE against the regression target; `L_pseudo` is KL against stored
/// pseudo-label distributions plus MSE against stored regression values. An
/// absent group contributes zero.
pub fn hybrid_losses(
    g: &mut Graph,
    real: Option<(HeadOutputs, &[usize], Mat)>,
    pseudo: Option<(HeadOutputs, Mat, Mat)>,
) -> (Var, Var) {
    let l_real = match real {
        Some((out, classes, target)) => {
            let ce = g.cross_entropy(out.logits, classes);
            let mse = g.mse(out.regression, target);
            g.add(ce, mse)
        }
        None => g.constant(Mat::scalar(0.0)),
    };
    let l_pseudo = match pseudo {
        Some((out, probs, target)) => {
            let kl = g.kl_div(out.logits, probs);
            let mse = g.mse(out.regression, target);
            g.add(kl, mse)
        }
        None => g.constant(Mat::scalar(0.0)),
    };
    (l_real, l_pseudo)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HybridConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_pseudo: f64,
    /// Standard deviation of the attention output projection.
    pub init_std: f64,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            epochs: 5,
            batch_size: 16,
            lr: 1e-3,
            lambda_pseudo: 1.0,
            init_std: 0.02,
        }
    }
}

/// Fused features of one sample entering stage 2.
#[derive(Clone, Debug)]
pub struct HybridInput {
    pub id: u64,
    pub mask: ModalityMask,
    pub g_pc: Mat,
    pub g_rgb: Mat,
    /// Mean fused token, the regression target.
    pub fs_mean: Mat,
}

#[derive(Clone, Debug)]
pub struct HybridLayer {
    pub width: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    classifier: Linear,
    regressor: Linear,
}

impl HybridLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, width: usize, fs_dim: usize, cfg: &HybridConfig, rng: &mut R) -> Self {
        let g = ParamGroup::Hybrid;
        HybridLayer {
            width,
            q: Linear::fan_in(store, "hybrid.q", width, width, g, rng),
            k: Linear::fan_in(store, "hybrid.k", width, width, g, rng),
            v: Linear::fan_in(store, "hybrid.v", width, width, g, rng),
            o: Linear::new(store, "hybrid.o", width, width, true, cfg.init_std, g, rng),
            classifier: Linear::fan_in(store, "hybrid.classifier", width, PATTERNS, g, rng),
            regressor: Linear::fan_in(store, "hybrid.regressor", width, fs_dim, g, rng),
        }
    }

    /// `Ĝ + MaskedAttention(Ĝ) W_o` over `[g_pc; g_rgb]`.
    pub fn refine(&self, b: &mut Binder, tokens: Var, groups: &GroupAssignment) -> Var {
        let mask: Rc<[bool]> = groups.mask().into();
        let q = self.q.forward(b, tokens);
        let k = self.k.forward(b, tokens);
        let v = self.v.forward(b, tokens);
        let att = multi_head_attention(b, q, k, v, 1, Some(mask));
        let out = self.o.forward(b, att);
        b.graph.add(tokens, out)
    }

    /// Heads applied to the mean of the token rows `[start, end)`.
    pub fn heads(&self, b: &mut Binder, refined: Var, range: (usize, usize)) -> HeadOutputs {
        let part = b.graph.slice_rows(refined, range.0, range.1);
        let pooled = b.graph.mean_rows(part);
        HeadOutputs {
            logits: self.classifier.forward(b, pooled),
            regression: self.regressor.forward(b, pooled),
        }
    }

    /// Refined `(g_pc, g_rgb)` for inference.
    pub fn apply(&self, store: &ParamStore, g_pc: &Mat, g_rgb: &Mat, mask: ModalityMask) -> (Mat, Mat) {
        let mut b = Binder::inference(store);
        let groups = assign_groups(mask, g_pc.rows(), g_rgb.rows());
        let t = b.graph.constant(Mat::vstack(&[g_pc, g_rgb]));
        let r = self.refine(&mut b, t, &groups);
        let r = b.graph.value(r);
        (r.slice_rows(0, g_pc.rows()), r.slice_rows(g_pc.rows(), r.rows()))
    }

    /// Predicted pattern distribution for the real tokens of a sample.
    pub fn classify(&self, store: &ParamStore, g_pc: &Mat, g_rgb: &Mat, mask: ModalityMask) -> Vec<f64> {
        let mut b = Binder::inference(store);
        let groups = assign_groups(mask, g_pc.rows(), g_rgb.rows());
        let t = b.graph.constant(Mat::vstack(&[g_pc, g_rgb]));
        let r = self.refine(&mut b, t, &groups);
        let range = groups.real_range().expect("a valid mask has real tokens");
        let h = self.heads(&mut b, r, range);
        softmax_rows(b.graph.value(h.logits), None).as_slice().to_vec()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub epoch_losses: Vec<f64>,
    pub real_losses: Vec<f64>,
    pub pseudo_losses: Vec<f64>,
}

/// Trains the hybrid layer on frozen stage-1 features. Pseudo-labels for a
/// sample are the running mean of its pseudo-group predictions from earlier
/// epochs, so the pseudo term is inactive during the first epoch.
pub fn train_stage2(
    layer: &HybridLayer,
    store: &mut ParamStore,
    data: &[HybridInput],
    cfg: &HybridConfig,
    seed: u64,
) -> Result<(Stage2Report, PseudoLabelStore)> {
    if data.is_empty() {
        return Err(Error::invalid("stage-2 training split is empty"));
    }
    if let Some(s) = data.iter().find(|s| s.g_pc.cols() != layer.width || s.g_rgb.cols() != layer.width) {
        return Err(Error::Checkpoint(format!(
            "sample {} has feature width {} but the hybrid layer expects {}",
            s.id,
            s.g_pc.cols(),
            layer.width
        )));
    }
    let train = [ParamGroup::Hybrid];
    let mut opt = AdamW::new(AdamWConfig::default(), &[(ParamGroup::Hybrid, cfg.lr)]);
    let mut labels = PseudoLabelStore::default();
    let mut report = Stage2Report::default();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed::rng(seed, &[seed::tag("stage2"), epoch as u64]));
        let mut preds: Vec<(u64, Vec<f64>, Vec<f64>)> = Vec::new();
        let (mut tot, mut tr, mut tp) = (0.0, 0.0, 0.0);
        let chunks: Vec<_> = order.chunks(cfg.batch_size.max(1)).collect();
        for idx in &chunks {
            let grads = {
                let mut b = Binder::new(store, &train);
                let mut real_out = Vec::new();
                let mut real_cls = Vec::new();
                let mut real_tgt = Vec::new();
                let mut ps_out = Vec::new();
                let mut ps_probs = Vec::new();
                let mut ps_tgt = Vec::new();
                let mut ps_ids = Vec::new();
                for &i in idx.iter() {
                    let s = &data[i];
                    let groups = assign_groups(s.mask, s.g_pc.rows(), s.g_rgb.rows());
                    let t = b.graph.constant(Mat::vstack(&[&s.g_pc, &s.g_rgb]));
                    let r = layer.refine(&mut b, t, &groups);
                    if let Some(range) = groups.real_range() {
                        real_out.push(layer.heads(&mut b, r, range));
                        real_cls.push(select_instruction(s.mask));
                        real_tgt.push(&s.fs_mean);
                    }
                    if let Some(range) = groups.pseudo_range() {
                        let h = layer.heads(&mut b, r, range);
                        ps_ids.push((s.id, h));
                        if let Some(pl) = labels.get(s.id) {
                            ps_out.push(h);
                            ps_probs.push(pl.probs.clone());
                            ps_tgt.push(pl.regression.clone());
                        }
                    }
                }
                let stack = |g: &mut Graph, outs: &[HeadOutputs]| HeadOutputs {
                    logits: g.concat_rows(&outs.iter().map(|o| o.logits).collect::<Vec<_>>()),
                    regression: g.concat_rows(&outs.iter().map(|o| o.regression).collect::<Vec<_>>()),
                };
                let real = (!real_out.is_empty()).then(|| {
                    let o = stack(&mut b.graph, &real_out);
                    (o, real_cls.as_slice(), Mat::vstack(&real_tgt))
                });
                let pseudo = (!ps_out.is_empty()).then(|| {
                    let o = stack(&mut b.graph, &ps_out);
                    (o, Mat::from_rows(&ps_probs), Mat::from_rows(&ps_tgt))
                });
                let (lr, lp) = hybrid_losses(&mut b.graph, real, pseudo);
                let lp_w = b.graph.scale(lp, cfg.lambda_pseudo);
                let loss = b.graph.add(lr, lp_w);
                tr += b.graph.value(lr).scalar_value();
                tp += b.graph.value(lp).scalar_value();
                tot += b.graph.value(loss).scalar_value();
                for (id, h) in ps_ids {
                    let probs = softmax_rows(b.graph.value(h.logits), None).into_vec();
                    preds.push((id, probs, b.graph.value(h.regression).as_slice().to_vec()));
                }
                let mut g = b.graph.backward(loss);
                b.param_grads(&mut g)
            };
            opt.step(store, &grads);
        }
        for (id, p, r) in preds {
            labels.update(id, &p, &r);
        }
        let n = chunks.len() as f64;
        debug!("stage2 epoch {epoch}: loss {:.4}", tot / n);
        report.epoch_losses.push(tot / n);
        report.real_losses.push(tr / n);
        report.pseudo_losses.push(tp / n);
    }
    Ok((report, labels))
}
