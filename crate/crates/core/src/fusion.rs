//! Stage 1: instruction-conditioned multimodal fusion and hypernetwork
//! projections trained with a patch-wise contrastive loss.

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ModalityMask;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{BlockSpec, Linear, TransformerBlock};
use crate::params::{AdamW, AdamWConfig, Binder, ParamGroup, ParamId, ParamStore};
use crate::seed;
use crate::tensor::Mat;

/// Instruction block used for a sample's modality pattern: 0 when the point
/// cloud is missing, 1 when the image is missing, 2 when complete.
pub fn select_instruction(mask: ModalityMask) -> usize {
    match (mask.has_rgb, mask.has_pc) {
        (true, false) => 0,
        (false, true) => 1,
        _ => 2,
    }
}

/// `[i; h]`: instruction tokens first, then the original sequence.
pub fn prepend_instruction(i: &Mat, h: &Mat) -> Result<Mat> {
    if i.rows() > 0 && i.cols() != h.cols() {
        return Err(Error::shape(format!(
            "instruction width {} does not match token width {}",
            i.cols(),
            h.cols()
        )));
    }
    if i.rows() == 0 {
        return Ok(h.clone());
    }
    Ok(Mat::vstack(&[i, h]))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Gelu,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Fusion width d_f.
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub init_std: f64,
    /// Instruction length L_i.
    pub instr_len: usize,
    /// First and last (inclusive) block that receives instructions.
    pub instr_layers: [usize; 2],
    /// Keep earlier layers' instruction tokens instead of replacing them.
    pub keep_instructions: bool,
    pub instr_std: f64,
    /// Projection width d_g.
    pub out_dim: usize,
    pub mlp_hidden: usize,
    pub activation: Activation,
    pub z_dim: usize,
    pub xi_hidden: usize,
    pub code_dim: usize,
    pub rank: usize,
    pub temperature: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            width: 64,
            depth: 4,
            heads: 4,
            init_std: 0.02,
            instr_len: 16,
            instr_layers: [0, 3],
            keep_instructions: false,
            instr_std: 0.02,
            out_dim: 64,
            mlp_hidden: 32,
            activation: Activation::Gelu,
            z_dim: 8,
            xi_hidden: 8,
            code_dim: 8,
            rank: 4,
            temperature: 0.07,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let [start, end] = self.instr_layers;
        if start > end || end >= self.depth.max(1) {
            return Err(Error::config(
                "fusion.instr_layers",
                format!("range [{start}, {end}] must lie within depth {}", self.depth),
            ));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config("fusion.heads", "width must be divisible by heads"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::config("fusion.temperature", "must be positive"));
        }
        if self.width == 0 || self.out_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::config("fusion.width", "widths must be positive"));
        }
        Ok(())
    }
}

/// The three instruction blocks, one token matrix per block and layer.
#[derive(Clone, Debug)]
pub struct InstructionSet {
    pub len: usize,
    pub layer_range: [usize; 2],
    tokens: Vec<Vec<ParamId>>,
}

impl InstructionSet {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &FusionConfig, rng: &mut R) -> Self {
        let [start, end] = cfg.instr_layers;
        let tokens = (0..3)
            .map(|blk| {
                (start..=end)
                    .map(|layer| {
                        store.randn(
                            format!("fusion.instr.{blk}.{layer}"),
                            cfg.instr_len,
                            cfg.width,
                            cfg.instr_std,
                            ParamGroup::Instruction,
                            rng,
                        )
                    })
                    .collect()
            })
            .collect();
        InstructionSet {
            len: cfg.instr_len,
            layer_range: cfg.instr_layers,
            tokens,
        }
    }

    pub fn get(&self, block: usize, layer: usize) -> Option<ParamId> {
        let [start, end] = self.layer_range;
        if self.len == 0 || layer < start || layer > end {
            return None;
        }
        Some(self.tokens[block][layer - start])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.tokens.iter().flatten().copied()
    }
}

/// Generates the weights of the two per-modality projection MLPs.
///
/// Static part `K = ξ(z; Θ_p)` from a learned layer embedding, plus an
/// input-conditioned part `w = (ξ^h(e) W1 + B1) W2 + B2` where `e` is the mean
/// token of the stream being projected.
#[derive(Clone, Debug)]
pub struct HyperNetwork {
    /// `(N_in, N_out)` per target layer.
    pub shapes: Vec<(usize, usize)>,
    pub activation: Activation,
    z: Vec<Vec<ParamId>>,
    xi: Vec<(Linear, Linear)>,
    encoders: Vec<Linear>,
    w1: Vec<ParamId>,
    b1: Vec<ParamId>,
    w2: Vec<ParamId>,
    b2: Vec<ParamId>,
}

#[derive(Clone, Copy, Debug)]
pub struct HyperSpec {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    pub targets: usize,
    pub z_dim: usize,
    pub xi_hidden: usize,
    pub code_dim: usize,
    pub rank: usize,
    pub activation: Activation,
}

impl HyperNetwork {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, spec: HyperSpec, rng: &mut R) -> Self {
        let g = ParamGroup::Projection;
        let shapes = vec![(spec.input, spec.hidden), (spec.hidden, spec.output)];
        let z = (0..spec.targets)
            .map(|t| {
                (0..shapes.len())
                    .map(|n| store.randn(format!("{name}.z.{t}.{n}"), 1, spec.z_dim, 1.0, g, rng))
                    .collect()
            })
            .collect();
        let mut xi = Vec::new();
        let (mut w1, mut b1, mut w2, mut b2) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (n, &(nin, nout)) in shapes.iter().enumerate() {
            let flat = nin * nout + nout;
            let fc1 = Linear::fan_in(store, &format!("{name}.xi.{n}.fc1"), spec.z_dim, spec.xi_hidden, g, rng);
            // tanh units have variance of roughly 0.4 here; scale so generated
            // weights start near fan-in initialization.
            let std = 1.0 / (nin as f64 * spec.xi_hidden as f64 * 0.4).sqrt();
            let fc2 = Linear::new(store, &format!("{name}.xi.{n}.fc2"), spec.xi_hidden, flat, true, std, g, rng);
            xi.push((fc1, fc2));
            w1.push(store.randn(format!("{name}.w1.{n}"), spec.code_dim, spec.rank, 1.0 / (spec.code_dim as f64).sqrt(), g, rng));
            b1.push(store.zeros(format!("{name}.b1.{n}"), 1, spec.rank, g));
            w2.push(store.zeros(format!("{name}.w2.{n}"), spec.rank, flat, g));
            b2.push(store.zeros(format!("{name}.b2.{n}"), 1, flat, g));
        }
        let encoders = (0..spec.targets)
            .map(|t| Linear::fan_in(store, &format!("{name}.enc.{t}"), spec.input, spec.code_dim, g, rng))
            .collect();
        HyperNetwork {
            shapes,
            activation: spec.activation,
            z,
            xi,
            encoders,
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// Every parameter, grouped as (z, Θ_p, ξ^h, W1, B1, W2, B2).
    pub fn param_groups(&self) -> Vec<(&'static str, Vec<ParamId>)> {
        let lin = |l: &Linear| std::iter::once(l.w).chain(l.b).collect::<Vec<_>>();
        vec![
            ("z", self.z.iter().flatten().copied().collect()),
            ("theta_p", self.xi.iter().flat_map(|(a, b)| lin(a).into_iter().chain(lin(b))).collect()),
            ("xi_h", self.encoders.iter().flat_map(lin).collect()),
            ("w1", self.w1.clone()),
            ("b1", self.b1.clone()),
            ("w2", self.w2.clone()),
            ("b2", self.b2.clone()),
        ]
    }

    /// Static weights `K^(n)` for one target, flattened `1 × (N_in·N_out + N_out)`.
    pub fn static_weights(&self, b: &mut Binder, target: usize, layer: usize) -> Var {
        let z = b.param(self.z[target][layer]);
        let (fc1, fc2) = &self.xi[layer];
        let h = fc1.forward(b, z);
        let h = b.graph.tanh(h);
        fc2.forward(b, h)
    }

    /// Input-conditioned weights `w^(n)` for a stream summary `e` (1 × N_in of layer 0).
    pub fn dynamic_weights(&self, b: &mut Binder, target: usize, layer: usize, e: Var) -> Var {
        let code = self.encoders[target].forward(b, e);
        let code = b.graph.tanh(code);
        let w1 = b.param(self.w1[layer]);
        let b1 = b.param(self.b1[layer]);
        let w2 = b.param(self.w2[layer]);
        let b2 = b.param(self.b2[layer]);
        let u = b.graph.matmul(code, w1);
        let u = b.graph.add(u, b1);
        let w = b.graph.matmul(u, w2);
        b.graph.add(w, b2)
    }

    /// `K^(n) + w^(n)` for every target layer.
    pub fn generate(&self, b: &mut Binder, target: usize, e: Var) -> Vec<Var> {
        (0..self.shapes.len())
            .map(|n| {
                let k = self.static_weights(b, target, n);
                let w = self.dynamic_weights(b, target, n, e);
                b.graph.add(k, w)
            })
            .collect()
    }

    /// Projects a token stream through its generated MLP.
    pub fn project(&self, b: &mut Binder, target: usize, x: Var) -> Var {
        let e = b.graph.mean_rows(x);
        let weights = self.generate(b, target, e);
        apply_generated_mlp(&mut b.graph, &weights, &self.shapes, self.activation, x)
    }
}

/// Token-wise MLP whose layer weights are flattened `1 × (N_in·N_out + N_out)`
/// rows: a row-major `N_in × N_out` matrix followed by the bias.
pub fn apply_generated_mlp(g: &mut Graph, weights: &[Var], shapes: &[(usize, usize)], act: Activation, x: Var) -> Var {
    let mut h = x;
    for (n, (&wv, &(nin, nout))) in weights.iter().zip(shapes).enumerate() {
        assert_eq!(g.shape(h).1, nin, "generated layer {n} input width");
        assert_eq!(g.shape(wv), (1, nin * nout + nout), "generated layer {n} weight length");
        let w = g.slice_cols(wv, 0, nin * nout);
        let w = g.reshape(w, nin, nout);
        let bias = g.slice_cols(wv, nin * nout, nin * nout + nout);
        h = g.matmul(h, w);
        h = g.add_row(h, bias);
        if n + 1 < shapes.len() && act == Activation::Gelu {
            h = g.gelu(h);
        }
    }
    h
}

/// Symmetric InfoNCE over matching rows of `a` and `b`.
pub fn infonce(g: &mut Graph, a: Var, b: Var, temperature: f64) -> Var {
    let n = g.shape(a).0;
    let targets: Vec<usize> = (0..n).collect();
    let an = g.l2_normalize_rows(a);
    let bn = g.l2_normalize_rows(b);
    let ab = g.matmul_nt(an, bn);
    let ab = g.scale(ab, 1.0 / temperature);
    let ba = g.matmul_nt(bn, an);
    let ba = g.scale(ba, 1.0 / temperature);
    let l1 = g.cross_entropy(ab, &targets);
    let l2 = g.cross_entropy(ba, &targets);
    let s = g.add(l1, l2);
    g.scale(s, 0.5)
}

pub fn infonce_loss(a: &Mat, b: &Mat, temperature: f64) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("InfoNCE inputs must have equal shapes"));
    }
    if temperature <= 0.0 {
        return Err(Error::invalid("temperature must be positive"));
    }
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let l = infonce(&mut g, va, vb, temperature);
    Ok(g.value(l).scalar_value())
}

/// Frozen-backbone features of one sample before fusion.
#[derive(Clone, Debug)]
pub struct SampleFeatures {
    pub id: u64,
    pub mask: ModalityMask,
    pub pc: Mat,
    pub rgb: Mat,
}

#[derive(Clone, Debug)]
pub struct FusedStreams {
    pub f_pc_hat: Mat,
    pub f_rgb_hat: Mat,
    pub g_pc: Mat,
    pub g_rgb: Mat,
    pub g_fs: Mat,
}

pub struct StreamVars {
    pub f_pc_hat: Var,
    pub f_rgb_hat: Var,
    pub g_pc: Var,
    pub g_rgb: Var,
    pub g_fs: Var,
}

#[derive(Clone, Debug)]
pub struct FusionModel {
    pub cfg: FusionConfig,
    adapter_pc: Linear,
    adapter_rgb: Linear,
    blocks: Vec<TransformerBlock>,
    pub instructions: InstructionSet,
    pub hyper: HyperNetwork,
    fs_proj: Linear,
}

impl FusionModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: FusionConfig,
        pc_dim: usize,
        rgb_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.width;
        let adapter_pc = Linear::fan_in(store, "fusion.adapter_pc", pc_dim, d, ParamGroup::Projection, rng);
        let adapter_rgb = Linear::fan_in(store, "fusion.adapter_rgb", rgb_dim, d, ParamGroup::Projection, rng);
        let spec = BlockSpec {
            width: d,
            heads: cfg.heads,
            mlp_ratio: 4,
            init_std: cfg.init_std,
        };
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(store, &format!("fusion.block{i}"), spec, ParamGroup::Frozen, rng))
            .collect();
        let instructions = InstructionSet::new(store, &cfg, rng);
        let hyper = HyperNetwork::new(
            store,
            "fusion.hyper",
            HyperSpec {
                input: d,
                hidden: cfg.mlp_hidden,
                output: cfg.out_dim,
                targets: 2,
                z_dim: cfg.z_dim,
                xi_hidden: cfg.xi_hidden,
                code_dim: cfg.code_dim,
                rank: cfg.rank,
                activation: cfg.activation,
            },
            rng,
        );
        let fs_proj = Linear::fan_in(store, "fusion.fs_proj", 2 * cfg.out_dim, cfg.out_dim, ParamGroup::Projection, rng);
        Ok(FusionModel {
            cfg,
            adapter_pc,
            adapter_rgb,
            blocks,
            instructions,
            hyper,
            fs_proj,
        })
    }

    /// Width of the fused `g_fs` tokens.
    pub fn fs_dim(&self, aif: bool) -> usize {
        if aif {
            self.cfg.out_dim
        } else {
            2 * self.cfg.width
        }
    }

    /// Width of `g_pc` / `g_rgb`.
    pub fn stream_dim(&self, aif: bool) -> usize {
        if aif {
            self.cfg.out_dim
        } else {
            self.cfg.width
        }
    }

    /// Transformer pass over `T_fs = [f_pc ∥ f_rgb]`, with the selected
    /// instruction block prepended at every layer of the configured range
    /// when `instruction` is given. Returns `(f̂_pc, f̂_rgb)`.
    pub fn fuse(&self, b: &mut Binder, pc: Var, rgb: Var, instruction: Option<usize>) -> (Var, Var) {
        let n_pc = b.graph.shape(pc).0;
        let n_rgb = b.graph.shape(rgb).0;
        let mut x = b.graph.concat_rows(&[pc, rgb]);
        for (j, blk) in self.blocks.iter().enumerate() {
            let instr = instruction.and_then(|m| self.instructions.get(m, j));
            match instr {
                Some(id) => {
                    let i = b.param(id);
                    let input = b.graph.concat_rows(&[i, x]);
                    let out = blk.forward(b, input);
                    x = if self.cfg.keep_instructions {
                        out
                    } else {
                        let rows = b.graph.shape(out).0;
                        b.graph.slice_rows(out, self.instructions.len, rows)
                    };
                }
                None => x = blk.forward(b, x),
            }
        }
        let rows = b.graph.shape(x).0;
        let start = rows - n_pc - n_rgb;
        let f_pc = b.graph.slice_rows(x, start, start + n_pc);
        let f_rgb = b.graph.slice_rows(x, start + n_pc, rows);
        (f_pc, f_rgb)
    }

    pub fn forward(&self, b: &mut Binder, feats: &SampleFeatures, aif: bool) -> StreamVars {
        let pc_in = b.graph.constant(feats.pc.clone());
        let rgb_in = b.graph.constant(feats.rgb.clone());
        let pc = self.adapter_pc.forward(b, pc_in);
        let rgb = self.adapter_rgb.forward(b, rgb_in);
        let instruction = aif.then(|| select_instruction(feats.mask));
        let (f_pc_hat, f_rgb_hat) = self.fuse(b, pc, rgb, instruction);
        if !aif {
            let g_fs = self.fuse_streams(b, f_pc_hat, f_rgb_hat, false);
            return StreamVars {
                f_pc_hat,
                f_rgb_hat,
                g_pc: f_pc_hat,
                g_rgb: f_rgb_hat,
                g_fs,
            };
        }
        let g_pc = self.hyper.project(b, 0, f_pc_hat);
        let g_rgb = self.hyper.project(b, 1, f_rgb_hat);
        let g_fs = self.fuse_streams(b, g_pc, g_rgb, true);
        StreamVars {
            f_pc_hat,
            f_rgb_hat,
            g_pc,
            g_rgb,
            g_fs,
        }
    }

    /// `g_fs` from the two streams: projected with AIF, plain concatenation
    /// without.
    pub fn fuse_streams(&self, b: &mut Binder, g_pc: Var, g_rgb: Var, aif: bool) -> Var {
        let cat = b.graph.concat_cols(&[g_pc, g_rgb]);
        if aif {
            self.fs_proj.forward(b, cat)
        } else {
            cat
        }
    }

    /// Inference-time [`FusionModel::fuse_streams`].
    pub fn fuse_stream_mats(&self, store: &ParamStore, g_pc: &Mat, g_rgb: &Mat, aif: bool) -> Mat {
        let mut b = Binder::inference(store);
        let (p, r) = (b.graph.constant(g_pc.clone()), b.graph.constant(g_rgb.clone()));
        let v = self.fuse_streams(&mut b, p, r, aif);
        b.graph.value(v).clone()
    }

    pub fn infer(&self, store: &ParamStore, feats: &SampleFeatures, aif: bool) -> FusedStreams {
        let mut b = Binder::inference(store);
        let v = self.forward(&mut b, feats, aif);
        let g = &b.graph;
        FusedStreams {
            f_pc_hat: g.value(v.f_pc_hat).clone(),
            f_rgb_hat: g.value(v.f_rgb_hat).clone(),
            g_pc: g.value(v.g_pc).clone(),
            g_rgb: g.value(v.g_rgb).clone(),
            g_fs: g.value(v.g_fs).clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_instruction: f64,
    pub lr_projection: f64,
    pub weight_decay: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            epochs: 5,
            batch_size: 16,
            lr_instruction: 1e-2,
            lr_projection: 1e-3,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Report {
    /// Mean contrastive loss over the training set before any update.
    pub initial_loss: f64,
    /// Same measurement after the last epoch.
    pub final_loss: f64,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// L2 norm of the instruction-token gradient on every batch.
    pub instruction_grad_norms: Vec<f64>,
}

fn batches(n: usize, size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[seed::tag("stage1"), epoch as u64]));
    order.chunks(size.max(1)).map(|c| c.to_vec()).collect()
}

fn batch_loss(model: &FusionModel, b: &mut Binder, samples: &[&SampleFeatures]) -> Var {
    let mut pcs = Vec::new();
    let mut rgbs = Vec::new();
    for s in samples {
        let v = model.forward(b, s, true);
        pcs.push(v.g_pc);
        rgbs.push(v.g_rgb);
    }
    let gp = b.graph.concat_rows(&pcs);
    let gr = b.graph.concat_rows(&rgbs);
    infonce(&mut b.graph, gp, gr, model.cfg.temperature)
}

/// Mean batch loss without updates, using epoch-0 batching.
pub fn contrastive_loss(model: &FusionModel, store: &ParamStore, data: &[SampleFeatures], cfg: &Stage1Config, seed: u64) -> f64 {
    let bs = batches(data.len(), cfg.batch_size, seed, 0);
    let total: f64 = bs
        .iter()
        .map(|idx| {
            let mut b = Binder::inference(store);
            let refs: Vec<_> = idx.iter().map(|&i| &data[i]).collect();
            let l = batch_loss(model, &mut b, &refs);
            b.graph.value(l).scalar_value()
        })
        .sum();
    total / bs.len() as f64
}

/// Trains the instruction tokens, adapters and hypernetwork with AdamW while
/// the fusion transformer stays frozen.
pub fn train_stage1(
    model: &FusionModel,
    store: &mut ParamStore,
    data: &[SampleFeatures],
    cfg: &Stage1Config,
    seed: u64,
) -> Result<Stage1Report> {
    if data.is_empty() {
        return Err(Error::invalid("stage-1 training split is empty"));
    }
    let instr: std::collections::HashSet<ParamId> = model.instructions.ids().collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &[
            (ParamGroup::Instruction, cfg.lr_instruction),
            (ParamGroup::Projection, cfg.lr_projection),
        ],
    );
    let train = [ParamGroup::Instruction, ParamGroup::Projection];
    let mut report = Stage1Report {
        initial_loss: contrastive_loss(model, store, data, cfg, seed),
        ..Default::default()
    };
    for epoch in 0..cfg.epochs {
        let bs = batches(data.len(), cfg.batch_size, seed, epoch);
        let mut sum = 0.0;
        for idx in &bs {
            let grads = {
                let mut b = Binder::new(store, &train);
                let refs: Vec<_> = idx.iter().map(|&i| &data[i]).collect();
                let loss = batch_loss(model, &mut b, &refs);
                sum += b.graph.value(loss).scalar_value();
                let mut g = b.graph.backward(loss);
                b.param_grads(&mut g)
            };
            let norm: f64 = grads
                .iter()
                .filter(|(id, _)| instr.contains(id))
                .map(|(_, g)| g.frobenius().powi(2))
                .sum::<f64>()
                .sqrt();
            report.instruction_grad_norms.push(norm);
            opt.step(store, &grads);
        }
        let mean = sum / bs.len() as f64;
        debug!("stage1 epoch {epoch}: loss {mean:.4}");
        report.epoch_losses.push(mean);
    }
    report.final_loss = contrastive_loss(model, store, data, cfg, seed);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> FusionConfig {
        FusionConfig {
            width: 8,
            depth: 2,
            heads: 2,
            instr_len: 3,
            instr_layers: [0, 1],
            out_dim: 6,
            mlp_hidden: 5,
            ..Default::default()
        }
    }

    fn feats(rng: &mut ChaCha8Rng, mask: ModalityMask) -> SampleFeatures {
        SampleFeatures {
            id: 0,
            mask,
            pc: Mat::randn(4, 5, 1.0, rng),
            rgb: Mat::randn(4, 7, 1.0, rng),
        }
    }

    #[test]
    fn instruction_selection() {
        assert_eq!(select_instruction(ModalityMask::RGB_ONLY), 0);
        assert_eq!(select_instruction(ModalityMask::PC_ONLY), 1);
        assert_eq!(select_instruction(ModalityMask::COMPLETE), 2);
    }

    #[test]
    fn prepend_semantics() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = Mat::randn(32, 4, 1.0, &mut rng);
        let i = Mat::randn(16, 4, 1.0, &mut rng);
        let out = prepend_instruction(&i, &h).unwrap();
        assert_eq!(out.rows(), 48);
        assert_eq!(out.slice_rows(16, 48), h);
        assert_eq!(prepend_instruction(&Mat::zeros(0, 4), &h).unwrap(), h);
        assert!(prepend_instruction(&Mat::zeros(2, 3), &h).is_err());
    }

    #[test]
    fn infonce_examples() {
        assert_eq!(infonce_loss(&Mat::row_vector(&[1.0, 2.0]), &Mat::row_vector(&[-3.0, 0.5]), 0.07).unwrap(), 0.0);
        // Unit vectors with +1 on the diagonal and -1 off it.
        let a = Mat::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let l = infonce_loss(&a, &a, 1.0).unwrap();
        let oracle = (1.0 + (-2.0f64).exp()).ln();
        assert!((l - oracle).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Mat::randn(6, 3, 1.0, &mut rng);
        let r = Mat::randn(6, 3, 1.0, &mut rng);
        let (c, s) = (0.6f64, 0.8f64);
        let rot = Mat::from_rows(&[vec![c, -s, 0.0], vec![s, c, 0.0], vec![0.0, 0.0, 1.0]]);
        let base = infonce_loss(&p, &r, 0.5).unwrap();
        let rotated = infonce_loss(&p.matmul(&rot), &r.matmul(&rot), 0.5).unwrap();
        assert!(base > 0.0);
        assert!((base - rotated).abs() < 1e-12);
    }

    #[test]
    fn zero_hypernetwork_generates_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let hn = HyperNetwork::new(
            &mut store,
            "h",
            HyperSpec {
                input: 4,
                hidden: 3,
                output: 2,
                targets: 1,
                z_dim: 3,
                xi_hidden: 4,
                code_dim: 3,
                rank: 2,
                activation: Activation::Gelu,
            },
            &mut rng,
        );
        assert_eq!(hn.shapes[0].0 * hn.shapes[0].1 + hn.shapes[0].1, 15);
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut b = Binder::inference(&store);
        let x = b.graph.constant(Mat::randn(5, 4, 1.0, &mut rng));
        let y = hn.project(&mut b, 0, x);
        assert!(b.graph.value(y).as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn static_weights_ignore_the_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let hn = HyperNetwork::new(
            &mut store,
            "h",
            HyperSpec {
                input: 4,
                hidden: 3,
                output: 2,
                targets: 1,
                z_dim: 3,
                xi_hidden: 4,
                code_dim: 3,
                rank: 2,
                activation: Activation::Gelu,
            },
            &mut rng,
        );
        for id in hn.param_groups().into_iter().filter(|(n, _)| *n == "w2" || *n == "b2").flat_map(|(_, v)| v) {
            *store.get_mut(id) = Mat::randn(store.get(id).rows(), store.get(id).cols(), 1.0, &mut rng);
        }
        let mut b = Binder::inference(&store);
        let e1 = b.graph.constant(Mat::randn(1, 4, 1.0, &mut rng));
        let e2 = b.graph.constant(Mat::randn(1, 4, 1.0, &mut rng));
        let k1 = hn.static_weights(&mut b, 0, 0);
        let k2 = hn.static_weights(&mut b, 0, 0);
        let w1 = hn.dynamic_weights(&mut b, 0, 0, e1);
        let w2 = hn.dynamic_weights(&mut b, 0, 0, e2);
        assert_eq!(b.graph.value(k1), b.graph.value(k2));
        assert_ne!(b.graph.value(w1), b.graph.value(w2));
    }

    #[test]
    fn identity_generated_mlp_with_linear_activation() {
        let mut g = Graph::new();
        let eye = Mat::identity(3);
        let mut flat = eye.as_slice().to_vec();
        flat.extend([0.0; 3]);
        let w = g.constant(Mat::row_vector(&flat));
        let x = Mat::from_rows(&[vec![0.3, -1.0, 2.0], vec![0.0, 0.5, -0.2]]);
        let xv = g.constant(x.clone());
        let y = apply_generated_mlp(&mut g, &[w, w], &[(3, 3), (3, 3)], Activation::Linear, xv);
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn zero_layer_fusion_splits_positionally() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let cfg = FusionConfig {
            depth: 0,
            instr_layers: [0, 0],
            ..toy_cfg()
        };
        // A zero-depth transformer has no layer to carry instructions.
        assert!(cfg.validate().is_ok());
        let m = FusionModel::new(&mut store, cfg, 5, 7, &mut rng).unwrap();
        let f = feats(&mut rng, ModalityMask::COMPLETE);
        let mut b = Binder::inference(&store);
        let pc = b.graph.constant(f.pc.clone());
        let rgb = b.graph.constant(f.rgb.clone());
        let pc = m.adapter_pc.forward(&mut b, pc);
        let rgb = m.adapter_rgb.forward(&mut b, rgb);
        let (fp, fr) = m.fuse(&mut b, pc, rgb, Some(2));
        assert_eq!(b.graph.value(fp), b.graph.value(pc));
        assert_eq!(b.graph.value(fr), b.graph.value(rgb));
    }

    #[test]
    fn fusion_shapes_determinism_and_live_instructions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let m = FusionModel::new(&mut store, toy_cfg(), 5, 7, &mut rng).unwrap();
        let f = feats(&mut rng, ModalityMask::RGB_ONLY);
        let a = m.infer(&store, &f, true);
        assert_eq!(a.f_pc_hat.rows(), 4);
        assert_eq!(a.f_rgb_hat.rows(), 4);
        assert_eq!(a.g_fs.shape(), (4, 6));
        let again = m.infer(&store, &f, true);
        assert_eq!(a.g_pc, again.g_pc);

        let swapped = SampleFeatures {
            mask: ModalityMask::PC_ONLY,
            ..f.clone()
        };
        assert_ne!(m.infer(&store, &swapped, true).f_pc_hat, a.f_pc_hat);

        let base = m.infer(&store, &f, false);
        assert_eq!(base.g_fs.shape(), (4, 16));
        assert_eq!(base.g_pc, base.f_pc_hat);

        let keep = FusionModel::new(
            &mut ParamStore::new(),
            FusionConfig {
                keep_instructions: true,
                ..toy_cfg()
            },
            5,
            7,
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        assert!(keep.cfg.keep_instructions);
    }

    #[test]
    fn training_reduces_loss_and_freezes_backbone() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let m = FusionModel::new(&mut store, toy_cfg(), 5, 7, &mut rng).unwrap();
        let masks = [ModalityMask::COMPLETE, ModalityMask::RGB_ONLY, ModalityMask::PC_ONLY];
        let data: Vec<_> = (0..24).map(|i| feats(&mut rng, masks[i % 3])).collect();
        let frozen: Vec<_> = store
            .ids()
            .filter(|&id| store.group(id) == ParamGroup::Frozen)
            .map(|id| (id, store.get(id).clone()))
            .collect();
        let cfg = Stage1Config {
            epochs: 5,
            batch_size: 8,
            lr_projection: 1e-2,
            ..Default::default()
        };
        let rep = train_stage1(&m, &mut store, &data, &cfg, 0).unwrap();
        assert!(rep.final_loss < rep.initial_loss, "{rep:?}");
        assert_eq!(rep.instruction_grad_norms.len(), 15);
        assert!(rep.instruction_grad_norms.iter().all(|n| *n > 0.0));
        for (id, v) in frozen {
            assert_eq!(store.get(id), &v);
        }
        assert!(train_stage1(&m, &mut store, &[], &cfg, 0).is_err());
    }
}
