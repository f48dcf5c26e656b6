//! Point-cloud features: farthest point sampling, k-NN grouping, a small
//! group transformer, inverse-distance interpolation back onto the points and
//! average pooling into the patch grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::PointGrid;
use crate::error::{Error, Result};
use crate::features::FeatureGrid;
use crate::nn::{BlockSpec, Linear, TransformerBlock};
use crate::params::{Binder, ParamGroup, ParamStore};
use crate::seed;
use crate::tensor::{sq_dist, Mat};

/// The valid points of a grid together with the pixel each came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    pub points: Vec<[f64; 3]>,
    pub origins: Vec<(usize, usize)>,
}

impl PointSet {
    pub fn from_grid(pc: &PointGrid) -> Self {
        let mut points = Vec::new();
        let mut origins = Vec::new();
        for r in 0..pc.height {
            for c in 0..pc.width {
                if pc.is_valid(r, c) {
                    points.push(pc.point(r, c));
                    origins.push((r, c));
                }
            }
        }
        PointSet { points, origins }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Greedy farthest point sampling from a fixed first index. Each step takes
/// the point with the largest distance to the chosen set; ties go to the
/// lowest index.
pub fn fps_from(ps: &PointSet, m: usize, start: usize) -> Result<Vec<usize>> {
    let n = ps.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("cannot sample {m} centers from {n} points")));
    }
    if start >= n {
        return Err(Error::invalid(format!("start index {start} out of range")));
    }
    let mut chosen = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut order = Vec::with_capacity(m);
    let mut next = start;
    for _ in 0..m {
        order.push(next);
        chosen[next] = true;
        let c = ps.points[next];
        for (d, p) in min_d.iter_mut().zip(&ps.points) {
            *d = d.min(sq_dist(p, &c));
        }
        let mut best: Option<usize> = None;
        for i in 0..n {
            if !chosen[i] && best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        match best {
            Some(b) => next = b,
            None => break,
        }
    }
    Ok(order)
}

/// Farthest point sampling with a seeded uniform first pick.
pub fn fps(ps: &PointSet, m: usize, seed: u64) -> Result<Vec<usize>> {
    if ps.is_empty() {
        return Err(Error::invalid("farthest point sampling on an empty point set"));
    }
    let start = seed::rng(seed, &[seed::tag("fps")]).random_range(0..ps.len());
    fps_from(ps, m, start)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupSet {
    /// Indices into the point set, one per group.
    pub centers: Vec<usize>,
    pub members: Vec<Vec<usize>>,
    /// Member coordinates relative to their center, `(M·k) × 3`.
    pub local: Mat,
    pub group_size: usize,
}

/// The `k` nearest points of each center (ties by index). When `k` exceeds
/// the number of points the nearest point is repeated.
pub fn group_knn(ps: &PointSet, centers: &[usize], k: usize) -> Result<GroupSet> {
    if k == 0 {
        return Err(Error::invalid("group size must be at least 1"));
    }
    let mut members = Vec::with_capacity(centers.len());
    let mut local = Mat::zeros(centers.len() * k, 3);
    for (g, &ci) in centers.iter().enumerate() {
        let c = ps.points[ci];
        let mut idx: Vec<usize> = (0..ps.len()).collect();
        idx.sort_by(|&a, &b| {
            sq_dist(&ps.points[a], &c)
                .total_cmp(&sq_dist(&ps.points[b], &c))
                .then(a.cmp(&b))
        });
        idx.truncate(k);
        while idx.len() < k {
            idx.push(idx[0]);
        }
        for (j, &pi) in idx.iter().enumerate() {
            let p = ps.points[pi];
            let row = local.row_mut(g * k + j);
            for d in 0..3 {
                row[d] = p[d] - c[d];
            }
        }
        members.push(idx);
    }
    Ok(GroupSet {
        centers: centers.to_vec(),
        members,
        local,
        group_size: k,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpMode {
    /// Inverse-distance weights normalized per point.
    Normalized,
    /// Inverse-distance weights normalized by the sum over all centers and points.
    Literal,
}

/// Per-point interpolation weights, `N × M`.
pub fn interpolation_weights(points: &[[f64; 3]], centers: &[[f64; 3]], epsilon: f64, mode: InterpMode) -> Mat {
    let mut w = Mat::zeros(points.len(), centers.len());
    for (j, p) in points.iter().enumerate() {
        for (i, c) in centers.iter().enumerate() {
            w[(j, i)] = 1.0 / (sq_dist(p, c).sqrt() + epsilon);
        }
    }
    match mode {
        InterpMode::Normalized => {
            for j in 0..w.rows() {
                let s: f64 = w.row(j).iter().sum();
                w.row_mut(j).iter_mut().for_each(|v| *v /= s);
            }
        }
        InterpMode::Literal => {
            let s = w.sum();
            w = w.scale(1.0 / s);
        }
    }
    w
}

/// Propagates group features back to every point: `p'_j = Σ_i α_i(j) T_i`.
pub fn interpolate_features(
    ps: &PointSet,
    centers: &[usize],
    group_features: &Mat,
    epsilon: f64,
    mode: InterpMode,
) -> Result<Mat> {
    if epsilon <= 0.0 {
        return Err(Error::invalid("interpolation epsilon must be positive"));
    }
    if group_features.rows() != centers.len() {
        return Err(Error::shape(format!(
            "{} centers but {} group features",
            centers.len(),
            group_features.rows()
        )));
    }
    let cpts: Vec<[f64; 3]> = centers.iter().map(|&i| ps.points[i]).collect();
    Ok(interpolation_weights(&ps.points, &cpts, epsilon, mode).matmul(group_features))
}

/// Each point takes the feature of its nearest center (no interpolation).
pub fn nearest_center_features(ps: &PointSet, centers: &[usize], group_features: &Mat) -> Mat {
    let mut out = Mat::zeros(ps.len(), group_features.cols());
    for (j, p) in ps.points.iter().enumerate() {
        let (best, _) = centers
            .iter()
            .enumerate()
            .map(|(g, &ci)| (g, sq_dist(p, &ps.points[ci])))
            .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        out.row_mut(j).copy_from_slice(group_features.row(best));
    }
    out
}

/// Averages per-point features into `patch × patch` cells of an `h × w`
/// grid. Cells without points are zero.
pub fn project_to_grid(
    point_features: &Mat,
    origins: &[(usize, usize)],
    h: usize,
    w: usize,
    patch: usize,
) -> Result<FeatureGrid> {
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(format!("patch {patch} does not divide {h}x{w}")));
    }
    if point_features.rows() != origins.len() {
        return Err(Error::shape("one origin per point feature"));
    }
    let (rows, cols) = (h / patch, w / patch);
    let d = point_features.cols();
    let mut sum = Mat::zeros(rows * cols, d);
    let mut count = vec![0usize; rows * cols];
    for (j, &(r, c)) in origins.iter().enumerate() {
        let cell = (r / patch) * cols + c / patch;
        count[cell] += 1;
        for (s, v) in sum.row_mut(cell).iter_mut().zip(point_features.row(j)) {
            *s += v;
        }
    }
    for (cell, &n) in count.iter().enumerate() {
        if n > 0 {
            sum.row_mut(cell).iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    Ok(FeatureGrid::new(rows, cols, sum))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PointEncoderConfig {
    pub groups: usize,
    pub group_size: usize,
    pub width: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Block outputs (encoder blocks first, then decoder blocks) concatenated
    /// into the output feature.
    pub taps: Vec<usize>,
    pub point_hidden: usize,
    pub epsilon: f64,
    pub interp: InterpMode,
    /// Multiplier applied to center-relative coordinates before the point MLP.
    pub local_scale: f64,
    pub init_std: f64,
}

impl Default for PointEncoderConfig {
    fn default() -> Self {
        PointEncoderConfig {
            groups: 32,
            group_size: 16,
            width: 48,
            heads: 2,
            enc_layers: 2,
            dec_layers: 1,
            taps: vec![0, 1, 2],
            point_hidden: 32,
            epsilon: 1e-8,
            interp: InterpMode::Normalized,
            local_scale: 16.0,
            init_std: 0.02,
        }
    }
}

impl PointEncoderConfig {
    pub fn out_dim(&self) -> usize {
        self.width * self.taps.len()
    }

    pub fn validate(&self) -> Result<()> {
        let depth = self.enc_layers + self.dec_layers;
        if self.taps.is_empty() || self.taps.iter().any(|&t| t >= depth) {
            return Err(Error::config(
                "point.taps",
                format!("taps must be non-empty block indices below {depth}"),
            ));
        }
        if self.groups == 0 || self.group_size == 0 {
            return Err(Error::config("point.groups", "groups and group_size must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config("point.heads", "width must be divisible by heads"));
        }
        Ok(())
    }
}

/// Encoder output for one cloud.
#[derive(Clone, Debug)]
pub struct GroupFeatures {
    /// Tapped block outputs concatenated, `M × out_dim`.
    pub features: Mat,
    /// Last encoder block output before the decoder, `M × width`.
    pub encoder_tokens: Mat,
}

#[derive(Clone, Debug)]
pub struct PointEncoder {
    cfg: PointEncoderConfig,
    point_fc1: Linear,
    point_fc2: Linear,
    pos_fc1: Linear,
    pos_fc2: Linear,
    blocks: Vec<TransformerBlock>,
}

impl PointEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: PointEncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let g = ParamGroup::Frozen;
        let d = cfg.width;
        let spec = BlockSpec {
            width: d,
            heads: cfg.heads,
            mlp_ratio: 4,
            init_std: cfg.init_std,
        };
        let blocks = (0..cfg.enc_layers + cfg.dec_layers)
            .map(|i| {
                let name = if i < cfg.enc_layers {
                    format!("point_encoder.enc{i}")
                } else {
                    format!("point_encoder.dec{}", i - cfg.enc_layers)
                };
                TransformerBlock::new(store, &name, spec, g, rng)
            })
            .collect();
        Ok(PointEncoder {
            point_fc1: Linear::fan_in(store, "point_encoder.point_fc1", 3, cfg.point_hidden, g, rng),
            point_fc2: Linear::fan_in(store, "point_encoder.point_fc2", cfg.point_hidden, d, g, rng),
            pos_fc1: Linear::fan_in(store, "point_encoder.pos_fc1", 3, cfg.point_hidden, g, rng),
            pos_fc2: Linear::fan_in(store, "point_encoder.pos_fc2", cfg.point_hidden, d, g, rng),
            blocks,
            cfg,
        })
    }

    pub fn config(&self) -> &PointEncoderConfig {
        &self.cfg
    }

    /// Pointwise MLP + max-pool per group, center positional embedding, then
    /// the encoder and decoder blocks.
    pub fn encode_groups(&self, store: &ParamStore, ps: &PointSet, gs: &GroupSet) -> GroupFeatures {
        let mut b = Binder::inference(store);
        let local = gs.local.scale(self.cfg.local_scale);
        let x = b.graph.constant(local);
        let h = self.point_fc1.forward(&mut b, x);
        let h = b.graph.gelu(h);
        let h = self.point_fc2.forward(&mut b, h);
        let tokens = b.graph.group_max(h, gs.group_size);

        let centers = Mat::from_rows(
            &gs.centers
                .iter()
                .map(|&i| ps.points[i].to_vec())
                .collect::<Vec<_>>(),
        );
        let c = b.graph.constant(centers.scale(2.0));
        let pos = self.pos_fc1.forward(&mut b, c);
        let pos = b.graph.gelu(pos);
        let pos = self.pos_fc2.forward(&mut b, pos);
        let mut x = b.graph.add(tokens, pos);

        let mut outputs = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            x = blk.forward(&mut b, x);
            outputs.push(x);
        }
        let tapped: Vec<_> = self.cfg.taps.iter().map(|&t| outputs[t]).collect();
        let features = b.graph.concat_cols(&tapped);
        GroupFeatures {
            features: b.graph.value(features).clone(),
            encoder_tokens: b.graph.value(outputs[self.cfg.enc_layers.max(1) - 1]).clone(),
        }
    }

    /// Full extraction for one point grid. With `refine` the group features
    /// are interpolated back onto every point before pooling; without it each
    /// point takes its nearest group's feature.
    pub fn extract(&self, store: &ParamStore, pc: &PointGrid, patch: usize, refine: bool, seed: u64) -> Result<FeatureGrid> {
        let ps = PointSet::from_grid(pc);
        if ps.is_empty() {
            return Ok(FeatureGrid::zeros(pc.height / patch, pc.width / patch, self.cfg.out_dim()));
        }
        let m = self.cfg.groups.min(ps.len());
        let centers = fps(&ps, m, seed)?;
        let gs = group_knn(&ps, &centers, self.cfg.group_size)?;
        let gf = self.encode_groups(store, &ps, &gs);
        let per_point = if refine {
            interpolate_features(&ps, &centers, &gf.features, self.cfg.epsilon, self.cfg.interp)?
        } else {
            nearest_center_features(&ps, &centers, &gf.features)
        };
        project_to_grid(&per_point, &ps.origins, pc.height, pc.width, patch)
    }
}
