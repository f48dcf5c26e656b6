use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::ModalityMask;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{sq_dist, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepoKind {
    Pc,
    Rgb,
    Fs,
}

impl RepoKind {
    pub const ALL: [RepoKind; 3] = [RepoKind::Pc, RepoKind::Rgb, RepoKind::Fs];

    pub fn name(self) -> &'static str {
        match self {
            RepoKind::Pc => "R_pc",
            RepoKind::Rgb => "R_rgb",
            RepoKind::Fs => "R_fs",
        }
    }
}

/// Where a bank row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub sample: u64,
    pub patch: usize,
    /// Whether the row was computed from a ones-filled placeholder input.
    pub pseudo: bool,
}

/// Nearest-neighbour queries against a feature bank. `exclude` skips every
/// row contributed by the given sample.
pub trait NeighborQuery {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn k_nearest(&self, q: &[f64], k: usize, exclude: Option<u64>) -> Vec<(f64, usize)>;
    fn nearest(&self, q: &[f64], exclude: Option<u64>) -> Option<(f64, usize)> {
        self.k_nearest(q, 1, exclude).into_iter().next()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryRepository {
    pub kind: RepoKind,
    pub bank: Mat,
    pub provenance: Vec<Provenance>,
    /// Indices of the kept rows into the full token list, when subsampled.
    pub coreset: Option<Vec<usize>>,
}

impl NeighborQuery for MemoryRepository {
    fn len(&self) -> usize {
        self.bank.rows()
    }

    /// Brute force; distances are Euclidean, ties go to the lower row.
    fn k_nearest(&self, q: &[f64], k: usize, exclude: Option<u64>) -> Vec<(f64, usize)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        for i in 0..self.bank.rows() {
            if exclude.is_some_and(|s| self.provenance[i].sample == s) {
                continue;
            }
            let d = sq_dist(q, self.bank.row(i));
            if best.len() == k && d >= best[k - 1].0 {
                continue;
            }
            let pos = best.partition_point(|&(bd, _)| bd <= d);
            best.insert(pos, (d, i));
            best.truncate(k);
        }
        best.into_iter().map(|(d, i)| (d.sqrt(), i)).collect()
    }
}

/// Greedy k-center selection of `count` rows starting from `start`.
pub fn greedy_coreset(bank: &Mat, count: usize, start: usize) -> Vec<usize> {
    let n = bank.rows();
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let mut min_d = vec![f64::INFINITY; n];
    let mut chosen = vec![false; n];
    let mut out = Vec::with_capacity(count);
    let mut next = start;
    while out.len() < count {
        out.push(next);
        chosen[next] = true;
        let c = bank.row(next);
        for (i, d) in min_d.iter_mut().enumerate() {
            *d = d.min(sq_dist(bank.row(i), c));
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
    out
}

impl MemoryRepository {
    pub fn new(kind: RepoKind, bank: Mat, provenance: Vec<Provenance>) -> Result<Self> {
        if bank.rows() == 0 {
            return Err(Error::EmptyRepository(kind.name()));
        }
        if provenance.len() != bank.rows() {
            return Err(Error::shape("one provenance entry per bank row"));
        }
        Ok(MemoryRepository {
            kind,
            bank,
            provenance,
            coreset: None,
        })
    }

    /// Keeps `round(fraction · n)` rows (at least one) by greedy k-center
    /// selection from a seeded start.
    pub fn subsample(self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::config("detection.coreset_fraction", "must lie in (0, 1]"));
        }
        if fraction == 1.0 {
            return Ok(self);
        }
        let n = self.bank.rows();
        let count = ((fraction * n as f64).round() as usize).clamp(1, n);
        let start = seed::rng(seed, &[seed::tag("coreset"), seed::tag(self.kind.name())]).random_range(0..n);
        let keep = greedy_coreset(&self.bank, count, start);
        Ok(self.select(keep))
    }

    fn select(self, keep: Vec<usize>) -> Self {
        let rows: Vec<Vec<f64>> = keep.iter().map(|&i| self.bank.row(i).to_vec()).collect();
        MemoryRepository {
            kind: self.kind,
            bank: Mat::from_rows(&rows),
            provenance: keep.iter().map(|&i| self.provenance[i]).collect(),
            coreset: Some(keep),
        }
    }
}

/// Stage-2 output tokens of one training or test sample.
#[derive(Clone, Debug)]
pub struct TrainTokens {
    pub id: u64,
    pub mask: ModalityMask,
    pub g_pc: Mat,
    pub g_rgb: Mat,
    pub g_fs: Mat,
}

/// Builds `R_pc`, `R_rgb` and `R_fs`. Unimodal banks only take tokens from
/// samples where that modality was observed; the fused bank takes every
/// sample.
pub fn build_repositories(train: &[TrainTokens], coreset_fraction: f64, seed: u64) -> Result<[MemoryRepository; 3]> {
    let collect = |kind: RepoKind| -> Result<MemoryRepository> {
        let mut rows: Vec<&[f64]> = Vec::new();
        let mut prov = Vec::new();
        for s in train {
            let m = match kind {
                RepoKind::Pc if !s.mask.has_pc => continue,
                RepoKind::Rgb if !s.mask.has_rgb => continue,
                RepoKind::Pc => &s.g_pc,
                RepoKind::Rgb => &s.g_rgb,
                RepoKind::Fs => &s.g_fs,
            };
            for p in 0..m.rows() {
                rows.push(m.row(p));
                prov.push(Provenance {
                    sample: s.id,
                    patch: p,
                    pseudo: kind == RepoKind::Fs && !s.mask.is_complete(),
                });
            }
        }
        if rows.is_empty() {
            return Err(Error::EmptyRepository(kind.name()));
        }
        let d = rows[0].len();
        let bank = Mat::from_vec(rows.len(), d, rows.concat());
        MemoryRepository::new(kind, bank, prov)?.subsample(coreset_fraction, seed)
    };
    Ok([collect(RepoKind::Pc)?, collect(RepoKind::Rgb)?, collect(RepoKind::Fs)?])
}

/// Re-weighting of the image score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Eta {
    /// `1 − softmax` weight of the nearest distance among the `b` nearest.
    PatchCore { neighbors: usize },
    Constant(f64),
}

impl Default for Eta {
    fn default() -> Self {
        Eta::PatchCore { neighbors: 3 }
    }
}

impl fmt::Display for Eta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Eta::PatchCore { neighbors } => write!(f, "patchcore:{neighbors}"),
            Eta::Constant(c) => write!(f, "constant:{c}"),
        }
    }
}

impl FromStr for Eta {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "patchcore" => {
                let neighbors = if arg.is_empty() { Ok(3) } else { arg.parse() };
                match neighbors {
                    Ok(n) if n >= 1 => Ok(Eta::PatchCore { neighbors: n }),
                    _ => Err(format!("bad neighbour count in `{s}`")),
                }
            }
            "constant" => arg
                .parse::<f64>()
                .ok()
                .filter(|c| c.is_finite())
                .map(Eta::Constant)
                .ok_or_else(|| format!("bad constant in `{s}`")),
            _ => Err(format!("unknown eta `{s}` (expected patchcore:B or constant:C)")),
        }
    }
}

impl Serialize for Eta {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Eta {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Per-patch nearest-bank distance.
pub fn score_psi<R: NeighborQuery + ?Sized>(repo: &R, tokens: &Mat, exclude: Option<u64>) -> Result<Vec<f64>> {
    if repo.is_empty() {
        return Err(Error::invalid("scoring against an empty repository"));
    }
    (0..tokens.rows())
        .map(|p| {
            repo.nearest(tokens.row(p), exclude)
                .map(|(d, _)| d)
                .ok_or_else(|| Error::invalid("repository has no rows outside the excluded sample"))
        })
        .collect()
}

/// Image score: the largest nearest-bank distance over patches, re-weighted.
pub fn score_phi<R: NeighborQuery + ?Sized>(repo: &R, tokens: &Mat, eta: Eta, exclude: Option<u64>) -> Result<f64> {
    let psi = score_psi(repo, tokens, exclude)?;
    Ok(phi_from_psi(repo, tokens, &psi, eta, exclude))
}

fn phi_from_psi<R: NeighborQuery + ?Sized>(repo: &R, tokens: &Mat, psi: &[f64], eta: Eta, exclude: Option<u64>) -> f64 {
    let Some((star, &s_star)) = psi.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0))) else {
        return 0.0;
    };
    let w = match eta {
        Eta::Constant(c) => c,
        Eta::PatchCore { neighbors } => {
            let nn = repo.k_nearest(tokens.row(star), neighbors, exclude);
            let m = nn.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = nn.iter().map(|x| (x.0 - m).exp()).sum();
            1.0 - (s_star - m).exp() / z
        }
    };
    w * s_star
}

/// Image scores and patch maps of one sample against the three repositories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub image_scores: [f64; 3],
    pub patch_maps: [Vec<f64>; 3],
}

impl ScoreVector {
    /// Per-patch `[ψ_pc, ψ_rgb, ψ_fs]`.
    pub fn patch_vectors(&self) -> Vec<[f64; 3]> {
        (0..self.patch_maps[0].len())
            .map(|p| [self.patch_maps[0][p], self.patch_maps[1][p], self.patch_maps[2][p]])
            .collect()
    }
}

/// Scores a sample against `[R_pc, R_rgb, R_fs]`. Passing the sample's own
/// id as `exclude` gives leave-one-out scores for training samples.
pub fn score_vector(repos: &[MemoryRepository; 3], s: &TrainTokens, eta: Eta, exclude: Option<u64>) -> Result<ScoreVector> {
    let mut image_scores = [0.0; 3];
    let mut patch_maps: [Vec<f64>; 3] = Default::default();
    for (k, repo) in repos.iter().enumerate() {
        let tokens = match repo.kind {
            RepoKind::Pc => &s.g_pc,
            RepoKind::Rgb => &s.g_rgb,
            RepoKind::Fs => &s.g_fs,
        };
        let psi = score_psi(repo, tokens, exclude)?;
        image_scores[k] = phi_from_psi(repo, tokens, &psi, eta, exclude);
        patch_maps[k] = psi;
    }
    Ok(ScoreVector {
        image_scores,
        patch_maps,
    })
}
