use log::warn;
use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::repository::{Eta, ScoreVector};
use crate::data::ModalityMask;
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_RIDGE: f64 = 1e-6;

/// Gaussian over the three image scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mdm {
    pub mean: [f64; 3],
    pub cov: [[f64; 3]; 3],
    pub lambda: f64,
    precision: [[f64; 3]; 3],
}

impl Mdm {
    /// Fits `μ` and `Σ + λI` with `λ = 1e-6 · trace(Σ) / 3`.
    pub fn fit(xs: &[[f64; 3]]) -> Result<Self> {
        Self::fit_with_ridge(xs, DEFAULT_RIDGE)
    }

    /// `λ = ridge · trace(Σ) / 3`, falling back to `1e-6` when that is zero.
    pub fn fit_with_ridge(xs: &[[f64; 3]], ridge: f64) -> Result<Self> {
        if xs.len() < 2 {
            return Err(Error::invalid("MDM needs at least two training vectors"));
        }
        let n = xs.len() as f64;
        let mut mean = Vector3::zeros();
        for x in xs {
            mean += Vector3::from(*x);
        }
        mean /= n;
        let mut cov = Matrix3::zeros();
        for x in xs {
            let d = Vector3::from(*x) - mean;
            cov += d * d.transpose();
        }
        cov /= n - 1.0;
        let trace = cov.trace();
        let lambda = if ridge == 0.0 && cov.determinant().abs() > 1e-300 {
            0.0
        } else if trace > 0.0 && ridge > 0.0 {
            ridge * trace / 3.0
        } else {
            warn!("degenerate training score vectors; MDM falls back to a scaled identity covariance");
            1e-6
        };
        let reg = cov + Matrix3::identity() * lambda;
        let precision = reg
            .cholesky()
            .map(|c| c.inverse())
            .or_else(|| reg.try_inverse())
            .ok_or_else(|| Error::invalid("MDM covariance is not invertible"))?;
        Ok(Mdm {
            mean: mean.into(),
            cov: cov.transpose().into(),
            lambda,
            precision: precision.transpose().into(),
        })
    }

    /// Builds a model from explicit parameters (no regularization).
    pub fn from_parts(mean: [f64; 3], cov: [[f64; 3]; 3]) -> Result<Self> {
        let m = Matrix3::from_row_slice(&cov.concat());
        let p = m.try_inverse().ok_or_else(|| Error::invalid("covariance is singular"))?;
        Ok(Mdm {
            mean,
            cov,
            lambda: 0.0,
            precision: p.transpose().into(),
        })
    }

    pub fn distance(&self, x: &[f64; 3]) -> f64 {
        let d = Vector3::from(*x) - Vector3::from(self.mean);
        let p = Matrix3::from_row_slice(&self.precision.concat());
        (d.transpose() * p * d)[(0, 0)].max(0.0).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OcsvmSolver {
    /// Stochastic subgradient descent on the primal over random Fourier
    /// features of the RBF kernel.
    Sgd,
    /// Dual coordinate descent (SMO) on the exact kernel.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcsvmConfig {
    pub nu: f64,
    /// RBF bandwidth; `None` uses `1 / (3 · var)` of the training vectors.
    pub gamma: Option<f64>,
    pub max_samples: usize,
    pub solver: OcsvmSolver,
    /// Z-score each coordinate before fitting.
    pub standardize: bool,
    pub lr: f64,
    pub sgd_epochs: usize,
    pub features: usize,
    pub tolerance: f64,
}

impl Default for OcsvmConfig {
    fn default() -> Self {
        OcsvmConfig {
            nu: 0.5,
            gamma: None,
            max_samples: 4096,
            solver: OcsvmSolver::Sgd,
            standardize: true,
            lr: 1e-4,
            sgd_epochs: 5,
            features: 1024,
            tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum OcsvmModel {
    Exact { support: Vec<[f64; 3]>, alpha: Vec<f64> },
    Fourier { omega: Vec<[f64; 3]>, phase: Vec<f64>, w: Vec<f64> },
}

/// One-class SVM with an RBF kernel on 3-vectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ocsvm {
    pub nu: f64,
    pub gamma: f64,
    pub rho: f64,
    shift: [f64; 3],
    scale: [f64; 3],
    model: OcsvmModel,
}

fn rbf(gamma: f64, a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let d: f64 = (0..3).map(|k| (a[k] - b[k]).powi(2)).sum();
    (-gamma * d).exp()
}

fn fourier(omega: &[[f64; 3]], phase: &[f64], x: &[f64; 3]) -> Vec<f64> {
    let s = (2.0 / omega.len() as f64).sqrt();
    omega
        .iter()
        .zip(phase)
        .map(|(w, b)| s * (w[0] * x[0] + w[1] * x[1] + w[2] * x[2] + b).cos())
        .collect()
}

fn quantile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

impl Ocsvm {
    pub fn fit(xs: &[[f64; 3]], cfg: &OcsvmConfig, seed: u64) -> Result<Self> {
        if !(cfg.nu > 0.0 && cfg.nu <= 1.0) {
            return Err(Error::config("detection.ocsvm.nu", "must lie in (0, 1]"));
        }
        if xs.len() < 2 {
            return Err(Error::invalid("OCSVM needs at least two training vectors"));
        }
        let mut rng = seed::rng(seed, &[seed::tag("ocsvm")]);
        let mut data: Vec<[f64; 3]> = if xs.len() > cfg.max_samples {
            sample_indices(&mut rng, xs.len(), cfg.max_samples).iter().map(|i| xs[i]).collect()
        } else {
            xs.to_vec()
        };
        let n = data.len() as f64;
        let mut shift = [0.0; 3];
        let mut scale = [1.0; 3];
        if cfg.standardize {
            for k in 0..3 {
                let m = data.iter().map(|x| x[k]).sum::<f64>() / n;
                let v = data.iter().map(|x| (x[k] - m).powi(2)).sum::<f64>() / n;
                shift[k] = m;
                scale[k] = if v > 0.0 { v.sqrt() } else { 1.0 };
            }
            for x in &mut data {
                for k in 0..3 {
                    x[k] = (x[k] - shift[k]) / scale[k];
                }
            }
        }
        let gamma = match cfg.gamma {
            Some(g) if g > 0.0 => g,
            Some(_) => return Err(Error::config("detection.ocsvm.gamma", "must be positive")),
            None => {
                let all: Vec<f64> = data.iter().flatten().copied().collect();
                let m = all.iter().sum::<f64>() / all.len() as f64;
                let var = all.iter().map(|v| (v - m).powi(2)).sum::<f64>() / all.len() as f64;
                if var > 0.0 {
                    1.0 / (3.0 * var)
                } else {
                    1.0
                }
            }
        };
        let (model, rho) = match cfg.solver {
            OcsvmSolver::Exact => Self::smo(&data, cfg.nu, gamma, cfg.tolerance),
            OcsvmSolver::Sgd => Self::sgd(&data, cfg, gamma, &mut rng),
        };
        Ok(Ocsvm {
            nu: cfg.nu,
            gamma,
            rho,
            shift,
            scale,
            model,
        })
    }

    fn smo(data: &[[f64; 3]], nu: f64, gamma: f64, tol: f64) -> (OcsvmModel, f64) {
        let n = data.len();
        let c = 1.0 / (nu * n as f64);
        // Feasible start: fill the first ⌊νn⌋ coefficients, remainder to the next.
        let mut alpha = vec![0.0; n];
        let mut left: f64 = 1.0;
        for a in alpha.iter_mut() {
            let v = left.min(c);
            *a = v;
            left -= v;
            if left <= 0.0 {
                break;
            }
        }
        let mut grad = vec![0.0; n];
        for (j, &a) in alpha.iter().enumerate() {
            if a > 0.0 {
                for (i, g) in grad.iter_mut().enumerate() {
                    *g += a * rbf(gamma, &data[i], &data[j]);
                }
            }
        }
        let eps = 1e-12;
        for _ in 0..(100 * n).max(1000) {
            // Most violating pair: i can grow (α_i < C), j can shrink (α_j > 0).
            let mut i = None;
            let mut j = None;
            for k in 0..n {
                if alpha[k] < c - eps && i.is_none_or(|i: usize| grad[k] < grad[i]) {
                    i = Some(k);
                }
                if alpha[k] > eps && j.is_none_or(|j: usize| grad[k] > grad[j]) {
                    j = Some(k);
                }
            }
            let (Some(i), Some(j)) = (i, j) else { break };
            if grad[j] - grad[i] < tol {
                break;
            }
            let kij = rbf(gamma, &data[i], &data[j]);
            let curv = (2.0 - 2.0 * kij).max(1e-12);
            let delta = ((grad[j] - grad[i]) / curv).min(c - alpha[i]).min(alpha[j]);
            alpha[i] += delta;
            alpha[j] -= delta;
            for (k, g) in grad.iter_mut().enumerate() {
                *g += delta * (rbf(gamma, &data[k], &data[i]) - rbf(gamma, &data[k], &data[j]));
            }
        }
        let free: Vec<f64> = (0..n).filter(|&k| alpha[k] > eps && alpha[k] < c - eps).map(|k| grad[k]).collect();
        let rho = if free.is_empty() {
            let up = (0..n).filter(|&k| alpha[k] < c - eps).map(|k| grad[k]).fold(f64::INFINITY, f64::min);
            let lo = (0..n).filter(|&k| alpha[k] > eps).map(|k| grad[k]).fold(f64::NEG_INFINITY, f64::max);
            match (up.is_finite(), lo.is_finite()) {
                (true, true) => 0.5 * (up + lo),
                (true, false) => up,
                _ => lo,
            }
        } else {
            free.iter().sum::<f64>() / free.len() as f64
        };
        let keep: Vec<usize> = (0..n).filter(|&k| alpha[k] > eps).collect();
        (
            OcsvmModel::Exact {
                support: keep.iter().map(|&k| data[k]).collect(),
                alpha: keep.iter().map(|&k| alpha[k]).collect(),
            },
            rho,
        )
    }

    /// Warm start at the kernel-mean solution (`w` = mean feature, `ρ` at the
    /// ν-quantile), then subgradient steps on
    /// `½‖w‖² − ρ + (1/ν) mean max(0, ρ − ⟨w, φ(x)⟩)`.
    fn sgd<R: Rng + ?Sized>(data: &[[f64; 3]], cfg: &OcsvmConfig, gamma: f64, rng: &mut R) -> (OcsvmModel, f64) {
        let d = cfg.features.max(1);
        let normal = Normal::new(0.0, (2.0 * gamma).sqrt()).expect("finite bandwidth");
        let omega: Vec<[f64; 3]> = (0..d)
            .map(|_| [normal.sample(rng), normal.sample(rng), normal.sample(rng)])
            .collect();
        let phase: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        let feats: Vec<Vec<f64>> = data.iter().map(|x| fourier(&omega, &phase, x)).collect();
        let n = feats.len() as f64;
        let mut w = vec![0.0; d];
        for f in &feats {
            for (wk, fk) in w.iter_mut().zip(f) {
                *wk += fk / n;
            }
        }
        let dot = |w: &[f64], f: &[f64]| w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
        let mut rho = quantile(feats.iter().map(|f| dot(&w, f)).collect(), cfg.nu);
        let mut order: Vec<usize> = (0..feats.len()).collect();
        for _ in 0..cfg.sgd_epochs {
            order.shuffle(rng);
            for &i in &order {
                let violated = dot(&w, &feats[i]) < rho;
                let coef = if violated { 1.0 / cfg.nu } else { 0.0 };
                for (wk, fk) in w.iter_mut().zip(&feats[i]) {
                    *wk -= cfg.lr * (*wk - coef * fk);
                }
                rho -= cfg.lr * (-1.0 + coef);
            }
        }
        (OcsvmModel::Fourier { omega, phase, w }, rho)
    }

    /// Signed decision function: positive inside the learned support.
    pub fn decision(&self, x: &[f64; 3]) -> f64 {
        let mut z = *x;
        for k in 0..3 {
            z[k] = (z[k] - self.shift[k]) / self.scale[k];
        }
        let s = match &self.model {
            OcsvmModel::Exact { support, alpha } => {
                support.iter().zip(alpha).map(|(sv, a)| a * rbf(self.gamma, sv, &z)).sum::<f64>()
            }
            OcsvmModel::Fourier { omega, phase, w } => {
                fourier(omega, phase, &z).iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
            }
        };
        s - self.rho
    }

    /// Anomaly score: larger is more anomalous.
    pub fn score(&self, x: &[f64; 3]) -> f64 {
        -self.decision(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecisionConfig {
    pub eta: Eta,
    /// MDM ridge relative to the mean variance.
    pub mdm_ridge: f64,
    pub coreset_fraction: f64,
    pub ocsvm: OcsvmConfig,
    /// Fit one MDM per modality combination with enough training samples.
    /// Pseudo-filled streams give score vectors on a different scale, so a
    /// single Gaussian over all of them mostly measures the mask.
    pub mdm_per_mask: bool,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        DecisionConfig {
            eta: Eta::default(),
            mdm_ridge: DEFAULT_RIDGE,
            coreset_fraction: 1.0,
            ocsvm: OcsvmConfig::default(),
            mdm_per_mask: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionModels {
    /// Fitted on every training sample.
    pub mdm: Mdm,
    #[serde(default)]
    pub mdm_by_mask: Vec<(ModalityMask, Mdm)>,
    pub ocsvm: Ocsvm,
}

impl DecisionModels {
    /// The MDM for samples observed as `mask`, falling back to the pooled one.
    pub fn mdm_for(&self, mask: ModalityMask) -> &Mdm {
        self.mdm_by_mask
            .iter()
            .find(|(m, _)| *m == mask)
            .map(|(_, d)| d)
            .unwrap_or(&self.mdm)
    }
}

/// Groups smaller than this use the pooled MDM.
pub const MIN_MASK_SAMPLES: usize = 4;

/// Fits MDM on training image-score vectors and the OCSVM on their
/// per-patch score vectors. `masks[i]` is the modality mask of `train[i]`.
pub fn fit_decision(train: &[ScoreVector], masks: &[ModalityMask], cfg: &DecisionConfig, seed: u64) -> Result<DecisionModels> {
    if train.len() < 4 {
        return Err(Error::invalid(format!(
            "decision models need at least 4 training samples, got {}",
            train.len()
        )));
    }
    if masks.len() != train.len() {
        return Err(Error::shape(format!("{} masks for {} score vectors", masks.len(), train.len())));
    }
    let images: Vec<[f64; 3]> = train.iter().map(|s| s.image_scores).collect();
    let patches: Vec<[f64; 3]> = train.iter().flat_map(|s| s.patch_vectors()).collect();
    let mut mdm_by_mask = Vec::new();
    if cfg.mdm_per_mask {
        for mask in [ModalityMask::COMPLETE, ModalityMask::RGB_ONLY, ModalityMask::PC_ONLY] {
            let xs: Vec<[f64; 3]> = images.iter().zip(masks).filter(|(_, m)| **m == mask).map(|(x, _)| *x).collect();
            if xs.len() >= MIN_MASK_SAMPLES && xs.len() < images.len() {
                mdm_by_mask.push((mask, Mdm::fit_with_ridge(&xs, cfg.mdm_ridge)?));
            }
        }
    }
    Ok(DecisionModels {
        mdm: Mdm::fit_with_ridge(&images, cfg.mdm_ridge)?,
        mdm_by_mask,
        ocsvm: Ocsvm::fit(&patches, &cfg.ocsvm, seed)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyResult {
    pub sco_a: f64,
    pub rows: usize,
    pub cols: usize,
    /// Patch-resolution segmentation, row-major.
    pub seg_m: Vec<f64>,
}

impl AnomalyResult {
    pub fn argmax_patch(&self) -> usize {
        (0..self.seg_m.len())
            .max_by(|&a, &b| self.seg_m[a].total_cmp(&self.seg_m[b]).then(b.cmp(&a)))
            .unwrap_or(0)
    }

    pub fn pixel_map(&self, height: usize, width: usize) -> Vec<f64> {
        upsample_nearest(&self.seg_m, self.rows, self.cols, height, width)
    }
}

/// Nearest-neighbour upsampling of a `rows × cols` map.
pub fn upsample_nearest(map: &[f64], rows: usize, cols: usize, height: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        let pr = (r * rows / height).min(rows - 1);
        for c in 0..width {
            let pc = (c * cols / width).min(cols - 1);
            out.push(map[pr * cols + pc]);
        }
    }
    out
}

pub fn decide(models: &DecisionModels, sv: &ScoreVector, mask: ModalityMask, rows: usize, cols: usize) -> AnomalyResult {
    AnomalyResult {
        sco_a: models.mdm_for(mask).distance(&sv.image_scores),
        rows,
        cols,
        seg_m: sv.patch_vectors().iter().map(|v| models.ocsvm.score(v)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob(n: usize, seed: u64) -> Vec<[f64; 3]> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|_| [nd.sample(&mut rng), 2.0 + 0.5 * nd.sample(&mut rng), -1.0 + 3.0 * nd.sample(&mut rng)])
            .collect()
    }

    #[test]
    fn mdm_examples() {
        let v = [1.0, 2.0, 3.0];
        let m = Mdm::fit(&[v; 5]).unwrap();
        assert!(m.distance(&v) < 1e-9);
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let m = Mdm::from_parts([0.0; 3], eye).unwrap();
        assert!((m.distance(&[3.0, 4.0, 0.0]) - 5.0).abs() < 1e-12);
        assert!((m.distance(&[6.0, 8.0, 0.0]) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn mdm_affine_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = blob(50, 1);
        let tests = blob(10, 2);
        for _ in 0..20 {
            let a: [[f64; 3]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0)));
            let am = Matrix3::from_row_slice(&a.concat());
            if am.determinant().abs() < 0.1 {
                continue;
            }
            let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
            let map = |x: &[f64; 3]| -> [f64; 3] { (am * Vector3::from(*x) + Vector3::from(t)).into() };
            let mapped: Vec<_> = xs.iter().map(map).collect();
            let m1 = Mdm::fit_with_ridge(&xs, 0.0).unwrap();
            let m2 = Mdm::fit_with_ridge(&mapped, 0.0).unwrap();
            let r1 = Mdm::fit(&xs).unwrap();
            let r2 = Mdm::fit(&mapped).unwrap();
            for x in &tests {
                let (d1, d2) = (m1.distance(x), m2.distance(&map(x)));
                assert!((d1 - d2).abs() < 1e-8, "{d1} vs {d2}");
                // The default ridge is isotropic, so invariance is approximate and
                // degrades with the conditioning of the map.
                let (e1, e2) = (r1.distance(x), r2.distance(&map(x)));
                assert!((e1 - e2).abs() < 1e-2 * e1.max(1.0), "{e1} vs {e2}");
            }
        }
    }

    fn outlier_property(solver: OcsvmSolver) {
        let xs = blob(300, 4);
        let cfg = OcsvmConfig {
            solver,
            ..Default::default()
        };
        let m = Ocsvm::fit(&xs, &cfg, 0).unwrap();
        let self_scores: Vec<f64> = xs.iter().map(|x| m.score(x)).collect();
        let p95 = quantile(self_scores, 0.95);
        let far = [10.0, 2.0, -1.0];
        assert!(m.score(&far) > p95, "{solver:?}: {} vs {p95}", m.score(&far));
        assert!(m.decision(&far).is_finite());
    }

    #[test]
    fn ocsvm_scores_outliers_above_training_mass() {
        outlier_property(OcsvmSolver::Sgd);
        outlier_property(OcsvmSolver::Exact);
    }

    #[test]
    fn exact_solver_respects_nu() {
        let xs = blob(200, 5);
        let cfg = OcsvmConfig {
            solver: OcsvmSolver::Exact,
            nu: 0.2,
            ..Default::default()
        };
        let m = Ocsvm::fit(&xs, &cfg, 0).unwrap();
        let outside = xs.iter().filter(|x| m.decision(x) < -1e-9).count() as f64 / 200.0;
        // ν upper-bounds the outlier fraction.
        assert!(outside <= 0.2 + 0.02, "{outside}");
        assert!(Ocsvm::fit(&xs, &OcsvmConfig { nu: 0.0, ..cfg }, 0).is_err());
    }

    #[test]
    fn decide_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let train: Vec<ScoreVector> = (0..20)
            .map(|_| ScoreVector {
                image_scores: std::array::from_fn(|_| rng.random_range(0.5..1.5)),
                patch_maps: std::array::from_fn(|_| (0..4).map(|_| rng.random_range(0.0..1.0)).collect()),
            })
            .collect();
        let masks = vec![ModalityMask::COMPLETE; train.len()];
        let models = fit_decision(&train, &masks, &DecisionConfig::default(), 0).unwrap();
        assert!(models.mdm_by_mask.is_empty());
        let at_mean = ScoreVector {
            image_scores: models.mdm.mean,
            patch_maps: std::array::from_fn(|_| vec![0.5; 4]),
        };
        let r = decide(&models, &at_mean, ModalityMask::COMPLETE, 2, 2);
        assert!(r.sco_a < 1e-9);
        assert_eq!(r, decide(&models, &at_mean, ModalityMask::COMPLETE, 2, 2));
        assert!(fit_decision(&train[..3], &masks[..3], &DecisionConfig::default(), 0).is_err());

        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let m = DecisionModels {
            mdm: Mdm::from_parts([0.0; 3], eye).unwrap(),
            mdm_by_mask: Vec::new(),
            ocsvm: models.ocsvm.clone(),
        };
        let sv = ScoreVector {
            image_scores: [1.0, 2.0, 0.5],
            patch_maps: at_mean.patch_maps.clone(),
        };
        let doubled = ScoreVector {
            image_scores: [2.0, 4.0, 1.0],
            ..sv.clone()
        };
        let (a, b) = (decide(&m, &sv, ModalityMask::COMPLETE, 2, 2).sco_a, decide(&m, &doubled, ModalityMask::COMPLETE, 2, 2).sco_a);
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn mdm_is_chosen_by_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // Complete samples near 1, RGB-only samples near 10 on the first score.
        let mut train = Vec::new();
        let mut masks = Vec::new();
        for i in 0..30 {
            let rgb_only = i % 3 != 0;
            let base = if rgb_only { 10.0 } else { 1.0 };
            train.push(ScoreVector {
                image_scores: [base + rng.random_range(-0.1..0.1), rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)],
                patch_maps: std::array::from_fn(|_| vec![rng.random_range(0.0..1.0); 4]),
            });
            masks.push(if rgb_only { ModalityMask::RGB_ONLY } else { ModalityMask::COMPLETE });
        }
        let models = fit_decision(&train, &masks, &DecisionConfig::default(), 0).unwrap();
        assert_eq!(models.mdm_by_mask.len(), 2);
        assert!((models.mdm_for(ModalityMask::COMPLETE).mean[0] - 1.0).abs() < 0.1);
        assert!((models.mdm_for(ModalityMask::RGB_ONLY).mean[0] - 10.0).abs() < 0.1);
        // No point-cloud-only training samples: pooled fallback.
        assert_eq!(models.mdm_for(ModalityMask::PC_ONLY), &models.mdm);

        let cfg = DecisionConfig {
            mdm_per_mask: false,
            ..Default::default()
        };
        assert!(fit_decision(&train, &masks, &cfg, 0).unwrap().mdm_by_mask.is_empty());
        assert!(fit_decision(&train, &masks[..5], &cfg, 0).is_err());
    }

    #[test]
    fn upsampling_keeps_the_argmax_patch() {
        let seg = vec![0.1, 0.9, 0.3, 0.2];
        let r = AnomalyResult {
            sco_a: 0.0,
            rows: 2,
            cols: 2,
            seg_m: seg,
        };
        let px = r.pixel_map(8, 8);
        let arg = (0..64).max_by(|&a, &b| px[a].total_cmp(&px[b]).then(b.cmp(&a))).unwrap();
        assert_eq!((arg / 8 / 4, arg % 8 / 4), (0, 1));
        assert_eq!(r.argmax_patch(), 1);
    }
}
