//! Image AUROC, pixel AUROC and AUPRO with exact threshold sweeps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// Distinct scores, descending; a point is "positive" when `score >= t`.
    pub thresholds: Vec<f64>,
    pub fpr: Vec<f64>,
    pub tpr: Vec<f64>,
}

fn sorted_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// ROC points from `(0, 0)` to `(1, 1)`, one per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::shape("one label per score"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("AUROC needs both classes"));
    }
    let idx = sorted_desc(scores);
    let mut curve = RocCurve {
        thresholds: vec![f64::INFINITY],
        fpr: vec![0.0],
        tpr: vec![0.0],
    };
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut k = 0;
    while k < idx.len() {
        let t = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == t {
            if labels[idx[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        curve.thresholds.push(t);
        curve.fpr.push(fp as f64 / neg as f64);
        curve.tpr.push(tp as f64 / pos as f64);
    }
    Ok(curve)
}

fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(xs, ys)| (xs[1] - xs[0]) * (ys[0] + ys[1]) / 2.0).sum()
}

pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let c = roc_curve(scores, labels)?;
    Ok(trapezoid(&c.fpr, &c.tpr))
}

/// AUROC over the pooled pixels of every map.
pub fn pixel_auroc(maps: &[Vec<f64>], masks: &[Vec<bool>]) -> Result<f64> {
    if maps.len() != masks.len() || maps.iter().zip(masks).any(|(m, g)| m.len() != g.len()) {
        return Err(Error::shape("score maps and masks must match"));
    }
    let scores: Vec<f64> = maps.iter().flatten().copied().collect();
    let labels: Vec<bool> = masks.iter().flatten().copied().collect();
    auroc(&scores, &labels)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

/// Labels connected true regions of an `h × w` mask. Returns a label per
/// pixel (`None` off-mask) and the region count.
pub fn connected_components(mask: &[bool], h: usize, w: usize, conn: Connectivity) -> (Vec<Option<usize>>, usize) {
    let mut label = vec![None; mask.len()];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start].is_some() {
            continue;
        }
        label[start] = Some(next);
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (r, c) = ((p / w) as isize, (p % w) as isize);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if (dr == 0 && dc == 0) || (conn == Connectivity::Four && dr != 0 && dc != 0) {
                        continue;
                    }
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if mask[q] && label[q].is_none() {
                        label[q] = Some(next);
                        stack.push(q);
                    }
                }
            }
        }
        next += 1;
    }
    (label, next)
}

/// One pixel map with its shape.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMap<T> {
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProCurve {
    pub fpr: Vec<f64>,
    pub pro: Vec<f64>,
}

/// Per-region overlap against false-positive rate, one point per distinct
/// score. Regions are connected components of each mask.
pub fn pro_curve(maps: &[PixelMap<f64>], masks: &[PixelMap<bool>], conn: Connectivity) -> Result<ProCurve> {
    if maps.len() != masks.len() {
        return Err(Error::shape("one mask per score map"));
    }
    let mut scores = Vec::new();
    // Region id per pixel, or None for a normal pixel.
    let mut region = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    for (m, g) in maps.iter().zip(masks) {
        if (m.height, m.width) != (g.height, g.width) || m.data.len() != g.data.len() || m.data.len() != m.height * m.width {
            return Err(Error::shape("score map and mask shapes differ"));
        }
        let (labels, count) = connected_components(&g.data, g.height, g.width, conn);
        let offset = sizes.len();
        sizes.extend(std::iter::repeat_n(0, count));
        for (p, l) in labels.iter().enumerate() {
            scores.push(m.data[p]);
            region.push(l.map(|l| {
                sizes[offset + l] += 1;
                offset + l
            }));
        }
    }
    if sizes.is_empty() {
        return Err(Error::invalid("AUPRO needs at least one anomalous region"));
    }
    let negatives = region.iter().filter(|r| r.is_none()).count();
    if negatives == 0 {
        return Err(Error::invalid("AUPRO needs anomaly-free pixels"));
    }
    let n_regions = sizes.len() as f64;
    let idx = sorted_desc(&scores);
    let mut curve = ProCurve {
        fpr: vec![0.0],
        pro: vec![0.0],
    };
    let (mut fp, mut pro) = (0usize, 0.0f64);
    let mut k = 0;
    while k < idx.len() {
        let t = scores[idx[k]];
        while k < idx.len() && scores[idx[k]] == t {
            match region[idx[k]] {
                Some(r) => pro += 1.0 / (sizes[r] as f64 * n_regions),
                None => fp += 1,
            }
            k += 1;
        }
        curve.fpr.push(fp as f64 / negatives as f64);
        curve.pro.push(pro.min(1.0));
    }
    Ok(curve)
}

/// Trapezoid area under `y(x)` on `[0, limit]`, interpolating at the limit.
pub fn area_up_to(x: &[f64], y: &[f64], limit: f64) -> f64 {
    let mut area = 0.0;
    for k in 1..x.len() {
        let (x0, x1) = (x[k - 1], x[k]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y[k - 1] + y[k]) / 2.0;
        } else {
            let yl = y[k - 1] + (y[k] - y[k - 1]) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y[k - 1] + yl) / 2.0;
            break;
        }
    }
    area
}

/// Area under the PRO curve up to `fpr_limit`, divided by `fpr_limit`.
pub fn aupro(maps: &[PixelMap<f64>], masks: &[PixelMap<bool>], fpr_limit: f64, conn: Connectivity) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::invalid("fpr_limit must lie in (0, 1]"));
    }
    let c = pro_curve(maps, masks, conn)?;
    Ok(area_up_to(&c.fpr, &c.pro, fpr_limit) / fpr_limit)
}


#[cfg(test)]
mod tests {
    use super::oracles::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn auroc_examples() {
        let s = [0.1, 0.4, 0.35, 0.8];
        let l = [false, false, true, true];
        assert!((auroc(&s, &l).unwrap() - 0.75).abs() < 1e-12);
        assert_eq!(auroc(&[0.1, 0.2, 0.9], &[false, false, true]).unwrap(), 1.0);
        let inv: Vec<bool> = l.iter().map(|x| !x).collect();
        assert!((auroc(&s, &inv).unwrap() - 0.25).abs() < 1e-12);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn pixel_auroc_examples() {
        let masks = vec![vec![true, false, false, false], vec![false, false, true, true]];
        let exact: Vec<Vec<f64>> = masks.iter().map(|m| m.iter().map(|&b| b as u8 as f64).collect()).collect();
        assert_eq!(pixel_auroc(&exact, &masks).unwrap(), 1.0);
        let flat = vec![vec![0.3; 4], vec![0.3; 4]];
        assert_eq!(pixel_auroc(&flat, &masks).unwrap(), 0.5);
        let maps = vec![vec![0.9, 0.1, 0.5, 0.2], vec![0.4, 0.6, 0.5, 0.3]];
        let s: Vec<f64> = maps.concat();
        let l: Vec<bool> = masks.concat();
        assert!((pixel_auroc(&maps, &masks).unwrap() - win_rate(&s, &l)).abs() < 1e-12);
    }

    fn pm<T: Clone>(h: usize, w: usize, data: Vec<T>) -> PixelMap<T> {
        PixelMap { height: h, width: w, data }
    }

    #[test]
    fn aupro_examples() {
        #[rustfmt::skip]
        let mask = vec![
            true, true, false, false,
            false, false, false, false,
            false, false, true, true,
            false, false, true, true,
        ];
        let masks = vec![pm(4, 4, mask.clone())];
        let perfect = vec![pm(4, 4, mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())];
        assert!((aupro(&perfect, &masks, 0.3, Connectivity::Eight).unwrap() - 1.0).abs() < 1e-12);
        let worst = vec![pm(4, 4, mask.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect())];
        assert_eq!(aupro(&worst, &masks, 0.3, Connectivity::Eight).unwrap(), 0.0);

        let hand: Vec<f64> = vec![
            0.9, 0.2, 0.3, 0.1, 0.4, 0.25, 0.05, 0.15, 0.35, 0.45, 0.8, 0.6, 0.5, 0.12, 0.7, 0.3,
        ];
        let maps = vec![pm(4, 4, hand)];
        for limit in [0.1, 0.3, 0.5, 1.0] {
            let a = aupro(&maps, &masks, limit, Connectivity::Eight).unwrap();
            let o = aupro_sweep(&maps, &masks, limit);
            assert!((a - o).abs() < 1e-6, "limit {limit}: {a} vs {o}");
        }
        assert!(aupro(&maps, &[pm(4, 4, vec![false; 16])], 0.3, Connectivity::Eight).is_err());
    }

    #[test]
    fn components() {
        let mask = [true, false, false, false, true, false, false, false, true];
        let (_, n8) = connected_components(&mask, 3, 3, Connectivity::Eight);
        let (_, n4) = connected_components(&mask, 3, 3, Connectivity::Four);
        assert_eq!((n8, n4), (1, 3));
    }

    #[test]
    fn single_region_full_limit_equals_sample_auroc() {
        let mask = vec![false, true, true, false, false, true, false, false, false];
        let scores = vec![0.2, 0.7, 0.4, 0.5, 0.1, 0.9, 0.3, 0.6, 0.0];
        let a = aupro(&[pm(3, 3, scores.clone())], &[pm(3, 3, mask.clone())], 1.0, Connectivity::Eight).unwrap();
        assert!((a - auroc(&scores, &mask).unwrap()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn auroc_matches_win_rate(data in proptest::collection::vec((0u8..8, any::<bool>()), 2..64)) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 7.0).collect();
            let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = auroc(&scores, &labels).unwrap();
            prop_assert!((a - win_rate(&scores, &labels)).abs() < 1e-9);
            let inv: Vec<bool> = labels.iter().map(|l| !l).collect();
            prop_assert!((a + auroc(&scores, &inv).unwrap() - 1.0).abs() < 1e-9);
            let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3) * 5.0 - 2.0).collect();
            prop_assert!((a - auroc(&cubed, &labels).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn pro_area_grows_with_limit(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mask: Vec<bool> = (0..36).map(|_| rng.random_bool(0.3)).collect();
            prop_assume!(mask.iter().any(|&m| m) && mask.iter().any(|&m| !m));
            let scores: Vec<f64> = (0..36).map(|_| rng.random::<f64>()).collect();
            let c = pro_curve(&[pm(6, 6, scores)], &[pm(6, 6, mask)], Connectivity::Eight).unwrap();
            let mut prev = 0.0;
            for limit in [0.05, 0.1, 0.3, 0.6, 1.0] {
                let a = area_up_to(&c.fpr, &c.pro, limit);
                prop_assert!(a >= prev);
                prev = a;
            }
        }
    }
}
