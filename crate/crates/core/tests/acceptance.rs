//! Acceptance suite. Each test prints one `[PASS]` / `[FAIL]` line.
//!
//! Oracles here are written independently of the crate: brute-force pairwise
//! win rates, exhaustive threshold sweeps with their own flood fill, a
//! hand-rolled softmax and central finite differences.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use miiad_core::config::ExperimentConfig;
use miiad_core::data::{
    apply_missing, fill_pseudo, missing_counts, synth_anomaly, synth_normal, AnomalyKind, MiiadDataset, MissingMode,
    MissingSpec,
};
use miiad_core::detection::attention_weights;
use miiad_core::fusion::{apply_generated_mlp, Activation, HyperNetwork, HyperSpec};
use miiad_core::harness::{run_variants, ParamCounts, RunManifest, VariantRun, MEAN_ROW};
use miiad_core::metrics::{aupro, auroc, pixel_auroc, Connectivity, PixelMap};
use miiad_core::params::{Binder, ParamGroup, ParamStore};
use miiad_core::pipeline::Flags;
use miiad_core::point_encoder::{interpolate_features, interpolation_weights, InterpMode, PointSet};
use miiad_core::tensor::Mat;

/// Written straight to stdout so the line shows up under the default
/// output capture too.
fn report(id: u32, name: &str, pass: bool, elapsed: Duration, detail: &str) {
    let line = format!(
        "[{}] criterion {id:>2}: {name} ({:.2}s) {detail}\n",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

// ---------------------------------------------------------------- oracles

fn win_rate(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

/// 8-connected regions of one mask by breadth-first search.
fn regions(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut region = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            region.push(p);
            let (r, c) = ((p / w) as i64, (p % w) as i64);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let q = nr as usize * w + nc as usize;
                    if mask[q] && !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                }
            }
        }
        out.push(region);
    }
    out
}

/// Sweeps every distinct score, recomputing FPR and mean per-region overlap
/// from scratch, then integrates PRO over FPR up to `limit`.
fn aupro_sweep(maps: &[(usize, usize, Vec<f64>)], masks: &[Vec<bool>], limit: f64) -> f64 {
    let regs: Vec<(usize, Vec<usize>)> = maps
        .iter()
        .zip(masks)
        .enumerate()
        .flat_map(|(s, ((h, w, _), m))| regions(m, *h, *w).into_iter().map(move |r| (s, r)))
        .collect();
    let negatives: usize = masks.iter().map(|m| m.iter().filter(|v| !**v).count()).sum();
    let mut ts: Vec<f64> = maps.iter().flat_map(|(_, _, d)| d.iter().copied()).collect();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let mut pts = vec![(0.0, 0.0)];
    for &t in &ts {
        let fp: usize = maps
            .iter()
            .zip(masks)
            .map(|((_, _, d), m)| d.iter().zip(m).filter(|(v, a)| !**a && **v >= t).count())
            .sum();
        let pro: f64 = regs
            .iter()
            .map(|(s, r)| r.iter().filter(|&&p| maps[*s].2[p] >= t).count() as f64 / r.len() as f64)
            .sum::<f64>()
            / regs.len() as f64;
        pts.push((fp as f64 / negatives as f64, pro));
    }
    let mut area = 0.0;
    for k in 1..pts.len() {
        let ((x0, y0), (x1, y1)) = (pts[k - 1], pts[k]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let yl = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + yl) / 2.0;
            break;
        }
    }
    area / limit
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    loop {
        let l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if l.iter().any(|v| *v) && l.iter().any(|v| !*v) {
            return l;
        }
    }
}

/// Scores on a coarse lattice so that ties are common.
fn random_scores(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let levels = rng.random_range(2..12);
    (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect()
}

#[test]
fn c01_metric_oracles() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut e_auroc, mut e_pix, mut e_pro) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let n = rng.random_range(2..=64);
        let labels = random_labels(&mut rng, n);
        let scores = random_scores(&mut rng, n);
        e_auroc = e_auroc.max((auroc(&scores, &labels).unwrap() - win_rate(&scores, &labels)).abs());
    }
    for _ in 0..200 {
        let k = rng.random_range(1..=3);
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..k {
            let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
            maps.push(random_scores(&mut rng, h * w));
            masks.push((0..h * w).map(|_| rng.random_bool(0.3)).collect::<Vec<bool>>());
        }
        let flat_l: Vec<bool> = masks.iter().flatten().copied().collect();
        if !flat_l.iter().any(|v| *v) || flat_l.iter().all(|v| *v) {
            masks[0][0] = !masks[0][0];
        }
        let flat_l: Vec<bool> = masks.iter().flatten().copied().collect();
        let flat_s: Vec<f64> = maps.iter().flatten().copied().collect();
        e_pix = e_pix.max((pixel_auroc(&maps, &masks).unwrap() - win_rate(&flat_s, &flat_l)).abs());
    }
    let mut done = 0;
    while done < 200 {
        let k = rng.random_range(1..=3);
        let mut maps = Vec::new();
        let mut masks = Vec::new();
        for _ in 0..k {
            let (h, w) = (rng.random_range(2..=8), rng.random_range(2..=8));
            maps.push((h, w, random_scores(&mut rng, h * w)));
            masks.push((0..h * w).map(|_| rng.random_bool(0.25)).collect::<Vec<bool>>());
        }
        let all: Vec<bool> = masks.iter().flatten().copied().collect();
        if !all.iter().any(|v| *v) || all.iter().all(|v| *v) {
            continue;
        }
        let limit = if rng.random_bool(0.5) { 0.3 } else { rng.random_range(0.05..=1.0) };
        let pm: Vec<PixelMap<f64>> = maps
            .iter()
            .map(|(h, w, d)| PixelMap {
                height: *h,
                width: *w,
                data: d.clone(),
            })
            .collect();
        let gm: Vec<PixelMap<bool>> = maps
            .iter()
            .zip(&masks)
            .map(|((h, w, _), m)| PixelMap {
                height: *h,
                width: *w,
                data: m.clone(),
            })
            .collect();
        let got = aupro(&pm, &gm, limit, Connectivity::Eight).unwrap();
        e_pro = e_pro.max((got - aupro_sweep(&maps, &masks, limit)).abs());
        done += 1;
    }
    let el = t.elapsed();
    let pass = e_auroc <= 1e-9 && e_pix <= 1e-9 && e_pro <= 1e-6 && el.as_secs_f64() < 30.0;
    report(
        1,
        "metric oracle equivalence",
        pass,
        el,
        &format!("max err auroc {e_auroc:.1e}, pixel {e_pix:.1e}, aupro {e_pro:.1e}"),
    );
    assert!(pass);
}

#[test]
fn c02_masked_attention() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut e_sum, mut e_oracle, mut e_shift) = (0.0f64, 0.0f64, 0.0f64);
    let mut masked_nonzero = 0usize;
    for _ in 0..1000 {
        let l = rng.random_range(1..=16);
        let d = rng.random_range(1..=8);
        let scale = rng.random_range(0.1..4.0);
        let q = Mat::from_vec(l, d, (0..l * d).map(|_| rng.random_range(-scale..scale)).collect());
        let k = Mat::from_vec(l, d, (0..l * d).map(|_| rng.random_range(-scale..scale)).collect());
        let mut mask: Vec<bool> = (0..l * l).map(|_| rng.random_bool(0.5)).collect();
        for i in 0..l {
            if !mask[i * l..(i + 1) * l].iter().any(|m| *m) {
                let j = rng.random_range(0..l);
                mask[i * l + j] = true;
            }
        }
        let a = attention_weights(&q, &k, &mask).unwrap();

        // Row-wise shift c_i through one extra key dimension of ones.
        let c: Vec<f64> = (0..l).map(|_| rng.random_range(-50.0..50.0)).collect();
        let grow = ((d + 1) as f64 / d as f64).sqrt();
        let mut q2 = Mat::zeros(l, d + 1);
        let mut k2 = Mat::zeros(l, d + 1);
        for i in 0..l {
            for j in 0..d {
                q2[(i, j)] = q[(i, j)] * grow;
                k2[(i, j)] = k[(i, j)];
            }
            q2[(i, d)] = c[i] * ((d + 1) as f64).sqrt();
            k2[(i, d)] = 1.0;
        }
        let a2 = attention_weights(&q2, &k2, &mask).unwrap();

        for i in 0..l {
            let logits: Vec<f64> = (0..l)
                .map(|j| (0..d).map(|x| q[(i, x)] * k[(j, x)]).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = (0..l).filter(|&j| mask[i * l + j]).map(|j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..l).filter(|&j| mask[i * l + j]).map(|j| (logits[j] - m).exp()).sum();
            let mut row = 0.0;
            for j in 0..l {
                if mask[i * l + j] {
                    row += a[(i, j)];
                    e_oracle = e_oracle.max((a[(i, j)] - (logits[j] - m).exp() / z).abs());
                } else if a[(i, j)] != 0.0 || a2[(i, j)] != 0.0 {
                    masked_nonzero += 1;
                }
                e_shift = e_shift.max((a[(i, j)] - a2[(i, j)]).abs());
            }
            e_sum = e_sum.max((row - 1.0).abs());
        }
    }
    let el = t.elapsed();
    let pass = e_sum <= 1e-12 && masked_nonzero == 0 && e_shift <= 1e-12 && e_oracle <= 1e-12 && el.as_secs_f64() < 5.0;
    report(
        2,
        "masked attention properties",
        pass,
        el,
        &format!("row-sum err {e_sum:.1e}, masked nonzero {masked_nonzero}, shift err {e_shift:.1e}, oracle err {e_oracle:.1e}"),
    );
    assert!(pass);
}

#[test]
fn c03_interpolation() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut e_sum, mut hull_violations) = (0.0f64, 0usize);
    for _ in 0..500 {
        let n = rng.random_range(1..=40);
        let m = rng.random_range(1..=n.min(8));
        let d = rng.random_range(1..=6);
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let ps = PointSet {
            origins: (0..n).map(|i| (i, 0)).collect(),
            points: points.clone(),
        };
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..m {
            let j = rng.random_range(i..n);
            idx.swap(i, j);
        }
        let centers = &idx[..m];
        let cpts: Vec<[f64; 3]> = centers.iter().map(|&i| points[i]).collect();
        let eps = 10f64.powf(rng.random_range(-10.0..-2.0));
        let w = interpolation_weights(&points, &cpts, eps, InterpMode::Normalized);
        for j in 0..n {
            e_sum = e_sum.max((w.row(j).iter().sum::<f64>() - 1.0).abs());
        }
        let feats = Mat::from_vec(m, d, (0..m * d).map(|_| rng.random_range(-5.0..5.0)).collect());
        let out = interpolate_features(&ps, centers, &feats, eps, InterpMode::Normalized).unwrap();
        for c in 0..d {
            let lo = (0..m).map(|g| feats[(g, c)]).fold(f64::INFINITY, f64::min);
            let hi = (0..m).map(|g| feats[(g, c)]).fold(f64::NEG_INFINITY, f64::max);
            let tol = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
            for j in 0..n {
                let v = out[(j, c)];
                if v < lo - tol || v > hi + tol {
                    hull_violations += 1;
                }
            }
        }
    }
    let el = t.elapsed();
    let pass = e_sum <= 1e-12 && hull_violations == 0 && el.as_secs_f64() < 5.0;
    report(
        3,
        "interpolation weights and convex hull",
        pass,
        el,
        &format!("weight-sum err {e_sum:.1e}, hull violations {hull_violations}"),
    );
    assert!(pass);
}

#[test]
fn c04_hypernetwork_gradients() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let hn = HyperNetwork::new(
        &mut store,
        "toy",
        HyperSpec {
            input: 6,
            hidden: 6,
            output: 6,
            targets: 1,
            z_dim: 4,
            xi_hidden: 5,
            code_dim: 4,
            rank: 3,
            activation: Activation::Gelu,
        },
        &mut rng,
    );
    let groups = hn.param_groups();
    // The delta path starts at zero; move it off the origin so every group
    // has a non-trivial gradient.
    for (_, ids) in &groups {
        for &id in ids {
            let m = store.get(id).map(|v| v + 0.0);
            let noise = Mat::from_vec(m.rows(), m.cols(), (0..m.len()).map(|_| rng.random_range(-0.3..0.3)).collect());
            *store.get_mut(id) = m.zip_map(&noise, |a, b| a + b);
        }
    }
    let x = Mat::from_vec(5, 6, (0..30).map(|_| rng.random_range(-1.0..1.0)).collect());
    let c = Mat::from_vec(5, 6, (0..30).map(|_| rng.random_range(-1.0..1.0)).collect());
    let shapes = hn.shapes.clone();
    let loss_of = |b: &mut Binder| {
        let xv = b.graph.constant(x.clone());
        let e = b.graph.mean_rows(xv);
        let w = hn.generate(b, 0, e);
        let y = apply_generated_mlp(&mut b.graph, &w, &shapes, hn.activation, xv);
        let cv = b.graph.constant(c.clone());
        let p = b.graph.mul(y, cv);
        b.graph.sum(p)
    };
    let eval = |s: &ParamStore| {
        let mut b = Binder::inference(s);
        let l = loss_of(&mut b);
        b.graph.value(l).scalar_value()
    };
    let analytic = {
        let train = [ParamGroup::Projection];
        let mut b = Binder::new(&store, &train);
        let l = loss_of(&mut b);
        let mut g = b.graph.backward(l);
        b.param_grads(&mut g)
    };
    let h = 1e-5;
    let mut worst = (String::new(), 0.0f64);
    let mut lines = Vec::new();
    for (name, ids) in &groups {
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &id in ids {
            let a = analytic
                .iter()
                .find(|(pid, _)| *pid == id)
                .map(|(_, g)| g.clone())
                .unwrap_or_else(|| Mat::zeros(store.get(id).rows(), store.get(id).cols()));
            for k in 0..a.len() {
                let orig = store.get(id).as_slice()[k];
                store.get_mut(id).as_mut_slice()[k] = orig + h;
                let up = eval(&store);
                store.get_mut(id).as_mut_slice()[k] = orig - h;
                let down = eval(&store);
                store.get_mut(id).as_mut_slice()[k] = orig;
                let num = (up - down) / (2.0 * h);
                let an = a.as_slice()[k];
                diff += (an - num).powi(2);
                na += an * an;
                nn += num * num;
            }
        }
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-300);
        lines.push(format!("{name} {rel:.1e}"));
        if rel > worst.1 {
            worst = (name.to_string(), rel);
        }
        assert!(na > 0.0, "group {name} has a zero gradient");
    }
    let el = t.elapsed();
    let pass = worst.1 <= 1e-4 && el.as_secs_f64() < 10.0;
    report(4, "hypernetwork gradient check", pass, el, &format!("rel err: {}", lines.join(", ")));
    assert!(pass);
}

// ------------------------------------------------ benchmark runs (5, 6, 7, 9, 10)

struct Bench {
    /// Per seed: baseline, +AIF and full RADAR at 70% pc-missing.
    at70: Vec<Vec<VariantRun>>,
    /// Per seed: full RADAR at 30% and 50%.
    lower: Vec<Vec<VariantRun>>,
    cfg: ExperimentConfig,
    elapsed: Duration,
}

const AIF: Flags = Flags {
    fe_extras: false,
    aif: true,
    rphd: false,
};

fn pc_missing(rate: f64) -> MissingSpec {
    MissingSpec {
        mode: MissingMode::PcMissing,
        rate,
        seed: 7,
    }
}

fn bench() -> &'static Bench {
    static B: OnceLock<Bench> = OnceLock::new();
    B.get_or_init(|| {
        let t = Instant::now();
        let cfg = ExperimentConfig::default();
        let mut at70 = Vec::new();
        let mut lower = Vec::new();
        for k in 0..3 {
            let mut c = cfg.with_seed_offset(k);
            c.missing = vec![pc_missing(0.7)];
            c.missing[0].seed += k;
            at70.push(run_variants(&c, &[Flags::BASELINE, AIF, Flags::FULL], k == 0).unwrap());
            c.missing = vec![pc_missing(0.3), pc_missing(0.5)];
            c.missing.iter_mut().for_each(|m| m.seed += k);
            lower.push(run_variants(&c, &[Flags::FULL], false).unwrap());
        }
        Bench {
            at70,
            lower,
            cfg,
            elapsed: t.elapsed(),
        }
    })
}

/// Mean P-AUROC over the categories of one run.
fn mean_p_auroc(run: &VariantRun) -> f64 {
    let rows: Vec<f64> = run.rows.iter().filter(|r| r.category != MEAN_ROW).map(|r| r.scores.p_auroc).collect();
    rows.iter().sum::<f64>() / rows.len() as f64
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

fn p_by_variant(b: &Bench, flags: Flags) -> Vec<f64> {
    b.at70
        .iter()
        .map(|runs| mean_p_auroc(runs.iter().find(|r| r.flags == flags).unwrap()))
        .collect()
}

#[test]
fn c05_directional_ablation() {
    let b = bench();
    let base = mean(&p_by_variant(b, Flags::BASELINE));
    let aif = mean(&p_by_variant(b, AIF));
    let full = mean(&p_by_variant(b, Flags::FULL));
    let pass = full >= base + 0.01 && aif >= base && b.elapsed.as_secs_f64() < 30.0 * 60.0;
    report(
        5,
        "directional ablation at 70% pc-missing",
        pass,
        b.elapsed,
        &format!("mean P-AUROC baseline {base:.4}, +AIF {aif:.4}, full {full:.4} (shared runs)"),
    );
    assert!(pass);
}

#[test]
fn c06_missing_rate_degradation() {
    let b = bench();
    let full70 = p_by_variant(b, Flags::FULL);
    let at = |rate: f64| -> Vec<f64> {
        b.lower
            .iter()
            .map(|runs| mean_p_auroc(runs.iter().find(|r| r.spec.rate == rate).unwrap()))
            .collect()
    };
    let (p30, p50) = (at(0.3), at(0.5));
    let pooled = ((sample_var(&p30) + sample_var(&p50) + sample_var(&full70)) / 3.0).sqrt();
    let (m30, m50, m70) = (mean(&p30), mean(&p50), mean(&full70));
    let pass = m30 + pooled >= m50 && m50 + pooled >= m70;
    report(
        6,
        "P-AUROC nonincreasing in missing rate",
        pass,
        b.elapsed,
        &format!("full model 0.3 {m30:.4}, 0.5 {m50:.4}, 0.7 {m70:.4}, pooled std {pooled:.4}"),
    );
    assert!(pass);
}

#[test]
fn c07_parameter_efficiency() {
    let t = Instant::now();
    let b = bench();
    let run = b.at70[0].iter().find(|r| r.flags == Flags::FULL).unwrap();
    let pipeline = run.pipeline.as_ref().unwrap();
    let store = &pipeline.radar.store;
    let trainable = store.ids().filter(|&id| store.group(id).is_trainable()).map(|id| store.get(id).len()).sum::<usize>();
    let total = store.ids().map(|id| store.get(id).len()).sum::<usize>();
    let manifest = RunManifest::new(&b.cfg, vec![b.cfg.seeds], 0.0, run.counts);
    let dir = tempfile::tempdir().unwrap();
    let ck = miiad_core::checkpoint::save(dir.path(), &b.cfg, &pipeline.radar, None, None, None).unwrap();
    let ratio = trainable as f64 / total as f64;
    let pass = ratio < 0.10
        && manifest.parameters.trainable == trainable
        && manifest.parameters.total == total
        && manifest.parameters.ratio == ratio
        && ck.counts == manifest.parameters
        && ParamCounts::of(store) == run.counts;
    report(
        7,
        "trainable parameter ratio",
        pass,
        t.elapsed(),
        &format!("{trainable} / {total} = {ratio:.5}"),
    );
    assert!(pass);
}

fn full_dataset(n: usize) -> MiiadDataset {
    let train: Vec<_> = (0..n as u64)
        .map(|i| {
            let mut s = synth_normal(["dome", "disk", "slab"][i as usize % 3], 8, i).unwrap();
            s.id = i;
            s
        })
        .collect();
    MiiadDataset {
        train,
        test: Vec::new(),
        categories: vec!["dome".into(), "disk".into(), "slab".into()],
    }
}

#[test]
fn c08_missing_protocol() {
    let t = Instant::now();
    let mut ok = true;
    let mut checked = 0;
    let big = full_dataset(2656);
    for n in [10usize, 100, 2656] {
        let mut ds = big.clone();
        ds.train.truncate(n);
        for rate in [0.0, 0.3, 0.5, 0.7, 1.0] {
            let affected = (rate * n as f64).round() as usize;
            for mode in [MissingMode::PcMissing, MissingMode::RgbMissing, MissingMode::BothMissing] {
                let spec = MissingSpec { mode, rate, seed: 11 };
                let out = apply_missing(&ds, &spec).unwrap();
                let again = apply_missing(&ds, &spec).unwrap();
                ok &= out == again;
                let rgb_only = out.train.iter().filter(|s| s.mask.has_rgb && !s.mask.has_pc).count();
                let pc_only = out.train.iter().filter(|s| s.mask.has_pc && !s.mask.has_rgb).count();
                let complete = out.train.iter().filter(|s| s.mask.is_complete()).count();
                let (want_rgb, want_pc) = match mode {
                    MissingMode::PcMissing => (affected, 0),
                    MissingMode::RgbMissing => (0, affected),
                    MissingMode::BothMissing => (affected - affected / 2, affected / 2),
                };
                ok &= rgb_only == want_rgb && pc_only == want_pc && complete == n - affected;
                let c = missing_counts(n, mode, rate);
                ok &= (c.rgb_only, c.pc_only, c.complete) == (want_rgb, want_pc, n - affected);
                ok &= out.train.iter().all(|s| s.mask.has_pc == s.pc.is_some() && s.mask.has_rgb == s.rgb.is_some());
                checked += 1;
            }
        }
    }
    let ds = apply_missing(&big, &MissingSpec { mode: MissingMode::BothMissing, rate: 0.5, seed: 3 }).unwrap();
    for s in ds.train.iter().take(64) {
        let f = fill_pseudo(s);
        let rgb = f.rgb.as_ref().unwrap();
        let pc = f.pc.as_ref().unwrap();
        ok &= (rgb.height, rgb.width, pc.height, pc.width) == (s.height(), s.width(), s.height(), s.width());
        ok &= rgb.pixels.len() == 3 * s.height() * s.width() && pc.coords.len() == 3 * s.height() * s.width();
        if !s.mask.has_rgb {
            ok &= rgb.pixels.iter().all(|v| *v == 1.0);
        }
        if !s.mask.has_pc {
            ok &= pc.coords.iter().all(|v| *v == 1.0) && pc.validity.iter().all(|v| *v);
        }
        ok &= f.mask == s.mask;
    }
    let el = t.elapsed();
    let pass = ok && el.as_secs_f64() < 5.0;
    report(8, "missing-modality protocol counts", pass, el, &format!("{checked} (n, rate, mode) settings"));
    assert!(pass);
}

/// Patch indices within one patch of any ground-truth pixel.
fn dilated_patches(mask: &[bool], size: usize, grid: usize) -> Vec<bool> {
    let patch = size / grid;
    let mut hit = vec![false; grid * grid];
    for (p, &m) in mask.iter().enumerate() {
        if m {
            hit[(p / size / patch) * grid + (p % size) / patch] = true;
        }
    }
    let mut out = hit.clone();
    for r in 0..grid as i64 {
        for c in 0..grid as i64 {
            if hit[(r * grid as i64 + c) as usize] {
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (nr, nc) = (r + dr, c + dc);
                        if nr >= 0 && nc >= 0 && nr < grid as i64 && nc < grid as i64 {
                            out[(nr * grid as i64 + nc) as usize] = true;
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn c09_end_to_end_fixtures() {
    let b = bench();
    let t = Instant::now();
    let pipeline = b.at70[0]
        .iter()
        .find(|r| r.flags == Flags::FULL)
        .and_then(|r| r.pipeline.as_ref())
        .unwrap();
    let grid = pipeline.radar.cfg.grid();
    let size = b.cfg.data.size;
    let (mut higher, mut located) = (0, 0);
    for i in 0..20u64 {
        let cat = ["dome", "disk", "slab"][i as usize % 3];
        let base = synth_normal(cat, size, 50_000 + i).unwrap();
        let kind = AnomalyKind::ALL[i as usize % AnomalyKind::ALL.len()];
        let anom = synth_anomaly(&base, kind, 60_000 + i).unwrap();
        let rb = pipeline.detect(&base).unwrap();
        let ra = pipeline.detect(&anom).unwrap();
        if ra.sco_a > rb.sco_a {
            higher += 1;
        }
        if dilated_patches(&anom.gt.anomaly_mask, size, grid)[ra.argmax_patch()] {
            located += 1;
        }
    }
    let el = t.elapsed();
    let pass = higher >= 16 && located >= 14 && el.as_secs_f64() < 300.0;
    report(
        9,
        "end-to-end fixture pairs",
        pass,
        el,
        &format!("sco_a higher {higher}/20, argmax in dilated mask {located}/20"),
    );
    assert!(pass);
}

#[test]
fn c10_infonce_training_signal() {
    let b = bench();
    let reports: Vec<_> = b
        .at70
        .iter()
        .map(|runs| runs.iter().find(|r| r.flags == AIF).unwrap().stage1.clone().unwrap())
        .collect();
    let r = &reports[0];
    let epochs = r.epoch_losses.len();
    let all_live = reports.iter().all(|r| r.instruction_grad_norms.iter().all(|g| *g > 0.0 && g.is_finite()));
    let decreasing = reports.iter().all(|r| r.final_loss < r.initial_loss);
    let pass = epochs == 5 && decreasing && all_live;
    report(
        10,
        "InfoNCE training signal",
        pass,
        b.elapsed,
        &format!(
            "seed 0 L_con {:.4} -> {:.4} over {epochs} epochs, min instruction grad norm {:.2e} over {} batches",
            r.initial_loss,
            r.final_loss,
            r.instruction_grad_norms.iter().cloned().fold(f64::INFINITY, f64::min),
            r.instruction_grad_norms.len()
        ),
    );
    assert!(pass);
}
