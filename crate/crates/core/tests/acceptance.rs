//! Acceptance battery: one PASS/FAIL line per criterion.
//!
//! Every oracle here is written out independently of the library code it
//! checks. Criteria listed in `KNOWN_GAPS` still print FAIL when they fail
//! but do not fail the process; every other failure does.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array4, Axis, Ix2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use glyphsim::analysis::{
    bonferroni, cohens_d, loo_reports, model_matrix_table, paired_model_t, stat_tests, stats_table, welch_t,
    AnalysisConfig, EffectLabel, SimilarityGrid, CONSENSUS, STATS_HEADER,
};
use glyphsim::corpus::{split, GlyphImage, SplitLabel};
use glyphsim::ensemble::{consensus_of, embed_all, EmbeddingSet, Ensemble, Member};
use glyphsim::explain::{grad_cam, top_decile_mass_on, Pathway};
use glyphsim::model::{BasicBlock, EncoderConfig, Head, HybridEncoder};
use glyphsim::nn::{Ctx, Grads, Init, WindowAttention, WindowLayout};
use glyphsim::rng;
use glyphsim::structure::{cluster_centroids, hierarchical_cluster, pca_project, script_centroids, Linkage};
use glyphsim::synthetic::{default_fixture, ink_mask, synthetic_corpora};
use glyphsim::trainer::{contrastive_loss, halves_pairing, lr_at, write_summary, LossConfig, TrainConfig};

/// Criteria that are known not to be met at CPU scale; see README.
const KNOWN_GAPS: &[usize] = &[];

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut r = rng::seeded(seed);
    let n = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_fn((rows, cols), |_| n.sample(&mut r))
}

// ---------------------------------------------------------------- AC1-AC3

/// Term-by-term evaluation of the contrastive objective from its definition.
fn loss_oracle(z: &Array2<f64>, tau: f64, lambda: f64, eps: f64, unif_w: f64) -> f64 {
    let m = z.nrows();
    let n = m / 2;
    let partner = |i: usize| if i < n { i + n } else { i - n };
    let unit: Vec<Vec<f64>> = z
        .outer_iter()
        .map(|r| {
            let len = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / len).collect()
        })
        .collect();
    let sim = |a: usize, b: usize| -> f64 { unit[a].iter().zip(&unit[b]).map(|(x, y)| x * y).sum() };
    let mut nt = 0.0;
    for i in 0..m {
        let denom: f64 = (0..m).filter(|&k| k != i).map(|k| (sim(i, k) / tau).exp()).sum();
        nt -= ((sim(i, partner(i)) / tau).exp() / denom).ln();
    }
    nt /= m as f64;
    let d = z.ncols();
    let mut mean = vec![0.0; d];
    for r in z.outer_iter() {
        for c in 0..d {
            mean[c] += r[c] / m as f64;
        }
    }
    let var: f64 = z.outer_iter().map(|r| (0..d).map(|c| (r[c] - mean[c]).powi(2)).sum::<f64>()).sum::<f64>() / m as f64;
    let mut acc = 0.0;
    let mut pairs = 0.0;
    for i in 0..m {
        for j in i + 1..m {
            let sq: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| (a - b).powi(2)).sum();
            acc += (-2.0 * sq).exp();
            pairs += 1.0;
        }
    }
    nt + lambda / (var + eps) + unif_w * (acc / pairs).ln()
}

fn ac1() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in [2, 3, 4, 8] {
        for tau in [0.1, 1.0] {
            for lambda in [0.0, 1.0] {
                let cfg = LossConfig { temperature: tau, var_reg: lambda, ..LossConfig::default() };
                for seed in 0..3 {
                    let z = random_matrix(2 * n, 12, 100 * n as u64 + seed);
                    let got = contrastive_loss(&z, &halves_pairing(2 * n), &cfg).map_err(|e| e.to_string())?.total;
                    let want = loss_oracle(&z, tau, lambda, cfg.var_eps, cfg.uniformity_weight);
                    worst = worst.max((got - want).abs());
                    cases += 1;
                }
            }
        }
    }
    let took = t0.elapsed();
    ensure!(worst <= 1e-6, "max |loss - oracle| = {worst:e}");
    ensure!(took < Duration::from_secs(60), "took {took:?}");
    Ok(format!("{cases} batches, max abs error {worst:.1e}, {took:.2?}"))
}

fn ac2() -> Outcome {
    let z = Array2::from_elem((4, 6), 0.3);
    let mut lines = Vec::new();
    for lambda in [1.0, 0.5] {
        let cfg = LossConfig { var_reg: lambda, ..LossConfig::default() };
        let out = contrastive_loss(&z, &halves_pairing(4), &cfg).map_err(|e| e.to_string())?;
        ensure!((out.nt_xent - 3f64.ln()).abs() <= 1e-9, "NT-Xent {} != ln 3", out.nt_xent);
        ensure!(out.uniformity == 0.0, "uniformity {} != 0", out.uniformity);
        let want = lambda / cfg.var_eps;
        ensure!((out.variance - want).abs() <= 1e-9 * want, "variance term {} != {want}", out.variance);
        lines.push(format!("lambda {lambda}: var term {}", out.variance));
    }
    Ok(format!("NT-Xent = ln 3, uniformity = 0, {}", lines.join(", ")))
}

/// Relative error between an analytic and a central-difference gradient,
/// measured on the whole vector.
fn fd_rel_error(x: &Array2<f64>, analytic: &Array2<f64>, f: &mut dyn FnMut(&Array2<f64>) -> f64) -> f64 {
    let h = 1e-5;
    let mut num = Array2::zeros(x.raw_dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let mut p = x.clone();
        p[[r, c]] += h;
        let mut m = x.clone();
        m[[r, c]] -= h;
        num[[r, c]] = (f(&p) - f(&m)) / (2.0 * h);
    }
    let diff = (&num - analytic).mapv(|v| v * v).sum().sqrt();
    let scale = num.mapv(|v| v * v).sum().sqrt().max(analytic.mapv(|v| v * v).sum().sqrt()).max(1e-12);
    diff / scale
}

fn ac3() -> Outcome {
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    for lambda in [0.0, 1.0] {
        for tau in [0.1, 0.5] {
            let cfg = LossConfig { temperature: tau, var_reg: lambda, ..LossConfig::default() };
            let z = random_matrix(4, 8, 9);
            let pair = halves_pairing(4);
            let g = contrastive_loss(&z, &pair, &cfg).map_err(|e| e.to_string())?.grad;
            let e = fd_rel_error(&z, &g, &mut |z| contrastive_loss(z, &pair, &cfg).unwrap().total);
            worst = worst.max(e);
        }
    }
    let loss_err = worst;

    // Projection head on 8-d toy inputs, train mode (batch statistics and
    // a fixed dropout mask).
    let mut init = Init::new(5);
    let mut head = Head::new(&mut init, 8, 8, 8, 0.01, 0.1);
    let ctx = Ctx::train(3);
    let x = random_matrix(5, 8, 11);
    let r = random_matrix(5, 8, 12);
    let objective = |h: &Head, x: &Array2<f64>| (h.forward(x.clone(), &ctx).0 * &r).sum();
    let (_, cache) = head.forward(x.clone(), &ctx);
    let mut grads = Grads::new(init.issued());
    let dx = head.backward(cache.as_ref().unwrap(), r.clone(), &mut grads);
    worst = worst.max(fd_rel_error(&x, &dx, &mut |x| objective(&head, x)));
    let weights = [head.fc1.weight.clone(), head.fc2.weight.clone()];
    for (k, p) in weights.iter().enumerate() {
        let w0 = p.value.clone().into_dimensionality::<Ix2>().unwrap();
        let g = grads.get(p.id).expect("weight gradient").clone().into_dimensionality::<Ix2>().unwrap();
        let e = fd_rel_error(&w0, &g, &mut |w| {
            let slot = if k == 0 { &mut head.fc1.weight } else { &mut head.fc2.weight };
            slot.value = w.clone().into_dyn();
            let v = objective(&head, &x);
            let slot = if k == 0 { &mut head.fc1.weight } else { &mut head.fc2.weight };
            slot.value = w0.clone().into_dyn();
            v
        });
        worst = worst.max(e);
    }
    let took = t0.elapsed();
    ensure!(worst <= 1e-3, "relative error {worst:e}");
    ensure!(took < Duration::from_secs(60), "took {took:?}");
    Ok(format!("loss {loss_err:.1e}, head (input, W1, W2) max {worst:.1e}, {took:.2?}"))
}

// ---------------------------------------------------------------- AC4

fn ac4() -> Outcome {
    let (total, lr_max, lr_min, warm) = (10_000, 3e-5, 1e-7, 0.1);
    let warm_end = 1_000;
    let mid = warm_end + (total - warm_end) / 2;
    ensure!(lr_at(warm_end, total, lr_max, lr_min, warm) == lr_max, "warm-up end {}", lr_at(warm_end, total, lr_max, lr_min, warm));
    ensure!(lr_at(total, total, lr_max, lr_min, warm) == lr_min, "end {}", lr_at(total, total, lr_max, lr_min, warm));
    ensure!(lr_at(mid, total, lr_max, lr_min, warm) == (lr_max + lr_min) / 2.0, "midpoint {}", lr_at(mid, total, lr_max, lr_min, warm));
    for s in 1..=total {
        let (a, b) = (lr_at(s - 1, total, lr_max, lr_min, warm), lr_at(s, total, lr_max, lr_min, warm));
        if s <= warm_end {
            ensure!(b >= a, "warm-up not increasing at step {s}");
        } else {
            ensure!(b <= a, "decay not decreasing at step {s}");
        }
    }
    Ok(format!("anchors exact; monotone over {total} steps"))
}

// ---------------------------------------------------------------- AC5

fn ac5() -> Outcome {
    let cfg = EncoderConfig::paper();
    ensure!(
        (cfg.cnn_out(), cfg.swin_out(), cfg.concat_dim(), cfg.embed_dim) == (512, 1024, 1536, 256),
        "config dims {:?}",
        (cfg.cnn_out(), cfg.swin_out(), cfg.concat_dim(), cfg.embed_dim)
    );
    let t0 = Instant::now();
    let enc = HybridEncoder::new(cfg, 0).map_err(|e| e.to_string())?;
    let x = Array4::from_shape_fn((1, 3, 224, 224), |(_, c, y, xx)| ((y * 7 + xx * 3 + c) % 17) as f64 / 17.0 - 0.5);
    let (f, _) = enc.forward(x, &Ctx::eval()).map_err(|e| e.to_string())?;
    let dims = (f.cnn.ncols(), f.swin.ncols(), f.cnn.ncols() + f.swin.ncols(), f.fused.ncols());
    ensure!(dims == (512, 1024, 1536, 256), "forward dims {dims:?}");
    ensure!(f.fused.iter().all(|v| v.is_finite()), "non-finite embedding");
    let forward_time = t0.elapsed();

    let mut init = Init::new(1);
    let att = WindowAttention::new(&mut init, "attn", 16, 4, 7);
    let mut worst = 0.0f64;
    for shift in [0, 3] {
        let layout = WindowLayout::new(1, 14, 14, 7, shift);
        let x = random_matrix(196, 16, 2 + shift as u64) * 4.0;
        let (_, cache) = att.forward(&x, &layout, &Ctx::eval_recording());
        let cache = cache.ok_or("no attention cache")?;
        for w in 0..layout.windows_per_image() {
            for h in 0..4 {
                for row in cache.attention(w, h, 4).rows() {
                    worst = worst.max((row.sum() - 1.0).abs());
                }
            }
        }
    }
    ensure!(worst <= 1e-6, "attention row sum off by {worst:e}");

    let mut init = Init::new(2);
    let mut block = BasicBlock::new(&mut init, "block", 8, 8, 1);
    block.conv2.weight.value.fill(0.0);
    let x = Array4::from_shape_fn((2, 8, 9, 9), |(n, c, y, xx)| ((n + 3 * c + 5 * y + 7 * xx) % 11) as f64 / 11.0);
    for ctx in [Ctx::eval(), Ctx::train(0)] {
        let (y, _) = block.forward(x.clone(), &ctx);
        ensure!(y == x, "zeroed residual branch changed its input");
    }
    Ok(format!("paper preset 512/1024/1536/256 (forward {forward_time:.1?}); attention rows within {worst:.0e}; zero block is identity"))
}

// ---------------------------------------------------------------- AC6

fn ln_gamma(x: f64) -> f64 {
    // Lanczos, g = 7, n = 9.
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Two-sided p-value of Student's t by Simpson integration of the density.
fn t_two_sided(t: f64, df: f64) -> f64 {
    let c = (ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0)).exp() / (df * std::f64::consts::PI).sqrt();
    let f = |x: f64| c * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    let b = t.abs();
    let n = 200_000;
    let h = b / n as f64;
    let mut s = f(0.0) + f(b);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    (1.0 - 2.0 * s * h / 3.0).max(0.0)
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0))
}

fn ac6() -> Outcome {
    let a = [0.61, 0.61, 0.63, 0.65, 0.68, 0.59, 0.66];
    let b = [0.06, 0.07, 0.07, 0.07, 0.23, 0.09];
    let (m1, v1) = mean_var(&a);
    let (m2, v2) = mean_var(&b);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let se2 = v1 / n1 + v2 / n2;
    let t = (m1 - m2) / se2.sqrt();
    let df = se2 * se2 / ((v1 / n1).powi(2) / (n1 - 1.0) + (v2 / n2).powi(2) / (n2 - 1.0));
    let w = welch_t(&a, &b).map_err(|e| e.to_string())?;
    ensure!((w.t - t).abs() <= 1e-9 && (w.df - df).abs() <= 1e-9, "welch t {} df {} vs {t} {df}", w.t, w.df);
    ensure!((w.p - t_two_sided(t, df)).abs() <= 1e-9, "welch p {} vs {}", w.p, t_two_sided(t, df));
    let (x, y) = ([0.2, 0.5, 0.1, 0.4, 0.3], [0.25, 0.35, 0.3, 0.5, 0.4]);
    let w = welch_t(&x, &y).map_err(|e| e.to_string())?;
    let (mx, vx) = mean_var(&x);
    let (my, vy) = mean_var(&y);
    let t2 = (mx - my) / (vx / 5.0 + vy / 5.0).sqrt();
    let df2 = (vx / 5.0 + vy / 5.0).powi(2) / ((vx / 5.0).powi(2) / 4.0 + (vy / 5.0).powi(2) / 4.0);
    ensure!((w.t - t2).abs() <= 1e-9 && (w.p - t_two_sided(t2, df2)).abs() <= 1e-9, "second Welch fixture");

    // Paired test on the per-model means of one comparison script.
    let pa = [0.61, 0.61, 0.63, 0.65, 0.68];
    let pb = [0.06, 0.07, 0.07, 0.07, 0.23];
    let diffs: Vec<f64> = pa.iter().zip(&pb).map(|(p, q)| p - q).collect();
    let (md, vd) = mean_var(&diffs);
    let tp = md / (vd / 5.0).sqrt();
    let p = paired_model_t(&pa, &pb).map_err(|e| e.to_string())?;
    ensure!((p.mean_diff - 0.536).abs() <= 1e-12, "mean difference {}", p.mean_diff);
    ensure!((p.test.t - tp).abs() <= 1e-9 && p.test.df == 4.0, "paired t {} vs {tp}", p.test.t);
    ensure!((p.test.p - t_two_sided(tp, 4.0)).abs() <= 1e-9, "paired p {} vs {}", p.test.p, t_two_sided(tp, 4.0));

    let pooled = (((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / (n1 + n2 - 2.0)).sqrt();
    let d = cohens_d(&a, &b).map_err(|e| e.to_string())?;
    ensure!((d.d - (m1 - m2) / pooled).abs() <= 1e-9, "cohen's d {} vs {}", d.d, (m1 - m2) / pooled);
    let swapped = cohens_d(&b, &a).map_err(|e| e.to_string())?;
    ensure!(swapped.d == -d.d && swapped.label == d.label, "d is not antisymmetric");
    for (k, want) in [(1, 0.05), (3, 0.05 / 3.0), (15, 0.05 / 15.0)] {
        ensure!((bonferroni(0.05, k) - want).abs() <= 1e-15, "bonferroni({k})");
    }
    let labels: Vec<EffectLabel> = [0.01, 0.46, 0.74, 1.17].iter().map(|&d| EffectLabel::of(d)).collect();
    let want = [EffectLabel::Negligible, EffectLabel::Small, EffectLabel::Medium, EffectLabel::Large];
    ensure!(labels == want, "labels {labels:?}");
    ensure!(EffectLabel::of(-1.17) == EffectLabel::Large, "label depends on sign");
    Ok(format!("welch, paired (mean diff 0.536, t {tp:.4}), d, bonferroni and labels match"))
}

// ---------------------------------------------------------------- AC7

type RefMerge = (Vec<usize>, Vec<usize>, f64);

/// Naive agglomeration that recomputes every cluster distance from the points.
fn reference_agglomerate(points: &[Vec<f64>], linkage: Linkage) -> Vec<RefMerge> {
    let dist = |a: usize, b: usize| -> f64 { points[a].iter().zip(&points[b]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() };
    let centre = |c: &[usize]| -> Vec<f64> {
        let d = points[0].len();
        (0..d).map(|k| c.iter().map(|&i| points[i][k]).sum::<f64>() / c.len() as f64).collect()
    };
    let between = |a: &[usize], b: &[usize]| -> f64 {
        let pairs = a.iter().flat_map(|&i| b.iter().map(move |&j| (i, j)));
        match linkage {
            Linkage::Single => pairs.map(|(i, j)| dist(i, j)).fold(f64::INFINITY, f64::min),
            Linkage::Complete => pairs.map(|(i, j)| dist(i, j)).fold(0.0, f64::max),
            Linkage::Average => pairs.map(|(i, j)| dist(i, j)).sum::<f64>() / (a.len() * b.len()) as f64,
            Linkage::Ward => {
                let (ca, cb) = (centre(a), centre(b));
                let sq: f64 = ca.iter().zip(&cb).map(|(x, y)| (x - y).powi(2)).sum();
                let (na, nb) = (a.len() as f64, b.len() as f64);
                (2.0 * na * nb / (na + nb) * sq).sqrt()
            }
        }
    };
    let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
    let mut out = Vec::new();
    while clusters.len() > 1 {
        let mut best = (0, 1, f64::INFINITY);
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let d = between(&clusters[i], &clusters[j]);
                if d < best.2 {
                    best = (i, j, d);
                }
            }
        }
        let (i, j, h) = best;
        let b = clusters.remove(j);
        let a = clusters.remove(i);
        let (mut sa, mut sb) = (a.clone(), b.clone());
        sa.sort_unstable();
        sb.sort_unstable();
        out.push((sa, sb, h));
        let mut joined = a;
        joined.extend(b);
        clusters.push(joined);
    }
    out
}

fn ac7() -> Outcome {
    let mut r = rng::seeded(77);
    let mut worst_h = 0.0f64;
    for inst in 0..20 {
        let points: Vec<Vec<f64>> = (0..10).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
        let dist = Array2::from_shape_fn((10, 10), |(i, j)| {
            points[i].iter().zip(&points[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        });
        let labels: Vec<String> = (0..10).map(|i| format!("p{i:02}")).collect();
        for l in Linkage::ALL {
            let d = hierarchical_cluster(&dist, &labels, l).map_err(|e| e.to_string())?;
            let want = reference_agglomerate(&points, l);
            for (k, (m, (ra, rb, rh))) in d.merges.iter().zip(&want).enumerate() {
                let mut la = d.leaves_under(m.a);
                let mut lb = d.leaves_under(m.b);
                la.sort_unstable();
                lb.sort_unstable();
                let same = (&la == ra && &lb == rb) || (&la == rb && &lb == ra);
                ensure!(same, "instance {inst} {l}: merge {k} joins {la:?}+{lb:?}, reference {ra:?}+{rb:?}");
                ensure!(m.size == ra.len() + rb.len(), "instance {inst} {l}: merge {k} size");
                worst_h = worst_h.max((m.height - rh).abs() / rh.max(1e-12));
            }
        }
    }
    ensure!(worst_h <= 1e-9, "merge heights differ by {worst_h:e} (relative)");
    Ok(format!("20 instances x 4 linkages: identical merge sequences, heights within {worst_h:.0e}"))
}

// ---------------------------------------------------------------- AC8

/// Cyclic Jacobi eigenvalue iteration for a small symmetric matrix.
fn jacobi_eigen(mut a: Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut v = Array2::<f64>::eye(n);
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| a[[i, j]].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[[p, q]].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[[q, q]] - a[[p, p]]) / (2.0 * a[[p, q]]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[[k, p]], a[[k, q]]);
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[[p, k]], a[[q, k]]);
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[[i, i]]).collect(), v)
}

fn ac8() -> Outcome {
    let line = Array2::from_shape_fn((12, 4), |(i, j)| 0.5 + (i as f64 - 3.0) * [1.0, -2.0, 0.5, 3.0][j]);
    let line_ratio = pca_project(&line, 2).map_err(|e| e.to_string())?.explained[0];
    ensure!((line_ratio - 1.0).abs() <= 1e-9, "line explained ratio {line_ratio}");

    let x = random_matrix(40, 6, 8) * &Array1::from(vec![3.0, 2.0, 1.5, 1.0, 0.5, 0.2]);
    let mean = x.mean_axis(Axis(0)).unwrap();
    let xc = &x - &mean;
    let cov = xc.t().dot(&xc) / 39.0;
    let (vals, vecs) = jacobi_eigen(cov);
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let total: f64 = vals.iter().sum();
    let p = pca_project(&x, 3).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (c, &k) in order.iter().take(3).enumerate() {
        worst = worst.max((p.explained[c] - vals[k] / total).abs());
        let proj = xc.dot(&vecs.column(k));
        let lib = p.coords.column(c);
        let same = (&proj - &lib).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        let flipped = (&proj + &lib).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        worst = worst.max(same.min(flipped));
    }
    ensure!(worst <= 1e-6, "PCA disagrees with the Jacobi reference by {worst:e}");
    Ok(format!("line ratio {line_ratio:.12}; Jacobi agreement {worst:.1e}"))
}

// ---------------------------------------------------------------- AC10

fn small_encoder_config() -> EncoderConfig {
    let mut c = EncoderConfig::tiny();
    c.input_size = 64;
    c.window = 2;
    c
}

fn ac10() -> Outcome {
    let corpora = synthetic_corpora(&default_fixture(4), 3, 64).map_err(|e| e.to_string())?;
    let glyphs: Vec<&GlyphImage> = corpora[0].glyphs.iter().collect();
    let members: Vec<Member> = (0..3)
        .map(|_| Member { seed: 9, path: None, encoder: HybridEncoder::new(small_encoder_config(), 9).unwrap() })
        .collect();
    let ens = Ensemble::new("A", members, 3).map_err(|e| e.to_string())?;
    let (sets, cons) = embed_all(&ens, &glyphs, "A", 4, false).map_err(|e| e.to_string())?;
    ensure!(cons.rows == sets[0].rows, "consensus of identical members differs from the member");

    // Members = signal + iid noise; the consensus should sit closer to the signal.
    let (n, dim, k) = (1000, 16, 5);
    let signal = random_matrix(n, dim, 40);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut r = rng::seeded(41);
    let ids: Vec<String> = (0..n).map(|i| format!("g{i:04}")).collect();
    let member_sets: Vec<EmbeddingSet> = (0..k)
        .map(|m| {
            let rows = &signal + &Array2::from_shape_fn((n, dim), |_| noise.sample(&mut r));
            EmbeddingSet::new("S", format!("model_{m}"), ids.clone(), rows).unwrap()
        })
        .collect();
    let cons = consensus_of(&member_sets).map_err(|e| e.to_string())?;
    let sq_err = |rows: &Array2<f64>| -> Vec<f64> { (rows - &signal).mapv(|v| v * v).sum_axis(Axis(1)).to_vec() };
    let ce = sq_err(&cons.rows);
    let mut worst_p = 0.0f64;
    for s in &member_sets {
        let me = sq_err(&s.rows);
        let test = paired_model_t(&me, &ce).map_err(|e| e.to_string())?;
        ensure!(test.mean_diff > 0.0, "{} is closer to the signal than the consensus", s.model_id);
        worst_p = worst_p.max(test.test.p);
    }
    ensure!(worst_p < 0.01, "variance reduction p = {worst_p}");
    Ok(format!("identical members reproduced bit for bit; variance reduction p <= {worst_p:.1e}"))
}

// ---------------------------------------------------------------- AC12

fn header_of(csv_text: &str) -> String {
    csv_text.lines().next().unwrap_or_default().to_string()
}

fn ac12() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("summary.csv");
    write_summary(&[], &path).map_err(|e| e.to_string())?;
    let got = header_of(&std::fs::read_to_string(&path).map_err(|e| e.to_string())?);
    let table_3_1 = "model_idx\tseed\tval_loss\tepoch\tmodel_path";
    ensure!(got == table_3_1.replace('\t', ","), "training summary header `{got}`");

    let targets = ["Indus", "Proto-Cuneiform", "Proto-Elamite"].map(String::from);
    let comparisons = ["TYC".to_string()];
    let models: Vec<String> = (0..2).map(|k| format!("model_{k}")).collect();
    let mut sets = BTreeMap::new();
    for (i, s) in targets.iter().chain(&comparisons).enumerate() {
        let ids = (0..4).map(|g| format!("{s}_{g}")).collect();
        sets.insert(s.clone(), EmbeddingSet::new(s.clone(), "m", ids, random_matrix(4, 5, i as u64)).unwrap());
    }
    let grid = SimilarityGrid::build(&comparisons, &targets, &models, |_, _, s| sets.get(s)).map_err(|e| e.to_string())?;
    let got = header_of(&model_matrix_table(&grid).to_csv());
    let table_4_3 = "Comparison Script\tModel\tIndus\tProto-Cuneiform\tProto-Elamite";
    ensure!(got == table_4_3.replace('\t', ","), "model matrix header `{got}`");

    let tests = stat_tests(&grid, &models, &AnalysisConfig::default()).map_err(|e| e.to_string())?;
    let csv = stats_table(&tests).to_csv();
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let got: Vec<String> = reader.headers().map_err(|e| e.to_string())?.iter().map(String::from).collect();
    let table_a_1 = "Comparison Script\tModel\tTest\tMean 1\tMean 2\tDifference\tT-statistic\tP-value\tCohen's d\tEffect Size\tSignificant\tBetter Match";
    let want: Vec<String> = table_a_1.split('\t').map(String::from).collect();
    ensure!(got == want && STATS_HEADER.len() == 12, "stats header {got:?}");
    Ok("training summary, model matrix and statistics headers match".into())
}

// ---------------------------------------------------------------- AC9, AC11

fn train_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 10,
        patience: 10,
        lr_max: 1e-3,
        batch_size: 4,
        seeds: vec![42, 43, 44],
        ..TrainConfig::default()
    }
}

struct SyntheticRun {
    ensemble: Ensemble,
    corpora: Vec<glyphsim::corpus::ScriptCorpus>,
    train: Vec<GlyphImage>,
    sets: BTreeMap<String, (Vec<EmbeddingSet>, EmbeddingSet)>,
    took: Duration,
}

fn synthetic_run() -> Result<SyntheticRun, String> {
    let t0 = Instant::now();
    let corpora = synthetic_corpora(&default_fixture(24), 7, 224).map_err(|e| e.to_string())?;
    let a = split(&corpora[0], (0.8, 0.2, 0.0), 1).map_err(|e| e.to_string())?;
    let (tr, va) = (a.subset(SplitLabel::Train), a.subset(SplitLabel::Val));
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ensemble, _) = glyphsim::trainer::train_ensemble("A", &tr, &va, &EncoderConfig::tiny(), &train_config(), dir.path())
        .map_err(|e| e.to_string())?;
    let mut sets = BTreeMap::new();
    for c in &corpora {
        let g: Vec<&GlyphImage> = c.glyphs.iter().collect();
        sets.insert(c.name.clone(), embed_all(&ensemble, &g, &c.name, 16, false).map_err(|e| e.to_string())?);
    }
    let train = tr.into_iter().cloned().collect();
    Ok(SyntheticRun { ensemble, corpora, train, sets, took: t0.elapsed() })
}

fn ac9(run: &SyntheticRun) -> Outcome {
    let models: Vec<String> = (0..run.ensemble.members.len()).map(|k| format!("model_{k}")).collect();
    let lookup = |_: &str, m: &str, s: &str| -> Option<&EmbeddingSet> {
        let (members, cons) = run.sets.get(s)?;
        if m == CONSENSUS { Some(cons) } else { members.iter().find(|e| e.model_id == m) }
    };
    let grid = SimilarityGrid::build(&["A".to_string()], &["B".to_string(), "C".to_string()], &models, lookup)
        .map_err(|e| e.to_string())?;
    let mut problems = Vec::new();
    let mut means = Vec::new();
    for m in models.iter().map(String::as_str).chain([CONSENSUS]) {
        let t = grid.target_means("A", m);
        means.push(format!("{m} {:.3}/{:.3}", t["B"], t["C"]));
        if t["B"] <= t["C"] {
            problems.push(format!("{m}: sim(A,B) {:.4} <= sim(A,C) {:.4}", t["B"], t["C"]));
        }
    }
    let cfg = AnalysisConfig::default();
    let cons = stat_tests(&grid, &[CONSENSUS.to_string()], &cfg).map_err(|e| e.to_string())?;
    let d = cons[0].cohens_d;
    if d < 0.8 {
        problems.push(format!("consensus Cohen's d {d:.3} < 0.8"));
    }
    let member_d: Vec<String> = stat_tests(&grid, &models, &cfg)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|s| format!("{:.2}", s.cohens_d))
        .collect();
    let loo = loo_reports(&grid).map_err(|e| e.to_string())?;
    if !loo.iter().all(|(_, r)| r.stable) {
        problems.push("leave-one-out ranking unstable".into());
    }
    let cons_sets: Vec<&EmbeddingSet> = run.sets.values().map(|(_, c)| c).collect();
    let cents = script_centroids(&cons_sets).map_err(|e| e.to_string())?;
    for l in Linkage::ALL {
        let dg = cluster_centroids(&cents, l).map_err(|e| e.to_string())?;
        if dg.joins_before("A", "B", "C") != Some(true) {
            problems.push(format!("{l} linkage does not join A with B before C"));
        }
    }
    let detail = format!(
        "means B/C [{}]; d consensus {d:.3}, members [{}]; training+embedding {:.0?}",
        means.join(", "),
        member_d.join(", "),
        run.took
    );
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", problems.join("; ")))
    }
}

/// Ink mask grown by `r` pixels (square neighbourhood).
fn dilate(mask: &Array2<bool>, r: usize) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (y.saturating_sub(r)..(y + r + 1).min(h)).any(|yy| (x.saturating_sub(r)..(x + r + 1).min(w)).any(|xx| mask[[yy, xx]]))
    })
}

/// Foreground = ink grown by half a cell of the explained CNN layer
/// (stride 32 at 224 px), the finest detail a map of that layer can place.
const FOREGROUND_GROW: usize = 16;

/// Mean top-decile CNN heat mass on the grown ink mask, 4 glyphs per family.
fn foreground_mass(enc: &HybridEncoder, run: &SyntheticRun) -> Result<(f64, usize, f64), String> {
    let mut masses = Vec::new();
    let mut cover = Vec::new();
    for c in &run.corpora {
        for g in c.glyphs.iter().take(4) {
            let mask = dilate(&ink_mask(&g.intensity()), FOREGROUND_GROW);
            cover.push(mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64);
            let map = grad_cam(enc, g, Pathway::Cnn).map_err(|e| e.to_string())?;
            if let Some(m) = top_decile_mass_on(&map.heat, &mask).map_err(|e| e.to_string())? {
                masses.push(m);
            }
        }
    }
    if masses.is_empty() {
        return Err("every CNN map was degenerate".into());
    }
    let mean = masses.iter().sum::<f64>() / masses.len() as f64;
    Ok((mean, masses.len(), cover.iter().sum::<f64>() / cover.len() as f64))
}

/// Explains member 0 after re-estimating its BatchNorm statistics on its
/// training glyphs; the raw member is reported alongside.
fn ac11(run: &SyntheticRun) -> Outcome {
    let raw = &run.ensemble.members[0].encoder;
    let mut enc = raw.clone();
    let train: Vec<&GlyphImage> = run.train.iter().collect();
    enc.recalibrate_bn(&train, 4, 0).map_err(|e| e.to_string())?;
    let (mean, n, fg) = foreground_mass(&enc, run)?;
    let (raw_mean, _, _) = foreground_mass(raw, run)?;
    let detail = format!(
        "mean top-decile mass on foreground {mean:.3} over {n} glyphs (foreground covers {:.1}% of the raster; {raw_mean:.3} before BN recalibration)",
        100.0 * fg
    );
    if mean >= 0.6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- driver

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
        )),
    }
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let quick: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "loss oracle", ac1),
        (2, "degenerate batch", ac2),
        (3, "gradient checks", ac3),
        (4, "learning-rate schedule", ac4),
        (5, "architecture shapes", ac5),
        (6, "statistics oracles", ac6),
        (7, "clustering oracle", ac7),
        (8, "PCA", ac8),
        (10, "ensemble consensus", ac10),
        (12, "report schemas", ac12),
    ];
    for (id, name, f) in quick {
        results.push((id, name, guarded(f)));
    }
    match guarded(|| synthetic_run().map(|r| {
        results.push((9, "synthetic end-to-end", guarded(|| ac9(&r))));
        results.push((11, "Grad-CAM foreground", guarded(|| ac11(&r))));
        String::new()
    })) {
        Ok(_) => {}
        Err(e) => {
            results.push((9, "synthetic end-to-end", Err(format!("training failed: {e}"))));
            results.push((11, "Grad-CAM foreground", Err(format!("training failed: {e}"))));
        }
    }
    results.sort_by_key(|r| r.0);
    let mut hard_failures = 0;
    for (id, name, r) in &results {
        match r {
            Ok(detail) => println!("PASS AC{id} {name}: {detail}"),
            Err(why) => {
                let note = if KNOWN_GAPS.contains(id) { " [known gap]" } else { "" };
                println!("FAIL AC{id} {name}: {why}{note}");
                if !KNOWN_GAPS.contains(id) {
                    hard_failures += 1;
                }
            }
        }
    }
    let passed = results.iter().filter(|r| r.2.is_ok()).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if hard_failures > 0 {
        std::process::exit(1);
    }
}
