//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs sequentially so that wall-time budgets are meaningful on a single
//! core. `ACCEPTANCE_ONLY=3,7` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use jointdiff_core::conditioning::ConditionToken;
use jointdiff_core::data::{generate_toy_dataset, read_archive, SliceRecord, ToyConfig};
use jointdiff_core::diffusion::{
    compute_target, cosine_schedule, forward_diffuse, lp_loss, lp_loss_with_grad, predict_eps, predict_x0, JointSample, LpConfig, NoiseSchedule,
    PredictionTarget,
};
use jointdiff_core::experiment::{self, choose_tokens, make_requests, ExperimentConfig, ReplicaRow, TokenMode};
use jointdiff_core::metrics::{self, FeatureExtractor, ToyFeatureExtractor};
use jointdiff_core::morpho::{connected_components, mask_features, Connectivity};
use jointdiff_core::nn::{Act, Params};
use jointdiff_core::sampler::{sample, Denoiser, SamplerConfig};
use jointdiff_core::stats::{self, Observation, StatsRow};
use jointdiff_core::trainer::TrainConfig;
use jointdiff_core::unet::{JointDenoiser, UNetConfig};
use jointdiff_core::Result as CoreResult;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T>(r: CoreResult<T>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn sched() -> NoiseSchedule {
    cosine_schedule(1000, 0.008).unwrap()
}

// ---------------------------------------------------------------- 1

fn schedule_correctness() -> Check {
    let s = sched();
    let ab = s.alpha_bars();
    ensure(ab.len() == 1001 && ab[0] == 1.0, format!("alpha_bar[0] = {}", ab[0]))?;
    ensure(ab.windows(2).all(|w| w[1] < w[0]), "alpha_bar is not strictly decreasing")?;
    // closed form f(t)/f(0), f(t) = cos²((t/T + s)/(1 + s)·π/2); no clipping is active at t = 500
    let f = |t: f64| (((t / 1000.0 + 0.008) / 1.008) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    let oracle = f(500.0) / f(0.0);
    ensure((ab[500] - oracle).abs() < 1e-12, format!("alpha_bar[500] = {} vs oracle {oracle}", ab[500]))?;
    ensure((ab[500] - 0.49386).abs() <= 1e-4, format!("alpha_bar[500] = {} not within 1e-4 of 0.49386", ab[500]))?;
    Ok(format!("alpha_bar[500] = {:.8}", ab[500]))
}

// ---------------------------------------------------------------- 2

fn parameterization_algebra() -> Check {
    let s = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_rt, mut worst_rec) = (0.0f64, 0.0f64);
    for i in 0..1000 {
        let n = 16;
        let t = rng.random_range(1..=1000);
        let x0 = JointSample::new(4, 4, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let xt = ok(forward_diffuse(&x0, t, &eps, &s))?;
        let x0p = x0.to_planar();
        let epsp: Vec<f64> = eps.iter().chain(&eps).copied().collect();
        let (sa, sn) = ok(s.coefficients(t))?;
        let target = PredictionTarget::ALL[i % 3];
        let y = ok(compute_target(&x0, &eps, t, &s, target))?;
        let xh = ok(predict_x0(&y, &xt, t, &s, target))?;
        let eh = ok(predict_eps(&y, &xt, t, &s, target))?;
        for k in 0..2 * n {
            worst_rt = worst_rt.max((xh[k] - x0p[k]).abs()).max((eh[k] - epsp[k]).abs());
            worst_rec = worst_rec.max((sa * xh[k] + sn * eh[k] - xt[k]).abs());
        }
    }
    ensure(worst_rt < 1e-6, format!("round-trip error {worst_rt:e}"))?;
    ensure(worst_rec < 1e-6, format!("reconstruction error {worst_rec:e}"))?;
    Ok(format!("max round-trip {worst_rt:.1e}, max reconstruction {worst_rec:.1e}"))
}

// ---------------------------------------------------------------- 3

fn lp_gradient() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for p in [1.5, 2.0, 2.5] {
        let cfg = LpConfig::new(p).unwrap();
        for _ in 0..50 {
            let n = 8;
            let target: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let pred: Vec<f64> = target
                .iter()
                .map(|t| t + rng.random_range(0.01..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
                .collect();
            let (_, g) = ok(lp_loss_with_grad(&pred, &target, cfg))?;
            for k in 0..n {
                let h = 1e-6;
                let mut a = pred.clone();
                let mut b = pred.clone();
                a[k] += h;
                b[k] -= h;
                let fd = (ok(lp_loss(&a, &target, cfg))? - ok(lp_loss(&b, &target, cfg))?) / (2.0 * h);
                worst = worst.max((fd - g[k]).abs() / g[k].abs());
            }
        }
    }
    ensure(worst < 1e-4, format!("relative error {worst:e}"))?;
    Ok(format!("max relative error {worst:.1e}"))
}

// ---------------------------------------------------------------- 4

fn forward_moments() -> Check {
    let s = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    let (a, b) = (0.4, -1.0);
    let mut detail = Vec::new();
    for t in [100, 500, 900] {
        let x0 = JointSample::new(100, 1000, vec![a; n], vec![b; n]).unwrap();
        let eps: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let xt = ok(forward_diffuse(&x0, t, &eps, &s))?;
        let (sa, sn) = ok(s.coefficients(t))?;
        for (ch, x0v) in [(0, a), (1, b)] {
            let v = &xt[ch * n..(ch + 1) * n];
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let (m0, v0) = (sa * x0v, sn * sn);
            let se_m = (v0 / n as f64).sqrt();
            let se_v = v0 * (2.0 / (n - 1) as f64).sqrt();
            ensure((mean - m0).abs() <= 3.0 * se_m, format!("t={t} ch={ch}: mean {mean} vs {m0} (se {se_m:e})"))?;
            ensure((var - v0).abs() <= 3.0 * se_v, format!("t={t} ch={ch}: var {var} vs {v0} (se {se_v:e})"))?;
            detail.push(format!("t{t}c{ch} z_m={:+.2} z_v={:+.2}", (mean - m0) / se_m, (var - v0) / se_v));
        }
        // the noise cancels from the channel difference
        let worst = (0..n).map(|i| ((xt[i] - xt[n + i]) - sa * (a - b)).abs()).fold(0.0, f64::max);
        ensure(worst < 1e-12, format!("t={t}: channel difference deviates by {worst:e}"))?;
        // equal clean channels stay bit-identical
        let same = JointSample::new(100, 1000, vec![0.25; n], vec![0.25; n]).unwrap();
        let xs = ok(forward_diffuse(&same, t, &eps, &s))?;
        ensure(xs[..n] == xs[n..], format!("t={t}: equal channels diverged"))?;
    }
    Ok(detail.join(", "))
}

// ---------------------------------------------------------------- 5

fn network_gradient() -> Check {
    let cfg = UNetConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (net, mut p) = ok(JointDenoiser::build::<f64, _>(&cfg, 1000, &mut rng))?;
    perturb(&mut p, &mut rng, 0.02);
    let x = Act::from_vec(2, 2, 32, 32, (0..2 * 2 * 1024).map(|_| rng.sample(StandardNormal)).collect());
    let up = Act::from_vec(2, 2, 32, 32, (0..2 * 2 * 1024).map(|_| rng.sample(StandardNormal)).collect());
    let ts = [37, 810];
    let toks = [ConditionToken::new(3, 1, 30).unwrap(), ConditionToken::new(22, 0, 30).unwrap()];
    let (_, tape) = ok(net.forward(&p, &x, &ts, &toks))?;
    let g = ok(net.backward(&p, &tape, &up))?;
    let mut dir = p.zeros_like();
    perturb(&mut dir, &mut rng, 1.0);
    let obj = |s: f64| -> std::result::Result<f64, String> {
        let mut q = p.clone();
        q.add_scaled(&dir, s);
        let (y, _) = ok(net.forward(&q, &x, &ts, &toks))?;
        Ok(y.data.iter().zip(&up.data).map(|(a, b)| a * b).sum())
    };
    let h = 1e-5;
    let fd = (obj(h)? - obj(-h)?) / (2.0 * h);
    let an = g.dot(&dir);
    let rel = (fd - an).abs() / an.abs();
    ensure(rel < 1e-3, format!("fd {fd} vs analytic {an}: relative error {rel:e}"))?;
    Ok(format!("{} parameters, relative error {rel:.1e}", p.scalar_count()))
}

fn perturb(p: &mut Params<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for v in p.values_mut() {
        for x in v.iter_mut() {
            *x += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

// ---------------------------------------------------------------- 6

/// Exact posterior-mean denoiser for pixels drawn i.i.d. from a 2-D
/// Gaussian over (image, mask).
struct GaussianPosterior {
    size: usize,
    mu: [f64; 2],
    cov: [[f64; 2]; 2],
    sched: NoiseSchedule,
    target: PredictionTarget,
}

impl Denoiser<f64> for GaussianPosterior {
    fn image_size(&self) -> usize {
        self.size
    }

    fn predict(&self, x_t: &Act<f64>, ts: &[usize], _tokens: &[ConditionToken]) -> CoreResult<Act<f64>> {
        let mut y = Act::zeros(2, x_t.b, x_t.h, x_t.w);
        let c = self.cov;
        for b in 0..x_t.b {
            let ab = self.sched.alpha_bar(ts[b]);
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            // E[x0 | x_t] = mu + sa·C·(ab·C + (1−ab)·I)⁻¹·(x_t − sa·mu)
            let m = [[ab * c[0][0] + sn * sn, ab * c[0][1]], [ab * c[1][0], ab * c[1][1] + sn * sn]];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            let inv = [[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]];
            let k = |i: usize, j: usize| sa * (c[i][0] * inv[0][j] + c[i][1] * inv[1][j]);
            for px in 0..x_t.hw() {
                let xt = [x_t.plane(0, b)[px], x_t.plane(1, b)[px]];
                let r = [xt[0] - sa * self.mu[0], xt[1] - sa * self.mu[1]];
                for ch in 0..2 {
                    let x0 = self.mu[ch] + k(ch, 0) * r[0] + k(ch, 1) * r[1];
                    let eps = (xt[ch] - sa * x0) / sn;
                    y.plane_mut(ch, b)[px] = match self.target {
                        PredictionTarget::X0 => x0,
                        PredictionTarget::Epsilon => eps,
                        PredictionTarget::Velocity => sa * eps - sn * x0,
                    };
                }
            }
        }
        Ok(y)
    }
}

fn sampler_oracle() -> Check {
    let mu = [0.3, -0.2];
    let cov = [[0.0225, 0.0108], [0.0108, 0.0144]];
    let requests: Vec<(u64, ConditionToken)> = (0..2000).map(|i| (i as u64 + 1, ConditionToken::new(0, 0, 30).unwrap())).collect();
    let mut detail = Vec::new();
    for target in PredictionTarget::ALL {
        let oracle = GaussianPosterior { size: 4, mu, cov, sched: sched(), target };
        for eta in [0.0, 0.2] {
            let cfg = SamplerConfig { steps: 300, eta, seed: 0, batch_size: 500, ..SamplerConfig::default() };
            let out = ok(sample(&oracle, &requests, &cfg, &oracle.sched, target))?;
            let hw = 16;
            let mut pts = Vec::with_capacity(out.len() * hw);
            for g in &out {
                (0..hw).for_each(|i| pts.push([g.raw[i], g.raw[hw + i]]));
            }
            let n = pts.len() as f64;
            let m = [pts.iter().map(|p| p[0]).sum::<f64>() / n, pts.iter().map(|p| p[1]).sum::<f64>() / n];
            let mut c = [[0.0; 2]; 2];
            for p in &pts {
                for i in 0..2 {
                    for j in 0..2 {
                        c[i][j] += (p[i] - m[i]) * (p[j] - m[j]) / (n - 1.0);
                    }
                }
            }
            let mean_err = (0..2).map(|i| (m[i] - mu[i]).abs() / mu[i].abs()).fold(0.0, f64::max);
            let frob = |a: [[f64; 2]; 2]| a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
            let cov_err = frob([[c[0][0] - cov[0][0], c[0][1] - cov[0][1]], [c[1][0] - cov[1][0], c[1][1] - cov[1][1]]]) / frob(cov);
            ensure(mean_err < 0.05 && cov_err < 0.05, format!("{target} eta={eta}: mean error {mean_err:.3}, covariance error {cov_err:.3}"))?;
            if eta == 0.0 {
                let again = ok(sample(&oracle, &requests[..64], &SamplerConfig { batch_size: 7, ..cfg }, &oracle.sched, target))?;
                let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                ensure(again.iter().zip(&out).all(|(a, b)| bits(&a.raw) == bits(&b.raw)), format!("{target}: eta=0 rerun differs"))?;
            }
            detail.push(format!("{target}/{eta}: {:.1}%/{:.1}%", 100.0 * mean_err, 100.0 * cov_err));
        }
    }
    Ok(format!("mean/cov error {}", detail.join(", ")))
}

// ---------------------------------------------------------------- 7

fn shape_mask(h: usize, w: usize, inside: impl Fn(usize, usize) -> bool) -> Vec<f32> {
    (0..h * w).map(|i| if inside(i / w, i % w) { 1.0 } else { -1.0 }).collect()
}

fn union_find_labels(mask: &[f32], h: usize, w: usize) -> Vec<Vec<usize>> {
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let n = p[c];
            p[c] = r;
            c = n;
        }
        r
    }
    let mut parent: Vec<usize> = (0..h * w).collect();
    for r in 0..h {
        for c in 0..w {
            if mask[r * w + c] <= 0.0 {
                continue;
            }
            for (dr, dc) in [(-1i64, -1i64), (-1, 0), (-1, 1), (0, -1)] {
                let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                if rr >= 0 && cc >= 0 && cc < w as i64 && mask[rr as usize * w + cc as usize] > 0.0 {
                    let a = find(&mut parent, r * w + c);
                    let b = find(&mut parent, rr as usize * w + cc as usize);
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..h * w {
        if mask[i] > 0.0 {
            let root = find(&mut parent, i);
            groups.entry(root).or_default().push(i);
        }
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    out.sort();
    out
}

fn morphometrics_oracles() -> Check {
    let check = |name: &str, mask: &[f32], h: usize, w: usize, area: f64| -> std::result::Result<f64, String> {
        let f = ok(mask_features(mask, h, w, 1))?;
        ensure(f.len() == 1, format!("{name}: {} components", f.len()))?;
        let f = &f[0];
        ensure(f.area == area, format!("{name}: area {} vs {area}", f.area))?;
        let eq = (4.0 * area / std::f64::consts::PI).sqrt();
        ensure((f.equivalent_diameter - eq).abs() < 1e-6, format!("{name}: equivalent diameter {}", f.equivalent_diameter))?;
        Ok(f.circularity)
    };
    check("square", &shape_mask(20, 20, |r, c| (5..15).contains(&r) && (5..15).contains(&c)), 20, 20, 100.0)?;
    check("rectangle", &shape_mask(20, 30, |r, c| (4..11).contains(&r) && (3..25).contains(&c)), 20, 30, 7.0 * 22.0)?;
    let radius = 15.0;
    let disk = shape_mask(41, 41, |r, c| ((r as f64 - 20.0).powi(2) + (c as f64 - 20.0).powi(2)).sqrt() <= radius);
    let area = disk.iter().filter(|&&v| v > 0.0).count() as f64;
    let circ = check("disk", &disk, 41, 41, area)?;
    ensure((0.9..=1.1).contains(&circ), format!("disk circularity {circ}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..100 {
        let (h, w) = (rng.random_range(1..24), rng.random_range(1..24));
        let density = rng.random_range(0.1..0.7);
        let mask: Vec<f32> = (0..h * w).map(|_| if rng.random_bool(density) { 1.0 } else { -1.0 }).collect();
        let got: Vec<Vec<usize>> = ok(connected_components(&mask, h, w, Connectivity::Eight, 1))?
            .iter()
            .map(|inst| {
                let mut v: Vec<usize> = inst.pixels.iter().map(|&(r, c)| r * w + c).collect();
                v.sort();
                v
            })
            .collect();
        let mut got = got;
        got.sort();
        ensure(got == union_find_labels(&mask, h, w), format!("random mask {i} ({h}x{w}): components differ"))?;
    }
    Ok(format!("disk circularity {circ:.4}; 100 random masks agree"))
}

// ---------------------------------------------------------------- 8

fn rank_by_count(all: &[f64], x: f64) -> f64 {
    all.iter().filter(|&&v| v < x).count() as f64 + (all.iter().filter(|&&v| v == x).count() as f64 + 1.0) / 2.0
}

fn ties_by_count(all: &[f64]) -> f64 {
    let mut distinct = all.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    distinct
        .iter()
        .map(|&d| {
            let t = all.iter().filter(|&&v| v == d).count() as f64;
            t * t * t - t
        })
        .sum()
}

fn statistics_oracles() -> Check {
    let g = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]];
    let kw = ok(stats::kruskal_wallis(&g))?;
    ensure((kw.statistic - 7.2).abs() < 1e-12, format!("H = {}", kw.statistic))?;
    let fr = ok(stats::friedman(&vec![vec![1.0, 2.0, 3.0]; 3]))?;
    ensure((fr.statistic - 6.0).abs() < 1e-12, format!("chi2_F = {}", fr.statistic))?;
    let d = ok(stats::cliffs_delta(&[1.0, 3.0], &[2.0, 4.0]))?;
    ensure(d == -0.5, format!("Cliff's delta = {d}"))?;
    let (_, rej) = ok(stats::bh_fdr(&[0.01, 0.02, 0.04], 0.05))?;
    ensure(rej.iter().all(|&r| r), "BH did not reject all three")?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let grid = |rng: &mut ChaCha8Rng, n: usize| (0..n).map(|_| rng.random_range(0..5) as f64).collect::<Vec<f64>>();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for _ in 0..500 {
        let k = rng.random_range(2..=4);
        let groups: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                let n = rng.random_range(1..=12 / k);
                grid(&mut rng, n)
            })
            .collect();
        let all: Vec<f64> = groups.concat();
        let n = all.len() as f64;
        let c = 1.0 - ties_by_count(&all) / (n.powi(3) - n);
        if all.len() >= 3 && c > 0.0 {
            let s: f64 = groups.iter().map(|g| g.iter().map(|&x| rank_by_count(&all, x)).sum::<f64>().powi(2) / g.len() as f64).sum();
            let h = (12.0 / (n * (n + 1.0)) * s - 3.0 * (n + 1.0)) / c;
            worst = worst.max((ok(stats::kruskal_wallis(&groups))?.statistic - h).abs());
            let var = n * (n + 1.0) / 12.0 - ties_by_count(&all) / (12.0 * (n - 1.0));
            let mr = |g: &[f64]| g.iter().map(|&x| rank_by_count(&all, x)).sum::<f64>() / g.len() as f64;
            for pz in ok(stats::dunn_posthoc(&groups))? {
                let z = (mr(&groups[pz.i]) - mr(&groups[pz.j])) / (var * (1.0 / groups[pz.i].len() as f64 + 1.0 / groups[pz.j].len() as f64)).sqrt();
                worst = worst.max((pz.z - z).abs());
            }
            cases += 1;
        }

        let (rows, cols) = (rng.random_range(2..=4), rng.random_range(2..=3));
        let m: Vec<Vec<f64>> = (0..rows).map(|_| grid(&mut rng, cols)).collect();
        let (nf, kf) = (rows as f64, cols as f64);
        let rs: f64 = (0..cols).map(|j| m.iter().map(|r| rank_by_count(r, r[j])).sum::<f64>().powi(2)).sum();
        let chi = 12.0 / (nf * kf * (kf + 1.0)) * rs - 3.0 * nf * (kf + 1.0);
        worst = worst.max((ok(stats::friedman(&m))?.statistic - chi).abs());

        let (nx, ny) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let x = grid(&mut rng, nx);
        let y = grid(&mut rng, ny);
        let mut net = 0.0;
        for a in &x {
            for b in &y {
                net += f64::from(a > b) - f64::from(a < b);
            }
        }
        worst = worst.max((ok(stats::cliffs_delta(&x, &y))? - net / (nx * ny) as f64).abs());

        let mp = rng.random_range(1..=12);
        let pv: Vec<f64> = (0..mp).map(|_| rng.random_range(0..30) as f64 / 300.0).collect();
        let mut sorted = pv.clone();
        sorted.sort_by(f64::total_cmp);
        let (adj, _) = ok(stats::bh_fdr(&pv, 0.05))?;
        for (i, &p) in pv.iter().enumerate() {
            let first = sorted.iter().position(|&s| s == p).unwrap();
            let want = (first..mp).map(|j| mp as f64 * sorted[j] / (j + 1) as f64).fold(f64::INFINITY, f64::min).min(1.0);
            worst = worst.max((adj[i] - want).abs());
        }
    }
    ensure(worst < 1e-9, format!("largest oracle deviation {worst:e}"))?;
    Ok(format!("{cases} Kruskal-Wallis cases plus Friedman/Cliff/BH; max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------- 9

fn shift(v: &[Vec<f64>], by: &[f64]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.iter().zip(by).map(|(a, b)| a + b).collect()).collect()
}

fn metric_sanity() -> Check {
    let recs = ok(generate_toy_dataset(&ToyConfig::default()))?;
    let (a, b) = ok(metrics::split_halves(&recs, 9))?;
    let ex = ToyFeatureExtractor::default();
    let emb = |rs: &[SliceRecord]| -> std::result::Result<Vec<Vec<f64>>, String> { rs.iter().map(|r| ok(ex.embed(&r.image, 32, 32))).collect() };
    let (fa, fb) = (emb(&a)?, emb(&b)?);
    let kid = |x: &[Vec<f64>], y: &[Vec<f64>]| ok(metrics::kid(x, y, 50, 20, &mut ChaCha8Rng::seed_from_u64(1)));
    let k0 = kid(&fa, &fb)?;
    ensure(k0.mean.abs() <= 3.0 * k0.std, format!("KID {} ± {}", k0.mean, k0.std))?;
    let sd: Vec<f64> = (0..fa[0].len()).map(|d| metrics::mean_std(&fa.iter().map(|v| v[d]).collect::<Vec<_>>()).std).collect();
    let mut prev = k0.mean;
    for c in [0.25, 0.5, 1.0, 2.0] {
        let k = kid(&fa, &shift(&fb, &sd.iter().map(|s| c * s).collect::<Vec<_>>()))?.mean;
        ensure(k > prev, format!("KID not increasing at shift {c}: {k} after {prev}"))?;
        prev = k;
    }

    let shapes = |rs: &[SliceRecord]| -> std::result::Result<Vec<Vec<f64>>, String> {
        Ok(ok(metrics::lesion_features(rs, 5))?.iter().map(|f| f.to_vec()).collect())
    };
    let (sa, sb) = (shapes(&a)?, shapes(&b)?);
    let m0 = ok(metrics::mmd_mf(&sa, &sb))?;
    // spread of the null statistic over independent half splits
    let null: Vec<f64> = (0..20)
        .map(|s| {
            let (x, y) = ok(metrics::split_halves(&recs, 100 + s))?;
            ok(metrics::mmd_mf(&shapes(&x)?, &shapes(&y)?))
        })
        .collect::<std::result::Result<_, String>>()?;
    let ns = metrics::mean_std(&null);
    ensure(m0 <= 3.0 * ns.std, format!("MMD-MF {m0} vs null std {}", ns.std))?;
    let fsd: Vec<f64> = (0..sa[0].len()).map(|d| metrics::mean_std(&sa.iter().map(|v| v[d]).collect::<Vec<_>>()).std).collect();
    let mut prev = m0;
    for c in [0.25, 0.5, 1.0, 2.0] {
        let m = ok(metrics::mmd_mf(&sa, &shift(&sb, &fsd.iter().map(|s| c * s).collect::<Vec<_>>())))?;
        ensure(m > prev, format!("MMD-MF not increasing at shift {c}: {m} after {prev}"))?;
        prev = m;
    }
    Ok(format!(
        "KID {:.2e} ± {:.2e}; MMD-MF {m0:.2e} (null std {:.2e}, {} vs {} lesions)",
        k0.mean,
        k0.std,
        ns.std,
        sa.len(),
        sb.len()
    ))
}

// ---------------------------------------------------------------- 10

/// Lesion masks grown by two pixels in every direction.
fn dilate(mask: &[f32], h: usize, w: usize) -> Vec<f32> {
    (0..h * w)
        .map(|i| {
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            let hit = (-2..=2).any(|dr| {
                (-2..=2).any(|dc| {
                    let (rr, cc) = (r + dr, c + dc);
                    rr >= 0 && cc >= 0 && rr < h as i64 && cc < w as i64 && mask[rr as usize * w + cc as usize] > 0.0
                })
            });
            if hit {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

fn toy_experiment(root: &Path) -> std::result::Result<ExperimentConfig, String> {
    let archive = root.join("toy");
    ok(experiment::generate_toy(&ToyConfig::default(), &archive))?;
    let mut cfg = ExperimentConfig::default();
    cfg.data.archive = Some(archive);
    cfg.train = TrainConfig {
        lr: 1e-3,
        lr_floor: 1e-5,
        ema_decay: 0.995,
        batch_size: 16,
        max_epochs: 20,
        target: PredictionTarget::X0,
        loss: LpConfig { p: 2.0 },
        ..TrainConfig::default()
    };
    cfg.sampler = SamplerConfig { steps: 100, eta: 0.2, seed: 1, batch_size: 32, ..SamplerConfig::default() };
    ok(cfg.validate())?;
    Ok(cfg)
}

fn toy_end_to_end() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = toy_experiment(tmp.path())?;
    let t0 = Instant::now();
    let run_a = tmp.path().join("a");
    let outcome = ok(experiment::run_train(&cfg, &run_a, false))?;
    let train_time = t0.elapsed();
    ensure(train_time <= Duration::from_secs(30 * 60), format!("training took {:.0}s", train_time.as_secs_f64()))?;
    let hist = &outcome.history;
    ensure(hist[outcome.best_epoch].val_loss < hist[0].val_loss, "best validation loss is not below epoch 0")?;

    let real = ok(read_archive(cfg.data.archive.as_ref().unwrap()))?;
    let n_z = cfg.model.z_bins;
    let ck = &outcome.best_checkpoint;

    // (a) lesion-conditioned samples put their mask on the bright region
    let lesion_slices: Vec<SliceRecord> = real.iter().filter(|r| r.pathology == 1).cloned().collect();
    let les_tokens = ok(choose_tokens(&lesion_slices, 32, TokenMode::Empirical, n_z, 11))?;
    let gen_les = ok(experiment::run_sample(ck, &make_requests(&les_tokens, 11), &cfg.sampler, None))?;
    let tau = ok(metrics::hyperintense_threshold(&real))?;
    let iou = gen_les.iter().map(|g| metrics::mask_image_iou(&g.image, &g.mask, tau)).sum::<f64>() / gen_les.len() as f64;

    // (b) KID against real beats pure noise
    let tokens = ok(choose_tokens(&real, 64, TokenMode::Empirical, n_z, 12))?;
    let gen = ok(experiment::run_sample(ck, &make_requests(&tokens, 12), &cfg.sampler, None))?;
    let ex = ToyFeatureExtractor::default();
    let emb = |imgs: &[&[f32]]| ok(ex.embed_all(imgs, 32, 32));
    let fr = emb(&real.iter().map(|r| r.image.as_slice()).collect::<Vec<_>>())?;
    let fg = emb(&gen.iter().map(|r| r.image.as_slice()).collect::<Vec<_>>())?;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let noise: Vec<Vec<f32>> = (0..64).map(|_| (0..1024).map(|_| rng.sample::<f32, _>(StandardNormal).clamp(-1.0, 1.0)).collect()).collect();
    let fnoise = emb(&noise.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
    let kid = |x: &[Vec<f64>]| ok(metrics::kid(&fr, x, 50, 20, &mut ChaCha8Rng::seed_from_u64(14)));
    let (k_gen, k_noise) = (kid(&fg)?, kid(&fnoise)?);

    // (c) generated lesion shapes are closer to real than grown masks
    let all_gen: Vec<SliceRecord> = gen_les.iter().chain(&gen).cloned().collect();
    let shapes = |rs: &[SliceRecord]| -> std::result::Result<Vec<Vec<f64>>, String> {
        Ok(ok(metrics::lesion_features(rs, 5))?.iter().map(|f| f.to_vec()).collect())
    };
    let grown: Vec<SliceRecord> = lesion_slices.iter().map(|r| SliceRecord { mask: dilate(&r.mask, 32, 32), ..r.clone() }).collect();
    let (s_real, s_gen, s_grown) = (shapes(&real)?, shapes(&all_gen)?, shapes(&grown)?);
    ensure(s_gen.len() >= 2, format!("only {} generated lesion instances", s_gen.len()))?;
    let (m_gen, m_grown) = (ok(metrics::mmd_mf(&s_real, &s_gen))?, ok(metrics::mmd_mf(&s_real, &s_grown))?);

    // (d) retraining reproduces the log
    let run_b = tmp.path().join("b");
    ok(experiment::run_train(&cfg, &run_b, false))?;
    let log_a = fs::read(run_a.join("metrics.tsv")).map_err(|e| e.to_string())?;
    let log_b = fs::read(run_b.join("metrics.tsv")).map_err(|e| e.to_string())?;

    let detail = format!(
        "train {:.0}s, {} epochs, val {:.4} -> {:.4}; (a) IoU {iou:.3}; (b) KID gen {:.4} vs noise {:.4}; (c) MMD-MF gen {m_gen:.4} vs grown {m_grown:.4}; (d) logs {}",
        train_time.as_secs_f64(),
        outcome.epochs_run,
        hist[0].val_loss,
        outcome.best_val_loss,
        k_gen.mean,
        k_noise.mean,
        if log_a == log_b { "identical" } else { "differ" }
    );
    ensure(iou >= 0.3, format!("(a) failed: {detail}"))?;
    ensure(k_gen.mean < k_noise.mean, format!("(b) failed: {detail}"))?;
    ensure(m_gen < m_grown, format!("(c) failed: {detail}"))?;
    ensure(log_a == log_b, format!("(d) failed: {detail}"))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 11

fn sweep_config(root: &Path) -> std::result::Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::default();
    cfg.data.toy = ToyConfig { n_subjects: 12, slices_per_subject: 8, lesion_prob: 0.75, seed: 21, ..ToyConfig::default() };
    cfg.train = TrainConfig { lr: 2e-3, ema_decay: 0.95, batch_size: 8, max_epochs: 40, ..TrainConfig::default() };
    cfg.sampler = SamplerConfig { steps: 20, eta: 0.2, seed: 5, batch_size: 24, ..SamplerConfig::default() };
    cfg.eval.n_samples = 48;
    cfg.metrics.perceptual_pairs = 50;
    cfg.sweep.replicas = 2;
    ok(cfg.validate())?;
    fs::create_dir_all(root).map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn sweep_and_report() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path().join("sweep");
    let cfg = sweep_config(&root)?;
    let out = ok(experiment::run_sweep(&cfg, &root))?;
    ensure(out.failed.is_empty(), format!("failed cells: {:?}", out.failed.iter().map(|(c, w)| format!("{}: {w}", c.dir_name())).collect::<Vec<_>>()))?;
    ensure(out.report.missing.is_empty(), format!("incomplete grid: {:?}", out.report.missing))?;
    for m in experiment::HEADLINE_METRICS {
        let cells: Vec<_> = out.report.grid.iter().filter(|g| g.metric == m).collect();
        ensure(cells.len() == 9 && cells.iter().all(|g| g.n == 2 && g.mean.is_finite() && g.std.is_finite()), format!("{m}: grid is not 3x3 with 2 replicas"))?;
    }

    // manual pass over the stored per-replica table
    let rows: Vec<ReplicaRow> = ok(experiment::read_csv(&root.join(experiment::REPLICA_CSV)))?;
    let mut manual: Vec<StatsRow> = Vec::new();
    for m in experiment::HEADLINE_METRICS {
        let obs: Vec<Observation> = rows
            .iter()
            .filter(|r| r.metric == m)
            .map(|r| Observation { group: r.target.clone(), block: r.p.clone(), replica: r.replica, value: r.value })
            .collect();
        manual.extend(ok(stats::stats_block(m, &obs, cfg.sweep.alpha))?);
    }
    let manual_csv = tmp.path().join("manual.csv");
    ok(experiment::write_csv(&manual_csv, &manual))?;
    let stored = fs::read(root.join(experiment::STATS_CSV)).map_err(|e| e.to_string())?;
    ensure(stored == fs::read(&manual_csv).map_err(|e| e.to_string())?, "stats.csv differs from the manual run")?;
    let parsed: Vec<StatsRow> = ok(experiment::read_csv(&root.join(experiment::STATS_CSV)))?;
    let bits = |r: &StatsRow| (r.statistic.to_bits(), r.p.map(f64::to_bits), r.adjusted_p.map(f64::to_bits), r.effect_size.map(f64::to_bits), r.gated);
    ensure(parsed.len() == manual.len() && parsed.iter().zip(&manual).all(|(a, b)| bits(a) == bits(b)), "stored statistics are not bit-identical")?;
    let count = |t: &str| manual.iter().filter(|r| r.test == t).count();
    ensure(count("kruskal_wallis") == 3 && count("friedman") == 9 && count("dunn_bh") == 9, "statistics block is missing tests")?;

    let again = tmp.path().join("again");
    let regen = ok(experiment::regenerate_report(&root.join(experiment::REPLICA_CSV), &again, cfg.sweep.alpha))?;
    ensure(regen == out.report, "regenerated report differs")?;
    ensure(
        fs::read(again.join(experiment::REPORT_TXT)).ok() == fs::read(root.join(experiment::REPORT_TXT)).ok(),
        "regenerated report text differs",
    )?;
    Ok(format!("{} stats rows bit-identical; findings: {}", manual.len(), out.report.findings.join("; ")))
}

// ----------------------------------------------------------------

fn main() {
    let checks: [(u32, &str, u64, fn() -> Check); 11] = [
        (1, "schedule correctness", 1, schedule_correctness),
        (2, "parameterization algebra", 5, parameterization_algebra),
        (3, "Lp gradient check", 5, lp_gradient),
        (4, "forward-process moments", 30, forward_moments),
        (5, "network gradient check", 120, network_gradient),
        (6, "sampler oracle", 120, sampler_oracle),
        (7, "morphometrics oracles", 30, morphometrics_oracles),
        (8, "statistics oracles", 10, statistics_oracles),
        (9, "metric sanity", 60, metric_sanity),
        (10, "toy end-to-end", 3600, toy_end_to_end),
        (11, "sweep + report", 7200, sweep_and_report),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (id, name, budget, run) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t0 = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t0.elapsed().as_secs_f64();
        let (verdict, detail) = match result {
            Ok(d) if secs <= budget as f64 => ("PASS", d),
            Ok(d) => ("FAIL", format!("over the {budget}s budget; {d}")),
            Err(e) => ("FAIL", e),
        };
        if verdict == "FAIL" {
            failed += 1;
        }
        println!("criterion {id:>2} {verdict} {name} [{secs:.1}s / {budget}s] {detail}");
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
