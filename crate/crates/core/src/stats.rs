//! Nonparametric testing: Kruskal–Wallis with Dunn post-hocs under BH-FDR,
//! Friedman with Nemenyi post-hocs, and Cliff's delta.
//!
//! Ties get mid-ranks everywhere.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::gamma_ur;

use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.05;

/// Upper tail of χ² with `df` degrees of freedom.
pub fn chi2_sf(x: f64, df: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        gamma_ur(df / 2.0, x / 2.0)
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Two-sided standard-normal p-value.
pub fn normal_two_sided(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// Mid-ranks (1-based) and the tie sum `Σ(t³ − t)` over tie groups.
pub fn midranks(values: &[f64]) -> (Vec<f64>, f64) {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        idx[i..j].iter().for_each(|&k| ranks[k] = r);
        let t = (j - i) as f64;
        ties += t * t * t - t;
        i = j;
    }
    (ranks, ties)
}

fn check_finite(values: impl IntoIterator<Item = f64>) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(Error::Input("statistics need finite values".into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestResult {
    pub statistic: f64,
    pub p: f64,
    pub df: usize,
    /// Set when there was no rank variation at all.
    pub degenerate: bool,
}

struct Pooled {
    ranks: Vec<Vec<f64>>,
    n_total: usize,
    ties: f64,
}

fn pool_ranks(groups: &[Vec<f64>]) -> Result<Pooled> {
    if groups.len() < 2 || groups.iter().any(Vec::is_empty) {
        return Err(Error::Input("need >= 2 groups, each non-empty".into()));
    }
    check_finite(groups.iter().flatten().copied())?;
    let flat: Vec<f64> = groups.iter().flatten().copied().collect();
    let (r, ties) = midranks(&flat);
    let mut it = r.into_iter();
    let ranks = groups.iter().map(|g| it.by_ref().take(g.len()).collect()).collect();
    Ok(Pooled { ranks, n_total: flat.len(), ties })
}

pub fn kruskal_wallis(groups: &[Vec<f64>]) -> Result<TestResult> {
    let pooled = pool_ranks(groups)?;
    let n = pooled.n_total as f64;
    if pooled.n_total < 3 {
        return Err(Error::Input(format!("Kruskal-Wallis needs N >= 3, got {}", pooled.n_total)));
    }
    let df = groups.len() - 1;
    let correction = 1.0 - pooled.ties / (n * n * n - n);
    if correction <= 0.0 {
        return Ok(TestResult { statistic: 0.0, p: 1.0, df, degenerate: true });
    }
    let s: f64 = pooled.ranks.iter().map(|r| r.iter().sum::<f64>().powi(2) / r.len() as f64).sum();
    let h = (12.0 / (n * (n + 1.0)) * s - 3.0 * (n + 1.0)) / correction;
    let h = h.max(0.0);
    Ok(TestResult { statistic: h, p: chi2_sf(h, df as f64), df, degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairwiseZ {
    pub i: usize,
    pub j: usize,
    pub z: f64,
    pub p: f64,
}

/// Dunn's z for every pair `i < j` with raw two-sided p-values.
pub fn dunn_posthoc(groups: &[Vec<f64>]) -> Result<Vec<PairwiseZ>> {
    let pooled = pool_ranks(groups)?;
    let n = pooled.n_total as f64;
    let var = n * (n + 1.0) / 12.0 - pooled.ties / (12.0 * (n - 1.0).max(1.0));
    let mean: Vec<f64> = pooled.ranks.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
    let mut out = Vec::new();
    for i in 0..groups.len() {
        for j in i + 1..groups.len() {
            let se = (var * (1.0 / groups[i].len() as f64 + 1.0 / groups[j].len() as f64)).sqrt();
            let z = if se > 0.0 { (mean[i] - mean[j]) / se } else { 0.0 };
            out.push(PairwiseZ { i, j, z, p: normal_two_sided(z) });
        }
    }
    Ok(out)
}

/// Benjamini–Hochberg step-up: adjusted p-values and reject flags.
pub fn bh_fdr(pvals: &[f64], alpha: f64) -> Result<(Vec<f64>, Vec<bool>)> {
    if let Some(p) = pvals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::range("p-value", p, "[0, 1]"));
    }
    let m = pvals.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| pvals[a].total_cmp(&pvals[b]));
    let mut adj = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &k) in order.iter().enumerate().rev() {
        running = running.min(m as f64 * pvals[k] / (rank + 1) as f64);
        adj[k] = running.min(1.0);
    }
    let reject = adj.iter().map(|&a| a <= alpha).collect();
    Ok((adj, reject))
}

/// Friedman χ² over a `replicas × treatments` matrix, ranking within rows.
pub fn friedman(rows: &[Vec<f64>]) -> Result<TestResult> {
    let (n, k) = friedman_shape(rows)?;
    let sums = friedman_rank_sums(rows);
    let (nf, kf) = (n as f64, k as f64);
    let s: f64 = sums.iter().map(|r| r * r).sum();
    let chi = (12.0 / (nf * kf * (kf + 1.0)) * s - 3.0 * nf * (kf + 1.0)).max(0.0);
    let degenerate = rows.iter().all(|r| r.iter().all(|&v| v == r[0]));
    Ok(TestResult { statistic: chi, p: chi2_sf(chi, (k - 1) as f64), df: k - 1, degenerate })
}

fn friedman_shape(rows: &[Vec<f64>]) -> Result<(usize, usize)> {
    let n = rows.len();
    let k = rows.first().map_or(0, Vec::len);
    if n < 2 || k < 2 {
        return Err(Error::Input(format!("Friedman needs >= 2 replicas and >= 2 treatments, got {n}x{k}")));
    }
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::Input("repeated-measures matrix has missing cells".into()));
    }
    check_finite(rows.iter().flatten().copied())?;
    Ok((n, k))
}

fn friedman_rank_sums(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut sums = vec![0.0; rows[0].len()];
    for r in rows {
        for (s, x) in sums.iter_mut().zip(midranks(r).0) {
            *s += x;
        }
    }
    sums
}

/// Studentized-range quantiles `q_0.05 / √2` for k = 2..=10 at infinite df,
/// the form used in Nemenyi critical differences (Demšar 2006, Table 5a).
pub const NEMENYI_Q05: [f64; 9] = [1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164];

pub fn nemenyi_q(k: usize) -> Result<f64> {
    if (2..=10).contains(&k) {
        Ok(NEMENYI_Q05[k - 2])
    } else {
        Err(Error::Config(format!("Nemenyi table covers 2..=10 treatments, got {k}")))
    }
}

/// `P(Q ≤ q)` for the range of `k` standard normals (infinite df):
/// `k ∫ φ(z) [Φ(z) − Φ(z − q)]^(k−1) dz`, by Simpson's rule.
pub fn studentized_range_cdf(q: f64, k: usize) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    const STEPS: usize = 4000;
    let (lo, hi) = (-9.0, 9.0);
    let h = (hi - lo) / STEPS as f64;
    let f = |z: f64| {
        let phi = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        phi * (normal_cdf(z) - normal_cdf(z - q)).powi(k as i32 - 1)
    };
    let mut acc = f(lo) + f(hi);
    for i in 1..STEPS {
        acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    (k as f64 * acc * h / 3.0).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NemenyiPair {
    pub i: usize,
    pub j: usize,
    /// `R̄_i − R̄_j`.
    pub rank_diff: f64,
    pub p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NemenyiResult {
    pub critical_difference: f64,
    pub mean_ranks: Vec<f64>,
    pub pairs: Vec<NemenyiPair>,
}

pub fn nemenyi_cd(k: usize, n: usize) -> Result<f64> {
    Ok(nemenyi_q(k)? * (k as f64 * (k as f64 + 1.0) / (6.0 * n as f64)).sqrt())
}

pub fn nemenyi(rows: &[Vec<f64>]) -> Result<NemenyiResult> {
    let (n, k) = friedman_shape(rows)?;
    let cd = nemenyi_cd(k, n)?;
    let mean_ranks: Vec<f64> = friedman_rank_sums(rows).iter().map(|s| s / n as f64).collect();
    let se = (k as f64 * (k as f64 + 1.0) / (12.0 * n as f64)).sqrt();
    let mut pairs = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let d = mean_ranks[i] - mean_ranks[j];
            pairs.push(NemenyiPair {
                i,
                j,
                rank_diff: d,
                p: 1.0 - studentized_range_cdf(d.abs() / se, k),
                significant: d.abs() >= cd,
            });
        }
    }
    Ok(NemenyiResult { critical_difference: cd, mean_ranks, pairs })
}

/// `(#{x > y} − #{x < y}) / (n_x·n_y)` over all cross pairs.
pub fn cliffs_delta(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::Input("Cliff's delta needs two non-empty samples".into()));
    }
    check_finite(x.iter().chain(y).copied())?;
    let mut ys = y.to_vec();
    ys.sort_by(f64::total_cmp);
    let mut net = 0i64;
    for &v in x {
        let below = ys.partition_point(|&w| w < v);
        let not_above = ys.partition_point(|&w| w <= v);
        net += below as i64 - (ys.len() - not_above) as i64;
    }
    Ok(net as f64 / (x.len() * ys.len()) as f64)
}

/// One measured value in a sweep: `group` is the omnibus factor, `block`
/// the repeated-measures factor within a group.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub group: String,
    pub block: String,
    pub replica: usize,
    pub value: f64,
}

/// One line of the statistics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub metric: String,
    pub test: String,
    pub comparison: String,
    pub statistic: f64,
    pub p: Option<f64>,
    pub adjusted_p: Option<f64>,
    pub effect_size: Option<f64>,
    /// True when the omnibus test was not significant, so the post-hoc
    /// result is reported but should not be read as a finding.
    pub gated: bool,
}

/// The full testing pipeline for one metric:
/// Kruskal–Wallis across groups pooling every block and replica, Dunn + BH
/// gated on it, then per group a Friedman test across blocks (rows are
/// replicas) with gated Nemenyi pairs. Post-hoc rows carry Cliff's delta.
pub fn stats_block(metric: &str, obs: &[Observation], alpha: f64) -> Result<Vec<StatsRow>> {
    let mut by_group: BTreeMap<&str, Vec<&Observation>> = BTreeMap::new();
    for o in obs {
        by_group.entry(&o.group).or_default().push(o);
    }
    let names: Vec<&str> = by_group.keys().copied().collect();
    let pooled: Vec<Vec<f64>> = by_group.values().map(|v| v.iter().map(|o| o.value).collect()).collect();
    let row = |test: &str, comparison: String, statistic: f64, p: Option<f64>| StatsRow {
        metric: metric.into(),
        test: test.into(),
        comparison,
        statistic,
        p,
        adjusted_p: None,
        effect_size: None,
        gated: false,
    };
    let mut out = Vec::new();

    let kw = kruskal_wallis(&pooled)?;
    out.push(row("kruskal_wallis", names.join(" | "), kw.statistic, Some(kw.p)));
    let dunn = dunn_posthoc(&pooled)?;
    let (adj, _) = bh_fdr(&dunn.iter().map(|d| d.p).collect::<Vec<_>>(), alpha)?;
    for (d, a) in dunn.iter().zip(adj) {
        out.push(StatsRow {
            adjusted_p: Some(a),
            effect_size: Some(cliffs_delta(&pooled[d.i], &pooled[d.j])?),
            gated: !(kw.p < alpha),
            ..row("dunn_bh", format!("{} vs {}", names[d.i], names[d.j]), d.z, Some(d.p))
        });
    }

    for (g, items) in &by_group {
        let mut blocks: Vec<&str> = items.iter().map(|o| o.block.as_str()).collect();
        blocks.sort_unstable();
        blocks.dedup();
        let mut reps: Vec<usize> = items.iter().map(|o| o.replica).collect();
        reps.sort_unstable();
        reps.dedup();
        if reps.len() < 2 || blocks.len() < 2 {
            log::warn!("{metric}/{g}: Friedman skipped ({} replicas, {} blocks)", reps.len(), blocks.len());
            continue;
        }
        let mut cells: BTreeMap<(usize, &str), f64> = BTreeMap::new();
        for o in items {
            if cells.insert((o.replica, o.block.as_str()), o.value).is_some() {
                return Err(Error::Input(format!("{metric}/{g}: duplicate cell replica {} block {}", o.replica, o.block)));
            }
        }
        let matrix: Vec<Vec<f64>> = reps
            .iter()
            .map(|&r| {
                blocks
                    .iter()
                    .map(|&b| cells.get(&(r, b)).copied().ok_or_else(|| Error::Input(format!("{metric}/{g}: missing replica {r} block {b}"))))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let fr = friedman(&matrix)?;
        out.push(row("friedman", format!("{g}: {}", blocks.join(" | ")), fr.statistic, Some(fr.p)));
        let nm = nemenyi(&matrix)?;
        let gated = !(fr.p < alpha);
        out.push(StatsRow { gated, ..row("nemenyi_cd", g.to_string(), nm.critical_difference, None) });
        for pr in &nm.pairs {
            let col = |c: usize| matrix.iter().map(|r| r[c]).collect::<Vec<_>>();
            out.push(StatsRow {
                effect_size: Some(cliffs_delta(&col(pr.i), &col(pr.j))?),
                gated,
                ..row("nemenyi", format!("{g}: {} vs {}", blocks[pr.i], blocks[pr.j]), pr.rank_diff, Some(pr.p))
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Rank by counting: `#{v < x} + (#{v = x} + 1)/2`.
    pub fn rank_oracle(all: &[f64], x: f64) -> f64 {
        let less = all.iter().filter(|&&v| v < x).count() as f64;
        let eq = all.iter().filter(|&&v| v == x).count() as f64;
        less + (eq + 1.0) / 2.0
    }

    pub fn tie_oracle(all: &[f64]) -> f64 {
        let mut seen: Vec<f64> = Vec::new();
        let mut s = 0.0;
        for &v in all {
            if !seen.contains(&v) {
                seen.push(v);
                let t = all.iter().filter(|&&w| w == v).count() as f64;
                s += t.powi(3) - t;
            }
        }
        s
    }

    pub fn kw_oracle(groups: &[Vec<f64>]) -> f64 {
        let all: Vec<f64> = groups.concat();
        let n = all.len() as f64;
        let mut s = 0.0;
        for g in groups {
            let r: f64 = g.iter().map(|&x| rank_oracle(&all, x)).sum();
            s += r * r / g.len() as f64;
        }
        let c = 1.0 - tie_oracle(&all) / (n.powi(3) - n);
        (12.0 / (n * (n + 1.0)) * s - 3.0 * (n + 1.0)) / c
    }

    pub fn dunn_oracle(groups: &[Vec<f64>], i: usize, j: usize) -> f64 {
        let all: Vec<f64> = groups.concat();
        let n = all.len() as f64;
        let mr = |g: &[f64]| g.iter().map(|&x| rank_oracle(&all, x)).sum::<f64>() / g.len() as f64;
        let var = n * (n + 1.0) / 12.0 - tie_oracle(&all) / (12.0 * (n - 1.0));
        (mr(&groups[i]) - mr(&groups[j])) / (var * (1.0 / groups[i].len() as f64 + 1.0 / groups[j].len() as f64)).sqrt()
    }

    pub fn friedman_oracle(rows: &[Vec<f64>]) -> f64 {
        let (n, k) = (rows.len() as f64, rows[0].len() as f64);
        let mut s = 0.0;
        for c in 0..rows[0].len() {
            let r: f64 = rows.iter().map(|row| rank_oracle(row, row[c])).sum();
            s += r * r;
        }
        12.0 / (n * k * (k + 1.0)) * s - 3.0 * n * (k + 1.0)
    }

    pub fn cliff_oracle(x: &[f64], y: &[f64]) -> f64 {
        let mut net = 0.0;
        for a in x {
            for b in y {
                net += (a > b) as i32 as f64 - (a < b) as i32 as f64;
            }
        }
        net / (x.len() * y.len()) as f64
    }

    pub fn bh_oracle(p: &[f64]) -> Vec<f64> {
        let m = p.len() as f64;
        let mut sorted = p.to_vec();
        sorted.sort_by(f64::total_cmp);
        p.iter()
            .map(|&pi| {
                // smallest sorted position holding this value
                let i = sorted.iter().position(|&s| s == pi).unwrap();
                (i..sorted.len()).map(|j| m * sorted[j] / (j + 1) as f64).fold(f64::INFINITY, f64::min).min(1.0)
            })
            .collect()
    }

    /// Random values on a coarse grid so that ties actually occur.
    pub fn tied_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(0..6) as f64 * 0.5).collect()
    }

    #[test]
    fn worked_examples() {
        let g = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]];
        let kw = kruskal_wallis(&g).unwrap();
        assert!((kw.statistic - 7.2).abs() < 1e-12);
        assert!((kw.p - (-3.6f64).exp()).abs() < 1e-12);
        let same = vec![vec![2.0; 3]; 3];
        let d = kruskal_wallis(&same).unwrap();
        assert!(d.degenerate && d.statistic == 0.0 && d.p == 1.0);

        let m = vec![vec![1.0, 2.0, 3.0]; 3];
        let fr = friedman(&m).unwrap();
        assert!((fr.statistic - 6.0).abs() < 1e-12);
        assert!((fr.p - (-3.0f64).exp()).abs() < 1e-12);

        assert_eq!(cliffs_delta(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), -0.5);
        assert_eq!(cliffs_delta(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(), -1.0);
        assert_eq!(cliffs_delta(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap(), 0.0);

        let (adj, rej) = bh_fdr(&[0.01, 0.02, 0.04], 0.05).unwrap();
        assert!(rej.iter().all(|&r| r));
        assert!((adj[2] - 0.04).abs() < 1e-15);
        assert_eq!(bh_fdr(&[0.3], 0.05).unwrap().0, vec![0.3]);
        assert!(matches!(bh_fdr(&[1.2], 0.05), Err(Error::Range { .. })));

        let cd = nemenyi_cd(3, 3).unwrap();
        assert!((cd - 1.913).abs() < 5e-4);
        assert!(nemenyi_cd(3, 10).unwrap() < cd);
        assert!(matches!(nemenyi_cd(11, 3), Err(Error::Config(_))));
    }

    #[test]
    fn chi2_tail_closed_forms() {
        for x in [0.1, 1.0, 3.7, 12.0] {
            assert!((chi2_sf(x, 2.0) - (-x / 2.0).exp()).abs() < 1e-13);
            assert!((chi2_sf(x, 4.0) - (-x / 2.0).exp() * (1.0 + x / 2.0)).abs() < 1e-13);
        }
        let p = normal_two_sided(1.959963984540054);
        assert!((p - 0.05).abs() < 1e-9, "{p}");
    }

    #[test]
    fn studentized_range_reproduces_table() {
        for k in 2..=10 {
            let q = NEMENYI_Q05[k - 2] * std::f64::consts::SQRT_2;
            let c = studentized_range_cdf(q, k);
            assert!((c - 0.95).abs() < 1e-3, "k={k}: {c}");
        }
        // k=2 is |Z1 − Z2| = √2·|N(0,1)|
        let q = 2.5;
        assert!((studentized_range_cdf(q, 2) - (1.0 - normal_two_sided(q / std::f64::consts::SQRT_2))).abs() < 1e-10);
    }

    #[test]
    fn dunn_properties() {
        let g = vec![vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0], vec![7.0, 8.0, 9.0]];
        let d = dunn_posthoc(&g).unwrap();
        let rev: Vec<Vec<f64>> = g.iter().rev().cloned().collect();
        let dr = dunn_posthoc(&rev).unwrap();
        // pair (0,2) in g is pair (0,2) in rev with roles swapped
        assert!((d[1].z + dr[1].z).abs() < 1e-12);
        for p in &d {
            assert!((p.z - dunn_oracle(&g, p.i, p.j)).abs() < 1e-9);
            assert!((p.p - normal_two_sided(dunn_oracle(&g, p.i, p.j))).abs() < 1e-9);
        }
        let same = dunn_posthoc(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!((same[0].z, same[0].p), (0.0, 1.0));
    }

    #[test]
    fn brute_force_oracles_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..300 {
            let k = rng.random_range(2..=4);
            let groups: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    let n = rng.random_range(1..=12 / k);
                    tied_values(&mut rng, n)
                })
                .collect();
            if groups.iter().map(Vec::len).sum::<usize>() < 3 {
                continue;
            }
            let kw = kruskal_wallis(&groups).unwrap();
            if !kw.degenerate {
                assert!((kw.statistic - kw_oracle(&groups)).abs() < 1e-9);
                for d in dunn_posthoc(&groups).unwrap() {
                    assert!((d.z - dunn_oracle(&groups, d.i, d.j)).abs() < 1e-9);
                }
            }
            let n = rng.random_range(2..=4);
            let cols = rng.random_range(2..=3);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| tied_values(&mut rng, cols)).collect();
            assert!((friedman(&rows).unwrap().statistic - friedman_oracle(&rows)).abs() < 1e-9);

            let (nx, ny) = (rng.random_range(1..=12), rng.random_range(1..=12));
            let x = tied_values(&mut rng, nx);
            let y = tied_values(&mut rng, ny);
            assert!((cliffs_delta(&x, &y).unwrap() - cliff_oracle(&x, &y)).abs() < 1e-12);

            let m = rng.random_range(1..=12);
            let p: Vec<f64> = (0..m).map(|_| (rng.random_range(0..40) as f64) / 400.0).collect();
            let (adj, _) = bh_fdr(&p, 0.05).unwrap();
            for (a, b) in adj.iter().zip(bh_oracle(&p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank_statistics_ignore_monotone_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let groups: Vec<Vec<f64>> = (0..3).map(|_| tied_values(&mut rng, 4)).collect();
        let f = |v: &Vec<f64>| v.iter().map(|x| (x * 1.3).exp() - 2.0).collect::<Vec<_>>();
        let tg: Vec<Vec<f64>> = groups.iter().map(f).collect();
        assert_eq!(kruskal_wallis(&groups).unwrap(), kruskal_wallis(&tg).unwrap());
        assert_eq!(dunn_posthoc(&groups).unwrap(), dunn_posthoc(&tg).unwrap());
        assert_eq!(friedman(&groups).unwrap(), friedman(&tg).unwrap());
        assert_eq!(cliffs_delta(&groups[0], &groups[1]).unwrap(), cliffs_delta(&tg[0], &tg[1]).unwrap());
    }

    #[test]
    fn bonferroni_rejections_are_a_subset_of_bh() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let m = rng.random_range(1..=10);
            let p: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..0.1)).collect();
            let (adj, bh) = bh_fdr(&p, 0.05).unwrap();
            for i in 0..m {
                if p[i] * m as f64 <= 0.05 {
                    assert!(bh[i]);
                }
            }
            let mut sorted: Vec<usize> = (0..m).collect();
            sorted.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
            assert!(sorted.windows(2).all(|w| adj[w[0]] <= adj[w[1]]));
        }
    }

    #[test]
    fn friedman_column_permutation_permutes_ranks() {
        let rows = vec![vec![0.3, 0.1, 0.2], vec![0.5, 0.4, 0.9], vec![0.2, 0.2, 0.8]];
        let perm: Vec<Vec<f64>> = rows.iter().map(|r| vec![r[2], r[0], r[1]]).collect();
        assert_eq!(friedman(&rows).unwrap().statistic, friedman(&perm).unwrap().statistic);
        let a = nemenyi(&rows).unwrap();
        let b = nemenyi(&perm).unwrap();
        assert_eq!(a.mean_ranks[2], b.mean_ranks[0]);
        assert!(nemenyi(&vec![vec![1.0; 3]; 4]).unwrap().pairs.iter().all(|p| !p.significant));
    }

    #[test]
    fn stats_block_shape_and_gating() {
        let mut obs = Vec::new();
        for (gi, g) in ["epsilon", "velocity", "x0"].iter().enumerate() {
            for (bi, b) in ["1.5", "2", "2.5"].iter().enumerate() {
                for r in 0..2 {
                    obs.push(Observation { group: g.to_string(), block: b.to_string(), replica: r, value: gi as f64 + 0.1 * bi as f64 + 0.01 * r as f64 });
                }
            }
        }
        let rows = stats_block("kid", &obs, 0.05).unwrap();
        let count = |t: &str| rows.iter().filter(|r| r.test == t).count();
        assert_eq!((count("kruskal_wallis"), count("dunn_bh"), count("friedman"), count("nemenyi")), (1, 3, 3, 9));
        let kw = &rows[0];
        assert!(kw.p.unwrap() < 0.05);
        assert!(rows.iter().filter(|r| r.test == "dunn_bh").all(|r| !r.gated && r.effect_size.is_some()));
        // n = 2 replicas: perfectly ordered rows give χ² = 4, p = e⁻² > 0.05
        assert!(rows.iter().filter(|r| r.test == "nemenyi").all(|r| r.gated));
        obs.pop();
        assert!(matches!(stats_block("kid", &obs, 0.05), Err(Error::Input(_))));
    }
}
