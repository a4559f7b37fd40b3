//! Distribution metrics: MMD on shape features, per-feature Wasserstein
//! distances, KID on image features, a perceptual-distance proxy and the
//! real-vs-real baseline.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::SliceRecord;
use crate::error::{Error, Result};
use crate::morpho::{mask_features, ShapeFeatures, DEFAULT_MIN_AREA, FEATURE_NAMES};

/// Smallest RBF bandwidth used when every pooled distance is zero.
pub const MIN_BANDWIDTH: f64 = 1e-12;

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Unbiased MMD² for an arbitrary kernel (diagonal terms excluded within sets).
pub fn mmd2_unbiased(x: &[Vec<f64>], y: &[Vec<f64>], k: impl Fn(&[f64], &[f64]) -> f64) -> Result<f64> {
    let (m, n) = (x.len(), y.len());
    if m < 2 || n < 2 {
        return Err(Error::Input(format!("unbiased MMD needs >= 2 points per set, got {m} and {n}")));
    }
    let within = |s: &[Vec<f64>]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += k(&s[i], &s[j]);
            }
        }
        2.0 * acc / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for a in x {
        for b in y {
            cross += k(a, b);
        }
    }
    Ok(within(x) + within(y) - 2.0 * cross / (m * n) as f64)
}

pub fn mmd2_unbiased_rbf(x: &[Vec<f64>], y: &[Vec<f64>], bandwidth: f64) -> Result<f64> {
    if !(bandwidth > 0.0) {
        return Err(Error::range("bandwidth", bandwidth, "> 0"));
    }
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    mmd2_unbiased(x, y, |a, b| (-g * sqdist(a, b)).exp())
}

/// Median distance over all distinct pairs.
pub fn median_pairwise_distance(points: &[Vec<f64>]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(sqdist(&points[i], &points[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    d.sort_by(f64::total_cmp);
    let h = d.len() / 2;
    if d.len() % 2 == 1 {
        d[h]
    } else {
        0.5 * (d[h - 1] + d[h])
    }
}

/// Standardizes both sets by the real set's per-feature mean and std,
/// dropping features that are constant on the real set.
pub fn standardize_by_real(real: &[Vec<f64>], gen: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>)> {
    let d = real.first().map(Vec::len).ok_or_else(|| Error::Input("empty real feature set".into()))?;
    if real.iter().chain(gen).any(|v| v.len() != d) {
        return Err(Error::Shape("feature vectors differ in length".into()));
    }
    let n = real.len() as f64;
    let mut kept = Vec::new();
    let mut stats = Vec::new();
    for f in 0..d {
        let mean = real.iter().map(|v| v[f]).sum::<f64>() / n;
        let var = real.iter().map(|v| (v[f] - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        if var > 0.0 {
            kept.push(f);
            stats.push((mean, var.sqrt()));
        } else {
            log::warn!("feature {f} is constant on the real set; dropped from MMD");
        }
    }
    if kept.is_empty() {
        return Err(Error::Degenerate("every feature is constant on the real set".into()));
    }
    let apply = |s: &[Vec<f64>]| -> Vec<Vec<f64>> {
        s.iter()
            .map(|v| kept.iter().zip(&stats).map(|(&f, &(m, sd))| (v[f] - m) / sd).collect())
            .collect()
    };
    Ok((apply(real), apply(gen), kept))
}

/// MMD on morphological feature vectors: real-set standardization,
/// median-heuristic RBF bandwidth over the pooled set, floored at 0.
pub fn mmd_mf(real: &[Vec<f64>], gen: &[Vec<f64>]) -> Result<f64> {
    let (r, g, _) = standardize_by_real(real, gen)?;
    let pooled: Vec<Vec<f64>> = r.iter().chain(&g).cloned().collect();
    let bw = median_pairwise_distance(&pooled).max(MIN_BANDWIDTH);
    Ok(mmd2_unbiased_rbf(&r, &g, bw)?.max(0.0))
}

/// W₁ between empirical distributions via quantile matching.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("wasserstein_1d needs non-empty samples".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        return Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64);
    }
    // Integrate |F_a⁻¹(u) − F_b⁻¹(u)| over the merged quantile breakpoints.
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Sample mean and (n − 1) standard deviation.
pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    MeanStd { mean, std }
}

/// Kernel inception distance with the cubic polynomial kernel
/// `(x·y/d + 1)³`, averaged over random subsets.
pub fn kid<R: Rng + ?Sized>(real: &[Vec<f64>], gen: &[Vec<f64>], subset_size: usize, n_subsets: usize, rng: &mut R) -> Result<MeanStd> {
    if subset_size < 2 || n_subsets < 1 {
        return Err(Error::Config("KID needs subset_size >= 2 and n_subsets >= 1".into()));
    }
    if subset_size > real.len() || subset_size > gen.len() {
        return Err(Error::Config(format!(
            "KID subset size {subset_size} exceeds set sizes ({} real, {} generated)",
            real.len(),
            gen.len()
        )));
    }
    let d = real[0].len() as f64;
    let kern = |a: &[f64], b: &[f64]| (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / d + 1.0).powi(3);
    let mut vals = Vec::with_capacity(n_subsets);
    for _ in 0..n_subsets {
        let xs: Vec<Vec<f64>> = index::sample(rng, real.len(), subset_size).into_iter().map(|i| real[i].clone()).collect();
        let ys: Vec<Vec<f64>> = index::sample(rng, gen.len(), subset_size).into_iter().map(|i| gen[i].clone()).collect();
        vals.push(mmd2_unbiased(&xs, &ys, kern)?);
    }
    Ok(mean_std(&vals))
}

/// Image embedding used by KID and the perceptual proxy.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, image: &[f32], height: usize, width: usize) -> Result<Vec<f64>>;

    fn embed_all(&self, images: &[&[f32]], height: usize, width: usize) -> Result<Vec<Vec<f64>>> {
        images.iter().map(|im| self.embed(im, height, width)).collect()
    }
}

/// Fixed random 5×5 filters (stride 2, ReLU, mean and max pooled) plus a
/// 16-bin intensity histogram over `[−1, 1]`. `d = 2·filters + 16`.
#[derive(Debug, Clone)]
pub struct ToyFeatureExtractor {
    filters: Vec<[f64; 25]>,
    biases: Vec<f64>,
}

pub const TOY_EXTRACTOR_SEED: u64 = 0x70_79_66_65;
pub const HISTOGRAM_BINS: usize = 16;

impl ToyFeatureExtractor {
    pub fn new(n_filters: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Normal::new(0.0, 0.2).unwrap();
        let filters = (0..n_filters)
            .map(|_| std::array::from_fn(|_| w.sample(&mut rng)))
            .collect();
        let biases = (0..n_filters).map(|_| rng.random_range(-0.2..0.2)).collect();
        Self { filters, biases }
    }
}

impl Default for ToyFeatureExtractor {
    fn default() -> Self {
        Self::new(16, TOY_EXTRACTOR_SEED)
    }
}

impl FeatureExtractor for ToyFeatureExtractor {
    fn name(&self) -> &str {
        "toy-conv-hist"
    }

    fn dim(&self) -> usize {
        2 * self.filters.len() + HISTOGRAM_BINS
    }

    fn embed(&self, image: &[f32], height: usize, width: usize) -> Result<Vec<f64>> {
        if image.len() != height * width || height < 5 || width < 5 {
            return Err(Error::Shape(format!("toy extractor needs a >= 5x5 image, got {} values for {height}x{width}", image.len())));
        }
        let mut out = Vec::with_capacity(self.dim());
        for (f, &b) in self.filters.iter().zip(&self.biases) {
            let (mut sum, mut max, mut cnt) = (0.0, 0.0f64, 0usize);
            for r in (0..=height - 5).step_by(2) {
                for c in (0..=width - 5).step_by(2) {
                    let mut acc = b;
                    for kr in 0..5 {
                        for kc in 0..5 {
                            acc += f[kr * 5 + kc] * image[(r + kr) * width + c + kc] as f64;
                        }
                    }
                    let a = acc.max(0.0);
                    sum += a;
                    max = max.max(a);
                    cnt += 1;
                }
            }
            out.push(sum / cnt as f64);
            out.push(max);
        }
        let mut hist = [0.0; HISTOGRAM_BINS];
        for &v in image {
            let pos = ((v as f64 + 1.0) / 2.0 * HISTOGRAM_BINS as f64).floor();
            hist[(pos.max(0.0) as usize).min(HISTOGRAM_BINS - 1)] += 1.0;
        }
        out.extend(hist.iter().map(|h| h / image.len() as f64));
        Ok(out)
    }
}

/// Precomputed features read from a file: `u32 count, u32 d`, then
/// `count·d` little-endian f32 values.
pub fn read_feature_file(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Integrity {
        record: path.display().to_string(),
        msg,
    };
    if bytes.len() < 8 {
        return Err(bad("feature file shorter than its header".into()));
    }
    let count = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + count * d * 4 {
        return Err(bad(format!("{} bytes for {count} vectors of dimension {d}", bytes.len())));
    }
    Ok(bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect::<Vec<_>>()
        .chunks(d.max(1))
        .map(<[f64]>::to_vec)
        .collect())
}

pub fn write_feature_file(path: &Path, feats: &[Vec<f64>]) -> Result<()> {
    let d = feats.first().map_or(0, Vec::len);
    let mut bytes = Vec::with_capacity(8 + feats.len() * d * 4);
    bytes.extend_from_slice(&(feats.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(d as u32).to_le_bytes());
    for v in feats {
        if v.len() != d {
            return Err(Error::Shape("feature vectors differ in length".into()));
        }
        v.iter().for_each(|x| bytes.extend_from_slice(&(*x as f32).to_le_bytes()));
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `‖f(a) − f(b)‖ / √d` under `extractor`. A labeled stand-in for a learned
/// perceptual metric.
pub fn perceptual_distance(a: &[f32], b: &[f32], height: usize, width: usize, extractor: &dyn FeatureExtractor) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("perceptual distance of {} vs {} pixel images", a.len(), b.len())));
    }
    let fa = extractor.embed(a, height, width)?;
    let fb = extractor.embed(b, height, width)?;
    Ok((sqdist(&fa, &fb) / fa.len() as f64).sqrt())
}

/// Non-lesion tissue below this normalized intensity counts as background.
pub const BRAIN_FLOOR: f32 = -0.8;

/// Intensity separating lesions from tissue: the midpoint of the mean
/// lesion intensity and the mean non-lesion tissue intensity over all
/// lesion slices of `real`.
pub fn hyperintense_threshold(real: &[SliceRecord]) -> Result<f32> {
    let (mut ls, mut ln, mut bs, mut bn) = (0.0f64, 0usize, 0.0f64, 0usize);
    for r in real.iter().filter(|r| r.pathology == 1) {
        for (&v, &m) in r.image.iter().zip(&r.mask) {
            if m > 0.0 {
                ls += v as f64;
                ln += 1;
            } else if v > BRAIN_FLOOR {
                bs += v as f64;
                bn += 1;
            }
        }
    }
    if ln == 0 || bn == 0 {
        return Err(Error::Degenerate("no lesion slices to calibrate the hyperintensity threshold".into()));
    }
    Ok(((ls / ln as f64 + bs / bn as f64) / 2.0) as f32)
}

/// IoU between the mask's lesion pixels and pixels brighter than `threshold`.
/// An empty union scores 0.
pub fn mask_image_iou(image: &[f32], mask: &[f32], threshold: f32) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&v, &m) in image.iter().zip(mask) {
        let a = m > 0.0;
        let b = v > threshold;
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSettings {
    pub kid_subset_size: usize,
    pub kid_subsets: usize,
    pub min_area: usize,
    /// Random real/generated pairs averaged by the perceptual proxy.
    pub perceptual_pairs: usize,
    pub seed: u64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            kid_subset_size: 50,
            kid_subsets: 20,
            min_area: DEFAULT_MIN_AREA,
            perceptual_pairs: 200,
            seed: 0,
        }
    }
}

/// One CSV row: `metric, value, std, n_real, n_gen, extractor, seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub value: f64,
    pub std: Option<f64>,
    pub n_real: usize,
    pub n_gen: usize,
    pub extractor: String,
    pub seed: u64,
}

pub fn lesion_features(records: &[SliceRecord], min_area: usize) -> Result<Vec<ShapeFeatures>> {
    let mut out = Vec::new();
    for r in records {
        out.extend(mask_features(&r.mask, r.height, r.width, min_area)?);
    }
    Ok(out)
}

fn as_vectors(f: &[ShapeFeatures]) -> Vec<Vec<f64>> {
    f.iter().map(ShapeFeatures::to_vec).collect()
}

/// Every metric between `real` and `gen` under one protocol.
pub fn evaluate(
    real: &[SliceRecord],
    gen: &[SliceRecord],
    extractor: &dyn FeatureExtractor,
    s: &MetricSettings,
) -> Result<Vec<MetricRow>> {
    let first = real.first().ok_or_else(|| Error::Input("no real records".into()))?;
    if gen.is_empty() {
        return Err(Error::Input("no generated records".into()));
    }
    let (h, w) = (first.height, first.width);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let row = |metric: &str, value: f64, std: Option<f64>, n_real: usize, n_gen: usize| MetricRow {
        metric: metric.into(),
        value,
        std,
        n_real,
        n_gen,
        extractor: extractor.name().into(),
        seed: s.seed,
    };
    let mut rows = Vec::new();

    let embed = |rs: &[SliceRecord]| -> Result<Vec<Vec<f64>>> { rs.iter().map(|r| extractor.embed(&r.image, h, w)).collect() };
    let fr = embed(real)?;
    let fg = embed(gen)?;
    let k = kid(&fr, &fg, s.kid_subset_size.min(fr.len()).min(fg.len()), s.kid_subsets, &mut rng)?;
    rows.push(row("kid", k.mean, Some(k.std), fr.len(), fg.len()));

    let pairs: Vec<f64> = (0..s.perceptual_pairs)
        .map(|_| {
            let a = &real[rng.random_range(0..real.len())];
            let b = &gen[rng.random_range(0..gen.len())];
            perceptual_distance(&a.image, &b.image, h, w, extractor)
        })
        .collect::<Result<_>>()?;
    if !pairs.is_empty() {
        let p = mean_std(&pairs);
        rows.push(row("perceptual_proxy", p.mean, Some(p.std), real.len(), gen.len()));
    }

    let lr = lesion_features(real, s.min_area)?;
    let lg = lesion_features(gen, s.min_area)?;
    if lr.len() >= 2 && lg.len() >= 2 {
        let (vr, vg) = (as_vectors(&lr), as_vectors(&lg));
        rows.push(row("mmd_mf", mmd_mf(&vr, &vg)?, None, lr.len(), lg.len()));
        for (f, name) in FEATURE_NAMES.iter().enumerate() {
            let a: Vec<f64> = vr.iter().map(|v| v[f]).collect();
            let b: Vec<f64> = vg.iter().map(|v| v[f]).collect();
            rows.push(row(&format!("w1_{name}"), wasserstein_1d(&a, &b)?, None, lr.len(), lg.len()));
        }
    } else {
        log::warn!("fewer than 2 lesion instances ({} real, {} generated); shape metrics skipped", lr.len(), lg.len());
    }
    Ok(rows)
}

/// Two disjoint halves of `real`, drawn by seeded shuffle.
pub fn split_halves(real: &[SliceRecord], seed: u64) -> Result<(Vec<SliceRecord>, Vec<SliceRecord>)> {
    if real.len() < 4 {
        return Err(Error::Config(format!("real-vs-real baseline needs >= 4 records, got {}", real.len())));
    }
    let mut idx: Vec<usize> = (0..real.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let half = real.len() / 2;
    let pick = |ix: &[usize]| ix.iter().map(|&i| real[i].clone()).collect::<Vec<_>>();
    Ok((pick(&idx[..half]), pick(&idx[half..2 * half])))
}

/// Runs [`evaluate`] between two disjoint halves of the real data.
pub fn real_vs_real_baseline(real: &[SliceRecord], extractor: &dyn FeatureExtractor, s: &MetricSettings) -> Result<Vec<MetricRow>> {
    let (a, b) = split_halves(real, s.seed)?;
    evaluate(&a, &b, extractor, s)
}

pub fn write_metric_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e.into(),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metric_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e.into(),
    })?;
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}
