//! Slice records, intensity normalization, z-binning, subject splits, the
//! synthetic toy cohort and the on-disk slice archive.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditionToken, DEFAULT_Z_BINS};
use crate::diffusion::JointSample;
use crate::error::{Error, Result};

pub const ARCHIVE_FORMAT: &str = "jointdiff-slices";
pub const ARCHIVE_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const DEFAULT_LO_PCT: f64 = 0.05;
pub const DEFAULT_HI_PCT: f64 = 99.5;

/// One axial slice with its lesion mask and conditioning metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub subject_id: String,
    pub z_index: usize,
    pub z_total: usize,
    pub z_bin: usize,
    pub pathology: u8,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    /// `-1` outside, `+1` on the lesion.
    pub mask: Vec<f32>,
}

impl SliceRecord {
    pub fn token(&self, n_z: usize) -> Result<ConditionToken> {
        ConditionToken::new(self.z_bin, self.pathology, n_z)
    }

    pub fn joint(&self) -> Result<JointSample<f32>> {
        JointSample::new(self.height, self.width, self.image.clone(), self.mask.clone())
    }

    pub fn key(&self) -> String {
        format!("{}@{}", self.subject_id, self.z_index)
    }

    /// Checks the record's internal invariants against `n_z` bins.
    pub fn validate(&self, n_z: usize) -> Result<()> {
        let key = self.key();
        let n = self.height * self.width;
        if self.image.len() != n || self.mask.len() != n {
            return Err(Error::Integrity {
                record: key,
                msg: format!("payload sizes {}/{} for {}x{}", self.image.len(), self.mask.len(), self.height, self.width),
            });
        }
        let expect = compute_z_bin(self.z_index, self.z_total, n_z)?;
        if self.z_bin != expect {
            return Err(Error::Validation(format!("{key}: z_bin {} but slice position gives {expect}", self.z_bin)));
        }
        if self.pathology > 1 {
            return Err(Error::Validation(format!("{key}: pathology flag {} not in {{0,1}}", self.pathology)));
        }
        if let Some(v) = self.mask.iter().find(|&&v| v != 1.0 && v != -1.0) {
            return Err(Error::Validation(format!("{key}: mask value {v} is not ±1")));
        }
        let has_lesion = self.mask.contains(&1.0);
        if has_lesion != (self.pathology == 1) {
            return Err(Error::Validation(format!(
                "{key}: pathology flag {} disagrees with mask (lesion pixels present: {has_lesion})",
                self.pathology
            )));
        }
        if let Some(v) = self.image.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("{key}: non-finite image value {v}")));
        }
        Ok(())
    }
}

pub fn validate_subject_id(id: &str) -> Result<()> {
    let ok = !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Validation(format!("subject id {id:?} must be non-empty [A-Za-z0-9._-]")))
    }
}

/// Percentile of sorted data with linear interpolation between order statistics.
pub fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Maps `[P_lo, P_hi]` linearly onto `[-1, 1]` and clamps the rest.
pub fn percentile_normalize(image: &[f32], lo_pct: f64, hi_pct: f64) -> Result<Vec<f32>> {
    if !(0.0..=100.0).contains(&lo_pct) || !(0.0..=100.0).contains(&hi_pct) || lo_pct >= hi_pct {
        return Err(Error::range("percentiles", format!("({lo_pct}, {hi_pct})"), "0 <= lo < hi <= 100"));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("image contains non-finite values".into()));
    }
    let mut sorted: Vec<f64> = image.iter().map(|&v| v as f64).collect();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() || sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::Degenerate("constant image cannot be percentile-normalized".into()));
    }
    let p_lo = percentile_sorted(&sorted, lo_pct);
    let p_hi = percentile_sorted(&sorted, hi_pct);
    if p_hi <= p_lo {
        return Err(Error::Degenerate(format!("percentiles coincide at {p_lo}")));
    }
    Ok(image
        .iter()
        .map(|&v| (2.0 * (v as f64 - p_lo) / (p_hi - p_lo) - 1.0).clamp(-1.0, 1.0) as f32)
        .collect())
}

pub fn compute_z_bin(z_index: usize, z_total: usize, n_z: usize) -> Result<usize> {
    if n_z == 0 {
        return Err(Error::range("n_z", n_z, ">= 1"));
    }
    if z_index >= z_total {
        return Err(Error::range("z_index", z_index, format!("[0, {z_total})")));
    }
    Ok((z_index * n_z / z_total).min(n_z - 1))
}

/// Subject ids in sorted order with a has-lesion flag each.
pub fn subjects(records: &[SliceRecord]) -> Vec<(String, bool)> {
    let mut map: BTreeMap<&str, bool> = BTreeMap::new();
    for r in records {
        *map.entry(&r.subject_id).or_default() |= r.pathology == 1;
    }
    map.into_iter().map(|(s, l)| (s.to_string(), l)).collect()
}

/// Subject-wise train/validation split, stratified by lesion status.
///
/// Every class with at least two subjects contributes `round(val_fraction·n)`
/// subjects to validation but always keeps one for training.
pub fn subject_split(records: &[SliceRecord], val_fraction: f64, seed: u64) -> Result<(Vec<SliceRecord>, Vec<SliceRecord>)> {
    if !(0.0..1.0).contains(&val_fraction) || val_fraction <= 0.0 {
        return Err(Error::range("val_fraction", val_fraction, "(0, 1)"));
    }
    let subs = subjects(records);
    if subs.len() < 2 {
        return Err(Error::Config(format!("subject split needs at least 2 subjects, found {}", subs.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val: HashSet<String> = HashSet::new();
    for class in [false, true] {
        let mut group: Vec<&String> = subs.iter().filter(|(_, l)| *l == class).map(|(s, _)| s).collect();
        group.shuffle(&mut rng);
        let n = group.len();
        let k = if n < 2 { 0 } else { ((val_fraction * n as f64).round() as usize).clamp(1, n - 1) };
        val.extend(group.into_iter().take(k).cloned());
    }
    if val.is_empty() {
        return Err(Error::Config("validation split is empty; need at least 2 subjects in one class".into()));
    }
    let (va, tr): (Vec<_>, Vec<_>) = records.iter().cloned().partition(|r| val.contains(&r.subject_id));
    check_disjoint(&tr, &va)?;
    Ok((tr, va))
}

/// Fails if any subject appears on both sides of a split.
pub fn check_disjoint(train: &[SliceRecord], val: &[SliceRecord]) -> Result<()> {
    let a: HashSet<&str> = train.iter().map(|r| r.subject_id.as_str()).collect();
    if let Some(r) = val.iter().find(|r| a.contains(r.subject_id.as_str())) {
        return Err(Error::Validation(format!("subject {} leaks across the train/val split", r.subject_id)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub n_subjects: usize,
    pub slices_per_subject: usize,
    #[serde(default = "default_toy_size")]
    pub image_size: usize,
    /// Probability that a subject carries a lesion.
    pub lesion_prob: f64,
    pub seed: u64,
    #[serde(default = "default_z_bins")]
    pub z_bins: usize,
}

fn default_toy_size() -> usize {
    32
}

fn default_z_bins() -> usize {
    DEFAULT_Z_BINS
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_subjects: 24,
            slices_per_subject: 16,
            image_size: 32,
            lesion_prob: 0.5,
            seed: 0,
            z_bins: DEFAULT_Z_BINS,
        }
    }
}

/// Raw intensity added inside lesions. Brain texture peaks at ±0.16 around
/// 0.55, so lesion pixels always sit above the brightest healthy tissue.
const LESION_DELTA: f64 = 0.45;
/// Raw range mapped onto `[-1, 1]` for toy slices. A fixed window keeps the
/// tissue level identical across slices, where per-slice percentiles would
/// stretch healthy tissue up whenever a lesion is tiny.
const TOY_WINDOW: (f64, f64) = (0.0, 1.2);

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

/// Synthetic cohort: an elliptical brain whose vertical extent grows with
/// slice position, low-frequency texture, and for lesion subjects a bright
/// ellipsoidal lesion spanning a run of neighbouring slices.
pub fn generate_toy_dataset(cfg: &ToyConfig) -> Result<Vec<SliceRecord>> {
    if cfg.n_subjects < 2 || cfg.slices_per_subject < 1 || cfg.image_size < 8 {
        return Err(Error::Config("toy dataset needs >= 2 subjects, >= 1 slice and image_size >= 8".into()));
    }
    if !(0.0..=1.0).contains(&cfg.lesion_prob) {
        return Err(Error::range("lesion_prob", cfg.lesion_prob, "[0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.image_size;
    let half = n as f64 / 2.0;
    let s = cfg.slices_per_subject;
    let noise = Normal::new(0.0, 0.01).unwrap();
    let mut out = Vec::with_capacity(cfg.n_subjects * s);
    for subj in 0..cfg.n_subjects {
        let id = format!("toy{subj:03}");
        let a0 = rng.random_range(0.62..0.78) * half;
        let b0 = rng.random_range(0.70..0.85) * half;
        let cx = half + rng.random_range(-1.0..1.0);
        let cy = half + rng.random_range(-1.0..1.0);
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.03..0.05),
                    rng.random_range(0.15..0.45),
                    rng.random_range(0.15..0.45),
                    rng.random_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        let lesion = rng.random_bool(cfg.lesion_prob).then(|| {
            let zc = rng.random_range(s as f64 * 0.25..s as f64 * 0.75);
            let span = rng.random_range(1.5..(s as f64 / 4.0).max(2.0));
            let r = rng.random_range(0.0..0.55);
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            (
                zc,
                span,
                (r * a0 * th.cos(), r * b0 * th.sin()),
                rng.random_range(0.09..0.16) * n as f64,
                rng.random_range(0.07..0.13) * n as f64,
                rng.random_range(0.0..std::f64::consts::PI),
            )
        });
        for z in 0..s {
            let zf = (z as f64 + 0.5) / s as f64;
            let brain = Ellipse {
                cx,
                cy,
                a: a0 * (0.8 + 0.2 * (std::f64::consts::PI * zf).sin()),
                b: b0 * (0.45 + 0.55 * zf),
                angle: 0.0,
            };
            let les = lesion.as_ref().and_then(|&(zc, span, (ox, oy), ra, rb, ang)| {
                let u = (z as f64 - zc) / span;
                (u.abs() < 1.0).then(|| {
                    let k = (1.0 - u * u).sqrt();
                    Ellipse {
                        cx: cx + ox,
                        cy: cy + oy * (0.45 + 0.55 * zf),
                        a: (ra * k).max(1.0),
                        b: (rb * k).max(1.0),
                        angle: ang,
                    }
                })
            });
            let mut raw = Vec::with_capacity(n * n);
            let mut mask = Vec::with_capacity(n * n);
            for yi in 0..n {
                for xi in 0..n {
                    let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
                    let inside = brain.contains(x, y);
                    let in_lesion = inside && les.as_ref().is_some_and(|e| e.contains(x, y));
                    let mut v = noise.sample(&mut rng);
                    if inside {
                        v += 0.55 + waves.iter().map(|&(amp, fx, fy, ph)| amp * (fx * x + fy * y + ph).sin()).sum::<f64>();
                    }
                    if in_lesion {
                        v += LESION_DELTA;
                    }
                    raw.push(v as f32);
                    mask.push(if in_lesion { 1.0 } else { -1.0 });
                }
            }
            let (w0, w1) = TOY_WINDOW;
            let image = raw.iter().map(|&v| (2.0 * (v as f64 - w0) / (w1 - w0) - 1.0).clamp(-1.0, 1.0) as f32).collect();
            let pathology = mask.contains(&1.0) as u8;
            out.push(SliceRecord {
                subject_id: id.clone(),
                z_index: z,
                z_total: s,
                z_bin: compute_z_bin(z, s, cfg.z_bins)?,
                pathology,
                height: n,
                width: n,
                image,
                mask,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    height: usize,
    width: usize,
    z_bins: usize,
    #[serde(default)]
    provenance: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    subject_id: String,
    z_index: usize,
    z_total: usize,
    z_bin: usize,
    pathology: u8,
    image: String,
    mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

fn write_payload(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    values.iter().for_each(|v| bytes.extend_from_slice(&v.to_le_bytes()));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a raw little-endian f32 payload, checking its length.
pub fn read_payload(path: &Path, expect: usize, record: &str) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expect * 4 {
        return Err(Error::Integrity {
            record: record.to_string(),
            msg: format!("payload {} has {} bytes, expected {}", path.display(), bytes.len(), expect * 4),
        });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Streams records into an archive directory; the manifest is written last.
pub struct ArchiveWriter {
    dir: PathBuf,
    header: ManifestHeader,
    entries: Vec<ManifestEntry>,
    seen: HashSet<(String, usize)>,
}

impl ArchiveWriter {
    pub fn create(dir: &Path, height: usize, width: usize, z_bins: usize, provenance: serde_json::Value) -> Result<Self> {
        fs::create_dir_all(dir.join("payload")).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            header: ManifestHeader {
                format: ARCHIVE_FORMAT.into(),
                version: ARCHIVE_VERSION,
                height,
                width,
                z_bins,
                provenance,
            },
            entries: Vec::new(),
            seen: HashSet::new(),
        })
    }

    pub fn push(&mut self, r: &SliceRecord, provenance: Option<serde_json::Value>) -> Result<()> {
        validate_subject_id(&r.subject_id)?;
        if (r.height, r.width) != (self.header.height, self.header.width) {
            return Err(Error::Shape(format!(
                "{}: {}x{} record in a {}x{} archive",
                r.key(),
                r.height,
                r.width,
                self.header.height,
                self.header.width
            )));
        }
        r.validate(self.header.z_bins)?;
        if !self.seen.insert((r.subject_id.clone(), r.z_index)) {
            return Err(Error::Validation(format!("duplicate record {}", r.key())));
        }
        let stem = format!("{}_{:05}", r.subject_id, r.z_index);
        let image = format!("payload/{stem}_image.f32");
        let mask = format!("payload/{stem}_mask.f32");
        write_payload(&self.dir.join(&image), &r.image)?;
        write_payload(&self.dir.join(&mask), &r.mask)?;
        self.entries.push(ManifestEntry {
            subject_id: r.subject_id.clone(),
            z_index: r.z_index,
            z_total: r.z_total,
            z_bin: r.z_bin,
            pathology: r.pathology,
            image,
            mask,
            provenance,
        });
        Ok(())
    }

    pub fn finish(self) -> Result<()> {
        let mut text = serde_json::to_string(&self.header).expect("header serializes");
        text.push('\n');
        for e in &self.entries {
            text.push_str(&serde_json::to_string(e).expect("entry serializes"));
            text.push('\n');
        }
        crate::checkpoint::write_atomic(&self.dir.join(MANIFEST_NAME), text.as_bytes())
    }
}

pub fn write_archive(dir: &Path, records: &[SliceRecord], z_bins: usize, provenance: serde_json::Value) -> Result<()> {
    let first = records.first().ok_or_else(|| Error::Input("cannot write an empty archive".into()))?;
    let mut w = ArchiveWriter::create(dir, first.height, first.width, z_bins, provenance)?;
    for r in records {
        w.push(r, None)?;
    }
    w.finish()
}

/// A parsed manifest; payloads are read lazily by [`records`](Self::records).
#[derive(Debug, Clone)]
pub struct ArchiveReader {
    dir: PathBuf,
    header: ManifestHeader,
    entries: Vec<ManifestEntry>,
}

impl ArchiveReader {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let perr = |line: usize, msg: String| Error::Parse {
            path: path.clone(),
            line,
            msg,
        };
        let mut lines = BufReader::new(f).lines();
        let first = lines
            .next()
            .ok_or_else(|| perr(1, "empty manifest".into()))?
            .map_err(|e| Error::io(&path, e))?;
        let header: ManifestHeader = serde_json::from_str(&first).map_err(|e| perr(1, format!("header: {e}")))?;
        if header.format != ARCHIVE_FORMAT {
            return Err(perr(1, format!("format {:?} is not {ARCHIVE_FORMAT:?}", header.format)));
        }
        if header.version != ARCHIVE_VERSION {
            return Err(Error::Version {
                found: header.version,
                expected: ARCHIVE_VERSION,
            });
        }
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in lines.enumerate() {
            let lineno = i + 2;
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line).map_err(|err| perr(lineno, err.to_string()))?;
            validate_subject_id(&e.subject_id).map_err(|err| perr(lineno, err.to_string()))?;
            let bin = compute_z_bin(e.z_index, e.z_total, header.z_bins).map_err(|err| perr(lineno, format!("z_index: {err}")))?;
            if bin != e.z_bin {
                return Err(perr(lineno, format!("z_bin {} inconsistent with z_index {}/{}", e.z_bin, e.z_index, e.z_total)));
            }
            if e.pathology > 1 {
                return Err(perr(lineno, format!("pathology {} not in {{0,1}}", e.pathology)));
            }
            if !seen.insert((e.subject_id.clone(), e.z_index)) {
                return Err(Error::Validation(format!(
                    "{}:{lineno}: duplicate record {}@{}",
                    path.display(),
                    e.subject_id,
                    e.z_index
                )));
            }
            entries.push(e);
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            header,
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.header.height, self.header.width)
    }

    pub fn z_bins(&self) -> usize {
        self.header.z_bins
    }

    pub fn provenance(&self) -> &serde_json::Value {
        &self.header.provenance
    }

    /// Per-record provenance blocks, in manifest order.
    pub fn record_provenance(&self) -> impl Iterator<Item = Option<&serde_json::Value>> {
        self.entries.iter().map(|e| e.provenance.as_ref())
    }

    fn load(&self, e: &ManifestEntry) -> Result<SliceRecord> {
        let key = format!("{}@{}", e.subject_id, e.z_index);
        let n = self.header.height * self.header.width;
        let r = SliceRecord {
            subject_id: e.subject_id.clone(),
            z_index: e.z_index,
            z_total: e.z_total,
            z_bin: e.z_bin,
            pathology: e.pathology,
            height: self.header.height,
            width: self.header.width,
            image: read_payload(&self.dir.join(&e.image), n, &key)?,
            mask: read_payload(&self.dir.join(&e.mask), n, &key)?,
        };
        r.validate(self.header.z_bins)?;
        Ok(r)
    }

    /// Streams records one at a time in manifest order.
    pub fn records(&self) -> impl Iterator<Item = Result<SliceRecord>> + '_ {
        self.entries.iter().map(|e| self.load(e))
    }

    pub fn read_all(&self) -> Result<Vec<SliceRecord>> {
        self.records().collect()
    }
}

pub fn read_archive(dir: &Path) -> Result<Vec<SliceRecord>> {
    ArchiveReader::open(dir)?.read_all()
}

/// One row of the ingestion metadata table.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestRow {
    subject_id: String,
    z_index: usize,
    z_total: usize,
    pathology: u8,
    height: usize,
    width: usize,
    image: String,
    mask: String,
}

/// Builds an archive from pre-extracted raw slices.
///
/// `table` is a CSV with columns `subject_id, z_index, z_total, pathology,
/// height, width, image, mask`; the last two are paths (relative to the
/// table) of raw little-endian f32 payloads. Images are percentile
/// normalized; masks are binarized at 0.5 when stored as {0,1} and at 0
/// otherwise.
pub fn ingest(table: &Path, out: &Path, z_bins: usize) -> Result<usize> {
    let base = table.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_path(table).map_err(|e| Error::Parse {
        path: table.to_path_buf(),
        line: 1,
        msg: e.to_string(),
    })?;
    let mut writer: Option<ArchiveWriter> = None;
    let mut count = 0;
    for (i, row) in rdr.deserialize::<IngestRow>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            path: table.to_path_buf(),
            line,
            msg: e.to_string(),
        })?;
        let key = format!("{}@{}", row.subject_id, row.z_index);
        let n = row.height * row.width;
        let raw = read_payload(&base.join(&row.image), n, &key)?;
        let raw_mask = read_payload(&base.join(&row.mask), n, &key)?;
        let zero_one = raw_mask.iter().all(|&v| (0.0..=1.0).contains(&v));
        let cut = if zero_one { 0.5 } else { 0.0 };
        let mask: Vec<f32> = raw_mask.iter().map(|&v| if v > cut { 1.0 } else { -1.0 }).collect();
        let image = percentile_normalize(&raw, DEFAULT_LO_PCT, DEFAULT_HI_PCT).map_err(|e| match e {
            Error::Degenerate(m) => Error::Degenerate(format!("{key}: {m}")),
            other => other,
        })?;
        let rec = SliceRecord {
            z_bin: compute_z_bin(row.z_index, row.z_total, z_bins)?,
            subject_id: row.subject_id,
            z_index: row.z_index,
            z_total: row.z_total,
            pathology: row.pathology,
            height: row.height,
            width: row.width,
            image,
            mask,
        };
        if writer.is_none() {
            let prov = serde_json::json!({ "source": "ingest", "table": table.display().to_string() });
            writer = Some(ArchiveWriter::create(out, rec.height, rec.width, z_bins, prov)?);
        }
        writer.as_mut().unwrap().push(&rec, None)?;
        count += 1;
    }
    writer.ok_or_else(|| Error::Input(format!("{}: metadata table has no rows", table.display())))?.finish()?;
    Ok(count)
}

/// Subjects present in `records`, for logging.
pub fn subject_set(records: &[SliceRecord]) -> BTreeSet<&str> {
    records.iter().map(|r| r.subject_id.as_str()).collect()
}

/// Writes raw little-endian f32 values, for preparing ingestion inputs.
pub fn write_raw_f32(path: &Path, values: &[f32]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for v in values {
        f.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
