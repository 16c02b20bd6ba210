//! Deterministic synthetic subjects, rendered phantom volumes, and
//! subject-level train/val/test cohorts.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::textkit;

pub const MMSE_MIN: u32 = 2;
pub const MMSE_MAX: u32 = 30;
pub const AGE_RANGE: (f64, f64) = (54.4, 90.9);
pub const NOISE_STD: f64 = 0.05;

pub const BRAIN_INTENSITY: f32 = 0.6;
pub const VENTRICLE_INTENSITY: f32 = 0.1;
pub const HIPPOCAMPUS_INTENSITY: f32 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Diagnosis {
    NC,
    MCI,
    AD,
}

impl Diagnosis {
    /// Canonical order, also the zero-shot tie-break order.
    pub const ALL: [Diagnosis; 3] = [Diagnosis::NC, Diagnosis::MCI, Diagnosis::AD];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            Diagnosis::NC => "NC",
            Diagnosis::MCI => "MCI",
            Diagnosis::AD => "AD",
        }
    }
}

impl fmt::Display for Diagnosis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Diagnosis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NC" => Ok(Diagnosis::NC),
            "MCI" => Ok(Diagnosis::MCI),
            "AD" => Ok(Diagnosis::AD),
            other => Err(Error::invalid(format!("unknown diagnosis `{other}`"))),
        }
    }
}

/// Parse a comma-separated class list such as `NC,MCI,AD`.
pub fn parse_class_list(s: &str) -> Result<Vec<Diagnosis>> {
    let classes = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(Diagnosis::from_str)
        .collect::<Result<Vec<_>>>()?;
    if classes.is_empty() {
        return Err(Error::invalid("empty class list"));
    }
    Ok(classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Biomarker {
    Hippocampal,
    Ventricular,
    WholeBrain,
    Entorhinal,
    Fusiform,
    MidTemporal,
}

impl Biomarker {
    /// Report order.
    pub const ALL: [Biomarker; 6] = [
        Biomarker::Hippocampal,
        Biomarker::Ventricular,
        Biomarker::WholeBrain,
        Biomarker::Entorhinal,
        Biomarker::Fusiform,
        Biomarker::MidTemporal,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Biomarker::Hippocampal => "hippocampal",
            Biomarker::Ventricular => "ventricular",
            Biomarker::WholeBrain => "whole_brain",
            Biomarker::Entorhinal => "entorhinal",
            Biomarker::Fusiform => "fusiform",
            Biomarker::MidTemporal => "mid_temporal",
        }
    }

    /// Clause name as it appears in reports.
    pub fn report_label(self) -> &'static str {
        match self {
            Biomarker::Hippocampal => "Hippocampal volume",
            Biomarker::Ventricular => "Ventricular size",
            Biomarker::WholeBrain => "Whole brain volume",
            Biomarker::Entorhinal => "Entorhinal cortex volume",
            Biomarker::Fusiform => "Fusiform gyrus volume",
            Biomarker::MidTemporal => "Middle temporal gyrus volume",
        }
    }

    /// Shrinks with disease progression; only the ventricles enlarge.
    pub fn atrophy_sensitive(self) -> bool {
        self != Biomarker::Ventricular
    }
}

impl FromStr for Biomarker {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let k = s.trim().to_ascii_lowercase().replace('-', "_");
        Biomarker::ALL
            .into_iter()
            .find(|b| b.key() == k)
            .ok_or_else(|| Error::invalid(format!("unknown biomarker `{s}`")))
    }
}

/// Six regional volumes in mm³.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Biomarkers {
    pub hippocampal: f64,
    pub ventricular: f64,
    pub whole_brain: f64,
    pub entorhinal: f64,
    pub fusiform: f64,
    pub mid_temporal: f64,
}

impl Biomarkers {
    pub fn get(&self, b: Biomarker) -> f64 {
        match b {
            Biomarker::Hippocampal => self.hippocampal,
            Biomarker::Ventricular => self.ventricular,
            Biomarker::WholeBrain => self.whole_brain,
            Biomarker::Entorhinal => self.entorhinal,
            Biomarker::Fusiform => self.fusiform,
            Biomarker::MidTemporal => self.mid_temporal,
        }
    }

    pub fn set(&mut self, b: Biomarker, v: f64) {
        match b {
            Biomarker::Hippocampal => self.hippocampal = v,
            Biomarker::Ventricular => self.ventricular = v,
            Biomarker::WholeBrain => self.whole_brain = v,
            Biomarker::Entorhinal => self.entorhinal = v,
            Biomarker::Fusiform => self.fusiform = v,
            Biomarker::MidTemporal => self.mid_temporal = v,
        }
    }

    fn map(&self, mut f: impl FnMut(Biomarker, f64) -> f64) -> Self {
        let mut out = *self;
        for b in Biomarker::ALL {
            out.set(b, f(b, self.get(b)));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub age: f64,
    pub sex: Sex,
    pub diagnosis: Diagnosis,
    pub mmse: u32,
    pub biomarkers: Biomarkers,
    pub seed: u64,
}

impl SubjectRecord {
    pub fn validate(&self) -> Result<()> {
        if !(MMSE_MIN..=MMSE_MAX).contains(&self.mmse) {
            return Err(Error::invalid(format!("mmse {} outside [2, 30]", self.mmse)));
        }
        for b in Biomarker::ALL {
            let v = self.biomarkers.get(b);
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("biomarker {} = {v}", b.key())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub means: Biomarkers,
    /// Per-biomarker std as a fraction of the mean.
    pub cv: f64,
    pub mmse_range: (u32, u32),
}

/// Class-conditional sampling distributions.
///
/// A per-subject latent severity `z ~ N(0, 1)` drives the MMSE score (higher
/// severity, lower score within the class range) and is mixed into every
/// biomarker with weight `severity_corr`, so each marginal keeps exactly the
/// configured mean and `cv · mean` std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionProfile {
    pub nc: ClassProfile,
    pub mci: ClassProfile,
    pub ad: ClassProfile,
    pub severity_corr: f64,
}

impl DistributionProfile {
    pub fn class(&self, d: Diagnosis) -> &ClassProfile {
        match d {
            Diagnosis::NC => &self.nc,
            Diagnosis::MCI => &self.mci,
            Diagnosis::AD => &self.ad,
        }
    }
}

pub const NC_MEANS: Biomarkers = Biomarkers {
    hippocampal: 7323.0,
    ventricular: 43767.0,
    whole_brain: 968731.0,
    entorhinal: 4056.0,
    fusiform: 18775.0,
    mid_temporal: 17048.0,
};

impl Default for DistributionProfile {
    fn default() -> Self {
        let scaled = |atrophy: f64, ventricle: f64| {
            NC_MEANS.map(|b, v| {
                if b.atrophy_sensitive() {
                    v * atrophy
                } else {
                    v * ventricle
                }
            })
        };
        let cv = 0.08;
        Self {
            nc: ClassProfile {
                means: NC_MEANS,
                cv,
                mmse_range: (27, 30),
            },
            mci: ClassProfile {
                means: scaled(0.85, 1.30),
                cv,
                mmse_range: (20, 27),
            },
            ad: ClassProfile {
                means: scaled(0.70, 1.60),
                cv,
                mmse_range: (2, 20),
            },
            severity_corr: 0.5,
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draw one subject. The random stream depends only on `seed`, so the same
/// seed under different diagnoses gives the "same" subject at another stage.
pub fn gen_subject(seed: u64, diagnosis: Diagnosis, profile: &DistributionProfile) -> SubjectRecord {
    let class = profile.class(diagnosis);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let age = rng.random_range(AGE_RANGE.0..=AGE_RANGE.1);
    let age = (age * 10.0).round() / 10.0;
    let sex = if rng.random_bool(0.5) { Sex::M } else { Sex::F };
    let severity = standard_normal(&mut rng);
    let rho = profile.severity_corr.clamp(0.0, 1.0);
    let resid = (1.0 - rho * rho).sqrt();
    let biomarkers = class.means.map(|b, mean| {
        let eps = standard_normal(&mut rng);
        let dir = if b.atrophy_sensitive() { -severity } else { severity };
        let z = rho * dir + resid * eps;
        (mean * (1.0 + class.cv * z)).round().max(1.0)
    });
    let unit = Normal::new(0.0, 1.0).expect("standard normal").cdf(severity);
    let (lo, hi) = class.mmse_range;
    let mmse = (hi as f64 - unit * (hi - lo) as f64).round() as u32;
    SubjectRecord {
        subject_id: format!("X{seed:016x}"),
        age,
        sex,
        diagnosis,
        mmse: mmse.clamp(MMSE_MIN, MMSE_MAX),
        biomarkers,
        seed,
    }
}

/// Volume shape together with the patch tiling it must admit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub patch: [usize; 3],
}

impl Grid {
    pub const DESK: Grid = Grid {
        dims: [32, 32, 32],
        patch: [4, 8, 8],
    };
    pub const PAPER: Grid = Grid {
        dims: [128, 128, 128],
        patch: [4, 16, 16],
    };

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if self.patch[a] == 0 || self.dims[a] == 0 || !self.dims[a].is_multiple_of(self.patch[a]) {
                return Err(Error::invalid(format!(
                    "dims {:?} not divisible by patch {:?}",
                    self.dims, self.patch
                )));
            }
        }
        Ok(())
    }

    /// Patches along each axis.
    pub fn patch_grid(&self) -> [usize; 3] {
        [
            self.dims[0] / self.patch[0],
            self.dims[1] / self.patch[1],
            self.dims[2] / self.patch[2],
        ]
    }

    pub fn num_patches(&self) -> usize {
        self.patch_grid().iter().product()
    }

    pub fn patch_voxels(&self) -> usize {
        self.patch.iter().product()
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Dense D×H×W intensity grid, C order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub dims: [usize; 3],
    pub voxels: Vec<f32>,
}

impl Volume3D {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            voxels: vec![0.0; dims.iter().product()],
        }
    }

    #[inline]
    pub fn index(&self, d: usize, h: usize, w: usize) -> usize {
        (d * self.dims[1] + h) * self.dims[2] + w
    }

    pub fn get(&self, d: usize, h: usize, w: usize) -> f32 {
        self.voxels[self.index(d, h, w)]
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.voxels.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(dims: [usize; 3], bytes: &[u8]) -> Result<Self> {
        let n: usize = dims.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::invalid(format!(
                "volume payload has {} bytes, expected {}",
                bytes.len(),
                n * 4
            )));
        }
        let voxels = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self { dims, voxels })
    }
}

/// Axis-aligned ellipsoid in normalized coordinates (each axis spans [-1, 1]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Fraction of the normalized [-1, 1]³ cube it occupies.
    fn volume_fraction(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.semi_axes.iter().product::<f64>() / 8.0
    }
}

/// Anatomy of a rendered phantom.
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub brain: Ellipsoid,
    pub ventricle: Ellipsoid,
    pub hippocampi: [Ellipsoid; 2],
}

const BRAIN_AXES: [f64; 3] = [0.82, 0.86, 0.78];
const VENTRICLE_SHAPE: [f64; 3] = [0.5, 0.35, 0.45];
const VENTRICLE_FRACTION: (f64, f64) = (0.0, 1.6e-6);
const VENTRICLE_MAX_FRACTION: f64 = 0.16;
const HIPPOCAMPUS_FRACTION_PER_MM3: f64 = 4.0e-6;

fn scaled_to_fraction(shape: [f64; 3], center: [f64; 3], fraction: f64) -> Ellipsoid {
    let unit = Ellipsoid {
        center,
        semi_axes: shape,
    };
    let k = (fraction / unit.volume_fraction()).cbrt();
    Ellipsoid {
        center,
        semi_axes: [shape[0] * k, shape[1] * k, shape[2] * k],
    }
}

impl Phantom {
    /// Ventricle volume fraction is affine in the ventricular biomarker;
    /// total hippocampal fraction is linear in the hippocampal biomarker.
    pub fn from_record(record: &SubjectRecord) -> Self {
        let b = &record.biomarkers;
        let vent_fraction = (VENTRICLE_FRACTION.0 + VENTRICLE_FRACTION.1 * b.ventricular).min(VENTRICLE_MAX_FRACTION);
        let hip_fraction = (HIPPOCAMPUS_FRACTION_PER_MM3 * b.hippocampal).min(0.06) / 2.0;
        let blob = |side: f64| scaled_to_fraction([1.0, 1.0, 1.0], [-0.4, 0.5 * side, 0.1], hip_fraction);
        Self {
            brain: Ellipsoid {
                center: [0.0; 3],
                semi_axes: BRAIN_AXES,
            },
            ventricle: scaled_to_fraction(VENTRICLE_SHAPE, [0.0, 0.0, 0.0], vent_fraction),
            hippocampi: [blob(-1.0), blob(1.0)],
        }
    }
}

/// Normalized coordinate of voxel center `i` on an axis of length `n`.
#[inline]
pub fn voxel_coord(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

/// Per-scan noise seed; scan 0 uses the record seed itself.
pub fn scan_seed(record_seed: u64, scan_index: u32) -> u64 {
    if scan_index == 0 {
        record_seed
    } else {
        splitmix64(record_seed ^ (scan_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }
}

pub fn render_volume(record: &SubjectRecord, grid: &Grid) -> Result<Volume3D> {
    render_scan(record, grid, 0)
}

/// Render scan `scan_index` of a subject: same anatomy, independent noise.
pub fn render_scan(record: &SubjectRecord, grid: &Grid, scan_index: u32) -> Result<Volume3D> {
    grid.validate()?;
    record.validate()?;
    let phantom = Phantom::from_record(record);
    let [nd, nh, nw] = grid.dims;
    let mut vol = Volume3D::zeros(grid.dims);
    let mut rng = ChaCha8Rng::seed_from_u64(scan_seed(record.seed, scan_index));
    let mut i = 0;
    for d in 0..nd {
        let z = voxel_coord(d, nd);
        for h in 0..nh {
            let y = voxel_coord(h, nh);
            for w in 0..nw {
                let x = voxel_coord(w, nw);
                let p = [z, y, x];
                // painter's order: brain, hippocampi, ventricle
                let mut base = 0.0f32;
                if phantom.brain.contains(p) {
                    base = BRAIN_INTENSITY;
                }
                if phantom.hippocampi.iter().any(|e| e.contains(p)) {
                    base = HIPPOCAMPUS_INTENSITY;
                }
                if phantom.ventricle.contains(p) {
                    base = VENTRICLE_INTENSITY;
                }
                let noise = standard_normal(&mut rng) * NOISE_STD;
                vol.voxels[i] = (base as f64 + noise).clamp(0.0, 1.0) as f32;
                i += 1;
            }
        }
    }
    Ok(vol)
}

/// Voxels under `threshold` inside the brain ellipsoid.
pub fn dark_voxel_count(vol: &Volume3D, record: &SubjectRecord, threshold: f32) -> usize {
    let brain = Phantom::from_record(record).brain;
    let [nd, nh, nw] = vol.dims;
    let mut count = 0;
    for d in 0..nd {
        for h in 0..nh {
            for w in 0..nw {
                let p = [voxel_coord(d, nd), voxel_coord(h, nh), voxel_coord(w, nw)];
                if brain.contains(p) && vol.get(d, h, w) < threshold {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Patch-grid mask (C order over the patch grid) of patches that contain at
/// least `min_fraction` ventricle voxels.
pub fn ventricle_patch_mask(record: &SubjectRecord, grid: &Grid, min_fraction: f64) -> Vec<bool> {
    let ventricle = Phantom::from_record(record).ventricle;
    let [gd, gh, gw] = grid.patch_grid();
    let [pd, ph, pw] = grid.patch;
    let [nd, nh, nw] = grid.dims;
    let mut mask = Vec::with_capacity(grid.num_patches());
    for a in 0..gd {
        for b in 0..gh {
            for c in 0..gw {
                let mut inside = 0usize;
                for d in a * pd..(a + 1) * pd {
                    for h in b * ph..(b + 1) * ph {
                        for w in c * pw..(c + 1) * pw {
                            let p = [voxel_coord(d, nd), voxel_coord(h, nh), voxel_coord(w, nw)];
                            if ventricle.contains(p) {
                                inside += 1;
                            }
                        }
                    }
                }
                mask.push(inside as f64 >= min_fraction * grid.patch_voxels() as f64 && inside > 0);
            }
        }
    }
    mask
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortConfig {
    /// Subjects per class, canonical class order.
    pub subjects_per_class: [usize; 3],
    pub scans_per_subject: u32,
    /// Train/val/test fractions over subjects, applied per class.
    pub split: [f64; 3],
    pub grid: Grid,
    pub seed: u64,
    #[serde(default)]
    pub profile: DistributionProfile,
}

impl CohortConfig {
    /// 300 subjects per class, one scan each: 600/150/150 scans.
    pub fn desk(seed: u64) -> Self {
        Self {
            subjects_per_class: [300, 300, 300],
            scans_per_subject: 1,
            split: [2.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0],
            grid: Grid::DESK,
            seed,
            profile: DistributionProfile::default(),
        }
    }

    /// 376 training subjects × 4 scans = 1504 training scans at 128³.
    pub fn paper(seed: u64) -> Self {
        Self {
            subjects_per_class: [125, 155, 190],
            scans_per_subject: 4,
            split: [0.8, 0.1, 0.1],
            grid: Grid::PAPER,
            seed,
            profile: DistributionProfile::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.split.iter().sum();
        if self.split.iter().any(|f| !(0.0..=1.0).contains(f)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions {:?} must be in [0, 1] and sum to 1",
                self.split
            )));
        }
        if self.scans_per_subject == 0 {
            return Err(Error::config("scans_per_subject must be >= 1"));
        }
        self.grid.validate().map_err(|e| Error::config(e.to_string()))
    }

    /// Subjects per split for a class of `n` subjects.
    pub fn split_counts(&self, n: usize) -> [usize; 3] {
        let train = (((n as f64) * self.split[0]).round() as usize).min(n);
        let val = (((n as f64) * self.split[1]).round() as usize).min(n - train);
        [train, val, n - train - val]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub scan_id: String,
    pub scan_index: u32,
    pub split: Split,
    pub record: SubjectRecord,
    /// Paths are relative to the manifest directory.
    pub volume: String,
    pub sidecar: String,
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub config: CohortConfig,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeSidecar {
    pub subject_id: String,
    pub scan_id: String,
    pub dims: [usize; 3],
    pub dtype: String,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METADATA_FILE: &str = "metadata.jsonl";

/// Lay out a cohort in memory: records, split tags, and relative paths.
pub fn gen_cohort(config: &CohortConfig) -> Result<CohortManifest> {
    config.validate()?;
    let mut entries = Vec::new();
    let mut subject_index = 0u64;
    let mut per_split: Vec<Vec<ManifestEntry>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for (ci, &diagnosis) in Diagnosis::ALL.iter().enumerate() {
        let n = config.subjects_per_class[ci];
        let counts = config.split_counts(n);
        for k in 0..n {
            let split = if k < counts[0] {
                Split::Train
            } else if k < counts[0] + counts[1] {
                Split::Val
            } else {
                Split::Test
            };
            let seed = splitmix64(config.seed.wrapping_mul(0x1000_0000_01B3) ^ subject_index);
            let mut record = gen_subject(seed, diagnosis, &config.profile);
            record.subject_id = format!("S{subject_index:03}");
            subject_index += 1;
            for s in 0..config.scans_per_subject {
                let scan_id = if config.scans_per_subject == 1 {
                    record.subject_id.clone()
                } else {
                    format!("{}_{s}", record.subject_id)
                };
                per_split[split as usize].push(ManifestEntry {
                    volume: format!("volumes/{scan_id}.f32"),
                    sidecar: format!("volumes/{scan_id}.json"),
                    report: format!("reports/{scan_id}.txt"),
                    scan_id,
                    scan_index: s,
                    split,
                    record: record.clone(),
                });
            }
        }
    }
    for part in per_split {
        entries.extend(part);
    }
    Ok(CohortManifest {
        config: config.clone(),
        entries,
    })
}

/// Generate a cohort and write volumes, sidecars, reports, metadata, and the
/// manifest under `out`.
pub fn write_cohort(config: &CohortConfig, out: &Path) -> Result<CohortManifest> {
    let manifest = gen_cohort(config)?;
    for sub in ["volumes", "reports"] {
        fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out.join(sub), e))?;
    }
    let mut metadata = String::new();
    let mut last_subject = None;
    for entry in &manifest.entries {
        let vol = render_scan(&entry.record, &config.grid, entry.scan_index)?;
        write_file(&out.join(&entry.volume), &vol.to_le_bytes())?;
        let sidecar = VolumeSidecar {
            subject_id: entry.record.subject_id.clone(),
            scan_id: entry.scan_id.clone(),
            dims: config.grid.dims,
            dtype: "float32-le".to_string(),
        };
        write_file(&out.join(&entry.sidecar), &serde_json::to_vec_pretty(&sidecar)?)?;
        let report = textkit::render_report(&entry.record);
        write_file(&out.join(&entry.report), report.text.as_bytes())?;
        if last_subject.as_deref() != Some(entry.record.subject_id.as_str()) {
            metadata.push_str(&serde_json::to_string(&entry.record)?);
            metadata.push('\n');
            last_subject = Some(entry.record.subject_id.clone());
        }
    }
    write_file(&out.join(METADATA_FILE), metadata.as_bytes())?;
    write_file(&out.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

impl CohortManifest {
    /// Read a manifest from a file or from a directory holding `manifest.json`.
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
        let manifest: CohortManifest = serde_json::from_slice(&bytes)?;
        let base = file.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.check_disjoint()?;
        Ok((manifest, base))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashMap::new();
        for e in &self.entries {
            if let Some(prev) = seen.insert(e.record.subject_id.as_str(), e.split) {
                if prev != e.split {
                    return Err(Error::invalid(format!(
                        "subject {} appears in both {prev:?} and {:?}",
                        e.record.subject_id, e.split
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load_volume(&self, base: &Path, entry: &ManifestEntry) -> Result<Volume3D> {
        let path = base.join(&entry.volume);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Volume3D::from_le_bytes(self.config.grid.dims, &bytes)
    }

    pub fn load_report(&self, base: &Path, entry: &ManifestEntry) -> Result<String> {
        let path = base.join(&entry.report);
        fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
    }

    pub fn find_scan(&self, id: &str) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.scan_id == id)
            .or_else(|| self.entries.iter().find(|e| e.record.subject_id == id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(seed: u64, d: Diagnosis) -> SubjectRecord {
        gen_subject(seed, d, &DistributionProfile::default())
    }

    #[test]
    fn nc_profile_means_are_the_reference_values() {
        let p = DistributionProfile::default();
        assert_eq!(p.nc.means.hippocampal, 7323.0);
        assert_eq!(p.nc.means.ventricular, 43767.0);
        assert_eq!(p.nc.means.whole_brain, 968731.0);
        assert_eq!(p.nc.means.entorhinal, 4056.0);
        assert_eq!(p.nc.means.fusiform, 18775.0);
        assert_eq!(p.nc.means.mid_temporal, 17048.0);
    }

    #[test]
    fn class_means_are_ordered() {
        let p = DistributionProfile::default();
        for b in Biomarker::ALL {
            let (nc, mci, ad) = (p.nc.means.get(b), p.mci.means.get(b), p.ad.means.get(b));
            if b.atrophy_sensitive() {
                assert!(nc > mci && mci > ad, "{b:?}");
            } else {
                assert!(nc < mci && mci < ad, "{b:?}");
            }
        }
    }

    #[test]
    fn gen_subject_is_deterministic() {
        assert_eq!(record(7, Diagnosis::AD), record(7, Diagnosis::AD));
        assert_ne!(record(7, Diagnosis::AD), record(8, Diagnosis::AD));
    }

    #[test]
    fn monte_carlo_mean_matches_profile() {
        let p = DistributionProfile::default();
        let n = 10_000;
        let mean = (0..n)
            .map(|s| gen_subject(s, Diagnosis::AD, &p).biomarkers.hippocampal)
            .sum::<f64>()
            / n as f64;
        let target = p.ad.means.hippocampal;
        assert!((mean - target).abs() / target < 0.02, "{mean} vs {target}");
    }

    #[test]
    fn records_satisfy_invariants() {
        let p = DistributionProfile::default();
        for s in 0..2000 {
            for d in Diagnosis::ALL {
                let r = gen_subject(s, d, &p);
                r.validate().unwrap();
                let (lo, hi) = p.class(d).mmse_range;
                assert!((lo..=hi).contains(&r.mmse));
                assert!(r.age >= AGE_RANGE.0 && r.age <= AGE_RANGE.1);
            }
        }
    }

    #[test]
    fn unknown_diagnosis_rejected() {
        assert!("XYZ".parse::<Diagnosis>().is_err());
        assert_eq!("mci".parse::<Diagnosis>().unwrap(), Diagnosis::MCI);
        assert!(parse_class_list("NC,,AD").unwrap().len() == 2);
        assert!(parse_class_list("").is_err());
    }

    #[test]
    fn render_clipped_and_deterministic() {
        let r = record(3, Diagnosis::MCI);
        let v = render_volume(&r, &Grid::DESK).unwrap();
        let (lo, hi) = v.min_max();
        assert!(lo >= 0.0 && hi <= 1.0);
        assert_eq!(v, render_volume(&r, &Grid::DESK).unwrap());
        assert_ne!(v, render_scan(&r, &Grid::DESK, 1).unwrap());
    }

    #[test]
    fn render_rejects_bad_grid() {
        let r = record(3, Diagnosis::NC);
        let bad = Grid {
            dims: [30, 32, 32],
            patch: [4, 8, 8],
        };
        assert!(render_volume(&r, &bad).is_err());
    }

    #[test]
    fn larger_ventricle_gives_more_dark_voxels() {
        let r = record(11, Diagnosis::NC);
        let mut r2 = r.clone();
        r2.biomarkers.ventricular *= 2.0;
        let a = dark_voxel_count(&render_volume(&r, &Grid::DESK).unwrap(), &r, 0.2);
        let b = dark_voxel_count(&render_volume(&r2, &Grid::DESK).unwrap(), &r2, 0.2);
        assert!(b > a, "{a} vs {b}");
    }

    #[test]
    fn cohort_split_arithmetic() {
        let cfg = CohortConfig {
            subjects_per_class: [8, 8, 8],
            scans_per_subject: 1,
            split: [0.75, 0.125, 0.125],
            grid: Grid::DESK,
            seed: 1,
            profile: DistributionProfile::default(),
        };
        let m = gen_cohort(&cfg).unwrap();
        let count = |s| m.split(s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (18, 3, 3));
        m.check_disjoint().unwrap();
    }

    #[test]
    fn paper_preset_has_1504_training_scans() {
        let m = gen_cohort(&CohortConfig::paper(0)).unwrap();
        assert_eq!(m.split(Split::Train).count(), 1504);
        m.check_disjoint().unwrap();
    }

    #[test]
    fn bad_split_fractions_rejected() {
        let mut cfg = CohortConfig::desk(0);
        cfg.split = [0.5, 0.2, 0.2];
        assert!(matches!(gen_cohort(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn volume_bytes_roundtrip() {
        let r = record(5, Diagnosis::AD);
        let v = render_volume(&r, &Grid::DESK).unwrap();
        let back = Volume3D::from_le_bytes(v.dims, &v.to_le_bytes()).unwrap();
        assert_eq!(v, back);
        assert!(Volume3D::from_le_bytes(v.dims, &[0u8; 7]).is_err());
    }
}
