//! Synthetic two-view pairs and the pair-record file format.
//!
//! # File layout
//!
//! All integers and floats little-endian.
//!
//! ```text
//! magic    8 bytes  "CNETPAIR"
//! version  u32      1
//! count    u64      number of records
//! per record:
//!   id          u64
//!   provenance  u8   0 = synthetic, 1 = file
//!   n           u64
//!   coords      f64 × 4n   (u, v, u', v') per correspondence
//!   intrinsics  f64 × 8    (fx, fy, cx, cy) of view 1 then view 2
//!   has_truth   u8
//!   if has_truth:
//!     r         f64 × 9    column-major
//!     t         f64 × 3
//!     e         f64 × 9    column-major, unit norm
//!     e_rank2   u8
//!     labels    u8 × n     0 or 1
//! checksum u32      CRC-32 of every preceding byte
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::epipolar::{
    correspondence_distance, essential_from_pose, label_inliers, CameraIntrinsics,
    CorrespondenceSet, EssentialMatrix, GeometryError, RelativePose, DEFAULT_INLIER_THRESHOLD,
    MIN_CORRESPONDENCES,
};
use crate::exec::Execution;
use crate::format::{write_atomic, FormatError, Reader, Writer};
use crate::rng;

pub const MAGIC: &[u8; 8] = b"CNETPAIR";
pub const VERSION: u32 = 1;

/// Pose resamples before generation gives up.
const MAX_POSE_ATTEMPTS: usize = 100;
/// Point draws per requested correspondence before a pose is abandoned.
const POINT_ATTEMPTS_PER_CORRESPONDENCE: usize = 50;
/// Outlier re-draws before generation gives up.
const MAX_OUTLIER_REDRAWS: usize = 10_000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthesis configuration: {0}")]
    InvalidConfig(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}:{line}: {reason}")]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub n_correspondences: usize,
    pub outlier_fraction: f64,
    pub pixel_noise_sigma: f64,
    pub fov_degrees: f64,
    pub image_width: f64,
    pub image_height: f64,
    pub depth_near: f64,
    pub depth_far: f64,
    pub rotation_max_degrees: f64,
    pub translation_max: f64,
    /// Re-draw outliers until they sit at least the labeling threshold away
    /// from their epipolar line. Disable to get weak labels, where some
    /// injected outliers are labeled as inliers.
    pub redraw_outliers: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_correspondences: 2000,
            outlier_fraction: 0.7,
            pixel_noise_sigma: 0.5,
            fov_degrees: 60.0,
            image_width: 640.0,
            image_height: 480.0,
            depth_near: 4.0,
            depth_far: 12.0,
            rotation_max_degrees: 20.0,
            translation_max: 1.5,
            redraw_outliers: true,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// Correspondence counts offered for keypoint sweeps.
    pub const KEYPOINT_SWEEP: [usize; 3] = [500, 1000, 2000];

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidConfig(m.into()));
        if self.n_correspondences < 16 {
            return bad("n_correspondences must be at least 16");
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return bad("outlier_fraction must lie in [0, 1)");
        }
        if !(self.pixel_noise_sigma >= 0.0 && self.pixel_noise_sigma.is_finite()) {
            return bad("pixel_noise_sigma must be finite and non-negative");
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) {
            return bad("fov_degrees must lie in (0, 180)");
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return bad("image size must be positive");
        }
        if !(self.depth_near > 0.0 && self.depth_near < self.depth_far && self.depth_far.is_finite()) {
            return bad("depth range must satisfy 0 < near < far");
        }
        if !(self.rotation_max_degrees >= 0.0 && self.rotation_max_degrees <= 180.0) {
            return bad("rotation_max_degrees must lie in [0, 180]");
        }
        if !(self.translation_max > 0.0 && self.translation_max.is_finite()) {
            return bad("translation_max must be positive");
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, DataError> {
        Ok(CameraIntrinsics::from_fov(self.image_width, self.image_height, self.fov_degrees)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub pose: RelativePose,
    /// `essential_from_pose(pose)`.
    pub essential: EssentialMatrix,
    /// Labels at [`DEFAULT_INLIER_THRESHOLD`].
    pub labels: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRecord {
    pub id: u64,
    pub correspondences: CorrespondenceSet,
    pub intrinsics: [CameraIntrinsics; 2],
    pub truth: Option<GroundTruth>,
    pub provenance: Provenance,
}

impl PairRecord {
    pub fn len(&self) -> usize {
        self.correspondences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correspondences.is_empty()
    }

    /// Builds a record, deriving `E*` and labels from the pose.
    pub fn with_pose(
        id: u64,
        correspondences: CorrespondenceSet,
        intrinsics: [CameraIntrinsics; 2],
        pose: Option<RelativePose>,
        provenance: Provenance,
    ) -> Self {
        let truth = pose.map(|pose| {
            let essential = essential_from_pose(&pose);
            let labels = label_inliers(&correspondences, &essential, DEFAULT_INLIER_THRESHOLD);
            GroundTruth {
                pose,
                essential,
                labels,
            }
        });
        Self {
            id,
            correspondences,
            intrinsics,
            truth,
            provenance,
        }
    }

    /// Checks every stored invariant; used after loading.
    pub fn validate(&self) -> Result<(), String> {
        if self.len() < MIN_CORRESPONDENCES {
            return Err(format!(
                "record has {} correspondences, need at least {MIN_CORRESPONDENCES}",
                self.len()
            ));
        }
        for k in &self.intrinsics {
            k.validate().map_err(|e| e.to_string())?;
        }
        if let Some(gt) = &self.truth {
            let r = gt.pose.r;
            if (r.transpose() * r - Matrix3::identity()).abs().max() > 1e-10
                || (r.determinant() - 1.0).abs() > 1e-10
            {
                return Err("ground-truth rotation is not orthonormal".into());
            }
            if (gt.pose.t.norm() - 1.0).abs() > 1e-12 {
                return Err("ground-truth translation is not unit length".into());
            }
            let expected = essential_from_pose(&gt.pose);
            if gt.essential.sign_invariant_distance(&expected) > 1e-10 {
                return Err("ground-truth essential matrix disagrees with the pose".into());
            }
            if gt.labels.len() != self.len() {
                return Err("label count differs from correspondence count".into());
            }
            if gt.labels != label_inliers(&self.correspondences, &gt.essential, DEFAULT_INLIER_THRESHOLD) {
                return Err("labels disagree with the ground-truth essential matrix".into());
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.truth.as_ref().map(|t| t.labels.as_slice())
    }
}

fn random_rotation(r: &mut impl Rng, max_degrees: f64) -> Rotation3<f64> {
    let axis = Vector3::new(
        r.sample::<f64, _>(StandardNormal),
        r.sample::<f64, _>(StandardNormal),
        r.sample::<f64, _>(StandardNormal),
    );
    let angle = r.random_range(0.0..=max_degrees.to_radians());
    match Unit::try_new(axis, 1e-12) {
        Some(axis) => Rotation3::from_axis_angle(&axis, angle),
        None => Rotation3::identity(),
    }
}

fn random_translation(r: &mut impl Rng, max: f64) -> Vector3<f64> {
    loop {
        let d = Vector3::new(
            r.sample::<f64, _>(StandardNormal),
            r.sample::<f64, _>(StandardNormal),
            r.sample::<f64, _>(StandardNormal),
        );
        let n = d.norm();
        if n > 1e-9 {
            return d / n * r.random_range(0.25 * max..=max);
        }
    }
}

fn in_image(px: [f64; 2], cfg: &SynthConfig) -> bool {
    px[0] >= 0.0 && px[0] < cfg.image_width && px[1] >= 0.0 && px[1] < cfg.image_height
}

/// Noise-free pixel correspondences for one pose, or `None` when the views
/// overlap too little.
fn sample_points(
    cfg: &SynthConfig,
    k: &CameraIntrinsics,
    pose_r: &Matrix3<f64>,
    pose_t: &Vector3<f64>,
    r: &mut impl Rng,
) -> Option<Vec<[f64; 4]>> {
    let n = cfg.n_correspondences;
    let (near3, far3) = (cfg.depth_near.powi(3), cfg.depth_far.powi(3));
    let mut out = Vec::with_capacity(n);
    for _ in 0..n * POINT_ATTEMPTS_PER_CORRESPONDENCE {
        if out.len() == n {
            break;
        }
        // Volume-uniform depth inside the frustum.
        let z = (near3 + r.random::<f64>() * (far3 - near3)).cbrt();
        let px = [r.random_range(0.0..cfg.image_width), r.random_range(0.0..cfg.image_height)];
        let [nx, ny] = k.normalize(px);
        let p = Vector3::new(nx * z, ny * z, z);
        let q = pose_r * p + pose_t;
        if q.z <= 1e-6 {
            continue;
        }
        let px2 = k.denormalize([q.x / q.z, q.y / q.z]);
        if !in_image(px2, cfg) {
            continue;
        }
        out.push([px[0], px[1], px2[0], px2[1]]);
    }
    (out.len() == n).then_some(out)
}

/// One synthetic pair drawn from `rng`.
pub fn generate_pair(cfg: &SynthConfig, id: u64, r: &mut impl Rng) -> Result<PairRecord, DataError> {
    cfg.validate()?;
    let k = cfg.intrinsics()?;
    let n = cfg.n_correspondences;
    let mut found = None;
    for _ in 0..MAX_POSE_ATTEMPTS {
        let rot = random_rotation(r, cfg.rotation_max_degrees);
        let t = random_translation(r, cfg.translation_max);
        if let Some(pts) = sample_points(cfg, &k, rot.matrix(), &t, r) {
            found = Some((RelativePose::new(*rot.matrix(), t)?, pts));
            break;
        }
    }
    let (pose, mut px) = found.ok_or_else(|| {
        DataError::Generation(format!(
            "no pose with enough view overlap after {MAX_POSE_ATTEMPTS} attempts"
        ))
    })?;
    let essential = essential_from_pose(&pose);

    if cfg.pixel_noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.pixel_noise_sigma).expect("sigma validated");
        for c in &mut px {
            for v in c.iter_mut() {
                *v += noise.sample(r);
            }
        }
    }

    let n_out = (cfg.outlier_fraction * n as f64).ceil() as usize;
    let outliers = rand::seq::index::sample(r, n, n_out);
    for i in outliers.iter() {
        let mut redraws = 0;
        loop {
            let p2 = [r.random_range(0.0..cfg.image_width), r.random_range(0.0..cfg.image_height)];
            let a = k.normalize([px[i][0], px[i][1]]);
            let b = k.normalize(p2);
            let c = [a[0], a[1], b[0], b[1]];
            if !cfg.redraw_outliers || correspondence_distance(essential.matrix(), &c) >= DEFAULT_INLIER_THRESHOLD {
                px[i][2] = p2[0];
                px[i][3] = p2[1];
                break;
            }
            redraws += 1;
            if redraws > MAX_OUTLIER_REDRAWS {
                return Err(DataError::Generation("could not place an outlier off its epipolar line".into()));
            }
        }
    }

    let coords = px
        .iter()
        .map(|c| {
            let a = k.normalize([c[0], c[1]]);
            let b = k.normalize([c[2], c[3]]);
            [a[0], a[1], b[0], b[1]]
        })
        .collect();
    Ok(PairRecord::with_pose(
        id,
        CorrespondenceSet::new(coords)?,
        [k, k],
        Some(pose),
        Provenance::Synthetic,
    ))
}

/// `count` pairs with per-pair seeds `derive(seed, i)`; record ids are those
/// seeds.
pub fn generate_pairs(
    cfg: &SynthConfig,
    count: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<PairRecord>, DataError> {
    cfg.validate()?;
    exec.map(count, |i| {
        let s = rng::derive(seed, i as u64);
        generate_pair(cfg, s, &mut rng::from_seed(s))
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    /// 60 / 20 / 20 split of `total`; the remainder goes to training.
    pub fn from_total(total: usize) -> Self {
        let val = total / 5;
        let test = total / 5;
        Self {
            train: total - val - test,
            val,
            test,
        }
    }
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Writes `train.bin`, `val.bin` and `test.bin` under `dir`. Split `s` uses
/// base seed `derive(seed, s)`, so shards never share pair seeds.
pub fn generate_dataset(
    cfg: &SynthConfig,
    counts: SplitCounts,
    seed: u64,
    dir: &Path,
    exec: Execution,
) -> Result<Vec<PathBuf>, DataError> {
    fs::create_dir_all(dir).map_err(FormatError::from)?;
    let mut paths = Vec::new();
    for (s, (name, count)) in SPLIT_NAMES
        .iter()
        .zip([counts.train, counts.val, counts.test])
        .enumerate()
    {
        let records = generate_pairs(cfg, count, rng::derive(seed, s as u64), exec)?;
        let path = dir.join(format!("{name}.bin"));
        save_pairs(&path, &records)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn pairs_to_bytes(records: &[PairRecord]) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.u64(records.len() as u64);
    for rec in records {
        w.u64(rec.id);
        w.u8(match rec.provenance {
            Provenance::Synthetic => 0,
            Provenance::File => 1,
        });
        w.u64(rec.len() as u64);
        for c in rec.correspondences.iter() {
            w.f64s(c);
        }
        for k in &rec.intrinsics {
            w.f64s(&[k.fx, k.fy, k.cx, k.cy]);
        }
        match &rec.truth {
            None => w.u8(0),
            Some(gt) => {
                w.u8(1);
                w.f64s(gt.pose.r.as_slice());
                w.f64s(gt.pose.t.as_slice());
                w.f64s(gt.essential.matrix().as_slice());
                w.u8(gt.essential.is_rank2() as u8);
                for &l in &gt.labels {
                    w.u8(l as u8);
                }
            }
        }
    }
    w.into_checked()
}

fn read_flag(r: &mut Reader<'_>, what: &str) -> Result<bool, FormatError> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(r.invalid(format!("{what} must be 0 or 1, found {v}"))),
    }
}

pub fn pairs_from_bytes(buf: &[u8]) -> Result<Vec<PairRecord>, FormatError> {
    let mut r = Reader::new(buf);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: VERSION,
        });
    }
    // Smallest possible record: id, provenance, n, intrinsics, flag.
    let count = r.len_prefix(8 + 1 + 8 + 64 + 1)?;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        r.record = Some(i);
        let start = r.offset();
        let id = r.u64()?;
        let provenance = match r.u8()? {
            0 => Provenance::Synthetic,
            1 => Provenance::File,
            v => return Err(r.invalid(format!("unknown provenance tag {v}"))),
        };
        let n = r.len_prefix(32)?;
        let flat = r.f64s(4 * n)?;
        let coords: Vec<[f64; 4]> = flat.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect();
        let k = r.f64s(8)?;
        let intrinsics = [
            CameraIntrinsics { fx: k[0], fy: k[1], cx: k[2], cy: k[3] },
            CameraIntrinsics { fx: k[4], fy: k[5], cx: k[6], cy: k[7] },
        ];
        let correspondences = CorrespondenceSet::new(coords).map_err(|e| r.invalid(e.to_string()))?;
        let truth = if read_flag(&mut r, "ground-truth flag")? {
            let rm = Matrix3::from_column_slice(&r.f64s(9)?);
            let t = Vector3::from_column_slice(&r.f64s(3)?);
            let em = Matrix3::from_column_slice(&r.f64s(9)?);
            let rank2 = read_flag(&mut r, "rank-2 flag")?;
            let essential = EssentialMatrix::from_normalized(em, rank2).map_err(|e| r.invalid(e.to_string()))?;
            let raw = r.bytes(n)?;
            let mut labels = Vec::with_capacity(n);
            for &b in raw {
                match b {
                    0 | 1 => labels.push(b == 1),
                    v => return Err(r.invalid(format!("label must be 0 or 1, found {v}"))),
                }
            }
            Some(GroundTruth {
                pose: RelativePose { r: rm, t },
                essential,
                labels,
            })
        } else {
            None
        };
        let rec = PairRecord {
            id,
            correspondences,
            intrinsics,
            truth,
            provenance,
        };
        rec.validate().map_err(|reason| FormatError::Invalid {
            record: Some(i),
            offset: start,
            reason,
        })?;
        out.push(rec);
    }
    r.record = None;
    r.finish()?;
    Ok(out)
}

pub fn save_pairs(path: &Path, records: &[PairRecord]) -> Result<(), FormatError> {
    write_atomic(path, &pairs_to_bytes(records))?;
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairRecord>, FormatError> {
    pairs_from_bytes(&fs::read(path)?)
}

fn parse_floats(path: &Path, line_no: usize, fields: &[&str], want: usize) -> Result<Vec<f64>, DataError> {
    let err = |reason: String| DataError::Parse {
        path: path.to_owned(),
        line: line_no,
        reason,
    };
    if fields.len() != want {
        return Err(err(format!("expected {want} numbers, found {}", fields.len())));
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("`{f}` is not a finite number")))
        })
        .collect()
}

fn meaningful_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.split('#').next().unwrap_or("").trim();
        (!l.is_empty()).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

/// Intrinsics and optional pose read from a sidecar file.
///
/// ```text
/// # comments allowed
/// K1 fx fy cx cy
/// K2 fx fy cx cy
/// R  r00 r01 r02 r10 r11 r12 r20 r21 r22   (row-major)
/// t  tx ty tz
/// ```
///
/// `K2` defaults to `K1`; `R` and `t` must appear together.
#[derive(Debug, Clone, PartialEq)]
pub struct Sidecar {
    pub intrinsics: [CameraIntrinsics; 2],
    pub pose: Option<RelativePose>,
}

pub fn parse_sidecar(path: &Path, text: &str) -> Result<Sidecar, DataError> {
    let mut k1 = None;
    let mut k2 = None;
    let mut rot = None;
    let mut t = None;
    for (line, f) in meaningful_lines(text) {
        let err = |reason: String| DataError::Parse {
            path: path.to_owned(),
            line,
            reason,
        };
        match f[0] {
            "K1" | "K2" => {
                let v = parse_floats(path, line, &f[1..], 4)?;
                let k = CameraIntrinsics::new(v[0], v[1], v[2], v[3]).map_err(|e| err(e.to_string()))?;
                if f[0] == "K1" { k1 = Some(k) } else { k2 = Some(k) }
            }
            "R" => rot = Some(Matrix3::from_row_slice(&parse_floats(path, line, &f[1..], 9)?)),
            "t" => t = Some(Vector3::from_column_slice(&parse_floats(path, line, &f[1..], 3)?)),
            other => return Err(err(format!("unknown key `{other}`"))),
        }
    }
    let missing = |reason: &str| DataError::Parse {
        path: path.to_owned(),
        line: 0,
        reason: reason.into(),
    };
    let k1 = k1.ok_or_else(|| missing("missing K1"))?;
    let pose = match (rot, t) {
        (Some(r), Some(t)) => Some(RelativePose::new(r, t).map_err(|e| missing(&e.to_string()))?),
        (None, None) => None,
        _ => return Err(missing("R and t must be given together")),
    };
    Ok(Sidecar {
        intrinsics: [k1, k2.unwrap_or(k1)],
        pose,
    })
}

/// Reads one pair from a text file of `u v u' v'` lines.
///
/// With a sidecar the coordinates are pixels and get normalized with its
/// intrinsics; without one they are taken as already normalized.
pub fn import_text(path: &Path, sidecar: Option<&Path>, id: u64) -> Result<PairRecord, DataError> {
    let read = |p: &Path| {
        fs::read_to_string(p).map_err(|e| DataError::Format(FormatError::Io(e)))
    };
    let text = read(path)?;
    let side = sidecar.map(|p| read(p).and_then(|t| parse_sidecar(p, &t))).transpose()?;
    let mut coords = Vec::new();
    for (line, f) in meaningful_lines(&text) {
        let v = parse_floats(path, line, &f, 4)?;
        coords.push(match &side {
            Some(s) => {
                let a = s.intrinsics[0].normalize([v[0], v[1]]);
                let b = s.intrinsics[1].normalize([v[2], v[3]]);
                [a[0], a[1], b[0], b[1]]
            }
            None => [v[0], v[1], v[2], v[3]],
        });
    }
    if coords.len() < MIN_CORRESPONDENCES {
        return Err(DataError::Parse {
            path: path.to_owned(),
            line: 0,
            reason: format!("{} correspondences, need at least {MIN_CORRESPONDENCES}", coords.len()),
        });
    }
    let unit = CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0 };
    let (intrinsics, pose) = match side {
        Some(s) => (s.intrinsics, s.pose),
        None => ([unit, unit], None),
    };
    Ok(PairRecord::with_pose(
        id,
        CorrespondenceSet::new(coords)?,
        intrinsics,
        pose,
        Provenance::File,
    ))
}

/// FNV-1a over the serialized record, for shard-disjointness checks.
pub fn record_checksum(rec: &PairRecord) -> u64 {
    let bytes = pairs_to_bytes(std::slice::from_ref(rec));
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in &bytes[20..] {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
