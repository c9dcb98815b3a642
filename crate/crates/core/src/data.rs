//! Hyperspectral cubes, groundtruth grids, split masks and their file formats.
//!
//! All formats are little endian with an 8-byte magic:
//!
//! | file         | magic      | header                 | payload                                   |
//! |--------------|------------|------------------------|-------------------------------------------|
//! | cube         | `HSICUBE1` | H, W, L (u32)          | H·W·L f64, pixel-major, band-minor         |
//! | groundtruth  | `HSICGT01` | H, W, K (u32)          | H·W u16 labels, then K `\n`-terminated names |
//! | split mask   | `HSICMSK1` | H, W (u32)             | H·W u8 (0 neither, 1 train, 2 test)       |
//! | feature map  | `HSICFEA1` | H, W, d (u32)          | H·W·d f64, pixel-major                    |
//! | prediction   | `HSICPRD1` | H, W (u32)             | H·W u16 labels, 0 = not predicted         |

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{self, ByteReader, ByteWriter};
use crate::classify::{FeatureMap, PredictionMap};
use crate::error::{Error, Result};

const CUBE_MAGIC: &[u8; 8] = b"HSICUBE1";
const GT_MAGIC: &[u8; 8] = b"HSICGT01";
const MASK_MAGIC: &[u8; 8] = b"HSICMSK1";
const FEATURE_MAGIC: &[u8; 8] = b"HSICFEA1";
const PRED_MAGIC: &[u8; 8] = b"HSICPRD1";

/// H×W×L reflectance grid stored band-interleaved-by-pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperCube {
    height: usize,
    width: usize,
    bands: usize,
    values: Vec<f64>,
}

impl HyperCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::InvalidArgument("cube dimensions must be ≥ 1".into()));
        }
        let n = binio::checked_product(&[height, width, bands])?;
        if values.len() != n {
            return Err(Error::shape("cube values", n, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cube values"));
        }
        Ok(Self {
            height,
            width,
            bands,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Spectrum of the pixel with row-major index `index`.
    pub fn spectrum(&self, index: usize) -> &[f64] {
        &self.values[index * self.bands..(index + 1) * self.bands]
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        self.spectrum(row * self.width + col)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_magic(CUBE_MAGIC);
        w.u32(binio::dim_u32(self.height, "H")?);
        w.u32(binio::dim_u32(self.width, "W")?);
        w.u32(binio::dim_u32(self.bands, "L")?);
        w.f64s(&self.values);
        Ok(w.bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CUBE_MAGIC)?;
        let (h, w, l) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let n = binio::checked_product(&[h, w, l])?;
        let values = r.f64_vec(n)?;
        r.finish()?;
        Self::new(h, w, l, values)
    }
}

pub fn save_cube(cube: &HyperCube, path: &Path) -> Result<()> {
    binio::write_file(path, &cube.to_bytes()?)
}

pub fn load_cube(path: &Path) -> Result<HyperCube> {
    HyperCube::from_bytes(&binio::read_file(path)?)
}

/// Sample layout of a headerless raw dump.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interleave {
    /// pixel-major, band-minor
    Bip,
    /// band-major
    Bsq,
    /// row, then band, then column
    Bil,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RawType {
    F32,
    F64,
    U16,
}

impl RawType {
    fn size(self) -> usize {
        match self {
            RawType::F32 => 4,
            RawType::F64 => 8,
            RawType::U16 => 2,
        }
    }
}

/// Builds a cube from a headerless little-endian dump with explicit dims.
pub fn cube_from_raw(
    bytes: &[u8],
    height: usize,
    width: usize,
    bands: usize,
    dtype: RawType,
    interleave: Interleave,
) -> Result<HyperCube> {
    let n = binio::checked_product(&[height, width, bands])?;
    let expected = n.checked_mul(dtype.size()).ok_or(Error::DimensionOverflow)?;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::TrailingData {
            expected,
            actual: bytes.len(),
        });
    }
    let raw: Vec<f64> = match dtype {
        RawType::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        RawType::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        RawType::U16 => bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
    };
    let mut values = vec![0.0; n];
    for r in 0..height {
        for c in 0..width {
            for b in 0..bands {
                let src = match interleave {
                    Interleave::Bip => (r * width + c) * bands + b,
                    Interleave::Bsq => (b * height + r) * width + c,
                    Interleave::Bil => (r * bands + b) * width + c,
                };
                values[(r * width + c) * bands + b] = raw[src];
            }
        }
    }
    HyperCube::new(height, width, bands, values)
}

/// H×W label grid, 0 = unlabeled, 1..=K classes.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    height: usize,
    width: usize,
    labels: Vec<u16>,
    class_names: Vec<String>,
}

impl GroundTruth {
    pub fn new(height: usize, width: usize, labels: Vec<u16>, class_names: Vec<String>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("groundtruth dimensions must be ≥ 1".into()));
        }
        if labels.len() != binio::checked_product(&[height, width])? {
            return Err(Error::shape("groundtruth labels", height * width, labels.len()));
        }
        let k = class_names.len();
        if let Some(&bad) = labels.iter().find(|&&l| l as usize > k) {
            return Err(Error::Malformed(format!("label {bad} exceeds class count {k}")));
        }
        if let Some(name) = class_names.iter().find(|n| n.contains('\n')) {
            return Err(Error::InvalidArgument(format!(
                "class name {name:?} contains a newline"
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
            class_names,
        })
    }

    /// Groundtruth with generated class names `class 1..=K`.
    pub fn with_default_names(height: usize, width: usize, labels: Vec<u16>, num_classes: usize) -> Result<Self> {
        let names = (1..=num_classes).map(|k| format!("class {k}")).collect();
        Self::new(height, width, labels, names)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }

    pub fn num_labeled(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    /// Labeled pixel count per class, index `k-1` for class `k`.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in self.labels.iter().filter(|&&l| l != 0) {
            counts[l as usize - 1] += 1;
        }
        counts
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_magic(GT_MAGIC);
        w.u32(binio::dim_u32(self.height, "H")?);
        w.u32(binio::dim_u32(self.width, "W")?);
        w.u32(binio::dim_u32(self.num_classes(), "K")?);
        for &l in &self.labels {
            w.u16(l);
        }
        for name in &self.class_names {
            w.bytes.extend_from_slice(name.as_bytes());
            w.bytes.push(b'\n');
        }
        Ok(w.bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(GT_MAGIC)?;
        let (h, w, k) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let labels = r.u16_vec(binio::checked_product(&[h, w])?)?;
        let tail = std::str::from_utf8(r.rest()).map_err(|e| Error::Malformed(format!("class names: {e}")))?;
        let names: Vec<String> = if k == 0 {
            if !tail.is_empty() {
                return Err(Error::Malformed("class names present with K = 0".into()));
            }
            Vec::new()
        } else {
            let body = tail
                .strip_suffix('\n')
                .ok_or_else(|| Error::Malformed("class names not newline terminated".into()))?;
            body.split('\n').map(str::to_owned).collect()
        };
        if names.len() != k {
            return Err(Error::Malformed(format!(
                "expected {k} class names, found {}",
                names.len()
            )));
        }
        Self::new(h, w, labels, names)
    }
}

pub fn save_groundtruth(gt: &GroundTruth, path: &Path) -> Result<()> {
    binio::write_file(path, &gt.to_bytes()?)
}

pub fn load_groundtruth(path: &Path) -> Result<GroundTruth> {
    GroundTruth::from_bytes(&binio::read_file(path)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Neither,
    Train,
    Test,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::Neither => 0,
            Role::Train => 1,
            Role::Test => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Role::Neither),
            1 => Ok(Role::Train),
            2 => Ok(Role::Test),
            other => Err(Error::Malformed(format!("unknown mask code {other}"))),
        }
    }
}

/// Per-pixel train/test designation.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitMask {
    height: usize,
    width: usize,
    roles: Vec<Role>,
}

impl SplitMask {
    pub fn new(height: usize, width: usize, roles: Vec<Role>) -> Result<Self> {
        if roles.len() != binio::checked_product(&[height, width])? {
            return Err(Error::shape("mask roles", height * width, roles.len()));
        }
        Ok(Self { height, width, roles })
    }

    /// Every labeled pixel marked Test, nothing trained.
    pub fn all_test(gt: &GroundTruth) -> Self {
        let roles = gt
            .labels()
            .iter()
            .map(|&l| if l == 0 { Role::Neither } else { Role::Test })
            .collect();
        Self {
            height: gt.height(),
            width: gt.width(),
            roles,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn role(&self, row: usize, col: usize) -> Role {
        self.roles[row * self.width + col]
    }

    pub fn set_role(&mut self, row: usize, col: usize, role: Role) {
        self.roles[row * self.width + col] = role;
    }

    pub fn is_train(&self, row: usize, col: usize) -> bool {
        self.role(row, col) == Role::Train
    }

    pub fn count(&self, role: Role) -> usize {
        self.roles.iter().filter(|&&r| r == role).count()
    }

    /// Fails unless Train/Test appear only on labeled pixels.
    pub fn check_against(&self, gt: &GroundTruth) -> Result<()> {
        if (self.height, self.width) != (gt.height(), gt.width()) {
            return Err(Error::shape(
                "mask vs groundtruth",
                format!("{}x{}", gt.height(), gt.width()),
                format!("{}x{}", self.height, self.width),
            ));
        }
        if let Some(i) = self
            .roles
            .iter()
            .zip(gt.labels())
            .position(|(&r, &l)| r != Role::Neither && l == 0)
        {
            return Err(Error::Malformed(format!("pixel {i} is unlabeled but has a split role")));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::with_magic(MASK_MAGIC);
        w.u32(binio::dim_u32(self.height, "H")?);
        w.u32(binio::dim_u32(self.width, "W")?);
        w.bytes.extend(self.roles.iter().map(|r| r.code()));
        Ok(w.bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(MASK_MAGIC)?;
        let (h, w) = (r.u32()? as usize, r.u32()? as usize);
        let raw = r.take(binio::checked_product(&[h, w])?)?;
        r.finish()?;
        let roles = raw.iter().map(|&c| Role::from_code(c)).collect::<Result<_>>()?;
        Self::new(h, w, roles)
    }
}

pub fn save_mask(mask: &SplitMask, path: &Path) -> Result<()> {
    binio::write_file(path, &mask.to_bytes()?)
}

pub fn load_mask(path: &Path) -> Result<SplitMask> {
    SplitMask::from_bytes(&binio::read_file(path)?)
}

pub fn feature_map_to_bytes(fm: &FeatureMap) -> Result<Vec<u8>> {
    let mut w = ByteWriter::with_magic(FEATURE_MAGIC);
    w.u32(binio::dim_u32(fm.height(), "H")?);
    w.u32(binio::dim_u32(fm.width(), "W")?);
    w.u32(binio::dim_u32(fm.dim(), "d")?);
    w.f64s(fm.values());
    Ok(w.bytes)
}

pub fn feature_map_from_bytes(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = ByteReader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    let (h, w, d) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let values = r.f64_vec(binio::checked_product(&[h, w, d])?)?;
    r.finish()?;
    FeatureMap::new(h, w, d, values)
}

pub fn save_feature_map(fm: &FeatureMap, path: &Path) -> Result<()> {
    binio::write_file(path, &feature_map_to_bytes(fm)?)
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    feature_map_from_bytes(&binio::read_file(path)?)
}

pub fn prediction_to_bytes(pred: &PredictionMap) -> Result<Vec<u8>> {
    let mut w = ByteWriter::with_magic(PRED_MAGIC);
    w.u32(binio::dim_u32(pred.height(), "H")?);
    w.u32(binio::dim_u32(pred.width(), "W")?);
    for &l in pred.labels() {
        w.u16(l);
    }
    Ok(w.bytes)
}

pub fn prediction_from_bytes(bytes: &[u8]) -> Result<PredictionMap> {
    let mut r = ByteReader::new(bytes);
    r.magic(PRED_MAGIC)?;
    let (h, w) = (r.u32()? as usize, r.u32()? as usize);
    let labels = r.u16_vec(binio::checked_product(&[h, w])?)?;
    r.finish()?;
    PredictionMap::new(h, w, labels)
}

pub fn save_prediction(pred: &PredictionMap, path: &Path) -> Result<()> {
    binio::write_file(path, &prediction_to_bytes(pred)?)
}

pub fn load_prediction(path: &Path) -> Result<PredictionMap> {
    prediction_from_bytes(&binio::read_file(path)?)
}

/// Synthetic scene: the image is cut into `num_classes` contiguous runs of
/// pixels in row-major order; class `k` spectra are `separation·u_k + N(0, I)`
/// with `u_k` the k-th unit vector (or a random unit direction when K > L).
/// Every pixel is labeled.
pub fn synth_cube(
    num_classes: usize,
    height: usize,
    width: usize,
    bands: usize,
    separation: f64,
    seed: u64,
) -> Result<(HyperCube, GroundTruth)> {
    if num_classes == 0 || height == 0 || width == 0 || bands == 0 {
        return Err(Error::InvalidArgument("synthetic cube dims must be ≥ 1".into()));
    }
    let n = binio::checked_product(&[height, width])?;
    if num_classes > n {
        return Err(Error::InvalidArgument(format!(
            "{num_classes} classes do not fit in {height}x{width} pixels"
        )));
    }
    if num_classes > u16::MAX as usize {
        return Err(Error::InvalidArgument("too many classes".into()));
    }
    if !separation.is_finite() {
        return Err(Error::InvalidArgument("separation must be finite".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let directions: Vec<Vec<f64>> = (0..num_classes)
        .map(|k| {
            if num_classes <= bands {
                (0..bands).map(|b| if b == k { 1.0 } else { 0.0 }).collect()
            } else {
                let v: Vec<f64> = (0..bands).map(|_| normal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x / norm).collect()
            }
        })
        .collect();
    let mut labels = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n * bands);
    for p in 0..n {
        let k = p * num_classes / n;
        labels.push((k + 1) as u16);
        for &u in &directions[k] {
            values.push(separation * u + normal.sample(&mut rng));
        }
    }
    Ok((
        HyperCube::new(height, width, bands, values)?,
        GroundTruth::with_default_names(height, width, labels, num_classes)?,
    ))
}

/// Multiplicative speckle: every value becomes `v·(1 + strength·n)`, n ~ N(0, 1).
pub fn apply_speckle(cube: &HyperCube, strength: f64, seed: u64) -> HyperCube {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut out = cube.clone();
    for v in out.values_mut() {
        *v *= 1.0 + strength * normal.sample(&mut rng);
    }
    out
}
