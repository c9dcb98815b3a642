//! Nearest-center classification on learned features, with optional
//! neighborhood averaging and inverse-distance voting across window sizes.

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::data::{GroundTruth, HyperCube, Role, SplitMask};
use crate::error::{Error, Result};
use crate::nncore::Network;
use crate::train::SampleSet;

/// Distances below this count as an exact hit on a center.
pub const ZERO_DISTANCE: f64 = 1e-12;

/// Testing-time class centers, row `k-1` for class `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatedCenters {
    centers: Array2<f64>,
}

impl EstimatedCenters {
    pub fn new(centers: Array2<f64>) -> Result<Self> {
        if centers.nrows() == 0 || centers.ncols() == 0 {
            return Err(Error::InvalidArgument("centers need K ≥ 1 and d ≥ 1".into()));
        }
        if centers.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("estimated centers"));
        }
        Ok(Self { centers })
    }

    pub fn num_classes(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn center(&self, class: usize) -> ArrayView1<'_, f64> {
        self.centers.row(class - 1)
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.centers
    }

    /// Per-class mean of the given feature rows.
    pub fn from_features(features: &Array2<f64>, labels: &[usize], num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::shape("feature labels", features.nrows(), labels.len()));
        }
        let mut sums = Array2::<f64>::zeros((num_classes, features.ncols()));
        let mut counts = vec![0usize; num_classes];
        for (row, &y) in features.outer_iter().zip(labels) {
            if y == 0 || y > num_classes {
                return Err(Error::InvalidArgument(format!("label {y} outside 1..={num_classes}")));
            }
            counts[y - 1] += 1;
            let mut s = sums.row_mut(y - 1);
            s += &row;
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::ClassTooSmall {
                class: k + 1,
                available: 0,
                required: 1,
            });
        }
        for (mut row, &c) in sums.outer_iter_mut().zip(&counts) {
            row /= c as f64;
        }
        Self::new(sums)
    }

    /// Means over the Train pixels of a feature map.
    pub fn from_feature_map(fm: &FeatureMap, gt: &GroundTruth, mask: &SplitMask) -> Result<Self> {
        mask.check_against(gt)?;
        fm.check_grid(mask.height(), mask.width())?;
        let pixels: Vec<usize> = (0..fm.num_pixels())
            .filter(|&p| mask.roles()[p] == Role::Train)
            .collect();
        let mut feats = Array2::zeros((pixels.len(), fm.dim()));
        for (mut row, &p) in feats.outer_iter_mut().zip(&pixels) {
            row.as_slice_mut().unwrap().copy_from_slice(fm.feature_at(p));
        }
        let labels: Vec<usize> = pixels.iter().map(|&p| gt.labels()[p] as usize).collect();
        Self::from_features(&feats, &labels, gt.num_classes())
    }
}

/// `ĉ_k`: inference-mode feature mean over the real training samples of class k.
pub fn estimate_centers(net: &Network, train: &SampleSet) -> Result<EstimatedCenters> {
    let feats = net.features(train.inputs.view())?;
    EstimatedCenters::from_features(&feats, &train.labels, train.num_classes)
}

fn squared_distance(a: &[f64], b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Nearest center label (lowest label on ties) and its Euclidean distance.
pub fn nearest_center(feature: &[f64], centers: &EstimatedCenters) -> (usize, f64) {
    let mut best = (1, f64::INFINITY);
    for k in 1..=centers.num_classes() {
        let d = squared_distance(feature, centers.center(k));
        if d < best.1 {
            best = (k, d);
        }
    }
    (best.0, best.1.sqrt())
}

pub fn scc_classify(feature: &[f64], centers: &EstimatedCenters) -> usize {
    nearest_center(feature, centers).0
}

/// H×W grid of feature vectors, pixel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    height: usize,
    width: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::InvalidArgument("feature map dims must be ≥ 1".into()));
        }
        let n = crate::binio::checked_product(&[height, width, dim])?;
        if values.len() != n {
            return Err(Error::shape("feature map values", n, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature map"));
        }
        Ok(Self {
            height,
            width,
            dim,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn feature_at(&self, index: usize) -> &[f64] {
        &self.values[index * self.dim..(index + 1) * self.dim]
    }

    pub fn feature(&self, row: usize, col: usize) -> &[f64] {
        self.feature_at(row * self.width + col)
    }

    pub fn feature_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let i = (row * self.width + col) * self.dim;
        &mut self.values[i..i + self.dim]
    }

    fn check_grid(&self, height: usize, width: usize) -> Result<()> {
        if (self.height, self.width) != (height, width) {
            return Err(Error::shape(
                "feature map grid",
                format!("{height}x{width}"),
                format!("{}x{}", self.height, self.width),
            ));
        }
        Ok(())
    }
}

/// Inference-mode feature of every pixel, labeled or not.
pub fn extract_feature_map(net: &Network, cube: &HyperCube) -> Result<FeatureMap> {
    if cube.bands() != net.input_size() {
        return Err(Error::shape("cube bands", net.input_size(), cube.bands()));
    }
    const CHUNK: usize = 4096;
    let l = cube.bands();
    let mut values = Vec::with_capacity(cube.num_pixels() * net.feature_size());
    for chunk in cube.values().chunks(CHUNK * l) {
        let rows = chunk.len() / l;
        let inputs = ndarray::ArrayView2::from_shape((rows, l), chunk).unwrap();
        let feats = net.features(inputs)?;
        values.extend(feats.iter());
    }
    FeatureMap::new(cube.height(), cube.width(), net.feature_size(), values)
}

/// Odd window sizes ≥ 3 in strictly increasing order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScaleSet(Vec<usize>);

impl ScaleSet {
    pub fn new(scales: Vec<usize>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::InvalidArgument("empty scale set".into()));
        }
        if let Some(&s) = scales.iter().find(|&&s| s < 3 || s % 2 == 0) {
            return Err(Error::InvalidArgument(format!("scale {s} must be odd and ≥ 3")));
        }
        if scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("scales must be strictly increasing".into()));
        }
        Ok(Self(scales))
    }

    pub fn scales(&self) -> &[usize] {
        &self.0
    }
}

impl Default for ScaleSet {
    /// 3×3 through 17×17.
    fn default() -> Self {
        Self((3..=17).step_by(2).collect())
    }
}

impl FromStr for ScaleSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let scales = s
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidArgument(format!("bad scale {v:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(scales)
    }
}

/// Mean feature over the `scale×scale` window around `(row, col)`, clipped
/// to the image and skipping Train pixels. The center itself must not be a
/// Train pixel, so at least one pixel always contributes.
pub fn spatial_feature(fm: &FeatureMap, mask: &SplitMask, row: usize, col: usize, scale: usize) -> Result<Vec<f64>> {
    fm.check_grid(mask.height(), mask.width())?;
    if scale.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("scale {scale} is even")));
    }
    if row >= fm.height() || col >= fm.width() {
        return Err(Error::InvalidArgument(format!("pixel ({row}, {col}) outside image")));
    }
    if mask.is_train(row, col) {
        return Err(Error::InvalidArgument(format!(
            "pixel ({row}, {col}) is a training pixel"
        )));
    }
    Ok(spatial_feature_unchecked(fm, mask, row, col, scale))
}

fn spatial_feature_unchecked(fm: &FeatureMap, mask: &SplitMask, row: usize, col: usize, scale: usize) -> Vec<f64> {
    let r = scale / 2;
    let (r0, r1) = (row.saturating_sub(r), (row + r).min(fm.height() - 1));
    let (c0, c1) = (col.saturating_sub(r), (col + r).min(fm.width() - 1));
    let mut sum = vec![0.0; fm.dim()];
    let mut count = 0usize;
    for y in r0..=r1 {
        for x in c0..=c1 {
            if mask.is_train(y, x) {
                continue;
            }
            for (s, v) in sum.iter_mut().zip(fm.feature(y, x)) {
                *s += v;
            }
            count += 1;
        }
    }
    let n = count as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    sum
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleVote {
    pub scale: usize,
    pub feature: Vec<f64>,
    pub label: usize,
    pub distance: f64,
    /// `1/distance`, or `+∞` when the distance is below [`ZERO_DISTANCE`].
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoteBreakdown {
    pub votes: Vec<ScaleVote>,
    /// `(label, W_p)` for every candidate label, ascending by label.
    pub totals: Vec<(usize, f64)>,
    pub winner: usize,
}

/// Inverse-distance weighted vote of the per-scale nearest-center labels.
/// Ties in total weight go to the lowest label; an exact hit on a center
/// gives that scale an infinite weight.
pub fn asscc_classify(
    fm: &FeatureMap,
    mask: &SplitMask,
    centers: &EstimatedCenters,
    row: usize,
    col: usize,
    scales: &ScaleSet,
) -> Result<(usize, VoteBreakdown)> {
    if fm.dim() != centers.dim() {
        return Err(Error::shape("feature dimension", centers.dim(), fm.dim()));
    }
    let mut votes = Vec::with_capacity(scales.scales().len());
    for &scale in scales.scales() {
        let feature = spatial_feature(fm, mask, row, col, scale)?;
        let (label, distance) = nearest_center(&feature, centers);
        let weight = if distance < ZERO_DISTANCE {
            f64::INFINITY
        } else {
            1.0 / distance
        };
        votes.push(ScaleVote {
            scale,
            feature,
            label,
            distance,
            weight,
        });
    }
    let breakdown = tally(votes);
    Ok((breakdown.winner, breakdown))
}

fn tally(votes: Vec<ScaleVote>) -> VoteBreakdown {
    let mut totals: Vec<(usize, f64)> = Vec::new();
    for v in &votes {
        match totals.iter_mut().find(|(l, _)| *l == v.label) {
            Some((_, w)) => *w += v.weight,
            None => totals.push((v.label, v.weight)),
        }
    }
    totals.sort_by_key(|&(l, _)| l);
    let mut winner = totals[0];
    for &t in &totals[1..] {
        if t.1 > winner.1 {
            winner = t;
        }
    }
    VoteBreakdown {
        votes,
        totals,
        winner: winner.0,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClassifierMode {
    Scc,
    Sscc(usize),
    Asscc(ScaleSet),
}

impl FromStr for ClassifierMode {
    type Err = Error;

    /// `scc`, `sscc:<scale>` or `asscc` (default scales).
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scc" => Ok(Self::Scc),
            "asscc" => Ok(Self::Asscc(ScaleSet::default())),
            _ => {
                let scale = s
                    .strip_prefix("sscc:")
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown mode {s:?}")))?;
                let scale: usize = scale
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad scale {scale:?}")))?;
                ScaleSet::new(vec![scale])?;
                Ok(Self::Sscc(scale))
            }
        }
    }
}

/// Labels per pixel; 0 marks pixels that were not predicted.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap {
    height: usize,
    width: usize,
    labels: Vec<u16>,
}

impl PredictionMap {
    pub fn new(height: usize, width: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != crate::binio::checked_product(&[height, width])? {
            return Err(Error::shape("prediction labels", height * width, labels.len()));
        }
        Ok(Self { height, width, labels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn label(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.width + col]
    }
}

/// Result of [`classify_image`]; breakdowns are kept only for ASSCC.
pub struct Classification {
    pub map: PredictionMap,
    pub votes: Vec<((usize, usize), VoteBreakdown)>,
}

/// Predicts every Test pixel with the chosen rule. Train and unlabeled
/// pixels get label 0.
pub fn classify_image(
    fm: &FeatureMap,
    mask: &SplitMask,
    centers: &EstimatedCenters,
    mode: &ClassifierMode,
) -> Result<Classification> {
    fm.check_grid(mask.height(), mask.width())?;
    if fm.dim() != centers.dim() {
        return Err(Error::shape("feature dimension", centers.dim(), fm.dim()));
    }
    if centers.num_classes() > u16::MAX as usize {
        return Err(Error::InvalidArgument("too many classes for a prediction map".into()));
    }
    if let ClassifierMode::Sscc(s) = mode {
        ScaleSet::new(vec![*s])?;
    }
    let w = fm.width();
    let results: Vec<(u16, Option<VoteBreakdown>)> = (0..fm.num_pixels())
        .into_par_iter()
        .map(|p| {
            if mask.roles()[p] != Role::Test {
                return Ok((0, None));
            }
            let (row, col) = (p / w, p % w);
            Ok(match mode {
                ClassifierMode::Scc => (scc_classify(fm.feature_at(p), centers) as u16, None),
                ClassifierMode::Sscc(scale) => {
                    let f = spatial_feature_unchecked(fm, mask, row, col, *scale);
                    (scc_classify(&f, centers) as u16, None)
                }
                ClassifierMode::Asscc(scales) => {
                    let (label, b) = asscc_classify(fm, mask, centers, row, col, scales)?;
                    (label as u16, Some(b))
                }
            })
        })
        .collect::<Result<_>>()?;
    let mut labels = Vec::with_capacity(results.len());
    let mut votes = Vec::new();
    for (p, (label, b)) in results.into_iter().enumerate() {
        labels.push(label);
        if let Some(b) = b {
            votes.push(((p / w, p % w), b));
        }
    }
    Ok(Classification {
        map: PredictionMap::new(fm.height(), w, labels)?,
        votes,
    })
}

/// CSV rows `row,col,scale,label,distance,weight`, one per pixel and scale.
pub fn votes_to_csv(votes: &[((usize, usize), VoteBreakdown)]) -> String {
    let mut s = String::from("row,col,scale,label,distance,weight\n");
    for ((r, c), b) in votes {
        for v in &b.votes {
            let _ = writeln!(s, "{r},{c},{},{},{},{}", v.scale, v.label, v.distance, v.weight);
        }
    }
    s
}
