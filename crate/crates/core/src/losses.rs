//! Softmax loss, center loss and the damped running class centers.

use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};

use crate::binio::{self, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::nncore::{Batch, ForwardTrace, Mode, Network};

const CENTERS_MAGIC: &[u8; 8] = b"HSICCTR1";

/// Floor applied to the true-class probability before taking its log.
pub const LOG_CLAMP: f64 = 1e-300;

pub const DEFAULT_LAMBDA: f64 = 0.01;
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    let mut out = logits.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SoftmaxLoss {
    pub loss: f64,
    /// `∂L_S/∂logits`, `(p − onehot(y)) / M`.
    pub grad: Array2<f64>,
    /// Samples whose true-class probability hit the log clamp.
    pub clamped: usize,
}

/// Mean negative log-likelihood of the true labels (1-based).
pub fn softmax_loss(probabilities: ArrayView2<'_, f64>, labels: &[usize]) -> Result<SoftmaxLoss> {
    let (m, k) = probabilities.dim();
    check_labels(labels, m, k)?;
    let mut grad = probabilities.to_owned();
    let mut total = 0.0;
    let mut clamped = 0;
    for (i, &y) in labels.iter().enumerate() {
        let p = probabilities[[i, y - 1]];
        if p < LOG_CLAMP {
            clamped += 1;
        }
        total -= p.max(LOG_CLAMP).ln();
        grad[[i, y - 1]] -= 1.0;
    }
    if clamped > 0 {
        log::warn!("{clamped} true-class probabilities clamped at {LOG_CLAMP:e}");
    }
    grad /= m as f64;
    Ok(SoftmaxLoss {
        loss: total / m as f64,
        grad,
        clamped,
    })
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if rows == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if labels.len() != rows {
        return Err(Error::shape("labels", rows, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == 0 || l > classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 1..={classes}")));
    }
    Ok(())
}

/// Per-class feature centers maintained during training.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningCenters {
    centers: Array2<f64>,
    initialized: Vec<bool>,
    alpha: f64,
}

impl RunningCenters {
    pub fn new(num_classes: usize, dim: usize, alpha: f64) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::InvalidArgument("centers need K ≥ 1 and d ≥ 1".into()));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1]")));
        }
        Ok(Self {
            centers: Array2::zeros((num_classes, dim)),
            initialized: vec![false; num_classes],
            alpha,
        })
    }

    /// Fully initialized centers, e.g. restored from a checkpoint.
    pub fn from_array(centers: Array2<f64>, alpha: f64) -> Result<Self> {
        let mut out = Self::new(centers.nrows(), centers.ncols(), alpha)?;
        out.centers = centers;
        out.initialized.fill(true);
        Ok(out)
    }

    pub fn num_classes(&self) -> usize {
        self.centers.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centers.ncols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn is_initialized(&self, class: usize) -> bool {
        class >= 1 && class <= self.num_classes() && self.initialized[class - 1]
    }

    pub fn all_initialized(&self) -> bool {
        self.initialized.iter().all(|&f| f)
    }

    pub fn center(&self, class: usize) -> Result<ArrayView1<'_, f64>> {
        if !self.is_initialized(class) {
            return Err(Error::UninitializedCenter(class));
        }
        Ok(self.centers.row(class - 1))
    }

    /// Raw center matrix, row `k-1` for class `k`. Uninitialized rows are zero.
    pub fn as_array(&self) -> &Array2<f64> {
        &self.centers
    }

    /// Per-class means of `features` over the batch; `None` for absent classes.
    fn batch_means(&self, features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Vec<Option<Vec<f64>>>> {
        check_labels(labels, features.nrows(), self.num_classes())?;
        if features.ncols() != self.dim() {
            return Err(Error::shape("feature width", self.dim(), features.ncols()));
        }
        let mut sums = vec![vec![0.0; self.dim()]; self.num_classes()];
        let mut counts = vec![0usize; self.num_classes()];
        for (row, &y) in features.outer_iter().zip(labels) {
            counts[y - 1] += 1;
            for (s, v) in sums[y - 1].iter_mut().zip(row) {
                *s += v;
            }
        }
        Ok(sums
            .into_iter()
            .zip(counts)
            .map(|(mut s, c)| {
                (c > 0).then(|| {
                    s.iter_mut().for_each(|v| *v /= c as f64);
                    s
                })
            })
            .collect())
    }

    /// Sets every not-yet-initialized class present in the batch to its batch mean.
    pub fn initialize_missing(&mut self, features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
        let means = self.batch_means(features, labels)?;
        for (k, mean) in means.into_iter().enumerate() {
            if let (Some(mean), false) = (mean, self.initialized[k]) {
                self.centers.row_mut(k).assign(&ArrayView1::from(&mean));
                self.initialized[k] = true;
            }
        }
        Ok(())
    }

    /// Damped update `c ← c + α(c̄ − c)` for every class present in the batch;
    /// a class seen for the first time takes `c̄` directly. Absent classes are
    /// left untouched.
    pub fn update(&mut self, features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
        let means = self.batch_means(features, labels)?;
        let alpha = self.alpha;
        for (k, mean) in means.into_iter().enumerate() {
            let Some(mean) = mean else { continue };
            let mut row = self.centers.row_mut(k);
            if self.initialized[k] {
                for (c, m) in row.iter_mut().zip(&mean) {
                    *c += alpha * (m - *c);
                }
            } else {
                row.assign(&ArrayView1::from(&mean));
                self.initialized[k] = true;
            }
        }
        Ok(())
    }

    /// Minimum squared distance between any two centers; `+∞` when K = 1.
    pub fn min_squared_distance(&self) -> f64 {
        min_squared_pair_distance(self.centers.view())
    }

    /// Checkpoint bytes: magic, K, d (u32 LE), then K×d f64 LE, one row per class.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if let Some(k) = self.initialized.iter().position(|&f| !f) {
            return Err(Error::UninitializedCenter(k + 1));
        }
        let mut w = ByteWriter::with_magic(CENTERS_MAGIC);
        w.u32(binio::dim_u32(self.num_classes(), "K")?);
        w.u32(binio::dim_u32(self.dim(), "d")?);
        w.f64s(self.centers.iter());
        Ok(w.bytes)
    }

    pub fn from_bytes(bytes: &[u8], alpha: f64) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(CENTERS_MAGIC)?;
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let values = r.f64_vec(binio::checked_product(&[k, d])?)?;
        r.finish()?;
        let centers = Array2::from_shape_vec((k, d), values).map_err(|e| Error::Malformed(e.to_string()))?;
        Self::from_array(centers, alpha)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path, alpha: f64) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?, alpha)
    }
}

/// Brute-force minimum over all `K(K−1)/2` row pairs.
pub fn min_squared_pair_distance(centers: ArrayView2<'_, f64>) -> f64 {
    let k = centers.nrows();
    let mut best = f64::INFINITY;
    for a in 0..k {
        for b in a + 1..k {
            let d: f64 = centers
                .row(a)
                .iter()
                .zip(centers.row(b))
                .map(|(x, y)| (x - y).powi(2))
                .sum();
            best = best.min(d);
        }
    }
    best
}

#[derive(Clone, Debug)]
pub struct CenterLoss {
    pub loss: f64,
    /// `∂L_C/∂features`, `(x̂ − c_y) / M`, centers held constant.
    pub grad: Array2<f64>,
}

/// `L_C = 1/(2M) Σ ‖x̂_i − c_{y_i}‖²`.
pub fn center_loss(features: ArrayView2<'_, f64>, labels: &[usize], centers: &RunningCenters) -> Result<CenterLoss> {
    let m = features.nrows();
    check_labels(labels, m, centers.num_classes())?;
    if features.ncols() != centers.dim() {
        return Err(Error::shape("feature width", centers.dim(), features.ncols()));
    }
    let mut grad = features.to_owned();
    let mut total = 0.0;
    for (mut row, &y) in grad.outer_iter_mut().zip(labels) {
        let c = centers.center(y)?;
        row -= &c;
        total += row.iter().map(|v| v * v).sum::<f64>();
    }
    grad /= m as f64;
    Ok(CenterLoss {
        loss: total / (2.0 * m as f64),
        grad,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLossReport {
    pub softmax_loss: f64,
    pub center_loss: f64,
    pub joint: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct JointLoss {
    pub report: JointLossReport,
    pub d_logits: Array2<f64>,
    /// `λ·∂L_C/∂features`
    pub d_features: Array2<f64>,
    pub probabilities: Array2<f64>,
}

/// `L = L_S + λ·L_C` evaluated on an existing forward pass.
pub fn joint_loss_from_trace(
    trace: &ForwardTrace,
    labels: &[usize],
    centers: &RunningCenters,
    lambda: f64,
) -> Result<JointLoss> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda {lambda}")));
    }
    let probabilities = softmax(trace.logits().view())?;
    let ls = softmax_loss(probabilities.view(), labels)?;
    let (lc, mut d_features) = if lambda > 0.0 {
        let lc = center_loss(trace.features().view(), labels, centers)?;
        (lc.loss, lc.grad)
    } else {
        // L_C is still reported for diagnostics when every center exists.
        let lc = center_loss(trace.features().view(), labels, centers)
            .map(|c| c.loss)
            .unwrap_or(0.0);
        (lc, Array2::zeros(trace.features().raw_dim()))
    };
    d_features *= lambda;
    Ok(JointLoss {
        report: JointLossReport {
            softmax_loss: ls.loss,
            center_loss: lc,
            joint: ls.loss + lambda * lc,
            lambda,
        },
        d_logits: ls.grad,
        d_features,
        probabilities,
    })
}

/// Runs the forward pass for `batch` and evaluates the joint loss on it.
pub fn joint_loss(
    net: &Network,
    batch: &Batch,
    mode: Mode<'_>,
    centers: &RunningCenters,
    lambda: f64,
) -> Result<(ForwardTrace, JointLoss)> {
    let trace = net.forward(batch.inputs.view(), mode)?;
    let loss = joint_loss_from_trace(&trace, &batch.labels, centers, lambda)?;
    Ok((trace, loss))
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn batch_accuracy(logits: ArrayView2<'_, f64>, labels: &[usize]) -> f64 {
    let hits = logits
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best + 1 == y
        })
        .count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let p = softmax(array![[0.0, 0.0, 0.0]].view()).unwrap();
        for &v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(array![[2f64.ln(), 0.0, 0.0]].view()).unwrap();
        assert!((p[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((p[[0, 1]] - 0.25).abs() < 1e-15);
        let p = softmax(array![[1000.0, 1000.0]].view()).unwrap();
        assert_eq!(p, array![[0.5, 0.5]]);
        assert!(softmax(array![[f64::NAN, 0.0]].view()).is_err());
    }

    #[test]
    fn softmax_loss_examples() {
        let l = softmax_loss(array![[1.0, 0.0], [0.0, 1.0]].view(), &[1, 2]).unwrap();
        assert_eq!(l.loss, 0.0);
        let l = softmax_loss(array![[0.25; 4]].view(), &[3]).unwrap();
        assert!((l.loss - 4f64.ln()).abs() < 1e-12);
        let p = array![[0.5, 0.5, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]];
        let l = softmax_loss(p.view(), &[1, 4]).unwrap();
        assert!((l.loss - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!((l.grad[[0, 0]] - (0.5 - 1.0) / 2.0).abs() < 1e-15);
        assert!((l.grad[[1, 0]] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn softmax_loss_clamps_zero_probability() {
        let l = softmax_loss(array![[1.0, 0.0]].view(), &[2]).unwrap();
        assert_eq!(l.clamped, 1);
        assert!((l.loss - (-LOG_CLAMP.ln())).abs() < 1e-9);
        assert!(softmax_loss(array![[1.0, 0.0]].view(), &[3]).is_err());
    }

    fn centers_from(rows: Array2<f64>) -> RunningCenters {
        RunningCenters::from_array(rows, DEFAULT_ALPHA).unwrap()
    }

    #[test]
    fn center_loss_examples() {
        let c = centers_from(array![[0.0, 0.0], [3.0, 3.0]]);
        let l = center_loss(array![[0.0, 0.0], [3.0, 3.0]].view(), &[1, 2], &c).unwrap();
        assert_eq!(l.loss, 0.0);
        let l = center_loss(array![[1.0, 0.0]].view(), &[1], &c).unwrap();
        assert_eq!(l.loss, 0.5);
        assert_eq!(l.grad, array![[1.0, 0.0]]);
        let l = center_loss(array![[1.0, 0.0], [3.0, 5.0]].view(), &[1, 2], &c).unwrap();
        assert!((l.loss - 1.25).abs() < 1e-15);
    }

    #[test]
    fn center_loss_requires_initialized_center() {
        let c = RunningCenters::new(2, 2, 0.5).unwrap();
        let err = center_loss(array![[1.0, 0.0]].view(), &[2], &c).unwrap_err();
        assert!(matches!(err, Error::UninitializedCenter(2)));
    }

    #[test]
    fn center_update_rules() {
        let mut c = RunningCenters::new(2, 2, 0.5).unwrap();
        c.update(array![[1.0, 1.0], [3.0, 3.0]].view(), &[1, 1]).unwrap();
        assert_eq!(c.center(1).unwrap(), ArrayView1::from(&[2.0, 2.0]));
        assert!(!c.is_initialized(2));

        let mut c = centers_from(array![[0.0, 0.0], [5.0, 5.0]]);
        c.update(array![[2.0, 0.0]].view(), &[1]).unwrap();
        assert_eq!(c.center(1).unwrap(), ArrayView1::from(&[1.0, 0.0]));
        assert_eq!(c.center(2).unwrap(), ArrayView1::from(&[5.0, 5.0]));
    }

    #[test]
    fn absent_class_replay() {
        // batch 1 has both classes, batch 2 only class 1
        let mut c = RunningCenters::new(2, 1, 0.5).unwrap();
        c.update(array![[1.0], [4.0]].view(), &[1, 2]).unwrap();
        c.update(array![[3.0], [3.0]].view(), &[1, 1]).unwrap();
        assert_eq!(c.center(1).unwrap()[0], 2.0);
        assert_eq!(c.center(2).unwrap()[0], 4.0);
    }

    #[test]
    fn joint_identity() {
        let net = crate::nncore::init_network(&[3, 4, 2, 2], 4).unwrap();
        let batch = Batch::new(array![[0.1, 0.2, 0.3], [-0.4, 0.5, 0.6]], vec![1, 2], 2).unwrap();
        let c = centers_from(array![[0.01, 0.0], [0.0, -0.02]]);
        let (_, j) = joint_loss(&net, &batch, Mode::Infer, &c, 0.01).unwrap();
        let r = j.report;
        assert!((r.joint - (r.softmax_loss + 0.01 * r.center_loss)).abs() < 1e-12);
        let (_, j0) = joint_loss(&net, &batch, Mode::Infer, &c, 0.0).unwrap();
        assert_eq!(j0.report.joint, j0.report.softmax_loss);
        assert!(j0.d_features.iter().all(|&v| v == 0.0));
        let r = JointLossReport {
            softmax_loss: 1.0,
            center_loss: 2.0,
            joint: 1.0 + 0.01 * 2.0,
            lambda: 0.01,
        };
        assert!((r.joint - 1.02).abs() < 1e-15);
    }

    #[test]
    fn min_squared_distance_brute_force() {
        let c = centers_from(array![[0.0, 0.0], [3.0, 4.0], [1.0, 1.0]]);
        assert_eq!(c.min_squared_distance(), 2.0);
        assert_eq!(centers_from(array![[1.0]]).min_squared_distance(), f64::INFINITY);
    }

    #[test]
    fn centers_checkpoint() {
        let c = centers_from(array![[0.5, -1.0, 2.0], [3.25, 0.0, -7.5]]);
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"HSICCTR1");
        assert_eq!(bytes.len(), 8 + 8 + 6 * 8);
        assert_eq!(RunningCenters::from_bytes(&bytes, 0.5).unwrap(), c);
        assert!(RunningCenters::new(2, 3, 0.5).unwrap().to_bytes().is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(z in prop::collection::vec(-50.0f64..50.0, 1..8), shift in -500.0f64..500.0) {
            let a = softmax(ArrayView2::from_shape((1, z.len()), &z).unwrap()).unwrap();
            let shifted: Vec<f64> = z.iter().map(|v| v + shift).collect();
            let b = softmax(ArrayView2::from_shape((1, z.len()), &shifted).unwrap()).unwrap();
            prop_assert!((a.sum() - 1.0).abs() < 1e-12);
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn softmax_loss_is_mean_negative_log(rows in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 3), 1usize..=3), 1..6)) {
            let m = rows.len();
            let flat: Vec<f64> = rows.iter().flat_map(|(z, _)| z.clone()).collect();
            let labels: Vec<usize> = rows.iter().map(|r| r.1).collect();
            let p = softmax(ArrayView2::from_shape((m, 3), &flat).unwrap()).unwrap();
            let l = softmax_loss(p.view(), &labels).unwrap();
            let direct: f64 = labels.iter().enumerate().map(|(i, &y)| -p[[i, y - 1]].ln()).sum::<f64>() / m as f64;
            prop_assert!((l.loss - direct).abs() < 1e-12);
        }

        #[test]
        fn center_update_contraction(c0 in -10.0f64..10.0, mean in -10.0f64..10.0, alpha in 0.05f64..1.0, rounds in 1usize..6) {
            let mut c = RunningCenters::from_array(array![[c0]], alpha).unwrap();
            let mut prev = c0;
            for _ in 0..rounds {
                c.update(array![[mean]].view(), &[1]).unwrap();
                let now = c.center(1).unwrap()[0];
                let expected = (1.0 - alpha) * (prev - mean).abs();
                prop_assert!(((now - mean).abs() - expected).abs() <= 1e-12 * (1.0 + prev.abs() + mean.abs()));
                prev = now;
            }
            let mut fixed = RunningCenters::from_array(array![[mean]], alpha).unwrap();
            fixed.update(array![[mean]].view(), &[1]).unwrap();
            prop_assert_eq!(fixed.center(1).unwrap()[0], mean);
        }

        #[test]
        fn center_loss_gradient_matches_finite_differences(
            feats in prop::collection::vec(-3.0f64..3.0, 6),
            cents in prop::collection::vec(-3.0f64..3.0, 4),
        ) {
            let labels = [1usize, 2, 1];
            let c = RunningCenters::from_array(Array2::from_shape_vec((2, 2), cents).unwrap(), 0.5).unwrap();
            let x = Array2::from_shape_vec((3, 2), feats).unwrap();
            let analytic = center_loss(x.view(), &labels, &c).unwrap().grad;
            let h = 1e-5;
            for idx in 0..6 {
                let (i, j) = (idx / 2, idx % 2);
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (center_loss(xp.view(), &labels, &c).unwrap().loss
                    - center_loss(xm.view(), &labels, &c).unwrap().loss) / (2.0 * h);
                let a = analytic[[i, j]];
                let rel = (fd - a).abs() / a.abs().max(fd.abs()).max(1e-3);
                prop_assert!(rel < 1e-6, "rel {rel}");
            }
        }
    }
}
