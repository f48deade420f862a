//! Reconstruction-error detection maps, 3D ROC analysis, the AUC suite,
//! continual-learning metrics and the RX reference detector.
//!
//! SMAP score export: `"SMAP"`, `M`, `N` as little-endian `u32`, then `M*N`
//! little-endian `f64` scores in row-major pixel order. The text export has a
//! `# height width normalized` header line followed by one row of
//! space-separated scores per image row.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::binio::{read_file, to_u32, write_file, Reader, Writer};
use crate::capsule_nn::Reconstructor;
use crate::error::{Error, Result};
use crate::hsi_data::{write_label_grid_pub, GroundTruthMask, HsiCube};
use crate::preprocess::FeatureMatrix;

pub const DEFAULT_THRESHOLDS: usize = 512;
const SCORE_MAGIC: &[u8; 4] = b"SMAP";
/// Pixels sent through the reconstructor per call.
const SCORE_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
    pub normalized: bool,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} scores for a {height}x{width} map",
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFiniteValue(i));
        }
        Ok(Self {
            height,
            width,
            scores,
            normalized: false,
        })
    }

    /// Min-max scaling onto `[0, 1]`; a constant map becomes all zeros.
    pub fn normalized(&self) -> ScoreMap {
        let lo = self.scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let scores = if span > 0.0 {
            self.scores.iter().map(|s| ((s - lo) / span).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.0; self.scores.len()]
        };
        ScoreMap {
            height: self.height,
            width: self.width,
            scores,
            normalized: true,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# {} {} {}\n", self.height, self.width, u8::from(self.normalized));
        for row in self.scores.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn save_text(&self, path: impl AsRef<Path>) -> Result<()> {
        write_file(path.as_ref(), self.to_text().as_bytes())
    }

    pub fn save_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = Writer::default();
        w.bytes(SCORE_MAGIC);
        w.u32(to_u32(self.height, "height")?);
        w.u32(to_u32(self.width, "width")?);
        for &v in &self.scores {
            w.f64(v);
        }
        write_file(path.as_ref(), &w.buf)
    }

    pub fn load_binary(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        let mut r = Reader::new(&bytes);
        let magic = r.bytes(4).unwrap_or(&[]);
        if magic != SCORE_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "SMAP".into(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let scores = r.f64_vec(h * w)?;
        let mut map = ScoreMap::new(h, w, scores)?;
        map.normalized = false;
        Ok(map)
    }

    /// Writes the binary decision `score >= tau` as an MSK1 grid.
    pub fn save_detection_mask(&self, tau: f64, path: impl AsRef<Path>) -> Result<()> {
        let labels: Vec<u8> = self.scores.iter().map(|&s| u8::from(s >= tau)).collect();
        write_label_grid_pub(self.height, self.width, &labels, path.as_ref())
    }
}

/// Per-pixel squared reconstruction error over every pixel of `features`.
pub fn score_map(model: &dyn Reconstructor, features: &FeatureMatrix) -> Result<ScoreMap> {
    if model.feature_dim() != features.dim {
        return Err(Error::DimensionMismatch {
            expected: model.feature_dim(),
            found: features.dim,
        });
    }
    let dim = features.dim;
    let n = features.pixel_count();
    let mut scores = Vec::with_capacity(n);
    for start in (0..n).step_by(SCORE_CHUNK) {
        let rows = SCORE_CHUNK.min(n - start);
        let batch = &features.vectors[start * dim..(start + rows) * dim];
        let recon = model.reconstruct(batch, rows)?;
        for (x, y) in batch.chunks_exact(dim).zip(recon.chunks_exact(dim)) {
            scores.push(x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum());
        }
    }
    ScoreMap::new(features.height, features.width, scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub pd: f64,
    pub pf: f64,
    pub tau: f64,
}

/// 3D ROC over normalized scores; `labels` are 1 for anomalies.
pub fn roc_from_labels(scores: &[f64], labels: &[u8], n_thresholds: usize) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let mut neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l != 1).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClassTruth);
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);

    let mut taus: Vec<f64> = Vec::with_capacity(scores.len() + 2);
    taus.push(0.0);
    taus.extend(scores.iter().copied());
    taus.push(1.0);
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let cap = n_thresholds.max(2);
    if taus.len() > cap {
        let last = taus.len() - 1;
        taus = (0..cap)
            .map(|i| taus[((i as u128 * last as u128 + (cap as u128 - 1) / 2) / (cap as u128 - 1)) as usize])
            .collect();
        taus.dedup();
    }

    let frac_at_least = |sorted: &[f64], t: f64| {
        let below = sorted.partition_point(|&s| s < t);
        (sorted.len() - below) as f64 / sorted.len() as f64
    };
    let mut points: Vec<RocPoint> = taus
        .iter()
        .map(|&tau| RocPoint {
            pd: frac_at_least(&pos, tau),
            pf: frac_at_least(&neg, tau),
            tau,
        })
        .collect();
    let end = *points.last().expect("at least the endpoints");
    if end.pd > 0.0 || end.pf > 0.0 {
        points.push(RocPoint {
            pd: 0.0,
            pf: 0.0,
            tau: end.tau,
        });
    }
    Ok(points)
}

pub fn roc_3d(scores: &ScoreMap, truth: &GroundTruthMask, n_thresholds: usize) -> Result<Vec<RocPoint>> {
    if scores.height != truth.height() || scores.width != truth.width() {
        return Err(Error::ShapeMismatch(format!(
            "score map {}x{} against truth {}x{}",
            scores.height,
            scores.width,
            truth.height(),
            truth.width()
        )));
    }
    if scores.normalized {
        roc_from_labels(&scores.scores, truth.labels(), n_thresholds)
    } else {
        roc_from_labels(&scores.normalized().scores, truth.labels(), n_thresholds)
    }
}

fn ser_ratio<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_ratio<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Ratio {
        Num(f64),
        Text(String),
    }
    match Ratio::deserialize(d)? {
        Ratio::Num(v) => Ok(v),
        Ratio::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Ratio::Text(t) => Err(serde::de::Error::custom(format!("unexpected ratio value {t:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucReport {
    pub auc_df: f64,
    pub auc_dtau: f64,
    pub auc_ftau: f64,
    pub auc_td: f64,
    pub auc_bs: f64,
    pub auc_tdbs: f64,
    #[serde(serialize_with = "ser_ratio", deserialize_with = "de_ratio")]
    pub auc_snpr: f64,
    pub auc_odp: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub roc_points: Vec<RocPoint>,
}

impl AucReport {
    /// Derives the five combined measures from the three base areas.
    pub fn from_base(df: f64, dtau: f64, ftau: f64) -> Self {
        Self {
            auc_df: df,
            auc_dtau: dtau,
            auc_ftau: ftau,
            auc_td: df + dtau,
            auc_bs: df - ftau,
            auc_tdbs: dtau - ftau,
            auc_snpr: if ftau == 0.0 { f64::INFINITY } else { dtau / ftau },
            auc_odp: df + dtau - ftau,
            roc_points: Vec::new(),
        }
    }

    /// Largest violation among the stored relations between the measures.
    pub fn identity_error(&self) -> f64 {
        let mut errs = vec![
            (self.auc_td - self.auc_bs - (self.auc_dtau + self.auc_ftau)).abs(),
            (self.auc_odp - (self.auc_bs + self.auc_dtau)).abs(),
            (self.auc_odp - (self.auc_td - self.auc_ftau)).abs(),
            (self.auc_tdbs - (self.auc_dtau - self.auc_ftau)).abs(),
            (self.auc_td - (self.auc_df + self.auc_dtau)).abs(),
        ];
        if self.auc_ftau > 0.0 {
            errs.push((self.auc_snpr - self.auc_dtau / self.auc_ftau).abs());
        } else if self.auc_snpr != f64::INFINITY {
            errs.push(f64::INFINITY);
        }
        errs.into_iter().fold(0.0, f64::max)
    }
}

fn trapezoid(points: &[RocPoint], x: impl Fn(&RocPoint) -> f64, y: impl Fn(&RocPoint) -> f64) -> f64 {
    points
        .windows(2)
        .map(|w| (x(&w[1]) - x(&w[0])).abs() * (y(&w[0]) + y(&w[1])) / 2.0)
        .sum()
}

pub fn auc_suite(roc: &[RocPoint]) -> Result<AucReport> {
    if roc.len() < 2 {
        return Err(Error::TooFewPoints(roc.len()));
    }
    let df = trapezoid(roc, |p| p.pf, |p| p.pd);
    let dtau = trapezoid(roc, |p| p.tau, |p| p.pd);
    let ftau = trapezoid(roc, |p| p.tau, |p| p.pf);
    let mut report = AucReport::from_base(df, dtau, ftau);
    report.roc_points = roc.to_vec();
    Ok(report)
}

/// ROC plus AUC suite in one call.
pub fn evaluate(scores: &ScoreMap, truth: &GroundTruthMask, n_thresholds: usize) -> Result<AucReport> {
    auc_suite(&roc_3d(scores, truth, n_thresholds)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClMetrics {
    pub auc_matrix: Vec<Vec<f64>>,
    pub acc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bwt: Option<f64>,
}

/// `auc_matrix[r][i]` is the AUC on task `i` after training stage `r`; row
/// `r` must hold exactly `r + 1` entries.
pub fn cl_metrics(auc_matrix: &[Vec<f64>]) -> Result<ClMetrics> {
    if auc_matrix.is_empty() {
        return Err(Error::Malformed("AUC matrix has no rows".into()));
    }
    for (r, row) in auc_matrix.iter().enumerate() {
        if row.len() != r + 1 {
            return Err(Error::Malformed(format!(
                "AUC matrix row {r} holds {} entries, expected {}",
                row.len(),
                r + 1
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Malformed(format!("AUC matrix row {r} has a non-finite entry")));
        }
    }
    let t = auc_matrix.len();
    let last = &auc_matrix[t - 1];
    let acc = last.iter().sum::<f64>() / t as f64;
    let bwt = (t >= 2).then(|| (0..t - 1).map(|i| last[i] - auc_matrix[i][i]).sum::<f64>() / (t - 1) as f64);
    Ok(ClMetrics {
        auc_matrix: auc_matrix.to_vec(),
        acc,
        bwt,
    })
}

impl ClMetrics {
    pub fn bwt(&self) -> Result<f64> {
        self.bwt.ok_or(Error::BwtUndefined)
    }
}

/// Global Mahalanobis distance of each pixel from the scene mean.
pub fn rx_baseline(cube: &HsiCube) -> Result<ScoreMap> {
    let c = cube.channels();
    let n = cube.pixel_count();
    let mut mean = DVector::<f64>::zeros(c);
    for p in 0..n {
        for (m, &v) in mean.iter_mut().zip(cube.pixel_at(p)) {
            *m += v as f64;
        }
    }
    mean /= n as f64;
    let mut cov = DMatrix::<f64>::zeros(c, c);
    let mut dev = DVector::<f64>::zeros(c);
    for p in 0..n {
        for ((d, &v), m) in dev.iter_mut().zip(cube.pixel_at(p)).zip(mean.iter()) {
            *d = v as f64 - m;
        }
        cov.syger(1.0, &dev, &dev, 1.0);
    }
    cov /= n as f64;
    let trace = cov.trace();
    let chol = match cov.clone().cholesky() {
        Some(ch) => ch,
        None => {
            let ridge = if trace > 0.0 { 1e-6 * trace / c as f64 } else { 1e-6 };
            let mut reg = cov;
            for i in 0..c {
                reg[(i, i)] += ridge;
            }
            reg.cholesky()
                .ok_or_else(|| Error::Malformed("covariance not positive definite after ridge".into()))?
        }
    };
    let l = chol.l();
    let mut scores = Vec::with_capacity(n);
    for p in 0..n {
        for ((d, &v), m) in dev.iter_mut().zip(cube.pixel_at(p)).zip(mean.iter()) {
            *d = v as f64 - m;
        }
        let z = l
            .solve_lower_triangular(&dev)
            .ok_or_else(|| Error::Malformed("singular Cholesky factor".into()))?;
        scores.push(z.norm_squared());
    }
    ScoreMap::new(cube.height(), cube.width(), scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Identity(usize);
    impl Reconstructor for Identity {
        fn feature_dim(&self) -> usize {
            self.0
        }
        fn reconstruct(&self, batch: &[f64], _rows: usize) -> Result<Vec<f64>> {
            Ok(batch.to_vec())
        }
    }

    struct Zero(usize);
    impl Reconstructor for Zero {
        fn feature_dim(&self) -> usize {
            self.0
        }
        fn reconstruct(&self, batch: &[f64], _rows: usize) -> Result<Vec<f64>> {
            Ok(vec![0.0; batch.len()])
        }
    }

    fn features(h: usize, w: usize, dim: usize, vectors: Vec<f64>) -> FeatureMatrix {
        FeatureMatrix {
            height: h,
            width: w,
            dim,
            window: 3,
            vectors,
        }
    }

    fn mann_whitney(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj == 1 {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn identity_reconstructor_scores_zero() {
        let f = features(2, 2, 3, (0..12).map(|v| v as f64 / 12.0).collect());
        let s = score_map(&Identity(3), &f).unwrap();
        assert!(s.scores.iter().all(|&v| v == 0.0));
        assert!(matches!(score_map(&Identity(4), &f), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn squared_residual_norm() {
        let f = features(1, 2, 2, vec![0.3, 0.0, 0.0, 0.0]);
        let s = score_map(&Zero(2), &f).unwrap();
        assert!((s.scores[0] - 0.09).abs() < 1e-15);
        assert_eq!(s.scores[1], 0.0);
    }

    #[test]
    fn score_map_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..30).map(|_| rng.random_range(0.0..1.0)).collect();
        let perm = [4, 2, 9, 0, 1, 7, 3, 8, 5, 6];
        let pv: Vec<f64> = perm.iter().flat_map(|&p| v[p * 3..p * 3 + 3].to_vec()).collect();
        let a = score_map(&Zero(3), &features(2, 5, 3, v)).unwrap();
        let b = score_map(&Zero(3), &features(2, 5, 3, pv)).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert_eq!(b.scores[k], a.scores[p]);
        }
    }

    #[test]
    fn normalization_bounds() {
        let m = ScoreMap::new(1, 4, vec![2.0, 4.0, 3.0, 6.0]).unwrap().normalized();
        assert_eq!(m.scores, vec![0.0, 0.5, 0.25, 1.0]);
        let c = ScoreMap::new(1, 3, vec![5.0; 3]).unwrap().normalized();
        assert_eq!(c.scores, vec![0.0; 3]);
    }

    #[test]
    fn separated_scores_reach_perfect_detection() {
        let scores = [0.9, 0.8, 0.7, 0.4, 0.3, 0.1];
        let labels = [1, 1, 0, 0, 0, 0];
        let roc = roc_from_labels(&scores, &labels, 512).unwrap();
        assert!(roc.iter().any(|p| p.pd == 1.0 && p.pf == 0.0));
        assert!((auc_suite(&roc).unwrap().auc_df - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tied_scores_give_chance_auc() {
        let roc = roc_from_labels(&[0.0; 6], &[1, 0, 0, 0, 0, 1], 512).unwrap();
        assert_eq!(roc.first().map(|p| (p.pd, p.pf)), Some((1.0, 1.0)));
        assert_eq!(roc.last().map(|p| (p.pd, p.pf)), Some((0.0, 0.0)));
        assert!((auc_suite(&roc).unwrap().auc_df - 0.5).abs() < 1e-12);
    }

    #[test]
    fn roc_rejects_single_class() {
        assert!(matches!(roc_from_labels(&[0.1, 0.2], &[0, 0], 8), Err(Error::SingleClassTruth)));
        assert!(matches!(auc_suite(&[]), Err(Error::TooFewPoints(0))));
    }

    #[test]
    fn published_rows_reproduce() {
        let rx = AucReport::from_base(0.9884, 0.0893, 0.0115);
        assert!((rx.auc_td - 1.0777).abs() < 1e-4);
        assert!((rx.auc_bs - 0.9769).abs() < 1e-4);
        assert!((rx.auc_tdbs - 0.0778).abs() < 1e-4);
        assert!((rx.auc_snpr - 7.7652).abs() < 0.01);
        assert!((rx.auc_odp - 1.0662).abs() < 1e-4);
        let gaed = AucReport::from_base(0.9931, 0.0321, 0.0004);
        assert!((gaed.auc_snpr - 80.25).abs() < 0.01);
        let ideal = AucReport::from_base(1.0, 1.0, 0.0);
        assert_eq!((ideal.auc_td, ideal.auc_bs, ideal.auc_odp), (2.0, 1.0, 2.0));
        assert_eq!(ideal.auc_snpr, f64::INFINITY);
        assert!(ideal.identity_error() < 1e-9);
    }

    #[test]
    fn infinite_ratio_serializes_as_text() {
        let r = AucReport::from_base(1.0, 1.0, 0.0);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"auc_snpr\":\"inf\""));
        let back: AucReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn continual_metrics() {
        let one = cl_metrics(&[vec![0.9]]).unwrap();
        assert_eq!(one.acc, 0.9);
        assert!(matches!(one.bwt(), Err(Error::BwtUndefined)));
        assert!(!serde_json::to_string(&one).unwrap().contains("bwt"));
        let two = cl_metrics(&[vec![0.90], vec![0.85, 0.95]]).unwrap();
        assert!((two.acc - 0.90).abs() < 1e-12);
        assert!((two.bwt.unwrap() + 0.05).abs() < 1e-12);
        let flat = cl_metrics(&[vec![0.7], vec![0.7, 0.8], vec![0.7, 0.8, 0.6]]).unwrap();
        assert_eq!(flat.bwt, Some(0.0));
        assert!(cl_metrics(&[vec![0.9, 0.1]]).is_err());
        assert!(cl_metrics(&[]).is_err());
    }

    #[test]
    fn rx_on_constant_cube_is_zero() {
        let cube = HsiCube::new(3, 3, 4, vec![0.5; 36]).unwrap();
        let s = rx_baseline(&cube).unwrap();
        assert!(s.scores.iter().all(|&v| v.abs() < 1e-9));
    }

    /// Whitened data: covariance is near identity, so RX is close to the
    /// squared Euclidean distance from the mean.
    #[test]
    fn rx_with_identity_covariance() {
        let (h, w, c) = (2, 2, 2);
        let v = [1.0f32, 1.0, -1.0, 1.0, 1.0, -1.0, -1.0, -1.0];
        let cube = HsiCube::new(h, w, c, v.to_vec()).unwrap();
        let s = rx_baseline(&cube).unwrap();
        for p in 0..4 {
            let d: f64 = cube.pixel_at(p).iter().map(|&x| (x as f64).powi(2)).sum();
            assert!((s.scores[p] - d).abs() < 1e-9);
        }
    }

    #[test]
    fn exports_round_trip() {
        let m = ScoreMap::new(2, 3, vec![0.0, 0.1, 0.2, 0.3, 0.4, 1e-17]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.smap");
        m.save_binary(&p).unwrap();
        assert_eq!(ScoreMap::load_binary(&p).unwrap(), m);
        let text = m.to_text();
        assert_eq!(text.lines().count(), 3);
        let parsed: Vec<f64> = text.lines().skip(1).flat_map(|l| l.split(' ').map(|t| t.parse::<f64>().unwrap())).collect();
        assert_eq!(parsed, m.scores);
        let q = dir.path().join("d.msk");
        m.save_detection_mask(0.25, &q).unwrap();
        let bytes = std::fs::read(&q).unwrap();
        assert_eq!(&bytes[12..], &[0, 0, 0, 1, 1, 0]);
    }

    proptest! {
        #[test]
        fn trapezoid_equals_mann_whitney(
            raw in proptest::collection::vec((0u8..6, any::<bool>()), 2..=20)
        ) {
            let scores: Vec<f64> = raw.iter().map(|(s, _)| *s as f64 / 5.0).collect();
            let labels: Vec<u8> = raw.iter().map(|(_, l)| u8::from(*l)).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let roc = roc_from_labels(&scores, &labels, DEFAULT_THRESHOLDS).unwrap();
            let auc = auc_suite(&roc).unwrap();
            prop_assert!((auc.auc_df - mann_whitney(&scores, &labels)).abs() < 1e-9);
            prop_assert!(auc.identity_error() < 1e-9);
        }

        #[test]
        fn roc_is_monotone_with_fixed_ends(
            scores in proptest::collection::vec(0.0f64..1.0, 4..60),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<u8> = scores.iter().map(|_| u8::from(rng.random_bool(0.3))).collect();
            labels[0] = 1;
            labels[1] = 0;
            let roc = roc_from_labels(&scores, &labels, 16).unwrap();
            prop_assert_eq!((roc[0].pd, roc[0].pf, roc[0].tau), (1.0, 1.0, 0.0));
            let last = roc.last().unwrap();
            prop_assert_eq!((last.pd, last.pf), (0.0, 0.0));
            for w in roc.windows(2) {
                prop_assert!(w[1].tau >= w[0].tau);
                prop_assert!(w[1].pd <= w[0].pd && w[1].pf <= w[0].pf);
            }
            prop_assert!(roc.len() <= 17);
        }

        #[test]
        fn auc_invariant_under_increasing_transform(
            scores in proptest::collection::vec(0.0f64..1.0, 4..40),
        ) {
            let labels: Vec<u8> = (0..scores.len()).map(|i| u8::from(i % 3 == 0)).collect();
            let a = ScoreMap::new(1, scores.len(), scores.clone()).unwrap();
            let b = ScoreMap::new(1, scores.len(), scores.iter().map(|s| (3.0 * s).exp() + s.powi(3)).collect()).unwrap();
            let ra = auc_suite(&roc_from_labels(&a.normalized().scores, &labels, 4096).unwrap()).unwrap();
            let rb = auc_suite(&roc_from_labels(&b.normalized().scores, &labels, 4096).unwrap()).unwrap();
            prop_assert!((ra.auc_df - rb.auc_df).abs() < 1e-9);
        }
    }
}
