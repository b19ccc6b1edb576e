//! Evaluation measures computed against the synthetic oracle.

use emovc_numerics::Tensor;
use nalgebra::{DMatrix, DVector};

use crate::corpus::{Utterance, NUM_EMOTIONS};
use crate::error::{CoreError, Result};

/// Per-dimension standardization of Mel frames.
#[derive(Debug, Clone, PartialEq)]
pub struct MelNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MelNorm {
    pub fn fit<'a>(frames: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for t in frames {
            if sum.is_empty() {
                sum = vec![0.0; t.cols()];
                sq = vec![0.0; t.cols()];
            }
            for row in t.data().chunks(t.cols()) {
                for (j, &v) in row.iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1;
            }
        }
        if n < 2 {
            return Err(CoreError::Data("need at least two frames to standardize".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n as f64 - m * m) * n as f64 / (n - 1) as f64).max(1e-12).sqrt())
            .collect();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, t: &Tensor) -> Tensor {
        let d = self.mean.len();
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % d]) / self.std[i % d];
        }
        out
    }

    pub fn denormalize(&self, t: &Tensor) -> Tensor {
        let d = self.mean.len();
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[i % d] + self.mean[i % d];
        }
        out
    }
}

/// Linear probe of normalized Mel on `[content, intensity·onehot(class), 1]`
/// fitted on oracle targets. It recovers the content map and one emotion
/// axis per class.
#[derive(Debug, Clone, PartialEq)]
pub struct EmotionProbe {
    /// `D_c × D_mel`
    pub content_map: DMatrix<f64>,
    /// `D_mel`
    pub bias: DVector<f64>,
    /// Unit axes, one per class.
    pub axes: Vec<DVector<f64>>,
    /// Axis lengths before normalization.
    pub axis_norms: Vec<f64>,
}

fn ridge_solve(x: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let xt = x.transpose();
    let mut gram = &xt * x;
    for i in 0..gram.nrows() {
        gram[(i, i)] += ridge;
    }
    let rhs = &xt * y;
    gram.cholesky()
        .map(|c| c.solve(&rhs))
        .ok_or_else(|| CoreError::Data("probe normal equations are singular".into()))
}

impl EmotionProbe {
    pub fn fit(utterances: &[&Utterance], norm: &MelNorm) -> Result<Self> {
        let Some(first) = utterances.first() else {
            return Err(CoreError::Data("cannot fit a probe on no utterances".into()));
        };
        let d_c = first.content_features.cols();
        let d_m = first.mel_target.cols();
        let p = d_c + NUM_EMOTIONS + 1;
        let rows: usize = utterances.iter().map(|u| u.frames()).sum();
        let mut x = DMatrix::zeros(rows, p);
        let mut y = DMatrix::zeros(rows, d_m);
        let mut r = 0;
        for u in utterances {
            let mel = norm.normalize(&u.mel_target);
            for t in 0..u.frames() {
                for j in 0..d_c {
                    x[(r, j)] = u.content_features.at(t, j);
                }
                x[(r, d_c + u.emotion_id)] = u.intensity_gt;
                x[(r, p - 1)] = 1.0;
                for j in 0..d_m {
                    y[(r, j)] = mel.at(t, j);
                }
                r += 1;
            }
        }
        let w = ridge_solve(&x, &y, 1e-9)?;
        let content_map = w.rows(0, d_c).into_owned();
        let bias = w.row(p - 1).transpose();
        let mut axes = Vec::with_capacity(NUM_EMOTIONS);
        let mut axis_norms = Vec::with_capacity(NUM_EMOTIONS);
        for c in 0..NUM_EMOTIONS {
            let a = w.row(d_c + c).transpose();
            let n = a.norm();
            axis_norms.push(n);
            axes.push(a / n.max(1e-300));
        }
        Ok(Self {
            content_map,
            bias,
            axes,
            axis_norms,
        })
    }

    /// Time-mean of the Mel residual after removing the content map.
    pub fn emotion_residual(&self, mel_norm: &Tensor, content: &Tensor) -> Result<DVector<f64>> {
        let (t, d_m) = mel_norm.dims2();
        if content.rows() != t || content.cols() != self.content_map.nrows() || d_m != self.bias.len() {
            return Err(CoreError::Data("Mel and content shapes do not match the probe".into()));
        }
        let mut mean = DVector::zeros(d_m);
        for i in 0..t {
            let c = DVector::from_row_slice(content.row(i));
            let pred = self.content_map.transpose() * c + &self.bias;
            for j in 0..d_m {
                mean[j] += mel_norm.at(i, j) - pred[j];
            }
        }
        Ok(mean / t as f64)
    }

    /// Cosine between the residual and a class axis, in `[−1, 1]`.
    pub fn eecs(&self, mel_norm: &Tensor, content: &Tensor, emotion_id: usize) -> Result<f64> {
        let r = self.emotion_residual(mel_norm, content)?;
        let n = r.norm();
        if n == 0.0 {
            return Ok(0.0);
        }
        Ok((r.dot(&self.axes[emotion_id]) / n).clamp(-1.0, 1.0))
    }

    /// Signed length of the residual along a class axis.
    pub fn projection(&self, mel_norm: &Tensor, content: &Tensor, emotion_id: usize) -> Result<f64> {
        Ok(self.emotion_residual(mel_norm, content)?.dot(&self.axes[emotion_id]))
    }
}

/// Least-squares linear classifier on one-hot targets; returns training
/// accuracy.
pub fn linear_probe_accuracy(features: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<f64> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(CoreError::Data("probe needs matching, nonempty features and labels".into()));
    }
    let d = features[0].len();
    let x = DMatrix::from_fn(features.len(), d + 1, |i, j| if j == d { 1.0 } else { features[i][j] });
    let y = DMatrix::from_fn(labels.len(), classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
    let w = ridge_solve(&x, &y, 1e-6)?;
    let scores = &x * &w;
    let hits = (0..labels.len())
        .filter(|&i| scores.row(i).transpose().argmax().0 == labels[i])
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn mean_abs_error(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() || a.is_empty() {
        return Err(CoreError::Data(format!("cannot compare {:?} with {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson on average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

/// Trailing moving average with window `w`; the first `w−1` points average
/// what is available.
pub fn moving_average(xs: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
