//! Evaluation metrics: RMSE, MAE, MNAD, per-step Pearson correlation, high
//! correction time, and radially binned energy spectra.

use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_same_shape(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<()> {
    if pred.shape() != truth.shape() {
        return Err(Error::ShapeMismatch {
            left: pred.shape().to_vec(),
            right: truth.shape().to_vec(),
        });
    }
    Ok(())
}

/// Root mean square error over every entry of one trajectory.
pub fn rmse(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<f64> {
    check_same_shape(pred, truth)?;
    let n = pred.numel() as f64;
    let ss: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((ss / n).sqrt())
}

/// Mean absolute error over every entry of one trajectory.
pub fn mae(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<f64> {
    check_same_shape(pred, truth)?;
    let n = pred.numel() as f64;
    let s: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(s / n)
}

/// Mean absolute error normalised by the ground-truth value range.
pub fn mnad(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<f64> {
    check_same_shape(pred, truth)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in truth.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let range = hi - lo;
    if range <= 0.0 || range.is_nan() {
        return Err(Error::NonPositive {
            name: "truth value range",
            value: range,
        });
    }
    Ok(mae(pred, truth)? / range)
}

/// Pearson correlation of two flattened snapshots.
pub fn pcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            left: vec![pred.len()],
            right: vec![truth.len()],
        });
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vp = 0.0;
    let mut vt = 0.0;
    for (&a, &b) in pred.iter().zip(truth) {
        cov += (a - mp) * (b - mt);
        vp += (a - mp) * (a - mp);
        vt += (b - mt) * (b - mt);
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(Error::NonPositive {
            name: "snapshot variance",
            value: 0.0,
        });
    }
    Ok(cov / (vp.sqrt() * vt.sqrt()))
}

/// Per-snapshot PCC for trajectories `[n_t, C, H, W]`, skipping the shared
/// initial condition at index 0.
pub fn pcc_curve(pred: &Tensor<f64>, truth: &Tensor<f64>) -> Result<Vec<f64>> {
    check_same_shape(pred, truth)?;
    let n_t = pred.shape()[0];
    let snap: usize = pred.shape()[1..].iter().product();
    (1..n_t)
        .map(|t| {
            pcc(
                &pred.data()[t * snap..(t + 1) * snap],
                &truth.data()[t * snap..(t + 1) * snap],
            )
        })
        .collect()
}

/// High-correction time from a PCC sequence: `sum dt * 1(pcc > 0.8)`,
/// counted over every step (the indicator sum need not be contiguous).
pub fn hct_from_pcc(pcc: &[f64], dt: f64) -> f64 {
    dt * pcc.iter().filter(|&&c| c > 0.8).count() as f64
}

/// Alternative contiguous reading: simulated time until the correlation
/// first drops to 0.8 or below.
pub fn hct_contiguous_from_pcc(pcc: &[f64], dt: f64) -> f64 {
    dt * pcc.iter().take_while(|&&c| c > 0.8).count() as f64
}

/// High-correction time between two trajectories of equal length.
pub fn hct(pred: &Tensor<f64>, truth: &Tensor<f64>, dt: f64) -> Result<f64> {
    Ok(hct_from_pcc(&pcc_curve(pred, truth)?, dt))
}

/// Radially binned kinetic energy spectrum of a `[2, H, W]` velocity field:
/// shells at integer `k = round(sqrt(kx^2 + ky^2))`, zero mode excluded,
/// normalised so that `sum_k E(k) = 0.5 * sum(u^2 + v^2) / (H W)` for
/// zero-mean fields.
pub fn energy_spectrum(field: &Tensor<f64>) -> Result<Vec<(usize, f64)>> {
    let (c, h, w) = field.as_planes()?;
    if c != 2 {
        return Err(Error::ChannelMismatch {
            context: "energy_spectrum",
            expected: 2,
            got: c,
        });
    }
    if h != w {
        return Err(Error::GridShape { h, w });
    }
    let n = h;
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n);
    let mut spectra = Vec::with_capacity(2);
    for ch in 0..2 {
        let mut buf: Vec<Complex<f64>> = field.data()[ch * n * n..(ch + 1) * n * n]
            .iter()
            .map(|&v| Complex::new(v, 0.0))
            .collect();
        for row in buf.chunks_exact_mut(n) {
            fft.process(row);
        }
        let mut col = vec![Complex::new(0.0, 0.0); n];
        for j in 0..n {
            for i in 0..n {
                col[i] = buf[i * n + j];
            }
            fft.process(&mut col);
            for i in 0..n {
                buf[i * n + j] = col[i];
            }
        }
        spectra.push(buf);
    }
    let signed = |k: usize| -> f64 {
        let s = if k <= n / 2 { k as i64 } else { k as i64 - n as i64 };
        s as f64
    };
    let kmax = ((2.0f64).sqrt() * (n as f64 / 2.0)).round() as usize;
    let mut shells = vec![0.0f64; kmax + 1];
    let norm = 1.0 / ((n * n) as f64 * (n * n) as f64);
    for i in 0..n {
        for j in 0..n {
            let kr = (signed(i).powi(2) + signed(j).powi(2)).sqrt();
            let shell = kr.round() as usize;
            if shell == 0 {
                continue;
            }
            let p = i * n + j;
            let e = 0.5 * (spectra[0][p].norm_sqr() + spectra[1][p].norm_sqr()) * norm;
            shells[shell] += e;
        }
    }
    Ok(shells
        .into_iter()
        .enumerate()
        .skip(1)
        .collect())
}

/// Per-trajectory evaluation row. Diverged rollouts carry NaNs.
#[derive(Debug, Clone)]
pub struct TrajectoryMetrics {
    pub id: String,
    pub rmse: f64,
    pub mae: f64,
    pub mnad: f64,
    pub hct: f64,
    pub diverged: bool,
}

impl TrajectoryMetrics {
    pub fn diverged(id: String) -> Self {
        TrajectoryMetrics {
            id,
            rmse: f64::NAN,
            mae: f64::NAN,
            mnad: f64::NAN,
            hct: f64::NAN,
            diverged: true,
        }
    }
}

/// Metric rows plus their mean. NaNs from diverged trajectories propagate
/// into the mean row.
#[derive(Debug, Clone, Default)]
pub struct MetricReport {
    pub rows: Vec<TrajectoryMetrics>,
}

impl MetricReport {
    pub fn push(&mut self, row: TrajectoryMetrics) {
        self.rows.push(row);
    }

    pub fn mean(&self) -> TrajectoryMetrics {
        let n = self.rows.len().max(1) as f64;
        let sum = |f: fn(&TrajectoryMetrics) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        TrajectoryMetrics {
            id: "mean".into(),
            rmse: sum(|r| r.rmse),
            mae: sum(|r| r.mae),
            mnad: sum(|r| r.mnad),
            hct: sum(|r| r.hct),
            diverged: self.rows.iter().any(|r| r.diverged),
        }
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: f64| {
            if v.is_nan() {
                "NaN".to_string()
            } else {
                format!("{v}")
            }
        };
        let mut out = String::from("trajectory_id,rmse,mae,mnad,hct\n");
        for r in self.rows.iter().chain(std::iter::once(&self.mean())) {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.id,
                fmt(r.rmse),
                fmt(r.mae),
                fmt(r.mnad),
                fmt(r.hct)
            ));
        }
        out
    }
}

/// Spectrum table as CSV with a Parseval-consistency header comment.
pub fn spectrum_to_csv(spectrum: &[(usize, f64)], parseval_rel_err: Option<f64>) -> String {
    let mut out = String::new();
    if let Some(err) = parseval_rel_err {
        out.push_str(&format!("# parseval_rel_err={err:.3e}\n"));
    }
    out.push_str("k,E\n");
    for (k, e) in spectrum {
        out.push_str(&format!("{k},{e}\n"));
    }
    out
}
