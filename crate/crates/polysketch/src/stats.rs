//! Small sample-statistics helpers shared by the Monte-Carlo checks and the
//! experiment reports.

/// Mean, variance and their standard errors for a sample of scalars.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSummary {
    pub n: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    /// Fourth central moment (plug-in).
    pub central_m4: f64,
}

impl SampleSummary {
    /// Two-pass summary of `xs`. Returns NaN fields for an empty slice.
    pub fn from_slice(xs: &[f64]) -> Self {
        let n = xs.len();
        let nf = n as f64;
        let mean = xs.iter().sum::<f64>() / nf;
        let mut m2 = 0.0;
        let mut m4 = 0.0;
        for &x in xs {
            let d = x - mean;
            let d2 = d * d;
            m2 += d2;
            m4 += d2 * d2;
        }
        let variance = if n > 1 { m2 / (nf - 1.0) } else { 0.0 };
        Self {
            n,
            mean,
            variance,
            central_m4: m4 / nf,
        }
    }

    pub fn std(&self) -> f64 {
        self.variance.sqrt()
    }

    /// Standard error of the sample mean.
    pub fn se_mean(&self) -> f64 {
        (self.variance / self.n as f64).sqrt()
    }

    /// Large-sample standard error of the sample variance,
    /// `sqrt((m4 - s^4) / n)`.
    pub fn se_variance(&self) -> f64 {
        let s4 = self.variance * self.variance;
        ((self.central_m4 - s4).max(0.0) / self.n as f64).sqrt()
    }
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let s = SampleSummary::from_slice(xs);
    (s.mean, s.std())
}
