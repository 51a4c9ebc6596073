/// Number of histogram bins between the minimum and maximum value.
pub const OTSU_BINS: usize = 256;

/// Result of Otsu's method over a value histogram.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtsuSplit {
    /// Highest bin index of the background class.
    pub bin: usize,
    /// Upper edge of `bin` in value units.
    pub threshold: f32,
    pub min: f32,
    pub bin_width: f32,
}

impl OtsuSplit {
    pub fn bin_of(&self, v: f32) -> usize {
        (((v - self.min) / self.bin_width).floor().max(0.0) as usize).min(OTSU_BINS - 1)
    }

    pub fn is_foreground(&self, v: f32) -> bool {
        self.bin_of(v) > self.bin
    }
}

/// Otsu's threshold: the bin split maximizing between-class variance
/// (first maximum on ties). `None` for empty or constant input.
pub fn otsu_split(values: &[f32]) -> Option<OtsuSplit> {
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if values.is_empty() || !(max > min) {
        return None;
    }
    let bin_width = (max - min) / OTSU_BINS as f32;
    let mut split = OtsuSplit { bin: 0, threshold: min + bin_width, min, bin_width };
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[split.bin_of(v)] += 1;
    }

    let total = values.len() as f64;
    let sum_total: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut w0 = 0.0f64;
    let mut sum0 = 0.0f64;
    let mut best = -1.0f64;
    for (k, &count) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += count as f64;
        sum0 += k as f64 * count as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_total - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            split.bin = k;
        }
    }
    split.threshold = min + (split.bin + 1) as f32 * bin_width;
    Some(split)
}
