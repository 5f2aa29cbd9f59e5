use serde::Serialize;

use super::{DataError, VideoRecord};

/// Face-frame area ratio summary, in percent. `variance` is the population
/// variance (percent squared).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RatioStats {
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub variance: f64,
}

pub fn ratio_stats(videos: &[VideoRecord]) -> Result<RatioStats, DataError> {
    let mut count = 0usize;
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut mean, mut m2) = (0.0, 0.0);
    let ratios = videos
        .iter()
        .flat_map(|v| &v.tracks)
        .flat_map(|t| &t.faces)
        .map(|f| f.area_ratio() * 100.0);
    for r in ratios {
        // Welford update
        count += 1;
        let delta = r - mean;
        mean += delta / count as f64;
        m2 += delta * (r - mean);
        min = min.min(r);
        max = max.max(r);
    }
    if count == 0 {
        return Err(DataError::Empty);
    }
    Ok(RatioStats {
        count,
        min,
        max,
        mean,
        variance: m2 / count as f64,
    })
}
