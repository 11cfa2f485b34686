use serde::Serialize;

use super::Scene;

/// Lower edges of the three ratio bins `[0, 0.1)`, `[0.1, 0.2)`, `[0.2, 1]`.
pub const BIN_EDGES: [f64; 3] = [0.0, 0.1, 0.2];

pub fn ratio_bin(ratio: f64) -> usize {
    if ratio < BIN_EDGES[1] {
        0
    } else if ratio < BIN_EDGES[2] {
        1
    } else {
        2
    }
}

/// Share of pixels covered by the union of the scene's instance masks.
pub fn foreground_ratio(scene: &Scene) -> f64 {
    scene.foreground().count() as f64 / (scene.width() * scene.height()) as f64
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RatioStats {
    pub counts: [usize; 3],
    pub ratios: Vec<f64>,
}

impl RatioStats {
    pub fn from_ratios(ratios: Vec<f64>) -> Self {
        let mut counts = [0; 3];
        for r in &ratios {
            counts[ratio_bin(*r)] += 1;
        }
        Self { counts, ratios }
    }

    /// Share of scenes per bin; zeros for an empty corpus.
    pub fn fractions(&self) -> [f64; 3] {
        let n = self.ratios.len();
        if n == 0 {
            return [0.0; 3];
        }
        self.counts.map(|c| c as f64 / n as f64)
    }
}

pub fn foreground_ratio_stats(scenes: &[Scene]) -> RatioStats {
    RatioStats::from_ratios(scenes.iter().map(foreground_ratio).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_are_half_open() {
        assert_eq!(RatioStats::from_ratios(vec![0.05, 0.15, 0.5]).counts, [1, 1, 1]);
        assert_eq!(ratio_bin(0.1), 1);
        assert_eq!(ratio_bin(0.2), 2);
        assert_eq!(ratio_bin(1.0), 2);
        assert_eq!(ratio_bin(0.0), 0);
        let empty = RatioStats::from_ratios(vec![]);
        assert_eq!(empty.counts, [0, 0, 0]);
        assert_eq!(empty.fractions(), [0.0; 3]);
    }
}
