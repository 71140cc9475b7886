use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::ThetaMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerClass {
    Efficient,
    Demanding,
}

/// Number of layers in the lowest `rho` fraction of `n_layers`, rounded up.
pub fn demanding_count(n_layers: usize, rho: f64) -> usize {
    // guard against 6 * (1/6) landing a hair above 1
    let raw = rho * n_layers as f64 - 1e-9;
    (raw.ceil().max(0.0) as usize).min(n_layers)
}

/// Classifies one layer from its similarity score.
///
/// In quantile mode `fleet_scores` holds every layer's score at the same
/// scale, indexed by layer; ties rank the lower layer index first.
pub fn classify_layer(
    layer: usize,
    score: f64,
    theta: &ThetaMode,
    fleet_scores: Option<&[f64]>,
) -> Result<LayerClass> {
    let demanding = match *theta {
        ThetaMode::Absolute { value } => score < value,
        ThetaMode::Quantile { rho } => {
            let fleet = fleet_scores.ok_or_else(|| {
                Error::Config("quantile classification needs the fleet's scores".into())
            })?;
            if layer >= fleet.len() {
                return Err(Error::Config(format!(
                    "layer {layer} outside a fleet of {} scores",
                    fleet.len()
                )));
            }
            let rank = fleet
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s < score || (s == score && j < layer))
                .count();
            rank < demanding_count(fleet.len(), rho)
        }
    };
    Ok(if demanding {
        LayerClass::Demanding
    } else {
        LayerClass::Efficient
    })
}

pub fn classify_layers(theta: &ThetaMode, scores: &[f64]) -> Result<Vec<LayerClass>> {
    scores
        .iter()
        .enumerate()
        .map(|(l, &s)| classify_layer(l, s, theta, Some(scores)))
        .collect()
}

/// Threshold separating the lowest `rho` fraction of `scores` from the rest:
/// the midpoint between the last demanding and first efficient score.
/// Returns `f64::MIN` when no layer is demanding and `f64::MAX` when all are.
pub fn quantile_threshold(scores: &[f64], rho: f64) -> f64 {
    let n = demanding_count(scores.len(), rho);
    if n == 0 {
        return f64::MIN;
    }
    if n >= scores.len() {
        return f64::MAX;
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    0.5 * (sorted[n - 1] + sorted[n])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absolute_mode() {
        let t = ThetaMode::Absolute { value: -5.0 };
        assert_eq!(
            classify_layer(0, -7.0, &t, None).unwrap(),
            LayerClass::Demanding
        );
        assert_eq!(
            classify_layer(0, -5.0, &t, None).unwrap(),
            LayerClass::Efficient
        );
        // zero distance is the maximum score
        assert_eq!(
            classify_layer(0, 0.0, &ThetaMode::Absolute { value: -1e-12 }, None).unwrap(),
            LayerClass::Efficient
        );
    }

    #[test]
    fn quantile_mode_six_layers() {
        let scores = [-1.0, -2.0, -3.0, -4.0, -5.0, -9.0];
        let t = ThetaMode::Quantile { rho: 1.0 / 6.0 };
        let classes = classify_layers(&t, &scores).unwrap();
        let demanding: Vec<usize> = (0..6)
            .filter(|&l| classes[l] == LayerClass::Demanding)
            .collect();
        assert_eq!(demanding, vec![5]);
        let th = quantile_threshold(&scores, 1.0 / 6.0);
        assert_eq!(th, -7.0);
        assert_eq!(scores.iter().filter(|&&s| s < th).count(), 1);
    }

    #[test]
    fn quantile_ties_prefer_lower_index() {
        let scores = [-3.0, -3.0, -1.0, -1.0, -1.0, -1.0];
        let t = ThetaMode::Quantile { rho: 1.0 / 6.0 };
        let classes = classify_layers(&t, &scores).unwrap();
        assert_eq!(classes[0], LayerClass::Demanding);
        assert_eq!(classes[1], LayerClass::Efficient);
    }

    #[test]
    fn quantile_without_fleet() {
        let t = ThetaMode::Quantile { rho: 0.5 };
        assert!(matches!(
            classify_layer(0, -1.0, &t, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn demanding_counts() {
        assert_eq!(demanding_count(6, 1.0 / 6.0), 1);
        assert_eq!(demanding_count(30, 1.0 / 6.0), 5);
        assert_eq!(demanding_count(2, 1.0 / 6.0), 1);
        assert_eq!(demanding_count(4, 1.0), 4);
        assert_eq!(quantile_threshold(&[-1.0, -2.0], 1.0), f64::MAX);
    }
}
