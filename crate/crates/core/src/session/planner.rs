//! Action planning. A planner looks at the latest audio window and the
//! reference and proposes the next behavioral state.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::audio::AudioFeatureFrame;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionTag {
    SpeakingGesture,
    ListeningNod,
    Idle,
    Other(String),
}

impl fmt::Display for ActionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionTag::SpeakingGesture => f.write_str("speaking-gesture"),
            ActionTag::ListeningNod => f.write_str("listening-nod"),
            ActionTag::Idle => f.write_str("idle"),
            ActionTag::Other(s) => f.write_str(s),
        }
    }
}

pub trait ActionPlanner: Send + Sync {
    fn plan(&self, window: &[AudioFeatureFrame], reference_digest: u64, rng: &mut ChaCha8Rng) -> ActionTag;
}

/// Threshold rule on mean RMS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmsPlanner {
    pub threshold: f64,
}

impl Default for RmsPlanner {
    fn default() -> Self {
        Self { threshold: 0.1 }
    }
}

impl ActionPlanner for RmsPlanner {
    fn plan(&self, window: &[AudioFeatureFrame], _reference_digest: u64, _rng: &mut ChaCha8Rng) -> ActionTag {
        plan_action(window, self.threshold)
    }
}

pub fn plan_action(window: &[AudioFeatureFrame], threshold: f64) -> ActionTag {
    let mean = if window.is_empty() {
        0.0
    } else {
        window.iter().map(AudioFeatureFrame::rms).sum::<f64>() / window.len() as f64
    };
    if mean > threshold {
        ActionTag::SpeakingGesture
    } else if mean > threshold / 4.0 {
        ActionTag::ListeningNod
    } else {
        ActionTag::Idle
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::audio::{sine, FeatureExtractor};
    use rand::SeedableRng;

    #[test]
    fn rule_examples() {
        let ex = FeatureExtractor::new(8).unwrap();
        let planner = RmsPlanner::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let silent = ex.aggregate(&vec![0.0; 6400]);
        assert_eq!(planner.plan(&silent, 0, &mut rng), ActionTag::Idle);
        let loud = ex.aggregate(&sine(440.0, 1.0, 0.4));
        assert_eq!(planner.plan(&loud, 0, &mut rng), ActionTag::SpeakingGesture);
        let quiet = ex.aggregate(&sine(440.0, 0.05, 0.4));
        assert_eq!(planner.plan(&quiet, 0, &mut rng), ActionTag::ListeningNod);

        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(planner.plan(&quiet, 3, &mut a), planner.plan(&quiet, 3, &mut b));
        assert_eq!(planner.plan(&[], 0, &mut rng), ActionTag::Idle);
    }
}
