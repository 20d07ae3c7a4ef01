use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnalyticMixtureModel, LearnedScoreNet};
use crate::error::Result;

/// On-disk model document, tagged by `kind`. Floats round-trip bit-exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Checkpoint {
    LearnedScoreNet(LearnedScoreNet),
    AnalyticMixture(AnalyticMixtureModel),
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learned_checkpoint_round_trips_bit_exactly() {
        let net = LearnedScoreNet::new(2, 4, &[16, 16], 8, 77);
        let ck = Checkpoint::LearnedScoreNet(net.clone());
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        let Checkpoint::LearnedScoreNet(got) = back else {
            panic!("wrong kind")
        };
        for (a, b) in got.layers.iter().zip(&net.layers) {
            for (x, y) in a.weights.iter().zip(&b.weights) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert!(ck.to_json().unwrap().contains("\"kind\": \"learned_score_net\""));
    }
}
