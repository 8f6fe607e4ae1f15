use serde::{Deserialize, Serialize};

/// Opt-in deviations from the default gating and loss design.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ablations {
    /// Perturb gate logits with trainable-scale Gaussian noise during training.
    pub noisy_gating: bool,
    /// Add the importance (CV²) load-balancing loss.
    pub load_balance: bool,
    /// Replace the channel-shift prior with the random-allocation baseline.
    pub random_allocation: bool,
}

impl Ablations {
    /// Parse a comma-separated list such as `noisy,load-balance`.
    pub fn parse(spec: &str) -> Result<Self, String> {
        let mut out = Self::default();
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match part {
                "none" => {}
                "noisy" | "noisy-gating" => out.noisy_gating = true,
                "load" | "load-balance" => out.load_balance = true,
                "random-allocation" => out.random_allocation = true,
                other => return Err(format!("unknown ablation '{other}'")),
            }
        }
        Ok(out)
    }

    pub fn names(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.noisy_gating {
            v.push("noisy-gating");
        }
        if self.load_balance {
            v.push("load-balance");
        }
        if self.random_allocation {
            v.push("random-allocation");
        }
        v
    }
}
