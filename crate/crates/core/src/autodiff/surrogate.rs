use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    #[default]
    Arctan,
}

/// Smooth stand-in for the Heaviside derivative used on the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateConfig {
    #[serde(default)]
    pub kind: SurrogateKind,
    #[serde(default = "default_width")]
    pub width: f64,
}

fn default_width() -> f64 {
    2.0
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            kind: SurrogateKind::Arctan,
            width: default_width(),
        }
    }
}

impl SurrogateConfig {
    /// Derivative of the surrogate at `u = input - vth`.
    ///
    /// For the arctan surrogate `H(u) ≈ atan(π/2·w·u)/π + 1/2` this is
    /// `w / (2·(1 + (π/2·w·u)²))`, peaking at `w/2` when `u = 0`.
    pub fn derivative(&self, u: f64) -> f64 {
        match self.kind {
            SurrogateKind::Arctan => {
                let z = FRAC_PI_2 * self.width * u;
                self.width / (2.0 * (1.0 + z * z))
            }
        }
    }

    /// The smooth primitive whose derivative is [`Self::derivative`].
    pub fn primitive(&self, u: f64) -> f64 {
        match self.kind {
            SurrogateKind::Arctan => (FRAC_PI_2 * self.width * u).atan() / std::f64::consts::PI + 0.5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_and_unit_offset() {
        let cfg = SurrogateConfig::default();
        assert_eq!(cfg.derivative(0.0), 1.0);
        let expected = 1.0 / (1.0 + std::f64::consts::PI.powi(2));
        assert!((cfg.derivative(1.0) - expected).abs() < 1e-15);
        assert!((cfg.derivative(1.0) - 0.09199).abs() < 1e-5);
    }

    #[test]
    fn primitive_matches_derivative() {
        let cfg = SurrogateConfig { width: 1.3, ..Default::default() };
        for &u in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let h = 1e-6;
            let fd = (cfg.primitive(u + h) - cfg.primitive(u - h)) / (2.0 * h);
            assert!((fd - cfg.derivative(u)).abs() < 1e-8);
        }
    }

    proptest::proptest! {
        #[test]
        fn nonnegative_even_and_peaked(u in -50.0f64..50.0, w in 0.1f64..8.0) {
            let cfg = SurrogateConfig { kind: SurrogateKind::Arctan, width: w };
            let d = cfg.derivative(u);
            proptest::prop_assert!(d >= 0.0);
            proptest::prop_assert_eq!(d, cfg.derivative(-u));
            proptest::prop_assert!(d <= cfg.derivative(0.0));
        }
    }
}
