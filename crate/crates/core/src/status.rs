//! Traffic-light classification of survival ratios.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

/// Deviations within this many percentage points of a threshold count as
/// lying on it, so that e.g. 1.1 and 0.9 both sit exactly on a 10% band.
const BOUNDARY_TOLERANCE_PP: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Status {
    Green,
    Yellow,
    Red,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Green => "Green",
            Status::Yellow => "Yellow",
            Status::Red => "Red",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProfileName {
    Strict,
    Middle,
    Loose,
    Custom,
}

/// Percent thresholds on the deviation of a ratio from parity.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdProfile {
    pub name: ProfileName,
    pub green_below: f64,
    pub red_above: f64,
}

impl ThresholdProfile {
    pub fn strict() -> Self {
        Self {
            name: ProfileName::Strict,
            green_below: 1.0,
            red_above: 10.0,
        }
    }

    pub fn middle() -> Self {
        Self {
            name: ProfileName::Middle,
            green_below: 3.0,
            red_above: 15.0,
        }
    }

    pub fn loose() -> Self {
        Self {
            name: ProfileName::Loose,
            green_below: 5.0,
            red_above: 20.0,
        }
    }

    pub fn custom(green_below: f64, red_above: f64) -> Result<Self> {
        if !(green_below.is_finite() && red_above.is_finite())
            || green_below <= 0.0
            || red_above <= green_below
        {
            return Err(Error::config(
                "thresholds",
                format!("need 0 < green_below < red_above, got {green_below} and {red_above}"),
            ));
        }
        Ok(Self {
            name: ProfileName::Custom,
            green_below,
            red_above,
        })
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "strict" => Some(Self::strict()),
            "middle" => Some(Self::middle()),
            "loose" => Some(Self::loose()),
            _ => None,
        }
    }
}

impl fmt::Display for ThresholdProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.name {
            ProfileName::Strict => f.write_str("strict"),
            ProfileName::Middle => f.write_str("middle"),
            ProfileName::Loose => f.write_str("loose"),
            ProfileName::Custom => write!(f, "custom({},{})", self.green_below, self.red_above),
        }
    }
}

/// Accepts `strict`, `middle`, `loose` or `custom(GREEN,RED)`.
impl FromStr for ThresholdProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(p) = Self::builtin(s) {
            return Ok(p);
        }
        let inner = s
            .strip_prefix("custom(")
            .and_then(|rest| rest.strip_suffix(')'))
            .ok_or_else(|| {
                Error::config("thresholds.profile", format!("unknown color profile '{s}'"))
            })?;
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        let [green, red] = parts.as_slice() else {
            return Err(Error::config(
                "thresholds.profile",
                format!("expected custom(green,red), got '{s}'"),
            ));
        };
        let parse = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::config("thresholds.profile", format!("not a number: '{v}'")))
        };
        Self::custom(parse(green)?, parse(red)?)
    }
}

/// Percentage deviation from parity, `|sr - 1| * 100`.
pub fn deviation_pct(sr: f64) -> f64 {
    (sr - 1.0).abs() * 100.0
}

/// Bands a ratio by its deviation from parity. Values on a threshold are Yellow.
pub fn classify(adjusted_sr: f64, profile: &ThresholdProfile) -> Status {
    let d = deviation_pct(adjusted_sr);
    if d < profile.green_below - BOUNDARY_TOLERANCE_PP {
        Status::Green
    } else if d <= profile.red_above + BOUNDARY_TOLERANCE_PP {
        Status::Yellow
    } else {
        Status::Red
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn reference_examples() {
        assert_eq!(classify(0.995, &ThresholdProfile::strict()), Status::Green);
        assert_eq!(classify(0.96, &ThresholdProfile::middle()), Status::Yellow);
        assert_eq!(classify(1.25, &ThresholdProfile::loose()), Status::Red);
    }

    #[test]
    fn thresholds_fall_into_yellow() {
        for p in [
            ThresholdProfile::strict(),
            ThresholdProfile::middle(),
            ThresholdProfile::loose(),
        ] {
            for d in [p.green_below, p.red_above] {
                assert_eq!(classify(1.0 + d / 100.0, &p), Status::Yellow, "{p} +{d}");
                assert_eq!(classify(1.0 - d / 100.0, &p), Status::Yellow, "{p} -{d}");
            }
        }
    }

    #[test]
    fn profile_parsing() {
        assert_eq!(
            "loose".parse::<ThresholdProfile>().unwrap(),
            ThresholdProfile::loose()
        );
        let c: ThresholdProfile = "custom(2, 8)".parse().unwrap();
        assert_eq!((c.green_below, c.red_above), (2.0, 8.0));
        assert!("custom(8,2)".parse::<ThresholdProfile>().is_err());
        assert!("lenient".parse::<ThresholdProfile>().is_err());
        assert!(ThresholdProfile::custom(0.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_around_parity(sr in 0.001f64..1.999) {
            for p in [ThresholdProfile::strict(), ThresholdProfile::middle(), ThresholdProfile::loose()] {
                prop_assert_eq!(classify(sr, &p), classify(2.0 - sr, &p));
            }
        }

        #[test]
        fn monotone_in_deviation(a in 0.0f64..0.9, b in 0.0f64..0.9) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let p = ThresholdProfile::middle();
            prop_assert!(classify(1.0 + lo, &p) <= classify(1.0 + hi, &p));
            prop_assert!(classify(1.0 - lo, &p) <= classify(1.0 - hi, &p));
        }
    }
}
