use serde::{Deserialize, Serialize};

/// Weight of the energy term: zero before `tau_star`, a linear ramp up to
/// `eps_max` at `t = 1`, constant afterwards.
pub fn epsilon_schedule(t: f64, tau_star: f64, eps_max: f64) -> f64 {
    if t < tau_star {
        0.0
    } else if t <= 1.0 {
        eps_max * (t - tau_star) / (1.0 - tau_star)
    } else {
        eps_max
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvfSign {
    /// `v − 2λ(⟨v, v_c⟩/‖v_c‖²)·v_c`
    #[default]
    Paper,
    /// `v + 2λ(⟨v, v_c⟩/‖v_c‖²)·(v_c − v)`
    Attract,
}

impl std::str::FromStr for CvfSign {
    type Err = crate::Error;
    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "paper" => Ok(Self::Paper),
            "attract" => Ok(Self::Attract),
            _ => Err(crate::Error::Config(format!("unknown cvf_sign `{s}`"))),
        }
    }
}

/// Below this reference norm the correction is skipped.
pub const CVF_MIN_NORM: f64 = 1e-9;

/// Corrected velocity, or `None` when `v_c` is (numerically) zero.
pub fn cvf_correct(v: &[f64], v_c: &[f64], lambda: f64) -> Option<Vec<f64>> {
    cvf_correct_signed(v, v_c, lambda, CvfSign::Paper)
}

pub fn cvf_correct_signed(v: &[f64], v_c: &[f64], lambda: f64, sign: CvfSign) -> Option<Vec<f64>> {
    let nn: f64 = v_c.iter().map(|x| x * x).sum();
    if nn.sqrt() < CVF_MIN_NORM {
        return None;
    }
    let dot: f64 = v.iter().zip(v_c).map(|(a, b)| a * b).sum();
    let k = 2.0 * lambda * dot / nn;
    Some(match sign {
        CvfSign::Paper => v.iter().zip(v_c).map(|(a, c)| a - k * c).collect(),
        CvfSign::Attract => v.iter().zip(v_c).map(|(a, c)| a + k * (c - a)).collect(),
    })
}

/// Straight-line velocity from `x0` to the constraint anchor, `x1ᶜ − x0`.
pub fn cvf_reference(x0: &[f64], anchor: &[f64]) -> Vec<f64> {
    anchor.iter().zip(x0).map(|(a, x)| a - x).collect()
}
