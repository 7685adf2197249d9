//! Tensors, reverse-mode differentiation and the small numeric helpers the
//! rest of the crate shares.

mod kernels;
mod tape;
mod tensor;

pub use kernels::ConvGeometry;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{sign, Tensor};

use serde::{Deserialize, Serialize};
use std::fmt;

/// Attack objective a gradient map belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Seg,
    Adv,
    L2,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Seg, Objective::Adv, Objective::L2];

    pub fn name(self) -> &'static str {
        match self {
            Objective::Seg => "seg",
            Objective::Adv => "adv",
            Objective::L2 => "l2",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == s)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Gradient of one attack objective with respect to a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientMap {
    pub objective: Objective,
    pub values: Tensor,
}

/// Lower bound added before taking the logarithm of a gradient norm.
pub const LOG_INTENSITY_FLOOR: f64 = 1e-30;

/// `log10(‖g‖₁ + 1e-30)`.
pub fn log_intensity(g: &Tensor) -> f64 {
    (g.norm_l1() + LOG_INTENSITY_FLOOR).log10()
}

/// `∂loss/∂wrt` on a recorded tape.
pub fn grad(tape: &Tape, loss: Var, wrt: Var, objective: Objective) -> crate::Result<GradientMap> {
    Ok(GradientMap {
        objective,
        values: tape.grad(loss, wrt)?,
    })
}
