//! Uniform 63 x 63 codebook over (acceleration, yaw rate).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::ControlAction;

pub const BINS: usize = 63;
pub const VOCAB: usize = BINS * BINS;
pub const ACCEL_MAX: f64 = 5.0;
pub const YAW_RATE_MAX: f64 = 1.5;
pub const ACCEL_BIN: f64 = 2.0 * ACCEL_MAX / BINS as f64;
pub const YAW_RATE_BIN: f64 = 2.0 * YAW_RATE_MAX / BINS as f64;

/// Discrete action. Row-major flat index `ia * 63 + iw`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionToken(u16);

impl ActionToken {
    /// The zero action `(0, 0)`.
    pub const ZERO: ActionToken = ActionToken(((BINS / 2) * BINS + BINS / 2) as u16);

    pub fn from_indices(ia: usize, iw: usize) -> Result<Self> {
        if ia >= BINS || iw >= BINS {
            return Err(Error::TokenOutOfRange { ia, iw });
        }
        Ok(ActionToken((ia * BINS + iw) as u16))
    }

    pub fn from_flat(flat: usize) -> Result<Self> {
        if flat >= VOCAB {
            return Err(Error::InvalidArgument(format!("flat token {flat} >= {VOCAB}")));
        }
        Ok(ActionToken(flat as u16))
    }

    pub fn flat(self) -> usize {
        self.0 as usize
    }

    pub fn ia(self) -> usize {
        self.flat() / BINS
    }

    pub fn iw(self) -> usize {
        self.flat() % BINS
    }

    pub fn action(self) -> ControlAction {
        ControlAction::new(accel_center(self.ia()), yaw_rate_center(self.iw()))
    }

    pub fn all() -> impl Iterator<Item = ActionToken> {
        (0..VOCAB).map(|i| ActionToken(i as u16))
    }
}

fn accel_center(ia: usize) -> f64 {
    -ACCEL_MAX + (ia as f64 + 0.5) * ACCEL_BIN
}

fn yaw_rate_center(iw: usize) -> f64 {
    -YAW_RATE_MAX + (iw as f64 + 0.5) * YAW_RATE_BIN
}

fn bin_index(value: f64, max: f64, width: f64) -> usize {
    let clamped = value.clamp(-max, max);
    (((clamped + max) / width).floor() as usize).min(BINS - 1)
}

/// Nearest bin center; an exact midpoint goes to the lower index.
fn nearest_index(value: f64, max: f64, width: f64) -> usize {
    let pos = (value.clamp(-max, max) + max) / width - 0.5;
    let lo = pos.floor();
    let idx = if pos - lo > 0.5 { lo + 1.0 } else { lo };
    idx.clamp(0.0, (BINS - 1) as f64) as usize
}

/// Bins a continuous action. Out-of-range components are clamped first.
pub fn quantize(u: &ControlAction) -> Result<ActionToken> {
    if !u.is_finite() {
        return Err(Error::NonFinite("control action"));
    }
    ActionToken::from_indices(
        bin_index(u.a, ACCEL_MAX, ACCEL_BIN),
        bin_index(u.w, YAW_RATE_MAX, YAW_RATE_BIN),
    )
}

/// Bin-center representative of a token.
pub fn dequantize(t: ActionToken) -> ControlAction {
    t.action()
}

/// Dequantizes from raw indices, rejecting out-of-range values.
pub fn dequantize_indices(ia: usize, iw: usize) -> Result<ControlAction> {
    Ok(ActionToken::from_indices(ia, iw)?.action())
}

/// Codebook entry nearest to `u` in range-normalized coordinates, ties to
/// the lower index. The grid is separable so this is per-axis rounding.
pub fn nearest_token(u: &ControlAction) -> Result<ActionToken> {
    if !u.is_finite() {
        return Err(Error::NonFinite("control action"));
    }
    ActionToken::from_indices(
        nearest_index(u.a, ACCEL_MAX, ACCEL_BIN),
        nearest_index(u.w, YAW_RATE_MAX, YAW_RATE_BIN),
    )
}
