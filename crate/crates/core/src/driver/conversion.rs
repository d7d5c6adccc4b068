//! Count/volt scaling for the 16-bit converters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_FULL_SCALE_VOLTS: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Counts 0..=65535 span 0..=FS.
    Unipolar,
    /// Counts are two's complement; -32768..=32767 span -FS..FS*32767/32768.
    Bipolar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConversionMode {
    pub mode: Polarity,
    #[serde(default = "default_full_scale")]
    pub full_scale_volts: f64,
}

fn default_full_scale() -> f64 {
    DEFAULT_FULL_SCALE_VOLTS
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("{volts} V is outside the {min}..{max} V range")]
pub struct RangeError {
    pub volts: f64,
    pub min: f64,
    pub max: f64,
}

impl Default for ConversionMode {
    fn default() -> Self {
        Self::bipolar(DEFAULT_FULL_SCALE_VOLTS)
    }
}

impl ConversionMode {
    pub const fn unipolar(full_scale_volts: f64) -> Self {
        Self {
            mode: Polarity::Unipolar,
            full_scale_volts,
        }
    }

    pub const fn bipolar(full_scale_volts: f64) -> Self {
        Self {
            mode: Polarity::Bipolar,
            full_scale_volts,
        }
    }

    /// Volts per count.
    pub fn lsb_volts(&self) -> f64 {
        self.full_scale_volts / self.divisor()
    }

    fn divisor(&self) -> f64 {
        match self.mode {
            Polarity::Unipolar => 65535.0,
            Polarity::Bipolar => 32768.0,
        }
    }

    /// Lowest and highest representable voltages.
    pub fn range(&self) -> (f64, f64) {
        match self.mode {
            Polarity::Unipolar => (0.0, self.full_scale_volts),
            Polarity::Bipolar => (-self.full_scale_volts, self.full_scale_volts * 32767.0 / 32768.0),
        }
    }

    /// Raw counts as the signed or unsigned integer they represent.
    pub fn signed_value(&self, counts: u16) -> i32 {
        match self.mode {
            Polarity::Unipolar => i32::from(counts),
            Polarity::Bipolar => i32::from(counts as i16),
        }
    }

    pub fn counts_to_volts(&self, counts: u16) -> f64 {
        self.value_to_volts(f64::from(self.signed_value(counts)))
    }

    /// Converts a (possibly fractional) count value, such as an average of
    /// signed counts, to volts.
    pub fn value_to_volts(&self, value: f64) -> f64 {
        value * self.full_scale_volts / self.divisor()
    }

    /// Nearest count for `volts`. Values that round outside the converter
    /// range are rejected.
    pub fn volts_to_counts(&self, volts: f64) -> Result<u16, RangeError> {
        let (min, max) = self.range();
        let err = RangeError { volts, min, max };
        if !volts.is_finite() {
            return Err(err);
        }
        let value = (volts / self.full_scale_volts * self.divisor()).round();
        match self.mode {
            Polarity::Unipolar if (0.0..=65535.0).contains(&value) => Ok(value as u16),
            Polarity::Bipolar if (-32768.0..=32767.0).contains(&value) => Ok(value as i16 as u16),
            _ => Err(err),
        }
    }

    /// ADC behaviour: out-of-range inputs saturate at the rails.
    pub fn volts_to_counts_saturating(&self, volts: f64) -> u16 {
        let value = (volts / self.full_scale_volts * self.divisor()).round();
        match self.mode {
            Polarity::Unipolar => {
                if value.is_nan() {
                    0
                } else {
                    value.clamp(0.0, 65535.0) as u16
                }
            }
            Polarity::Bipolar => {
                if value.is_nan() {
                    0
                } else {
                    value.clamp(-32768.0, 32767.0) as i16 as u16
                }
            }
        }
    }
}
