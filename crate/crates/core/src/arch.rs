//! Three-tier hardware description (chip / core / crossbar) and computing mode.

use std::fmt;
use std::path::Path;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Mode {
    Cm,
    Xbm,
    Wlm,
}

impl Mode {
    pub fn runs_mvm(self) -> bool {
        self != Mode::Cm
    }

    pub fn runs_vvm(self) -> bool {
        self == Mode::Wlm
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s.to_ascii_lowercase().as_str() {
            "cm" => Some(Mode::Cm),
            "xbm" => Some(Mode::Xbm),
            "wlm" => Some(Mode::Wlm),
            _ => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Cm => "CM",
            Mode::Xbm => "XBM",
            Mode::Wlm => "WLM",
        })
    }
}

/// A size or rate that may be left unbounded ("ideal").
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Limit {
    #[default]
    Unbounded,
    Finite(u64),
}

impl Limit {
    pub fn finite(self) -> Option<u64> {
        match self {
            Limit::Finite(v) => Some(v),
            Limit::Unbounded => None,
        }
    }

    /// ceil(amount / self), zero when unbounded.
    pub fn cycles_for(self, amount: u64) -> u64 {
        match self {
            Limit::Finite(rate) => amount.div_ceil(rate),
            Limit::Unbounded => 0,
        }
    }
}

impl Serialize for Limit {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Limit::Finite(v) => s.serialize_u64(*v),
            Limit::Unbounded => s.serialize_str("unbounded"),
        }
    }
}

impl<'de> Deserialize<'de> for Limit {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(0) => Err(de::Error::custom("limit must be positive")),
            Raw::Num(v) => Ok(Limit::Finite(v)),
            Raw::Text(t) if t == "unbounded" => Ok(Limit::Unbounded),
            Raw::Text(t) => Err(de::Error::custom(format!("expected a number or \"unbounded\", got `{t}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NocKind {
    #[default]
    SharedMemory,
    Mesh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellType {
    #[serde(rename = "SRAM")]
    Sram,
    #[serde(rename = "ReRAM")]
    Reram,
    #[serde(rename = "PCM")]
    Pcm,
    #[serde(rename = "FLASH")]
    Flash,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChipTier {
    pub core_number: u32,
    #[serde(default)]
    pub alu_ops_per_cycle: Limit,
    #[serde(default)]
    pub l0_size_bits: Limit,
    #[serde(default)]
    pub l0_bw_bits_per_cycle: Limit,
    #[serde(default)]
    pub noc_kind: NocKind,
    #[serde(default)]
    pub noc_cost_cycles_per_bit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreTier {
    pub xb_number: u32,
    #[serde(default)]
    pub alu_ops_per_cycle: Limit,
    #[serde(default)]
    pub l1_size_bits: Limit,
    #[serde(default)]
    pub l1_bw_bits_per_cycle: Limit,
    #[serde(default)]
    pub noc_kind: NocKind,
    #[serde(default)]
    pub noc_cost_cycles_per_bit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossbarTier {
    pub xb_rows: u32,
    pub xb_cols: u32,
    pub parallel_row: u32,
    pub dac_bits: u32,
    pub adc_bits: u32,
    pub cell_type: CellType,
    pub cell_precision_bits: u32,
    #[serde(default)]
    pub write_cycles_per_row: Option<u64>,
}

impl CrossbarTier {
    pub fn write_cycles(&self) -> u64 {
        self.write_cycles_per_row.unwrap_or(match self.cell_type {
            CellType::Sram => 1,
            _ => 100,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerWeights {
    pub xb_active: f64,
    pub adc_dac: f64,
    pub data_move: f64,
}

impl Default for PowerWeights {
    fn default() -> Self {
        Self { xb_active: 0.83, adc_dac: 0.10, data_move: 0.07 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HwSpec {
    #[serde(default)]
    pub name: String,
    pub mode: Mode,
    pub chip: ChipTier,
    pub core: CoreTier,
    pub xbar: CrossbarTier,
    #[serde(default)]
    pub power_weights: PowerWeights,
}

pub fn load_arch(path: impl AsRef<Path>) -> Result<HwSpec> {
    parse_arch(&std::fs::read_to_string(path)?)
}

pub fn parse_arch(text: &str) -> Result<HwSpec> {
    let mut hw: HwSpec = serde_json::from_str(text)?;
    hw.validate()?;
    hw.normalize_weights();
    Ok(hw)
}

impl HwSpec {
    pub fn validate(&self) -> Result<()> {
        let x = &self.xbar;
        let bad = |m: String| Err(Error::Validation(m));
        if self.chip.core_number == 0 {
            return bad("core_number must be >= 1".into());
        }
        if self.core.xb_number == 0 {
            return bad("xb_number must be >= 1".into());
        }
        if x.xb_rows == 0 || x.xb_cols == 0 || x.dac_bits == 0 || x.adc_bits == 0 {
            return bad("crossbar dimensions and converter widths must be positive".into());
        }
        if x.parallel_row == 0 || x.parallel_row > x.xb_rows {
            return bad(format!("parallel_row {} must lie in 1..={}", x.parallel_row, x.xb_rows));
        }
        if !(1..=8).contains(&x.cell_precision_bits) {
            return bad(format!("cell_precision_bits {} must lie in 1..=8", x.cell_precision_bits));
        }
        let w = &self.power_weights;
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !(nonneg(w.xb_active) && nonneg(w.adc_dac) && nonneg(w.data_move)) {
            return bad("power weights must be non-negative".into());
        }
        if !(nonneg(self.chip.noc_cost_cycles_per_bit) && nonneg(self.core.noc_cost_cycles_per_bit)) {
            return bad("noc costs must be non-negative".into());
        }
        Ok(())
    }

    fn normalize_weights(&mut self) {
        let w = &mut self.power_weights;
        let sum = w.xb_active + w.adc_dac + w.data_move;
        if sum > 0.0 {
            w.xb_active /= sum;
            w.adc_dac /= sum;
            w.data_move /= sum;
        }
    }

    pub fn with_mode(&self, mode: Mode) -> HwSpec {
        HwSpec { mode, ..self.clone() }
    }

    pub fn with_cores(&self, core_number: u32) -> HwSpec {
        let mut hw = self.clone();
        hw.chip.core_number = core_number;
        hw
    }

    pub fn total_crossbars(&self) -> u64 {
        self.chip.core_number as u64 * self.core.xb_number as u64
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("arch serializes")
    }

    /// Digest binding a flow to the hardware it was compiled for. The mode is
    /// excluded: overriding it does not change the machine.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("arch serializes");
        if let Some(o) = v.as_object_mut() {
            o.remove("mode");
            o.remove("name");
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }
}

/// Weight storage of one core.
pub fn core_weight_capacity_bits(hw: &HwSpec) -> u64 {
    hw.core.xb_number as u64 * hw.xbar.xb_rows as u64 * hw.xbar.xb_cols as u64 * hw.xbar.cell_precision_bits as u64
}

/// ceil(input_bits / dac_bits) * ceil(rows_used / parallel_row).
pub fn cycles_per_mvm(hw: &HwSpec, rows_used: u32, input_bits: u32) -> Result<u64> {
    if rows_used == 0 || rows_used > hw.xbar.xb_rows {
        return Err(Error::Domain(format!("rows_used {rows_used} outside 1..={}", hw.xbar.xb_rows)));
    }
    Ok(input_bits.div_ceil(hw.xbar.dac_bits) as u64 * rows_used.div_ceil(hw.xbar.parallel_row) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"{
        "mode": "WLM",
        "chip": {"core_number": 2},
        "core": {"xb_number": 2},
        "xbar": {"xb_rows": 32, "xb_cols": 128, "parallel_row": 16, "dac_bits": 8, "adc_bits": 8,
                 "cell_type": "ReRAM", "cell_precision_bits": 2}
    }"#;

    #[test]
    fn ideal_defaults() {
        let hw = parse_arch(EXAMPLE).unwrap();
        assert_eq!(hw.chip.l0_bw_bits_per_cycle, Limit::Unbounded);
        assert_eq!(hw.chip.alu_ops_per_cycle, Limit::Unbounded);
        assert_eq!(hw.chip.noc_cost_cycles_per_bit, 0.0);
        assert_eq!(hw.xbar.write_cycles(), 100);
        assert_eq!(core_weight_capacity_bits(&hw), 16384);
        let w = &hw.power_weights;
        assert!((w.xb_active + w.adc_dac + w.data_move - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_parallel_row() {
        let bad = EXAMPLE.replace("\"parallel_row\": 16", "\"parallel_row\": 64");
        assert!(matches!(parse_arch(&bad), Err(Error::Validation(_))));
        let bad = EXAMPLE.replace("\"core_number\": 2", "\"core_number\": 0");
        assert!(matches!(parse_arch(&bad), Err(Error::Validation(_))));
        let bad = EXAMPLE.replace("\"WLM\"", "\"FOO\"");
        assert!(parse_arch(&bad).is_err());
    }

    #[test]
    fn cycles_law() {
        let hw = parse_arch(EXAMPLE).unwrap();
        assert_eq!(cycles_per_mvm(&hw, 27, 8).unwrap(), 2);
        assert_eq!(cycles_per_mvm(&hw, 16, 8).unwrap(), 1);
        assert!(matches!(cycles_per_mvm(&hw, 33, 8), Err(Error::Domain(_))));
        assert!(matches!(cycles_per_mvm(&hw, 0, 8), Err(Error::Domain(_))));
    }

    #[test]
    fn tiny_capacity() {
        let mut hw = parse_arch(EXAMPLE).unwrap();
        hw.core.xb_number = 1;
        hw.xbar.xb_rows = 1;
        hw.xbar.xb_cols = 1;
        hw.xbar.parallel_row = 1;
        hw.xbar.cell_precision_bits = 1;
        assert_eq!(core_weight_capacity_bits(&hw), 1);
    }

    #[test]
    fn digest_ignores_mode() {
        let hw = parse_arch(EXAMPLE).unwrap();
        assert_eq!(hw.digest(), hw.with_mode(Mode::Cm).digest());
        assert_ne!(hw.digest(), hw.with_cores(3).digest());
    }
}
