//! External-memory traffic of tiled GEMM `C = A·B` (A is M×K, B is K×N).
//!
//! Column-first keeps a K×n strip of B on chip while every A row tile
//! streams past; row-first keeps an m×K tile of A while B streams.

use serde::{Deserialize, Serialize};

use crate::error::{HarmoniaError, Result};

/// HBM2 access energy.
pub const DEFAULT_PJ_PER_BIT: f64 = 3.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GemmShape {
    pub m: u64,
    pub k: u64,
    pub n: u64,
    pub tile_m: u64,
    pub tile_n: u64,
    pub bits_a: f64,
    pub bits_b: f64,
    /// When set, output write-back of M·N elements at this width is counted.
    #[serde(default)]
    pub bits_out: Option<f64>,
}

impl GemmShape {
    pub fn new(m: u64, k: u64, n: u64, tile_m: u64, tile_n: u64) -> Result<Self> {
        let s = Self {
            m,
            k,
            n,
            tile_m,
            tile_n,
            bits_a: 16.0,
            bits_b: 16.0,
            bits_out: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_bits(mut self, bits_a: f64, bits_b: f64) -> Self {
        self.bits_a = bits_a;
        self.bits_b = bits_b;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if [self.m, self.k, self.n, self.tile_m, self.tile_n].contains(&0) {
            return Err(HarmoniaError::Tiling("dimensions must be positive".into()));
        }
        if !self.m.is_multiple_of(self.tile_m) || !self.n.is_multiple_of(self.tile_n) {
            return Err(HarmoniaError::Tiling(format!(
                "tiles {}x{} do not divide {}x{}",
                self.tile_m, self.tile_n, self.m, self.n
            )));
        }
        for b in [Some(self.bits_a), Some(self.bits_b), self.bits_out]
            .into_iter()
            .flatten()
        {
            if !(b.is_finite() && b >= 0.0) {
                return Err(HarmoniaError::arg(format!("bad bit width {b}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    ColumnFirst,
    RowFirst,
}

impl Policy {
    pub fn name(self) -> &'static str {
        match self {
            Policy::ColumnFirst => "column_first",
            Policy::RowFirst => "row_first",
        }
    }
}

/// Element fetches of A and B.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElementCounts {
    pub a: u64,
    pub b: u64,
}

impl ElementCounts {
    pub fn total(&self) -> u64 {
        self.a + self.b
    }
}

fn column_first_counts(s: &GemmShape) -> ElementCounts {
    ElementCounts {
        a: (s.n / s.tile_n) * s.m * s.k,
        b: s.k * s.n,
    }
}

fn row_first_counts(s: &GemmShape) -> ElementCounts {
    ElementCounts {
        a: s.m * s.k,
        b: (s.m / s.tile_m) * s.k * s.n,
    }
}

pub fn policy_counts(s: &GemmShape, policy: Policy) -> Result<ElementCounts> {
    s.validate()?;
    Ok(match policy {
        Policy::ColumnFirst => column_first_counts(s),
        Policy::RowFirst => row_first_counts(s),
    })
}

pub fn ema_column_first(s: &GemmShape) -> Result<u64> {
    policy_counts(s, Policy::ColumnFirst).map(|c| c.total())
}

pub fn ema_row_first(s: &GemmShape) -> Result<u64> {
    policy_counts(s, Policy::RowFirst).map(|c| c.total())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmaReport {
    pub policy: Policy,
    pub elements_a: u64,
    pub elements_b: u64,
    pub total_elements: u64,
    pub total_bits: f64,
    pub energy_pj: f64,
    pub column_first_elements: u64,
    pub row_first_elements: u64,
}

/// Report for a fixed policy.
pub fn ema_report(s: &GemmShape, policy: Policy, pj_per_bit: f64) -> Result<EmaReport> {
    let counts = policy_counts(s, policy)?;
    let mut total_bits = counts.a as f64 * s.bits_a + counts.b as f64 * s.bits_b;
    if let Some(out) = s.bits_out {
        total_bits += (s.m * s.n) as f64 * out;
    }
    Ok(EmaReport {
        policy,
        elements_a: counts.a,
        elements_b: counts.b,
        total_elements: counts.total(),
        total_bits,
        energy_pj: energy_estimate(total_bits, pj_per_bit)?,
        column_first_elements: column_first_counts(s).total(),
        row_first_elements: row_first_counts(s).total(),
    })
}

/// Picks the policy with fewer element fetches; ties go to column-first.
pub fn choose_policy(s: &GemmShape) -> Result<EmaReport> {
    s.validate()?;
    let policy = if row_first_counts(s).total() < column_first_counts(s).total() {
        Policy::RowFirst
    } else {
        Policy::ColumnFirst
    };
    ema_report(s, policy, DEFAULT_PJ_PER_BIT)
}

pub fn energy_estimate(total_bits: f64, pj_per_bit: f64) -> Result<f64> {
    if [total_bits, pj_per_bit]
        .iter()
        .any(|v| v.is_nan() || *v < 0.0)
    {
        return Err(HarmoniaError::arg(format!(
            "negative bits or energy: {total_bits}, {pj_per_bit}"
        )));
    }
    Ok(total_bits * pj_per_bit)
}

/// Walks the tile loops and counts every off-chip fetch.
///
/// The resident operand occupies a single on-chip slot and is fetched only
/// when the slot holds a different strip; the streamed operand is consumed
/// one K-slice at a time and never reused.
pub fn simulate_trace(s: &GemmShape, policy: Policy) -> Result<ElementCounts> {
    s.validate()?;
    let row_tiles = s.m / s.tile_m;
    let col_tiles = s.n / s.tile_n;
    let mut counts = ElementCounts { a: 0, b: 0 };
    let mut resident: Option<u64> = None;
    let (outer, inner) = match policy {
        Policy::ColumnFirst => (col_tiles, row_tiles),
        Policy::RowFirst => (row_tiles, col_tiles),
    };
    for o in 0..outer {
        for i in 0..inner {
            let (row, col) = match policy {
                Policy::ColumnFirst => (i, o),
                Policy::RowFirst => (o, i),
            };
            for _k in 0..s.k {
                match policy {
                    Policy::ColumnFirst => {
                        if resident != Some(col) {
                            counts.b += s.k * s.tile_n;
                            resident = Some(col);
                        }
                        counts.a += s.tile_m;
                    }
                    Policy::RowFirst => {
                        if resident != Some(row) {
                            counts.a += s.tile_m * s.k;
                            resident = Some(row);
                        }
                        counts.b += s.tile_n;
                    }
                }
            }
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        let s = GemmShape::new(64, 32, 48, 16, 16).unwrap();
        assert_eq!(ema_column_first(&s).unwrap(), 7680);
        assert_eq!(ema_row_first(&s).unwrap(), 8192);
        assert_eq!(choose_policy(&s).unwrap().policy, Policy::ColumnFirst);

        let s = GemmShape::new(16, 32, 128, 16, 16).unwrap();
        assert_eq!(ema_row_first(&s).unwrap(), 4608);
        assert_eq!(ema_column_first(&s).unwrap(), 8192);
        assert_eq!(choose_policy(&s).unwrap().policy, Policy::RowFirst);
    }

    #[test]
    fn degenerate_tiles() {
        let s = GemmShape::new(8, 4, 6, 2, 6).unwrap();
        assert_eq!(ema_column_first(&s).unwrap(), 8 * 4 + 4 * 6);
        let s = GemmShape::new(3, 5, 7, 1, 1).unwrap();
        assert_eq!(ema_column_first(&s).unwrap(), 7 * 3 * 5 + 5 * 7);
        assert_eq!(
            simulate_trace(&s, Policy::ColumnFirst).unwrap().total(),
            7 * 3 * 5 + 5 * 7
        );
    }

    #[test]
    fn tie_goes_to_column_first() {
        // M·K·(N/n - 1) == K·N·(M/m - 1)
        let s = GemmShape::new(32, 8, 32, 16, 16).unwrap();
        assert_eq!(ema_column_first(&s).unwrap(), ema_row_first(&s).unwrap());
        assert_eq!(choose_policy(&s).unwrap().policy, Policy::ColumnFirst);
    }

    #[test]
    fn trace_matches_examples() {
        let s = GemmShape::new(64, 32, 48, 16, 16).unwrap();
        assert_eq!(
            simulate_trace(&s, Policy::ColumnFirst).unwrap().total(),
            7680
        );
        assert_eq!(simulate_trace(&s, Policy::RowFirst).unwrap().total(), 8192);
    }

    #[test]
    fn energy() {
        assert_eq!(energy_estimate(0.0, DEFAULT_PJ_PER_BIT).unwrap(), 0.0);
        let s = GemmShape::new(64, 32, 48, 16, 16).unwrap();
        let r = choose_policy(&s).unwrap();
        assert_eq!(r.total_bits, 122880.0);
        assert!((r.energy_pj - 479232.0).abs() < 1e-6);
        assert_eq!(r.total_elements, r.elements_a + r.elements_b);
        let narrow = choose_policy(&s.with_bits(5.0 + 5.0 / 32.0, 16.0)).unwrap();
        assert!(narrow.energy_pj < r.energy_pj);
        assert!(energy_estimate(-1.0, 3.9).is_err());
    }

    #[test]
    fn write_back_is_optional() {
        let mut s = GemmShape::new(64, 32, 48, 16, 16).unwrap();
        s.bits_out = Some(16.0);
        let r = ema_report(&s, Policy::ColumnFirst, DEFAULT_PJ_PER_BIT).unwrap();
        assert_eq!(r.total_bits, 122880.0 + 64.0 * 48.0 * 16.0);
    }

    #[test]
    fn tiling_errors() {
        assert!(GemmShape::new(64, 32, 48, 15, 16).is_err());
        assert!(GemmShape::new(64, 32, 48, 16, 0).is_err());
        assert!(GemmShape::new(0, 32, 48, 16, 16).is_err());
    }
}
