//! FLOP accounting.
//!
//! Convention: one multiply-add is 2 FLOPs; a lone multiply, comparison,
//! absolute value or elementwise activation is 1 FLOP. Expected costs take a
//! (possibly fractional) expected active count; instrumented forwards count
//! the work actually executed in an [`OpTally`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{RanaError, Result};

/// A FLOP total with a named per-component breakdown.
///
/// `total` is always the in-order sum of `breakdown`, so the two agree exactly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopCount {
    total: f64,
    breakdown: BTreeMap<String, f64>,
}

impl FlopCount {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn single(name: &str, flops: f64) -> Self {
        let mut c = Self::new();
        c.add(name, flops);
        c
    }

    pub fn add(&mut self, name: &str, flops: f64) {
        *self.breakdown.entry(name.to_string()).or_insert(0.0) += flops;
        self.retotal();
    }

    /// Folds `other` in with every component name prefixed by `prefix.`.
    pub fn merge_prefixed(&mut self, prefix: &str, other: &FlopCount) {
        for (k, v) in &other.breakdown {
            *self.breakdown.entry(format!("{prefix}.{k}")).or_insert(0.0) += v;
        }
        self.retotal();
    }

    fn retotal(&mut self) {
        self.total = self.breakdown.values().sum();
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn breakdown(&self) -> &BTreeMap<String, f64> {
        &self.breakdown
    }

    pub fn get(&self, name: &str) -> f64 {
        self.breakdown.get(name).copied().unwrap_or(0.0)
    }
}

/// Work counter filled by instrumented forward passes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpTally {
    pub flops: u64,
    /// Matrix columns read by masked GEMV kernels.
    pub column_reads: u64,
}

impl OpTally {
    #[inline]
    pub fn add(&mut self, flops: usize) {
        self.flops += flops as u64;
    }
}

/// How a rank-adapted layer decides which ranks to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskerKind {
    /// Threshold on `(Bx)²`; needs the full `Bx`.
    BMasker,
    /// `σ(C D x)` predictor with the given inner width; only active rows of `B` are computed.
    Sigmoid { inner: usize },
    /// No masking: a static low-rank product.
    Open,
}

pub fn dense_linear_flops(o: usize, i: usize) -> FlopCount {
    FlopCount::single("dense", 2.0 * o as f64 * i as f64)
}

/// Expected cost of `A (m(x) ⊙ B x)` with `kept` ranks of which `active` are used on average.
pub fn rank_adapted_flops(kept: usize, o: usize, i: usize, active: f64, masker: MaskerKind) -> Result<FlopCount> {
    if !(0.0..=kept as f64).contains(&active) {
        return Err(RanaError::ActiveExceedsRanks { active, kept });
    }
    let (d, o, i) = (kept as f64, o as f64, i as f64);
    let mut c = FlopCount::new();
    match masker {
        MaskerKind::BMasker => {
            c.add("b_product", 2.0 * d * i);
            c.add("masker", 2.0 * d);
            c.add("a_product", 2.0 * o * active);
        }
        MaskerKind::Sigmoid { inner } => {
            let r = inner as f64;
            c.add("masker", 2.0 * r * i + 2.0 * d * r + d);
            c.add("b_product", 2.0 * active * i);
            c.add("a_product", 2.0 * o * active);
        }
        MaskerKind::Open => {
            c.add("b_product", 2.0 * d * i);
            c.add("a_product", 2.0 * o * d);
        }
    }
    Ok(c)
}

/// Down projection `W (m(h) ⊙ h)` with the `|h_i|·‖W_{:,i}‖ ≥ t` masker.
pub fn neuron_thresholded_flops(o: usize, h: usize, active: f64) -> Result<FlopCount> {
    if !(0.0..=h as f64).contains(&active) {
        return Err(RanaError::ActiveExceedsRanks { active, kept: h });
    }
    let mut c = FlopCount::new();
    c.add("neuron_masker", 3.0 * h as f64);
    c.add("down", 2.0 * o as f64 * active);
    Ok(c)
}

/// Cost model of one linear component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ComponentCost {
    Dense { o: usize, i: usize },
    RankAdapted { kept: usize, o: usize, i: usize, active: f64, masker: MaskerKind },
    NeuronThresholded { o: usize, h: usize, active: f64 },
}

impl ComponentCost {
    pub fn flops(&self) -> Result<FlopCount> {
        match *self {
            ComponentCost::Dense { o, i } => Ok(dense_linear_flops(o, i)),
            ComponentCost::RankAdapted { kept, o, i, active, masker } => rank_adapted_flops(kept, o, i, active, masker),
            ComponentCost::NeuronThresholded { o, h, active } => neuron_thresholded_flops(o, h, active),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    /// Model width (MLP input and output).
    pub d: usize,
    /// Hidden width.
    pub h: usize,
    pub gated: bool,
}

impl MlpShape {
    /// Elementwise work between the projections: the activation, plus the gate product when gated.
    pub fn activation_flops(&self) -> f64 {
        if self.gated {
            2.0 * self.h as f64
        } else {
            self.h as f64
        }
    }

    pub fn dense_component_flops(&self) -> f64 {
        2.0 * self.d as f64 * self.h as f64
    }
}

pub fn dense_mlp_flops(shape: MlpShape) -> FlopCount {
    let mut c = FlopCount::new();
    c.merge_prefixed("up", &dense_linear_flops(shape.h, shape.d));
    if shape.gated {
        c.merge_prefixed("gate", &dense_linear_flops(shape.h, shape.d));
    }
    c.add("activation", shape.activation_flops());
    c.merge_prefixed("down", &dense_linear_flops(shape.d, shape.h));
    c
}

pub fn mlp_flops(
    shape: MlpShape,
    up: &ComponentCost,
    gate: Option<&ComponentCost>,
    down: &ComponentCost,
) -> Result<FlopCount> {
    if shape.gated != gate.is_some() {
        return Err(RanaError::InvalidArgument("gate cost present iff MLP is gated".into()));
    }
    let mut c = FlopCount::new();
    c.merge_prefixed("up", &up.flops()?);
    if let Some(g) = gate {
        c.merge_prefixed("gate", &g.flops()?);
    }
    c.add("activation", shape.activation_flops());
    c.merge_prefixed("down", &down.flops()?);
    Ok(c)
}

/// `1 − adapted / dense`.
pub fn compression_rate(adapted: f64, dense: f64) -> f64 {
    if dense <= 0.0 {
        0.0
    } else {
        1.0 - adapted / dense
    }
}

/// Block-level compression summary: total, MLP and QKV rates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CompressionBreakdown {
    pub total: f64,
    pub mlp: f64,
    pub qkv: f64,
}

/// Running dense/adapted FLOP sums per block type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FlopLedger {
    pub mlp_dense: f64,
    pub mlp_adapted: f64,
    pub qkv_dense: f64,
    pub qkv_adapted: f64,
    /// Unadapted work outside MLP/QKV (counted identically in both).
    pub other: f64,
}

impl FlopLedger {
    pub fn breakdown(&self) -> CompressionBreakdown {
        CompressionBreakdown {
            total: compression_rate(
                self.mlp_adapted + self.qkv_adapted + self.other,
                self.mlp_dense + self.qkv_dense + self.other,
            ),
            mlp: compression_rate(self.mlp_adapted, self.mlp_dense),
            qkv: compression_rate(self.qkv_adapted, self.qkv_dense),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_convention() {
        assert_eq!(dense_linear_flops(4, 3).total(), 24.0);
        assert_eq!(dense_linear_flops(1, 1).total(), 2.0);
    }

    #[test]
    fn dense_matches_instrumented_loop() {
        // Count the operations of a naive GEMV loop.
        let (o, i) = (5, 7);
        let mut ops = 0u64;
        for _ in 0..o {
            for _ in 0..i {
                ops += 2; // one multiply, one add
            }
        }
        assert_eq!(dense_linear_flops(o, i).total(), ops as f64);
    }

    #[test]
    fn b_masker_plug_in() {
        let c = rank_adapted_flops(10, 100, 10, 2.0, MaskerKind::BMasker).unwrap();
        assert_eq!(c.get("b_product"), 200.0);
        assert_eq!(c.get("masker"), 20.0);
        assert_eq!(c.get("a_product"), 400.0);
        assert_eq!(c.total(), 620.0);
        assert_eq!(dense_linear_flops(100, 10).total(), 2000.0);
    }

    #[test]
    fn full_rank_has_no_savings() {
        for (o, i) in [(8, 8), (16, 4), (4, 16)] {
            let d = o.min(i);
            let c = rank_adapted_flops(d, o, i, d as f64, MaskerKind::BMasker).unwrap();
            assert!(c.total() >= dense_linear_flops(o, i).total());
        }
    }

    #[test]
    fn zero_active_costs_only_the_masker() {
        let c = rank_adapted_flops(6, 20, 5, 0.0, MaskerKind::BMasker).unwrap();
        assert_eq!(c.get("a_product"), 0.0);
        assert_eq!(c.total(), 2.0 * 6.0 * 5.0 + 12.0);
        let s = rank_adapted_flops(6, 20, 5, 0.0, MaskerKind::Sigmoid { inner: 2 }).unwrap();
        assert_eq!(s.total(), 2.0 * 2.0 * 5.0 + 2.0 * 6.0 * 2.0 + 6.0);
    }

    #[test]
    fn active_beyond_rank_is_rejected() {
        assert!(matches!(
            rank_adapted_flops(3, 4, 4, 3.5, MaskerKind::BMasker),
            Err(RanaError::ActiveExceedsRanks { .. })
        ));
    }

    #[test]
    fn breakdown_sums_to_total() {
        let shape = MlpShape { d: 16, h: 48, gated: true };
        let c = mlp_flops(
            shape,
            &ComponentCost::RankAdapted { kept: 12, o: 48, i: 16, active: 5.5, masker: MaskerKind::BMasker },
            Some(&ComponentCost::Dense { o: 48, i: 16 }),
            &ComponentCost::NeuronThresholded { o: 16, h: 48, active: 20.25 },
        )
        .unwrap();
        let sum: f64 = c.breakdown().values().sum();
        assert_eq!(sum, c.total());
    }

    #[test]
    fn all_dense_mlp_has_zero_compression() {
        let shape = MlpShape { d: 8, h: 24, gated: true };
        let dense = dense_mlp_flops(shape);
        let same = mlp_flops(
            shape,
            &ComponentCost::Dense { o: 24, i: 8 },
            Some(&ComponentCost::Dense { o: 24, i: 8 }),
            &ComponentCost::Dense { o: 8, i: 24 },
        )
        .unwrap();
        assert_eq!(same, dense);
        assert_eq!(compression_rate(same.total(), dense.total()), 0.0);
    }

    #[test]
    fn compression_decreases_with_active_count() {
        let shape = MlpShape { d: 16, h: 32, gated: false };
        let dense = dense_mlp_flops(shape).total();
        let mut last = f64::INFINITY;
        for e in [1.0, 4.0, 8.0, 12.0, 16.0] {
            let c = mlp_flops(
                shape,
                &ComponentCost::RankAdapted { kept: 16, o: 32, i: 16, active: e, masker: MaskerKind::BMasker },
                None,
                &ComponentCost::NeuronThresholded { o: 16, h: 32, active: 2.0 * e },
            )
            .unwrap();
            let rate = compression_rate(c.total(), dense);
            assert!(rate < last);
            last = rate;
        }
    }

    #[test]
    fn ledger_breakdown() {
        let l = FlopLedger { mlp_dense: 100.0, mlp_adapted: 50.0, qkv_dense: 50.0, qkv_adapted: 50.0, other: 0.0 };
        let b = l.breakdown();
        assert_eq!(b.mlp, 0.5);
        assert_eq!(b.qkv, 0.0);
        assert!((b.total - 1.0 / 3.0).abs() < 1e-15);
    }
}
