//! Entropy and energy of attention maps, and entropy-based layer selection.
//!
//! For an `N × N` row-stochastic map the entropy `H(A) = −Σ a ln a` runs
//! over all `N²` entries, so `0 = H(I) ≤ H(A) ≤ H(U) = N ln N`, and the
//! energy `E(A) = Σ a²` satisfies `1 = E(U) ≤ E(A) ≤ E(I) = N`.

use std::collections::BTreeSet;
use std::io::Write;

use crate::attention::{AttentionMap, AttentionMode};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Entropy in nats of one `N × N` head, `0 · ln 0 = 0`.
fn head_entropy(head: &[f32]) -> Result<f64> {
    let mut h = 0.0f64;
    for &a in head {
        if a < 0.0 {
            return Err(Error::Validation(format!("negative attention weight {a}")));
        }
        if a > 0.0 {
            let a = a as f64;
            h -= a * a.ln();
        }
    }
    Ok(h)
}

/// Entropy (nats) summed over all entries; multi-head maps give the mean
/// over heads.
pub fn entropy(map: &AttentionMap) -> Result<f64> {
    let heads = map.heads();
    let mut total = 0.0;
    for h in 0..heads {
        total += head_entropy(map.head(h))?;
    }
    Ok(total / heads as f64)
}

/// `N ln N`, the entropy of the uniform map.
pub fn max_entropy(n: usize) -> f64 {
    let n = n as f64;
    n * n.ln()
}

/// `H / (N ln N)`; a one-token map has no spread and reports 0.
pub fn entropy_pct(entropy: f64, n: usize) -> f64 {
    let m = max_entropy(n);
    if m > 0.0 {
        entropy / m
    } else {
        0.0
    }
}

/// Sum of squared map entries, mean over heads.
pub fn energy_map(map: &AttentionMap) -> f64 {
    let heads = map.heads();
    (0..heads)
        .map(|h| map.head(h).iter().map(|&a| (a as f64).powi(2)).sum::<f64>())
        .sum::<f64>()
        / heads as f64
}

/// Sum of squared elements of an attention output `A·V`.
pub fn energy_out(av: &Tensor) -> f64 {
    av.sum_squares()
}

/// Per-layer diagnostics of one forward pass (or an average over several).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub layer_index: usize,
    pub mode: AttentionMode,
    pub n_tokens: usize,
    pub timestep: usize,
    /// Mean entropy over token blocks and heads, nats.
    pub entropy: f64,
    pub entropy_pct: f64,
    /// Mean map energy over token blocks.
    pub energy_map: f64,
    /// `E(A·V)` summed over the layer's token blocks.
    pub energy_out: f64,
    /// `E(U·V)` with the same values.
    pub energy_out_uniform: f64,
    /// `E(I·V)`, computed by applying the identity map.
    pub energy_out_identity: f64,
    /// Whether `E(I·V)` equalled `E(V)` bit for bit on every block.
    pub identity_energy_exact: bool,
    /// Fraction of blocks with `E(UV) ≤ E(AV) ≤ E(IV)`.
    pub containment: f64,
}

/// Layer indices ordered by `entropy_pct`, highest first; ties go to the
/// lower layer index.
pub fn rank_layers(stats: &[LayerStats]) -> Result<Vec<usize>> {
    if stats.is_empty() {
        return Err(Error::Domain("rank_layers on empty stats".into()));
    }
    let mut order: Vec<&LayerStats> = stats.iter().collect();
    order.sort_by(|a, b| {
        b.entropy_pct
            .total_cmp(&a.entropy_pct)
            .then(a.layer_index.cmp(&b.layer_index))
    });
    Ok(order.into_iter().map(|s| s.layer_index).collect())
}

/// The `⌊rho · n⌋` layers with the lowest `entropy_pct` (ties to the lower
/// index).
pub fn select_bottom_fraction(stats: &[LayerStats], rho: f64) -> Result<BTreeSet<usize>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Domain(format!("rho {rho} outside (0, 1]")));
    }
    let k = bottom_count(stats.len(), rho);
    if k == 0 {
        return Err(Error::Domain(format!(
            "rho {rho} selects no layer out of {}",
            stats.len()
        )));
    }
    let mut order: Vec<&LayerStats> = stats.iter().collect();
    order.sort_by(|a, b| {
        a.entropy_pct
            .total_cmp(&b.entropy_pct)
            .then(a.layer_index.cmp(&b.layer_index))
    });
    Ok(order.into_iter().take(k).map(|s| s.layer_index).collect())
}

/// `⌊rho · n⌋`, tolerant of the representation error in products such as
/// `0.29 · 100`.
pub fn bottom_count(n: usize, rho: f64) -> usize {
    ((rho * n as f64) + 1e-9).floor() as usize
}

/// Layer with the highest `entropy_pct`, ties to the lower index.
pub fn select_max(stats: &[LayerStats]) -> Result<usize> {
    rank_layers(stats).map(|order| order[0])
}

pub const STATS_CSV_HEADER: &str =
    "run_id,timestep,layer_index,mode,n_tokens,entropy,entropy_pct,energy_map,energy_out";

pub fn write_stats_csv(mut w: impl Write, run_id: &str, stats: &[LayerStats]) -> Result<()> {
    writeln!(w, "{STATS_CSV_HEADER}")?;
    for s in stats {
        writeln!(
            w,
            "{run_id},{},{},{},{},{},{},{},{}",
            s.timestep,
            s.layer_index,
            s.mode,
            s.n_tokens,
            s.entropy,
            s.entropy_pct,
            s.energy_map,
            s.energy_out
        )?;
    }
    Ok(())
}

#[cfg(test)]
pub(crate) fn stats_from_pcts(pcts: &[f64]) -> Vec<LayerStats> {
    pcts.iter()
        .enumerate()
        .map(|(i, &p)| LayerStats {
            layer_index: i,
            mode: AttentionMode::Spatial,
            n_tokens: 4,
            timestep: 0,
            entropy: p * max_entropy(4),
            entropy_pct: p,
            energy_map: 1.0,
            energy_out: 0.0,
            energy_out_uniform: 0.0,
            energy_out_identity: 0.0,
            identity_energy_exact: true,
            containment: 1.0,
        })
        .collect()
}
