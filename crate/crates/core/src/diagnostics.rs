//! Attention-pattern indicators and pre-softmax activation statistics.
//!
//! Five indicators are computed per head from a row-stochastic causal
//! attention matrix: entropy, concentration (Frobenius norm), head
//! diversity, attention sink, and local focus at relative distances
//! 0..=3. All arithmetic is in `f64` and everything is a pure function
//! of the captured matrices: values are independent of V and of the
//! output projections.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Distances at which local focus is measured.
pub const LOC_FOC_DISTANCES: [usize; 4] = [0, 1, 2, 3];

fn check_square<T: Scalar>(op: &'static str, a: &Tensor<T>) -> Result<usize> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::ShapeMismatch {
            op,
            expected: "square attention matrix".into(),
            got: format!("{s:?}"),
        });
    }
    Ok(s[0])
}

/// Entropy of the whole attention matrix, `-sum a*ln(a)` with the
/// `0*ln(0) = 0` convention. Negative entries are an error.
pub fn entropy<T: Scalar>(a: &Tensor<T>) -> Result<f64> {
    check_square("entropy", a)?;
    let mut h = 0.0;
    for &v in a.data() {
        let v = v.to_f64_lossy();
        if v < 0.0 {
            return Err(Error::NonFinite { op: "entropy (negative attention weight)" });
        }
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    Ok(h)
}

/// Per-row-average entropy variant: mean over rows of each row's
/// entropy, available behind this separate entry point.
pub fn entropy_row_mean<T: Scalar>(a: &Tensor<T>) -> Result<f64> {
    let l = check_square("entropy_row_mean", a)?;
    let mut total = 0.0;
    for i in 0..l {
        for j in 0..l {
            let v = a.at(i, j).to_f64_lossy();
            if v < 0.0 {
                return Err(Error::NonFinite { op: "entropy (negative attention weight)" });
            }
            if v > 0.0 {
                total -= v * v.ln();
            }
        }
    }
    Ok(total / l as f64)
}

/// Concentration: the Frobenius norm of the attention matrix.
pub fn concentration<T: Scalar>(a: &Tensor<T>) -> Result<f64> {
    check_square("concentration", a)?;
    let ss: f64 = a.data().iter().map(|v| {
        let v = v.to_f64_lossy();
        v * v
    }).sum();
    Ok(ss.sqrt())
}

/// Head diversity: mean over the `L(L+1)/2` causal positions of the
/// across-head population standard deviation.
pub fn head_diversity<T: Scalar>(heads: &[Tensor<T>]) -> Result<f64> {
    if heads.len() < 2 {
        return Err(Error::InvalidConfig(
            "head_diversity needs at least two heads".into(),
        ));
    }
    let l = check_square("head_diversity", &heads[0])?;
    for h in heads {
        if check_square("head_diversity", h)? != l {
            return Err(Error::ShapeMismatch {
                op: "head_diversity",
                expected: format!("{l}x{l}"),
                got: format!("{:?}", h.shape()),
            });
        }
    }
    let n = heads.len() as f64;
    let mut total = 0.0;
    for i in 0..l {
        for j in 0..=i {
            let mean: f64 = heads.iter().map(|h| h.at(i, j).to_f64_lossy()).sum::<f64>() / n;
            let var: f64 = heads
                .iter()
                .map(|h| {
                    let d = h.at(i, j).to_f64_lossy() - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            total += var.sqrt();
        }
    }
    Ok(total * 2.0 / (l as f64 * (l as f64 + 1.0)))
}

/// Attention sink: average attention mass assigned to the first token,
/// `sum(A[:, 0]) / L`.
pub fn sink<T: Scalar>(a: &Tensor<T>) -> Result<f64> {
    let l = check_square("sink", a)?;
    let mut total = 0.0;
    for i in 0..l {
        total += a.at(i, 0).to_f64_lossy();
    }
    Ok(total / l as f64)
}

/// Local focus at relative distance `n`: mean over the n-th
/// subdiagonal, `mean_i A[i, i-n]` for `i in n..L`.
pub fn local_focus<T: Scalar>(a: &Tensor<T>, n: usize) -> Result<f64> {
    let l = check_square("local_focus", a)?;
    if l <= n {
        return Err(Error::InvalidConfig(format!(
            "local_focus distance {n} needs L > {n}, got L = {l}"
        )));
    }
    let mut total = 0.0;
    for i in n..l {
        total += a.at(i, i - n).to_f64_lossy();
    }
    Ok(total / (l - n) as f64)
}

/// Raw indicator values for one (layer, head) pair. `head_div` is a
/// per-layer quantity repeated on each of the layer's records.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IndicatorRecord {
    pub layer: usize,
    pub head: usize,
    pub entropy: f64,
    pub conc: f64,
    pub head_div: f64,
    pub sink: f64,
    pub loc_foc0: f64,
    pub loc_foc1: f64,
    pub loc_foc2: f64,
    pub loc_foc3: f64,
}

/// Per-layer indicator values (head-averaged raw, or normalized).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerIndicators {
    pub layer: usize,
    pub entropy: f64,
    pub conc: f64,
    pub head_div: f64,
    pub sink: f64,
    pub loc_foc0: f64,
    pub loc_foc1: f64,
    pub loc_foc2: f64,
    pub loc_foc3: f64,
}

/// Full indicator report: per-head raw records, per-layer raw and
/// plot-normalized views, and the evaluation context they came from.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct IndicatorReport {
    pub seq_len: usize,
    /// Window offsets of the evaluation batch the indicators were
    /// averaged over.
    pub batch_windows: Vec<usize>,
    pub records: Vec<IndicatorRecord>,
    pub per_layer: Vec<LayerIndicators>,
    pub normalized: Vec<LayerIndicators>,
}

/// Indicators for one layer's captured heads (one batch item).
pub fn layer_head_indicators<T: Scalar>(
    layer: usize,
    heads: &[Tensor<T>],
) -> Result<Vec<IndicatorRecord>> {
    let head_div = if heads.len() >= 2 { head_diversity(heads)? } else { 0.0 };
    let mut out = Vec::with_capacity(heads.len());
    for (h, a) in heads.iter().enumerate() {
        let lf: Vec<f64> = LOC_FOC_DISTANCES
            .iter()
            .map(|&n| local_focus(a, n))
            .collect::<Result<_>>()?;
        out.push(IndicatorRecord {
            layer,
            head: h,
            entropy: entropy(a)?,
            conc: concentration(a)?,
            head_div,
            sink: sink(a)?,
            loc_foc0: lf[0],
            loc_foc1: lf[1],
            loc_foc2: lf[2],
            loc_foc3: lf[3],
        });
    }
    Ok(out)
}

/// Head-average per layer.
pub fn aggregate_layers(records: &[IndicatorRecord]) -> Vec<LayerIndicators> {
    let mut layers: Vec<usize> = records.iter().map(|r| r.layer).collect();
    layers.sort_unstable();
    layers.dedup();
    layers
        .into_iter()
        .map(|layer| {
            let rs: Vec<&IndicatorRecord> = records.iter().filter(|r| r.layer == layer).collect();
            let n = rs.len() as f64;
            let mean = |f: fn(&IndicatorRecord) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            LayerIndicators {
                layer,
                entropy: mean(|r| r.entropy),
                conc: mean(|r| r.conc),
                head_div: rs[0].head_div,
                sink: mean(|r| r.sink),
                loc_foc0: mean(|r| r.loc_foc0),
                loc_foc1: mean(|r| r.loc_foc1),
                loc_foc2: mean(|r| r.loc_foc2),
                loc_foc3: mean(|r| r.loc_foc3),
            }
        })
        .collect()
}

fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        values.iter().map(|v| (v - min) / (max - min)).collect()
    } else {
        // Degenerate (constant across layers): normalized to 0.
        vec![0.0; values.len()]
    }
}

/// Plot normalization: entropy/concentration/head-diversity are
/// min-max normalized across layers, local focus is doubled for
/// visibility, and sink stays absolute.
pub fn normalize_for_plot(layers: &[LayerIndicators]) -> Result<Vec<LayerIndicators>> {
    if layers.len() < 2 {
        return Err(Error::InvalidConfig(
            "normalize_for_plot needs at least two layers".into(),
        ));
    }
    let entropy = min_max_normalize(&layers.iter().map(|l| l.entropy).collect::<Vec<_>>());
    let conc = min_max_normalize(&layers.iter().map(|l| l.conc).collect::<Vec<_>>());
    let head_div = min_max_normalize(&layers.iter().map(|l| l.head_div).collect::<Vec<_>>());
    Ok(layers
        .iter()
        .enumerate()
        .map(|(i, l)| LayerIndicators {
            layer: l.layer,
            entropy: entropy[i],
            conc: conc[i],
            head_div: head_div[i],
            sink: l.sink,
            loc_foc0: 2.0 * l.loc_foc0,
            loc_foc1: 2.0 * l.loc_foc1,
            loc_foc2: 2.0 * l.loc_foc2,
            loc_foc3: 2.0 * l.loc_foc3,
        })
        .collect())
}

/// Quantiles and range of the causal-support pre-softmax activations
/// of one layer.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PrelogitStats {
    pub layer: usize,
    pub q01: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q99: f64,
    pub min: f64,
    pub max: f64,
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let idx = p * (n - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = idx - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Statistics over one layer's pre-softmax activations, pooled across
/// heads (and batch items). Only the causal support contributes.
pub fn prelogit_stats<T: Scalar>(layer: usize, prelogits: &[Tensor<T>]) -> Result<PrelogitStats> {
    let mut values = Vec::new();
    for pl in prelogits {
        let l = check_square("prelogit_stats", pl)?;
        for i in 0..l {
            for j in 0..=i {
                values.push(pl.at(i, j).to_f64_lossy());
            }
        }
    }
    if values.is_empty() {
        return Err(Error::InvalidConfig("prelogit_stats: empty capture".into()));
    }
    values.sort_by(|a, b| a.partial_cmp(b).expect("prelogits are finite"));
    Ok(PrelogitStats {
        layer,
        q01: quantile(&values, 0.01),
        q25: quantile(&values, 0.25),
        q50: quantile(&values, 0.50),
        q75: quantile(&values, 0.75),
        q99: quantile(&values, 0.99),
        min: values[0],
        max: *values.last().expect("non-empty"),
    })
}
