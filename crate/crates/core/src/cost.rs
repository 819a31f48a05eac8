//! Analytical cost model: per-layer time complexity, FLOPs per
//! iteration, half-precision activation memory, and inference cache
//! size for every token-mixing variant.
//!
//! Formulas are stored as structured monomial lists (a reviewed golden
//! table) rather than strings, so tests can assert both structure and
//! exact evaluation. Division by the tensor-parallel size `t` and by
//! the head count `h` is carried exactly: evaluated values are exact
//! integers or exact rationals, never floats.

use crate::attention::Variant;
use crate::error::{Error, Result};
use num_rational::Ratio;

/// Inference stage for staged metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prefill,
    Decode,
}

impl Stage {
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Prefill => "prefill",
            Stage::Decode => "decode",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "prefill" => Ok(Stage::Prefill),
            "decode" => Ok(Stage::Decode),
            _ => Err(Error::UnknownName { kind: "stage", name: tag.into() }),
        }
    }
}

/// Cost metric. Only `Flops` distinguishes prefill from decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    /// Leading-order time complexity of one forward pass (abstract ops).
    Complexity,
    /// Floating-point operations per iteration with the cache enabled.
    Flops,
    /// Activation memory for half-precision training (bytes).
    ActivationMemory,
    /// Per-layer inference cache size (bytes).
    CacheSize,
}

pub const ALL_METRICS: [Metric; 4] = [
    Metric::Complexity,
    Metric::Flops,
    Metric::ActivationMemory,
    Metric::CacheSize,
];

impl Metric {
    pub fn tag(self) -> &'static str {
        match self {
            Metric::Complexity => "complexity",
            Metric::Flops => "flops",
            Metric::ActivationMemory => "activation",
            Metric::CacheSize => "cache",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        ALL_METRICS
            .into_iter()
            .find(|m| m.tag() == tag)
            .ok_or_else(|| Error::UnknownName { kind: "metric", name: tag.into() })
    }

    pub fn staged(self) -> bool {
        matches!(self, Metric::Flops)
    }

    pub fn unit(self) -> &'static str {
        match self {
            Metric::Complexity => "ops",
            Metric::Flops => "flops",
            Metric::ActivationMemory | Metric::CacheSize => "bytes",
        }
    }
}

/// One term `coeff * B^b * L^l * d^d * h^h * t^t` with possibly
/// negative powers of `h` and `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Monomial {
    pub coeff: i64,
    pub b: i32,
    pub l: i32,
    pub d: i32,
    pub h: i32,
    pub t: i32,
}

impl Monomial {
    const fn new(coeff: i64, b: i32, l: i32, d: i32, h: i32, t: i32) -> Self {
        Monomial { coeff, b, l, d, h, t }
    }

    pub fn evaluate(&self, q: &CostQuery) -> Ratio<i128> {
        let mut val = Ratio::from_integer(self.coeff as i128);
        for (base, pow) in [
            (q.batch, self.b),
            (q.seq_len, self.l),
            (q.d_model, self.d),
            (q.n_heads, self.h),
            (q.tensor_parallel, self.t),
        ] {
            let base = Ratio::from_integer(base as i128);
            for _ in 0..pow.unsigned_abs() {
                if pow > 0 {
                    val *= base;
                } else {
                    val /= base;
                }
            }
        }
        val
    }

    /// Human-readable form like `4*B*L^2*d`.
    pub fn render(&self) -> String {
        let mut s = self.coeff.to_string();
        for (name, pow) in [("B", self.b), ("L", self.l), ("d", self.d), ("h", self.h), ("t", self.t)] {
            match pow {
                0 => {}
                1 => s.push_str(&format!("*{name}")),
                -1 => s.push_str(&format!("/{name}")),
                p if p > 0 => s.push_str(&format!("*{name}^{p}")),
                p => s.push_str(&format!("/{name}^{}", -p)),
            }
        }
        s
    }
}

/// Point at which a formula is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostQuery {
    pub variant: Variant,
    pub batch: u64,
    pub seq_len: u64,
    pub d_model: u64,
    pub n_heads: u64,
    pub tensor_parallel: u64,
    pub stage: Stage,
    /// Use pre-computed global attention scores where the variant
    /// allows it (RndEmbQK / FixedSeqQK FLOPs only).
    pub precomputed: bool,
}

impl CostQuery {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("B", self.batch),
            ("L", self.seq_len),
            ("d", self.d_model),
            ("h", self.n_heads),
            ("t", self.tensor_parallel),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("cost query {name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d {} not divisible by h {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Symbolic terms plus the exact evaluated value.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub query: CostQuery,
    pub metric: Metric,
    pub terms: Vec<Monomial>,
    pub value: Ratio<i128>,
}

impl CostReport {
    /// `value` rendered exactly: plain integer, or `num/den`.
    pub fn value_string(&self) -> String {
        if self.value.is_integer() {
            self.value.to_integer().to_string()
        } else {
            format!("{}/{}", self.value.numer(), self.value.denom())
        }
    }

    pub fn formula_string(&self) -> String {
        if self.terms.is_empty() {
            "0".to_string()
        } else {
            self.terms.iter().map(Monomial::render).collect::<Vec<_>>().join(" + ")
        }
    }
}

const M: fn(i64, i32, i32, i32, i32, i32) -> Monomial = Monomial::new;

/// Golden formula table. Every row transcribed from the appendix
/// tables of complexity, FLOPs/iteration, activation memory and cache
/// size; the precomputed-scores reduction applies to the fixed-QK
/// variants' FLOPs only.
pub fn formula(
    variant: Variant,
    metric: Metric,
    stage: Stage,
    precomputed: bool,
) -> Vec<Monomial> {
    use Variant::*;
    match metric {
        Metric::Complexity => match variant {
            Standard | RndEmbQk | FixedSeqQk | StaticEmbQk => {
                vec![M(1, 1, 2, 1, 0, 0), M(1, 1, 1, 2, 0, 0)]
            }
            Mlp | Approx | Nonapprox => vec![M(1, 1, 1, 2, 0, 0)],
        },
        Metric::Flops => match (variant, stage) {
            (Standard | StaticEmbQk, Stage::Prefill) => {
                vec![M(4, 1, 2, 1, 0, 0), M(6, 1, 1, 2, 0, 0)]
            }
            (Standard | StaticEmbQk, Stage::Decode) => {
                vec![M(6, 1, 0, 2, 0, 0), M(4, 1, 1, 1, 0, 0)]
            }
            (Mlp, Stage::Prefill) => vec![M(6, 1, 1, 2, 0, 0)],
            (Mlp, Stage::Decode) => vec![M(6, 1, 0, 2, 0, 0)],
            (Approx, Stage::Prefill) => vec![M(14, 1, 1, 2, 0, 0)],
            (Approx, Stage::Decode) => vec![M(10, 1, 0, 2, 0, 0)],
            (Nonapprox, Stage::Prefill) => vec![M(6, 1, 1, 2, 0, 0)],
            (Nonapprox, Stage::Decode) => vec![M(6, 1, 0, 2, 0, 0)],
            (RndEmbQk | FixedSeqQk, Stage::Prefill) => {
                if precomputed {
                    vec![M(2, 0, 2, 1, 0, 0), M(2, 1, 1, 2, 0, 0)]
                } else {
                    vec![M(2, 0, 2, 1, 0, 0), M(2, 1, 2, 1, 0, 0), M(6, 1, 1, 2, 0, 0)]
                }
            }
            (RndEmbQk | FixedSeqQk, Stage::Decode) => {
                if precomputed {
                    vec![M(2, 1, 1, 1, 0, 0), M(2, 0, 0, 2, 0, 0)]
                } else {
                    vec![M(2, 0, 1, 1, 0, 0), M(2, 1, 1, 1, 0, 0), M(6, 1, 0, 2, 0, 0)]
                }
            }
        },
        Metric::ActivationMemory => match variant {
            Standard | StaticEmbQk => vec![M(8, 1, 1, 1, 0, -1), M(2, 1, 2, 0, 1, -1)],
            Mlp => vec![M(8, 1, 1, 1, 0, -1)],
            Approx => vec![M(11, 1, 1, 1, 0, -1), M(3, 1, 0, 2, -1, -1)],
            Nonapprox => vec![M(8, 1, 1, 1, 0, -1), M(4, 1, 1, 0, 1, -1)],
            RndEmbQk | FixedSeqQk => vec![
                M(4, 1, 1, 1, 0, -1),
                M(8, 0, 1, 1, 0, -1),
                M(2, 0, 2, 0, 1, -1),
            ],
        },
        Metric::CacheSize => match variant {
            Standard | StaticEmbQk => vec![M(4, 1, 1, 1, 0, 0)],
            Mlp => vec![],
            Approx => vec![M(6, 1, 0, 1, 0, 0), M(4, 1, 0, 2, -1, 0)],
            Nonapprox => vec![M(2, 1, 0, 1, 0, 0), M(4, 1, 0, 0, 1, 0)],
            // 2*(B+1)*L*d expanded.
            RndEmbQk | FixedSeqQk => vec![M(2, 1, 1, 1, 0, 0), M(2, 0, 1, 1, 0, 0)],
        },
    }
}

fn report(metric: Metric, q: &CostQuery) -> Result<CostReport> {
    q.validate()?;
    let terms = formula(q.variant, metric, q.stage, q.precomputed);
    let value = terms.iter().map(|m| m.evaluate(q)).sum();
    Ok(CostReport { query: *q, metric, terms, value })
}

/// Leading-order time complexity of one forward pass.
pub fn time_complexity(q: &CostQuery) -> Result<CostReport> {
    report(Metric::Complexity, q)
}

/// FLOPs per iteration for the query's stage.
pub fn flops_per_iter(q: &CostQuery) -> Result<CostReport> {
    report(Metric::Flops, q)
}

/// Activation memory for half-precision training, in bytes.
pub fn activation_memory(q: &CostQuery) -> Result<CostReport> {
    report(Metric::ActivationMemory, q)
}

/// Inference cache size per layer, in bytes.
pub fn cache_size(q: &CostQuery) -> Result<CostReport> {
    report(Metric::CacheSize, q)
}

pub fn evaluate(metric: Metric, q: &CostQuery) -> Result<CostReport> {
    report(metric, q)
}

/// Evaluate a batch of (metric, query) pairs in order.
pub fn sweep(queries: &[(Metric, CostQuery)]) -> Result<Vec<CostReport>> {
    queries.iter().map(|(m, q)| report(*m, q)).collect()
}

pub const CSV_HEADER: &str = "variant,metric,stage,B,L,d,h,t,value";

/// One CSV row per report, matching [`CSV_HEADER`].
pub fn to_csv(reports: &[CostReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let stage = if r.metric.staged() { r.query.stage.tag() } else { "-" };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.query.variant.tag(),
            r.metric.tag(),
            stage,
            r.query.batch,
            r.query.seq_len,
            r.query.d_model,
            r.query.n_heads,
            r.query.tensor_parallel,
            r.value_string()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{Variant, ALL_VARIANTS};

    fn q(variant: Variant, b: u64, l: u64, d: u64, h: u64, t: u64, stage: Stage) -> CostQuery {
        CostQuery {
            variant,
            batch: b,
            seq_len: l,
            d_model: d,
            n_heads: h,
            tensor_parallel: t,
            stage,
            precomputed: false,
        }
    }

    fn int(r: &CostReport) -> i128 {
        assert!(r.value.is_integer(), "expected integer, got {}", r.value_string());
        r.value.to_integer()
    }

    #[test]
    fn complexity_hand_values() {
        // mlp: B*L*d^2 = 1*8*16 = 128
        let r = time_complexity(&q(Variant::Mlp, 1, 8, 4, 2, 1, Stage::Prefill)).unwrap();
        assert_eq!(int(&r), 128);
        // standard: B*L^2*d + B*L*d^2 = 16 + 32 = 48
        let r = time_complexity(&q(Variant::Standard, 1, 2, 4, 2, 1, Stage::Prefill)).unwrap();
        assert_eq!(int(&r), 48);
    }

    #[test]
    fn complexity_approx_equals_nonapprox_everywhere() {
        for (b, l, d, h) in [(1, 2, 4, 2), (3, 16, 8, 4), (2, 128, 64, 2)] {
            let a = time_complexity(&q(Variant::Approx, b, l, d, h, 1, Stage::Prefill)).unwrap();
            let n =
                time_complexity(&q(Variant::Nonapprox, b, l, d, h, 1, Stage::Prefill)).unwrap();
            assert_eq!(a.value, n.value);
            assert_eq!(a.terms, n.terms);
        }
    }

    #[test]
    fn flops_hand_values() {
        // standard prefill B=1,L=2,d=4: 4*1*4*4 + 6*1*2*16 = 64+192 = 256
        let r = flops_per_iter(&q(Variant::Standard, 1, 2, 4, 2, 1, Stage::Prefill)).unwrap();
        assert_eq!(int(&r), 256);
        // mlp decode B=2,d=4: 6*2*16 = 192
        let r = flops_per_iter(&q(Variant::Mlp, 2, 2, 4, 2, 1, Stage::Decode)).unwrap();
        assert_eq!(int(&r), 192);
    }

    #[test]
    fn flops_decode_approx_to_nonapprox_ratio_is_five_thirds() {
        let a = flops_per_iter(&q(Variant::Approx, 3, 9, 12, 4, 1, Stage::Decode)).unwrap();
        let n = flops_per_iter(&q(Variant::Nonapprox, 3, 9, 12, 4, 1, Stage::Decode)).unwrap();
        assert_eq!(a.value * 3, n.value * 5);
    }

    #[test]
    fn flops_precomputed_reduction() {
        let mut query = q(Variant::RndEmbQk, 2, 4, 8, 2, 1, Stage::Prefill);
        // full: 2L^2d + 2BL^2d + 6BLd^2 = 256 + 512 + 3072 = 3840
        assert_eq!(int(&flops_per_iter(&query).unwrap()), 3840);
        query.precomputed = true;
        // reduced: 2L^2d + 2BLd^2 = 256 + 1024 = 1280
        assert_eq!(int(&flops_per_iter(&query).unwrap()), 1280);
        query.stage = Stage::Decode;
        // reduced decode: 2BLd + 2d^2 = 128 + 128 = 256
        assert_eq!(int(&flops_per_iter(&query).unwrap()), 256);
        query.precomputed = false;
        // full decode: 2Ld + 2BLd + 6Bd^2 = 64 + 128 + 768 = 960
        assert_eq!(int(&flops_per_iter(&query).unwrap()), 960);
    }

    #[test]
    fn activation_hand_values_and_minimality_of_mlp() {
        // standard B=1,L=2,d=4,h=2,t=1: 8*8 hmm -> 8BLd + 2BL^2h = 64+16 = 80
        let r =
            activation_memory(&q(Variant::Standard, 1, 2, 4, 2, 1, Stage::Prefill)).unwrap();
        assert_eq!(int(&r), 80);
        for (b, l, d, h) in [(1u64, 2u64, 4u64, 2u64), (4, 64, 32, 4), (2, 256, 128, 8)] {
            let mlp =
                activation_memory(&q(Variant::Mlp, b, l, d, h, 1, Stage::Prefill)).unwrap();
            for v in ALL_VARIANTS {
                let other = activation_memory(&q(v, b, l, d, h, 1, Stage::Prefill)).unwrap();
                assert!(mlp.value <= other.value, "mlp must be minimal ({v})");
            }
        }
    }

    #[test]
    fn activation_tensor_parallel_halves_exactly() {
        for v in ALL_VARIANTS {
            let t1 = activation_memory(&q(v, 2, 8, 16, 4, 1, Stage::Prefill)).unwrap();
            let t2 = activation_memory(&q(v, 2, 8, 16, 4, 2, Stage::Prefill)).unwrap();
            assert_eq!(t1.value, t2.value * 2);
        }
    }

    #[test]
    fn activation_reports_exact_rational_when_t_does_not_divide() {
        // mlp with 8BLd = 8*1*1*4 = 32, t=3 -> 32/3 exactly.
        let r = activation_memory(&q(Variant::Mlp, 1, 1, 4, 2, 3, Stage::Prefill)).unwrap();
        assert!(!r.value.is_integer());
        assert_eq!(r.value_string(), "32/3");
    }

    #[test]
    fn cache_hand_values() {
        let r = cache_size(&q(Variant::Mlp, 5, 9, 33, 3, 1, Stage::Prefill)).unwrap();
        assert_eq!(int(&r), 0);
        let r = cache_size(&q(Variant::Standard, 1, 8, 16, 2, 1, Stage::Prefill)).unwrap();
        assert_eq!(int(&r), 512);
        // rnd: 2(B+1)Ld at B=3,L=4,d=8 -> 2*4*4*8 = 256
        let r = cache_size(&q(Variant::RndEmbQk, 3, 4, 8, 2, 1, Stage::Prefill)).unwrap();
        assert_eq!(int(&r), 256);
    }

    #[test]
    fn cache_fixed_qk_approaches_half_of_standard() {
        // lim_{B->inf} 2(B+1)Ld / 4BLd = 1/2; at large B the ratio is
        // within 1/B of one half.
        let big = 1 << 20;
        let rnd = cache_size(&q(Variant::RndEmbQk, big, 16, 32, 4, 1, Stage::Prefill)).unwrap();
        let std = cache_size(&q(Variant::Standard, big, 16, 32, 4, 1, Stage::Prefill)).unwrap();
        let ratio = rnd.value / std.value;
        let half = Ratio::new(1i128, 2);
        assert!(ratio > half);
        assert!(ratio - half < Ratio::new(1, big as i128));
    }

    #[test]
    fn monomials_resum_to_evaluated_value_for_all_rows() {
        // Structural: the stored term list re-sums to the report value
        // for every variant x metric x stage.
        let query_points = [(1u64, 2u64, 4u64, 2u64, 1u64), (3, 5, 6, 3, 2), (2, 16, 32, 4, 4)];
        for v in ALL_VARIANTS {
            for metric in ALL_METRICS {
                for stage in [Stage::Prefill, Stage::Decode] {
                    for &(b, l, d, h, t) in &query_points {
                        let query = q(v, b, l, d, h, t, stage);
                        let r = evaluate(metric, &query).unwrap();
                        let resum: Ratio<i128> =
                            r.terms.iter().map(|m| m.evaluate(&query)).sum();
                        assert_eq!(resum, r.value);
                    }
                }
            }
        }
    }

    #[test]
    fn sweep_is_order_independent_and_empty_is_empty() {
        assert!(sweep(&[]).unwrap().is_empty());
        let items: Vec<(Metric, CostQuery)> = vec![
            (Metric::Flops, q(Variant::Standard, 1, 2, 4, 2, 1, Stage::Prefill)),
            (Metric::CacheSize, q(Variant::Mlp, 1, 2, 4, 2, 1, Stage::Prefill)),
            (Metric::Complexity, q(Variant::Approx, 2, 4, 8, 2, 1, Stage::Prefill)),
        ];
        let fwd = sweep(&items).unwrap();
        let mut rev_items = items.clone();
        rev_items.reverse();
        let rev = sweep(&rev_items).unwrap();
        for (a, b) in fwd.iter().zip(rev.iter().rev()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn invalid_queries_are_rejected() {
        let mut query = q(Variant::Standard, 0, 2, 4, 2, 1, Stage::Prefill);
        assert!(time_complexity(&query).is_err());
        query.batch = 1;
        query.d_model = 5; // not divisible by h=2
        assert!(time_complexity(&query).is_err());
    }

    #[test]
    fn csv_shape() {
        let r = evaluate(Metric::Flops, &q(Variant::Standard, 1, 2, 4, 2, 1, Stage::Prefill))
            .unwrap();
        let csv = to_csv(&[r]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(lines.next().unwrap(), "standard,flops,prefill,1,2,4,2,1,256");
    }
}
