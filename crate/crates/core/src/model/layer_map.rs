//! Per-layer variant assignment, including the nine named hybrid
//! ablation maps.

use crate::attention::Variant;
use crate::error::{Error, Result};
use std::collections::BTreeSet;

/// Names of the nine ablation maps (plus `uniform`).
pub const MAP_NAMES: [&str; 10] = [
    "uniform", "even", "odd", "top", "middle", "bottom", "25%", "first", "last", "bilateral",
];

/// Ordered per-layer variant tags for a stack.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct LayerMap(Vec<Variant>);

impl LayerMap {
    pub fn new(layers: Vec<Variant>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("layer map must not be empty".into()));
        }
        Ok(LayerMap(layers))
    }

    /// Every layer the same variant.
    pub fn uniform(variant: Variant, n_layers: usize) -> Self {
        LayerMap(vec![variant; n_layers])
    }

    /// Standard attention on the named layer set, `simple` elsewhere.
    pub fn from_name(name: &str, n_layers: usize, simple: Variant) -> Result<Self> {
        let standard = standard_layer_ids(name, n_layers)?;
        Ok(LayerMap(
            (1..=n_layers)
                .map(|i| if standard.contains(&i) { Variant::Standard } else { simple })
                .collect(),
        ))
    }

    pub fn layers(&self) -> &[Variant] {
        &self.0
    }

    pub fn n_layers(&self) -> usize {
        self.0.len()
    }

    pub fn variant_at(&self, layer: usize) -> Variant {
        self.0[layer]
    }

    /// 1-indexed positions running standard attention.
    pub fn standard_positions(&self) -> BTreeSet<usize> {
        self.0
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == Variant::Standard)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn any_shadow(&self) -> bool {
        self.0.iter().any(|v| v.uses_shadow())
    }

    pub fn any(&self, variant: Variant) -> bool {
        self.0.contains(&variant)
    }
}

/// 1-indexed layer ids that keep standard attention under a named
/// configuration. At 24 layers these reproduce the ablation table
/// exactly; other depths scale rule-wise (parity for even/odd, halves
/// and quarters for top/bottom/middle, every 4th for 25%, literal ends
/// for first/last/bilateral).
pub fn standard_layer_ids(name: &str, n_layers: usize) -> Result<BTreeSet<usize>> {
    if n_layers == 0 {
        return Err(Error::InvalidConfig("n_layers must be positive".into()));
    }
    let n = n_layers;
    let ids: BTreeSet<usize> = match name {
        "uniform" => BTreeSet::new(),
        "even" | "50%" => (1..=n).filter(|i| i % 2 == 0).collect(),
        "odd" => (1..=n).filter(|i| i % 2 == 1).collect(),
        "top" => (1..=n / 2).collect(),
        "middle" => (1..=n / 4).chain(n - n / 4 + 1..=n).collect(),
        "bottom" => (n / 2 + 1..=n).collect(),
        "25%" => (1..=n).filter(|i| i % 4 == 0).collect(),
        "first" => [1].into_iter().collect(),
        "last" => [n].into_iter().collect(),
        "bilateral" => [1, n].into_iter().collect(),
        other => {
            return Err(Error::UnknownName { kind: "layer map", name: other.to_string() })
        }
    };
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(name: &str, n: usize) -> Vec<usize> {
        standard_layer_ids(name, n).unwrap().into_iter().collect()
    }

    #[test]
    fn named_maps_match_the_ablation_table_at_24_layers() {
        assert_eq!(ids("even", 24), vec![2, 4, 6, 8, 10, 12, 14, 16, 18, 20, 22, 24]);
        assert_eq!(ids("odd", 24), vec![1, 3, 5, 7, 9, 11, 13, 15, 17, 19, 21, 23]);
        assert_eq!(ids("top", 24), (1..=12).collect::<Vec<_>>());
        assert_eq!(
            ids("middle", 24),
            vec![1, 2, 3, 4, 5, 6, 19, 20, 21, 22, 23, 24]
        );
        assert_eq!(ids("bottom", 24), (13..=24).collect::<Vec<_>>());
        assert_eq!(ids("25%", 24), vec![4, 8, 12, 16, 20, 24]);
        assert_eq!(ids("first", 24), vec![1]);
        assert_eq!(ids("last", 24), vec![24]);
        assert_eq!(ids("bilateral", 24), vec![1, 24]);
    }

    #[test]
    fn uniform_has_no_standard_layers() {
        for n in [1usize, 4, 24, 28] {
            assert!(ids("uniform", n).is_empty());
        }
    }

    #[test]
    fn fifty_percent_is_an_alias_for_even() {
        assert_eq!(ids("50%", 24), ids("even", 24));
    }

    #[test]
    fn unknown_name_is_an_error() {
        assert!(matches!(
            standard_layer_ids("sideways", 24),
            Err(Error::UnknownName { .. })
        ));
    }

    #[test]
    fn from_name_fills_simple_variant() {
        let map = LayerMap::from_name("even", 4, Variant::Nonapprox).unwrap();
        assert_eq!(
            map.layers(),
            &[
                Variant::Nonapprox,
                Variant::Standard,
                Variant::Nonapprox,
                Variant::Standard
            ]
        );
        assert_eq!(
            map.standard_positions().into_iter().collect::<Vec<_>>(),
            vec![2, 4]
        );
    }
}
