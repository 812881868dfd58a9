//! Spatial-expression preprocessing: L1 normalization, log transformation,
//! 8-neighborhood smoothing, gene-list filtering, and top-k selection.
//!
//! The pipeline order is fixed (L1 → log → smooth) and every operation
//! preserves spot count and spot ordering.

pub mod io;

use crate::error::{Error, Result};
use std::collections::{HashMap, HashSet};

/// Scale applied inside the log transform: x ↦ ln(1 + SCALE·x).
pub const DEFAULT_LOG_SCALE: f64 = 1e4;

/// One tissue spot: a gene expression profile and an image feature vector on
/// an integer grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Spot {
    pub spot_id: String,
    pub grid_xy: (i64, i64),
    pub expression: Vec<f64>,
    pub image_feature: Vec<f64>,
}

/// Paired per-spot gene expression vectors, image feature vectors, and grid
/// coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SpotDataset {
    spots: Vec<Spot>,
    gene_ids: Vec<String>,
    image_dim: usize,
}

impl SpotDataset {
    /// Validates vector lengths, finiteness, and grid-coordinate uniqueness.
    pub fn new(spots: Vec<Spot>, gene_ids: Vec<String>, image_dim: usize) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, spot) in spots.iter().enumerate() {
            if spot.expression.len() != gene_ids.len() {
                return Err(Error::shape(
                    "SpotDataset",
                    format!("{} expression values", gene_ids.len()),
                    format!("{} in spot {i}", spot.expression.len()),
                ));
            }
            if spot.image_feature.len() != image_dim {
                return Err(Error::shape(
                    "SpotDataset",
                    format!("{image_dim} image features"),
                    format!("{} in spot {i}", spot.image_feature.len()),
                ));
            }
            if spot
                .expression
                .iter()
                .chain(&spot.image_feature)
                .any(|v| !v.is_finite())
            {
                return Err(Error::NonFinite {
                    component: format!("spot {} ({})", i, spot.spot_id),
                });
            }
            if !seen.insert(spot.grid_xy) {
                return Err(Error::Validation(format!(
                    "duplicate grid coordinate {:?} at spot {i}",
                    spot.grid_xy
                )));
            }
        }
        Ok(SpotDataset {
            spots,
            gene_ids,
            image_dim,
        })
    }

    pub fn spots(&self) -> &[Spot] {
        &self.spots
    }

    pub fn gene_ids(&self) -> &[String] {
        &self.gene_ids
    }

    pub fn n_spots(&self) -> usize {
        self.spots.len()
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn image_dim(&self) -> usize {
        self.image_dim
    }

    /// Expression block as an n_spots × n_genes matrix.
    pub fn expression_matrix(&self) -> crate::numcore::Matrix {
        let rows: Vec<Vec<f64>> = self.spots.iter().map(|s| s.expression.clone()).collect();
        crate::numcore::Matrix::from_rows(&rows).expect("validated at construction")
    }

    /// Image feature block as an n_spots × image_dim matrix.
    pub fn image_feature_matrix(&self) -> crate::numcore::Matrix {
        let rows: Vec<Vec<f64>> = self.spots.iter().map(|s| s.image_feature.clone()).collect();
        crate::numcore::Matrix::from_rows(&rows).expect("validated at construction")
    }

    fn with_expression(&self, expression: Vec<Vec<f64>>) -> SpotDataset {
        let spots = self
            .spots
            .iter()
            .zip(expression)
            .map(|(s, e)| Spot {
                expression: e,
                ..s.clone()
            })
            .collect();
        SpotDataset {
            spots,
            gene_ids: self.gene_ids.clone(),
            image_dim: self.image_dim,
        }
    }

    pub(crate) fn replace_expression_block(
        &self,
        expression: Vec<Vec<f64>>,
        gene_ids: Vec<String>,
    ) -> SpotDataset {
        let spots = self
            .spots
            .iter()
            .zip(expression)
            .map(|(s, e)| Spot {
                expression: e,
                ..s.clone()
            })
            .collect();
        SpotDataset {
            spots,
            gene_ids,
            image_dim: self.image_dim,
        }
    }
}

/// A set of gene identifiers, e.g. a cancer-specific list read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneList {
    ids: HashSet<String>,
}

impl GeneList {
    /// Builds the set; duplicates collapse, an empty list is an error.
    pub fn new(ids: impl IntoIterator<Item = String>) -> Result<Self> {
        let ids: HashSet<String> = ids.into_iter().collect();
        if ids.is_empty() {
            return Err(Error::Validation("gene list is empty".into()));
        }
        Ok(GeneList { ids })
    }

    pub fn contains(&self, id: &str) -> bool {
        self.ids.contains(id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids in lexical order (the set itself is unordered).
    pub fn sorted_ids(&self) -> Vec<String> {
        let mut v: Vec<String> = self.ids.iter().cloned().collect();
        v.sort();
        v
    }
}

fn check_non_negative(ds: &SpotDataset, op: &str) -> Result<()> {
    for (i, spot) in ds.spots.iter().enumerate() {
        if let Some(j) = spot.expression.iter().position(|&v| v < 0.0) {
            return Err(Error::Validation(format!(
                "{op}: negative expression value {} at spot {i}, gene {}",
                spot.expression[j], ds.gene_ids[j]
            )));
        }
    }
    Ok(())
}

/// Scales each spot's expression to sum 1. All-zero spots are left unchanged
/// and their indices returned.
pub fn l1_normalize(ds: &SpotDataset) -> Result<(SpotDataset, Vec<usize>)> {
    check_non_negative(ds, "l1_normalize")?;
    let mut zero_spots = Vec::new();
    let expression = ds
        .spots
        .iter()
        .enumerate()
        .map(|(i, spot)| {
            let total: f64 = spot.expression.iter().sum();
            if total == 0.0 {
                zero_spots.push(i);
                spot.expression.clone()
            } else {
                spot.expression.iter().map(|v| v / total).collect()
            }
        })
        .collect();
    Ok((ds.with_expression(expression), zero_spots))
}

/// Replaces each value x by ln(1 + scale·x); strictly monotone, log1p(0) = 0.
pub fn log_transform(ds: &SpotDataset, scale: f64) -> Result<SpotDataset> {
    if !(scale > 0.0) {
        return Err(Error::Config(format!("log scale must be > 0, got {scale}")));
    }
    check_non_negative(ds, "log_transform")?;
    let expression = ds
        .spots
        .iter()
        .map(|spot| spot.expression.iter().map(|&v| (scale * v).ln_1p()).collect())
        .collect();
    Ok(ds.with_expression(expression))
}

/// Replaces each spot's expression with the unweighted mean over itself and
/// all existing grid neighbors at Chebyshev distance 1 (up to 8). Boundary
/// spots average over the neighbors that exist.
pub fn neighborhood_smooth(ds: &SpotDataset) -> SpotDataset {
    let index: HashMap<(i64, i64), usize> = ds
        .spots
        .iter()
        .enumerate()
        .map(|(i, s)| (s.grid_xy, i))
        .collect();
    let n_genes = ds.n_genes();
    let expression = ds
        .spots
        .iter()
        .map(|spot| {
            let (x, y) = spot.grid_xy;
            let mut acc = spot.expression.clone();
            let mut count = 1.0;
            for dx in -1..=1i64 {
                for dy in -1..=1i64 {
                    if dx == 0 && dy == 0 {
                        continue;
                    }
                    if let Some(&j) = index.get(&(x + dx, y + dy)) {
                        for (a, v) in acc.iter_mut().zip(&ds.spots[j].expression) {
                            *a += v;
                        }
                        count += 1.0;
                    }
                }
            }
            for a in acc.iter_mut().take(n_genes) {
                *a /= count;
            }
            acc
        })
        .collect();
    ds.with_expression(expression)
}

/// Restricts the gene axis to `ds.gene_ids ∩ list`, preserving dataset order.
pub fn filter_gene_list(ds: &SpotDataset, list: &GeneList) -> Result<SpotDataset> {
    let keep: Vec<usize> = ds
        .gene_ids
        .iter()
        .enumerate()
        .filter(|(_, id)| list.contains(id))
        .map(|(j, _)| j)
        .collect();
    if keep.is_empty() {
        return Err(Error::Validation(
            "gene list has empty intersection with the dataset".into(),
        ));
    }
    let gene_ids = keep.iter().map(|&j| ds.gene_ids[j].clone()).collect();
    let expression = ds
        .spots
        .iter()
        .map(|spot| keep.iter().map(|&j| spot.expression[j]).collect())
        .collect();
    Ok(ds.replace_expression_block(expression, gene_ids))
}

/// The k genes with the largest total expression summed over spots, ties
/// broken by gene-id lexical order.
pub fn select_top_expressed(ds: &SpotDataset, k: usize) -> Result<GeneList> {
    if k == 0 || k > ds.n_genes() {
        return Err(Error::Validation(format!(
            "top-k must be in 1..={}, got {k}",
            ds.n_genes()
        )));
    }
    let mut totals: Vec<(f64, &String)> = ds
        .gene_ids
        .iter()
        .enumerate()
        .map(|(j, id)| (ds.spots.iter().map(|s| s.expression[j]).sum(), id))
        .collect();
    totals.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite totals")
            .then_with(|| a.1.cmp(b.1))
    });
    GeneList::new(totals.into_iter().take(k).map(|(_, id)| id.clone()))
}

/// Result of the fixed three-step pipeline.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub dataset: SpotDataset,
    /// Spots whose expression was all-zero at the L1 step.
    pub zero_spots: Vec<usize>,
}

/// L1 normalization → log transform → 8-neighborhood smoothing.
pub fn run_pipeline(ds: &SpotDataset, log_scale: f64) -> Result<PipelineOutput> {
    let (l1, zero_spots) = l1_normalize(ds)?;
    let logged = log_transform(&l1, log_scale)?;
    Ok(PipelineOutput {
        dataset: neighborhood_smooth(&logged),
        zero_spots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_dataset(values: &[(i64, i64, Vec<f64>)], gene_ids: &[&str]) -> SpotDataset {
        let spots = values
            .iter()
            .enumerate()
            .map(|(i, (x, y, e))| Spot {
                spot_id: format!("s{i}"),
                grid_xy: (*x, *y),
                expression: e.clone(),
                image_feature: vec![0.0; 2],
            })
            .collect();
        SpotDataset::new(spots, gene_ids.iter().map(|s| s.to_string()).collect(), 2).unwrap()
    }

    #[test]
    fn l1_divides_by_sum() {
        let ds = grid_dataset(&[(0, 0, vec![2.0, 6.0, 0.0, 0.0])], &["a", "b", "c", "d"]);
        let (out, flags) = l1_normalize(&ds).unwrap();
        assert!(flags.is_empty());
        assert_eq!(out.spots()[0].expression, vec![0.25, 0.75, 0.0, 0.0]);
    }

    #[test]
    fn l1_is_idempotent_and_flags_zero_spots() {
        let ds = grid_dataset(
            &[(0, 0, vec![0.25, 0.75]), (1, 0, vec![0.0, 0.0])],
            &["a", "b"],
        );
        let (out, flags) = l1_normalize(&ds).unwrap();
        assert_eq!(out.spots()[0].expression, vec![0.25, 0.75]);
        assert_eq!(out.spots()[1].expression, vec![0.0, 0.0]);
        assert_eq!(flags, vec![1]);
    }

    #[test]
    fn l1_rejects_negative_values() {
        let ds = grid_dataset(&[(0, 0, vec![1.0, -0.5])], &["a", "b"]);
        assert!(l1_normalize(&ds).is_err());
    }

    #[test]
    fn log_transform_fixed_points() {
        let s = DEFAULT_LOG_SCALE;
        let ds = grid_dataset(
            &[(0, 0, vec![0.0, (std::f64::consts::E - 1.0) / s])],
            &["a", "b"],
        );
        let out = log_transform(&ds, s).unwrap();
        assert_eq!(out.spots()[0].expression[0], 0.0);
        assert!((out.spots()[0].expression[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_transform_is_monotone() {
        let mut rng = crate::rng::stream_rng(3, &[0]);
        use rand::Rng;
        for _ in 0..200 {
            let a: f64 = rng.random_range(0.0..5.0);
            let b: f64 = rng.random_range(0.0..5.0);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if lo == hi {
                continue;
            }
            let ds = grid_dataset(&[(0, 0, vec![lo, hi])], &["a", "b"]);
            let out = log_transform(&ds, DEFAULT_LOG_SCALE).unwrap();
            assert!(out.spots()[0].expression[0] < out.spots()[0].expression[1]);
        }
    }

    #[test]
    fn smoothing_leaves_constant_field_unchanged() {
        let mut cells = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                cells.push((x, y, vec![0.7, 0.2]));
            }
        }
        let ds = grid_dataset(&cells, &["a", "b"]);
        let out = neighborhood_smooth(&ds);
        for spot in out.spots() {
            for (v, expect) in spot.expression.iter().zip([0.7, 0.2]) {
                assert!((v - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn smoothing_averages_interior_and_corner() {
        // 3x3 grid with gene value = spot index; interior averages all 9,
        // corner (0,0) averages itself and its 3 existing neighbors.
        let mut cells = Vec::new();
        let mut idx = 0.0;
        for x in 0..3 {
            for y in 0..3 {
                cells.push((x, y, vec![idx]));
                idx += 1.0;
            }
        }
        let ds = grid_dataset(&cells, &["a"]);
        let out = neighborhood_smooth(&ds);
        let value = |x: i64, y: i64| (x * 3 + y) as f64;
        let center: f64 = (0..9).map(f64::from).sum::<f64>() / 9.0;
        let corner = (value(0, 0) + value(0, 1) + value(1, 0) + value(1, 1)) / 4.0;
        let center_idx = out.spots().iter().position(|s| s.grid_xy == (1, 1)).unwrap();
        let corner_idx = out.spots().iter().position(|s| s.grid_xy == (0, 0)).unwrap();
        assert!((out.spots()[center_idx].expression[0] - center).abs() < 1e-15);
        assert!((out.spots()[corner_idx].expression[0] - corner).abs() < 1e-15);
    }

    #[test]
    fn filter_preserves_dataset_order() {
        let ds = grid_dataset(&[(0, 0, vec![1.0, 2.0, 3.0])], &["A", "B", "C"]);
        let list = GeneList::new(["C".to_string(), "A".to_string(), "Z".to_string()]).unwrap();
        let out = filter_gene_list(&ds, &list).unwrap();
        assert_eq!(out.gene_ids(), &["A".to_string(), "C".to_string()]);
        assert_eq!(out.spots()[0].expression, vec![1.0, 3.0]);
    }

    #[test]
    fn filter_with_full_list_is_identity() {
        let ds = grid_dataset(&[(0, 0, vec![1.0, 2.0])], &["A", "B"]);
        let list = GeneList::new(["A".to_string(), "B".to_string()]).unwrap();
        assert_eq!(filter_gene_list(&ds, &list).unwrap(), ds);
    }

    #[test]
    fn filter_rejects_disjoint_list() {
        let ds = grid_dataset(&[(0, 0, vec![1.0])], &["A"]);
        let list = GeneList::new(["Z".to_string()]).unwrap();
        assert!(filter_gene_list(&ds, &list).is_err());
    }

    #[test]
    fn top_k_selects_by_total_with_lexical_ties() {
        let ds = grid_dataset(
            &[(0, 0, vec![1.0, 5.0, 1.0]), (1, 0, vec![1.0, 0.0, 1.0])],
            &["b", "a", "aa"],
        );
        // Totals: b=2, a=5, aa=2; tie between "aa" and "b" goes to "aa".
        let top = select_top_expressed(&ds, 2).unwrap();
        assert!(top.contains("a") && top.contains("aa"));
        assert!(select_top_expressed(&ds, 0).is_err());
        assert!(select_top_expressed(&ds, 4).is_err());
        assert_eq!(select_top_expressed(&ds, 3).unwrap().len(), 3);
    }

    #[test]
    fn top_k_matches_sort_oracle() {
        use rand::Rng;
        let mut rng = crate::rng::stream_rng(11, &[0]);
        let gene_ids: Vec<String> = (0..12).map(|j| format!("g{j:02}")).collect();
        let cells: Vec<(i64, i64, Vec<f64>)> = (0..6)
            .map(|i| {
                (
                    i,
                    0,
                    (0..12).map(|_| rng.random_range(0.0..3.0)).collect(),
                )
            })
            .collect();
        let refs: Vec<&str> = gene_ids.iter().map(String::as_str).collect();
        let ds = grid_dataset(&cells, &refs);
        let k = 5;
        let top = select_top_expressed(&ds, k).unwrap();
        // Independent oracle: naive sort by summed expression.
        let mut sums: Vec<(f64, String)> = (0..12)
            .map(|j| {
                (
                    ds.spots().iter().map(|s| s.expression[j]).sum(),
                    ds.gene_ids()[j].clone(),
                )
            })
            .collect();
        sums.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then_with(|| a.1.cmp(&b.1)));
        for (_, id) in sums.into_iter().take(k) {
            assert!(top.contains(&id), "missing {id}");
        }
    }

    #[test]
    fn pipeline_preserves_spot_order_and_is_not_idempotent() {
        let mut cells = Vec::new();
        for x in 0..3 {
            for y in 0..3 {
                cells.push((x, y, vec![(x * 3 + y) as f64, 1.0]));
            }
        }
        let ds = grid_dataset(&cells, &["a", "b"]);
        let once = run_pipeline(&ds, DEFAULT_LOG_SCALE).unwrap().dataset;
        assert_eq!(once.n_spots(), ds.n_spots());
        for (a, b) in once.spots().iter().zip(ds.spots()) {
            assert_eq!(a.spot_id, b.spot_id);
        }
        let twice = run_pipeline(&once, DEFAULT_LOG_SCALE).unwrap().dataset;
        assert_ne!(once, twice);
    }
}
