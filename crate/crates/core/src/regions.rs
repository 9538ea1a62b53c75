//! Contrastive region machinery: per-layer discrepancies between an input and
//! its counterpart, region anchors, refinement masks and masked pooling.
//!
//! Token indices are 0-based throughout.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Pooling stabilizer added to the mask count.
pub const POOL_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionLabel {
    Foreground,
    Boundary,
    Background,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub k: usize,
    pub indices: Vec<usize>,
    pub label: RegionLabel,
}

impl RegionSpec {
    pub fn contains(&self, i: usize) -> bool {
        self.indices.contains(&i)
    }

    pub fn validate(&self, n_tokens: usize) -> Result<()> {
        if self.indices.is_empty() {
            return Err(Error::Invalid(format!("region {} is empty", self.k)));
        }
        if let Some(&i) = self.indices.iter().find(|&&i| i >= n_tokens) {
            return Err(Error::Invalid(format!(
                "region {} index {i} out of range for {n_tokens} tokens",
                self.k
            )));
        }
        Ok(())
    }
}

fn grid_side(n_tokens: usize) -> Result<usize> {
    let s = (n_tokens as f64).sqrt().round() as usize;
    if s * s != n_tokens || s < 3 {
        return Err(Error::Invalid(format!("{n_tokens} tokens do not form a square grid of side >= 3")));
    }
    Ok(s)
}

/// Indices of one labelled region on a square token grid: the interior is the
/// foreground, the four corners the background, the rest of the outer ring
/// the boundary.
pub fn grid_region(n_tokens: usize, label: RegionLabel) -> Result<Vec<usize>> {
    let s = grid_side(n_tokens)?;
    let corner = |r: usize, c: usize| (r == 0 || r == s - 1) && (c == 0 || c == s - 1);
    let ring = |r: usize, c: usize| r == 0 || c == 0 || r == s - 1 || c == s - 1;
    let keep = |r: usize, c: usize| match label {
        RegionLabel::Foreground => !ring(r, c),
        RegionLabel::Background => corner(r, c),
        RegionLabel::Boundary => ring(r, c) && !corner(r, c),
        RegionLabel::Custom => false,
    };
    if label == RegionLabel::Custom {
        return Err(Error::Invalid("custom regions have no grid layout".into()));
    }
    Ok((0..n_tokens).filter(|&i| keep(i / s, i % s)).collect())
}

/// The default disjoint foreground/boundary/background partition.
pub fn grid_partition(n_tokens: usize) -> Result<Vec<RegionSpec>> {
    [RegionLabel::Foreground, RegionLabel::Boundary, RegionLabel::Background]
        .into_iter()
        .enumerate()
        .map(|(k, label)| {
            Ok(RegionSpec {
                k,
                indices: grid_region(n_tokens, label)?,
                label,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionAnchor {
    pub c: Vec<f64>,
    /// Unit direction, or the zero vector when `norm == 0`.
    pub d: Vec<f64>,
    pub norm: f64,
}

/// Elementwise `counterpart − orig`.
pub fn compute_cgp(orig: &Tensor, counterpart: &Tensor) -> Result<Tensor> {
    if orig.shape() != counterpart.shape() {
        return Err(Error::Shape {
            context: "compute_cgp".into(),
            expected: orig.shape().to_vec(),
            got: counterpart.shape().to_vec(),
        });
    }
    let data = orig.data().iter().zip(counterpart.data()).map(|(o, c)| c - o).collect();
    Tensor::new(orig.shape().to_vec(), data)
}

pub fn anchor(cgp: &Tensor, region: &RegionSpec) -> Result<RegionAnchor> {
    let (n, d) = cgp.dims2();
    region.validate(n)?;
    let mut c = vec![0.0; d];
    for &i in &region.indices {
        for (cj, &v) in c.iter_mut().zip(cgp.row(i)) {
            *cj += v;
        }
    }
    let inv = 1.0 / region.indices.len() as f64;
    c.iter_mut().for_each(|v| *v *= inv);
    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let dir = if norm > 0.0 {
        c.iter().map(|v| v / norm).collect()
    } else {
        vec![0.0; d]
    };
    Ok(RegionAnchor { c, d: dir, norm })
}

/// Token `i` is kept iff it lies in the region and its discrepancy projects on
/// the anchor direction strictly above `alpha·‖c‖`. A zero anchor keeps nothing.
pub fn refine_mask(cgp: &Tensor, anchor: &RegionAnchor, region: &RegionSpec, alpha: f64) -> Result<Vec<bool>> {
    if !(alpha >= 0.0) {
        return Err(Error::Invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    let (n, _) = cgp.dims2();
    region.validate(n)?;
    if anchor.norm == 0.0 {
        return Ok(vec![false; n]);
    }
    let threshold = alpha * anchor.norm;
    Ok((0..n)
        .map(|i| {
            region.contains(i) && cgp.row(i).iter().zip(&anchor.d).map(|(a, b)| a * b).sum::<f64>() > threshold
        })
        .collect())
}

/// `Σ mask_i v_i / (Σ mask_i + epsilon)`.
pub fn pool(visuals: &Tensor, mask: &[bool], epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::Invalid(format!("epsilon must be > 0, got {epsilon}")));
    }
    let (n, d) = visuals.dims2();
    if mask.len() != n {
        return Err(Error::Shape {
            context: "pool mask".into(),
            expected: vec![n],
            got: vec![mask.len()],
        });
    }
    let mut acc = vec![0.0; d];
    let mut count = 0.0;
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        count += 1.0;
        for (a, &v) in acc.iter_mut().zip(visuals.row(i)) {
            *a += v;
        }
    }
    let denom = count + epsilon;
    Ok(acc.into_iter().map(|v| v / denom).collect())
}

/// Per-layer masks as CSV rows `(layer, region, token_index, bit)`.
pub fn write_masks_csv<W: Write>(out: W, masks: &[Vec<Vec<bool>>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "region", "token_index", "bit"])?;
    for (l, layer) in masks.iter().enumerate() {
        for (k, row) in layer.iter().enumerate() {
            for (i, &b) in row.iter().enumerate() {
                w.write_record([(l + 1).to_string(), k.to_string(), i.to_string(), u8::from(b).to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn field(rows: &[[f64; 2]]) -> Tensor {
        Tensor::matrix(rows.len(), 2, rows.iter().flatten().copied().collect()).unwrap()
    }

    fn region(indices: Vec<usize>) -> RegionSpec {
        RegionSpec {
            k: 0,
            indices,
            label: RegionLabel::Custom,
        }
    }

    #[test]
    fn grid_partition_of_four_by_four() {
        let p = grid_partition(16).unwrap();
        assert_eq!(p[0].indices, vec![5, 6, 9, 10]);
        assert_eq!(p[1].indices, vec![1, 2, 4, 7, 8, 11, 13, 14]);
        assert_eq!(p[2].indices, vec![0, 3, 12, 15]);
        assert!(grid_partition(15).is_err());
    }

    #[test]
    fn cgp_is_counterpart_minus_original() {
        let a = field(&[[1.0, 2.0], [3.0, 4.0]]);
        assert!(compute_cgp(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        let z = field(&[[0.0, 0.0], [0.0, 0.0]]);
        let o = field(&[[1.0, 1.0], [1.0, 1.0]]);
        assert!(compute_cgp(&z, &o).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(compute_cgp(&a, &field(&[[1.0, 2.0]])).is_err());
    }

    #[test]
    fn anchor_examples() {
        let a = anchor(&field(&[[1.0, 0.0], [1.0, 0.0]]), &region(vec![0, 1])).unwrap();
        assert_eq!((a.c.clone(), a.d.clone(), a.norm), (vec![1.0, 0.0], vec![1.0, 0.0], 1.0));
        let a = anchor(&field(&[[1.0, 0.0], [-1.0, 0.0]]), &region(vec![0, 1])).unwrap();
        assert_eq!((a.d.clone(), a.norm), (vec![0.0, 0.0], 0.0));
        // Hand oracle: c = (2, 2/3), ‖c‖ = √(4 + 4/9) = (2/3)√10.
        let a = anchor(&field(&[[3.0, 0.0], [1.0, 0.0], [2.0, 2.0]]), &region(vec![0, 1, 2])).unwrap();
        let norm = 2.0 / 3.0 * 10f64.sqrt();
        assert!((a.c[0] - 2.0).abs() < 1e-15 && (a.c[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!((a.norm - norm).abs() < 1e-15);
        assert!((a.d[0] - 3.0 / 10f64.sqrt()).abs() < 1e-15);
        assert!((a.d[1] - 1.0 / 10f64.sqrt()).abs() < 1e-15);
        assert!(anchor(&field(&[[1.0, 0.0]]), &region(vec![])).is_err());
    }

    #[test]
    fn mask_examples() {
        let f = field(&[[1.0, 0.0], [1.0, 0.0], [50.0, 50.0]]);
        let r = region(vec![0, 1]);
        let a = anchor(&f, &r).unwrap();
        assert_eq!(refine_mask(&f, &a, &r, 0.1).unwrap(), vec![true, true, false]);

        // Brute-force oracle: projections 9/√10, 3/√10, 8/√10 against threshold 0.9·(2/3)√10 = 6/√10.
        let f = field(&[[3.0, 0.0], [1.0, 0.0], [2.0, 2.0]]);
        let r = region(vec![0, 1, 2]);
        let a = anchor(&f, &r).unwrap();
        assert_eq!(refine_mask(&f, &a, &r, 0.9).unwrap(), vec![true, false, true]);
        assert!(refine_mask(&f, &a, &r, -0.1).is_err());
    }

    #[test]
    fn pool_examples() {
        let v = field(&[[4.0, 4.0], [2.0, 0.0], [0.0, 2.0]]);
        let empty = pool(&v, &[false, false, false], POOL_EPSILON).unwrap();
        assert!(empty.iter().all(|&x| x == 0.0));
        let one = pool(&v, &[true, false, false], POOL_EPSILON).unwrap();
        assert!(one.iter().all(|&x| (x - 4.0).abs() <= 4.0 * 1e-6));
        let two = pool(&v, &[false, true, true], POOL_EPSILON).unwrap();
        assert!(two.iter().all(|&x| (x - 1.0).abs() < 1e-6));
        assert!(pool(&v, &[true], POOL_EPSILON).is_err());
    }

    #[test]
    fn masks_csv_has_header_and_rows() {
        let mut buf = Vec::new();
        write_masks_csv(&mut buf, &[vec![vec![true, false]]]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "layer,region,token_index,bit\n1,0,0,1\n1,0,1,0\n");
    }

    fn arb_field() -> impl Strategy<Value = (Tensor, Vec<usize>)> {
        (proptest::collection::vec(-5.0f64..5.0, 24), proptest::collection::btree_set(0usize..8, 1..8))
            .prop_map(|(d, idx)| (Tensor::matrix(8, 3, d).unwrap(), idx.into_iter().collect()))
    }

    proptest! {
        #[test]
        fn spatial_constraint_is_absolute((f, idx) in arb_field(), alpha in 0.0f64..2.0) {
            let r = region(idx);
            let a = anchor(&f, &r).unwrap();
            let m = refine_mask(&f, &a, &r, alpha).unwrap();
            for (i, &b) in m.iter().enumerate() {
                prop_assert!(!b || r.contains(i));
            }
        }

        #[test]
        fn masks_shrink_with_alpha((f, idx) in arb_field(), a1 in 0.0f64..2.0, a2 in 0.0f64..2.0) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let r = region(idx);
            let a = anchor(&f, &r).unwrap();
            let m_lo = refine_mask(&f, &a, &r, lo).unwrap();
            let m_hi = refine_mask(&f, &a, &r, hi).unwrap();
            for (h, l) in m_hi.iter().zip(&m_lo) {
                prop_assert!(!h || *l);
            }
        }

        #[test]
        fn anchor_direction_is_unit_or_zero((f, idx) in arb_field()) {
            let a = anchor(&f, &region(idx)).unwrap();
            let n = a.d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if a.norm > 0.0 {
                prop_assert!((n - 1.0).abs() < 1e-12);
            } else {
                prop_assert_eq!(n, 0.0);
            }
        }

        #[test]
        fn pooling_is_translation_covariant(
            (f, _) in arb_field(),
            mask in proptest::collection::vec(any::<bool>(), 8),
            shift in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            prop_assume!(mask.iter().any(|&b| b));
            let shifted: Vec<f64> = f.data().iter().enumerate().map(|(k, v)| v + shift[k % 3]).collect();
            let fs = Tensor::matrix(8, 3, shifted).unwrap();
            let r0 = pool(&f, &mask, POOL_EPSILON).unwrap();
            let r1 = pool(&fs, &mask, POOL_EPSILON).unwrap();
            let m = mask.iter().filter(|&&b| b).count() as f64;
            let scale = m / (m + POOL_EPSILON);
            for j in 0..3 {
                prop_assert!((r1[j] - r0[j] - shift[j] * scale).abs() < 1e-12);
                prop_assert!((r1[j] - r0[j] - shift[j]).abs() < 1e-5);
            }
        }
    }
}
