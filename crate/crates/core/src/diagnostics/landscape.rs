//! Two-dimensional loss slices around the current parameters.

use std::io::Write;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm};
use crate::objective::Objective;
use crate::rng::SeedTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    /// Grid coordinates along each direction; the middle entry is exactly 0.
    pub coords: Vec<f64>,
    /// `loss[i * res + j]` at `w + coords[i]·d₁ + coords[j]·d₂`.
    pub loss: Vec<f64>,
    /// `(i, j)` cells whose loss was non-finite or failed to evaluate.
    pub nonfinite: Vec<(usize, usize)>,
    pub directions: [Vec<f64>; 2],
}

impl LandscapeGrid {
    pub fn resolution(&self) -> usize {
        self.coords.len()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.loss[i * self.resolution() + j]
    }

    /// CSV with columns `x, y, loss`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "y", "loss"])?;
        for (i, x) in self.coords.iter().enumerate() {
            for (j, y) in self.coords.iter().enumerate() {
                w.write_record([format!("{x:?}"), format!("{y:?}"), format!("{:?}", self.at(i, j))])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Two seeded orthonormal directions, each rescaled block by block to the
/// norm of the matching parameter block. Blocks are `(offset, len)` ranges
/// covering `w`; a zero block keeps its unit-scaled direction.
pub fn landscape_directions(w: &[f64], blocks: &[(usize, usize)], seed: u64) -> Result<[Vec<f64>; 2]> {
    let p = w.len();
    if p < 2 {
        return Err(Error::Invalid("landscape needs at least two parameters".into()));
    }
    let covered: usize = blocks.iter().map(|b| b.1).sum();
    if covered != p || blocks.iter().any(|&(o, l)| o + l > p) {
        return Err(Error::Invalid("landscape blocks must tile the parameter vector".into()));
    }
    let tree = SeedTree::new(seed).child("landscape");
    let draw = |label: &str| -> Vec<f64> {
        let mut rng = tree.child(label).rng();
        (0..p).map(|_| StandardNormal.sample(&mut rng)).collect()
    };
    let mut d1 = draw("x");
    let n1 = norm(&d1);
    d1.iter_mut().for_each(|v| *v /= n1);
    let mut d2 = draw("y");
    let c = dot(&d1, &d2);
    d2.iter_mut().zip(&d1).for_each(|(b, a)| *b -= c * a);
    let n2 = norm(&d2);
    d2.iter_mut().for_each(|v| *v /= n2);
    for d in [&mut d1, &mut d2] {
        for &(o, l) in blocks {
            let wn = norm(&w[o..o + l]);
            let dn = norm(&d[o..o + l]);
            if wn > 0.0 && dn > 0.0 {
                d[o..o + l].iter_mut().for_each(|v| *v *= wn / dn);
            }
        }
    }
    Ok([d1, d2])
}

/// Loss on a `res × res` grid over `[−h, h]²` in the plane spanned by
/// [`landscape_directions`]. The center cell evaluates `w` itself.
pub fn landscape_sample(
    obj: &dyn Objective,
    w: &[f64],
    idx: &[usize],
    blocks: &[(usize, usize)],
    half_width: f64,
    resolution: usize,
    seed: u64,
) -> Result<LandscapeGrid> {
    if resolution < 3 || resolution % 2 == 0 {
        return Err(Error::Invalid("landscape resolution must be odd and >= 3".into()));
    }
    if !(half_width > 0.0) || !half_width.is_finite() {
        return Err(Error::Invalid("landscape half width must be positive".into()));
    }
    let [d1, d2] = landscape_directions(w, blocks, seed)?;
    let m = (resolution - 1) as f64;
    let coords: Vec<f64> = (0..resolution).map(|i| half_width * (2.0 * i as f64 / m - 1.0)).collect();
    let cells: Vec<(usize, usize)> = (0..resolution).flat_map(|i| (0..resolution).map(move |j| (i, j))).collect();
    let mid = resolution / 2;
    let loss: Vec<f64> = cells
        .par_iter()
        .map(|&(i, j)| {
            let point: Vec<f64> = if i == mid && j == mid {
                w.to_vec()
            } else {
                (0..w.len()).map(|k| w[k] + coords[i] * d1[k] + coords[j] * d2[k]).collect()
            };
            obj.loss(&point, idx).unwrap_or(f64::NAN)
        })
        .collect();
    let nonfinite = cells
        .iter()
        .zip(&loss)
        .filter(|(_, l)| !l.is_finite())
        .map(|(c, _)| *c)
        .collect();
    Ok(LandscapeGrid {
        coords,
        loss,
        nonfinite,
        directions: [d1, d2],
    })
}
