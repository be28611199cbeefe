//! Training losses: reconstruction, boundary-aware total variation, and the
//! hinge adversarial pair, plus their weighted total.

use crate::tensor::{Element, Graph, TensorError, Var};
use crate::volume::{Mask3D, Volume3D};

/// Reduction applied to the voxel-wise losses. `Mean` keeps the default
/// weights meaningful across patch sizes; `Sum` is the literal formulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Reduction {
    pub fn parse(s: &str) -> Option<Reduction> {
        match s {
            "mean" => Some(Reduction::Mean),
            "sum" => Some(Reduction::Sum),
            _ => None,
        }
    }
}

/// Orientation of the hinge losses. `Paper` penalizes the critic at
/// -D(fake) and +D(real); `Standard` is the usual orientation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HingeConvention {
    #[default]
    Paper,
    Standard,
}

impl HingeConvention {
    pub fn parse(s: &str) -> Option<HingeConvention> {
        match s {
            "paper" => Some(HingeConvention::Paper),
            "standard" => Some(HingeConvention::Standard),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_rec: f64,
    pub w_btv: f64,
    pub w_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_rec: 100.0, w_btv: 10.0, w_adv: 1.0 }
    }
}

/// L1 distance between the target and the harmonized output.
pub fn loss_rec<T: Element>(
    g: &mut Graph<T>,
    target: Var,
    output: Var,
    reduction: Reduction,
) -> Result<Var, TensorError> {
    let (ts, os) = (g.shape(target), g.shape(output));
    if ts != os {
        return Err(TensorError::ShapeMismatch {
            context: "loss_rec",
            lhs: ts.to_string(),
            rhs: os.to_string(),
        });
    }
    let diff = g.sub(target, output)?;
    let mag = g.abs(diff);
    Ok(match reduction {
        Reduction::Mean => g.mean_all(mag),
        Reduction::Sum => g.sum_all(mag),
    })
}

/// L1 of forward finite differences over boundary voxels; forward neighbors
/// outside the volume contribute 0, and an empty boundary yields 0.
pub fn loss_btv<T: Element>(
    g: &mut Graph<T>,
    output: Var,
    boundary: Var,
    reduction: Reduction,
) -> Result<Var, TensorError> {
    g.boundary_tv(output, boundary, reduction == Reduction::Mean)
}

/// Critic hinge loss from the two batch-averaged scores.
pub fn loss_adv_d<T: Element>(
    g: &mut Graph<T>,
    score_fake: Var,
    score_real: Var,
    convention: HingeConvention,
) -> Result<Var, TensorError> {
    let (lo, hi) = match convention {
        HingeConvention::Paper => (score_fake, score_real),
        HingeConvention::Standard => (score_real, score_fake),
    };
    let neg = g.scale(lo, -1.0);
    let m1 = g.add_scalar(neg, 1.0);
    let h1 = g.relu(m1);
    let m2 = g.add_scalar(hi, 1.0);
    let h2 = g.relu(m2);
    g.add(h1, h2)
}

/// Generator hinge loss: the negated fake score.
pub fn loss_adv_g<T: Element>(g: &mut Graph<T>, score_fake: Var) -> Var {
    g.scale(score_fake, -1.0)
}

/// Weighted combination of the three generator terms.
pub fn loss_total<T: Element>(
    g: &mut Graph<T>,
    rec: Var,
    btv: Var,
    adv_g: Var,
    w: &LossWeights,
) -> Result<Var, TensorError> {
    let a = g.scale(rec, w.w_rec);
    let b = g.scale(btv, w.w_btv);
    let c = g.scale(adv_g, w.w_adv);
    let ab = g.add(a, b)?;
    g.add(ab, c)
}

/// Scalar boundary TV of a plain volume, for evaluation reports.
pub fn btv_volume(v: &Volume3D, boundary: &Mask3D, reduction: Reduction) -> f64 {
    assert_eq!(v.dims, boundary.dims, "volume and boundary dims must match");
    let (h, w, d) = v.dims;
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                if boundary.get(i, j, k) == 0 {
                    continue;
                }
                count += 1;
                let x = v.get(i, j, k) as f64;
                if i + 1 < h {
                    acc += (v.get(i + 1, j, k) as f64 - x).abs();
                }
                if j + 1 < w {
                    acc += (v.get(i, j + 1, k) as f64 - x).abs();
                }
                if k + 1 < d {
                    acc += (v.get(i, j, k + 1) as f64 - x).abs();
                }
            }
        }
    }
    match reduction {
        Reduction::Mean => {
            if count == 0 {
                0.0
            } else {
                acc / count as f64
            }
        }
        Reduction::Sum => acc,
    }
}

#[cfg(test)]
mod tests;
