//! Depth supervision and BEV occupancy losses.

use ndarray::{Array2, Array3, Array4, ArrayView2};

use crate::error::{Error, Result};
use crate::geometry::FrustumSpec;
use crate::heads::LinearLayer;
use crate::kernel::{BevFeature, DepthMap};
use crate::real::Real;

/// Target bin index that excludes a pixel from the depth loss.
pub const UNSUPERVISED: i32 = -1;

/// Nearest-bin targets for `N×H×W` metric depth; non-finite depth maps to
/// [`UNSUPERVISED`].
pub fn bin_depths(depth: &Array3<f64>, frustum: &FrustumSpec) -> Array3<i32> {
    depth.mapv(|d| {
        if d.is_finite() {
            frustum.nearest_bin(d) as i32
        } else {
            UNSUPERVISED
        }
    })
}

#[derive(Debug, Clone)]
pub struct DepthLoss<T> {
    /// Mean cross-entropy over supervised pixels.
    pub loss: f64,
    /// Gradient w.r.t. the depth head's logits, `N×H×W×D`.
    pub grad_logits: DepthMap<T>,
    pub supervised: usize,
}

/// Mean of `−ln p[target]` over pixels whose target is not [`UNSUPERVISED`].
///
/// The logit gradient is `(p − onehot) / count` on supervised pixels and zero
/// elsewhere.
pub fn depth_loss<T: Real>(pred: &DepthMap<T>, targets: &Array3<i32>) -> Result<DepthLoss<T>> {
    let [n, h, w, bins] = pred.dims();
    if targets.shape() != [n, h, w] {
        return Err(Error::shape("depth targets", &[n, h, w], targets.shape()));
    }
    let supervised = targets.iter().filter(|t| **t != UNSUPERVISED).count();
    if supervised == 0 {
        return Err(Error::EmptyMask);
    }
    let scale = 1.0 / supervised as f64;
    let mut grad = Array4::<T>::zeros((n, h, w, bins));
    let mut total = 0f64;
    for ((idx, &t), mut g) in targets.indexed_iter().zip(grad.lanes_mut(ndarray::Axis(3))) {
        if t == UNSUPERVISED {
            continue;
        }
        let t = usize::try_from(t)
            .ok()
            .filter(|t| *t < bins)
            .ok_or_else(|| Error::invalid("depth targets", format!("bin {t} out of range at {idx:?}")))?;
        let (i, j, k) = idx;
        let p = pred.data.slice(ndarray::s![i, j, k, ..]);
        total -= p[t].widen().max(f64::MIN_POSITIVE).ln();
        for (b, gv) in g.iter_mut().enumerate() {
            let onehot = if b == t { 1.0 } else { 0.0 };
            *gv = T::narrow((p[b].widen() - onehot) * scale);
        }
    }
    Ok(DepthLoss {
        loss: total * scale,
        grad_logits: DepthMap::new(grad),
        supervised,
    })
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn probe_logits<T: Real>(q: &BevFeature<T>, probe: &LinearLayer<T>) -> Result<(Array2<T>, Array2<T>)> {
    let [nx, ny, l] = q.dims();
    if probe.output_dim() != 1 || probe.input_dim() != l {
        return Err(Error::shape(
            "probe",
            &[1, l],
            &[probe.output_dim(), probe.input_dim()],
        ));
    }
    let rows = q
        .data
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((nx * ny, l))
        .expect("row view");
    let z = probe.forward(rows.view())?;
    Ok((rows, z))
}

/// Occupancy probability `σ(probe(Q[i, j, :]))` per BEV cell.
pub fn bev_probabilities<T: Real>(q: &BevFeature<T>, probe: &LinearLayer<T>) -> Result<Array2<f64>> {
    let [nx, ny, _] = q.dims();
    let (_, z) = probe_logits(q, probe)?;
    Ok(Array2::from_shape_fn((nx, ny), |(i, j)| logistic(z[[i * ny + j, 0]].widen())))
}

#[derive(Debug, Clone)]
pub struct BevLoss<T> {
    /// Mean binary cross-entropy over cells.
    pub loss: f64,
    pub grad_probe: LinearLayer<T>,
    pub grad_q: BevFeature<T>,
}

/// Mean binary cross-entropy of `σ(probe(Q))` against `gt`.
pub fn bev_loss<T: Real>(q: &BevFeature<T>, probe: &LinearLayer<T>, gt: &Array2<bool>) -> Result<BevLoss<T>> {
    let [nx, ny, l] = q.dims();
    if gt.shape() != [nx, ny] {
        return Err(Error::shape("occupancy labels", &[nx, ny], gt.shape()));
    }
    let (rows, z) = probe_logits(q, probe)?;
    let count = (nx * ny) as f64;
    let mut total = 0f64;
    let mut gz = Array2::<T>::zeros((nx * ny, 1));
    for (r, y) in gt.iter().enumerate() {
        let zr = z[[r, 0]].widen();
        let y = if *y { 1.0 } else { 0.0 };
        // softplus(z) − y·z, written to avoid overflow.
        total += zr.max(0.0) + (-zr.abs()).exp().ln_1p() - y * zr;
        gz[[r, 0]] = T::narrow((logistic(zr) - y) / count);
    }
    let (grad_probe, gx) = probe.backward(rows.view(), gz.view());
    Ok(BevLoss {
        loss: total / count,
        grad_probe,
        grad_q: BevFeature::new(gx.into_shape_with_order((nx, ny, l)).expect("bev shape")),
    })
}

/// Counts for `|pred ∧ gt|` and `|pred ∨ gt|` with `pred = p ≥ threshold`.
pub fn iou_counts(probs: ArrayView2<f64>, gt: &Array2<bool>, threshold: f64) -> (usize, usize) {
    probs.iter().zip(gt.iter()).fold((0, 0), |(i, u), (p, g)| {
        let pred = *p >= threshold;
        (i + (pred && *g) as usize, u + (pred || *g) as usize)
    })
}
