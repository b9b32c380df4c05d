//! Context-encoded memory.
//!
//! A frame's target features are averaged into one context vector, which
//! addresses a bank of `N` prototype rows by a softmax over cosine
//! similarities. The weights are hard-shrunk so that only strongly matching
//! prototypes survive, and the read-out is their weighted sum. Each target's
//! own feature is then concatenated with the read-out before decoding.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Encoder output for one target.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentFeature(pub Array1<f64>);

/// Frame-level context: the mean target feature, or its memory read-out.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVector(pub Array1<f64>);

/// Addressing weights over the memory rows.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub values: Array1<f64>,
    pub is_shrunk: bool,
}

impl WeightVector {
    /// True when shrinkage removed every weight; the read then yields zero.
    pub fn is_zero_read(&self) -> bool {
        self.values.iter().all(|&w| w == 0.0)
    }
}

/// `N x C` matrix of learnable prototype context features.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    pub items: Array2<f64>,
    pub shrink_threshold: f64,
    pub renormalize_after_shrink: bool,
}

impl MemoryBank {
    /// Rows drawn uniformly on the unit sphere.
    pub fn random(slots: usize, dim: usize, shrink_threshold: f64, seed: u64) -> Result<Self> {
        if slots == 0 || dim == 0 {
            return Err(Error::InvalidInput("memory needs N >= 1 and C >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut items = Array2::zeros((slots, dim));
        for mut row in items.axis_iter_mut(Axis(0)) {
            loop {
                row.mapv_inplace(|_: f64| -> f64 { StandardNormal.sample(&mut rng) });
                let norm = row.dot(&row).sqrt();
                if norm > 1e-12 {
                    row /= norm;
                    break;
                }
            }
        }
        Self::new(items, shrink_threshold, false)
    }

    pub fn new(items: Array2<f64>, shrink_threshold: f64, renormalize_after_shrink: bool) -> Result<Self> {
        let bank = Self {
            items,
            shrink_threshold,
            renormalize_after_shrink,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn slots(&self) -> usize {
        self.items.nrows()
    }

    pub fn dim(&self) -> usize {
        self.items.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.items.nrows() == 0 {
            return Err(Error::InvalidInput("memory bank has no rows".into()));
        }
        if !(self.shrink_threshold >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "shrink threshold must be >= 0, got {}",
                self.shrink_threshold
            )));
        }
        for (j, row) in self.items.axis_iter(Axis(0)).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("memory row {j} is not finite")));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::InvalidInput(format!("memory row {j} is all zero")));
            }
        }
        Ok(())
    }
}

/// Mean of the target features of one frame.
pub fn aggregate_context(features: &[LatentFeature]) -> Result<ContextVector> {
    let first = features
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot aggregate an empty frame".into()))?;
    let dim = first.0.len();
    let mut sum = Array1::zeros(dim);
    for f in features {
        if f.0.len() != dim {
            return Err(Error::shape("context aggregation", dim, f.0.len()));
        }
        sum += &f.0;
    }
    Ok(ContextVector(sum / features.len() as f64))
}

pub fn cosine_similarity(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine similarity", a.len(), b.len()));
    }
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput("cosine similarity of a zero-norm vector".into()));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Softmax over cosine similarities between `z` and every memory row.
pub fn address_memory(z: &ContextVector, bank: &MemoryBank) -> Result<WeightVector> {
    if z.0.len() != bank.dim() {
        return Err(Error::shape("memory addressing", bank.dim(), z.0.len()));
    }
    let sims = bank
        .items
        .axis_iter(Axis(0))
        .map(|m| cosine_similarity(z.0.view(), m))
        .collect::<Result<Vec<_>>>()?;
    Ok(WeightVector {
        values: softmax(&Array1::from(sims)),
        is_shrunk: false,
    })
}

fn softmax(x: &Array1<f64>) -> Array1<f64> {
    let max = x.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = x.mapv(|v| (v - max).exp());
    let sum = e.sum();
    e / sum
}

/// Zeroes every weight `<= threshold`; survivors pass through unchanged
/// unless `renormalize` is set.
pub fn hard_shrink(w: &WeightVector, threshold: f64, renormalize: bool) -> WeightVector {
    let mut values = w.values.mapv(|v| if v > threshold { v } else { 0.0 });
    let sum = values.sum();
    if sum == 0.0 {
        log::warn!("hard shrinkage removed every memory weight; memory read is zero");
    } else if renormalize {
        values /= sum;
    }
    WeightVector {
        values,
        is_shrunk: true,
    }
}

/// Weighted sum of memory rows.
pub fn read_memory(w: &WeightVector, bank: &MemoryBank) -> Result<ContextVector> {
    if w.values.len() != bank.slots() {
        return Err(Error::shape("memory read", bank.slots(), w.values.len()));
    }
    Ok(ContextVector(bank.items.t().dot(&w.values)))
}

/// Concatenates a target feature (first) with the frame context (second).
pub fn fuse_context(target: &LatentFeature, context: &ContextVector) -> Result<Array1<f64>> {
    if target.0.len() != context.0.len() {
        return Err(Error::shape("context fusion", target.0.len(), context.0.len()));
    }
    let c = target.0.len();
    let mut out = Array1::zeros(2 * c);
    out.slice_mut(s![..c]).assign(&target.0);
    out.slice_mut(s![c..]).assign(&context.0);
    Ok(out)
}

/// Inverse of [`fuse_context`].
pub fn split_fused(fused: &Array1<f64>) -> Result<(LatentFeature, ContextVector)> {
    if !fused.len().is_multiple_of(2) {
        return Err(Error::InvalidInput("fused feature has odd length".into()));
    }
    let c = fused.len() / 2;
    Ok((
        LatentFeature(fused.slice(s![..c]).to_owned()),
        ContextVector(fused.slice(s![c..]).to_owned()),
    ))
}

/// Intermediate values of one memory pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct MemoryTrace {
    pub sims: Array1<f64>,
    pub weights: Array1<f64>,
    pub shrunk: Array1<f64>,
    /// Sum of the shrunk weights before optional renormalization.
    pub shrunk_sum: f64,
    pub read: Array1<f64>,
}

impl MemoryTrace {
    /// Weights actually used for the read.
    pub fn read_weights(&self) -> &Array1<f64> {
        &self.shrunk
    }
}

pub(crate) fn memory_forward(z: &Array1<f64>, bank: &MemoryBank) -> Result<MemoryTrace> {
    if z.len() != bank.dim() {
        return Err(Error::shape("memory addressing", bank.dim(), z.len()));
    }
    let sims = bank
        .items
        .axis_iter(Axis(0))
        .map(|m| cosine_similarity(z.view(), m))
        .collect::<Result<Vec<_>>>()?;
    let sims = Array1::from(sims);
    let weights = softmax(&sims);
    let raw_shrunk = weights.mapv(|v| if v > bank.shrink_threshold { v } else { 0.0 });
    let shrunk_sum = raw_shrunk.sum();
    let shrunk = if bank.renormalize_after_shrink && shrunk_sum > 0.0 {
        &raw_shrunk / shrunk_sum
    } else {
        raw_shrunk
    };
    if shrunk_sum == 0.0 {
        log::warn!("hard shrinkage removed every memory weight; memory read is zero");
    }
    let read = bank.items.t().dot(&shrunk);
    Ok(MemoryTrace {
        sims,
        weights,
        shrunk,
        shrunk_sum,
        read,
    })
}

/// Back-propagates through read, shrinkage, softmax and cosine addressing.
///
/// `grad_read` is dL/d(read-out) and `grad_shrunk_extra` any additional
/// gradient on the read weights (the entropy term). Memory row gradients are
/// accumulated into `grad_items`; the gradient w.r.t. the context is returned.
pub(crate) fn memory_backward(
    z: &Array1<f64>,
    bank: &MemoryBank,
    trace: &MemoryTrace,
    grad_read: &Array1<f64>,
    grad_shrunk_extra: &Array1<f64>,
    grad_items: &mut Array2<f64>,
) -> Array1<f64> {
    let n = bank.slots();
    // read = sum_j shrunk_j m_j
    for (j, mut g) in grad_items.axis_iter_mut(Axis(0)).enumerate() {
        let wj = trace.shrunk[j];
        if wj != 0.0 {
            g.scaled_add(wj, grad_read);
        }
    }
    let mut grad_shrunk = bank.items.dot(grad_read) + grad_shrunk_extra;

    // optional renormalization: s_j = r_j / S
    if bank.renormalize_after_shrink && trace.shrunk_sum > 0.0 {
        let dot: f64 = grad_shrunk.dot(&trace.shrunk);
        grad_shrunk.mapv_inplace(|g| (g - dot) / trace.shrunk_sum);
    }

    // shrinkage passes gradient only through survivors
    let grad_w = Array1::from_shape_fn(n, |j| {
        if trace.weights[j] > bank.shrink_threshold {
            grad_shrunk[j]
        } else {
            0.0
        }
    });

    // softmax
    let inner = grad_w.dot(&trace.weights);
    let grad_sims = Array1::from_shape_fn(n, |j| trace.weights[j] * (grad_w[j] - inner));

    // cosine
    let nz = z.dot(z).sqrt();
    let mut grad_z = Array1::zeros(z.len());
    for (j, m) in bank.items.axis_iter(Axis(0)).enumerate() {
        let g = grad_sims[j];
        if g == 0.0 {
            continue;
        }
        let nm = m.dot(&m).sqrt();
        let d = trace.sims[j];
        // dd/dz = m/(|z||m|) - d z/|z|^2
        grad_z.scaled_add(g / (nz * nm), &m);
        grad_z.scaled_add(-g * d / (nz * nz), z);
        // dd/dm = z/(|z||m|) - d m/|m|^2
        let mut row = grad_items.row_mut(j);
        row.scaled_add(g / (nz * nm), z);
        row.scaled_add(-g * d / (nm * nm), &m);
    }
    grad_z
}
