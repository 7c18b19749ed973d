//! The pixel transformer: moves existing pixels under predicted per-pixel
//! kernels and composites with a background mask.
//!
//! Every output pixel is a convex combination of the input pixels inside its
//! `(2*kappa+1)^2` window, optionally blended with the previous frame's pixel
//! at the same location. No new color values can be invented, which is the
//! mechanism behind the no-content-leakage guarantee: the output of any
//! rollout lies inside the convex hull of the input image's pixel values.

use crate::tensor::{Element, Graph, Tensor, Var};
use crate::{Error, Result};

/// Default kernel window radius; a pixel can move at most this many pixels
/// per frame in each direction.
pub const KAPPA: usize = 2;

/// Number of kernel taps for a window radius.
pub const fn taps(kappa: usize) -> usize {
    (2 * kappa + 1) * (2 * kappa + 1)
}

/// Flat tap index for offset `(dy, dx)`, each in `[-kappa, kappa]`.
pub const fn tap_index(kappa: usize, dy: isize, dx: isize) -> usize {
    let side = 2 * kappa + 1;
    (dy + kappa as isize) as usize * side + (dx + kappa as isize) as usize
}

/// Per-pixel convex kernels: `(taps, H, W)` with every pixel's taps
/// nonnegative and summing to 1.
#[derive(Debug, Clone)]
pub struct KernelField<E: Element> {
    weights: Tensor<E>,
    kappa: usize,
}

impl<E: Element> KernelField<E> {
    /// Wraps pre-normalized weights, verifying the convexity invariants.
    pub fn new(weights: Tensor<E>, kappa: usize) -> Result<Self> {
        let shape = weights.shape();
        if shape.len() != 3 || shape[0] != taps(kappa) {
            return Err(Error::dim(
                "kernel_field",
                format!("want ({}, H, W) weights for kappa {kappa}, got {shape:?}", taps(kappa)),
            ));
        }
        let field = KernelField { weights, kappa };
        field.validate()?;
        Ok(field)
    }

    /// Per-pixel softmax over the tap axis; always satisfies the invariants.
    pub fn from_logits(logits: &Tensor<E>, kappa: usize) -> Result<Self> {
        let shape = logits.shape();
        if shape.len() != 3 || shape[0] != taps(kappa) {
            return Err(Error::dim(
                "kernel_field",
                format!("want ({}, H, W) logits for kappa {kappa}, got {shape:?}", taps(kappa)),
            ));
        }
        let mut g = Graph::<E>::new();
        let l = g.bind(logits);
        let sm = g.softmax0(l);
        Ok(KernelField { weights: g.detach(sm), kappa })
    }

    pub fn weights(&self) -> &Tensor<E> {
        &self.weights
    }

    pub fn kappa(&self) -> usize {
        self.kappa
    }

    /// Checks nonnegativity and per-pixel normalization (tolerance 1e-5).
    pub fn validate(&self) -> Result<()> {
        let shape = self.weights.shape();
        let (t, plane) = (shape[0], shape[1] * shape[2]);
        let data = self.weights.data();
        for p in 0..plane {
            let mut sum = 0.0f64;
            for ti in 0..t {
                let v = data[ti * plane + p].to_f64();
                if v < 0.0 {
                    return Err(Error::contract(
                        "kernel_field",
                        format!("negative weight {v} at pixel {p}"),
                    ));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::contract(
                    "kernel_field",
                    format!("kernel at pixel {p} sums to {sum}, not 1"),
                ));
            }
        }
        Ok(())
    }
}

/// Per-pixel blend weights in `[0, 1]`; 1 copies the previous frame.
#[derive(Debug, Clone)]
pub struct BackgroundMask<E: Element> {
    values: Tensor<E>,
}

impl<E: Element> BackgroundMask<E> {
    pub fn new(values: Tensor<E>) -> Result<Self> {
        if values.shape().len() != 3 || values.shape()[0] != 1 {
            return Err(Error::dim(
                "mask",
                format!("want (1, H, W) mask, got {:?}", values.shape()),
            ));
        }
        if values.data().iter().any(|v| {
            let v = Element::to_f64(*v);
            !(0.0..=1.0).contains(&v)
        }) {
            return Err(Error::contract("mask", "mask values must lie in [0, 1]"));
        }
        Ok(BackgroundMask { values })
    }

    pub fn values(&self) -> &Tensor<E> {
        &self.values
    }
}

/// Applies a kernel field to an image outside any graph (evaluation path).
///
/// `output(c, i, j) = sum_{dy,dx} field(tap(dy,dx), i, j) * image(c, i-dy, j-dx)`
/// with edge-inclusive reflection at the borders.
pub fn apply_kernel_field<E: Element>(
    image: &Tensor<E>,
    field: &KernelField<E>,
) -> Result<Tensor<E>> {
    let mut g = Graph::<E>::new();
    let img = g.bind(image);
    let f = g.bind(field.weights());
    let out = g.apply_kernels(img, f, field.kappa())?;
    Ok(g.detach(out))
}

/// `mask * prev + (1 - mask) * transformed`, broadcasting the single mask
/// channel over the image channels.
pub fn composite<E: Element>(
    prev: &Tensor<E>,
    transformed: &Tensor<E>,
    mask: &BackgroundMask<E>,
) -> Result<Tensor<E>> {
    if prev.shape() != transformed.shape() {
        return Err(Error::dim(
            "composite",
            format!("prev {:?} vs transformed {:?}", prev.shape(), transformed.shape()),
        ));
    }
    let mut g = Graph::<E>::new();
    let p = g.bind(prev);
    let t = g.bind(transformed);
    let m = g.bind(mask.values());
    let out = composite_on_graph(&mut g, p, t, m)?;
    Ok(g.detach(out))
}

/// Graph-side composite used inside rollouts.
pub fn composite_on_graph<E: Element>(
    g: &mut Graph<E>,
    prev: Var,
    transformed: Var,
    mask: Var,
) -> Result<Var> {
    let masked_prev = g.mul(mask, prev)?;
    let neg = g.mul_scalar(mask, -1.0);
    let inv = g.add_scalar(neg, 1.0);
    let masked_new = g.mul(inv, transformed)?;
    g.add(masked_prev, masked_new)
}

/// One full transformer application on the graph: normalize kernel logits,
/// move pixels, squash the mask logits, and composite.
///
/// Returns `(composited_frame, kernel_field, mask)` so losses and analyses
/// can reuse the intermediates.
pub fn transform_on_graph<E: Element>(
    g: &mut Graph<E>,
    prev_frame: Var,
    kernel_logits: Var,
    mask_logits: Var,
    kappa: usize,
) -> Result<(Var, Var, Var)> {
    let field = g.softmax0(kernel_logits);
    let moved = g.apply_kernels(prev_frame, field, kappa)?;
    let mask = g.sigmoid(mask_logits);
    let out = composite_on_graph(g, prev_frame, moved, mask)?;
    Ok((out, field, mask))
}
