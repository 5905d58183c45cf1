//! Fusion of associations with region logits, loss, and tiled inference.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::hra::{AssociationMap, NEIGHBORS};
use crate::metrics::LabelMap;
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Test-time scale factors.
pub const DEFAULT_SCALES: [f64; 6] = [0.5, 0.75, 1.0, 1.25, 1.5, 1.75];

/// Per-pixel `Σ_k q_k(p) · logits[neighbor_k(p)]` on the stride map.
/// Returns `(H_g·h)×(W_g·w)×C`.
pub fn fuse<T: Scalar>(g: &mut Graph<T>, assoc: &AssociationMap, region_logits: Var) -> Result<Var> {
    let layout = assoc.layout;
    let (regions, classes) = g.value(region_logits).dims2()?;
    if regions != layout.grid.0 * layout.grid.1 {
        return Err(Error::dim(format!(
            "{regions} region logit rows for a {}×{} token grid",
            layout.grid.0, layout.grid.1
        )));
    }
    if g.shape(assoc.q) != [layout.pixels(), NEIGHBORS] {
        return Err(Error::dim(format!("association map {:?} for layout {layout:?}", g.shape(assoc.q))));
    }
    let mixed = g.weighted_gather(assoc.q, region_logits, layout.neighbor_table())?;
    g.reshape(mixed, &[layout.height(), layout.width(), classes])
}

/// Full-resolution class probabilities and their argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    /// `H×W×C`, each pixel a probability vector.
    pub probs: Tensor<T>,
    pub class_map: LabelMap,
}

impl<T: Scalar> Prediction<T> {
    pub fn from_probs(probs: Tensor<T>) -> Result<Self> {
        let (h, w, c) = probs.dims3()?;
        let class_map = LabelMap::new(h, w, argmax_rows(probs.data(), c))?;
        Ok(Self { probs, class_map })
    }
}

/// Index of the largest entry of each `c`-wide row; ties go to the lowest
/// index.
pub fn argmax_rows<T: Scalar>(data: &[T], c: usize) -> Vec<u8> {
    data.chunks(c.max(1))
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

pub fn upsample_and_classify<T: Scalar>(logits: &Tensor<T>, height: usize, width: usize) -> Result<Prediction<T>> {
    let up = ops::bilinear_upsample(logits, height, width)?;
    Prediction::from_probs(ops::softmax(&up, 2)?)
}

/// Cross-entropy of logits upsampled to the label resolution.
pub fn seg_loss<T: Scalar>(g: &mut Graph<T>, logits_map: Var, labels: &LabelMap) -> Result<Var> {
    let (_, _, c) = g.value(logits_map).dims3()?;
    let up = g.bilinear_upsample(logits_map, labels.height, labels.width)?;
    let flat = g.reshape(up, &[labels.height * labels.width, c])?;
    g.cross_entropy(flat, &labels.targets(), ops::IGNORE_INDEX)
}

/// Mirror index for reflection padding without edge repetition.
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n <= 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Extends an `H×W×C` tensor to `out_h×out_w` by reflecting past the
/// bottom and right edges.
pub fn pad_reflect<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3()?;
    if out_h < h || out_w < w {
        return Err(Error::dim(format!("cannot pad {h}×{w} down to {out_h}×{out_w}")));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let src = x.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let sy = reflect_index(y, h);
        for xi in 0..out_w {
            let base = (sy * w + reflect_index(xi, w)) * c;
            out.extend_from_slice(&src[base..base + c]);
        }
    }
    Tensor::new([out_h, out_w, c], out)
}

/// The `h×w` window at `(y0, x0)` of an `H×W×C` tensor.
pub fn crop<T: Scalar>(x: &Tensor<T>, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let (ih, iw, c) = x.dims3()?;
    if y0 + h > ih || x0 + w > iw {
        return Err(Error::dim(format!("crop {h}×{w} at ({y0}, {x0}) of {ih}×{iw}")));
    }
    let mut out = Vec::with_capacity(h * w * c);
    for y in y0..y0 + h {
        let row = (y * iw + x0) * c;
        out.extend_from_slice(&x.data()[row..row + w * c]);
    }
    Tensor::new([h, w, c], out)
}

pub fn flip_horizontal<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = x.dims3()?;
    let mut out = Vec::with_capacity(x.len());
    for y in 0..h {
        for xi in (0..w).rev() {
            let base = (y * w + xi) * c;
            out.extend_from_slice(&x.data()[base..base + c]);
        }
    }
    Tensor::new([h, w, c], out)
}

/// Tile origins along one axis; the last tile is clamped to the edge.
pub fn window_starts(n: usize, window: usize, stride: usize) -> Vec<usize> {
    if n <= window {
        return vec![0];
    }
    let stride = stride.max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + window < n).collect();
    starts.push(n - window);
    starts.dedup();
    starts
}

/// Class probabilities for one window-sized `H×W×3` input.
pub type WindowFn<'a, T> = dyn Fn(&Tensor<T>) -> Result<Tensor<T>> + 'a;

/// Averages window probabilities over overlapping tiles. Inputs smaller
/// than the window are reflection-padded and the result cropped back.
pub fn sliding_window_infer<T: Scalar>(infer: &WindowFn<'_, T>, image: &Tensor<T>, window: usize, stride: usize) -> Result<Prediction<T>> {
    let (h, w, _) = image.dims3()?;
    if window == 0 {
        return Err(Error::config("window must be positive"));
    }
    let padded = pad_reflect(image, h.max(window), w.max(window))?;
    let (ph, pw, _) = padded.dims3()?;
    let mut sum: Option<Tensor<T>> = None;
    let mut count = vec![0usize; ph * pw];
    for &y0 in &window_starts(ph, window, stride) {
        for &x0 in &window_starts(pw, window, stride) {
            let tile = crop(&padded, y0, x0, window, window)?;
            let probs = infer(&tile)?;
            let (th, tw, c) = probs.dims3()?;
            if (th, tw) != (window, window) {
                return Err(Error::dim(format!("window inference returned {th}×{tw} for {window}×{window}")));
            }
            let acc = sum.get_or_insert_with(|| Tensor::zeros([ph, pw, c]));
            if acc.shape()[2] != c {
                return Err(Error::dim("class count changed between windows"));
            }
            for y in 0..window {
                for x in 0..window {
                    let dst = (y0 + y) * pw + x0 + x;
                    count[dst] += 1;
                    let src = &probs.data()[(y * window + x) * c..(y * window + x + 1) * c];
                    for (o, &v) in acc.data_mut()[dst * c..(dst + 1) * c].iter_mut().zip(src) {
                        *o += v;
                    }
                }
            }
        }
    }
    let mut acc = sum.ok_or_else(|| Error::dim("no windows"))?;
    let c = acc.shape()[2];
    for (px, &n) in acc.data_mut().chunks_mut(c.max(1)).zip(&count) {
        let n = T::from_count(n);
        px.iter_mut().for_each(|v| *v /= n);
    }
    Prediction::from_probs(crop(&acc, 0, 0, h, w)?)
}

/// Averages sliding-window probabilities over rescaled and optionally
/// mirrored copies of the image.
pub fn multiscale_infer<T: Scalar>(
    infer: &WindowFn<'_, T>,
    image: &Tensor<T>,
    scales: &[f64],
    flip: bool,
    window: usize,
    stride: usize,
) -> Result<Prediction<T>> {
    if scales.is_empty() {
        return Err(Error::config("at least one inference scale is required"));
    }
    let (h, w, _) = image.dims3()?;
    let mut maps = Vec::with_capacity(scales.len() * (1 + flip as usize));
    for &s in scales {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::config(format!("invalid inference scale {s}")));
        }
        let sh = ((h as f64 * s).round() as usize).max(1);
        let sw = ((w as f64 * s).round() as usize).max(1);
        let scaled = ops::bilinear_upsample(image, sh, sw)?;
        let probs = sliding_window_infer(infer, &scaled, window, stride)?.probs;
        maps.push(ops::bilinear_upsample(&probs, h, w)?);
        if flip {
            let mirrored = flip_horizontal(&scaled)?;
            let probs = sliding_window_infer(infer, &mirrored, window, stride)?.probs;
            maps.push(ops::bilinear_upsample(&flip_horizontal(&probs)?, h, w)?);
        }
    }
    let n = T::from_count(maps.len());
    let mut iter = maps.into_iter();
    let mut acc = iter.next().expect("non-empty");
    for m in iter {
        acc.add_assign(&m);
    }
    acc.data_mut().iter_mut().for_each(|v| *v /= n);
    Prediction::from_probs(acc)
}
