//! Pixel-to-region association over the 3×3 token neighborhood.
//!
//! Every pixel of the stride-`(h, w)` map gets a probability vector over the
//! nine token cells surrounding its own cell. Neighbor `k` is the offset
//! `(dy, dx) = (k / 3 - 1, k % 3 - 1)`; offsets falling off the grid are
//! masked to exactly zero.

use crate::encoder::EncodeOutput;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamSpec};
use crate::tensor::{Scalar, Tensor};

pub const NEIGHBORS: usize = 9;
pub const CENTER: usize = 4;

/// Token offset `(dy, dx)` of neighbor slot `k`.
pub fn neighbor_offset(k: usize) -> (isize, isize) {
    (k as isize / 3 - 1, k as isize % 3 - 1)
}

/// Raster index of the token cell that neighbor `k` of cell `(gy, gx)`
/// refers to, if it lies on the grid.
pub fn neighbor_index(gy: usize, gx: usize, k: usize, grid: (usize, usize)) -> Option<usize> {
    let (dy, dx) = neighbor_offset(k);
    let y = gy as isize + dy;
    let x = gx as isize + dx;
    (y >= 0 && x >= 0 && (y as usize) < grid.0 && (x as usize) < grid.1).then(|| y as usize * grid.1 + x as usize)
}

/// Geometry shared by the association map and fusion.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AssocLayout {
    pub grid: (usize, usize),
    pub stride: (usize, usize),
}

impl AssocLayout {
    pub fn new(grid: (usize, usize), stride: (usize, usize)) -> Self {
        Self { grid, stride }
    }

    pub fn height(&self) -> usize {
        self.grid.0 * self.stride.0
    }

    pub fn width(&self) -> usize {
        self.grid.1 * self.stride.1
    }

    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn channels(&self) -> usize {
        self.stride.0 * self.stride.1 * NEIGHBORS
    }

    /// Token cell containing map pixel `(u, v)`.
    pub fn cell(&self, u: usize, v: usize) -> (usize, usize) {
        (u / self.stride.0, v / self.stride.1)
    }

    /// For every pixel and slot, the neighbor token's raster index.
    pub fn neighbor_table(&self) -> Vec<Option<usize>> {
        let mut table = Vec::with_capacity(self.pixels() * NEIGHBORS);
        for u in 0..self.height() {
            for v in 0..self.width() {
                let (gy, gx) = self.cell(u, v);
                table.extend((0..NEIGHBORS).map(|k| neighbor_index(gy, gx, k, self.grid)));
            }
        }
        table
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.neighbor_table().iter().map(Option::is_some).collect()
    }

    /// Flat index into the `H_g×W_g×(h·w·9)` conv output for every element
    /// of the `(H_g·h)×(W_g·w)×9` logits map.
    fn unpack_index(&self) -> Vec<Option<usize>> {
        let (h, w) = self.stride;
        let ch = self.channels();
        let mut index = Vec::with_capacity(self.pixels() * NEIGHBORS);
        for u in 0..self.height() {
            for v in 0..self.width() {
                let (gy, gx) = self.cell(u, v);
                let base = (gy * self.grid.1 + gx) * ch + ((u % h) * w + v % w) * NEIGHBORS;
                index.extend((base..base + NEIGHBORS).map(Some));
            }
        }
        index
    }
}

pub fn param_specs(embed_dim: usize, stride: (usize, usize)) -> Vec<ParamSpec> {
    let out = stride.0 * stride.1 * NEIGHBORS;
    vec![
        ParamSpec::new("hra.dw.weight", &[3, 3, embed_dim], Init::TruncNormal),
        ParamSpec::new("hra.dw.bias", &[embed_dim], Init::Zeros),
        ParamSpec::new("hra.pw.weight", &[embed_dim, out], Init::TruncNormal),
        ParamSpec::new("hra.pw.bias", &[out], Init::Zeros),
    ]
}

pub fn param_count(embed_dim: usize, stride: (usize, usize)) -> usize {
    let out = stride.0 * stride.1 * NEIGHBORS;
    9 * embed_dim + embed_dim + embed_dim * out + out
}

#[derive(Clone, Copy, Debug)]
pub struct ConvModuleVars {
    pub dw: (Var, Var),
    pub pw: (Var, Var),
}

impl ConvModuleVars {
    pub fn resolve(lookup: &dyn Fn(&str) -> Result<Var>) -> Result<Self> {
        Ok(Self {
            dw: (lookup("hra.dw.weight")?, lookup("hra.dw.bias")?),
            pw: (lookup("hra.pw.weight")?, lookup("hra.pw.bias")?),
        })
    }
}

/// `T_M` patch rows arranged as an `H_g×W_g×D` grid.
pub fn token_head<T: Scalar>(g: &mut Graph<T>, enc: &EncodeOutput, depth: usize, grid: (usize, usize)) -> Result<Var> {
    if depth < 1 || depth > enc.depth() {
        return Err(Error::config(format!("token head depth {depth} outside 1..={}", enc.depth())));
    }
    if grid.0 * grid.1 != enc.num_patches {
        return Err(Error::dim(format!("grid {grid:?} does not hold {} patches", enc.num_patches)));
    }
    let t = enc
        .layer_output(depth)
        .ok_or_else(|| Error::config(format!("token head needs the output of layer {depth}")))?;
    let d = g.shape(t)[1];
    let patches = g.slice_rows(t, enc.class_tokens, enc.num_patches)?;
    g.reshape(patches, &[grid.0, grid.1, d])
}

/// Depthwise 3×3 then pointwise projection, unpacked to per-pixel 9-logit
/// vectors.
pub fn conv_module<T: Scalar>(g: &mut Graph<T>, grid: Var, vars: &ConvModuleVars, stride: (usize, usize)) -> Result<Var> {
    let (gh, gw, _) = g.value(grid).dims3()?;
    let layout = AssocLayout::new((gh, gw), stride);
    let out_ch = g.shape(vars.pw.0).get(1).copied().unwrap_or(0);
    if out_ch != layout.channels() {
        return Err(Error::config(format!(
            "conv module emits {out_ch} channels, stride {stride:?} needs {}",
            layout.channels()
        )));
    }
    let x = g.depthwise_conv3x3(grid, vars.dw.0, vars.dw.1)?;
    let x = g.pointwise_conv1x1(x, vars.pw.0, vars.pw.1)?;
    g.gather(x, &[layout.height(), layout.width(), NEIGHBORS], layout.unpack_index())
}

/// The normalized association map and its geometry.
#[derive(Clone, Debug)]
pub struct AssociationMap {
    /// `P×9` probabilities, `P = (H_g·h)·(W_g·w)` in raster order.
    pub q: Var,
    pub valid_mask: Vec<bool>,
    pub layout: AssocLayout,
}

/// Masked softmax over the neighbor axis of conv-module logits.
pub fn normalize_associations<T: Scalar>(g: &mut Graph<T>, logits: Var, layout: AssocLayout) -> Result<AssociationMap> {
    let expect = [layout.height(), layout.width(), NEIGHBORS];
    if g.shape(logits) != expect {
        return Err(Error::dim(format!(
            "association logits {:?}, expected {expect:?}",
            g.shape(logits)
        )));
    }
    let flat = g.reshape(logits, &[layout.pixels(), NEIGHBORS])?;
    let valid_mask = layout.valid_mask();
    let q = g.masked_softmax(flat, &valid_mask)?;
    Ok(AssociationMap { q, valid_mask, layout })
}

/// Plain-tensor variant of the masked softmax for analysis and rendering.
pub fn normalize_tensor<T: Scalar>(logits: &Tensor<T>, layout: AssocLayout) -> Result<Tensor<T>> {
    let flat = logits.clone().reshape(vec![layout.pixels(), NEIGHBORS])?;
    crate::ops::masked_softmax(&flat, &layout.valid_mask())
}
