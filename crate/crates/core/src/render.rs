//! Image renderings of predictions and proxy maps.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::hra::{AssocLayout, NEIGHBORS};
use crate::metrics::{LabelCodec, LabelMap};
use crate::model::Model;
use crate::netpbm::{GrayImage, RgbImage};
use crate::tensor::{Scalar, Tensor};

pub fn render_prediction(class_map: &LabelMap, codec: &LabelCodec) -> Result<RgbImage> {
    codec.encode_rgb(class_map)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-pixel entropy of the association map, scaled so that a uniform
/// distribution over all nine neighbors is white.
pub fn association_entropy<T: Scalar>(q: &Tensor<T>, layout: AssocLayout) -> Result<GrayImage> {
    if q.shape() != [layout.pixels(), NEIGHBORS] {
        return Err(Error::dim(format!("association map {:?} for a {}×{} layout", q.shape(), layout.height(), layout.width())));
    }
    let norm = (NEIGHBORS as f64).ln();
    let data = q
        .data()
        .chunks(NEIGHBORS)
        .map(|row| {
            let h: f64 = row.iter().map(|p| p.as_f64()).filter(|&p| p > 0.0).map(|p| -p * p.ln()).sum();
            to_byte(h / norm)
        })
        .collect();
    GrayImage::new(layout.width(), layout.height(), data)
}

/// One grid-sized grayscale map per class from a `C×E` class-to-patch
/// matrix, each stretched to its own range.
pub fn class_maps<T: Scalar>(c2p: &Tensor<T>, grid: (usize, usize)) -> Result<Vec<GrayImage>> {
    let (c, e) = c2p.dims2()?;
    if e != grid.0 * grid.1 {
        return Err(Error::dim(format!("{e} patches for a {}×{} grid", grid.0, grid.1)));
    }
    c2p.data()
        .chunks(e.max(1))
        .take(c)
        .map(|row| {
            let (lo, hi) = row.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v.as_f64()), hi.max(v.as_f64())));
            let span = hi - lo;
            let data = row.iter().map(|v| if span > 0.0 { to_byte((v.as_f64() - lo) / span) } else { 0 }).collect();
            GrayImage::new(grid.1, grid.0, data)
        })
        .collect()
}

/// Everything `export-maps` writes for one image.
#[derive(Clone, Debug)]
pub struct MapSet {
    pub prediction: RgbImage,
    pub entropy: Option<GrayImage>,
    pub gca: Vec<GrayImage>,
}

pub fn export_maps<T: Scalar>(model: &Model<T>, image: &Tensor<T>, codec: &LabelCodec) -> Result<MapSet> {
    let prediction = render_prediction(&model.predict(image)?.class_map, codec)?;
    let mut g = Graph::new();
    let out = model.forward(&mut g, image)?;
    let entropy = match &out.assoc {
        Some(a) => Some(association_entropy(g.value(a.q), a.layout)?),
        None => None,
    };
    let gca = match &out.gca {
        Some(m) => class_maps(g.value(m.refined), model.config.grid())?,
        None => Vec::new(),
    };
    Ok(MapSet { prediction, entropy, gca })
}
