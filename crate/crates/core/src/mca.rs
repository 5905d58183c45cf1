//! Class-token attention aggregation and per-region class logits.

use crate::encoder::EncodeOutput;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Scalar;

/// Mean over every head of the last `layers` attention maps.
pub fn aggregate_attention<T: Scalar>(g: &mut Graph<T>, enc: &EncodeOutput, layers: usize) -> Result<Var> {
    let depth = enc.depth();
    if layers < 1 || layers > depth {
        return Err(Error::config(format!("attention aggregation over {layers} of {depth} layers")));
    }
    let maps: Vec<Var> = enc.attention[depth - layers..].iter().flatten().copied().collect();
    let n = T::from_count(maps.len());
    g.scaled_sum(&maps, T::one() / n)
}

/// `(class_to_patch C×E, patch_affinity E×E)` blocks of the aggregated map.
pub fn split_attention<T: Scalar>(g: &mut Graph<T>, agg: Var, classes: usize, patches: usize) -> Result<(Var, Var)> {
    let (r, c) = g.value(agg).dims2()?;
    if r != classes + patches || c != r {
        return Err(Error::dim(format!(
            "aggregated attention {r}×{c} for {classes} classes and {patches} patches"
        )));
    }
    let class_to_patch = g.block(agg, 0, classes, classes, patches)?;
    let affinity = g.block(agg, classes, patches, classes, patches)?;
    Ok((class_to_patch, affinity))
}

/// `steps` rounds of `map ← map · Âᵀ` with `Â` the row-normalized
/// symmetrized affinity.
pub fn refine_with_affinity<T: Scalar>(g: &mut Graph<T>, class_to_patch: Var, affinity: Var, steps: usize) -> Result<Var> {
    if steps == 0 {
        return Ok(class_to_patch);
    }
    let at = g.transpose(affinity)?;
    let sym = g.scaled_sum(&[affinity, at], T::lit(0.5))?;
    let norm = g.row_normalize(sym)?;
    let norm_t = g.transpose(norm)?;
    let mut refined = class_to_patch;
    for _ in 0..steps {
        refined = g.matmul(refined, norm_t)?;
    }
    Ok(refined)
}

/// `E×C`: row `s` holds the class logits of region `s`.
pub fn region_class_logits<T: Scalar>(g: &mut Graph<T>, refined: Var) -> Result<Var> {
    g.transpose(refined)
}

/// All intermediate maps of the class-attention path.
#[derive(Clone, Copy, Debug)]
pub struct GcaMap {
    pub aggregated: Var,
    pub class_to_patch: Var,
    pub patch_affinity: Var,
    pub refined: Var,
    pub region_logits: Var,
}

pub fn gca_map<T: Scalar>(g: &mut Graph<T>, enc: &EncodeOutput, layers: usize, steps: usize) -> Result<GcaMap> {
    let aggregated = aggregate_attention(g, enc, layers)?;
    let (class_to_patch, patch_affinity) = split_attention(g, aggregated, enc.class_tokens, enc.num_patches)?;
    let refined = refine_with_affinity(g, class_to_patch, patch_affinity, steps)?;
    let region_logits = region_class_logits(g, refined)?;
    Ok(GcaMap { aggregated, class_to_patch, patch_affinity, refined, region_logits })
}
