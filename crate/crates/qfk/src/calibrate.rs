//! Calibration sharded across threads.

use rayon::prelude::*;

use qfk_core::graph::Graph;
use qfk_core::quantizer::{
    activation_qparams, check_calibration_size, collect_histograms, merge_stats, observe_image,
    quantize_graph, require_folded, Histogram, QuantizedGraph, StatsMap, Strategy,
};
use qfk_core::{Result, TensorF32};

const SHARD: usize = 16;

/// Min/max statistics (plus histograms for [`Strategy::Percentile`]) over a
/// calibration set. Shards are merged in order, and min, max, counts and
/// histogram bins merge associatively, so the result equals the serial pass.
pub fn calibrate(
    g: &Graph,
    images: &[TensorF32],
    strategy: Strategy,
    force: bool,
) -> Result<StatsMap> {
    check_calibration_size(images.len(), force)?;
    require_folded(g)?;
    let shards: Vec<StatsMap> = images
        .par_chunks(SHARD)
        .map(|chunk| {
            let mut s = StatsMap::new();
            for img in chunk {
                merge_stats(&mut s, &observe_image(g, img)?);
            }
            Ok(s)
        })
        .collect::<Result<_>>()?;
    let mut stats = StatsMap::new();
    for s in &shards {
        merge_stats(&mut stats, s);
    }
    if strategy == Strategy::Percentile {
        let hist_shards: Vec<StatsMap> = images
            .par_chunks(SHARD)
            .map(|chunk| {
                let mut s = stats.clone();
                collect_histograms(g, chunk, &mut s)?;
                Ok(s)
            })
            .collect::<Result<_>>()?;
        for (id, s) in stats.iter_mut() {
            let mut hist = None::<Histogram>;
            for shard in &hist_shards {
                let h = shard[id]
                    .histogram
                    .as_ref()
                    .expect("histogram pass fills every node");
                match &mut hist {
                    None => hist = Some(h.clone()),
                    Some(acc) => acc.merge(h),
                }
            }
            s.histogram = hist;
        }
    }
    Ok(stats)
}

/// Quantizes a BN-folded graph from its calibration statistics.
pub fn quantize(g: &Graph, stats: &StatsMap, strategy: Strategy) -> Result<QuantizedGraph> {
    quantize_graph(g, &activation_qparams(g, stats, strategy)?)
}
