use super::Predictions;
use crate::data::QueryRecord;
use crate::encoder::{init_queries, Frame};
use crate::engine::TrackerModel;
use crate::error::Result;
use crate::heads::patch_center;
use crate::numerics::Graph;

/// Every point stays where it was queried and is always visible.
pub fn static_baseline(queries: &[QueryRecord], tracks: usize, frames: usize) -> Predictions {
    let mut p = Predictions::new(tracks, frames);
    for q in queries {
        for t in q.t..frames {
            p.set(q.id, t, [q.x, q.y], true);
        }
    }
    p
}

/// Per frame, the patch whose fused feature has the highest cosine with the
/// query's initial feature; no memory, no refinement, always visible.
pub fn feature_match_baseline(model: &TrackerModel, frames: &[Frame], queries: &[QueryRecord], tracks: usize) -> Result<Predictions> {
    let ps = &model.params;
    let mut p = Predictions::new(tracks, frames.len());
    let mut init: Vec<Option<Vec<f32>>> = vec![None; queries.len()];
    for frame in frames {
        let t = frame.index;
        let mut g = Graph::new();
        let pyr = model.encoder.encode(&mut g, ps, frame)?;
        let starting: Vec<usize> = (0..queries.len()).filter(|&j| queries[j].t == t).collect();
        if !starting.is_empty() {
            let pos: Vec<(f32, f32)> = starting.iter().map(|&j| (queries[j].x, queries[j].y)).collect();
            let q = init_queries(&mut g, pyr.fused, &pos)?;
            for (r, &j) in starting.iter().enumerate() {
                init[j] = Some(unit(g.value(q).row(r)));
            }
        }
        let fused = g.value(pyr.fused);
        let (gw, d) = (fused.shape()[1], fused.shape()[2]);
        let feats: Vec<Vec<f32>> = fused.data().chunks(d).map(unit).collect();
        for (j, q) in queries.iter().enumerate() {
            let Some(qi) = &init[j] else { continue };
            let mut best = (0, f32::NEG_INFINITY);
            for (idx, f) in feats.iter().enumerate() {
                let s: f32 = f.iter().zip(qi).map(|(a, b)| a * b).sum();
                if s > best.1 {
                    best = (idx, s);
                }
            }
            let (x, y) = patch_center(best.0, gw);
            p.set(q.id, t, [x, y], true);
        }
    }
    Ok(p)
}

fn unit(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}
