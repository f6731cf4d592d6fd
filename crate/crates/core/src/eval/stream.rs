use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::Predictions;
use crate::data::QueryRecord;
use crate::encoder::{Frame, QuerySpec};
use crate::engine::{SessionOptions, TrackerModel, TrackerSession};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRecord {
    pub id: usize,
    pub x: f32,
    pub y: f32,
    pub visible: bool,
    pub v_prob: f32,
    pub u_prob: f32,
}

/// One line of the track output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub t: usize,
    pub points: Vec<PointRecord>,
}

pub fn write_record(w: &mut impl Write, rec: &FrameRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n").map_err(|e| Error::Format(format!("writing track output: {e}")))
}

/// Parses a track stream into `[queries, frames]` arrays. Cells without a
/// record stay at the origin, predicted occluded.
pub fn read_stream(reader: impl BufRead, queries: usize, frames: usize) -> Result<Predictions> {
    let mut p = Predictions::new(queries, frames);
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        if rec.t >= frames {
            return Err(Error::Format(format!("line {}: frame {} of a {frames}-frame clip", n + 1, rec.t)));
        }
        for pt in rec.points {
            if pt.id >= queries {
                return Err(Error::Format(format!("line {}: point id {} but {queries} tracks", n + 1, pt.id)));
            }
            p.set(pt.id, rec.t, [pt.x, pt.y], pt.visible);
        }
    }
    Ok(p)
}

/// Streams `frames` through a session, handing each frame's record to
/// `emit`, and collects the predictions for `tracks` ids.
pub fn run_tracker<I>(
    model: &TrackerModel,
    frames: I,
    queries: &[QueryRecord],
    tracks: usize,
    opts: SessionOptions,
    mut emit: impl FnMut(&FrameRecord) -> Result<()>,
) -> Result<Predictions>
where
    I: ExactSizeIterator<Item = Result<Frame>>,
{
    let n_frames = frames.len();
    if let Some(q) = queries.iter().find(|q| q.id >= tracks) {
        return Err(Error::Param(format!("query id {} but {tracks} tracks", q.id)));
    }
    let specs: Vec<QuerySpec> = queries.iter().map(|q| QuerySpec { start: q.t, x: q.x, y: q.y }).collect();
    let mut session = TrackerSession::new(model, &specs, opts)?;
    let mut out = Predictions::new(tracks, n_frames);
    let threshold = model.config.delta_v;
    for frame in frames {
        let frame = frame?;
        let t = frame.index;
        let preds = session.step(&frame)?;
        let points = preds
            .into_iter()
            .map(|(j, p)| {
                let id = queries[j].id;
                let visible = p.visible(threshold);
                let (x, y) = p.position;
                out.set(id, t, [x, y], visible);
                PointRecord { id, x, y, visible, v_prob: p.visibility, u_prob: p.uncertainty }
            })
            .collect();
        emit(&FrameRecord { t, points })?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_round_trip() {
        let recs = vec![
            FrameRecord { t: 0, points: vec![PointRecord { id: 1, x: 2.0, y: 3.0, visible: true, v_prob: 0.9, u_prob: 0.1 }] },
            FrameRecord { t: 1, points: vec![PointRecord { id: 0, x: 4.5, y: 1.0, visible: false, v_prob: 0.2, u_prob: 0.7 }] },
        ];
        let mut buf = Vec::new();
        for r in &recs {
            write_record(&mut buf, r).unwrap();
        }
        let p = read_stream(&buf[..], 2, 2).unwrap();
        assert_eq!(p.position(1, 0), [2.0, 3.0]);
        assert!(p.is_visible(1, 0));
        assert_eq!(p.position(0, 1), [4.5, 1.0]);
        assert!(!p.is_visible(0, 1));
        assert!(!p.is_visible(0, 0));
    }

    #[test]
    fn stream_rejects_bad_ids_and_frames() {
        assert!(read_stream(&b"{\"t\":5,\"points\":[]}\n"[..], 1, 2).is_err());
        assert!(read_stream(&b"{\"t\":0,\"points\":[{\"id\":3,\"x\":0,\"y\":0,\"visible\":true,\"v_prob\":1,\"u_prob\":0}]}\n"[..], 1, 2).is_err());
        assert!(read_stream(&b"not json\n"[..], 1, 2).is_err());
    }
}
