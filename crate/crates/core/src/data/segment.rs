//! Cutting spectrograms into fixed-length training sequences.

use serde::{Deserialize, Serialize};

/// A contiguous run of frames from one source item.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    /// Index of the source item.
    pub item: usize,
    /// First frame within the source item.
    pub start: usize,
    pub frames: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub segments: usize,
    /// Items shorter than one segment.
    pub skipped_items: usize,
    /// Trailing frames that did not fill a segment.
    pub dropped_frames: usize,
}

/// Non-overlapping `len`-frame segments of every item, in item order.
/// Segments never straddle two items.
pub fn segment_sequences(items: &[Vec<Vec<f64>>], len: usize) -> (Vec<Segment>, SegmentReport) {
    let mut out = Vec::new();
    let mut report = SegmentReport::default();
    if len == 0 {
        return (out, report);
    }
    for (item, frames) in items.iter().enumerate() {
        let n = frames.len() / len;
        if n == 0 {
            report.skipped_items += 1;
            report.dropped_frames += frames.len();
            continue;
        }
        for s in 0..n {
            out.push(Segment {
                item,
                start: s * len,
                frames: frames[s * len..(s + 1) * len].to_vec(),
            });
        }
        report.dropped_frames += frames.len() - n * len;
    }
    report.segments = out.len();
    (out, report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn item(n: usize, tag: f64) -> Vec<Vec<f64>> {
        (0..n).map(|t| vec![tag, t as f64]).collect()
    }

    #[test]
    fn segment_counts() {
        for (n, expected, dropped) in [(150, 1, 0), (299, 1, 149), (450, 3, 0), (149, 0, 149)] {
            let (segs, rep) = segment_sequences(&[item(n, 0.0)], 150);
            assert_eq!(segs.len(), expected);
            assert_eq!(rep.dropped_frames, dropped);
        }
    }

    #[test]
    fn segments_stay_within_items() {
        let (segs, rep) = segment_sequences(&[item(5, 1.0), item(2, 2.0), item(7, 3.0)], 3);
        assert_eq!(rep.skipped_items, 1);
        assert_eq!(segs.len(), 3);
        for s in &segs {
            let tag = s.frames[0][0];
            assert!(s.frames.iter().all(|f| f[0] == tag));
            assert_eq!(s.frames[0][1], s.start as f64);
        }
    }
}
