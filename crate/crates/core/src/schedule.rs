//! Per-layer transition points.
//!
//! A schedule is a short pattern of positions that repeats across layers:
//! layer `i` switches from attention to the SSM at `pattern[i % pattern.len()]`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Result};

/// Sequence length the named V1–V9 patterns are written for.
pub const REFERENCE_LEN: usize = 8192;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransPointSchedule {
    pub name: String,
    pub pattern: Vec<usize>,
    /// Sequence length the positions refer to.
    pub seq_len: usize,
}

impl TransPointSchedule {
    pub fn new(name: impl Into<String>, pattern: Vec<usize>, seq_len: usize) -> Result<Self> {
        if pattern.is_empty() {
            return Err(invalid("schedule pattern is empty"));
        }
        if let Some(&p) = pattern.iter().find(|&&p| p > seq_len) {
            return Err(invalid(format!("transition point {p} outside [0, {seq_len}]")));
        }
        Ok(TransPointSchedule {
            name: name.into(),
            pattern,
            seq_len,
        })
    }

    /// Every layer uses the same point.
    pub fn uniform(name: impl Into<String>, p: usize, seq_len: usize) -> Result<Self> {
        Self::new(name, vec![p], seq_len)
    }

    /// Per-layer list; its length must equal the layer count.
    pub fn per_layer(name: impl Into<String>, points: Vec<usize>, seq_len: usize) -> Result<Self> {
        Self::new(name, points, seq_len)
    }

    pub fn cycle(&self) -> usize {
        self.pattern.len()
    }

    pub fn at(&self, layer: usize) -> usize {
        self.pattern[layer % self.pattern.len()]
    }

    pub fn resolve(&self, n_layers: usize) -> Vec<usize> {
        (0..n_layers).map(|i| self.at(i)).collect()
    }
}

/// Families of schedules; positions are absolute for the target length.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScheduleKind {
    /// One point for every layer (V1–V3).
    LayerShared(usize),
    /// Several distinct points concentrated within a quarter of the sequence (V4–V6).
    LayerSpecific(Vec<usize>),
    /// Points spanning at least half of the sequence (V7–V8).
    BroadRange(Vec<usize>),
    /// The logarithmic eight-layer cycle (V9), scaled to the target length.
    FineGrainedV9,
    Custom(Vec<usize>),
}

const V9: [usize; 8] = [0, 128, 256, 512, 1024, 2048, 4096, 8192];

/// Maps a position written for [`REFERENCE_LEN`] onto `seq_len`, rounding to
/// the nearest integer with the endpoints pinned.
pub fn scale_position(p: usize, seq_len: usize) -> usize {
    if p == 0 {
        0
    } else if p >= REFERENCE_LEN {
        seq_len
    } else {
        let v = libm::round(p as f64 * seq_len as f64 / REFERENCE_LEN as f64) as usize;
        v.min(seq_len)
    }
}

fn span(points: &[usize]) -> usize {
    let lo = points.iter().min().copied().unwrap_or(0);
    let hi = points.iter().max().copied().unwrap_or(0);
    hi - lo
}

fn distinct(points: &[usize]) -> usize {
    let mut v = points.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

pub fn make_schedule(kind: ScheduleKind, seq_len: usize) -> Result<TransPointSchedule> {
    match kind {
        ScheduleKind::LayerShared(p) => TransPointSchedule::uniform(format!("layer_shared[{p}]"), p, seq_len),
        ScheduleKind::LayerSpecific(points) => {
            // One position of slack absorbs rounding when reference points are scaled.
            if distinct(&points) < 2 || span(&points).saturating_sub(1) * 4 > seq_len {
                return Err(invalid(
                    "layer-specific schedules need >= 2 distinct points within a quarter of the sequence",
                ));
            }
            TransPointSchedule::new("layer_specific", points, seq_len)
        }
        ScheduleKind::BroadRange(points) => {
            if (span(&points) + 1) * 2 < seq_len {
                return Err(invalid("broad-range schedules must span at least half the sequence"));
            }
            TransPointSchedule::new("broad_range", points, seq_len)
        }
        ScheduleKind::FineGrainedV9 => TransPointSchedule::new(
            "v9",
            V9.iter().map(|&p| scale_position(p, seq_len)).collect(),
            seq_len,
        ),
        ScheduleKind::Custom(points) => TransPointSchedule::new("custom", points, seq_len),
    }
}

/// The named patterns V1–V9 (defined at length 8192) plus the single-mechanism
/// and hybrid inference shapes, scaled to `seq_len`.
pub fn preset(name: &str, seq_len: usize) -> Result<TransPointSchedule> {
    let key = name.to_ascii_lowercase();
    let scaled = |ps: &[usize]| -> Vec<usize> { ps.iter().map(|&p| scale_position(p, seq_len)).collect() };
    let mut s = match key.as_str() {
        "v1" => make_schedule(ScheduleKind::LayerShared(scale_position(2048, seq_len)), seq_len)?,
        "v2" => make_schedule(ScheduleKind::LayerShared(scale_position(4096, seq_len)), seq_len)?,
        "v3" => make_schedule(ScheduleKind::LayerShared(scale_position(6144, seq_len)), seq_len)?,
        "v4" => make_schedule(ScheduleKind::LayerSpecific(scaled(&[3072, 4096, 5120])), seq_len)?,
        "v5" => make_schedule(ScheduleKind::LayerSpecific(scaled(&[2048, 3072, 4096])), seq_len)?,
        "v6" => make_schedule(ScheduleKind::LayerSpecific(scaled(&[512, 1024, 2048])), seq_len)?,
        "v7" => make_schedule(ScheduleKind::BroadRange(scaled(&[2048, 4096, 6144])), seq_len)?,
        "v8" => make_schedule(ScheduleKind::BroadRange(scaled(&[0, 1024, 2048, 6144, 8192])), seq_len)?,
        "v9" => make_schedule(ScheduleKind::FineGrainedV9, seq_len)?,
        "all-transformer" | "all-t" | "transformer" => TransPointSchedule::uniform("", seq_len, seq_len)?,
        "all-mamba" | "all-0" | "mamba" => TransPointSchedule::uniform("", 0, seq_len)?,
        "hybrid" => TransPointSchedule::new("", vec![0, seq_len], seq_len)?,
        _ => return Err(invalid(format!("unknown schedule {name}"))),
    };
    s.name = key.to_string();
    Ok(s)
}

/// Names accepted by [`preset`] for the nine reference schedules.
pub const NAMED: [&str; 9] = ["v1", "v2", "v3", "v4", "v5", "v6", "v7", "v8", "v9"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_patterns_at_reference_length() {
        let t = REFERENCE_LEN;
        assert_eq!(make_schedule(ScheduleKind::LayerShared(4096), t).unwrap().pattern, vec![4096]);
        assert_eq!(preset("v2", t).unwrap().pattern, vec![4096]);
        assert_eq!(preset("v8", t).unwrap().pattern, vec![0, 1024, 2048, 6144, 8192]);
        assert_eq!(preset("v9", t).unwrap().pattern, V9.to_vec());
        assert_eq!(preset("v9", t).unwrap().cycle(), 8);
    }

    #[test]
    fn v9_scales_to_desk_length() {
        assert_eq!(
            preset("v9", 512).unwrap().pattern,
            vec![0, 8, 16, 32, 64, 128, 256, 512]
        );
    }

    #[test]
    fn resolve_cycles() {
        let s = preset("v4", REFERENCE_LEN).unwrap();
        assert_eq!(s.resolve(6), vec![3072, 4096, 5120, 3072, 4096, 5120]);
    }

    #[test]
    fn rejects_out_of_range_and_family_violations() {
        assert!(TransPointSchedule::new("x", vec![9000], 8192).is_err());
        assert!(make_schedule(ScheduleKind::LayerSpecific(vec![0, 8192]), 8192).is_err());
        assert!(make_schedule(ScheduleKind::BroadRange(vec![4000, 4100]), 8192).is_err());
        assert!(preset("v10", 512).is_err());
    }

    #[test]
    fn all_named_presets_valid_at_small_lengths() {
        for t in [16, 32, 64, 512] {
            for name in NAMED {
                let s = preset(name, t).unwrap();
                assert!(s.pattern.iter().all(|&p| p <= t), "{name} at {t}");
            }
        }
    }
}
