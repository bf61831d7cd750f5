use serde::{Deserialize, Serialize};

use super::PackError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    CondText,
    UndImage,
    GenImage,
    SupCaption,
    Metaquery,
}

impl SegmentKind {
    pub const ALL: [SegmentKind; 5] = [
        SegmentKind::CondText,
        SegmentKind::UndImage,
        SegmentKind::GenImage,
        SegmentKind::SupCaption,
        SegmentKind::Metaquery,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            SegmentKind::CondText => "cond_text",
            SegmentKind::UndImage => "und_image",
            SegmentKind::GenImage => "gen_image",
            SegmentKind::SupCaption => "sup_caption",
            SegmentKind::Metaquery => "metaquery",
        }
    }

    pub fn parse(name: &str) -> Result<Self, PackError> {
        SegmentKind::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| PackError::Layout(format!("unknown segment kind `{name}`")))
    }

    /// Intra-segment rule fixed by the kind; metaquery order is a toggle.
    pub fn default_intra(self) -> IntraRule {
        match self {
            SegmentKind::CondText | SegmentKind::SupCaption | SegmentKind::Metaquery => IntraRule::Causal,
            SegmentKind::UndImage | SegmentKind::GenImage => IntraRule::Bidirectional,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntraRule {
    Causal,
    Bidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
    pub intra: IntraRule,
}

impl Segment {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }
}

/// Contiguous, non-overlapping segments covering `0..total_len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentLayout {
    segments: Vec<Segment>,
    pub t: f64,
}

impl SegmentLayout {
    /// Builds a layout from (kind, length) pairs using each kind's default intra rule,
    /// with metaquery segments following `metaquery_order`. Zero-length parts are skipped.
    pub fn from_lengths(
        parts: &[(SegmentKind, usize)],
        metaquery_order: IntraRule,
        t: f64,
    ) -> Result<Self, PackError> {
        let mut start = 0;
        let mut segments = Vec::with_capacity(parts.len());
        for &(kind, len) in parts.iter().filter(|(_, len)| *len > 0) {
            let intra = if kind == SegmentKind::Metaquery { metaquery_order } else { kind.default_intra() };
            segments.push(Segment { kind, start, len, intra });
            start += len;
        }
        Self::new(segments, t)
    }

    pub fn new(segments: Vec<Segment>, t: f64) -> Result<Self, PackError> {
        let mut pos = 0;
        for s in &segments {
            if s.start != pos {
                return Err(PackError::Layout(format!(
                    "segment {} starts at {} but previous ended at {pos}",
                    s.kind.name(),
                    s.start
                )));
            }
            if s.len == 0 {
                return Err(PackError::Layout(format!("empty {} segment", s.kind.name())));
            }
            if s.kind != SegmentKind::Metaquery && s.intra != s.kind.default_intra() {
                return Err(PackError::Layout(format!("{} segment has the wrong intra rule", s.kind.name())));
            }
            pos = s.end();
        }
        let has_gen = segments.iter().any(|s| s.kind == SegmentKind::GenImage);
        if has_gen && !(0.0..=1.0).contains(&t) {
            return Err(PackError::Layout(format!("timestep {t} outside [0,1]")));
        }
        Ok(SegmentLayout { segments, t })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn total_len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.end())
    }

    pub fn find(&self, kind: SegmentKind) -> Option<&Segment> {
        self.segments.iter().find(|s| s.kind == kind)
    }

    /// Segment index of each position.
    pub fn position_segments(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_len());
        for (i, s) in self.segments.iter().enumerate() {
            out.extend(std::iter::repeat_n(i, s.len));
        }
        out
    }

    /// Kind of each position.
    pub fn position_kinds(&self) -> Vec<SegmentKind> {
        self.segments.iter().flat_map(|s| std::iter::repeat_n(s.kind, s.len)).collect()
    }

    /// Segment-local index of each position.
    pub fn local_positions(&self) -> Vec<usize> {
        self.segments.iter().flat_map(|s| 0..s.len).collect()
    }

    /// Random layout for fuzzing: a random non-empty subset of kinds, each at
    /// most once, in random order, with lengths in `1..=max_len`.
    pub fn fuzz(seed_value: u64, max_len: usize) -> Self {
        use rand::seq::SliceRandom;
        use rand::Rng;
        let mut rng = crate::seed::rng_for(seed_value, "layout-fuzz");
        let mut kinds = SegmentKind::ALL.to_vec();
        kinds.shuffle(&mut rng);
        let count = rng.random_range(1..=kinds.len());
        let parts: Vec<(SegmentKind, usize)> =
            kinds[..count].iter().map(|&k| (k, rng.random_range(1..=max_len.max(1)))).collect();
        let order = if rng.random_bool(0.5) { IntraRule::Causal } else { IntraRule::Bidirectional };
        let t = rng.random_range(0.0..1.0);
        Self::from_lengths(&parts, order, t).expect("fuzzed parts are valid")
    }
}
