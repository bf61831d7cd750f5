//! Attention mask compilation and its independent per-pair oracle.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layout::{IntraRule, SegmentKind, SegmentLayout};
use super::PackError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskToggles {
    /// Supervision captions cannot see the conditioning prompt.
    pub mask_condition_prompt: bool,
    pub metaquery_order: IntraRule,
    /// Supervision blocks (caption, metaqueries) may see the clean source image.
    pub sup_blocks_see_source: bool,
}

impl Default for MaskToggles {
    fn default() -> Self {
        MaskToggles {
            mask_condition_prompt: true,
            metaquery_order: IntraRule::Causal,
            sup_blocks_see_source: false,
        }
    }
}

impl MaskToggles {
    /// All 8 toggle combinations.
    pub fn all() -> Vec<MaskToggles> {
        let mut out = Vec::with_capacity(8);
        for mask_condition_prompt in [true, false] {
            for metaquery_order in [IntraRule::Causal, IntraRule::Bidirectional] {
                for sup_blocks_see_source in [false, true] {
                    out.push(MaskToggles { mask_condition_prompt, metaquery_order, sup_blocks_see_source });
                }
            }
        }
        out
    }
}

/// Dense boolean mask, row = query, column = key; `true` = may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    n: usize,
    bits: Vec<bool>,
}

impl AttnMask {
    pub fn new_false(n: usize) -> Self {
        AttnMask { n, bits: vec![false; n * n] }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, q: usize, k: usize) -> bool {
        self.bits[q * self.n + k]
    }

    #[inline]
    pub fn set(&mut self, q: usize, k: usize, v: bool) {
        self.bits[q * self.n + k] = v;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.n..(q + 1) * self.n]
    }

    pub fn row_count(&self, q: usize) -> usize {
        self.row(q).iter().filter(|&&b| b).count()
    }

    /// Top-left `m x m` submatrix.
    pub fn leading(&self, m: usize) -> AttnMask {
        let mut out = AttnMask::new_false(m);
        for q in 0..m {
            for k in 0..m {
                out.set(q, k, self.get(q, k));
            }
        }
        out
    }

    /// Run-length encoded rows: `T` = may attend, `F` = blocked.
    pub fn to_rle(&self, layout: &SegmentLayout) -> String {
        let kinds = layout.position_kinds();
        let mut s = format!("# attention mask n={} (row=query, T=attend, F=blocked)\n", self.n);
        for q in 0..self.n {
            s.push_str(&format!("{q:4} {:<11}", kinds.get(q).map_or("?", |k| k.name())));
            let row = self.row(q);
            let mut i = 0;
            while i < row.len() {
                let v = row[i];
                let mut j = i;
                while j < row.len() && row[j] == v {
                    j += 1;
                }
                s.push_str(&format!(" {}{}", if v { 'T' } else { 'F' }, j - i));
                i = j;
            }
            s.push('\n');
        }
        s
    }

    /// Grayscale PNG, white = may attend, black = blocked; `scale` pixels per cell.
    pub fn write_png(&self, path: &Path, scale: usize) -> Result<(), PackError> {
        let side = self.n * scale;
        let mut data = vec![0u8; side * side];
        for y in 0..side {
            for x in 0..side {
                if self.get(y / scale, x / scale) {
                    data[y * side + x] = 255;
                }
            }
        }
        crate::io::write_png_gray(path, side as u32, side as u32, &data).map_err(PackError::Io)
    }

    pub fn dump(&self, layout: &SegmentLayout, text_path: &Path, png_path: &Path) -> Result<(), PackError> {
        let mut f = std::fs::File::create(text_path).map_err(|e| PackError::Io(e.to_string()))?;
        f.write_all(self.to_rle(layout).as_bytes()).map_err(|e| PackError::Io(e.to_string()))?;
        self.write_png(png_path, 8)
    }
}

/// Whether a query segment of kind `q` may attend a *different* segment of kind `k`.
fn cross_rule(q: SegmentKind, k: SegmentKind, toggles: &MaskToggles) -> bool {
    use SegmentKind::*;
    match q {
        CondText => false,
        UndImage => k == CondText,
        GenImage => matches!(k, CondText | UndImage),
        SupCaption => match k {
            GenImage => true,
            CondText => !toggles.mask_condition_prompt,
            UndImage => toggles.sup_blocks_see_source,
            SupCaption | Metaquery => false,
        },
        Metaquery => match k {
            GenImage => true,
            UndImage => toggles.sup_blocks_see_source,
            CondText | SupCaption | Metaquery => false,
        },
    }
}

/// Compiles the packed-sequence attention mask block by block.
///
/// Within a segment the intra rule applies (metaquery order comes from the
/// toggles); across segments [`cross_rule`] decides whole blocks.
pub fn build_mask(layout: &SegmentLayout, toggles: &MaskToggles) -> AttnMask {
    let n = layout.total_len();
    let mut mask = AttnMask::new_false(n);
    for (qi, qs) in layout.segments().iter().enumerate() {
        for (ki, ks) in layout.segments().iter().enumerate() {
            if qi == ki {
                let rule = if qs.kind == SegmentKind::Metaquery { toggles.metaquery_order } else { qs.intra };
                for a in 0..qs.len {
                    let upto = match rule {
                        IntraRule::Causal => a + 1,
                        IntraRule::Bidirectional => qs.len,
                    };
                    for b in 0..upto {
                        mask.set(qs.start + a, qs.start + b, true);
                    }
                }
            } else if cross_rule(qs.kind, ks.kind, toggles) {
                for q in qs.range() {
                    for k in ks.range() {
                        mask.set(q, k, true);
                    }
                }
            }
        }
    }
    mask
}

/// Reference mask: evaluates the rule set independently for every (query, key) pair.
pub fn mask_oracle(layout: &SegmentLayout, toggles: &MaskToggles) -> AttnMask {
    let segs = layout.segments();
    let n = layout.total_len();
    let locate = |p: usize| -> usize {
        let mut idx = 0;
        while !(segs[idx].start <= p && p < segs[idx].start + segs[idx].len) {
            idx += 1;
        }
        idx
    };
    let mut mask = AttnMask::new_false(n);
    for q in 0..n {
        let qi = locate(q);
        for k in 0..n {
            let ki = locate(k);
            let (qk, kk) = (segs[qi].kind, segs[ki].kind);
            let allowed = if qi == ki {
                let causal = if qk == SegmentKind::Metaquery {
                    toggles.metaquery_order == IntraRule::Causal
                } else {
                    matches!(qk, SegmentKind::CondText | SegmentKind::SupCaption)
                };
                !causal || k <= q
            } else {
                // (a) prompt sees only itself
                let a = false;
                // (b) source image sees the prompt
                let b = kk == SegmentKind::CondText;
                // (c) generation tokens see prompt and source image
                let c = kk == SegmentKind::CondText || kk == SegmentKind::UndImage;
                // (d) supervision caption sees generation tokens, prompt only if unmasked
                let d = kk == SegmentKind::GenImage
                    || (kk == SegmentKind::CondText && !toggles.mask_condition_prompt)
                    || (kk == SegmentKind::UndImage && toggles.sup_blocks_see_source);
                // (e) metaqueries see generation tokens
                let e = kk == SegmentKind::GenImage || (kk == SegmentKind::UndImage && toggles.sup_blocks_see_source);
                match qk {
                    SegmentKind::CondText => a,
                    SegmentKind::UndImage => b,
                    SegmentKind::GenImage => c,
                    SegmentKind::SupCaption => d,
                    SegmentKind::Metaquery => e,
                }
            };
            mask.set(q, k, allowed);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use SegmentKind::*;

    fn layout(parts: &[(SegmentKind, usize)], order: IntraRule) -> SegmentLayout {
        SegmentLayout::from_lengths(parts, order, 0.5).unwrap()
    }

    #[test]
    fn t2i_example_counts() {
        let t = MaskToggles::default();
        let l = layout(&[(CondText, 2), (GenImage, 4), (SupCaption, 3), (Metaquery, 2)], t.metaquery_order);
        let m = build_mask(&l, &t);
        for q in 6..9 {
            assert!(!m.get(q, 0) && !m.get(q, 1));
        }
        assert_eq!(m.row_count(7), 6);

        let open = MaskToggles { mask_condition_prompt: false, ..t };
        let m2 = build_mask(&l, &open);
        for q in 6..9 {
            assert_eq!(m2.row_count(q), m.row_count(q) + 2);
        }

        let bi = MaskToggles { metaquery_order: IntraRule::Bidirectional, ..t };
        let m3 = build_mask(&l, &bi);
        let inner = (9..11).flat_map(|q| (9..11).map(move |k| (q, k))).filter(|&(q, k)| m3.get(q, k)).count();
        assert_eq!(inner, 4);
    }

    #[test]
    fn single_segment_shapes() {
        let t = MaskToggles::default();
        let causal = mask_oracle(&layout(&[(SupCaption, 5)], t.metaquery_order), &t);
        let bidir = mask_oracle(&layout(&[(GenImage, 5)], t.metaquery_order), &t);
        for q in 0..5 {
            for k in 0..5 {
                assert_eq!(causal.get(q, k), k <= q);
                assert!(bidir.get(q, k));
            }
        }
    }

    #[test]
    fn rle_format() {
        let t = MaskToggles::default();
        let l = layout(&[(CondText, 2), (GenImage, 2)], t.metaquery_order);
        let rle = build_mask(&l, &t).to_rle(&l);
        let lines: Vec<&str> = rle.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].ends_with("T1 F3"));
        assert!(lines[3].ends_with("T4"));
    }
}
