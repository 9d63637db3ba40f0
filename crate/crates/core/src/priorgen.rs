//! Phonology-conditioned bounding-box priors.
//!
//! For every subject, the masks of all training frames whose phoneme carries
//! a given attribute are unioned per articulator and enclosed by their
//! minimum bounding rectangle. At render time the boxes of all set
//! attributes relevant to a channel are unioned and re-boxed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::dataio::SegSample;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::phonology::{
    Articulator, PhonAttribute, PhonemeInventory, PhonologicalVector, NUM_ARTICULATORS,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub row_min: usize,
    pub row_max: usize,
    pub col_min: usize,
    pub col_max: usize,
}

impl BBox {
    pub fn new(row_min: usize, row_max: usize, col_min: usize, col_max: usize) -> Self {
        debug_assert!(row_min <= row_max && col_min <= col_max);
        Self { row_min, row_max, col_min, col_max }
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row_min..=self.row_max).contains(&r) && (self.col_min..=self.col_max).contains(&c)
    }

    pub fn enclose(&self, other: &BBox) -> BBox {
        BBox {
            row_min: self.row_min.min(other.row_min),
            row_max: self.row_max.max(other.row_max),
            col_min: self.col_min.min(other.col_min),
            col_max: self.col_max.max(other.col_max),
        }
    }

    pub fn area(&self) -> usize {
        (self.row_max - self.row_min + 1) * (self.col_max - self.col_min + 1)
    }

    pub fn indicator(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |r, c| self.contains(r, c))
    }

    fn fits(&self, height: usize, width: usize) -> bool {
        self.row_max < height && self.col_max < width
    }
}

/// Minimum bounding rectangle of the pixel-wise union; `None` when empty.
pub fn bbox_of_union(masks: &[&BinaryMask]) -> Result<Option<BBox>> {
    let Some(first) = masks.first() else { return Ok(None) };
    let (h, w) = first.shape();
    for m in masks {
        first.check_same_shape(m)?;
    }
    // occupancy projections onto rows and columns
    let mut row_hit = vec![false; h];
    let mut col_hit = vec![false; w];
    for m in masks {
        for (i, &b) in m.data().iter().enumerate() {
            if b {
                row_hit[i / w] = true;
                col_hit[i % w] = true;
            }
        }
    }
    let span = |v: &[bool]| {
        let lo = v.iter().position(|&b| b)?;
        let hi = v.iter().rposition(|&b| b)?;
        Some((lo, hi))
    };
    Ok(match (span(&row_hit), span(&col_hit)) {
        (Some((r0, r1)), Some((c0, c1))) => Some(BBox::new(r0, r1, c0, c1)),
        _ => None,
    })
}

/// Four binary channels in articulator order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PriorMap {
    channels: [BinaryMask; NUM_ARTICULATORS],
}

impl PriorMap {
    pub fn new(channels: [BinaryMask; NUM_ARTICULATORS]) -> Result<Self> {
        for c in &channels[1..] {
            channels[0].check_same_shape(c)?;
        }
        Ok(Self { channels })
    }

    pub fn channel(&self, a: Articulator) -> &BinaryMask {
        &self.channels[a.index()]
    }

    pub fn channels(&self) -> &[BinaryMask; NUM_ARTICULATORS] {
        &self.channels
    }

    pub fn shape(&self) -> (usize, usize) {
        self.channels[0].shape()
    }

    pub fn is_neutral(&self) -> bool {
        self.channels.iter().all(|c| c.count() == c.height() * c.width())
    }

    /// `[4, H*W]` tensor of 0/1 values.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w) = self.shape();
        let mut data = Vec::with_capacity(NUM_ARTICULATORS * h * w);
        for c in &self.channels {
            data.extend(c.data().iter().map(|&b| if b { T::one() } else { T::zero() }));
        }
        Tensor::from_vec(&[NUM_ARTICULATORS, h * w], data).expect("prior tensor")
    }
}

/// Whole-frame boxes: the prior used when phonology is unavailable.
pub fn neutral_prior(height: usize, width: usize) -> PriorMap {
    PriorMap { channels: std::array::from_fn(|_| BinaryMask::full(height, width)) }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubjectPriorTable {
    pub subject: String,
    pub height: usize,
    pub width: usize,
    boxes: BTreeMap<(PhonAttribute, Articulator), BBox>,
}

impl SubjectPriorTable {
    pub fn empty(subject: impl Into<String>, height: usize, width: usize) -> Self {
        Self { subject: subject.into(), height, width, boxes: BTreeMap::new() }
    }

    pub fn get(&self, a: PhonAttribute, art: Articulator) -> Option<&BBox> {
        self.boxes.get(&(a, art))
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (PhonAttribute, Articulator, &BBox)> {
        self.boxes.iter().map(|((a, c), b)| (*a, *c, b))
    }

    pub fn insert(&mut self, a: PhonAttribute, art: Articulator, b: BBox) -> Result<()> {
        if !b.fits(self.height, self.width) {
            return Err(Error::Shape(format!(
                "box {b:?} outside {}x{} frame",
                self.height, self.width
            )));
        }
        self.boxes.insert((a, art), b);
        Ok(())
    }

    /// Plain-text rows: `subject attribute channel row_min row_max col_min col_max`.
    pub fn write_text(&self, out: &mut String) {
        for ((a, c), b) in &self.boxes {
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {}",
                self.subject,
                a.name(),
                c.name(),
                b.row_min,
                b.row_max,
                b.col_min,
                b.col_max
            );
        }
    }
}

/// Serialises tables with a geometry header.
pub fn tables_to_text(tables: &[SubjectPriorTable]) -> String {
    let mut s = String::new();
    if let Some(t) = tables.first() {
        let _ = writeln!(s, "# geometry {} {}", t.height, t.width);
    }
    s.push_str("# subject attribute channel row_min row_max col_min col_max\n");
    for t in tables {
        // empty tables still need a marker so the subject round-trips
        if t.is_empty() {
            let _ = writeln!(s, "# subject {}", t.subject);
        }
        t.write_text(&mut s);
    }
    s
}

pub fn tables_from_text(text: &str, path: &Path) -> Result<Vec<SubjectPriorTable>> {
    let perr = |detail: String| Error::Parse { path: path.to_path_buf(), detail };
    let mut geometry = None;
    let mut tables: Vec<SubjectPriorTable> = Vec::new();
    let table_for = |subject: &str, geometry: (usize, usize), tables: &mut Vec<SubjectPriorTable>| {
        if let Some(i) = tables.iter().position(|t| t.subject == subject) {
            i
        } else {
            tables.push(SubjectPriorTable::empty(subject, geometry.0, geometry.1));
            tables.len() - 1
        }
    };
    for line in text.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.is_empty() {
            continue;
        }
        if parts[0] == "#" {
            match parts.get(1) {
                Some(&"geometry") if parts.len() == 4 => {
                    let h = parts[2].parse().map_err(|_| perr(line.to_string()))?;
                    let w = parts[3].parse().map_err(|_| perr(line.to_string()))?;
                    geometry = Some((h, w));
                }
                Some(&"subject") if parts.len() == 3 => {
                    let g = geometry.ok_or_else(|| perr("missing geometry header".into()))?;
                    table_for(parts[2], g, &mut tables);
                }
                _ => {}
            }
            continue;
        }
        if parts.len() != 7 {
            return Err(perr(format!("expected 7 fields: `{line}`")));
        }
        let g = geometry.ok_or_else(|| perr("missing geometry header".into()))?;
        let attr = PhonAttribute::by_name(parts[1])
            .ok_or_else(|| perr(format!("unknown attribute `{}`", parts[1])))?;
        let art = Articulator::ALL
            .into_iter()
            .find(|a| a.name() == parts[2])
            .ok_or_else(|| perr(format!("unknown channel `{}`", parts[2])))?;
        let nums: Vec<usize> = parts[3..]
            .iter()
            .map(|p| p.parse().map_err(|_| perr(format!("bad coordinate `{p}`"))))
            .collect::<Result<_>>()?;
        let i = table_for(parts[0], g, &mut tables);
        tables[i].insert(attr, art, BBox::new(nums[0], nums[1], nums[2], nums[3]))?;
    }
    Ok(tables)
}

/// Builds the per-(attribute, articulator) boxes for one subject.
pub fn build_prior_table(
    samples: &[&SegSample],
    inventory: &PhonemeInventory,
) -> Result<SubjectPriorTable> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Domain("cannot build a prior table from zero samples".into()))?;
    let subject = first.subject_id.clone();
    let (h, w) = first.masks[0].shape();
    if let Some(bad) = samples.iter().find(|s| s.subject_id != subject) {
        return Err(Error::Domain(format!(
            "prior table for `{subject}` received a frame of `{}`",
            bad.subject_id
        )));
    }
    let phons: Vec<PhonologicalVector> = samples
        .iter()
        .map(|s| inventory.encode_phoneme(&s.phoneme))
        .collect::<Result<_>>()?;

    let mut table = SubjectPriorTable::empty(subject, h, w);
    for art in Articulator::ALL {
        for attr in inventory.attributes_for_channel(art.index())? {
            let masks: Vec<&BinaryMask> = samples
                .iter()
                .zip(&phons)
                .filter(|(_, p)| p.has(attr))
                .map(|(s, _)| &s.masks[art.index()])
                .collect();
            if let Some(b) = bbox_of_union(&masks)? {
                table.insert(attr, art, b)?;
            }
        }
    }
    Ok(table)
}

/// Renders the four-channel prior for a phonological descriptor.
pub fn render_prior(
    phon: &PhonologicalVector,
    table: &SubjectPriorTable,
    inventory: &PhonemeInventory,
    height: usize,
    width: usize,
) -> Result<PriorMap> {
    if (table.height, table.width) != (height, width) {
        return Err(Error::Shape(format!(
            "prior table geometry {}x{} does not match {height}x{width}",
            table.height, table.width
        )));
    }
    let channels = Articulator::ALL.map(|art| {
        let enclosing = phon
            .attributes()
            .filter(|a| inventory.articulators_for(*a).contains(&art))
            .filter_map(|a| table.get(a, art))
            .copied()
            .reduce(|acc, b| acc.enclose(&b));
        match enclosing {
            Some(b) => b.indicator(height, width),
            None => BinaryMask::full(height, width),
        }
    });
    PriorMap::new(channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::SegSample;

    fn sample(subject: &str, phoneme: &str, lower_lip: BinaryMask) -> SegSample {
        let (h, w) = lower_lip.shape();
        SegSample {
            image: Tensor::zeros(&[h, w]),
            audio: Vec::new(),
            phoneme: phoneme.into(),
            masks: [
                BinaryMask::empty(h, w),
                BinaryMask::empty(h, w),
                BinaryMask::empty(h, w),
                lower_lip,
            ],
            subject_id: subject.into(),
            task_id: "t0".into(),
            frame_index: 0,
        }
    }

    fn rows_mask(r0: usize, r1: usize, c: usize) -> BinaryMask {
        BinaryMask::from_fn(32, 32, |r, cc| (r0..=r1).contains(&r) && cc == c)
    }

    #[test]
    fn single_pixel_box() {
        let m = BinaryMask::from_pixels(8, 8, &[(3, 5)]);
        assert_eq!(bbox_of_union(&[&m]).unwrap(), Some(BBox::new(3, 3, 5, 5)));
    }

    #[test]
    fn two_pixel_union() {
        let a = BinaryMask::from_pixels(8, 8, &[(1, 1)]);
        let b = BinaryMask::from_pixels(8, 8, &[(4, 6)]);
        assert_eq!(bbox_of_union(&[&a, &b]).unwrap(), Some(BBox::new(1, 4, 1, 6)));
    }

    #[test]
    fn empty_and_mismatched() {
        let a = BinaryMask::empty(4, 4);
        assert_eq!(bbox_of_union(&[&a, &a]).unwrap(), None);
        assert_eq!(bbox_of_union(&[]).unwrap(), None);
        let b = BinaryMask::empty(4, 5);
        assert!(matches!(bbox_of_union(&[&a, &b]), Err(Error::Shape(_))));
    }

    #[test]
    fn table_single_frame() {
        let inv = PhonemeInventory::default();
        let s = sample("s0", "p", BinaryMask::from_pixels(32, 32, &[(10, 12)]));
        let t = build_prior_table(&[&s], &inv).unwrap();
        let labial = PhonAttribute::by_name("labial").unwrap();
        assert_eq!(t.get(labial, Articulator::LowerLip), Some(&BBox::new(10, 10, 12, 12)));
    }

    #[test]
    fn table_two_labial_frames_and_render() {
        let inv = PhonemeInventory::default();
        let a = sample("s0", "p", rows_mask(10, 11, 5));
        let b = sample("s0", "b", rows_mask(12, 14, 7));
        let t = build_prior_table(&[&a, &b], &inv).unwrap();
        let labial = PhonAttribute::by_name("labial").unwrap();
        assert_eq!(t.get(labial, Articulator::LowerLip), Some(&BBox::new(10, 14, 5, 7)));

        let p = inv.encode_phoneme("p").unwrap();
        let prior = render_prior(&p, &t, &inv, 32, 32).unwrap();
        assert_eq!(prior.channel(Articulator::LowerLip), &BBox::new(10, 14, 5, 7).indicator(32, 32));
        // /p/ has no lingual attribute, tongue stays neutral
        assert_eq!(prior.channel(Articulator::Tongue).count(), 32 * 32);
    }

    #[test]
    fn silence_only_gives_empty_table() {
        let inv = PhonemeInventory::default();
        let s = sample("s0", "sil", rows_mask(3, 4, 2));
        assert!(build_prior_table(&[&s], &inv).unwrap().is_empty());
    }

    #[test]
    fn empty_samples_and_mixed_subjects_error() {
        let inv = PhonemeInventory::default();
        assert!(matches!(build_prior_table(&[], &inv), Err(Error::Domain(_))));
        let a = sample("s0", "p", rows_mask(1, 2, 3));
        let b = sample("s1", "p", rows_mask(1, 2, 3));
        assert!(build_prior_table(&[&a, &b], &inv).is_err());
    }

    #[test]
    fn neutral_cases() {
        let inv = PhonemeInventory::default();
        let n = neutral_prior(8, 8);
        for c in n.channels() {
            assert_eq!(c.count(), 64);
        }
        let empty = SubjectPriorTable::empty("s", 8, 8);
        let p = inv.encode_phoneme("t").unwrap();
        assert_eq!(render_prior(&p, &empty, &inv, 8, 8).unwrap(), n);
        let sil = PhonologicalVector::silence();
        let s = sample("s0", "m", rows_mask(1, 2, 3));
        let t = build_prior_table(&[&s], &inv).unwrap();
        assert!(render_prior(&sil, &t, &inv, 32, 32).unwrap().is_neutral());
        assert!(render_prior(&p, &t, &inv, 16, 16).is_err());
    }

    #[test]
    fn text_round_trip() {
        let inv = PhonemeInventory::default();
        let a = sample("s0", "m", rows_mask(10, 11, 5));
        let t = build_prior_table(&[&a], &inv).unwrap();
        let e = SubjectPriorTable::empty("s9", 32, 32);
        let text = tables_to_text(&[t.clone(), e.clone()]);
        let back = tables_from_text(&text, Path::new("x")).unwrap();
        assert_eq!(back, vec![t, e]);
    }
}
