//! Phoneme inventory and 15-attribute multi-hot phonological descriptors.
//!
//! Attributes span three dimensions: voicing (one bit, "voiceless" is the
//! bit unset), manner of articulation and place of articulation. Every
//! attribute implicates a subset of the four articulator channels, which is
//! what the bounding-box priors are keyed on.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

pub const NUM_ATTRIBUTES: usize = 15;
pub const NUM_ARTICULATORS: usize = 4;
pub const SILENCE: &str = "sil";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Articulator {
    Tongue = 0,
    Velum = 1,
    UpperLip = 2,
    LowerLip = 3,
}

impl Articulator {
    pub const ALL: [Articulator; NUM_ARTICULATORS] =
        [Articulator::Tongue, Articulator::Velum, Articulator::UpperLip, Articulator::LowerLip];

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Domain(format!("articulator channel {i} out of range 0..3")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Articulator::Tongue => "tongue",
            Articulator::Velum => "velum",
            Articulator::UpperLip => "upper_lip",
            Articulator::LowerLip => "lower_lip",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Dimension {
    Voicing,
    Manner,
    Place,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PhonAttribute(usize);

const ATTRIBUTES: [(&str, Dimension); NUM_ATTRIBUTES] = [
    ("voiced", Dimension::Voicing),
    ("stop", Dimension::Manner),
    ("fricative", Dimension::Manner),
    ("affricate", Dimension::Manner),
    ("nasal", Dimension::Manner),
    ("approximant", Dimension::Manner),
    ("vowel", Dimension::Manner),
    ("labial", Dimension::Place),
    ("labiodental", Dimension::Place),
    ("dental", Dimension::Place),
    ("alveolar", Dimension::Place),
    ("postalveolar", Dimension::Place),
    ("palatal", Dimension::Place),
    ("velar", Dimension::Place),
    ("glottal", Dimension::Place),
];

impl PhonAttribute {
    pub fn all() -> impl Iterator<Item = PhonAttribute> {
        (0..NUM_ATTRIBUTES).map(PhonAttribute)
    }

    pub fn from_index(i: usize) -> Result<Self> {
        if i < NUM_ATTRIBUTES {
            Ok(Self(i))
        } else {
            Err(Error::Domain(format!("attribute index {i} out of range")))
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        ATTRIBUTES.iter().position(|(n, _)| *n == name).map(Self)
    }

    pub fn index(self) -> usize {
        self.0
    }

    pub fn name(self) -> &'static str {
        ATTRIBUTES[self.0].0
    }

    pub fn dimension(self) -> Dimension {
        ATTRIBUTES[self.0].1
    }
}

impl fmt::Display for PhonAttribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Multi-hot descriptor; all-zero is reserved for silence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct PhonologicalVector {
    bits: [bool; NUM_ATTRIBUTES],
}

impl PhonologicalVector {
    pub fn silence() -> Self {
        Self::default()
    }

    pub fn from_bits(bits: [bool; NUM_ATTRIBUTES]) -> Self {
        Self { bits }
    }

    pub fn from_names(names: &[&str]) -> Result<Self> {
        let mut bits = [false; NUM_ATTRIBUTES];
        for n in names {
            let a = PhonAttribute::by_name(n)
                .ok_or_else(|| Error::Domain(format!("unknown attribute `{n}`")))?;
            bits[a.index()] = true;
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[bool; NUM_ATTRIBUTES] {
        &self.bits
    }

    pub fn has(&self, a: PhonAttribute) -> bool {
        self.bits[a.index()]
    }

    pub fn set(&mut self, a: PhonAttribute) {
        self.bits[a.index()] = true;
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_silence(&self) -> bool {
        self.popcount() == 0
    }

    pub fn attributes(&self) -> impl Iterator<Item = PhonAttribute> + '_ {
        PhonAttribute::all().filter(|a| self.has(*a))
    }

    /// 0/1 values in attribute order.
    pub fn as_f64(&self) -> [f64; NUM_ATTRIBUTES] {
        self.bits.map(|b| if b { 1.0 } else { 0.0 })
    }
}

/// Articulator channels implicated by each attribute.
pub fn default_articulator_map() -> BTreeMap<PhonAttribute, Vec<Articulator>> {
    use Articulator::*;
    let table: [(&str, &[Articulator]); NUM_ATTRIBUTES] = [
        ("voiced", &[]),
        ("stop", &[Velum]),
        ("fricative", &[Velum]),
        ("affricate", &[Velum, Tongue]),
        ("nasal", &[Velum]),
        ("approximant", &[Tongue]),
        ("vowel", &[Tongue]),
        ("labial", &[UpperLip, LowerLip]),
        ("labiodental", &[LowerLip]),
        ("dental", &[Tongue]),
        ("alveolar", &[Tongue]),
        ("postalveolar", &[Tongue]),
        ("palatal", &[Tongue]),
        ("velar", &[Tongue]),
        ("glottal", &[Tongue]),
    ];
    table
        .iter()
        .map(|(n, arts)| (PhonAttribute::by_name(n).expect("known attribute"), arts.to_vec()))
        .collect()
}

/// Shipped inventory: label followed by the 15 bits in attribute order.
pub const DEFAULT_INVENTORY: &str = "\
# label voiced stop fricative affricate nasal approximant vowel labial labiodental dental alveolar postalveolar palatal velar glottal
p  0 1 0 0 0 0 0 1 0 0 0 0 0 0 0
b  1 1 0 0 0 0 0 1 0 0 0 0 0 0 0
m  1 0 0 0 1 0 0 1 0 0 0 0 0 0 0
f  0 0 1 0 0 0 0 0 1 0 0 0 0 0 0
v  1 0 1 0 0 0 0 0 1 0 0 0 0 0 0
th 0 0 1 0 0 0 0 0 0 1 0 0 0 0 0
dh 1 0 1 0 0 0 0 0 0 1 0 0 0 0 0
t  0 1 0 0 0 0 0 0 0 0 1 0 0 0 0
d  1 1 0 0 0 0 0 0 0 0 1 0 0 0 0
n  1 0 0 0 1 0 0 0 0 0 1 0 0 0 0
s  0 0 1 0 0 0 0 0 0 0 1 0 0 0 0
z  1 0 1 0 0 0 0 0 0 0 1 0 0 0 0
l  1 0 0 0 0 1 0 0 0 0 1 0 0 0 0
sh 0 0 1 0 0 0 0 0 0 0 0 1 0 0 0
zh 1 0 1 0 0 0 0 0 0 0 0 1 0 0 0
ch 0 0 0 1 0 0 0 0 0 0 0 1 0 0 0
jh 1 0 0 1 0 0 0 0 0 0 0 1 0 0 0
r  1 0 0 0 0 1 0 0 0 0 0 1 0 0 0
y  1 0 0 0 0 1 0 0 0 0 0 0 1 0 0
k  0 1 0 0 0 0 0 0 0 0 0 0 0 1 0
g  1 1 0 0 0 0 0 0 0 0 0 0 0 1 0
ng 1 0 0 0 1 0 0 0 0 0 0 0 0 1 0
w  1 0 0 0 0 1 0 1 0 0 0 0 0 1 0
hh 0 0 1 0 0 0 0 0 0 0 0 0 0 0 1
iy 1 0 0 0 0 0 1 0 0 0 0 0 1 0 0
ih 1 0 0 0 0 0 1 0 0 0 0 0 1 0 0
eh 1 0 0 0 0 0 1 0 0 0 0 0 1 0 0
ae 1 0 0 0 0 0 1 0 0 0 0 0 0 0 1
aa 1 0 0 0 0 0 1 0 0 0 0 0 0 0 1
ah 1 0 0 0 0 0 1 0 0 0 0 0 0 0 1
ao 1 0 0 0 0 0 1 1 0 0 0 0 0 1 0
uh 1 0 0 0 0 0 1 0 0 0 0 0 0 1 0
uw 1 0 0 0 0 0 1 1 0 0 0 0 0 1 0
er 1 0 0 0 0 0 1 0 0 0 0 1 0 0 0
";

#[derive(Clone, Debug)]
pub struct PhonemeInventory {
    entries: BTreeMap<String, PhonologicalVector>,
    articulator_map: BTreeMap<PhonAttribute, Vec<Articulator>>,
}

impl Default for PhonemeInventory {
    fn default() -> Self {
        Self::parse(DEFAULT_INVENTORY).expect("shipped inventory parses")
    }
}

impl PhonemeInventory {
    /// Parses the plain-text table (`label b0 .. b14` per line, `#` comments).
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let label = parts.next().expect("non-empty line");
            if label == SILENCE {
                return Err(Error::Domain(format!("line {}: `{SILENCE}` is reserved", lineno + 1)));
            }
            let mut bits = [false; NUM_ATTRIBUTES];
            let mut n = 0;
            for tok in parts {
                if n >= NUM_ATTRIBUTES {
                    return Err(Error::Domain(format!("line {}: too many bits", lineno + 1)));
                }
                bits[n] = match tok {
                    "0" => false,
                    "1" => true,
                    other => {
                        return Err(Error::Domain(format!("line {}: bad bit `{other}`", lineno + 1)))
                    }
                };
                n += 1;
            }
            if n != NUM_ATTRIBUTES {
                return Err(Error::Domain(format!("line {}: expected 15 bits, got {n}", lineno + 1)));
            }
            let v = PhonologicalVector::from_bits(bits);
            let has = |d| v.attributes().any(|a| a.dimension() == d);
            if !has(Dimension::Manner) || !has(Dimension::Place) {
                return Err(Error::Domain(format!(
                    "phoneme `{label}` needs at least one manner and one place bit"
                )));
            }
            entries.insert(label.to_string(), v);
        }
        Ok(Self { entries, articulator_map: default_articulator_map() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# label");
        for a in PhonAttribute::all() {
            s.push(' ');
            s.push_str(a.name());
        }
        s.push('\n');
        for (label, v) in &self.entries {
            s.push_str(label);
            for b in v.bits() {
                s.push_str(if *b { " 1" } else { " 0" });
            }
            s.push('\n');
        }
        s
    }

    pub fn encode_phoneme(&self, label: &str) -> Result<PhonologicalVector> {
        if label == SILENCE {
            return Ok(PhonologicalVector::silence());
        }
        self.entries.get(label).copied().ok_or_else(|| Error::UnknownPhoneme(label.to_string()))
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn contains(&self, label: &str) -> bool {
        label == SILENCE || self.entries.contains_key(label)
    }

    pub fn articulators_for(&self, a: PhonAttribute) -> &[Articulator] {
        self.articulator_map.get(&a).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn attributes_for_channel(&self, channel: usize) -> Result<Vec<PhonAttribute>> {
        let art = Articulator::from_index(channel)?;
        Ok(PhonAttribute::all().filter(|a| self.articulators_for(*a).contains(&art)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &PhonologicalVector) -> Vec<&'static str> {
        v.attributes().map(PhonAttribute::name).collect()
    }

    #[test]
    fn attribute_dimensions_partition() {
        let count = |d| PhonAttribute::all().filter(|a| a.dimension() == d).count();
        assert_eq!(count(Dimension::Voicing), 1);
        assert_eq!(count(Dimension::Manner), 6);
        assert_eq!(count(Dimension::Place), 8);
        let mut idx: Vec<_> = PhonAttribute::all().map(PhonAttribute::index).collect();
        idx.sort();
        assert_eq!(idx, (0..15).collect::<Vec<_>>());
    }

    #[test]
    fn p_is_voiceless_stop_labial() {
        let inv = PhonemeInventory::default();
        assert_eq!(names(&inv.encode_phoneme("p").unwrap()), vec!["stop", "labial"]);
    }

    #[test]
    fn m_is_voiced_nasal_labial() {
        let inv = PhonemeInventory::default();
        assert_eq!(names(&inv.encode_phoneme("m").unwrap()), vec!["voiced", "nasal", "labial"]);
    }

    #[test]
    fn silence_is_all_zero_and_unknown_errors() {
        let inv = PhonemeInventory::default();
        assert!(inv.encode_phoneme(SILENCE).unwrap().is_silence());
        match inv.encode_phoneme("qq") {
            Err(Error::UnknownPhoneme(l)) => assert_eq!(l, "qq"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn every_phoneme_has_manner_and_place() {
        let inv = PhonemeInventory::default();
        for l in inv.labels() {
            assert!(inv.encode_phoneme(l).unwrap().popcount() >= 2, "{l}");
        }
    }

    #[test]
    fn channel_lookups() {
        let inv = PhonemeInventory::default();
        let lower = inv.attributes_for_channel(Articulator::LowerLip.index()).unwrap();
        assert!(lower.contains(&PhonAttribute::by_name("labial").unwrap()));
        let velum = inv.attributes_for_channel(Articulator::Velum.index()).unwrap();
        assert!(velum.contains(&PhonAttribute::by_name("nasal").unwrap()));
        let tongue = inv.attributes_for_channel(Articulator::Tongue.index()).unwrap();
        for n in ["dental", "alveolar", "palatal", "velar"] {
            assert!(tongue.contains(&PhonAttribute::by_name(n).unwrap()), "{n}");
        }
        assert!(inv.attributes_for_channel(4).is_err());
    }

    #[test]
    fn articulator_map_round_trips() {
        let inv = PhonemeInventory::default();
        for c in 0..NUM_ARTICULATORS {
            let art = Articulator::from_index(c).unwrap();
            let attrs = inv.attributes_for_channel(c).unwrap();
            for a in PhonAttribute::all() {
                assert_eq!(attrs.contains(&a), inv.articulators_for(a).contains(&art));
            }
        }
        for a in PhonAttribute::all() {
            if a.dimension() != Dimension::Voicing {
                assert!(!inv.articulators_for(a).is_empty(), "{a}");
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let inv = PhonemeInventory::default();
        let back = PhonemeInventory::parse(&inv.to_text()).unwrap();
        for l in inv.labels() {
            assert_eq!(inv.encode_phoneme(l).unwrap(), back.encode_phoneme(l).unwrap());
        }
    }

    #[test]
    fn parse_rejects_bad_rows() {
        assert!(PhonemeInventory::parse("x 1 0").is_err());
        assert!(PhonemeInventory::parse("x 1 0 0 0 0 0 0 0 0 0 0 0 0 0 0").is_err());
        assert!(PhonemeInventory::parse("sil 0 1 0 0 0 0 0 1 0 0 0 0 0 0 0").is_err());
    }
}
