//! Byte-string keys and half-open key ranges.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// An opaque byte-string key.
///
/// Serialized as plain text when the bytes are printable ASCII, otherwise as
/// `0x`-prefixed hex.
#[derive(Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key(pub Vec<u8>);

impl Key {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    fn printable(&self) -> bool {
        !self.0.starts_with(b"0x") && self.0.iter().all(|b| b.is_ascii_graphic() && *b != b':' && *b != b',')
    }
}

impl From<&str> for Key {
    fn from(s: &str) -> Self {
        Key(s.as_bytes().to_vec())
    }
}

impl From<String> for Key {
    fn from(s: String) -> Self {
        Key(s.into_bytes())
    }
}

impl From<&[u8]> for Key {
    fn from(b: &[u8]) -> Self {
        Key(b.to_vec())
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.printable() {
            f.write_str(std::str::from_utf8(&self.0).expect("ascii"))
        } else {
            f.write_str("0x")?;
            for b in &self.0 {
                write!(f, "{b:02x}")?;
            }
            Ok(())
        }
    }
}

impl fmt::Debug for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.to_string())
    }
}

impl FromStr for Key {
    type Err = RangeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(hex) = s.strip_prefix("0x") {
            if hex.len() % 2 != 0 {
                return Err(RangeError::BadKey(s.to_string()));
            }
            let bytes = (0..hex.len())
                .step_by(2)
                .map(|i| u8::from_str_radix(&hex[i..i + 2], 16))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| RangeError::BadKey(s.to_string()))?;
            Ok(Key(bytes))
        } else {
            Ok(Key(s.as_bytes().to_vec()))
        }
    }
}

impl Serialize for Key {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Key {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RangeError {
    #[error("bad key {0:?}")]
    BadKey(String),
    #[error("bad range {0:?}; expected start:end")]
    BadRange(String),
    #[error("empty interval [{0}, {1})")]
    Empty(String, String),
}

/// `[start, end)`; `end = None` is unbounded.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interval {
    pub start: Key,
    pub end: Option<Key>,
}

impl Interval {
    pub fn new(start: impl Into<Key>, end: Option<Key>) -> Self {
        Interval { start: start.into(), end }
    }

    pub fn contains(&self, key: &Key) -> bool {
        *key >= self.start && self.end.as_ref().is_none_or(|e| key < e)
    }

    fn is_empty(&self) -> bool {
        self.end.as_ref().is_some_and(|e| *e <= self.start)
    }

    fn intersects(&self, other: &Interval) -> bool {
        let starts_before_other_ends = other.end.as_ref().is_none_or(|e| self.start < *e);
        let other_starts_before_end = self.end.as_ref().is_none_or(|e| other.start < *e);
        starts_before_other_ends && other_starts_before_end
    }
}

/// A normalized set of disjoint, non-adjacent intervals.
#[derive(Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct KeyRange {
    intervals: Vec<Interval>,
}

impl KeyRange {
    pub fn empty() -> Self {
        KeyRange { intervals: Vec::new() }
    }

    /// Every key.
    pub fn full() -> Self {
        KeyRange::from_intervals(vec![Interval::new("", None)])
    }

    pub fn interval(start: &str, end: Option<&str>) -> Self {
        KeyRange::from_intervals(vec![Interval::new(start, end.map(Key::from))])
    }

    pub fn from_intervals(intervals: Vec<Interval>) -> Self {
        let mut ivs: Vec<Interval> = intervals.into_iter().filter(|i| !i.is_empty()).collect();
        ivs.sort();
        let mut out: Vec<Interval> = Vec::with_capacity(ivs.len());
        for iv in ivs {
            if let Some(last) = out.last_mut() {
                let touches = last.end.as_ref().is_none_or(|e| iv.start <= *e);
                if touches {
                    last.end = match (&last.end, &iv.end) {
                        (None, _) | (_, None) => None,
                        (Some(a), Some(b)) => Some(a.clone().max(b.clone())),
                    };
                    continue;
                }
            }
            out.push(iv);
        }
        KeyRange { intervals: out }
    }

    pub fn intervals(&self) -> &[Interval] {
        &self.intervals
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn contains(&self, key: &Key) -> bool {
        self.intervals.iter().any(|i| i.contains(key))
    }

    pub fn union(&self, other: &KeyRange) -> KeyRange {
        KeyRange::from_intervals(self.intervals.iter().chain(&other.intervals).cloned().collect())
    }

    pub fn intersects(&self, other: &KeyRange) -> bool {
        self.intervals.iter().any(|a| other.intervals.iter().any(|b| a.intersects(b)))
    }

    pub fn intersection(&self, other: &KeyRange) -> KeyRange {
        let mut out = Vec::new();
        for a in &self.intervals {
            for b in &other.intervals {
                let start = a.start.clone().max(b.start.clone());
                let end = match (&a.end, &b.end) {
                    (None, e) | (e, None) => e.clone(),
                    (Some(x), Some(y)) => Some(x.clone().min(y.clone())),
                };
                out.push(Interval { start, end });
            }
        }
        KeyRange::from_intervals(out)
    }

    /// Whether `other` lies entirely inside this range.
    pub fn covers(&self, other: &KeyRange) -> bool {
        self.union(other) == *self
    }
}

impl fmt::Display for KeyRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.intervals.is_empty() {
            return f.write_str("-");
        }
        for (i, iv) in self.intervals.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}:", iv.start)?;
            if let Some(e) = &iv.end {
                write!(f, "{e}")?;
            }
        }
        Ok(())
    }
}

impl fmt::Debug for KeyRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{self}]")
    }
}

impl FromStr for KeyRange {
    type Err = RangeError;

    /// `start:end[,start:end...]`; an empty end is unbounded, `-` is empty.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "-" {
            return Ok(KeyRange::empty());
        }
        let mut ivs = Vec::new();
        for part in s.split(',') {
            let (start, end) = part.split_once(':').ok_or_else(|| RangeError::BadRange(s.to_string()))?;
            let start: Key = start.parse()?;
            let end = if end.is_empty() { None } else { Some(end.parse::<Key>()?) };
            if let Some(e) = &end {
                if *e <= start {
                    return Err(RangeError::Empty(start.to_string(), e.to_string()));
                }
            }
            ivs.push(Interval { start, end });
        }
        Ok(KeyRange::from_intervals(ivs))
    }
}

impl From<KeyRange> for String {
    fn from(r: KeyRange) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for KeyRange {
    type Error = RangeError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(s: &str) -> KeyRange {
        s.parse().unwrap()
    }

    #[test]
    fn adjacent_ranges_coalesce() {
        assert_eq!(r("a:m").union(&r("m:z")), r("a:z"));
        assert_eq!(r("a:c,x:").union(&r("c:x")), r("a:"));
        assert_eq!(r("a:c").union(&r("x:z")).intervals().len(), 2);
    }

    #[test]
    fn containment_is_half_open() {
        let range = r("a:m");
        assert!(range.contains(&Key::from("a")));
        assert!(range.contains(&Key::from("lzzz")));
        assert!(!range.contains(&Key::from("m")));
        assert!(KeyRange::full().contains(&Key::from("")));
    }

    #[test]
    fn intersection_checks() {
        assert!(!r("a:m").intersects(&r("m:z")));
        assert!(r("a:n").intersects(&r("m:z")));
        assert!(r(":").intersects(&r("q:r")));
        assert!(r("a:z").covers(&r("b:c,d:e")));
        assert!(!r("a:m").covers(&r("l:n")));
    }

    #[test]
    fn text_roundtrip_with_binary_keys() {
        let k = Key(vec![0, 255, b'a']);
        assert_eq!(k.to_string(), "0x00ff61");
        assert_eq!("0x00ff61".parse::<Key>().unwrap(), k);
        let range = r("0x00:0x10,k:");
        assert_eq!(range.to_string().parse::<KeyRange>().unwrap(), range);
        let json = serde_json::to_string(&range).unwrap();
        assert_eq!(serde_json::from_str::<KeyRange>(&json).unwrap(), range);
        assert!("z:a".parse::<KeyRange>().is_err());
    }
}
