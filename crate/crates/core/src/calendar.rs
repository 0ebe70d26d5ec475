//! Calendar months.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const MONTH_ABBREV: [&str; 12] = [
    "Jan", "Feb", "Mar", "Apr", "May", "Jun", "Jul", "Aug", "Sep", "Oct", "Nov", "Dec",
];

/// A calendar month, ordered chronologically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct YearMonth {
    year: i32,
    month: u8,
}

impl YearMonth {
    pub fn new(year: i32, month: u32) -> Result<Self> {
        if !(1..=12).contains(&month) {
            return Err(Error::Input(format!("month {month} out of range 1..=12")));
        }
        Ok(Self {
            year,
            month: month as u8,
        })
    }

    pub fn year(self) -> i32 {
        self.year
    }

    /// Calendar month, 1 = January.
    pub fn month(self) -> u32 {
        self.month as u32
    }

    /// Zero-based month index, 0 = January.
    pub fn month_index(self) -> usize {
        self.month as usize - 1
    }

    fn ordinal(self) -> i64 {
        self.year as i64 * 12 + self.month as i64 - 1
    }

    fn from_ordinal(ord: i64) -> Self {
        Self {
            year: ord.div_euclid(12) as i32,
            month: (ord.rem_euclid(12) + 1) as u8,
        }
    }

    pub fn add_months(self, k: i64) -> Self {
        Self::from_ordinal(self.ordinal() + k)
    }

    pub fn succ(self) -> Self {
        self.add_months(1)
    }

    /// Number of days in the month (Gregorian calendar).
    pub fn days(self) -> u32 {
        match self.month {
            4 | 6 | 9 | 11 => 30,
            2 if self.year % 4 == 0 && (self.year % 100 != 0 || self.year % 400 == 0) => 29,
            2 => 28,
            _ => 31,
        }
    }

    /// Months from `earlier` to `self` (negative if `self` precedes `earlier`).
    pub fn months_since(self, earlier: YearMonth) -> i64 {
        self.ordinal() - earlier.ordinal()
    }

    /// Consecutive months from `start` to `end`, both inclusive.
    pub fn range_inclusive(start: YearMonth, end: YearMonth) -> Vec<YearMonth> {
        let n = end.months_since(start);
        (0..=n.max(-1)).map(|k| start.add_months(k)).collect()
    }
}

impl fmt::Display for YearMonth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-{:02}", self.year, self.month)
    }
}

impl FromStr for YearMonth {
    type Err = Error;

    /// Parses `YYYY-MM`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (y, m) = s
            .split_once('-')
            .ok_or_else(|| Error::Input(format!("expected YYYY-MM, got {s:?}")))?;
        let year = y
            .parse::<i32>()
            .map_err(|_| Error::Input(format!("bad year in {s:?}")))?;
        let month = m
            .parse::<u32>()
            .map_err(|_| Error::Input(format!("bad month in {s:?}")))?;
        if y.len() != 4 || m.len() != 2 {
            return Err(Error::Input(format!("expected YYYY-MM, got {s:?}")));
        }
        YearMonth::new(year, month)
    }
}

impl Serialize for YearMonth {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for YearMonth {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Checks that `dates` is nonempty and runs over consecutive calendar months.
pub fn check_consecutive(dates: &[YearMonth]) -> Result<()> {
    if dates.is_empty() {
        return Err(Error::Input("empty date index".into()));
    }
    for (i, w) in dates.windows(2).enumerate() {
        if w[1] != w[0].succ() {
            return Err(Error::Input(format!(
                "dates not consecutive months at position {}: {} followed by {}",
                i + 1,
                w[0],
                w[1]
            )));
        }
    }
    Ok(())
}
