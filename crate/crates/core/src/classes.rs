use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const NUM_CLASSES: usize = 8;

/// One of the eight retinal OCT categories.
///
/// Discriminants are the canonical (alphabetical) class indices; a trained
/// model's output column `i` always means `ClassLabel::from_index(i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ClassLabel {
    Amd = 0,
    Cnv = 1,
    Csr = 2,
    Dme = 3,
    Dr = 4,
    Drusen = 5,
    Mh = 6,
    Normal = 7,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [
        ClassLabel::Amd,
        ClassLabel::Cnv,
        ClassLabel::Csr,
        ClassLabel::Dme,
        ClassLabel::Dr,
        ClassLabel::Drusen,
        ClassLabel::Mh,
        ClassLabel::Normal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<ClassLabel> {
        Self::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassLabel::Amd => "AMD",
            ClassLabel::Cnv => "CNV",
            ClassLabel::Csr => "CSR",
            ClassLabel::Dme => "DME",
            ClassLabel::Dr => "DR",
            ClassLabel::Drusen => "DRUSEN",
            ClassLabel::Mh => "MH",
            ClassLabel::Normal => "NORMAL",
        }
    }

    /// Case-insensitive lookup. "DSR" is accepted as an alias of CSR since
    /// some published reports use that spelling for the same category.
    pub fn from_name(name: &str) -> Option<ClassLabel> {
        let upper = name.trim().to_ascii_uppercase();
        if upper == "DSR" {
            return Some(ClassLabel::Csr);
        }
        Self::ALL.iter().copied().find(|c| c.name() == upper)
    }

    pub fn one_hot(self) -> [f32; NUM_CLASSES] {
        let mut row = [0.0; NUM_CLASSES];
        row[self.index()] = 1.0;
        row
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassLabel {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClassLabel::from_name(s).ok_or_else(|| crate::Error::ParseError(format!("unknown class {s:?}")))
    }
}

pub fn canonical_names() -> Vec<&'static str> {
    ClassLabel::ALL.iter().map(|c| c.name()).collect()
}
