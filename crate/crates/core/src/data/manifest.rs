use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::{self, Visitor};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::roi::BoundingBox;

pub const VOCABULARY: [&str; 7] = [
    "loss-of-interface",
    "vascular-invasion",
    "biliary-invasion",
    "extramural-mass",
    "intramural-cyst",
    "intramural-foci",
    "mural-stratification",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Class {
    Normal = 0,
    Benign = 1,
    Malignant = 2,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Normal, Class::Benign, Class::Malignant];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Class::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Normal => "normal",
            Class::Benign => "benign",
            Class::Malignant => "malignant",
        }
    }

    pub fn from_name(s: &str) -> Option<Class> {
        Class::ALL.into_iter().find(|c| c.name() == s)
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Class {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(self.index() as u64)
    }
}

impl<'de> Deserialize<'de> for Class {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct ClassVisitor;

        impl Visitor<'_> for ClassVisitor {
            type Value = Class;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a class index 0..=2 or one of normal, benign, malignant")
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Class, E> {
                Class::from_index(v as usize).ok_or_else(|| E::custom(format!("invalid class {v}")))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Class, E> {
                if v < 0 {
                    return Err(E::custom(format!("invalid class {v}")));
                }
                self.visit_u64(v as u64)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Class, E> {
                Class::from_name(v).ok_or_else(|| E::custom(format!("invalid class {v:?}")))
            }
        }

        d.deserialize_any(ClassVisitor)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub path: PathBuf,
    pub patient_id: String,
    pub label: Class,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "box_array")]
    pub roi: Option<BoundingBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicons: Option<Vec<usize>>,
    /// Class assigned by the annotating radiologist, when it was recorded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radiologist_label: Option<Class>,
}

mod box_array {
    use super::BoundingBox;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &Option<BoundingBox>, s: S) -> Result<S::Ok, S::Error> {
        b.map(|b| b.as_array()).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<BoundingBox>, D::Error> {
        let raw: Option<[u64; 4]> = Option::deserialize(d)?;
        Ok(raw.map(|[x_min, y_min, x_max, y_max]| BoundingBox {
            x_min: x_min as usize,
            y_min: y_min as usize,
            x_max: x_max as usize,
            y_max: y_max as usize,
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageBounds {
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub samples: Vec<Sample>,
    pub vocabulary: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_bounds: Option<ImageBounds>,
    /// Directory that relative sample paths resolve against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn new(samples: Vec<Sample>, vocabulary: Vec<String>) -> Self {
        Manifest { samples, vocabulary, image_bounds: None, root: PathBuf::new() }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::File { path: path.to_path_buf(), msg: e.to_string() })?;
        let mut m = Manifest::parse(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate(true)?;
        Ok(m)
    }

    /// Parses and validates everything except file existence.
    pub fn parse(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let samples = raw.get("samples").and_then(|s| s.as_array()).ok_or_else(|| Error::data("manifest has no samples array"))?;
        for (index, rec) in samples.iter().enumerate() {
            serde_json::from_value::<Sample>(rec.clone()).map_err(|e| Error::Record { index, msg: e.to_string() })?;
        }
        let m: Manifest = serde_json::from_value(raw)?;
        m.validate(false)?;
        Ok(m)
    }

    pub fn validate(&self, check_files: bool) -> Result<()> {
        let mut names = BTreeSet::new();
        for v in &self.vocabulary {
            if !names.insert(v) {
                return Err(Error::data(format!("duplicate vocabulary entry {v:?}")));
            }
        }
        for (index, s) in self.samples.iter().enumerate() {
            let fail = |msg: String| Error::Record { index, msg };
            if s.patient_id.is_empty() {
                return Err(fail("patient_id is empty".into()));
            }
            if let Some(b) = s.roi {
                if b.x_max < b.x_min {
                    return Err(fail(format!("roi: x_max {} < x_min {}", b.x_max, b.x_min)));
                }
                if b.y_max < b.y_min {
                    return Err(fail(format!("roi: y_max {} < y_min {}", b.y_max, b.y_min)));
                }
            }
            if let Some(lex) = &s.lexicons {
                if let Some(bad) = lex.iter().find(|&&l| l >= self.vocabulary.len()) {
                    return Err(fail(format!("lexicons: id {bad} outside vocabulary of {}", self.vocabulary.len())));
                }
            }
            if check_files {
                let p = self.resolve(&s.path);
                if !p.is_file() {
                    return Err(fail(format!("path: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Canonical JSON: pretty-printed, fixed field order, trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn patients(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.samples.iter().map(|s| s.patient_id.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    /// Samples with a non-empty lexicon set whose radiologist label (when
    /// recorded) agrees with the ground truth.
    pub fn lexicon_subset(&self) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.lexicons.as_ref().is_some_and(|l| !l.is_empty()))
            .filter(|(_, s)| s.radiologist_label.is_none_or(|r| r == s.label))
            .map(|(i, _)| i)
            .collect()
    }
}
