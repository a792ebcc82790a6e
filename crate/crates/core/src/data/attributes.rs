//! Race / gender / age labels and their 18-class index.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use log::warn;
use serde::Deserialize;

use crate::error::{Error, Result};

macro_rules! attribute_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name {
            $($variant,)+
            /// Value missing or not recognised.
            Unknown,
        }

        impl $name {
            pub const KNOWN: &'static [$name] = &[$($name::$variant),+];

            pub fn parse(s: &str) -> Self {
                let s = s.trim();
                $(if s.eq_ignore_ascii_case($text) {
                    return $name::$variant;
                })+
                $name::Unknown
            }

            pub fn label(&self) -> &'static str {
                match self {
                    $($name::$variant => $text,)+
                    $name::Unknown => "unknown",
                }
            }

            fn index(&self) -> Option<usize> {
                Self::KNOWN.iter().position(|v| v == self)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.label())
            }
        }
    };
}

attribute_enum!(Race { Caucasian => "caucasian", Asian => "asian", Black => "black" });
attribute_enum!(Gender { Man => "man", Woman => "woman" });
attribute_enum!(Age { Child => "child", Youth => "youth", Senior => "senior" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Attributes {
    pub race: Race,
    pub gender: Gender,
    pub age: Age,
}

impl Attributes {
    /// `race·6 + gender·3 + age`, or `None` when any field is unknown.
    pub fn class_index(&self) -> Option<usize> {
        Some(self.race.index()? * 6 + self.gender.index()? * 3 + self.age.index()?)
    }
}

#[derive(Deserialize)]
struct Row {
    id: String,
    race: String,
    gender: String,
    age: String,
}

/// Parses `id,race,gender,age`. Unrecognised values are logged and kept as
/// `Unknown`.
pub fn load_attributes(path: &Path) -> Result<HashMap<String, Attributes>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::InvalidArgument(format!("{}: {other:?}", path.display())),
        })?;
    let mut out = HashMap::new();
    for row in reader.deserialize() {
        let row: Row = row?;
        let a = Attributes {
            race: Race::parse(&row.race),
            gender: Gender::parse(&row.gender),
            age: Age::parse(&row.age),
        };
        if a.class_index().is_none() {
            warn!(
                "unrecognised attribute value for `{}` ({}, {}, {}); bucketed as unknown",
                row.id, row.race, row.gender, row.age
            );
        }
        out.insert(row.id, a);
    }
    Ok(out)
}
