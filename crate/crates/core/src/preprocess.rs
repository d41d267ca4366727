//! Input/target standardization transforms, each independently switchable.

use crate::codec::Record;
use crate::error::{Error, Result};

pub const SLOT_PREFIX: &str = "slots: ";
pub const SLOT_SEPARATOR: &str = " | ";

pub fn lowercase_transform(text: &str) -> String {
    text.chars().flat_map(char::to_lowercase).collect()
}

/// Delete every comma directly preceded by a digit. The check looks at the
/// output so far, which makes the transform idempotent: "1,,2" becomes "12"
/// in one pass instead of "1,2" then "12".
pub fn strip_numeric_commas(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        if c == ',' && out.chars().next_back().is_some_and(|p| p.is_ascii_digit()) {
            continue;
        }
        out.push(c);
    }
    out
}

pub fn prepend_slots(keys: &[&str], text: &str) -> Result<String> {
    if keys.is_empty() {
        return Err(Error::Invalid("slot prefix needs at least one key".into()));
    }
    Ok(format!("{SLOT_PREFIX}{}\n{text}", keys.join(SLOT_SEPARATOR)))
}

/// Which transforms to apply.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Toggles {
    pub lowercase: bool,
    pub strip_commas: bool,
    pub slot_prefix: bool,
}

impl Toggles {
    /// Source-side pipeline: case and commas first, then the slot prefix so
    /// slot names are kept verbatim.
    pub fn source(&self, text: &str, slots: &[&str]) -> Result<String> {
        let mut t = self.text(text);
        if self.slot_prefix {
            t = prepend_slots(slots, &t)?;
        }
        Ok(t)
    }

    pub fn text(&self, text: &str) -> String {
        let mut t = text.to_string();
        if self.lowercase {
            t = lowercase_transform(&t);
        }
        if self.strip_commas {
            t = strip_numeric_commas(&t);
        }
        t
    }

    /// Target-side transforms act on record values, never on the commas
    /// the output grammar itself emits.
    pub fn target(&self, r: &Record) -> Result<Record> {
        r.map_values(|v| self.text(v))
    }
}
