//! Inflected surface forms per object label.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

/// Ordered surface forms per label; form 0 is the base (singular) form.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MorphTable {
    forms: BTreeMap<String, Vec<String>>,
}

impl MorphTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `forms` for `label`, dropping repeats while keeping order.
    pub fn insert(&mut self, label: &str, forms: Vec<String>) {
        let mut unique: Vec<String> = Vec::new();
        for f in forms {
            if !unique.contains(&f) {
                unique.push(f);
            }
        }
        if unique.is_empty() {
            unique.push(label.to_string());
        }
        self.forms.insert(label.to_string(), unique);
    }

    pub fn forms(&self, label: &str) -> Option<&[String]> {
        self.forms.get(label).map(Vec::as_slice)
    }

    /// Forms of `label`, falling back to the label itself when unregistered.
    pub fn forms_or_base(&self, label: &str) -> Vec<String> {
        self.forms(label).map_or_else(|| vec![label.to_string()], <[String]>::to_vec)
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.forms.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.forms.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn all_forms(&self) -> impl Iterator<Item = &str> {
        self.forms.values().flatten().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }

    /// Index of `surface` among the forms of `label`.
    pub fn form_index(&self, label: &str, surface: &str) -> Option<usize> {
        self.forms(label)?.iter().position(|f| f == surface)
    }

    /// True when any form of `label` occurs in `tokens` as a contiguous
    /// span (multi-word forms span several tokens).
    pub fn mentions(&self, label: &str, tokens: &[String]) -> bool {
        self.forms_or_base(label).iter().any(|f| {
            let parts: Vec<&str> = f.split_whitespace().collect();
            !parts.is_empty() && tokens.windows(parts.len()).any(|w| w.iter().zip(&parts).all(|(a, b)| a == b))
        })
    }

    /// Reverse lookup: surface form to every (label, form index) carrying it.
    pub fn surface_index(&self) -> HashMap<&str, Vec<(&str, usize)>> {
        let mut out: HashMap<&str, Vec<(&str, usize)>> = HashMap::new();
        for (label, forms) in &self.forms {
            for (j, f) in forms.iter().enumerate() {
                out.entry(f.as_str()).or_default().push((label.as_str(), j));
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| DataError::Schema { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, serde_json::to_string_pretty(self).expect("serializable"))?;
        Ok(())
    }
}

/// English pluralization with an override table for irregular nouns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PluralRules {
    overrides: HashMap<String, Vec<String>>,
}

impl Default for PluralRules {
    fn default() -> Self {
        let table: &[(&str, &[&str])] = &[
            ("deer", &["deer"]),
            ("sheep", &["sheep"]),
            ("fish", &["fish"]),
            ("person", &["person", "people"]),
            ("man", &["man", "men"]),
            ("woman", &["woman", "women"]),
            ("child", &["child", "children"]),
            ("mouse", &["mouse", "mice"]),
            ("goose", &["goose", "geese"]),
            ("knife", &["knife", "knives"]),
            ("shelf", &["shelf", "shelves"]),
            ("tomato", &["tomato", "tomatoes"]),
            ("potato", &["potato", "potatoes"]),
        ];
        let overrides = table
            .iter()
            .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
            .collect();
        Self { overrides }
    }
}

impl PluralRules {
    pub fn with_override(mut self, label: &str, forms: &[&str]) -> Self {
        self.overrides.insert(label.to_string(), forms.iter().map(|s| s.to_string()).collect());
        self
    }

    pub fn forms(&self, label: &str) -> Vec<String> {
        if let Some(f) = self.overrides.get(label) {
            return f.clone();
        }
        // Multi-word labels inflect their head (last) word.
        let (head_prefix, head) = match label.rsplit_once(' ') {
            Some((p, h)) => (format!("{p} "), h),
            None => (String::new(), label),
        };
        let plural = if let Some(f) = self.overrides.get(head) {
            f.get(1).cloned().unwrap_or_else(|| head.to_string())
        } else {
            pluralize(head)
        };
        let plural = format!("{head_prefix}{plural}");
        if plural == label {
            vec![label.to_string()]
        } else {
            vec![label.to_string(), plural]
        }
    }
}

fn pluralize(word: &str) -> String {
    let sibilant = ["s", "x", "z", "ch", "sh"].iter().any(|s| word.ends_with(s));
    if sibilant {
        return format!("{word}es");
    }
    let bytes = word.as_bytes();
    if word.len() >= 2 && word.ends_with('y') && !b"aeiou".contains(&bytes[bytes.len() - 2]) {
        return format!("{}ies", &word[..word.len() - 1]);
    }
    format!("{word}s")
}

pub fn build_morph_table<'a>(labels: impl IntoIterator<Item = &'a str>, rules: &PluralRules) -> MorphTable {
    let mut table = MorphTable::new();
    for l in labels {
        table.insert(l, rules.forms(l));
    }
    table
}
