//! `key = value` files with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                location: format!("line {}", n + 1),
                message: format!("expected `key = value`, found {line:?}"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    location: format!("line {}", n + 1),
                    message: "empty key".into(),
                });
            }
            entries.insert(k.to_string(), (v.trim().to_string(), n + 1));
        }
        Ok(KeyValues { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Parse { location, message } => Error::Parse {
                location: format!("{}: {location}", path.display()),
                message,
            },
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(key.to_string(), (value.to_string(), 0));
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e| Error::Config(format!(
                "{key} = {v:?} (line {line}): {e}"
            ))),
        }
    }

    /// Overwrite `*slot` when `key` is present.
    pub fn fill<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| Error::Config(format!("missing key {key}")))
    }

    /// Fail on keys outside `known`.
    pub fn check_known(&self, known: &[&str]) -> Result<()> {
        let unknown: Vec<&str> = self.keys().filter(|k| !known.contains(k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))))
        }
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, (v, _))| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_values() {
        let kv = KeyValues::parse("# header\nlr = 0.001  # inline\n\nvariant=wo_SCL\n").unwrap();
        assert_eq!(kv.get::<f64>("lr").unwrap(), Some(0.001));
        assert_eq!(kv.raw("variant"), Some("wo_SCL"));
        assert_eq!(kv.get::<usize>("missing").unwrap(), None);
        assert!(kv.get::<usize>("variant").is_err());
        assert!(kv.check_known(&["lr"]).is_err());
    }

    #[test]
    fn rejects_lines_without_equals() {
        let err = KeyValues::parse("a = 1\nbroken\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn round_trips() {
        let mut kv = KeyValues::new();
        kv.set("b", 2);
        kv.set("a", "x");
        assert_eq!(KeyValues::parse(&kv.to_text()).unwrap().to_text(), kv.to_text());
    }
}
