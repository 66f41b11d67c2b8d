//! Plain-text `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. A key may repeat
//! (layer groups use this); consumers take the keys they understand and
//! [`KeyValues::finish`] rejects whatever is left.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KeyValues {
    entries: BTreeMap<String, Vec<(usize, String)>>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: "empty key".into(),
                });
            }
            entries.entry(k.to_string()).or_default().push((i + 1, v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Removes and parses a single-valued key.
    pub fn take<V: FromStr>(&mut self, key: &str) -> Result<Option<V>> {
        let Some(mut vals) = self.entries.remove(key) else {
            return Ok(None);
        };
        let (line, v) = vals.pop().expect("non-empty");
        if !vals.is_empty() {
            return Err(Error::Parse {
                line,
                message: format!("key `{key}` given more than once"),
            });
        }
        v.parse().map(Some).map_err(|_| Error::Parse {
            line,
            message: format!("bad value `{v}` for `{key}`"),
        })
    }

    pub fn take_or<V: FromStr>(&mut self, key: &str, default: V) -> Result<V> {
        Ok(self.take(key)?.unwrap_or(default))
    }

    /// Removes every value of a repeatable key, in file order.
    pub fn take_all(&mut self, key: &str) -> Vec<(usize, String)> {
        self.entries.remove(key).unwrap_or_default()
    }

    /// Errors on the first key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, vals)) => Err(Error::Parse {
                line: vals[0].0,
                message: format!("unknown key `{k}`"),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_leftovers() {
        let mut kv = KeyValues::parse("# c\nd_model = 16\n\ngroup = a\ngroup = b\nlr=0.5\n").unwrap();
        assert_eq!(kv.take::<usize>("d_model").unwrap(), Some(16));
        assert_eq!(kv.take_all("group").iter().map(|g| g.1.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(kv.take_or("missing", 3usize).unwrap(), 3);
        assert!(matches!(kv.clone().finish(), Err(Error::Parse { line: 6, .. })));
        assert_eq!(kv.take::<f64>("lr").unwrap(), Some(0.5));
        kv.finish().unwrap();
    }

    #[test]
    fn errors_carry_line_numbers() {
        assert!(matches!(KeyValues::parse("a = 1\nnonsense"), Err(Error::Parse { line: 2, .. })));
        let mut kv = KeyValues::parse("x = y").unwrap();
        assert!(matches!(kv.take::<usize>("x"), Err(Error::Parse { line: 1, .. })));
        let mut kv = KeyValues::parse("x = 1\nx = 2").unwrap();
        assert!(kv.take::<usize>("x").is_err());
    }
}
