//! `key=value` configuration text.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; keys and values are trimmed; the first `=` splits.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected key=value, got `{line}`", i + 1))
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parsed config; later duplicates win.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self {
            entries: parse_kv(text)?.into_iter().collect(),
        })
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn get_parsed<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("bad value for {key}: `{v}`"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_with_comments_and_spaces() {
        let kv = parse_kv("# model\nframes = 4\n\nprompt=a = b\n").unwrap();
        assert_eq!(
            kv,
            vec![
                ("frames".into(), "4".into()),
                ("prompt".into(), "a = b".into())
            ]
        );
        assert!(matches!(parse_kv("frames 4"), Err(Error::Config(_))));
        assert!(parse_kv("=4").is_err());
    }

    #[test]
    fn typed_lookup() {
        let c = KvConfig::parse("seed=7\nseed=9\nomega=x").unwrap();
        assert_eq!(c.get_parsed::<u64>("seed").unwrap(), Some(9));
        assert!(c.get_parsed::<f32>("omega").is_err());
        assert_eq!(c.get_parsed::<f32>("missing").unwrap(), None);
    }
}
