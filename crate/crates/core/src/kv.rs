//! Flat `section.key=value` configuration text.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

pub type KvMap = BTreeMap<String, String>;

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse(text: &str) -> Result<KvMap> {
    let mut map = KvMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if map.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
        }
    }
    Ok(map)
}

/// Canonical form: one `key=value` per line in sorted key order.
pub fn to_text(map: &KvMap) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn get<T: FromStr>(map: &KvMap, key: &str) -> Result<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::Config(format!("missing key {key}")))?;
    raw.parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {raw:?}")))
}

/// Reads `key` if present, otherwise keeps `current`.
pub fn get_or<T: FromStr>(map: &KvMap, key: &str, current: T) -> Result<T> {
    if map.contains_key(key) {
        get(map, key)
    } else {
        Ok(current)
    }
}

/// Entries under `prefix.` with the prefix stripped.
pub fn section(map: &KvMap, prefix: &str) -> KvMap {
    let dotted = format!("{prefix}.");
    map.iter()
        .filter_map(|(k, v)| k.strip_prefix(&dotted).map(|s| (s.to_string(), v.clone())))
        .collect()
}

/// Prepends `prefix.` to every key.
pub fn prefixed(map: &KvMap, prefix: &str) -> KvMap {
    map.iter()
        .map(|(k, v)| (format!("{prefix}.{k}"), v.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_roundtrip_is_canonical() {
        let m = parse("# c\nmodel.h=8\n\n model.d_f = 40\n").unwrap();
        assert_eq!(to_text(&m), "model.d_f=40\nmodel.h=8\n");
        assert_eq!(parse(&to_text(&m)).unwrap(), m);
        assert_eq!(get::<usize>(&m, "model.d_f").unwrap(), 40);
        assert_eq!(section(&m, "model").len(), 2);
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse("novalue").is_err());
        assert!(parse("a=1\na=2").is_err());
        let m = parse("a=x").unwrap();
        assert!(get::<usize>(&m, "a").is_err());
        assert!(get::<usize>(&m, "b").is_err());
    }
}
