//! Flat `key = value` configuration files.
//!
//! Every configuration struct in the crate is declared through
//! [`flat_config!`], which generates the struct, its defaults, a setter keyed
//! by field name, and a writer that emits a commented file listing each key
//! with its default and unit. Files are parsed as TOML tables without nesting.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, SdbError};

pub trait ConfigValue: Sized {
    fn from_toml(v: &toml::Value) -> std::result::Result<Self, String>;
    fn to_toml(&self) -> String;
}

impl ConfigValue for usize {
    fn from_toml(v: &toml::Value) -> std::result::Result<Self, String> {
        v.as_integer()
            .and_then(|i| usize::try_from(i).ok())
            .ok_or_else(|| format!("expected a non-negative integer, got {v}"))
    }
    fn to_toml(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    fn from_toml(v: &toml::Value) -> std::result::Result<Self, String> {
        v.as_integer()
            .and_then(|i| u64::try_from(i).ok())
            .ok_or_else(|| format!("expected a non-negative integer, got {v}"))
    }
    fn to_toml(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    fn from_toml(v: &toml::Value) -> std::result::Result<Self, String> {
        v.as_float()
            .or_else(|| v.as_integer().map(|i| i as f64))
            .ok_or_else(|| format!("expected a number, got {v}"))
    }
    fn to_toml(&self) -> String {
        // `{:?}` keeps a decimal point and round-trips exactly.
        format!("{self:?}")
    }
}

impl ConfigValue for bool {
    fn from_toml(v: &toml::Value) -> std::result::Result<Self, String> {
        v.as_bool().ok_or_else(|| format!("expected true or false, got {v}"))
    }
    fn to_toml(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for String {
    fn from_toml(v: &toml::Value) -> std::result::Result<Self, String> {
        v.as_str().map(str::to_owned).ok_or_else(|| format!("expected a string, got {v}"))
    }
    fn to_toml(&self) -> String {
        toml::Value::String(self.clone()).to_string()
    }
}

impl ConfigValue for Vec<u64> {
    fn from_toml(v: &toml::Value) -> std::result::Result<Self, String> {
        let arr = v.as_array().ok_or_else(|| format!("expected an array, got {v}"))?;
        arr.iter().map(u64::from_toml).collect()
    }
    fn to_toml(&self) -> String {
        let parts: Vec<String> = self.iter().map(u64::to_string).collect();
        format!("[{}]", parts.join(", "))
    }
}

/// Implements [`ConfigValue`] for a type with `FromStr` + `Display`, stored as a TOML string.
#[macro_export]
macro_rules! string_config_value {
    ($ty:ty) => {
        impl $crate::config::ConfigValue for $ty {
            fn from_toml(v: &toml::Value) -> std::result::Result<Self, String> {
                let s = v.as_str().ok_or_else(|| format!("expected a string, got {v}"))?;
                s.parse::<$ty>().map_err(|e| e.to_string())
            }
            fn to_toml(&self) -> String {
                format!("\"{}\"", self)
            }
        }
    };
}

/// A configuration struct whose fields can be set by name.
pub trait FlatConfig {
    /// Sets `key` from a TOML value. Returns `Ok(false)` when the key is not a field.
    fn set_value(&mut self, key: &str, value: &toml::Value) -> Result<bool>;
    /// Every field, in declaration order.
    fn entries(&self) -> Vec<ConfigEntry>;
}

#[derive(Debug, Clone)]
pub struct ConfigEntry {
    pub key: &'static str,
    pub value: String,
    pub default: String,
    pub unit: &'static str,
    pub doc: &'static str,
}

#[macro_export]
macro_rules! flat_config {
    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $(
                #[doc = $doc:literal]
                $field:ident : $ty:ty = $default:expr ; $unit:literal
            ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        pub struct $name {
            $( #[doc = $doc] pub $field: $ty, )*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl $crate::config::FlatConfig for $name {
            fn set_value(&mut self, key: &str, value: &toml::Value) -> $crate::error::Result<bool> {
                match key {
                    $(
                        stringify!($field) => {
                            self.$field = <$ty as $crate::config::ConfigValue>::from_toml(value)
                                .map_err(|e| $crate::error::SdbError::Config(format!("{key}: {e}")))?;
                            Ok(true)
                        }
                    )*
                    _ => Ok(false),
                }
            }

            fn entries(&self) -> Vec<$crate::config::ConfigEntry> {
                let defaults = Self::default();
                vec![ $( $crate::config::ConfigEntry {
                    key: stringify!($field),
                    value: <$ty as $crate::config::ConfigValue>::to_toml(&self.$field),
                    default: <$ty as $crate::config::ConfigValue>::to_toml(&defaults.$field),
                    unit: $unit,
                    doc: $doc.trim(),
                }, )* ]
            }
        }
    };
}

/// Parse a flat `key = value` document into a TOML table, rejecting nested tables.
pub fn parse_flat(text: &str) -> Result<toml::Table> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| SdbError::Config(e.to_string()))?;
    if let Some((k, _)) = table.iter().find(|(_, v)| v.is_table()) {
        return Err(SdbError::Config(format!("nested table `{k}` is not allowed in a flat config")));
    }
    Ok(table)
}

/// Parse a single `key=value` override, as given on the command line.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| SdbError::Config(format!("override `{s}` is not of the form key=value")))?;
    let k = k.trim().to_owned();
    let v = v.trim();
    let value = match format!("x = {v}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("x").expect("parsed key"),
        // bare words are taken as strings so `dem_mode=noise` works unquoted
        Err(_) => toml::Value::String(v.to_owned()),
    };
    Ok((k, value))
}

/// Apply every entry of `table` to the first config in `targets` that knows the key.
pub fn apply(table: &toml::Table, targets: &mut [&mut dyn FlatConfig]) -> Result<()> {
    'keys: for (k, v) in table {
        for t in targets.iter_mut() {
            if t.set_value(k, v)? {
                continue 'keys;
            }
        }
        return Err(SdbError::Config(format!("unknown key `{k}`")));
    }
    Ok(())
}

pub fn load_into(path: &Path, targets: &mut [&mut dyn FlatConfig]) -> Result<()> {
    let text = std::fs::read_to_string(path)?;
    apply(&parse_flat(&text)?, targets)
}

/// Render configs as a commented flat file; parsing the output restores the same values.
pub fn render(sections: &[(&str, &dyn FlatConfig)]) -> String {
    let mut out = String::new();
    for (title, cfg) in sections {
        let _ = writeln!(out, "# --- {title} ---");
        for e in cfg.entries() {
            let _ = writeln!(out, "# {} (default: {}; unit: {})", e.doc, e.default, e.unit);
            let _ = writeln!(out, "{} = {}", e.key, e.value);
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    flat_config! {
        #[derive(Debug, Clone, PartialEq)]
        pub struct Demo {
            /// how many
            count: usize = 3; "items",
            /// how much
            rate: f64 = 0.25; "1/step",
            /// which
            name: String = "a b".into(); "label",
            /// seeds to run
            seeds: Vec<u64> = vec![1, 2]; "seed",
        }
    }

    #[test]
    fn render_then_parse_restores_values() {
        let mut d = Demo { count: 7, rate: 0.1 + 0.2, name: "x=\"y\"".into(), seeds: vec![] };
        d.seeds.push(9);
        let text = render(&[("demo", &d)]);
        let mut back = Demo::default();
        apply(&parse_flat(&text).unwrap(), &mut [&mut back]).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let mut d = Demo::default();
        let (k, v) = parse_override("rate=2").unwrap();
        assert!(d.set_value(&k, &v).unwrap());
        assert_eq!(d.rate, 2.0);
        let (k, v) = parse_override("name=plain").unwrap();
        d.set_value(&k, &v).unwrap();
        assert_eq!(d.name, "plain");
        let mut t = toml::Table::new();
        t.insert("nope".into(), toml::Value::Integer(1));
        assert!(apply(&t, &mut [&mut d]).is_err());
        assert!(parse_flat("[section]\na = 1").is_err());
    }
}
