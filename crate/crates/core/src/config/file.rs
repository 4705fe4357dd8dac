//! TOML configuration files.
//!
//! A file is either a full spec or a `preset = "..."` reference with
//! overriding keys. A top-level `layout = "CC-CCCT-..."` replaces the block
//! strings of every stage.

use std::path::Path;

use super::dsl::parse_layout;
use super::presets::build_preset;
use super::spec::ArchSpec;
use crate::checkpoint::sha256_hex;
use crate::error::{Error, Result};

pub fn spec_from_toml(text: &str) -> Result<ArchSpec> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let preset = table.remove("preset");
    let layout = table.remove("layout");
    let mut base = match preset {
        Some(toml::Value::String(name)) => {
            let spec = build_preset(&name)?;
            toml::Table::try_from(&spec).map_err(|e| Error::Config(e.to_string()))?
        }
        Some(other) => return Err(Error::Config(format!("`preset` must be a string, got {other}"))),
        None => toml::Table::new(),
    };
    for (k, v) in table {
        base.insert(k, v);
    }
    let spec: ArchSpec = toml::Value::Table(base)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let spec = spec.normalize();
    match layout {
        Some(toml::Value::String(l)) => spec.with_layout(&parse_layout(&l)?),
        Some(other) => Err(Error::Config(format!("`layout` must be a string, got {other}"))),
        None => Ok(spec),
    }
}

pub fn load_spec(path: impl AsRef<Path>) -> Result<ArchSpec> {
    let text = std::fs::read_to_string(path.as_ref())?;
    spec_from_toml(&text)
}

/// Byte-stable serialisation used for hashing.
pub fn canonical_toml(spec: &ArchSpec) -> Result<String> {
    toml::to_string(spec).map_err(|e| Error::Serialization(e.to_string()))
}

pub fn spec_hash(spec: &ArchSpec) -> Result<String> {
    Ok(sha256_hex(canonical_toml(spec)?.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_roundtrip() {
        for name in ["ascan-b", "unet-class-cond", "toy-cls"] {
            let spec = build_preset(name).unwrap();
            let text = canonical_toml(&spec).unwrap();
            let back = spec_from_toml(&text).unwrap();
            assert_eq!(back, spec);
            assert_eq!(canonical_toml(&back).unwrap(), text);
        }
    }

    #[test]
    fn preset_with_layout_override() {
        let spec = spec_from_toml("preset = \"ascan-t\"\nlayout = \"CC-CCTT-CCTT-CCTT\"\n").unwrap();
        assert_eq!(spec, build_preset("c10").unwrap().with_layout(&spec.layout()).unwrap().clone_named("ascan-t"));
    }

    #[test]
    fn bad_layout_in_file() {
        assert!(matches!(
            spec_from_toml("preset = \"ascan-t\"\nlayout = \"CC-CQ\"\n"),
            Err(Error::Parse { column: 5, .. })
        ));
    }

    impl ArchSpec {
        fn clone_named(&self, name: &str) -> ArchSpec {
            ArchSpec { name: name.into(), ..self.clone() }
        }
    }
}
