//! Directory archives of value expansions: one SYMT file per tensor plus a
//! plain-text `key=value` manifest.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;

use crate::error::{Error, Result};
use crate::feedback::{Provenance, ValueExpansion};
use crate::model::QuadraticControlSystem;
use crate::riccati::SCHUR_KIND;
use crate::symtensor::SymTensor;

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const ARCHIVE_FORMAT: &str = "polyfeed-chain-1";

/// Ordered `key=value` record. Keys are unique; values are single-line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Display) -> &mut Self {
        let v = value.to_string().replace(['\n', '\r'], " ");
        self.entries.insert(key.into(), v);
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::Format(format!("manifest is missing `{key}`")))
    }

    pub fn parse_field<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| Error::Format(format!("manifest field `{key}` has invalid value `{raw}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn extend(&mut self, other: &Manifest) {
        for (k, v) in other.iter() {
            self.entries.insert(k.to_string(), v.to_string());
        }
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("manifest line {} has no `=`", lineno + 1)))?;
            entries.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Manifest { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn tensor_file(k: usize) -> String {
    format!("T{k}.symt")
}

/// Writes `T2.symt … Td.symt` and a manifest; `extra` entries are merged
/// into the manifest (run configuration, timings, …).
pub fn save_expansion(dir: impl AsRef<Path>, exp: &ValueExpansion, extra: &Manifest) -> Result<Manifest> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for k in 2..=exp.d() {
        exp.tensor(k).save(dir.join(tensor_file(k)))?;
    }
    let p = &exp.provenance;
    let mut man = Manifest::new();
    man.set("format", ARCHIVE_FORMAT)
        .set("d", exp.d())
        .set("n", exp.n())
        .set("m", exp.m())
        .set("alpha", exp.alpha())
        .set("system_hash", &p.system_hash)
        .set("solver", &p.solver)
        .set("schur_kind", SCHUR_KIND)
        .set("riccati_residual", format!("{:e}", p.riccati_residual));
    for (k, r) in &p.lyap_residuals {
        man.set(format!("lyap_residual_{k}"), format!("{r:e}"));
    }
    if let Some(h) = p.hjb_check {
        man.set("hjb_check", format!("{h:e}"));
    }
    man.extend(extra);
    man.save(dir.join(MANIFEST_FILE))?;
    Ok(man)
}

/// Reads an archive written by [`save_expansion`]; `sys` supplies `B` and
/// must match the recorded system hash.
pub fn load_expansion(dir: impl AsRef<Path>, sys: &QuadraticControlSystem) -> Result<ValueExpansion> {
    let dir = dir.as_ref();
    let man = Manifest::load(dir.join(MANIFEST_FILE))?;
    if man.require("format")? != ARCHIVE_FORMAT {
        return Err(Error::Format(format!("unknown archive format `{}`", man.require("format")?)));
    }
    let hash = man.require("system_hash")?;
    if hash != sys.content_hash() {
        return Err(Error::Provenance(format!(
            "archive was built for system {hash}, given system is {}",
            sys.content_hash()
        )));
    }
    let d: usize = man.parse_field("d")?;
    let n: usize = man.parse_field("n")?;
    if d < 2 {
        return Err(Error::Format(format!("archive degree {d} is below 2")));
    }
    let mut tensors = Vec::with_capacity(d - 1);
    for k in 2..=d {
        let t = SymTensor::load(dir.join(tensor_file(k)))?;
        if t.order() != k || t.dim() != n {
            return Err(Error::Format(format!(
                "{} holds order {} over ℝ^{}, expected order {k} over ℝ^{n}",
                tensor_file(k),
                t.order(),
                t.dim()
            )));
        }
        tensors.push(t);
    }
    let lyap_residuals = (3..=d)
        .map(|k| Ok((k, man.parse_field(&format!("lyap_residual_{k}"))?)))
        .collect::<Result<_>>()?;
    let provenance = Provenance {
        system_hash: hash.to_string(),
        riccati_residual: man.parse_field("riccati_residual")?,
        lyap_residuals,
        hjb_check: man.get("hjb_check").and_then(|v| v.parse().ok()),
        solver: man.require("solver")?.to_string(),
    };
    ValueExpansion::new(sys.alpha(), sys.b().clone(), tensors, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genlyap::{synthesize, DEFAULT_TOL};
    use crate::model::make_scalar;

    #[test]
    fn manifest_parse_render() {
        let mut m = Manifest::new();
        m.set("b", 2).set("a", "x y").set("multi", "line\nbreak");
        let text = m.render();
        assert_eq!(text, "a=x y\nb=2\nmulti=line break\n");
        assert_eq!(Manifest::parse(&text).unwrap(), m);
        assert!(Manifest::parse("novalue\n").is_err());
        assert_eq!(m.parse_field::<u32>("b").unwrap(), 2);
        assert!(m.parse_field::<u32>("a").is_err());
    }

    #[test]
    fn expansion_round_trip() {
        let sys = make_scalar(-1.0, 1.0, 1.0, 1.0).unwrap();
        let exp = synthesize(&sys, 4, DEFAULT_TOL).unwrap().expansion;
        let dir = tempfile::tempdir().unwrap();
        let mut extra = Manifest::new();
        extra.set("note", "test");
        save_expansion(dir.path(), &exp, &extra).unwrap();
        let back = load_expansion(dir.path(), &sys).unwrap();
        assert_eq!(back.tensors(), exp.tensors());
        assert_eq!(back.provenance.system_hash, exp.provenance.system_hash);

        let other = make_scalar(-1.0, 1.0, 2.0, 1.0).unwrap();
        assert!(matches!(load_expansion(dir.path(), &other), Err(Error::Provenance(_))));

        std::fs::write(dir.path().join("T3.symt"), b"SYMT").unwrap();
        assert!(matches!(load_expansion(dir.path(), &sys), Err(Error::Format(_))));
    }
}
