//! Model checkpoints: a directory holding `manifest.txt`, `params.bin` and
//! `config.toml`.
//!
//! The manifest starts with `format_version`, `variant` and `config_hash`
//! lines, followed by one record per tensor: `name dtype shape byte_offset`,
//! with the shape written as comma-separated extents. `params.bin` is the
//! concatenation of all tensors as little-endian f32 in record order.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::{architecture_hash, RunConfig, Variant};
use crate::error::{Error, Result};
use crate::layers::{Module, Param, Visitor};
use crate::tensor::{Scalar, Tensor};
use crate::vc::VcModel;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "params.bin";
pub const CONFIG: &str = "config.toml";

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Record {
    fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * 4
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub version: u32,
    pub variant: Variant,
    pub config_hash: String,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "format_version {}\nvariant {}\nconfig_hash {}\n",
            self.version,
            self.variant.as_str(),
            self.config_hash
        );
        for r in &self.records {
            let shape: Vec<String> = r.shape.iter().map(ToString::to_string).collect();
            writeln!(s, "{} f32 {} {}", r.name, shape.join(","), r.offset).expect("write to string");
        }
        s
    }

    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let bad = |line: usize, detail: String| Error::Parse {
            file: file.to_string(),
            detail: format!("line {line}: {detail}"),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut header = |key: &str| -> Result<String> {
            let (i, line) = lines.next().ok_or_else(|| bad(0, format!("missing `{key}`")))?;
            match line.split_once(' ') {
                Some((k, v)) if k == key => Ok(v.trim().to_string()),
                _ => Err(bad(i, format!("expected `{key} <value>`"))),
            }
        };
        let version: u32 = header("format_version")?
            .parse()
            .map_err(|e| bad(1, format!("format_version: {e}")))?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let variant = header("variant")?.parse()?;
        let config_hash = header("config_hash")?;
        let mut records = Vec::new();
        for (i, line) in lines.filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split_whitespace().collect();
            let [name, dtype, shape, offset] = f[..] else {
                return Err(bad(i, format!("expected 4 fields, found {}", f.len())));
            };
            if dtype != "f32" {
                return Err(bad(i, format!("unsupported dtype `{dtype}`")));
            }
            let shape = shape
                .split(',')
                .map(|d| d.parse::<usize>().map_err(|e| bad(i, format!("shape {shape:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let offset = offset.parse().map_err(|e| bad(i, format!("offset {offset:?}: {e}")))?;
            records.push(Record {
                name: name.to_string(),
                shape,
                offset,
            });
        }
        Ok(Self {
            version,
            variant,
            config_hash,
            records,
        })
    }

    /// Records must tile `[0, blob_len)` in order without gaps or overlaps.
    fn check_layout(&self, blob_len: usize) -> Result<()> {
        let mut next = 0;
        for r in &self.records {
            if r.offset != next {
                return Err(Error::Checkpoint(format!(
                    "record `{}` starts at byte {} but the previous record ends at {next}",
                    r.name, r.offset
                )));
            }
            next += r.byte_len();
        }
        if next != blob_len {
            return Err(Error::Checkpoint(format!(
                "records cover {next} bytes but {BLOB} holds {blob_len}"
            )));
        }
        Ok(())
    }
}

/// Every parameter and buffer of a module in visitation order.
fn collect_tensors<T: Scalar>(m: &mut dyn Module<T>) -> Vec<(String, Tensor<T>)> {
    struct Collect<T>(Vec<(String, Tensor<T>)>);
    impl<T: Scalar> Visitor<T> for Collect<T> {
        fn param(&mut self, name: &str, p: &mut Param<T>) {
            self.0.push((name.to_string(), p.value.clone()));
        }
        fn buffer(&mut self, name: &str, t: &mut Tensor<T>) {
            self.0.push((name.to_string(), t.clone()));
        }
    }
    let mut c = Collect(Vec::new());
    m.visit("", &mut c);
    c.0
}

pub fn save<T: Scalar>(dir: &Path, model: &mut VcModel<T>, config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut records = Vec::new();
    for (name, t) in collect_tensors(model) {
        records.push(Record {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION,
        variant: config.encoder.variant,
        config_hash: architecture_hash(&config.encoder, &config.vc),
        records,
    };
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
    };
    write(BLOB, &blob)?;
    write(CONFIG, config.to_toml().as_bytes())?;
    write(MANIFEST, manifest.to_text().as_bytes())
}

/// Loads a checkpoint. With `expected`, refuses a checkpoint whose
/// architecture hash differs from that configuration's.
pub fn load<T: Scalar>(dir: &Path, expected: Option<&RunConfig>) -> Result<(VcModel<T>, RunConfig)> {
    let read = |name: &str| {
        let p = dir.join(name);
        std::fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let manifest_path = dir.join(MANIFEST);
    let text = String::from_utf8(read(MANIFEST)?).map_err(|e| Error::Parse {
        file: manifest_path.display().to_string(),
        detail: e.to_string(),
    })?;
    let manifest = Manifest::parse(&text, &manifest_path.display().to_string())?;
    let config = RunConfig::load(&dir.join(CONFIG))?;
    let stored = architecture_hash(&config.encoder, &config.vc);
    if stored != manifest.config_hash {
        return Err(Error::Checkpoint(format!(
            "{CONFIG} hashes to {stored} but the manifest records {}",
            manifest.config_hash
        )));
    }
    if let Some(exp) = expected {
        let want = architecture_hash(&exp.encoder, &exp.vc);
        if want != manifest.config_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: checkpoint {} vs configuration {want}",
                manifest.config_hash
            )));
        }
    }
    let blob = read(BLOB)?;
    manifest.check_layout(blob.len())?;

    let mut model = VcModel::<T>::initialize(&config)?;
    let expected_tensors = collect_tensors(&mut model);
    if expected_tensors.len() != manifest.records.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model has {}",
            manifest.records.len(),
            expected_tensors.len()
        )));
    }
    let mut values = std::collections::HashMap::new();
    for r in &manifest.records {
        let data = blob[r.offset..r.offset + r.byte_len()]
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect();
        if values.insert(r.name.clone(), Tensor::new(&r.shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record `{}`", r.name)));
        }
    }
    struct Fill<'a, T> {
        values: &'a std::collections::HashMap<String, Tensor<T>>,
        err: Option<Error>,
    }
    impl<T: Scalar> Fill<'_, T> {
        fn fill(&mut self, name: &str, dst: &mut Tensor<T>) {
            if self.err.is_some() {
                return;
            }
            match self.values.get(name) {
                Some(src) if src.shape() == dst.shape() => *dst = src.clone(),
                Some(src) => {
                    self.err = Some(Error::Checkpoint(format!(
                        "`{name}` has shape {:?}, model expects {:?}",
                        src.shape(),
                        dst.shape()
                    )))
                }
                None => self.err = Some(Error::Checkpoint(format!("missing record `{name}`"))),
            }
        }
    }
    impl<T: Scalar> Visitor<T> for Fill<'_, T> {
        fn param(&mut self, name: &str, p: &mut Param<T>) {
            self.fill(name, &mut p.value);
        }
        fn buffer(&mut self, name: &str, t: &mut Tensor<T>) {
            self.fill(name, t);
        }
    }
    let mut fill = Fill {
        values: &values,
        err: None,
    };
    model.visit("", &mut fill);
    if let Some(e) = fill.err {
        return Err(e);
    }
    Ok((model, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            version: FORMAT_VERSION,
            variant: Variant::Resnet,
            config_hash: "ab12".into(),
            records: vec![
                Record {
                    name: "a.weight".into(),
                    shape: vec![2, 3],
                    offset: 0,
                },
                Record {
                    name: "a.bias".into(),
                    shape: vec![2],
                    offset: 24,
                },
            ],
        };
        let back = Manifest::parse(&m.to_text(), "m").unwrap();
        assert_eq!(back, m);
        assert!(back.check_layout(32).is_ok());
        assert!(back.check_layout(36).is_err());
    }

    #[test]
    fn overlapping_records_rejected() {
        let text = "format_version 1\nvariant ddse\nconfig_hash x\na f32 2 0\nb f32 2 4\n";
        let m = Manifest::parse(text, "m").unwrap();
        assert!(matches!(m.check_layout(16), Err(Error::Checkpoint(_))));
    }
}
