//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "APE1" | u32 version | u32 n_sections
//! section:  u32 name_len | name | u32 n_entries
//! entry:    u32 name_len | name | u8 kind | payload
//!   kind 0 (f64 tensor): u32 ndim | u64 dims... | f64 data...
//!   kind 1 (utf8):       u32 byte_len | bytes
//! ```
//!
//! Sections hold one network or metadata table each; loading validates the
//! magic, version, layer shapes, and chain dimensions, and rejects any
//! mismatch against the declared feature spec.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::experts::{FeatureSpec, LearnedExpertParams, TrainConfig};
use crate::nn::{Activation, DenseLayer, Mlp};
use crate::pipeline::{Provenance, TrainedEnsemble};
use crate::routing::RouterParams;

pub const MAGIC: [u8; 4] = *b"APE1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
enum EntryPayload {
    Tensor { dims: Vec<u64>, data: Vec<f64> },
    Utf8(String),
}

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    payload: EntryPayload,
}

#[derive(Debug, Clone, PartialEq)]
struct Section {
    name: String,
    entries: Vec<Entry>,
}

struct Writer {
    buf: Vec<u8>,
    n_sections: u32,
}

impl Writer {
    fn new() -> Self {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes()); // patched at finish
        Self { buf, n_sections: 0 }
    }

    fn write_str(&mut self, s: &str) {
        self.buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn section(&mut self, name: &str, entries: &[Entry]) {
        self.n_sections += 1;
        self.write_str(name);
        self.buf
            .extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for entry in entries {
            self.write_str(&entry.name);
            match &entry.payload {
                EntryPayload::Tensor { dims, data } => {
                    self.buf.push(0);
                    self.buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
                    for d in dims {
                        self.buf.extend_from_slice(&d.to_le_bytes());
                    }
                    for v in data {
                        self.buf.extend_from_slice(&v.to_le_bytes());
                    }
                }
                EntryPayload::Utf8(text) => {
                    self.buf.push(1);
                    self.buf
                        .extend_from_slice(&(text.len() as u32).to_le_bytes());
                    self.buf.extend_from_slice(text.as_bytes());
                }
            }
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let count = self.n_sections.to_le_bytes();
        self.buf[8..12].copy_from_slice(&count);
        self.buf
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::Checkpoint("file too short".into()));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic, expected APE1".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        Ok(Self { bytes, pos: 8 })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn read_u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn read_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn read_str(&mut self) -> Result<String> {
        let len = self.read_u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| Error::Checkpoint(format!("bad utf8: {e}")))
    }

    fn read_sections(&mut self) -> Result<Vec<Section>> {
        let n_sections = self.read_u32()?;
        let mut sections = Vec::with_capacity(n_sections as usize);
        for _ in 0..n_sections {
            let name = self.read_str()?;
            let n_entries = self.read_u32()?;
            let mut entries = Vec::with_capacity(n_entries as usize);
            for _ in 0..n_entries {
                let entry_name = self.read_str()?;
                let kind = self.take(1)?[0];
                let payload = match kind {
                    0 => {
                        let ndim = self.read_u32()? as usize;
                        let mut dims = Vec::with_capacity(ndim);
                        for _ in 0..ndim {
                            dims.push(self.read_u64()?);
                        }
                        let count: u64 = dims.iter().product();
                        let mut data = Vec::with_capacity(count as usize);
                        for _ in 0..count {
                            data.push(f64::from_le_bytes(
                                self.take(8)?.try_into().expect("8 bytes"),
                            ));
                        }
                        EntryPayload::Tensor { dims, data }
                    }
                    1 => EntryPayload::Utf8(self.read_str()?),
                    other => {
                        return Err(Error::Checkpoint(format!("unknown entry kind {other}")))
                    }
                };
                entries.push(Entry {
                    name: entry_name,
                    payload,
                });
            }
            sections.push(Section { name, entries });
        }
        if self.pos != self.bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last section".into()));
        }
        Ok(sections)
    }
}

fn mlp_entries(mlp: &Mlp) -> Vec<Entry> {
    let mut entries = Vec::new();
    for (idx, layer) in mlp.layers.iter().enumerate() {
        entries.push(Entry {
            name: format!("layer{idx}.weights"),
            payload: EntryPayload::Tensor {
                dims: vec![layer.out_dim as u64, layer.in_dim as u64],
                data: layer.weights.clone(),
            },
        });
        entries.push(Entry {
            name: format!("layer{idx}.bias"),
            payload: EntryPayload::Tensor {
                dims: vec![layer.out_dim as u64],
                data: layer.bias.clone(),
            },
        });
        entries.push(Entry {
            name: format!("layer{idx}.activation"),
            payload: EntryPayload::Utf8(layer.activation.name().to_string()),
        });
    }
    entries
}

fn find<'a>(section: &'a Section, name: &str) -> Result<&'a Entry> {
    section
        .entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| {
            Error::Checkpoint(format!(
                "section `{}` is missing entry `{name}`",
                section.name
            ))
        })
}

fn tensor<'a>(section: &'a Section, name: &str) -> Result<(&'a [u64], &'a [f64])> {
    match &find(section, name)?.payload {
        EntryPayload::Tensor { dims, data } => Ok((dims, data)),
        EntryPayload::Utf8(_) => Err(Error::Checkpoint(format!(
            "entry `{name}` should be a tensor"
        ))),
    }
}

fn text<'a>(section: &'a Section, name: &str) -> Result<&'a str> {
    match &find(section, name)?.payload {
        EntryPayload::Utf8(s) => Ok(s),
        EntryPayload::Tensor { .. } => Err(Error::Checkpoint(format!(
            "entry `{name}` should be a string"
        ))),
    }
}

fn scalar(section: &Section, name: &str) -> Result<f64> {
    let (dims, data) = tensor(section, name)?;
    if dims != [1] || data.len() != 1 {
        return Err(Error::Checkpoint(format!("entry `{name}` should be scalar")));
    }
    Ok(data[0])
}

fn mlp_from_section(section: &Section) -> Result<Mlp> {
    let n_layers = section
        .entries
        .iter()
        .filter(|e| e.name.ends_with(".weights"))
        .count();
    if n_layers == 0 {
        return Err(Error::Checkpoint(format!(
            "section `{}` holds no layers",
            section.name
        )));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for idx in 0..n_layers {
        let (w_dims, w_data) = tensor(section, &format!("layer{idx}.weights"))?;
        if w_dims.len() != 2 {
            return Err(Error::Checkpoint(format!(
                "layer {idx} weights must be 2-d in section `{}`",
                section.name
            )));
        }
        let (out_dim, in_dim) = (w_dims[0] as usize, w_dims[1] as usize);
        if w_data.len() != out_dim * in_dim {
            return Err(Error::Checkpoint("weight payload size mismatch".into()));
        }
        let (b_dims, b_data) = tensor(section, &format!("layer{idx}.bias"))?;
        if b_dims != [out_dim as u64] {
            return Err(Error::Checkpoint(format!(
                "layer {idx} bias shape mismatch in section `{}`",
                section.name
            )));
        }
        let activation = Activation::from_name(text(section, &format!("layer{idx}.activation"))?)?;
        layers.push(DenseLayer {
            in_dim,
            out_dim,
            weights: w_data.to_vec(),
            bias: b_data.to_vec(),
            activation,
        });
    }
    for pair in layers.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::Checkpoint(format!(
                "chained layer dims mismatch in section `{}`",
                section.name
            )));
        }
    }
    Ok(Mlp::new(layers))
}

fn scalar_entry(name: &str, value: f64) -> Entry {
    Entry {
        name: name.to_string(),
        payload: EntryPayload::Tensor {
            dims: vec![1],
            data: vec![value],
        },
    }
}

fn text_entry(name: &str, value: &str) -> Entry {
    Entry {
        name: name.to_string(),
        payload: EntryPayload::Utf8(value.to_string()),
    }
}

/// Serialize a trained ensemble to bytes.
pub fn encode_ensemble(ensemble: &TrainedEnsemble) -> Vec<u8> {
    let mut writer = Writer::new();
    let spec = ensemble.expert.feature_spec;
    let config = &ensemble.train_config;

    let mut meta = vec![
        scalar_entry("t_history", spec.t_history as f64),
        scalar_entry("t_future", spec.t_future as f64),
        scalar_entry("attr_width", spec.attr_width as f64),
        scalar_entry("k_modes", ensemble.expert.k_modes() as f64),
        scalar_entry("n_bootstrap_members", ensemble.bootstrap.len() as f64),
        scalar_entry("epochs", config.epochs as f64),
        scalar_entry("batch_size", config.batch_size as f64),
        scalar_entry("lr_predictor", config.lr_predictor),
        scalar_entry("lr_router", config.lr_router),
        scalar_entry("lr_decay_factor", config.lr_decay_factor),
        scalar_entry("lr_decay_every", config.lr_decay_every as f64),
        text_entry("seed", &config.seed.to_string()),
        text_entry("dataset_tag", &ensemble.provenance.dataset_tag),
        scalar_entry("provenance_epochs", ensemble.provenance.epochs as f64),
    ];
    if let Some(threshold) = ensemble.variance_threshold {
        meta.push(scalar_entry("variance_threshold", threshold));
    }
    writer.section("meta", &meta);

    writer.section("expert.encoder", &mlp_entries(&ensemble.expert.encoder));
    for (idx, head) in ensemble.expert.mode_heads.iter().enumerate() {
        writer.section(&format!("expert.head{idx}"), &mlp_entries(head));
    }
    writer.section(
        "expert.logits",
        &mlp_entries(&ensemble.expert.mode_logit_head),
    );
    writer.section(
        "router.shared_encoder",
        &mlp_entries(&ensemble.router.shared_encoder),
    );
    writer.section(
        "router.candidate_encoder",
        &mlp_entries(&ensemble.router.candidate_encoder),
    );
    writer.section(
        "router.routing_head",
        &mlp_entries(&ensemble.router.routing_head),
    );
    for (idx, member) in ensemble.bootstrap.iter().enumerate() {
        writer.section(&format!("bootstrap{idx}.encoder"), &mlp_entries(&member.encoder));
        for (head_idx, head) in member.mode_heads.iter().enumerate() {
            writer.section(
                &format!("bootstrap{idx}.head{head_idx}"),
                &mlp_entries(head),
            );
        }
        writer.section(
            &format!("bootstrap{idx}.logits"),
            &mlp_entries(&member.mode_logit_head),
        );
    }
    writer.finish()
}

fn expert_from_sections(
    sections: &[Section],
    prefix: &str,
    spec: FeatureSpec,
    k_modes: usize,
) -> Result<LearnedExpertParams> {
    let by_name = |name: String| -> Result<&Section> {
        sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
    };
    let encoder = mlp_from_section(by_name(format!("{prefix}.encoder"))?)?;
    let mut mode_heads = Vec::with_capacity(k_modes);
    for idx in 0..k_modes {
        mode_heads.push(mlp_from_section(by_name(format!("{prefix}.head{idx}"))?)?);
    }
    let mode_logit_head = mlp_from_section(by_name(format!("{prefix}.logits"))?)?;
    let expert = LearnedExpertParams {
        feature_spec: spec,
        encoder,
        mode_heads,
        mode_logit_head,
    };
    expert
        .validate()
        .map_err(|e| Error::Checkpoint(format!("{prefix}: {e}")))?;
    Ok(expert)
}

/// Parse a trained ensemble from bytes, rejecting shape mismatches.
pub fn decode_ensemble(bytes: &[u8]) -> Result<TrainedEnsemble> {
    let mut reader = Reader::new(bytes)?;
    let sections = reader.read_sections()?;

    let meta = sections
        .iter()
        .find(|s| s.name == "meta")
        .ok_or_else(|| Error::Checkpoint("missing section `meta`".into()))?;
    let t_history = scalar(meta, "t_history")? as usize;
    let t_future = scalar(meta, "t_future")? as usize;
    let attr_width = scalar(meta, "attr_width")? as usize;
    let k_modes = scalar(meta, "k_modes")? as usize;
    let n_bootstrap = scalar(meta, "n_bootstrap_members")? as usize;
    let seed: u64 = text(meta, "seed")?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("bad seed: {e}")))?;
    let spec = FeatureSpec::new(t_history, t_future, attr_width);

    let train_config = TrainConfig {
        lr_predictor: scalar(meta, "lr_predictor")?,
        lr_router: scalar(meta, "lr_router")?,
        epochs: scalar(meta, "epochs")? as usize,
        batch_size: scalar(meta, "batch_size")? as usize,
        seed,
        lr_decay_factor: scalar(meta, "lr_decay_factor")?,
        lr_decay_every: scalar(meta, "lr_decay_every")? as usize,
    };
    let variance_threshold = meta
        .entries
        .iter()
        .find(|e| e.name == "variance_threshold")
        .map(|_| scalar(meta, "variance_threshold"))
        .transpose()?;

    let expert = expert_from_sections(&sections, "expert", spec, k_modes)?;

    let by_name = |name: &str| -> Result<&Section> {
        sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section `{name}`")))
    };
    let router = RouterParams {
        feature_spec: spec,
        shared_encoder: mlp_from_section(by_name("router.shared_encoder")?)?,
        candidate_encoder: mlp_from_section(by_name("router.candidate_encoder")?)?,
        routing_head: mlp_from_section(by_name("router.routing_head")?)?,
    };
    router
        .validate()
        .map_err(|e| Error::Checkpoint(format!("router: {e}")))?;

    let mut bootstrap = Vec::with_capacity(n_bootstrap);
    for idx in 0..n_bootstrap {
        bootstrap.push(expert_from_sections(
            &sections,
            &format!("bootstrap{idx}"),
            spec,
            k_modes,
        )?);
    }

    let provenance = Provenance {
        dataset_tag: text(meta, "dataset_tag")?.to_string(),
        seed,
        epochs: scalar(meta, "provenance_epochs")? as usize,
    };

    let ensemble = TrainedEnsemble {
        expert,
        router,
        bootstrap,
        variance_threshold,
        train_config,
        provenance,
    };
    ensemble
        .validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(ensemble)
}

/// Write an ensemble checkpoint file.
pub fn save_ensemble(path: impl AsRef<Path>, ensemble: &TrainedEnsemble) -> Result<()> {
    let bytes = encode_ensemble(ensemble);
    let mut writer = BufWriter::new(File::create(path.as_ref())?);
    writer.write_all(&bytes)?;
    writer.flush()?;
    Ok(())
}

/// Read an ensemble checkpoint file.
pub fn load_ensemble(path: impl AsRef<Path>) -> Result<TrainedEnsemble> {
    let mut bytes = Vec::new();
    File::open(path.as_ref())?.read_to_end(&mut bytes)?;
    decode_ensemble(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{attach_bootstrap, train_with_dims, ModelDims, PairingMode};
    use crate::scenariogen::{generate, DistributionSpec};
    use crate::scene::HorizonSpec;

    fn trained() -> TrainedEnsemble {
        let horizon = HorizonSpec::new(4, 6, 0.1).unwrap();
        let spec = DistributionSpec::family_a(horizon);
        let dataset = generate(&spec, 16, 5).unwrap();
        let config = TrainConfig {
            epochs: 1,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let dims = ModelDims {
            k_modes: 2,
            embed_width: 12,
            attr_width: 4,
            pairing: PairingMode::PerMode,
        };
        let mut output = train_with_dims(&dataset, &config, dims).unwrap();
        attach_bootstrap(&mut output, &dataset, dims, 3).unwrap();
        output.ensemble
    }

    #[test]
    fn round_trip_is_exact() {
        let ensemble = trained();
        let bytes = encode_ensemble(&ensemble);
        assert_eq!(&bytes[..4], b"APE1");
        let decoded = decode_ensemble(&bytes).unwrap();
        assert_eq!(decoded, ensemble);
        // Bit-exact weights.
        let a: Vec<u64> = ensemble
            .expert
            .encoder
            .flatten_params()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let b: Vec<u64> = decoded
            .expert
            .encoder
            .flatten_params()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn encoding_is_deterministic() {
        let ensemble = trained();
        assert_eq!(encode_ensemble(&ensemble), encode_ensemble(&ensemble));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let ensemble = trained();
        let mut bytes = encode_ensemble(&ensemble);
        bytes[0] = b'X';
        assert!(decode_ensemble(&bytes).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let ensemble = trained();
        let bytes = encode_ensemble(&ensemble);

        // Corrupt the first dims field of the expert encoder weights: find
        // the section, then entry header, then flip the out_dim.
        let needle = b"expert.encoder";
        let section_at = bytes
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        // section name | u32 n_entries | u32 name_len | "layer0.weights" |
        // kind u8 | u32 ndim | u64 dim0 ...
        let entry_name = b"layer0.weights";
        let entry_at = bytes[section_at..]
            .windows(entry_name.len())
            .position(|w| w == entry_name)
            .unwrap()
            + section_at;
        let dim0_at = entry_at + entry_name.len() + 1 + 4;
        let mut corrupted = bytes.clone();
        let bad = 9999u64.to_le_bytes();
        corrupted[dim0_at..dim0_at + 8].copy_from_slice(&bad);
        assert!(decode_ensemble(&corrupted).is_err());

        // Truncation is also rejected.
        let truncated = &bytes[..bytes.len() / 2];
        assert!(decode_ensemble(truncated).is_err());
    }

    #[test]
    fn file_round_trip() {
        let ensemble = trained();
        let dir = std::env::temp_dir().join(format!("ape-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ape");
        save_ensemble(&path, &ensemble).unwrap();
        let loaded = load_ensemble(&path).unwrap();
        assert_eq!(loaded, ensemble);
        std::fs::remove_dir_all(&dir).ok();
    }
}
