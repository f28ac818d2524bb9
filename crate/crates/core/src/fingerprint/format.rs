//! Fingerprint dataset files.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! "ADFP" | u32 version=1 | u32 F | u32 template_count
//! per template: u16 name_len | name | u32 start | u32 end
//! u32 sample_count
//! per sample:   u8 label (0 benign, 1 malware, 2 unlabeled) | u8 provenance | u8 split | F x f32
//! ```
//!
//! An optional metadata trailer follows the samples: `"ADMD"` then, per
//! sample, `u16 app_id_len | app_id | u8 hidden_truth` (2 = none). Readers
//! that stop after the last sample see a plain version-1 file; without the
//! trailer app ids default to `app-<index>`.
//!
//! The JSON-lines twin holds one header object followed by one object per
//! sample, using the same field names and codes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Dataset, FeatureTemplate, Fingerprint, Label, LabeledSample, Provenance, Split,
    TemplateRegistry,
};
use crate::error::{AdamError, Result};
use crate::wire::Reader;

pub const MAGIC: &[u8; 4] = b"ADFP";
pub const VERSION: u32 = 1;
const TRAILER_MAGIC: &[u8; 4] = b"ADMD";

fn label_code(label: Option<Label>) -> u8 {
    match label {
        Some(Label::Benign) => 0,
        Some(Label::Malware) => 1,
        None => 2,
    }
}

fn label_from(code: u8) -> Result<Option<Label>> {
    match code {
        0 => Ok(Some(Label::Benign)),
        1 => Ok(Some(Label::Malware)),
        2 => Ok(None),
        c => Err(AdamError::MalformedHeader(format!("bad label code {c}"))),
    }
}

fn provenance_code(p: Provenance) -> u8 {
    match p {
        Provenance::System => 0,
        Provenance::User => 1,
        Provenance::Synthetic => 2,
    }
}

fn provenance_from(code: u8) -> Result<Provenance> {
    match code {
        0 => Ok(Provenance::System),
        1 => Ok(Provenance::User),
        2 => Ok(Provenance::Synthetic),
        c => Err(AdamError::MalformedHeader(format!(
            "bad provenance code {c}"
        ))),
    }
}

fn split_code(s: Split) -> u8 {
    match s {
        Split::Train => 0,
        Split::Validation => 1,
        Split::Test => 2,
    }
}

fn split_from(code: u8) -> Result<Split> {
    match code {
        0 => Ok(Split::Train),
        1 => Ok(Split::Validation),
        2 => Ok(Split::Test),
        c => Err(AdamError::MalformedHeader(format!("bad split code {c}"))),
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| AdamError::InvalidArgument(format!("{what} exceeds u32")))
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let f = ds.registry.total_features();
    let mut out = Vec::with_capacity(32 + ds.samples.len() * (3 + 4 * f));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(f, "F")?.to_le_bytes());
    out.extend_from_slice(&u32_of(ds.registry.templates().len(), "template count")?.to_le_bytes());
    for t in ds.registry.templates() {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len())
            .map_err(|_| AdamError::InvalidArgument("template name too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&u32_of(t.start, "start")?.to_le_bytes());
        out.extend_from_slice(&u32_of(t.end, "end")?.to_le_bytes());
    }
    out.extend_from_slice(&u32_of(ds.samples.len(), "sample count")?.to_le_bytes());
    for s in &ds.samples {
        out.push(label_code(s.label));
        out.push(provenance_code(s.provenance));
        out.push(split_code(s.split));
        for b in &s.fingerprint.bits {
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out.extend_from_slice(TRAILER_MAGIC);
    for s in &ds.samples {
        let id = s.fingerprint.app_id.as_bytes();
        let len = u16::try_from(id.len())
            .map_err(|_| AdamError::InvalidArgument("app id too long".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(id);
        out.push(label_code(s.hidden_truth));
    }
    Ok(out)
}

/// Decodes a binary fingerprint file. Never panics on arbitrary input.
pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(AdamError::MalformedHeader("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(AdamError::MalformedHeader(format!(
            "unsupported version {version}"
        )));
    }
    let f = r.u32("feature count")? as usize;
    let n_templates = r.u32("template count")? as usize;
    // each template needs at least 10 bytes
    if n_templates.saturating_mul(10) > r.remaining() {
        return Err(AdamError::Truncated("template table".into()));
    }
    let mut templates = Vec::with_capacity(n_templates);
    for _ in 0..n_templates {
        let len = r.u16("name length")? as usize;
        let name = r.string(len, "template name")?;
        let start = r.u32("template start")? as usize;
        let end = r.u32("template end")? as usize;
        templates.push(FeatureTemplate { name, start, end });
    }
    let registry = TemplateRegistry::from_templates(templates, f)?;
    let n_samples = r.u32("sample count")? as usize;
    let row = f
        .checked_mul(4)
        .and_then(|b| b.checked_add(3))
        .ok_or_else(|| AdamError::MalformedHeader("feature count overflows".into()))?;
    let body = n_samples
        .checked_mul(row)
        .ok_or_else(|| AdamError::MalformedHeader("sample count overflows".into()))?;
    if body > r.remaining() {
        // a row length that disagrees with F shows up as a short body
        if n_samples > 0 && r.remaining() % n_samples == 0 {
            let found_row = r.remaining() / n_samples;
            if found_row >= 3 && (found_row - 3) % 4 == 0 {
                return Err(AdamError::FeatureMismatch {
                    expected: f,
                    found: (found_row - 3) / 4,
                });
            }
        }
        return Err(AdamError::Truncated("sample rows".into()));
    }
    let mut samples = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let label = label_from(r.u8("label")?)?;
        let provenance = provenance_from(r.u8("provenance")?)?;
        let split = split_from(r.u8("split")?)?;
        let mut bits = Vec::with_capacity(f);
        for index in 0..f {
            let v = r.f32("bit")?;
            if v != 0.0 && v != 1.0 {
                return Err(AdamError::DomainViolation { index, value: v });
            }
            // canonicalise -0.0
            bits.push(if v == 0.0 { 0.0 } else { 1.0 });
        }
        samples.push(LabeledSample {
            fingerprint: Fingerprint {
                bits,
                app_id: format!("app-{i}"),
            },
            label,
            provenance,
            split,
            hidden_truth: None,
        });
    }
    if r.remaining() > 0 {
        if r.take(4, "trailer magic")? != TRAILER_MAGIC {
            return Err(AdamError::MalformedHeader(
                "trailing bytes after samples".into(),
            ));
        }
        for s in samples.iter_mut() {
            let len = r.u16("app id length")? as usize;
            s.fingerprint.app_id = r.string(len, "app id")?;
            s.hidden_truth = label_from(r.u8("hidden truth")?)?;
        }
        if r.remaining() > 0 {
            return Err(AdamError::MalformedHeader(
                "trailing bytes after metadata".into(),
            ));
        }
    }
    Dataset::new(registry, samples)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonHeader {
    magic: String,
    version: u32,
    #[serde(rename = "F")]
    f: usize,
    template_count: usize,
    templates: Vec<FeatureTemplate>,
    sample_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonSample {
    app_id: String,
    label: u8,
    provenance: u8,
    split: u8,
    bits: Vec<f32>,
    #[serde(default = "unlabeled_code")]
    hidden_truth: u8,
}

fn unlabeled_code() -> u8 {
    2
}

pub fn encode_dataset_jsonl(ds: &Dataset) -> Result<String> {
    ds.validate()?;
    let header = JsonHeader {
        magic: String::from_utf8_lossy(MAGIC).into_owned(),
        version: VERSION,
        f: ds.registry.total_features(),
        template_count: ds.registry.templates().len(),
        templates: ds.registry.templates().to_vec(),
        sample_count: ds.samples.len(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for s in &ds.samples {
        let line = JsonSample {
            app_id: s.fingerprint.app_id.clone(),
            label: label_code(s.label),
            provenance: provenance_code(s.provenance),
            split: split_code(s.split),
            bits: s.fingerprint.bits.clone(),
            hidden_truth: label_code(s.hidden_truth),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn decode_dataset_jsonl(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: JsonHeader = serde_json::from_str(
        lines
            .next()
            .ok_or_else(|| AdamError::MalformedHeader("empty document".into()))?,
    )
    .map_err(|e| AdamError::MalformedHeader(e.to_string()))?;
    if header.magic.as_bytes() != MAGIC || header.version != VERSION {
        return Err(AdamError::MalformedHeader("bad magic or version".into()));
    }
    if header.template_count != header.templates.len() {
        return Err(AdamError::MalformedHeader(
            "template_count disagrees with templates".into(),
        ));
    }
    let registry = TemplateRegistry::from_templates(header.templates, header.f)?;
    let mut samples = Vec::new();
    for line in lines {
        let s: JsonSample = serde_json::from_str(line)?;
        if s.bits.len() != header.f {
            return Err(AdamError::FeatureMismatch {
                expected: header.f,
                found: s.bits.len(),
            });
        }
        let fingerprint = Fingerprint::new(s.app_id, s.bits)?;
        samples.push(LabeledSample {
            fingerprint,
            label: label_from(s.label)?,
            provenance: provenance_from(s.provenance)?,
            split: split_from(s.split)?,
            hidden_truth: label_from(s.hidden_truth)?,
        });
    }
    if samples.len() != header.sample_count {
        return Err(AdamError::MalformedHeader(format!(
            "sample_count {} but {} rows",
            header.sample_count,
            samples.len()
        )));
    }
    Dataset::new(registry, samples)
}

/// Writes binary, or JSON lines when the extension is `.jsonl`.
pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if path.extension().is_some_and(|e| e == "jsonl") {
        fs::write(path, encode_dataset_jsonl(ds)?)?;
    } else {
        fs::write(path, encode_dataset(ds)?)?;
    }
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if path.extension().is_some_and(|e| e == "jsonl") {
        let text =
            String::from_utf8(bytes).map_err(|_| AdamError::MalformedHeader("not utf-8".into()))?;
        decode_dataset_jsonl(&text)
    } else {
        decode_dataset(&bytes)
    }
}
