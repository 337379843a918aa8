//! On-disk dataset format: `<base>.json` (header) + `<base>.bin` (raw
//! little-endian fp64 sections in header order). The loader validates the
//! byte length and every range invariant before handing the batch back.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::LabeledBatch;

const FORMAT_NAME: &str = "morphkit-batch";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BatchHeader {
    format: String,
    version: u32,
    shape: [usize; 4],
    num_classes: usize,
    num_groups: usize,
    /// Section names in payload order; each is fp64 little-endian.
    sections: Vec<String>,
}

fn paths_of(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("json"), base.with_extension("bin"))
}

/// Writes `<base>.json` + `<base>.bin`.
pub fn save_batch(base: &Path, batch: &LabeledBatch) -> Result<()> {
    batch.validate()?;
    let s = batch.images.shape();
    let mut sections = vec!["images".to_string(), "labels".to_string()];
    if batch.groups.is_some() {
        sections.push("groups".to_string());
    }
    if batch.fg_mask.is_some() {
        sections.push("fg_mask".to_string());
    }
    let header = BatchHeader {
        format: FORMAT_NAME.to_string(),
        version: FORMAT_VERSION,
        shape: [s[0], s[1], s[2], s[3]],
        num_classes: batch.num_classes,
        num_groups: batch.num_groups,
        sections,
    };
    let (json_path, bin_path) = paths_of(base);
    let mut payload: Vec<u8> =
        Vec::with_capacity(8 * (batch.images.numel() + batch.len() * 2));
    let mut push = |vals: &[f64]| {
        for v in vals {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    push(batch.images.data());
    push(&batch.labels.iter().map(|&l| l as f64).collect::<Vec<_>>());
    if let Some(groups) = &batch.groups {
        push(&groups.iter().map(|&g| g as f64).collect::<Vec<_>>());
    }
    if let Some(fg) = &batch.fg_mask {
        push(fg.data());
    }
    std::fs::write(&json_path, serde_json::to_vec_pretty(&header)?)?;
    std::fs::write(&bin_path, payload)?;
    Ok(())
}

fn section_len(name: &str, shape: &[usize; 4]) -> Result<usize> {
    let [n, h, w, c] = *shape;
    match name {
        "images" => Ok(n * h * w * c),
        "labels" | "groups" => Ok(n),
        "fg_mask" => Ok(n * h * w),
        other => Err(Error::format(format!("unknown dataset section {other:?}"))),
    }
}

fn to_indices(vals: &[f64], what: &str) -> Result<Vec<usize>> {
    vals.iter()
        .map(|&v| {
            if v.fract() == 0.0 && v >= 0.0 && v < u32::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::format(format!("{what} entry {v} is not a small non-negative integer")))
            }
        })
        .collect()
}

/// Loads a batch written by [`save_batch`].
pub fn load_batch(base: &Path) -> Result<LabeledBatch> {
    let (json_path, bin_path) = paths_of(base);
    let header: BatchHeader = serde_json::from_slice(&std::fs::read(&json_path)?)?;
    if header.format != FORMAT_NAME {
        return Err(Error::format(format!(
            "{} declares format {:?}, expected {FORMAT_NAME:?}",
            json_path.display(),
            header.format
        )));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "{} is version {}, this build reads version {FORMAT_VERSION}",
            json_path.display(),
            header.version
        )));
    }
    if header.sections.first().map(String::as_str) != Some("images")
        || header.sections.get(1).map(String::as_str) != Some("labels")
    {
        return Err(Error::format(format!(
            "{} sections must start with images, labels; got {:?}",
            json_path.display(),
            header.sections
        )));
    }
    let mut total = 0usize;
    for name in &header.sections {
        total += section_len(name, &header.shape)?;
    }
    let bytes = std::fs::read(&bin_path)?;
    if bytes.len() != total * 8 {
        return Err(Error::format(format!(
            "{} holds {} bytes, header implies {}",
            bin_path.display(),
            bytes.len(),
            total * 8
        )));
    }
    let vals: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunked by 8")))
        .collect();

    let [n, h, w, c] = header.shape;
    let mut offset = 0usize;
    let mut take = |len: usize| -> &[f64] {
        let s = &vals[offset..offset + len];
        offset += len;
        s
    };
    let images = Tensor::new(vec![n, h, w, c], take(n * h * w * c).to_vec())?;
    let labels = to_indices(take(n), "label")?;
    let mut batch = LabeledBatch {
        images,
        labels,
        num_classes: header.num_classes,
        groups: None,
        num_groups: header.num_groups,
        fg_mask: None,
    };
    for name in header.sections.iter().skip(2) {
        match name.as_str() {
            "groups" => batch.groups = Some(to_indices(take(n), "group")?),
            "fg_mask" => {
                let data = take(n * h * w);
                if data.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::format("foreground mask entries must be 0 or 1"));
                }
                batch.fg_mask = Some(Tensor::new(vec![n, h, w, 1], data.to_vec())?);
            }
            _ => unreachable!("validated by section_len"),
        }
    }
    batch.validate()?;
    Ok(batch)
}
