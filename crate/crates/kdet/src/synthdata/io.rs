//! Dataset interchange format.
//!
//! A dataset directory holds:
//! - `manifest.json`: `{image_size, count, seed, domain, labeled}`
//! - `images.bin`: `count` images of `3 * size * size` little-endian f32
//!   values, planar RGB, in annotation order
//! - `annotations.jsonl`: one `{id, boxes: [{cx, cy, w, h, class, score?}]}`
//!   line per image (empty `boxes` for unlabeled data; `score` is omitted
//!   for ground truth and present for model-generated labels)
//! - `hidden_annotations.jsonl` (optional): held-back ground truth of
//!   unlabeled splits, same schema, read only by evaluation code

use super::{Dataset, Domain, Image, Sample};
use crate::audit::{self, AuditLog};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct Manifest {
    image_size: usize,
    count: usize,
    seed: u64,
    domain: Domain,
    labeled: bool,
}

#[derive(Serialize, Deserialize)]
struct AnnotationLine {
    id: String,
    boxes: Vec<BoxRecord>,
}

#[derive(Serialize, Deserialize)]
struct BoxRecord {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    class: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
}

impl From<&BBox> for BoxRecord {
    fn from(b: &BBox) -> Self {
        BoxRecord {
            cx: b.cx,
            cy: b.cy,
            w: b.w,
            h: b.h,
            class: b.class_id,
            score: if b.score == 1.0 { None } else { Some(b.score) },
        }
    }
}

impl From<&BoxRecord> for BBox {
    fn from(r: &BoxRecord) -> Self {
        BBox::new(r.cx, r.cy, r.w, r.h, r.class, r.score.unwrap_or(1.0))
    }
}

fn annotation_lines(pairs: impl Iterator<Item = (String, Vec<BoxRecord>)>) -> String {
    let mut out = String::new();
    for (id, boxes) in pairs {
        let line = AnnotationLine { id, boxes };
        out.push_str(&serde_json::to_string(&line).expect("annotation serializes"));
        out.push('\n');
    }
    out
}

/// Write a dataset directory; see the module docs for the layout.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let manifest = Manifest {
        image_size: ds.image_size,
        count: ds.samples.len(),
        seed: ds.seed,
        domain: ds.domain,
        labeled: ds.labeled,
    };
    let mpath = dir.join("manifest.json");
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| Error::io(&mpath, e))?;

    let ipath = dir.join("images.bin");
    {
        let file = std::fs::File::create(&ipath).map_err(|e| Error::io(&ipath, e))?;
        let mut w = std::io::BufWriter::new(file);
        for s in &ds.samples {
            for v in &s.image.data {
                w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&ipath, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&ipath, e))?;
    }

    let apath = dir.join("annotations.jsonl");
    let text = annotation_lines(
        ds.samples
            .iter()
            .map(|s| (s.id.clone(), s.boxes.iter().map(BoxRecord::from).collect())),
    );
    std::fs::write(&apath, text).map_err(|e| Error::io(&apath, e))?;

    if ds.samples.iter().any(|s| s.hidden_boxes.is_some()) {
        let hpath = dir.join("hidden_annotations.jsonl");
        let text = annotation_lines(ds.samples.iter().map(|s| {
            (
                s.id.clone(),
                s.hidden_boxes
                    .as_deref()
                    .unwrap_or(&[])
                    .iter()
                    .map(BoxRecord::from)
                    .collect(),
            )
        }));
        std::fs::write(&hpath, text).map_err(|e| Error::io(&hpath, e))?;
    }
    Ok(())
}

fn parse_annotation_file(path: &Path) -> Result<Vec<(String, Vec<BBox>)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let parsed: AnnotationLine = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                offset: format!("line {}", i + 1),
                detail: e.to_string(),
            })?;
            Ok((
                parsed.id,
                parsed.boxes.iter().map(BBox::from).collect(),
            ))
        })
        .collect()
}

/// Read a dataset directory. Hidden annotations are *not* loaded; use
/// [`read_hidden_annotations`] + [`attach_hidden`] when evaluation needs
/// them. Every file access is recorded on the audit log.
pub fn read_dataset(dir: &Path, audit: &AuditLog) -> Result<Dataset> {
    let mpath = dir.join("manifest.json");
    let mtext = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&mtext).map_err(|e| Error::Parse {
        path: mpath.clone(),
        offset: "manifest".into(),
        detail: e.to_string(),
    })?;

    let apath = dir.join("annotations.jsonl");
    let annotations = parse_annotation_file(&apath)?;
    audit.record(audit::READ_ANNOTATIONS, &apath.display().to_string());
    if annotations.len() != manifest.count {
        return Err(Error::Parse {
            path: apath,
            offset: format!("line {}", annotations.len()),
            detail: format!(
                "{} annotation lines, manifest promises {}",
                annotations.len(),
                manifest.count
            ),
        });
    }

    let ipath = dir.join("images.bin");
    let bytes = std::fs::read(&ipath).map_err(|e| Error::io(&ipath, e))?;
    audit.record(audit::READ_IMAGES, &ipath.display().to_string());
    let per_image = 3 * manifest.image_size * manifest.image_size;
    let expect = manifest.count * per_image * 4;
    if bytes.len() != expect {
        return Err(Error::Parse {
            path: ipath,
            offset: format!("byte {}", bytes.len().min(expect)),
            detail: format!("{} bytes, expected {}", bytes.len(), expect),
        });
    }

    let samples = annotations
        .into_iter()
        .enumerate()
        .map(|(i, (id, boxes))| {
            let mut data = Vec::with_capacity(per_image);
            let base = i * per_image * 4;
            for p in 0..per_image {
                let mut buf = [0u8; 4];
                buf.copy_from_slice(&bytes[base + p * 4..base + p * 4 + 4]);
                data.push(f32::from_le_bytes(buf));
            }
            Sample {
                id,
                image: Image {
                    size: manifest.image_size,
                    data,
                },
                boxes,
                hidden_boxes: None,
                domain: manifest.domain,
            }
        })
        .collect();

    Ok(Dataset {
        image_size: manifest.image_size,
        seed: manifest.seed,
        domain: manifest.domain,
        labeled: manifest.labeled,
        samples,
    })
}

/// Load the held-back ground truth of an unlabeled split.
pub fn read_hidden_annotations(dir: &Path, audit: &AuditLog) -> Result<Vec<(String, Vec<BBox>)>> {
    let hpath = dir.join("hidden_annotations.jsonl");
    let parsed = parse_annotation_file(&hpath)?;
    audit.record(audit::READ_HIDDEN_ANNOTATIONS, &hpath.display().to_string());
    Ok(parsed)
}

/// Attach hidden annotations (by sample id) to a dataset in place.
pub fn attach_hidden(ds: &mut Dataset, hidden: Vec<(String, Vec<BBox>)>) -> Result<()> {
    let map: std::collections::HashMap<String, Vec<BBox>> = hidden.into_iter().collect();
    for s in &mut ds.samples {
        match map.get(&s.id) {
            Some(boxes) => s.hidden_boxes = Some(boxes.clone()),
            None => {
                return Err(Error::invalid(
                    "attach_hidden",
                    format!("no hidden annotations for sample {}", s.id),
                ))
            }
        }
    }
    Ok(())
}

/// Content hash over images and visible annotations, for run records.
pub fn data_hash(ds: &Dataset) -> String {
    let mut hasher = Sha256::new();
    for s in &ds.samples {
        hasher.update(s.id.as_bytes());
        for v in &s.image.data {
            hasher.update(v.to_le_bytes());
        }
        for b in &s.boxes {
            hasher.update(b.cx.to_le_bytes());
            hasher.update(b.cy.to_le_bytes());
            hasher.update(b.w.to_le_bytes());
            hasher.update(b.h.to_le_bytes());
            hasher.update(b.class_id.to_le_bytes());
            hasher.update(b.score.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{gen_dataset, SceneConfig};

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = SceneConfig {
            seed: 13,
            ..Default::default()
        };
        for labeled in [true, false] {
            let ds = gen_dataset(&cfg, 8, labeled).unwrap();
            let dir = tempfile::tempdir().unwrap();
            write_dataset(&ds, dir.path()).unwrap();
            let audit = AuditLog::new();
            let mut back = read_dataset(dir.path(), &audit).unwrap();
            if !labeled {
                let hidden = read_hidden_annotations(dir.path(), &audit).unwrap();
                attach_hidden(&mut back, hidden).unwrap();
            }
            assert_eq!(ds, back);
            // Writing the reread dataset reproduces identical bytes.
            let dir2 = tempfile::tempdir().unwrap();
            write_dataset(&back, dir2.path()).unwrap();
            for name in ["manifest.json", "images.bin", "annotations.jsonl"] {
                let a = std::fs::read(dir.path().join(name)).unwrap();
                let b = std::fs::read(dir2.path().join(name)).unwrap();
                assert_eq!(a, b, "{name} differs");
            }
        }
    }

    #[test]
    fn missing_annotations_is_an_error() {
        let cfg = SceneConfig::default();
        let ds = gen_dataset(&cfg, 2, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("annotations.jsonl")).unwrap();
        assert!(read_dataset(dir.path(), &AuditLog::new()).is_err());
    }

    #[test]
    fn corrupt_files_name_file_and_offset() {
        let cfg = SceneConfig::default();
        let ds = gen_dataset(&cfg, 2, true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();

        // Garbage annotation line.
        let apath = dir.path().join("annotations.jsonl");
        let mut text = std::fs::read_to_string(&apath).unwrap();
        text.push_str("{not json\n");
        std::fs::write(&apath, text).unwrap();
        let err = read_dataset(dir.path(), &AuditLog::new()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("annotations.jsonl") && msg.contains("line 3"), "{msg}");

        // Truncated image payload.
        let ds2 = gen_dataset(&cfg, 2, true).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(&ds2, dir2.path()).unwrap();
        let ipath = dir2.path().join("images.bin");
        let bytes = std::fs::read(&ipath).unwrap();
        std::fs::write(&ipath, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_dataset(dir2.path(), &AuditLog::new()).unwrap_err();
        assert!(err.to_string().contains("images.bin"));
    }

    #[test]
    fn hand_written_fixture_parses() {
        let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/mini_ds");
        let audit = AuditLog::new();
        let ds = read_dataset(&fixture, &audit).unwrap();
        assert_eq!(ds.image_size, 4);
        assert_eq!(ds.samples.len(), 1);
        assert!(ds.labeled);
        let s = &ds.samples[0];
        assert_eq!(s.id, "fixture0");
        // images.bin was authored as value (c*16 + p) / 64 per channel c,
        // pixel p.
        for c in 0..3 {
            for p in 0..16 {
                let want = (c * 16 + p) as f32 / 64.0;
                assert_eq!(s.image.data[c * 16 + p], want);
            }
        }
        assert_eq!(s.boxes.len(), 2);
        assert_eq!(s.boxes[0], BBox::new(0.5, 0.5, 0.25, 0.25, 0, 1.0));
        assert_eq!(s.boxes[1], BBox::new(0.25, 0.75, 0.5, 0.25, 1, 0.75));
    }

    #[test]
    fn data_hash_tracks_content() {
        let cfg = SceneConfig {
            seed: 1,
            ..Default::default()
        };
        let a = gen_dataset(&cfg, 4, true).unwrap();
        let b = gen_dataset(&cfg, 4, true).unwrap();
        assert_eq!(data_hash(&a), data_hash(&b));
        let c = gen_dataset(
            &SceneConfig {
                seed: 2,
                ..Default::default()
            },
            4,
            true,
        )
        .unwrap();
        assert_ne!(data_hash(&a), data_hash(&c));
    }
}
