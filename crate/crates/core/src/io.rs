//! File formats.
//!
//! - Annotations: one JSON object per line, see [`AnnotationRecord`].
//! - Maps (`.pacm`): `b"PACM"`, version byte, `u32` width, `u32` height,
//!   then row-major little-endian `f32` values.
//! - Heatmaps: binary 8-bit PGM, min mapped to 0 and max to 255.
//! - Dataset directory: `annotations.jsonl` plus `images/<id>.pacm`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnnotatedScene, CameraModel, RoiMask};
use crate::map::ValueMap;
use crate::scalar::Real;

pub const MAP_MAGIC: &[u8; 4] = b"PACM";
pub const MAP_VERSION: u8 = 1;
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const IMAGES_DIR: &str = "images";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub focal_length: f64,
    pub camera_height: f64,
    pub person_height: f64,
}

/// One annotation line. `roi` lists `[start, length]` runs of inside pixels
/// in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub heads: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<Vec<[usize; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera: Option<CameraRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon_rows: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_head_scale: Option<Vec<f64>>,
}

pub fn roi_to_runs(roi: &RoiMask) -> Vec<[usize; 2]> {
    let mut runs = Vec::new();
    let mut i = 0;
    while i < roi.inside.len() {
        if roi.inside[i] {
            let start = i;
            while i < roi.inside.len() && roi.inside[i] {
                i += 1;
            }
            runs.push([start, i - start]);
        } else {
            i += 1;
        }
    }
    runs
}

pub fn roi_from_runs(width: usize, height: usize, runs: &[[usize; 2]]) -> Result<RoiMask> {
    let mut inside = vec![false; width * height];
    for &[start, len] in runs {
        let end = start.checked_add(len).filter(|&e| e <= inside.len()).ok_or_else(|| {
            Error::Format(format!("roi run [{start}, {len}] outside {width}x{height}"))
        })?;
        inside[start..end].iter_mut().for_each(|v| *v = true);
    }
    Ok(RoiMask { width, height, inside })
}

impl AnnotationRecord {
    pub fn from_scene(s: &AnnotatedScene) -> Self {
        AnnotationRecord {
            id: s.id.clone(),
            width: s.width,
            height: s.height,
            heads: s.heads.iter().map(|&(x, y)| [x, y]).collect(),
            roi: s.roi.as_ref().map(roi_to_runs),
            camera: s.camera.map(|c| CameraRecord {
                focal_length: c.focal_length,
                camera_height: c.camera_height,
                person_height: c.person_height,
            }),
            horizon_rows: s.horizon_rows,
            per_head_scale: s.per_head_scale.clone(),
        }
    }

    pub fn into_scene(self) -> Result<AnnotatedScene> {
        let roi = self.roi.as_deref().map(|r| roi_from_runs(self.width, self.height, r)).transpose()?;
        let camera = self
            .camera
            .map(|c| CameraModel::new(c.focal_length, c.camera_height, c.person_height))
            .transpose()?;
        let scene = AnnotatedScene {
            id: self.id,
            width: self.width,
            height: self.height,
            heads: self.heads.into_iter().map(|[x, y]| (x, y)).collect(),
            roi,
            camera,
            horizon_rows: self.horizon_rows,
            per_head_scale: self.per_head_scale,
            image: None,
        };
        scene.validate()?;
        Ok(scene)
    }
}

pub fn write_annotations(mut w: impl Write, scenes: &[AnnotatedScene]) -> Result<()> {
    for s in scenes {
        let line = serde_json::to_string(&AnnotationRecord::from_scene(s))
            .map_err(|e| Error::Format(format!("annotation {}: {e}", s.id)))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Scenes from annotation lines; blank lines are skipped. Images are not loaded.
pub fn read_annotations(r: impl BufRead) -> Result<Vec<AnnotatedScene>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("annotation line {}: {e}", i + 1)))?;
        out.push(rec.into_scene()?);
    }
    Ok(out)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotatedScene>> {
    read_annotations(BufReader::new(File::open(path)?))
}

pub fn write_map<T: Real>(mut w: impl Write, map: &ValueMap<T>) -> Result<()> {
    let (mw, mh) = (u32::try_from(map.width), u32::try_from(map.height));
    let (Ok(mw), Ok(mh)) = (mw, mh) else {
        return Err(Error::Format("map too large".into()));
    };
    let mut buf = Vec::with_capacity(13 + 4 * map.len());
    buf.extend_from_slice(MAP_MAGIC);
    buf.push(MAP_VERSION);
    buf.extend_from_slice(&mw.to_le_bytes());
    buf.extend_from_slice(&mh.to_le_bytes());
    for v in &map.values {
        let f = v.to_f32().unwrap_or(f32::NAN);
        buf.extend_from_slice(&f.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_map<T: Real>(mut r: impl Read) -> Result<ValueMap<T>> {
    let mut head = [0u8; 13];
    r.read_exact(&mut head).map_err(|e| Error::Format(format!("map header: {e}")))?;
    if &head[..4] != MAP_MAGIC {
        return Err(Error::Format("not a PACM map".into()));
    }
    if head[4] != MAP_VERSION {
        return Err(Error::Format(format!("unsupported map version {}", head[4])));
    }
    let w = u32::from_le_bytes(head[5..9].try_into().expect("4 bytes")) as usize;
    let h = u32::from_le_bytes(head[9..13].try_into().expect("4 bytes")) as usize;
    let n = w.checked_mul(h).ok_or_else(|| Error::Format("map size overflow".into()))?;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != 4 * n {
        return Err(Error::Format(format!("map {w}x{h} needs {} bytes, found {}", 4 * n, body.len())));
    }
    let values = body.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)).collect();
    ValueMap::from_vec(w, h, values)
}

pub fn save_map<T: Real>(path: impl AsRef<Path>, map: &ValueMap<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_map(&mut w, map)?;
    w.flush()?;
    Ok(())
}

pub fn load_map<T: Real>(path: impl AsRef<Path>) -> Result<ValueMap<T>> {
    read_map(BufReader::new(File::open(path)?))
}

/// 8-bit grey levels, min to 0 and max to 255; a constant map is all 0.
pub fn heatmap_levels<T: Real>(map: &ValueMap<T>) -> Vec<u8> {
    let lo = map.min_value().as_f64();
    let hi = map.max_value().as_f64();
    let span = hi - lo;
    map.values
        .iter()
        .map(|v| if span > 0.0 { ((v.as_f64() - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect()
}

pub fn write_pgm<T: Real>(mut w: impl Write, map: &ValueMap<T>) -> Result<()> {
    write!(w, "P5\n{} {}\n255\n", map.width, map.height)?;
    w.write_all(&heatmap_levels(map))?;
    Ok(())
}

pub fn save_pgm<T: Real>(path: impl AsRef<Path>, map: &ValueMap<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pgm(&mut w, map)?;
    w.flush()?;
    Ok(())
}

/// Write annotations and every available image under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, scenes: &[AnnotatedScene]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join(IMAGES_DIR))?;
    let mut w = BufWriter::new(File::create(dir.join(ANNOTATIONS_FILE))?);
    write_annotations(&mut w, scenes)?;
    w.flush()?;
    for s in scenes {
        if let Some(img) = &s.image {
            save_map(dir.join(IMAGES_DIR).join(format!("{}.pacm", s.id)), img)?;
        }
    }
    Ok(())
}

/// Read a dataset directory; images are attached where present.
pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Vec<AnnotatedScene>> {
    let dir = dir.as_ref();
    let mut scenes = load_annotations(dir.join(ANNOTATIONS_FILE))?;
    for s in &mut scenes {
        let p = dir.join(IMAGES_DIR).join(format!("{}.pacm", s.id));
        if p.exists() {
            let img: ValueMap<f32> = load_map(&p)?;
            if img.width != s.width || img.height != s.height {
                return Err(Error::Shape(format!("image for {} is {}x{}", s.id, img.width, img.height)));
            }
            s.image = Some(img);
        }
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_dataset, SceneConfig};

    #[test]
    fn map_round_trip_is_bit_exact() {
        let m = ValueMap::from_fn(7, 3, |x, y| (x as f32 * 0.1 - y as f32).sin() * 1e3);
        let mut buf = Vec::new();
        write_map(&mut buf, &m).unwrap();
        assert_eq!(buf.len(), 13 + 4 * 21);
        let back: ValueMap<f32> = read_map(&buf[..]).unwrap();
        let bits = |m: &ValueMap<f32>| m.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
        assert!(read_map::<f32>(&b"PACX\x01"[..]).is_err());
        assert!(read_map::<f32>(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_map::<f32>(&bad[..]).is_err());
    }

    #[test]
    fn annotation_round_trip() {
        let mut scenes = generate_dataset(&SceneConfig::default(), 3, 4).unwrap();
        let mut roi = RoiMask::full(64, 64);
        roi.inside[0..100].iter_mut().for_each(|v| *v = false);
        roi.inside[4000] = false;
        scenes[1].roi = Some(roi);
        scenes[2].heads.push((0.1 + 0.2, 1.0 / 3.0));
        scenes[2].per_head_scale.as_mut().unwrap().push(std::f64::consts::PI);
        let mut buf = Vec::new();
        write_annotations(&mut buf, &scenes).unwrap();
        let back = read_annotations(&buf[..]).unwrap();
        for (a, b) in scenes.iter().zip(&back) {
            let mut a = a.clone();
            a.image = None;
            assert_eq!(&a, b);
        }
        assert!(read_annotations(&b"{\"id\": 1}\n"[..]).is_err());
    }

    #[test]
    fn roi_runs() {
        let mut r = RoiMask::full(4, 2);
        r.inside[1] = false;
        r.inside[2] = false;
        assert_eq!(roi_to_runs(&r), vec![[0, 1], [3, 5]]);
        assert_eq!(roi_from_runs(4, 2, &roi_to_runs(&r)).unwrap(), r);
        assert!(roi_from_runs(4, 2, &[[6, 5]]).is_err());
    }

    #[test]
    fn pgm_levels() {
        let m = ValueMap::from_vec(3, 1, vec![-1.0f64, 0.0, 3.0]).unwrap();
        assert_eq!(heatmap_levels(&m), vec![0, 64, 255]);
        let mut buf = Vec::new();
        write_pgm(&mut buf, &m).unwrap();
        assert!(buf.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(heatmap_levels(&ValueMap::filled(2, 2, 5.0f64)), vec![0; 4]);
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_dataset(&SceneConfig::default(), 8, 3).unwrap();
        write_dataset(dir.path(), &scenes).unwrap();
        assert_eq!(read_dataset(dir.path()).unwrap(), scenes);
    }
}
