//! On-disk dataset directory.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/<scene>/images.dvgt     f32 [T,N,H,W,3]
//! <dir>/<scene>/pointmaps.dvgt  f64 [T,N,H,W,3]
//! <dir>/<scene>/mask.dvgt       f32 [T,N,H,W] (0 or 1)
//! <dir>/<scene>/sparse.dvgt     f64 [M,4] rows (image index, x, y, z)
//! <dir>/<scene>/poses.json      [[tx,ty,tz,qw,qx,qy,qz], ...]
//! <dir>/<scene>/cameras.json    [CameraModel, ...]
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{SceneSample, SceneSpec};
use crate::error::{Error, Result};
use crate::geo3d::{CameraModel, EgoPose};
use dvgt_tensor::{io, Tensor};

pub const FORMAT_VERSION: &str = "dvgt-ds-1";
const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub name: String,
    /// Generator spec, when the clip came from `synthesize`.
    #[serde(default)]
    pub spec: Option<SceneSpec>,
    pub frames: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    /// Relative path → sha256 hex digest.
    pub files: BTreeMap<String, String>,
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `samples` (with optional generator specs) into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, samples: &[(SceneSample, Option<SceneSpec>)]) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut scenes = Vec::with_capacity(samples.len());
    for (k, (s, spec)) in samples.iter().enumerate() {
        let name = format!("scene_{k:05}");
        fs::create_dir_all(dir.join(&name))?;
        let mask = Tensor::new(
            vec![s.frames, s.views, s.height, s.width],
            s.valid_mask.iter().map(|&v| if v { 1.0f32 } else { 0.0 }).collect(),
        )?;
        let sparse_rows: Vec<f64> = s
            .sparse_points
            .iter()
            .enumerate()
            .flat_map(|(img, pts)| pts.iter().flat_map(move |p| [img as f64, p[0], p[1], p[2]]))
            .collect();
        let sparse = Tensor::new(vec![sparse_rows.len() / 4, 4], sparse_rows)?;
        let payloads: [(&str, Vec<u8>); 6] = [
            ("images.dvgt", io::encode(&s.images)),
            ("pointmaps.dvgt", io::encode(&s.pointmaps)),
            ("mask.dvgt", io::encode(&mask)),
            ("sparse.dvgt", io::encode(&sparse)),
            ("poses.json", serde_json::to_vec(&s.poses)?),
            ("cameras.json", serde_json::to_vec_pretty(&s.rig)?),
        ];
        let mut files = BTreeMap::new();
        for (file, bytes) in payloads {
            let rel = format!("{name}/{file}");
            fs::write(dir.join(&rel), &bytes)?;
            files.insert(rel, digest(&bytes));
        }
        scenes.push(SceneEntry {
            name,
            spec: spec.clone(),
            frames: s.frames,
            views: s.views,
            height: s.height,
            width: s.width,
            files,
        });
    }
    let manifest = DatasetManifest { format: FORMAT_VERSION.to_string(), scenes };
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Data(format!("dataset format {:?}, expected {FORMAT_VERSION:?}", manifest.format)));
    }
    Ok(manifest)
}

fn load(dir: &Path, entry: &SceneEntry, file: &str) -> Result<Vec<u8>> {
    let rel = format!("{}/{file}", entry.name);
    let expected = entry.files.get(&rel).ok_or_else(|| Error::Data(format!("manifest does not list {rel}")))?;
    let bytes = fs::read(dir.join(&rel)).map_err(|e| Error::Data(format!("{rel}: {e}")))?;
    if &digest(&bytes) != expected {
        return Err(Error::Data(format!("checksum mismatch for {rel}")));
    }
    Ok(bytes)
}

fn expect_shape(what: &str, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Data(format!("{what} has shape {got:?}, expected {want:?}")));
    }
    Ok(())
}

pub fn read_scene(dir: &Path, entry: &SceneEntry) -> Result<SceneSample> {
    let (t, n, h, w) = (entry.frames, entry.views, entry.height, entry.width);
    let images: Tensor<f32> = io::decode(&load(dir, entry, "images.dvgt")?)?;
    expect_shape("images", images.shape(), &[t, n, h, w, 3])?;
    let pointmaps: Tensor<f64> = io::decode(&load(dir, entry, "pointmaps.dvgt")?)?;
    expect_shape("pointmaps", pointmaps.shape(), &[t, n, h, w, 3])?;
    let mask: Tensor<f32> = io::decode(&load(dir, entry, "mask.dvgt")?)?;
    expect_shape("mask", mask.shape(), &[t, n, h, w])?;
    let sparse: Tensor<f64> = io::decode(&load(dir, entry, "sparse.dvgt")?)?;
    if sparse.rank() != 2 || sparse.shape()[1] != 4 {
        return Err(Error::Data(format!("sparse points have shape {:?}", sparse.shape())));
    }
    let poses: Vec<EgoPose> = serde_json::from_slice(&load(dir, entry, "poses.json")?)?;
    let rig: Vec<CameraModel> = serde_json::from_slice(&load(dir, entry, "cameras.json")?)?;
    if poses.len() != t || rig.len() != n {
        return Err(Error::Data(format!("{}: pose or camera count disagrees with the manifest", entry.name)));
    }
    let mut sparse_points = vec![Vec::new(); t * n];
    for row in sparse.data().chunks_exact(4) {
        let img = row[0] as usize;
        if row[0] < 0.0 || img >= t * n || img as f64 != row[0] {
            return Err(Error::Data(format!("{}: bad sparse image index {}", entry.name, row[0])));
        }
        sparse_points[img].push([row[1], row[2], row[3]]);
    }
    Ok(SceneSample {
        frames: t,
        views: n,
        height: h,
        width: w,
        images,
        pointmaps,
        valid_mask: mask.data().iter().map(|&v| v != 0.0).collect(),
        poses,
        rig,
        sparse_points,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let manifest = read_manifest(dir)?;
    manifest.scenes.iter().map(|e| read_scene(dir, e)).collect()
}
