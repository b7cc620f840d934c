//! Dataset directory: `manifest.json` plus one `scene_<id>.bin` per scene.
//!
//! ```text
//! "DACLSCN" | W u32 | H u32 | N u32 | W*H x f64 image | W*H x u8 labels
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::split::{render, DatasetSplit, SplitPlan};
use super::{SceneConfig, SceneMeta, ToyScene};
use crate::error::{DaclError, Result};
use crate::metrics::LabelMap;

pub const SCENE_MAGIC: &[u8; 7] = b"DACLSCN";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub n_scenes: usize,
    pub labeled_fraction: f64,
    pub seed: u64,
    pub scene_config: SceneConfig,
    pub split: SplitPlan,
}

pub fn write_scene<W: Write>(scene: &ToyScene, mut w: W) -> Result<()> {
    w.write_all(SCENE_MAGIC)?;
    for v in [scene.width, scene.height, scene.num_classes] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for x in &scene.image {
        w.write_all(&x.to_le_bytes())?;
    }
    w.write_all(&scene.label.labels)?;
    Ok(())
}

/// Reads the pixel payload; shape metadata is not stored in the file.
pub fn read_scene<R: Read>(id: u64, mut r: R) -> Result<ToyScene> {
    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if &magic != SCENE_MAGIC {
        return Err(DaclError::Format("not a DACLSCN file".into()));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let [width, height, num_classes] = dims;
    let n = width * height;
    let mut image = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        image.push(f64::from_le_bytes(b));
    }
    let mut labels = vec![0u8; n];
    r.read_exact(&mut labels)?;
    if labels.iter().any(|&l| l as usize >= num_classes) {
        return Err(DaclError::Format(format!("scene {id} has a label >= {num_classes}")));
    }
    Ok(ToyScene {
        id,
        width,
        height,
        num_classes,
        image,
        label: LabelMap::new(width, height, labels)?,
        meta: SceneMeta { shapes: Vec::new(), noise_sigma: f64::NAN, blur: f64::NAN, seed: 0 },
    })
}

fn scene_path(dir: &Path, id: u64) -> std::path::PathBuf {
    dir.join(format!("scene_{id}.bin"))
}

/// Writes every scene of `split` and the manifest into `dir`.
pub fn save_dataset(dir: &Path, split: &DatasetSplit, manifest: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in split.labeled.iter().chain(&split.unlabeled).chain(&split.test) {
        let mut buf = Vec::new();
        write_scene(s, &mut buf)?;
        fs::write(scene_path(dir, s.id), buf)?;
    }
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(manifest)? + "\n")?;
    Ok(())
}

/// Loads a dataset directory. Scene metadata is regenerated from the seed
/// and checked against the stored pixels.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, DatasetSplit)> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let load = |ids: &[u64]| -> Result<Vec<ToyScene>> {
        let regenerated = render(ids, manifest.seed, &manifest.scene_config)?;
        ids.iter()
            .zip(regenerated)
            .map(|(&id, regen)| {
                let stored = read_scene(id, fs::File::open(scene_path(dir, id))?)?;
                if stored.image != regen.image || stored.label != regen.label {
                    return Err(DaclError::Format(format!("scene {id} does not match its manifest seed")));
                }
                Ok(regen)
            })
            .collect()
    };
    let split = DatasetSplit {
        labeled: load(&manifest.split.labeled)?,
        unlabeled: load(&manifest.split.unlabeled)?,
        test: load(&manifest.split.test)?,
        plan: manifest.split.clone(),
    };
    Ok((manifest, split))
}
