//! On-disk dataset layout.
//!
//! ```text
//! DIR/dataset.json                  {"categories": [...], "size": N}
//! DIR/{train,test}/NNNNN.json       sidecar: id, category, mask, label
//! DIR/{train,test}/NNNNN_rgb.miid   H×W×3 (only if the image is present)
//! DIR/{train,test}/NNNNN_pc.miid    H×W×3 (only if the point grid is present)
//! DIR/{train,test}/NNNNN_valid.miid H×W   (validity, 0/1)
//! DIR/{train,test}/NNNNN_gt.miid    H×W   (anomaly mask, 0/1)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GroundTruth, ImageLabel, MiiadDataset, ModalityMask, PointGrid, RgbImage, Sample};
use crate::error::{Error, Result};
use crate::tensor_io::Tensor;

#[derive(Serialize, Deserialize)]
struct Manifest {
    categories: Vec<String>,
    train: usize,
    test: usize,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    id: u64,
    category: String,
    mask: ModalityMask,
    label: ImageLabel,
    height: usize,
    width: usize,
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    mkdir(dir)?;
    for s in samples {
        let stem = format!("{:05}", s.id);
        let (h, w) = (s.height(), s.width());
        let sidecar = Sidecar {
            id: s.id,
            category: s.category.clone(),
            mask: s.mask,
            label: s.gt.label,
            height: h,
            width: w,
        };
        let path = dir.join(format!("{stem}.json"));
        fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))?;
        // Pseudo fills are not persisted; they are recreated on load when needed.
        if let (true, Some(rgb)) = (s.mask.has_rgb, &s.rgb) {
            Tensor::from_f64(vec![h, w, 3], &rgb.pixels).write(&dir.join(format!("{stem}_rgb.miid")))?;
        }
        if let (true, Some(pc)) = (s.mask.has_pc, &s.pc) {
            Tensor::from_f64(vec![h, w, 3], &pc.coords).write(&dir.join(format!("{stem}_pc.miid")))?;
            Tensor::from_bools(vec![h, w], &pc.validity)
                .write(&dir.join(format!("{stem}_valid.miid")))?;
        }
        Tensor::from_bools(vec![h, w], &s.gt.anomaly_mask)
            .write(&dir.join(format!("{stem}_gt.miid")))?;
    }
    Ok(())
}

fn expect_dims(t: &Tensor, dims: &[usize], path: &Path) -> Result<()> {
    if t.dims != dims {
        return Err(Error::TensorFormat {
            path: path.to_path_buf(),
            message: format!("expected dims {:?}, found {:?}", dims, t.dims),
        });
    }
    Ok(())
}

fn read_split(dir: &Path) -> Result<Vec<Sample>> {
    let mut sidecars: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    sidecars.sort();
    let mut out = Vec::with_capacity(sidecars.len());
    for path in sidecars {
        let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Sidecar = serde_json::from_slice(&text)?;
        let stem = format!("{:05}", meta.id);
        let (h, w) = (meta.height, meta.width);
        let rgb = if meta.mask.has_rgb {
            let p = dir.join(format!("{stem}_rgb.miid"));
            let t = Tensor::read(&p)?;
            expect_dims(&t, &[h, w, 3], &p)?;
            Some(RgbImage {
                height: h,
                width: w,
                pixels: t.to_f64(),
            })
        } else {
            None
        };
        let pc = if meta.mask.has_pc {
            let p = dir.join(format!("{stem}_pc.miid"));
            let t = Tensor::read(&p)?;
            expect_dims(&t, &[h, w, 3], &p)?;
            let vp = dir.join(format!("{stem}_valid.miid"));
            let v = Tensor::read(&vp)?;
            expect_dims(&v, &[h, w], &vp)?;
            Some(PointGrid {
                height: h,
                width: w,
                coords: t.to_f64(),
                validity: v.to_bools(),
            })
        } else {
            None
        };
        let gp = dir.join(format!("{stem}_gt.miid"));
        let gt = Tensor::read(&gp)?;
        expect_dims(&gt, &[h, w], &gp)?;
        out.push(Sample {
            id: meta.id,
            category: meta.category,
            rgb,
            pc,
            gt: GroundTruth {
                height: h,
                width: w,
                anomaly_mask: gt.to_bools(),
                label: meta.label,
            },
            mask: meta.mask,
        });
    }
    Ok(out)
}

pub fn save_dataset(ds: &MiiadDataset, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    let manifest = Manifest {
        categories: ds.categories.clone(),
        train: ds.train.len(),
        test: ds.test.len(),
    };
    let path = dir.join("dataset.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    write_split(&dir.join("train"), &ds.train)?;
    write_split(&dir.join("test"), &ds.test)
}

pub fn load_dataset(dir: &Path) -> Result<MiiadDataset> {
    let path = dir.join("dataset.json");
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    let train = read_split(&dir.join("train"))?;
    let test = read_split(&dir.join("test"))?;
    if train.len() != manifest.train || test.len() != manifest.test {
        return Err(Error::invalid(format!(
            "{}: manifest lists {}/{} samples, found {}/{}",
            dir.display(),
            manifest.train,
            manifest.test,
            train.len(),
            test.len()
        )));
    }
    Ok(MiiadDataset {
        train,
        test,
        categories: manifest.categories,
    })
}
