//! Volume storage: directories of index-ordered 16-bit grayscale PNG slices,
//! plus an in-memory cache so training loops do not re-decode files.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::{Array2, Array3};

use crate::dataset::{StudyManifest, VolumeRecord};
use crate::error::{Error, Result};

/// Zero-padded file name of slice `i` inside a volume directory.
pub fn slice_file_name(i: usize) -> String {
    format!("{i:03}.png")
}

/// One loaded volume: slices stacked along axis 0, stored as raw u16.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Volume {
    /// (n_slices, height, width)
    pub data: Array3<u16>,
}

impl Volume {
    pub fn n_slices(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Slice `z` as f32 in [0, 1].
    pub fn slice_f32(&self, z: usize) -> Array2<f32> {
        self.data
            .index_axis(ndarray::Axis(0), z)
            .map(|&v| f32::from(v) / 65535.0)
    }
}

pub fn load_slice_u16(path: impl AsRef<Path>) -> Result<Array2<u16>> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    let img = img.into_luma16();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    Array2::from_shape_vec((h as usize, w as usize), raw)
        .map_err(|e| Error::InvalidInput(format!("bad image shape: {e}")))
}

pub fn save_slice_u16(path: impl AsRef<Path>, slice: &Array2<u16>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = slice.dim();
    let raw: Vec<u16> = slice.iter().copied().collect();
    let img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_raw(w as u32, h as u32, raw)
        .ok_or_else(|| Error::InvalidInput("image buffer size mismatch".into()))?;
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Loads every slice of a volume directory. All slices must share one shape.
pub fn load_volume(root: &Path, record: &VolumeRecord) -> Result<Volume> {
    let dir = root.join(&record.path);
    let first = load_slice_u16(dir.join(slice_file_name(0)))?;
    let (h, w) = first.dim();
    let mut data = Array3::<u16>::zeros((record.n_slices, h, w));
    data.index_axis_mut(ndarray::Axis(0), 0).assign(&first);
    for z in 1..record.n_slices {
        let s = load_slice_u16(dir.join(slice_file_name(z)))?;
        if s.dim() != (h, w) {
            return Err(Error::InvalidInput(format!(
                "slice {z} of {} has shape {:?}, expected {:?}",
                dir.display(),
                s.dim(),
                (h, w)
            )));
        }
        data.index_axis_mut(ndarray::Axis(0), z).assign(&s);
    }
    Ok(Volume { data })
}

/// Writes a volume as a directory of PNG slices, creating the directory.
pub fn save_volume(dir: impl AsRef<Path>, volume: &Volume) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for z in 0..volume.n_slices() {
        let slice = volume.data.index_axis(ndarray::Axis(0), z).to_owned();
        save_slice_u16(dir.join(slice_file_name(z)), &slice)?;
    }
    Ok(())
}

/// Thread-safe lazy cache of decoded volumes, keyed by manifest entry index.
///
/// Entries are evicted FIFO once `capacity` volumes are resident; eviction
/// affects only speed, never values, so results stay deterministic.
pub struct VolumeCache {
    root: PathBuf,
    capacity: usize,
    inner: Mutex<CacheInner>,
}

struct CacheInner {
    map: HashMap<usize, Arc<Volume>>,
    order: std::collections::VecDeque<usize>,
}

impl VolumeCache {
    pub fn new(manifest: &StudyManifest) -> Self {
        Self::with_capacity(manifest, usize::MAX)
    }

    pub fn with_capacity(manifest: &StudyManifest, capacity: usize) -> Self {
        VolumeCache {
            root: manifest.root_path.clone(),
            capacity: capacity.max(1),
            inner: Mutex::new(CacheInner {
                map: HashMap::new(),
                order: std::collections::VecDeque::new(),
            }),
        }
    }

    pub fn get(&self, manifest: &StudyManifest, volume_index: usize) -> Result<Arc<Volume>> {
        if let Some(v) = self.inner.lock().unwrap().map.get(&volume_index) {
            return Ok(v.clone());
        }
        let record = manifest.entries.get(volume_index).ok_or_else(|| {
            Error::InvalidInput(format!("volume index {volume_index} out of range"))
        })?;
        let loaded = Arc::new(load_volume(&self.root, record)?);
        let mut inner = self.inner.lock().unwrap();
        // A concurrent loader may have won the race; keep the first copy.
        let entry = inner
            .map
            .entry(volume_index)
            .or_insert_with(|| loaded.clone())
            .clone();
        if entry.data.as_ptr() == loaded.data.as_ptr() {
            inner.order.push_back(volume_index);
            while inner.map.len() > self.capacity {
                if let Some(old) = inner.order.pop_front() {
                    inner.map.remove(&old);
                }
            }
        }
        Ok(entry)
    }
}
