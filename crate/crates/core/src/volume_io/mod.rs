//! Volumes, semantic label maps and everything needed to get them from disk
//! into training batches.

mod manifest;
mod nifti;
mod toy;

pub use manifest::{
    make_batches, Batch, BatchPlan, Dataset, DatasetManifest, ManifestEntry, Sample,
};
pub use nifti::{
    load_map, load_volume, read_nifti, save_map, save_nifti, save_nifti_as, write_nifti,
    NiftiDtype, NiftiImage,
};
pub use toy::{generate_toy_dataset, generate_toy_samples, ToyParams, TOY_BACKGROUND_THRESHOLD};

pub(crate) use nifti::atomic_write;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Voxel intensities `(H, W, L, C)` with spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub data: Tensor<T>,
    pub spacing: [f64; 3],
    /// Intensity bounds observed before normalization.
    pub intensity_range: (f64, f64),
}

impl<T: Scalar> Volume<T> {
    /// Wrap a rank-4 array, recording its current min/max as the intensity range.
    pub fn new(data: Tensor<T>, spacing: [f64; 3]) -> Result<Self> {
        if data.rank() != 4 || data.shape().iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "volume must be (H, W, L, C) with all >= 1, got {:?}",
                data.shape()
            )));
        }
        if !data.all_finite() {
            return Err(Error::Domain("volume contains non-finite values".into()));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Domain(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        let (lo, hi) = data.min_max();
        Ok(Self {
            data,
            spacing,
            intensity_range: (lo.as_f64(), hi.as_f64()),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[3]
    }

    /// The data with a leading batch axis of 1: `[1, H, W, L, C]`.
    pub fn batched(&self) -> Tensor<T> {
        let mut s = vec![1];
        s.extend_from_slice(self.data.shape());
        self.data.clone().reshape(&s).expect("same element count")
    }

    /// Inverse of [`Volume::batched`] for one batch item.
    pub fn from_batched(t: &Tensor<T>, n: usize, spacing: [f64; 3]) -> Result<Self> {
        let item = t.batch_item(n);
        let s = item.shape()[1..].to_vec();
        let mut v = Volume::new(item.reshape(&s)?, spacing)?;
        v.intensity_range = (-1.0, 1.0);
        Ok(v)
    }
}

/// Integer class labels `(H, W, L)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    pub dims: [usize; 3],
    pub labels: Vec<u16>,
    pub num_classes: usize,
}

impl SemanticMap {
    pub fn new(dims: [usize; 3], labels: Vec<u16>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if dims.iter().product::<usize>() != labels.len() {
            return Err(Error::shape(format!(
                "{} labels for dims {dims:?}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidLabel {
                label: bad as i64,
                num_classes,
            });
        }
        Ok(Self {
            dims,
            labels,
            num_classes,
        })
    }

    pub fn get(&self, h: usize, w: usize, l: usize) -> u16 {
        self.labels[(h * self.dims[1] + w) * self.dims[2] + l]
    }

    pub fn count(&self, class: u16) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// Indicator encoding `(H, W, L, num_classes)`: channel `c` is 1 where the
/// label equals `c`.
pub fn one_hot<T: Scalar>(map: &SemanticMap) -> Result<Tensor<T>> {
    let k = map.num_classes;
    let [h, w, l] = map.dims;
    let mut out = Tensor::zeros(&[h, w, l, k]);
    let d = out.data_mut();
    for (i, &lab) in map.labels.iter().enumerate() {
        if lab as usize >= k {
            return Err(Error::InvalidLabel {
                label: lab as i64,
                num_classes: k,
            });
        }
        d[i * k + lab as usize] = T::one();
    }
    Ok(out)
}

/// Stack one-hot encodings of several maps into `[N, H, W, L, K]`.
pub fn one_hot_batch<T: Scalar>(maps: &[&SemanticMap]) -> Result<Tensor<T>> {
    let items = maps
        .iter()
        .map(|m| {
            let t = one_hot::<T>(m)?;
            let mut s = vec![1];
            s.extend_from_slice(t.shape());
            t.reshape(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

/// Crop each axis larger than the target around its centre.
fn center_crop<T: Copy>(
    data: &[T],
    dims: [usize; 3],
    c: usize,
    target: [usize; 3],
) -> (Vec<T>, [usize; 3]) {
    let mut out_dims = dims;
    let mut start = [0; 3];
    for a in 0..3 {
        if dims[a] > target[a] {
            start[a] = (dims[a] - target[a]) / 2;
            out_dims[a] = target[a];
        }
    }
    let mut out = Vec::with_capacity(out_dims.iter().product::<usize>() * c);
    for x in 0..out_dims[0] {
        for y in 0..out_dims[1] {
            for z in 0..out_dims[2] {
                let off = (((x + start[0]) * dims[1] + y + start[1]) * dims[2] + z + start[2]) * c;
                out.extend_from_slice(&data[off..off + c]);
            }
        }
    }
    (out, out_dims)
}

/// Half-pixel-centred source coordinate of output index `o` when resizing
/// an axis of length `n_in` to `n_out`.
fn source_coord(o: usize, n_in: usize, n_out: usize) -> f64 {
    let s = (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    s.clamp(0.0, (n_in - 1) as f64)
}

fn trilinear<T: Scalar>(data: &[T], dims: [usize; 3], c: usize, target: [usize; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(target.iter().product::<usize>() * c);
    let taps = |o: usize, a: usize| {
        let s = source_coord(o, dims[a], target[a]);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(dims[a] - 1);
        (i0, i1, s - i0 as f64)
    };
    for x in 0..target[0] {
        let (x0, x1, fx) = taps(x, 0);
        for y in 0..target[1] {
            let (y0, y1, fy) = taps(y, 1);
            for z in 0..target[2] {
                let (z0, z1, fz) = taps(z, 2);
                for ch in 0..c {
                    let at = |a: usize, b: usize, d: usize| {
                        data[((a * dims[1] + b) * dims[2] + d) * c + ch].as_f64()
                    };
                    let v = (1.0 - fx)
                        * ((1.0 - fy) * ((1.0 - fz) * at(x0, y0, z0) + fz * at(x0, y0, z1))
                            + fy * ((1.0 - fz) * at(x0, y1, z0) + fz * at(x0, y1, z1)))
                        + fx * ((1.0 - fy) * ((1.0 - fz) * at(x1, y0, z0) + fz * at(x1, y0, z1))
                            + fy * ((1.0 - fz) * at(x1, y1, z0) + fz * at(x1, y1, z1)));
                    out.push(T::lit(v));
                }
            }
        }
    }
    out
}

fn nearest<T: Copy>(data: &[T], dims: [usize; 3], c: usize, target: [usize; 3]) -> Vec<T> {
    let idx = |o: usize, a: usize| source_coord(o, dims[a], target[a]).round() as usize;
    let mut out = Vec::with_capacity(target.iter().product::<usize>() * c);
    for x in 0..target[0] {
        for y in 0..target[1] {
            for z in 0..target[2] {
                let off = ((idx(x, 0) * dims[1] + idx(y, 1)) * dims[2] + idx(z, 2)) * c;
                out.extend_from_slice(&data[off..off + c]);
            }
        }
    }
    out
}

/// Bring a volume to `target` spatial shape and map its intensities to
/// `[-1, 1]` with its own min/max. Axes larger than the target are
/// centre-cropped, smaller ones are trilinearly resampled. A volume already
/// at the target shape and spanning exactly `[-1, 1]` is returned unchanged.
pub fn preprocess<T: Scalar>(volume: &Volume<T>, target: [usize; 3]) -> Result<Volume<T>> {
    if target.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!(
            "target shape {target:?} has a zero axis"
        )));
    }
    let (lo, hi) = volume.data.min_max();
    if volume.dims() == target && lo == -T::one() && hi == T::one() {
        return Ok(volume.clone());
    }
    if !(hi > lo) {
        return Err(Error::Degenerate(format!(
            "constant-intensity volume (value {lo})"
        )));
    }
    let c = volume.channels();
    let (cropped, dims) = center_crop(volume.data.data(), volume.dims(), c, target);
    let resized = if dims == target {
        cropped
    } else {
        trilinear(&cropped, dims, c, target)
    };
    let two = T::lit(2.0);
    let span = hi - lo;
    let data: Vec<T> = resized
        .into_iter()
        .map(|v| (v - lo) / span * two - T::one())
        .collect();
    let tensor = Tensor::new(vec![target[0], target[1], target[2], c], data)?;
    Ok(Volume {
        data: tensor,
        spacing: volume.spacing,
        intensity_range: (lo.as_f64(), hi.as_f64()),
    })
}

/// Label-map counterpart of [`preprocess`]: centre-crop, then
/// nearest-neighbour resampling so labels stay integral.
pub fn preprocess_map(map: &SemanticMap, target: [usize; 3]) -> Result<SemanticMap> {
    if map.dims == target {
        return Ok(map.clone());
    }
    let (cropped, dims) = center_crop(&map.labels, map.dims, 1, target);
    let labels = if dims == target {
        cropped
    } else {
        nearest(&cropped, dims, 1, target)
    };
    SemanticMap::new(target, labels, map.num_classes)
}
