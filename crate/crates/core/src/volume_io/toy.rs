//! Procedural paired dataset: smooth ellipsoidal structures on a noisy
//! background, one structure per foreground class.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{save_map, save_nifti, DatasetManifest, ManifestEntry, SemanticMap, Volume};

/// Background voxels never exceed this intensity; structure voxels always do.
pub const TOY_BACKGROUND_THRESHOLD: f64 = 0.2;

const BACKGROUND: f64 = 0.1;
const NOISE: f64 = 0.04;
const SPACING: [f64; 3] = [2.0, 2.0, 3.0];

#[derive(Debug, Clone, PartialEq)]
pub struct ToyParams {
    pub n: usize,
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub seed: u64,
    /// The last `n_test` samples are tagged `test`, the rest `train`.
    pub n_test: usize,
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    /// Squared normalized radius of a voxel centre; `<= 1` is inside.
    fn r2(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum()
    }
}

fn class_level(class: usize, num_classes: usize) -> f64 {
    if num_classes == 2 {
        0.7
    } else {
        0.45 + 0.45 * (class - 1) as f64 / (num_classes - 2) as f64
    }
}

fn radii(rng: &mut ChaCha8Rng, shape: [usize; 3], frac: [(f64, f64); 3]) -> [f64; 3] {
    let mut r = [0.0; 3];
    for a in 0..3 {
        r[a] = (rng.gen_range(frac[a].0..frac[a].1) * shape[a] as f64).max(1.0);
    }
    r
}

fn fitting_center(rng: &mut ChaCha8Rng, shape: [usize; 3], radii: [f64; 3]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for a in 0..3 {
        let lo = radii[a].min((shape[a] - 1) as f64 / 2.0);
        let hi = ((shape[a] - 1) as f64 - radii[a]).max(lo);
        c[a] = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    }
    c
}

/// One sample: raw intensities in roughly `[0.06, 0.94]`, plus its labels.
fn toy_sample(
    rng: &mut ChaCha8Rng,
    shape: [usize; 3],
    num_classes: usize,
) -> (Volume<f32>, SemanticMap) {
    let mut structures = Vec::with_capacity(num_classes - 1);
    let organ_r = radii(rng, shape, [(0.22, 0.36), (0.22, 0.36), (0.28, 0.42)]);
    let organ = Ellipsoid {
        center: fitting_center(rng, shape, organ_r),
        radii: organ_r,
    };
    for _class in 2..num_classes {
        let r = radii(rng, shape, [(0.08, 0.16), (0.08, 0.16), (0.15, 0.3)]);
        // Prefer a centre inside the organ; fall back to anywhere it fits.
        let mut center = fitting_center(rng, shape, r);
        for _ in 0..100 {
            let c = fitting_center(rng, shape, r);
            if organ.r2(c) <= 0.5 {
                center = c;
                break;
            }
        }
        structures.push(Ellipsoid { center, radii: r });
    }
    structures.insert(0, organ);

    let [h, w, l] = shape;
    let mut data = Vec::with_capacity(h * w * l);
    let mut labels = Vec::with_capacity(h * w * l);
    for x in 0..h {
        for y in 0..w {
            for z in 0..l {
                let p = [x as f64, y as f64, z as f64];
                let mut label = 0;
                let mut value = BACKGROUND;
                for (i, s) in structures.iter().enumerate() {
                    let r2 = s.r2(p);
                    if r2 <= 1.0 {
                        label = i + 1;
                        let level = class_level(i + 1, num_classes);
                        value = BACKGROUND + (level - BACKGROUND) * (0.75 + 0.25 * (1.0 - r2));
                    }
                }
                value += rng.gen_range(-NOISE..NOISE);
                data.push(value as f32);
                labels.push(label as u16);
            }
        }
    }
    let t = Tensor::new(vec![h, w, l, 1], data).expect("sized above");
    let vol = Volume::new(t, SPACING).expect("finite by construction");
    let map = SemanticMap::new(shape, labels, num_classes).expect("labels < num_classes");
    (vol, map)
}

fn validate(p: &ToyParams) -> Result<()> {
    if p.n == 0 {
        return Err(Error::Config("toy dataset needs n >= 1".into()));
    }
    if p.num_classes < 2 {
        return Err(Error::Config("toy dataset needs num_classes >= 2".into()));
    }
    if p.shape.iter().any(|&d| d < 4) {
        return Err(Error::Geometry(format!(
            "shape {:?} too small to hold a structure (every axis must be >= 4)",
            p.shape
        )));
    }
    if p.n_test > p.n {
        return Err(Error::Config("n_test exceeds n".into()));
    }
    Ok(())
}

/// Generate samples in memory: `(id, split, raw volume, map)`.
pub fn generate_toy_samples(
    p: &ToyParams,
) -> Result<Vec<(String, String, Volume<f32>, SemanticMap)>> {
    validate(p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    Ok((0..p.n)
        .map(|i| {
            let (v, m) = toy_sample(&mut rng, p.shape, p.num_classes);
            let split = if i >= p.n - p.n_test { "test" } else { "train" };
            (format!("toy{i:04}"), split.to_string(), v, m)
        })
        .collect())
}

/// Write a toy dataset as NIfTI files plus `manifest.tsv` under `dir`.
pub fn generate_toy_dataset(dir: impl AsRef<Path>, p: &ToyParams) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let samples = generate_toy_samples(p)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (id, split, vol, map) in &samples {
        let vname = format!("{id}_img.nii");
        let mname = format!("{id}_seg.nii");
        save_nifti(vol, dir.join(&vname))?;
        save_map(map, vol.spacing, dir.join(&mname))?;
        entries.push(ManifestEntry {
            id: id.clone(),
            volume: vname.into(),
            map: Some(mname.into()),
            split: split.clone(),
        });
    }
    let manifest = DatasetManifest::new(entries, p.seed)?;
    manifest.save(dir.join("manifest.tsv"))?;
    DatasetManifest::load(dir.join("manifest.tsv"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume_io::Dataset;

    fn params(seed: u64) -> ToyParams {
        ToyParams {
            n: 4,
            shape: [32, 32, 8],
            num_classes: 3,
            seed,
            n_test: 1,
        }
    }

    #[test]
    fn labels_coincide_with_elevated_intensity() {
        for (_, _, v, m) in generate_toy_samples(&params(1)).unwrap() {
            for (i, &lab) in m.labels.iter().enumerate() {
                let high = v.data.data()[i] as f64 > TOY_BACKGROUND_THRESHOLD;
                assert_eq!(high, lab != 0);
            }
            assert!(m.count(1) > 0);
            assert!(m.count(2) > 0);
            assert_eq!(m.num_classes, 3);
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = generate_toy_samples(&params(5)).unwrap();
        let b = generate_toy_samples(&params(5)).unwrap();
        let c = generate_toy_samples(&params(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].2, c[0].2);
    }

    #[test]
    fn too_small_shape_is_a_geometry_error() {
        let p = ToyParams {
            shape: [8, 8, 2],
            ..params(0)
        };
        assert!(matches!(generate_toy_samples(&p), Err(Error::Geometry(_))));
        let p = ToyParams {
            num_classes: 1,
            ..params(0)
        };
        assert!(matches!(generate_toy_samples(&p), Err(Error::Config(_))));
    }

    #[test]
    fn written_dataset_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_toy_dataset(dir.path(), &params(2)).unwrap();
        assert_eq!(m.entries.len(), 4);
        assert!(m.is_labeled());
        assert_eq!(m.split("test").entries.len(), 1);
        let ds = Dataset::<f32>::load(&m, [32, 32, 8], 3).unwrap();
        let mem = generate_toy_samples(&params(2)).unwrap();
        for (s, (_, _, v, map)) in ds.samples.iter().zip(&mem) {
            assert_eq!(s.map.as_ref().unwrap(), map);
            assert_eq!(
                s.volume.intensity_range,
                (v.data.min_max().0 as f64, v.data.min_max().1 as f64)
            );
        }
    }
}
