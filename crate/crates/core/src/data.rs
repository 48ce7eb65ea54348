//! Training examples: cropped input tensors with their grid-level targets.
//!
//! A [`PoseDataset`] keeps the source images and annotations. Without
//! augmentation every example is prepared once; with augmentation each batch
//! re-crops its sources under a random similarity drawn from the caller's RNG.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::config::{Task, TrainConfig};
use crate::error::{Error, Result};
use crate::exec;
use crate::heatmap::{
    encode_heatmaps, encode_occlusion, Annotation, Augmentation, CropTransform, Direction, GridSpec, LandmarkSet, SCALE_UNIT,
};
use crate::imaging::{Image, CHANNELS};
use crate::synthdata::{annotation_for, reference_lengths, Sample, SkeletonSpec, SynthConfig};
use crate::tensor::Tensor;

/// Which landmark pairs define the per-sample normalizers.
#[derive(Clone, Debug, PartialEq)]
pub enum Normalizer {
    /// PCK uses the torso, pose fake labels the head segment.
    Skeleton(SkeletonSpec),
    /// Both use the inter-ocular distance.
    Eyes(usize, usize),
}

impl Normalizer {
    /// `(evaluation reference, fake-label reference)` for one landmark set.
    pub fn lengths(&self, lms: &LandmarkSet) -> (f64, f64) {
        match self {
            Normalizer::Skeleton(spec) => reference_lengths(spec, lms),
            Normalizer::Eyes(a, b) => {
                let (p, q) = (lms.point2(*a), lms.point2(*b));
                let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                (d, d)
            }
        }
    }

    pub fn joints(&self) -> Option<usize> {
        match self {
            Normalizer::Skeleton(s) => Some(s.joints()),
            Normalizer::Eyes(..) => None,
        }
    }
}

#[derive(Clone, Debug)]
struct Source {
    image: Image,
    landmarks: LandmarkSet,
    crop: CropTransform,
}

/// One example in network coordinates.
#[derive(Clone, Debug)]
pub struct Example {
    /// `[3, S, S]`.
    pub input: Vec<f32>,
    /// `[3, H, W]`: the input resampled to the heatmap grid, for P.
    pub small: Vec<f32>,
    /// Crop-pixel landmarks.
    pub landmarks: LandmarkSet,
    /// `[K, H, W]`.
    pub pose: Vec<f32>,
    pub occ: Vec<f32>,
    /// Joints inside the crop.
    pub mask: Vec<bool>,
    pub eval_ref: f64,
    pub fake_ref: f64,
    /// Source pixels per crop pixel.
    pub source_scale: f64,
}

/// A batch laid out for the networks.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor<f32>,
    pub small: Tensor<f32>,
    pub pose: Vec<f32>,
    pub occ: Vec<f32>,
    pub mask: Vec<bool>,
    pub landmarks: Vec<LandmarkSet>,
    pub eval_refs: Vec<f64>,
    pub fake_refs: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct PoseDataset {
    pub input_size: usize,
    pub grid: GridSpec,
    pub sigma: f64,
    pub joints: usize,
    pub normalizer: Normalizer,
    augmentation: Option<Augmentation>,
    sources: Vec<Source>,
    prepared: Vec<Example>,
}

fn normalizer_for(cfg: &TrainConfig, spec: Option<&SkeletonSpec>) -> Result<Normalizer> {
    match (cfg.task, spec) {
        (Task::Face, _) => {
            let (a, b) = cfg
                .eyes
                .ok_or_else(|| Error::config("face task needs eyes = i,j"))?;
            Ok(Normalizer::Eyes(a, b))
        }
        (_, Some(s)) => Ok(Normalizer::Skeleton(s.clone())),
        (_, None) => Ok(Normalizer::Skeleton(SkeletonSpec::default())),
    }
}

impl PoseDataset {
    /// Builds a dataset from decoded images and their annotations.
    pub fn new(items: Vec<(Image, Annotation)>, cfg: &TrainConfig, spec: Option<&SkeletonSpec>) -> Result<Self> {
        cfg.validate()?;
        if items.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        let normalizer = normalizer_for(cfg, spec)?;
        if let Some(k) = normalizer.joints() {
            if k != cfg.joints {
                return Err(Error::invalid(format!("skeleton has {k} joints, config expects {}", cfg.joints)));
            }
        }
        if let Normalizer::Eyes(a, b) = normalizer {
            if a >= cfg.joints || b >= cfg.joints || a == b {
                return Err(Error::config("eye indices out of range"));
            }
        }
        let mut sources = Vec::with_capacity(items.len());
        for (n, (image, ann)) in items.into_iter().enumerate() {
            let landmarks = ann.landmarks()?;
            if landmarks.len() != cfg.joints {
                return Err(Error::invalid(format!(
                    "annotation {n} ({}) has {} landmarks, config expects {}",
                    ann.image,
                    landmarks.len(),
                    cfg.joints
                )));
            }
            let crop = ann.crop(cfg.input_size)?;
            sources.push(Source { image, landmarks, crop });
        }
        let hm = cfg.heatmap_size();
        let mut ds = PoseDataset {
            input_size: cfg.input_size,
            grid: GridSpec::for_input(cfg.input_size, hm),
            sigma: cfg.sigma,
            joints: cfg.joints,
            normalizer,
            augmentation: cfg.augment.then_some(match cfg.task {
                Task::Face => Augmentation::FACE,
                _ => Augmentation::POSE,
            }),
            sources,
            prepared: Vec::new(),
        };
        let prepared: Result<Vec<Example>> = exec::map_indexed(ds.sources.len(), |i| {
            let s = &ds.sources[i];
            ds.prepare(s, &s.crop)
        })
        .into_iter()
        .collect();
        ds.prepared = prepared?;
        Ok(ds)
    }

    /// In-memory synthetic samples with the annotations `synth` would write.
    pub fn from_samples(samples: &[Sample], synth: &SynthConfig, cfg: &TrainConfig, spec: &SkeletonSpec) -> Result<Self> {
        let items = samples
            .iter()
            .enumerate()
            .map(|(i, s)| (s.image.clone(), annotation_for(s, synth, &format!("mem:{i}"))))
            .collect();
        Self::new(items, cfg, Some(spec))
    }

    /// Reads `annotations.jsonl` (and `skeleton.json` when present) from
    /// `dir`; image paths are relative to it.
    pub fn load_dir(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        let ann_path = dir.join("annotations.jsonl");
        let text = fs::read_to_string(&ann_path)
            .map_err(|e| Error::invalid(format!("cannot read {}: {e}", ann_path.display())))?;
        let spec_path = dir.join("skeleton.json");
        let spec: Option<SkeletonSpec> = if spec_path.exists() {
            let s: SkeletonSpec = serde_json::from_str(&fs::read_to_string(&spec_path)?)?;
            s.validate()?;
            Some(s)
        } else {
            None
        };
        let anns: Vec<Annotation> = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l)
                    .map_err(|e| Error::invalid(format!("{}:{}: {e}", ann_path.display(), n + 1)))
            })
            .collect::<Result<_>>()?;
        let images: Vec<Result<Image>> = exec::map_indexed(anns.len(), |i| Image::load_png(&dir.join(&anns[i].image)));
        let items = images
            .into_iter()
            .zip(anns)
            .map(|(img, a)| img.map(|i| (i, a)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(items, cfg, spec.as_ref())
    }

    /// Crop that maps sample `i`'s source image into network coordinates.
    pub fn crop(&self, i: usize) -> &CropTransform {
        &self.sources[i].crop
    }

    pub fn skeleton(&self) -> Option<&SkeletonSpec> {
        match &self.normalizer {
            Normalizer::Skeleton(s) => Some(s),
            Normalizer::Eyes(..) => None,
        }
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn example(&self, i: usize) -> &Example {
        &self.prepared[i]
    }

    pub fn examples(&self) -> &[Example] {
        &self.prepared
    }

    /// Rejects a dataset whose layout does not match `cfg`.
    pub fn check(&self, cfg: &TrainConfig) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        if self.joints != cfg.joints || self.input_size != cfg.input_size || self.grid.height != cfg.heatmap_size() {
            return Err(Error::invalid(format!(
                "dataset layout (K={}, S={}, H={}) does not match config (K={}, S={}, H={})",
                self.joints,
                self.input_size,
                self.grid.height,
                cfg.joints,
                cfg.input_size,
                cfg.heatmap_size()
            )));
        }
        Ok(())
    }

    fn prepare(&self, src: &Source, crop: &CropTransform) -> Result<Example> {
        let s = self.input_size as f64;
        let cropped = crop.crop_image(&src.image);
        let landmarks = crop
            .map_landmarks(&src.landmarks, Direction::Forward)?
            .clip_to_canvas(s, s);
        let small = cropped.resize_bilinear(self.grid.width, self.grid.height);
        let pose = encode_heatmaps(&landmarks, self.grid, self.sigma)?.into_values();
        let occ = encode_occlusion(&landmarks, self.grid, self.sigma)?.into_values();
        let (eval_ref, fake_ref) = self.normalizer.lengths(&landmarks);
        if !(eval_ref > 0.0) || !(fake_ref > 0.0) {
            return Err(Error::invalid("degenerate reference length in annotation"));
        }
        Ok(Example {
            input: cropped.data,
            small: small.data,
            mask: landmarks.in_image().to_vec(),
            landmarks,
            pose,
            occ,
            eval_ref,
            fake_ref,
            source_scale: crop.scale * SCALE_UNIT / crop.out_size as f64,
        })
    }

    /// Assembles the examples at `indices`. With augmentation enabled, each
    /// one is re-cropped under a transform drawn from `rng`.
    pub fn batch<R: Rng>(&self, indices: &[usize], rng: &mut R) -> Result<Batch> {
        let fresh: Vec<Example>;
        let examples: Vec<&Example> = match self.augmentation {
            None => indices.iter().map(|&i| &self.prepared[i]).collect(),
            Some(aug) => {
                let crops: Vec<CropTransform> = indices
                    .iter()
                    .map(|&i| aug.sample(&self.sources[i].crop, rng))
                    .collect();
                fresh = exec::map_indexed(indices.len(), |j| self.prepare(&self.sources[indices[j]], &crops[j]))
                    .into_iter()
                    .collect::<Result<_>>()?;
                fresh.iter().collect()
            }
        };
        self.assemble(indices, &examples)
    }

    /// The un-augmented examples at `indices`.
    pub fn plain_batch(&self, indices: &[usize]) -> Result<Batch> {
        let examples: Vec<&Example> = indices.iter().map(|&i| &self.prepared[i]).collect();
        self.assemble(indices, &examples)
    }

    fn assemble(&self, indices: &[usize], ex: &[&Example]) -> Result<Batch> {
        let s = self.input_size;
        let (h, w) = (self.grid.height, self.grid.width);
        let cat = |f: &dyn Fn(&Example) -> &[f32]| ex.iter().flat_map(|e| f(e).iter().copied()).collect::<Vec<f32>>();
        Ok(Batch {
            indices: indices.to_vec(),
            images: Tensor::from_vec(&[ex.len(), CHANNELS, s, s], cat(&|e| &e.input))?,
            small: Tensor::from_vec(&[ex.len(), CHANNELS, h, w], cat(&|e| &e.small))?,
            pose: cat(&|e| &e.pose),
            occ: cat(&|e| &e.occ),
            mask: ex.iter().flat_map(|e| e.mask.iter().copied()).collect(),
            landmarks: ex.iter().map(|e| e.landmarks.clone()).collect(),
            eval_refs: ex.iter().map(|e| e.eval_ref).collect(),
            fake_refs: ex.iter().map(|e| e.fake_ref).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::decode_raw;
    use crate::synthdata::generate_dataset;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(augment: bool) -> (PoseDataset, Vec<Sample>) {
        let spec = SkeletonSpec::default();
        let synth = SynthConfig::default();
        let samples = generate_dataset(&spec, &synth, 6, 0).unwrap();
        let cfg = TrainConfig {
            input_size: 32,
            augment,
            ..Default::default()
        };
        (PoseDataset::from_samples(&samples, &synth, &cfg, &spec).unwrap(), samples)
    }

    #[test]
    fn crop_halves_canvas_coordinates() {
        let (ds, samples) = setup(false);
        let e = ds.example(2);
        let src = &samples[2].landmarks;
        for i in 0..src.len() {
            if !src.in_image()[i] {
                continue;
            }
            let p = src.point2(i);
            let q = e.landmarks.point2(i);
            // 64 → 32 around the canvas center.
            assert!((q[0] - ((p[0] - 31.5) * 0.5 + 15.5)).abs() < 1e-9);
            assert!((q[1] - ((p[1] - 31.5) * 0.5 + 15.5)).abs() < 1e-9);
        }
        assert_eq!(e.input.len(), 3 * 32 * 32);
        assert_eq!(e.small.len(), 3 * 8 * 8);
        assert_eq!(e.pose.len(), 16 * 64);
    }

    #[test]
    fn targets_decode_back_to_landmarks() {
        let (ds, _) = setup(false);
        for e in ds.examples() {
            let (dec, _) = decode_raw(&e.pose, 16, ds.grid);
            for i in 0..16 {
                if e.mask[i] {
                    let (p, q) = (dec.point2(i), e.landmarks.point2(i));
                    assert!((p[0] - q[0]).hypot(p[1] - q[1]) <= 2.0, "joint {i}");
                }
            }
        }
    }

    #[test]
    fn occlusion_targets_only_on_invisible() {
        let (ds, _) = setup(false);
        for e in ds.examples() {
            for i in 0..16 {
                let ch = &e.occ[i * 64..(i + 1) * 64];
                let inv = e.landmarks.in_image()[i] && !e.landmarks.visible()[i];
                assert_eq!(ch.iter().any(|&v| v > 0.0), inv);
            }
        }
    }

    #[test]
    fn batch_layout_and_augmentation_determinism() {
        let (plain, _) = setup(false);
        let b = plain.plain_batch(&[3, 1]).unwrap();
        assert_eq!(b.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(b.images.item(0), &plain.example(3).input[..]);
        assert_eq!(b.mask.len(), 32);

        let (aug, _) = setup(true);
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = aug.batch(&[0, 1], &mut r1).unwrap();
        let c = aug.batch(&[0, 1], &mut r2).unwrap();
        assert_eq!(a.images.data(), c.images.data());
        assert_ne!(a.images.data(), plain.plain_batch(&[0, 1]).unwrap().images.data());
    }

    #[test]
    fn joint_count_mismatch_is_rejected() {
        let spec = SkeletonSpec::default();
        let synth = SynthConfig::default();
        let samples = generate_dataset(&spec, &synth, 1, 0).unwrap();
        let cfg = TrainConfig {
            input_size: 32,
            joints: 14,
            ..Default::default()
        };
        assert!(PoseDataset::from_samples(&samples, &synth, &cfg, &spec).is_err());
    }
}
