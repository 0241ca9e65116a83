//! Deterministic synthetic dataset generator.
//!
//! The construction targets the failure mode this whole method exists for:
//! classes within a prototype group share one coarse-layer pattern, so their
//! pooled global features are nearly indistinguishable, while each class
//! carries its own unit "motif" vectors injected into a few fine-grid cells.
//! Global similarity cannot separate in-group classes; token-level
//! similarity can.
//!
//! Everything is a pure function of the spec. Per-image randomness (cell
//! placement, noise) comes from a stream derived from `(seed, image_id)`,
//! class- and group-level randomness from `(seed, label)` streams, so record
//! content never depends on generation order.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::rng::stream;

use crate::data::types::{GridFeatures, ImageRecord, LayerTag, Split};
use crate::error::{MgaError, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
}

impl LayerShape {
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub coarse: LayerShape,
    pub fine: LayerShape,
    pub num_motifs_per_class: usize,
    /// Number of fine-grid cells carrying a class motif in each image.
    pub motif_cells: usize,
    /// Classes per shared-coarse-prototype group.
    pub global_prototype_groups: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            images_per_class: 10,
            coarse: LayerShape {
                height: 4,
                width: 4,
                dim: 32,
            },
            fine: LayerShape {
                height: 8,
                width: 8,
                dim: 32,
            },
            num_motifs_per_class: 2,
            motif_cells: 16,
            global_prototype_groups: 4,
            noise_sigma: 0.02,
            seed: 7,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes),
            ("images_per_class", self.images_per_class),
            ("num_motifs_per_class", self.num_motifs_per_class),
            ("motif_cells", self.motif_cells),
            ("global_prototype_groups", self.global_prototype_groups),
            ("coarse.height", self.coarse.height),
            ("coarse.width", self.coarse.width),
            ("coarse.dim", self.coarse.dim),
            ("fine.height", self.fine.height),
            ("fine.width", self.fine.width),
            ("fine.dim", self.fine.dim),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err(MgaError::SpecInvalid {
                    field: field.into(),
                    reason: "must be positive".into(),
                });
            }
        }
        if self.motif_cells > self.fine.cells() {
            return Err(MgaError::SpecInvalid {
                field: "motif_cells".into(),
                reason: format!(
                    "{} exceeds fine-grid cell count {}",
                    self.motif_cells,
                    self.fine.cells()
                ),
            });
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(MgaError::SpecInvalid {
                field: "noise_sigma".into(),
                reason: "must be finite and non-negative".into(),
            });
        }
        Ok(())
    }
}

/// Per-coordinate sigma of background fine cells relative to unit motifs.
const BACKGROUND_SCALE: f64 = 0.25;

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, sigma: f64) -> Matrix<f64> {
    let normal = Normal::new(0.0, sigma).unwrap();
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| normal.sample(rng)).collect(),
    )
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn split_for(image_idx: usize, images_per_class: usize) -> Split {
    if images_per_class < 3 {
        return Split::Train;
    }
    let n_train = (images_per_class * 6 / 10).max(1);
    let n_query = (images_per_class * 2 / 10).max(1);
    if image_idx < n_train {
        Split::Train
    } else if image_idx < n_train + n_query {
        Split::Query
    } else {
        Split::Gallery
    }
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<Vec<ImageRecord<f32>>> {
    spec.validate()?;
    let group_size = spec.global_prototype_groups;
    let num_groups = spec.num_classes.div_ceil(group_size);

    // Group-level coarse prototypes and fine backgrounds.
    let coarse_sigma = 1.0 / (spec.coarse.dim as f64).sqrt();
    let fine_bg_sigma = BACKGROUND_SCALE / (spec.fine.dim as f64).sqrt();
    let group_coarse: Vec<Matrix<f64>> = (0..num_groups)
        .map(|g| {
            let mut rng = stream(spec.seed, &format!("group-coarse/{}", g));
            gaussian_matrix(&mut rng, spec.coarse.cells(), spec.coarse.dim, coarse_sigma)
        })
        .collect();
    let group_fine: Vec<Matrix<f64>> = (0..num_groups)
        .map(|g| {
            let mut rng = stream(spec.seed, &format!("group-fine/{}", g));
            gaussian_matrix(&mut rng, spec.fine.cells(), spec.fine.dim, fine_bg_sigma)
        })
        .collect();

    // Class-level unit motifs.
    let class_motifs: Vec<Vec<Vec<f64>>> = (0..spec.num_classes)
        .map(|c| {
            let mut rng = stream(spec.seed, &format!("class-motifs/{}", c));
            (0..spec.num_motifs_per_class)
                .map(|_| unit_vector(&mut rng, spec.fine.dim))
                .collect()
        })
        .collect();

    let mut records = Vec::with_capacity(spec.num_classes * spec.images_per_class);
    for class in 0..spec.num_classes {
        let group = class / group_size;
        for img in 0..spec.images_per_class {
            let image_id = format!("c{:03}_i{:03}", class, img);
            let mut rng = stream(spec.seed, &format!("image/{}", image_id));

            // Motif placement: a fresh cell permutation per image.
            let mut cells: Vec<usize> = (0..spec.fine.cells()).collect();
            cells.shuffle(&mut rng);

            let mut fine = group_fine[group].clone();
            for (k, &cell) in cells[..spec.motif_cells].iter().enumerate() {
                let motif = &class_motifs[class][k % spec.num_motifs_per_class];
                fine.row_mut(cell).copy_from_slice(motif);
            }
            let mut coarse = group_coarse[group].clone();

            if spec.noise_sigma > 0.0 {
                let noise = Normal::new(0.0, spec.noise_sigma).unwrap();
                for v in coarse.as_mut_slice() {
                    *v += noise.sample(&mut rng);
                }
                for v in fine.as_mut_slice() {
                    *v += noise.sample(&mut rng);
                }
            }

            records.push(ImageRecord::new(
                image_id,
                class as u32,
                split_for(img, spec.images_per_class),
                vec![
                    GridFeatures::new(
                        LayerTag::Coarse,
                        spec.coarse.height,
                        spec.coarse.width,
                        coarse.to_f32(),
                    )?,
                    GridFeatures::new(
                        LayerTag::Fine,
                        spec.fine.height,
                        spec.fine.width,
                        fine.to_f32(),
                    )?,
                ],
            )?);
        }
    }
    Ok(records)
}
