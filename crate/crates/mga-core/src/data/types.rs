//! Feature-file domain types: the ingestion contract that stands in for a
//! backbone network.

use serde::{Deserialize, Serialize};

use crate::error::{MgaError, Result};
use crate::numerics::{Matrix, Real};

/// Which backbone layer a grid-feature map came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerTag {
    Coarse,
    Fine,
}

impl LayerTag {
    pub fn code(self) -> u8 {
        match self {
            LayerTag::Coarse => 0,
            LayerTag::Fine => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(LayerTag::Coarse),
            1 => Some(LayerTag::Fine),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerTag::Coarse => "coarse",
            LayerTag::Fine => "fine",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Query => 1,
            Split::Gallery => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Split::Train),
            1 => Some(Split::Query),
            2 => Some(Split::Gallery),
            _ => None,
        }
    }
}

/// One backbone layer's spatial feature map, split into `h·w` grid vectors
/// of dimension `dim`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFeatures<T> {
    pub tag: LayerTag,
    pub height: usize,
    pub width: usize,
    /// `h·w` rows × `dim` columns.
    pub values: Matrix<T>,
}

impl<T: Real> GridFeatures<T> {
    pub fn new(tag: LayerTag, height: usize, width: usize, values: Matrix<T>) -> Result<Self> {
        if height == 0 || width == 0 || values.cols() == 0 {
            return Err(MgaError::DimMismatch {
                context: format!("GridFeatures({})", tag.name()),
                expected: "h >= 1, w >= 1, dim >= 1".into(),
                got: format!("{}x{}x{}", height, width, values.cols()),
            });
        }
        if values.rows() != height * width {
            return Err(MgaError::DimMismatch {
                context: format!("GridFeatures({})", tag.name()),
                expected: format!("{} grid rows", height * width),
                got: format!("{}", values.rows()),
            });
        }
        if !values.all_finite() {
            return Err(MgaError::NonFinite(format!(
                "GridFeatures({})",
                tag.name()
            )));
        }
        Ok(Self {
            tag,
            height,
            width,
            values,
        })
    }

    /// Number of grid cells.
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn to_f64(&self) -> GridFeatures<f64> {
        GridFeatures {
            tag: self.tag,
            height: self.height,
            width: self.width,
            values: self.values.to_f64(),
        }
    }
}

/// Average-pooled global feature of the final (coarse) layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature<T> {
    pub values: Vec<T>,
}

/// Coordinate-wise mean over the grid cells of the final layer. The result
/// is not l2-normalized here; the cosine in the scorer handles that.
pub fn derive_global<T: Real>(final_layer: &GridFeatures<T>) -> GlobalFeature<T> {
    let n = T::from_f64(final_layer.cells() as f64);
    let dim = final_layer.dim();
    let mut values = vec![T::zero(); dim];
    for row in final_layer.values.iter_rows() {
        for (acc, &v) in values.iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    for v in &mut values {
        *v = *v / n;
    }
    GlobalFeature { values }
}

/// One image's features plus identity metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord<T> {
    pub image_id: String,
    pub class_id: u32,
    pub split: Split,
    pub layers: Vec<GridFeatures<T>>,
}

impl<T: Real> ImageRecord<T> {
    pub fn new(
        image_id: String,
        class_id: u32,
        split: Split,
        layers: Vec<GridFeatures<T>>,
    ) -> Result<Self> {
        let rec = Self {
            image_id,
            class_id,
            split,
            layers,
        };
        rec.layer(LayerTag::Coarse)?;
        rec.layer(LayerTag::Fine)?;
        Ok(rec)
    }

    pub fn layer(&self, tag: LayerTag) -> Result<&GridFeatures<T>> {
        self.layers
            .iter()
            .find(|l| l.tag == tag)
            .ok_or_else(|| MgaError::MissingLayer(self.image_id.clone(), tag.name().into()))
    }

    pub fn to_f64(&self) -> ImageRecord<f64> {
        ImageRecord {
            image_id: self.image_id.clone(),
            class_id: self.class_id,
            split: self.split,
            layers: self.layers.iter().map(|l| l.to_f64()).collect(),
        }
    }
}
