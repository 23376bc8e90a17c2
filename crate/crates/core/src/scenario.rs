//! Frozen visual-block features for scenarios: a deterministic featurizer for
//! synthetic grids and a loader for externally computed image features.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{derive_seed, read_bytes, read_u32};
use crate::tensor::Tensor;

pub const OBJECT_CLASSES: [&str; 12] = [
    "sky", "tree", "grass", "wall", "ceiling", "lamp", "ball", "chair", "car", "cup", "box", "bag",
];
pub const COLORS: [&str; 4] = ["red", "green", "blue", "gray"];

/// Fixed featurizer seed; changing it changes every visual feature.
pub const FEATURE_SEED: u64 = 0x5CE7_A210;
pub const DEFAULT_GRID: usize = 3;
pub const DEFAULT_D_PRIME: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub object_class: u8,
    pub color: u8,
    pub present: bool,
}

impl Cell {
    pub fn new(object_class: u8, color: u8, present: bool) -> Self {
        Cell {
            object_class,
            color,
            present,
        }
    }

    pub fn is_valid(&self) -> bool {
        (self.object_class as usize) < OBJECT_CLASSES.len() && (self.color as usize) < COLORS.len()
    }
}

/// `G x G` grid of cells in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ScenarioGrid {
    size: usize,
    cells: Vec<Cell>,
}

impl ScenarioGrid {
    pub fn new(size: usize, cells: Vec<Cell>) -> Result<Self> {
        if size == 0 || cells.len() != size * size {
            return Err(Error::Value(format!(
                "grid of size {size} needs {} cells, got {}",
                size * size,
                cells.len()
            )));
        }
        if let Some(c) = cells.iter().find(|c| !c.is_valid()) {
            return Err(Error::Value(format!("cell attributes out of range: {c:?}")));
        }
        Ok(ScenarioGrid { size, cells })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, row: usize, col: usize) -> Cell {
        self.cells[row * self.size + col]
    }

    pub fn num_blocks(&self) -> usize {
        self.cells.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    Synthetic,
    File,
}

/// `k x d'` visual-block features.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualFeatures {
    pub blocks: Tensor,
    pub source: FeatureSource,
}

impl VisualFeatures {
    pub fn new(blocks: Tensor, source: FeatureSource) -> Result<Self> {
        let (k, d) = blocks.dims2()?;
        if k == 0 || d == 0 {
            return Err(Error::Value("visual features need k >= 1 and d' >= 1".into()));
        }
        if !blocks.is_finite() {
            return Err(Error::Value("visual features must be finite".into()));
        }
        Ok(VisualFeatures { blocks, source })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.blocks.shape()[1]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (k, d) = (self.num_blocks(), self.width());
        let mut out = Vec::with_capacity(16 + 8 * k * d);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(k as u32).to_le_bytes());
        out.extend_from_slice(&(d as u32).to_le_bytes());
        for v in self.blocks.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        let r = &mut bytes;
        let mut magic = [0u8; 4];
        read_bytes(r, &mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(Error::Format(format!("bad feature magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != FEATURE_VERSION {
            return Err(Error::Format(format!("unsupported feature version {version}")));
        }
        let k = read_u32(r)? as usize;
        let d = read_u32(r)? as usize;
        if k == 0 || d == 0 {
            return Err(Error::Format(format!("feature extents must be positive, got {k} x {d}")));
        }
        let n = k * d;
        if r.len() < n * 8 {
            return Err(Error::Format(format!(
                "truncated feature file: need {} bytes of data, have {}",
                n * 8,
                r.len()
            )));
        }
        let data = r[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let blocks = Tensor::new(&[k, d], data)?;
        VisualFeatures::new(blocks, FeatureSource::File).map_err(|e| Error::Format(e.to_string()))
    }
}

pub const FEATURE_MAGIC: &[u8; 4] = b"SCNV";
pub const FEATURE_VERSION: u32 = 1;

/// Relative scale of the color and presence components of a cell embedding.
pub const COLOR_WEIGHT: f64 = 0.6;
pub const PRESENCE_WEIGHT: f64 = 0.6;

fn component(tag: u64, value: u64, d_prime: usize) -> impl Iterator<Item = f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(FEATURE_SEED, &[tag, value]));
    (0..d_prime).map(move |_| StandardNormal.sample(&mut rng))
}

/// Fixed embedding of one cell attribute tuple: a class vector plus scaled
/// color and presence vectors, each a seeded Gaussian. Cells sharing a class
/// share a direction, as pooled CNN features of one object category would.
pub fn cell_embedding(cell: Cell, d_prime: usize) -> Vec<f64> {
    component(0, cell.object_class as u64, d_prime)
        .zip(component(1, cell.color as u64, d_prime))
        .zip(component(2, cell.present as u64, d_prime))
        .map(|((c, col), p)| c + COLOR_WEIGHT * col + PRESENCE_WEIGHT * p)
        .collect()
}

/// Featurizes a grid: block `i` is the embedding of cell `i`. Has no
/// learnable state, so features never change during training.
pub fn encode_scenario(grid: &ScenarioGrid, d_prime: usize) -> Result<VisualFeatures> {
    if d_prime < 4 {
        return Err(Error::Value(format!("d' must be at least 4, got {d_prime}")));
    }
    let data = grid
        .cells()
        .iter()
        .flat_map(|&c| cell_embedding(c, d_prime))
        .collect();
    let blocks = Tensor::new(&[grid.num_blocks(), d_prime], data)?;
    VisualFeatures::new(blocks, FeatureSource::Synthetic)
}

pub fn load_features(path: &Path) -> Result<VisualFeatures> {
    VisualFeatures::from_bytes(&std::fs::read(path)?)
}
