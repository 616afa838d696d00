//! Image feature storage. On disk the table is a flat binary of f32 rows for
//! image ids 1..n; in memory row 0 is an all-zero blank so that the sentinel
//! id 0 gathers a neutral vector. Values are widened to f64 on load.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{ByteReader, ByteWriter};
use crate::tensor::Matrix;

pub const FEATURES_MAGIC: &[u8; 4] = b"UVRF";
pub const FEATURES_VERSION: u32 = 1;

/// Feature vectors keyed by image id. Invariants: the backing matrix has
/// `n_images + 1` rows, row 0 is all zeros, and every value is finite.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    data: Matrix,
}

impl FeatureTable {
    /// Builds from per-image rows (image ids 1..=rows.len(), in order);
    /// the blank row 0 is prepended here.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if dim == 0 {
            return Err(Error::invalid("feature table needs at least one column"));
        }
        let mut all = Vec::with_capacity(rows.len() + 1);
        all.push(vec![0.0; dim]);
        all.extend(rows);
        let data = Matrix::from_rows(&all)?;
        let table = FeatureTable { data };
        table.validate()?;
        Ok(table)
    }

    fn validate(&self) -> Result<()> {
        if !self.data.all_finite() {
            return Err(Error::invalid("feature table contains non-finite values"));
        }
        if self.data.row(0).iter().any(|&v| v != 0.0) {
            return Err(Error::invalid("feature table row 0 must be all zeros"));
        }
        Ok(())
    }

    pub fn n_images(&self) -> u32 {
        (self.data.rows() - 1) as u32
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    /// Feature row for an image id; id 0 is the blank row.
    pub fn row(&self, image_id: u32) -> Result<&[f64]> {
        if (image_id as usize) >= self.data.rows() {
            return Err(Error::invalid(format!(
                "image id {} out of range (table holds 1..={})",
                image_id,
                self.n_images()
            )));
        }
        Ok(self.data.row(image_id as usize))
    }

    /// Stacks the rows for `ids` into an `ids.len() x dim` matrix.
    pub fn gather(&self, ids: &[u32]) -> Result<Matrix> {
        let mut out = Matrix::zeros(ids.len(), self.dim());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.row(id)?);
        }
        Ok(out)
    }

    /// Full backing matrix including the blank row.
    pub fn matrix(&self) -> &Matrix {
        &self.data
    }

    /// Mutable rows 1..=n for ablation manipulations; the blank row is not
    /// handed out.
    pub fn image_rows_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        let dim = self.dim();
        self.data.data_mut().chunks_exact_mut(dim).skip(1)
    }

    /// Loads a feature file: magic "UVRF", version, image count, dimension,
    /// then one f32 row per image id starting at 1.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    pub fn from_bytes(bytes: &[u8], name: &str) -> Result<Self> {
        let mut r = ByteReader::open(bytes, name, FEATURES_MAGIC, FEATURES_VERSION)?;
        let n_images = r.get_u64()?;
        let dim = r.get_u64()?;
        if dim == 0 {
            return Err(Error::invalid(format!("{name}: feature dimension is 0")));
        }
        let total = n_images
            .checked_mul(dim)
            .ok_or_else(|| Error::format(format!("{name}: size overflow")))?;
        let mut data = Vec::with_capacity(((n_images + 1) * dim) as usize);
        data.extend(std::iter::repeat(0.0).take(dim as usize)); // blank row 0
        for _ in 0..total {
            let v = r.get_f32()?;
            if !v.is_finite() {
                return Err(Error::invalid(format!(
                    "{name}: non-finite feature value"
                )));
            }
            data.push(v as f64);
        }
        r.finish()?;
        let matrix = Matrix::from_vec((n_images + 1) as usize, dim as usize, data)?;
        Ok(FeatureTable { data: matrix })
    }

    /// Writes the table back out (blank row excluded), narrowing to f32.
    /// Loading the result reproduces this table exactly when every value
    /// is f32-representable, which holds for anything loaded or generated
    /// by this crate.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(FEATURES_MAGIC, FEATURES_VERSION);
        w.put_u64(self.n_images() as u64);
        w.put_u64(self.dim() as u64);
        for r in 1..self.data.rows() {
            for &v in self.data.row(r) {
                w.put_f32(v as f32);
            }
        }
        w.into_bytes()
    }
}
