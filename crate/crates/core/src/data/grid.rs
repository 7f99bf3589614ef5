use serde::{Deserialize, Serialize};

use super::DataError;

/// Integer grid of cells indexed `1..=width` by `1..=height`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub width: u32,
    pub height: u32,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { width: 200, height: 200 }
    }
}

impl GridSpec {
    pub fn new(width: u32, height: u32) -> Result<Self, DataError> {
        if width == 0 || height == 0 {
            return Err(DataError::InvalidConfig(format!("grid {width}x{height}")));
        }
        Ok(Self { width, height })
    }

    pub fn vocabulary_size(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        (1..=self.width).contains(&x) && (1..=self.height).contains(&y)
    }

    /// Flattens a cell to `(x - 1) * height + (y - 1)`.
    pub fn location_id(&self, x: u32, y: u32) -> Result<u32, DataError> {
        if !self.contains(x, y) {
            return Err(DataError::OutOfGrid { x, y, width: self.width, height: self.height });
        }
        Ok((x - 1) * self.height + (y - 1))
    }

    pub fn inverse_location_id(&self, id: u32) -> Result<(u32, u32), DataError> {
        if id as usize >= self.vocabulary_size() {
            return Err(DataError::UnknownLocation(id));
        }
        Ok((id / self.height + 1, id % self.height + 1))
    }

    /// Cell center normalized into (0, 1) on both axes.
    pub fn normalized_center(&self, id: u32) -> Result<(f64, f64), DataError> {
        let (x, y) = self.inverse_location_id(id)?;
        Ok(((x as f64 - 0.5) / self.width as f64, (y as f64 - 0.5) / self.height as f64))
    }
}

impl std::str::FromStr for GridSpec {
    type Err = DataError;

    /// Parses `WxH`, e.g. `20x20`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || DataError::InvalidConfig(format!("grid must look like WxH, got {s:?}"));
        let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let w = w.trim().parse().map_err(|_| bad())?;
        let h = h.trim().parse().map_err(|_| bad())?;
        GridSpec::new(w, h)
    }
}
