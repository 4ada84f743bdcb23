use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Per-pixel cluster indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<usize>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "LabelMap::new",
                dim: "pixel count",
                expected: height * width,
                found: data.len(),
            });
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, label: usize) -> Self {
        LabelMap {
            height,
            width,
            data: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[usize] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.data[y * self.width + x]
    }

    pub fn distinct(&self) -> BTreeSet<usize> {
        self.data.iter().copied().collect()
    }

    pub fn num_distinct(&self) -> usize {
        self.distinct().len()
    }

    /// Pixel mask of one cluster.
    pub fn mask_of(&self, label: usize) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&l| l == label).collect(),
        }
    }

    /// Number of 4-neighbour pixel pairs carrying different labels.
    pub fn boundary_length(&self) -> usize {
        let (h, w) = (self.height, self.width);
        let mut n = 0;
        for y in 0..h {
            for x in 0..w {
                let l = self.get(y, x);
                if x + 1 < w && self.get(y, x + 1) != l {
                    n += 1;
                }
                if y + 1 < h && self.get(y + 1, x) != l {
                    n += 1;
                }
            }
        }
        n
    }

    /// Fraction of pixels whose label differs from `other`.
    pub fn changed_fraction(&self, other: &LabelMap) -> f64 {
        let changed = self
            .data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| a != b)
            .count();
        changed as f64 / self.data.len().max(1) as f64
    }

    /// Size of the most frequent label as a fraction of all pixels.
    pub fn dominant_fraction(&self) -> f64 {
        let mut counts = std::collections::HashMap::new();
        for &l in &self.data {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        counts.values().copied().max().unwrap_or(0) as f64 / self.data.len().max(1) as f64
    }
}

/// Boolean foreground mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "BinaryMask::new",
                dim: "pixel count",
                expected: height * width,
                found: data.len(),
            });
        }
        Ok(BinaryMask {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..height * width).map(|i| f(i / width, i % width)).collect();
        BinaryMask {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_length_counts_unequal_neighbours() {
        let m = LabelMap::new(2, 3, vec![0, 0, 1, 0, 1, 1]).unwrap();
        // horizontal: (0,1)-(0,2), (1,0)-(1,1); vertical: (0,1)-(1,1)
        assert_eq!(m.boundary_length(), 3);
        assert_eq!(LabelMap::filled(4, 4, 7).boundary_length(), 0);
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
        assert!(BinaryMask::new(2, 2, vec![true; 5]).is_err());
    }
}
