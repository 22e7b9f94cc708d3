use serde::{Deserialize, Serialize};

use super::BBox;

/// Square anchors laid out cell-major, then by scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub stride: f64,
    pub scales: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub boxes: Vec<BBox>,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn num_cells(&self) -> usize {
        self.height * self.width
    }

    /// (cell index, scale index) of a flat anchor index.
    pub fn locate(&self, anchor: usize) -> (usize, usize) {
        (anchor / self.scales.len(), anchor % self.scales.len())
    }
}

pub fn generate_anchors(height: usize, width: usize, stride: f64, scales: &[f64]) -> AnchorGrid {
    let mut boxes = Vec::with_capacity(height * width * scales.len());
    for row in 0..height {
        for col in 0..width {
            let cx = (col as f64 + 0.5) * stride;
            let cy = (row as f64 + 0.5) * stride;
            for &s in scales {
                let h = 0.5 * s;
                boxes.push(BBox::new(cx - h, cy - h, cx + h, cy + h));
            }
        }
    }
    AnchorGrid {
        stride,
        scales: scales.to_vec(),
        height,
        width,
        boxes,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell() {
        let g = generate_anchors(1, 1, 4.0, &[8.0]);
        assert_eq!(g.boxes, vec![BBox::new(-2.0, -2.0, 6.0, 6.0)]);
    }

    #[test]
    fn count_and_order() {
        let g = generate_anchors(16, 16, 4.0, &[8.0, 16.0, 32.0]);
        assert_eq!(g.len(), 768);
        // cell (row 1, col 2), scale index 1
        let idx = (16 + 2) * 3 + 1;
        assert_eq!(g.locate(idx), (18, 1));
        assert_eq!(g.boxes[idx], BBox::new(10.0 - 8.0, 6.0 - 8.0, 10.0 + 8.0, 6.0 + 8.0));
        assert_eq!(g, generate_anchors(16, 16, 4.0, &[8.0, 16.0, 32.0]));
    }
}
