use crate::error::{param, Result};
use crate::tensor::Tensor;

use super::BBox;

/// Adaptive average pooling of a `D x H x W` map over the cells covered by
/// `b` (image coordinates, mapped down by `stride`). Output is `D x k x k`
/// flattened channel-major. Boxes thinner than a cell still cover one cell.
pub fn roi_pool(feat: &Tensor, b: &BBox, k: usize, stride: f64) -> Result<Vec<f64>> {
    let mut out = vec![0.0; feat.shape().first().copied().unwrap_or(0) * k * k];
    roi_pool_into(feat, b, k, stride, &mut out)?;
    Ok(out)
}

pub(crate) fn roi_pool_into(
    feat: &Tensor,
    b: &BBox,
    k: usize,
    stride: f64,
    out: &mut [f64],
) -> Result<()> {
    let &[d, h, w] = feat.shape() else {
        return param(format!("roi_pool expects D x H x W, got {:?}", feat.shape()));
    };
    if k == 0 || !b.is_valid() || !(stride > 0.0) {
        return param(format!("roi_pool: invalid box {b:?} or k={k}"));
    }
    let (c0, c1) = cell_range(b.x1 / stride, b.x2 / stride, w);
    let (r0, r1) = cell_range(b.y1 / stride, b.y2 / stride, h);
    if c1 <= c0 || r1 <= r0 {
        return param(format!("roi_pool: box {b:?} is empty after clamping"));
    }
    let (lw, lh) = (c1 - c0, r1 - r0);
    let data = feat.data();
    for by in 0..k {
        let (ys, ye) = (r0 + by * lh / k, r0 + ((by + 1) * lh).div_ceil(k));
        for bx in 0..k {
            let (xs, xe) = (c0 + bx * lw / k, c0 + ((bx + 1) * lw).div_ceil(k));
            let inv = 1.0 / ((ye - ys) * (xe - xs)) as f64;
            for ch in 0..d {
                let plane = &data[ch * h * w..(ch + 1) * h * w];
                let mut acc = 0.0;
                for y in ys..ye {
                    for v in &plane[y * w + xs..y * w + xe] {
                        acc += v;
                    }
                }
                out[ch * k * k + by * k + bx] = acc * inv;
            }
        }
    }
    Ok(())
}

fn cell_range(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let nf = n as f64;
    let start = lo.clamp(0.0, nf).floor().min(nf - 1.0).max(0.0) as usize;
    let end = (hi.clamp(0.0, nf).ceil() as usize).clamp(start + 1, n.max(start + 1));
    (start, end)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map() {
        let f = Tensor::new(vec![2, 4, 4], vec![3.0; 32]).unwrap();
        let v = roi_pool(&f, &BBox::new(1.0, 2.0, 9.0, 13.0), 3, 4.0).unwrap();
        assert!(v.iter().all(|&x| x == 3.0));
    }

    #[test]
    fn full_map_global_mean() {
        let f = Tensor::new(vec![2, 4, 4], (0..32).map(f64::from).collect()).unwrap();
        let v = roi_pool(&f, &BBox::new(0.0, 0.0, 16.0, 16.0), 1, 4.0).unwrap();
        assert_eq!(v, vec![7.5, 23.5]);
    }

    #[test]
    fn two_by_two_box_matches_scalar_loop() {
        // 4x4 map with value 10*row + col; box covers cells rows 1..3, cols 2..4.
        let f = Tensor::new(
            vec![1, 4, 4],
            (0..16).map(|i| f64::from(10 * (i / 4) + i % 4)).collect(),
        )
        .unwrap();
        let b = BBox::new(8.0, 4.0, 16.0, 12.0);
        assert_eq!(roi_pool(&f, &b, 1, 4.0).unwrap(), vec![(12.0 + 13.0 + 22.0 + 23.0) / 4.0]);
        assert_eq!(roi_pool(&f, &b, 2, 4.0).unwrap(), vec![12.0, 13.0, 22.0, 23.0]);
        // k=3 over 2 cells: bins [0,1), [0,2), [1,2)
        let v = roi_pool(&f, &b, 3, 4.0).unwrap();
        let row = |r: f64| vec![r + 2.0, r + 2.5, r + 3.0];
        let expect: Vec<f64> = [row(10.0), row(15.0), row(20.0)].concat();
        for (a, e) in v.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "{v:?} vs {expect:?}");
        }
    }

    #[test]
    fn sub_cell_and_outside_boxes_clamp() {
        let f = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        assert_eq!(roi_pool(&f, &BBox::new(5.0, 5.0, 5.5, 5.5), 1, 4.0).unwrap(), vec![5.0]);
        assert_eq!(roi_pool(&f, &BBox::new(-9.0, -9.0, -3.0, -3.0), 1, 4.0).unwrap(), vec![0.0]);
        assert_eq!(roi_pool(&f, &BBox::new(40.0, 40.0, 50.0, 50.0), 1, 4.0).unwrap(), vec![15.0]);
        assert!(roi_pool(&f, &BBox::new(3.0, 0.0, 1.0, 2.0), 1, 4.0).is_err());
    }
}
