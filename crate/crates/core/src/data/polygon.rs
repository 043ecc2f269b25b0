use super::{Bitmask, DataError};

/// Crossing of the edge `(x0,y0)-(x1,y1)` with the horizontal line at `y`,
/// counted with the half-open rule `(y0 > y) != (y1 > y)`.
#[inline]
fn edge_crossing(x0: f64, y0: f64, x1: f64, y1: f64, y: f64) -> Option<f64> {
    if (y0 > y) != (y1 > y) {
        Some((x1 - x0) * (y - y0) / (y1 - y0) + x0)
    } else {
        None
    }
}

fn vertices(poly: &[f64]) -> Result<Vec<(f64, f64)>, DataError> {
    if poly.len() % 2 != 0 || poly.len() < 6 {
        return Err(DataError::PolygonVertices(poly.len() / 2));
    }
    Ok(poly.chunks_exact(2).map(|p| (p[0], p[1])).collect())
}

/// Even-odd membership of a point, by ray casting toward +x.
pub fn point_in_polygon(poly: &[f64], x: f64, y: f64) -> Result<bool, DataError> {
    let v = vertices(poly)?;
    let mut inside = false;
    for i in 0..v.len() {
        let (x0, y0) = v[i];
        let (x1, y1) = v[(i + 1) % v.len()];
        if let Some(xc) = edge_crossing(x0, y0, x1, y1, y) {
            if x < xc {
                inside = !inside;
            }
        }
    }
    Ok(inside)
}

/// Scanline fill of one or more polygons (`[x1,y1,x2,y2,...]` in pixels).
/// A pixel is foreground iff its center lies inside any polygon.
pub fn polygon_to_mask(polys: &[Vec<f64>], height: usize, width: usize) -> Result<Bitmask, DataError> {
    let mut mask = Bitmask::new(height, width);
    let mut xs = Vec::new();
    for poly in polys {
        let v = vertices(poly)?;
        for row in 0..height {
            let yc = row as f64 + 0.5;
            xs.clear();
            for i in 0..v.len() {
                let (x0, y0) = v[i];
                let (x1, y1) = v[(i + 1) % v.len()];
                if let Some(xc) = edge_crossing(x0, y0, x1, y1, yc) {
                    xs.push(xc);
                }
            }
            xs.sort_by(f64::total_cmp);
            // Centre `c + 0.5` is inside iff an odd number of crossings lie to its right,
            // i.e. it falls in some [xs[2j], xs[2j+1]) span.
            for span in xs.chunks_exact(2) {
                let first = (span[0] - 0.5).ceil().max(0.0) as usize;
                for col in first..width {
                    let xc = col as f64 + 0.5;
                    if xc >= span[1] {
                        break;
                    }
                    if xc >= span[0] {
                        mask.set(row, col, true);
                    }
                }
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rectangle_fills_block() {
        let sq = vec![0.0, 0.0, 4.0, 0.0, 4.0, 4.0, 0.0, 4.0];
        let m = polygon_to_mask(&[sq], 8, 8).unwrap();
        assert_eq!(m.area(), 16);
        for r in 0..8 {
            for c in 0..8 {
                assert_eq!(m.get(r, c), r < 4 && c < 4);
            }
        }
    }

    #[test]
    fn degenerate_polygon_is_empty() {
        let line = vec![1.0, 1.0, 5.0, 5.0, 3.0, 3.0];
        assert!(polygon_to_mask(&[line], 8, 8).unwrap().is_empty());
    }

    #[test]
    fn too_few_vertices_rejected() {
        assert!(matches!(
            polygon_to_mask(&[vec![0.0, 0.0, 1.0, 1.0]], 4, 4),
            Err(DataError::PolygonVertices(2))
        ));
    }

    #[test]
    fn polygons_union() {
        let a = vec![0.0, 0.0, 2.0, 0.0, 2.0, 2.0, 0.0, 2.0];
        let b = vec![1.0, 1.0, 3.0, 1.0, 3.0, 3.0, 1.0, 3.0];
        assert_eq!(polygon_to_mask(&[a, b], 4, 4).unwrap().area(), 7);
    }

    proptest! {
        #[test]
        fn scanline_matches_point_test(
            pts in proptest::collection::vec((-2.0f64..18.0, -2.0f64..18.0), 3..7)
        ) {
            let poly: Vec<f64> = pts.iter().flat_map(|&(x, y)| [x, y]).collect();
            let m = polygon_to_mask(std::slice::from_ref(&poly), 16, 16).unwrap();
            for r in 0..16 {
                for c in 0..16 {
                    let inside = point_in_polygon(&poly, c as f64 + 0.5, r as f64 + 0.5).unwrap();
                    prop_assert_eq!(m.get(r, c), inside, "pixel ({}, {})", r, c);
                }
            }
        }
    }
}
