use super::grid::OccupancyGrid;
use crate::error::{dim_err, Result};

fn check_dims(a: &OccupancyGrid, b: &OccupancyGrid) -> Result<()> {
    if a.dims() != b.dims() {
        return dim_err(format!("grid dims {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// Geometric IoU of the occupied sets; 1 when both grids are empty.
pub fn iou(a: &OccupancyGrid, b: &OccupancyGrid) -> Result<f64> {
    check_dims(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.classes().iter().zip(b.classes()) {
        let (oa, ob) = (x != 0, y != 0);
        inter += usize::from(oa && ob);
        union += usize::from(oa || ob);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouResult {
    /// Indexed by class id; `None` for the empty class and for classes
    /// absent from both grids.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// Per-class IoU over non-empty classes and their mean over classes present
/// in either grid. Returns a mean of 1 when no class is present at all.
pub fn miou(a: &OccupancyGrid, b: &OccupancyGrid, n_classes: usize) -> Result<MiouResult> {
    check_dims(a, b)?;
    let mut inter = vec![0usize; n_classes];
    let mut union = vec![0usize; n_classes];
    for (&x, &y) in a.classes().iter().zip(b.classes()) {
        let (x, y) = (x as usize, y as usize);
        if x >= n_classes || y >= n_classes {
            return dim_err(format!("class id beyond {n_classes}"));
        }
        if x == y {
            inter[x] += 1;
            union[x] += 1;
        } else {
            union[x] += 1;
            union[y] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..n_classes)
        .map(|c| (c != 0 && union[c] > 0).then(|| inter[c] as f64 / union[c] as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        1.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MiouResult { per_class, mean })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{below, seeded};
    use proptest::prelude::*;

    fn grid(classes: Vec<u8>, n: u32) -> OccupancyGrid {
        let len = classes.len();
        OccupancyGrid::new([len, 1, 1], 1.0, [0.0; 3], n, classes).unwrap()
    }

    #[test]
    fn identical_is_one() {
        let g = grid(vec![0, 1, 1, 0], 2);
        assert_eq!(iou(&g, &g).unwrap(), 1.0);
        let e = grid(vec![0; 4], 2);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn one_shared_of_three() {
        let a = grid(vec![1, 1, 0, 0], 2);
        let b = grid(vec![0, 1, 1, 0], 2);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn dims_must_match() {
        let a = grid(vec![1, 1, 0, 0], 2);
        let b = grid(vec![1, 1, 0], 2);
        assert!(iou(&a, &b).is_err());
        assert!(miou(&a, &b, 2).is_err());
    }

    #[test]
    fn miou_examples() {
        let g = grid(vec![1, 2, 3, 0, 1], 4);
        assert_eq!(miou(&g, &g, 4).unwrap().mean, 1.0);
        let a = grid(vec![1, 1, 2, 0, 0], 3);
        let b = grid(vec![1, 1, 0, 2, 0], 3);
        let r = miou(&a, &b, 3).unwrap();
        assert_eq!(r.per_class[1], Some(1.0));
        assert_eq!(r.per_class[2], Some(0.0));
        assert_eq!(r.mean, 0.5);
    }

    #[test]
    fn random_matches_exhaustive_loops() {
        let mut rng = seeded(17);
        for _ in 0..20 {
            let n = 5;
            let a: Vec<u8> = (0..60).map(|_| below(&mut rng, n) as u8).collect();
            let b: Vec<u8> = (0..60).map(|_| below(&mut rng, n) as u8).collect();
            let (ga, gb) = (grid(a.clone(), 5), grid(b.clone(), 5));
            let occ_i = a.iter().zip(&b).filter(|(x, y)| **x != 0 && **y != 0).count();
            let occ_u = a.iter().zip(&b).filter(|(x, y)| **x != 0 || **y != 0).count();
            assert_eq!(iou(&ga, &gb).unwrap(), occ_i as f64 / occ_u as f64);
            let r = miou(&ga, &gb, n).unwrap();
            let mut included = Vec::new();
            for c in 1..n as u8 {
                let i = a.iter().zip(&b).filter(|(x, y)| **x == c && **y == c).count();
                let u = a.iter().zip(&b).filter(|(x, y)| **x == c || **y == c).count();
                if u > 0 {
                    let v = i as f64 / u as f64;
                    assert_eq!(r.per_class[c as usize], Some(v));
                    included.push(v);
                }
            }
            let mean = included.iter().sum::<f64>() / included.len() as f64;
            assert!((r.mean - mean).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn iou_bounded_and_symmetric(a in proptest::collection::vec(0u8..3, 24), b in proptest::collection::vec(0u8..3, 24)) {
            let (ga, gb) = (grid(a, 3), grid(b, 3));
            let ab = iou(&ga, &gb).unwrap();
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab, iou(&gb, &ga).unwrap());
            prop_assert_eq!(iou(&ga, &ga).unwrap(), 1.0);
        }
    }
}
