//! Instance overlays: grayscale background, one palette color per instance,
//! and a dedicated color for pixels claimed by several instances.

use crate::error::{Error, Result};
use crate::imagecore::{ImageGrid, InstanceSet};
use crate::io::to_byte;

/// Instance colors, cycled when there are more instances than entries.
pub const PALETTE: [[u8; 3]; 8] = [
    [220, 40, 30],
    [245, 140, 20],
    [40, 90, 220],
    [40, 170, 70],
    [170, 50, 190],
    [20, 170, 190],
    [150, 110, 40],
    [230, 80, 150],
];

/// Color of multi-assigned pixels (cream).
pub const MULTI_COLOR: [u8; 3] = [255, 238, 190];

/// RGB pixels, row-major.
pub fn render_overlay(image: &ImageGrid, instances: &InstanceSet) -> Result<Vec<[u8; 3]>> {
    if image.dims() != instances.dims() {
        return Err(Error::invalid(format!(
            "image dims {:?} vs instance dims {:?}",
            image.dims(),
            instances.dims()
        )));
    }
    let counts = instances.membership_counts();
    let mut owner = vec![usize::MAX; counts.len()];
    for (k, m) in instances.masks().iter().enumerate() {
        for i in m.indices() {
            if owner[i] == usize::MAX {
                owner[i] = k;
            }
        }
    }
    Ok(image
        .values()
        .iter()
        .enumerate()
        .map(|(i, &v)| match counts[i] {
            0 => {
                let g = to_byte(v);
                [g, g, g]
            }
            1 => PALETTE[owner[i] % PALETTE.len()],
            _ => MULTI_COLOR,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::Mask;

    #[test]
    fn colors_are_distinct_and_not_gray() {
        let mut all: Vec<[u8; 3]> = PALETTE.to_vec();
        all.push(MULTI_COLOR);
        for (i, a) in all.iter().enumerate() {
            assert!(!(a[0] == a[1] && a[1] == a[2]));
            for b in &all[i + 1..] {
                assert_ne!(a, b);
            }
        }
    }

    #[test]
    fn empty_set_is_grayscale_passthrough() {
        let img = ImageGrid::new(1, 3, vec![0.0, 0.5, 1.0]).unwrap();
        let px = render_overlay(&img, &InstanceSet::empty(1, 3)).unwrap();
        assert_eq!(px, vec![[0; 3], [128; 3], [255; 3]]);
    }

    #[test]
    fn overlap_uses_multi_color() {
        let img = ImageGrid::filled(1, 3, 0.2).unwrap();
        let a = Mask::from_bits(1, 3, vec![true, true, false]).unwrap();
        let b = Mask::from_bits(1, 3, vec![false, true, true]).unwrap();
        let px = render_overlay(&img, &InstanceSet::new(1, 3, vec![a, b]).unwrap()).unwrap();
        assert_eq!(px, vec![PALETTE[0], MULTI_COLOR, PALETTE[1]]);
    }
}
