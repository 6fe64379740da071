//! Combines the background map with depth-ordered instance masks.

use crate::error::{Error, Result};
use crate::maps::{Mask, PanopticMap, SemanticMap};

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceForecast {
    pub mask: Mask,
    pub class: u16,
    pub depth: f64,
}

/// Pastes instances farthest first so nearer ones overwrite them. Equal
/// depths paste the larger index first. Instance `i` receives id `i + 1`.
pub fn aggregate(bg: &SemanticMap, instances: &[InstanceForecast]) -> Result<PanopticMap> {
    if let Some(i) = instances.iter().position(|m| !m.mask.same_dims(bg)) {
        return Err(Error::usage(format!(
            "instance {i} mask is {:?}, background is {:?}",
            instances[i].mask.dims(),
            bg.dims()
        )));
    }
    if instances.len() >= u16::MAX as usize {
        return Err(Error::usage("too many instances for 16-bit ids"));
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| instances[b].depth.total_cmp(&instances[a].depth).then(b.cmp(&a)));
    let mut out = PanopticMap::from_semantic(bg);
    for i in order {
        let inst = &instances[i];
        for p in inst.mask.indices() {
            out.class.data_mut()[p] = inst.class;
            out.instance.data_mut()[p] = (i + 1) as u16;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::maps::Grid;

    fn square(h: usize, w: usize, r: std::ops::Range<usize>, c: std::ops::Range<usize>) -> Mask {
        let mut m = Grid::filled(h, w, false);
        for y in r {
            for x in c.clone() {
                m.set(y, x, true);
            }
        }
        m
    }

    #[test]
    fn empty_list_is_background() {
        let bg = Grid::filled(3, 4, 2u16);
        let out = aggregate(&bg, &[]).unwrap();
        assert_eq!(out, PanopticMap::from_semantic(&bg));
    }

    #[test]
    fn nearer_instance_wins_overlap() {
        let bg = Grid::filled(4, 4, 0u16);
        let far = InstanceForecast { mask: square(4, 4, 0..3, 0..3), class: 5, depth: 10.0 };
        let near = InstanceForecast { mask: square(4, 4, 1..4, 1..4), class: 6, depth: 5.0 };
        let out = aggregate(&bg, &[near, far]).unwrap();
        assert_eq!(out.get(2, 2), (6, 1));
        assert_eq!(out.get(0, 0), (5, 2));
        assert_eq!(out.get(3, 0), (0, 0));
    }

    #[test]
    fn ties_paste_larger_index_first() {
        let bg = Grid::filled(2, 2, 0u16);
        let a = InstanceForecast { mask: square(2, 2, 0..2, 0..2), class: 5, depth: 3.0 };
        let b = InstanceForecast { class: 6, ..a.clone() };
        let out = aggregate(&bg, &[a, b]).unwrap();
        assert!(out.instance.data().iter().all(|&i| i == 1));
    }

    #[test]
    fn size_mismatch_is_usage_error() {
        let bg = Grid::filled(2, 2, 0u16);
        let a = InstanceForecast { mask: Grid::filled(3, 2, true), class: 5, depth: 1.0 };
        assert!(matches!(aggregate(&bg, &[a]), Err(Error::Usage(_))));
    }
}
