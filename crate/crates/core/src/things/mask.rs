use panfore_autodiff::{ConvTranspose2x2, Conv2d, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::maps::{Grid, Mask};
use crate::tracks::BoxFeature;

use super::ThingsConfig;

/// Two 3×3 conv + ReLU layers, a 2×2 transposed conv + ReLU, and a 1×1 conv
/// with one output channel per thing class.
#[derive(Debug, Clone)]
pub struct MaskOut {
    convs: [Conv2d; 2],
    up: ConvTranspose2x2,
    out: Conv2d,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl MaskOut {
    pub fn new(cfg: &ThingsConfig) -> Result<Self> {
        let h = cfg.mask_out_hidden;
        Ok(MaskOut {
            convs: [
                Conv2d::new("mask_out.c0", cfg.dims.channels, h, 3)?,
                Conv2d::new("mask_out.c1", h, h, 3)?,
            ],
            up: ConvTranspose2x2::new("mask_out.up", h, h),
            out: Conv2d::new("mask_out.out", h, cfg.num_things, 1)?,
            channels: cfg.dims.channels,
            height: 2 * cfg.dims.height,
            width: 2 * cfg.dims.width,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for c in &self.convs {
            c.init(store, rng)?;
        }
        self.up.init(store, rng)?;
        self.out.init(store, rng)?;
        Ok(())
    }

    /// Per-class mask logits `B × classes × 2h × 2w`.
    pub fn forward(&self, g: &Graph<'_>, r: Var) -> Result<Var> {
        let mut x = r;
        for c in &self.convs {
            x = g.relu(c.forward(g, x)?);
        }
        x = g.relu(self.up.forward(g, x)?);
        Ok(self.out.forward(g, x)?)
    }

    /// Mask probabilities `2h × 2w` for thing class index `thing`.
    pub fn probabilities(&self, store: &ParamStore, feature: &[f64], thing: usize) -> Result<Vec<f64>> {
        let (h, w) = (self.height / 2, self.width / 2);
        if feature.len() != self.channels * h * w {
            return Err(Error::usage(format!(
                "mask feature of length {} does not fit {}×{h}×{w}",
                feature.len(),
                self.channels
            )));
        }
        let g = Graph::new(store);
        let r = g.input(Tensor::new(&[1, self.channels, h, w], feature.to_vec())?);
        let logits = self.forward(&g, r)?;
        let classes = g.shape(logits)[1];
        if thing >= classes {
            return Err(Error::Label(format!("thing index {thing} exceeds {classes} mask classes")));
        }
        let sel = g.select_channel(logits, &[thing])?;
        Ok(g.value(g.sigmoid(sel)).into_data())
    }
}

/// Training pair for the mask head: a mask feature, its thing index and the
/// target occupancy on the head's output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    pub feature: Vec<f64>,
    pub thing: usize,
    pub target: Vec<f64>,
}

pub fn mask_confidence(prob: &[f64]) -> f64 {
    if prob.is_empty() {
        0.0
    } else {
        prob.iter().sum::<f64>() / prob.len() as f64
    }
}

fn sample_rows(n: usize, m: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| {
        if n == 1 {
            (m - 1) as f64 / 2.0
        } else {
            i as f64 * (m - 1) as f64 / (n - 1) as f64
        }
    })
}

/// Resizes an `hm × wm` probability grid into the box of `bbox` (centre and
/// size in pixels) with bilinear sampling, leaves everything else at zero,
/// and thresholds at 0.5. Pixel `(r, c)` belongs to the box when its centre
/// `(r + ½, c + ½)` lies inside it.
pub fn paste_mask(prob: &[f64], hm: usize, wm: usize, bbox: &BoxFeature, height: usize, width: usize) -> Mask {
    let mut out = Grid::filled(height, width, false);
    let [cx, cy, w, h] = [bbox[0], bbox[1], bbox[2], bbox[3]];
    if prob.len() != hm * wm || hm == 0 || wm == 0 || ![cx, cy, w, h].iter().all(|v| v.is_finite()) || w <= 0.0 || h <= 0.0 {
        return out;
    }
    let span = |lo: f64, hi: f64| -> (i64, i64) { ((lo - 0.5).ceil() as i64, (hi - 0.5).ceil() as i64) };
    let (r0, r1) = span(cy - h / 2.0, cy + h / 2.0);
    let (c0, c1) = span(cx - w / 2.0, cx + w / 2.0);
    if r1 <= r0 || c1 <= c0 {
        return out;
    }
    let (nr, nc) = ((r1 - r0) as usize, (c1 - c0) as usize);
    let cols: Vec<f64> = sample_rows(nc, wm).collect();
    for (i, sy) in sample_rows(nr, hm).enumerate() {
        let r = r0 + i as i64;
        if r < 0 || r >= height as i64 {
            continue;
        }
        let y0 = (sy.floor() as usize).min(hm - 1);
        let y1 = (y0 + 1).min(hm - 1);
        let fy = sy - y0 as f64;
        for (j, &sx) in cols.iter().enumerate() {
            let c = c0 + j as i64;
            if c < 0 || c >= width as i64 {
                continue;
            }
            let x0 = (sx.floor() as usize).min(wm - 1);
            let x1 = (x0 + 1).min(wm - 1);
            let fx = sx - x0 as f64;
            let top = prob[y0 * wm + x0] * (1.0 - fx) + prob[y0 * wm + x1] * fx;
            let bottom = prob[y1 * wm + x0] * (1.0 - fx) + prob[y1 * wm + x1] * fx;
            if top * (1.0 - fy) + bottom * fy >= 0.5 {
                out.set(r as usize, c as usize, true);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    fn bbox(cx: f64, cy: f64, w: f64, h: f64) -> BoxFeature {
        let mut b = [0.0; 10];
        b[..5].copy_from_slice(&[cx, cy, w, h, 5.0]);
        b
    }

    #[test]
    fn constant_ones_fill_the_box() {
        let m = paste_mask(&[1.0; 196], 14, 14, &bbox(4.5, 3.0, 3.0, 2.0), 8, 8);
        let set: Vec<usize> = m.indices().collect();
        assert_eq!(set, vec![19, 20, 21, 27, 28, 29]);
    }

    #[test]
    fn zeros_and_outside_boxes_are_empty() {
        assert_eq!(paste_mask(&[0.0; 196], 14, 14, &bbox(4.0, 4.0, 4.0, 4.0), 8, 8).count(), 0);
        assert_eq!(paste_mask(&[1.0; 196], 14, 14, &bbox(-20.0, 4.0, 4.0, 4.0), 8, 8).count(), 0);
        assert_eq!(paste_mask(&[1.0; 196], 14, 14, &bbox(4.0, 4.0, -1.0, 4.0), 8, 8).count(), 0);
    }

    #[test]
    fn partially_visible_box_is_clipped() {
        let m = paste_mask(&[1.0; 4], 2, 2, &bbox(0.0, 0.0, 4.0, 4.0), 8, 8);
        assert_eq!(m.count(), 4);
        assert_eq!(m.bbox(), Some((0, 0, 2, 2)));
    }

    #[test]
    fn mask_out_shapes() {
        let cfg = ThingsConfig::default();
        let head = MaskOut::new(&cfg).unwrap();
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        head.init(&mut store, &mut rng).unwrap();
        let p = head.probabilities(&store, &vec![0.5; cfg.dims.len()], 1).unwrap();
        assert_eq!(p.len(), 196);
        assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(head.probabilities(&store, &vec![0.5; cfg.dims.len()], 2).is_err());
    }
}
