use super::Model;
use crate::error::Result;
use crate::image::Image;
use crate::tensor::{Graph, Real, Tensor};

/// Per-patch attribution on the `grid × grid` patch lattice, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub grid: usize,
    pub values: Vec<f64>,
    /// Set when the raw map was constant and the uniform 0.5 map was emitted.
    pub degenerate: bool,
}

impl Heatmap {
    pub fn at(&self, gy: usize, gx: usize) -> f64 {
        self.values[gy * self.grid + gx]
    }

    /// Nearest-neighbour upsampling to `side × side` grey levels.
    pub fn to_gray(&self, side: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                let v = self.at(y * self.grid / side, x * self.grid / side);
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        out
    }
}

/// Attention rollout from per-layer, per-head attention matrices.
///
/// Heads are averaged, each layer is mixed as `0.5·A + 0.5·I`, layers are
/// multiplied from first to last, and the CLS row over patch positions is
/// min-max normalised.
pub fn rollout_from_layers<T: Real>(layers: &[Vec<&Tensor<T>>]) -> Heatmap {
    let t = layers
        .first()
        .and_then(|l| l.first())
        .map_or(1, |a| a.shape()[0]);
    let mut rollout = vec![0.0f64; t * t];
    for i in 0..t {
        rollout[i * t + i] = 1.0;
    }
    for heads in layers {
        let mut mixed = vec![0.0f64; t * t];
        let w = 0.5 / heads.len() as f64;
        for a in heads {
            for (m, v) in mixed.iter_mut().zip(a.data()) {
                *m += w * v.as_f64();
            }
        }
        for i in 0..t {
            mixed[i * t + i] += 0.5;
        }
        // rollout <- mixed · rollout
        let mut next = vec![0.0f64; t * t];
        for i in 0..t {
            for k in 0..t {
                let m = mixed[i * t + k];
                if m == 0.0 {
                    continue;
                }
                for j in 0..t {
                    next[i * t + j] += m * rollout[k * t + j];
                }
            }
        }
        rollout = next;
    }
    let raw = &rollout[1..t];
    let grid = ((t - 1) as f64).sqrt().round() as usize;
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi - lo > 1e-12) {
        log::warn!("attention rollout is constant over patches; emitting a uniform map");
        return Heatmap {
            grid,
            values: vec![0.5; t - 1],
            degenerate: true,
        };
    }
    Heatmap {
        grid,
        values: raw.iter().map(|v| (v - lo) / (hi - lo)).collect(),
        degenerate: false,
    }
}

/// Rollout heatmap of `model` on one image.
pub fn attention_rollout<T: Real>(model: &Model<T>, image: &Image) -> Result<Heatmap> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let out = model.backbone_forward(&mut g, &bound, std::slice::from_ref(image))?;
    let layers: Vec<Vec<&Tensor<T>>> = out
        .attention
        .iter()
        .map(|l| l.iter().map(|&v| g.value(v)).collect())
        .collect();
    Ok(rollout_from_layers(&layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn identity_attention_gives_uniform_map() {
        let eye = Tensor::<f64>::eye(5);
        let h = rollout_from_layers(&[vec![&eye, &eye]]);
        assert!(h.degenerate);
        assert_eq!(h.values, vec![0.5; 4]);
        assert_eq!(h.grid, 2);
    }

    #[test]
    fn cls_focus_is_recovered() {
        // CLS attends entirely to patch 2
        let mut a = Tensor::<f64>::eye(5);
        a.data_mut()[0] = 0.0;
        a.data_mut()[3] = 1.0;
        let h = rollout_from_layers(&[vec![&a]]);
        assert!(!h.degenerate);
        assert_eq!(h.values, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn heatmap_contract_on_random_model() {
        let cfg = ModelConfig::default();
        let m = Model::new(cfg.clone(), 3).unwrap();
        let img = Image::filled(96, 96, 3, 0.3);
        let h = attention_rollout(&m, &img).unwrap();
        assert_eq!(h.values.len(), cfg.num_patches());
        assert!(h.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(h.to_gray(96).len(), 96 * 96);
    }

    #[test]
    fn zero_attention_weights_give_uniform_map() {
        let cfg = ModelConfig { depth: 1, ..ModelConfig::default() };
        let mut m = Model::new(cfg, 3).unwrap();
        m.param_mut("blocks.0.attn.qkv.weight").unwrap().data_mut().fill(0.0);
        let h = attention_rollout(&m, &Image::filled(96, 96, 3, 0.3)).unwrap();
        assert!(h.degenerate);
        assert!(h.values.iter().all(|&v| v == 0.5));
    }
}
