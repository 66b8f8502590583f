use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Per-group learning rates: parameters named `backbone.*` form one group,
/// everything else is treated as newly added layers.
#[derive(Debug, Clone, Copy)]
pub struct LrGroups {
    pub backbone: f64,
    pub new_layers: f64,
}

impl LrGroups {
    pub fn rate_for(&self, name: &str) -> f64 {
        if name.starts_with("backbone.") {
            self.backbone
        } else {
            self.new_layers
        }
    }

    pub fn scaled(&self, factor: f64) -> LrGroups {
        LrGroups {
            backbone: self.backbone * factor,
            new_layers: self.new_layers * factor,
        }
    }
}

/// SGD with optional momentum. Velocity buffers are keyed by parameter index
/// and survive across steps.
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: LrGroups) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), Vec::new());
        }
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let grad = p
                .grad
                .as_ref()
                .ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
            let rate = if p.name.starts_with("backbone.") {
                lr.backbone
            } else {
                lr.new_layers
            };
            if self.momentum != 0.0 {
                let v = &mut self.velocity[id.0];
                if v.is_empty() {
                    v.resize(grad.len(), 0.0);
                }
                for ((val, g), vel) in p.value.data.iter_mut().zip(grad).zip(v.iter_mut()) {
                    *vel = self.momentum * *vel + *g;
                    *val -= rate * *vel;
                }
            } else {
                for (val, g) in p.value.data.iter_mut().zip(grad) {
                    *val -= rate * *g;
                }
            }
        }
        Ok(())
    }
}

/// Rescale the global gradient vector so its L2 norm is at most `max_norm`.
/// Returns the pre-clip norm. No-op when already below the ceiling.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for (_, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let grad = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::MissingGrad(p.name.clone()))?;
        for g in grad {
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let factor = max_norm / norm;
        for (_, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            if let Some(grad) = p.grad.as_mut() {
                for g in grad {
                    *g *= factor;
                }
            }
        }
    }
    Ok(norm)
}

/// Current global L2 gradient norm over trainable parameters.
pub fn global_grad_norm(store: &ParamStore) -> f64 {
    let mut sq = 0.0;
    for (_, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        if let Some(grad) = &p.grad {
            for g in grad {
                sq += g * g;
            }
        }
    }
    sq.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with_grads(grads: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s
            .add("w", Tensor::zeros(vec![grads.len()]))
            .unwrap();
        s.get_mut(id).grad = Some(grads.to_vec());
        s
    }

    #[test]
    fn clip_rescales_3_4_5() {
        let mut s = store_with_grads(&[3.0, 4.0]);
        let pre = clip_grad_norm(&mut s, 1.0).unwrap();
        assert!((pre - 5.0).abs() < 1e-12);
        let g = s.get(s.lookup("w").unwrap()).grad.clone().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12);
        assert!((g[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clip_is_noop_below_ceiling() {
        let mut s = store_with_grads(&[0.3, 0.4]);
        clip_grad_norm(&mut s, 1.0).unwrap();
        let g = s.get(s.lookup("w").unwrap()).grad.clone().unwrap();
        assert_eq!(g, vec![0.3, 0.4]);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut s = ParamStore::new();
        s.add("decoder.0.fc1.weight", Tensor::zeros(vec![2])).unwrap();
        let err = clip_grad_norm(&mut s, 1.0).unwrap_err();
        assert!(err.to_string().contains("decoder.0.fc1.weight"));
    }

    #[test]
    fn lr_groups_route_by_prefix() {
        let lr = LrGroups {
            backbone: 0.0005,
            new_layers: 0.005,
        };
        assert_eq!(lr.rate_for("backbone.conv0.weight"), 0.0005);
        assert_eq!(lr.rate_for("decoder.0.fc1.weight"), 0.005);
    }

    #[test]
    fn sgd_applies_per_group_rates() {
        let mut s = ParamStore::new();
        let a = s.add("backbone.conv0.weight", Tensor::from_vec(vec![1], vec![1.0]).unwrap()).unwrap();
        let b = s.add("decoder.0.w", Tensor::from_vec(vec![1], vec![1.0]).unwrap()).unwrap();
        s.get_mut(a).grad = Some(vec![1.0]);
        s.get_mut(b).grad = Some(vec![1.0]);
        let mut opt = Sgd::new(0.0);
        opt.step(
            &mut s,
            LrGroups {
                backbone: 0.0005,
                new_layers: 0.005,
            },
        )
        .unwrap();
        assert!((s.get(a).value.data[0] - 0.9995).abs() < 1e-12);
        assert!((s.get(b).value.data[0] - 0.995).abs() < 1e-12);
    }
}
