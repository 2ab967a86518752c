//! Adam and RMSprop with named per-parameter state.
//!
//! Adam uses beta = (0.9, 0.999), eps = 1e-8. RMSprop uses decay 0.99,
//! eps = 1e-8 and no momentum (momentum destabilizes the stage-2 GAN, which
//! is why that stage switches algorithms at all). State arrays are keyed by
//! parameter name so they can be checkpointed next to the parameters.

use indexmap::IndexMap;
use ndarray::ArrayD;

use crate::error::{GadError, Result};
use crate::training::config::OptimKind;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const RMS_DECAY: f64 = 0.99;
const EPS: f64 = 1e-8;

/// One optimizer instance covering one group of parameters.
#[derive(Debug, Clone)]
pub struct OptState {
    kind: OptimKind,
    /// Step counter (Adam bias correction); advanced once per iteration.
    t: u64,
    /// Adam: (m, v) per parameter. RMSprop: (mean_square, unused empty).
    slots: IndexMap<String, (ArrayD<f32>, ArrayD<f32>)>,
}

impl OptState {
    pub fn new(kind: OptimKind) -> Self {
        OptState {
            kind,
            t: 0,
            slots: IndexMap::new(),
        }
    }

    pub fn kind(&self) -> OptimKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Call once per iteration, before the group's parameter updates.
    pub fn advance(&mut self) {
        self.t += 1;
    }

    /// Apply one update. `name` keys the state slot; the slot is created on
    /// first use.
    pub fn step(&mut self, name: &str, param: &mut ArrayD<f32>, grad: &ArrayD<f32>, lr: f64) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape mismatch for {name}");
        match self.kind {
            OptimKind::Adam => {
                let (m, v) = self
                    .slots
                    .entry(name.to_string())
                    .or_insert_with(|| (ArrayD::zeros(param.raw_dim()), ArrayD::zeros(param.raw_dim())));
                let b1 = ADAM_BETA1 as f32;
                let b2 = ADAM_BETA2 as f32;
                let corr1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let corr2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                let scale = (lr / corr1) as f32;
                let corr2 = corr2 as f32;
                let eps = EPS as f32;
                for ((p, g), (mm, vv)) in param
                    .iter_mut()
                    .zip(grad.iter())
                    .zip(m.iter_mut().zip(v.iter_mut()))
                {
                    *mm = b1 * *mm + (1.0 - b1) * g;
                    *vv = b2 * *vv + (1.0 - b2) * g * g;
                    *p -= scale * *mm / ((*vv / corr2).sqrt() + eps);
                }
            }
            OptimKind::Rmsprop => {
                let (ms, _) = self
                    .slots
                    .entry(name.to_string())
                    .or_insert_with(|| (ArrayD::zeros(param.raw_dim()), ArrayD::zeros(ndarray::IxDyn(&[0]))));
                let d = RMS_DECAY as f32;
                let eps = EPS as f32;
                let lr = lr as f32;
                for ((p, g), ms) in param.iter_mut().zip(grad.iter()).zip(ms.iter_mut()) {
                    *ms = d * *ms + (1.0 - d) * g * g;
                    *p -= lr * g / (ms.sqrt() + eps);
                }
            }
        }
    }

    /// Named state arrays for checkpointing, in insertion order.
    pub fn arrays(&self) -> impl Iterator<Item = (String, &ArrayD<f32>)> {
        self.slots.iter().flat_map(|(name, (a, b))| {
            let first = (format!("{name}/s0"), a);
            let second = (format!("{name}/s1"), b);
            [first, second]
        })
    }

    /// Rebuild from checkpointed state.
    pub fn restore(
        kind: OptimKind,
        t: u64,
        mut arrays: IndexMap<String, ArrayD<f32>>,
    ) -> Result<Self> {
        let mut slots = IndexMap::new();
        let names: Vec<String> = arrays
            .keys()
            .filter_map(|k| k.strip_suffix("/s0").map(|s| s.to_string()))
            .collect();
        for name in names {
            let a = arrays
                .swap_remove(&format!("{name}/s0"))
                .ok_or_else(|| GadError::Checkpoint(format!("missing optimizer slot {name}/s0")))?;
            let b = arrays
                .swap_remove(&format!("{name}/s1"))
                .ok_or_else(|| GadError::Checkpoint(format!("missing optimizer slot {name}/s1")))?;
            slots.insert(name, (a, b));
        }
        if !arrays.is_empty() {
            return Err(GadError::Checkpoint(format!(
                "unexpected optimizer arrays: {:?}",
                arrays.keys().collect::<Vec<_>>()
            )));
        }
        Ok(OptState { kind, t, slots })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut opt = OptState::new(OptimKind::Adam);
        let mut x = ArrayD::from_elem(IxDyn(&[2]), 3.0f32);
        for _ in 0..2000 {
            opt.advance();
            let grad = x.mapv(|v| 2.0 * v);
            opt.step("x", &mut x, &grad, 0.01);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn rmsprop_minimizes_a_quadratic() {
        let mut opt = OptState::new(OptimKind::Rmsprop);
        let mut x = ArrayD::from_elem(IxDyn(&[3]), -2.0f32);
        for _ in 0..3000 {
            opt.advance();
            let grad = x.mapv(|v| 2.0 * v);
            opt.step("x", &mut x, &grad, 0.005);
        }
        assert!(x.iter().all(|v| v.abs() < 1e-2), "{x:?}");
    }

    #[test]
    fn state_round_trip_preserves_trajectory() {
        let run = |split_at: Option<usize>| {
            let mut opt = OptState::new(OptimKind::Adam);
            let mut x = ArrayD::from_elem(IxDyn(&[4]), 1.0f32);
            for i in 0..100 {
                if Some(i) == split_at {
                    let arrays: IndexMap<String, ArrayD<f32>> = opt
                        .arrays()
                        .map(|(k, v)| (k, v.clone()))
                        .collect();
                    opt = OptState::restore(OptimKind::Adam, opt.step_count(), arrays).unwrap();
                }
                opt.advance();
                let grad = x.mapv(|v| v * v * v - 0.3);
                opt.step("x", &mut x, &grad, 0.02);
            }
            x
        };
        let straight = run(None);
        let resumed = run(Some(50));
        assert_eq!(straight, resumed);
    }
}
