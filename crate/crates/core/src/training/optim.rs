use serde::{Deserialize, Serialize};

use super::config::OptimizerConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Tensor};

/// Linear warmup to `peak_lr`, then linear decay to zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &OptimizerConfig) -> Result<f64> {
    let (warm, total) = (cfg.warmup_steps, cfg.total_steps);
    if step > total {
        return Err(Error::invalid(format!(
            "step {step} beyond total_steps {total}"
        )));
    }
    if warm > total {
        return Err(Error::invalid("warmup_steps exceeds total_steps"));
    }
    Ok(if step <= warm && warm > 0 {
        cfg.peak_lr * (step as f64 / warm as f64)
    } else {
        cfg.peak_lr * ((total - step) as f64 / (total - warm) as f64)
    })
}

/// Optimizer progress and Adam moments.
#[derive(Clone, Debug)]
pub struct TrainState<T> {
    /// Completed optimizer steps.
    pub step: usize,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub rng: RngState,
    pub best_valid: Option<f64>,
}

/// Position in the data stream: shuffles are a function of `(seed, epoch)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
    /// Next example within the epoch's permutation.
    pub cursor: usize,
    /// Micro-batches drawn so far; keys the dropout streams.
    pub micro_batches: u64,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: &ParamStore<T>, seed: u64) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.tensor.shape()))
                .collect()
        };
        TrainState {
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            rng: RngState {
                seed,
                ..RngState::default()
            },
            best_valid: None,
        }
    }
}

/// One AdamW update at learning rate `lr`. Missing gradients count as zero.
///
/// Weight decay is decoupled: `p ← p − lr·wd·p`, then the bias-corrected
/// Adam step.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut TrainState<T>,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.first_moment.len() != params.len() {
        return Err(Error::invalid(
            "gradient and moment sets must match the parameter store",
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if let Some(bad) = g.data().iter().position(|x| !x.is_finite()) {
                let name = &params.iter().nth(i).expect("index in range").name;
                return Err(Error::NonFinite(format!(
                    "gradient of parameter `{name}` (element {bad})"
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = T::lit(1.0 - lr * cfg.weight_decay);
    for (i, entry) in params.iter_mut().enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let p = entry.tensor.data_mut();
        let g = grads[i].as_ref().map(Tensor::data);
        for j in 0..p.len() {
            let gj = g.map_or(0.0, |g| g[j].to_f64_lossy());
            let mj = b1 * m[j].to_f64_lossy() + (1.0 - b1) * gj;
            let vj = b2 * v[j].to_f64_lossy() + (1.0 - b2) * gj * gj;
            m[j] = T::lit(mj);
            v[j] = T::lit(vj);
            p[j] *= decay;
            p[j] -= T::lit(lr * (mj / c1) / ((vj / c2).sqrt() + cfg.epsilon));
        }
    }
    Ok(())
}
