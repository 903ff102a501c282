//! Gradient verification of the full episode objective through the extractor.

use serde::{Deserialize, Serialize};

use crate::episodes::sample_episode;
use crate::error::Result;
use crate::numerics::gradcheck::{gradcheck, GradcheckReport};
use crate::numerics::{GradFault, Graph};
use crate::objectives::{episode_gradients_in, episode_objective, ObjectiveConfig};
use crate::protomodel::{init_params_with_std, ExtractorConfig, INIT_STD};
use crate::synthetic::{gaussian_dataset, GaussianSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSetup {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Weight std for the checked parameter point. Gains and biases are also moved
    /// off their identity values by a draw of this scale.
    pub init_std: f64,
    #[serde(skip)]
    pub fault: Option<GradFault>,
}

impl Default for GradcheckSetup {
    fn default() -> Self {
        Self {
            dim: 16,
            heads: 4,
            layers: 2,
            way: 3,
            shot: 2,
            queries: 2,
            seed: 0,
            step: 1e-3,
            tolerance: 1e-4,
            init_std: INIT_STD,
            fault: None,
        }
    }
}

/// Checks the gradient of the summed episode objective (classification plus prototype
/// contrastive loss) for every extractor parameter, in 64-bit arithmetic.
pub fn extractor_gradcheck(setup: &GradcheckSetup) -> Result<GradcheckReport> {
    let config = ExtractorConfig::new(setup.dim, setup.layers, setup.heads)?;
    let spec = GaussianSpec::isotropic(
        setup.way,
        setup.shot + setup.queries,
        setup.dim,
        1.0,
        0.5,
        setup.seed,
    );
    let ds = gaussian_dataset(&spec)?;
    let episode = sample_episode(&ds, setup.way, setup.shot, setup.queries, setup.seed, 0)?.cast::<f64>();
    let mut params = init_params_with_std::<f64>(config, setup.seed, setup.init_std);
    // Move gains and biases off their identity values so their gradients are generic.
    let jitter = init_params_with_std::<f64>(config, setup.seed ^ 0x5EED, setup.init_std);
    for (l, j) in params.layers_mut().iter_mut().zip(jitter.layers()) {
        for (dst, src) in [
            (&mut l.ln1_gain, &j.w_q),
            (&mut l.ln1_bias, &j.w_k),
            (&mut l.ln2_gain, &j.w_v),
            (&mut l.ln2_bias, &j.w_o),
            (&mut l.b_q, &j.w_q),
            (&mut l.b_k, &j.w_k),
            (&mut l.b_v, &j.w_v),
            (&mut l.b_o, &j.w_o),
            (&mut l.b_ff2, &j.w_ff2),
        ] {
            for (k, x) in dst.data_mut().iter_mut().enumerate() {
                *x += src.data()[k];
            }
        }
        for (k, x) in l.b_ff1.data_mut().iter_mut().enumerate() {
            *x += j.w_ff1.data()[k];
        }
    }
    let objective = ObjectiveConfig::default();
    let fault = setup.fault;
    gradcheck(
        &params,
        |p, want_grad| {
            if want_grad {
                let mut g = Graph::new();
                if let Some(f) = fault {
                    g.inject_fault(f);
                }
                let (l, grads) = episode_gradients_in(g, p, &episode, objective)?;
                Ok((l.total, Some(grads)))
            } else {
                Ok((episode_objective(Some(p), &episode, objective)?.total, None))
            }
        },
        setup.step,
        setup.tolerance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_module_passes() {
        let report = extractor_gradcheck(&GradcheckSetup::default()).unwrap();
        assert!(report.passed, "{}", report.render());
        assert_eq!(report.params.len(), 32);
    }

    #[test]
    fn injected_faults_are_detected() {
        for fault in [GradFault::MatmulLhs, GradFault::LayerNormInput] {
            let setup = GradcheckSetup { fault: Some(fault), layers: 1, ..Default::default() };
            let report = extractor_gradcheck(&setup).unwrap();
            assert!(!report.passed, "{fault:?} went unnoticed\n{}", report.render());
        }
    }
}
