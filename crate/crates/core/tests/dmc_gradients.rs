use dmc_core::dmc::training::{logistic_noise, GumbelParams};
use dmc_core::dmc::DmcVariant;
use dmc_core::model::{AttentionMode, DecisionMode, DmcForward, Model, ModelConfig, ParamVars};
use dmc_core::numerics::{gradcheck, NumericsError, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Largest relative error over every weight tensor of a one-layer model.
/// The objective is the LM loss, a compression loss whose target keeps it
/// strictly active, and a small term on the importance weights. The
/// head-consistency loss is left out because its kinks sit inside the
/// finite-difference stencil; its gradient is checked on its own.
fn worst_gradcheck(variant: DmcVariant, window: usize) -> f64 {
    let n = 8;
    let cfg = ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        vocab_size: 7,
        max_seq: n,
        dmc_enabled: true,
        ..ModelConfig::default()
    };
    let mut model = Model::init(cfg.clone(), 21).unwrap();
    // Scale up the projections so decisions sit in the sigmoid's sensitive
    // range and attention is not uniform.
    let layer = &mut model.weights.layers[0];
    for t in [&mut layer.wq, &mut layer.wk] {
        t.data_mut().iter_mut().for_each(|x| *x *= 2.0);
    }
    let noise = logistic_noise(&mut ChaCha8Rng::seed_from_u64(3), cfg.n_heads * n);
    let tokens = [1, 4, 4, 0, 6, 2, 3, 5];
    let mode = AttentionMode::Dmc(DmcForward {
        gumbel: GumbelParams { tau: 1.0, c: 0.0 },
        window,
        variant,
        decisions: DecisionMode::Relaxed { noise: Some(&noise) },
    });
    let count = model.weights.named().len();
    let mut worst = 0.0f64;
    for idx in 0..count {
        let target = model.weights.named()[idx].1.clone();
        let f = |tape: &mut Tape, v: Var| {
            let vars: Vec<Var> = model
                .weights
                .named()
                .into_iter()
                .enumerate()
                .map(|(i, (_, t))| if i == idx { v } else { tape.constant(t.clone()) })
                .collect();
            let params = ParamVars::from_vars(&model.weights, vars);
            let out = model
                .forward_tape(tape, &params, &tokens, &mode)
                .map_err(|e| NumericsError::Domain { op: "forward", detail: e.to_string() })?;
            let lm = tape.cross_entropy(out.logits, &tokens[1..].iter().copied().chain([0]).collect::<Vec<_>>())?;
            let cr = tape.cr_loss(&out.alphas, 8.0);
            assert!(tape.value(cr).item() > 0.0);
            let total = tape.add(lm, cr)?;
            let w_sum = tape.sum(out.omegas[0]);
            let w_sum = tape.scale(w_sum, 0.01);
            tape.add(total, w_sum)
        };
        let err = gradcheck(f, &target, 1e-4).unwrap();
        worst = worst.max(err);
    }
    worst
}

#[test]
fn full_dmc_forward_gradients() {
    for (variant, window) in [(DmcVariant::Dmc, 8), (DmcVariant::Dmc, 3), (DmcVariant::HardC, 8), (DmcVariant::UniformOmega, 4)] {
        let err = worst_gradcheck(variant, window);
        assert!(err < 1e-4, "{variant:?} w={window}: {err:e}");
    }
}
